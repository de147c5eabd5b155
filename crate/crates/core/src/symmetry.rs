//! Invariant subspaces of `L₀` and Wigner symmetries of the Bloch dynamics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algebra::{
    c, canonical_basis, eig_full, expm, min_eigenvalue, null_space, orthogonal_complement,
    orthonormal_span, CMat, CVec, EigenCluster, OperatorBasis, RMat, RVec, C64, I,
};
use crate::constraints::Ensemble;
use crate::error::{Error, Result};
use crate::lm::{self, LmOptions};
use crate::model::BlochModel;

/// Relative tolerance of the block certificate `‖R₀ᵀL₀I₀‖ ≤ tol·‖L₀‖`.
pub const BLOCK_TOL: f64 = 1e-8;

/// Where a building block of an invariant subspace came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceKind {
    /// `k` of the ordinary real eigenvectors of the eigenvalue.
    RealEigenvectors(usize),
    /// Real and imaginary parts of `k` complex eigenvectors.
    ComplexPair(usize),
    /// Span of the first `rank` vectors of a Jordan chain.
    JordanPrefix { chain: usize, rank: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceSource {
    pub eigenvalue: C64,
    pub kind: SourceKind,
}

/// Continuous family of invariant subspaces obtained by rotating the
/// representative inside a degenerate eigenspace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceFamily {
    /// Antisymmetric generators; `exp(θG)` maps the representative to other
    /// family members.
    pub generators: Vec<RMat>,
    pub description: String,
}

/// Invariant subspace `𝕴₀` of the translated coherence space, with its
/// orthogonal complement `𝕽₀`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantSubspace {
    basis_i0: RMat,
    basis_r0: RMat,
    /// `‖R₀ᵀL₀I₀‖ / ‖L₀‖`.
    pub certificate: f64,
    /// Coherence vector of a pure state in `x_ss + 𝕴₀`.
    pub witness: RVec,
    pub sources: Vec<SubspaceSource>,
    pub family: Option<SubspaceFamily>,
}

impl InvariantSubspace {
    /// Certifies the span of `columns` (need not be orthonormal).
    pub fn from_basis(bm: &BlochModel, columns: &RMat) -> Result<Self> {
        let n = bm.n();
        if columns.nrows() != n {
            return Err(Error::Shape {
                expected: n,
                found: columns.nrows(),
            });
        }
        let i0 = canonical_basis(&orthonormal_span(columns, 1e-10));
        Self::certify(bm, i0, Vec::new(), None)
    }

    fn certify(
        bm: &BlochModel,
        i0: RMat,
        sources: Vec<SubspaceSource>,
        family: Option<SubspaceFamily>,
    ) -> Result<Self> {
        let d = bm.dim();
        let n = bm.n();
        let dim = i0.ncols();
        if dim + 1 < d || dim >= n {
            return Err(Error::InvalidArgument(format!(
                "subspace dimension {dim} outside [{}, {}]",
                d - 1,
                n - 1
            )));
        }
        let r0 = orthogonal_complement(&i0);
        let cert = (r0.transpose() * &bm.l0 * &i0).norm() / bm.scale();
        if cert > BLOCK_TOL {
            return Err(Error::InconsistentSubspace(cert));
        }
        let witness = pure_witness(bm, &r0).ok_or(Error::InfeasibleSubspace)?;
        Ok(Self {
            basis_i0: i0,
            basis_r0: r0,
            certificate: cert,
            witness,
            sources,
            family,
        })
    }

    pub fn basis_i0(&self) -> &RMat {
        &self.basis_i0
    }

    pub fn basis_r0(&self) -> &RMat {
        &self.basis_r0
    }

    pub fn n(&self) -> usize {
        self.basis_i0.ncols()
    }

    /// Distance of `x` from the affine subspace `x_ss + 𝕴₀`.
    pub fn distance(&self, bm: &BlochModel, x: &RVec) -> f64 {
        (self.basis_r0.transpose() * (x - &bm.x_ss.0)).norm()
    }

    /// Orthogonal projector onto `𝕴₀`.
    pub fn projector(&self) -> RMat {
        &self.basis_i0 * self.basis_i0.transpose()
    }

    pub fn same_span(&self, other: &InvariantSubspace) -> bool {
        self.n() == other.n() && (self.projector() - other.projector()).norm() < 1e-6
    }
}

/// Searches `x = x(ψ)` with `R₀ᵀ(x − x_ss) = 0`.
fn pure_witness(bm: &BlochModel, r0: &RMat) -> Option<RVec> {
    let d = bm.dim();
    let basis = &bm.basis;
    let x_ss = &bm.x_ss.0;
    let resid = |p: &RVec| -> RVec {
        let psi = CVec::from_iterator(d, (0..d).map(|i| c(p[2 * i], p[2 * i + 1])));
        r0.transpose() * (basis.pure_to_bloch(&psi) - x_ss)
    };
    if r0.ncols() == 0 {
        return Some(basis.pure_to_bloch(&CVec::from_element(d, c(1.0, 0.0))));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..64 {
        let p0 = RVec::from_iterator(2 * d, (0..2 * d).map(|_| StandardNormal.sample(&mut rng)));
        let f = |p: &RVec| {
            let r = resid(p);
            let j = lm::numeric_jacobian(&resid, p, &r);
            (r, j)
        };
        let out = lm::minimize(
            f,
            p0,
            LmOptions {
                max_iter: 200,
                tol: 1e-13,
            },
        );
        if out.residual <= 1e-10 {
            let psi = CVec::from_iterator(d, (0..d).map(|i| c(out.x[2 * i], out.x[2 * i + 1])));
            return Some(basis.pure_to_bloch(&psi));
        }
    }
    None
}

/// One admissible choice of invariant vectors from a single eigenvalue cluster.
struct Block {
    vectors: Vec<RVec>,
    source: SubspaceSource,
    generators: Vec<RMat>,
}

fn rotation_generator(a: &RVec, b: &RVec) -> RMat {
    a * b.transpose() - b * a.transpose()
}

fn cluster_blocks(cl: &EigenCluster) -> Vec<Block> {
    let mut out = Vec::new();
    if cl.is_real() {
        let vs = cl.real_vectors();
        let g = vs.len();
        for k in 1..=g {
            let generators = (0..k)
                .flat_map(|a| (k..g).map(move |b| (a, b)))
                .map(|(a, b)| rotation_generator(&vs[a], &vs[b]))
                .collect();
            out.push(Block {
                vectors: vs[..k].to_vec(),
                source: SubspaceSource {
                    eigenvalue: cl.value,
                    kind: SourceKind::RealEigenvectors(k),
                },
                generators,
            });
        }
    } else if cl.value.im > 0.0 {
        for k in 1..=cl.vectors.len() {
            let mut vectors = Vec::new();
            for v in &cl.vectors[..k] {
                vectors.push(v.map(|z| z.re));
                vectors.push(v.map(|z| z.im));
            }
            out.push(Block {
                vectors,
                source: SubspaceSource {
                    eigenvalue: cl.value,
                    kind: SourceKind::ComplexPair(k),
                },
                generators: Vec::new(),
            });
        }
    } else {
        return out;
    }
    for (ci, chain) in cl.chains.iter().enumerate() {
        for rank in 2..=chain.vectors.len() {
            let mut cols = Vec::new();
            for v in &chain.vectors[..rank] {
                cols.push(v.map(|z| z.re));
                cols.push(v.map(|z| z.im));
            }
            out.push(Block {
                vectors: cols,
                source: SubspaceSource {
                    eigenvalue: cl.value,
                    kind: SourceKind::JordanPrefix { chain: ci, rank },
                },
                generators: Vec::new(),
            });
        }
    }
    out
}

/// Enumerates invariant subspaces of dimension `n_min..=n_max` built from
/// eigenvectors, complex pairs, Jordan-chain prefixes and their unions. Only
/// subspaces that contain a pure state are returned.
pub fn find_invariant_subspaces(
    bm: &BlochModel,
    n_min: usize,
    n_max: usize,
) -> Result<Vec<InvariantSubspace>> {
    let d = bm.dim();
    let n = bm.n();
    if n_min + 1 < d || n_max >= n || n_min > n_max {
        return Err(Error::InvalidArgument(format!(
            "subspace dimensions must satisfy {} <= n_min <= n_max <= {}",
            d - 1,
            n - 1
        )));
    }
    let spectrum = eig_full(&bm.l0)?;
    let blocks: Vec<Vec<Block>> = spectrum
        .clusters
        .iter()
        .map(cluster_blocks)
        .filter(|b| !b.is_empty())
        .collect();

    let mut found: Vec<InvariantSubspace> = Vec::new();
    let mut choice: Vec<Option<usize>> = vec![None; blocks.len()];
    enumerate_unions(&blocks, 0, 0, n_max, &mut choice, &mut |choice| {
        let picked: Vec<&Block> = choice
            .iter()
            .enumerate()
            .filter_map(|(ci, o)| o.map(|bi| &blocks[ci][bi]))
            .collect();
        let cols: Vec<RVec> = picked.iter().flat_map(|b| b.vectors.iter().cloned()).collect();
        if cols.is_empty() {
            return;
        }
        let span = orthonormal_span(&RMat::from_columns(&cols), 1e-8);
        let dim = span.ncols();
        if dim < n_min || dim > n_max {
            return;
        }
        let generators: Vec<RMat> = picked.iter().flat_map(|b| b.generators.iter().cloned()).collect();
        let family = (!generators.is_empty()).then(|| SubspaceFamily {
            description: format!(
                "rotations within a degenerate eigenspace ({} generator{})",
                generators.len(),
                if generators.len() == 1 { "" } else { "s" }
            ),
            generators,
        });
        let sources = picked.iter().map(|b| b.source.clone()).collect();
        match InvariantSubspace::certify(bm, canonical_basis(&span), sources, family) {
            Ok(sub) => {
                if !found.iter().any(|f| f.same_span(&sub)) {
                    found.push(sub);
                }
            }
            Err(e) => log::debug!("candidate subspace rejected: {e}"),
        }
    });
    found.sort_by_key(|s| s.n());
    Ok(found)
}

fn enumerate_unions(
    blocks: &[Vec<Block>],
    idx: usize,
    dim: usize,
    n_max: usize,
    choice: &mut Vec<Option<usize>>,
    visit: &mut impl FnMut(&[Option<usize>]),
) {
    if idx == blocks.len() {
        visit(choice);
        return;
    }
    choice[idx] = None;
    enumerate_unions(blocks, idx + 1, dim, n_max, choice, visit);
    for (bi, b) in blocks[idx].iter().enumerate() {
        // complex blocks carry Re and Im, real chains may too; rank is checked later
        let add = match b.source.kind {
            SourceKind::RealEigenvectors(k) => k,
            SourceKind::ComplexPair(k) => 2 * k,
            SourceKind::JordanPrefix { rank, .. } => {
                if b.source.eigenvalue.im == 0.0 {
                    rank
                } else {
                    2 * rank
                }
            }
        };
        if dim + add > n_max {
            continue;
        }
        choice[idx] = Some(bi);
        enumerate_unions(blocks, idx + 1, dim + add, n_max, choice, visit);
    }
    choice[idx] = None;
}

/// `L₀` in the basis `(𝕴₀, 𝕽₀)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockForm {
    pub l_i0: RMat,
    pub l_i0_r0: RMat,
    pub l_r0: RMat,
    /// `𝕽₀` is invariant as well (`L_{𝕴₀,𝕽₀} = 0`).
    pub dual_invariant: bool,
}

pub fn block_form(bm: &BlochModel, sub: &InvariantSubspace) -> Result<BlockForm> {
    let i0 = sub.basis_i0();
    let r0 = sub.basis_r0();
    let scale = bm.scale();
    let lower = (r0.transpose() * &bm.l0 * i0).norm() / scale;
    if lower > BLOCK_TOL {
        return Err(Error::InconsistentSubspace(lower));
    }
    let l_i0_r0 = i0.transpose() * &bm.l0 * r0;
    Ok(BlockForm {
        l_i0: i0.transpose() * &bm.l0 * i0,
        dual_invariant: l_i0_r0.norm() <= BLOCK_TOL * scale,
        l_i0_r0,
        l_r0: r0.transpose() * &bm.l0 * r0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SymmetryKind {
    Unitary,
    Antiunitary,
    Unknown,
}

/// Orthogonal map `T₀` of the coherence space induced by a Wigner symmetry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WignerSymmetry {
    t0: RMat,
    pub kind: SymmetryKind,
    pub generator_tag: Option<String>,
    /// Lie-algebra generator when the map belongs to a continuous family;
    /// `t0 = exp(angle·generator)`.
    pub generator: Option<RMat>,
    pub angle: Option<f64>,
}

impl WignerSymmetry {
    /// Checks every defining condition and classifies the map.
    pub fn certify(bm: &BlochModel, t0: RMat) -> Result<Self> {
        let n = bm.n();
        if t0.nrows() != n || t0.ncols() != n {
            return Err(Error::Shape {
                expected: n,
                found: t0.nrows(),
            });
        }
        let orth = (t0.transpose() * &t0 - RMat::identity(n, n)).norm();
        if orth > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "T0 is not orthogonal (deviation {orth:e})"
            )));
        }
        let comm = (&t0 * &bm.l0 - &bm.l0 * &t0).norm() / bm.scale();
        if comm > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "T0 does not commute with L0 (relative {comm:e})"
            )));
        }
        let b_shift = (&t0 * &bm.b - &bm.b).norm();
        if b_shift > 1e-8 * bm.b.norm().max(1e-300) && b_shift > 1e-14 {
            return Err(Error::InvalidArgument(format!("T0 moves b by {b_shift:e}")));
        }
        let ss_shift = (&t0 * &bm.x_ss.0 - &bm.x_ss.0).norm();
        if ss_shift > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "T0 moves the steady state by {ss_shift:e}"
            )));
        }
        let worst = state_set_margin(&bm.basis, &t0, 200);
        if worst < -1e-8 {
            return Err(Error::SymmetryViolation(worst));
        }
        let kind = classify(&bm.basis, &t0);
        Ok(Self {
            t0,
            kind,
            generator_tag: None,
            generator: None,
            angle: None,
        })
    }

    pub fn t0(&self) -> &RMat {
        &self.t0
    }

    pub fn antiunitary(&self) -> bool {
        self.kind == SymmetryKind::Antiunitary
    }

    /// `exp(θ·generator)` for continuous symmetries.
    pub fn rotation(&self, bm: &BlochModel, theta: f64) -> Option<Result<WignerSymmetry>> {
        let g = self.generator.as_ref()?;
        Some(WignerSymmetry::certify(bm, expm(&(g * theta))).map(|mut w| {
            w.generator = Some(g.clone());
            w.angle = Some(theta);
            w.generator_tag = self.generator_tag.clone();
            w
        }))
    }

    /// `T₀ᵐ`.
    pub fn power(&self, m: usize) -> RMat {
        let n = self.t0.nrows();
        (0..m).fold(RMat::identity(n, n), |acc, _| &self.t0 * acc)
    }

    /// Smallest `ℓ ≤ max` with `T₀ˡ = 1`.
    pub fn order(&self, max: usize) -> Option<usize> {
        let n = self.t0.nrows();
        let mut p = RMat::identity(n, n);
        for l in 1..=max {
            p = &self.t0 * p;
            if (&p - RMat::identity(n, n)).norm() < 1e-9 {
                return Some(l);
            }
        }
        None
    }
}

fn random_pure(d: usize, rng: &mut ChaCha8Rng) -> CVec {
    let psi = CVec::from_iterator(
        d,
        (0..d).map(|_| c(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng))),
    );
    let n = psi.norm();
    psi / c(n, 0.0)
}

/// Smallest eigenvalue over images of random pure states.
fn state_set_margin(basis: &OperatorBasis, t0: &RMat, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10c);
    let mut worst = f64::INFINITY;
    for _ in 0..samples {
        let x = basis.pure_to_bloch(&random_pure(basis.dim(), &mut rng));
        let rho = basis.bloch_to_rho(&(t0 * x)).expect("length checked");
        worst = worst.min(min_eigenvalue(&rho));
    }
    worst
}

fn op_from_coords(basis: &OperatorBasis, v: &RVec) -> CMat {
    let d = basis.dim();
    let mut m = CMat::zeros(d, d);
    for (vj, s) in v.iter().zip(basis.traceless()) {
        m += s * c(*vj, 0.0);
    }
    m
}

fn coords_of(basis: &OperatorBasis, m: &CMat) -> RVec {
    RVec::from_iterator(
        basis.n_coherence(),
        basis
            .traceless()
            .iter()
            .map(|s| 0.5 * crate::algebra::trace_product(s, m).re),
    )
}

/// Unitary maps preserve `i[X, Y]`, antiunitary ones flip its sign.
fn classify(basis: &OperatorBasis, t0: &RMat) -> SymmetryKind {
    let n = basis.n_coherence();
    let mut rng = ChaCha8Rng::seed_from_u64(0xc1a5);
    let mut plus = 0.0f64;
    let mut minus = 0.0f64;
    for _ in 0..8 {
        let xv = RVec::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let yv = RVec::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let x = op_from_coords(basis, &xv);
        let y = op_from_coords(basis, &yv);
        let comm = (&x * &y - &y * &x) * I;
        let lhs = t0 * coords_of(basis, &comm);
        let tx = op_from_coords(basis, &(t0 * &xv));
        let ty = op_from_coords(basis, &(t0 * &yv));
        let rhs = coords_of(basis, &((&tx * &ty - &ty * &tx) * I));
        let scale = lhs.norm().max(1e-300);
        plus = plus.max((&lhs - &rhs).norm() / scale);
        minus = minus.max((&lhs + &rhs).norm() / scale);
    }
    if plus < 1e-8 {
        SymmetryKind::Unitary
    } else if minus < 1e-8 {
        SymmetryKind::Antiunitary
    } else {
        SymmetryKind::Unknown
    }
}

/// Continuous and discrete Wigner symmetries of the Bloch dynamics.
///
/// Continuous ones come from antisymmetric `A` with `AL₀ = L₀A`, `Ab = 0`
/// acting as derivations of the operator algebra; each is returned as the
/// element `exp(π/2·A)` carrying its generator. Discrete ones are the signed
/// coordinate permutations that pass certification.
pub fn find_wigner_symmetries(bm: &BlochModel) -> Vec<WignerSymmetry> {
    let mut out = Vec::new();
    for (i, g) in lie_generators(bm).into_iter().enumerate() {
        let theta = std::f64::consts::FRAC_PI_2;
        match WignerSymmetry::certify(bm, expm(&(&g * theta))) {
            Ok(mut w) => {
                w.generator = Some(g);
                w.angle = Some(theta);
                w.generator_tag = Some(format!("lie-{i}"));
                out.push(w);
            }
            Err(e) => log::debug!("generator {i} rejected: {e}"),
        }
    }
    for t0 in signed_permutations(bm, 256) {
        match WignerSymmetry::certify(bm, t0) {
            Ok(w) => out.push(w),
            Err(e) => log::debug!("signed permutation rejected: {e}"),
        }
    }
    out
}

/// Basis of `{A antisymmetric : AL₀ = L₀A, Ab = 0, A derivation}`, each
/// normalized to unit rotation rate.
pub fn lie_generators(bm: &BlochModel) -> Vec<RMat> {
    let n = bm.n();
    let basis = &bm.basis;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let unit = |p: usize| -> RMat {
        let (i, j) = pairs[p];
        let mut a = RMat::zeros(n, n);
        a[(i, j)] = 1.0;
        a[(j, i)] = -1.0;
        a
    };
    // structure constants: i[σa, σb] in coordinates
    let sig: Vec<RVec> = (0..n)
        .map(|a| {
            let mut v = RVec::zeros(n);
            v[a] = 1.0;
            v
        })
        .collect();
    let ops: Vec<CMat> = sig.iter().map(|v| op_from_coords(basis, v)).collect();
    let bracket = |x: &RVec, y: &RVec| -> RVec {
        let xo = op_from_coords(basis, x);
        let yo = op_from_coords(basis, y);
        coords_of(basis, &((&xo * &yo - &yo * &xo) * I))
    };
    let structure: Vec<Vec<RVec>> = (0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a < b {
                        coords_of(basis, &((&ops[a] * &ops[b] - &ops[b] * &ops[a]) * I))
                    } else {
                        RVec::zeros(n)
                    }
                })
                .collect()
        })
        .collect();
    let mut cols = Vec::with_capacity(pairs.len());
    for p in 0..pairs.len() {
        let a = unit(p);
        let mut rows: Vec<f64> = Vec::new();
        rows.extend((&a * &bm.l0 - &bm.l0 * &a).iter());
        rows.extend((&a * &bm.b).iter());
        for x in 0..n {
            for y in (x + 1)..n {
                let lhs = &a * &structure[x][y];
                let rhs = bracket(&a.column(x).into_owned(), &sig[y])
                    + bracket(&sig[x], &a.column(y).into_owned());
                rows.extend((lhs - rhs).iter());
            }
        }
        cols.push(RVec::from_vec(rows));
    }
    let system = RMat::from_columns(&cols);
    let kernel = null_space(&system, 1e-9 * (1.0 + system.norm()));
    kernel
        .column_iter()
        .map(|k| {
            let mut a = RMat::zeros(n, n);
            for (p, coef) in k.iter().enumerate() {
                a += unit(p) * *coef;
            }
            let rate = a
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|z| z.im.abs())
                .fold(0.0, f64::max);
            let a = a / rate.max(1e-300);
            // sign: first significant upper-triangle entry negative, i.e. e_i → e_j positive
            let first = pairs
                .iter()
                .map(|&(i, j)| a[(i, j)])
                .find(|v| v.abs() > 1e-9)
                .unwrap_or(0.0);
            if first > 0.0 {
                -a
            } else {
                a
            }
        })
        .collect()
}

/// Signed permutation matrices `T` (other than the identity) with
/// `TL₀Tᵀ = L₀` and `Tb = b`, by backtracking.
fn signed_permutations(bm: &BlochModel, cap: usize) -> Vec<RMat> {
    let n = bm.n();
    let tol = 1e-9 * bm.scale();
    let btol = 1e-9 * (1.0 + bm.b.norm());
    let l0 = &bm.l0;
    let b = &bm.b;
    let mut out = Vec::new();
    let mut perm = vec![usize::MAX; n];
    let mut sign = vec![0.0; n];
    let mut used = vec![false; n];
    let mut budget = 2_000_000usize;
    #[allow(clippy::too_many_arguments)]
    fn go(
        i: usize,
        n: usize,
        l0: &RMat,
        b: &RVec,
        tol: f64,
        btol: f64,
        perm: &mut Vec<usize>,
        sign: &mut Vec<f64>,
        used: &mut Vec<bool>,
        out: &mut Vec<RMat>,
        cap: usize,
        budget: &mut usize,
    ) {
        if out.len() >= cap || *budget == 0 {
            return;
        }
        *budget -= 1;
        if i == n {
            let is_identity = (0..n).all(|k| perm[k] == k && sign[k] > 0.0);
            if !is_identity {
                let mut t = RMat::zeros(n, n);
                for k in 0..n {
                    t[(perm[k], k)] = sign[k];
                }
                out.push(t);
            }
            return;
        }
        for target in 0..n {
            if used[target] {
                continue;
            }
            for s in [1.0, -1.0] {
                if (s * b[i] - b[target]).abs() > btol {
                    continue;
                }
                if (l0[(i, i)] - l0[(target, target)]).abs() > tol {
                    continue;
                }
                let consistent = (0..i).all(|k| {
                    let (pk, sk) = (perm[k], sign[k]);
                    (s * sk * l0[(i, k)] - l0[(target, pk)]).abs() <= tol
                        && (s * sk * l0[(k, i)] - l0[(pk, target)]).abs() <= tol
                });
                if !consistent {
                    continue;
                }
                perm[i] = target;
                sign[i] = s;
                used[target] = true;
                go(i + 1, n, l0, b, tol, btol, perm, sign, used, out, cap, budget);
                used[target] = false;
            }
        }
    }
    go(
        0, n, l0, b, tol, btol, &mut perm, &mut sign, &mut used, &mut out, cap, &mut budget,
    );
    out
}

/// Outcome of the combined subspace/Wigner conditions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointReport {
    /// `max(‖T_{𝕴₀,𝕽₀}‖, ‖T_{𝕽₀,𝕴₀}‖)`.
    pub off_block: f64,
    /// `‖T_{𝕴₀}L_{𝕴₀} − L_{𝕴₀}T_{𝕴₀}‖ / ‖L₀‖`.
    pub restricted_commutator: f64,
    /// `‖T₀x_ss − x_ss‖`.
    pub steady_state_shift: f64,
    pub block_diagonal: bool,
    pub commutes_on_subspace: bool,
    pub fixes_steady_state: bool,
    /// All three conditions.
    pub joint: bool,
    /// `T₀` maps `𝕴₀` into itself and satisfies the conditions there, without
    /// requiring anything on `𝕽₀`.
    pub subspace_only: bool,
    pub t_i0: RMat,
}

pub fn check_joint(sub: &InvariantSubspace, w: &WignerSymmetry, bm: &BlochModel) -> JointReport {
    let i0 = sub.basis_i0();
    let r0 = sub.basis_r0();
    let t = w.t0();
    let into = (r0.transpose() * t * i0).norm();
    let out_of = (i0.transpose() * t * r0).norm();
    let t_i0 = i0.transpose() * t * i0;
    let l_i0 = i0.transpose() * &bm.l0 * i0;
    let restricted = (&t_i0 * &l_i0 - &l_i0 * &t_i0).norm() / bm.scale();
    let shift = (t * &bm.x_ss.0 - &bm.x_ss.0).norm();
    let tol = 1e-8;
    let block_diagonal = into.max(out_of) <= tol;
    let commutes = restricted <= tol;
    let fixes = shift <= tol;
    JointReport {
        off_block: into.max(out_of),
        restricted_commutator: restricted,
        steady_state_shift: shift,
        block_diagonal,
        commutes_on_subspace: commutes,
        fixes_steady_state: fixes,
        joint: block_diagonal && commutes && fixes,
        subspace_only: into <= tol && commutes && fixes,
        t_i0,
    }
}

/// Image of an ensemble under a symmetry; rates are unchanged.
pub fn apply_wigner(w: &WignerSymmetry, ens: &Ensemble) -> Result<Ensemble> {
    let basis = OperatorBasis::new(ens.dim())?;
    let mut states = Vec::with_capacity(ens.k());
    for x in ens.states() {
        if x.len() != w.t0().ncols() {
            return Err(Error::Shape {
                expected: w.t0().ncols(),
                found: x.len(),
            });
        }
        let y = w.t0() * &x.0;
        let m = min_eigenvalue(&basis.bloch_to_rho(&y)?);
        if m < -1e-8 {
            return Err(Error::SymmetryViolation(m));
        }
        states.push(y.into());
    }
    Ensemble::new(ens.dim(), states, ens.kappa().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::model::vectorize;

    fn rf(omega: f64) -> BlochModel {
        vectorize(
            &catalog::resonance_fluorescence(1.0, omega).unwrap(),
            &OperatorBasis::new(2).unwrap(),
        )
        .unwrap()
    }

    fn ae(gm: f64, gp: f64) -> BlochModel {
        vectorize(
            &catalog::absorption_emission(gm, gp).unwrap(),
            &OperatorBasis::new(2).unwrap(),
        )
        .unwrap()
    }

    fn axis(i: usize) -> RVec {
        let mut v = RVec::zeros(3);
        v[i] = 1.0;
        v
    }

    #[test]
    fn rf_subspaces_real_spectrum() {
        let bm = rf(0.18);
        let subs = find_invariant_subspaces(&bm, 1, 2).unwrap();
        let lines: Vec<_> = subs.iter().filter(|s| s.n() == 1).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines
            .iter()
            .any(|s| (s.basis_i0().column(0) - axis(0)).norm() < 1e-10));
        let disc = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(1), axis(2)])).unwrap();
        assert!(subs.iter().any(|s| s.same_span(&disc)));
    }

    #[test]
    fn rf_subspaces_complex_spectrum() {
        let bm = rf(0.5);
        let subs = find_invariant_subspaces(&bm, 1, 2).unwrap();
        assert_eq!(subs.len(), 2);
        assert_eq!(subs[0].n(), 1);
        assert_eq!(subs[1].n(), 2);
        assert!(subs[1].distance(&bm, &(bm.x_ss.0.clone() + axis(1))) < 1e-10);
    }

    #[test]
    fn ae_degenerate_family() {
        let bm = ae(1.0, 0.3);
        let subs = find_invariant_subspaces(&bm, 1, 2).unwrap();
        assert_eq!(subs.len(), 4);
        let diameter = subs
            .iter()
            .find(|s| s.n() == 1 && s.family.is_some())
            .expect("diameter family");
        assert!(diameter.basis_i0()[(2, 0)].abs() < 1e-12);
        assert!(subs.iter().any(|s| s.n() == 1
            && s.family.is_none()
            && (s.basis_i0().column(0) - axis(2)).norm() < 1e-12));
    }

    #[test]
    fn block_forms() {
        let bm = rf(0.18);
        let u = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(0)])).unwrap();
        let bf = block_form(&bm, &u).unwrap();
        assert!((bf.l_i0[(0, 0)] + 0.5).abs() < 1e-12);
        assert!(bf.dual_invariant);
        let subs = find_invariant_subspaces(&bm, 1, 1).unwrap();
        let ray = subs.iter().find(|s| s.basis_i0()[(0, 0)].abs() < 1e-9).unwrap();
        assert!(!block_form(&bm, ray).unwrap().dual_invariant);
        let bad = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(1)]));
        assert!(matches!(bad, Err(Error::InconsistentSubspace(_))));
    }

    #[test]
    fn rf_symmetries() {
        let bm = rf(0.18);
        let ws = find_wigner_symmetries(&bm);
        assert_eq!(ws.len(), 1);
        let t = RMat::from_diagonal(&RVec::from_vec(vec![-1.0, 1.0, 1.0]));
        assert!((ws[0].t0() - t).norm() < 1e-14);
        assert!(ws[0].antiunitary());
    }

    #[test]
    fn ae_symmetries() {
        let bm = ae(1.0, 0.3);
        let gens = lie_generators(&bm);
        assert_eq!(gens.len(), 1);
        assert!((gens[0].abs() - (axis(0) * axis(1).transpose() + axis(1) * axis(0).transpose())).norm() < 1e-10);
        let ws = find_wigner_symmetries(&bm);
        let rot = ws.iter().find(|w| w.generator.is_some()).unwrap();
        assert_eq!(rot.kind, SymmetryKind::Unitary);
        let third = rot.rotation(&bm, 2.0 * std::f64::consts::PI / 3.0).unwrap().unwrap();
        assert_eq!(third.order(10), Some(3));
        let z_flip = RMat::from_diagonal(&RVec::from_vec(vec![1.0, 1.0, -1.0]));
        assert!(!ws.iter().any(|w| (w.t0() - &z_flip).norm() < 1e-12));
        let balanced = ae(1.0, 1.0);
        assert!(find_wigner_symmetries(&balanced)
            .iter()
            .any(|w| (w.t0() - &z_flip).norm() < 1e-12));
    }

    #[test]
    fn joint_conditions() {
        let bm = rf(0.18);
        let w = WignerSymmetry::certify(&bm, RMat::from_diagonal(&RVec::from_vec(vec![-1.0, 1.0, 1.0])))
            .unwrap();
        let u = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(0)])).unwrap();
        let rep = check_joint(&u, &w, &bm);
        assert!(rep.joint);
        assert!((rep.t_i0[(0, 0)] + 1.0).abs() < 1e-14);
        let disc = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(1), axis(2)])).unwrap();
        let rep = check_joint(&disc, &w, &bm);
        assert!(rep.joint);
        assert!((rep.t_i0.clone() - RMat::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn jordan_case_rebit_plane() {
        let bm = rf(0.25);
        let spec = eig_full(&bm.l0).unwrap();
        assert!(spec.is_defective());
        let subs = find_invariant_subspaces(&bm, 1, 2).unwrap();
        let disc = InvariantSubspace::from_basis(&bm, &RMat::from_columns(&[axis(1), axis(2)])).unwrap();
        assert!(subs.iter().any(|s| s.same_span(&disc)
            && s.sources.iter().any(|src| matches!(src.kind, SourceKind::JordanPrefix { rank: 2, .. }))));
    }
}
