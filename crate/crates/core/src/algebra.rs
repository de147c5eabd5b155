//! Hermitian operator bases, coherence (generalized Bloch) vectors,
//! superoperators and the eigen/null-space primitives used throughout the
//! crate.
//!
//! The traceless basis elements are normalized to `Tr[σᵢσⱼ] = 2δᵢⱼ`, so a
//! density matrix is `ρ = (1/D)(1 + Σⱼ xⱼσⱼ)` with `xᵢ = (D/2)Tr[ρσᵢ]` and pure
//! states sit at radius `√(D(D−1)/2)`.

use std::ops::{Deref, DerefMut};

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;
pub type RMat = DMatrix<f64>;
pub type RVec = DVector<f64>;

pub(crate) const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub(crate) fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Generalized Gell-Mann basis `σ₁..σ_{D²}` with `σ_{D²} = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorBasis {
    dim: usize,
    elements: Vec<CMat>,
}

impl OperatorBasis {
    /// Builds the basis for a `dim`-level system.
    ///
    /// Ordering: for every pair `j < k` (lexicographic) the symmetric element
    /// `|j⟩⟨k| + |k⟩⟨j|` followed by the antisymmetric `−i|j⟩⟨k| + i|k⟩⟨j|`,
    /// then the `D−1` diagonal elements, then the identity. For `D = 2` this is
    /// `{σx, σy, σz, 1}`.
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        let mut elements = Vec::with_capacity(dim * dim);
        for j in 0..dim {
            for k in (j + 1)..dim {
                let mut sym = CMat::zeros(dim, dim);
                sym[(j, k)] = c(1.0, 0.0);
                sym[(k, j)] = c(1.0, 0.0);
                elements.push(sym);
                let mut asym = CMat::zeros(dim, dim);
                asym[(j, k)] = c(0.0, -1.0);
                asym[(k, j)] = c(0.0, 1.0);
                elements.push(asym);
            }
        }
        for l in 1..dim {
            let norm = (2.0 / (l * (l + 1)) as f64).sqrt();
            let mut diag = CMat::zeros(dim, dim);
            for j in 0..l {
                diag[(j, j)] = c(norm, 0.0);
            }
            diag[(l, l)] = c(-(l as f64) * norm, 0.0);
            elements.push(diag);
        }
        elements.push(CMat::identity(dim, dim));
        Ok(Self { dim, elements })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of coherence coordinates, `D² − 1`.
    pub fn n_coherence(&self) -> usize {
        self.dim * self.dim - 1
    }

    /// All `D²` elements, identity last.
    pub fn elements(&self) -> &[CMat] {
        &self.elements
    }

    /// The `D² − 1` traceless elements.
    pub fn traceless(&self) -> &[CMat] {
        &self.elements[..self.n_coherence()]
    }

    /// Squared radius of the pure-state sphere, `D(D−1)/2`.
    pub fn pure_radius_sq(&self) -> f64 {
        (self.dim * (self.dim - 1)) as f64 / 2.0
    }

    pub fn rho_to_bloch(&self, rho: &CMat) -> Result<CoherenceVector> {
        self.check_square(rho)?;
        let tr = rho.trace();
        if (tr - c(1.0, 0.0)).norm() > 1e-10 {
            return Err(Error::Normalization(tr.re));
        }
        Ok(CoherenceVector(self.coordinates_unnormalized(rho)))
    }

    /// `xᵢ = (D/2) Re Tr[ρσᵢ]` without any trace check.
    pub fn coordinates_unnormalized(&self, rho: &CMat) -> RVec {
        let half_d = self.dim as f64 / 2.0;
        RVec::from_iterator(
            self.n_coherence(),
            self.traceless().iter().map(|s| half_d * trace_product(rho, s).re),
        )
    }

    pub fn bloch_to_rho(&self, x: &RVec) -> Result<CMat> {
        if x.len() != self.n_coherence() {
            return Err(Error::Shape {
                expected: self.n_coherence(),
                found: x.len(),
            });
        }
        let mut rho = CMat::identity(self.dim, self.dim);
        for (xj, s) in x.iter().zip(self.traceless()) {
            rho += s * c(*xj, 0.0);
        }
        Ok(rho / c(self.dim as f64, 0.0))
    }

    /// Coherence vector of the pure state `|ψ⟩⟨ψ|/⟨ψ|ψ⟩`.
    pub fn pure_to_bloch(&self, psi: &CVec) -> RVec {
        let n = psi.norm_squared();
        let rho = psi * psi.adjoint() / c(n, 0.0);
        self.coordinates_unnormalized(&rho)
    }

    fn check_square(&self, m: &CMat) -> Result<()> {
        if m.nrows() != self.dim || m.ncols() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                found: m.nrows(),
            });
        }
        Ok(())
    }
}

/// Generalized Bloch vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceVector(pub RVec);

impl CoherenceVector {
    pub fn into_inner(self) -> RVec {
        self.0
    }
}

impl Deref for CoherenceVector {
    type Target = RVec;
    fn deref(&self) -> &RVec {
        &self.0
    }
}

impl DerefMut for CoherenceVector {
    fn deref_mut(&mut self) -> &mut RVec {
        &mut self.0
    }
}

impl From<RVec> for CoherenceVector {
    fn from(v: RVec) -> Self {
        Self(v)
    }
}

/// `Tr[AB]` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> C64 {
    let n = a.nrows();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Linear map on `D×D` complex matrices, stored as its `D²×D²` matrix acting
/// on column-stacked operators.
#[derive(Debug, Clone, PartialEq)]
pub struct Superoperator {
    dim: usize,
    matrix: CMat,
}

impl Superoperator {
    /// Tabulates `f` on every matrix unit `|i⟩⟨j|`.
    pub fn from_fn(dim: usize, f: impl Fn(&CMat) -> CMat) -> Self {
        let n = dim * dim;
        let mut matrix = CMat::zeros(n, n);
        for col in 0..n {
            let mut unit = CMat::zeros(dim, dim);
            unit[(col % dim, col / dim)] = c(1.0, 0.0);
            let image = f(&unit);
            for (row, v) in image.iter().enumerate() {
                matrix[(row, col)] = *v;
            }
        }
        Self { dim, matrix }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            matrix: CMat::zeros(dim * dim, dim * dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &CMat {
        &self.matrix
    }

    pub fn apply(&self, rho: &CMat) -> CMat {
        let v = CVec::from_column_slice(rho.as_slice());
        let out = &self.matrix * v;
        CMat::from_column_slice(self.dim, self.dim, out.as_slice())
    }

    /// Frobenius distance between the matrix representations.
    pub fn distance(&self, other: &Superoperator) -> f64 {
        (&self.matrix - &other.matrix).norm()
    }

    /// `(self ∘ other)ρ = self(other(ρ))`.
    pub fn compose(&self, other: &Superoperator) -> Superoperator {
        Superoperator {
            dim: self.dim,
            matrix: &self.matrix * &other.matrix,
        }
    }

    /// Real `D²×D²` representation on the coordinates `r` of
    /// `ρ = (1/D)Σ rⱼσⱼ`: `Mᵢⱼ = ½Tr[σᵢ𝒪(σⱼ)]` for traceless rows and
    /// `(1/D)Tr[𝒪(σⱼ)]` for the identity row.
    pub fn bloch_matrix(&self, basis: &OperatorBasis) -> RMat {
        let n = self.dim * self.dim;
        let mut m = RMat::zeros(n, n);
        let images: Vec<CMat> = basis.elements().iter().map(|s| self.apply(s)).collect();
        for (j, img) in images.iter().enumerate() {
            for (i, s) in basis.traceless().iter().enumerate() {
                m[(i, j)] = 0.5 * trace_product(s, img).re;
            }
            m[(n - 1, j)] = img.trace().re / self.dim as f64;
        }
        m
    }

    /// Splits the Bloch matrix into `(L₀, b)`:
    /// `L₀ᵢⱼ = ½Tr[σᵢ𝒪(σⱼ)]`, `bᵢ = ½Tr[σᵢ𝒪(1)]`.
    pub fn affine_bloch(&self, basis: &OperatorBasis) -> (RMat, RVec) {
        let full = self.bloch_matrix(basis);
        let n = basis.n_coherence();
        let l0 = full.view((0, 0), (n, n)).into_owned();
        let b = full.view((0, n), (n, 1)).column(0).into_owned();
        (l0, b)
    }
}

/// Numerical null space of a complex matrix: orthonormal columns spanning
/// `{v : ‖Av‖ ≤ tol}`.
pub fn null_space_complex(a: &CMat, tol: f64) -> CMat {
    let n = a.ncols();
    // pad to square so SVD returns a full V
    let rows = a.nrows().max(n);
    let mut padded = CMat::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let cols: Vec<CVec> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| v_t.row(i).adjoint())
        .collect();
    if cols.is_empty() {
        CMat::zeros(n, 0)
    } else {
        CMat::from_columns(&cols)
    }
}

/// Real counterpart of [`null_space_complex`].
pub fn null_space(a: &RMat, tol: f64) -> RMat {
    let n = a.ncols();
    let rows = a.nrows().max(n);
    let mut padded = RMat::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = SVD::new(padded, false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let cols: Vec<RVec> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s <= tol)
        .map(|(i, _)| v_t.row(i).transpose())
        .collect();
    if cols.is_empty() {
        RMat::zeros(n, 0)
    } else {
        RMat::from_columns(&cols)
    }
}

/// Orthonormal basis of the column span, rank decided by `tol` relative to
/// the largest singular value.
pub fn orthonormal_span(m: &RMat, tol: f64) -> RMat {
    if m.ncols() == 0 {
        return RMat::zeros(m.nrows(), 0);
    }
    let svd = SVD::new(m.clone(), true, false);
    let u = svd.u.expect("requested U");
    let smax = svd.singular_values.max();
    let cols: Vec<RVec> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > tol * smax.max(1e-300))
        .map(|(i, _)| u.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        RMat::zeros(m.nrows(), 0)
    } else {
        RMat::from_columns(&cols)
    }
}

/// Orthonormal complement of the span of the orthonormal columns `q`.
pub fn orthogonal_complement(q: &RMat) -> RMat {
    let n = q.nrows();
    let proj = RMat::identity(n, n) - q * q.transpose();
    orthonormal_span(&proj, 1e-8)
}

/// Rotates an orthonormal basis towards the coordinate axes: Gram-Schmidt on
/// the projections of `e₁, e₂, …` onto the span. Gives axis-aligned columns
/// whenever the span contains coordinate axes.
pub fn canonical_basis(q: &RMat) -> RMat {
    let n = q.nrows();
    let k = q.ncols();
    let proj = q * q.transpose();
    let mut cols: Vec<RVec> = Vec::with_capacity(k);
    // candidates ordered by coordinate index
    for i in 0..n {
        if cols.len() == k {
            break;
        }
        let mut v = proj.column(i).into_owned();
        for u in &cols {
            let d = u.dot(&v);
            v -= u * d;
        }
        let nv = v.norm();
        if nv > 1e-6 {
            cols.push(canonical_sign(v / nv));
        }
    }
    RMat::from_columns(&cols)
}

/// Flips `v` so that its first component with magnitude above 1e-12 is positive.
pub fn canonical_sign(v: RVec) -> RVec {
    match v.iter().find(|x| x.abs() > 1e-9) {
        Some(x) if *x < 0.0 => -v,
        _ => v,
    }
}

/// Eigenvalues (ascending) and smallest eigenvalue of a Hermitian matrix.
pub fn hermitian_eigenvalues(m: &CMat) -> RVec {
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    RVec::from_vec(v)
}

pub fn min_eigenvalue(m: &CMat) -> f64 {
    hermitian_eigenvalues(m)[0]
}

/// Dominant eigenvector of a Hermitian matrix (the pure state of a rank-one ρ).
pub fn dominant_eigenvector(m: &CMat) -> CVec {
    let h = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    let imax = eig.eigenvalues.imax();
    let mut v = eig.eigenvectors.column(imax).into_owned();
    // fix global phase: largest component real positive
    let (ibig, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .unwrap();
    let phase = v[ibig] / c(v[ibig].norm(), 0.0);
    v /= phase;
    v
}

/// Unitary `exp(iH)` for Hermitian `H`.
pub fn unitary_exp(h: &CMat) -> CMat {
    let eig = SymmetricEigen::new((h + h.adjoint()) * c(0.5, 0.0));
    let v = &eig.eigenvectors;
    let d = CMat::from_diagonal(&CVec::from_iterator(
        h.nrows(),
        eig.eigenvalues.iter().map(|l| C64::from_polar(1.0, *l)),
    ));
    v * d * v.adjoint()
}

/// Real matrix exponential.
pub fn expm(m: &RMat) -> RMat {
    m.clone().exp()
}

/// Complex matrix exponential.
pub fn expm_complex(m: &CMat) -> CMat {
    m.clone().exp()
}

/// Frobenius norm, used as the scale for relative tolerances.
pub fn fro(m: &RMat) -> f64 {
    m.norm()
}

/// Generalized eigenvector chain `ē₁..ē_m` with `(A − λ1)ē₁ = 0` and
/// `(A − λ1)ēⱼ = ēⱼ₋₁`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JordanChain {
    pub eigenvalue: C64,
    pub vectors: Vec<CVec>,
}

/// One eigenvalue cluster of a real matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenCluster {
    pub value: C64,
    pub algebraic: usize,
    pub geometric: usize,
    /// Orthonormal basis of the ordinary eigenspace. Real (zero imaginary
    /// part) when the eigenvalue is real.
    pub vectors: Vec<CVec>,
    /// Non-empty only for defective clusters.
    pub chains: Vec<JordanChain>,
}

impl EigenCluster {
    pub fn is_real(&self) -> bool {
        self.value.im == 0.0
    }

    pub fn is_defective(&self) -> bool {
        self.geometric < self.algebraic
    }

    pub fn real_vectors(&self) -> Vec<RVec> {
        self.vectors.iter().map(|v| v.map(|z| z.re)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Spectrum {
    pub clusters: Vec<EigenCluster>,
    /// Frobenius norm of the decomposed matrix.
    pub scale: f64,
}

impl Spectrum {
    pub fn is_defective(&self) -> bool {
        self.clusters.iter().any(|c| c.is_defective())
    }

    /// All eigenvalues repeated by algebraic multiplicity.
    pub fn eigenvalues(&self) -> Vec<C64> {
        self.clusters
            .iter()
            .flat_map(|c| std::iter::repeat_n(c.value, c.algebraic))
            .collect()
    }
}

/// Relative clustering / rank tolerance for [`eig_full`].
pub const EIG_CLUSTER_TOL: f64 = 1e-8;

/// Full eigenstructure of a real square matrix, including Jordan chains for
/// defective eigenvalues.
pub fn eig_full(m: &RMat) -> Result<Spectrum> {
    eig_full_with_tol(m, EIG_CLUSTER_TOL)
}

pub fn eig_full_with_tol(m: &RMat, rel_tol: f64) -> Result<Spectrum> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Shape {
            expected: n,
            found: m.ncols(),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let scale = fro(m).max(1e-300);
    let schur = Schur::try_new(m.clone(), 1e-15, 10_000).ok_or_else(|| Error::Convergence {
        what: "Schur decomposition".into(),
        residual: f64::NAN,
    })?;
    let raw: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();

    // Exact defective eigenvalues come back split by O(√ε·‖m‖); clustering is
    // done on the raw values and each cluster is represented by its mean.
    let tol = rel_tol * scale;
    let split_tol = tol.max(1e-7 * scale);
    let mut clusters: Vec<Vec<C64>> = Vec::new();
    for z in raw {
        match clusters
            .iter_mut()
            .find(|cl| cl.iter().any(|w| (w - z).norm() <= split_tol))
        {
            Some(cl) => cl.push(z),
            None => clusters.push(vec![z]),
        }
    }
    let mut out = Vec::new();
    let mc = m.map(|x| c(x, 0.0));
    for cl in clusters {
        let alg = cl.len();
        let mut value = cl.iter().sum::<C64>() / c(alg as f64, 0.0);
        if value.im.abs() <= split_tol {
            value.im = 0.0;
        }
        let shifted = &mc - CMat::identity(n, n) * value;
        let rank_tol = tol.max(1e-9 * scale);
        let vectors: Vec<CVec> = if value.im == 0.0 {
            let real = m - RMat::identity(n, n) * value.re;
            let ns = canonical_basis(&null_space(&real, rank_tol));
            ns.column_iter().map(|v| v.map(|x| c(x, 0.0))).collect()
        } else {
            let ns = null_space_complex(&shifted, rank_tol);
            ns.column_iter().map(normalize_phase).collect()
        };
        let geo = vectors.len().min(alg);
        if geo == 0 {
            return Err(Error::Convergence {
                what: format!("eigenvector for eigenvalue {value}"),
                residual: f64::NAN,
            });
        }
        let chains = if geo < alg {
            jordan_chains(&shifted, value, alg, rank_tol)?
        } else {
            Vec::new()
        };
        out.push(EigenCluster {
            value,
            algebraic: alg,
            geometric: geo,
            vectors,
            chains,
        });
    }
    out.sort_by(|a, b| {
        b.value
            .re
            .partial_cmp(&a.value.re)
            .unwrap()
            .then(b.value.im.partial_cmp(&a.value.im).unwrap())
    });
    Ok(Spectrum {
        clusters: out,
        scale,
    })
}

fn normalize_phase(v: nalgebra::DVectorView<'_, C64>) -> CVec {
    let mut v = v.into_owned();
    let (ibig, _) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.norm().partial_cmp(&b.1.norm()).unwrap())
        .unwrap();
    let phase = v[ibig] / c(v[ibig].norm(), 0.0);
    v /= phase;
    let n = v.norm();
    v / c(n, 0.0)
}

/// Chains for one defective eigenvalue of `A = m − λ1`.
fn jordan_chains(a: &CMat, value: C64, alg: usize, tol: f64) -> Result<Vec<JordanChain>> {
    let n = a.nrows();
    // nested kernels N₁ ⊂ N₂ ⊂ … until dimension reaches alg
    let mut kernels: Vec<CMat> = Vec::new();
    let mut power = CMat::identity(n, n);
    for _ in 0..alg {
        power = a * &power;
        let k = null_space_complex(&power, tol * (1.0 + power.norm()));
        let done = k.ncols() >= alg;
        kernels.push(k);
        if done {
            break;
        }
    }
    let top = kernels.len();
    if kernels[top - 1].ncols() < alg {
        return Err(Error::Convergence {
            what: format!("generalized eigenspace for eigenvalue {value}"),
            residual: kernels[top - 1].ncols() as f64,
        });
    }
    // vectors already accounted for at each level
    let mut used: Vec<Vec<CVec>> = vec![Vec::new(); top];
    let mut chains = Vec::new();
    for level in (0..top).rev() {
        let kernel = &kernels[level];
        let mut span: Vec<CVec> = if level > 0 {
            kernels[level - 1].column_iter().map(|v| v.into_owned()).collect()
        } else {
            Vec::new()
        };
        span.extend(used[level].iter().cloned());
        for col in kernel.column_iter() {
            let mut v = col.into_owned();
            let basis = orthonormalize_complex(&span);
            for u in &basis {
                let d = u.dotc(&v);
                v -= u * d;
            }
            if v.norm() <= 1e-6 {
                continue;
            }
            let v = &v / c(v.norm(), 0.0);
            // chain head at rank level+1: ē_{level+1} = v, ē_j = A ē_{j+1}
            let mut vecs = vec![v.clone()];
            let mut cur = v.clone();
            for _ in 0..level {
                cur = a * &cur;
                vecs.push(cur.clone());
            }
            vecs.reverse();
            for (lvl, w) in vecs.iter().enumerate() {
                used[lvl].push(w.clone());
            }
            span.push(v);
            chains.push(JordanChain {
                eigenvalue: value,
                vectors: vecs,
            });
        }
    }
    chains.retain(|ch| ch.vectors.len() > 1);
    Ok(chains)
}

fn orthonormalize_complex(vs: &[CVec]) -> Vec<CVec> {
    let mut out: Vec<CVec> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        for u in &out {
            let d = u.dotc(&w);
            w -= u * d;
        }
        let nw = w.norm();
        if nw > 1e-10 {
            out.push(w / c(nw, 0.0));
        }
    }
    out
}
