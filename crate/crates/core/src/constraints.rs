//! Ensembles, transition graphs and the polynomial systems whose roots are
//! physically realizable ensembles.
//!
//! Every system shares one parametrization: member `k` sits at
//! `x_k = x_ss + Tᵢ G_r y_r`, where `r` is the representative of its
//! symmetry orbit, `G_r` spans the admissible directions (whole space,
//! invariant subspace, fixed space of a symmetry, or an intersection) and
//! `Tᵢ` is a power of the symmetry. Residual rows for a representative are
//! `G_rᵀ(L₀x_r + b − Σⱼ κⱼᵣ(x_j − x_r))` followed by `|x_r|² − D(D−1)/2`.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    dominant_eigenvector, min_eigenvalue, null_space, CMat, CVec, CoherenceVector, OperatorBasis,
    RMat, RVec,
};
use crate::error::{Error, Result};
use crate::model::{lindbladian, BlochModel, MasterEquation};
use crate::symmetry::{check_joint, InvariantSubspace, WignerSymmetry};

/// Rates with magnitude below this are set to zero.
pub const KAPPA_CLAMP: f64 = 1e-9;

/// `K` pure states, rates `κⱼₖ` (transition `k → j`) and stationary
/// occupations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    dim: usize,
    states: Vec<CoherenceVector>,
    kappa: RMat,
    occupations: RVec,
}

impl Ensemble {
    pub fn new(dim: usize, states: Vec<CoherenceVector>, mut kappa: RMat) -> Result<Self> {
        let k = states.len();
        if k == 0 {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        let n = dim * dim - 1;
        if let Some(bad) = states.iter().find(|x| x.len() != n) {
            return Err(Error::Shape {
                expected: n,
                found: bad.len(),
            });
        }
        if kappa.nrows() != k || kappa.ncols() != k {
            return Err(Error::Shape {
                expected: k,
                found: kappa.nrows(),
            });
        }
        if kappa.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for j in 0..k {
            kappa[(j, j)] = 0.0;
        }
        kappa.apply(|v| {
            if v.abs() < KAPPA_CLAMP {
                *v = 0.0
            }
        });
        let occupations = stationary_distribution(&kappa);
        Ok(Self {
            dim,
            states,
            kappa,
            occupations,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[CoherenceVector] {
        &self.states
    }

    pub fn kappa(&self) -> &RMat {
        &self.kappa
    }

    pub fn occupations(&self) -> &RVec {
        &self.occupations
    }

    /// `Σ 𝓌ₖ xₖ`.
    pub fn average(&self) -> RVec {
        self.states
            .iter()
            .zip(self.occupations.iter())
            .fold(RVec::zeros(self.dim * self.dim - 1), |acc, (x, w)| acc + &x.0 * *w)
    }

    /// State vectors `|φₖ⟩`, phase-fixed.
    pub fn pure_states(&self) -> Vec<CVec> {
        let basis = OperatorBasis::new(self.dim).expect("dim ≥ 2 by construction");
        self.states
            .iter()
            .map(|x| dominant_eigenvector(&basis.bloch_to_rho(x).expect("length checked")))
            .collect()
    }

    /// Smallest distance between two members.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.k() {
            for j in (i + 1)..self.k() {
                best = best.min((&self.states[i].0 - &self.states[j].0).norm());
            }
        }
        best
    }

    /// Relabels members: new member `i` is old member `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Ensemble {
        let k = self.k();
        let states = perm.iter().map(|&p| self.states[p].clone()).collect();
        let kappa = RMat::from_fn(k, k, |i, j| self.kappa[(perm[i], perm[j])]);
        let occupations = RVec::from_iterator(k, perm.iter().map(|&p| self.occupations[p]));
        Ensemble {
            dim: self.dim,
            states,
            kappa,
            occupations,
        }
    }
}

/// Stationary distribution of the rate matrix `Qⱼₖ = κⱼₖ`, `Qₖₖ = −Σⱼ κⱼₖ`,
/// normalized to sum one (least-squares when not unique).
pub fn stationary_distribution(kappa: &RMat) -> RVec {
    let k = kappa.nrows();
    let mut a = RMat::zeros(k + 1, k);
    for j in 0..k {
        for i in 0..k {
            if i != j {
                a[(i, j)] = kappa[(i, j)];
                a[(j, j)] -= kappa[(i, j)];
            }
        }
        a[(k, j)] = 1.0;
    }
    let mut rhs = RVec::zeros(k + 1);
    rhs[k] = 1.0;
    SVD::new(a, true, true)
        .solve(&rhs, 1e-14)
        .unwrap_or_else(|_| RVec::from_element(k, 1.0 / k as f64))
}

/// Whether every member reaches every other along edges with `κ > tol`.
pub fn strongly_connected(kappa: &RMat, tol: f64) -> bool {
    let k = kappa.nrows();
    let edges: Vec<(usize, usize)> = (0..k)
        .flat_map(|j| (0..k).map(move |i| (j, i)))
        .filter(|&(j, i)| j != i && kappa[(j, i)] > tol)
        .collect();
    edges_strongly_connected(k, &edges)
}

/// `edges` holds `(to, from)` pairs.
pub fn edges_strongly_connected(k: usize, edges: &[(usize, usize)]) -> bool {
    let reach = |forward: bool| {
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &(to, from) in edges {
                let (a, b) = if forward { (from, to) } else { (to, from) };
                if a == v && !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.iter().all(|s| *s)
    };
    k == 1 || (reach(true) && reach(false))
}

/// Allowed support of `κ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransitionGraph {
    /// Only `k → k+1 (mod K)`.
    Cyclic,
    Full,
    /// Explicit `(to, from)` pairs.
    Custom(Vec<(usize, usize)>),
}

impl TransitionGraph {
    /// Edges as `(to, from)`, ordered by `from` then `to`.
    pub fn edges(&self, k: usize) -> Vec<(usize, usize)> {
        match self {
            TransitionGraph::Cyclic => (0..k).map(|f| ((f + 1) % k, f)).collect(),
            TransitionGraph::Full => (0..k)
                .flat_map(|f| (0..k).filter(move |&t| t != f).map(move |t| (t, f)))
                .collect(),
            TransitionGraph::Custom(e) => {
                let mut e = e.clone();
                e.sort_by_key(|&(t, f)| (f, t));
                e.dedup();
                e
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    Full,
    Subspace { n: usize },
    Wigner { order: usize, perm: Vec<usize> },
    Joint { n: usize, order: usize, perm: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Rep {
    member: usize,
    /// Orthonormal directions `G_r`.
    g: RMat,
    offset: usize,
}

#[derive(Debug, Clone)]
struct Member {
    rep: usize,
    /// `Tⁱ G_r`.
    map: RMat,
}

/// Residual map for one ensemble size, graph and reduction.
#[derive(Debug, Clone)]
pub struct ConstraintSystem {
    bm: BlochModel,
    k: usize,
    graph: TransitionGraph,
    structure: Structure,
    reps: Vec<Rep>,
    members: Vec<Member>,
    /// `(to, from)` edges carrying a rate and the index of that rate's parameter.
    edges: Vec<(usize, usize, usize)>,
    n_rates: usize,
    n_state_params: usize,
}

impl ConstraintSystem {
    /// Unreduced system over all coherence coordinates.
    pub fn build_full(bm: &BlochModel, k: usize, graph: TransitionGraph) -> Result<Self> {
        build(bm, None, None, k, graph)
    }

    /// States restricted to `x_ss + 𝕴₀`.
    pub fn build_subspace_reduced(
        bm: &BlochModel,
        sub: &InvariantSubspace,
        k: usize,
        graph: TransitionGraph,
    ) -> Result<Self> {
        build(bm, Some(sub), None, k, graph)
    }

    /// Members related by `x_{perm[k]} = T₀x_k` and `κ_{perm[j],perm[k]} = κⱼₖ`.
    pub fn build_wigner_reduced(
        bm: &BlochModel,
        w: &WignerSymmetry,
        perm: &[usize],
        k: usize,
        graph: TransitionGraph,
    ) -> Result<Self> {
        build(bm, None, Some((w, perm)), k, graph)
    }

    /// Both reductions at once; the symmetry must map `𝕴₀` into itself.
    pub fn build_joint(
        bm: &BlochModel,
        sub: &InvariantSubspace,
        w: &WignerSymmetry,
        perm: &[usize],
        k: usize,
        graph: TransitionGraph,
    ) -> Result<Self> {
        build(bm, Some(sub), Some((w, perm)), k, graph)
    }

    pub fn model(&self) -> &BlochModel {
        &self.bm
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn graph(&self) -> &TransitionGraph {
        &self.graph
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    pub fn n_params(&self) -> usize {
        self.n_state_params + self.n_rates
    }

    pub fn n_state_params(&self) -> usize {
        self.n_state_params
    }

    pub fn n_rates(&self) -> usize {
        self.n_rates
    }

    pub fn n_constraints(&self) -> usize {
        self.reps.iter().map(|r| r.g.ncols() + 1).sum()
    }

    /// Representative member indices and their parameter dimensions.
    pub fn representatives(&self) -> Vec<(usize, usize)> {
        self.reps.iter().map(|r| (r.member, r.g.ncols())).collect()
    }

    /// Directions spanned by representative `r`'s parameters.
    pub fn rep_directions(&self, r: usize) -> &RMat {
        &self.reps[r].g
    }

    /// Edges that carry a rate, as `(to, from)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.edges.iter().map(|&(t, f, _)| (t, f)).collect()
    }

    fn states(&self, p: &RVec) -> Vec<RVec> {
        self.members
            .iter()
            .map(|m| {
                let r = &self.reps[m.rep];
                let y = p.rows(r.offset, r.g.ncols());
                &self.bm.x_ss.0 + &m.map * y
            })
            .collect()
    }

    fn rates(&self, p: &RVec) -> RMat {
        let mut kappa = RMat::zeros(self.k, self.k);
        for &(t, f, e) in &self.edges {
            kappa[(t, f)] = p[self.n_state_params + e];
        }
        kappa
    }

    /// Member coherence vectors and rate matrix for a parameter vector.
    pub fn expand(&self, p: &RVec) -> (Vec<RVec>, RMat) {
        (self.states(p), self.rates(p))
    }

    pub fn ensemble(&self, p: &RVec) -> Result<Ensemble> {
        let (xs, kappa) = self.expand(p);
        Ensemble::new(self.bm.dim(), xs.into_iter().map(Into::into).collect(), kappa)
    }

    /// Parameters reproducing `ens` when it lies in the parametrized family;
    /// `None` otherwise.
    pub fn params_of(&self, ens: &Ensemble) -> Option<RVec> {
        if ens.k() != self.k || ens.dim() != self.bm.dim() {
            return None;
        }
        let mut p = RVec::zeros(self.n_params());
        for r in &self.reps {
            let y = r.g.transpose() * (&ens.states()[r.member].0 - &self.bm.x_ss.0);
            p.rows_mut(r.offset, r.g.ncols()).copy_from(&y);
        }
        for &(t, f, e) in &self.edges {
            p[self.n_state_params + e] = ens.kappa()[(t, f)];
        }
        let (xs, kappa) = self.expand(&p);
        let fits = xs
            .iter()
            .zip(ens.states())
            .all(|(a, b)| (a - &b.0).norm() < 1e-8)
            && (kappa - ens.kappa()).norm() < 1e-8;
        fits.then_some(p)
    }

    pub fn residual(&self, p: &RVec) -> RVec {
        self.residual_and_jacobian(p, false).0
    }

    pub fn jacobian(&self, p: &RVec) -> RMat {
        self.residual_and_jacobian(p, true).1
    }

    /// Residual and (optionally) its analytic Jacobian.
    pub fn residual_and_jacobian(&self, p: &RVec, with_jac: bool) -> (RVec, RMat) {
        let xs = self.states(p);
        let kappa = self.rates(p);
        let m = self.n_constraints();
        let np = self.n_params();
        let mut res = RVec::zeros(m);
        let mut jac = if with_jac { RMat::zeros(m, np) } else { RMat::zeros(0, 0) };
        let radius_sq = self.bm.pure_radius_sq();
        let mut row = 0;
        for rep in &self.reps {
            let r = rep.member;
            let q = &rep.g;
            let qd = q.ncols();
            let xr = &xs[r];
            let mut drift = self.bm.drift(xr);
            let out_rate: f64 = (0..self.k).map(|j| kappa[(j, r)]).sum();
            for j in 0..self.k {
                if j != r && kappa[(j, r)] != 0.0 {
                    drift -= (&xs[j] - xr) * kappa[(j, r)];
                }
            }
            res.rows_mut(row, qd).copy_from(&(q.transpose() * &drift));
            res[row + qd] = xr.norm_squared() - radius_sq;
            if with_jac {
                // state derivatives: d drift / d y_s
                for (si, srep) in self.reps.iter().enumerate() {
                    let cols = srep.g.ncols();
                    let mut block = RMat::zeros(self.bm.n(), cols);
                    let own = self.members[r].rep == si;
                    if own {
                        let dxr = &self.members[r].map;
                        block += (&self.bm.l0 + RMat::identity(self.bm.n(), self.bm.n()) * out_rate) * dxr;
                    }
                    for j in 0..self.k {
                        if j != r && kappa[(j, r)] != 0.0 && self.members[j].rep == si {
                            block -= &self.members[j].map * kappa[(j, r)];
                        }
                    }
                    jac.view_mut((row, srep.offset), (qd, cols))
                        .copy_from(&(q.transpose() * block));
                    if own {
                        let dp = self.members[r].map.transpose() * xr * 2.0;
                        for c in 0..cols {
                            jac[(row + qd, srep.offset + c)] = dp[c];
                        }
                    }
                }
                for &(t, f, e) in &self.edges {
                    if f == r {
                        let col = q.transpose() * (xr - &xs[t]);
                        let cidx = self.n_state_params + e;
                        for i in 0..qd {
                            jac[(row + i, cidx)] += col[i];
                        }
                    }
                }
            }
            row += qd + 1;
        }
        (res, jac)
    }
}

fn is_permutation(perm: &[usize], k: usize) -> bool {
    let mut seen = vec![false; k];
    perm.len() == k
        && perm.iter().all(|&p| {
            if p >= k || seen[p] {
                false
            } else {
                seen[p] = true;
                true
            }
        })
}

fn build(
    bm: &BlochModel,
    sub: Option<&InvariantSubspace>,
    sym: Option<(&WignerSymmetry, &[usize])>,
    k: usize,
    graph: TransitionGraph,
) -> Result<ConstraintSystem> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("ensemble size {k} < 2")));
    }
    let n = bm.n();
    let graph_edges = graph.edges(k);
    if let Some(bad) = graph_edges.iter().find(|&&(t, f)| t >= k || f >= k || t == f) {
        return Err(Error::InvalidArgument(format!("edge {bad:?} invalid for K = {k}")));
    }
    let base = match sub {
        Some(s) => s.basis_i0().clone(),
        None => RMat::identity(n, n),
    };
    let identity_perm: Vec<usize> = (0..k).collect();
    let (t0, perm, order) = match sym {
        Some((w, perm)) => {
            if !is_permutation(perm, k) {
                return Err(Error::InvalidPermutation(format!(
                    "{perm:?} is not a permutation of 0..{k}"
                )));
            }
            let order = w.order(360).ok_or_else(|| {
                Error::InvalidPermutation("symmetry has no finite order up to 360".into())
            })?;
            let mut q: Vec<usize> = identity_perm.clone();
            for _ in 0..order {
                q = q.iter().map(|&i| perm[i]).collect();
            }
            if q != identity_perm {
                return Err(Error::InvalidPermutation(format!(
                    "{perm:?} raised to the symmetry order {order} is not the identity"
                )));
            }
            if let Some(s) = sub {
                let rep = check_joint(s, w, bm);
                if !rep.subspace_only {
                    return Err(Error::InvalidArgument(
                        "symmetry does not act within the invariant subspace".into(),
                    ));
                }
            }
            (w.t0().clone(), perm.to_vec(), order)
        }
        None => (RMat::identity(n, n), identity_perm.clone(), 1),
    };

    // orbits of the member permutation
    let mut members: Vec<Option<Member>> = vec![None; k];
    let mut reps = Vec::new();
    let mut offset = 0;
    for start in 0..k {
        if members[start].is_some() {
            continue;
        }
        let mut orbit = vec![start];
        let mut cur = perm[start];
        while cur != start {
            orbit.push(cur);
            cur = perm[cur];
        }
        let len = orbit.len();
        let g = if sym.is_some() {
            let tm = (0..len).fold(RMat::identity(n, n), |acc, _| &t0 * acc);
            let mut stacked = RMat::zeros(2 * n, n);
            stacked.view_mut((0, 0), (n, n)).copy_from(&(tm - RMat::identity(n, n)));
            let proj = RMat::identity(n, n) - &base * base.transpose();
            stacked.view_mut((n, 0), (n, n)).copy_from(&proj);
            crate::algebra::canonical_basis(&null_space(&stacked, 1e-9 * (1.0 + stacked.norm())))
        } else {
            base.clone()
        };
        let ri = reps.len();
        let mut power = RMat::identity(n, n);
        for &mbr in &orbit {
            members[mbr] = Some(Member {
                rep: ri,
                map: &power * &g,
            });
            power = &t0 * power;
        }
        let dim = g.ncols();
        reps.push(Rep {
            member: start,
            g,
            offset,
        });
        offset += dim;
    }
    let members: Vec<Member> = members.into_iter().map(|m| m.expect("every member assigned")).collect();

    // rate parameters: one per edge orbit fully inside the graph
    let mut edge_param: Vec<Option<usize>> = vec![None; graph_edges.len()];
    let mut n_rates = 0;
    let index_of = |e: (usize, usize)| graph_edges.iter().position(|&g| g == e);
    for i in 0..graph_edges.len() {
        if edge_param[i].is_some() {
            continue;
        }
        let mut orbit = vec![graph_edges[i]];
        let mut cur = (perm[graph_edges[i].0], perm[graph_edges[i].1]);
        while cur != graph_edges[i] {
            orbit.push(cur);
            cur = (perm[cur.0], perm[cur.1]);
        }
        let idx: Vec<Option<usize>> = orbit.iter().map(|&e| index_of(e)).collect();
        if idx.iter().all(|x| x.is_some()) {
            for x in idx.into_iter().flatten() {
                edge_param[x] = Some(n_rates);
            }
            n_rates += 1;
        } else {
            // mark as excluded so it is not revisited
            for x in idx.into_iter().flatten() {
                edge_param[x] = Some(usize::MAX);
            }
        }
    }
    let edges: Vec<(usize, usize, usize)> = graph_edges
        .iter()
        .zip(&edge_param)
        .filter_map(|(&(t, f), p)| match p {
            Some(e) if *e != usize::MAX => Some((t, f, *e)),
            _ => None,
        })
        .collect();
    let allowed: Vec<(usize, usize)> = edges.iter().map(|&(t, f, _)| (t, f)).collect();
    if !edges_strongly_connected(k, &allowed) {
        return Err(Error::InconsistentGraph(format!(
            "edges compatible with permutation {perm:?} do not connect all {k} members"
        )));
    }
    let structure = match (sub, sym) {
        (None, None) => Structure::Full,
        (Some(s), None) => Structure::Subspace { n: s.n() },
        (None, Some(_)) => Structure::Wigner {
            order,
            perm: perm.clone(),
        },
        (Some(s), Some(_)) => Structure::Joint {
            n: s.n(),
            order,
            perm: perm.clone(),
        },
    };
    Ok(ConstraintSystem {
        bm: bm.clone(),
        k,
        graph,
        structure,
        reps,
        members,
        edges,
        n_rates,
        n_state_params: offset,
    })
}

/// Outcome of the independent operator-space check of an ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// `‖ℒ(ρₖ) − Σⱼ κⱼₖ(ρⱼ − ρₖ)‖_F` per member.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `max |Tr ρₖ² − 1|`.
    pub purity_error: f64,
    pub min_eigenvalue: f64,
    pub kappa_nonnegative: bool,
    pub strongly_connected: bool,
    pub occupations: RVec,
    /// `‖Σ 𝓌ₖ xₖ − x_ss‖`.
    pub average_error: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Checks an ensemble directly on density matrices.
pub fn verify(me: &MasterEquation, bm: &BlochModel, ens: &Ensemble, tol: f64) -> Result<VerificationReport> {
    if ens.dim() != bm.dim() {
        return Err(Error::Shape {
            expected: bm.dim(),
            found: ens.dim(),
        });
    }
    let lind = lindbladian(me);
    let rhos: Vec<CMat> = ens
        .states()
        .iter()
        .map(|x| bm.basis.bloch_to_rho(x))
        .collect::<Result<_>>()?;
    let kappa = ens.kappa();
    let mut residuals = Vec::with_capacity(ens.k());
    for (k, rho) in rhos.iter().enumerate() {
        let mut r = lind.apply(rho);
        for (j, rj) in rhos.iter().enumerate() {
            if j != k {
                r -= (rj - rho) * crate::algebra::c(kappa[(j, k)], 0.0);
            }
        }
        residuals.push(r.norm());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    let purity_error = rhos
        .iter()
        .map(|r| ((r * r).trace().re - 1.0).abs())
        .fold(0.0, f64::max);
    let min_eig = rhos.iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min);
    let kappa_nonnegative = kappa.iter().all(|v| *v >= 0.0);
    let connected = strongly_connected(kappa, 0.0);
    let average_error = (ens.average() - &bm.x_ss.0).norm();
    let pass = max_residual <= tol
        && purity_error <= tol.max(1e-9)
        && min_eig >= -1e-9
        && kappa_nonnegative
        && connected;
    Ok(VerificationReport {
        residuals,
        max_residual,
        purity_error,
        min_eigenvalue: min_eig,
        kappa_nonnegative,
        strongly_connected: connected,
        occupations: ens.occupations().clone(),
        average_error,
        tol,
        pass,
    })
}

/// Smallest `K` for which the square-system counting allows isolated
/// solutions: `D² − 2D + 2` in general, `⌈(D² − D + 2)/2⌉` for real density
/// matrices.
pub fn heuristic_min_k(d: usize, real_subspace: bool) -> usize {
    if real_subspace {
        (d * d - d + 2).div_ceil(2)
    } else {
        d * d - 2 * d + 2
    }
}
