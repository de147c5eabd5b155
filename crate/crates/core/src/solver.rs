//! Closed-form, linear and multistart numerical PRE solvers.

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{c, canonical_basis, eig_full, min_eigenvalue, orthonormal_span, CVec, RMat, RVec};
use crate::constraints::{strongly_connected, ConstraintSystem, Ensemble};
use crate::error::{Error, Result};
use crate::lm::{self, LmOptions};
use crate::model::BlochModel;
use crate::symmetry::lie_generators;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Residual acceptance threshold (2-norm of the full residual vector).
    pub tol: f64,
    pub seeds: usize,
    pub max_iter: usize,
    pub rng_seed: u64,
    /// Ensembles closer than this are the same.
    pub dedup_eps: f64,
    /// Grid size for the pinned coordinate of underdetermined systems.
    pub pin_grid: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            seeds: 512,
            max_iter: 200,
            rng_seed: 0,
            dedup_eps: 1e-6,
            pin_grid: 100,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.seeds == 0 || self.pin_grid == 0 {
            return Err(Error::InvalidArgument(
                "solver needs tol > 0, seeds ≥ 1 and pin_grid ≥ 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StartOutcome {
    Accepted,
    NotConverged,
    NegativeRate,
    NotPositive,
    Disconnected,
    CoincidentMembers,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: usize,
    pub residual: f64,
    pub iterations: usize,
    pub outcome: StartOutcome,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolutionSet {
    pub ensembles: Vec<Ensemble>,
    /// Per-ensemble label of the continuous family it belongs to, if any.
    pub family_tags: Vec<Option<String>>,
    pub diagnostics: Vec<StartRecord>,
    /// Vertices of the rate polytope for symmetric families.
    pub rate_vertices: Vec<RVec>,
}

impl SolutionSet {
    pub fn len(&self) -> usize {
        self.ensembles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensembles.is_empty()
    }

    fn push(&mut self, ens: Ensemble, tag: Option<String>) {
        self.ensembles.push(ens);
        self.family_tags.push(tag);
    }
}

/// Two-member ensembles on lines through `x_ss` along real eigenvectors.
///
/// For eigenpair `(λ, e)` the members are `x_ss + η±e` on the pure-state
/// sphere, the total rate is `−λ` and its split follows from
/// `Σ 𝓌ₖxₖ = x_ss`. A degenerate eigenspace contributes one representative
/// tagged as a family.
pub fn analytic_k2(bm: &BlochModel) -> Result<SolutionSet> {
    let spectrum = eig_full(&bm.l0)?;
    let x_ss = &bm.x_ss.0;
    let r2 = bm.pure_radius_sq();
    let mut out = SolutionSet::default();
    for cl in spectrum.clusters.iter().filter(|c| c.is_real()) {
        let lambda = cl.value.re;
        if lambda >= 0.0 {
            continue;
        }
        let vecs = cl.real_vectors();
        let tag = (vecs.len() > 1).then(|| format!("rotations within the eigenspace of {lambda:.6}"));
        let e = &vecs[0];
        let pe = x_ss.dot(e);
        let disc = pe * pe - (x_ss.norm_squared() - r2);
        if disc <= 0.0 {
            continue;
        }
        let eta1 = -pe + disc.sqrt();
        let eta2 = -pe - disc.sqrt();
        let x1 = x_ss + e * eta1;
        let x2 = x_ss + e * eta2;
        if bm.dim() > 2 {
            let m = [&x1, &x2]
                .iter()
                .map(|x| min_eigenvalue(&bm.basis.bloch_to_rho(x).expect("length")))
                .fold(f64::INFINITY, f64::min);
            if m < -1e-9 {
                continue;
            }
        }
        let w1 = -eta2 / (eta1 - eta2);
        let w2 = eta1 / (eta1 - eta2);
        let mut kappa = RMat::zeros(2, 2);
        kappa[(1, 0)] = -lambda * w2;
        kappa[(0, 1)] = -lambda * w1;
        out.push(canonicalize(&Ensemble::new(bm.dim(), vec![x1.into(), x2.into()], kappa)?), tag);
    }
    Ok(out)
}

/// Ensembles generated by a `ℤ_K` rotation of a qubit model with a continuous
/// symmetry. The representative member sits on the symmetry circle through
/// `x_ss`; its outgoing rates `κⱼ₁` solve
/// `Σ κⱼ₁(1 − cos θⱼ) = μ`, `Σ κⱼ₁ sin θⱼ = ν` with `θⱼ = 2π(j−1)/K`, where
/// `−μ ± iν` is the eigenvalue of `L₀` on the rotation plane. Returns the
/// expansions of every vertex of the rate polytope and of their centroid that
/// connect all members.
pub fn solve_wigner_family(bm: &BlochModel, k: usize) -> Result<SolutionSet> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("ensemble size {k} < 2")));
    }
    if bm.dim() != 2 {
        return Err(Error::InvalidArgument(
            "symmetric families are implemented for qubit models".into(),
        ));
    }
    let gens = lie_generators(bm);
    let g = gens.first().ok_or_else(|| {
        Error::InvalidArgument("model has no continuous Wigner symmetry".into())
    })?;
    let plane = canonical_basis(&orthonormal_span(g, 1e-8));
    if plane.ncols() != 2 {
        return Err(Error::InvalidArgument("generator is not a plane rotation".into()));
    }
    let u = plane.column(0).into_owned();
    let v = g * &u;
    let mu = -u.dot(&(&bm.l0 * &u));
    let nu = v.dot(&(&bm.l0 * &u));
    let theta: Vec<f64> = (1..k)
        .map(|j| 2.0 * std::f64::consts::PI * j as f64 / k as f64)
        .collect();
    let a: Vec<f64> = theta.iter().map(|t| 1.0 - t.cos()).collect();
    let s: Vec<f64> = theta.iter().map(|t| t.sin()).collect();
    let scale = bm.scale();
    let mut vertices: Vec<RVec> = Vec::new();
    let mut add = |r: RVec| {
        if !vertices.iter().any(|w| (w - &r).norm() <= 1e-12 * scale) {
            vertices.push(r);
        }
    };
    let m = k - 1;
    for j in 0..m {
        let kap = mu / a[j];
        if kap >= 0.0 && (s[j] * kap - nu).abs() <= 1e-12 * scale {
            let mut r = RVec::zeros(m);
            r[j] = kap;
            add(r);
        }
    }
    for j in 0..m {
        for l in (j + 1)..m {
            let det = a[j] * s[l] - a[l] * s[j];
            if det.abs() < 1e-12 {
                continue;
            }
            let kj = (mu * s[l] - a[l] * nu) / det;
            let kl = (a[j] * nu - mu * s[j]) / det;
            if kj >= -1e-14 * scale && kl >= -1e-14 * scale {
                let mut r = RVec::zeros(m);
                r[j] = kj.max(0.0);
                r[l] = kl.max(0.0);
                for v in r.iter_mut() {
                    if v.abs() < 1e-14 * scale {
                        *v = 0.0;
                    }
                }
                add(r);
            }
        }
    }
    let mut out = SolutionSet::default();
    if vertices.is_empty() {
        return Ok(out);
    }
    let centroid = vertices.iter().fold(RVec::zeros(m), |acc, v| acc + v) / vertices.len() as f64;
    let rho = (bm.pure_radius_sq() - bm.x_ss.norm_squared()).sqrt();
    let states: Vec<RVec> = (0..k)
        .map(|i| {
            let t = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
            &bm.x_ss.0 + (&u * t.cos() + &v * t.sin()) * rho
        })
        .collect();
    let mut candidates = vertices.clone();
    if !vertices.iter().any(|w| (w - &centroid).norm() <= 1e-12 * scale) {
        candidates.push(centroid);
    }
    for rates in candidates {
        let mut kappa = RMat::zeros(k, k);
        for shift in 0..k {
            for j in 1..k {
                kappa[((j + shift) % k, shift)] = rates[j - 1];
            }
        }
        if !strongly_connected(&kappa, 0.0) {
            continue;
        }
        let ens = Ensemble::new(2, states.iter().cloned().map(Into::into).collect(), kappa)?;
        out.push(ens, Some("rotations about the symmetry axis".into()));
    }
    out.rate_vertices = vertices;
    Ok(out)
}

/// Uniformly random pure state.
fn haar_state(d: usize, rng: &mut ChaCha8Rng) -> CVec {
    CVec::from_iterator(
        d,
        (0..d).map(|_| c(StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng))),
    )
}

fn start_point(cs: &ConstraintSystem, rng: &mut ChaCha8Rng) -> RVec {
    let bm = cs.model();
    let n = bm.n();
    let x_ss = &bm.x_ss.0;
    let r2 = bm.pure_radius_sq();
    let mut p = RVec::zeros(cs.n_params());
    let mut offset = 0;
    for (r, (_, dim)) in cs.representatives().into_iter().enumerate() {
        let g = cs.rep_directions(r);
        let y = if dim == n {
            let x = bm.basis.pure_to_bloch(&haar_state(bm.dim(), rng));
            g.transpose() * (x - x_ss)
        } else if dim == 0 {
            RVec::zeros(0)
        } else {
            let dir = RVec::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut *rng)));
            let dir = &dir / dir.norm().max(1e-300);
            let step = g * &dir;
            // |x_ss + t·step|² = R²
            let pe = x_ss.dot(&step);
            let disc = (pe * pe - (x_ss.norm_squared() - r2)).max(0.0);
            dir * (-pe + disc.sqrt())
        };
        p.rows_mut(offset, dim).copy_from(&y);
        offset += dim;
    }
    let scale = bm.scale();
    for e in 0..cs.n_rates() {
        let l: f64 = rng.random_range((1e-2f64).ln()..10f64.ln());
        p[offset + e] = l.exp() * scale;
    }
    p
}

/// Multistart Levenberg–Marquardt over a constraint system.
pub fn solve_numeric(cs: &ConstraintSystem, cfg: &SolverConfig) -> Result<SolutionSet> {
    solve_numeric_with_family(cs, cfg, &[])
}

/// As [`solve_numeric`], treating ensembles related by any of `family` as
/// equal.
pub fn solve_numeric_with_family(
    cs: &ConstraintSystem,
    cfg: &SolverConfig,
    family: &[RMat],
) -> Result<SolutionSet> {
    cfg.validate()?;
    let np = cs.n_params();
    let extra = np.saturating_sub(cs.n_constraints());
    let bm = cs.model();
    let reach = bm.pure_radius_sq().sqrt() + bm.x_ss.norm();
    let pin = (extra > 0 && cs.n_state_params() > 0).then_some(0usize);
    let opts = LmOptions {
        max_iter: cfg.max_iter,
        tol: cfg.tol * 1e-3,
    };
    let runs: Vec<(StartRecord, Option<Ensemble>)> = (0..cfg.seeds)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(i as u64);
            let mut p0 = start_point(cs, &mut rng);
            let out = match pin {
                Some(idx) => {
                    let slot = i % cfg.pin_grid;
                    let value = -reach + 2.0 * reach * (slot as f64 + 0.5) / cfg.pin_grid as f64;
                    p0[idx] = value;
                    let free: Vec<usize> = (0..np).filter(|&c| c != idx).collect();
                    let embed = |q: &RVec| {
                        let mut full = p0.clone();
                        for (a, &c) in free.iter().enumerate() {
                            full[c] = q[a];
                        }
                        full
                    };
                    let f = |q: &RVec| {
                        let (r, j) = cs.residual_and_jacobian(&embed(q), true);
                        (r, j.select_columns(&free))
                    };
                    let q0 = RVec::from_iterator(free.len(), free.iter().map(|&c| p0[c]));
                    let res = lm::minimize(f, q0, opts);
                    lm::LmOutcome {
                        x: embed(&res.x),
                        ..res
                    }
                }
                None => lm::minimize(|p: &RVec| cs.residual_and_jacobian(p, true), p0, opts),
            };
            accept(cs, cfg, i, out)
        })
        .collect();
    let mut set = SolutionSet::default();
    let scale = bm.scale();
    let mut kept: Vec<(Ensemble, f64)> = Vec::new();
    for (rec, ens) in runs {
        if let Some(e) = ens {
            let r = rec.residual;
            match kept
                .iter_mut()
                .find(|(k, _)| ensemble_distance(k, &e, scale, family) <= cfg.dedup_eps)
            {
                Some(slot) => {
                    if r < slot.1 {
                        *slot = (e, r);
                    }
                }
                None => kept.push((e, r)),
            }
        }
        set.diagnostics.push(rec);
    }
    let mut ensembles: Vec<Ensemble> = kept.into_iter().map(|(e, _)| canonicalize(&e)).collect();
    sort_canonical(&mut ensembles);
    set.family_tags = vec![None; ensembles.len()];
    set.ensembles = ensembles;
    Ok(set)
}

fn accept(
    cs: &ConstraintSystem,
    cfg: &SolverConfig,
    start: usize,
    out: lm::LmOutcome,
) -> (StartRecord, Option<Ensemble>) {
    let residual = cs.residual(&out.x).norm();
    let record = |outcome| StartRecord {
        start,
        residual,
        iterations: out.iterations,
        outcome,
    };
    if !(residual <= cfg.tol) {
        return (record(StartOutcome::NotConverged), None);
    }
    let (xs, mut kappa) = cs.expand(&out.x);
    if kappa.iter().any(|v| *v < -1e-6) {
        return (record(StartOutcome::NegativeRate), None);
    }
    kappa.apply(|v| *v = v.max(0.0));
    let bm = cs.model();
    if bm.dim() > 2 {
        let worst = xs
            .iter()
            .map(|x| min_eigenvalue(&bm.basis.bloch_to_rho(x).expect("length")))
            .fold(f64::INFINITY, f64::min);
        if worst < -1e-9 {
            return (record(StartOutcome::NotPositive), None);
        }
    }
    let ens = match Ensemble::new(bm.dim(), xs.into_iter().map(Into::into).collect(), kappa) {
        Ok(e) => e,
        Err(_) => return (record(StartOutcome::NotConverged), None),
    };
    if !strongly_connected(ens.kappa(), 0.0) {
        return (record(StartOutcome::Disconnected), None);
    }
    if ens.min_separation() <= cfg.dedup_eps {
        return (record(StartOutcome::CoincidentMembers), None);
    }
    (record(StartOutcome::Accepted), Some(ens))
}

fn relabelings(k: usize) -> Vec<Vec<usize>> {
    if k <= 7 {
        (0..k).permutations(k).collect()
    } else {
        let mut out = Vec::with_capacity(2 * k);
        for s in 0..k {
            out.push((0..k).map(|i| (i + s) % k).collect());
            out.push((0..k).map(|i| (s + k - i) % k).collect());
        }
        out
    }
}

/// `min_π max_k ‖x_k − x′_{π(k)}‖ + max |κ − κ′_π| / scale`, minimized also
/// over the images of `a` under `family`.
pub fn ensemble_distance(a: &Ensemble, b: &Ensemble, scale: f64, family: &[RMat]) -> f64 {
    if a.k() != b.k() || a.dim() != b.dim() {
        return f64::INFINITY;
    }
    let k = a.k();
    let n = a.states()[0].len();
    let mut maps = vec![RMat::identity(n, n)];
    maps.extend(family.iter().cloned());
    let mut best = f64::INFINITY;
    for t in &maps {
        let images: Vec<RVec> = a.states().iter().map(|x| t * &x.0).collect();
        for perm in relabelings(k) {
            let mut d = 0.0f64;
            for i in 0..k {
                d = d.max((&images[i] - &b.states()[perm[i]].0).norm());
                if d >= best {
                    break;
                }
            }
            if d >= best {
                continue;
            }
            let mut dk = 0.0f64;
            for i in 0..k {
                for j in 0..k {
                    dk = dk.max((a.kappa()[(i, j)] - b.kappa()[(perm[i], perm[j])]).abs());
                }
            }
            best = best.min(d + dk / scale.max(1e-300));
        }
    }
    best
}

/// Removes near-duplicates, keeping the first representative.
pub fn dedup(ensembles: &[Ensemble], eps: f64, scale: f64, family: &[RMat]) -> Vec<Ensemble> {
    let mut out: Vec<Ensemble> = Vec::new();
    for e in ensembles {
        if !out.iter().any(|k| ensemble_distance(k, e, scale, family) <= eps) {
            out.push(e.clone());
        }
    }
    out
}

fn key(x: &RVec) -> Vec<i64> {
    x.iter().map(|v| (v * 1e6).round() as i64).collect()
}

/// Cyclic relabeling that puts the lexicographically smallest member first.
pub fn canonicalize(ens: &Ensemble) -> Ensemble {
    let k = ens.k();
    let best = (0..k)
        .min_by_key(|&s| key(&ens.states()[s].0))
        .unwrap_or(0);
    let perm: Vec<usize> = (0..k).map(|i| (i + best) % k).collect();
    ens.permuted(&perm)
}

fn sort_canonical(ens: &mut [Ensemble]) {
    ens.sort_by_key(|e| {
        e.states()
            .iter()
            .flat_map(|x| key(&x.0))
            .chain(e.kappa().iter().map(|v| (v * 1e6).round() as i64))
            .collect::<Vec<_>>()
    });
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRow {
    pub param: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    /// Midpoints between consecutive grid points where the count changes.
    pub thresholds: Vec<f64>,
}

/// Number of distinct PREs at each grid point, counting ensembles related by
/// a `family` map once; `make` builds the system for one parameter value.
pub fn scan_existence<F>(grid: &[f64], make: F, cfg: &SolverConfig, family: &[RMat]) -> Result<ScanTable>
where
    F: Fn(f64) -> Result<ConstraintSystem>,
{
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        let cs = make(p)?;
        let set = solve_numeric_with_family(&cs, cfg, family)?;
        rows.push(ScanRow {
            param: p,
            count: set.len(),
        });
    }
    let thresholds = rows
        .windows(2)
        .filter(|w| w[0].count != w[1].count)
        .map(|w| 0.5 * (w[0].param + w[1].param))
        .collect();
    Ok(ScanTable { rows, thresholds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::OperatorBasis;
    use crate::catalog;
    use crate::constraints::{verify, TransitionGraph};
    use crate::model::vectorize;

    fn rf(omega: f64) -> (crate::model::MasterEquation, BlochModel) {
        let me = catalog::resonance_fluorescence(1.0, omega).unwrap();
        let bm = vectorize(&me, &OperatorBasis::new(2).unwrap()).unwrap();
        (me, bm)
    }

    #[test]
    fn analytic_k2_counts() {
        let (me, bm) = rf(0.18);
        let set = analytic_k2(&bm).unwrap();
        assert_eq!(set.len(), 3);
        for e in &set.ensembles {
            assert!(verify(&me, &bm, e, 1e-12).unwrap().pass);
        }
        assert_eq!(analytic_k2(&rf(0.5).1).unwrap().len(), 1);
    }

    #[test]
    fn numeric_matches_analytic_k2() {
        let (_, bm) = rf(0.18);
        let cs = ConstraintSystem::build_full(&bm, 2, TransitionGraph::Cyclic).unwrap();
        let cfg = SolverConfig {
            seeds: 64,
            ..Default::default()
        };
        let num = solve_numeric(&cs, &cfg).unwrap();
        let ana = analytic_k2(&bm).unwrap();
        assert_eq!(num.len(), 3);
        for a in &ana.ensembles {
            let d = num
                .ensembles
                .iter()
                .map(|n| ensemble_distance(a, n, bm.scale(), &[]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6, "distance {d}");
        }
    }

    #[test]
    fn wigner_family_k3() {
        let me = catalog::absorption_emission(1.0, 0.2).unwrap();
        let bm = vectorize(&me, &OperatorBasis::new(2).unwrap()).unwrap();
        let set = solve_wigner_family(&bm, 3).unwrap();
        assert_eq!(set.rate_vertices.len(), 1);
        let gs = 1.2;
        for r in set.rate_vertices[0].iter() {
            assert!((r - gs / 6.0).abs() < 1e-12);
        }
        assert_eq!(set.len(), 1);
        assert!(verify(&me, &bm, &set.ensembles[0], 1e-10).unwrap().pass);
    }

    #[test]
    fn determinism() {
        let (_, bm) = rf(0.18);
        let cs = ConstraintSystem::build_full(&bm, 2, TransitionGraph::Cyclic).unwrap();
        let cfg = SolverConfig {
            seeds: 16,
            rng_seed: 7,
            ..Default::default()
        };
        let a = solve_numeric(&cs, &cfg).unwrap();
        let b = solve_numeric(&cs, &cfg).unwrap();
        assert_eq!(a.ensembles, b.ensembles);
    }
}
