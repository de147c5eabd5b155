#![allow(dead_code)]

use pre_forge::algebra::{unitary_exp, CMat, CVec, CoherenceVector, OperatorBasis, RMat, RVec, C64 as Complex64};
use pre_forge::constraints::{verify, Ensemble};
use pre_forge::model::{apply_unravelling, lindbladian, vectorize, MasterEquation, UnravellingSetting};
use pre_forge::solver::dedup;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> CMat {
    CMat::from_fn(d, d, |_, _| Complex64::new(gauss(rng), gauss(rng)))
}

pub fn random_state(d: usize, rng: &mut ChaCha8Rng) -> CVec {
    let v = CVec::from_fn(d, |_, _| Complex64::new(gauss(rng), gauss(rng)));
    let n = v.norm();
    v / Complex64::new(n, 0.0)
}

/// Full-rank mixed state `AA†/Tr(AA†)`.
pub fn random_density(d: usize, rng: &mut ChaCha8Rng) -> CMat {
    let a = random_matrix(d, rng);
    let r = &a * a.adjoint();
    let t = r.trace();
    r / t
}

pub fn random_master_equation(d: usize, l: usize, rng: &mut ChaCha8Rng) -> MasterEquation {
    let a = random_matrix(d, rng);
    let h = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
    let cs = (0..l).map(|_| random_matrix(d, rng) * Complex64::new(0.5, 0.0)).collect();
    MasterEquation::new(h, cs).expect("random master equation")
}

/// First `l` columns of a random `m × m` unitary.
pub fn random_semi_unitary(m: usize, l: usize, rng: &mut ChaCha8Rng) -> CMat {
    let a = random_matrix(m, rng);
    let h = (&a + a.adjoint()) * Complex64::new(0.5, 0.0);
    unitary_exp(&h).columns(0, l).into_owned()
}

pub fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

/// ρ → x → ρ reproduces ρ.
pub fn prop_round_trip(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = r.random_range(2..=4);
    let basis = OperatorBasis::new(d).unwrap();
    let rho = random_density(d, &mut r);
    let x = basis.rho_to_bloch(&rho).map_err(|e| e.to_string())?;
    let back = basis.bloch_to_rho(&x).map_err(|e| e.to_string())?;
    let err = (&back - &rho).norm();
    check(err <= 1e-12, format!("d={d}: round-trip error {err:e}"))
}

/// `Tr ρ² = (1 + 2|x|²/D)/D`, and pure states sit on radius² `D(D−1)/2`.
pub fn prop_purity_bridge(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = r.random_range(2..=4);
    let basis = OperatorBasis::new(d).unwrap();
    let df = d as f64;
    let rho = random_density(d, &mut r);
    let x = basis.rho_to_bloch(&rho).map_err(|e| e.to_string())?;
    let purity = (&rho * &rho).trace().re;
    let bridge = (1.0 + 2.0 * x.norm_squared() / df) / df;
    check((purity - bridge).abs() <= 1e-12, format!("mixed: {purity} vs {bridge}"))?;
    let psi = random_state(d, &mut r);
    let y = basis.pure_to_bloch(&psi);
    let gap = (y.norm_squared() - basis.pure_radius_sq()).abs();
    check(gap <= 1e-11, format!("pure radius off by {gap:e}"))
}

/// Any semi-unitary mixing plus local-oscillator offset leaves ℒ unchanged.
pub fn prop_unravelling_invariance(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = r.random_range(2..=3);
    let l = r.random_range(1..=3);
    let m = l + r.random_range(0..=2);
    let me = random_master_equation(d, l, &mut r);
    let s = random_semi_unitary(m, l, &mut r);
    let beta = CVec::from_fn(m, |_, _| Complex64::new(gauss(&mut r), gauss(&mut r)));
    let setting = UnravellingSetting::new(s, beta).map_err(|e| e.to_string())?;
    let unr = apply_unravelling(&me, &setting).map_err(|e| e.to_string())?;
    let reference = lindbladian(&me);
    let dist = unr.lindbladian().distance(&reference);
    let scale = reference.matrix().norm();
    check(dist <= 1e-10 * scale.max(1.0), format!("ℒ moved by {dist:e}"))
}

/// Operator-space residuals equal `(√2/D)·‖Bloch residual‖` member by member.
pub fn prop_residual_equivalence(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = r.random_range(2..=3);
    let l = r.random_range(1..=2);
    let me = random_master_equation(d, l, &mut r);
    let bm = vectorize(&me, &OperatorBasis::new(d).unwrap()).map_err(|e| e.to_string())?;
    let k = r.random_range(2..=4);
    let states: Vec<CoherenceVector> = (0..k)
        .map(|_| CoherenceVector(bm.basis.pure_to_bloch(&random_state(d, &mut r))))
        .collect();
    let kappa = RMat::from_fn(k, k, |i, j| if i == j { 0.0 } else { r.random_range(0.01..2.0) });
    let ens = Ensemble::new(d, states, kappa).map_err(|e| e.to_string())?;
    let report = verify(&me, &bm, &ens, 1e-10).map_err(|e| e.to_string())?;
    let xs = ens.states();
    for kk in 0..k {
        let mut res: RVec = bm.drift(&xs[kk].0);
        for j in 0..k {
            if j != kk {
                res -= (&xs[j].0 - &xs[kk].0) * ens.kappa()[(j, kk)];
            }
        }
        let expected = 2f64.sqrt() / d as f64 * res.norm();
        let got = report.residuals[kk];
        check(
            (expected - got).abs() <= 1e-10 * (1.0 + expected),
            format!("member {kk}: Bloch {expected} vs operator {got}"),
        )?;
    }
    Ok(())
}

/// Deduplicating twice changes nothing, and permuted copies collapse.
pub fn prop_dedup_idempotent(seed: u64) -> Result<(), String> {
    let mut r = rng(seed);
    let d = 2;
    let basis = OperatorBasis::new(d).unwrap();
    let n_distinct = r.random_range(1..=4);
    let k = r.random_range(2..=3);
    let mut all = Vec::new();
    for _ in 0..n_distinct {
        let states: Vec<CoherenceVector> = (0..k)
            .map(|_| CoherenceVector(basis.pure_to_bloch(&random_state(d, &mut r))))
            .collect();
        let kappa = RMat::from_fn(k, k, |i, j| if i == j { 0.0 } else { r.random_range(0.1..2.0) });
        let ens = Ensemble::new(d, states, kappa).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..k).collect();
        perm.rotate_left(1);
        all.push(ens.permuted(&perm));
        all.push(ens);
    }
    let once = dedup(&all, 1e-6, 1.0, &[]);
    let twice = dedup(&once, 1e-6, 1.0, &[]);
    check(once.len() == twice.len(), format!("{} then {}", once.len(), twice.len()))?;
    check(once == twice, "second pass reordered or changed members".into())?;
    check(
        once.len() == n_distinct,
        format!("{} distinct ensembles collapsed to {}", n_distinct, once.len()),
    )
}

pub const PROPERTIES: [(&str, fn(u64) -> Result<(), String>); 5] = [
    ("round-trip", prop_round_trip),
    ("purity-bridge", prop_purity_bridge),
    ("L-invariance-under-unravelling", prop_unravelling_invariance),
    ("residual-equivalence", prop_residual_equivalence),
    ("dedup-idempotence", prop_dedup_idempotent),
];
