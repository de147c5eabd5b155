//! Quantum-jump trajectories under an adaptive scheme.
//!
//! Between detections the unnormalized state evolves under the exact step
//! `exp(−iH′_eff dt)` of the current setting; a detection happens once the
//! squared norm falls below a uniform variate, in a channel drawn with
//! probability `∝ ‖ĉ′_m ψ‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{c, expm_complex, CMat, CVec, RMat, RVec};
use crate::constraints::Ensemble;
use crate::error::{Error, Result};
use crate::measurement::{AdaptiveScheme, JumpTarget};
use crate::model::{apply_unravelling, MasterEquation};

/// Largest admissible `dt · (total jump rate)`.
pub const MAX_STEP_PROBABILITY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordPolicy {
    None,
    JumpsOnly,
    /// Every `n`-th jump.
    Strided(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    /// Step; `None` means `10⁻³/‖L₀‖`.
    pub dt: Option<f64>,
    /// Jumps counted after burn-in.
    pub n_jumps: usize,
    pub t_max: Option<f64>,
    pub rng_seed: u64,
    pub record: RecordPolicy,
    pub burn_in: usize,
    /// Largest tolerated distance `√(1 − |⟨φ_k|ψ⟩|²)` before a jump.
    pub drift_tol: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            dt: None,
            n_jumps: 100_000,
            t_max: None,
            rng_seed: 0,
            record: RecordPolicy::None,
            burn_in: 20,
            drift_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub channel: usize,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryStats {
    /// Fraction of time spent with each label.
    pub occupancy: RVec,
    /// `jump_counts[(j, k)]`: detections taking label `k` to `j ≠ k`.
    pub jump_counts: RMat,
    pub self_loops: Vec<usize>,
    pub time_in: RVec,
    pub max_state_drift: f64,
    pub n_jumps: usize,
    pub total_time: f64,
    pub dt: f64,
    #[serde(skip)]
    pub events: Vec<JumpEvent>,
}

impl TrajectoryStats {
    /// Binomial standard error `√(𝓌(1−𝓌)/n)` of each occupancy.
    pub fn occupancy_sigma(&self) -> RVec {
        let n = self.n_jumps.max(1) as f64;
        self.occupancy.map(|w| (w * (1.0 - w) / n).sqrt())
    }

    /// Empirical `κⱼₖ` estimates, counts over time spent in `k`.
    pub fn empirical_rates(&self) -> RMat {
        let k = self.occupancy.len();
        RMat::from_fn(k, k, |j, i| {
            if self.time_in[i] > 0.0 {
                self.jump_counts[(j, i)] / self.time_in[i]
            } else {
                0.0
            }
        })
    }
}

/// Event log as CSV with header `time,channel,from,to`.
pub fn events_csv(events: &[JumpEvent]) -> String {
    let mut s = String::from("time,channel,from,to\n");
    for e in events {
        s.push_str(&format!("{},{},{},{}\n", e.time, e.channel, e.from, e.to));
    }
    s
}

struct Setting {
    jumps: Vec<CMat>,
    step: CMat,
    targets: Vec<JumpTarget>,
}

fn prepare(me: &MasterEquation, scheme: &AdaptiveScheme, dt: f64) -> Result<Vec<Setting>> {
    scheme
        .settings
        .iter()
        .zip(&scheme.jump_map)
        .map(|(s, targets)| {
            let unr = apply_unravelling(me, s)?;
            Ok(Setting {
                step: expm_complex(&(&unr.h_eff * c(0.0, -dt))),
                jumps: unr.jumps,
                targets: targets.clone(),
            })
        })
        .collect()
}

fn default_dt(me: &MasterEquation) -> f64 {
    let l = me.lindbladian();
    1e-3 / l.matrix().norm().max(1e-300)
}

fn total_rate(s: &Setting, psi: &CVec) -> f64 {
    s.jumps.iter().map(|op| (op * psi).norm_squared()).sum()
}

fn choose_channel(s: &Setting, psi: &CVec, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let weights: Vec<f64> = s.jumps.iter().map(|op| (op * psi).norm_squared()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (m, w) in weights.iter().enumerate() {
        if u < *w {
            return (m, total);
        }
        u -= w;
    }
    (weights.len() - 1, total)
}

fn infidelity_distance(phi: &CVec, psi: &CVec) -> f64 {
    let f = phi.dotc(psi).norm_sqr() / (phi.norm_squared() * psi.norm_squared());
    (1.0 - f).max(0.0).sqrt()
}

/// Runs one long trajectory starting in member 1 and collects statistics.
pub fn simulate(
    me: &MasterEquation,
    scheme: &AdaptiveScheme,
    ens: &Ensemble,
    cfg: &TrajectoryConfig,
) -> Result<TrajectoryStats> {
    let k = ens.k();
    if scheme.k() != k {
        return Err(Error::Shape {
            expected: k,
            found: scheme.k(),
        });
    }
    let dt = cfg.dt.unwrap_or_else(|| default_dt(me));
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
    }
    let phis = ens.pure_states();
    let settings = prepare(me, scheme, dt)?;
    let max_rate = settings
        .iter()
        .zip(&phis)
        .map(|(s, p)| total_rate(s, p))
        .fold(0.0, f64::max);
    if dt * max_rate > MAX_STEP_PROBABILITY {
        return Err(Error::InvalidArgument(format!(
            "dt·rate = {:.3e} exceeds {MAX_STEP_PROBABILITY}",
            dt * max_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut label = 0usize;
    let mut psi = phis[0].clone();
    let mut next = psi.clone();
    let mut threshold: f64 = rng.random();
    let mut t = 0.0;
    let mut seen = 0usize;
    let mut counted = 0usize;
    let mut time_in = RVec::zeros(k);
    let mut counts = RMat::zeros(k, k);
    let mut self_loops = vec![0usize; k];
    let mut max_drift = 0.0f64;
    let mut events = Vec::new();
    let t_max = cfg.t_max.unwrap_or(f64::INFINITY);
    let one = c(1.0, 0.0);
    let zero = c(0.0, 0.0);
    while counted < cfg.n_jumps && t < t_max {
        let s = &settings[label];
        next.gemv(one, &s.step, &psi, zero);
        std::mem::swap(&mut psi, &mut next);
        t += dt;
        if seen >= cfg.burn_in {
            time_in[label] += dt;
        }
        if psi.norm_squared() > threshold {
            continue;
        }
        let norm = psi.norm();
        psi /= c(norm, 0.0);
        let drift = infidelity_distance(&phis[label], &psi);
        max_drift = max_drift.max(drift);
        if drift > cfg.drift_tol {
            return Err(Error::RealizationFailure { drift, jumps: seen });
        }
        let (m, _) = choose_channel(s, &psi, &mut rng);
        let after = &s.jumps[m] * &psi;
        let n_after = after.norm();
        psi = after / c(n_after, 0.0);
        let from = label;
        label = match s.targets[m] {
            JumpTarget::Member(j) => j,
            JumpTarget::SelfLoop | JumpTarget::Idle => label,
        };
        if seen >= cfg.burn_in {
            if label == from {
                self_loops[from] += 1;
            } else {
                counts[(label, from)] += 1.0;
            }
            counted += 1;
            let keep = match cfg.record {
                RecordPolicy::None => false,
                RecordPolicy::JumpsOnly => true,
                RecordPolicy::Strided(n) => n > 0 && counted.is_multiple_of(n),
            };
            if keep {
                events.push(JumpEvent {
                    time: t,
                    channel: m,
                    from,
                    to: label,
                });
            }
        }
        seen += 1;
        threshold = rng.random();
    }
    let total = time_in.sum();
    Ok(TrajectoryStats {
        occupancy: if total > 0.0 { &time_in / total } else { time_in.clone() },
        jump_counts: counts,
        self_loops,
        time_in,
        max_state_drift: max_drift,
        n_jumps: counted,
        total_time: t,
        dt,
        events,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnconditionalReport {
    pub times: Vec<f64>,
    /// Frobenius distance between the trajectory average and `e^{ℒt}ρ₀`.
    pub distances: Vec<f64>,
    pub max_distance: f64,
    pub n_trajectories: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Averages `n_trajectories` runs from `initial` (label 1) and compares with
/// the master-equation solution at `times`.
pub fn unconditional_check(
    me: &MasterEquation,
    scheme: &AdaptiveScheme,
    initial: &CVec,
    times: &[f64],
    n_trajectories: usize,
    cfg: &TrajectoryConfig,
) -> Result<UnconditionalReport> {
    let d = me.dim();
    if initial.len() != d {
        return Err(Error::Shape {
            expected: d,
            found: initial.len(),
        });
    }
    let dt = cfg.dt.unwrap_or_else(|| default_dt(me));
    let settings = prepare(me, scheme, dt)?;
    let psi0 = initial / c(initial.norm(), 0.0);
    let steps: Vec<usize> = times.iter().map(|t| (t / dt).round() as usize).collect();
    let last = steps.iter().copied().max().unwrap_or(0);
    let runs: Vec<Vec<CMat>> = (0..n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(i as u64 + 1);
            let mut snaps = vec![CMat::zeros(d, d); steps.len()];
            let mut psi = psi0.clone();
            let mut label = 0usize;
            let mut threshold: f64 = rng.random();
            let record = |psi: &CVec, step: usize, snaps: &mut Vec<CMat>| {
                let n = psi.norm_squared();
                for (slot, &s) in steps.iter().enumerate() {
                    if s == step {
                        snaps[slot] = psi * psi.adjoint() / c(n, 0.0);
                    }
                }
            };
            record(&psi, 0, &mut snaps);
            for step in 1..=last {
                let s = &settings[label];
                psi = &s.step * &psi;
                if psi.norm_squared() <= threshold {
                    let n = psi.norm();
                    psi /= c(n, 0.0);
                    let (m, _) = choose_channel(s, &psi, &mut rng);
                    let after = &s.jumps[m] * &psi;
                    let na = after.norm();
                    psi = after / c(na, 0.0);
                    if let JumpTarget::Member(j) = s.targets[m] {
                        label = j;
                    }
                    threshold = rng.random();
                }
                record(&psi, step, &mut snaps);
            }
            snaps
        })
        .collect();
    let lind = me.lindbladian();
    let rho0 = &psi0 * psi0.adjoint();
    let v0 = CVec::from_column_slice(rho0.as_slice());
    let mut distances = Vec::with_capacity(times.len());
    for (slot, &s) in steps.iter().enumerate() {
        let t = s as f64 * dt;
        let prop = expm_complex(&(lind.matrix() * c(t, 0.0)));
        let exact = CMat::from_column_slice(d, d, (prop * &v0).as_slice());
        let mean = runs
            .iter()
            .fold(CMat::zeros(d, d), |acc, r| acc + &r[slot])
            / c(n_trajectories.max(1) as f64, 0.0);
        distances.push((mean - exact).norm());
    }
    let max_distance = distances.iter().copied().fold(0.0, f64::max);
    let tol = 5e-3;
    Ok(UnconditionalReport {
        times: steps.iter().map(|&s| s as f64 * dt).collect(),
        distances,
        max_distance,
        n_trajectories,
        tol,
        pass: max_distance <= tol,
    })
}
