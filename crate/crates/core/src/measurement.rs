//! Adaptive measurement schemes that realize an ensemble, and the symmetry
//! checks on such schemes.

use itertools::Itertools;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::algebra::{
    c, min_eigenvalue, unitary_exp, CMat, CVec, OperatorBasis, RMat, RVec, Superoperator,
};
use crate::constraints::Ensemble;
use crate::error::{Error, Result};
use crate::lm::{self, LmOptions};
use crate::model::{apply_unravelling, BlochModel, MasterEquation, UnravellingSetting};
use crate::symmetry::{InvariantSubspace, WignerSymmetry};

/// Where a detection in one channel sends the conditioned state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JumpTarget {
    Member(usize),
    /// The state is mapped to itself.
    SelfLoop,
    /// The channel never fires from this member.
    Idle,
}

/// One unravelling per ensemble member and the resulting routing of jumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveScheme {
    pub settings: Vec<UnravellingSetting>,
    /// `jump_map[k][m]`: target of detector `m` while in member `k`.
    pub jump_map: Vec<Vec<JumpTarget>>,
    /// Largest synthesis residual over members.
    pub residual: f64,
}

impl AdaptiveScheme {
    pub fn k(&self) -> usize {
        self.settings.len()
    }

    pub fn n_detectors(&self) -> usize {
        self.settings.first().map_or(0, |s| s.n_detectors())
    }
}

/// `|β|²` ceiling as a multiple of the largest steady-state channel rate.
pub const WLO_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthesisOptions {
    /// `|β_m|²` ceiling in units of the largest steady-state channel rate;
    /// `f64::INFINITY` lifts it.
    pub wlo_factor: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self { wlo_factor: WLO_FACTOR }
    }
}

fn project_out(v: &CVec, phi: &CVec) -> CVec {
    v - phi * phi.dotc(v)
}

fn push_complex(out: &mut Vec<f64>, v: &CVec) {
    for z in v.iter() {
        out.push(z.re);
        out.push(z.im);
    }
}

struct MemberProblem<'a> {
    me: &'a MasterEquation,
    phis: &'a [CVec],
    k: usize,
    rates: Vec<(usize, f64)>,
    m: usize,
    bound: f64,
}

impl MemberProblem<'_> {
    fn setting(&self, p: &RVec, mix: bool) -> UnravellingSetting {
        let m = self.m;
        let l = self.me.n_channels();
        let beta = CVec::from_iterator(m, (0..m).map(|i| c(p[2 * i], p[2 * i + 1])));
        let s = if mix {
            let mut h = CMat::zeros(m, m);
            let mut idx = 2 * m;
            for i in 0..m {
                h[(i, i)] = c(p[idx], 0.0);
                idx += 1;
                for j in (i + 1)..m {
                    h[(i, j)] = c(p[idx], p[idx + 1]);
                    h[(j, i)] = c(p[idx], -p[idx + 1]);
                    idx += 2;
                }
            }
            unitary_exp(&h).columns(0, l).into_owned()
        } else {
            let mut s = CMat::zeros(m, l);
            for i in 0..l {
                s[(i, i)] = c(1.0, 0.0);
            }
            s
        };
        UnravellingSetting::new_unchecked(s, beta)
    }

    fn residual(&self, p: &RVec, mix: bool, routing: &[JumpTarget]) -> RVec {
        let setting = self.setting(p, mix);
        let unr = apply_unravelling(self.me, &setting).expect("shapes fixed by construction");
        let phi = &self.phis[self.k];
        let mut out = Vec::new();
        push_complex(&mut out, &project_out(&(&unr.h_eff * phi), phi));
        let mut flux = vec![0.0; self.phis.len()];
        for (mi, target) in routing.iter().enumerate() {
            let w = &unr.jumps[mi] * phi;
            match target {
                JumpTarget::Member(j) => {
                    push_complex(&mut out, &project_out(&w, &self.phis[*j]));
                    flux[*j] += w.norm_squared();
                }
                JumpTarget::SelfLoop => push_complex(&mut out, &project_out(&w, phi)),
                JumpTarget::Idle => push_complex(&mut out, &w),
            }
        }
        for &(j, kap) in &self.rates {
            out.push(flux[j] - kap);
        }
        for b in setting.beta().iter() {
            out.push((b.norm_sqr() - self.bound).max(0.0));
        }
        RVec::from_vec(out)
    }
}

/// Finds, for every member, a setting `(S_k, β_k)` whose no-jump operator
/// has `|φ_k⟩` as eigenstate and whose detections reproduce the rates.
pub fn synthesize(me: &MasterEquation, bm: &BlochModel, ens: &Ensemble, m: usize) -> Result<AdaptiveScheme> {
    synthesize_with(me, bm, ens, m, &SynthesisOptions::default())
}

pub fn synthesize_with(
    me: &MasterEquation,
    bm: &BlochModel,
    ens: &Ensemble,
    m: usize,
    opts: &SynthesisOptions,
) -> Result<AdaptiveScheme> {
    let l = me.n_channels();
    if m < l {
        return Err(Error::InvalidArgument(format!("{m} detectors < {l} channels")));
    }
    if ens.dim() != me.dim() {
        return Err(Error::Shape {
            expected: me.dim(),
            found: ens.dim(),
        });
    }
    let phis = ens.pure_states();
    if !(opts.wlo_factor > 0.0) {
        return Err(Error::InvalidArgument(format!("WLO factor {} must be positive", opts.wlo_factor)));
    }
    let bound = opts.wlo_factor * me.max_channel_rate(&bm.rho_ss());
    let mut settings = Vec::with_capacity(ens.k());
    let mut jump_map = Vec::with_capacity(ens.k());
    let mut worst = 0.0f64;
    for k in 0..ens.k() {
        let rates: Vec<(usize, f64)> = (0..ens.k())
            .filter(|&j| j != k && ens.kappa()[(j, k)] > 0.0)
            .map(|j| (j, ens.kappa()[(j, k)]))
            .collect();
        let prob = MemberProblem {
            me,
            phis: &phis,
            k,
            rates,
            m,
            bound,
        };
        let (setting, routing, res) = solve_member(&prob, k as u64)?;
        worst = worst.max(res);
        settings.push(setting);
        jump_map.push(routing);
    }
    Ok(AdaptiveScheme {
        settings,
        jump_map,
        residual: worst,
    })
}

fn routings(prob: &MemberProblem<'_>) -> Vec<Vec<JumpTarget>> {
    let mut options: Vec<JumpTarget> = prob.rates.iter().map(|&(j, _)| JumpTarget::Member(j)).collect();
    options.push(JumpTarget::SelfLoop);
    options.push(JumpTarget::Idle);
    (0..prob.m)
        .map(|_| options.iter().copied())
        .multi_cartesian_product()
        .filter(|r| {
            prob.rates
                .iter()
                .all(|&(j, _)| r.contains(&JumpTarget::Member(j)))
        })
        .collect()
}

/// Least-squares `β` making `(S c)_m|φ_k⟩ + β_m|φ_k⟩` parallel to the routed
/// target, with `S` the identity embedding. Exact whenever `D = 2`.
fn linear_beta(prob: &MemberProblem<'_>, routing: &[JumpTarget]) -> RVec {
    let phi = &prob.phis[prob.k];
    let mut p = RVec::zeros(2 * prob.m);
    for (mi, target) in routing.iter().enumerate() {
        let JumpTarget::Member(j) = *target else { continue };
        let Some(op) = prob.me.lindblads().get(mi) else { continue };
        let a = project_out(phi, &prob.phis[j]);
        let b = project_out(&(op * phi), &prob.phis[j]);
        let na = a.norm_squared();
        if na > 1e-24 {
            let beta = -a.dotc(&b) / na;
            p[2 * mi] = beta.re;
            p[2 * mi + 1] = beta.im;
        }
    }
    p
}

fn solve_member(
    prob: &MemberProblem<'_>,
    seed: u64,
) -> Result<(UnravellingSetting, Vec<JumpTarget>, f64)> {
    let m = prob.m;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5c4e_0000 + seed);
    let opts = LmOptions {
        max_iter: 300,
        tol: 1e-13,
    };
    let mut best = f64::INFINITY;
    let all = routings(prob);
    let amp = if prob.bound.is_finite() {
        prob.bound.sqrt() / 2.0
    } else {
        prob.rates.iter().map(|r| r.1).sum::<f64>().sqrt().max(1e-6)
    };
    for mix in [false, true] {
        let np = if mix { 2 * m + m * m } else { 2 * m };
        for routing in &all {
            for start in 0..24 {
                let p0 = if start == 0 {
                    let mut p = RVec::zeros(np);
                    p.rows_mut(0, 2 * m).copy_from(&linear_beta(prob, routing));
                    p
                } else if start == 1 {
                    RVec::zeros(np)
                } else {
                    RVec::from_iterator(
                        np,
                        (0..np).map(|i| {
                            let g: f64 = StandardNormal.sample(&mut rng);
                            if i < 2 * m {
                                g * amp
                            } else {
                                g
                            }
                        }),
                    )
                };
                let f = |p: &RVec| {
                    let r = prob.residual(p, mix, routing);
                    let j = lm::numeric_jacobian(&|q: &RVec| prob.residual(q, mix, routing), p, &r);
                    (r, j)
                };
                let out = lm::minimize(f, p0, opts);
                let res = prob.residual(&out.x, mix, routing).norm();
                best = best.min(res);
                if res <= 1e-9 {
                    let setting = prob.setting(&out.x, mix);
                    let setting = UnravellingSetting::new(setting.s().clone(), setting.beta().clone())?;
                    return Ok((setting, routing.clone(), res));
                }
            }
        }
    }
    Err(Error::SynthesisFailure {
        member: prob.k,
        residual: best,
    })
}

/// Invariant checks of a scheme against its ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchemeReport {
    /// `‖(1 − P_k)H′_eff|φ_k⟩‖` per member.
    pub eigen_residuals: Vec<f64>,
    /// Largest `‖(1 − P_target)ĉ′|φ_k⟩‖` over routed channels.
    pub jump_residual: f64,
    /// Largest `|Σ_m ‖ĉ′_m|φ_k⟩‖² − κⱼₖ|`.
    pub rate_error: f64,
    /// Self-loop rate per member.
    pub self_loop_rates: Vec<f64>,
    /// Largest superoperator distance between ℒ and a member's unravelling.
    pub lindbladian_error: f64,
    pub pass: bool,
}

pub fn check_scheme(me: &MasterEquation, ens: &Ensemble, scheme: &AdaptiveScheme) -> Result<SchemeReport> {
    if scheme.k() != ens.k() {
        return Err(Error::Shape {
            expected: ens.k(),
            found: scheme.k(),
        });
    }
    let phis = ens.pure_states();
    let lind = me.lindbladian();
    let mut eigen = Vec::new();
    let mut jump = 0.0f64;
    let mut rate = 0.0f64;
    let mut loops = Vec::new();
    let mut ldist = 0.0f64;
    for k in 0..ens.k() {
        let unr = apply_unravelling(me, &scheme.settings[k])?;
        ldist = ldist.max(unr.lindbladian().distance(&lind));
        let phi = &phis[k];
        eigen.push(project_out(&(&unr.h_eff * phi), phi).norm());
        let mut flux = vec![0.0; ens.k()];
        let mut self_rate = 0.0;
        for (mi, target) in scheme.jump_map[k].iter().enumerate() {
            let w = &unr.jumps[mi] * phi;
            match target {
                JumpTarget::Member(j) => {
                    jump = jump.max(project_out(&w, &phis[*j]).norm());
                    flux[*j] += w.norm_squared();
                }
                JumpTarget::SelfLoop => {
                    jump = jump.max(project_out(&w, phi).norm());
                    self_rate += w.norm_squared();
                }
                JumpTarget::Idle => jump = jump.max(w.norm()),
            }
        }
        for j in 0..ens.k() {
            if j != k {
                rate = rate.max((flux[j] - ens.kappa()[(j, k)]).abs());
            }
        }
        loops.push(self_rate);
    }
    let max_eigen = eigen.iter().copied().fold(0.0, f64::max);
    Ok(SchemeReport {
        pass: max_eigen <= 1e-8 && jump <= 1e-8 && rate <= 1e-6 && ldist <= 1e-10,
        eigen_residuals: eigen,
        jump_residual: jump,
        rate_error: rate,
        self_loop_rates: loops,
        lindbladian_error: ldist,
    })
}

/// One measurement operation that took a state out of the subspace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreservationViolation {
    pub member: usize,
    pub operation: String,
    pub distance: f64,
    pub witness: RVec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreservationReport {
    pub preserves: bool,
    pub max_distance: f64,
    pub violations: Vec<PreservationViolation>,
    pub samples: usize,
}

/// Largest `t` in `[0, 1]` with `ρ(x_ss + t·v) ≥ 0`.
fn positive_reach(basis: &OperatorBasis, x_ss: &RVec, v: &RVec) -> f64 {
    let ok = |t: f64| min_eigenvalue(&basis.bloch_to_rho(&(x_ss + v * t)).expect("length")) >= 0.0;
    if ok(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Samples states of `x_ss + 𝕴₀` (mixed and pure) and checks that every
/// normalized measurement-operation image stays in the subspace.
pub fn check_subspace_preservation(
    me: &MasterEquation,
    bm: &BlochModel,
    scheme: &AdaptiveScheme,
    sub: &InvariantSubspace,
) -> Result<PreservationReport> {
    let basis = &bm.basis;
    let x_ss = &bm.x_ss.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xa55e);
    let mut samples: Vec<RVec> = vec![x_ss.clone(), sub.witness.clone()];
    let radius = bm.pure_radius_sq().sqrt() * 2.0;
    for _ in 0..24 {
        let u = RVec::from_iterator(sub.n(), (0..sub.n()).map(|_| StandardNormal.sample(&mut rng)));
        let v = sub.basis_i0() * (&u / u.norm().max(1e-300)) * radius;
        let reach = positive_reach(basis, x_ss, &v);
        let frac: f64 = rand::Rng::random_range(&mut rng, 0.05..0.95);
        samples.push(x_ss + &v * (reach * frac));
        samples.push(x_ss + &v * reach);
    }
    let taus = [0.1, 1.0, 5.0].map(|t| t / bm.scale());
    let mut violations = Vec::new();
    let mut max_distance = 0.0f64;
    for (k, setting) in scheme.settings.iter().enumerate() {
        let unr = apply_unravelling(me, setting)?;
        let mut ops: Vec<(String, CMat)> = unr
            .jumps
            .iter()
            .enumerate()
            .map(|(mi, op)| (format!("jump {mi}"), op.clone()))
            .collect();
        for &tau in &taus {
            let prop = crate::algebra::expm_complex(&(&unr.h_eff * c(0.0, -tau)));
            ops.push((format!("no-jump t={tau:.3e}"), prop));
        }
        for (name, op) in &ops {
            let mut worst: Option<(f64, RVec)> = None;
            for x in &samples {
                let rho = basis.bloch_to_rho(x)?;
                let img = op * &rho * op.adjoint();
                let tr = img.trace().re;
                if tr <= 1e-12 {
                    continue;
                }
                let y = basis.coordinates_unnormalized(&(img / c(tr, 0.0)));
                let d = sub.distance(bm, &y);
                max_distance = max_distance.max(d);
                if d > 1e-8 && worst.as_ref().is_none_or(|(w, _)| d > *w) {
                    worst = Some((d, x.clone()));
                }
            }
            if let Some((distance, witness)) = worst {
                violations.push(PreservationViolation {
                    member: k,
                    operation: name.clone(),
                    distance,
                    witness,
                });
            }
        }
    }
    Ok(PreservationReport {
        preserves: violations.is_empty(),
        max_distance,
        violations,
        samples: samples.len(),
    })
}

/// Permutation `π` with `T₀x_k = x_{π(k)}`, if the ensemble is mapped to
/// itself.
pub fn induced_permutation(w: &WignerSymmetry, ens: &Ensemble) -> Option<Vec<usize>> {
    let mut perm = Vec::with_capacity(ens.k());
    for x in ens.states() {
        let y = w.t0() * &x.0;
        let j = ens
            .states()
            .iter()
            .position(|z| (&z.0 - &y).norm() < 1e-6)?;
        perm.push(j);
    }
    perm.iter().all_unique().then_some(perm)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WignerSchemeReport {
    /// Largest `‖T⁻¹J[ĉ_{π(k)}]T − J[ĉ_k]‖` over members and channels.
    pub jump_distance: f64,
    /// Same for the no-jump generators.
    pub no_jump_distance: f64,
    pub passes: bool,
}

fn full_map(t0: &RMat) -> RMat {
    let n = t0.nrows();
    let mut t = RMat::identity(n + 1, n + 1);
    t.view_mut((0, 0), (n, n)).copy_from(t0);
    t
}

/// Checks that conjugating member `π(k)`'s operations by the symmetry gives
/// member `k`'s operations.
pub fn check_wigner_scheme(
    me: &MasterEquation,
    bm: &BlochModel,
    scheme: &AdaptiveScheme,
    w: &WignerSymmetry,
    perm: &[usize],
) -> Result<WignerSchemeReport> {
    let k = scheme.k();
    if perm.len() != k || !perm.iter().all(|&p| p < k) || !perm.iter().all_unique() {
        return Err(Error::InvalidPermutation(format!("{perm:?} for {k} members")));
    }
    let t = full_map(w.t0());
    let t_inv = t.transpose();
    let d = me.dim();
    let unr: Vec<_> = scheme
        .settings
        .iter()
        .map(|s| apply_unravelling(me, s))
        .collect::<Result<_>>()?;
    let jump_rep = |op: &CMat| Superoperator::from_fn(d, |r| op * r * op.adjoint()).bloch_matrix(&bm.basis);
    let no_jump_rep = |h: &CMat| {
        let hd = h.adjoint();
        Superoperator::from_fn(d, |r| (h * r - r * &hd) * c(0.0, -1.0)).bloch_matrix(&bm.basis)
    };
    let mut jd = 0.0f64;
    let mut nd = 0.0f64;
    for (kk, &pk) in perm.iter().enumerate() {
        for (a, b) in unr[pk].jumps.iter().zip(&unr[kk].jumps) {
            jd = jd.max((&t_inv * jump_rep(a) * &t - jump_rep(b)).norm());
        }
        nd = nd.max((&t_inv * no_jump_rep(&unr[pk].h_eff) * &t - no_jump_rep(&unr[kk].h_eff)).norm());
    }
    let tol = 1e-8 * (1.0 + bm.scale());
    Ok(WignerSchemeReport {
        jump_distance: jd,
        no_jump_distance: nd,
        passes: jd <= tol && nd <= tol,
    })
}
