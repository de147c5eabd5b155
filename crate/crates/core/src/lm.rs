//! Levenberg–Marquardt for small dense residual systems.

use nalgebra::Cholesky;

use crate::algebra::{RMat, RVec};

#[derive(Debug, Clone, Copy)]
pub(crate) struct LmOptions {
    pub max_iter: usize,
    /// Stop once `‖r‖` drops below this.
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LmOutcome {
    pub x: RVec,
    pub residual: f64,
    pub iterations: usize,
}

/// Minimizes `½‖r(x)‖²`; `f` returns the residual and its Jacobian.
pub(crate) fn minimize<F>(f: F, x0: RVec, opts: LmOptions) -> LmOutcome
where
    F: Fn(&RVec) -> (RVec, RMat),
{
    let mut x = x0;
    let (mut r, mut j) = f(&x);
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let n = x.len();
    let mut it = 0;
    while it < opts.max_iter {
        if !cost.is_finite() || cost.sqrt() <= opts.tol {
            break;
        }
        it += 1;
        let jtj = j.transpose() * &j;
        let g = j.transpose() * &r;
        let diag_scale = jtj.diagonal().map(|d| d.max(1e-12));
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += mu * diag_scale[i];
            }
            let step = match Cholesky::new(a) {
                Some(ch) => ch.solve(&(-&g)),
                None => {
                    mu *= 10.0;
                    continue;
                }
            };
            let trial = &x + &step;
            let (rt, jt) = f(&trial);
            let ct = rt.norm_squared();
            if ct.is_finite() && ct < cost {
                x = trial;
                r = rt;
                j = jt;
                cost = ct;
                mu = (mu / 3.0).max(1e-15);
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    LmOutcome {
        x,
        residual: cost.sqrt(),
        iterations: it,
    }
}

/// Forward-difference Jacobian, for the handful of small auxiliary problems
/// without an analytic one.
pub(crate) fn numeric_jacobian<F>(f: &F, x: &RVec, r0: &RVec) -> RMat
where
    F: Fn(&RVec) -> RVec,
{
    let mut jac = RMat::zeros(r0.len(), x.len());
    for i in 0..x.len() {
        let h = 1e-7 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += h;
        let rp = f(&xp);
        jac.set_column(i, &((rp - r0) / h));
    }
    jac
}
