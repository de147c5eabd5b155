//! Master equations, their Bloch-space form and unravelling transformations.

use log::warn;
use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    c, fro, min_eigenvalue, CMat, CVec, CoherenceVector, OperatorBasis, RMat, RVec, Superoperator,
    C64, I,
};
use crate::error::{Error, Result};

/// `ρ̇ = −i[H_eff ρ − ρ H_eff†] + Σ c_l ρ c_l†` with `H_eff = H − (i/2)Σ c_l†c_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterEquation {
    dim: usize,
    hamiltonian: CMat,
    lindblads: Vec<CMat>,
}

impl MasterEquation {
    /// Validates and normalizes the operators. Lindblad operators with a trace
    /// are shifted to be traceless and the Hamiltonian is corrected so that the
    /// generator is unchanged.
    pub fn new(hamiltonian: CMat, lindblads: Vec<CMat>) -> Result<Self> {
        let dim = hamiltonian.nrows();
        if dim < 2 {
            return Err(Error::InvalidDimension(dim));
        }
        if hamiltonian.ncols() != dim {
            return Err(Error::Shape {
                expected: dim,
                found: hamiltonian.ncols(),
            });
        }
        if hamiltonian.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite);
        }
        let herm_dev = (&hamiltonian - hamiltonian.adjoint()).norm();
        if herm_dev > 1e-12 * (1.0 + hamiltonian.norm()) {
            return Err(Error::NonHermitian(herm_dev));
        }
        let mut h = (&hamiltonian + hamiltonian.adjoint()) * c(0.5, 0.0);
        let mut cs = Vec::with_capacity(lindblads.len());
        for (l, op) in lindblads.into_iter().enumerate() {
            if op.nrows() != dim || op.ncols() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    found: op.nrows(),
                });
            }
            let shift = op.trace() / c(dim as f64, 0.0);
            if shift.norm() > 1e-14 {
                warn!("lindblad operator {l} has a trace; shifting to traceless form");
                // c → c + β with β = −shift, compensated in H
                let beta = -shift;
                let shifted = &op + CMat::identity(dim, dim) * beta;
                h -= (&shifted * beta.conj() - shifted.adjoint() * beta) * (I * 0.5);
                cs.push(shifted);
            } else {
                cs.push(op);
            }
        }
        if cs.len() > dim * dim - 1 {
            return Err(Error::DependentLindblads(cs.len()));
        }
        if !cs.is_empty() {
            let stacked = CMat::from_columns(
                &cs.iter()
                    .map(|m| CVec::from_column_slice(m.as_slice()))
                    .collect::<Vec<_>>(),
            );
            let sv = SVD::new(stacked, false, false).singular_values;
            let smax = sv.max();
            if sv.iter().any(|s| *s <= 1e-10 * smax.max(1e-300)) {
                return Err(Error::DependentLindblads(cs.len()));
            }
        }
        let h = (&h + h.adjoint()) * c(0.5, 0.0);
        Ok(Self {
            dim,
            hamiltonian: h,
            lindblads: cs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hamiltonian(&self) -> &CMat {
        &self.hamiltonian
    }

    pub fn lindblads(&self) -> &[CMat] {
        &self.lindblads
    }

    pub fn n_channels(&self) -> usize {
        self.lindblads.len()
    }

    /// `H − (i/2)Σ c_l†c_l`.
    pub fn h_eff(&self) -> CMat {
        h_eff_of(&self.hamiltonian, &self.lindblads)
    }

    pub fn lindbladian(&self) -> Superoperator {
        lindbladian(self)
    }

    /// Largest `Tr[c_l†c_l ρ]`, the natural scale of a weak local oscillator.
    pub fn max_channel_rate(&self, rho: &CMat) -> f64 {
        self.lindblads
            .iter()
            .map(|op| (op.adjoint() * op * rho).trace().re)
            .fold(0.0, f64::max)
    }
}

fn h_eff_of(h: &CMat, cs: &[CMat]) -> CMat {
    let mut out = h.clone();
    for op in cs {
        out -= op.adjoint() * op * (I * 0.5);
    }
    out
}

/// Superoperator generated by a Hamiltonian and jump operators.
pub fn generator(h: &CMat, cs: &[CMat]) -> Superoperator {
    let dim = h.nrows();
    let heff = h_eff_of(h, cs);
    let heff_dag = heff.adjoint();
    Superoperator::from_fn(dim, |rho| {
        let mut out = (&heff * rho - rho * &heff_dag) * (-I);
        for op in cs {
            out += op * rho * op.adjoint();
        }
        out
    })
}

pub fn lindbladian(me: &MasterEquation) -> Superoperator {
    generator(&me.hamiltonian, &me.lindblads)
}

/// `ẋ = L₀x + b` in the traceless basis, with the unique steady state.
#[derive(Debug, Clone)]
pub struct BlochModel {
    pub l0: RMat,
    pub b: RVec,
    pub x_ss: CoherenceVector,
    pub basis: OperatorBasis,
}

impl BlochModel {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n(&self) -> usize {
        self.l0.nrows()
    }

    pub fn scale(&self) -> f64 {
        fro(&self.l0)
    }

    pub fn pure_radius_sq(&self) -> f64 {
        self.basis.pure_radius_sq()
    }

    pub fn rho_ss(&self) -> CMat {
        self.basis.bloch_to_rho(&self.x_ss).expect("x_ss has the basis length")
    }

    /// `L₀x + b`.
    pub fn drift(&self, x: &RVec) -> RVec {
        &self.l0 * x + &self.b
    }
}

/// Bloch form `(L₀, b, x_ss)` of a master equation.
pub fn vectorize(me: &MasterEquation, basis: &OperatorBasis) -> Result<BlochModel> {
    if basis.dim() != me.dim() {
        return Err(Error::Shape {
            expected: me.dim(),
            found: basis.dim(),
        });
    }
    let (l0, b) = lindbladian(me).affine_bloch(basis);
    let scale = fro(&l0);
    if scale == 0.0 {
        return Err(Error::NoUniqueSteadyState("L0 vanishes".into()));
    }
    let sv = SVD::new(l0.clone(), false, false).singular_values;
    if sv.min() <= 1e-12 * scale {
        return Err(Error::NoUniqueSteadyState(format!(
            "smallest singular value {:e}",
            sv.min()
        )));
    }
    let lu = l0.clone().lu();
    let x_ss = lu
        .solve(&(-&b))
        .ok_or_else(|| Error::NoUniqueSteadyState("singular L0".into()))?;
    let eigs = l0.clone().complex_eigenvalues();
    if let Some(bad) = eigs.iter().find(|z| z.re >= -1e-12 * scale) {
        return Err(Error::NoUniqueSteadyState(format!("eigenvalue {bad} does not decay")));
    }
    let rho = basis.bloch_to_rho(&x_ss)?;
    let min_eig = min_eigenvalue(&rho);
    if min_eig <= 1e-12 {
        return Err(Error::RankDeficientSteadyState(min_eig));
    }
    Ok(BlochModel {
        l0,
        b,
        x_ss: x_ss.into(),
        basis: basis.clone(),
    })
}

/// Measurement setting: semi-unitary mixing `S` (M×L) and local-oscillator
/// amplitudes `β` (length M).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnravellingSetting {
    s: CMat,
    beta: CVec,
}

impl UnravellingSetting {
    pub fn new(s: CMat, beta: CVec) -> Result<Self> {
        let (m, l) = s.shape();
        if m < l {
            return Err(Error::InvalidSetting(format!("M = {m} < L = {l}")));
        }
        if beta.len() != m {
            return Err(Error::InvalidSetting(format!(
                "beta has length {}, expected {m}",
                beta.len()
            )));
        }
        let dev = (s.adjoint() * &s - CMat::identity(l, l)).norm();
        if dev > 1e-10 {
            return Err(Error::InvalidSetting(format!(
                "S is not semi-unitary (deviation {dev:e})"
            )));
        }
        Ok(Self { s, beta })
    }

    pub(crate) fn new_unchecked(s: CMat, beta: CVec) -> Self {
        Self { s, beta }
    }

    /// `S = 1`, `β = 0` for `l` channels.
    pub fn identity(l: usize) -> Self {
        Self {
            s: CMat::identity(l, l),
            beta: CVec::zeros(l),
        }
    }

    /// `S` embeds the `l` channels into the first rows of `m` detectors.
    pub fn with_beta(l: usize, beta: CVec) -> Result<Self> {
        let m = beta.len();
        let mut s = CMat::zeros(m, l);
        for i in 0..l.min(m) {
            s[(i, i)] = c(1.0, 0.0);
        }
        Self::new(s, beta)
    }

    pub fn s(&self) -> &CMat {
        &self.s
    }

    pub fn beta(&self) -> &CVec {
        &self.beta
    }

    pub fn n_detectors(&self) -> usize {
        self.beta.len()
    }
}

/// Jump and no-jump operators of one unravelling.
#[derive(Debug, Clone)]
pub struct Unravelling {
    pub jumps: Vec<CMat>,
    pub hamiltonian: CMat,
    pub h_eff: CMat,
}

impl Unravelling {
    /// Generator rebuilt from this unravelling; equals the original ℒ.
    pub fn lindbladian(&self) -> Superoperator {
        generator(&self.hamiltonian, &self.jumps)
    }
}

/// `c′ₘ = Σ Sₘₗ c_l + βₘ`, `H′ = H − (i/2)Σ(βₘ*c′ₘ − βₘc′ₘ†)`,
/// `H′_eff = H′ − (i/2)Σ c′ₘ†c′ₘ`.
pub fn apply_unravelling(me: &MasterEquation, u: &UnravellingSetting) -> Result<Unravelling> {
    let l = me.n_channels();
    if u.s.ncols() != l {
        return Err(Error::InvalidSetting(format!(
            "S has {} columns but the master equation has {l} channels",
            u.s.ncols()
        )));
    }
    let d = me.dim();
    let id = CMat::identity(d, d);
    let jumps: Vec<CMat> = (0..u.n_detectors())
        .map(|m| {
            let mut op = &id * u.beta[m];
            for (li, cl) in me.lindblads.iter().enumerate() {
                op += cl * u.s[(m, li)];
            }
            op
        })
        .collect();
    let mut h = me.hamiltonian.clone();
    for (m, op) in jumps.iter().enumerate() {
        let b: C64 = u.beta[m];
        h -= (op * b.conj() - op.adjoint() * b) * (I * 0.5);
    }
    let h_eff = h_eff_of(&h, &jumps);
    Ok(Unravelling {
        jumps,
        hamiltonian: h,
        h_eff,
    })
}

/// No-jump generator `H′_eff` for one setting.
pub fn no_jump_generator(me: &MasterEquation, u: &UnravellingSetting) -> Result<CMat> {
    Ok(apply_unravelling(me, u)?.h_eff)
}
