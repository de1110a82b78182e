use nalgebra::{DMatrix, DVector};

use super::spec::{GpStage, OcpSpec};
use crate::dynamics::Sensitivities;
use crate::error::Result;
use crate::uncertainty::{tighten, StageLinearization, TightenedConstraint};

/// Linearization of the mean dynamics at one stage.
#[derive(Clone, Debug)]
pub struct StageData {
    /// `ψ(x, u) + B μ^d(x, u)`.
    pub next: DVector<f64>,
    /// `∂ψ/∂x + B ∂μ^d/∂x`.
    pub a_tilde: DMatrix<f64>,
    /// `∂ψ/∂u + B ∂μ^d/∂u`.
    pub b_tilde: DMatrix<f64>,
    /// Diagonal of `Σ^d(x, u)`.
    pub gp_var: DVector<f64>,
    /// Chance constraints tightened at the covariance passed to
    /// [`linearize_stage`]; empty at stage 0.
    pub constraints: Vec<TightenedConstraint>,
}

impl StageData {
    pub(crate) fn combine(spec: &OcpSpec, sens: Sensitivities, gp: GpStage) -> Self {
        let b = &spec.b_mat;
        Self {
            next: sens.next + b * &gp.mean,
            a_tilde: sens.dx + b * &gp.dmean_dx,
            b_tilde: sens.du + b * &gp.dmean_du,
            gp_var: gp.var,
            constraints: Vec::new(),
        }
    }

    pub fn covariance(&self, spec: &OcpSpec) -> StageLinearization {
        StageLinearization {
            a_tilde: self.a_tilde.clone(),
            b_mat: spec.b_mat.clone(),
            gp_cov: self.gp_var.clone(),
            w_cov: spec.w_cov.clone(),
        }
    }
}

/// Dynamics linearization of stage `k` at `(x, u)`, with the chance
/// constraints tightened at `sigma`.
pub fn linearize_stage(
    spec: &OcpSpec,
    k: usize,
    x: &DVector<f64>,
    u: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> Result<StageData> {
    let sens = spec.dynamics.sensitivities(x, u)?;
    let gp = spec.gp_eval(x, u, true)?;
    let mut data = StageData::combine(spec, sens, gp);
    if k > 0 {
        data.constraints = tightened_rows(spec, &spec.alphas()?, x, u, sigma, false);
    }
    Ok(data)
}

pub(crate) fn covariance_stage(spec: &OcpSpec, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageLinearization> {
    let sens = spec.dynamics.sensitivities(x, u)?;
    let gp = spec.gp_eval(x, u, true)?;
    Ok(StageData::combine(spec, sens, gp).covariance(spec))
}

/// Chance constraints at `(x, u)` with backoffs from `sigma`. For the
/// terminal stage the input part of each gradient is dropped.
pub(crate) fn tightened_rows(
    spec: &OcpSpec,
    alphas: &[f64],
    x: &DVector<f64>,
    u: &DVector<f64>,
    sigma: &DMatrix<f64>,
    terminal: bool,
) -> Vec<TightenedConstraint> {
    let nx = spec.n_x();
    spec.constraints
        .iter()
        .zip(alphas)
        .map(|(c, &alpha)| {
            let mut row = c.h.gradient(x, u);
            if terminal {
                row.rows_mut(nx, row.len() - nx).fill(0.0);
            }
            tighten(c.h.value(x, u), &row, sigma, c.prob, alpha)
        })
        .collect()
}
