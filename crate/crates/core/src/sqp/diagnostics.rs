use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linearize::{covariance_stage, tightened_rows};
use super::spec::OcpSpec;
use super::Iterate;
use crate::error::{invalid, Result};
use crate::linalg::{inf_norm, vec_of};

/// Largest violation of each constraint group at an iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FeasibilityReport {
    /// Mean dynamics, including `μ_0 = x_current`.
    pub dynamics: f64,
    /// Covariance recursion, including `Σ_0 = 0`.
    pub covariance: f64,
    /// Tightened chance constraints and input bounds, positive part.
    pub inequality: f64,
}

impl FeasibilityReport {
    pub fn max(&self) -> f64 {
        self.dynamics.max(self.covariance).max(self.inequality)
    }
}

pub fn check_feasibility(spec: &OcpSpec, it: &Iterate) -> Result<FeasibilityReport> {
    spec.validate()?;
    it.check(spec)?;
    let n = spec.horizon;
    let mut rep = FeasibilityReport {
        dynamics: inf_norm(&(&it.x[0] - &spec.x_current)),
        covariance: it.p.sigmas[0].amax(),
        inequality: 0.0,
    };
    for k in 0..n {
        let next = spec.mean_step(&it.x[k], &it.u[k])?;
        rep.dynamics = rep.dynamics.max(inf_norm(&(next - &it.x[k + 1])));
        let st = covariance_stage(spec, &it.x[k], &it.u[k])?;
        let pred = &st.a_tilde * &it.p.sigmas[k] * st.a_tilde.transpose() + st.noise_term();
        rep.covariance = rep.covariance.max((pred - &it.p.sigmas[k + 1]).amax());
        if let Some(b) = &spec.input_bounds {
            for i in 0..spec.n_u() {
                let v = (it.u[k][i] - b.upper[i]).max(b.lower[i] - it.u[k][i]);
                rep.inequality = rep.inequality.max(v);
            }
        }
    }
    let alphas = spec.alphas()?;
    for k in 1..=n {
        let u = if k < n { it.u[k].clone() } else { DVector::zeros(spec.n_u()) };
        for t in tightened_rows(spec, &alphas, &it.x[k], &u, &it.p.sigmas[k], k == n) {
            rep.inequality = rep.inequality.max(t.tightened_value());
        }
    }
    Ok(rep)
}

/// Empirical contraction of a step-norm sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Contraction {
    /// `d_{k+1} / d_k` with `d_k = Σ_{j≥k} s_j`, skipping `d_k = 0`.
    pub ratios: Vec<f64>,
    /// Largest of the last five ratios.
    pub kappa: f64,
}

/// Estimates the linear rate from SQP step norms. The tail sums `d_k`
/// bound the distance of iterate `k` to the limit.
pub fn measure_contraction(step_norms: &[f64]) -> Result<Contraction> {
    if step_norms.len() < 3 {
        return Err(invalid("at least three step norms are needed to estimate a contraction rate"));
    }
    if step_norms.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(invalid("step norms must be finite and non-negative"));
    }
    let mut tails = vec![0.0; step_norms.len() + 1];
    for k in (0..step_norms.len()).rev() {
        tails[k] = tails[k + 1] + step_norms[k];
    }
    // The last tail is the final step alone; its successor is zero by construction.
    let tails = &tails[..step_norms.len()];
    let ratios: Vec<f64> = tails
        .windows(2)
        .filter(|w| w[0] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return Ok(Contraction { ratios, kappa: 0.0 });
    }
    let tail = &ratios[ratios.len().saturating_sub(5)..];
    let kappa = tail.iter().cloned().fold(0.0, f64::max);
    Ok(Contraction { ratios, kappa })
}

/// `svec`-free stage map `(x, u) ↦ vec(Ã Σ Ãᵀ + B(Σ^d + Σ^w)Bᵀ)`.
fn stage_map(spec: &OcpSpec, x: &DVector<f64>, u: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<DVector<f64>> {
    let st = covariance_stage(spec, x, u)?;
    Ok(vec_of(&(&st.a_tilde * sigma * st.a_tilde.transpose() + st.noise_term())))
}

/// Per-stage blocks `J_k = ∂/∂(x_k, u_k) vec(Ã_k Σ_k Ã_kᵀ + B Σ^d_k Bᵀ)` by
/// central differences. The Jacobian of the covariance equations with
/// respect to the means is block diagonal with blocks `-J_k`.
pub fn jacobian_error_blocks(spec: &OcpSpec, it: &Iterate) -> Result<Vec<DMatrix<f64>>> {
    it.check(spec)?;
    let (nx, nu) = (spec.n_x(), spec.n_u());
    (0..spec.horizon)
        .map(|k| {
            let sigma = &it.p.sigmas[k];
            let mut j = DMatrix::zeros(nx * nx, nx + nu);
            for l in 0..nx + nu {
                let (mut xp, mut up) = (it.x[k].clone(), it.u[k].clone());
                let (mut xm, mut um) = (it.x[k].clone(), it.u[k].clone());
                let base = if l < nx { it.x[k][l] } else { it.u[k][l - nx] };
                let h = 1e-6 * base.abs().max(1.0);
                if l < nx {
                    xp[l] += h;
                    xm[l] -= h;
                } else {
                    up[l - nx] += h;
                    um[l - nx] -= h;
                }
                let col = (stage_map(spec, &xp, &up, sigma)? - stage_map(spec, &xm, &um, sigma)?) / (2.0 * h);
                j.column_mut(l).copy_from(&col);
            }
            Ok(j)
        })
        .collect()
}

/// Spectral norm of the neglected Jacobian `∂/∂y (A(y) vec P + b(y))`,
/// by 20 power iterations on `JᵀJ`.
pub fn jacobian_error_norm(spec: &OcpSpec, it: &Iterate) -> Result<f64> {
    let blocks = jacobian_error_blocks(spec, it)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<DVector<f64>> = blocks
        .iter()
        .map(|b| DVector::from_fn(b.ncols(), |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let norm_of = |v: &[DVector<f64>]| v.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..20 {
        let nv = norm_of(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        for b in &mut v {
            *b /= nv;
        }
        let w: Vec<DVector<f64>> = blocks.iter().zip(&v).map(|(j, x)| j.transpose() * (j * x)).collect();
        sigma = v.iter().zip(&w).map(|(a, b)| a.dot(b)).sum::<f64>().max(0.0).sqrt();
        v = w;
    }
    Ok(sigma)
}
