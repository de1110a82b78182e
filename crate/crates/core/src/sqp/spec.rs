use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DiscreteDynamics;
use crate::error::{invalid, Result};
use crate::gp::MultiGpModel;
use crate::linalg::min_eigenvalue;
use crate::uncertainty::{tightening_factor, TighteningMode};

/// Selects GP inputs from the stacked vector `[x; u]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub indices: Vec<usize>,
}

impl FeatureMap {
    /// All of `x` followed by all of `u`.
    pub fn full(n_x: usize, n_u: usize) -> Self {
        Self {
            indices: (0..n_x + n_u).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.indices.len()
    }

    pub fn apply(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n_x = x.len();
        DVector::from_iterator(
            self.indices.len(),
            self.indices.iter().map(|&i| if i < n_x { x[i] } else { u[i - n_x] }),
        )
    }

    /// Chains `∂g/∂z` (rows × n_z) to `(∂g/∂x, ∂g/∂u)`.
    pub fn pullback(&self, dz: &DMatrix<f64>, n_x: usize, n_u: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut dx = DMatrix::zeros(dz.nrows(), n_x);
        let mut du = DMatrix::zeros(dz.nrows(), n_u);
        for (col, &i) in self.indices.iter().enumerate() {
            if i < n_x {
                let mut c = dx.column_mut(i);
                c += dz.column(col);
            } else {
                let mut c = du.column_mut(i - n_x);
                c += dz.column(col);
            }
        }
        (dx, du)
    }
}

/// Scalar stage constraint `h(x, u) ≤ 0`.
pub trait ConstraintFn: Send + Sync + Debug {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    /// `∂h/∂(x, u)`, length `n_x + n_u`.
    fn gradient(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
}

/// `h(x, u) = c_xᵀ x + c_uᵀ u + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub c_x: DVector<f64>,
    pub c_u: DVector<f64>,
    pub offset: f64,
}

impl ConstraintFn for LinearConstraint {
    fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.c_x.dot(x) + self.c_u.dot(u) + self.offset
    }

    fn gradient(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.c_x.len() + self.c_u.len());
        g.rows_mut(0, self.c_x.len()).copy_from(&self.c_x);
        g.rows_mut(self.c_x.len(), self.c_u.len()).copy_from(&self.c_u);
        g
    }
}

/// A chance constraint `P(h(x, u) ≤ 0) ≥ prob`, enforced on stages `1 … N`.
/// At the terminal stage only the state part of `h` is used.
#[derive(Clone, Debug)]
pub struct ChanceConstraint {
    pub h: Arc<dyn ConstraintFn>,
    pub prob: f64,
    pub mode: TighteningMode,
}

impl ChanceConstraint {
    pub fn alpha(&self) -> Result<f64> {
        tightening_factor(self.prob, self.mode)
    }
}

/// Quadratic tracking cost on the means.
#[derive(Clone, Debug)]
pub struct TrackingCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_n: DMatrix<f64>,
    pub x_ref: DVector<f64>,
    pub u_ref: DVector<f64>,
}

impl TrackingCost {
    pub fn stage(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        let du = u - &self.u_ref;
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du))
    }

    pub fn terminal(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.x_ref;
        0.5 * dx.dot(&(&self.q_n * &dx))
    }
}

/// Box bounds on the inputs, never tightened.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Deterministic surrogate of the stochastic OCP.
#[derive(Clone, Debug)]
pub struct OcpSpec {
    pub horizon: usize,
    pub dynamics: Arc<dyn DiscreteDynamics>,
    /// `None` means no residual model: zero mean and zero variance.
    pub gp: Option<Arc<MultiGpModel>>,
    pub features: FeatureMap,
    /// `B`, n_x × n_w.
    pub b_mat: DMatrix<f64>,
    /// Diagonal of `Σ^w`.
    pub w_cov: DVector<f64>,
    pub cost: TrackingCost,
    pub constraints: Vec<ChanceConstraint>,
    pub input_bounds: Option<InputBounds>,
    pub x_current: DVector<f64>,
}

impl OcpSpec {
    pub fn n_x(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn n_u(&self) -> usize {
        self.dynamics.input_dim()
    }

    pub fn n_w(&self) -> usize {
        self.b_mat.ncols()
    }

    pub fn gp_data_size(&self) -> usize {
        self.gp.as_ref().map_or(0, |g| g.num_data())
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, nw) = (self.n_x(), self.n_u(), self.n_w());
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if self.b_mat.nrows() != nx || self.w_cov.len() != nw || self.x_current.len() != nx {
            return Err(invalid("B, Σ^w or the current state do not match the model dimensions"));
        }
        if self.w_cov.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(invalid("Σ^w must be non-negative"));
        }
        let c = &self.cost;
        if c.q.shape() != (nx, nx)
            || c.q_n.shape() != (nx, nx)
            || c.r.shape() != (nu, nu)
            || c.x_ref.len() != nx
            || c.u_ref.len() != nu
        {
            return Err(invalid("cost weights or references have wrong dimensions"));
        }
        for (name, m) in [("Q", &c.q), ("R", &c.r), ("Q_N", &c.q_n)] {
            if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) || min_eigenvalue(m) < -1e-12 {
                return Err(invalid(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        if let Some(gp) = &self.gp {
            if gp.output_dim() != nw || gp.input_dim() != self.features.dim() {
                return Err(invalid("GP dimensions do not match B or the feature map"));
            }
        }
        if self.features.indices.iter().any(|&i| i >= nx + nu) {
            return Err(invalid("feature index out of range"));
        }
        for cc in &self.constraints {
            if !(cc.prob > 0.0 && cc.prob <= 1.0) {
                return Err(invalid(format!("constraint probability {} outside (0, 1]", cc.prob)));
            }
        }
        if let Some(b) = &self.input_bounds {
            if b.lower.len() != nu || b.upper.len() != nu || b.lower.iter().zip(b.upper.iter()).any(|(l, u)| l > u) {
                return Err(invalid("input bounds are inconsistent"));
            }
        }
        Ok(())
    }

    /// Tightening factor of each constraint; `p = 1` gives 0 (hard constraint).
    pub fn alphas(&self) -> Result<Vec<f64>> {
        self.constraints
            .iter()
            .map(|c| if c.prob >= 1.0 { Ok(0.0) } else { c.alpha() })
            .collect()
    }

    /// Tracking cost of a mean/input trajectory.
    pub fn cost_of(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let n = self.horizon;
        (0..n).map(|k| self.cost.stage(&x[k], &u[k])).sum::<f64>() + self.cost.terminal(&x[n])
    }

    /// GP mean, variance and mean Jacobians `(∂μ/∂x, ∂μ/∂u)` at one stage.
    pub fn gp_eval(&self, x: &DVector<f64>, u: &DVector<f64>, with_jacobian: bool) -> Result<GpStage> {
        let (nx, nu, nw) = (self.n_x(), self.n_u(), self.n_w());
        let Some(gp) = &self.gp else {
            return Ok(GpStage {
                mean: DVector::zeros(nw),
                var: DVector::zeros(nw),
                dmean_dx: DMatrix::zeros(nw, nx),
                dmean_du: DMatrix::zeros(nw, nu),
            });
        };
        let z = self.features.apply(x, u);
        let pred = gp.predict(&z, with_jacobian && gp.num_data() > 0)?;
        let (dmean_dx, dmean_du) = match &pred.mean_jacobian {
            Some(j) => self.features.pullback(j, nx, nu),
            None => (DMatrix::zeros(nw, nx), DMatrix::zeros(nw, nu)),
        };
        Ok(GpStage {
            mean: pred.mean,
            var: pred.variance,
            dmean_dx,
            dmean_du,
        })
    }

    /// Mean dynamics `ψ(x, u) + B μ^d(x, u)`.
    pub fn mean_step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let next = self.dynamics.step(x, u)?;
        let gp = self.gp_eval(x, u, false)?;
        Ok(next + &self.b_mat * gp.mean)
    }

    /// Mean trajectory from `x_current` under `u`.
    pub fn rollout(&self, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let mut x = Vec::with_capacity(u.len() + 1);
        x.push(self.x_current.clone());
        for (k, uk) in u.iter().enumerate() {
            let next = self.mean_step(&x[k], uk)?;
            x.push(next);
        }
        Ok(x)
    }
}

/// GP quantities at one stage.
#[derive(Clone, Debug)]
pub struct GpStage {
    pub mean: DVector<f64>,
    pub var: DVector<f64>,
    pub dmean_dx: DMatrix<f64>,
    pub dmean_du: DMatrix<f64>,
}
