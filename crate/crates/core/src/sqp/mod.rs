//! SQP drivers for the GP-MPC problem.
//!
//! The decision variables are the mean trajectory `y = (μ_0, u_0, …, μ_N)`
//! and the covariances `P = (Σ_0, …, Σ_N)`. [`solve_zero_order`] propagates
//! `P` outside the QP and solves a QP of nominal size in `Δy` only.
//! [`solve_naive`] keeps `P` as variables and solves the exact-Jacobian SQP.

mod diagnostics;
mod linearize;
mod naive;
mod spec;
mod stats;
mod zero_order;

pub use diagnostics::{
    check_feasibility, jacobian_error_blocks, jacobian_error_norm, measure_contraction, Contraction, FeasibilityReport,
};
pub use linearize::{linearize_stage, StageData};
pub use naive::{naive_iteration, solve_naive};
pub use spec::{
    ChanceConstraint, ConstraintFn, FeatureMap, GpStage, InputBounds, LinearConstraint, OcpSpec, TrackingCost,
};
pub use stats::{IterationRecord, SolverStats};
pub use zero_order::{solve_nominal, solve_with_fixed_covariance, solve_zero_order, zero_order_iteration};

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DVector;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::qp::QpSettings;
use crate::uncertainty::{propagate_covariances, CovarianceTrajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SolverMode {
    /// No covariance propagation and no backoff.
    Nominal,
    ZeroOrder,
    Naive,
}

impl SolverMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Nominal => "nominal",
            Self::ZeroOrder => "zero_order",
            Self::Naive => "naive",
        }
    }
}

impl FromStr for SolverMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nominal" => Ok(Self::Nominal),
            "zero_order" | "zo" => Ok(Self::ZeroOrder),
            "naive" => Ok(Self::Naive),
            other => Err(invalid(format!("unknown solver mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SolverMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop when `‖Δy‖∞` falls below this.
    pub tol_step: f64,
    pub mode: SolverMode,
    pub qp: QpSettings,
    /// Record per-category timings.
    pub timing: bool,
    /// Threads for the stage-wise maps; 0 uses the global pool.
    pub workers: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol_step: 1e-8,
            mode: SolverMode::ZeroOrder,
            qp: QpSettings::default(),
            timing: true,
            workers: 0,
        }
    }
}

impl SolverOptions {
    pub fn with_mode(mode: SolverMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_step > 0.0) || !(self.qp.tol > 0.0) {
            return Err(invalid("solver tolerances must be positive"));
        }
        Ok(())
    }
}

/// Primal-dual SQP state.
#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    /// Means `μ_0 … μ_N`.
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    pub p: CovarianceTrajectory,
    /// Multipliers of the mean dynamics.
    pub pi: Vec<DVector<f64>>,
    /// Multipliers of the QP inequalities, per stage.
    pub lam: Vec<DVector<f64>>,
    pub step_norm: f64,
    pub iteration: usize,
}

impl Iterate {
    /// Roll-in of the mean dynamics from `x_current` under `u`, with the
    /// covariances propagated along it.
    pub fn from_inputs(spec: &OcpSpec, u: Vec<DVector<f64>>) -> Result<Self> {
        if u.len() != spec.horizon || u.iter().any(|v| v.len() != spec.n_u()) {
            return Err(invalid("input guess does not match the horizon or input dimension"));
        }
        let x = spec.rollout(&u)?;
        let stages = (0..spec.horizon)
            .map(|k| linearize::covariance_stage(spec, &x[k], &u[k]))
            .collect::<Result<Vec<_>>>()?;
        let n = spec.n_x();
        let p = propagate_covariances(&stages, &nalgebra::DMatrix::zeros(n, n))?;
        Ok(Self {
            x,
            u,
            p,
            pi: vec![DVector::zeros(n); spec.horizon],
            lam: vec![DVector::zeros(0); spec.horizon + 1],
            step_norm: f64::INFINITY,
            iteration: 0,
        })
    }

    /// Zero-input roll-in.
    pub fn initial(spec: &OcpSpec) -> Result<Self> {
        Self::from_inputs(spec, vec![DVector::zeros(spec.n_u()); spec.horizon])
    }

    /// Warm start for the next sampling instant: inputs shifted by one stage,
    /// last input repeated, then rolled out from the spec's current state.
    pub fn shifted(&self, spec: &OcpSpec) -> Result<Self> {
        let mut u: Vec<DVector<f64>> = self.u.iter().skip(1).cloned().collect();
        let last = self.u.last().cloned().unwrap_or_else(|| DVector::zeros(spec.n_u()));
        while u.len() < spec.horizon {
            u.push(last.clone());
        }
        u.truncate(spec.horizon);
        Self::from_inputs(spec, u)
    }

    pub fn cost(&self, spec: &OcpSpec) -> f64 {
        spec.cost_of(&self.x, &self.u)
    }

    fn check(&self, spec: &OcpSpec) -> Result<()> {
        let n = spec.horizon;
        if self.x.len() != n + 1 || self.u.len() != n || self.p.sigmas.len() != n + 1 {
            return Err(invalid("iterate does not match the horizon"));
        }
        if self.x.iter().any(|v| v.len() != spec.n_x()) || self.u.iter().any(|v| v.len() != spec.n_u()) {
            return Err(invalid("iterate does not match the model dimensions"));
        }
        if self.x.iter().chain(&self.u).any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(invalid("iterate has non-finite entries"));
        }
        Ok(())
    }
}

/// Runs `f` on a pool of `workers` threads (cached), or inline for 0.
pub(crate) fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    if workers == 0 {
        return f();
    }
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<rayon::ThreadPool>>>> = OnceLock::new();
    let pool = {
        let mut pools = POOLS.get_or_init(|| Mutex::new(HashMap::new())).lock().unwrap_or_else(|e| e.into_inner());
        pools
            .entry(workers)
            .or_insert_with(|| {
                Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(workers)
                        .build()
                        .expect("thread pool construction"),
                )
            })
            .clone()
    };
    pool.install(f)
}

/// Maps `f` over `items` on `workers` threads, or in order when only one
/// thread is available.
pub(crate) fn par_map<I: Send, T: Send>(
    workers: usize,
    items: Vec<I>,
    f: impl Fn(usize, I) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let threads = if workers == 0 { rayon::current_num_threads() } else { workers };
    if threads <= 1 || items.len() <= 1 {
        return items.into_iter().enumerate().map(|(k, i)| f(k, i)).collect();
    }
    with_workers(workers, || items.into_par_iter().enumerate().map(|(k, i)| f(k, i)).collect())
}

/// Dispatches on `opts.mode`.
pub fn solve(spec: &OcpSpec, init: &Iterate, opts: &SolverOptions) -> Result<(Iterate, SolverStats)> {
    match opts.mode {
        SolverMode::Nominal => solve_nominal(spec, init, opts),
        SolverMode::ZeroOrder => solve_zero_order(spec, init, opts),
        SolverMode::Naive => solve_naive(spec, init, opts),
    }
}
