use std::io::Write;
use std::time::Instant;

use super::SolverMode;
use crate::error::Result;

/// One SQP iteration. Times are in seconds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub step_norm: f64,
    /// Largest mean-dynamics defect at the linearization point.
    pub dyn_residual: f64,
    pub qp_iterations: usize,
    pub cost: f64,
    pub integrator: f64,
    pub gp_eval: f64,
    pub prop_tight: f64,
    pub qp_solve: f64,
    pub interface: f64,
    pub total: f64,
}

impl IterationRecord {
    pub fn category_sum(&self) -> f64 {
        self.integrator + self.gp_eval + self.prop_tight + self.qp_solve + self.interface
    }
}

#[derive(Clone, Debug)]
pub struct SolverStats {
    pub mode: SolverMode,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
    pub total_seconds: f64,
}

impl SolverStats {
    pub(crate) fn new(mode: SolverMode) -> Self {
        Self {
            mode,
            converged: false,
            records: Vec::new(),
            total_seconds: 0.0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    pub fn step_norms(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.step_norm).collect()
    }

    /// Category totals `(integrator, gp_eval, prop_tight, qp_solve, interface)`.
    pub fn totals(&self) -> [f64; 5] {
        let mut t = [0.0; 5];
        for r in &self.records {
            t[0] += r.integrator;
            t[1] += r.gp_eval;
            t[2] += r.prop_tight;
            t[3] += r.qp_solve;
            t[4] += r.interface;
        }
        t
    }

    pub fn mean_iteration_seconds(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.total).sum::<f64>() / self.records.len() as f64
    }

    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "iteration",
            "step_norm",
            "dyn_residual",
            "qp_iterations",
            "cost",
            "integrator",
            "gp_eval",
            "prop_tight",
            "qp_solve",
            "interface",
            "total",
        ])?;
        for r in &self.records {
            out.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.step_norm),
                format!("{:e}", r.dyn_residual),
                r.qp_iterations.to_string(),
                format!("{:e}", r.cost),
                format!("{:e}", r.integrator),
                format!("{:e}", r.gp_eval),
                format!("{:e}", r.prop_tight),
                format!("{:e}", r.qp_solve),
                format!("{:e}", r.interface),
                format!("{:e}", r.total),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Lap timer that reports zero when disabled.
pub(crate) struct Lap {
    on: bool,
    last: Instant,
}

impl Lap {
    pub(crate) fn new(on: bool) -> Self {
        Self { on, last: Instant::now() }
    }

    pub(crate) fn lap(&mut self) -> f64 {
        let now = Instant::now();
        let dt = (now - self.last).as_secs_f64();
        self.last = now;
        if self.on {
            dt
        } else {
            0.0
        }
    }
}
