use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::linearize::{tightened_rows, StageData};
use super::spec::OcpSpec;
use super::stats::{IterationRecord, Lap, SolverStats};
use super::{par_map, Iterate, SolverMode, SolverOptions};
use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::inf_norm;
use crate::qp::{solve_ocp_qp, OcpQp, QpSolution, QpStatus, StageQp, TerminalQp};
use crate::uncertainty::{propagate_covariances, CovarianceTrajectory, TightenedConstraint};

/// Where the covariances used for tightening come from.
#[derive(Clone, Copy)]
enum Covariance<'a> {
    /// Propagated along the current linearization.
    Propagate,
    /// No uncertainty: zero backoff.
    Nominal,
    Fixed(&'a CovarianceTrajectory),
}

/// Stage-wise linearization in two timed parallel maps.
pub(crate) fn linearize_all(
    spec: &OcpSpec,
    it: &Iterate,
    workers: usize,
    lap: &mut Lap,
) -> Result<(Vec<StageData>, f64, f64)> {
    let n = spec.horizon;
    let sens = par_map(workers, (0..n).collect(), |k, _| spec.dynamics.sensitivities(&it.x[k], &it.u[k]))?;
    let t_int = lap.lap();
    let data = par_map(workers, sens, |k, s| Ok(StageData::combine(spec, s, spec.gp_eval(&it.x[k], &it.u[k], true)?)))?;
    let t_gp = lap.lap();
    Ok((data, t_int, t_gp))
}

pub(crate) fn input_bound_rows(spec: &OcpSpec, u: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let nu = spec.n_u();
    match &spec.input_bounds {
        None => (DMatrix::zeros(0, nu), DVector::zeros(0)),
        Some(b) => {
            let mut c = DMatrix::zeros(2 * nu, nu);
            let mut d = DVector::zeros(2 * nu);
            for i in 0..nu {
                c[(i, i)] = 1.0;
                d[i] = b.upper[i] - u[i];
                c[(nu + i, i)] = -1.0;
                d[nu + i] = u[i] - b.lower[i];
            }
            (c, d)
        }
    }
}

/// QP in `Δy` with fixed backoffs. `tight[k]` holds the tightened
/// constraints of stage `k` (`k = N` is terminal).
pub(crate) fn build_delta_qp(
    spec: &OcpSpec,
    it: &Iterate,
    data: &[StageData],
    tight: &[Vec<TightenedConstraint>],
) -> OcpQp {
    let (nx, nu, n) = (spec.n_x(), spec.n_u(), spec.horizon);
    let cost = &spec.cost;
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = StageQp::zeros(nx, nu);
        s.h_xx = cost.q.clone();
        s.h_uu = cost.r.clone();
        s.g_x = &cost.q * (&it.x[k] - &cost.x_ref);
        s.g_u = &cost.r * (&it.u[k] - &cost.u_ref);
        s.a = data[k].a_tilde.clone();
        s.b = data[k].b_tilde.clone();
        s.c = &data[k].next - &it.x[k + 1];
        let (cb, db) = input_bound_rows(spec, &it.u[k]);
        let rows = &tight[k];
        let m = rows.len() + db.len();
        s.c_x = DMatrix::zeros(m, nx);
        s.c_u = DMatrix::zeros(m, nu);
        s.d = DVector::zeros(m);
        for (i, t) in rows.iter().enumerate() {
            s.c_x.row_mut(i).copy_from(&t.row.rows(0, nx).transpose());
            s.c_u.row_mut(i).copy_from(&t.row.rows(nx, nu).transpose());
            s.d[i] = -t.tightened_value();
        }
        s.c_u.rows_mut(rows.len(), db.len()).copy_from(&cb);
        s.d.rows_mut(rows.len(), db.len()).copy_from(&db);
        stages.push(s);
    }
    let rows = &tight[n];
    let mut c_x = DMatrix::zeros(rows.len(), nx);
    let mut d = DVector::zeros(rows.len());
    for (i, t) in rows.iter().enumerate() {
        c_x.row_mut(i).copy_from(&t.row.rows(0, nx).transpose());
        d[i] = -t.tightened_value();
    }
    OcpQp {
        x0: DVector::zeros(nx),
        stages,
        terminal: TerminalQp {
            h_xx: cost.q_n.clone(),
            g_x: &cost.q_n * (&it.x[n] - &cost.x_ref),
            c_x,
            d,
        },
    }
}

pub(crate) fn check_qp(sol: QpSolution, qp: OcpQp) -> Result<QpSolution> {
    match sol.status {
        QpStatus::Optimal => Ok(sol),
        QpStatus::Infeasible => Err(Error::QpInfeasible {
            iterations: sol.iterations,
            qp: Box::new(qp),
        }),
        QpStatus::MaxIter => Err(numerical(format!(
            "QP subproblem not solved within {} iterations",
            sol.iterations
        ))),
    }
}

pub(crate) fn dyn_residual(it: &Iterate, data: &[StageData]) -> f64 {
    data.iter()
        .enumerate()
        .map(|(k, d)| inf_norm(&(&d.next - &it.x[k + 1])))
        .fold(0.0, f64::max)
}

fn step(spec: &OcpSpec, it: &Iterate, opts: &SolverOptions, cov: Covariance) -> Result<(Iterate, IterationRecord)> {
    let start = Instant::now();
    let mut lap = Lap::new(opts.timing);
    let n = spec.horizon;
    let (data, t_int, t_gp) = linearize_all(spec, it, opts.workers, &mut lap)?;

    let alphas = spec.alphas()?;
    let nx = spec.n_x();
    let p_new = match cov {
        Covariance::Propagate => {
            let stages: Vec<_> = data.iter().map(|d| d.covariance(spec)).collect();
            propagate_covariances(&stages, &DMatrix::zeros(nx, nx))?
        }
        Covariance::Nominal => CovarianceTrajectory::zeros(nx, n),
        Covariance::Fixed(p) => p.clone(),
    };
    let mut tight = vec![Vec::new(); n + 1];
    for (k, rows) in tight.iter_mut().enumerate().skip(1) {
        let u = if k < n { it.u[k].clone() } else { DVector::zeros(spec.n_u()) };
        *rows = tightened_rows(spec, &alphas, &it.x[k], &u, &p_new.sigmas[k], k == n);
    }
    let t_prop = lap.lap();

    let qp = build_delta_qp(spec, it, &data, &tight);
    let mut t_iface = lap.lap();

    let sol = solve_ocp_qp(&qp, &opts.qp)?;
    let t_qp = lap.lap();
    let sol = check_qp(sol, qp)?;

    let mut next = it.clone();
    let mut norm: f64 = 0.0;
    for k in 0..=n {
        norm = norm.max(inf_norm(&sol.x[k]));
        next.x[k] += &sol.x[k];
    }
    for k in 0..n {
        norm = norm.max(inf_norm(&sol.u[k]));
        next.u[k] += &sol.u[k];
    }
    next.p = p_new;
    next.pi = sol.pi;
    next.lam = sol.lam;
    next.step_norm = norm;
    next.iteration = it.iteration + 1;
    t_iface += lap.lap();

    let record = IterationRecord {
        iteration: next.iteration,
        step_norm: norm,
        dyn_residual: dyn_residual(it, &data),
        qp_iterations: sol.iterations,
        cost: next.cost(spec),
        integrator: t_int,
        gp_eval: t_gp,
        prop_tight: t_prop,
        qp_solve: t_qp,
        interface: t_iface,
        total: if opts.timing { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    Ok((next, record))
}

/// One zero-order iteration: propagate the covariances along the current
/// linearization, tighten there and solve the nominal-size QP.
pub fn zero_order_iteration(spec: &OcpSpec, it: &Iterate, opts: &SolverOptions) -> Result<(Iterate, IterationRecord)> {
    step(spec, it, opts, Covariance::Propagate)
}

fn run(
    spec: &OcpSpec,
    init: &Iterate,
    opts: &SolverOptions,
    mode: SolverMode,
    cov: Covariance,
) -> Result<(Iterate, SolverStats)> {
    spec.validate()?;
    opts.validate()?;
    init.check(spec)?;
    let start = Instant::now();
    let mut stats = SolverStats::new(mode);
    let mut it = init.clone();
    it.iteration = 0;
    for _ in 0..opts.max_iter {
        let (next, rec) = step(spec, &it, opts, cov)?;
        it = next;
        let done = rec.step_norm <= opts.tol_step;
        stats.records.push(rec);
        if done {
            stats.converged = true;
            break;
        }
    }
    stats.total_seconds = start.elapsed().as_secs_f64();
    Ok((it, stats))
}

pub fn solve_zero_order(spec: &OcpSpec, init: &Iterate, opts: &SolverOptions) -> Result<(Iterate, SolverStats)> {
    run(spec, init, opts, SolverMode::ZeroOrder, Covariance::Propagate)
}

/// SQP on the mean problem without backoffs; returned covariances are zero.
pub fn solve_nominal(spec: &OcpSpec, init: &Iterate, opts: &SolverOptions) -> Result<(Iterate, SolverStats)> {
    run(spec, init, opts, SolverMode::Nominal, Covariance::Nominal)
}

/// SQP with backoffs frozen at `p_fixed`; the covariances are never updated.
pub fn solve_with_fixed_covariance(
    spec: &OcpSpec,
    init: &Iterate,
    p_fixed: &CovarianceTrajectory,
    opts: &SolverOptions,
) -> Result<(Iterate, SolverStats)> {
    if p_fixed.horizon() != spec.horizon || p_fixed.n_x() != spec.n_x() {
        return Err(invalid("fixed covariance trajectory does not match the problem"));
    }
    run(spec, init, opts, SolverMode::ZeroOrder, Covariance::Fixed(p_fixed))
}
