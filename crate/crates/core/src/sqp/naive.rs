use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::spec::OcpSpec;
use super::stats::{IterationRecord, Lap, SolverStats};
use super::zero_order::{check_qp, dyn_residual, input_bound_rows, linearize_all};
use super::{par_map, Iterate, SolverMode, SolverOptions};
use crate::error::{Error, Result};
use crate::linalg::{inf_norm, svec, svec_len, svec_pairs, unsvec};
use crate::qp::{solve_ocp_qp, OcpQp, StageQp, TerminalQp};
use crate::uncertainty::{constraint_variance, DEGENERATE_VARIANCE};

/// Matrix of `svec(Σ) ↦ svec(A Σ Aᵀ)`.
fn congruence_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let pairs = svec_pairs(a.nrows());
    let mut t = DMatrix::zeros(pairs.len(), pairs.len());
    for (r, &(i, j)) in pairs.iter().enumerate() {
        for (c, &(p, q)) in pairs.iter().enumerate() {
            t[(r, c)] = if p == q {
                a[(i, p)] * a[(j, p)]
            } else {
                a[(i, p)] * a[(j, q)] + a[(i, q)] * a[(j, p)]
            };
        }
    }
    t
}

/// Augmented rows of the chance constraints at one stage: value, gradient
/// with respect to `(μ, svec Σ)` and with respect to `u`.
fn constraint_rows(
    spec: &OcpSpec,
    alphas: &[f64],
    x: &DVector<f64>,
    u: &DVector<f64>,
    sigma: &DMatrix<f64>,
    terminal: bool,
) -> Vec<(f64, DVector<f64>, DVector<f64>)> {
    let (nx, nu) = (spec.n_x(), spec.n_u());
    let pairs = svec_pairs(nx);
    spec.constraints
        .iter()
        .zip(alphas)
        .map(|(c, &alpha)| {
            let g = c.h.gradient(x, u);
            let cx = g.rows(0, nx).into_owned();
            let q = constraint_variance(&cx, sigma);
            let mut gx = DVector::zeros(nx + pairs.len());
            gx.rows_mut(0, nx).copy_from(&cx);
            let mut backoff = 0.0;
            if q >= DEGENERATE_VARIANCE && alpha > 0.0 {
                let root = q.sqrt();
                backoff = alpha * root;
                let f = alpha / (2.0 * root);
                for (r, &(a, b)) in pairs.iter().enumerate() {
                    gx[nx + r] = if a == b { f * cx[a] * cx[a] } else { 2.0 * f * cx[a] * cx[b] };
                }
            }
            let gu = if terminal { DVector::zeros(nu) } else { g.rows(nx, nu).into_owned() };
            (c.h.value(x, u) + backoff, gx, gu)
        })
        .collect()
}

/// One exact-Jacobian SQP iteration over means and covariances.
pub fn naive_iteration(spec: &OcpSpec, it: &Iterate, opts: &SolverOptions) -> Result<(Iterate, IterationRecord)> {
    if spec.gp_data_size() > 0 {
        return Err(Error::Unsupported(
            "the naive solver needs the second derivatives of the GP mean; only a data-free GP is supported".into(),
        ));
    }
    let start = Instant::now();
    let mut lap = Lap::new(opts.timing);
    let (nx, nu, n) = (spec.n_x(), spec.n_u(), spec.horizon);
    let ns = svec_len(nx);
    let na = nx + ns;
    let (data, mut t_int, t_gp) = linearize_all(spec, it, opts.workers, &mut lap)?;

    // ∂ svec(Ã Σ Ãᵀ) / ∂(x, u) for each stage.
    let dsig = par_map(opts.workers, (0..n).collect(), |k, _| {
        let mut out = DMatrix::zeros(ns, nx + nu);
        let sigma = &it.p.sigmas[k];
        if sigma.amax() == 0.0 {
            return Ok(out);
        }
        let sat = sigma * data[k].a_tilde.transpose();
        for l in 0..nx + nu {
            let mut e = DVector::zeros(nx + nu);
            e[l] = 1.0;
            let da = spec.dynamics.second_order_directional(&it.x[k], &it.u[k], &e)?;
            let m = da.columns(0, nx) * &sat;
            out.column_mut(l).copy_from(&svec(&(&m + m.transpose())));
        }
        Ok(out)
    })?;
    t_int += lap.lap();

    // Covariance variables enter the QP divided by their magnitude so that
    // the backoff gradients and the covariance rows are of order one.
    let sc = it
        .p
        .sigmas
        .iter()
        .map(|s| s.amax())
        .chain(data.iter().map(|d| d.covariance(spec).noise_term().amax()))
        .fold(0.0, f64::max);
    let sc = if sc > 0.0 { sc } else { 1.0 };
    let alphas = spec.alphas()?;
    let mut aug_a = Vec::with_capacity(n);
    let mut aug_b = Vec::with_capacity(n);
    let mut sig_res = Vec::with_capacity(n);
    for k in 0..n {
        let d = &data[k];
        let mut a = DMatrix::zeros(na, na);
        a.view_mut((0, 0), (nx, nx)).copy_from(&d.a_tilde);
        a.view_mut((nx, 0), (ns, nx)).copy_from(&(dsig[k].columns(0, nx) / sc));
        a.view_mut((nx, nx), (ns, ns)).copy_from(&congruence_matrix(&d.a_tilde));
        let mut b = DMatrix::zeros(na, nu);
        b.view_mut((0, 0), (nx, nu)).copy_from(&d.b_tilde);
        b.view_mut((nx, 0), (ns, nu)).copy_from(&(dsig[k].columns(nx, nu) / sc));
        let pred = &d.a_tilde * &it.p.sigmas[k] * d.a_tilde.transpose() + d.covariance(spec).noise_term();
        sig_res.push((svec(&pred) - svec(&it.p.sigmas[k + 1])) / sc);
        aug_a.push(a);
        aug_b.push(b);
    }
    let mut rows = Vec::with_capacity(n + 1);
    rows.push(Vec::new());
    for k in 1..=n {
        let u = if k < n { it.u[k].clone() } else { DVector::zeros(nu) };
        let mut r = constraint_rows(spec, &alphas, &it.x[k], &u, &it.p.sigmas[k], k == n);
        for (_, gx, _) in &mut r {
            gx.rows_mut(nx, ns).scale_mut(sc);
        }
        rows.push(r);
    }
    let t_prop = lap.lap();

    let cost = &spec.cost;
    let mut stages = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = StageQp::zeros(na, nu);
        s.h_xx.view_mut((0, 0), (nx, nx)).copy_from(&cost.q);
        s.h_uu = cost.r.clone();
        s.g_x.rows_mut(0, nx).copy_from(&(&cost.q * (&it.x[k] - &cost.x_ref)));
        s.g_u = &cost.r * (&it.u[k] - &cost.u_ref);
        s.a = std::mem::take(&mut aug_a[k]);
        s.b = std::mem::take(&mut aug_b[k]);
        s.c.rows_mut(0, nx).copy_from(&(&data[k].next - &it.x[k + 1]));
        s.c.rows_mut(nx, ns).copy_from(&sig_res[k]);
        let (cb, db) = input_bound_rows(spec, &it.u[k]);
        let m = rows[k].len() + db.len();
        s.c_x = DMatrix::zeros(m, na);
        s.c_u = DMatrix::zeros(m, nu);
        s.d = DVector::zeros(m);
        for (i, (val, gx, gu)) in rows[k].iter().enumerate() {
            s.c_x.row_mut(i).copy_from(&gx.transpose());
            s.c_u.row_mut(i).copy_from(&gu.transpose());
            s.d[i] = -val;
        }
        s.c_u.rows_mut(rows[k].len(), db.len()).copy_from(&cb);
        s.d.rows_mut(rows[k].len(), db.len()).copy_from(&db);
        stages.push(s);
    }
    let mut term = TerminalQp::zeros(na);
    term.h_xx.view_mut((0, 0), (nx, nx)).copy_from(&cost.q_n);
    term.g_x.rows_mut(0, nx).copy_from(&(&cost.q_n * (&it.x[n] - &cost.x_ref)));
    term.c_x = DMatrix::zeros(rows[n].len(), na);
    term.d = DVector::zeros(rows[n].len());
    for (i, (val, gx, _)) in rows[n].iter().enumerate() {
        term.c_x.row_mut(i).copy_from(&gx.transpose());
        term.d[i] = -val;
    }
    let qp = OcpQp {
        x0: DVector::zeros(na),
        stages,
        terminal: term,
    };
    let mut t_iface = lap.lap();

    let sol = solve_ocp_qp(&qp, &opts.qp)?;
    let t_qp = lap.lap();
    let sol = check_qp(sol, qp)?;

    let mut next = it.clone();
    let mut norm: f64 = 0.0;
    for k in 0..=n {
        let dz = &sol.x[k];
        let dmu = dz.rows(0, nx).into_owned();
        norm = norm.max(inf_norm(&dmu));
        next.x[k] += &dmu;
        let ds = unsvec(dz.rows(nx, ns).as_slice(), nx) * sc;
        norm = norm.max(ds.amax());
        next.p.sigmas[k] += ds;
    }
    for k in 0..n {
        norm = norm.max(inf_norm(&sol.u[k]));
        next.u[k] += &sol.u[k];
    }
    next.pi = sol.pi.iter().map(|p| p.rows(0, nx).into_owned()).collect();
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

/// Exact-Jacobian SQP with the covariances as QP variables. The QP has
/// state dimension `n_x + n_x(n_x+1)/2`.
pub fn solve_naive(spec: &OcpSpec, init: &Iterate, opts: &SolverOptions) -> Result<(Iterate, SolverStats)> {
    spec.validate()?;
    opts.validate()?;
    init.check(spec)?;
    let start = Instant::now();
    let mut stats = SolverStats::new(SolverMode::Naive);
    let mut it = init.clone();
    it.iteration = 0;
    for _ in 0..opts.max_iter {
        let (next, rec) = naive_iteration(spec, &it, opts)?;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn congruence_matrix_matches_direct_product() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, -0.2, 0.3, 2.0, 0.1, -1.0, 0.4, 0.7]);
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let direct = svec(&(&a * &s * a.transpose()));
        let via = congruence_matrix(&a) * svec(&s);
        assert!((direct - via).amax() < 1e-13);
    }
}
