use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{OcpQp, QpSolution, QpStatus};
use crate::error::{numerical, Result};
use crate::linalg::{inf_norm, symmetrize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

const STEP_TO_BOUNDARY: f64 = 0.995;
const DIVERGED_MULTIPLIER: f64 = 1e10;

type Vecs = Vec<DVector<f64>>;

/// Primal-dual point, or a Newton direction in the same layout.
struct Point {
    x: Vecs,
    u: Vecs,
    pi: Vecs,
    lam: Vecs,
    s: Vecs,
}

impl Point {
    fn zeros(qp: &OcpQp) -> Self {
        let (n, nx, nu) = (qp.horizon(), qp.n_x(), qp.n_u());
        Self {
            x: vec![DVector::zeros(nx); n + 1],
            u: vec![DVector::zeros(nu); n],
            pi: vec![DVector::zeros(nx); n],
            lam: ineq_vecs(qp),
            s: ineq_vecs(qp),
        }
    }
}

fn ineq_len(qp: &OcpQp, k: usize) -> usize {
    if k < qp.horizon() {
        qp.stages[k].d.len()
    } else {
        qp.terminal.d.len()
    }
}

fn ineq_vecs(qp: &OcpQp) -> Vecs {
    (0..=qp.horizon()).map(|k| DVector::zeros(ineq_len(qp, k))).collect()
}

struct Residuals {
    /// Index 0 is unused (x_0 is fixed).
    r_x: Vecs,
    r_u: Vecs,
    r_dyn: Vecs,
    r_in: Vecs,
}

/// Transposed stage matrices, constant over the interior point iterations.
struct Transposes {
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c_x: Vec<DMatrix<f64>>,
}

struct Factorization {
    chol: Vec<Option<Cholesky<f64, Dyn>>>,
    gain: Vec<DMatrix<f64>>,
    /// Cost-to-go Hessians `P_1 … P_N` (index 0 unused).
    p: Vec<DMatrix<f64>>,
    pa: DMatrix<f64>,
    pb: DMatrix<f64>,
    quu: DMatrix<f64>,
    qux: DMatrix<f64>,
    wc_x: Vec<DMatrix<f64>>,
    wc_u: Vec<DMatrix<f64>>,
}

/// Buffers of the backward and forward sweeps.
struct Sweep {
    corr: Vecs,
    gx: Vecs,
    gu: Vecs,
    p_vec: Vecs,
    kff: Vecs,
    v: DVector<f64>,
    qu: DVector<f64>,
}

/// `out = diag(w) c`.
fn scale_rows(out: &mut DMatrix<f64>, c: &DMatrix<f64>, w: &DVector<f64>) {
    out.copy_from(c);
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
}

/// `out = c_x x + c_u u` for stage `k`, or `c_x x` at the terminal stage.
fn stage_ineq(qp: &OcpQp, k: usize, x: &DVector<f64>, u: Option<&DVector<f64>>, out: &mut DVector<f64>) {
    if k < qp.horizon() {
        let s = &qp.stages[k];
        out.gemv(1.0, &s.c_x, x, 0.0);
        out.gemv(1.0, &s.c_u, u.expect("stage input"), 1.0);
    } else {
        out.gemv(1.0, &qp.terminal.c_x, x, 0.0);
    }
}

fn residuals(qp: &OcpQp, pt: &Point, res: &mut Residuals) {
    let n = qp.horizon();
    for (k, s) in qp.stages.iter().enumerate() {
        let (x, u) = (&pt.x[k], &pt.u[k]);
        let ru = &mut res.r_u[k];
        ru.copy_from(&s.g_u);
        ru.gemv(1.0, &s.h_uu, u, 1.0);
        ru.gemv(1.0, &s.h_ux, x, 1.0);
        ru.gemv_tr(1.0, &s.b, &pt.pi[k], 1.0);
        ru.gemv_tr(1.0, &s.c_u, &pt.lam[k], 1.0);
        if k > 0 {
            let rx = &mut res.r_x[k];
            rx.copy_from(&s.g_x);
            rx.gemv(1.0, &s.h_xx, x, 1.0);
            rx.gemv_tr(1.0, &s.h_ux, u, 1.0);
            rx.gemv_tr(1.0, &s.a, &pt.pi[k], 1.0);
            *rx -= &pt.pi[k - 1];
            rx.gemv_tr(1.0, &s.c_x, &pt.lam[k], 1.0);
        }
        let rd = &mut res.r_dyn[k];
        rd.copy_from(&s.c);
        rd.gemv(1.0, &s.a, x, 1.0);
        rd.gemv(1.0, &s.b, u, 1.0);
        *rd -= &pt.x[k + 1];
        let ri = &mut res.r_in[k];
        stage_ineq(qp, k, x, Some(u), ri);
        *ri += &pt.s[k];
        *ri -= &s.d;
    }
    let t = &qp.terminal;
    let xn = &pt.x[n];
    let rx = &mut res.r_x[n];
    rx.copy_from(&t.g_x);
    rx.gemv(1.0, &t.h_xx, xn, 1.0);
    *rx -= &pt.pi[n - 1];
    rx.gemv_tr(1.0, &t.c_x, &pt.lam[n], 1.0);
    let ri = &mut res.r_in[n];
    stage_ineq(qp, n, xn, None, ri);
    *ri += &pt.s[n];
    *ri -= &t.d;
}

fn max_norm(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(inf_norm).fold(0.0, f64::max)
}

/// Cholesky factor of `m`, shifting the diagonal by a growing multiple of its
/// scale when roundoff in the cost-to-go has made `m` slightly indefinite.
fn regularized_cholesky(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c);
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut shift = 1e-12 * scale;
    while shift <= 1e-6 * scale {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += shift;
        }
        if let Some(c) = r.cholesky() {
            return Some(c);
        }
        shift *= 100.0;
    }
    None
}

/// Backward Riccati factorization of the barrier-modified KKT system.
fn factorize(qp: &OcpQp, tr: &Transposes, w: &[DVector<f64>], f: &mut Factorization) -> Result<()> {
    let n = qp.horizon();
    let t = &qp.terminal;
    scale_rows(&mut f.wc_x[n], &t.c_x, &w[n]);
    f.p[n].copy_from(&t.h_xx);
    f.p[n].gemm(1.0, &tr.c_x[n], &f.wc_x[n], 1.0);
    symmetrize(&mut f.p[n]);
    for k in (0..n).rev() {
        let s = &qp.stages[k];
        let (head, tail) = f.p.split_at_mut(k + 1);
        let p_next = &tail[0];
        f.pa.gemm(1.0, p_next, &s.a, 0.0);
        f.pb.gemm(1.0, p_next, &s.b, 0.0);
        scale_rows(&mut f.wc_u[k], &s.c_u, &w[k]);
        f.quu.copy_from(&s.h_uu);
        f.quu.gemm_tr(1.0, &s.c_u, &f.wc_u[k], 1.0);
        f.quu.gemm(1.0, &tr.b[k], &f.pb, 1.0);
        symmetrize(&mut f.quu);
        f.qux.copy_from(&s.h_ux);
        f.qux.gemm_tr(1.0, &f.wc_u[k], &s.c_x, 1.0);
        f.qux.gemm(1.0, &tr.b[k], &f.pa, 1.0);
        let chol = regularized_cholesky(f.quu.clone())
            .ok_or_else(|| numerical(format!("Riccati recursion: reduced input Hessian not positive definite at stage {k}")))?;
        let gain = &mut f.gain[k];
        gain.copy_from(&f.qux);
        chol.solve_mut(gain);
        gain.neg_mut();
        f.chol[k] = Some(chol);
        if k > 0 {
            scale_rows(&mut f.wc_x[k], &s.c_x, &w[k]);
            let pk = &mut head[k];
            pk.copy_from(&s.h_xx);
            pk.gemm(1.0, &tr.c_x[k], &f.wc_x[k], 1.0);
            pk.gemm(1.0, &tr.a[k], &f.pa, 1.0);
            pk.gemm_tr(1.0, &f.qux, &f.gain[k], 1.0);
            symmetrize(pk);
        }
    }
    Ok(())
}

/// Solves the condensed Newton system for the modified gradients in `sw`,
/// writing `x`, `u` and `pi` of `out`.
fn riccati_solve(qp: &OcpQp, tr: &Transposes, f: &Factorization, r_dyn: &[DVector<f64>], sw: &mut Sweep, out: &mut Point) {
    let n = qp.horizon();
    sw.p_vec[n].copy_from(&sw.gx[n]);
    for k in (0..n).rev() {
        let (head, tail) = sw.p_vec.split_at_mut(k + 1);
        sw.v.copy_from(&tail[0]);
        sw.v.gemv(1.0, &f.p[k + 1], &r_dyn[k], 1.0);
        sw.qu.copy_from(&sw.gu[k]);
        sw.qu.gemv(1.0, &tr.b[k], &sw.v, 1.0);
        let chol = f.chol[k].as_ref().expect("factorized stage");
        let kff = &mut sw.kff[k];
        kff.copy_from(&sw.qu);
        chol.solve_mut(kff);
        kff.neg_mut();
        if k > 0 {
            let pk = &mut head[k];
            pk.copy_from(&sw.gx[k]);
            pk.gemv(1.0, &tr.a[k], &sw.v, 1.0);
            pk.gemv_tr(1.0, &f.gain[k], &sw.qu, 1.0);
        }
    }
    out.x[0].fill(0.0);
    for k in 0..n {
        let s = &qp.stages[k];
        let (head, tail) = out.x.split_at_mut(k + 1);
        let (dx, next) = (&head[k], &mut tail[0]);
        let du = &mut out.u[k];
        du.copy_from(&sw.kff[k]);
        du.gemv(1.0, &f.gain[k], dx, 1.0);
        next.copy_from(&r_dyn[k]);
        next.gemv(1.0, &s.a, dx, 1.0);
        next.gemv(1.0, &s.b, du, 1.0);
        let dpi = &mut out.pi[k];
        dpi.copy_from(&sw.p_vec[k + 1]);
        dpi.gemv(1.0, &f.p[k + 1], next, 1.0);
    }
}

/// Newton direction for complementarity right-hand side `r_c`.
#[allow(clippy::too_many_arguments)]
fn direction(
    qp: &OcpQp,
    tr: &Transposes,
    pt: &Point,
    res: &Residuals,
    f: &Factorization,
    r_c: &[DVector<f64>],
    sw: &mut Sweep,
    out: &mut Point,
) {
    let n = qp.horizon();
    // g̃ = r_stat + Cᵀ S⁻¹ (Λ r_in - r_c)
    for k in 0..=n {
        let c = &mut sw.corr[k];
        for i in 0..c.len() {
            c[i] = (pt.lam[k][i] * res.r_in[k][i] - r_c[k][i]) / pt.s[k][i];
        }
    }
    for k in 0..n {
        let s = &qp.stages[k];
        sw.gu[k].copy_from(&res.r_u[k]);
        sw.gu[k].gemv_tr(1.0, &s.c_u, &sw.corr[k], 1.0);
        if k > 0 {
            sw.gx[k].copy_from(&res.r_x[k]);
            sw.gx[k].gemv(1.0, &tr.c_x[k], &sw.corr[k], 1.0);
        }
    }
    sw.gx[n].copy_from(&res.r_x[n]);
    sw.gx[n].gemv(1.0, &tr.c_x[n], &sw.corr[n], 1.0);
    riccati_solve(qp, tr, f, &res.r_dyn, sw, out);
    for k in 0..=n {
        let ds = &mut out.s[k];
        stage_ineq(qp, k, &out.x[k], out.u.get(k), ds);
        *ds += &res.r_in[k];
        ds.neg_mut();
        let dl = &mut out.lam[k];
        for i in 0..dl.len() {
            dl[i] = (-r_c[k][i] - pt.lam[k][i] * ds[i]) / pt.s[k][i];
        }
    }
}

fn max_step(v: &[DVector<f64>], dv: &[DVector<f64>]) -> f64 {
    let mut a: f64 = 1.0;
    for (vk, dk) in v.iter().zip(dv) {
        for (vi, di) in vk.iter().zip(dk.iter()) {
            if *di < 0.0 {
                a = a.min(-vi / di);
            }
        }
    }
    a
}

fn complementarity(pt: &Point, m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    pt.s.iter().zip(&pt.lam).map(|(s, l)| s.dot(l)).sum::<f64>() / m as f64
}

fn axpy_all(v: &mut [DVector<f64>], d: &[DVector<f64>], alpha: f64) {
    for (vk, dk) in v.iter_mut().zip(d) {
        vk.axpy(alpha, dk, 1.0);
    }
}

fn initial_point(qp: &OcpQp) -> Point {
    let n = qp.horizon();
    let mut pt = Point::zeros(qp);
    pt.x = qp.rollout(&pt.u);
    for k in 0..=n {
        let d = if k < n { &qp.stages[k].d } else { &qp.terminal.d };
        let s = &mut pt.s[k];
        stage_ineq(qp, k, &pt.x[k], pt.u.get(k), s);
        for i in 0..s.len() {
            s[i] = (d[i] - s[i]).max(1.0);
        }
        pt.lam[k].fill(1.0);
    }
    pt
}

/// Primal-dual interior point with Mehrotra predictor-corrector; each Newton
/// system is solved by one backward Riccati factorization and two sweeps.
/// All buffers are allocated once per call.
pub fn solve_ocp_qp(qp: &OcpQp, settings: &QpSettings) -> Result<QpSolution> {
    qp.validate()?;
    let (n, nx, nu) = (qp.horizon(), qp.n_x(), qp.n_u());
    let m = qp.n_ineq();
    let tr = Transposes {
        a: qp.stages.iter().map(|s| s.a.transpose()).collect(),
        b: qp.stages.iter().map(|s| s.b.transpose()).collect(),
        c_x: qp
            .stages
            .iter()
            .map(|s| s.c_x.transpose())
            .chain(std::iter::once(qp.terminal.c_x.transpose()))
            .collect(),
    };
    let mut fact = Factorization {
        chol: (0..n).map(|_| None).collect(),
        gain: vec![DMatrix::zeros(nu, nx); n],
        p: (0..=n)
            .map(|k| if k == 0 { DMatrix::zeros(0, 0) } else { DMatrix::zeros(nx, nx) })
            .collect(),
        pa: DMatrix::zeros(nx, nx),
        pb: DMatrix::zeros(nx, nu),
        quu: DMatrix::zeros(nu, nu),
        qux: DMatrix::zeros(nu, nx),
        wc_x: (0..=n).map(|k| DMatrix::zeros(ineq_len(qp, k), nx)).collect(),
        wc_u: (0..n).map(|k| DMatrix::zeros(ineq_len(qp, k), nu)).collect(),
    };
    let mut sw = Sweep {
        corr: ineq_vecs(qp),
        gx: vec![DVector::zeros(nx); n + 1],
        gu: vec![DVector::zeros(nu); n],
        p_vec: vec![DVector::zeros(nx); n + 1],
        kff: vec![DVector::zeros(nu); n],
        v: DVector::zeros(nx),
        qu: DVector::zeros(nu),
    };
    let mut res = Residuals {
        r_x: vec![DVector::zeros(nx); n + 1],
        r_u: vec![DVector::zeros(nu); n],
        r_dyn: vec![DVector::zeros(nx); n],
        r_in: ineq_vecs(qp),
    };
    let mut w = ineq_vecs(qp);
    let mut rc_aff = ineq_vecs(qp);
    let mut rc = ineq_vecs(qp);
    let mut aff = Point::zeros(qp);
    let mut dir = Point::zeros(qp);

    let mut pt = initial_point(qp);
    let mut factor_seconds = 0.0;
    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;

    for it in 0..=settings.max_iter {
        residuals(qp, &pt, &mut res);
        let mu = complementarity(&pt, m);
        let mut kkt = max_norm(&res.r_x)
            .max(max_norm(&res.r_u))
            .max(max_norm(&res.r_dyn))
            .max(max_norm(&res.r_in));
        for (s, l) in pt.s.iter().zip(&pt.lam) {
            for (a, b) in s.iter().zip(l.iter()) {
                kkt = kkt.max((a * b).abs());
            }
        }
        iterations = it;
        if kkt <= settings.tol {
            status = QpStatus::Optimal;
            break;
        }
        if max_norm(&pt.lam) > DIVERGED_MULTIPLIER {
            status = QpStatus::Infeasible;
            break;
        }
        if it == settings.max_iter {
            break;
        }

        for k in 0..=n {
            for i in 0..w[k].len() {
                w[k][i] = pt.lam[k][i] / pt.s[k][i];
                rc_aff[k][i] = pt.s[k][i] * pt.lam[k][i];
            }
        }
        let t0 = Instant::now();
        factorize(qp, &tr, &w, &mut fact)?;
        factor_seconds += t0.elapsed().as_secs_f64();

        // predictor
        direction(qp, &tr, &pt, &res, &fact, &rc_aff, &mut sw, &mut aff);
        let step = if m == 0 {
            &aff
        } else {
            let a_aff = max_step(&pt.s, &aff.s).min(max_step(&pt.lam, &aff.lam));
            let mut mu_aff = 0.0;
            for k in 0..=n {
                for i in 0..pt.s[k].len() {
                    mu_aff += (pt.s[k][i] + a_aff * aff.s[k][i]) * (pt.lam[k][i] + a_aff * aff.lam[k][i]);
                }
            }
            mu_aff /= m as f64;
            let sigma = (mu_aff / mu).powi(3).min(1.0);
            // corrector
            for k in 0..=n {
                for i in 0..rc[k].len() {
                    rc[k][i] = rc_aff[k][i] + aff.s[k][i] * aff.lam[k][i] - sigma * mu;
                }
            }
            direction(qp, &tr, &pt, &res, &fact, &rc, &mut sw, &mut dir);
            &dir
        };
        let alpha = if m == 0 {
            1.0
        } else {
            (STEP_TO_BOUNDARY * max_step(&pt.s, &step.s).min(max_step(&pt.lam, &step.lam))).min(1.0)
        };
        axpy_all(&mut pt.x, &step.x, alpha);
        axpy_all(&mut pt.u, &step.u, alpha);
        axpy_all(&mut pt.pi, &step.pi, alpha);
        axpy_all(&mut pt.lam, &step.lam, alpha);
        axpy_all(&mut pt.s, &step.s, alpha);
        if !pt.x.iter().chain(&pt.u).all(|v| v.iter().all(|c| c.is_finite())) {
            return Err(numerical("interior point iterate became non-finite"));
        }
    }
    let objective = qp.objective(&pt.x, &pt.u);
    Ok(QpSolution {
        x: pt.x,
        u: pt.u,
        pi: pt.pi,
        lam: pt.lam,
        status,
        iterations,
        objective,
        factor_seconds,
    })
}
