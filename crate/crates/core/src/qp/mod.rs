//! Convex quadratic programs with optimal-control structure.
//!
//! ```text
//! min  Σ_k ½ [x_k; u_k]ᵀ H_k [x_k; u_k] + g_kᵀ [x_k; u_k] + ½ x_Nᵀ H_N x_N + g_Nᵀ x_N
//! s.t. x_{k+1} = A_k x_k + B_k u_k + c_k,   x_0 given,
//!      C_k [x_k; u_k] ≤ d_k,               C_N x_N ≤ d_N
//! ```
//!
//! [`solve_ocp_qp`] is a primal-dual interior point method whose Newton
//! systems are solved by a Riccati recursion. [`solve_dense_kkt`] is a dense
//! dual active-set method for general QPs, used as a reference.

mod dense;
mod io;
mod riccati;

pub use dense::{solve_dense_kkt, DenseQp, DenseQpSolution, DenseSettings};
pub use io::{read_qp, write_qp};
pub use riccati::{solve_ocp_qp, QpSettings};

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{all_finite, all_finite_vec};

/// Data of stage `k < N`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageQp {
    pub h_xx: DMatrix<f64>,
    pub h_uu: DMatrix<f64>,
    /// n_u × n_x cross term.
    pub h_ux: DMatrix<f64>,
    pub g_x: DVector<f64>,
    pub g_u: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub c_x: DMatrix<f64>,
    pub c_u: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl StageQp {
    /// Zero cost and dynamics, no inequalities.
    pub fn zeros(n_x: usize, n_u: usize) -> Self {
        Self {
            h_xx: DMatrix::zeros(n_x, n_x),
            h_uu: DMatrix::zeros(n_u, n_u),
            h_ux: DMatrix::zeros(n_u, n_x),
            g_x: DVector::zeros(n_x),
            g_u: DVector::zeros(n_u),
            a: DMatrix::zeros(n_x, n_x),
            b: DMatrix::zeros(n_x, n_u),
            c: DVector::zeros(n_x),
            c_x: DMatrix::zeros(0, n_x),
            c_u: DMatrix::zeros(0, n_u),
            d: DVector::zeros(0),
        }
    }

    pub fn n_ineq(&self) -> usize {
        self.d.len()
    }
}

/// Data of the terminal stage.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalQp {
    pub h_xx: DMatrix<f64>,
    pub g_x: DVector<f64>,
    pub c_x: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl TerminalQp {
    pub fn zeros(n_x: usize) -> Self {
        Self {
            h_xx: DMatrix::zeros(n_x, n_x),
            g_x: DVector::zeros(n_x),
            c_x: DMatrix::zeros(0, n_x),
            d: DVector::zeros(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcpQp {
    pub x0: DVector<f64>,
    pub stages: Vec<StageQp>,
    pub terminal: TerminalQp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

/// Primal-dual solution of an [`OcpQp`].
#[derive(Clone, Debug)]
pub struct QpSolution {
    /// `x_0 … x_N`, with `x_0` the fixed initial state.
    pub x: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// `pi[k]` multiplies the dynamics row defining `x_{k+1}`.
    pub pi: Vec<DVector<f64>>,
    /// Inequality multipliers for stages `0 … N`.
    pub lam: Vec<DVector<f64>>,
    pub status: QpStatus,
    pub iterations: usize,
    pub objective: f64,
    /// Time spent in Riccati factorizations (zero for the dense solver).
    pub factor_seconds: f64,
}

impl OcpQp {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn n_x(&self) -> usize {
        self.x0.len()
    }

    pub fn n_u(&self) -> usize {
        self.stages.first().map_or(0, |s| s.h_uu.nrows())
    }

    pub fn n_ineq(&self) -> usize {
        self.stages.iter().map(StageQp::n_ineq).sum::<usize>() + self.terminal.d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nx = self.n_x();
        let nu = self.n_u();
        if self.stages.is_empty() {
            return Err(invalid("QP horizon must be at least 1"));
        }
        for (k, s) in self.stages.iter().enumerate() {
            let m = s.d.len();
            let shapes_ok = s.h_xx.shape() == (nx, nx)
                && s.h_uu.shape() == (nu, nu)
                && s.h_ux.shape() == (nu, nx)
                && s.g_x.len() == nx
                && s.g_u.len() == nu
                && s.a.shape() == (nx, nx)
                && s.b.shape() == (nx, nu)
                && s.c.len() == nx
                && s.c_x.shape() == (m, nx)
                && s.c_u.shape() == (m, nu);
            if !shapes_ok {
                return Err(invalid(format!("QP stage {k} has inconsistent dimensions")));
            }
            let finite = [&s.h_xx, &s.h_uu, &s.h_ux, &s.a, &s.b, &s.c_x, &s.c_u].iter().all(|m| all_finite(m))
                && [&s.g_x, &s.g_u, &s.c, &s.d].iter().all(|v| all_finite_vec(v));
            if !finite {
                return Err(invalid(format!("QP stage {k} has non-finite data")));
            }
        }
        let t = &self.terminal;
        if t.h_xx.shape() != (nx, nx) || t.g_x.len() != nx || t.c_x.shape() != (t.d.len(), nx) {
            return Err(invalid("QP terminal stage has inconsistent dimensions"));
        }
        if !(all_finite(&t.h_xx) && all_finite(&t.c_x) && all_finite_vec(&t.g_x) && all_finite_vec(&t.d)) {
            return Err(invalid("QP terminal stage has non-finite data"));
        }
        if !all_finite_vec(&self.x0) {
            return Err(invalid("QP initial state is not finite"));
        }
        Ok(())
    }

    pub fn objective(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let mut f = 0.0;
        for (k, s) in self.stages.iter().enumerate() {
            let (xk, uk) = (&x[k], &u[k]);
            f += 0.5 * xk.dot(&(&s.h_xx * xk)) + 0.5 * uk.dot(&(&s.h_uu * uk)) + uk.dot(&(&s.h_ux * xk));
            f += s.g_x.dot(xk) + s.g_u.dot(uk);
        }
        let xn = &x[self.horizon()];
        f + 0.5 * xn.dot(&(&self.terminal.h_xx * xn)) + self.terminal.g_x.dot(xn)
    }

    /// Simulates the dynamics from `x0` for the given inputs.
    pub fn rollout(&self, u: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut x = Vec::with_capacity(self.horizon() + 1);
        x.push(self.x0.clone());
        for (k, s) in self.stages.iter().enumerate() {
            let next = &s.a * &x[k] + &s.b * &u[k] + &s.c;
            x.push(next);
        }
        x
    }

    /// Largest violation of dynamics and inequalities.
    pub fn max_constraint_violation(&self, x: &[DVector<f64>], u: &[DVector<f64>]) -> f64 {
        let mut v: f64 = 0.0;
        for (k, s) in self.stages.iter().enumerate() {
            let dyn_res = &s.a * &x[k] + &s.b * &u[k] + &s.c - &x[k + 1];
            v = v.max(dyn_res.amax());
            let ineq = &s.c_x * &x[k] + &s.c_u * &u[k] - &s.d;
            v = ineq.iter().fold(v, |acc, &r| acc.max(r));
        }
        let t = &self.terminal;
        let ineq = &t.c_x * &x[self.horizon()] - &t.d;
        ineq.iter().fold(v, |acc, &r| acc.max(r))
    }

    /// Dense form over `z = [u_0, x_1, u_1, …, x_{N-1}, u_{N-1}, x_N]`.
    pub fn to_dense(&self) -> DenseQp {
        let nx = self.n_x();
        let nu = self.n_u();
        let n = self.horizon();
        let nz = n * (nx + nu);
        let x_off = |k: usize| nu + (k - 1) * (nx + nu);
        let u_off = |k: usize| k * (nx + nu);
        let mut h = DMatrix::zeros(nz, nz);
        let mut g = DVector::zeros(nz);
        let mut e_mat = DMatrix::zeros(n * nx, nz);
        let mut e_vec = DVector::zeros(n * nx);
        let m_total = self.n_ineq();
        let mut g_mat = DMatrix::zeros(m_total, nz);
        let mut h_vec = DVector::zeros(m_total);
        let mut row = 0;
        for (k, s) in self.stages.iter().enumerate() {
            let uo = u_off(k);
            h.view_mut((uo, uo), (nu, nu)).copy_from(&s.h_uu);
            let mut gu = s.g_u.clone();
            if k == 0 {
                gu += &s.h_ux * &self.x0;
            } else {
                let xo = x_off(k);
                h.view_mut((xo, xo), (nx, nx)).copy_from(&s.h_xx);
                h.view_mut((uo, xo), (nu, nx)).copy_from(&s.h_ux);
                h.view_mut((xo, uo), (nx, nu)).copy_from(&s.h_ux.transpose());
                g.rows_mut(xo, nx).copy_from(&s.g_x);
            }
            g.rows_mut(uo, nu).copy_from(&gu);
            // A x_k + B u_k - x_{k+1} = -c
            let er = k * nx;
            e_mat.view_mut((er, uo), (nx, nu)).copy_from(&s.b);
            let mut rhs = -&s.c;
            if k == 0 {
                rhs -= &s.a * &self.x0;
            } else {
                e_mat.view_mut((er, x_off(k)), (nx, nx)).copy_from(&s.a);
            }
            for i in 0..nx {
                e_mat[(er + i, x_off(k + 1) + i)] = -1.0;
            }
            e_vec.rows_mut(er, nx).copy_from(&rhs);
            let m = s.n_ineq();
            g_mat.view_mut((row, uo), (m, nu)).copy_from(&s.c_u);
            let mut bound = s.d.clone();
            if k == 0 {
                bound -= &s.c_x * &self.x0;
            } else {
                g_mat.view_mut((row, x_off(k)), (m, nx)).copy_from(&s.c_x);
            }
            h_vec.rows_mut(row, m).copy_from(&bound);
            row += m;
        }
        let t = &self.terminal;
        let xo = x_off(n);
        h.view_mut((xo, xo), (nx, nx)).copy_from(&t.h_xx);
        g.rows_mut(xo, nx).copy_from(&t.g_x);
        let m = t.d.len();
        g_mat.view_mut((row, xo), (m, nx)).copy_from(&t.c_x);
        h_vec.rows_mut(row, m).copy_from(&t.d);
        DenseQp {
            h,
            g,
            e_mat,
            e_vec,
            g_mat,
            h_vec,
        }
    }

    /// Maps a dense solution of [`OcpQp::to_dense`] back to stage form.
    pub fn from_dense_solution(&self, sol: &DenseQpSolution) -> QpSolution {
        let nx = self.n_x();
        let nu = self.n_u();
        let n = self.horizon();
        let mut x = vec![self.x0.clone()];
        let mut u = Vec::with_capacity(n);
        for k in 0..n {
            let uo = k * (nx + nu);
            u.push(sol.z.rows(uo, nu).into_owned());
            x.push(sol.z.rows(uo + nu, nx).into_owned());
        }
        let pi = (0..n).map(|k| sol.eq_mult.rows(k * nx, nx).into_owned()).collect();
        let mut lam = Vec::with_capacity(n + 1);
        let mut row = 0;
        for s in &self.stages {
            lam.push(sol.ineq_mult.rows(row, s.n_ineq()).into_owned());
            row += s.n_ineq();
        }
        lam.push(sol.ineq_mult.rows(row, self.terminal.d.len()).into_owned());
        let objective = self.objective(&x, &u);
        QpSolution {
            x,
            u,
            pi,
            lam,
            status: sol.status,
            iterations: sol.iterations,
            objective,
            factor_seconds: 0.0,
        }
    }
}
