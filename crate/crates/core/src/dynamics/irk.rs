use nalgebra::{DMatrix, DVector};

use super::{DiscreteDynamics, OdeModel, Sensitivities};
use crate::error::{invalid, numerical, Error, Result};
use crate::linalg::inf_norm;

/// Settings of the Gauss-Legendre collocation integrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IrkSettings {
    /// Number of Gauss-Legendre stages (1, 2 or 3; order 2s).
    pub stages: usize,
    pub newton_tol: f64,
    pub max_newton_iter: usize,
}

impl Default for IrkSettings {
    fn default() -> Self {
        Self {
            stages: 2,
            newton_tol: 1e-10,
            max_newton_iter: 25,
        }
    }
}

/// Butcher tableau of an `s`-stage Gauss-Legendre method, `s ≤ 3`.
struct Tableau {
    s: usize,
    a: [[f64; 3]; 3],
    b: [f64; 3],
}

fn gauss_legendre(stages: usize) -> Result<Tableau> {
    let t = match stages {
        1 => Tableau {
            s: 1,
            a: [[0.5, 0.0, 0.0], [0.0; 3], [0.0; 3]],
            b: [1.0, 0.0, 0.0],
        },
        2 => {
            let r = 3f64.sqrt() / 6.0;
            Tableau {
                s: 2,
                a: [[0.25, 0.25 - r, 0.0], [0.25 + r, 0.25, 0.0], [0.0; 3]],
                b: [0.5, 0.5, 0.0],
            }
        }
        3 => {
            let r = 15f64.sqrt();
            Tableau {
                s: 3,
                a: [
                    [5.0 / 36.0, 2.0 / 9.0 - r / 15.0, 5.0 / 36.0 - r / 30.0],
                    [5.0 / 36.0 + r / 24.0, 2.0 / 9.0, 5.0 / 36.0 - r / 24.0],
                    [5.0 / 36.0 + r / 30.0, 2.0 / 9.0 + r / 15.0, 5.0 / 36.0],
                ],
                b: [5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0],
            }
        }
        s => return Err(invalid(format!("unsupported number of Gauss-Legendre stages: {s}"))),
    };
    Ok(t)
}

/// Fixed-step implicit Runge-Kutta discretization `ψ` of an ODE.
#[derive(Debug, Clone)]
pub struct DiscreteModel<M: OdeModel> {
    pub ode: M,
    pub ts: f64,
    pub settings: IrkSettings,
}

struct StageSolution {
    /// Stacked stage derivatives `[k_1; …; k_s]`.
    k: DVector<f64>,
    /// Newton matrix at the converged stage values, LU-factorized.
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    jac_u: Vec<DMatrix<f64>>,
    jac_x: Vec<DMatrix<f64>>,
}

impl<M: OdeModel> DiscreteModel<M> {
    pub fn new(ode: M, ts: f64, settings: IrkSettings) -> Result<Self> {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(invalid("integrator step must be positive"));
        }
        if !(settings.newton_tol > 0.0) {
            return Err(invalid("Newton tolerance must be positive"));
        }
        gauss_legendre(settings.stages)?;
        Ok(Self { ode, ts, settings })
    }

    /// Stage point `i`: `x + h Σ_j a_ij k_j`.
    fn stage_point(&self, tab: &Tableau, x: &DVector<f64>, k: &DVector<f64>, i: usize, out: &mut DVector<f64>) {
        let n = x.len();
        out.copy_from(x);
        for j in 0..tab.s {
            out.axpy(self.ts * tab.a[i][j], &k.rows(j * n, n), 1.0);
        }
    }

    fn newton_matrix(&self, tab: &Tableau, jac_x: &[DMatrix<f64>]) -> DMatrix<f64> {
        let s = tab.s;
        let n = self.ode.state_dim();
        let mut m = DMatrix::identity(s * n, s * n);
        for i in 0..s {
            for j in 0..s {
                let coef = -self.ts * tab.a[i][j];
                if coef != 0.0 {
                    for c in 0..n {
                        for r in 0..n {
                            m[(i * n + r, j * n + c)] += coef * jac_x[i][(r, c)];
                        }
                    }
                }
            }
        }
        m
    }

    fn solve_stages(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<StageSolution> {
        let n = self.ode.state_dim();
        if x.len() != n || u.len() != self.ode.input_dim() {
            return Err(invalid("state or input dimension does not match the model"));
        }
        let tab = gauss_legendre(self.settings.stages)?;
        let s = tab.s;
        let f0 = self.ode.rhs(x, u)?;
        let mut k = DVector::zeros(s * n);
        for i in 0..s {
            k.rows_mut(i * n, n).copy_from(&f0);
        }
        let mut pt = DVector::zeros(n);
        let mut delta = DVector::zeros(s * n);
        let mut jac_x = Vec::with_capacity(s);
        let mut last_res = f64::INFINITY;
        for _ in 0..self.settings.max_newton_iter {
            jac_x.clear();
            for i in 0..s {
                self.stage_point(&tab, x, &k, i, &mut pt);
                let fi = self.ode.rhs(&pt, u)?;
                let mut r = delta.rows_mut(i * n, n);
                r.copy_from(&k.rows(i * n, n));
                r -= fi;
                jac_x.push(self.ode.jacobian(&pt, u)?.0);
            }
            last_res = inf_norm(&delta);
            let lu = self.newton_matrix(&tab, &jac_x).lu();
            if !lu.solve_mut(&mut delta) {
                return Err(numerical("singular Newton matrix in implicit integrator"));
            }
            let kscale = inf_norm(&k);
            k -= &delta;
            if !delta.iter().all(|v| v.is_finite()) {
                return Err(numerical("non-finite Newton step in implicit integrator"));
            }
            if inf_norm(&delta) <= self.settings.newton_tol * (1.0 + kscale) {
                jac_x.clear();
                let mut jac_u = Vec::with_capacity(s);
                for i in 0..s {
                    self.stage_point(&tab, x, &k, i, &mut pt);
                    let (jx, ju) = self.ode.jacobian(&pt, u)?;
                    jac_x.push(jx);
                    jac_u.push(ju);
                }
                let lu = self.newton_matrix(&tab, &jac_x).lu();
                return Ok(StageSolution { k, lu, jac_u, jac_x });
            }
        }
        Err(Error::Numerical(format!(
            "implicit integrator Newton did not converge in {} iterations (last residual {last_res:e})",
            self.settings.max_newton_iter
        )))
    }

    fn combine(&self, x: &DVector<f64>, k: &DVector<f64>) -> DVector<f64> {
        let tab = gauss_legendre(self.settings.stages).expect("validated");
        let n = x.len();
        let mut next = x.clone();
        for i in 0..tab.s {
            next.axpy(self.ts * tab.b[i], &k.rows(i * n, n), 1.0);
        }
        next
    }
}

impl<M: OdeModel> DiscreteDynamics for DiscreteModel<M> {
    fn state_dim(&self) -> usize {
        self.ode.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.ode.input_dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let sol = self.solve_stages(x, u)?;
        Ok(self.combine(x, &sol.k))
    }

    /// Exact derivatives of the converged collocation map, from the implicit
    /// function theorem applied to the stage equations.
    fn sensitivities(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Sensitivities> {
        let sol = self.solve_stages(x, u)?;
        let n = self.ode.state_dim();
        let nu = self.ode.input_dim();
        let tab = gauss_legendre(self.settings.stages)?;
        let s = tab.s;
        let mut rhs = DMatrix::zeros(s * n, n + nu);
        for i in 0..s {
            rhs.view_mut((i * n, 0), (n, n)).copy_from(&sol.jac_x[i]);
            rhs.view_mut((i * n, n), (n, nu)).copy_from(&sol.jac_u[i]);
        }
        if !sol.lu.solve_mut(&mut rhs) {
            return Err(numerical("singular Newton matrix in sensitivity solve"));
        }
        let mut dx = DMatrix::identity(n, n);
        let mut du = DMatrix::zeros(n, nu);
        for i in 0..s {
            let w = self.ts * tab.b[i];
            dx.zip_apply(&rhs.view((i * n, 0), (n, n)), |a, b| *a += w * b);
            du.zip_apply(&rhs.view((i * n, n), (n, nu)), |a, b| *a += w * b);
        }
        Ok(Sensitivities {
            next: self.combine(x, &sol.k),
            dx,
            du,
        })
    }
}
