//! Continuous models, their implicit Runge-Kutta discretization and
//! sensitivities.

mod chain;
mod irk;
mod linear;

pub use chain::{latent_force, resting_state, ChainConfig, ChainLayout, ChainOde};
pub use irk::{DiscreteModel, IrkSettings};
pub use linear::{LinearDynamics, LinearOde};

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::inf_norm;

/// Continuous-time vector field `ẋ = f(x, u)`.
pub trait OdeModel: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    /// `(∂f/∂x, ∂f/∂u)`.
    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Value and first-order sensitivities of a discrete map `ψ(x, u)`.
#[derive(Clone, Debug)]
pub struct Sensitivities {
    pub next: DVector<f64>,
    pub dx: DMatrix<f64>,
    pub du: DMatrix<f64>,
}

impl Sensitivities {
    /// `[∂ψ/∂x, ∂ψ/∂u]`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let n = self.dx.nrows();
        let mut m = DMatrix::zeros(n, self.dx.ncols() + self.du.ncols());
        m.columns_mut(0, self.dx.ncols()).copy_from(&self.dx);
        m.columns_mut(self.dx.ncols(), self.du.ncols()).copy_from(&self.du);
        m
    }
}

/// Discrete-time dynamics `x⁺ = ψ(x, u)` used as the nominal model.
pub trait DiscreteDynamics: Send + Sync + Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    fn sensitivities(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Sensitivities>;

    /// Directional derivative of `[∂ψ/∂x, ∂ψ/∂u]` along `direction ∈ R^{n_x+n_u}`,
    /// by central differences of the exact first-order sensitivities.
    fn second_order_directional(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        direction: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let (nx, nu) = (self.state_dim(), self.input_dim());
        if direction.len() != nx + nu {
            return Err(invalid("direction must have length n_x + n_u"));
        }
        let dnorm = inf_norm(direction);
        if dnorm == 0.0 {
            return Ok(DMatrix::zeros(nx, nx + nu));
        }
        let scale = inf_norm(x).max(inf_norm(u)).max(1.0);
        let t = 1e-5 * scale / dnorm;
        let dx = direction.rows(0, nx) * t;
        let du = direction.rows(nx, nu) * t;
        let plus = self.sensitivities(&(x + &dx), &(u + &du))?.stacked();
        let minus = self.sensitivities(&(x - &dx), &(u - &du))?.stacked();
        Ok((plus - minus) / (2.0 * t))
    }
}
