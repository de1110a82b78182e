use nalgebra::{DMatrix, DVector};

use super::{DiscreteDynamics, OdeModel, Sensitivities};
use crate::error::{invalid, Result};

/// `ẋ = A x + B u`.
#[derive(Clone, Debug)]
pub struct LinearOde {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearOde {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols());
        assert_eq!(a.nrows(), b.nrows());
        Self { a, b }
    }
}

impl OdeModel for LinearOde {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }

    fn jacobian(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}

/// Affine discrete-time map `x⁺ = A x + B u + c`.
#[derive(Clone, Debug)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() || c.len() != a.nrows() {
            return Err(invalid("inconsistent linear dynamics dimensions"));
        }
        Ok(Self { a, b, c })
    }
}

impl DiscreteDynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u + &self.c)
    }

    fn sensitivities(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<Sensitivities> {
        Ok(Sensitivities {
            next: self.step(x, u)?,
            dx: self.a.clone(),
            du: self.b.clone(),
        })
    }

    fn second_order_directional(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        direction: &DVector<f64>,
    ) -> Result<DMatrix<f64>> {
        let n = self.state_dim();
        if direction.len() != n + self.input_dim() {
            return Err(invalid("direction must have length n_x + n_u"));
        }
        Ok(DMatrix::zeros(n, n + self.input_dim()))
    }
}
