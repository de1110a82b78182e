//! Fixtures shared by the benchmarks.

use zogp::benchmark::{excited_chain_ocp, ChainGpOptions, ChainOcpOptions};
use zogp::dynamics::ChainConfig;
use zogp::gp::GpDataset;
use zogp::sqp::OcpSpec;
use zogp::{DMatrix, DVector, Result};

/// Excited chain OCP with horizon 10 and the data-free GP, or a GP on `data`.
pub fn chain_ocp(n_mass: usize, data: Option<&GpDataset>) -> Result<OcpSpec> {
    let ocp = ChainOcpOptions {
        horizon: 10,
        ..ChainOcpOptions::default()
    };
    excited_chain_ocp(&ChainConfig::with_masses(n_mass), &ocp, &ChainGpOptions::default(), data)
}

/// Deterministic synthetic residual data around the excited state of `spec`.
pub fn synthetic_data(spec: &OcpSpec, rows: usize) -> Result<GpDataset> {
    let z0 = spec.features.apply(&spec.x_current, &DVector::zeros(spec.n_u()));
    let nz = z0.len();
    let inputs = DMatrix::from_fn(rows, nz, |i, j| z0[j] + 0.05 * (((i * 31 + j * 17) % 97) as f64 / 48.5 - 1.0));
    let targets = DMatrix::from_fn(rows, spec.n_w(), |i, j| 1e-3 * (inputs[(i, 0)] * (j + 1) as f64 * 40.0).sin());
    GpDataset::new(inputs, targets)
}
