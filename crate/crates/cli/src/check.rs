//! Property suites behind `zogp check`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zogp::benchmark::{excited_chain_ocp, ChainGpOptions, ChainOcpOptions};
use zogp::dynamics::ChainConfig;
use zogp::gp::{GpDataset, KernelHyperparams, MultiGpModel};
use zogp::qp::{solve_dense_kkt, solve_ocp_qp, DenseSettings, OcpQp, QpSettings, QpStatus, StageQp, TerminalQp};
use zogp::sqp::{check_feasibility, solve, Iterate, SolverMode, SolverOptions};
use zogp::uncertainty::{
    build_vectorized_system, propagate_covariances, solve_vectorized, tightening_factor, StageLinearization,
    TighteningMode,
};
use zogp::{DMatrix, DVector, Result};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn propagation(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let nw = rng.random_range(1..=n);
        let horizon = rng.random_range(1..=8);
        let stages: Vec<StageLinearization> = (0..horizon)
            .map(|_| StageLinearization {
                a_tilde: DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8)),
                b_mat: DMatrix::from_fn(n, nw, |_, _| rng.random_range(-1.0..1.0)),
                gp_cov: DVector::from_fn(nw, |_, _| rng.random_range(0.0..0.1)),
                w_cov: DVector::from_fn(nw, |_, _| rng.random_range(0.0..0.1)),
            })
            .collect();
        let rec = propagate_covariances(&stages, &DMatrix::zeros(n, n))?;
        let vec = solve_vectorized(&build_vectorized_system(&stages)?)?;
        worst = worst.max(rec.max_abs_diff(&vec));
    }
    Ok(result(
        "covariance propagation: recursive = vectorized",
        worst <= 1e-11,
        format!("max diff {worst:.2e} over 50 instances"),
    ))
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

fn random_qp(rng: &mut ChaCha8Rng) -> OcpQp {
    let horizon = rng.random_range(1..=8);
    let nx = rng.random_range(1..=6);
    let nu = rng.random_range(1..=3);
    let mut stages = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let h = spd(rng, nx + nu);
        let mut s = StageQp::zeros(nx, nu);
        s.h_xx = h.view((0, 0), (nx, nx)).into_owned();
        s.h_uu = h.view((nx, nx), (nu, nu)).into_owned();
        s.h_ux = h.view((nx, 0), (nu, nx)).into_owned();
        s.g_x = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
        s.g_u = DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0));
        s.a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0)) / (nx as f64).sqrt();
        s.b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
        // Box on the inputs keeps every instance feasible.
        s.c_x = DMatrix::zeros(2 * nu, nx);
        s.c_u = DMatrix::zeros(2 * nu, nu);
        for i in 0..nu {
            s.c_u[(2 * i, i)] = 1.0;
            s.c_u[(2 * i + 1, i)] = -1.0;
        }
        s.d = DVector::from_element(2 * nu, 0.5);
        stages.push(s);
    }
    OcpQp {
        x0: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        stages,
        terminal: TerminalQp {
            h_xx: spd(rng, nx),
            g_x: DVector::zeros(nx),
            c_x: DMatrix::zeros(0, nx),
            d: DVector::zeros(0),
        },
    }
}

fn qp_agreement(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    let mut optimal = true;
    for _ in 0..30 {
        let qp = random_qp(rng);
        let ip = solve_ocp_qp(&qp, &QpSettings::default())?;
        let dense = qp.from_dense_solution(&solve_dense_kkt(&qp.to_dense(), &DenseSettings::default())?);
        optimal &= ip.status == QpStatus::Optimal && dense.status == QpStatus::Optimal;
        worst = worst.max((qp.objective(&ip.x, &ip.u) - qp.objective(&dense.x, &dense.u)).abs());
    }
    Ok(result(
        "Riccati interior point = dense active set",
        optimal && worst <= 1e-7,
        format!("max objective diff {worst:.2e} over 30 instances"),
    ))
}

fn tightening() -> Result<CheckResult> {
    let cheb_half = tightening_factor(0.5, TighteningMode::Chebyshev)?;
    let mut ordered = true;
    for p in [0.6, 0.8, 0.9, 0.95, 0.99] {
        ordered &= tightening_factor(p, TighteningMode::Gaussian)? < tightening_factor(p, TighteningMode::Chebyshev)?;
    }
    let g = tightening_factor(0.95, TighteningMode::Gaussian)?;
    Ok(result(
        "tightening factors",
        cheb_half == 1.0 && ordered && (g - 1.64485).abs() <= 1e-4,
        format!("gaussian(0.95) = {g:.6}, chebyshev(0.5) = {cheb_half}"),
    ))
}

fn gp_jacobian(rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let (n, nz, nw) = (30, 3, 2);
    let inputs = DMatrix::from_fn(n, nz, |_, _| rng.random_range(-1.0..1.0));
    let targets = DMatrix::from_fn(n, nw, |i, j| (inputs[(i, 0)] * (j + 1) as f64).sin() + inputs[(i, 2)]);
    let hp = KernelHyperparams::new(vec![0.5, 0.8, 1.2], 1.0, 1e-4)?;
    let gp = MultiGpModel::fit(&GpDataset::new(inputs, targets)?, &[hp.clone(), hp])?;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let z = DVector::from_fn(nz, |_, _| rng.random_range(-1.0..1.0));
        let jac = gp.posterior_mean_jacobian(&z)?;
        let h = 1e-6;
        for l in 0..nz {
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[l] += h;
            zm[l] -= h;
            let fd = (gp.posterior_mean_cov(&zp)?.0 - gp.posterior_mean_cov(&zm)?.0) / (2.0 * h);
            let err = (jac.column(l) - &fd).amax() / fd.amax().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(result(
        "GP mean Jacobian = finite differences",
        worst <= 1e-5,
        format!("max relative error {worst:.2e}"),
    ))
}

fn chain_feasibility() -> Result<CheckResult> {
    let cfg = ChainConfig::with_masses(3);
    let spec = excited_chain_ocp(&cfg, &ChainOcpOptions::default(), &ChainGpOptions::default(), None)?;
    let init = Iterate::initial(&spec)?;
    let (zo, s1) = solve(&spec, &init, &SolverOptions::default())?;
    let (nv, s2) = solve(&spec, &init, &SolverOptions::with_mode(SolverMode::Naive))?;
    let (f1, f2) = (check_feasibility(&spec, &zo)?.max(), check_feasibility(&spec, &nv)?.max());
    let (c1, c2) = (zo.cost(&spec), nv.cost(&spec));
    Ok(result(
        "chain: zero-order feasible, naive no worse",
        s1.converged && s2.converged && f1 <= 1e-6 && f2 <= 1e-6 && c2 <= c1 + 1e-6,
        format!("residuals {f1:.1e} / {f2:.1e}, cost zero-order {c1:.6e}, naive {c2:.6e}"),
    ))
}

/// Runs every suite; a suite that errors counts as failed.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcomes: Vec<(&'static str, Result<CheckResult>)> = vec![
        ("covariance propagation", propagation(&mut rng)),
        ("qp agreement", qp_agreement(&mut rng)),
        ("tightening factors", tightening()),
        ("gp jacobian", gp_jacobian(&mut rng)),
        ("chain feasibility", chain_feasibility()),
    ];
    outcomes
        .into_iter()
        .map(|(name, r)| r.unwrap_or_else(|e| result(name, false, format!("error: {e}"))))
        .collect()
}
