use std::sync::Mutex;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zogp::qp::{
    read_qp, solve_dense_kkt, solve_ocp_qp, write_qp, DenseSettings, OcpQp, QpSettings, QpStatus, StageQp, TerminalQp,
};
use zogp::{DMatrix, DVector};

static TIMING: Mutex<()> = Mutex::new(());

fn spd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

fn random_qp(rng: &mut ChaCha8Rng, horizon: usize, nx: usize, nu: usize, constrained: bool) -> OcpQp {
    let x0 = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
    let mut stages = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let h = spd(rng, nx + nu, 0.1);
        let mut s = StageQp::zeros(nx, nu);
        s.h_xx = h.view((0, 0), (nx, nx)).into_owned();
        s.h_uu = h.view((nx, nx), (nu, nu)).into_owned();
        s.h_ux = h.view((nx, 0), (nu, nx)).into_owned();
        s.g_x = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
        s.g_u = DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0));
        s.a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0)) / (nx as f64).sqrt();
        s.b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
        s.c = DVector::from_fn(nx, |_, _| rng.random_range(-0.1..0.1));
        stages.push(s);
    }
    let mut qp = OcpQp {
        x0,
        stages,
        terminal: TerminalQp {
            h_xx: spd(rng, nx, 0.1),
            g_x: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
            c_x: DMatrix::zeros(0, nx),
            d: DVector::zeros(0),
        },
    };
    if constrained {
        // Rows are made strictly feasible at a random reference trajectory.
        let u_ref: Vec<_> = (0..horizon).map(|_| DVector::from_fn(nu, |_, _| rng.random_range(-0.3..0.3))).collect();
        let x_ref = qp.rollout(&u_ref);
        for k in 0..horizon {
            let m = rng.random_range(1..=3);
            let c_x = DMatrix::from_fn(m, nx, |_, _| rng.random_range(-1.0..1.0));
            let c_u = DMatrix::from_fn(m, nu, |_, _| rng.random_range(-1.0..1.0));
            let d = &c_x * &x_ref[k] + &c_u * &u_ref[k] + DVector::from_fn(m, |_, _| rng.random_range(0.01..0.3));
            let s = &mut qp.stages[k];
            s.c_x = c_x;
            s.c_u = c_u;
            s.d = d;
        }
        let c_x = DMatrix::from_fn(2, nx, |_, _| rng.random_range(-1.0..1.0));
        qp.terminal.d = &c_x * &x_ref[horizon] + DVector::from_fn(2, |_, _| rng.random_range(0.01..0.3));
        qp.terminal.c_x = c_x;
    }
    qp
}

fn dense_oracle(qp: &OcpQp) -> zogp::qp::QpSolution {
    let d = qp.to_dense();
    let sol = solve_dense_kkt(&d, &DenseSettings::default()).unwrap();
    qp.from_dense_solution(&sol)
}

#[test]
fn lqr_matches_dense_kkt() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let qp = random_qp(&mut rng, 8, 4, 2, false);
    let ip = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
    let oracle = dense_oracle(&qp);
    assert_eq!(ip.status, QpStatus::Optimal);
    for k in 0..8 {
        assert!((&ip.u[k] - &oracle.u[k]).amax() <= 1e-9);
        assert!((&ip.x[k + 1] - &oracle.x[k + 1]).amax() <= 1e-9);
        assert!((&ip.pi[k] - &oracle.pi[k]).amax() <= 1e-8);
    }
}

#[test]
fn zero_data_gives_zero_step() {
    let mut qp = OcpQp {
        x0: DVector::zeros(3),
        stages: vec![StageQp::zeros(3, 2); 4],
        terminal: TerminalQp::zeros(3),
    };
    for s in &mut qp.stages {
        s.h_xx = DMatrix::identity(3, 3);
        s.h_uu = DMatrix::identity(2, 2);
        s.a = DMatrix::identity(3, 3);
        s.b = DMatrix::from_element(3, 2, 0.5);
        s.c_u = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        s.c_x = DMatrix::zeros(2, 3);
        s.d = DVector::from_element(2, 1.0);
    }
    let sol = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!(sol.u.iter().chain(&sol.x).all(|v| v.amax() <= 1e-8));
}

#[test]
fn single_active_bound_matches_hand_solution() {
    // One stage, scalar state and input: min ½x₁² + ½u² - 2u s.t. x₁ = u, u ≤ 0.5.
    // Unconstrained optimum u = 1, so the bound is active: u = 0.5 and
    // stationarity 2u - 2 + λ = 0 gives λ = 1.
    let mut s = StageQp::zeros(1, 1);
    s.h_uu[(0, 0)] = 1.0;
    s.g_u[0] = -2.0;
    s.b[(0, 0)] = 1.0;
    s.c_x = DMatrix::zeros(1, 1);
    s.c_u = DMatrix::from_element(1, 1, 1.0);
    s.d = DVector::from_element(1, 0.5);
    let qp = OcpQp {
        x0: DVector::zeros(1),
        stages: vec![s],
        terminal: TerminalQp {
            h_xx: DMatrix::identity(1, 1),
            ..TerminalQp::zeros(1)
        },
    };
    let sol = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
    assert_eq!(sol.status, QpStatus::Optimal);
    assert!((sol.u[0][0] - 0.5).abs() <= 1e-8);
    assert!((sol.lam[0][0] - 1.0).abs() <= 1e-7);
    let oracle = dense_oracle(&qp);
    assert!((oracle.u[0][0] - 0.5).abs() <= 1e-12);
    assert!((oracle.lam[0][0] - 1.0).abs() <= 1e-12);
}

#[test]
fn infeasible_bounds_are_detected() {
    let mut s = StageQp::zeros(1, 1);
    s.h_uu[(0, 0)] = 1.0;
    s.b[(0, 0)] = 1.0;
    s.c_x = DMatrix::zeros(2, 1);
    s.c_u = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
    s.d = DVector::from_vec(vec![-1.0, -1.0]);
    let qp = OcpQp {
        x0: DVector::zeros(1),
        stages: vec![s],
        terminal: TerminalQp {
            h_xx: DMatrix::identity(1, 1),
            ..TerminalQp::zeros(1)
        },
    };
    let sol = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
    assert_ne!(sol.status, QpStatus::Optimal);
    assert_eq!(dense_oracle(&qp).status, QpStatus::Infeasible);
}

#[test]
fn cross_solver_agreement_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let horizon = rng.random_range(1..=10);
        let nx = rng.random_range(1..=8);
        let nu = rng.random_range(1..=3);
        let qp = random_qp(&mut rng, horizon, nx, nu, true);
        let ip = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
        assert_eq!(ip.status, QpStatus::Optimal);
        let oracle = dense_oracle(&qp);
        assert_eq!(oracle.status, QpStatus::Optimal);
        assert!(qp.max_constraint_violation(&ip.x, &ip.u) <= 1e-8);
        assert!(ip.lam.iter().all(|l| l.iter().all(|&v| v >= 0.0)));
        worst = worst.max((ip.objective - oracle.objective).abs());
    }
    assert!(worst <= 1e-7, "largest objective difference {worst:e}");
}

#[test]
fn binary_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let qp = random_qp(&mut rng, 4, 3, 2, true);
    let mut buf = Vec::new();
    write_qp(&mut buf, &qp).unwrap();
    let back = read_qp(buf.as_slice()).unwrap();
    assert_eq!(back, qp);
    buf[0] = b'X';
    assert!(read_qp(buf.as_slice()).is_err());
    assert!(read_qp(&buf[..10]).is_err());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn factor_time_per_iteration(qp: &OcpQp, reps: usize) -> f64 {
    let settings = QpSettings::default();
    median(
        (0..reps)
            .map(|_| {
                let sol = solve_ocp_qp(qp, &settings).unwrap();
                sol.factor_seconds / sol.iterations.max(1) as f64
            })
            .collect(),
    )
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

#[test]
fn riccati_cost_is_cubic_in_state_dimension() {
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let dims = [24usize, 48, 96, 192];
    let times: Vec<f64> = dims
        .iter()
        .map(|&nx| factor_time_per_iteration(&random_qp(&mut rng, 5, nx, nx / 4, true), 3))
        .collect();
    let xs: Vec<f64> = dims.iter().map(|&d| d as f64).collect();
    let s = slope(&xs, &times);
    assert!((2.0..=4.0).contains(&s), "slope {s}, times {times:?}");
}

// The naive baseline carries (mu, svec Sigma) as its state.
#[test]
fn augmented_cost_is_sixth_power_in_state_dimension() {
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = [20usize, 28, 36, 44];
    let times: Vec<f64> = dims
        .iter()
        .map(|&n| {
            let n_aug = n + n * (n + 1) / 2;
            factor_time_per_iteration(&random_qp(&mut rng, 2, n_aug, 2, true), 3)
        })
        .collect();
    let xs: Vec<f64> = dims.iter().map(|&d| d as f64).collect();
    let s = slope(&xs, &times);
    assert!((4.5..=7.5).contains(&s), "slope {s}, times {times:?}");
}

#[test]
fn riccati_cost_is_linear_in_horizon() {
    let _guard = TIMING.lock().unwrap_or_else(|e| e.into_inner());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let short = random_qp(&mut rng, 10, 40, 10, true);
    let long = random_qp(&mut rng, 20, 40, 10, true);
    let t_short = factor_time_per_iteration(&short, 5);
    let t_long = factor_time_per_iteration(&long, 5);
    assert!(t_long <= 2.5 * t_short, "N=10: {t_short:e}s, N=20: {t_long:e}s");
}

#[test]
fn wall_clock_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let qp = random_qp(&mut rng, 3, 2, 1, true);
    let t = Instant::now();
    let sol = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
    assert!(sol.factor_seconds >= 0.0 && sol.factor_seconds <= t.elapsed().as_secs_f64());
}
