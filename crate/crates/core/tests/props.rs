use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zogp::gp::{GpDataset, KernelHyperparams, MultiGpModel};
use zogp::linalg::{svec, unsvec};
use zogp::qp::{read_qp, solve_dense_kkt, solve_ocp_qp, write_qp, DenseSettings, OcpQp, QpSettings, StageQp, TerminalQp};
use zogp::{DMatrix, DVector};

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1
}

fn boxed_qp(seed: u64, horizon: usize, nx: usize, nu: usize, bound: f64) -> OcpQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stages = (0..horizon)
        .map(|_| {
            let h = spd(&mut rng, nx + nu);
            let mut s = StageQp::zeros(nx, nu);
            s.h_xx = h.view((0, 0), (nx, nx)).into_owned();
            s.h_uu = h.view((nx, nx), (nu, nu)).into_owned();
            s.h_ux = h.view((nx, 0), (nu, nx)).into_owned();
            s.g_x = DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
            s.g_u = DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0));
            s.a = DMatrix::from_fn(nx, nx, |_, _| rng.random_range(-1.0..1.0)) / (nx as f64).sqrt();
            s.b = DMatrix::from_fn(nx, nu, |_, _| rng.random_range(-1.0..1.0));
            s.c_x = DMatrix::zeros(2 * nu, nx);
            s.c_u = DMatrix::zeros(2 * nu, nu);
            for i in 0..nu {
                s.c_u[(2 * i, i)] = 1.0;
                s.c_u[(2 * i + 1, i)] = -1.0;
            }
            s.d = DVector::from_element(2 * nu, bound);
            s
        })
        .collect();
    OcpQp {
        x0: DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0)),
        stages,
        terminal: TerminalQp {
            h_xx: spd(&mut rng, nx),
            g_x: DVector::zeros(nx),
            c_x: DMatrix::zeros(0, nx),
            d: DVector::zeros(0),
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn riccati_matches_dense_on_boxed_qps(
        seed in any::<u64>(), horizon in 1usize..7, nx in 1usize..5, nu in 1usize..3, bound in 0.05f64..2.0
    ) {
        let qp = boxed_qp(seed, horizon, nx, nu, bound);
        let ip = solve_ocp_qp(&qp, &QpSettings::default()).unwrap();
        let dense = qp.from_dense_solution(&solve_dense_kkt(&qp.to_dense(), &DenseSettings::default()).unwrap());
        let (f_ip, f_dense) = (qp.objective(&ip.x, &ip.u), qp.objective(&dense.x, &dense.u));
        prop_assert!((f_ip - f_dense).abs() <= 1e-7 * (1.0 + f_dense.abs()), "{} vs {}", f_ip, f_dense);
        prop_assert!(qp.max_constraint_violation(&ip.x, &ip.u) <= 1e-8);
        for u in &ip.u {
            prop_assert!(u.amax() <= bound + 1e-8);
        }
    }

    #[test]
    fn qp_container_roundtrips(seed in any::<u64>(), horizon in 1usize..5, nx in 1usize..4, nu in 1usize..3) {
        let qp = boxed_qp(seed, horizon, nx, nu, 1.0);
        let mut buf = Vec::new();
        write_qp(&mut buf, &qp).unwrap();
        let back = read_qp(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_qp(&mut again, &back).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn truncated_container_is_an_error(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let qp = boxed_qp(seed, 3, 2, 1, 1.0);
        let mut buf = Vec::new();
        write_qp(&mut buf, &qp).unwrap();
        let n = ((buf.len() - 1) as f64 * cut) as usize;
        prop_assert!(read_qp(&buf[..n]).is_err());
    }

    #[test]
    fn svec_roundtrips(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = spd(&mut rng, n);
        prop_assert_eq!(unsvec(svec(&m).as_slice(), n), m);
    }

    #[test]
    fn gp_variance_is_bounded_by_prior(seed in any::<u64>(), n in 1usize..25, ls in 0.1f64..3.0, sf2 in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let targets = DMatrix::from_fn(n, 1, |i, _| f64::sin(inputs[(i, 0)]));
        let hp = KernelHyperparams::isotropic(2, ls, sf2, 1e-3).unwrap();
        let gp = MultiGpModel::fit(&GpDataset::new(inputs, targets).unwrap(), &[hp]).unwrap();
        for _ in 0..10 {
            let z = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
            let (_, var) = gp.posterior_mean_cov(&z).unwrap();
            prop_assert!(var[0] >= 0.0 && var[0] <= sf2 * (1.0 + 1e-12));
        }
    }
}

