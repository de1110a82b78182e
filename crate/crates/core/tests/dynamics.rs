use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zogp::dynamics::{resting_state, ChainConfig, ChainOde, DiscreteDynamics, DiscreteModel, IrkSettings};
use zogp::{DMatrix, DVector};

fn perturbed(rng: &mut ChaCha8Rng, cfg: &ChainConfig, pos: f64, vel: f64) -> DVector<f64> {
    let mut x = resting_state(cfg).unwrap();
    let lay = cfg.layout();
    for i in 0..lay.n_free() {
        for k in 0..3 {
            x[lay.pos(i) + k] += rng.random_range(-pos..pos);
            x[lay.vel(i) + k] += rng.random_range(-vel..vel);
        }
    }
    x
}

fn plant(cfg: &ChainConfig, ts: f64) -> DiscreteModel<ChainOde> {
    DiscreteModel::new(ChainOde::plant(cfg.clone()).unwrap(), ts, IrkSettings::default()).unwrap()
}

fn fd_sensitivities(m: &DiscreteModel<ChainOde>, x: &DVector<f64>, u: &DVector<f64>) -> DMatrix<f64> {
    let (nx, nu) = (x.len(), u.len());
    let mut out = DMatrix::zeros(nx, nx + nu);
    for k in 0..nx + nu {
        let h = 1e-6;
        let (mut xp, mut xm, mut up, mut um) = (x.clone(), x.clone(), u.clone(), u.clone());
        if k < nx {
            xp[k] += h;
            xm[k] -= h;
        } else {
            up[k - nx] += h;
            um[k - nx] -= h;
        }
        let col = (m.step(&xp, &up).unwrap() - m.step(&xm, &um).unwrap()) / (2.0 * h);
        out.set_column(k, &col);
    }
    out
}

#[test]
fn chain_sensitivities_match_finite_differences() {
    let cfg = ChainConfig::with_masses(4);
    let m = plant(&cfg, cfg.ts);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = perturbed(&mut rng, &cfg, 0.02, 0.1);
        let u = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
        let exact = m.sensitivities(&x, &u).unwrap().stacked();
        let fd = fd_sensitivities(&m, &x, &u);
        let rel = (&exact - &fd).amax() / exact.amax();
        assert!(rel <= 1e-5, "relative sensitivity error {rel:e}");
    }
}

#[test]
fn second_order_directional_is_symmetric() {
    // d/dt1 (∂ψ/∂z · d2) must equal d/dt2 (∂ψ/∂z · d1) for the mixed second derivative.
    let cfg = ChainConfig::with_masses(3);
    let m = plant(&cfg, cfg.ts);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let x = perturbed(&mut rng, &cfg, 0.02, 0.1);
        let u = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
        let d1 = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let d2 = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let h1 = m.second_order_directional(&x, &u, &d1).unwrap() * &d2;
        let h2 = m.second_order_directional(&x, &u, &d2).unwrap() * &d1;
        let scale = h1.amax().max(1.0);
        assert!((&h1 - &h2).amax() <= 1e-4 * scale, "asymmetry {:e}", (&h1 - &h2).amax());
    }
    let zero = m
        .second_order_directional(&resting_state(&cfg).unwrap(), &DVector::zeros(3), &DVector::zeros(12))
        .unwrap();
    assert_eq!(zero.amax(), 0.0);
}

fn integrate(cfg: &ChainConfig, x0: &DVector<f64>, t_end: f64, steps: usize) -> DVector<f64> {
    let m = plant(cfg, t_end / steps as f64);
    let u = DVector::from_vec(vec![0.05, -0.02, 0.03]);
    let mut x = x0.clone();
    for _ in 0..steps {
        x = m.step(&x, &u).unwrap();
    }
    x
}

#[test]
fn integrator_order_is_four() {
    let cfg = ChainConfig::with_masses(4);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x0 = perturbed(&mut rng, &cfg, 0.01, 0.05);
    let t_end = 0.4;
    let reference = integrate(&cfg, &x0, t_end, 640);
    let errs: Vec<f64> = [10, 20, 40]
        .iter()
        .map(|&n| (integrate(&cfg, &x0, t_end, n) - &reference).amax())
        .collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((3.7..=4.3).contains(&order), "observed order {order}, errors {errs:?}");
    }
}

#[test]
fn energy_drift_is_small() {
    let cfg = ChainConfig {
        alpha_lat: 0.0,
        gravity: [0.0; 3],
        ..ChainConfig::with_masses(5)
    };
    let ode = ChainOde::plant(cfg.clone()).unwrap();
    let m = plant(&cfg, cfg.ts);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut x = perturbed(&mut rng, &cfg, 1e-3, 0.05);
    let u = DVector::zeros(3);
    for _ in 0..20 {
        let e0 = ode.energy(&x);
        x = m.step(&x, &u).unwrap();
        let drift = (ode.energy(&x) - e0).abs() / e0.abs();
        assert!(drift <= 1e-6, "relative energy drift {drift:e}");
    }
}
