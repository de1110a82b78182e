//! Hanging chain of point masses connected by linear springs.
//!
//! One end of the chain is anchored, the velocity of the other end is the
//! control input. The state packs the controlled position, the positions of
//! the intermediate masses and their velocities:
//!
//! ```text
//! x = [p_c (3) | p_1 … p_M (3M) | v_1 … v_M (3M)],   M = n_mass - 2
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::OdeModel;
use crate::error::{invalid, numerical, Result};
use crate::linalg::inf_norm;

/// Physical parameters of the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainConfig {
    pub n_mass: usize,
    /// kg
    pub mass: f64,
    /// N/m
    pub stiffness: f64,
    /// m
    pub rest_length: f64,
    pub alpha_lat: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// m/s²
    pub gravity: [f64; 3],
    /// s
    pub ts: f64,
    /// m
    pub y_wall: f64,
    pub anchor: [f64; 3],
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_mass: 5,
            mass: 0.033,
            stiffness: 30.3,
            rest_length: 0.033,
            alpha_lat: -0.1,
            beta1: 2.0,
            beta2: 3.0,
            gravity: [0.0, 0.0, -9.81],
            ts: 0.2,
            y_wall: -0.05,
            anchor: [0.0, 0.0, 0.0],
        }
    }
}

impl ChainConfig {
    pub fn with_masses(n_mass: usize) -> Self {
        Self {
            n_mass,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mass < 3 {
            return Err(invalid(format!("a chain needs at least 3 masses, got {}", self.n_mass)));
        }
        for (name, v) in [
            ("mass", self.mass),
            ("stiffness", self.stiffness),
            ("rest_length", self.rest_length),
            ("ts", self.ts),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn layout(&self) -> ChainLayout {
        ChainLayout { n_mass: self.n_mass }
    }
}

/// Index bookkeeping for the packed chain state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainLayout {
    pub n_mass: usize,
}

impl ChainLayout {
    /// Number of intermediate (free) masses.
    pub fn n_free(&self) -> usize {
        self.n_mass - 2
    }

    /// `6 (n_mass - 2) + 3`.
    pub fn n_x(&self) -> usize {
        6 * self.n_free() + 3
    }

    pub fn n_u(&self) -> usize {
        3
    }

    /// Residual dimension: velocity components of the free masses.
    pub fn n_w(&self) -> usize {
        3 * self.n_free()
    }

    pub fn controlled_pos(&self) -> usize {
        0
    }

    /// Start index of the position of free mass `i` (0-based).
    pub fn pos(&self, i: usize) -> usize {
        3 + 3 * i
    }

    /// Start index of the velocity of free mass `i` (0-based).
    pub fn vel(&self, i: usize) -> usize {
        3 + 3 * self.n_free() + 3 * i
    }

    /// Noise-injection matrix selecting the free-mass velocity rows.
    pub fn noise_matrix(&self) -> DMatrix<f64> {
        let mut b = DMatrix::zeros(self.n_x(), self.n_w());
        for k in 0..self.n_w() {
            b[(self.vel(0) + k, k)] = 1.0;
        }
        b
    }

    fn vec3(&self, x: &DVector<f64>, start: usize) -> Vector3<f64> {
        Vector3::new(x[start], x[start + 1], x[start + 2])
    }
}

/// `α (v_x - sin(β₁ 2πx/l) - sin(β₂ 2πx/l)²)²`.
pub fn latent_force(x_pos: f64, v_x: f64, cfg: &ChainConfig) -> f64 {
    let s = latent_inner(x_pos, v_x, cfg);
    cfg.alpha_lat * s * s
}

fn latent_inner(x_pos: f64, v_x: f64, cfg: &ChainConfig) -> f64 {
    let a = cfg.beta1 * 2.0 * PI / cfg.rest_length;
    let b = cfg.beta2 * 2.0 * PI / cfg.rest_length;
    let sb = (b * x_pos).sin();
    v_x - (a * x_pos).sin() - sb * sb
}

/// `(∂f/∂x, ∂f/∂v_x)` of the latent force.
fn latent_force_grad(x_pos: f64, v_x: f64, cfg: &ChainConfig) -> (f64, f64) {
    let a = cfg.beta1 * 2.0 * PI / cfg.rest_length;
    let b = cfg.beta2 * 2.0 * PI / cfg.rest_length;
    let s = latent_inner(x_pos, v_x, cfg);
    let ds_dx = -a * (a * x_pos).cos() - 2.0 * b * (b * x_pos).sin() * (b * x_pos).cos();
    (2.0 * cfg.alpha_lat * s * ds_dx, 2.0 * cfg.alpha_lat * s)
}

/// Chain vector field. `latent = false` gives the nominal model.
#[derive(Clone, Debug)]
pub struct ChainOde {
    pub cfg: ChainConfig,
    pub latent: bool,
}

const MIN_SPRING_LENGTH: f64 = 1e-12;

impl ChainOde {
    pub fn nominal(cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, latent: false })
    }

    pub fn plant(cfg: ChainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, latent: true })
    }

    pub fn layout(&self) -> ChainLayout {
        self.cfg.layout()
    }

    /// Positions of all masses from anchor to controlled end.
    fn positions(&self, x: &DVector<f64>) -> Vec<Vector3<f64>> {
        let lay = self.layout();
        let mut p = Vec::with_capacity(self.cfg.n_mass);
        p.push(Vector3::from(self.cfg.anchor));
        for i in 0..lay.n_free() {
            p.push(lay.vec3(x, lay.pos(i)));
        }
        p.push(lay.vec3(x, lay.controlled_pos()));
        p
    }

    fn spring_force(&self, d: &Vector3<f64>) -> Result<Vector3<f64>> {
        let r = d.norm();
        if r < MIN_SPRING_LENGTH {
            return Err(numerical("coincident adjacent masses in chain model"));
        }
        Ok(d * (self.cfg.stiffness * (1.0 - self.cfg.rest_length / r)))
    }

    fn spring_force_jac(&self, d: &Vector3<f64>) -> Result<Matrix3<f64>> {
        let r = d.norm();
        if r < MIN_SPRING_LENGTH {
            return Err(numerical("coincident adjacent masses in chain model"));
        }
        let l = self.cfg.rest_length;
        Ok((Matrix3::identity() * (1.0 - l / r) + d * d.transpose() * (l / (r * r * r))) * self.cfg.stiffness)
    }

    /// Accelerations of the free masses.
    pub fn accelerations(&self, x: &DVector<f64>) -> Result<Vec<Vector3<f64>>> {
        let lay = self.layout();
        let p = self.positions(x);
        let g = Vector3::from(self.cfg.gravity);
        let mut forces = Vec::with_capacity(p.len() - 1);
        for w in p.windows(2) {
            forces.push(self.spring_force(&(w[1] - w[0]))?);
        }
        let mut acc = Vec::with_capacity(lay.n_free());
        for i in 0..lay.n_free() {
            // free mass i sits at chain index i+1, between springs i and i+1
            let mut a = (forces[i + 1] - forces[i]) / self.cfg.mass + g;
            if self.latent {
                let v = lay.vec3(x, lay.vel(i));
                a.y += latent_force(p[i + 1].x, v.x, &self.cfg);
            }
            acc.push(a);
        }
        Ok(acc)
    }

    /// Kinetic plus spring plus gravitational energy of the free masses.
    /// The controlled mass contributes no kinetic term.
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let lay = self.layout();
        let p = self.positions(x);
        let g = Vector3::from(self.cfg.gravity);
        let mut e = 0.0;
        for w in p.windows(2) {
            let r = (w[1] - w[0]).norm();
            e += 0.5 * self.cfg.stiffness * (r - self.cfg.rest_length).powi(2);
        }
        for i in 0..lay.n_free() {
            let v = lay.vec3(x, lay.vel(i));
            e += 0.5 * self.cfg.mass * v.norm_squared() - self.cfg.mass * g.dot(&p[i + 1]);
        }
        e
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let lay = self.layout();
        if x.len() != lay.n_x() || u.len() != 3 {
            return Err(invalid(format!(
                "chain with {} masses expects n_x = {}, n_u = 3 (got {}, {})",
                self.cfg.n_mass,
                lay.n_x(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

impl OdeModel for ChainOde {
    fn state_dim(&self) -> usize {
        self.layout().n_x()
    }

    fn input_dim(&self) -> usize {
        3
    }

    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        let lay = self.layout();
        let mut xdot = DVector::zeros(lay.n_x());
        xdot.rows_mut(0, 3).copy_from(u);
        let acc = self.accelerations(x)?;
        for i in 0..lay.n_free() {
            xdot.rows_mut(lay.pos(i), 3).copy_from(&x.rows(lay.vel(i), 3));
            xdot.rows_mut(lay.vel(i), 3).copy_from(&acc[i]);
        }
        Ok(xdot)
    }

    fn jacobian(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        let lay = self.layout();
        let n = lay.n_x();
        let m = lay.n_free();
        let p = self.positions(x);
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, 3);
        ju.view_mut((0, 0), (3, 3)).fill_with_identity();
        // chain index c -> state offset of its position, None for the anchor
        let pos_offset = |c: usize| -> Option<usize> {
            if c == 0 {
                None
            } else if c <= m {
                Some(lay.pos(c - 1))
            } else {
                Some(lay.controlled_pos())
            }
        };
        let inv_m = 1.0 / self.cfg.mass;
        for i in 0..m {
            jx.view_mut((lay.pos(i), lay.vel(i)), (3, 3)).fill_with_identity();
            let c = i + 1;
            let g_left = self.spring_force_jac(&(p[c] - p[c - 1]))? * inv_m;
            let g_right = self.spring_force_jac(&(p[c + 1] - p[c]))? * inv_m;
            let row = lay.vel(i);
            let own = pos_offset(c).expect("free mass");
            {
                let mut blk = jx.view_mut((row, own), (3, 3));
                blk -= g_left + g_right;
            }
            if let Some(off) = pos_offset(c - 1) {
                let mut blk = jx.view_mut((row, off), (3, 3));
                blk += g_left;
            }
            if let Some(off) = pos_offset(c + 1) {
                let mut blk = jx.view_mut((row, off), (3, 3));
                blk += g_right;
            }
            if self.latent {
                let vx = x[lay.vel(i)];
                let (dfx, dfv) = latent_force_grad(p[c].x, vx, &self.cfg);
                jx[(row + 1, own)] += dfx;
                jx[(row + 1, lay.vel(i))] += dfv;
            }
        }
        Ok((jx, ju))
    }
}

/// Equilibrium of the nominal chain with the controlled end at
/// `anchor + (6 l (n_mass - 1), 0, 0)` and zero velocities.
pub fn resting_state(cfg: &ChainConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    let ode = ChainOde {
        cfg: ChainConfig {
            alpha_lat: 0.0,
            ..cfg.clone()
        },
        latent: false,
    };
    let lay = cfg.layout();
    let m = lay.n_free();
    let anchor = Vector3::from(cfg.anchor);
    let end = anchor + Vector3::new(6.0 * cfg.rest_length * (cfg.n_mass as f64 - 1.0), 0.0, 0.0);
    let mut x = DVector::zeros(lay.n_x());
    x.rows_mut(0, 3).copy_from(&end);
    for i in 0..m {
        let t = (i + 1) as f64 / (cfg.n_mass as f64 - 1.0);
        x.rows_mut(lay.pos(i), 3).copy_from(&(anchor + (end - anchor) * t));
    }
    let u = DVector::zeros(3);
    let residual = |x: &DVector<f64>| -> Result<DVector<f64>> {
        let acc = ode.accelerations(x)?;
        let mut r = DVector::zeros(3 * m);
        for (i, a) in acc.iter().enumerate() {
            r.rows_mut(3 * i, 3).copy_from(a);
        }
        Ok(r)
    };
    let mut r = residual(&x)?;
    for _ in 0..200 {
        let rn = inf_norm(&r);
        if rn <= 1e-10 {
            return Ok(x);
        }
        let (jx, _) = ode.jacobian(&x, &u)?;
        let jpp = jx.view((lay.vel(0), lay.pos(0)), (3 * m, 3 * m)).into_owned();
        let step = jpp
            .lu()
            .solve(&r)
            .ok_or_else(|| numerical("singular Jacobian while computing resting state"))?;
        let mut t = 1.0;
        loop {
            let mut cand = x.clone();
            for i in 0..3 * m {
                cand[lay.pos(0) + i] -= t * step[i];
            }
            match residual(&cand) {
                Ok(rc) if inf_norm(&rc) < rn || t < 1e-8 => {
                    x = cand;
                    r = rc;
                    break;
                }
                _ => t *= 0.5,
            }
        }
    }
    Err(numerical(format!(
        "resting-state Newton did not converge in 200 iterations (residual {:e})",
        inf_norm(&r)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DiscreteDynamics, DiscreteModel, IrkSettings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng, cfg: &ChainConfig) -> DVector<f64> {
        let x0 = resting_state(cfg).unwrap();
        let lay = cfg.layout();
        let mut x = x0.clone();
        for i in 0..lay.n_x() {
            x[i] += rng.random_range(-0.05..0.05);
        }
        for i in 0..lay.n_free() {
            for k in 0..3 {
                x[lay.vel(i) + k] = rng.random_range(-0.5..0.5);
            }
        }
        x
    }

    #[test]
    fn latent_force_vanishes_on_the_curve() {
        let cfg = ChainConfig::default();
        for &x in &[0.0, 0.01, 0.123, -0.3] {
            let a = cfg.beta1 * 2.0 * PI / cfg.rest_length;
            let b = cfg.beta2 * 2.0 * PI / cfg.rest_length;
            let v = (a * x).sin() + (b * x).sin().powi(2);
            assert!(latent_force(x, v, &cfg).abs() < 1e-28);
        }
        assert_eq!(latent_force(0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn latent_force_hand_value() {
        // x = l/8: sin(2·π/4) = 1, sin(3·π/4)² = 1/2, so f = -0.1 · (0 - 1.5)² = -0.225
        let cfg = ChainConfig::default();
        let v = latent_force(cfg.rest_length / 8.0, 0.0, &cfg);
        assert!((v + 0.225).abs() < 1e-14);
    }

    #[test]
    fn latent_force_is_non_positive() {
        let cfg = ChainConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            assert!(latent_force(rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0), &cfg) <= 0.0);
        }
    }

    #[test]
    fn dimensions() {
        for (n, nx) in [(3, 9), (7, 33), (8, 39)] {
            let lay = ChainLayout { n_mass: n };
            assert_eq!(lay.n_x(), nx);
            assert_eq!(lay.n_w(), 3 * (n - 2));
        }
    }

    #[test]
    fn straight_rest_configuration_is_stationary() {
        let cfg = ChainConfig {
            n_mass: 4,
            gravity: [0.0; 3],
            alpha_lat: 0.0,
            ..Default::default()
        };
        let lay = cfg.layout();
        let mut x = DVector::zeros(lay.n_x());
        let l = cfg.rest_length;
        x[0] = 3.0 * l;
        for i in 0..2 {
            x[lay.pos(i)] = (i + 1) as f64 * l;
        }
        let ode = ChainOde::plant(cfg).unwrap();
        let xdot = ode.rhs(&x, &DVector::zeros(3)).unwrap();
        assert!(xdot.amax() < 1e-12);
    }

    #[test]
    fn controlled_mass_follows_input() {
        let cfg = ChainConfig::default();
        let ode = ChainOde::plant(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_state(&mut rng, &cfg);
        let xdot = ode.rhs(&x, &DVector::from_element(3, 1.0)).unwrap();
        assert_eq!(xdot.rows(0, 3).into_owned(), DVector::from_element(3, 1.0));
    }

    #[test]
    fn accelerations_match_pairwise_force_sum() {
        let cfg = ChainConfig::with_masses(6);
        let ode = ChainOde::plant(cfg.clone()).unwrap();
        let lay = cfg.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_state(&mut rng, &cfg);
            let xdot = ode.rhs(&x, &DVector::zeros(3)).unwrap();
            // Oracle: sum forces from both neighbours directly, mass by mass.
            let mut pts = vec![cfg.anchor];
            for i in 0..lay.n_free() {
                pts.push([x[lay.pos(i)], x[lay.pos(i) + 1], x[lay.pos(i) + 2]]);
            }
            pts.push([x[0], x[1], x[2]]);
            for i in 0..lay.n_free() {
                let c = i + 1;
                let mut f = [0.0; 3];
                for nb in [c - 1, c + 1] {
                    let d: Vec<f64> = (0..3).map(|k| pts[nb][k] - pts[c][k]).collect();
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    for k in 0..3 {
                        f[k] += cfg.stiffness * (r - cfg.rest_length) * d[k] / r;
                    }
                }
                let vx = x[lay.vel(i)];
                for k in 0..3 {
                    let mut a = f[k] / cfg.mass + cfg.gravity[k];
                    if k == 1 {
                        a += latent_force(pts[c][0], vx, &cfg);
                    }
                    assert!((xdot[lay.vel(i) + k] - a).abs() < 1e-12 * a.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn ode_jacobian_matches_finite_differences() {
        let cfg = ChainConfig::with_masses(4);
        let ode = ChainOde::plant(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng, &cfg);
        let u = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let (jx, _) = ode.jacobian(&x, &u).unwrap();
        let h = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let col = (ode.rhs(&xp, &u).unwrap() - ode.rhs(&xm, &u).unwrap()) / (2.0 * h);
            assert!((col - jx.column(k)).amax() < 1e-5 * jx.amax());
        }
    }

    #[test]
    fn coincident_masses_error() {
        let cfg = ChainConfig::with_masses(3);
        let ode = ChainOde::nominal(cfg).unwrap();
        let x = DVector::zeros(9);
        assert!(matches!(ode.rhs(&x, &DVector::zeros(3)), Err(crate::Error::Numerical(_))));
    }

    #[test]
    fn resting_state_without_gravity_is_equally_spaced() {
        let cfg = ChainConfig {
            gravity: [0.0; 3],
            ..ChainConfig::with_masses(5)
        };
        let x = resting_state(&cfg).unwrap();
        let lay = cfg.layout();
        let end = 6.0 * cfg.rest_length * 4.0;
        assert!((x[0] - end).abs() < 1e-15);
        for i in 0..3 {
            assert!((x[lay.pos(i)] - end * (i + 1) as f64 / 4.0).abs() < 1e-10);
            assert!(x[lay.pos(i) + 1].abs() < 1e-12 && x[lay.pos(i) + 2].abs() < 1e-12);
        }
    }

    #[test]
    fn resting_state_with_gravity_sags() {
        for n in [3, 5, 8] {
            let cfg = ChainConfig::with_masses(n);
            let x = resting_state(&cfg).unwrap();
            let ode = ChainOde::nominal(cfg.clone()).unwrap();
            let acc = ode.accelerations(&x).unwrap();
            assert!(acc.iter().all(|a| a.amax() <= 1e-10));
            let lay = cfg.layout();
            assert!((0..lay.n_free()).all(|i| x[lay.pos(i) + 2] < 0.0));
        }
    }

    #[test]
    fn resting_state_is_fixed_point_of_integrator() {
        let cfg = ChainConfig {
            alpha_lat: 0.0,
            ..ChainConfig::with_masses(4)
        };
        let x = resting_state(&cfg).unwrap();
        let model = DiscreteModel::new(ChainOde::plant(cfg.clone()).unwrap(), cfg.ts, IrkSettings::default()).unwrap();
        let next = model.step(&x, &DVector::zeros(3)).unwrap();
        assert!((next - x).amax() < 1e-9);
    }
}
