//! Covariance propagation through linearized dynamics and chance-constraint
//! tightening.
//!
//! The recursion `Σ_{i+1} = Ã_i Σ_i Ã_iᵀ + B (Σ^d_i + Σ^w) Bᵀ` is the
//! production path. [`build_vectorized_system`] writes the same relation as a
//! block lower-bidiagonal linear system `A · vec(P) + b = 0` over the whole
//! horizon, which is what the SQP sees as the covariance equality constraint.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::{all_finite, all_finite_vec, kron, symmetrize, unvec, vec_of};

/// How a probability level is turned into a multiple of the standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TighteningMode {
    /// Distribution-free, `sqrt(p / (1 - p))`.
    Chebyshev,
    /// Standard normal quantile.
    Gaussian,
}

impl std::str::FromStr for TighteningMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chebyshev" => Ok(Self::Chebyshev),
            "gaussian" => Ok(Self::Gaussian),
            other => Err(invalid(format!("unknown tightening mode '{other}'"))),
        }
    }
}

/// Multiplier `α` such that `h + α·std ≤ 0` implies `P(h ≤ 0) ≥ p`.
pub fn tightening_factor(p: f64, mode: TighteningMode) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(invalid(format!("probability must lie in (0, 1), got {p}")));
    }
    Ok(match mode {
        TighteningMode::Chebyshev => (p / (1.0 - p)).sqrt(),
        TighteningMode::Gaussian => normal_quantile(p),
    })
}

/// Inverse standard-normal CDF (Wichura's AS 241, about 1e-16 relative).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        let num = ((((((2.509_080_928_730_122_7e3 * r + 3.343_057_558_358_813e4) * r + 6.726_577_092_700_87e4) * r
            + 4.592_195_393_154_987e4)
            * r
            + 1.373_169_376_550_946e4)
            * r
            + 1.971_590_950_306_551_3e3)
            * r
            + 1.331_416_678_917_843_8e2)
            * r
            + 3.387_132_872_796_366_5;
        let den = ((((((5.226_495_278_852_545e3 * r + 2.872_908_573_572_194_3e4) * r + 3.930_789_580_009_271e4) * r
            + 2.121_379_430_158_659_7e4)
            * r
            + 5.394_196_021_424_751e3)
            * r
            + 6.871_870_074_920_579e2)
            * r
            + 4.231_333_070_160_091e1)
            * r
            + 1.0;
        return q * num / den;
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        let num = ((((((7.745_450_142_783_414e-4 * r + 2.272_384_498_926_918_4e-2) * r + 2.417_807_251_774_506e-1)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_545)
            * r
            + 1.423_437_110_749_683_5;
        let den = ((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r + 1.519_866_656_361_645_7e-2)
            * r
            + 1.481_039_764_274_800_8e-1)
            * r
            + 6.897_673_349_851e-1)
            * r
            + 1.676_384_830_183_803_8)
            * r
            + 2.053_191_626_637_759)
            * r
            + 1.0;
        num / den
    } else {
        let r = r - 5.0;
        let num = ((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r + 1.242_660_947_388_078_4e-3)
            * r
            + 2.653_218_952_657_612_4e-2)
            * r
            + 2.965_605_718_285_048_7e-1)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103;
        let den = ((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r + 1.846_318_317_510_054_8e-5)
            * r
            + 7.868_691_311_456_133e-4)
            * r
            + 1.487_536_129_085_061_5e-2)
            * r
            + 1.369_298_809_227_358e-1)
            * r
            + 5.998_322_065_558_88e-1)
            * r
            + 1.0;
        num / den
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Linearization data of one stage for covariance propagation.
#[derive(Clone, Debug)]
pub struct StageLinearization {
    /// `Ã_i`, n_x × n_x.
    pub a_tilde: DMatrix<f64>,
    /// `B`, n_x × n_w.
    pub b_mat: DMatrix<f64>,
    /// Diagonal of `Σ^d(y_i)`.
    pub gp_cov: DVector<f64>,
    /// Diagonal of `Σ^w`.
    pub w_cov: DVector<f64>,
}

impl StageLinearization {
    pub fn n_x(&self) -> usize {
        self.a_tilde.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.a_tilde.nrows();
        let nw = self.b_mat.ncols();
        if self.a_tilde.ncols() != n || self.b_mat.nrows() != n || self.gp_cov.len() != nw || self.w_cov.len() != nw {
            return Err(invalid("stage linearization has inconsistent dimensions"));
        }
        if !(all_finite(&self.a_tilde) && all_finite(&self.b_mat) && all_finite_vec(&self.gp_cov) && all_finite_vec(&self.w_cov))
        {
            return Err(invalid("stage linearization contains non-finite entries"));
        }
        if self.gp_cov.iter().chain(self.w_cov.iter()).any(|&v| v < 0.0) {
            return Err(invalid("noise covariances must be non-negative"));
        }
        Ok(())
    }

    /// `B (Σ^d + Σ^w) Bᵀ`.
    pub fn noise_term(&self) -> DMatrix<f64> {
        let q = &self.gp_cov + &self.w_cov;
        let mut bq = self.b_mat.clone();
        for (j, mut col) in bq.column_iter_mut().enumerate() {
            col *= q[j];
        }
        bq * self.b_mat.transpose()
    }
}

/// State covariances `Σ_0 … Σ_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceTrajectory {
    pub sigmas: Vec<DMatrix<f64>>,
}

impl CovarianceTrajectory {
    pub fn zeros(n_x: usize, horizon: usize) -> Self {
        Self {
            sigmas: vec![DMatrix::zeros(n_x, n_x); horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.sigmas.len().saturating_sub(1)
    }

    pub fn n_x(&self) -> usize {
        self.sigmas.first().map_or(0, |s| s.nrows())
    }

    /// Stacked `vec(Σ_0), …, vec(Σ_N)`.
    pub fn vectorized(&self) -> DVector<f64> {
        let n2 = self.n_x() * self.n_x();
        let mut out = DVector::zeros(n2 * self.sigmas.len());
        for (i, s) in self.sigmas.iter().enumerate() {
            out.rows_mut(i * n2, n2).copy_from(&vec_of(s));
        }
        out
    }

    /// Largest entry-wise difference to another trajectory of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.sigmas
            .iter()
            .zip(&other.sigmas)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }
}

fn check_stages(stages: &[StageLinearization]) -> Result<usize> {
    let first = stages.first().ok_or_else(|| invalid("at least one stage is required"))?;
    let n = first.n_x();
    for s in stages {
        s.validate()?;
        if s.n_x() != n {
            return Err(invalid("all stages must share the state dimension"));
        }
    }
    Ok(n)
}

/// Forward recursion of the covariance dynamics from `sigma0`.
pub fn propagate_covariances(stages: &[StageLinearization], sigma0: &DMatrix<f64>) -> Result<CovarianceTrajectory> {
    let n = check_stages(stages)?;
    if sigma0.shape() != (n, n) || !all_finite(sigma0) {
        return Err(invalid("initial covariance must be a finite n_x × n_x matrix"));
    }
    let mut sigmas = Vec::with_capacity(stages.len() + 1);
    let mut cur = sigma0.clone();
    symmetrize(&mut cur);
    sigmas.push(cur.clone());
    for st in stages {
        let mut next = &st.a_tilde * &cur * st.a_tilde.transpose() + st.noise_term();
        symmetrize(&mut next);
        sigmas.push(next.clone());
        cur = next;
    }
    Ok(CovarianceTrajectory { sigmas })
}

/// Covariance equations over the horizon in vectorized form,
/// `a · vec(P) + b = 0` with `P = (Σ_0, …, Σ_N)` and `Σ_0 = 0`.
#[derive(Clone, Debug)]
pub struct VectorizedSystem {
    /// Unit lower block-bidiagonal, `n_x²(N+1)` square.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub n_x: usize,
}

impl VectorizedSystem {
    pub fn horizon(&self) -> usize {
        self.b.len() / (self.n_x * self.n_x) - 1
    }

    /// `a · vec(P) + b`.
    pub fn residual(&self, p: &CovarianceTrajectory) -> DVector<f64> {
        &self.a * p.vectorized() + &self.b
    }
}

/// Sub-diagonal blocks are `-Ã_i ⊗ Ã_i`; `b` stacks `0` and `-(B ⊗ B) vec(Σ^d_i + Σ^w)`.
pub fn build_vectorized_system(stages: &[StageLinearization]) -> Result<VectorizedSystem> {
    let n = check_stages(stages)?;
    let n2 = n * n;
    let total = n2 * (stages.len() + 1);
    let mut a = DMatrix::identity(total, total);
    let mut b = DVector::zeros(total);
    for (i, st) in stages.iter().enumerate() {
        let row = (i + 1) * n2;
        a.view_mut((row, i * n2), (n2, n2)).copy_from(&(-kron(&st.a_tilde, &st.a_tilde)));
        b.rows_mut(row, n2).copy_from(&(-vec_of(&st.noise_term())));
    }
    Ok(VectorizedSystem { a, b, n_x: n })
}

/// Block forward substitution for `a · vec(P) = -b`.
pub fn solve_vectorized(sys: &VectorizedSystem) -> Result<CovarianceTrajectory> {
    let n = sys.n_x;
    let n2 = n * n;
    if n == 0 || !sys.b.len().is_multiple_of(n2) || sys.a.shape() != (sys.b.len(), sys.b.len()) {
        return Err(invalid("vectorized system has inconsistent dimensions"));
    }
    let blocks = sys.b.len() / n2;
    let mut sigmas = Vec::with_capacity(blocks);
    let mut prev = -sys.b.rows(0, n2).into_owned();
    sigmas.push(prev.clone());
    for i in 1..blocks {
        let sub = sys.a.view((i * n2, (i - 1) * n2), (n2, n2));
        let cur = -sys.b.rows(i * n2, n2) - sub * &prev;
        sigmas.push(cur.clone());
        prev = cur;
    }
    Ok(CovarianceTrajectory {
        sigmas: sigmas
            .into_iter()
            .map(|v| {
                let mut m = unvec(v.as_slice(), n);
                symmetrize(&mut m);
                m
            })
            .collect(),
    })
}

/// Quadratic forms below this are treated as zero variance.
pub const DEGENERATE_VARIANCE: f64 = 1e-14;

/// A chance constraint `h ≤ 0` with its backoff at a given covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct TightenedConstraint {
    /// Gradient of `h` with respect to `(x, u)`.
    pub row: DVector<f64>,
    /// `h` at the linearization point.
    pub offset: f64,
    pub prob: f64,
    pub alpha: f64,
    pub backoff: f64,
}

impl TightenedConstraint {
    /// `h + backoff`; the constraint asks for this to be non-positive.
    pub fn tightened_value(&self) -> f64 {
        self.offset + self.backoff
    }
}

/// `C_x Σ C_xᵀ` where `C_x` is the state part of `c_row`.
pub fn constraint_variance(c_row: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    let n = sigma.nrows();
    let cx = c_row.rows(0, n);
    (sigma * cx).dot(&cx)
}

pub fn tighten(h_val: f64, c_row: &DVector<f64>, sigma: &DMatrix<f64>, prob: f64, alpha: f64) -> TightenedConstraint {
    let q = constraint_variance(c_row, sigma);
    let backoff = if q < DEGENERATE_VARIANCE { 0.0 } else { alpha * q.sqrt() };
    TightenedConstraint {
        row: c_row.clone(),
        offset: h_val,
        prob,
        alpha,
        backoff,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal_cdf(x: f64) -> f64 {
        0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
    }

    fn bisect_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if normal_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn random_stage(rng: &mut ChaCha8Rng, n: usize, nw: usize) -> StageLinearization {
        StageLinearization {
            a_tilde: DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.8..0.8)),
            b_mat: DMatrix::from_fn(n, nw, |_, _| rng.random_range(-1.0..1.0)),
            gp_cov: DVector::from_fn(nw, |_, _| rng.random_range(0.0..0.1)),
            w_cov: DVector::from_fn(nw, |_, _| rng.random_range(0.0..0.1)),
        }
    }

    fn scalar_stage(a: f64, q: f64) -> StageLinearization {
        StageLinearization {
            a_tilde: DMatrix::from_element(1, 1, a),
            b_mat: DMatrix::from_element(1, 1, 1.0),
            gp_cov: DVector::from_element(1, q),
            w_cov: DVector::zeros(1),
        }
    }

    #[test]
    fn factor_examples() {
        assert_eq!(tightening_factor(0.5, TighteningMode::Chebyshev).unwrap(), 1.0);
        assert_eq!(tightening_factor(0.5, TighteningMode::Gaussian).unwrap(), 0.0);
        let g = tightening_factor(0.95, TighteningMode::Gaussian).unwrap();
        assert!((g - 1.64485).abs() < 1e-4);
        assert!((g - bisect_quantile(0.95)).abs() < 1e-10);
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(tightening_factor(p, TighteningMode::Gaussian).is_err());
        }
    }

    #[test]
    fn quantile_matches_bisection_across_ranges() {
        for &p in &[1e-12, 1e-6, 0.001, 0.02, 0.07, 0.075, 0.2, 0.5, 0.6, 0.9, 0.925, 0.99, 0.999_999] {
            let q = normal_quantile(p);
            let oracle = bisect_quantile(p);
            assert!((q - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "p = {p}: {q} vs {oracle}");
        }
    }

    #[test]
    fn gaussian_is_less_conservative() {
        for p in [0.6, 0.8, 0.9, 0.95, 0.99] {
            assert!(
                tightening_factor(p, TighteningMode::Gaussian).unwrap()
                    < tightening_factor(p, TighteningMode::Chebyshev).unwrap()
            );
        }
    }

    #[test]
    fn identity_without_noise_stays_zero() {
        let st = StageLinearization {
            a_tilde: DMatrix::identity(3, 3),
            b_mat: DMatrix::zeros(3, 2),
            gp_cov: DVector::from_element(2, 0.3),
            w_cov: DVector::from_element(2, 0.1),
        };
        let p = propagate_covariances(&vec![st; 4], &DMatrix::zeros(3, 3)).unwrap();
        assert!(p.sigmas.iter().all(|s| s.amax() == 0.0));
    }

    #[test]
    fn memoryless_recursion() {
        let st = StageLinearization {
            a_tilde: DMatrix::zeros(2, 2),
            b_mat: DMatrix::identity(2, 2),
            gp_cov: DVector::from_vec(vec![0.2, 0.3]),
            w_cov: DVector::from_vec(vec![0.1, 0.0]),
        };
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.3]));
        let p = propagate_covariances(&vec![st; 3], &DMatrix::zeros(2, 2)).unwrap();
        for s in &p.sigmas[1..] {
            assert!((s - &q).amax() < 1e-15);
        }
    }

    #[test]
    fn scalar_geometric_series() {
        let (a, q) = (0.9, 0.05);
        let p = propagate_covariances(&vec![scalar_stage(a, q); 6], &DMatrix::zeros(1, 1)).unwrap();
        for i in 1..=6 {
            let expected: f64 = (0..i).map(|k| q * a.powi(2 * k as i32)).sum();
            assert!((p.sigmas[i][(0, 0)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn vectorized_small_cases() {
        let st = StageLinearization {
            a_tilde: DMatrix::identity(2, 2),
            b_mat: DMatrix::zeros(2, 1),
            gp_cov: DVector::zeros(1),
            w_cov: DVector::zeros(1),
        };
        let sys = build_vectorized_system(&[st]).unwrap();
        let mut expected = DMatrix::identity(8, 8);
        expected.view_mut((4, 0), (4, 4)).fill_with_identity();
        expected.view_mut((4, 0), (4, 4)).neg_mut();
        assert_eq!(sys.a, expected);
        assert_eq!(sys.b.amax(), 0.0);
        assert!(solve_vectorized(&sys).unwrap().sigmas.iter().all(|s| s.amax() == 0.0));

        let sys = build_vectorized_system(&[scalar_stage(0.7, 0.4)]).unwrap();
        assert!((sys.a[(1, 0)] + 0.49).abs() < 1e-15);
        let p = solve_vectorized(&sys).unwrap();
        assert!((p.sigmas[1][(0, 0)] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn vectorized_residual_vanishes_on_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stages: Vec<_> = (0..5).map(|_| random_stage(&mut rng, 4, 2)).collect();
        let p = propagate_covariances(&stages, &DMatrix::zeros(4, 4)).unwrap();
        let sys = build_vectorized_system(&stages).unwrap();
        assert!(sys.residual(&p).amax() < 1e-12);
    }

    #[test]
    fn vectorized_matches_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let n = rng.random_range(1..=6);
            let nw = rng.random_range(1..=n);
            let horizon = rng.random_range(1..=8);
            let stages: Vec<_> = (0..horizon).map(|_| random_stage(&mut rng, n, nw)).collect();
            let rec = propagate_covariances(&stages, &DMatrix::zeros(n, n)).unwrap();
            let vect = solve_vectorized(&build_vectorized_system(&stages).unwrap()).unwrap();
            assert!(rec.max_abs_diff(&vect) <= 1e-11);
        }
    }

    #[test]
    fn tighten_examples() {
        let c = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.5]);
        let t = tighten(-0.2, &c, &DMatrix::zeros(3, 3), 0.95, 1.64);
        assert_eq!(t.backoff, 0.0);
        assert_eq!(t.tightened_value(), -0.2);
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25, 4.0]));
        let t = tighten(-0.2, &c, &sigma, 0.95, 2.0);
        assert!((t.backoff - 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let sigma = &g * g.transpose();
        let wall = DVector::from_vec(vec![0.0, -1.0, 0.0]);
        let t = tighten(0.0, &wall, &sigma, 0.9, 1.3);
        let oracle = 1.3 * (wall.transpose() * &sigma * &wall)[(0, 0)].sqrt();
        assert!((t.backoff - oracle).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_stage_data() {
        let mut st = scalar_stage(1.0, 0.1);
        st.gp_cov[0] = -1.0;
        assert!(propagate_covariances(&[st], &DMatrix::zeros(1, 1)).is_err());
        let mut st = scalar_stage(1.0, 0.1);
        st.a_tilde[(0, 0)] = f64::NAN;
        assert!(propagate_covariances(&[st], &DMatrix::zeros(1, 1)).is_err());
        assert!(propagate_covariances(&[], &DMatrix::zeros(1, 1)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn propagated_covariances_are_psd(seed in any::<u64>(), n in 1usize..6, horizon in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stages: Vec<_> = (0..horizon).map(|_| random_stage(&mut rng, n, n)).collect();
            let p = propagate_covariances(&stages, &DMatrix::zeros(n, n)).unwrap();
            for s in &p.sigmas {
                prop_assert_eq!(s.clone(), s.transpose());
                prop_assert!(crate::linalg::min_eigenvalue(s) >= -1e-10);
            }
        }

        #[test]
        fn scaling_noise_never_decreases_backoff(seed in any::<u64>(), s in 1.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let stages: Vec<_> = (0..5).map(|_| random_stage(&mut rng, n, 2)).collect();
            let scaled: Vec<_> = stages.iter().map(|st| StageLinearization {
                gp_cov: &st.gp_cov * s,
                w_cov: &st.w_cov * s,
                ..st.clone()
            }).collect();
            let p1 = propagate_covariances(&stages, &DMatrix::zeros(n, n)).unwrap();
            let p2 = propagate_covariances(&scaled, &DMatrix::zeros(n, n)).unwrap();
            let c = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            for (a, b) in p1.sigmas.iter().zip(&p2.sigmas) {
                let t1 = tighten(0.0, &c, a, 0.95, 1.645);
                let t2 = tighten(0.0, &c, b, 0.95, 1.645);
                prop_assert!(t2.backoff >= t1.backoff * (1.0 - 1e-12));
            }
        }

        #[test]
        fn gaussian_below_chebyshev(p in 0.5001f64..0.9999) {
            prop_assert!(
                tightening_factor(p, TighteningMode::Gaussian).unwrap()
                    < tightening_factor(p, TighteningMode::Chebyshev).unwrap()
            );
        }
    }
}
