//! Exact Gaussian-process regression for the dynamics residual.
//!
//! Each output dimension of the residual is modelled by an independent GP with
//! an ARD squared-exponential kernel
//!
//! ```text
//! k(z, z') = σ_f² exp(-½ Σ_d (z_d - z'_d)² / ℓ_d²)
//! ```
//!
//! All outputs share the training inputs but carry their own hyperparameters,
//! Cholesky factor and weight vector. A model without data evaluates the prior
//! (zero mean, variance σ_f²).

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{invalid, numerical, Error, Result};

/// Hyperparameters of one ARD squared-exponential GP.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelHyperparams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelHyperparams {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        let hp = Self {
            lengthscales,
            signal_variance,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Same lengthscale in every input dimension.
    pub fn isotropic(n_z: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale; n_z], signal_variance, noise_variance)
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Noise variance may be zero (noiseless interpolation); everything else
    /// must be strictly positive.
    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(invalid("kernel needs at least one lengthscale"));
        }
        if self.lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(invalid("lengthscales must be finite and positive"));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(invalid("signal variance must be finite and positive"));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(invalid("noise variance must be finite and non-negative"));
        }
        Ok(())
    }

    fn to_log_params(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        p.push(self.signal_variance.ln());
        p.push(self.noise_variance.ln());
        p
    }

    fn from_log_params(p: &[f64]) -> Self {
        let n = p.len() - 2;
        Self {
            lengthscales: p[..n].iter().map(|v| v.exp()).collect(),
            signal_variance: p[n].exp(),
            noise_variance: p[n + 1].exp(),
        }
    }
}

#[inline]
fn scaled_sq_dist(z1: &[f64], z2: &[f64], lengthscales: &[f64]) -> f64 {
    z1.iter()
        .zip(z2)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum()
}

/// ARD squared-exponential kernel value.
pub fn se_kernel(z1: &[f64], z2: &[f64], hp: &KernelHyperparams) -> Result<f64> {
    if z1.len() != hp.input_dim() || z2.len() != hp.input_dim() {
        return Err(invalid(format!(
            "kernel input dimension mismatch: {} / {} vs {} lengthscales",
            z1.len(),
            z2.len(),
            hp.input_dim()
        )));
    }
    Ok(hp.signal_variance * (-0.5 * scaled_sq_dist(z1, z2, &hp.lengthscales)).exp())
}

/// Training set: one row per sample, inputs `z` and residual targets `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GpDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
}

impl GpDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(invalid(format!(
                "dataset has {} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("dataset contains non-finite entries"));
        }
        Ok(Self { inputs, targets })
    }

    pub fn empty(n_z: usize, n_w: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(0, n_z),
            targets: DMatrix::zeros(0, n_w),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Builds a dataset from row vectors.
    pub fn from_rows(inputs: &[DVector<f64>], targets: &[DVector<f64>], n_z: usize, n_w: usize) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(invalid("input and target row counts differ"));
        }
        let mut zi = DMatrix::zeros(inputs.len(), n_z);
        let mut di = DMatrix::zeros(targets.len(), n_w);
        for (r, (z, d)) in inputs.iter().zip(targets).enumerate() {
            if z.len() != n_z || d.len() != n_w {
                return Err(invalid("dataset row has the wrong dimension"));
            }
            zi.set_row(r, &z.transpose());
            di.set_row(r, &d.transpose());
        }
        Self::new(zi, di)
    }

    /// Appends the rows of `other`.
    pub fn extend(&mut self, other: &GpDataset) -> Result<()> {
        if other.input_dim() != self.input_dim() || other.output_dim() != self.output_dim() {
            return Err(invalid("cannot merge datasets of different dimensions"));
        }
        let n0 = self.len();
        let n = n0 + other.len();
        let mut zi = DMatrix::zeros(n, self.input_dim());
        let mut di = DMatrix::zeros(n, self.output_dim());
        zi.rows_mut(0, n0).copy_from(&self.inputs);
        zi.rows_mut(n0, other.len()).copy_from(&other.inputs);
        di.rows_mut(0, n0).copy_from(&self.targets);
        di.rows_mut(n0, other.len()).copy_from(&other.targets);
        self.inputs = zi;
        self.targets = di;
        Ok(())
    }

    /// Writes the dataset as CSV with header `z_1..z_nz,d_1..d_nw`.
    /// `metadata` lines are emitted first as `# key: value` comments.
    pub fn write_csv<W: Write>(&self, writer: W, metadata: &[(String, String)]) -> Result<()> {
        let mut writer = writer;
        crate::benchmark::write_metadata(&mut writer, metadata)?;
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=self.input_dim())
            .map(|i| format!("z_{i}"))
            .chain((1..=self.output_dim()).map(|i| format!("d_{i}")))
            .collect();
        w.write_record(&header)?;
        for r in 0..self.len() {
            let rec: Vec<String> = self
                .inputs
                .row(r)
                .iter()
                .chain(self.targets.row(r).iter())
                .map(|v| format!("{v:e}"))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut z_cols = Vec::new();
        let mut d_cols = Vec::new();
        for (i, h) in header.iter().enumerate() {
            let h = h.trim();
            if h.starts_with("z_") {
                z_cols.push(i);
            } else if h.starts_with("d_") {
                d_cols.push(i);
            } else {
                return Err(invalid(format!("unexpected dataset column '{h}'")));
            }
        }
        let mut zs = Vec::new();
        let mut ds = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| invalid("short dataset row"))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| invalid(format!("bad number in dataset: {e}")))
            };
            zs.push(DVector::from_iterator(
                z_cols.len(),
                z_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?,
            ));
            ds.push(DVector::from_iterator(
                d_cols.len(),
                d_cols.iter().map(|&i| parse(i)).collect::<Result<Vec<_>>>()?,
            ));
        }
        Self::from_rows(&zs, &ds, z_cols.len(), d_cols.len())
    }

    pub fn save(&self, path: &Path, metadata: &[(String, String)]) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f), metadata)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Factorization data of one output GP.
#[derive(Clone, Debug)]
pub struct GpOutput {
    pub hyperparams: KernelHyperparams,
    /// Lower-triangular factor of `K + (σ_n² + jitter) I`.
    pub chol_factor: DMatrix<f64>,
    /// `α = (K + σ_n² I)⁻¹ y`.
    pub weights: DVector<f64>,
    /// Diagonal jitter that was needed on top of σ_n² (usually 0).
    pub jitter: f64,
}

/// Independent exact GPs sharing one set of training inputs.
#[derive(Clone, Debug)]
pub struct MultiGpModel {
    inputs: DMatrix<f64>,
    outputs: Vec<GpOutput>,
}

/// Posterior moments and, optionally, the mean Jacobian at one input.
#[derive(Clone, Debug)]
pub struct GpPrediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// `n_w × n_z`, present when requested.
    pub mean_jacobian: Option<DMatrix<f64>>,
}

fn gram(inputs: &DMatrix<f64>, hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = inputs.nrows();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| inputs.row(i).iter().cloned().collect()).collect();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.signal_variance;
        for j in 0..i {
            let v = hp.signal_variance * (-0.5 * scaled_sq_dist(&rows[i], &rows[j], &hp.lengthscales)).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Cholesky factor of `k + (noise + jitter) I` following the jitter ladder
/// 1e-8·σ_f², ×10, …, 1e-2·σ_f². No jitter is added for noiseless models.
fn factorize(k: &DMatrix<f64>, hp: &KernelHyperparams) -> Result<(DMatrix<f64>, f64)> {
    let n = k.nrows();
    let mut jitters = vec![0.0];
    if hp.noise_variance > 0.0 {
        let mut j = 1e-8 * hp.signal_variance;
        while j <= 1e-2 * hp.signal_variance * (1.0 + 1e-12) {
            jitters.push(j);
            j *= 10.0;
        }
    }
    let max_diag = hp.signal_variance + hp.noise_variance;
    let mut last_ratio = 0.0;
    for jitter in jitters {
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += hp.noise_variance + jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            let l = ch.unpack();
            let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
            last_ratio = min_pivot / max_diag;
            // Pivots at round-off level mean the matrix is singular in practice.
            if min_pivot > (n as f64) * f64::EPSILON * max_diag {
                return Ok((l, jitter));
            }
        }
    }
    Err(numerical(format!(
        "Gram matrix not positive definite (n = {n}, σ_n² = {:e}, smallest pivot / largest diagonal = {last_ratio:e})",
        hp.noise_variance
    )))
}

fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l.solve_lower_triangular(b).expect("non-singular Cholesky factor");
    l.tr_solve_lower_triangular(&y).expect("non-singular Cholesky factor")
}

impl MultiGpModel {
    /// Conditions one GP per target column on `data`.
    pub fn fit(data: &GpDataset, hyperparams: &[KernelHyperparams]) -> Result<Self> {
        if hyperparams.len() != data.output_dim() {
            return Err(invalid(format!(
                "{} hyperparameter sets for {} outputs",
                hyperparams.len(),
                data.output_dim()
            )));
        }
        for hp in hyperparams {
            hp.validate()?;
            if hp.input_dim() != data.input_dim() {
                return Err(invalid("lengthscale count differs from the dataset input dimension"));
            }
        }
        let mut outputs = Vec::with_capacity(hyperparams.len());
        for (j, hp) in hyperparams.iter().enumerate() {
            if data.is_empty() {
                outputs.push(GpOutput {
                    hyperparams: hp.clone(),
                    chol_factor: DMatrix::zeros(0, 0),
                    weights: DVector::zeros(0),
                    jitter: 0.0,
                });
                continue;
            }
            let k = gram(&data.inputs, hp);
            let (l, jitter) = factorize(&k, hp)?;
            let y = data.targets.column(j).into_owned();
            let weights = chol_solve(&l, &y);
            outputs.push(GpOutput {
                hyperparams: hp.clone(),
                chol_factor: l,
                weights,
                jitter,
            });
        }
        Ok(Self {
            inputs: data.inputs.clone(),
            outputs,
        })
    }

    /// Model without data: evaluates the prior everywhere.
    pub fn prior(hyperparams: Vec<KernelHyperparams>) -> Result<Self> {
        let n_z = hyperparams.first().map(|h| h.input_dim()).unwrap_or(0);
        let n_w = hyperparams.len();
        Self::fit(&GpDataset::empty(n_z, n_w), &hyperparams)
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn num_data(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn outputs(&self) -> &[GpOutput] {
        &self.outputs
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    fn check_input(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.input_dim() {
            return Err(invalid(format!(
                "GP input has dimension {}, model expects {}",
                z.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Posterior mean and variance of every output at `z`. Variances are
    /// clamped at zero.
    pub fn posterior_mean_cov(&self, z: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let p = self.predict(z, false)?;
        Ok((p.mean, p.variance))
    }

    /// Jacobian of the posterior mean with respect to `z` (`n_w × n_z`).
    pub fn posterior_mean_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = self.predict(z, true)?;
        Ok(p.mean_jacobian.expect("requested"))
    }

    /// Variance before clamping; exposed for diagnostics.
    pub fn raw_variance(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_input(z)?;
        let zs = z.as_slice();
        Ok(DVector::from_iterator(
            self.output_dim(),
            self.outputs.iter().map(|out| {
                let kstar = self.kernel_vector(zs, &out.hyperparams);
                self.variance_from(out, &kstar)
            }),
        ))
    }

    /// Mean, clamped variance and optional mean Jacobian, sharing the kernel
    /// evaluations between them.
    pub fn predict(&self, z: &DVector<f64>, with_jacobian: bool) -> Result<GpPrediction> {
        self.check_input(z)?;
        let n_w = self.output_dim();
        let n_z = self.input_dim();
        let zs = z.as_slice();
        let mut mean = DVector::zeros(n_w);
        let mut variance = DVector::zeros(n_w);
        let mut jac = with_jacobian.then(|| DMatrix::zeros(n_w, n_z));
        for (j, out) in self.outputs.iter().enumerate() {
            if self.num_data() == 0 {
                variance[j] = out.hyperparams.signal_variance;
                continue;
            }
            let kstar = self.kernel_vector(zs, &out.hyperparams);
            mean[j] = kstar.dot(&out.weights);
            variance[j] = self.variance_from(out, &kstar).max(0.0);
            if let Some(jac) = jac.as_mut() {
                let ls = &out.hyperparams.lengthscales;
                for m in 0..self.num_data() {
                    let w = out.weights[m] * kstar[m];
                    if w == 0.0 {
                        continue;
                    }
                    for d in 0..n_z {
                        jac[(j, d)] -= w * (zs[d] - self.inputs[(m, d)]) / (ls[d] * ls[d]);
                    }
                }
            }
        }
        Ok(GpPrediction {
            mean,
            variance,
            mean_jacobian: jac,
        })
    }

    fn kernel_vector(&self, z: &[f64], hp: &KernelHyperparams) -> DVector<f64> {
        let n = self.num_data();
        let mut k = DVector::zeros(n);
        let mut row = vec![0.0; self.input_dim()];
        for m in 0..n {
            for (d, r) in row.iter_mut().enumerate() {
                *r = self.inputs[(m, d)];
            }
            k[m] = hp.signal_variance * (-0.5 * scaled_sq_dist(z, &row, &hp.lengthscales)).exp();
        }
        k
    }

    fn variance_from(&self, out: &GpOutput, kstar: &DVector<f64>) -> f64 {
        if self.num_data() == 0 {
            return out.hyperparams.signal_variance;
        }
        let v = out
            .chol_factor
            .solve_lower_triangular(kstar)
            .expect("non-singular Cholesky factor");
        out.hyperparams.signal_variance - v.norm_squared()
    }
}

/// Log marginal likelihood of output `output_index` under `hp`:
/// `-½ yᵀα - Σ log L_ii - (D/2) log 2π`.
pub fn log_marginal_likelihood(data: &GpDataset, hp: &KernelHyperparams, output_index: usize) -> Result<f64> {
    lml_with_gradient(data, hp, output_index, false).map(|(v, _)| v)
}

/// Log marginal likelihood and its gradient with respect to the log
/// hyperparameters `(log ℓ_1, …, log ℓ_nz, log σ_f², log σ_n²)`.
pub fn log_marginal_likelihood_grad(
    data: &GpDataset,
    hp: &KernelHyperparams,
    output_index: usize,
) -> Result<(f64, Vec<f64>)> {
    lml_with_gradient(data, hp, output_index, true)
}

fn lml_with_gradient(
    data: &GpDataset,
    hp: &KernelHyperparams,
    output_index: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    hp.validate()?;
    if output_index >= data.output_dim() {
        return Err(invalid("output index out of range"));
    }
    if hp.input_dim() != data.input_dim() {
        return Err(invalid("lengthscale count differs from the dataset input dimension"));
    }
    let n = data.len();
    if n == 0 {
        return Err(invalid("log marginal likelihood needs at least one sample"));
    }
    let kf = gram(&data.inputs, hp);
    let (l, _) = factorize(&kf, hp)?;
    let y = data.targets.column(output_index).into_owned();
    let alpha = chol_solve(&l, &y);
    let log_det: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let value = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    let chol = Cholesky::<f64, Dyn>::pack_dirty(l);
    let kinv = chol.inverse();
    // W = ααᵀ - K⁻¹; dL/dθ = ½ tr(W dK/dθ)
    let w = &alpha * alpha.transpose() - kinv;
    let n_z = hp.input_dim();
    let mut grad = vec![0.0; n_z + 2];
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            let kij = kf[(i, j)];
            for d in 0..n_z {
                let diff = data.inputs[(i, d)] - data.inputs[(j, d)];
                let ld = hp.lengthscales[d];
                grad[d] += 0.5 * wij * kij * diff * diff / (ld * ld);
            }
            grad[n_z] += 0.5 * wij * kij;
        }
        grad[n_z + 1] += 0.5 * w[(i, i)] * hp.noise_variance;
    }
    Ok((value, grad))
}

/// Gradient ascent on the log hyperparameters of one output with step
/// halving. Returns the improved hyperparameters.
pub fn optimize_hyperparams(
    data: &GpDataset,
    initial: &KernelHyperparams,
    output_index: usize,
    iterations: usize,
) -> Result<KernelHyperparams> {
    if initial.noise_variance <= 0.0 {
        return Err(invalid("hyperparameter ascent needs a positive initial noise variance"));
    }
    let mut theta = initial.to_log_params();
    let (mut value, mut grad) = log_marginal_likelihood_grad(data, initial, output_index)?;
    let mut step = 0.1;
    for _ in 0..iterations {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-10 {
            break;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t + step * g / gnorm).collect();
            let hp = KernelHyperparams::from_log_params(&cand);
            match log_marginal_likelihood_grad(data, &hp, output_index) {
                Ok((v, g)) if v > value => {
                    theta = cand;
                    value = v;
                    grad = g;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                Ok(_) | Err(Error::Numerical(_)) => step *= 0.5,
                Err(e) => return Err(e),
            }
        }
        if !accepted {
            break;
        }
    }
    Ok(KernelHyperparams::from_log_params(&theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, n_z: usize, n_w: usize) -> GpDataset {
        let inputs: DMatrix<f64> = DMatrix::from_fn(n, n_z, |_, _| rng.random_range(-1.0..1.0));
        let targets = DMatrix::from_fn(n, n_w, |r, c| {
            (2.0 * inputs[(r, 0)]).sin() + 0.3 * c as f64 + 0.05 * rng.random_range(-1.0..1.0)
        });
        GpDataset::new(inputs, targets).unwrap()
    }

    fn hps(n_z: usize, n_w: usize) -> Vec<KernelHyperparams> {
        (0..n_w)
            .map(|j| {
                KernelHyperparams::new(
                    (0..n_z).map(|d| 0.4 + 0.1 * d as f64 + 0.05 * j as f64).collect(),
                    1.0 + 0.5 * j as f64,
                    1e-2,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        let hp = KernelHyperparams::new(vec![0.3, 2.0], 2.5, 0.1).unwrap();
        assert_eq!(se_kernel(&[0.7, -1.2], &[0.7, -1.2], &hp).unwrap(), 2.5);
    }

    #[test]
    fn kernel_unit_distance() {
        let hp = KernelHyperparams::new(vec![1.0, 1.0], 1.0, 0.0).unwrap();
        let v = se_kernel(&[1.0, 0.0], &[0.0, 0.0], &hp).unwrap();
        // e^{-1/2}
        assert!((v - 0.606_530_659_712_633_4).abs() < 1e-15);
    }

    #[test]
    fn kernel_decays_monotonically() {
        let hp = KernelHyperparams::new(vec![0.5], 1.0, 0.0).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..50 {
            let v = se_kernel(&[0.0], &[0.1 * i as f64], &hp).unwrap();
            assert!(v < last || i == 0);
            last = v;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let hp = KernelHyperparams::new(vec![1.0, 1.0], 1.0, 0.0).unwrap();
        assert!(matches!(se_kernel(&[1.0], &[0.0, 0.0], &hp), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_point_weights() {
        let data = GpDataset::new(DMatrix::from_element(1, 1, 0.3), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let hp = KernelHyperparams::new(vec![1.0], 1.5, 0.5).unwrap();
        let m = MultiGpModel::fit(&data, &[hp]).unwrap();
        assert!((m.outputs()[0].weights[0] - 2.0 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn fit_residual_and_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = random_dataset(&mut rng, 20, 3, 2);
        let hps = hps(3, 2);
        let model = MultiGpModel::fit(&data, &hps).unwrap();
        for (j, out) in model.outputs().iter().enumerate() {
            let mut k = gram(&data.inputs, &hps[j]);
            let knorm = k.amax();
            for i in 0..20 {
                k[(i, i)] += hps[j].noise_variance + out.jitter;
            }
            let l = &out.chol_factor;
            assert!((l * l.transpose() - &k).amax() <= 1e-10 * knorm);
            let res = &k * &out.weights - data.targets.column(j);
            assert!(res.amax() <= 1e-9, "residual {}", res.amax());
            assert!((0..20).all(|i| l[(i, i)] > 0.0));
        }
    }

    #[test]
    fn duplicated_noiseless_inputs_fail() {
        let inputs = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, 0.5, 0.5]);
        let targets = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let data = GpDataset::new(inputs, targets).unwrap();
        let hp = KernelHyperparams::new(vec![1.0, 1.0], 1.0, 0.0).unwrap();
        assert!(matches!(MultiGpModel::fit(&data, &[hp]), Err(Error::Numerical(_))));
    }

    #[test]
    fn prior_moments() {
        let model = MultiGpModel::prior(hps(2, 3)).unwrap();
        let (m, v) = model.posterior_mean_cov(&DVector::from_vec(vec![0.3, -4.0])).unwrap();
        assert_eq!(m, DVector::zeros(3));
        assert_eq!(v, DVector::from_vec(vec![1.0, 1.5, 2.0]));
        let j = model.posterior_mean_jacobian(&DVector::from_vec(vec![0.3, -4.0])).unwrap();
        assert_eq!(j, DMatrix::zeros(3, 2));
    }

    #[test]
    fn noiseless_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_dataset(&mut rng, 8, 2, 1);
        let hp = KernelHyperparams::new(vec![0.5, 0.5], 1.0, 1e-10).unwrap();
        let model = MultiGpModel::fit(&data, &[hp]).unwrap();
        for r in 0..8 {
            let z = data.inputs.row(r).transpose();
            let (m, v) = model.posterior_mean_cov(&z).unwrap();
            assert!((m[0] - data.targets[(r, 0)]).abs() < 1e-6);
            assert!(v[0] < 1e-8);
        }
    }

    #[test]
    fn moments_match_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = random_dataset(&mut rng, 25, 2, 2);
        let hps = hps(2, 2);
        let model = MultiGpModel::fit(&data, &hps).unwrap();
        for _ in 0..20 {
            let z = DVector::from_fn(2, |_, _| rng.random_range(-1.2..1.2));
            let (m, v) = model.posterior_mean_cov(&z).unwrap();
            for j in 0..2 {
                let mut k = gram(&data.inputs, &hps[j]);
                for i in 0..25 {
                    k[(i, i)] += hps[j].noise_variance;
                }
                let kinv = k.try_inverse().unwrap();
                let ks = DVector::from_fn(25, |i, _| {
                    se_kernel(z.as_slice(), data.inputs.row(i).transpose().as_slice(), &hps[j]).unwrap()
                });
                let mean = (ks.transpose() * &kinv * data.targets.column(j))[0];
                let var = hps[j].signal_variance - (ks.transpose() * &kinv * &ks)[0];
                assert!((m[j] - mean).abs() < 1e-9);
                assert!((v[j] - var.max(0.0)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn jacobian_zero_at_single_training_point() {
        let data = GpDataset::new(DMatrix::from_row_slice(1, 2, &[0.2, -0.1]), DMatrix::from_element(1, 1, 1.3))
            .unwrap();
        let hp = KernelHyperparams::new(vec![0.7, 0.3], 1.0, 0.01).unwrap();
        let model = MultiGpModel::fit(&data, &[hp]).unwrap();
        let j = model.posterior_mean_jacobian(&DVector::from_vec(vec![0.2, -0.1])).unwrap();
        assert_eq!(j.amax(), 0.0);
    }

    #[test]
    fn evaluation_is_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_dataset(&mut rng, 15, 2, 2);
        let model = MultiGpModel::fit(&data, &hps(2, 2)).unwrap();
        let z = DVector::from_vec(vec![0.11, -0.42]);
        let a = model.predict(&z, true).unwrap();
        let b = model.predict(&z, true).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
        assert_eq!(a.mean_jacobian, b.mean_jacobian);
    }

    #[test]
    fn lml_single_zero_target() {
        let data = GpDataset::new(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 0.0)).unwrap();
        let hp = KernelHyperparams::new(vec![1.0], 2.0, 0.25).unwrap();
        let v = log_marginal_likelihood(&data, &hp, 0).unwrap();
        let l11 = (2.25f64).sqrt();
        assert!((v - (-l11.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-14);
    }

    #[test]
    fn lml_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = random_dataset(&mut rng, 15, 2, 1);
        let hp = KernelHyperparams::new(vec![0.6, 0.9], 0.8, 0.05).unwrap();
        let (_, grad) = log_marginal_likelihood_grad(&data, &hp, 0).unwrap();
        let theta = hp.to_log_params();
        for k in 0..theta.len() {
            let h = 1e-5;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += h;
            tm[k] -= h;
            let fp = log_marginal_likelihood(&data, &KernelHyperparams::from_log_params(&tp), 0).unwrap();
            let fm = log_marginal_likelihood(&data, &KernelHyperparams::from_log_params(&tm), 0).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * fd.abs().max(1e-3), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn lml_increases_with_noise_up_to_sample_variance() {
        // Pure noise data with a tiny lengthscale: the Gram matrix is ≈ (σ_f² + σ_n²) I,
        // so the likelihood peaks where the total variance equals the sample variance.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let inputs = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let targets = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let data = GpDataset::new(inputs, targets.clone()).unwrap();
        let s2 = targets.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let sf2 = 1e-3;
        let scan: Vec<f64> = (1..=20).map(|i| (s2 - sf2) * i as f64 / 20.0).collect();
        let vals: Vec<f64> = scan
            .iter()
            .map(|&sn2| log_marginal_likelihood(&data, &KernelHyperparams::new(vec![1e-3], sf2, sn2).unwrap(), 0).unwrap())
            .collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn hyperparameter_ascent_improves_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = random_dataset(&mut rng, 30, 1, 1);
        let init = KernelHyperparams::new(vec![3.0], 0.1, 0.5).unwrap();
        let v0 = log_marginal_likelihood(&data, &init, 0).unwrap();
        let opt = optimize_hyperparams(&data, &init, 0, 200).unwrap();
        let v1 = log_marginal_likelihood(&data, &opt, 0).unwrap();
        assert!(v1 > v0 + 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_dataset(&mut rng, 5, 2, 3);
        let mut buf = Vec::new();
        data.write_csv(&mut buf, &[("seed".into(), "1".into())]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed: 1\nz_1,z_2,d_1,d_2,d_3\n"));
        let back = GpDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn dataset_rejects_mismatch_and_nan() {
        assert!(GpDataset::new(DMatrix::zeros(2, 1), DMatrix::zeros(3, 1)).is_err());
        assert!(GpDataset::new(DMatrix::from_element(1, 1, f64::NAN), DMatrix::zeros(1, 1)).is_err());
    }
}
