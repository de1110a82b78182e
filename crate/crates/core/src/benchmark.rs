//! Hanging-chain experiments: OCP construction, training-data generation,
//! closed-loop simulation and the scaling and timing-profile sweeps.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dynamics::{resting_state, ChainConfig, ChainOde, DiscreteDynamics, DiscreteModel, IrkSettings};
use crate::error::{invalid, Error, Result};
use crate::gp::{GpDataset, KernelHyperparams, MultiGpModel};
use crate::sqp::{
    naive_iteration, solve, zero_order_iteration, ChanceConstraint, FeatureMap, InputBounds, Iterate, LinearConstraint,
    OcpSpec, SolverMode, SolverOptions, SolverStats, TrackingCost,
};
use crate::uncertainty::TighteningMode;

/// OCP parameters shared by all chain experiments.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainOcpOptions {
    pub horizon: usize,
    /// Probability of each wall constraint.
    pub prob: f64,
    pub tightening: TighteningMode,
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
    /// `|u_i| ≤ u_max`.
    pub u_max: f64,
    /// Diagonal entry of `Σ^w`.
    pub w_var: f64,
    pub irk: IrkSettings,
}

impl Default for ChainOcpOptions {
    fn default() -> Self {
        Self {
            horizon: 20,
            prob: 0.95,
            tightening: TighteningMode::Gaussian,
            q_pos: 1.0,
            q_vel: 0.1,
            r: 0.1,
            u_max: 1.0,
            w_var: 1e-6,
            irk: IrkSettings::default(),
        }
    }
}

/// Hyperparameters shared by every GP output of the chain residual model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainGpOptions {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for ChainGpOptions {
    fn default() -> Self {
        Self {
            lengthscale: 0.3,
            signal_variance: 1e-3,
            noise_variance: 1e-5,
        }
    }
}

impl ChainGpOptions {
    pub fn hyperparams(&self, n_z: usize, n_w: usize) -> Result<Vec<KernelHyperparams>> {
        let hp = KernelHyperparams::isotropic(n_z, self.lengthscale, self.signal_variance, self.noise_variance)?;
        Ok(vec![hp; n_w])
    }
}

/// GP inputs: the x-position and x-velocity of every free mass.
pub fn chain_features(cfg: &ChainConfig) -> FeatureMap {
    let lay = cfg.layout();
    let mut indices = Vec::with_capacity(2 * lay.n_free());
    for i in 0..lay.n_free() {
        indices.push(lay.pos(i));
        indices.push(lay.vel(i));
    }
    FeatureMap { indices }
}

pub fn nominal_model(cfg: &ChainConfig, irk: IrkSettings) -> Result<DiscreteModel<ChainOde>> {
    DiscreteModel::new(ChainOde::nominal(cfg.clone())?, cfg.ts, irk)
}

pub fn plant_model(cfg: &ChainConfig, irk: IrkSettings) -> Result<DiscreteModel<ChainOde>> {
    DiscreteModel::new(ChainOde::plant(cfg.clone())?, cfg.ts, irk)
}

/// Fits the residual GP on `data`, or the data-free prior when `data` is empty.
pub fn fit_chain_gp(cfg: &ChainConfig, data: &GpDataset, gp: &ChainGpOptions) -> Result<MultiGpModel> {
    let lay = cfg.layout();
    let n_z = chain_features(cfg).dim();
    if data.input_dim() != n_z || data.output_dim() != lay.n_w() {
        return Err(invalid(format!(
            "dataset has {}→{} columns, the chain with {} masses needs {}→{}",
            data.input_dim(),
            data.output_dim(),
            cfg.n_mass,
            n_z,
            lay.n_w()
        )));
    }
    MultiGpModel::fit(data, &gp.hyperparams(n_z, lay.n_w())?)
}

/// Wall constraints `y_wall − p_y ≤ 0` on the controlled end and every free mass.
pub fn wall_constraints(cfg: &ChainConfig) -> Vec<LinearConstraint> {
    let lay = cfg.layout();
    let mut rows = vec![lay.controlled_pos() + 1];
    rows.extend((0..lay.n_free()).map(|i| lay.pos(i) + 1));
    rows.into_iter()
        .map(|r| {
            let mut c_x = DVector::zeros(lay.n_x());
            c_x[r] = -1.0;
            LinearConstraint {
                c_x,
                c_u: DVector::zeros(lay.n_u()),
                offset: cfg.y_wall,
            }
        })
        .collect()
}

/// Smallest `p_y − y_wall` over the controlled end and free masses.
pub fn wall_margin(cfg: &ChainConfig, x: &DVector<f64>) -> f64 {
    wall_constraints(cfg)
        .iter()
        .map(|c| -(c.c_x.dot(x) + c.offset))
        .fold(f64::INFINITY, f64::min)
}

/// Tracking OCP that steers the chain back to rest, starting at the resting state.
pub fn build_chain_ocp(cfg: &ChainConfig, opts: &ChainOcpOptions, gp: Option<Arc<MultiGpModel>>) -> Result<OcpSpec> {
    cfg.validate()?;
    let lay = cfg.layout();
    let (nx, nu) = (lay.n_x(), lay.n_u());
    let x_rest = resting_state(cfg)?;
    let mut qd = DVector::from_element(nx, opts.q_pos);
    qd.rows_mut(lay.vel(0), 3 * lay.n_free()).fill(opts.q_vel);
    let q = DMatrix::from_diagonal(&qd);
    let constraints = wall_constraints(cfg)
        .into_iter()
        .map(|h| ChanceConstraint {
            h: Arc::new(h),
            prob: opts.prob,
            mode: opts.tightening,
        })
        .collect();
    let spec = OcpSpec {
        horizon: opts.horizon,
        dynamics: Arc::new(nominal_model(cfg, opts.irk)?),
        gp,
        features: chain_features(cfg),
        b_mat: lay.noise_matrix(),
        w_cov: DVector::from_element(lay.n_w(), opts.w_var),
        cost: TrackingCost {
            q: q.clone(),
            r: DMatrix::identity(nu, nu) * opts.r,
            q_n: q,
            x_ref: x_rest.clone(),
            u_ref: DVector::zeros(nu),
        },
        constraints,
        input_bounds: Some(InputBounds {
            lower: DVector::from_element(nu, -opts.u_max),
            upper: DVector::from_element(nu, opts.u_max),
        }),
        x_current: x_rest,
    };
    spec.validate()?;
    Ok(spec)
}

/// Open-loop excitation: `u = (1, 1, 1)` for one second.
pub fn excitation(cfg: &ChainConfig) -> Vec<DVector<f64>> {
    let steps = (1.0 / cfg.ts).round().max(1.0) as usize;
    vec![DVector::from_element(3, 1.0); steps]
}

/// Applies `inputs` to `model` from `x`.
pub fn simulate(model: &dyn DiscreteDynamics, x: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
    let mut x = x.clone();
    for u in inputs {
        x = model.step(&x, u)?;
    }
    Ok(x)
}

/// Resting state driven by [`excitation`] through the true plant.
pub fn excited_state(cfg: &ChainConfig, irk: IrkSettings) -> Result<DVector<f64>> {
    simulate(&plant_model(cfg, irk)?, &resting_state(cfg)?, &excitation(cfg))
}

/// Training-data protocol.
#[derive(Clone, Debug)]
pub struct DataGenOptions {
    /// Number of perturbed initial conditions.
    pub n_x0: usize,
    pub steps_per_start: usize,
    /// Std of the Gaussian perturbation of the free-mass positions, m.
    pub perturb_std: f64,
    /// Std of additive plant noise on the `B` channel; 0 disables it.
    pub plant_noise: f64,
    pub ocp: ChainOcpOptions,
    pub solver: SolverOptions,
}

impl Default for DataGenOptions {
    fn default() -> Self {
        Self {
            n_x0: 10,
            steps_per_start: 15,
            perturb_std: 0.01,
            plant_noise: 0.0,
            ocp: ChainOcpOptions::default(),
            solver: SolverOptions::with_mode(SolverMode::Nominal),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataGenReport {
    pub starts_ok: usize,
    /// `(start index, message)` for each discarded start.
    pub skipped: Vec<(usize, String)>,
}

fn plant_step(
    plant: &dyn DiscreteDynamics,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>,
) -> Result<DVector<f64>> {
    let mut next = plant.step(x, u)?;
    if let Some((dist, rng)) = noise {
        let w = DVector::from_fn(b.ncols(), |_, _| dist.sample(rng));
        next += b * w;
    }
    Ok(next)
}

/// Records residuals of the nominal model along closed-loop nominal MPC runs
/// from perturbed initial conditions. A start whose solver fails is dropped
/// as a whole, so the row count is `steps_per_start` times the successful starts.
pub fn generate_training_data(cfg: &ChainConfig, opts: &DataGenOptions, seed: u64) -> Result<(GpDataset, DataGenReport)> {
    cfg.validate()?;
    if !(opts.perturb_std >= 0.0 && opts.plant_noise >= 0.0) {
        return Err(invalid("noise levels must be non-negative"));
    }
    let lay = cfg.layout();
    let features = chain_features(cfg);
    let mut spec = build_chain_ocp(cfg, &opts.ocp, None)?;
    let plant = plant_model(cfg, opts.ocp.irk)?;
    let nominal = nominal_model(cfg, opts.ocp.irk)?;
    let x_exc = simulate(&plant, &spec.x_current, &excitation(cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perturb = Normal::new(0.0, opts.perturb_std.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let pnoise = Normal::new(0.0, opts.plant_noise.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let mut data = GpDataset::empty(features.dim(), lay.n_w());
    let mut report = DataGenReport::default();
    let bt = spec.b_mat.transpose();
    for start in 0..opts.n_x0 {
        let mut x = x_exc.clone();
        for i in 0..3 * lay.n_free() {
            if opts.perturb_std > 0.0 {
                x[lay.pos(0) + i] += perturb.sample(&mut rng);
            }
        }
        let mut inputs = Vec::with_capacity(opts.steps_per_start);
        let mut targets = Vec::with_capacity(opts.steps_per_start);
        let mut guess: Option<Iterate> = None;
        let run: Result<()> = (|| {
            for _ in 0..opts.steps_per_start {
                spec.x_current = x.clone();
                let init = match &guess {
                    Some(g) => g.shifted(&spec)?,
                    None => Iterate::initial(&spec)?,
                };
                let (sol, _) = solve(&spec, &init, &opts.solver)?;
                let u = sol.u[0].clone();
                let noise = (opts.plant_noise > 0.0).then_some((&pnoise, &mut rng));
                let next = plant_step(&plant, &spec.b_mat, &x, &u, noise)?;
                let psi = nominal.step(&x, &u)?;
                inputs.push(features.apply(&x, &u));
                targets.push(&bt * (&next - psi));
                x = next;
                guess = Some(sol);
            }
            Ok(())
        })();
        match run {
            Ok(()) => {
                data.extend(&GpDataset::from_rows(&inputs, &targets, features.dim(), lay.n_w())?)?;
                report.starts_ok += 1;
            }
            Err(e) => report.skipped.push((start, e.to_string())),
        }
    }
    Ok((data, report))
}

#[derive(Clone, Debug)]
pub struct ClosedLoopOptions {
    pub steps: usize,
    pub ocp: ChainOcpOptions,
    pub solver: SolverOptions,
    pub plant_noise: f64,
}

impl Default for ClosedLoopOptions {
    fn default() -> Self {
        Self {
            steps: 60,
            ocp: ChainOcpOptions::default(),
            solver: SolverOptions::default(),
            plant_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StepLog {
    pub k: usize,
    pub input: DVector<f64>,
    /// Measured state after applying `input`.
    pub state: DVector<f64>,
    pub sqp_iterations: usize,
    pub converged: bool,
    pub solve_seconds: f64,
    /// Wall margin of `state`.
    pub margin: f64,
    /// Solver error, when the previous input was reapplied.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ClosedLoopLog {
    pub mode: Option<SolverMode>,
    pub initial_state: DVector<f64>,
    pub steps: Vec<StepLog>,
    pub min_margin: f64,
    pub violations: usize,
}

impl ClosedLoopLog {
    pub fn final_state(&self) -> &DVector<f64> {
        self.steps.last().map_or(&self.initial_state, |s| &s.state)
    }

    pub fn failures(&self) -> usize {
        self.steps.iter().filter(|s| s.failure.is_some()).count()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let nx = self.initial_state.len();
        let nu = self.steps.first().map_or(0, |s| s.input.len());
        let mut header = vec!["k".to_string(), "sqp_iterations".into(), "converged".into(), "solve_seconds".into()];
        header.push("margin".into());
        header.extend((0..nu).map(|i| format!("u{i}")));
        header.extend((0..nx).map(|i| format!("x{i}")));
        header.push("failure".into());
        out.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.k.to_string(),
                s.sqp_iterations.to_string(),
                s.converged.to_string(),
                format!("{:e}", s.solve_seconds),
                format!("{:e}", s.margin),
            ];
            row.extend(s.input.iter().map(|v| format!("{v:e}")));
            row.extend(s.state.iter().map(|v| format!("{v:e}")));
            row.push(s.failure.clone().unwrap_or_default());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Excites the true plant, then closes the loop with the solver in
/// `opts.solver.mode`. A failed solve reapplies the previous input.
pub fn run_closed_loop(
    cfg: &ChainConfig,
    opts: &ClosedLoopOptions,
    gp: Option<Arc<MultiGpModel>>,
    seed: u64,
) -> Result<ClosedLoopLog> {
    let mut spec = build_chain_ocp(cfg, &opts.ocp, gp)?;
    let plant = plant_model(cfg, opts.ocp.irk)?;
    let mut x = simulate(&plant, &spec.x_current, &excitation(cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pnoise = Normal::new(0.0, opts.plant_noise.max(f64::MIN_POSITIVE)).map_err(|e| invalid(e.to_string()))?;
    let mut log = ClosedLoopLog {
        mode: Some(opts.solver.mode),
        initial_state: x.clone(),
        min_margin: wall_margin(cfg, &x),
        ..ClosedLoopLog::default()
    };
    let mut guess: Option<Iterate> = None;
    let mut last_u = DVector::zeros(3);
    for k in 0..opts.steps {
        spec.x_current = x.clone();
        let t = Instant::now();
        let attempt = (|| {
            let init = match &guess {
                Some(g) => g.shifted(&spec)?,
                None => Iterate::initial(&spec)?,
            };
            solve(&spec, &init, &opts.solver)
        })();
        let seconds = t.elapsed().as_secs_f64();
        let (u, iters, converged, failure) = match attempt {
            Ok((sol, stats)) => {
                let u = sol.u[0].clone();
                guess = Some(sol);
                (u, stats.iterations(), stats.converged, None)
            }
            Err(e) => {
                guess = None;
                (last_u.clone(), 0, false, Some(e.to_string()))
            }
        };
        let noise = (opts.plant_noise > 0.0).then_some((&pnoise, &mut rng));
        x = plant_step(&plant, &spec.b_mat, &x, &u, noise)?;
        let margin = wall_margin(cfg, &x);
        log.min_margin = log.min_margin.min(margin);
        if margin < 0.0 {
            log.violations += 1;
        }
        log.steps.push(StepLog {
            k,
            input: u.clone(),
            state: x.clone(),
            sqp_iterations: iters,
            converged,
            solve_seconds: seconds,
            margin,
            failure,
        });
        last_u = u;
    }
    Ok(log)
}

/// One row of the scaling table.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub n_mass: usize,
    pub n_x: usize,
    pub mode: SolverMode,
    pub data_size: usize,
    pub workers: usize,
    /// Median seconds per SQP iteration; `None` when timed out.
    pub median_seconds: Option<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct ScalingOptions {
    pub n_masses: Vec<usize>,
    pub modes: Vec<SolverMode>,
    pub ocp: ChainOcpOptions,
    pub gp: ChainGpOptions,
    /// Residual dataset per chain size; `None` uses the data-free GP.
    pub data: Vec<Option<GpDataset>>,
    pub workers: usize,
    pub warmup: usize,
    pub iterations: usize,
    /// A mode whose first iteration exceeds this is skipped for larger sizes.
    pub budget_seconds: f64,
}

impl Default for ScalingOptions {
    fn default() -> Self {
        Self {
            n_masses: (3..=7).collect(),
            modes: vec![SolverMode::ZeroOrder, SolverMode::Naive],
            ocp: ChainOcpOptions {
                horizon: 10,
                ..ChainOcpOptions::default()
            },
            gp: ChainGpOptions::default(),
            data: Vec::new(),
            workers: 0,
            warmup: 3,
            iterations: 20,
            budget_seconds: 60.0,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Chain OCP started at the excited state, with a GP on `data`.
pub fn excited_chain_ocp(
    cfg: &ChainConfig,
    ocp: &ChainOcpOptions,
    gp: &ChainGpOptions,
    data: Option<&GpDataset>,
) -> Result<OcpSpec> {
    let empty = GpDataset::empty(chain_features(cfg).dim(), cfg.layout().n_w());
    let model = fit_chain_gp(cfg, data.unwrap_or(&empty), gp)?;
    let mut spec = build_chain_ocp(cfg, ocp, Some(Arc::new(model)))?;
    spec.x_current = excited_state(cfg, ocp.irk)?;
    Ok(spec)
}

/// Runs SQP iterations of `mode` one at a time, returning the per-iteration
/// records after `warmup`. Stops early when the first iteration exceeds `budget`.
pub fn time_iterations(
    spec: &OcpSpec,
    mode: SolverMode,
    opts: &SolverOptions,
    warmup: usize,
    iterations: usize,
    budget: f64,
) -> Result<Option<SolverStats>> {
    let opts = SolverOptions { mode, ..opts.clone() };
    let mut it = Iterate::initial(spec)?;
    let mut stats = SolverStats::new(mode);
    let start = Instant::now();
    for i in 0..warmup + iterations {
        let (next, rec) = match mode {
            SolverMode::Naive => naive_iteration(spec, &it, &opts)?,
            _ => zero_order_iteration(spec, &it, &opts)?,
        };
        if i == 0 && rec.total > budget {
            return Ok(None);
        }
        it = next;
        if i >= warmup {
            stats.records.push(rec);
        }
    }
    stats.total_seconds = start.elapsed().as_secs_f64();
    Ok(Some(stats))
}

pub fn run_scaling_experiment(cfg: &ChainConfig, opts: &ScalingOptions) -> Result<Vec<ScalingRow>> {
    if opts.n_masses.is_empty() || opts.modes.is_empty() {
        return Err(invalid("scaling sweep needs at least one chain size and one mode"));
    }
    let mut rows = Vec::new();
    let mut timed_out = vec![false; opts.modes.len()];
    let solver = SolverOptions {
        workers: opts.workers,
        ..SolverOptions::default()
    };
    for (idx, &n_mass) in opts.n_masses.iter().enumerate() {
        let c = ChainConfig { n_mass, ..cfg.clone() };
        let data = opts.data.get(idx).and_then(|d| d.as_ref());
        let spec = excited_chain_ocp(&c, &opts.ocp, &opts.gp, data)?;
        for (m, &mode) in opts.modes.iter().enumerate() {
            let mut row = ScalingRow {
                n_mass,
                n_x: spec.n_x(),
                mode,
                data_size: spec.gp_data_size(),
                workers: opts.workers,
                median_seconds: None,
                iterations: 0,
            };
            if !timed_out[m] {
                if mode == SolverMode::Naive && spec.gp_data_size() > 0 {
                    return Err(Error::Unsupported("naive mode in the scaling sweep needs D = 0".into()));
                }
                match time_iterations(&spec, mode, &solver, opts.warmup, opts.iterations, opts.budget_seconds)? {
                    Some(stats) => {
                        let times: Vec<f64> = stats.records.iter().map(|r| r.total).collect();
                        row.median_seconds = Some(median(&times));
                        row.iterations = times.len();
                    }
                    None => timed_out[m] = true,
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_scaling_csv<W: Write>(w: W, rows: &[ScalingRow], metadata: &[(String, String)]) -> Result<()> {
    let mut w = w;
    write_metadata(&mut w, metadata)?;
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n_mass", "n_x", "mode", "data_size", "workers", "median_seconds", "iterations", "timed_out"])?;
    for r in rows {
        out.write_record([
            r.n_mass.to_string(),
            r.n_x.to_string(),
            r.mode.to_string(),
            r.data_size.to_string(),
            r.workers.to_string(),
            r.median_seconds.map(|s| format!("{s:e}")).unwrap_or_default(),
            r.iterations.to_string(),
            r.median_seconds.is_none().to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(invalid("log-log fit needs at least two positive points"));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    if den == 0.0 {
        return Err(invalid("log-log fit needs distinct abscissae"));
    }
    Ok(num / den)
}

pub const CATEGORIES: [&str; 5] = ["integrator", "gp_eval", "prop_tight", "qp_solve", "interface"];

/// One row of the profile table.
#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub data_size: usize,
    pub workers: usize,
    pub iterations: usize,
    /// Seconds per category, summed over the timed iterations.
    pub seconds: [f64; 5],
    pub total_seconds: f64,
}

impl ProfileRow {
    /// Share of each category in the total iteration time.
    pub fn shares(&self) -> [f64; 5] {
        let mut s = self.seconds;
        for v in &mut s {
            *v /= self.total_seconds.max(f64::MIN_POSITIVE);
        }
        s
    }

    pub fn largest(&self) -> &'static str {
        let i = (0..5).max_by(|&a, &b| self.seconds[a].total_cmp(&self.seconds[b])).unwrap_or(0);
        CATEGORIES[i]
    }
}

#[derive(Clone, Debug)]
pub struct ProfileOptions {
    pub ocp: ChainOcpOptions,
    pub gp: ChainGpOptions,
    /// Datasets to profile; an empty dataset gives the D = 0 row.
    pub datasets: Vec<GpDataset>,
    pub workers: Vec<usize>,
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self {
            ocp: ChainOcpOptions::default(),
            gp: ChainGpOptions::default(),
            datasets: Vec::new(),
            workers: vec![1],
            warmup: 2,
            iterations: 10,
        }
    }
}

/// Zero-order timing profile per dataset and worker count.
pub fn run_profile_experiment(cfg: &ChainConfig, opts: &ProfileOptions) -> Result<Vec<ProfileRow>> {
    if opts.datasets.is_empty() || opts.workers.is_empty() {
        return Err(invalid("profile needs at least one dataset and one worker count"));
    }
    let mut rows = Vec::new();
    for data in &opts.datasets {
        let spec = excited_chain_ocp(cfg, &opts.ocp, &opts.gp, Some(data))?;
        for &workers in &opts.workers {
            let solver = SolverOptions {
                workers,
                ..SolverOptions::default()
            };
            let stats = time_iterations(&spec, SolverMode::ZeroOrder, &solver, opts.warmup, opts.iterations, f64::INFINITY)?
                .expect("no budget");
            rows.push(ProfileRow {
                data_size: data.len(),
                workers,
                iterations: stats.iterations(),
                seconds: stats.totals(),
                total_seconds: stats.records.iter().map(|r| r.total).sum(),
            });
        }
    }
    Ok(rows)
}

pub fn write_profile_csv<W: Write>(w: W, rows: &[ProfileRow], metadata: &[(String, String)]) -> Result<()> {
    let mut w = w;
    write_metadata(&mut w, metadata)?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["data_size".to_string(), "workers".into(), "iterations".into(), "total_seconds".into()];
    header.extend(CATEGORIES.iter().map(|c| format!("{c}_share")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.data_size.to_string(),
            r.workers.to_string(),
            r.iterations.to_string(),
            format!("{:e}", r.total_seconds),
        ];
        rec.extend(r.shares().iter().map(|s| format!("{s:.6}")));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// `# key: value` lines ahead of a CSV header.
pub fn write_metadata<W: Write>(w: &mut W, metadata: &[(String, String)]) -> Result<()> {
    for (k, v) in metadata {
        writeln!(w, "# {k}: {v}")?;
    }
    Ok(())
}
