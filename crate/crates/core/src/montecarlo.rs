//! Ensembles, moment estimation `E[sup_t X(t)^r]` with bootstrap intervals,
//! and Monte Carlo checks of the stochastic-analysis toolbox (BDG brackets,
//! Kolmogorov-Chentsov exponents, the Itô product rule, Euler-Maruyama order).
//!
//! Everything here is concrete in `f64`. Paths are the unit of parallelism;
//! reductions run sequentially in path order, so results do not depend on the
//! number of worker threads.

use crate::error::{Error, Result};
use crate::functionals::BalanceSelection;
use crate::io::float_repr;
use crate::noise::{keyed_normals, splitmix64, ModeEntry, ModeShape, NoiseConfig, NoiseFamily, NoiseModel, WienerIncrement};
use crate::scheme::{momentum_step, run_path, window_increments, DiagnosticTrace, RunOptions};
use crate::spectral::{SpectralField, TorusGrid};
use crate::state::{FluidState, RegularizationParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Runs `f` on a dedicated pool of `workers` threads (global pool if `None`).
pub fn with_workers<R: Send>(workers: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config("workers", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

// ---------------------------------------------------------------------------
// statistics helpers

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Percentile bootstrap interval for `stat` evaluated on resampled index sets.
fn bootstrap(n: usize, resamples: usize, confidence: f64, seed: u64, stat: impl Fn(&[usize]) -> f64) -> (f64, f64) {
    if n < 2 || resamples == 0 {
        let all: Vec<usize> = (0..n).collect();
        let v = stat(&all);
        return (v, v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut vals: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .filter(|v| v.is_finite())
        .collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let tail = 0.5 * (1.0 - confidence);
    (quantile(&vals, tail), quantile(&vals, 1.0 - tail))
}

fn mean_over(xs: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
}

/// Ordinary least squares `y ≈ a + b x`; returns `(a, b)`.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

// ---------------------------------------------------------------------------
// ensembles

/// Ensemble settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_paths: usize,
    pub seed_root: u64,
    /// Moment orders `r`; the estimates are meaningful for `r > 2`.
    pub orders: Vec<f64>,
    pub horizon: f64,
    /// Record every this many windows.
    pub cadence: usize,
    /// Worker threads (`None`: all available). Never affects results.
    pub workers: Option<usize>,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
    /// Fraction of failed paths above which the ensemble is unreliable.
    pub max_failure_fraction: f64,
    pub balances: BalanceSelection,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_paths: 64,
            seed_root: 0,
            orders: vec![2.5, 3.0, 4.0],
            horizon: 0.1,
            cadence: 1,
            workers: None,
            bootstrap_resamples: 1000,
            confidence: 0.99,
            max_failure_fraction: 0.1,
            balances: BalanceSelection::none(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::config("ensemble.n_paths", "must be >= 1"));
        }
        if self.orders.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(Error::config("ensemble.orders", "moment orders must be finite and > 0"));
        }
        if !self.horizon.is_finite() || self.horizon < 0.0 {
            return Err(Error::config("ensemble.horizon", "must be finite and >= 0"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config("ensemble.confidence", "must lie in (0, 1)"));
        }
        if self.workers == Some(0) {
            return Err(Error::config("ensemble.workers", "must be >= 1"));
        }
        Ok(())
    }
}

/// Estimate of `E[sup_t X(t)^r]` for one functional and order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub functional: String,
    pub order: f64,
    #[serde(with = "float_repr")]
    pub estimate: f64,
    #[serde(with = "float_repr")]
    pub std_error: f64,
    #[serde(with = "float_repr")]
    pub ci_low: f64,
    #[serde(with = "float_repr")]
    pub ci_high: f64,
}

/// Empirical constant `Ĉ = E[sup X^r] / (E[X₀^r] + 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConstant {
    pub functional: String,
    pub order: f64,
    #[serde(with = "float_repr")]
    pub c_hat: f64,
    #[serde(with = "float_repr")]
    pub ci_low: f64,
    #[serde(with = "float_repr")]
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub n_paths: usize,
    pub n_used: usize,
    pub failed_paths: Vec<u64>,
    pub unreliable: bool,
    pub confidence: f64,
    pub moments: Vec<MomentEstimate>,
    pub constants: Vec<BoundConstant>,
}

impl MomentReport {
    pub fn moment(&self, functional: &str, order: f64) -> Option<&MomentEstimate> {
        self.moments.iter().find(|m| m.functional == functional && m.order == order)
    }

    pub fn constant(&self, functional: &str, order: f64) -> Option<&BoundConstant> {
        self.constants.iter().find(|m| m.functional == functional && m.order == order)
    }
}

/// Report plus the per-path traces (in path order).
#[derive(Clone, Debug)]
pub struct EnsembleResult {
    pub report: MomentReport,
    pub traces: Vec<DiagnosticTrace>,
    pub final_states: Vec<FluidState<f64>>,
}

/// Functionals tracked by the moment report, with their trace accessors.
pub const TRACKED: [(&str, fn(&crate::scheme::TraceRow) -> f64); 3] = [
    ("energy", |r| r.energy),
    ("bd_entropy", |r| r.bd_entropy),
    ("mv", |r| r.mv_exact),
];

/// Runs `n_paths` independent trajectories (path ids `0..n_paths`) with the
/// noise seeded from `config.seed_root`.
pub fn run_ensemble(
    initial: &FluidState<f64>,
    params: &RegularizationParams<f64>,
    noise: &NoiseConfig,
    config: &EnsembleConfig,
) -> Result<EnsembleResult> {
    config.validate()?;
    params.validate_for(initial.grid())?;
    let model = NoiseModel::new(
        &NoiseConfig {
            seed_root: config.seed_root,
            ..noise.clone()
        },
        initial.grid().dim(),
        params.m,
    )?;
    let options = RunOptions {
        cadence: config.cadence,
        balances: config.balances,
        ..Default::default()
    };
    let outcomes: Vec<Result<(DiagnosticTrace, FluidState<f64>)>> = with_workers(config.workers, || {
        (0..config.n_paths as u64)
            .into_par_iter()
            .map(|p| run_path(initial, params, &model, p, config.horizon, &options).map(|r| (r.trace, r.final_state)))
            .collect()
    })?;
    let mut traces = Vec::with_capacity(outcomes.len());
    let mut final_states = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let (t, s) = o?;
        traces.push(t);
        final_states.push(s);
    }
    let report = moment_report(&traces, config);
    Ok(EnsembleResult {
        report,
        traces,
        final_states,
    })
}

/// Moment report from already computed traces. Failed paths are listed and
/// excluded from the estimates.
pub fn moment_report(traces: &[DiagnosticTrace], config: &EnsembleConfig) -> MomentReport {
    let failed_paths: Vec<u64> = traces.iter().filter(|t| t.failure.is_some()).map(|t| t.path_id).collect();
    let ok: Vec<&DiagnosticTrace> = traces.iter().filter(|t| t.failure.is_none() && !t.rows.is_empty()).collect();
    let unreliable = failed_paths.len() as f64 > config.max_failure_fraction * traces.len() as f64;
    let mut moments = Vec::new();
    let mut constants = Vec::new();
    for (fi, (name, get)) in TRACKED.iter().enumerate() {
        let sups: Vec<f64> = ok
            .iter()
            .map(|t| t.rows.iter().map(get).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let starts: Vec<f64> = ok.iter().map(|t| get(&t.rows[0])).collect();
        if sups.iter().any(|v| !v.is_finite()) || sups.is_empty() {
            continue;
        }
        for (oi, &r) in config.orders.iter().enumerate() {
            let xs: Vec<f64> = sups.iter().map(|s| s.abs().powf(r)).collect();
            let x0: Vec<f64> = starts.iter().map(|s| s.abs().powf(r)).collect();
            let seed = splitmix64(config.seed_root ^ splitmix64(((fi as u64) << 32) | oi as u64));
            let (lo, hi) = bootstrap(xs.len(), config.bootstrap_resamples, config.confidence, seed, |idx| {
                mean_over(&xs, idx)
            });
            moments.push(MomentEstimate {
                functional: name.to_string(),
                order: r,
                estimate: mean(&xs),
                std_error: std_error(&xs),
                ci_low: lo,
                ci_high: hi,
            });
            let c_of = |idx: &[usize]| mean_over(&xs, idx) / (mean_over(&x0, idx) + 1.0);
            let all: Vec<usize> = (0..xs.len()).collect();
            let (clo, chi) = bootstrap(xs.len(), config.bootstrap_resamples, config.confidence, seed ^ 0xC0, c_of);
            constants.push(BoundConstant {
                functional: name.to_string(),
                order: r,
                c_hat: c_of(&all),
                ci_low: clo,
                ci_high: chi,
            });
        }
    }
    MomentReport {
        n_paths: traces.len(),
        n_used: ok.len(),
        failed_paths,
        unreliable,
        confidence: config.confidence,
        moments,
        constants,
    }
}

// ---------------------------------------------------------------------------
// spatially constant reduced problems

/// A one-dimensional, spatially constant configuration: `ρ ≡ 1`, `u ≡ u₀`
/// and noise modes with constant shapes. Every spatial derivative vanishes,
/// so the density stays frozen at one and the full scheme reduces to the
/// scalar SDE `du = −(r₂u + (r₀+r₁)u³)dt + Σ_k F_k(u) dB_k`.
pub fn constant_state(u0: f64, params: &RegularizationParams<f64>) -> Result<FluidState<f64>> {
    let n = (3 * params.m + 3) / 2 * 2;
    let grid = TorusGrid::new(1, n)?;
    let rho = SpectralField::constant(&grid, 1, 1.0);
    let u = SpectralField::constant(&grid, 1, u0);
    FluidState::from_velocity(rho, u, params.m, 0.0)
}

/// Noise table of spatially constant modes with the given amplitudes.
pub fn constant_noise(amplitudes: &[f64], family: NoiseFamily, seed_root: u64) -> NoiseConfig {
    NoiseConfig {
        family,
        seed_root,
        table: Some(
            amplitudes
                .iter()
                .map(|&f| ModeEntry {
                    f,
                    shape: ModeShape {
                        direction: 0,
                        wave: [0, 0, 0],
                        phase: Default::default(),
                    },
                })
                .collect(),
        ),
        ..NoiseConfig::default()
    }
}

/// Parameters with every coefficient off except the listed damping.
pub fn reduced_params(m: usize, r0: f64, r2: f64, dt: f64) -> RegularizationParams<f64> {
    RegularizationParams {
        gamma: 1.5,
        m,
        r0,
        r2,
        dt,
        h: dt,
        ..RegularizationParams::inviscid()
    }
}

/// Closed-form check of the Itô correction on the linear noise problem
/// `dq = Σ f_k dB_k` (constant modes, no drift): `E[½∫ρ|u|²](T) = ½q₀² + ½Σf_k²T`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItoCorrectionReport {
    pub n_paths: usize,
    pub mean: f64,
    pub std_error: f64,
    pub closed_form: f64,
    pub z_score: f64,
    pub passed: bool,
}

pub fn ito_correction_check(
    q0: f64,
    amplitudes: &[f64],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed_root: u64,
    workers: Option<usize>,
) -> Result<ItoCorrectionReport> {
    let params = reduced_params(2, 0.0, 0.0, dt);
    let initial = constant_state(q0, &params)?;
    let noise = constant_noise(amplitudes, NoiseFamily::Constant, seed_root);
    let config = EnsembleConfig {
        n_paths,
        seed_root,
        horizon,
        cadence: usize::MAX,
        workers,
        bootstrap_resamples: 0,
        ..Default::default()
    };
    let res = run_ensemble(&initial, &params, &noise, &config)?;
    if !res.report.failed_paths.is_empty() {
        return Err(Error::Statistics(format!("{} paths failed", res.report.failed_paths.len())));
    }
    let kinetic: Vec<f64> = res
        .final_states
        .iter()
        .map(|s| 0.5 * s.rho.zip_map(&s.u, |r, u| r * u * u).integral())
        .collect();
    let sum_f2: f64 = amplitudes.iter().map(|f| f * f).sum();
    let t = res.final_states[0].t;
    let closed_form = 0.5 * q0 * q0 + 0.5 * sum_f2 * t;
    let (m, se) = (mean(&kinetic), std_error(&kinetic));
    let z = (m - closed_form) / se;
    Ok(ItoCorrectionReport {
        n_paths,
        mean: m,
        std_error: se,
        closed_form,
        z_score: z,
        passed: z.abs() <= 3.0,
    })
}

// ---------------------------------------------------------------------------
// Euler-Maruyama order

/// Reduced problems for the order study (all spatially constant, `ρ ≡ 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmProblem {
    /// `du = −r₂u dt + f dB`.
    Additive,
    /// `du = −r₂u dt + (f/2)tanh(u) dB` through the velocity-saturating family.
    Multiplicative,
    /// `du = −(r₂u + r₀u³)dt`.
    ZeroNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmOrderConfig {
    pub n_paths: usize,
    pub seed_root: u64,
    pub horizon: f64,
    /// Steps of the coarsest level.
    pub base_steps: usize,
    /// Number of levels; level `l` uses `base_steps·2^l` steps.
    pub levels: u32,
    pub u0: f64,
    pub f: f64,
    pub r0: f64,
    pub r2: f64,
    pub workers: Option<usize>,
}

impl Default for EmOrderConfig {
    fn default() -> Self {
        Self {
            n_paths: 1000,
            seed_root: 0,
            horizon: 1.0,
            base_steps: 32,
            levels: 6,
            u0: 1.0,
            f: 4.0,
            r0: 0.0,
            r2: 0.5,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmOrderReport {
    pub problem: EmProblem,
    /// Step of the coarser member of each successive pair.
    pub dts: Vec<f64>,
    /// `E‖X_dt(T) − X_{dt/2}(T)‖` for each pair.
    pub strong_differences: Vec<f64>,
    /// `|E[½|X_dt|²] − E[½|X_{dt/2}|²]|` for each pair.
    pub weak_differences: Vec<f64>,
    /// `log₂` ratios of successive strong differences.
    pub pairwise_orders: Vec<f64>,
    /// Least-squares slope of `log` strong difference against `log dt`.
    pub strong_order: f64,
    pub weak_order: f64,
}

/// Self-convergence study with coupled increments: the finest increments are
/// Brownian-bridge refinements of the coarse ones and every level uses block
/// sums of them, so all levels see the same Brownian path.
pub fn em_order_estimate(problem: EmProblem, config: &EmOrderConfig) -> Result<EmOrderReport> {
    if config.levels < 2 || config.base_steps == 0 || config.n_paths < 2 {
        return Err(Error::config("em_order", "need >= 2 levels, >= 1 base step and >= 2 paths"));
    }
    let dt0 = config.horizon / config.base_steps as f64;
    let (r0, amps, family) = match problem {
        EmProblem::Additive => (0.0, vec![config.f], NoiseFamily::Constant),
        EmProblem::Multiplicative => (0.0, vec![config.f], NoiseFamily::VelocitySaturating),
        EmProblem::ZeroNoise => (config.r0.max(0.5), vec![], NoiseFamily::Constant),
    };
    let base_params = reduced_params(2, r0, config.r2, dt0);
    let noise = NoiseModel::new(&constant_noise(&amps, family, config.seed_root), 1, base_params.m)?;
    let initial = constant_state(config.u0, &base_params)?;
    let finest = config.levels - 1;

    // per path: terminal velocity at each level
    let finals: Vec<Result<Vec<f64>>> = with_workers(config.workers, || {
        (0..config.n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let fine = window_increments(&noise, p, 0, config.base_steps, dt0, finest);
                (0..config.levels)
                    .map(|l| {
                        let block = 1usize << (finest - l);
                        let dt = dt0 / (1u64 << l) as f64;
                        let mut s = initial.clone();
                        for (j, chunk) in fine.chunks(block).enumerate() {
                            let mut db = vec![0.0; noise.k_modes()];
                            for piece in chunk {
                                for (a, b) in db.iter_mut().zip(&piece.db) {
                                    *a += b;
                                }
                            }
                            let inc = WienerIncrement { step: j as u64, dt, db };
                            let out = momentum_step(&s, &base_params, &noise, &inc, dt)?;
                            if !out.accepted {
                                return Err(Error::Statistics(format!("path {p} rejected at level {l}")));
                            }
                            s = out.state;
                        }
                        Ok(s.u.values()[0])
                    })
                    .collect()
            })
            .collect()
    })?;
    let finals: Vec<Vec<f64>> = finals.into_iter().collect::<Result<_>>()?;

    let pairs = (config.levels - 1) as usize;
    let mut dts = Vec::new();
    let mut strong = Vec::new();
    let mut weak = Vec::new();
    for l in 0..pairs {
        dts.push(dt0 / (1u64 << l) as f64);
        strong.push(mean(&finals.iter().map(|v| (v[l] - v[l + 1]).abs()).collect::<Vec<_>>()));
        let w: Vec<f64> = finals.iter().map(|v| 0.5 * (v[l] * v[l] - v[l + 1] * v[l + 1])).collect();
        weak.push(mean(&w).abs());
    }
    let pairwise_orders = strong.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let fit = |ys: &[f64]| {
        let keep: Vec<(f64, f64)> = dts.iter().zip(ys).filter(|(_, y)| **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
        if keep.len() < 2 {
            return f64::NAN;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = keep.into_iter().unzip();
        linear_fit(&x, &y).1
    };
    Ok(EmOrderReport {
        problem,
        strong_order: fit(&strong),
        weak_order: fit(&weak),
        dts,
        strong_differences: strong,
        weak_differences: weak,
        pairwise_orders,
    })
}

// ---------------------------------------------------------------------------
// Burkholder-Davis-Gundy

/// Per-path summary of a discretized martingale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MartingaleSample {
    /// `max_{t≤T}|M_t|` over the grid.
    pub sup_abs: f64,
    /// `⟨M⟩_T`.
    pub bracket: f64,
}

/// Test martingales `M = ∫H dW` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MartingaleProcess {
    /// Constant integrand `H ≡ scale`.
    Brownian { scale: f64 },
    /// `H_t = sign(W_t)`, a non-Gaussian martingale with `⟨M⟩_T = T`.
    SignedBrownian,
    Zero,
}

pub fn martingale_samples(
    process: MartingaleProcess,
    n_paths: usize,
    steps: usize,
    horizon: f64,
    seed: u64,
) -> Vec<MartingaleSample> {
    let dt = horizon / steps as f64;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let z = keyed_normals(splitmix64(seed ^ 0xBD6), p, steps);
            let (mut w, mut m, mut sup, mut br) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for zi in z {
                let db = zi * dt.sqrt();
                let h = match process {
                    MartingaleProcess::Brownian { scale } => scale,
                    MartingaleProcess::SignedBrownian => {
                        if w >= 0.0 {
                            1.0
                        } else {
                            -1.0
                        }
                    }
                    MartingaleProcess::Zero => 0.0,
                };
                m += h * db;
                w += db;
                br += h * h * dt;
                sup = sup.max(m.abs());
            }
            MartingaleSample { sup_abs: sup, bracket: br }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BdgReport {
    pub m_order: f64,
    pub n_paths: usize,
    /// `E[(M*)^{2m}] / E[⟨M⟩^m]`, `None` when both moments vanish.
    pub ratio: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `(2m−1)^{−2m}` (Burkholder square-function bound).
    pub lower_bracket: f64,
    /// `(2m)^{2m}` (Doob's maximal inequality combined with Burkholder);
    /// equals Doob's constant 4 at `m = 1`.
    pub upper_bracket: f64,
    /// `(2m/(2m−1))^{2m(2m−2)/2}` as printed; it is 1 at `m = 1`, which is
    /// below the true ratio, so it is reported but not enforced.
    pub printed_upper: f64,
    pub degenerate: bool,
    /// The CI overlaps `[lower, upper]` and the point estimate exceeds the lower bracket.
    pub within_brackets: bool,
}

/// Empirical BDG ratio for order `m ≥ 1` with a bootstrap interval.
pub fn bdg_ratio_from_samples(samples: &[MartingaleSample], m_order: f64, resamples: usize, confidence: f64, seed: u64) -> BdgReport {
    let m = m_order;
    let lower_bracket = (2.0 * m - 1.0).powf(-2.0 * m);
    let upper_bracket = (2.0 * m).powf(2.0 * m);
    let printed_upper = (2.0 * m / (2.0 * m - 1.0)).powf(2.0 * m * (2.0 * m - 2.0) / 2.0);
    let num: Vec<f64> = samples.iter().map(|s| s.sup_abs.powf(2.0 * m)).collect();
    let den: Vec<f64> = samples.iter().map(|s| s.bracket.powf(m)).collect();
    let ratio_of = |idx: &[usize]| mean_over(&num, idx) / mean_over(&den, idx);
    let degenerate = samples.is_empty() || (mean(&num) == 0.0 && mean(&den) == 0.0);
    if degenerate {
        return BdgReport {
            m_order,
            n_paths: samples.len(),
            ratio: None,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            lower_bracket,
            upper_bracket,
            printed_upper,
            degenerate: true,
            within_brackets: false,
        };
    }
    let all: Vec<usize> = (0..samples.len()).collect();
    let ratio = ratio_of(&all);
    let (lo, hi) = bootstrap(samples.len(), resamples, confidence, seed, ratio_of);
    BdgReport {
        m_order,
        n_paths: samples.len(),
        ratio: Some(ratio),
        ci_low: lo,
        ci_high: hi,
        lower_bracket,
        upper_bracket,
        printed_upper,
        degenerate: false,
        within_brackets: ratio > lower_bracket && lo <= upper_bracket && hi >= lower_bracket,
    }
}

/// Simulates `process` and reports the BDG ratio of order `m_order`.
pub fn bdg_ratio(process: MartingaleProcess, m_order: f64, n_paths: usize, steps: usize, seed: u64) -> BdgReport {
    let samples = martingale_samples(process, n_paths, steps, 1.0, seed);
    bdg_ratio_from_samples(&samples, m_order, 1000, 0.99, seed ^ 0xB00)
}

// ---------------------------------------------------------------------------
// Kolmogorov-Chentsov

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HolderReport {
    pub alpha: f64,
    pub lags: Vec<usize>,
    /// `E|X_{t+ℓ} − X_t|^α` per lag.
    pub moments: Vec<f64>,
    /// Slope of `log E|ΔX|^α` against `log ℓ dt`; equals `1 + β̂`.
    pub slope: f64,
    /// Pathwise scaling exponent `slope/α` (Hurst-type, ½ for Brownian paths).
    pub scaling_exponent: f64,
    /// Kolmogorov-Chentsov admissible exponent `β̂/α = (slope − 1)/α`.
    pub kc_exponent: f64,
    pub n_increments: usize,
    /// Too few increments at the largest lag for a stable estimate.
    pub insufficient_samples: bool,
}

/// Regression estimate from paths sampled on a uniform (dyadic) grid.
pub fn holder_exponent(paths: &[Vec<f64>], dt: f64, alpha: f64, lags: &[usize]) -> Result<HolderReport> {
    if lags.len() < 2 || paths.is_empty() {
        return Err(Error::Statistics("need at least two lags and one path".into()));
    }
    let mut moments = Vec::new();
    let mut min_count = usize::MAX;
    let mut total = 0;
    for &lag in lags {
        let mut acc = 0.0;
        let mut count = 0usize;
        for p in paths {
            // non-overlapping increments keep the samples independent for BM
            let mut i = 0;
            while i + lag < p.len() {
                acc += (p[i + lag] - p[i]).abs().powf(alpha);
                count += 1;
                i += lag;
            }
        }
        min_count = min_count.min(count);
        total += count;
        moments.push(if count > 0 { acc / count as f64 } else { f64::NAN });
    }
    if moments.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
        return Err(Error::Statistics("zero or undefined increment moment".into()));
    }
    let x: Vec<f64> = lags.iter().map(|&l| (l as f64 * dt).ln()).collect();
    let y: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
    let (_, slope) = linear_fit(&x, &y);
    Ok(HolderReport {
        alpha,
        lags: lags.to_vec(),
        moments,
        slope,
        scaling_exponent: slope / alpha,
        kc_exponent: (slope - 1.0) / alpha,
        n_increments: total,
        insufficient_samples: min_count < 100,
    })
}

/// Brownian paths on `steps + 1` grid points of `[0, T]`.
pub fn brownian_paths(n_paths: usize, steps: usize, horizon: f64, seed: u64) -> Vec<Vec<f64>> {
    let dt = horizon / steps as f64;
    (0..n_paths as u64)
        .into_par_iter()
        .map(|p| {
            let z = keyed_normals(splitmix64(seed ^ 0x40D), p, steps);
            let mut w = vec![0.0; steps + 1];
            for (i, zi) in z.into_iter().enumerate() {
                w[i + 1] = w[i] + zi * dt.sqrt();
            }
            w
        })
        .collect()
}

/// Paths `t ↦ ⟨q(t), ψ⟩` of the simulated momentum against a fixed test
/// field, recorded after every window.
pub fn momentum_paths(
    initial: &FluidState<f64>,
    params: &RegularizationParams<f64>,
    noise: &NoiseConfig,
    psi: &SpectralField<f64>,
    n_paths: usize,
    windows: usize,
    seed_root: u64,
    workers: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    let model = NoiseModel::new(
        &NoiseConfig {
            seed_root,
            ..noise.clone()
        },
        initial.grid().dim(),
        params.m,
    )?;
    let horizon = params.dt * params.substeps() as f64 * windows as f64;
    let options = RunOptions {
        keep_snapshots: true,
        balances: BalanceSelection::none(),
        ..Default::default()
    };
    let out: Vec<Result<Vec<f64>>> = with_workers(workers, || {
        (0..n_paths as u64)
            .into_par_iter()
            .map(|p| {
                let r = run_path(initial, params, &model, p, horizon, &options)?;
                if let Some(f) = r.trace.failure {
                    return Err(Error::Statistics(format!("path {p}: {f}")));
                }
                r.snapshots.iter().map(|s| s.q.inner_product(psi)).collect()
            })
            .collect()
    })?;
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Itô product rule

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItoProductReport {
    /// `X_TY_T − X₀Y₀ − ΣX dY − ΣY dX − bracket_T`.
    pub residual: f64,
    /// Realized covariation `ΣΔXΔY`.
    pub realized_bracket: f64,
}

/// Discrete Itô product identity with left-point sums against a supplied
/// terminal bracket `⟨X, Y⟩_T` (zero for finite-variation paths).
pub fn ito_product_check(x: &[f64], y: &[f64], bracket: f64) -> Result<ItoProductReport> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Dimension("paths must have equal, nonzero length".into()));
    }
    let (mut ixdy, mut iydx, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..x.len() - 1 {
        let (dx, dy) = (x[i + 1] - x[i], y[i + 1] - y[i]);
        ixdy += x[i] * dy;
        iydx += y[i] * dx;
        cov += dx * dy;
    }
    let n = x.len() - 1;
    Ok(ItoProductReport {
        residual: x[n] * y[n] - x[0] * y[0] - ixdy - iydx - bracket,
        realized_bracket: cov,
    })
}

/// Ensemble mean and standard error of a per-path statistic.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    (mean(xs), std_error(xs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::TraceRow;
    use std::f64::consts::TAU;

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let a = bootstrap(4, 200, 0.9, 7, |i| mean_over(&xs, i));
        let b = bootstrap(4, 200, 0.9, 7, |i| mean_over(&xs, i));
        assert_eq!(a, b);
        assert!(a.0 <= 2.5 && a.1 >= 2.5);
        assert_eq!(bootstrap(1, 200, 0.9, 7, |_| 5.0), (5.0, 5.0));
    }

    fn trace(id: u64, energies: &[f64]) -> DiagnosticTrace {
        DiagnosticTrace {
            path_id: id,
            rows: energies
                .iter()
                .map(|&e| TraceRow {
                    energy: e,
                    bd_entropy: e,
                    mv_exact: e,
                    ..Default::default()
                })
                .collect(),
            ..Default::default()
        }
    }

    #[test]
    fn single_path_report_is_its_sup() {
        let cfg = EnsembleConfig {
            orders: vec![3.0],
            ..Default::default()
        };
        let rep = moment_report(&[trace(0, &[1.0, 2.0, 1.5])], &cfg);
        let m = rep.moment("energy", 3.0).unwrap();
        assert_eq!(m.estimate, 8.0);
        assert_eq!((m.ci_low, m.ci_high), (8.0, 8.0));
        assert_eq!(rep.constant("energy", 3.0).unwrap().c_hat, 4.0);
    }

    #[test]
    fn failures_are_recorded_and_flag_unreliable() {
        let cfg = EnsembleConfig::default();
        let mut traces: Vec<_> = (0..10).map(|i| trace(i, &[1.0, 1.1])).collect();
        traces[3].failure = Some("x".into());
        let rep = moment_report(&traces, &cfg);
        assert_eq!(rep.failed_paths, vec![3]);
        assert_eq!(rep.n_used, 9);
        assert!(!rep.unreliable);
        traces[4].failure = Some("y".into());
        assert!(moment_report(&traces, &cfg).unreliable);
    }

    #[test]
    fn ensemble_is_deterministic_and_thread_independent() {
        let p = RegularizationParams {
            m: 4,
            dt: 2e-4,
            h: 2e-4,
            ..Default::default()
        };
        let g = TorusGrid::<f64>::new(1, 16).unwrap();
        let rho = SpectralField::from_fn(&g, 1, |x, _| 1.0 + 0.2 * (TAU * x[0]).sin());
        let u = SpectralField::from_fn(&g, 1, |x, _| 0.1 * (TAU * x[0]).sin());
        let s = crate::state::prepare_initial(&rho, &u, &p).unwrap();
        let cfg = EnsembleConfig {
            n_paths: 6,
            horizon: 4e-3,
            workers: Some(1),
            bootstrap_resamples: 100,
            ..Default::default()
        };
        let noise = NoiseConfig::default();
        let a = run_ensemble(&s, &p, &noise, &cfg).unwrap();
        let b = run_ensemble(&s, &p, &noise, &EnsembleConfig { workers: Some(3), ..cfg.clone() }).unwrap();
        assert_eq!(format!("{:?}", a.report), format!("{:?}", b.report));
        assert_eq!(format!("{:?}", a.traces), format!("{:?}", b.traces));
        // different paths really differ
        assert_ne!(a.traces[0].rows.last().unwrap().energy, a.traces[1].rows.last().unwrap().energy);
    }

    #[test]
    fn ito_correction_closed_form() {
        let rep = ito_correction_check(0.3, &[0.2, 0.1, 0.05], 0.1, 1e-2, 2000, 11, None).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn bdg_examples() {
        let rep = bdg_ratio(MartingaleProcess::Brownian { scale: 1.0 }, 1.0, 20_000, 200, 3);
        let r = rep.ratio.unwrap();
        assert!(r > 1.0 && r <= 4.0 && rep.within_brackets, "{rep:?}");
        assert_eq!(rep.upper_bracket, 4.0);
        assert_eq!(rep.printed_upper, 1.0);

        let two = bdg_ratio(MartingaleProcess::Brownian { scale: 2.0 }, 1.0, 20_000, 200, 3);
        assert!((two.ratio.unwrap() - r).abs() < 1e-12 * r);

        let zero = bdg_ratio(MartingaleProcess::Zero, 1.0, 100, 50, 3);
        assert!(zero.degenerate && zero.ratio.is_none());

        let signed = bdg_ratio(MartingaleProcess::SignedBrownian, 2.0, 20_000, 200, 5);
        assert!(signed.within_brackets, "{signed:?}");
    }

    #[test]
    fn holder_examples() {
        let paths = brownian_paths(400, 256, 1.0, 9);
        let rep = holder_exponent(&paths, 1.0 / 256.0, 2.0, &[1, 2, 4, 8, 16]).unwrap();
        // sampling error on the slope is well below 0.01 here
        assert!(rep.scaling_exponent > 0.4 && rep.scaling_exponent <= 0.51, "{rep:?}");

        let line: Vec<Vec<f64>> = vec![(0..=256).map(|i| 0.3 * i as f64 / 256.0).collect()];
        let rep = holder_exponent(&line, 1.0 / 256.0, 2.0, &[1, 2, 4, 8]).unwrap();
        assert!((rep.scaling_exponent - 1.0).abs() < 1e-10);
        assert!(rep.insufficient_samples);
    }

    #[test]
    fn ito_product_examples() {
        let n = 1000;
        let x: Vec<f64> = (0..=n).map(|i| (i as f64 / n as f64).sin()).collect();
        let rep = ito_product_check(&x, &x, 0.0).unwrap();
        let coarse: Vec<f64> = x.iter().step_by(2).copied().collect();
        let rep2 = ito_product_check(&coarse, &coarse, 0.0).unwrap();
        assert!(rep.residual.abs() < 2e-3);
        assert!((rep2.residual / rep.residual - 2.0).abs() < 0.05);

        let paths = brownian_paths(4000, 200, 1.0, 21);
        let res: Vec<f64> = paths.iter().map(|w| ito_product_check(w, w, 1.0).unwrap().residual).collect();
        let (m, se) = mean_and_se(&res);
        assert!(m.abs() <= 3.0 * se, "{m} {se}");

        let cov: Vec<f64> = paths
            .chunks(2)
            .map(|p| ito_product_check(&p[0], &p[1], 0.0).unwrap().residual)
            .collect();
        let (m, se) = mean_and_se(&cov);
        assert!(m.abs() <= 3.0 * se, "{m} {se}");
    }

    #[test]
    fn em_orders() {
        let cfg = EmOrderConfig {
            n_paths: 200,
            ..Default::default()
        };
        let zero = em_order_estimate(EmProblem::ZeroNoise, &cfg).unwrap();
        assert!((zero.strong_order - 1.0).abs() < 0.1, "{zero:?}");
        let add = em_order_estimate(EmProblem::Additive, &cfg).unwrap();
        assert!(add.strong_order > 0.8, "{add:?}");
        let mult = em_order_estimate(EmProblem::Multiplicative, &cfg).unwrap();
        assert!((mult.strong_order - 0.5).abs() < 0.15, "{mult:?}");
    }
}
