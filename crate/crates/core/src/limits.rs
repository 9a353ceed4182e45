//! Parameter continuation along the four-stage vanishing order
//! (ε → 0, then κ → 0, then (n, δ, η, r₀) jointly, then (r₁, r₂) → 0) with
//! common-random-number ensembles and Cauchy diagnostics.
//!
//! δ, η and r₀ of the joint stage are powers `n^{-p}` with large `p`; they are
//! carried as natural logarithms and only exponentiated when a run is set up,
//! where values below the smallest positive double become exactly zero and
//! are flagged.

use crate::error::{Error, Result};
use crate::io::{load_json, save_json};
use crate::montecarlo::{run_ensemble, EnsembleConfig, MomentReport, TRACKED};
use crate::noise::NoiseConfig;
use crate::state::{FluidState, RegularizationParams};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Stages in their mandatory order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Epsilon,
    Kappa,
    Joint,
    Damping,
}

/// `Faithful` enforces `α > 76`, `β > 2400/947`; `Illustrative` accepts any
/// positive exponents so that δ, η stay numerically visible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    Faithful,
    Illustrative,
}

pub const ALPHA_MIN: f64 = 76.0;
pub const BETA_MIN: f64 = 2400.0 / 947.0;

/// Exponent `p` in `r₀ = n^{-p}` coupled to `(α, β)`.
pub fn r0_exponent(alpha: f64, beta: f64) -> f64 {
    1.0 + 1.75 * (1.3 * alpha + 1.5 * beta) + 0.5 * beta
}

/// Input description of a schedule. Empty sequences omit their stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mode: ScheduleMode,
    pub alpha: f64,
    pub beta: f64,
    /// Overrides the coupled exponent of `r₀`.
    pub r0_exponent: Option<f64>,
    /// Stage 1: decreasing ε.
    pub eps: Vec<f64>,
    /// Stage 2: decreasing κ, with `K = κ^{-3/4}`.
    pub kappa: Vec<f64>,
    /// Stage 3: increasing `n`.
    pub n: Vec<f64>,
    /// Stage 4: decreasing `(r₁, r₂)` pairs.
    pub damping: Vec<[f64; 2]>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            mode: ScheduleMode::Faithful,
            alpha: 77.0,
            beta: 3.0,
            r0_exponent: None,
            eps: Vec::new(),
            kappa: Vec::new(),
            n: Vec::new(),
            damping: Vec::new(),
        }
    }
}

/// One run of the schedule. `log_*` are natural logarithms (`-inf` for zero).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTuple {
    pub stage: Stage,
    pub index: usize,
    pub eps: f64,
    pub kappa: f64,
    pub k_cut: f64,
    pub n_mv: f64,
    #[serde(with = "crate::io::float_repr")]
    pub log_delta: f64,
    #[serde(with = "crate::io::float_repr")]
    pub log_eta: f64,
    #[serde(with = "crate::io::float_repr")]
    pub log_r0: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Value of a log-space parameter and whether it underflowed to zero.
pub fn from_log(l: f64) -> (f64, bool) {
    let v = l.exp();
    (v, v == 0.0 && l > f64::NEG_INFINITY)
}

fn ln0(v: f64) -> f64 {
    if v == 0.0 {
        f64::NEG_INFINITY
    } else {
        v.ln()
    }
}

impl ScheduleTuple {
    fn from_params(stage: Stage, index: usize, p: &RegularizationParams<f64>) -> Self {
        Self {
            stage,
            index,
            eps: p.eps,
            kappa: p.kappa,
            k_cut: p.k_cut,
            n_mv: p.n_mv,
            log_delta: ln0(p.delta),
            log_eta: ln0(p.eta),
            log_r0: ln0(p.r0),
            r1: p.r1,
            r2: p.r2,
        }
    }

    /// Concrete parameters, plus the names of coefficients that underflowed.
    pub fn params(&self, base: &RegularizationParams<f64>) -> (RegularizationParams<f64>, Vec<&'static str>) {
        let mut under = Vec::new();
        let mut take = |name: &'static str, l: f64| {
            let (v, u) = from_log(l);
            if u {
                under.push(name);
            }
            v
        };
        let p = RegularizationParams {
            eps: self.eps,
            kappa: self.kappa,
            k_cut: self.k_cut,
            n_mv: self.n_mv,
            delta: take("delta", self.log_delta),
            eta: take("eta", self.log_eta),
            r0: take("r0", self.log_r0),
            r1: self.r1,
            r2: self.r2,
            ..base.clone()
        };
        (p, under)
    }

    pub fn label(&self) -> String {
        format!("{:?}-{}", self.stage, self.index).to_lowercase()
    }
}

/// Validated list of runs in stage order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitSchedule {
    mode: ScheduleMode,
    alpha: f64,
    beta: f64,
    base: RegularizationParams<f64>,
    tuples: Vec<ScheduleTuple>,
}

fn strictly(seq: &[f64], decreasing: bool, field: &str) -> Result<()> {
    for w in seq.windows(2) {
        let ok = if decreasing { w[1] < w[0] } else { w[1] > w[0] };
        if !ok {
            return Err(Error::config(
                field,
                format!("sequence must be strictly {}", if decreasing { "decreasing" } else { "increasing" }),
            ));
        }
    }
    Ok(())
}

/// Expands a schedule configuration into explicit tuples. Each stage starts
/// from the parameters left by the previous one and varies only its own.
pub fn build_schedule(config: &ScheduleConfig, base: &RegularizationParams<f64>) -> Result<LimitSchedule> {
    base.validate()?;
    let (alpha, beta) = (config.alpha, config.beta);
    let uses_joint = !config.n.is_empty();
    if uses_joint {
        match config.mode {
            ScheduleMode::Faithful => {
                if !(alpha > ALPHA_MIN) {
                    return Err(Error::config("schedule.alpha", format!("must exceed {ALPHA_MIN} (got {alpha})")));
                }
                if !(beta > BETA_MIN) {
                    return Err(Error::config("schedule.beta", format!("must exceed 2400/947 (got {beta})")));
                }
            }
            ScheduleMode::Illustrative => {
                if !(alpha > 0.0 && beta > 0.0) {
                    return Err(Error::config("schedule.alpha", "illustrative exponents must be positive"));
                }
            }
        }
    }
    strictly(&config.eps, true, "schedule.eps")?;
    strictly(&config.kappa, true, "schedule.kappa")?;
    strictly(&config.n, false, "schedule.n")?;
    let r1: Vec<f64> = config.damping.iter().map(|d| d[0]).collect();
    let r2: Vec<f64> = config.damping.iter().map(|d| d[1]).collect();
    strictly(&r1, true, "schedule.damping")?;
    strictly(&r2, true, "schedule.damping")?;
    if config.eps.iter().chain(&config.kappa).chain(&r1).chain(&r2).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::config("schedule", "coefficients must be finite and >= 0"));
    }
    if config.n.iter().any(|n| !(*n >= 1.0) || !n.is_finite()) {
        return Err(Error::config("schedule.n", "truncation indices must be >= 1"));
    }
    if config.kappa.iter().any(|k| *k == 0.0) {
        return Err(Error::config("schedule.kappa", "κ must stay positive since K = κ^{-3/4}"));
    }
    let present = [
        !config.eps.is_empty(),
        !config.kappa.is_empty(),
        uses_joint,
        !config.damping.is_empty(),
    ];
    let first = present.iter().position(|&p| p);
    let last = present.iter().rposition(|&p| p);
    if let (Some(a), Some(b)) = (first, last) {
        if present[a..=b].iter().any(|p| !p) {
            return Err(Error::config("schedule", "stages between the first and last used stage cannot be skipped"));
        }
    }

    let mut cur = base.clone();
    let mut tuples = Vec::new();
    let mut log_params = (ln0(base.delta), ln0(base.eta), ln0(base.r0));
    let push = |tuples: &mut Vec<ScheduleTuple>, stage, i, p: &RegularizationParams<f64>, lp: (f64, f64, f64)| {
        let mut t = ScheduleTuple::from_params(stage, i, p);
        (t.log_delta, t.log_eta, t.log_r0) = lp;
        tuples.push(t);
    };
    for (i, &e) in config.eps.iter().enumerate() {
        cur.eps = e;
        push(&mut tuples, Stage::Epsilon, i, &cur, log_params);
    }
    for (i, &k) in config.kappa.iter().enumerate() {
        cur.kappa = k;
        cur.k_cut = k.powf(-0.75);
        push(&mut tuples, Stage::Kappa, i, &cur, log_params);
    }
    let p_r0 = config.r0_exponent.unwrap_or_else(|| r0_exponent(alpha, beta));
    for (i, &n) in config.n.iter().enumerate() {
        cur.n_mv = n;
        let ln = n.ln();
        log_params = (-alpha * ln, -beta * ln, -p_r0 * ln);
        push(&mut tuples, Stage::Joint, i, &cur, log_params);
    }
    for (i, d) in config.damping.iter().enumerate() {
        cur.r1 = d[0];
        cur.r2 = d[1];
        push(&mut tuples, Stage::Damping, i, &cur, log_params);
    }
    Ok(LimitSchedule {
        mode: config.mode,
        alpha,
        beta,
        base: base.clone(),
        tuples,
    })
}

impl LimitSchedule {
    /// Schedule from explicit tuples; only stage order is checked.
    pub fn from_tuples(mode: ScheduleMode, base: RegularizationParams<f64>, tuples: Vec<ScheduleTuple>) -> Result<Self> {
        for w in tuples.windows(2) {
            if w[1].stage < w[0].stage {
                return Err(Error::config("schedule", "stages must appear in order"));
            }
            if (w[1].stage as u8) > (w[0].stage as u8) + 1 {
                return Err(Error::config("schedule", "stages cannot be skipped"));
            }
        }
        Ok(Self {
            mode,
            alpha: f64::NAN,
            beta: f64::NAN,
            base,
            tuples,
        })
    }

    pub fn tuples(&self) -> &[ScheduleTuple] {
        &self.tuples
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn base(&self) -> &RegularizationParams<f64> {
        &self.base
    }

    pub fn stages(&self) -> Vec<Stage> {
        let mut s: Vec<Stage> = self.tuples.iter().map(|t| t.stage).collect();
        s.dedup();
        s
    }
}

// ---------------------------------------------------------------------------
// sweep

/// Ensemble-level summary of one tuple; enough to resume a sweep without
/// rerunning it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TupleResult {
    pub tuple: ScheduleTuple,
    pub underflowed: Vec<String>,
    pub seed_root: u64,
    pub times: Vec<f64>,
    /// Ensemble means over successful paths at each recorded time, keyed by
    /// diagnostic name.
    pub series: Vec<Series>,
    pub final_rho: Vec<Vec<f64>>,
    pub final_u: Vec<Vec<f64>>,
    pub failed_paths: Vec<u64>,
    pub unreliable: bool,
    /// The tuple's full ensemble report.
    pub report: MomentReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    #[serde(with = "crate::io::float_repr::vec")]
    pub values: Vec<f64>,
}

pub const DIAGNOSTICS: [&str; 5] = ["energy", "bd_entropy", "mv", "vacuum_fraction", "state_distance"];

fn series_of(traces: &[crate::scheme::DiagnosticTrace]) -> (Vec<f64>, Vec<Series>) {
    let ok: Vec<_> = traces.iter().filter(|t| t.failure.is_none()).collect();
    let rows = ok.iter().map(|t| t.rows.len()).min().unwrap_or(0);
    let times = ok.first().map(|t| t.rows[..rows].iter().map(|r| r.t).collect()).unwrap_or_default();
    let mut getters: Vec<(&str, fn(&crate::scheme::TraceRow) -> f64)> = TRACKED.to_vec();
    getters.push(("vacuum_fraction", |r| r.vacuum_fraction));
    let series = getters
        .into_iter()
        .map(|(name, get)| {
            let values = (0..rows)
                .map(|i| ok.iter().map(|t| get(&t.rows[i])).sum::<f64>() / ok.len() as f64)
                .collect();
            Series {
                name: name.to_string(),
                values,
            }
        })
        .collect();
    (times, series)
}

/// Convergence of one diagnostic within a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Successive differences shrink by at least the required factor.
    Cauchy,
    /// All successive differences vanish.
    Identical,
    NotCauchy,
    /// Fewer than two differences.
    Undetermined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticConvergence {
    pub name: String,
    /// `max_t |mean X_i(t) − mean X_{i+1}(t)|`, or the path-averaged
    /// final-state `L²` distance for `state_distance`.
    #[serde(with = "crate::io::float_repr::vec")]
    pub differences: Vec<f64>,
    /// `differences[i] / differences[i+1]` (Richardson-type ratios).
    #[serde(with = "crate::io::float_repr::vec")]
    pub ratios: Vec<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub labels: Vec<String>,
    /// Final-time ensemble means per tuple.
    pub final_values: Vec<Series>,
    pub diagnostics: Vec<DiagnosticConvergence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mode: ScheduleMode,
    pub factor: f64,
    pub stages: Vec<StageReport>,
    pub underflow_notes: Vec<String>,
    pub unreliable_tuples: Vec<String>,
}

/// Options for [`sweep`].
#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Directory holding the manifest and per-tuple results; enables resume.
    pub store: Option<PathBuf>,
    /// Stop after this many newly computed tuples (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Required shrink factor of successive differences (default 1.5).
    pub factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub tuple: ScheduleTuple,
    pub seed_root: u64,
    pub output: String,
    pub completed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub mode: ScheduleMode,
    pub entries: Vec<ManifestEntry>,
}

pub enum SweepOutcome {
    Complete(ConvergenceReport, Vec<TupleResult>),
    Incomplete { completed: usize, total: usize },
}

fn run_tuple(
    initial: &FluidState<f64>,
    noise: &NoiseConfig,
    schedule: &LimitSchedule,
    tuple: &ScheduleTuple,
    ensemble: &EnsembleConfig,
) -> Result<TupleResult> {
    let (params, under) = tuple.params(&schedule.base);
    let res = run_ensemble(initial, &params, noise, ensemble)?;
    let (times, series) = series_of(&res.traces);
    Ok(TupleResult {
        tuple: tuple.clone(),
        underflowed: under.into_iter().map(String::from).collect(),
        seed_root: ensemble.seed_root,
        times,
        series,
        final_rho: res.final_states.iter().map(|s| s.rho.values().to_vec()).collect(),
        final_u: res.final_states.iter().map(|s| s.u.values().to_vec()).collect(),
        failed_paths: res.report.failed_paths.clone(),
        unreliable: res.report.unreliable,
        report: res.report,
    })
}

/// Runs every tuple with the same `seed_root` (common random numbers) and
/// assembles the convergence report. With a store directory, completed
/// tuples recorded in the manifest are loaded instead of rerun.
pub fn sweep(
    initial: &FluidState<f64>,
    noise: &NoiseConfig,
    schedule: &LimitSchedule,
    ensemble: &EnsembleConfig,
    options: &SweepOptions,
) -> Result<SweepOutcome> {
    let total = schedule.tuples.len();
    let mut manifest = SweepManifest {
        mode: schedule.mode,
        entries: schedule
            .tuples
            .iter()
            .enumerate()
            .map(|(i, t)| ManifestEntry {
                label: t.label(),
                tuple: t.clone(),
                seed_root: ensemble.seed_root,
                output: format!("tuple_{i:03}_{}.json", t.label()),
                completed: false,
            })
            .collect(),
    };
    if let Some(dir) = &options.store {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("manifest.json");
        if path.exists() {
            let old: SweepManifest = load_json(&path)?;
            let same = old.entries.len() == manifest.entries.len()
                && old.entries.iter().zip(&manifest.entries).all(|(a, b)| a.tuple == b.tuple && a.seed_root == b.seed_root);
            if !same {
                return Err(Error::config("sweep.store", "existing manifest describes a different sweep"));
            }
            manifest = old;
        }
        save_json(&path, &manifest)?;
    }
    let mut results = Vec::with_capacity(total);
    let mut fresh = 0;
    for i in 0..total {
        let entry = &manifest.entries[i];
        if let (true, Some(dir)) = (entry.completed, &options.store) {
            results.push(load_json::<TupleResult>(&dir.join(&entry.output))?);
            continue;
        }
        if options.stop_after.is_some_and(|k| fresh >= k) {
            return Ok(SweepOutcome::Incomplete { completed: i, total });
        }
        let r = run_tuple(initial, noise, schedule, &schedule.tuples[i], ensemble)?;
        fresh += 1;
        if let Some(dir) = &options.store {
            save_json(&dir.join(&manifest.entries[i].output), &r)?;
            manifest.entries[i].completed = true;
            save_json(&dir.join("manifest.json"), &manifest)?;
        }
        results.push(r);
    }
    let report = assemble_report(schedule.mode, &results, options.factor.unwrap_or(1.5))?;
    if let Some(dir) = &options.store {
        save_json(&dir.join("report.json"), &report)?;
    }
    Ok(SweepOutcome::Complete(report, results))
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

fn verdict(diffs: &[f64], factor: f64) -> (Vec<f64>, Verdict) {
    let ratios: Vec<f64> = diffs.windows(2).map(|w| w[0] / w[1]).collect();
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let v = if diffs.is_empty() || scale == 0.0 {
        if diffs.is_empty() {
            Verdict::Undetermined
        } else {
            Verdict::Identical
        }
    } else if ratios.is_empty() {
        Verdict::Undetermined
    } else if ratios.iter().all(|r| *r >= factor) {
        Verdict::Cauchy
    } else {
        Verdict::NotCauchy
    };
    (ratios, v)
}

/// Builds the report from tuple results, which must follow stage order.
pub fn assemble_report(mode: ScheduleMode, results: &[TupleResult], factor: f64) -> Result<ConvergenceReport> {
    for w in results.windows(2) {
        if w[1].tuple.stage < w[0].tuple.stage || (w[1].tuple.stage as u8) > (w[0].tuple.stage as u8) + 1 {
            return Err(Error::config("schedule", "results skip or reorder stages"));
        }
    }
    let mut stages = Vec::new();
    let mut start = 0;
    while start < results.len() {
        let stage = results[start].tuple.stage;
        let end = start + results[start..].iter().take_while(|r| r.tuple.stage == stage).count();
        let group = &results[start..end];
        let mut final_values = Vec::new();
        let mut diagnostics = Vec::new();
        for name in DIAGNOSTICS {
            let diffs: Vec<f64> = if name == "state_distance" {
                group
                    .windows(2)
                    .map(|w| {
                        let n = w[0].final_rho.len().min(w[1].final_rho.len()).max(1);
                        (0..w[0].final_rho.len().min(w[1].final_rho.len()))
                            .map(|p| l2_distance(&w[0].final_rho[p], &w[1].final_rho[p]) + l2_distance(&w[0].final_u[p], &w[1].final_u[p]))
                            .sum::<f64>()
                            / n as f64
                    })
                    .collect()
            } else {
                let get = |r: &TupleResult| r.series.iter().find(|s| s.name == name).map(|s| s.values.clone()).unwrap_or_default();
                final_values.push(Series {
                    name: name.to_string(),
                    values: group.iter().map(|r| get(r).last().copied().unwrap_or(f64::NAN)).collect(),
                });
                group
                    .windows(2)
                    .map(|w| {
                        let (a, b) = (get(&w[0]), get(&w[1]));
                        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
                    })
                    .collect()
            };
            let (ratios, v) = verdict(&diffs, factor);
            diagnostics.push(DiagnosticConvergence {
                name: name.to_string(),
                differences: diffs,
                ratios,
                verdict: v,
            });
        }
        stages.push(StageReport {
            stage,
            labels: group.iter().map(|r| r.tuple.label()).collect(),
            final_values,
            diagnostics,
        });
        start = end;
    }
    Ok(ConvergenceReport {
        mode,
        factor,
        stages,
        underflow_notes: results
            .iter()
            .filter(|r| !r.underflowed.is_empty())
            .map(|r| format!("{}: {} evaluated as exactly 0", r.tuple.label(), r.underflowed.join(", ")))
            .collect(),
        unreliable_tuples: results.iter().filter(|r| r.unreliable).map(|r| r.tuple.label()).collect(),
    })
}
