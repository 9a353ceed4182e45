use bdflow::io::{self, InitialConfig, RunConfig};
use bdflow::limits::{self, SweepOptions, SweepOutcome};
use bdflow::montecarlo;
use bdflow::scheme::{run_path, RunOptions};
use bdflow::verify;
use bdflow::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bdflow", version, about = "Stochastic compressible flow simulator and verification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed_root` (and every seed derived from it).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; never changes results.
    #[arg(long)]
    threads: Option<usize>,
    /// Replaces the initial-condition block with a built-in preset.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one path: trace, checkpoints and summary.
    Simulate(Common),
    /// Run an ensemble: moment report and per-path traces.
    Ensemble(Common),
    /// Run the parameter-continuation schedule (resumable).
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Stop after this many newly computed tuples.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
        /// Required shrink factor of successive differences.
        #[arg(long)]
        factor: Option<f64>,
    },
    /// Run the property battery and print measured values against tolerances.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run only these checks (full name or group prefix); repeatable.
        #[arg(long)]
        only: Vec<String>,
        /// Multiplies every tolerance (0 is a negative control).
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
    /// Print checkpoint metadata.
    Inspect {
        checkpoint: PathBuf,
        /// When given, also report whether the parameter hash matches.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

enum Failure {
    Validation(Error),
    Runtime(Error),
    Rejected(String),
    Verification(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Format(_) => Failure::Validation(e),
            other => Failure::Runtime(other),
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) | Failure::Rejected(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    fn report(&self) -> serde_json::Value {
        match self {
            Failure::Validation(Error::Config { field, reason }) => {
                json!({"status": "validation-error", "field": field, "message": reason})
            }
            Failure::Validation(e) => json!({"status": "validation-error", "message": e.to_string()}),
            Failure::Runtime(e) => json!({"status": "runtime-error", "message": e.to_string()}),
            Failure::Rejected(why) => json!({"status": "rejected", "message": why}),
            Failure::Verification(names) => json!({"status": "verification-failed", "failed": names}),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Ensemble(c) => ensemble(&c),
        Command::Sweep {
            common,
            stop_after,
            factor,
        } => sweep(&common, stop_after, factor),
        Command::Verify {
            common,
            only,
            tolerance_scale,
        } => run_verify(&common, &only, tolerance_scale),
        Command::Inspect { checkpoint, config } => inspect(&checkpoint, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}

/// Loads, overrides and validates the configuration, then sets up the
/// thread pool and output directory.
fn prepare(c: &Common) -> std::result::Result<(RunConfig, PathBuf), Failure> {
    let mut cfg = match fs::read_to_string(&c.config) {
        Ok(s) => RunConfig::from_toml_str(&s)?,
        Err(e) => return Err(Error::config("--config", format!("{}: {e}", c.config.display())).into()),
    };
    if let Some(p) = &c.preset {
        cfg.initial = InitialConfig::preset(p)?;
    }
    if let Some(out) = &c.out {
        cfg.output.dir = out.display().to_string();
    }
    let seed = c.seed.unwrap_or(cfg.seed_root);
    let cfg = cfg.with_seed(seed);
    if c.threads == Some(0) {
        return Err(Error::config("--threads", "must be >= 1").into());
    }
    cfg.validate()?;
    if let Some(n) = c.threads {
        // A second global pool cannot be installed; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let out = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&out).map_err(Error::from)?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml_string()?).map_err(Error::from)?;
    Ok((cfg, out))
}

fn simulate(c: &Common) -> Outcome {
    let (cfg, out) = prepare(c)?;
    let initial = cfg.initial_state()?;
    let noise = cfg.noise_model()?;
    let options = RunOptions {
        cadence: cfg.run.cadence,
        keep_snapshots: cfg.run.checkpoint_every > 0,
        balances: cfg.run.balances,
        ..Default::default()
    };
    let res = run_path(&initial, &cfg.params, &noise, cfg.run.path_id, cfg.run.horizon, &options)?;
    io::save_trace_csv(&out.join("trace.csv"), &res.trace)?;

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(Error::from)?;
    let mut checkpoints = Vec::new();
    if cfg.run.checkpoint_every > 0 {
        for (i, s) in res.snapshots.iter().enumerate().skip(1) {
            if i % cfg.run.checkpoint_every == 0 {
                let name = format!("row_{i:06}.ckpt");
                io::save_checkpoint(&ckpt_dir.join(&name), s, &cfg.params)?;
                checkpoints.push(format!("checkpoints/{name}"));
            }
        }
    }
    io::save_checkpoint(&ckpt_dir.join("final.ckpt"), &res.final_state, &cfg.params)?;
    checkpoints.push("checkpoints/final.ckpt".into());

    let rows = &res.trace.rows;
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let summary = json!({
        "command": "simulate",
        "seed_root": cfg.seed_root,
        "path_id": res.trace.path_id,
        "windows": res.trace.windows,
        "rows": rows.len(),
        "t_final": last.t,
        "failure": res.trace.failure,
        "r_exit_time": res.trace.r_exit_time,
        "mass_initial": first.mass,
        "mass_final": last.mass,
        "mass_drift_rel": (last.mass - first.mass).abs() / first.mass,
        "energy_initial": first.energy,
        "energy_final": last.energy,
        "min_rho": rows.iter().map(|r| r.min_rho).fold(f64::INFINITY, f64::min),
        "params_hash": hex(&io::params_hash(&cfg.params)),
        "checkpoints": checkpoints,
    });
    io::save_json(&out.join("summary.json"), &summary)?;
    match res.trace.failure {
        Some(why) => Err(Failure::Rejected(why)),
        None => {
            println!("{}", json!({"status": "ok", "out": out}));
            Ok(())
        }
    }
}

fn ensemble(c: &Common) -> Outcome {
    let (cfg, out) = prepare(c)?;
    let initial = cfg.initial_state()?;
    let res = montecarlo::run_ensemble(&initial, &cfg.params, &cfg.noise, &cfg.ensemble)?;
    write_traces(&out.join("traces"), &res.traces)?;
    io::save_json(&out.join("report.json"), &res.report)?;
    if res.report.unreliable {
        eprintln!("warning: {} of {} paths failed; report marked unreliable", res.report.failed_paths.len(), res.report.n_paths);
    }
    println!("{}", json!({"status": "ok", "out": out, "unreliable": res.report.unreliable}));
    Ok(())
}

fn write_traces(dir: &Path, traces: &[bdflow::scheme::DiagnosticTrace]) -> Outcome {
    fs::create_dir_all(dir).map_err(Error::from)?;
    let mut index = Vec::with_capacity(traces.len());
    for t in traces {
        let name = format!("path_{:06}.csv", t.path_id);
        io::save_trace_csv(&dir.join(&name), t)?;
        index.push(json!({
            "path_id": t.path_id,
            "file": name,
            "rows": t.rows.len(),
            "windows": t.windows,
            "failure": t.failure,
            "r_exit_time": t.r_exit_time,
        }));
    }
    io::save_json(&dir.join("index.json"), &index)?;
    Ok(())
}

fn sweep(c: &Common, stop_after: Option<usize>, factor: Option<f64>) -> Outcome {
    let (cfg, out) = prepare(c)?;
    if factor.is_some_and(|f| !(f.is_finite() && f > 1.0)) {
        return Err(Error::config("--factor", "must be finite and > 1").into());
    }
    let initial = cfg.initial_state()?;
    let schedule = limits::build_schedule(&cfg.schedule, &cfg.params)?;
    let options = SweepOptions {
        store: Some(out.clone()),
        stop_after,
        factor,
    };
    match limits::sweep(&initial, &cfg.noise, &schedule, &cfg.ensemble, &options)? {
        SweepOutcome::Complete(report, _) => {
            let verdicts: Vec<_> = report
                .stages
                .iter()
                .flat_map(|s| s.diagnostics.iter().map(move |d| json!({"stage": s.stage, "diagnostic": d.name, "verdict": d.verdict})))
                .collect();
            println!("{}", json!({"status": "ok", "out": out, "verdicts": verdicts}));
        }
        SweepOutcome::Incomplete { completed, total } => {
            println!("{}", json!({"status": "incomplete", "out": out, "completed": completed, "total": total}));
        }
    }
    Ok(())
}

fn run_verify(c: &Common, only: &[String], scale: f64) -> Outcome {
    let (cfg, out) = prepare(c)?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::config("--tolerance-scale", "must be finite and >= 0").into());
    }
    let names = verify::check_names();
    for s in only {
        if !names.iter().any(|n| n == s || n.split('.').next() == Some(s.as_str())) {
            return Err(Error::config("--only", format!("no check matches `{s}`")).into());
        }
    }
    let checks = verify::run_checks(only, scale, cfg.seed_root)?;
    println!("{:<28} {:>12} {:>12}  result", "check", "measured", "tolerance");
    for ch in &checks {
        let verdict = if ch.passed { "PASS" } else { "FAIL" };
        println!("{:<28} {:>12.4e} {:>12.4e}  {verdict}  {}", ch.name, ch.measured, ch.tolerance, ch.detail);
    }
    io::save_json(&out.join("verify.json"), &checks)?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed))
    }
}

fn inspect(path: &Path, config: Option<&Path>) -> Outcome {
    let mut f = fs::File::open(path).map_err(|e| Error::config("checkpoint", format!("{}: {e}", path.display())))?;
    let header = io::read_checkpoint_header(&mut f)?;
    let mut value = serde_json::to_value(&header).map_err(|e| Error::Format(e.to_string()))?;
    if let Some(p) = config {
        let cfg = RunConfig::from_path(p)?;
        value["params_match"] = json!(hex(&io::params_hash(&cfg.params)) == header.params_hash);
    }
    println!("{}", serde_json::to_string_pretty(&value).map_err(|e| Error::Format(e.to_string()))?);
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
