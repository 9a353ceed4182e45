//! Run configuration (TOML), binary checkpoints, CSV traces and JSON summaries.

use crate::error::{Error, Result};
use crate::limits::ScheduleConfig;
use crate::montecarlo::EnsembleConfig;
use crate::noise::{NoiseConfig, NoiseModel};
use crate::scheme::DiagnosticTrace;
use crate::spectral::{SpectralField, TorusGrid};
use crate::state::{prepare_initial, FluidState, RegularizationParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

/// Serde adapters that keep non-finite floats (`inf`, `-inf`, `nan`) as
/// strings so JSON round-trips are exact.
pub mod float_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn to_repr(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn from_repr<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(E::custom(format!("invalid float `{other}`"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        to_repr(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        from_repr(Repr::deserialize(d)?)
    }

    pub mod vec {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            v.iter().map(|x| to_repr(*x)).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(from_repr).collect()
        }
    }
}

// ---------------------------------------------------------------------------
// configuration

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { dim: 1, n: 32 }
    }
}

/// Built-in initial conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialConfig {
    /// `ρ ≡ rho`, `u ≡ velocity` (first `dim` entries used).
    Constant {
        #[serde(default = "one")]
        rho: f64,
        #[serde(default)]
        velocity: [f64; 3],
    },
    /// `ρ = rho + rho_amp·sin(2π k·x)`, `u = u_amp·sin(2π k·x)·ê₀`.
    SingleMode {
        #[serde(default = "one")]
        rho: f64,
        #[serde(default)]
        rho_amp: f64,
        #[serde(default)]
        u_amp: f64,
        #[serde(default = "unit_wave")]
        wave: [i64; 3],
    },
    /// `ρ = rho + random smooth field` rescaled to sup amplitude `rho_amp`,
    /// velocity likewise with `u_amp`; coefficients drawn from `seed`.
    RandomSmooth {
        #[serde(default = "one")]
        rho: f64,
        #[serde(default)]
        rho_amp: f64,
        #[serde(default)]
        u_amp: f64,
        #[serde(default = "two")]
        modes: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn unit_wave() -> [i64; 3] {
    [1, 0, 0]
}

impl Default for InitialConfig {
    fn default() -> Self {
        InitialConfig::SingleMode {
            rho: 1.0,
            rho_amp: 0.2,
            u_amp: 0.1,
            wave: unit_wave(),
        }
    }
}

impl InitialConfig {
    /// Named presets for the `--preset` flag.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "constant" => InitialConfig::Constant {
                rho: 1.0,
                velocity: [0.0; 3],
            },
            "single-mode" => InitialConfig::default(),
            "random-smooth" => InitialConfig::RandomSmooth {
                rho: 1.0,
                rho_amp: 0.2,
                u_amp: 0.1,
                modes: 2,
                seed: 0,
            },
            other => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        })
    }

    pub fn fields(&self, grid: &TorusGrid<f64>) -> Result<(SpectralField<f64>, SpectralField<f64>)> {
        let d = grid.dim();
        Ok(match self {
            InitialConfig::Constant { rho, velocity } => (
                SpectralField::constant(grid, 1, *rho),
                SpectralField::from_fn(grid, d, |_, c| velocity[c]),
            ),
            InitialConfig::SingleMode {
                rho,
                rho_amp,
                u_amp,
                wave,
            } => {
                let phase = |x: &[f64; 3]| TAU * (0..3).map(|a| wave[a] as f64 * x[a]).sum::<f64>();
                (
                    SpectralField::from_fn(grid, 1, |x, _| rho + rho_amp * phase(x).sin()),
                    SpectralField::from_fn(grid, d, |x, c| if c == 0 { u_amp * phase(x).sin() } else { 0.0 }),
                )
            }
            InitialConfig::RandomSmooth {
                rho,
                rho_amp,
                u_amp,
                modes,
                seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let normalized = |f: SpectralField<f64>, amp: f64| {
                    let s = f.max_abs();
                    if s > 0.0 {
                        f.scale(amp / s)
                    } else {
                        f
                    }
                };
                let r = normalized(SpectralField::random_smooth(grid, 1, *modes, 0.7, &mut rng), *rho_amp);
                let u = normalized(SpectralField::random_smooth(grid, d, *modes, 0.7, &mut rng), *u_amp);
                (r.map(|v| v + rho), u)
            }
        })
    }
}

/// Per-path run settings for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunBlock {
    pub horizon: f64,
    pub cadence: usize,
    pub path_id: u64,
    /// Write a checkpoint every this many recorded rows (0: final only).
    pub checkpoint_every: usize,
    pub balances: crate::functionals::BalanceSelection,
}

impl Default for RunBlock {
    fn default() -> Self {
        Self {
            horizon: 0.1,
            cadence: 10,
            path_id: 0,
            checkpoint_every: 0,
            balances: crate::functionals::BalanceSelection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Complete description of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed_root: u64,
    pub grid: GridConfig,
    pub params: RegularizationParams<f64>,
    pub noise: NoiseConfig,
    pub initial: InitialConfig,
    pub run: RunBlock,
    pub ensemble: EnsembleConfig,
    pub schedule: ScheduleConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed_root: 0,
            grid: GridConfig::default(),
            params: RegularizationParams::default(),
            noise: NoiseConfig::default(),
            initial: InitialConfig::default(),
            run: RunBlock::default(),
            ensemble: EnsembleConfig::default(),
            schedule: ScheduleConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Effective configuration, re-parseable to an identical value.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// `seed_root` propagated into the noise and ensemble blocks.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_root = seed;
        self.noise.seed_root = seed;
        self.ensemble.seed_root = seed;
        self
    }

    pub fn grid(&self) -> Result<TorusGrid<f64>> {
        TorusGrid::new(self.grid.dim, self.grid.n)
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        NoiseModel::new(
            &NoiseConfig {
                seed_root: self.seed_root,
                ..self.noise.clone()
            },
            self.grid.dim,
            self.params.m,
        )
    }

    /// Checks every block before any computation starts.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid()?;
        self.params.validate_for(&grid)?;
        self.noise_model()?;
        self.ensemble.validate()?;
        if !self.run.horizon.is_finite() || self.run.horizon < 0.0 {
            return Err(Error::config("run.horizon", "must be finite and >= 0"));
        }
        if self.run.cadence == 0 {
            return Err(Error::config("run.cadence", "must be >= 1"));
        }
        crate::limits::build_schedule(&self.schedule, &self.params)?;
        self.initial_state().map(|_| ())
    }

    pub fn initial_state(&self) -> Result<FluidState<f64>> {
        let grid = self.grid()?;
        let (rho, u) = self.initial.fields(&grid)?;
        prepare_initial(&rho, &u, &self.params)
    }
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SNSC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// SHA-256 of the canonical JSON encoding of the parameters.
pub fn params_hash(params: &RegularizationParams<f64>) -> [u8; 32] {
    let json = serde_json::to_vec(params).expect("params serialize");
    Sha256::digest(&json).into()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dim: u32,
    pub n: u32,
    pub m: u32,
    pub t: f64,
    pub params_hash: String,
}

/// Layout (little endian): magic, version u32, d u32, N u32, m u32, t f64,
/// 32-byte parameter hash, then the complex coefficients of ρ and of each
/// momentum component as `(re, im)` f64 pairs in storage order.
pub fn write_checkpoint(w: &mut impl Write, state: &FluidState<f64>, params: &RegularizationParams<f64>) -> Result<()> {
    let g = state.grid();
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [CHECKPOINT_VERSION, g.dim() as u32, g.n() as u32, params.m as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&state.t.to_le_bytes())?;
    w.write_all(&params_hash(params))?;
    for f in [&state.rho, &state.q] {
        for c in f.forward().coeffs() {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_checkpoint_header(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let (dim, n, m) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    let t = read_f64(r)?;
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    Ok(CheckpointHeader {
        version,
        dim,
        n,
        m,
        t,
        params_hash: hash.iter().map(|b| format!("{b:02x}")).collect(),
    })
}

/// Reads a checkpoint; the velocity is recovered from `(ρ, q)` by the Gram solve.
pub fn read_checkpoint(r: &mut impl Read, gram_tol: f64) -> Result<(CheckpointHeader, FluidState<f64>)> {
    let h = read_checkpoint_header(r)?;
    let grid = TorusGrid::new(h.dim as usize, h.n as usize)?;
    let mut read_field = |comps: usize| -> Result<SpectralField<f64>> {
        let coeffs = (0..comps * grid.len())
            .map(|_| Ok(Complex::new(read_f64(r)?, read_f64(r)?)))
            .collect::<Result<Vec<_>>>()?;
        SpectralField::from_coefficients(&grid, comps, coeffs)
    };
    let rho = read_field(1)?;
    let q = read_field(grid.dim())?;
    let state = FluidState::from_momentum(rho, q, h.m as usize, gram_tol, h.t)?;
    Ok((h, state))
}

pub fn save_checkpoint(path: &Path, state: &FluidState<f64>, params: &RegularizationParams<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, state, params)?;
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// tables and summaries

/// One CSV row per trace row, with a header.
pub fn write_trace_csv(w: impl Write, trace: &DiagnosticTrace) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in &trace.rows {
        out.serialize(row).map_err(|e| Error::Format(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace_csv(path: &Path, trace: &DiagnosticTrace) -> Result<()> {
    write_trace_csv(std::fs::File::create(path)?, trace)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
