//! Truncated cylindrical Wiener process `W = Σ_k e_k β_k` and the
//! multiplicative coefficients `G_k = ρ F_k(ρ, u)`.
//!
//! Increments are generated by a counter-based scheme: the generator for
//! `(seed_root, path_id)` is positioned on stream `step`, so every increment is
//! a pure function of `(seed_root, path_id, step, k)` regardless of the order
//! in which paths or steps are evaluated.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::SpectralField;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Coefficient rule `F_k(ρ, u)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseFamily {
    /// `F_k = f_k·shape_k·ê`.
    #[default]
    Constant,
    /// `F_k = f_k·shape_k·ρ/(1+ρ)·ê`.
    DensitySaturating,
    /// `F_k = (f_k/2)·shape_k·tanh(u·ê)·ê`.
    VelocitySaturating,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    #[default]
    Cos,
    Sin,
}

/// One spatial mode pattern: `cos` or `sin` of `2π k·x`, pointing along `direction`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeShape {
    pub direction: usize,
    pub wave: [i64; 3],
    #[serde(default)]
    pub phase: Phase,
}

impl ModeShape {
    #[inline]
    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        let arg: f64 = (0..3).map(|a| self.wave[a] as f64 * x[a]).sum::<f64>() * std::f64::consts::TAU;
        match self.phase {
            Phase::Cos => arg.cos(),
            Phase::Sin => arg.sin(),
        }
    }
}

/// Custom mode table entry (amplitude plus shape).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeEntry {
    pub f: f64,
    #[serde(flatten)]
    pub shape: ModeShape,
}

/// Serializable description of the noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub k_modes: usize,
    pub f1: f64,
    /// Power-law exponent `p` in `f_k = f1·k^{-p}`; must exceed 1/2.
    pub decay: f64,
    pub family: NoiseFamily,
    pub seed_root: u64,
    /// Multiplies every `F_k` without changing `f_k`; values above one break
    /// the Lipschitz certificate and serve as a negative control.
    pub scale: f64,
    /// Upper bound on `Σ_{k≤K} f_k²`, if any.
    pub budget: Option<f64>,
    /// Explicit mode table overriding `f1`, `decay` and the automatic shapes.
    pub table: Option<Vec<ModeEntry>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            k_modes: 4,
            f1: 0.1,
            decay: 1.0,
            family: NoiseFamily::Constant,
            seed_root: 0,
            scale: 1.0,
            budget: None,
            table: None,
        }
    }
}

impl NoiseConfig {
    /// No noise at all.
    pub fn off() -> Self {
        Self {
            k_modes: 0,
            ..Self::default()
        }
    }
}

/// Validated noise model for a given dimension and Galerkin cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    pub family: NoiseFamily,
    pub seed_root: u64,
    pub scale: f64,
    /// Bound sequence `f_1..f_K`.
    pub f: Vec<f64>,
    pub shapes: Vec<ModeShape>,
    /// `Σ_{k>K} f_k²` for the power law (zero for tables).
    pub tail_bound: f64,
}

/// Automatic shape for 1-based mode `k`: directions cycle through the axes;
/// the first pass is spatially constant, later passes alternate cos/sin of
/// increasing wave number along the first axis, wrapped into `1..=m`.
pub fn default_shape(k: usize, dim: usize, m: usize) -> ModeShape {
    let j = k - 1;
    let direction = j % dim;
    let w = j / dim;
    if w == 0 {
        return ModeShape {
            direction,
            wave: [0; 3],
            phase: Phase::Cos,
        };
    }
    let p = ((w - 1) / 2) % m.max(1) + 1;
    ModeShape {
        direction,
        wave: [p as i64, 0, 0],
        phase: if (w - 1) % 2 == 0 { Phase::Cos } else { Phase::Sin },
    }
}

fn power_tail(f1: f64, p: f64, k: usize) -> f64 {
    // Σ_{j>k} j^{-2p}: explicit sum up to a large cutoff plus an integral remainder
    let cutoff = 1_000_000usize.max(k + 1);
    let mut s = 0.0;
    for j in (k + 1)..=cutoff {
        s += (j as f64).powf(-2.0 * p);
    }
    let c = cutoff as f64;
    s += (c + 0.5).powf(1.0 - 2.0 * p) / (2.0 * p - 1.0);
    f1 * f1 * s
}

impl NoiseModel {
    pub fn new(cfg: &NoiseConfig, dim: usize, m: usize) -> Result<Self> {
        if !cfg.scale.is_finite() || cfg.scale < 0.0 {
            return Err(Error::config("noise.scale", "must be finite and >= 0"));
        }
        let (f, shapes, tail_bound) = match &cfg.table {
            Some(table) => {
                let mut f = Vec::new();
                let mut shapes = Vec::new();
                for (i, e) in table.iter().enumerate() {
                    if !e.f.is_finite() || e.f < 0.0 {
                        return Err(Error::config(format!("noise.table[{i}].f"), "must be finite and >= 0"));
                    }
                    if e.shape.direction >= dim {
                        return Err(Error::config(format!("noise.table[{i}].direction"), "exceeds dimension"));
                    }
                    if e.shape.wave.iter().skip(dim).any(|&w| w != 0)
                        || e.shape.wave.iter().any(|w| w.unsigned_abs() as usize > m)
                    {
                        return Err(Error::config(format!("noise.table[{i}].wave"), "must lie in H_m"));
                    }
                    f.push(e.f);
                    shapes.push(e.shape.clone());
                }
                (f, shapes, 0.0)
            }
            None => {
                if cfg.k_modes > 0 {
                    if !cfg.f1.is_finite() || cfg.f1 < 0.0 {
                        return Err(Error::config("noise.f1", "must be finite and >= 0"));
                    }
                    if !(cfg.decay > 0.5) {
                        return Err(Error::config("noise.decay", "must exceed 1/2 so that Σf_k² < ∞"));
                    }
                }
                let f: Vec<f64> = (1..=cfg.k_modes).map(|k| cfg.f1 * (k as f64).powf(-cfg.decay)).collect();
                let shapes = (1..=cfg.k_modes).map(|k| default_shape(k, dim, m)).collect();
                let tail = if cfg.k_modes > 0 { power_tail(cfg.f1, cfg.decay, cfg.k_modes) } else { 0.0 };
                (f, shapes, tail)
            }
        };
        let model = Self {
            family: cfg.family,
            seed_root: cfg.seed_root,
            scale: cfg.scale,
            f,
            shapes,
            tail_bound,
        };
        if let Some(b) = cfg.budget {
            if model.sum_f_sq() > b {
                return Err(Error::config(
                    "noise.budget",
                    format!("Σf_k² = {} exceeds budget {b}", model.sum_f_sq()),
                ));
            }
        }
        Ok(model)
    }

    pub fn k_modes(&self) -> usize {
        self.f.len()
    }

    pub fn is_off(&self) -> bool {
        self.f.is_empty() || self.scale == 0.0 || self.f.iter().all(|&f| f == 0.0)
    }

    pub fn sum_f_sq(&self) -> f64 {
        self.f.iter().map(|f| f * f).sum()
    }

    /// `F_k(ρ, u)` at a point, as a 3-vector (unused axes zero).
    #[inline]
    pub fn coefficient(&self, k: usize, x: &[f64; 3], rho: f64, u: &[f64; 3]) -> [f64; 3] {
        let shape = &self.shapes[k];
        let amp = self.f[k] * self.scale * shape.eval(x);
        let mut out = [0.0; 3];
        let dir = shape.direction;
        out[dir] = match self.family {
            NoiseFamily::Constant => amp,
            NoiseFamily::DensitySaturating => amp * rho.max(0.0) / (1.0 + rho.max(0.0)),
            NoiseFamily::VelocitySaturating => 0.5 * amp * u[dir].tanh(),
        };
        out
    }

    /// `G_k = ρ F_k(ρ, u)` for every retained mode, with `G_k = 0` where `ρ ≤ 0`.
    pub fn evaluate<T: Real>(&self, rho: &SpectralField<T>, u: &SpectralField<T>) -> Vec<SpectralField<T>> {
        let grid = rho.grid();
        let d = grid.dim();
        let len = grid.len();
        (0..self.k_modes())
            .map(|k| {
                let mut vals = vec![T::zero(); d * len];
                for i in 0..len {
                    let r = rho.values()[i].to_f64_lossy();
                    if r <= 0.0 {
                        continue;
                    }
                    let x = point_f64(grid, i);
                    let uu = velocity_at(u, i);
                    let f = self.coefficient(k, &x, r, &uu);
                    for c in 0..d {
                        vals[c * len + i] = T::c(r * f[c]);
                    }
                }
                SpectralField::from_values(grid, d, vals).expect("shape")
            })
            .collect()
    }

    /// `½ ρ Σ_k |F_k|²` pointwise.
    pub fn energy_density<T: Real>(&self, rho: &SpectralField<T>, u: &SpectralField<T>) -> SpectralField<T> {
        let grid = rho.grid();
        let len = grid.len();
        let mut vals = vec![T::zero(); len];
        for (i, v) in vals.iter_mut().enumerate() {
            let r = rho.values()[i].to_f64_lossy();
            if r <= 0.0 {
                continue;
            }
            let x = point_f64(grid, i);
            let uu = velocity_at(u, i);
            let s: f64 = (0..self.k_modes())
                .map(|k| self.coefficient(k, &x, r, &uu).iter().map(|c| c * c).sum::<f64>())
                .sum();
            *v = T::c(0.5 * r * s);
        }
        SpectralField::from_values(grid, 1, vals).expect("shape")
    }

    fn path_seed(&self, path_id: u64, domain: u64) -> u64 {
        splitmix64(splitmix64(self.seed_root ^ splitmix64(path_id)) ^ domain)
    }

    /// Per-mode increments `ΔB_k ~ N(0, dt)` for `(path_id, step)`.
    pub fn sample_increment(&self, path_id: u64, step: u64, dt: f64) -> WienerIncrement {
        let db = keyed_normals(self.path_seed(path_id, 0), step, self.k_modes())
            .into_iter()
            .map(|z| z * dt.sqrt())
            .collect();
        WienerIncrement { step, dt, db }
    }

    /// Splits an increment over `dt` into two halves by a Brownian bridge.
    /// The bridge sample is keyed by `(path_id, step, level, index)`, so the
    /// refined path is as reproducible as the coarse one and the halves sum
    /// exactly to the parent.
    pub fn refine(
        &self,
        parent: &WienerIncrement,
        path_id: u64,
        level: u32,
        index: u64,
    ) -> (WienerIncrement, WienerIncrement) {
        let domain = 0xB41D_6E00_0000_0000u64 ^ ((level as u64) << 40) ^ index;
        let z = keyed_normals(self.path_seed(path_id, domain), parent.step, parent.db.len());
        let half = 0.5 * parent.dt;
        let s = (parent.dt / 4.0).sqrt();
        let first: Vec<f64> = parent.db.iter().zip(&z).map(|(b, z)| 0.5 * b + s * z).collect();
        let second: Vec<f64> = parent.db.iter().zip(&first).map(|(b, a)| b - a).collect();
        (
            WienerIncrement {
                step: parent.step,
                dt: half,
                db: first,
            },
            WienerIncrement {
                step: parent.step,
                dt: half,
                db: second,
            },
        )
    }
}

/// Certificate of the pointwise bound `‖F_k‖ + ‖∂_ρF_k‖ + ‖∇_uF_k‖ ≤ f_k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LipschitzReport {
    /// Largest observed `(‖F_k‖_∞ + ‖∂_ρF_k‖_∞ + ‖∇_uF_k‖_∞)/f_k`.
    pub max_ratio: f64,
    pub max_drho: f64,
    pub max_du: f64,
    /// Largest observed `|G_k|/(f_k(ρ + |ρu|))`.
    pub max_growth_ratio: f64,
    pub samples: usize,
    pub passed: bool,
}

/// Finite-difference scan of the coefficient bounds over sampled states.
pub fn lipschitz_certificate<T: Real>(
    model: &NoiseModel,
    states: &[(SpectralField<T>, SpectralField<T>)],
) -> LipschitzReport {
    let hstep = 1e-6;
    let mut rep = LipschitzReport {
        max_ratio: 0.0,
        max_drho: 0.0,
        max_du: 0.0,
        max_growth_ratio: 0.0,
        samples: 0,
        passed: true,
    };
    for (rho, u) in states {
        let grid = rho.grid();
        let d = grid.dim();
        for i in 0..grid.len() {
            let x = point_f64(grid, i);
            let r = rho.values()[i].to_f64_lossy().max(0.0);
            let uu = velocity_at(u, i);
            for k in 0..model.k_modes() {
                let fk = model.f[k];
                let f0 = model.coefficient(k, &x, r, &uu);
                let sup = |v: &[f64; 3]| v.iter().fold(0.0f64, |m, c| m.max(c.abs()));
                let rp = model.coefficient(k, &x, r + hstep, &uu);
                let rm = model.coefficient(k, &x, (r - hstep).max(0.0), &uu);
                let drho_den = r + hstep - (r - hstep).max(0.0);
                let drho = (0..3).fold(0.0f64, |m, c| m.max(((rp[c] - rm[c]) / drho_den).abs()));
                let mut du = 0.0f64;
                for j in 0..d {
                    let mut up = uu;
                    let mut um = uu;
                    up[j] += hstep;
                    um[j] -= hstep;
                    let fp = model.coefficient(k, &x, r, &up);
                    let fm = model.coefficient(k, &x, r, &um);
                    for c in 0..3 {
                        du = du.max(((fp[c] - fm[c]) / (2.0 * hstep)).abs());
                    }
                }
                rep.max_drho = rep.max_drho.max(drho);
                rep.max_du = rep.max_du.max(du);
                if fk > 0.0 {
                    rep.max_ratio = rep.max_ratio.max((sup(&f0) + drho + du) / fk);
                    let g = f0.iter().map(|c| (r * c).powi(2)).sum::<f64>().sqrt();
                    let unorm = uu.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let bound = fk * (r + r * unorm);
                    if bound > 0.0 {
                        rep.max_growth_ratio = rep.max_growth_ratio.max(g / bound);
                    }
                }
                rep.samples += 1;
            }
        }
    }
    // allow finite-difference slop only
    rep.passed = rep.max_ratio <= 1.0 + 1e-6 && rep.max_growth_ratio <= 1.0 + 1e-12;
    rep
}

/// Per-mode Brownian increments for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WienerIncrement {
    pub step: u64,
    pub dt: f64,
    pub db: Vec<f64>,
}

impl WienerIncrement {
    pub fn zero(step: u64, dt: f64, k_modes: usize) -> Self {
        Self {
            step,
            dt,
            db: vec![0.0; k_modes],
        }
    }
}

/// SplitMix64 finalizer, used to decorrelate seed components.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `count` standard normals from the ChaCha stream `stream` of key `seed`.
pub fn keyed_normals(seed: u64, stream: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count).map(|_| rng.sample(StandardNormal)).collect()
}

fn point_f64<T: Real>(grid: &crate::spectral::TorusGrid<T>, i: usize) -> [f64; 3] {
    let p = grid.point(i);
    [p[0].to_f64_lossy(), p[1].to_f64_lossy(), p[2].to_f64_lossy()]
}

fn velocity_at<T: Real>(u: &SpectralField<T>, i: usize) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate().take(u.comps().min(3)) {
        *o = u.component_values(c)[i].to_f64_lossy();
    }
    out
}
