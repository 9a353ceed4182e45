//! Fluid state `(ρ, q = ρu, u)`, velocity recovery through the Gram operator
//! `M[ρ]z = Π_m(ρz)`, positivity diagnostics and maximum-principle bounds.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spectral::{SpectralField, TorusGrid};
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

/// How the momentum iteration couples velocity and density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepMode {
    /// Velocity frozen over windows of length `h`, re-coupled at window ends.
    Frozen,
    /// Standard Euler-Maruyama: the window collapses to a single step.
    #[default]
    Coupled,
}

/// Every constant of the regularized scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizationParams<T: Real> {
    pub a: T,
    pub gamma: T,
    pub eps: T,
    pub kappa: T,
    pub delta: T,
    pub eta: T,
    pub r0: T,
    pub r1: T,
    pub r2: T,
    /// Galerkin cutoff: modes with `max_i |k_i| <= m` are retained.
    pub m: usize,
    /// Velocity truncation level of `χ_R`.
    pub big_r: T,
    /// Mellet-Vasseur truncation index `n`.
    pub n_mv: T,
    /// Density cut-off level `K` of `φ_K`.
    pub k_cut: T,
    /// Iteration window length.
    pub h: T,
    /// Inner time step.
    pub dt: T,
    pub rho_floor: T,
    pub gram_tol: T,
    pub c_stab: T,
    /// Treat `εΔ²u` implicitly at re-coupling points instead of explicitly.
    pub implicit_bilap: bool,
    pub mode: StepMode,
    /// Number of dt-halvings tried on a positivity rejection.
    pub max_retries: usize,
}

impl<T: Real> Default for RegularizationParams<T> {
    fn default() -> Self {
        Self {
            a: T::one(),
            gamma: T::c(1.5),
            eps: T::c(1e-3),
            kappa: T::c(1e-4),
            delta: T::zero(),
            eta: T::c(1e-4),
            r0: T::c(1e-2),
            r1: T::c(1e-2),
            r2: T::c(1e-2),
            m: 8,
            big_r: T::c(100.0),
            n_mv: T::c(10.0),
            k_cut: T::c(1e3),
            h: T::c(1e-3),
            dt: T::c(1e-3),
            rho_floor: T::c(1e-8),
            gram_tol: T::c(1e-10),
            c_stab: T::c(0.5),
            implicit_bilap: true,
            mode: StepMode::Coupled,
            max_retries: 10,
        }
    }
}

impl<T: Real> RegularizationParams<T> {
    /// Every coefficient set to zero except `γ`; useful as a starting point.
    pub fn inviscid() -> Self {
        Self {
            a: T::zero(),
            eps: T::zero(),
            kappa: T::zero(),
            delta: T::zero(),
            eta: T::zero(),
            r0: T::zero(),
            r1: T::zero(),
            r2: T::zero(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("params.a", self.a),
            ("params.eps", self.eps),
            ("params.kappa", self.kappa),
            ("params.delta", self.delta),
            ("params.eta", self.eta),
            ("params.r0", self.r0),
            ("params.r1", self.r1),
            ("params.r2", self.r2),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < T::zero() {
                return Err(Error::config(name, format!("must be finite and >= 0 (got {v})")));
            }
        }
        if !self.gamma.is_finite() || self.gamma <= T::one() {
            return Err(Error::config("params.gamma", format!("must exceed 1 (got {})", self.gamma)));
        }
        let positive = [
            ("params.big_r", self.big_r),
            ("params.k_cut", self.k_cut),
            ("params.h", self.h),
            ("params.dt", self.dt),
            ("params.rho_floor", self.rho_floor),
            ("params.gram_tol", self.gram_tol),
            ("params.c_stab", self.c_stab),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= T::zero() {
                return Err(Error::config(name, format!("must be finite and > 0 (got {v})")));
            }
        }
        if !self.n_mv.is_finite() || self.n_mv < T::one() {
            return Err(Error::config("params.n_mv", format!("must be >= 1 (got {})", self.n_mv)));
        }
        if self.m == 0 {
            return Err(Error::config("params.m", "must be >= 1"));
        }
        if self.dt > self.h {
            return Err(Error::config("params.dt", format!("dt={} exceeds window h={}", self.dt, self.h)));
        }
        if self.mode == StepMode::Frozen {
            let ratio = (self.h / self.dt).to_f64_lossy();
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return Err(Error::config("params.dt", format!("dt must divide h (h/dt = {ratio})")));
            }
        }
        Ok(())
    }

    /// Validation plus grid compatibility.
    pub fn validate_for(&self, grid: &TorusGrid<T>) -> Result<()> {
        self.validate()?;
        grid.check_cutoff(self.m)
    }

    /// Number of inner steps per window.
    pub fn substeps(&self) -> usize {
        match self.mode {
            StepMode::Coupled => 1,
            StepMode::Frozen => (self.h / self.dt).to_f64_lossy().round().max(1.0) as usize,
        }
    }
}

/// Immutable snapshot of the Galerkin state.
#[derive(Clone, Debug, PartialEq)]
pub struct FluidState<T: Real> {
    pub rho: SpectralField<T>,
    pub q: SpectralField<T>,
    pub u: SpectralField<T>,
    pub t: T,
}

impl<T: Real> FluidState<T> {
    /// Builds a state from density and momentum, recovering the velocity.
    pub fn from_momentum(rho: SpectralField<T>, q: SpectralField<T>, m: usize, tol: T, t: T) -> Result<Self> {
        let u = velocity_from_momentum(&rho, &q, m, tol)?;
        Ok(Self { rho, q, u, t })
    }

    /// Builds a state from density and an `H_m` velocity.
    pub fn from_velocity(rho: SpectralField<T>, u: SpectralField<T>, m: usize, t: T) -> Result<Self> {
        let q = momentum_from_velocity(&rho, &u, m)?;
        Ok(Self { rho, q, u, t })
    }

    pub fn grid(&self) -> &TorusGrid<T> {
        self.rho.grid()
    }

    pub fn mass(&self) -> T {
        self.rho.integral()
    }

    /// `ℓ²` coefficient norm of `u`, the norm seen by `χ_R`.
    pub fn velocity_norm(&self) -> T {
        self.u.l2_norm()
    }

    pub fn is_valid(&self, floor: T) -> bool {
        self.rho.min_value() >= floor && self.q.is_finite() && self.u.is_finite()
    }
}

/// `M[ρ]u = Π_m(ρu)`.
pub fn momentum_from_velocity<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    m: usize,
) -> Result<SpectralField<T>> {
    if rho.comps() != 1 || rho.grid() != u.grid() {
        return Err(Error::Dimension("density must be a scalar field on the velocity grid".into()));
    }
    u.times_scalar(rho).project(m)
}

/// Outcome of a Gram solve.
#[derive(Clone, Debug)]
pub struct GramSolve<T: Real> {
    pub solution: SpectralField<T>,
    pub iterations: usize,
    pub residual: T,
}

/// Solves `M[ρ]u = q` for `u ∈ H_m`.
pub fn velocity_from_momentum<T: Real>(
    rho: &SpectralField<T>,
    q: &SpectralField<T>,
    m: usize,
    tol: T,
) -> Result<SpectralField<T>> {
    Ok(solve_gram(rho, q, m, T::zero(), tol, None)?.solution)
}

fn masked_spectrum<T: Real>(f: &SpectralField<T>, m: usize) -> Vec<Complex<T>> {
    let grid = f.grid();
    let len = grid.len();
    let mut coeffs = f.forward().coeffs().to_vec();
    for idx in 0..len {
        if grid.wave_vector(idx).max_abs() as usize > m {
            for c in 0..f.comps() {
                coeffs[c * len + idx] = Complex::default();
            }
        }
    }
    coeffs
}

fn cdot<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (x, y)| acc + x.re * y.re + x.im * y.im)
}

/// Preconditioned conjugate gradients for `(M[ρ] + s·Δ²)u = b` on `H_m`.
///
/// The preconditioner is the Fourier-diagonal operator `mean(ρ) + s(2π|k|)⁴`.
/// Convergence is declared when `‖r‖ ≤ tol·max(1, ‖b‖)`; the budget is
/// `10·(2m+1)^d` iterations.
pub fn solve_gram<T: Real>(
    rho: &SpectralField<T>,
    rhs: &SpectralField<T>,
    m: usize,
    shift: T,
    tol: T,
    guess: Option<&SpectralField<T>>,
) -> Result<GramSolve<T>> {
    let grid = rho.grid().clone();
    if rho.comps() != 1 || rhs.grid() != &grid {
        return Err(Error::Dimension("Gram solve needs a scalar density on the momentum grid".into()));
    }
    grid.check_cutoff(m)?;
    let rho_min = rho.min_value();
    if !(rho_min > T::zero()) {
        return Err(Error::positivity("Gram operator (singular for non-positive density)", rho_min.to_f64_lossy()));
    }
    let comps = rhs.comps();
    let len = grid.len();
    let mean_rho = rho.integral();
    let tau2 = T::TAU() * T::TAU();
    let diag: Vec<T> = (0..len)
        .map(|idx| {
            let k = grid.wave_vector(idx);
            let l = tau2 * T::c(k.norm_sq() as f64);
            mean_rho + shift * l * l
        })
        .collect();
    let keep: Vec<bool> = (0..len).map(|idx| grid.wave_vector(idx).max_abs() as usize <= m).collect();

    let apply = |z: &[Complex<T>]| -> Vec<Complex<T>> {
        let field = SpectralField::from_coefficients(&grid, comps, z.to_vec()).expect("shape");
        let mut out = masked_spectrum(&field.times_scalar(rho), m);
        if shift != T::zero() {
            for c in 0..comps {
                for idx in 0..len {
                    if keep[idx] {
                        let l2 = diag[idx] - mean_rho;
                        out[c * len + idx] = out[c * len + idx] + z[c * len + idx] * l2;
                    }
                }
            }
        }
        out
    };
    let precond = |r: &[Complex<T>]| -> Vec<Complex<T>> {
        r.iter()
            .enumerate()
            .map(|(i, z)| if keep[i % len] { *z / diag[i % len] } else { Complex::default() })
            .collect()
    };

    let b = masked_spectrum(rhs, m);
    let b_norm = cdot(&b, &b).sqrt();
    let target = tol * b_norm.max(T::one());
    let mut x = match guess {
        Some(g) => masked_spectrum(g, m),
        None => precond(&b),
    };
    let ax = apply(&x);
    let mut r: Vec<Complex<T>> = b.iter().zip(&ax).map(|(b, a)| *b - *a).collect();
    let mut res = cdot(&r, &r).sqrt();
    let cap = 10 * (2 * m + 1).pow(grid.dim() as u32);
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = cdot(&r, &z);
    let mut it = 0;
    while res > target {
        if it >= cap {
            return Err(Error::Solver {
                iterations: it,
                residual: res.to_f64_lossy(),
            });
        }
        let ap = apply(&p);
        let pap = cdot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::Solver {
                iterations: it,
                residual: res.to_f64_lossy(),
            });
        }
        let alpha = rz / pap;
        for i in 0..x.len() {
            x[i] = x[i] + p[i] * alpha;
            r[i] = r[i] - ap[i] * alpha;
        }
        res = cdot(&r, &r).sqrt();
        z = precond(&r);
        let rz_new = cdot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..p.len() {
            p[i] = z[i] + p[i] * beta;
        }
        it += 1;
    }
    Ok(GramSolve {
        solution: SpectralField::from_coefficients(&grid, comps, x)?,
        iterations: it,
        residual: res,
    })
}

/// Minimum density and the fraction of collocation points below a threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PositivityReport {
    pub min_value: f64,
    pub vacuum_fraction: f64,
}

pub fn positivity_report<T: Real>(rho: &SpectralField<T>, threshold: T) -> PositivityReport {
    let vals = rho.values();
    let below = vals.iter().filter(|&&v| v < threshold).count();
    PositivityReport {
        min_value: rho.min_value().to_f64_lossy(),
        vacuum_fraction: below as f64 / vals.len() as f64,
    }
}

/// Two-sided maximum-principle envelope at the sample times of `divu_sup`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaxPrincipleBounds {
    pub t: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl MaxPrincipleBounds {
    /// Largest violation `max(lower − min, max − upper, 0)` over the samples.
    pub fn violation(&self, mins: &[f64], maxs: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.t.len().min(mins.len()).min(maxs.len()) {
            worst = worst.max(self.lower[i] - mins[i]).max(maxs[i] - self.upper[i]);
        }
        worst
    }
}

/// `inf ρ₀·e^{−∫‖div u‖_∞}` and `sup ρ₀·e^{+∫‖div u‖_∞}`, with the time integral
/// taken by the left-point rule over the supplied `(t, ‖div u(t)‖_∞)` samples.
pub fn maximum_principle_bounds<T: Real>(
    rho0: &SpectralField<T>,
    divu_sup: &[(f64, f64)],
) -> MaxPrincipleBounds {
    let lo = rho0.min_value().to_f64_lossy();
    let hi = rho0.max_value().to_f64_lossy();
    let mut out = MaxPrincipleBounds {
        t: Vec::with_capacity(divu_sup.len()),
        lower: Vec::with_capacity(divu_sup.len()),
        upper: Vec::with_capacity(divu_sup.len()),
    };
    let mut integral = 0.0;
    for (i, &(t, _)) in divu_sup.iter().enumerate() {
        if i > 0 {
            let (t_prev, s_prev) = divu_sup[i - 1];
            integral += s_prev * (t - t_prev);
        }
        out.t.push(t);
        out.lower.push(lo * (-integral).exp());
        out.upper.push(hi * integral.exp());
    }
    out
}

/// Projects raw initial data to `H_m`. If the projected density dips below
/// `rho_floor` it is clipped there and rescaled about the floor so that the
/// total mass is unchanged; the clip/rescale/project cycle repeats until the
/// projected density clears the floor.
pub fn prepare_initial<T: Real>(
    rho_raw: &SpectralField<T>,
    u_raw: &SpectralField<T>,
    params: &RegularizationParams<T>,
) -> Result<FluidState<T>> {
    let grid = rho_raw.grid();
    params.validate_for(grid)?;
    if rho_raw.comps() != 1 || u_raw.comps() != grid.dim() || u_raw.grid() != grid {
        return Err(Error::Dimension("initial density must be scalar and velocity a d-vector".into()));
    }
    let m = params.m;
    let mass = rho_raw.integral();
    if !(mass > T::zero()) || !mass.is_finite() {
        return Err(Error::config("initial.rho", format!("total mass must be positive (got {mass})")));
    }
    let floor = params.rho_floor;
    if mass <= floor {
        return Err(Error::config("initial.rho", "total mass does not exceed rho_floor"));
    }
    let mut rho = rho_raw.project(m)?;
    let mut rounds = 0;
    while rho.min_value() < floor {
        if rounds >= 200 {
            return Err(Error::positivity("prepare_initial (clipping did not converge)", rho.min_value().to_f64_lossy()));
        }
        let clipped = rho.map(|v| v.max(floor));
        let excess = clipped.integral() - floor;
        let s = (mass - floor) / excess;
        rho = clipped.map(|v| floor + (v - floor) * s).project(m)?;
        rounds += 1;
    }
    let u = u_raw.project(m)?;
    FluidState::from_velocity(rho, u, m, T::zero())
}
