//! Time stepping of the Galerkin system: frozen-velocity transport, the
//! Euler-Maruyama momentum update with every regularization term, the
//! velocity truncation `χ_R`, a stability guard and the whole-path driver.

use crate::error::{Error, Result};
use crate::functionals::{self, BalanceSelection, BalanceTracker};
use crate::noise::{NoiseModel, WienerIncrement};
use crate::scalar::Real;
use crate::spectral::SpectralField;
use crate::state::{momentum_from_velocity, positivity_report, solve_gram, FluidState, RegularizationParams, StepMode};
use serde::Serialize;

/// Smooth bump `b(s) = exp(1 − 1/(1−s²))` on `[0,1)`, equal to 1 for `s ≤ 0`
/// and 0 for `s ≥ 1`.
pub fn bump<T: Real>(s: T) -> T {
    if s <= T::zero() {
        T::one()
    } else if s >= T::one() {
        T::zero()
    } else {
        (T::one() - T::one() / (T::one() - s * s)).exp()
    }
}

/// `b'(s) = −2s·b(s)/(1−s²)²` on `(0,1)`, zero elsewhere.
pub fn bump_derivative<T: Real>(s: T) -> T {
    if s <= T::zero() || s >= T::one() {
        T::zero()
    } else {
        let w = T::one() - s * s;
        -(s + s) * bump(s) / (w * w)
    }
}

/// Velocity cut-off: 1 for `norm ≤ R`, 0 for `norm ≥ R+1`, smooth in between.
pub fn chi_r<T: Real>(norm: T, r: T) -> T {
    bump(norm - r)
}

/// Every drift term of the momentum equation, projected to `H_m`.
#[derive(Clone, Debug)]
pub struct DriftBreakdown<T: Real> {
    /// `−div(ρ[u]_R ⊗ u)`
    pub convection: SpectralField<T>,
    /// `−χ∇(aρ^γ)`
    pub pressure: SpectralField<T>,
    /// `χ div(ρ𝔻u)`
    pub viscous: SpectralField<T>,
    /// `χ(11/10)η∇ρ^{−10}`
    pub eta_pressure: SpectralField<T>,
    /// `−r0|u|²[u]_R`
    pub rayleigh: SpectralField<T>,
    /// `−r1ρ|u|²[u]_R`
    pub drag_cubic: SpectralField<T>,
    /// `−r2[u]_R`
    pub drag_linear: SpectralField<T>,
    /// `−χε(∇ρ·∇)u`
    pub eps_cross: SpectralField<T>,
    /// `−χεΔ²u`; zero when the term is treated implicitly.
    pub eps_bilap: SpectralField<T>,
    /// `χδρ∇Δ⁹ρ`
    pub delta_pressure: SpectralField<T>,
    /// `χκρ∇(Δ√ρ/√ρ)`
    pub quantum: SpectralField<T>,
    /// `‖κρ∇(Δ√ρ/√ρ) − (κ/2)div(ρ∇²log ρ)‖₂` before projection.
    pub quantum_mismatch: T,
    pub chi: T,
}

impl<T: Real> DriftBreakdown<T> {
    pub fn terms(&self) -> [(&'static str, &SpectralField<T>); 11] {
        [
            ("convection", &self.convection),
            ("pressure", &self.pressure),
            ("viscous", &self.viscous),
            ("eta_pressure", &self.eta_pressure),
            ("rayleigh", &self.rayleigh),
            ("drag_cubic", &self.drag_cubic),
            ("drag_linear", &self.drag_linear),
            ("eps_cross", &self.eps_cross),
            ("eps_bilap", &self.eps_bilap),
            ("delta_pressure", &self.delta_pressure),
            ("quantum", &self.quantum),
        ]
    }

    pub fn total(&self) -> SpectralField<T> {
        let mut acc = self.convection.clone();
        for (_, f) in self.terms().iter().skip(1) {
            acc.add_assign(f);
        }
        acc
    }
}

/// Hessian of a scalar field, component `i·d + j`.
pub(crate) fn hessian<T: Real>(f: &SpectralField<T>) -> SpectralField<T> {
    f.gradient().gradient()
}

pub(crate) fn check_floor<T: Real>(rho: &SpectralField<T>, floor: T, context: &str) -> Result<()> {
    let min = rho.min_value();
    if !(min >= floor) {
        return Err(Error::positivity(context, min.to_f64_lossy()));
    }
    Ok(())
}

/// `2ρ∇(Δ√ρ/√ρ)` (Bohm form) and `div(ρ∇²log ρ)` (divergence form), unprojected.
pub fn quantum_forms<T: Real>(rho: &SpectralField<T>) -> (SpectralField<T>, SpectralField<T>) {
    let sq = rho.map(|v| v.sqrt());
    let bohm = sq.laplacian().zip_map(&sq, |l, s| l / s);
    let two = T::c(2.0);
    let a = bohm.gradient().times_scalar(rho).scale(two).dealias();
    let log = rho.map(|v| v.ln());
    let b = hessian(&log).times_scalar(rho).dealias().divergence().expect("tensor");
    (a, b)
}

/// Evaluates the drift at density `rho` with the (frozen) velocity `u` and
/// cut-off value `chi`. Every term carries one factor of `χ`, either directly
/// or through `[u]_R = χu`.
pub fn momentum_drift<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    params: &RegularizationParams<T>,
    chi: T,
) -> Result<DriftBreakdown<T>> {
    let m = params.m;
    let grid = rho.grid();
    let d = grid.dim();
    let zero = || SpectralField::zeros(grid, d);
    let proj = |f: SpectralField<T>| f.project_unchecked(m);
    if params.eta > T::zero() || params.kappa > T::zero() {
        check_floor(rho, params.rho_floor, "momentum drift")?;
    }
    let ub = u.scale(chi);

    // ρ u_i u_j with the first factor truncated
    let rho_ub = ub.mul_dealiased(rho);
    let mut flux = Vec::with_capacity(d * d);
    for i in 0..d {
        let ri = rho_ub.component(i);
        for j in 0..d {
            flux.push(ri.mul_dealiased(&u.component(j)));
        }
    }
    let flux = SpectralField::stack(&flux)?;
    let convection = proj(flux.divergence()?.scale(-T::one()));

    let pressure = if params.a > T::zero() {
        let p = rho.map(|v| params.a * v.powf(params.gamma));
        proj(p.gradient().scale(-chi))
    } else {
        zero()
    };

    let viscous = proj(u.deformation()?.mul_dealiased(rho).divergence()?.scale(chi));

    let eta_pressure = if params.eta > T::zero() {
        let p = rho.map(|v| v.powi(-10));
        proj(p.gradient().scale(chi * T::c(1.1) * params.eta))
    } else {
        zero()
    };

    let needs_u2 = params.r0 > T::zero() || params.r1 > T::zero();
    let u2 = if needs_u2 { u.norm_sq_pointwise().dealias() } else { SpectralField::zeros(grid, 1) };
    let u2ub = if needs_u2 { ub.mul_dealiased(&u2) } else { zero() };
    let rayleigh = if params.r0 > T::zero() { proj(u2ub.scale(-params.r0)) } else { zero() };
    let drag_cubic = if params.r1 > T::zero() {
        proj(u2ub.mul_dealiased(rho).scale(-params.r1))
    } else {
        zero()
    };
    let drag_linear = if params.r2 > T::zero() { proj(ub.scale(-params.r2)) } else { zero() };

    let (eps_cross, eps_bilap) = if params.eps > T::zero() {
        let grad_rho = rho.gradient();
        let grad_u = u.gradient();
        let len = grid.len();
        let mut vals = vec![T::zero(); d * len];
        for i in 0..d {
            for j in 0..d {
                let gr = grad_rho.component_values(j);
                let gu = grad_u.component_values(i * d + j);
                for p in 0..len {
                    vals[i * len + p] += gr[p] * gu[p];
                }
            }
        }
        let cross = SpectralField::from_values(grid, d, vals)?.dealias();
        let cross = proj(cross.scale(-chi * params.eps));
        let bilap = if params.implicit_bilap {
            zero()
        } else {
            proj(u.laplacian_power_in(2, m).scale(-chi * params.eps))
        };
        (cross, bilap)
    } else {
        (zero(), zero())
    };

    let delta_pressure = if params.delta > T::zero() {
        let d9 = rho.laplacian_power_in(9, m);
        proj(d9.gradient().mul_dealiased(rho).scale(chi * params.delta))
    } else {
        zero()
    };

    let (quantum, quantum_mismatch) = if params.kappa > T::zero() {
        let (bohm, div_form) = quantum_forms(rho);
        let half = T::c(0.5);
        let mismatch = bohm.sub(&div_form).l2_norm() * params.kappa * half;
        (proj(bohm.scale(chi * params.kappa * half)), mismatch)
    } else {
        (zero(), T::zero())
    };

    Ok(DriftBreakdown {
        convection: convection.scale(chi),
        pressure,
        viscous,
        eta_pressure,
        rayleigh,
        drag_cubic,
        drag_linear,
        eps_cross,
        eps_bilap,
        delta_pressure,
        quantum,
        quantum_mismatch,
        chi,
    })
}

/// Convenience wrapper evaluating the drift at a state with `χ_R(‖u‖)`.
pub fn momentum_drift_at<T: Real>(state: &FluidState<T>, params: &RegularizationParams<T>) -> Result<DriftBreakdown<T>> {
    let chi = chi_r(state.velocity_norm(), params.big_r);
    momentum_drift(&state.rho, &state.u, params, chi)
}

/// Advances `ρ_t + Π_m div(ρ u_b) = εΔρ` by one step: explicit advection,
/// then the exact heat factor `e^{−ε4π²|k|²dt}` per mode. The mean mode is
/// untouched, so mass is conserved to round-off.
pub fn transport_step<T: Real>(
    rho: &SpectralField<T>,
    u_frozen: &SpectralField<T>,
    eps: T,
    dt: T,
    m: usize,
    floor: T,
) -> Result<SpectralField<T>> {
    let flux = u_frozen.mul_dealiased(rho);
    let div = flux.divergence()?;
    let mut spec = rho.axpy(-dt, &div).forward();
    let tau2 = T::TAU() * T::TAU();
    spec.scale_modes(|k| {
        if k.max_abs() as usize > m {
            T::zero()
        } else {
            (-eps * tau2 * T::c(k.norm_sq() as f64) * dt).exp()
        }
    });
    let out = spec.inverse();
    check_floor(&out, floor, "transport step")?;
    Ok(out)
}

/// Explicit stability bound `c_stab / (Σ stiffness rates)`; `+∞` if every rate is zero.
/// The bilaplacian rate only counts when that term is stepped explicitly.
pub fn stability_dt<T: Real>(state: &FluidState<T>, params: &RegularizationParams<T>) -> T {
    let km = T::TAU() * T::from_usize_lossy(params.m);
    let rmax = state.rho.max_value();
    let rmin = state.rho.min_value().max(params.rho_floor);
    let usup = state.u.max_abs();
    // εΔ²u is exact/implicit unless explicitly requested
    let bilap = if params.implicit_bilap { T::zero() } else { params.eps * km.powi(4) };
    let rate = bilap
        + params.delta * rmax * km.powi(20)
        + params.kappa * km.powi(4) / rmin
        + params.a * params.gamma * rmax.powf(params.gamma - T::one()) * km * km
        + usup * km
        + params.r0 * usup * usup
        + params.r1 * rmax * usup * usup
        + params.r2;
    if rate > T::zero() {
        params.c_stab / rate
    } else {
        T::infinity()
    }
}

/// Why a step was not accepted.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Rejection {
    Positivity { min: f64, context: String },
    Solver { iterations: usize, residual: f64 },
    NonFinite,
}

impl Rejection {
    fn from_error(e: Error) -> std::result::Result<Self, Error> {
        match e {
            Error::Positivity { context, min } => Ok(Rejection::Positivity { min, context }),
            Error::Solver { iterations, residual } => Ok(Rejection::Solver { iterations, residual }),
            other => Err(other),
        }
    }
}

/// Data of one applied inner step, as needed by the balance bookkeeping:
/// the left-point state, the cut-off, the applied noise coefficients
/// `g_k = χΠ_m[G_k]` and the increments actually used.
#[derive(Clone, Debug)]
pub struct SubstepRecord<T: Real> {
    pub t: T,
    pub dt: T,
    pub rho: SpectralField<T>,
    pub q: SpectralField<T>,
    pub u: SpectralField<T>,
    pub chi: T,
    pub g: Vec<SpectralField<T>>,
    pub db: Vec<f64>,
    pub quantum_mismatch: T,
}

/// Result of a momentum step or window.
#[derive(Clone, Debug)]
pub struct StepOutcome<T: Real> {
    /// New state when accepted, the input state otherwise.
    pub state: FluidState<T>,
    pub accepted: bool,
    pub dt_used: T,
    pub rejection: Option<Rejection>,
    /// `‖u‖` left `[0, R+1]`: the discrete analogue of the stopping time `τ_R`.
    pub r_exit: bool,
    pub records: Vec<SubstepRecord<T>>,
}

/// Applied noise coefficients `χΠ_m[G_k(ρ, u)]`.
pub fn applied_noise<T: Real>(
    noise: &NoiseModel,
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    chi: T,
    m: usize,
) -> Vec<SpectralField<T>> {
    if noise.is_off() {
        return Vec::new();
    }
    noise
        .evaluate(rho, u)
        .into_iter()
        .map(|g| g.project_unchecked(m).scale(chi))
        .collect()
}

fn noise_sum<T: Real>(g: &[SpectralField<T>], db: &[f64], template: &SpectralField<T>) -> SpectralField<T> {
    let mut acc = SpectralField::zeros(template.grid(), template.comps());
    for (gk, b) in g.iter().zip(db) {
        acc.axpy_assign(T::c(*b), gk);
    }
    acc
}

/// One explicit inner step at frozen velocity: returns the advanced density
/// and the explicit momentum.
#[allow(clippy::too_many_arguments)]
fn inner_step<T: Real>(
    rho: &SpectralField<T>,
    q: &SpectralField<T>,
    u_frozen: &SpectralField<T>,
    chi: T,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    inc: &WienerIncrement,
    dt: T,
    t: T,
    record: Option<&mut Vec<SubstepRecord<T>>>,
) -> Result<(SpectralField<T>, SpectralField<T>)> {
    let drift = momentum_drift(rho, u_frozen, params, chi)?;
    let g = applied_noise(noise, rho, u_frozen, chi, params.m);
    let mut q_new = q.axpy(dt, &drift.total());
    if !g.is_empty() {
        q_new.add_assign(&noise_sum(&g, &inc.db, q));
    }
    let rho_new = transport_step(rho, &u_frozen.scale(chi), params.eps, dt, params.m, params.rho_floor)?;
    if let Some(rec) = record {
        rec.push(SubstepRecord {
            t,
            dt,
            rho: rho.clone(),
            q: q.clone(),
            u: u_frozen.clone(),
            chi,
            g,
            db: inc.db.clone(),
            quantum_mismatch: drift.quantum_mismatch,
        });
    }
    Ok((rho_new, q_new))
}

/// Re-couples velocity to momentum at the end of a window. With the implicit
/// bilaplacian, solves `(M[ρ] + τεχΔ²)u = q` and sets `q = M[ρ]u`.
fn recouple<T: Real>(
    rho: SpectralField<T>,
    q: SpectralField<T>,
    guess: &SpectralField<T>,
    chi: T,
    tau: T,
    params: &RegularizationParams<T>,
    t: T,
) -> Result<FluidState<T>> {
    let shift = if params.implicit_bilap { tau * params.eps * chi } else { T::zero() };
    let sol = solve_gram(&rho, &q, params.m, shift, params.gram_tol, Some(guess))?;
    let q = if shift > T::zero() {
        momentum_from_velocity(&rho, &sol.solution, params.m)?
    } else {
        q
    };
    Ok(FluidState {
        rho,
        q,
        u: sol.solution,
        t,
    })
}

fn finish<T: Real>(
    input: &FluidState<T>,
    result: Result<FluidState<T>>,
    dt: T,
    params: &RegularizationParams<T>,
    records: Vec<SubstepRecord<T>>,
) -> Result<StepOutcome<T>> {
    match result {
        Ok(state) => {
            if !state.is_valid(params.rho_floor) {
                return Ok(StepOutcome {
                    state: input.clone(),
                    accepted: false,
                    dt_used: dt,
                    rejection: Some(if state.rho.is_finite() && state.q.is_finite() {
                        Rejection::Positivity {
                            min: state.rho.min_value().to_f64_lossy(),
                            context: "step result".into(),
                        }
                    } else {
                        Rejection::NonFinite
                    }),
                    r_exit: false,
                    records: Vec::new(),
                });
            }
            let r_exit = state.velocity_norm() > params.big_r + T::one();
            Ok(StepOutcome {
                state,
                accepted: true,
                dt_used: dt,
                rejection: None,
                r_exit,
                records,
            })
        }
        Err(e) => Ok(StepOutcome {
            state: input.clone(),
            accepted: false,
            dt_used: dt,
            rejection: Some(Rejection::from_error(e)?),
            r_exit: false,
            records: Vec::new(),
        }),
    }
}

/// One coupled Euler-Maruyama step of length `dt` with the given increment.
pub fn momentum_step<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    increment: &WienerIncrement,
    dt: T,
) -> Result<StepOutcome<T>> {
    momentum_step_recorded(state, params, noise, increment, dt, false)
}

fn momentum_step_recorded<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    increment: &WienerIncrement,
    dt: T,
    record: bool,
) -> Result<StepOutcome<T>> {
    let chi = chi_r(state.velocity_norm(), params.big_r);
    let mut records = Vec::new();
    let result = inner_step(
        &state.rho,
        &state.q,
        &state.u,
        chi,
        params,
        noise,
        increment,
        dt,
        state.t,
        record.then_some(&mut records),
    )
    .and_then(|(rho, q)| recouple(rho, q, &state.u, chi, dt, params, state.t + dt));
    finish(state, result, dt, params, records)
}

/// Increments for one window at refinement level `level` (each base
/// increment split into `2^level` Brownian-bridge pieces).
pub fn window_increments(
    noise: &NoiseModel,
    path_id: u64,
    first_step: u64,
    substeps: usize,
    dt: f64,
    level: u32,
) -> Vec<WienerIncrement> {
    let mut out = Vec::with_capacity(substeps << level);
    for j in 0..substeps as u64 {
        let base = if noise.is_off() {
            WienerIncrement::zero(first_step + j, dt, noise.k_modes())
        } else {
            noise.sample_increment(path_id, first_step + j, dt)
        };
        let mut pieces = vec![base];
        for l in 1..=level {
            let mut next = Vec::with_capacity(pieces.len() * 2);
            for (idx, p) in pieces.iter().enumerate() {
                let (a, b) = noise.refine(p, path_id, l, idx as u64);
                next.push(a);
                next.push(b);
            }
            pieces = next;
        }
        out.extend(pieces);
    }
    out
}

/// Advances one window `[nh, (n+1)h]` (or one step in coupled mode) at a
/// fixed refinement level.
#[allow(clippy::too_many_arguments)]
fn window_at_level<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    path_id: u64,
    window: u64,
    level: u32,
    record: bool,
) -> Result<StepOutcome<T>> {
    let s = params.substeps();
    let pieces = 1usize << level;
    let dt = params.dt / T::from_usize_lossy(pieces);
    let incs = window_increments(noise, path_id, window * s as u64, s, params.dt.to_f64_lossy(), level);
    match params.mode {
        StepMode::Coupled => {
            let mut cur = state.clone();
            let mut records = Vec::new();
            for inc in &incs {
                let out = momentum_step_recorded(&cur, params, noise, inc, dt, record)?;
                if !out.accepted {
                    return Ok(StepOutcome {
                        state: state.clone(),
                        records: Vec::new(),
                        ..out
                    });
                }
                records.extend(out.records);
                cur = out.state;
                if out.r_exit {
                    return Ok(StepOutcome {
                        state: cur,
                        accepted: true,
                        dt_used: dt,
                        rejection: None,
                        r_exit: true,
                        records,
                    });
                }
            }
            Ok(StepOutcome {
                state: cur,
                accepted: true,
                dt_used: dt,
                rejection: None,
                r_exit: false,
                records,
            })
        }
        StepMode::Frozen => {
            let chi = chi_r(state.velocity_norm(), params.big_r);
            let mut rho = state.rho.clone();
            let mut q = state.q.clone();
            let mut t = state.t;
            let mut records = Vec::new();
            let mut result = Ok(());
            for inc in &incs {
                match inner_step(&rho, &q, &state.u, chi, params, noise, inc, dt, t, record.then_some(&mut records)) {
                    Ok((r, qq)) => {
                        rho = r;
                        q = qq;
                        t += dt;
                    }
                    Err(e) => {
                        result = Err(e);
                        break;
                    }
                }
            }
            let h = dt * T::from_usize_lossy(incs.len());
            let res = result.and_then(|_| recouple(rho, q, &state.u, chi, h, params, state.t + h));
            finish(state, res, dt, params, records)
        }
    }
}

/// One window with positivity handling: on rejection the window is retried
/// with `dt` halved (increments refined by Brownian bridges) up to
/// `params.max_retries` times. `min_level` lets the driver impose the
/// stability guard.
pub fn window_step<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    path_id: u64,
    window: u64,
) -> Result<StepOutcome<T>> {
    window_step_from(state, params, noise, path_id, window, 0, false)
}

fn window_step_from<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    path_id: u64,
    window: u64,
    min_level: u32,
    record: bool,
) -> Result<StepOutcome<T>> {
    let mut last = None;
    for level in min_level..=min_level + params.max_retries as u32 {
        let out = window_at_level(state, params, noise, path_id, window, level, record)?;
        if out.accepted {
            return Ok(out);
        }
        last = Some(out);
    }
    Ok(last.expect("at least one attempt"))
}

/// Deepest refinement the driver will take to satisfy the stability guard.
pub const MAX_GUARD_LEVEL: u32 = 16;

/// Refinement level needed so that `dt/2^level ≤ dt_max`.
pub fn guard_level<T: Real>(dt: T, dt_max: T) -> u32 {
    let mut level = 0;
    let mut h = dt;
    while h > dt_max && level < 40 {
        h = h / T::c(2.0);
        level += 1;
    }
    level
}

/// One row of the per-path time series.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub energy: f64,
    pub energy_balance_form: f64,
    pub bd_entropy: f64,
    pub mv: f64,
    pub mv_exact: f64,
    pub mass: f64,
    pub min_rho: f64,
    pub max_rho: f64,
    pub vacuum_fraction: f64,
    pub u_norm: f64,
    pub u_sup: f64,
    pub divu_sup: f64,
    pub chi: f64,
    pub dissipation_viscous: f64,
    pub dissipation_eps: f64,
    pub dissipation_damping: f64,
    pub dissipation_energy: f64,
    pub dissipation_bd: f64,
    pub residual_energy: f64,
    pub residual_bd: f64,
    pub residual_mv: f64,
    pub quantum_mismatch: f64,
    pub dt_used: f64,
    pub r_exit: bool,
}

/// Time series plus run metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiagnosticTrace {
    pub path_id: u64,
    pub rows: Vec<TraceRow>,
    /// Set when integration stopped early.
    pub failure: Option<String>,
    /// First time `‖u‖` exceeded `R+1`, if it did.
    pub r_exit_time: Option<f64>,
    pub windows: u64,
}

/// What [`run_path`] should record.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    /// Record a trace row every this many windows (and always at the end).
    pub cadence: usize,
    /// Keep a state snapshot at every recorded row.
    pub keep_snapshots: bool,
    /// Keep every inner-step record (for offline residuals).
    pub keep_records: bool,
    pub balances: BalanceSelection,
    pub vacuum_threshold: f64,
    /// Stop at the first `R`-exit instead of continuing.
    pub stop_at_r_exit: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            cadence: 1,
            keep_snapshots: false,
            keep_records: false,
            balances: BalanceSelection::default(),
            vacuum_threshold: 1e-3,
            stop_at_r_exit: false,
        }
    }
}

/// Everything produced by one trajectory.
#[derive(Clone, Debug)]
pub struct PathResult<T: Real> {
    pub trace: DiagnosticTrace,
    pub final_state: FluidState<T>,
    pub snapshots: Vec<FluidState<T>>,
    pub records: Vec<SubstepRecord<T>>,
}

/// Integrates one path to `horizon`, recording diagnostics at the cadence.
/// The horizon is rounded to a whole number of windows.
pub fn run_path<T: Real>(
    initial: &FluidState<T>,
    params: &RegularizationParams<T>,
    noise: &NoiseModel,
    path_id: u64,
    horizon: T,
    options: &RunOptions,
) -> Result<PathResult<T>> {
    params.validate_for(initial.grid())?;
    let window_len = params.dt * T::from_usize_lossy(params.substeps());
    let windows = (horizon / window_len).to_f64_lossy().round().max(0.0) as u64;
    let mut tracker = BalanceTracker::new(initial, params, options.balances)?;
    let mut trace = DiagnosticTrace {
        path_id,
        ..Default::default()
    };
    let mut snapshots = Vec::new();
    let mut all_records = Vec::new();
    let mut state = initial.clone();
    let mut last_dt = params.dt;
    let mut last_mismatch = T::zero();
    let cadence = options.cadence.max(1) as u64;

    let row = |state: &FluidState<T>, tracker: &BalanceTracker<T>, dt: T, mismatch: T, r_exit: bool| -> Result<TraceRow> {
        functionals::trace_row(state, params, tracker, options.vacuum_threshold)
            .map(|mut r| {
                r.dt_used = dt.to_f64_lossy();
                r.quantum_mismatch = mismatch.to_f64_lossy();
                r.r_exit = r_exit;
                r
            })
    };

    trace.rows.push(row(&state, &tracker, last_dt, last_mismatch, false)?);
    if options.keep_snapshots {
        snapshots.push(state.clone());
    }
    let record = options.keep_records || options.balances.any();
    for w in 0..windows {
        let level = guard_level(params.dt, stability_dt(&state, params));
        if level > MAX_GUARD_LEVEL {
            trace.failure = Some(format!(
                "window {w}: stability guard needs dt/2^{level}, beyond the refinement cap 2^{MAX_GUARD_LEVEL}"
            ));
            break;
        }
        let out = window_step_from(&state, params, noise, path_id, w, level, record)?;
        if !out.accepted {
            let why = out.rejection.map(|r| format!("{r:?}")).unwrap_or_default();
            trace.failure = Some(format!("window {w} rejected after retries: {why}"));
            break;
        }
        for rec in &out.records {
            tracker.push(rec)?;
            last_mismatch = rec.quantum_mismatch;
        }
        if options.keep_records {
            all_records.extend(out.records);
        }
        state = out.state;
        last_dt = out.dt_used;
        trace.windows = w + 1;
        let last = w + 1 == windows;
        if out.r_exit && trace.r_exit_time.is_none() {
            trace.r_exit_time = Some(state.t.to_f64_lossy());
        }
        if (w + 1) % cadence == 0 || last || (out.r_exit && options.stop_at_r_exit) {
            tracker.observe(&state)?;
            trace.rows.push(row(&state, &tracker, last_dt, last_mismatch, out.r_exit)?);
            if options.keep_snapshots {
                snapshots.push(state.clone());
            }
        }
        if out.r_exit && options.stop_at_r_exit {
            break;
        }
    }
    Ok(PathResult {
        trace,
        final_state: state,
        snapshots,
        records: all_records,
    })
}

/// `‖div u‖_∞` of the current velocity.
pub fn divergence_sup<T: Real>(u: &SpectralField<T>) -> T {
    u.divergence().map(|d| d.max_abs()).unwrap_or(T::zero())
}

/// Density report helper shared with the trace.
pub fn density_extrema<T: Real>(rho: &SpectralField<T>, threshold: f64) -> (f64, f64, f64) {
    let rep = positivity_report(rho, T::c(threshold));
    (rep.min_value, rho.max_value().to_f64_lossy(), rep.vacuum_fraction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseConfig, NoiseFamily};
    use crate::spectral::TorusGrid;
    use crate::state::prepare_initial;
    use std::f64::consts::{PI, TAU};

    fn grid(d: usize, n: usize) -> TorusGrid<f64> {
        TorusGrid::new(d, n).unwrap()
    }

    fn quiet() -> RegularizationParams<f64> {
        RegularizationParams {
            gamma: 1.5,
            ..RegularizationParams::inviscid()
        }
    }

    fn smooth_state(g: &TorusGrid<f64>, p: &RegularizationParams<f64>, amp_u: f64) -> FluidState<f64> {
        let rho = SpectralField::from_fn(g, 1, |x, _| 1.0 + 0.2 * (TAU * x[0]).sin());
        let u = SpectralField::from_fn(g, g.dim(), |x, c| if c == 0 { amp_u * (TAU * x[0]).sin() } else { 0.0 });
        prepare_initial(&rho, &u, p).unwrap()
    }

    #[test]
    fn chi_examples() {
        let r = 10.0;
        assert_eq!(chi_r(5.0, r), 1.0);
        assert_eq!(chi_r(12.0, r), 0.0);
        let mid = chi_r(10.5, r);
        assert!(mid > 0.0 && mid < 1.0);
        let mut prev = 1.0;
        for i in 0..=1000 {
            let v = chi_r(r + i as f64 / 1000.0, r);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn heat_kernel_oracle() {
        let g = grid(1, 32);
        let (eps, dt) = (1e-2, 0.05);
        let rho = SpectralField::from_fn(&g, 1, |x, _| 2.0 + 0.3 * (TAU * x[0]).cos() + 0.1 * (TAU * 5.0 * x[0]).sin());
        let u = SpectralField::zeros(&g, 1);
        let out = transport_step(&rho, &u, eps, dt, 8, 1e-8).unwrap();
        let (a, b) = (rho.forward(), out.forward());
        for k in [0i64, 1, 5] {
            let w = crate::spectral::WaveVector([k, 0, 0]);
            let expect = a.get(0, w) * (-eps * 4.0 * PI * PI * (k * k) as f64 * dt).exp();
            assert!((b.get(0, w) - expect).norm() <= 1e-10 * expect.norm());
        }
        let same = transport_step(&rho, &u, 0.0, dt, 8, 1e-8).unwrap();
        assert!(same.sub(&rho).max_abs() < 1e-13);
    }

    #[test]
    fn constant_advection_translates() {
        let g = grid(1, 32);
        let f = |x: f64| 1.0 + 0.3 * (TAU * x).sin();
        let rho0 = SpectralField::from_fn(&g, 1, |x, _| f(x[0]));
        let u = SpectralField::constant(&g, 1, 0.5);
        let err = |steps: usize| {
            let dt = 0.2 / steps as f64;
            let mut rho = rho0.clone();
            for _ in 0..steps {
                rho = transport_step(&rho, &u, 0.0, dt, 8, 1e-8).unwrap();
            }
            let exact = SpectralField::from_fn(&g, 1, |x, _| f(x[0] - 0.1));
            rho.sub(&exact).max_abs()
        };
        let (e1, e2) = (err(100), err(200));
        assert!(e1 < 5e-2, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.3, "{}", e1 / e2);
    }

    #[test]
    fn drift_examples() {
        let g = grid(2, 16);
        let p = RegularizationParams::<f64> { m: 5, ..Default::default() };
        let rho = SpectralField::constant(&g, 1, 1.0);
        let zero = SpectralField::zeros(&g, 2);
        let b = momentum_drift(&rho, &zero, &p, 1.0).unwrap();
        for (name, f) in b.terms() {
            assert!(f.max_abs() < 1e-12, "{name}");
        }

        let u = SpectralField::from_fn(&g, 2, |x, c| if c == 0 { (TAU * x[0]).sin() } else { 0.0 });
        let b = momentum_drift(&rho, &u, &p, 1.0).unwrap();
        let expect = u.scale(-4.0 * PI * PI);
        assert!(b.viscous.sub(&expect).max_abs() < 1e-10);

        let c = SpectralField::from_fn(&g, 2, |_, c| [0.3, -0.7][c]);
        let b = momentum_drift(&rho, &c, &p, 1.0).unwrap();
        assert!(b.drag_linear.sub(&c.scale(-p.r2)).max_abs() < 1e-14);
        let total = b.total();
        let mut sum = SpectralField::zeros(&g, 2);
        for (_, f) in b.terms() {
            sum.add_assign(f);
        }
        assert!(total.sub(&sum).max_abs() == 0.0);
    }

    #[test]
    fn zero_problem_keeps_momentum() {
        let g = grid(1, 32);
        let p = RegularizationParams { a: 0.0, ..quiet() };
        let s = smooth_state(&g, &p, 0.0);
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let inc = WienerIncrement::zero(0, p.dt, noise.k_modes());
        let out = momentum_step(&s, &p, &noise, &inc, p.dt).unwrap();
        assert!(out.accepted);
        assert!(out.state.q.sub(&s.q).max_abs() < 1e-13);
    }

    #[test]
    fn linear_drag_decay() {
        let g = grid(1, 32);
        let p = RegularizationParams {
            a: 0.0,
            r2: 2.0,
            dt: 1e-3,
            h: 1e-3,
            ..quiet()
        };
        let rho = SpectralField::constant(&g, 1, 1.0);
        let u = SpectralField::constant(&g, 1, 0.5);
        let s0 = FluidState::from_velocity(rho, u, p.m, 0.0).unwrap();
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let err = |dt: f64| {
            let pp = RegularizationParams { dt, h: dt, ..p.clone() };
            let mut s = s0.clone();
            let steps = (0.5 / dt).round() as usize;
            for _ in 0..steps {
                let inc = WienerIncrement::zero(0, dt, noise.k_modes());
                s = momentum_step(&s, &pp, &noise, &inc, dt).unwrap().state;
            }
            s.q.sub(&s0.q.scale((-1.0f64).exp())).max_abs()
        };
        let (e1, e2) = (err(2e-3), err(1e-3));
        assert!(e1 < 5e-3, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.2, "{}", e1 / e2);
    }

    #[test]
    fn stability_guard_examples() {
        let g = grid(1, 64);
        let p = RegularizationParams {
            gamma: 1.5,
            ..RegularizationParams::inviscid()
        };
        let rho = SpectralField::constant(&g, 1, 1.0);
        let s = FluidState::from_velocity(rho.clone(), SpectralField::zeros(&g, 1), 8, 0.0).unwrap();
        assert!(stability_dt(&s, &p).is_infinite());
        let pd = RegularizationParams { delta: 1.0, ..p.clone() };
        let pd2 = RegularizationParams { m: 16, ..pd.clone() };
        let ratio = stability_dt(&s, &pd) / stability_dt(&s, &pd2);
        assert!((ratio / 2f64.powi(20) - 1.0).abs() < 1e-6);
        assert_eq!(guard_level(1e-3, f64::INFINITY), 0);
        assert_eq!(guard_level(1e-3, 3e-4), 2);
    }

    #[test]
    fn zero_velocity_window_only_diffuses() {
        let g = grid(1, 32);
        let p = RegularizationParams { a: 0.0, eps: 1e-2, ..quiet() };
        let s = smooth_state(&g, &p, 0.0);
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let out = window_step(&s, &p, &noise, 0, 0).unwrap();
        let expect = transport_step(&s.rho, &s.u, p.eps, p.dt, p.m, p.rho_floor).unwrap();
        assert!(out.state.rho.sub(&expect).max_abs() < 1e-14);
        assert!(out.state.u.max_abs() < 1e-14);
    }

    #[test]
    fn run_path_zero_horizon_and_determinism() {
        let g = grid(1, 32);
        let p = RegularizationParams { dt: 1e-3, h: 1e-3, ..Default::default() };
        let s = smooth_state(&g, &p, 0.1);
        let cfg = NoiseConfig {
            family: NoiseFamily::DensitySaturating,
            seed_root: 7,
            ..Default::default()
        };
        let noise = NoiseModel::new(&cfg, 1, p.m).unwrap();
        let opts = RunOptions::default();
        let r0 = run_path(&s, &p, &noise, 3, 0.0, &opts).unwrap();
        assert_eq!(r0.trace.rows.len(), 1);
        let a = run_path(&s, &p, &noise, 3, 0.02, &opts).unwrap();
        let b = run_path(&s, &p, &noise, 3, 0.02, &opts).unwrap();
        assert_eq!(format!("{:?}", a.trace), format!("{:?}", b.trace));
        assert_eq!(a.trace.rows.len(), 21);
        assert!(a.trace.failure.is_none());
        let m0 = a.trace.rows[0].mass;
        for r in &a.trace.rows {
            assert!((r.mass - m0).abs() <= 1e-10 * m0);
        }
    }

    fn small() -> (TorusGrid<f64>, NoiseModel) {
        (grid(1, 16), NoiseModel::new(&NoiseConfig::off(), 1, 4).unwrap())
    }

    fn no_balances() -> RunOptions {
        RunOptions {
            balances: crate::functionals::BalanceSelection::none(),
            ..Default::default()
        }
    }

    #[test]
    fn first_order_self_convergence() {
        let (g, noise) = small();
        let base = RegularizationParams {
            m: 4,
            eps: 1e-3,
            kappa: 1e-4,
            eta: 1e-4,
            ..Default::default()
        };
        let s = smooth_state(&g, &base, 0.3);
        let run = |dt: f64| {
            let p = RegularizationParams { dt, h: dt, ..base.clone() };
            let r = run_path(&s, &p, &noise, 0, 0.1, &no_balances()).unwrap();
            assert_eq!(r.trace.rows.last().unwrap().dt_used, dt);
            r.final_state
        };
        let reference = run(4e-4 / 8.0);
        let e1 = run(4e-4).q.sub(&reference.q).l2_norm();
        let e2 = run(2e-4).q.sub(&reference.q).l2_norm();
        // errors against a dt/8 reference scale as (1 − 1/8)/(1/2 − 1/8)
        let ratio = e1 / e2;
        assert!((ratio - 7.0 / 3.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn frozen_and_coupled_agree_to_first_order() {
        let (g, noise) = small();
        let base = RegularizationParams { m: 4, eps: 1e-3, dt: 1e-4, ..Default::default() };
        let s = smooth_state(&g, &base, 0.3);
        let coupled = run_path(&s, &RegularizationParams { h: base.dt, ..base.clone() }, &noise, 0, 0.1, &no_balances())
            .unwrap()
            .final_state;
        let diff = |h: f64| {
            let p = RegularizationParams { h, mode: StepMode::Frozen, ..base.clone() };
            run_path(&s, &p, &noise, 0, 0.1, &no_balances()).unwrap().final_state.q.sub(&coupled.q).l2_norm()
        };
        let (d1, d2) = (diff(4e-3), diff(2e-3));
        let ratio = d1 / d2;
        assert!(ratio > 1.5 && ratio < 2.6, "{ratio}");
    }

    #[test]
    fn euler_energy_first_order() {
        let (g, noise) = small();
        let base = RegularizationParams { a: 1.0, m: 4, ..quiet() };
        let s = smooth_state(&g, &base, 0.2);
        let drift = |dt: f64| {
            let p = RegularizationParams { dt, h: dt, ..base.clone() };
            let tr = run_path(&s, &p, &noise, 0, 0.1, &RunOptions::default()).unwrap().trace;
            // viscosity cannot be switched off: conservation holds once its dissipation is booked
            tr.rows.last().unwrap().residual_energy.abs()
        };
        let (d1, d2) = (drift(4e-4), drift(2e-4));
        assert!(d1 < 1e-4, "{d1}");
        assert!((d1 / d2 - 2.0).abs() < 0.3, "{}", d1 / d2);
    }

    #[test]
    fn positivity_rejection_retries_and_fails_cleanly() {
        let g = grid(1, 32);
        let p = RegularizationParams {
            a: 0.0,
            rho_floor: 0.5,
            max_retries: 2,
            dt: 0.05,
            h: 0.05,
            ..quiet()
        };
        let rho = SpectralField::from_fn(&g, 1, |x, _| 1.0 + 0.4 * (TAU * x[0]).sin());
        let u = SpectralField::from_fn(&g, 1, |x, _| 3.0 * (TAU * x[0]).cos());
        let s = FluidState::from_velocity(rho, u, p.m, 0.0).unwrap();
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let tr = run_path(&s, &p, &noise, 0, 1.0, &RunOptions::default()).unwrap();
        assert!(tr.trace.failure.is_some());
        for row in &tr.trace.rows {
            assert!(row.min_rho >= 0.5);
        }
    }

    #[test]
    fn r_exit_is_recorded() {
        let g = grid(1, 32);
        let p = RegularizationParams { a: 0.0, big_r: 0.05, ..quiet() };
        let s = smooth_state(&g, &p, 2.0);
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let opts = RunOptions {
            stop_at_r_exit: true,
            ..Default::default()
        };
        let tr = run_path(&s, &p, &noise, 0, 0.01, &opts).unwrap().trace;
        assert_eq!(tr.r_exit_time, Some(p.dt));
        assert!(tr.rows.last().unwrap().r_exit);
    }

    #[test]
    fn single_precision_step() {
        let g = TorusGrid::<f32>::new(1, 32).unwrap();
        let p = RegularizationParams::<f32> { gram_tol: 1e-5, ..Default::default() };
        let rho = SpectralField::from_fn(&g, 1, |x, _| 1.0 + 0.2 * (std::f32::consts::TAU * x[0]).sin());
        let u = SpectralField::from_fn(&g, 1, |x, _| 0.1 * (std::f32::consts::TAU * x[0]).sin());
        let s = prepare_initial(&rho, &u, &p).unwrap();
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, p.m).unwrap();
        let out = window_step(&s, &p, &noise, 0, 0).unwrap();
        assert!(out.accepted);
        assert!((out.state.mass() - s.mass()).abs() < 1e-5);
    }
}
