//! Scalar functionals and balance laws: energy, the B-D entropy with its
//! source decomposition, the Mellet-Vasseur functional and its Itô
//! evolution, cut-off families, the Jüngel inequality and weak-form
//! residuals of the discrete trajectories.

use crate::error::{Error, Result};
use crate::noise::Phase;
use crate::scalar::Real;
use crate::scheme::{bump, bump_derivative, chi_r, divergence_sup, quantum_forms, SubstepRecord, TraceRow};
use crate::spectral::{SpectralField, WaveVector};
use crate::state::{positivity_report, solve_gram, FluidState, RegularizationParams};
use serde::{Deserialize, Serialize};

fn require_positive<T: Real>(rho: &SpectralField<T>, context: &str) -> Result<()> {
    let min = rho.min_value();
    if !(min > T::zero()) {
        return Err(Error::positivity(context, min.to_f64_lossy()));
    }
    Ok(())
}

fn mean_of<T: Real>(values: impl Iterator<Item = T>, len: usize) -> T {
    values.fold(T::zero(), |a, v| a + v) / T::from_usize_lossy(len)
}

/// Pointwise derivatives of a scalar field up to second order.
struct Jet<T: Real> {
    d: usize,
    len: usize,
    f: Vec<T>,
    grad: SpectralField<T>,
    hess: SpectralField<T>,
}

impl<T: Real> Jet<T> {
    fn new(f: &SpectralField<T>) -> Self {
        let grad = f.gradient();
        let hess = grad.gradient();
        Self {
            d: f.grid().dim(),
            len: f.grid().len(),
            f: f.values().to_vec(),
            grad,
            hess,
        }
    }

    fn g(&self, j: usize, p: usize) -> T {
        self.grad.component_values(j)[p]
    }

    fn h(&self, i: usize, j: usize, p: usize) -> T {
        self.hess.component_values(i * self.d + j)[p]
    }

    fn grad_sq(&self, p: usize) -> T {
        (0..self.d).fold(T::zero(), |a, j| a + self.g(j, p) * self.g(j, p))
    }

    fn lap(&self, p: usize) -> T {
        (0..self.d).fold(T::zero(), |a, j| a + self.h(j, j, p))
    }

    /// `∂_i∂_j log f` at point `p`.
    fn log_hess(&self, i: usize, j: usize, p: usize) -> T {
        let f = self.f[p];
        self.h(i, j, p) / f - self.g(i, p) * self.g(j, p) / (f * f)
    }

    fn log_hess_sq(&self, p: usize) -> T {
        let mut s = T::zero();
        for i in 0..self.d {
            for j in 0..self.d {
                let v = self.log_hess(i, j, p);
                s += v * v;
            }
        }
        s
    }

    /// `Δ√f/√f = Δf/(2f) − |∇f|²/(4f²)`.
    fn bohm(&self, p: usize) -> T {
        let f = self.f[p];
        self.lap(p) / (T::c(2.0) * f) - self.grad_sq(p) / (T::c(4.0) * f * f)
    }
}

// ---------------------------------------------------------------------------
// energy

/// Weighting of the energy parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyForm {
    /// `a/γ·ρ^γ` pressure and `κ/2` capillarity weights.
    #[default]
    Printed,
    /// Weights for which the energy identity closes exactly:
    /// `a/(γ−1)·ρ^γ` (or `aρ log ρ` at `γ = 1`) and `κ`.
    Balance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport<T: Real> {
    pub kinetic: T,
    pub pressure: T,
    pub eta_part: T,
    pub quantum_part: T,
    pub delta_part: T,
    pub total: T,
}

fn pressure_potential<T: Real>(rho: T, a: T, gamma: T, form: EnergyForm) -> T {
    match form {
        EnergyForm::Printed => a / gamma * rho.powf(gamma),
        EnergyForm::Balance => {
            if (gamma - T::one()).abs() < T::c(1e-12) {
                a * rho * rho.ln()
            } else {
                a / (gamma - T::one()) * rho.powf(gamma)
            }
        }
    }
}

/// `E = ∫ ½ρ|u|² + a/γ·ρ^γ + η/10·ρ^{−10} + κ/2·|∇√ρ|² + δ/2·|∇Δ⁴ρ|²`.
pub fn energy<T: Real>(state: &FluidState<T>, params: &RegularizationParams<T>) -> Result<EnergyReport<T>> {
    energy_with(state, params, EnergyForm::Printed)
}

pub fn energy_with<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    form: EnergyForm,
) -> Result<EnergyReport<T>> {
    let rho = &state.rho;
    let half = T::c(0.5);
    if params.eta > T::zero() || params.kappa > T::zero() {
        require_positive(rho, "energy")?;
    }
    let kinetic = state.u.norm_sq_pointwise().times_scalar(rho).integral() * half;
    let pressure = if params.a > T::zero() {
        rho.map(|r| pressure_potential(r.max(T::zero()), params.a, params.gamma, form)).integral()
    } else {
        T::zero()
    };
    let eta_part = if params.eta > T::zero() {
        rho.map(|r| r.powi(-10)).integral() * params.eta / T::c(10.0)
    } else {
        T::zero()
    };
    let quantum_part = if params.kappa > T::zero() {
        let w = match form {
            EnergyForm::Printed => params.kappa * half,
            EnergyForm::Balance => params.kappa,
        };
        // |∇√ρ|² = |∇ρ|²/(4ρ)
        let g = rho.gradient().norm_sq_pointwise();
        g.zip_map(rho, |g, r| g / (T::c(4.0) * r)).integral() * w
    } else {
        T::zero()
    };
    let delta_part = if params.delta > T::zero() {
        rho.laplacian_power_in(4, params.m).gradient().norm_sq_pointwise().integral() * params.delta * half
    } else {
        T::zero()
    };
    Ok(EnergyReport {
        kinetic,
        pressure,
        eta_part,
        quantum_part,
        delta_part,
        total: kinetic + pressure + eta_part + quantum_part + delta_part,
    })
}

/// Per-unit-time energy dissipation at `(ρ, u)` with cut-off value `χ`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyDissipation<T: Real> {
    pub viscous: T,
    pub pressure_eps: T,
    pub eta_eps: T,
    pub delta_eps: T,
    pub quantum_eps: T,
    pub bilap_eps: T,
    pub rayleigh: T,
    pub drag_cubic: T,
    pub drag_linear: T,
    /// Mismatch between truncated advection and untruncated diffusion when `χ < 1`.
    pub truncation: T,
}

impl<T: Real> EnergyDissipation<T> {
    pub fn eps_total(&self) -> T {
        self.pressure_eps + self.eta_eps + self.delta_eps + self.quantum_eps + self.bilap_eps
    }

    pub fn damping_total(&self) -> T {
        self.rayleigh + self.drag_cubic + self.drag_linear
    }

    pub fn total(&self) -> T {
        self.viscous + self.eps_total() + self.damping_total() + self.truncation
    }
}

/// Parts of the dissipation that depend only on the density (diffusion of ρ
/// against the potential energies).
fn density_eps_dissipation<T: Real>(jet: &Jet<T>, rho: &SpectralField<T>, params: &RegularizationParams<T>) -> [T; 4] {
    let eps = params.eps;
    if eps == T::zero() {
        return [T::zero(); 4];
    }
    let len = jet.len;
    let pressure = if params.a > T::zero() {
        // ε(4a/γ)∫|∇ρ^{γ/2}|² = εaγ∫ρ^{γ−2}|∇ρ|²
        eps * params.a
            * params.gamma
            * mean_of((0..len).map(|p| jet.f[p].powf(params.gamma - T::c(2.0)) * jet.grad_sq(p)), len)
    } else {
        T::zero()
    };
    let eta = if params.eta > T::zero() {
        // ε(11/25)η∫|∇ρ^{−5}|² = 11εη∫ρ^{−12}|∇ρ|²
        eps * T::c(11.0) * params.eta * mean_of((0..len).map(|p| jet.f[p].powi(-12) * jet.grad_sq(p)), len)
    } else {
        T::zero()
    };
    let delta = if params.delta > T::zero() {
        eps * params.delta * rho.laplacian_power_in(5, params.m).norm_sq_pointwise().integral()
    } else {
        T::zero()
    };
    let quantum = if params.kappa > T::zero() {
        // κ∫|∇√ρ|² decays at rate (εκ/2)∫ρ|∇²log ρ|²
        eps * params.kappa * T::c(0.5) * mean_of((0..len).map(|p| jet.f[p] * jet.log_hess_sq(p)), len)
    } else {
        T::zero()
    };
    [pressure, eta, delta, quantum]
}

pub fn energy_dissipation<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    chi: T,
    params: &RegularizationParams<T>,
) -> Result<EnergyDissipation<T>> {
    let len = rho.grid().len();
    let jet = Jet::new(rho);
    if params.eps > T::zero() && (params.eta > T::zero() || params.kappa > T::zero()) {
        require_positive(rho, "energy dissipation")?;
    }
    let du = u.deformation()?;
    let viscous = chi * du.norm_sq_pointwise().times_scalar(rho).integral();
    let u2 = u.norm_sq_pointwise();
    let u4 = u2.map(|v| v * v);
    let [pressure_eps, eta_eps, delta_eps, quantum_eps] = density_eps_dissipation(&jet, rho, params);
    let bilap_eps = chi * params.eps * u.laplacian().norm_sq_pointwise().integral();
    let truncation = if params.eps > T::zero() && chi < T::one() {
        (T::one() - chi) * params.eps * T::c(0.5) * mean_of((0..len).map(|p| u2.values()[p] * jet.lap(p)), len)
    } else {
        T::zero()
    };
    Ok(EnergyDissipation {
        viscous,
        pressure_eps,
        eta_eps,
        delta_eps,
        quantum_eps,
        bilap_eps,
        rayleigh: chi * params.r0 * u4.integral(),
        drag_cubic: chi * params.r1 * u4.times_scalar(rho).integral(),
        drag_linear: chi * params.r2 * u2.integral(),
        truncation,
    })
}

// ---------------------------------------------------------------------------
// B-D entropy

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BDReport<T: Real> {
    /// `½∫ρ|u + ∇log ρ|²`
    pub modified_kinetic: T,
    /// Convex pressure potential `a/(γ−1)∫(ρ^γ − 1 − γ(ρ−1))`, zero at `ρ ≡ 1`.
    pub pressure: T,
    pub eta_part: T,
    /// `κ∫|∇√ρ|²`
    pub quantum_part: T,
    pub delta_part: T,
    /// `r2∫log₋ρ`
    pub log_minus: T,
    /// Sum without `log_minus` (the quantity whose balance is tracked).
    pub total: T,
    pub total_with_log_minus: T,
}

pub fn bd_entropy<T: Real>(state: &FluidState<T>, params: &RegularizationParams<T>) -> Result<BDReport<T>> {
    let rho = &state.rho;
    require_positive(rho, "B-D entropy")?;
    let half = T::c(0.5);
    let grad = rho.gradient();
    let d = rho.grid().dim();
    let len = rho.grid().len();
    let mut mk = T::zero();
    for p in 0..len {
        let r = rho.values()[p];
        let mut s = T::zero();
        for j in 0..d {
            let w = state.u.component_values(j)[p] + grad.component_values(j)[p] / r;
            s += w * w;
        }
        mk += r * s;
    }
    let modified_kinetic = mk / T::from_usize_lossy(len) * half;
    let pressure = if params.a > T::zero() {
        let (a, g) = (params.a, params.gamma);
        rho.map(|r| {
            if (g - T::one()).abs() < T::c(1e-12) {
                a * (r * r.ln() - r + T::one())
            } else {
                a / (g - T::one()) * (r.powf(g) - T::one() - g * (r - T::one()))
            }
        })
        .integral()
    } else {
        T::zero()
    };
    let e = energy_with(state, params, EnergyForm::Balance)?;
    let log_minus = params.r2 * rho.map(|r| -(r.min(T::one())).ln()).integral();
    let total = modified_kinetic + pressure + e.eta_part + e.quantum_part + e.delta_part;
    Ok(BDReport {
        modified_kinetic,
        pressure,
        eta_part: e.eta_part,
        quantum_part: e.quantum_part,
        delta_part: e.delta_part,
        log_minus,
        total,
        total_with_log_minus: total + log_minus,
    })
}

/// Per-unit-time dissipation and sources of the B-D balance.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BdRates<T: Real> {
    /// `ε`-terms and damping shared with the energy.
    pub energy_part: T,
    /// `∫ρ|A|²`, `A = (∇u − ∇uᵀ)/2`
    pub antisymmetric: T,
    /// `aγ∫ρ^γ|∇log ρ|²`
    pub pressure: T,
    /// `(11/25)η∫|∇ρ^{−5}|²`
    pub eta: T,
    /// `(κ/2)∫ρ|∇²log ρ|²`
    pub quantum: T,
    /// `κ∫ρ|∇log ρ|²`, reported for comparison only.
    pub quantum_gradient_variant: T,
    /// `δ∫|Δ⁵ρ|²`
    pub delta: T,
    /// Deterministic sources `I₄ … I₁₀` (index 0 ↔ `I₄`).
    pub sources: [T; 7],
    /// `ε∫∇ρ·∇Δρ/ρ`, the reduced form of `I₄`.
    pub i4_reduced: T,
}

impl<T: Real> BdRates<T> {
    pub fn dissipation(&self) -> T {
        self.energy_part + self.antisymmetric + self.pressure + self.eta + self.quantum + self.delta
    }

    pub fn source_total(&self) -> T {
        self.sources.iter().fold(T::zero(), |a, v| a + *v)
    }
}

pub fn bd_rates<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    params: &RegularizationParams<T>,
) -> Result<BdRates<T>> {
    require_positive(rho, "B-D balance")?;
    let d = rho.grid().dim();
    let len = rho.grid().len();
    let jet = Jet::new(rho);
    let ed = energy_dissipation(rho, u, T::one(), params)?;
    let energy_part = ed.eps_total() + ed.damping_total();
    let gu = u.gradient();
    let gl = |j: usize, p: usize| jet.g(j, p) / jet.f[p];
    let mut anti = T::zero();
    for p in 0..len {
        let mut s = T::zero();
        for i in 0..d {
            for j in 0..d {
                let a = (gu.component_values(i * d + j)[p] - gu.component_values(j * d + i)[p]) * T::c(0.5);
                s += a * a;
            }
        }
        anti += jet.f[p] * s;
    }
    let antisymmetric = anti / T::from_usize_lossy(len);
    let pressure = if params.a > T::zero() {
        params.a * params.gamma * mean_of((0..len).map(|p| jet.f[p].powf(params.gamma - T::c(2.0)) * jet.grad_sq(p)), len)
    } else {
        T::zero()
    };
    let eta = if params.eta > T::zero() {
        T::c(11.0) * params.eta * mean_of((0..len).map(|p| jet.f[p].powi(-12) * jet.grad_sq(p)), len)
    } else {
        T::zero()
    };
    let quantum = params.kappa * T::c(0.5) * mean_of((0..len).map(|p| jet.f[p] * jet.log_hess_sq(p)), len);
    let quantum_gradient_variant = params.kappa * mean_of((0..len).map(|p| jet.grad_sq(p) / jet.f[p]), len);
    let delta = if params.delta > T::zero() {
        params.delta * rho.laplacian_power_in(5, params.m).norm_sq_pointwise().integral()
    } else {
        T::zero()
    };

    let eps = params.eps;
    let mut sources = [T::zero(); 7];
    let mut i4_reduced = T::zero();
    if eps > T::zero() {
        // I₄ = ε∫Δρ(−Δlog ρ − ½|∇log ρ|²)
        let lap_log = |p: usize| jet.lap(p) / jet.f[p] - jet.grad_sq(p) / (jet.f[p] * jet.f[p]);
        sources[0] = eps
            * mean_of(
                (0..len).map(|p| {
                    let gl2 = jet.grad_sq(p) / (jet.f[p] * jet.f[p]);
                    jet.lap(p) * (-lap_log(p) - T::c(0.5) * gl2)
                }),
                len,
            );
        let grad_lap = rho.laplacian().gradient();
        i4_reduced = eps
            * mean_of(
                (0..len).map(|p| (0..d).fold(T::zero(), |a, j| a + jet.g(j, p) * grad_lap.component_values(j)[p]) / jet.f[p]),
                len,
            );
        // I₅ = −ε∫((∇ρ·∇)u)·∇log ρ
        sources[1] = -eps
            * mean_of(
                (0..len).map(|p| {
                    let mut s = T::zero();
                    for i in 0..d {
                        for j in 0..d {
                            s += jet.g(j, p) * gu.component_values(i * d + j)[p] * gl(i, p);
                        }
                    }
                    s
                }),
                len,
            );
        // I₆ = −ε∫div(ρu)Δρ/ρ
        let div_flux = u.times_scalar(rho).divergence()?;
        sources[2] = -eps * mean_of((0..len).map(|p| div_flux.values()[p] * jet.lap(p) / jet.f[p]), len);
        // I₇ = −ε∫Δu·∇Δlog ρ = ε∫div(Δu)·Δlog ρ
        let div_lap_u = u.laplacian().divergence()?;
        sources[3] = eps * mean_of((0..len).map(|p| div_lap_u.values()[p] * lap_log(p)), len);
    }
    let needs_u2 = params.r0 > T::zero() || params.r1 > T::zero() || params.r2 > T::zero();
    if needs_u2 {
        let u2 = u.norm_sq_pointwise();
        let (mut s8, mut s9, mut s10) = (T::zero(), T::zero(), T::zero());
        for p in 0..len {
            let ugl = (0..d).fold(T::zero(), |a, j| a + u.component_values(j)[p] * gl(j, p));
            s8 += u2.values()[p] * ugl;
            s9 += jet.f[p] * u2.values()[p] * ugl;
            s10 += ugl;
        }
        let n = T::from_usize_lossy(len);
        sources[4] = -params.r0 * s8 / n;
        sources[5] = -params.r1 * s9 / n;
        sources[6] = -params.r2 * s10 / n;
    }
    Ok(BdRates {
        energy_part,
        antisymmetric,
        pressure,
        eta,
        quantum,
        quantum_gradient_variant,
        delta,
        sources,
        i4_reduced,
    })
}

// ---------------------------------------------------------------------------
// cut-offs

/// `φ_K(ρ)`: 1 below `K`, 0 above `2K`, smooth bump in between. Returns
/// `(value, derivative)`; `|φ′_K| ≤ 2.2/K < 4/K`.
pub fn phi_k<T: Real>(rho: T, k: T) -> (T, T) {
    let s = (rho - k) / k;
    (bump(s), bump_derivative(s) / k)
}

/// `φ̃_n(y)` together with its first two derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truncation<T> {
    pub value: T,
    pub d1: T,
    pub d2: T,
}

pub fn c_n<T: Real>(n: T) -> T {
    T::E() * (T::one() + n) * (T::one() + n) - T::one()
}

/// Branchwise `φ̃_n(y)` for `y ≥ 0`.
pub fn varphi_tilde<T: Real>(y: T, n: T) -> Truncation<T> {
    let one = T::one();
    let two = T::c(2.0);
    let cn = c_n(n);
    let l = (one + y).ln();
    if y < n {
        Truncation {
            value: (one + y) * l,
            d1: one + l,
            d2: one / (one + y),
        }
    } else if y <= cn {
        let ln1n = (one + n).ln();
        Truncation {
            value: two * (one + ln1n) * y - (one + y) * l + two * (ln1n - n),
            d1: one + two * ln1n - l,
            d2: -one / (one + y),
        }
    } else {
        Truncation {
            value: T::E() * (one + n) * (one + n) - two * n - two,
            d1: T::zero(),
            d2: T::zero(),
        }
    }
}

/// `φ_n(u) = φ̃_n(|u|²)` with its gradient and Hessian in `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarphiEval<T> {
    pub value: T,
    pub gradient: [T; 3],
    pub hessian: [[T; 3]; 3],
}

pub fn varphi_n<T: Real>(u: &[T; 3], n: T) -> VarphiEval<T> {
    let y = u.iter().fold(T::zero(), |a, v| a + *v * *v);
    let t = varphi_tilde(y, n);
    let two = T::c(2.0);
    let mut gradient = [T::zero(); 3];
    let mut hessian = [[T::zero(); 3]; 3];
    for i in 0..3 {
        gradient[i] = two * t.d1 * u[i];
        for j in 0..3 {
            let id = if i == j { t.d1 } else { T::zero() };
            hessian[i][j] = two * (two * t.d2 * u[i] * u[j] + id);
        }
    }
    VarphiEval {
        value: t.value,
        gradient,
        hessian,
    }
}

/// Which Mellet-Vasseur quantity to evaluate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MvTruncation {
    Truncated(f64),
    Exact,
}

/// `∫ρ φ̃_n(|u|²)`, or `∫ρ(1+|u|²)ln(1+|u|²)` when exact.
pub fn mv_functional<T: Real>(state: &FluidState<T>, which: MvTruncation) -> T {
    let u2 = state.u.norm_sq_pointwise();
    let f = match which {
        MvTruncation::Truncated(n) => u2.map(|y| varphi_tilde(y, T::c(n)).value),
        MvTruncation::Exact => u2.map(|y| (T::one() + y) * (T::one() + y).ln()),
    };
    f.times_scalar(&state.rho).integral()
}

/// Cut stress `S` and remainder `R` of the momentum equation for `v = φ_K(ρ)u`.
#[derive(Clone, Debug)]
pub struct CutStressPair<T: Real> {
    /// Symmetric tensor, component `i·d + j`.
    pub s: SpectralField<T>,
    pub r: SpectralField<T>,
    /// `v = φ_K(ρ)u`
    pub v: SpectralField<T>,
}

pub fn cut_stress_pair<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    params: &RegularizationParams<T>,
    k: T,
) -> Result<CutStressPair<T>> {
    require_positive(rho, "cut stress")?;
    let grid = rho.grid();
    let d = grid.dim();
    let len = grid.len();
    let jet = Jet::new(rho);
    let du = u.deformation()?;
    let divu = u.divergence()?;
    let kappa = params.kappa;
    let phi: Vec<(T, T)> = rho.values().iter().map(|&r| phi_k(r, k)).collect();

    let mut s = vec![T::zero(); d * d * len];
    for p in 0..len {
        let w = jet.f[p] * phi[p].0;
        let b = kappa * jet.bohm(p);
        for i in 0..d {
            for j in 0..d {
                let id = if i == j { b } else { T::zero() };
                s[(i * d + j) * len + p] = w * (du.component_values(i * d + j)[p] + id);
            }
        }
    }

    // potential forces φ_K(∇(aρ^γ) − (11/10)η∇ρ^{−10} − δρ∇Δ⁹ρ)
    let mut force = SpectralField::zeros(grid, d);
    if params.a > T::zero() {
        force.add_assign(&rho.map(|r| params.a * r.powf(params.gamma)).gradient());
    }
    if params.eta > T::zero() {
        force.axpy_assign(-T::c(1.1) * params.eta, &rho.map(|r| r.powi(-10)).gradient());
    }
    if params.delta > T::zero() {
        let d9 = rho.laplacian_power_in(9, params.m).gradient().times_scalar(rho);
        force.axpy_assign(-params.delta, &d9);
    }
    let u2 = u.norm_sq_pointwise();

    let mut r = vec![T::zero(); d * len];
    for p in 0..len {
        let rh = jet.f[p];
        let (ph, dph) = phi[p];
        let sq = rh.sqrt();
        let lap_sqrt = sq * jet.bohm(p);
        let damp = params.r0 * u2.values()[p] + params.r1 * rh * u2.values()[p];
        for i in 0..d {
            let ui = u.component_values(i)[p];
            let grad_phi_i = dph * jet.g(i, p);
            let grad_sqrt_i = jet.g(i, p) / (T::c(2.0) * sq);
            let mut v = rh * rh * dph * ui * divu.values()[p];
            for j in 0..d {
                v += rh * dph * jet.g(j, p) * du.component_values(j * d + i)[p];
            }
            v += T::c(2.0) * kappa * ph * grad_sqrt_i * lap_sqrt;
            v += kappa * sq * grad_phi_i * lap_sqrt;
            v += ph * force.component_values(i)[p];
            v += ph * (damp * ui + params.r2 * ui);
            r[i * len + p] = v;
        }
    }
    let v = u.times_scalar(&rho.map(|r| phi_k(r, k).0));
    Ok(CutStressPair {
        s: SpectralField::from_values(grid, d * d, s)?,
        r: SpectralField::from_values(grid, d, r)?,
        v,
    })
}

/// `∫ρ φ̃_n(|φ_K(ρ)u|²)`, the quantity whose evolution the MV balance tracks.
pub fn mv_cut_functional<T: Real>(state: &FluidState<T>, k: T, n: T) -> T {
    let phi = state.rho.map(|r| phi_k(r, k).0);
    let v2 = state.u.times_scalar(&phi).norm_sq_pointwise();
    v2.map(|y| varphi_tilde(y, n).value).times_scalar(&state.rho).integral()
}

/// Deterministic rate `−∫∇_vφ_n(v)·R − ∫S:∇(∇_vφ_n(v))` (valid at `ε = 0`).
pub fn mv_rate<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    params: &RegularizationParams<T>,
    k: T,
    n: T,
) -> Result<T> {
    let pair = cut_stress_pair(rho, u, params, k)?;
    let grid = rho.grid();
    let d = grid.dim();
    let len = grid.len();
    let grad_rho = rho.gradient();
    let grad_u = u.gradient();
    let mut acc = T::zero();
    for p in 0..len {
        let (ph, dph) = phi_k(rho.values()[p], k);
        let mut v = [T::zero(); 3];
        for (i, vi) in v.iter_mut().enumerate().take(d) {
            *vi = pair.v.component_values(i)[p];
        }
        let e = varphi_n(&v, n);
        let mut term = T::zero();
        for i in 0..d {
            term -= e.gradient[i] * pair.r.component_values(i)[p];
        }
        // ∂_j G_i = Σ_l H_il ∂_j v_l, ∂_j v_l = φ'_K ∂_jρ u_l + φ_K ∂_j u_l
        for i in 0..d {
            for j in 0..d {
                let mut dg = T::zero();
                for l in 0..d {
                    let dv = dph * grad_rho.component_values(j)[p] * u.component_values(l)[p]
                        + ph * grad_u.component_values(l * d + j)[p];
                    dg += e.hessian[i][l] * dv;
                }
                term -= pair.s.component_values(i * d + j)[p] * dg;
            }
        }
        acc += term;
    }
    Ok(acc / T::from_usize_lossy(len))
}

/// Itô rate `½Σ_k∫ρφ_K² w_kᵀ∇²φ_n(v) w_k` and martingale increment
/// `Σ_k∫ρφ_K∇φ_n(v)·w_k ΔB_k` for velocity-level noise `w_k`.
pub fn mv_noise_terms<T: Real>(
    rho: &SpectralField<T>,
    u: &SpectralField<T>,
    w: &[SpectralField<T>],
    db: &[f64],
    k: T,
    n: T,
) -> (T, T) {
    let d = rho.grid().dim();
    let len = rho.grid().len();
    let (mut ito, mut mart) = (T::zero(), T::zero());
    for p in 0..len {
        let r = rho.values()[p];
        let ph = phi_k(r, k).0;
        let mut v = [T::zero(); 3];
        for (i, vi) in v.iter_mut().enumerate().take(d) {
            *vi = ph * u.component_values(i)[p];
        }
        let e = varphi_n(&v, n);
        for (wk, b) in w.iter().zip(db) {
            let mut quad = T::zero();
            let mut lin = T::zero();
            for i in 0..d {
                let wi = wk.component_values(i)[p];
                lin += e.gradient[i] * wi;
                for j in 0..d {
                    quad += wi * e.hessian[i][j] * wk.component_values(j)[p];
                }
            }
            ito += r * ph * ph * quad;
            mart += r * ph * lin * T::c(*b);
        }
    }
    let nl = T::from_usize_lossy(len);
    (ito / nl * T::c(0.5), mart / nl)
}

// ---------------------------------------------------------------------------
// identities

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JungelGap<T> {
    pub lhs: T,
    pub rhs: T,
    pub gap: T,
}

/// `∫f|∇²log f|² − (1/7)∫|∇²f^{1/2}|² − (1/8)∫|∇f^{1/4}|⁴`.
pub fn jungel_gap<T: Real>(f: &SpectralField<T>) -> Result<JungelGap<T>> {
    if f.comps() != 1 {
        return Err(Error::Dimension("Jüngel gap needs a scalar field".into()));
    }
    require_positive(f, "Jüngel inequality")?;
    let len = f.grid().len();
    let jet = Jet::new(f);
    let lhs = mean_of((0..len).map(|p| jet.f[p] * jet.log_hess_sq(p)), len);
    let root = Jet::new(&f.map(|v| v.sqrt()));
    let quarter = f.map(|v| v.sqrt().sqrt()).gradient().norm_sq_pointwise();
    let hess_sq = mean_of(
        (0..len).map(|p| {
            let mut s = T::zero();
            for i in 0..root.d {
                for j in 0..root.d {
                    s += root.h(i, j, p) * root.h(i, j, p);
                }
            }
            s
        }),
        len,
    );
    let rhs = hess_sq / T::c(7.0) + quarter.map(|v| v * v).integral() / T::c(8.0);
    Ok(JungelGap { lhs, rhs, gap: lhs - rhs })
}

/// `‖2ρ∇(Δ√ρ/√ρ) − div(ρ∇²log ρ)‖₂ / ‖ρ‖₂`.
pub fn quantum_identity_residual<T: Real>(rho: &SpectralField<T>) -> Result<T> {
    require_positive(rho, "quantum identity")?;
    let (a, b) = quantum_forms(rho);
    Ok(a.sub(&b).l2_norm() / rho.l2_norm())
}

// ---------------------------------------------------------------------------
// balance bookkeeping

/// Which balances the path driver accumulates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BalanceSelection {
    pub energy: bool,
    pub bd: bool,
    pub mv: bool,
}

impl Default for BalanceSelection {
    fn default() -> Self {
        Self {
            energy: true,
            bd: false,
            mv: false,
        }
    }
}

impl BalanceSelection {
    pub fn none() -> Self {
        Self {
            energy: false,
            bd: false,
            mv: false,
        }
    }

    pub fn all() -> Self {
        Self {
            energy: true,
            bd: true,
            mv: true,
        }
    }

    pub fn any(&self) -> bool {
        self.energy || self.bd || self.mv
    }
}

/// Integrated terms of the energy identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub initial: f64,
    pub current: f64,
    pub dissipation: f64,
    pub ito: f64,
    pub martingale: f64,
}

impl EnergyLedger {
    /// `E(t) − E(0) + ∫D − ∫Itô − martingale`.
    pub fn residual(&self) -> f64 {
        self.current - self.initial + self.dissipation - self.ito - self.martingale
    }

    pub fn relative_residual(&self) -> f64 {
        self.residual() / self.initial.abs().max(f64::MIN_POSITIVE)
    }
}

/// Integrated terms of the B-D identity; `sources[k]` is `I_{k+1}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BdLedger {
    pub initial: f64,
    pub current: f64,
    pub dissipation: f64,
    pub sources: [f64; 10],
    pub i4_reduced: f64,
    pub quantum_gradient_variant: f64,
}

impl BdLedger {
    pub fn residual(&self) -> f64 {
        self.current - self.initial + self.dissipation - self.sources.iter().sum::<f64>()
    }
}

/// Integrated terms of the Mellet-Vasseur identity.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MvLedger {
    pub initial: f64,
    pub current: f64,
    pub drift: f64,
    pub ito: f64,
    pub martingale: f64,
}

impl MvLedger {
    pub fn residual(&self) -> f64 {
        self.current - self.initial - self.drift - self.ito - self.martingale
    }
}

/// Accumulates balance terms online from the stepper's own records:
/// rates at the left point of each inner step times its `dt`, and the
/// realized increments `ΔB_k` for the stochastic integrals.
#[derive(Clone, Debug)]
pub struct BalanceTracker<T: Real> {
    params: RegularizationParams<T>,
    selection: BalanceSelection,
    pub energy: Option<EnergyLedger>,
    pub bd: Option<BdLedger>,
    pub mv: Option<MvLedger>,
    pub last_energy_dissipation: Option<EnergyDissipation<T>>,
    pub last_bd_dissipation: f64,
    /// Some record had `χ < 1`; the B-D and MV bookkeeping assume `χ = 1`.
    pub chi_active: bool,
}

impl<T: Real> BalanceTracker<T> {
    pub fn new(initial: &FluidState<T>, params: &RegularizationParams<T>, selection: BalanceSelection) -> Result<Self> {
        let mut t = Self {
            params: params.clone(),
            selection,
            energy: None,
            bd: None,
            mv: None,
            last_energy_dissipation: None,
            last_bd_dissipation: f64::NAN,
            chi_active: false,
        };
        if selection.energy {
            let e = energy_with(initial, params, EnergyForm::Balance)?.total.to_f64_lossy();
            t.energy = Some(EnergyLedger {
                initial: e,
                current: e,
                ..Default::default()
            });
        }
        if selection.bd {
            let e = bd_entropy(initial, params)?.total.to_f64_lossy();
            t.bd = Some(BdLedger {
                initial: e,
                current: e,
                ..Default::default()
            });
        }
        if selection.mv {
            let e = mv_cut_functional(initial, params.k_cut, params.n_mv).to_f64_lossy();
            t.mv = Some(MvLedger {
                initial: e,
                current: e,
                ..Default::default()
            });
        }
        Ok(t)
    }

    pub fn selection(&self) -> BalanceSelection {
        self.selection
    }

    /// Adds the contribution of one inner step.
    pub fn push(&mut self, rec: &SubstepRecord<T>) -> Result<()> {
        let p = &self.params;
        let dt = rec.dt.to_f64_lossy();
        if rec.chi < T::one() {
            self.chi_active = true;
        }
        // velocity-level noise M[ρ]^{-1} g_k, shared by every balance
        let w: Vec<SpectralField<T>> = if rec.g.is_empty() {
            Vec::new()
        } else {
            rec.g
                .iter()
                .map(|g| solve_gram(&rec.rho, g, p.m, T::zero(), p.gram_tol, None).map(|s| s.solution))
                .collect::<Result<_>>()?
        };
        let ito_energy: f64 = rec
            .g
            .iter()
            .zip(&w)
            .map(|(g, w)| 0.5 * g.dot(w).integral().to_f64_lossy())
            .sum();
        let mart_energy: f64 = rec
            .g
            .iter()
            .zip(&rec.db)
            .map(|(g, b)| g.dot(&rec.u).integral().to_f64_lossy() * b)
            .sum();

        if let Some(led) = self.energy.as_mut() {
            let diss = energy_dissipation(&rec.rho, &rec.u, rec.chi, p)?;
            led.dissipation += dt * diss.total().to_f64_lossy();
            led.ito += dt * ito_energy;
            led.martingale += mart_energy;
            self.last_energy_dissipation = Some(diss);
        }
        if let Some(led) = self.bd.as_mut() {
            let rates = bd_rates(&rec.rho, &rec.u, p)?;
            let diss = rates.dissipation().to_f64_lossy();
            led.dissipation += dt * diss;
            self.last_bd_dissipation = diss;
            led.sources[0] += mart_energy;
            led.sources[1] += dt * ito_energy;
            if !rec.g.is_empty() {
                let grad_log = rec.rho.gradient().times_scalar(&rec.rho.map(|r| T::one() / r));
                led.sources[2] += rec
                    .g
                    .iter()
                    .zip(&rec.db)
                    .map(|(g, b)| g.dot(&grad_log).integral().to_f64_lossy() * b)
                    .sum::<f64>();
            }
            for (k, s) in rates.sources.iter().enumerate() {
                led.sources[3 + k] += dt * s.to_f64_lossy();
            }
            led.i4_reduced += dt * rates.i4_reduced.to_f64_lossy();
            led.quantum_gradient_variant += dt * rates.quantum_gradient_variant.to_f64_lossy();
        }
        if let Some(led) = self.mv.as_mut() {
            let rate = mv_rate(&rec.rho, &rec.u, p, p.k_cut, p.n_mv)?;
            led.drift += dt * rate.to_f64_lossy();
            if !w.is_empty() {
                let (ito, mart) = mv_noise_terms(&rec.rho, &rec.u, &w, &rec.db, p.k_cut, p.n_mv);
                led.ito += dt * ito.to_f64_lossy();
                led.martingale += mart.to_f64_lossy();
            }
        }
        Ok(())
    }

    /// Evaluates the functionals at an observed state.
    pub fn observe(&mut self, state: &FluidState<T>) -> Result<()> {
        let p = &self.params;
        if let Some(led) = self.energy.as_mut() {
            led.current = energy_with(state, p, EnergyForm::Balance)?.total.to_f64_lossy();
        }
        if let Some(led) = self.bd.as_mut() {
            led.current = bd_entropy(state, p)?.total.to_f64_lossy();
        }
        if let Some(led) = self.mv.as_mut() {
            led.current = mv_cut_functional(state, p.k_cut, p.n_mv).to_f64_lossy();
        }
        Ok(())
    }

    pub fn energy_residual(&self) -> f64 {
        self.energy.as_ref().map_or(f64::NAN, EnergyLedger::residual)
    }

    pub fn bd_residual(&self) -> f64 {
        self.bd.as_ref().map_or(f64::NAN, BdLedger::residual)
    }

    pub fn mv_residual(&self) -> f64 {
        self.mv.as_ref().map_or(f64::NAN, MvLedger::residual)
    }
}

/// Builds one diagnostic row from a state and the tracker's ledgers.
pub fn trace_row<T: Real>(
    state: &FluidState<T>,
    params: &RegularizationParams<T>,
    tracker: &BalanceTracker<T>,
    vacuum_threshold: f64,
) -> Result<TraceRow> {
    let f = |v: T| v.to_f64_lossy();
    let e = energy(state, params)?;
    let eb = energy_with(state, params, EnergyForm::Balance)?;
    let bd = bd_entropy(state, params).map(|r| f(r.total)).unwrap_or(f64::NAN);
    let pos = positivity_report(&state.rho, T::c(vacuum_threshold));
    let diss = tracker.last_energy_dissipation.clone();
    Ok(TraceRow {
        t: f(state.t),
        energy: f(e.total),
        energy_balance_form: f(eb.total),
        bd_entropy: bd,
        mv: f(mv_functional(state, MvTruncation::Truncated(f(params.n_mv)))),
        mv_exact: f(mv_functional(state, MvTruncation::Exact)),
        mass: f(state.mass()),
        min_rho: pos.min_value,
        max_rho: f(state.rho.max_value()),
        vacuum_fraction: pos.vacuum_fraction,
        u_norm: f(state.velocity_norm()),
        u_sup: f(state.u.max_abs()),
        divu_sup: f(divergence_sup(&state.u)),
        chi: f(chi_r(state.velocity_norm(), params.big_r)),
        dissipation_viscous: diss.as_ref().map_or(f64::NAN, |d| f(d.viscous)),
        dissipation_eps: diss.as_ref().map_or(f64::NAN, |d| f(d.eps_total())),
        dissipation_damping: diss.as_ref().map_or(f64::NAN, |d| f(d.damping_total())),
        dissipation_energy: diss.as_ref().map_or(f64::NAN, |d| f(d.total())),
        dissipation_bd: tracker.last_bd_dissipation,
        residual_energy: tracker.energy_residual(),
        residual_bd: tracker.bd_residual(),
        residual_mv: tracker.mv_residual(),
        ..Default::default()
    })
}

// ---------------------------------------------------------------------------
// weak form

/// Temporal factor of a space-time test function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Temporal {
    Constant,
    /// `(1 − t/T)³`, vanishing with two derivatives at `T`.
    Cubic { horizon: f64 },
}

impl Temporal {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Temporal::Constant => 1.0,
            Temporal::Cubic { horizon } => (1.0 - t / horizon).max(0.0).powi(3),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Temporal::Constant => 0.0,
            Temporal::Cubic { horizon } => -3.0 * (1.0 - t / horizon).max(0.0).powi(2) / horizon,
        }
    }
}

/// `θ(t)·trig(2πk·x)`; the momentum test puts the spatial factor in one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub wave: [i64; 3],
    pub phase: Phase,
    pub component: usize,
    pub temporal: Temporal,
}

impl TestFunction {
    fn spatial<T: Real>(&self, state: &FluidState<T>) -> SpectralField<T> {
        let k = self.wave;
        let phase = self.phase;
        SpectralField::from_fn(state.grid(), 1, move |x, _| {
            let arg = T::TAU() * (0..3).fold(T::zero(), |a, i| a + T::c(k[i] as f64) * x[i]);
            match phase {
                Phase::Cos => arg.cos(),
                Phase::Sin => arg.sin(),
            }
        })
    }

    pub fn max_mode(&self) -> usize {
        WaveVector(self.wave).max_abs() as usize
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct WeakFormReport {
    pub mass: Vec<f64>,
    pub momentum: Vec<f64>,
    pub max_mass: f64,
    pub max_momentum: f64,
}

/// Momentum test functional `⟨drift(ρ, u), ψ e_c⟩` in integrated-by-parts form.
fn weak_momentum<T: Real>(
    rec: &SubstepRecord<T>,
    psi: &SpectralField<T>,
    c: usize,
    params: &RegularizationParams<T>,
) -> Result<T> {
    let rho = &rec.rho;
    let u = &rec.u;
    let grid = rho.grid();
    let d = grid.dim();
    let len = grid.len();
    let chi = rec.chi;
    let gpsi = psi.gradient();
    let dpsi = |j: usize, p: usize| gpsi.component_values(j)[p];
    let uc = u.component_values(c);
    let du = u.deformation()?;
    let n = T::from_usize_lossy(len);
    let mut acc = T::zero();
    for p in 0..len {
        let r = rho.values()[p];
        let mut s = T::zero();
        for j in 0..d {
            // ∫ρ χu_c u_j ∂_jψ − ∫ρ𝔻u_cj ∂_jψ
            s += chi * r * uc[p] * u.component_values(j)[p] * dpsi(j, p);
            s -= r * du.component_values(c * d + j)[p] * dpsi(j, p);
        }
        // pressure and η-pressure against div(ψe_c) = ∂_cψ
        s += params.a * r.powf(params.gamma) * dpsi(c, p);
        if params.eta > T::zero() {
            s -= T::c(1.1) * params.eta * r.powi(-10) * dpsi(c, p);
        }
        acc += s;
    }
    let mut total = acc / n;
    if params.kappa > T::zero() {
        let jet = Jet::new(rho);
        let q = mean_of(
            (0..len).map(|p| (0..d).fold(T::zero(), |a, j| a + jet.f[p] * jet.log_hess(c, j, p) * dpsi(j, p))),
            len,
        );
        total -= params.kappa * T::c(0.5) * q;
    }
    if params.eps > T::zero() {
        let lap_u = u.laplacian();
        let lap_psi = psi.laplacian();
        total -= params.eps * lap_u.component(c).dot(&lap_psi).integral();
        let grad_rho = rho.gradient();
        let gu = u.gradient();
        let cross = mean_of(
            (0..len).map(|p| {
                (0..d).fold(T::zero(), |a, j| {
                    a + grad_rho.component_values(j)[p] * gu.component_values(c * d + j)[p]
                }) * psi.values()[p]
            }),
            len,
        );
        total -= params.eps * cross;
    }
    if params.delta > T::zero() {
        let f = rho.laplacian_power_in(9, params.m).gradient().times_scalar(rho);
        total += params.delta * f.component(c).dot(psi).integral();
    }
    let u2 = u.norm_sq_pointwise();
    let damp = mean_of(
        (0..len).map(|p| {
            let coef = params.r0 * u2.values()[p] + params.r1 * rho.values()[p] * u2.values()[p] + params.r2;
            coef * uc[p] * psi.values()[p]
        }),
        len,
    );
    total -= damp;
    Ok(total * chi)
}

/// Residuals of the distributional mass and momentum equations against each
/// test function, with left-point time sums over the stepper's records.
pub fn weak_form_residual<T: Real>(
    records: &[SubstepRecord<T>],
    initial: &FluidState<T>,
    final_state: &FluidState<T>,
    params: &RegularizationParams<T>,
    tests: &[TestFunction],
) -> Result<WeakFormReport> {
    let d = initial.grid().dim();
    let t0 = initial.t.to_f64_lossy();
    let t1 = final_state.t.to_f64_lossy();
    let mut report = WeakFormReport::default();
    for test in tests {
        if test.component >= d {
            return Err(Error::config("test.component", "exceeds the spatial dimension"));
        }
        if test.max_mode() > params.m {
            return Err(Error::config("test.wave", "test function must lie in H_m"));
        }
        let psi = test.spatial(initial);
        let gpsi = psi.gradient();
        let lpsi = psi.laplacian();
        let th = &test.temporal;
        let c = test.component;

        let mut mass = th.value(t1) * final_state.rho.dot(&psi).integral().to_f64_lossy()
            - th.value(t0) * initial.rho.dot(&psi).integral().to_f64_lossy();
        let mut mom = th.value(t1) * final_state.q.component(c).dot(&psi).integral().to_f64_lossy()
            - th.value(t0) * initial.q.component(c).dot(&psi).integral().to_f64_lossy();
        for rec in records {
            let t = rec.t.to_f64_lossy();
            let dt = rec.dt.to_f64_lossy();
            let (th_v, th_d) = (th.value(t), th.derivative(t));
            let flux = rec.u.times_scalar(&rec.rho).scale(rec.chi);
            let mass_rate = th_d * rec.rho.dot(&psi).integral().to_f64_lossy()
                + th_v
                    * (flux.dot(&gpsi).integral() + params.eps * rec.rho.dot(&lpsi).integral()).to_f64_lossy();
            mass -= dt * mass_rate;
            let mom_rate = th_d * rec.q.component(c).dot(&psi).integral().to_f64_lossy()
                + th_v * weak_momentum(rec, &psi, c, params)?.to_f64_lossy();
            mom -= dt * mom_rate;
            let noise: f64 = rec
                .g
                .iter()
                .zip(&rec.db)
                .map(|(g, b)| g.component(c).dot(&psi).integral().to_f64_lossy() * b)
                .sum();
            mom -= th_v * noise;
        }
        report.mass.push(mass);
        report.momentum.push(mom);
    }
    report.max_mass = report.mass.iter().fold(0.0, |a, v| a.max(v.abs()));
    report.max_momentum = report.momentum.iter().fold(0.0, |a, v| a.max(v.abs()));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseConfig, NoiseModel};
    use crate::scheme::{run_path, RunOptions};
    use crate::spectral::TorusGrid;
    use crate::state::prepare_initial;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn grid(d: usize, n: usize) -> TorusGrid<f64> {
        TorusGrid::new(d, n).unwrap()
    }

    fn state(g: &TorusGrid<f64>, rho: impl Fn(f64) -> f64, u: impl Fn(f64) -> f64, m: usize) -> FluidState<f64> {
        let r = SpectralField::from_fn(g, 1, |x, _| rho(x[0]));
        let v = SpectralField::from_fn(g, g.dim(), |x, c| if c == 0 { u(x[0]) } else { 0.0 });
        FluidState::from_velocity(r, v, m, 0.0).unwrap()
    }

    fn pressure_only(gamma: f64) -> RegularizationParams<f64> {
        RegularizationParams {
            a: 1.0,
            gamma,
            ..RegularizationParams::inviscid()
        }
    }

    #[test]
    fn energy_examples() {
        let g = grid(1, 32);
        let p = pressure_only(2.0);
        let e = energy(&state(&g, |_| 1.0, |_| 0.0, 8), &p).unwrap();
        assert!((e.total - 0.5).abs() < 1e-14);
        let e = energy(&state(&g, |_| 1.0, |_| 1.0, 8), &p).unwrap();
        assert!((e.total - 1.0).abs() < 1e-14);
        // a = γ: a/γ·∫ρ² = ∫(1 + ½ sin)²
        let p = RegularizationParams { a: 2.0, ..pressure_only(2.0) };
        let e = energy(&state(&g, |x| 1.0 + 0.5 * (TAU * x).sin(), |_| 0.0, 8), &p).unwrap();
        assert!((e.pressure - 1.125).abs() < 1e-12);
        let full = RegularizationParams { delta: 1e-6, ..Default::default() };
        let e = energy(&state(&g, |x| 1.0 + 0.3 * (TAU * x).sin(), |x| (TAU * x).cos(), 8), &full).unwrap();
        let parts = [e.kinetic, e.pressure, e.eta_part, e.quantum_part, e.delta_part];
        assert!(parts.iter().all(|v| *v >= 0.0));
        assert!((parts.iter().sum::<f64>() - e.total).abs() <= 1e-12 * e.total);
        let vac = state(&g, |x| (TAU * x).sin(), |_| 0.0, 8);
        assert!(matches!(energy(&vac, &full), Err(Error::Positivity { .. })));
    }

    #[test]
    fn bd_examples() {
        let g = grid(1, 32);
        let p = RegularizationParams::<f64>::default();
        let b = bd_entropy(&state(&g, |_| 1.0, |_| 0.0, 8), &p).unwrap();
        assert!(b.modified_kinetic.abs() < 1e-15 && b.pressure.abs() < 1e-15);
        let pp = pressure_only(1.5);
        let b = bd_entropy(&state(&g, |_| 1.0, |_| 1.0, 8), &pp).unwrap();
        assert!((b.total - 0.5).abs() < 1e-14);
        // ½∫ρ|∇log ρ|² against a refined-grid quadrature of |ρ'|²/(2ρ)
        let rho = |x: f64| 1.0 + 0.3 * (TAU * x).sin();
        let b = bd_entropy(&state(&g, rho, |_| 0.0, 8), &pp).unwrap();
        let n = 4096;
        let fine: f64 = (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                let d = 0.3 * TAU * (TAU * x).cos();
                d * d / (2.0 * rho(x))
            })
            .sum::<f64>()
            / n as f64;
        assert!((b.modified_kinetic - fine).abs() < 1e-8);
    }

    #[test]
    fn mv_examples() {
        let g = grid(1, 16);
        let n = 10.0;
        assert_eq!(mv_functional(&state(&g, |_| 1.0, |_| 0.0, 4), MvTruncation::Truncated(n)), 0.0);
        let y0: f64 = 2.0;
        let v = mv_functional(&state(&g, |_| 1.0, |_| y0.sqrt(), 4), MvTruncation::Truncated(n));
        assert!((v - (1.0 + y0) * (1.0 + y0).ln()).abs() < 1e-12);
        let big = c_n(n) + 1.0;
        let v = mv_functional(&state(&g, |_| 1.0, |_| big.sqrt(), 4), MvTruncation::Truncated(n));
        let expect = std::f64::consts::E * (1.0 + n).powi(2) - 2.0 * n - 2.0;
        assert!((v - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn phi_k_examples() {
        let k = 3.0;
        assert_eq!(phi_k(k / 2.0, k).0, 1.0);
        assert_eq!(phi_k(3.0 * k, k).0, 0.0);
        let mut max_d: f64 = 0.0;
        for i in 0..=100_000 {
            let r = k + k * i as f64 / 100_000.0;
            max_d = max_d.max(phi_k(r, k).1.abs());
        }
        assert!(max_d <= 4.0 / k);
        // weighted bound holds away from vacuum only: φ_K/√ρ grows like ρ^{-1/2}
        let bound = |r: f64| (phi_k(r, k).1 * r.sqrt()).abs() + (phi_k(r, k).0 / r.sqrt()).abs();
        assert!((0..1000).map(|i| bound(1e-2 + i as f64 * 0.01)).all(|v| v <= 10.0 + 1e-12));
    }

    #[test]
    fn varphi_family() {
        for &n in &[1.0f64, 10.0, 1e3] {
            let cn = c_n(n);
            let below = varphi_tilde(n * (1.0 - 1e-15), n);
            let at = varphi_tilde(n, n);
            assert!((below.value - at.value).abs() <= 1e-12 * at.value.max(1.0));
            assert!((at.value - (1.0 + n) * (1.0 + n).ln()).abs() <= 1e-12 * at.value);
            assert!((at.d1 - (1.0 + (1.0 + n).ln())).abs() < 1e-12);
            let a = varphi_tilde(cn, n);
            let b = varphi_tilde(cn * (1.0 + 1e-15), n);
            assert!((a.value - b.value).abs() <= 1e-12 * a.value);
            assert_eq!(varphi_tilde(cn * 1.01, n).d2, 0.0);
            let mut prev = -1.0;
            for i in 0..1000 {
                let y = 1.2 * cn * i as f64 / 999.0;
                let t = varphi_tilde(y, n);
                assert!(t.value >= prev - 1e-9 * t.value.abs());
                prev = t.value;
                if y > n && y <= cn {
                    assert!(t.d1 <= 1.0 + (1.0 + n).ln() + 1e-12);
                }
            }
        }
        for i in 0..1000 {
            let y = 50.0 * i as f64 / 999.0;
            assert!(varphi_tilde(y, 2.0).value <= varphi_tilde(y, 3.0).value + 1e-12);
        }
        let exact = 11.0 * 11f64.ln();
        assert!((varphi_tilde(10.0, 1e3).value - exact).abs() <= 1e-3 * exact);
        let e = varphi_n(&[0.3, -0.2, 0.1], 5.0);
        let y = 0.14;
        assert!((e.gradient[0] - 2.0 * (1.0 + (1.0f64 + y).ln()) * 0.3).abs() < 1e-14);
        assert!((e.hessian[0][1] - 4.0 / (1.0 + y) * 0.3 * -0.2).abs() < 1e-14);
    }

    #[test]
    fn jungel_examples() {
        let g = grid(1, 64);
        let one = jungel_gap(&SpectralField::constant(&g, 1, 1.0)).unwrap();
        assert!(one.lhs.abs() < 1e-20 && one.gap.abs() < 1e-20);
        let f = SpectralField::from_fn(&g, 1, |x, _| (TAU * x[0]).sin().exp());
        let j = jungel_gap(&f).unwrap();
        assert!(j.gap >= 0.0);
        let g2 = grid(2, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let r = SpectralField::random_smooth(&g2, 1, 4, 2.0, &mut rng);
            let f = r.map(|v| 0.1 + v * v);
            let j = jungel_gap(&f).unwrap();
            assert!(j.gap >= -1e-8 * j.lhs);
        }
        assert!(jungel_gap(&SpectralField::from_fn(&g, 1, |x, _| (TAU * x[0]).sin())).is_err());
    }

    #[test]
    fn quantum_identity_examples() {
        let g = grid(1, 64);
        assert!(quantum_identity_residual(&SpectralField::constant(&g, 1, 2.0)).unwrap() == 0.0);
        let f = |n: usize| {
            let g = grid(1, n);
            quantum_identity_residual(&SpectralField::from_fn(&g, 1, |x, _| 1.0 + 0.3 * (TAU * x[0]).sin())).unwrap()
        };
        assert!(f(64) <= 1e-8);
        assert!(f(32) > f(64));
    }

    #[test]
    fn capillary_dissipation_identity() {
        // ∫(Δ√ρ/√ρ)Δρ = ½∫ρ|∇²log ρ|²
        let g = grid(2, 32);
        let rho = SpectralField::from_fn(&g, 1, |x, _| 1.0 + 0.3 * (TAU * x[0]).sin() * (TAU * x[1]).cos());
        let jet = Jet::new(&rho);
        let len = g.len();
        let lhs = mean_of((0..len).map(|p| jet.bohm(p) * jet.lap(p)), len);
        let rhs = 0.5 * mean_of((0..len).map(|p| jet.f[p] * jet.log_hess_sq(p)), len);
        assert!((lhs - rhs).abs() < 1e-9 * rhs, "{lhs} {rhs}");
    }

    fn smooth_initial(g: &TorusGrid<f64>, p: &RegularizationParams<f64>) -> FluidState<f64> {
        let rho = SpectralField::from_fn(g, 1, |x, _| 1.0 + 0.2 * (TAU * x[0]).sin());
        let u = SpectralField::from_fn(g, g.dim(), |x, c| {
            if c == 0 { 0.3 * (TAU * x[0]).sin() } else { 0.1 * (TAU * x[0]).cos() }
        });
        prepare_initial(&rho, &u, p).unwrap()
    }

    fn residuals(p: &RegularizationParams<f64>, dt: f64, d: usize) -> (f64, f64, f64) {
        let g = grid(d, 16);
        let p = RegularizationParams { dt, h: dt, ..p.clone() };
        let s = smooth_initial(&g, &p);
        let noise = NoiseModel::new(&NoiseConfig::off(), d, p.m).unwrap();
        let opts = RunOptions {
            balances: BalanceSelection::all(),
            cadence: 1_000_000,
            ..Default::default()
        };
        let r = run_path(&s, &p, &noise, 0, 0.05, &opts).unwrap();
        let row = r.trace.rows.last().unwrap();
        (row.residual_energy, row.residual_bd, row.residual_mv)
    }

    #[test]
    fn balances_close_at_first_order() {
        let p = RegularizationParams {
            m: 4,
            eps: 1e-2,
            kappa: 1e-3,
            eta: 1e-3,
            delta: 1e-30,
            r0: 0.1,
            r1: 0.1,
            r2: 0.1,
            ..Default::default()
        };
        let (e1, b1, _) = residuals(&p, 2e-4, 2);
        let (e2, b2, _) = residuals(&p, 1e-4, 2);
        assert!((e1 / e2 - 2.0).abs() < 0.3, "energy {e1} {e2}");
        assert!((b1 / b2 - 2.0).abs() < 0.3, "bd {b1} {b2}");

        let p0 = RegularizationParams { eps: 0.0, k_cut: 1.1, n_mv: 1.0, ..p };
        let (_, _, m1) = residuals(&p0, 2e-4, 2);
        let (_, _, m2) = residuals(&p0, 1e-4, 2);
        assert!((m1 / m2 - 2.0).abs() < 0.3, "mv {m1} {m2}");
    }

    #[test]
    fn zero_motion_balances_are_exact() {
        let g = grid(1, 16);
        let p = RegularizationParams { m: 4, ..Default::default() };
        let s = state(&g, |_| 1.0, |_| 0.0, 4);
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, 4).unwrap();
        let opts = RunOptions {
            balances: BalanceSelection::all(),
            ..Default::default()
        };
        let r = run_path(&s, &p, &noise, 0, 0.01, &opts).unwrap();
        for row in &r.trace.rows {
            assert!(row.residual_energy.abs() < 1e-14);
            assert!(row.residual_bd.abs() < 1e-14);
            assert!(row.residual_mv.abs() < 1e-14);
        }
    }

    #[test]
    fn eps_free_bd_sources_vanish() {
        let g = grid(1, 16);
        let p = RegularizationParams { m: 4, eps: 0.0, ..Default::default() };
        let s = smooth_initial(&g, &p);
        let rates = bd_rates(&s.rho, &s.u, &p).unwrap();
        assert!(rates.sources[..4].iter().all(|v| *v == 0.0));
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, 4).unwrap();
        let opts = RunOptions {
            balances: BalanceSelection::all(),
            ..Default::default()
        };
        let mut t = BalanceTracker::new(&s, &p, opts.balances).unwrap();
        let r = run_path(&s, &p, &noise, 0, 0.01, &RunOptions { keep_records: true, ..opts }).unwrap();
        for rec in &r.records {
            t.push(rec).unwrap();
        }
        let bd = t.bd.unwrap();
        assert!(bd.sources[..7].iter().all(|v| *v == 0.0));
        assert!(bd.sources[7..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn weak_form_examples() {
        let g = grid(1, 16);
        let p = RegularizationParams { m: 4, dt: 2e-4, h: 2e-4, ..Default::default() };
        let noise = NoiseModel::new(&NoiseConfig::off(), 1, 4).unwrap();
        let opts = RunOptions {
            keep_records: true,
            balances: BalanceSelection::none(),
            ..Default::default()
        };
        let horizon = 0.05;
        let tests = vec![
            TestFunction {
                wave: [1, 0, 0],
                phase: Phase::Sin,
                component: 0,
                temporal: Temporal::Cubic { horizon },
            },
            TestFunction {
                wave: [2, 0, 0],
                phase: Phase::Cos,
                component: 0,
                temporal: Temporal::Constant,
            },
        ];
        let s = state(&g, |_| 1.3, |_| 0.0, 4);
        let r = run_path(&s, &p, &noise, 0, horizon, &opts).unwrap();
        let w = weak_form_residual(&r.records, &s, &r.final_state, &p, &tests).unwrap();
        assert!(w.max_mass <= 1e-10 && w.max_momentum <= 1e-10);

        let constant = [TestFunction {
            wave: [0, 0, 0],
            phase: Phase::Cos,
            component: 0,
            temporal: Temporal::Constant,
        }];
        let run = |dt: f64| {
            let p = RegularizationParams { dt, h: dt, ..p.clone() };
            let s = smooth_initial(&g, &p);
            let r = run_path(&s, &p, &noise, 0, horizon, &opts).unwrap();
            let c = weak_form_residual(&r.records, &s, &r.final_state, &p, &constant).unwrap();
            assert!(c.max_mass <= 1e-10);
            weak_form_residual(&r.records, &s, &r.final_state, &p, &tests).unwrap()
        };
        let (a, b) = (run(2e-4), run(1e-4));
        assert!((a.max_momentum / b.max_momentum - 2.0).abs() < 0.4, "{} {}", a.max_momentum, b.max_momentum);
        assert!((a.max_mass / b.max_mass - 2.0).abs() < 0.4, "{a:?} {b:?}");
    }
}
