//! Pinned tolerances shared by the `verify` battery and the acceptance suite.

/// Relative drift of total mass over a run.
pub const MASS_REL: f64 = 1e-10;
/// Relative mode-wise error of the heat-kernel oracle.
pub const HEAT_KERNEL_REL: f64 = 1e-10;
/// Cumulative energy-balance residual relative to `E(0)`.
pub const ENERGY_BALANCE_REL: f64 = 1e-4;
/// Halving `dt` must divide a first-order residual by `2 ± 0.3`.
pub const FIRST_ORDER_RATIO: f64 = 2.0;
pub const FIRST_ORDER_RATIO_TOL: f64 = 0.3;
/// Standard errors allowed between a Monte Carlo mean and its closed form.
pub const MC_STANDARD_ERRORS: f64 = 3.0;
/// Jüngel gap may be negative by at most this fraction of its left side.
pub const JUNGEL_REL: f64 = 1e-8;
/// Quantum identity residual relative to `‖ρ‖₂`.
pub const QUANTUM_IDENTITY_REL: f64 = 1e-8;
/// Branch continuity of `φ̃_n`.
pub const VARPHI_CONTINUITY: f64 = 1e-12;
/// Relative distance of `φ̃_n(10)` at `n = 10³` from `(1+y)ln(1+y)`.
pub const VARPHI_CONVERGENCE_REL: f64 = 1e-3;
/// Strong Euler-Maruyama order on the multiplicative test.
pub const EM_STRONG_ORDER: f64 = 0.5;
pub const EM_STRONG_ORDER_TOL: f64 = 0.1;
/// Doob bracket for `E[(M*)²]/E[⟨M⟩]`.
pub const BDG_LOWER: f64 = 1.0;
pub const BDG_UPPER: f64 = 4.0;
/// Admissible window for the momentum-path Hölder exponent.
pub const HOLDER_LOW: f64 = 0.35;
pub const HOLDER_HIGH: f64 = 0.5;
/// Relative change of `Ĉ` allowed when `n_paths` doubles.
pub const CONSTANT_STABILITY_REL: f64 = 0.2;
/// Required shrink factor of successive sweep differences.
pub const CAUCHY_FACTOR: f64 = 1.5;
