//! Torus geometry, trigonometric transforms, Galerkin projection, spectral
//! differentiation and quadrature on the unit periodic box.
//!
//! A [`SpectralField`] stores real collocation values (component-major, axis 0
//! fastest). Coefficients are produced on demand as a [`Spectrum`] with the
//! normalization `c_k = N^{-d} Σ_j f(x_j) e^{-2πi k·x_j}`, so that
//! `cos(2πx)` has coefficients `1/2` at `k = ±1` and Parseval reads
//! `mean |f|² = Σ_k |c_k|²`. Realness therefore holds by construction.

use crate::error::{Error, Result};
use crate::scalar::Real;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::fmt;
use std::sync::Arc;

/// Integer wave vector; unused trailing axes are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct WaveVector(pub [i64; 3]);

impl WaveVector {
    /// `max_i |k_i|`, the norm that defines `H_m`.
    pub fn max_abs(&self) -> i64 {
        self.0.iter().map(|k| k.abs()).max().unwrap_or(0)
    }

    /// Euclidean `|k|²`.
    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|k| k * k).sum()
    }
}

/// Uniform collocation grid on `[0,1)^d` with shared FFT plans.
#[derive(Clone)]
pub struct TorusGrid<T: Real> {
    dim: usize,
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> fmt::Debug for TorusGrid<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TorusGrid")
            .field("dim", &self.dim)
            .field("n", &self.n)
            .finish()
    }
}

impl<T: Real> PartialEq for TorusGrid<T> {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.n == other.n
    }
}

impl<T: Real> TorusGrid<T> {
    pub fn new(dim: usize, n: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::config("grid.dim", format!("must be 1, 2 or 3 (got {dim})")));
        }
        if n < 4 || n % 2 != 0 {
            return Err(Error::config("grid.n", format!("must be even and >= 4 (got {n})")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            dim,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of collocation points `N^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Largest retained index under the 2/3 rule.
    pub fn dealias_cutoff(&self) -> usize {
        self.n / 3
    }

    /// Checks that `H_m` fits the grid with a nonempty dealiasing band.
    pub fn check_cutoff(&self, m: usize) -> Result<()> {
        if self.n < 3 * m + 1 {
            return Err(Error::config(
                "params.m",
                format!("grid N={} too small for cutoff m={m}; need N >= 3m+1", self.n),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn wavenumber(&self, j: usize) -> i64 {
        if j <= self.n / 2 {
            j as i64
        } else {
            j as i64 - self.n as i64
        }
    }

    #[inline]
    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        match self.dim {
            1 => [idx, 0, 0],
            2 => [idx % n, idx / n, 0],
            _ => [idx % n, (idx / n) % n, idx / (n * n)],
        }
    }

    pub fn wave_vector(&self, idx: usize) -> WaveVector {
        let mi = self.multi_index(idx);
        let mut k = [0i64; 3];
        for a in 0..self.dim {
            k[a] = self.wavenumber(mi[a]);
        }
        WaveVector(k)
    }

    /// Linear index of a wave vector (components taken modulo N).
    pub fn index_of(&self, k: WaveVector) -> usize {
        let n = self.n as i64;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for a in 0..self.dim {
            idx += (k.0[a].rem_euclid(n) as usize) * stride;
            stride *= self.n;
        }
        idx
    }

    pub fn point(&self, idx: usize) -> [T; 3] {
        let mi = self.multi_index(idx);
        let h = T::one() / T::from_usize_lossy(self.n);
        let mut x = [T::zero(); 3];
        for a in 0..self.dim {
            x[a] = T::from_usize_lossy(mi[a]) * h;
        }
        x
    }

    /// Whether axis `a` of wave vector `k` sits on the Nyquist index.
    #[inline]
    fn is_nyquist(&self, k: &WaveVector, a: usize) -> bool {
        k.0[a].unsigned_abs() as usize == self.n / 2
    }

    /// In-place multidimensional FFT; the forward direction is normalized by `N^d`.
    fn fft_in_place(&self, data: &mut [Complex<T>], forward: bool) {
        let plan = if forward { &self.fwd } else { &self.inv };
        let n = self.n;
        let len = self.len();
        debug_assert_eq!(data.len() % len, 0);
        let mut scratch = vec![Complex::default(); plan.get_inplace_scratch_len()];
        // axis 0 is contiguous: rustfft handles consecutive chunks directly
        plan.process_with_scratch(data, &mut scratch);
        let mut line = vec![Complex::default(); n];
        for axis in 1..self.dim {
            let stride = n.pow(axis as u32);
            let block = stride * n;
            for outer in (0..data.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                }
            }
        }
        if forward {
            let s = T::one() / T::from_usize_lossy(len);
            for v in data.iter_mut() {
                *v = *v * s;
            }
        }
    }
}

/// Complex trigonometric coefficients of a (real) field.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum<T: Real> {
    grid: TorusGrid<T>,
    comps: usize,
    coeffs: Vec<Complex<T>>,
}

impl<T: Real> Spectrum<T> {
    pub fn grid(&self) -> &TorusGrid<T> {
        &self.grid
    }

    pub fn comps(&self) -> usize {
        self.comps
    }

    pub fn coeffs(&self) -> &[Complex<T>] {
        &self.coeffs
    }

    pub fn component(&self, c: usize) -> &[Complex<T>] {
        let len = self.grid.len();
        &self.coeffs[c * len..(c + 1) * len]
    }

    /// Coefficient of component `c` at wave vector `k`.
    pub fn get(&self, c: usize, k: WaveVector) -> Complex<T> {
        self.coeffs[c * self.grid.len() + self.grid.index_of(k)]
    }

    /// Sum of squared coefficient magnitudes over all components.
    pub fn energy(&self) -> T {
        self.coeffs.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr())
    }

    /// Back to collocation values. The imaginary residue, which is pure
    /// round-off for Hermitian data, is discarded.
    pub fn inverse(mut self) -> SpectralField<T> {
        self.grid.fft_in_place(&mut self.coeffs, false);
        SpectralField {
            values: self.coeffs.iter().map(|z| z.re).collect(),
            grid: self.grid,
            comps: self.comps,
        }
    }

    /// Multiplies mode `k` of every component by `f(k)`.
    pub fn scale_modes(&mut self, f: impl Fn(&WaveVector) -> T) {
        let len = self.grid.len();
        for idx in 0..len {
            let s = f(&self.grid.wave_vector(idx));
            for c in 0..self.comps {
                self.coeffs[c * len + idx] = self.coeffs[c * len + idx] * s;
            }
        }
    }
}

/// Transform direction for [`SpectralField::transform`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Differential operators with exact spectral symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiffOp {
    Gradient,
    Divergence,
    Laplacian,
    LaplacianPower(u32),
    Deformation,
}

/// Real scalar, vector or tensor field on a [`TorusGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralField<T: Real> {
    grid: TorusGrid<T>,
    comps: usize,
    values: Vec<T>,
}

impl<T: Real> SpectralField<T> {
    pub fn zeros(grid: &TorusGrid<T>, comps: usize) -> Self {
        Self::constant(grid, comps, T::zero())
    }

    pub fn constant(grid: &TorusGrid<T>, comps: usize, v: T) -> Self {
        Self {
            grid: grid.clone(),
            comps,
            values: vec![v; comps * grid.len()],
        }
    }

    /// Samples `f(x, component)` at every collocation point.
    pub fn from_fn(grid: &TorusGrid<T>, comps: usize, f: impl Fn(&[T; 3], usize) -> T) -> Self {
        let len = grid.len();
        let mut values = Vec::with_capacity(comps * len);
        for c in 0..comps {
            for idx in 0..len {
                values.push(f(&grid.point(idx), c));
            }
        }
        Self {
            grid: grid.clone(),
            comps,
            values,
        }
    }

    pub fn from_values(grid: &TorusGrid<T>, comps: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != comps * grid.len() {
            return Err(Error::Dimension(format!(
                "expected {} values for {comps} component(s) on N={} d={}, got {}",
                comps * grid.len(),
                grid.n(),
                grid.dim(),
                values.len()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            comps,
            values,
        })
    }

    /// Builds a field from complex coefficients laid out like [`Spectrum::coeffs`].
    pub fn from_coefficients(
        grid: &TorusGrid<T>,
        comps: usize,
        coeffs: Vec<Complex<T>>,
    ) -> Result<Self> {
        if coeffs.len() != comps * grid.len() {
            return Err(Error::Dimension(format!(
                "expected {} coefficients, got {}",
                comps * grid.len(),
                coeffs.len()
            )));
        }
        Ok(Spectrum {
            grid: grid.clone(),
            comps,
            coeffs,
        }
        .inverse())
    }

    /// Random smooth field with Gaussian coefficients on modes `max|k_i| <= modes`,
    /// damped by `decay^{|k|²}`.
    pub fn random_smooth<R: Rng + ?Sized>(
        grid: &TorusGrid<T>,
        comps: usize,
        modes: usize,
        decay: f64,
        rng: &mut R,
    ) -> Self {
        let len = grid.len();
        let mut coeffs = vec![Complex::<T>::default(); comps * len];
        for c in 0..comps {
            for idx in 0..len {
                let k = grid.wave_vector(idx);
                if k.max_abs() as usize > modes || k.max_abs() == 0 {
                    continue;
                }
                let neg = grid.index_of(WaveVector([-k.0[0], -k.0[1], -k.0[2]]));
                if neg < idx {
                    continue;
                }
                let s = decay.powi(k.norm_sq() as i32);
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = if neg == idx { 0.0 } else { rng.sample(StandardNormal) };
                let z = Complex::new(T::c(re * s), T::c(im * s));
                coeffs[c * len + idx] = z;
                coeffs[c * len + neg] = z.conj();
            }
        }
        Spectrum {
            grid: grid.clone(),
            comps,
            coeffs,
        }
        .inverse()
    }

    pub fn grid(&self) -> &TorusGrid<T> {
        &self.grid
    }

    pub fn comps(&self) -> usize {
        self.comps
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn component_values(&self, c: usize) -> &[T] {
        let len = self.grid.len();
        &self.values[c * len..(c + 1) * len]
    }

    pub fn component(&self, c: usize) -> Self {
        Self {
            grid: self.grid.clone(),
            comps: 1,
            values: self.component_values(c).to_vec(),
        }
    }

    /// Stacks single- or multi-component fields into one.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero fields".into()))?;
        let mut values = Vec::new();
        let mut comps = 0;
        for p in parts {
            if p.grid != first.grid {
                return Err(Error::Dimension("stacking fields on different grids".into()));
            }
            values.extend_from_slice(&p.values);
            comps += p.comps;
        }
        Ok(Self {
            grid: first.grid.clone(),
            comps,
            values,
        })
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.grid != other.grid || self.comps != other.comps {
            return Err(Error::Dimension(format!(
                "field shapes differ: (N={}, d={}, c={}) vs (N={}, d={}, c={})",
                self.grid.n, self.grid.dim, self.comps, other.grid.n, other.grid.dim, other.comps
            )));
        }
        Ok(())
    }

    pub fn forward(&self) -> Spectrum<T> {
        let mut coeffs: Vec<Complex<T>> =
            self.values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.grid.fft_in_place(&mut coeffs, true);
        Spectrum {
            grid: self.grid.clone(),
            comps: self.comps,
            coeffs,
        }
    }

    /// Transform in either direction, validating the target grid. Forward
    /// returns the coefficient spectrum; this wrapper exists for callers that
    /// hold raw arrays.
    pub fn transform(
        grid: &TorusGrid<T>,
        comps: usize,
        data: Vec<Complex<T>>,
        direction: Direction,
    ) -> Result<Vec<Complex<T>>> {
        if data.len() != comps * grid.len() {
            return Err(Error::Dimension(format!(
                "transform input has {} entries, grid expects {}",
                data.len(),
                comps * grid.len()
            )));
        }
        let mut data = data;
        grid.fft_in_place(&mut data, direction == Direction::Forward);
        Ok(data)
    }

    fn filtered(&self, keep: impl Fn(&WaveVector) -> bool) -> Self {
        let mut s = self.forward();
        s.scale_modes(|k| if keep(k) { T::one() } else { T::zero() });
        s.inverse()
    }

    /// Galerkin projection `Π_m`: zero every mode with `max_i |k_i| > m`.
    pub fn project(&self, m: usize) -> Result<Self> {
        if m > self.grid.dealias_cutoff() {
            return Err(Error::config(
                "params.m",
                format!("cutoff m={m} exceeds N/3={} on this grid", self.grid.dealias_cutoff()),
            ));
        }
        Ok(self.project_unchecked(m))
    }

    pub(crate) fn project_unchecked(&self, m: usize) -> Self {
        self.filtered(|k| k.max_abs() as usize <= m)
    }

    /// 2/3-rule truncation.
    pub fn dealias(&self) -> Self {
        let c = self.grid.dealias_cutoff();
        self.filtered(|k| k.max_abs() as usize <= c)
    }

    /// Whether every mode beyond `m` is below `tol` in magnitude.
    pub fn in_band(&self, m: usize, tol: T) -> bool {
        let s = self.forward();
        let len = self.grid.len();
        (0..len).all(|idx| {
            let k = self.grid.wave_vector(idx);
            k.max_abs() as usize <= m
                || (0..self.comps).all(|c| s.coeffs[c * len + idx].norm() <= tol)
        })
    }

    /// Applies a per-mode linear map from the `comps` input coefficients to
    /// `out_comps` output coefficients.
    /// Modes beyond `band` (default: the dealiasing cutoff) are treated as
    /// zero, so round-off there is never amplified by high-order symbols.
    fn map_spectrum(
        &self,
        out_comps: usize,
        f: impl Fn(&WaveVector, &[Complex<T>], &mut [Complex<T>]),
    ) -> Self {
        self.map_spectrum_band(self.grid.dealias_cutoff(), out_comps, f)
    }

    fn map_spectrum_band(
        &self,
        band: usize,
        out_comps: usize,
        f: impl Fn(&WaveVector, &[Complex<T>], &mut [Complex<T>]),
    ) -> Self {
        let len = self.grid.len();
        let s = self.forward();
        let mut out = vec![Complex::default(); out_comps * len];
        let mut inp = vec![Complex::default(); self.comps];
        let mut res = vec![Complex::default(); out_comps];
        for idx in 0..len {
            let k = self.grid.wave_vector(idx);
            if k.max_abs() as usize > band {
                continue;
            }
            for c in 0..self.comps {
                inp[c] = s.coeffs[c * len + idx];
            }
            res.iter_mut().for_each(|z| *z = Complex::default());
            f(&k, &inp, &mut res);
            for c in 0..out_comps {
                out[c * len + idx] = res[c];
            }
        }
        Spectrum {
            grid: self.grid.clone(),
            comps: out_comps,
            coeffs: out,
        }
        .inverse()
    }

    /// Symbol `i2πk_a`, with the Nyquist mode dropped so the result stays real.
    fn ik(&self, k: &WaveVector, a: usize) -> Complex<T> {
        if self.grid.is_nyquist(k, a) {
            Complex::default()
        } else {
            Complex::new(T::zero(), T::TAU() * T::c(k.0[a] as f64))
        }
    }

    fn lap_symbol(k: &WaveVector) -> T {
        -(T::TAU() * T::TAU()) * T::c(k.norm_sq() as f64)
    }

    pub fn differentiate(&self, op: DiffOp) -> Result<Self> {
        match op {
            DiffOp::Gradient => Ok(self.gradient()),
            DiffOp::Divergence => self.divergence(),
            DiffOp::Laplacian => Ok(self.laplacian()),
            DiffOp::LaplacianPower(p) => Ok(self.laplacian_power(p)),
            DiffOp::Deformation => self.deformation(),
        }
    }

    /// `∂_a` of every component.
    pub fn partial(&self, a: usize) -> Self {
        self.map_spectrum(self.comps, |k, inp, out| {
            let s = self.ik(k, a);
            for (o, i) in out.iter_mut().zip(inp) {
                *o = *i * s;
            }
        })
    }

    /// Gradient; component `c·d + j` holds `∂_j f_c`.
    pub fn gradient(&self) -> Self {
        let d = self.grid.dim;
        self.map_spectrum(self.comps * d, |k, inp, out| {
            for (c, i) in inp.iter().enumerate() {
                for j in 0..d {
                    out[c * d + j] = *i * self.ik(k, j);
                }
            }
        })
    }

    /// Divergence over the last index: `out_c = Σ_j ∂_j f_{c·d+j}`.
    pub fn divergence(&self) -> Result<Self> {
        let d = self.grid.dim;
        if self.comps % d != 0 {
            return Err(Error::Dimension(format!(
                "divergence needs a multiple of {d} components, got {}",
                self.comps
            )));
        }
        Ok(self.map_spectrum(self.comps / d, |k, inp, out| {
            for (c, o) in out.iter_mut().enumerate() {
                for j in 0..d {
                    *o = *o + inp[c * d + j] * self.ik(k, j);
                }
            }
        }))
    }

    pub fn laplacian(&self) -> Self {
        self.laplacian_power(1)
    }

    /// `Δ^p`, symbol `(-4π²|k|²)^p`.
    pub fn laplacian_power(&self, p: u32) -> Self {
        self.laplacian_power_in(p, self.grid.dealias_cutoff())
    }

    /// `Δ^p` restricted to modes `max|k_i| <= band`. High powers amplify
    /// round-off in the upper modes, so callers holding `H_m` data should pass `m`.
    pub fn laplacian_power_in(&self, p: u32, band: usize) -> Self {
        self.map_spectrum_band(band, self.comps, |k, inp, out| {
            let s = Self::lap_symbol(k).powi(p as i32);
            for (o, i) in out.iter_mut().zip(inp) {
                *o = *i * s;
            }
        })
    }

    /// Symmetric gradient `(∇u + ∇uᵀ)/2`, component `i·d + j`.
    pub fn deformation(&self) -> Result<Self> {
        let d = self.grid.dim;
        if self.comps != d {
            return Err(Error::Dimension(format!(
                "deformation needs a {d}-vector field, got {} components",
                self.comps
            )));
        }
        let half = T::c(0.5);
        Ok(self.map_spectrum(d * d, |k, inp, out| {
            for i in 0..d {
                for j in 0..d {
                    out[i * d + j] = (inp[i] * self.ik(k, j) + inp[j] * self.ik(k, i)) * half;
                }
            }
        }))
    }

    /// `⟨f, g⟩ = ∫ Σ_c f_c g_c dx` by the trapezoid rule.
    pub fn inner_product(&self, other: &Self) -> Result<T> {
        self.check_same(other)?;
        Ok(self.dot_sum(other))
    }

    fn dot_sum(&self, other: &Self) -> T {
        let s = self
            .values
            .iter()
            .zip(&other.values)
            .fold(T::zero(), |acc, (a, b)| acc + *a * *b);
        s / T::from_usize_lossy(self.grid.len())
    }

    /// `∫ f_c dx` for each component summed, i.e. the mean for scalars.
    pub fn integral(&self) -> T {
        let s = self.values.iter().fold(T::zero(), |acc, v| acc + *v);
        s / T::from_usize_lossy(self.grid.len())
    }

    /// `L²` norm, equal to the coefficient `ℓ²` norm.
    pub fn l2_norm(&self) -> T {
        self.dot_sum(self).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.values.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn min_value(&self) -> T {
        self.values.iter().fold(T::infinity(), |m, v| m.min(*v))
    }

    pub fn max_value(&self) -> T {
        self.values.iter().fold(T::neg_infinity(), |m, v| m.max(*v))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            grid: self.grid.clone(),
            comps: self.comps,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert!(self.grid == other.grid && self.comps == other.comps, "field shape mismatch");
        Self {
            grid: self.grid.clone(),
            comps: self.comps,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Multiplies every component pointwise by a scalar field (no dealiasing).
    pub fn times_scalar(&self, s: &Self) -> Self {
        assert!(s.comps == 1 && s.grid == self.grid, "scalar multiplier shape mismatch");
        let len = self.grid.len();
        let mut values = self.values.clone();
        for c in 0..self.comps {
            for (v, w) in values[c * len..(c + 1) * len].iter_mut().zip(&s.values) {
                *v *= *w;
            }
        }
        Self {
            grid: self.grid.clone(),
            comps: self.comps,
            values,
        }
    }

    /// Pointwise `Σ_c f_c g_c` as a scalar field.
    pub fn dot(&self, other: &Self) -> Self {
        assert!(self.grid == other.grid && self.comps == other.comps, "field shape mismatch");
        let len = self.grid.len();
        let mut values = vec![T::zero(); len];
        for c in 0..self.comps {
            let a = &self.values[c * len..(c + 1) * len];
            let b = &other.values[c * len..(c + 1) * len];
            for i in 0..len {
                values[i] += a[i] * b[i];
            }
        }
        Self {
            grid: self.grid.clone(),
            comps: 1,
            values,
        }
    }

    /// Pointwise `|f|²` summed over components.
    pub fn norm_sq_pointwise(&self) -> Self {
        self.dot(self)
    }

    /// Dealiased pointwise product with a scalar field.
    pub fn mul_dealiased(&self, s: &Self) -> Self {
        self.times_scalar(s).dealias()
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self + s·other`.
    pub fn axpy(&self, s: T, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + s * b)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.grid == other.grid && self.comps == other.comps, "field shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn axpy_assign(&mut self, s: T, other: &Self) {
        assert!(self.grid == other.grid && self.comps == other.comps, "field shape mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * *b;
        }
    }

    /// Converts to another scalar type (grid plans are rebuilt).
    pub fn cast<U: Real>(&self, grid: &TorusGrid<U>) -> Result<SpectralField<U>> {
        if grid.dim() != self.grid.dim || grid.n() != self.grid.n {
            return Err(Error::Dimension("cast target grid differs".into()));
        }
        Ok(SpectralField {
            grid: grid.clone(),
            comps: self.comps,
            values: self.values.iter().map(|v| U::c(v.to_f64_lossy())).collect(),
        })
    }
}
