//! Wave optics in the reduced (gauge-transformed) picture.
//!
//! In one dimension the flow enters the slow-light wave equation as a vector
//! potential that a position-dependent phase removes. The reduced field `psi`
//! then obeys a Schrödinger equation with Planck's constant divided out:
//!
//! ```text
//! i d/dt psi = (-kappa d^2/dz^2 + W(z) - omega_ref) psi
//! kappa = v_g c / (2 omega0)
//! W     = omega0 - (omega0 / 2c) (v_g + u^2 / v_g)
//! ```
//!
//! `kappa` is frozen at a reference group velocity; spatial variation of `v_g`
//! only enters through `W`. A packet with reduced carrier `k` moves at `2 kappa k`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::{MediumProfiles, MediumSpec};
use crate::scalar::Scalar;

/// Scalars the wave layer can run on.
pub trait WaveScalar: Scalar + FftNum {}
impl<T: Scalar + FftNum> WaveScalar for T {}

/// Uniform periodic grid; the point `z_max` is identified with `z_min`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D<T> {
    pub z_min: T,
    pub z_max: T,
    pub n: usize,
}

impl<T: WaveScalar> Grid1D<T> {
    pub fn new(z_min: T, z_max: T, n: usize) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidParameter(format!("grid size must be a power of two >= 8, got {n}")));
        }
        if !(z_max > z_min) {
            return Err(Error::InvalidParameter("grid requires z_max > z_min".into()));
        }
        Ok(Self { z_min, z_max, n })
    }

    pub fn dz(&self) -> T {
        (self.z_max - self.z_min) / T::from_usize_lossy(self.n)
    }

    pub fn z(&self, j: usize) -> T {
        self.z_min + T::from_usize_lossy(j) * self.dz()
    }

    pub fn points(&self) -> Vec<T> {
        (0..self.n).map(|j| self.z(j)).collect()
    }

    /// Angular wave numbers in FFT order, 1/m.
    pub fn wavenumbers(&self) -> Vec<T> {
        let dk = T::two() * T::PI() / (self.z_max - self.z_min);
        (0..self.n)
            .map(|j| {
                let m = if j < self.n / 2 { j as f64 } else { j as f64 - self.n as f64 };
                T::lit(m) * dk
            })
            .collect()
    }

    pub fn nyquist(&self) -> T {
        T::PI() / self.dz()
    }

    /// Time step giving `kappa k_nyq^2 dt = courant`.
    pub fn stable_dt(&self, kappa: T, courant: T) -> T {
        let k = self.nyquist();
        courant / (kappa * k * k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveOperator<T> {
    /// Kinetic coefficient, m^2/s.
    pub kappa: T,
    /// `W - omega_ref` on the grid, rad/s. Non-negative, minimum zero.
    pub potential: Vec<T>,
    /// Constant removed from `W`, rad/s.
    pub omega_ref: T,
    /// Effective mass `hbar omega0 / (v_g c)`, kg. Reported only.
    pub mass_report: T,
    /// Group velocity used for `kappa`, m/s.
    pub v_ref: T,
}

/// `(omega0 / 2c)(v_g + u^2 / v_g)`: the variable part of `W`.
fn potential_drop<T: Scalar>(u: T, v_g: T, spec: &MediumSpec<T>) -> T {
    spec.omega0 / (T::two() * spec.c()) * (v_g + u * u / v_g)
}

/// Builds the reduced operator; `kappa` uses the group velocity at `z_ref`.
pub fn build_operator<T: WaveScalar>(
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    grid: &Grid1D<T>,
    z_ref: T,
) -> Result<EffectiveOperator<T>> {
    let v_ref = profiles.group_velocity.eval(z_ref)?;
    let mut g = Vec::with_capacity(grid.n);
    for z in grid.points() {
        let u = profiles.flow.eval(z)?;
        let v_g = profiles.group_velocity.eval(z)?;
        if !(v_g > T::zero()) {
            return Err(Error::InvalidParameter(format!("group velocity {v_g} m/s at z = {z} m is not positive")));
        }
        g.push(potential_drop(u, v_g, spec));
    }
    operator_from_drop(g, v_ref, spec)
}

fn operator_from_drop<T: WaveScalar>(g: Vec<T>, v_ref: T, spec: &MediumSpec<T>) -> Result<EffectiveOperator<T>> {
    if !(v_ref > T::zero()) {
        return Err(Error::InvalidParameter(format!("reference group velocity {v_ref} m/s is not positive")));
    }
    let g_max = g.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    if !g_max.is_finite() {
        return Err(Error::InvalidParameter("effective potential is not finite".into()));
    }
    let c = spec.c();
    Ok(EffectiveOperator {
        kappa: v_ref * c / (T::two() * spec.omega0),
        potential: g.iter().map(|&x| g_max - x).collect(),
        omega_ref: spec.omega0 - g_max,
        mass_report: spec.constants.hbar * spec.omega0 / (v_ref * c),
        v_ref,
    })
}

impl<T: WaveScalar> EffectiveOperator<T> {
    /// Free particle: zero potential everywhere.
    pub fn free(kappa: T, n: usize) -> Self {
        Self { kappa, potential: vec![T::zero(); n], omega_ref: T::zero(), mass_report: T::zero(), v_ref: T::zero() }
    }

    /// Full potential `W(z)` per sample, rad/s.
    pub fn w(&self, j: usize) -> T {
        self.potential[j] + self.omega_ref
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldState<T> {
    pub psi: Vec<Complex<T>>,
    pub t: T,
}

impl<T: WaveScalar> FieldState<T> {
    pub fn norm(&self, grid: &Grid1D<T>) -> T {
        self.psi.iter().map(|p| p.norm_sqr()).sum::<T>() * grid.dz()
    }
}

/// Cumulative trapezoid of `u / v_g` from `z_min`, m.
fn flow_phase_integral<T: WaveScalar>(profiles: &MediumProfiles<T>, grid: &Grid1D<T>) -> Result<Vec<T>> {
    let dz = grid.dz();
    let mut out = Vec::with_capacity(grid.n);
    let mut acc = T::zero();
    let mut prev = None;
    for z in grid.points() {
        let r = profiles.flow.eval(z)? / profiles.group_velocity.eval(z)?;
        if let Some(p) = prev {
            acc += T::half() * (p + r) * dz;
        }
        out.push(acc);
        prev = Some(r);
    }
    Ok(out)
}

/// Optical field `phi = psi exp(-i k0 ∫ u / v_g dz)`.
pub fn gauge_to_optical<T: WaveScalar>(
    state: &FieldState<T>,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    grid: &Grid1D<T>,
) -> Result<Vec<Complex<T>>> {
    let integral = flow_phase_integral(profiles, grid)?;
    let k0 = spec.k0();
    Ok(state
        .psi
        .iter()
        .zip(integral)
        .map(|(p, a)| p * Complex::from_polar(T::one(), -k0 * a))
        .collect())
}

/// Local wave number of the optical field, 1/m.
///
/// The optical carrier (~k0) is far beyond the grid Nyquist limit, so the phase
/// gradient is taken on `psi` and the gauge shift `-k0 u / v_g` added
/// analytically. Zero where `|psi|` vanishes.
pub fn optical_local_wavenumber<T: WaveScalar>(
    state: &FieldState<T>,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    grid: &Grid1D<T>,
) -> Result<Vec<T>> {
    let k_psi = local_wavenumber(&state.psi, grid);
    let k0 = spec.k0();
    grid.points()
        .into_iter()
        .zip(k_psi)
        .map(|(z, k)| Ok(k - k0 * profiles.flow.eval(z)? / profiles.group_velocity.eval(z)?))
        .collect()
}

/// Phase gradient of a sampled field (periodic central difference), 1/m.
pub fn local_wavenumber<T: WaveScalar>(psi: &[Complex<T>], grid: &Grid1D<T>) -> Vec<T> {
    let n = psi.len();
    let two_dz = T::two() * grid.dz();
    (0..n)
        .map(|j| {
            let fwd = psi[(j + 1) % n];
            let bwd = psi[(j + n - 1) % n];
            let prod = fwd * bwd.conj();
            if prod.norm_sqr() == T::zero() {
                T::zero()
            } else {
                prod.arg() / two_dz
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketSpec<T> {
    pub z_center: T,
    /// Standard deviation of `|psi|^2`, m.
    pub sigma: T,
    /// Reduced-gauge carrier wave number, 1/m.
    pub k_carrier: T,
    /// Target value of `∫|psi|^2 dz`.
    pub norm: T,
}

/// Gaussian packet `N exp(-(z - z_c)^2 / (4 sigma^2)) exp(i k z)`.
pub fn init_packet<T: WaveScalar>(spec: &PacketSpec<T>, grid: &Grid1D<T>) -> Result<FieldState<T>> {
    let dz = grid.dz();
    if !(spec.sigma >= T::lit(4.0) * dz) {
        return Err(Error::InvalidParameter(format!(
            "packet width {} m is below four grid spacings ({} m)",
            spec.sigma,
            T::lit(4.0) * dz
        )));
    }
    if !(spec.norm > T::zero()) {
        return Err(Error::InvalidParameter("packet norm must be positive".into()));
    }
    let nyq = grid.nyquist();
    if !(spec.k_carrier.abs() < nyq) {
        return Err(Error::Nyquist {
            k: spec.k_carrier.to_f64().unwrap_or(f64::NAN),
            nyquist: nyq.to_f64().unwrap_or(f64::NAN),
        });
    }
    let four_s2 = T::lit(4.0) * spec.sigma * spec.sigma;
    let mut psi: Vec<Complex<T>> = grid
        .points()
        .into_iter()
        .map(|z| {
            let x = z - spec.z_center;
            // Phase relative to the centre keeps the argument small.
            Complex::from_polar((-x * x / four_s2).exp(), spec.k_carrier * x)
        })
        .collect();
    let state = FieldState { psi: psi.clone(), t: T::zero() };
    let scale = (spec.norm / state.norm(grid)).sqrt();
    for p in &mut psi {
        *p = *p * scale;
    }
    Ok(FieldState { psi, t: T::zero() })
}

/// RMS angular-frequency spread `|v| / (2 sigma)` of a Gaussian packet of
/// width `sigma` passing a fixed detector at speed `v`, rad/s.
pub fn realized_bandwidth<T: Scalar>(v: T, sigma: T) -> T {
    v.abs() / (T::two() * sigma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary<T> {
    Periodic,
    /// Smooth `cos^(1/8)` mask over `width` metres at each end.
    Absorbing { width: T },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepperKind {
    SplitStep,
    CrankNicolson,
}

fn mask<T: WaveScalar>(grid: &Grid1D<T>, boundary: Boundary<T>) -> Result<Option<Vec<T>>> {
    let Boundary::Absorbing { width } = boundary else {
        return Ok(None);
    };
    let len = grid.z_max - grid.z_min;
    if !(width > T::zero() && T::two() * width < len) {
        return Err(Error::InvalidParameter(format!("absorbing width {width} m does not fit the grid")));
    }
    let m = grid
        .points()
        .into_iter()
        .map(|z| {
            let d = (z - grid.z_min).min(grid.z_max - z);
            if d >= width {
                T::one()
            } else {
                (T::FRAC_PI_2() * (width - d) / width).cos().abs().powf(T::lit(0.125))
            }
        })
        .collect();
    Ok(Some(m))
}

struct SplitStep<T: FftNum> {
    half_potential: Vec<Complex<T>>,
    /// Kinetic propagator with the inverse FFT normalization folded in.
    kinetic: Vec<Complex<T>>,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: WaveScalar> SplitStep<T> {
    fn new(op: &EffectiveOperator<T>, grid: &Grid1D<T>, dt: T) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n);
        let inverse = planner.plan_fft_inverse(grid.n);
        let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        let inv_n = T::one() / T::from_usize_lossy(grid.n);
        Self {
            half_potential: op
                .potential
                .iter()
                .map(|&w| Complex::from_polar(T::one(), -w * dt * T::half()))
                .collect(),
            kinetic: grid
                .wavenumbers()
                .into_iter()
                .map(|k| Complex::from_polar(inv_n, -op.kappa * k * k * dt))
                .collect(),
            forward,
            inverse,
            scratch: vec![Complex::new(T::zero(), T::zero()); len],
        }
    }

    fn step(&mut self, psi: &mut [Complex<T>], mask: Option<&[T]>) {
        for (p, v) in psi.iter_mut().zip(&self.half_potential) {
            *p = *p * v;
        }
        self.forward.process_with_scratch(psi, &mut self.scratch);
        for (p, k) in psi.iter_mut().zip(&self.kinetic) {
            *p = *p * k;
        }
        self.inverse.process_with_scratch(psi, &mut self.scratch);
        match mask {
            Some(m) => {
                for ((p, v), &a) in psi.iter_mut().zip(&self.half_potential).zip(m) {
                    *p = *p * v * a;
                }
            }
            None => {
                for (p, v) in psi.iter_mut().zip(&self.half_potential) {
                    *p = *p * v;
                }
            }
        }
    }
}

/// Periodic tridiagonal system with constant off-diagonal `beta` and diagonal
/// `diag`, factored once and solved by Sherman-Morrison on top of Thomas.
struct CyclicTridiagonal<T> {
    beta: Complex<T>,
    /// Modified diagonal of the non-cyclic part.
    diag: Vec<Complex<T>>,
    /// Thomas forward-sweep coefficients.
    c_prime: Vec<Complex<T>>,
    denom: Vec<Complex<T>>,
    /// Correction vector `B^-1 u` and the scalar `v . q`.
    q: Vec<Complex<T>>,
    gamma: Complex<T>,
    vq: Complex<T>,
}

impl<T: WaveScalar> CyclicTridiagonal<T> {
    fn new(diag: Vec<Complex<T>>, beta: Complex<T>) -> Self {
        let n = diag.len();
        let gamma = -diag[0];
        let mut b = diag;
        b[0] = b[0] - gamma;
        b[n - 1] = b[n - 1] - beta * beta / gamma;
        let mut c_prime = vec![Complex::new(T::zero(), T::zero()); n];
        let mut denom = vec![Complex::new(T::zero(), T::zero()); n];
        denom[0] = b[0];
        c_prime[0] = beta / b[0];
        for i in 1..n {
            denom[i] = b[i] - beta * c_prime[i - 1];
            c_prime[i] = beta / denom[i];
        }
        let mut sys = Self {
            beta,
            diag: b,
            c_prime,
            denom,
            q: Vec::new(),
            gamma,
            vq: Complex::new(T::zero(), T::zero()),
        };
        let mut u = vec![Complex::new(T::zero(), T::zero()); n];
        u[0] = gamma;
        u[n - 1] = beta;
        sys.thomas(&mut u);
        sys.vq = u[0] + beta / gamma * u[n - 1];
        sys.q = u;
        sys
    }

    fn thomas(&self, x: &mut [Complex<T>]) {
        let n = x.len();
        x[0] = x[0] / self.denom[0];
        for i in 1..n {
            x[i] = (x[i] - self.beta * x[i - 1]) / self.denom[i];
        }
        for i in (0..n - 1).rev() {
            let next = x[i + 1];
            x[i] = x[i] - self.c_prime[i] * next;
        }
    }

    fn solve(&self, x: &mut [Complex<T>]) {
        let n = x.len();
        self.thomas(x);
        let vy = x[0] + self.beta / self.gamma * x[n - 1];
        let f = vy / (Complex::new(T::one(), T::zero()) + self.vq);
        for (xi, qi) in x.iter_mut().zip(&self.q) {
            *xi = *xi - qi * f;
        }
        let _ = &self.diag;
    }
}

struct CrankNicolson<T> {
    system: CyclicTridiagonal<T>,
    /// Explicit half: `(1 - i H dt/2)` as diagonal and off-diagonal.
    rhs_diag: Vec<Complex<T>>,
    rhs_off: Complex<T>,
    work: Vec<Complex<T>>,
}

impl<T: WaveScalar> CrankNicolson<T> {
    fn new(op: &EffectiveOperator<T>, grid: &Grid1D<T>, dt: T) -> Self {
        let dz = grid.dz();
        let r = op.kappa / (dz * dz);
        let i_half_dt = Complex::new(T::zero(), dt * T::half());
        let h_diag: Vec<T> = op.potential.iter().map(|&w| T::two() * r + w).collect();
        let one = Complex::new(T::one(), T::zero());
        let lhs: Vec<_> = h_diag.iter().map(|&h| one + i_half_dt * h).collect();
        let rhs: Vec<_> = h_diag.iter().map(|&h| one - i_half_dt * h).collect();
        let off = i_half_dt * (-r);
        Self {
            system: CyclicTridiagonal::new(lhs, off),
            rhs_diag: rhs,
            rhs_off: -off,
            work: vec![Complex::new(T::zero(), T::zero()); grid.n],
        }
    }

    fn step(&mut self, psi: &mut [Complex<T>], mask: Option<&[T]>) {
        let n = psi.len();
        for j in 0..n {
            let nb = psi[(j + 1) % n] + psi[(j + n - 1) % n];
            self.work[j] = self.rhs_diag[j] * psi[j] + self.rhs_off * nb;
        }
        self.system.solve(&mut self.work);
        match mask {
            Some(m) => {
                for ((p, w), &a) in psi.iter_mut().zip(&self.work).zip(m) {
                    *p = w * a;
                }
            }
            None => psi.copy_from_slice(&self.work),
        }
    }
}

enum Engine<T: FftNum> {
    Split(SplitStep<T>),
    Cn(CrankNicolson<T>),
}

/// A stepper bound to an operator, grid, time step and boundary treatment.
pub struct Propagator<T: FftNum> {
    engine: Engine<T>,
    mask: Option<Vec<T>>,
    dt: T,
    kind: StepperKind,
}

impl<T: WaveScalar> Propagator<T> {
    pub fn new(
        kind: StepperKind,
        op: &EffectiveOperator<T>,
        grid: &Grid1D<T>,
        dt: T,
        boundary: Boundary<T>,
    ) -> Result<Self> {
        if !(dt > T::zero() && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        if op.potential.len() != grid.n {
            return Err(Error::InvalidParameter("operator and grid sizes differ".into()));
        }
        let engine = match kind {
            StepperKind::SplitStep => Engine::Split(SplitStep::new(op, grid, dt)),
            StepperKind::CrankNicolson => Engine::Cn(CrankNicolson::new(op, grid, dt)),
        };
        Ok(Self { engine, mask: mask(grid, boundary)?, dt, kind })
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn kind(&self) -> StepperKind {
        self.kind
    }

    /// Advances by one step. `state.t` is left to the caller.
    fn advance(&mut self, psi: &mut [Complex<T>]) {
        let m = self.mask.as_deref();
        match &mut self.engine {
            Engine::Split(s) => s.step(psi, m),
            Engine::Cn(c) => c.step(psi, m),
        }
    }

    pub fn step(&mut self, state: &mut FieldState<T>) {
        self.advance(&mut state.psi);
        state.t += self.dt;
    }
}

/// One split-step of length `dt` on a periodic grid.
pub fn step_splitstep<T: WaveScalar>(
    state: &FieldState<T>,
    op: &EffectiveOperator<T>,
    grid: &Grid1D<T>,
    dt: T,
) -> Result<FieldState<T>> {
    let mut p = Propagator::new(StepperKind::SplitStep, op, grid, dt, Boundary::Periodic)?;
    let mut next = state.clone();
    p.step(&mut next);
    Ok(next)
}

/// One Crank-Nicolson step of length `dt` on a periodic grid. `dt = 0` is the identity.
pub fn step_crank_nicolson<T: WaveScalar>(
    state: &FieldState<T>,
    op: &EffectiveOperator<T>,
    grid: &Grid1D<T>,
    dt: T,
) -> Result<FieldState<T>> {
    if dt == T::zero() {
        return Ok(state.clone());
    }
    let mut p = Propagator::new(StepperKind::CrankNicolson, op, grid, dt, Boundary::Periodic)?;
    let mut next = state.clone();
    p.step(&mut next);
    Ok(next)
}

/// Where transmission/reflection is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservableConfig<T> {
    /// Dividing position, m.
    pub z_ref: T,
    /// Sign of the incident velocity (+1 toward larger z).
    pub incident_sign: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservableRow<T> {
    pub t: T,
    pub norm: T,
    pub centroid: T,
    pub rms_width: T,
    /// Share on the launch side of `z_ref` moving away from it.
    pub reflected_fraction: T,
    /// Share beyond `z_ref`.
    pub transmitted_fraction: T,
    /// Share with positive reduced wave number.
    pub positive_k_fraction: T,
    /// Norm removed by the absorbing mask so far.
    pub absorbed: T,
}

/// Workspace for spectral projections used by the observables.
pub struct Observer<T: FftNum> {
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    buf: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
    z: Vec<T>,
    dz: T,
    cfg: ObservableConfig<T>,
}

impl<T: WaveScalar> Observer<T> {
    pub fn new(grid: &Grid1D<T>, cfg: ObservableConfig<T>) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n);
        let inverse = planner.plan_fft_inverse(grid.n);
        let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        let zero = Complex::new(T::zero(), T::zero());
        Self {
            forward,
            inverse,
            buf: vec![zero; grid.n],
            scratch: vec![zero; len],
            z: grid.points(),
            dz: grid.dz(),
            cfg,
        }
    }

    pub fn observe(&mut self, state: &FieldState<T>, initial_norm: T) -> ObservableRow<T> {
        let n = state.psi.len();
        let dz = self.dz;
        let mut norm = T::zero();
        let mut first = T::zero();
        for (p, &z) in state.psi.iter().zip(&self.z) {
            let d = p.norm_sqr();
            norm += d;
            first += d * (z - self.cfg.z_ref);
        }
        norm *= dz;
        first *= dz;
        let centroid_rel = first / norm;
        let mut second = T::zero();
        for (p, &z) in state.psi.iter().zip(&self.z) {
            let x = z - self.cfg.z_ref - centroid_rel;
            second += p.norm_sqr() * x * x;
        }
        let rms_width = (second * dz / norm).sqrt();

        // Spectral half-plane split. The Nyquist bin and k = 0 are shared equally.
        self.buf.copy_from_slice(&state.psi);
        self.forward.process_with_scratch(&mut self.buf, &mut self.scratch);
        let mut pos = T::zero();
        let mut total = T::zero();
        for (j, c) in self.buf.iter().enumerate() {
            let w = c.norm_sqr();
            total += w;
            if j == 0 || j == n / 2 {
                pos += T::half() * w;
            } else if j < n / 2 {
                pos += w;
            }
        }
        let positive_k_fraction = if total > T::zero() { pos / total } else { T::half() };

        // Outgoing component: momenta opposite to the incident direction.
        let keep_positive = self.cfg.incident_sign < T::zero();
        let inv_n = T::one() / T::from_usize_lossy(n);
        for (j, c) in self.buf.iter_mut().enumerate() {
            let positive = j > 0 && j < n / 2;
            let negative = j > n / 2;
            let f = if j == 0 || j == n / 2 {
                T::half()
            } else if (positive && keep_positive) || (negative && !keep_positive) {
                T::one()
            } else {
                T::zero()
            };
            *c = *c * (f * inv_n);
        }
        self.inverse.process_with_scratch(&mut self.buf, &mut self.scratch);

        let launch_side = |z: T| (z - self.cfg.z_ref) * self.cfg.incident_sign < T::zero();
        let mut reflected = T::zero();
        let mut transmitted = T::zero();
        for ((p, out), &z) in state.psi.iter().zip(&self.buf).zip(&self.z) {
            if launch_side(z) {
                reflected += out.norm_sqr();
            } else {
                transmitted += p.norm_sqr();
            }
        }
        let clamp = |x: T| x.max(T::zero()).min(T::one());
        ObservableRow {
            t: state.t,
            norm,
            centroid: self.cfg.z_ref + centroid_rel,
            rms_width,
            reflected_fraction: clamp(reflected * dz / norm),
            transmitted_fraction: clamp(transmitted * dz / norm),
            positive_k_fraction,
            absorbed: (initial_norm - norm).max(T::zero()),
        }
    }
}

/// One-off evaluation of the observables.
pub fn observables<T: WaveScalar>(state: &FieldState<T>, grid: &Grid1D<T>, cfg: ObservableConfig<T>) -> ObservableRow<T> {
    let mut obs = Observer::new(grid, cfg);
    let norm = state.norm(grid);
    obs.observe(state, norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot<T> {
    pub t: T,
    pub z: Vec<T>,
    pub re: Vec<T>,
    pub im: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvolveOptions<T> {
    pub t_end: T,
    pub sample_every: T,
    pub snapshot_every: Option<T>,
    pub observe: ObservableConfig<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evolution<T> {
    pub series: Vec<ObservableRow<T>>,
    pub snapshots: Vec<Snapshot<T>>,
    pub steps: usize,
}

fn stride<T: Scalar>(every: T, dt: T) -> usize {
    (every / dt).round().to_usize().unwrap_or(1).max(1)
}

/// Steps `state` up to `t_end`, sampling observables every `sample_every`.
///
/// The step count is `ceil((t_end - t) / dt)`; times are `t0 + i dt`, so the
/// last sample may overshoot `t_end` by less than one step.
pub fn evolve<T: WaveScalar>(
    state: &mut FieldState<T>,
    propagator: &mut Propagator<T>,
    grid: &Grid1D<T>,
    opts: &EvolveOptions<T>,
) -> Result<Evolution<T>> {
    if !(opts.t_end > state.t) {
        return Err(Error::InvalidParameter(format!(
            "t_end {} s must exceed the current time {} s",
            opts.t_end, state.t
        )));
    }
    if !(opts.sample_every > T::zero()) {
        return Err(Error::InvalidParameter("sample_every must be positive".into()));
    }
    let dt = propagator.dt();
    let t0 = state.t;
    let steps = ((opts.t_end - t0) / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0).max(1);
    let sample_stride = stride(opts.sample_every, dt);
    let snap_stride = opts.snapshot_every.map(|s| stride(s, dt));
    let mut observer = Observer::new(grid, opts.observe);
    let initial_norm = state.norm(grid);
    let z = grid.points();
    let snapshot = |s: &FieldState<T>| Snapshot {
        t: s.t,
        z: z.clone(),
        re: s.psi.iter().map(|p| p.re).collect(),
        im: s.psi.iter().map(|p| p.im).collect(),
    };

    let mut out = Evolution { series: vec![observer.observe(state, initial_norm)], snapshots: Vec::new(), steps };
    if snap_stride.is_some() {
        out.snapshots.push(snapshot(state));
    }
    for i in 1..=steps {
        propagator.advance(&mut state.psi);
        state.t = t0 + T::from_usize_lossy(i) * dt;
        let last = i == steps;
        if i % sample_stride == 0 || last {
            let row = observer.observe(state, initial_norm);
            if !(row.norm.is_finite() && row.norm > T::zero()) {
                return Err(Error::StepFailure {
                    t: state.t.to_f64().unwrap_or(f64::NAN),
                    reason: "wave field norm is no longer finite and positive".into(),
                });
            }
            out.series.push(row);
        }
        if let Some(ss) = snap_stride {
            if i % ss == 0 || last {
                out.snapshots.push(snapshot(state));
            }
        }
    }
    Ok(out)
}

/// Least-squares slope of `centroid(t)` over rows whose centroid lies in `[lo, hi]`.
pub fn centroid_velocity<T: Scalar>(rows: &[ObservableRow<T>], lo: T, hi: T) -> Option<T> {
    let pts: Vec<(T, T)> = rows
        .iter()
        .filter(|r| r.centroid >= lo && r.centroid <= hi)
        .map(|r| (r.t, r.centroid))
        .collect();
    linear_slope(&pts)
}

pub(crate) fn linear_slope<T: Scalar>(pts: &[(T, T)]) -> Option<T> {
    if pts.len() < 3 {
        return None;
    }
    let n = T::from_usize_lossy(pts.len());
    let mt = pts.iter().map(|p| p.0).sum::<T>() / n;
    let mz = pts.iter().map(|p| p.1).sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for &(t, z) in pts {
        sxy += (t - mt) * (z - mz);
        sxx += (t - mt) * (t - mt);
    }
    (sxx > T::zero()).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::Profile;

    fn spec() -> MediumSpec<f64> {
        MediumSpec::with_resonance(3.0e15).unwrap()
    }

    fn l2_diff(a: &[Complex<f64>], b: &[Complex<f64>]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    #[test]
    fn operator_examples() {
        let s = spec();
        let grid = Grid1D::<f64>::new(0.0, 4e-3, 64).unwrap();
        let op = build_operator(&MediumProfiles::uniform(298.5, 300.0), &s, &grid, 2e-3).unwrap();
        assert!((op.kappa - 1.5e-5).abs() < 1e-18);
        assert!((op.mass_report - 3.515e-30).abs() < 1e-33);
        assert!(op.potential.iter().all(|&w| w == 0.0));
        let w = s.omega0 - s.omega0 / (2.0 * s.c()) * (300.0 + 298.5 * 298.5 / 300.0);
        assert!((op.w(0) - w).abs() < 1e-3);

        // Formal limit v_g = c, u = 0 gives W = omega0 / 2.
        let luminal = MediumProfiles::uniform(0.0, s.c());
        let op = build_operator(&luminal, &s, &grid, 0.0).unwrap();
        assert!((op.w(3) - s.omega0 / 2.0).abs() <= 1e-12 * s.omega0);
        assert_eq!(op.potential.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
    }

    #[test]
    fn operator_rejects_non_positive_group_velocity() {
        let s = spec();
        let grid = Grid1D::<f64>::new(0.0, 4e-3, 64).unwrap();
        let bad = MediumProfiles { flow: Profile::uniform(0.0), group_velocity: Profile::uniform(-1.0) };
        assert!(build_operator(&bad, &s, &grid, 0.0).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::<f64>::new(0.0, 1.0, 4).is_err());
        assert!(Grid1D::<f64>::new(0.0, 1.0, 100).is_err());
        assert!(Grid1D::<f64>::new(1.0, 1.0, 64).is_err());
        let g = Grid1D::<f64>::new(0.0, 4e-3, 4096).unwrap();
        assert!((g.dz() - 4e-3 / 4096.0).abs() < 1e-20);
    }

    #[test]
    fn packet_initialization() {
        let grid = Grid1D::<f64>::new(0.0, 4e-3, 4096).unwrap();
        let p = PacketSpec { z_center: 3.2e-3, sigma: 1e-4, k_carrier: -5e4, norm: 1.0 };
        let st = init_packet(&p, &grid).unwrap();
        assert!((st.norm(&grid) - 1.0).abs() < 1e-12);
        let row = observables(&st, &grid, ObservableConfig { z_ref: 2e-3, incident_sign: -1.0 });
        assert!((row.centroid - 3.2e-3).abs() < grid.dz());
        assert!((row.rms_width - 1e-4).abs() < 1e-9);
        assert!(row.reflected_fraction < 1e-12);
        assert!(row.transmitted_fraction < 1e-12);

        let bad = PacketSpec { k_carrier: 1.1 * grid.nyquist(), ..p };
        assert!(matches!(init_packet(&bad, &grid), Err(Error::Nyquist { .. })));
        let narrow = PacketSpec { sigma: 2.0 * grid.dz(), ..p };
        assert!(init_packet(&narrow, &grid).is_err());
    }

    #[test]
    fn momentum_fractions() {
        let grid = Grid1D::<f64>::new(0.0, 4e-3, 2048).unwrap();
        let cfg = ObservableConfig { z_ref: 2e-3, incident_sign: 1.0 };
        let p = PacketSpec { z_center: 2e-3, sigma: 2e-4, k_carrier: 5e4, norm: 1.0 };
        let plus = init_packet(&p, &grid).unwrap();
        assert!((observables(&plus, &grid, cfg).positive_k_fraction - 1.0).abs() < 1e-6);
        let minus = init_packet(&PacketSpec { k_carrier: -5e4, ..p }, &grid).unwrap();
        let both = FieldState { psi: plus.psi.iter().zip(&minus.psi).map(|(a, b)| a + b).collect(), t: 0.0 };
        assert!((observables(&both, &grid, cfg).positive_k_fraction - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gauge_examples() {
        let s = spec();
        let grid = Grid1D::<f64>::new(0.0, 4e-3, 4096).unwrap();
        let p = PacketSpec { z_center: 2e-3, sigma: 1e-4, k_carrier: -5e4, norm: 1.0 };
        let st = init_packet(&p, &grid).unwrap();

        let still = MediumProfiles::uniform(0.0, 300.0);
        assert_eq!(gauge_to_optical(&st, &still, &s, &grid).unwrap(), st.psi);

        let moving = MediumProfiles::uniform(298.5, 300.0);
        let phi = gauge_to_optical(&st, &moving, &s, &grid).unwrap();
        for (a, b) in phi.iter().zip(&st.psi) {
            assert!((a.norm() - b.norm()).abs() <= 1e-12 * b.norm().max(1e-300));
        }
        // Analytic phase ramp at a sample point.
        let j = 1500;
        let expect = st.psi[j] * Complex::from_polar(1.0, -s.k0() * 298.5 / 300.0 * grid.z(j));
        assert!((phi[j] - expect).norm() <= 1e-9 * expect.norm());

        // The optical carrier at the packet centre is the minus-branch wave number.
        let k_opt = optical_local_wavenumber(&st, &moving, &s, &grid).unwrap();
        let k_branch = -s.k0();
        let c = (2e-3 / grid.dz()) as usize;
        assert!(((k_opt[c] - k_branch) / k_branch).abs() < 0.01);
    }

    #[test]
    fn plane_wave_phase_is_exact() {
        let grid = Grid1D::<f64>::new(0.0, 1e-3, 256).unwrap();
        let kappa = 1.5e-5;
        let op = EffectiveOperator::free(kappa, grid.n);
        let m = 7.0;
        let k = 2.0 * std::f64::consts::PI * m / 1e-3;
        let psi: Vec<_> = grid.points().iter().map(|&z| Complex::from_polar(1.0, k * z)).collect();
        let st = FieldState { psi, t: 0.0 };
        let dt = 1e-6;
        let next = step_splitstep(&st, &op, &grid, dt).unwrap();
        let phase = Complex::from_polar(1.0, -kappa * k * k * dt);
        for (a, b) in next.psi.iter().zip(&st.psi) {
            assert!((a - b * phase).norm() < 1e-12);
        }
        // Crank-Nicolson: discrete dispersion, converging as dz^2 and dt^2.
        let cn = step_crank_nicolson(&st, &op, &grid, dt).unwrap();
        let ratio = cn.psi[10] / st.psi[10];
        let dz = grid.dz();
        let lambda = kappa * (2.0 - 2.0 * (k * dz).cos()) / (dz * dz);
        let cayley = Complex::new(1.0, -lambda * dt / 2.0) / Complex::new(1.0, lambda * dt / 2.0);
        assert!((ratio - cayley).norm() < 1e-12);
        // Stencil phase error (k dz)^2 / 12.
        let bound = 1.1 * (k * dz).powi(2) / 12.0;
        assert!((ratio.arg() - phase.arg()).abs() < bound * phase.arg().abs());
        assert_eq!(step_crank_nicolson(&st, &op, &grid, 0.0).unwrap(), st);
    }

    #[test]
    fn free_gaussian_spreads_analytically() {
        let grid = Grid1D::<f64>::new(0.0, 1e-3, 1024).unwrap();
        let kappa = 1.5e-5;
        let op = EffectiveOperator::free(kappa, grid.n);
        let s0 = 2e-5;
        let mut st = init_packet(&PacketSpec { z_center: 5e-4, sigma: s0, k_carrier: 2e4, norm: 1.0 }, &grid).unwrap();
        let dt = grid.stable_dt(kappa, 0.5);
        let mut prop = Propagator::new(StepperKind::SplitStep, &op, &grid, dt, Boundary::Periodic).unwrap();
        let t_spread = s0 * s0 / kappa;
        let opts = EvolveOptions {
            t_end: 0.5 * t_spread,
            sample_every: t_spread / 10.0,
            snapshot_every: None,
            observe: ObservableConfig { z_ref: 5e-4, incident_sign: 1.0 },
        };
        let ev = evolve(&mut st, &mut prop, &grid, &opts).unwrap();
        for r in &ev.series {
            let expect = (s0 * s0 + (2.0 * kappa * r.t).powi(2) / (4.0 * s0 * s0)).sqrt();
            assert!(((r.rms_width - expect) / expect).abs() < 1e-3, "{} vs {}", r.rms_width, expect);
            assert!((r.norm - 1.0).abs() < 1e-12);
        }
        let last = ev.series.last().unwrap();
        assert!((last.centroid - (5e-4 + 2.0 * kappa * 2e4 * last.t)).abs() < grid.dz());
    }

    fn ramp_setup() -> (Grid1D<f64>, EffectiveOperator<f64>, FieldState<f64>) {
        let s = spec();
        let grid = Grid1D::<f64>::new(0.0, 1e-3, 512).unwrap();
        let profiles = MediumProfiles {
            flow: Profile::tanh_ramp(298.5 - 0.02, 298.5, 5e-4, 5e-5).unwrap(),
            group_velocity: Profile::uniform(300.0),
        };
        let op = build_operator(&profiles, &s, &grid, 8e-4).unwrap();
        let st = init_packet(&PacketSpec { z_center: 5.5e-4, sigma: 4e-5, k_carrier: -5e4, norm: 1.0 }, &grid).unwrap();
        (grid, op, st)
    }

    #[test]
    fn strang_local_error_is_third_order() {
        let (grid, op, st) = ramp_setup();
        let diff = |dt: f64| {
            let full = step_splitstep(&st, &op, &grid, dt).unwrap();
            let half = step_splitstep(&st, &op, &grid, dt / 2.0).unwrap();
            let two = step_splitstep(&half, &op, &grid, dt / 2.0).unwrap();
            l2_diff(&two.psi, &full.psi)
        };
        let dt = 2e-6;
        let ratio = diff(dt) / diff(dt / 2.0);
        assert!(ratio > 7.0 && ratio < 9.0, "ratio {ratio}");
    }

    #[test]
    fn steppers_conserve_norm_and_agree() {
        let (grid, op, st) = ramp_setup();
        let dt = grid.stable_dt(op.kappa, 0.5);
        let mut a = st.clone();
        let mut b = st.clone();
        let mut pa = Propagator::new(StepperKind::SplitStep, &op, &grid, dt, Boundary::Periodic).unwrap();
        let mut pb = Propagator::new(StepperKind::CrankNicolson, &op, &grid, dt, Boundary::Periodic).unwrap();
        let n0 = st.norm(&grid);
        for _ in 0..2000 {
            pa.step(&mut a);
            pb.step(&mut b);
        }
        assert!(((a.norm(&grid) - n0) / n0).abs() < 1e-12);
        assert!(((b.norm(&grid) - n0) / n0).abs() < 1e-11);
        assert!(l2_diff(&b.psi, &a.psi) < 1e-2);
    }

    #[test]
    fn absorbing_mask_removes_outgoing_norm() {
        let grid = Grid1D::<f64>::new(0.0, 1e-3, 512).unwrap();
        let kappa = 1.5e-5;
        let op = EffectiveOperator::free(kappa, grid.n);
        let mut st = init_packet(&PacketSpec { z_center: 7e-4, sigma: 4e-5, k_carrier: 1e5, norm: 1.0 }, &grid).unwrap();
        let dt = grid.stable_dt(kappa, 0.5);
        let mut prop = Propagator::new(StepperKind::SplitStep, &op, &grid, dt, Boundary::Absorbing { width: 1.5e-4 }).unwrap();
        let opts = EvolveOptions {
            t_end: 4e-4 / (2.0 * kappa * 1e5),
            sample_every: 1e-5,
            snapshot_every: Some(1e-4),
            observe: ObservableConfig { z_ref: 5e-4, incident_sign: 1.0 },
        };
        let ev = evolve(&mut st, &mut prop, &grid, &opts).unwrap();
        let last = ev.series.last().unwrap();
        assert!(last.norm < 0.05, "norm {}", last.norm);
        assert!((last.norm + last.absorbed - 1.0).abs() < 1e-12);
        assert!(ev.snapshots.len() >= 2);
        assert_eq!(ev.snapshots[0].z.len(), grid.n);
    }

    #[test]
    fn generic_over_f32() {
        let grid = Grid1D::<f32>::new(0.0, 1e-3, 256).unwrap();
        let op = EffectiveOperator::free(1.5e-5f32, grid.n);
        let st = init_packet(&PacketSpec { z_center: 5e-4, sigma: 3e-5, k_carrier: 1e4, norm: 1.0 }, &grid).unwrap();
        let next = step_splitstep(&st, &op, &grid, 1e-8).unwrap();
        assert!((next.norm(&grid) - 1.0).abs() < 1e-4);
    }
}
