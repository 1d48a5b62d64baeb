//! Closed-form slow-light dispersion in 1D and 3D: wave-vector branches,
//! group velocities, resonance and window conditions, turning points and
//! regime classification.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medium::{doppler, susceptibility, MediumSpec};
use crate::scalar::Scalar;

/// Fractional detuning `(omega - omega0) / omega0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Detuning<T>(pub T);

impl<T: Scalar> Detuning<T> {
    pub fn from_frequency(omega: T, spec: &MediumSpec<T>) -> Self {
        Detuning((omega - spec.omega0) / spec.omega0)
    }

    /// Absolute angular frequency, rad/s.
    pub fn frequency(self, spec: &MediumSpec<T>) -> T {
        spec.omega0 + spec.omega0 * self.0
    }

    /// Offset from resonance `omega - omega0`, rad/s.
    pub fn offset(self, spec: &MediumSpec<T>) -> T {
        spec.omega0 * self.0
    }

    #[inline]
    pub fn value(self) -> T {
        self.0
    }
}

/// Propagation with (`Plus`) or against (`Minus`) a positive flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub fn sign<T: Scalar>(self) -> T {
        match self {
            Branch::Plus => T::one(),
            Branch::Minus => -T::one(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Plus => "plus",
            Branch::Minus => "minus",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Propagating,
    AtTurningPoint,
    Evanescent,
    OutOfWindow,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Propagating => "propagating",
            Regime::AtTurningPoint => "at-turning-point",
            Regime::Evanescent => "evanescent",
            Regime::OutOfWindow => "out-of-window",
        }
    }
}

/// Default tolerance on the discriminant for classifying a turning point.
pub const TURNING_TOLERANCE: f64 = 1e-12;

/// Discriminant `1 + 2 (c / v_g) delta + u^2 / v_g^2` of the 1D branches.
///
/// Evaluated as `((v_g + c delta)^2 + (u - c delta)(u + c delta)) / v_g^2`, which
/// stays accurate near the Galilean working points where the naive sum cancels.
pub fn discriminant<T: Scalar>(delta: Detuning<T>, u: T, v_g: T, spec: &MediumSpec<T>) -> T {
    let c = spec.c();
    let p = c.mul_add(delta.0, v_g);
    let q_minus = (-c).mul_add(delta.0, u);
    let q_plus = c.mul_add(delta.0, u);
    p.mul_add(p, q_minus * q_plus) / (v_g * v_g)
}

/// Residual of the full co-moving dispersion relation with linear
/// susceptibility, in 1/m².
pub fn residual_full<T: Scalar>(k: T, omega: T, u: T, spec: &MediumSpec<T>, v_g: T) -> T {
    let (omega_prime, k_prime) = doppler(omega, k, u);
    let chi = susceptibility(omega_prime, spec, v_g);
    let c = spec.c();
    let w2 = omega_prime * omega_prime / (c * c);
    k_prime * k_prime - w2 - chi * w2
}

/// Residual of the slow-light approximation, in 1/m².
pub fn residual_slowlight<T: Scalar>(k: T, omega: T, u: T, spec: &MediumSpec<T>, v_g: T) -> T {
    residual_slowlight_detuned(k, Detuning::from_frequency(omega, spec), u, spec, v_g)
}

/// [`residual_slowlight`] with the frequency given as a detuning, avoiding the
/// rounding of the absolute frequency.
pub fn residual_slowlight_detuned<T: Scalar>(
    k: T,
    delta: Detuning<T>,
    u: T,
    spec: &MediumSpec<T>,
    v_g: T,
) -> T {
    let k0 = spec.k0();
    (k - k0) * (k + k0) - T::two() * k0 / v_g * (delta.offset(spec) - u * k)
}

/// Wave number of the requested 1D branch.
pub fn solve_wavevector<T: Scalar>(
    delta: Detuning<T>,
    u: T,
    v_g: T,
    spec: &MediumSpec<T>,
    branch: Branch,
) -> Result<T> {
    let d = discriminant(delta, u, v_g, spec);
    if d < T::zero() {
        return Err(evanescent(d));
    }
    Ok(spec.k0() * (branch.sign::<T>() * d.sqrt() - u / v_g))
}

/// Group velocity `±v_g sqrt(D)` of the requested 1D branch, m/s.
pub fn group_velocity_1d<T: Scalar>(
    delta: Detuning<T>,
    u: T,
    v_g: T,
    spec: &MediumSpec<T>,
    branch: Branch,
) -> Result<T> {
    let d = discriminant(delta, u, v_g, spec);
    if d < T::zero() {
        return Err(evanescent(d));
    }
    Ok(branch.sign::<T>() * v_g * d.sqrt())
}

/// Slow-light velocity addition: `v_g k / k0 + u`.
pub fn group_velocity_3d<T: Scalar>(k: [T; 3], u: [T; 3], v_g: T, spec: &MediumSpec<T>) -> [T; 3] {
    let scale = v_g / spec.k0();
    [scale * k[0] + u[0], scale * k[1] + u[1], scale * k[2] + u[2]]
}

/// Detuning that is Doppler-shifted onto resonance by a uniform flow `u0`.
pub fn resonant_detuning<T: Scalar>(u0: T, spec: &MediumSpec<T>, branch: Branch) -> Detuning<T> {
    Detuning(branch.sign::<T>() * u0 / spec.c())
}

/// Branch of the 1D relation that carries the Doppler-resonant carrier
/// `k = ∓k0` of a pulse moving on `comoving` in the rest frame of a uniform
/// flow `u0`. The label follows the sign of the lab-frame velocity, so it
/// differs from `comoving` once the flow outruns the pulse.
pub fn resonant_branch<T: Scalar>(v_g: T, u0: T, comoving: Branch) -> Branch {
    if galilean_velocity(v_g, u0, comoving) >= T::zero() {
        Branch::Plus
    } else {
        Branch::Minus
    }
}

/// Galilean velocity `±v_g + u0`.
pub fn galilean_velocity<T: Scalar>(v_g: T, u0: T, branch: Branch) -> T {
    branch.sign::<T>() * v_g + u0
}

/// Validity of the linear susceptibility expressed through the pulse velocity `v`.
pub fn local_window_check<T: Scalar>(
    delta: Detuning<T>,
    u: T,
    v: T,
    v_g: T,
    spec: &MediumSpec<T>,
) -> bool {
    let c = spec.c();
    (delta.0 - u / v_g * (v - u) / c).abs() < spec.epsilon * v_g / c
}

/// Flow speed at which a counter-propagating resonant pulse launched in flow
/// `u0` comes to rest.
pub fn turning_flow_speed<T: Scalar>(u0: T, v_g: T) -> Result<T> {
    if !(v_g > T::zero()) {
        return Err(Error::InvalidParameter(format!("v_g must be positive, got {v_g}")));
    }
    let arg = T::two() * u0 / v_g - T::one();
    if arg < T::zero() {
        return Err(Error::NoTurningPoint(format!(
            "flow speed {u0} m/s does not exceed v_g / 2 = {} m/s",
            v_g * T::half()
        )));
    }
    Ok(v_g * arg.sqrt())
}

/// Both roots of `v_g^2 + 2 c delta v_g + u0^2 = 0`, ordered (larger, smaller).
pub fn turning_group_velocity_roots<T: Scalar>(
    delta: Detuning<T>,
    u0: T,
    spec: &MediumSpec<T>,
) -> Result<(T, T)> {
    let s = -spec.c() * delta.0;
    let u = u0.abs();
    if !(s > T::zero()) {
        return Err(Error::NoTurningPoint(format!(
            "detuning {} is not negative",
            delta.0
        )));
    }
    let mut gap = (s - u) * (s + u);
    if gap < T::zero() {
        // Exactly at the freezing detuning the product c * delta rounds either way.
        if (s - u).abs() <= T::lit(8.0) * T::epsilon() * u {
            gap = T::zero();
        } else {
            return Err(Error::NoTurningPoint(format!(
                "|c delta| = {s} m/s is below the flow speed {u} m/s"
            )));
        }
    }
    let root = gap.sqrt();
    Ok((s + root, s - root))
}

/// Group velocity of the medium at which a pulse with detuning `delta` turns
/// around in a uniform flow `u0`. Returns the larger root, which is met first
/// when `v_g` decreases from above.
pub fn turning_group_velocity<T: Scalar>(delta: Detuning<T>, u0: T, spec: &MediumSpec<T>) -> Result<T> {
    turning_group_velocity_roots(delta, u0, spec).map(|(larger, _)| larger)
}

/// Classifies the propagation regime. `turning_tol` bounds |D| for the
/// at-turning-point class; `D = 0` exactly counts as a turning point.
pub fn classify_regime<T: Scalar>(
    delta: Detuning<T>,
    u: T,
    v_g: T,
    spec: &MediumSpec<T>,
    branch: Branch,
    turning_tol: T,
) -> Regime {
    let d = discriminant(delta, u, v_g, spec);
    if d.abs() <= turning_tol {
        return Regime::AtTurningPoint;
    }
    if d < T::zero() {
        return Regime::Evanescent;
    }
    let v = branch.sign::<T>() * v_g * d.sqrt();
    if local_window_check(delta, u, v, v_g, spec) {
        Regime::Propagating
    } else {
        Regime::OutOfWindow
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionQuery<T> {
    pub delta: Detuning<T>,
    pub u: T,
    pub v_g: T,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispersionResult<T> {
    /// Absent in the evanescent regime.
    pub k: Option<T>,
    pub v: Option<T>,
    pub in_local_window: bool,
    pub regime: Regime,
}

/// Evaluates a query completely; never fails, evanescent points carry no `k`.
pub fn evaluate<T: Scalar>(query: &DispersionQuery<T>, spec: &MediumSpec<T>) -> DispersionResult<T> {
    let DispersionQuery { delta, u, v_g, branch } = *query;
    let regime = classify_regime(delta, u, v_g, spec, branch, T::lit(TURNING_TOLERANCE));
    let d = discriminant(delta, u, v_g, spec);
    if d < T::zero() {
        return DispersionResult { k: None, v: None, in_local_window: false, regime };
    }
    let root = d.sqrt();
    let sign = branch.sign::<T>();
    let k = spec.k0() * (sign * root - u / v_g);
    let v = sign * v_g * root;
    DispersionResult {
        k: Some(k),
        v: Some(v),
        in_local_window: local_window_check(delta, u, v, v_g, spec),
        regime,
    }
}

/// Root of the full dispersion relation (with Doppler shift and linear
/// susceptibility) near the slow-light branch, found by bracketed Brent search.
pub fn solve_wavevector_full<T>(
    delta: Detuning<T>,
    u: T,
    v_g: T,
    spec: &MediumSpec<T>,
    branch: Branch,
) -> Result<T>
where
    T: Scalar + roots::FloatType,
{
    let guess = solve_wavevector(delta, u, v_g, spec, branch)?;
    let omega = delta.frequency(spec);
    let f = |k: T| residual_full(k, omega, u, spec, v_g);
    let k0 = spec.k0();
    let mut half = k0 * T::lit(1e-7);
    let limit = k0 * T::lit(0.1);
    let (a, b) = loop {
        let (a, b) = (guess - half, guess + half);
        if f(a) * f(b) <= <T as num_traits::Zero>::zero() {
            break (a, b);
        }
        half *= T::two();
        if half > limit {
            return Err(Error::InvalidParameter(format!(
                "no sign change of the full dispersion residual within ±{limit} 1/m of {guess}"
            )));
        }
    };
    let mut conv = roots::SimpleConvergency { eps: k0 * T::lit(1e-15), max_iter: 200 };
    roots::find_root_brent(a, b, f, &mut conv).map_err(|e| {
        Error::InvalidParameter(format!("full dispersion root search failed: {e:?}"))
    })
}

fn evanescent<T: Scalar>(d: T) -> Error {
    Error::Evanescent { discriminant: d.to_f64().unwrap_or(f64::NAN) }
}
