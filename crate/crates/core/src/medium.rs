//! Medium description: physical constants, the resonant slow-light medium,
//! spatial profiles of flow speed and group velocity, the linear
//! susceptibility and the local Doppler shift.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Speed of light used by default. Rounded so that `k0 = omega0 / c` comes
/// out as a round number for the reference medium.
pub const DEFAULT_C: f64 = 3.0e8;
pub const DEFAULT_HBAR: f64 = 1.054_571_817e-34;
pub const DEFAULT_EPSILON: f64 = 1.0e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicalConstants<T> {
    /// Vacuum speed of light, m/s.
    pub c: T,
    /// Reduced Planck constant, J s. Only used to report the effective mass.
    pub hbar: T,
}

impl<T: Scalar> PhysicalConstants<T> {
    pub fn new(c: T, hbar: T) -> Result<Self> {
        if !(c > T::zero() && c.is_finite()) {
            return Err(Error::InvalidParameter(format!("c must be positive, got {c}")));
        }
        if !(hbar > T::zero() && hbar.is_finite()) {
            return Err(Error::InvalidParameter(format!("hbar must be positive, got {hbar}")));
        }
        Ok(Self { c, hbar })
    }
}

impl<T: Scalar> Default for PhysicalConstants<T> {
    fn default() -> Self {
        Self { c: T::lit(DEFAULT_C), hbar: T::lit(DEFAULT_HBAR) }
    }
}

/// A resonant medium supporting slow light around `omega0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumSpec<T> {
    /// Resonance angular frequency, rad/s.
    pub omega0: T,
    /// Relative width of the frequency window in which the susceptibility is linear.
    pub epsilon: T,
    pub constants: PhysicalConstants<T>,
}

impl<T: Scalar> MediumSpec<T> {
    pub fn new(omega0: T, epsilon: T, constants: PhysicalConstants<T>) -> Result<Self> {
        if !(omega0 > T::zero() && omega0.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega0 must be positive, got {omega0}")));
        }
        if !(epsilon > T::zero() && epsilon < T::one()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1), got {epsilon}"
            )));
        }
        Ok(Self { omega0, epsilon, constants })
    }

    /// Medium with default constants and window parameter.
    pub fn with_resonance(omega0: T) -> Result<Self> {
        Self::new(omega0, T::lit(DEFAULT_EPSILON), PhysicalConstants::default())
    }

    #[inline]
    pub fn c(&self) -> T {
        self.constants.c
    }

    /// Vacuum wave number at resonance, 1/m.
    #[inline]
    pub fn k0(&self) -> T {
        self.omega0 / self.constants.c
    }
}

/// Natural cubic spline through tabulated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline<T> {
    z: Vec<T>,
    values: Vec<T>,
    /// Second derivatives at the knots.
    curvature: Vec<T>,
}

impl<T: Scalar> CubicSpline<T> {
    pub fn natural(z: Vec<T>, values: Vec<T>) -> Result<Self> {
        let n = z.len();
        if n < 2 || values.len() != n {
            return Err(Error::InvalidParameter(format!(
                "table needs at least two samples with matching lengths (got {} z, {} values)",
                n,
                values.len()
            )));
        }
        if z.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("table z samples must be strictly increasing".into()));
        }
        if z.iter().chain(values.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("table samples must be finite".into()));
        }

        // Tridiagonal system for interior second derivatives; natural ends.
        let mut curvature = vec![T::zero(); n];
        if n > 2 {
            let m = n - 2;
            let mut diag = vec![T::zero(); m];
            let mut upper = vec![T::zero(); m];
            let mut rhs = vec![T::zero(); m];
            let six = T::lit(6.0);
            for i in 1..n - 1 {
                let h0 = z[i] - z[i - 1];
                let h1 = z[i + 1] - z[i];
                diag[i - 1] = T::two() * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] =
                    six * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
            }
            // Thomas sweep; sub-diagonal entry of row i is h_{i-1} = z[i] - z[i-1].
            for i in 1..m {
                let lower = z[i + 1] - z[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] = rhs[i] - w * rhs[i - 1];
            }
            let mut x = vec![T::zero(); m];
            x[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                x[i] = (rhs[i] - upper[i] * x[i + 1]) / diag[i];
            }
            curvature[1..n - 1].copy_from_slice(&x);
        }
        Ok(Self { z, values, curvature })
    }

    pub fn domain(&self) -> (T, T) {
        (self.z[0], self.z[self.z.len() - 1])
    }

    pub fn knots(&self) -> (&[T], &[T]) {
        (&self.z, &self.values)
    }

    fn locate(&self, z: T) -> Result<usize> {
        let (lo, hi) = self.domain();
        if !(z >= lo && z <= hi) {
            return Err(Error::Domain {
                z: z.to_f64().unwrap_or(f64::NAN),
                min: lo.to_f64().unwrap_or(f64::NAN),
                max: hi.to_f64().unwrap_or(f64::NAN),
            });
        }
        let idx = self.z.partition_point(|&zi| zi <= z);
        Ok(idx.saturating_sub(1).min(self.z.len() - 2))
    }

    pub fn eval(&self, z: T) -> Result<T> {
        let i = self.locate(z)?;
        let h = self.z[i + 1] - self.z[i];
        let a = (self.z[i + 1] - z) / h;
        let b = (z - self.z[i]) / h;
        let six = T::lit(6.0);
        Ok(a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.curvature[i] + (b * b * b - b) * self.curvature[i + 1]) * h * h
                / six)
    }

    pub fn derivative(&self, z: T) -> Result<T> {
        let i = self.locate(z)?;
        let h = self.z[i + 1] - self.z[i];
        let a = (self.z[i + 1] - z) / h;
        let b = (z - self.z[i]) / h;
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        Ok((self.values[i + 1] - self.values[i]) / h
            - (three * a * a - T::one()) * h / six * self.curvature[i]
            + (three * b * b - T::one()) * h / six * self.curvature[i + 1])
    }
}

/// A speed (m/s) as a function of position z (m).
#[derive(Debug, Clone, PartialEq)]
pub enum Profile<T> {
    Uniform { value: T },
    /// Transition from `left` to `right` over `[center - smoothing, center + smoothing]`
    /// using a C² quintic blend. Exactly uniform outside that interval.
    Step { left: T, right: T, center: T, smoothing: T },
    /// `left + (right - left) (1 + tanh((z - center) / width)) / 2`.
    TanhRamp { left: T, right: T, center: T, width: T },
    /// Linear interpolation between `z_start` and `z_end`, clamped outside.
    LinearRamp { left: T, right: T, z_start: T, z_end: T },
    Table(CubicSpline<T>),
}

impl<T: Scalar> Profile<T> {
    pub fn uniform(value: T) -> Self {
        Profile::Uniform { value }
    }

    pub fn step(left: T, right: T, center: T, smoothing: T) -> Result<Self> {
        if !(smoothing > T::zero()) {
            return Err(Error::InvalidParameter(format!(
                "step smoothing length must be positive, got {smoothing}"
            )));
        }
        Ok(Profile::Step { left, right, center, smoothing })
    }

    pub fn tanh_ramp(left: T, right: T, center: T, width: T) -> Result<Self> {
        if !(width > T::zero()) {
            return Err(Error::InvalidParameter(format!("ramp width must be positive, got {width}")));
        }
        Ok(Profile::TanhRamp { left, right, center, width })
    }

    pub fn linear_ramp(left: T, right: T, z_start: T, z_end: T) -> Result<Self> {
        if !(z_end > z_start) {
            return Err(Error::InvalidParameter("linear ramp needs z_end > z_start".into()));
        }
        Ok(Profile::LinearRamp { left, right, z_start, z_end })
    }

    pub fn table(z: Vec<T>, values: Vec<T>) -> Result<Self> {
        CubicSpline::natural(z, values).map(Profile::Table)
    }

    fn check_finite(z: T) -> Result<()> {
        if z.is_finite() {
            Ok(())
        } else {
            Err(Error::Domain { z: z.to_f64().unwrap_or(f64::NAN), min: f64::MIN, max: f64::MAX })
        }
    }

    /// Value of the profile at `z`.
    pub fn eval(&self, z: T) -> Result<T> {
        Self::check_finite(z)?;
        Ok(match self {
            Profile::Uniform { value } => *value,
            Profile::Step { left, right, center, smoothing } => {
                let s = smootherstep((z - (*center - *smoothing)) / (T::two() * *smoothing));
                *left + (*right - *left) * s
            }
            Profile::TanhRamp { left, right, center, width } => {
                let s = (T::one() + ((z - *center) / *width).tanh()) * T::half();
                *left + (*right - *left) * s
            }
            Profile::LinearRamp { left, right, z_start, z_end } => {
                let s = ((z - *z_start) / (*z_end - *z_start)).max(T::zero()).min(T::one());
                *left + (*right - *left) * s
            }
            Profile::Table(spline) => spline.eval(z)?,
        })
    }

    /// Spatial derivative d/dz of the profile at `z`, 1/s.
    pub fn derivative(&self, z: T) -> Result<T> {
        Self::check_finite(z)?;
        Ok(match self {
            Profile::Uniform { .. } => T::zero(),
            Profile::Step { left, right, center, smoothing } => {
                let width = T::two() * *smoothing;
                let s = (z - (*center - *smoothing)) / width;
                (*right - *left) * smootherstep_slope(s) / width
            }
            Profile::TanhRamp { left, right, center, width } => {
                let th = ((z - *center) / *width).tanh();
                (*right - *left) * T::half() * (T::one() - th * th) / *width
            }
            Profile::LinearRamp { left, right, z_start, z_end } => {
                if z < *z_start || z > *z_end {
                    T::zero()
                } else {
                    (*right - *left) / (*z_end - *z_start)
                }
            }
            Profile::Table(spline) => spline.derivative(z)?,
        })
    }

    /// Interval on which the profile is defined.
    pub fn domain(&self) -> (T, T) {
        match self {
            Profile::Table(spline) => spline.domain(),
            _ => (T::neg_infinity(), T::infinity()),
        }
    }

    /// Smallest and largest values the profile takes.
    pub fn range(&self) -> (T, T) {
        let pair = |a: T, b: T| (a.min(b), a.max(b));
        match self {
            Profile::Uniform { value } => (*value, *value),
            Profile::Step { left, right, .. }
            | Profile::TanhRamp { left, right, .. }
            | Profile::LinearRamp { left, right, .. } => pair(*left, *right),
            Profile::Table(spline) => {
                // Spline overshoot between knots is checked on a refined sampling.
                let (lo, hi) = spline.domain();
                let n = 16 * spline.z.len();
                let mut min = T::infinity();
                let mut max = T::neg_infinity();
                for i in 0..=n {
                    let z = lo + (hi - lo) * T::from_usize_lossy(i) / T::from_usize_lossy(n);
                    if let Ok(v) = spline.eval(z) {
                        min = min.min(v);
                        max = max.max(v);
                    }
                }
                (min, max)
            }
        }
    }

    /// Checks that the profile is a valid flow speed: |value| < c.
    pub fn validate_flow(&self, c: T) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo.is_finite() && hi.is_finite()) || lo.abs() >= c || hi.abs() >= c {
            return Err(Error::InvalidParameter(format!(
                "flow profile range [{lo}, {hi}] m/s must be finite and below c"
            )));
        }
        Ok(())
    }

    /// Checks that the profile is a valid group velocity: 0 < value < c.
    pub fn validate_group_velocity(&self, c: T) -> Result<()> {
        let (lo, hi) = self.range();
        if !(lo > T::zero()) || !(hi < c) {
            return Err(Error::InvalidParameter(format!(
                "group velocity profile range [{lo}, {hi}] m/s must lie in (0, c)"
            )));
        }
        Ok(())
    }
}

fn smootherstep<T: Scalar>(s: T) -> T {
    let s = s.max(T::zero()).min(T::one());
    s * s * s * (T::lit(10.0) + s * (T::lit(-15.0) + T::lit(6.0) * s))
}

fn smootherstep_slope<T: Scalar>(s: T) -> T {
    if s <= T::zero() || s >= T::one() {
        return T::zero();
    }
    let t = s * (T::one() - s);
    T::lit(30.0) * t * t
}

/// Flow speed and group velocity profiles of a stationary medium.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumProfiles<T> {
    pub flow: Profile<T>,
    pub group_velocity: Profile<T>,
}

/// Local medium parameters at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMedium<T> {
    pub u: T,
    pub v_g: T,
    pub du_dz: T,
    pub dvg_dz: T,
}

impl<T: Scalar> MediumProfiles<T> {
    pub fn new(flow: Profile<T>, group_velocity: Profile<T>, c: T) -> Result<Self> {
        flow.validate_flow(c)?;
        group_velocity.validate_group_velocity(c)?;
        Ok(Self { flow, group_velocity })
    }

    pub fn uniform(u: T, v_g: T) -> Self {
        Self { flow: Profile::uniform(u), group_velocity: Profile::uniform(v_g) }
    }

    pub fn at(&self, z: T) -> Result<LocalMedium<T>> {
        Ok(LocalMedium {
            u: self.flow.eval(z)?,
            v_g: self.group_velocity.eval(z)?,
            du_dz: self.flow.derivative(z)?,
            dvg_dz: self.group_velocity.derivative(z)?,
        })
    }
}

/// Free-function form of [`Profile::eval`].
pub fn eval_profile<T: Scalar>(p: &Profile<T>, z: T) -> Result<T> {
    p.eval(z)
}

/// Linear susceptibility of the medium at co-moving frequency `omega_prime`.
pub fn susceptibility<T: Scalar>(omega_prime: T, spec: &MediumSpec<T>, v_g: T) -> T {
    T::two() * spec.c() / v_g * (omega_prime - spec.omega0) / spec.omega0
}

/// Frequency and wave vector in the frame co-moving with flow `u` (1D).
/// The wave vector is unchanged.
pub fn doppler<T: Scalar>(omega: T, k: T, u: T) -> (T, T) {
    (omega - u * k, k)
}

/// Vector form of [`doppler`].
pub fn doppler_3d<T: Scalar>(omega: T, k: [T; 3], u: [T; 3]) -> (T, [T; 3]) {
    let dot = k[0] * u[0] + k[1] * u[1] + k[2] * u[2];
    (omega - dot, k)
}

/// Whether `omega_prime` lies inside the window where the linear
/// susceptibility holds.
pub fn in_window<T: Scalar>(omega_prime: T, spec: &MediumSpec<T>, v_g: T) -> bool {
    (omega_prime - spec.omega0).abs() < spec.epsilon * (v_g / spec.c()) * spec.omega0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference() -> MediumSpec<f64> {
        MediumSpec::with_resonance(3.0e15).unwrap()
    }

    #[test]
    fn k0_of_reference_medium() {
        assert_eq!(reference().k0(), 1.0e7);
    }

    #[test]
    fn rejects_bad_medium() {
        assert!(MediumSpec::new(-1.0, 1e-3, PhysicalConstants::default()).is_err());
        assert!(MediumSpec::new(3e15, 1.5, PhysicalConstants::default()).is_err());
        assert!(PhysicalConstants::new(0.0, 1e-34).is_err());
        assert!(PhysicalConstants::new(3e8, -1.0).is_err());
    }

    #[test]
    fn profile_examples() {
        assert_eq!(Profile::uniform(298.5).eval(1e-3).unwrap(), 298.5);
        let step = Profile::step(298.5, 298.5 + 0.0115, 2e-3, 1e-4).unwrap();
        assert_eq!(step.eval(0.0).unwrap(), 298.5);
        assert_eq!(step.eval(4e-3).unwrap(), 298.5 + 0.0115);
        let ramp = Profile::<f64>::tanh_ramp(300.0, 299.5, 2e-3, 2e-4).unwrap();
        assert!((ramp.eval(2e-3).unwrap() - 299.75).abs() < 1e-12);
        let lin = Profile::linear_ramp(1.0, 3.0, 0.0, 2.0).unwrap();
        assert_eq!(lin.eval(-1.0).unwrap(), 1.0);
        assert_eq!(lin.eval(1.0).unwrap(), 2.0);
        assert_eq!(lin.eval(5.0).unwrap(), 3.0);
    }

    #[test]
    fn step_requires_smoothing() {
        assert!(Profile::step(1.0, 2.0, 0.0, 0.0).is_err());
        assert!(Profile::tanh_ramp(1.0, 2.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn table_out_of_domain() {
        let table = Profile::table(vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 1.0]).unwrap();
        assert!(matches!(table.eval(2.5), Err(Error::Domain { .. })));
        assert!(matches!(table.derivative(-0.1), Err(Error::Domain { .. })));
        assert!(Profile::uniform(1.0).eval(f64::NAN).is_err());
    }

    #[test]
    fn table_reproduces_knots_and_cubics() {
        // A natural spline through a straight line is the line itself.
        let z: Vec<f64> = (0..9).map(|i| i as f64 * 0.25).collect();
        let v: Vec<f64> = z.iter().map(|z| 2.0 + 3.0 * z).collect();
        let table = Profile::table(z.clone(), v.clone()).unwrap();
        for (zi, vi) in z.iter().zip(&v) {
            assert!((table.eval(*zi).unwrap() - vi).abs() < 1e-12);
        }
        assert!((table.eval(0.6).unwrap() - 3.8).abs() < 1e-12);
        assert!((table.derivative(1.3).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_tracks_smooth_function() {
        let z: Vec<f64> = (0..=200).map(|i| i as f64 * 0.01).collect();
        let v: Vec<f64> = z.iter().map(|z| z.sin()).collect();
        let table = Profile::table(z, v).unwrap();
        for &x in &[0.333, 0.777, 1.234, 1.5] {
            assert!((table.eval(x).unwrap() - f64::sin(x)).abs() < 1e-8);
            assert!((table.derivative(x).unwrap() - f64::cos(x)).abs() < 1e-5);
        }
    }

    #[test]
    fn profile_validation() {
        let c = 3e8;
        assert!(Profile::uniform(-1.0).validate_group_velocity(c).is_err());
        assert!(Profile::uniform(300.0).validate_group_velocity(c).is_ok());
        assert!(Profile::uniform(4e8).validate_flow(c).is_err());
        assert!(MediumProfiles::new(Profile::uniform(0.0), Profile::uniform(0.0), c).is_err());
    }

    #[test]
    fn susceptibility_examples() {
        let spec = reference();
        assert_eq!(susceptibility(spec.omega0, &spec, 300.0), 0.0);
        let w = spec.omega0 * (1.0 + 300.0 / (2.0 * spec.c()));
        assert!((susceptibility(w, &spec, 300.0) - 1.0).abs() < 1e-6);
        let chi = susceptibility(spec.omega0 + 3e6, &spec, 300.0);
        assert!((chi - 2e-3).abs() < 1e-12);
    }

    #[test]
    fn doppler_examples() {
        let spec = reference();
        let k0 = spec.k0();
        let u0 = 298.5;
        assert_eq!(doppler(spec.omega0, 123.0, 0.0).0, spec.omega0);
        let (w, k) = doppler(spec.omega0 * (1.0 - u0 / spec.c()), -k0, u0);
        assert!((w - spec.omega0).abs() / spec.omega0 < 1e-15);
        assert_eq!(k, -k0);
        let (w, _) = doppler(spec.omega0 * (1.0 + u0 / spec.c()), k0, u0);
        assert!((w - spec.omega0).abs() / spec.omega0 < 1e-15);
        let (w3, k3) = doppler_3d(1.0, [1.0, 2.0, 3.0], [0.5, 0.0, 0.25]);
        assert_eq!(w3, 1.0 - 0.5 - 0.75);
        assert_eq!(k3, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn window_examples() {
        let spec = reference();
        assert!(in_window(spec.omega0, &spec, 300.0));
        assert!(!in_window(spec.omega0 + 3e6 * 1.001, &spec, 300.0));
        assert!(!in_window(spec.omega0 - 3e6 * 1.001, &spec, 300.0));
        assert!(in_window(spec.omega0 + 2.9e6, &spec, 300.0));
    }

    #[test]
    fn smooth_profiles_have_second_order_differences() {
        let profiles = [
            Profile::tanh_ramp(300.0, 299.5, 2e-3, 2e-4).unwrap(),
            Profile::step(298.5, 298.5115, 2e-3, 1e-4).unwrap(),
        ];
        let z = 1.97e-3;
        for p in &profiles {
            let exact = p.derivative(z).unwrap();
            let fd = |h: f64| (p.eval(z + h).unwrap() - p.eval(z - h).unwrap()) / (2.0 * h);
            let e1 = (fd(2e-6) - exact).abs();
            let e2 = (fd(1e-6) - exact).abs();
            let ratio = e1 / e2;
            assert!(ratio > 3.5 && ratio < 4.5, "ratio {ratio}");
        }
    }

    #[test]
    fn generic_over_f32() {
        let spec = MediumSpec::<f32>::with_resonance(3.0e15).unwrap();
        assert!((spec.k0() - 1.0e7).abs() / 1.0e7 < 1e-6);
        let p = Profile::<f32>::tanh_ramp(300.0, 299.5, 2e-3, 2e-4).unwrap();
        assert!((p.eval(2e-3).unwrap() - 299.75).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn doppler_keeps_wave_vector(w in 1e14f64..1e16, k in -1e8f64..1e8, u in -1e3f64..1e3) {
            prop_assert_eq!(doppler(w, k, u).1, k);
            let kv = [k, -k, 0.5 * k];
            prop_assert_eq!(doppler_3d(w, kv, [u, u, u]).1, kv);
        }

        #[test]
        fn susceptibility_is_linear(a in -1e7f64..1e7, b in -1e7f64..1e7, vg in 1.0f64..1e4) {
            let spec = reference();
            let w0 = spec.omega0;
            let lhs = susceptibility(w0 + a + b, &spec, vg);
            let rhs = susceptibility(w0 + a, &spec, vg) + susceptibility(w0 + b, &spec, vg);
            let scale = susceptibility(w0 + a.abs() + b.abs() + 1.0, &spec, vg).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-8 * scale + 1e-12);
        }

        #[test]
        fn window_symmetric_about_resonance(d in -1e7f64..1e7, vg in 1.0f64..1e4) {
            let spec = reference();
            let w0 = spec.omega0;
            prop_assert_eq!(in_window(w0 + d, &spec, vg), in_window(w0 - d, &spec, vg));
        }
    }
}
