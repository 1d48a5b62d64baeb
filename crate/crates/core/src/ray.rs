//! Geometric optics of slow-light pulses.
//!
//! Rays follow the canonical equations of the Hamiltonian
//! `omega(k, z) = omega0 + u(z) k + v_g(z) (k^2 - k0^2) / (2 k0)`:
//!
//! ```text
//! dz/dt =  d omega / dk = u + v_g k / k0
//! dk/dt = -d omega / dz = -u' k - v_g' (k^2 - k0^2) / (2 k0)
//! ```
//!
//! Profiles are stationary, so the frequency is a constant of motion. It is
//! tracked along every trajectory as a drift diagnostic. Trajectories are
//! parameterized by lab time and integrated with an embedded Dormand-Prince
//! 5(4) pair. Turning points (sign changes of dz/dt), window exits and domain
//! exits are located by bisection on the step length.

use serde::Serialize;

use crate::dispersion::{local_window_check, solve_wavevector, Branch, Detuning};
use crate::error::{Error, Result};
use crate::medium::{MediumProfiles, MediumSpec};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RayState<T> {
    /// Position, m.
    pub z: T,
    /// Wave number, 1/m.
    pub k: T,
    /// Lab time, s.
    pub t: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RayEvent<T> {
    TurningPoint { z: T, t: T, k: T },
    WindowExit { z: T, t: T },
    WindowEntry { z: T, t: T },
    DomainExit { z: T, t: T },
    /// The ray came back to its launch position after at least one turn.
    LaunchReturn { z: T, t: T },
}

impl<T: Copy> RayEvent<T> {
    pub fn position(&self) -> T {
        match *self {
            RayEvent::TurningPoint { z, .. }
            | RayEvent::WindowExit { z, .. }
            | RayEvent::WindowEntry { z, .. }
            | RayEvent::DomainExit { z, .. }
            | RayEvent::LaunchReturn { z, .. } => z,
        }
    }

    pub fn time(&self) -> T {
        match *self {
            RayEvent::TurningPoint { t, .. }
            | RayEvent::WindowExit { t, .. }
            | RayEvent::WindowEntry { t, .. }
            | RayEvent::DomainExit { t, .. }
            | RayEvent::LaunchReturn { t, .. } => t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    DomainExit,
    TimeLimit,
    MaxSteps,
    TurningEvents,
    LaunchReturn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig<T> {
    /// Initial (adaptive) or fixed step, s.
    pub dt: T,
    pub rel_tol: T,
    /// Absolute position tolerance, m.
    pub abs_tol: T,
    pub max_steps: usize,
    /// Length to which event positions are refined, m.
    pub event_refine_tol: T,
    /// Largest allowed step, s. Also bounds the sample spacing.
    pub max_dt: T,
    /// Integration time budget measured from the initial state, s.
    pub t_max: T,
    pub z_min: T,
    pub z_max: T,
    /// Stop once this many turning points have been passed.
    pub max_turning_events: Option<usize>,
    /// Stop when the ray re-crosses its launch position after turning.
    pub stop_on_return: bool,
    /// Disable step-size control and take steps of exactly `dt`.
    pub fixed_step: bool,
}

impl<T: Scalar> Default for IntegratorConfig<T> {
    fn default() -> Self {
        Self {
            dt: T::lit(1e-6),
            rel_tol: T::lit(1e-11),
            abs_tol: T::lit(1e-13),
            max_steps: 1_000_000,
            event_refine_tol: T::lit(1e-10),
            max_dt: T::lit(1e-5),
            t_max: T::lit(1e-2),
            z_min: T::lit(0.0),
            z_max: T::lit(4e-3),
            max_turning_events: None,
            stop_on_return: false,
            fixed_step: false,
        }
    }
}

impl<T: Scalar> IntegratorConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) {
            return Err(Error::InvalidParameter("integrator dt must be positive".into()));
        }
        if !(self.rel_tol > T::zero() && self.rel_tol < T::one()) {
            return Err(Error::InvalidParameter("rel_tol must lie in (0, 1)".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be at least 1".into()));
        }
        if !(self.event_refine_tol > T::zero() && self.max_dt > T::zero() && self.t_max > T::zero()) {
            return Err(Error::InvalidParameter(
                "event_refine_tol, max_dt and t_max must be positive".into(),
            ));
        }
        if !(self.z_max > self.z_min) {
            return Err(Error::InvalidParameter("integration domain is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTrajectory<T> {
    /// Ordered samples; times increase (decrease for backward traces).
    pub samples: Vec<RayState<T>>,
    /// Launch frequency, rad/s.
    pub omega: T,
    /// Relative frequency drift `(omega(k, z) - omega) / omega` per sample.
    pub omega_drift: Vec<T>,
    /// Accumulated `∫ (k - k_launch) dz` per sample, rad. Integrated together
    /// with the ray, so it carries the integrator's order.
    pub action: Vec<T>,
    pub events: Vec<RayEvent<T>>,
    pub termination: Termination,
}

impl<T: Scalar> RayTrajectory<T> {
    pub fn turning_points(&self) -> impl Iterator<Item = &RayEvent<T>> {
        self.events.iter().filter(|e| matches!(e, RayEvent::TurningPoint { .. }))
    }

    pub fn max_abs_drift(&self) -> T {
        self.omega_drift.iter().fold(T::zero(), |m, d| m.max(d.abs()))
    }

    pub fn last(&self) -> RayState<T> {
        *self.samples.last().expect("trajectory has at least the launch sample")
    }
}

/// `omega(k, z) - omega0`, rad/s.
pub fn frequency_offset<T: Scalar>(
    k: T,
    z: T,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
) -> Result<T> {
    let u = profiles.flow.eval(z)?;
    let v_g = profiles.group_velocity.eval(z)?;
    let k0 = spec.k0();
    Ok(u * k + v_g / (T::two() * k0) * (k - k0) * (k + k0))
}

/// Ray Hamiltonian `omega(k, z)`, rad/s.
pub fn hamiltonian_frequency<T: Scalar>(
    k: T,
    z: T,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
) -> Result<T> {
    Ok(spec.omega0 + frequency_offset(k, z, profiles, spec)?)
}

/// Right-hand side `(dz/dt, dk/dt)` of the ray equations.
pub fn ray_derivatives<T: Scalar>(
    s: &RayState<T>,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
) -> Result<(T, T)> {
    derivatives(s.z, s.k, profiles, spec.k0())
}

#[inline]
fn derivatives<T: Scalar>(z: T, k: T, profiles: &MediumProfiles<T>, k0: T) -> Result<(T, T)> {
    let m = profiles.at(z)?;
    let dz = m.u + m.v_g * k / k0;
    let dk = -m.du_dz * k - m.dvg_dz * (k - k0) * (k + k0) / (T::two() * k0);
    Ok((dz, dk))
}

/// On-shell initial state for a pulse with detuning `delta` launched at `z`.
pub fn launch<T: Scalar>(
    z: T,
    delta: Detuning<T>,
    branch: Branch,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
) -> Result<RayState<T>> {
    let m = profiles.at(z)?;
    let k = solve_wavevector(delta, m.u, m.v_g, spec, branch)?;
    Ok(RayState { z, k, t: T::zero() })
}

// Dormand-Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

struct Stepper<'a, T> {
    profiles: &'a MediumProfiles<T>,
    k0: T,
    k_ref: T,
}

impl<T: Scalar> Stepper<'_, T> {
    /// One Dormand-Prince step of length `h`; returns the 5th-order state, the
    /// embedded error estimate and the action increment.
    fn step(&self, z: T, k: T, h: T) -> Result<([T; 2], [T; 2], T)> {
        let mut stages = [[T::zero(); 2]; 7];
        let mut ks = [T::zero(); 7];
        for i in 0..7 {
            let mut zi = z;
            let mut ki = k;
            for (j, stage) in stages.iter().enumerate().take(i) {
                let a = T::lit(A[i][j]);
                zi += h * a * stage[0];
                ki += h * a * stage[1];
            }
            let (dz, dk) = derivatives(zi, ki, self.profiles, self.k0)?;
            stages[i] = [dz, dk];
            ks[i] = ki;
        }
        let mut y5 = [z, k];
        let mut err = [T::zero(); 2];
        let mut action = T::zero();
        for (i, stage) in stages.iter().enumerate() {
            let b5 = T::lit(B5[i]);
            action += h * b5 * (ks[i] - self.k_ref) * stage[0];
            let db = T::lit(B5[i] - B4[i]);
            for c in 0..2 {
                y5[c] += h * b5 * stage[c];
                err[c] += h * db * stage[c];
            }
        }
        let _ = C;
        Ok((y5, err, action))
    }
}

#[derive(Clone, Copy)]
enum EventKind {
    Turning,
    Window,
    DomainLow,
    DomainHigh,
    Return,
}

/// Integrates a ray forward in time from `initial`, whose frequency must match
/// `omega` to within `cfg.rel_tol`.
pub fn trace<T: Scalar>(
    initial: RayState<T>,
    omega: T,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<RayTrajectory<T>> {
    integrate(initial, omega, profiles, spec, cfg, T::one())
}

/// Integrates a ray backward in time for `cfg.t_max` from `initial`.
pub fn trace_backward<T: Scalar>(
    initial: RayState<T>,
    omega: T,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    cfg: &IntegratorConfig<T>,
) -> Result<RayTrajectory<T>> {
    integrate(initial, omega, profiles, spec, cfg, -T::one())
}

fn integrate<T: Scalar>(
    initial: RayState<T>,
    omega: T,
    profiles: &MediumProfiles<T>,
    spec: &MediumSpec<T>,
    cfg: &IntegratorConfig<T>,
    direction: T,
) -> Result<RayTrajectory<T>> {
    cfg.validate()?;
    let k0 = spec.k0();
    let launch_offset = frequency_offset(initial.k, initial.z, profiles, spec)?;
    let mismatch = (spec.omega0 + launch_offset - omega).abs() / omega.abs();
    if mismatch > cfg.rel_tol.max(T::lit(8.0) * T::epsilon()) {
        return Err(Error::InvalidParameter(format!(
            "initial ray state is off-shell: relative frequency mismatch {mismatch}"
        )));
    }
    let delta = Detuning(launch_offset / spec.omega0);
    let stepper = Stepper { profiles, k0, k_ref: initial.k };

    let velocity = |z: T, k: T| -> Result<T> { Ok(derivatives(z, k, profiles, k0)?.0) };
    let window_margin = |z: T, k: T| -> Result<T> {
        let m = profiles.at(z)?;
        let v = m.u + m.v_g * k / k0;
        let c = spec.c();
        Ok(spec.epsilon * m.v_g / c - (delta.0 - m.u / m.v_g * (v - m.u) / c).abs())
    };
    let in_window = |z: T, k: T| -> Result<bool> {
        let m = profiles.at(z)?;
        let v = m.u + m.v_g * k / k0;
        Ok(local_window_check(delta, m.u, v, m.v_g, spec))
    };
    let drift = |z: T, k: T| -> Result<T> {
        Ok((frequency_offset(k, z, profiles, spec)? - launch_offset) / omega)
    };

    let t_end = initial.t + direction * cfg.t_max;
    let mut traj = RayTrajectory {
        samples: vec![initial],
        omega,
        omega_drift: vec![T::zero()],
        action: vec![T::zero()],
        events: Vec::new(),
        termination: Termination::TimeLimit,
    };

    if initial.z < cfg.z_min || initial.z > cfg.z_max {
        traj.events.push(RayEvent::DomainExit { z: initial.z, t: initial.t });
        traj.termination = Termination::DomainExit;
        return Ok(traj);
    }

    let mut state = initial;
    let mut v_prev = velocity(state.z, state.k)?;
    let mut window_prev = in_window(state.z, state.k)?;
    let mut turns = 0usize;
    let mut h = cfg.dt.min(cfg.max_dt);
    let h_floor = T::epsilon() * T::lit(64.0) * (cfg.t_max + initial.t.abs());
    let mut steps = 0usize;
    let mut action = T::zero();

    loop {
        if steps >= cfg.max_steps {
            traj.termination = Termination::MaxSteps;
            break;
        }
        let remaining = (t_end - state.t) * direction;
        if remaining <= h_floor {
            traj.termination = Termination::TimeLimit;
            break;
        }
        let mut h_try = if cfg.fixed_step { cfg.dt } else { h.min(cfg.max_dt) };
        let mut reached_end = false;
        if h_try >= remaining {
            h_try = remaining;
            reached_end = true;
        }

        let attempt = stepper.step(state.z, state.k, direction * h_try);
        let (y, err, d_action) = match attempt {
            Ok(r) => r,
            Err(Error::Domain { .. }) => {
                // A stage left a tabulated profile: shrink toward the boundary.
                h = h_try * T::half();
                if h < h_floor {
                    traj.events.push(RayEvent::DomainExit { z: state.z, t: state.t });
                    traj.termination = Termination::DomainExit;
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };

        if !cfg.fixed_step {
            let sc_z = cfg.abs_tol + cfg.rel_tol * state.z.abs().max(y[0].abs());
            let sc_k = cfg.rel_tol * (state.k.abs().max(y[1].abs()) + k0);
            let norm = (err[0].abs() / sc_z).max(err[1].abs() / sc_k);
            if !norm.is_finite() {
                return Err(Error::StepFailure {
                    t: state.t.to_f64().unwrap_or(f64::NAN),
                    reason: "non-finite error estimate".into(),
                });
            }
            let factor = if norm == T::zero() {
                T::lit(5.0)
            } else {
                (T::lit(0.9) * norm.powf(T::lit(-0.2))).min(T::lit(5.0)).max(T::lit(0.2))
            };
            if norm > T::one() {
                h = h_try * factor;
                if h < h_floor {
                    return Err(Error::StepFailure {
                        t: state.t.to_f64().unwrap_or(f64::NAN),
                        reason: format!("step size underflow meeting rel_tol {}", cfg.rel_tol),
                    });
                }
                continue;
            }
            if !reached_end {
                h = h_try * factor;
            }
        }
        steps += 1;

        let next = RayState { z: y[0], k: y[1], t: state.t + direction * h_try };
        let v_next = velocity(next.z, next.k).unwrap_or(v_prev);
        let window_next = in_window(next.z, next.k).unwrap_or(window_prev);

        // Collect events triggered inside this step.
        let mut triggered: Vec<EventKind> = Vec::new();
        if (v_prev > T::zero() && v_next <= T::zero()) || (v_prev < T::zero() && v_next >= T::zero()) {
            triggered.push(EventKind::Turning);
        }
        if window_next != window_prev {
            triggered.push(EventKind::Window);
        }
        if next.z < cfg.z_min {
            triggered.push(EventKind::DomainLow);
        }
        if next.z > cfg.z_max {
            triggered.push(EventKind::DomainHigh);
        }
        if cfg.stop_on_return
            && turns > 0
            && (next.z - initial.z) * (state.z - initial.z) <= T::zero()
            && state.z != initial.z
        {
            triggered.push(EventKind::Return);
        }

        let mut located: Vec<(T, EventKind, RayState<T>, T)> = Vec::new();
        for kind in triggered {
            let g = |z: T, k: T| -> Result<T> {
                match kind {
                    EventKind::Turning => velocity(z, k),
                    EventKind::Window => window_margin(z, k),
                    EventKind::DomainLow => Ok(z - cfg.z_min),
                    EventKind::DomainHigh => Ok(z - cfg.z_max),
                    EventKind::Return => Ok(z - initial.z),
                }
            };
            let (s, at, a) = refine(&stepper, &state, h_try, direction, cfg.event_refine_tol, &g)?;
            located.push((s, kind, at, action + a));
        }
        located.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));

        let mut stop = None;
        for (_, kind, at, a) in &located {
            let (at, a) = (*at, *a);
            match kind {
                EventKind::Turning => {
                    turns += 1;
                    traj.events.push(RayEvent::TurningPoint { z: at.z, t: at.t, k: at.k });
                    push_sample(&mut traj, at, drift(at.z, at.k)?, a);
                    if cfg.max_turning_events.is_some_and(|m| turns >= m) {
                        stop = Some(Termination::TurningEvents);
                    }
                }
                EventKind::Window => {
                    let event = if window_prev {
                        RayEvent::WindowExit { z: at.z, t: at.t }
                    } else {
                        RayEvent::WindowEntry { z: at.z, t: at.t }
                    };
                    traj.events.push(event);
                }
                EventKind::DomainLow | EventKind::DomainHigh => {
                    traj.events.push(RayEvent::DomainExit { z: at.z, t: at.t });
                    push_sample(&mut traj, at, drift(at.z, at.k)?, a);
                    stop = Some(Termination::DomainExit);
                }
                EventKind::Return => {
                    traj.events.push(RayEvent::LaunchReturn { z: at.z, t: at.t });
                    push_sample(&mut traj, at, drift(at.z, at.k)?, a);
                    stop = Some(Termination::LaunchReturn);
                }
            }
            if stop.is_some() {
                break;
            }
        }
        if let Some(reason) = stop {
            traj.termination = reason;
            break;
        }

        action += d_action;
        push_sample(&mut traj, next, drift(next.z, next.k)?, action);
        state = next;
        v_prev = v_next;
        window_prev = window_next;
        if reached_end {
            traj.termination = Termination::TimeLimit;
            break;
        }
    }
    Ok(traj)
}

fn push_sample<T: Scalar>(traj: &mut RayTrajectory<T>, s: RayState<T>, drift: T, action: T) {
    if let Some(last) = traj.samples.last() {
        if last.t == s.t {
            return;
        }
    }
    traj.samples.push(s);
    traj.omega_drift.push(drift);
    traj.action.push(action);
}

/// Bisects on the step length for the sign change of `g` inside an accepted step.
fn refine<T: Scalar, G>(
    stepper: &Stepper<'_, T>,
    from: &RayState<T>,
    h: T,
    direction: T,
    tol: T,
    g: &G,
) -> Result<(T, RayState<T>, T)>
where
    G: Fn(T, T) -> Result<T>,
{
    let g0 = g(from.z, from.k)?;
    let mut lo = T::zero();
    let mut hi = h;
    let mut z_lo = from.z;
    let (mut y_hi, _, mut a_hi) = stepper.step(from.z, from.k, direction * hi)?;
    for _ in 0..200 {
        if (y_hi[0] - z_lo).abs() <= tol || hi - lo <= T::epsilon() * h {
            break;
        }
        let mid = (lo + hi) * T::half();
        let (y_mid, _, a_mid) = stepper.step(from.z, from.k, direction * mid)?;
        let g_mid = g(y_mid[0], y_mid[1])?;
        if (g_mid > T::zero()) == (g0 > T::zero()) && g_mid != T::zero() {
            lo = mid;
            z_lo = y_mid[0];
        } else {
            hi = mid;
            y_hi = y_mid;
            a_hi = a_mid;
        }
    }
    Ok((hi, RayState { z: y_hi[0], k: y_hi[1], t: from.t + direction * hi }, a_hi))
}

/// Reflection phase `∮ k dz` accumulated along a bouncing ray, rad.
///
/// Signed `k` is integrated, so a path out with `k` and back with `-k` over a
/// length `L` gives `2 k L`. The constant offset from the turning point itself
/// is not included. A ray stopped on its return to the launch position closes
/// the loop exactly there.
pub fn semiclassical_phase<T: Scalar>(traj: &RayTrajectory<T>) -> Result<T> {
    if traj.samples.len() < 2 {
        return Ok(T::zero());
    }
    let turns = traj.turning_points().count();
    if turns != 1 {
        return Err(Error::NoTurningEvent { found: turns });
    }
    let first = traj.samples[0];
    let last = traj.last();
    let action = if traj.action.len() == traj.samples.len() {
        *traj.action.last().expect("non-empty")
    } else {
        // Samples only: integrate by parts, since z(k) stays smooth through the
        // turning point where k(z) has a square-root branch.
        let mut sum = T::zero();
        for w in traj.samples.windows(2) {
            sum += T::half() * ((w[0].z - first.z) + (w[1].z - first.z)) * (w[1].k - w[0].k);
        }
        (last.k - first.k) * (last.z - first.z) - sum
    };
    if traj.termination == Termination::LaunchReturn {
        // The k_launch part vanishes on a closed loop; the small overshoot of
        // the refined return point is removed from the action.
        return Ok(action - (last.k - first.k) * (last.z - first.z));
    }
    Ok(action + first.k * (last.z - first.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::{resonant_detuning, turning_flow_speed, turning_group_velocity};
    use crate::medium::Profile;

    const VG: f64 = 300.0;
    const U0: f64 = 298.5;

    fn spec() -> MediumSpec<f64> {
        MediumSpec::with_resonance(3.0e15).unwrap()
    }

    fn bisect(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
        let fa = f(a);
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if (f(m) > 0.0) == (fa > 0.0) {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }

    #[test]
    fn hamiltonian_examples() {
        let s = spec();
        let k0 = s.k0();
        let still = MediumProfiles::uniform(0.0, VG);
        assert_eq!(hamiltonian_frequency(k0, 1e-3, &still, &s).unwrap(), s.omega0);
        let moving = MediumProfiles::uniform(U0, VG);
        let w = hamiltonian_frequency(-k0, 1e-3, &moving, &s).unwrap();
        assert!((w - s.omega0 * (1.0 - U0 / s.c())).abs() <= 1.0);
        let off = frequency_offset(-k0, 1e-3, &moving, &s).unwrap();
        assert!((off - (-U0 * k0)).abs() < 1e-6);
        // Analytic derivative in k.
        let k = -0.99 * k0;
        let h = 1e3;
        let fd = (frequency_offset(k + h, 0.0, &moving, &s).unwrap()
            - frequency_offset(k - h, 0.0, &moving, &s).unwrap())
            / (2.0 * h);
        assert!((fd - (U0 + VG * k / k0)).abs() < 1e-6);
    }

    #[test]
    fn derivative_examples() {
        let s = spec();
        let k0 = s.k0();
        let uniform = MediumProfiles::uniform(U0, VG);
        let st = RayState { z: 1e-3, k: -0.97 * k0, t: 0.0 };
        assert_eq!(ray_derivatives(&st, &uniform, &s).unwrap().1, 0.0);

        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let st = launch(1e-3, delta, Branch::Minus, &uniform, &s).unwrap();
        let (dz, _) = ray_derivatives(&st, &uniform, &s).unwrap();
        assert!((dz - (-VG + U0)).abs() < 1e-9);

        let a = 50.0;
        let linear = MediumProfiles {
            flow: Profile::linear_ramp(U0 - a, U0 + a, -1.0, 1.0).unwrap(),
            group_velocity: Profile::uniform(VG),
        };
        let st = RayState { z: 0.0, k: -k0, t: 0.0 };
        let (_, dk) = ray_derivatives(&st, &linear, &s).unwrap();
        assert!((dk - a * k0).abs() < 1e-6 * a * k0);
    }

    #[test]
    fn launch_in_forbidden_region_fails() {
        let s = spec();
        let still = MediumProfiles::uniform(0.0, VG);
        let err = launch(0.0, Detuning(-VG / s.c()), Branch::Plus, &still, &s);
        assert!(matches!(err, Err(Error::Evanescent { .. })));
    }

    #[test]
    fn off_shell_launch_rejected() {
        let s = spec();
        let uniform = MediumProfiles::uniform(U0, VG);
        let st = RayState { z: 1e-3, k: -s.k0(), t: 0.0 };
        let cfg = IntegratorConfig::default();
        assert!(trace(st, s.omega0 * 1.01, &uniform, &s, &cfg).is_err());
    }

    #[test]
    fn uniform_flow_is_a_straight_line() {
        let s = spec();
        let uniform = MediumProfiles::uniform(U0, VG);
        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let st = launch(0.0, delta, Branch::Minus, &uniform, &s).unwrap();
        let omega = delta.frequency(&s);
        let cfg = IntegratorConfig { z_min: -1.0, z_max: 1.0, t_max: 1e-3, ..Default::default() };
        let traj = trace(st, omega, &uniform, &s, &cfg).unwrap();
        assert!(traj.events.is_empty());
        assert_eq!(traj.termination, Termination::TimeLimit);
        for p in &traj.samples {
            assert!((p.z + 1.5 * p.t).abs() < 1e-15);
            assert_eq!(p.k, st.k);
        }
        assert!((traj.last().t - 1e-3).abs() < 1e-15);
    }

    fn figure2b_profiles() -> MediumProfiles<f64> {
        MediumProfiles {
            flow: Profile::tanh_ramp(U0 - 0.0115, U0, 2e-3, 1e-4).unwrap(),
            group_velocity: Profile::uniform(VG),
        }
    }

    fn bounce_config() -> IntegratorConfig<f64> {
        IntegratorConfig { t_max: 5e-3, stop_on_return: true, ..Default::default() }
    }

    #[test]
    fn flow_drop_turning_point_matches_closed_form() {
        let s = spec();
        let profiles = figure2b_profiles();
        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let st = launch(3.2e-3, delta, Branch::Minus, &profiles, &s).unwrap();
        let traj = trace(st, delta.frequency(&s), &profiles, &s, &bounce_config()).unwrap();
        let turns: Vec<_> = traj.turning_points().collect();
        assert_eq!(turns.len(), 1);
        let u_turn = turning_flow_speed(U0, VG).unwrap();
        let z_oracle = bisect(|z| profiles.flow.eval(z).unwrap() - u_turn, 1.5e-3, 3e-3);
        let z = turns[0].position();
        assert!((z - z_oracle).abs() < 1e-9, "{z} vs {z_oracle}");
        assert!((profiles.flow.eval(z).unwrap() - u_turn).abs() <= 1e-6 * VG);
        assert_eq!(traj.termination, Termination::LaunchReturn);
        assert!((traj.last().z - 3.2e-3).abs() < 1e-9);
        assert!(traj.max_abs_drift() <= 1e-9);
    }

    #[test]
    fn group_velocity_drop_turning_point_matches_closed_form() {
        let s = spec();
        let profiles = MediumProfiles {
            flow: Profile::uniform(U0),
            group_velocity: Profile::tanh_ramp(VG - 2.0, VG, 2e-3, 2e-4).unwrap(),
        };
        let delta = Detuning(-1.00001 * U0 / s.c());
        let st = launch(2.9e-3, delta, Branch::Minus, &profiles, &s).unwrap();
        let traj = trace(st, delta.frequency(&s), &profiles, &s, &bounce_config()).unwrap();
        let turns: Vec<_> = traj.turning_points().collect();
        assert_eq!(turns.len(), 1);
        let vg_turn = turning_group_velocity(delta, U0, &s).unwrap();
        let z_oracle = bisect(|z| profiles.group_velocity.eval(z).unwrap() - vg_turn, 1.5e-3, 2.9e-3);
        assert!((turns[0].position() - z_oracle).abs() < 1e-9);
        assert!(traj.max_abs_drift() <= 1e-9);
    }

    #[test]
    fn backward_trace_retraces_forward_trace() {
        let s = spec();
        let profiles = figure2b_profiles();
        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let omega = delta.frequency(&s);
        let st = launch(3.2e-3, delta, Branch::Minus, &profiles, &s).unwrap();
        let cfg = IntegratorConfig { t_max: 1.2e-3, ..Default::default() };
        let fwd = trace(st, omega, &profiles, &s, &cfg).unwrap();
        assert_eq!(fwd.turning_points().count(), 1);
        let end = fwd.last();
        let back_cfg = IntegratorConfig { t_max: end.t - st.t, ..cfg };
        let back = trace_backward(end, omega, &profiles, &s, &back_cfg).unwrap();
        let home = back.last();
        assert!((home.t - st.t).abs() < 1e-15);
        assert!((home.z - st.z).abs() <= 1e-6 * st.z.abs());
        assert!((home.k - st.k).abs() <= 1e-6 * st.k.abs());
    }

    #[test]
    fn fixed_steps_converge_at_high_order() {
        let s = spec();
        let profiles = figure2b_profiles();
        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let omega = delta.frequency(&s);
        let st = launch(2.3e-3, delta, Branch::Minus, &profiles, &s).unwrap();
        let run = |dt: f64| {
            let cfg = IntegratorConfig { dt, fixed_step: true, t_max: 4e-4, max_dt: 1.0, ..Default::default() };
            trace(st, omega, &profiles, &s, &cfg).unwrap().last()
        };
        let reference = run(1e-7);
        let e1 = (run(4e-5).z - reference.z).abs();
        let e2 = (run(2e-5).z - reference.z).abs();
        assert!(e1 / e2 >= 16.0, "ratio {}", e1 / e2);
    }

    fn synthetic(points: &[(f64, f64)], turning: bool) -> RayTrajectory<f64> {
        let samples: Vec<_> = points
            .iter()
            .enumerate()
            .map(|(i, &(z, k))| RayState { z, k, t: i as f64 })
            .collect();
        let n = samples.len();
        RayTrajectory {
            samples,
            omega: 1.0,
            omega_drift: vec![0.0; n],
            action: vec![],
            events: if turning {
                vec![RayEvent::TurningPoint { z: 1.0, t: 1.0, k: 0.0 }]
            } else {
                vec![]
            },
            termination: Termination::LaunchReturn,
        }
    }

    #[test]
    fn phase_examples() {
        let zero = synthetic(&[(0.0, 5.0)], false);
        assert_eq!(semiclassical_phase(&zero).unwrap(), 0.0);
        // Out over L with k, back with -k.
        let (k, l) = (3.0, 2.0);
        let mirror = synthetic(&[(0.0, k), (l, k), (l, -k), (0.0, -k)], true);
        assert!((semiclassical_phase(&mirror).unwrap() - 2.0 * k * l).abs() < 1e-12);
        let no_turn = synthetic(&[(0.0, k), (l, k)], false);
        assert!(matches!(semiclassical_phase(&no_turn), Err(Error::NoTurningEvent { found: 0 })));
    }

    #[test]
    fn phase_self_converges() {
        let s = spec();
        let profiles = figure2b_profiles();
        let delta = resonant_detuning(U0, &s, Branch::Minus);
        let omega = delta.frequency(&s);
        let st = launch(3.2e-3, delta, Branch::Minus, &profiles, &s).unwrap();
        let phase = |max_dt: f64, rel_tol: f64| {
            let cfg = IntegratorConfig { max_dt, rel_tol, ..bounce_config() };
            semiclassical_phase(&trace(st, omega, &profiles, &s, &cfg).unwrap()).unwrap()
        };
        let coarse = phase(2e-6, 1e-11);
        let fine = phase(1e-6, 1e-12);
        assert!(((coarse - fine) / fine).abs() < 1e-9, "{coarse} vs {fine}");
    }

    #[test]
    fn generic_over_f32() {
        let s = MediumSpec::<f32>::with_resonance(3.0e15).unwrap();
        let profiles = MediumProfiles::uniform(298.5f32, 300.0);
        let st = RayState { z: 1e-3f32, k: -s.k0(), t: 0.0 };
        let (dz, dk) = ray_derivatives(&st, &profiles, &s).unwrap();
        assert!((dz + 1.5).abs() < 1e-3);
        assert_eq!(dk, 0.0);
    }
}
