//! Canned runs of the reference configurations. Each run binds the
//! dispersion, ray and wave layers together, reports derived quantities with
//! their provenance, and evaluates built-in checks.

use serde::Serialize;

use crate::config::{BoundaryKind, ProfileConfig, RunConfig, ScenarioName};
use crate::dispersion::{
    discriminant, galilean_velocity, group_velocity_1d, local_window_check, resonant_branch, resonant_detuning,
    solve_wavevector, solve_wavevector_full, turning_flow_speed, turning_group_velocity, Branch, Detuning,
};
use crate::error::{Error, Result};
use crate::medium::{MediumProfiles, MediumSpec, Profile};
use crate::ray::{
    launch, ray_derivatives, semiclassical_phase, trace, trace_backward, IntegratorConfig, RayEvent, RayState,
    RayTrajectory, Termination,
};
use crate::wave::{
    build_operator, centroid_velocity, evolve, init_packet, realized_bandwidth, Boundary, EffectiveOperator,
    EvolveOptions, Evolution, Grid1D, ObservableConfig, ObservableRow, PacketSpec, Propagator, Snapshot,
    StepperKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Analytic,
    Ray,
    Wave,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportQuantity {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
    Bool(bool),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Float(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Float)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Bool(x)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Text(x.to_string())
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

/// A rectangular data table written as one CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventLog {
    pub run: String,
    pub termination: Termination,
    pub events: Vec<RayEvent<f64>>,
}

/// Quantities that go into the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Derived {
    pub k0: f64,
    pub kappa: f64,
    pub mass_report: f64,
    pub launch_wavenumber: Option<f64>,
    pub launch_velocity: Option<f64>,
    pub reduced_carrier: Option<f64>,
    pub realized_bandwidth: Option<f64>,
    pub wave_dt: Option<f64>,
    pub wave_steps: Option<usize>,
    pub wave_t_end: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub name: String,
    pub quantities: Vec<ReportQuantity>,
    pub checks: Vec<CheckResult>,
    pub tables: Vec<Table>,
    pub events: Vec<EventLog>,
    pub snapshots: Vec<Snapshot<f64>>,
    pub derived: Derived,
}

impl ScenarioReport {
    fn new(name: &str, cfg: &RunConfig, spec: &MediumSpec<f64>) -> Self {
        let v_ref = match cfg.group_velocity.build() {
            Ok(p) => p.eval(cfg.launch.z).unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        };
        Self {
            name: name.into(),
            quantities: Vec::new(),
            checks: Vec::new(),
            tables: Vec::new(),
            events: Vec::new(),
            snapshots: Vec::new(),
            derived: Derived {
                k0: spec.k0(),
                kappa: v_ref * spec.c() / (2.0 * spec.omega0),
                mass_report: spec.constants.hbar * spec.omega0 / (v_ref * spec.c()),
                ..Default::default()
            },
        }
    }

    fn quantity(&mut self, name: &str, value: f64, unit: &str, provenance: Provenance) {
        self.quantities.push(ReportQuantity { name: name.into(), value, unit: unit.into(), provenance });
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckResult { name: name.into(), passed, detail });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.quantities.iter().find(|q| q.name == name).map(|q| q.value)
    }

    pub fn check_named(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if n == 1 { a } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

// ---------------------------------------------------------------------------
// Dispersion curves.

/// Group velocity curves over the configured flow range for each detuning.
pub fn dispersion_curves(cfg: &RunConfig, spec: &MediumSpec<f64>) -> Table {
    let d = &cfg.dispersion;
    let mut t = Table::new(
        "dispersion_curves",
        &["delta", "u", "branch", "k", "v", "discriminant", "regime", "in_window"],
    );
    for &delta in &d.detunings {
        for u in linspace(d.u_min, d.u_max, d.points) {
            for branch in [Branch::Plus, Branch::Minus] {
                let q = crate::dispersion::DispersionQuery { delta: Detuning(delta), u, v_g: d.v_g, branch };
                let r = crate::dispersion::evaluate(&q, spec);
                t.push(vec![
                    delta.into(),
                    u.into(),
                    branch.as_str().into(),
                    r.k.into(),
                    r.v.into(),
                    discriminant(Detuning(delta), u, d.v_g, spec).into(),
                    r.regime.as_str().into(),
                    r.in_local_window.into(),
                ]);
            }
        }
    }
    t
}

pub fn run_figure1(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let mut rep = ScenarioReport::new("figure1", cfg, &spec);
    let d = &cfg.dispersion;
    let v_g = d.v_g;
    let c = spec.c();
    rep.tables.push(dispersion_curves(cfg, &spec));

    let mut diag = Table::new("diagonals", &["u", "v_plus", "v_minus"]);
    for u in linspace(d.u_min, d.u_max, d.points) {
        diag.push(vec![u.into(), galilean_velocity(v_g, u, Branch::Plus).into(), galilean_velocity(v_g, u, Branch::Minus).into()]);
    }
    rep.tables.push(diag);

    // Working points: the minus (plus) co-moving carrier is resonant where
    // delta = -u/c (+u/c).
    let mut wp = Table::new("working_points", &["delta", "comoving_branch", "u", "v", "galilean_v", "on_diagonal"]);
    let mut worst = 0.0f64;
    for &delta in &d.detunings {
        for comoving in [Branch::Minus, Branch::Plus] {
            let u = comoving.sign::<f64>() * c * delta;
            if u < d.u_min || u > d.u_max {
                continue;
            }
            let branch = resonant_branch(v_g, u, comoving);
            let v = group_velocity_1d(Detuning(delta), u, v_g, &spec, branch)?;
            let g = galilean_velocity(v_g, u, comoving);
            // Where the working point sits on a double root the square root
            // amplifies roundoff to ~sqrt(eps).
            let err = (v - g).abs() / g.abs().max(v_g);
            worst = worst.max(err);
            wp.push(vec![delta.into(), comoving.as_str().into(), u.into(), v.into(), g.into(), (err <= 1e-7).into()]);
        }
    }
    rep.tables.push(wp);
    rep.check("working_points_on_diagonal", worst <= 1e-7, format!("largest relative offset {worst:e}"));

    // At zero detuning the discriminant is 1 + u^2/v_g^2 >= 1: no freezing.
    let min_speed = linspace(d.u_min, d.u_max, d.points)
        .into_iter()
        .flat_map(|u| [Branch::Plus, Branch::Minus].map(|b| group_velocity_1d(Detuning(0.0), u, v_g, &spec, b)))
        .filter_map(|v| v.ok())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    rep.quantity("min_speed_at_zero_detuning", min_speed, "m/s", Provenance::Analytic);
    rep.check("zero_detuning_never_freezes", min_speed >= v_g * (1.0 - 1e-12), format!("min |v| = {min_speed} m/s"));

    // delta = -v_g/c: the discriminant vanishes at u = ±v_g.
    let dt = Detuning(-v_g / c);
    let d_plus = discriminant(dt, v_g, v_g, &spec);
    let d_minus = discriminant(dt, -v_g, v_g, &spec);
    rep.check(
        "turning_points_at_plus_minus_vg",
        d_plus.abs() <= 1e-12 && d_minus.abs() <= 1e-12,
        format!("D(+v_g) = {d_plus:e}, D(-v_g) = {d_minus:e}"),
    );
    Ok(rep)
}

/// Compares the slow-light wave number with the root of the full relation on
/// a grid of flows `u` and detunings placed inside the validity window
/// around each flow's resonance: `delta = resonant(u) + s * epsilon v_g / c`.
/// Returns the table and the largest `|dk| / k0` (`None` if no point was
/// inside the window).
pub fn full_relation_comparison(
    spec: &MediumSpec<f64>,
    v_g: f64,
    u_values: &[f64],
    offsets: &[f64],
) -> Result<(Table, Option<f64>)> {
    let mut t = Table::new("full_relation", &["delta", "u", "branch", "k_slowlight", "k_full", "dk_over_k0"]);
    let mut worst: Option<f64> = None;
    let half = spec.epsilon * v_g / spec.c();
    for &u in u_values {
        for branch in [Branch::Plus, Branch::Minus] {
            for &s in offsets {
                let delta = Detuning(resonant_detuning(u, spec, branch).0 + s * half);
                let Ok(k) = solve_wavevector(delta, u, v_g, spec, branch) else { continue };
                let v = group_velocity_1d(delta, u, v_g, spec, branch)?;
                if !local_window_check(delta, u, v, v_g, spec) {
                    continue;
                }
                let full = solve_wavevector_full(delta, u, v_g, spec, branch)?;
                let dk = (full - k).abs() / spec.k0();
                worst = Some(worst.map_or(dk, |w| w.max(dk)));
                t.push(vec![delta.0.into(), u.into(), branch.as_str().into(), k.into(), full.into(), dk.into()]);
            }
        }
    }
    Ok((t, worst))
}

/// Dispersion subcommand: curves plus a comparison with the full relation.
pub fn run_dispersion(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let mut rep = ScenarioReport::new("dispersion", cfg, &spec);
    let d = &cfg.dispersion;
    rep.tables.push(dispersion_curves(cfg, &spec));
    let us: Vec<f64> = linspace(d.u_min, d.u_max, 20).into_iter().filter(|u| u.abs() <= 2.0 * d.v_g).collect();
    let (cmp, worst) = full_relation_comparison(&spec, d.v_g, &us, &linspace(-0.95, 0.95, 20))?;
    match worst {
        Some(w) => {
            rep.quantity("max_full_relation_offset", w, "k0", Provenance::Analytic);
            rep.check("full_relation_agreement", w <= 1e-5, format!("max |dk|/k0 = {w:e} over {} window points", cmp.rows.len()));
        }
        None => rep.check("full_relation_agreement", false, "no sampled point inside the validity window".into()),
    }
    rep.tables.push(cmp);
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Rays.

/// A traced ray with its launch data.
#[derive(Debug, Clone)]
pub struct RayRun {
    pub initial: RayState<f64>,
    pub omega: f64,
    pub launch_velocity: f64,
    pub trajectory: RayTrajectory<f64>,
}

pub fn run_ray(
    profiles: &MediumProfiles<f64>,
    spec: &MediumSpec<f64>,
    z: f64,
    delta: Detuning<f64>,
    branch: Branch,
    icfg: &IntegratorConfig<f64>,
) -> Result<RayRun> {
    let initial = launch(z, delta, branch, profiles, spec)?;
    let omega = delta.frequency(spec);
    let (launch_velocity, _) = ray_derivatives(&initial, profiles, spec)?;
    let trajectory = trace(initial, omega, profiles, spec, icfg)?;
    Ok(RayRun { initial, omega, launch_velocity, trajectory })
}

pub fn trajectory_table(name: &str, traj: &RayTrajectory<f64>, profiles: &MediumProfiles<f64>, spec: &MediumSpec<f64>) -> Table {
    let mut t = Table::new(name, &["t", "z", "k", "v", "u", "v_g", "omega_drift", "action"]);
    for (i, s) in traj.samples.iter().enumerate() {
        let v = ray_derivatives(s, profiles, spec).map(|d| d.0).ok();
        let u = profiles.flow.eval(s.z).ok();
        let vg = profiles.group_velocity.eval(s.z).ok();
        t.push(vec![
            s.t.into(),
            s.z.into(),
            s.k.into(),
            v.into(),
            u.into(),
            vg.into(),
            traj.omega_drift[i].into(),
            traj.action.get(i).copied().into(),
        ]);
    }
    t
}

fn first_turn(traj: &RayTrajectory<f64>) -> Option<(f64, f64)> {
    traj.turning_points().next().map(|e| (e.position(), e.time()))
}

/// Relative closure error of integrating forward and then backward in time.
pub fn time_reversal_closure(run: &RayRun, profiles: &MediumProfiles<f64>, spec: &MediumSpec<f64>, icfg: &IntegratorConfig<f64>) -> Result<f64> {
    let end = run.trajectory.last();
    let span = end.t - run.initial.t;
    if !(span > 0.0) {
        return Ok(0.0);
    }
    // Extend the domain so the backward leg is not cut at the boundary.
    let back_cfg = IntegratorConfig { t_max: span, stop_on_return: false, max_turning_events: None, z_min: f64::MIN, z_max: f64::MAX, ..*icfg };
    let back = trace_backward(end, run.omega, profiles, spec, &back_cfg)?;
    let home = back.last();
    Ok(rel(home.z, run.initial.z).max(rel(home.k, run.initial.k)))
}

/// Position in `[a, b]` where `profile` crosses `target`, searching from
/// `start` toward `toward` and returning the first crossing met.
pub fn profile_crossing(profile: &Profile<f64>, target: f64, start: f64, toward: f64, samples: usize) -> Option<f64> {
    let f = |z: f64| profile.eval(z).map(|v| v - target).unwrap_or(f64::NAN);
    let zs = linspace(start, toward, samples.max(2));
    for w in zs.windows(2) {
        let (fa, fb) = (f(w[0]), f(w[1]));
        if fa == 0.0 {
            return Some(w[0]);
        }
        if fa * fb < 0.0 {
            let mut conv = roots::SimpleConvergency { eps: 1e-16, max_iter: 200 };
            return roots::find_root_brent(w[0], w[1], f, &mut conv).ok();
        }
    }
    None
}

fn drift_check(rep: &mut ScenarioReport, name: &str, traj: &RayTrajectory<f64>) {
    let drift = traj.max_abs_drift();
    rep.quantity(&format!("{name}_frequency_drift"), drift, "1", Provenance::Ray);
    rep.check(&format!("{name}_frequency_conservation"), drift <= 1e-9, format!("max |d omega / omega| = {drift:e}"));
}

pub fn run_ray_mode(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let profiles = cfg.profiles()?;
    let mut rep = ScenarioReport::new("ray", cfg, &spec);
    let icfg = cfg.integrator_config();
    let run = run_ray(&profiles, &spec, cfg.launch.z, Detuning(cfg.launch.delta), cfg.launch.branch, &icfg)?;
    rep.derived.launch_wavenumber = Some(run.initial.k);
    rep.derived.launch_velocity = Some(run.launch_velocity);
    rep.quantity("launch_velocity", run.launch_velocity, "m/s", Provenance::Ray);
    if let Some((z, t)) = first_turn(&run.trajectory) {
        rep.quantity("turning_z", z, "m", Provenance::Ray);
        rep.quantity("turning_t", t, "s", Provenance::Ray);
    }
    drift_check(&mut rep, "ray", &run.trajectory);
    let closure = time_reversal_closure(&run, &profiles, &spec, &icfg)?;
    rep.quantity("time_reversal_closure", closure, "1", Provenance::Ray);
    rep.check("time_reversal", closure <= 1e-6, format!("relative closure {closure:e}"));
    rep.tables.push(trajectory_table("ray_trajectory", &run.trajectory, &profiles, &spec));
    rep.events.push(EventLog { run: "ray".into(), termination: run.trajectory.termination, events: run.trajectory.events.clone() });
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Waves.

#[derive(Debug, Clone)]
pub struct WaveRun {
    pub evolution: Evolution<f64>,
    pub operator: EffectiveOperator<f64>,
    pub grid: Grid1D<f64>,
    pub k_carrier: f64,
    /// Group velocity of the reduced carrier, `2 kappa k`.
    pub carrier_velocity: f64,
    pub incident_sign: f64,
    pub dt: f64,
    pub t_end: f64,
}

impl WaveRun {
    pub fn rows(&self) -> &[ObservableRow<f64>] {
        &self.evolution.series
    }

    /// Largest relative deviation of the norm from its initial value.
    pub fn norm_drift(&self) -> f64 {
        let n0 = self.rows()[0].norm;
        self.rows().iter().fold(0.0, |m, r| m.max(((r.norm - n0) / n0).abs()))
    }

    /// Centroid velocity over the first `distance` of travel from the launch point.
    pub fn initial_velocity(&self, z_launch: f64, distance: f64) -> Option<f64> {
        let pts: Vec<_> = self
            .rows()
            .iter()
            .take_while(|r| (r.centroid - z_launch).abs() <= distance)
            .map(|r| (r.t, r.centroid))
            .collect();
        crate::wave::linear_slope(&pts)
    }

    /// Turning point of the centroid: its extremum along the incident direction.
    pub fn centroid_extremum(&self) -> ObservableRow<f64> {
        let s = self.incident_sign;
        *self
            .rows()
            .iter()
            .max_by(|a, b| (a.centroid * s).partial_cmp(&(b.centroid * s)).unwrap_or(std::cmp::Ordering::Equal))
            .expect("at least one observable row")
    }
}

/// Evolves the configured Gaussian packet on the configured grid.
pub fn run_wave(
    cfg: &RunConfig,
    profiles: &MediumProfiles<f64>,
    spec: &MediumSpec<f64>,
    delta: Detuning<f64>,
    t_end: f64,
    stepper: StepperKind,
) -> Result<WaveRun> {
    let grid = cfg.grid()?;
    let z = cfg.launch.z;
    let m = profiles.at(z)?;
    let k = solve_wavevector(delta, m.u, m.v_g, spec, cfg.launch.branch)?;
    let k_carrier = k + spec.k0() * m.u / m.v_g;
    let operator = build_operator(profiles, spec, &grid, z)?;
    let carrier_velocity = 2.0 * operator.kappa * k_carrier;
    let incident_sign = if carrier_velocity < 0.0 { -1.0 } else { 1.0 };
    let mut state = init_packet(&PacketSpec { z_center: z, sigma: cfg.packet_sigma, k_carrier, norm: 1.0 }, &grid)?;
    let boundary = match cfg.wave.boundary {
        BoundaryKind::Periodic => Boundary::Periodic,
        BoundaryKind::Absorbing => Boundary::Absorbing { width: cfg.wave.mask_width },
    };
    let dt = cfg.grid.dt;
    let mut prop = Propagator::new(stepper, &operator, &grid, dt, boundary)?;
    let opts = EvolveOptions {
        t_end,
        sample_every: cfg.wave.sample_every,
        snapshot_every: cfg.wave.snapshot_every,
        observe: ObservableConfig { z_ref: cfg.wave.z_ref, incident_sign },
    };
    let evolution = evolve(&mut state, &mut prop, &grid, &opts)?;
    Ok(WaveRun { evolution, operator, grid, k_carrier, carrier_velocity, incident_sign, dt, t_end })
}

pub fn series_table(name: &str, rows: &[ObservableRow<f64>]) -> Table {
    let mut t = Table::new(
        name,
        &["t", "norm", "centroid", "rms_width", "reflected_fraction", "transmitted_fraction", "positive_k_fraction", "absorbed"],
    );
    for r in rows {
        t.push(vec![
            r.t.into(),
            r.norm.into(),
            r.centroid.into(),
            r.rms_width.into(),
            r.reflected_fraction.into(),
            r.transmitted_fraction.into(),
            r.positive_k_fraction.into(),
            r.absorbed.into(),
        ]);
    }
    t
}

fn record_wave(rep: &mut ScenarioReport, cfg: &RunConfig, w: &WaveRun, table: &str) {
    rep.derived.kappa = w.operator.kappa;
    rep.derived.mass_report = w.operator.mass_report;
    rep.derived.reduced_carrier = Some(w.k_carrier);
    rep.derived.realized_bandwidth = Some(realized_bandwidth(w.carrier_velocity, cfg.packet_sigma));
    rep.derived.wave_dt = Some(w.dt);
    rep.derived.wave_steps = Some(w.evolution.steps);
    rep.derived.wave_t_end = Some(w.t_end);
    if cfg.wave.boundary == BoundaryKind::Periodic {
        let drift = w.norm_drift();
        rep.quantity(&format!("{table}_norm_drift"), drift, "1", Provenance::Wave);
        rep.check(&format!("{table}_norm_conservation"), drift <= 1e-6, format!("max relative norm drift {drift:e}"));
    }
    rep.tables.push(series_table(table, w.rows()));
    rep.snapshots.extend(w.evolution.snapshots.iter().cloned());
}

pub fn run_wave_mode(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let profiles = cfg.profiles()?;
    let mut rep = ScenarioReport::new("wave", cfg, &spec);
    let t_end = cfg.wave.t_end.unwrap_or(1e-3);
    let w = run_wave(cfg, &profiles, &spec, Detuning(cfg.launch.delta), t_end, cfg.wave.stepper)?;
    if let Some(v) = w.initial_velocity(cfg.launch.z, 2e-4) {
        rep.quantity("initial_centroid_velocity", v, "m/s", Provenance::Wave);
    }
    let last = *w.rows().last().expect("rows");
    rep.quantity("final_centroid", last.centroid, "m", Provenance::Wave);
    rep.quantity("final_reflected_fraction", last.reflected_fraction, "1", Provenance::Wave);
    record_wave(&mut rep, cfg, &w, "wave_observables");
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Figures 2 and 3.

fn launch_block(rep: &mut ScenarioReport, cfg: &RunConfig, profiles: &MediumProfiles<f64>, spec: &MediumSpec<f64>) -> Result<(f64, f64)> {
    let m = profiles.at(cfg.launch.z)?;
    let delta = Detuning(cfg.launch.delta);
    let v = group_velocity_1d(delta, m.u, m.v_g, spec, cfg.launch.branch)?;
    let k = solve_wavevector(delta, m.u, m.v_g, spec, cfg.launch.branch)?;
    rep.derived.launch_velocity = Some(v);
    rep.derived.launch_wavenumber = Some(k);
    rep.quantity("launch_velocity", v, "m/s", Provenance::Analytic);
    Ok((v, k))
}

fn wave_t_end(cfg: &RunConfig, fallback: Option<f64>) -> Result<f64> {
    cfg.wave
        .t_end
        .or(fallback)
        .ok_or_else(|| Error::NoTurningPoint("cannot derive the wave run time from a ray without a turning point".into()))
}

fn baseline_checks(rep: &mut ScenarioReport, cfg: &RunConfig, v_launch: f64, w: &WaveRun) {
    // The reference launch moves at v_g - u0 against the flow.
    let expected = -(REF_VG - REF_U0);
    let e = rel(v_launch, expected);
    if cfg_is_reference_launch(cfg) {
        rep.check("baseline_velocity_analytic", e <= 1e-9, format!("v = {v_launch} m/s, expected {expected} m/s"));
    }
    match w.initial_velocity(cfg.launch.z, 2e-4) {
        Some(v) => {
            rep.quantity("baseline_velocity", v, "m/s", Provenance::Wave);
            let e = rel(v, v_launch);
            rep.check("baseline_velocity_wave", e <= 0.02, format!("centroid {v} m/s vs {v_launch} m/s ({:.3} %)", 100.0 * e));
        }
        None => rep.check("baseline_velocity_wave", false, "too few samples over the first 0.2 mm".into()),
    }
}

const REF_VG: f64 = crate::config::REFERENCE_GROUP_VELOCITY;
const REF_U0: f64 = crate::config::REFERENCE_FLOW;

fn cfg_is_reference_launch(cfg: &RunConfig) -> bool {
    let near = |a: Option<f64>, b: f64| a.is_some_and(|a| rel(a, b) <= 1e-9);
    let at = |p: &ProfileConfig| p.build().ok().and_then(|p| p.eval(cfg.launch.z).ok());
    near(at(&cfg.group_velocity), REF_VG)
        && near(at(&cfg.flow), REF_U0)
        && near(Some(cfg.launch.delta), -REF_U0 / cfg.medium.c)
}

/// Fit window past a feature at `z_feature`: from 4 packet widths to 11
/// packet widths beyond it along the direction of travel.
fn post_feature_window(z_feature: f64, sigma: f64, sign: f64) -> (f64, f64) {
    let a = z_feature + sign * 4.0 * sigma;
    let b = z_feature + sign * 11.0 * sigma;
    (a.min(b), a.max(b))
}

fn feature_center(p: &ProfileConfig) -> Option<f64> {
    match p {
        ProfileConfig::Step { center, .. } | ProfileConfig::Tanh { center, .. } => Some(*center),
        ProfileConfig::Linear { z_start, z_end, .. } => Some(0.5 * (z_start + z_end)),
        _ => None,
    }
}

fn feature_halfwidth(p: &ProfileConfig) -> f64 {
    match p {
        ProfileConfig::Step { smoothing, .. } => *smoothing,
        ProfileConfig::Tanh { width, .. } => 10.0 * width,
        ProfileConfig::Linear { z_start, z_end, .. } => 0.5 * (z_end - z_start),
        _ => 0.0,
    }
}

pub fn run_figure2a(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let profiles = cfg.profiles()?;
    let mut rep = ScenarioReport::new("figure2a", cfg, &spec);
    let (v_launch, _) = launch_block(&mut rep, cfg, &profiles, &spec)?;
    let delta = Detuning(cfg.launch.delta);
    let sign = v_launch.signum();

    // Analytic velocity in the uniform region beyond the step.
    let center = feature_center(&cfg.flow).unwrap_or(cfg.wave.z_ref);
    let z_after = center + sign * (feature_halfwidth(&cfg.flow) + 4.0 * cfg.packet_sigma);
    let m_after = profiles.at(z_after)?;
    let v_after = group_velocity_1d(delta, m_after.u, m_after.v_g, &spec, cfg.launch.branch)?;
    rep.quantity("post_step_velocity", v_after, "m/s", Provenance::Analytic);

    let icfg = cfg.integrator_config();
    let ray = run_ray(&profiles, &spec, cfg.launch.z, delta, cfg.launch.branch, &icfg)?;
    drift_check(&mut rep, "ray", &ray.trajectory);
    let closure = time_reversal_closure(&ray, &profiles, &spec, &icfg)?;
    rep.check("time_reversal", closure <= 1e-6, format!("relative closure {closure:e}"));
    // Ray velocity at the last sample past the step.
    let past: Vec<_> = ray.trajectory.samples.iter().filter(|s| (s.z - z_after) * sign >= 0.0).collect();
    match past.last() {
        Some(s) => {
            let v = ray_derivatives(s, &profiles, &spec)?.0;
            rep.quantity("post_step_velocity_ray", v, "m/s", Provenance::Ray);
            let e = rel(v, v_after);
            rep.check("post_step_velocity_ray", e <= 1e-6, format!("ray {v} m/s vs analytic {v_after} m/s ({e:e})"));
        }
        None => rep.check("post_step_velocity_ray", false, "ray did not pass the step".into()),
    }
    rep.tables.push(trajectory_table("ray_trajectory", &ray.trajectory, &profiles, &spec));
    rep.events.push(EventLog { run: "ray".into(), termination: ray.trajectory.termination, events: ray.trajectory.events.clone() });

    if cfg.wave.enabled {
        let t_end = wave_t_end(cfg, None)?;
        let w = run_wave(cfg, &profiles, &spec, delta, t_end, cfg.wave.stepper)?;
        baseline_checks(&mut rep, cfg, v_launch, &w);
        let (lo, hi) = post_feature_window(center, cfg.packet_sigma, sign);
        match centroid_velocity(w.rows(), lo, hi) {
            Some(v) => {
                rep.quantity("post_step_velocity_wave", v, "m/s", Provenance::Wave);
                let e = rel(v, v_after);
                rep.check("post_step_velocity_wave", e <= 0.05, format!("centroid {v} m/s vs {v_after} m/s ({:.3} %)", 100.0 * e));
            }
            None => rep.check("post_step_velocity_wave", false, format!("centroid never crossed [{lo}, {hi}] m")),
        }
        record_wave(&mut rep, cfg, &w, "wave_observables");
    }
    Ok(rep)
}

pub fn run_figure2b(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let profiles = cfg.profiles()?;
    let mut rep = ScenarioReport::new("figure2b", cfg, &spec);
    let (v_launch, _) = launch_block(&mut rep, cfg, &profiles, &spec)?;
    let delta = Detuning(cfg.launch.delta);
    let sign = v_launch.signum();
    let m = profiles.at(cfg.launch.z)?;

    let u_turn = turning_flow_speed(m.u, m.v_g)?;
    let drop = m.u - u_turn;
    rep.quantity("turning_flow_speed", u_turn, "m/s", Provenance::Analytic);
    rep.quantity("turning_flow_drop", drop, "m/s", Provenance::Analytic);
    if cfg_is_reference_launch(cfg) {
        rep.check("turning_flow_drop", (drop - 3.77e-3).abs() <= 0.05e-3, format!("drop {:.5} mm/s", drop * 1e3));
    }
    let toward = if sign < 0.0 { cfg.grid.z_min } else { cfg.grid.z_max };
    let z_analytic = profile_crossing(&profiles.flow, u_turn, cfg.launch.z, toward, cfg.grid.n);
    if let Some(z) = z_analytic {
        rep.quantity("turning_z", z, "m", Provenance::Analytic);
    }

    let icfg = IntegratorConfig { stop_on_return: true, ..cfg.integrator_config() };
    let ray = run_ray(&profiles, &spec, cfg.launch.z, delta, cfg.launch.branch, &icfg)?;
    drift_check(&mut rep, "ray", &ray.trajectory);
    let closure = time_reversal_closure(&ray, &profiles, &spec, &icfg)?;
    rep.check("time_reversal", closure <= 1e-6, format!("relative closure {closure:e}"));
    let turn = first_turn(&ray.trajectory);
    match (turn, z_analytic) {
        (Some((z_ray, t_ray)), Some(z_a)) => {
            rep.quantity("turning_z_ray", z_ray, "m", Provenance::Ray);
            rep.quantity("turning_t_ray", t_ray, "s", Provenance::Ray);
            let dz = (z_ray - z_a).abs();
            rep.check("turning_point_ray", dz <= 1e-6, format!("|z_ray - z_analytic| = {dz:e} m"));
        }
        _ => rep.check("turning_point_ray", false, "no turning point found".into()),
    }
    let t_return = (ray.trajectory.termination == Termination::LaunchReturn).then(|| ray.trajectory.last().t);
    if let Some(t) = t_return {
        rep.quantity("bounce_time", t, "s", Provenance::Ray);
    }
    if let Ok(phase) = semiclassical_phase(&ray.trajectory) {
        rep.quantity("semiclassical_phase", phase, "rad", Provenance::Ray);
    }
    rep.tables.push(trajectory_table("ray_trajectory", &ray.trajectory, &profiles, &spec));
    rep.events.push(EventLog { run: "ray".into(), termination: ray.trajectory.termination, events: ray.trajectory.events.clone() });

    if cfg.wave.enabled {
        let t_end = wave_t_end(cfg, t_return)?;
        let w = run_wave(cfg, &profiles, &spec, delta, t_end, cfg.wave.stepper)?;
        baseline_checks(&mut rep, cfg, v_launch, &w);
        let last = *w.rows().last().expect("rows");
        rep.quantity("reflected_fraction", last.reflected_fraction, "1", Provenance::Wave);
        rep.quantity("transmitted_fraction", last.transmitted_fraction, "1", Provenance::Wave);
        rep.check(
            "reflected_fraction",
            last.reflected_fraction >= 0.95,
            format!("reflected {:.6}, transmitted {:.3e}", last.reflected_fraction, last.transmitted_fraction),
        );
        turning_consistency(&mut rep, &w, turn.map(|t| t.0));
        record_wave(&mut rep, cfg, &w, "wave_observables");
    }
    Ok(rep)
}

fn turning_consistency(rep: &mut ScenarioReport, w: &WaveRun, z_ray: Option<f64>) {
    let ext = w.centroid_extremum();
    rep.quantity("turning_z_wave", ext.centroid, "m", Provenance::Wave);
    if let Some(z) = z_ray {
        let dz = (ext.centroid - z).abs();
        rep.check(
            "turning_point_wave",
            dz <= 2.0 * ext.rms_width,
            format!("centroid extremum {} m, ray {z} m, packet width {} m", ext.centroid, ext.rms_width),
        );
    }
}

pub fn run_figure3(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let profiles = cfg.profiles()?;
    let mut rep = ScenarioReport::new("figure3", cfg, &spec);
    let (v_launch, _) = launch_block(&mut rep, cfg, &profiles, &spec)?;
    let sign = v_launch.signum();
    let m = profiles.at(cfg.launch.z)?;
    let toward = if sign < 0.0 { cfg.grid.z_min } else { cfg.grid.z_max };
    let v_top = match cfg.group_velocity {
        ProfileConfig::Tanh { left, right, .. } | ProfileConfig::Step { left, right, .. } => left.max(right),
        _ => m.v_g,
    };

    // Bounce sub-run.
    let delta = Detuning(cfg.launch.delta);
    let vg_turn = turning_group_velocity(delta, m.u, &spec)?;
    rep.quantity("turning_group_velocity", vg_turn, "m/s", Provenance::Analytic);
    rep.quantity("turning_group_velocity_drop", v_top - vg_turn, "m/s", Provenance::Analytic);
    if rel(cfg.launch.delta, -1.00001 * REF_U0 / cfg.medium.c) <= 1e-9 && v_top == REF_VG {
        let drop = v_top - vg_turn;
        rep.check("turning_group_velocity_drop", (drop - 0.162).abs() <= 0.005, format!("drop {drop:.5} m/s"));
    }
    let z_analytic = profile_crossing(&profiles.group_velocity, vg_turn, cfg.launch.z, toward, cfg.grid.n);
    if let Some(z) = z_analytic {
        rep.quantity("turning_z", z, "m", Provenance::Analytic);
    }
    let icfg = IntegratorConfig { stop_on_return: true, ..cfg.integrator_config() };
    let ray = run_ray(&profiles, &spec, cfg.launch.z, delta, cfg.launch.branch, &icfg)?;
    drift_check(&mut rep, "bounce", &ray.trajectory);
    let closure = time_reversal_closure(&ray, &profiles, &spec, &icfg)?;
    rep.check("time_reversal", closure <= 1e-6, format!("relative closure {closure:e}"));
    let turn = first_turn(&ray.trajectory);
    match (turn, z_analytic) {
        (Some((z_ray, t_ray)), Some(z_a)) => {
            rep.quantity("turning_z_ray", z_ray, "m", Provenance::Ray);
            rep.quantity("turning_t_ray", t_ray, "s", Provenance::Ray);
            let e = (z_ray - z_a).abs() / z_a.abs();
            rep.check("turning_point_ray", e <= 1e-6, format!("relative offset {e:e}"));
        }
        _ => rep.check("turning_point_ray", false, "no turning point found".into()),
    }
    if let Ok(phase) = semiclassical_phase(&ray.trajectory) {
        rep.quantity("semiclassical_phase", phase, "rad", Provenance::Ray);
    }
    rep.tables.push(trajectory_table("ray_bounce", &ray.trajectory, &profiles, &spec));
    rep.events.push(EventLog { run: "bounce".into(), termination: ray.trajectory.termination, events: ray.trajectory.events.clone() });

    // Freeze sub-run: exactly resonant carrier.
    let delta_f = resonant_detuning(m.u, &spec, cfg.launch.branch);
    let fcfg = cfg.integrator_config();
    let freeze = run_ray(&profiles, &spec, cfg.launch.z, delta_f, cfg.launch.branch, &fcfg)?;
    drift_check(&mut rep, "freeze", &freeze.trajectory);
    let last = freeze.trajectory.last();
    let v_last = ray_derivatives(&last, &profiles, &spec)?.0;
    // At the stationary point both dz/dt and dk/dt vanish, so roundoff can
    // flip the sign of the velocity without the ray going anywhere. A
    // reversal is judged by the distance retreated from the furthest point.
    let furthest = freeze.trajectory.samples.iter().map(|s| s.z * sign).fold(f64::NEG_INFINITY, f64::max);
    let retreat = furthest - last.z * sign;
    let reversed = retreat > 1e-9;
    rep.quantity("freeze_retreat", retreat, "m", Provenance::Ray);
    let vg_ref = m.v_g;
    rep.quantity("freeze_final_speed", v_last.abs(), "m/s", Provenance::Ray);
    rep.quantity("freeze_final_z", last.z, "m", Provenance::Ray);
    rep.check(
        "freeze",
        v_last.abs() < 1e-3 * vg_ref && !reversed,
        format!("final speed {:e} m/s after {} s, retreat {retreat:e} m", v_last.abs(), last.t),
    );
    rep.tables.push(trajectory_table("ray_freeze", &freeze.trajectory, &profiles, &spec));
    rep.events.push(EventLog { run: "freeze".into(), termination: freeze.trajectory.termination, events: freeze.trajectory.events.clone() });

    if cfg.wave.enabled {
        let t_end = wave_t_end(cfg, turn.map(|t| 1.5 * t.1))?;
        let w = run_wave(cfg, &profiles, &spec, delta, t_end, cfg.wave.stepper)?;
        if let Some(v) = w.initial_velocity(cfg.launch.z, 2e-4) {
            rep.quantity("baseline_velocity", v, "m/s", Provenance::Wave);
        }
        turning_consistency(&mut rep, &w, turn.map(|t| t.0));
        record_wave(&mut rep, cfg, &w, "wave_observables");
    }
    Ok(rep)
}

// ---------------------------------------------------------------------------
// Sonar sweep.

struct SweepPoint {
    turning_z_analytic: Option<f64>,
    turning_z_ray: Option<f64>,
    phase: Option<f64>,
}

fn sweep_point(profiles: &MediumProfiles<f64>, spec: &MediumSpec<f64>, cfg: &RunConfig, u_turn: Option<f64>) -> Result<SweepPoint> {
    let m = profiles.at(cfg.launch.z)?;
    let delta = resonant_detuning(m.u, spec, cfg.launch.branch);
    let v = group_velocity_1d(delta, m.u, m.v_g, spec, cfg.launch.branch)?;
    let toward = if v < 0.0 { cfg.grid.z_min } else { cfg.grid.z_max };
    let turning_z_analytic = u_turn.and_then(|u| profile_crossing(&profiles.flow, u, cfg.launch.z, toward, cfg.grid.n));
    let icfg = IntegratorConfig { stop_on_return: true, ..cfg.integrator_config() };
    let ray = run_ray(profiles, spec, cfg.launch.z, delta, cfg.launch.branch, &icfg)?;
    let turning_z_ray = first_turn(&ray.trajectory).map(|t| t.0);
    let phase = if ray.trajectory.termination == Termination::LaunchReturn {
        semiclassical_phase(&ray.trajectory).ok()
    } else {
        None
    };
    Ok(SweepPoint { turning_z_analytic, turning_z_ray, phase })
}

pub fn run_sonar(cfg: &RunConfig) -> Result<ScenarioReport> {
    let spec = cfg.spec()?;
    let mut rep = ScenarioReport::new("sonar", cfg, &spec);
    let s = &cfg.sweep;
    let base = cfg.profiles()?;
    let u0 = base.flow.eval(cfg.launch.z)?;
    let v_g = base.group_velocity.eval(cfg.launch.z)?;
    let u_turn = turning_flow_speed(u0, v_g).ok();

    let mut drops = Table::new(
        "sweep_flow_drop",
        &["drop", "reflects", "turning_flow_speed", "turning_z_analytic", "turning_z_ray", "phase"],
    );
    let mut rows = Vec::new();
    for drop in linspace(s.drop_min, s.drop_max, s.drop_steps) {
        let flow = if drop == 0.0 {
            Profile::uniform(u0)
        } else {
            Profile::tanh_ramp(u0 - drop, u0, s.ramp_center, s.ramp_width)?
        };
        let profiles = MediumProfiles::new(flow, base.group_velocity.clone(), spec.c())?;
        let p = sweep_point(&profiles, &spec, cfg, u_turn)?;
        let reflects = p.phase.is_some();
        drops.push(vec![
            drop.into(),
            reflects.into(),
            u_turn.into(),
            p.turning_z_analytic.into(),
            p.turning_z_ray.into(),
            p.phase.into(),
        ]);
        rows.push((drop, p));
    }
    rep.tables.push(drops);

    if let Some((_, p)) = rows.iter().find(|(d, _)| *d == 0.0) {
        rep.check("zero_drop_no_reflection", p.phase.is_none() && p.turning_z_ray.is_none(), "zero flow drop".into());
    }
    // Deeper drops are met earlier along the path: the turning point moves
    // toward the launch position.
    let reflecting: Vec<_> = rows.iter().filter_map(|(d, p)| p.turning_z_ray.zip(p.phase).map(|(z, ph)| (*d, z, ph))).collect();
    let dist = |z: f64| (z - cfg.launch.z).abs();
    let monotone = reflecting.windows(2).all(|w| dist(w[1].1) < dist(w[0].1));
    rep.check(
        "turning_point_monotone",
        reflecting.len() >= 2 && monotone,
        format!("{} reflecting drops", reflecting.len()),
    );
    let distinct = reflecting.windows(2).all(|w| (w[1].2 - w[0].2).abs() > 1e-9 * w[0].2.abs());
    rep.check("adjacent_phases_distinct", reflecting.len() >= 2 && distinct, "phase differs between adjacent drops".into());
    for (name, (_, z, ph)) in [("first", reflecting.first()), ("last", reflecting.last())].into_iter().filter_map(|(n, r)| r.map(|r| (n, r))) {
        rep.quantity(&format!("{name}_reflecting_turning_z"), *z, "m", Provenance::Ray);
        rep.quantity(&format!("{name}_reflecting_phase"), *ph, "rad", Provenance::Ray);
    }

    // Alternate axis: the group velocity, at a fixed flow drop.
    let mut vgs = Table::new(
        "sweep_group_velocity",
        &["v_g", "reflects", "turning_flow_speed", "turning_z_analytic", "turning_z_ray", "phase"],
    );
    for vg in linspace(s.v_g_min, s.v_g_max, s.v_g_steps) {
        let flow = Profile::tanh_ramp(u0 - s.v_g_axis_drop, u0, s.ramp_center, s.ramp_width)?;
        let profiles = MediumProfiles::new(flow, Profile::uniform(vg), spec.c())?;
        let ut = turning_flow_speed(u0, vg).ok();
        let p = sweep_point(&profiles, &spec, cfg, ut)?;
        vgs.push(vec![
            vg.into(),
            p.phase.is_some().into(),
            ut.into(),
            p.turning_z_analytic.into(),
            p.turning_z_ray.into(),
            p.phase.into(),
        ]);
    }
    rep.tables.push(vgs);
    Ok(rep)
}

/// Runs the named scenario.
pub fn run_scenario(name: ScenarioName, cfg: &RunConfig) -> Result<ScenarioReport> {
    match name {
        ScenarioName::Figure1 => run_figure1(cfg),
        ScenarioName::Figure2a => run_figure2a(cfg),
        ScenarioName::Figure2b => run_figure2b(cfg),
        ScenarioName::Figure3 => run_figure3(cfg),
        ScenarioName::Sonar => run_sonar(cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn cfg(name: &str, extra: &str) -> RunConfig {
        parse_config(&format!("[scenario]\nname = \"{name}\"\n{extra}")).unwrap()
    }

    #[test]
    fn figure1_checks_pass() {
        let rep = run_figure1(&cfg("figure1", "[dispersion]\npoints = 41\n")).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        let curves = rep.table("dispersion_curves").unwrap();
        assert_eq!(curves.rows.len(), 3 * 41 * 2);
        let wp = rep.table("working_points").unwrap();
        assert_eq!(wp.rows.len(), 6);
    }

    #[test]
    fn figure2a_ray_layer() {
        let rep = run_figure2a(&cfg("figure2a", "[wave]\nenabled = false\n")).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        assert!((rep.get("post_step_velocity").unwrap() + 3.01921).abs() < 1e-5);
        assert!((rep.get("launch_velocity").unwrap() + 1.5).abs() < 1e-9);
    }

    #[test]
    fn figure2b_ray_layer() {
        let rep = run_figure2b(&cfg("figure2b", "[wave]\nenabled = false\n")).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        assert!((rep.get("turning_flow_speed").unwrap() - 298.49623).abs() < 1e-5);
        let dz = rep.get("turning_z_ray").unwrap() - rep.get("turning_z").unwrap();
        assert!(dz.abs() < 1e-6);
    }

    #[test]
    fn figure3_ray_layer() {
        let rep = run_figure3(&cfg("figure3", "[wave]\nenabled = false\n")).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        assert!((rep.get("turning_group_velocity").unwrap() - 299.83792).abs() < 1e-4);
        assert!(rep.get("freeze_final_speed").unwrap() < 0.3);
    }

    #[test]
    fn sonar_sweep() {
        let rep = run_sonar(&cfg("sonar", "[sweep]\ndrop_steps = 5\nv_g_steps = 3\n")).unwrap();
        assert!(rep.all_passed(), "{:?}", rep.checks);
        let t = rep.table("sweep_flow_drop").unwrap();
        assert_eq!(t.rows[0][1], Cell::Bool(false));
        assert_eq!(t.rows[4][1], Cell::Bool(true));
    }

    #[test]
    fn short_wave_run_is_consistent_with_the_ray() {
        let c = cfg("figure2b", "[wave]\nt_end = \"150 us\"\n[grid]\nn = 2048\n");
        let spec = c.spec().unwrap();
        let profiles = c.profiles().unwrap();
        let w = run_wave(&c, &profiles, &spec, Detuning(c.launch.delta), 1.5e-4, StepperKind::SplitStep).unwrap();
        assert!((w.k_carrier + 5e4).abs() < 1e-6);
        assert!((w.carrier_velocity + 1.5).abs() < 1e-9);
        let v = w.initial_velocity(c.launch.z, 2e-4).unwrap();
        assert!(((v + 1.5) / 1.5).abs() < 0.02, "{v}");
        assert!(w.norm_drift() < 1e-10);
    }
}
