//! Run configuration: a sectioned TOML file with unit-carrying quantities,
//! resolved against per-scenario defaults into a fully explicit [`RunConfig`].
//!
//! Physical quantities are written as strings with a unit, e.g. `"300 m/s"`,
//! `"3e15 rad/s"`, `"100 um"`. Dimensionless numbers are bare. Unknown keys are
//! rejected. [`RunConfig::to_toml`] writes every resolved value back in SI
//! units with shortest round-trip floats, so the output reparses to an equal
//! configuration.

use std::fmt;
use std::marker::PhantomData;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::dispersion::{resonant_detuning, Branch};
use crate::medium::{MediumProfiles, MediumSpec, PhysicalConstants, Profile, DEFAULT_C, DEFAULT_EPSILON, DEFAULT_HBAR};
use crate::wave::{Grid1D, StepperKind};

pub const REFERENCE_OMEGA0: f64 = 3.0e15;
pub const REFERENCE_GROUP_VELOCITY: f64 = 300.0;
/// Flow speed of the reference pulse: 99.5 % of the group velocity.
pub const REFERENCE_FLOW: f64 = 0.995 * REFERENCE_GROUP_VELOCITY;
/// Flow increase (figure 2a) and default total ramp drop (figure 2b), m/s.
pub const REFERENCE_FLOW_CHANGE: f64 = 0.0115;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("config parse error: {0}")]
    Syntax(String),
    #[error("invalid value for `{key}`: {reason}")]
    Constraint { key: String, reason: String },
}

impl ConfigError {
    fn constraint(key: &str, reason: impl fmt::Display) -> Self {
        ConfigError::Constraint { key: key.to_string(), reason: reason.to_string() }
    }
}

/// Formats a float in its shortest round-trip form, switching to exponent
/// notation for very large or small magnitudes.
pub fn format_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (1e-4..1e16).contains(&a) || !x.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub trait Dimension {
    const NAME: &'static str;
    const SI: &'static str;
    /// Factor converting `unit` to SI, if `unit` has this dimension.
    fn factor(unit: &str) -> Option<f64>;
}

macro_rules! dimension {
    ($ty:ident, $name:expr, $si:expr, { $($unit:expr => $f:expr),* $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $ty;
        impl Dimension for $ty {
            const NAME: &'static str = $name;
            const SI: &'static str = $si;
            fn factor(unit: &str) -> Option<f64> {
                match unit {
                    $($unit => Some($f),)*
                    _ => None,
                }
            }
        }
    };
}

dimension!(Length, "length", "m", { "m" => 1.0, "cm" => 1e-2, "mm" => 1e-3, "um" => 1e-6, "nm" => 1e-9 });
dimension!(Speed, "speed", "m/s", { "m/s" => 1.0, "cm/s" => 1e-2, "mm/s" => 1e-3, "um/s" => 1e-6 });
dimension!(Time, "time", "s", { "s" => 1.0, "ms" => 1e-3, "us" => 1e-6, "ns" => 1e-9 });
dimension!(AngularFrequency, "angular frequency", "rad/s", { "rad/s" => 1.0 });
dimension!(Action, "action", "J*s", { "J*s" => 1.0, "J s" => 1.0 });

/// A value with a unit of dimension `D`, stored in SI.
#[derive(Clone, Copy, PartialEq)]
pub struct Quantity<D> {
    pub si: f64,
    _dim: PhantomData<D>,
}

impl<D> Quantity<D> {
    pub fn new(si: f64) -> Self {
        Self { si, _dim: PhantomData }
    }
}

impl<D: Dimension> fmt::Debug for Quantity<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", format_f64(self.si), D::SI)
    }
}

impl<D: Dimension> FromStr for Quantity<D> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let split = s
            .find(|c: char| c.is_whitespace())
            .ok_or_else(|| format!("`{s}` has no unit; expected a {} in {}", D::NAME, D::SI))?;
        let (num, unit) = s.split_at(split);
        let unit = unit.trim();
        let value: f64 = num.parse().map_err(|_| format!("`{num}` is not a number"))?;
        if !value.is_finite() {
            return Err(format!("`{num}` is not finite"));
        }
        let f = D::factor(unit).ok_or_else(|| format!("unit `{unit}` is not a {} (expected {})", D::NAME, D::SI))?;
        // Sub-unit prefixes divide by the exact power of ten, so "80 um"
        // becomes the nearest double to 8e-5.
        let si = if f >= 1.0 { value * f } else { value / (1.0 / f).round() };
        Ok(Self::new(si))
    }
}

impl<'de, D: Dimension> Deserialize<'de> for Quantity<D> {
    fn deserialize<De: Deserializer<'de>>(d: De) -> Result<Self, De::Error> {
        struct V<D>(PhantomData<D>);
        impl<D: Dimension> de::Visitor<'_> for V<D> {
            type Value = Quantity<D>;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a {} such as \"1 {}\"", D::NAME, D::SI)
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<Self::Value, E> {
                s.parse().map_err(E::custom)
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                Err(E::custom(format!("{v} has no unit; write it as \"{v} {}\"", D::SI)))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                Err(E::custom(format!("{v} has no unit; write it as \"{v} {}\"", D::SI)))
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

impl<D: Dimension> Serialize for Quantity<D> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{} {}", format_f64(self.si), D::SI))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Figure1,
    Figure2a,
    Figure2b,
    Figure3,
    Sonar,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] =
        [ScenarioName::Figure1, ScenarioName::Figure2a, ScenarioName::Figure2b, ScenarioName::Figure3, ScenarioName::Sonar];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::Figure1 => "figure1",
            ScenarioName::Figure2a => "figure2a",
            ScenarioName::Figure2b => "figure2b",
            ScenarioName::Figure3 => "figure3",
            ScenarioName::Sonar => "sonar",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| format!("unknown scenario `{s}` (expected figure1, figure2a, figure2b, figure3 or sonar)"))
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Periodic,
    Absorbing,
}

// ---------------------------------------------------------------------------
// File form: everything optional, units attached.

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<MediumFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<ProfileFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_velocity: Option<ProfileFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub launch: Option<LaunchFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet: Option<PacketFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub integrator: Option<IntegratorFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wave: Option<WaveFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dispersion: Option<DispersionFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepFile>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<ScenarioName>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega0: Option<Quantity<AngularFrequency>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbar: Option<Quantity<Action>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProfileFile {
    Uniform { value: Quantity<Speed> },
    Step { left: Quantity<Speed>, right: Quantity<Speed>, center: Quantity<Length>, smoothing: Quantity<Length> },
    Tanh { left: Quantity<Speed>, right: Quantity<Speed>, center: Quantity<Length>, width: Quantity<Length> },
    Linear { left: Quantity<Speed>, right: Quantity<Speed>, z_start: Quantity<Length>, z_end: Quantity<Length> },
    Table { z: Vec<Quantity<Length>>, values: Vec<Quantity<Speed>> },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch: Option<Branch>,
    /// Detuning `(omega - omega0) / omega0`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Multiplies the resonant detuning `-+u/c` at the launch point when
    /// `delta` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detuning_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_min: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_max: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<Quantity<Time>>,
    /// `kappa k_nyquist^2 dt` used when `dt` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub courant: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PacketFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Quantity<Length>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_dt: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abs_tol: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_refine_tol: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stepper: Option<StepperKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary: Option<BoundaryKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_width: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_every: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<Quantity<Time>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_ref: Option<Quantity<Length>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DispersionFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_min: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    /// Detunings `(omega - omega0) / omega0` of the curve family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detunings: Option<Vec<f64>>,
    /// Group velocity of the curves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g: Option<Quantity<Speed>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_min: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_max: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g_min: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g_max: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g_steps: Option<usize>,
    /// Flow drop held fixed along the group-velocity axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_g_axis_drop: Option<Quantity<Speed>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_center: Option<Quantity<Length>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ramp_width: Option<Quantity<Length>>,
}

// ---------------------------------------------------------------------------
// Resolved form.

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MediumConfig {
    pub omega0: f64,
    pub epsilon: f64,
    pub c: f64,
    pub hbar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProfileConfig {
    Uniform { value: f64 },
    Step { left: f64, right: f64, center: f64, smoothing: f64 },
    Tanh { left: f64, right: f64, center: f64, width: f64 },
    Linear { left: f64, right: f64, z_start: f64, z_end: f64 },
    Table { z: Vec<f64>, values: Vec<f64> },
}

impl ProfileConfig {
    pub fn build(&self) -> crate::Result<Profile<f64>> {
        match self.clone() {
            ProfileConfig::Uniform { value } => Ok(Profile::uniform(value)),
            ProfileConfig::Step { left, right, center, smoothing } => Profile::step(left, right, center, smoothing),
            ProfileConfig::Tanh { left, right, center, width } => Profile::tanh_ramp(left, right, center, width),
            ProfileConfig::Linear { left, right, z_start, z_end } => Profile::linear_ramp(left, right, z_start, z_end),
            ProfileConfig::Table { z, values } => Profile::table(z, values),
        }
    }

    fn from_file(f: &ProfileFile) -> Self {
        match f {
            ProfileFile::Uniform { value } => ProfileConfig::Uniform { value: value.si },
            ProfileFile::Step { left, right, center, smoothing } => ProfileConfig::Step {
                left: left.si,
                right: right.si,
                center: center.si,
                smoothing: smoothing.si,
            },
            ProfileFile::Tanh { left, right, center, width } => {
                ProfileConfig::Tanh { left: left.si, right: right.si, center: center.si, width: width.si }
            }
            ProfileFile::Linear { left, right, z_start, z_end } => {
                ProfileConfig::Linear { left: left.si, right: right.si, z_start: z_start.si, z_end: z_end.si }
            }
            ProfileFile::Table { z, values } => ProfileConfig::Table {
                z: z.iter().map(|q| q.si).collect(),
                values: values.iter().map(|q| q.si).collect(),
            },
        }
    }

    fn to_file(&self) -> ProfileFile {
        let s = Quantity::<Speed>::new;
        let l = Quantity::<Length>::new;
        match self {
            ProfileConfig::Uniform { value } => ProfileFile::Uniform { value: s(*value) },
            ProfileConfig::Step { left, right, center, smoothing } => ProfileFile::Step {
                left: s(*left),
                right: s(*right),
                center: l(*center),
                smoothing: l(*smoothing),
            },
            ProfileConfig::Tanh { left, right, center, width } => {
                ProfileFile::Tanh { left: s(*left), right: s(*right), center: l(*center), width: l(*width) }
            }
            ProfileConfig::Linear { left, right, z_start, z_end } => {
                ProfileFile::Linear { left: s(*left), right: s(*right), z_start: l(*z_start), z_end: l(*z_end) }
            }
            ProfileConfig::Table { z, values } => ProfileFile::Table {
                z: z.iter().map(|&x| l(x)).collect(),
                values: values.iter().map(|&x| s(x)).collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaunchConfig {
    pub z: f64,
    pub branch: Branch,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub z_min: f64,
    pub z_max: f64,
    pub n: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegratorSettings {
    pub dt: f64,
    pub max_dt: f64,
    pub t_max: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub event_refine_tol: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaveConfig {
    pub enabled: bool,
    pub stepper: StepperKind,
    pub boundary: BoundaryKind,
    pub mask_width: f64,
    /// Resolved at run time from the ray trajectory when absent.
    pub t_end: Option<f64>,
    pub sample_every: f64,
    pub snapshot_every: Option<f64>,
    pub z_ref: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispersionConfig {
    pub u_min: f64,
    pub u_max: f64,
    pub points: usize,
    pub detunings: Vec<f64>,
    pub v_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub drop_min: f64,
    pub drop_max: f64,
    pub drop_steps: usize,
    pub v_g_min: f64,
    pub v_g_max: f64,
    pub v_g_steps: usize,
    pub v_g_axis_drop: f64,
    pub ramp_center: f64,
    pub ramp_width: f64,
}

/// Fully resolved configuration. All values SI.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub scenario: Option<ScenarioName>,
    pub medium: MediumConfig,
    pub flow: ProfileConfig,
    pub group_velocity: ProfileConfig,
    pub launch: LaunchConfig,
    pub grid: GridConfig,
    pub packet_sigma: f64,
    pub integrator: IntegratorSettings,
    pub wave: WaveConfig,
    pub dispersion: DispersionConfig,
    pub sweep: SweepConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
    (line, column)
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            match e.span() {
                Some(span) => {
                    let (line, column) = line_col(text, span.start);
                    ConfigError::Parse { line, column, message }
                }
                None => ConfigError::Syntax(message),
            }
        })
    }

    pub fn scenario_name(&self) -> Option<ScenarioName> {
        self.scenario.as_ref().and_then(|s| s.name)
    }

    /// Applies defaults for `scenario` (or the file's own scenario) and validates.
    pub fn resolve(&self, scenario: Option<ScenarioName>) -> Result<RunConfig, ConfigError> {
        let name = scenario.or(self.scenario_name());
        let d = defaults(name);

        let m = self.medium.clone().unwrap_or_default();
        let medium = MediumConfig {
            omega0: m.omega0.map_or(d.medium.omega0, |q| q.si),
            epsilon: m.epsilon.unwrap_or(d.medium.epsilon),
            c: m.c.map_or(d.medium.c, |q| q.si),
            hbar: m.hbar.map_or(d.medium.hbar, |q| q.si),
        };
        let flow = self.flow.as_ref().map_or(d.flow.clone(), ProfileConfig::from_file);
        let group_velocity = self.group_velocity.as_ref().map_or(d.group_velocity.clone(), ProfileConfig::from_file);

        let spec = medium_spec(&medium)?;
        let profiles = build_profiles(&flow, &group_velocity, medium.c)?;

        let l = self.launch.clone().unwrap_or_default();
        let z = l.z.map_or(d.launch.z, |q| q.si);
        let branch = l.branch.unwrap_or(d.launch.branch);
        let delta = match (l.delta, l.detuning_scale) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::constraint("launch.detuning_scale", "cannot be combined with launch.delta"))
            }
            (Some(delta), None) => delta,
            (None, scale) => {
                let u = profiles.flow.eval(z).map_err(|e| ConfigError::constraint("launch.z", e))?;
                let scale = scale.unwrap_or_else(|| default_detuning_scale(name));
                resonant_detuning(u, &spec, branch).0 * scale
            }
        };
        if !delta.is_finite() {
            return Err(ConfigError::constraint("launch.delta", "must be finite"));
        }

        let g = self.grid.clone().unwrap_or_default();
        let z_min = g.z_min.map_or(d.grid.z_min, |q| q.si);
        let z_max = g.z_max.map_or(d.grid.z_max, |q| q.si);
        let n = g.n.unwrap_or(d.grid.n);
        let grid = Grid1D::new(z_min, z_max, n).map_err(|e| ConfigError::constraint("grid", e))?;
        if g.dt.is_some() && g.courant.is_some() {
            return Err(ConfigError::constraint("grid.courant", "cannot be combined with grid.dt"));
        }
        let dt = match g.dt {
            Some(q) => q.si,
            None => {
                let courant = g.courant.unwrap_or(DEFAULT_COURANT);
                if !(courant > 0.0) {
                    return Err(ConfigError::constraint("grid.courant", "must be positive"));
                }
                let v_ref = profiles.group_velocity.eval(z).map_err(|e| ConfigError::constraint("launch.z", e))?;
                let kappa = v_ref * spec.c() / (2.0 * spec.omega0);
                grid.stable_dt(kappa, courant)
            }
        };
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConfigError::constraint("grid.dt", "must be positive"));
        }

        let packet_sigma = self.packet.as_ref().and_then(|p| p.sigma).map_or(d.packet_sigma, |q| q.si);

        let i = self.integrator.clone().unwrap_or_default();
        let integrator = IntegratorSettings {
            dt: i.dt.map_or(d.integrator.dt, |q| q.si),
            max_dt: i.max_dt.map_or(d.integrator.max_dt, |q| q.si),
            t_max: i.t_max.map_or(d.integrator.t_max, |q| q.si),
            rel_tol: i.rel_tol.unwrap_or(d.integrator.rel_tol),
            abs_tol: i.abs_tol.map_or(d.integrator.abs_tol, |q| q.si),
            event_refine_tol: i.event_refine_tol.map_or(d.integrator.event_refine_tol, |q| q.si),
            max_steps: i.max_steps.unwrap_or(d.integrator.max_steps),
        };

        let w = self.wave.clone().unwrap_or_default();
        let wave = WaveConfig {
            enabled: w.enabled.unwrap_or(d.wave.enabled),
            stepper: w.stepper.unwrap_or(d.wave.stepper),
            boundary: w.boundary.unwrap_or(d.wave.boundary),
            mask_width: w.mask_width.map_or(d.wave.mask_width, |q| q.si),
            t_end: w.t_end.map(|q| q.si).or(d.wave.t_end),
            sample_every: w.sample_every.map_or(d.wave.sample_every, |q| q.si),
            snapshot_every: w.snapshot_every.map(|q| q.si).or(d.wave.snapshot_every),
            z_ref: w.z_ref.map_or(d.wave.z_ref, |q| q.si),
        };

        let p = self.dispersion.clone().unwrap_or_default();
        let dispersion = DispersionConfig {
            u_min: p.u_min.map_or(d.dispersion.u_min, |q| q.si),
            u_max: p.u_max.map_or(d.dispersion.u_max, |q| q.si),
            points: p.points.unwrap_or(d.dispersion.points),
            detunings: p.detunings.unwrap_or(d.dispersion.detunings.clone()),
            v_g: p.v_g.map_or(d.dispersion.v_g, |q| q.si),
        };

        let s = self.sweep.clone().unwrap_or_default();
        let sweep = SweepConfig {
            drop_min: s.drop_min.map_or(d.sweep.drop_min, |q| q.si),
            drop_max: s.drop_max.map_or(d.sweep.drop_max, |q| q.si),
            drop_steps: s.drop_steps.unwrap_or(d.sweep.drop_steps),
            v_g_min: s.v_g_min.map_or(d.sweep.v_g_min, |q| q.si),
            v_g_max: s.v_g_max.map_or(d.sweep.v_g_max, |q| q.si),
            v_g_steps: s.v_g_steps.unwrap_or(d.sweep.v_g_steps),
            v_g_axis_drop: s.v_g_axis_drop.map_or(d.sweep.v_g_axis_drop, |q| q.si),
            ramp_center: s.ramp_center.map_or(d.sweep.ramp_center, |q| q.si),
            ramp_width: s.ramp_width.map_or(d.sweep.ramp_width, |q| q.si),
        };

        let cfg = RunConfig {
            scenario: name,
            medium,
            flow,
            group_velocity,
            launch: LaunchConfig { z, branch, delta },
            grid: GridConfig { z_min, z_max, n, dt },
            packet_sigma,
            integrator,
            wave,
            dispersion,
            sweep,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const DEFAULT_COURANT: f64 = 0.5;

fn default_detuning_scale(name: Option<ScenarioName>) -> f64 {
    match name {
        // Just beyond the freeze condition: the pulse bounces.
        Some(ScenarioName::Figure3) => 1.00001,
        _ => 1.0,
    }
}

fn medium_spec(m: &MediumConfig) -> Result<MediumSpec<f64>, ConfigError> {
    let constants = PhysicalConstants::new(m.c, m.hbar).map_err(|e| ConfigError::constraint("medium", e))?;
    MediumSpec::new(m.omega0, m.epsilon, constants).map_err(|e| ConfigError::constraint("medium", e))
}

fn build_profiles(flow: &ProfileConfig, vg: &ProfileConfig, c: f64) -> Result<MediumProfiles<f64>, ConfigError> {
    let f = flow.build().map_err(|e| ConfigError::constraint("flow", e))?;
    let g = vg.build().map_err(|e| ConfigError::constraint("group_velocity", e))?;
    f.validate_flow(c).map_err(|e| ConfigError::constraint("flow", e))?;
    g.validate_group_velocity(c).map_err(|e| ConfigError::constraint("group_velocity", e))?;
    Ok(MediumProfiles { flow: f, group_velocity: g })
}

/// Parses and resolves a configuration using the scenario named in the file.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    ConfigFile::parse(text)?.resolve(None)
}

/// Fully resolved reference configuration of a scenario.
pub fn reference(name: ScenarioName) -> RunConfig {
    ConfigFile::default().resolve(Some(name)).expect("built-in defaults are valid")
}

/// Defaults for a scenario, before any file values are applied. Derived
/// values such as the wave time step are left unresolved.
pub fn defaults(name: Option<ScenarioName>) -> RunConfig {
    let u0 = REFERENCE_FLOW;
    let vg = REFERENCE_GROUP_VELOCITY;
    let c = DEFAULT_C;
    let mut cfg = RunConfig {
        scenario: name,
        medium: MediumConfig { omega0: REFERENCE_OMEGA0, epsilon: DEFAULT_EPSILON, c, hbar: DEFAULT_HBAR },
        flow: ProfileConfig::Uniform { value: u0 },
        group_velocity: ProfileConfig::Uniform { value: vg },
        launch: LaunchConfig { z: 3.2e-3, branch: Branch::Minus, delta: -u0 / c },
        grid: GridConfig { z_min: 0.0, z_max: 4e-3, n: 4096, dt: 0.0 },
        packet_sigma: 1e-4,
        integrator: IntegratorSettings {
            dt: 1e-6,
            max_dt: 1e-5,
            t_max: 5e-3,
            rel_tol: 1e-11,
            abs_tol: 1e-13,
            event_refine_tol: 1e-10,
            max_steps: 1_000_000,
        },
        wave: WaveConfig {
            enabled: true,
            stepper: StepperKind::SplitStep,
            boundary: BoundaryKind::Periodic,
            mask_width: 2e-4,
            t_end: Some(1e-3),
            sample_every: 1e-6,
            snapshot_every: None,
            z_ref: 2e-3,
        },
        dispersion: DispersionConfig {
            u_min: -2.0 * vg,
            u_max: 2.0 * vg,
            points: 401,
            detunings: vec![0.0, -vg / (2.0 * c), -vg / c],
            v_g: vg,
        },
        sweep: SweepConfig {
            drop_min: 0.0,
            drop_max: 0.02,
            drop_steps: 11,
            v_g_min: 299.5,
            v_g_max: 300.5,
            v_g_steps: 11,
            v_g_axis_drop: REFERENCE_FLOW_CHANGE,
            ramp_center: 2e-3,
            ramp_width: 1e-4,
        },
    };
    match name {
        None => {}
        Some(ScenarioName::Figure1) => cfg.wave.enabled = false,
        Some(ScenarioName::Figure2a) => {
            cfg.flow = ProfileConfig::Step { left: u0 + REFERENCE_FLOW_CHANGE, right: u0, center: 2e-3, smoothing: 1e-4 };
            cfg.wave.t_end = Some(1.25e-3);
        }
        Some(ScenarioName::Figure2b) => {
            cfg.flow = ProfileConfig::Tanh { left: u0 - REFERENCE_FLOW_CHANGE, right: u0, center: 2e-3, width: 1e-4 };
            cfg.wave.t_end = None;
        }
        Some(ScenarioName::Figure3) => {
            cfg.group_velocity = ProfileConfig::Tanh { left: vg - 2.0, right: vg, center: 2e-3, width: 2e-4 };
            cfg.launch.z = 2.9e-3;
            cfg.launch.delta *= 1.00001;
            cfg.integrator.t_max = 1e-2;
            cfg.wave.t_end = None;
        }
        Some(ScenarioName::Sonar) => {
            cfg.flow = ProfileConfig::Tanh { left: u0 - REFERENCE_FLOW_CHANGE, right: u0, center: 2e-3, width: 1e-4 };
            cfg.wave.enabled = false;
        }
    }
    cfg
}

impl RunConfig {
    pub fn spec(&self) -> crate::Result<MediumSpec<f64>> {
        let c = PhysicalConstants::new(self.medium.c, self.medium.hbar)?;
        MediumSpec::new(self.medium.omega0, self.medium.epsilon, c)
    }

    pub fn profiles(&self) -> crate::Result<MediumProfiles<f64>> {
        MediumProfiles::new(self.flow.build()?, self.group_velocity.build()?, self.medium.c)
    }

    pub fn grid(&self) -> crate::Result<Grid1D<f64>> {
        Grid1D::new(self.grid.z_min, self.grid.z_max, self.grid.n)
    }

    pub fn integrator_config(&self) -> crate::ray::IntegratorConfig<f64> {
        let i = &self.integrator;
        crate::ray::IntegratorConfig {
            dt: i.dt,
            rel_tol: i.rel_tol,
            abs_tol: i.abs_tol,
            max_steps: i.max_steps,
            event_refine_tol: i.event_refine_tol,
            max_dt: i.max_dt,
            t_max: i.t_max,
            z_min: self.grid.z_min,
            z_max: self.grid.z_max,
            max_turning_events: None,
            stop_on_return: false,
            fixed_step: false,
        }
    }

    /// Refines the wave grid by `factor` (n times factor, dt divided by factor).
    pub fn with_resolution_scale(mut self, factor: f64) -> Result<Self, ConfigError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(ConfigError::constraint("resolution-scale", "must be positive"));
        }
        let n = self.grid.n as f64 * factor;
        if n.fract() != 0.0 || !(n as usize).is_power_of_two() || n < 8.0 {
            return Err(ConfigError::constraint(
                "resolution-scale",
                format!("grid size {} times {factor} is not a power of two >= 8", self.grid.n),
            ));
        }
        self.grid.n = n as usize;
        self.grid.dt /= factor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = medium_spec(&self.medium)?;
        let profiles = build_profiles(&self.flow, &self.group_velocity, self.medium.c)?;
        let grid = self.grid().map_err(|e| ConfigError::constraint("grid", e))?;
        if !(self.grid.dt > 0.0) {
            return Err(ConfigError::constraint("grid.dt", "must be positive"));
        }
        let z = self.launch.z;
        if !(z >= self.grid.z_min && z <= self.grid.z_max) {
            return Err(ConfigError::constraint("launch.z", "must lie inside the grid"));
        }
        let (lo, hi) = profiles.flow.domain();
        let (glo, ghi) = profiles.group_velocity.domain();
        if self.grid.z_min < lo.max(glo) || self.grid.z_max > hi.min(ghi) {
            return Err(ConfigError::constraint("grid", "extends beyond a tabulated profile"));
        }
        let dz = grid.dz();
        if !(self.packet_sigma >= 4.0 * dz) {
            return Err(ConfigError::constraint("packet.sigma", format!("must be at least four grid spacings ({} m)", 4.0 * dz)));
        }
        self.integrator_config().validate().map_err(|e| ConfigError::constraint("integrator", e))?;
        let w = &self.wave;
        if let Some(t) = w.t_end {
            if !(t > 0.0) {
                return Err(ConfigError::constraint("wave.t_end", "must be positive"));
            }
        }
        if !(w.sample_every > 0.0) {
            return Err(ConfigError::constraint("wave.sample_every", "must be positive"));
        }
        if w.snapshot_every.is_some_and(|s| !(s > 0.0)) {
            return Err(ConfigError::constraint("wave.snapshot_every", "must be positive"));
        }
        if w.boundary == BoundaryKind::Absorbing && !(w.mask_width > 0.0 && 2.0 * w.mask_width < self.grid.z_max - self.grid.z_min) {
            return Err(ConfigError::constraint("wave.mask_width", "must be positive and fit twice in the grid"));
        }
        if !(w.z_ref > self.grid.z_min && w.z_ref < self.grid.z_max) {
            return Err(ConfigError::constraint("wave.z_ref", "must lie inside the grid"));
        }
        let p = &self.dispersion;
        if !(p.u_max > p.u_min) || p.points < 2 {
            return Err(ConfigError::constraint("dispersion", "needs u_max > u_min and at least two points"));
        }
        if !(p.v_g > 0.0 && p.v_g < spec.c()) || p.detunings.iter().any(|d| !d.is_finite()) {
            return Err(ConfigError::constraint("dispersion", "needs 0 < v_g < c and finite detunings"));
        }
        let s = &self.sweep;
        if !(s.drop_max >= s.drop_min && s.drop_min >= 0.0) || s.drop_steps < 2 {
            return Err(ConfigError::constraint("sweep", "needs 0 <= drop_min <= drop_max and at least two steps"));
        }
        if !(s.v_g_max >= s.v_g_min && s.v_g_min > 0.0) || s.v_g_steps < 2 {
            return Err(ConfigError::constraint("sweep", "needs 0 < v_g_min <= v_g_max and at least two steps"));
        }
        if !(s.ramp_width > 0.0) {
            return Err(ConfigError::constraint("sweep.ramp_width", "must be positive"));
        }
        Ok(())
    }

    fn to_file(&self) -> ConfigFile {
        let l = Quantity::<Length>::new;
        let t = Quantity::<Time>::new;
        let s = Quantity::<Speed>::new;
        ConfigFile {
            scenario: self.scenario.map(|n| ScenarioSection { name: Some(n) }),
            medium: Some(MediumFile {
                omega0: Some(Quantity::new(self.medium.omega0)),
                epsilon: Some(self.medium.epsilon),
                c: Some(s(self.medium.c)),
                hbar: Some(Quantity::new(self.medium.hbar)),
            }),
            flow: Some(self.flow.to_file()),
            group_velocity: Some(self.group_velocity.to_file()),
            launch: Some(LaunchFile {
                z: Some(l(self.launch.z)),
                branch: Some(self.launch.branch),
                delta: Some(self.launch.delta),
                detuning_scale: None,
            }),
            grid: Some(GridFile {
                z_min: Some(l(self.grid.z_min)),
                z_max: Some(l(self.grid.z_max)),
                n: Some(self.grid.n),
                dt: Some(t(self.grid.dt)),
                courant: None,
            }),
            packet: Some(PacketFile { sigma: Some(l(self.packet_sigma)) }),
            integrator: Some(IntegratorFile {
                dt: Some(t(self.integrator.dt)),
                max_dt: Some(t(self.integrator.max_dt)),
                t_max: Some(t(self.integrator.t_max)),
                rel_tol: Some(self.integrator.rel_tol),
                abs_tol: Some(l(self.integrator.abs_tol)),
                event_refine_tol: Some(l(self.integrator.event_refine_tol)),
                max_steps: Some(self.integrator.max_steps),
            }),
            wave: Some(WaveFile {
                enabled: Some(self.wave.enabled),
                stepper: Some(self.wave.stepper),
                boundary: Some(self.wave.boundary),
                mask_width: Some(l(self.wave.mask_width)),
                t_end: self.wave.t_end.map(t),
                sample_every: Some(t(self.wave.sample_every)),
                snapshot_every: self.wave.snapshot_every.map(t),
                z_ref: Some(l(self.wave.z_ref)),
            }),
            dispersion: Some(DispersionFile {
                u_min: Some(s(self.dispersion.u_min)),
                u_max: Some(s(self.dispersion.u_max)),
                points: Some(self.dispersion.points),
                detunings: Some(self.dispersion.detunings.clone()),
                v_g: Some(s(self.dispersion.v_g)),
            }),
            sweep: Some(SweepFile {
                drop_min: Some(s(self.sweep.drop_min)),
                drop_max: Some(s(self.sweep.drop_max)),
                drop_steps: Some(self.sweep.drop_steps),
                v_g_min: Some(s(self.sweep.v_g_min)),
                v_g_max: Some(s(self.sweep.v_g_max)),
                v_g_steps: Some(self.sweep.v_g_steps),
                v_g_axis_drop: Some(s(self.sweep.v_g_axis_drop)),
                ramp_center: Some(l(self.sweep.ramp_center)),
                ramp_width: Some(l(self.sweep.ramp_width)),
            }),
        }
    }

    /// Every resolved value as TOML, SI units.
    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("configuration serializes to TOML")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_figure2b_config_uses_reference_parameters() {
        let cfg = parse_config("[scenario]\nname = \"figure2b\"\n").unwrap();
        assert_eq!(cfg.scenario, Some(ScenarioName::Figure2b));
        assert_eq!(cfg.medium.omega0, 3e15);
        assert_eq!(cfg.group_velocity, ProfileConfig::Uniform { value: 300.0 });
        match cfg.flow {
            ProfileConfig::Tanh { right, .. } => assert_eq!(right, 0.995 * 300.0),
            ref other => panic!("unexpected flow {other:?}"),
        }
        assert!((cfg.launch.delta + 298.5 / 3e8).abs() < 1e-20);
        assert_eq!(cfg.launch.branch, Branch::Minus);
        // Default time step sits at half the kinetic Nyquist phase.
        let k = std::f64::consts::PI / (4e-3 / 4096.0);
        assert!((1.5e-5 * k * k * cfg.grid.dt - 0.5).abs() < 1e-12);
    }

    #[test]
    fn negative_group_velocity_is_a_constraint_violation() {
        let text = "[group_velocity]\nkind = \"uniform\"\nvalue = \"-1 m/s\"\n";
        assert!(matches!(parse_config(text), Err(ConfigError::Constraint { .. })));
    }

    #[test]
    fn unknown_keys_and_bad_units_report_position() {
        match parse_config("[medium]\nomega0 = \"3e15 rad/s\"\ncolour = 3\n") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_config("[launch]\nz = \"3 m/s\"\n") {
            Err(ConfigError::Parse { line, column, message }) => {
                assert_eq!((line, column), (2, 5));
                assert!(message.contains("not a length"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_config("[launch]\nz = 3.0\n").is_err());
        assert!(parse_config("[flow]\nkind = \"uniform\"\nvalue = \"1 m/s\"\nwidth = \"1 m\"\n").is_err());
    }

    #[test]
    fn units_are_converted() {
        let cfg = parse_config("[packet]\nsigma = \"50 um\"\n[launch]\nz = \"3 mm\"\n").unwrap();
        assert!((cfg.packet_sigma - 5e-5).abs() < 1e-20);
        assert!((cfg.launch.z - 3e-3).abs() < 1e-18);
    }

    #[test]
    fn serialization_round_trips() {
        for name in ScenarioName::ALL {
            let text = format!("[scenario]\nname = \"{name}\"\n[sweep]\ndrop_max = \"3.8 mm/s\"\n");
            let cfg = parse_config(&text).unwrap();
            let again = parse_config(&cfg.to_toml()).unwrap();
            assert_eq!(cfg, again, "{}", cfg.to_toml());
        }
        let table = "[flow]\nkind = \"table\"\nz = [\"0 m\", \"2 mm\", \"4 mm\"]\nvalues = [\"298.5 m/s\", \"298.49 m/s\", \"298.48 m/s\"]\n";
        let cfg = parse_config(table).unwrap();
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn resolution_scale_refines_grid() {
        let cfg = parse_config("").unwrap();
        let fine = cfg.clone().with_resolution_scale(2.0).unwrap();
        assert_eq!(fine.grid.n, 2 * cfg.grid.n);
        assert_eq!(fine.grid.dt, cfg.grid.dt / 2.0);
        assert!(cfg.with_resolution_scale(3.0).is_err());
    }

    #[test]
    fn float_formatting_round_trips() {
        for x in [0.0, 1.0, -9.95e-7, 3e15, 1.054571817e-34, 298.5, 0.1 + 0.2] {
            assert_eq!(format_f64(x).parse::<f64>().unwrap(), x);
        }
    }
}
