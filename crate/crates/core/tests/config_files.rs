//! Configuration files through the public parser.

use slowlight::config::{parse_config, reference, ConfigError, ConfigFile, ProfileConfig, ScenarioName};
use slowlight::wave::StepperKind;

const FULL: &str = r#"
[scenario]
name = "figure2a"

[medium]
omega0 = "3e15 rad/s"
epsilon = 0.001
c = "3e8 m/s"
hbar = "1.054571817e-34 J*s"

[flow]
kind = "linear"
left = "298.5115 m/s"
right = "298.5 m/s"
z_start = "1.9 mm"
z_end = "2.1 mm"

[group_velocity]
kind = "table"
z = ["-1 mm", "2 mm", "5 mm"]
values = ["300 m/s", "300 m/s", "300 m/s"]

[launch]
z = "3.2 mm"
branch = "minus"
detuning_scale = 1.0

[grid]
z_min = "0 mm"
z_max = "4 mm"
n = 2048
courant = 0.25

[packet]
sigma = "80 um"

[integrator]
dt = "1 us"
max_dt = "10 us"
t_max = "2 ms"
rel_tol = 1e-10
abs_tol = "1e-13 m"
event_refine_tol = "0.1 nm"
max_steps = 100000

[wave]
enabled = true
stepper = "crank-nicolson"
boundary = "absorbing"
mask_width = "150 um"
t_end = "1 ms"
sample_every = "2 us"
snapshot_every = "100 us"
z_ref = "2 mm"

[dispersion]
u_min = "-300 m/s"
u_max = "300 m/s"
points = 11
detunings = [0.0, -5e-7]
v_g = "300 m/s"

[sweep]
drop_min = "0 mm/s"
drop_max = "10 mm/s"
drop_steps = 3
v_g_min = "299 m/s"
v_g_max = "301 m/s"
v_g_steps = 3
v_g_axis_drop = "11.5 mm/s"
ramp_center = "2 mm"
ramp_width = "100 um"
"#;

#[test]
fn every_section_parses_and_round_trips() {
    let cfg = parse_config(FULL).unwrap();
    assert_eq!(cfg.scenario, Some(ScenarioName::Figure2a));
    assert_eq!(cfg.grid.n, 2048);
    assert_eq!(cfg.packet_sigma, 8e-5);
    assert_eq!(cfg.wave.stepper, StepperKind::CrankNicolson);
    assert_eq!(cfg.wave.snapshot_every, Some(1e-4));
    assert!(matches!(cfg.flow, ProfileConfig::Linear { .. }));
    assert!((cfg.sweep.drop_max - 0.01).abs() < 1e-15);
    assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn reference_configurations_round_trip() {
    for name in ScenarioName::ALL {
        let cfg = reference(name);
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg, "{name}");
    }
}

#[test]
fn command_line_scenario_overrides_file_defaults() {
    let file = ConfigFile::parse("[grid]\nn = 1024\n").unwrap();
    let cfg = file.resolve(Some(ScenarioName::Figure3)).unwrap();
    assert_eq!(cfg.scenario, Some(ScenarioName::Figure3));
    assert_eq!(cfg.grid.n, 1024);
    assert!(matches!(cfg.group_velocity, ProfileConfig::Tanh { .. }));
}

type Expect = fn(&ConfigError) -> bool;

#[test]
fn errors_are_classified() {
    let cases: [(&str, Expect); 5] = [
        ("[grid]\nn = 1000\n", |e| matches!(e, ConfigError::Constraint { .. })),
        ("[packet]\nsigma = \"100 m/s\"\n", |e| matches!(e, ConfigError::Parse { .. })),
        ("[packet]\nsigma = 1e-4\n", |e| matches!(e, ConfigError::Parse { .. })),
        ("[launch]\ndelta = -1e-6\ndetuning_scale = 2.0\n", |e| matches!(e, ConfigError::Constraint { .. })),
        ("[grid\n", |e| matches!(e, ConfigError::Parse { .. })),
    ];
    for (text, ok) in cases {
        let err = parse_config(text).unwrap_err();
        assert!(ok(&err), "{text:?}: {err:?}");
    }
}

#[test]
fn resolution_scale_keeps_the_config_valid() {
    let cfg = reference(ScenarioName::Figure2b).with_resolution_scale(0.5).unwrap();
    assert_eq!(cfg.grid.n, 2048);
    assert!(reference(ScenarioName::Figure2b).with_resolution_scale(3.0).is_err());
}
