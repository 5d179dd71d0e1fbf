use std::path::PathBuf;
use std::process::{Command, Output};

fn geocalc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geocalc")).args(args).output().expect("binary runs")
}

fn scratch(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("geocalc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const FLAT: &str = r#"
seed = 3
scales = [0.2, 0.1, 0.05, 0.025]
[[manifold]]
kind = "euclidean"
dim = 2
base = [0.1, 0.1]
"#;

#[test]
fn missing_seed_is_a_usage_error() {
    let cfg = scratch("noseed.toml", "scales = [0.1]\n");
    let o = geocalc(&["--config", cfg.to_str().unwrap(), "verify", "geodesic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn unknown_key_reports_its_path() {
    let cfg = scratch("unknown.toml", "seed = 1\n[tolerance]\nfoo = 1.0\n");
    let o = geocalc(&["--config", cfg.to_str().unwrap(), "verify", "geodesic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tolerance.foo"));
}

#[test]
fn flat_geodesic_suite_is_exact() {
    let cfg = scratch("flat.toml", FLAT);
    let report = cfg.with_file_name("flat-report.csv");
    let o = geocalc(&["--config", cfg.to_str().unwrap(), "--out", report.to_str().unwrap(), "verify", "geodesic"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("exact"));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("# geocalc"));
    assert!(csv.contains("criterion,check,measurement,value,requirement,pass"));
}

#[test]
fn sweep_prints_rows_and_slope() {
    let o = geocalc(&["sweep", "expand2", "--scales", "0.2,0.1,0.05"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scale,error,slope");
    assert_eq!(lines.len(), 5);
    let slope: f64 = lines[4].rsplit(',').next().unwrap().parse().unwrap();
    assert!((slope - 3.0).abs() < 0.3, "slope {slope}");
}

#[test]
fn unknown_sweep_is_rejected() {
    let o = geocalc(&["sweep", "nope"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn flat_shoot_is_a_straight_line() {
    let cfg = scratch("flat-shoot.toml", FLAT);
    let o = geocalc(&[
        "--config", cfg.to_str().unwrap(),
        "geodesic", "shoot", "--point", "0.5,-1", "--velocity", "2,0.25", "--time", "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let point: Vec<f64> = text
        .lines()
        .find(|l| l.starts_with("point,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    assert!((point[0] - 4.5).abs() < 1e-12 && (point[1] + 0.5).abs() < 1e-12, "{point:?}");
}

#[test]
fn shoot_then_log_round_trips_on_the_sphere() {
    let o = geocalc(&["geodesic", "shoot", "--point", "1.0,0.5", "--velocity", "0.3,-0.2"]);
    let text = stdout(&o);
    let end = text.lines().find(|l| l.starts_with("point,")).unwrap().trim_start_matches("point,");
    let o = geocalc(&["geodesic", "log", "--from", "1.0,0.5", "--to", end]);
    assert_eq!(o.status.code(), Some(0));
    let v: Vec<f64> = stdout(&o)
        .lines()
        .find(|l| l.starts_with("velocity,"))
        .unwrap()
        .split(',')
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    assert!((v[0] - 0.3).abs() < 1e-8 && (v[1] + 0.2).abs() < 1e-8, "{v:?}");
}

#[test]
fn dimension_mismatch_is_a_usage_error() {
    let o = geocalc(&["geodesic", "shoot", "--point", "1,2,3", "--velocity", "0,0,1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn immersion_report_lists_circle_geometry() {
    let o = geocalc(&["immersion", "report", "--builtin", "circle", "--grid", "64"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let volume: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("volume,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((volume - 2.0 * std::f64::consts::PI).abs() < 1e-3);
}

#[test]
fn action_and_measure_produce_tables() {
    let a = geocalc(&["--grid", "16", "action"]);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).contains("expansion_total"));
    let m = geocalc(&["--grid", "16", "measure"]);
    assert_eq!(m.status.code(), Some(0));
    assert!(stdout(&m).contains("frame_jacobian,max_residual"));
}

#[test]
fn tiny_grid_is_rejected() {
    let o = geocalc(&["--grid", "2", "action"]);
    assert_eq!(o.status.code(), Some(2));
}
