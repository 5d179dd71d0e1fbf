use std::path::PathBuf;

use geocalc::checks::{sweep, Settings};
use geocalc::config::RunConfig;
use geocalc::deviation::{recompose, Background, XiDecomposition};
use geocalc::gauge::{
    action_expansion, fp_log_determinant, frame_jacobian_check, functional_right_measure_log,
    gauge_fixed_log_integrand, nambu_goto_action,
};
use geocalc::geodesic::{log_map, shoot};
use geocalc::geometry::analyze;
use geocalc::immersion::Immersion;
use geocalc::suite::run_suite;
use geocalc::GeoError;

use crate::{Cli, Command, GeodesicCommand, ImmersionCommand};

pub struct Outcome {
    pub text: String,
    /// CSV artifact and where to write it.
    pub report: Option<(PathBuf, String)>,
    pub passed: bool,
}

#[derive(Debug)]
pub enum Failure {
    /// Usage or configuration problem (exit 2).
    Usage(String),
    /// The computation itself failed (exit 1).
    Check(String),
}

impl From<GeoError> for Failure {
    fn from(e: GeoError) -> Self {
        match e {
            GeoError::Config { .. } | GeoError::Io(_) | GeoError::Precondition(_) => Failure::Usage(e.to_string()),
            other => Failure::Check(other.to_string()),
        }
    }
}

/// Seed offset for the `measure`/`action` field, away from the check offsets.
const FIELD_SEED_OFFSET: u64 = 41;

fn load(cli: &Cli) -> Result<RunConfig, Failure> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::shipped(),
    };
    if let Some(t) = cli.tol {
        if !(t.is_finite() && t > 0.0) {
            return Err(Failure::Usage("--tol must be positive".into()));
        }
    }
    if let Some(g) = cli.grid {
        if g < 8 {
            return Err(Failure::Usage("--grid needs at least 8 points per axis".into()));
        }
    }
    Ok(cfg)
}

fn artifact(cli: &Cli, fallback: Option<&String>, csv: String) -> Option<(PathBuf, String)> {
    cli.out.clone().or_else(|| fallback.map(PathBuf::from)).map(|p| (p, csv))
}

pub fn run(cli: &Cli) -> Result<Outcome, Failure> {
    let cfg = load(cli)?;
    let settings = cfg.settings(cli.seed, cli.tol)?;
    match &cli.command {
        Command::Verify { suite } => {
            let report = run_suite(&settings, suite)?;
            Ok(Outcome {
                text: report.to_text(),
                report: artifact(cli, cfg.output.report.as_ref(), report.to_csv()),
                passed: report.passed(),
            })
        }
        Command::Sweep { check, scales } => {
            let scales = scales.clone().unwrap_or_else(|| settings.scales.clone());
            if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(Failure::Usage("scales must be positive".into()));
            }
            let table = sweep(&settings, check, &scales)?;
            let csv = table.to_csv();
            Ok(Outcome { text: csv.clone(), report: artifact(cli, cfg.output.sweep.as_ref(), csv), passed: true })
        }
        Command::Geodesic { action } => geodesic(cli, &settings, action),
        Command::Immersion { action: ImmersionCommand::Report { builtin } } => {
            let name = builtin.clone().unwrap_or_else(|| cfg.immersion.builtin.clone());
            immersion_report(cli, &name, cli.grid.unwrap_or(cfg.immersion.grid))
        }
        Command::Measure => measure(cli, &cfg, &settings),
        Command::Action => action(cli, &cfg, &settings),
    }
}

fn csv_outcome(cli: &Cli, csv: String) -> Outcome {
    Outcome { text: csv.clone(), report: artifact(cli, None, csv), passed: true }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.15e}")).collect::<Vec<_>>().join(",")
}

fn geodesic(cli: &Cli, settings: &Settings, action: &GeodesicCommand) -> Result<Outcome, Failure> {
    let case = |i: usize| {
        settings
            .manifolds
            .get(i)
            .ok_or_else(|| Failure::Usage(format!("no manifold {i} in the config ({} configured)", settings.manifolds.len())))
    };
    let dims = |m: &geocalc::manifold::ManifoldSpec, vs: &[&Vec<f64>]| {
        if vs.iter().any(|v| v.len() != m.dim()) {
            Err(Failure::Usage(format!("{} is {}-dimensional", m.name(), m.dim())))
        } else {
            Ok(())
        }
    };
    let tol = settings.ode_tolerance;
    let csv = match action {
        GeodesicCommand::Shoot { point, velocity, time, manifold } => {
            let m = &case(*manifold)?.spec;
            dims(m, &[point, velocity])?;
            let r = shoot(m, point, velocity, *time, tol)?;
            format!(
                "quantity,values\npoint,{}\nvelocity,{}\nnorm_drift,{:e}\nsteps,{}\n",
                join(&r.point),
                join(&r.velocity),
                r.norm_drift,
                r.steps
            )
        }
        GeodesicCommand::Log { from, to, manifold } => {
            let m = &case(*manifold)?.spec;
            dims(m, &[from, to])?;
            let v = log_map(m, from, to, tol)?;
            format!("quantity,values\nvelocity,{}\nlength,{:.15e}\n", join(&v), m.norm(from, &v)?)
        }
    };
    Ok(csv_outcome(cli, csv))
}

fn immersion_report(cli: &Cli, name: &str, grid: usize) -> Result<Outcome, Failure> {
    let imm = Immersion::builtin(name, grid)?;
    let geo = analyze(&imm)?;
    let r = geo.structure_residuals();
    let (mut hmin, mut hmax) = (f64::INFINITY, 0.0f64);
    for p in &geo.points {
        let h = p.mean_curvature();
        let norm = h.iter().map(|c| c * c).sum::<f64>().sqrt();
        hmin = hmin.min(norm);
        hmax = hmax.max(norm);
    }
    let seeds: Vec<String> = geo.frame.seeds.iter().map(|s| s.to_string()).collect();
    let rows = [
        ("name", name.to_string()),
        ("grid", format!("{:?}", imm.grid().counts).replace(", ", "x").replace(['[', ']'], "")),
        ("dim", imm.dim().to_string()),
        ("ambient_dim", imm.ambient_dim().to_string()),
        ("frame_seeds", seeds.join(";")),
        ("last_normal_sign_seed", geo.frame.last_sign_seed.to_string()),
        ("orthogonality", format!("{:e}", geo.frame.orthogonality)),
        ("orthonormality", format!("{:e}", geo.frame.orthonormality)),
        ("completeness", format!("{:e}", geo.frame.completeness)),
        ("weingarten", format!("{:e}", geo.weingarten_residual)),
        ("gauss", format!("{:e}", r.gauss)),
        ("codazzi", format!("{:e}", r.codazzi)),
        ("ricci", format!("{:e}", r.ricci)),
        ("volume", format!("{:.15e}", geo.volume())),
        ("mean_curvature_min", format!("{hmin:.15e}")),
        ("mean_curvature_max", format!("{hmax:.15e}")),
    ];
    let mut csv = String::from("quantity,value\n");
    for (k, v) in rows {
        csv.push_str(&format!("{k},{v}\n"));
    }
    Ok(csv_outcome(cli, csv))
}

/// Background and purely normal ξ from the config.
fn background(cli: &Cli, cfg: &RunConfig, settings: &Settings) -> Result<(Background, XiDecomposition), Failure> {
    let imm = Immersion::builtin(&cfg.immersion.builtin, cli.grid.unwrap_or(cfg.immersion.grid))?;
    let bg = Background::new(imm)?;
    let per = bg.grid().periods.clone();
    let f = cfg.normal_field(bg.dim(), bg.codim(), &per, settings.seed.wrapping_add(FIELD_SEED_OFFSET))?;
    let normal = bg.grid().points().iter().map(|x| f.value(x)).collect();
    let xi = XiDecomposition::normal_only(&bg, normal)?;
    Ok((bg, xi))
}

fn measure(cli: &Cli, cfg: &RunConfig, settings: &Settings) -> Result<Outcome, Failure> {
    let (bg, xi) = background(cli, cfg, settings)?;
    let mut csv = String::from("quantity,term,value\n");
    let weights = [
        ("gauge_fixed", gauge_fixed_log_integrand(&bg, &xi)?),
        ("fp_determinant", fp_log_determinant(&bg, &xi)?),
        ("right_measure", functional_right_measure_log(&bg, &recompose(&bg, &xi))?),
    ];
    for (q, w) in &weights {
        for line in w.to_csv().lines().skip(1) {
            csv.push_str(&format!("{q},{line}\n"));
        }
    }
    let fj = frame_jacobian_check(&bg);
    csv.push_str(&format!("frame_jacobian,max_residual,{:e}\n", fj.max_residual));
    Ok(csv_outcome(cli, csv))
}

fn action(cli: &Cli, cfg: &RunConfig, settings: &Settings) -> Result<Outcome, Failure> {
    let (bg, xi) = background(cli, cfg, settings)?;
    let e = action_expansion(&bg, &xi)?;
    let m = bg.immersion.ambient();
    let dev = recompose(&bg, &xi);
    let moved = bg
        .immersion
        .samples()
        .iter()
        .zip(&dev.samples)
        .map(|(x0, v)| shoot(m, x0, v, 1.0, settings.ode_tolerance).map(|r| r.point))
        .collect::<Result<Vec<_>, _>>()?;
    let exact = nambu_goto_action(&bg.immersion.displaced("perturbed", moved)?)?;
    let rows = [
        ("background", e.background),
        ("linear", e.linear),
        ("kinetic", e.kinetic),
        ("extrinsic_square", e.extrinsic_square),
        ("mean_square", e.mean_square),
        ("curvature", e.curvature),
        ("expansion_total", e.total()),
        ("exact_area", exact),
        ("difference", exact - e.total()),
    ];
    let mut csv = String::from("term,value\n");
    for (k, v) in rows {
        csv.push_str(&format!("{k},{v:.17e}\n"));
    }
    Ok(csv_outcome(cli, csv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    #[test]
    fn configuration_errors_are_usage_errors() {
        let e = GeoError::Config { path: "seed".into(), message: "missing".into() };
        assert!(matches!(Failure::from(e), Failure::Usage(_)));
        assert!(matches!(Failure::from(GeoError::NonFinite("x")), Failure::Check(_)));
    }

    #[test]
    fn out_flag_overrides_configured_path() {
        let cli = Cli::parse_from(["geocalc", "--out", "a.csv", "measure"]);
        let fallback = "b.csv".to_string();
        let (p, _) = artifact(&cli, Some(&fallback), String::new()).unwrap();
        assert_eq!(p, PathBuf::from("a.csv"));
        let cli = Cli::parse_from(["geocalc", "measure"]);
        assert!(artifact(&cli, None, String::new()).is_none());
    }

    #[test]
    fn nonpositive_tolerance_is_rejected() {
        let cli = Cli::parse_from(["geocalc", "--tol", "-1", "measure"]);
        assert!(matches!(load(&cli), Err(Failure::Usage(_))));
    }
}
