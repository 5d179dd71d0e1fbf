//! Run configuration: a TOML file with a fixed schema.
//!
//! ```toml
//! seed = 10                       # mandatory
//! scales = [0.2, 0.1, 0.05, 0.025]
//!
//! [tolerance]
//! ode = 1e-13
//! noise_floor = 1e-13
//!
//! [[manifold]]                    # repeatable
//! kind = "sphere"                 # euclidean | sphere | poincare | flat_torus | expression
//! radius = 1.0
//! base = [1.0, 0.5]
//!
//! [[manifold]]
//! kind = "expression"
//! coordinates = ["x", "y"]
//! metric = [["1 + x^2", "0"], ["0", "1"]]
//! domain = [[-2.0, 2.0], [-2.0, 2.0]]
//! base = [0.1, 0.2]
//!
//! [immersion]
//! builtin = "sphere_smooth"
//! grid = 48
//!
//! [field]
//! max_mode = 1
//! amplitude = 0.02
//! # fourier = { dim = 1, constant = [0.0], modes = [...] }  explicit coefficients
//!
//! [output]
//! report = "report.csv"
//! ```
//!
//! Metric expressions use `evalexpr` syntax (`^` for powers, `math::sin`,
//! ...). Integer literals divide as integers, so write `1.0/3.0`.

use std::path::Path;

use evalexpr::{ContextWithMutableVariables, HashMapContext, Node, Value};
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::checks::{ManifoldCase, Settings};
use crate::error::{GeoError, Result};
use crate::field::FourierField;
use crate::immersion::Immersion;
use crate::manifold::{AxisDomain, ManifoldSpec};

/// The configuration shipped with the repository.
pub const SHIPPED: &str = include_str!("../../../config/default.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_scales")]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub tolerance: ToleranceConfig,
    #[serde(default = "default_manifolds", rename = "manifold")]
    pub manifolds: Vec<ManifoldConfig>,
    #[serde(default)]
    pub immersion: ImmersionConfig,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceConfig {
    #[serde(default = "default_tol")]
    pub ode: f64,
    #[serde(default = "default_tol")]
    pub noise_floor: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { ode: default_tol(), noise_floor: default_tol() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub kind: String,
    pub radius: Option<f64>,
    pub dim: Option<usize>,
    pub periods: Option<Vec<f64>>,
    pub coordinates: Option<Vec<String>>,
    pub metric: Option<Vec<Vec<String>>>,
    pub domain: Option<Vec<[f64; 2]>>,
    pub base: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImmersionConfig {
    #[serde(default = "default_builtin")]
    pub builtin: String,
    #[serde(default = "default_grid")]
    pub grid: usize,
}

impl Default for ImmersionConfig {
    fn default() -> Self {
        Self { builtin: default_builtin(), grid: default_grid() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(default = "default_mode")]
    pub max_mode: i32,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Explicit normal-field coefficients; overrides the random draw.
    pub fourier: Option<FourierField>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { max_mode: default_mode(), amplitude: default_amplitude(), fourier: None }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub report: Option<String>,
    pub sweep: Option<String>,
}

fn default_scales() -> Vec<f64> {
    vec![0.2, 0.1, 0.05, 0.025]
}
fn default_tol() -> f64 {
    1e-13
}
fn default_builtin() -> String {
    "sphere_smooth".into()
}
fn default_grid() -> usize {
    48
}
fn default_mode() -> i32 {
    1
}
fn default_amplitude() -> f64 {
    0.02
}
fn default_manifolds() -> Vec<ManifoldConfig> {
    ["sphere", "poincare"]
        .iter()
        .map(|k| ManifoldConfig {
            kind: k.to_string(),
            radius: None,
            dim: None,
            periods: None,
            coordinates: None,
            metric: None,
            domain: None,
            base: None,
        })
        .collect()
}

fn config_error(path: impl Into<String>, message: impl Into<String>) -> GeoError {
    GeoError::Config { path: path.into(), message: message.into() }
}

impl RunConfig {
    /// Parses and validates; schema errors name the offending key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { "<root>".to_string() } else { path };
            config_error(path, e.inner().message().trim())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GeoError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn shipped() -> Self {
        Self::from_toml_str(SHIPPED).expect("shipped config is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(config_error("scales", "scales must be positive and finite"));
        }
        for (name, v) in [("tolerance.ode", self.tolerance.ode), ("tolerance.noise_floor", self.tolerance.noise_floor)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(name, "must be a non-negative number"));
            }
        }
        if self.tolerance.ode == 0.0 {
            return Err(config_error("tolerance.ode", "must be positive"));
        }
        if self.immersion.grid < 8 {
            return Err(config_error("immersion.grid", "need at least 8 points per axis"));
        }
        if !Immersion::BUILTINS.contains(&self.immersion.builtin.as_str()) {
            return Err(config_error(
                "immersion.builtin",
                format!("unknown builtin '{}' (known: {})", self.immersion.builtin, Immersion::BUILTINS.join(", ")),
            ));
        }
        if !(self.field.amplitude.is_finite() && self.field.amplitude >= 0.0) || self.field.max_mode < 0 {
            return Err(config_error("field", "amplitude and max_mode must be non-negative"));
        }
        for i in 0..self.manifolds.len() {
            self.manifold_case(i)?;
        }
        Ok(())
    }

    pub fn manifold_case(&self, index: usize) -> Result<ManifoldCase> {
        let c = self
            .manifolds
            .get(index)
            .ok_or_else(|| config_error("manifold", format!("no manifold entry {index}")))?;
        build_manifold(c, &format!("manifold[{index}]"))
    }

    /// Check settings with optional command-line overrides.
    pub fn settings(&self, seed: Option<u64>, tol: Option<f64>) -> Result<Settings> {
        let manifolds = (0..self.manifolds.len()).map(|i| self.manifold_case(i)).collect::<Result<_>>()?;
        Ok(Settings {
            seed: seed.unwrap_or(self.seed),
            scales: self.scales.clone(),
            ode_tolerance: tol.unwrap_or(self.tolerance.ode),
            noise_floor: self.tolerance.noise_floor,
            manifolds,
        })
    }

    /// Normal deviation field for `measure` and `action`.
    pub fn normal_field(&self, param_dim: usize, codim: usize, periods: &[f64], seed: u64) -> Result<FourierField> {
        match &self.field.fourier {
            Some(f) if f.dim != codim => {
                Err(config_error("field.fourier.dim", format!("expected {codim} components, found {}", f.dim)))
            }
            Some(f) if f.modes.iter().any(|m| m.wavevector.len() != param_dim) => {
                Err(config_error("field.fourier.modes", format!("wavevectors must have {param_dim} entries")))
            }
            Some(f) => Ok(f.clone()),
            None => Ok(FourierField::random(param_dim, codim, periods, self.field.max_mode, self.field.amplitude, seed)),
        }
    }
}

fn build_manifold(c: &ManifoldConfig, path: &str) -> Result<ManifoldCase> {
    let unused = |field: &str, present: bool| -> Result<()> {
        if present {
            Err(config_error(format!("{path}.{field}"), format!("not used by kind '{}'", c.kind)))
        } else {
            Ok(())
        }
    };
    let (spec, default_base) = match c.kind.as_str() {
        "euclidean" => {
            unused("radius", c.radius.is_some())?;
            let n = c.dim.unwrap_or(2);
            if !(1..=4).contains(&n) {
                return Err(config_error(format!("{path}.dim"), "Euclidean dimension must be 1..=4"));
            }
            (ManifoldSpec::euclidean(n), Some(vec![0.1; n]))
        }
        "sphere" => {
            let r = c.radius.unwrap_or(1.0);
            if !(r > 0.0 && r.is_finite()) {
                return Err(config_error(format!("{path}.radius"), "radius must be positive"));
            }
            (ManifoldSpec::sphere(r, 0.1), Some(vec![1.0, 0.5]))
        }
        "poincare" => {
            unused("radius", c.radius.is_some())?;
            (ManifoldSpec::poincare_half_plane(), Some(vec![0.3, 1.0]))
        }
        "flat_torus" => {
            let periods = c
                .periods
                .clone()
                .ok_or_else(|| config_error(format!("{path}.periods"), "flat_torus needs periods"))?;
            if periods.is_empty() || periods.iter().any(|p| p.is_nan() || *p <= 0.0) {
                return Err(config_error(format!("{path}.periods"), "periods must be positive"));
            }
            let n = periods.len();
            (ManifoldSpec::flat_torus(&periods), Some(vec![0.1; n]))
        }
        "expression" => (expression_manifold(c, path)?, None),
        other => {
            return Err(config_error(
                format!("{path}.kind"),
                format!("unknown kind '{other}' (euclidean, sphere, poincare, flat_torus, expression)"),
            ))
        }
    };
    if c.kind != "expression" {
        unused("coordinates", c.coordinates.is_some())?;
        unused("metric", c.metric.is_some())?;
    }
    let base = c
        .base
        .clone()
        .or(default_base)
        .ok_or_else(|| config_error(format!("{path}.base"), "a base point is required"))?;
    if base.len() != spec.dim() {
        return Err(config_error(format!("{path}.base"), format!("expected {} coordinates", spec.dim())));
    }
    if !spec.contains(&base) {
        return Err(config_error(format!("{path}.base"), "base point outside the chart domain"));
    }
    spec.metric_at(&base).map_err(|e| config_error(format!("{path}.metric"), e.to_string()))?;
    Ok(ManifoldCase::new(spec, base))
}

fn expression_manifold(c: &ManifoldConfig, path: &str) -> Result<ManifoldSpec> {
    let coords = c
        .coordinates
        .clone()
        .ok_or_else(|| config_error(format!("{path}.coordinates"), "expression metric needs coordinate names"))?;
    let n = coords.len();
    if n == 0 {
        return Err(config_error(format!("{path}.coordinates"), "at least one coordinate"));
    }
    let rows = c.metric.as_ref().ok_or_else(|| config_error(format!("{path}.metric"), "missing metric matrix"))?;
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(config_error(format!("{path}.metric"), format!("metric must be {n}×{n}")));
    }
    let mut nodes: Vec<Node> = Vec::with_capacity(n * n);
    for (i, row) in rows.iter().enumerate() {
        for (j, text) in row.iter().enumerate() {
            let node = evalexpr::build_operator_tree(text)
                .map_err(|e| config_error(format!("{path}.metric[{i}][{j}]"), e.to_string()))?;
            nodes.push(node);
        }
    }
    let domain: Vec<AxisDomain> = match &c.domain {
        Some(d) if d.len() != n => return Err(config_error(format!("{path}.domain"), format!("need {n} intervals"))),
        Some(d) => d
            .iter()
            .enumerate()
            .map(|(i, [lo, hi])| {
                if lo < hi {
                    Ok(AxisDomain::Interval { lo: *lo, hi: *hi })
                } else {
                    Err(config_error(format!("{path}.domain[{i}]"), "empty interval"))
                }
            })
            .collect::<Result<_>>()?,
        None => vec![AxisDomain::Interval { lo: -1e6, hi: 1e6 }; n],
    };
    // expressions must be symmetric and evaluate at the base point
    let eval = move |x: &[f64]| -> std::result::Result<DMatrix<f64>, String> {
        let mut ctx = HashMapContext::new();
        for (name, v) in coords.iter().zip(x) {
            ctx.set_value(name.clone(), Value::Float(*v)).map_err(|e| e.to_string())?;
        }
        let vals = nodes.iter().map(|node| node.eval_number_with_context(&ctx).map_err(|e| e.to_string()));
        let vals: Vec<f64> = vals.collect::<std::result::Result<_, _>>()?;
        Ok(DMatrix::from_row_slice(n, n, &vals))
    };
    if let Some(base) = &c.base {
        if base.len() == n {
            let m = eval(base).map_err(|e| config_error(format!("{path}.metric"), e))?;
            if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
                return Err(config_error(format!("{path}.metric"), "metric matrix is not symmetric"));
            }
        }
    }
    Ok(ManifoldSpec::new("expression", n, move |x| eval(x).unwrap_or_else(|_| DMatrix::from_element(n, n, f64::NAN)), domain))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_parses() {
        let c = RunConfig::shipped();
        assert_eq!(c.seed, 10);
        assert_eq!(c.manifolds.len(), 2);
        let s = c.settings(None, None).unwrap();
        assert_eq!(s.manifolds[0].spec.name(), "sphere");
        assert_eq!(c.settings(Some(3), Some(1e-9)).unwrap().seed, 3);
    }

    #[test]
    fn missing_seed_is_a_schema_error() {
        let e = RunConfig::from_toml_str("scales = [0.1]").unwrap_err();
        assert!(matches!(&e, GeoError::Config { message, .. } if message.contains("seed")), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let e = RunConfig::from_toml_str("seed = 1\n[tolerance]\node = 1e-9\nfoo = 2\n").unwrap_err();
        match e {
            GeoError::Config { path, message } => {
                assert_eq!(path, "tolerance.foo");
                assert!(message.contains("foo"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn expression_metric_matches_builtin() {
        let text = r#"
seed = 1
[[manifold]]
kind = "expression"
coordinates = ["t", "p"]
metric = [["1.0", "0.0"], ["0.0", "math::sin(t)^2"]]
domain = [[0.1, 3.0], [-10.0, 10.0]]
base = [1.0, 0.5]
"#;
        let c = RunConfig::from_toml_str(text).unwrap();
        let m = c.manifold_case(0).unwrap().spec;
        let s = ManifoldSpec::unit_sphere();
        let x = [1.1, 0.3];
        let a = m.curvature_at(&x).unwrap();
        let b = s.curvature_at(&x).unwrap();
        assert!((a.ricci.clone() - b.ricci.clone()).abs().max() < 1e-6);
    }

    #[test]
    fn bad_expression_points_at_the_entry() {
        let text = "seed = 1\n[[manifold]]\nkind = \"expression\"\ncoordinates = [\"x\"]\nmetric = [[\"(1 + x\"]]\nbase = [0.0]\n";
        match RunConfig::from_toml_str(text).unwrap_err() {
            GeoError::Config { path, .. } => assert_eq!(path, "manifold[0].metric[0][0]"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn asymmetric_metric_is_rejected() {
        let text = "seed = 1\n[[manifold]]\nkind = \"expression\"\ncoordinates = [\"x\", \"y\"]\nmetric = [[\"1.0\", \"x\"], [\"0.0\", \"1.0\"]]\nbase = [0.5, 0.0]\n";
        assert!(RunConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn field_dimension_is_checked() {
        let mut c = RunConfig::shipped();
        c.field.fourier = Some(FourierField::zero(2));
        assert!(c.normal_field(2, 1, &[1.0, 1.0], 0).is_err());
        c.field.fourier = None;
        assert_eq!(c.normal_field(2, 1, &[1.0, 1.0], 0).unwrap().dim, 1);
    }
}
