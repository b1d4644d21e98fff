//! Scenario files: one JSON document per experiment, unknown keys rejected.

use std::path::{Path, PathBuf};

use dynthick::field::{Domain, Point, ScalarField, Term};
use dynthick::thickening::BlockConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_GRID: usize = 2048;
pub const MAX_SAMPLE_BUDGET: usize = 200_000;
pub const MAX_PROBES: usize = 10_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Field(#[from] dynthick::FieldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CatalogName {
    Model,
    DoubleWell,
    Torus,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogSpec {
    pub name: CatalogName,
    /// Dimension and index of the model quadratic form.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub scale: Option<f64>,
    /// Half-width of the cube domain, for non-periodic catalog entries.
    #[serde(default)]
    pub half_width: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub domain: Domain,
    pub terms: Vec<Term>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Catalog(CatalogSpec),
    Terms(TermSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budgets {
    /// Selector lower-level samples.
    pub selector_samples: usize,
    pub fiber_pairs: usize,
    pub retraction_probes: usize,
    pub homotopy_probes: usize,
    pub isolation_probes: usize,
    /// Largest lower label in the transversality check, in units of tau.
    pub transversality_label: f64,
    /// Multiples of tau for the gamma convergence rows.
    pub gamma_multiples: Vec<f64>,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            selector_samples: 10_000,
            fiber_pairs: 100,
            retraction_probes: 200,
            homotopy_probes: 200,
            isolation_probes: 64,
            transversality_label: 5.0,
            gamma_multiples: vec![2.0, 4.0, 8.0],
        }
    }
}

/// Overrides of the integrator and event tolerances; unset keys keep the
/// defaults derived from `tau`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub tol_ode: Option<f64>,
    pub tol_event: Option<f64>,
    pub horizon: Option<f64>,
    pub padding: Option<f64>,
    pub fd_step: Option<f64>,
    /// Smallest accepted transversality angle in radians.
    pub transversality_angle: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub field: FieldSpec,
    pub seed_point: Vec<f64>,
    pub eps: f64,
    pub tau: f64,
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Second resolution for the stability check; defaults to `3 grid / 2`.
    #[serde(default)]
    pub check_grid: Option<usize>,
    #[serde(default)]
    pub budgets: Budgets,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn default_grid() -> usize {
    128
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let sc: Scenario = serde_json::from_str(&text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for g in [Some(self.grid), self.check_grid].into_iter().flatten() {
            if !(dynthick::homology::MIN_GRID..=MAX_GRID).contains(&g) {
                return bad(format!("grid must lie in [{}, {MAX_GRID}], got {g}", dynthick::homology::MIN_GRID));
            }
        }
        let b = &self.budgets;
        if b.selector_samples == 0 || b.selector_samples > MAX_SAMPLE_BUDGET {
            return bad(format!("selector_samples must lie in [1, {MAX_SAMPLE_BUDGET}]"));
        }
        for (name, v) in [
            ("fiber_pairs", b.fiber_pairs),
            ("retraction_probes", b.retraction_probes),
            ("homotopy_probes", b.homotopy_probes),
            ("isolation_probes", b.isolation_probes),
        ] {
            if v == 0 || v > MAX_PROBES {
                return bad(format!("{name} must lie in [1, {MAX_PROBES}], got {v}"));
            }
        }
        if !(b.transversality_label >= 1.0) {
            return bad("transversality_label must be at least 1".into());
        }
        if b.gamma_multiples.is_empty() || b.gamma_multiples.iter().any(|m| !(*m >= 1.0)) {
            return bad("gamma_multiples must be non-empty and at least 1".into());
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tol_ode", t.tol_ode),
            ("tol_event", t.tol_event),
            ("horizon", t.horizon),
            ("padding", t.padding),
            ("fd_step", t.fd_step),
            ("transversality_angle", t.transversality_angle),
        ] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        let field = self.build_field()?;
        if self.seed_point.len() != field.dim() {
            return bad(format!(
                "seed_point has {} coordinates, field has dimension {}",
                self.seed_point.len(),
                field.dim()
            ));
        }
        Ok(())
    }

    pub fn build_field(&self) -> Result<ScalarField, ScenarioError> {
        let field = match &self.field {
            FieldSpec::Catalog(c) => {
                let hw = c.half_width.unwrap_or(2.0);
                match c.name {
                    CatalogName::Model => {
                        let n = c.n.unwrap_or(2);
                        let k = c.k.unwrap_or(1);
                        if n == 0 || k > n {
                            return Err(ScenarioError::Invalid(format!("model needs 0 <= k <= n, n >= 1 (n={n}, k={k})")));
                        }
                        ScalarField::model(n, k, c.scale.unwrap_or(1.0), hw)?
                    }
                    CatalogName::DoubleWell => ScalarField::double_well(hw)?,
                    CatalogName::Torus => ScalarField::torus()?,
                }
            }
            FieldSpec::Terms(t) => ScalarField::from_terms(self.name.clone(), t.domain.clone(), t.terms.clone())?,
        };
        Ok(match self.tolerances.fd_step {
            Some(h) => field.with_fd_step(h),
            None => field,
        })
    }

    pub fn seed_point(&self) -> Point {
        Point::from_column_slice(&self.seed_point)
    }

    pub fn check_grid(&self) -> usize {
        self.check_grid.unwrap_or(self.grid * 3 / 2)
    }

    pub fn block_config(&self, n: usize, k: usize) -> BlockConfig {
        let mut cfg = BlockConfig::new(n, k, self.tau);
        let t = &self.tolerances;
        if let Some(v) = t.tol_ode {
            cfg.flow.tol_ode = v;
        }
        if let Some(v) = t.tol_event {
            cfg.flow.tol_event = v;
        }
        if let Some(v) = t.horizon {
            cfg.flow.horizon = v;
        }
        if let Some(v) = t.padding {
            cfg.flow.padding = v;
        }
        cfg.isolation_probes = self.budgets.isolation_probes;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MODEL: &str = r#"{
        "name": "model",
        "field": {"catalog": {"name": "model", "n": 2, "k": 1}},
        "seed_point": [0.1, 0.1],
        "eps": 1.0,
        "tau": 1.0
    }"#;

    #[test]
    fn parses_and_defaults() {
        let sc: Scenario = serde_json::from_str(MODEL).unwrap();
        sc.validate().unwrap();
        assert_eq!(sc.grid, 128);
        assert_eq!(sc.check_grid(), 192);
        assert_eq!(sc.budgets.retraction_probes, 200);
        assert_eq!(sc.build_field().unwrap().dim(), 2);
    }

    #[test]
    fn rejects_bad_input() {
        let unknown = MODEL.replace("\"tau\"", "\"colour\": 1, \"tau\"");
        assert!(serde_json::from_str::<Scenario>(&unknown).is_err());
        let mut sc: Scenario = serde_json::from_str(MODEL).unwrap();
        sc.eps = 0.0;
        assert!(matches!(sc.validate(), Err(ScenarioError::Invalid(_))));
        sc.eps = 1.0;
        sc.seed_point = vec![0.0];
        assert!(sc.validate().is_err());
        sc.seed_point = vec![0.0, 0.0];
        sc.grid = 4;
        assert!(sc.validate().is_err());
    }

    #[test]
    fn term_fields() {
        let text = r#"{
            "name": "bowl",
            "field": {"terms": {
                "domain": {"lower": [-1, -1], "upper": [1, 1], "periodic": [false, false]},
                "terms": [
                    {"coef": 1.0, "factors": [{"kind": "pow", "axis": 0, "exp": 2}]},
                    {"coef": 1.0, "factors": [{"kind": "pow", "axis": 1, "exp": 2}]}
                ]
            }},
            "seed_point": [0.2, 0.1],
            "eps": 0.1,
            "tau": 1.0
        }"#;
        let sc: Scenario = serde_json::from_str(text).unwrap();
        sc.validate().unwrap();
        let f = sc.build_field().unwrap();
        assert!((f.value(&Point::from_column_slice(&[0.5, 0.5])) - 0.5).abs() < 1e-15);
    }
}
