//! Run configuration: TOML (or JSON, by file extension) with `[problem]`,
//! `[goal]`, `[discretization]`, `[adaptivity]`, `[output]` sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::mesh::{QuadMesh, Rect};
use crate::problem::{self, GoalKind, ProblemSpec};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub goal: GoalSection,
    #[serde(default)]
    pub discretization: DiscretizationSection,
    #[serde(default)]
    pub adaptivity: AdaptivitySection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProblemSection {
    /// example1 | example2 | manufactured | zero
    pub name: String,
    pub epsilon: f64,
    /// Exact-solution degree for the manufactured problem.
    pub degree: usize,
}

impl Default for ProblemSection {
    fn default() -> Self {
        ProblemSection { name: "example2".into(), epsilon: 1e-6, degree: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GoalSection {
    /// l2_error | domain_mean | point_value | subdomain_mean
    pub kind: String,
    pub center: [f64; 2],
    pub radius: f64,
    /// x0, y0, x1, y1
    pub subdomain: [f64; 4],
}

impl Default for GoalSection {
    fn default() -> Self {
        GoalSection {
            kind: "l2_error".into(),
            center: [5.0 / 16.0, 3.0 / 8.0],
            radius: 0.05,
            subdomain: [0.25, 0.25, 0.75, 0.75],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscretizationSection {
    pub p: usize,
    pub s: usize,
    pub initial_cells_per_axis: usize,
    /// Quadrature points per axis; 0 selects the default p + s + 2.
    pub quad_points: usize,
}

impl Default for DiscretizationSection {
    fn default() -> Self {
        DiscretizationSection { p: 1, s: 1, initial_cells_per_axis: 16, quad_points: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptivitySection {
    /// adaptive | global
    pub mode: String,
    pub theta: f64,
    pub delta0: f64,
    /// SUPG constant for the dual solve (kept smaller than delta0 so the
    /// dual weights stay sharp inside layers).
    pub delta0_dual: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub coarsen_fraction: f64,
    /// 0 disables the cap.
    pub max_dofs: usize,
}

impl Default for AdaptivitySection {
    fn default() -> Self {
        AdaptivitySection {
            mode: "adaptive".into(),
            theta: 1.0,
            delta0: 1.0,
            delta0_dual: 0.1,
            tol: 0.0,
            max_iterations: 10,
            coarsen_fraction: 0.02,
            max_dofs: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub write_vtu: bool,
    pub dump_matrices: bool,
    pub record_timings: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("output"),
            write_vtu: false,
            dump_matrices: false,
            record_timings: false,
        }
    }
}

const SECTIONS: [(&str, &[&str]); 5] = [
    ("problem", &["name", "epsilon", "degree"]),
    ("goal", &["kind", "center", "radius", "subdomain"]),
    ("discretization", &["p", "s", "initial_cells_per_axis", "quad_points"]),
    (
        "adaptivity",
        &[
            "mode",
            "theta",
            "delta0",
            "delta0_dual",
            "tol",
            "max_iterations",
            "coarsen_fraction",
            "max_dofs",
        ],
    ),
    ("output", &["directory", "write_vtu", "dump_matrices", "record_timings"]),
];

/// Parses a config file; returns the config and any unknown keys found
/// (callers decide whether those are fatal).
pub fn load_config(path: &Path) -> Result<(RunConfig, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
    let value: serde_json::Value = if path.extension().and_then(|e| e.to_str()) == Some("json")
    {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        let toml_value: toml::Value = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(toml_value)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };

    let mut unknown = Vec::new();
    if let Some(map) = value.as_object() {
        for (section, sub) in map {
            match SECTIONS.iter().find(|(name, _)| name == section) {
                None => unknown.push(section.clone()),
                Some((_, keys)) => {
                    if let Some(sub) = sub.as_object() {
                        for key in sub.keys() {
                            if !keys.contains(&key.as_str()) {
                                unknown.push(format!("{section}.{key}"));
                            }
                        }
                    }
                }
            }
        }
    } else {
        return Err(Error::Config(format!(
            "{}: expected a table of sections",
            path.display()
        )));
    }

    let config: RunConfig = serde_json::from_value(fill_defaults(value))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((config, unknown))
}

/// Merges the parsed value over the defaults so partial sections work with
/// plain serde derives.
fn fill_defaults(value: serde_json::Value) -> serde_json::Value {
    let mut base = serde_json::to_value(RunConfig::default()).unwrap();
    merge(&mut base, value);
    base
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.problem.epsilon <= 0.0 {
            return Err(Error::Config("problem.epsilon must be positive".into()));
        }
        match self.problem.name.as_str() {
            "example1" | "example2" | "manufactured" | "zero" => {}
            other => {
                return Err(Error::Config(format!(
                    "problem.name: unknown problem {other:?} \
                     (expected example1, example2, manufactured, or zero)"
                )))
            }
        }
        match self.goal.kind.as_str() {
            "l2_error" | "domain_mean" | "point_value" | "subdomain_mean" => {}
            other => {
                return Err(Error::Config(format!(
                    "goal.kind: unknown goal {other:?} \
                     (expected l2_error, domain_mean, point_value, or subdomain_mean)"
                )))
            }
        }
        if self.goal.kind == "point_value" && self.goal.radius <= 0.0 {
            return Err(Error::Config("goal.radius must be positive".into()));
        }
        if !(1..=4).contains(&self.discretization.p) {
            return Err(Error::Config("discretization.p must be in [1, 4]".into()));
        }
        if !(1..=3).contains(&self.discretization.s) {
            return Err(Error::Config("discretization.s must be in [1, 3]".into()));
        }
        if self.discretization.initial_cells_per_axis == 0 {
            return Err(Error::Config(
                "discretization.initial_cells_per_axis must be positive".into(),
            ));
        }
        match self.adaptivity.mode.as_str() {
            "adaptive" | "global" => {}
            other => {
                return Err(Error::Config(format!(
                    "adaptivity.mode: expected adaptive or global, got {other:?}"
                )))
            }
        }
        if self.goal.kind == "l2_error" && self.problem()?.exact.is_none() {
            return Err(Error::Config(
                "goal.kind = l2_error requires a problem with an exact solution".into(),
            ));
        }
        self.adapt_config().validate()
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        match self.problem.name.as_str() {
            "example1" => problem::example1(self.problem.epsilon),
            "example2" => problem::example2(self.problem.epsilon),
            "manufactured" => problem::manufactured(self.problem.degree),
            "zero" => Ok(problem::zero_problem()),
            other => Err(Error::Config(format!("unknown problem {other:?}"))),
        }
    }

    pub fn goal_kind(&self) -> Result<GoalKind> {
        match self.goal.kind.as_str() {
            "l2_error" => Ok(GoalKind::L2ErrorRep),
            "domain_mean" => Ok(GoalKind::DomainMean),
            "point_value" => Ok(GoalKind::PointValueRegularized {
                center: self.goal.center,
                radius: self.goal.radius,
            }),
            "subdomain_mean" => {
                let [x0, y0, x1, y1] = self.goal.subdomain;
                if x1 <= x0 || y1 <= y0 {
                    return Err(Error::Config("goal.subdomain must be a nonempty box".into()));
                }
                Ok(GoalKind::SubdomainMean { rect: Rect::new(x0, y0, x1, y1) })
            }
            other => Err(Error::Config(format!("unknown goal {other:?}"))),
        }
    }

    pub fn adapt_config(&self) -> AdaptConfig {
        AdaptConfig {
            p: self.discretization.p,
            s: self.discretization.s,
            theta: self.adaptivity.theta,
            coarsen_fraction: self.adaptivity.coarsen_fraction,
            delta0: self.adaptivity.delta0,
            delta0_dual: self.adaptivity.delta0_dual,
            tol: self.adaptivity.tol,
            max_iterations: self.adaptivity.max_iterations,
            max_dofs: if self.adaptivity.max_dofs == 0 {
                usize::MAX
            } else {
                self.adaptivity.max_dofs
            },
            quad_points: (self.discretization.quad_points > 0)
                .then_some(self.discretization.quad_points),
            record_timings: self.output.record_timings,
        }
    }

    pub fn initial_mesh(&self) -> Result<QuadMesh> {
        QuadMesh::new_uniform(
            Rect::new(0.0, 0.0, 1.0, 1.0),
            self.discretization.initial_cells_per_axis,
        )
    }

    /// Resolved configuration rendered as TOML (for `describe`).
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn minimal_toml_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "min.toml", "[problem]\nname = \"example1\"\n");
        let (config, unknown) = load_config(&path).unwrap();
        assert!(unknown.is_empty());
        assert_eq!(config.problem.name, "example1");
        assert_eq!(config.problem.epsilon, 1e-6);
        assert_eq!(config.adaptivity.theta, 1.0);
        assert_eq!(config.adaptivity.delta0, 1.0);
        assert_eq!(config.discretization.s, 1);
        assert_eq!(config.adaptivity.coarsen_fraction, 0.02);
        config.validate().unwrap();
    }

    #[test]
    fn json_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "run.json",
            r#"{"problem": {"name": "example2", "epsilon": 1e-7}, "goal": {"kind": "domain_mean"}}"#,
        );
        let (config, unknown) = load_config(&path).unwrap();
        assert!(unknown.is_empty());
        assert_eq!(config.problem.epsilon, 1e-7);
        assert!(matches!(config.goal_kind().unwrap(), GoalKind::DomainMean));
    }

    #[test]
    fn unknown_keys_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "odd.toml",
            "[problem]\nname = \"example2\"\nwhatever = 3\n[extra]\nx = 1\n",
        );
        let (_, unknown) = load_config(&path).unwrap();
        assert!(unknown.contains(&"problem.whatever".to_string()));
        assert!(unknown.contains(&"extra".to_string()));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut config = RunConfig::default();
        config.adaptivity.theta = 0.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.discretization.p = 5;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.problem.epsilon = -1.0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.goal.kind = "nonsense".into();
        assert!(config.validate().is_err());
    }

    #[test]
    fn goal_parameters_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "goal.toml",
            "[problem]\nname = \"example2\"\n[goal]\nkind = \"point_value\"\nradius = 0.1\n",
        );
        let (config, _) = load_config(&path).unwrap();
        match config.goal_kind().unwrap() {
            GoalKind::PointValueRegularized { center, radius } => {
                assert_eq!(radius, 0.1);
                assert_eq!(center, [5.0 / 16.0, 3.0 / 8.0]);
            }
            other => panic!("unexpected goal {other:?}"),
        }
        let text = config.to_toml();
        assert!(text.contains("radius = 0.1"));
    }

    #[test]
    fn max_dofs_zero_means_uncapped() {
        let config = RunConfig::default();
        assert_eq!(config.adapt_config().max_dofs, usize::MAX);
    }
}
