//! Merge recipes: which method to run on which checkpoints, with what
//! parameters.
//!
//! ```json
//! {
//!   "method": "ties",
//!   "inputs": [
//!     {"role": "base", "path": "short.safetensors"},
//!     {"role": "tuned", "path": "long.safetensors"}
//!   ],
//!   "parameters": {"density": 0.2, "scale": 0.5},
//!   "output": "out/ties"
//! }
//! ```
//!
//! Relative paths resolve against the recipe's directory. Validation
//! reports every problem at once, one line per field.

use std::fmt;
use std::path::{Path, PathBuf};

use rpam_core::merge::{DEFAULT_DROP_RATE, DEFAULT_SCALE, DEFAULT_TIES_DENSITY};
use rpam_core::rpam::{CalibrationConfig, CoefPair, GridSpec};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::files::{read_json, FileError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Average,
    TaskArithmetic,
    Ties,
    DareLinear,
    Rpam,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Average => "average",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Ties => "ties",
            Method::DareLinear => "dare_linear",
            Method::Rpam => "rpam",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Base,
    Tuned,
    Long,
    Short,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeInput {
    pub role: Role,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_lambda: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeRecipe {
    pub method: Method,
    pub inputs: Vec<RecipeInput>,
    #[serde(default)]
    pub parameters: Parameters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pl_dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
    /// Model config for `rpam`; defaults to the long checkpoint's sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error(transparent)]
    File(#[from] FileError),
    #[error("invalid recipe:\n{}", .0.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<String>),
}

/// A validated, fully-defaulted recipe.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Plan {
    Average {
        inputs: Vec<PathBuf>,
    },
    TaskArithmetic {
        base: PathBuf,
        tuned: Vec<PathBuf>,
        scale: f64,
    },
    Ties {
        base: PathBuf,
        tuned: Vec<PathBuf>,
        density: f64,
        scale: f64,
    },
    DareLinear {
        base: PathBuf,
        tuned: Vec<PathBuf>,
        drop_rate: f64,
        scales: Vec<f64>,
        seed: u64,
    },
    Rpam {
        long: PathBuf,
        short: PathBuf,
        pl_dataset: PathBuf,
        prompts: PathBuf,
        config: PathBuf,
        calibration: CalibrationConfig,
    },
}

impl Plan {
    pub fn method(&self) -> Method {
        match self {
            Plan::Average { .. } => Method::Average,
            Plan::TaskArithmetic { .. } => Method::TaskArithmetic,
            Plan::Ties { .. } => Method::Ties,
            Plan::DareLinear { .. } => Method::DareLinear,
            Plan::Rpam { .. } => Method::Rpam,
        }
    }

    /// Checkpoint paths in the order the method consumes them.
    pub fn checkpoints(&self) -> Vec<&Path> {
        match self {
            Plan::Average { inputs } => inputs.iter().map(PathBuf::as_path).collect(),
            Plan::TaskArithmetic { base, tuned, .. }
            | Plan::Ties { base, tuned, .. }
            | Plan::DareLinear { base, tuned, .. } => {
                std::iter::once(base.as_path()).chain(tuned.iter().map(PathBuf::as_path)).collect()
            }
            Plan::Rpam { long, short, .. } => vec![long, short],
        }
    }
}

impl MergeRecipe {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, RecipeError> {
        Ok(read_json(path)?)
    }

    /// Check the recipe and fill in defaults. Relative paths are joined to
    /// `base_dir`.
    pub fn plan(&self, base_dir: &Path) -> Result<Plan, RecipeError> {
        let mut issues = Vec::new();
        let p = &self.parameters;
        let resolve = |path: &Path| -> PathBuf {
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            }
        };
        let with_role = |role: Role| -> Vec<PathBuf> {
            self.inputs
                .iter()
                .filter(|i| i.role == role)
                .map(|i| resolve(&i.path))
                .collect()
        };

        let allowed_roles: &[Role] = match self.method {
            Method::Average => &[Role::Model, Role::Long, Role::Short, Role::Base, Role::Tuned],
            Method::TaskArithmetic | Method::Ties | Method::DareLinear => &[Role::Base, Role::Tuned],
            Method::Rpam => &[Role::Long, Role::Short],
        };
        for (i, input) in self.inputs.iter().enumerate() {
            if !allowed_roles.contains(&input.role) {
                issues.push(format!(
                    "inputs[{i}].role: `{}` is not used by method {}",
                    serde_json::to_value(input.role).expect("role").as_str().unwrap_or("?"),
                    self.method
                ));
            }
        }

        let used: &[&str] = match self.method {
            Method::Average => &[],
            Method::TaskArithmetic => &["scale"],
            Method::Ties => &["scale", "density"],
            Method::DareLinear => &["scale", "scales", "drop_rate"],
            Method::Rpam => &["tau", "omega", "learning_rate", "epochs", "init_lambda", "fd_step", "grid"],
        };
        let given = [
            ("scale", p.scale.is_some()),
            ("scales", p.scales.is_some()),
            ("density", p.density.is_some()),
            ("drop_rate", p.drop_rate.is_some()),
            ("tau", p.tau.is_some()),
            ("omega", p.omega.is_some()),
            ("learning_rate", p.learning_rate.is_some()),
            ("epochs", p.epochs.is_some()),
            ("init_lambda", p.init_lambda.is_some()),
            ("fd_step", p.fd_step.is_some()),
            ("grid", p.grid.is_some()),
        ];
        for (name, present) in given {
            if present && !used.contains(&name) {
                issues.push(format!("parameters.{name}: not used by method {}", self.method));
            }
        }
        for (name, present) in [
            ("pl_dataset", self.pl_dataset.is_some()),
            ("prompts", self.prompts.is_some()),
            ("config", self.config.is_some()),
        ] {
            if present && self.method != Method::Rpam {
                issues.push(format!("{name}: only used by method rpam"));
            }
        }

        let finite = |issues: &mut Vec<String>, name: &str, v: Option<f64>, default: f64| -> f64 {
            match v {
                Some(x) if !x.is_finite() => {
                    issues.push(format!("parameters.{name}: must be finite, got {x}"));
                    default
                }
                Some(x) => x,
                None => default,
            }
        };
        let scale = finite(&mut issues, "scale", p.scale, DEFAULT_SCALE);

        let base_and_tuned = |issues: &mut Vec<String>| -> (PathBuf, Vec<PathBuf>) {
            let bases = with_role(Role::Base);
            let tuned = with_role(Role::Tuned);
            if bases.len() != 1 {
                issues.push(format!("inputs: need exactly one `base` input, got {}", bases.len()));
            }
            if tuned.is_empty() {
                issues.push("inputs: need at least one `tuned` input".into());
            }
            (bases.into_iter().next().unwrap_or_default(), tuned)
        };

        let plan = match self.method {
            Method::Average => {
                let inputs: Vec<PathBuf> = self.inputs.iter().map(|i| resolve(&i.path)).collect();
                if inputs.len() < 2 {
                    issues.push(format!("inputs: average needs at least 2 inputs, got {}", inputs.len()));
                }
                Plan::Average { inputs }
            }
            Method::TaskArithmetic => {
                let (base, tuned) = base_and_tuned(&mut issues);
                Plan::TaskArithmetic { base, tuned, scale }
            }
            Method::Ties => {
                let (base, tuned) = base_and_tuned(&mut issues);
                let density = finite(&mut issues, "density", p.density, DEFAULT_TIES_DENSITY);
                if !(density > 0.0 && density <= 1.0) {
                    issues.push(format!("parameters.density: must be in (0, 1], got {density}"));
                }
                Plan::Ties {
                    base,
                    tuned,
                    density,
                    scale,
                }
            }
            Method::DareLinear => {
                let (base, tuned) = base_and_tuned(&mut issues);
                let drop_rate = finite(&mut issues, "drop_rate", p.drop_rate, DEFAULT_DROP_RATE);
                if !(0.0..1.0).contains(&drop_rate) {
                    issues.push(format!("parameters.drop_rate: must be in [0, 1), got {drop_rate}"));
                }
                let scales = match &p.scales {
                    Some(s) => {
                        if p.scale.is_some() {
                            issues.push("parameters.scales: give either `scale` or `scales`, not both".into());
                        }
                        if s.len() != tuned.len() {
                            issues.push(format!(
                                "parameters.scales: {} values for {} tuned inputs",
                                s.len(),
                                tuned.len()
                            ));
                        }
                        if let Some(x) = s.iter().find(|x| !x.is_finite()) {
                            issues.push(format!("parameters.scales: must be finite, got {x}"));
                        }
                        s.clone()
                    }
                    None => vec![scale; tuned.len()],
                };
                Plan::DareLinear {
                    base,
                    tuned,
                    drop_rate,
                    scales,
                    seed: p.seed.unwrap_or(0),
                }
            }
            Method::Rpam => {
                let long = with_role(Role::Long);
                let short = with_role(Role::Short);
                for (name, v) in [("long", &long), ("short", &short)] {
                    if v.len() != 1 {
                        issues.push(format!("inputs: need exactly one `{name}` input, got {}", v.len()));
                    }
                }
                if self.pl_dataset.is_none() {
                    issues.push("pl_dataset: required for method rpam".into());
                }
                if self.prompts.is_none() {
                    issues.push("prompts: required for method rpam".into());
                }
                let long = long.into_iter().next().unwrap_or_default();
                let config = match &self.config {
                    Some(c) => resolve(c),
                    None => crate::files::sidecar_for(&long),
                };
                let defaults = CalibrationConfig::default();
                let init = p
                    .init_lambda
                    .map(|[a, b]| CoefPair::new(a, b))
                    .unwrap_or(defaults.init_lambda);
                let calibration = CalibrationConfig {
                    tau: finite(&mut issues, "tau", p.tau, defaults.tau),
                    omega: finite(&mut issues, "omega", p.omega, defaults.omega),
                    learning_rate: finite(&mut issues, "learning_rate", p.learning_rate, defaults.learning_rate),
                    epochs: p.epochs.unwrap_or(defaults.epochs),
                    init_lambda: init,
                    pooling: defaults.pooling,
                    fd_step: finite(&mut issues, "fd_step", p.fd_step, defaults.fd_step),
                    seed: p.seed.unwrap_or(defaults.seed),
                    grid: p.grid.unwrap_or(false).then(GridSpec::default),
                };
                if let Err(e) = calibration.validate() {
                    issues.push(format!("parameters: {e}"));
                }
                Plan::Rpam {
                    long,
                    short: short.into_iter().next().unwrap_or_default(),
                    pl_dataset: self.pl_dataset.as_deref().map(resolve).unwrap_or_default(),
                    prompts: self.prompts.as_deref().map(resolve).unwrap_or_default(),
                    config,
                    calibration,
                }
            }
        };
        if issues.is_empty() {
            Ok(plan)
        } else {
            Err(RecipeError::Invalid(issues))
        }
    }
}
