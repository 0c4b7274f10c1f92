//! JSON experiment configuration with defaults and keyed validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cost::{CostKind, CostVariant, DEFAULT_ALPHA, DEFAULT_SIGMA2_SQ};
use crate::error::{validation, Error, Result};
use crate::geometry::DistanceMode;
use crate::simulator::{
    ComparisonSetup, EvalParams, FitParams, LabeledVariant, LossVariant, SceneSpec, StreakParams,
    DEFAULT_GAUSSIAN_SIGMA,
};
use crate::uot::UotParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub kind: CostKind,
    pub alpha: f64,
    pub sigma2_sq: f64,
    pub distance_mode: DistanceMode,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            kind: CostKind::Mahalanobis,
            alpha: DEFAULT_ALPHA,
            sigma2_sq: DEFAULT_SIGMA2_SQ,
            distance_mode: DistanceMode::default(),
        }
    }
}

impl CostConfig {
    pub fn variant(&self) -> CostVariant {
        self.variant_of(self.kind)
    }

    /// Same parameters, another cost family.
    pub fn variant_of(&self, kind: CostKind) -> CostVariant {
        CostVariant::new(kind)
            .with_alpha(self.alpha)
            .with_sigma2_sq(self.sigma2_sq)
            .with_distance_mode(self.distance_mode)
    }
}

/// A compared loss: a bare name (`"mse"`, `"e-mvot"`, `"m-mvot"`, ...) or an
/// object overriding the cost parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantSpec {
    Name(String),
    Detailed(DetailedVariant),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetailedVariant {
    pub loss: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

fn default_variants() -> Vec<VariantSpec> {
    ["mse", "e-mvot", "mv-mvot", "ed-mvot", "m-mvot"]
        .iter()
        .map(|s| VariantSpec::Name(s.to_string()))
        .collect()
}

fn default_trials() -> usize {
    1
}

fn default_gaussian_sigma() -> f64 {
    DEFAULT_GAUSSIAN_SIGMA
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSpec,
    #[serde(default)]
    pub streaks: StreakParams,
    #[serde(default)]
    pub uot: UotParams,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default)]
    pub fit: FitParams,
    #[serde(default)]
    pub eval: EvalParams,
    /// MSE target kernel width, meters.
    #[serde(default = "default_gaussian_sigma")]
    pub gaussian_sigma: f64,
    #[serde(default = "default_variants")]
    pub variants: Vec<VariantSpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

/// Parses and validates a JSON config. Syntax errors become
/// [`Error::Parse`] with a line number; wrong types, unknown keys and invalid
/// values become [`Error::Validation`] naming the dotted key.
pub fn parse_config(text: &str, path: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        if inner.is_data() {
            validation(&key, inner.to_string())
        } else {
            Error::Parse {
                path: path.to_string(),
                line: inner.line(),
                message: inner.to_string(),
            }
        }
    })?;
    de.end().map_err(|e| Error::Parse {
        path: path.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn to_json(config: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn check(ok: bool, key: &str, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(validation(key, msg()))
    }
}

fn positive(v: f64, key: &str) -> Result<()> {
    check(v > 0.0 && v.is_finite(), key, || format!("must be positive and finite, got {v}"))
}

fn non_negative(v: f64, key: &str) -> Result<()> {
    check(v >= 0.0 && v.is_finite(), key, || format!("must be non-negative and finite, got {v}"))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        check(s.grid.rows > 0, "scene.grid.rows", || "must be at least 1".into())?;
        check(s.grid.cols > 0, "scene.grid.cols", || "must be at least 1".into())?;
        positive(s.grid.cell_size, "scene.grid.cell_size")?;
        check(s.grid.origin.iter().all(|v| v.is_finite()), "scene.grid.origin", || {
            "must be finite".into()
        })?;
        for (k, cam) in s.cameras.iter().enumerate() {
            let key = format!("scene.cameras[{k}].position");
            check(cam.position.iter().all(|v| v.is_finite()), &key, || "must be finite".into())?;
            non_negative(cam.height(), &key)?;
            if s.cameras[..k].iter().any(|c| c.id == cam.id) {
                return Err(validation(&format!("scene.cameras[{k}].id"), format!("duplicate camera id {}", cam.id)));
            }
        }
        check(s.num_people >= 1, "scene.num_people", || "must be at least 1".into())?;
        non_negative(s.min_separation, "scene.min_separation")?;
        check((0.0..=1.0).contains(&s.cluster_fraction), "scene.cluster_fraction", || {
            format!("must lie in [0, 1], got {}", s.cluster_fraction)
        })?;

        positive(self.streaks.base_sigma, "streaks.base_sigma")?;
        non_negative(self.streaks.elongation_per_meter, "streaks.elongation_per_meter")?;
        non_negative(self.streaks.noise_std, "streaks.noise_std")?;
        non_negative(self.streaks.clutter_rate, "streaks.clutter_rate")?;

        positive(self.uot.epsilon, "uot.epsilon")?;
        non_negative(self.uot.tau, "uot.tau")?;
        check(self.uot.max_iters >= 1, "uot.max_iters", || "must be at least 1".into())?;
        positive(self.uot.tolerance, "uot.tolerance")?;

        non_negative(self.cost.alpha, "cost.alpha")?;
        check(self.cost.sigma2_sq >= 1.0 && self.cost.sigma2_sq.is_finite(), "cost.sigma2_sq", || {
            format!("must be at least 1, got {}", self.cost.sigma2_sq)
        })?;

        positive(self.fit.step_size, "fit.step_size")?;
        check(self.fit.iterations >= 1, "fit.iterations", || "must be at least 1".into())?;
        if let Some(v) = self.fit.mse_step_size {
            positive(v, "fit.mse_step_size")?;
        }

        positive(self.eval.threshold, "eval.threshold")?;
        check(
            self.eval.nms_rel_threshold > 0.0 && self.eval.nms_rel_threshold <= 1.0,
            "eval.nms_rel_threshold",
            || format!("must lie in (0, 1], got {}", self.eval.nms_rel_threshold),
        )?;
        check(self.eval.nms_radius >= 1, "eval.nms_radius", || "must be at least 1".into())?;

        positive(self.gaussian_sigma, "gaussian_sigma")?;
        check(self.trials >= 1, "trials", || "must be at least 1".into())?;
        check(!self.variants.is_empty(), "variants", || "must list at least one loss".into())?;
        let variants = self.labeled_variants()?;
        for (k, v) in variants.iter().enumerate() {
            if variants[..k].iter().any(|o| o.label == v.label) {
                return Err(validation(&format!("variants[{k}]"), format!("duplicate label {}", v.label)));
            }
            if let LossVariant::Uot(cv) = &v.loss {
                if cv.kind.needs_cameras() && s.cameras.is_empty() {
                    return Err(validation("scene.cameras", format!("{} needs at least one camera", v.label)));
                }
            }
        }
        Ok(())
    }

    /// Resolves the variant list against the `cost` block.
    pub fn labeled_variants(&self) -> Result<Vec<LabeledVariant>> {
        self.variants
            .iter()
            .enumerate()
            .map(|(k, spec)| {
                let key = format!("variants[{k}]");
                let (name, alpha, sigma2_sq, label) = match spec {
                    VariantSpec::Name(n) => (n.as_str(), None, None, None),
                    VariantSpec::Detailed(d) => (d.loss.as_str(), d.alpha, d.sigma2_sq, d.label.clone()),
                };
                if name == "mse" {
                    if alpha.is_some() || sigma2_sq.is_some() {
                        return Err(validation(&key, "mse takes no cost parameters"));
                    }
                    return Ok(LabeledVariant {
                        label: label.unwrap_or_else(|| "mse".into()),
                        loss: LossVariant::Mse,
                    });
                }
                let kind = CostKind::from_loss_name(name)
                    .ok_or_else(|| validation(&format!("{key}.loss"), format!("unknown loss `{name}`")))?;
                let mut cv = self.cost.variant_of(kind);
                if let Some(a) = alpha {
                    non_negative(a, &format!("{key}.alpha"))?;
                    cv = cv.with_alpha(a);
                }
                if let Some(s2) = sigma2_sq {
                    check(s2 >= 1.0 && s2.is_finite(), &format!("{key}.sigma2_sq"), || {
                        format!("must be at least 1, got {s2}")
                    })?;
                    cv = cv.with_sigma2_sq(s2);
                }
                let label = label.unwrap_or_else(|| match (alpha, sigma2_sq) {
                    (None, None) => name.to_string(),
                    (Some(a), None) => format!("{name}@alpha={a}"),
                    (None, Some(s)) => format!("{name}@sigma2_sq={s}"),
                    (Some(a), Some(s)) => format!("{name}@alpha={a},sigma2_sq={s}"),
                });
                Ok(LabeledVariant {
                    label,
                    loss: LossVariant::Uot(cv),
                })
            })
            .collect()
    }

    pub fn comparison_setup(&self) -> ComparisonSetup {
        ComparisonSetup {
            scene: self.scene.clone(),
            streaks: self.streaks,
            uot: self.uot,
            fit: self.fit,
            eval: self.eval,
            gaussian_sigma: self.gaussian_sigma,
            trials: self.trials,
        }
    }
}
