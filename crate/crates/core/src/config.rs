//! File-driven experiment configuration.
//!
//! One TOML file describes a whole experiment: the model profile, the
//! cluster, the resilience strategy, the churn source, the stop rule, and
//! batch settings. Scalar fields can be overridden from the command line
//! with dotted paths (`churn.synthetic.seed=9`); overrides are applied to
//! the parsed TOML tree before deserialization, so a value set either way
//! goes through identical validation.
//!
//! Relative paths inside a config (a trace file, a profile file) resolve
//! against the directory containing the config file.

use crate::churn::{load_trace, ChurnModel};
use crate::profile::{presets, ClusterSpec, ModelProfile};
use crate::resilience::Strategy;
use crate::sim::{ChurnSource, InstanceClass, SimParams, StopRule};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn bad(path: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        path: path.into(),
        message: message.into(),
    }
}

/// Names either a built-in profile or a TOML file holding a
/// [`ModelProfile`]; exactly one must be set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileRef {
    pub preset: Option<String>,
    pub path: Option<PathBuf>,
}

/// Built-in profile names accepted by `profile.preset`.
pub const PROFILE_PRESETS: &[&str] = &[
    "bert_like",
    "imbalanced_eight_stage",
    "two_stage_imbalanced",
];

impl ProfileRef {
    pub fn validate(&self) -> Result<()> {
        match (&self.preset, &self.path) {
            (Some(_), Some(_)) => Err(bad("profile", "set either preset or path, not both")),
            (None, None) => Err(bad("profile", "one of preset or path is required")),
            (Some(name), None) if !PROFILE_PRESETS.contains(&name.as_str()) => Err(bad(
                "profile.preset",
                format!("unknown preset `{name}`, expected one of {PROFILE_PRESETS:?}"),
            )),
            _ => Ok(()),
        }
    }

    /// Loads the referenced profile; `base_dir` anchors a relative path.
    pub fn resolve(&self, base_dir: &Path) -> Result<ModelProfile> {
        self.validate()?;
        let profile = match (&self.preset, &self.path) {
            (Some(name), None) => match name.as_str() {
                "bert_like" => presets::bert_like(),
                "imbalanced_eight_stage" => presets::imbalanced_eight_stage(),
                "two_stage_imbalanced" => presets::two_stage_imbalanced(1.0),
                _ => unreachable!("validated above"),
            },
            (None, Some(path)) => {
                let full = base_dir.join(path);
                let text = std::fs::read_to_string(&full).map_err(|e| Error::io(full.display().to_string(), e))?;
                toml::from_str(&text)
                    .map_err(|e| bad("profile.path", format!("{}: {e}", full.display())))?
            }
            _ => unreachable!("validated above"),
        };
        profile.validate()?;
        Ok(profile)
    }
}

/// Synthetic churn settings; field defaults match [`ChurnModel::default`].
/// The zone count always follows the cluster's zone list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticChurn {
    /// Generator seed; required (replicas derive their own seeds from it).
    pub seed: Option<u64>,
    pub hourly_preemption_probability: f64,
    pub bulk_mean: f64,
    pub same_zone_probability: f64,
    pub allocation_lag_mean_s: f64,
}

impl Default for SyntheticChurn {
    fn default() -> Self {
        let m = ChurnModel::default();
        SyntheticChurn {
            seed: None,
            hourly_preemption_probability: m.hourly_preemption_probability,
            bulk_mean: m.bulk_mean,
            same_zone_probability: m.same_zone_probability,
            allocation_lag_mean_s: m.allocation_lag_mean_s,
        }
    }
}

impl SyntheticChurn {
    pub fn model(&self, zone_count: usize) -> Result<ChurnModel> {
        let model = ChurnModel {
            hourly_preemption_probability: self.hourly_preemption_probability,
            bulk_mean: self.bulk_mean,
            same_zone_probability: self.same_zone_probability,
            allocation_lag_mean_s: self.allocation_lag_mean_s,
            zone_count,
        };
        model.validate()?;
        Ok(model)
    }
}

/// Exactly one churn source: a synthetic model or a recorded trace file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChurnSection {
    pub synthetic: Option<SyntheticChurn>,
    pub trace: Option<PathBuf>,
}

impl ChurnSection {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.trace) {
            (Some(_), Some(_)) => Err(bad("churn", "set either synthetic or trace, not both")),
            (None, None) => Err(bad("churn", "one of synthetic or trace is required")),
            (Some(s), None) => {
                if s.seed.is_none() {
                    return Err(bad("churn.synthetic.seed", "required for synthetic churn"));
                }
                // Bounds check with a placeholder zone count; the real one
                // comes from the cluster at resolve time.
                s.model(1).map(|_| ())
            }
            (None, Some(_)) => Ok(()),
        }
    }

    /// Builds the simulator's churn source; `base_dir` anchors a relative
    /// trace path and `zone_count` pins the synthetic model's zones.
    pub fn resolve(&self, base_dir: &Path, zone_count: usize) -> Result<ChurnSource> {
        self.validate()?;
        match (&self.synthetic, &self.trace) {
            (Some(s), None) => Ok(ChurnSource::Synthetic {
                model: s.model(zone_count)?,
                seed: s.seed.expect("validated above"),
            }),
            (None, Some(path)) => {
                let full = base_dir.join(path);
                Ok(ChurnSource::Trace(load_trace(&full)?))
            }
            _ => unreachable!("validated above"),
        }
    }
}

fn default_replicas() -> usize {
    200
}

fn default_probabilities() -> Vec<f64> {
    vec![0.01, 0.05, 0.10, 0.25, 0.50]
}

/// Run-shape settings shared by the commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub instance_class: InstanceClass,
    /// Pure data parallelism instead of pipeline parallelism.
    pub data_parallel: bool,
    /// Replicas per probability for the batch command.
    pub replicas: usize,
    /// Preemption probabilities the batch command sweeps.
    pub probabilities: Vec<f64>,
    /// Output directory; a timestamped directory under the output root is
    /// created when absent.
    pub output_dir: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            instance_class: InstanceClass::default(),
            data_parallel: false,
            replicas: default_replicas(),
            probabilities: default_probabilities(),
            output_dir: None,
        }
    }
}

impl RunSection {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(bad("run.replicas", "must be at least 1"));
        }
        if self.probabilities.is_empty() {
            return Err(bad("run.probabilities", "must list at least one probability"));
        }
        for (i, p) in self.probabilities.iter().enumerate() {
            if !(0.0..=1.0).contains(p) {
                return Err(bad(
                    &format!("run.probabilities[{i}]"),
                    format!("{p} must be within [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// The whole experiment file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: ProfileRef,
    /// Defaults to the calibrated large-model cluster when omitted.
    #[serde(default = "presets::bert_cluster")]
    pub cluster: ClusterSpec,
    pub strategy: Strategy,
    pub churn: ChurnSection,
    pub stop: StopRule,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub params: SimParams,
}

impl ExperimentConfig {
    /// Structural validation; does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.cluster.validate()?;
        self.strategy.validate()?;
        self.churn.validate()?;
        self.stop.validate()?;
        self.run.validate()?;
        self.params.validate()?;
        if self.run.data_parallel && self.strategy == Strategy::SampleDrop {
            return Err(bad(
                "strategy",
                "sample_drop needs pipeline parallelism to name a broken pipeline",
            ));
        }
        Ok(())
    }

    /// Loads every referenced file and returns the ready-to-run pieces.
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        self.validate()?;
        let profile = self.profile.resolve(base_dir)?;
        let churn = self.churn.resolve(base_dir, self.cluster.zones.len())?;
        Ok(Experiment {
            profile,
            cluster: self.cluster.clone(),
            strategy: self.strategy,
            stop: self.stop,
            instance_class: self.run.instance_class,
            data_parallel: self.run.data_parallel,
            churn,
            replicas: self.run.replicas,
            probabilities: self.run.probabilities.clone(),
            output_dir: self.run.output_dir.clone(),
            params: self.params.clone(),
        })
    }
}

/// A config with every file reference loaded, ready for the run loop.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub profile: ModelProfile,
    pub cluster: ClusterSpec,
    pub strategy: Strategy,
    pub stop: StopRule,
    pub instance_class: InstanceClass,
    pub data_parallel: bool,
    pub churn: ChurnSource,
    pub replicas: usize,
    pub probabilities: Vec<f64>,
    pub output_dir: Option<PathBuf>,
    pub params: SimParams,
}

/// Reads, overrides, deserializes, and validates a config file.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text, overrides)
}

/// [`load_config`] for in-memory text.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut tree: toml::Value =
        toml::from_str(text).map_err(|e| bad("config", e.message().to_string()))?;
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let config: ExperimentConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| bad("config", e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Applies one `dotted.path=value` override to a parsed TOML tree,
/// creating intermediate tables as needed. The value parses as TOML
/// (numbers, booleans, arrays, quoted strings); anything unparseable is
/// taken as a bare string.
pub fn apply_override(tree: &mut toml::Value, spec: &str) -> Result<()> {
    let Some((path, raw)) = spec.split_once('=') else {
        return Err(bad("--set", format!("`{spec}` is not of the form key.path=value")));
    };
    let path = path.trim();
    if path.is_empty() || path.split('.').any(|p| p.is_empty()) {
        return Err(bad("--set", format!("`{spec}` has an empty path segment")));
    }
    let leaf = parse_scalar(raw.trim());
    let mut node = tree;
    let segments: Vec<&str> = path.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| bad(path, format!("`{segment}` is not a table")))?;
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let last = segments.last().expect("non-empty path");
    node.as_table_mut()
        .ok_or_else(|| bad(path, "parent is not a table".to_string()))?
        .insert(last.to_string(), leaf);
    Ok(())
}

fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|v| v.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
