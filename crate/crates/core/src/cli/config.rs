//! Resolved run configuration, named hyperparameter profiles and layering.
//!
//! Layers, lowest first: built-in defaults, the profile named inside the
//! config file, the config file itself, the `--profile` flag, then the
//! remaining command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::correction::CorrectionConfig;
use crate::datamodel::{AnnotationFormat, Layer};
use crate::error::{Error, Result};
use crate::geometry::BoxDistance;
use crate::noise::{NoiseConfig, Sparsity};
use crate::simloop::{ImprovementSchedule, LoopConfig, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Inputs {
    /// Clean dataset for `inject-noise`, dataset to draw for `render`.
    pub input: Option<String>,
    pub targets: Option<String>,
    pub detections: Option<String>,
    pub ground_truth: Option<String>,
    pub predictions: Option<String>,
    pub format: AnnotationFormat,
    /// Side of the boxes built from point annotations.
    pub point_side: f64,
}

impl Default for Inputs {
    fn default() -> Self {
        Inputs {
            input: None,
            targets: None,
            detections: None,
            ground_truth: None,
            predictions: None,
            format: AnnotationFormat::CocoJson,
            point_side: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationOptions {
    pub iterations: usize,
    pub keep_rate: f64,
    pub scene: SceneConfig,
    pub schedule: ImprovementSchedule,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        let l = LoopConfig::default();
        SimulationOptions {
            iterations: l.iterations,
            keep_rate: l.keep_rate,
            scene: l.scene,
            schedule: l.schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    /// Write per-iteration SVGs from `simulate`.
    pub enabled: bool,
    pub layers: Vec<Layer>,
    /// Images drawn per iteration by `simulate`.
    pub max_images: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            enabled: false,
            layers: Layer::ALL.to_vec(),
            max_images: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationOptions {
    /// Predictions below this probability are ignored by the error breakdown.
    pub breakdown_score_floor: f64,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions { breakdown_score_floor: 0.5 }
    }
}

/// Everything a run depends on. Written to `config.json` in the output
/// directory before any processing; passing that file back via `--config`
/// reproduces the run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub profile: Option<String>,
    pub seed: u64,
    pub inputs: Inputs,
    pub noise: NoiseConfig,
    pub correction: CorrectionConfig,
    pub simulation: SimulationOptions,
    pub render: RenderOptions,
    pub evaluation: EvaluationOptions,
}

impl RunConfig {
    /// Reads a (possibly partial) config file and layers it over the
    /// defaults. A `profile` key is applied underneath the file's own values.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        let mut base = RunConfig::default();
        if let Some(name) = over.get("profile").and_then(Value::as_str) {
            base.apply_profile(name)?;
        }
        let mut merged = serde_json::to_value(&base).expect("config serializes");
        merge(&mut merged, over);
        serde_path_to_error::deserialize(merged).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: format!("field `{}`", e.path()),
            message: e.inner().to_string(),
        })
    }

    pub fn apply_profile(&mut self, name: &str) -> Result<()> {
        let p = Profile::find(name)?;
        self.profile = Some(p.name.to_string());
        self.correction.distance_limit = p.distance_limit;
        self.correction.mining_threshold = p.mining_threshold;
        self.correction.temperature = p.temperature;
        self.simulation.keep_rate = p.keep_rate;
        if let Some(side) = p.fixed_size {
            self.correction.fixed_size = Some(side);
            self.correction.distance = BoxDistance::CenterNormalized { norm: side };
            self.inputs.point_side = side;
        }
        if let Some((box_noise, sparsity)) = p.noise {
            self.noise.box_noise = box_noise;
            self.noise.sparsity = sparsity;
        }
        Ok(())
    }

    /// Propagates the run seed into every seeded component.
    pub fn sync_seed(&mut self) {
        self.noise.seed = self.seed;
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            iterations: self.simulation.iterations,
            keep_rate: self.simulation.keep_rate,
            correction: self.correction.clone(),
            noise: self.noise.clone(),
            scene: self.simulation.scene,
            schedule: self.simulation.schedule,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.correction.validate()?;
        if !(self.inputs.point_side > 0.0) {
            return Err(Error::config("point_side must be positive"));
        }
        if !(0.0..=1.0).contains(&self.evaluation.breakdown_score_floor) {
            return Err(Error::config("breakdown_score_floor outside [0, 1]"));
        }
        self.loop_config().validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Deep merge of JSON objects. Tagged enums (objects with a `kind` key)
/// are replaced whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("kind") => {
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

/// Named correction settings for the published benchmark configurations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Profile {
    pub name: &'static str,
    pub distance_limit: Option<f64>,
    pub mining_threshold: Option<f64>,
    pub temperature: f64,
    pub keep_rate: f64,
    pub fixed_size: Option<f64>,
    /// Noise level the profile was tuned for, used by `inject-noise` and `simulate`.
    pub noise: Option<(f64, Sparsity)>,
}

const VOC_KEEP: f64 = 0.9996;
const NWPU_KEEP: f64 = 0.99;

const fn voc(name: &'static str, d: Option<f64>, tau: Option<f64>, nb: f64, ns: Sparsity) -> Profile {
    Profile {
        name,
        distance_limit: d,
        mining_threshold: tau,
        temperature: 0.2,
        keep_rate: VOC_KEEP,
        fixed_size: None,
        noise: Some((nb, ns)),
    }
}

const fn nwpu(name: &'static str, tau: f64) -> Profile {
    Profile {
        name,
        distance_limit: Some(0.6),
        mining_threshold: Some(tau),
        temperature: 0.2,
        keep_rate: NWPU_KEEP,
        fixed_size: None,
        noise: Some((0.4, Sparsity::Extreme)),
    }
}

const HALF: Sparsity = Sparsity::Fraction(0.5);
const NONE: Sparsity = Sparsity::Fraction(0.0);
const EX: Sparsity = Sparsity::Extreme;

pub const PROFILES: &[Profile] = &[
    Profile {
        name: "edmonton",
        distance_limit: Some(0.5),
        mining_threshold: Some(0.8),
        temperature: 0.2,
        keep_rate: 0.95,
        fixed_size: Some(60.0),
        noise: None,
    },
    voc("nb0-s0", Some(0.1), Some(0.95), 0.0, NONE),
    voc("nb0-s50", None, Some(0.9), 0.0, HALF),
    voc("nb0-ex", None, Some(0.8), 0.0, EX),
    voc("nb20-s0", Some(0.35), None, 0.2, NONE),
    voc("nb20-s50", Some(0.35), Some(0.9), 0.2, HALF),
    voc("nb20-ex", Some(0.35), Some(0.8), 0.2, EX),
    voc("nb40-s0", Some(0.6), None, 0.4, NONE),
    voc("nb40-s50", Some(0.6), Some(0.8), 0.4, HALF),
    voc("nb40-ex", Some(0.6), Some(0.8), 0.4, EX),
    nwpu("faster-rcnn", 0.8),
    nwpu("retinanet", 0.4),
    nwpu("fcos", 0.5),
];

impl Profile {
    pub fn find(name: &str) -> Result<&'static Profile> {
        PROFILES.iter().find(|p| p.name == name).ok_or_else(|| {
            let known: Vec<&str> = PROFILES.iter().map(|p| p.name).collect();
            Error::config(format!("unknown profile '{name}' (known: {})", known.join(", ")))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nb40_ex_profile() {
        let mut c = RunConfig::default();
        c.apply_profile("nb40-ex").unwrap();
        assert_eq!(c.correction.distance_limit, Some(0.6));
        assert_eq!(c.correction.mining_threshold, Some(0.8));
        assert_eq!(c.correction.temperature, 0.2);
        assert_eq!(c.noise.sparsity, Sparsity::Extreme);
    }

    #[test]
    fn edmonton_profile() {
        let mut c = RunConfig::default();
        c.apply_profile("edmonton").unwrap();
        assert_eq!(c.correction.distance_limit, Some(0.5));
        assert_eq!(c.correction.mining_threshold, Some(0.8));
        assert_eq!(c.simulation.keep_rate, 0.95);
        assert_eq!(c.correction.fixed_size, Some(60.0));
    }

    #[test]
    fn switched_off_submodules() {
        let mut c = RunConfig::default();
        c.apply_profile("nb0-s50").unwrap();
        assert_eq!(c.correction.distance_limit, None);
        c.apply_profile("nb20-s0").unwrap();
        assert_eq!(c.correction.mining_threshold, None);
    }

    #[test]
    fn unknown_profile() {
        let err = RunConfig::default().apply_profile("voc").unwrap_err().to_string();
        assert!(err.contains("nb40-ex"));
    }

    #[test]
    fn file_layering() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"profile":"nb40-ex","correction":{"mining_threshold":null},"seed":7}"#).unwrap();
        let c = RunConfig::from_file(&p).unwrap();
        assert_eq!(c.correction.distance_limit, Some(0.6));
        assert_eq!(c.correction.mining_threshold, None);
        assert_eq!(c.seed, 7);
        assert_eq!(c.correction.max_iterations, 50);
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut c = RunConfig::default();
        c.apply_profile("edmonton").unwrap();
        c.correction.mining_threshold = Some(0.7);
        c.seed = 3;
        c.sync_seed();
        std::fs::write(&p, c.to_json()).unwrap();
        assert_eq!(RunConfig::from_file(&p).unwrap(), c);
    }

    #[test]
    fn file_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"correction":{"temperature":"hot"}}"#).unwrap();
        let err = RunConfig::from_file(&p).unwrap_err().to_string();
        assert!(err.contains("correction.temperature"), "{err}");
        std::fs::write(&p, r#"{"bogus":1}"#).unwrap();
        assert!(RunConfig::from_file(&p).is_err());
    }
}
