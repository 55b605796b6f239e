//! Run configuration. On disk it is a flat JSON object keyed by dotted
//! names (`"model.dims": [...]`, `"mixer.prenorm": true`); keys that are
//! absent keep their defaults and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Square input extent.
    pub input_size: usize,
    /// Channels between the two patch-embedding convolutions.
    pub embed_hidden: usize,
    /// Working channel width of each of the four stages.
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    /// Square window extent of the local extractors.
    pub window: usize,
    /// Channels per attention head; a stage of width `D` uses
    /// `max(1, D / head_dim)` heads.
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerSection {
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub exact_zoh: bool,
    pub prenorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorSection {
    pub residual: bool,
    pub per_direction_params: bool,
    pub directions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    pub flip_prob: f64,
    pub negate_u: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgcmSection {
    /// Coarse and fine heads; otherwise a single head over the full labels.
    pub enabled: bool,
    pub fine_mean_over_negatives: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelsSection {
    pub full: Vec<String>,
    /// Coarse class of each entry of `full`, position by position.
    pub coarse_map: Vec<String>,
    /// Fine labels under the `negative` coarse class, in head order.
    pub fine: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub cooldown_epochs: usize,
    pub peak_lr: f64,
    /// Cosine floor as a fraction of `peak_lr`.
    pub floor_ratio: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub bn_momentum: f64,
    /// Fraction of training subjects held out for early stopping.
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub mixer: MixerSection,
    pub extractor: ExtractorSection,
    pub augment: AugmentSection,
    pub dgcm: DgcmSection,
    pub labels: LabelsSection,
    pub train: TrainSection,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl LabelsSection {
    /// Seven-class set with contempt as its own coarse class.
    pub fn dfme() -> Self {
        LabelsSection {
            full: strings(&[
                "anger",
                "contempt",
                "disgust",
                "fear",
                "happiness",
                "sadness",
                "surprise",
            ]),
            coarse_map: strings(&[
                "negative", "contempt", "negative", "negative", "positive", "negative", "surprise",
            ]),
            fine: strings(&["anger", "disgust", "fear", "sadness"]),
        }
    }

    /// Six classes without contempt.
    pub fn mmew() -> Self {
        LabelsSection {
            full: strings(&["anger", "disgust", "fear", "happiness", "sadness", "surprise"]),
            coarse_map: strings(&["negative", "negative", "negative", "positive", "negative", "surprise"]),
            fine: strings(&["anger", "disgust", "fear", "sadness"]),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config {
            model: ModelSection {
                input_size: 224,
                embed_hidden: 64,
                dims: [128, 256, 512, 1024],
                depths: [3, 2, 6, 4],
                window: 7,
                head_dim: 64,
                mlp_ratio: 4,
                dropout: 0.1,
            },
            mixer: MixerSection {
                state_dim: 8,
                conv_kernel: 3,
                exact_zoh: false,
                prenorm: true,
            },
            extractor: ExtractorSection {
                residual: true,
                per_direction_params: false,
                directions: strings(&["a", "b", "c", "d"]),
            },
            augment: AugmentSection {
                flip_prob: 0.5,
                negate_u: true,
            },
            dgcm: DgcmSection {
                enabled: true,
                fine_mean_over_negatives: true,
            },
            labels: LabelsSection::dfme(),
            train: TrainSection {
                epochs: 100,
                warmup_epochs: 5,
                cooldown_epochs: 10,
                peak_lr: 5e-4,
                floor_ratio: 1e-2,
                weight_decay: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                batch_size: 32,
                patience: 20,
                bn_momentum: 0.1,
                val_fraction: 0.1,
            },
        }
    }
}

impl Config {
    /// Desk-scale network: 64x64 input, 2x2 windows, widths 16/32/64/64,
    /// one block per stage. Its maps shrink 16 -> 8 -> 4 -> 2 like the full
    /// model's 56 -> 28 -> 14 -> 7, with 16, 4 and 1 windows in stages 2-4.
    pub fn miniature() -> Self {
        let mut cfg = Config::default();
        cfg.model = ModelSection {
            input_size: 64,
            embed_hidden: 8,
            dims: [16, 32, 64, 64],
            depths: [1, 1, 1, 1],
            window: 2,
            head_dim: 64,
            mlp_ratio: 4,
            dropout: 0.1,
        };
        cfg.train.epochs = 200;
        cfg
    }

    /// Named preset (`default`, `miniature`) or a path to a flat JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match spec {
            "default" => Ok(Config::default()),
            "miniature" => Ok(Config::miniature()),
            path => Config::load(path),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_flat_json(&text)
    }

    pub fn from_flat_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(overrides) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        Config::default().with_overrides(&overrides)
    }

    /// Applies dotted-key overrides on top of `self`.
    pub fn with_overrides(&self, overrides: &Map<String, Value>) -> Result<Self> {
        let mut flat = self.to_flat();
        for (key, value) in overrides {
            match flat.get_mut(key) {
                Some(slot) => *slot = value.clone(),
                None => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        let cfg: Config = serde_json::from_value(unflatten(&flat))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        let nested = serde_json::to_value(self).expect("config serializes");
        flatten("", &nested, &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    pub fn heads(&self, stage: usize) -> usize {
        (self.model.dims[stage] / self.model.head_dim).max(1)
    }

    /// Structural checks that do not need any weights.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.input_size == 0 || m.input_size % 4 != 0 {
            return bad(format!(
                "model.input_size {} must be a positive multiple of 4",
                m.input_size
            ));
        }
        if m.dims.contains(&0) || m.embed_hidden == 0 || m.window == 0 || m.head_dim == 0 || m.mlp_ratio == 0 {
            return bad("model widths, window, head_dim and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad(format!("model.dropout {} not in [0, 1)", m.dropout));
        }
        for k in 1..4 {
            if m.dims[k] % 2 != 0 {
                return bad(format!(
                    "model.dims[{k}] = {} must be even for the mixer split",
                    m.dims[k]
                ));
            }
            let heads = self.heads(k);
            if m.dims[k] % heads != 0 {
                return bad(format!("{heads} heads do not divide model.dims[{k}] = {}", m.dims[k]));
            }
        }
        // stage 1 sees input/4, then three stride-2 halvings
        let mut extent = m.input_size / 4;
        for k in 1..4 {
            if extent % 2 != 0 {
                return bad(format!(
                    "stage {k} downsamples a {extent}x{extent} map; model.input_size must be divisible by 32"
                ));
            }
            extent /= 2;
            if extent % m.window != 0 {
                return bad(format!(
                    "stage {} map {extent}x{extent} is not divisible by model.window {}",
                    k + 1,
                    m.window
                ));
            }
        }
        if self.mixer.conv_kernel % 2 == 0 || self.mixer.state_dim == 0 {
            return bad("mixer.conv_kernel must be odd and mixer.state_dim positive".into());
        }
        if self.extractor.directions.is_empty() {
            return bad("extractor.directions must not be empty".into());
        }
        for d in &self.extractor.directions {
            d.parse::<crate::scan::ScanDirection>()
                .map_err(|_| Error::Config(format!("unknown scan direction `{d}`")))?;
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return bad("augment.flip_prob must be in [0, 1]".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.warmup_epochs + t.cooldown_epochs > t.epochs {
            return bad(format!(
                "train.warmup_epochs + train.cooldown_epochs ({}) must not exceed train.epochs ({})",
                t.warmup_epochs + t.cooldown_epochs,
                t.epochs
            ));
        }
        if t.batch_size == 0 || !(0.0..1.0).contains(&t.val_fraction) {
            return bad("train.batch_size must be positive and train.val_fraction in [0, 1)".into());
        }
        crate::dgcm::LabelSpace::from_config(&self.labels)?;
        Ok(())
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("config keys nest consistently");
            }
        }
    }
    Value::Object(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let cfg = Config::miniature();
        assert_eq!(Config::from_flat_json(&cfg.to_flat_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_override_keeps_defaults() {
        let cfg = Config::from_flat_json(r#"{"mixer.prenorm": false, "model.depths": [1, 1, 1, 1]}"#).unwrap();
        assert!(!cfg.mixer.prenorm);
        assert_eq!(cfg.model.depths, [1, 1, 1, 1]);
        assert_eq!(cfg.model.dims, [128, 256, 512, 1024]);
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        assert!(Config::from_flat_json(r#"{"mixer.prenrom": false}"#).is_err());
        assert!(Config::from_flat_json(r#"{"model.window": "seven"}"#).is_err());
        assert!(Config::from_flat_json(r#"[1, 2]"#).is_err());
    }

    #[test]
    fn presets_validate() {
        Config::default().validate().unwrap();
        Config::miniature().validate().unwrap();
        let mut cfg = Config::default();
        cfg.labels = LabelsSection::mmew();
        cfg.validate().unwrap();
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let err = Config::from_flat_json(r#"{"model.input_size": 56, "model.window": 7}"#).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
        assert!(Config::from_flat_json(r#"{"model.window": 5}"#).is_err());
        assert!(Config::from_flat_json(r#"{"train.epochs": 10}"#).is_err());
    }

    #[test]
    fn heads_follow_width() {
        let cfg = Config::default();
        assert_eq!((1..4).map(|k| cfg.heads(k)).collect::<Vec<_>>(), [4, 8, 16]);
        assert_eq!(Config::miniature().heads(1), 1);
    }
}
