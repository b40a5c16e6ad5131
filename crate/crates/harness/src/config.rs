//! Run configuration: one strict JSON document plus dotted `key=value`
//! overrides.

use std::path::Path;

use ashnet_core::model::{ModelConfig, VisualMode};
use ashnet_tensor::optim::Hyper;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub size: usize,
    pub clusters: usize,
    /// Fraction of pairs, taken from the highest ids, held out from training.
    pub holdout_fraction: f64,
    /// Held-out pairs scored by retrieval evaluation.
    pub eval_pairs: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 512,
            clusters: 8,
            holdout_fraction: 0.2,
            eval_pairs: 64,
        }
    }
}

impl DatasetConfig {
    /// `(train ids, evaluation ids)`.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let held = ((self.size as f64) * self.holdout_fraction).round() as usize;
        let train_end = self.size - held;
        let eval_end = (train_end + self.eval_pairs).min(self.size);
        ((0..train_end).collect(), (train_end..eval_end).collect())
    }
}

/// One optimizer per parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub cnn: Hyper,
    pub snn: Hyper,
    pub collector: Hyper,
    pub fusion: Hyper,
    pub transformer: Hyper,
    pub align: Hyper,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let h = Hyper::adamw(1e-3, 0.01);
        OptimConfig {
            cnn: h,
            snn: h,
            collector: h,
            fusion: h,
            transformer: h,
            align: h,
        }
    }
}

impl OptimConfig {
    pub fn groups(&self) -> [(&'static str, &Hyper); 6] {
        [
            ("cnn", &self.cnn),
            ("snn", &self.snn),
            ("collector", &self.collector),
            ("fusion", &self.fusion),
            ("transformer", &self.transformer),
            ("align", &self.align),
        ]
    }
}

/// Per-epoch multiplier applied to every group's base learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 at the first epoch down to `floor` at the last.
    Cosine { floor: f64 },
    /// Divides by `factor` at each listed 1-based epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    /// Multiplier for 1-based `epoch` out of `total`.
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { floor } => {
                let progress = if total > 1 {
                    (epoch - 1) as f64 / (total - 1) as f64
                } else {
                    0.0
                };
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            LrSchedule::Step { milestones, factor } => {
                factor.powi(-(milestones.iter().filter(|&&m| epoch >= m).count() as i32))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub retrieve_count: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub optim: OptimConfig,
    pub lr_schedule: LrSchedule,
    /// Writes `plan_epochN.json` for every epoch.
    pub dump_plans: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            retrieve_count: 16,
            epochs: 20,
            warmup_epochs: 2,
            optim: OptimConfig::default(),
            lr_schedule: LrSchedule::Constant,
            dump_plans: false,
        }
    }
}

/// Axes of a sweep; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub time_window: Vec<usize>,
    pub retrieve_count: Vec<usize>,
    pub sr_mode: Vec<VisualMode>,
    pub collector_enabled: Vec<bool>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `path.to.key=value` overrides. Values parse as JSON when they
    /// can and as plain strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| HarnessError::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let d = &self.dataset;
        if d.size < 2 {
            return bad(format!("dataset.size must be >= 2, got {}", d.size));
        }
        if d.clusters == 0 || d.clusters > 48 {
            return bad(format!("dataset.clusters must be in 1..=48, got {}", d.clusters));
        }
        if !(0.0..1.0).contains(&d.holdout_fraction) {
            return bad(format!("dataset.holdout_fraction must be in [0, 1), got {}", d.holdout_fraction));
        }
        let (train, eval) = d.split();
        if train.len() < 2 || eval.is_empty() {
            return bad(format!(
                "dataset split leaves {} train and {} eval pairs",
                train.len(),
                eval.len()
            ));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return bad(format!("train.batch_size must be >= 2, got {}", t.batch_size));
        }
        if t.retrieve_count == 0 || t.retrieve_count > t.batch_size {
            return bad(format!(
                "train.retrieve_count must be in 1..=batch_size ({}), got {}",
                t.batch_size, t.retrieve_count
            ));
        }
        if t.warmup_epochs >= t.epochs {
            return bad(format!(
                "train.warmup_epochs ({}) must be less than train.epochs ({})",
                t.warmup_epochs, t.epochs
            ));
        }
        match &t.lr_schedule {
            LrSchedule::Cosine { floor } if !(0.0..=1.0).contains(floor) => {
                return bad(format!("train.lr_schedule.floor must be in [0, 1], got {floor}"));
            }
            LrSchedule::Step { factor, .. } if *factor < 1.0 => {
                return bad(format!("train.lr_schedule.factor must be >= 1, got {factor}"));
            }
            _ => {}
        }
        for (g, h) in t.optim.groups() {
            h.validate().map_err(|e| HarnessError::Config(format!("train.optim.{g}: {e}")))?;
        }
        if self.model.image_channels != crate::data::CHANNELS {
            return bad("model.image_channels must be 3 for the synthetic data".into());
        }
        self.model
            .validate()
            .map_err(|e| HarnessError::Config(format!("model: {e}")))?;
        for &phi in &self.sweep.retrieve_count {
            if phi == 0 || phi > t.batch_size {
                return bad(format!("sweep.retrieve_count entry {phi} outside 1..={}", t.batch_size));
            }
        }
        if self.sweep.time_window.contains(&0) {
            return bad("sweep.time_window entries must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn default_split() {
        let (train, eval) = DatasetConfig::default().split();
        assert_eq!(train.len(), 410);
        assert_eq!(eval, (410..474).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_keys_rejected() {
        let e = RunConfig::from_json(r#"{"train": {"batch_sise": 4}}"#).unwrap_err();
        assert!(e.to_string().contains("batch_sise"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::default().with_overrides(&["train.nope=1"]).is_err());
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::default()
            .with_overrides(&["model.time_window=5", "model.sr_mode=snn_only", "train.optim.snn.lr=0.01", "seed=9"])
            .unwrap();
        assert_eq!(cfg.model.time_window, 5);
        assert_eq!(cfg.model.visual_mode, VisualMode::SnnOnly);
        assert_eq!(cfg.train.optim.snn.lr(), 0.01);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn schedule_factors() {
        let c = LrSchedule::Cosine { floor: 0.1 };
        assert_eq!(c.factor(1, 20), 1.0);
        assert!((c.factor(20, 20) - 0.1).abs() < 1e-15);
        let s = LrSchedule::Step {
            milestones: vec![25, 35],
            factor: 10.0,
        };
        assert_eq!(s.factor(24, 40), 1.0);
        assert_eq!(s.factor(25, 40), 0.1);
        assert!((s.factor(40, 40) - 0.01).abs() < 1e-18);
    }

    #[test]
    fn field_level_messages() {
        let e = RunConfig::default()
            .with_overrides(&["train.retrieve_count=32"])
            .unwrap_err();
        assert!(e.to_string().contains("train.retrieve_count"), "{e}");
        let e = RunConfig::default().with_overrides(&["train.warmup_epochs=20"]).unwrap_err();
        assert!(e.to_string().contains("warmup_epochs"), "{e}");
        let e = RunConfig::default().with_overrides(&["model.patch=7"]).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
