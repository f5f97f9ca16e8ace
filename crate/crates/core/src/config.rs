//! Run configuration: `key = value` files plus command-line overrides.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are an
//! error. [`RunConfig::render`] prints every key, so its output can be fed
//! back in as a config file.

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                s.seed = t.seed;
            }
            "episodes_train" => t.episodes_train = parse(key, value)?,
            "episodes_eval" => t.episodes_eval = parse(key, value)?,
            "n_way" => t.n_way = parse(key, value)?,
            "k_shot" => t.k_shot = parse(key, value)?,
            "q_per_class" => t.q_per_class = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "scorer_hidden" => t.scorer_hidden = parse(key, value)?,
            "noise_scale" => t.noise_scale = parse(key, value)?,
            "n_slots" => t.model.slots.n_slots = parse(key, value)?,
            "n_iters" => t.model.slots.n_iters = parse(key, value)?,
            "threshold" => t.model.filter.threshold = parse(key, value)?,
            "lambda" => t.model.filter.lambda = parse(key, value)?,
            "mask_mode" => t.model.filter.mask_mode = value.parse()?,
            "ablation" => t.model.ablation = value.parse()?,
            "n_classes" => s.n_classes = parse(key, value)?,
            "val_classes" => s.val_classes = parse(key, value)?,
            "test_classes" => s.test_classes = parse(key, value)?,
            "images_per_class" => s.images_per_class = parse(key, value)?,
            "n_patches" => s.n_patches = parse(key, value)?,
            "dim" => s.dim = parse(key, value)?,
            "relevant_fraction" => s.relevant_fraction = parse(key, value)?,
            "signal_noise" => s.signal_noise = parse(key, value)?,
            "background_noise" => s.background_noise = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn render(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("episodes_train", t.episodes_train.to_string()),
            ("episodes_eval", t.episodes_eval.to_string()),
            ("n_way", t.n_way.to_string()),
            ("k_shot", t.k_shot.to_string()),
            ("q_per_class", t.q_per_class.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("scorer_hidden", t.scorer_hidden.to_string()),
            ("noise_scale", t.noise_scale.to_string()),
            ("n_slots", t.model.slots.n_slots.to_string()),
            ("n_iters", t.model.slots.n_iters.to_string()),
            ("threshold", t.model.filter.threshold.to_string()),
            ("lambda", t.model.filter.lambda.to_string()),
            ("mask_mode", t.model.filter.mask_mode.to_string()),
            ("ablation", t.model.ablation.to_string()),
            ("n_classes", s.n_classes.to_string()),
            ("val_classes", s.val_classes.to_string()),
            ("test_classes", s.test_classes.to_string()),
            ("images_per_class", s.images_per_class.to_string()),
            ("n_patches", s.n_patches.to_string()),
            ("dim", s.dim.to_string()),
            ("relevant_fraction", s.relevant_fraction.to_string()),
            ("signal_noise", s.signal_noise.to_string()),
            ("background_noise", s.background_noise.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()
    }
}
