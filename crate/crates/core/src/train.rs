//! Episodic training, evaluation and the finite-difference gradient check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EpisodeSampler, FeatureStore, Split};
use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::model::{forward_episode, loss_and_grads, Ablation, ModelConfig, ModelParams};
use crate::rng::SaffRng;
use crate::scorer::DEFAULT_SCORER_HIDDEN;
use crate::slot_attention::{SlotConfig, DEFAULT_NOISE_SCALE};
use crate::tensor::Tensor;

/// Stream domains, xor-ed into the run seed before deriving per-step streams.
pub const INIT_DOMAIN: u64 = 0x1217_0000_0000_0000;
pub const TRAIN_DOMAIN: u64 = 0x7a41_0000_0000_0001;
pub const EVAL_DOMAIN: u64 = 0x3e7a_0000_0000_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes_train: usize,
    pub episodes_eval: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub scorer_hidden: usize,
    pub noise_scale: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes_train: 2000,
            episodes_eval: 1000,
            n_way: 5,
            k_shot: 5,
            q_per_class: 15,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            scorer_hidden: DEFAULT_SCORER_HIDDEN,
            noise_scale: DEFAULT_NOISE_SCALE,
            model: ModelConfig {
                slots: SlotConfig::default(),
                filter: FilterConfig::default(),
                ablation: Ablation::Full,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("q_per_class", self.q_per_class),
            ("episodes_eval", self.episodes_eval),
            ("n_slots", self.model.slots.n_slots),
            ("n_iters", self.model.slots.n_iters),
            ("scorer_hidden", self.scorer_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model.ablation == Ablation::Full && self.model.slots.n_slots < 2 {
            return Err(Error::Config("slot filtering needs at least 2 slots".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("optimizer moments must lie in [0, 1) and eps > 0".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Config(format!("noise_scale {} must be >= 0", self.noise_scale)));
        }
        self.model.filter.validate()
    }

    /// Freshly initialized parameters for a store of the given shape.
    pub fn init_params(&self, n_patches: usize, dim: usize) -> ModelParams {
        let mut rng = SaffRng::new(self.seed ^ INIT_DOMAIN);
        let mut p = ModelParams::init(dim, n_patches, self.scorer_hidden, &mut rng);
        p.slot.noise_scale = self.noise_scale;
        p
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss of every training step.
    pub losses: Vec<f64>,
}

/// One Adam step per episode on the train split.
pub fn train(store: &FeatureStore, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(store, cfg, cfg.init_params(store.n_patches, store.dim))
}

/// Like [`train`], starting from explicit parameters.
pub fn train_from(store: &FeatureStore, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    cfg.validate()?;
    params.check_store(store)?;
    let train_set = store.subset(Split::Train);
    if train_set.is_empty() {
        return Err(Error::InsufficientData("train split is empty".into()));
    }
    let sampler = EpisodeSampler::new(&train_set);
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut losses = Vec::with_capacity(cfg.episodes_train);
    for step in 0..cfg.episodes_train {
        let mut rng = SaffRng::stream(cfg.seed ^ TRAIN_DOMAIN, step as u64);
        let ep = sampler.sample(cfg.n_way, cfg.k_shot, cfg.q_per_class, &mut rng)?;
        let (loss, _, grads) = match loss_and_grads(&train_set, &ep, &params, &cfg.model, &mut rng) {
            Ok(out) => out,
            Err(Error::NonFinite { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        opt.step(&mut params, &grads);
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Predicted class per query column: the argmax, with exact ties broken
/// uniformly at random from `rng`.
pub fn predict(probabilities: &Tensor, rng: &mut SaffRng) -> Vec<usize> {
    let (n, q) = probabilities.dims2();
    (0..q)
        .map(|j| {
            let best = (0..n).map(|i| probabilities.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let tied: Vec<usize> = (0..n).filter(|&i| probabilities.at(i, j) == best).collect();
            if tied.len() == 1 {
                tied[0]
            } else {
                tied[rng.below(tied.len())]
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    /// Mean episode accuracy in percent.
    pub mean_accuracy: f64,
    /// 95% confidence half-width, `1.96 · std / √episodes` (sample std).
    pub ci95: f64,
    pub episode_accuracies: Vec<f64>,
    /// Per-query correctness, episode-major, in query order.
    pub correct: Vec<bool>,
}

impl EvalReport {
    pub fn from_episodes(seed: u64, per_episode: Vec<Vec<bool>>) -> Self {
        let episode_accuracies: Vec<f64> = per_episode
            .iter()
            .map(|c| 100.0 * c.iter().filter(|&&b| b).count() as f64 / c.len() as f64)
            .collect();
        let n = episode_accuracies.len() as f64;
        let mean = episode_accuracies.iter().sum::<f64>() / n;
        let std = if episode_accuracies.len() > 1 {
            (episode_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        EvalReport {
            seed,
            mean_accuracy: mean,
            ci95: 1.96 * std / n.sqrt(),
            episode_accuracies,
            correct: per_episode.into_iter().flatten().collect(),
        }
    }
}

/// Runs `cfg.episodes_eval` test episodes with frozen parameters. Episode
/// `i` draws everything from stream `i` of `cfg.seed ^ EVAL_DOMAIN`, so two
/// models evaluated with the same seed see identical episodes. Episodes are
/// evaluated in parallel and merged in index order.
pub fn evaluate(store: &FeatureStore, params: &ModelParams, cfg: &TrainConfig) -> Result<EvalReport> {
    cfg.validate()?;
    params.check_store(store)?;
    let test_set = store.subset(Split::Test);
    if test_set.is_empty() {
        return Err(Error::InsufficientData("test split is empty".into()));
    }
    let sampler = EpisodeSampler::new(&test_set);
    let per_episode = (0..cfg.episodes_eval)
        .into_par_iter()
        .map(|i| {
            let mut rng = SaffRng::stream(cfg.seed ^ EVAL_DOMAIN, i as u64);
            let ep = sampler.sample(cfg.n_way, cfg.k_shot, cfg.q_per_class, &mut rng)?;
            let (_, scores) = forward_episode(&test_set, &ep, params, &cfg.model, &mut rng)?;
            let preds = predict(&scores.probabilities, &mut rng);
            Ok(preds.iter().zip(&ep.query_labels).map(|(p, l)| p == l).collect())
        })
        .collect::<Result<Vec<Vec<bool>>>>()?;
    Ok(EvalReport::from_episodes(cfg.seed, per_episode))
}

/// Tiny configuration for [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub n_patches: usize,
    pub dim: usize,
    pub n_slots: usize,
    pub n_iters: usize,
    pub noise_scale: f64,
    pub ablation: Ablation,
    pub filter: FilterConfig,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            n_patches: 6,
            dim: 8,
            n_slots: 3,
            n_iters: 2,
            noise_scale: DEFAULT_NOISE_SCALE,
            ablation: Ablation::Full,
            filter: FilterConfig::default(),
            step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `(parameter group, relative error)` for every tensor of the model.
    pub groups: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

/// Compares analytic gradients of a 2-way 1-shot 2-query episode loss with
/// central differences, group by group.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_with(cfg, |_, _| {})
}

/// [`grad_check`] with a hook that may alter each analytic gradient before
/// comparison.
pub fn grad_check_with<F>(cfg: &GradCheckConfig, mut tamper: F) -> Result<GradCheckReport>
where
    F: FnMut(&str, &mut Tensor),
{
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::numeric::{finite_diff_grad, relative_error};

    if cfg.n_patches > 6 || cfg.dim > 8 || cfg.n_slots > 3 || cfg.n_iters > 2 {
        return Err(Error::Config("grad_check is limited to P<=6, D<=8, 3 slots, 2 iterations".into()));
    }
    let store = generate_synthetic(&SynthConfig {
        n_classes: 2,
        val_classes: 0,
        test_classes: 0,
        images_per_class: 3,
        n_patches: cfg.n_patches,
        dim: cfg.dim,
        relevant_fraction: 0.5,
        signal_noise: 0.5,
        background_noise: 1.0,
        seed: cfg.seed,
    })?;
    let mut rng = SaffRng::new(cfg.seed ^ INIT_DOMAIN);
    let mut params = ModelParams::init(cfg.dim, cfg.n_patches, 16, &mut rng);
    params.slot.noise_scale = cfg.noise_scale;
    // move every tensor off its structured initial value (zero head, unit
    // gains) so each gradient path is exercised
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let model = ModelConfig {
        slots: SlotConfig {
            n_slots: cfg.n_slots,
            n_iters: cfg.n_iters,
        },
        filter: cfg.filter,
        ablation: cfg.ablation,
    };
    let ep = EpisodeSampler::new(&store).sample(2, 1, 2, &mut rng)?;
    let noise_seed = cfg.seed ^ TRAIN_DOMAIN;

    let (_, _, analytic) = loss_and_grads(&store, &ep, &params, &model, &mut SaffRng::new(noise_seed))?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut groups = Vec::with_capacity(names.len());
    for (idx, (name, mut grad)) in names.into_iter().zip(analytic).enumerate() {
        tamper(&name, &mut grad);
        let original = params.named()[idx].1.clone();
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |x| {
                *probe.tensors_mut()[idx] = x.clone();
                forward_episode(&store, &ep, &probe, &model, &mut SaffRng::new(noise_seed))
                    .map(|(loss, _)| loss)
                    .unwrap_or(f64::NAN)
            },
            &original,
            cfg.step,
        );
        groups.push((name, relative_error(&grad, &numeric)));
    }
    let max_relative_error = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_relative_error,
    })
}
