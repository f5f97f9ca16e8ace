//! The full episode pipeline: slot attention and filtering per image, then
//! dense pair scoring, shot aggregation, class probabilities and loss.

use serde::{Deserialize, Serialize};

use crate::data::{Episode, FeatureStore, ImageFeatures};
use crate::error::{Error, Result};
use crate::filter::{class_aware_add_graph, filter_graph, FilterConfig};
use crate::graph::{Graph, Var};
use crate::rng::SaffRng;
use crate::scorer::{score_all_graph, EpisodeScores, ScorerParams, ScorerVars};
use crate::slot_attention::{run_graph, SlotAttentionParams, SlotAttentionVars, SlotConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Skip slot attention and filtering: `F = embeddings + λ·class_token`.
    NoFilter,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_filter" => Ok(Ablation::NoFilter),
            other => Err(Error::Config(format!("ablation must be full or no_filter, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoFilter => "no_filter",
        })
    }
}

/// Forward-pass settings that do not change parameter shapes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub slots: SlotConfig,
    pub filter: FilterConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            slots: SlotConfig::default(),
            filter: FilterConfig::default(),
            ablation: Ablation::Full,
        }
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub slot: SlotAttentionParams,
    pub scorer: ScorerParams,
}

impl ModelParams {
    pub fn init(dim: usize, n_patches: usize, scorer_hidden: usize, rng: &mut SaffRng) -> Self {
        let slot = SlotAttentionParams::init(dim, rng);
        let scorer = ScorerParams::init(n_patches, scorer_hidden, rng);
        ModelParams { slot, scorer }
    }

    pub fn dim(&self) -> usize {
        self.slot.dim()
    }

    /// Patch count implied by the scorer input width.
    pub fn n_patches(&self) -> usize {
        (self.scorer.input_width() as f64).sqrt().round() as usize
    }

    /// `(group name, tensor)` in a fixed order shared by [`Self::tensors_mut`]
    /// and [`ModelVars::vars`].
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> =
            self.slot.named().into_iter().map(|(n, t)| (format!("slot.{n}"), t)).collect();
        out.extend(self.scorer.named().into_iter().map(|(n, t)| (format!("scorer.{n}"), t)));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.slot.tensors_mut();
        out.extend(self.scorer.tensors_mut());
        out
    }

    pub fn check_store(&self, store: &FeatureStore) -> Result<()> {
        if store.dim != self.dim() || store.n_patches * store.n_patches != self.scorer.input_width() {
            return Err(Error::dim(
                "model",
                format!(
                    "store is P={} D={}, parameters expect P={} D={}",
                    store.n_patches,
                    store.dim,
                    self.n_patches(),
                    self.dim()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub slot: SlotAttentionVars,
    pub scorer: ScorerVars,
}

impl ModelVars {
    pub fn bind(g: &mut Graph, p: &ModelParams) -> Self {
        ModelVars {
            slot: SlotAttentionVars::bind(g, &p.slot),
            scorer: ScorerVars::bind(g, &p.scorer),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = self.slot.vars();
        out.extend(self.scorer.vars());
        out
    }
}

/// Graph handles of one episode's forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeVars {
    pub loss: Var,
    pub pair_scores: Var,
    pub class_scores: Var,
    pub probabilities: Var,
}

/// Refined patch features of one image.
pub fn refine_image(
    g: &mut Graph,
    img: &ImageFeatures,
    vars: &ModelVars,
    cfg: &ModelConfig,
    rng: &mut SaffRng,
) -> Result<Var> {
    let x = g.constant(img.patches.clone());
    match cfg.ablation {
        Ablation::NoFilter => class_aware_add_graph(g, x, &img.class_token, cfg.filter.lambda),
        Ablation::Full => {
            let state = run_graph(g, x, &img.class_token, cfg.slots, &vars.slot, rng)?;
            let out = filter_graph(g, x, &img.class_token, state.slots, state.attention, &cfg.filter)?;
            Ok(out.refined)
        }
    }
}

/// Records the whole episode on `g`. Slot jitter is drawn from `rng`,
/// support images first, then queries.
pub fn forward_graph(
    g: &mut Graph,
    store: &FeatureStore,
    ep: &Episode,
    vars: &ModelVars,
    cfg: &ModelConfig,
    rng: &mut SaffRng,
) -> Result<EpisodeVars> {
    let mut support = Vec::with_capacity(ep.support.len());
    for img in ep.support_images(store) {
        support.push(refine_image(g, img, vars, cfg, rng)?);
    }
    let mut query = Vec::with_capacity(ep.query.len());
    for img in ep.query_images(store) {
        query.push(refine_image(g, img, vars, cfg, rng)?);
    }
    let pair_scores = score_all_graph(g, &support, &query, &vars.scorer)?;
    let class_scores = g.group_sum_rows(pair_scores, ep.k_shot)?;
    let probabilities = g.softmax(class_scores, 0)?;
    let loss = g.cross_entropy(probabilities, &ep.query_labels)?;
    g.check_finite()?;
    Ok(EpisodeVars {
        loss,
        pair_scores,
        class_scores,
        probabilities,
    })
}

fn scores_of(g: &Graph, out: &EpisodeVars) -> EpisodeScores {
    EpisodeScores {
        pair_scores: g.value(out.pair_scores).clone(),
        class_scores: g.value(out.class_scores).clone(),
        probabilities: g.value(out.probabilities).clone(),
    }
}

/// Loss and score tables of one episode.
pub fn forward_episode(
    store: &FeatureStore,
    ep: &Episode,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut SaffRng,
) -> Result<(f64, EpisodeScores)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params);
    let out = forward_graph(&mut g, store, ep, &vars, cfg, rng)?;
    Ok((g.value(out.loss).item(), scores_of(&g, &out)))
}

/// Loss, scores, and the gradient of the loss w.r.t. every tensor of
/// [`ModelParams::named`], in that order.
pub fn loss_and_grads(
    store: &FeatureStore,
    ep: &Episode,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut SaffRng,
) -> Result<(f64, EpisodeScores, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = ModelVars::bind(&mut g, params);
    let out = forward_graph(&mut g, store, ep, &vars, cfg, rng)?;
    let grads = g.backward(out.loss)?;
    let per_param = vars.vars().into_iter().map(|v| grads.get(v)).collect();
    Ok((g.value(out.loss).item(), scores_of(&g, &out), per_param))
}
