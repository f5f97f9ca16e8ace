//! Class-aware slot filtering and attention-weighted re-embedding.
//!
//! Refined slots are compared with the class token by cosine similarity,
//! min-max normalized, and thresholded into a binary slot mask. The
//! attention rows of the surviving slots are averaged into one per-patch
//! weight, the patch embeddings are scaled by it, and the λ-scaled class
//! token is added to every patch.
//!
//! The slot mask is a hard selection: it is computed from values and enters
//! the graph as a constant, so no gradient flows through it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::slot_attention::SlotState;
use crate::tensor::{l2_normalize, Tensor, L2_EPS};

/// Below this spread the similarities are treated as tied.
pub const DEGENERATE_SPREAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Patches scaled by the combined attention.
    Weighted,
    /// Patches kept (×1) when their combined attention exceeds half of the
    /// maximum, dropped (×0) otherwise.
    Binary,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(MaskMode::Weighted),
            "binary" => Ok(MaskMode::Binary),
            other => Err(Error::Config(format!("mask mode must be binary or weighted, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Weighted => "weighted",
            MaskMode::Binary => "binary",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    pub mask_mode: MaskMode,
    pub lambda: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            threshold: 0.5,
            mask_mode: MaskMode::Weighted,
            lambda: 2.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub similarity: Tensor,
    pub similarity_norm: Tensor,
    pub mask: Tensor,
    pub n_passing: usize,
    pub combined: Tensor,
    pub weighted_embeddings: Tensor,
    pub refined: Tensor,
}

/// Cosine similarity of every slot with the class token.
pub fn slot_similarity(slots: &Tensor, class_token: &Tensor) -> Result<Tensor> {
    let (n, d) = slots.dims2();
    if class_token.len() != d {
        return Err(Error::dim("slot_similarity", format!("slots D={d}, token D={}", class_token.len())));
    }
    let s_hat = l2_normalize(slots, slots.rank() - 1, L2_EPS)?;
    let c_hat = l2_normalize(class_token, 0, L2_EPS)?;
    let sims = (0..n)
        .map(|i| s_hat.row(i).iter().zip(c_hat.data()).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::from_parts(vec![n], sims))
}

/// `(x − min) / (max − min)`; all ones when the values are tied.
pub fn minmax_normalize(similarity: &Tensor) -> Result<Tensor> {
    if similarity.len() < 2 {
        return Err(Error::usage("min-max normalization needs at least two slots"));
    }
    let min = similarity.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = similarity.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = max - min;
    if spread < DEGENERATE_SPREAD {
        return Ok(Tensor::ones(similarity.shape()));
    }
    Ok(similarity.map(|x| (x - min) / spread))
}

/// `M_i = 1` iff `similarity_norm_i > threshold`; returns the mask and its
/// count.
pub fn make_mask(similarity_norm: &Tensor, threshold: f64) -> (Tensor, usize) {
    let mask = similarity_norm.map(|x| if x > threshold { 1.0 } else { 0.0 });
    let count = mask.data().iter().filter(|&&m| m == 1.0).count();
    (mask, count)
}

pub fn combine_attention_graph(g: &mut Graph, attention: Var, mask: &Tensor, n_passing: usize) -> Result<Var> {
    if n_passing == 0 {
        return Err(Error::usage("combine_attention: no slot passed the mask"));
    }
    let m = g.constant(mask.clone());
    let masked = g.mul_rows(attention, m)?;
    let total = g.sum_axis(masked, 0)?;
    Ok(g.scale(total, 1.0 / n_passing as f64))
}

/// Mean of the masked slot-attention rows: `Σ_s (A ⊙ M)[s] / N_M`.
pub fn combine_attention(attention: &Tensor, mask: &Tensor, n_passing: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let a = g.constant(attention.clone());
    let out = combine_attention_graph(&mut g, a, mask, n_passing)?;
    Ok(g.value(out).clone())
}

/// Per-patch scale factors for binary mode.
pub fn binary_weights(combined: &Tensor) -> Tensor {
    let max = combined.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    combined.map(|a| if a > 0.5 * max { 1.0 } else { 0.0 })
}

pub fn apply_filter_graph(g: &mut Graph, embeddings: Var, combined: Var, mode: MaskMode) -> Result<Var> {
    let scales = match mode {
        MaskMode::Weighted => combined,
        MaskMode::Binary => {
            let w = binary_weights(g.value(combined));
            g.constant(w)
        }
    };
    g.mul_rows(embeddings, scales)
}

/// Scales patch row p by the combined attention (weighted) or by its
/// binarization (binary).
pub fn apply_filter(embeddings: &Tensor, combined: &Tensor, mode: MaskMode) -> Result<Tensor> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let c = g.constant(combined.clone());
    let out = apply_filter_graph(&mut g, e, c, mode)?;
    Ok(g.value(out).clone())
}

pub fn class_aware_add_graph(g: &mut Graph, weighted: Var, class_token: &Tensor, lambda: f64) -> Result<Var> {
    let shift = g.constant(class_token.map(|c| lambda * c));
    g.add_row(weighted, shift)
}

/// `F[p] = weighted[p] + λ · class_token`.
pub fn class_aware_add(weighted: &Tensor, class_token: &Tensor, lambda: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = g.constant(weighted.clone());
    let out = class_aware_add_graph(&mut g, w, class_token, lambda)?;
    Ok(g.value(out).clone())
}

/// Graph-side filter output. The mask-side fields are plain values because
/// they are not differentiated.
#[derive(Clone, Debug)]
pub struct FilterVars {
    pub refined: Var,
    pub combined: Var,
    pub weighted: Var,
    pub similarity: Tensor,
    pub similarity_norm: Tensor,
    pub mask: Tensor,
    pub n_passing: usize,
}

pub fn filter_graph(
    g: &mut Graph,
    embeddings: Var,
    class_token: &Tensor,
    slots: Var,
    attention: Var,
    cfg: &FilterConfig,
) -> Result<FilterVars> {
    let (p, d) = g.value(embeddings).dims2();
    let (n, pa) = g.value(attention).dims2();
    if pa != p || g.value(slots).dims2() != (n, d) || class_token.len() != d {
        return Err(Error::dim(
            "filter",
            format!(
                "embeddings {p}x{d}, attention {n}x{pa}, slots {:?}, token {}",
                g.value(slots).shape(),
                class_token.len()
            ),
        ));
    }
    let similarity = slot_similarity(g.value(slots), class_token)?;
    let similarity_norm = minmax_normalize(&similarity)?;
    let (mask, n_passing) = make_mask(&similarity_norm, cfg.threshold);
    let combined = combine_attention_graph(g, attention, &mask, n_passing)?;
    let weighted = apply_filter_graph(g, embeddings, combined, cfg.mask_mode)?;
    let refined = class_aware_add_graph(g, weighted, class_token, cfg.lambda)?;
    Ok(FilterVars {
        refined,
        combined,
        weighted,
        similarity,
        similarity_norm,
        mask,
        n_passing,
    })
}

/// The full filter on values.
pub fn filter(
    embeddings: &Tensor,
    class_token: &Tensor,
    state: &SlotState,
    cfg: &FilterConfig,
) -> Result<FilterResult> {
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let s = g.constant(state.slots.clone());
    let a = g.constant(state.attention.clone());
    let out = filter_graph(&mut g, e, class_token, s, a, cfg)?;
    Ok(FilterResult {
        combined: g.value(out.combined).clone(),
        weighted_embeddings: g.value(out.weighted).clone(),
        refined: g.value(out.refined).clone(),
        similarity: out.similarity,
        similarity_norm: out.similarity_norm,
        mask: out.mask,
        n_passing: out.n_passing,
    })
}
