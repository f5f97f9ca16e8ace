//! Dense query–support similarity scoring.
//!
//! For every (support, query) pair the P×P matrix of patch cosine
//! similarities is flattened row-major (support patch major) and mapped to a
//! scalar by a two-layer ReLU MLP. Scores are summed over the K shots of each
//! class and turned into class probabilities by a softmax over classes.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SaffRng;
use crate::slot_attention::fill_normal;
use crate::tensor::{l2_normalize, matmul_nt, softmax, Tensor, L2_EPS};

pub const DEFAULT_SCORER_HIDDEN: usize = 64;

/// Two-layer MLP `P² → H → 1`. There is no output bias: a constant added to
/// every score cancels in the softmax over classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorerParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
}

impl ScorerParams {
    /// He-initialized hidden layer and a zero output layer, so an untrained
    /// scorer assigns the same score to every pair.
    pub fn init(n_patches: usize, hidden: usize, rng: &mut SaffRng) -> Self {
        let input = n_patches * n_patches;
        let mut w1 = Tensor::zeros(&[input, hidden]);
        fill_normal(&mut w1, (2.0 / input as f64).sqrt(), rng);
        ScorerParams {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, 1]),
        }
    }

    /// Hidden = input width, identity first layer, summing second layer.
    /// On non-negative similarity matrices the score is `Σ S`.
    pub fn summing(n_patches: usize) -> Self {
        let input = n_patches * n_patches;
        ScorerParams {
            w1: Tensor::identity(input),
            b1: Tensor::zeros(&[input]),
            w2: Tensor::ones(&[input, 1]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![("w1".into(), &self.w1), ("b1".into(), &self.b1), ("w2".into(), &self.w2)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
}

impl ScorerVars {
    pub fn bind(g: &mut Graph, p: &ScorerParams) -> Self {
        ScorerVars {
            w1: g.param(p.w1.clone()),
            b1: g.param(p.b1.clone()),
            w2: g.param(p.w2.clone()),
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2]
    }
}

/// Per-pair, per-class and probability tables of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeScores {
    /// (N·K) × Q, support rows grouped by class.
    pub pair_scores: Tensor,
    /// N × Q.
    pub class_scores: Tensor,
    /// N × Q, columns sum to 1.
    pub probabilities: Tensor,
}

/// `S[a][b] = cos(support patch a, query patch b)`.
pub fn dense_similarity(support: &Tensor, query: &Tensor) -> Result<Tensor> {
    if support.shape() != query.shape() {
        return Err(Error::dim(
            "dense_similarity",
            format!("{:?} vs {:?}", support.shape(), query.shape()),
        ));
    }
    let s = l2_normalize(support, 1, L2_EPS)?;
    let q = l2_normalize(query, 1, L2_EPS)?;
    matmul_nt(&s, &q)
}

fn mlp_graph(g: &mut Graph, x: Var, p: &ScorerVars) -> Result<Var> {
    let h = g.matmul(x, p.w1)?;
    let h = g.add_row(h, p.b1)?;
    let h = g.relu(h);
    g.matmul(h, p.w2)
}

/// MLP score of one flattened similarity matrix.
pub fn score_pair(similarity: &Tensor, params: &ScorerParams) -> Result<f64> {
    let width = similarity.len();
    if width != params.input_width() {
        return Err(Error::dim(
            "score_pair",
            format!("{width} similarity values, scorer expects {}", params.input_width()),
        ));
    }
    let mut g = Graph::new();
    let vars = ScorerVars::bind(&mut g, params);
    let x = g.constant(similarity.reshape(&[1, width])?);
    let out = mlp_graph(&mut g, x, &vars)?;
    Ok(g.value(out).item())
}

/// Scores every (support, query) pair at once. Returns an S×Q matrix whose
/// row `s` holds support image `s` against every query.
pub fn score_all_graph(g: &mut Graph, support: &[Var], query: &[Var], p: &ScorerVars) -> Result<Var> {
    let n_s = support.len();
    let n_q = query.len();
    let (n_patches, _) = g.value(support[0]).dims2();
    if n_patches * n_patches != g.value(p.w1).shape()[0] {
        return Err(Error::dim(
            "score_pair",
            format!("P={n_patches} needs scorer width {}", n_patches * n_patches),
        ));
    }
    let s_all = g.concat_rows(support)?;
    let q_all = g.concat_rows(query)?;
    let s_all = g.l2_normalize(s_all, 1, L2_EPS)?;
    let q_all = g.l2_normalize(q_all, 1, L2_EPS)?;
    // rows: (query, query patch); cols: (support, support patch)
    let sims = g.matmul_nt(q_all, s_all)?;

    let pp = n_patches * n_patches;
    let stride = n_s * n_patches;
    let mut index = Vec::with_capacity(n_s * n_q * pp);
    for s in 0..n_s {
        for q in 0..n_q {
            for a in 0..n_patches {
                for b in 0..n_patches {
                    index.push((q * n_patches + b) * stride + s * n_patches + a);
                }
            }
        }
    }
    let flat = g.gather(sims, Rc::from(index), &[n_s * n_q, pp])?;
    let scores = mlp_graph(g, flat, p)?;
    g.reshape(scores, &[n_s, n_q])
}

/// `s[n][q] = Σ_k scores[n·K + k][q]`.
pub fn aggregate_shots(scores: &Tensor, n_way: usize, k_shot: usize) -> Result<Tensor> {
    let (rows, _) = scores.dims2();
    if rows != n_way * k_shot {
        return Err(Error::dim("aggregate_shots", format!("{rows} rows for {n_way}-way {k_shot}-shot")));
    }
    let mut g = Graph::new();
    let x = g.constant(scores.clone());
    let out = g.group_sum_rows(x, k_shot)?;
    Ok(g.value(out).clone())
}

/// Column-wise softmax over classes.
pub fn classify(class_scores: &Tensor) -> Result<Tensor> {
    softmax(class_scores, 0)
}

/// `−(1/Q) Σ_q ln max(p[label_q][q], 1e-12)`.
pub fn cross_entropy(probabilities: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let loss = g.cross_entropy(p, labels)?;
    Ok(g.value(loss).item())
}
