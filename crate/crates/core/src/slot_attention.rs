//! Iterative slot attention over patch embeddings, seeded from the class
//! token.
//!
//! Slots compete for patches: the attention softmax is taken across the slot
//! axis, so each patch distributes a unit of attention over the slots. Each
//! slot then reads a weighted mean of the projected patches (weights
//! renormalized along the patch axis), is updated by a GRU, and refined by a
//! residual MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::SaffRng;
use crate::tensor::Tensor;

/// Added to each slot's attention mass before the weighted mean.
pub const ATTN_EPS: f64 = 1e-8;

/// Default relative slot jitter: σ = `DEFAULT_NOISE_SCALE` · RMS(class token).
pub const DEFAULT_NOISE_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotConfig {
    pub n_slots: usize,
    pub n_iters: usize,
}

impl Default for SlotConfig {
    fn default() -> Self {
        SlotConfig {
            n_slots: 5,
            n_iters: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn zeros(d: usize) -> Self {
        let m = || Tensor::zeros(&[d, d]);
        let v = || Tensor::zeros(&[d]);
        GruParams {
            w_z: m(),
            u_z: m(),
            b_z: v(),
            w_r: m(),
            u_r: m(),
            b_r: v(),
            w_h: m(),
            u_h: m(),
            b_h: v(),
        }
    }

    pub fn init(d: usize, rng: &mut SaffRng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut p = Self::zeros(d);
        for (_, t) in p.named_mut() {
            if t.rank() == 2 {
                fill_normal(t, std, rng);
            }
        }
        p
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_z", &self.w_z),
            ("u_z", &self.u_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("u_r", &self.u_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("u_h", &self.u_h),
            ("b_h", &self.b_h),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_z", &mut self.w_z),
            ("u_z", &mut self.u_z),
            ("b_z", &mut self.b_z),
            ("w_r", &mut self.w_r),
            ("u_r", &mut self.u_r),
            ("b_r", &mut self.b_r),
            ("w_h", &mut self.w_h),
            ("u_h", &mut self.u_h),
            ("b_h", &mut self.b_h),
        ]
    }
}

/// Graph handles for [`GruParams`].
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn bind(g: &mut Graph, p: &GruParams) -> Self {
        GruVars {
            w_z: g.param(p.w_z.clone()),
            u_z: g.param(p.u_z.clone()),
            b_z: g.param(p.b_z.clone()),
            w_r: g.param(p.w_r.clone()),
            u_r: g.param(p.u_r.clone()),
            b_r: g.param(p.b_r.clone()),
            w_h: g.param(p.w_h.clone()),
            u_h: g.param(p.u_h.clone()),
            b_h: g.param(p.b_h.clone()),
        }
    }

    /// Same order as [`GruParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h,
            self.b_h,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotAttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub gru: GruParams,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub ln_in_gain: Tensor,
    pub ln_in_bias: Tensor,
    /// The slot-side norm has no bias: a shared offset on the queries moves
    /// every slot's logit for an input equally, which the softmax over slots
    /// cancels.
    pub ln_slot_gain: Tensor,
    pub ln_mlp_gain: Tensor,
    pub ln_mlp_bias: Tensor,
    /// Slot jitter relative to the class token's RMS. Not trained.
    pub noise_scale: f64,
}

impl SlotAttentionParams {
    /// Residual MLP hidden width for embedding dimension `d`.
    pub fn hidden_width(d: usize) -> usize {
        2 * d
    }

    pub fn init(d: usize, rng: &mut SaffRng) -> Self {
        let h = Self::hidden_width(d);
        let mut normal = |shape: &[usize], std: f64| {
            let mut t = Tensor::zeros(shape);
            fill_normal(&mut t, std, rng);
            t
        };
        let proj = 1.0 / (d as f64).sqrt();
        let w_q = normal(&[d, d], proj);
        let w_k = normal(&[d, d], proj);
        let w_v = normal(&[d, d], proj);
        let mlp_w1 = normal(&[d, h], (2.0 / d as f64).sqrt());
        let mlp_w2 = normal(&[h, d], 1.0 / (h as f64).sqrt());
        let gru = GruParams::init(d, rng);
        SlotAttentionParams {
            w_q,
            w_k,
            w_v,
            gru,
            mlp_w1,
            mlp_b1: Tensor::zeros(&[h]),
            mlp_w2,
            mlp_b2: Tensor::zeros(&[d]),
            ln_in_gain: Tensor::ones(&[d]),
            ln_in_bias: Tensor::zeros(&[d]),
            ln_slot_gain: Tensor::ones(&[d]),
            ln_mlp_gain: Tensor::ones(&[d]),
            ln_mlp_bias: Tensor::zeros(&[d]),
            noise_scale: DEFAULT_NOISE_SCALE,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
        ];
        out.extend(self.gru.named().into_iter().map(|(n, t)| (format!("gru.{n}"), t)));
        out.extend([
            ("mlp_w1".into(), &self.mlp_w1),
            ("mlp_b1".into(), &self.mlp_b1),
            ("mlp_w2".into(), &self.mlp_w2),
            ("mlp_b2".into(), &self.mlp_b2),
            ("ln_in_gain".into(), &self.ln_in_gain),
            ("ln_in_bias".into(), &self.ln_in_bias),
            ("ln_slot_gain".into(), &self.ln_slot_gain),
            ("ln_mlp_gain".into(), &self.ln_mlp_gain),
            ("ln_mlp_bias".into(), &self.ln_mlp_bias),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v];
        out.extend(self.gru.named_mut().into_iter().map(|(_, t)| t));
        out.extend([
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.ln_in_gain,
            &mut self.ln_in_bias,
            &mut self.ln_slot_gain,
            &mut self.ln_mlp_gain,
            &mut self.ln_mlp_bias,
        ]);
        out
    }
}

/// Graph handles for [`SlotAttentionParams`].
#[derive(Clone, Copy, Debug)]
pub struct SlotAttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub gru: GruVars,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln_in_gain: Var,
    pub ln_in_bias: Var,
    pub ln_slot_gain: Var,
    /// Constant zero bias.
    pub ln_slot_bias: Var,
    pub ln_mlp_gain: Var,
    pub ln_mlp_bias: Var,
    pub noise_scale: f64,
    pub dim: usize,
}

impl SlotAttentionVars {
    pub fn bind(g: &mut Graph, p: &SlotAttentionParams) -> Self {
        let w_q = g.param(p.w_q.clone());
        let w_k = g.param(p.w_k.clone());
        let w_v = g.param(p.w_v.clone());
        let gru = GruVars::bind(g, &p.gru);
        SlotAttentionVars {
            w_q,
            w_k,
            w_v,
            gru,
            mlp_w1: g.param(p.mlp_w1.clone()),
            mlp_b1: g.param(p.mlp_b1.clone()),
            mlp_w2: g.param(p.mlp_w2.clone()),
            mlp_b2: g.param(p.mlp_b2.clone()),
            ln_in_gain: g.param(p.ln_in_gain.clone()),
            ln_in_bias: g.param(p.ln_in_bias.clone()),
            ln_slot_gain: g.param(p.ln_slot_gain.clone()),
            ln_slot_bias: g.constant(Tensor::zeros(&[p.dim()])),
            ln_mlp_gain: g.param(p.ln_mlp_gain.clone()),
            ln_mlp_bias: g.param(p.ln_mlp_bias.clone()),
            noise_scale: p.noise_scale,
            dim: p.dim(),
        }
    }

    /// Same order as [`SlotAttentionParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.w_q, self.w_k, self.w_v];
        out.extend(self.gru.vars());
        out.extend([
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.ln_in_gain,
            self.ln_in_bias,
            self.ln_slot_gain,
            self.ln_mlp_gain,
            self.ln_mlp_bias,
        ]);
        out
    }
}

/// Refined slots and the final-iteration attention map.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotState {
    /// N×D slots after the last iteration.
    pub slots: Tensor,
    /// N×P attention of the last iteration; each column sums to 1.
    pub attention: Tensor,
    pub iterations_run: usize,
    /// Attention of every iteration, oldest first; the last entry equals
    /// `attention`.
    pub attention_history: Vec<Tensor>,
}

/// Graph-side result of [`run_graph`].
#[derive(Clone, Debug)]
pub struct SlotVars {
    pub slots: Var,
    pub attention: Var,
    pub history: Vec<Var>,
}

pub(crate) fn fill_normal(t: &mut Tensor, std: f64, rng: &mut SaffRng) {
    for v in t.data_mut() {
        *v = std * rng.normal();
    }
}

/// Root-mean-square of a vector.
pub fn rms(t: &Tensor) -> f64 {
    (t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64).sqrt()
}

/// `slot_i = class_token + sigma · ξ_i` with ξ drawn row by row from `rng`.
pub fn init_slots(class_token: &Tensor, n_slots: usize, sigma: f64, rng: &mut SaffRng) -> Result<Tensor> {
    if n_slots == 0 {
        return Err(Error::usage("init_slots: n_slots must be at least 1"));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::usage(format!("init_slots: noise scale {sigma} must be finite and >= 0")));
    }
    let d = class_token.len();
    let mut data = Vec::with_capacity(n_slots * d);
    for _ in 0..n_slots {
        for &c in class_token.data() {
            data.push(c + sigma * rng.normal());
        }
    }
    Ok(Tensor::from_parts(vec![n_slots, d], data))
}

/// `(1 − z) ⊙ h + z ⊙ h̃` with the usual update and reset gates.
pub fn gru_cell_graph(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, hid: Var| -> Result<Var> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(hid, u)?;
        let s = g.add(xw, hu)?;
        g.add_row(s, b)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z, h)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r, h)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, p.w_h, p.u_h, p.b_h, rh)?;
    let cand = g.tanh(cand_pre);
    let keep = g.affine(z, -1.0, 1.0);
    let kept = g.mul(keep, h)?;
    let fresh = g.mul(z, cand)?;
    g.add(kept, fresh)
}

/// Value-level GRU update.
pub fn gru_cell(update_in: &Tensor, hidden: &Tensor, params: &GruParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = GruVars::bind(&mut g, params);
    let x = g.constant(update_in.clone());
    let h = g.constant(hidden.clone());
    let out = gru_cell_graph(&mut g, x, h, &vars)?;
    Ok(g.value(out).clone())
}

/// Normalized patch keys and values, computed once per image.
#[derive(Clone, Copy, Debug)]
pub struct Projected {
    pub keys: Var,
    pub values: Var,
}

pub fn project_inputs(g: &mut Graph, inputs: Var, p: &SlotAttentionVars) -> Result<Projected> {
    let d = g.value(inputs).dims2().1;
    if d != p.dim {
        return Err(Error::dim("slot_attention", format!("inputs have D={d}, params D={}", p.dim)));
    }
    let normed = g.layer_norm(inputs, p.ln_in_gain, p.ln_in_bias)?;
    Ok(Projected {
        keys: g.matmul(normed, p.w_k)?,
        values: g.matmul(normed, p.w_v)?,
    })
}

/// One refinement iteration. Returns the updated slots and the N×P attention.
pub fn attention_step_graph(
    g: &mut Graph,
    slots: Var,
    inputs: &Projected,
    p: &SlotAttentionVars,
) -> Result<(Var, Var)> {
    let d = g.value(slots).dims2().1;
    if d != p.dim {
        return Err(Error::dim("slot_attention", format!("slots have D={d}, params D={}", p.dim)));
    }
    let s_norm = g.layer_norm(slots, p.ln_slot_gain, p.ln_slot_bias)?;
    let q = g.matmul(s_norm, p.w_q)?;
    let logits = g.matmul_nt(q, inputs.keys)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(logits, 0)?;

    let mass = g.sum_axis(attn, 1)?;
    let mass = g.affine(mass, 1.0, ATTN_EPS);
    let inv_mass = g.recip(mass);
    let weights = g.mul_rows(attn, inv_mass)?;
    let updates = g.matmul(weights, inputs.values)?;

    let h = gru_cell_graph(g, updates, slots, &p.gru)?;
    let m = g.layer_norm(h, p.ln_mlp_gain, p.ln_mlp_bias)?;
    let m = g.matmul(m, p.mlp_w1)?;
    let m = g.add_row(m, p.mlp_b1)?;
    let m = g.relu(m);
    let m = g.matmul(m, p.mlp_w2)?;
    let m = g.add_row(m, p.mlp_b2)?;
    let new_slots = g.add(h, m)?;
    Ok((new_slots, attn))
}

/// Seeds slots from `class_token` and applies `n_iters` attention steps.
pub fn run_graph(
    g: &mut Graph,
    inputs: Var,
    class_token: &Tensor,
    cfg: SlotConfig,
    p: &SlotAttentionVars,
    rng: &mut SaffRng,
) -> Result<SlotVars> {
    if cfg.n_iters == 0 {
        return Err(Error::usage("slot attention: n_iters must be at least 1"));
    }
    if class_token.len() != p.dim {
        return Err(Error::dim(
            "slot_attention",
            format!("class token has D={}, params D={}", class_token.len(), p.dim),
        ));
    }
    let sigma = p.noise_scale * rms(class_token);
    let seeded = init_slots(class_token, cfg.n_slots, sigma, rng)?;
    let mut slots = g.constant(seeded);
    let projected = project_inputs(g, inputs, p)?;
    let mut history = Vec::with_capacity(cfg.n_iters);
    for _ in 0..cfg.n_iters {
        let (next, attn) = attention_step_graph(g, slots, &projected, p)?;
        slots = next;
        history.push(attn);
    }
    Ok(SlotVars {
        slots,
        attention: *history.last().expect("n_iters >= 1"),
        history,
    })
}

/// Value-level single attention step from explicit slots.
pub fn attention_step(slots: &Tensor, inputs: &Tensor, params: &SlotAttentionParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = SlotAttentionVars::bind(&mut g, params);
    let s = g.constant(slots.clone());
    let x = g.constant(inputs.clone());
    let projected = project_inputs(&mut g, x, &vars)?;
    let (next, attn) = attention_step_graph(&mut g, s, &projected, &vars)?;
    g.check_finite()?;
    Ok((g.value(next).clone(), g.value(attn).clone()))
}

/// Value-level full run.
pub fn run(
    inputs: &Tensor,
    class_token: &Tensor,
    cfg: SlotConfig,
    params: &SlotAttentionParams,
    rng: &mut SaffRng,
) -> Result<SlotState> {
    let mut g = Graph::new();
    let vars = SlotAttentionVars::bind(&mut g, params);
    let x = g.constant(inputs.clone());
    let out = run_graph(&mut g, x, class_token, cfg, &vars, rng)?;
    g.check_finite()?;
    Ok(SlotState {
        slots: g.value(out.slots).clone(),
        attention: g.value(out.attention).clone(),
        iterations_run: out.history.len(),
        attention_history: out.history.iter().map(|&v| g.value(v).clone()).collect(),
    })
}
