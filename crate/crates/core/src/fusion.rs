//! Feature fusion: tokenization, self-attention, external memory attention,
//! the LSTM baseline and the pose regressor.
//!
//! Tokens are rows, so a `d x d` projection `W` acts as `F Wᵀ`.

use emavio_tensor::nn::{linear, lstm_cell, LstmParams};
use emavio_tensor::{Graph, ParamStore, Tensor, Var};

use crate::config::{FusionMode, MemoryNorm, MemoryTargets, ModelConfig};
use crate::encoders::param;
use crate::{Error, Result};

/// Concatenates `[1, d_v]` and `[1, d_i]` and reshapes to `[S, d]`.
pub fn fuse_concat(g: &mut Graph, fv: Var, fi: Var, tokens: usize) -> Result<Var> {
    let cat = g.concat(&[fv, fi], 1)?;
    let width = g.shape(cat)[1];
    if tokens == 0 || !width.is_multiple_of(tokens) {
        return Err(Error::Config(format!(
            "fused width {width} is not divisible into {tokens} tokens"
        )));
    }
    Ok(g.reshape(cat, &[tokens, width / tokens])?)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_alpha: Var,
    /// `[m, d]` memories for Q.
    pub m_q1: Var,
    pub m_q2: Var,
    /// `[m, d]` memories for K, or for V when the targets are `qv`.
    pub m_k1: Var,
    pub m_k2: Var,
}

impl AttentionParams {
    pub fn load(g: &mut Graph, store: &ParamStore, with_memory: bool) -> Result<Self> {
        let mut p = |name: &str| param(g, store, &format!("fusion.{name}"));
        let (w_q, w_k, w_v, w_alpha) = (p("w_q")?, p("w_k")?, p("w_v")?, p("w_alpha")?);
        let (m_q1, m_q2, m_k1, m_k2) = if with_memory {
            (p("m_q1")?, p("m_q2")?, p("m_k1")?, p("m_k2")?)
        } else {
            (w_q, w_q, w_q, w_q)
        };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_alpha,
            m_q1,
            m_q2,
            m_k1,
            m_k2,
        })
    }
}

/// Attention options shared by both attention modes.
#[derive(Clone, Copy, Debug, Default)]
pub struct AttentionOptions {
    pub targets: MemoryTargets,
    pub norm: MemoryNorm,
    /// Divide logits by `sqrt(d)`.
    pub scale: bool,
}

impl AttentionOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            targets: cfg.memory_targets,
            norm: cfg.memory_norm,
            scale: cfg.attention_scale,
        }
    }
}

/// Output tokens and the row-stochastic attention map.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub tokens: Var,
    pub attention: Var,
}

fn attend(g: &mut Graph, f: Var, q: Var, k: Var, v: Var, w_alpha: Var, scale: bool) -> Result<Attended> {
    let kt = g.transpose(k)?;
    let mut logits = g.matmul(q, kt)?;
    if scale {
        let d = g.shape(q)[1] as f64;
        logits = g.scale(logits, 1.0 / d.sqrt());
    }
    let attention = g.softmax(logits, 1)?;
    let a = g.matmul(attention, v)?;
    let projected = linear(g, a, w_alpha, None)?;
    Ok(Attended {
        tokens: g.add(projected, f)?,
        attention,
    })
}

/// `Softmax(Q Kᵀ) V`, projected by `W_α` and added back to `F`.
pub fn self_attention(g: &mut Graph, f: Var, w: &AttentionParams, scale: bool) -> Result<Attended> {
    let q = linear(g, f, w.w_q, None)?;
    let k = linear(g, f, w.w_k, None)?;
    let v = linear(g, f, w.w_v, None)?;
    attend(g, f, q, k, v, w.w_alpha, scale)
}

/// `Norm(X M1ᵀ) M2` for `X: [S, d]`, `M1, M2: [m, d]`.
pub fn memory_transform(g: &mut Graph, x: Var, m1: Var, m2: Var, norm: MemoryNorm) -> Result<Var> {
    if g.shape(m1).first() == Some(&0) {
        return Err(Error::Config("memory needs at least one slot".into()));
    }
    let m1t = g.transpose(m1)?;
    let scores = g.matmul(x, m1t)?;
    let mut attn = g.softmax(scores, 1)?;
    if norm == MemoryNorm::Double {
        attn = g.l1_normalize(attn, 0)?;
    }
    Ok(g.matmul(attn, m2)?)
}

/// Self-attention with the targeted inputs replaced by their memory
/// transforms.
pub fn ema_fuse(g: &mut Graph, f: Var, w: &AttentionParams, opts: AttentionOptions) -> Result<Attended> {
    let q = linear(g, f, w.w_q, None)?;
    let mut k = linear(g, f, w.w_k, None)?;
    let mut v = linear(g, f, w.w_v, None)?;
    let q = memory_transform(g, q, w.m_q1, w.m_q2, opts.norm)?;
    match opts.targets {
        MemoryTargets::Qk => k = memory_transform(g, k, w.m_k1, w.m_k2, opts.norm)?,
        MemoryTargets::Qv => v = memory_transform(g, v, w.m_k1, w.m_k2, opts.norm)?,
    }
    attend(g, f, q, k, v, w.w_alpha, opts.scale)
}

/// Runs one LSTM cell over the token rows; returns the final hidden state.
pub fn lstm_fuse(g: &mut Graph, tokens: Var, w: LstmParams, hidden: usize) -> Result<Var> {
    let zeros = Tensor::zeros(&[1, hidden]);
    let mut h = g.constant(zeros.clone());
    let mut c = g.constant(zeros);
    for s in 0..g.shape(tokens)[0] {
        let x = g.narrow(tokens, 0, s, 1)?;
        (h, c) = lstm_cell(g, x, h, c, w)?;
    }
    Ok(h)
}

/// Fusion output: `[1, width]` regressor input and, for attention modes,
/// the attention map.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub features: Var,
    pub attention: Option<Var>,
}

/// Dispatches on the configured fusion mode.
pub fn fuse(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, tokens: Var) -> Result<Fused> {
    let opts = AttentionOptions::from_config(cfg);
    let attended = match cfg.fusion {
        FusionMode::Lstm => {
            let w = LstmParams {
                w_ih: param(g, store, "fusion.lstm.w_ih")?,
                w_hh: param(g, store, "fusion.lstm.w_hh")?,
                bias: param(g, store, "fusion.lstm.bias")?,
            };
            let h = lstm_fuse(g, tokens, w, cfg.fusion_lstm_hidden)?;
            return Ok(Fused {
                features: h,
                attention: None,
            });
        }
        FusionMode::SelfAttention => {
            let w = AttentionParams::load(g, store, false)?;
            self_attention(g, tokens, &w, opts.scale)?
        }
        FusionMode::Ema => {
            let w = AttentionParams::load(g, store, true)?;
            ema_fuse(g, tokens, &w, opts)?
        }
    };
    let n = g.shape(attended.tokens).iter().product();
    Ok(Fused {
        features: g.reshape(attended.tokens, &[1, n])?,
        attention: Some(attended.attention),
    })
}

/// Two linear layers with a ReLU between; `[1, in] -> [1, 6]`.
pub fn regress_pose(g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
    let w1 = param(g, store, "regressor.fc1_weight")?;
    let b1 = param(g, store, "regressor.fc1_bias")?;
    let w2 = param(g, store, "regressor.fc2_weight")?;
    let b2 = param(g, store, "regressor.fc2_bias")?;
    let h = linear(g, x, w1, Some(b1))?;
    let h = g.relu(h);
    Ok(linear(g, h, w2, Some(b2))?)
}
