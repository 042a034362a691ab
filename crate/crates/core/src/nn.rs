//! Layers built from tape primitives.

use alloc::format;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Init, Mask, ParamId, ParamStore, Tape, Var};
use crate::error::{shape_err, Result};

pub const LN_EPS: f32 = 1e-5;

/// `x · W + b`, with `W` stored as `[in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[in_dim, out_dim], Init::FanIn(in_dim))?;
        let bias = Some(store.add(&format!("{name}.bias"), &[out_dim], Init::FanIn(in_dim))?);
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[in_dim, out_dim], Init::FanIn(in_dim))?;
        Ok(Self { weight, bias: None, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(&format!("{name}.gain"), &[dim], Init::Const(1.0))?,
            bias: store.add(&format!("{name}.bias"), &[dim], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gain), tape.param(self.bias));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Linear → GELU → Linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, h)
    }
}

/// Output of an attention call: the merged values and the per-head weights.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    pub out: Var,
    /// `[heads, queries, keys]`
    pub probs: Var,
}

/// Multi-head scaled dot-product attention on already-projected `q` (`[Nq, D]`)
/// and `k`, `v` (`[Nk, D]`). `mask` is `[Nq, Nk]` (or a single broadcast row).
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: Option<&Mask>, heads: usize) -> Result<Attended> {
    let (sq, sk, sv) = (tape.shape(q).to_vec(), tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 || sq[1] != sk[1] || sk != sv {
        return Err(shape_err("attention", format!("q {:?} k {:?} v {:?}", sq, sk, sv)));
    }
    let (nq, nk, d) = (sq[0], sk[0], sq[1]);
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("attention", format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape, x: Var, n: usize| -> Result<Var> {
        let x = tape.reshape(x, &[n, heads, dh])?;
        tape.permute(x, &[1, 0, 2])
    };
    let qs = tape.scale(q, 1.0 / (dh as f32).sqrt());
    let qh = split(tape, qs, nq)?;
    let kh = split(tape, k, nk)?;
    let vh = split(tape, v, nk)?;
    let scores = tape.matmul_t(qh, kh, false, true)?;
    let probs = tape.masked_softmax(scores, mask)?;
    let oh = tape.matmul(probs, vh)?;
    let o = tape.permute(oh, &[1, 0, 2])?;
    let out = tape.reshape(o, &[nq, d])?;
    Ok(Attended { out, probs })
}

#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim)?,
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim)?,
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim)?,
            heads,
        })
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, tape: &mut Tape, xq: Var, xkv: Var, mask: Option<&Mask>) -> Result<Attended> {
        let q = self.wq.forward(tape, xq)?;
        let k = self.wk.forward(tape, xkv)?;
        let v = self.wv.forward(tape, xkv)?;
        let a = attention(tape, q, k, v, mask, self.heads)?;
        let out = self.wo.forward(tape, a.out)?;
        Ok(Attended { out, probs: a.probs })
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: Option<&Mask>) -> Result<Attended> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h, mask)?;
        let x = tape.add(x, a.out)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        let out = tape.add(x, m)?;
        Ok(Attended { out, probs: a.probs })
    }
}

/// Pre-norm cross-attention block: queries update, the key/value sequence is read only.
#[derive(Debug, Clone, Copy)]
pub struct CrossBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(store, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::new(store, &format!("{name}.ln_kv"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, 4 * dim, dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, context: Var) -> Result<Attended> {
        let hq = self.ln_q.forward(tape, x)?;
        let hkv = self.ln_kv.forward(tape, context)?;
        let a = self.attn.forward(tape, hq, hkv, None)?;
        let x = tape.add(x, a.out)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        let out = tape.add(x, m)?;
        Ok(Attended { out, probs: a.probs })
    }
}
