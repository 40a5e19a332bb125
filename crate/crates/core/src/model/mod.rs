//! A small trainable GPT-style causal transformer whose FFN layers are
//! addressable as key-value memories.
//!
//! Pre-layernorm blocks: `h_mid = h + attn(ln1(h))`, then
//! `h_out = h_mid + W_proj σ(W_fc ln2(h_mid) + b_fc) + b_proj`. The FFN inner
//! activation is the per-token *key*, the FFN output row is the *value* slot
//! that editing rewrites. The unembedding starts at zero so a fresh model
//! yields exactly uniform next-token distributions.

mod backward;
mod forward;
mod io;
mod train;

pub use backward::{grad_hidden, LogitObjective, ObjectiveTerm, ParamGrads};
pub use forward::{ForwardCache, LnCache};
pub use io::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use train::{pretrain_base, AdamState, PretrainLog, PretrainOptions};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub type TokenId = usize;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                // tanh approximation
                let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Architecture and initialization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.d_ff == 0
            || self.n_heads == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return Err(Error::Config("all model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff < self.d_model {
            return Err(Error::Config(format!(
                "d_ff {} must be >= d_model {}",
                self.d_ff, self.d_model
            )));
        }
        Ok(())
    }
}

/// Per-layer parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: Vector,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Vector,
    /// First FFN matrix, `d_ff x d_model`: the key projection.
    pub w_fc: Matrix,
    pub b_fc: Vector,
    /// Second FFN matrix, `d_model x d_ff`: the value projection.
    pub w_proj: Matrix,
    pub b_proj: Vector,
}

/// The editable toy network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub ln_f_gain: Vector,
    pub w_unembed: Matrix,
}

impl TransformerModel {
    /// Fresh seeded initialization. The unembedding is zero so softmax over
    /// the initial logits is exactly uniform.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let std = 0.15;
        let resid_std = std;

        let tok_emb = random_matrix(&mut rng, config.vocab_size, d, std);
        let pos_emb = random_matrix(&mut rng, config.max_seq, d, std);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gain: ones(d),
                w_q: random_matrix(&mut rng, d, d, std),
                w_k: random_matrix(&mut rng, d, d, std),
                w_v: random_matrix(&mut rng, d, d, std),
                w_o: random_matrix(&mut rng, d, d, resid_std),
                ln2_gain: ones(d),
                w_fc: random_matrix(&mut rng, config.d_ff, d, std),
                b_fc: Vector::zeros(config.d_ff),
                w_proj: random_matrix(&mut rng, d, config.d_ff, resid_std),
                b_proj: Vector::zeros(d),
            });
        }
        Ok(TransformerModel {
            tok_emb,
            pos_emb,
            layers,
            ln_f_gain: ones(d),
            w_unembed: Matrix::zeros(config.vocab_size, d),
            config,
        })
    }

    pub fn w_proj(&self, layer: usize) -> &Matrix {
        &self.layers[layer].w_proj
    }

    pub fn w_proj_mut(&mut self, layer: usize) -> &mut Matrix {
        &mut self.layers[layer].w_proj
    }

    pub fn set_w_proj(&mut self, layer: usize, w: Matrix) {
        assert_eq!(
            (w.rows(), w.cols()),
            (self.config.d_model, self.config.d_ff),
            "w_proj shape mismatch"
        );
        self.layers[layer].w_proj = w;
    }

    pub fn w_fc(&self, layer: usize) -> &Matrix {
        &self.layers[layer].w_fc
    }

    /// All parameter tensors with stable names, in a fixed order.
    pub fn tensors_named(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.data()),
            ("pos_emb".into(), self.pos_emb.data()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), l.ln1_gain.data()));
            out.push((format!("layer{i}.w_q"), l.w_q.data()));
            out.push((format!("layer{i}.w_k"), l.w_k.data()));
            out.push((format!("layer{i}.w_v"), l.w_v.data()));
            out.push((format!("layer{i}.w_o"), l.w_o.data()));
            out.push((format!("layer{i}.ln2_gain"), l.ln2_gain.data()));
            out.push((format!("layer{i}.w_fc"), l.w_fc.data()));
            out.push((format!("layer{i}.b_fc"), l.b_fc.data()));
            out.push((format!("layer{i}.w_proj"), l.w_proj.data()));
            out.push((format!("layer{i}.b_proj"), l.b_proj.data()));
        }
        out.push(("ln_f_gain".into(), self.ln_f_gain.data()));
        out.push(("w_unembed".into(), self.w_unembed.data()));
        out
    }

    /// Mutable views over every parameter tensor, same order as
    /// [`tensors_named`](Self::tensors_named).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> =
            vec![self.tok_emb.data_mut(), self.pos_emb.data_mut()];
        for l in &mut self.layers {
            out.push(l.ln1_gain.data_mut());
            out.push(l.w_q.data_mut());
            out.push(l.w_k.data_mut());
            out.push(l.w_v.data_mut());
            out.push(l.w_o.data_mut());
            out.push(l.ln2_gain.data_mut());
            out.push(l.w_fc.data_mut());
            out.push(l.b_fc.data_mut());
            out.push(l.w_proj.data_mut());
            out.push(l.b_proj.data_mut());
        }
        out.push(self.ln_f_gain.data_mut());
        out.push(self.w_unembed.data_mut());
        out
    }

    /// Bit-level equality of every parameter tensor.
    pub fn bit_eq(&self, other: &TransformerModel) -> bool {
        if self.config != other.config {
            return false;
        }
        self.tensors_named()
            .iter()
            .zip(other.tensors_named().iter())
            .all(|((_, a), (_, b))| {
                a.len() == b.len()
                    && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Names of tensors whose bits differ from `other`.
    pub fn diff_tensor_names(&self, other: &TransformerModel) -> Vec<String> {
        self.tensors_named()
            .iter()
            .zip(other.tensors_named().iter())
            .filter(|((_, a), (_, b))| {
                a.len() != b.len()
                    || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
            })
            .map(|((name, _), _)| name.clone())
            .collect()
    }
}

/// Where a patch replaces a value during the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSite {
    /// The FFN output row, before it is added back to the residual stream.
    FfnOutput,
    /// The residual stream row at the layer output.
    HiddenState,
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub layer: usize,
    pub position: usize,
    pub site: PatchSite,
    pub value: Vector,
}

/// A set of forward-pass substitutions.
#[derive(Debug, Clone, Default)]
pub struct PatchSpec {
    pub patches: Vec<Patch>,
}

impl PatchSpec {
    pub fn empty() -> Self {
        PatchSpec { patches: Vec::new() }
    }

    pub fn single(layer: usize, position: usize, site: PatchSite, value: Vector) -> Self {
        PatchSpec { patches: vec![Patch { layer, position, site, value }] }
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        for p in &self.patches {
            if p.layer >= config.n_layers {
                return Err(Error::Patch(format!(
                    "layer {} out of range ({} layers)",
                    p.layer, config.n_layers
                )));
            }
            if p.position >= seq_len {
                return Err(Error::Patch(format!(
                    "position {} out of range (sequence length {seq_len})",
                    p.position
                )));
            }
            if p.value.dim() != config.d_model {
                return Err(Error::Patch(format!(
                    "replacement dim {} != d_model {}",
                    p.value.dim(),
                    config.d_model
                )));
            }
        }
        Ok(())
    }
}

/// Captured per-layer activations from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Attention output `a` added to the residual stream.
    pub attn_out: Matrix,
    /// Residual-stream input of the layer.
    pub resid_in: Matrix,
    /// FFN inner activation `σ(W_fc ln2(a + h) + b_fc)`: the per-token keys.
    pub ffn_inner: Matrix,
    /// FFN output row added to the residual stream.
    pub ffn_out: Matrix,
}

#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

impl ActivationTrace {
    /// Residual-stream state at the output of `layer`, position `pos`.
    pub fn hidden_state(&self, layer: usize, pos: usize) -> Vector {
        let l = &self.layers[layer];
        let mut v = l.resid_in.row_vec(pos);
        v.add_scaled(1.0, &l.attn_out.row_vec(pos));
        v.add_scaled(1.0, &l.ffn_out.row_vec(pos));
        v
    }
}

fn ones(n: usize) -> Vector {
    Vector::from_vec(vec![1.0; n])
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = gaussian(rng) * std;
    }
    m
}

/// Box-Muller standard normal draw.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 16,
            max_seq: 12,
            activation: Activation::Gelu,
            seed: 11,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = tiny_config();
        c.d_ff = 8;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::new(tiny_config()).unwrap();
        let b = TransformerModel::new(tiny_config()).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn fresh_unembedding_is_zero() {
        let m = TransformerModel::new(tiny_config()).unwrap();
        assert!(m.w_unembed.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((Activation::Gelu.derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn tensor_views_cover_all_parameters() {
        let mut m = TransformerModel::new(tiny_config()).unwrap();
        let named = m.tensors_named().len();
        let muts = m.tensors_mut().len();
        assert_eq!(named, muts);
        assert_eq!(named, 2 + 2 * 10 + 2);
    }
}
