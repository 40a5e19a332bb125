//! Forward pass with activation capture and patching.

use super::{
    ActivationTrace, LayerTrace, PatchSite, PatchSpec, TokenId, TransformerModel, LN_EPS,
};
use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax, softmax, Matrix, Vector};

/// Layer-norm cache: normalized rows and per-row inverse std.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Everything the backward pass needs from one forward run.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Option<Vec<TokenId>>,
    pub seq_len: usize,
    pub layers: Vec<LayerCache>,
    pub final_hidden: Matrix,
    pub ln_f: LnCache,
    pub logits: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub resid_in: Matrix,
    pub ln1: LnCache,
    pub n1: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Per-head causal attention weights, each `T x T` (zero above diagonal).
    pub attn: Vec<Matrix>,
    pub o_cat: Matrix,
    pub attn_out: Matrix,
    pub ln2: LnCache,
    pub n2: Matrix,
    pub ffn_pre: Matrix,
    pub ffn_inner: Matrix,
    /// FFN output after any `FfnOutput` patches.
    pub ffn_out: Matrix,
    /// Layer output after any `HiddenState` patches.
    pub resid_out: Matrix,
    pub patched_ffn: Vec<usize>,
    pub patched_hidden: Vec<usize>,
}

fn layer_norm(x: &Matrix, gain: &Vector) -> (Matrix, LnCache) {
    let (t, d) = (x.rows(), x.cols());
    let mut xhat = Matrix::zeros(t, d);
    let mut out = Matrix::zeros(t, d);
    let mut inv_std = vec![0.0; t];
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = s;
        let xh = xhat.row_mut(r);
        for (i, &v) in row.iter().enumerate() {
            xh[i] = (v - mean) * s;
        }
        let o = out.row_mut(r);
        for i in 0..d {
            o[i] = xhat.get(r, i) * gain.data()[i];
        }
    }
    (out, LnCache { xhat, inv_std })
}

impl TransformerModel {
    /// Token + positional embeddings for a validated token sequence.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Matrix> {
        self.validate_tokens(tokens)?;
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(t);
            for (i, v) in row.iter_mut().enumerate() {
                *v = self.tok_emb.get(tok, i) + self.pos_emb.get(t, i);
            }
        }
        Ok(x)
    }

    pub fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence length {} outside 1..={}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary ({} entries)",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Full forward pass from precomputed embeddings.
    pub fn forward_cached_embedded(
        &self,
        embeds: Matrix,
        patches: &PatchSpec,
    ) -> Result<ForwardCache> {
        let seq_len = embeds.rows();
        if seq_len == 0 || seq_len > self.config.max_seq {
            return Err(Error::Input(format!(
                "embedded sequence length {seq_len} outside 1..={}",
                self.config.max_seq
            )));
        }
        patches.validate(&self.config, seq_len)?;
        let cfg = &self.config;
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = embeds;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let resid_in = x.clone();
            let (n1, ln1) = layer_norm(&x, &layer.ln1_gain);
            let q = n1.matmul_nt(&layer.w_q);
            let k = n1.matmul_nt(&layer.w_k);
            let v = n1.matmul_nt(&layer.w_v);

            let mut attn = Vec::with_capacity(h);
            let mut o_cat = Matrix::zeros(seq_len, d);
            for head in 0..h {
                let off = head * dh;
                let mut a = Matrix::zeros(seq_len, seq_len);
                for t in 0..seq_len {
                    let qrow = &q.row(t)[off..off + dh];
                    let mut scores = vec![0.0; t + 1];
                    for (u, s) in scores.iter_mut().enumerate() {
                        *s = dot(qrow, &k.row(u)[off..off + dh]) * scale;
                    }
                    let probs = softmax(&scores);
                    for (u, p) in probs.iter().enumerate() {
                        a.set(t, u, *p);
                    }
                    let orow = &mut o_cat.row_mut(t)[off..off + dh];
                    for (u, p) in probs.iter().enumerate() {
                        let vrow = &v.row(u)[off..off + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
                attn.push(a);
            }
            let attn_out = o_cat.matmul_nt(&layer.w_o);

            let mut hmid = resid_in.clone();
            hmid.add_assign(&attn_out);

            let (n2, ln2) = layer_norm(&hmid, &layer.ln2_gain);
            let mut ffn_pre = n2.matmul_nt(&layer.w_fc);
            for t in 0..seq_len {
                for (p, b) in ffn_pre.row_mut(t).iter_mut().zip(layer.b_fc.data()) {
                    *p += b;
                }
            }
            let mut ffn_inner = ffn_pre.clone();
            for vv in ffn_inner.data_mut() {
                *vv = cfg.activation.apply(*vv);
            }
            let mut ffn_out = ffn_inner.matmul_nt(&layer.w_proj);
            for t in 0..seq_len {
                for (o, b) in ffn_out.row_mut(t).iter_mut().zip(layer.b_proj.data()) {
                    *o += b;
                }
            }

            let mut patched_ffn = Vec::new();
            for p in &patches.patches {
                if p.layer == li && p.site == PatchSite::FfnOutput {
                    ffn_out.set_row(p.position, p.value.data());
                    patched_ffn.push(p.position);
                }
            }

            let mut resid_out = hmid.clone();
            resid_out.add_assign(&ffn_out);

            let mut patched_hidden = Vec::new();
            for p in &patches.patches {
                if p.layer == li && p.site == PatchSite::HiddenState {
                    resid_out.set_row(p.position, p.value.data());
                    patched_hidden.push(p.position);
                }
            }

            x = resid_out.clone();
            layers.push(LayerCache {
                resid_in,
                ln1,
                n1,
                q,
                k,
                v,
                attn,
                o_cat,
                attn_out,
                ln2,
                n2,
                ffn_pre,
                ffn_inner,
                ffn_out,
                resid_out,
                patched_ffn,
                patched_hidden,
            });
        }

        let final_hidden = x;
        let (nf, ln_f) = layer_norm(&final_hidden, &self.ln_f_gain);
        let logits = nf.matmul_nt(&self.w_unembed);
        Ok(ForwardCache {
            tokens: None,
            seq_len,
            layers,
            final_hidden,
            ln_f,
            logits,
        })
    }

    /// Full forward pass from token ids.
    pub fn forward_cached(&self, tokens: &[TokenId], patches: &PatchSpec) -> Result<ForwardCache> {
        let embeds = self.embed(tokens)?;
        let mut cache = self.forward_cached_embedded(embeds, patches)?;
        cache.tokens = Some(tokens.to_vec());
        Ok(cache)
    }

    /// Per-position logits, optionally with the captured activation trace.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        capture: bool,
    ) -> Result<(Matrix, Option<ActivationTrace>)> {
        let cache = self.forward_cached(tokens, &PatchSpec::empty())?;
        let trace = capture.then(|| cache.to_trace());
        Ok((cache.logits, trace))
    }

    /// Forward with substituted activations.
    pub fn forward_with_patch(&self, tokens: &[TokenId], patches: &PatchSpec) -> Result<Matrix> {
        Ok(self.forward_cached(tokens, patches)?.logits)
    }

    /// Forward from custom embeddings (used by causal tracing).
    pub fn forward_embedded(
        &self,
        embeds: Matrix,
        patches: &PatchSpec,
        capture: bool,
    ) -> Result<(Matrix, Option<ActivationTrace>)> {
        let cache = self.forward_cached_embedded(embeds, patches)?;
        let trace = capture.then(|| cache.to_trace());
        Ok((cache.logits, trace))
    }

    /// Sum over target positions of the log-probability of the true token.
    pub fn target_log_prob(
        &self,
        prompt: &[TokenId],
        target: &[TokenId],
        patches: Option<&PatchSpec>,
    ) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::Input("empty target".into()));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(target);
        let empty = PatchSpec::empty();
        let logits = self.forward_with_patch(&tokens, patches.unwrap_or(&empty))?;
        let mut lp = 0.0;
        for (k, &tok) in target.iter().enumerate() {
            let pos = prompt.len() + k - 1;
            let ls = log_softmax(logits.row(pos));
            lp += ls[tok];
        }
        Ok(lp)
    }

    /// Next-token distribution at the last position.
    pub fn next_token_dist(&self, tokens: &[TokenId], patches: Option<&PatchSpec>) -> Result<Vec<f64>> {
        let empty = PatchSpec::empty();
        let logits = self.forward_with_patch(tokens, patches.unwrap_or(&empty))?;
        Ok(softmax(logits.row(logits.rows() - 1)))
    }

    /// Greedy argmax continuation of `prompt`, `n` tokens long. Ties resolve
    /// to the lowest token id.
    pub fn greedy_decode(&self, prompt: &[TokenId], n: usize) -> Result<Vec<TokenId>> {
        let mut tokens = prompt.to_vec();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let logits = self.forward_with_patch(&tokens, &PatchSpec::empty())?;
            let row = logits.row(logits.rows() - 1);
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(best);
            tokens.push(best);
        }
        Ok(out)
    }
}

impl ForwardCache {
    pub fn to_trace(&self) -> ActivationTrace {
        ActivationTrace {
            layers: self
                .layers
                .iter()
                .map(|l| LayerTrace {
                    attn_out: l.attn_out.clone(),
                    resid_in: l.resid_in.clone(),
                    ffn_inner: l.ffn_inner.clone(),
                    ffn_out: l.ffn_out.clone(),
                })
                .collect(),
        }
    }
}
