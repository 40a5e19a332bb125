//! Manual reverse-mode gradients through the transformer.
//!
//! One backward implementation serves three consumers: full-parameter
//! gradients for pretraining, gradients with respect to vectors injected at
//! patch sites (the value-vector search), and mixed log-prob/KL objectives
//! over the logits.

use super::{
    ForwardCache, LnCache, ModelConfig, PatchSite, PatchSpec, TokenId, TransformerModel,
};
use crate::error::{Error, Result};
use crate::numerics::{softmax, Matrix, Vector};

/// Gradients for every model parameter, same layout as the model.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerGrads>,
    pub ln_f_gain: Vector,
    pub w_unembed: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub ln1_gain: Vector,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ln2_gain: Vector,
    pub w_fc: Matrix,
    pub b_fc: Vector,
    pub w_proj: Matrix,
    pub b_proj: Vector,
}

impl ParamGrads {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        ParamGrads {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq, d),
            layers: (0..config.n_layers)
                .map(|_| LayerGrads {
                    ln1_gain: Vector::zeros(d),
                    w_q: Matrix::zeros(d, d),
                    w_k: Matrix::zeros(d, d),
                    w_v: Matrix::zeros(d, d),
                    w_o: Matrix::zeros(d, d),
                    ln2_gain: Vector::zeros(d),
                    w_fc: Matrix::zeros(f, d),
                    b_fc: Vector::zeros(f),
                    w_proj: Matrix::zeros(d, f),
                    b_proj: Vector::zeros(d),
                })
                .collect(),
            ln_f_gain: Vector::zeros(d),
            w_unembed: Matrix::zeros(config.vocab_size, d),
        }
    }

    /// Flat tensor views in the model's canonical order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.tok_emb.data(), self.pos_emb.data()];
        for l in &self.layers {
            out.push(l.ln1_gain.data());
            out.push(l.w_q.data());
            out.push(l.w_k.data());
            out.push(l.w_v.data());
            out.push(l.w_o.data());
            out.push(l.ln2_gain.data());
            out.push(l.w_fc.data());
            out.push(l.b_fc.data());
            out.push(l.w_proj.data());
            out.push(l.b_proj.data());
        }
        out.push(self.ln_f_gain.data());
        out.push(self.w_unembed.data());
        out
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        self.tok_emb.add_assign(&other.tok_emb);
        self.pos_emb.add_assign(&other.pos_emb);
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.ln1_gain.add_scaled(1.0, &b.ln1_gain);
            a.w_q.add_assign(&b.w_q);
            a.w_k.add_assign(&b.w_k);
            a.w_v.add_assign(&b.w_v);
            a.w_o.add_assign(&b.w_o);
            a.ln2_gain.add_scaled(1.0, &b.ln2_gain);
            a.w_fc.add_assign(&b.w_fc);
            a.b_fc.add_scaled(1.0, &b.b_fc);
            a.w_proj.add_assign(&b.w_proj);
            a.b_proj.add_scaled(1.0, &b.b_proj);
        }
        self.ln_f_gain.add_scaled(1.0, &other.ln_f_gain);
        self.w_unembed.add_assign(&other.w_unembed);
    }
}

/// One term of a differentiable scalar objective over the logits.
#[derive(Debug, Clone)]
pub enum ObjectiveTerm {
    /// `weight * (-log softmax(logits[position])[target])`
    NegLogProb { weight: f64, position: usize, target: TokenId },
    /// `weight * KL(softmax(logits[position]) || reference)`
    KlFromRef { weight: f64, position: usize, reference: Vec<f64> },
}

/// A weighted sum of log-prob and KL terms over per-position logits.
#[derive(Debug, Clone, Default)]
pub struct LogitObjective {
    pub terms: Vec<ObjectiveTerm>,
}

impl LogitObjective {
    pub fn neg_log_prob(weight: f64, position: usize, target: TokenId) -> Self {
        LogitObjective { terms: vec![ObjectiveTerm::NegLogProb { weight, position, target }] }
    }

    pub fn value(&self, logits: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for term in &self.terms {
            match term {
                ObjectiveTerm::NegLogProb { weight, position, target } => {
                    let p = softmax(logits.row(*position));
                    total += weight * -(p[*target].ln());
                }
                ObjectiveTerm::KlFromRef { weight, position, reference } => {
                    let p = softmax(logits.row(*position));
                    let mut kl = 0.0;
                    for (pi, ri) in p.iter().zip(reference) {
                        if *pi > 0.0 {
                            if *ri <= 0.0 {
                                return Err(Error::Domain(
                                    "KL reference has zero mass where p > 0".into(),
                                ));
                            }
                            kl += pi * (pi / ri).ln();
                        }
                    }
                    total += weight * kl;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::Numeric("objective is not finite".into()));
        }
        Ok(total)
    }

    /// Gradient of the objective with respect to the logits.
    pub fn d_logits(&self, logits: &Matrix) -> Matrix {
        let mut d = Matrix::zeros(logits.rows(), logits.cols());
        for term in &self.terms {
            match term {
                ObjectiveTerm::NegLogProb { weight, position, target } => {
                    let p = softmax(logits.row(*position));
                    let row = d.row_mut(*position);
                    for (j, pj) in p.iter().enumerate() {
                        row[j] += weight * pj;
                    }
                    row[*target] -= weight;
                }
                ObjectiveTerm::KlFromRef { weight, position, reference } => {
                    // d/dl_j KL(p||r) = p_j * ((ln p_j - ln r_j) - KL)
                    let p = softmax(logits.row(*position));
                    let mut kl = 0.0;
                    for (pi, ri) in p.iter().zip(reference) {
                        if *pi > 0.0 {
                            kl += pi * (pi / ri).ln();
                        }
                    }
                    let row = d.row_mut(*position);
                    for (j, (pj, rj)) in p.iter().zip(reference).enumerate() {
                        if *pj > 0.0 {
                            row[j] += weight * pj * ((pj / rj).ln() - kl);
                        }
                    }
                }
            }
        }
        d
    }
}

fn layer_norm_backward(
    dy: &Matrix,
    ln: &LnCache,
    gain: &Vector,
    mut dgain: Option<&mut Vector>,
) -> Matrix {
    let (t, d) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(t, d);
    for r in 0..t {
        let dyr = dy.row(r);
        let xh = ln.xhat.row(r);
        if let Some(dg) = dgain.as_deref_mut() {
            for (i, g) in dg.data_mut().iter_mut().enumerate() {
                *g += dyr[i] * xh[i];
            }
        }
        // dxhat = dy * gain
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * gain.data()[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let s = ln.inv_std[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            let dxh = dyr[i] * gain.data()[i];
            out[i] = s * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    dx
}

fn column_sums_into(m: &Matrix, out: &mut Vector) {
    for r in 0..m.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
}

impl TransformerModel {
    /// Reverse pass from a logits gradient.
    ///
    /// `param_grads`, when given, accumulates gradients for every parameter.
    /// `site_requests` asks for the gradient with respect to the value at the
    /// named sites (injected replacements or raw activations alike); results
    /// come back in request order.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: &Matrix,
        mut param_grads: Option<&mut ParamGrads>,
        site_requests: &[(usize, usize, PatchSite)],
    ) -> Vec<Vector> {
        let cfg = &self.config;
        let (t_len, d, h) = (cache.seq_len, cfg.d_model, cfg.n_heads);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut site_grads: Vec<Option<Vector>> = vec![None; site_requests.len()];

        // Unembedding and final layer norm.
        if let Some(pg) = param_grads.as_deref_mut() {
            // nf = gain ⊙ xhat, reconstructed row by row
            for r in 0..t_len {
                let dl = d_logits.row(r);
                let xh = cache.ln_f.xhat.row(r);
                for (v, &dv) in dl.iter().enumerate() {
                    if dv != 0.0 {
                        let wrow = pg.w_unembed.row_mut(v);
                        for i in 0..d {
                            wrow[i] += dv * xh[i] * self.ln_f_gain.data()[i];
                        }
                    }
                }
            }
        }
        let d_nf = d_logits.matmul(&self.w_unembed);
        let mut d_y = layer_norm_backward(
            &d_nf,
            &cache.ln_f,
            &self.ln_f_gain,
            param_grads.as_deref_mut().map(|pg| &mut pg.ln_f_gain),
        );

        for li in (0..cfg.n_layers).rev() {
            let lc = &cache.layers[li];
            let lp = &self.layers[li];

            // d_y is the gradient w.r.t. the (possibly patched) layer output.
            for (ri, req) in site_requests.iter().enumerate() {
                if req.0 == li && req.2 == PatchSite::HiddenState {
                    site_grads[ri] = Some(d_y.row_vec(req.1));
                }
            }
            for &pos in &lc.patched_hidden {
                d_y.row_mut(pos).fill(0.0);
            }

            let mut d_hmid = d_y.clone();
            let mut d_ffn_out = d_y;

            for (ri, req) in site_requests.iter().enumerate() {
                if req.0 == li && req.2 == PatchSite::FfnOutput {
                    site_grads[ri] = Some(d_ffn_out.row_vec(req.1));
                }
            }
            for &pos in &lc.patched_ffn {
                d_ffn_out.row_mut(pos).fill(0.0);
            }

            if let Some(pg) = param_grads.as_deref_mut() {
                let lg = &mut pg.layers[li];
                column_sums_into(&d_ffn_out, &mut lg.b_proj);
                lg.w_proj.add_assign(&d_ffn_out.matmul_tn(&lc.ffn_inner));
            }
            let d_inner = d_ffn_out.matmul(&lp.w_proj);
            let mut d_pre = d_inner;
            for (g, &pre) in d_pre.data_mut().iter_mut().zip(lc.ffn_pre.data()) {
                *g *= cfg.activation.derivative(pre);
            }
            if let Some(pg) = param_grads.as_deref_mut() {
                let lg = &mut pg.layers[li];
                column_sums_into(&d_pre, &mut lg.b_fc);
                lg.w_fc.add_assign(&d_pre.matmul_tn(&lc.n2));
            }
            let d_n2 = d_pre.matmul(&lp.w_fc);
            let d_hmid_from_ln = layer_norm_backward(
                &d_n2,
                &lc.ln2,
                &lp.ln2_gain,
                param_grads.as_deref_mut().map(|pg| &mut pg.layers[li].ln2_gain),
            );
            d_hmid.add_assign(&d_hmid_from_ln);

            let mut d_x = d_hmid.clone();
            let d_attn_out = d_hmid;

            if let Some(pg) = param_grads.as_deref_mut() {
                pg.layers[li].w_o.add_assign(&d_attn_out.matmul_tn(&lc.o_cat));
            }
            let d_ocat = d_attn_out.matmul(&lp.w_o);

            let mut d_q = Matrix::zeros(t_len, d);
            let mut d_k = Matrix::zeros(t_len, d);
            let mut d_v = Matrix::zeros(t_len, d);
            for head in 0..h {
                let off = head * dh;
                let a = &lc.attn[head];
                for t in 0..t_len {
                    let do_row = &d_ocat.row(t)[off..off + dh];
                    // dA and dV over the causal prefix
                    let mut d_a = vec![0.0; t + 1];
                    for (u, da) in d_a.iter_mut().enumerate() {
                        *da = crate::numerics::dot(do_row, &lc.v.row(u)[off..off + dh]);
                    }
                    for u in 0..=t {
                        let w = a.get(t, u);
                        if w != 0.0 {
                            let dvrow = &mut d_v.row_mut(u)[off..off + dh];
                            for (dv, &g) in dvrow.iter_mut().zip(do_row) {
                                *dv += w * g;
                            }
                        }
                    }
                    // softmax backward
                    let mut inner = 0.0;
                    for u in 0..=t {
                        inner += a.get(t, u) * d_a[u];
                    }
                    for u in 0..=t {
                        let ds = a.get(t, u) * (d_a[u] - inner) * scale;
                        if ds != 0.0 {
                            {
                                let dqrow = &mut d_q.row_mut(t)[off..off + dh];
                                let krow = &lc.k.row(u)[off..off + dh];
                                for (dq, &kk) in dqrow.iter_mut().zip(krow) {
                                    *dq += ds * kk;
                                }
                            }
                            {
                                let dkrow = &mut d_k.row_mut(u)[off..off + dh];
                                let qrow = &lc.q.row(t)[off..off + dh];
                                for (dk, &qq) in dkrow.iter_mut().zip(qrow) {
                                    *dk += ds * qq;
                                }
                            }
                        }
                    }
                }
            }

            if let Some(pg) = param_grads.as_deref_mut() {
                let lg = &mut pg.layers[li];
                lg.w_q.add_assign(&d_q.matmul_tn(&lc.n1));
                lg.w_k.add_assign(&d_k.matmul_tn(&lc.n1));
                lg.w_v.add_assign(&d_v.matmul_tn(&lc.n1));
            }
            let mut d_n1 = d_q.matmul(&lp.w_q);
            d_n1.add_assign(&d_k.matmul(&lp.w_k));
            d_n1.add_assign(&d_v.matmul(&lp.w_v));
            let d_x_from_ln = layer_norm_backward(
                &d_n1,
                &lc.ln1,
                &lp.ln1_gain,
                param_grads.as_deref_mut().map(|pg| &mut pg.layers[li].ln1_gain),
            );
            d_x.add_assign(&d_x_from_ln);

            d_y = d_x;
        }

        // Embedding gradients.
        if let (Some(pg), Some(tokens)) = (param_grads, &cache.tokens) {
            for (t, &tok) in tokens.iter().enumerate() {
                let g = d_y.row(t);
                let te = pg.tok_emb.row_mut(tok);
                for (a, &b) in te.iter_mut().zip(g) {
                    *a += b;
                }
                let pe = pg.pos_emb.row_mut(t);
                for (a, &b) in pe.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }

        site_grads
            .into_iter()
            .map(|g| g.expect("requested site not visited; invalid layer index"))
            .collect()
    }
}

/// Objective value and exact gradient with respect to a vector injected at
/// `(layer, position)` as the FFN output.
pub fn grad_hidden(
    model: &TransformerModel,
    tokens: &[TokenId],
    objective: &LogitObjective,
    site: (usize, usize),
    injected: &Vector,
) -> Result<(f64, Vector)> {
    let (layer, position) = site;
    let patch = PatchSpec::single(layer, position, PatchSite::FfnOutput, injected.clone());
    let cache = model.forward_cached(tokens, &patch)?;
    let value = objective.value(&cache.logits)?;
    let d_logits = objective.d_logits(&cache.logits);
    let grads = model.backward(&cache, &d_logits, None, &[(layer, position, PatchSite::FfnOutput)]);
    let grad = grads.into_iter().next().expect("one site requested");
    if !grad.is_finite() {
        return Err(Error::Numeric("non-finite gradient at injected site".into()));
    }
    Ok((value, grad))
}
