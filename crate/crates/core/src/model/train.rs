//! Pretraining: Adam over the full-sequence language-modeling loss.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamGrads, PatchSpec, TokenId, TransformerModel};
use crate::error::{Error, Result};
use crate::exec;
use crate::numerics::{softmax, Matrix};

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub steps: usize,
    /// Peak learning rate; linear warmup then cosine decay to 10%.
    pub lr: f64,
    pub batch_size: usize,
    /// Extra loss weight on the final (answer) token of each sequence.
    pub answer_weight: f64,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 1200,
            lr: 3e-3,
            batch_size: 32,
            answer_weight: 4.0,
            warmup_steps: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainLog {
    /// Mean cross-entropy per optimizer step.
    pub losses: Vec<f64>,
}

/// Adam moments, aligned with the model's canonical tensor order.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(model: &TransformerModel) -> Self {
        let sizes: Vec<usize> = model.tensors_named().iter().map(|(_, t)| t.len()).collect();
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }

    pub fn update(&mut self, model: &mut TransformerModel, grads: &ParamGrads, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let bc1 = 1.0 - B1.powi(self.step as i32);
        let bc2 = 1.0 - B2.powi(self.step as i32);
        let gs = grads.tensors();
        for (ti, params) in model.tensors_mut().into_iter().enumerate() {
            let g = gs[ti];
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for i in 0..params.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}

/// Weighted mean cross-entropy over next-token predictions plus the gradient
/// seed. The final token of each sequence is the fact's answer and carries
/// `answer_weight`.
fn sequence_loss_and_grads(
    model: &TransformerModel,
    tokens: &[TokenId],
    answer_weight: f64,
    grads: &mut ParamGrads,
) -> Result<f64> {
    let cache = model.forward_cached(tokens, &PatchSpec::empty())?;
    let predicted = tokens.len() - 1;
    if predicted == 0 {
        return Err(Error::Input("training sequence needs at least 2 tokens".into()));
    }
    let total_weight = (predicted - 1) as f64 + answer_weight;
    let mut d_logits = Matrix::zeros(tokens.len(), model.config.vocab_size);
    let mut loss = 0.0;
    for t in 0..predicted {
        let w = if t + 1 == predicted { answer_weight } else { 1.0 } / total_weight;
        let p = softmax(cache.logits.row(t));
        let target = tokens[t + 1];
        loss -= p[target].max(1e-300).ln() * w;
        let row = d_logits.row_mut(t);
        for (j, pj) in p.iter().enumerate() {
            row[j] += w * pj;
        }
        row[target] -= w;
    }
    model.backward(&cache, &d_logits, Some(grads), &[]);
    Ok(loss)
}

/// Train `model` in place on the fact corpus; returns the loss curve.
///
/// Deterministic per seed. Fails with a training error if the loss diverges
/// past 10x its initial value or goes non-finite.
pub fn pretrain_base(
    model: &mut TransformerModel,
    corpus: &[Vec<TokenId>],
    opts: &PretrainOptions,
) -> Result<PretrainLog> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    if opts.steps == 0 {
        return Ok(PretrainLog { losses: Vec::new() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = AdamState::new(model);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len(); // forces a shuffle on first use
    let mut losses = Vec::with_capacity(opts.steps);
    let mut initial_loss = f64::NAN;

    for step in 0..opts.steps {
        let mut batch: Vec<&Vec<TokenId>> = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }

        // Per-chunk gradient accumulation; merge order is fixed, so the sum
        // is bit-identical across thread counts and execution modes.
        let model_ref: &TransformerModel = model;
        let (grads, loss_sum, err) = exec::chunked_fold(
            &batch,
            || (ParamGrads::zeros(&model_ref.config), 0.0f64, None::<String>),
            |(mut g, mut l, mut e), seq| {
                if e.is_none() {
                    match sequence_loss_and_grads(model_ref, seq, opts.answer_weight, &mut g) {
                        Ok(loss) => l += loss,
                        Err(err) => e = Some(err.to_string()),
                    }
                }
                (g, l, e)
            },
            |(mut ga, la, ea), (gb, lb, eb)| {
                ga.add_assign(&gb);
                (ga, la + lb, ea.or(eb))
            },
        );
        if let Some(msg) = err {
            return Err(Error::Training(format!("step {step}: {msg}")));
        }
        let mean_loss = loss_sum / batch.len() as f64;
        if step == 0 {
            initial_loss = mean_loss;
        }
        if !mean_loss.is_finite() || mean_loss > initial_loss * 10.0 {
            return Err(Error::Training(format!(
                "divergence at step {step}: loss {mean_loss} (initial {initial_loss})"
            )));
        }
        // Mean gradient over the batch.
        let mut grads = grads;
        let inv = 1.0 / batch.len() as f64;
        scale_grads(&mut grads, inv);
        adam.update(model, &grads, schedule_lr(opts, step));
        losses.push(mean_loss);
    }
    Ok(PretrainLog { losses })
}

/// Linear warmup to the peak rate, then cosine decay to 10% of it.
fn schedule_lr(opts: &PretrainOptions, step: usize) -> f64 {
    if opts.warmup_steps > 0 && step < opts.warmup_steps {
        return opts.lr * (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let span = opts.steps.saturating_sub(opts.warmup_steps).max(1) as f64;
    let progress = (step - opts.warmup_steps) as f64 / span;
    let floor = 0.1 * opts.lr;
    floor + 0.5 * (opts.lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn scale_grads(g: &mut ParamGrads, s: f64) {
    g.tok_emb.scale(s);
    g.pos_emb.scale(s);
    for l in &mut g.layers {
        for v in l.ln1_gain.data_mut() {
            *v *= s;
        }
        l.w_q.scale(s);
        l.w_k.scale(s);
        l.w_v.scale(s);
        l.w_o.scale(s);
        for v in l.ln2_gain.data_mut() {
            *v *= s;
        }
        l.w_fc.scale(s);
        for v in l.b_fc.data_mut() {
            *v *= s;
        }
        l.w_proj.scale(s);
        for v in l.b_proj.data_mut() {
            *v *= s;
        }
    }
    for v in g.ln_f_gain.data_mut() {
        *v *= s;
    }
    g.w_unembed.scale(s);
}

impl PretrainLog {
    /// Moving average of the loss curve with the given window.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        if self.losses.len() < window || window == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.losses.len() - window + 1);
        let mut sum: f64 = self.losses[..window].iter().sum();
        out.push(sum / window as f64);
        for i in window..self.losses.len() {
            sum += self.losses[i] - self.losses[i - window];
            out.push(sum / window as f64);
        }
        out
    }
}
