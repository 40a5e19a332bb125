//! Causal tracing: locate the layer whose hidden state carries the fact.
//!
//! Three runs per fact: clean (capture), corrupted-subject, and one
//! corrupted-with-restoration run per (layer, position) cell. The indirect
//! effect of a cell is the restored answer probability minus the corrupted
//! one; the edit layer is the row with the largest effect.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{gaussian, ModelConfig, PatchSite, PatchSpec, TokenId, TransformerModel};
use crate::numerics::{softmax, Matrix};

#[derive(Debug, Clone)]
pub struct TraceConfig {
    /// Noise scale in units of per-dimension embedding std.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { noise_scale: 3.0, seed: 0 }
    }
}

/// Indirect-effect grid and the selected layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceResult {
    /// `n_layers x prompt_len` indirect effects.
    pub ie_grid: Matrix,
    pub p_clean: f64,
    pub p_corrupt: f64,
    pub selected_layer: usize,
}

impl TraceResult {
    /// Independent argmax over the grid: max over positions per layer, then
    /// the layer with the largest maximum (ties to the lower layer).
    pub fn argmax_layer(&self) -> usize {
        let mut best_layer = 0;
        let mut best = f64::NEG_INFINITY;
        for l in 0..self.ie_grid.rows() {
            let row_max = self.ie_grid.row(l).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if row_max > best {
                best = row_max;
                best_layer = l;
            }
        }
        best_layer
    }

    /// `(layer, position)` of the single largest indirect effect.
    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut val = f64::NEG_INFINITY;
        for l in 0..self.ie_grid.rows() {
            for p in 0..self.ie_grid.cols() {
                if self.ie_grid.get(l, p) > val {
                    val = self.ie_grid.get(l, p);
                    best = (l, p);
                }
            }
        }
        best
    }
}

/// Add seeded Gaussian noise (scale x per-dimension embedding std) to the
/// embeddings inside the subject span; everything else is bit-identical.
pub fn corrupt_subject(
    model: &TransformerModel,
    tokens: &[TokenId],
    subject_span: (usize, usize),
    noise_scale: f64,
    seed: u64,
) -> Result<Matrix> {
    let (start, end) = subject_span;
    if start >= end || end > tokens.len() {
        return Err(Error::Span(format!(
            "subject span [{start},{end}) invalid for {} tokens",
            tokens.len()
        )));
    }
    let mut embeds = model.embed(tokens)?;
    let d = model.config.d_model;
    // Per-dimension std of the token embedding table.
    let vocab = model.config.vocab_size as f64;
    let mut std = vec![0.0; d];
    for c in 0..d {
        let mut mean = 0.0;
        for r in 0..model.config.vocab_size {
            mean += model.tok_emb.get(r, c);
        }
        mean /= vocab;
        let mut var = 0.0;
        for r in 0..model.config.vocab_size {
            let x = model.tok_emb.get(r, c) - mean;
            var += x * x;
        }
        std[c] = (var / vocab).sqrt();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pos in start..end {
        let row = embeds.row_mut(pos);
        for (c, v) in row.iter_mut().enumerate() {
            *v += noise_scale * std[c] * gaussian(&mut rng);
        }
    }
    Ok(embeds)
}

fn answer_prob(logits: &Matrix, answer: TokenId) -> f64 {
    softmax(logits.row(logits.rows() - 1))[answer]
}

/// Run the three-pass trace for a fact the model currently answers.
pub fn causal_trace(
    model: &TransformerModel,
    tokens: &[TokenId],
    subject_span: (usize, usize),
    answer: TokenId,
    config: &TraceConfig,
) -> Result<TraceResult> {
    let greedy = model.greedy_decode(tokens, 1)?[0];
    if greedy != answer {
        return Err(Error::Trace(format!(
            "model answers token {greedy}, not {answer}, on the clean prompt; tracing requires a memorized fact"
        )));
    }
    let (clean_logits, clean_trace) = model.forward(tokens, true)?;
    let clean_trace = clean_trace.expect("capture requested");
    let p_clean = answer_prob(&clean_logits, answer);

    let corrupted = corrupt_subject(model, tokens, subject_span, config.noise_scale, config.seed)?;
    let (corrupt_logits, _) = model.forward_embedded(corrupted.clone(), &PatchSpec::empty(), false)?;
    let p_corrupt = answer_prob(&corrupt_logits, answer);

    let n_layers = model.config.n_layers;
    let positions = tokens.len();
    let cells = exec::map_indices(n_layers * positions, |idx| -> Result<f64> {
        let (layer, pos) = (idx / positions, idx % positions);
        let clean_state = clean_trace.hidden_state(layer, pos);
        let patch = PatchSpec::single(layer, pos, PatchSite::HiddenState, clean_state);
        let (logits, _) = model.forward_embedded(corrupted.clone(), &patch, false)?;
        Ok(answer_prob(&logits, answer) - p_corrupt)
    });
    let mut ie_grid = Matrix::zeros(n_layers, positions);
    for (idx, cell) in cells.into_iter().enumerate() {
        ie_grid.data_mut()[idx] = cell?;
    }

    let mut result = TraceResult { ie_grid, p_clean, p_corrupt, selected_layer: 0 };
    result.selected_layer = result.argmax_layer();
    Ok(result)
}

/// How edit layers are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelectMode {
    /// The `k` highest layer indices.
    FixedLastK,
    /// The single traced layer with the largest indirect effect.
    Traced,
}

pub fn select_edit_layers(
    config: &ModelConfig,
    mode: LayerSelectMode,
    trace: Option<&TraceResult>,
    k: usize,
) -> Result<Vec<usize>> {
    match mode {
        LayerSelectMode::FixedLastK => {
            if k == 0 || k > config.n_layers {
                return Err(Error::Config(format!(
                    "k = {k} outside 1..={} layers",
                    config.n_layers
                )));
            }
            Ok((config.n_layers - k..config.n_layers).collect())
        }
        LayerSelectMode::Traced => {
            let trace =
                trace.ok_or_else(|| Error::Config("traced mode requires a trace result".into()))?;
            Ok(vec![trace.selected_layer])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};

    fn config() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 16,
            max_seq: 10,
            activation: Activation::Gelu,
            seed: 21,
        }
    }

    #[test]
    fn corruption_touches_only_the_span() {
        let m = TransformerModel::new(config()).unwrap();
        let tokens = vec![1, 2, 3, 4, 5];
        let clean = m.embed(&tokens).unwrap();
        let corrupted = corrupt_subject(&m, &tokens, (1, 3), 3.0, 7).unwrap();
        for pos in [0usize, 3, 4] {
            for c in 0..16 {
                assert_eq!(clean.get(pos, c).to_bits(), corrupted.get(pos, c).to_bits());
            }
        }
        for pos in 1..3 {
            assert!(clean.row(pos) != corrupted.row(pos));
        }
    }

    #[test]
    fn corruption_is_deterministic_per_seed() {
        let m = TransformerModel::new(config()).unwrap();
        let tokens = vec![1, 2, 3, 4];
        let a = corrupt_subject(&m, &tokens, (0, 2), 3.0, 11).unwrap();
        let b = corrupt_subject(&m, &tokens, (0, 2), 3.0, 11).unwrap();
        assert!(a.bit_eq(&b));
        let c = corrupt_subject(&m, &tokens, (0, 2), 3.0, 12).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn corrupt_rejects_bad_span() {
        let m = TransformerModel::new(config()).unwrap();
        assert!(matches!(
            corrupt_subject(&m, &[1, 2], (1, 1), 3.0, 0),
            Err(Error::Span(_))
        ));
    }

    #[test]
    fn trace_rejects_unknown_fact() {
        // A fresh model with zero unembedding answers token 0 greedily; ask
        // for a different answer and tracing must refuse.
        let m = TransformerModel::new(config()).unwrap();
        let r = causal_trace(&m, &[1, 2, 3], (0, 1), 5, &TraceConfig::default());
        assert!(matches!(r, Err(Error::Trace(_))));
    }

    #[test]
    fn select_layers_fixed_last_k() {
        let cfg = config();
        assert_eq!(
            select_edit_layers(&cfg, LayerSelectMode::FixedLastK, None, 3).unwrap(),
            vec![1, 2, 3]
        );
        let mut one = cfg.clone();
        one.n_layers = 1;
        assert_eq!(
            select_edit_layers(&one, LayerSelectMode::FixedLastK, None, 1).unwrap(),
            vec![0]
        );
        assert!(matches!(
            select_edit_layers(&cfg, LayerSelectMode::FixedLastK, None, 9),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn traced_mode_needs_a_trace() {
        let cfg = config();
        assert!(matches!(
            select_edit_layers(&cfg, LayerSelectMode::Traced, None, 1),
            Err(Error::Config(_))
        ));
        let trace = TraceResult {
            ie_grid: Matrix::from_vec(2, 2, vec![0.1, 0.0, 0.6, 0.2]).unwrap(),
            p_clean: 0.9,
            p_corrupt: 0.1,
            selected_layer: 1,
        };
        assert_eq!(
            select_edit_layers(&cfg, LayerSelectMode::Traced, Some(&trace), 1).unwrap(),
            vec![1]
        );
        assert_eq!(trace.argmax_layer(), 1);
    }
}
