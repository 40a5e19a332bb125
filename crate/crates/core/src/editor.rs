//! Single-edit machinery: key/value location, the closed-form rank-1 value
//! rewrite, the structural translation loss, and edit orchestration.
//!
//! An edit installs a new (subject, relation) -> object mapping in the value
//! projection of selected FFN layers. Keys come from per-token FFN inner
//! activations averaged over prefixed prompt variants and pooled over the
//! subject span; the value vector is found by gradient search on an injected
//! FFN output; the rewrite is a rank-1 closed-form solve against a key
//! covariance; a few structural-loss steps then pull the mapping toward the
//! translation form `W_proj k_s + h_r ≈ v*`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::model::{grad_hidden, LogitObjective, ObjectiveTerm, TokenId, TransformerModel};
use crate::numerics::{cholesky, cholesky_solve, pool_span, Matrix, Vector};

/// A rephrased prompt sharing the parent edit's answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RephrasePrompt {
    pub tokens: Vec<TokenId>,
}

/// An unrelated probe whose answer must survive editing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityProbe {
    pub tokens: Vec<TokenId>,
    pub answer: TokenId,
}

/// One fact edit: the triple, its rendered prompt with exact token spans,
/// rephrases, and locality probes.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSample {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
    pub prompt_tokens: Vec<TokenId>,
    pub subject_span: (usize, usize),
    pub relation_span: (usize, usize),
    /// Token the edited model must produce after the prompt.
    pub target_token: TokenId,
    pub old_target_token: TokenId,
    pub rephrases: Vec<RephrasePrompt>,
    pub locality: Vec<LocalityProbe>,
    /// `"{subject} is a"` tokens, the drift-control prompt for the value search.
    pub essence_tokens: Vec<TokenId>,
    pub chain_parent: Option<usize>,
}

impl EditSample {
    pub fn validate(&self) -> Result<()> {
        let len = self.prompt_tokens.len();
        let (sm, sn) = self.subject_span;
        let (rm, rn) = self.relation_span;
        if sm >= sn || sn > len || rm >= rn || rn > len {
            return Err(Error::Span(format!(
                "sample {}: spans [{sm},{sn}) / [{rm},{rn}) invalid for prompt length {len}",
                self.id
            )));
        }
        if sm < rn && rm < sn {
            return Err(Error::Span(format!("sample {}: spans overlap", self.id)));
        }
        if self.new_object == self.old_object {
            return Err(Error::Data(format!(
                "sample {}: new object equals old object",
                self.id
            )));
        }
        if self.rephrases.is_empty() || self.locality.is_empty() {
            return Err(Error::Data(format!(
                "sample {}: needs at least one rephrase and one locality probe",
                self.id
            )));
        }
        Ok(())
    }

    pub fn last_subject_pos(&self) -> usize {
        self.subject_span.1 - 1
    }
}

/// Which span pools the key used for the closed-form rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyMode {
    /// Subject-span pooled key (structural mapping).
    SubjectSpan,
    /// Key pooled over the combined subject+relation extent, the mixed
    /// representation used by the structural-mapping ablation.
    MixedSpan,
}

/// Editing hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditHyper {
    /// Number of prompt variants for key/value averaging; variant 0 is the
    /// bare prompt, the rest carry sampled prefixes.
    pub n_prefixes: usize,
    pub v_steps: usize,
    pub v_lr: f64,
    pub kl_weight: f64,
    /// Weight of the editing objective inside the value search.
    pub alpha1: f64,
    /// Weight of the structural loss refinement.
    pub alpha2: f64,
    pub st_steps: usize,
    /// Structural refinement rate at desk scale (1e-6 is the LLM-scale value).
    pub st_lr: f64,
    pub key_mode: KeyMode,
}

impl Default for EditHyper {
    fn default() -> Self {
        EditHyper {
            n_prefixes: 2,
            v_steps: 40,
            v_lr: 1.0,
            kl_weight: 0.0625,
            alpha1: 0.5,
            alpha2: 0.5,
            st_steps: 5,
            st_lr: 1e-2,
            key_mode: KeyMode::SubjectSpan,
        }
    }
}

impl EditHyper {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha1 + self.alpha2 - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "alpha1 + alpha2 must equal 1, got {} + {}",
                self.alpha1, self.alpha2
            )));
        }
        if self.n_prefixes == 0 {
            return Err(Error::Config("n_prefixes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Ridge-regularized second moment of keys, with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    c: Matrix,
    chol: Matrix,
    pub ridge: f64,
    pub sample_count: usize,
}

impl CovMatrix {
    pub fn new(c: Matrix, ridge: f64, sample_count: usize) -> Result<Self> {
        if c.rows() != c.cols() {
            return Err(Error::Dimension("covariance must be square".into()));
        }
        let mut asym: f64 = 0.0;
        for r in 0..c.rows() {
            for col in (r + 1)..c.cols() {
                asym = asym.max((c.get(r, col) - c.get(col, r)).abs());
            }
        }
        if asym > 1e-10 {
            return Err(Error::Algebra(format!("covariance asymmetric by {asym}")));
        }
        let chol = cholesky(&c)?;
        Ok(CovMatrix { c, chol, ridge, sample_count })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    /// `C^{-1} v`.
    pub fn solve(&self, v: &Vector) -> Vector {
        cholesky_solve(&self.chol, v)
    }
}

/// A prompt position whose key feeds the covariance estimate.
#[derive(Debug, Clone)]
pub struct KeyPrompt {
    pub tokens: Vec<TokenId>,
    /// Position whose FFN inner activation is the key (last subject token).
    pub key_pos: usize,
}

/// `C = (1/n) Σ k k^T + λ I` over last-subject-token keys, one layer.
pub fn compute_cov(
    model: &TransformerModel,
    prompts: &[KeyPrompt],
    layer: usize,
    lambda: f64,
) -> Result<CovMatrix> {
    let mut covs = compute_cov_multi(model, prompts, &[layer], lambda)?;
    Ok(covs.remove(0))
}

/// Covariances for several layers from a single pass over the prompts.
pub fn compute_cov_multi(
    model: &TransformerModel,
    prompts: &[KeyPrompt],
    layers: &[usize],
    lambda: f64,
) -> Result<Vec<CovMatrix>> {
    if prompts.is_empty() {
        return Err(Error::Data("empty key corpus".into()));
    }
    if lambda <= 0.0 {
        return Err(Error::Config("covariance ridge must be positive".into()));
    }
    let d_ff = model.config.d_ff;
    let init = || (vec![Matrix::zeros(d_ff, d_ff); layers.len()], None::<String>);
    let (sums, err) = exec::chunked_fold(
        prompts,
        init,
        |(mut acc, mut err), prompt| {
            if err.is_none() {
                match model.forward(&prompt.tokens, true) {
                    Ok((_, trace)) => {
                        let trace = trace.expect("capture requested");
                        for (li, &layer) in layers.iter().enumerate() {
                            let k = trace.layers[layer].ffn_inner.row_vec(prompt.key_pos);
                            acc[li].add_outer(1.0, &k, &k);
                        }
                    }
                    Err(e) => err = Some(e.to_string()),
                }
            }
            (acc, err)
        },
        |(mut a, ea), (b, eb)| {
            for (x, y) in a.iter_mut().zip(&b) {
                x.add_assign(y);
            }
            (a, ea.or(eb))
        },
    );
    if let Some(msg) = err {
        return Err(Error::Data(format!("covariance key extraction failed: {msg}")));
    }
    let n = prompts.len() as f64;
    sums.into_iter()
        .map(|mut c| {
            c.scale(1.0 / n);
            for i in 0..d_ff {
                c.set(i, i, c.get(i, i) + lambda);
            }
            CovMatrix::new(c, lambda, prompts.len())
        })
        .collect()
}

/// Deterministic prefix variants: the first is empty (bare prompt), the rest
/// are 1-3 random vocabulary tokens.
pub fn sample_prefixes(vocab_size: usize, n: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    out.push(Vec::new());
    for _ in 1..n {
        let len = rng.gen_range(1..=3usize);
        out.push((0..len).map(|_| rng.gen_range(0..vocab_size)).collect());
    }
    out
}

/// Per-token keys averaged over prefix variants, plus the pooled vectors.
#[derive(Debug, Clone)]
pub struct KStarResult {
    /// `prompt_len x d_ff` mean inner activations.
    pub per_token: Matrix,
    pub k_s: Vector,
    pub k_r: Vector,
    /// Key pooled over the combined subject+relation extent.
    pub k_mixed: Vector,
}

impl KStarResult {
    pub fn edit_key(&self, mode: KeyMode) -> &Vector {
        match mode {
            KeyMode::SubjectSpan => &self.k_s,
            KeyMode::MixedSpan => &self.k_mixed,
        }
    }
}

/// Average over prefixed variants of the per-token FFN inner activation at
/// `layer`, pooled over the sample's spans.
pub fn compute_k_star(
    model: &TransformerModel,
    sample: &EditSample,
    layer: usize,
    prefixes: &[Vec<TokenId>],
) -> Result<KStarResult> {
    if prefixes.is_empty() {
        return Err(Error::Config("at least one prefix variant required".into()));
    }
    let prompt_len = sample.prompt_tokens.len();
    for p in prefixes {
        if p.len() + prompt_len + 1 > model.config.max_seq {
            return Err(Error::Input(format!(
                "prefixed prompt length {} exceeds max_seq {}",
                p.len() + prompt_len,
                model.config.max_seq
            )));
        }
    }
    let rows = exec::map_collect(prefixes, |prefix| -> Result<Matrix> {
        let mut tokens = prefix.clone();
        tokens.extend_from_slice(&sample.prompt_tokens);
        let (_, trace) = model.forward(&tokens, true)?;
        let inner = &trace.expect("capture requested").layers[layer].ffn_inner;
        let mut m = Matrix::zeros(prompt_len, model.config.d_ff);
        for i in 0..prompt_len {
            m.set_row(i, inner.row(prefix.len() + i));
        }
        Ok(m)
    });
    let mut mean = Matrix::zeros(prompt_len, model.config.d_ff);
    for row in rows {
        mean.add_assign(&row?);
    }
    mean.scale(1.0 / prefixes.len() as f64);

    let k_s = pool_span(&mean, sample.subject_span)?;
    let k_r = pool_span(&mean, sample.relation_span)?;
    let mixed_span = (
        sample.subject_span.0.min(sample.relation_span.0),
        sample.subject_span.1.max(sample.relation_span.1),
    );
    let k_mixed = pool_span(&mean, mixed_span)?;
    Ok(KStarResult { per_token: mean, k_s, k_r, k_mixed })
}

/// Relation hidden state `σ(W_proj k_r + b_r)`.
pub fn relation_hidden(
    k_r: &Vector,
    w_proj: &Matrix,
    b_r: &Vector,
    activation: crate::model::Activation,
) -> Result<Vector> {
    if w_proj.cols() != k_r.dim() || w_proj.rows() != b_r.dim() {
        return Err(Error::Dimension(format!(
            "relation_hidden: W_proj {}x{} vs k_r {} and b_r {}",
            w_proj.rows(),
            w_proj.cols(),
            k_r.dim(),
            b_r.dim()
        )));
    }
    let mut h = w_proj.matvec(k_r);
    for (v, b) in h.data_mut().iter_mut().zip(b_r.data()) {
        *v = activation.apply(*v + b);
    }
    Ok(h)
}

/// Structural editing loss `‖W_proj k_s + h_r − v*‖₂` and its gradient with
/// respect to `W_proj` only: `(r / ‖r‖) k_s^T`, zero at an exact fit.
pub fn structural_loss(
    k_s: &Vector,
    h_r: &Vector,
    v_star: &Vector,
    w_proj: &Matrix,
) -> Result<(f64, Matrix)> {
    if w_proj.cols() != k_s.dim() || w_proj.rows() != h_r.dim() || h_r.dim() != v_star.dim() {
        return Err(Error::Dimension("structural_loss dimension mismatch".into()));
    }
    let mut r = w_proj.matvec(k_s);
    r.add_scaled(1.0, h_r);
    r.add_scaled(-1.0, v_star);
    let loss = r.norm();
    let mut grad = Matrix::zeros(w_proj.rows(), w_proj.cols());
    if loss > 0.0 {
        grad.add_outer(1.0 / loss, &r, k_s);
    }
    Ok((loss, grad))
}

/// Optimization log of the value search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VStarLog {
    /// Objective value at each evaluation, including the initial point.
    pub objectives: Vec<f64>,
    /// Mean patched log-probability of the target at the initial point.
    pub initial_log_prob: f64,
    /// Mean patched log-probability of the target at the returned point.
    pub final_log_prob: f64,
    pub early_stopped: bool,
}

/// Stop the value search once the target carries this much mass.
const V_TARGET_PROB: f64 = 0.95;

/// Gradient search for the value vector injected at the last subject token's
/// FFN output. Minimizes the prefix-averaged negative log-probability of the
/// new object plus a KL drift penalty on the essence prompt; returns the best
/// point visited, so the final objective never exceeds the initial one.
pub fn solve_v_star(
    model: &TransformerModel,
    sample: &EditSample,
    layer: usize,
    prefixes: &[Vec<TokenId>],
    hyper: &EditHyper,
    z_init: Vector,
) -> Result<(Vector, VStarLog)> {
    if hyper.v_steps == 0 {
        return Err(Error::Config("v_steps must be >= 1".into()));
    }
    let n = prefixes.len() as f64;
    let per_variant_weight = hyper.alpha1 / n;
    let kl_weight = hyper.alpha1 * hyper.kl_weight;
    let clean_essence = model.next_token_dist(&sample.essence_tokens, None)?;
    let essence_site_pos = 0; // single-token subject opens the essence prompt
    let essence_obj_pos = sample.essence_tokens.len() - 1;

    // One evaluation: objective value, summed gradient, mean target prob.
    let evaluate = |z: &Vector| -> Result<(f64, Vector, f64)> {
        let pieces = exec::map_collect(prefixes, |prefix| -> Result<(f64, Vector, f64)> {
            let mut tokens = prefix.clone();
            tokens.extend_from_slice(&sample.prompt_tokens);
            let site_pos = prefix.len() + sample.last_subject_pos();
            let obj_pos = tokens.len() - 1;
            let objective =
                LogitObjective::neg_log_prob(per_variant_weight, obj_pos, sample.target_token);
            let (value, grad) = grad_hidden(model, &tokens, &objective, (layer, site_pos), z)?;
            // Recover ln P(target) from the weighted NLL term.
            let ln_p = -(value / per_variant_weight.max(1e-300));
            Ok((value, grad, ln_p))
        });
        let mut value = 0.0;
        let mut grad = Vector::zeros(z.dim());
        let mut mean_p = 0.0;
        for piece in pieces {
            let (v, g, ln_p) = piece?;
            value += v;
            grad.add_scaled(1.0, &g);
            mean_p += ln_p.exp() / n;
        }
        if kl_weight > 0.0 {
            let objective = LogitObjective {
                terms: vec![ObjectiveTerm::KlFromRef {
                    weight: kl_weight,
                    position: essence_obj_pos,
                    reference: clean_essence.clone(),
                }],
            };
            let (v, g) = grad_hidden(
                model,
                &sample.essence_tokens,
                &objective,
                (layer, essence_site_pos),
                z,
            )?;
            value += v;
            grad.add_scaled(1.0, &g);
        }
        Ok((value, grad, mean_p))
    };

    let mut z = z_init;
    let (obj0, mut grad, p0) = evaluate(&z)?;
    let mut log = VStarLog {
        objectives: vec![obj0],
        initial_log_prob: p0.max(1e-300).ln(),
        final_log_prob: p0.max(1e-300).ln(),
        early_stopped: false,
    };
    let mut best = (obj0, z.clone(), p0);
    if p0 >= V_TARGET_PROB {
        log.early_stopped = true;
        return Ok((best.1, log));
    }
    // Adam on z: hidden-state norms vary widely across layers, so the search
    // needs per-coordinate step scaling to traverse them in a few steps.
    let mut m = Vector::zeros(z.dim());
    let mut v = Vector::zeros(z.dim());
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    for step in 0..hyper.v_steps {
        for i in 0..z.dim() {
            let g = grad.data()[i];
            m.data_mut()[i] = B1 * m.data()[i] + (1.0 - B1) * g;
            v.data_mut()[i] = B2 * v.data()[i] + (1.0 - B2) * g * g;
            let mhat = m.data()[i] / (1.0 - B1.powi(step as i32 + 1));
            let vhat = v.data()[i] / (1.0 - B2.powi(step as i32 + 1));
            z.data_mut()[i] -= hyper.v_lr * mhat / (vhat.sqrt() + EPS);
        }
        let (obj, g, p) = evaluate(&z).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("value search step {step}: {msg}")),
            other => other,
        })?;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!(
                "value search objective non-finite at step {step}"
            )));
        }
        log.objectives.push(obj);
        if obj < best.0 {
            best = (obj, z.clone(), p);
        }
        if p >= V_TARGET_PROB {
            log.early_stopped = true;
            break;
        }
        grad = g;
    }
    log.final_log_prob = best.2.max(1e-300).ln();
    Ok((best.1, log))
}

/// Rank-1 closed-form rewrite: returns `W' = W + Λ (C^{-1} k)^T` with
/// `Λ = (v − W k) / ((C^{-1} k)^T k)`, so `W' k = v` exactly.
pub fn closed_form_update(
    w_proj: &Matrix,
    k_s: &Vector,
    v_target: &Vector,
    cov: &CovMatrix,
) -> Result<Matrix> {
    if w_proj.cols() != k_s.dim() || w_proj.rows() != v_target.dim() || cov.dim() != k_s.dim() {
        return Err(Error::Dimension("closed_form_update dimension mismatch".into()));
    }
    let u = cov.solve(k_s);
    let denom = u.dot(k_s);
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::Algebra(format!("degenerate key: (C^-1 k)^T k = {denom}")));
    }
    let wk = w_proj.matvec(k_s);
    let mut lambda = v_target.clone();
    lambda.add_scaled(-1.0, &wk);
    let lambda = lambda.scaled(1.0 / denom);
    let mut w_new = w_proj.clone();
    w_new.add_outer(1.0, &lambda, &u);
    Ok(w_new)
}

/// Per-layer record of one applied edit.
#[derive(Debug, Clone)]
pub struct LayerEditRecord {
    pub layer: usize,
    pub k_s: Vector,
    pub k_r: Vector,
    pub h_r: Vector,
    pub v_star: Vector,
    pub delta: Matrix,
    pub delta_norm: f64,
    /// `‖W'k − target‖ / ‖target‖` straight after the closed-form solve.
    pub solve_rel_err: f64,
    pub structural_losses: Vec<f64>,
    pub v_log: VStarLog,
}

/// Result of one orchestrated edit.
#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub sample_id: usize,
    pub subject: String,
    pub relation: String,
    pub new_object: String,
    pub layers: Vec<LayerEditRecord>,
    pub pre_target_prob: f64,
    pub post_target_prob: f64,
    pub pre_greedy: TokenId,
    pub post_greedy: TokenId,
}

impl EditOutcome {
    /// Compact JSON line for run logs.
    pub fn to_log_json(&self) -> serde_json::Value {
        serde_json::json!({
            "sample_id": self.sample_id,
            "subject": self.subject,
            "relation": self.relation,
            "new_object": self.new_object,
            "pre_target_prob": self.pre_target_prob,
            "post_target_prob": self.post_target_prob,
            "layers": self.layers.iter().map(|l| serde_json::json!({
                "layer": l.layer,
                "delta_norm": l.delta_norm,
                "solve_rel_err": l.solve_rel_err,
                "v_objective_first": l.v_log.objectives.first(),
                "v_objective_last": l.v_log.objectives.last(),
                "structural_losses": l.structural_losses,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Apply one edit to the selected layers, ascending, recomputing keys after
/// each layer's mutation. Atomic: any failure restores every tensor to its
/// pre-call state.
pub fn apply_edit(
    model: &mut TransformerModel,
    sample: &EditSample,
    covs: &[(usize, CovMatrix)],
    hyper: &EditHyper,
    layers: &[usize],
    seed: u64,
) -> Result<EditOutcome> {
    sample.validate()?;
    hyper.validate()?;
    if layers.is_empty() {
        return Err(Error::Config("no edit layers selected".into()));
    }
    let mut sorted_layers = layers.to_vec();
    sorted_layers.sort_unstable();
    for &l in &sorted_layers {
        if l >= model.config.n_layers {
            return Err(Error::Config(format!("edit layer {l} out of range")));
        }
        if !covs.iter().any(|(cl, _)| *cl == l) {
            return Err(Error::Config(format!("no covariance supplied for layer {l}")));
        }
    }

    let snapshots: Vec<(usize, Matrix)> =
        sorted_layers.iter().map(|&l| (l, model.w_proj(l).clone())).collect();

    let result = apply_edit_inner(model, sample, covs, hyper, &sorted_layers, seed);
    if result.is_err() {
        for (l, w) in snapshots {
            model.set_w_proj(l, w);
        }
    }
    result
}

fn apply_edit_inner(
    model: &mut TransformerModel,
    sample: &EditSample,
    covs: &[(usize, CovMatrix)],
    hyper: &EditHyper,
    layers: &[usize],
    seed: u64,
) -> Result<EditOutcome> {
    let prefixes = sample_prefixes(model.config.vocab_size, hyper.n_prefixes, seed);
    let pre_dist = model.next_token_dist(&sample.prompt_tokens, None)?;
    let pre_target_prob = pre_dist[sample.target_token];
    let pre_greedy = model.greedy_decode(&sample.prompt_tokens, 1)?[0];

    let b_r = Vector::zeros(model.config.d_model);
    let mut records = Vec::with_capacity(layers.len());
    for &layer in layers {
        let cov = &covs.iter().find(|(l, _)| *l == layer).expect("validated").1;
        let ks = compute_k_star(model, sample, layer, &prefixes)?;
        let h_r = relation_hidden(&ks.k_r, model.w_proj(layer), &b_r, model.config.activation)?;

        // Initial value: the model's own mean FFN output at the site. By
        // linearity this equals W_proj k(last subject token) + b_proj, so an
        // already-satisfied edit yields Λ = 0 exactly.
        let k_site = ks.per_token.row_vec(sample.last_subject_pos());
        let mut z_init = model.w_proj(layer).matvec(&k_site);
        z_init.add_scaled(1.0, &model.layers[layer].b_proj);

        let (v_star, v_log) = solve_v_star(model, sample, layer, &prefixes, hyper, z_init)?;

        // The installed mapping feeds through the FFN bias downstream, so the
        // linear solve targets the bias-free part of the value.
        let mut v_target = v_star.clone();
        v_target.add_scaled(-1.0, &model.layers[layer].b_proj);

        let key = ks.edit_key(hyper.key_mode);
        let w_old = model.w_proj(layer).clone();
        let w_new = closed_form_update(&w_old, key, &v_target, cov)?;
        let achieved = w_new.matvec(key);
        let solve_rel_err =
            achieved.sub(&v_target).norm() / v_target.norm().max(f64::MIN_POSITIVE);
        model.set_w_proj(layer, w_new);

        let mut structural_losses = Vec::new();
        if hyper.alpha2 > 0.0 && hyper.st_steps > 0 {
            for _ in 0..hyper.st_steps {
                let (loss, grad) = structural_loss(&ks.k_s, &h_r, &v_star, model.w_proj(layer))?;
                structural_losses.push(loss);
                let w = model.w_proj_mut(layer);
                for (wv, gv) in w.data_mut().iter_mut().zip(grad.data()) {
                    *wv -= hyper.st_lr * hyper.alpha2 * gv;
                }
            }
        }

        let delta = model.w_proj(layer).sub(&w_old);
        let delta_norm = delta.frobenius_norm();
        records.push(LayerEditRecord {
            layer,
            k_s: ks.k_s,
            k_r: ks.k_r,
            h_r,
            v_star,
            delta,
            delta_norm,
            solve_rel_err,
            structural_losses,
            v_log,
        });
    }

    let post_dist = model.next_token_dist(&sample.prompt_tokens, None)?;
    let post_target_prob = post_dist[sample.target_token];
    let post_greedy = model.greedy_decode(&sample.prompt_tokens, 1)?[0];
    Ok(EditOutcome {
        sample_id: sample.id,
        subject: sample.subject.clone(),
        relation: sample.relation.clone(),
        new_object: sample.new_object.clone(),
        layers: records,
        pre_target_prob,
        post_target_prob,
        pre_greedy,
        post_greedy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::numerics::finite_diff_grad;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
        Vector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn identity_cov(dim: usize) -> CovMatrix {
        CovMatrix::new(Matrix::identity(dim), 1.0, 1).unwrap()
    }

    #[test]
    fn relation_hidden_zero_inputs() {
        let h = relation_hidden(
            &Vector::zeros(3),
            &Matrix::zeros(2, 3),
            &Vector::zeros(2),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(h.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relation_hidden_relu_hand_case() {
        let w = Matrix::identity(2);
        let h = relation_hidden(
            &Vector::from_vec(vec![1.0, -2.0]),
            &w,
            &Vector::zeros(2),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(h.data(), &[1.0, 0.0]);
        assert_eq!(h.dim(), 2);
    }

    #[test]
    fn relation_hidden_dim_mismatch() {
        let r = relation_hidden(
            &Vector::zeros(3),
            &Matrix::zeros(2, 4),
            &Vector::zeros(2),
            Activation::Relu,
        );
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn structural_loss_exact_fit_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 4, 6);
        let k = random_vector(&mut rng, 6);
        let h = random_vector(&mut rng, 4);
        let mut v = w.matvec(&k);
        v.add_scaled(1.0, &h);
        let (loss, grad) = structural_loss(&k, &h, &v, &w).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn structural_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (dm, df) = (rng.gen_range(3..8), rng.gen_range(3..8));
            let w = random_matrix(&mut rng, dm, df);
            let k = random_vector(&mut rng, df);
            let h = random_vector(&mut rng, dm);
            let v = random_vector(&mut rng, dm);
            let (_, grad) = structural_loss(&k, &h, &v, &w).unwrap();
            let flat_w = Vector::from_slice(w.data());
            let f = |x: &Vector| {
                let wm = Matrix::from_vec(dm, df, x.data().to_vec()).unwrap();
                structural_loss(&k, &h, &v, &wm).unwrap().0
            };
            let numeric = finite_diff_grad(f, &flat_w, 1e-6).unwrap();
            let analytic = Vector::from_slice(grad.data());
            let rel = analytic.sub(&numeric).norm() / numeric.norm().max(1e-12);
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn closed_form_noop_when_already_satisfied() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_matrix(&mut rng, 4, 4);
        let k = random_vector(&mut rng, 4);
        let v = w.matvec(&k);
        let w2 = closed_form_update(&w, &k, &v, &identity_cov(4)).unwrap();
        assert!(w2.sub(&w).frobenius_norm() < 1e-12);
    }

    #[test]
    fn closed_form_hand_case() {
        // W = I, C = I, k = e1, v = 3 e1 -> W' = diag(3, 1).
        let w = Matrix::identity(2);
        let k = Vector::from_vec(vec![1.0, 0.0]);
        let v = Vector::from_vec(vec![3.0, 0.0]);
        let w2 = closed_form_update(&w, &k, &v, &identity_cov(2)).unwrap();
        assert_relative_eq!(w2.get(0, 0), 3.0, epsilon = 1e-12);
        assert_relative_eq!(w2.get(0, 1), 0.0, epsilon = 1e-12);
        assert_relative_eq!(w2.get(1, 0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(w2.get(1, 1), 1.0, epsilon = 1e-12);
        let back = w2.matvec(&k);
        assert_relative_eq!(back.data()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_exactness_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (dm, df) = (rng.gen_range(3..10), rng.gen_range(3..10));
            let w = random_matrix(&mut rng, dm, df);
            let k = random_vector(&mut rng, df);
            let v = random_vector(&mut rng, dm);
            // Random SPD covariance.
            let a = random_matrix(&mut rng, df, df);
            let mut c = a.matmul_nt(&a);
            for i in 0..df {
                c.set(i, i, c.get(i, i) + 0.5);
            }
            let cov = CovMatrix::new(c, 0.5, 1).unwrap();
            let w2 = closed_form_update(&w, &k, &v, &cov).unwrap();
            let err = w2.matvec(&k).sub(&v).norm() / v.norm().max(1e-12);
            assert!(err < 1e-9, "relative error {err}");
        }
    }

    #[test]
    fn closed_form_rejects_zero_key() {
        let w = Matrix::identity(2);
        let k = Vector::zeros(2);
        let v = Vector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(
            closed_form_update(&w, &k, &v, &identity_cov(2)),
            Err(Error::Algebra(_))
        ));
    }

    #[test]
    fn cov_single_key_definition() {
        // With one key k: C = k k^T + λI.
        let model = TransformerModel::new(ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ff: 8,
            n_heads: 1,
            vocab_size: 8,
            max_seq: 6,
            activation: Activation::Gelu,
            seed: 6,
        })
        .unwrap();
        let prompts = vec![KeyPrompt { tokens: vec![1, 2, 3], key_pos: 1 }];
        let cov = compute_cov(&model, &prompts, 0, 0.01).unwrap();
        let (_, trace) = model.forward(&[1, 2, 3], true).unwrap();
        let k = trace.unwrap().layers[0].ffn_inner.row_vec(1);
        for i in 0..8 {
            for j in 0..8 {
                let expect = k.data()[i] * k.data()[j] + if i == j { 0.01 } else { 0.0 };
                assert_relative_eq!(cov.matrix().get(i, j), expect, epsilon = 1e-12);
            }
        }
        let mut asym: f64 = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                asym = asym.max((cov.matrix().get(i, j) - cov.matrix().get(j, i)).abs());
            }
        }
        assert!(asym < 1e-10);
    }

    #[test]
    fn cov_cholesky_succeeds_across_ridges() {
        let model = TransformerModel::new(ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ff: 12,
            n_heads: 1,
            vocab_size: 8,
            max_seq: 6,
            activation: Activation::Gelu,
            seed: 7,
        })
        .unwrap();
        let prompts: Vec<KeyPrompt> = (0..5)
            .map(|i| KeyPrompt { tokens: vec![i % 8, (i + 1) % 8, (i + 3) % 8], key_pos: 2 })
            .collect();
        for lambda in [1e-4, 1e-3, 1e-2, 1e-1, 1.0] {
            assert!(compute_cov(&model, &prompts, 0, lambda).is_ok());
        }
        assert!(matches!(compute_cov(&model, &[], 0, 0.01), Err(Error::Data(_))));
    }

    #[test]
    fn prefixes_deterministic_and_bare_first() {
        let a = sample_prefixes(50, 4, 9);
        let b = sample_prefixes(50, 4, 9);
        assert_eq!(a, b);
        assert!(a[0].is_empty());
        assert_eq!(a.len(), 4);
        for p in &a[1..] {
            assert!(!p.is_empty() && p.len() <= 3);
            assert!(p.iter().all(|t| *t < 50));
        }
    }

    #[test]
    fn edit_sample_validation() {
        let mut s = EditSample {
            id: 0,
            subject: "a".into(),
            relation: "r".into(),
            old_object: "x".into(),
            new_object: "y".into(),
            prompt_tokens: vec![0, 1, 2, 3, 4],
            subject_span: (3, 4),
            relation_span: (1, 2),
            target_token: 5,
            old_target_token: 6,
            rephrases: vec![RephrasePrompt { tokens: vec![0, 1] }],
            locality: vec![LocalityProbe { tokens: vec![0], answer: 1 }],
            essence_tokens: vec![3, 0, 1],
            chain_parent: None,
        };
        assert!(s.validate().is_ok());
        s.subject_span = (1, 2); // overlaps relation span
        assert!(matches!(s.validate(), Err(Error::Span(_))));
        s.subject_span = (3, 4);
        s.new_object = "x".into();
        assert!(matches!(s.validate(), Err(Error::Data(_))));
    }
}
