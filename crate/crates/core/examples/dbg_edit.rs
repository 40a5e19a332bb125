//! Debug one edit end to end (checkpoint cached in /tmp).
use qedit_core::dataset::{generate_edit_stream, generate_world};
use qedit_core::editor::*;
use qedit_core::model::{load_checkpoint, pretrain_base, save_checkpoint, Activation, ModelConfig, PretrainOptions, TransformerModel};
use std::path::Path;

fn main() {
    let world = generate_world(0, 60, 12, 500).unwrap();
    let ckpt = Path::new("/tmp/qedit_dbg_ckpt.json");
    let model = if ckpt.exists() {
        load_checkpoint(ckpt).unwrap()
    } else {
        let corpus = world.pretrain_corpus(16).unwrap();
        let config = ModelConfig {
            n_layers: 4, d_model: 128, d_ff: 512, n_heads: 16,
            vocab_size: world.vocab.len(), max_seq: 16,
            activation: Activation::Gelu, seed: 0,
        };
        let mut m = TransformerModel::new(config).unwrap();
        let opts = PretrainOptions { steps: 1200, lr: 3e-3, batch_size: 32, seed: 1, ..Default::default() };
        pretrain_base(&mut m, &corpus, &opts).unwrap();
        save_checkpoint(&m, ckpt).unwrap();
        m
    };

    let stream = generate_edit_stream(&world, 10, 0.0, 2, 2, 42).unwrap();
    let samples = stream.to_samples(&world.vocab).unwrap();
    let covs0 = compute_cov_multi(&model, &world.key_prompts().unwrap(), &[0], 1e-2).unwrap();
    let covs: Vec<_> = vec![(0usize, covs0.into_iter().next().unwrap())];

    // Prefix designs: bare; +glue "the"; +entity; +2 random
    let glue_the = world.vocab.token("the").unwrap();
    let ent = world.entity_token(7);
    let designs: Vec<(&str, Vec<Vec<usize>>)> = vec![
        ("bare", vec![vec![]]),
        ("glue1", vec![vec![], vec![glue_the]]),
        ("glue+ent", vec![vec![], vec![glue_the], vec![ent]]),
        ("random", sample_prefixes(world.vocab.len(), 4, 99)),
    ];
    let hyper = EditHyper::default();
    for (name, prefixes) in &designs {
        let mut rel_hits = 0;
        let mut gen_hits = 0;
        let mut gen_total = 0;
        let mut loc_hits = 0;
        let mut loc_total = 0;
        for s in samples.iter().take(5) {
            let mut m2 = model.clone();
            let ks = compute_k_star(&m2, s, 0, prefixes).unwrap();
            let k_site = ks.per_token.row_vec(s.last_subject_pos());
            let mut z_init = m2.w_proj(0).matvec(&k_site);
            z_init.add_scaled(1.0, &m2.layers[0].b_proj);
            let (v_star, _) = solve_v_star(&m2, s, 0, prefixes, &hyper, z_init).unwrap();
            let mut v_target = v_star.clone();
            v_target.add_scaled(-1.0, &m2.layers[0].b_proj);
            let w_new = closed_form_update(m2.w_proj(0), &ks.k_s, &v_target, &covs[0].1).unwrap();
            m2.set_w_proj(0, w_new);
            if m2.greedy_decode(&s.prompt_tokens, 1).unwrap()[0] == s.target_token { rel_hits += 1; }
            for r in &s.rephrases {
                gen_total += 1;
                if m2.greedy_decode(&r.tokens, 1).unwrap()[0] == s.target_token { gen_hits += 1; }
            }
            for p in &s.locality {
                loc_total += 1;
                if m2.greedy_decode(&p.tokens, 1).unwrap()[0] == model.greedy_decode(&p.tokens, 1).unwrap()[0] { loc_hits += 1; }
            }
        }
        println!("{name:10} rel {rel_hits}/5  gen {gen_hits}/{gen_total}  loc {loc_hits}/{loc_total}");
    }
}
