//! Debug: which config axis blocks fact binding?
use qedit_core::dataset::generate_world;
use qedit_core::model::{Activation, ModelConfig, PretrainOptions, TransformerModel, pretrain_base};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_entities: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let n_facts: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let n_layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let d_model: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(3e-3);

    let world = generate_world(0, n_entities, 8, n_facts).unwrap();
    let corpus = world.pretrain_corpus(16).unwrap();
    let eval = world.eval_prompts().unwrap();
    let config = ModelConfig {
        n_layers, d_model, d_ff: d_model * 4, n_heads: 4,
        vocab_size: world.vocab.len(), max_seq: 16,
        activation: Activation::Gelu, seed: 0,
    };
    let mut model = TransformerModel::new(config).unwrap();
    let opts = PretrainOptions { steps, lr, batch_size: 32, seed: 1, ..Default::default() };
    let log = pretrain_base(&mut model, &corpus, &opts).unwrap();
    let mut hits = 0;
    for (p, a) in &eval {
        if model.greedy_decode(p, 1).unwrap()[0] == *a { hits += 1; }
    }
    println!("E{n_entities} F{n_facts} L{n_layers} D{d_model} steps{steps} lr{lr}: loss {:.3}, acc {:.3}",
        log.losses.last().unwrap(), hits as f64 / eval.len() as f64);
}
