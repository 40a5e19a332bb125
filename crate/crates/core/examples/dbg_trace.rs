//! Debug: where does causal tracing place the fact in the desk model?
use qedit_core::dataset::generate_world;
use qedit_core::model::{pretrain_base, Activation, ModelConfig, PretrainOptions, TransformerModel};
use qedit_core::tracing::{causal_trace, TraceConfig};

fn main() {
    let world = generate_world(0, 60, 12, 500).unwrap();
    let corpus = world.pretrain_corpus(16).unwrap();
    let config = ModelConfig {
        n_layers: 4, d_model: 128, d_ff: 512, n_heads: 16,
        vocab_size: world.vocab.len(), max_seq: 16,
        activation: Activation::Gelu, seed: 0,
    };
    let mut model = TransformerModel::new(config).unwrap();
    let opts = PretrainOptions { steps: 1200, lr: 3e-3, batch_size: 32, seed: 1, ..Default::default() };
    pretrain_base(&mut model, &corpus, &opts).unwrap();

    let mut traced = 0;
    let mut recovery_sum = 0.0;
    for (fi, fact) in world.facts.iter().enumerate().skip(100) {
        if traced >= 10 { break; }
        let r = world.render(fact.subject, fact.relation, 0).unwrap();
        let answer = world.entity_token(fact.object);
        let cfg = TraceConfig { noise_scale: 3.0, seed: fi as u64 };
        match causal_trace(&model, &r.tokens, r.subject_span, answer, &cfg) {
            Ok(t) => {
                traced += 1;
                println!("fact {fi} ({}): p_clean={:.3} p_corrupt={:.3} sel_layer={}",
                    r.text, t.p_clean, t.p_corrupt, t.selected_layer);
                for l in 0..t.ie_grid.rows() {
                    let row: Vec<String> = t.ie_grid.row(l).iter().map(|v| format!("{v:+.2}")).collect();
                    println!("  L{l}: {}", row.join(" "));
                }
                let (ml, mp) = t.argmax_cell();
                let recovery = t.ie_grid.get(ml, mp) / (t.p_clean - t.p_corrupt).max(1e-9);
                recovery_sum += recovery;
                println!("  max cell L{ml} pos{mp}, recovery {:.2}", recovery);
            }
            Err(e) => println!("fact {fi}: {e}"),
        }
    }
    println!("mean max-cell recovery over {traced}: {:.2}", recovery_sum / traced as f64);
}
