//! Scratch calibration runs for desk-scale settings (not part of the crate).

use std::path::Path;
use std::time::Instant;

use qedit_core::dataset::{generate_edit_stream, generate_world};
use qedit_core::editor::{apply_edit, compute_cov_multi, EditHyper};
use qedit_core::harness::{resolve_layers, run_sme_prepared, AblationFlags, RunConfig};
use qedit_core::model::{
    load_checkpoint, pretrain_base, save_checkpoint, Activation, ModelConfig, PretrainOptions,
    TransformerModel,
};
use qedit_core::numerics::l2_distance;
use qedit_core::tracing::LayerSelectMode;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let stage = args.get(1).map(|s| s.as_str()).unwrap_or("edit");
    let t_edits: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);

    let world = generate_world(0, 60, 12, 500).unwrap();
    let ckpt = Path::new("/tmp/qedit_cal_ckpt.json");
    let model = if ckpt.exists() {
        load_checkpoint(ckpt).unwrap()
    } else {
        let corpus = world.pretrain_corpus(16).unwrap();
        let config = ModelConfig {
            n_layers: 4, d_model: 128, d_ff: 512, n_heads: 16,
            vocab_size: world.vocab.len(), max_seq: 16,
            activation: Activation::Gelu, seed: 0,
        };
        let t0 = Instant::now();
        let mut m = TransformerModel::new(config).unwrap();
        let opts = PretrainOptions { steps: 1200, lr: 3e-3, batch_size: 32, seed: 1, ..Default::default() };
        pretrain_base(&mut m, &corpus, &opts).unwrap();
        println!("pretrained in {:.0}s", t0.elapsed().as_secs_f64());
        save_checkpoint(&m, ckpt).unwrap();
        m
    };
    let eval = world.eval_prompts().unwrap();
    let hits = eval.iter().filter(|(p, a)| model.greedy_decode(p, 1).unwrap()[0] == *a).count();
    println!("corpus acc {:.3}", hits as f64 / eval.len() as f64);

    let stream = generate_edit_stream(&world, 100, 0.3, 2, 2, 42).unwrap();
    let base_cfg = RunConfig {
        t_edits,
        eval_every: 10,
        layer_mode: LayerSelectMode::Traced,
        queue: qedit_core::queue::QueueConfig { capacity: 30, top_k: 5, ..Default::default() },
        seed: 7,
        ..Default::default()
    };
    let layers = resolve_layers(&model, &world, &stream, &base_cfg).unwrap();
    println!("traced layers: {layers:?}");
    let covs_vec = compute_cov_multi(&model, &world.key_prompts().unwrap(), &layers, base_cfg.cov_lambda).unwrap();
    let covs: Vec<_> = layers.iter().copied().zip(covs_vec).collect();

    if stage == "dist" {
        let samples = stream.to_samples(&world.vocab).unwrap();
        let hyper = EditHyper::default();
        let mut m3 = model.clone();
        let mut deltas: Vec<(String, qedit_core::numerics::Matrix)> = vec![];
        let t = Instant::now();
        for (i, s) in samples.iter().take(t_edits).enumerate() {
            let out = apply_edit(&mut m3, s, &covs, &hyper, &layers, 1000 + i as u64).unwrap();
            deltas.push((s.subject.clone(), out.layers[0].delta.clone()));
        }
        println!("{} sequential edits in {:.1}s", t_edits, t.elapsed().as_secs_f64());
        let mut same = vec![];
        let mut adj_same = vec![];
        let mut cross = vec![];
        for i in 0..deltas.len() {
            for j in i + 1..deltas.len() {
                let d = l2_distance(&deltas[i].1, &deltas[j].1).unwrap();
                if deltas[i].0 == deltas[j].0 {
                    same.push(d);
                    if j == i + 1 { adj_same.push(d); }
                } else {
                    cross.push(d);
                }
            }
        }
        let show = |name: &str, v: &mut Vec<f64>| {
            if v.is_empty() { return; }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let pct = |v: &Vec<f64>, p: f64| v[((v.len() as f64 - 1.0) * p) as usize];
            println!("{name}: n={} p10={:.3} p50={:.3} p90={:.3}", v.len(), pct(v, 0.1), pct(v, 0.5), pct(v, 0.9));
        };
        show("same-subject", &mut same);
        show("adjacent same-subject", &mut adj_same);
        show("cross-subject", &mut cross);
        let mut norms: Vec<f64> = deltas.iter().map(|(_, d)| d.frobenius_norm()).collect();
        show("delta norms", &mut norms);
        return;
    }

    // run full and no_queue
    for flags in [AblationFlags::default(), AblationFlags { no_queue: true, ..Default::default() }] {
        let mut cfg = base_cfg.clone();
        cfg.ablation = flags;
        let mut m2 = model.clone();
        let t = Instant::now();
        match run_sme_prepared(&mut m2, &world, &stream, &cfg, &covs) {
            Ok(report) => {
                println!("--- {} ({:.0}s)", cfg.ablation.label(), t.elapsed().as_secs_f64());
                for row in &report.rows {
                    println!("t={:3} rel={:.3} gen={:.3} loc={:.3} avg={:.3} gen_acc={:.3} qlen={} corr={} fail={}",
                        row.t, row.reliability, row.generality, row.locality, row.avg, row.general_acc,
                        row.queue_len, row.corrections, row.failed_edits);
                }
            }
            Err(e) => println!("--- {} FAILED: {e}", cfg.ablation.label()),
        }
    }
}
