//! Measure the key/value geometry that the queue thresholds depend on.
use qedit_core::dataset::{generate_world, CHAIN_BASE_REL, CHAIN_DEP_REL};
use qedit_core::model::load_checkpoint;
use qedit_core::numerics::Vector;

fn cos(a: &Vector, b: &Vector) -> f64 { a.dot(b) / (a.norm() * b.norm()) }

fn main() {
    let world = generate_world(0, 60, 12, 500).unwrap();
    let model = load_checkpoint(std::path::Path::new("/tmp/qedit_cal_ckpt.json")).unwrap();

    // Keys at the subject token, layer 0, template 0: same-subject (different
    // relation) vs cross-subject.
    let key_of = |s: usize, r: usize| -> Option<Vector> {
        world.object_of(s, r)?;
        let rend = world.render(s, r, 0).unwrap();
        let (_, tr) = model.forward(&rend.tokens, true).unwrap();
        Some(tr.unwrap().layers[0].ffn_inner.row_vec(rend.subject_span.1 - 1))
    };
    let subjects = world.chain_subjects();
    let mut same = vec![];
    let mut crossv = vec![];
    let mut key_norms = vec![];
    for (i, &s) in subjects.iter().take(12).enumerate() {
        if let (Some(k1), Some(k2)) = (key_of(s, CHAIN_BASE_REL), key_of(s, CHAIN_DEP_REL)) {
            same.push(cos(&k1, &k2));
            key_norms.push(k1.norm());
            if let Some(&s2) = subjects.get(i + 1) {
                if let Some(k3) = key_of(s2, CHAIN_BASE_REL) {
                    crossv.push(cos(&k1, &k3));
                }
            }
        }
    }
    let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("key cos same-subject (r1 vs r2): {:.3}", mean(&same));
    println!("key cos cross-subject (r1 vs r1): {:.3}", mean(&crossv));
    println!("key norm mean: {:.1}", mean(&key_norms));

    // Unembedding row similarity: partner pairs vs random entity pairs.
    let urow = |e: usize| {
        let tok = world.entity_token(e);
        model.w_unembed.row_vec(tok)
    };
    let mut partner_cos = vec![];
    let mut random_cos = vec![];
    for e in (0..40).step_by(2) {
        partner_cos.push(cos(&urow(e), &urow(e + 1)));
        random_cos.push(cos(&urow(e), &urow((e + 17) % 60)));
    }
    println!("unembed cos partner pairs: {:.3}", mean(&partner_cos));
    println!("unembed cos random pairs:  {:.3}", mean(&random_cos));

    // Tok embedding similarity too.
    let erow = |e: usize| model.tok_emb.row_vec(world.entity_token(e));
    let mut pc = vec![];
    let mut rc = vec![];
    for e in (0..40).step_by(2) {
        pc.push(cos(&erow(e), &erow(e + 1)));
        rc.push(cos(&erow(e), &erow((e + 17) % 60)));
    }
    println!("tok_emb cos partner pairs: {:.3}", mean(&pc));
    println!("tok_emb cos random pairs:  {:.3}", mean(&rc));

    // Residual norm at the subject position by layer.
    let rend = world.render(subjects[0], CHAIN_BASE_REL, 0).unwrap();
    let (_, tr) = model.forward(&rend.tokens, true).unwrap();
    let tr = tr.unwrap();
    for l in 0..4 {
        let h = tr.hidden_state(l, rend.subject_span.1 - 1);
        let f = tr.layers[l].ffn_out.row_vec(rend.subject_span.1 - 1);
        println!("layer {l}: hidden norm {:.1}, ffn_out norm {:.1}", h.norm(), f.norm());
    }
}
