//! Where does P(o*) go between the patched search and the installed weight?
use qedit_core::dataset::{generate_edit_stream, generate_world};
use qedit_core::editor::*;
use qedit_core::model::{load_checkpoint, PatchSite, PatchSpec};

fn main() {
    let world = generate_world(0, 60, 12, 500).unwrap();
    let model = load_checkpoint(std::path::Path::new("/tmp/qedit_dbg_ckpt.json")).unwrap();
    let stream = generate_edit_stream(&world, 10, 0.0, 2, 2, 42).unwrap();
    let samples = stream.to_samples(&world.vocab).unwrap();
    let covs0 = compute_cov_multi(&model, &world.key_prompts().unwrap(), &[0], 1e-2).unwrap();
    let cov = covs0.into_iter().next().unwrap();
    let prefixes: Vec<Vec<usize>> = vec![vec![]];
    let hyper = EditHyper { v_steps: 40, v_lr: 1.0, ..Default::default() };

    for s in samples.iter().take(5) {
        let mut m2 = model.clone();
        let ks = compute_k_star(&m2, s, 0, &prefixes).unwrap();
        let k_site = ks.per_token.row_vec(s.last_subject_pos());
        let mut z_init = m2.w_proj(0).matvec(&k_site);
        z_init.add_scaled(1.0, &m2.layers[0].b_proj);
        let (v_star, vlog) = solve_v_star(&m2, s, 0, &prefixes, &hyper, z_init).unwrap();
        // patched prob with final v*
        let patch = PatchSpec::single(0, s.last_subject_pos(), PatchSite::FfnOutput, v_star.clone());
        let pd = m2.next_token_dist(&s.prompt_tokens, Some(&patch)).unwrap();
        let mut v_target = v_star.clone();
        v_target.add_scaled(-1.0, &m2.layers[0].b_proj);
        let w_new = closed_form_update(m2.w_proj(0), &ks.k_s, &v_target, &cov).unwrap();
        m2.set_w_proj(0, w_new);
        let post = m2.next_token_dist(&s.prompt_tokens, None).unwrap();
        // check installed ffn out == v* at the site
        let (_, tr) = m2.forward(&s.prompt_tokens, true).unwrap();
        let tr = tr.unwrap();
        let ffn_out_site = tr.layers[0].ffn_out.row_vec(s.last_subject_pos());
        let gap = ffn_out_site.sub(&v_star).norm() / v_star.norm();
        println!("edit {}: search lnP {:.3} early={} | patched P={:.3} | installed P={:.3} | site gap {:.4} | spill {:.3}",
            s.id, vlog.final_log_prob, vlog.early_stopped,
            pd[s.target_token], post[s.target_token], gap,
            {
                // residual shift at earlier positions
                let (_, tr0) = model.forward(&s.prompt_tokens, true).unwrap();
                let tr0 = tr0.unwrap();
                let mut worst: f64 = 0.0;
                for p in 0..s.last_subject_pos() {
                    let a = tr.layers[0].ffn_out.row_vec(p);
                    let b = tr0.layers[0].ffn_out.row_vec(p);
                    worst = worst.max(a.sub(&b).norm() / b.norm().max(1e-9));
                }
                worst
            });
    }
}
