mod common;

use promptground::fusion::{embed_target, glip_layer, pool_broadcast_residual, scatter_residual, structural_layer};
use promptground::numeric::{encoder_layer, Matrix, TokenMatrix};
use promptground::selection::{select_prompt_top_q, select_visual_top_p};
use promptground::{build_bank, embed_image, forward, AttributeKind, DetectionConfig, Mode, ModelWeights, Reduction};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn no_fused_layer_is_the_plain_stack(seed in any::<u64>()) {
        prop_assert_eq!(common::degenerate_equivalence(seed), Ok(()));
    }

    #[test]
    fn scatter_touches_only_selected_rows(seed in any::<u64>(), rows in 1usize..40, dim in 1usize..12) {
        let mut r = common::rng(seed);
        let o = common::tokens_with_pads(&mut r, rows, dim, 0);
        let mut idx: Vec<usize> = (0..rows).collect();
        idx.shuffle(&mut r);
        idx.truncate(r.random_range(0..=rows));
        idx.sort();
        let fused = common::gaussian_rows(&mut r, idx.len(), dim);
        let out = scatter_residual(&o, &fused, &idx).unwrap();
        for i in 0..rows {
            match idx.iter().position(|&j| j == i) {
                None => prop_assert_eq!(out.row(i), o.row(i)),
                Some(k) => {
                    for c in 0..dim {
                        prop_assert_eq!(out.row(i)[c], o.row(i)[c] + fused.get(k, c));
                    }
                }
            }
        }
    }

    #[test]
    fn pooled_residual_reaches_valid_rows_only(seed in any::<u64>(), rows in 2usize..20, q in 1usize..6) {
        let mut r = common::rng(seed);
        let t = common::tokens_with_pads(&mut r, rows, 4, rows / 2);
        let fused = common::gaussian_rows(&mut r, q, 4);
        let out = pool_broadcast_residual(&t, &fused).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..q).map(|k| fused.get(k, c)).sum::<f64>() / q as f64).collect();
        for i in 0..rows {
            if t.is_valid(i) {
                for c in 0..4 {
                    prop_assert!((out.row(i)[c] - t.row(i)[c] - mean[c]).abs() < 1e-12);
                }
            } else {
                prop_assert_eq!(out.row(i), t.row(i));
            }
        }
    }
}

fn config() -> DetectionConfig {
    DetectionConfig { dim: 16, heads: 2, layers: 3, n_l: 16, top_p: 3, top_q: 2, ..Default::default() }
}

#[test]
fn structural_layer_is_selection_then_residuals_then_encoders() {
    let config = config();
    let w = ModelWeights::seeded(&config).unwrap();
    let mut r = common::rng(11);
    let img = common::random_image(&mut r, 16, 16, 3);
    let (prompt, tags) = common::random_prompt(&mut r);
    let bank = build_bank(&prompt, &tags, &w, &config).unwrap();
    let o = embed_image(&img, w.embedder()).unwrap();
    let t = embed_target("polyp", &w, &config).unwrap();
    let lw = w.layer(0);
    let (o2, t2, trace) = structural_layer(&o, &t, bank.layer(0), bank.tags(), lw, &config, 1).unwrap();

    let kv = select_visual_top_p(&o, bank.layer(0), 3, Reduction::Max).unwrap();
    let kl = select_prompt_top_q(bank.layer(0), &kv, 2, Reduction::Max).unwrap();
    let fo = promptground::numeric::multi_head_attention(&kv.as_tokens().unwrap(), &t, &lw.t2v).unwrap();
    let ft = promptground::numeric::multi_head_attention(&kl.as_tokens().unwrap(), &o, &lw.v2t).unwrap();
    let o_res = scatter_residual(&o, fo.matrix(), &kv.indices).unwrap();
    let t_res = pool_broadcast_residual(&t, ft.matrix()).unwrap();
    assert_eq!(o2, encoder_layer(&o_res, &lw.image).unwrap());
    assert_eq!(t2, encoder_layer(&t_res, &lw.text).unwrap());

    assert_eq!(trace.layer, 1);
    assert_eq!(trace.visual_indices, kv.indices);
    assert_eq!(trace.prompt_indices, kl.indices);
    let want: Vec<AttributeKind> = kl.indices.iter().map(|&i| tags[i]).collect();
    assert_eq!(trace.prompt_tags, want);
    for a in [trace.mean_attention_t2v, trace.mean_attention_v2t] {
        assert!(a > 0.0 && a <= 1.0);
    }
}

/// Unit image rows; one bank token is a scaled copy of row `j` and the rest
/// are orthogonal to every image row.
fn planted(seed: u64, n_v: usize, dim: usize) -> (TokenMatrix, TokenMatrix, usize) {
    let mut r = common::rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let draw = |r: &mut rand_chacha::ChaCha8Rng, basis: &mut Vec<Vec<f64>>| -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            for b in basis.iter() {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v.clone());
                return v;
            }
        }
    };
    let raw = common::gaussian_rows(&mut r, n_v, dim);
    let image: Vec<Vec<f64>> = (0..n_v)
        .map(|i| {
            let n = raw.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            raw.row(i).iter().map(|x| x / n).collect()
        })
        .collect();
    // Orthonormal basis of the image span first, then its complement.
    for row in &image {
        let mut v = row.clone();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    let j = r.random_range(0..n_v);
    let scale = r.random_range(0.5..4.0);
    let mut bank = vec![image[j].iter().map(|x| x * scale).collect::<Vec<f64>>()];
    for _ in 0..4 {
        bank.push(draw(&mut r, &mut basis));
    }
    let o = TokenMatrix::dense(Matrix::from_rows(&image).unwrap()).unwrap();
    let b = TokenMatrix::dense(Matrix::from_rows(&bank).unwrap()).unwrap();
    (o, b, j)
}

#[test]
fn planted_bank_token_selects_its_patch_at_layer_one() {
    let config = DetectionConfig { dim: 16, heads: 2, layers: 1, n_l: 8, ..Default::default() };
    let w = ModelWeights::seeded(&config).unwrap();
    let t = embed_target("polyp", &w, &config).unwrap();
    for seed in 0..200 {
        let (o, bank, j) = planted(seed, 8, 16);
        for p in [1, 3, 8] {
            let cfg = DetectionConfig { top_p: p, top_q: 1, ..config.clone() };
            let tags = [AttributeKind::Color; 5];
            let (_, _, trace) = structural_layer(&o, &t, &bank, &tags, w.layer(0), &cfg, 1).unwrap();
            assert!(trace.visual_indices.contains(&j), "seed {seed} P={p}: {:?} misses {j}", trace.visual_indices);
            assert_eq!(trace.prompt_indices, vec![0], "seed {seed}");
        }
    }
}

#[test]
fn traces_follow_the_fusion_set() {
    let config = DetectionConfig { fusion_layers: Some(vec![1, 3]), ..config() };
    let w = ModelWeights::seeded(&config).unwrap();
    let mut r = common::rng(5);
    let img = common::random_image(&mut r, 16, 16, 3);
    let bank = build_bank("white round smooth", &[AttributeKind::Color, AttributeKind::Shape, AttributeKind::Texture], &w, &config).unwrap();
    let out = forward(&img, "polyp", &bank, &w, &config).unwrap();
    let layers: Vec<usize> = out.traces.iter().map(|t| t.layer).collect();
    assert_eq!(layers, vec![1, 3]);
    assert!(out.traces.iter().all(|t| t.prompt_indices.len() == 2 && t.visual_indices.len() == 3));

    let base = DetectionConfig { mode: Mode::Baseline, ..config.clone() };
    assert!(forward(&img, "polyp", &bank, &w, &base).unwrap().traces.is_empty());
}

#[test]
fn baseline_runs_cross_attention_at_every_layer() {
    let config = DetectionConfig { mode: Mode::Baseline, ..config() };
    let w = ModelWeights::seeded(&config).unwrap();
    let mut r = common::rng(8);
    let img = common::random_image(&mut r, 16, 8, 3);
    let bank = build_bank("white", &[AttributeKind::Color], &w, &config).unwrap();
    let out = forward(&img, "polyp", &bank, &w, &config).unwrap();
    let mut o = embed_image(&img, w.embedder()).unwrap();
    let mut t = embed_target("polyp", &w, &config).unwrap();
    for lw in w.layers() {
        (o, t) = glip_layer(&o, &t, lw).unwrap();
    }
    assert_eq!((out.o_final, out.t_final), (o, t));
}
