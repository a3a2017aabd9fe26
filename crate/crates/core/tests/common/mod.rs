#![allow(dead_code)]

pub mod selection_checks;

use promptground::harness::synth::SynthOutput;
use promptground::harness::{synth_dataset, BankSet, SynthSpec};
use promptground::numeric::{Matrix, TokenMatrix};
use promptground::{BBox, DetectionConfig, GroundTruthBox, ModelWeights, ScoredBox};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_rows(rng: &mut impl Rng, rows: usize, dim: usize) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, dim, data).unwrap()
}

/// Random token matrix with `pads` masked rows at random positions. Masked
/// rows are zero, as text padding is.
pub fn tokens_with_pads(rng: &mut impl Rng, rows: usize, dim: usize, pads: usize) -> TokenMatrix {
    let mut m = gaussian_rows(rng, rows, dim);
    let mut mask = vec![true; rows];
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    for &i in order.iter().take(pads.min(rows.saturating_sub(1))) {
        mask[i] = false;
        m.row_mut(i).fill(0.0);
    }
    TokenMatrix::new(m, mask).unwrap()
}

/// A small random model shape over 32x32 three-channel images.
pub fn random_config(rng: &mut impl Rng) -> DetectionConfig {
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let dim = heads * [4usize, 8][rng.random_range(0..2)];
    let layers = rng.random_range(1..=4);
    DetectionConfig {
        dim,
        heads,
        layers,
        n_l: 32,
        patch: 4,
        channels: 3,
        top_p: rng.random_range(1..=16),
        top_q: rng.random_range(1..=8),
        fusion_layers: None,
        seed: rng.random(),
        ..Default::default()
    }
}

/// A planted corpus of `images` images for the `polyp` fixture with
/// `terms_per_kind` attributes per column, and its category bank.
pub fn planted_case(
    config: &DetectionConfig,
    images: usize,
    terms_per_kind: usize,
    seed: u64,
) -> (ModelWeights, SynthOutput, BankSet) {
    let w = ModelWeights::seeded(config).unwrap();
    let spec = SynthSpec::from_fixture("polyp", terms_per_kind, images, seed).unwrap();
    let out = synth_dataset(&spec, &w).unwrap();
    let banks = BankSet::build(&spec.prompt_bank(), &["polyp"], &w, config).unwrap();
    (w, out, banks)
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reference AP for one category at one threshold by exhaustive matching.
///
/// Every assignment of ranked predictions to distinct same-image ground truth
/// with IoU at or above `thr` is enumerated. The assignment whose hit pattern
/// is lexicographically greatest in rank order is scored as the sum over hits
/// of the best precision at that rank or later, divided by the ground-truth
/// count.
pub fn brute_force_ap(preds: &[ScoredBox], gts: &[GroundTruthBox], thr: f64) -> f64 {
    let mut ranked: Vec<&ScoredBox> = preds.iter().collect();
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let candidates: Vec<Vec<usize>> = ranked
        .iter()
        .map(|p| {
            (0..gts.len())
                .filter(|&g| {
                    gts[g].image_id == p.image_id
                        && gts[g].category == p.category
                        && iou_ref(&p.bbox, &gts[g].bbox) >= thr
                })
                .collect()
        })
        .collect();

    fn search(k: usize, cands: &[Vec<usize>], used: &mut Vec<bool>, hits: &mut Vec<bool>, best: &mut Vec<bool>) {
        if k == cands.len() {
            if *hits > *best {
                *best = hits.clone();
            }
            return;
        }
        for &g in &cands[k] {
            if !used[g] {
                used[g] = true;
                hits.push(true);
                search(k + 1, cands, used, hits, best);
                hits.pop();
                used[g] = false;
            }
        }
        hits.push(false);
        search(k + 1, cands, used, hits, best);
        hits.pop();
    }

    let mut best = vec![false; ranked.len()];
    search(0, &candidates, &mut vec![false; gts.len()], &mut Vec::new(), &mut best);

    let n = gts.len() as f64;
    let precision: Vec<f64> = (0..best.len())
        .map(|r| best[..=r].iter().filter(|h| **h).count() as f64 / (r + 1) as f64)
        .collect();
    (0..best.len())
        .filter(|&r| best[r])
        .map(|r| precision[r..].iter().cloned().fold(0.0, f64::max) / n)
        .sum()
}

/// Up to four non-overlapping ground-truth boxes per image and jittered or
/// random predictions around them.
pub fn micro_fixture(rng: &mut impl Rng) -> (Vec<ScoredBox>, Vec<GroundTruthBox>) {
    let images = rng.random_range(1..=3u64);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 0..images {
        let n_gt = rng.random_range(0..=4usize);
        let n_pred = rng.random_range(0..=4usize);
        // Each ground-truth box sits in its own 20x20 slot.
        let mut boxes = Vec::new();
        for s in 0..n_gt {
            let (ox, oy) = ((s % 2) as f64 * 20.0, (s / 2) as f64 * 20.0);
            let x1 = ox + rng.random_range(0.0..4.0);
            let y1 = oy + rng.random_range(0.0..4.0);
            let b = BBox::new(x1, y1, x1 + rng.random_range(6.0..14.0), y1 + rng.random_range(6.0..14.0)).unwrap();
            boxes.push(b);
            gts.push(GroundTruthBox { image_id: img, category: "polyp".into(), bbox: b });
        }
        for _ in 0..n_pred {
            let bbox = if !boxes.is_empty() && rng.random_bool(0.7) {
                let g = boxes[rng.random_range(0..boxes.len())];
                let d: Vec<f64> = (0..4).map(|_| rng.random_range(-2.5..2.5)).collect();
                let (dx1, dy1, dx2, dy2) = (d[0], d[1], d[2], d[3]);
                BBox::new(g.x1 + dx1, g.y1 + dy1, (g.x2 + dx2).max(g.x1 + dx1 + 1.0), (g.y2 + dy2).max(g.y1 + dy1 + 1.0)).unwrap()
            } else {
                let x1 = rng.random_range(0.0..30.0);
                let y1 = rng.random_range(0.0..30.0);
                BBox::new(x1, y1, x1 + rng.random_range(2.0..12.0), y1 + rng.random_range(2.0..12.0)).unwrap()
            };
            preds.push(ScoredBox { image_id: img, category: "polyp".into(), bbox, score: rng.random_range(0.0..1.0) });
        }
    }
    if gts.is_empty() {
        let bbox = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        gts.push(GroundTruthBox { image_id: 0, category: "polyp".into(), bbox });
    }
    (preds, gts)
}

pub fn random_image(rng: &mut impl Rng, width: usize, height: usize, channels: usize) -> promptground::ToyImage {
    let px = (0..width * height * channels).map(|_| rng.random_range(0.0..1.0)).collect();
    promptground::ToyImage::new(width, height, channels, px).unwrap()
}

const WORDS: [&str; 12] = [
    "white", "yellow", "round", "oval", "smooth", "rough", "flat", "raised", "colon", "wall", "pink", "granular",
];

/// A random prompt of 1..=12 words with random tags.
pub fn random_prompt(rng: &mut impl Rng) -> (String, Vec<promptground::AttributeKind>) {
    let n = rng.random_range(1..=WORDS.len());
    let mut words = WORDS.to_vec();
    words.shuffle(rng);
    let tags = (0..n)
        .map(|_| promptground::AttributeKind::DESCRIPTIVE[rng.random_range(0..4)])
        .collect();
    (words[..n].join(" "), tags)
}

/// Structural mode with no fused layer against the two encoder stacks run
/// side by side, compared bit for bit.
pub fn degenerate_equivalence(seed: u64) -> Result<(), String> {
    use promptground::fusion::embed_target;
    use promptground::numeric::encoder_layer;
    use promptground::{build_bank, embed_image, forward};

    let mut r = rng(seed);
    let mut config = random_config(&mut r);
    config.fusion_layers = Some(Vec::new());
    let w = ModelWeights::seeded(&config).map_err(|e| e.to_string())?;
    let (width, height) = (4 * r.random_range(1..=8), 4 * r.random_range(1..=8));
    let img = random_image(&mut r, width, height, 3);
    let (prompt, tags) = random_prompt(&mut r);
    let bank = build_bank(&prompt, &tags, &w, &config).map_err(|e| e.to_string())?;
    let target = ["polyp", "red blood cells", "colon polyp"][r.random_range(0..3)];
    let got = forward(&img, target, &bank, &w, &config).map_err(|e| e.to_string())?;

    let mut o = embed_image(&img, w.embedder()).unwrap();
    let mut t = embed_target(target, &w, &config).unwrap();
    for lw in w.layers() {
        o = encoder_layer(&o, &lw.image).unwrap();
        t = encoder_layer(&t, &lw.text).unwrap();
    }
    if !got.traces.is_empty() {
        return Err(format!("seed {seed}: {} traces with no fused layer", got.traces.len()));
    }
    let same = |a: &TokenMatrix, b: &TokenMatrix| {
        a.mask() == b.mask() && a.matrix().data().iter().zip(b.matrix().data()).all(|(x, y)| x.to_bits() == y.to_bits())
    };
    if !same(&got.o_final, &o) || !same(&got.t_final, &t) {
        return Err(format!("seed {seed}: output differs from the plain stacks"));
    }
    Ok(())
}

/// Builds the bundled categories' prompt bank against the table-backed mocks.
pub fn forge_bundled(max_in_flight: usize) -> promptground::prompt::PromptBank {
    use promptground::prompt::client::{FixtureLlm, MockVqa, RetryPolicy};
    use promptground::prompt::forge::{default_questions, forge_prompt_bank, CategoryRequest, ForgeOptions, Question};
    use promptground::prompt::Source;

    let requests: Vec<CategoryRequest> = ["polyp", "red blood cells"]
        .iter()
        .map(|cat| {
            let mut questions = default_questions(cat);
            if *cat == "polyp" {
                questions.insert(1, Question::new("morphology", promptground::AttributeKind::Shape, cat));
            }
            CategoryRequest {
                category: cat.to_string(),
                images: (1..=3).map(|i| (format!("img_{i:05}"), format!("images/{cat}/{i}.ppm"))).collect(),
                questions,
            }
        })
        .collect();
    let options = ForgeOptions {
        retry: RetryPolicy { attempts: 2, timeout_ms: 50 },
        max_in_flight,
        llm_source: Source::Fixture,
    };
    forge_prompt_bank(&requests, &MockVqa::bundled(), &FixtureLlm::new(), options)
        .unwrap()
        .bank
}

/// A random fusion subset of `1..=layers`, possibly empty.
pub fn random_fusion(rng: &mut impl Rng, layers: usize) -> Option<Vec<usize>> {
    match rng.random_range(0..3) {
        0 => None,
        _ => Some((1..=layers).filter(|_| rng.random_bool(0.5)).collect()),
    }
}

/// Two `run_detect` calls, one parallel and one sequential, into separate
/// directories; every artifact must match byte for byte.
pub fn determinism_case(seed: u64) -> Result<(), String> {
    use promptground::harness::run::{PREDICTIONS_FILE, TRACES_FILE};
    use promptground::harness::run_detect;
    use promptground::{ExecPolicy, Mode};

    let mut r = rng(seed);
    let mut config = random_config(&mut r);
    config.fusion_layers = random_fusion(&mut r, config.layers);
    if r.random_bool(0.25) {
        config.mode = Mode::Baseline;
    }
    let images = r.random_range(2..=6);
    let (w, out, banks) = planted_case(&config, images, 4, r.random());
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let policies = [ExecPolicy::Parallel, ExecPolicy::Sequential];
    for (d, p) in dirs.iter().zip(policies) {
        run_detect(&out.corpus, &banks, &w, &config, d.path(), p).map_err(|e| e.to_string())?;
    }
    for f in [PREDICTIONS_FILE, TRACES_FILE, "metrics.json", "resolved_config.toml"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        if a != b {
            return Err(format!("seed {seed}: {f} differs between runs"));
        }
    }
    Ok(())
}

/// `total == Q * |fused layers| * passes` for a run's traces.
pub fn conserves(run: &promptground::harness::DetectRun, config: &DetectionConfig) -> Result<(), String> {
    use promptground::harness::aggregate_selection_frequency;
    let report = aggregate_selection_frequency(&run.traces);
    let fused = match config.mode {
        promptground::Mode::Baseline => 0,
        promptground::Mode::Structural => config.fusion_set().len(),
    };
    let want = (config.top_q * fused * run.passes) as u64;
    if report.total != want {
        return Err(format!("total {} != {} x {fused} x {}", report.total, config.top_q, run.passes));
    }
    Ok(())
}
