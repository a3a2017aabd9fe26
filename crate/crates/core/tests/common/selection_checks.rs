//! Randomized selection checks shared by the property tests and the
//! acceptance run. Each takes a seed and reports the first disagreement.

use promptground::numeric::{Matrix, TokenMatrix};
use promptground::selection::oracle::selection_oracle;
use promptground::selection::{select_prompt_top_q, select_top, select_visual_top_p};
use promptground::Reduction;
use rand::seq::SliceRandom;
use rand::Rng;

use super::rng;

pub type Check = Result<(), String>;

fn reduction(r: &mut impl Rng) -> Reduction {
    if r.random_bool(0.5) {
        Reduction::Max
    } else {
        Reduction::Mean
    }
}

/// Values on a coarse grid so exact score ties are common.
fn coarse_rows(r: &mut impl Rng, rows: usize, dim: usize) -> Matrix {
    let data = (0..rows * dim).map(|_| r.random_range(-2i32..=2) as f64 / 2.0).collect();
    Matrix::new(rows, dim, data).unwrap()
}

fn instance(r: &mut impl Rng) -> (TokenMatrix, TokenMatrix) {
    let n_v = r.random_range(1..=64);
    let n_l = r.random_range(1..=32);
    let d = r.random_range(1..=16);
    let tied = r.random_bool(0.3);
    let o = if tied { coarse_rows(r, n_v, d) } else { super::gaussian_rows(r, n_v, d) };
    let o = TokenMatrix::dense(o).unwrap();
    let pads = r.random_range(0..n_l);
    let bank = if tied {
        let mut m = coarse_rows(r, n_l, d);
        let mut mask = vec![true; n_l];
        for i in n_l - pads..n_l {
            mask[i] = false;
            m.row_mut(i).fill(0.0);
        }
        TokenMatrix::new(m, mask).unwrap()
    } else {
        super::tokens_with_pads(r, n_l, d, pads)
    };
    (o, bank)
}

pub fn oracle_equivalence(seed: u64) -> Check {
    let mut r = rng(seed);
    let (o, bank) = instance(&mut r);
    let p = r.random_range(1..=o.rows());
    let q = r.random_range(1..=bank.valid_count());
    let red = reduction(&mut r);
    let kv = select_visual_top_p(&o, &bank, p, red).map_err(|e| e.to_string())?;
    let kl = select_prompt_top_q(&bank, &kv, q, red).map_err(|e| e.to_string())?;
    let (ov, oq) = selection_oracle(&o, &bank, p, q, red);
    if kv.indices != ov || kl.indices != oq {
        return Err(format!("seed {seed}: fast {:?}/{:?} oracle {ov:?}/{oq:?}", kv.indices, kl.indices));
    }
    Ok(())
}

fn increasing(which: usize, x: f64) -> f64 {
    match which {
        0 => x * x * x + x,
        1 => x.exp(),
        2 => 4.0 * x - 3.0,
        _ => x.atan() + 2.0 * x,
    }
}

pub fn monotone_invariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = r.random_range(1..=64);
    let scores: Vec<f64> = (0..n).map(|_| r.random_range(-16i32..=16) as f64 / 8.0).collect();
    let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.85)).collect();
    let k = r.random_range(0..=n);
    let f = r.random_range(0..4);
    let mapped: Vec<f64> = scores.iter().map(|&x| increasing(f, x)).collect();
    let a = select_top(&scores, k, &mask);
    let b = select_top(&mapped, k, &mask);
    if a != b {
        return Err(format!("seed {seed}: f{f} changed {a:?} to {b:?}"));
    }
    // Positive rescaling of the bank rescales every dot product.
    let (o, bank) = instance(&mut r);
    let p = r.random_range(1..=o.rows());
    let red = reduction(&mut r);
    let scaled = TokenMatrix::new(bank.matrix().scaled(4.0), bank.mask().to_vec()).unwrap();
    let x = select_visual_top_p(&o, &bank, p, red).unwrap().indices;
    let y = select_visual_top_p(&o, &scaled, p, red).unwrap().indices;
    if x != y {
        return Err(format!("seed {seed}: rescaled bank changed {x:?} to {y:?}"));
    }
    Ok(())
}

fn permute_rows(t: &TokenMatrix, perm: &[usize]) -> TokenMatrix {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    let mask = perm.iter().map(|&i| t.is_valid(i)).collect();
    TokenMatrix::new(Matrix::from_rows(&rows).unwrap(), mask).unwrap()
}

/// Row `k` of the permuted matrix is row `perm[k]` of the original, so an
/// original selection `S` maps to `{k : perm[k] in S}`.
fn mapped(selection: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = (0..perm.len()).filter(|k| selection.contains(&perm[*k])).collect();
    out.sort();
    out
}

pub fn permutation_equivariance(seed: u64) -> Check {
    let mut r = rng(seed);
    let n_v = r.random_range(1..=64);
    let n_l = r.random_range(1..=32);
    let d = r.random_range(2..=16);
    let o = TokenMatrix::dense(super::gaussian_rows(&mut r, n_v, d)).unwrap();
    let pads = r.random_range(0..n_l);
    let bank = super::tokens_with_pads(&mut r, n_l, d, pads);
    let p = r.random_range(1..=n_v);
    let q = r.random_range(1..=bank.valid_count());

    let mut pv: Vec<usize> = (0..n_v).collect();
    pv.shuffle(&mut r);
    let mut pl: Vec<usize> = (0..n_l).collect();
    pl.shuffle(&mut r);
    let o2 = permute_rows(&o, &pv);
    let bank2 = permute_rows(&bank, &pl);

    let kv = select_visual_top_p(&o, &bank, p, Reduction::Max).unwrap();
    let kl = select_prompt_top_q(&bank, &kv, q, Reduction::Max).unwrap();
    let kv2 = select_visual_top_p(&o2, &bank2, p, Reduction::Max).unwrap();
    let kl2 = select_prompt_top_q(&bank2, &kv2, q, Reduction::Max).unwrap();
    if kv2.indices != mapped(&kv.indices, &pv) {
        return Err(format!("seed {seed}: visual selection not equivariant"));
    }
    if kl2.indices != mapped(&kl.indices, &pl) {
        return Err(format!("seed {seed}: prompt selection not equivariant"));
    }
    Ok(())
}

pub fn pad_exclusion(seed: u64) -> Check {
    let mut r = rng(seed);
    let n_v = r.random_range(2..=64);
    let n_l = r.random_range(2..=32);
    let d = r.random_range(1..=16);
    let mut o = super::gaussian_rows(&mut r, n_v, d);
    let mut bank = super::gaussian_rows(&mut r, n_l, d);
    let o_mask: Vec<bool> = (0..n_v).map(|i| i == 0 || r.random_bool(0.7)).collect();
    let b_mask: Vec<bool> = (0..n_l).map(|i| i == 0 || r.random_bool(0.6)).collect();
    // Masked rows get the largest values they could possibly hold.
    for (i, m) in o_mask.iter().enumerate() {
        if !m {
            o.row_mut(i).fill(1e6);
        }
    }
    for (i, m) in b_mask.iter().enumerate() {
        if !m {
            bank.row_mut(i).fill(1e6);
        }
    }
    let o = TokenMatrix::new(o, o_mask.clone()).unwrap();
    let bank = TokenMatrix::new(bank, b_mask.clone()).unwrap();
    let p = r.random_range(1..=n_v + 4);
    let q = r.random_range(1..=n_l + 4);
    let red = reduction(&mut r);
    let kv = select_visual_top_p(&o, &bank, p, red).unwrap();
    let kl = select_prompt_top_q(&bank, &kv, q, red).unwrap();
    if kv.indices.iter().any(|&i| !o_mask[i]) || kl.indices.iter().any(|&i| !b_mask[i]) {
        return Err(format!("seed {seed}: masked row selected"));
    }
    if kv.len() != p.min(o.valid_count()) || kl.len() != q.min(bank.valid_count()) {
        return Err(format!("seed {seed}: selection sizes {} / {}", kv.len(), kl.len()));
    }
    Ok(())
}

pub fn tie_stability(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = r.random_range(1..=64);
    let value = r.random_range(-3.0..3.0);
    let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    let k = r.random_range(0..=n);
    let got = select_top(&vec![value; n], k, &mask);
    let want: Vec<usize> = (0..n).filter(|&i| mask[i]).take(k).collect();
    if got != want {
        return Err(format!("seed {seed}: flat scores gave {got:?}, want {want:?}"));
    }
    // Duplicate image rows: the earlier copies win, and reruns agree.
    let d = r.random_range(1..=16);
    let base = super::gaussian_rows(&mut r, 1, d);
    let copies = r.random_range(2..=32);
    let rows: Vec<Vec<f64>> = (0..copies).map(|_| base.row(0).to_vec()).collect();
    let o = TokenMatrix::dense(Matrix::from_rows(&rows).unwrap()).unwrap();
    let bank = super::tokens_with_pads(&mut r, 8, d, 2);
    let p = r.random_range(1..=copies);
    let a = select_visual_top_p(&o, &bank, p, Reduction::Max).unwrap();
    let b = select_visual_top_p(&o, &bank, p, Reduction::Max).unwrap();
    if a.indices != (0..p).collect::<Vec<_>>() || a != b {
        return Err(format!("seed {seed}: duplicate rows selected {:?}", a.indices));
    }
    Ok(())
}
