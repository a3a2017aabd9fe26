//! Mutual token selection: the Top-P image tokens most similar to the prompt
//! bank, then the Top-Q bank tokens most similar to those image tokens.
//!
//! Similarity is the raw dot product. A candidate's vector of similarities
//! against the reference rows is reduced by [`Reduction`]; ties in the ranking
//! go to the lower row index, and selections are reported in ascending index
//! order.

use std::cmp::Ordering;

use crate::config::Reduction;
use crate::error::{Error, Result};
use crate::numeric::{dot, Matrix, TokenMatrix};

/// Rows picked out of a source matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedTokens {
    pub indices: Vec<usize>,
    /// `indices.len() × D`, copied bit-exactly from the source.
    pub vectors: Matrix,
    pub scores: Vec<f64>,
}

impl SelectedTokens {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn gather(source: &TokenMatrix, indices: Vec<usize>, all_scores: &[f64]) -> Self {
        let d = source.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in &indices {
            data.extend_from_slice(source.row(i));
        }
        let scores = indices.iter().map(|&i| all_scores[i]).collect();
        SelectedTokens {
            vectors: Matrix::new(indices.len(), d, data).expect("gathered shape"),
            indices,
            scores,
        }
    }

    /// The selected rows as an all-valid token matrix.
    pub fn as_tokens(&self) -> Result<TokenMatrix> {
        TokenMatrix::dense(self.vectors.clone())
    }
}

/// Reduced similarity of every candidate row against the valid reference
/// rows. Masked candidates score `-inf`.
pub fn score_against(
    candidates: &TokenMatrix,
    reference: &TokenMatrix,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    score_rows(candidates, reference.matrix(), reference.mask(), reduction)
}

fn score_rows(
    candidates: &TokenMatrix,
    reference: &Matrix,
    reference_mask: &[bool],
    reduction: Reduction,
) -> Result<Vec<f64>> {
    if candidates.dim() != reference.cols() {
        return Err(Error::config(format!(
            "candidate width {} does not match reference width {}",
            candidates.dim(),
            reference.cols()
        )));
    }
    let refs: Vec<&[f64]> = reference_mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .map(|(i, _)| reference.row(i))
        .collect();
    if refs.is_empty() {
        return Err(Error::NoAttendable);
    }
    let scores = (0..candidates.rows())
        .map(|j| {
            if !candidates.is_valid(j) {
                return f64::NEG_INFINITY;
            }
            let c = candidates.row(j);
            match reduction {
                Reduction::Max => refs
                    .iter()
                    .map(|r| dot(c, r))
                    .fold(f64::NEG_INFINITY, f64::max),
                Reduction::Mean => refs.iter().map(|r| dot(c, r)).sum::<f64>() / refs.len() as f64,
            }
        })
        .collect::<Vec<_>>();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericDomain("similarity score is NaN".into()));
    }
    Ok(scores)
}

/// Descending score, then ascending index. Signed zeros compare equal.
fn rank_order(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| by_score(scores[b], scores[a]).then(a.cmp(&b))
}

fn by_score(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("scores are never NaN")
}

/// The `k` valid indices with the largest scores, ascending. Panics on NaN.
pub fn select_top(scores: &[f64], k: usize, mask: &[bool]) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, rank_order(scores));
        pool.truncate(k);
    }
    pool.sort_unstable();
    pool
}

/// Top-P image tokens by similarity to the bank layer; vectors come from `o`.
pub fn select_visual_top_p(
    o: &TokenMatrix,
    bank_layer: &TokenMatrix,
    p: usize,
    reduction: Reduction,
) -> Result<SelectedTokens> {
    let scores = score_against(o, bank_layer, reduction)?;
    let indices = select_top(&scores, p, o.mask());
    Ok(SelectedTokens::gather(o, indices, &scores))
}

/// Top-Q bank tokens by similarity to the selected image tokens; vectors come
/// from the bank layer.
pub fn select_prompt_top_q(
    bank_layer: &TokenMatrix,
    kv: &SelectedTokens,
    q: usize,
    reduction: Reduction,
) -> Result<SelectedTokens> {
    if kv.is_empty() {
        return Err(Error::config("no selected visual tokens to score prompt tokens against"));
    }
    let mask = vec![true; kv.len()];
    let scores = score_rows(bank_layer, &kv.vectors, &mask, reduction)?;
    let indices = select_top(&scores, q, bank_layer.mask());
    Ok(SelectedTokens::gather(bank_layer, indices, &scores))
}

/// Exhaustive reference for the two-stage selection: the full similarity
/// table is materialized, reduced, and fully sorted.
pub mod oracle {
    use super::*;

    fn table(a: &TokenMatrix, b_rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        (0..a.rows())
            .map(|i| {
                b_rows
                    .iter()
                    .map(|r| a.row(i).iter().zip(r).map(|(x, y)| x * y).sum())
                    .collect()
            })
            .collect()
    }

    fn reduce(row: &[f64], reduction: Reduction) -> f64 {
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        match reduction {
            Reduction::Max => sorted[0],
            Reduction::Mean => row.iter().sum::<f64>() / row.len() as f64,
        }
    }

    fn top(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
        let mut ranked = scores.to_vec();
        ranked.sort_by(|x, y| by_score(y.1, x.1).then(x.0.cmp(&y.0)));
        let mut out: Vec<usize> = ranked.into_iter().take(k).map(|(i, _)| i).collect();
        out.sort();
        out
    }

    /// `(visual indices, prompt indices)`.
    pub fn selection_oracle(
        o: &TokenMatrix,
        bank_layer: &TokenMatrix,
        p: usize,
        q: usize,
        reduction: Reduction,
    ) -> (Vec<usize>, Vec<usize>) {
        let bank_rows: Vec<Vec<f64>> = bank_layer
            .valid_indices()
            .map(|i| bank_layer.row(i).to_vec())
            .collect();
        let vt = table(o, &bank_rows);
        let visual_scores: Vec<(usize, f64)> = o
            .valid_indices()
            .map(|j| (j, reduce(&vt[j], reduction)))
            .collect();
        let visual = top(&visual_scores, p);

        let picked: Vec<Vec<f64>> = visual.iter().map(|&j| o.row(j).to_vec()).collect();
        let bt = table(bank_layer, &picked);
        let prompt_scores: Vec<(usize, f64)> = bank_layer
            .valid_indices()
            .map(|j| (j, reduce(&bt[j], reduction)))
            .collect();
        (visual, top(&prompt_scores, q))
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::selection_oracle;
    use super::*;

    fn tm(rows: &[Vec<f64>]) -> TokenMatrix {
        TokenMatrix::dense(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn score_table_example() {
        let c = tm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let r = tm(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        assert_eq!(score_against(&c, &r, Reduction::Max).unwrap(), vec![2.0, 3.0, 3.0]);
        assert_eq!(
            score_against(&c, &r, Reduction::Mean).unwrap(),
            vec![1.0, 1.5, 2.5]
        );
        let doubled = TokenMatrix::dense(r.matrix().scaled(2.0)).unwrap();
        assert_eq!(score_against(&c, &doubled, Reduction::Max).unwrap(), vec![4.0, 6.0, 6.0]);
        let zero = tm(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(score_against(&c, &zero, Reduction::Max).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn score_against_masked() {
        let c = TokenMatrix::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            vec![true, false],
        )
        .unwrap();
        let r = TokenMatrix::new(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![false]).unwrap();
        assert!(matches!(score_against(&c, &r, Reduction::Max), Err(Error::NoAttendable)));
        let r = tm(&[vec![1.0, 1.0]]);
        let s = score_against(&c, &r, Reduction::Max).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[1], f64::NEG_INFINITY);
    }

    #[test]
    fn select_top_examples() {
        assert_eq!(select_top(&[2.0, 3.0, 3.0], 2, &[true; 3]), vec![1, 2]);
        assert_eq!(select_top(&[5.0, 5.0, 5.0], 1, &[true; 3]), vec![0]);
        assert_eq!(select_top(&[1.0, 0.0, 9.0], 10, &[true, true, false]), vec![0, 1]);
        assert_eq!(select_top(&[1.0, 0.0], 0, &[true; 2]), Vec::<usize>::new());
        assert_eq!(select_top(&[0.0, -0.0, 0.0], 1, &[true; 3]), vec![0]);
        assert_eq!(select_top(&[-0.0, 0.0], 1, &[true; 2]), vec![0]);
    }

    #[test]
    fn degenerate_p_selects_everything() {
        let o = tm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let bank = tm(&[vec![0.3, 0.1]]);
        let sel = select_visual_top_p(&o, &bank, 3, Reduction::Max).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2]);
        assert_eq!(sel.vectors, *o.matrix());
    }

    #[test]
    fn planted_bank_token_wins_top1() {
        let o = tm(&[vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let bank = tm(&[vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]);
        let sel = select_visual_top_p(&o, &bank, 1, Reduction::Max).unwrap();
        assert_eq!(sel.indices, vec![1]);

        let permuted = tm(&[vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let again = select_visual_top_p(&o, &permuted, 1, Reduction::Max).unwrap();
        assert_eq!(again.indices, sel.indices);
    }

    #[test]
    fn prompt_selection_examples() {
        let bank = tm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let o = tm(&[vec![3.0, 0.0]]);
        let kv = select_visual_top_p(&o, &bank, 1, Reduction::Max).unwrap();
        let kl = select_prompt_top_q(&bank, &kv, 1, Reduction::Max).unwrap();
        assert_eq!(kl.indices, vec![0]);
        assert_eq!(kl.scores, vec![3.0]);

        let all = select_prompt_top_q(&bank, &kv, 2, Reduction::Max).unwrap();
        assert_eq!(all.indices, vec![0, 1]);

        let dup = tm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let kl = select_prompt_top_q(&dup, &kv, 1, Reduction::Max).unwrap();
        assert_eq!(kl.indices, vec![0]);

        let empty = SelectedTokens::gather(&o, Vec::new(), &[0.0]);
        assert!(select_prompt_top_q(&bank, &empty, 1, Reduction::Max).is_err());
    }

    #[test]
    fn pad_rows_never_selected() {
        let bank = TokenMatrix::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap(),
            vec![true, false, false],
        )
        .unwrap();
        let o = tm(&[vec![-1.0, 0.0]]);
        let kv = select_visual_top_p(&o, &bank, 1, Reduction::Max).unwrap();
        let kl = select_prompt_top_q(&bank, &kv, 3, Reduction::Max).unwrap();
        assert_eq!(kl.indices, vec![0]);
    }

    #[test]
    fn oracle_matches_on_table_example() {
        let c = tm(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let r = tm(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let (v, _) = selection_oracle(&c, &r, 2, 1, Reduction::Max);
        assert_eq!(v, vec![1, 2]);

        let flat = tm(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let (v, p) = selection_oracle(&flat, &flat, 2, 2, Reduction::Max);
        assert_eq!((v, p), (vec![0, 1], vec![0, 1]));
    }
}
