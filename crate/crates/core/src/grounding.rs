//! Region attention supervision, region-class scores, the grounding loss and
//! object-word localization.
//!
//! `p^s = softmax_rows(r W_s^T + a^r)` adds `a^r_i` to every logit of region
//! `i`. A row softmax is invariant to such an offset, so `p^s` is in effect
//! the classifier output alone; the offset is kept so the computation
//! follows the model definition.

use rand::Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::dataset::Vocab;
use crate::params::{init_weight, Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("word id {word} has no object class")]
pub struct VocabularyError {
    pub word: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Grounding {
    /// `classes x d_aug`
    pub w_s: ParamId,
}

impl Grounding {
    pub fn register<R: Rng>(store: &mut ParamStore, rng: &mut R, n_objects: usize, aug_dim: usize) -> Self {
        Self {
            w_s: store.register("grounding.w_s", init_weight(rng, n_objects, aug_dim)),
        }
    }

    /// Per-region class distributions, `N x classes`.
    pub fn region_class_scores(&self, g: &mut Graph, regions: Var, a_r: Var) -> Var {
        let w = g.param(self.w_s);
        region_class_scores(&mut g.tape, regions, a_r, w)
    }
}

pub fn region_class_scores(tape: &mut Tape, regions: Var, a_r: Var, w_s: Var) -> Var {
    let logits = tape.matmul_t(regions, w_s);
    let shifted = tape.add_row_offset(logits, a_r);
    tape.softmax_rows(shifted)
}

/// `L(R) = -sum_i gamma_i log a^r_i`.
pub fn region_attention_loss(tape: &mut Tape, a_r: Var, gamma: &[bool]) -> Var {
    let terms: Vec<Var> = gamma
        .iter()
        .enumerate()
        .filter(|(_, &g)| g)
        .map(|(i, _)| {
            let p = tape.pick(a_r, i);
            tape.log(p)
        })
        .collect();
    if terms.is_empty() {
        return tape.zeros(1, 1);
    }
    let s = tape.add_all(&terms);
    tape.scale(s, -1.0)
}

/// `L(G) = -lambda_l sum_i gamma_i log p^s_i[class] + lambda_r L(R)`.
pub fn grounding_loss(
    tape: &mut Tape,
    p_s: Var,
    gamma: &[bool],
    class: usize,
    l_r: Var,
    lambda_l: f64,
    lambda_r: f64,
) -> Var {
    let column = tape.col(p_s, class);
    let cls = region_attention_loss(tape, column, gamma);
    let a = tape.scale(cls, lambda_l);
    let b = tape.scale(l_r, lambda_r);
    tape.add(a, b)
}

/// Index of the largest unmasked entry; ties go to the lowest index.
pub fn localize(column: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in column.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > column[b]) {
            best = Some(i);
        }
    }
    best
}

/// Localizes an object word against the class column of `p_s`.
pub fn localize_word(vocab: &Vocab, word: usize, p_s: &Tensor, mask: &[bool]) -> Result<Option<usize>, VocabularyError> {
    let class = vocab.object_class(word).ok_or(VocabularyError { word })?;
    let column: Vec<f64> = (0..p_s.rows()).map(|r| p_s.get(r, class)).collect();
    Ok(localize(&column, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_loss_closed_forms() {
        let mut t = Tape::new();
        let a = t.constant_vector(&[0.0, 1.0, 0.0]);
        let l = region_attention_loss(&mut t, a, &[false, true, false]);
        assert_eq!(t.scalar(l), 0.0);
        let u = t.constant_vector(&[0.25; 4]);
        let l = region_attention_loss(&mut t, u, &[true, false, false, false]);
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-12);
        let h = t.constant_vector(&[0.5, 0.5, 0.0, 0.0]);
        let l = region_attention_loss(&mut t, h, &[true, true, false, false]);
        assert!((t.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn class_scores_rows_and_offset() {
        let mut t = Tape::new();
        let r = t.leaf(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![0.1, 0.1]]));
        let w0 = t.leaf(Tensor::zeros(4, 2));
        let a = t.constant_vector(&[1.0 / 3.0; 3]);
        let p = region_class_scores(&mut t, r, a, w0);
        assert!(t.value(p).as_slice().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = t.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![-1.0, 2.0]]));
        let p1 = region_class_scores(&mut t, r, a, w);
        let b = t.constant_vector(&[0.9, 0.05, 0.05]);
        let p2 = region_class_scores(&mut t, r, b, w);
        let (v1, v2) = (t.value(p1).clone(), t.value(p2).clone());
        for i in 0..3 {
            assert!((v1.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in v1.row(i).iter().zip(v2.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grounding_loss_closed_forms() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.0, 1.0]]));
        let lr = t.constant_vector(&[2f64.ln()]);
        let l = grounding_loss(&mut t, p, &[true, false], 0, lr, 0.0, 0.0);
        assert_eq!(t.scalar(l), 0.0);
        let zero = t.zeros(1, 1);
        let l = grounding_loss(&mut t, p, &[false, true], 1, zero, 1.0, 0.0);
        assert_eq!(t.scalar(l), 0.0);
        let l = grounding_loss(&mut t, p, &[true, false], 0, lr, 1.0, 1.0);
        assert!((t.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn localize_cases() {
        assert_eq!(localize(&[0.3], &[true]), Some(0));
        assert_eq!(localize(&[0.1, 0.7, 0.2], &[true; 3]), Some(1));
        assert_eq!(localize(&[0.5, 0.5], &[true; 2]), Some(0));
        assert_eq!(localize(&[0.1, 0.7, 0.2], &[true, false, true]), Some(2));
        assert_eq!(localize(&[0.1], &[false]), None);
    }
}
