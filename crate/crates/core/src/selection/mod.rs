//! Visual-prompt selection: hard-negative mining, real/negative pair
//! groups, the min-max contrastive loss, and the two-phase inference rule.

mod train;

pub use train::{
    EncodedImage, Inference, Learner, LearnerConfig, Objective, TextLearner, DEFAULT_K,
};

use crate::dualenc::{argmax, probs_from_embeddings, DualEncoder, Temperature};
use crate::error::{Error, Result};
use crate::glyph::{self, ClassConditionalImage, Placement};
use crate::prompts::PromptSource;
use crate::rng::derive;
use crate::tensor::{Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Real,
    Negative,
}

/// Probabilities of class `class_id` on the original image and on the
/// image carrying that class's visual prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairGroup {
    pub class_id: usize,
    pub prob_original: f64,
    pub prob_conditional: f64,
    pub polarity: Polarity,
}

impl PairGroup {
    pub fn real(class_id: usize, prob_original: f64, prob_conditional: f64) -> Self {
        Self {
            class_id,
            prob_original,
            prob_conditional,
            polarity: Polarity::Real,
        }
    }

    pub fn negative(class_id: usize, prob_original: f64, prob_conditional: f64) -> Self {
        Self {
            class_id,
            prob_original,
            prob_conditional,
            polarity: Polarity::Negative,
        }
    }
}

/// Top-K candidate classes, sorted by descending original probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningResult {
    pub classes: Vec<usize>,
    pub probs: Vec<f64>,
}

/// The `k` most probable classes other than `exclude`. Ties go to the lower
/// class index.
pub fn mine_hard_negatives(probs: &[f64], exclude: Option<usize>, k: usize) -> Result<MiningResult> {
    if k == 0 {
        return Err(Error::config("k", "K must be at least 1"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Contract("mining needs a valid probability vector".into()));
    }
    if let Some(y) = exclude {
        if y >= probs.len() {
            return Err(Error::Index {
                what: "class",
                index: y,
                len: probs.len(),
            });
        }
    }
    let mut order: Vec<usize> = (0..probs.len()).filter(|&c| Some(c) != exclude).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(MiningResult {
        probs: order.iter().map(|&c| probs[c]).collect(),
        classes: order,
    })
}

/// L = −log( min(real pair) / Σ_k max(negative pair k) ).
pub fn minmax_loss(groups: &[PairGroup]) -> Result<f64> {
    let (real, negatives) = split_groups(groups)?;
    let numerator = real.prob_original.min(real.prob_conditional);
    let denominator: f64 = negatives.iter().map(|g| g.prob_original.max(g.prob_conditional)).sum();
    let loss = -(numerator / denominator).ln();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("min-max loss is {loss} for groups {groups:?}")));
    }
    Ok(loss)
}

fn split_groups(groups: &[PairGroup]) -> Result<(&PairGroup, Vec<&PairGroup>)> {
    let reals: Vec<&PairGroup> = groups.iter().filter(|g| g.polarity == Polarity::Real).collect();
    let negatives: Vec<&PairGroup> = groups.iter().filter(|g| g.polarity == Polarity::Negative).collect();
    if reals.len() != 1 {
        return Err(Error::Contract(format!("expected one real group, got {}", reals.len())));
    }
    if negatives.is_empty() {
        return Err(Error::Contract("expected at least one negative group".into()));
    }
    Ok((reals[0], negatives))
}

/// Differentiable min-max loss over scalar probabilities `(p(c|x), p(c|x_c))`.
pub fn minmax_loss_tape<'a>(real: (Var<'a>, Var<'a>), negatives: &[(Var<'a>, Var<'a>)]) -> Result<Var<'a>> {
    let (first, rest) = negatives
        .split_first()
        .ok_or_else(|| Error::Contract("expected at least one negative group".into()))?;
    let mut denominator = first.0.maximum(first.1)?;
    for (a, b) in rest {
        denominator = denominator.add(a.maximum(*b)?)?;
    }
    Ok(real.0.minimum(real.1)?.div(denominator)?.log()?.neg())
}

/// Groups for one image plus the class-conditional images behind them.
#[derive(Debug, Clone)]
pub struct GroupSet {
    pub real: PairGroup,
    pub negatives: Vec<PairGroup>,
    pub conditional: Vec<ClassConditionalImage>,
}

impl GroupSet {
    pub fn all(&self) -> Vec<PairGroup> {
        std::iter::once(self.real).chain(self.negatives.iter().copied()).collect()
    }
}

/// Deterministic placement seed for the prompt of `class_id` on image `salt`.
pub fn placement_seed(seed: u64, salt: u64, class_id: usize) -> u64 {
    derive(seed, &[salt, class_id as u64, 0x70])
}

/// Builds x_c for `class_id` from an encoded image.
pub fn conditional_image(
    image: &EncodedImage,
    source: &PromptSource<'_>,
    class_id: usize,
    placement: Placement,
    seed: u64,
    salt: u64,
) -> Result<ClassConditionalImage> {
    let prompt = source.prompt(class_id, salt)?;
    glyph::apply_prompt(image.image, &prompt, placement, placement_seed(seed, salt, class_id))
}

/// p(·|x_c) under `text` (C × d_embed, one row per class).
pub fn conditional_probs(
    encoder: &DualEncoder,
    image: &EncodedImage,
    cond: &ClassConditionalImage,
    block_hw: (usize, usize),
    text: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let emb = encoder
        .image
        .encode_pasted(&image.patch_features, &cond.pixels, cond.block_origin, block_hw)?;
    probs_from_embeddings(&emb, text, encoder.temperature)
}

/// Real group for `y` and one negative group per mined class, every
/// probability taken from the same C-way softmax.
#[allow(clippy::too_many_arguments)]
pub fn build_groups(
    encoder: &DualEncoder,
    image: &EncodedImage,
    y: usize,
    mined: &MiningResult,
    source: &PromptSource<'_>,
    text: &Tensor,
    placement: Placement,
    seed: u64,
    salt: u64,
) -> Result<GroupSet> {
    if mined.classes.contains(&y) {
        return Err(Error::Contract(format!("mined classes {:?} include the label {y}", mined.classes)));
    }
    let rows = text_rows(text);
    let p = probs_from_embeddings(&image.embedding, &rows, encoder.temperature)?;
    let make = |c: usize| -> Result<(f64, f64, ClassConditionalImage)> {
        let cond = conditional_image(image, source, c, placement, seed, salt)?;
        let pc = conditional_probs(encoder, image, &cond, source.block_hw(), &rows)?;
        Ok((p[c], pc[c], cond))
    };
    let (po, pc, cond) = make(y)?;
    let mut conditional = vec![cond];
    let real = PairGroup::real(y, po, pc);
    let mut negatives = Vec::with_capacity(mined.classes.len());
    for &c in &mined.classes {
        let (po, pc, cond) = make(c)?;
        negatives.push(PairGroup::negative(c, po, pc));
        conditional.push(cond);
    }
    Ok(GroupSet {
        real,
        negatives,
        conditional,
    })
}

pub(crate) fn text_rows(text: &Tensor) -> Vec<Vec<f64>> {
    (0..text.rows()).map(|c| text.row(c).to_vec()).collect()
}

/// Candidate scores `max(p(c|x), p(c|x_c))` behind a selection decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub class_id: usize,
    pub candidates: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Picks the candidate with the highest score; ties go to the lower class index.
pub fn select(candidates: &[usize], original: &[f64], conditional: &[f64]) -> Result<usize> {
    if candidates.is_empty() || candidates.len() != original.len() || original.len() != conditional.len() {
        return Err(Error::Contract("selection needs one original and one conditional score per candidate".into()));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &c) in candidates.iter().enumerate() {
        let score = original[i].max(conditional[i]);
        if score > best_score || (score == best_score && c < candidates[best]) {
            best = i;
            best_score = score;
        }
    }
    Ok(candidates[best])
}

/// Two-phase rule: top-K classes from p(·|x), then the candidate whose
/// original or class-conditional probability is highest.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    encoder: &DualEncoder,
    image: &EncodedImage,
    k: usize,
    source: &PromptSource<'_>,
    text: &Tensor,
    placement: Placement,
    seed: u64,
    salt: u64,
) -> Result<Selection> {
    let rows = text_rows(text);
    let p = probs_from_embeddings(&image.embedding, &rows, encoder.temperature)?;
    let mined = mine_hard_negatives(&p, None, k.min(p.len()))?;
    let mut conditional = Vec::with_capacity(mined.classes.len());
    for &c in &mined.classes {
        let cond = conditional_image(image, source, c, placement, seed, salt)?;
        conditional.push(conditional_probs(encoder, image, &cond, source.block_hw(), &rows)?[c]);
    }
    let class_id = select(&mined.classes, &mined.probs, &conditional)?;
    let scores = mined.probs.iter().zip(&conditional).map(|(a, b)| a.max(*b)).collect();
    Ok(Selection {
        class_id,
        candidates: mined.classes,
        scores,
    })
}

/// Plain argmax of p(·|x).
pub fn predict_argmax(image: &EncodedImage, text: &Tensor, temperature: Temperature) -> Result<usize> {
    let p = probs_from_embeddings(&image.embedding, &text_rows(text), temperature)?;
    Ok(argmax(&p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mining_examples() {
        let p = [0.1, 0.5, 0.2, 0.15, 0.05];
        assert_eq!(mine_hard_negatives(&p, Some(1), 2).unwrap().classes, vec![2, 3]);
        assert_eq!(mine_hard_negatives(&p, Some(1), 4).unwrap().classes, vec![2, 3, 0, 4]);
        assert_eq!(mine_hard_negatives(&[0.25; 4], Some(0), 2).unwrap().classes, vec![1, 2]);
        assert_eq!(mine_hard_negatives(&p, None, 9).unwrap().classes.len(), 5);
        assert!(matches!(mine_hard_negatives(&p, Some(1), 0), Err(Error::Config { .. })));
    }

    #[test]
    fn loss_examples() {
        let l = minmax_loss(&[PairGroup::real(0, 0.5, 0.5), PairGroup::negative(1, 0.25, 0.25)]).unwrap();
        assert!((l + std::f64::consts::LN_2).abs() < 1e-9);
        let l = minmax_loss(&[
            PairGroup::real(0, 0.6, 0.4),
            PairGroup::negative(1, 0.3, 0.2),
            PairGroup::negative(2, 0.1, 0.25),
        ])
        .unwrap();
        assert!((l - 0.3185).abs() < 1e-4);
        let l = minmax_loss(&[PairGroup::real(0, 0.3, 0.3), PairGroup::negative(1, 0.3, 0.3)]).unwrap();
        assert_eq!(l, 0.0);
        assert!(minmax_loss(&[PairGroup::real(0, 0.3, 0.3)]).is_err());
    }

    #[test]
    fn select_example() {
        assert_eq!(select(&[0, 1], &[0.3, 0.4], &[0.6, 0.5]).unwrap(), 0);
        assert_eq!(select(&[3, 1], &[0.5, 0.2], &[0.1, 0.5]).unwrap(), 1);
    }
}
