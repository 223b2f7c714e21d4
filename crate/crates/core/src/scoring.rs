//! Test-time scoring: erode, repair, measure the perceptual gap, and
//! threshold it.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::erosion::{apply_erosion, ErosionOp, ErosionSet};
use crate::evaluation::auroc;
use crate::metrics::{l2_loss, lpips_distance, LossWeights, PerceptualExtractor};
use crate::repairer::RepairerModel;
use crate::{Error, Image, Result};

/// Default quantile of ID validation scores used as the threshold.
pub const DEFAULT_QUANTILE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub score: f64,
    pub decision: Option<bool>,
    pub erosion_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Fixed(f64),
    IdQuantile(f64),
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec::IdQuantile(DEFAULT_QUANTILE)
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdSpec::Fixed(e) if e.is_finite() => Ok(()),
            ThresholdSpec::IdQuantile(q) if q > 0.0 && q <= 1.0 => Ok(()),
            other => Err(Error::InvalidConfig(format!("invalid threshold {other}"))),
        }
    }
}

impl fmt::Display for ThresholdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSpec::Fixed(e) => write!(f, "fixed:{e:?}"),
            ThresholdSpec::IdQuantile(q) => write!(f, "id-quantile:{q:?}"),
        }
    }
}

impl FromStr for ThresholdSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad threshold {s:?}"));
        let (method, value) = s.split_once(':').ok_or_else(bad)?;
        let value: f64 = value.trim().parse().map_err(|_| bad())?;
        let spec = match method.trim() {
            "fixed" => ThresholdSpec::Fixed(value),
            "id-quantile" => ThresholdSpec::IdQuantile(value),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// How the gap between an input and its repair is measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFn {
    Lpips,
    L2,
    Weighted(LossWeights),
}

impl ScoreFn {
    pub fn score(&self, phi: &PerceptualExtractor, repaired: &Image, original: &Image) -> Result<f64> {
        let s = match self {
            ScoreFn::Lpips => lpips_distance(phi, repaired, original)?,
            ScoreFn::L2 => l2_loss(repaired, original)?,
            ScoreFn::Weighted(w) => {
                w.combine(l2_loss(repaired, original)?, lpips_distance(phi, repaired, original)?)
            }
        };
        if !s.is_finite() {
            return Err(Error::NonFiniteScore);
        }
        Ok(s)
    }
}

/// Perceptual distance between `x` and the repair of its erosion.
pub fn ood_score(model: &RepairerModel, phi: &PerceptualExtractor, op: &ErosionOp, x: &Image) -> Result<f64> {
    score_with(model, phi, op, x, ScoreFn::Lpips)
}

pub fn score_with(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    op: &ErosionOp,
    x: &Image,
    score_fn: ScoreFn,
) -> Result<f64> {
    let repaired = model.repair(&apply_erosion(op, x)?)?;
    score_fn.score(phi, &repaired, x)
}

pub fn score_images(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    op: &ErosionOp,
    images: &[Image],
    score_fn: ScoreFn,
) -> Result<Vec<f64>> {
    images.iter().map(|x| score_with(model, phi, op, x, score_fn)).collect()
}

/// `true` (OOD) iff the score is strictly above the threshold.
pub fn classify_ood(score: f64, epsilon: f64) -> bool {
    score > epsilon
}

/// Builds records in input order; decisions only when a threshold is given.
pub fn score_records(
    scores: &[f64],
    sample_ids: &[usize],
    erosion_id: usize,
    epsilon: Option<f64>,
) -> Result<Vec<ScoreRecord>> {
    if scores.len() != sample_ids.len() {
        return Err(Error::shape(sample_ids.len(), scores.len()));
    }
    Ok(scores
        .iter()
        .zip(sample_ids)
        .map(|(&score, &sample_id)| ScoreRecord {
            sample_id,
            score,
            decision: epsilon.map(|e| classify_ood(score, e)),
            erosion_id,
        })
        .collect())
}

/// Outcome of choosing the test-time erosion.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub op: ErosionOp,
    /// Criterion value per op in set order; `None` where it was undefined.
    /// Empty when the set had one member and nothing was evaluated.
    pub values: Vec<Option<f64>>,
}

fn pick(set: &ErosionSet, values: Vec<Option<f64>>) -> Result<Selection> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    let (index, _) = best.ok_or(Error::AurocUndefined)?;
    Ok(Selection { index, op: set.ops()[index], values })
}

fn tolerate_undefined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::NonFiniteScore | Error::NonFiniteActivation | Error::NonFiniteLatent) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Picks the op with the highest validation AUROC; ties go to the lower
/// index.
pub fn select_erosion(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    set: &ErosionSet,
    val_id: &[Image],
    val_ood: &[Image],
) -> Result<Selection> {
    if val_id.is_empty() {
        return Err(Error::Empty("val-id split"));
    }
    if val_ood.is_empty() {
        return Err(Error::Empty("val-ood split"));
    }
    if set.len() == 1 {
        return Ok(Selection { index: 0, op: set.ops()[0], values: Vec::new() });
    }
    let mut values = Vec::with_capacity(set.len());
    for op in set.ops() {
        let r = score_images(model, phi, op, val_id, ScoreFn::Lpips)
            .and_then(|id| Ok((id, score_images(model, phi, op, val_ood, ScoreFn::Lpips)?)))
            .and_then(|(id, ood)| auroc(&id, &ood));
        values.push(tolerate_undefined(r)?);
    }
    pick(set, values)
}

/// Selection without OOD data: the op whose ID scores have the largest
/// variance relative to their squared mean.
pub fn select_erosion_label_free(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    set: &ErosionSet,
    val_id: &[Image],
) -> Result<Selection> {
    if val_id.is_empty() {
        return Err(Error::Empty("val-id split"));
    }
    if set.len() == 1 {
        return Ok(Selection { index: 0, op: set.ops()[0], values: Vec::new() });
    }
    let mut values = Vec::with_capacity(set.len());
    for op in set.ops() {
        let r = score_images(model, phi, op, val_id, ScoreFn::Lpips).map(|s| {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            if mean == 0.0 {
                0.0
            } else {
                var / (mean * mean)
            }
        });
        values.push(tolerate_undefined(r)?.filter(|v| v.is_finite()));
    }
    pick(set, values)
}

/// Resolves the threshold. Quantiles use lower interpolation, so at most
/// `1 - q` of the scores lie strictly above the result.
pub fn calibrate_threshold(id_val_scores: &[f64], spec: ThresholdSpec) -> Result<f64> {
    spec.validate()?;
    if id_val_scores.is_empty() {
        return Err(Error::Empty("id validation scores"));
    }
    if id_val_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    match spec {
        ThresholdSpec::Fixed(e) => Ok(e),
        ThresholdSpec::IdQuantile(q) => {
            let mut s = id_val_scores.to_vec();
            s.sort_by(|a, b| a.total_cmp(b));
            let idx = libm::floor(q * (s.len() - 1) as f64) as usize;
            Ok(s[idx])
        }
    }
}
