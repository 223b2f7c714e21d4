//! AUROC, pairwise evaluation, ablation tables and decoder smoothness
//! diagnostics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::erosion::{apply_erosion, default_mask_offsets, ErosionOp, Variant};
use crate::metrics::{LossWeights, PerceptualExtractor};
use crate::repairer::RepairerModel;
use crate::scoring::{score_images, ScoreFn};
use crate::{Error, Image, Result};

/// Results are quantised to multiples of this so that swapping the two
/// groups gives exactly one minus the original.
const QUANT_BITS: u32 = 52;

/// Probability that an OOD score exceeds an ID score, ties counted half.
///
/// Uses midranks over the pooled sample, so it runs in `O(n log n)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() {
        return Err(Error::Empty("id scores"));
    }
    if ood_scores.is_empty() {
        return Err(Error::Empty("ood scores"));
    }
    if id_scores.iter().chain(ood_scores).any(|s| !s.is_finite()) {
        return Err(Error::NonFiniteScore);
    }
    let mut pooled: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the OOD rank sum, so midranks stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let doubled = (i + 1 + j + 1) as u128;
        let hits = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        rank_sum2 += doubled * hits;
        i = j + 1;
    }
    let n_ood = ood_scores.len() as u128;
    let pairs2 = 2 * id_scores.len() as u128 * n_ood;
    let u2 = rank_sum2 - n_ood * (n_ood + 1);

    let num = u2 << QUANT_BITS;
    let (q, r) = (num / pairs2, num % pairs2);
    let k = match (2 * r).cmp(&pairs2) {
        core::cmp::Ordering::Less => q,
        core::cmp::Ordering::Greater => q + 1,
        core::cmp::Ordering::Equal => q + (q & 1),
    };
    Ok(k as f64 / (1u128 << QUANT_BITS) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id_dataset: String,
    pub ood_dataset: String,
    pub variant: Variant,
    pub erosion: ErosionOp,
    pub auroc: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Free-form `key = value` pairs such as the config hash.
    pub metadata: Vec<(String, String)>,
}

/// Scores of both splits under one erosion, plus their AUROC.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScores {
    pub id: Vec<f64>,
    pub ood: Vec<f64>,
    pub auroc: f64,
}

pub fn evaluate_pair(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    op: &ErosionOp,
    id: &[Image],
    ood: &[Image],
    score_fn: ScoreFn,
) -> Result<PairScores> {
    if id.is_empty() {
        return Err(Error::Empty("id split"));
    }
    if ood.is_empty() {
        return Err(Error::Empty("ood split"));
    }
    let id_s = score_images(model, phi, op, id, score_fn)?;
    let ood_s = score_images(model, phi, op, ood, score_fn)?;
    let auroc = auroc(&id_s, &ood_s)?;
    Ok(PairScores { id: id_s, ood: ood_s, auroc })
}

/// AUROC per row (OOD set) and column (setting).
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl AblationTable {
    pub fn new(columns: Vec<String>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push_row(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::shape(self.columns.len(), values.len()));
        }
        self.rows.push((String::from(name), values));
        Ok(())
    }

    /// Largest minus smallest value in each row.
    pub fn row_spreads(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(_, v)| {
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .collect()
    }
}

/// Score functions compared by the loss ablation, in column order.
pub fn loss_ablation_scores(weights: LossWeights) -> [(&'static str, ScoreFn); 3] {
    [("l2", ScoreFn::L2), ("l2+lpips", ScoreFn::Weighted(weights)), ("lpips", ScoreFn::Lpips)]
}

/// Re-scores every OOD set under each of the three score functions.
pub fn loss_ablation(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    op: &ErosionOp,
    weights: LossWeights,
    id: &[Image],
    ood_sets: &[(&str, &[Image])],
) -> Result<AblationTable> {
    let fns = loss_ablation_scores(weights);
    let mut table = AblationTable::new(fns.iter().map(|(n, _)| String::from(*n)).collect());
    let id_scores = fns
        .iter()
        .map(|(_, f)| score_images(model, phi, op, id, *f))
        .collect::<Result<Vec<_>>>()?;
    for (name, ood) in ood_sets {
        let mut row = Vec::with_capacity(fns.len());
        for ((_, f), id_s) in fns.iter().zip(&id_scores) {
            let ood_s = score_images(model, phi, op, ood, *f)?;
            row.push(auroc(id_s, &ood_s)?);
        }
        table.push_row(name, row)?;
    }
    Ok(table)
}

/// Re-scores with a centred square mask of `side` moved right by each
/// offset in `{0, r/8, r/4}`.
pub fn offset_ablation(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    side: usize,
    id: &[Image],
    ood_sets: &[(&str, &[Image])],
) -> Result<AblationTable> {
    let cfg = model.config();
    let offsets = default_mask_offsets(cfg.height);
    let ops = offsets
        .iter()
        .map(|&o| {
            ErosionOp::centered_mask(side, o, cfg.height, cfg.width).ok_or(Error::InvalidErosion {
                op: format!("blackout side {side} offset {o}"),
                height: cfg.height,
                width: cfg.width,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = AblationTable::new(offsets.iter().map(|o| format!("offset={o}")).collect());
    let id_scores = ops
        .iter()
        .map(|op| score_images(model, phi, op, id, ScoreFn::Lpips))
        .collect::<Result<Vec<_>>>()?;
    for (name, ood) in ood_sets {
        let mut row = Vec::with_capacity(ops.len());
        for (op, id_s) in ops.iter().zip(&id_scores) {
            let ood_s = score_images(model, phi, op, ood, ScoreFn::Lpips)?;
            row.push(auroc(id_s, &ood_s)?);
        }
        table.push_row(name, row)?;
    }
    Ok(table)
}

/// A map from latent vectors to flat outputs whose smoothness is probed.
pub trait LatentMap {
    fn latent_dim(&self) -> usize;
    fn apply(&self, z: &[f64]) -> Result<Vec<f64>>;
}

impl LatentMap for RepairerModel {
    fn latent_dim(&self) -> usize {
        self.config().latent_dim
    }

    fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode(z)?.into_data())
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(v.map(|x| x * x).sum())
}

/// Largest finite-difference ratio `|g(z + s u) - g(z)| / |s u|` over
/// `probes` random unit directions `u`, cycling through `anchors`.
pub fn estimate_lipschitz<M: LatentMap + ?Sized, R: Rng + ?Sized>(
    map: &M,
    anchors: &[Vec<f64>],
    probes: usize,
    step: f64,
    rng: &mut R,
) -> Result<f64> {
    if anchors.is_empty() || probes == 0 {
        return Err(Error::Empty("lipschitz probes"));
    }
    let dim = map.latent_dim();
    let mut best: f64 = 0.0;
    for p in 0..probes {
        let z = &anchors[p % anchors.len()];
        if z.len() != dim {
            return Err(Error::shape(dim, z.len()));
        }
        let mut u: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(u.iter().copied());
        for v in &mut u {
            *v /= n;
        }
        let moved: Vec<f64> = z.iter().zip(&u).map(|(a, b)| a + step * b).collect();
        let g0 = map.apply(z)?;
        let g1 = map.apply(&moved)?;
        // Divide by the realised displacement so rounding in `z + s u`
        // does not bias the ratio.
        let dz = norm(moved.iter().zip(z).map(|(a, b)| a - b));
        let ratio = norm(g1.iter().zip(&g0).map(|(a, b)| a - b)) / dz;
        if !ratio.is_finite() {
            return Err(Error::NonFiniteActivation);
        }
        best = best.max(ratio);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub mean: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { mean, max: values.iter().copied().fold(0.0, f64::max) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzDiagnostics {
    pub lip_g_estimate: f64,
    /// Latent displacement caused by the erosion.
    pub delta_z: Summary,
    /// Reconstruction residual without erosion.
    pub delta_x: Summary,
}

pub const LIPSCHITZ_STEP: f64 = 1e-3;

pub fn lipschitz_diagnostics<R: Rng + ?Sized>(
    model: &RepairerModel,
    op: &ErosionOp,
    samples: &[Image],
    probes: usize,
    rng: &mut R,
) -> Result<LipschitzDiagnostics> {
    if samples.is_empty() {
        return Err(Error::Empty("diagnostic samples"));
    }
    let mut anchors = Vec::with_capacity(samples.len());
    let mut dz = Vec::with_capacity(samples.len());
    let mut dx = Vec::with_capacity(samples.len());
    for x in samples {
        let z = model.encode(x)?;
        let zt = model.encode(&apply_erosion(op, x)?)?;
        dz.push(norm(z.iter().zip(&zt).map(|(a, b)| a - b)));
        let r = model.repair(x)?;
        dx.push(norm(x.data().iter().zip(r.data()).map(|(a, b)| a - b)));
        anchors.push(model.style_mix(&zt)?);
    }
    let lip = estimate_lipschitz(model, &anchors, probes, LIPSCHITZ_STEP, rng)?;
    Ok(LipschitzDiagnostics { lip_g_estimate: lip, delta_z: Summary::of(&dz), delta_x: Summary::of(&dx) })
}

/// Median of a nonempty list, averaging the two middle values when even.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median input"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::repairer::tests::tiny_model;
    use crate::rng::{stream, Stream};
    use alloc::vec;
    use proptest::prelude::*;

    fn brute(id: &[f64], ood: &[f64]) -> f64 {
        let mut wins = 0.0;
        for &o in ood {
            for &i in id {
                if o > i {
                    wins += 1.0;
                } else if o == i {
                    wins += 0.5;
                }
            }
        }
        wins / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 0.1], &[0.9, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[0.3; 3]).unwrap(), 0.5);
        let id = [0.1, 0.4, 0.35];
        let ood = [0.8, 0.3];
        assert!((auroc(&id, &ood).unwrap() - brute(&id, &ood)).abs() < 1e-12);
        assert!((auroc(&id, &ood).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(auroc(&[], &[1.0]), Err(Error::Empty("id scores")));
        assert_eq!(auroc(&[f64::NAN], &[1.0]), Err(Error::NonFiniteScore));
    }

    fn scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec((0u8..20).prop_map(|v| v as f64 / 4.0), 1..60)
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force(id in scores(), ood in scores()) {
            prop_assert!((auroc(&id, &ood).unwrap() - brute(&id, &ood)).abs() < 1e-9);
        }

        #[test]
        fn auroc_swaps_exactly(id in scores(), ood in scores()) {
            prop_assert_eq!(auroc(&id, &ood).unwrap(), 1.0 - auroc(&ood, &id).unwrap());
        }

        #[test]
        fn auroc_is_rank_invariant(id in scores(), ood in scores()) {
            let f = |v: &Vec<f64>| v.iter().map(|x| libm::exp(3.0 * x) - 7.0).collect::<Vec<_>>();
            prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&f(&id), &f(&ood)).unwrap());
        }
    }

    struct Identity(usize);

    impl LatentMap for Identity {
        fn latent_dim(&self) -> usize {
            self.0
        }
        fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(z.to_vec())
        }
    }

    #[test]
    fn identity_map_has_unit_estimate() {
        let anchors = vec![vec![0.3, -1.0, 2.0], vec![5.0, 5.0, 5.0]];
        let est = estimate_lipschitz(&Identity(3), &anchors, 50, 1e-3, &mut stream(0, Stream::Probe)).unwrap();
        assert!((est - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_erosion_has_zero_latent_shift() {
        let m = tiny_model(0);
        let xs = [Image::filled(8, 8, 1, 0.3), Image::filled(8, 8, 1, 0.6)];
        let d = lipschitz_diagnostics(&m, &ErosionOp::Identity, &xs, 10, &mut stream(0, Stream::Probe)).unwrap();
        assert_eq!(d.delta_z, Summary { mean: 0.0, max: 0.0 });
        assert!(d.lip_g_estimate.is_finite() && d.lip_g_estimate >= 0.0);
        assert!(d.delta_x.mean > 0.0);
    }

    #[test]
    fn spreads_and_median() {
        let mut t = AblationTable::new(vec![String::from("a"), String::from("b")]);
        t.push_row("x", vec![0.5, 0.7]).unwrap();
        assert!(t.push_row("y", vec![0.5]).is_err());
        assert!((t.row_spreads()[0] - 0.2).abs() < 1e-15);
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0]).unwrap(), 2.5);
    }
}
