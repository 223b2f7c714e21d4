//! Perceptual feature network, LPIPS-style distance, L2 loss and the
//! weighted training objective.
//!
//! The perceptual network is a small strided-conv stack. Each tap's channel
//! vectors are unit-normalised per position; the distance is the mean over
//! taps of the mean squared difference over positions. A network with no
//! layers has a single tap on the raw pixels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;

use crate::checkpoint::{self, parse_kv, parse_list, Checkpoint, Dtype, Kind};
use crate::erosion::{apply_erosion, ErosionOp};
use crate::nn::{Network, NetworkBuilder, ParamSet, Shape};
use crate::repairer::RepairerModel;
use crate::training::{Adam, AdamParams};
use crate::{Error, Image, Result};

const LEAK: f64 = 0.2;
/// Channel vectors with a norm at or below this are treated as zero.
const NORM_EPS: f64 = 1e-10;

/// Weights of the L2 and perceptual terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.8 }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidConfig(String::from("loss weights must be nonnegative")));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::InvalidConfig(String::from("loss weights cannot both be zero")));
        }
        Ok(())
    }

    pub fn combine(&self, l2: f64, lpips: f64) -> f64 {
        self.lambda1 * l2 + self.lambda2 * lpips
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhiConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// One stride-2 3×3 conv layer per entry; empty gives the identity
    /// extractor.
    pub widths: Vec<usize>,
}

impl PhiConfig {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, widths: vec![12, 24] }
    }

    pub fn identity(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, widths: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !(self.channels == 1 || self.channels == 3) {
            return Err(Error::InvalidConfig(format!(
                "bad perceptual input {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig(String::from("perceptual widths must be positive")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let widths = self.widths.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "widths = {widths}");
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let cfg = Self {
            height: kv.parse("height")?,
            width: kv.parse("width")?,
            channels: kv.parse("channels")?,
            widths: parse_list(kv.get("widths")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Settings for fitting the perceptual network by reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiFitConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PhiFitConfig {
    fn default() -> Self {
        Self { iterations: 600, batch_size: 16, learning_rate: 2e-3 }
    }
}

/// One unit-normalised feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub shape: Shape,
    pub data: Vec<f64>,
}

/// The frozen perceptual network.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    config: PhiConfig,
    params: ParamSet,
    network: Network,
    taps: Vec<usize>,
}

fn build_phi<R: Rng + ?Sized>(config: &PhiConfig, rng: &mut R) -> Result<(ParamSet, Network, Vec<usize>)> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut b = NetworkBuilder::new("phi", Shape::new(config.channels, config.height, config.width), &mut params, rng);
    let mut taps = Vec::new();
    for (i, &w) in config.widths.iter().enumerate() {
        b = b.conv(w, 3, 2, 1)?.leaky_relu(LEAK);
        taps.push(2 * (i + 1));
    }
    if taps.is_empty() {
        taps.push(0);
    }
    let network = b.build();
    Ok((params, network, taps))
}

/// Unit-normalises each position's channel vector. Returns the normalised
/// map and the norms (0 where the vector was treated as zero).
fn normalize(shape: Shape, raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hw = shape.height * shape.width;
    let mut unit = vec![0.0; raw.len()];
    let mut norms = vec![0.0; hw];
    for (p, norm_slot) in norms.iter_mut().enumerate() {
        let sq: f64 = (0..shape.channels).map(|c| raw[c * hw + p] * raw[c * hw + p]).sum();
        let n = libm::sqrt(sq);
        if n > NORM_EPS {
            for c in 0..shape.channels {
                unit[c * hw + p] = raw[c * hw + p] / n;
            }
            *norm_slot = n;
        }
    }
    (unit, norms)
}

fn map_distance(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let hw = (a.shape.height * a.shape.width) as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / hw
}

impl PerceptualExtractor {
    /// Randomly initialised, unfitted network.
    pub fn init<R: Rng + ?Sized>(config: PhiConfig, rng: &mut R) -> Result<Self> {
        let (params, network, taps) = build_phi(&config, rng)?;
        Ok(Self { config, params, network, taps })
    }

    /// Pixel pass-through extractor.
    pub fn identity(height: usize, width: usize, channels: usize) -> Result<Self> {
        let mut rng = crate::rng::stream(0, crate::rng::Stream::PhiFit);
        Self::init(PhiConfig::identity(height, width, channels), &mut rng)
    }

    pub fn from_parts(config: PhiConfig, params: ParamSet) -> Result<Self> {
        let mut scratch = crate::rng::stream(0, crate::rng::Stream::PhiFit);
        let (layout, network, taps) = build_phi(&config, &mut scratch)?;
        layout.check_layout(&params)?;
        Ok(Self { config, params, network, taps })
    }

    pub fn config(&self) -> &PhiConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Activation indices whose outputs are emitted.
    pub fn tap_layers(&self) -> &[usize] {
        &self.taps
    }

    fn input_shape(&self) -> Shape {
        Shape::new(self.config.channels, self.config.height, self.config.width)
    }

    fn check(&self, image: &Image) -> Result<()> {
        let s = self.input_shape();
        image.check_dims(crate::image::Dims { channels: s.channels, height: s.height, width: s.width })
    }

    pub fn extract_features(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        self.check(image)?;
        let acts = self.network.forward(&self.params, image.data())?;
        Ok(self
            .taps
            .iter()
            .map(|&t| {
                let shape = self.network.shapes()[t];
                FeatureMap { shape, data: normalize(shape, &acts[t]).0 }
            })
            .collect())
    }

    /// Raw (pre-normalisation) activations of every tap, pooled over
    /// positions. Used as classifier features by the labelled baselines.
    pub fn pooled_features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check(image)?;
        let acts = self.network.forward(&self.params, image.data())?;
        let mut out = Vec::new();
        for &t in &self.taps {
            let s = self.network.shapes()[t];
            let hw = s.height * s.width;
            for c in 0..s.channels {
                out.push(acts[t][c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64);
            }
        }
        Ok(out)
    }

    /// Distance between precomputed feature lists.
    pub fn feature_distance(a: &[FeatureMap], b: &[FeatureMap]) -> f64 {
        a.iter().zip(b).map(|(x, y)| map_distance(x, y)).sum::<f64>() / a.len() as f64
    }

    /// Perceptual distance and its gradient with respect to `image`, with
    /// `target` features held fixed.
    pub(crate) fn distance_grad(&self, image: &[f64], target: &[FeatureMap]) -> Result<(f64, Vec<f64>)> {
        let acts = self.network.forward(&self.params, image)?;
        let mut grad_at: Vec<Option<Vec<f64>>> = vec![None; acts.len()];
        let n_taps = self.taps.len() as f64;
        let mut total = 0.0;
        for (&t, tgt) in self.taps.iter().zip(target) {
            let shape = self.network.shapes()[t];
            let hw = shape.height * shape.width;
            let (unit, norms) = normalize(shape, &acts[t]);
            let scale = 1.0 / (hw as f64 * n_taps);
            let mut g = vec![0.0; unit.len()];
            let mut dist = 0.0;
            for p in 0..hw {
                let mut dot = 0.0;
                for c in 0..shape.channels {
                    let i = c * hw + p;
                    let d = unit[i] - tgt.data[i];
                    dist += d * d;
                    g[i] = 2.0 * d * scale;
                    dot += g[i] * unit[i];
                }
                let n = norms[p];
                for c in 0..shape.channels {
                    let i = c * hw + p;
                    g[i] = if n > 0.0 { (g[i] - unit[i] * dot) / n } else { 0.0 };
                }
            }
            total += dist / hw as f64;
            match &mut grad_at[t] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                slot => *slot = Some(g),
            }
        }
        let grad = self
            .network
            .backward(&self.params, &acts, grad_at, None, true)
            .expect("input gradient requested");
        Ok((total / n_taps, grad))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: Kind::Perceptual,
            dtype: Dtype::F32,
            header: self.config.to_kv(),
            tensors: self.params.tensors().to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Kind::Perceptual)?;
        let config = PhiConfig::from_kv(&ckpt.header)?;
        Self::from_parts(config, ParamSet::from_tensors(ckpt.tensors.clone())?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_checkpoint())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::decode(bytes)?)
    }
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean squared difference over all elements.
pub fn l2_loss(repaired: &Image, original: &Image) -> Result<f64> {
    check_same(repaired, original)?;
    let n = repaired.data().len() as f64;
    Ok(repaired.data().iter().zip(original.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn lpips_distance(phi: &PerceptualExtractor, a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let fa = phi.extract_features(a)?;
    let fb = phi.extract_features(b)?;
    Ok(PerceptualExtractor::feature_distance(&fa, &fb))
}

/// Individual and weighted loss terms for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l2: f64,
    pub lpips: f64,
    pub total: f64,
}

/// Weighted loss of repairing `op(x)` against `x`. The repair runs once.
pub fn total_loss(
    x: &Image,
    model: &RepairerModel,
    op: &ErosionOp,
    phi: &PerceptualExtractor,
    weights: LossWeights,
) -> Result<LossTerms> {
    let repaired = model.repair(&apply_erosion(op, x)?)?;
    let l2 = l2_loss(&repaired, x)?;
    let lpips = lpips_distance(phi, &repaired, x)?;
    Ok(LossTerms { l2, lpips, total: weights.combine(l2, lpips) })
}

/// Loss and gradient with respect to the repaired image.
pub(crate) fn loss_grad(
    phi: &PerceptualExtractor,
    weights: LossWeights,
    repaired: &[f64],
    original: &Image,
    original_features: &[FeatureMap],
) -> Result<(f64, Vec<f64>)> {
    let n = repaired.len() as f64;
    let mut l2 = 0.0;
    let mut grad: Vec<f64> = repaired
        .iter()
        .zip(original.data())
        .map(|(r, x)| {
            l2 += (r - x) * (r - x);
            weights.lambda1 * 2.0 * (r - x) / n
        })
        .collect();
    l2 /= n;
    let mut lpips = 0.0;
    if weights.lambda2 != 0.0 {
        let (d, g) = phi.distance_grad(repaired, original_features)?;
        lpips = d;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += weights.lambda2 * b;
        }
    }
    Ok((weights.combine(l2, lpips), grad))
}

/// Fits the perceptual network on `images` by reconstructing them through
/// a throwaway transposed-conv head, then freezes it. Returns the network
/// and the per-iteration mean reconstruction loss.
pub fn fit_phi<R: Rng + ?Sized>(
    images: &[Image],
    config: PhiConfig,
    fit: &PhiFitConfig,
    rng: &mut R,
) -> Result<(PerceptualExtractor, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut phi = PerceptualExtractor::init(config, rng)?;
    if phi.config.widths.is_empty() || fit.iterations == 0 {
        return Ok((phi, Vec::new()));
    }
    let depth = phi.config.widths.len();
    let step = 1usize << depth;
    if phi.config.height % step != 0 || phi.config.width % step != 0 {
        return Err(Error::InvalidConfig(format!("perceptual fit needs resolution divisible by {step}")));
    }
    let mut head_params = ParamSet::new();
    let mut head = NetworkBuilder::new("head", phi.network.output_shape(), &mut head_params, rng);
    for &w in phi.config.widths[..depth - 1].iter().rev() {
        head = head.conv_transpose(w, 4, 2, 1)?.leaky_relu(LEAK);
    }
    let head = head.conv_transpose(phi.config.channels, 4, 2, 1)?.sigmoid().build();

    let adam = AdamParams { learning_rate: fit.learning_rate, ..AdamParams::default() };
    let mut opt_phi = Adam::new(&phi.params, adam);
    let mut opt_head = Adam::new(&head_params, adam);
    let batch = fit.batch_size.min(images.len());
    let mut curve = Vec::with_capacity(fit.iterations);
    for iteration in 0..fit.iterations {
        let idx = rand::seq::index::sample(rng, images.len(), batch);
        let mut g_phi = phi.params.zeros_like();
        let mut g_head = head_params.zeros_like();
        let mut loss = 0.0;
        for i in idx.iter() {
            let x = images[i].data();
            let acts = phi.network.forward(&phi.params, x)?;
            let head_acts = head.forward(&head_params, acts.last().expect("nonempty"))?;
            let out = head_acts.last().expect("nonempty");
            let n = x.len() as f64;
            loss += out.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            let d: Vec<f64> = out.iter().zip(x).map(|(a, b)| 2.0 * (a - b) / n).collect();
            let d_feat = head
                .backward_output(&head_params, &head_acts, d, Some(&mut g_head), true)
                .expect("input gradient requested");
            phi.network.backward_output(&phi.params, &acts, d_feat, Some(&mut g_phi), false);
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { iteration });
        }
        curve.push(loss);
        opt_phi.step(&mut phi.params, &g_phi, batch)?;
        opt_head.step(&mut head_params, &g_head, batch)?;
    }
    phi.params.snap_f32();
    Ok((phi, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn pseudo_image(seed: u64) -> Image {
        let data = (0..64).map(|i| (libm::sin(i as f64 * 0.7 + seed as f64) + 1.0) / 2.0).collect();
        Image::from_raw(8, 8, 1, data)
    }

    fn small_phi(seed: u64) -> PerceptualExtractor {
        let cfg = PhiConfig { height: 8, width: 8, channels: 1, widths: vec![3, 4] };
        PerceptualExtractor::init(cfg, &mut stream(seed, Stream::PhiFit)).unwrap()
    }

    #[test]
    fn features_are_unit_normalised() {
        let phi = small_phi(0);
        for seed in 0..5 {
            for map in phi.extract_features(&pseudo_image(seed)).unwrap() {
                let hw = map.shape.height * map.shape.width;
                for p in 0..hw {
                    let n: f64 = (0..map.shape.channels).map(|c| map.data[c * hw + p].powi(2)).sum::<f64>().sqrt();
                    assert!(n == 0.0 || (n - 1.0).abs() < 1e-6, "norm {n}");
                }
            }
        }
        assert_eq!(phi.tap_layers(), &[2, 4]);
    }

    #[test]
    fn lpips_basic_properties() {
        let phi = small_phi(1);
        let a = pseudo_image(1);
        let b = pseudo_image(2);
        assert_eq!(lpips_distance(&phi, &a, &a).unwrap(), 0.0);
        assert_eq!(lpips_distance(&phi, &a, &b).unwrap(), lpips_distance(&phi, &b, &a).unwrap());
        assert!(lpips_distance(&phi, &a, &b).unwrap() > 0.0);
        assert!(lpips_distance(&phi, &a, &Image::filled(4, 4, 1, 0.0)).is_err());
    }

    #[test]
    fn identity_extractor_is_normalised_pixel_distance() {
        let phi = PerceptualExtractor::identity(4, 4, 3).unwrap();
        assert_eq!(phi.tap_layers(), &[0]);
        let a = Image::from_raw(4, 4, 3, (0..48).map(|i| ((i * 7) % 11) as f64 / 10.0).collect());
        let b = Image::from_raw(4, 4, 3, (0..48).map(|i| ((i * 5) % 13) as f64 / 12.0).collect());
        let mut expected = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let va: Vec<f64> = (0..3).map(|c| a.get(y, x, c)).collect();
                let vb: Vec<f64> = (0..3).map(|c| b.get(y, x, c)).collect();
                let na = va.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = vb.iter().map(|v| v * v).sum::<f64>().sqrt();
                for c in 0..3 {
                    let ua = if na > 0.0 { va[c] / na } else { 0.0 };
                    let ub = if nb > 0.0 { vb[c] / nb } else { 0.0 };
                    expected += (ua - ub) * (ua - ub);
                }
            }
        }
        expected /= 16.0;
        let got = lpips_distance(&phi, &a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn l2_loss_examples() {
        let a = pseudo_image(3);
        assert_eq!(l2_loss(&a, &a).unwrap(), 0.0);
        let shifted = Image::from_raw(8, 8, 1, a.data().iter().map(|v| v + 0.1).collect());
        assert!((l2_loss(&shifted, &a).unwrap() - 0.01).abs() < 1e-12);
        assert!(l2_loss(&a, &Image::filled(8, 8, 3, 0.0)).is_err());
    }

    #[test]
    fn l2_loss_matches_elementwise_oracle() {
        let mut rng = stream(9, Stream::Probe);
        for _ in 0..10 {
            let a = Image::from_raw(5, 6, 3, (0..90).map(|_| rng.random::<f64>()).collect());
            let b = Image::from_raw(5, 6, 3, (0..90).map(|_| rng.random::<f64>()).collect());
            let mut sum = 0.0;
            for c in 0..3 {
                for y in 0..5 {
                    for x in 0..6 {
                        sum += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
                    }
                }
            }
            assert!((l2_loss(&a, &b).unwrap() - sum / 90.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_weights_combine() {
        let w = LossWeights::default();
        assert!((w.combine(0.02, 0.05) - 0.06).abs() < 1e-15);
        assert_eq!(LossWeights::new(1.0, 0.0).unwrap().combine(0.3, 9.0), 0.3);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn phi_checkpoint_round_trip() {
        let phi = small_phi(4);
        let bytes = phi.to_bytes();
        let back = PerceptualExtractor::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn fit_phi_rejects_empty_and_is_seeded() {
        let cfg = PhiConfig { height: 8, width: 8, channels: 1, widths: vec![3] };
        let fit = PhiFitConfig { iterations: 5, batch_size: 2, learning_rate: 1e-3 };
        assert!(fit_phi(&[], cfg.clone(), &fit, &mut stream(0, Stream::PhiFit)).is_err());
        let imgs: Vec<Image> = (0..4).map(pseudo_image).collect();
        let (a, ca) = fit_phi(&imgs, cfg.clone(), &fit, &mut stream(0, Stream::PhiFit)).unwrap();
        let (b, cb) = fit_phi(&imgs, cfg, &fit, &mut stream(0, Stream::PhiFit)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        assert_eq!(ca.len(), 5);
    }
}
