//! Labelled baselines: a softmax classifier on pooled perceptual features,
//! scored by negated max probability or negated max logit.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::checkpoint::{self, parse_kv, Checkpoint, Dtype, Kind};
use crate::metrics::PerceptualExtractor;
use crate::nn::{ParamSet, Tensor};
use crate::training::{Adam, AdamParams};
use crate::{Error, Image, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadFitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        Self { iterations: 300, learning_rate: 5e-2 }
    }
}

/// Linear classifier over standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    classes: usize,
    params: ParamSet,
}

const W: usize = 0;
const B: usize = 1;
const MEAN: usize = 2;
const SCALE: usize = 3;

impl LinearHead {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.params.tensors()[MEAN].data.len()
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        if features.len() != d {
            return Err(Error::shape(d, features.len()));
        }
        let t = self.params.tensors();
        let x: Vec<f64> = features
            .iter()
            .zip(&t[MEAN].data)
            .zip(&t[SCALE].data)
            .map(|((f, m), s)| (f - m) * s)
            .collect();
        Ok((0..self.classes)
            .map(|k| t[B].data[k] + t[W].data[k * d..(k + 1) * d].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = String::new();
        let _ = writeln!(header, "classes = {}", self.classes);
        Checkpoint { kind: Kind::LinearHead, dtype: Dtype::F32, header, tensors: self.params.tensors().to_vec() }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Kind::LinearHead)?;
        let classes: usize = parse_kv(&ckpt.header)?.parse("classes")?;
        let names = ["weight", "bias", "feature_mean", "feature_scale"];
        let tensors = names.iter().map(|n| ckpt.tensor(n).cloned()).collect::<Result<Vec<_>>>()?;
        let d = tensors[MEAN].data.len();
        if tensors[W].data.len() != classes * d || tensors[B].data.len() != classes || tensors[SCALE].data.len() != d {
            return Err(Error::MalformedCheckpoint(String::from("linear head tensor sizes disagree")));
        }
        Ok(Self { classes, params: ParamSet::from_tensors(tensors)? })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_checkpoint())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::decode(bytes)?)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Negated largest softmax probability.
pub fn msp_score(logits: &[f64]) -> f64 {
    -softmax(logits).into_iter().fold(0.0, f64::max)
}

/// Negated largest logit.
pub fn maxlogit_score(logits: &[f64]) -> f64 {
    -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Trains a head by full-batch cross-entropy. Every label must be present.
pub fn fit_linear_head(features: &[Vec<f64>], labels: &[Option<usize>], fit: &HeadFitConfig) -> Result<LinearHead> {
    if features.is_empty() {
        return Err(Error::Empty("labelled features"));
    }
    if labels.len() != features.len() {
        return Err(Error::shape(features.len(), labels.len()));
    }
    let labels: Vec<usize> = labels.iter().map(|l| l.ok_or(Error::MissingLabels)).collect::<Result<_>>()?;
    let d = features[0].len();
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::shape(d, f.len()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = features.iter().map(|f| (f[j] - mean[j]) * (f[j] - mean[j])).sum::<f64>() / n;
            let sd = libm::sqrt(var);
            if sd > 1e-12 { 1.0 / sd } else { 1.0 }
        })
        .collect();
    let tensor = |name: &str, shape: Vec<usize>, data: Vec<f64>| Tensor { name: String::from(name), shape, data };
    let params = ParamSet::from_tensors(vec![
        tensor("weight", vec![classes, d], vec![0.0; classes * d]),
        tensor("bias", vec![classes], vec![0.0; classes]),
        tensor("feature_mean", vec![d], mean),
        tensor("feature_scale", vec![d], scale),
    ])?;
    let mut head = LinearHead { classes, params };
    let trainable = |p: &ParamSet| ParamSet::from_tensors(p.tensors()[..2].to_vec());
    let mut weights = trainable(&head.params)?;
    let mut opt = Adam::new(&weights, AdamParams { learning_rate: fit.learning_rate, ..AdamParams::default() });
    for iteration in 0..fit.iterations {
        let mut grads = weights.zeros_like();
        for (f, &y) in features.iter().zip(&labels) {
            let logits = head.logits(f)?;
            let mut p = softmax(&logits);
            p[y] -= 1.0;
            let t = head.params.tensors();
            let (g, _) = grads.tensors_mut().split_at_mut(1);
            for k in 0..classes {
                for j in 0..d {
                    g[0].data[k * d + j] += p[k] * (f[j] - t[MEAN].data[j]) * t[SCALE].data[j];
                }
            }
            for (gb, pk) in grads.tensors_mut()[1].data.iter_mut().zip(&p) {
                *gb += pk;
            }
        }
        opt.step(&mut weights, &grads, features.len())
            .map_err(|_| Error::Divergence { iteration })?;
        for (dst, src) in head.params.tensors_mut().iter_mut().zip(weights.tensors()) {
            dst.data.clone_from(&src.data);
        }
    }
    head.params.snap_f32();
    Ok(head)
}

/// `(msp, maxlogit)` for one image; both grow with OOD-ness.
pub fn baseline_scores(head: &LinearHead, phi: &PerceptualExtractor, x: &Image) -> Result<(f64, f64)> {
    let logits = head.logits(&phi.pooled_features(x)?)?;
    Ok((msp_score(&logits), maxlogit_score(&logits)))
}
