//! The training loop: sample a batch, draw one erosion per sample, repair,
//! accumulate the weighted loss gradient and take one optimizer step.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use rand::Rng;

use crate::checkpoint::{self, parse_kv, Checkpoint, Dtype, Kind};
use crate::erosion::{apply_erosion, sample_erosion_index, ErosionOp, ErosionSet};
use crate::metrics::{loss_grad, LossWeights, PerceptualExtractor};
use crate::nn::{ParamSet, Tensor};
use crate::repairer::{RepairPass, RepairerConfig, RepairerModel};
use crate::rng::{self, Stream, StreamRng};
use crate::{Error, Image, Result};

/// Momentum of the running latent mean used for style mixing while
/// training.
const RUNNING_MEAN_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adaptive-moments",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adaptive-moments" | "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    m: ParamSet,
    v: ParamSet,
    t: u64,
}

impl Adam {
    pub fn new(layout: &ParamSet, params: AdamParams) -> Self {
        Self { params, m: layout.zeros_like(), v: layout.zeros_like(), t: 0 }
    }

    /// Applies one update from gradients summed over `batch` samples.
    pub fn step(&mut self, weights: &mut ParamSet, summed: &ParamSet, batch: usize) -> Result<()> {
        weights.check_layout(summed)?;
        check_finite(summed)?;
        self.t += 1;
        let AdamParams { learning_rate, beta1, beta2, eps } = self.params;
        let c1 = 1.0 - libm::pow(beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(beta2, self.t as f64);
        let inv_b = 1.0 / batch as f64;
        for (((w, g), m), v) in weights
            .tensors_mut()
            .iter_mut()
            .zip(summed.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.data.len() {
                let g = g.data[i] * inv_b;
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g * g;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                w.data[i] -= learning_rate * mh / (libm::sqrt(vh) + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, layout: &ParamSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => {
                Optimizer::Adam(Adam::new(layout, AdamParams { learning_rate, ..AdamParams::default() }))
            }
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }
}

fn check_finite(grads: &ParamSet) -> Result<()> {
    for t in grads.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(t.name.clone()));
        }
    }
    Ok(())
}

/// One parameter update from gradients summed over `batch` samples.
///
/// Plain descent applies `w - (eta / batch) * sum`; the adaptive optimizer
/// feeds the batch-mean gradient through its moment estimates.
pub fn gradient_step(weights: &mut ParamSet, summed: &ParamSet, batch: usize, optimizer: &mut Optimizer) -> Result<()> {
    if batch == 0 {
        return Err(Error::InvalidConfig(String::from("batch size must be positive")));
    }
    match optimizer {
        Optimizer::Sgd { learning_rate } => {
            weights.check_layout(summed)?;
            check_finite(summed)?;
            let scale = *learning_rate / batch as f64;
            for (w, g) in weights.tensors_mut().iter_mut().zip(summed.tensors()) {
                for (a, b) in w.data.iter_mut().zip(&g.data) {
                    *a -= scale * b;
                }
            }
            Ok(())
        }
        Optimizer::Adam(adam) => adam.step(weights, summed, batch),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_iter: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_iter: 3000,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, train_size: usize) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig(String::from(
                "batch_size, learning_rate and checkpoint_every must be positive",
            )));
        }
        if self.batch_size > train_size {
            return Err(Error::BatchTooLarge { batch: self.batch_size, available: train_size });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace {
    /// Mean loss over the batch, one entry per completed iteration.
    pub losses: Vec<f64>,
    pub wall_seconds: f64,
    pub iterations: usize,
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: RepairerModel,
    pub optimizer: Optimizer,
    pub iteration: usize,
    pub seed: u64,
    batch_rng: StreamRng,
    erosion_rng: StreamRng,
    running_mean: Vec<f64>,
    pub losses: Vec<f64>,
}

impl TrainState {
    /// Serialises at `f64` so resuming reproduces an uninterrupted run.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut header = String::new();
        let (bs, bp) = rng::position(&self.batch_rng);
        let (es, ep) = rng::position(&self.erosion_rng);
        let _ = writeln!(header, "iteration = {}", self.iteration);
        let _ = writeln!(header, "seed = {}", self.seed);
        let _ = writeln!(header, "batch_stream = {bs}");
        let _ = writeln!(header, "batch_pos = {bp}");
        let _ = writeln!(header, "erosion_stream = {es}");
        let _ = writeln!(header, "erosion_pos = {ep}");
        let _ = writeln!(header, "optimizer = {}", self.optimizer.kind().as_str());
        match &self.optimizer {
            Optimizer::Sgd { learning_rate } => {
                let _ = writeln!(header, "learning_rate = {learning_rate:?}");
            }
            Optimizer::Adam(a) => {
                let _ = writeln!(header, "learning_rate = {:?}", a.params.learning_rate);
                let _ = writeln!(header, "adam_t = {}", a.t);
            }
        }
        for line in self.model.config().to_kv().lines() {
            let _ = writeln!(header, "model.{line}");
        }
        let mut tensors: Vec<Tensor> = self.model.params().tensors().to_vec();
        tensors.push(Tensor { name: String::from("latent_mean"), shape: vec![self.running_mean.len()], data: self.model.latent_mean().to_vec() });
        tensors.push(Tensor { name: String::from("running_mean"), shape: vec![self.running_mean.len()], data: self.running_mean.clone() });
        tensors.push(Tensor { name: String::from("trace"), shape: vec![self.losses.len()], data: self.losses.clone() });
        if let Optimizer::Adam(a) = &self.optimizer {
            for (prefix, set) in [("adam.m.", &a.m), ("adam.v.", &a.v)] {
                for t in set.tensors() {
                    tensors.push(Tensor { name: format!("{prefix}{}", t.name), shape: t.shape.clone(), data: t.data.clone() });
                }
            }
        }
        Checkpoint { kind: Kind::TrainState, dtype: Dtype::F64, header, tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Kind::TrainState)?;
        let kv = parse_kv(&ckpt.header)?;
        let model_kv: String = kv
            .entries()
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| format!("{k} = {v}\n")))
            .collect();
        let config = RepairerConfig::from_kv(&model_kv)?;
        let split = |prefix: &str| -> Vec<Tensor> {
            ckpt.tensors
                .iter()
                .filter(|t| t.name.starts_with("encoder.") || t.name.starts_with("decoder."))
                .map(|t| Tensor { name: format!("{prefix}{}", t.name), ..t.clone() })
                .collect()
        };
        let find = |name: &str| ckpt.tensor(name).map(|t| t.data.clone());
        let params = ParamSet::from_tensors(split(""))?;
        let model = RepairerModel::from_parts(config, params.clone(), find("latent_mean")?)?;
        let learning_rate: f64 = kv.parse("learning_rate")?;
        let optimizer = match kv.parse::<OptimizerKind>("optimizer")? {
            OptimizerKind::Sgd => Optimizer::Sgd { learning_rate },
            OptimizerKind::Adam => {
                let collect = |prefix: &str| -> Result<ParamSet> {
                    let ts = split(prefix)
                        .into_iter()
                        .map(|t| ckpt.tensor(&t.name).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    ParamSet::from_tensors(
                        ts.into_iter()
                            .map(|t| Tensor { name: String::from(&t.name[prefix.len()..]), ..t })
                            .collect(),
                    )
                };
                let m = collect("adam.m.")?;
                let v = collect("adam.v.")?;
                params.check_layout(&m)?;
                params.check_layout(&v)?;
                let params = AdamParams { learning_rate, ..AdamParams::default() };
                Optimizer::Adam(Adam { params, m, v, t: kv.parse("adam_t")? })
            }
        };
        let seed = kv.parse("seed")?;
        Ok(Self {
            model,
            optimizer,
            iteration: kv.parse("iteration")?,
            seed,
            batch_rng: rng::restore(seed, kv.parse("batch_stream")?, kv.parse("batch_pos")?),
            erosion_rng: rng::restore(seed, kv.parse("erosion_stream")?, kv.parse("erosion_pos")?),
            running_mean: find("running_mean")?,
            losses: find("trace")?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_checkpoint())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::decode(bytes)?)
    }
}

/// `batch` distinct indices below `n`, uniformly without replacement.
fn accumulate_sample(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    weights: LossWeights,
    op: &ErosionOp,
    x: &Image,
    mean: &[f64],
    grads: &mut ParamSet,
) -> Result<(f64, RepairPass)> {
    let eroded = apply_erosion(op, x)?;
    let pass = model.forward_pass(&eroded, mean)?;
    let target = phi.extract_features(x)?;
    let (loss, d_out) = loss_grad(phi, weights, pass.output(), x, &target)?;
    model.backward_pass(&pass, d_out, grads);
    Ok((loss, pass))
}

/// Loss of one sample under `op` and its gradient with respect to every
/// parameter, mixing toward the model's stored latent mean.
pub fn sample_loss_and_gradient(
    model: &RepairerModel,
    phi: &PerceptualExtractor,
    weights: LossWeights,
    op: &ErosionOp,
    x: &Image,
) -> Result<(f64, ParamSet)> {
    let mut grads = model.params().zeros_like();
    let (loss, _) = accumulate_sample(model, phi, weights, op, x, model.latent_mean(), &mut grads)?;
    Ok((loss, grads))
}

pub fn sample_indices<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch > n {
        return Err(Error::BatchTooLarge { batch, available: n });
    }
    Ok(rand::seq::index::sample(rng, n, batch).into_vec())
}

/// Drives training one iteration at a time so callers can checkpoint in
/// between.
pub struct Trainer<'a> {
    images: &'a [Image],
    set: &'a ErosionSet,
    phi: &'a PerceptualExtractor,
    weights: LossWeights,
    cfg: TrainConfig,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: RepairerModel,
        images: &'a [Image],
        set: &'a ErosionSet,
        phi: &'a PerceptualExtractor,
        weights: LossWeights,
        cfg: TrainConfig,
    ) -> Result<Self> {
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.params());
        let running_mean = model.latent_mean().to_vec();
        let state = TrainState {
            model,
            optimizer,
            iteration: 0,
            seed: cfg.seed,
            batch_rng: rng::stream(cfg.seed, Stream::Batch),
            erosion_rng: rng::stream(cfg.seed, Stream::Erosion),
            running_mean,
            losses: Vec::new(),
        };
        Self::resume(state, images, set, phi, weights, cfg)
    }

    pub fn resume(
        state: TrainState,
        images: &'a [Image],
        set: &'a ErosionSet,
        phi: &'a PerceptualExtractor,
        weights: LossWeights,
        cfg: TrainConfig,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("train split"));
        }
        cfg.validate(images.len())?;
        weights.validate()?;
        if state.seed != cfg.seed {
            return Err(Error::InvalidConfig(format!(
                "state was trained with seed {}, config has {}",
                state.seed, cfg.seed
            )));
        }
        let mc = state.model.config();
        for op in set.ops() {
            op.validate(mc.height, mc.width)?;
        }
        let pc = phi.config();
        if (pc.height, pc.width, pc.channels) != (mc.height, mc.width, mc.channels) {
            return Err(Error::shape(
                format!("{}x{}x{}", mc.height, mc.width, mc.channels),
                format!("{}x{}x{}", pc.height, pc.width, pc.channels),
            ));
        }
        Ok(Self { images, set, phi, weights, cfg, state })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.cfg.n_iter
    }

    /// Runs one iteration and returns its mean loss.
    pub fn step(&mut self) -> Result<f64> {
        let st = &mut self.state;
        let batch = self.cfg.batch_size;
        let idx = sample_indices(self.images.len(), batch, &mut st.batch_rng)?;
        let mut grads = st.model.params().zeros_like();
        let dim = st.model.config().latent_dim;
        let mut latent_sum = vec![0.0; dim];
        let mut loss_sum = 0.0;
        for &i in &idx {
            let u = sample_erosion_index(self.set, &mut st.erosion_rng);
            let x = &self.images[i];
            let (loss, pass) =
                accumulate_sample(&st.model, self.phi, self.weights, &self.set.ops()[u], x, &st.running_mean, &mut grads)?;
            for (s, z) in latent_sum.iter_mut().zip(pass.latent()) {
                *s += z;
            }
            loss_sum += loss;
        }
        let mean_loss = loss_sum / batch as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Divergence { iteration: st.iteration });
        }
        gradient_step(st.model.params_mut(), &grads, batch, &mut st.optimizer).map_err(|e| match e {
            Error::NonFiniteGradient(_) => Error::Divergence { iteration: st.iteration },
            other => other,
        })?;
        let batch_mean = latent_sum.iter().map(|s| s / batch as f64);
        if st.iteration == 0 {
            st.running_mean = batch_mean.collect();
        } else {
            for (r, b) in st.running_mean.iter_mut().zip(batch_mean) {
                *r = RUNNING_MEAN_MOMENTUM * *r + (1.0 - RUNNING_MEAN_MOMENTUM) * b;
            }
        }
        st.losses.push(mean_loss);
        st.iteration += 1;
        Ok(mean_loss)
    }

    /// Runs to completion, calling `on_checkpoint` every
    /// `checkpoint_every` iterations.
    pub fn run<F, E>(mut self, mut on_checkpoint: F) -> core::result::Result<(RepairerModel, TrainTrace), E>
    where
        F: FnMut(&TrainState) -> core::result::Result<(), E>,
        E: From<Error>,
    {
        while !self.is_done() {
            self.step()?;
            if self.state.iteration.is_multiple_of(self.cfg.checkpoint_every) && !self.is_done() {
                on_checkpoint(&self.state)?;
            }
        }
        Ok(self.finish()?)
    }

    /// Rounds weights to checkpoint precision and sets the latent mean from
    /// the whole training set.
    pub fn finish(self) -> Result<(RepairerModel, TrainTrace)> {
        let TrainState { mut model, losses, iteration, .. } = self.state;
        model.snap_f32();
        model.update_latent_mean(self.images.iter())?;
        model.snap_f32();
        Ok((model, TrainTrace { losses, wall_seconds: 0.0, iterations: iteration }))
    }
}

/// Trains `model` to completion without intermediate checkpoints.
pub fn train_repairer(
    model: RepairerModel,
    images: &[Image],
    set: &ErosionSet,
    phi: &PerceptualExtractor,
    weights: LossWeights,
    cfg: TrainConfig,
) -> Result<(RepairerModel, TrainTrace)> {
    Trainer::new(model, images, set, phi, weights, cfg)?.run(|_| Ok::<(), Error>(()))
}
