//! The repairing network: a strided-conv encoder to a flat latent, convex
//! style mixing toward the training latent mean, and a mirrored
//! transposed-conv decoder with a sigmoid output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::Rng;

use crate::checkpoint::{self, parse_kv, parse_list, Checkpoint, Dtype, KvMap, Kind};
use crate::nn::{Network, NetworkBuilder, ParamSet, Shape, Tensor};
use crate::{Error, Image, Result};

const LEAK: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct RepairerConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// Style-mixing strength toward the latent mean, in `[0, 1]`.
    pub mix_alpha: f64,
}

impl RepairerConfig {
    /// Desk-scale defaults for a given input geometry.
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            latent_dim: 32,
            encoder_widths: vec![8, 16],
            decoder_widths: vec![16, 8],
            mix_alpha: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return fail(String::from("encoder and decoder widths must be nonempty"));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return fail(String::from("layer widths must be positive"));
        }
        if self.latent_dim == 0 {
            return fail(String::from("latent_dim must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.mix_alpha) {
            return fail(format!("mix_alpha {} outside [0, 1]", self.mix_alpha));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return fail(format!("unsupported channel count {}", self.channels));
        }
        for depth in [self.encoder_widths.len(), self.decoder_widths.len()] {
            let step = 1usize << depth;
            if !self.height.is_multiple_of(step) || !self.width.is_multiple_of(step) || self.height < step || self.width < step {
                return fail(format!(
                    "resolution {}x{} not divisible by 2^{depth}",
                    self.height, self.width
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|w| format!("{w}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "encoder_widths = {}", list(&self.encoder_widths));
        let _ = writeln!(s, "decoder_widths = {}", list(&self.decoder_widths));
        let _ = writeln!(s, "mix_alpha = {:?}", self.mix_alpha);
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        Self::from_map(&kv)
    }

    pub(crate) fn from_map(kv: &KvMap) -> Result<Self> {
        let cfg = Self {
            height: kv.parse("height")?,
            width: kv.parse("width")?,
            channels: kv.parse("channels")?,
            latent_dim: kv.parse("latent_dim")?,
            encoder_widths: parse_list(kv.get("encoder_widths")?)?,
            decoder_widths: parse_list(kv.get("decoder_widths")?)?,
            mix_alpha: kv.parse("mix_alpha")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }
}

/// The encoder–decoder with its latent-mean estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct RepairerModel {
    config: RepairerConfig,
    params: ParamSet,
    encoder: Network,
    decoder: Network,
    latent_mean: Vec<f64>,
}

/// Activations kept from a training forward pass.
pub(crate) struct RepairPass {
    enc_acts: Vec<Vec<f64>>,
    dec_acts: Vec<Vec<f64>>,
}

impl RepairPass {
    pub(crate) fn output(&self) -> &[f64] {
        self.dec_acts.last().expect("nonempty")
    }

    pub(crate) fn latent(&self) -> &[f64] {
        self.enc_acts.last().expect("nonempty")
    }
}

fn build_networks<R: Rng + ?Sized>(config: &RepairerConfig, rng: &mut R) -> Result<(ParamSet, Network, Network)> {
    config.validate()?;
    let mut params = ParamSet::new();
    let mut enc = NetworkBuilder::new("encoder", config.input_shape(), &mut params, rng);
    for &w in &config.encoder_widths {
        enc = enc.conv(w, 4, 2, 1)?.leaky_relu(LEAK);
    }
    let encoder = enc.dense(config.latent_dim).build();

    let depth = config.decoder_widths.len();
    let base = Shape::new(config.decoder_widths[0], config.height >> depth, config.width >> depth);
    let mut dec = NetworkBuilder::new("decoder", Shape::flat(config.latent_dim), &mut params, rng)
        .dense(base.numel())
        .leaky_relu(LEAK)
        .reshape(base)?;
    for &w in &config.decoder_widths[1..] {
        dec = dec.conv_transpose(w, 4, 2, 1)?.leaky_relu(LEAK);
    }
    let decoder = dec.conv_transpose(config.channels, 4, 2, 1)?.sigmoid().build();
    Ok((params, encoder, decoder))
}

impl RepairerModel {
    /// Fresh weights from `rng`; the latent mean starts at zero.
    pub fn init<R: Rng + ?Sized>(config: RepairerConfig, rng: &mut R) -> Result<Self> {
        let (params, encoder, decoder) = build_networks(&config, rng)?;
        let latent_mean = vec![0.0; config.latent_dim];
        Ok(Self { config, params, encoder, decoder, latent_mean })
    }

    /// Reassembles a model from stored weights.
    pub fn from_parts(config: RepairerConfig, params: ParamSet, latent_mean: Vec<f64>) -> Result<Self> {
        let mut scratch = crate::rng::stream(0, crate::rng::Stream::WeightInit);
        let (layout, encoder, decoder) = build_networks(&config, &mut scratch)?;
        layout.check_layout(&params)?;
        if latent_mean.len() != config.latent_dim {
            return Err(Error::shape(config.latent_dim, latent_mean.len()));
        }
        if latent_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent);
        }
        Ok(Self { config, params, encoder, decoder, latent_mean })
    }

    pub fn config(&self) -> &RepairerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn latent_mean(&self) -> &[f64] {
        &self.latent_mean
    }

    pub fn set_latent_mean(&mut self, mean: Vec<f64>) -> Result<()> {
        if mean.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, mean.len()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent);
        }
        self.latent_mean = mean;
        Ok(())
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.config.input_shape();
        let expected = crate::image::Dims { channels: s.channels, height: s.height, width: s.width };
        image.check_dims(expected)?;
        if !image.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, z.len()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLatent);
        }
        Ok(())
    }

    pub fn encode(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let z = self.encoder.output(&self.params, image.data())?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        Ok(z)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Image> {
        self.check_latent(z)?;
        let out = self.decoder.output(&self.params, z)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        Ok(Image::from_raw(self.config.height, self.config.width, self.config.channels, out))
    }

    /// `(1 - alpha) * z + alpha * mean`.
    pub fn style_mix(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::shape(self.config.latent_dim, z.len()));
        }
        Ok(mix(z, &self.latent_mean, self.config.mix_alpha))
    }

    /// Encode, mix, decode.
    pub fn repair(&self, image: &Image) -> Result<Image> {
        let z = self.encode(image)?;
        let mixed = self.style_mix(&z)?;
        self.decode(&mixed)
    }

    /// Sets the latent mean to the average encoding of `images`, summed in
    /// iteration order.
    pub fn update_latent_mean<'a, I>(&mut self, images: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a Image>,
    {
        let latents = images.into_iter().map(|image| self.encode(image)).collect::<Result<Vec<_>>>()?;
        let mean = average_latents(self.config.latent_dim, &latents)?;
        self.set_latent_mean(mean)
    }

    /// Forward pass keeping activations, mixing toward `mean` instead of
    /// the stored latent mean.
    pub(crate) fn forward_pass(&self, eroded: &Image, mean: &[f64]) -> Result<RepairPass> {
        self.check_image(eroded)?;
        let enc_acts = self.encoder.forward(&self.params, eroded.data())?;
        let z = enc_acts.last().expect("nonempty");
        let mixed = mix(z, mean, self.config.mix_alpha);
        let dec_acts = self.decoder.forward(&self.params, &mixed)?;
        if dec_acts.last().expect("nonempty").iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation);
        }
        Ok(RepairPass { enc_acts, dec_acts })
    }

    /// Accumulates parameter gradients given the loss gradient on the
    /// repaired image. The mean is treated as a constant.
    pub(crate) fn backward_pass(&self, pass: &RepairPass, d_out: Vec<f64>, grads: &mut ParamSet) {
        let d_mixed = self
            .decoder
            .backward_output(&self.params, &pass.dec_acts, d_out, Some(grads), true)
            .expect("input gradient requested");
        let keep = 1.0 - self.config.mix_alpha;
        let d_z: Vec<f64> = d_mixed.iter().map(|g| g * keep).collect();
        self.encoder.backward_output(&self.params, &pass.enc_acts, d_z, Some(grads), false);
    }

    pub(crate) fn snap_f32(&mut self) {
        self.params.snap_f32();
        for v in &mut self.latent_mean {
            *v = *v as f32 as f64;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = self.params.tensors().to_vec();
        tensors.push(Tensor {
            name: String::from(LATENT_MEAN),
            shape: vec![self.latent_mean.len()],
            data: self.latent_mean.clone(),
        });
        Checkpoint { kind: Kind::Repairer, dtype: Dtype::F32, header: self.config.to_kv(), tensors }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Kind::Repairer)?;
        let config = RepairerConfig::from_kv(&ckpt.header)?;
        let mean = ckpt.tensor(LATENT_MEAN)?.data.clone();
        let params = ckpt.tensors.iter().filter(|t| t.name != LATENT_MEAN).cloned().collect();
        Self::from_parts(config, ParamSet::from_tensors(params)?, mean)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.to_checkpoint())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::decode(bytes)?)
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }
}

const LATENT_MEAN: &str = "latent_mean";

/// Elementwise mean of `latents`, summed in slice order.
pub fn average_latents(dim: usize, latents: &[Vec<f64>]) -> Result<Vec<f64>> {
    if latents.is_empty() {
        return Err(Error::Empty("train split"));
    }
    let mut sum = vec![0.0; dim];
    for z in latents {
        if z.len() != dim {
            return Err(Error::shape(dim, z.len()));
        }
        for (s, v) in sum.iter_mut().zip(z) {
            *s += v;
        }
    }
    Ok(sum.into_iter().map(|s| s / latents.len() as f64).collect())
}

pub(crate) fn mix(z: &[f64], mean: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 0.0 {
        return z.to_vec();
    }
    if alpha == 1.0 {
        return mean.to_vec();
    }
    z.iter().zip(mean).map(|(a, m)| (1.0 - alpha) * a + alpha * m).collect()
}
