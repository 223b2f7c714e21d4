//! Erosion maps: the degradations applied before repair.
//!
//! Three families are supported. `Identity` leaves the image alone (plain
//! reconstruction), `Downsample` shrinks by an integer factor with bicubic
//! interpolation and scales back up so every op keeps the repairer's I/O
//! shape, and `Blackout` zeroes a rectangle.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::{Error, Image, Result};

/// Bicubic convolution kernel parameter.
const CUBIC_A: f64 = -0.5;

/// Which repairing task a model is trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Rec,
    Sr,
    Inpaint,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Rec, Variant::Inpaint, Variant::Sr];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rec => "rec",
            Variant::Sr => "sr",
            Variant::Inpaint => "inpaint",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rec" => Ok(Variant::Rec),
            "sr" => Ok(Variant::Sr),
            "inpaint" => Ok(Variant::Inpaint),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}"))),
        }
    }
}

/// A rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MaskRect {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErosionKind {
    Identity,
    Downsample,
    Blackout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErosionOp {
    Identity,
    Downsample { factor: usize },
    Blackout(MaskRect),
}

impl ErosionOp {
    pub fn kind(&self) -> ErosionKind {
        match self {
            ErosionOp::Identity => ErosionKind::Identity,
            ErosionOp::Downsample { .. } => ErosionKind::Downsample,
            ErosionOp::Blackout(_) => ErosionKind::Blackout,
        }
    }

    /// Square mask of side `side`, centred vertically and displaced
    /// `offset` pixels to the right of the horizontal centre.
    pub fn centered_mask(side: usize, offset: usize, height: usize, width: usize) -> Option<Self> {
        if side == 0 || side > height || side > width {
            return None;
        }
        let top = (height - side) / 2;
        let left = (width - side) / 2 + offset;
        if left + side > width {
            return None;
        }
        Some(ErosionOp::Blackout(MaskRect { height: side, width: side, top, left }))
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let ok = match *self {
            ErosionOp::Identity => true,
            ErosionOp::Downsample { factor } => {
                factor >= 1 && height.is_multiple_of(factor) && width.is_multiple_of(factor)
            }
            ErosionOp::Blackout(m) => {
                m.height > 0 && m.width > 0 && m.top + m.height <= height && m.left + m.width <= width
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidErosion { op: self.to_string(), height, width })
        }
    }
}

impl fmt::Display for ErosionOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErosionOp::Identity => f.write_str("identity"),
            ErosionOp::Downsample { factor } => write!(f, "downsample:{factor}"),
            ErosionOp::Blackout(m) => write!(f, "blackout:{}x{}@{},{}", m.height, m.width, m.top, m.left),
        }
    }
}

impl FromStr for ErosionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad erosion op {s:?}"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let s = s.trim();
        if s == "identity" {
            return Ok(ErosionOp::Identity);
        }
        if let Some(rest) = s.strip_prefix("downsample:") {
            return Ok(ErosionOp::Downsample { factor: num(rest)? });
        }
        if let Some(rest) = s.strip_prefix("blackout:") {
            let (size, pos) = rest.split_once('@').ok_or_else(bad)?;
            let (h, w) = size.split_once('x').ok_or_else(bad)?;
            let (t, l) = pos.split_once(',').ok_or_else(bad)?;
            return Ok(ErosionOp::Blackout(MaskRect {
                height: num(h)?,
                width: num(w)?,
                top: num(t)?,
                left: num(l)?,
            }));
        }
        Err(bad())
    }
}

/// The candidate family an erosion index is drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErosionSet {
    ops: Vec<ErosionOp>,
}

impl ErosionSet {
    pub fn new(ops: Vec<ErosionOp>) -> Result<Self> {
        let first = ops.first().ok_or(Error::Empty("erosion set"))?;
        if ops.iter().any(|op| op.kind() != first.kind()) {
            return Err(Error::InvalidConfig(String::from("erosion set mixes op kinds")));
        }
        for (i, op) in ops.iter().enumerate() {
            if ops[..i].contains(op) {
                return Err(Error::InvalidConfig(format!("duplicate erosion op {op}")));
            }
        }
        Ok(Self { ops })
    }

    /// Downsampling ops for each factor dividing the resolution.
    pub fn downsample(factors: &[usize], height: usize, width: usize) -> Result<Self> {
        let ops: Vec<_> = factors
            .iter()
            .filter(|&&f| f >= 2 && height.is_multiple_of(f) && width.is_multiple_of(f))
            .map(|&factor| ErosionOp::Downsample { factor })
            .collect();
        if ops.is_empty() {
            return Err(Error::ResolutionTooSmall { variant: String::from("sr"), height, width });
        }
        Self::new(ops)
    }

    /// Square blackout masks for every (side, offset) pair that fits.
    pub fn blackout(sides: &[usize], offsets: &[usize], height: usize, width: usize) -> Result<Self> {
        let mut ops = Vec::new();
        for &side in sides {
            for &offset in offsets {
                if let Some(op) = ErosionOp::centered_mask(side, offset, height, width) {
                    if !ops.contains(&op) {
                        ops.push(op);
                    }
                }
            }
        }
        if ops.is_empty() {
            return Err(Error::ResolutionTooSmall { variant: String::from("inpaint"), height, width });
        }
        Self::new(ops)
    }

    pub fn ops(&self) -> &[ErosionOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&ErosionOp> {
        self.ops.get(index)
    }

    pub fn kind(&self) -> ErosionKind {
        self.ops[0].kind()
    }
}

/// Default mask sides for a resolution: a quarter and a half of the height.
pub fn default_mask_sides(height: usize) -> Vec<usize> {
    vec![height / 4, height / 2]
}

/// Default mask offsets: 0, an eighth and a quarter of the height.
pub fn default_mask_offsets(height: usize) -> Vec<usize> {
    let mut offsets = vec![0, height / 8, height / 4];
    offsets.dedup();
    offsets
}

pub fn default_factors(height: usize, width: usize) -> Vec<usize> {
    let mut factors = vec![2, 4];
    if height.is_multiple_of(8) && width.is_multiple_of(8) {
        factors.push(8);
    }
    factors
}

/// Builds the candidate set for `variant` at `(height, width)`.
pub fn build_erosion_set(variant: Variant, height: usize, width: usize) -> Result<ErosionSet> {
    if height < 8 || width < 8 {
        return Err(Error::ResolutionTooSmall { variant: variant.to_string(), height, width });
    }
    match variant {
        Variant::Rec => ErosionSet::new(vec![ErosionOp::Identity]),
        Variant::Sr => ErosionSet::downsample(&default_factors(height, width), height, width),
        Variant::Inpaint => ErosionSet::blackout(
            &default_mask_sides(height),
            &default_mask_offsets(height),
            height,
            width,
        ),
    }
}

/// Applies `op`. The output always has the input's shape and lies in `[0, 1]`.
pub fn apply_erosion(op: &ErosionOp, image: &Image) -> Result<Image> {
    op.validate(image.height(), image.width())?;
    match *op {
        ErosionOp::Identity => Ok(image.clone()),
        ErosionOp::Downsample { factor: 1 } => Ok(image.clone()),
        ErosionOp::Downsample { factor } => {
            let small = bicubic_resize(image, image.height() / factor, image.width() / factor)?;
            bicubic_resize(&small, image.height(), image.width())
        }
        ErosionOp::Blackout(m) => {
            let mut out = image.clone();
            for c in 0..out.channels() {
                for y in m.top..m.top + m.height {
                    for x in m.left..m.left + m.width {
                        out.set(y, x, c, 0.0);
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Keys' cubic convolution kernel.
#[inline]
pub fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Four source taps (clamped to the border) and their weights for each
/// output coordinate, using half-pixel-centre alignment.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let base = libm::floor(src);
            let t = src - base;
            let base = base as isize;
            let idx = core::array::from_fn(|k| (base - 1 + k as isize).clamp(0, n_in as isize - 1) as usize);
            let w = [cubic_weight(t + 1.0), cubic_weight(t), cubic_weight(1.0 - t), cubic_weight(2.0 - t)];
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resize with replicated borders, clamped to `[0, 1]`.
pub fn bicubic_resize(image: &Image, out_height: usize, out_width: usize) -> Result<Image> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::shape("resolution >= 1x1", format!("{out_height}x{out_width}")));
    }
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    if (out_height, out_width) == (h, w) {
        return Ok(image.clone());
    }
    let xt = axis_taps(w, out_width);
    let yt = axis_taps(h, out_height);
    let mut out = vec![0.0; ch * out_height * out_width];
    let mut rows = vec![0.0; h * out_width];
    for c in 0..ch {
        let plane = image.plane(c);
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (x, (idx, wt)) in xt.iter().enumerate() {
                rows[y * out_width + x] = (0..4).map(|k| wt[k] * src[idx[k]]).sum();
            }
        }
        let dst = &mut out[c * out_height * out_width..(c + 1) * out_height * out_width];
        for (y, (idx, wt)) in yt.iter().enumerate() {
            for x in 0..out_width {
                let v: f64 = (0..4).map(|k| wt[k] * rows[idx[k] * out_width + x]).sum();
                dst[y * out_width + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::from_raw(out_height, out_width, ch, out))
}

/// Draws an index uniformly from `0..set.len()`.
pub fn sample_erosion_index<R: Rng + ?Sized>(set: &ErosionSet, rng: &mut R) -> usize {
    rng.random_range(0..set.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..h * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect();
        Image::from_raw(h, w, 1, data)
    }

    #[test]
    fn rec_set_is_single_identity() {
        let set = build_erosion_set(Variant::Rec, 32, 32).unwrap();
        assert_eq!(set.ops(), &[ErosionOp::Identity]);
    }

    #[test]
    fn sr_factors_at_32() {
        let set = build_erosion_set(Variant::Sr, 32, 32).unwrap();
        let factors: Vec<_> = set
            .ops()
            .iter()
            .map(|op| match op {
                ErosionOp::Downsample { factor } => *factor,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(factors, vec![2, 4, 8]);
        let set = build_erosion_set(Variant::Sr, 28, 28).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn inpaint_has_centered_half_mask() {
        let set = build_erosion_set(Variant::Inpaint, 32, 32).unwrap();
        assert_eq!(set.len(), 6);
        assert!(set
            .ops()
            .contains(&ErosionOp::Blackout(MaskRect { height: 16, width: 16, top: 8, left: 8 })));
        for op in set.ops() {
            op.validate(32, 32).unwrap();
        }
    }

    #[test]
    fn too_small_resolution_is_rejected() {
        assert!(matches!(
            build_erosion_set(Variant::Sr, 4, 4),
            Err(Error::ResolutionTooSmall { .. })
        ));
    }

    #[test]
    fn set_rejects_mixed_and_duplicate_ops() {
        assert!(ErosionSet::new(vec![]).is_err());
        assert!(ErosionSet::new(vec![ErosionOp::Identity, ErosionOp::Downsample { factor: 2 }]).is_err());
        assert!(ErosionSet::new(vec![ErosionOp::Downsample { factor: 2 }; 2]).is_err());
    }

    #[test]
    fn op_strings_round_trip() {
        for op in build_erosion_set(Variant::Inpaint, 32, 32)
            .unwrap()
            .ops()
            .iter()
            .chain([ErosionOp::Identity, ErosionOp::Downsample { factor: 4 }].iter())
        {
            assert_eq!(op.to_string().parse::<ErosionOp>().unwrap(), *op);
        }
        assert!("blur:3".parse::<ErosionOp>().is_err());
    }

    #[test]
    fn identity_is_bit_identical() {
        let img = ramp(8, 8);
        assert_eq!(apply_erosion(&ErosionOp::Identity, &img).unwrap(), img);
    }

    #[test]
    fn full_blackout_zeroes_everything() {
        let img = Image::filled(8, 8, 3, 0.7);
        let op = ErosionOp::Blackout(MaskRect { height: 8, width: 8, top: 0, left: 0 });
        let out = apply_erosion(&op, &img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_op_is_rejected() {
        let img = Image::filled(10, 10, 1, 0.5);
        assert!(apply_erosion(&ErosionOp::Downsample { factor: 4 }, &img).is_err());
        let op = ErosionOp::Blackout(MaskRect { height: 4, width: 4, top: 8, left: 0 });
        assert!(apply_erosion(&op, &img).is_err());
    }

    #[test]
    fn downsample_keeps_constants() {
        let img = Image::filled(16, 16, 1, 0.5);
        for factor in [2, 4, 8] {
            let out = apply_erosion(&ErosionOp::Downsample { factor }, &img).unwrap();
            assert_eq!(out.dims(), img.dims());
            assert!(out.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn resize_same_resolution_is_identity() {
        let img = ramp(7, 9);
        assert_eq!(bicubic_resize(&img, 7, 9).unwrap(), img);
        assert!(bicubic_resize(&img, 0, 3).is_err());
    }

    #[test]
    fn resize_constant_to_any_resolution() {
        let img = Image::filled(6, 10, 1, 0.25);
        for (h, w) in [(1, 1), (3, 5), (12, 20), (7, 13)] {
            let out = bicubic_resize(&img, h, w).unwrap();
            assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn kernel_weights_partition_unity() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let s = cubic_weight(t + 1.0) + cubic_weight(t) + cubic_weight(1.0 - t) + cubic_weight(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn single_op_set_always_samples_zero() {
        let set = build_erosion_set(Variant::Rec, 8, 8).unwrap();
        let mut rng = stream(1, Stream::Erosion);
        assert!((0..100).all(|_| sample_erosion_index(&set, &mut rng) == 0));
    }

    #[test]
    fn erosion_sampling_is_uniform_and_seeded() {
        let set = ErosionSet::downsample(&[2, 4, 8, 16], 32, 32).unwrap();
        assert_eq!(set.len(), 4);
        let mut a = stream(11, Stream::Erosion);
        let mut b = stream(11, Stream::Erosion);
        let draws: Vec<usize> = (0..100_000).map(|_| sample_erosion_index(&set, &mut a)).collect();
        let again: Vec<usize> = (0..100_000).map(|_| sample_erosion_index(&set, &mut b)).collect();
        assert_eq!(draws, again);
        for k in 0..4 {
            let freq = draws.iter().filter(|&&d| d == k).count() as f64 / 1e5;
            assert!((freq - 0.25).abs() < 0.01, "index {k}: {freq}");
        }
    }
}
