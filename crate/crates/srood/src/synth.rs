//! Procedural stand-ins for handwritten digits and clothing silhouettes.
//!
//! Digits are thin anti-aliased strokes on black; clothing items are filled,
//! textured polygons. Both are 8-bit quantised so a PNG round trip is exact.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srood_core::Image;

use crate::datasets::{encode_png, Split};
use crate::error::{io_err, AppResult};
use crate::io::write_file;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corpus {
    Digits,
    Clothing,
}

impl Corpus {
    pub fn as_str(self) -> &'static str {
        match self {
            Corpus::Digits => "digits",
            Corpus::Clothing => "clothing",
        }
    }
}

type Pt = (f64, f64);

const SUPERSAMPLE: usize = 4;

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64) -> Vec<Pt> {
    let n = 16;
    (0..=n)
        .map(|i| {
            let a = (a0 + (a1 - a0) * i as f64 / n as f64) * PI / 180.0;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn join(parts: &[Vec<Pt>]) -> Vec<Pt> {
    parts.iter().flatten().copied().collect()
}

/// Polylines for each digit in a unit box, y pointing down.
fn digit_strokes(digit: usize) -> Vec<Vec<Pt>> {
    match digit {
        0 => vec![arc(0.5, 0.5, 0.27, 0.38, 0.0, 360.0)],
        1 => vec![vec![(0.38, 0.24), (0.52, 0.12), (0.52, 0.88)]],
        2 => vec![join(&[arc(0.5, 0.32, 0.25, 0.2, -170.0, 30.0), vec![(0.22, 0.88), (0.8, 0.88)]])],
        3 => vec![arc(0.5, 0.3, 0.24, 0.18, -160.0, 90.0), arc(0.5, 0.68, 0.26, 0.2, -90.0, 160.0)],
        4 => vec![vec![(0.65, 0.88), (0.65, 0.12), (0.2, 0.65), (0.82, 0.65)]],
        5 => vec![join(&[vec![(0.75, 0.12), (0.32, 0.12), (0.28, 0.46)], arc(0.5, 0.65, 0.26, 0.23, -125.0, 150.0)])],
        6 => vec![arc(0.5, 0.67, 0.24, 0.21, 0.0, 360.0), vec![(0.68, 0.12), (0.42, 0.3), (0.28, 0.55), (0.27, 0.68)]],
        7 => vec![vec![(0.22, 0.12), (0.8, 0.12), (0.42, 0.88)]],
        8 => vec![arc(0.5, 0.3, 0.2, 0.18, 0.0, 360.0), arc(0.5, 0.68, 0.24, 0.2, 0.0, 360.0)],
        _ => vec![arc(0.5, 0.33, 0.23, 0.2, 0.0, 360.0), vec![(0.73, 0.33), (0.7, 0.6), (0.55, 0.88)]],
    }
}

/// Filled outline plus darker detail strokes for each clothing class.
fn clothing_shape(class: usize) -> (Vec<Pt>, Vec<Vec<Pt>>) {
    let pullover = vec![
        (0.3, 0.08),
        (0.7, 0.08),
        (0.92, 0.25),
        (0.98, 0.85),
        (0.84, 0.87),
        (0.78, 0.4),
        (0.76, 0.92),
        (0.24, 0.92),
        (0.22, 0.4),
        (0.16, 0.87),
        (0.02, 0.85),
        (0.08, 0.25),
    ];
    let tee = vec![
        (0.3, 0.1),
        (0.7, 0.1),
        (0.95, 0.3),
        (0.85, 0.42),
        (0.75, 0.35),
        (0.75, 0.92),
        (0.25, 0.92),
        (0.25, 0.35),
        (0.15, 0.42),
        (0.05, 0.3),
    ];
    match class {
        0 => (tee, vec![]),
        1 => (vec![(0.3, 0.05), (0.7, 0.05), (0.75, 0.95), (0.56, 0.95), (0.5, 0.35), (0.44, 0.95), (0.25, 0.95)], vec![]),
        2 => (pullover, vec![]),
        3 => (vec![(0.38, 0.05), (0.62, 0.05), (0.64, 0.35), (0.85, 0.95), (0.15, 0.95), (0.36, 0.35)], vec![]),
        4 => (pullover, vec![vec![(0.5, 0.1), (0.5, 0.92)]]),
        5 => (
            vec![(0.05, 0.7), (0.95, 0.6), (0.95, 0.75), (0.05, 0.8)],
            vec![vec![(0.2, 0.72), (0.45, 0.45), (0.7, 0.64)], vec![(0.45, 0.45), (0.85, 0.62)]],
        ),
        6 => (tee, vec![vec![(0.4, 0.1), (0.5, 0.25), (0.6, 0.1)], vec![(0.5, 0.25), (0.5, 0.92)]]),
        7 => (vec![(0.05, 0.55), (0.45, 0.5), (0.7, 0.35), (0.9, 0.45), (0.97, 0.7), (0.97, 0.8), (0.05, 0.8)], vec![vec![(0.05, 0.72), (0.97, 0.72)]]),
        8 => (vec![(0.1, 0.3), (0.9, 0.3), (0.9, 0.9), (0.1, 0.9)], vec![arc(0.5, 0.3, 0.22, 0.2, 180.0, 360.0)]),
        _ => (vec![(0.2, 0.1), (0.5, 0.1), (0.55, 0.5), (0.9, 0.62), (0.95, 0.85), (0.15, 0.85)], vec![vec![(0.2, 0.75), (0.95, 0.75)]]),
    }
}

/// Random similarity-plus-shear map from the unit box to pixel space.
struct Warp {
    m: [f64; 4],
    t: Pt,
}

impl Warp {
    fn random<R: Rng>(rng: &mut R, size: f64, box_frac: f64, rot: f64, shear: f64, shift: f64) -> Self {
        let a = rng.random_range(-rot..rot);
        let sh = rng.random_range(-shear..shear);
        let sx = rng.random_range(0.8..1.05) * box_frac * size;
        let sy = rng.random_range(0.85..1.05) * box_frac * size;
        let (c, s) = (a.cos(), a.sin());
        let m = [c * sx, (c * sh - s) * sy, s * sx, (s * sh + c) * sy];
        let t = (
            size / 2.0 + rng.random_range(-shift..shift) * size,
            size / 2.0 + rng.random_range(-shift..shift) * size,
        );
        Self { m, t }
    }

    fn apply(&self, p: Pt) -> Pt {
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        (self.m[0] * x + self.m[1] * y + self.t.0, self.m[2] * x + self.m[3] * y + self.t.1)
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn polyline_distance(p: Pt, line: &[Pt]) -> f64 {
    line.windows(2).map(|w| segment_distance(p, w[0], w[1])).fold(f64::INFINITY, f64::min)
}

fn inside(p: Pt, poly: &[Pt]) -> bool {
    let mut hit = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + n - 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            hit = !hit;
        }
    }
    hit
}

/// Coverage-weighted rasterisation: `shade` gives the value at a
/// sub-pixel sample, averaged over a regular grid.
fn rasterise(size: usize, mut shade: impl FnMut(Pt) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    let n = SUPERSAMPLE as f64;
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    acc += shade((x as f64 + (sx as f64 + 0.5) / n, y as f64 + (sy as f64 + 0.5) / n));
                }
            }
            out[y * size + x] = acc / (n * n);
        }
    }
    out
}

fn quantise(data: Vec<f64>, size: usize) -> Image {
    let data = data.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0).collect();
    Image::from_raw(size, size, 1, data)
}

pub fn digit<R: Rng>(rng: &mut R, class: usize, size: usize) -> Image {
    let warp = Warp::random(rng, size as f64, 0.72, 0.25, 0.3, 0.05);
    let wobble: Vec<f64> = (0..4).map(|_| rng.random_range(-0.03..0.03)).collect();
    let strokes: Vec<Vec<Pt>> = digit_strokes(class)
        .into_iter()
        .map(|line| {
            line.into_iter()
                .map(|(x, y)| {
                    let p = (x + wobble[0] * (y * 2.0 * PI).sin() + wobble[1] * y, y + wobble[2] * (x * 2.0 * PI).sin() + wobble[3] * x);
                    warp.apply(p)
                })
                .collect()
        })
        .collect();
    let half = rng.random_range(0.8..1.6) * size as f64 / 32.0;
    let peak = rng.random_range(0.85..1.0);
    let data = rasterise(size, |p| {
        let d = strokes.iter().map(|l| polyline_distance(p, l)).fold(f64::INFINITY, f64::min);
        if d < half { peak } else { 0.0 }
    });
    quantise(data, size)
}

pub fn clothing<R: Rng>(rng: &mut R, class: usize, size: usize) -> Image {
    let warp = Warp::random(rng, size as f64, 0.85, 0.08, 0.1, 0.03);
    let (outline, details) = clothing_shape(class);
    let outline: Vec<Pt> = outline.into_iter().map(|p| warp.apply(p)).collect();
    let details: Vec<Vec<Pt>> = details.into_iter().map(|l| l.into_iter().map(|p| warp.apply(p)).collect()).collect();
    let base = rng.random_range(0.25..0.85);
    let grad = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
    let stripes = if rng.random_bool(0.3) { rng.random_range(0.05..0.15) } else { 0.0 };
    let period = rng.random_range(2.5..5.0);
    // Coarse value noise on a 4-pixel lattice.
    let cells = size / 4 + 2;
    let noise: Vec<f64> = (0..cells * cells).map(|_| rng.random_range(-0.08..0.08)).collect();
    let half = 0.6 * size as f64 / 32.0;
    let s = size as f64;
    let data = rasterise(size, |p| {
        if !inside(p, &outline) {
            return 0.0;
        }
        let (gx, gy) = (p.0 / 4.0, p.1 / 4.0);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at = |x: usize, y: usize| noise[y.min(cells - 1) * cells + x.min(cells - 1)];
        let n = at(ix, iy) * (1.0 - fx) * (1.0 - fy) + at(ix + 1, iy) * fx * (1.0 - fy) + at(ix, iy + 1) * (1.0 - fx) * fy + at(ix + 1, iy + 1) * fx * fy;
        let mut v = base + grad.0 * (p.0 / s - 0.5) + grad.1 * (p.1 / s - 0.5) + n;
        if stripes > 0.0 && (p.1 / period).floor() as i64 % 2 == 0 {
            v -= stripes;
        }
        if details.iter().any(|l| polyline_distance(p, l) < half) {
            v *= 0.55;
        }
        v
    });
    quantise(data, size)
}

/// `count` samples with labels cycling through the ten classes in a
/// shuffled order.
pub fn generate(corpus: Corpus, count: usize, size: usize, seed: u64, stream: u64) -> Vec<(Image, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|_| {
            let class = rng.random_range(0..10);
            let img = match corpus {
                Corpus::Digits => digit(&mut rng, class, size),
                Corpus::Clothing => clothing(&mut rng, class, size),
            };
            (img, class)
        })
        .collect()
}

/// Split sizes for a generated ID/OOD pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for PairSizes {
    fn default() -> Self {
        Self { train: 5000, val: 200, test: 500 }
    }
}

/// Writes digits as the ID splits and clothing as the OOD splits, as PNGs
/// under `dir` with a `manifest.csv`. Returns the manifest path.
pub fn write_pair(dir: &Path, sizes: PairSizes, size: usize, seed: u64) -> AppResult<PathBuf> {
    let plan = [
        (Split::Train, Corpus::Digits, sizes.train),
        (Split::ValId, Corpus::Digits, sizes.val),
        (Split::TestId, Corpus::Digits, sizes.test),
        (Split::ValOod, Corpus::Clothing, sizes.val),
        (Split::TestOod, Corpus::Clothing, sizes.test),
    ];
    let mut manifest = String::from("path,split,label\n");
    for (stream, (split, corpus, count)) in plan.into_iter().enumerate() {
        let sub = dir.join(split.as_str());
        std::fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (i, (img, label)) in generate(corpus, count, size, seed, stream as u64).into_iter().enumerate() {
            let name = format!("{}/{i:05}.png", split.as_str());
            write_file(&dir.join(&name), encode_png(&img)?)?;
            let _ = writeln!(manifest, "{name},{split},{label}");
        }
    }
    let path = dir.join("manifest.csv");
    write_file(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_quantised_and_seeded() {
        for corpus in [Corpus::Digits, Corpus::Clothing] {
            let a = generate(corpus, 12, 32, 3, 1);
            assert_eq!(a, generate(corpus, 12, 32, 3, 1));
            assert_ne!(a, generate(corpus, 12, 32, 4, 1));
            for (img, class) in &a {
                assert!(*class < 10);
                assert!(img.data().iter().all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
                let (lo, hi) = img.min_max();
                assert_eq!(lo, 0.0);
                assert!(hi > 0.2);
            }
        }
    }

    #[test]
    fn digits_are_sparser_than_clothing() {
        let ink = |c| {
            let v = generate(c, 50, 32, 0, 0);
            v.iter().map(|(i, _)| i.data().iter().filter(|&&p| p > 0.1).count()).sum::<usize>() as f64 / 50.0
        };
        assert!(ink(Corpus::Digits) < ink(Corpus::Clothing));
    }

    #[test]
    fn written_pair_loads_back_identically() {
        let dir = tempfile::tempdir().unwrap();
        let sizes = PairSizes { train: 4, val: 2, test: 3 };
        let path = write_pair(dir.path(), sizes, 32, 9).unwrap();
        let m = crate::datasets::load_manifest(&path).unwrap();
        assert_eq!(m.entries().len(), 4 + 2 * 2 + 2 * 3);
        let train = crate::datasets::load_split(&m, Split::Train, 32, 32, 1).unwrap();
        let expected: Vec<Image> = generate(Corpus::Digits, 4, 32, 9, 0).into_iter().map(|p| p.0).collect();
        assert_eq!(train, expected);
        assert!(m.labels(Split::TestOod).iter().all(Option::is_some));
    }
}
