//! Dataset manifests and image decoding.
//!
//! A manifest is a UTF-8 text file with one `path,split[,label]` record per
//! line. Relative paths resolve against `SROOD_DATA_ROOT` when set, else the
//! manifest's directory. A path of the form `file#N` names the `N`th image
//! of an IDX (`ubyte`) array file.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use srood_core::erosion::bicubic_resize;
use srood_core::training::sample_indices;
use srood_core::{Image, ImageBatch};

use crate::error::{io_err, AppError, AppResult};

pub const DATA_ROOT_ENV: &str = "SROOD_DATA_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    ValId,
    TestId,
    ValOod,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Train, Split::ValId, Split::TestId, Split::ValOod, Split::TestOod];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::ValId => "val-id",
            Split::TestId => "test-id",
            Split::ValOod => "val-ood",
            Split::TestOod => "test-ood",
        }
    }

    pub fn is_id(self) -> bool {
        matches!(self, Split::Train | Split::ValId | Split::TestId)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = AppError;

    fn from_str(s: &str) -> AppResult<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| AppError::UnknownSplit(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Path as written in the manifest.
    pub path: String,
    pub split: Split,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    root: PathBuf,
    entries: Vec<Entry>,
}

fn split_idx_path(path: &str) -> (&str, Option<&str>) {
    match path.rsplit_once('#') {
        Some((file, n)) => (file, Some(n)),
        None => (path, None),
    }
}

impl DatasetManifest {
    /// Parses manifest text. `root` anchors relative paths.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> AppResult<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || (entries.is_empty() && line == "path,split,label") {
                continue;
            }
            let row = |reason: &str| AppError::ManifestRow { line: i + 1, reason: reason.to_string() };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
                return Err(row("expected path,split[,label]"));
            }
            let split: Split = fields[1].parse()?;
            let label = match fields.get(2) {
                None | Some(&"") => None,
                Some(l) => Some(l.parse().map_err(|_| row("label must be a non-negative integer"))?),
            };
            if !seen.insert(fields[0].to_string()) {
                return Err(AppError::DuplicatePath(fields[0].to_string()));
            }
            entries.push(Entry { path: fields[0].to_string(), split, label });
        }
        if entries.is_empty() {
            return Err(AppError::EmptyManifest);
        }
        Ok(Self { root: root.into(), entries })
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Manifest indices of `split`, in file order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.split == split).map(|(i, _)| i).collect()
    }

    pub fn labels(&self, split: Split) -> Vec<Option<usize>> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.label).collect()
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check_files(&self) -> AppResult<()> {
        for e in &self.entries {
            let (file, _) = split_idx_path(&e.path);
            let p = self.resolve(file);
            if !p.is_file() {
                return Err(AppError::MissingFile(p));
            }
        }
        Ok(())
    }
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> AppResult<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let root = match std::env::var_os(DATA_ROOT_ENV) {
        Some(r) => PathBuf::from(r),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let m = DatasetManifest::parse(&text, root)?;
    m.check_files()?;
    Ok(m)
}

/// Converts interleaved 8-bit pixels to the requested channel count.
fn from_u8(width: usize, height: usize, src_channels: usize, pixels: &[u8], channels: usize) -> Vec<f64> {
    let hw = width * height;
    let at = |p: usize, c: usize| pixels[p * src_channels + c] as f64 / 255.0;
    let mut out = vec![0.0; channels * hw];
    for p in 0..hw {
        match (src_channels, channels) {
            (s, c) if s == c => {
                for k in 0..c {
                    out[k * hw + p] = at(p, k);
                }
            }
            (1, 3) => {
                for k in 0..3 {
                    out[k * hw + p] = at(p, 0);
                }
            }
            // ITU-R 601 luma, as used by common image libraries.
            (_, 1) => out[p] = (0.299 * at(p, 0) + 0.587 * at(p, 1) + 0.114 * at(p, 2)).clamp(0.0, 1.0),
            _ => unreachable!("channel counts are validated"),
        }
    }
    out
}

fn decode_png(path: &Path, bytes: &[u8], channels: usize) -> AppResult<(usize, usize, Vec<f64>)> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| AppError::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (src_c, pixels) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    Ok((h, w, from_u8(w, h, src_c, &pixels, channels)))
}

fn decode_idx(path: &Path, bytes: &[u8], index: usize, channels: usize) -> AppResult<(usize, usize, Vec<f64>)> {
    let bad = |reason: &str| AppError::Decode { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 {
        return Err(bad("not an unsigned-byte IDX file"));
    }
    let rank = bytes[3] as usize;
    if bytes.len() < 4 + 4 * rank {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let (n, h, w, c) = match dims.as_slice() {
        [n, h, w] => (*n, *h, *w, 1),
        [n, h, w, c] => (*n, *h, *w, *c),
        _ => return Err(bad("expected rank 3 or 4")),
    };
    if c != 1 && c != 3 {
        return Err(AppError::UnsupportedChannels { path: path.to_path_buf(), channels: c });
    }
    if index >= n {
        return Err(bad("image index out of range"));
    }
    let size = h * w * c;
    let start = 4 + 4 * rank + index * size;
    let pixels = bytes.get(start..start + size).ok_or_else(|| bad("truncated data"))?;
    Ok((h, w, from_u8(w, h, c, pixels, channels)))
}

/// Decodes images, caching whole IDX files between calls.
#[derive(Debug, Default)]
pub struct Decoder {
    cache: HashMap<PathBuf, Vec<u8>>,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decodes to `[0,1]` floats with `channels` planes, bicubic-resized to
    /// `height` x `width` when the source size differs.
    pub fn decode(&mut self, path: &Path, height: usize, width: usize, channels: usize) -> AppResult<Image> {
        if channels != 1 && channels != 3 {
            return Err(AppError::UnsupportedChannels { path: path.to_path_buf(), channels });
        }
        let text = path.to_string_lossy();
        let (file, index) = split_idx_path(&text);
        let file = PathBuf::from(file);
        let (h, w, data) = match index {
            Some(n) => {
                let n: usize = n.parse().map_err(|_| AppError::Decode {
                    path: path.to_path_buf(),
                    reason: "bad IDX index".to_string(),
                })?;
                if !self.cache.contains_key(&file) {
                    let bytes = std::fs::read(&file).map_err(io_err(&file))?;
                    self.cache.insert(file.clone(), bytes);
                }
                decode_idx(&file, &self.cache[&file], n, channels)?
            }
            None => {
                let bytes = std::fs::read(&file).map_err(io_err(&file))?;
                decode_png(&file, &bytes, channels)?
            }
        };
        let img = Image::from_planar(h, w, channels, data)?;
        if (h, w) == (height, width) {
            Ok(img)
        } else {
            Ok(bicubic_resize(&img, height, width)?)
        }
    }
}

pub fn decode_image(path: &Path, height: usize, width: usize, channels: usize) -> AppResult<Image> {
    Decoder::new().decode(path, height, width, channels)
}

/// Decodes every image of `split` in manifest order.
pub fn load_split(
    manifest: &DatasetManifest,
    split: Split,
    height: usize,
    width: usize,
    channels: usize,
) -> AppResult<Vec<Image>> {
    let mut dec = Decoder::new();
    manifest
        .entries()
        .iter()
        .filter(|e| e.split == split)
        .map(|e| dec.decode(&manifest.resolve(&e.path), height, width, channels))
        .collect()
}

/// Draws `batch` distinct entries of `split` and decodes them in draw order.
pub fn sample_batch<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    split: Split,
    batch: usize,
    rng: &mut R,
    (height, width, channels): (usize, usize, usize),
) -> AppResult<ImageBatch> {
    let pool = manifest.indices(split);
    if pool.is_empty() {
        return Err(AppError::EmptySplit(split.as_str()));
    }
    let picks = sample_indices(pool.len(), batch, rng)?;
    let mut dec = Decoder::new();
    let mut images = Vec::with_capacity(batch);
    let mut indices = Vec::with_capacity(batch);
    for p in picks {
        let i = pool[p];
        images.push(dec.decode(&manifest.resolve(&manifest.entries()[i].path), height, width, channels)?);
        indices.push(i);
    }
    Ok(ImageBatch::new(images, indices)?)
}

/// Encodes a single-channel or RGB image as 8-bit PNG bytes.
pub fn encode_png(img: &Image) -> AppResult<Vec<u8>> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let hw = h * w;
    let mut raw = Vec::with_capacity(hw * c);
    for p in 0..hw {
        for k in 0..c {
            raw.push((img.data()[k * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let color = if c == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        &raw,
        w as u32,
        h as u32,
        color,
    )
    .map_err(|e| AppError::Decode { path: PathBuf::from("<memory>"), reason: e.to_string() })?;
    Ok(out)
}
