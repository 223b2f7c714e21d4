#![allow(dead_code)]

use std::fmt::Write;
use std::path::PathBuf;

use srood_core::Image;

/// Set to regenerate the files under `tests/golden/`.
pub const BLESS_ENV: &str = "SROOD_BLESS";

/// Deterministic 8-bit test card.
pub fn test_card(height: usize, width: usize, channels: usize) -> Image {
    let mut data = Vec::with_capacity(height * width * channels);
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                let v = (y * 131 + x * 71 + c * 29 + (x * y) % 7) % 256;
                data.push(v as f64 / 255.0);
            }
        }
    }
    Image::from_planar(height, width, channels, data).unwrap()
}

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.hex"))
}

pub fn to_hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2 + bytes.len() / 32);
    for line in bytes.chunks(32) {
        for b in line {
            let _ = write!(s, "{b:02x}");
        }
        s.push('\n');
    }
    s
}

pub fn from_hex(text: &str) -> Vec<u8> {
    let digits: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
    digits
        .chunks(2)
        .map(|p| u8::from_str_radix(std::str::from_utf8(p).unwrap(), 16).unwrap())
        .collect()
}

/// Compares `bytes` with the stored golden file, or rewrites it when
/// blessing.
pub fn check_golden(name: &str, bytes: &[u8]) {
    let path = golden_path(name);
    if std::env::var_os(BLESS_ENV).is_some() {
        std::fs::write(&path, to_hex(bytes)).unwrap();
        return;
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
    let stored = from_hex(&text);
    assert_eq!(stored.len(), bytes.len(), "{name}: length");
    if let Some(i) = stored.iter().zip(bytes).position(|(a, b)| a != b) {
        panic!("{name}: first differing byte at {i}");
    }
}
