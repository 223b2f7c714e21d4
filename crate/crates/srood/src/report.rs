//! Report emission: CSV and text tables, score histograms, image grids and
//! a metadata sidecar. Only the sidecar carries timestamps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use srood_core::evaluation::{AblationTable, EvalReport};
use srood_core::Image;

use crate::datasets::encode_png;
use crate::error::{AppError, AppResult};
use crate::io::write_file;

pub const REPORT_HEADER: &str = "id_dataset,ood_dataset,variant,erosion,auroc,n_id,n_ood,seed";

pub fn report_csv(report: &EvalReport) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{},{},{}",
            r.id_dataset, r.ood_dataset, r.variant, r.erosion, r.auroc, r.n_id, r.n_ood, r.seed
        );
    }
    s
}

fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut s = line(header);
    s.push('\n');
    s.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

pub fn report_text(report: &EvalReport) -> String {
    let header: Vec<String> = REPORT_HEADER.split(',').map(str::to_string).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.id_dataset.clone(),
                r.ood_dataset.clone(),
                r.variant.to_string(),
                r.erosion.to_string(),
                format!("{:.2}", 100.0 * r.auroc),
                r.n_id.to_string(),
                r.n_ood.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    aligned(&header, &rows)
}

pub fn ablation_csv(table: &AblationTable) -> String {
    let mut s = format!("ood_dataset,{}\n", table.columns.join(","));
    for (name, values) in &table.rows {
        let cells: Vec<String> = values.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{name},{}", cells.join(","));
    }
    s
}

pub fn ablation_text(table: &AblationTable) -> String {
    let mut header = vec!["ood_dataset".to_string()];
    header.extend(table.columns.iter().cloned());
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|(n, v)| std::iter::once(n.clone()).chain(v.iter().map(|x| format!("{:.2}", 100.0 * x))).collect())
        .collect();
    aligned(&header, &rows)
}

const HIST_BINS: usize = 40;
const BIN_PX: u32 = 8;
const HIST_HEIGHT: u32 = 120;

/// Overlaid ID (blue) and OOD (orange) score histograms as PNG bytes.
pub fn histogram_png(id: &[f64], ood: &[f64]) -> AppResult<Vec<u8>> {
    let all = id.iter().chain(ood);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let counts = |s: &[f64]| {
        let mut c = [0usize; HIST_BINS];
        for v in s {
            let b = (((v - lo) / span) * HIST_BINS as f64) as usize;
            c[b.min(HIST_BINS - 1)] += 1;
        }
        c
    };
    let (ci, co) = (counts(id), counts(ood));
    // Normalise each group to its own peak so unequal sizes stay readable.
    let peak = |c: &[usize; HIST_BINS]| c.iter().copied().max().unwrap_or(1).max(1) as f64;
    let (pi, po) = (peak(&ci), peak(&co));
    let width = HIST_BINS as u32 * BIN_PX;
    let mut img = image::RgbImage::from_pixel(width, HIST_HEIGHT, image::Rgb([255, 255, 255]));
    for x in 0..width {
        let b = (x / BIN_PX) as usize;
        let hi_id = (ci[b] as f64 / pi * (HIST_HEIGHT - 1) as f64).round() as u32;
        let hi_ood = (co[b] as f64 / po * (HIST_HEIGHT - 1) as f64).round() as u32;
        for y in 0..HIST_HEIGHT {
            let level = HIST_HEIGHT - 1 - y;
            let px = match (level < hi_id, level < hi_ood) {
                (true, true) => [120, 90, 160],
                (true, false) => [60, 110, 200],
                (false, true) => [240, 150, 50],
                (false, false) => continue,
            };
            img.put_pixel(x, y, image::Rgb(px));
        }
    }
    let mut out = Vec::new();
    image::ImageEncoder::write_image(
        image::codecs::png::PngEncoder::new(&mut out),
        img.as_raw(),
        width,
        HIST_HEIGHT,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| AppError::Decode { path: PathBuf::from("<histogram>"), reason: e.to_string() })?;
    Ok(out)
}

/// Original, eroded and repaired images for one dataset.
#[derive(Debug, Clone)]
pub struct GridRows {
    pub name: String,
    pub original: Vec<Image>,
    pub eroded: Vec<Image>,
    pub repaired: Vec<Image>,
}

/// Tiles the three rows into one image with a one-pixel gap.
pub fn grid_image(rows: &GridRows) -> AppResult<Image> {
    let first = rows.original.first().ok_or(AppError::EmptySplit("grid"))?;
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let cols = rows.original.len();
    if rows.eroded.len() != cols || rows.repaired.len() != cols {
        return Err(AppError::GridRows);
    }
    let (gh, gw) = (3 * h + 2, cols * w + cols.saturating_sub(1));
    let mut out = Image::filled(gh, gw, c, 1.0);
    for (r, row) in [&rows.original, &rows.eroded, &rows.repaired].into_iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(r * (h + 1) + y, k * (w + 1) + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pair histogram input: dataset names and their scores.
pub struct HistogramInput<'a> {
    pub id_name: &'a str,
    pub ood_name: &'a str,
    pub id: &'a [f64],
    pub ood: &'a [f64],
}

/// Writes `report.csv`, `report.txt`, one histogram per pair and one grid
/// per dataset. Returns the written paths.
pub fn emit_report(
    report: &EvalReport,
    histograms: &[HistogramInput<'_>],
    grids: &[GridRows],
    out_dir: &Path,
) -> AppResult<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> AppResult<()> {
        let p = out_dir.join(name);
        write_file(&p, bytes)?;
        written.push(p);
        Ok(())
    };
    put("report.csv".to_string(), report_csv(report).into_bytes())?;
    put("report.txt".to_string(), report_text(report).into_bytes())?;
    for h in histograms {
        put(format!("hist_{}_vs_{}.png", h.id_name, h.ood_name), histogram_png(h.id, h.ood)?)?;
    }
    for g in grids {
        put(format!("grid_{}.png", g.name), encode_png(&grid_image(g)?)?)?;
    }
    Ok(written)
}

/// `key = value` sidecar for run metadata that is allowed to vary.
pub fn metadata_text(entries: &[(String, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use srood_core::erosion::{ErosionOp, Variant};
    use srood_core::evaluation::EvalRow;

    fn report() -> EvalReport {
        EvalReport {
            rows: vec![EvalRow {
                id_dataset: "digits".into(),
                ood_dataset: "clothing".into(),
                variant: Variant::Sr,
                erosion: ErosionOp::Downsample { factor: 2 },
                auroc: 0.9459,
                n_id: 10,
                n_ood: 12,
                seed: 0,
            }],
            metadata: vec![],
        }
    }

    #[test]
    fn tables_have_fixed_layout() {
        let csv = report_csv(&report());
        assert_eq!(csv, format!("{REPORT_HEADER}\ndigits,clothing,sr,downsample:2,0.945900,10,12,0\n"));
        let text = report_text(&report());
        assert!(text.contains("94.59"));
        let mut t = AblationTable::new(vec!["l2".into(), "l2+lpips".into(), "lpips".into()]);
        t.push_row("clothing", vec![0.2692, 0.8466, 0.9459]).unwrap();
        assert_eq!(ablation_csv(&t), "ood_dataset,l2,l2+lpips,lpips\nclothing,0.269200,0.846600,0.945900\n");
    }

    #[test]
    fn grids_and_histograms() {
        let img = Image::filled(4, 4, 1, 0.5);
        let rows = GridRows { name: "x".into(), original: vec![img.clone(); 3], eroded: vec![img.clone(); 3], repaired: vec![img; 3] };
        let g = grid_image(&rows).unwrap();
        assert_eq!((g.height(), g.width()), (14, 14));
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report(), &[], &[], dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let hist = HistogramInput { id_name: "a", ood_name: "b", id: &[0.1, 0.2], ood: &[0.5] };
        let files = emit_report(&report(), &[hist], &[rows.clone(), GridRows { name: "y".into(), ..rows }], dir.path()).unwrap();
        assert_eq!(files.len(), 5);
        assert_eq!(histogram_png(&[0.1, 0.2], &[0.5]).unwrap(), histogram_png(&[0.1, 0.2], &[0.5]).unwrap());
    }
}
