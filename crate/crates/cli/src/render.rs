//! Static PNG figures and the plain-text summary of a report.

#![allow(clippy::needless_range_loop)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use mtree_core::engine::{Report, SaliencyMaps};

use crate::CliError;

const SHORT_NAMES: [&str; 3] = ["NT", "T1", "T2"];

/// Percentages of each row's total; empty rows stay zero.
pub fn row_normalized(confusion: &[[u64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| {
        let total: u64 = confusion[i].iter().sum();
        std::array::from_fn(|j| {
            if total == 0 {
                0.0
            } else {
                100.0 * confusion[i][j] as f64 / total as f64
            }
        })
    })
}

pub fn sum_confusions<'a>(ms: impl IntoIterator<Item = &'a [[u64; 3]; 3]>) -> [[u64; 3]; 3] {
    let mut out = [[0u64; 3]; 3];
    for m in ms {
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] += m[i][j];
            }
        }
    }
    out
}

// 3x5 glyphs, one row per 3 bits, top row first.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '%' => [5, 1, 2, 4, 5],
        'N' => [5, 7, 7, 7, 5],
        'T' => [7, 2, 2, 2, 2],
        ' ' => [0; 5],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, scale: u32, color: Rgb<u8>) {
    for (k, c) in text.chars().enumerate() {
        let Some(g) = glyph(c) else { continue };
        let x0 = x + k as u32 * 4 * scale;
        for (r, bits) in g.iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let (px, py) = (x0 + col * scale + dx, y + r as u32 * scale + dy);
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

fn text_width(text: &str, scale: u32) -> u32 {
    (text.chars().count() as u32 * 4).saturating_sub(1) * scale
}

fn fill(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for py in y..(y + h).min(img.height()) {
        for px in x..(x + w).min(img.width()) {
            img.put_pixel(px, py, color);
        }
    }
}

fn shade(pct: f64) -> Rgb<u8> {
    let t = (pct / 100.0).clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)])
}

/// Row-normalized confusion heatmap with percentages printed in each cell.
pub fn confusion_png(confusion: &[[u64; 3]; 3], path: &Path) -> Result<(), CliError> {
    const CELL: u32 = 120;
    const LEFT: u32 = 56;
    const TOP: u32 = 40;
    let pct = row_normalized(confusion);
    let mut img = RgbImage::from_pixel(LEFT + 3 * CELL + 8, TOP + 3 * CELL + 8, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    for k in 0..3 {
        let name = SHORT_NAMES[k];
        let off = (CELL - text_width(name, 4)) / 2;
        draw_text(&mut img, LEFT + k as u32 * CELL + off, 10, name, 4, black);
        draw_text(&mut img, 8, TOP + k as u32 * CELL + (CELL - 20) / 2, name, 4, black);
    }
    for i in 0..3 {
        for j in 0..3 {
            let (x, y) = (LEFT + j as u32 * CELL, TOP + i as u32 * CELL);
            fill(&mut img, x, y, CELL - 2, CELL - 2, shade(pct[i][j]));
            let label = format!("{:.1}%", pct[i][j]);
            let ink = if pct[i][j] > 50.0 { Rgb([255, 255, 255]) } else { black };
            let w = text_width(&label, 3);
            draw_text(&mut img, x + (CELL - w) / 2, y + (CELL - 15) / 2, &label, 3, ink);
        }
    }
    save(&img, path)
}

/// Bar chart of values in [0, 1].
pub fn bars_png(values: &[f64], path: &Path) -> Result<(), CliError> {
    const H: u32 = 200;
    let bar = (640 / values.len().max(1) as u32).clamp(2, 40);
    let mut img = RgbImage::from_pixel(bar * values.len() as u32 + 8, H + 8, Rgb([255, 255, 255]));
    for (k, &v) in values.iter().enumerate() {
        let h = (v.clamp(0.0, 1.0) * H as f64).round() as u32;
        fill(&mut img, 4 + k as u32 * bar, 4 + H - h, bar.saturating_sub(1).max(1), h, Rgb([200, 70, 40]));
    }
    let w = img.width();
    fill(&mut img, 0, H + 4, w, 1, Rgb([0, 0, 0]));
    save(&img, path)
}

fn save(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    img.save(path)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

pub fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .replace("__", "_")
}

/// Per-configuration table of BA, recall and macro F1 (mean ± std, %).
pub fn summary_text(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Task {}", report.task);
    let _ = writeln!(s, "{:<12} {:>15} {:>15} {:>15}", "config", "BA (%)", "Recall (%)", "F1 (%)");
    for c in &report.configurations {
        let a = &c.aggregate;
        let cell = |m: f64, sd: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * sd);
        let _ = writeln!(
            s,
            "{:<12} {:>15} {:>15} {:>15}",
            c.name,
            cell(a.ba_mean, a.ba_std),
            cell(a.recall_mean, a.recall_std),
            cell(a.f1_mean, a.f1_std)
        );
    }
    for c in &report.configurations {
        let _ = writeln!(s, "\n[{}] per fold", c.name);
        for f in &c.folds {
            let _ = writeln!(
                s,
                "  {} fold {} (block {}): BA {:.2}  Recall {:.2}  F1 {:.2}",
                f.subject,
                f.fold,
                f.test_block,
                100.0 * f.ba,
                100.0 * f.recall,
                100.0 * f.f1_macro
            );
        }
    }
    s
}

/// Writes one confusion image per fold and configuration, saliency bars if
/// maps are given, and `summary.txt`. Returns the written paths.
pub fn render_report(report: &Report, saliency: Option<&SaliencyMaps>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Other(format!("cannot create {}: {e}", out.display())))?;
    let mut written = Vec::new();
    for c in &report.configurations {
        for f in &c.folds {
            let m = sum_confusions(f.inner.iter().map(|m| &m.confusion));
            let path = out.join(format!("confusion_{}_{}_fold{}.png", slug(&c.name), f.subject, f.fold));
            confusion_png(&m, &path)?;
            written.push(path);
        }
    }
    if let Some(maps) = saliency {
        for (name, values) in [
            ("eeg_channel", &maps.eeg_channel),
            ("eeg_time", &maps.eeg_time),
            ("em_component", &maps.em_component),
            ("em_time", &maps.em_time),
        ] {
            let path = out.join(format!("saliency_{name}.png"));
            bars_png(values, &path)?;
            written.push(path);
        }
    }
    let path = out.join("summary.txt");
    std::fs::write(&path, summary_text(report))
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_hundred() {
        let pct = row_normalized(&[[90, 5, 5], [2, 7, 1], [0, 0, 0]]);
        for row in &pct[..2] {
            let shown: f64 = row.iter().map(|v| (v * 10.0).round() / 10.0).sum();
            assert!((shown - 100.0).abs() <= 0.1 + 1e-9);
        }
        assert_eq!(pct[2], [0.0; 3]);
        assert_eq!(pct[1][1], 70.0);
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("w/o CG-RM"), "w_o_cg_rm");
        assert_eq!(slug("full"), "full");
    }

    #[test]
    fn heatmap_dimensions_and_shading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        confusion_png(&[[10, 0, 0], [0, 0, 5], [1, 1, 1]], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (56 + 360 + 8, 40 + 360 + 8));
        // top-left cell is 100%, its corner pixel carries the darkest shade
        assert_eq!(*img.get_pixel(58, 42), shade(100.0));
        assert_eq!(*img.get_pixel(58 + 120, 42), shade(0.0));
    }
}
