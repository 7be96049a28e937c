//! CSV, SVG and PPM output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::augment::Rect;
use crate::checkpoint::write_atomic;
use crate::error::{ClabError, Result};
use crate::harness::train::TrainReport;
use crate::metrics::MetricReport;
use crate::tensor::ImageTensor;

pub const TABLE_HEADER: &str = "config,top1,top5,l_inv,l_div";

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub config: String,
    pub top1: f64,
    pub top5: f64,
    pub l_inv: f64,
    pub l_div: f64,
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.config, r.top1, r.top5, r.l_inv, r.l_div
        );
    }
    s
}

pub fn loss_curve_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,batch,loss\n");
    for b in &report.batch_losses {
        let _ = writeln!(s, "{},{},{}", b.epoch, b.batch, b.loss);
    }
    s
}

pub fn per_anchor_csv(report: &MetricReport) -> String {
    let mut s = String::from("anchor,inv,div\n");
    for (i, (a, b)) in report
        .per_anchor_inv
        .iter()
        .zip(&report.per_anchor_div)
        .enumerate()
    {
        let _ = writeln!(s, "{i},{a},{b}");
    }
    s
}

pub fn metric_summary_csv(report: &MetricReport, aug: &str) -> String {
    let c = &report.config;
    format!(
        "aug,encoder,similarity,sigma,views,anchors,l_inv,l_div\n{aug},{},{},{},{},{},{},{}\n",
        c.anchor_encoding,
        c.similarity,
        c.sigma,
        c.views,
        report.anchors,
        report.l_inv,
        report.l_div
    )
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Line chart of `ys` against their index.
pub fn svg_line_chart(title: &str, y_label: &str, ys: &[f64]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    let finite: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if finite.is_empty() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    };
    let span_x = (ys.len().max(2) - 1) as f64;
    let px = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / span_x;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{hi:.4}</text>"#,
        PAD - 4.0,
        PAD + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{lo:.4}</text>"#,
        PAD - 4.0,
        H - PAD
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">batch</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Encodes as binary PPM (P6, maxval 255). Single-channel images are
/// written as grey RGB.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let q = |v: f32| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    for r in 0..img.height() {
        for c in 0..img.width() {
            for k in 0..3 {
                out.push(q(img.get(r, c, k.min(img.channels() - 1))));
            }
        }
    }
    out
}

/// Decodes a binary PPM (P6) with maxval at most 255 into a 3-channel image.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let err = |m: &str| ClabError::format("PPM", m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P6" {
        return Err(err("not a binary PPM (expected P6)"));
    }
    let parse = |f: &[u8]| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("non-numeric header field"))
    };
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(err("only maxval 1..=255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing raster"));
    }
    pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|p| p.checked_mul(3))
        .ok_or_else(|| err("dimensions overflow"))?;
    let raster = &bytes[pos..];
    if raster.len() != need {
        return Err(err(&format!(
            "expected {need} raster bytes, found {}",
            raster.len()
        )));
    }
    let data = raster
        .iter()
        .map(|&b| f32::from(b) / maxval as f32)
        .collect();
    ImageTensor::new(h, w, 3, data)
}

pub fn read_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| ClabError::io(path, e))?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_ppm(img))
}

pub fn rect_csv(kind: &str, lambda: f64, rect: Option<Rect>) -> String {
    let r = rect.unwrap_or(Rect::EMPTY);
    format!(
        "kind,lambda,top,left,height,width\n{kind},{lambda},{},{},{},{}\n",
        r.top, r.left, r.height, r.width
    )
}
