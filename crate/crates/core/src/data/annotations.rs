//! Per-frame `x,y,w,h` pixel annotations in the GOT-10k and OTB text layouts.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use std::fmt::Write as _;

fn parse_with(text: &str, split: impl Fn(&str) -> Vec<&str>) -> Result<Vec<[f64; 4]>> {
    let lines: Vec<&str> = text.lines().collect();
    let last = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    let mut out = Vec::with_capacity(last);
    for (i, raw) in lines[..last].iter().enumerate() {
        let line = i + 1;
        let fields = split(raw.trim());
        if fields.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let mut v = [0.0; 4];
        for (k, f) in fields.iter().enumerate() {
            v[k] = f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric field `{f}`"),
            })?;
            if !v[k].is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite field `{f}`"),
                });
            }
        }
        if v[2] <= 0.0 || v[3] <= 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("box size {}×{} must be positive", v[2], v[3]),
            });
        }
        out.push(v);
    }
    Ok(out)
}

/// Comma-separated `x,y,w,h` per line.
pub fn parse_got10k_annotations(text: &str) -> Result<Vec<[f64; 4]>> {
    parse_with(text, |l| l.split(',').collect())
}

/// `x,y,w,h` separated by commas, tabs or spaces.
pub fn parse_otb_annotations(text: &str) -> Result<Vec<[f64; 4]>> {
    parse_with(text, |l| {
        l.split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect()
    })
}

/// Canonical GOT-10k text: one `x,y,w,h` line per box.
pub fn format_got10k_annotations(boxes: &[[f64; 4]]) -> String {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(out, "{},{},{},{}", b[0], b[1], b[2], b[3]);
    }
    out
}

pub fn normalize_boxes(boxes: &[[f64; 4]], image_w: f64, image_h: f64) -> Vec<BBox> {
    boxes
        .iter()
        .map(|&[x, y, w, h]| BBox::from_pixel_xywh(x, y, w, h, image_w, image_h))
        .collect()
}
