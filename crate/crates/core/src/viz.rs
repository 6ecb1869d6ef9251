//! Attention heatmap export: JSON matrices and binary PPM images in which
//! darker cells carry more weight.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::AttentionMaps;
use crate::segment::DialogueWindow;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct MatrixExport {
    /// Head index, or `None` for the head mean.
    pub head: Option<usize>,
    pub n: usize,
    pub weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AttentionExport {
    pub dialogue_id: String,
    pub window_index: usize,
    /// Global utterance indices of the window rows.
    pub indices: Vec<usize>,
    pub use_bias: bool,
    pub heads: Vec<MatrixExport>,
    pub mean: MatrixExport,
    pub centers: Option<Vec<f64>>,
    pub widths: Option<Vec<f64>>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

impl AttentionExport {
    pub fn new(window: &DialogueWindow, maps: &AttentionMaps) -> Self {
        let n = window.len();
        AttentionExport {
            dialogue_id: window.dialogue_id.clone(),
            window_index: window.window_index,
            indices: window.indices.clone().collect(),
            use_bias: maps.bias.is_some(),
            heads: maps
                .heads
                .iter()
                .enumerate()
                .map(|(h, t)| MatrixExport {
                    head: Some(h),
                    n,
                    weights: rows_of(t),
                })
                .collect(),
            mean: MatrixExport {
                head: None,
                n,
                weights: rows_of(&maps.head_mean()),
            },
            centers: maps.bias.as_ref().map(|b| b.centers.clone()),
            widths: maps.bias.as_ref().map(|b| b.widths.clone()),
        }
    }
}

/// Binary PPM of a matrix with entries in `[0, 1]`, `cell` pixels per
/// entry. Weight 1 is black and weight 0 is white.
pub fn ppm_bytes(m: &Tensor, cell: usize) -> Result<Vec<u8>> {
    if m.shape().len() != 2 || cell == 0 {
        return Err(Error::invalid("heatmap needs a matrix and a positive cell size"));
    }
    let (rows, cols) = (m.rows(), m.cols());
    let (w, h) = (cols * cell, rows * cell);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let v = m.at(y / cell, x / cell).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - v)).round() as u8;
            out.extend_from_slice(&[shade, shade, shade]);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, m: &Tensor, cell: usize) -> Result<()> {
    let bytes = ppm_bytes(m, cell)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Mean over rows of the weight each row puts on columns more than
/// `distance` positions away.
pub fn mass_beyond(m: &Tensor, distance: usize) -> f64 {
    let rows = m.rows();
    let total: f64 = (0..rows)
        .map(|i| m.row(i).iter().enumerate().filter(|(j, _)| i.abs_diff(*j) > distance).map(|(_, w)| w).sum::<f64>())
        .sum();
    total / rows.max(1) as f64
}
