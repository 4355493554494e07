//! Share of a head's first-layer weight mass attending to each encoder
//! layer block: the Frobenius norm of each column block of `W1`, divided
//! by the sum over blocks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::head::HeadParams;
use crate::store::BlockLayout;
use crate::{Factor, MeritError, Result};

/// Encoder layers behind the five default embedding blocks.
pub const DEFAULT_LAYER_LABELS: [&str; 5] = ["3", "4", "5", "6", "23"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub factor: Factor,
    pub fractions: Vec<f64>,
}

/// Per-block Frobenius fractions of a row-major `rows × (n_blocks · block_dim)` matrix.
pub fn attribute(w1: &[f64], rows: usize, n_blocks: usize, block_dim: usize) -> Result<Vec<f64>> {
    let cols = n_blocks * block_dim;
    if n_blocks == 0 || block_dim == 0 || rows == 0 {
        return Err(MeritError::input("attribution needs nonzero rows and blocks"));
    }
    if w1.len() != rows * cols {
        return Err(MeritError::dim(rows * cols, w1.len(), "W1 vs block layout"));
    }
    let mut sq = vec![0.0f64; n_blocks];
    for row in w1.chunks_exact(cols) {
        for (b, block) in row.chunks_exact(block_dim).enumerate() {
            sq[b] += block.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norms: Vec<f64> = sq.into_iter().map(f64::sqrt).collect();
    let total: f64 = norms.iter().sum();
    if total == 0.0 {
        return Err(MeritError::input("W1 is all zeros"));
    }
    Ok(norms.into_iter().map(|n| n / total).collect())
}

pub fn attribute_head(head: &HeadParams, layout: BlockLayout) -> Result<AttributionRow> {
    if layout.dim() != head.in_dim {
        return Err(MeritError::dim(head.in_dim, layout.dim(), "block layout"));
    }
    Ok(AttributionRow {
        factor: head.factor,
        fractions: attribute(&head.w1, head.hidden_dim, layout.n_blocks, layout.block_dim)?,
    })
}

pub fn layer_labels(n_blocks: usize) -> Vec<String> {
    if n_blocks == DEFAULT_LAYER_LABELS.len() {
        DEFAULT_LAYER_LABELS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n_blocks).map(|b| format!("b{b}")).collect()
    }
}

/// Aligned text heatmap: rows are heads, columns are layer blocks.
pub fn render_heatmap(rows: &[AttributionRow]) -> String {
    let n = rows.first().map_or(0, |r| r.fractions.len());
    let labels = layer_labels(n);
    let mut out = format!("{:<8}", "head");
    for l in &labels {
        let _ = write!(out, " {l:>7}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:<8}", r.factor.as_str());
        for f in &r.fractions {
            let _ = write!(out, " {f:>7.4}");
        }
        out.push('\n');
    }
    out
}
