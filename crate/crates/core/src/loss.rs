//! Circle Loss on triplet cosine similarities and its analytic gradients
//! through the projection head.
//!
//! With `O_p = 1 - m`, `α_p = max(0, O_p - S_p)` and `α_n = max(0, S_n - m)`:
//!
//! ```text
//! L = softplus(γ · [α_n (S_n - m) + α_p (O_p - S_p)])
//! ```
//!
//! The weights `α_p`, `α_n` are treated as constants when differentiating.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::head::{forward, ForwardTrace, HeadParams};
use crate::linalg::{axpy, dot};
use crate::{MeritError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSign {
    /// Worse positives and worse negatives both raise the loss.
    #[default]
    Corrected,
    /// The alternative sign on the positive term,
    /// `γ · [α_n (S_n - m) - α_p (O_p - S_p)]`, kept for comparison runs.
    /// Spelled `paper` on the command line and in configs.
    #[serde(rename = "paper")]
    Printed,
}

impl FromStr for LossSign {
    type Err = MeritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(LossSign::Corrected),
            "paper" => Ok(LossSign::Printed),
            other => Err(MeritError::input(format!("unknown loss sign {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    pub margin: f64,
    pub sign: LossSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 10.0,
            margin: 0.2,
            sign: LossSign::Corrected,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(MeritError::config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(MeritError::config(format!("margin must lie in (0, 1), got {}", self.margin)));
        }
        Ok(())
    }

    /// Positive optimum `O_p = 1 - m`.
    pub fn o_p(&self) -> f64 {
        1.0 - self.margin
    }

    /// Slack weights `(α_p, α_n)`.
    pub fn weights(&self, s_p: f64, s_n: f64) -> (f64, f64) {
        ((self.o_p() - s_p).max(0.0), (s_n - self.margin).max(0.0))
    }

    fn inner(&self, s_p: f64, s_n: f64) -> f64 {
        let (a_p, a_n) = self.weights(s_p, s_n);
        let pos = a_p * (self.o_p() - s_p);
        let neg = a_n * (s_n - self.margin);
        match self.sign {
            LossSign::Corrected => self.gamma * (neg + pos),
            LossSign::Printed => self.gamma * (neg - pos),
        }
    }

    fn terms(&self, s_p: f64, s_n: f64) -> (f64, f64, f64) {
        let (a_p, a_n) = self.weights(s_p, s_n);
        let x = self.inner(s_p, s_n);
        let s = sigmoid(x);
        let d_p = match self.sign {
            LossSign::Corrected => -self.gamma * a_p * s,
            LossSign::Printed => self.gamma * a_p * s,
        };
        // `+ 0.0` maps -0.0 to 0.0.
        (softplus(x), d_p + 0.0, self.gamma * a_n * s)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn circle_loss(s_p: f64, s_n: f64, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    Ok(cfg.terms(s_p, s_n).0)
}

/// `(dL/dS_p, dL/dS_n)` with the slack weights held constant.
pub fn loss_grad_sims(s_p: f64, s_n: f64, cfg: &LossConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let (_, d_p, d_n) = cfg.terms(s_p, s_n);
    Ok((d_p, d_n))
}

/// `B` triplets of encoder embeddings, each matrix `B × in_dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    in_dim: usize,
    anchors: Vec<f64>,
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl TripletBatch {
    pub fn new(in_dim: usize, anchors: Vec<f64>, positives: Vec<f64>, negatives: Vec<f64>) -> Result<Self> {
        if in_dim == 0 {
            return Err(MeritError::input("batch in_dim must be >= 1"));
        }
        if anchors.is_empty() || !anchors.len().is_multiple_of(in_dim) {
            return Err(MeritError::input(format!(
                "anchor matrix of {} values is not a nonempty multiple of {in_dim}",
                anchors.len()
            )));
        }
        if positives.len() != anchors.len() || negatives.len() != anchors.len() {
            return Err(MeritError::input("anchor, positive and negative batches differ in size"));
        }
        Ok(TripletBatch {
            in_dim,
            anchors,
            positives,
            negatives,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len() / self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// Row `i` of the stacked `[anchors; positives; negatives]` matrix.
    fn row(&self, i: usize) -> &[f64] {
        let b = self.len();
        let (m, r) = match i / b {
            0 => (&self.anchors, i),
            1 => (&self.positives, i - b),
            _ => (&self.negatives, i - 2 * b),
        };
        &m[r * self.in_dim..(r + 1) * self.in_dim]
    }
}

/// Gradients with the same shapes as [`HeadParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        HeadGrads {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).all(|&g| g == 0.0)
    }
}

/// Mean Circle Loss over a batch and its gradients w.r.t. `W1`, `b1`, `W2`.
pub fn batch_loss_and_grads(params: &HeadParams, batch: &TripletBatch, cfg: &LossConfig) -> Result<(f64, HeadGrads)> {
    cfg.validate()?;
    if batch.in_dim() != params.in_dim {
        return Err(MeritError::dim(params.in_dim, batch.in_dim(), "batch embeddings"));
    }
    let b = batch.len();
    let triplets: Vec<[usize; 3]> = (0..b).map(|i| [i, b + i, 2 * b + i]).collect();
    loss_and_grads_indexed(params, |i| batch.row(i), &triplets, cfg)
}

/// Batch loss over triplets that index into a shared embedding table.
/// Each distinct clip is forwarded and backpropagated once; clips are
/// visited in order of first appearance so the reduction order is fixed.
pub(crate) fn loss_and_grads_indexed<'a, F>(
    params: &HeadParams,
    rows: F,
    triplets: &[[usize; 3]],
    cfg: &LossConfig,
) -> Result<(f64, HeadGrads)>
where
    F: Fn(usize) -> &'a [f64],
{
    if triplets.is_empty() {
        return Err(MeritError::input("empty batch"));
    }
    let mut slot_of: HashMap<usize, usize> = HashMap::with_capacity(triplets.len() * 3);
    let mut clips: Vec<usize> = Vec::new();
    let slots: Vec<[usize; 3]> = triplets
        .iter()
        .map(|t| {
            t.map(|row| {
                *slot_of.entry(row).or_insert_with(|| {
                    clips.push(row);
                    clips.len() - 1
                })
            })
        })
        .collect();

    let traces: Vec<ForwardTrace> = clips
        .iter()
        .enumerate()
        .map(|(slot, &row)| {
            forward(params, rows(row)).map_err(|e| match e {
                MeritError::DegenerateOutput { norm, eps, .. } => MeritError::DegenerateOutput {
                    norm,
                    eps,
                    context: format!("batch clip {slot} (row {row})"),
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / triplets.len() as f64;
    let out = params.out_dim;
    let mut grad_y = vec![0.0; clips.len() * out];
    let mut total = 0.0;
    for &[a, p, n] in &slots {
        let (ya, yp, yn) = (&traces[a].y, &traces[p].y, &traces[n].y);
        let (loss, d_p, d_n) = cfg.terms(dot(ya, yp), dot(ya, yn));
        total += loss;
        if d_p == 0.0 && d_n == 0.0 {
            continue;
        }
        let (gp, gn) = (d_p * scale, d_n * scale);
        axpy(gp, yp, &mut grad_y[a * out..(a + 1) * out]);
        axpy(gn, yn, &mut grad_y[a * out..(a + 1) * out]);
        axpy(gp, ya, &mut grad_y[p * out..(p + 1) * out]);
        axpy(gn, ya, &mut grad_y[n * out..(n + 1) * out]);
    }

    let mut grads = HeadGrads::zeros_like(params);
    let hidden = params.hidden_dim;
    let mut dh = vec![0.0; hidden];
    for (slot, trace) in traces.iter().enumerate() {
        let gy = &grad_y[slot * out..(slot + 1) * out];
        if gy.iter().all(|&g| g == 0.0) {
            continue;
        }
        // d/du of u/‖u‖ is (I - y yᵀ)/‖u‖.
        let proj = dot(&trace.y, gy);
        let du: Vec<f64> = gy
            .iter()
            .zip(&trace.y)
            .map(|(g, y)| (g - y * proj) / trace.norm)
            .collect();
        dh.iter_mut().for_each(|x| *x = 0.0);
        for (r, &d) in du.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, &trace.h, &mut grads.w2[r * hidden..(r + 1) * hidden]);
            axpy(d, params.w2_row(r), &mut dh);
        }
        let z = rows(clips[slot]);
        for (r, &d) in dh.iter().enumerate() {
            if trace.a1[r] <= 0.0 || d == 0.0 {
                continue;
            }
            grads.b1[r] += d;
            axpy(d, z, &mut grads.w1[r * params.in_dim..(r + 1) * params.in_dim]);
        }
    }
    Ok((total * scale, grads))
}
