//! Training loop for one factor head: AdamW with decoupled weight decay,
//! a per-epoch cosine-annealed learning rate and seeded reshuffling.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Split, TripletManifest};
use crate::head::{init_head, HeadParams, DEFAULT_HIDDEN_DIM, DEFAULT_OUT_DIM};
use crate::loss::{loss_and_grads_indexed, HeadGrads, LossConfig};
use crate::store::EmbeddingStore;
use crate::{MeritError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 1e-5,
            weight_decay: 1e-4,
            batch_size: 1024,
            epochs: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(MeritError::config(format!(
                "need 0 <= lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.batch_size == 0 {
            return Err(MeritError::config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(MeritError::config("epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(MeritError::config("Adam betas must lie in [0, 1)"));
        }
        if self.eps_adam.is_nan() || self.eps_adam <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(MeritError::config("eps_adam must be > 0 and weight_decay >= 0"));
        }
        self.loss.validate()
    }

    /// Reads a TOML file whose keys are the field names of this struct;
    /// missing keys keep their defaults.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MeritError::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| MeritError::parse("train config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden_dim: DEFAULT_HIDDEN_DIM,
            out_dim: DEFAULT_OUT_DIM,
        }
    }
}

/// `η(t) = lr_min + ½ (lr_max − lr_min)(1 + cos(π t / epochs))`
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs || cfg.epochs == 0 {
        return Err(MeritError::input(format!(
            "epoch {epoch} outside [0, {}]",
            cfg.epochs
        )));
    }
    let phase = PI * epoch as f64 / cfg.epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: HeadGrads,
    pub v: HeadGrads,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &HeadParams) -> Self {
        OptimizerState {
            m: HeadGrads::zeros_like(params),
            v: HeadGrads::zeros_like(params),
            t: 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, decay: f64, cfg: &TrainConfig, t: u64) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let shrink = 1.0 - lr * decay;
    for i in 0..p.len() {
        if decay != 0.0 {
            p[i] *= shrink;
        }
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps_adam);
    }
}

/// One AdamW step. The hidden bias `b1` is exempt from weight decay.
pub fn adamw_step(
    params: &mut HeadParams,
    grads: &HeadGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes = [
        (params.w1.len(), grads.w1.len(), state.m.w1.len(), state.v.w1.len()),
        (params.b1.len(), grads.b1.len(), state.m.b1.len(), state.v.b1.len()),
        (params.w2.len(), grads.w2.len(), state.m.w2.len(), state.v.w2.len()),
    ];
    for (p, g, m, v) in shapes {
        if g != p || m != p || v != p {
            return Err(MeritError::dim(p, g.max(m).max(v), "optimizer shapes"));
        }
    }
    state.t += 1;
    let t = state.t;
    let wd = cfg.weight_decay;
    adamw_update(&mut params.w1, &grads.w1, &mut state.m.w1, &mut state.v.w1, lr, wd, cfg, t);
    adamw_update(&mut params.b1, &grads.b1, &mut state.m.b1, &mut state.v.b1, lr, 0.0, cfg, t);
    adamw_update(&mut params.w2, &grads.w2, &mut state.m.w2, &mut state.v.w2, lr, wd, cfg, t);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,lr,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{:.6}", e.epoch, e.loss, e.lr, e.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| MeritError::io(path, e))
    }
}

/// Trains one head on a train-split manifest over cached embeddings.
///
/// Runs `epochs × ⌈N / batch_size⌉` optimizer steps; the last partial
/// batch is kept. Epoch `e` shuffles with seed `seed ^ e`, and the head
/// is initialized from `seed`, so results depend only on config and data.
pub fn train_head(
    manifest: &TripletManifest,
    store: &EmbeddingStore,
    head_cfg: &HeadConfig,
    cfg: &TrainConfig,
) -> Result<(HeadParams, TrainHistory)> {
    cfg.validate()?;
    if manifest.split != Split::Train {
        return Err(MeritError::input(format!(
            "training needs a train manifest, got {}",
            manifest.split
        )));
    }
    if manifest.triplets.is_empty() {
        return Err(MeritError::input("train manifest has no triplets"));
    }
    let triplets: Vec<[usize; 3]> = manifest
        .triplets
        .iter()
        .map(|t| {
            Ok([
                store.resolve(&t.anchor_id)?,
                store.resolve(&t.positive_id)?,
                store.resolve(&t.negative_id)?,
            ])
        })
        .collect::<Result<_>>()?;

    let mut params = init_head(store.dim(), head_cfg.hidden_dim, head_cfg.out_dim, manifest.factor, cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut batch: Vec<[usize; 3]> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| triplets[i]));
            let (loss, grads) = loss_and_grads_indexed(&params, |row| store.vector(row), &batch, &cfg.loss)
                .map_err(|e| match e {
                    MeritError::DegenerateOutput { norm, eps, context } => MeritError::DegenerateOutput {
                        norm,
                        eps,
                        context: format!("epoch {epoch}, batch {bi}, {context}"),
                    },
                    other => other,
                })?;
            loss_sum += loss * batch.len() as f64;
            adamw_step(&mut params, &grads, &mut state, lr, cfg)?;
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / triplets.len() as f64,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Triplet;
    use crate::store::{BlockLayout, EmbeddingRecord};
    use crate::Factor;

    fn scalar_head(p: f64) -> HeadParams {
        HeadParams {
            factor: Factor::Melody,
            in_dim: 1,
            hidden_dim: 1,
            out_dim: 1,
            w1: vec![p],
            b1: vec![p],
            w2: vec![p],
        }
    }

    fn grads(g: f64) -> HeadGrads {
        HeadGrads { w1: vec![g], b1: vec![g], w2: vec![g] }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-3);
        assert!((cosine_lr(100, &cfg).unwrap() - 5.05e-4).abs() <= 1e-15);
        assert!((cosine_lr(200, &cfg).unwrap() - 1e-5).abs() <= 1e-15);
        assert!(cosine_lr(201, &cfg).is_err());
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar_head(0.0);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(1.0), &mut s, 1e-3, &cfg).unwrap();
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((p.w1[0] - expect).abs() < 1e-18);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar_head(0.7);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 1e-3, &cfg).unwrap();
        assert_eq!(p, scalar_head(0.7));
    }

    #[test]
    fn decay_shrinks_weights_but_not_bias() {
        let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
        let mut p = scalar_head(0.7);
        let mut s = OptimizerState::new(&p);
        adamw_step(&mut p, &grads(0.0), &mut s, 1e-2, &cfg).unwrap();
        assert_eq!(p.w1[0], 0.7 * (1.0 - 1e-2 * 0.1));
        assert_eq!(p.w2[0], 0.7 * (1.0 - 1e-2 * 0.1));
        assert_eq!(p.b1[0], 0.7);
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let cfg = TrainConfig::default();
        let mut p = scalar_head(0.1);
        let mut s = OptimizerState::new(&p);
        let g = HeadGrads { w1: vec![0.0; 2], b1: vec![0.0], w2: vec![0.0] };
        assert!(adamw_step(&mut p, &g, &mut s, 1e-3, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = toml::from_str("epochs = 5\nseed = 9\n[loss]\ngamma = 4.0\n").unwrap();
        assert_eq!(parsed.epochs, 5);
        assert_eq!(parsed.loss.gamma, 4.0);
        assert_eq!(parsed.loss.margin, 0.2);
        assert!(toml::from_str::<TrainConfig>("epoch = 5\n").is_err());
    }

    fn tiny_problem() -> (TripletManifest, EmbeddingStore) {
        let dim = 6;
        let records: Vec<EmbeddingRecord> = (0..12)
            .map(|i| {
                let v = (0..dim).map(|j| (((i * 7 + j * 3) % 11) as f32 - 5.0) / 5.0).collect();
                EmbeddingRecord::new(format!("c{i}"), v)
            })
            .collect();
        let store = EmbeddingStore::with_layout(&records, BlockLayout::single(dim)).unwrap();
        let triplets = (0..10)
            .map(|i| Triplet::new(format!("c{i}"), format!("c{}", i + 1), format!("c{}", (i + 5) % 12)))
            .collect();
        let manifest = TripletManifest {
            factor: Factor::Rhythm,
            split: Split::Train,
            seed: 0,
            folder_ids: vec![],
            dim: Some(dim),
            triplets,
        };
        (manifest, store)
    }

    #[test]
    fn training_is_deterministic_and_records_schedule() {
        let (manifest, store) = tiny_problem();
        let head = HeadConfig { hidden_dim: 8, out_dim: 4 };
        let cfg = TrainConfig { epochs: 7, batch_size: 4, seed: 3, ..Default::default() };
        let (p1, h1) = train_head(&manifest, &store, &head, &cfg).unwrap();
        let (p2, h2) = train_head(&manifest, &store, &head, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1.losses(), h2.losses());
        assert_eq!(h1.epochs.len(), 7);
        for rec in &h1.epochs {
            assert_eq!(rec.lr, cosine_lr(rec.epoch, &cfg).unwrap());
        }
        assert_eq!(h1.epochs.last().unwrap().lr, cosine_lr(6, &cfg).unwrap());
        assert!(h1.to_csv().starts_with("epoch,loss,lr,seconds\n0,"));
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let (mut manifest, store) = tiny_problem();
        let head = HeadConfig { hidden_dim: 4, out_dim: 2 };
        let zero_epochs = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train_head(&manifest, &store, &head, &zero_epochs).is_err());
        manifest.split = Split::Test;
        assert!(train_head(&manifest, &store, &head, &TrainConfig::default()).is_err());
        manifest.split = Split::Train;
        manifest.triplets[0].negative_id = "missing".into();
        assert!(matches!(
            train_head(&manifest, &store, &head, &TrainConfig::default()),
            Err(MeritError::UnknownId(_))
        ));
    }
}
