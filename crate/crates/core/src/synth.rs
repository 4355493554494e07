//! Synthetic embeddings with planted factor structure.
//!
//! Each factor owns a disjoint coordinate block of width `factor_dim`.
//! A clip is the sum of its three factor codes placed in their blocks plus
//! isotropic Gaussian noise. Members of a folder for factor `f` share the
//! `f` code and draw fresh codes for the other two factors, so a head can
//! only solve its triplets by reading its own block.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_manifest, split_folders, FolderEntry, Split, TripletManifest};
use crate::store::{write_meta, write_store, BlockLayout, ClipMeta, EmbeddingRecord, MetaTable};
use crate::{derive_seed, Factor, MeritError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub in_dim: usize,
    /// Layer blocks in the emitted store layout; must divide `in_dim`.
    pub n_blocks: usize,
    pub factor_dim: usize,
    pub n_folders: usize,
    pub k: usize,
    pub noise_sigma: f64,
    /// Fraction of a folder's shared code mixed into one off-factor block.
    pub cross_factor_leak: f64,
    pub split_ratio: f64,
    /// Planted class labels per factor dataset (round-robin over folders).
    pub n_classes: usize,
    /// Apply a random orthogonal rotation to every vector.
    pub rotate: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            in_dim: 256,
            n_blocks: 4,
            factor_dim: 16,
            n_folders: 200,
            k: 3,
            noise_sigma: 0.05,
            cross_factor_leak: 0.0,
            split_ratio: 0.9,
            n_classes: 4,
            rotate: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor_dim == 0 || 3 * self.factor_dim > self.in_dim {
            return Err(MeritError::config(format!(
                "need 1 <= 3 x factor_dim <= in_dim, got factor_dim {} and in_dim {}",
                self.factor_dim, self.in_dim
            )));
        }
        if self.n_blocks == 0 || !self.in_dim.is_multiple_of(self.n_blocks) {
            return Err(MeritError::config(format!(
                "n_blocks {} must divide in_dim {}",
                self.n_blocks, self.in_dim
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(MeritError::config("noise_sigma must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.cross_factor_leak) {
            return Err(MeritError::config("cross_factor_leak must lie in [0, 1)"));
        }
        if self.k == 0 || self.n_folders < 2 || self.n_classes == 0 {
            return Err(MeritError::config("need k >= 1, n_folders >= 2 and n_classes >= 1"));
        }
        let n_train = ((self.split_ratio * self.n_folders as f64) + 1e-9).floor() as usize;
        if n_train < 2 || self.n_folders - n_train.min(self.n_folders) < 2 {
            return Err(MeritError::config(format!(
                "split ratio {} over {} folders must leave at least 2 folders per split",
                self.split_ratio, self.n_folders
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> BlockLayout {
        BlockLayout {
            n_blocks: self.n_blocks,
            block_dim: self.in_dim / self.n_blocks,
        }
    }

    /// Start coordinate of each factor's block (melody, rhythm, timbre).
    /// With at least three layer blocks wide enough, melody sits in the
    /// last layer block, rhythm in the first and timbre in the middle one.
    pub fn factor_offsets(&self) -> [usize; 3] {
        let bd = self.in_dim / self.n_blocks.max(1);
        if self.n_blocks >= 3 && self.factor_dim <= bd {
            [(self.n_blocks - 1) * bd, 0, (self.n_blocks / 2) * bd]
        } else {
            [0, self.factor_dim, 2 * self.factor_dim]
        }
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MeritError::io(path, e))?;
        let cfg: SynthConfig = toml::from_str(&text).map_err(|e| MeritError::parse("synth config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Off-factor block that receives a folder's leaked code.
pub fn leak_target(f: Factor) -> Factor {
    match f {
        Factor::Melody => Factor::Rhythm,
        Factor::Rhythm => Factor::Melody,
        Factor::Timbre => Factor::Melody,
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub records: Vec<EmbeddingRecord>,
    pub metas: MetaTable,
    pub folders: [Vec<FolderEntry>; 3],
    pub train: [TripletManifest; 3],
    pub test: [TripletManifest; 3],
}

fn code(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian matrix), row-major.
fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut q: Vec<f64> = Vec::with_capacity(n * n);
    while q.len() < n * n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for prev in q.chunks_exact(n) {
                let p = crate::linalg::dot(prev, &v);
                crate::linalg::axpy(-p, prev, &mut v);
            }
        }
        let nv = crate::linalg::norm(&v);
        if nv > 1e-8 {
            q.extend(v.into_iter().map(|x| x / nv));
        }
    }
    q
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let d = cfg.factor_dim;
    let offsets = cfg.factor_offsets();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| MeritError::config(e.to_string()))?;
    let rotation = cfg.rotate.then(|| random_rotation(&mut rng, cfg.in_dim));
    let mix = (1.0 - cfg.cross_factor_leak * cfg.cross_factor_leak).sqrt();

    let mut records = Vec::new();
    let mut metas = MetaTable::new();
    let mut folders: [Vec<FolderEntry>; 3] = Default::default();
    for f in Factor::ALL {
        for i in 0..cfg.n_folders {
            let folder_id = format!("{f}-f{i:04}");
            let shared = code(&mut rng, d);
            let mut ids = Vec::with_capacity(cfg.k + 1);
            for m in 0..=cfg.k {
                let clip_id = if m == 0 {
                    format!("{folder_id}-a")
                } else {
                    format!("{folder_id}-p{}", m - 1)
                };
                let mut v = vec![0.0f64; cfg.in_dim];
                for g in Factor::ALL {
                    let c = if g == f {
                        shared.clone()
                    } else {
                        let fresh = code(&mut rng, d);
                        if g == leak_target(f) && cfg.cross_factor_leak > 0.0 {
                            fresh
                                .iter()
                                .zip(&shared)
                                .map(|(x, s)| mix * x + cfg.cross_factor_leak * s)
                                .collect()
                        } else {
                            fresh
                        }
                    };
                    v[offsets[g.index()]..offsets[g.index()] + d].copy_from_slice(&c);
                }
                if cfg.noise_sigma > 0.0 {
                    for x in v.iter_mut() {
                        *x += noise.sample(&mut rng);
                    }
                }
                if let Some(q) = &rotation {
                    v = q.chunks_exact(cfg.in_dim).map(|row| crate::linalg::dot(row, &v)).collect();
                }
                records.push(EmbeddingRecord::new(clip_id.clone(), v.iter().map(|&x| x as f32).collect()));
                metas.insert(
                    clip_id.clone(),
                    ClipMeta {
                        clip_id: clip_id.clone(),
                        folder_id: Some(folder_id.clone()),
                        class_label: Some(format!("{f}-c{}", i % cfg.n_classes)),
                        source_song_id: Some(format!("song-{clip_id}")),
                    },
                );
                ids.push(clip_id);
            }
            let anchor_id = ids.remove(0);
            folders[f.index()].push(FolderEntry {
                folder_id,
                anchor_id,
                positive_ids: ids,
                factor: f,
            });
        }
    }

    let mut train = Vec::with_capacity(3);
    let mut test = Vec::with_capacity(3);
    for f in Factor::ALL {
        let fi = f.index() as u64;
        let (tr, te) = split_folders(&folders[f.index()], cfg.split_ratio, derive_seed(cfg.seed, 100 + fi))?;
        train.push(build_manifest(&tr, f, Split::Train, derive_seed(cfg.seed, 200 + 2 * fi), Some(cfg.in_dim))?);
        test.push(build_manifest(&te, f, Split::Test, derive_seed(cfg.seed, 201 + 2 * fi), Some(cfg.in_dim))?);
    }
    Ok(SynthData {
        config: cfg.clone(),
        records,
        metas,
        folders,
        train: train.try_into().expect("three factors"),
        test: test.try_into().expect("three factors"),
    })
}

/// File names written by [`SynthData::write_dir`].
pub struct SynthPaths {
    pub store: PathBuf,
    pub meta: PathBuf,
    pub train: [PathBuf; 3],
    pub test: [PathBuf; 3],
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        SynthPaths {
            store: dir.join("store.bin"),
            meta: dir.join("meta.json"),
            train: Factor::ALL.map(|f| dir.join(format!("{f}.train.jsonl"))),
            test: Factor::ALL.map(|f| dir.join(format!("{f}.test.jsonl"))),
        }
    }
}

impl SynthData {
    pub fn write_dir(&self, dir: &Path) -> Result<SynthPaths> {
        fs::create_dir_all(dir).map_err(|e| MeritError::io(dir, e))?;
        let paths = SynthPaths::in_dir(dir);
        write_store(&self.records, self.config.layout(), &paths.store)?;
        write_meta(&self.metas, &paths.meta)?;
        for f in 0..3 {
            self.train[f].write(&paths.train[f])?;
            self.test[f].write(&paths.test[f])?;
        }
        Ok(paths)
    }
}
