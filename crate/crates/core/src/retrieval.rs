//! Per-factor cosine indexes, top-k retrieval exposing every factor score,
//! and score fusion.
//!
//! Exact brute-force search is the reference. The approximate mode is an
//! inverted-file index: spherical k-means centroids partition the unit
//! vectors, and a query scans only the lists of its `nprobe` nearest
//! centroids.
//!
//! Index file layout (little-endian):
//!
//! ```text
//! "MERITIDX" | version u32 | factor u32 | dim u32 | count u64
//! count × [ id_len u16 | id bytes | dim × f32 ]
//! ```

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::dataset::Triplet;
use crate::eval::{score_triplets, EvalOptions};
use crate::head::{HeadParams, Projector, UNIT_TOLERANCE};
use crate::linalg::{dot, norm};
use crate::store::EmbeddingStore;
use crate::{Factor, MeritError, Result};

pub const INDEX_MAGIC: &[u8; 8] = b"MERITIDX";
pub const INDEX_VERSION: u32 = 1;
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FusionStrategy {
    Mean,
    WeightedMean { weights: [f64; 3] },
    /// Cosine between the l2-normalized concatenations `[y_mel; y_rhy; y_tim]`.
    Concat,
    Product,
}

impl FusionStrategy {
    pub fn validate(&self) -> Result<()> {
        if let FusionStrategy::WeightedMean { weights } = self {
            if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
                return Err(MeritError::config(format!("fusion weights must be >= 0, got {weights:?}")));
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(MeritError::config(format!("fusion weights must sum to 1, got {sum}")));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::Mean => "mean",
            FusionStrategy::WeightedMean { .. } => "wmean",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Product => "product",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = MeritError;

    /// `mean`, `concat`, `product`, or `wmean` (equal weights unless set
    /// separately).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionStrategy::Mean),
            "wmean" => Ok(FusionStrategy::WeightedMean {
                weights: [1.0 / 3.0; 3],
            }),
            "concat" => Ok(FusionStrategy::Concat),
            "product" => Ok(FusionStrategy::Product),
            other => Err(MeritError::input(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Fuses per-factor similarities `(S_mel, S_rhy, S_tim)`.
///
/// For `Concat` this is the closed form: both concatenations of unit
/// per-factor vectors have norm √3, so their cosine is the plain mean.
/// [`concat_similarity`] computes the same value from the vectors.
pub fn fuse(scores: [f64; 3], strategy: &FusionStrategy) -> Result<f64> {
    strategy.validate()?;
    Ok(match strategy {
        FusionStrategy::Mean | FusionStrategy::Concat => (scores[0] + scores[1] + scores[2]) / 3.0,
        FusionStrategy::WeightedMean { weights } => {
            weights[0] * scores[0] + weights[1] * scores[1] + weights[2] * scores[2]
        }
        FusionStrategy::Product => scores[0] * scores[1] * scores[2],
    })
}

/// Cosine between the l2-normalized concatenations of two per-factor
/// vector triples.
pub fn concat_similarity(a: [&[f64]; 3], b: [&[f64]; 3]) -> f64 {
    let cat = |v: [&[f64]; 3]| -> Vec<f64> { v.iter().flat_map(|x| x.iter().copied()).collect() };
    let (ca, cb) = (cat(a), cat(b));
    dot(&ca, &cb) / (norm(&ca) * norm(&cb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndexMode {
    Exact,
    /// `nlist == 0` picks `ceil(sqrt(n))`; `nprobe == 0` picks `ceil(nlist / 2)`.
    Approximate { nlist: usize, nprobe: usize, seed: u64 },
}

impl IndexMode {
    pub fn approximate() -> Self {
        IndexMode::Approximate {
            nlist: 0,
            nprobe: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct InvertedLists {
    dim: usize,
    centroids: Vec<f64>,
    lists: Vec<Vec<usize>>,
    nprobe: usize,
}

const KMEANS_ITERS: usize = 12;

impl InvertedLists {
    fn build(data: &[f64], dim: usize, nlist: usize, nprobe: usize, seed: u64) -> Self {
        let n = data.len() / dim;
        let nlist = if nlist == 0 { (n as f64).sqrt().ceil() as usize } else { nlist }.clamp(1, n.max(1));
        let nprobe = if nprobe == 0 { nlist.div_ceil(2) } else { nprobe }.clamp(1, nlist);
        let row = |i: usize| &data[i * dim..(i + 1) * dim];

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids: Vec<f64> = sample(&mut rng, n, nlist)
            .into_iter()
            .flat_map(|i| row(i).to_vec())
            .collect();
        let mut assign = vec![0usize; n];
        for _ in 0..KMEANS_ITERS {
            for (i, a) in assign.iter_mut().enumerate() {
                *a = nearest(&centroids, dim, row(i));
            }
            let mut sums = vec![0.0; nlist * dim];
            for (i, &a) in assign.iter().enumerate() {
                for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                    *s += x;
                }
            }
            for c in 0..nlist {
                let s = &sums[c * dim..(c + 1) * dim];
                let n = norm(s);
                // Empty or cancelling clusters keep their previous centroid.
                if n > 1e-12 {
                    for (dst, x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(s) {
                        *dst = x / n;
                    }
                }
            }
        }
        let mut lists = vec![Vec::new(); nlist];
        for i in 0..n {
            lists[nearest(&centroids, dim, row(i))].push(i);
        }
        InvertedLists {
            dim,
            centroids,
            lists,
            nprobe,
        }
    }

    fn candidates(&self, q: &[f64]) -> Vec<usize> {
        let mut scored: Vec<(usize, f64)> = self
            .centroids
            .chunks_exact(self.dim)
            .map(|c| dot(c, q))
            .enumerate()
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut out: Vec<usize> = scored[..self.nprobe]
            .iter()
            .flat_map(|(c, _)| self.lists[*c].iter().copied())
            .collect();
        out.sort_unstable();
        out
    }
}

fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (c, cent) in centroids.chunks_exact(dim).enumerate() {
        let s = dot(cent, x);
        if s > best.1 {
            best = (c, s);
        }
    }
    best.0
}

/// Descending score, ascending row on ties.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    if scored.len() > k && k > 0 {
        scored.select_nth_unstable_by(k - 1, rank_order);
        scored.truncate(k);
    }
    scored.sort_by(rank_order);
    scored.truncate(k);
    scored
}

/// Unit vectors of one factor, keyed by clip id.
#[derive(Debug, Clone)]
pub struct FactorIndex {
    factor: Factor,
    dim: usize,
    ids: Vec<String>,
    data: Vec<f64>,
    lookup: HashMap<String, usize>,
    ivf: Option<InvertedLists>,
}

impl FactorIndex {
    pub fn from_vectors(factor: Factor, dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(MeritError::input("index dim must be >= 1"));
        }
        let mut ids = Vec::with_capacity(entries.len());
        let mut data = Vec::with_capacity(entries.len() * dim);
        let mut lookup = HashMap::with_capacity(entries.len());
        for (id, v) in entries {
            if v.len() != dim {
                return Err(MeritError::dim(dim, v.len(), format!("index entry {id:?}")));
            }
            let n = norm(&v);
            if n.is_nan() || (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(MeritError::input(format!("index entry {id:?} has norm {n}, expected 1")));
            }
            if lookup.insert(id.clone(), ids.len()).is_some() {
                return Err(MeritError::DuplicateId(id));
            }
            ids.push(id);
            data.extend(v);
        }
        Ok(FactorIndex {
            factor,
            dim,
            ids,
            data,
            lookup,
            ivf: None,
        })
    }

    pub fn with_mode(mut self, mode: IndexMode) -> Self {
        self.ivf = match mode {
            IndexMode::Exact => None,
            IndexMode::Approximate { .. } if self.is_empty() => None,
            IndexMode::Approximate { nlist, nprobe, seed } => {
                Some(InvertedLists::build(&self.data, self.dim, nlist, nprobe, seed))
            }
        };
        self
    }

    pub fn factor(&self) -> Factor {
        self.factor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_approximate(&self) -> bool {
        self.ivf.is_some()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn get(&self, clip_id: &str) -> Option<&[f64]> {
        self.lookup.get(clip_id).map(|&r| self.vector(r))
    }

    /// Top-`k` `(row, cosine)` pairs, best first.
    pub fn search(&self, q: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(MeritError::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(MeritError::dim(self.dim, q.len(), "query vector"));
        }
        let scored: Vec<(usize, f64)> = match &self.ivf {
            None => (0..self.len()).map(|r| (r, dot(self.vector(r), q))).collect(),
            Some(ivf) => ivf
                .candidates(q)
                .into_iter()
                .map(|r| (r, dot(self.vector(r), q)))
                .collect(),
        };
        Ok(top_k(scored, k))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u32(self.factor.tag());
        w.u32(self.dim as u32);
        w.u64(self.len() as u64);
        for (r, id) in self.ids.iter().enumerate() {
            w.id(id)?;
            w.f32s(self.vector(r).iter().map(|&x| x as f32));
        }
        Ok(w.buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(INDEX_MAGIC)?;
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(MeritError::UnsupportedVersion(version));
        }
        let factor = Factor::from_tag(r.u32("factor")?)?;
        let dim = r.u32("dim")? as usize;
        let count = r.u64("count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let id = r.id("index id")?;
            let v = r.f32s(dim, "index vector")?.into_iter().map(f64::from).collect();
            entries.push((id, v));
        }
        if r.remaining() != 0 {
            return Err(MeritError::CountMismatch {
                header: count,
                actual: count + 1,
            });
        }
        FactorIndex::from_vectors(factor, dim, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(|e| MeritError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MeritError::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Projects every store clip through the head. Degenerate projections
/// are skipped and their ids returned.
pub fn build_index(head: &HeadParams, store: &EmbeddingStore, mode: IndexMode) -> Result<(FactorIndex, Vec<String>)> {
    if store.is_empty() {
        return Err(MeritError::EmptyStore);
    }
    let mut entries = Vec::with_capacity(store.len());
    let mut skipped = Vec::new();
    for (row, id) in store.ids().iter().enumerate() {
        match head.project(store.vector(row)) {
            Ok(y) => entries.push((id.clone(), y)),
            Err(MeritError::DegenerateOutput { .. }) => skipped.push(id.clone()),
            Err(e) => return Err(e),
        }
    }
    let index = FactorIndex::from_vectors(head.factor, head.out_dim, entries)?.with_mode(mode);
    Ok((index, skipped))
}

/// One retrieved clip with all three factor similarities to the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub clip_id: String,
    pub s_mel: f64,
    pub s_rhy: f64,
    pub s_tim: f64,
    pub fused: f64,
}

impl Candidate {
    pub fn score(&self, f: Factor) -> f64 {
        match f {
            Factor::Melody => self.s_mel,
            Factor::Rhythm => self.s_rhy,
            Factor::Timbre => self.s_tim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub strategy: FusionStrategy,
    /// Top-k per factor index (melody, rhythm, timbre), each sorted by its
    /// own factor score.
    pub per_factor: [Vec<Candidate>; 3],
    /// Union of the per-factor shortlists ranked by fused score, truncated to k.
    pub fused: Vec<Candidate>,
}

impl QueryResult {
    pub fn view(&self, f: Factor) -> &[Candidate] {
        &self.per_factor[f.index()]
    }

    /// JSON lines, one candidate per line tagged with its view and rank.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let views = Factor::ALL
            .iter()
            .map(|f| (f.as_str(), self.view(*f)))
            .chain(std::iter::once(("fused", self.fused.as_slice())));
        for (view, list) in views {
            for (rank, c) in list.iter().enumerate() {
                let line = serde_json::json!({
                    "view": view,
                    "rank": rank + 1,
                    "clip_id": c.clip_id,
                    "s_mel": c.s_mel,
                    "s_rhy": c.s_rhy,
                    "s_tim": c.s_tim,
                    "fused": c.fused,
                    "fusion": self.strategy.name(),
                });
                out.push_str(&line.to_string());
                out.push('\n');
            }
        }
        out
    }
}

/// Projects an encoder embedding through the three heads
/// (melody, rhythm, timbre order).
pub fn project_query(heads: [&HeadParams; 3], z: &[f64]) -> Result<[Vec<f64>; 3]> {
    Ok([heads[0].project(z)?, heads[1].project(z)?, heads[2].project(z)?])
}

/// Retrieves the top-`k` of every factor index, scores each shortlisted
/// clip under all three factors, and ranks the union by fused score.
pub fn query_topk(
    query: [&[f64]; 3],
    indexes: [&FactorIndex; 3],
    k: usize,
    strategy: &FusionStrategy,
) -> Result<QueryResult> {
    strategy.validate()?;
    for (i, idx) in indexes.iter().enumerate() {
        if idx.is_empty() {
            return Err(MeritError::EmptyIndex);
        }
        if idx.factor().index() != i {
            return Err(MeritError::input(format!(
                "index in slot {i} holds {} vectors",
                idx.factor()
            )));
        }
    }
    let candidate = |id: &str| -> Result<Candidate> {
        let mut vs: [&[f64]; 3] = [&[], &[], &[]];
        for (slot, idx) in indexes.iter().enumerate() {
            vs[slot] = idx.get(id).ok_or_else(|| {
                MeritError::input(format!("clip {id:?} missing from the {} index", idx.factor()))
            })?;
        }
        let s = [dot(query[0], vs[0]), dot(query[1], vs[1]), dot(query[2], vs[2])];
        let fused = match strategy {
            FusionStrategy::Concat => concat_similarity(query, vs),
            other => fuse(s, other)?,
        };
        Ok(Candidate {
            clip_id: id.to_string(),
            s_mel: s[0],
            s_rhy: s[1],
            s_tim: s[2],
            fused,
        })
    };

    let mut per_factor: [Vec<Candidate>; 3] = Default::default();
    let mut seen = HashSet::new();
    let mut pool = Vec::new();
    for (slot, idx) in indexes.iter().enumerate() {
        for (row, _) in idx.search(query[slot], k)? {
            let c = candidate(&idx.ids()[row])?;
            if seen.insert(c.clip_id.clone()) {
                pool.push(c.clone());
            }
            per_factor[slot].push(c);
        }
    }
    pool.sort_by(|a, b| b.fused.total_cmp(&a.fused).then_with(|| a.clip_id.cmp(&b.clip_id)));
    pool.truncate(k);
    Ok(QueryResult {
        strategy: *strategy,
        per_factor,
        fused: pool,
    })
}

/// Per-triplet per-factor similarities plus the direct concat route.
#[derive(Debug, Clone)]
pub struct FactorTripletScores {
    pub s_p: Vec<[f64; 3]>,
    pub s_n: Vec<[f64; 3]>,
}

pub fn factor_triplet_scores(
    triplets: &[Triplet],
    heads: [&dyn Projector; 3],
    store: &EmbeddingStore,
) -> Result<FactorTripletScores> {
    let mut s_p = vec![[0.0; 3]; triplets.len()];
    let mut s_n = vec![[0.0; 3]; triplets.len()];
    for (f, head) in heads.iter().enumerate() {
        let scored = score_triplets(*head, triplets, store, EvalOptions::default())?;
        for (i, (sp, sn)) in scored.sims.into_iter().enumerate() {
            s_p[i][f] = sp;
            s_n[i][f] = sn;
        }
    }
    Ok(FactorTripletScores { s_p, s_n })
}

impl FactorTripletScores {
    /// Fraction of triplets whose fused positive score beats the fused
    /// negative score.
    pub fn fused_accuracy(&self, strategy: &FusionStrategy) -> Result<f64> {
        let mut correct = 0usize;
        for (sp, sn) in self.s_p.iter().zip(&self.s_n) {
            if fuse(*sp, strategy)? > fuse(*sn, strategy)? {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.s_p.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTuning {
    pub weights: [f64; 3],
    pub accuracy: f64,
    pub evaluated: usize,
}

/// Exhaustive grid search over the weight simplex at `grid_step`
/// resolution. Ties go to the lexicographically smallest weight triple.
pub fn tune_weights_from_scores(scores: &FactorTripletScores, grid_step: f64) -> Result<WeightTuning> {
    if scores.s_p.is_empty() {
        return Err(MeritError::input("empty validation set"));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(MeritError::config(format!("grid step {grid_step} outside (0, 1]")));
    }
    let n = (1.0 / grid_step).round() as usize;
    if ((n as f64) * grid_step - 1.0).abs() > 1e-9 {
        return Err(MeritError::config(format!("grid step {grid_step} does not divide 1")));
    }
    let mut best: Option<([f64; 3], f64)> = None;
    let mut evaluated = 0;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let w = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let acc = scores.fused_accuracy(&FusionStrategy::WeightedMean { weights: w })?;
            evaluated += 1;
            if best.is_none_or(|(_, b)| acc > b) {
                best = Some((w, acc));
            }
        }
    }
    let (weights, accuracy) = best.expect("grid is nonempty");
    Ok(WeightTuning {
        weights,
        accuracy,
        evaluated,
    })
}

pub fn tune_weights(
    validation: &[Triplet],
    heads: [&dyn Projector; 3],
    store: &EmbeddingStore,
    grid_step: f64,
) -> Result<WeightTuning> {
    if validation.is_empty() {
        return Err(MeritError::input("empty validation set"));
    }
    tune_weights_from_scores(&factor_triplet_scores(validation, heads, store)?, grid_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_index(factor: Factor, n: usize, dim: usize, seed: u64) -> FactorIndex {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..n).map(|i| (format!("c{i}"), unit(&mut rng, dim))).collect();
        FactorIndex::from_vectors(factor, dim, entries).unwrap()
    }

    #[test]
    fn fuse_landmarks() {
        assert_eq!(fuse([1.0, 1.0, 1.0], &FusionStrategy::Mean).unwrap(), 1.0);
        assert_eq!(fuse([0.9, 0.9, 0.0], &FusionStrategy::Product).unwrap(), 0.0);
        let w = FusionStrategy::WeightedMean { weights: [0.5, 0.25, 0.25] };
        assert_eq!(fuse([1.0, 0.0, -1.0], &w).unwrap(), 0.25);
        let bad = FusionStrategy::WeightedMean { weights: [0.5, 0.5, 0.5] };
        assert!(fuse([0.0; 3], &bad).is_err());
        let neg = FusionStrategy::WeightedMean { weights: [1.5, -0.5, 0.0] };
        assert!(fuse([0.0; 3], &neg).is_err());
    }

    #[test]
    fn self_retrieval_is_first_with_unit_score() {
        for f in Factor::ALL {
            let idx = random_index(f, 100, 16, 1 + f.index() as u64);
            for r in 0..idx.len() {
                let hits = idx.search(idx.vector(r), 10).unwrap();
                assert_eq!(hits[0].0, r);
                assert!((hits[0].1 - 1.0).abs() < 1e-12);
                assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
            }
        }
    }

    #[test]
    fn empty_index_is_an_error() {
        let idx = FactorIndex::from_vectors(Factor::Rhythm, 4, vec![]).unwrap();
        assert!(matches!(idx.search(&[1.0, 0.0, 0.0, 0.0], 3), Err(MeritError::EmptyIndex)));
    }

    #[test]
    fn non_unit_entries_are_rejected() {
        let r = FactorIndex::from_vectors(Factor::Rhythm, 2, vec![("a".into(), vec![1.0, 1.0])]);
        assert!(r.is_err());
    }

    #[test]
    fn index_file_round_trips() {
        let idx = random_index(Factor::Timbre, 20, 8, 4);
        let bytes = idx.encode().unwrap();
        let back = FactorIndex::decode(&bytes).unwrap();
        assert_eq!(back.factor(), Factor::Timbre);
        assert_eq!(back.ids(), idx.ids());
        assert_eq!(back.encode().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"MERITEMB");
        assert!(matches!(FactorIndex::decode(&bad), Err(MeritError::BadMagic { .. })));
        assert!(FactorIndex::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn approximate_recall_on_random_vectors() {
        let idx = random_index(Factor::Melody, 2000, 32, 7);
        let approx = idx.clone().with_mode(IndexMode::Approximate { nlist: 0, nprobe: 0, seed: 3 });
        assert!(approx.is_approximate());
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hit = 0;
        let queries = 100;
        for _ in 0..queries {
            let q = unit(&mut rng, 32);
            let exact: HashSet<usize> = idx.search(&q, 10).unwrap().into_iter().map(|h| h.0).collect();
            hit += approx.search(&q, 10).unwrap().iter().filter(|h| exact.contains(&h.0)).count();
        }
        let recall = hit as f64 / (queries * 10) as f64;
        assert!(recall > 0.5, "recall {recall}");
    }

    fn three_indexes(seed: u64, n: usize) -> [FactorIndex; 3] {
        Factor::ALL.map(|f| random_index(f, n, 8, seed + f.index() as u64))
    }

    #[test]
    fn single_clip_library_returns_itself() {
        let idxs = three_indexes(5, 1);
        let q = [idxs[0].vector(0), idxs[1].vector(0), idxs[2].vector(0)];
        let res = query_topk(q, [&idxs[0], &idxs[1], &idxs[2]], 10, &FusionStrategy::Mean).unwrap();
        assert_eq!(res.fused.len(), 1);
        let c = &res.fused[0];
        for s in [c.s_mel, c.s_rhy, c.s_tim, c.fused] {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn per_factor_views_expose_all_scores() {
        let idxs = three_indexes(11, 50);
        // Query equals clip c3 under melody only.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (qr, qt) = (unit(&mut rng, 8), unit(&mut rng, 8));
        let q = [idxs[0].get("c3").unwrap(), qr.as_slice(), qt.as_slice()];
        let res = query_topk(q, [&idxs[0], &idxs[1], &idxs[2]], 5, &FusionStrategy::Concat).unwrap();
        let top = &res.view(Factor::Melody)[0];
        assert_eq!(top.clip_id, "c3");
        assert!((top.s_mel - 1.0).abs() < 1e-12);
        assert!(top.s_rhy < 0.999 && top.s_tim < 0.999);
        for view in &res.per_factor {
            assert_eq!(view.len(), 5);
        }
        for (f, view) in Factor::ALL.iter().zip(&res.per_factor) {
            assert!(view.windows(2).all(|w| w[0].score(*f) >= w[1].score(*f)));
        }
        assert!(res.fused.windows(2).all(|w| w[0].fused >= w[1].fused));
        for c in &res.fused {
            assert!((c.fused - (c.s_mel + c.s_rhy + c.s_tim) / 3.0).abs() < 1e-12);
        }
        let lines = res.to_json_lines();
        assert_eq!(lines.lines().count(), 15 + res.fused.len());
    }

    #[test]
    fn grid_has_231_points_at_005() {
        let scores = FactorTripletScores { s_p: vec![[0.5; 3]], s_n: vec![[0.5; 3]] };
        let t = tune_weights_from_scores(&scores, 0.05).unwrap();
        assert_eq!(t.evaluated, 231);
        // All weightings tie at zero accuracy: lexicographically smallest wins.
        assert_eq!(t.weights, [0.0, 0.0, 1.0]);
        assert_eq!(t.accuracy, 0.0);
    }

    #[test]
    fn tuning_finds_the_only_separating_factor() {
        // Melody separates by a small margin; the other factors prefer the
        // negative by a wide margin, so any weight off melody breaks ranking.
        let s_p = vec![[0.6, -1.0, -1.0]; 4];
        let s_n = vec![[0.5, 1.0, 1.0]; 4];
        let t = tune_weights_from_scores(&FactorTripletScores { s_p, s_n }, 0.05).unwrap();
        assert_eq!(t.weights, [1.0, 0.0, 0.0]);
        assert_eq!(t.accuracy, 1.0);
    }

    #[test]
    fn tuning_errors() {
        let empty = FactorTripletScores { s_p: vec![], s_n: vec![] };
        assert!(tune_weights_from_scores(&empty, 0.05).is_err());
        let one = FactorTripletScores { s_p: vec![[0.0; 3]], s_n: vec![[0.0; 3]] };
        assert!(tune_weights_from_scores(&one, 0.3).is_err());
    }

    proptest! {
        #[test]
        fn concat_matches_mean(seed in any::<u64>(), dim in 1usize..16) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, dim)).collect();
            let b: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, dim)).collect();
            let sa = [a[0].as_slice(), a[1].as_slice(), a[2].as_slice()];
            let sb = [b[0].as_slice(), b[1].as_slice(), b[2].as_slice()];
            let scores = [dot(sa[0], sb[0]), dot(sa[1], sb[1]), dot(sa[2], sb[2])];
            let mean = fuse(scores, &FusionStrategy::Mean).unwrap();
            prop_assert!((concat_similarity(sa, sb) - mean).abs() < 1e-9);
        }

        #[test]
        fn weighted_fusion_is_strictly_monotone(
            s in prop::array::uniform3(-1.0f64..1.0),
            w in prop::array::uniform3(0.01f64..1.0),
            f in 0usize..3,
            bump in 1e-3f64..0.5,
        ) {
            let total: f64 = w.iter().sum();
            let weights = w.map(|x| x / total);
            let mut raised = s;
            raised[f] += bump;
            for strat in [FusionStrategy::Mean, FusionStrategy::WeightedMean { weights }] {
                prop_assert!(fuse(raised, &strat).unwrap() > fuse(s, &strat).unwrap());
            }
        }
    }
}
