//! Factor-controlled triplet datasets.
//!
//! A folder is an anchor plus `k` positives that share the factor-defining
//! property. Every folder expands into `k²` triplets: `k` anchor-positive
//! triplets `(A, P_i, N)` and `k(k-1)` cross-positive triplets
//! `(P_i, P_j, N)`, `i != j`. Negatives are drawn from clips outside the
//! folder, frozen at manifest-construction time, and resampled per triplet.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::store::MetaTable;
use crate::{derive_seed, Factor, MeritError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FolderEntry {
    pub folder_id: String,
    pub anchor_id: String,
    pub positive_ids: Vec<String>,
    pub factor: Factor,
}

impl FolderEntry {
    pub fn k(&self) -> usize {
        self.positive_ids.len()
    }

    pub fn members(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.anchor_id).chain(self.positive_ids.iter())
    }

    fn check(&self) -> Result<()> {
        if self.positive_ids.is_empty() {
            return Err(MeritError::input(format!("folder {:?} has k = 0 positives", self.folder_id)));
        }
        let mut seen = HashSet::new();
        for id in self.members() {
            if !seen.insert(id) {
                return Err(MeritError::input(format!(
                    "folder {:?} lists clip {id:?} more than once",
                    self.folder_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    #[serde(rename = "a")]
    pub anchor_id: String,
    #[serde(rename = "p")]
    pub positive_id: String,
    #[serde(rename = "n")]
    pub negative_id: String,
}

impl Triplet {
    pub fn new(a: impl Into<String>, p: impl Into<String>, n: impl Into<String>) -> Self {
        Triplet {
            anchor_id: a.into(),
            positive_id: p.into(),
            negative_id: n.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = MeritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(MeritError::input(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletManifest {
    pub factor: Factor,
    pub split: Split,
    pub seed: u64,
    pub folder_ids: Vec<String>,
    /// Embedding dimension the manifest was built against, when known.
    pub dim: Option<usize>,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestHeader {
    factor: Factor,
    split: Split,
    seed: u64,
    folder_count: usize,
    #[serde(default)]
    folder_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
}

impl TripletManifest {
    /// Line-delimited JSON: one header line, then one triplet per line.
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            factor: self.factor,
            split: self.split,
            seed: self.seed,
            folder_count: self.folder_ids.len(),
            folder_ids: self.folder_ids.clone(),
            dim: self.dim,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for t in &self.triplets {
            out.push_str(&serde_json::to_string(t).expect("triplet serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header_line = loop {
            match lines.next() {
                Some((_, line)) => {
                    let line = line.map_err(|e| MeritError::parse("manifest", e))?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(MeritError::parse("manifest", "missing header line")),
            }
        };
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| MeritError::parse("manifest header", e))?;
        if !header.folder_ids.is_empty() && header.folder_ids.len() != header.folder_count {
            return Err(MeritError::parse(
                "manifest header",
                format!("folder_count {} but {} folder ids", header.folder_count, header.folder_ids.len()),
            ));
        }
        let mut triplets = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| MeritError::parse("manifest", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let t: Triplet = serde_json::from_str(&line)
                .map_err(|e| MeritError::parse("manifest", format!("line {}: {e}", lineno + 1)))?;
            triplets.push(t);
        }
        Ok(TripletManifest {
            factor: header.factor,
            split: header.split,
            seed: header.seed,
            folder_ids: header.folder_ids,
            dim: header.dim,
            triplets,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| MeritError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| MeritError::io(path, e))?;
        Self::from_jsonl(BufReader::new(file))
    }
}

fn expand_with<F>(folder: &FolderEntry, mut draw_negative: F) -> Vec<Triplet>
where
    F: FnMut() -> String,
{
    let k = folder.k();
    let mut out = Vec::with_capacity(k * k);
    for p in &folder.positive_ids {
        out.push(Triplet::new(folder.anchor_id.clone(), p.clone(), draw_negative()));
    }
    for (i, pi) in folder.positive_ids.iter().enumerate() {
        for (j, pj) in folder.positive_ids.iter().enumerate() {
            if i != j {
                out.push(Triplet::new(pi.clone(), pj.clone(), draw_negative()));
            }
        }
    }
    out
}

/// Expands one folder into its `k²` triplets, each negative drawn
/// uniformly from `negative_pool`.
pub fn expand_folder(folder: &FolderEntry, negative_pool: &[String], seed: u64) -> Result<Vec<Triplet>> {
    folder.check()?;
    if negative_pool.is_empty() {
        return Err(MeritError::input("empty negative pool"));
    }
    let members: HashSet<&String> = folder.members().collect();
    if let Some(bad) = negative_pool.iter().find(|id| members.contains(id)) {
        return Err(MeritError::input(format!(
            "negative pool contains {bad:?}, a member of folder {:?}",
            folder.folder_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(expand_with(folder, || negative_pool[rng.random_range(0..negative_pool.len())].clone()))
}

pub fn count_triplets(folders: &[FolderEntry]) -> u64 {
    folders.iter().map(|f| (f.k() as u64) * (f.k() as u64)).sum()
}

/// Deterministic folder-level partition; train gets `floor(ratio · n)`
/// folders. Both sides keep the input order.
pub fn split_folders(
    folders: &[FolderEntry],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<FolderEntry>, Vec<FolderEntry>)> {
    let n = folders.len();
    if n < 2 {
        return Err(MeritError::input(format!("need at least 2 folders to split, got {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MeritError::config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let n_train = ((ratio * n as f64) + 1e-9).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(MeritError::input(format!(
            "ratio {ratio} over {n} folders leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_train = vec![false; n];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (f, t) in folders.iter().zip(is_train) {
        if t {
            train.push(f.clone());
        } else {
            test.push(f.clone());
        }
    }
    Ok((train, test))
}

/// Expands every folder of one split. Each folder's negatives come from
/// the members of the other folders in the same split.
pub fn build_manifest(
    folders: &[FolderEntry],
    factor: Factor,
    split: Split,
    seed: u64,
    dim: Option<usize>,
) -> Result<TripletManifest> {
    if folders.len() < 2 {
        return Err(MeritError::input(
            "need at least 2 folders in a split to draw negatives",
        ));
    }
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut universe: Vec<&String> = Vec::new();
    for (fi, f) in folders.iter().enumerate() {
        f.check()?;
        if f.factor != factor {
            return Err(MeritError::input(format!(
                "folder {:?} is a {} folder in a {factor} manifest",
                f.folder_id, f.factor
            )));
        }
        for id in f.members() {
            if let Some(prev) = owner.insert(id.as_str(), fi) {
                return Err(MeritError::input(format!(
                    "clip {id:?} appears in folders {:?} and {:?}",
                    folders[prev].folder_id, f.folder_id
                )));
            }
            universe.push(id);
        }
    }
    let mut triplets = Vec::with_capacity(count_triplets(folders) as usize);
    for (fi, f) in folders.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, fi as u64));
        // Rejection sampling over the split's clips is uniform over the
        // clips outside this folder.
        triplets.extend(expand_with(f, || loop {
            let id = universe[rng.random_range(0..universe.len())];
            if owner[id.as_str()] != fi {
                return id.clone();
            }
        }));
    }
    Ok(TripletManifest {
        factor,
        split,
        seed,
        folder_ids: folders.iter().map(|f| f.folder_id.clone()).collect(),
        dim,
        triplets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeRule {
    /// Negative has another class and comes from the anchor's own song
    /// (instrument-stem triplets).
    SameSongNegative,
    /// Negative is any clip of another class (e.g. dance-class triplets).
    AnyNegative,
}

/// One triplet per labelled clip: the positive shares the anchor's class
/// but comes from another song; the negative has a different class.
pub fn build_class_triplets(metas: &MetaTable, rule: NegativeRule, seed: u64) -> Result<Vec<Triplet>> {
    let labelled: Vec<(&str, &str, &str)> = metas
        .iter()
        .filter_map(|(id, m)| {
            m.class_label.as_deref().map(|c| {
                let song = m.source_song_id.as_deref().unwrap_or(id.as_str());
                (id.as_str(), c, song)
            })
        })
        .collect();

    let mut by_class: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    let mut by_song: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
    for &(id, class, song) in &labelled {
        by_class.entry(class).or_default().push((id, song));
        by_song.entry(song).or_default().push((id, class));
    }
    if by_class.len() < 2 {
        return Err(MeritError::input(format!(
            "need >= 2 classes, found {}",
            by_class.len()
        )));
    }
    for (class, members) in &by_class {
        let songs: BTreeSet<&str> = members.iter().map(|(_, s)| *s).collect();
        if songs.len() < 2 {
            return Err(MeritError::input(format!("class {class:?} has fewer than 2 songs")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labelled.len());
    for &(id, class, song) in &labelled {
        let positives: Vec<&str> = by_class[class]
            .iter()
            .filter(|(_, s)| *s != song)
            .map(|(p, _)| *p)
            .collect();
        let negatives: Vec<&str> = match rule {
            NegativeRule::SameSongNegative => by_song[song]
                .iter()
                .filter(|(_, c)| *c != class)
                .map(|(n, _)| *n)
                .collect(),
            NegativeRule::AnyNegative => labelled
                .iter()
                .filter(|(_, c, _)| *c != class)
                .map(|(n, _, _)| *n)
                .collect(),
        };
        let positive = positives.choose(&mut rng).expect("class has another song");
        let negative = negatives.choose(&mut rng).ok_or_else(|| {
            MeritError::input(format!(
                "no valid negative for anchor {id:?} under {rule:?}"
            ))
        })?;
        out.push(Triplet::new(id, *positive, *negative));
    }
    Ok(out)
}
