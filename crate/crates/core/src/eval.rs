//! Evaluation protocol: triplet accuracy, Wald intervals, cosine-distance
//! margins, the head × test-set disentanglement matrix and per-class
//! breakdowns.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Split, Triplet, TripletManifest};
use crate::head::{HeadParams, Projector, RawCosine};
use crate::linalg::dot;
use crate::store::{EmbeddingStore, MetaTable};
use crate::{Factor, MeritError, Result};

/// 97.5th percentile of the standard normal.
pub const Z_95: f64 = 1.96;

/// Label of the un-projected raw-cosine baseline row.
pub const RAW_ROW: &str = "raw";

#[derive(Debug, Clone, Copy, Default)]
pub struct EvalOptions {
    /// Skip triplets touching clips whose projection is degenerate instead
    /// of failing.
    pub lenient: bool,
}

/// Per-triplet `(cos(A, P), cos(A, N))` under one projector.
#[derive(Debug, Clone, Default)]
pub struct ScoredTriplets {
    pub sims: Vec<(f64, f64)>,
    /// Clip ids excluded in lenient mode.
    pub excluded: Vec<String>,
}

impl ScoredTriplets {
    pub fn n(&self) -> usize {
        self.sims.len()
    }

    /// Strict inequality: ties count as incorrect.
    pub fn accuracy(&self) -> f64 {
        let correct = self.sims.iter().filter(|(sp, sn)| sp > sn).count();
        correct as f64 / self.sims.len() as f64
    }

    /// Mean `d_AN − d_AP` with `d = 1 − cos`.
    pub fn margin(&self) -> f64 {
        let total: f64 = self.sims.iter().map(|(sp, sn)| (1.0 - sn) - (1.0 - sp)).sum();
        total / self.sims.len() as f64
    }
}

pub fn score_triplets(
    projector: &dyn Projector,
    triplets: &[Triplet],
    store: &EmbeddingStore,
    opts: EvalOptions,
) -> Result<ScoredTriplets> {
    if triplets.is_empty() {
        return Err(MeritError::input("no triplets to evaluate"));
    }
    let mut cache: HashMap<usize, Option<Vec<f64>>> = HashMap::new();
    let mut scored = ScoredTriplets::default();
    for t in triplets {
        let mut ys = [0usize; 3];
        let mut ok = true;
        for (slot, id) in [&t.anchor_id, &t.positive_id, &t.negative_id].into_iter().enumerate() {
            let row = store.resolve(id)?;
            if let std::collections::hash_map::Entry::Vacant(slot_entry) = cache.entry(row) {
                let projected = match projector.project(store.vector(row)) {
                    Ok(y) => Some(y),
                    Err(MeritError::DegenerateOutput { .. }) if opts.lenient => {
                        scored.excluded.push(id.clone());
                        None
                    }
                    Err(MeritError::DegenerateOutput { norm, eps, .. }) => {
                        return Err(MeritError::DegenerateOutput {
                            norm,
                            eps,
                            context: format!("clip {id:?}"),
                        })
                    }
                    Err(e) => return Err(e),
                };
                slot_entry.insert(projected);
            }
            ok &= cache[&row].is_some();
            ys[slot] = row;
        }
        if !ok {
            continue;
        }
        let y = |row: usize| cache[&row].as_deref().expect("checked above");
        scored.sims.push((dot(y(ys[0]), y(ys[1])), dot(y(ys[0]), y(ys[2]))));
    }
    if scored.sims.is_empty() {
        return Err(MeritError::input("every triplet was excluded"));
    }
    Ok(scored)
}

/// `(p, N)`: fraction of triplets with `cos(h(A), h(P)) > cos(h(A), h(N))`.
pub fn triplet_accuracy(
    projector: &dyn Projector,
    triplets: &[Triplet],
    store: &EmbeddingStore,
    opts: EvalOptions,
) -> Result<(f64, usize)> {
    let s = score_triplets(projector, triplets, store, opts)?;
    Ok((s.accuracy(), s.n()))
}

pub fn margin_stats(
    projector: &dyn Projector,
    triplets: &[Triplet],
    store: &EmbeddingStore,
    opts: EvalOptions,
) -> Result<f64> {
    Ok(score_triplets(projector, triplets, store, opts)?.margin())
}

/// Wald 95% half-width `1.96 · sqrt(p (1 − p) / N)`.
pub fn wald_ci(p: f64, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(MeritError::input("Wald interval needs N >= 1"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(MeritError::input(format!("proportion {p} outside [0, 1]")));
    }
    Ok(Z_95 * (p * (1.0 - p) / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub head: String,
    pub testset: Factor,
    pub acc: f64,
    pub ci: f64,
    pub margin: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub acc: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub classes: BTreeMap<String, ClassAccuracy>,
    /// Classes present in the metadata with no triplet anchored in them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omitted: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub per_class: BTreeMap<String, PerClassReport>,
}

pub fn evaluate_cell(
    head: &str,
    projector: &dyn Projector,
    manifest: &TripletManifest,
    store: &EmbeddingStore,
    opts: EvalOptions,
) -> Result<Cell> {
    let s = score_triplets(projector, &manifest.triplets, store, opts)?;
    let acc = s.accuracy();
    Ok(Cell {
        head: head.to_string(),
        testset: manifest.factor,
        acc,
        ci: wald_ci(acc, s.n())?,
        margin: s.margin(),
        n: s.n(),
    })
}

/// Every head on every factor test set, rows ordered melody, rhythm,
/// timbre; with `include_raw` a raw-cosine baseline row comes first.
pub fn disentanglement_matrix(
    heads: &[HeadParams],
    tests: &[TripletManifest],
    store: &EmbeddingStore,
    include_raw: bool,
    opts: EvalOptions,
) -> Result<EvalReport> {
    let head_for = |f: Factor| {
        heads
            .iter()
            .find(|h| h.factor == f)
            .ok_or_else(|| MeritError::input(format!("missing {f} head")))
    };
    let test_for = |f: Factor| {
        tests
            .iter()
            .find(|m| m.factor == f)
            .ok_or_else(|| MeritError::input(format!("missing {f} test manifest")))
    };
    let mut rows: Vec<(String, &dyn Projector)> = Vec::new();
    let raw = RawCosine { dim: store.dim() };
    if include_raw {
        rows.push((RAW_ROW.to_string(), &raw));
    }
    for f in Factor::ALL {
        rows.push((f.to_string(), head_for(f)? as &dyn Projector));
    }
    let mut report = EvalReport::default();
    for (label, projector) in rows {
        for f in Factor::ALL {
            let manifest = test_for(f)?;
            if manifest.split != Split::Test {
                return Err(MeritError::input(format!("{f} manifest is not a test split")));
            }
            report.cells.push(evaluate_cell(&label, projector, manifest, store, opts)?);
        }
    }
    Ok(report)
}

/// Triplet accuracy grouped by the anchor's class label.
pub fn per_class_accuracy(
    projector: &dyn Projector,
    triplets: &[Triplet],
    metas: &MetaTable,
    store: &EmbeddingStore,
    opts: EvalOptions,
) -> Result<PerClassReport> {
    let mut groups: BTreeMap<String, Vec<Triplet>> = BTreeMap::new();
    for t in triplets {
        let class = metas
            .get(&t.anchor_id)
            .and_then(|m| m.class_label.clone())
            .ok_or_else(|| MeritError::input(format!("anchor {:?} has no class label", t.anchor_id)))?;
        groups.entry(class).or_default().push(t.clone());
    }
    let mut report = PerClassReport::default();
    for (class, ts) in groups {
        let (acc, n) = triplet_accuracy(projector, &ts, store, opts)?;
        report.classes.insert(class, ClassAccuracy { acc, n });
    }
    for m in metas.values() {
        if let Some(c) = &m.class_label {
            if !report.classes.contains_key(c) && !report.omitted.contains(c) {
                report.omitted.push(c.clone());
            }
        }
    }
    report.omitted.sort();
    Ok(report)
}

impl EvalReport {
    pub fn cell(&self, head: &str, testset: Factor) -> Option<&Cell> {
        self.cells.iter().find(|c| c.head == head && c.testset == testset)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text grid: rows are heads, columns are factor test sets, cells
    /// are accuracy % ± Wald half-width with the margin in brackets.
    pub fn render_table(&self) -> String {
        let mut heads: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !heads.contains(&c.head.as_str()) {
                heads.push(&c.head);
            }
        }
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "model");
        for f in Factor::ALL {
            let _ = write!(out, " | {:^26}", f.as_str());
        }
        out.push('\n');
        out.push_str(&"-".repeat(10 + 3 * 29));
        out.push('\n');
        for h in heads {
            let _ = write!(out, "{h:<10}");
            for f in Factor::ALL {
                match self.cell(h, f) {
                    Some(c) => {
                        let body = format!("{:5.1} ±{:4.1} [{:+.3}]", 100.0 * c.acc, 100.0 * c.ci, c.margin);
                        let _ = write!(out, " | {body:^26}");
                    }
                    None => {
                        let _ = write!(out, " | {:^26}", "-");
                    }
                }
            }
            out.push('\n');
        }
        for (name, pc) in &self.per_class {
            let _ = writeln!(out, "\nper-class ({name}):");
            for (class, ca) in &pc.classes {
                let _ = writeln!(out, "  {class:<20} {:5.1}%  (n = {})", 100.0 * ca.acc, ca.n);
            }
            for class in &pc.omitted {
                let _ = writeln!(out, "  {class:<20}     -   (no triplets)");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{BlockLayout, ClipMeta, EmbeddingRecord};

    fn store(vs: &[(&str, [f32; 2])]) -> EmbeddingStore {
        let records: Vec<_> = vs.iter().map(|(id, v)| EmbeddingRecord::new(*id, v.to_vec())).collect();
        EmbeddingStore::with_layout(&records, BlockLayout::single(2)).unwrap()
    }

    #[test]
    fn wald_landmarks() {
        assert!((wald_ci(0.5, 12_500).unwrap() - 0.008_765).abs() < 1e-6);
        assert!((wald_ci(0.5, 4_600).unwrap() - 0.014_449).abs() < 1e-6);
        assert_eq!(wald_ci(1.0, 10).unwrap(), 0.0);
        assert!(wald_ci(0.5, 0).is_err());
        let direct = 1.96 * (0.3f64 * 0.7 / 77.0).sqrt();
        assert!((wald_ci(0.3, 77).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_tied_heads() {
        let s = store(&[("a", [1.0, 0.0]), ("p", [2.0, 0.0]), ("n", [-1.0, 0.0]), ("n2", [1.0, 0.0])]);
        let raw = RawCosine { dim: 2 };
        let good = vec![Triplet::new("a", "p", "n")];
        let (p, n) = triplet_accuracy(&raw, &good, &s, EvalOptions::default()).unwrap();
        assert_eq!((p, n), (1.0, 1));
        assert_eq!(margin_stats(&raw, &good, &s, EvalOptions::default()).unwrap(), 2.0);
        let tie = vec![Triplet::new("a", "p", "n2")];
        let (p, _) = triplet_accuracy(&raw, &tie, &s, EvalOptions::default()).unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(margin_stats(&raw, &tie, &s, EvalOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn degenerate_clips_fail_strict_and_are_skipped_lenient() {
        let s = store(&[("a", [1.0, 0.0]), ("p", [2.0, 0.0]), ("n", [-1.0, 0.0]), ("z", [0.0, 0.0])]);
        let raw = RawCosine { dim: 2 };
        let ts = vec![Triplet::new("a", "p", "n"), Triplet::new("a", "z", "n")];
        assert!(triplet_accuracy(&raw, &ts, &s, EvalOptions::default()).is_err());
        let scored = score_triplets(&raw, &ts, &s, EvalOptions { lenient: true }).unwrap();
        assert_eq!(scored.n(), 1);
        assert_eq!(scored.excluded, vec!["z".to_string()]);
    }

    #[test]
    fn per_class_groups_by_anchor() {
        let s = store(&[
            ("a1", [1.0, 0.0]),
            ("p1", [1.0, 0.1]),
            ("n1", [0.0, 1.0]),
            ("a2", [0.0, 1.0]),
            ("p2", [1.0, 0.0]),
            ("n2", [0.0, 1.0]),
        ]);
        let meta = |id: &str, class: &str| {
            (id.to_string(), ClipMeta { clip_id: id.into(), class_label: Some(class.into()), ..Default::default() })
        };
        let metas: MetaTable = [meta("a1", "A"), meta("a2", "B"), meta("p1", "C")].into_iter().collect();
        let ts = vec![Triplet::new("a1", "p1", "n1"), Triplet::new("a2", "p2", "n2")];
        let r = per_class_accuracy(&RawCosine { dim: 2 }, &ts, &metas, &s, EvalOptions::default()).unwrap();
        assert_eq!(r.classes["A"], ClassAccuracy { acc: 1.0, n: 1 });
        assert_eq!(r.classes["B"], ClassAccuracy { acc: 0.0, n: 1 });
        assert_eq!(r.omitted, vec!["C".to_string()]);
        assert_eq!(r.classes.values().map(|c| c.n).sum::<usize>(), ts.len());
    }

    #[test]
    fn report_json_uses_flat_cell_schema() {
        let report = EvalReport {
            cells: vec![Cell { head: "melody".into(), testset: Factor::Rhythm, acc: 0.5, ci: 0.1, margin: 0.0, n: 10 }],
            per_class: BTreeMap::new(),
        };
        let v: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
        let cell = &v["cells"][0];
        for key in ["head", "testset", "acc", "ci", "margin", "n"] {
            assert!(cell.get(key).is_some(), "missing {key}");
        }
        assert_eq!(cell["testset"], "rhythm");
        assert!(report.render_table().contains("50.0"));
    }
}
