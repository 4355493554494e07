//! The `merit` command line.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 when the
//! filesystem fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attribution::{attribute_head, render_heatmap, AttributionRow};
use crate::dataset::{Split, TripletManifest};
use crate::eval::{disentanglement_matrix, per_class_accuracy, EvalOptions};
use crate::head::{load_head, save_head, HeadParams, Projector};
use crate::loss::LossSign;
use crate::retrieval::{
    build_index, factor_triplet_scores, project_query, query_topk, tune_weights_from_scores, FactorIndex,
    FusionStrategy, IndexMode, DEFAULT_TOP_K,
};
use crate::store::{read_meta, read_store, validate_records, BlockLayout, EmbeddingStore, MetaTable, ValidationReport};
use crate::synth::{generate, SynthConfig};
use crate::train::{train_head, HeadConfig, TrainConfig, TrainHistory};
use crate::{Factor, MeritError, Result};

#[derive(Debug, Parser)]
#[command(name = "merit", version, about = "Factor-specific music similarity heads over cached encoder embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic store, metadata and train/test manifests.
    Synth(SynthArgs),
    /// Train projection heads with Circle Loss.
    Train(TrainArgs),
    /// Triplet accuracy of every head on every factor test set.
    Eval(EvalArgs),
    /// Project a store through one head into a retrieval index.
    Index(IndexArgs),
    /// Top-k retrieval for a stored clip across the three factor indexes.
    Query(QueryArgs),
    /// Grid-search fusion weights on a validation set.
    FuseTune(FuseTuneArgs),
    /// Share of first-layer weight mass per encoder layer block.
    Attribute(AttributeArgs),
    /// Check that manifests resolve against a store.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Table,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// TOML file with SynthConfig fields; missing keys keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_folders: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    leak: Option<f64>,
    #[arg(long)]
    rotate: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train only this factor; `--out` is then a head file. Without it every
    /// given manifest is trained and `--out` is a directory.
    #[arg(long)]
    factor: Option<Factor>,
    #[arg(long)]
    store: PathBuf,
    /// Train-split manifest(s); the factor is read from each header.
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV (single head) or directory for `{factor}.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// TOML file with TrainConfig fields; missing keys keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides the config seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// `corrected` (default) or `paper` for the literal printed sign.
    #[arg(long)]
    loss_sign: Option<LossSign>,
    #[arg(long, default_value_t = crate::head::DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    #[arg(long, default_value_t = crate::head::DEFAULT_OUT_DIM)]
    out_dim: usize,
    /// Train the heads on separate threads.
    #[arg(long)]
    parallel_heads: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    store: PathBuf,
    /// One head file per factor.
    #[arg(long, required = true, num_args = 1..)]
    heads: Vec<PathBuf>,
    /// One test-split manifest per factor.
    #[arg(long, required = true, num_args = 1..)]
    tests: Vec<PathBuf>,
    /// Prepend a raw-embedding cosine baseline row.
    #[arg(long)]
    raw: bool,
    /// Metadata sidecar; adds per-class accuracy of each head on its own test set.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Exclude triplets with degenerate projections instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Build the clustered shortlist instead of exhaustive search.
    #[arg(long)]
    approx: bool,
    /// Cluster count (default ceil(sqrt(n))).
    #[arg(long, default_value_t = 0)]
    nlist: usize,
    /// Clusters scanned per query (default ceil(nlist / 2)).
    #[arg(long, default_value_t = 0)]
    nprobe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    /// Melody, rhythm and timbre heads.
    #[arg(long, required = true, num_args = 3)]
    heads: Vec<PathBuf>,
    /// Melody, rhythm and timbre indexes.
    #[arg(long, required = true, num_args = 3)]
    indexes: Vec<PathBuf>,
    /// Clip in the store to use as the query.
    #[arg(long)]
    clip: String,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    /// mean, wmean, concat or product.
    #[arg(long, default_value = "mean")]
    fusion: FusionStrategy,
    /// Comma-separated melody,rhythm,timbre weights for `wmean`.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct FuseTuneArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, required = true, num_args = 3)]
    heads: Vec<PathBuf>,
    /// Validation manifest(s); triplets are pooled.
    #[arg(long, required = true, num_args = 1..)]
    validation: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    grid_step: f64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[arg(long, required = true, num_args = 1..)]
    heads: Vec<PathBuf>,
    /// Number of layer blocks (default: from `--store`, else 5).
    #[arg(long)]
    n_blocks: Option<usize>,
    /// Store whose header supplies the block layout.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a, out),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a, out),
        Command::FuseTune(a) => fuse_tune(a, out),
        Command::Attribute(a) => attribute(a, out),
        Command::Validate(a) => validate(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| MeritError::io("<stdout>", e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<TripletManifest>> {
    paths.iter().map(|p| TripletManifest::read(p)).collect()
}

fn load_heads(paths: &[PathBuf]) -> Result<Vec<HeadParams>> {
    paths.iter().map(|p| load_head(p)).collect()
}

/// Heads reordered melody, rhythm, timbre by their stored factor tag.
fn ordered_heads(paths: &[PathBuf]) -> Result<[HeadParams; 3]> {
    let mut slots: [Option<HeadParams>; 3] = Default::default();
    for h in load_heads(paths)? {
        let i = h.factor.index();
        if slots[i].replace(h).is_some() {
            return Err(MeritError::input(format!("two heads for {}", Factor::ALL[i])));
        }
    }
    let [m, r, t] = slots;
    match (m, r, t) {
        (Some(m), Some(r), Some(t)) => Ok([m, r, t]),
        _ => Err(MeritError::input("need one head per factor")),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_toml_file(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_folders {
        cfg.n_folders = n;
    }
    if let Some(x) = a.noise_sigma {
        cfg.noise_sigma = x;
    }
    if let Some(x) = a.leak {
        cfg.cross_factor_leak = x;
    }
    cfg.rotate |= a.rotate;
    let data = generate(&cfg)?;
    let paths = data.write_dir(&a.out)?;
    let summary = serde_json::json!({
        "store": paths.store,
        "meta": paths.meta,
        "records": data.records.len(),
        "train": paths.train,
        "test": paths.test,
    });
    emit(out, &to_json(&summary))?;
    Ok(0)
}

fn train(a: TrainArgs) -> Result<i32> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr_max {
        cfg.lr_max = lr;
    }
    if let Some(sign) = a.loss_sign {
        cfg.loss.sign = sign;
    }
    cfg.validate()?;
    let head_cfg = HeadConfig {
        hidden_dim: a.hidden_dim,
        out_dim: a.out_dim,
    };

    let mut manifests = load_manifests(&a.manifest)?;
    if let Some(f) = a.factor {
        manifests.retain(|m| m.factor == f);
        if manifests.len() != 1 {
            return Err(MeritError::input(format!(
                "expected exactly one {f} manifest, found {}",
                manifests.len()
            )));
        }
    }
    for m in &manifests {
        if m.split != Split::Train {
            return Err(MeritError::input(format!("{} manifest is a {} split", m.factor, m.split)));
        }
    }
    let store = EmbeddingStore::load(&a.store)?;

    let results: Vec<Result<(HeadParams, TrainHistory)>> = if a.parallel_heads && manifests.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = manifests
                .iter()
                .map(|m| s.spawn(|| train_head(m, &store, &head_cfg, &cfg)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        manifests.iter().map(|m| train_head(m, &store, &head_cfg, &cfg)).collect()
    };

    let single = a.factor.is_some();
    if !single {
        fs::create_dir_all(&a.out).map_err(|e| MeritError::io(&a.out, e))?;
    }
    for (m, r) in manifests.iter().zip(results) {
        let (head, history) = r?;
        let head_path = if single {
            a.out.clone()
        } else {
            a.out.join(format!("{}.head", m.factor))
        };
        save_head(&head, &head_path)?;
        if let Some(h) = &a.history {
            let csv_path = if single {
                h.clone()
            } else {
                fs::create_dir_all(h).map_err(|e| MeritError::io(h, e))?;
                h.join(format!("{}.history.csv", m.factor))
            };
            history.write_csv(&csv_path)?;
        }
        let last = history.epochs.last().map_or(f64::NAN, |e| e.loss);
        eprintln!("{}: {} epochs, final loss {last:.6} -> {}", m.factor, cfg.epochs, head_path.display());
    }
    Ok(0)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let store = EmbeddingStore::load(&a.store)?;
    let heads = load_heads(&a.heads)?;
    let tests = load_manifests(&a.tests)?;
    let opts = EvalOptions { lenient: a.lenient };
    let mut report = disentanglement_matrix(&heads, &tests, &store, a.raw, opts)?;
    if let Some(meta_path) = &a.meta {
        let metas = read_meta(meta_path)?;
        for h in &heads {
            if let Some(t) = tests.iter().find(|t| t.factor == h.factor) {
                // Only classes of clips this test set touches can be reported as omitted.
                let used: std::collections::HashSet<&str> = t
                    .triplets
                    .iter()
                    .flat_map(|x| [x.anchor_id.as_str(), x.positive_id.as_str(), x.negative_id.as_str()])
                    .collect();
                let scoped: MetaTable = metas
                    .iter()
                    .filter(|(id, _)| used.contains(id.as_str()))
                    .map(|(id, m)| (id.clone(), m.clone()))
                    .collect();
                let pc = per_class_accuracy(h as &dyn Projector, &t.triplets, &scoped, &store, opts)?;
                report.per_class.insert(h.factor.to_string(), pc);
            }
        }
    }
    let text = match a.format {
        Format::Json => report.to_json(),
        Format::Table => report.render_table(),
    };
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| MeritError::io(p, e))?,
        None => emit(out, &text)?,
    }
    Ok(0)
}

fn index(a: IndexArgs) -> Result<i32> {
    let store = EmbeddingStore::load(&a.store)?;
    let head = load_head(&a.head)?;
    let mode = if a.approx {
        IndexMode::Approximate {
            nlist: a.nlist,
            nprobe: a.nprobe,
            seed: a.seed,
        }
    } else {
        IndexMode::Exact
    };
    let (idx, skipped) = build_index(&head, &store, mode)?;
    for id in &skipped {
        eprintln!("skipped {id}: degenerate projection");
    }
    idx.save(&a.out)?;
    eprintln!("{} index: {} entries -> {}", idx.factor(), idx.len(), a.out.display());
    Ok(0)
}

fn load_indexes(paths: &[PathBuf]) -> Result<[FactorIndex; 3]> {
    let mut slots: [Option<FactorIndex>; 3] = Default::default();
    for p in paths {
        let idx = FactorIndex::load(p)?;
        if idx.is_empty() {
            return Err(MeritError::EmptyIndex);
        }
        let i = idx.factor().index();
        if slots[i].replace(idx).is_some() {
            return Err(MeritError::input(format!("two indexes for {}", Factor::ALL[i])));
        }
    }
    let [m, r, t] = slots;
    match (m, r, t) {
        (Some(m), Some(r), Some(t)) => Ok([m, r, t]),
        _ => Err(MeritError::input("need one index per factor")),
    }
}

fn query(a: QueryArgs, out: &mut dyn Write) -> Result<i32> {
    let indexes = load_indexes(&a.indexes)?;
    let heads = ordered_heads(&a.heads)?;
    let store = EmbeddingStore::load(&a.store)?;
    let strategy = match (a.fusion, &a.weights) {
        (FusionStrategy::WeightedMean { .. }, Some(w)) => FusionStrategy::WeightedMean {
            weights: w
                .as_slice()
                .try_into()
                .map_err(|_| MeritError::input(format!("--weights needs 3 values, got {}", w.len())))?,
        },
        (_, Some(_)) => return Err(MeritError::input("--weights only applies to --fusion wmean")),
        (s, None) => s,
    };
    let z = store
        .get(&a.clip)
        .ok_or_else(|| MeritError::UnknownId(a.clip.clone()))?;
    let q = project_query([&heads[0], &heads[1], &heads[2]], z)?;
    let res = query_topk(
        [&q[0], &q[1], &q[2]],
        [&indexes[0], &indexes[1], &indexes[2]],
        a.k,
        &strategy,
    )?;
    emit(out, &res.to_json_lines())?;
    Ok(0)
}

#[derive(Serialize)]
struct FuseTuneReport {
    weights: [f64; 3],
    evaluated: usize,
    n: usize,
    accuracy: std::collections::BTreeMap<&'static str, f64>,
    note: &'static str,
}

const CONCAT_NOTE: &str = "concat and mean give identical similarities for unit per-factor vectors; \
                           their rankings can differ only through per-factor shortlists at query time";

fn fuse_tune(a: FuseTuneArgs, out: &mut dyn Write) -> Result<i32> {
    let store = EmbeddingStore::load(&a.store)?;
    let heads = ordered_heads(&a.heads)?;
    let triplets: Vec<_> = load_manifests(&a.validation)?
        .into_iter()
        .flat_map(|m| m.triplets)
        .collect();
    if triplets.is_empty() {
        return Err(MeritError::input("empty validation set"));
    }
    let projectors: [&dyn Projector; 3] = [&heads[0], &heads[1], &heads[2]];
    let scores = factor_triplet_scores(&triplets, projectors, &store)?;
    let tuned = tune_weights_from_scores(&scores, a.grid_step)?;
    let mut accuracy = std::collections::BTreeMap::new();
    for s in [
        FusionStrategy::Mean,
        FusionStrategy::WeightedMean { weights: tuned.weights },
        FusionStrategy::Concat,
        FusionStrategy::Product,
    ] {
        accuracy.insert(s.name(), scores.fused_accuracy(&s)?);
    }
    let report = FuseTuneReport {
        weights: tuned.weights,
        evaluated: tuned.evaluated,
        n: triplets.len(),
        accuracy,
        note: CONCAT_NOTE,
    };
    let text = match a.format {
        Format::Json => to_json(&report),
        Format::Table => {
            let mut t = format!(
                "weights mel={:.2} rhy={:.2} tim={:.2} ({} grid points, {} triplets)\n",
                report.weights[0], report.weights[1], report.weights[2], report.evaluated, report.n
            );
            for (name, acc) in &report.accuracy {
                t.push_str(&format!("{name:<8} {:6.2}\n", 100.0 * acc));
            }
            t.push_str(&format!("note: {}\n", report.note));
            t
        }
    };
    emit(out, &text)?;
    Ok(0)
}

fn store_layout(path: &Path) -> Result<BlockLayout> {
    let (header, _) = read_store(path)?;
    Ok(header.layout())
}

fn attribute(a: AttributeArgs, out: &mut dyn Write) -> Result<i32> {
    let heads = load_heads(&a.heads)?;
    let from_store = a.store.as_deref().map(store_layout).transpose()?;
    let mut rows: Vec<AttributionRow> = Vec::with_capacity(heads.len());
    for h in &heads {
        let layout = match (a.n_blocks, from_store) {
            (Some(n), _) => {
                if n == 0 || h.in_dim % n != 0 {
                    return Err(MeritError::config(format!("{n} blocks do not divide in_dim {}", h.in_dim)));
                }
                BlockLayout::new(n, h.in_dim / n)?
            }
            (None, Some(l)) => l,
            (None, None) => {
                let n = crate::store::DEFAULT_N_BLOCKS;
                if h.in_dim % n != 0 {
                    return Err(MeritError::config(format!(
                        "in_dim {} is not a multiple of {n}; pass --n-blocks or --store",
                        h.in_dim
                    )));
                }
                BlockLayout::new(n, h.in_dim / n)?
            }
        };
        rows.push(attribute_head(h, layout)?);
    }
    let text = match a.format {
        Format::Json => to_json(&rows),
        Format::Table => render_heatmap(&rows),
    };
    emit(out, &text)?;
    Ok(0)
}

fn validate(a: ValidateArgs, out: &mut dyn Write) -> Result<i32> {
    let (header, records) = read_store(&a.store)?;
    let mut report = ValidationReport::default();
    for m in load_manifests(&a.manifest)? {
        report.merge(validate_records(&header, &records, &m));
    }
    emit(out, &to_json(&report))?;
    Ok(if report.is_consistent() { 0 } else { 1 })
}
