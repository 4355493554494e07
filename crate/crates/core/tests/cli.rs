use std::path::Path;
use std::process::{Command, Output};

use merit::head::{init_head, save_head};
use merit::retrieval::FactorIndex;
use merit::Factor;

fn merit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_merit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_synth(dir: &Path) {
    let o = merit(dir, &["synth", "--out", "data", "--n-folders", "20", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

const TRAIN_SMALL: [&str; 12] = [
    "--epochs", "2", "--batch-size", "32", "--hidden-dim", "32", "--out-dim", "16", "--seed", "1", "--store",
    "data/store.bin",
];

#[test]
fn help_exits_zero_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(merit(dir.path(), &["--help"]).status.code(), Some(0));
    for sub in ["synth", "train", "eval", "index", "query", "fuse-tune", "attribute", "validate"] {
        let o = merit(dir.path(), &[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("Usage"), "{sub}");
    }
}

#[test]
fn unknown_flag_prints_usage_and_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = merit(dir.path(), &["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(merit(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn missing_input_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = merit(dir.path(), &["validate", "--store", "nope.bin", "--manifest", "nope.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_store_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    std::fs::write(dir.path().join("bad.bin"), b"NOTASTORE_______________________").unwrap();
    let o = merit(dir.path(), &["validate", "--store", "bad.bin", "--manifest", "data/melody.test.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn query_against_empty_index_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let mut args = vec!["query", "--store", "data/store.bin", "--clip", "melody-f0000-a", "--heads"];
    let heads = ["m.head", "r.head", "t.head"];
    let idxs = ["m.idx", "r.idx", "t.idx"];
    for (i, f) in Factor::ALL.into_iter().enumerate() {
        save_head(&init_head(256, 8, 4, f, 0).unwrap(), &dir.path().join(heads[i])).unwrap();
        FactorIndex::from_vectors(f, 4, Vec::new()).unwrap().save(&dir.path().join(idxs[i])).unwrap();
    }
    args.extend(heads);
    args.push("--indexes");
    args.extend(idxs);
    let o = merit(dir.path(), &args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("empty index"), "{}", stderr(&o));
}

#[test]
fn validate_reports_unresolved_ids() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path());
    let ok = merit(dir.path(), &["validate", "--store", "data/store.bin", "--manifest", "data/melody.train.jsonl"]);
    assert_eq!(ok.status.code(), Some(0));
    let text = std::fs::read_to_string(dir.path().join("data/melody.test.jsonl")).unwrap();
    let (header, body) = text.split_once('\n').unwrap();
    let broken = format!("{header}\n{}", body.replacen("melody-f", "ghost-f", 2));
    std::fs::write(dir.path().join("broken.jsonl"), broken).unwrap();
    let o = merit(dir.path(), &["validate", "--store", "data/store.bin", "--manifest", "broken.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(!report["unresolved_ids"].as_array().unwrap().is_empty());
}

#[test]
fn attribute_fresh_heads_is_near_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["attribute".to_string(), "--heads".to_string()];
    for f in Factor::ALL {
        let p = dir.path().join(format!("{f}.head"));
        save_head(&init_head(5120, 64, 16, f, 7).unwrap(), &p).unwrap();
        args.push(p.to_string_lossy().into_owned());
    }
    let argv: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = merit(dir.path(), &argv);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for row in rows.as_array().unwrap() {
        let fr = row["fractions"].as_array().unwrap();
        assert_eq!(fr.len(), 5);
        for x in fr {
            assert!((x.as_f64().unwrap() - 0.2).abs() <= 0.05);
        }
    }
    let mut table = argv.clone();
    table.extend(["--format", "table"]);
    let t = stdout(&merit(dir.path(), &table));
    assert!(t.lines().next().unwrap().contains("23"));
}

#[test]
fn train_index_query_and_tune() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d);
    let mut train = vec!["train", "--factor", "rhythm", "--manifest", "data/rhythm.train.jsonl", "--out", "r.head"];
    train.extend(["--history", "r.csv"]);
    train.extend(TRAIN_SMALL);
    let o = merit(d, &train);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,loss,lr,seconds"));

    // A test manifest is rejected for training.
    let mut bad = vec!["train", "--factor", "rhythm", "--manifest", "data/rhythm.test.jsonl", "--out", "x.head"];
    bad.extend(TRAIN_SMALL);
    assert_eq!(merit(d, &bad).status.code(), Some(1));

    let mut all = vec![
        "train", "--manifest", "data/melody.train.jsonl", "data/rhythm.train.jsonl", "data/timbre.train.jsonl",
        "--out", "heads",
    ];
    all.extend(TRAIN_SMALL);
    assert!(merit(d, &all).status.success());
    for f in ["melody", "rhythm", "timbre"] {
        let o = merit(
            d,
            &["index", "--store", "data/store.bin", "--head", &format!("heads/{f}.head"), "--out", &format!("{f}.idx")],
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let heads = ["heads/melody.head", "heads/rhythm.head", "heads/timbre.head"];
    // Index order on the command line does not matter; the factor tag does.
    let idx = ["timbre.idx", "melody.idx", "rhythm.idx"];
    let mut q = vec!["query", "--store", "data/store.bin", "--clip", "timbre-f0002-p1", "--k", "5"];
    q.push("--heads");
    q.extend(heads);
    q.push("--indexes");
    q.extend(idx);
    q.extend(["--fusion", "product"]);
    let o = merit(d, &q);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|v| v["view"] == "melody").count(), 5);
    let top_timbre = lines.iter().find(|v| v["view"] == "timbre").unwrap();
    assert_eq!(top_timbre["clip_id"], "timbre-f0002-p1");
    assert!((top_timbre["s_tim"].as_f64().unwrap() - 1.0).abs() < 1e-5);
    assert!(lines.iter().all(|v| v["fusion"] == "product"));

    let mut tune = vec!["fuse-tune", "--store", "data/store.bin", "--heads"];
    tune.extend(heads);
    tune.extend(["--validation", "data/melody.test.jsonl", "data/rhythm.test.jsonl", "data/timbre.test.jsonl"]);
    let o = merit(d, &tune);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rep["evaluated"], 231);
    let w: f64 = rep["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    for s in ["mean", "wmean", "concat", "product"] {
        assert!(rep["accuracy"][s].is_number(), "{s}");
    }
}

#[test]
fn eval_json_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_synth(d);
    let mut all = vec![
        "train", "--manifest", "data/melody.train.jsonl", "data/rhythm.train.jsonl", "data/timbre.train.jsonl",
        "--out", "heads", "--parallel-heads",
    ];
    all.extend(TRAIN_SMALL);
    assert!(merit(d, &all).status.success());
    let base = [
        "eval", "--store", "data/store.bin", "--heads", "heads/melody.head", "heads/rhythm.head",
        "heads/timbre.head", "--tests", "data/melody.test.jsonl", "data/rhythm.test.jsonl",
        "data/timbre.test.jsonl", "--raw", "--meta", "data/meta.json",
    ];
    let o = merit(d, &base);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cells = rep["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 12);
    assert_eq!(cells[0]["head"], "raw");
    assert!(!rep["per_class"]["melody"]["classes"].as_object().unwrap().is_empty());

    let mut table = base.to_vec();
    table.extend(["--format", "table"]);
    let t = stdout(&merit(d, &table));
    let rows: Vec<&str> = t.lines().filter(|l| l.contains('±')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("raw"));
}
