use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use likra_cli::run::{sha256_file, RunManifest};

const TABLES: &str = r#"
[dataset.synthetic]
n_entities = 24
n_relations = 2
n_items = 48
n_test = 16
filler_docs = 40

[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32
max_seq_len = 96

[pretrain]
steps = 30

[finetune]
lr = 0.003
"#;

fn config(dir: &Path, name: &str, top: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, format!("seeds = [0]\n{top}\n{TABLES}")).unwrap();
    p
}

fn likra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_likra"))
        .args(args)
        .env_remove(likra_cli::RUN_ROOT_ENV)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

/// Relative path -> sha256 for every file under `root`.
fn tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&p).unwrap().0);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn manifest(run: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let out = likra(&["curve", "--config", "/no/such/likra.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/likra.toml"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(likra(&["curve"]).status.code(), Some(2));
    assert_eq!(likra(&["frobnicate"]).status.code(), Some(2));
    let bad = config(dir.path(), "bad.toml", "colour = \"red\"");
    let out = likra(&["curve", "--config", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let neg = config(dir.path(), "neg.toml", "weight = -1.0");
    assert_eq!(likra(&["curve", "--config", s(&neg), "--out", s(&dir.path().join("r2"))]).status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_manifest_matches_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&likra(&["pretrain", "--config", s(&cfg), "--out", s(&a)]));
    ok(&likra(&["pretrain", "--config", s(&cfg), "--out", s(&b)]));
    let ckpt = "checkpoints/seed0/base.lkb";
    assert_eq!(sha256_file(&a.join(ckpt)).unwrap(), sha256_file(&b.join(ckpt)).unwrap());
    let m = manifest(&a);
    assert!(m.finished.is_some());
    let mut on_disk = tree(&a);
    on_disk.remove("manifest.json");
    let listed: BTreeMap<String, String> = m.outputs.into_iter().map(|f| (f.path, f.sha256)).collect();
    assert_eq!(listed, on_disk);
    // An existing run is never overwritten.
    let again = likra(&["pretrain", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(again.status.code(), Some(2));
}

#[test]
fn run_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "");
    let root = dir.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_likra"))
        .args(["pretrain", "--config", s(&cfg)])
        .env(likra_cli::RUN_ROOT_ENV, &root)
        .output()
        .unwrap();
    ok(&out);
    let runs: Vec<_> = fs::read_dir(&root).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].as_ref().unwrap().path().join("manifest.json").exists());
}

#[test]
fn single_size_gives_one_row_per_curve() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "c.toml",
        "sizes = [16]\ninclude_full_pool = false\ncurves = [\"sft\", \"sft-likra\", \"base-likra\", \"sft-likra-unrelated\"]",
    );
    let run = dir.path().join("r");
    ok(&likra(&["curve", "--config", s(&cfg), "--out", s(&run)]));
    let (header, rows) = read_csv(&run.join("metrics.csv"));
    assert_eq!(header, ["curve_name", "n_examples", "acc", "acc_norm"]);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["sft", "sft-likra", "base-likra", "sft-likra-unrelated"]);
    assert!(rows.iter().all(|r| r[1] == "16"));
}

/// One curve run shared by the consistency checks below.
fn curve_run(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = config(dir, "c.toml", "sizes = [0, 16]\nweights = [0.0, 1.0, 0.5, 1.0]");
    let run = dir.join("curve");
    ok(&likra(&["curve", "--config", s(&cfg), "--out", s(&run)]));
    (cfg, run)
}

fn row<'a>(rows: &'a [Vec<String>], curve: &str, n: &str) -> &'a [String] {
    rows.iter().find(|r| r[0] == curve && r[1] == n).unwrap()
}

#[test]
fn curve_sweep_probe_and_table_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, run) = curve_run(dir.path());
    let (_, rows) = read_csv(&run.join("metrics.csv"));
    let full = rows.iter().map(|r| r[1].parse::<usize>().unwrap()).max().unwrap().to_string();
    let full = full.as_str();

    // Every curve starts at the base model.
    let base = row(&rows, "sft", "0");
    for c in ["sft-likra", "base-likra"] {
        assert_eq!(&row(&rows, c, "0")[2..], &base[2..], "{c}");
    }

    // CSV re-parsed equals the in-memory pipeline.
    let loaded = likra_cli::load_config(&cfg, None).unwrap();
    let data = loaded.dataset.load(0).unwrap();
    let base_w = likra_core::lm::checkpoint::load_base(&run.join("checkpoints/seed0/base.lkb")).unwrap();
    let lab = likra_core::experiment::Lab::new(&loaded, 0, data, base_w, 1).unwrap();
    let mem = likra_core::experiment::run_curves(&lab, |_, _, _| Ok(())).unwrap();
    assert_eq!(mem.rows.len(), rows.len());
    for (m, r) in mem.rows.iter().zip(&rows) {
        assert_eq!(m.curve_name, r[0]);
        assert_eq!(m.n_examples.to_string(), r[1]);
        assert_eq!(m.acc, r[2].parse::<f64>().unwrap());
        assert_eq!(m.acc_norm, r[3].parse::<f64>().unwrap());
    }

    // Sweep from the curve's heads: duplicates dropped with a warning, and
    // w = 0 reproduces the SFT point.
    let before = tree(&run);
    let sweep = dir.path().join("sweep");
    let out = likra(&["sweep-weight", "--config", s(&cfg), "--from", s(&run), "--out", s(&sweep)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let (header, srows) = read_csv(&sweep.join("metrics.csv"));
    assert_eq!(header, ["w", "acc_norm"]);
    let ws: Vec<&str> = srows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ws, ["0", "1", "0.5"]);
    assert_eq!(srows[0][1], row(&rows, "sft", full)[3]);
    assert_eq!(srows[1][1], row(&rows, "sft-likra", full)[3]);

    // Probe over every checkpoint.
    let probe = dir.path().join("probe");
    ok(&likra(&["probe-mass", "--config", s(&cfg), "--from", s(&run), "--out", s(&probe)]));
    let (header, prows) = read_csv(&probe.join("metrics.csv"));
    assert_eq!(header, ["head", "n_examples", "answer_type", "mean_delta_per_char"]);
    assert_eq!(prows.len(), 4 * (1 + 2 * 3));
    for r in prows.iter().filter(|r| r[0] == "base" || r[1] == "0") {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0, "{r:?}");
    }
    for head in ["pos", "neg-incorrect"] {
        for n in ["0", "16", full] {
            let types: Vec<&str> = prows.iter().filter(|r| r[0] == head && r[1] == n).map(|r| r[2].as_str()).collect();
            assert_eq!(types, ["correct", "incorrect", "irrelevant", "unrelated"]);
        }
    }

    // External-table scoring of the emitted table.
    let items = dir.path().join("test.jsonl");
    likra_core::data::write_mcq_jsonl(&items, &lab.data.test).unwrap();
    let table = run.join(format!("tables/seed0/likra-incorrect-n{:04}.jsonl", full.parse::<usize>().unwrap()));
    let et = dir.path().join("table-run");
    ok(&likra(&["eval-table", "--table", s(&table), "--items", s(&items), "--weight", "1", "--out", s(&et)]));
    let (header, erows) = read_csv(&et.join("metrics.csv"));
    assert_eq!(header[3], "acc_norm");
    assert_eq!(erows[0][3].parse::<f64>().unwrap(), row(&rows, "sft-likra", full)[3].parse::<f64>().unwrap());

    // None of the follow-up commands touched the curve run.
    assert_eq!(tree(&run), before);
}

#[test]
fn probe_reports_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "sizes = [0, 16]");
    let pre = dir.path().join("pre");
    ok(&likra(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]));
    let out = likra(&["probe-mass", "--config", s(&cfg), "--from", s(&pre), "--out", s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("0, 16, 32"), "{err}");
}

#[test]
fn finetune_writes_adapter_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "c.toml", "");
    let pre = dir.path().join("pre");
    ok(&likra(&["pretrain", "--config", s(&cfg), "--out", s(&pre)]));
    let ft = dir.path().join("ft");
    ok(&likra(&[
        "finetune", "--config", s(&cfg), "--from", s(&pre), "--head", "neg", "--strategy", "irrelevant", "--n", "8",
        "--out", s(&ft),
    ]));
    let ckpt = likra_core::lm::checkpoint::load_adapter(&ft.join("checkpoints/seed0/neg-irrelevant-n0008.lka")).unwrap();
    let base = likra_core::lm::checkpoint::load_base(&pre.join("checkpoints/seed0/base.lkb")).unwrap();
    ckpt.check_base(&base).unwrap();
    let log = fs::read_to_string(ft.join("logs/neg-irrelevant-n0008-seed0.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);
    let too_many = likra(&[
        "finetune", "--config", s(&cfg), "--head", "pos", "--n", "999", "--out", s(&dir.path().join("ft2")),
    ]);
    assert_eq!(too_many.status.code(), Some(2));
}

#[test]
fn several_seeds_write_per_seed_files_and_their_mean() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, format!("seeds = [0, 1]\nsizes = [16]\ninclude_full_pool = false\ncurves = [\"sft\"]\n{TABLES}")).unwrap();
    let run = dir.path().join("r");
    ok(&likra(&["curve", "--config", s(&p), "--out", s(&run)]));
    let (_, mean) = read_csv(&run.join("metrics.csv"));
    let (_, a) = read_csv(&run.join("metrics-seed0.csv"));
    let (_, b) = read_csv(&run.join("metrics-seed1.csv"));
    let avg = (a[0][3].parse::<f64>().unwrap() + b[0][3].parse::<f64>().unwrap()) / 2.0;
    assert_eq!(mean[0][3].parse::<f64>().unwrap(), avg);
}
