use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use titkit::config::RunManifest;
use titkit::raster::Image;

fn titkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_titkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = titkit(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Datasets and briefly trained checkpoints, built once and shared.
struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let p = |r: &str| root.join(r).to_str().unwrap().to_string();
        ok(&["synth", "--kind", "tit", "--n", "8", "--seed", "1", "--out", &p("tit")]);
        ok(&["synth", "--kind", "toy-mt", "--n", "8", "--seed", "2", "--out", &p("mt")]);
        let small = ["--set", "batch_tit=4", "--set", "batch_mt=4", "--set", "batch_ocr=4", "--rounds", "2"];
        let train = |extra: &[&str]| {
            let mut args = vec!["train"];
            args.extend_from_slice(extra);
            args.extend_from_slice(&small);
            ok(&args);
        };
        train(&["--mode", "tit", "--tit", &p("tit"), "--out", &p("e2e")]);
        train(&["--mode", "ocr", "--ocr", &p("tit"), "--out", &p("cascade/ocr")]);
        train(&["--mode", "mt", "--mt", &p("mt"), "--out", &p("cascade/mt")]);
        Fixture { root }
    })
}

#[test]
fn synth_writes_requested_records_and_reruns_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let stdout = ok(&["synth", "--kind", "tit", "--n", "10", "--seed", "4", "--out", s(&first)]);
    assert!(stdout.contains("wrote 10 records"));
    let manifest = std::fs::read_to_string(first.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    assert_eq!(std::fs::read_dir(first.join("images")).unwrap().count(), 10);

    let run = RunManifest::read(&first.join("run.json")).unwrap();
    assert_eq!(run.command, "synth");
    let second = dir.path().join("b");
    let mut argv: Vec<String> = run.argv[1..].to_vec();
    let at = argv.iter().position(|a| a == "--out").unwrap();
    argv[at + 1] = s(&second).to_string();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    ok(&argv);
    let (mut a, mut b) = (snapshot(&first), snapshot(&second));
    a.remove(Path::new("run.json"));
    b.remove(Path::new("run.json"));
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(titkit(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(titkit(&["synth", "--kind", "tit"]).status.code(), Some(2));
    assert_eq!(titkit(&["train", "--mode", "everything", "--out", "x"]).status.code(), Some(2));
    assert_eq!(titkit(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_1() {
    let out = titkit(&["eval", "--ckpt", "/nonexistent/model.titk", "--dataset", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let dir = tempfile::tempdir().unwrap();
    let out = titkit(&["synth", "--kind", "tit", "--n", "2", "--out", s(dir.path()), "--set", "learning_rate=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_checkpoint_metrics_and_manifest() {
    let f = fixture();
    for dir in ["e2e", "cascade/ocr", "cascade/mt"] {
        let d = f.path(dir);
        assert!(d.join("model.titk").is_file(), "{dir}");
        let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3, "{dir}: header plus one line per update");
        let run = RunManifest::read(&d.join("run.json")).unwrap();
        assert_eq!(run.command, "train");
        assert_eq!(run.outputs, vec!["model.titk", "metrics.csv"]);
    }
}

#[test]
fn translate_is_deterministic_and_leaves_inputs_alone() {
    let f = fixture();
    let image = f.path("tit/images");
    let image = std::fs::read_dir(&image).unwrap().next().unwrap().unwrap().path();
    let before = (snapshot(&f.path("tit")), snapshot(&f.path("e2e")));
    let ckpt = f.path("e2e");
    let args = ["translate", "--ckpt", s(&ckpt), "--image", s(&image)];
    let a = ok(&args);
    let b = ok(&args);
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 1);
    assert_eq!(before, (snapshot(&f.path("tit")), snapshot(&f.path("e2e"))));

    let dump = tempfile::tempdir().unwrap();
    let mut dumped = args.to_vec();
    dumped.extend(["--dump-normalized", s(dump.path())]);
    assert_eq!(ok(&dumped), a);
    let png = dump.path().join(format!("{}.normalized.png", image.file_stem().unwrap().to_str().unwrap()));
    let img = Image::load_png(&png).unwrap();
    assert_eq!((img.height, img.width), (32, 64));
}

#[test]
fn corrupt_or_misshapen_images() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let corrupt = dir.path().join("corrupt.png");
    std::fs::write(&corrupt, b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let out = titkit(&["translate", "--ckpt", s(&f.path("e2e")), "--image", s(&corrupt)]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(std::fs::read(&corrupt).unwrap(), b"\x89PNG\r\n\x1a\nnot really");

    let wrong = dir.path().join("wrong.png");
    Image::new(20, 30, vec![0.5; 20 * 30 * 3]).save_png(&wrong).unwrap();
    let out = titkit(&["translate", "--ckpt", s(&f.path("e2e")), "--image", s(&wrong)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--resize"));
    ok(&["translate", "--ckpt", s(&f.path("e2e")), "--image", s(&wrong), "--resize"]);
}

fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap()
}

const REPORT_KEYS: [&str; 6] = ["bleu", "cer", "params", "latency", "param_reduction_pct", "latency_reduction_pct"];

#[test]
fn eval_report_has_every_key() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let report = out.path().join("report.json");
    let before = snapshot(&f.path("tit"));
    let stdout = ok(&[
        "eval",
        "--ckpt",
        s(&f.path("e2e")),
        "--dataset",
        s(&f.path("tit")),
        "--metric",
        "both",
        "--report",
        s(&report),
    ]);
    assert_eq!(before, snapshot(&f.path("tit")));
    let v = json(&stdout);
    assert_eq!(v, json(&std::fs::read_to_string(&report).unwrap()));
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    let mut expect = REPORT_KEYS.to_vec();
    expect.sort();
    assert_eq!(keys, expect);
    assert!(v["bleu"].is_f64());
    assert!(v["cer"].is_null(), "a TIT-only model has no OCR head");
    assert!(v["params"]["e2e"]["total"].is_u64());
    assert!(out.path().join("run.json").is_file());

    // The cascade directory is evaluated as one system, including CER of its OCR stage.
    let stdout = ok(&["eval", "--ckpt", s(&f.path("cascade")), "--dataset", s(&f.path("tit"))]);
    let v = json(&stdout);
    assert!(v["bleu"].is_f64() && v["cer"].is_f64());
    assert!(v["params"]["cascade"]["total"].is_u64());
}

#[test]
fn bench_compares_e2e_with_cascade() {
    let f = fixture();
    let stdout = ok(&[
        "bench",
        "--ckpt",
        s(&f.path("e2e")),
        "--cascade-ckpt",
        s(&f.path("cascade")),
        "--dataset",
        s(&f.path("tit")),
        "--limit",
        "4",
    ]);
    let v = json(&stdout);
    for system in ["e2e", "cascade"] {
        assert_eq!(v["latency"][system]["sentences"], 4);
        assert!(v["params"][system]["total"].as_u64().unwrap() > 0);
    }
    let e2e = v["params"]["e2e"]["total"].as_f64().unwrap();
    let cascade = v["params"]["cascade"]["total"].as_f64().unwrap();
    let pct = v["param_reduction_pct"].as_f64().unwrap();
    assert!((pct - 100.0 * (cascade - e2e) / cascade).abs() < 1e-9);
    assert!(v["latency_reduction_pct"].is_f64());
}

#[test]
fn cascade_translate_shows_intermediate_text() {
    let f = fixture();
    let image = std::fs::read_dir(f.path("tit/images")).unwrap().next().unwrap().unwrap().path();
    let ocr = f.path("cascade/ocr");
    let mt = f.path("cascade/mt");
    let args = ["cascade-translate", "--ocr", s(&ocr), "--mt", s(&mt), "--image", s(&image)];
    let plain = ok(&args);
    let mut verbose = args.to_vec();
    verbose.push("--show-intermediate");
    let shown = ok(&verbose);
    let lines: Vec<&str> = shown.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("ocr: "));
    assert_eq!(lines[1], format!("translation: {}", plain.trim_end_matches('\n')));
}

#[test]
fn ablate_emits_one_row_per_system() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "ablate",
        "--grid",
        "default",
        "--seeds",
        "0",
        "--set",
        "rounds=1",
        "--set",
        "n_train=4",
        "--set",
        "n_test=2",
        "--set",
        "n_mt=4",
        "--set",
        "batch_tit=2",
        "--set",
        "batch_mt=2",
        "--set",
        "batch_ocr=2",
        "--out",
        s(dir.path()),
    ]);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows.len(), 2 + 4);
    assert!(rows[0].starts_with("| system | median BLEU"));
    for (row, name) in rows[2..].iter().zip(["tit+mt+ocr", "tit+mt", "tit", "tit+mt+ocr no-tps"]) {
        assert!(row.starts_with(&format!("| {name} |")), "{row}");
    }
    assert_eq!(std::fs::read_to_string(dir.path().join("table.md")).unwrap(), stdout);
    let report = json(&std::fs::read_to_string(dir.path().join("ablation.json")).unwrap());
    assert_eq!(report["runs"].as_array().unwrap().len(), 4);
    let run = RunManifest::read(&dir.path().join("run.json")).unwrap();
    assert_eq!(run.config.rounds, Some(1));
    assert_eq!(run.config.seeds, Some(vec![0]));
}

#[test]
fn config_file_loses_to_set_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 5\nmax_len = 3\nmin_len = 3\n").unwrap();
    let out = dir.path().join("mt");
    ok(&[
        "synth", "--kind", "toy-mt", "--n", "3", "--config", s(&cfg), "--set", "max_len=4", "--set", "min_len=4",
        "--seed", "9", "--out", s(&out),
    ]);
    let run = RunManifest::read(&out.join("run.json")).unwrap();
    assert_eq!(run.seed, Some(9));
    assert_eq!(run.config.max_len, Some(4));
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    for line in manifest.lines() {
        let v = json(line);
        assert_eq!(v["source"].as_str().unwrap().chars().count(), 4);
    }
}
