use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn drda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drda"))
        .args(args)
        .current_dir(dir)
        .env_remove("DRDA_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = drda(dir, args);
    assert!(
        out.status.success(),
        "drda {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A scratch directory holding copies of the toy corpus.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in ["toy.de", "toy.en"] {
        fs::copy(Path::new(FIXTURES).join(f), dir.path().join(f)).unwrap();
    }
    dir
}

const RUN_TOML: &str = "merges = 60\nsteps = 15\nwarmup = 5\nbatch_size = 8\nd_model = 16\nffn_dim = 32\nn_layers = 1\nseed = 3\nbeam = 2\nmax_len = 20\n";

/// clean → train-bpe → augment → train → translate → export-emb → analyze,
/// with every output under `out/`.
fn pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), RUN_TOML).unwrap();
    let c = ["--config", "run.toml"];
    let run = |args: &[&str]| ok(dir, &[&c[..], args].concat());
    run(&["clean", "--src", "toy.de", "--tgt", "toy.en", "--out-prefix", "out/clean"]);
    run(&["train-bpe", "--input", "out/clean.src,out/clean.tgt", "--model", "out/bpe.model"]);
    run(&["augment", "--model", "out/bpe.model", "--prime", "80", "--augs", "50", "--src", "out/clean.src", "--tgt", "out/clean.tgt", "--out", "out/data.jsonl"]);
    run(&["train", "--data", "out/data.jsonl", "--bpe", "out/bpe.model", "--out", "out/run"]);
    run(&["translate", "--model", "out/run", "--bpe", "out/bpe.model", "--sizes", "80,50", "--in", "out/clean.src", "--out", "out/hyp.txt", "--ref", "out/clean.tgt", "--report", "out/report.csv"]);
    run(&["translate", "--model", "out/run", "--bpe", "out/bpe.model", "--sizes", "80,50", "--select", "oracle", "--in", "out/clean.src", "--out", "out/oracle.txt", "--ref", "out/clean.tgt"]);
    run(&["export-emb", "--model", "out/run", "--bpe", "out/bpe.model", "--out", "out/emb.txt"]);
    run(&["analyze", "freq-drop", "--model", "out/bpe.model", "--small", "50", "--large", "80", "--corpus", "out/clean.src", "--out", "out/freq.csv"]);
    run(&["analyze", "ssc", "--emb", "out/emb.txt", "--vocab", "out/bpe.model.vocab", "--out", "out/ssc.csv"]);
    run(&["analyze", "neighbors", "--emb", "out/emb.txt", "--token", "\u{2581}the", "--n", "3", "--out", "out/nn.csv"]);
}

const ARTIFACTS: &[&str] = &[
    "clean.src",
    "clean.tgt",
    "clean.run.toml",
    "bpe.model",
    "bpe.model.vocab",
    "data.jsonl",
    "run/model.json",
    "run/config.toml",
    "run/steps.csv",
    "run/epochs.csv",
    "hyp.txt",
    "report.csv",
    "oracle.txt",
    "emb.txt",
    "freq.csv",
    "ssc.csv",
    "nn.csv",
];

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["clean", "perturb", "train-bpe", "segment", "segment-multi", "augment", "train", "translate", "check-grad", "analyze", "export-emb"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
        ok(dir.path(), &[cmd, "--help"]);
    }
    for sub in ["freq-drop", "neighbors", "ssc"] {
        ok(dir.path(), &["analyze", sub, "--help"]);
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = drda(dir.path(), &["clean", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--bogus-flag"));

    let o = drda(dir.path(), &["segmnt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("segment"), "no suggestion: {}", stderr(&o));

    let o = drda(dir.path(), &["perturb", "--in", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    let o = drda(dir.path(), &["train", "--steps", "many"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn data_errors_exit_two() {
    let dir = workspace();
    let o = drda(dir.path(), &["perturb", "--in", "missing.txt", "--out", "o.txt"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("short.en"), "one line\n").unwrap();
    let o = drda(dir.path(), &["clean", "--src", "toy.de", "--tgt", "short.en", "--out-prefix", "c"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_pipeline_on_toy_corpus() {
    let dir = workspace();
    pipeline(dir.path());
    for a in ARTIFACTS {
        assert!(dir.path().join("out").join(a).is_file(), "missing {a}");
    }
    // Nothing outside out/ besides the inputs and the config file.
    let mut top: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    top.sort();
    assert_eq!(top, ["out", "run.toml", "toy.de", "toy.en"]);

    let hyp = fs::read_to_string(dir.path().join("out/hyp.txt")).unwrap();
    assert_eq!(hyp.lines().count(), 80);
    let freq = fs::read_to_string(dir.path().join("out/freq.csv")).unwrap();
    assert!(freq.starts_with("token,id,freq_small,freq_large,drop_rate\n"));
    let ssc = fs::read_to_string(dir.path().join("out/ssc.csv")).unwrap();
    assert!(ssc.lines().last().unwrap().starts_with("<average>,"));
    let config = fs::read_to_string(dir.path().join("out/run/config.toml")).unwrap();
    assert!(config.contains("steps = 15 # config"));
    assert!(config.contains("alpha = 5.0 # default"));
}

#[test]
fn runs_are_reproducible() {
    let (a, b) = (workspace(), workspace());
    pipeline(a.path());
    pipeline(b.path());
    for f in ARTIFACTS {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn flag_overrides_config_file() {
    let dir = workspace();
    fs::write(dir.path().join("c.toml"), "merges = 10\nmodel = \"from_file.model\"\n").unwrap();
    ok(dir.path(), &["--config", "c.toml", "train-bpe", "--input", "toy.de", "--merges", "5"]);
    let model = fs::read_to_string(dir.path().join("from_file.model")).unwrap();
    assert_eq!(model.lines().filter(|l| !l.starts_with('#')).count(), 5);
    let echo = fs::read_to_string(dir.path().join("from_file.model.run.toml")).unwrap();
    assert!(echo.contains("merges = 5 # flag"));
    assert!(echo.contains("model = \"from_file.model\" # config"));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = workspace();
    let with_env = Command::new(env!("CARGO_BIN_EXE_drda"))
        .args(["perturb", "--in", "toy.de", "--p", "0.2", "--out", "env.txt"])
        .current_dir(dir.path())
        .env("DRDA_SEED", "42")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(with_env.success());
    ok(dir.path(), &["perturb", "--in", "toy.de", "--p", "0.2", "--seed", "42", "--out", "flag.txt"]);
    ok(dir.path(), &["perturb", "--in", "toy.de", "--p", "0.2", "--out", "default.txt"]);
    let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("env.txt"), read("flag.txt"));
    assert_ne!(read("env.txt"), read("default.txt"));
    assert!(read("env.txt.run.toml").contains("seed = 42 # env"));
}

#[test]
fn perturb_zero_is_identity() {
    let dir = workspace();
    ok(dir.path(), &["perturb", "--in", "toy.de", "--p", "0", "--out", "same.txt"]);
    assert_eq!(
        fs::read(dir.path().join("same.txt")).unwrap(),
        fs::read(dir.path().join("toy.de")).unwrap()
    );
}

#[test]
fn segment_and_segment_multi_agree() {
    let dir = workspace();
    ok(dir.path(), &["train-bpe", "--input", "toy.de", "--merges", "40", "--model", "m"]);
    ok(dir.path(), &["segment", "--model", "m", "--size", "30", "--in", "toy.de", "--out", "s30"]);
    ok(dir.path(), &["segment-multi", "--model", "m", "--prime", "50", "--augs", "30,40", "--in", "toy.de", "--out-prefix", "multi"]);
    let read = |f: &str| fs::read_to_string(dir.path().join(f)).unwrap();
    assert_eq!(read("s30"), read("multi.30"));
    for f in ["multi.50", "multi.40"] {
        assert_eq!(read(f).lines().count(), 80);
    }
    // Joining tokens and turning markers into spaces restores the text.
    let restored: Vec<String> = read("multi.50")
        .lines()
        .map(|l| l.replace(' ', "").replace('\u{2581}', " ").trim_start().to_string())
        .collect();
    let original: Vec<String> = read("toy.de").lines().map(str::to_string).collect();
    assert_eq!(restored, original);
}

#[test]
fn non_joint_writes_one_model_per_input() {
    let dir = workspace();
    ok(dir.path(), &["train-bpe", "--input", "toy.de,toy.en", "--no-joint", "--merges", "20", "--model", "sep"]);
    for f in ["sep.0", "sep.1", "sep.0.vocab", "sep.1.vocab"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
}

#[test]
fn check_grad_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["check-grad"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn translate_rejects_foreign_bpe_model() {
    let dir = workspace();
    pipeline(dir.path());
    ok(dir.path(), &["train-bpe", "--input", "toy.de", "--merges", "30", "--model", "out/other.model"]);
    let o = drda(dir.path(), &["translate", "--model", "out/run", "--bpe", "out/other.model", "--sizes", "40", "--in", "toy.de", "--out", "out/x.txt"]);
    assert_eq!(o.status.code(), Some(2));
}
