use logoprompt_core::bench::{harmonic_mean, read_csv, round2};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_logoprompt"));
    c.env_remove("LOGOPROMPT_OUTPUT_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn logoprompt")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY_PRETRAIN: [&str; 6] = ["--steps", "20", "--per-class", "6", "--eval-per-class", "2"];

fn pretrain_into(dir: &Path, seed: &str) -> Output {
    let mut args = vec!["pretrain", "--seed", seed, "--output-dir", dir.to_str().unwrap()];
    args.extend(TINY_PRETRAIN);
    run(&args)
}

/// One tiny checkpoint shared by the tests below.
fn checkpoint() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let o = pretrain_into(d.path(), "0");
        assert!(o.status.success(), "{}", stderr(&o));
        d
    });
    static PATH: OnceLock<PathBuf> = OnceLock::new();
    PATH.get_or_init(|| dir.path().join("encoder.json"))
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--checkpoint",
        checkpoint().to_str().unwrap(),
        "--output-dir",
        out.to_str().unwrap(),
        "--num-classes",
        "4",
        "--train-per-class",
        "4",
        "--test-per-class",
        "3",
        "--shots",
        "2",
        "--steps",
        "2",
        "--batch-size",
        "4",
    ];
    if !extra.contains(&"--seeds") {
        args.extend(["--seeds", "0,1"]);
    }
    args.extend(extra);
    run(&args)
}

fn csv_in(dir: &Path) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .expect("a CSV output")
}

#[test]
fn help_lists_every_config_field() {
    let o = run(&["run", "--help"]);
    assert!(o.status.success());
    let help = stdout(&o);
    let cfg = toml::Value::try_from(logoprompt_cli::config::RunConfig {
        corruption: Some("contrast(1)".into()),
        m: Some(4),
        checkpoint: Some("x".into()),
        output_dir: Some("y".into()),
        ..Default::default()
    })
    .unwrap();
    let mut flags = Vec::new();
    for (key, value) in cfg.as_table().unwrap() {
        match (key.as_str(), value) {
            ("dataset", toml::Value::Table(t)) => {
                flags.extend(t.keys().map(|k| if k == "seed" { "dataset_seed".to_string() } else { k.clone() }))
            }
            (_, toml::Value::Table(t)) => flags.extend(t.keys().cloned()),
            _ => flags.push(key.clone()),
        }
    }
    assert!(flags.len() > 20);
    for f in flags {
        let flag = format!("--{}", f.replace('_', "-"));
        assert!(help.contains(&flag), "`run --help` does not mention {flag}");
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["run", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["run", "--method", "clip"]).status.code(), Some(1));
    let o = run(&["run", "--shots", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("shots"));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn pretrain_is_reproducible_and_writes_manifest() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let oa = pretrain_into(a.path(), "5");
    let ob = pretrain_into(b.path(), "5");
    assert!(oa.status.success(), "{}", stderr(&oa));
    let checksum = |o: &Output| stdout(o).lines().find(|l| l.starts_with("checksum:")).unwrap().to_string();
    assert_eq!(checksum(&oa), checksum(&ob));
    assert!(stdout(&oa).contains("zero-shot accuracy"));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("corpus_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["class_names"].as_array().unwrap().len(), 16);
    assert_eq!(
        std::fs::read(a.path().join("encoder.json")).unwrap(),
        std::fs::read(b.path().join("encoder.json")).unwrap()
    );
}

#[test]
fn corrupt_pretrain_config_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    for (text, field) in [("steps = 0\n", "steps"), ("per_class = \"lots\"\n", "per_class"), ("learning_rate = 1\n", "learning_rate")] {
        let cfg = d.path().join("pretrain.toml");
        std::fs::write(&cfg, text).unwrap();
        let o = run(&["pretrain", "--config", cfg.to_str().unwrap(), "--output-dir", d.path().to_str().unwrap()]);
        assert_ne!(o.status.code(), Some(0));
        assert!(stderr(&o).contains(field), "{text:?}: {}", stderr(&o));
    }
}

#[test]
fn missing_checkpoint_is_actionable() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["run", "--checkpoint", d.path().join("nope.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("logoprompt pretrain"), "{}", stderr(&o));
}

#[test]
fn env_var_sets_output_root() {
    let d = tempfile::tempdir().unwrap();
    let o = bin()
        .env("LOGOPROMPT_OUTPUT_ROOT", d.path())
        .args(["render", "--class", "fig"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("render").join("prompt.png").exists());
    let o = bin().env("LOGOPROMPT_OUTPUT_ROOT", d.path()).args(["run"]).output().unwrap();
    assert!(stderr(&o).contains(&d.path().join("checkpoint").display().to_string()), "{}", stderr(&o));
}

#[test]
fn zeroshot_takes_no_steps() {
    let d = tempfile::tempdir().unwrap();
    let o = small_run(d.path(), &["--method", "zeroshot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&std::fs::read_to_string(csv_in(d.path())).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.steps == 0));
}

#[test]
fn base_to_new_reports_consistent_h() {
    let d = tempfile::tempdir().unwrap();
    let o = small_run(d.path(), &["--protocol", "base_to_new", "--method", "coop_baseline"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    for label in ["Base:", "New:", "H:"] {
        assert!(text.contains(label), "{text}");
    }
    for r in read_csv(&std::fs::read_to_string(csv_in(d.path())).unwrap()).unwrap() {
        let (b, n) = (r.accuracy_base.unwrap(), r.accuracy_new.unwrap());
        assert_eq!(r.harmonic_mean.unwrap(), round2(harmonic_mean(b, n)));
    }
}

#[test]
fn same_config_gives_identical_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = a.path().join("run.toml");
    std::fs::write(&cfg, "method = \"logoprompt\"\nk = 2\n[budget]\nsteps = 2\n").unwrap();
    for d in [&a, &b] {
        let o = small_run(d.path(), &["--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(csv_in(a.path())).unwrap(), std::fs::read(csv_in(b.path())).unwrap());
}

#[test]
fn flags_override_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    std::fs::write(&cfg, r#"{"method": "coop_baseline", "seeds": [7]}"#).unwrap();
    let o = small_run(d.path(), &["--config", cfg.to_str().unwrap(), "--method", "zeroshot", "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = read_csv(&std::fs::read_to_string(csv_in(d.path())).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "zeroshot");
    assert_eq!(rows[0].seed, 3);
}

#[test]
fn render_is_deterministic_and_honours_placement() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(&["render", "--class", "kiwi", "--seed", "4", "--format", "ppm", "--output-dir", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["prompt.ppm", "conditional.ppm"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let o = run(&["render", "--class", "kiwi", "--placement", "top", "--output-dir", a.path().to_str().unwrap()]);
    assert!(stdout(&o).contains("block origin: (0,"), "{}", stdout(&o));
    assert_eq!(run(&["render", "--class", "durian"]).status.code(), Some(1));
}

#[test]
fn report_aggregates_csvs() {
    let d = tempfile::tempdir().unwrap();
    let o = small_run(d.path(), &["--method", "zeroshot"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json = d.path().join("agg.json");
    let o = run(&["report", d.path().to_str().unwrap(), "--json", json.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("zeroshot"));
    let aggs: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(aggs[0]["seeds"], 2);
    assert_eq!(run(&["report", "/no/such/file.csv"]).status.code(), Some(1));
}
