use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/ml20")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let f = fixture();
    let text = format!(
        "seed = 5\nruns = 2\n{extra}\n[dataset]\nkind = \"movielens\"\nname = \"fixture\"\nratings = {:?}\nmovies = {:?}\n",
        f.join("ratings.dat"),
        f.join("movies.dat"),
    );
    let path = dir.join("experiment.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn tapsim(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tapsim"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn full_workflow_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let out = dir.path().join("out");
    for args in [&["ingest"][..], &["profiles", "generate"], &["eval", "discrimination"], &["eval", "rating"], &["probe", "position"]] {
        let o = tapsim(&config, &out, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let report = tapsim(&config, &out, &["report"]);
    assert_eq!(report.status.code(), Some(0));
    let text = stdout(&report);
    assert!(text.contains("## fixture / eval / discrimination"), "{text}");
    assert!(text.contains("## fixture / position / ranking"), "{text}");
    for file in ["config.json", "data/ingest.json", "summary.txt", "summary.csv", "plots/eval-discrimination.csv"] {
        assert!(out.join(file).is_file(), "missing {file}");
    }
    // ingesting unchanged inputs again is a no-op
    let before = std::fs::read(out.join("data/ingest.json")).unwrap();
    assert_eq!(tapsim(&config, &out, &["ingest"]).status.code(), Some(0));
    assert_eq!(before, std::fs::read(out.join("data/ingest.json")).unwrap());
}

#[test]
fn seed_override_changes_the_digest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(tapsim(&config, &a, &["eval", "ranking"]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_tapsim"))
        .args(["--seed", "99", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&b)
        .args(["eval", "ranking"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let digest = |p: &Path| {
        let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("config.json")).unwrap()).unwrap();
        v["digest"].as_str().unwrap().to_string()
    };
    assert_ne!(digest(&a), digest(&b));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "runs = 0\n").unwrap();
    assert_eq!(tapsim(&bad, &out, &["ingest"]).status.code(), Some(1));
    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, "colour = \"blue\"\n").unwrap();
    assert_eq!(tapsim(&unknown, &out, &["ingest"]).status.code(), Some(1));

    let missing = dir.path().join("missing.toml");
    std::fs::write(&missing, "[dataset]\nkind = \"movielens\"\nratings = \"nope/ratings.dat\"\nmovies = \"nope/movies.dat\"\n").unwrap();
    assert_eq!(tapsim(&missing, &out, &["ingest"]).status.code(), Some(2));
    assert_eq!(tapsim(&missing, &dir.path().join("empty"), &["report"]).status.code(), Some(2));

    // strict replay over an empty cache cannot answer anything
    let cache = dir.path().join("empty-cache.ndjson");
    let config = write_config(dir.path(), &format!("[backend]\ncache = {cache:?}"));
    let o = Command::new(env!("CARGO_BIN_EXE_tapsim"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--backend-override", "replay:strict", "eval", "discrimination"])
        .env("RUST_LOG", "off")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
