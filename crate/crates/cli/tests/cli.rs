use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_scatsep"));
    c.env("SCATSEP_WORKERS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scatsep")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "scatsep {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("scatsep-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

fn digests(list: &Value) -> Vec<(String, String)> {
    list.as_array()
        .unwrap()
        .iter()
        .map(|a| (a["path"].as_str().unwrap().to_owned(), a["sha256"].as_str().unwrap().to_owned()))
        .collect()
}

/// A four-day dataset pushed through every stage.
fn chain(root: &Path) {
    let ds = root.join("ds");
    let feat = root.join("feat");
    let model = root.join("model");
    let asg = root.join("asg");
    ok(&["synth", "--days", "4", "--seed", "3", "-o", s(&ds)]);
    ok(&["featurize", s(&ds), "--scales", "256,1024,4096", "-J", "5", "-o", s(&feat)]);
    ok(&[
        "train", s(&feat), "--clusters", "3", "--hidden", "16", "--latent", "4", "--blocks", "1",
        "--epochs", "2", "--batch", "64", "--seed", "5", "-o", s(&model),
    ]);
    ok(&["assign", s(&model), s(&feat), "-o", s(&asg)]);
}

#[test]
fn stages_chain_through_manifests() {
    let root = scratch("chain");
    chain(&root);
    let hist = root.join("hist");
    ok(&["histogram", s(&root.join("asg")), "--features", s(&root.join("feat")), "--bins", "24", "-o", s(&hist)]);

    for stage in ["ds", "feat", "model", "asg", "hist"] {
        let m = manifest(&root.join(stage));
        assert_eq!(m["schema_version"], 1);
        for (path, digest) in digests(&m["artifacts"]) {
            let bytes = std::fs::read(root.join(stage).join(&path)).unwrap();
            assert_eq!(scatsep::storage::sha256_hex(&bytes), digest, "{stage}/{path}");
        }
    }
    // each stage records the artifacts of the stage it consumed
    let produced = digests(&manifest(&root.join("feat"))["artifacts"]);
    let consumed = digests(&manifest(&root.join("model"))["inputs"]);
    for a in &produced {
        assert!(consumed.contains(a), "{a:?} missing from train inputs");
    }

    let csv = std::fs::read_to_string(hist.join("histogram.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 24);
    assert_eq!(lines[0].split(',').count(), 1 + 3 * 3);
    let asg = scatsep::pipeline::read_assignments(&root.join("asg")).unwrap();
    let total: u64 = lines[1..]
        .iter()
        .flat_map(|l| l.split(',').skip(1).take(3))
        .map(|v| v.parse::<u64>().unwrap())
        .sum();
    assert_eq!(total as usize, asg.end.len());
}

#[test]
fn training_is_deterministic() {
    let a = scratch("det-a");
    let b = scratch("det-b");
    chain(&a);
    chain(&b);
    for f in ["params.f64", "model.json"] {
        assert_eq!(
            std::fs::read(a.join("model").join(f)).unwrap(),
            std::fs::read(b.join("model").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        std::fs::read(a.join("asg").join("assignments.csv")).unwrap(),
        std::fs::read(b.join("asg").join("assignments.csv")).unwrap()
    );
    for stage in ["ds", "feat", "model", "asg"] {
        let strip = |mut m: Value| {
            m.as_object_mut().unwrap().remove("timings_ms");
            m
        };
        assert_eq!(strip(manifest(&a.join(stage))), strip(manifest(&b.join(stage))), "{stage}");
    }
    let out = root_eval(&a);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["task"], "clustering");
    assert_eq!(v["scales"].as_array().unwrap().len(), 3);
}

fn root_eval(root: &Path) -> Output {
    ok(&[
        "eval", "--task", "clustering", "--dataset", s(&root.join("ds")), "--features", s(&root.join("feat")),
        "--assignments", s(&root.join("asg")), "-o", s(&root.join("eval")),
    ])
}

#[test]
fn errors_are_json_on_stderr() {
    let root = scratch("errors");
    let missing = root.join("nothing-here");
    let out = run(&["featurize", s(&missing), "-o", s(&root.join("f"))]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(v["error"]["kind"], "io");
    assert!(v["error"]["message"].as_str().unwrap().contains("nothing-here"));

    let out = run(&["featurize"]);
    assert_eq!(out.status.code(), Some(2));
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "usage");

    let ds = root.join("ds");
    ok(&["synth", "--days", "2", "-o", s(&ds)]);
    let out = run(&["featurize", s(&ds), "--scales", "256,1000", "-o", s(&root.join("f"))]);
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(["sizing", "config"].contains(&v["error"]["kind"].as_str().unwrap()), "{v}");

    let out = run(&["featurize", s(&ds), "--family", "haar", "-o", s(&root.join("f"))]);
    let v: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(v["error"]["kind"], "unknown_family");

    assert!(run(&["--help"]).status.success());
}

#[test]
fn gradcheck_reports_every_graph() {
    let out = ok(&["gradcheck", "--what", "all"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["pass"], true);
    let names: Vec<&str> = v["checks"].as_array().unwrap().iter().map(|c| c["graph"].as_str().unwrap()).collect();
    assert!(names.contains(&"elbo") && names.contains(&"total_loss"));
    assert!(names.len() > 10);
}
