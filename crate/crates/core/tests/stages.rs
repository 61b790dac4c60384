//! Library-level round trips through every stage on a small synthetic run.

use std::path::PathBuf;

use scatsep::filterbank::Family;
use scatsep::fvae::{self, FvaeConfig};
use scatsep::pipeline::{self, FeaturizeConfig, RunManifest, SyntheticSeparationConfig};
use scatsep::synthgen::{compose_dataset, read_dataset, write_dataset, SynthConfig};
use scatsep::Error;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("scatsep-stages-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn small() -> SynthConfig {
    SynthConfig { n_days: 4, seed: 2, ..SynthConfig::default() }
}

#[test]
fn features_model_and_assignments_round_trip() {
    let root = scratch("roundtrip");
    let ds = compose_dataset(&small()).unwrap();
    write_dataset(&ds, &root.join("ds")).unwrap();
    let back = read_dataset(&root.join("ds")).unwrap();
    assert_eq!((&back.config, &back.events), (&ds.config, &ds.events));
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p - q).abs() <= 1e-6 * q.abs().max(1.0));
    assert!(close(&back.x, &ds.x) && close(&back.x_medium, &ds.x_medium) && close(&back.gate, &ds.gate));

    let store = pipeline::synth_signal(&ds);
    pipeline::write_signal(&root.join("ds"), &store.samples, &store.meta).unwrap();
    let back = pipeline::ingest_dir(&root.join("ds")).unwrap();
    // float32 on disk
    assert!(back.samples.iter().zip(&ds.x).all(|(a, b)| (a - b).abs() <= 1e-6 * b.abs().max(1.0)));

    let cfg = FeaturizeConfig {
        window_sizes: vec![256, 1024],
        octaves: 4,
        family: Family::default(),
        hop: Some(512),
    };
    let f = pipeline::featurize(&back.samples, &cfg, 2).unwrap();
    assert_eq!(f, pipeline::featurize(&back.samples, &cfg, 1).unwrap(), "worker count changes features");
    pipeline::write_features(&root.join("feat"), &f, &back.meta).unwrap();
    let (h, f2) = pipeline::read_features(&root.join("feat")).unwrap();
    assert_eq!(f2, f);
    assert_eq!(h.rows, f.ends.len());

    let mcfg = FvaeConfig {
        hidden: 8,
        latent: 2,
        n_joint_blocks: 1,
        epochs: 2,
        batch: 16,
        seed: 4,
        ..FvaeConfig::new(vec![2, 3], f.set.dims.clone())
    };
    let mut model = fvae::init_model(&mcfg).unwrap();
    fvae::train(&mut model, &f.set).unwrap();
    fvae::save_checkpoint(&model, &root.join("model")).unwrap();
    let loaded = fvae::load_checkpoint(&root.join("model")).unwrap();
    let a = fvae::assign_clusters(&model, &f.set).unwrap();
    assert_eq!(fvae::assign_clusters(&loaded, &f.set).unwrap(), a);

    let times: Vec<f64> = f.ends.iter().map(|&e| e as f64).collect();
    pipeline::write_assignments(&root.join("asg"), &a, &times).unwrap();
    assert_eq!(pipeline::read_assignments(&root.join("asg")).unwrap(), a);

    let mut m = RunManifest::new("assign", Some(4), &mcfg).unwrap();
    m.add_dir_artifacts(&root.join("asg")).unwrap();
    m.write(&root.join("asg")).unwrap();
    let read = RunManifest::read(&root.join("asg")).unwrap();
    read.verify(&root.join("asg")).unwrap();
    std::fs::write(root.join("asg").join(pipeline::ASSIGNMENTS_CSV), "tampered").unwrap();
    assert!(matches!(read.verify(&root.join("asg")), Err(Error::Digest(_))));
}

#[test]
fn tampered_feature_blob_is_rejected() {
    let root = scratch("tamper");
    let ds = compose_dataset(&small()).unwrap();
    let store = pipeline::synth_signal(&ds);
    let cfg = FeaturizeConfig {
        window_sizes: vec![256],
        octaves: 3,
        family: Family::default(),
        hop: Some(4096),
    };
    let f = pipeline::featurize(&store.samples, &cfg, 1).unwrap();
    pipeline::write_features(&root, &f, &store.meta).unwrap();
    let blob = root.join("scale0.f64");
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[3] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    assert!(matches!(pipeline::read_features(&root), Err(Error::Digest(_))));
}

#[test]
fn short_synthetic_separation_decreases_the_loss() {
    let ds = compose_dataset(&SynthConfig { n_days: 8, seed: 3, ..SynthConfig::default() }).unwrap();
    let mut cfg = SyntheticSeparationConfig {
        target_len: 2048,
        prior_scale: 512,
        octaves: 4,
        n_snippets: 6,
        ..SyntheticSeparationConfig::default()
    };
    cfg.separation.lbfgs.max_iter = 5;
    let Some(target) = pipeline::synthetic_target(&ds, cfg.target_len) else {
        panic!("no qualifying target window");
    };
    let snippets = pipeline::synthetic_snippets(&ds, &cfg, target);
    assert_eq!(snippets.len(), 6);
    assert!(snippets.iter().all(|&s| s + 512 <= target || s >= target + 2048));
    let (report, result) = pipeline::synthetic_separation(&ds, &cfg, &snippets, target).unwrap();
    assert!(report.monotone);
    assert!(report.final_loss.total < report.initial_loss.total);
    assert_eq!(result.residual_history.len(), report.iterations);

    let dir = scratch("sep");
    let ids = snippets.iter().map(|s| s.to_string()).collect();
    scatsep::sourcesep::write_result(&dir, &result, 512, 4, ids, &cfg.separation).unwrap();
    let (h, s1, res) = scatsep::sourcesep::read_result(&dir).unwrap();
    assert_eq!(h.iterations, result.iterations);
    assert_eq!(s1.len(), 2048);
    assert_eq!(res.len(), 2048);
}
