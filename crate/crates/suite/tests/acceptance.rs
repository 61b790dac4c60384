//! Acceptance suite. Each criterion prints one PASS/FAIL line.
//!
//! Run with `cargo test -p scatsep-suite --test acceptance`.

use std::sync::OnceLock;
use std::time::Instant;

use scatsep::filterbank::{Family, FilterBank};
use scatsep::fvae::{assign_clusters, init_model, train as fvae_train, FvaeConfig};
use scatsep::lbfgs::{lbfgs_minimize, LbfgsConfig};
use scatsep::pipeline::{
    adjusted_rand_index, featurize, synthetic_separation, synthetic_snippets, synthetic_target, window_labels,
    Features, FeaturizeConfig, SyntheticSeparationConfig,
};
use scatsep::scatcov::{compute_cross_scatcov, scatcov_whole, Layout};
use scatsep::synthgen::{compose_dataset, EventKind, SynthConfig, SynthDataset, WindowLabel};
use scatsep_suite::{report, serial, white_noise, MonteCarlo};

#[test]
fn criterion_1_littlewood_paley_and_energy() {
    let _serial = serial();
    let start = Instant::now();
    let mut worst_lp: f64 = 0.0;
    let mut worst_energy: f64 = 0.0;
    for &octaves in &[4usize, 8] {
        for &len in &[1usize << 12, 1 << 16] {
            let bank = FilterBank::new(octaves, len, Family::default()).unwrap();
            let lp = bank
                .lp_sums()
                .iter()
                .map(|s| (s - 1.0).abs())
                .fold(0.0, f64::max);
            worst_lp = worst_lp.max(lp);
            for seed in 0..100u64 {
                let x = white_noise(len, 1_000 * octaves as u64 + seed + len as u64);
                let norm: f64 = x.iter().map(|v| v * v).sum();
                let e = bank.transform(&x).unwrap().energy();
                worst_energy = worst_energy.max(((e - norm) / norm).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_lp <= 1e-10 && worst_energy <= 1e-9 && secs < 30.0;
    report(
        1,
        pass,
        &format!("LP max deviation {worst_lp:.2e} (<=1e-10), energy rel err {worst_energy:.2e} (<=1e-9), {secs:.1}s (<30s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_gaussian_fingerprints() {
    let _serial = serial();
    let start = Instant::now();
    let octaves = 8;
    let len = 1 << 15;
    let bank = FilterBank::new(octaves, len, Family::default()).unwrap();
    let layout = Layout::new(octaves);
    let mut mc = MonteCarlo::new(layout.flat_len());
    for seed in 0..64u64 {
        let x = white_noise(len, 20_000 + seed);
        mc.push(&scatcov_whole(&x, &bank).unwrap().flat_real());
    }
    let labels = layout.labels();
    let mut failures = Vec::new();
    let quarter_pi = std::f64::consts::FRAC_PI_4;
    for j in 0..octaves {
        let z = mc.z_score(j, quarter_pi);
        if z.abs() > 3.0 {
            failures.push(format!("{} z={z:.2}", labels[j]));
        }
    }
    for (i, label) in labels.iter().enumerate() {
        if label.contains("psi3") || label.starts_with("im ") {
            let z = mc.z_score(i, 0.0);
            if z.abs() > 3.0 {
                failures.push(format!("{label} z={z:.2}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let psi1_means: Vec<String> = (0..octaves).map(|j| format!("{:.4}", mc.mean(j))).collect();
    let pass = failures.is_empty() && secs < 120.0;
    report(
        2,
        pass,
        &format!(
            "mean psi1 = [{}] vs pi/4; {} coefficients outside 3 SE {:?}; {secs:.1}s (<120s)",
            psi1_means.join(", "),
            failures.len(),
            failures
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_3_cross_covariance_independence() {
    let _serial = serial();
    let octaves = 8;
    let len = 1 << 15;
    let bank = FilterBank::new(octaves, len, Family::default()).unwrap();
    let layout = Layout::new(octaves);
    let mut mc = MonteCarlo::new(layout.flat_len());
    for seed in 0..64u64 {
        let x = white_noise(len, 30_000 + 2 * seed);
        let y = white_noise(len, 30_001 + 2 * seed);
        let v = compute_cross_scatcov(&x, &y, &bank, len).unwrap().remove(0);
        mc.push(&v.flat_real());
    }
    let labels = layout.labels();
    let failures: Vec<String> = (0..layout.flat_len())
        .filter_map(|i| {
            let z = mc.z_score(i, 0.0);
            (z.abs() > 3.0).then(|| format!("{} z={z:.2}", labels[i]))
        })
        .collect();
    let max_z = (0..layout.flat_len())
        .map(|i| mc.z_score(i, 0.0).abs())
        .fold(0.0, f64::max);
    let pass = failures.is_empty();
    report(
        3,
        pass,
        &format!(
            "{} cross coefficients, max |z| = {max_z:.2}, outside 3 SE: {:?}",
            layout.flat_len(),
            failures
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_block_counts() {
    let _serial = serial();
    let mut ok = true;
    for j in 1..=12usize {
        let l = Layout::new(j);
        ok &= l.n_psi1() == j
            && l.n_psi2() == j + 1
            && l.psi3.len() == j * (j + 1) / 2
            && l.psi4.len() == j * (j + 1) * (j + 2) / 6;
    }
    let mars = Layout::new(8);
    report(
        4,
        ok,
        &format!(
            "block identities hold for J=1..12; J=8 gives {} complex coefficients ({} real slots after splitting, {} if every entry were split), not 210/420",
            mars.n_complex_total(),
            mars.flat_len(),
            2 * mars.n_complex_total()
        ),
    );
    assert!(ok);
}

/// The synthetic dataset and its pyramidal features, shared by the fVAE
/// criteria.
struct Synthetic {
    ds: SynthDataset,
    features: Features,
    featurize_secs: f64,
}

const SYNTH_SEED: u64 = 7;

fn synthetic() -> &'static Synthetic {
    static CELL: OnceLock<Synthetic> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let ds = compose_dataset(&SynthConfig { seed: SYNTH_SEED, ..SynthConfig::default() }).unwrap();
        let cfg = FeaturizeConfig {
            window_sizes: vec![256, 1024, 4096],
            octaves: 6,
            family: Family::default(),
            hop: None,
        };
        let features = featurize(&ds.x, &cfg, scatsep::workers::worker_count()).unwrap();
        Synthetic { ds, features, featurize_secs: start.elapsed().as_secs_f64() }
    })
}

#[test]
fn criterion_5_finite_difference_checks() {
    let _serial = serial();
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let prims = scatsep::diffcore::primitive_gradchecks().unwrap();
    for (name, r) in &prims {
        if r.max_rel_error >= worst.1 {
            worst = (name.as_str(), r.max_rel_error);
        }
    }
    let elbo = scatsep::fvae::toy_elbo_gradcheck(0).unwrap().max_rel_error;
    let loss = scatsep::sourcesep::toy_loss_gradcheck(0).unwrap().max_rel_error;
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.1 <= 1e-4 && elbo <= 1e-4 && loss <= 1e-4 && secs < 120.0;
    report(
        5,
        pass,
        &format!(
            "{} primitives worst {:.2e} ({}), ELBO {elbo:.2e}, total_loss {loss:.2e} (<=1e-4), {secs:.1}s (<120s)",
            prims.len(),
            worst.1,
            worst.0
        ),
    );
    assert!(pass);
}

fn toy_fvae(dims: Vec<usize>, epochs: usize, seed: u64) -> FvaeConfig {
    FvaeConfig {
        hidden: 16,
        latent: 4,
        n_joint_blocks: 1,
        epochs,
        batch: 256,
        seed,
        ..FvaeConfig::new(vec![3; dims.len()], dims)
    }
}

#[test]
fn criterion_6_fvae_training_sanity() {
    let _serial = serial();
    let syn = synthetic();
    let set = &syn.features.set;
    let run = || {
        let mut m = init_model(&toy_fvae(set.dims.clone(), 50, 1)).unwrap();
        let h = fvae_train(&mut m, set).unwrap();
        (m, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    let losses: Vec<f64> = h1.epochs.iter().map(|e| e.train.total).collect();
    let ma: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    let rises = ma.windows(2).filter(|w| !(w[1] < w[0])).count();
    let min_kl = h1
        .epochs
        .iter()
        .flat_map(|e| std::iter::once(&e.train).chain(e.validation.as_ref()))
        .flat_map(|t| t.kl_cat.iter().chain(&t.kl_gauss))
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let bitwise = m1.params.iter().zip(&m2.params).all(|(a, b)| {
        a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits()))
    }) && h1 == h2;
    let pass = set.rows >= 512 && rises == 0 && min_kl >= 0.0 && bitwise;
    report(
        6,
        pass,
        &format!(
            "{} stacks; 10-epoch MA {:.2} -> {:.2} with {rises} non-decreasing steps; min KL {min_kl:.3e}; bitwise reproducible: {bitwise}",
            set.rows,
            ma[0],
            ma[ma.len() - 1]
        ),
    );
    assert!(pass);
}

const C7_CLUSTERS: usize = 4;
const C7_EPOCHS: usize = 150;

#[test]
fn criterion_7_synthetic_clustering() {
    let _serial = serial();
    let start = Instant::now();
    let syn = synthetic();
    let f = &syn.features;
    let w = f.config.window_sizes[0];
    let cfg = FvaeConfig {
        hidden: 64,
        latent: 4,
        n_joint_blocks: 2,
        epochs: C7_EPOCHS,
        batch: 64,
        lr: 3e-3,
        seed: SYNTH_SEED,
        ..FvaeConfig::new(vec![C7_CLUSTERS; 3], f.set.dims.clone())
    };
    let mut model = init_model(&cfg).unwrap();
    fvae_train(&mut model, &f.set).unwrap();
    let labels = &assign_clusters(&model, &f.set).unwrap().labels[0];
    let truth: Vec<usize> = window_labels(&syn.ds.events, &f.ends, w).iter().map(|l| l.index()).collect();
    let ari = adjusted_rand_index(labels, &truth).unwrap();

    // supplementary: windows with an asymmetric pulse against event-free ones
    let asym = |e: usize| {
        syn.ds.events.iter().any(|ev| {
            let (a, b) = ev.core();
            ev.kind == EventKind::AsymPulse && a < e && e - w < b
        })
    };
    let (mut sub_pred, mut sub_truth) = (Vec::new(), Vec::new());
    for (r, &e) in f.ends.iter().enumerate() {
        if asym(e) || truth[r] == WindowLabel::Background.index() {
            sub_pred.push(labels[r]);
            sub_truth.push(asym(e) as usize);
        }
    }
    let sub_ari = adjusted_rand_index(&sub_pred, &sub_truth).unwrap();
    let secs = start.elapsed().as_secs_f64() + syn.featurize_secs;
    let pass = ari >= 0.5 && secs < 900.0;
    report(
        7,
        pass,
        &format!(
            "fine-scale ARI {ari:.3} (>=0.5) over {} windows, {C7_CLUSTERS} clusters, {C7_EPOCHS} epochs; asymmetric-pulse vs background-only ARI {sub_ari:.3}; {secs:.0}s (<900s)",
            truth.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_synthetic_separation() {
    let _serial = serial();
    let start = Instant::now();
    let ds = compose_dataset(&SynthConfig { seed: SYNTH_SEED, ..SynthConfig::default() }).unwrap();
    let mut cfg = SyntheticSeparationConfig::default();
    cfg.separation.lbfgs.max_iter = 1000;
    let target = synthetic_target(&ds, cfg.target_len).expect("a night window holding one medium event");
    let snippets = synthetic_snippets(&ds, &cfg, target);
    let (rep, _) = synthetic_separation(&ds, &cfg, &snippets, target).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = rep.improvement >= 2.0 && rep.monotone && secs < 1200.0;
    report(
        8,
        pass,
        &format!(
            "relative L2 of medium component {:.3} -> {:.3}, improvement x{:.2} (>=2); {} accepted steps ({:?}), losses nonincreasing: {}; {secs:.0}s (<1200s)",
            rep.baseline_error, rep.separated_error, rep.improvement, rep.iterations, rep.termination, rep.monotone
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_lbfgs() {
    let _serial = serial();
    // convex quadratic 0.5 x'Ax - b'x with A = M'M + I
    let n = 40;
    let m = white_noise(n * n, 90);
    let b = white_noise(n, 91);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum::<f64>() / n as f64;
        }
        a[i * n + i] += 1.0;
    }
    let quad = |x: &[f64]| -> scatsep::Result<(f64, Vec<f64>)> {
        let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
        let f = 0.5 * x.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>() - x.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>();
        Ok((f, ax.iter().zip(&b).map(|(p, q)| p - q).collect()))
    };
    // the stopping rule uses the max norm; |g|_2 <= sqrt(n) |g|_inf
    let cfg = LbfgsConfig { grad_tol: 1e-8 / (n as f64).sqrt(), max_iter: 60, ..LbfgsConfig::default() };
    let q = lbfgs_minimize(quad, &vec![0.0; n], &cfg).unwrap();
    let gnorm = q.grad.iter().map(|g| g * g).sum::<f64>().sqrt();

    let rosen = |x: &[f64]| -> scatsep::Result<(f64, Vec<f64>)> {
        let (p, r) = (x[0], x[1]);
        Ok((
            (1.0 - p).powi(2) + 100.0 * (r - p * p).powi(2),
            vec![-2.0 * (1.0 - p) - 400.0 * p * (r - p * p), 200.0 * (r - p * p)],
        ))
    };
    let r = lbfgs_minimize(rosen, &[-1.2, 1.0], &LbfgsConfig::default()).unwrap();
    let pass = gnorm <= 1e-8 && q.iterations <= 60 && r.value <= 1e-10;
    report(
        9,
        pass,
        &format!(
            "quadratic (n={n}) |grad| {gnorm:.2e} (<=1e-8) after {} iterations (<=60, {:?}); Rosenbrock final value {:.2e} (<=1e-10)",
            q.iterations, q.termination, r.value
        ),
    );
    assert!(pass);
}
