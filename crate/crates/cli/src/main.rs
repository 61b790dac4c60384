use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use scatsep::diffcore;
use scatsep::filterbank::{Family, FilterBank};
use scatsep::fvae::{self, FvaeConfig};
use scatsep::lbfgs::LbfgsConfig;
use scatsep::pipeline::{self, FeaturizeConfig, RunManifest, SyntheticSeparationConfig};
use scatsep::sourcesep::{self, SeparationConfig};
use scatsep::synthgen::{self, Amplitudes, SynthConfig};
use scatsep::workers;

#[derive(Parser)]
#[command(name = "scatsep", version, about = "Multi-scale clustering and source separation with scattering covariances")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-scale dataset.
    Synth(SynthArgs),
    /// Compute pyramidal scattering covariance features of a signal.
    Featurize(FeaturizeArgs),
    /// Train the factorial mixture autoencoder on a feature store.
    Train(TrainArgs),
    /// Assign every window to a cluster at each scale.
    Assign(AssignArgs),
    /// Time-of-day histogram of cluster assignments.
    Histogram(HistogramArgs),
    /// Sample decoded feature vectors of one cluster.
    Sample(SampleArgs),
    /// Separate a source from a mixture window using cluster snippets.
    Separate(SeparateArgs),
    /// Score clustering or separation on a synthetic dataset.
    Eval(EvalArgs),
    /// Finite-difference checks of the differentiable graphs.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4096)]
    w_large: usize,
    #[arg(long, default_value_t = 1024)]
    w_medium: usize,
    #[arg(long, default_value_t = 256)]
    w_fine: usize,
    #[arg(long, default_value_t = 256)]
    eta: usize,
    #[arg(long, default_value_t = 0.05)]
    lambda2: f64,
    /// Component RMS as large,medium,fine.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.0, 1.0])]
    amplitudes: Vec<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct FeaturizeArgs {
    /// Directory holding signal.f32 and signal.json.
    input: PathBuf,
    /// Window sizes, finest first, each 4x the previous.
    #[arg(long, value_delimiter = ',', default_values_t = [256usize, 1024, 4096])]
    scales: Vec<usize>,
    #[arg(long = "octaves", short = 'J', default_value_t = 6)]
    octaves: usize,
    /// Stride between window stacks; the finest window by default.
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, default_value = "battle-lemarie")]
    family: String,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    features: PathBuf,
    /// Clusters per scale; one value applies to every scale.
    #[arg(long, value_delimiter = ',', default_values_t = [9usize])]
    clusters: Vec<usize>,
    #[arg(long, default_value_t = 1024)]
    hidden: usize,
    #[arg(long, default_value_t = 32)]
    latent: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    #[arg(long, default_value_t = 16384)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    tau0: f64,
    #[arg(long, default_value_t = 0.5)]
    tau_min: f64,
    #[arg(long, default_value_t = 3e-3)]
    tau_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AssignArgs {
    model: PathBuf,
    features: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct HistogramArgs {
    assignments: PathBuf,
    /// Feature store the assignments were computed from (for timestamps).
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value_t = pipeline::DEFAULT_HISTOGRAM_BINS)]
    bins: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    model: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    cluster: usize,
    #[arg(short = 'n', long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SeparateArgs {
    /// Signal directory (signal.f32 + signal.json) or synthetic dataset.
    input: PathBuf,
    /// Use the synthetic configuration: a night window holding one medium
    /// event, with night background snippets as the prior.
    #[arg(long)]
    synthetic: bool,
    /// First sample of the mixture window.
    #[arg(long)]
    start: Option<usize>,
    /// Length of the mixture window; a multiple of the prior scale.
    #[arg(long, default_value_t = 4096)]
    length: usize,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Window size of the prior cluster's scale.
    #[arg(long, default_value_t = 1024)]
    prior_scale: usize,
    #[arg(long)]
    prior_cluster: Option<usize>,
    #[arg(long, default_value_t = 32)]
    snippets: usize,
    #[arg(long = "octaves", short = 'J', default_value_t = 6)]
    octaves: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalTask {
    Clustering,
    Separation,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: EvalTask,
    /// Synthetic dataset directory.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    /// Existing separation output; the separation is run when absent.
    #[arg(long)]
    result: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    snippets: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradTarget {
    Primitives,
    Elbo,
    Loss,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    what: GradTarget,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn finish(manifest: &mut RunManifest, dir: &Path, start: Instant) -> Result<()> {
    manifest.add_dir_artifacts(dir)?;
    manifest.time("total", ms(start));
    manifest.write(dir)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let t = Instant::now();
    let [large, medium, fine] = a.amplitudes[..] else {
        bail!("--amplitudes takes three values");
    };
    let cfg = SynthConfig {
        w_large: a.w_large,
        w_medium: a.w_medium,
        w_fine: a.w_fine,
        n_days: a.days,
        eta: a.eta,
        amplitudes: Amplitudes { large, medium, fine },
        mrw_lambda2: a.lambda2,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let ds = synthgen::compose_dataset(&cfg)?;
    synthgen::write_dataset(&ds, &a.output)?;
    let store = pipeline::synth_signal(&ds);
    pipeline::write_signal(&a.output, &store.samples, &store.meta)?;
    let mut m = RunManifest::new("synth", Some(a.seed), &cfg)?;
    finish(&mut m, &a.output, t)
}

fn featurize(a: FeaturizeArgs) -> Result<()> {
    let t = Instant::now();
    let store = pipeline::ingest_dir(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let cfg = FeaturizeConfig {
        window_sizes: a.scales,
        octaves: a.octaves,
        family: Family::parse(&a.family)?,
        hop: a.hop,
    };
    let f = pipeline::featurize(&store.samples, &cfg, workers::worker_count())?;
    pipeline::write_features(&a.output, &f, &store.meta)?;
    let mut m = RunManifest::new("featurize", None, &cfg)?;
    m.add_dir_inputs(&a.input)?;
    finish(&mut m, &a.output, t)
}

fn train(a: TrainArgs) -> Result<()> {
    let t = Instant::now();
    let (_, f) = pipeline::read_features(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let s = f.set.dims.len();
    let clusters = match a.clusters.len() {
        1 => vec![a.clusters[0]; s],
        n if n == s => a.clusters,
        n => bail!("{n} cluster counts for {s} scales"),
    };
    let cfg = FvaeConfig {
        hidden: a.hidden,
        latent: a.latent,
        n_joint_blocks: a.blocks,
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        tau0: a.tau0,
        tau_min: a.tau_min,
        tau_decay: a.tau_decay,
        seed: a.seed,
        ..FvaeConfig::new(clusters, f.set.dims.clone())
    };
    let mut model = fvae::init_model(&cfg)?;
    let history = fvae::train(&mut model, &f.set)?;
    fvae::save_checkpoint(&model, &a.output)?;
    scatsep::storage::write_json(&a.output.join("history.json"), &history)?;
    let mut m = RunManifest::new("train", Some(a.seed), &cfg)?;
    m.add_dir_inputs(&a.features)?;
    finish(&mut m, &a.output, t)
}

fn times(h: &pipeline::FeaturesHeader) -> Vec<f64> {
    h.ends.iter().map(|&e| h.start_time + e as f64 / h.sample_rate).collect()
}

fn assign(a: AssignArgs) -> Result<()> {
    let t = Instant::now();
    let model = fvae::load_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let (h, f) = pipeline::read_features(&a.features).with_context(|| format!("reading {}", a.features.display()))?;
    let mut asg = fvae::assign_clusters(&model, &f.set)?;
    asg.end = f.ends.iter().map(|&e| e as u64).collect();
    pipeline::write_assignments(&a.output, &asg, &times(&h))?;
    let mut m = RunManifest::new("assign", Some(model.config.seed), &model.config)?;
    m.add_dir_inputs(&a.model)?;
    m.add_dir_inputs(&a.features)?;
    finish(&mut m, &a.output, t)
}

fn histogram(a: HistogramArgs) -> Result<()> {
    let t = Instant::now();
    let asg = pipeline::read_assignments(&a.assignments).with_context(|| format!("reading {}", a.assignments.display()))?;
    let (h, _) = pipeline::read_features(&a.features)?;
    let clusters: Vec<usize> = asg
        .probs
        .iter()
        .zip(&asg.labels)
        .map(|(p, l)| if l.is_empty() { 0 } else { p.len() / l.len() })
        .collect();
    let csv = pipeline::time_histogram(&asg, &times(&h), &clusters, h.day_seconds, a.bins)?;
    std::fs::create_dir_all(&a.output)?;
    std::fs::write(a.output.join("histogram.csv"), csv)?;
    let mut m = RunManifest::new("histogram", None, &a.bins)?;
    m.add_dir_inputs(&a.assignments)?;
    finish(&mut m, &a.output, t)
}

fn sample(a: SampleArgs) -> Result<()> {
    let t = Instant::now();
    let model = fvae::load_checkpoint(&a.model).with_context(|| format!("reading {}", a.model.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let rows = fvae::sample_cluster_representation(&model, a.scale, a.cluster, a.count, &mut rng)?;
    std::fs::create_dir_all(&a.output)?;
    let mut csv = String::new();
    for r in &rows {
        let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    std::fs::write(a.output.join("samples.csv"), csv)?;
    let mut m = RunManifest::new("sample", Some(a.seed), &(a.scale, a.cluster, a.count))?;
    m.add_dir_inputs(&a.model)?;
    finish(&mut m, &a.output, t)
}

fn lbfgs_cfg(iters: usize) -> SeparationConfig {
    SeparationConfig {
        lbfgs: LbfgsConfig {
            max_iter: iters,
            ..SeparationConfig::default().lbfgs
        },
    }
}

fn run_synthetic(
    dataset: &Path,
    snippets: usize,
    iters: usize,
    octaves: usize,
    prior_scale: usize,
    length: usize,
) -> Result<(pipeline::SyntheticSeparationReport, sourcesep::SeparationResult, SyntheticSeparationConfig)> {
    let ds = synthgen::read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let cfg = SyntheticSeparationConfig {
        target_len: length,
        prior_scale,
        octaves,
        n_snippets: snippets,
        separation: lbfgs_cfg(iters),
    };
    let start = pipeline::synthetic_target(&ds, length)
        .context("no night window holds a complete medium event")?;
    let snips = pipeline::synthetic_snippets(&ds, &cfg, start);
    let (report, result) = pipeline::synthetic_separation(&ds, &cfg, &snips, start)?;
    Ok((report, result, cfg))
}

fn separate(a: SeparateArgs) -> Result<()> {
    let t = Instant::now();
    let mut m;
    if a.synthetic {
        let (report, result, cfg) = run_synthetic(&a.input, a.snippets, a.iters, a.octaves, a.prior_scale, a.length)?;
        let ids = report.snippet_starts.iter().map(|s| s.to_string()).collect();
        sourcesep::write_result(&a.output, &result, a.prior_scale, a.octaves, ids, &cfg.separation)?;
        scatsep::storage::write_json(&a.output.join("report.json"), &report)?;
        m = RunManifest::new("separate", Some(a.seed), &cfg)?;
    } else {
        let store = pipeline::ingest_dir(&a.input)?;
        let start = a.start.context("--start is required without --synthetic")?;
        let (Some(fdir), Some(adir), Some(cluster)) = (&a.features, &a.assignments, a.prior_cluster) else {
            bail!("--features, --assignments and --prior-cluster are required without --synthetic");
        };
        let (h, _) = pipeline::read_features(fdir)?;
        let asg = pipeline::read_assignments(adir)?;
        let scale = h
            .config
            .window_sizes
            .iter()
            .position(|&w| w == a.prior_scale)
            .with_context(|| format!("prior scale {} is not a featurized window size", a.prior_scale))?;
        let target = start..start + a.length;
        if target.end > store.samples.len() {
            bail!("window {target:?} exceeds the {} samples of the signal", store.samples.len());
        }
        let mut ids = Vec::new();
        let mut snippets = Vec::new();
        let members: Vec<usize> = (0..asg.end.len())
            .filter(|&r| asg.labels[scale][r] == cluster)
            .map(|r| asg.end[r] as usize)
            .filter(|&e| e <= target.start || e - a.prior_scale >= target.end)
            .collect();
        // evenly spaced, non-overlapping members of the prior cluster
        let mut last_end = 0usize;
        let stride = (members.len() / a.snippets.max(1)).max(1);
        for &e in members.iter().step_by(stride) {
            if e - a.prior_scale >= last_end && snippets.len() < a.snippets {
                snippets.push(store.samples[e - a.prior_scale..e].to_vec());
                ids.push(format!("end={e}"));
                last_end = e;
            }
        }
        if snippets.len() < 2 {
            bail!("cluster {cluster} at scale {} offers {} snippets, need 2", a.prior_scale, snippets.len());
        }
        let bank = std::sync::Arc::new(FilterBank::new(a.octaves, a.prior_scale, Family::default())?);
        let cfg = lbfgs_cfg(a.iters);
        let result = sourcesep::separate(&store.samples[target], &snippets, bank, a.prior_scale, &cfg)?;
        sourcesep::write_result(&a.output, &result, a.prior_scale, a.octaves, ids, &cfg)?;
        scatsep::storage::write_json(&a.output.join("target.json"), &json!({ "start": start, "length": a.length }))?;
        m = RunManifest::new("separate", Some(a.seed), &cfg)?;
        m.add_dir_inputs(adir)?;
    }
    m.add_dir_inputs(&a.input)?;
    finish(&mut m, &a.output, t)
}

fn eval(a: EvalArgs) -> Result<()> {
    let t = Instant::now();
    std::fs::create_dir_all(&a.output)?;
    let out = match a.task {
        EvalTask::Clustering => {
            let ds = synthgen::read_dataset(&a.dataset).with_context(|| format!("reading {}", a.dataset.display()))?;
            let fdir = a.features.as_ref().context("--features is required")?;
            let adir = a.assignments.as_ref().context("--assignments is required")?;
            let (h, _) = pipeline::read_features(fdir)?;
            let asg = pipeline::read_assignments(adir)?;
            let ends: Vec<usize> = asg.end.iter().map(|&e| e as usize).collect();
            let mut per_scale = Vec::new();
            for (i, &w) in h.config.window_sizes.iter().enumerate() {
                let truth: Vec<usize> = pipeline::window_labels(&ds.events, &ends, w)
                    .iter()
                    .map(|l| l.index())
                    .collect();
                per_scale.push(json!({
                    "window": w,
                    "ari": pipeline::adjusted_rand_index(&asg.labels[i], &truth)?,
                }));
            }
            json!({ "task": "clustering", "scales": per_scale })
        }
        EvalTask::Separation => {
            let report = match &a.result {
                Some(dir) => scatsep::storage::read_json::<pipeline::SyntheticSeparationReport>(&dir.join("report.json"))?,
                None => run_synthetic(&a.dataset, a.snippets, a.iters, 6, 1024, 4096)?.0,
            };
            json!({
                "task": "separation",
                "baseline_error": report.baseline_error,
                "separated_error": report.separated_error,
                "improvement": report.improvement,
                "iterations": report.iterations,
                "monotone": report.monotone,
                "target_start": report.target_start,
            })
        }
    };
    scatsep::storage::write_json(&a.output.join("eval.json"), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    let mut m = RunManifest::new("eval", None, &out["task"])?;
    m.add_dir_inputs(&a.dataset)?;
    finish(&mut m, &a.output, t)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut rows = Vec::new();
    let want = |g: GradTarget| matches!(a.what, GradTarget::All) || std::mem::discriminant(&a.what) == std::mem::discriminant(&g);
    if want(GradTarget::Primitives) {
        for (name, r) in diffcore::primitive_gradchecks()? {
            rows.push(json!({ "graph": name, "max_rel_error": r.max_rel_error, "coords": r.coords_checked }));
        }
    }
    if want(GradTarget::Elbo) {
        let r = fvae::toy_elbo_gradcheck(a.seed)?;
        rows.push(json!({ "graph": "elbo", "max_rel_error": r.max_rel_error, "coords": r.coords_checked }));
    }
    if want(GradTarget::Loss) {
        let r = sourcesep::toy_loss_gradcheck(a.seed)?;
        rows.push(json!({ "graph": "total_loss", "max_rel_error": r.max_rel_error, "coords": r.coords_checked }));
    }
    let worst = rows
        .iter()
        .map(|r| r["max_rel_error"].as_f64().unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    let out = json!({ "checks": rows, "max_rel_error": worst, "pass": worst <= 1e-4 });
    let text = serde_json::to_string_pretty(&out)?;
    match a.output {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    if worst > 1e-4 {
        bail!("gradient check failed: max relative error {worst:.3e}");
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use scatsep::Error as E;
    match e.downcast_ref::<E>() {
        Some(E::Sizing(_)) => "sizing",
        Some(E::UnknownFamily(_)) => "unknown_family",
        Some(E::Config(_)) => "config",
        Some(E::Shape(_)) => "shape",
        Some(E::UnboundLeaf(_)) | Some(E::NotEvaluated) | Some(E::NonScalar(_)) => "graph",
        Some(E::NonFinite(_)) => "non_finite",
        Some(E::OutOfRange(_)) => "out_of_range",
        Some(E::Infeasible(_)) => "infeasible",
        Some(E::EmptyDataset) => "empty_dataset",
        Some(E::Format(_)) => "format",
        Some(E::Version { .. }) => "version",
        Some(E::Digest(_)) => "digest",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        None => "usage",
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.to_string().trim() } }));
            return ExitCode::from(2);
        }
    };
    let r = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Featurize(a) => featurize(a),
        Command::Train(a) => train(a),
        Command::Assign(a) => assign(a),
        Command::Histogram(a) => histogram(a),
        Command::Sample(a) => sample(a),
        Command::Separate(a) => separate(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                json!({ "error": { "kind": error_kind(&e), "message": chain.join(": ") } })
            );
            ExitCode::FAILURE
        }
    }
}
