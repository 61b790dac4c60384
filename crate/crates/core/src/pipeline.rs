//! Signal stores, windowing, feature files, run manifests and the tabular
//! outputs of the featurize → train → assign → separate workflow.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::Family;
use crate::fvae::{ClusterAssignment, FeatureSet};
use crate::lbfgs::Termination;
use crate::sourcesep::{separate, LossTerms, SeparationConfig, SeparationResult};
use crate::scatcov::{check_pyramid, compute_pyramidal, BankCache, Layout};
use crate::storage::{self, SCHEMA_VERSION};
use crate::synthgen::{self, EventKind, SynthDataset, WindowLabel};
use crate::workers;

pub const SIGNAL_META: &str = "signal.json";
pub const SIGNAL_BLOB: &str = "signal.f32";
pub const FEATURES_HEADER: &str = "features.json";
pub const ASSIGNMENTS_JSON: &str = "assignments.json";
pub const ASSIGNMENTS_CSV: &str = "assignments.csv";
pub const MANIFEST: &str = "manifest.json";
pub const DEFAULT_HISTOGRAM_BINS: usize = 48;
pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalMeta {
    pub schema_version: u32,
    pub n_samples: usize,
    /// Samples per second.
    pub sample_rate: f64,
    /// Time of the first sample, in seconds.
    pub start_time: f64,
    pub channel: String,
    /// Length of the day used for time-of-day histograms, in seconds.
    pub day_seconds: f64,
}

impl SignalMeta {
    pub fn new(n_samples: usize, sample_rate: f64) -> Self {
        SignalMeta {
            schema_version: SCHEMA_VERSION,
            n_samples,
            sample_rate,
            start_time: 0.0,
            channel: "0".into(),
            day_seconds: SECONDS_PER_DAY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        storage::check_schema(self.schema_version)?;
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::Format(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if !(self.day_seconds > 0.0 && self.day_seconds.is_finite()) {
            return Err(Error::Format(format!("day length {} must be positive", self.day_seconds)));
        }
        if !self.start_time.is_finite() {
            return Err(Error::Format("start time must be finite".into()));
        }
        Ok(())
    }
}

/// A single-channel float32 sample stream with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalStore {
    pub meta: SignalMeta,
    pub samples: Vec<f64>,
}

impl SignalStore {
    pub fn duration_seconds(&self) -> f64 {
        self.meta.n_samples as f64 / self.meta.sample_rate
    }

    pub fn duration_minutes(&self) -> f64 {
        self.duration_seconds() / 60.0
    }

    /// Time of sample index `k`, in seconds.
    pub fn time_of(&self, k: usize) -> f64 {
        self.meta.start_time + k as f64 / self.meta.sample_rate
    }
}

/// Writes `signal.f32` and `signal.json` into `dir`.
pub fn write_signal(dir: &Path, samples: &[f64], meta: &SignalMeta) -> Result<()> {
    if meta.n_samples != samples.len() {
        return Err(Error::Format(format!(
            "metadata declares {} samples, stream has {}",
            meta.n_samples,
            samples.len()
        )));
    }
    meta.validate()?;
    std::fs::create_dir_all(dir)?;
    storage::write_f32(&dir.join(SIGNAL_BLOB), samples)?;
    storage::write_json(&dir.join(SIGNAL_META), meta)
}

/// Reads a float32 stream and its sidecar, checking that they agree.
pub fn ingest(blob: &Path, meta_path: &Path) -> Result<SignalStore> {
    let meta: SignalMeta = storage::read_json(meta_path)?;
    meta.validate()?;
    let bytes = std::fs::read(blob)?;
    if bytes.is_empty() {
        return Err(Error::Format(format!("{} is empty", blob.display())));
    }
    let samples = storage::f32_from_bytes(&bytes)?;
    if samples.len() != meta.n_samples {
        return Err(Error::Format(format!(
            "metadata declares {} samples, {} holds {}",
            meta.n_samples,
            blob.display(),
            samples.len()
        )));
    }
    if let Some(k) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite sample at index {k}")));
    }
    Ok(SignalStore { meta, samples })
}

pub fn ingest_dir(dir: &Path) -> Result<SignalStore> {
    ingest(&dir.join(SIGNAL_BLOB), &dir.join(SIGNAL_META))
}

/// Signal store of a synthetic mixture: one sample per second and a day of
/// `2 w_large` samples.
pub fn synth_signal(ds: &SynthDataset) -> SignalStore {
    let mut meta = SignalMeta::new(ds.x.len(), 1.0);
    meta.channel = "synthetic".into();
    meta.day_seconds = (2 * ds.config.w_large) as f64;
    SignalStore {
        meta,
        samples: ds.x.clone(),
    }
}

/// Windows of one pyramidal stack, all ending at `end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowStack {
    pub end: usize,
    pub windows: Vec<Range<usize>>,
}

/// Right-aligned stacks every `hop` samples, starting at the first end with
/// a full longest window of history.
pub fn window_stream(
    n_samples: usize,
    window_sizes: &[usize],
    hop: usize,
) -> impl Iterator<Item = WindowStack> + '_ {
    let longest = window_sizes.iter().cloned().max().unwrap_or(0);
    let hop = hop.max(1);
    let count = if longest == 0 || n_samples < longest {
        0
    } else {
        (n_samples - longest) / hop + 1
    };
    (0..count).map(move |k| {
        let end = longest + k * hop;
        WindowStack {
            end,
            windows: window_sizes.iter().map(|&w| end - w..end).collect(),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturizeConfig {
    pub window_sizes: Vec<usize>,
    pub octaves: usize,
    pub family: Family,
    /// Stride between stacks; the finest window when absent.
    pub hop: Option<usize>,
}

impl FeaturizeConfig {
    pub fn hop(&self) -> usize {
        self.hop.unwrap_or_else(|| self.window_sizes.first().cloned().unwrap_or(1))
    }

    pub fn validate(&self) -> Result<()> {
        check_pyramid(&self.window_sizes)?;
        if self.hop == Some(0) {
            return Err(Error::Config("hop must be at least 1".into()));
        }
        if self.window_sizes[0] < 1 << self.octaves {
            return Err(Error::Sizing(format!(
                "finest window {} is shorter than 2^J = {}",
                self.window_sizes[0],
                1usize << self.octaves
            )));
        }
        Ok(())
    }
}

/// Pyramidal features of every stack and the stack end samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub config: FeaturizeConfig,
    pub ends: Vec<usize>,
    pub set: FeatureSet,
}

pub fn featurize(samples: &[f64], cfg: &FeaturizeConfig, n_workers: usize) -> Result<Features> {
    cfg.validate()?;
    let stacks: Vec<WindowStack> = window_stream(samples.len(), &cfg.window_sizes, cfg.hop()).collect();
    if stacks.is_empty() {
        return Err(Error::Sizing(format!(
            "{} samples cannot hold a {}-sample window",
            samples.len(),
            cfg.window_sizes.last().unwrap()
        )));
    }
    let cache = BankCache::new();
    let rows = workers::map(&stacks, n_workers, |_, s| {
        compute_pyramidal(&samples[..s.end], &cache, cfg.octaves, cfg.family, &cfg.window_sizes)
    });
    let d = Layout::new(cfg.octaves).flat_len();
    let k = cfg.window_sizes.len();
    let mut scales: Vec<Vec<f64>> = vec![Vec::with_capacity(stacks.len() * d); k];
    for r in rows {
        for (i, u) in r?.u.into_iter().enumerate() {
            scales[i].extend(u);
        }
    }
    Ok(Features {
        config: cfg.clone(),
        ends: stacks.iter().map(|s| s.end).collect(),
        set: FeatureSet::new(vec![d; k], scales)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesHeader {
    pub schema_version: u32,
    pub config: FeaturizeConfig,
    pub rows: usize,
    pub dims: Vec<usize>,
    pub ends: Vec<usize>,
    pub sample_rate: f64,
    pub start_time: f64,
    pub day_seconds: f64,
    pub blobs: Vec<String>,
    pub blob_sha256: Vec<String>,
}

/// Float64 matrix per scale plus a JSON header with digests.
pub fn write_features(dir: &Path, f: &Features, meta: &SignalMeta) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut blobs = Vec::new();
    let mut digests = Vec::new();
    let mut paths = Vec::new();
    for (i, m) in f.set.scales.iter().enumerate() {
        let name = format!("scale{i}.f64");
        let bytes = storage::f64_bytes(m);
        std::fs::write(dir.join(&name), &bytes)?;
        digests.push(storage::sha256_hex(&bytes));
        paths.push(dir.join(&name));
        blobs.push(name);
    }
    storage::write_json(
        &dir.join(FEATURES_HEADER),
        &FeaturesHeader {
            schema_version: SCHEMA_VERSION,
            config: f.config.clone(),
            rows: f.set.rows,
            dims: f.set.dims.clone(),
            ends: f.ends.clone(),
            sample_rate: meta.sample_rate,
            start_time: meta.start_time,
            day_seconds: meta.day_seconds,
            blobs,
            blob_sha256: digests,
        },
    )?;
    paths.push(dir.join(FEATURES_HEADER));
    Ok(paths)
}

pub fn read_features(dir: &Path) -> Result<(FeaturesHeader, Features)> {
    let h: FeaturesHeader = storage::read_json(&dir.join(FEATURES_HEADER))?;
    storage::check_schema(h.schema_version)?;
    if h.blobs.len() != h.dims.len() || h.blob_sha256.len() != h.dims.len() || h.ends.len() != h.rows {
        return Err(Error::Format("feature header is inconsistent".into()));
    }
    let mut scales = Vec::with_capacity(h.dims.len());
    for (name, digest) in h.blobs.iter().zip(&h.blob_sha256) {
        let bytes = std::fs::read(dir.join(name))?;
        if &storage::sha256_hex(&bytes) != digest {
            return Err(Error::Digest(name.clone()));
        }
        scales.push(storage::f64_from_bytes(&bytes)?);
    }
    let set = FeatureSet::new(h.dims.clone(), scales)?;
    if set.rows != h.rows {
        return Err(Error::Format(format!("header declares {} rows, blobs hold {}", h.rows, set.rows)));
    }
    let f = Features {
        config: h.config.clone(),
        ends: h.ends.clone(),
        set,
    };
    Ok((h, f))
}

/// Writes `assignments.json` and a plot-ready `assignments.csv`.
pub fn write_assignments(dir: &Path, a: &ClusterAssignment, times: &[f64]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    storage::write_json(&dir.join(ASSIGNMENTS_JSON), a)?;
    let mut csv = String::from("end,time");
    for i in 0..a.labels.len() {
        write!(csv, ",label{i},confidence{i}").unwrap();
    }
    csv.push('\n');
    for r in 0..a.end.len() {
        write!(csv, "{},{}", a.end[r], times[r]).unwrap();
        for i in 0..a.labels.len() {
            write!(csv, ",{},{}", a.labels[i][r], a.confidence[i][r]).unwrap();
        }
        csv.push('\n');
    }
    std::fs::write(dir.join(ASSIGNMENTS_CSV), csv)?;
    Ok(vec![dir.join(ASSIGNMENTS_JSON), dir.join(ASSIGNMENTS_CSV)])
}

pub fn read_assignments(dir: &Path) -> Result<ClusterAssignment> {
    storage::read_json(&dir.join(ASSIGNMENTS_JSON))
}

/// Counts of argmax labels per time-of-day bin: one row per bin, a
/// `tod_start` column in seconds and one column per `(scale, cluster)`.
pub fn time_histogram(
    a: &ClusterAssignment,
    times: &[f64],
    clusters: &[usize],
    day_seconds: f64,
    bins: usize,
) -> Result<String> {
    if bins == 0 {
        return Err(Error::Config("histogram needs at least one bin".into()));
    }
    if times.len() != a.end.len() || clusters.len() != a.labels.len() {
        return Err(Error::Shape("assignments and times disagree".into()));
    }
    let cols: usize = clusters.iter().sum();
    let mut counts = vec![vec![0usize; cols]; bins];
    for (r, &t) in times.iter().enumerate() {
        let phase = t.rem_euclid(day_seconds) / day_seconds;
        let b = ((phase * bins as f64) as usize).min(bins - 1);
        let mut off = 0;
        for (i, &c) in clusters.iter().enumerate() {
            let y = a.labels[i][r];
            if y >= c {
                return Err(Error::OutOfRange(format!("label {y} at scale {i} with {c} clusters")));
            }
            counts[b][off + y] += 1;
            off += c;
        }
    }
    let mut csv = String::from("tod_start");
    for (i, &c) in clusters.iter().enumerate() {
        for y in 0..c {
            write!(csv, ",scale{i}_cluster{y}").unwrap();
        }
    }
    csv.push('\n');
    for (b, row) in counts.iter().enumerate() {
        write!(csv, "{}", b as f64 * day_seconds / bins as f64).unwrap();
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    Ok(csv)
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} labels", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Ok(1.0);
    }
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut ra: BTreeMap<usize, usize> = BTreeMap::new();
    let mut rb: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ra.values().map(|&v| choose2(v)).sum();
    let sb: f64 = rb.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Ground-truth class of the window `[end - w, end)` of every stack.
pub fn window_labels(events: &[synthgen::Event], ends: &[usize], w: usize) -> Vec<WindowLabel> {
    ends.iter()
        .map(|&e| synthgen::window_label(events, e.saturating_sub(w), e))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub stage: String,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub formats: BTreeMap<String, u32>,
    pub inputs: Vec<Artifact>,
    pub artifacts: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new<C: Serialize>(stage: &str, seed: Option<u64>, config: &C) -> Result<Self> {
        let json = serde_json::to_vec(config)?;
        let mut formats = BTreeMap::new();
        for f in ["signal", "dataset", "features", "model", "assignments", "separation", "manifest"] {
            formats.insert(f.to_string(), SCHEMA_VERSION);
        }
        Ok(RunManifest {
            schema_version: SCHEMA_VERSION,
            stage: stage.into(),
            seed,
            config_hash: storage::sha256_hex(&json),
            formats,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            timings_ms: BTreeMap::new(),
        })
    }

    fn artifact(root: &Path, path: &Path) -> Result<Artifact> {
        let rel = path.strip_prefix(root).unwrap_or(path);
        Ok(Artifact {
            path: rel.to_string_lossy().into_owned(),
            sha256: storage::file_digest(path)?,
        })
    }

    pub fn add_input(&mut self, root: &Path, path: &Path) -> Result<()> {
        self.inputs.push(Self::artifact(root, path)?);
        Ok(())
    }

    pub fn add_artifact(&mut self, root: &Path, path: &Path) -> Result<()> {
        self.artifacts.push(Self::artifact(root, path)?);
        Ok(())
    }

    /// Every file directly inside `dir` except the manifest, in name order.
    pub fn add_dir_artifacts(&mut self, dir: &Path) -> Result<()> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for p in names {
            if p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST) {
                self.add_artifact(dir, &p)?;
            }
        }
        Ok(())
    }

    /// Adds every file of an upstream stage directory as an input, except
    /// its manifest (which carries timings).
    pub fn add_dir_inputs(&mut self, dir: &Path) -> Result<()> {
        let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for p in names {
            if p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST) {
                self.add_input(dir, &p)?;
            }
        }
        Ok(())
    }

    pub fn time(&mut self, name: &str, ms: f64) {
        self.timings_ms.insert(name.into(), ms);
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        storage::write_json(&dir.join(MANIFEST), self)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let m: RunManifest = storage::read_json(&dir.join(MANIFEST))?;
        storage::check_schema(m.schema_version)?;
        Ok(m)
    }

    /// Recomputes every artifact digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            if storage::file_digest(&dir.join(&a.path))? != a.sha256 {
                return Err(Error::Digest(a.path.clone()));
            }
        }
        Ok(())
    }
}

/// Separation target of the synthetic experiment: the first window of
/// `len` samples lying in a night segment (gate identically 0) that fully
/// contains a medium event.
pub fn synthetic_target(ds: &SynthDataset, len: usize) -> Option<usize> {
    let day = 2 * ds.config.w_large;
    let mut medium: Vec<&synthgen::Event> = ds
        .events
        .iter()
        .filter(|e| e.kind == EventKind::MediumEvent)
        .collect();
    medium.sort_by_key(|e| e.start);
    for e in medium {
        let d = e.start / day;
        let night = d * day..d * day + ds.config.w_large + 1;
        if night.end - night.start < len {
            continue;
        }
        // centre the event in the window, then slide into the night segment
        let centre = e.start + e.length / 2;
        let mut start = centre.saturating_sub(len / 2).max(night.start);
        if start + len > night.end {
            start = night.end - len;
        }
        if e.start >= start && e.end() <= start + len && ds.gate[start..start + len].iter().all(|&g| g == 0.0) {
            let others = ds.events.iter().filter(|o| {
                o.kind == EventKind::MediumEvent && o.start != e.start && o.start < start + len && start < o.end()
            });
            if others.count() == 0 {
                return Some(start);
            }
        }
    }
    None
}

/// Start samples of `w`-long windows whose mixture is background only:
/// night (or day) gate throughout and no medium event overlap. Pulses are
/// left in, as they would be in a background cluster.
pub fn background_windows(ds: &SynthDataset, w: usize, night: bool, exclude: Range<usize>) -> Vec<usize> {
    let level = if night { 0.0 } else { 1.0 };
    (0..ds.x.len() / w)
        .map(|k| k * w)
        .filter(|&s| {
            let r = s..s + w;
            r.end <= exclude.start || r.start >= exclude.end
        })
        .filter(|&s| ds.gate[s..s + w].iter().all(|&g| g == level))
        .filter(|&s| {
            !ds.events
                .iter()
                .any(|e| e.kind == EventKind::MediumEvent && e.start < s + w && s < e.end())
        })
        .collect()
}

/// Relative L2 error `|a - b| / |b|`.
pub fn relative_l2(estimate: &[f64], truth: &[f64]) -> f64 {
    let num: f64 = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = truth.iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSeparationConfig {
    pub target_len: usize,
    pub prior_scale: usize,
    pub octaves: usize,
    pub n_snippets: usize,
    pub separation: SeparationConfig,
}

impl Default for SyntheticSeparationConfig {
    fn default() -> Self {
        SyntheticSeparationConfig {
            target_len: 4096,
            prior_scale: 1024,
            octaves: 6,
            n_snippets: 32,
            separation: SeparationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSeparationReport {
    pub target_start: usize,
    pub target_len: usize,
    pub prior_scale: usize,
    pub octaves: usize,
    pub snippet_starts: Vec<usize>,
    /// `|x - x_medium| / |x_medium|`: the raw mixture as the estimate.
    pub baseline_error: f64,
    /// `|(x - s1_hat) - x_medium| / |x_medium|`.
    pub separated_error: f64,
    pub improvement: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub initial_loss: LossTerms,
    pub final_loss: LossTerms,
    /// Accepted-step losses never increase.
    pub monotone: bool,
    pub residual_history: Vec<f64>,
}

/// `n` evenly spaced night background windows of the prior scale, away from
/// the target window.
pub fn synthetic_snippets(ds: &SynthDataset, cfg: &SyntheticSeparationConfig, target_start: usize) -> Vec<usize> {
    let pool = background_windows(
        ds,
        cfg.prior_scale,
        true,
        target_start..target_start + cfg.target_len,
    );
    if pool.len() <= cfg.n_snippets {
        return pool;
    }
    (0..cfg.n_snippets)
        .map(|k| pool[k * pool.len() / cfg.n_snippets])
        .collect()
}

/// Recovers the background source of the synthetic target window from
/// background snippets; the medium event estimate is the residual.
pub fn synthetic_separation(
    ds: &SynthDataset,
    cfg: &SyntheticSeparationConfig,
    snippet_starts: &[usize],
    target_start: usize,
) -> Result<(SyntheticSeparationReport, SeparationResult)> {
    let r = target_start..target_start + cfg.target_len;
    if r.end > ds.x.len() {
        return Err(Error::OutOfRange(format!("target window {r:?} beyond {} samples", ds.x.len())));
    }
    let x = &ds.x[r.clone()];
    let truth = &ds.x_medium[r];
    let snippets: Vec<Vec<f64>> = snippet_starts
        .iter()
        .map(|&s| ds.x[s..s + cfg.prior_scale].to_vec())
        .collect();
    let bank = std::sync::Arc::new(crate::filterbank::FilterBank::new(
        cfg.octaves,
        cfg.prior_scale,
        Family::default(),
    )?);
    let result = separate(x, &snippets, bank, cfg.prior_scale, &cfg.separation)?;
    let baseline_error = relative_l2(x, truth);
    let separated_error = relative_l2(&result.residual, truth);
    let monotone = result.trajectory.windows(2).all(|w| w[1].value <= w[0].value)
        && result.trajectory.first().map_or(true, |f| f.value <= result.initial.total);
    Ok((
        SyntheticSeparationReport {
            target_start,
            target_len: cfg.target_len,
            prior_scale: cfg.prior_scale,
            octaves: cfg.octaves,
            snippet_starts: snippet_starts.to_vec(),
            baseline_error,
            separated_error,
            improvement: baseline_error / separated_error,
            iterations: result.iterations,
            termination: result.termination,
            initial_loss: result.initial,
            final_loss: result.final_terms,
            monotone,
            residual_history: result.residual_history.clone(),
        },
        result,
    ))
}
