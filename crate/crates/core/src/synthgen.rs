//! Multi-scale synthetic dataset with ground-truth components.
//!
//! The mixture is `x = x_large + x_medium + x_fine`:
//!
//! * large scale: white noise by night and multifractal noise by day, blended
//!   by a `2 w_large`-periodic gate with raised-cosine junctions;
//! * medium scale: non-overlapping `w_medium`-long bursts of band-limited
//!   noise with an intermittent envelope, one per day;
//! * fine scale: symmetric `exp(-|t|/tau)` and one-sided `exp(-t/tau)` pulses,
//!   four of each per day.
//!
//! Every event is logged with enough information to re-render it, and the
//! medium and fine components are rendered from that log.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;
use crate::storage;

/// Integral scale of the log-correlated volatility field.
pub const MRW_INTEGRAL_SCALE: usize = 4096;
/// Intermittency of the envelope of medium events.
pub const BURST_INTERMITTENCY: f64 = 0.1;
/// Placement attempts per medium event before giving up.
pub const MAX_PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Amplitudes {
    /// Target RMS of each component over the whole series.
    pub large: f64,
    pub medium: f64,
    pub fine: f64,
}

impl Default for Amplitudes {
    fn default() -> Self {
        Amplitudes {
            large: 1.0,
            medium: 1.0,
            fine: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub w_large: usize,
    pub w_medium: usize,
    pub w_fine: usize,
    pub n_days: usize,
    /// Width of the gate's raised-cosine junctions.
    pub eta: usize,
    pub amplitudes: Amplitudes,
    /// Intermittency `lambda^2` of the day-time multifractal noise.
    pub mrw_lambda2: f64,
    /// Pulse decay constant in samples; `w_fine / 16` when absent.
    pub pulse_tau: Option<f64>,
    /// Pass band of medium events as fractions of Nyquist.
    pub medium_band: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            w_large: 1 << 12,
            w_medium: 1 << 10,
            w_fine: 1 << 8,
            n_days: 64,
            eta: 256,
            amplitudes: Amplitudes::default(),
            mrw_lambda2: 0.05,
            pulse_tau: None,
            medium_band: (0.125, 0.25),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_samples(&self) -> usize {
        self.n_days * 2 * self.w_large
    }

    pub fn tau(&self) -> f64 {
        self.pulse_tau.unwrap_or(self.w_fine as f64 / 16.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_large", self.w_large),
            ("w_medium", self.w_medium),
            ("w_fine", self.w_fine),
        ] {
            if !w.is_power_of_two() || w < 4 {
                return Err(Error::Config(format!("{name} = {w} must be a power of two >= 4")));
            }
        }
        if self.eta * 4 >= self.w_large {
            return Err(Error::Config(format!(
                "eta = {} must be below w_large / 4 = {}",
                self.eta,
                self.w_large / 4
            )));
        }
        if self.n_days == 0 {
            return Err(Error::Config("n_days must be positive".into()));
        }
        if !(self.mrw_lambda2 > 0.0) {
            return Err(Error::Config("mrw_lambda2 must be positive".into()));
        }
        let (lo, hi) = self.medium_band;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Config(format!("medium band ({lo}, {hi}) is not within [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SymPulse,
    AsymPulse,
    MediumEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub kind: EventKind,
    pub start: usize,
    pub length: usize,
    pub amplitude: f64,
    /// Decay constant of pulses; unused for medium events.
    pub tau: f64,
    /// Seed of a medium event's waveform.
    pub seed: u64,
}

impl Event {
    /// Interval holding nearly all of the event's energy.
    pub fn core(&self) -> (usize, usize) {
        let reach = (3.0 * self.tau).ceil() as usize;
        match self.kind {
            EventKind::MediumEvent => (self.start, self.start + self.length),
            EventKind::AsymPulse => (self.start, self.start + reach.min(self.length)),
            EventKind::SymPulse => {
                let c = self.start + self.length / 2;
                (c.saturating_sub(reach), c + reach + 1)
            }
        }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Adds one logged event to `out`.
pub fn render_event(ev: &Event, band: (f64, f64), out: &mut [f64]) {
    match ev.kind {
        EventKind::SymPulse => {
            // odd length 2h + 1, centered
            let h = ev.length / 2;
            let c = ev.start + h;
            for k in ev.start..ev.end() {
                let d = (k as f64 - c as f64).abs();
                out[k] += ev.amplitude * (-d / ev.tau).exp();
            }
        }
        EventKind::AsymPulse => {
            for k in ev.start..ev.end() {
                out[k] += ev.amplitude * (-((k - ev.start) as f64) / ev.tau).exp();
            }
        }
        EventKind::MediumEvent => {
            let shape = burst_shape(ev.length, band, ev.seed);
            for (o, s) in out[ev.start..ev.end()].iter_mut().zip(&shape) {
                *o += ev.amplitude * s;
            }
        }
    }
}

/// Renders a component from its events, in log order.
pub fn render_events(events: &[Event], n_samples: usize, band: (f64, f64)) -> Vec<f64> {
    let mut out = vec![0.0; n_samples];
    for ev in events {
        render_event(ev, band, &mut out);
    }
    out
}

/// Day/night gate: `0` on `[0, w]`, `1` on `[w + eta, 2w - eta]`, raised-cosine
/// junctions, `2w`-periodic.
pub fn gen_gate(n_samples: usize, w: usize, eta: usize) -> Result<Vec<f64>> {
    if 2 * eta >= w {
        return Err(Error::Config(format!("eta = {eta} must be below w / 2 = {}", w / 2)));
    }
    let period = 2 * w;
    Ok((0..n_samples)
        .map(|t| {
            let p = t % period;
            if p <= w {
                0.0
            } else if p < w + eta {
                0.5 * (1.0 - (PI * (p - w) as f64 / eta as f64).cos())
            } else if p <= period - eta {
                1.0
            } else {
                0.5 * (1.0 + (PI * (p - (period - eta)) as f64 / eta as f64).cos())
            }
        })
        .collect())
}

/// Stationary Gaussian field with covariance
/// `lambda2 * ln(scale / (|tau| + 1))` for `|tau| < scale`, by circulant
/// embedding. Negative embedding eigenvalues are clipped.
fn log_correlated_field<R: Rng>(n: usize, lambda2: f64, scale: usize, rng: &mut R) -> Vec<f64> {
    let m = (2 * n.max(scale)).next_power_of_two();
    let cov: Vec<f64> = (0..m)
        .map(|k| {
            let lag = k.min(m - k);
            if lag < scale {
                lambda2 * (scale as f64 / (lag as f64 + 1.0)).ln()
            } else {
                0.0
            }
        })
        .collect();
    let eig = spectral::fft_real(&cov);
    let mut buf: Vec<Complex64> = eig
        .iter()
        .map(|e| {
            let s = (e.re.max(0.0) / m as f64).sqrt();
            let a: f64 = StandardNormal.sample(rng);
            let b: f64 = StandardNormal.sample(rng);
            Complex64::new(s * a, s * b)
        })
        .collect();
    spectral::fft_in_place(&mut buf);
    buf[..n].iter().map(|z| z.re).collect()
}

fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let k = target / rms;
        x.iter_mut().for_each(|v| *v *= k);
    }
}

/// Multifractal random noise: Gaussian increments times `exp(omega)` with a
/// log-correlated `omega`, normalized to unit variance.
pub fn gen_mrw(n_samples: usize, lambda2: f64, seed: u64) -> Result<Vec<f64>> {
    if !(lambda2 > 0.0) {
        return Err(Error::Config("lambda^2 must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = log_correlated_field(n_samples, lambda2, MRW_INTEGRAL_SCALE, &mut rng);
    let mut x: Vec<f64> = omega
        .iter()
        .map(|w| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e * w.exp()
        })
        .collect();
    normalize_rms(&mut x, 1.0);
    Ok(x)
}

/// Unit-RMS, Hann-tapered, band-limited noise burst with an intermittent
/// envelope; `band` is in fractions of Nyquist.
pub fn burst_shape(len: usize, band: (f64, f64), seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut spec = spectral::fft_real(&noise);
    for (k, z) in spec.iter_mut().enumerate() {
        let f = 2.0 * k.min(len - k) as f64 / len as f64;
        if f < band.0 || f > band.1 {
            *z = Complex64::new(0.0, 0.0);
        }
    }
    spectral::ifft_in_place(&mut spec);
    let omega = log_correlated_field(len, BURST_INTERMITTENCY, len, &mut rng);
    let mut out: Vec<f64> = (0..len)
        .map(|k| {
            let hann = 0.5 * (1.0 - (2.0 * PI * k as f64 / (len - 1).max(1) as f64).cos());
            hann * spec[k].re * omega[k].exp()
        })
        .collect();
    normalize_rms(&mut out, 1.0);
    out
}

/// Places `count` events of one kind with unit amplitude and renders them.
/// Fine kinds use `w` as the pulse window, medium events are `w` long and
/// never overlap.
pub fn gen_events<R: Rng>(
    kind: EventKind,
    n_samples: usize,
    count: usize,
    w: usize,
    tau: f64,
    band: (f64, f64),
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<Event>)> {
    if count * w >= n_samples {
        return Err(Error::Infeasible(format!(
            "{count} events of length {w} do not fit in {n_samples} samples"
        )));
    }
    let length = match kind {
        // odd so the pulse is even about its center sample
        EventKind::SymPulse => w - 1,
        _ => w,
    };
    let mut events: Vec<Event> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let start = rng.gen_range(0..=n_samples - length);
            let clash = kind == EventKind::MediumEvent
                && events
                    .iter()
                    .any(|e| start < e.end() && e.start < start + length);
            if !clash {
                placed = Some(start);
                break;
            }
        }
        let Some(start) = placed else {
            return Err(Error::Infeasible(format!(
                "could not place {count} non-overlapping events of length {w} in {n_samples} samples"
            )));
        };
        events.push(Event {
            kind,
            start,
            length,
            amplitude: 1.0,
            tau,
            seed: if kind == EventKind::MediumEvent { rng.gen() } else { 0 },
        });
    }
    let signal = render_events(&events, n_samples, band);
    Ok((signal, events))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub x: Vec<f64>,
    pub x_large: Vec<f64>,
    pub x_medium: Vec<f64>,
    pub x_fine: Vec<f64>,
    pub gate: Vec<f64>,
    pub events: Vec<Event>,
}

fn rescale_events(events: &mut [Event], signal: &[f64], target: f64) {
    let rms = (signal.iter().map(|v| v * v).sum::<f64>() / signal.len() as f64).sqrt();
    if rms > 0.0 {
        for e in events {
            e.amplitude = target / rms;
        }
    }
}

pub fn compose_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let n = cfg.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let gate = gen_gate(n, cfg.w_large, cfg.eta)?;
    let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x2 = gen_mrw(n, cfg.mrw_lambda2, rng.gen())?;
    let mut x_large: Vec<f64> = (0..n)
        .map(|t| (1.0 - gate[t]) * x1[t] + gate[t] * x2[t])
        .collect();
    normalize_rms(&mut x_large, cfg.amplitudes.large);

    let tau = cfg.tau();
    let band = cfg.medium_band;
    let (medium_unit, mut medium) = gen_events(
        EventKind::MediumEvent,
        n,
        cfg.n_days,
        cfg.w_medium,
        tau,
        band,
        &mut rng,
    )?;
    rescale_events(&mut medium, &medium_unit, cfg.amplitudes.medium);
    let x_medium = render_events(&medium, n, band);

    let (_, sym) = gen_events(EventKind::SymPulse, n, 4 * cfg.n_days, cfg.w_fine, tau, band, &mut rng)?;
    let (_, asym) = gen_events(EventKind::AsymPulse, n, 4 * cfg.n_days, cfg.w_fine, tau, band, &mut rng)?;
    let mut fine: Vec<Event> = sym.into_iter().chain(asym).collect();
    let fine_unit = render_events(&fine, n, band);
    rescale_events(&mut fine, &fine_unit, cfg.amplitudes.fine);
    let x_fine = render_events(&fine, n, band);

    let x = (0..n).map(|t| x_large[t] + x_medium[t] + x_fine[t]).collect();
    let mut events = medium;
    events.extend(fine);
    Ok(SynthDataset {
        config: cfg.clone(),
        x,
        x_large,
        x_medium,
        x_fine,
        gate,
        events,
    })
}

/// Ground-truth class of a window, by priority: a pulse core overlaps it,
/// a medium event overlaps it, or neither.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLabel {
    Background,
    Medium,
    Pulse,
}

impl WindowLabel {
    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn window_label(events: &[Event], start: usize, end: usize) -> WindowLabel {
    let hits = |kinds: &[EventKind]| {
        events.iter().any(|e| {
            let (a, b) = e.core();
            kinds.contains(&e.kind) && a < end && start < b
        })
    };
    if hits(&[EventKind::SymPulse, EventKind::AsymPulse]) {
        WindowLabel::Pulse
    } else if hits(&[EventKind::MediumEvent]) {
        WindowLabel::Medium
    } else {
        WindowLabel::Background
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub n_samples: usize,
    pub config: SynthConfig,
    pub events: Vec<Event>,
}

pub const DATASET_FILES: [&str; 5] = ["mixture.f32", "large.f32", "medium.f32", "fine.f32", "gate.f32"];

/// Writes float32 arrays for the mixture, each component and the gate, plus
/// `events.json` holding the config echo and the event log.
pub fn write_dataset(ds: &SynthDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, data) in DATASET_FILES
        .iter()
        .zip([&ds.x, &ds.x_large, &ds.x_medium, &ds.x_fine, &ds.gate])
    {
        storage::write_f32(&dir.join(name), data)?;
    }
    storage::write_json(
        &dir.join("events.json"),
        &DatasetHeader {
            schema_version: storage::SCHEMA_VERSION,
            n_samples: ds.x.len(),
            config: ds.config.clone(),
            events: ds.events.clone(),
        },
    )
}

/// Reads a dataset directory; arrays come back as the stored float32 values.
pub fn read_dataset(dir: &Path) -> Result<SynthDataset> {
    let header: DatasetHeader = storage::read_json(&dir.join("events.json"))?;
    storage::check_schema(header.schema_version)?;
    let mut arrays = Vec::with_capacity(5);
    for name in DATASET_FILES {
        let a = storage::read_f32(&dir.join(name))?;
        if a.len() != header.n_samples {
            return Err(Error::Format(format!(
                "{name} holds {} samples, header says {}",
                a.len(),
                header.n_samples
            )));
        }
        arrays.push(a);
    }
    let gate = arrays.pop().unwrap();
    let x_fine = arrays.pop().unwrap();
    let x_medium = arrays.pop().unwrap();
    let x_large = arrays.pop().unwrap();
    let x = arrays.pop().unwrap();
    Ok(SynthDataset {
        config: header.config,
        x,
        x_large,
        x_medium,
        x_fine,
        gate,
        events: header.events,
    })
}
