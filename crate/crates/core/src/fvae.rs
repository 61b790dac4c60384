//! Factorial Gaussian-mixture variational autoencoder.
//!
//! One joint encoder reads the concatenated features of every scale. Each
//! scale `i` then has its own categorical latent `y_i` (mixture logits head),
//! a Gaussian latent `z_i | y_i` and a decoder that sees `z_i` only. The
//! prior on `z_i | y_i` is a learnable Gaussian per mixture component.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{gradcheck_tape, GradCheck, Tape, Var};
use crate::error::{Error, Result};
use crate::storage;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const LEAKY_SLOPE: f64 = 0.01;
/// Weight of the previous running statistic in a batchnorm update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// How the decoder observation variance is parameterized; written to
/// checkpoints.
pub const DECODER_VARIANCE: &str = "learned_per_coordinate";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvaeConfig {
    /// Mixture components per scale.
    pub clusters: Vec<usize>,
    /// Feature dimension per scale.
    pub d_in: Vec<usize>,
    pub hidden: usize,
    pub latent: usize,
    pub n_joint_blocks: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub tau0: f64,
    pub tau_min: f64,
    pub tau_decay: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl FvaeConfig {
    /// Defaults for every hyperparameter except the per-scale shapes.
    pub fn new(clusters: Vec<usize>, d_in: Vec<usize>) -> Self {
        FvaeConfig {
            clusters,
            d_in,
            hidden: 1024,
            latent: 32,
            n_joint_blocks: 4,
            lr: 1e-3,
            epochs: 1000,
            batch: 16384,
            tau0: 1.0,
            tau_min: 0.5,
            tau_decay: 3e-3,
            val_fraction: 0.1,
            seed: 0,
        }
    }

    pub fn scales(&self) -> usize {
        self.clusters.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clusters.is_empty() {
            return bad("at least one scale is required".into());
        }
        if self.clusters.len() != self.d_in.len() {
            return bad(format!(
                "{} cluster counts for {} feature dimensions",
                self.clusters.len(),
                self.d_in.len()
            ));
        }
        if self.clusters.iter().any(|&c| c == 0) {
            return bad("every scale needs at least one cluster".into());
        }
        if self.d_in.iter().any(|&d| d == 0) || self.hidden == 0 || self.latent == 0 {
            return bad("feature, hidden and latent widths must be positive".into());
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.lr));
        }
        if !(self.tau_min > 0.0 && self.tau_min <= self.tau0 && self.tau0.is_finite()) {
            return bad(format!(
                "temperatures must satisfy 0 < tau_min <= tau0, got {} and {}",
                self.tau_min, self.tau0
            ));
        }
        if !(self.tau_decay >= 0.0) {
            return bad("tau_decay must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Gumbel-Softmax temperature of an epoch.
    pub fn tau(&self, epoch: usize) -> f64 {
        (self.tau0 * (-self.tau_decay * epoch as f64).exp()).max(self.tau_min)
    }
}

/// Row-major features, one matrix per scale, sharing the row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub dims: Vec<usize>,
    pub rows: usize,
    pub scales: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(dims: Vec<usize>, scales: Vec<Vec<f64>>) -> Result<Self> {
        if dims.len() != scales.len() || dims.is_empty() {
            return Err(Error::Shape("one matrix per scale is required".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape("feature dimensions must be positive".into()));
        }
        let rows = scales[0].len() / dims[0];
        for (d, m) in dims.iter().zip(&scales) {
            if m.len() != rows * d {
                return Err(Error::Shape(format!(
                    "scale matrix of {} values is not {rows} x {d}",
                    m.len()
                )));
            }
        }
        Ok(FeatureSet { dims, rows, scales })
    }

    pub fn row(&self, scale: usize, r: usize) -> &[f64] {
        let d = self.dims[scale];
        &self.scales[scale][r * d..(r + 1) * d]
    }

    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        let scales = self
            .dims
            .iter()
            .enumerate()
            .map(|(i, _)| idx.iter().flat_map(|&r| self.row(i, r).iter().cloned()).collect())
            .collect();
        FeatureSet {
            dims: self.dims.clone(),
            rows: idx.len(),
            scales,
        }
    }
}

/// Per-coefficient z-scoring fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl Standardizer {
    pub fn identity(dims: &[usize]) -> Self {
        Standardizer {
            mean: dims.iter().map(|&d| vec![0.0; d]).collect(),
            std: dims.iter().map(|&d| vec![1.0; d]).collect(),
        }
    }

    /// Column statistics; constant columns get unit scale.
    pub fn fit(f: &FeatureSet) -> Self {
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, &d) in f.dims.iter().enumerate() {
            let n = f.rows.max(1) as f64;
            let mut m = vec![0.0; d];
            for r in 0..f.rows {
                m.iter_mut().zip(f.row(i, r)).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= n);
            let mut v = vec![0.0; d];
            for r in 0..f.rows {
                for ((a, b), mu) in v.iter_mut().zip(f.row(i, r)).zip(&m) {
                    *a += (b - mu) * (b - mu);
                }
            }
            let s = v
                .iter()
                .zip(&m)
                .map(|(a, mu)| {
                    let s = (a / n).sqrt();
                    if s > 1e-12 * mu.abs().max(1e-300) && s > 0.0 {
                        s
                    } else {
                        1.0
                    }
                })
                .collect();
            mean.push(m);
            std.push(s);
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, f: &FeatureSet) -> FeatureSet {
        let scales = f
            .scales
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let d = f.dims[i];
                m.iter()
                    .enumerate()
                    .map(|(k, v)| (v - self.mean[i][k % d]) / self.std[i][k % d])
                    .collect()
            })
            .collect();
        FeatureSet {
            dims: f.dims.clone(),
            rows: f.rows,
            scales,
        }
    }

    pub fn invert(&self, scale: usize, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, x)| x * self.std[scale][k] + self.mean[scale][k])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    #[serde(skip)]
    pub mean: Vec<f64>,
    #[serde(skip)]
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FvaeModel {
    pub config: FvaeConfig,
    pub params: Vec<Tensor>,
    /// Running batchnorm statistics, one per joint block.
    pub running: Vec<RunningStats>,
    pub standardizer: Standardizer,
    pub step: u64,
    pub epoch: usize,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let a = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Fresh parameters drawn from `cfg.seed`.
pub fn init_model(cfg: &FvaeConfig) -> Result<FvaeModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::new();
    let dense = |params: &mut Vec<Tensor>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize| {
        params.push(Tensor {
            name: format!("{name}.w"),
            rows: fan_in,
            cols: out,
            data: uniform_fan_in(rng, fan_in, fan_in * out),
        });
        params.push(Tensor {
            name: format!("{name}.b"),
            rows: 1,
            cols: out,
            data: uniform_fan_in(rng, fan_in, out),
        });
    };
    let (h, l) = (cfg.hidden, cfg.latent);
    let d_total: usize = cfg.d_in.iter().sum();
    dense(&mut params, &mut rng, "enc.in", d_total, h);
    for k in 0..cfg.n_joint_blocks {
        dense(&mut params, &mut rng, &format!("enc.block{k}"), h, h);
        params.push(Tensor {
            name: format!("enc.block{k}.gamma"),
            rows: 1,
            cols: h,
            data: vec![1.0; h],
        });
        params.push(Tensor {
            name: format!("enc.block{k}.beta"),
            rows: 1,
            cols: h,
            data: vec![0.0; h],
        });
    }
    for (i, (&c, &d)) in cfg.clusters.iter().zip(&cfg.d_in).enumerate() {
        dense(&mut params, &mut rng, &format!("head{i}.features"), h, h);
        dense(&mut params, &mut rng, &format!("head{i}.logits"), h, c);
        dense(&mut params, &mut rng, &format!("head{i}.z"), h, 2 * l);
        params.push(Tensor {
            name: format!("head{i}.z_y"),
            rows: c,
            cols: 2 * l,
            data: uniform_fan_in(&mut rng, c, c * 2 * l),
        });
        dense(&mut params, &mut rng, &format!("dec{i}.l1"), l, h);
        dense(&mut params, &mut rng, &format!("dec{i}.l2"), h, h);
        dense(&mut params, &mut rng, &format!("dec{i}.out"), h, d);
        params.push(Tensor {
            name: format!("dec{i}.logvar"),
            rows: 1,
            cols: d,
            data: vec![0.0; d],
        });
        params.push(Tensor {
            name: format!("prior{i}.mu"),
            rows: c,
            cols: l,
            data: (0..c * l).map(|_| StandardNormal.sample(&mut rng)).collect(),
        });
        params.push(Tensor {
            name: format!("prior{i}.logvar"),
            rows: c,
            cols: l,
            data: vec![0.0; c * l],
        });
    }
    let running = (0..cfg.n_joint_blocks)
        .map(|_| RunningStats {
            mean: vec![0.0; h],
            var: vec![1.0; h],
        })
        .collect();
    Ok(FvaeModel {
        config: cfg.clone(),
        params,
        running,
        standardizer: Standardizer::identity(&cfg.d_in),
        step: 0,
        epoch: 0,
    })
}

impl FvaeModel {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    fn check_features(&self, f: &FeatureSet) -> Result<()> {
        if f.dims != self.config.d_in {
            return Err(Error::Shape(format!(
                "features have dimensions {:?}, model expects {:?}",
                f.dims, self.config.d_in
            )));
        }
        Ok(())
    }
}

/// Frozen randomness of one ELBO evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboNoise {
    /// Gumbel draws, `rows x c_i` per scale.
    pub gumbel: Vec<Vec<f64>>,
    /// Standard normal draws, `rows x latent` per scale.
    pub eps: Vec<Vec<f64>>,
}

impl ElboNoise {
    pub fn draw<R: Rng>(cfg: &FvaeConfig, rows: usize, rng: &mut R) -> Self {
        let mut gumbel = Vec::new();
        let mut eps = Vec::new();
        for &c in &cfg.clusters {
            gumbel.push(
                (0..rows * c)
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        -(-u.ln()).ln()
                    })
                    .collect(),
            );
            eps.push(
                (0..rows * cfg.latent)
                    .map(|_| StandardNormal.sample(rng))
                    .collect(),
            );
        }
        ElboNoise { gumbel, eps }
    }
}

/// Batch means of the ELBO terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub recon: Vec<f64>,
    pub kl_cat: Vec<f64>,
    pub kl_gauss: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Train,
    Eval,
}

struct Graph {
    tape: Tape,
    leaves: Vec<Var>,
    bn: Vec<Var>,
    probs: Vec<Var>,
    terms: Option<GraphTerms>,
}

struct GraphTerms {
    recon: Vec<Var>,
    kl_cat: Vec<Var>,
    kl_gauss: Vec<Var>,
    total: Var,
}

/// Builds the model graph on standardized features `u`. Without noise only
/// the mixture probabilities are built.
fn build_graph(model: &FvaeModel, u: &FeatureSet, mode: Mode, noise: Option<(&ElboNoise, f64)>) -> Graph {
    let cfg = &model.config;
    let rows = u.rows;
    let (h, l) = (cfg.hidden, cfg.latent);
    let mut t = Tape::new();
    let leaves: Vec<Var> = model
        .params
        .iter()
        .map(|p| t.leaf(&p.name, p.rows, p.cols))
        .collect();
    let p = |name: &str| -> Var {
        let i = model
            .params
            .iter()
            .position(|q| q.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        leaves[i]
    };
    let dense = |t: &mut Tape, x: Var, name: &str| t.affine(x, p(&format!("{name}.w")), p(&format!("{name}.b")));

    let inputs: Vec<Var> = u
        .scales
        .iter()
        .zip(&u.dims)
        .map(|(m, &d)| t.constant(rows, d, m.clone()))
        .collect();
    let joint_in = t.concat_cols(&inputs);
    let mut x = dense(&mut t, joint_in, "enc.in");
    let mut bn = Vec::new();
    for k in 0..cfg.n_joint_blocks {
        let a = dense(&mut t, x, &format!("enc.block{k}"));
        let (g, b) = (p(&format!("enc.block{k}.gamma")), p(&format!("enc.block{k}.beta")));
        let n = match mode {
            Mode::Train => t.batch_norm_train(a, g, b, BN_EPS),
            Mode::Eval => t.batch_norm_eval(
                a,
                g,
                b,
                BN_EPS,
                Arc::new(model.running[k].mean.clone()),
                Arc::new(model.running[k].var.clone()),
            ),
        };
        bn.push(n);
        let act = t.leaky_relu(n, LEAKY_SLOPE);
        x = t.add(x, act);
    }

    let mut probs = Vec::new();
    let mut recon = Vec::new();
    let mut kl_cat = Vec::new();
    let mut kl_gauss = Vec::new();
    for (i, &c) in cfg.clusters.iter().enumerate() {
        let f = dense(&mut t, x, &format!("head{i}.features"));
        let f = t.leaky_relu(f, LEAKY_SLOPE);
        let logits = dense(&mut t, f, &format!("head{i}.logits"));
        let pi = t.softmax(logits);
        probs.push(pi);
        let Some((noise, tau)) = noise else { continue };

        let log_pi = t.log_softmax(logits);
        let ent = t.mul(pi, log_pi);
        let ent = t.sum_cols(ent);
        kl_cat.push(t.offset(ent, (c as f64).ln()));

        let zh = dense(&mut t, f, &format!("head{i}.z"));
        let zy = p(&format!("head{i}.z_y"));
        let pm = p(&format!("prior{i}.mu"));
        let plv = p(&format!("prior{i}.logvar"));
        let plv = t.clamp(plv, LOGVAR_MIN, LOGVAR_MAX);
        let q_params = |t: &mut Tape, pre: Var| {
            let mu = t.slice_cols(pre, 0, l);
            let lv = t.slice_cols(pre, l, 2 * l);
            (mu, t.clamp(lv, LOGVAR_MIN, LOGVAR_MAX))
        };

        // exact expectation over y of KL(q(z|u,y) || p(z|y))
        let mut kg_parts = Vec::with_capacity(c);
        for y in 0..c {
            let row = t.slice_rows(zy, y, y + 1);
            let pre = t.add(zh, row);
            let (mq, lvq) = q_params(&mut t, pre);
            let pmy = t.slice_rows(pm, y, y + 1);
            let plvy = t.slice_rows(plv, y, y + 1);
            let d = t.sub(mq, pmy);
            let d2 = t.square(d);
            let vq = t.exp(lvq);
            let num = t.add(vq, d2);
            let nplv = t.neg(plvy);
            let inv_vp = t.exp(nplv);
            let ratio = t.mul(num, inv_vp);
            let lr = t.sub(plvy, lvq);
            let s = t.add(lr, ratio);
            let s = t.offset(s, -1.0);
            let s = t.sum_cols(s);
            let kl = t.scale(s, 0.5);
            let w = t.slice_cols(pi, y, y + 1);
            kg_parts.push(t.mul(w, kl));
        }
        let kg = t.concat_cols(&kg_parts);
        kl_gauss.push(t.sum_cols(kg));

        // relaxed categorical sample feeds the z-head
        let g = t.constant(rows, c, noise.gumbel[i].clone());
        let perturbed = t.add(log_pi, g);
        let perturbed = t.scale(perturbed, 1.0 / tau);
        let y_soft = t.softmax(perturbed);
        let ycontrib = t.matmul(y_soft, zy);
        let pre = t.add(zh, ycontrib);
        let (mq, lvq) = q_params(&mut t, pre);
        let half = t.scale(lvq, 0.5);
        let sd = t.exp(half);
        let e = t.constant(rows, l, noise.eps[i].clone());
        let se = t.mul(sd, e);
        let z = t.add(mq, se);

        let d1 = dense(&mut t, z, &format!("dec{i}.l1"));
        let d1 = t.leaky_relu(d1, LEAKY_SLOPE);
        let d2 = dense(&mut t, d1, &format!("dec{i}.l2"));
        let d2 = t.leaky_relu(d2, LEAKY_SLOPE);
        let mu_u = dense(&mut t, d2, &format!("dec{i}.out"));
        let lvu = p(&format!("dec{i}.logvar"));
        let lvu = t.clamp(lvu, LOGVAR_MIN, LOGVAR_MAX);
        let diff = t.sub(inputs[i], mu_u);
        let diff2 = t.square(diff);
        let nlvu = t.neg(lvu);
        let inv_vu = t.exp(nlvu);
        let wsq = t.mul(diff2, inv_vu);
        let nll = t.add(wsq, lvu);
        let nll = t.offset(nll, (2.0 * PI).ln());
        let nll = t.sum_cols(nll);
        recon.push(t.scale(nll, 0.5));
    }
    let _ = h;

    let terms = noise.map(|_| {
        let mut per_row = Vec::new();
        for i in 0..cfg.scales() {
            per_row.push(recon[i]);
            per_row.push(kl_cat[i]);
            per_row.push(kl_gauss[i]);
        }
        let all = t.concat_cols(&per_row);
        let s = t.sum_cols(all);
        let total = t.mean(s);
        let mean_of = |t: &mut Tape, v: &[Var]| v.iter().map(|&x| t.mean(x)).collect::<Vec<_>>();
        GraphTerms {
            recon: mean_of(&mut t, &recon),
            kl_cat: mean_of(&mut t, &kl_cat),
            kl_gauss: mean_of(&mut t, &kl_gauss),
            total,
        }
    });
    Graph {
        tape: t,
        leaves,
        bn,
        probs,
        terms,
    }
}

fn forward(model: &FvaeModel, g: &mut Graph) -> Result<()> {
    let bindings: Vec<(Var, &[f64])> = g
        .leaves
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| (v, p.data.as_slice()))
        .collect();
    g.tape.forward(&bindings)
}

fn read_terms(g: &Graph) -> Result<ElboTerms> {
    let terms = g.terms.as_ref().expect("graph built with noise");
    let read = |v: &[Var]| v.iter().map(|&x| g.tape.scalar_value(x)).collect::<Result<Vec<_>>>();
    Ok(ElboTerms {
        recon: read(&terms.recon)?,
        kl_cat: read(&terms.kl_cat)?,
        kl_gauss: read(&terms.kl_gauss)?,
        total: g.tape.scalar_value(terms.total)?,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// ELBO terms of raw features with frozen noise; train-mode batchnorm uses
/// the batch statistics.
pub fn elbo_terms_with(model: &FvaeModel, u: &FeatureSet, tau: f64, noise: &ElboNoise, train: bool) -> Result<ElboTerms> {
    check_tau(tau)?;
    model.check_features(u)?;
    let z = model.standardizer.apply(u);
    let mode = if train { Mode::Train } else { Mode::Eval };
    let mut g = build_graph(model, &z, mode, Some((noise, tau)));
    forward(model, &mut g)?;
    read_terms(&g)
}

/// ELBO terms of a batch with noise drawn from `rng`.
pub fn elbo_terms<R: Rng>(model: &FvaeModel, u: &FeatureSet, tau: f64, rng: &mut R) -> Result<ElboTerms> {
    let noise = ElboNoise::draw(&model.config, u.rows, rng);
    elbo_terms_with(model, u, tau, &noise, true)
}

/// Finite-difference check of the ELBO gradient over all parameters.
pub fn elbo_gradcheck(
    model: &FvaeModel,
    u: &FeatureSet,
    tau: f64,
    noise: &ElboNoise,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    check_tau(tau)?;
    model.check_features(u)?;
    let z = model.standardizer.apply(u);
    let mut g = build_graph(model, &z, Mode::Train, Some((noise, tau)));
    let total = g.terms.as_ref().unwrap().total;
    let bindings: Vec<(Var, Vec<f64>)> = g
        .leaves
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| (v, p.data.clone()))
        .collect();
    gradcheck_tape(&mut g.tape, total, &bindings, h, n_coords, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub train: ElboTerms,
    pub validation: Option<ElboTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub n_train: usize,
    pub n_validation: usize,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(model: &FvaeModel) -> Self {
        let zeros = || model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn update(&mut self, model: &mut FvaeModel, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (k, p) in model.params.iter_mut().enumerate() {
            for (j, w) in p.data.iter_mut().enumerate() {
                let g = grads[k][j];
                let m = &mut self.m[k][j];
                let v = &mut self.v[k][j];
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn add_terms(acc: &mut ElboTerms, t: &ElboTerms, w: f64) {
    let add = |a: &mut Vec<f64>, b: &[f64]| a.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
    add(&mut acc.recon, &t.recon);
    add(&mut acc.kl_cat, &t.kl_cat);
    add(&mut acc.kl_gauss, &t.kl_gauss);
    acc.total += w * t.total;
}

fn zero_terms(s: usize) -> ElboTerms {
    ElboTerms {
        recon: vec![0.0; s],
        kl_cat: vec![0.0; s],
        kl_gauss: vec![0.0; s],
        total: 0.0,
    }
}

/// Seeded train/validation split: validation indices first.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    idx.shuffle(&mut rng);
    let n_val = (val_fraction * n as f64).floor() as usize;
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Trains with Adam on the ELBO. Standardization is fitted on the training
/// split and stored in the model.
pub fn train(model: &mut FvaeModel, features: &FeatureSet) -> Result<TrainHistory> {
    train_observed(model, features, |_| {})
}

pub fn train_observed(
    model: &mut FvaeModel,
    features: &FeatureSet,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    let cfg = model.config.clone();
    cfg.validate()?;
    model.check_features(features)?;
    if features.rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let (train_idx, val_idx) = split_indices(features.rows, cfg.val_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let train_set = features.select(&train_idx);
    model.standardizer = Standardizer::fit(&train_set);
    let train_z = model.standardizer.apply(&train_set);
    let val_z = model.standardizer.apply(&features.select(&val_idx));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..train_z.rows).collect();
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        n_train: train_idx.len(),
        n_validation: val_idx.len(),
    };
    for epoch in 0..cfg.epochs {
        let tau = cfg.tau(epoch);
        order.shuffle(&mut rng);
        let mut acc = zero_terms(cfg.scales());
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            // a single row has no batch statistics
            if chunk.len() < 2 && seen > 0 {
                continue;
            }
            let batch = train_z.select(chunk);
            let noise = ElboNoise::draw(&cfg, batch.rows, &mut rng);
            let mut g = build_graph(model, &batch, Mode::Train, Some((&noise, tau)));
            forward(model, &mut g)?;
            let terms = read_terms(&g)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "ELBO at epoch {epoch}, step {}: recon {:?}, kl_cat {:?}, kl_gauss {:?}",
                    model.step, terms.recon, terms.kl_cat, terms.kl_gauss
                )));
            }
            let report = g.tape.backward(g.terms.as_ref().unwrap().total)?;
            let grads: Vec<Vec<f64>> = g
                .leaves
                .iter()
                .map(|&v| report.grad(v).unwrap().to_vec())
                .collect();
            if !report.norm.is_finite() {
                return Err(Error::NonFinite(format!("ELBO gradient at epoch {epoch}, step {}", model.step)));
            }
            adam.update(model, &grads, cfg.lr);
            for (k, &v) in g.bn.iter().enumerate() {
                if let Some((m, s)) = g.tape.batch_stats(v) {
                    let r = &mut model.running[k];
                    r.mean
                        .iter_mut()
                        .zip(m)
                        .for_each(|(a, b)| *a = BN_MOMENTUM * *a + (1.0 - BN_MOMENTUM) * b);
                    r.var
                        .iter_mut()
                        .zip(s)
                        .for_each(|(a, b)| *a = BN_MOMENTUM * *a + (1.0 - BN_MOMENTUM) * b);
                }
            }
            model.step += 1;
            add_terms(&mut acc, &terms, batch.rows as f64);
            seen += batch.rows;
        }
        let mut train_terms = zero_terms(cfg.scales());
        add_terms(&mut train_terms, &acc, 1.0 / seen as f64);
        let validation = if val_z.rows > 0 {
            let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9));
            let noise = ElboNoise::draw(&cfg, val_z.rows, &mut vrng);
            let mut g = build_graph(model, &val_z, Mode::Eval, Some((&noise, tau)));
            forward(model, &mut g)?;
            Some(read_terms(&g)?)
        } else {
            None
        };
        model.epoch = epoch + 1;
        let rec = EpochRecord {
            epoch,
            tau,
            train: train_terms,
            validation,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Window end sample per row, when known.
    pub end: Vec<u64>,
    /// `probs[i]` is `rows x c_i`, row-major.
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<Vec<usize>>,
    pub confidence: Vec<Vec<f64>>,
}

/// Mixture probabilities with eval-mode batchnorm; no sampling.
pub fn assign_clusters(model: &FvaeModel, u: &FeatureSet) -> Result<ClusterAssignment> {
    model.check_features(u)?;
    let s = model.config.scales();
    let mut probs: Vec<Vec<f64>> = vec![Vec::with_capacity(u.rows); s];
    let all: Vec<usize> = (0..u.rows).collect();
    for chunk in all.chunks(4096) {
        let part = model.standardizer.apply(&u.select(chunk));
        let mut g = build_graph(model, &part, Mode::Eval, None);
        forward(model, &mut g)?;
        for i in 0..s {
            probs[i].extend_from_slice(g.tape.value(g.probs[i])?);
        }
    }
    let mut labels = Vec::with_capacity(s);
    let mut confidence = Vec::with_capacity(s);
    for (i, p) in probs.iter().enumerate() {
        let c = model.config.clusters[i];
        let (l, conf): (Vec<usize>, Vec<f64>) = p
            .chunks(c)
            .map(|row| {
                let (k, v) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
                (k, v)
            })
            .unzip();
        labels.push(l);
        confidence.push(conf);
    }
    Ok(ClusterAssignment {
        end: (0..u.rows as u64).collect(),
        probs,
        labels,
        confidence,
    })
}

/// Decoder mean of scale `i` for latent rows `z` (`rows x latent`), in
/// standardized feature units.
pub fn decode(model: &FvaeModel, scale: usize, z: &[f64]) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if scale >= cfg.scales() {
        return Err(Error::OutOfRange(format!("scale {scale} of {}", cfg.scales())));
    }
    if z.len() % cfg.latent != 0 {
        return Err(Error::Shape(format!("latent rows must have {} entries", cfg.latent)));
    }
    let rows = z.len() / cfg.latent;
    let mut t = Tape::new();
    let get = |t: &mut Tape, name: &str| {
        let p = model.param(name).expect("decoder parameter");
        t.constant(p.rows, p.cols, p.data.clone())
    };
    let zv = t.constant(rows, cfg.latent, z.to_vec());
    let mut x = zv;
    for (layer, act) in [("l1", true), ("l2", true), ("out", false)] {
        let w = get(&mut t, &format!("dec{scale}.{layer}.w"));
        let b = get(&mut t, &format!("dec{scale}.{layer}.b"));
        x = t.affine(x, w, b);
        if act {
            x = t.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    t.forward(&[])?;
    Ok(t.value(x)?.to_vec())
}

/// Draws `n` latents from the prior of cluster `y` at scale `i` and returns
/// their decoded means in feature units.
pub fn sample_cluster_representation<R: Rng>(
    model: &FvaeModel,
    scale: usize,
    cluster: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    if scale >= cfg.scales() {
        return Err(Error::OutOfRange(format!("scale {scale} of {}", cfg.scales())));
    }
    if cluster >= cfg.clusters[scale] {
        return Err(Error::OutOfRange(format!(
            "cluster {cluster} of {} at scale {scale}",
            cfg.clusters[scale]
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let l = cfg.latent;
    let mu = &model.param(&format!("prior{scale}.mu")).unwrap().data[cluster * l..(cluster + 1) * l];
    let lv = &model.param(&format!("prior{scale}.logvar")).unwrap().data[cluster * l..(cluster + 1) * l];
    let mut z = Vec::with_capacity(n * l);
    for _ in 0..n {
        for k in 0..l {
            let e: f64 = StandardNormal.sample(rng);
            z.push(mu[k] + (0.5 * lv[k].clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e);
        }
    }
    let d = cfg.d_in[scale];
    let out = decode(model, scale, &z)?;
    Ok(out
        .chunks(d)
        .map(|row| model.standardizer.invert(scale, row))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub config: FvaeConfig,
    pub standardizer: Standardizer,
    pub epoch: usize,
    pub step: u64,
    pub decoder_variance: String,
    pub blob: String,
    pub blob_sha256: String,
    entries: Vec<BlobEntry>,
}

pub const CHECKPOINT_HEADER: &str = "model.json";
pub const CHECKPOINT_BLOB: &str = "params.f64";

/// Writes `model.json` and a float64 parameter blob to `dir`.
pub fn save_checkpoint(model: &FvaeModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut flat = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize, data: &[f64], flat: &mut Vec<f64>| {
        entries.push(BlobEntry {
            name,
            rows,
            cols,
            offset: flat.len(),
        });
        flat.extend_from_slice(data);
    };
    for p in &model.params {
        push(p.name.clone(), p.rows, p.cols, &p.data, &mut flat);
    }
    for (k, r) in model.running.iter().enumerate() {
        push(format!("bn{k}.running_mean"), 1, r.mean.len(), &r.mean, &mut flat);
        push(format!("bn{k}.running_var"), 1, r.var.len(), &r.var, &mut flat);
    }
    let bytes = storage::f64_bytes(&flat);
    std::fs::write(dir.join(CHECKPOINT_BLOB), &bytes)?;
    storage::write_json(
        &dir.join(CHECKPOINT_HEADER),
        &CheckpointHeader {
            schema_version: storage::SCHEMA_VERSION,
            config: model.config.clone(),
            standardizer: model.standardizer.clone(),
            epoch: model.epoch,
            step: model.step,
            decoder_variance: DECODER_VARIANCE.into(),
            blob: CHECKPOINT_BLOB.into(),
            blob_sha256: storage::sha256_hex(&bytes),
            entries,
        },
    )
}

pub fn load_checkpoint(dir: &Path) -> Result<FvaeModel> {
    let header: CheckpointHeader = storage::read_json(&dir.join(CHECKPOINT_HEADER))?;
    storage::check_schema(header.schema_version)?;
    let bytes = std::fs::read(dir.join(&header.blob))?;
    if storage::sha256_hex(&bytes) != header.blob_sha256 {
        return Err(Error::Digest(header.blob.clone()));
    }
    let flat = storage::f64_from_bytes(&bytes)?;
    let mut model = init_model(&header.config)?;
    let take = |name: &str, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let e = header
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        if (e.rows, e.cols) != (rows, cols) || e.offset + rows * cols > flat.len() {
            return Err(Error::Format(format!("checkpoint entry `{name}` has the wrong shape")));
        }
        Ok(flat[e.offset..e.offset + rows * cols].to_vec())
    };
    for p in &mut model.params {
        p.data = take(&p.name, p.rows, p.cols)?;
    }
    for (k, r) in model.running.iter_mut().enumerate() {
        r.mean = take(&format!("bn{k}.running_mean"), 1, r.mean.len())?;
        r.var = take(&format!("bn{k}.running_var"), 1, r.var.len())?;
    }
    model.standardizer = header.standardizer;
    model.epoch = header.epoch;
    model.step = header.step;
    Ok(model)
}


/// ELBO gradient check on a small two-scale model with clustered toy rows.
pub fn toy_elbo_gradcheck(seed: u64) -> Result<GradCheck> {
    let cfg = FvaeConfig {
        hidden: 8,
        latent: 3,
        n_joint_blocks: 2,
        batch: 16,
        epochs: 3,
        seed: 11 + seed,
        ..FvaeConfig::new(vec![3, 2], vec![5, 4])
    };
    let m = init_model(&cfg)?;
    let rows = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(3 + seed);
    let mut draw = |d: usize| -> Vec<f64> {
        (0..rows * d)
            .map(|k| {
                let e: f64 = StandardNormal.sample(&mut rng);
                e + 3.0 * ((k / d) % 3) as f64
            })
            .collect()
    };
    let a = draw(5);
    let b = draw(4);
    let f = FeatureSet::new(vec![5, 4], vec![a, b])?;
    let noise = ElboNoise::draw(&m.config, rows, &mut ChaCha8Rng::seed_from_u64(4 + seed));
    elbo_gradcheck(&m, &f, 0.8, &noise, 1e-5, 60, 5 + seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg() -> FvaeConfig {
        FvaeConfig {
            hidden: 8,
            latent: 3,
            n_joint_blocks: 2,
            batch: 16,
            epochs: 3,
            seed: 11,
            ..FvaeConfig::new(vec![3, 2], vec![5, 4])
        }
    }

    fn toy_features(rows: usize, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |d: usize| -> Vec<f64> {
            (0..rows * d)
                .map(|k| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    e + 3.0 * ((k / d) % 3) as f64
                })
                .collect()
        };
        let a = draw(5);
        let b = draw(4);
        FeatureSet::new(vec![5, 4], vec![a, b]).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let a = init_model(&toy_cfg()).unwrap();
        let b = init_model(&toy_cfg()).unwrap();
        assert_eq!(a, b);
        let degenerate = FvaeConfig {
            hidden: 2,
            latent: 1,
            n_joint_blocks: 1,
            ..FvaeConfig::new(vec![1], vec![3])
        };
        init_model(&degenerate).unwrap();
        let mut bad = toy_cfg();
        bad.clusters[1] = 0;
        assert!(init_model(&bad).is_err());
        let mut bad = toy_cfg();
        bad.tau_min = 2.0;
        assert!(init_model(&bad).is_err());
    }

    #[test]
    fn kl_terms_are_nonnegative() {
        let f = toy_features(8, 1);
        for draw in 0..100u64 {
            let mut cfg = toy_cfg();
            cfg.seed = draw;
            let mut m = init_model(&cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(draw);
            for p in &mut m.params {
                p.data.iter_mut().for_each(|v| *v *= rng.gen_range(0.5..3.0));
            }
            let t = elbo_terms(&m, &f, 0.7, &mut rng).unwrap();
            assert!(t.kl_cat.iter().chain(&t.kl_gauss).all(|&k| k >= -1e-9), "{t:?}");
            assert!(t.total.is_finite());
        }
    }

    #[test]
    fn uniform_logits_and_matching_posterior_give_zero_kl() {
        let cfg = toy_cfg();
        let mut m = init_model(&cfg).unwrap();
        let l = cfg.latent;
        for i in 0..2 {
            let c = cfg.clusters[i];
            for name in [format!("head{i}.logits.w"), format!("head{i}.logits.b"), format!("head{i}.z.w")] {
                m.params.iter_mut().find(|p| p.name == name).unwrap().data.fill(0.0);
            }
            // q(z|u,y) = z-head bias + row y, matched by the prior
            let zb = m.param(&format!("head{i}.z.b")).unwrap().data.clone();
            let zy = m.param(&format!("head{i}.z_y")).unwrap().data.clone();
            let mut mu = vec![0.0; c * l];
            let mut lv = vec![0.0; c * l];
            for y in 0..c {
                for k in 0..l {
                    mu[y * l + k] = zb[k] + zy[y * 2 * l + k];
                    lv[y * l + k] = zb[l + k] + zy[y * 2 * l + l + k];
                }
            }
            m.params.iter_mut().find(|p| p.name == format!("prior{i}.mu")).unwrap().data = mu;
            m.params.iter_mut().find(|p| p.name == format!("prior{i}.logvar")).unwrap().data = lv;
        }
        let t = elbo_terms(&m, &toy_features(6, 2), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for k in t.kl_cat.iter().chain(&t.kl_gauss) {
            assert!(k.abs() < 1e-12, "{t:?}");
        }
    }

    #[test]
    fn nonpositive_tau_is_rejected() {
        let m = init_model(&toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(elbo_terms(&m, &toy_features(4, 1), 0.0, &mut rng).is_err());
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let r = toy_elbo_gradcheck(0).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn relaxed_samples_harden_at_low_temperature() {
        let logits = [0.3, -1.0, 0.8, 0.1];
        let cfg = FvaeConfig::new(vec![4], vec![1]);
        let noise = ElboNoise::draw(&cfg, 100, &mut ChaCha8Rng::seed_from_u64(9));
        let relaxed_max = |g: &[f64], tau: f64| {
            let mut t = Tape::new();
            let z = t.constant(1, 4, logits.iter().zip(g).map(|(l, g)| (l + g) / tau).collect());
            let s = t.softmax(z);
            t.forward(&[]).unwrap();
            t.value(s).unwrap().iter().cloned().fold(0.0, f64::max)
        };
        for g in noise.gumbel[0].chunks(4) {
            let mut p: Vec<f64> = logits.iter().zip(g).map(|(l, g)| l + g).collect();
            p.sort_by(|a, b| b.total_cmp(a));
            let (m1, m2, m3) = (relaxed_max(g, 1.0), relaxed_max(g, 0.1), relaxed_max(g, 0.01));
            assert!(m1 <= m2 + 1e-12 && m2 <= m3 + 1e-12);
            assert!(relaxed_max(g, 1e-4) >= 0.99);
            // at 0.01 the max entry clears 0.99 whenever the top two
            // perturbed logits are not nearly tied
            if p[0] - p[1] >= 0.01 * (99.0f64 * 3.0).ln() {
                assert!(m3 >= 0.99, "{m3}");
            }
        }
    }

    #[test]
    fn decoders_are_factorial() {
        let m = init_model(&toy_cfg()).unwrap();
        let z0 = vec![0.1, -0.2, 0.3];
        let a = decode(&m, 0, &z0).unwrap();
        // scale 0 depends on its own latent only, whatever z_1 is
        let _ = decode(&m, 1, &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(decode(&m, 0, &z0).unwrap(), a);
        let mut m2 = m.clone();
        for p in &mut m2.params {
            if p.name.starts_with("dec1.") || p.name.starts_with("prior1.") {
                p.data.iter_mut().for_each(|v| *v += 1.0);
            }
        }
        assert_eq!(decode(&m2, 0, &z0).unwrap(), a);
    }

    #[test]
    fn training_is_reproducible_and_lr_zero_freezes() {
        let f = toy_features(40, 6);
        let mut a = init_model(&toy_cfg()).unwrap();
        let mut b = init_model(&toy_cfg()).unwrap();
        let ha = train(&mut a, &f).unwrap();
        let hb = train(&mut b, &f).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.n_validation, 4);
        let cfg = FvaeConfig { lr: 0.0, ..toy_cfg() };
        let init = init_model(&cfg).unwrap();
        let mut m = init.clone();
        train(&mut m, &f).unwrap();
        assert_eq!(m.params, init.params);
        assert!(train(&mut m, &f.select(&[])).is_err());
    }

    #[test]
    fn assignments_are_normalized_and_row_deterministic() {
        let mut m = init_model(&toy_cfg()).unwrap();
        let f = toy_features(30, 7);
        train(&mut m, &f).unwrap();
        let dup = f.select(&[3, 3, 8, 3]);
        let a = assign_clusters(&m, &dup).unwrap();
        for (i, p) in a.probs.iter().enumerate() {
            for row in p.chunks(m.config.clusters[i]) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
            let c = m.config.clusters[i];
            assert_eq!(p[0..c], p[c..2 * c]);
            assert_eq!(p[0..c], p[3 * c..4 * c]);
        }
        assert!(assign_clusters(&m, &toy_features(3, 1).select(&[0]).clone()).is_ok());
        let wrong = FeatureSet::new(vec![2], vec![vec![0.0; 4]]).unwrap();
        assert!(assign_clusters(&m, &wrong).is_err());
    }

    #[test]
    fn sampling_edge_cases() {
        let mut m = init_model(&toy_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_cluster_representation(&m, 0, 0, 0, &mut rng).unwrap().is_empty());
        assert!(sample_cluster_representation(&m, 0, 3, 1, &mut rng).is_err());
        assert!(sample_cluster_representation(&m, 2, 0, 1, &mut rng).is_err());
        m.params
            .iter_mut()
            .find(|p| p.name == "prior0.logvar")
            .unwrap()
            .data
            .fill(-50.0);
        let s = sample_cluster_representation(&m, 0, 1, 5, &mut rng).unwrap();
        let norm = s[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        for other in &s[1..] {
            let d = other.iter().zip(&s[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            // sigma_z = exp(-5) at the clamp bounds the spread to ~1e-2
            assert!(d <= 1e-2 * norm, "{d} vs {norm}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut m = init_model(&toy_cfg()).unwrap();
        train(&mut m, &toy_features(30, 8)).unwrap();
        let dir = std::env::temp_dir().join(format!("scatsep-fvae-{}", std::process::id()));
        save_checkpoint(&m, &dir).unwrap();
        let back = load_checkpoint(&dir).unwrap();
        assert_eq!(back, m);
        let blob = dir.join(CHECKPOINT_BLOB);
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&dir), Err(Error::Digest(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }
}
