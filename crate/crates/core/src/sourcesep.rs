//! Source separation by matching scattering statistics.
//!
//! Given a mixture `x` and snippets `s_i` of the source to recover, the
//! estimate `s1` minimizes
//!
//! ```text
//! L_prior = sum_i mean_t |Psi(s1_t) - Psi(s_i)|^2 / var_i Psi(s_i)
//! L_cross = sum_i |Psi~(s_i, x - s1)|^2            / var_i Psi~(s_i, x)
//! L_data  = sum_i |Psi~(x - s1 + s_i) - Psi~(x)|^2 / var_i Psi~(x + s_i)
//! ```
//!
//! where the long signals are cut into consecutive tiles of the snippet
//! length, `Psi~` averages the per-tile statistics over tiles, snippets are
//! broadcast to every tile, and divisions are per coefficient. The
//! optimization starts from `s1 = x`.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{GradCheck, Tape, Var};
use crate::error::{Error, Result};
use crate::filterbank::FilterBank;
use crate::lbfgs::{lbfgs_minimize_observed, LbfgsConfig, StepRecord, Termination};
use crate::scatcov::{compute_scattering, scatcov_pair, ScatteringCoeffs};
use crate::scatgraph::{self, interleave_rows, BankGraph};
use crate::storage;
use crate::workers;

/// Relative floor of the normalizer variances, times their median positive
/// entry.
pub const NORMALIZER_FLOOR: f64 = 1e-12;

/// Per-coefficient variances across snippets, floored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizers {
    pub prior: Vec<f64>,
    pub data: Vec<f64>,
    pub cross: Vec<f64>,
}

impl Normalizers {
    pub fn scaled(&self, k: f64) -> Normalizers {
        let s = |v: &[f64]| v.iter().map(|x| x * k).collect();
        Normalizers {
            prior: s(&self.prior),
            data: s(&self.data),
            cross: s(&self.cross),
        }
    }
}

fn check_shapes(x: &[f64], snippets: &[Vec<f64>], bank: &FilterBank, window: usize) -> Result<()> {
    if bank.len() != window {
        return Err(Error::Sizing(format!(
            "bank length {} differs from the analysis window {window}",
            bank.len()
        )));
    }
    if x.is_empty() || x.len() % window != 0 {
        return Err(Error::Sizing(format!(
            "mixture length {} is not a positive multiple of {window}",
            x.len()
        )));
    }
    if snippets.is_empty() {
        return Err(Error::Config("at least one snippet is required".into()));
    }
    if let Some(s) = snippets.iter().find(|s| s.len() != window) {
        return Err(Error::Sizing(format!(
            "snippet of {} samples, expected {window}",
            s.len()
        )));
    }
    Ok(())
}

fn tiles(x: &[f64], window: usize) -> impl Iterator<Item = &[f64]> {
    x.chunks(window)
}

fn mean_vectors(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vs[0].clone();
    for v in &vs[1..] {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    let n = vs.len() as f64;
    acc.iter_mut().for_each(|a| *a *= 1.0 / n);
    acc
}

/// Tile-averaged flat scattering covariance.
pub fn tiled_scatcov(x: &[f64], bank: &FilterBank) -> Result<Vec<f64>> {
    let per: Vec<Vec<f64>> = tiles(x, bank.len())
        .map(|t| Ok(scatcov_pair(&compute_scattering(t, bank)?, &compute_scattering(t, bank)?, 0..bank.len()).flat_real()))
        .collect::<Result<_>>()?;
    Ok(mean_vectors(&per))
}

fn variance_floored(vs: &[Vec<f64>]) -> Vec<f64> {
    // shifted by the first vector so identical inputs give exactly zero
    let n = vs.len() as f64;
    let origin = &vs[0];
    let mut sum = vec![0.0; origin.len()];
    let mut sq = vec![0.0; origin.len()];
    for v in vs {
        for (k, (x, o)) in v.iter().zip(origin).enumerate() {
            let d = x - o;
            sum[k] += d;
            sq[k] += d * d;
        }
    }
    let var: Vec<f64> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q - s * s / n) / (n - 1.0)).max(0.0))
        .collect();
    let mut positive: Vec<f64> = var.iter().cloned().filter(|&v| v > 0.0).collect();
    let floor = if positive.is_empty() {
        NORMALIZER_FLOOR
    } else {
        positive.sort_by(f64::total_cmp);
        NORMALIZER_FLOOR * positive[positive.len() / 2]
    };
    var.iter().map(|&v| v.max(floor)).collect()
}

struct SnippetStats {
    scat: Vec<ScatteringCoeffs>,
    flat: Vec<Vec<f64>>,
}

fn snippet_stats(snippets: &[Vec<f64>], bank: &FilterBank, workers: usize) -> Result<SnippetStats> {
    let scat: Vec<ScatteringCoeffs> = workers::map(snippets, workers, |_, s| compute_scattering(s, bank))
        .into_iter()
        .collect::<Result<_>>()?;
    let flat = scat
        .iter()
        .map(|s| scatcov_pair(s, s, 0..bank.len()).flat_real())
        .collect();
    Ok(SnippetStats { scat, flat })
}

fn cross_tiled(snip: &ScatteringCoeffs, x_tiles: &[ScatteringCoeffs], len: usize) -> Vec<f64> {
    let per: Vec<Vec<f64>> = x_tiles
        .iter()
        .map(|xt| scatcov_pair(snip, xt, 0..len).flat_real())
        .collect();
    mean_vectors(&per)
}

fn data_tiled(x: &[f64], snippet: &[f64], bank: &FilterBank) -> Result<Vec<f64>> {
    let shifted: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(k, v)| v + snippet[k % snippet.len()])
        .collect();
    tiled_scatcov(&shifted, bank)
}

/// Empirical per-coefficient variances of `Psi(s_i)`, `Psi~(x + s_i)` and
/// `Psi~(s_i, x)` across snippets, each floored at `1e-12` times its median
/// positive entry.
pub fn precompute_normalizers(
    x: &[f64],
    snippets: &[Vec<f64>],
    bank: &FilterBank,
    window: usize,
) -> Result<Normalizers> {
    check_shapes(x, snippets, bank, window)?;
    if snippets.len() < 2 {
        return Err(Error::Config(format!(
            "normalizers need at least 2 snippets, got {}",
            snippets.len()
        )));
    }
    let w = workers::worker_count();
    let stats = snippet_stats(snippets, bank, w)?;
    normalizers_from(x, snippets, bank, &stats, w)
}

fn normalizers_from(
    x: &[f64],
    snippets: &[Vec<f64>],
    bank: &FilterBank,
    stats: &SnippetStats,
    w: usize,
) -> Result<Normalizers> {
    let x_tiles: Vec<ScatteringCoeffs> = tiles(x, bank.len())
        .map(|t| compute_scattering(t, bank))
        .collect::<Result<_>>()?;
    let data: Vec<Vec<f64>> = workers::map(snippets, w, |_, s| data_tiled(x, s, bank))
        .into_iter()
        .collect::<Result<_>>()?;
    let cross: Vec<Vec<f64>> = workers::map(&stats.scat, w, |_, s| cross_tiled(s, &x_tiles, bank.len()));
    Ok(Normalizers {
        prior: variance_floored(&stats.flat),
        data: variance_floored(&data),
        cross: variance_floored(&cross),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub prior: f64,
    pub cross: f64,
    pub data: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub terms: LossTerms,
    pub grad: Vec<f64>,
    /// Gradients of the prior, cross and data terms, when requested.
    pub term_grads: Option<[Vec<f64>; 3]>,
}

/// A mixture, its prior snippets and the constants of the objective.
pub struct SeparationProblem {
    pub x: Vec<f64>,
    pub snippets: Vec<Vec<f64>>,
    pub window: usize,
    pub normalizers: Normalizers,
    bank: Arc<FilterBank>,
    graph: BankGraph,
    stats: SnippetStats,
    x_bar: Vec<f64>,
    workers: usize,
}

impl SeparationProblem {
    pub fn new(x: &[f64], snippets: &[Vec<f64>], bank: Arc<FilterBank>, window: usize) -> Result<Self> {
        check_shapes(x, snippets, &bank, window)?;
        if snippets.len() < 2 {
            return Err(Error::Config(format!(
                "normalizers need at least 2 snippets, got {}",
                snippets.len()
            )));
        }
        let w = workers::worker_count();
        let stats = snippet_stats(snippets, &bank, w)?;
        let normalizers = normalizers_from(x, snippets, &bank, &stats, w)?;
        Self::assemble(x, snippets, bank, window, normalizers, stats, w)
    }

    /// Problem with given normalizers, e.g. for a single snippet.
    pub fn with_normalizers(
        x: &[f64],
        snippets: &[Vec<f64>],
        bank: Arc<FilterBank>,
        window: usize,
        normalizers: Normalizers,
    ) -> Result<Self> {
        check_shapes(x, snippets, &bank, window)?;
        let w = workers::worker_count();
        let stats = snippet_stats(snippets, &bank, w)?;
        Self::assemble(x, snippets, bank, window, normalizers, stats, w)
    }

    fn assemble(
        x: &[f64],
        snippets: &[Vec<f64>],
        bank: Arc<FilterBank>,
        window: usize,
        normalizers: Normalizers,
        stats: SnippetStats,
        workers: usize,
    ) -> Result<Self> {
        let graph = BankGraph::new(&bank);
        let f = graph.flat_len();
        for (name, v) in [
            ("prior", &normalizers.prior),
            ("data", &normalizers.data),
            ("cross", &normalizers.cross),
        ] {
            if v.len() != f || v.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} normalizer must hold {f} positive finite entries"
                )));
            }
        }
        let x_bar = tiled_scatcov(x, &bank)?;
        Ok(SeparationProblem {
            x: x.to_vec(),
            snippets: snippets.to_vec(),
            window,
            normalizers,
            bank,
            graph,
            stats,
            x_bar,
            workers,
        })
    }

    pub fn n_tiles(&self) -> usize {
        self.x.len() / self.window
    }

    pub fn bank(&self) -> &FilterBank {
        &self.bank
    }

    pub fn set_workers(&mut self, workers: usize) {
        self.workers = workers.max(1);
    }

    /// The three loss terms from the plain (non-differentiated) statistics.
    pub fn loss_terms(&self, s1: &[f64]) -> Result<LossTerms> {
        self.check_candidate(s1)?;
        let bank = &self.bank;
        let w = self.window;
        let weighted = |d: &mut dyn Iterator<Item = f64>, norm: &[f64]| -> f64 {
            d.zip(norm).map(|(e, s)| e * e * (1.0 / s)).sum()
        };
        let s1_tiles: Vec<Vec<f64>> = tiles(s1, w)
            .map(|t| Ok(scatcov_pair(&compute_scattering(t, bank)?, &compute_scattering(t, bank)?, 0..w).flat_real()))
            .collect::<Result<_>>()?;
        let residual: Vec<f64> = self.x.iter().zip(s1).map(|(a, b)| a - b).collect();
        let r_tiles: Vec<ScatteringCoeffs> = tiles(&residual, w)
            .map(|t| compute_scattering(t, bank))
            .collect::<Result<_>>()?;
        let mut prior = 0.0;
        let mut cross = 0.0;
        let mut data = 0.0;
        for (i, snip) in self.stats.flat.iter().enumerate() {
            let mut p = 0.0;
            for v in &s1_tiles {
                p += weighted(&mut v.iter().zip(snip).map(|(a, b)| a - b), &self.normalizers.prior);
            }
            prior += p / s1_tiles.len() as f64;
            let c = cross_tiled(&self.stats.scat[i], &r_tiles, w);
            cross += weighted(&mut c.into_iter(), &self.normalizers.cross);
            let d = data_tiled(&residual, &self.snippets[i], bank)?;
            data += weighted(
                &mut d.iter().zip(&self.x_bar).map(|(a, b)| a - b),
                &self.normalizers.data,
            );
        }
        Ok(LossTerms {
            prior,
            cross,
            data,
            total: prior + cross + data,
        })
    }

    fn check_candidate(&self, s1: &[f64]) -> Result<()> {
        if s1.len() != self.x.len() {
            return Err(Error::Shape(format!(
                "candidate has {} samples, mixture has {}",
                s1.len(),
                self.x.len()
            )));
        }
        Ok(())
    }

    pub fn evaluator(&self) -> LossEvaluator<'_> {
        LossEvaluator::new(self)
    }
}

struct PriorCrossGraph {
    tape: Tape,
    s1: Var,
    prior: Var,
    cross: Var,
    total: Var,
}

struct DataGraph {
    tape: Tape,
    s1: Var,
    data: Var,
}

enum Graph {
    PriorCross(PriorCrossGraph),
    Data(DataGraph),
}

/// Replayable tapes for the objective of one problem.
pub struct LossEvaluator<'a> {
    problem: &'a SeparationProblem,
    graphs: Vec<Graph>,
}

fn weighted_sq(tape: &mut Tape, diff: Var, inv: &[f64]) -> Var {
    let sq = tape.square(diff);
    let w = tape.constant(1, inv.len(), inv.to_vec());
    let m = tape.mul(sq, w);
    tape.sum(m)
}

fn inverse(v: &[f64]) -> Vec<f64> {
    v.iter().map(|s| 1.0 / s).collect()
}

impl<'a> LossEvaluator<'a> {
    pub fn new(problem: &'a SeparationProblem) -> Self {
        let mut graphs = vec![Graph::PriorCross(Self::build_prior_cross(problem))];
        for i in 0..problem.snippets.len() {
            graphs.push(Graph::Data(Self::build_data(problem, i)));
        }
        LossEvaluator { problem, graphs }
    }

    fn build_prior_cross(p: &SeparationProblem) -> PriorCrossGraph {
        let g = &p.graph;
        let (w, n_tiles, f) = (p.window, p.n_tiles(), g.flat_len());
        let n = p.snippets.len();
        let mut t = Tape::new();
        let s1 = t.leaf("s1", 1, p.x.len());
        let snip_flat: Vec<f64> = p.stats.flat.iter().flatten().cloned().collect();
        let snip_mat = t.constant(n, f, snip_flat);
        let snip_scat: Vec<_> = p
            .stats
            .scat
            .iter()
            .map(|s| scatgraph::constant_scattering(&mut t, g, s))
            .collect();
        let inv_prior = inverse(&p.normalizers.prior);
        let mut prior_parts = Vec::with_capacity(n_tiles);
        let mut cross_acc: Vec<Vec<Var>> = vec![Vec::with_capacity(n_tiles); n];
        for k in 0..n_tiles {
            let st = t.slice_cols(s1, k * w, (k + 1) * w);
            let v = scatgraph::scatcov(&mut t, g, st);
            let row = t.reshape(v, 1, f);
            let d = t.sub(row, snip_mat);
            prior_parts.push(weighted_sq(&mut t, d, &inv_prior));
            let xt = t.constant(1, w, p.x[k * w..(k + 1) * w].to_vec());
            let rt = t.sub(xt, st);
            let sr = scatgraph::scattering(&mut t, g, rt);
            for (i, sc) in snip_scat.iter().enumerate() {
                cross_acc[i].push(scatgraph::scatcov_pair(&mut t, g, sc, &sr));
            }
        }
        let psum = t.concat_rows(&prior_parts);
        let psum = t.sum(psum);
        let prior = t.scale(psum, 1.0 / n_tiles as f64);
        let inv_cross = inverse(&p.normalizers.cross);
        let mut cross_parts = Vec::with_capacity(n);
        for parts in cross_acc {
            let stacked = t.concat_cols(&parts);
            let mean = t.mean_cols(stacked);
            let row = t.reshape(mean, 1, f);
            cross_parts.push(weighted_sq(&mut t, row, &inv_cross));
        }
        let csum = t.concat_rows(&cross_parts);
        let cross = t.sum(csum);
        let total = t.add(prior, cross);
        PriorCrossGraph {
            tape: t,
            s1,
            prior,
            cross,
            total,
        }
    }

    fn build_data(p: &SeparationProblem, i: usize) -> DataGraph {
        let g = &p.graph;
        let (w, n_tiles, f) = (p.window, p.n_tiles(), g.flat_len());
        let mut t = Tape::new();
        let s1 = t.leaf("s1", 1, p.x.len());
        let snip_l1 = t.constant(g.octaves + 1, 2 * w, interleave_rows(&p.stats.scat[i].layer1));
        let mut per_tile = Vec::with_capacity(n_tiles);
        for k in 0..n_tiles {
            let st = t.slice_cols(s1, k * w, (k + 1) * w);
            let xt = t.constant(1, w, p.x[k * w..(k + 1) * w].to_vec());
            let rt = t.sub(xt, st);
            // the first layer is linear: W(r + s) = W r + W s
            let l1 = scatgraph::first_layer(&mut t, g, rt);
            let shifted = t.add(l1, snip_l1);
            let sc = scatgraph::from_first_layer(&mut t, g, shifted);
            per_tile.push(scatgraph::scatcov_pair(&mut t, g, &sc, &sc));
        }
        let stacked = t.concat_cols(&per_tile);
        let mean = t.mean_cols(stacked);
        let row = t.reshape(mean, 1, f);
        let target = t.constant(1, f, p.x_bar.clone());
        let d = t.sub(row, target);
        let data = weighted_sq(&mut t, d, &inverse(&p.normalizers.data));
        DataGraph { tape: t, s1, data }
    }

    /// Loss terms and gradient with respect to `s1`.
    pub fn eval(&mut self, s1: &[f64], per_term: bool) -> Result<LossEval> {
        self.problem.check_candidate(s1)?;
        let len = s1.len();
        let outs: Vec<Result<(f64, f64, f64, Vec<Vec<f64>>)>> =
            workers::map_mut(&mut self.graphs, self.problem.workers, |_, g| {
                let r = match g {
                    Graph::PriorCross(pc) => {
                        pc.tape.forward(&[(pc.s1, s1)])?;
                        let prior = pc.tape.scalar_value(pc.prior)?;
                        let cross = pc.tape.scalar_value(pc.cross)?;
                        let grads = if per_term {
                            vec![
                                pc.tape.backward(pc.prior)?.grads.remove(0),
                                pc.tape.backward(pc.cross)?.grads.remove(0),
                            ]
                        } else {
                            vec![pc.tape.backward(pc.total)?.grads.remove(0)]
                        };
                        pc.tape.release();
                        (prior, cross, 0.0, grads)
                    }
                    Graph::Data(dg) => {
                        dg.tape.forward(&[(dg.s1, s1)])?;
                        let data = dg.tape.scalar_value(dg.data)?;
                        let grads = vec![dg.tape.backward(dg.data)?.grads.remove(0)];
                        dg.tape.release();
                        (0.0, 0.0, data, grads)
                    }
                };
                Ok(r)
            });
        let mut terms = LossTerms {
            prior: 0.0,
            cross: 0.0,
            data: 0.0,
            total: 0.0,
        };
        let mut gp = vec![0.0; len];
        let mut gc = vec![0.0; len];
        let mut gd = vec![0.0; len];
        let add = |acc: &mut [f64], g: &[f64]| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        for (k, out) in outs.into_iter().enumerate() {
            let (p, c, d, grads) = out?;
            if k == 0 {
                terms.prior = p;
                terms.cross = c;
                if per_term {
                    add(&mut gp, &grads[0]);
                    add(&mut gc, &grads[1]);
                } else {
                    add(&mut gp, &grads[0]);
                }
            } else {
                terms.data += d;
                add(&mut gd, &grads[0]);
            }
        }
        terms.total = terms.prior + terms.cross + terms.data;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "separation loss is not finite: prior {}, cross {}, data {}",
                terms.prior, terms.cross, terms.data
            )));
        }
        let grad: Vec<f64> = (0..len).map(|k| gp[k] + gc[k] + gd[k]).collect();
        if let Some(k) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("separation gradient at sample {k}")));
        }
        Ok(LossEval {
            terms,
            grad,
            term_grads: per_term.then_some([gp, gc, gd]),
        })
    }
}

/// Value and gradient of the objective at `s1`.
pub fn total_loss(s1: &[f64], problem: &SeparationProblem) -> Result<LossEval> {
    problem.evaluator().eval(s1, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    pub lbfgs: LbfgsConfig,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        SeparationConfig {
            lbfgs: LbfgsConfig {
                grad_tol: 1e-9,
                ..LbfgsConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub s1_hat: Vec<f64>,
    pub residual: Vec<f64>,
    pub trajectory: Vec<StepRecord>,
    pub initial: LossTerms,
    pub final_terms: LossTerms,
    pub iterations: usize,
    pub termination: Termination,
    /// `|x - s1| / |x|` after each accepted step.
    pub residual_history: Vec<f64>,
}

/// Minimizes the objective with L-BFGS from `s1 = x`.
pub fn separate_problem(problem: &SeparationProblem, cfg: &SeparationConfig) -> Result<SeparationResult> {
    let mut ev = problem.evaluator();
    let x = &problem.x;
    let xn = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let initial = ev.eval(x, false)?.terms;
    let mut history = Vec::new();
    let result = lbfgs_minimize_observed(
        |s| {
            let e = ev.eval(s, false)?;
            Ok((e.terms.total, e.grad))
        },
        x,
        &cfg.lbfgs,
        |_, s| {
            let r = x.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            history.push(r / xn);
        },
    )?;
    let final_terms = problem.loss_terms(&result.x)?;
    let residual = x.iter().zip(&result.x).map(|(a, b)| a - b).collect();
    Ok(SeparationResult {
        s1_hat: result.x,
        residual,
        trajectory: result.trajectory,
        initial,
        final_terms,
        iterations: result.iterations,
        termination: result.termination,
        residual_history: history,
    })
}

pub fn separate(
    x: &[f64],
    snippets: &[Vec<f64>],
    bank: Arc<FilterBank>,
    window: usize,
    cfg: &SeparationConfig,
) -> Result<SeparationResult> {
    let problem = SeparationProblem::new(x, snippets, bank, window)?;
    separate_problem(&problem, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultHeader {
    pub schema_version: u32,
    pub window: usize,
    pub octaves: usize,
    pub snippet_ids: Vec<String>,
    pub config: SeparationConfig,
    pub initial: LossTerms,
    pub final_terms: LossTerms,
    pub iterations: usize,
    pub termination: Termination,
    pub trajectory: Vec<StepRecord>,
    pub len: usize,
}

/// Writes `result.json` plus float32 `s1_hat.f32` and `residual.f32`.
pub fn write_result(
    dir: &Path,
    result: &SeparationResult,
    window: usize,
    octaves: usize,
    snippet_ids: Vec<String>,
    cfg: &SeparationConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    storage::write_f32(&dir.join("s1_hat.f32"), &result.s1_hat)?;
    storage::write_f32(&dir.join("residual.f32"), &result.residual)?;
    storage::write_json(
        &dir.join("result.json"),
        &ResultHeader {
            schema_version: storage::SCHEMA_VERSION,
            window,
            octaves,
            snippet_ids,
            config: *cfg,
            initial: result.initial,
            final_terms: result.final_terms,
            iterations: result.iterations,
            termination: result.termination,
            trajectory: result.trajectory.clone(),
            len: result.s1_hat.len(),
        },
    )
}

pub fn read_result(dir: &Path) -> Result<(ResultHeader, Vec<f64>, Vec<f64>)> {
    let header: ResultHeader = storage::read_json(&dir.join("result.json"))?;
    storage::check_schema(header.schema_version)?;
    let s1 = storage::read_f32(&dir.join("s1_hat.f32"))?;
    let residual = storage::read_f32(&dir.join("residual.f32"))?;
    if s1.len() != header.len || residual.len() != header.len {
        return Err(Error::Format("separation arrays disagree with the header length".into()));
    }
    Ok((header, s1, residual))
}


/// Finite-difference check of `total_loss` on a small noisy mixture with a
/// sinusoidal burst: 20 random samples, central differences with h = 1e-4.
pub fn toy_loss_gradcheck(seed: u64) -> Result<GradCheck> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};
    let noise = |n: usize, s: u64| -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let w = 128;
    let mut x = noise(2 * w, seed);
    for (k, v) in x.iter_mut().enumerate().skip(40).take(30) {
        *v += 3.0 * (k as f64 * 0.7).sin();
    }
    let snippets: Vec<Vec<f64>> = (0..4).map(|i| noise(w, seed + 10 + i)).collect();
    let bank = Arc::new(FilterBank::new(4, w, crate::filterbank::Family::default())?);
    let p = SeparationProblem::new(&x, &snippets, bank, w)?;
    let s1: Vec<f64> = x.iter().map(|v| 0.8 * v).collect();
    let e = total_loss(&s1, &p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let h = 1e-4;
    let mut out = GradCheck { max_rel_error: 0.0, coords_checked: 0, worst: None };
    for k in rand::seq::index::sample(&mut rng, s1.len(), 20) {
        let mut a = s1.clone();
        a[k] += h;
        let mut b = s1.clone();
        b[k] -= h;
        let fd = (p.loss_terms(&a)?.total - p.loss_terms(&b)?.total) / (2.0 * h);
        let r = crate::diffcore::rel_error(e.grad[k], fd);
        out.coords_checked += 1;
        if r >= out.max_rel_error {
            out.max_rel_error = r;
            out.worst = Some((0, k, e.grad[k], fd));
        }
    }
    Ok(out)
}
