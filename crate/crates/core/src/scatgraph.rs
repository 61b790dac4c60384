//! Scattering covariance recorded on a differentiation tape.
//!
//! Mirrors [`crate::scatcov::scatcov_pair`] over a whole bank-length signal
//! with the same arithmetic, so forward values agree with the plain
//! implementation and gradients flow back to the time-domain input.

use std::sync::Arc;

use crate::diffcore::{Tape, Var};
use crate::filterbank::FilterBank;
use crate::scatcov::{pair_index, Layout, ScatteringCoeffs, NORMALIZER_EPS};
use crate::spectral;

/// Filter spectra and index tables shared by every graph built for one bank.
#[derive(Debug, Clone)]
pub struct BankGraph {
    pub octaves: usize,
    pub len: usize,
    pub layout: Layout,
    /// `(J + 1) x 2L` interleaved filter spectra with zero imaginary part.
    filters: Arc<Vec<f64>>,
    /// Filters `j1 + 1 ..= J` for each envelope channel `j1`.
    tails: Vec<Arc<Vec<f64>>>,
    diag: Arc<Vec<(usize, usize)>>,
    psi3_pairs: Arc<Vec<(usize, usize)>>,
    psi3_j: Arc<Vec<usize>>,
    psi3_jp: Arc<Vec<usize>>,
    psi4_pairs: Arc<Vec<(usize, usize)>>,
    psi4_j1: Arc<Vec<usize>>,
    psi4_j1p: Arc<Vec<usize>>,
    psi4_offdiag: Arc<Vec<usize>>,
}

impl BankGraph {
    pub fn new(bank: &FilterBank) -> Self {
        let octaves = bank.octaves();
        let len = bank.len();
        let layout = Layout::new(octaves);
        let mut filters = Vec::with_capacity((octaves + 1) * 2 * len);
        for c in 0..=octaves {
            for &h in bank.channel(c) {
                filters.push(h);
                filters.push(0.0);
            }
        }
        let row = 2 * len;
        let tails = (0..octaves)
            .map(|j1| Arc::new(filters[(j1 + 1) * row..].to_vec()))
            .collect();
        let psi3_pairs = layout
            .psi3
            .iter()
            .map(|&(j, jp)| (j, pair_index(octaves, jp, j)))
            .collect();
        let psi4_pairs = layout
            .psi4
            .iter()
            .map(|&(j1, j1p, j2)| (pair_index(octaves, j1, j2), pair_index(octaves, j1p, j2)))
            .collect();
        let psi4_offdiag = layout
            .psi4
            .iter()
            .enumerate()
            .filter(|(_, (a, b, _))| a != b)
            .map(|(i, _)| i)
            .collect();
        BankGraph {
            octaves,
            len,
            diag: Arc::new((0..=octaves).map(|j| (j, j)).collect()),
            psi3_j: Arc::new(layout.psi3.iter().map(|p| p.0).collect()),
            psi3_jp: Arc::new(layout.psi3.iter().map(|p| p.1).collect()),
            psi4_j1: Arc::new(layout.psi4.iter().map(|p| p.0).collect()),
            psi4_j1p: Arc::new(layout.psi4.iter().map(|p| p.1).collect()),
            psi3_pairs: Arc::new(psi3_pairs),
            psi4_pairs: Arc::new(psi4_pairs),
            psi4_offdiag: Arc::new(psi4_offdiag),
            filters: Arc::new(filters),
            tails,
            layout,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.layout.flat_len()
    }
}

/// Scattering network outputs as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GraphScattering {
    /// `(J + 1) x 2L` first-layer coefficients.
    pub layer1: Var,
    /// `J x L` envelopes `|x * psi_j|` of the band-pass channels.
    pub envelope: Var,
    /// Layer-2 coefficients in [`pair_index`] order, interleaved.
    pub layer2: Var,
}

/// First wavelet layer of a `1 x L` real signal node.
pub fn first_layer(tape: &mut Tape, g: &BankGraph, x: Var) -> Var {
    let c = tape.to_complex(x);
    let spec = tape.fft(c);
    let filters = tape.constant_shared(g.octaves + 1, 2 * g.len, g.filters.clone());
    let prod = tape.cmul(spec, filters);
    tape.ifft(prod)
}

/// Second layer from given first-layer coefficients.
pub fn from_first_layer(tape: &mut Tape, g: &BankGraph, layer1: Var) -> GraphScattering {
    let j = g.octaves;
    let bands = tape.slice_rows(layer1, 0, j);
    let envelope = tape.modulus(bands);
    let ec = tape.to_complex(envelope);
    let env_hat = tape.fft(ec);
    let mut rows = Vec::with_capacity(j);
    for j1 in 0..j {
        let e = tape.slice_rows(env_hat, j1, j1 + 1);
        let f = tape.constant_shared(j - j1, 2 * g.len, g.tails[j1].clone());
        let p = tape.cmul(e, f);
        rows.push(tape.ifft(p));
    }
    let layer2 = tape.concat_rows(&rows);
    GraphScattering {
        layer1,
        envelope,
        layer2,
    }
}

pub fn scattering(tape: &mut Tape, g: &BankGraph, x: Var) -> GraphScattering {
    let l1 = first_layer(tape, g, x);
    from_first_layer(tape, g, l1)
}

/// Plain scattering outputs entered as constants.
pub fn constant_scattering(tape: &mut Tape, g: &BankGraph, s: &ScatteringCoeffs) -> GraphScattering {
    let layer1 = tape.constant(g.octaves + 1, 2 * g.len, interleave_rows(&s.layer1));
    let env: Vec<f64> = s.layer1[..g.octaves]
        .iter()
        .flat_map(|row| row.iter().map(|z| z.norm()))
        .collect();
    let envelope = tape.constant(g.octaves, g.len, env);
    let layer2 = tape.constant(s.layer2.len(), 2 * g.len, interleave_rows(&s.layer2));
    GraphScattering {
        layer1,
        envelope,
        layer2,
    }
}

pub fn interleave_rows(rows: &[Vec<rustfft::num_complex::Complex64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.iter().map(|r| 2 * r.len()).sum());
    for r in rows {
        spectral::interleave_into(r, &mut out);
    }
    out
}

/// `p` where `p >= eps`, else `1`, together with the `0/1` mask.
fn guarded(tape: &mut Tape, p: Var) -> (Var, Var) {
    let mask = tape.step(p, NORMALIZER_EPS);
    let neg = tape.neg(mask);
    let inv = tape.offset(neg, 1.0);
    let kept = tape.mul(p, mask);
    (tape.add(kept, inv), mask)
}

/// Flat real scattering (cross-)covariance as a `flat_len x 1` column, in
/// the layout of [`crate::scatcov::ScatCovVector::flat_real`].
pub fn scatcov_pair(tape: &mut Tape, g: &BankGraph, sx: &GraphScattering, sy: &GraphScattering) -> Var {
    let j = g.octaves;
    let same = sx.layer1 == sy.layer1;
    let powx = tape.cov_pairs(sx.layer1, sx.layer1, g.diag.clone(), false);
    let px = tape.slice_cols(powx, 0, 1);
    let py = if same {
        px
    } else {
        let powy = tape.cov_pairs(sy.layer1, sy.layer1, g.diag.clone(), false);
        tape.slice_cols(powy, 0, 1)
    };
    let cross = if same {
        px
    } else {
        let c = tape.cov_pairs(sx.layer1, sy.layer1, g.diag.clone(), false);
        tape.slice_cols(c, 0, 1)
    };
    let (px_safe, mx) = guarded(tape, px);
    let (py_safe, my) = if same { (px_safe, mx) } else { guarded(tape, py) };

    // sparsity
    let band = |tape: &mut Tape, v: Var| tape.slice_rows(v, 0, j);
    let (pxb, pyb, mxb, myb, cb) = (
        band(tape, px_safe),
        band(tape, py_safe),
        band(tape, mx),
        band(tape, my),
        band(tape, cross),
    );
    let pp = tape.mul(pxb, pyb);
    let norm = tape.sqrt(pp);
    let ax = tape.mean_cols(sx.envelope);
    let ay = if same { ax } else { tape.mean_cols(sy.envelope) };
    let axy = tape.mul(ax, ay);
    let left = tape.div(axy, norm);
    let right = tape.div(cb, norm);
    let raw1 = tape.mul(left, right);
    let m1 = tape.mul(mxb, myb);
    let psi1 = tape.mul(raw1, m1);

    let normalized = |tape: &mut Tape, cov: Var, ix: &Arc<Vec<usize>>, iy: &Arc<Vec<usize>>| {
        let a = tape.gather_rows(px_safe, ix.clone());
        let b = tape.gather_rows(py_safe, iy.clone());
        let ab = tape.mul(a, b);
        let n = tape.sqrt(ab);
        let q = tape.div(cov, n);
        let ma = tape.gather_rows(mx, ix.clone());
        let mb = tape.gather_rows(my, iy.clone());
        let m = tape.mul(ma, mb);
        tape.mul(q, m)
    };
    let c3 = tape.cov_pairs(sx.layer1, sy.layer2, g.psi3_pairs.clone(), true);
    let psi3 = normalized(tape, c3, &g.psi3_j, &g.psi3_jp);
    let c4 = tape.cov_pairs(sx.layer2, sy.layer2, g.psi4_pairs.clone(), true);
    let psi4 = normalized(tape, c4, &g.psi4_j1, &g.psi4_j1p);

    let re3 = tape.slice_cols(psi3, 0, 1);
    let im3 = tape.slice_cols(psi3, 1, 2);
    let re4 = tape.slice_cols(psi4, 0, 1);
    let im4_all = tape.slice_cols(psi4, 1, 2);
    let mut parts = vec![psi1, cross, re3, im3, re4];
    if !g.psi4_offdiag.is_empty() {
        parts.push(tape.gather_rows(im4_all, g.psi4_offdiag.clone()));
    }
    tape.concat_rows(&parts)
}

/// Single-signal flat scattering covariance of a `1 x L` node.
pub fn scatcov(tape: &mut Tape, g: &BankGraph, x: Var) -> Var {
    let s = scattering(tape, g, x);
    scatcov_pair(tape, g, &s, &s)
}
