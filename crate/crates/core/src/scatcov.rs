//! Two-layer scattering network and its diagonal scattering covariance.
//!
//! Channel indices are 0-based: `0..J` are the band-pass octaves (finest
//! first) and `J` is the low-pass. Coefficient blocks:
//!
//! * `psi1[j]`, `j < J`: sparsity `(Ave|x*psi_j|)^2 / Ave|x*psi_j|^2`;
//! * `psi2[j]`, `j <= J`: wavelet power spectrum `Ave|x*psi_j|^2`;
//! * `psi3[(j, j')]`, `j' < j <= J`: `Ave(x*psi_j . conj(|x*psi_j'|*psi_j))`,
//!   normalized by `sqrt(psi2[j] psi2[j'])`;
//! * `psi4[(j1, j1', j2)]`, `j1' <= j1 < j2 <= J`:
//!   `Ave(|x*psi_j1|*psi_j2 . conj(|x*psi_j1'|*psi_j2))`, normalized by
//!   `sqrt(psi2[j1] psi2[j1'])`.
//!
//! Products entering `psi3` and `psi4` are centered within the averaging
//! window. Band-pass channels have exactly zero DC so this only matters for
//! the low-pass channel, where it turns a squared mean into a covariance.
//!
//! The flat real layout concatenates `psi1, psi2, Re psi3, Im psi3, Re psi4,
//! Im psi4[j1' < j1]` with blocks in lexicographic index order. Diagonal
//! `psi4[(j1, j1, j2)]` entries are real and contribute no imaginary slot.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filterbank::{Family, FilterBank};
use crate::spectral;

/// Normalizers below this value zero the coefficients they would divide.
pub const NORMALIZER_EPS: f64 = 1e-24;

/// Version of the flat coefficient ordering written to feature stores and
/// checkpoints.
pub const ORDERING_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ScatteringCoeffs {
    pub octaves: usize,
    pub len: usize,
    /// `x * psi_j` for the `J + 1` channels.
    pub layer1: Vec<Vec<Complex64>>,
    /// `|x * psi_j1| * psi_j2` for `j1 < j2`, indexed by [`pair_index`].
    pub layer2: Vec<Vec<Complex64>>,
}

impl ScatteringCoeffs {
    pub fn layer2(&self, j1: usize, j2: usize) -> Option<&[Complex64]> {
        if j1 < j2 && j2 <= self.octaves {
            Some(&self.layer2[pair_index(self.octaves, j1, j2)])
        } else {
            None
        }
    }
}

/// Index of the layer-2 pair `(j1, j2)`, `j1 < j2 <= J`, in row-major order.
pub fn pair_index(octaves: usize, j1: usize, j2: usize) -> usize {
    debug_assert!(j1 < j2 && j2 <= octaves);
    // row r holds J - r entries
    j1 * octaves - j1 * j1.saturating_sub(1) / 2 + (j2 - j1 - 1)
}

/// Coefficient index bookkeeping for one octave count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub octaves: usize,
    /// `(j, j')` with `j' < j <= J`, ordered by `j` then `j'`.
    pub psi3: Vec<(usize, usize)>,
    /// `(j1, j1', j2)` with `j1' <= j1 < j2 <= J`, lexicographic.
    pub psi4: Vec<(usize, usize, usize)>,
}

impl Layout {
    pub fn new(octaves: usize) -> Self {
        let mut psi3 = Vec::new();
        for j in 1..=octaves {
            for jp in 0..j {
                psi3.push((j, jp));
            }
        }
        let mut psi4 = Vec::new();
        for j1 in 0..octaves {
            for j1p in 0..=j1 {
                for j2 in j1 + 1..=octaves {
                    psi4.push((j1, j1p, j2));
                }
            }
        }
        Layout {
            octaves,
            psi3,
            psi4,
        }
    }

    pub fn n_psi1(&self) -> usize {
        self.octaves
    }

    pub fn n_psi2(&self) -> usize {
        self.octaves + 1
    }

    pub fn n_psi4_offdiag(&self) -> usize {
        self.psi4.iter().filter(|(a, b, _)| a != b).count()
    }

    pub fn flat_len(&self) -> usize {
        self.n_psi1() + self.n_psi2() + 2 * self.psi3.len() + self.psi4.len() + self.n_psi4_offdiag()
    }

    /// Number of complex-valued coefficients before the real/imaginary split.
    pub fn n_complex_total(&self) -> usize {
        self.n_psi1() + self.n_psi2() + self.psi3.len() + self.psi4.len()
    }

    /// Human-readable label for every flat slot, 1-based scale indices.
    pub fn labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.flat_len());
        for j in 0..self.n_psi1() {
            out.push(format!("psi1[{}]", j + 1));
        }
        for j in 0..self.n_psi2() {
            out.push(format!("psi2[{}]", j + 1));
        }
        for part in ["re", "im"] {
            for &(j, jp) in &self.psi3 {
                out.push(format!("{part} psi3[{},{}]", j + 1, jp + 1));
            }
        }
        for &(a, b, c) in &self.psi4 {
            out.push(format!("re psi4[{},{},{}]", a + 1, b + 1, c + 1));
        }
        for &(a, b, c) in self.psi4.iter().filter(|(a, b, _)| a != b) {
            out.push(format!("im psi4[{},{},{}]", a + 1, b + 1, c + 1));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatCovVector {
    pub octaves: usize,
    pub psi1: Vec<f64>,
    pub psi2: Vec<f64>,
    pub psi3: Vec<Complex64>,
    pub psi4: Vec<Complex64>,
}

impl ScatCovVector {
    pub fn layout(&self) -> Layout {
        Layout::new(self.octaves)
    }

    pub fn flat_real(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(layout.flat_len());
        out.extend_from_slice(&self.psi1);
        out.extend_from_slice(&self.psi2);
        out.extend(self.psi3.iter().map(|z| z.re));
        out.extend(self.psi3.iter().map(|z| z.im));
        out.extend(self.psi4.iter().map(|z| z.re));
        for (z, (a, b, _)) in self.psi4.iter().zip(&layout.psi4) {
            if a != b {
                out.push(z.im);
            }
        }
        out
    }

    pub fn from_flat(octaves: usize, flat: &[f64]) -> Result<Self> {
        let layout = Layout::new(octaves);
        if flat.len() != layout.flat_len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, J = {octaves} needs {}",
                flat.len(),
                layout.flat_len()
            )));
        }
        let (n1, n2, n3, n4) = (
            layout.n_psi1(),
            layout.n_psi2(),
            layout.psi3.len(),
            layout.psi4.len(),
        );
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s
        };
        let psi1 = take(n1).to_vec();
        let psi2 = take(n2).to_vec();
        let re3 = take(n3).to_vec();
        let im3 = take(n3);
        let psi3 = re3
            .iter()
            .zip(im3)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
        let re4 = take(n4).to_vec();
        let mut im4 = take(layout.n_psi4_offdiag()).iter();
        let psi4 = re4
            .iter()
            .zip(&layout.psi4)
            .map(|(&r, (a, b, _))| {
                let i = if a != b { *im4.next().unwrap() } else { 0.0 };
                Complex64::new(r, i)
            })
            .collect();
        Ok(ScatCovVector {
            octaves,
            psi1,
            psi2,
            psi3,
            psi4,
        })
    }

    /// Element-wise mean of several vectors with the same octave count.
    pub fn mean(vs: &[ScatCovVector]) -> Option<ScatCovVector> {
        let first = vs.first()?;
        let n = vs.len() as f64;
        let mut acc = first.clone();
        for v in &vs[1..] {
            for (a, b) in acc.psi1.iter_mut().zip(&v.psi1) {
                *a += b;
            }
            for (a, b) in acc.psi2.iter_mut().zip(&v.psi2) {
                *a += b;
            }
            for (a, b) in acc.psi3.iter_mut().zip(&v.psi3) {
                *a += b;
            }
            for (a, b) in acc.psi4.iter_mut().zip(&v.psi4) {
                *a += b;
            }
        }
        acc.psi1.iter_mut().for_each(|a| *a /= n);
        acc.psi2.iter_mut().for_each(|a| *a /= n);
        acc.psi3.iter_mut().for_each(|a| *a /= n);
        acc.psi4.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }
}

pub fn compute_scattering(x: &[f64], bank: &FilterBank) -> Result<ScatteringCoeffs> {
    let layer1 = bank.transform(x)?.coeffs;
    let octaves = bank.octaves();
    let mut layer2 = Vec::with_capacity(octaves * (octaves + 1) / 2);
    for (j1, env_src) in layer1.iter().take(octaves).enumerate() {
        let env: Vec<f64> = env_src.iter().map(|z| z.norm()).collect();
        let env_hat = spectral::fft_real(&env);
        for j2 in j1 + 1..=octaves {
            layer2.push(spectral::filter_spectrum(&env_hat, bank.channel(j2)));
        }
    }
    Ok(ScatteringCoeffs {
        octaves,
        len: bank.len(),
        layer1,
        layer2,
    })
}

fn mean_complex(z: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for v in z {
        acc += v;
    }
    acc / z.len() as f64
}

/// `Ave((a - Ave a) conj(b - Ave b))`.
fn centered_cov(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let ma = mean_complex(a);
    let mb = mean_complex(b);
    let mut re = 0.0;
    let mut im = 0.0;
    for (u, v) in a.iter().zip(b) {
        let (ur, ui) = (u.re - ma.re, u.im - ma.im);
        let (vr, vi) = (v.re - mb.re, v.im - mb.im);
        re += ur * vr + ui * vi;
        im += ui * vr - ur * vi;
    }
    let n = a.len() as f64;
    Complex64::new(re / n, im / n)
}

/// `Ave(a conj(b))` without centering.
fn raw_cov(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut re = 0.0;
    let mut im = 0.0;
    for (u, v) in a.iter().zip(b) {
        re += u.re * v.re + u.im * v.im;
        im += u.im * v.re - u.re * v.im;
    }
    let n = a.len() as f64;
    Complex64::new(re / n, im / n)
}

fn mean_modulus(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm()).sum::<f64>() / a.len() as f64
}

fn power(a: &[Complex64]) -> f64 {
    raw_cov(a, a).re
}

/// Scattering (cross-)covariance of two scattering outputs restricted to
/// samples `range`. With `sx` and `sy` the same object this is the
/// single-signal representation.
///
/// The cross sparsity slot is the geometric sparsity of the two channels
/// weighted by their normalized cross power, which reduces to `psi1` when the
/// signals coincide and vanishes in expectation for independent signals.
pub fn scatcov_pair(
    sx: &ScatteringCoeffs,
    sy: &ScatteringCoeffs,
    range: std::ops::Range<usize>,
) -> ScatCovVector {
    let octaves = sx.octaves;
    let layout = Layout::new(octaves);
    let l1x: Vec<&[Complex64]> = sx.layer1.iter().map(|c| &c[range.clone()]).collect();
    let l1y: Vec<&[Complex64]> = sy.layer1.iter().map(|c| &c[range.clone()]).collect();
    let px: Vec<f64> = l1x.iter().map(|c| power(c)).collect();
    let py: Vec<f64> = l1y.iter().map(|c| power(c)).collect();
    let cross: Vec<f64> = l1x.iter().zip(&l1y).map(|(a, b)| raw_cov(a, b).re).collect();
    let ok = |p: f64| p >= NORMALIZER_EPS;

    let psi1 = (0..octaves)
        .map(|j| {
            if !ok(px[j]) || !ok(py[j]) {
                return 0.0;
            }
            let norm = (px[j] * py[j]).sqrt();
            let ax = mean_modulus(l1x[j]);
            let ay = mean_modulus(l1y[j]);
            (ax * ay / norm) * (cross[j] / norm)
        })
        .collect();
    let psi2 = cross.clone();
    let psi3 = layout
        .psi3
        .iter()
        .map(|&(j, jp)| {
            if !ok(px[j]) || !ok(py[jp]) {
                return Complex64::new(0.0, 0.0);
            }
            let l2 = &sy.layer2[pair_index(octaves, jp, j)][range.clone()];
            centered_cov(l1x[j], l2) / (px[j] * py[jp]).sqrt()
        })
        .collect();
    let psi4 = layout
        .psi4
        .iter()
        .map(|&(j1, j1p, j2)| {
            if !ok(px[j1]) || !ok(py[j1p]) {
                return Complex64::new(0.0, 0.0);
            }
            let a = &sx.layer2[pair_index(octaves, j1, j2)][range.clone()];
            let b = &sy.layer2[pair_index(octaves, j1p, j2)][range.clone()];
            centered_cov(a, b) / (px[j1] * py[j1p]).sqrt()
        })
        .collect();
    ScatCovVector {
        octaves,
        psi1,
        psi2,
        psi3,
        psi4,
    }
}

fn check_tiling(len: usize, bank: &FilterBank, window: usize) -> Result<()> {
    if len != bank.len() {
        return Err(Error::Sizing(format!(
            "signal has {len} samples, bank expects {}",
            bank.len()
        )));
    }
    if window == 0 || len % window != 0 {
        return Err(Error::Sizing(format!(
            "window {window} does not divide signal length {len}"
        )));
    }
    if window < (1usize << bank.octaves()) {
        return Err(Error::Sizing(format!(
            "window {window} is shorter than 2^J = {}",
            1usize << bank.octaves()
        )));
    }
    Ok(())
}

/// Scattering covariance of each disjoint `window`-sample tile of `x`.
pub fn compute_scatcov(x: &[f64], bank: &FilterBank, window: usize) -> Result<Vec<ScatCovVector>> {
    check_tiling(x.len(), bank, window)?;
    let s = compute_scattering(x, bank)?;
    Ok((0..x.len() / window)
        .map(|t| scatcov_pair(&s, &s, t * window..(t + 1) * window))
        .collect())
}

/// Scattering cross-covariance `Psi(x, y)` per tile; first-layer factors come
/// from `x`, envelope factors of `psi3` from `y`.
pub fn compute_cross_scatcov(
    x: &[f64],
    y: &[f64],
    bank: &FilterBank,
    window: usize,
) -> Result<Vec<ScatCovVector>> {
    check_tiling(x.len(), bank, window)?;
    if y.len() != x.len() {
        return Err(Error::Sizing(format!(
            "cross covariance needs equal lengths, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let sx = compute_scattering(x, bank)?;
    let sy = compute_scattering(y, bank)?;
    Ok((0..x.len() / window)
        .map(|t| scatcov_pair(&sx, &sy, t * window..(t + 1) * window))
        .collect())
}

/// Whole-signal scattering covariance with a bank sized to the signal.
pub fn scatcov_whole(x: &[f64], bank: &FilterBank) -> Result<ScatCovVector> {
    Ok(compute_scatcov(x, bank, x.len())?.remove(0))
}

/// Filter banks keyed by `(J, length, family)`, built on first use.
#[derive(Debug, Default)]
pub struct BankCache {
    banks: Mutex<HashMap<(usize, usize, Family), Arc<FilterBank>>>,
}

impl BankCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, octaves: usize, len: usize, family: Family) -> Result<Arc<FilterBank>> {
        let mut banks = self.banks.lock().expect("bank cache poisoned");
        if let Some(b) = banks.get(&(octaves, len, family)) {
            return Ok(b.clone());
        }
        let bank = Arc::new(FilterBank::new(octaves, len, family)?);
        banks.insert((octaves, len, family), bank.clone());
        Ok(bank)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidalFeatures {
    pub window_sizes: Vec<usize>,
    /// Flat real scattering covariance per scale, finest first.
    pub u: Vec<Vec<f64>>,
}

pub fn check_pyramid(window_sizes: &[usize]) -> Result<()> {
    if window_sizes.is_empty() {
        return Err(Error::Config("at least one window size is required".into()));
    }
    for w in window_sizes.windows(2) {
        if w[1] != 4 * w[0] {
            return Err(Error::Config(format!(
                "window sizes must grow by a factor of 4, got {} -> {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

/// Pyramidal features of the trailing samples of `x`: scale `k` averages over
/// the last `window_sizes[k]` samples, all windows ending at `x.len()`.
pub fn compute_pyramidal(
    x: &[f64],
    cache: &BankCache,
    octaves: usize,
    family: Family,
    window_sizes: &[usize],
) -> Result<PyramidalFeatures> {
    check_pyramid(window_sizes)?;
    let longest = *window_sizes.last().unwrap();
    if x.len() < longest {
        return Err(Error::Sizing(format!(
            "need {longest} samples of history, have {}",
            x.len()
        )));
    }
    let mut u = Vec::with_capacity(window_sizes.len());
    for &w in window_sizes {
        let bank = cache.get(octaves, w, family)?;
        let tail = &x[x.len() - w..];
        u.push(scatcov_whole(tail, &bank)?.flat_real());
    }
    Ok(PyramidalFeatures {
        window_sizes: window_sizes.to_vec(),
        u,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedRow {
    pub block: &'static str,
    /// `j - j'` for `psi3`; `(j1' - j1, j2 - j1)` for `psi4`.
    pub lag: (i64, i64),
    pub count: usize,
    pub re: f64,
    pub im: f64,
    pub modulus: f64,
}

/// Average `psi3` over constant `j - j'` and `psi4` over constant
/// `(j1' - j1, j2 - j1)` for plotting.
pub fn plot_reduce(v: &ScatCovVector) -> Vec<ReducedRow> {
    let layout = v.layout();
    let mut rows = Vec::new();
    let mut groups3: Vec<(i64, Vec<Complex64>)> = Vec::new();
    for (z, &(j, jp)) in v.psi3.iter().zip(&layout.psi3) {
        let lag = j as i64 - jp as i64;
        match groups3.iter_mut().find(|(l, _)| *l == lag) {
            Some((_, g)) => g.push(*z),
            None => groups3.push((lag, vec![*z])),
        }
    }
    groups3.sort_by_key(|(l, _)| *l);
    for (lag, g) in groups3 {
        let m = mean_complex(&g);
        rows.push(ReducedRow {
            block: "psi3",
            lag: (lag, 0),
            count: g.len(),
            re: m.re,
            im: m.im,
            modulus: m.norm(),
        });
    }
    let mut groups4: Vec<((i64, i64), Vec<Complex64>)> = Vec::new();
    for (z, &(j1, j1p, j2)) in v.psi4.iter().zip(&layout.psi4) {
        let lag = (j1p as i64 - j1 as i64, j2 as i64 - j1 as i64);
        match groups4.iter_mut().find(|(l, _)| *l == lag) {
            Some((_, g)) => g.push(*z),
            None => groups4.push((lag, vec![*z])),
        }
    }
    groups4.sort_by_key(|(l, _)| *l);
    for (lag, g) in groups4 {
        let m = mean_complex(&g);
        rows.push(ReducedRow {
            block: "psi4",
            lag,
            count: g.len(),
            re: m.re,
            im: m.im,
            modulus: m.norm(),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn bank(j: usize, n: usize) -> FilterBank {
        FilterBank::new(j, n, Family::default()).unwrap()
    }

    #[test]
    fn pair_index_enumerates_rows_in_order() {
        for octaves in 1..10 {
            let mut k = 0;
            for j1 in 0..octaves {
                for j2 in j1 + 1..=octaves {
                    assert_eq!(pair_index(octaves, j1, j2), k);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn layer2_count_matches_pair_enumeration() {
        let b = bank(8, 1024);
        let s = compute_scattering(&noise(1024, 1), &b).unwrap();
        let brute = (1..=9usize)
            .flat_map(|j1| (1..=9usize).map(move |j2| (j1, j2)))
            .filter(|(j1, j2)| j1 < j2)
            .count();
        assert_eq!(brute, 36);
        assert_eq!(s.layer2.len(), brute);
        assert!(s.layer2(3, 3).is_none() && s.layer2(4, 2).is_none());
    }

    #[test]
    fn block_sizes_follow_closed_forms() {
        for j in 1..=12usize {
            let l = Layout::new(j);
            assert_eq!(l.n_psi1(), j);
            assert_eq!(l.n_psi2(), j + 1);
            assert_eq!(l.psi3.len(), j * (j + 1) / 2);
            assert_eq!(l.psi4.len(), j * (j + 1) * (j + 2) / 6);
            let diag = l.psi4.len() - l.n_psi4_offdiag();
            assert_eq!(l.flat_len(), j + (j + 1) + 2 * l.psi3.len() + 2 * l.n_psi4_offdiag() + diag);
            assert_eq!(l.labels().len(), l.flat_len());
        }
    }

    #[test]
    fn zero_signal_gives_guarded_zero_vector() {
        let b = bank(4, 256);
        let v = compute_scatcov(&vec![0.0; 256], &b, 64).unwrap();
        assert_eq!(v.len(), 4);
        for t in v {
            assert!(t.flat_real().iter().all(|&c| c == 0.0));
        }
    }

    #[test]
    fn modulus_removes_sign() {
        let b = bank(5, 512);
        let x = noise(512, 2);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let a = compute_scattering(&x, &b).unwrap();
        let c = compute_scattering(&neg, &b).unwrap();
        assert_eq!(a.layer2, c.layer2);
    }

    #[test]
    fn cross_with_itself_is_bitwise_single() {
        let b = bank(5, 1024);
        let x = noise(1024, 3);
        assert_eq!(
            compute_cross_scatcov(&x, &x, &b, 256).unwrap(),
            compute_scatcov(&x, &b, 256).unwrap()
        );
    }

    #[test]
    fn computation_is_deterministic() {
        let b = bank(5, 1024);
        let x = noise(1024, 4);
        let a: Vec<Vec<f64>> = compute_scatcov(&x, &b, 512).unwrap().iter().map(|v| v.flat_real()).collect();
        let c: Vec<Vec<f64>> = compute_scatcov(&x, &b, 512).unwrap().iter().map(|v| v.flat_real()).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn normalized_blocks_are_scale_invariant() {
        let b = bank(5, 1024);
        let x = noise(1024, 5);
        let base = scatcov_whole(&x, &b).unwrap();
        // power-of-two gains propagate exactly through every operation
        let scaled: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        let s = scatcov_whole(&scaled, &b).unwrap();
        assert_eq!(s.psi1, base.psi1);
        assert_eq!(s.psi3, base.psi3);
        assert_eq!(s.psi4, base.psi4);
        for (a, c) in s.psi2.iter().zip(&base.psi2) {
            assert_eq!(*a, 16.0 * c);
        }
        let odd: Vec<f64> = x.iter().map(|v| 3.7 * v).collect();
        let s = scatcov_whole(&odd, &b).unwrap();
        for (a, c) in s.psi3.iter().zip(&base.psi3) {
            assert!((a - c).norm() <= 1e-12 * (1.0 + c.norm()));
        }
        for (a, c) in s.psi2.iter().zip(&base.psi2) {
            assert!((a - 3.7 * 3.7 * c).abs() <= 1e-12 * c.abs());
        }
    }

    #[test]
    fn circular_shift_perturbs_fine_scales_most() {
        let n = 4096;
        let b = bank(6, n);
        let x = noise(n, 6);
        let mut y = x.clone();
        y.rotate_right(1);
        let same = scatcov_whole(&x, &b).unwrap();
        let cross = compute_cross_scatcov(&x, &y, &b, n).unwrap().remove(0);
        for j in 0..6 {
            // one-sample lag rotates octave j by at most 2^{-j} pi radians
            let rel = (cross.psi2[j] - same.psi2[j]).abs() / same.psi2[j];
            let bound = 1.0 - (std::f64::consts::PI / 2f64.powi(j as i32)).cos();
            assert!(rel <= bound + 1e-9, "octave {j}: {rel} > {bound}");
            assert!((cross.psi1[j] - same.psi1[j]).abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn tiles_are_independent_windows() {
        let b = bank(4, 512);
        let x = noise(512, 7);
        let v = compute_scatcov(&x, &b, 128).unwrap();
        assert_eq!(v.len(), 4);
        assert!(matches!(compute_scatcov(&x, &b, 100), Err(Error::Sizing(_))));
        assert!(matches!(compute_scatcov(&x, &b, 8), Err(Error::Sizing(_))));
    }

    #[test]
    fn reduce_has_one_row_per_lag() {
        let v = ScatCovVector::from_flat(8, &vec![1.0; Layout::new(8).flat_len()]).unwrap();
        let rows = plot_reduce(&v);
        let psi3: Vec<_> = rows.iter().filter(|r| r.block == "psi3").collect();
        let lags: Vec<i64> = psi3.iter().map(|r| r.lag.0).collect();
        assert_eq!(lags, (1..=8).collect::<Vec<_>>());
        for r in &rows {
            assert_eq!(r.re, 1.0);
            if r.block == "psi3" {
                assert_eq!(r.im, 1.0);
            }
        }
    }

    #[test]
    fn pyramid_requires_factor_four_and_history() {
        let cache = BankCache::new();
        let x = noise(1024, 8);
        assert!(matches!(
            compute_pyramidal(&x, &cache, 3, Family::default(), &[64, 128]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            compute_pyramidal(&x[..512], &cache, 3, Family::default(), &[64, 256, 1024]),
            Err(Error::Sizing(_))
        ));
        let p = compute_pyramidal(&x, &cache, 3, Family::default(), &[64, 256, 1024]).unwrap();
        assert_eq!(p.u.len(), 3);
        assert!(p.u.iter().all(|u| u.len() == Layout::new(3).flat_len()));
        // finest scale only sees the last 64 samples
        let alone = scatcov_whole(&x[1024 - 64..], &FilterBank::new(3, 64, Family::default()).unwrap()).unwrap();
        assert_eq!(p.u[0], alone.flat_real());
    }

    #[test]
    fn pyramid_of_silence_is_zero() {
        let cache = BankCache::new();
        let p = compute_pyramidal(&vec![0.0; 4096], &cache, 4, Family::default(), &[64, 256, 1024, 4096]).unwrap();
        assert!(p.u.iter().flatten().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sparsity_in_unit_interval_and_power_nonnegative(seed in 0u64..10_000, gain in 0.01f64..100.0) {
            let b = bank(4, 256);
            let x: Vec<f64> = noise(256, seed).iter().map(|v| gain * v * v * v).collect();
            for v in compute_scatcov(&x, &b, 128).unwrap() {
                prop_assert!(v.psi1.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)));
                prop_assert!(v.psi2.iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn flat_layout_round_trips(seed in 0u64..10_000) {
            let b = bank(3, 128);
            let v = scatcov_whole(&noise(128, seed), &b).unwrap();
            let back = ScatCovVector::from_flat(3, &v.flat_real()).unwrap();
            prop_assert_eq!(back, v);
        }
    }
}
