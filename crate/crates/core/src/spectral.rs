//! Thin FFT helpers over `rustfft` with per-thread plan caching.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

struct Plans {
    planner: FftPlanner<f64>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

thread_local! {
    static PLANS: RefCell<Plans> = RefCell::new(Plans {
        planner: FftPlanner::new(),
        forward: HashMap::new(),
        inverse: HashMap::new(),
    });
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let Plans { planner, forward, inverse: inv } = &mut *p;
        let map = if inverse { inv } else { forward };
        map.entry(len)
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(len)
                } else {
                    planner.plan_fft_forward(len)
                }
            })
            .clone()
    })
}

/// Unnormalized forward DFT in place: `X[k] = sum_n x[n] exp(-2 pi i k n / L)`.
pub fn fft_in_place(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        plan(buf.len(), false).process(buf);
    }
}

/// Inverse DFT in place, normalized by `1/L`.
pub fn ifft_in_place(buf: &mut [Complex64]) {
    let n = buf.len();
    if n > 1 {
        plan(n, true).process(buf);
    }
    let scale = 1.0 / n as f64;
    for v in buf.iter_mut() {
        *v *= scale;
    }
}

pub fn fft_real(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_in_place(&mut buf);
    buf
}

/// Circular convolution of a spectrum with a real-valued filter spectrum, back in time domain.
pub fn filter_spectrum(spectrum: &[Complex64], filter: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = spectrum
        .iter()
        .zip(filter)
        .map(|(s, &h)| s * h)
        .collect();
    ifft_in_place(&mut buf);
    buf
}

/// Interleave complex samples as `(re, im)` pairs.
pub fn interleave(z: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * z.len());
    for c in z {
        out.push(c.re);
        out.push(c.im);
    }
    out
}

/// Append complex samples to `out` as `(re, im)` pairs.
pub fn interleave_into(z: &[Complex64], out: &mut Vec<f64>) {
    out.reserve(2 * z.len());
    for c in z {
        out.push(c.re);
        out.push(c.im);
    }
}

pub fn deinterleave(v: &[f64]) -> Vec<Complex64> {
    v.chunks_exact(2).map(|p| Complex64::new(p[0], p[1])).collect()
}
