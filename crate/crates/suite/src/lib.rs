//! Shared helpers of the acceptance criteria.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn white_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Prints the criterion's verdict line. Written straight to the stdout
/// handle so the test harness does not capture it.
pub fn report(criterion: usize, pass: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "[{}] criterion {criterion}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = out.flush();
}

/// Running per-coordinate sample statistics over Monte Carlo realizations.
pub struct MonteCarlo {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl MonteCarlo {
    pub fn new(dim: usize) -> Self {
        MonteCarlo { rows: Vec::new(), dim }
    }

    pub fn push(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.dim);
        self.rows.push(v.to_vec());
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.rows.iter().map(|r| r[i]).sum::<f64>() / self.rows.len() as f64
    }

    pub fn variance(&self, i: usize) -> f64 {
        let m = self.mean(i);
        let n = self.rows.len() as f64;
        self.rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / (n - 1.0)
    }

    /// Standard error of the mean.
    pub fn se(&self, i: usize) -> f64 {
        (self.variance(i) / self.rows.len() as f64).sqrt()
    }

    pub fn z_score(&self, i: usize, target: f64) -> f64 {
        let se = self.se(i);
        if se == 0.0 {
            if self.mean(i) == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean(i) - target) / se
        }
    }
}

/// Serializes the timed criteria so each runtime is measured on its own.
pub fn serial() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
