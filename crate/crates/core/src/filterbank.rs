//! Dyadic analytic wavelet filter banks and the frequency-domain wavelet transform.
//!
//! A bank holds `J` band-pass spectra `psi_hat[j]` (one per octave) and one
//! low-pass spectrum `phi_hat`, all sampled on the length-`L` DFT grid. Spectra
//! are real-valued. Band-pass filters are analytic: they vanish on negative
//! frequencies and at DC, and carry a `sqrt(2)` gain on strictly positive
//! non-Nyquist bins so that, for real input, the transform preserves energy.
//!
//! The Littlewood-Paley sum reported per positive bin `k` is the energy
//! density seen by a real signal,
//!
//! ```text
//! lp[k] = 1/2 * sum_c (|h_c[k]|^2 + |h_c[-k]|^2)
//! ```
//!
//! which equals `sum_j |psi(2^j w)|^2 + |phi(w)|^2` in terms of the one-sided
//! mother profile. The mother profile tiles log-frequency exactly: a flat top
//! over the octave with a smooth rise at the octave's lower edge and the
//! complementary fall just above its upper edge. Dilations by powers of two
//! are therefore exact on the DFT grid, and the low-pass is the sum of the
//! dilates beyond `J`.

use std::io::{Read, Write};

use rustfft::num_complex::Complex64;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral;

const MAGIC: &[u8; 4] = b"SCSB";
pub const BANK_FORMAT_VERSION: u32 = 1;

/// Width (in octaves) of the transition between neighbouring channels.
pub const TRANSITION_OCTAVES: f64 = 0.1;

/// Default spline order of the Battle-Lemarie transition (cubic splines).
pub const DEFAULT_SPLINE_ORDER: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Transition shaped by the Battle-Lemarie spline partition of unity,
    /// `s(x) = x^{2n} / (x^{2n} + (1-x)^{2n})` with `n = order + 1`.
    BattleLemarie { order: u32 },
    /// Raised-cosine transition in log-frequency.
    MorletLike,
}

impl Default for Family {
    fn default() -> Self {
        Family::BattleLemarie {
            order: DEFAULT_SPLINE_ORDER,
        }
    }
}

impl Family {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "battle-lemarie" | "battlelemarie" | "bl" => Ok(Family::default()),
            "morlet-like" | "morletlike" | "morlet" => Ok(Family::MorletLike),
            _ => Err(Error::UnknownFamily(name.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::BattleLemarie { .. } => "battle-lemarie",
            Family::MorletLike => "morlet-like",
        }
    }

    fn tag(&self) -> (u8, u32) {
        match *self {
            Family::BattleLemarie { order } => (1, order),
            Family::MorletLike => (2, 0),
        }
    }

    fn from_tag(tag: u8, order: u32) -> Result<Self> {
        match tag {
            1 => Ok(Family::BattleLemarie { order }),
            2 => Ok(Family::MorletLike),
            other => Err(Error::UnknownFamily(format!("tag {other}"))),
        }
    }

    /// Rising half of the squared transition on `[0, 1]`; `s(x) + s(1 - x) = 1`.
    fn rise(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match *self {
            Family::BattleLemarie { order } => {
                let p = 2 * (order as i32 + 1);
                let a = x.powi(p);
                let b = (1.0 - x).powi(p);
                a / (a + b)
            }
            Family::MorletLike => {
                let s = (std::f64::consts::FRAC_PI_2 * x).sin();
                s * s
            }
        }
    }

    /// Squared mother profile at `xi = log2(w / pi)` for the finest channel.
    ///
    /// Supported on `(-1, TRANSITION_OCTAVES)`; equal to one on
    /// `[-1 + TRANSITION_OCTAVES, 0]`.
    pub fn profile(&self, xi: f64) -> f64 {
        let d = TRANSITION_OCTAVES;
        if xi <= -1.0 || xi >= d {
            0.0
        } else if xi < -1.0 + d {
            self.rise((xi + 1.0) / d)
        } else if xi <= 0.0 {
            1.0
        } else {
            1.0 - self.rise(xi / d)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    octaves: usize,
    len: usize,
    family: Family,
    psi_hat: Vec<Vec<f64>>,
    phi_hat: Vec<f64>,
    lp_residual: f64,
}

/// Output of [`FilterBank::transform`]. Channel `J` (0-based) is the low-pass.
#[derive(Debug, Clone)]
pub struct WaveletCoeffs {
    pub octaves: usize,
    pub len: usize,
    pub coeffs: Vec<Vec<Complex64>>,
}

impl WaveletCoeffs {
    pub fn energy(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .map(|z| z.norm_sqr())
            .sum()
    }
}

/// Normalized angular frequency of DFT bin `k` relative to pi, as `log2(w/pi)`.
fn log2_rel(k: usize, len: usize) -> f64 {
    (2.0 * k as f64 / len as f64).log2()
}

impl FilterBank {
    pub fn new(octaves: usize, len: usize, family: Family) -> Result<Self> {
        if octaves < 1 {
            return Err(Error::Sizing("at least one octave is required".into()));
        }
        if octaves >= usize::BITS as usize - 2 || len < (1usize << (octaves + 1)) {
            return Err(Error::Sizing(format!(
                "signal length {len} is shorter than 2^(J+1) for J = {octaves}"
            )));
        }
        let half = len / 2;
        let has_nyquist = len % 2 == 0;
        let mut psi_hat = vec![vec![0.0; len]; octaves];
        let mut phi_hat = vec![0.0; len];
        phi_hat[0] = 1.0;
        for k in 1..=half {
            let nyquist = has_nyquist && k == half;
            let xi = log2_rel(k, len);
            let mut covered = 0.0;
            for (j, row) in psi_hat.iter_mut().enumerate() {
                let f = family.profile(xi + j as f64);
                covered += f;
                row[k] = if nyquist { f.sqrt() } else { (2.0 * f).sqrt() };
            }
            let low = (1.0 - covered).max(0.0).sqrt();
            phi_hat[k] = low;
            phi_hat[len - k] = low;
        }
        let mut bank = FilterBank {
            octaves,
            len,
            family,
            psi_hat,
            phi_hat,
            lp_residual: 0.0,
        };
        bank.renormalize();
        bank.lp_residual = bank
            .lp_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(bank)
    }

    /// Divide every filter bin-wise by the square root of the LP sum.
    fn renormalize(&mut self) {
        let sums = self.lp_sums();
        for (k, s) in sums.iter().enumerate() {
            if *s <= 0.0 {
                continue;
            }
            let scale = 1.0 / s.sqrt();
            let mirror = (self.len - k) % self.len;
            let bins: &[usize] = if mirror == k { &[k] } else { &[k, mirror] };
            for &b in bins {
                for row in self.psi_hat.iter_mut() {
                    row[b] *= scale;
                }
                self.phi_hat[b] *= scale;
            }
        }
    }

    /// Real-signal Littlewood-Paley sum for bins `0..=L/2`.
    pub fn lp_sums(&self) -> Vec<f64> {
        let half = self.len / 2;
        (0..=half)
            .map(|k| {
                let m = (self.len - k) % self.len;
                let mut acc = 0.0;
                for row in self.channels() {
                    acc += row[k] * row[k] + row[m] * row[m];
                }
                0.5 * acc
            })
            .collect()
    }

    pub fn octaves(&self) -> usize {
        self.octaves
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lp_residual(&self) -> f64 {
        self.lp_residual
    }

    /// Number of channels, `J + 1`.
    pub fn n_channels(&self) -> usize {
        self.octaves + 1
    }

    /// Band-pass spectrum of octave `j` (0-based, finest first).
    pub fn psi_hat(&self, j: usize) -> &[f64] {
        &self.psi_hat[j]
    }

    pub fn phi_hat(&self) -> &[f64] {
        &self.phi_hat
    }

    /// Spectrum of channel `c`; `c == J` is the low-pass.
    pub fn channel(&self, c: usize) -> &[f64] {
        if c < self.octaves {
            &self.psi_hat[c]
        } else {
            &self.phi_hat
        }
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        self.psi_hat
            .iter()
            .map(|r| r.as_slice())
            .chain(std::iter::once(self.phi_hat.as_slice()))
    }

    /// Fraction of the squared spectrum of band-pass octave `j` (0-based)
    /// lying in `[2^{-(j+1)} pi, 2^{-j} pi]`.
    pub fn band_concentration(&self, j: usize) -> f64 {
        let row = &self.psi_hat[j];
        let lo = (self.len as f64) / 2f64.powi(j as i32 + 2);
        let hi = (self.len as f64) / 2f64.powi(j as i32 + 1);
        let mut inside = 0.0;
        let mut total = 0.0;
        for (k, v) in row.iter().enumerate() {
            let e = v * v;
            total += e;
            let kf = k as f64;
            if k <= self.len / 2 && kf >= lo && kf <= hi {
                inside += e;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            inside / total
        }
    }

    pub fn transform(&self, x: &[f64]) -> Result<WaveletCoeffs> {
        if x.len() != self.len {
            return Err(Error::Sizing(format!(
                "signal has {} samples, bank expects {}",
                x.len(),
                self.len
            )));
        }
        let spectrum = spectral::fft_real(x);
        let coeffs = self
            .channels()
            .map(|h| spectral::filter_spectrum(&spectrum, h))
            .collect();
        Ok(WaveletCoeffs {
            octaves: self.octaves,
            len: self.len,
            coeffs,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (tag, order) = self.family.tag();
        w.write_all(MAGIC)?;
        w.write_all(&BANK_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.octaves as u32).to_le_bytes())?;
        w.write_all(&(self.len as u64).to_le_bytes())?;
        w.write_all(&[tag])?;
        w.write_all(&order.to_le_bytes())?;
        for row in self.channels() {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a filter bank blob".into()));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != BANK_FORMAT_VERSION {
            return Err(Error::Version {
                expected: BANK_FORMAT_VERSION,
                found: version,
            });
        }
        r.read_exact(&mut b4)?;
        let octaves = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        r.read_exact(&mut b4)?;
        let family = Family::from_tag(tag[0], u32::from_le_bytes(b4))?;
        if octaves < 1 || len < (1usize << (octaves + 1)) {
            return Err(Error::Format("corrupt bank header".into()));
        }
        let mut read_row = || -> Result<Vec<f64>> {
            let mut row = vec![0.0; len];
            for v in row.iter_mut() {
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
            Ok(row)
        };
        let mut psi_hat = Vec::with_capacity(octaves);
        for _ in 0..octaves {
            psi_hat.push(read_row()?);
        }
        let phi_hat = read_row()?;
        let mut bank = FilterBank {
            octaves,
            len,
            family,
            psi_hat,
            phi_hat,
            lp_residual: 0.0,
        };
        bank.lp_residual = bank
            .lp_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn bl() -> Family {
        Family::default()
    }

    #[test]
    fn rejects_oversized_scale() {
        assert!(matches!(
            FilterBank::new(8, 256, bl()),
            Err(Error::Sizing(_))
        ));
        assert!(FilterBank::new(8, 512, bl()).is_ok());
        assert!(matches!(FilterBank::new(0, 64, bl()), Err(Error::Sizing(_))));
    }

    #[test]
    fn rejects_unknown_family() {
        assert!(matches!(
            Family::parse("haar"),
            Err(Error::UnknownFamily(_))
        ));
        assert_eq!(Family::parse("BL").unwrap(), bl());
    }

    #[test]
    fn paper_configuration_has_nine_channels() {
        let bank = FilterBank::new(8, 1 << 16, bl()).unwrap();
        assert_eq!(bank.n_channels(), 9);
        assert!(bank.lp_residual() <= 1e-10, "{}", bank.lp_residual());
    }

    #[test]
    fn smallest_bank() {
        let bank = FilterBank::new(1, 4, Family::MorletLike).unwrap();
        assert_eq!(bank.n_channels(), 2);
        let sums = bank.lp_sums();
        assert!((sums[1] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn band_pass_filters_are_zero_mean_and_analytic() {
        for family in [bl(), Family::MorletLike] {
            let bank = FilterBank::new(5, 512, family).unwrap();
            for j in 0..5 {
                let h = bank.psi_hat(j);
                assert_eq!(h[0], 0.0);
                assert!(h[257..].iter().all(|&v| v == 0.0));
            }
            assert!((bank.phi_hat()[0] - 1.0).abs() < 1e-15);
        }
    }

    /// Independent resampling: evaluate channel 1 at frequency 2w by linear
    /// interpolation on the grid and compare with channel 2 at w.
    #[test]
    fn dilation_matches_resampled_finest_channel() {
        let len = 1 << 10;
        let bank = FilterBank::new(3, len, bl()).unwrap();
        let fine = bank.psi_hat(0);
        let resample = |omega: f64| -> f64 {
            let pos = omega * len as f64 / (2.0 * std::f64::consts::PI);
            let i = pos.floor() as usize;
            let t = pos - i as f64;
            fine[i] * (1.0 - t) + fine[(i + 1).min(len - 1)] * t
        };
        let mut worst: f64 = 0.0;
        for k in 1..len / 4 {
            let omega = 2.0 * std::f64::consts::PI * k as f64 / len as f64;
            let dev = (bank.psi_hat(1)[k] - resample(2.0 * omega)).abs();
            worst = worst.max(dev);
        }
        assert!(worst <= 1e-9, "max deviation {worst}");
    }

    #[test]
    fn zero_signal_gives_zero_coefficients() {
        let bank = FilterBank::new(4, 256, bl()).unwrap();
        let w = bank.transform(&vec![0.0; 256]).unwrap();
        assert!(w.coeffs.iter().flatten().all(|z| z.re == 0.0 && z.im == 0.0));
    }

    #[test]
    fn impulse_energy_is_one() {
        let bank = FilterBank::new(6, 1024, bl()).unwrap();
        let mut x = vec![0.0; 1024];
        x[0] = 1.0;
        let w = bank.transform(&x).unwrap();
        assert!((w.energy() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn length_mismatch_is_a_sizing_error() {
        let bank = FilterBank::new(2, 64, bl()).unwrap();
        assert!(matches!(bank.transform(&[0.0; 63]), Err(Error::Sizing(_))));
    }

    #[test]
    fn tone_energy_lands_in_its_band() {
        let len = 4096;
        let bank = FilterBank::new(6, len, bl()).unwrap();
        for j in 0..6usize {
            // a bin in the flat part of octave j
            let k = (0.75 * len as f64 / 2f64.powi(j as i32 + 1)).round() as usize;
            // oracle: squared response at the tone bin decides dominance
            let gains: Vec<f64> = bank.channels().map(|h| h[k] * h[k] + h[len - k] * h[len - k]).collect();
            let share = gains[j] / gains.iter().sum::<f64>();
            assert!(share >= 0.9);
            let x: Vec<f64> = (0..len)
                .map(|t| (2.0 * std::f64::consts::PI * (k * t) as f64 / len as f64).cos())
                .collect();
            let w = bank.transform(&x).unwrap();
            let e: Vec<f64> = w.coeffs.iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect();
            let total: f64 = e.iter().sum();
            assert!(e[j] / total >= 0.9, "octave {j}: {}", e[j] / total);
        }
    }

    #[test]
    fn energy_is_conserved_for_random_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = FilterBank::new(5, 512, bl()).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm: f64 = x.iter().map(|v| v * v).sum();
            let e = bank.transform(&x).unwrap().energy();
            assert!(((e - norm) / norm).abs() <= 1e-10);
        }
    }

    #[test]
    fn blob_round_trip() {
        let bank = FilterBank::new(4, 128, Family::MorletLike).unwrap();
        let mut buf = Vec::new();
        bank.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCSB");
        let back = FilterBank::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, bank);
        buf[4] = 9;
        assert!(matches!(
            FilterBank::read_from(buf.as_slice()),
            Err(Error::Version { .. })
        ));
    }
}
