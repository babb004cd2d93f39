use crate::error::{invalid, Result};

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz >= MIN_LOG_HZ {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel >= MIN_LOG_MEL {
        MIN_LOG_HZ * (log_step() * (mel - MIN_LOG_MEL)).exp()
    } else {
        mel * F_SP
    }
}

/// Triangular, area-normalized mel filterbank stored sparsely per band.
#[derive(Debug, Clone, PartialEq)]
pub struct MelBank {
    n_bins: usize,
    /// `(first_bin, weights)` for each band.
    bands: Vec<(usize, Vec<f64>)>,
}

impl MelBank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize, fmin: f64, fmax: f64) -> Result<Self> {
        let n_bins = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        if n_mels == 0 || n_mels > n_bins {
            return Err(invalid(format!("n_mels must be in 1..={n_bins}, got {n_mels}")));
        }
        if !(0.0..fmax).contains(&fmin) || fmax > nyquist {
            return Err(invalid(format!("need 0 <= fmin < fmax <= {nyquist}, got {fmin}..{fmax}")));
        }
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;

        let mut bands = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, centre, right) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (right - left);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = ((f - left) / (centre - left)).min((right - f) / (right - centre)).max(0.0);
                if w > 0.0 {
                    let start = *first.get_or_insert(k);
                    weights.resize(k - start, 0.0);
                    weights.push(w * norm);
                }
            }
            match first {
                Some(start) => bands.push((start, weights)),
                None => {
                    return Err(invalid(format!(
                        "mel band {m} ({left:.1}–{right:.1} Hz) covers no FFT bin; lower n_mels or raise n_fft"
                    )))
                }
            }
        }
        Ok(Self { n_bins, bands })
    }

    pub fn n_mels(&self) -> usize {
        self.bands.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Dense weight matrix `[n_mels][n_bins]`.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.bands
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; self.n_bins];
                row[*start..start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    /// `out[m] = Σ_k W[m,k]·x[k]`.
    pub fn project(&self, x: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.bands.iter().zip(out.iter_mut()) {
            *o = w.iter().zip(&x[*start..]).map(|(a, b)| a * b).sum();
        }
    }

    /// Weighted mean within each band: `Σ_k W[m,k]·x[k] / Σ_k W[m,k]`.
    pub fn average(&self, x: &[f64], out: &mut [f64]) {
        for ((start, w), o) in self.bands.iter().zip(out.iter_mut()) {
            let total: f64 = w.iter().sum();
            *o = w.iter().zip(&x[*start..]).map(|(a, b)| a * b).sum::<f64>() / total;
        }
    }
}
