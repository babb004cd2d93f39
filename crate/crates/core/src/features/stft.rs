use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::FoaClip;
use crate::error::{invalid, Result};

/// One-sided complex spectrogram stored as `[channel][frame][bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    channels: usize,
    frames: usize,
    bins: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn from_parts(channels: usize, frames: usize, bins: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != channels * frames * bins {
            return Err(invalid(format!(
                "spectrogram {channels}×{frames}×{bins} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            frames,
            bins,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frame(&self, channel: usize, frame: usize) -> &[Complex64] {
        let start = (channel * self.frames + frame) * self.bins;
        &self.data[start..start + self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reflects an out-of-range sample index back into `0..len` without
/// repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let j = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    j as usize
}

/// Centered STFT with a periodic Hann window. Frame `t` is centred on sample
/// `t·hop`; the clip yields `floor(L / hop)` frames.
pub fn stft(clip: &FoaClip, n_fft: usize, hop: usize) -> Result<Spectrogram> {
    if !n_fft.is_power_of_two() || n_fft < 2 {
        return Err(invalid(format!("n_fft must be a power of two, got {n_fft}")));
    }
    if hop == 0 {
        return Err(invalid("hop must be at least 1"));
    }
    let len = clip.len();
    if len < n_fft {
        return Err(invalid(format!("clip has {len} samples, shorter than one {n_fft}-point window")));
    }
    let frames = len / hop;
    let bins = n_fft / 2 + 1;
    let window = periodic_hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let pad = (n_fft / 2) as isize;

    let mut data = Vec::with_capacity(4 * frames * bins);
    let mut buf = vec![Complex64::default(); n_fft];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for c in 0..4 {
        let x = clip.channel(c);
        for t in 0..frames {
            let start = (t * hop) as isize - pad;
            for (n, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(x[reflect(start + n as isize, len)] * window[n], 0.0);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
    }
    Spectrogram::from_parts(4, frames, bins, data)
}
