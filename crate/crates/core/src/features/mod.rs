//! FOA front end: STFT, log-mel spectrograms, intensity vectors and the
//! per-branch feature assembly.

mod cache;
mod mel;
mod stft;

pub use cache::{load_cache, save_cache};
pub use mel::{hz_to_mel, mel_to_hz, MelBank};
pub use stft::{stft, Spectrogram};

use seld_autodiff::Tensor;

use crate::error::{invalid, Result};

pub const LOG_EPS: f64 = 1e-10;
pub const IV_EPS: f64 = 1e-8;

/// A four-channel first-order ambisonics clip. Rows are W, X, Y, Z.
#[derive(Debug, Clone, PartialEq)]
pub struct FoaClip {
    samples: Tensor,
    sample_rate: u32,
}

impl FoaClip {
    pub fn new(samples: Tensor, sample_rate: u32) -> Result<Self> {
        if samples.rank() != 2 || samples.shape()[0] != 4 {
            return Err(invalid(format!("FOA clip needs shape [4, L], got {:?}", samples.shape())));
        }
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let l = self.len();
        &self.samples.data()[c * l..(c + 1) * l]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub sde_use_ivs: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            n_fft: 1024,
            hop: 300,
            n_mels: 128,
            fmin: 20.0,
            fmax: 12_000.0,
            sde_use_ivs: false,
        }
    }
}

impl FeatureConfig {
    /// Key/value description written into feature caches.
    pub fn header(&self) -> Vec<(String, String)> {
        [
            ("sample_rate", self.sample_rate.to_string()),
            ("n_fft", self.n_fft.to_string()),
            ("hop", self.hop.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("fmin", format!("{:?}", self.fmin)),
            ("fmax", format!("{:?}", self.fmax)),
            ("sde_use_ivs", self.sde_use_ivs.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (format!("features.{k}"), v))
        .collect()
    }

    pub fn melbank(&self) -> Result<MelBank> {
        MelBank::new(self.sample_rate, self.n_fft, self.n_mels, self.fmin, self.fmax)
    }

    pub fn sed_channels(&self) -> usize {
        4
    }

    pub fn doa_channels(&self) -> usize {
        7
    }

    pub fn sde_channels(&self) -> usize {
        if self.sde_use_ivs {
            7
        } else {
            4
        }
    }
}

/// Per-branch network inputs, each `[C, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFeatures {
    pub sed: Tensor,
    pub doa: Tensor,
    pub sde: Tensor,
}

impl BranchFeatures {
    pub fn new(sed: Tensor, doa: Tensor, sde: Tensor) -> Result<Self> {
        for (name, t) in [("sed", &sed), ("doa", &doa), ("sde", &sde)] {
            if t.rank() != 3 {
                return Err(invalid(format!("{name} features need rank 3, got {:?}", t.shape())));
            }
        }
        if sed.shape()[1..] != doa.shape()[1..] || sed.shape()[1..] != sde.shape()[1..] {
            return Err(invalid(format!(
                "branch T×F disagree: sed {:?}, doa {:?}, sde {:?}",
                sed.shape(),
                doa.shape(),
                sde.shape()
            )));
        }
        if doa.shape()[0] != sed.shape()[0] + 3 {
            return Err(invalid("doa features must carry the sed channels plus three IV channels"));
        }
        Ok(Self { sed, doa, sde })
    }

    pub fn frames(&self) -> usize {
        self.sed.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.sed.shape()[2]
    }
}

/// Log-mel power per channel: `[4, T, n_mels]`.
pub fn logmel(spec: &Spectrogram, bank: &MelBank) -> Result<Tensor> {
    check_bank(spec, bank)?;
    let (c, t, m) = (spec.channels(), spec.frames(), bank.n_mels());
    let mut out = Tensor::zeros(&[c, t, m]);
    let mut power = vec![0.0; spec.bins()];
    let data = out.data_mut();
    for ch in 0..c {
        for frame in 0..t {
            for (p, z) in power.iter_mut().zip(spec.frame(ch, frame)) {
                *p = z.norm_sqr();
            }
            let row = &mut data[(ch * t + frame) * m..(ch * t + frame + 1) * m];
            bank.project(&power, row);
            for v in row.iter_mut() {
                *v = (*v + LOG_EPS).ln();
            }
        }
    }
    Ok(out)
}

/// Per-bin normalized active intensity `Re{conj(W)·(X,Y,Z)} / (‖I‖ + ε)`,
/// shaped `[3, T, bins]`.
pub fn normalized_intensity(spec: &Spectrogram) -> Result<Tensor> {
    if spec.channels() != 4 {
        return Err(invalid(format!("intensity vectors need 4 FOA channels, got {}", spec.channels())));
    }
    let (t, k) = (spec.frames(), spec.bins());
    let mut out = Tensor::zeros(&[3, t, k]);
    let data = out.data_mut();
    for frame in 0..t {
        let w = spec.frame(0, frame);
        let dirs = [spec.frame(1, frame), spec.frame(2, frame), spec.frame(3, frame)];
        for bin in 0..k {
            let i: [f64; 3] = std::array::from_fn(|d| (w[bin].conj() * dirs[d][bin]).re);
            let norm = (i[0] * i[0] + i[1] * i[1] + i[2] * i[2]).sqrt() + IV_EPS;
            for d in 0..3 {
                data[(d * t + frame) * k + bin] = i[d] / norm;
            }
        }
    }
    Ok(out)
}

/// Mel-band intensity vectors `[3, T, n_mels]`: normalized per bin, then
/// averaged within each mel band using the filterbank's weights.
pub fn intensity_vectors(spec: &Spectrogram, bank: &MelBank) -> Result<Tensor> {
    check_bank(spec, bank)?;
    let per_bin = normalized_intensity(spec)?;
    let (t, k, m) = (spec.frames(), spec.bins(), bank.n_mels());
    let mut out = Tensor::zeros(&[3, t, m]);
    for (src, dst) in per_bin.data().chunks(k).zip(out.data_mut().chunks_mut(m)) {
        bank.average(src, dst);
    }
    Ok(out)
}

fn check_bank(spec: &Spectrogram, bank: &MelBank) -> Result<()> {
    if bank.n_bins() != spec.bins() {
        return Err(invalid(format!(
            "filterbank expects {} bins, spectrogram has {}",
            bank.n_bins(),
            spec.bins()
        )));
    }
    Ok(())
}

/// Runs the full front end on one clip.
pub fn assemble_branch_inputs(clip: &FoaClip, cfg: &FeatureConfig) -> Result<BranchFeatures> {
    if clip.sample_rate() != cfg.sample_rate {
        return Err(invalid(format!(
            "clip sampled at {} Hz, features configured for {} Hz",
            clip.sample_rate(),
            cfg.sample_rate
        )));
    }
    let spec = stft(clip, cfg.n_fft, cfg.hop)?;
    let bank = cfg.melbank()?;
    let mel = logmel(&spec, &bank)?;
    let iv = intensity_vectors(&spec, &bank)?;
    let doa = Tensor::concat(&[&mel, &iv], 0)?;
    let sde = if cfg.sde_use_ivs { doa.clone() } else { mel.clone() };
    BranchFeatures::new(mel, doa, sde)
}
