use std::path::Path;

use seld_autodiff::Tensor;

use crate::error::{invalid, Result, SeldError};
use crate::features::FoaClip;

fn wav_err(path: &Path) -> impl FnOnce(hound::Error) -> SeldError + '_ {
    move |e| invalid(format!("{}: {e}", path.display()))
}

/// Writes a clip as 4-channel 32-bit float WAV (W, X, Y, Z interleaved).
pub fn write_wav(path: impl AsRef<Path>, clip: &FoaClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 4,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wav_err(path))?;
    let chans: Vec<&[f64]> = (0..4).map(|c| clip.channel(c)).collect();
    for n in 0..clip.len() {
        for ch in &chans {
            w.write_sample(ch[n] as f32).map_err(wav_err(path))?;
        }
    }
    w.finalize().map_err(wav_err(path))
}

/// Reads a 4-channel WAV (float or integer PCM) into a clip.
pub fn read_wav(path: impl AsRef<Path>) -> Result<FoaClip> {
    let path = path.as_ref();
    let mut r = hound::WavReader::open(path).map_err(wav_err(path))?;
    let spec = r.spec();
    if spec.channels != 4 {
        return Err(invalid(format!("{}: expected 4 FOA channels, found {}", path.display(), spec.channels)));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => r
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err(path))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            r.samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err(path))?
        }
    };
    let len = interleaved.len() / 4;
    let samples = Tensor::from_fn(&[4, len], |i| interleaved[(i % len) * 4 + i / len]);
    FoaClip::new(samples, spec.sample_rate)
}
