use super::{decoder::head_width, ModelConfig, Pool, N_TRACKS};

/// Model size and per-clip compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    /// Learnable scalars.
    pub params: u64,
    /// Multiply-accumulates for the requested audio duration.
    pub macs: u64,
}

/// Closed-form parameter and MAC counts. MACs cover the 3×3 convolutions
/// (`C_in·C_out·9·T·F`), every linear map (`in·out` per frame), the
/// depthwise causal convolution (`E·K` per frame) and the scan (three
/// `E·N` terms per frame: state decay, input injection, readout), for
/// `seconds` of audio at `sample_rate` with the given hop and mel count.
pub fn count_params_macs(cfg: &ModelConfig, seconds: f64, sample_rate: u32, hop: usize, n_mels: usize) -> Complexity {
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut t = ((seconds * sample_rate as f64) / hop as f64).floor() as u64;
    let mut f = n_mels as u64;

    // encoder
    let mut c_in: [u64; 3] = cfg.in_channels().map(|c| c as u64);
    for (s, &c_out) in cfg.conv_channels.iter().enumerate() {
        let c_out = c_out as u64;
        for ci in c_in.iter_mut() {
            for unit_in in [*ci, c_out] {
                params += unit_in * c_out * 9 + 2 * c_out;
                if cfg.conv_bias {
                    params += c_out;
                }
                macs += unit_in * c_out * 9 * t * f;
            }
            *ci = c_out;
        }
        let (pt, pf) = Pool::for_stage(s).factors();
        t /= pt as u64;
        f /= pf as u64;
        params += 9;
    }

    // decoder: 3 branches × tracks × BMamba (two components of two layers)
    let m = cfg.mamba();
    let (d, e, n, k, r) = (
        m.d_model as u64,
        m.d_inner() as u64,
        m.d_state as u64,
        m.d_conv as u64,
        m.dt_rank as u64,
    );
    let layer_macs = 3 * d * e + e * k + e * (r + 2 * n) + r * e + 3 * e * n;
    let block_params = 4 * m.layer_params() as u64 + 2 * d;
    for b in 0..3 {
        let w = head_width(cfg, b) as u64;
        for _ in 0..N_TRACKS {
            params += block_params + d * w + w;
            macs += (4 * layer_macs + d * w) * t;
        }
    }
    Complexity { params, macs }
}
