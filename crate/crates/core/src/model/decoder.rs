use rand::Rng;
use seld_autodiff::{Graph, Tensor, Var};

use super::{ModelConfig, BRANCHES, N_TRACKS};
use crate::error::{invalid, Result};
use crate::nn::linear;
use crate::params::{xavier_uniform, Ctx, ParamStore};
use crate::ssm::BMambaBlock;

/// Initial distance-head bias, keeping the ReLU output live at start.
const DIST_BIAS_INIT: f64 = 1.0;

pub(super) fn track_prefix(branch: &str, track: usize) -> String {
    format!("decoder.{branch}.track{track}")
}

/// Output width of each branch's head.
pub(super) fn head_width(cfg: &ModelConfig, branch: usize) -> usize {
    match branch {
        0 => cfg.n_classes,
        1 => 3,
        _ => 1,
    }
}

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    let mamba = cfg.mamba();
    let d = cfg.embed_dim;
    for (b, branch) in BRANCHES.iter().enumerate() {
        for t in 0..N_TRACKS {
            let prefix = track_prefix(branch, t);
            BMambaBlock::new(&format!("{prefix}.bmamba"), &mamba).init(store, rng);
            let k = head_width(cfg, b);
            store.insert(format!("{prefix}.head.weight"), xavier_uniform(rng, &[d, k], d, k));
            let bias = if b == 2 { DIST_BIAS_INIT } else { 0.0 };
            store.insert(format!("{prefix}.head.bias"), Tensor::full(&[k], bias));
        }
    }
}

/// Head outputs as graph nodes, each `[B, 3, T', k]`.
#[derive(Clone, Copy, Debug)]
pub struct TrackVars {
    pub sed: Var,
    pub doa: Var,
    pub dist: Var,
}

impl TrackVars {
    pub fn values(&self, g: &Graph) -> TrackOutput {
        TrackOutput {
            sed: g.value(self.sed).clone(),
            doa: g.value(self.doa).clone(),
            dist: g.value(self.dist).clone(),
        }
    }
}

/// Per-frame track-wise predictions: `sed [B, 3, T', C]` in [0, 1],
/// `doa [B, 3, T', 3]` in [−1, 1], `dist [B, 3, T', 1]` ≥ 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutput {
    pub sed: Tensor,
    pub doa: Tensor,
    pub dist: Tensor,
}

impl TrackOutput {
    pub fn batch(&self) -> usize {
        self.sed.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.sed.shape()[2]
    }

    /// One example without the batch axis: `sed [3, T', C]` etc.
    pub fn example(&self, b: usize) -> Result<TrackOutput> {
        let take = |t: &Tensor| -> Result<Tensor> {
            let s = t.slice(0, b, b + 1)?;
            Ok(s.reshape(&t.shape()[1..])?)
        };
        Ok(TrackOutput {
            sed: take(&self.sed)?,
            doa: take(&self.doa)?,
            dist: take(&self.dist)?,
        })
    }
}

/// Three BMamba blocks and heads per branch. Embeddings `[B, T', D]`.
pub fn decoder_forward(ctx: &mut Ctx<'_>, cfg: &ModelConfig, emb: [Var; 3]) -> Result<TrackVars> {
    let mamba = cfg.mamba();
    let mut heads = Vec::with_capacity(3);
    for (b, branch) in BRANCHES.iter().enumerate() {
        let shape = ctx.g.shape(emb[b]).to_vec();
        if shape.len() != 3 || shape[2] != cfg.embed_dim {
            return Err(invalid(format!(
                "{branch} embedding must be [B, T', {}], got {shape:?}",
                cfg.embed_dim
            )));
        }
        let (batch, frames) = (shape[0], shape[1]);
        let k = head_width(cfg, b);
        let mut tracks = Vec::with_capacity(N_TRACKS);
        for t in 0..N_TRACKS {
            let prefix = track_prefix(branch, t);
            let h = BMambaBlock::new(&format!("{prefix}.bmamba"), &mamba).forward(ctx, emb[b])?;
            let y = linear(
                ctx,
                h,
                &format!("{prefix}.head.weight"),
                Some(&format!("{prefix}.head.bias")),
            )?;
            let y = match b {
                0 => ctx.g.sigmoid(y)?,
                1 => ctx.g.tanh(y)?,
                _ => ctx.g.relu(y)?,
            };
            tracks.push(ctx.g.reshape(y, &[batch, 1, frames, k])?);
        }
        heads.push(ctx.g.concat(&tracks, 1)?);
    }
    Ok(TrackVars {
        sed: heads[0],
        doa: heads[1],
        dist: heads[2],
    })
}
