//! The three-branch network: cross-stitched convolutional encoders,
//! per-track BMamba decoders and FC heads.

mod accounting;
mod decoder;
mod encoder;

pub use accounting::{count_params_macs, Complexity};
pub use decoder::{decoder_forward, TrackOutput, TrackVars};
pub use encoder::{cross_stitch, dual_conv_stage, encoder_forward, Pool};

use rand::Rng;
use seld_autodiff::{Tensor, Var};

use crate::error::{invalid, Result};
use crate::features::BranchFeatures;
use crate::params::{Ctx, ParamStore};
use crate::ssm::{InputRule, MambaConfig};

pub const N_TRACKS: usize = 3;
pub const BRANCHES: [&str; 3] = ["sed", "doa", "sde"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_tracks: usize,
    pub conv_channels: [usize; 4],
    /// Embedding width D.
    pub embed_dim: usize,
    /// SSM state size N.
    pub state_dim: usize,
    pub bmamba_per_branch: usize,
    pub sde_use_ivs: bool,
    pub conv_bias: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub input_rule: InputRule,
    /// Cross-stitch initialization (diagonal, off-diagonal).
    pub stitch_init: (f64, f64),
    /// Mamba's `D ⊙ x` skip inside every layer.
    pub mamba_skip_d: bool,
    /// Residual connection around every Mamba layer.
    pub mamba_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_classes: 13,
            n_tracks: N_TRACKS,
            conv_channels: [64, 128, 256, 512],
            embed_dim: 512,
            state_dim: 16,
            bmamba_per_branch: N_TRACKS,
            sde_use_ivs: false,
            conv_bias: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            input_rule: InputRule::Euler,
            stitch_init: (0.9, 0.05),
            mamba_skip_d: false,
            mamba_residual: false,
        }
    }
}

impl ModelConfig {
    /// A narrow network for single-CPU experiments.
    pub fn small() -> Self {
        Self {
            conv_channels: [8, 16, 32, 32],
            embed_dim: 32,
            state_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tracks != N_TRACKS || self.bmamba_per_branch != N_TRACKS {
            return Err(invalid(format!(
                "the network has exactly {N_TRACKS} tracks, got n_tracks={} bmamba_per_branch={}",
                self.n_tracks, self.bmamba_per_branch
            )));
        }
        if self.conv_channels[3] != self.embed_dim {
            return Err(invalid(format!(
                "last conv stage width {} must equal embed_dim {}",
                self.conv_channels[3], self.embed_dim
            )));
        }
        if self.n_classes == 0 || self.embed_dim == 0 || self.state_dim == 0 || self.conv_channels.contains(&0) {
            return Err(invalid("model sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(invalid("bn_momentum must be in [0, 1] and bn_eps positive"));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> [usize; 3] {
        [4, 7, if self.sde_use_ivs { 7 } else { 4 }]
    }

    pub fn mamba(&self) -> MambaConfig {
        MambaConfig {
            input_rule: self.input_rule,
            skip_d: self.mamba_skip_d,
            residual: self.mamba_residual,
            ..MambaConfig::new(self.embed_dim, self.state_dim)
        }
    }
}

/// A batch of branch inputs, each `[B, C, T, F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    pub branches: [Tensor; 3],
}

impl BatchInput {
    pub fn stack(examples: &[&BranchFeatures]) -> Result<Self> {
        let first = examples.first().ok_or_else(|| invalid("empty batch"))?;
        let mut branches = Vec::with_capacity(3);
        for b in 0..3 {
            let pick = |f: &BranchFeatures| match b {
                0 => f.sed.clone(),
                1 => f.doa.clone(),
                _ => f.sde.clone(),
            };
            let shape = pick(first).shape().to_vec();
            let mut data = Vec::with_capacity(examples.len() * shape.iter().product::<usize>());
            for ex in examples {
                let t = pick(ex);
                if t.shape() != shape.as_slice() {
                    return Err(invalid(format!("batch examples disagree: {:?} vs {:?}", t.shape(), shape)));
                }
                data.extend_from_slice(t.data());
            }
            let mut full = vec![examples.len()];
            full.extend(shape);
            branches.push(Tensor::new(&full, data)?);
        }
        let branches: [Tensor; 3] = branches.try_into().expect("three branches");
        Ok(Self { branches })
    }

    pub fn batch(&self) -> usize {
        self.branches[0].shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.branches[0].shape()[2]
    }
}

/// Parameter naming and initialization for the whole network.
#[derive(Clone, Debug)]
pub struct SeldModel {
    pub cfg: ModelConfig,
}

impl SeldModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        encoder::init(&self.cfg, &mut store, rng);
        decoder::init(&self.cfg, &mut store, rng);
        store
    }

    /// Full forward pass on a batch; returns the head outputs as graph nodes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, input: &BatchInput) -> Result<TrackVars> {
        let xs: Vec<Var> = input.branches.iter().map(|t| ctx.g.constant(t.clone())).collect();
        let emb = encoder_forward(ctx, &self.cfg, [xs[0], xs[1], xs[2]])?;
        decoder_forward(ctx, &self.cfg, emb)
    }

    /// Inference without gradients.
    pub fn predict(&self, store: &ParamStore, input: &BatchInput) -> Result<TrackOutput> {
        let mut g = seld_autodiff::Graph::new();
        let mut ctx = Ctx::new(&mut g, store, false);
        let vars = self.forward(&mut ctx, input)?;
        Ok(vars.values(ctx.g))
    }
}

/// Folds training-mode batch statistics into the running buffers.
pub fn update_bn_buffers(
    store: &mut ParamStore,
    stats: &[(String, seld_autodiff::BatchStats)],
    momentum: f64,
) -> Result<()> {
    for (prefix, s) in stats {
        let unbiased = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        let mean = store.buffer_mut(&format!("{prefix}.running_mean"))?;
        for (r, m) in mean.data_mut().iter_mut().zip(&s.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        let var = store.buffer_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in var.data_mut().iter_mut().zip(&s.var) {
            *r = (1.0 - momentum) * *r + momentum * v * unbiased;
        }
    }
    Ok(())
}
