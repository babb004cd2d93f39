use rand::Rng;
use seld_autodiff::{BatchNormMode, Tensor, Var};

use super::{ModelConfig, BRANCHES};
use crate::error::{invalid, Result};
use crate::params::{kaiming_normal, Ctx, ParamStore};

/// Pooling after a dual-conv stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    /// 2×2 over time and frequency.
    TimeFreq,
    /// 1×2 over frequency only.
    Freq,
}

impl Pool {
    pub fn for_stage(stage: usize) -> Self {
        if stage < 3 {
            Pool::TimeFreq
        } else {
            Pool::Freq
        }
    }

    pub fn factors(self) -> (usize, usize) {
        match self {
            Pool::TimeFreq => (2, 2),
            Pool::Freq => (1, 2),
        }
    }
}

pub(super) fn stage_prefix(branch: &str, stage: usize) -> String {
    format!("encoder.{branch}.stage{}", stage + 1)
}

pub(super) fn stitch_name(stage: usize) -> String {
    format!("encoder.stitch{}.alpha", stage + 1)
}

pub(super) fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) {
    for (b, branch) in BRANCHES.iter().enumerate() {
        let mut c_in = cfg.in_channels()[b];
        for (s, &c_out) in cfg.conv_channels.iter().enumerate() {
            let prefix = stage_prefix(branch, s);
            for (unit, ci) in [(1, c_in), (2, c_out)] {
                let conv = format!("{prefix}.conv{unit}");
                store.insert(format!("{conv}.weight"), kaiming_normal(rng, &[c_out, ci, 3, 3], ci * 9));
                if cfg.conv_bias {
                    store.insert(format!("{conv}.bias"), Tensor::zeros(&[c_out]));
                }
                let bn = format!("{prefix}.bn{unit}");
                store.insert(format!("{bn}.weight"), Tensor::ones(&[c_out]));
                store.insert(format!("{bn}.bias"), Tensor::zeros(&[c_out]));
                store.insert_buffer(format!("{bn}.running_mean"), Tensor::zeros(&[c_out]));
                store.insert_buffer(format!("{bn}.running_var"), Tensor::ones(&[c_out]));
            }
            c_in = c_out;
        }
    }
    let (diag, off) = cfg.stitch_init;
    for s in 0..cfg.conv_channels.len() {
        let alpha = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { diag } else { off });
        store.insert(stitch_name(s), alpha);
    }
}

fn conv_bn_relu(ctx: &mut Ctx<'_>, prefix: &str, unit: usize, x: Var, cfg: &ModelConfig) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.conv{unit}.weight"))?;
    let bias = if cfg.conv_bias {
        Some(ctx.p(&format!("{prefix}.conv{unit}.bias"))?)
    } else {
        None
    };
    let y = ctx.g.conv2d(x, w, bias)?;
    let bn = format!("{prefix}.bn{unit}");
    let gamma = ctx.p(&format!("{bn}.weight"))?;
    let beta = ctx.p(&format!("{bn}.bias"))?;
    let y = if ctx.train {
        let (y, stats) = ctx.g.batch_norm(y, gamma, beta, BatchNormMode::Train, cfg.bn_eps)?;
        ctx.record_bn(&bn, stats.expect("train mode returns stats"));
        y
    } else {
        let mean = ctx.buffer(&format!("{bn}.running_mean"))?;
        let var = ctx.buffer(&format!("{bn}.running_var"))?;
        let mode = BatchNormMode::Infer {
            mean: mean.data(),
            var: var.data(),
        };
        ctx.g.batch_norm(y, gamma, beta, mode, cfg.bn_eps)?.0
    };
    Ok(ctx.g.relu(y)?)
}

/// Two (3×3 conv → batch norm → ReLU) units followed by average pooling.
/// `x`: `[B, C_in, T, F]`.
pub fn dual_conv_stage(ctx: &mut Ctx<'_>, prefix: &str, x: Var, pool: Pool, cfg: &ModelConfig) -> Result<Var> {
    let (pt, pf) = pool.factors();
    let shape = ctx.g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] % pt != 0 || shape[3] % pf != 0 {
        return Err(invalid(format!(
            "{prefix}: input {shape:?} not divisible by {pt}×{pf} pooling"
        )));
    }
    let h = conv_bn_relu(ctx, prefix, 1, x, cfg)?;
    let h = conv_bn_relu(ctx, prefix, 2, h, cfg)?;
    Ok(ctx.g.avg_pool2d(h, pt, pf)?)
}

/// `[x̂_1, x̂_2, x̂_3]ᵀ = α [x_1, x_2, x_3]ᵀ` applied at every element.
pub fn cross_stitch(ctx: &mut Ctx<'_>, xs: [Var; 3], alpha: Var) -> Result<[Var; 3]> {
    let shape = ctx.g.shape(xs[0]).to_vec();
    for &x in &xs[1..] {
        if ctx.g.shape(x) != shape.as_slice() {
            return Err(invalid(format!(
                "cross_stitch: shape mismatch {:?} vs {:?}",
                shape,
                ctx.g.shape(x)
            )));
        }
    }
    if ctx.g.shape(alpha) != [3, 3] {
        return Err(invalid(format!("cross_stitch: alpha must be 3×3, got {:?}", ctx.g.shape(alpha))));
    }
    let flat = ctx.g.reshape(alpha, &[9])?;
    let mut out = Vec::with_capacity(3);
    for i in 0..3 {
        let mut acc: Option<Var> = None;
        for (j, &x) in xs.iter().enumerate() {
            let a = ctx.g.slice(flat, 0, 3 * i + j, 3 * i + j + 1)?;
            let term = ctx.g.mul(x, a)?;
            acc = Some(match acc {
                Some(s) => ctx.g.add(s, term)?,
                None => term,
            });
        }
        out.push(acc.expect("three terms"));
    }
    Ok([out[0], out[1], out[2]])
}

/// Runs the three encoder branches. Inputs `[B, C_b, T, F]`; outputs three
/// embeddings `[B, T/8, D]`.
pub fn encoder_forward(ctx: &mut Ctx<'_>, cfg: &ModelConfig, inputs: [Var; 3]) -> Result<[Var; 3]> {
    for (b, &x) in inputs.iter().enumerate() {
        let s = ctx.g.shape(x);
        if s.len() != 4 || s[1] != cfg.in_channels()[b] {
            return Err(invalid(format!(
                "{} branch expects [B, {}, T, F], got {:?}",
                BRANCHES[b],
                cfg.in_channels()[b],
                s
            )));
        }
    }
    let mut xs = inputs;
    for s in 0..cfg.conv_channels.len() {
        let mut next = [xs[0]; 3];
        for (b, branch) in BRANCHES.iter().enumerate() {
            next[b] = dual_conv_stage(ctx, &stage_prefix(branch, s), xs[b], Pool::for_stage(s), cfg)?;
        }
        let alpha = ctx.p(&stitch_name(s))?;
        xs = cross_stitch(ctx, next, alpha)?;
    }
    let mut out = xs;
    for x in out.iter_mut() {
        // [B, D, T', F'] → mean over F' → [B, T', D]
        let pooled = ctx.g.mean_axis(*x, 3)?;
        *x = ctx.g.permute(pooled, &[0, 2, 1])?;
    }
    Ok(out)
}
