//! Mamba layer, two-layer Mamba component and the bidirectional block.

use rand::Rng;
use seld_autodiff::{Conv1dPadding, Tensor, Var};

use super::rmsnorm::rmsnorm_op;
use super::scan::{selective_scan, InputRule};
use crate::error::{invalid, Result};
use crate::nn::linear;
use crate::params::{uniform, Ctx, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct MambaConfig {
    /// Model width D.
    pub d_model: usize,
    /// State size N.
    pub d_state: usize,
    /// Depthwise causal convolution width K.
    pub d_conv: usize,
    /// Rank of the low-rank Δ projection.
    pub dt_rank: usize,
    pub input_rule: InputRule,
    /// Biases on the input, gate and output projections.
    pub linear_bias: bool,
    /// Adds the per-channel skip term `y += D ⊙ x` after the scan.
    pub skip_d: bool,
    /// Adds the layer input to the layer output.
    pub residual: bool,
}

impl MambaConfig {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_state,
            d_conv: 4,
            dt_rank: d_model.div_ceil(16),
            input_rule: InputRule::Euler,
            linear_bias: false,
            skip_d: false,
            residual: false,
        }
    }

    /// Expanded width E = 2D.
    pub fn d_inner(&self) -> usize {
        2 * self.d_model
    }

    /// Learnable scalars in one Mamba layer.
    pub fn layer_params(&self) -> usize {
        let (d, e, n, k, r) = (self.d_model, self.d_inner(), self.d_state, self.d_conv, self.dt_rank);
        let mut p = 2 * d * e + e * d; // input, gate, output projections
        if self.linear_bias {
            p += 2 * e + d;
        }
        p += e * k + e; // conv
        p += e * (r + 2 * n); // x -> (dt, B, C)
        p += r * e + e; // dt projection
        p += e * n; // A_log
        if self.skip_d {
            p += e;
        }
        p
    }
}

/// Learnable selective SSM: Δ, B and C are computed from the input.
///
/// Parameters under `prefix`: `x_proj.weight [E, R+2N]`,
/// `dt_proj.weight [R, E]`, `dt_proj.bias [E]`, `A_log [E, N]` with
/// `A = −exp(A_log)`.
#[derive(Clone, Debug)]
pub struct SelectiveSsm {
    pub prefix: String,
    pub cfg: MambaConfig,
}

impl SelectiveSsm {
    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (e, n, r) = (self.cfg.d_inner(), self.cfg.d_state, self.cfg.dt_rank);
        store.insert(self.name("x_proj.weight"), uniform(rng, &[e, r + 2 * n], 1.0 / (e as f64).sqrt()));
        store.insert(self.name("dt_proj.weight"), uniform(rng, &[r, e], 1.0 / (r as f64).sqrt()));
        // Δ initialised log-uniformly in [1e-3, 1e-1] through inverse softplus
        let bias = Tensor::from_fn(&[e], |_| {
            let dt = (rng.random_range((1e-3f64).ln()..(1e-1f64).ln())).exp();
            dt + (-(-dt).exp_m1()).ln()
        });
        store.insert(self.name("dt_proj.bias"), bias);
        // S4D-real: A[c, s] = −(s + 1)
        store.insert(self.name("A_log"), Tensor::from_fn(&[e, n], |i| ((i % n + 1) as f64).ln()));
    }

    /// `x`: `[B, L, E]` → `[B, L, E]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x).to_vec();
        let (e, n, r) = (self.cfg.d_inner(), self.cfg.d_state, self.cfg.dt_rank);
        if shape.len() != 3 || shape[2] != e {
            return Err(invalid(format!("selective ssm expects [B, L, {e}], got {shape:?}")));
        }
        let (b, l) = (shape[0], shape[1]);
        let proj = linear(ctx, x, &self.name("x_proj.weight"), None)?;
        let dt_low = ctx.g.slice(proj, 2, 0, r)?;
        let bm = ctx.g.slice(proj, 2, r, r + n)?;
        let cm = ctx.g.slice(proj, 2, r + n, r + 2 * n)?;
        let dt = linear(ctx, dt_low, &self.name("dt_proj.weight"), Some(&self.name("dt_proj.bias")))?;
        let delta = ctx.g.softplus(dt)?;
        let a_log = ctx.p(&self.name("A_log"))?;
        let a_exp = ctx.g.exp(a_log)?;
        let a = ctx.g.neg(a_exp)?;
        debug_assert_eq!(ctx.g.shape(bm), [b, l, n]);
        selective_scan(ctx.g, x, delta, a, bm, cm, self.cfg.input_rule)
    }
}

/// One Mamba layer:
///
/// ```text
/// û = Linear_input(u)        z = Linear_gated(u)
/// x = SiLU(CausalDepthwiseConv1D(û))
/// y = SiLU(z) ⊙ SSM(x)
/// ŷ = Linear_output(y)
/// ```
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub prefix: String,
    pub cfg: MambaConfig,
}

impl MambaLayer {
    pub fn new(prefix: impl Into<String>, cfg: MambaConfig) -> Self {
        Self {
            prefix: prefix.into(),
            cfg,
        }
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    fn ssm(&self) -> SelectiveSsm {
        SelectiveSsm {
            prefix: self.name("ssm"),
            cfg: self.cfg.clone(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let (d, e, k) = (self.cfg.d_model, self.cfg.d_inner(), self.cfg.d_conv);
        let bd = 1.0 / (d as f64).sqrt();
        let be = 1.0 / (e as f64).sqrt();
        let bk = 1.0 / (k as f64).sqrt();
        store.insert(self.name("in_proj.weight"), uniform(rng, &[d, e], bd));
        store.insert(self.name("gate_proj.weight"), uniform(rng, &[d, e], bd));
        store.insert(self.name("conv1d.weight"), uniform(rng, &[e, 1, k], bk));
        store.insert(self.name("conv1d.bias"), uniform(rng, &[e], bk));
        self.ssm().init(store, rng);
        store.insert(self.name("out_proj.weight"), uniform(rng, &[e, d], be));
        if self.cfg.linear_bias {
            store.insert(self.name("in_proj.bias"), Tensor::zeros(&[e]));
            store.insert(self.name("gate_proj.bias"), Tensor::zeros(&[e]));
            store.insert(self.name("out_proj.bias"), Tensor::zeros(&[d]));
        }
        if self.cfg.skip_d {
            store.insert(self.name("ssm.D"), Tensor::ones(&[e]));
        }
    }

    fn bias(&self, s: &str) -> Option<String> {
        self.cfg.linear_bias.then(|| self.name(s))
    }

    /// `u`: `[B, L, D]` → `[B, L, D]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, u: Var) -> Result<Var> {
        let shape = ctx.g.shape(u).to_vec();
        let d = self.cfg.d_model;
        if shape.len() != 3 || shape[2] != d {
            return Err(invalid(format!(
                "mamba layer {} expects [B, L, {d}], got {shape:?}",
                self.prefix
            )));
        }
        let u_hat = linear(ctx, u, &self.name("in_proj.weight"), self.bias("in_proj.bias").as_deref())?;
        let z = linear(ctx, u, &self.name("gate_proj.weight"), self.bias("gate_proj.bias").as_deref())?;

        // depthwise causal conv over time: [B, L, E] -> [B, E, L] and back
        let e = self.cfg.d_inner();
        let cw = ctx.p(&self.name("conv1d.weight"))?;
        let cb = ctx.p(&self.name("conv1d.bias"))?;
        let t = ctx.g.permute(u_hat, &[0, 2, 1])?;
        let t = ctx.g.conv1d(t, cw, Some(cb), e, Conv1dPadding::Causal)?;
        let t = ctx.g.permute(t, &[0, 2, 1])?;
        let x = ctx.g.silu(t)?;

        let mut s = self.ssm().forward(ctx, x)?;
        if self.cfg.skip_d {
            let dv = ctx.p(&self.name("ssm.D"))?;
            let dx = ctx.g.mul_along(x, dv, 2)?;
            s = ctx.g.add(s, dx)?;
        }
        let gate = ctx.g.silu(z)?;
        let y = ctx.g.mul(gate, s)?;
        let mut out = linear(ctx, y, &self.name("out_proj.weight"), self.bias("out_proj.bias").as_deref())?;
        if self.cfg.residual {
            out = ctx.g.add(out, u)?;
        }
        Ok(out)
    }
}

/// Two Mamba layers applied in sequence.
#[derive(Clone, Debug)]
pub struct MambaComponent {
    pub layers: [MambaLayer; 2],
}

impl MambaComponent {
    pub fn new(prefix: &str, cfg: &MambaConfig) -> Self {
        Self {
            layers: [
                MambaLayer::new(format!("{prefix}.layer0"), cfg.clone()),
                MambaLayer::new(format!("{prefix}.layer1"), cfg.clone()),
            ],
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, u: Var) -> Result<Var> {
        let h = self.layers[0].forward(ctx, u)?;
        self.layers[1].forward(ctx, h)
    }
}

/// Bidirectional Mamba block:
/// `RMSNorm_f(M_f(u)) + flip(RMSNorm_b(M_b(flip(u))))`, flipping along time.
#[derive(Clone, Debug)]
pub struct BMambaBlock {
    pub forward_component: MambaComponent,
    pub backward_component: MambaComponent,
    pub norm_fwd: String,
    pub norm_bwd: String,
    pub d_model: usize,
}

impl BMambaBlock {
    pub fn new(prefix: &str, cfg: &MambaConfig) -> Self {
        Self {
            forward_component: MambaComponent::new(&format!("{prefix}.fwd"), cfg),
            backward_component: MambaComponent::new(&format!("{prefix}.bwd"), cfg),
            norm_fwd: format!("{prefix}.norm_fwd.weight"),
            norm_bwd: format!("{prefix}.norm_bwd.weight"),
            d_model: cfg.d_model,
        }
    }

    /// Block whose backward direction reuses the forward direction's
    /// parameters.
    pub fn tied(prefix: &str, cfg: &MambaConfig) -> Self {
        let fwd = MambaComponent::new(&format!("{prefix}.fwd"), cfg);
        let norm = format!("{prefix}.norm_fwd.weight");
        Self {
            forward_component: fwd.clone(),
            backward_component: fwd,
            norm_fwd: norm.clone(),
            norm_bwd: norm,
            d_model: cfg.d_model,
        }
    }

    pub fn is_tied(&self) -> bool {
        self.norm_fwd == self.norm_bwd
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.forward_component.init(store, rng);
        store.insert(self.norm_fwd.clone(), Tensor::ones(&[self.d_model]));
        if !self.is_tied() {
            self.backward_component.init(store, rng);
            store.insert(self.norm_bwd.clone(), Tensor::ones(&[self.d_model]));
        }
    }

    /// `u`: `[B, L, D]` → `[B, L, D]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, u: Var) -> Result<Var> {
        let f = self.forward_component.forward(ctx, u)?;
        let gf = ctx.p(&self.norm_fwd)?;
        let f = rmsnorm_op(ctx.g, f, gf)?;

        let ur = ctx.g.flip(u, 1)?;
        let b = self.backward_component.forward(ctx, ur)?;
        let gb = ctx.p(&self.norm_bwd)?;
        let b = rmsnorm_op(ctx.g, b, gb)?;
        let b = ctx.g.flip(b, 1)?;
        Ok(ctx.g.add(f, b)?)
    }
}
