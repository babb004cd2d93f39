//! Small composite layers shared by the encoder, decoder and heads.

use seld_autodiff::Var;

use crate::error::Result;
use crate::params::Ctx;

/// Applies `x W (+ b)` over the last axis of `x`, where `W` is stored as
/// `[in, out]`.
pub fn linear(ctx: &mut Ctx<'_>, x: Var, weight: &str, bias: Option<&str>) -> Result<Var> {
    let w = ctx.p(weight)?;
    let shape = ctx.g.shape(x).to_vec();
    let out_dim = ctx.g.shape(w)[1];
    let in_dim = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / in_dim;
    let flat = ctx.g.reshape(x, &[rows, in_dim])?;
    let mut y = ctx.g.matmul(flat, w)?;
    if let Some(b) = bias {
        let b = ctx.p(b)?;
        y = ctx.g.add_along(y, b, 1)?;
    }
    let mut out_shape = shape;
    *out_shape.last_mut().expect("rank >= 1") = out_dim;
    Ok(ctx.g.reshape(y, &out_shape)?)
}
