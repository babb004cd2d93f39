use seld_autodiff::{Function, Graph, Tensor, Var};

use crate::error::{invalid, Result};

pub const RMS_EPS: f64 = 1e-6;

/// Plain-tensor RMS normalization over the last axis:
/// `x / sqrt(mean(x²) + ε) ⊙ gain`.
pub fn rmsnorm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let d = *x.shape().last().expect("rank >= 1");
    if gain.shape() != [d] {
        return Err(invalid(format!("rmsnorm: gain {:?} for input {:?}", gain.shape(), x.shape())));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let r = inv_rms(row);
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= r * g;
        }
    }
    Ok(out)
}

fn inv_rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

struct RmsNormFn;

impl Function for RmsNormFn {
    fn name(&self) -> &'static str {
        "rmsnorm"
    }

    fn backward(&self, inputs: &[&Tensor], _y: &Tensor, grad: &Tensor) -> seld_autodiff::Result<Vec<Option<Tensor>>> {
        let (x, gain) = (inputs[0], inputs[1]);
        let d = gain.numel();
        let mut gx = Tensor::zeros(x.shape());
        let mut gg = vec![0.0; d];
        for ((xr, dy), gxr) in x
            .data()
            .chunks(d)
            .zip(grad.data().chunks(d))
            .zip(gx.data_mut().chunks_mut(d))
        {
            let r = inv_rms(xr);
            // s = Σ gain_i dy_i x_i
            let mut s = 0.0;
            for i in 0..d {
                s += gain.data()[i] * dy[i] * xr[i];
                gg[i] += dy[i] * xr[i] * r;
            }
            let k = r * r * r * s / d as f64;
            for i in 0..d {
                gxr[i] = r * gain.data()[i] * dy[i] - xr[i] * k;
            }
        }
        Ok(vec![Some(gx), Some(Tensor::new(&[d], gg)?)])
    }
}

/// Records RMS normalization over the last axis of `x` on the graph.
pub fn rmsnorm_op(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    let out = rmsnorm(g.value(x), g.value(gain))?;
    Ok(g.custom(Box::new(RmsNormFn), &[x, gain], out)?)
}
