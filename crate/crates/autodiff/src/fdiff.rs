use crate::error::{invalid, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Records `inputs` as trainable leaves on `graph` and runs `build` over
/// them, returning the leaf handles and whatever outputs `build` produced.
pub fn forward_eval<F, O>(graph: &mut Graph, inputs: &[Tensor], build: F) -> Result<(Vec<Var>, O)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<O>,
{
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = build(graph, &leaves)?;
    Ok((leaves, out))
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences and returns the largest relative error over all coordinates:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(invalid("finite_diff_check", format!("eps {eps} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let (leaves, out) = forward_eval(&mut g, point, &f)?;
    if !g.value(out).is_scalar() {
        return Err(invalid(
            "finite_diff_check",
            format!("function must be scalar-valued, got shape {:?}", g.shape(out)),
        ));
    }
    g.backward(out, &Tensor::scalar(1.0))?;

    let eval = |pt: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let xs: Vec<Var> = pt.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &xs)?;
        Ok(g.value(y).item())
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = point.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point[k].shape()));
        for i in 0..point[k].numel() {
            let orig = point[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
