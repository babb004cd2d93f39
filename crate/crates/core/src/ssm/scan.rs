//! Diagonal selective scan: discretization and the sequential recurrence
//!
//! ```text
//! h_k = exp(Δ_k A) ⊙ h_{k-1} + B̄_k x_k,   y_k = <C_k, h_k>,   h_0 = 0
//! ```
//!
//! run independently for every (batch, channel) pair, with Δ per channel and
//! B, C shared across channels at each step.

use seld_autodiff::{Function, Graph, Tensor, Var};

use crate::error::{invalid, Result};

/// How the input matrix is discretized. The state matrix always uses the
/// exact zero-order hold `Ā = exp(ΔA)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputRule {
    /// `B̄ = Δ·B`.
    #[default]
    Euler,
    /// Exact zero-order hold `B̄ = (exp(ΔA) − 1) / A · B`.
    Zoh,
}

impl InputRule {
    #[inline]
    fn bbar(self, delta: f64, a: f64, abar: f64, b: f64) -> f64 {
        match self {
            InputRule::Euler => delta * b,
            InputRule::Zoh => (abar - 1.0) / a * b,
        }
    }
}

/// Discretizes one sequence: `delta` is `[L, E]` (positive), `a` is
/// `[E, N]` (negative), `b` is `[L, N]`. Returns `(Ā, B̄)`, each `[L, E, N]`.
pub fn discretize(delta: &Tensor, a: &Tensor, b: &Tensor, rule: InputRule) -> Result<(Tensor, Tensor)> {
    if delta.rank() != 2 || a.rank() != 2 || b.rank() != 2 {
        return Err(invalid("discretize: expected delta [L,E], A [E,N], B [L,N]"));
    }
    let (l, e) = (delta.shape()[0], delta.shape()[1]);
    let n = a.shape()[1];
    if a.shape()[0] != e || b.shape() != [l, n] {
        return Err(invalid(format!(
            "discretize: incompatible shapes delta {:?}, A {:?}, B {:?}",
            delta.shape(),
            a.shape(),
            b.shape()
        )));
    }
    if let Some(d) = delta.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(invalid(format!("discretize: step size must be positive, got {d}")));
    }
    if let Some(v) = a.data().iter().find(|&&v| !(v < 0.0)) {
        return Err(invalid(format!("discretize: state matrix entries must be negative, got {v}")));
    }
    let mut abar = Tensor::zeros(&[l, e, n]);
    let mut bbar = Tensor::zeros(&[l, e, n]);
    for k in 0..l {
        for c in 0..e {
            let dt = delta.data()[k * e + c];
            for s in 0..n {
                let av = a.data()[c * n + s];
                let ab = (dt * av).exp();
                let i = (k * e + c) * n + s;
                abar.data_mut()[i] = ab;
                bbar.data_mut()[i] = rule.bbar(dt, av, ab, b.data()[k * n + s]);
            }
        }
    }
    Ok((abar, bbar))
}

/// Problem sizes of a batched scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
}

impl ScanDims {
    fn check(&self, x: &[f64], delta: &[f64], a: &[f64], b: &[f64], c: &[f64]) {
        let ble = self.batch * self.len * self.channels;
        let bln = self.batch * self.len * self.state;
        assert_eq!(x.len(), ble);
        assert_eq!(delta.len(), ble);
        assert_eq!(a.len(), self.channels * self.state);
        assert_eq!(b.len(), bln);
        assert_eq!(c.len(), bln);
    }
}

/// Forward recurrence over raw buffers. `x`, `delta`: `[B, L, E]`; `a`:
/// `[E, N]`; `b`, `c`: `[B, L, N]`. Returns `y` (`[B, L, E]`) and, when
/// requested, every hidden state (`[B, L, E, N]`).
pub fn scan_forward(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    dims: ScanDims,
    rule: InputRule,
    keep_states: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    dims.check(x, delta, a, b, c);
    let ScanDims {
        batch,
        len,
        channels: e,
        state: n,
    } = dims;
    let mut y = vec![0.0; batch * len * e];
    let mut states = keep_states.then(|| vec![0.0; batch * len * e * n]);
    let mut h = vec![0.0; e * n];
    for bi in 0..batch {
        h.fill(0.0);
        for k in 0..len {
            let row = bi * len + k;
            let bk = &b[row * n..(row + 1) * n];
            let ck = &c[row * n..(row + 1) * n];
            for ch in 0..e {
                let dt = delta[row * e + ch];
                let xv = x[row * e + ch];
                let ac = &a[ch * n..(ch + 1) * n];
                let hc = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for s in 0..n {
                    let ab = (dt * ac[s]).exp();
                    hc[s] = ab * hc[s] + rule.bbar(dt, ac[s], ab, bk[s]) * xv;
                    acc += ck[s] * hc[s];
                }
                y[row * e + ch] = acc;
            }
            if let Some(st) = states.as_mut() {
                st[row * e * n..(row + 1) * e * n].copy_from_slice(&h);
            }
        }
    }
    (y, states)
}

/// Gradients of the scan with respect to `(x, delta, a, b, c)`.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward(
    x: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    states: &[f64],
    grad_y: &[f64],
    dims: ScanDims,
    rule: InputRule,
) -> [Vec<f64>; 5] {
    dims.check(x, delta, a, b, c);
    let ScanDims {
        batch,
        len,
        channels: e,
        state: n,
    } = dims;
    let mut gx = vec![0.0; x.len()];
    let mut gdelta = vec![0.0; delta.len()];
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let mut gc = vec![0.0; c.len()];
    // dL/dh_k, carried backwards through time
    let mut dh = vec![0.0; e * n];
    for bi in 0..batch {
        dh.fill(0.0);
        for k in (0..len).rev() {
            let row = bi * len + k;
            let h_k = &states[row * e * n..(row + 1) * e * n];
            let h_prev = (k > 0).then(|| &states[(row - 1) * e * n..row * e * n]);
            let bk = &b[row * n..(row + 1) * n];
            let ck = &c[row * n..(row + 1) * n];
            for ch in 0..e {
                let dy = grad_y[row * e + ch];
                let dt = delta[row * e + ch];
                let xv = x[row * e + ch];
                let mut gx_acc = 0.0;
                let mut gdt_acc = 0.0;
                for s in 0..n {
                    let i = ch * n + s;
                    let av = a[i];
                    gc[row * n + s] += dy * h_k[i];
                    let d = dh[i] + dy * ck[s];
                    let ab = (dt * av).exp();
                    let hp = h_prev.map_or(0.0, |hp| hp[i]);
                    // through Ā = exp(ΔA)
                    let d_ab = d * hp;
                    gdt_acc += d_ab * av * ab;
                    ga[i] += d_ab * dt * ab;
                    // through B̄ x
                    let d_bbar = d * xv;
                    gx_acc += d * rule.bbar(dt, av, ab, bk[s]);
                    match rule {
                        InputRule::Euler => {
                            gdt_acc += d_bbar * bk[s];
                            gb[row * n + s] += d_bbar * dt;
                        }
                        InputRule::Zoh => {
                            gdt_acc += d_bbar * ab * bk[s];
                            ga[i] += d_bbar * bk[s] * (dt * ab * av - (ab - 1.0)) / (av * av);
                            gb[row * n + s] += d_bbar * (ab - 1.0) / av;
                        }
                    }
                    dh[i] = d * ab;
                }
                gx[row * e + ch] += gx_acc;
                gdelta[row * e + ch] += gdt_acc;
            }
        }
    }
    [gx, gdelta, ga, gb, gc]
}

struct ScanFn {
    dims: ScanDims,
    rule: InputRule,
    states: Vec<f64>,
}

impl Function for ScanFn {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> seld_autodiff::Result<Vec<Option<Tensor>>> {
        let [x, delta, a, b, c] = [inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]];
        let grads = scan_backward(
            x.data(),
            delta.data(),
            a.data(),
            b.data(),
            c.data(),
            &self.states,
            grad.data(),
            self.dims,
            self.rule,
        );
        let shapes = [x.shape(), delta.shape(), a.shape(), b.shape(), c.shape()];
        grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| Tensor::new(s, g).map(Some))
            .collect()
    }
}

/// Records the scan on the graph. `x`, `delta`: `[B, L, E]`; `a`: `[E, N]`;
/// `b`, `c`: `[B, L, N]`.
pub fn selective_scan(
    g: &mut Graph,
    x: Var,
    delta: Var,
    a: Var,
    b: Var,
    c: Var,
    rule: InputRule,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 3 {
        return Err(invalid(format!("selective_scan: x must be [B, L, E], got {xs:?}")));
    }
    let (batch, len, e) = (xs[0], xs[1], xs[2]);
    let a_shape = g.shape(a).to_vec();
    if a_shape.len() != 2 || a_shape[0] != e {
        return Err(invalid(format!("selective_scan: A {a_shape:?} vs x {xs:?}")));
    }
    let n = a_shape[1];
    if g.shape(delta) != xs.as_slice() || g.shape(b) != [batch, len, n] || g.shape(c) != [batch, len, n] {
        return Err(invalid(format!(
            "selective_scan: delta {:?}, B {:?}, C {:?} incompatible with x {xs:?}, A {a_shape:?}",
            g.shape(delta),
            g.shape(b),
            g.shape(c)
        )));
    }
    let dims = ScanDims {
        batch,
        len,
        channels: e,
        state: n,
    };
    let (y, states) = scan_forward(
        g.value(x).data(),
        g.value(delta).data(),
        g.value(a).data(),
        g.value(b).data(),
        g.value(c).data(),
        dims,
        rule,
        true,
    );
    let out = Tensor::new(&xs, y)?;
    let f = ScanFn {
        dims,
        rule,
        states: states.expect("states requested"),
    };
    Ok(g.custom(Box::new(f), &[x, delta, a, b, c], out)?)
}
