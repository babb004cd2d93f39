//! Raw forward/backward kernels for the heavier primitives. All buffers are
//! row-major; shapes are validated by the graph before these are called.

/// `c[m,n] (+)= a[m,k] * b[k,n]` with optional transposition of either input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover m*k, k*n and m*n elements under the given strides.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dGeom {
    fn pad(&self) -> (isize, isize) {
        ((self.kh / 2) as isize, (self.kw / 2) as isize)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, H*W]` column matrix
/// ("same" zero padding, stride 1).
pub(crate) fn im2col(img: &[f64], g: Conv2dGeom, col: &mut [f64]) {
    let (ph, pw) = g.pad();
    let (h, w) = (g.height as isize, g.width as isize);
    let hw = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * hw..(c + 1) * hw];
        for di in 0..g.kh as isize {
            for dj in 0..g.kw as isize {
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (oi, oj) = (di - ph, dj - pw);
                for i in 0..h {
                    let si = i + oi;
                    let line = &mut dst[(i * w) as usize..((i + 1) * w) as usize];
                    if si < 0 || si >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[(si * w) as usize..((si + 1) * w) as usize];
                    for j in 0..w {
                        let sj = j + oj;
                        line[j as usize] = if sj < 0 || sj >= w { 0.0 } else { src[sj as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
pub(crate) fn col2im(col: &[f64], g: Conv2dGeom, img: &mut [f64]) {
    let (ph, pw) = g.pad();
    let (h, w) = (g.height as isize, g.width as isize);
    let hw = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for di in 0..g.kh as isize {
            for dj in 0..g.kw as isize {
                let src = &col[row * hw..(row + 1) * hw];
                let (oi, oj) = (di - ph, dj - pw);
                for i in 0..h {
                    let si = i + oi;
                    if si < 0 || si >= h {
                        continue;
                    }
                    let line = &src[(i * w) as usize..((i + 1) * w) as usize];
                    let dst = &mut plane[(si * w) as usize..((si + 1) * w) as usize];
                    for j in 0..w {
                        let sj = j + oj;
                        if sj >= 0 && sj < w {
                            dst[sj as usize] += line[j as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub groups: usize,
    pub pad_left: usize,
}

impl Conv1dGeom {
    fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: Conv1dGeom) -> Vec<f64> {
    let (l, k, cin_g, cout_g) = (g.len, g.kernel, g.in_per_group(), g.out_per_group());
    let mut out = vec![0.0; g.batch * g.out_channels * l];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let grp = o / cout_g;
            let dst = &mut out[(b * g.out_channels + o) * l..(b * g.out_channels + o + 1) * l];
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let src = &x[(b * g.in_channels + c) * l..(b * g.in_channels + c + 1) * l];
                for kk in 0..k {
                    let wv = w[(o * cin_g + ci) * k + kk];
                    // out[t] += w * x[t + kk - pad_left]
                    let shift = kk as isize - g.pad_left as isize;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((l as isize - shift).min(l as isize)).max(0) as usize;
                    for t in t0..t1 {
                        dst[t] += wv * src[(t as isize + shift) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad_x, grad_w, grad_bias).
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    grad: &[f64],
    g: Conv1dGeom,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (l, k, cin_g, cout_g) = (g.len, g.kernel, g.in_per_group(), g.out_per_group());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let grp = o / cout_g;
            let go = &grad[(b * g.out_channels + o) * l..(b * g.out_channels + o + 1) * l];
            gb[o] += go.iter().sum::<f64>();
            for ci in 0..cin_g {
                let c = grp * cin_g + ci;
                let xoff = (b * g.in_channels + c) * l;
                for kk in 0..k {
                    let widx = (o * cin_g + ci) * k + kk;
                    let wv = w[widx];
                    let shift = kk as isize - g.pad_left as isize;
                    let t0 = (-shift).max(0) as usize;
                    let t1 = ((l as isize - shift).min(l as isize)).max(0) as usize;
                    let mut acc = 0.0;
                    for t in t0..t1 {
                        let s = xoff + (t as isize + shift) as usize;
                        acc += go[t] * x[s];
                        gx[s] += go[t] * wv;
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Non-overlapping average pooling over the last two axes.
pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for i in 0..h {
            let oi = i / kh;
            for j in 0..w {
                dst[oi * ow + j / kw] += src[i * w + j];
            }
        }
        dst.iter_mut().for_each(|v| *v *= norm);
    }
    out
}

pub(crate) fn avg_pool_backward(grad: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let norm = 1.0 / (kh * kw) as f64;
    let mut gx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i / kh) * ow + j / kw] * norm;
            }
        }
    }
    gx
}
