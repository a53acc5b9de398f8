//! Forward and backward kernels for the parameterised and pooling layers.
//!
//! Feature maps are `[C, H, W]` row-major. Convolution weights are
//! `[out, in, k, k]`; fully-connected weights are `[out, in]`.

use crate::tensor::{Real, Tensor};

pub(crate) struct Window {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Input coordinate range covered by output position `o` along one axis,
    /// clipped to `[0, extent)`.
    #[inline]
    fn span(&self, o: usize, extent: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let end = start + self.kernel as isize;
        (start.max(0) as usize, (end.max(0) as usize).min(extent))
    }
}

pub(crate) fn conv_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    win: &Window,
) -> Tensor<T> {
    let (c_in, h, w) = dims3(input);
    let c_out = weight.shape()[0];
    let k = win.kernel;
    let (oh, ow) = (win.out_h, win.out_w);
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    for o in 0..c_out {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for c in 0..c_in {
            let xin = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[((o * c_in + c) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *ov = *ov + wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out).expect("conv output shape")
}

/// Returns `(input_grad, weight_grad, bias_grad)`.
pub(crate) fn conv_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    win: &Window,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c_in, h, w) = dims3(input);
    let c_out = weight.shape()[0];
    let k = win.kernel;
    let (oh, ow) = (win.out_h, win.out_w);
    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wt.len()];
    let mut gb = vec![T::zero(); c_out];
    for o in 0..c_out {
        let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
        gb[o] = gplane.iter().fold(T::zero(), |a, &v| a + v);
        for c in 0..c_in {
            let base = c * h * w;
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * c_in + c) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let rbase = base + iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let gv = gplane[oy * ow + ox];
                            acc = acc + gv * x[rbase + ix as usize];
                            gx[rbase + ix as usize] = gx[rbase + ix as usize] + gv * wv;
                        }
                    }
                    gw[widx] = acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).unwrap(),
        Tensor::new(weight.shape().to_vec(), gw).unwrap(),
        Tensor::from_vec(gb),
    )
}

/// Max pooling; also returns the flat input index selected by each output.
/// Ties resolve to the first maximum in row-major scan order.
pub(crate) fn maxpool_forward<T: Real>(input: &Tensor<T>, win: &Window) -> (Tensor<T>, Vec<usize>) {
    let (c, h, w) = dims3(input);
    let (oh, ow) = (win.out_h, win.out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1) = win.span(oy, h);
            for ox in 0..ow {
                let (x0, x1) = win.span(ox, w);
                let mut best = base + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = base + iy * w + ix;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (Tensor::new(vec![c, oh, ow], out).unwrap(), argmax)
}

pub(crate) fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] = d[idx] + g;
    }
    gx
}

/// Average pooling over the in-bounds part of each window.
pub(crate) fn avgpool_forward<T: Real>(input: &Tensor<T>, win: &Window) -> Tensor<T> {
    let (c, h, w) = dims3(input);
    let (oh, ow) = (win.out_h, win.out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1) = win.span(oy, h);
            for ox in 0..ow {
                let (x0, x1) = win.span(ox, w);
                let mut sum = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        sum = sum + x[base + iy * w + ix];
                    }
                }
                let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                out.push(sum / count);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out).unwrap()
}

pub(crate) fn avgpool_backward<T: Real>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    win: &Window,
) -> Tensor<T> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (win.out_h, win.out_w);
    let g = grad_out.data();
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            let (y0, y1) = win.span(oy, h);
            for ox in 0..ow {
                let (x0, x1) = win.span(ox, w);
                let share = g[(ch * oh + oy) * ow + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        d[base + iy * w + ix] = d[base + iy * w + ix] + share;
                    }
                }
            }
        }
    }
    gx
}

pub(crate) fn fc_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let n_out = weight.shape()[0];
    let n_in = weight.shape()[1];
    let x = input.data();
    let out = (0..n_out)
        .map(|o| {
            let row = &weight.data()[o * n_in..(o + 1) * n_in];
            row.iter()
                .zip(x)
                .fold(bias.data()[o], |acc, (&a, &b)| acc + a * b)
        })
        .collect();
    Tensor::from_vec(out)
}

pub(crate) fn fc_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n_out = weight.shape()[0];
    let n_in = weight.shape()[1];
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n_in];
    let mut gw = vec![T::zero(); n_out * n_in];
    for o in 0..n_out {
        let row = &weight.data()[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] = g[o] * x[i];
            gx[i] = gx[i] + g[o] * row[i];
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gx).unwrap(),
        Tensor::new(weight.shape().to_vec(), gw).unwrap(),
        Tensor::from_vec(g.to_vec()),
    )
}

fn dims3<T: Real>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}
