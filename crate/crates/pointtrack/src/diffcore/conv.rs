//! Convolution and pooling over single (C, H, W) images. Implemented as
//! im2col + gemm; the column buffer is rebuilt in the backward closure
//! rather than saved.

use super::error::{DiffError, DiffResult};
use super::kernels::gemm;
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// How out-of-image taps are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zeros,
    /// Clamp reads to the nearest edge cell. Keeps constant inputs exactly
    /// constant through convolutions.
    Replicate,
    /// Cyclic reads. Makes the layer exactly equivariant to cyclic shifts.
    Wrap,
}

/// Output extent of a filter layer: floor((in + 2p - f)/s) + 1.
pub fn conv_out_extent(input: usize, f: usize, s: usize, p: usize) -> Option<usize> {
    let padded = input + 2 * p;
    if padded < f {
        return None;
    }
    Some((padded - f) / s + 1)
}

#[inline]
fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

#[inline]
fn resolve_pad(v: isize, n: usize, mode: PadMode) -> Option<usize> {
    if v >= 0 && v < n as isize {
        return Some(v as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Replicate => Some(clamp_idx(v, n)),
        PadMode::Wrap => Some(v.rem_euclid(n as isize) as usize),
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    c_in: usize,
    h: usize,
    w: usize,
    f: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    mode: PadMode,
) -> Vec<R> {
    let mut cols = vec![R::ZERO; c_in * f * f * oh * ow];
    let plane = oh * ow;
    for c in 0..c_in {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for fy in 0..f {
            for fx in 0..f {
                let row = ((c * f + fy) * f + fx) * plane;
                for oy in 0..oh {
                    let iy = (oy * s + fy) as isize - p as isize;
                    let Some(sy) = resolve_pad(iy, h, mode) else { continue };
                    let src_row = sy * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * s + fx) as isize - p as isize;
                        if let Some(sx) = resolve_pad(ix, w, mode) {
                            cols[dst_row + ox] = xc[src_row + sx];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im_acc<R: Real>(
    cols: &[R],
    gx: &mut [R],
    c_in: usize,
    h: usize,
    w: usize,
    f: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    mode: PadMode,
) {
    let plane = oh * ow;
    for c in 0..c_in {
        let gxc = &mut gx[c * h * w..(c + 1) * h * w];
        for fy in 0..f {
            for fx in 0..f {
                let row = ((c * f + fy) * f + fx) * plane;
                for oy in 0..oh {
                    let iy = (oy * s + fy) as isize - p as isize;
                    let Some(sy) = resolve_pad(iy, h, mode) else { continue };
                    let dst_row = sy * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * s + fx) as isize - p as isize;
                        if let Some(sx) = resolve_pad(ix, w, mode) {
                            gxc[dst_row + sx] += cols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<R: Real> Tape<R> {
    /// 2D cross-correlation of a (C_in, H, W) input with (C_out, C_in, F, F)
    /// weights, zero padding. Odd filter sizes only.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> DiffResult<Var> {
        self.conv2d_with(x, w, bias, stride, padding, PadMode::Zeros)
    }

    /// `conv2d` with an explicit padding mode.
    pub fn conv2d_with(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        mode: PadMode,
    ) -> DiffResult<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        let (c_in, h, wid) = (xs[0], xs[1], xs[2]);
        let (c_out, wc_in, f, f2) = (ws[0], ws[1], ws[2], ws[3]);
        if wc_in != c_in || f != f2 {
            return Err(DiffError::ShapeMismatch { op: "conv2d", lhs: xs, rhs: ws });
        }
        if f % 2 == 0 {
            return Err(DiffError::InvalidConfig {
                op: "conv2d",
                message: format!("filter size {f} must be odd"),
            });
        }
        if stride == 0 {
            return Err(DiffError::InvalidConfig { op: "conv2d", message: "stride must be positive".into() });
        }
        let (oh, ow) = match (
            conv_out_extent(h, f, stride, padding),
            conv_out_extent(wid, f, stride, padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(DiffError::InvalidConfig {
                    op: "conv2d",
                    message: format!(
                        "non-positive output extent for input {h}x{wid}, F={f}, S={stride}, P={padding}"
                    ),
                })
            }
        };
        if let Some(b) = bias {
            if self.value(b).numel() != c_out {
                return Err(DiffError::ShapeMismatch {
                    op: "conv2d",
                    lhs: vec![c_out],
                    rhs: self.value(b).shape().to_vec(),
                });
            }
        }

        let kdim = c_in * f * f;
        let plane = oh * ow;
        let cols = im2col(self.value(x).data(), c_in, h, wid, f, stride, padding, oh, ow, mode);
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        gemm(out.data_mut(), c_out, plane, kdim, self.value(w).data(), false, &cols, false, R::ONE, R::ZERO);
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for (ch, row) in out.data_mut().chunks_mut(plane).enumerate() {
                for o in row.iter_mut() {
                    *o += bd[ch];
                }
            }
        }
        let parents: Vec<Var> = match bias {
            Some(b) => vec![x, w, b],
            None => vec![x, w],
        };
        Ok(self.push_op(out, &parents, move |_, g, sink| {
            let xv = sink.val(x);
            let wv = sink.val(w);
            let cols = im2col(xv.data(), c_in, h, wid, f, stride, padding, oh, ow, mode);
            // dW += g · colsᵀ
            gemm(sink.grad_mut(w).data_mut(), c_out, kdim, plane, g.data(), false, &cols, true, R::ONE, R::ONE);
            // dcols = Wᵀ · g, scattered back to the input
            let mut dcols = vec![R::ZERO; kdim * plane];
            gemm(&mut dcols, kdim, plane, c_out, wv.data(), true, g.data(), false, R::ONE, R::ZERO);
            col2im_acc(&dcols, sink.grad_mut(x).data_mut(), c_in, h, wid, f, stride, padding, oh, ow, mode);
            if let Some(b) = bias {
                let gb = sink.grad_mut(b).data_mut();
                for (ch, row) in g.data().chunks(plane).enumerate() {
                    let mut s = R::ZERO;
                    for &v in row {
                        s += v;
                    }
                    gb[ch] += s;
                }
            }
        }))
    }

    /// Transpose (C, H, W) into channel-last (H, W, C) for cache-friendly
    /// point sampling.
    pub fn chw_to_hwc(&mut self, x: Var) -> DiffResult<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(DiffError::InvalidConfig {
                op: "chw_to_hwc",
                message: format!("expected (C, H, W), got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let plane = h * w;
        let mut data = vec![R::ZERO; c * plane];
        {
            let xd = self.value(x).data();
            for ch in 0..c {
                for s in 0..plane {
                    data[s * c + ch] = xd[ch * plane + s];
                }
            }
        }
        let out = Tensor::from_vec(&[h, w, c], data)?;
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let gx = sink.grad_mut(x).data_mut();
            for ch in 0..c {
                for s in 0..plane {
                    gx[ch * plane + s] += g.data()[s * c + ch];
                }
            }
        }))
    }

    /// 2×2 average pooling of a channel-last (H, W, C) tensor.
    pub fn avg_pool2_hwc(&mut self, x: Var) -> DiffResult<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(DiffError::InvalidConfig {
                op: "avg_pool2_hwc",
                message: format!("expected (H, W, C), got {xs:?}"),
            });
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::InvalidConfig {
                op: "avg_pool2_hwc",
                message: format!("extents {h}x{w} must be even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = R::from_f64(0.25);
        let mut out = Tensor::zeros(&[oh, ow, c]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for oy in 0..oh {
                for ox in 0..ow {
                    let r00 = ((2 * oy) * w + 2 * ox) * c;
                    let r01 = r00 + c;
                    let r10 = r00 + w * c;
                    let r11 = r10 + c;
                    let dst = (oy * ow + ox) * c;
                    for ch in 0..c {
                        od[dst + ch] =
                            (xd[r00 + ch] + xd[r01 + ch] + xd[r10 + ch] + xd[r11 + ch]) * quarter;
                    }
                }
            }
        }
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let gx = sink.grad_mut(x).data_mut();
            for oy in 0..oh {
                for ox in 0..ow {
                    let r00 = ((2 * oy) * w + 2 * ox) * c;
                    let r01 = r00 + c;
                    let r10 = r00 + w * c;
                    let r11 = r10 + c;
                    let src = (oy * ow + ox) * c;
                    for ch in 0..c {
                        let gv = g.data()[src + ch] * quarter;
                        gx[r00 + ch] += gv;
                        gx[r01 + ch] += gv;
                        gx[r10 + ch] += gv;
                        gx[r11 + ch] += gv;
                    }
                }
            }
        }))
    }

    /// 2×2 average pooling with stride 2; extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> DiffResult<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(DiffError::InvalidConfig {
                op: "avg_pool2",
                message: format!("expected (C, H, W), got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::InvalidConfig {
                op: "avg_pool2",
                message: format!("extents {h}x{w} must be even"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = R::from_f64(0.25);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        {
            let xd = self.value(x).data();
            let od = out.data_mut();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = ch * h * w + 2 * oy * w + 2 * ox;
                        od[ch * oh * ow + oy * ow + ox] =
                            (xd[base] + xd[base + 1] + xd[base + w] + xd[base + w + 1]) * quarter;
                    }
                }
            }
        }
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let gx = sink.grad_mut(x).data_mut();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.data()[ch * oh * ow + oy * ow + ox] * quarter;
                        let base = ch * h * w + 2 * oy * w + 2 * ox;
                        gx[base] += gv;
                        gx[base + 1] += gv;
                        gx[base + w] += gv;
                        gx[base + w + 1] += gv;
                    }
                }
            }
        }))
    }
}
