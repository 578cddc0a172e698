//! Differentiable field sampling and sinusoidal coordinate encodings.
//!
//! Coordinate convention: a (C, H, W) field stores cell (iy, ix) values at
//! continuous centers (ix + 1/2, iy + 1/2), so the field covers (0, 0) ..
//! (W, H). Points are given as rows (x, y) in that continuous frame.

use super::error::{DiffError, DiffResult};
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

struct Tap {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    // 0 when the coordinate was clamped, killing the spatial derivative
    dx_scale: f64,
    dy_scale: f64,
}

fn resolve_tap(
    index: usize,
    ux: f64,
    uy: f64,
    w: usize,
    h: usize,
    border: bool,
) -> DiffResult<Tap> {
    let mut x = ux - 0.5;
    let mut y = uy - 0.5;
    let (mut dx_scale, mut dy_scale) = (1.0, 1.0);
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    if border {
        if x < 0.0 {
            x = 0.0;
            dx_scale = 0.0;
        } else if x > xmax {
            x = xmax;
            dx_scale = 0.0;
        }
        if y < 0.0 {
            y = 0.0;
            dy_scale = 0.0;
        } else if y > ymax {
            y = ymax;
            dy_scale = 0.0;
        }
    } else if x < 0.0 || x > xmax || y < 0.0 || y > ymax {
        return Err(DiffError::OutOfBounds { point_index: index, x: ux, y: uy, width: w, height: h });
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Ok(Tap { x0, y0, x1, y1, wx: x - x0 as f64, wy: y - y0 as f64, dx_scale, dy_scale })
}

impl<R: Real> Tape<R> {
    /// Bilinear interpolation of a (C, H, W) field at n points, yielding
    /// (n, C). Differentiable with respect to the field and the points.
    /// With `border` set, coordinates clamp to the edge cells; otherwise
    /// out-of-range points are an error.
    pub fn bilinear_sample(&mut self, field: Var, points: Var, border: bool) -> DiffResult<Var> {
        let fs = self.value(field).shape().to_vec();
        let ps = self.value(points).shape().to_vec();
        if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(DiffError::ShapeMismatch { op: "bilinear_sample", lhs: fs, rhs: ps });
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let plane = h * w;
        let mut taps = Vec::with_capacity(n);
        for i in 0..n {
            let ux = self.value(points).data()[2 * i].to_f64();
            let uy = self.value(points).data()[2 * i + 1].to_f64();
            taps.push(resolve_tap(i, ux, uy, w, h, border)?);
        }
        let mut out = Tensor::zeros(&[n, c]);
        {
            let fd = self.value(field).data();
            let od = out.data_mut();
            for (i, t) in taps.iter().enumerate() {
                let (w00, w01, w10, w11) = tap_weights::<R>(t);
                let b00 = t.y0 * w + t.x0;
                let b01 = t.y0 * w + t.x1;
                let b10 = t.y1 * w + t.x0;
                let b11 = t.y1 * w + t.x1;
                for ch in 0..c {
                    let base = ch * plane;
                    od[i * c + ch] = w00 * fd[base + b00]
                        + w01 * fd[base + b01]
                        + w10 * fd[base + b10]
                        + w11 * fd[base + b11];
                }
            }
        }
        Ok(self.push_op(out, &[field, points], move |_, g, sink| {
            let fv = sink.val(field);
            {
                let gf = sink.grad_mut(field).data_mut();
                for (i, t) in taps.iter().enumerate() {
                    let (w00, w01, w10, w11) = tap_weights::<R>(t);
                    let b00 = t.y0 * w + t.x0;
                    let b01 = t.y0 * w + t.x1;
                    let b10 = t.y1 * w + t.x0;
                    let b11 = t.y1 * w + t.x1;
                    for ch in 0..c {
                        let gv = g.data()[i * c + ch];
                        let base = ch * plane;
                        gf[base + b00] += gv * w00;
                        gf[base + b01] += gv * w01;
                        gf[base + b10] += gv * w10;
                        gf[base + b11] += gv * w11;
                    }
                }
            }
            let gp = sink.grad_mut(points).data_mut();
            for (i, t) in taps.iter().enumerate() {
                let wy = R::from_f64(t.wy);
                let wx = R::from_f64(t.wx);
                let mut dx = R::ZERO;
                let mut dy = R::ZERO;
                let b00 = t.y0 * w + t.x0;
                let b01 = t.y0 * w + t.x1;
                let b10 = t.y1 * w + t.x0;
                let b11 = t.y1 * w + t.x1;
                for ch in 0..c {
                    let gv = g.data()[i * c + ch];
                    let base = ch * plane;
                    let f00 = fv.data()[base + b00];
                    let f01 = fv.data()[base + b01];
                    let f10 = fv.data()[base + b10];
                    let f11 = fv.data()[base + b11];
                    dx += gv * ((R::ONE - wy) * (f01 - f00) + wy * (f11 - f10));
                    dy += gv * ((R::ONE - wx) * (f10 - f00) + wx * (f11 - f01));
                }
                gp[2 * i] += dx * R::from_f64(t.dx_scale);
                gp[2 * i + 1] += dy * R::from_f64(t.dy_scale);
            }
        }))
    }

    /// `bilinear_sample` for channel-last (H, W, C) fields: the layout used
    /// by the feature pyramid so each tap reads C contiguous scalars.
    pub fn bilinear_sample_hwc(&mut self, field: Var, points: Var, border: bool) -> DiffResult<Var> {
        let fs = self.value(field).shape().to_vec();
        let ps = self.value(points).shape().to_vec();
        if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
            return Err(DiffError::ShapeMismatch { op: "bilinear_sample_hwc", lhs: fs, rhs: ps });
        }
        let (h, w, c) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let mut taps = Vec::with_capacity(n);
        for i in 0..n {
            let ux = self.value(points).data()[2 * i].to_f64();
            let uy = self.value(points).data()[2 * i + 1].to_f64();
            taps.push(resolve_tap(i, ux, uy, w, h, border)?);
        }
        let mut out = Tensor::zeros(&[n, c]);
        {
            let fd = self.value(field).data();
            let od = out.data_mut();
            for (i, t) in taps.iter().enumerate() {
                let (w00, w01, w10, w11) = tap_weights::<R>(t);
                let r00 = (t.y0 * w + t.x0) * c;
                let r01 = (t.y0 * w + t.x1) * c;
                let r10 = (t.y1 * w + t.x0) * c;
                let r11 = (t.y1 * w + t.x1) * c;
                let dst = &mut od[i * c..(i + 1) * c];
                for ch in 0..c {
                    dst[ch] = w00 * fd[r00 + ch]
                        + w01 * fd[r01 + ch]
                        + w10 * fd[r10 + ch]
                        + w11 * fd[r11 + ch];
                }
            }
        }
        Ok(self.push_op(out, &[field, points], move |_, g, sink| {
            let fv = sink.val(field);
            {
                let gf = sink.grad_mut(field).data_mut();
                for (i, t) in taps.iter().enumerate() {
                    let (w00, w01, w10, w11) = tap_weights::<R>(t);
                    let r00 = (t.y0 * w + t.x0) * c;
                    let r01 = (t.y0 * w + t.x1) * c;
                    let r10 = (t.y1 * w + t.x0) * c;
                    let r11 = (t.y1 * w + t.x1) * c;
                    let grow = &g.data()[i * c..(i + 1) * c];
                    for ch in 0..c {
                        let gv = grow[ch];
                        gf[r00 + ch] += gv * w00;
                        gf[r01 + ch] += gv * w01;
                        gf[r10 + ch] += gv * w10;
                        gf[r11 + ch] += gv * w11;
                    }
                }
            }
            let gp = sink.grad_mut(points).data_mut();
            for (i, t) in taps.iter().enumerate() {
                let wy = R::from_f64(t.wy);
                let wx = R::from_f64(t.wx);
                let mut dx = R::ZERO;
                let mut dy = R::ZERO;
                let r00 = (t.y0 * w + t.x0) * c;
                let r01 = (t.y0 * w + t.x1) * c;
                let r10 = (t.y1 * w + t.x0) * c;
                let r11 = (t.y1 * w + t.x1) * c;
                let grow = &g.data()[i * c..(i + 1) * c];
                for ch in 0..c {
                    let gv = grow[ch];
                    let f00 = fv.data()[r00 + ch];
                    let f01 = fv.data()[r01 + ch];
                    let f10 = fv.data()[r10 + ch];
                    let f11 = fv.data()[r11 + ch];
                    dx += gv * ((R::ONE - wy) * (f01 - f00) + wy * (f11 - f10));
                    dy += gv * ((R::ONE - wx) * (f10 - f00) + wx * (f11 - f01));
                }
                gp[2 * i] += dx * R::from_f64(t.dx_scale);
                gp[2 * i + 1] += dy * R::from_f64(t.dy_scale);
            }
        }))
    }

    /// Sinusoidal encoding: each input coordinate v maps to
    /// (sin f₀v, cos f₀v, sin f₁v, ...) per frequency, coordinates
    /// concatenated. Output is (n, cols·2·freqs.len()).
    pub fn sincos_encode(&mut self, x: Var, freqs: &[f64]) -> DiffResult<Var> {
        let (n, cols) = self.value(x).dims2();
        if freqs.is_empty() {
            return Err(DiffError::InvalidConfig { op: "sincos_encode", message: "no frequencies".into() });
        }
        let fcount = freqs.len();
        let width = cols * 2 * fcount;
        let freqs_r: Vec<R> = freqs.iter().map(|&f| R::from_f64(f)).collect();
        let mut data = vec![R::ZERO; n * width];
        {
            let xd = self.value(x).data();
            for i in 0..n {
                for j in 0..cols {
                    let v = xd[i * cols + j];
                    for (k, &f) in freqs_r.iter().enumerate() {
                        let idx = i * width + j * 2 * fcount + 2 * k;
                        data[idx] = (f * v).sin();
                        data[idx + 1] = (f * v).cos();
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, width], data)?;
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let xv = sink.val(x);
            let gx = sink.grad_mut(x).data_mut();
            for i in 0..n {
                for j in 0..cols {
                    let v = xv.data()[i * cols + j];
                    let mut acc = R::ZERO;
                    for (k, &f) in freqs_r.iter().enumerate() {
                        let idx = i * width + j * 2 * fcount + 2 * k;
                        acc += g.data()[idx] * f * (f * v).cos();
                        acc -= g.data()[idx + 1] * f * (f * v).sin();
                    }
                    gx[i * cols + j] += acc;
                }
            }
        }))
    }
}

fn tap_weights<R: Real>(t: &Tap) -> (R, R, R, R) {
    let wx = R::from_f64(t.wx);
    let wy = R::from_f64(t.wy);
    let one = R::ONE;
    (
        (one - wy) * (one - wx),
        (one - wy) * wx,
        wy * (one - wx),
        wy * wx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_at_cell_center_returns_cell_value() {
        let mut tape = Tape::<f64>::new();
        let field = tape.leaf(
            Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        // cell (iy=1, ix=2) has center (2.5, 1.5)
        let pts = tape.leaf(Tensor::from_vec(&[1, 2], vec![2.5, 1.5]).unwrap(), false);
        let y = tape.bilinear_sample(field, pts, false).unwrap();
        assert_eq!(tape.value(y).data()[0], 6.0);
    }

    #[test]
    fn constant_field_constant_output_zero_point_grad() {
        let mut tape = Tape::<f64>::new();
        let field = tape.leaf(Tensor::full(&[2, 4, 4], 3.25), false);
        let pts = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.3, 2.7, 3.1, 0.9]).unwrap(), true);
        let y = tape.bilinear_sample(field, pts, true).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 3.25);
        }
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        for &gv in tape.grad(pts).unwrap().data() {
            assert_eq!(gv, 0.0);
        }
    }

    #[test]
    fn out_of_range_without_border_is_error() {
        let mut tape = Tape::<f64>::new();
        let field = tape.leaf(Tensor::zeros(&[1, 4, 4]), false);
        let pts = tape.leaf(Tensor::from_vec(&[1, 2], vec![-1.0, 2.0]).unwrap(), false);
        match tape.bilinear_sample(field, pts, false) {
            Err(DiffError::OutOfBounds { point_index, .. }) => assert_eq!(point_index, 0),
            other => panic!("expected out-of-bounds, got {other:?}"),
        }
    }

    #[test]
    fn border_padding_is_continuous_at_boundary() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64) * 0.7 - 3.0).collect();
        let field = tape.leaf(Tensor::from_vec(&[1, 4, 4], data).unwrap(), false);
        let eps = 1e-6;
        let pts = tape.leaf(
            Tensor::from_vec(&[2, 2], vec![0.0, 2.0, -eps, 2.0]).unwrap(),
            false,
        );
        let y = tape.bilinear_sample(field, pts, true).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - d[1]).abs() <= eps, "boundary discontinuity: {} vs {}", d[0], d[1]);
    }

    #[test]
    fn sincos_width_and_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap(), false);
        let e = tape.sincos_encode(x, &[1.0, 2.0]).unwrap();
        assert_eq!(tape.value(e).shape(), &[1, 8]);
        let d = tape.value(e).data();
        assert_eq!(d[0], 0.0); // sin(0)
        assert_eq!(d[1], 1.0); // cos(0)
        assert!((d[4] - 1.0f64.sin()).abs() < 1e-15);
        assert!((d[7] - 2.0f64.cos()).abs() < 1e-15);
    }
}
