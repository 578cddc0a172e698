//! Multi-scale correlation features: inner products between per-track
//! appearance vectors and pyramid features sampled on an offset grid around
//! the current position estimates.
//!
//! Fused into one tape op per window iteration. Taps are cheap to rebuild,
//! so the backward closure recomputes them instead of saving per-offset
//! state.

use crate::coordmap::CoordMap;
use crate::diffcore::{DiffError, DiffResult, Real, Tape, Tensor, Var};
use crate::encoder::{Encoder, FeaturePyramid};

/// Offset grid and scale count: output width is (2Δ+1)²·S.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct CorrelationSpec {
    pub scales: usize,
    pub radius: usize,
}

impl CorrelationSpec {
    pub fn width(&self) -> usize {
        let side = 2 * self.radius + 1;
        side * side * self.scales
    }
}

/// Affine conversion from image continuous coordinates to one pyramid
/// level's continuous coordinates: u_s = scale·u₀ + offset.
#[derive(Clone, Copy, Debug)]
pub struct LevelConvert {
    pub scale: f64,
    pub offset: f64,
}

impl LevelConvert {
    fn from_map(map: CoordMap<f64>) -> Self {
        let inv = map.invert();
        LevelConvert { scale: inv.alpha, offset: inv.apply_continuous(0.0) }
    }

    /// Exact conversion from the declared encoder chain for a 1-based level.
    pub fn exact(encoder: &Encoder, level: usize) -> Self {
        Self::from_map(encoder.level_map(level))
    }

    /// The shorthand u_s = u₀/(k·2^(s−1)), which ignores the pooling
    /// offsets the exact chain carries.
    pub fn shorthand(stride: usize, level: usize) -> Self {
        LevelConvert { scale: 1.0 / (stride << (level - 1)) as f64, offset: 0.0 }
    }

    /// Conversion table for all S levels.
    pub fn table(encoder: &Encoder, scales: usize, shorthand: bool) -> Vec<LevelConvert> {
        (1..=scales)
            .map(|s| {
                if shorthand {
                    Self::shorthand(encoder.config().stride(), s)
                } else {
                    Self::exact(encoder, s)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct Tap {
    r00: usize,
    r01: usize,
    r10: usize,
    r11: usize,
    wx: f64,
    wy: f64,
    clamped_x: bool,
    clamped_y: bool,
}

/// Border-clamped bilinear tap on an (h, w) grid at continuous (ux, uy).
/// `center_shift` is 1/2 in the default pixel/not-aligned convention and 0
/// in the aligned alternative.
fn tap(ux: f64, uy: f64, h: usize, w: usize, c: usize, center_shift: f64) -> Tap {
    let xmax = (w - 1) as f64;
    let ymax = (h - 1) as f64;
    let mut x = ux - center_shift;
    let mut y = uy - center_shift;
    let mut clamped_x = false;
    let mut clamped_y = false;
    if x < 0.0 {
        x = 0.0;
        clamped_x = true;
    } else if x > xmax {
        x = xmax;
        clamped_x = true;
    }
    if y < 0.0 {
        y = 0.0;
        clamped_y = true;
    } else if y > ymax {
        y = ymax;
        clamped_y = true;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Tap {
        r00: (y0 * w + x0) * c,
        r01: (y0 * w + x1) * c,
        r10: (y1 * w + x0) * c,
        r11: (y1 * w + x1) * c,
        wx: x - x0 as f64,
        wy: y - y0 as f64,
        clamped_x,
        clamped_y,
    }
}

/// Correlation features for a whole window.
///
/// `q` and `p` are (N·T, d) and (N·T, 2) with the frame index fastest;
/// `pyramids[t]` supplies that frame's feature levels. Positions are image
/// continuous coordinates; conversion to each level goes through `levels`.
/// Output is (N·T, (2Δ+1)²·S), scale-major then row-major over offsets.
pub fn correlate<R: Real>(
    tape: &mut Tape<R>,
    pyramids: &[FeaturePyramid],
    q: Var,
    p: Var,
    spec: CorrelationSpec,
    levels: &[LevelConvert],
    center_shift: f64,
) -> DiffResult<Var> {
    let t_len = pyramids.len();
    if t_len == 0 {
        return Err(DiffError::InvalidConfig { op: "correlate", message: "no frames".into() });
    }
    let (rows, d) = tape.value(q).dims2();
    let (prow, two) = tape.value(p).dims2();
    if prow != rows || two != 2 || rows % t_len != 0 {
        return Err(DiffError::ShapeMismatch {
            op: "correlate",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(p).shape().to_vec(),
        });
    }
    if levels.len() != spec.scales {
        return Err(DiffError::InvalidConfig {
            op: "correlate",
            message: format!("{} level converts for {} scales", levels.len(), spec.scales),
        });
    }
    for pyr in pyramids {
        if pyr.levels.len() < spec.scales {
            return Err(DiffError::InvalidConfig {
                op: "correlate",
                message: format!("pyramid has {} levels, need {}", pyr.levels.len(), spec.scales),
            });
        }
        for &l in &pyr.levels[..spec.scales] {
            if tape.value(l).shape()[2] != d {
                return Err(DiffError::ShapeMismatch {
                    op: "correlate",
                    lhs: tape.value(l).shape().to_vec(),
                    rhs: vec![rows, d],
                });
            }
        }
    }

    let side = 2 * spec.radius + 1;
    let width = spec.width();
    let radius = spec.radius as isize;
    // (var, h, w) per (frame, scale)
    let mut level_info = Vec::with_capacity(t_len * spec.scales);
    for pyr in pyramids {
        for &l in &pyr.levels[..spec.scales] {
            let sh = tape.value(l).shape();
            level_info.push((l, sh[0], sh[1]));
        }
    }
    let levels_conv = levels.to_vec();

    let mut out = Tensor::zeros(&[rows, width]);
    {
        let od = out.data_mut();
        for r in 0..rows {
            let frame = r % t_len;
            let qrow = &tape.value(q).data()[r * d..(r + 1) * d];
            let px = tape.value(p).data()[2 * r].to_f64();
            let py = tape.value(p).data()[2 * r + 1].to_f64();
            for s in 0..spec.scales {
                let (lvar, h, w) = level_info[frame * spec.scales + s];
                let fd = tape.value(lvar).data();
                let conv = levels_conv[s];
                let ux = conv.scale * px + conv.offset;
                let uy = conv.scale * py + conv.offset;
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let t = tap(ux + dx as f64, uy + dy as f64, h, w, d, center_shift);
                        let (w00, w01, w10, w11) = weights::<R>(&t);
                        let mut acc = R::ZERO;
                        for ch in 0..d {
                            let interp = w00 * fd[t.r00 + ch]
                                + w01 * fd[t.r01 + ch]
                                + w10 * fd[t.r10 + ch]
                                + w11 * fd[t.r11 + ch];
                            acc += qrow[ch] * interp;
                        }
                        let col = s * side * side
                            + ((dy + radius) as usize) * side
                            + (dx + radius) as usize;
                        od[r * width + col] = acc;
                    }
                }
            }
        }
    }

    let mut parents: Vec<Var> = level_info.iter().map(|&(v, _, _)| v).collect();
    parents.push(q);
    parents.push(p);
    let scales = spec.scales;
    Ok(tape.push_op(out, &parents, move |_, g, sink| {
        let qv = sink.val(q);
        let pv = sink.val(p);
        // feature and q gradients share the tap loop; p gradient rides along
        for r in 0..rows {
            let frame = r % t_len;
            let qrow = &qv.data()[r * d..(r + 1) * d];
            let px = pv.data()[2 * r].to_f64();
            let py = pv.data()[2 * r + 1].to_f64();
            let mut dpx = R::ZERO;
            let mut dpy = R::ZERO;
            let mut dq = vec![R::ZERO; d];
            for s in 0..scales {
                let (lvar, h, w) = level_info[frame * scales + s];
                let conv = levels_conv[s];
                let ux = conv.scale * px + conv.offset;
                let uy = conv.scale * py + conv.offset;
                let fv = sink.val(lvar);
                let fd = fv.data();
                let gl = sink.grad_mut(lvar).data_mut();
                let scale_r = R::from_f64(conv.scale);
                for dy in -radius..=radius {
                    for dx in -radius..=radius {
                        let col = s * side * side
                            + ((dy + radius) as usize) * side
                            + (dx + radius) as usize;
                        let gv = g.data()[r * width + col];
                        if gv == R::ZERO {
                            continue;
                        }
                        let t = tap(ux + dx as f64, uy + dy as f64, h, w, d, center_shift);
                        let (w00, w01, w10, w11) = weights::<R>(&t);
                        let wxr = R::from_f64(t.wx);
                        let wyr = R::from_f64(t.wy);
                        let mut ddx = R::ZERO;
                        let mut ddy = R::ZERO;
                        for ch in 0..d {
                            let f00 = fd[t.r00 + ch];
                            let f01 = fd[t.r01 + ch];
                            let f10 = fd[t.r10 + ch];
                            let f11 = fd[t.r11 + ch];
                            let qc = qrow[ch];
                            dq[ch] += gv
                                * (w00 * f00 + w01 * f01 + w10 * f10 + w11 * f11);
                            let gq = gv * qc;
                            gl[t.r00 + ch] += gq * w00;
                            gl[t.r01 + ch] += gq * w01;
                            gl[t.r10 + ch] += gq * w10;
                            gl[t.r11 + ch] += gq * w11;
                            ddx += gq * ((R::ONE - wyr) * (f01 - f00) + wyr * (f11 - f10));
                            ddy += gq * ((R::ONE - wxr) * (f10 - f00) + wxr * (f11 - f01));
                        }
                        if !t.clamped_x {
                            dpx += ddx * scale_r;
                        }
                        if !t.clamped_y {
                            dpy += ddy * scale_r;
                        }
                    }
                }
            }
            {
                let gq = sink.grad_mut(q).data_mut();
                for ch in 0..d {
                    gq[r * d + ch] += dq[ch];
                }
            }
            let gp = sink.grad_mut(p).data_mut();
            gp[2 * r] += dpx;
            gp[2 * r + 1] += dpy;
        }
    }))
}

fn weights<R: Real>(t: &Tap) -> (R, R, R, R) {
    let wx = R::from_f64(t.wx);
    let wy = R::from_f64(t.wy);
    (
        (R::ONE - wy) * (R::ONE - wx),
        (R::ONE - wy) * wx,
        wy * (R::ONE - wx),
        wy * wx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{init, Mounted, ParamSet};
    use crate::encoder::EncoderConfig;

    fn toy_setup<R: Real>(scales: usize) -> (Encoder, ParamSet<R>) {
        let mut params = ParamSet::new();
        let mut rng = init::seeded_rng(5);
        let enc = Encoder::new(EncoderConfig::toy(32, scales), &mut params, &mut rng).unwrap();
        (enc, params)
    }

    #[test]
    fn paper_scale_width_is_196() {
        assert_eq!(CorrelationSpec { scales: 4, radius: 3 }.width(), 196);
        assert_eq!(CorrelationSpec { scales: 2, radius: 1 }.width(), 18);
    }

    #[test]
    fn exact_level_conversion_matches_to_input_coords_roundtrip() {
        let (enc, _) = toy_setup::<f32>(4);
        for level in 1..=4 {
            let conv = LevelConvert::exact(&enc, level);
            let map = enc.level_map(level);
            for i in [0.0f64, 1.0, 3.5, 7.25] {
                let u0 = map.apply_continuous(i + 0.5);
                let back = conv.scale * u0 + conv.offset;
                assert!((back - (i + 0.5)).abs() < 1e-9, "level {level}: {back} vs {}", i + 0.5);
            }
        }
    }

    #[test]
    fn single_scale_zero_radius_on_constant_field_gives_dot() {
        // constant feature field: correlation = <Q, f> regardless of position
        let mut tape = Tape::<f64>::new();
        let d = 8;
        let field_val = 0.5;
        let field = tape.leaf(Tensor::full(&[8, 8, d], field_val), false);
        let pyr = FeaturePyramid { levels: vec![field], frame_index: 0 };
        let qdata: Vec<f64> = (0..d).map(|i| i as f64 * 0.1).collect();
        let q = tape.leaf(Tensor::from_vec(&[1, d], qdata.clone()).unwrap(), false);
        let p = tape.leaf(Tensor::from_vec(&[1, 2], vec![12.0, 9.0]).unwrap(), false);
        let spec = CorrelationSpec { scales: 1, radius: 0 };
        let levels = [LevelConvert { scale: 0.25, offset: 0.375 }];
        let c = correlate(&mut tape, &[pyr], q, p, spec, &levels, 0.5).unwrap();
        let want: f64 = qdata.iter().map(|v| v * field_val).sum();
        assert!((tape.value(c).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn matches_naive_loop_oracle() {
        // toy S=2, Δ=1 -> width 18, against a per-offset bilinear_sample_hwc loop
        let (enc, params) = toy_setup::<f32>(2);
        let mut tape = Tape::<f32>::new();
        let mut mounted = Mounted::new(&params);
        let mut rng = init::seeded_rng(21);
        let img = tape.leaf(init::uniform(&mut rng, &[3, 64, 64], 0.0, 1.0), false);
        let pyr = enc.encode_frame(&mut tape, &params, &mut mounted, img, 0).unwrap();

        let n = 5;
        let d = 32;
        let q = tape.leaf(init::uniform(&mut rng, &[n, d], -1.0, 1.0), false);
        let pts = init::uniform::<f32>(&mut rng, &[n, 2], 5.0, 59.0);
        let p = tape.leaf(pts.clone(), false);
        let spec = CorrelationSpec { scales: 2, radius: 1 };
        let levels = LevelConvert::table(&enc, 2, false);
        let c = correlate(&mut tape, &[pyr], q, p, spec, &levels, 0.5).unwrap();
        assert_eq!(tape.value(c).shape(), &[n, 18]);

        // oracle: loop over scales and offsets with the generic sampler
        let level_vars: Vec<Var> = {
            let mut tape2 = Tape::<f32>::new();
            let _ = tape2;
            Vec::new()
        };
        drop(level_vars);
        let mut max_diff = 0.0f32;
        for s in 0..2usize {
            // recover this level's var by re-walking the pyramid
            let mut tape2 = Tape::<f32>::new();
            let mut mounted2 = Mounted::new(&params);
            let img2 = tape2.leaf(
                {
                    let mut r2 = init::seeded_rng(21);
                    init::uniform::<f32>(&mut r2, &[3, 64, 64], 0.0, 1.0)
                },
                false,
            );
            let pyr2 = enc.encode_frame(&mut tape2, &params, &mut mounted2, img2, 0).unwrap();
            let lvar = pyr2.levels[s];
            let conv = levels[s];
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let mut shifted = Vec::with_capacity(n * 2);
                    for i in 0..n {
                        let ux = conv.scale as f32 * pts.data()[2 * i] + conv.offset as f32;
                        let uy = conv.scale as f32 * pts.data()[2 * i + 1] + conv.offset as f32;
                        shifted.push(ux + dx as f32);
                        shifted.push(uy + dy as f32);
                    }
                    let sp = tape2.leaf(Tensor::from_vec(&[n, 2], shifted).unwrap(), false);
                    let sampled = tape2.bilinear_sample_hwc(lvar, sp, true).unwrap();
                    // dot with q rows
                    for i in 0..n {
                        let mut acc = 0.0f32;
                        for ch in 0..d {
                            acc += tape.value(q).data()[i * d + ch]
                                * tape2.value(sampled).data()[i * d + ch];
                        }
                        let col = s * 9 + ((dy + 1) as usize) * 3 + (dx + 1) as usize;
                        let got = tape.value(c).data()[i * 18 + col];
                        max_diff = max_diff.max((got - acc).abs());
                    }
                }
            }
        }
        assert!(max_diff <= 1e-5, "fused correlate deviates from oracle by {max_diff}");
    }

    #[test]
    fn scaling_q_scales_correlations_exactly() {
        let (enc, params) = toy_setup::<f32>(2);
        let mut tape = Tape::<f32>::new();
        let mut mounted = Mounted::new(&params);
        let mut rng = init::seeded_rng(31);
        let img = tape.leaf(init::uniform(&mut rng, &[3, 64, 64], 0.0, 1.0), false);
        let pyr = enc.encode_frame(&mut tape, &params, &mut mounted, img, 0).unwrap();
        let qdata = init::uniform::<f32>(&mut rng, &[3, 32], -1.0, 1.0);
        let q = tape.leaf(qdata.clone(), false);
        let q3 = tape.scale(q, 3.0);
        let p = tape.leaf(init::uniform(&mut rng, &[3, 2], 10.0, 50.0), false);
        let spec = CorrelationSpec { scales: 2, radius: 1 };
        let levels = LevelConvert::table(&enc, 2, false);
        let img_b = tape.value(pyr.levels[0]).clone();
        let _ = img_b;
        let c1 = correlate(&mut tape, &[pyr], q, p, spec, &levels, 0.5).unwrap();
        let pyr2 = FeaturePyramid {
            levels: {
                // reuse the same level vars
                let mut v = Vec::new();
                for i in 0..2 {
                    v.push(Var::from_raw_for_tests(c1, i));
                }
                v
            },
            frame_index: 0,
        };
        let _ = pyr2;
        // simpler: rebuild the pyramid vars by re-encoding the same image
        let img2 = tape.leaf(
            {
                let mut r2 = init::seeded_rng(31);
                init::uniform::<f32>(&mut r2, &[3, 64, 64], 0.0, 1.0)
            },
            false,
        );
        let pyr3 = enc.encode_frame(&mut tape, &params, &mut mounted, img2, 0).unwrap();
        let c3 = correlate(&mut tape, &[pyr3], q3, p, spec, &levels, 0.5).unwrap();
        for (a, b) in tape.value(c1).data().iter().zip(tape.value(c3).data()) {
            assert!((a * 3.0 - b).abs() <= 1e-4, "{a} * 3 != {b}");
        }
    }
}
