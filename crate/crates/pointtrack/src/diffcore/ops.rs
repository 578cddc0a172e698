//! Differentiable operations recorded on the tape.
//!
//! Shape conventions: rank-2 tensors are (rows, cols) row-major. Token grids
//! flatten (track, frame) into rows with the frame index fastest.

use super::error::{DiffError, DiffResult};
use super::kernels::gemm;
use super::real::Real;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> DiffError {
    DiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<R: Real> Tape<R> {
    // ── elementwise arithmetic ──────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, &[a, b], move |_, g, sink| {
            sink.add(a, g.data());
            sink.add(b, g.data());
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("sub", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, &[a, b], move |_, g, sink| {
            sink.add(a, g.data());
            let gb = sink.grad_mut(b).data_mut();
            for (gi, &gv) in gb.iter_mut().zip(g.data()) {
                *gi -= gv;
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("mul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, &[a, b], move |_, g, sink| {
            let bv = sink.val(b);
            {
                let ga = sink.grad_mut(a).data_mut();
                for ((gi, &gv), &bx) in ga.iter_mut().zip(g.data()).zip(bv.data()) {
                    *gi += gv * bx;
                }
            }
            let av = sink.val(a);
            let gb = sink.grad_mut(b).data_mut();
            for ((gi, &gv), &ax) in gb.iter_mut().zip(g.data()).zip(av.data()) {
                *gi += gv * ax;
            }
        }))
    }

    pub fn scale(&mut self, a: Var, factor: R) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data).unwrap();
        self.push_op(out, &[a], move |_, g, sink| {
            let ga = sink.grad_mut(a).data_mut();
            for (gi, &gv) in ga.iter_mut().zip(g.data()) {
                *gi += gv * factor;
            }
        })
    }

    /// Scalar Σᵢ xᵢ over all elements.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut s = R::ZERO;
        for &x in self.value(a).data() {
            s += x;
        }
        self.push_op(Tensor::scalar(s), &[a], move |_, g, sink| {
            let gv = g.item();
            let ga = sink.grad_mut(a).data_mut();
            for gi in ga.iter_mut() {
                *gi += gv;
            }
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, R::ONE / R::from_f64(n as f64))
    }

    /// Weighted sum of scalar nodes: Σᵢ wᵢ·sᵢ.
    pub fn weighted_sum(&mut self, terms: &[(Var, R)]) -> DiffResult<Var> {
        let mut total = R::ZERO;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(DiffError::InvalidConfig {
                    op: "weighted_sum",
                    message: format!("term has shape {:?}, expected scalar", self.value(v).shape()),
                });
            }
            total += self.value(v).item() * w;
        }
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|&(v, _)| v).collect();
        Ok(self.push_op(Tensor::scalar(total), &parents, move |_, g, sink| {
            let gv = g.item();
            for &(v, w) in &terms {
                sink.grad_mut(v).data_mut()[0] += gv * w;
            }
        }))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Elementwise logistic function, stable for large |x|.
    pub fn sigmoid(&mut self, a: Var) -> DiffResult<Var> {
        let data: Vec<R> = self.value(a).data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, &[a], move |me, g, sink| {
            let y = sink.val(me);
            let ga = sink.grad_mut(a).data_mut();
            for ((gi, &gv), &yv) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                *gi += gv * yv * (R::ONE - yv);
            }
        }))
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> DiffResult<Var> {
        let data: Vec<R> = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push_op(out, &[a], move |_, g, sink| {
            let av = sink.val(a);
            let ga = sink.grad_mut(a).data_mut();
            for ((gi, &gv), &x) in ga.iter_mut().zip(g.data()).zip(av.data()) {
                *gi += gv * gelu_grad_scalar(x);
            }
        }))
    }

    /// Softmax along `axis`, stabilized by max subtraction. Rows of the
    /// softmaxed axis sum to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> DiffResult<Var> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(DiffError::InvalidConfig {
                op: "softmax",
                message: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.value(a).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = data[base];
                for j in 1..len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut sum = R::ZERO;
                for j in 0..len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    sum += e;
                }
                let inv = R::ONE / sum;
                for j in 0..len {
                    data[base + j * inner] *= inv;
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push_op(out, &[a], move |me, g, sink| {
            let y = sink.val(me);
            let ga = sink.grad_mut(a).data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = R::ZERO;
                    for j in 0..len {
                        let idx = base + j * inner;
                        dot += g.data()[idx] * y.data()[idx];
                    }
                    for j in 0..len {
                        let idx = base + j * inner;
                        ga[idx] += y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
            }
        }))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Standard matrix product of rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> DiffResult<Var> {
        let (m, ka) = self.value(a).dims2();
        let (kb, n) = self.value(b).dims2();
        if ka != kb {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let k = ka;
        let mut out = Tensor::zeros(&[m, n]);
        gemm(out.data_mut(), m, n, k, self.value(a).data(), false, self.value(b).data(), false, R::ONE, R::ZERO);
        Ok(self.push_op(out, &[a, b], move |_, g, sink| {
            let bv = sink.val(b);
            gemm(sink.grad_mut(a).data_mut(), m, k, n, g.data(), false, bv.data(), true, R::ONE, R::ONE);
            let av = sink.val(a);
            gemm(sink.grad_mut(b).data_mut(), k, n, m, av.data(), true, g.data(), false, R::ONE, R::ONE);
        }))
    }

    /// Affine map y = x·Wᵀ + b with x: (n, in), w: (out, in), b: (out).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> DiffResult<Var> {
        let (n, d_in) = self.value(x).dims2();
        let (d_out, wk) = self.value(w).dims2();
        if wk != d_in {
            return Err(shape_err("linear", self.value(x).shape(), self.value(w).shape()));
        }
        if let Some(bias) = b {
            if self.value(bias).numel() != d_out {
                return Err(shape_err("linear", &[d_out], self.value(bias).shape()));
            }
        }
        let mut out = Tensor::zeros(&[n, d_out]);
        gemm(out.data_mut(), n, d_out, d_in, self.value(x).data(), false, self.value(w).data(), true, R::ONE, R::ZERO);
        if let Some(bias) = b {
            let bd = self.value(bias).data().to_vec();
            for row in out.data_mut().chunks_mut(d_out) {
                for (o, &bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        let parents: Vec<Var> = match b {
            Some(bias) => vec![x, w, bias],
            None => vec![x, w],
        };
        Ok(self.push_op(out, &parents, move |_, g, sink| {
            let wv = sink.val(w);
            gemm(sink.grad_mut(x).data_mut(), n, d_in, d_out, g.data(), false, wv.data(), false, R::ONE, R::ONE);
            let xv = sink.val(x);
            gemm(sink.grad_mut(w).data_mut(), d_out, d_in, n, g.data(), true, xv.data(), false, R::ONE, R::ONE);
            if let Some(bias) = b {
                let gb = sink.grad_mut(bias).data_mut();
                for row in g.data().chunks(d_out) {
                    for (gi, &gv) in gb.iter_mut().zip(row) {
                        *gi += gv;
                    }
                }
            }
        }))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Layer norm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: R) -> DiffResult<Var> {
        let shape = self.value(x).shape().to_vec();
        let d = *shape.last().ok_or(DiffError::InvalidConfig {
            op: "layer_norm",
            message: "rank-0 input".into(),
        })?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(shape_err("layer_norm", &[d], self.value(gamma).shape()));
        }
        let rows = self.value(x).numel() / d;
        let mut out = vec![R::ZERO; rows * d];
        let mut rstd = vec![R::ZERO; rows];
        let mut means = vec![R::ZERO; rows];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let inv_d = R::ONE / R::from_f64(d as f64);
            for r in 0..rows {
                let row = &xd[r * d..(r + 1) * d];
                let mut mean = R::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_d;
                let mut var = R::ZERO;
                for &v in row {
                    let c = v - mean;
                    var += c * c;
                }
                var *= inv_d;
                let rs = R::ONE / (var + eps).sqrt();
                means[r] = mean;
                rstd[r] = rs;
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mean) * rs * gd[j] + bd[j];
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push_op(out, &[x, gamma, beta], move |_, g, sink| {
            let xv = sink.val(x);
            let gv = sink.val(gamma);
            let inv_d = R::ONE / R::from_f64(d as f64);
            {
                let gx = sink.grad_mut(x).data_mut();
                for r in 0..rows {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let rs = rstd[r];
                    let mean = means[r];
                    // dL/dxhat, then standard layer-norm backward
                    let mut sum_dxhat = R::ZERO;
                    let mut sum_dxhat_xhat = R::ZERO;
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rs;
                        let dxhat = grow[j] * gv.data()[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..d {
                        let xhat = (xrow[j] - mean) * rs;
                        let dxhat = grow[j] * gv.data()[j];
                        gx[r * d + j] +=
                            rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
            }
            {
                let ggamma = sink.grad_mut(gamma).data_mut();
                for r in 0..rows {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    for j in 0..d {
                        ggamma[j] += grow[j] * (xrow[j] - means[r]) * rstd[r];
                    }
                }
            }
            let gbeta = sink.grad_mut(beta).data_mut();
            for r in 0..rows {
                let grow = &g.data()[r * d..(r + 1) * d];
                for j in 0..d {
                    gbeta[j] += grow[j];
                }
            }
        }))
    }

    /// Instance norm of a (C, H, W) tensor: each channel standardized over
    /// its spatial extent. No affine term.
    pub fn instance_norm(&mut self, x: Var, eps: R) -> DiffResult<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(DiffError::InvalidConfig {
                op: "instance_norm",
                message: format!("expected (C, H, W), got {shape:?}"),
            });
        }
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let mut out = vec![R::ZERO; c * hw];
        let mut means = vec![R::ZERO; c];
        let mut rstd = vec![R::ZERO; c];
        {
            let xd = self.value(x).data();
            let inv_n = R::ONE / R::from_f64(hw as f64);
            for ch in 0..c {
                let row = &xd[ch * hw..(ch + 1) * hw];
                let mut mean = R::ZERO;
                for &v in row {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = R::ZERO;
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                let rs = R::ONE / (var + eps).sqrt();
                means[ch] = mean;
                rstd[ch] = rs;
                for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(row) {
                    *o = (v - mean) * rs;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let xv = sink.val(x);
            let gx = sink.grad_mut(x).data_mut();
            let inv_n = R::ONE / R::from_f64(hw as f64);
            for ch in 0..c {
                let xrow = &xv.data()[ch * hw..(ch + 1) * hw];
                let grow = &g.data()[ch * hw..(ch + 1) * hw];
                let rs = rstd[ch];
                let mean = means[ch];
                let mut sum_g = R::ZERO;
                let mut sum_g_xhat = R::ZERO;
                for j in 0..hw {
                    let xhat = (xrow[j] - mean) * rs;
                    sum_g += grow[j];
                    sum_g_xhat += grow[j] * xhat;
                }
                for j in 0..hw {
                    let xhat = (xrow[j] - mean) * rs;
                    gx[ch * hw + j] += rs * (grow[j] - inv_n * sum_g - xhat * inv_n * sum_g_xhat);
                }
            }
        }))
    }

    // ── layout ──────────────────────────────────────────────────────────

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> DiffResult<Var> {
        if parts.is_empty() {
            return Err(DiffError::InvalidConfig { op: "concat_cols", message: "no parts".into() });
        }
        let rows = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.value(p).dims2();
            if r != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![R::ZERO; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_vec(&[rows, total], data)?;
        let parts = parts.to_vec();
        Ok(self.push_op(out, &parts.clone(), move |_, g, sink| {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let gp = sink.grad_mut(p).data_mut();
                for r in 0..rows {
                    for j in 0..w {
                        gp[r * w + j] += g.data()[r * total + off + j];
                    }
                }
                off += w;
            }
        }))
    }

    /// Columns `[start, start+width)` of a rank-2 tensor.
    pub fn narrow_cols(&mut self, x: Var, start: usize, width: usize) -> DiffResult<Var> {
        let (rows, cols) = self.value(x).dims2();
        if start + width > cols {
            return Err(DiffError::InvalidConfig {
                op: "narrow_cols",
                message: format!("range {start}..{} out of {cols} columns", start + width),
            });
        }
        let mut data = vec![R::ZERO; rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width]
                .copy_from_slice(&self.value(x).data()[r * cols + start..r * cols + start + width]);
        }
        let out = Tensor::from_vec(&[rows, width], data)?;
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let gx = sink.grad_mut(x).data_mut();
            for r in 0..rows {
                for j in 0..width {
                    gx[r * cols + start + j] += g.data()[r * width + j];
                }
            }
        }))
    }

    /// Vertical concatenation of rank-2 tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> DiffResult<Var> {
        if parts.is_empty() {
            return Err(DiffError::InvalidConfig { op: "concat_rows", message: "no parts".into() });
        }
        let cols = self.value(parts[0]).dims2().1;
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            row_counts.push(r);
        }
        let total: usize = row_counts.iter().sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[total, cols], data)?;
        let parts = parts.to_vec();
        Ok(self.push_op(out, &parts.clone(), move |_, g, sink| {
            let mut off = 0;
            for (&p, &r) in parts.iter().zip(&row_counts) {
                sink.add(p, &g.data()[off * cols..(off + r) * cols]);
                off += r;
            }
        }))
    }

    /// Rows `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> DiffResult<Var> {
        let (rows, cols) = self.value(x).dims2();
        if start + len > rows {
            return Err(DiffError::InvalidConfig {
                op: "narrow_rows",
                message: format!("range {start}..{} out of {rows} rows", start + len),
            });
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::from_vec(&[len, cols], data)?;
        Ok(self.push_op(out, &[x], move |_, g, sink| {
            let gx = sink.grad_mut(x).data_mut();
            for (gi, &gv) in gx[start * cols..(start + len) * cols].iter_mut().zip(g.data()) {
                *gi += gv;
            }
        }))
    }

    /// Gathers rows from a single source; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> DiffResult<Var> {
        let picks: Vec<(usize, usize)> = rows.iter().map(|&r| (0, r)).collect();
        self.gather_rows_multi(&[x], &picks)
    }

    /// Builds a new matrix by picking `(source, row)` pairs. Backward
    /// scatter-adds into each source, so repeated rows accumulate.
    pub fn gather_rows_multi(
        &mut self,
        sources: &[Var],
        picks: &[(usize, usize)],
    ) -> DiffResult<Var> {
        if sources.is_empty() {
            return Err(DiffError::InvalidConfig { op: "gather_rows", message: "no sources".into() });
        }
        let cols = self.value(sources[0]).dims2().1;
        for &s in sources {
            if self.value(s).dims2().1 != cols {
                return Err(shape_err("gather_rows", self.value(sources[0]).shape(), self.value(s).shape()));
            }
        }
        for &(src, row) in picks {
            if src >= sources.len() || row >= self.value(sources[src]).dims2().0 {
                return Err(DiffError::InvalidConfig {
                    op: "gather_rows",
                    message: format!("pick ({src}, {row}) out of range"),
                });
            }
        }
        let mut data = Vec::with_capacity(picks.len() * cols);
        for &(src, row) in picks {
            data.extend_from_slice(&self.value(sources[src]).data()[row * cols..(row + 1) * cols]);
        }
        let out = Tensor::from_vec(&[picks.len(), cols], data)?;
        let sources = sources.to_vec();
        let picks = picks.to_vec();
        Ok(self.push_op(out, &sources.clone(), move |_, g, sink| {
            for (i, &(src, row)) in picks.iter().enumerate() {
                let gs = sink.grad_mut(sources[src]).data_mut();
                for j in 0..cols {
                    gs[row * cols + j] += g.data()[i * cols + j];
                }
            }
        }))
    }

    /// Adds a per-frame embedding to a (n_seq·t_len, d) grid: row (i, t)
    /// receives e[t]. Rows are frame-fastest.
    pub fn add_rows_cycle(&mut self, x: Var, e: Var, t_len: usize) -> DiffResult<Var> {
        let (rows, cols) = self.value(x).dims2();
        let (et, ec) = self.value(e).dims2();
        if et != t_len || ec != cols || rows % t_len != 0 {
            return Err(shape_err("add_rows_cycle", self.value(x).shape(), self.value(e).shape()));
        }
        let mut data = self.value(x).data().to_vec();
        {
            let ed = self.value(e).data();
            for (r, row) in data.chunks_mut(cols).enumerate() {
                let t = r % t_len;
                for (o, &ev) in row.iter_mut().zip(&ed[t * cols..(t + 1) * cols]) {
                    *o += ev;
                }
            }
        }
        let out = Tensor::from_vec(&[rows, cols], data)?;
        Ok(self.push_op(out, &[x, e], move |_, g, sink| {
            sink.add(x, g.data());
            let ge = sink.grad_mut(e).data_mut();
            for (r, grow) in g.data().chunks(cols).enumerate() {
                let t = r % t_len;
                for (gi, &gv) in ge[t * cols..(t + 1) * cols].iter_mut().zip(grow) {
                    *gi += gv;
                }
            }
        }))
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean of per-row distances ‖pred − gt‖ over rows with `mask` set.
    /// `l1` switches the per-point norm from Euclidean to Manhattan.
    /// Masked-out rows of `gt` are never read.
    pub fn masked_mean_dist(
        &mut self,
        pred: Var,
        gt: &Tensor<R>,
        mask: &[bool],
        l1: bool,
    ) -> DiffResult<Var> {
        let (rows, cols) = self.value(pred).dims2();
        if gt.shape() != self.value(pred).shape() {
            return Err(shape_err("masked_mean_dist", gt.shape(), self.value(pred).shape()));
        }
        if mask.len() != rows {
            return Err(DiffError::InvalidConfig {
                op: "masked_mean_dist",
                message: format!("mask length {} != rows {rows}", mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::InvalidConfig {
                op: "masked_mean_dist",
                message: "no valid entries".into(),
            });
        }
        let inv = R::ONE / R::from_f64(count as f64);
        let mut total = R::ZERO;
        {
            let pd = self.value(pred).data();
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                let mut acc = R::ZERO;
                for j in 0..cols {
                    let d = pd[r * cols + j] - gt.data()[r * cols + j];
                    acc += if l1 { d.abs() } else { d * d };
                }
                total += if l1 { acc } else { acc.sqrt() };
            }
        }
        let gt = gt.clone();
        let mask = mask.to_vec();
        Ok(self.push_op(Tensor::scalar(total * inv), &[pred], move |_, g, sink| {
            let gv = g.item() * inv;
            let pv = sink.val(pred);
            let gp = sink.grad_mut(pred).data_mut();
            for r in 0..rows {
                if !mask[r] {
                    continue;
                }
                if l1 {
                    for j in 0..cols {
                        let d = pv.data()[r * cols + j] - gt.data()[r * cols + j];
                        let s = if d > R::ZERO {
                            R::ONE
                        } else if d < R::ZERO {
                            -R::ONE
                        } else {
                            R::ZERO
                        };
                        gp[r * cols + j] += gv * s;
                    }
                } else {
                    let mut acc = R::ZERO;
                    for j in 0..cols {
                        let d = pv.data()[r * cols + j] - gt.data()[r * cols + j];
                        acc += d * d;
                    }
                    let dist = acc.sqrt().max(R::from_f64(1e-12));
                    for j in 0..cols {
                        let d = pv.data()[r * cols + j] - gt.data()[r * cols + j];
                        gp[r * cols + j] += gv * d / dist;
                    }
                }
            }
        }))
    }

    /// Mean binary cross-entropy from logits over rows with `mask` set,
    /// computed in the numerically stable log-sum-exp form.
    pub fn masked_bce_with_logits(
        &mut self,
        logits: Var,
        labels: &[bool],
        mask: &[bool],
    ) -> DiffResult<Var> {
        let n = self.value(logits).numel();
        if labels.len() != n || mask.len() != n {
            return Err(DiffError::InvalidConfig {
                op: "masked_bce_with_logits",
                message: format!("labels/mask length must be {n}"),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::InvalidConfig {
                op: "masked_bce_with_logits",
                message: "no valid entries".into(),
            });
        }
        let inv = R::ONE / R::from_f64(count as f64);
        let mut total = R::ZERO;
        {
            let xd = self.value(logits).data();
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let x = xd[i];
                let z = if labels[i] { R::ONE } else { R::ZERO };
                // max(x,0) - x*z + ln(1 + exp(-|x|))
                total += x.max(R::ZERO) - x * z + (R::ONE + (-x.abs()).exp()).ln();
            }
        }
        let labels = labels.to_vec();
        let mask = mask.to_vec();
        Ok(self.push_op(Tensor::scalar(total * inv), &[logits], move |_, g, sink| {
            let gv = g.item() * inv;
            let xv = sink.val(logits);
            let gx = sink.grad_mut(logits).data_mut();
            for i in 0..gx.len() {
                if !mask[i] {
                    continue;
                }
                let z = if labels[i] { R::ONE } else { R::ZERO };
                gx[i] += gv * (sigmoid_scalar(xv.data()[i]) - z);
            }
        }))
    }
}

#[inline]
pub fn sigmoid_scalar<R: Real>(x: R) -> R {
    if x >= R::ZERO {
        R::ONE / (R::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::ONE + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu_scalar<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (R::ONE + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<R: Real>(x: R) -> R {
    let c = R::from_f64(GELU_C);
    let a = R::from_f64(GELU_A);
    let half = R::from_f64(0.5);
    let three = R::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = R::ONE - t * t;
    half * (R::ONE + t) + half * x * sech2 * c * (R::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
        let id = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let c2 = tape.matmul(id, a).unwrap();
        assert_eq!(tape.value(c2).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4, 2]), false);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            DiffError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape mismatch, got {other}"),
        }
    }

    #[test]
    fn softmax_uniform_over_equal_inputs() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 4], vec![3.0; 4]).unwrap(), false);
        let y = tape.softmax(x, 1).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_analytic_two_way() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap(), false);
        let y = tape.softmax(x, 1).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12);
        assert!((d[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..60).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let x = tape.leaf(Tensor::from_vec(&[3, 4, 5], data).unwrap(), false);
        for axis in 0..3 {
            let y = tape.softmax(x, axis).unwrap();
            let t = tape.value(y);
            let shape = t.shape();
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0;
                    for j in 0..shape[axis] {
                        s += t.data()[o * shape[axis] * inner + j * inner + i];
                    }
                    assert!((s - 1.0).abs() < 1e-6, "axis {axis} lane sums to {s}");
                }
            }
        }
    }

    #[test]
    fn sigmoid_analytic_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[3], vec![0.0, -40.0, 40.0]).unwrap(), false);
        let y = tape.sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.5);
        assert!(d[1] < 1e-17 && d[1] > 0.0, "sigmoid(-40) = {}", d[1]);
        assert!(d[2] <= 1.0 && d[2] > 1.0 - 1e-15);
    }

    #[test]
    fn gelu_zero_is_zero() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 3], 7.5), false);
        let y = tape.instance_norm(x, 1e-5).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gather_rows_backward_accumulates_repeats() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let g = tape.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum_all(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_mean_dist_hand_example() {
        // single row with error vector (3, 4) -> Euclidean distance 5
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(), true);
        let gt = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let loss = tape.masked_mean_dist(pred, &gt, &[true], false).unwrap();
        assert_eq!(tape.value(loss).item(), 5.0);
    }

    #[test]
    fn masked_mean_dist_ignores_masked_nan() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 2.0, 2.0]).unwrap(), true);
        let gt = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, f64::NAN, f64::NAN]).unwrap();
        let loss = tape.masked_mean_dist(pred, &gt, &[true, false], false).unwrap();
        assert!(tape.value(loss).item().is_finite());
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn bce_analytic_values() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::from_vec(&[2], vec![40.0, 0.0]).unwrap(), true);
        let l_sat = tape
            .masked_bce_with_logits(logits, &[true, true], &[true, false])
            .unwrap();
        assert!(tape.value(l_sat).item().abs() < 1e-15, "saturated logit loss ~ 0");
        let l_ln2 = tape
            .masked_bce_with_logits(logits, &[true, true], &[false, true])
            .unwrap();
        assert!((tape.value(l_ln2).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn masked_losses_error_on_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let pred = tape.leaf(Tensor::zeros(&[1, 2]), true);
        let gt = Tensor::zeros(&[1, 2]);
        assert!(tape.masked_mean_dist(pred, &gt, &[false], false).is_err());
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap(), true);
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = tape.narrow_cols(c, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());

        let r = tape.concat_rows(&[a, a]).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 1.0, 2.0]);
        let rr = tape.narrow_rows(r, 1, 2).unwrap();
        assert_eq!(tape.value(rr).data(), &[2.0, 1.0]);
    }
}
