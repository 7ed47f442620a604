//! Differentiable tensor operations recorded on a [`Graph`].

use super::graph::{Graph, Var};
use crate::scalar::{matmul_into, Scalar};
use crate::tensor::Tensor;

/// Smooth pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    /// `x * sigmoid(x)`, a.k.a. Swish.
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Square,
    /// Square root with a zero subgradient at the origin.
    Sqrt,
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => {
                let c = T::of(0.797_884_560_802_865_4);
                let inner = c * (x + T::of(0.044715) * x * x * x);
                T::of(0.5) * x * (T::one() + inner.tanh())
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
            Activation::Square => x * x,
            Activation::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given the input `x` and the output `y`.
    #[inline]
    pub fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::Gelu => {
                let c = T::of(0.797_884_560_802_865_4);
                let a = T::of(0.044715);
                let inner = c * (x + a * x * x * x);
                let th = inner.tanh();
                let sech2 = T::one() - th * th;
                T::of(0.5) * (T::one() + th)
                    + T::of(0.5) * x * sech2 * c * (T::one() + T::of(3.0) * a * x * x)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
            Activation::Square => (T::one() + T::one()) * x,
            Activation::Sqrt => {
                if y > T::zero() {
                    T::of(0.5) / y
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn im2col3x3<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    debug_assert_eq!(cols.len(), c * 9 * hw);
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im3x3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..((ci * 9) + ky * 3 + kx + 1) * hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * w..(oy + 1) * w];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got shape {shape:?}");
    (shape[0], shape[1])
}

impl<T: Scalar> Graph<'_, T> {
    /// `op(a) * op(b)` where `op` optionally transposes its (matrix) argument.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = matrix_dims(self.shape(a));
        let (br, bc) = matrix_dims(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimensions differ: {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            k,
            n,
            &mut out,
            false,
        );
        self.custom(&[a, b], Tensor::new([m, n], out), move |ctx, g, sink| {
            let av = ctx.value(a).data();
            let bv = ctx.value(b).data();
            let gd = g.data();
            if sink.needs(a) {
                let (ar, ac) = if ta { (k, m) } else { (m, k) };
                let da = sink.slot(a, &[ar, ac]);
                if ta {
                    matmul_into(bv, tb, gd, true, k, n, m, da, true);
                } else {
                    matmul_into(gd, false, bv, !tb, m, n, k, da, true);
                }
            }
            if sink.needs(b) {
                let (br, bc) = if tb { (n, k) } else { (k, n) };
                let db = sink.slot(b, &[br, bc]);
                if tb {
                    matmul_into(gd, true, av, ta, n, m, k, db, true);
                } else {
                    matmul_into(av, !ta, gd, false, k, m, n, db, true);
                }
            }
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: BinaryOp) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op on mismatched shapes"
        );
        let av = self.value(a);
        let bv = self.value(b);
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
            })
            .collect();
        let shape = av.shape().to_vec();
        self.custom(&[a, b], Tensor::new(shape.clone(), data), move |ctx, g, sink| {
            let gd = g.data();
            match op {
                BinaryOp::Add | BinaryOp::Sub => {
                    if sink.needs(a) {
                        let da = sink.slot(a, &shape);
                        for (d, &gv) in da.iter_mut().zip(gd) {
                            *d += gv;
                        }
                    }
                    if sink.needs(b) {
                        let db = sink.slot(b, &shape);
                        let sign = if op == BinaryOp::Add { T::one() } else { -T::one() };
                        for (d, &gv) in db.iter_mut().zip(gd) {
                            *d += sign * gv;
                        }
                    }
                }
                BinaryOp::Mul => {
                    if sink.needs(a) {
                        let bv = ctx.value(b).data();
                        let da = sink.slot(a, &shape);
                        for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(bv) {
                            *d += gv * y;
                        }
                    }
                    if sink.needs(b) {
                        let av = ctx.value(a).data();
                        let db = sink.slot(b, &shape);
                        for ((d, &gv), &x) in db.iter_mut().zip(gd).zip(av) {
                            *d += gv * x;
                        }
                    }
                }
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, BinaryOp::Mul)
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (rows, n) = self.value(x).as_matrix_dims();
        assert_eq!(self.value(bias).len(), n, "bias length");
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o += b;
            }
        }
        self.custom(&[x, bias], out, move |_ctx, g, sink| {
            if sink.needs(x) {
                sink.add(x, g.clone());
            }
            if sink.needs(bias) {
                let db = sink.slot(bias, &[n]);
                for row in g.data().chunks(n).take(rows) {
                    for (d, &gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
        })
    }

    /// Adds a `[C]` vector along the leading (channel) axis of `[C, ..]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(bias).len(), c, "channel bias length");
        let plane = self.value(x).len() / c;
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data().to_vec();
        for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[ch]);
        }
        self.custom(&[x, bias], out, move |_ctx, g, sink| {
            if sink.needs(x) {
                sink.add(x, g.clone());
            }
            if sink.needs(bias) {
                let db = sink.slot(bias, &[c]);
                for (ch, chunk) in g.data().chunks(plane).enumerate() {
                    db[ch] += chunk.iter().copied().sum::<T>();
                }
            }
        })
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.custom(&[x], out, move |_ctx, g, sink| {
            let dx = sink.slot(x, g.shape());
            for (d, &gv) in dx.iter_mut().zip(g.data()) {
                *d += gv * s;
            }
        })
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.custom(&[x], out, move |_ctx, g, sink| {
            sink.add(x, g.clone());
        })
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        let y = self.next_var();
        self.custom(&[x], out, move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let yv = ctx.value(y).data();
            let dx = sink.slot(x, g.shape());
            for i in 0..dx.len() {
                dx[i] += g.data()[i] * act.derivative(xv[i], yv[i]);
            }
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let src_shape = self.shape(x).to_vec();
        let out = self.value(x).clone().reshaped(shape);
        self.custom(&[x], out, move |_ctx, g, sink| {
            sink.add(x, g.clone().reshaped(src_shape.clone()));
        })
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = matrix_dims(self.shape(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = xv[r * n + c];
            }
        }
        self.custom(&[x], Tensor::new([n, m], out), move |_ctx, g, sink| {
            let dx = sink.slot(x, &[m, n]);
            let gd = g.data();
            for r in 0..m {
                for c in 0..n {
                    dx[r * n + c] += gd[c * m + r];
                }
            }
        })
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = matrix_dims(self.shape(x));
        assert!(start + len <= n, "column slice out of range");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&xv[r * n + start..r * n + start + len]);
        }
        self.custom(&[x], Tensor::new([m, len], out), move |_ctx, g, sink| {
            let dx = sink.slot(x, &[m, n]);
            for r in 0..m {
                for c in 0..len {
                    dx[r * n + start + c] += g.data()[r * len + c];
                }
            }
        })
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = matrix_dims(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = matrix_dims(self.shape(p));
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let parts = parts.to_vec();
        self.custom(&parts.clone(), Tensor::new([m, n], out), move |_ctx, g, sink| {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                if sink.needs(p) {
                    let dp = sink.slot(p, &[m, w]);
                    for r in 0..m {
                        for c in 0..w {
                            dp[r * w + c] += g.data()[r * n + off + c];
                        }
                    }
                }
                off += w;
            }
        })
    }

    /// Slice `start..start + len` along the leading axis.
    pub fn slice_leading(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[0], "leading slice out of range");
        let inner: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        self.custom(&[x], Tensor::new(out_shape, data), move |_ctx, g, sink| {
            let dx = sink.slot(x, &shape);
            for (d, &gv) in dx[start * inner..(start + len) * inner].iter_mut().zip(g.data()) {
                *d += gv;
            }
        })
    }

    /// Elements at flat `indices` of `x`, as a `[len]` vector.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Var {
        let xv = self.value(x).data();
        let out: Vec<T> = indices.iter().map(|&i| xv[i]).collect();
        let shape = self.shape(x).to_vec();
        self.custom(&[x], Tensor::new([indices.len()], out), move |_ctx, g, sink| {
            let dx = sink.slot(x, &shape);
            for (&i, &gv) in indices.iter().zip(g.data()) {
                dx[i] += gv;
            }
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let shape = self.shape(x).to_vec();
        self.custom(&[x], Tensor::scalar(s), move |_ctx, g, sink| {
            let gv = g.item();
            sink.slot(x, &shape).iter_mut().for_each(|d| *d += gv);
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean and population standard deviation of all elements, as `[2]`.
    pub fn mean_std(&mut self, x: Var) -> Var {
        let xv = self.value(x).data();
        let n = xv.len();
        assert!(n > 0, "mean_std of empty tensor");
        let nf = T::of(n as f64);
        let mean = xv.iter().copied().sum::<T>() / nf;
        let var = xv.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let std = var.sqrt();
        let shape = self.shape(x).to_vec();
        self.custom(&[x], Tensor::new([2], vec![mean, std]), move |ctx, g, sink| {
            let (gm, gs) = (g.data()[0], g.data()[1]);
            let xv = ctx.value(x).data();
            let dx = sink.slot(x, &shape);
            for (d, &v) in dx.iter_mut().zip(xv) {
                *d += gm / nf;
                if std > T::zero() {
                    *d += gs * (v - mean) / (nf * std);
                }
            }
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = matrix_dims(self.shape(x));
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = self.next_var();
        self.custom(&[x], out, move |ctx, g, sink| {
            let yv = ctx.value(y).data();
            let dx = sink.slot(x, &[m, n]);
            for r in 0..m {
                let yr = &yv[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for c in 0..n {
                    dx[r * n + c] += yr[c] * (gr[c] - dot);
                }
            }
        })
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let (rows, n) = self.value(x).as_matrix_dims();
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), n);
        let mut out = vec![T::zero(); rows * n];
        let mut stats = Vec::with_capacity(rows * 2);
        let nf = T::of(n as f64);
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        self.custom(&[x, gamma, beta], Tensor::new(shape.clone(), out), move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let gam = ctx.value(gamma).data();
            let gd = g.data();
            if sink.needs(gamma) || sink.needs(beta) {
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                for r in 0..rows {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    for c in 0..n {
                        let xh = (xv[r * n + c] - mean) * rstd;
                        dg[c] += gd[r * n + c] * xh;
                        db[c] += gd[r * n + c];
                    }
                }
                if sink.needs(gamma) {
                    sink.add(gamma, Tensor::new([n], dg));
                }
                if sink.needs(beta) {
                    sink.add(beta, Tensor::new([n], db));
                }
            }
            if sink.needs(x) {
                let dx = sink.slot(x, &shape);
                for r in 0..rows {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..n {
                        let xh = (xv[r * n + c] - mean) * rstd;
                        let dxh = gd[r * n + c] * gam[c];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    s1 /= nf;
                    s2 /= nf;
                    for c in 0..n {
                        let xh = (xv[r * n + c] - mean) * rstd;
                        let dxh = gd[r * n + c] * gam[c];
                        dx[r * n + c] += rstd * (dxh - s1 - xh * s2);
                    }
                }
            }
        })
    }

    /// Group normalisation of a `[C, H, W]` feature map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Var {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        assert!(groups > 0 && c % groups == 0, "channels not divisible by groups");
        let plane: usize = shape[1..].iter().product();
        let cpg = c / groups;
        let gsize = cpg * plane;
        let eps = T::of(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(groups * 2);
        let nf = T::of(gsize as f64);
        for gi in 0..groups {
            let chunk = &xv[gi * gsize..(gi + 1) * gsize];
            let mean = chunk.iter().copied().sum::<T>() / nf;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            for ch in gi * cpg..(gi + 1) * cpg {
                let (gm, bt) = (gv[ch], bv[ch]);
                for i in ch * plane..(ch + 1) * plane {
                    out[i] = (xv[i] - mean) * rstd * gm + bt;
                }
            }
            stats.push(mean);
            stats.push(rstd);
        }
        self.custom(&[x, gamma, beta], Tensor::new(shape.clone(), out), move |ctx, g, sink| {
            let xv = ctx.value(x).data();
            let gam = ctx.value(gamma).data();
            let gd = g.data();
            if sink.needs(gamma) || sink.needs(beta) {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ch in 0..c {
                    let gi = ch / cpg;
                    let (mean, rstd) = (stats[2 * gi], stats[2 * gi + 1]);
                    for i in ch * plane..(ch + 1) * plane {
                        dg[ch] += gd[i] * (xv[i] - mean) * rstd;
                        db[ch] += gd[i];
                    }
                }
                if sink.needs(gamma) {
                    sink.add(gamma, Tensor::new([c], dg));
                }
                if sink.needs(beta) {
                    sink.add(beta, Tensor::new([c], db));
                }
            }
            if sink.needs(x) {
                let dx = sink.slot(x, &shape);
                for gi in 0..groups {
                    let (mean, rstd) = (stats[2 * gi], stats[2 * gi + 1]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for ch in gi * cpg..(gi + 1) * cpg {
                        for i in ch * plane..(ch + 1) * plane {
                            let dxh = gd[i] * gam[ch];
                            s1 += dxh;
                            s2 += dxh * (xv[i] - mean) * rstd;
                        }
                    }
                    s1 /= nf;
                    s2 /= nf;
                    for ch in gi * cpg..(gi + 1) * cpg {
                        for i in ch * plane..(ch + 1) * plane {
                            let xh = (xv[i] - mean) * rstd;
                            dx[i] += rstd * (gd[i] * gam[ch] - s1 - xh * s2);
                        }
                    }
                }
            }
        })
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `x` is `[C_in, H, W]`, `weight` is `[C_out, C_in * 9]`, `bias` is `[C_out]`.
    pub fn conv3x3(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "conv3x3 expects [C, H, W]");
        let (cin, h, w) = (shape[0], shape[1], shape[2]);
        let (cout, kk) = matrix_dims(self.shape(weight));
        assert_eq!(kk, cin * 9, "conv weight has wrong fan-in");
        let hw = h * w;
        let mut cols = vec![T::zero(); cin * 9 * hw];
        im2col3x3(self.value(x).data(), cin, h, w, &mut cols);
        let mut out = vec![T::zero(); cout * hw];
        matmul_into(self.value(weight).data(), false, &cols, false, cout, cin * 9, hw, &mut out, false);
        let bv = self.value(bias).data();
        for (ch, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bv[ch]);
        }
        drop(cols);
        self.custom(&[x, weight, bias], Tensor::new([cout, h, w], out), move |ctx, g, sink| {
            let gd = g.data();
            if sink.needs(bias) {
                let db = sink.slot(bias, &[cout]);
                for (ch, chunk) in gd.chunks(hw).enumerate() {
                    db[ch] += chunk.iter().copied().sum::<T>();
                }
            }
            let need_w = sink.needs(weight);
            let need_x = sink.needs(x);
            if need_w {
                let mut cols = vec![T::zero(); cin * 9 * hw];
                im2col3x3(ctx.value(x).data(), cin, h, w, &mut cols);
                let dw = sink.slot(weight, &[cout, cin * 9]);
                matmul_into(gd, false, &cols, true, cout, hw, cin * 9, dw, true);
            }
            if need_x {
                let mut dcols = vec![T::zero(); cin * 9 * hw];
                matmul_into(ctx.value(weight).data(), true, gd, false, cin * 9, cout, hw, &mut dcols, false);
                let dx = sink.slot(x, &[cin, h, w]);
                col2im3x3(&dcols, cin, h, w, dx);
            }
        })
    }

    /// Pointwise (1x1) convolution: `weight` is `[C_out, C_in]`.
    pub fn conv1x1(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (cin, hw) = (shape[0], shape[1..].iter().product::<usize>());
        let cout = self.shape(weight)[0];
        let flat = self.reshape(x, [cin, hw]);
        let y = self.matmul(weight, flat);
        let y = self.add_channel_bias(y, bias);
        let mut out_shape = shape;
        out_shape[0] = cout;
        self.reshape(y, out_shape)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (h2, w2) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                let src = &xv[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
                let dst = &mut out[ch * h2 * w2 + y * w2..ch * h2 * w2 + (y + 1) * w2];
                for xx in 0..w2 {
                    dst[xx] = src[xx / 2];
                }
            }
        }
        self.custom(&[x], Tensor::new([c, h2, w2], out), move |_ctx, g, sink| {
            let dx = sink.slot(x, &[c, h, w]);
            let gd = g.data();
            for ch in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dx[ch * h * w + (y / 2) * w + xx / 2] += gd[ch * h2 * w2 + y * w2 + xx];
                    }
                }
            }
        })
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
}
