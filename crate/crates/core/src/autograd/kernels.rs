//! Raw forward/backward loops over row-major slices.
//!
//! Every kernel iterates samples in order and never mixes samples in the
//! forward direction, so a sample's output does not depend on which batch it
//! was evaluated in.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_len: usize,
    pub out_len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dGeom {
    /// Output positions `lo` for which `lo * stride + k - pad` lands inside the input.
    #[inline]
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo_min = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        // lo * stride + k - pad <= in_len - 1
        let limit = self.in_len + self.pad;
        let lo_end = if limit > k {
            ((limit - 1 - k) / self.stride + 1).min(self.out_len)
        } else {
            0
        };
        (lo_min, lo_end.max(lo_min))
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with four interleaved partial sums so the loop vectorizes.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl Conv1dGeom {
    /// Unfolds one sample `[in_ch, in_len]` into `[in_ch * kernel, out_len]`
    /// with `col[(c, k), lo] = x[c, lo * stride + k - pad]` (zero outside).
    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let lo_n = self.out_len;
        for c in 0..self.in_ch {
            let xin = &x[c * self.in_len..(c + 1) * self.in_len];
            for k in 0..self.kernel {
                let row = &mut col[(c * self.kernel + k) * lo_n..(c * self.kernel + k + 1) * lo_n];
                let (lo0, lo1) = self.valid_range(k);
                row[..lo0].iter_mut().for_each(|v| *v = T::zero());
                row[lo1..].iter_mut().for_each(|v| *v = T::zero());
                if lo1 > lo0 {
                    let start = lo0 * self.stride + k - self.pad;
                    for (v, &xv) in row[lo0..lo1].iter_mut().zip(xin[start..].iter().step_by(self.stride)) {
                        *v = xv;
                    }
                }
            }
        }
    }

    /// Adds `col` back onto the sample it was unfolded from.
    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let lo_n = self.out_len;
        for c in 0..self.in_ch {
            let xin = &mut x[c * self.in_len..(c + 1) * self.in_len];
            for k in 0..self.kernel {
                let row = &col[(c * self.kernel + k) * lo_n..(c * self.kernel + k + 1) * lo_n];
                let (lo0, lo1) = self.valid_range(k);
                if lo1 > lo0 {
                    let start = lo0 * self.stride + k - self.pad;
                    for (xv, &v) in xin[start..].iter_mut().step_by(self.stride).zip(&row[lo0..lo1]) {
                        *xv += v;
                    }
                }
            }
        }
    }

    fn col_len(&self) -> usize {
        self.in_ch * self.kernel * self.out_len
    }

    /// `y[o, :] += sum_{ck} w[o, ck] * col[ck, :]` for one sample.
    fn apply_cols<T: Scalar>(&self, w: &[T], col: &[T], y: &mut [T]) {
        let (ck, lo_n) = (self.in_ch * self.kernel, self.out_len);
        for o in 0..self.out_ch {
            combine_rows(&mut y[o * lo_n..(o + 1) * lo_n], &w[o * ck..(o + 1) * ck], col, 1);
        }
    }

    /// `gcol[ck, :] = sum_o w[o, ck] * gy[o, :]` for one sample.
    fn cols_grad<T: Scalar>(&self, w: &[T], gy: &[T], gcol: &mut [T]) {
        let (ck, lo_n) = (self.in_ch * self.kernel, self.out_len);
        gcol.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..ck {
            combine_rows(&mut gcol[j * lo_n..(j + 1) * lo_n], &w[j..], gy, ck);
        }
    }

    /// `gw[o, ck] += gy[o, :] . col[ck, :]` for one sample.
    fn weight_grad<T: Scalar>(&self, col: &[T], gy: &[T], gw: &mut [T]) {
        let (ck, lo_n) = (self.in_ch * self.kernel, self.out_len);
        for o in 0..self.out_ch {
            let g = &gy[o * lo_n..(o + 1) * lo_n];
            let mut j = 0;
            while j + 4 <= ck {
                let rows = [0, 1, 2, 3].map(|i| &col[(j + i) * lo_n..(j + i + 1) * lo_n]);
                let d = dot4(g, rows);
                for i in 0..4 {
                    gw[o * ck + j + i] += d[i];
                }
                j += 4;
            }
            for j in j..ck {
                gw[o * ck + j] += dot(g, &col[j * lo_n..(j + 1) * lo_n]);
            }
        }
    }
}

/// `out += sum_i coef[i * step] * rows[i]` where `rows` holds
/// `out.len()`-long rows back to back. Terms are added in row order.
fn combine_rows<T: Scalar>(out: &mut [T], coef: &[T], rows: &[T], step: usize) {
    let n = out.len();
    let count = rows.len() / n.max(1);
    let mut i = 0;
    while i + 4 <= count {
        let (a, b, c, d) = (coef[i * step], coef[(i + 1) * step], coef[(i + 2) * step], coef[(i + 3) * step]);
        let r = &rows[i * n..(i + 4) * n];
        let (r0, rest) = r.split_at(n);
        let (r1, rest) = rest.split_at(n);
        let (r2, r3) = rest.split_at(n);
        let (r0, r1, r2, r3) = (&r0[..n], &r1[..n], &r2[..n], &r3[..n]);
        for ((((v, &x0), &x1), &x2), &x3) in out.iter_mut().zip(r0).zip(r1).zip(r2).zip(r3) {
            let mut t = *v;
            t += a * x0;
            t += b * x1;
            t += c * x2;
            t += d * x3;
            *v = t;
        }
        i += 4;
    }
    for i in i..count {
        axpy(out, coef[i * step], &rows[i * n..(i + 1) * n]);
    }
}

/// Four dot products of `g` against `rows`, sharing the loads of `g`.
fn dot4<T: Scalar>(g: &[T], rows: [&[T]; 4]) -> [T; 4] {
    let mut out = [T::zero(); 4];
    for (o, r) in out.iter_mut().zip(rows) {
        *o = dot(g, r);
    }
    out
}

fn fill_bias<T: Scalar>(y: &mut [T], bias: Option<&[T]>, len: usize) {
    match bias {
        Some(bs) => y.chunks_mut(len).zip(bs).for_each(|(row, &b)| row.iter_mut().for_each(|v| *v = b)),
        None => y.iter_mut().for_each(|v| *v = T::zero()),
    }
}

fn bias_grad<T: Scalar>(gy: &[T], len: usize, gb: &mut [T]) {
    for (g, row) in gb.iter_mut().zip(gy.chunks(len)) {
        *g += row.iter().copied().sum::<T>();
    }
}

/// `y[b,o,lo] = bias[o] + sum_{c,k} w[o,c,k] * x[b,c,lo*s+k-p]`.
pub fn conv1d_forward<T: Scalar>(g: &Conv1dGeom, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let (xs, ys) = (g.in_ch * g.in_len, g.out_ch * g.out_len);
    let mut col = vec![T::zero(); g.col_len()];
    for b in 0..g.batch {
        let yb = &mut y[b * ys..(b + 1) * ys];
        fill_bias(yb, bias, g.out_len);
        g.im2col(&x[b * xs..(b + 1) * xs], &mut col);
        g.apply_cols(w, &col, yb);
    }
}

/// Gradients of [`conv1d_forward`]. Weight and bias gradients accumulate over
/// the batch in sample order.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Scalar>(
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (xs, ys) = (g.in_ch * g.in_len, g.out_ch * g.out_len);
    let mut col = vec![T::zero(); g.col_len()];
    for b in 0..g.batch {
        let gyb = &gy[b * ys..(b + 1) * ys];
        if let Some(gb) = gb.as_deref_mut() {
            bias_grad(gyb, g.out_len, gb);
        }
        if let Some(gw) = gw.as_deref_mut() {
            g.im2col(&x[b * xs..(b + 1) * xs], &mut col);
            g.weight_grad(&col, gyb, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            g.cols_grad(w, gyb, &mut col);
            g.col2im(&col, &mut gx[b * xs..(b + 1) * xs]);
        }
    }
}

/// Transposed 1-D convolution; weights are laid out `[in_ch, out_ch, kernel]`.
/// Here `in_len`/`out_len` refer to this op's own input and output, and the
/// scatter is `y[b,o,l*s+k-p] += w[c,o,k] * x[b,c,l]`.
///
/// This is the input gradient of the conv1d that maps the output back onto
/// the input, so every loop below reuses that conv's geometry.
pub fn conv_t1d_forward<T: Scalar>(g: &Conv1dGeom, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let adj = adjoint_geom(g);
    let (xs, ys) = (g.in_ch * g.in_len, g.out_ch * g.out_len);
    let mut col = vec![T::zero(); adj.col_len()];
    for b in 0..g.batch {
        let yb = &mut y[b * ys..(b + 1) * ys];
        fill_bias(yb, bias, g.out_len);
        adj.cols_grad(w, &x[b * xs..(b + 1) * xs], &mut col);
        adj.col2im(&col, yb);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_t1d_backward<T: Scalar>(
    g: &Conv1dGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let adj = adjoint_geom(g);
    let (xs, ys) = (g.in_ch * g.in_len, g.out_ch * g.out_len);
    let mut col = vec![T::zero(); adj.col_len()];
    for b in 0..g.batch {
        let gyb = &gy[b * ys..(b + 1) * ys];
        if let Some(gb) = gb.as_deref_mut() {
            bias_grad(gyb, g.out_len, gb);
        }
        if gw.is_none() && gx.is_none() {
            continue;
        }
        adj.im2col(gyb, &mut col);
        if let Some(gw) = gw.as_deref_mut() {
            adj.weight_grad(&col, &x[b * xs..(b + 1) * xs], gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            adj.apply_cols(w, &col, &mut gx[b * xs..(b + 1) * xs]);
        }
    }
}

/// The conv1d running from a transposed conv's output back to its input.
fn adjoint_geom(g: &Conv1dGeom) -> Conv1dGeom {
    Conv1dGeom {
        batch: g.batch,
        in_ch: g.out_ch,
        out_ch: g.in_ch,
        in_len: g.out_len,
        out_len: g.in_len,
        kernel: g.kernel,
        stride: g.stride,
        pad: g.pad,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

pub fn conv2d_forward<T: Scalar>(g: &Conv2dGeom, x: &[T], w: &[T], bias: Option<&[T]>, y: &mut [T]) {
    let (ci, co) = (g.in_ch, g.out_ch);
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    for b in 0..g.batch {
        for o in 0..co {
            let out = &mut y[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            let b0 = bias.map_or(T::zero(), |bs| bs[o]);
            out.iter_mut().for_each(|v| *v = b0);
            for c in 0..ci {
                let xin = &x[(b * ci + c) * ih * iw..(b * ci + c + 1) * ih * iw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((o * ci + c) * g.kh + ky) * g.kw + kx];
                        for oy in 0..oh {
                            let Some(sy) = g.src(oy, ky, ih) else { continue };
                            for ox in 0..ow {
                                if let Some(sx) = g.src(ox, kx, iw) {
                                    out[oy * ow + ox] += wv * xin[sy * iw + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &Conv2dGeom,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    let (ci, co) = (g.in_ch, g.out_ch);
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    for b in 0..g.batch {
        for o in 0..co {
            let gout = &gy[(b * co + o) * oh * ow..(b * co + o + 1) * oh * ow];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += gout.iter().copied().sum::<T>();
            }
            for c in 0..ci {
                let xoff = (b * ci + c) * ih * iw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((o * ci + c) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let Some(sy) = g.src(oy, ky, ih) else { continue };
                            for ox in 0..ow {
                                if let Some(sx) = g.src(ox, kx, iw) {
                                    let go = gout[oy * ow + ox];
                                    acc += go * x[xoff + sy * iw + sx];
                                    if let Some(gx) = gx.as_deref_mut() {
                                        gx[xoff + sy * iw + sx] += wv * go;
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// `y[b,o] = bias[o] + x[b,:] . w[o,:]` with `w` laid out `[out, in]`.
pub fn dense_forward<T: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    y: &mut [T],
) {
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let wr = &w[o * n_in..(o + 1) * n_in];
            y[b * n_out + o] = bias.map_or(T::zero(), |bs| bs[o]) + dot(xr, wr);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward<T: Scalar>(
    batch: usize,
    n_in: usize,
    n_out: usize,
    x: &[T],
    w: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    mut gb: Option<&mut [T]>,
) {
    for b in 0..batch {
        let xr = &x[b * n_in..(b + 1) * n_in];
        for o in 0..n_out {
            let go = gy[b * n_out + o];
            if let Some(gb) = gb.as_deref_mut() {
                gb[o] += go;
            }
            if let Some(gw) = gw.as_deref_mut() {
                for (gwv, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                    *gwv += go * xv;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wr = &w[o * n_in..(o + 1) * n_in];
                for (gxv, &wv) in gx[b * n_in..(b + 1) * n_in].iter_mut().zip(wr) {
                    *gxv += go * wv;
                }
            }
        }
    }
}
