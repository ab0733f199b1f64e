//! Forward and backward kernels for the dense ops used by the model.
//!
//! Every reduction runs sequentially in a fixed order; parallelism is only
//! ever across independent output elements, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

const PAR_MIN: usize = 1 << 14;

// ── matmul ────────────────────────────────────────────────────────────

/// Batch layout of a matmul: `a` is `[.., m, k]`, `b` is `[.., k, n]`.
/// Batch dims must be equal, or one side has none (broadcast).
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims, TensorError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(mismatch());
    }
    let batch_shape = match (ab.is_empty(), bb.is_empty()) {
        (_, true) => ab,
        (true, false) => bb,
        (false, false) if ab == bb => ab,
        _ => return Err(mismatch()),
    };
    let mut out_shape = batch_shape.to_vec();
    out_shape.extend([am[0], bm[1]]);
    Ok(MatmulDims {
        batch: batch_shape.iter().product(),
        a_batched: !ab.is_empty(),
        b_batched: !bb.is_empty(),
        m: am[0],
        k: am[1],
        n: bm[1],
        out_shape,
    })
}

/// `c[m,n] = a[m,k] · b[k,n]`
fn mm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (i, row) in c.chunks_mut(n).enumerate() {
        row.fill(T::zero());
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `c[m,k] = a[m,n] · b[k,n]ᵀ`
fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    for (i, row) in c.chunks_mut(k).enumerate() {
        let arow = &a[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (o, &gv) in crow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

pub(crate) fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![T::zero(); d.batch * m * n];
    let work = |(bi, c): (usize, &mut [T])| {
        let ao = if d.a_batched { bi * m * k } else { 0 };
        let bo = if d.b_batched { bi * k * n } else { 0 };
        mm(&a.data()[ao..ao + m * k], &b.data()[bo..bo + k * n], c, k, n);
    };
    if d.batch > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(work);
    } else if m * k * n >= PAR_MIN {
        // split rows of the single product
        let rows = (m / rayon::current_num_threads().max(1)).max(1);
        out.par_chunks_mut(rows * n).enumerate().for_each(|(ci, c)| {
            let r0 = ci * rows;
            let r1 = r0 + c.len() / n;
            mm(&a.data()[r0 * k..r1 * k], b.data(), c, k, n);
        });
    } else {
        work((0, &mut out));
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

/// Gradients of `c = a · b` given `g = dL/dc`.
pub(crate) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    let gd = g.data();
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); a.len()];
        if d.a_batched {
            da.par_chunks_mut(m * k).enumerate().for_each(|(bi, c)| {
                let bo = if d.b_batched { bi * k * n } else { 0 };
                mm_nt(&gd[bi * m * n..(bi + 1) * m * n], &b.data()[bo..bo + k * n], c, k, n);
            });
        } else {
            let mut tmp = vec![T::zero(); m * k];
            for bi in 0..d.batch {
                mm_nt(&gd[bi * m * n..(bi + 1) * m * n], &b.data()[bi * k * n..(bi + 1) * k * n], &mut tmp, k, n);
                for (o, &t) in da.iter_mut().zip(&tmp) {
                    *o = *o + t;
                }
            }
        }
        Tensor::from_parts(a.shape().to_vec(), da)
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); b.len()];
        if d.b_batched {
            db.par_chunks_mut(k * n).enumerate().for_each(|(bi, c)| {
                let ao = if d.a_batched { bi * m * k } else { 0 };
                mm_tn_acc(&a.data()[ao..ao + m * k], &gd[bi * m * n..(bi + 1) * m * n], c, m, k, n);
            });
        } else if d.batch == 1 && k * n > 1 && m * k * n >= PAR_MIN {
            // rows of db are independent
            db.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
                for i in 0..m {
                    let av = a.data()[i * k + p];
                    for (o, &gv) in row.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *o = *o + av * gv;
                    }
                }
            });
        } else {
            for bi in 0..d.batch {
                mm_tn_acc(&a.data()[bi * m * k..(bi + 1) * m * k], &gd[bi * m * n..(bi + 1) * m * n], &mut db, m, k, n);
            }
        }
        Tensor::from_parts(b.shape().to_vec(), db)
    });
    (da, db)
}

// ── conv3d ────────────────────────────────────────────────────────────

/// Geometry of a cubic-kernel 3D convolution on a `[C, H, W, D]` input.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub inp: [usize; 3],
    pub out: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        w: &[usize],
        b: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, TensorError> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv3d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 5 || w[1] != x[0] || w[2] != w[3] || w[3] != w[4] {
            return Err(mismatch());
        }
        if b != [w[0]] {
            return Err(TensorError::ShapeMismatch {
                op: "conv3d bias",
                lhs: b.to_vec(),
                rhs: vec![w[0]],
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv3d",
                msg: "stride must be positive".into(),
            });
        }
        let k = w[2];
        let mut out = [0; 3];
        for ax in 0..3 {
            let padded = x[ax + 1] + 2 * pad;
            if padded < k {
                return Err(TensorError::InvalidArgument {
                    op: "conv3d",
                    msg: format!("kernel {k} larger than padded input {x:?} (pad {pad})"),
                });
            }
            out[ax] = (padded - k) / stride + 1;
        }
        Ok(Self {
            c_in: x[0],
            c_out: w[0],
            k,
            stride,
            pad,
            inp: [x[1], x[2], x[3]],
            out,
        })
    }

    /// Output indices `o` along `axis` with `0 <= o*stride + off - pad < in`.
    fn valid(&self, axis: usize, off: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.pad as i64);
        let (i, o) = (self.inp[axis] as i64, self.out[axis] as i64);
        let off = off as i64;
        let lo = (p - off).max(0);
        let lo = (lo + s - 1) / s;
        let hi = (i - 1 + p - off).div_euclid(s) + 1;
        let hi = hi.min(o);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    fn in_index(&self, o: usize, off: usize) -> usize {
        o * self.stride + off - self.pad
    }

    fn out_vox(&self) -> usize {
        self.out.iter().product()
    }

    fn in_vox(&self) -> usize {
        self.inp.iter().product()
    }
}

/// Stride-1 convolution laid out on the zero-padded grid. An output voxel
/// `(y, x, z)` lives at flat position `q = (y·Wp + x)·Dp + z`, and the input
/// tap `(kh, kw, kd)` it reads sits at `q + (kh·Wp + kw)·Dp + kd` in the
/// padded input. Every tap then becomes one long contiguous axpy or dot over
/// `q ∈ [0, lq)`; positions in the gaps between output rows are computed and
/// discarded.
struct FlatConv {
    padded: [usize; 3],
    lq: usize,
    offsets: Vec<usize>,
}

impl FlatConv {
    fn new(g: &ConvGeom) -> Self {
        let padded = g.inp.map(|n| n + 2 * g.pad);
        let [_, wp, dp] = padded;
        let [oh, ow, od] = g.out;
        let lq = ((oh - 1) * wp + ow - 1) * dp + od;
        let k = g.k;
        let mut offsets = Vec::with_capacity(k * k * k);
        for kh in 0..k {
            for kw in 0..k {
                for kd in 0..k {
                    offsets.push((kh * wp + kw) * dp + kd);
                }
            }
        }
        Self { padded, lq, offsets }
    }

    fn padded_len(&self) -> usize {
        self.padded.iter().product()
    }

    /// Copies a `dims` grid into a zeroed buffer of `outer` dims at `shift`.
    fn embed<T: Scalar>(src: &[T], dims: [usize; 3], outer: [usize; 3], shift: usize, len: usize) -> Vec<T> {
        let mut buf = vec![T::zero(); len];
        for y in 0..dims[0] {
            for x in 0..dims[1] {
                let s = (y * dims[1] + x) * dims[2];
                let d = ((y + shift) * outer[1] + x + shift) * outer[2] + shift;
                buf[d..d + dims[2]].copy_from_slice(&src[s..s + dims[2]]);
            }
        }
        buf
    }

    /// Inverse of [`FlatConv::embed`].
    fn extract<T: Scalar>(buf: &[T], dims: [usize; 3], outer: [usize; 3], shift: usize, dst: &mut [T]) {
        for y in 0..dims[0] {
            for x in 0..dims[1] {
                let d = (y * dims[1] + x) * dims[2];
                let s = ((y + shift) * outer[1] + x + shift) * outer[2] + shift;
                dst[d..d + dims[2]].copy_from_slice(&buf[s..s + dims[2]]);
            }
        }
    }

    fn padded_inputs<T: Scalar>(&self, g: &ConvGeom, xd: &[T]) -> Vec<Vec<T>> {
        let ivox = g.in_vox();
        (0..g.c_in)
            .map(|ci| Self::embed(&xd[ci * ivox..(ci + 1) * ivox], g.inp, self.padded, g.pad, self.padded_len()))
            .collect()
    }

    fn flat_grads<T: Scalar>(&self, g: &ConvGeom, gd: &[T]) -> Vec<Vec<T>> {
        let ovox = g.out_vox();
        (0..g.c_out)
            .map(|co| Self::embed(&gd[co * ovox..(co + 1) * ovox], g.out, self.padded, 0, self.lq))
            .collect()
    }
}

fn axpy<T: Scalar>(dst: &mut [T], a: T, src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o = *o + a * v;
    }
}

/// Dot product with eight fixed partial sums, combined in a fixed order.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

fn conv3d_flat<T: Scalar>(g: &ConvGeom, xd: &[T], wd: &[T], bd: &[T]) -> Vec<T> {
    let f = FlatConv::new(g);
    let k3 = g.k * g.k * g.k;
    let xpad = f.padded_inputs(g, xd);
    let mut out = vec![T::zero(); g.c_out * g.out_vox()];
    out.par_chunks_mut(g.out_vox()).enumerate().for_each(|(co, plane)| {
        let mut acc = vec![T::zero(); f.lq];
        for (ci, xp) in xpad.iter().enumerate() {
            let wrow = &wd[(co * g.c_in + ci) * k3..(co * g.c_in + ci + 1) * k3];
            for (&off, &wv) in f.offsets.iter().zip(wrow) {
                axpy(&mut acc, wv, &xp[off..off + f.lq]);
            }
        }
        FlatConv::extract(&acc, g.out, f.padded, 0, plane);
        plane.iter_mut().for_each(|v| *v = *v + bd[co]);
    });
    out
}

pub(crate) fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, pad)?;
    if stride == 1 {
        let out = conv3d_flat(&g, x.data(), w.data(), b.data());
        return Ok(Tensor::from_parts(vec![g.c_out, g.out[0], g.out[1], g.out[2]], out));
    }
    let k = g.k;
    let k3 = k * k * k;
    let [_, iw, id] = g.inp;
    let [_, ow, od] = g.out;
    let mut out = vec![T::zero(); g.c_out * g.out_vox()];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    out.par_chunks_mut(g.out_vox())
        .enumerate()
        .for_each(|(co, plane)| {
            plane.fill(bd[co]);
            for ci in 0..g.c_in {
                let xin = &xd[ci * g.in_vox()..(ci + 1) * g.in_vox()];
                for kh in 0..k {
                    let (h0, h1) = g.valid(0, kh);
                    for kw in 0..k {
                        let (w0, w1) = g.valid(1, kw);
                        for kd in 0..k {
                            let (d0, d1) = g.valid(2, kd);
                            if d1 == d0 {
                                continue;
                            }
                            let wv = wd[(co * g.c_in + ci) * k3 + (kh * k + kw) * k + kd];
                            for y in h0..h1 {
                                let yi = g.in_index(y, kh);
                                for xo in w0..w1 {
                                    let xi = g.in_index(xo, kw);
                                    let orow = &mut plane[(y * ow + xo) * od..(y * ow + xo + 1) * od];
                                    let irow = &xin[(yi * iw + xi) * id..(yi * iw + xi + 1) * id];
                                    if g.stride == 1 {
                                        let s0 = d0 + kd - g.pad;
                                        let src = &irow[s0..s0 + (d1 - d0)];
                                        for (o, &v) in orow[d0..d1].iter_mut().zip(src) {
                                            *o = *o + wv * v;
                                        }
                                    } else {
                                        for z in d0..d1 {
                                            orow[z] = orow[z] + wv * irow[g.in_index(z, kd)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(vec![g.c_out, g.out[0], g.out[1], g.out[2]], out))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), &[w.shape()[0]], stride, pad)
        .expect("validated in forward");
    let k = g.k;
    let k3 = k * k * k;
    let [_, iw, id] = g.inp;
    let [_, ow, od] = g.out;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let ovox = g.out_vox();
    let ivox = g.in_vox();

    if stride == 1 {
        let f = FlatConv::new(&g);
        let gq = f.flat_grads(&g, gd);
        let dx = need[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            dx.par_chunks_mut(ivox).enumerate().for_each(|(ci, plane)| {
                let mut acc = vec![T::zero(); f.padded_len()];
                for (co, gp) in gq.iter().enumerate() {
                    let wrow = &wd[(co * g.c_in + ci) * k3..(co * g.c_in + ci + 1) * k3];
                    for (&off, &wv) in f.offsets.iter().zip(wrow) {
                        axpy(&mut acc[off..off + f.lq], wv, gp);
                    }
                }
                FlatConv::extract(&acc, g.inp, f.padded, g.pad, plane);
            });
            Tensor::from_parts(x.shape().to_vec(), dx)
        });
        let dw = need[1].then(|| {
            let xpad = f.padded_inputs(&g, xd);
            let mut dw = vec![T::zero(); w.len()];
            dw.par_chunks_mut(g.c_in * k3).enumerate().for_each(|(co, wrow)| {
                for (ci, xp) in xpad.iter().enumerate() {
                    for (t, &off) in f.offsets.iter().enumerate() {
                        wrow[ci * k3 + t] = dot(&gq[co], &xp[off..off + f.lq]);
                    }
                }
            });
            Tensor::from_parts(w.shape().to_vec(), dw)
        });
        let db = need[2].then(|| {
            let db = gd.chunks(ovox).map(|c| c.iter().copied().sum()).collect();
            Tensor::from_parts(vec![g.c_out], db)
        });
        return ConvGrads { dx, dw, db };
    }

    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(ivox).enumerate().for_each(|(ci, plane)| {
            for co in 0..g.c_out {
                let gplane = &gd[co * ovox..(co + 1) * ovox];
                for kh in 0..k {
                    let (h0, h1) = g.valid(0, kh);
                    for kw in 0..k {
                        let (w0, w1) = g.valid(1, kw);
                        for kd in 0..k {
                            let (d0, d1) = g.valid(2, kd);
                            if d1 == d0 {
                                continue;
                            }
                            let wv = wd[(co * g.c_in + ci) * k3 + (kh * k + kw) * k + kd];
                            for y in h0..h1 {
                                let yi = g.in_index(y, kh);
                                for xo in w0..w1 {
                                    let xi = g.in_index(xo, kw);
                                    let grow = &gplane[(y * ow + xo) * od..(y * ow + xo + 1) * od];
                                    let irow = &mut plane[(yi * iw + xi) * id..(yi * iw + xi + 1) * id];
                                    if g.stride == 1 {
                                        let s0 = d0 + kd - g.pad;
                                        let dst = &mut irow[s0..s0 + (d1 - d0)];
                                        for (o, &v) in dst.iter_mut().zip(&grow[d0..d1]) {
                                            *o = *o + wv * v;
                                        }
                                    } else {
                                        for z in d0..d1 {
                                            let zi = g.in_index(z, kd);
                                            irow[zi] = irow[zi] + wv * grow[z];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
        Tensor::from_parts(x.shape().to_vec(), dx)
    });

    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); w.len()];
        dw.par_chunks_mut(g.c_in * k3).enumerate().for_each(|(co, wrow)| {
            let gplane = &gd[co * ovox..(co + 1) * ovox];
            for ci in 0..g.c_in {
                let xin = &xd[ci * ivox..(ci + 1) * ivox];
                for kh in 0..k {
                    let (h0, h1) = g.valid(0, kh);
                    for kw in 0..k {
                        let (w0, w1) = g.valid(1, kw);
                        for kd in 0..k {
                            let (d0, d1) = g.valid(2, kd);
                            let mut acc = T::zero();
                            if d1 > d0 {
                                for y in h0..h1 {
                                    let yi = g.in_index(y, kh);
                                    for xo in w0..w1 {
                                        let xi = g.in_index(xo, kw);
                                        let grow = &gplane[(y * ow + xo) * od..(y * ow + xo + 1) * od];
                                        let irow = &xin[(yi * iw + xi) * id..(yi * iw + xi + 1) * id];
                                        if g.stride == 1 {
                                            let s0 = d0 + kd - g.pad;
                                            let part: T = grow[d0..d1]
                                                .iter()
                                                .zip(&irow[s0..s0 + (d1 - d0)])
                                                .map(|(&a, &b)| a * b)
                                                .sum();
                                            acc = acc + part;
                                        } else {
                                            for z in d0..d1 {
                                                acc = acc + grow[z] * irow[g.in_index(z, kd)];
                                            }
                                        }
                                    }
                                }
                            }
                            wrow[ci * k3 + (kh * k + kw) * k + kd] = acc;
                        }
                    }
                }
            }
        });
        Tensor::from_parts(w.shape().to_vec(), dw)
    });

    let db = need[2].then(|| {
        let db = gd.chunks(ovox).map(|c| c.iter().copied().sum()).collect();
        Tensor::from_parts(vec![g.c_out], db)
    });

    ConvGrads { dx, dw, db }
}

// ── softmax / layer norm ─────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
    x.check_axis("softmax", axis)?;
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mx = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..len {
                let e = (xd[at(j)] - mx).exp();
                out[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / sum;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along `axis`.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(y.shape(), axis);
    let (yd, gd) = (y.data(), gy.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let dot: T = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), dx)
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let c = *x.shape().last().ok_or(TensorError::InvalidArgument {
        op: "layer_norm",
        msg: "rank-0 input".into(),
    })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = vec![T::zero(); x.len()];
    for (orow, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let (mean, rstd) = row_stats(row, eps);
        for j in 0..c {
            orow[j] = (row[j] - mean) * rstd * g[j] + b[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
    eps: T,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.len();
    let g = gamma.data();
    let n = T::from_f64(c as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ((dxr, row), gr) in dx.chunks_mut(c).zip(x.data().chunks(c)).zip(gy.data().chunks(c)) {
        let (mean, rstd) = row_stats(row, eps);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..c {
            let xhat = (row[j] - mean) * rstd;
            let dxhat = gr[j] * g[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgamma[j] = dgamma[j] + gr[j] * xhat;
            dbeta[j] = dbeta[j] + gr[j];
        }
        for j in 0..c {
            let xhat = (row[j] - mean) * rstd;
            let dxhat = gr[j] * g[j];
            dxr[j] = rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

// ── trilinear resize ─────────────────────────────────────────────────

/// Per-output-index source taps `(lo, hi, frac)` for an align-corners-false
/// linear resize from `n_in` to `n_out` samples, clamped at the borders.
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn check_resize<T: Scalar>(x: &Tensor<T>, target: [usize; 3]) -> Result<(), TensorError> {
    if x.rank() != 4 {
        return Err(TensorError::InvalidArgument {
            op: "trilinear_resize",
            msg: format!("expected [C, H, W, D], got {:?}", x.shape()),
        });
    }
    if target.contains(&0) {
        return Err(TensorError::InvalidArgument {
            op: "trilinear_resize",
            msg: format!("target {target:?} has a zero axis"),
        });
    }
    Ok(())
}

/// Trilinear resize of a channels-first `[C, H, W, D]` tensor.
pub fn trilinear_resize<T: Scalar>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>, TensorError> {
    check_resize(x, target)?;
    let s = x.shape();
    let (c, inp) = (s[0], [s[1], s[2], s[3]]);
    let taps: Vec<_> = (0..3).map(|a| linear_taps(inp[a], target[a])).collect();
    let ivox: usize = inp.iter().product();
    let ovox: usize = target.iter().product();
    let mut out = vec![T::zero(); c * ovox];
    out.par_chunks_mut(ovox).enumerate().for_each(|(ch, plane)| {
        let src = &x.data()[ch * ivox..(ch + 1) * ivox];
        let at = |h: usize, w: usize, d: usize| src[(h * inp[1] + w) * inp[2] + d].as_f64();
        let mut o = 0;
        for &(h0, h1, fh) in &taps[0] {
            for &(w0, w1, fw) in &taps[1] {
                for &(d0, d1, fd) in &taps[2] {
                    let c00 = at(h0, w0, d0) * (1.0 - fd) + at(h0, w0, d1) * fd;
                    let c01 = at(h0, w1, d0) * (1.0 - fd) + at(h0, w1, d1) * fd;
                    let c10 = at(h1, w0, d0) * (1.0 - fd) + at(h1, w0, d1) * fd;
                    let c11 = at(h1, w1, d0) * (1.0 - fd) + at(h1, w1, d1) * fd;
                    let c0 = c00 * (1.0 - fw) + c01 * fw;
                    let c1 = c10 * (1.0 - fw) + c11 * fw;
                    plane[o] = T::from_f64(c0 * (1.0 - fh) + c1 * fh);
                    o += 1;
                }
            }
        }
    });
    Ok(Tensor::from_parts(vec![c, target[0], target[1], target[2]], out))
}

/// Adjoint of [`trilinear_resize`]: scatters output gradients back onto the
/// source grid.
pub(crate) fn trilinear_resize_backward<T: Scalar>(gy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let c = in_shape[0];
    let inp = [in_shape[1], in_shape[2], in_shape[3]];
    let tgt = [gy.shape()[1], gy.shape()[2], gy.shape()[3]];
    let taps: Vec<_> = (0..3).map(|a| linear_taps(inp[a], tgt[a])).collect();
    let ivox: usize = inp.iter().product();
    let ovox: usize = tgt.iter().product();
    let mut dx = vec![T::zero(); c * ivox];
    dx.par_chunks_mut(ivox).enumerate().for_each(|(ch, plane)| {
        let g = &gy.data()[ch * ovox..(ch + 1) * ovox];
        let mut acc = vec![0.0f64; ivox];
        let idx = |h: usize, w: usize, d: usize| (h * inp[1] + w) * inp[2] + d;
        let mut o = 0;
        for &(h0, h1, fh) in &taps[0] {
            for &(w0, w1, fw) in &taps[1] {
                for &(d0, d1, fd) in &taps[2] {
                    let v = g[o].as_f64();
                    o += 1;
                    for (h, wh) in [(h0, 1.0 - fh), (h1, fh)] {
                        for (w, ww) in [(w0, 1.0 - fw), (w1, fw)] {
                            acc[idx(h, w, d0)] += v * wh * ww * (1.0 - fd);
                            acc[idx(h, w, d1)] += v * wh * ww * fd;
                        }
                    }
                }
            }
        }
        for (p, a) in plane.iter_mut().zip(acc) {
            *p = T::from_f64(a);
        }
    });
    Tensor::from_parts(in_shape.to_vec(), dx)
}

// ── activations ──────────────────────────────────────────────────────

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_loops_and_adjoint() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for (k, stride, pad, dims) in [(3, 1, 1, [5, 4, 6]), (1, 1, 0, [3, 3, 2]), (2, 2, 0, [4, 6, 2]), (3, 1, 0, [4, 5, 3])] {
            let (ci, co) = (2, 3);
            let x = Tensor::<f64>::randn(&[ci, dims[0], dims[1], dims[2]], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(&[co, ci, k, k, k], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[co], 1.0, &mut rng);
            let y = conv3d(&x, &w, &b, stride, pad).unwrap();
            let o = [y.shape()[1], y.shape()[2], y.shape()[3]];
            let at = |c: usize, p: [i64; 3]| -> f64 {
                if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
                    0.0
                } else {
                    x.data()[((c * dims[0] + p[0] as usize) * dims[1] + p[1] as usize) * dims[2] + p[2] as usize]
                }
            };
            for c in 0..co {
                for i in 0..o[0] {
                    for j in 0..o[1] {
                        for l in 0..o[2] {
                            let mut acc = b.data()[c];
                            for cc in 0..ci {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for d in 0..k {
                                            let p = [(i * stride + a) as i64 - pad as i64, (j * stride + bb) as i64 - pad as i64, (l * stride + d) as i64 - pad as i64];
                                            acc += w.data()[(((c * ci + cc) * k + a) * k + bb) * k + d] * at(cc, p);
                                        }
                                    }
                                }
                            }
                            let got = y.data()[((c * o[0] + i) * o[1] + j) * o[2] + l];
                            assert!((got - acc).abs() < 1e-12, "k{k} s{stride}: {got} vs {acc}");
                        }
                    }
                }
            }
            // adjoint identities for the backward pass
            let gy = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng);
            let grads = conv3d_backward(&x, &w, &gy, stride, pad, [true, true, true]);
            let zero_b = Tensor::zeros(&[co]);
            let inner = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = inner(&conv3d(&x, &w, &zero_b, stride, pad).unwrap(), &gy);
            assert!((lhs - inner(&x, grads.dx.as_ref().unwrap())).abs() < 1e-9);
            assert!((lhs - inner(&w, grads.dw.as_ref().unwrap())).abs() < 1e-9);
        }
    }

    #[test]
    fn valid_ranges_cover_padding() {
        let g = ConvGeom::new(&[1, 4, 4, 4], &[1, 1, 3, 3, 3], &[1], 1, 1).unwrap();
        assert_eq!(g.out, [4, 4, 4]);
        assert_eq!(g.valid(0, 0), (1, 4));
        assert_eq!(g.valid(0, 1), (0, 4));
        assert_eq!(g.valid(0, 2), (0, 3));
        let g = ConvGeom::new(&[1, 4, 4, 4], &[1, 1, 2, 2, 2], &[1], 2, 0).unwrap();
        assert_eq!(g.out, [2, 2, 2]);
        assert_eq!(g.valid(0, 1), (0, 2));
    }

    #[test]
    fn linear_taps_identity_when_same_size() {
        for (i, &(lo, hi, f)) in linear_taps(5, 5).iter().enumerate() {
            assert_eq!(lo, i);
            assert!(f.abs() < 1e-12 || hi == lo);
        }
    }

    #[test]
    fn matmul_rejects_bad_batch() {
        assert!(matmul_dims(&[2, 3, 4], &[3, 4, 5]).is_err());
        assert!(matmul_dims(&[3, 4], &[5, 6]).is_err());
        assert_eq!(matmul_dims(&[2, 3, 4], &[4, 5]).unwrap().out_shape, vec![2, 3, 5]);
        assert_eq!(matmul_dims(&[3, 4], &[2, 4, 5]).unwrap().out_shape, vec![2, 3, 5]);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
