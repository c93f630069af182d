//! Forward kernels shared by the tensor API and the autodiff tape.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::Shape {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
            context: "matmul",
        });
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let out = mm(a.data(), (m, k), false, b.data(), (k, n), false);
    Tensor::new(vec![m, n], out)
}

/// `op(a) · op(b)` where `op` optionally transposes. Dims are the stored
/// (rows, cols) of each operand.
pub(crate) fn mm<T: Scalar>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
) -> Vec<T> {
    let (m, _k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut c = vec![T::zero(); m * n];
    mm_into(a, (ar, ac), ta, b, (br, bc), tb, &mut c, T::zero());
    c
}

/// `c <- op(a)·op(b) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_into<T: Scalar>(
    a: &[T],
    (ar, ac): (usize, usize),
    ta: bool,
    b: &[T],
    (br, bc): (usize, usize),
    tb: bool,
    c: &mut [T],
    beta: T,
) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(src[at(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] /= total;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_rows_inplace<T: Scalar>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// Normalized rows plus per-row reciprocal std, kept for the backward pass.
pub(crate) struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], cols: usize, eps: T) -> NormStats<T> {
    let mut xhat = vec![T::zero(); x.len()];
    let rows = x.len() / cols;
    let mut rstd = Vec::with_capacity(rows);
    let inv_n = T::one() / T::of(cols as f64);
    for (src, dst) in x.chunks(cols).zip(xhat.chunks_mut(cols)) {
        let mean = src.iter().fold(T::zero(), |a, &b| a + b) * inv_n;
        let var = src
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            * inv_n;
        let r = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    NormStats { xhat, rstd }
}

/// Layer normalization over the last axis followed by the affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, cols) = x.as_matrix_dims();
    if gamma.numel() != cols || beta.numel() != cols {
        return Err(Error::Shape {
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
            context: "layer_norm affine",
        });
    }
    let stats = layer_norm_rows(x.data(), cols, eps);
    let mut out = stats.xhat;
    apply_affine(&mut out, gamma.data(), beta.data());
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn apply_affine<T: Scalar>(rows: &mut [T], gamma: &[T], beta: &[T]) {
    let cols = gamma.len();
    for row in rows.chunks_mut(cols) {
        for ((v, &g), &b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
}

/// Geometry of a 3×3 / padding-1 convolution over one `C×H×W` image.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) const KSIZE: usize = 3;
const PAD: isize = 1;

impl ConvGeom {
    pub fn for_input(c_in: usize, h: usize, w: usize, stride: usize) -> Result<Self> {
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape {
                lhs: vec![c_in, h, w],
                rhs: vec![stride],
                context: "conv2d spatial dims must be divisible by stride",
            });
        }
        Ok(Self {
            c_in,
            h,
            w,
            stride,
            ho: h / stride,
            wo: w / stride,
        })
    }

    fn patch_rows(&self) -> usize {
        self.c_in * KSIZE * KSIZE
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(patch_row, out_pixel, in_index)
        for c in 0..self.c_in {
            for ky in 0..KSIZE {
                for kx in 0..KSIZE {
                    let pr = (c * KSIZE + ky) * KSIZE + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride) as isize + ky as isize - PAD;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride) as isize + kx as isize - PAD;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(
                                pr,
                                oy * self.wo + ox,
                                (c * self.h + iy as usize) * self.w + ix as usize,
                            );
                        }
                    }
                }
            }
        }
    }

    pub fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let npix = self.ho * self.wo;
        let mut cols = vec![T::zero(); self.patch_rows() * npix];
        self.for_each_tap(|pr, p, i| cols[pr * npix + p] = x[i]);
        cols
    }

    pub fn col2im<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let npix = self.ho * self.wo;
        let mut x = vec![T::zero(); self.c_in * self.h * self.w];
        self.for_each_tap(|pr, p, i| x[i] += cols[pr * npix + p]);
        x
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let xs = x.shape();
    let ks = k.shape();
    if xs.len() != 3 || ks.len() != 4 || ks[2] != KSIZE || ks[3] != KSIZE {
        return Err(Error::Shape {
            lhs: xs.to_vec(),
            rhs: ks.to_vec(),
            context: "conv expects C×H×W input and A×B×3×3 kernel",
        });
    }
    Ok((xs[0], xs[1], xs[2], ks[0], ks[1]))
}

/// Cross-correlation with a `C'×C×3×3` kernel, padding 1.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w, c_out, kc) = conv_dims(x, k)?;
    if kc != c {
        return Err(Error::Shape {
            lhs: x.shape().to_vec(),
            rhs: k.shape().to_vec(),
            context: "conv2d channel mismatch",
        });
    }
    let g = ConvGeom::for_input(c, h, w, stride)?;
    let cols = g.im2col(x.data());
    let npix = g.ho * g.wo;
    let out = mm(k.data(), (c_out, c * 9), false, &cols, (c * 9, npix), false);
    Tensor::new(vec![c_out, g.ho, g.wo], out)
}

/// Adjoint of [`conv2d`]: maps `C'×h×w` back to `C×(h·s)×(w·s)` with the
/// same `C'×C×3×3` kernel.
pub fn conv2d_transpose<T: Scalar>(
    y: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let (c_y, ho, wo, kc_out, c) = conv_dims(y, k)?;
    if kc_out != c_y || stride == 0 {
        return Err(Error::Shape {
            lhs: y.shape().to_vec(),
            rhs: k.shape().to_vec(),
            context: "conv2d_transpose channel mismatch",
        });
    }
    let g = ConvGeom::for_input(c, ho * stride, wo * stride, stride)?;
    let cols = mm(k.data(), (c_y, c * 9), true, y.data(), (c_y, ho * wo), false);
    Tensor::new(vec![c, g.h, g.w], g.col2im(&cols))
}

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let inner = c * (x + T::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0 * 0.044715) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
