use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::{Tensor, TensorError};
use crate::par;
use crate::scalar::Scalar;

static MACS: AtomicU64 = AtomicU64::new(0);

/// Multiply-accumulates performed by `matmul` (and the convolutions built on
/// it) since the last reset. Process-wide.
pub fn mac_count() -> u64 {
    MACS.load(Ordering::Relaxed)
}

pub fn reset_mac_count() {
    MACS.store(0, Ordering::Relaxed);
}

/// `c = a * b` for row-major `a: m x k`, `b: k x n`. Each output element is
/// accumulated over `k` in increasing order, identical to the textbook triple
/// loop.
fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        gemm_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], n);
    }
}

#[inline]
fn gemm_row<T: Scalar>(a_row: &[T], b: &[T], c_row: &mut [T], n: usize) {
    c_row.iter_mut().for_each(|v| *v = T::zero());
    for (kk, &aik) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (cv, &bv) in c_row.iter_mut().zip(b_row) {
            *cv = *cv + aik * bv;
        }
    }
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    MACS.fetch_add((m * k * n) as u64, Ordering::Relaxed);
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    par::for_each_chunk_mut(&mut out, n, |i, row| {
        gemm_row(&ad[i * k..(i + 1) * k], bd, row, n)
    });
    Tensor::from_vec(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (r, c) = a.matrix_dims("transpose")?;
    Tensor::from_vec(vec![c, r], transpose_raw(a.data(), r, c))
}

/// Output extent of a sliding window, or an error if it is not integral.
pub fn window_extent(
    op: &'static str,
    axis: &'static str,
    extent: usize,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<usize, TensorError> {
    let padded = extent + 2 * pad;
    if window > padded {
        return Err(TensorError::WindowTooLarge { op, window, padded });
    }
    if stride == 0 || (padded - window) % stride != 0 {
        return Err(TensorError::NonIntegralExtent {
            op,
            axis,
            extent,
            pad,
            window,
            stride,
        });
    }
    Ok((padded - window) / stride + 1)
}

fn rank4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4], TensorError> {
    match t.dims() {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            got: t.shape().clone(),
        }),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one example into a `(cin*kh*kw) x (ho*wo)` patch matrix.
    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let p = self.cols();
        let mut cols = vec![T::zero(); self.rows() * p];
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dst[oy * self.wo + ox] =
                                x[(ci * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[r * p..(r + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let d = &mut dx[(ci * self.h + iy as usize) * self.w + ix as usize];
                            *d = *d + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom), TensorError> {
    let [b, cin, h, w] = rank4(input, "conv2d")?;
    let [cout, kcin, kh, kw] = rank4(kernel, "conv2d")?;
    if cin != kcin {
        return Err(TensorError::ChannelMismatch {
            op: "conv2d",
            expected: kcin,
            got: cin,
        });
    }
    let ho = window_extent("conv2d", "height", h, kh, stride, pad)?;
    let wo = window_extent("conv2d", "width", w, kw, stride, pad)?;
    Ok((
        b,
        cout,
        ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        },
    ))
}

/// 2-D cross-correlation (no kernel flip), zero padding, no bias.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>, TensorError> {
    let (b, cout, g) = conv_geom(input, kernel, stride, pad)?;
    let (r, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    MACS.fetch_add((b * cout * r * p) as u64, Ordering::Relaxed);
    let mut out = vec![T::zero(); b * cout * p];
    let (xd, wd) = (input.data(), kernel.data());
    par::for_each_chunk_mut(&mut out, cout * p, |bi, chunk| {
        let cols = g.im2col(&xd[bi * in_len..(bi + 1) * in_len]);
        gemm(wd, &cols, chunk, cout, r, p);
    });
    Tensor::from_vec(vec![b, cout, g.ho, g.wo], out)
}

/// Gradients of `conv2d` with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let (b, cout, g) = conv_geom(input, kernel, stride, pad)?;
    let expected = [b, cout, g.ho, g.wo];
    if grad_out.dims() != expected {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_backward",
            left: grad_out.shape().clone(),
            right: super::Shape::new(expected.to_vec())?,
        });
    }
    let (r, p) = (g.rows(), g.cols());
    let in_len = g.cin * g.h * g.w;
    MACS.fetch_add((2 * b * cout * r * p) as u64, Ordering::Relaxed);
    let w_t = transpose_raw(kernel.data(), cout, r);
    let (xd, gd) = (input.data(), grad_out.data());
    let per_example: Vec<(Vec<T>, Vec<T>)> = par::map_range(b, |bi| {
        let cols = g.im2col(&xd[bi * in_len..(bi + 1) * in_len]);
        let dout = &gd[bi * cout * p..(bi + 1) * cout * p];
        let cols_t = transpose_raw(&cols, r, p);
        let mut dw = vec![T::zero(); cout * r];
        gemm(dout, &cols_t, &mut dw, cout, p, r);
        let mut dcols = vec![T::zero(); r * p];
        gemm(&w_t, dout, &mut dcols, r, cout, p);
        let mut dx = vec![T::zero(); in_len];
        g.col2im_add(&dcols, &mut dx);
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(b * in_len);
    let mut dw = vec![T::zero(); cout * r];
    for (dxb, dwb) in per_example {
        dx.extend_from_slice(&dxb);
        for (acc, v) in dw.iter_mut().zip(dwb) {
            *acc = *acc + v;
        }
    }
    Ok((
        Tensor::from_vec(input.dims().to_vec(), dx)?,
        Tensor::from_vec(kernel.dims().to_vec(), dw)?,
    ))
}

/// Max pooling over `window x window` patches. Returns the pooled tensor and,
/// for every output element, the flat input index it was taken from. Ties go
/// to the lowest flat index.
pub fn maxpool2d<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    let [b, c, h, w] = rank4(input, "maxpool2d")?;
    let ho = window_extent("maxpool2d", "height", h, window, stride, 0)?;
    let wo = window_extent("maxpool2d", "width", w, window, stride, 0)?;
    let plane_out = ho * wo;
    let xd = input.data();
    let mut out = vec![T::zero(); b * c * plane_out];
    let mut idx = vec![0usize; b * c * plane_out];
    let planes: Vec<(Vec<T>, Vec<usize>)> = par::map_range(b * c, |pl| {
        let base = pl * h * w;
        let mut vals = Vec::with_capacity(plane_out);
        let mut locs = Vec::with_capacity(plane_out);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    for kx in 0..window {
                        let at = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[at] > xd[best] {
                            best = at;
                        }
                    }
                }
                vals.push(xd[best]);
                locs.push(best);
            }
        }
        (vals, locs)
    });
    for (pl, (vals, locs)) in planes.into_iter().enumerate() {
        out[pl * plane_out..(pl + 1) * plane_out].copy_from_slice(&vals);
        idx[pl * plane_out..(pl + 1) * plane_out].copy_from_slice(&locs);
    }
    Ok((Tensor::from_vec(vec![b, c, ho, wo], out)?, idx))
}

/// Routes each pooled gradient back to its recorded argmax.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    indices: &[usize],
    input_dims: &[usize],
) -> Result<Tensor<T>, TensorError> {
    if grad_out.len() != indices.len() {
        return Err(TensorError::Invalid {
            op: "maxpool2d_backward",
            detail: format!("{} gradients for {} indices", grad_out.len(), indices.len()),
        });
    }
    let mut dx = Tensor::zeros(input_dims.to_vec())?;
    let d = dx.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        d[i] = d[i] + g;
    }
    Ok(dx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::from_vec(x.dims().to_vec(), data).expect("same shape")
}

/// Gradient of relu given the forward input. The derivative at 0 is taken as 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if input.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relu_backward",
            left: input.shape().clone(),
            right: grad.shape().clone(),
        });
    }
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.dims().to_vec(), data)
}

/// Log-softmax over the last axis.
pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.dims().last().expect("rank >= 1");
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let s = row.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
        let lse = m + s.ln();
        row.iter_mut().for_each(|v| *v = *v - lse);
    }
    Tensor::from_vec(x.dims().to_vec(), out).expect("same shape")
}

/// Gradient of log-softmax given its forward output.
pub fn log_softmax_backward<T: Scalar>(
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if output.shape() != grad.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "log_softmax_backward",
            left: output.shape().clone(),
            right: grad.shape().clone(),
        });
    }
    let n = *output.dims().last().expect("rank >= 1");
    let mut dx = Vec::with_capacity(output.len());
    for (orow, grow) in output.data().chunks(n).zip(grad.data().chunks(n)) {
        let gsum = grow.iter().fold(T::zero(), |a, &b| a + b);
        dx.extend(orow.iter().zip(grow).map(|(&o, &g)| g - o.exp() * gsum));
    }
    Tensor::from_vec(output.dims().to_vec(), dx)
}

/// Inverted dropout: kept activations are scaled by `1/keep`. Returns the
/// output and the multiplicative mask used, which is also the backward map.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    keep: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(TensorError::KeepProbability(keep));
    }
    let scale = T::of(1.0 / keep);
    let mask: Vec<T> = if keep == 1.0 {
        vec![T::one(); x.len()]
    } else {
        (0..x.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
            .collect()
    };
    let mask = Tensor::from_vec(x.dims().to_vec(), mask)?;
    Ok((mul(x, &mask)?, mask))
}

pub fn dropout_backward<T: Scalar>(mask: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    mul(grad, mask)
}

fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            left: a.shape().clone(),
            right: b.shape().clone(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.dims().to_vec(), data)
}

/// Zero-pads the two spatial axes of a rank-4 tensor.
pub fn pad2d<T: Scalar>(x: &Tensor<T>, pad: usize) -> Result<Tensor<T>, TensorError> {
    let [b, c, h, w] = rank4(x, "pad2d")?;
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![T::zero(); b * c * hp * wp];
    for pl in 0..b * c {
        for y in 0..h {
            let src = &x.data()[(pl * h + y) * w..(pl * h + y + 1) * w];
            let at = (pl * hp + y + pad) * wp + pad;
            out[at..at + w].copy_from_slice(src);
        }
    }
    Tensor::from_vec(vec![b, c, hp, wp], out)
}

pub fn pad2d_backward<T: Scalar>(grad: &Tensor<T>, pad: usize) -> Result<Tensor<T>, TensorError> {
    let [b, c, hp, wp] = rank4(grad, "pad2d_backward")?;
    if hp <= 2 * pad || wp <= 2 * pad {
        return Err(TensorError::Invalid {
            op: "pad2d_backward",
            detail: format!("gradient {} too small for pad {pad}", grad.shape()),
        });
    }
    let (h, w) = (hp - 2 * pad, wp - 2 * pad);
    let mut out = Vec::with_capacity(b * c * h * w);
    for pl in 0..b * c {
        for y in 0..h {
            let at = (pl * hp + y + pad) * wp + pad;
            out.extend_from_slice(&grad.data()[at..at + w]);
        }
    }
    Tensor::from_vec(vec![b, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims.to_vec(), v).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k) = (a.dims()[0], a.dims()[1]);
        let n = b.dims()[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_small_cases() {
        let id = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let row = t(&[1, 2], &[1., 2.]);
        let col = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::random_uniform(vec![7, 5], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::<f64>::random_uniform(vec![5, 3], -1.0, 1.0, &mut rng).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).as_slice());
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2x3]"), "{msg}");
    }

    #[test]
    fn conv_all_ones() {
        let x = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]).unwrap();
        let k = Tensor::<f64>::zeros(vec![1, 3, 3, 3]).unwrap();
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(TensorError::ChannelMismatch { .. })));
        let k = Tensor::<f64>::zeros(vec![1, 2, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&x, &k, 2, 0),
            Err(TensorError::NonIntegralExtent { .. })
        ));
        let k = Tensor::<f64>::zeros(vec![1, 2, 5, 5]).unwrap();
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(TensorError::WindowTooLarge { .. })));
    }

    #[test]
    fn pool_small_cases() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let (y, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);

        let c = Tensor::<f64>::full(vec![1, 1, 4, 4], 2.5).unwrap();
        let (y, idx) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        // ties route to the top-left (lowest flat index) of each window
        assert_eq!(idx, vec![0, 2, 8, 10]);
        let g = Tensor::<f64>::full(vec![1, 1, 2, 2], 1.0).unwrap();
        let dx = maxpool2d_backward(&g, &idx, &[1, 1, 4, 4]).unwrap();
        assert_eq!(dx.data()[0], 1.0);
        assert_eq!(dx.data()[1], 0.0);

        let odd = Tensor::<f64>::zeros(vec![1, 1, 5, 5]).unwrap();
        assert!(maxpool2d(&odd, 2, 2).is_err());
    }

    #[test]
    fn elementwise_small_cases() {
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let ls = log_softmax(&t(&[1, 2], &[0., 0.]));
        for v in ls.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[2, 3], &[1., -2., 3., 4., 5., -6.]);
        let (y, _) = dropout(&x, 1.0, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(matches!(dropout(&x, 0.0, &mut rng), Err(TensorError::KeepProbability(_))));
        assert!(matches!(dropout(&x, 1.5, &mut rng), Err(TensorError::KeepProbability(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::full(vec![200_000], 1.0).unwrap();
        let (y, _) = dropout(&x, 0.25, &mut rng).unwrap();
        let mean = y.sum() / 200_000.0;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::random_uniform(vec![4, 10], -30.0, 30.0, &mut rng).unwrap();
        let y = log_softmax(&x);
        for row in y.data().chunks(10) {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-6);
        }
    }

    #[test]
    fn pad_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::random_uniform(vec![2, 3, 4, 5], -1.0, 1.0, &mut rng).unwrap();
        let p = pad2d(&x, 2).unwrap();
        assert_eq!(p.dims(), &[2, 3, 8, 9]);
        assert_eq!(p.sum(), x.sum());
        assert_eq!(pad2d_backward(&p, 2).unwrap(), x);
    }
}
