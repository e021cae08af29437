//! 2-D convolution, forward and backward.
//!
//! The forward pass lowers each batch item to column matrices (im2col) in
//! fixed-size chunks of output pixels and multiplies them against the
//! flattened kernel with one GEMM per chunk. Chunk boundaries are constants,
//! each chunk is written by exactly one task, and every GEMM call runs on a
//! single BLAS thread, so outputs are bitwise reproducible no matter how many
//! workers rayon schedules.
//!
//! The backward pass reuses the same machinery: the input gradient of a
//! stride-1 convolution is itself a convolution of the output gradient with
//! the spatially flipped, channel-transposed kernel, and the weight gradient
//! is one GEMM per chunk against the recomputed columns.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Output pixels per im2col chunk. Fixed: changing it changes nothing but
/// memory use, but it must not depend on the worker count.
const COL_CHUNK: usize = 4096;

/// Weights, bias and geometry of one convolutional layer.
///
/// Every layer in this architecture is either 3x3 with `padding == dilation`
/// (spatial size preserved) or pointwise 1x1; the constructor enforces that.
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Vec<T>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<ConvParams<T>> {
        let s = weights.shape();
        let (kh, kw) = (s.h, s.w);
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::InvalidDimension(format!(
                "kernel must be square 1x1 or 3x3, got {kh}x{kw}"
            )));
        }
        if stride == 0 || dilation == 0 {
            return Err(Error::InvalidDimension(
                "stride and dilation must be positive".into(),
            ));
        }
        if kh == 3 && padding != dilation {
            return Err(Error::InvalidDimension(format!(
                "3x3 layers require padding == dilation, got padding {padding}, dilation {dilation}"
            )));
        }
        if kh == 1 && (padding != 0 || dilation != 1) {
            return Err(Error::InvalidDimension(format!(
                "1x1 layers require padding 0 and dilation 1, got padding {padding}, dilation {dilation}"
            )));
        }
        if bias.len() != s.n {
            return Err(Error::ShapeMismatch(format!(
                "bias length {} does not match {} output channels",
                bias.len(),
                s.n
            )));
        }
        Ok(ConvParams { weights, bias, stride, padding, dilation })
    }

    /// Zero-initialized layer of the given geometry.
    pub fn zeros(
        out_channels: usize,
        in_channels: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
    ) -> ConvParams<T> {
        let weights = Tensor::zeros(Shape::new(out_channels, in_channels, kernel, kernel));
        ConvParams::new(weights, vec![T::zero(); out_channels], 1, padding, dilation)
            .expect("invalid static layer geometry")
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weights.shape().h
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.shape().len() + self.bias.len()
    }

    /// Kernel with spatial taps flipped and in/out channels swapped; combined
    /// with padding `dilation*(k-1) - padding` it turns the input gradient of
    /// a stride-1 convolution into a plain forward convolution.
    fn flipped(&self) -> ConvParams<T> {
        let s = self.weights.shape();
        let (oc, ic, k) = (s.n, s.c, s.h);
        let mut flipped = Tensor::zeros(Shape::new(ic, oc, k, k));
        for o in 0..oc {
            for i in 0..ic {
                for a in 0..k {
                    for b in 0..k {
                        *flipped.at_mut(i, o, k - 1 - a, k - 1 - b) = self.weights.at(o, i, a, b);
                    }
                }
            }
        }
        let padding = self.dilation * (k - 1) - self.padding;
        ConvParams::new(flipped, vec![T::zero(); ic], 1, padding, self.dilation)
            .expect("flipped kernel geometry must stay valid")
    }
}

fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    axis: &str,
) -> Result<usize> {
    let effective = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < effective {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: {axis} extent {input} too small for effective kernel {effective} with padding {padding}"
        )));
    }
    let span = padded - effective;
    if span % stride != 0 {
        return Err(Error::InvalidDimension(format!(
            "conv2d: stride {stride} does not evenly tile {axis} extent {input} (padding {padding})"
        )));
    }
    Ok(span / stride + 1)
}

pub(crate) fn conv_output_shape<T: Scalar>(input: Shape, p: &ConvParams<T>) -> Result<Shape> {
    if input.c != p.in_channels() {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {} channels, kernel expects {}",
            input.c,
            p.in_channels()
        )));
    }
    let k = p.kernel();
    let h_out = conv_output_extent(input.h, k, p.stride, p.padding, p.dilation, "row")?;
    let w_out = conv_output_extent(input.w, k, p.stride, p.padding, p.dilation, "col")?;
    Ok(Shape::new(input.n, p.out_channels(), h_out, w_out))
}

/// Fill `cols` (layout `K x len`, row-major with leading dimension `len`)
/// with the input window values for output pixels `[p0, p0 + len)`.
#[allow(clippy::too_many_arguments)]
fn im2col_chunk<T: Scalar>(
    item: &[T],
    in_shape: Shape,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    out_w: usize,
    p0: usize,
    len: usize,
    cols: &mut [T],
) {
    let (c_in, h, w) = (in_shape.c, in_shape.h, in_shape.w);
    debug_assert_eq!(cols.len(), c_in * kernel * kernel * len);
    let oy_first = p0 / out_w;
    let oy_last = (p0 + len - 1) / out_w;

    for ci in 0..c_in {
        for ki in 0..kernel {
            for kj in 0..kernel {
                let row = ((ci * kernel + ki) * kernel + kj) * len;
                let dst = &mut cols[row..row + len];
                for oy in oy_first..=oy_last {
                    let seg_lo = (oy * out_w).max(p0);
                    let seg_hi = ((oy + 1) * out_w).min(p0 + len);
                    let local = seg_lo - p0;
                    let seg = &mut dst[local..local + (seg_hi - seg_lo)];
                    let iy = (oy * stride + ki * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &item[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let ox0 = seg_lo - oy * out_w;
                    if stride == 1 {
                        // ix = ox + shift; copy the in-bounds middle, zero both ends
                        let shift = (kj * dilation) as isize - padding as isize;
                        let ox_lo = (-shift).max(ox0 as isize) as usize;
                        let ox_hi = ((w as isize - shift).max(0) as usize).min(ox0 + seg.len());
                        let (lo, hi) = (ox_lo.min(ox0 + seg.len()), ox_hi.max(ox0));
                        seg[..lo - ox0].fill(T::zero());
                        if hi > lo {
                            let src0 = (lo as isize + shift) as usize;
                            seg[lo - ox0..hi - ox0].copy_from_slice(&src_row[src0..src0 + (hi - lo)]);
                        }
                        seg[hi - ox0..].fill(T::zero());
                    } else {
                        for (off, v) in seg.iter_mut().enumerate() {
                            let ix = ((ox0 + off) * stride + kj * dilation) as isize - padding as isize;
                            *v = if ix >= 0 && ix < w as isize {
                                src_row[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

struct SendPtr<T>(*mut T);
unsafe impl<T> Send for SendPtr<T> {}
unsafe impl<T> Sync for SendPtr<T> {}

impl<T> SendPtr<T> {
    fn get(&self) -> *mut T {
        self.0
    }
}

fn chunks_of(total: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total.div_ceil(COL_CHUNK)).map(move |i| {
        let p0 = i * COL_CHUNK;
        (p0, COL_CHUNK.min(total - p0))
    })
}

/// Direct convolution. Each output element is the bias plus the sum over the
/// dilated window in channel-major, row-major order.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let out_shape = conv_output_shape(input.shape(), p)?;
    let in_shape = input.shape();
    let (oc, plane_out) = (out_shape.c, out_shape.h * out_shape.w);
    let plane_in = in_shape.c * in_shape.h * in_shape.w;
    let k = p.kernel();
    let kk = in_shape.c * k * k;

    // bias pre-fill; the chunk GEMMs then accumulate on top (beta = 1)
    let mut data = Vec::with_capacity(out_shape.len());
    for _ in 0..out_shape.n {
        for o in 0..oc {
            data.extend(std::iter::repeat(p.bias[o]).take(plane_out));
        }
    }

    let pointwise = k == 1 && p.stride == 1;
    let tasks: Vec<(usize, usize, usize)> = (0..in_shape.n)
        .flat_map(|n| chunks_of(plane_out).map(move |(p0, len)| (n, p0, len)))
        .collect();

    let out_ptr = SendPtr(data.as_mut_ptr());
    let in_data = input.data();
    let w_ptr = p.weights.data().as_ptr() as usize;
    tasks.par_iter().for_each(|&(n, p0, len)| {
        let c = unsafe { out_ptr.get().add(n * oc * plane_out + p0) };
        let a = w_ptr as *const T;
        if pointwise {
            // the input itself already is the column matrix
            let b = unsafe { in_data.as_ptr().add(n * plane_in + p0) };
            unsafe {
                T::gemm(false, false, oc, kk, len, T::one(), a, kk, b, plane_in / in_shape.c, T::one(), c, plane_out);
            }
        } else {
            let mut cols = vec![T::zero(); kk * len];
            im2col_chunk(
                &in_data[n * plane_in..(n + 1) * plane_in],
                in_shape,
                k,
                p.stride,
                p.padding,
                p.dilation,
                out_shape.w,
                p0,
                len,
                &mut cols,
            );
            unsafe {
                T::gemm(false, false, oc, kk, len, T::one(), a, kk, cols.as_ptr(), len, T::one(), c, plane_out);
            }
        }
    });

    let out = Tensor::from_vec(out_shape, data)?;
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Gradients of a scalar loss with respect to a convolution's input, weights
/// and bias, given the loss gradient at its output.
#[derive(Clone, Debug)]
pub struct ConvGradients<T = f32> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGradients<T>> {
    let out_shape = conv_output_shape(input.shape(), p)?;
    if grad_out.shape() != out_shape {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_backward: grad shape {} does not match output shape {}",
            grad_out.shape(),
            out_shape
        )));
    }
    if p.stride != 1 {
        return Err(Error::InvalidDimension(
            "conv2d_backward supports stride 1 only".into(),
        ));
    }

    let in_shape = input.shape();
    let (oc, plane_out) = (out_shape.c, out_shape.h * out_shape.w);
    let plane_in = in_shape.c * in_shape.h * in_shape.w;
    let k = p.kernel();
    let kk = in_shape.c * k * k;
    let g = grad_out.data();

    // bias gradient: per-output-channel sum, fixed batch-then-pixel order
    let mut grad_bias = vec![T::zero(); oc];
    for n in 0..out_shape.n {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            let row = &g[(n * oc + o) * plane_out..(n * oc + o + 1) * plane_out];
            *gb = row.iter().fold(*gb, |acc, &v| acc + v);
        }
    }

    // weight gradient: per chunk, grad_out[oc x len] * cols[kk x len]^T,
    // partials reduced in deterministic chunk order
    let pointwise = k == 1;
    let in_data = input.data();
    let mut grad_weights = Tensor::zeros(p.weights.shape());
    for n in 0..in_shape.n {
        let partials: Vec<Vec<T>> = chunks_of(plane_out)
            .collect::<Vec<_>>()
            .par_iter()
            .map(|&(p0, len)| {
                let mut partial = vec![T::zero(); oc * kk];
                let a = unsafe { g.as_ptr().add(n * oc * plane_out + p0) };
                if pointwise {
                    let b = unsafe { in_data.as_ptr().add(n * plane_in + p0) };
                    unsafe {
                        T::gemm(false, true, oc, len, kk, T::one(), a, plane_out, b, plane_in / in_shape.c, T::zero(), partial.as_mut_ptr(), kk);
                    }
                } else {
                    let mut cols = vec![T::zero(); kk * len];
                    im2col_chunk(
                        &in_data[n * plane_in..(n + 1) * plane_in],
                        in_shape,
                        k,
                        1,
                        p.padding,
                        p.dilation,
                        out_shape.w,
                        p0,
                        len,
                        &mut cols,
                    );
                    unsafe {
                        T::gemm(false, true, oc, len, kk, T::one(), a, plane_out, cols.as_ptr(), len, T::zero(), partial.as_mut_ptr(), kk);
                    }
                }
                partial
            })
            .collect();
        let acc = grad_weights.data_mut();
        for partial in partials {
            for (dst, src) in acc.iter_mut().zip(partial) {
                *dst = *dst + src;
            }
        }
    }

    let grad_input = conv2d(grad_out, &p.flipped())?;

    Ok(ConvGradients { input: grad_input, weights: grad_weights, bias: grad_bias })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight six-nested-loop evaluation of the convolution definition;
    /// the independent oracle for the GEMM path.
    fn naive_conv2d<T: Scalar>(input: &Tensor<T>, p: &ConvParams<T>) -> Tensor<T> {
        let out_shape = conv_output_shape(input.shape(), p).unwrap();
        let s = input.shape();
        let k = p.kernel();
        let mut out = Tensor::zeros(out_shape);
        for n in 0..out_shape.n {
            for o in 0..out_shape.c {
                for oy in 0..out_shape.h {
                    for ox in 0..out_shape.w {
                        let mut acc = p.bias[o];
                        for ci in 0..s.c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * p.stride + ki * p.dilation) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kj * p.dilation) as isize - p.padding as isize;
                                    if iy >= 0 && iy < s.h as isize && ix >= 0 && ix < s.w as isize {
                                        acc = acc
                                            + input.at(n, ci, iy as usize, ix as usize)
                                                * p.weights.at(o, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, o, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    fn random_tensor<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let data = (0..shape.len())
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_conv<T: Scalar>(
        oc: usize,
        ic: usize,
        k: usize,
        dilation: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvParams<T> {
        let weights = random_tensor(Shape::new(oc, ic, k, k), rng);
        let bias = (0..oc).map(|_| T::from_f64(rng.random_range(-0.5..0.5))).collect();
        let padding = if k == 3 { dilation } else { 0 };
        ConvParams::new(weights, bias, 1, padding, if k == 3 { dilation } else { 1 }).unwrap()
    }

    #[test]
    fn box_sum_on_ones() {
        // all-ones 3x3 input, all-ones 3x3 kernel, pad 1: center 9, corners 4
        let input = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0f32);
        let p = ConvParams::new(
            Tensor::filled(Shape::new(1, 1, 3, 3), 1.0f32),
            vec![0.0],
            1,
            1,
            1,
        )
        .unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, 0, y, x), 4.0);
        }
    }

    #[test]
    fn identity_pointwise_kernel_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input: Tensor<f32> = random_tensor(Shape::new(2, 3, 5, 4), &mut rng);
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            *w.at_mut(c, c, 0, 0) = 1.0;
        }
        let p = ConvParams::new(w, vec![0.0; 3], 1, 0, 1).unwrap();
        let out = conv2d(&input, &p).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn dilated_conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let input: Tensor<f64> = random_tensor(Shape::new(1, 2, 5, 5), &mut rng);
        let p = random_conv(3, 2, 3, 2, &mut rng);
        let fast = conv2d(&input, &p).unwrap();
        let slow = naive_conv2d(&input, &p);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn f32_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input: Tensor<f32> = random_tensor(Shape::new(2, 3, 9, 7), &mut rng);
        let p = random_conv(4, 3, 3, 1, &mut rng);
        let fast = conv2d(&input, &p).unwrap();
        let slow = naive_conv2d(&input, &p);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn chunked_path_matches_naive_oracle() {
        // spatial size large enough to cross a chunk boundary
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let input: Tensor<f32> = random_tensor(Shape::new(1, 2, 80, 64), &mut rng);
        let p = random_conv(3, 2, 3, 1, &mut rng);
        let fast = conv2d(&input, &p).unwrap();
        let slow = naive_conv2d(&input, &p);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let p = ConvParams::<f32>::zeros(1, 3, 3, 1, 1);
        let err = conv2d(&input, &p).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input: Tensor<f32> = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        let p = random_conv(2, 2, 3, 1, &mut rng);
        let g = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let grads = conv2d_backward(&input, &p, &g).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_per_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input: Tensor<f64> = random_tensor(Shape::new(2, 2, 4, 4), &mut rng);
        let p = random_conv(3, 2, 3, 1, &mut rng);
        let grad_out: Tensor<f64> = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let grads = conv2d_backward(&input, &p, &grad_out).unwrap();
        for o in 0..3 {
            let mut expect = 0.0;
            for n in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        expect += grad_out.at(n, o, y, x);
                    }
                }
            }
            assert!((grads.bias[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_shapes_match_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input: Tensor<f32> = random_tensor(Shape::new(1, 4, 6, 6), &mut rng);
        let p = random_conv(2, 4, 1, 1, &mut rng);
        let grad_out: Tensor<f32> = random_tensor(Shape::new(1, 2, 6, 6), &mut rng);
        let grads = conv2d_backward(&input, &p, &grad_out).unwrap();
        assert_eq!(grads.input.shape(), input.shape());
        assert_eq!(grads.weights.shape(), p.weights.shape());
        assert_eq!(grads.bias.len(), 2);
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(ConvParams::new(
            Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3)),
            vec![0.0],
            1,
            2, // padding != dilation
            1,
        )
        .is_err());
        assert!(ConvParams::new(
            Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2)),
            vec![0.0],
            1,
            0,
            1,
        )
        .is_err());
    }
}
