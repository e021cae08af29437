//! Dense rank-4 tensors and the primitive operations the network is built
//! from, each with a hand-written backward pass.
//!
//! Layout is `(batch, channels, rows, cols)`, row-major, so the innermost
//! loops run along image width. All operations are deterministic: every
//! output element is owned by exactly one task and summed in a fixed order,
//! so results are bitwise identical regardless of the worker count.

mod conv;
mod gradcheck;
mod pool;
mod resize;
mod scalar;

pub use conv::{conv2d, conv2d_backward, ConvGradients, ConvParams};
pub use gradcheck::{check_gradient, finite_diff_check, GradCheckReport, FD_STEP};
pub use pool::{maxpool2x2, maxpool2x2_backward};
pub use resize::{bilinear_upsample_x2, bilinear_upsample_x2_backward};
pub use scalar::Scalar;

use crate::error::{Error, Result};

/// Dimensions of a rank-4 tensor: batch, channels, rows, cols.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidDimension(format!(
                "all dimensions must be >= 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 array. Immutable once produced by an operation; the interior
/// mutability needed during construction never escapes this module.
#[derive(Clone, PartialEq, Debug)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Tensor<T> {
        shape.validate().expect("zero-sized tensor");
        Tensor { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Tensor<T> {
        shape.validate().expect("zero-sized tensor");
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        let i = self.index(n, c, h, w);
        &mut self.data[i]
    }

    /// Sum of all elements, accumulated in f64 in index order.
    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0f64, |acc, &v| acc + v.to_f64())
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync) -> Tensor<T> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor { shape: self.shape, data }
    }

    fn zip_with(&self, other: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{op}: {} vs {}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape, data })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|v| v * s)
    }

    /// In-place `self += other`, used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Stack single-item tensors along the batch dimension.
    pub fn stack_batch(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidDimension("stack_batch: empty input".into()))?;
        let base = first.shape;
        let mut data = Vec::with_capacity(base.len() * items.len() / base.n.max(1));
        let mut n_total = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (base.c, base.h, base.w) {
                return Err(Error::ShapeMismatch(format!(
                    "stack_batch: {} vs {}",
                    t.shape, base
                )));
            }
            n_total += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n_total, base.c, base.h, base.w), data)
    }

    /// One batch item as a standalone tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        assert!(n < self.shape.n, "batch index out of range");
        let stride = self.shape.c * self.shape.h * self.shape.w;
        let data = self.data[n * stride..(n + 1) * stride].to_vec();
        Tensor { shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w), data }
    }

    /// Convert element type; used to lift f32 setups into f64 gradient
    /// checking mode.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Debug-build guard: finite inputs and parameters must never produce
    /// NaN or infinity.
    #[inline]
    pub fn debug_check_finite(&self, context: &str) {
        if cfg!(debug_assertions) {
            for &v in &self.data {
                debug_assert!(v.is_finite(), "{context}: non-finite value {v:?}");
            }
        }
    }
}

/// Channel-wise concatenation, `a` first. The order is part of the weight
/// format contract.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels: {sa} vs {sb} (batch and spatial dims must agree)"
        )));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Channel range `[from, to)` of a tensor; inverse of [`concat_channels`].
pub fn slice_channels<T: Scalar>(t: &Tensor<T>, from: usize, to: usize) -> Result<Tensor<T>> {
    let s = t.shape;
    if from >= to || to > s.c {
        return Err(Error::InvalidDimension(format!(
            "slice_channels: range {from}..{to} invalid for {} channels",
            s.c
        )));
    }
    let plane = s.h * s.w;
    let out_shape = Shape::new(s.n, to - from, s.h, s.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..s.n {
        let base = n * s.c * plane;
        data.extend_from_slice(&t.data[base + from * plane..base + to * plane]);
    }
    Tensor::from_vec(out_shape, data)
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let out = input.map(|v| if v > T::zero() { v } else { T::zero() });
    out.debug_check_finite("relu");
    out
}

/// Backward of [`relu`]: the gradient is masked by positivity of the
/// forward *input*.
pub fn relu_backward<T: Scalar>(forward_input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    forward_input.zip_with(grad_out, "relu_backward", |x, g| {
        if x > T::zero() {
            g
        } else {
            T::zero()
        }
    })
}

/// Numerically stable logistic function. The output is clamped into the
/// open interval (0, 1): saturation may round to exactly 0.0 or 1.0 in
/// floating point, and downstream gating arithmetic relies on strict bounds.
pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let one = T::one();
    let lo = T::min_positive_value();
    let hi = one - T::epsilon() * T::from_f64(0.5);
    let out = input.map(|x| {
        let s = if x >= T::zero() {
            one / (one + (-x).exp())
        } else {
            let e = x.exp();
            e / (one + e)
        };
        if s <= T::zero() {
            lo
        } else if s >= one {
            hi
        } else {
            s
        }
    });
    out.debug_check_finite("sigmoid");
    out
}

/// Backward of [`sigmoid`], expressed through the forward *output*:
/// `ds/dx = s * (1 - s)`.
pub fn sigmoid_backward<T: Scalar>(forward_output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    forward_output.zip_with(grad_out, "sigmoid_backward", |s, g| g * s * (T::one() - s))
}

/// Backward of elementwise multiplication.
pub fn mul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((grad_out.mul(b)?, grad_out.mul(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: (usize, usize, usize, usize), data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(Shape::new(shape.0, shape.1, shape.2, shape.3), data).unwrap()
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let r = Tensor::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn zero_dim_rejected() {
        let r = Tensor::<f32>::from_vec(Shape::new(1, 0, 2, 2), vec![]);
        assert!(matches!(r, Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn sub_self_is_zero() {
        let x = t((1, 2, 2, 2), (0..8).map(|i| i as f32).collect());
        let z = x.sub(&x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mul_by_zero_is_zero() {
        let x = t((1, 1, 2, 2), vec![0.3, -2.0, 5.5, 1.0]);
        let z = Tensor::zeros(x.shape());
        assert!(x.mul(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 3));
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn concat_shapes_and_roundtrip() {
        let a = t((1, 2, 2, 2), (0..8).map(|i| i as f32).collect());
        let b = t((1, 3, 2, 2), (100..112).map(|i| i as f32).collect());
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), Shape::new(1, 5, 2, 2));
        // slicing recovers both halves bit-exactly
        assert_eq!(slice_channels(&cat, 0, 2).unwrap(), a);
        assert_eq!(slice_channels(&cat, 2, 5).unwrap(), b);
    }

    #[test]
    fn concat_spatial_mismatch_rejected() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 64, 8, 8));
        let b = Tensor::<f32>::zeros(Shape::new(1, 128, 8, 8));
        assert_eq!(
            concat_channels(&a, &b).unwrap().shape(),
            Shape::new(1, 192, 8, 8)
        );
        let c = Tensor::<f32>::zeros(Shape::new(1, 128, 4, 8));
        assert!(concat_channels(&a, &c).is_err());
    }

    #[test]
    fn relu_clamps_negative() {
        let x = t((1, 1, 1, 4), vec![-1.0, -0.5, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_midpoint_and_saturation() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 40.0, -800.0]).unwrap();
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data()[1] < 1.0 && s.data()[1] > 1.0 - 1e-15);
        assert!(s.data()[2] > 0.0);
    }

    #[test]
    fn stack_batch_concatenates_items() {
        let a = t((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let b = t((1, 1, 2, 2), vec![5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 2, 2));
        assert_eq!(s.batch_item(1), b);
    }

    proptest! {
        #[test]
        fn sigmoid_strictly_in_unit_interval(xs in proptest::collection::vec(-1e3f64..1e3, 1..64)) {
            let n = xs.len();
            let t = Tensor::from_vec(Shape::new(1, 1, 1, n), xs).unwrap();
            let s = sigmoid(&t);
            prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn concat_slice_roundtrip(ca in 1usize..4, cb in 1usize..4, hw in 1usize..5, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |c: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                let data = (0..c * hw * hw).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                Tensor::from_vec(Shape::new(1, c, hw, hw), data).unwrap()
            };
            let a = mk(ca, &mut rng);
            let b = mk(cb, &mut rng);
            let cat = concat_channels(&a, &b).unwrap();
            prop_assert_eq!(slice_channels(&cat, 0, ca).unwrap(), a);
            prop_assert_eq!(slice_channels(&cat, ca, ca + cb).unwrap(), b);
        }
    }
}
