//! Finite-difference verification of every analytic backward pass.
//!
//! The scheme: pick a random linear functional `L(y) = sum(r * y)` of an
//! operation's output, compute its input gradient analytically through the
//! hand-written backward, and compare against central differences of `L`
//! under elementwise perturbation. All checks run in 64-bit mode where the
//! difference quotient has enough headroom below the 1e-6 gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    bilinear_upsample_x2, bilinear_upsample_x2_backward, conv2d, conv2d_backward, maxpool2x2,
    maxpool2x2_backward, mul_backward, relu, relu_backward, sigmoid, sigmoid_backward, ConvParams,
    Shape, Tensor,
};

/// Central-difference step used throughout.
pub const FD_STEP: f64 = 1e-5;

/// Worst relative error of one checked operation.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare `analytic` against central differences of `eval` at `x`,
/// perturbing every coordinate; returns the worst relative error with
/// denominator `max(|a|, |b|, 1e-8)`.
pub fn check_gradient(
    mut eval: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = eval(&probe);
        probe[i] = x[i] - step;
        let lo = eval(&probe);
        probe[i] = x[i];
        let numeric = (hi - lo) / (2.0 * step);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Check one differentiable tensor operation: `backward` must return the
/// gradient of `sum(r * forward(input))` with respect to `input` when handed
/// `r` as the output gradient.
pub fn finite_diff_check(
    op: &str,
    input: &Tensor<f64>,
    step: f64,
    seed: u64,
    forward: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
) -> GradCheckReport {
    let out = forward(input);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(
        out.shape(),
        (0..out.shape().len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let analytic = backward(input, &r);
    let shape = input.shape();
    let eval = |data: &[f64]| {
        let t = Tensor::from_vec(shape, data.to_vec()).unwrap();
        forward(&t).mul(&r).unwrap().sum()
    };
    GradCheckReport {
        op: op.to_string(),
        max_rel_err: check_gradient(eval, input.data(), analytic.data(), step),
    }
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

/// Gradient-check every tensor primitive exactly once on small random
/// tensors. Conv checks cover input, weights and bias; elementwise binaries
/// cover both operands.
pub fn run_op_suite(seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();

    // conv2d, 3x3 dilation 2 (exercises padding, dilation and the GEMM path)
    {
        let input = random_tensor(Shape::new(1, 2, 6, 5), &mut rng);
        let weights = random_tensor(Shape::new(3, 2, 3, 3), &mut rng);
        let bias: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let params = ConvParams::new(weights.clone(), bias.clone(), 1, 2, 2).unwrap();

        let p = params.clone();
        let input_side = finite_diff_check(
            "conv2d",
            &input,
            FD_STEP,
            seed ^ 1,
            |x| conv2d(x, &p).unwrap(),
            |x, g| conv2d_backward(x, &p, g).unwrap().input,
        );

        // weight and bias sides share the same random functional
        let out_shape = conv2d(&input, &params).unwrap().shape();
        let mut fr = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let r = random_tensor(out_shape, &mut fr);
        let grads = conv2d_backward(&input, &params, &r).unwrap();
        let w_shape = weights.shape();
        let weight_err = check_gradient(
            |w| {
                let p = ConvParams::new(
                    Tensor::from_vec(w_shape, w.to_vec()).unwrap(),
                    bias.clone(),
                    1,
                    2,
                    2,
                )
                .unwrap();
                conv2d(&input, &p).unwrap().mul(&r).unwrap().sum()
            },
            weights.data(),
            grads.weights.data(),
            FD_STEP,
        );
        let bias_err = check_gradient(
            |b| {
                let p = ConvParams::new(weights.clone(), b.to_vec(), 1, 2, 2).unwrap();
                conv2d(&input, &p).unwrap().mul(&r).unwrap().sum()
            },
            &bias,
            &grads.bias,
            FD_STEP,
        );
        reports.push(GradCheckReport {
            op: "conv2d".into(),
            max_rel_err: input_side.max_rel_err.max(weight_err).max(bias_err),
        });
    }

    // relu: keep samples away from the kink at zero
    {
        let shape = Shape::new(1, 3, 5, 5);
        let data = (0..shape.len())
            .map(|_| {
                let v: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let input = Tensor::from_vec(shape, data).unwrap();
        reports.push(finite_diff_check(
            "relu",
            &input,
            FD_STEP,
            seed ^ 3,
            relu,
            |x, g| relu_backward(x, g).unwrap(),
        ));
    }

    // sigmoid
    {
        let input = random_tensor(Shape::new(1, 2, 4, 6), &mut rng);
        reports.push(finite_diff_check(
            "sigmoid",
            &input,
            FD_STEP,
            seed ^ 4,
            sigmoid,
            |x, g| sigmoid_backward(&sigmoid(x), g).unwrap(),
        ));
    }

    // maxpool2x2: continuous random input, ties have probability zero
    {
        let input = random_tensor(Shape::new(1, 2, 6, 8), &mut rng);
        reports.push(finite_diff_check(
            "maxpool2x2",
            &input,
            FD_STEP,
            seed ^ 5,
            |x| maxpool2x2(x).unwrap().0,
            |x, g| {
                let (_, argmax) = maxpool2x2(x).unwrap();
                maxpool2x2_backward(x.shape(), &argmax, g).unwrap()
            },
        ));
    }

    // bilinear_upsample_x2
    {
        let input = random_tensor(Shape::new(1, 2, 4, 5), &mut rng);
        reports.push(finite_diff_check(
            "bilinear_upsample_x2",
            &input,
            FD_STEP,
            seed ^ 6,
            bilinear_upsample_x2,
            |x, g| bilinear_upsample_x2_backward(x.shape(), g).unwrap(),
        ));
    }

    // elementwise binaries: check the x side with a fixed second operand,
    // then the y side through the same machinery
    let shape = Shape::new(1, 2, 4, 4);
    let other = random_tensor(shape, &mut rng);
    {
        let input = random_tensor(shape, &mut rng);
        let o = other.clone();
        let a = finite_diff_check("add/x", &input, FD_STEP, seed ^ 7, |x| x.add(&o).unwrap(), |_, g| g.clone());
        let o = other.clone();
        let b = finite_diff_check("add/y", &input, FD_STEP, seed ^ 8, |y| o.add(y).unwrap(), |_, g| g.clone());
        reports.push(GradCheckReport { op: "add".into(), max_rel_err: a.max_rel_err.max(b.max_rel_err) });
    }
    {
        let input = random_tensor(shape, &mut rng);
        let o = other.clone();
        let a = finite_diff_check("sub/x", &input, FD_STEP, seed ^ 9, |x| x.sub(&o).unwrap(), |_, g| g.clone());
        let o = other.clone();
        let b = finite_diff_check("sub/y", &input, FD_STEP, seed ^ 10, |y| o.sub(y).unwrap(), |_, g| {
            g.scale(-1.0)
        });
        reports.push(GradCheckReport { op: "sub".into(), max_rel_err: a.max_rel_err.max(b.max_rel_err) });
    }
    {
        let input = random_tensor(shape, &mut rng);
        let o = other.clone();
        let a = finite_diff_check("mul/x", &input, FD_STEP, seed ^ 11, |x| x.mul(&o).unwrap(), |x, g| {
            mul_backward(x, &o, g).unwrap().0
        });
        let o = other.clone();
        let b = finite_diff_check("mul/y", &input, FD_STEP, seed ^ 12, |y| o.mul(y).unwrap(), |y, g| {
            mul_backward(&o, y, g).unwrap().1
        });
        reports.push(GradCheckReport { op: "mul".into(), max_rel_err: a.max_rel_err.max(b.max_rel_err) });
    }

    reports
}
