//! 2x2 max pooling with stride 2, the only pooling the encoder uses.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Max over non-overlapping 2x2 windows. Returns the pooled tensor and, per
/// output element, the index (0..4, row-major within the window) of the
/// winner; ties break to the first position so backward routing is unique.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u8>)> {
    let s = input.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidDimension(format!(
            "maxpool2x2 requires even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let plane_out = out_shape.h * out_shape.w;
    let mut data = vec![T::zero(); out_shape.len()];
    let mut argmax = vec![0u8; out_shape.len()];

    let in_data = input.data();
    data.par_chunks_mut(plane_out)
        .zip(argmax.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(pl, (out_plane, arg_plane))| {
            let src = &in_data[pl * s.h * s.w..(pl + 1) * s.h * s.w];
            for oy in 0..out_shape.h {
                for ox in 0..out_shape.w {
                    let base = 2 * oy * s.w + 2 * ox;
                    let window = [src[base], src[base + 1], src[base + s.w], src[base + s.w + 1]];
                    let mut best = 0u8;
                    for (i, &v) in window.iter().enumerate().skip(1) {
                        if v > window[best as usize] {
                            best = i as u8;
                        }
                    }
                    out_plane[oy * out_shape.w + ox] = window[best as usize];
                    arg_plane[oy * out_shape.w + ox] = best;
                }
            }
        });

    Ok((Tensor::from_vec(out_shape, data)?, argmax))
}

/// Scatter the output gradient back to the winning window positions.
pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[u8],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let s = grad_out.shape();
    if (s.n, s.c, s.h * 2, s.w * 2) != (input_shape.n, input_shape.c, input_shape.h, input_shape.w)
    {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2x2_backward: grad shape {} does not pool from {}",
            s, input_shape
        )));
    }
    if argmax.len() != s.len() {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2x2_backward: argmax length {} does not match {} outputs",
            argmax.len(),
            s.len()
        )));
    }
    let plane_out = s.h * s.w;
    let plane_in = input_shape.h * input_shape.w;
    let mut data = vec![T::zero(); input_shape.len()];
    let g = grad_out.data();

    data.par_chunks_mut(plane_in).enumerate().for_each(|(pl, dst)| {
        for oy in 0..s.h {
            for ox in 0..s.w {
                let o = pl * plane_out + oy * s.w + ox;
                let win = argmax[o] as usize;
                let (dy, dx) = (win / 2, win % 2);
                dst[(2 * oy + dy) * input_shape.w + 2 * ox + dx] = g[o];
            }
        }
    });

    Tensor::from_vec(input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_stays_constant() {
        let input = Tensor::filled(Shape::new(1, 2, 4, 6), 3.5f32);
        let (out, _) = maxpool2x2(&input).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 2, 2, 3));
        assert!(out.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn window_max_and_argmax() {
        let input = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (out, arg) = maxpool2x2(&input).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]); // bottom-right
    }

    #[test]
    fn ties_break_to_first_in_window_order() {
        let input = Tensor::filled(Shape::new(1, 1, 2, 2), 7.0f32);
        let (_, arg) = maxpool2x2(&input).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn odd_dims_rejected() {
        let input = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 4));
        assert!(maxpool2x2(&input).is_err());
    }

    #[test]
    fn matches_naive_window_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = Shape::new(1, 3, 8, 8);
        let data: Vec<f32> = (0..shape.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let input = Tensor::from_vec(shape, data).unwrap();
        let (out, _) = maxpool2x2(&input).unwrap();
        for c in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut expect = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            expect = expect.max(input.at(0, c, 2 * oy + dy, 2 * ox + dx));
                        }
                    }
                    assert_eq!(out.at(0, c, oy, ox), expect);
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_winner_only() {
        let input = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 9.0, 3.0, 4.0]).unwrap();
        let (_, arg) = maxpool2x2(&input).unwrap();
        let g = Tensor::filled(Shape::new(1, 1, 1, 1), 2.5f32);
        let gi = maxpool2x2_backward(input.shape(), &arg, &g).unwrap();
        assert_eq!(gi.data(), &[0.0, 2.5, 0.0, 0.0]);
    }
}
