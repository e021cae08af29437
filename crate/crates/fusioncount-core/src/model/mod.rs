//! The FusionCount network: truncated VGG-16 encoder with 15 taps, four
//! contrast-feature fusion blocks, three channel-reduction + upsample + add
//! decoding steps, and a pointwise non-negative density head.

mod decoder;
mod encoder;
mod fusion;

pub use decoder::{channel_reduce, ReductionParams};
pub use encoder::{
    EncoderTaps, GROUP_FOLLOWER_CHANNELS, GROUP_LEADER_CHANNELS, TAP_COUNT, TAP_GROUPS,
};
pub use fusion::{fuse_group, FusionBlockParams};

pub(crate) use encoder::ENCODER_CHANNEL_PLAN;
pub(crate) use encoder::ENCODER_LAYER_NAMES;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{
    bilinear_upsample_x2, bilinear_upsample_x2_backward, check_gradient, conv2d, conv2d_backward,
    relu, relu_backward, ConvParams, Scalar, Shape, Tensor, FD_STEP,
};

/// Input spatial dims must be divisible by this (four pooling halvings).
pub const INPUT_DIVISOR: usize = 16;

/// Which streams the channel-reduction module keeps.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum ReductionVariant {
    /// Two chained dilated convolutions plus the pointwise stream.
    #[default]
    TwoDilatedPointwise,
    /// One dilated convolution plus the pointwise stream.
    OneDilatedPointwise,
    /// Pointwise stream only (a bare 1x1 convolution).
    PointwiseOnly,
    /// Dilated stream only.
    TwoDilatedOnly,
}

impl ReductionVariant {
    pub const ALL: [ReductionVariant; 4] = [
        ReductionVariant::TwoDilatedPointwise,
        ReductionVariant::OneDilatedPointwise,
        ReductionVariant::PointwiseOnly,
        ReductionVariant::TwoDilatedOnly,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ReductionVariant::TwoDilatedPointwise => "two-dilated-pointwise",
            ReductionVariant::OneDilatedPointwise => "one-dilated-pointwise",
            ReductionVariant::PointwiseOnly => "pointwise-only",
            ReductionVariant::TwoDilatedOnly => "two-dilated-only",
        }
    }

    pub fn parse(s: &str) -> Result<ReductionVariant> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidDimension(format!("unknown reduction variant '{s}'")))
    }
}

/// Architecture description: fused channel widths, ablation switches and the
/// initialization seed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Output widths of the four fusion bottlenecks. Each decoder step halves
    /// channels, so the ladder must double at every level.
    pub fused_channels: [usize; 4],
    pub variant: ReductionVariant,
    /// When false, gate weights come from the raw follower features instead
    /// of the contrast features.
    pub use_contrast: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fused_channels: [64, 128, 256, 512],
            variant: ReductionVariant::TwoDilatedPointwise,
            use_contrast: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        let f = &self.fused_channels;
        if f[0] == 0 {
            return Err(Error::InvalidDimension(
                "fused channel width must be >= 1".into(),
            ));
        }
        for k in 0..3 {
            if f[k + 1] != 2 * f[k] {
                return Err(Error::InvalidDimension(format!(
                    "fused channel ladder must double at every level, got {f:?}"
                )));
            }
        }
        Ok(())
    }
}

/// All trainable tensors, grouped the way the architecture is drawn.
/// Doubles as the gradient container: a backward pass returns a
/// `ModelParams` of the same geometry holding gradients.
#[derive(Clone, Debug)]
pub struct ModelParams<T = f32> {
    pub encoder: Vec<ConvParams<T>>,
    pub fusion: Vec<FusionBlockParams<T>>,
    pub reduce: Vec<ReductionParams<T>>,
    pub head: ConvParams<T>,
}

/// Read-only view of one named parameter tensor.
pub struct ParamRef<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one named parameter tensor.
pub struct ParamMut<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [T],
}

fn conv_dims<T: Scalar>(c: &ConvParams<T>) -> Vec<usize> {
    let s = c.weights.shape();
    vec![s.n, s.c, s.h, s.w]
}

/// Names of the three reduction blocks in decode order: the block applied to
/// the deepest fused feature first.
const REDUCE_NAMES: [&str; 3] = ["reduce4", "reduce3", "reduce2"];

impl<T: Scalar> ModelParams<T> {
    fn new(config: &ModelConfig) -> ModelParams<T> {
        let f = config.fused_channels;
        let encoder = ENCODER_CHANNEL_PLAN
            .iter()
            .map(|&(ic, oc)| ConvParams::zeros(oc, ic, 3, 1, 1))
            .collect();
        let fusion = (0..4)
            .map(|k| FusionBlockParams {
                expand: ConvParams::zeros(
                    GROUP_FOLLOWER_CHANNELS[k],
                    GROUP_LEADER_CHANNELS[k],
                    1,
                    0,
                    1,
                ),
                bottleneck: ConvParams::zeros(
                    f[k],
                    GROUP_LEADER_CHANNELS[k] + GROUP_FOLLOWER_CHANNELS[k],
                    1,
                    0,
                    1,
                ),
            })
            .collect();
        let reduce = (0..3)
            .map(|k| ReductionParams::new(f[3 - k], config.variant).expect("even ladder"))
            .collect();
        let head = ConvParams::zeros(1, f[0], 1, 0, 1);
        ModelParams { encoder, fusion, reduce, head }
    }

    /// Named tensors in the canonical order of the weight file: encoder
    /// convolutions in network order, then fusion blocks 1-4, then reduction
    /// blocks in decode order (4 -> 3 -> 2), then the head.
    pub fn entries(&self) -> Vec<ParamRef<'_, T>> {
        fn conv<'a, T: Scalar>(name: String, c: &'a ConvParams<T>, out: &mut Vec<ParamRef<'a, T>>) {
            out.push(ParamRef {
                name: format!("{name}.weight"),
                dims: conv_dims(c),
                data: c.weights.data(),
            });
            out.push(ParamRef {
                name: format!("{name}.bias"),
                dims: vec![c.bias.len()],
                data: &c.bias,
            });
        }
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter().enumerate() {
            conv(format!("encoder.{}", ENCODER_LAYER_NAMES[i]), layer, &mut out);
        }
        for (k, block) in self.fusion.iter().enumerate() {
            conv(format!("fusion{}.expand", k + 1), &block.expand, &mut out);
            conv(format!("fusion{}.bottleneck", k + 1), &block.bottleneck, &mut out);
        }
        for (k, block) in self.reduce.iter().enumerate() {
            let base = REDUCE_NAMES[k];
            if let Some(c) = &block.dilated1 {
                conv(format!("{base}.dilated1"), c, &mut out);
            }
            if let Some(c) = &block.dilated2 {
                conv(format!("{base}.dilated2"), c, &mut out);
            }
            if let Some(c) = &block.pointwise {
                conv(format!("{base}.pointwise"), c, &mut out);
            }
        }
        conv("head".into(), &self.head, &mut out);
        out
    }

    /// Mutable variant of [`ModelParams::entries`], same order.
    pub fn entries_mut(&mut self) -> Vec<ParamMut<'_, T>> {
        fn conv<'a, T: Scalar>(name: String, c: &'a mut ConvParams<T>, out: &mut Vec<ParamMut<'a, T>>) {
            let dims = conv_dims(c);
            out.push(ParamMut {
                name: format!("{name}.weight"),
                dims,
                data: c.weights.data_mut(),
            });
            out.push(ParamMut {
                name: format!("{name}.bias"),
                dims: vec![c.bias.len()],
                data: &mut c.bias,
            });
        }
        let mut out = Vec::new();
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            conv(format!("encoder.{}", ENCODER_LAYER_NAMES[i]), layer, &mut out);
        }
        for (k, block) in self.fusion.iter_mut().enumerate() {
            conv(format!("fusion{}.expand", k + 1), &mut block.expand, &mut out);
            conv(format!("fusion{}.bottleneck", k + 1), &mut block.bottleneck, &mut out);
        }
        for (k, block) in self.reduce.iter_mut().enumerate() {
            let base = REDUCE_NAMES[k];
            if let Some(c) = &mut block.dilated1 {
                conv(format!("{base}.dilated1"), c, &mut out);
            }
            if let Some(c) = &mut block.dilated2 {
                conv(format!("{base}.dilated2"), c, &mut out);
            }
            if let Some(c) = &mut block.pointwise {
                conv(format!("{base}.pointwise"), c, &mut out);
            }
        }
        conv("head".into(), &mut self.head, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.entries().iter().map(|e| e.data.len()).sum()
    }
}

/// Everything the hand-composed backward pass needs, captured during a
/// training-mode forward.
pub struct ForwardCache<T = f32> {
    encoder: encoder::EncoderCache<T>,
    taps: EncoderTaps<T>,
    fusion: Vec<fusion::FusionCache<T>>,
    fused: Vec<Tensor<T>>,
    decode: decoder::DecodeCache<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn density(&self) -> &Tensor<T> {
        &self.decode.density
    }
}

/// The assembled network.
#[derive(Clone, Debug)]
pub struct FusionCount<T = f32> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> FusionCount<T> {
    /// Build the network with all parameters zero.
    pub fn new(config: ModelConfig) -> Result<FusionCount<T>> {
        config.validate()?;
        let params = ModelParams::new(&config);
        Ok(FusionCount { config, params })
    }

    /// Build and He-initialize from the config's seed.
    pub fn initialized(config: ModelConfig) -> Result<FusionCount<T>> {
        let seed = config.seed;
        let mut model = FusionCount::new(config)?;
        model.init_parameters(seed);
        Ok(model)
    }

    /// He-style initialization: every convolution weight is drawn from a
    /// normal with variance 2 / fan-in; biases are zero. Deterministic in
    /// the seed, drawing in canonical parameter order.
    pub fn init_parameters(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for entry in self.params.entries_mut() {
            if entry.dims.len() == 4 {
                let fan_in = entry.dims[1] * entry.dims[2] * entry.dims[3];
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).unwrap();
                for v in entry.data.iter_mut() {
                    *v = T::from_f64(normal.sample(&mut rng));
                }
            } else {
                entry.data.fill(T::zero());
            }
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Convert the whole model to another element type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> FusionCount<U> {
        fn cast_conv<T: Scalar, U: Scalar>(c: &ConvParams<T>) -> ConvParams<U> {
            ConvParams {
                weights: c.weights.cast(),
                bias: c.bias.iter().map(|&b| U::from_f64(b.to_f64())).collect(),
                stride: c.stride,
                padding: c.padding,
                dilation: c.dilation,
            }
        }
        FusionCount {
            config: self.config.clone(),
            params: ModelParams {
                encoder: self.params.encoder.iter().map(cast_conv).collect(),
                fusion: self
                    .params
                    .fusion
                    .iter()
                    .map(|b| FusionBlockParams {
                        expand: cast_conv(&b.expand),
                        bottleneck: cast_conv(&b.bottleneck),
                    })
                    .collect(),
                reduce: self
                    .params
                    .reduce
                    .iter()
                    .map(|b| ReductionParams {
                        dilated1: b.dilated1.as_ref().map(cast_conv),
                        dilated2: b.dilated2.as_ref().map(cast_conv),
                        pointwise: b.pointwise.as_ref().map(cast_conv),
                        variant: b.variant,
                    })
                    .collect(),
                head: cast_conv(&self.params.head),
            },
        }
    }

    /// Run the encoder only, returning the 15 tap feature maps.
    pub fn encode(&self, image: &Tensor<T>) -> Result<EncoderTaps<T>> {
        encoder::encode(&self.params.encoder, image)
    }

    /// Fuse the four tap groups into the multiscale features f1..f4.
    fn fuse_all(&self, taps: &EncoderTaps<T>) -> Result<Vec<Tensor<T>>> {
        (0..4)
            .map(|k| {
                let (leader, followers) = taps.group(k);
                fusion::fuse_group(&self.params.fusion[k], self.config.use_contrast, leader, &followers)
            })
            .collect()
    }

    /// Decode fused features into the density map (memory-lean path).
    pub fn decode(&self, fused: &[Tensor<T>]) -> Result<Tensor<T>> {
        decoder::decode(&self.params.reduce, &self.params.head, fused)
    }

    /// Full inference: density map of shape `(n, 1, H/2, W/2)`, non-negative
    /// everywhere. The predicted count is [`Tensor::sum`] of the result.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let taps = self.encode(image)?;
        let fused = self.fuse_all(&taps)?;
        drop(taps);
        self.decode(&fused)
    }

    /// Forward pass that records every intermediate needed by
    /// [`FusionCount::backward`].
    pub fn forward_train(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (taps, enc_cache) = encoder::encode_cached(&self.params.encoder, image)?;
        let mut fusion_caches = Vec::with_capacity(4);
        let mut fused = Vec::with_capacity(4);
        for k in 0..4 {
            let (leader, followers) = taps.group(k);
            let (f, cache) = fusion::fuse_group_cached(
                &self.params.fusion[k],
                self.config.use_contrast,
                leader,
                &followers,
            )?;
            fused.push(f);
            fusion_caches.push(cache);
        }
        let decode = decoder::decode_cached(&self.params.reduce, &self.params.head, &fused)?;
        let density = decode.density.clone();
        Ok((
            density,
            ForwardCache { encoder: enc_cache, taps, fusion: fusion_caches, fused, decode },
        ))
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient at the density output. Layers are visited in reverse
    /// topological order.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_density: &Tensor<T>) -> Result<ModelParams<T>> {
        let mut grads = ModelParams::new(&self.config);

        let fused_grads = decoder::decode_backward(
            &self.params.reduce,
            &self.params.head,
            &cache.fused,
            &cache.decode,
            grad_density,
            &mut grads.reduce,
            &mut grads.head,
        )?;

        let mut tap_grads: Vec<Option<Tensor<T>>> = (0..TAP_COUNT).map(|_| None).collect();
        for k in (0..4).rev() {
            let (leader, followers) = cache.taps.group(k);
            let (range_start, _) = TAP_GROUPS[k];
            let group_grads = fusion::fuse_group_backward(
                &self.params.fusion[k],
                self.config.use_contrast,
                leader,
                &followers,
                &cache.fusion[k],
                &fused_grads[k],
                &mut grads.fusion[k],
            )?;
            for (offset, g) in group_grads.into_iter().enumerate() {
                let slot = &mut tap_grads[range_start + offset];
                match slot {
                    Some(existing) => existing.add_assign(&g)?,
                    None => *slot = Some(g),
                }
            }
        }
        let tap_grads: Vec<Tensor<T>> = tap_grads
            .into_iter()
            .map(|g| g.expect("every tap feeds fusion"))
            .collect();

        encoder::encode_backward(&self.params.encoder, &cache.encoder, tap_grads, &mut grads.encoder)?;
        Ok(grads)
    }
}

/// Finite-difference check of the assembled model: compares analytic
/// gradients of a random linear functional of the density map against
/// central differences for `samples` randomly chosen parameters.
/// Returns the worst relative error.
pub fn model_gradient_check(
    model: &mut FusionCount<f64>,
    input: &Tensor<f64>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;

    let (density, cache) = model.forward_train(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_vec(
        density.shape(),
        (0..density.shape().len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let grads = model.backward(&cache, &r)?;
    drop(cache);

    let sizes: Vec<usize> = grads.entries().iter().map(|e| e.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        for (entry_idx, &len) in sizes.iter().enumerate() {
            if flat < len {
                picks.push((entry_idx, flat));
                break;
            }
            flat -= len;
        }
    }

    let mut worst = 0.0f64;
    for (entry_idx, elem_idx) in picks {
        let analytic = grads.entries()[entry_idx].data[elem_idx];
        let original = model.params.entries()[entry_idx].data[elem_idx];
        let mut eval = |v: f64| -> Result<f64> {
            model.params.entries_mut()[entry_idx].data[elem_idx] = v;
            let density = model.forward(input)?;
            Ok(density.mul(&r)?.sum())
        };
        let hi = eval(original + FD_STEP)?;
        let lo = eval(original - FD_STEP)?;
        eval(original)?;
        let numeric = (hi - lo) / (2.0 * FD_STEP);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    let _ = check_gradient; // low-level harness re-exported for op checks
    Ok(worst)
}

#[cfg(test)]
mod tests;
