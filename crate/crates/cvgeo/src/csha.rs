//! Channel-spatial hybrid attention for the query branch.
//!
//! Channel attention squeezes the feature map with global average pooling,
//! runs the pooled vector through two bias-free linear maps with a ReLU in
//! between, and sigmoids the result into per-channel weights. Spatial
//! attention pools the (already channel-weighted) map across channels into
//! an average/max pair, convolves the pair down to one map, batch-normalizes
//! it and squashes through ReLU then sigmoid. Because the sigmoid sees a
//! non-negative input, spatial weights always land in `[0.5, 1)`; with all
//! parameters zeroed the whole block collapses to `0.25 * input`, which the
//! tests pin down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Linear, ParamSet, Session};
use crate::tape::Var;
use rand_chacha::ChaCha8Rng;

/// Attention block configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CshaConfig {
    /// Channel squeeze ratio; hidden width is `max(1, C / reduction)`.
    pub reduction: usize,
    /// Spatial convolution kernel size; must be odd.
    pub kernel_size: usize,
    /// Keep the ReLU between batchnorm and sigmoid. Dropping it is an
    /// ablation switch that lets spatial weights fall below 0.5.
    pub relu_before_sigmoid: bool,
}

impl Default for CshaConfig {
    fn default() -> Self {
        Self {
            reduction: 16,
            kernel_size: 7,
            relu_before_sigmoid: true,
        }
    }
}

impl CshaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(Error::Config("reduction must be >= 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd to preserve shape, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Per-channel reweighting from globally pooled statistics.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    squeeze: Linear,
    expand: Linear,
    channels: usize,
}

impl ChannelAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            squeeze: Linear::new(ps, &format!("{name}.squeeze"), channels, hidden, rng),
            expand: Linear::new(ps, &format!("{name}.expand"), hidden, channels, rng),
            channels,
        }
    }

    /// Returns the reweighted map and the `(B, C)` channel weights.
    pub fn forward(&self, sess: &mut Session, f: Var) -> Result<(Var, Var)> {
        let shape = sess.tape.shape(f).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::Shape(format!(
                "channel attention built for {} channels, input is {:?}",
                self.channels, shape
            )));
        }
        let pooled = sess.tape.global_avg_pool(f)?;
        let hidden = self.squeeze.forward(sess, pooled)?;
        let hidden = sess.tape.relu(hidden);
        let logits = self.expand.forward(sess, hidden)?;
        let weights = sess.tape.sigmoid(logits);
        let out = sess.tape.scale_by_channel(f, weights)?;
        Ok((out, weights))
    }
}

/// The per-pixel average/max channel pools and their concatenation.
pub struct SpatialPoolPair {
    pub avg: Var,
    pub max: Var,
    pub cat: Var,
}

/// Builds the pooled pair feeding the spatial attention convolution.
pub fn spatial_pool_pair(sess: &mut Session, f: Var) -> Result<SpatialPoolPair> {
    let avg = sess.tape.channel_mean(f)?;
    let max = sess.tape.channel_max(f)?;
    let cat = sess.tape.concat_channels(&[avg, max])?;
    Ok(SpatialPoolPair { avg, max, cat })
}

/// Per-position reweighting from the pooled channel pair.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    conv: Conv2d,
    norm: BatchNorm2d,
    relu_before_sigmoid: bool,
}

impl SpatialAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        kernel_size: usize,
        relu_before_sigmoid: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "spatial attention kernel must be odd, got {kernel_size}"
            )));
        }
        Ok(Self {
            conv: Conv2d::new(
                ps,
                &format!("{name}.conv"),
                2,
                1,
                kernel_size,
                1,
                (kernel_size - 1) / 2,
                rng,
            ),
            norm: BatchNorm2d::new(ps, &format!("{name}.norm"), 1),
            relu_before_sigmoid,
        })
    }

    /// Returns the reweighted map and the `(B, 1, H, W)` spatial weights.
    pub fn forward(&self, sess: &mut Session, f: Var) -> Result<(Var, Var)> {
        let pools = spatial_pool_pair(sess, f)?;
        let z = self.conv.forward(sess, pools.cat)?;
        let z = self.norm.forward(sess, z)?;
        let z = if self.relu_before_sigmoid {
            sess.tape.relu(z)
        } else {
            z
        };
        let weights = sess.tape.sigmoid(z);
        let out = sess.tape.scale_by_map(f, weights)?;
        Ok((out, weights))
    }
}

/// Channel attention followed by spatial attention.
#[derive(Debug, Clone)]
pub struct Csha {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

/// Both attention weight maps from one pass, for export and inspection.
pub struct CshaDetail {
    pub out: Var,
    pub channel_weights: Var,
    pub spatial_weights: Var,
}

impl Csha {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        channels: usize,
        config: &CshaConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            channel: ChannelAttention::new(
                ps,
                &format!("{name}.channel"),
                channels,
                config.reduction,
                rng,
            ),
            spatial: SpatialAttention::new(
                ps,
                &format!("{name}.spatial"),
                config.kernel_size,
                config.relu_before_sigmoid,
                rng,
            )?,
        })
    }

    pub fn forward(&self, sess: &mut Session, f: Var) -> Result<Var> {
        Ok(self.forward_detailed(sess, f)?.out)
    }

    pub fn forward_detailed(&self, sess: &mut Session, f: Var) -> Result<CshaDetail> {
        let (refined, channel_weights) = self.channel.forward(sess, f)?;
        let (out, spatial_weights) = self.spatial.forward(sess, refined)?;
        Ok(CshaDetail {
            out,
            channel_weights,
            spatial_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::tape::check::{max_rel_error, numeric_grad};
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;

    fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(0.1..2.0))
    }

    fn build(channels: usize, config: &CshaConfig, seed: u64) -> (ParamSet, Csha) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let csha = Csha::new(&mut ps, "csha", channels, config, &mut rng).unwrap();
        (ps, csha)
    }

    fn zero_trainable(ps: &mut ParamSet) {
        let ids: Vec<_> = ps
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            ps.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_parameters_scale_input_by_a_quarter() {
        let (mut ps, csha) = build(8, &CshaConfig::default(), 1);
        zero_trainable(&mut ps);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_input(&mut rng, &[2, 8, 4, 4]);
        for training in [false, true] {
            let mut sess = Session::new(&ps, training);
            let xv = sess.input(x.clone());
            let y = csha.forward(&mut sess, xv).unwrap();
            let yv = sess.tape.value(y);
            for (a, b) in yv.iter().zip(x.iter()) {
                assert!((a - 0.25 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_is_preserved_and_mismatch_rejected() {
        let (ps, csha) = build(32, &CshaConfig::default(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_input(&mut rng, &[3, 32, 16, 16]);
        let mut sess = Session::new(&ps, false);
        let xv = sess.input(x);
        let detail = csha.forward_detailed(&mut sess, xv).unwrap();
        assert_eq!(sess.tape.shape(detail.out), &[3, 32, 16, 16]);
        assert_eq!(sess.tape.shape(detail.channel_weights), &[3, 32]);
        assert_eq!(sess.tape.shape(detail.spatial_weights), &[3, 1, 16, 16]);

        let bad = rand_input(&mut rng, &[3, 16, 8, 8]);
        let mut sess = Session::new(&ps, false);
        let xv = sess.input(bad);
        assert!(matches!(
            csha.forward(&mut sess, xv),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn channel_attention_matches_scalar_hand_evaluation() {
        // C=2, H=W=1, f=[2,4], hidden width 1,
        // squeeze = [0.5, 0.25]^T, expand = [0.3, -0.2]
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ca = ChannelAttention::new(&mut ps, "ca", 2, 16, &mut rng);
        *ps.value_mut(ca.squeeze.weight) =
            ArrayD::from_shape_vec(IxDyn(&[2, 1]), vec![0.5, 0.25]).unwrap();
        *ps.value_mut(ca.expand.weight) =
            ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.3, -0.2]).unwrap();

        let mut sess = Session::new(&ps, false);
        let f = sess.input(ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![2.0, 4.0]).unwrap());
        let (out, weights) = ca.forward(&mut sess, f).unwrap();
        let w = sess.tape.value(weights);
        // hidden = relu(2*0.5 + 4*0.25) = 2; weights = sigmoid([0.6, -0.8])
        assert!((w[[0, 0]] - 0.6456563062257954).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.401312339887548).abs() < 1e-12);
        let o = sess.tape.value(out);
        assert!((o[[0, 0, 0, 0]] - 1.2913126124515908).abs() < 1e-12);
        assert!((o[[0, 1, 0, 0]] - 1.605249359550192).abs() < 1e-12);
    }

    #[test]
    fn spatial_attention_matches_scalar_hand_evaluation() {
        // 1x2x2x2 input, k=1 conv with weights (avg: 0.3, max: 0.2), bias
        // 0.1, batchnorm in eval mode with identity statistics
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sa = SpatialAttention::new(&mut ps, "sa", 1, true, &mut rng).unwrap();
        *ps.value_mut(sa.conv.weight) =
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![0.3, 0.2]).unwrap();
        *ps.value_mut(sa.conv.bias.unwrap()) = ArrayD::from_elem(IxDyn(&[1]), 0.1);

        let f = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            vec![1.0, 2.0, 3.0, 4.0, 2.0, 1.0, 5.0, 3.0],
        )
        .unwrap();
        let mut sess = Session::new(&ps, false);
        let fv = sess.input(f);
        let pools = spatial_pool_pair(&mut sess, fv).unwrap();
        let avg = sess.tape.value(pools.avg).clone();
        let max = sess.tape.value(pools.max).clone();
        assert_eq!(avg[[0, 0, 0, 0]], 1.5);
        assert_eq!(max[[0, 0, 0, 0]], 2.0);
        assert_eq!(avg[[0, 0, 1, 0]], 4.0);
        assert_eq!(max[[0, 0, 1, 0]], 5.0);
        for (a, m) in avg.iter().zip(max.iter()) {
            assert!(m >= a, "max pool dominates mean pool");
        }

        let (out, weights) = sa.forward(&mut sess, fv).unwrap();
        let w = sess.tape.value(weights);
        let expected_w = [
            [0.7211142227656535, 0.7211142227656535],
            [0.9088760865627883, 0.8754455786784288],
        ];
        for i in 0..2 {
            for j in 0..2 {
                assert!((w[[0, 0, i, j]] - expected_w[i][j]).abs() < 1e-12);
            }
        }
        let o = sess.tape.value(out);
        assert!((o[[0, 0, 1, 1]] - 3.501782314713715).abs() < 1e-12);
        assert!((o[[0, 1, 1, 0]] - 4.544380432813941).abs() < 1e-12);
    }

    #[test]
    fn spatial_weights_stay_in_half_open_upper_band() {
        let (ps, csha) = build(6, &CshaConfig::default(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = rand_input(&mut rng, &[2, 6, 5, 5]);
            let mut sess = Session::new(&ps, true);
            let xv = sess.input(x);
            let detail = csha.forward_detailed(&mut sess, xv).unwrap();
            for &w in sess.tape.value(detail.spatial_weights).iter() {
                assert!((0.5..1.0).contains(&w), "weight {w} outside [0.5, 1)");
            }
            for &w in sess.tape.value(detail.channel_weights).iter() {
                assert!(w > 0.0 && w < 1.0);
            }
        }
    }

    #[test]
    fn dropping_the_relu_lets_weights_fall_below_half() {
        let config = CshaConfig {
            relu_before_sigmoid: false,
            ..Default::default()
        };
        let (ps, csha) = build(4, &config, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut seen_below = false;
        for _ in 0..20 {
            let x = rand_input(&mut rng, &[2, 4, 6, 6]);
            let mut sess = Session::new(&ps, true);
            let xv = sess.input(x);
            let detail = csha.forward_detailed(&mut sess, xv).unwrap();
            seen_below |= sess
                .tape
                .value(detail.spatial_weights)
                .iter()
                .any(|&w| w < 0.5);
        }
        assert!(seen_below, "without the relu some weights should drop below 0.5");
    }

    #[test]
    fn output_is_bounded_by_the_input() {
        let (ps, csha) = build(5, &CshaConfig::default(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 5, 4, 4]), |_| rng.gen_range(-2.0..2.0));
        let mut sess = Session::new(&ps, true);
        let xv = sess.input(x.clone());
        let y = csha.forward(&mut sess, xv).unwrap();
        for (o, i) in sess.tape.value(y).iter().zip(x.iter()) {
            assert!(o.abs() <= i.abs());
        }
    }

    #[test]
    fn channel_weights_ignore_spatial_permutation() {
        let (ps, csha) = build(4, &CshaConfig::default(), 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = rand_input(&mut rng, &[1, 4, 3, 3]);
        // reverse the flattened spatial positions of every channel
        let mut permuted = x.clone();
        for c in 0..4 {
            let mut flat: Vec<f64> = x
                .slice(ndarray::s![0, c, .., ..])
                .iter()
                .copied()
                .collect();
            flat.reverse();
            for (k, v) in flat.into_iter().enumerate() {
                permuted[[0, c, k / 3, k % 3]] = v;
            }
        }
        let weights_of = |input: &ArrayD<f64>| {
            let mut sess = Session::new(&ps, false);
            let xv = sess.input(input.clone());
            let (_, w) = csha.channel.forward(&mut sess, xv).unwrap();
            sess.tape.value(w).clone()
        };
        let wa = weights_of(&x);
        let wb = weights_of(&permuted);
        for (a, b) in wa.iter().zip(wb.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn spatial_weights_ignore_channel_permutation() {
        let (ps, csha) = build(4, &CshaConfig::default(), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_input(&mut rng, &[1, 4, 3, 3]);
        let mut permuted = x.clone();
        for (dst, src) in [(0, 2), (1, 3), (2, 1), (3, 0)] {
            permuted
                .slice_mut(ndarray::s![0, dst, .., ..])
                .assign(&x.slice(ndarray::s![0, src, .., ..]));
        }
        let weights_of = |input: &ArrayD<f64>| {
            let mut sess = Session::new(&ps, false);
            let xv = sess.input(input.clone());
            let (_, w) = csha.spatial.forward(&mut sess, xv).unwrap();
            sess.tape.value(w).clone()
        };
        let wa = weights_of(&x);
        let wb = weights_of(&permuted);
        for (a, b) in wa.iter().zip(wb.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn even_kernel_size_is_rejected() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        assert!(matches!(
            SpatialAttention::new(&mut ps, "sa", 4, true, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(CshaConfig {
            kernel_size: 6,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn gradients_match_finite_differences_and_are_nonzero() {
        let config = CshaConfig {
            kernel_size: 3,
            ..Default::default()
        };
        let (mut ps, csha) = build(4, &config, 18);
        // with a 1-unit squeeze layer, a negative pre-activation would park
        // the ReLU in its dead zone; positive weights keep the path live for
        // the positive test input
        ps.value_mut(csha.channel.squeeze.weight)
            .mapv_inplace(f64::abs);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = rand_input(&mut rng, &[1, 4, 3, 3]);
        let probe = ArrayD::from_shape_fn(IxDyn(&[1, 4, 3, 3]), |_| rng.gen_range(-1.0..1.0));

        for training in [true, false] {
            let loss_with = |ps: &ParamSet| -> f64 {
                let mut sess = Session::new(ps, training);
                let xv = sess.input(x.clone());
                let y = csha.forward(&mut sess, xv).unwrap();
                let s = sess.tape.dot_const(y, &probe).unwrap();
                sess.tape.value(s)[[0]]
            };

            let mut sess = Session::new(&ps, training);
            let xv = sess.input(x.clone());
            let y = csha.forward(&mut sess, xv).unwrap();
            let s = sess.tape.dot_const(y, &probe).unwrap();
            let grads = sess.grads(s).unwrap();

            for (id, analytic) in &grads {
                let entry = ps.entry(*id);
                let mut probe_ps = ps.clone();
                let numeric = numeric_grad(
                    |v| {
                        *probe_ps.value_mut(*id) = v.clone();
                        loss_with(&probe_ps)
                    },
                    &entry.value,
                    1e-5,
                );
                let err = max_rel_error(analytic, &numeric);
                assert!(err < 1e-6, "{} (training={training}): rel error {err}", entry.name);
                // in training mode a constant conv bias cancels against the
                // batch statistics, so liveness is asserted in eval mode
                if !training {
                    assert!(
                        analytic.iter().any(|g| g.abs() > 1e-12),
                        "{} received no gradient",
                        entry.name
                    );
                }
            }
        }
    }
}
