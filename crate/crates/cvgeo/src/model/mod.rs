//! Two-branch localization network.
//!
//! The query branch runs the encoded query image (image + click-point
//! channel) through a backbone, refines the features with channel-spatial
//! attention and pools them into a descriptor. The reference branch turns
//! the satellite image into a feature grid. The descriptor is broadcast
//! over that grid, fused by a 1x1 + 3x3 convolution pair, and a 1x1 head
//! predicts `(tx, ty, tw, th, obj)` per cell; the box at the
//! highest-objectness cell is the prediction.

pub mod backbone;
pub mod bbox;
pub mod checkpoint;
pub mod head;
pub mod loss;
pub mod train;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csha::{Csha, CshaConfig, CshaDetail};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet, Session};
use crate::tape::Var;
use backbone::{Backbone, BackboneConfig};
use bbox::BBox;
use head::{best_box, DetectionGrid};

/// Everything needed to rebuild the network deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub csha: CshaConfig,
    /// Query input channels including the positional-encoding channel.
    pub query_channels: usize,
    pub reference_channels: usize,
    /// Anchor box extents in reference pixels, typically the mean
    /// ground-truth size of the training split.
    pub anchor_w: f64,
    pub anchor_h: f64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, csha: CshaConfig) -> Self {
        Self {
            backbone,
            csha,
            query_channels: 4,
            reference_channels: 3,
            anchor_w: 16.0,
            anchor_h: 16.0,
        }
    }

    pub fn with_anchor(mut self, w: f64, h: f64) -> Self {
        self.anchor_w = w;
        self.anchor_h = h;
        self
    }
}

/// The full two-branch model with its parameters.
pub struct GeoLocalizer {
    pub params: ParamSet,
    query_backbone: Backbone,
    csha: Csha,
    reference_backbone: Backbone,
    fuse_pointwise: Conv2d,
    fuse_context: Conv2d,
    head: Conv2d,
    config: ModelConfig,
}

impl GeoLocalizer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.csha.validate()?;
        if !(config.anchor_w > 0.0 && config.anchor_h > 0.0) {
            return Err(Error::Config("anchor extents must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let query_backbone = Backbone::new(
            &mut params,
            "query_backbone",
            config.query_channels,
            &config.backbone,
            &mut rng,
        )?;
        let channels = query_backbone.out_channels();
        let csha = Csha::new(&mut params, "csha", channels, &config.csha, &mut rng)?;
        let reference_backbone = Backbone::new(
            &mut params,
            "reference_backbone",
            config.reference_channels,
            &config.backbone,
            &mut rng,
        )?;
        let ref_channels = reference_backbone.out_channels();
        let fuse_pointwise = Conv2d::new(
            &mut params,
            "fuse.pointwise",
            channels + ref_channels,
            ref_channels,
            1,
            1,
            0,
            &mut rng,
        );
        let fuse_context = Conv2d::new(
            &mut params,
            "fuse.context",
            ref_channels,
            ref_channels,
            3,
            1,
            1,
            &mut rng,
        );
        let head = Conv2d::new(&mut params, "head", ref_channels, 5, 1, 1, 0, &mut rng);
        Ok(Self {
            params,
            query_backbone,
            csha,
            reference_backbone,
            fuse_pointwise,
            fuse_context,
            head,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Updates the decode anchors (set from the training split).
    pub fn set_anchor(&mut self, w: f64, h: f64) -> Result<()> {
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::Config("anchor extents must be positive".into()));
        }
        self.config.anchor_w = w;
        self.config.anchor_h = h;
        Ok(())
    }

    /// Spatial downsampling factor of the reference branch.
    pub fn reference_stride(&self) -> usize {
        self.reference_backbone.stride()
    }

    pub fn descriptor_len(&self) -> usize {
        self.query_backbone.out_channels()
    }

    /// Backbone features of the encoded query, before attention.
    pub fn query_features(&self, sess: &mut Session, aug_query: Var) -> Result<Var> {
        self.query_backbone.forward(sess, aug_query)
    }

    /// Query branch: backbone, attention, global average pooling.
    pub fn query_branch(&self, sess: &mut Session, aug_query: Var) -> Result<Var> {
        Ok(self.query_branch_detailed(sess, aug_query)?.0)
    }

    /// Query branch keeping the attention weight maps for export.
    pub fn query_branch_detailed(
        &self,
        sess: &mut Session,
        aug_query: Var,
    ) -> Result<(Var, CshaDetail)> {
        let features = self.query_features(sess, aug_query)?;
        let detail = self.csha.forward_detailed(sess, features)?;
        let descriptor = sess.tape.global_avg_pool(detail.out)?;
        Ok((descriptor, detail))
    }

    /// Reference branch: satellite image to `(B, C_r, Sh, Sw)` features.
    pub fn reference_branch(&self, sess: &mut Session, reference: Var) -> Result<Var> {
        self.reference_backbone.forward(sess, reference)
    }

    /// Broadcasts the query descriptor over the reference grid and fuses.
    pub fn fuse(&self, sess: &mut Session, descriptor: Var, reference_map: Var) -> Result<Var> {
        let dshape = sess.tape.shape(descriptor).to_vec();
        let rshape = sess.tape.shape(reference_map).to_vec();
        if dshape.len() != 2 || rshape.len() != 4 || dshape[0] != rshape[0] {
            return Err(Error::Shape(format!(
                "cannot fuse descriptor {dshape:?} with reference map {rshape:?}"
            )));
        }
        let tiled = sess
            .tape
            .broadcast_spatial(descriptor, rshape[2], rshape[3])?;
        let stacked = sess.tape.concat_channels(&[tiled, reference_map])?;
        let mixed = self.fuse_pointwise.forward(sess, stacked)?;
        let mixed = sess.tape.relu(mixed);
        self.fuse_context.forward(sess, mixed)
    }

    /// 1x1 head emitting raw `(B, 5, Sh, Sw)` logits.
    pub fn detect_head(&self, sess: &mut Session, fused: Var) -> Result<Var> {
        self.head.forward(sess, fused)
    }

    /// Full forward pass to raw head logits.
    pub fn forward_raw(&self, sess: &mut Session, aug_query: Var, reference: Var) -> Result<Var> {
        let descriptor = self.query_branch(sess, aug_query)?;
        let reference_map = self.reference_branch(sess, reference)?;
        let fused = self.fuse(sess, descriptor, reference_map)?;
        self.detect_head(sess, fused)
    }

    /// Eval-mode forward for one sample, returning the activation grid.
    pub fn predict_grid(
        &self,
        aug_query: &Array3<f64>,
        reference: &Array3<f64>,
    ) -> Result<DetectionGrid> {
        let mut sess = Session::new(&self.params, false);
        let q = sess.input(singleton_batch(aug_query));
        let r = sess.input(singleton_batch(reference));
        let raw = self.forward_raw(&mut sess, q, r)?;
        DetectionGrid::from_raw(sess.tape.value(raw))
    }

    /// Eval-mode prediction: the decoded box (model reference coordinates)
    /// and its objectness.
    pub fn predict(
        &self,
        aug_query: &Array3<f64>,
        reference: &Array3<f64>,
    ) -> Result<(BBox, f64)> {
        let grid = self.predict_grid(aug_query, reference)?;
        Ok(best_box(
            &grid,
            0,
            self.reference_stride(),
            self.config.anchor_w,
            self.config.anchor_h,
        ))
    }
}

fn singleton_batch(image: &Array3<f64>) -> ndarray::ArrayD<f64> {
    let (c, h, w) = image.dim();
    image
        .clone()
        .into_shape_with_order((1, c, h, w))
        .expect("contiguous")
        .into_dyn()
}

#[cfg(test)]
mod tests {
    use super::backbone::{BlockKind, StageSpec};
    use super::train::{train_step, Adam, Batch};
    use super::*;
    use crate::model::loss::detection_loss;
    use crate::tape::check::{max_rel_error, numeric_grad};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(
            BackboneConfig::Custom(vec![StageSpec {
                out_channels: 8,
                blocks: 1,
                downsample: true,
                kind: BlockKind::Plain,
            }]),
            CshaConfig {
                kernel_size: 3,
                ..Default::default()
            },
        )
        .with_anchor(3.0, 4.0)
    }

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(0.05..1.0))
    }

    #[test]
    fn toy_query_branch_yields_a_64_descriptor() {
        let config = ModelConfig::new(BackboneConfig::ToySmall, CshaConfig::default());
        let model = GeoLocalizer::new(config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = rand3(&mut rng, 4, 256, 512);
        let mut sess = Session::new(&model.params, false);
        let qv = sess.input(singleton_batch(&q));
        let desc = model.query_branch(&mut sess, qv).unwrap();
        assert_eq!(sess.tape.shape(desc), &[1, 64]);

        // determinism in eval mode
        let mut sess2 = Session::new(&model.params, false);
        let qv2 = sess2.input(singleton_batch(&q));
        let desc2 = model.query_branch(&mut sess2, qv2).unwrap();
        assert_eq!(sess.tape.value(desc), sess2.tape.value(desc2));
    }

    #[test]
    fn zeroed_csha_quarters_the_bypassed_descriptor() {
        let mut model = GeoLocalizer::new(tiny_config(), 13).unwrap();
        let ids: Vec<_> = model
            .params
            .iter()
            .filter(|(_, e)| e.trainable && e.name.starts_with("csha."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            model.params.value_mut(id).fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let q = rand3(&mut rng, 4, 8, 8);

        let mut sess = Session::new(&model.params, false);
        let qv = sess.input(singleton_batch(&q));
        let desc = model.query_branch(&mut sess, qv).unwrap();
        let with_attention = sess.tape.value(desc).clone();

        let mut sess = Session::new(&model.params, false);
        let qv = sess.input(singleton_batch(&q));
        let feats = model.query_features(&mut sess, qv).unwrap();
        let bypass = sess.tape.global_avg_pool(feats).unwrap();
        let bypassed = sess.tape.value(bypass).clone();

        for (a, b) in with_attention.iter().zip(bypassed.iter()) {
            assert!((a - 0.25 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_branch_grid_follows_the_stride_rule() {
        // a stride-32 backbone maps 1024x1024 to a 32x32 grid
        let thin_stride32 = BackboneConfig::Custom(
            (0..5)
                .map(|i| StageSpec {
                    out_channels: if i < 4 { 4 } else { 8 },
                    blocks: 1,
                    downsample: true,
                    kind: BlockKind::Plain,
                })
                .collect(),
        );
        assert_eq!(thin_stride32.stride(), 32);
        let config = ModelConfig::new(thin_stride32, CshaConfig::default());
        let model = GeoLocalizer::new(config, 15).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r = rand3(&mut rng, 3, 1024, 1024);
        let mut sess = Session::new(&model.params, false);
        let rv = sess.input(singleton_batch(&r));
        let map = model.reference_branch(&mut sess, rv).unwrap();
        assert_eq!(sess.tape.shape(map), &[1, 8, 32, 32]);
    }

    #[test]
    fn fuse_preserves_reference_shape_and_depends_on_the_descriptor() {
        let model = GeoLocalizer::new(tiny_config(), 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let r = rand3(&mut rng, 3, 8, 8);

        let fused_with = |desc_value: f64| {
            let mut sess = Session::new(&model.params, false);
            let rv = sess.input(singleton_batch(&r));
            let rmap = model.reference_branch(&mut sess, rv).unwrap();
            let d = sess.input(ArrayD::from_elem(IxDyn(&[1, 8]), desc_value));
            let fused = model.fuse(&mut sess, d, rmap).unwrap();
            sess.tape.value(fused).clone()
        };
        let a = fused_with(0.3);
        let b = fused_with(0.7);
        assert_eq!(a.shape(), &[1, 8, 4, 4]);
        assert!(
            a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9),
            "distinct descriptors must change the fused map"
        );
    }

    #[test]
    fn zero_descriptor_and_bias_make_fusion_reference_only() {
        let mut model = GeoLocalizer::new(tiny_config(), 19).unwrap();
        *model.params.value_mut(model.fuse_pointwise.bias.unwrap()) =
            ArrayD::zeros(IxDyn(&[8]));
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let r = rand3(&mut rng, 3, 8, 8);

        let run = |model: &GeoLocalizer| {
            let mut sess = Session::new(&model.params, false);
            let rv = sess.input(singleton_batch(&r));
            let rmap = model.reference_branch(&mut sess, rv).unwrap();
            let d = sess.input(ArrayD::zeros(IxDyn(&[1, 8])));
            let fused = model.fuse(&mut sess, d, rmap).unwrap();
            sess.tape.value(fused).clone()
        };
        let before = run(&model);
        // rewriting the descriptor columns of the pointwise kernel must not
        // matter when the descriptor is zero
        {
            let w = model.params.value_mut(model.fuse_pointwise.weight);
            let mut w4 = w.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
            for o in 0..8 {
                for i in 0..8 {
                    w4[[o, i, 0, 0]] = rng.gen_range(-5.0..5.0);
                }
            }
        }
        let after = run(&model);
        assert_eq!(before, after);
    }

    #[test]
    fn zero_head_gives_half_objectness_everywhere() {
        let mut model = GeoLocalizer::new(tiny_config(), 21).unwrap();
        model.params.value_mut(model.head.weight).fill(0.0);
        model.params.value_mut(model.head.bias.unwrap()).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let q = rand3(&mut rng, 4, 8, 8);
        let r = rand3(&mut rng, 3, 8, 8);
        let grid = model.predict_grid(&q, &r).unwrap();
        assert_eq!(grid.values.dim(), (1, 4, 4, 5));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(grid.values[[0, i, j, 4]], 0.5);
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_in_eval_mode() {
        let model = GeoLocalizer::new(tiny_config(), 23).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let q = rand3(&mut rng, 4, 8, 8);
        let r = rand3(&mut rng, 3, 8, 8);
        let (b1, o1) = model.predict(&q, &r).unwrap();
        let (b2, o2) = model.predict(&q, &r).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(o1, o2);
        assert!(o1 > 0.0 && o1 < 1.0);
    }

    #[test]
    fn full_model_loss_gradients_match_finite_differences() {
        let mut model = GeoLocalizer::new(tiny_config(), 25).unwrap();
        // keep the 1-wide channel-attention squeeze away from its ReLU dead
        // zone for the positive inputs used here
        let squeeze_id = model
            .params
            .iter()
            .find(|(_, e)| e.name == "csha.channel.squeeze.weight")
            .map(|(id, _)| id)
            .unwrap();
        model.params.value_mut(squeeze_id).mapv_inplace(f64::abs);

        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let q = singleton_batch(&rand3(&mut rng, 4, 8, 8));
        let r = singleton_batch(&rand3(&mut rng, 3, 8, 8));
        let gt = BBox::new(3.2, 5.1, 2.5, 3.5);
        let stride = model.reference_stride();
        let (aw, ah) = (model.config().anchor_w, model.config().anchor_h);

        let loss_for = |params: &ParamSet| -> f64 {
            let mut sess = Session::new(params, true);
            let qv = sess.input(q.clone());
            let rv = sess.input(r.clone());
            let raw = model.forward_raw(&mut sess, qv, rv).unwrap();
            let loss = detection_loss(&mut sess, raw, &[gt], stride, aw, ah).unwrap();
            sess.tape.value(loss)[[0]]
        };

        let mut sess = Session::new(&model.params, true);
        let qv = sess.input(q.clone());
        let rv = sess.input(r.clone());
        let raw = model.forward_raw(&mut sess, qv, rv).unwrap();
        let loss = detection_loss(&mut sess, raw, &[gt], stride, aw, ah).unwrap();
        let grads = sess.grads(loss).unwrap();

        let mut checked = 0;
        for (id, analytic) in &grads {
            let entry = model.params.entry(*id);
            let mut probe = model.params.clone();
            let numeric = numeric_grad(
                |v| {
                    *probe.value_mut(*id) = v.clone();
                    loss_for(&probe)
                },
                &entry.value,
                1e-5,
            );
            let err = max_rel_error(analytic, &numeric);
            assert!(err < 1e-4, "{}: rel error {err}", entry.name);
            checked += analytic.len();
        }
        assert!(checked > 1000, "expected to sweep every scalar parameter");
    }

    #[test]
    fn zero_learning_rate_leaves_every_parameter_bit_identical() {
        let mut model = GeoLocalizer::new(tiny_config(), 27).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let batch = Batch {
            queries: singleton_batch(&rand3(&mut rng, 4, 8, 8)),
            references: singleton_batch(&rand3(&mut rng, 3, 8, 8)),
            gt_boxes: vec![BBox::new(3.0, 3.0, 2.0, 2.0)],
        };
        let before: Vec<ArrayD<f64>> = model
            .params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.value.clone())
            .collect();
        let mut adam = Adam::new();
        let loss = train_step(&mut model, &mut adam, &batch, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let after: Vec<ArrayD<f64>> = model
            .params
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(_, e)| e.value.clone())
            .collect();
        for (b, a) in before.iter().zip(after.iter()) {
            for (x, y) in b.iter().zip(a.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
