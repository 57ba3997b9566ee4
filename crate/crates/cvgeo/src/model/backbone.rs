//! Convolutional backbones for the two branches.
//!
//! All presets are plain stacks of 3x3 convolutions (downsampling via
//! stride-2 convs, no pooling layers). `ToySmall` is the desk-scale default;
//! `Resnet18` and `Darknet53` mirror the depths and widths of the usual
//! pretrained extractors but start from random weights here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamSet, Session};
use crate::tape::Var;
use rand_chacha::ChaCha8Rng;

/// How one backbone block transforms its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// conv3x3 + relu
    Plain,
    /// two conv3x3 with a (possibly projected) skip connection
    Residual,
    /// 1x1 squeeze + 3x3 expand with identity skip
    Bottleneck,
}

/// One backbone stage: `blocks` blocks at `out_channels`, optionally
/// entering at stride 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub blocks: usize,
    pub downsample: bool,
    pub kind: BlockKind,
}

impl StageSpec {
    pub fn plain(out_channels: usize) -> Self {
        Self {
            out_channels,
            blocks: 1,
            downsample: true,
            kind: BlockKind::Plain,
        }
    }
}

/// Backbone architecture selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneConfig {
    /// 4 plain conv stages, stride 16, 64 output channels.
    ToySmall,
    /// Stem + 4 residual stages of depth 2, stride 32, 512 channels.
    Resnet18,
    /// Stem + 5 bottleneck-residual stages, stride 32, 1024 channels.
    Darknet53,
    /// Arbitrary stage list, for tests and experiments.
    Custom(Vec<StageSpec>),
}

impl BackboneConfig {
    /// Parses a preset name as used on the command line.
    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "toy" | "toy-small" => Ok(Self::ToySmall),
            "resnet18" => Ok(Self::Resnet18),
            "darknet53" => Ok(Self::Darknet53),
            other => Err(Error::Config(format!(
                "unknown backbone preset {other:?} (expected toy-small, resnet18 or darknet53)"
            ))),
        }
    }

    pub fn stages(&self) -> Vec<StageSpec> {
        match self {
            Self::ToySmall => vec![
                StageSpec::plain(16),
                StageSpec::plain(32),
                StageSpec::plain(64),
                StageSpec::plain(64),
            ],
            Self::Resnet18 => {
                let mut stages = vec![
                    // stem: two stride-2 convs stand in for conv7+pool
                    StageSpec::plain(64),
                    StageSpec::plain(64),
                ];
                for (ch, down) in [(64, false), (128, true), (256, true), (512, true)] {
                    stages.push(StageSpec {
                        out_channels: ch,
                        blocks: 2,
                        downsample: down,
                        kind: BlockKind::Residual,
                    });
                }
                stages
            }
            Self::Darknet53 => {
                let mut stages = vec![StageSpec {
                    out_channels: 32,
                    blocks: 1,
                    downsample: false,
                    kind: BlockKind::Plain,
                }];
                for (ch, blocks) in [(64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)] {
                    stages.push(StageSpec {
                        out_channels: ch,
                        blocks,
                        downsample: true,
                        kind: BlockKind::Bottleneck,
                    });
                }
                stages
            }
            Self::Custom(stages) => stages.clone(),
        }
    }

    /// Total spatial downsampling factor.
    pub fn stride(&self) -> usize {
        self.stages()
            .iter()
            .map(|s| if s.downsample { 2 } else { 1 })
            .product()
    }

    pub fn out_channels(&self) -> usize {
        self.stages().last().map(|s| s.out_channels).unwrap_or(0)
    }
}

enum Block {
    Plain {
        conv: Conv2d,
    },
    Residual {
        conv1: Conv2d,
        conv2: Conv2d,
        proj: Option<Conv2d>,
    },
    Bottleneck {
        squeeze: Conv2d,
        expand: Conv2d,
    },
}

/// A built backbone bound to a [`ParamSet`].
pub struct Backbone {
    blocks: Vec<Block>,
    in_channels: usize,
    stride: usize,
    out_channels: usize,
}

impl Backbone {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_channels: usize,
        config: &BackboneConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let stages = config.stages();
        if stages.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        let mut blocks = Vec::new();
        let mut channels = in_channels;
        let mut idx = 0;
        for stage in &stages {
            if stage.blocks == 0 || stage.out_channels == 0 {
                return Err(Error::Config("backbone stage must have blocks and channels".into()));
            }
            for b in 0..stage.blocks {
                let stride = if stage.downsample && b == 0 { 2 } else { 1 };
                let block_name = format!("{name}.b{idx}");
                let block = match stage.kind {
                    BlockKind::Plain => Block::Plain {
                        conv: Conv2d::new(
                            ps,
                            &block_name,
                            channels,
                            stage.out_channels,
                            3,
                            stride,
                            1,
                            rng,
                        ),
                    },
                    BlockKind::Residual => {
                        let proj = if stride != 1 || channels != stage.out_channels {
                            Some(Conv2d::new(
                                ps,
                                &format!("{block_name}.proj"),
                                channels,
                                stage.out_channels,
                                1,
                                stride,
                                0,
                                rng,
                            ))
                        } else {
                            None
                        };
                        Block::Residual {
                            conv1: Conv2d::new(
                                ps,
                                &format!("{block_name}.conv1"),
                                channels,
                                stage.out_channels,
                                3,
                                stride,
                                1,
                                rng,
                            ),
                            conv2: Conv2d::new(
                                ps,
                                &format!("{block_name}.conv2"),
                                stage.out_channels,
                                stage.out_channels,
                                3,
                                1,
                                1,
                                rng,
                            ),
                            proj,
                        }
                    }
                    BlockKind::Bottleneck => {
                        // the downsampling entry conv doubles as the channel
                        // change; bottleneck blocks keep channels fixed
                        if b == 0 && (stride != 1 || channels != stage.out_channels) {
                            let conv = Conv2d::new(
                                ps,
                                &block_name,
                                channels,
                                stage.out_channels,
                                3,
                                stride,
                                1,
                                rng,
                            );
                            channels = stage.out_channels;
                            idx += 1;
                            blocks.push(Block::Plain { conv });
                            let inner = (stage.out_channels / 2).max(1);
                            blocks.push(Block::Bottleneck {
                                squeeze: Conv2d::new(
                                    ps,
                                    &format!("{name}.b{idx}.squeeze"),
                                    channels,
                                    inner,
                                    1,
                                    1,
                                    0,
                                    rng,
                                ),
                                expand: Conv2d::new(
                                    ps,
                                    &format!("{name}.b{idx}.expand"),
                                    inner,
                                    channels,
                                    3,
                                    1,
                                    1,
                                    rng,
                                ),
                            });
                            idx += 1;
                            continue;
                        }
                        let inner = (stage.out_channels / 2).max(1);
                        Block::Bottleneck {
                            squeeze: Conv2d::new(
                                ps,
                                &format!("{block_name}.squeeze"),
                                channels,
                                inner,
                                1,
                                1,
                                0,
                                rng,
                            ),
                            expand: Conv2d::new(
                                ps,
                                &format!("{block_name}.expand"),
                                inner,
                                stage.out_channels,
                                3,
                                1,
                                1,
                                rng,
                            ),
                        }
                    }
                };
                channels = stage.out_channels;
                idx += 1;
                blocks.push(block);
            }
        }
        Ok(Self {
            blocks,
            in_channels,
            stride: config.stride(),
            out_channels: config.out_channels(),
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Runs the backbone on a `(B, C, H, W)` input; `H` and `W` must be
    /// divisible by the stride.
    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let shape = sess.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Shape(format!(
                "backbone expects (B, {}, H, W), got {:?}",
                self.in_channels, shape
            )));
        }
        if shape[2] % self.stride != 0 || shape[3] % self.stride != 0 {
            return Err(Error::Shape(format!(
                "input {}x{} not divisible by backbone stride {}",
                shape[2], shape[3], self.stride
            )));
        }
        let mut cur = x;
        for block in &self.blocks {
            cur = match block {
                Block::Plain { conv } => {
                    let z = conv.forward(sess, cur)?;
                    sess.tape.relu(z)
                }
                Block::Residual { conv1, conv2, proj } => {
                    let skip = match proj {
                        Some(p) => p.forward(sess, cur)?,
                        None => cur,
                    };
                    let z = conv1.forward(sess, cur)?;
                    let z = sess.tape.relu(z);
                    let z = conv2.forward(sess, z)?;
                    let z = sess.tape.add(z, skip)?;
                    sess.tape.relu(z)
                }
                Block::Bottleneck { squeeze, expand } => {
                    let z = squeeze.forward(sess, cur)?;
                    let z = sess.tape.relu(z);
                    let z = expand.forward(sess, z)?;
                    let z = sess.tape.relu(z);
                    sess.tape.add(z, cur)?
                }
            };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;

    fn forward_shape(config: &BackboneConfig, in_ch: usize, h: usize, w: usize) -> Vec<usize> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(&mut ps, "bb", in_ch, config, &mut rng).unwrap();
        let mut sess = Session::new(&ps, false);
        let x = sess.input(ArrayD::from_shape_fn(IxDyn(&[1, in_ch, h, w]), |_| {
            rand::thread_rng().gen_range(0.0..1.0)
        }));
        let y = bb.forward(&mut sess, x).unwrap();
        sess.tape.shape(y).to_vec()
    }

    #[test]
    fn toy_small_is_stride_16_with_64_channels() {
        let cfg = BackboneConfig::ToySmall;
        assert_eq!(cfg.stride(), 16);
        assert_eq!(cfg.out_channels(), 64);
        assert_eq!(forward_shape(&cfg, 3, 256, 256), vec![1, 64, 16, 16]);
        // non-square inputs produce non-square grids
        assert_eq!(forward_shape(&cfg, 4, 256, 512), vec![1, 64, 16, 32]);
    }

    #[test]
    fn paper_depth_presets_have_stride_32() {
        let r18 = BackboneConfig::Resnet18;
        assert_eq!(r18.stride(), 32);
        assert_eq!(r18.out_channels(), 512);
        assert_eq!(forward_shape(&r18, 3, 64, 64), vec![1, 512, 2, 2]);

        let d53 = BackboneConfig::Darknet53;
        assert_eq!(d53.stride(), 32);
        assert_eq!(d53.out_channels(), 1024);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bb = Backbone::new(&mut ps, "bb", 3, &BackboneConfig::ToySmall, &mut rng).unwrap();
        let mut sess = Session::new(&ps, false);
        let x = sess.input(ArrayD::zeros(IxDyn(&[1, 3, 100, 64])));
        assert!(matches!(
            bb.forward(&mut sess, x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn preset_names_parse() {
        assert_eq!(
            BackboneConfig::from_preset("toy").unwrap(),
            BackboneConfig::ToySmall
        );
        assert_eq!(
            BackboneConfig::from_preset("resnet18").unwrap(),
            BackboneConfig::Resnet18
        );
        assert!(BackboneConfig::from_preset("vgg").is_err());
    }
}
