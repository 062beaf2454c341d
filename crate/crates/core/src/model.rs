//! The image-regression network shared by both learned stages: a learned
//! channel expansion, a backbone, and a task head.

use rand::Rng;

use crate::backbone::{Backbone, BackboneFamily};
use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, NodeId, ParamStore, Tensor};
use crate::preprocess::ChannelExpansion;

/// Parameter-name prefixes of the network parts.
pub const EXPAND_PREFIX: &str = "expand";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// ReLU then a fully connected layer over pooled feature maps.
    Reconstruction,
    /// Global average pooling then a fully connected layer.
    Position,
}

/// ReLU followed by a fully connected layer.
#[derive(Debug, Clone)]
pub struct ReconstructionHead {
    pub linear: Linear,
}

impl ReconstructionHead {
    pub fn forward(&self, g: &mut Graph, features: NodeId) -> NodeId {
        let h = g.relu(features);
        self.linear.forward(g, h)
    }

    /// Evaluates the head on one feature vector.
    pub fn apply(&self, store: &ParamStore, features: &[f32]) -> Result<Vec<f32>> {
        apply_rows(store, features, self.linear.in_features, |g, x| self.forward(g, x))
    }
}

/// Global average pooling followed by a fully connected layer.
#[derive(Debug, Clone)]
pub struct PositionHead {
    pub linear: Linear,
}

impl PositionHead {
    pub fn forward(&self, g: &mut Graph, features: NodeId) -> NodeId {
        let pooled = g.adaptive_avg_pool(features, 1, 1);
        let flat = g.flatten(pooled);
        self.linear.forward(g, flat)
    }

    /// Evaluates the head on one (C, H, W) feature map.
    pub fn apply(&self, store: &ParamStore, features: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
        let c = self.linear.in_features;
        if features.len() != c * h * w {
            return Err(Error::Shape(format!("feature map needs {} values, got {}", c * h * w, features.len())));
        }
        let mut g = Graph::inference(store);
        let x = g.input(Tensor::from_vec(&[1, c, h, w], features.to_vec())?);
        let y = self.forward(&mut g, x);
        Ok(g.value(y).data().to_vec())
    }
}

fn apply_rows(
    store: &ParamStore,
    features: &[f32],
    len: usize,
    f: impl Fn(&mut Graph, NodeId) -> NodeId,
) -> Result<Vec<f32>> {
    if features.len() != len {
        return Err(Error::Shape(format!("head expects {len} features, got {}", features.len())));
    }
    let mut g = Graph::inference(store);
    let x = g.input(Tensor::from_vec(&[1, len], features.to_vec())?);
    let y = f(&mut g, x);
    Ok(g.value(y).data().to_vec())
}

#[derive(Debug, Clone)]
enum Head {
    Reconstruction { pool: usize, head: ReconstructionHead },
    Position(PositionHead),
}

/// Expansion → backbone → head, over (B, 2, H, W) inputs.
#[derive(Debug, Clone)]
pub struct RegressorNet {
    pub expand: ChannelExpansion,
    pub backbone: Backbone,
    pub input_hw: (usize, usize),
    pub outputs: usize,
    head: Head,
}

impl RegressorNet {
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        family: BackboneFamily,
        width: usize,
        input_hw: (usize, usize),
        outputs: usize,
        kind: HeadKind,
        rng: &mut R,
    ) -> Result<Self> {
        let min = family.min_input();
        if input_hw.0 < min || input_hw.1 < min {
            return Err(Error::Config(format!(
                "{family} backbone needs inputs of at least {min}x{min}, got {}x{}",
                input_hw.0, input_hw.1
            )));
        }
        let expand = ChannelExpansion::new(store, EXPAND_PREFIX, rng);
        let backbone = Backbone::build(store, BACKBONE_PREFIX, family, width, rng)?;
        let (fh, fw) = {
            let mut g = Graph::inference(store);
            let x = g.input(Tensor::zeros(&[1, 2, input_hw.0, input_hw.1]));
            let x = expand.forward(&mut g, x)?;
            let f = backbone.forward(&mut g, x);
            let (_, _, fh, fw) = g.value(f).dims4();
            (fh, fw)
        };
        let head = match kind {
            HeadKind::Reconstruction => {
                let pool = fh.min(fw).min(2);
                let features = backbone.out_channels * pool * pool;
                Head::Reconstruction {
                    pool,
                    head: ReconstructionHead {
                        linear: Linear::new(store, HEAD_PREFIX, features, outputs, rng),
                    },
                }
            }
            HeadKind::Position => Head::Position(PositionHead {
                linear: Linear::new(store, HEAD_PREFIX, backbone.out_channels, outputs, rng),
            }),
        };
        Ok(RegressorNet {
            expand,
            backbone,
            input_hw,
            outputs,
            head,
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self.head {
            Head::Reconstruction { .. } => HeadKind::Reconstruction,
            Head::Position(_) => HeadKind::Position,
        }
    }

    pub fn reconstruction_head(&self) -> Option<&ReconstructionHead> {
        match &self.head {
            Head::Reconstruction { head, .. } => Some(head),
            Head::Position(_) => None,
        }
    }

    pub fn position_head(&self) -> Option<&PositionHead> {
        match &self.head {
            Head::Position(head) => Some(head),
            Head::Reconstruction { .. } => None,
        }
    }

    /// Backbone output for a (B, 2, H, W) input.
    pub fn features(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = g.value(x).dims4();
        if c != 2 || (h, w) != self.input_hw {
            return Err(Error::Shape(format!(
                "network expects (B, 2, {}, {}) inputs, got (B, {c}, {h}, {w})",
                self.input_hw.0, self.input_hw.1
            )));
        }
        let x = self.expand.forward(g, x)?;
        Ok(self.backbone.forward(g, x))
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let f = self.features(g, x)?;
        Ok(match &self.head {
            Head::Reconstruction { pool, head } => {
                let p = g.adaptive_avg_pool(f, *pool, *pool);
                let flat = g.flatten(p);
                head.forward(g, flat)
            }
            Head::Position(head) => head.forward(g, f),
        })
    }
}
