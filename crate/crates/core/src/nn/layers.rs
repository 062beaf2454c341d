use rand::Rng;

use super::graph::{Conv2dSpec, Graph, NodeId};
use super::params::{kaiming_normal, uniform_fan_in, BufferId, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        block: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            block,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), uniform_fan_in(&[out_channels], fan_in, rng), block));
        Conv2d {
            weight,
            bias,
            spec: Conv2dSpec { stride, pad },
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.conv2d(x, self.weight, self.bias, self.spec)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub const MOMENTUM: f32 = 0.1;
    pub const EPS: f32 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, block: Option<usize>) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), block),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), block),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            Self::MOMENTUM,
            Self::EPS,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{name}.weight"),
                uniform_fan_in(&[out_features, in_features], in_features, rng),
                None,
            ),
            bias: store.add(
                format!("{name}.bias"),
                uniform_fan_in(&[out_features], in_features, rng),
                None,
            ),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        g.linear(x, self.weight, self.bias)
    }
}
