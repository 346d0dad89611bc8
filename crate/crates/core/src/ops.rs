//! The eleven candidate operations of the cell search space.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::params::{BatchNorm, Conv, Forward, ParamId, ParamStore};
use crate::tensor::{Conv2dSpec, PoolKind, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Zero,
    Identity,
    #[serde(rename = "avg_pool_3")]
    AvgPool3,
    #[serde(rename = "max_pool_3")]
    MaxPool3,
    #[serde(rename = "conv_3")]
    Conv3,
    #[serde(rename = "conv_5")]
    Conv5,
    #[serde(rename = "conv_7")]
    Conv7,
    #[serde(rename = "sep_conv_3")]
    SepConv3,
    #[serde(rename = "sep_conv_5")]
    SepConv5,
    #[serde(rename = "dil_sep_conv_3")]
    DilSepConv3,
    #[serde(rename = "dil_sep_conv_5")]
    DilSepConv5,
}

impl OpKind {
    pub const ALL: [OpKind; 11] = [
        OpKind::Zero,
        OpKind::Identity,
        OpKind::AvgPool3,
        OpKind::MaxPool3,
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::Conv7,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilSepConv3,
        OpKind::DilSepConv5,
    ];

    pub const COUNT: usize = 11;

    /// Position in [`OpKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::AvgPool3 => "avg_pool_3",
            OpKind::MaxPool3 => "max_pool_3",
            OpKind::Conv3 => "conv_3",
            OpKind::Conv5 => "conv_5",
            OpKind::Conv7 => "conv_7",
            OpKind::SepConv3 => "sep_conv_3",
            OpKind::SepConv5 => "sep_conv_5",
            OpKind::DilSepConv3 => "dil_sep_conv_3",
            OpKind::DilSepConv5 => "dil_sep_conv_5",
        }
    }

    fn kernel(self) -> usize {
        match self {
            OpKind::Conv3 | OpKind::SepConv3 | OpKind::DilSepConv3 | OpKind::AvgPool3 | OpKind::MaxPool3 => 3,
            OpKind::Conv5 | OpKind::SepConv5 | OpKind::DilSepConv5 => 5,
            OpKind::Conv7 => 7,
            OpKind::Zero | OpKind::Identity => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable scalars allocated by `build_op(kind, channels, stride)`.
pub fn param_count(kind: OpKind, channels: usize, stride: usize) -> usize {
    let (c, k) = (channels, kind.kernel());
    match kind {
        OpKind::Zero | OpKind::AvgPool3 | OpKind::MaxPool3 => 0,
        OpKind::Identity if stride == 1 => 0,
        OpKind::Identity => c * c,
        OpKind::Conv3 | OpKind::Conv5 | OpKind::Conv7 => c * c * k * k + 2 * c,
        OpKind::SepConv3 | OpKind::SepConv5 | OpKind::DilSepConv3 | OpKind::DilSepConv5 => c * k * k + c * c + 2 * c,
    }
}

#[derive(Clone, Debug)]
enum Layers {
    None,
    /// Strided 1×1 projection standing in for identity in reduction cells.
    Project(Conv),
    Conv(Conv, BatchNorm),
    Separable { depthwise: Conv, pointwise: Conv, bn: BatchNorm },
}

/// A built candidate operation: relu → conv → batch norm for the convolutions.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub channels: usize,
    pub stride: usize,
    layers: Layers,
}

fn out_size(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

impl OpInstance {
    pub fn build<T: Real>(
        kind: OpKind,
        channels: usize,
        stride: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
    ) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return config_err(format!("operation stride must be 1 or 2, got {stride}"));
        }
        if channels == 0 {
            return config_err("operation needs at least one channel");
        }
        let c = channels;
        let k = kind.kernel();
        let spec = Conv2dSpec::default().stride(stride);
        let layers = match kind {
            OpKind::Zero | OpKind::AvgPool3 | OpKind::MaxPool3 => Layers::None,
            OpKind::Identity if stride == 1 => Layers::None,
            OpKind::Identity => Layers::Project(Conv::new(store, rng, &format!("{name}.proj"), c, c, 1, spec)),
            OpKind::Conv3 | OpKind::Conv5 | OpKind::Conv7 => Layers::Conv(
                Conv::new(store, rng, &format!("{name}.conv"), c, c, k, spec.padding(k / 2)),
                BatchNorm::new(store, &format!("{name}.bn"), c),
            ),
            OpKind::SepConv3 | OpKind::SepConv5 | OpKind::DilSepConv3 | OpKind::DilSepConv5 => {
                let dil = if matches!(kind, OpKind::DilSepConv3 | OpKind::DilSepConv5) { 2 } else { 1 };
                let dw = spec.padding(dil * (k / 2)).dilation(dil).groups(c);
                Layers::Separable {
                    depthwise: Conv::new(store, rng, &format!("{name}.dw"), c, c, k, dw),
                    pointwise: Conv::new(store, rng, &format!("{name}.pw"), c, c, 1, Conv2dSpec::default()),
                    bn: BatchNorm::new(store, &format!("{name}.bn"), c),
                }
            }
        };
        Ok(Self {
            kind,
            channels,
            stride,
            layers,
        })
    }

    /// Learnable parameter ids, in allocation order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.layers {
            Layers::None => Vec::new(),
            Layers::Project(p) => p.ids(),
            Layers::Conv(c, bn) => [c.ids(), bn.ids()].concat(),
            Layers::Separable { depthwise, pointwise, bn } => [depthwise.ids(), pointwise.ids(), bn.ids()].concat(),
        }
    }

    pub fn apply<T: Real>(&self, fw: &mut Forward<T>, x: Var) -> Result<Var> {
        let s = fw.graph.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return dim_err(format!(
                "{} expects [N,{},H,W] input, got {s:?}",
                self.kind, self.channels
            ));
        }
        match (&self.layers, self.kind) {
            (Layers::None, OpKind::Zero) => {
                let shape = [s[0], s[1], out_size(s[2], self.stride), out_size(s[3], self.stride)];
                Ok(fw.input(Tensor::zeros(&shape)))
            }
            (Layers::None, OpKind::Identity) => Ok(x),
            (Layers::None, OpKind::AvgPool3) => fw.graph.pool2d(x, PoolKind::Avg, 3, self.stride, 1),
            (Layers::None, _) => fw.graph.pool2d(x, PoolKind::Max, 3, self.stride, 1),
            (Layers::Project(p), _) => p.forward(fw, x),
            (Layers::Conv(conv, bn), _) => {
                let h = fw.graph.relu(x)?;
                let h = conv.forward(fw, h)?;
                bn.forward(fw, h)
            }
            (Layers::Separable { depthwise, pointwise, bn }, _) => {
                let h = fw.graph.relu(x)?;
                let h = depthwise.forward(fw, h)?;
                let h = pointwise.forward(fw, h)?;
                bn.forward(fw, h)
            }
        }
    }
}
