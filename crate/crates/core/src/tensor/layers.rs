use super::conv;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// The layer kinds the client architectures are built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// 3x3 kernel, padding 1, no bias.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
    },
    BatchNorm {
        channels: usize,
    },
    /// 3x3 window, stride 2, padding 1.
    MaxPool,
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// A layer together with the mutable state it carries between calls.
#[derive(Clone, Debug)]
pub struct Layer {
    pub kind: LayerKind,
    pub stats: Option<BnStats>,
}

impl Layer {
    pub fn new(kind: LayerKind) -> Self {
        let stats = match kind {
            LayerKind::BatchNorm { channels } => Some(BnStats::new(channels)),
            _ => None,
        };
        Self { kind, stats }
    }
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::MaxPool => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Linear { .. } => "linear",
        }
    }

    /// Parameter tensor dims in the order [`forward`] expects them.
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                ..
            } => vec![vec![out_channels, in_channels, 3, 3]],
            LayerKind::BatchNorm { channels } => vec![vec![channels], vec![channels]],
            LayerKind::MaxPool | LayerKind::GlobalAvgPool => vec![],
            LayerKind::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
        }
    }

    /// Output dims as a pure function of the input dims.
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        let image = |channels: Option<usize>| -> Result<()> {
            let ok = input.len() == 4 && input.iter().all(|&d| d > 0) && channels.is_none_or(|c| input[1] == c);
            if ok {
                Ok(())
            } else {
                Err(Error::shape(self.name(), &[input.first().copied().unwrap_or(1), channels.unwrap_or(0), 0, 0], input))
            }
        };
        match *self {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                stride,
            } => {
                image(Some(in_channels))?;
                if stride == 0 {
                    return Err(Error::Usage("conv2d stride must be positive".into()));
                }
                Ok(vec![
                    input[0],
                    out_channels,
                    conv::out_size(input[2], stride),
                    conv::out_size(input[3], stride),
                ])
            }
            LayerKind::BatchNorm { channels } => {
                image(Some(channels))?;
                Ok(input.to_vec())
            }
            LayerKind::MaxPool => {
                image(None)?;
                Ok(vec![input[0], input[1], conv::out_size(input[2], 2), conv::out_size(input[3], 2)])
            }
            LayerKind::GlobalAvgPool => {
                image(None)?;
                Ok(vec![input[0], input[1], 1, 1])
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let flat: usize = input.iter().skip(1).product();
                if input.len() < 2 || flat != in_features {
                    return Err(Error::shape("linear", &[input.first().copied().unwrap_or(1), in_features], input));
                }
                Ok(vec![input[0], out_features])
            }
        }
    }
}

/// Records one layer application on the tape. Batch norm in train mode updates
/// the layer's running statistics; eval mode only reads them.
pub fn forward(tape: &mut Tape, layer: &mut Layer, params: &[Var], input: Var, mode: Mode) -> Result<Var> {
    let expected = layer.kind.param_dims();
    if params.len() != expected.len() {
        return Err(Error::Usage(format!(
            "{} takes {} parameter tensors, got {}",
            layer.kind.name(),
            expected.len(),
            params.len()
        )));
    }
    for (p, dims) in params.iter().zip(&expected) {
        if tape.value(*p).dims() != dims.as_slice() {
            return Err(Error::shape(format!("{} parameter", layer.kind.name()), dims, tape.value(*p).dims()));
        }
    }
    // validates the input shape with a layer-specific error before recording
    layer.kind.output_dims(tape.value(input).dims())?;
    match layer.kind {
        LayerKind::Conv2d { stride, .. } => tape.conv2d(input, params[0], stride),
        LayerKind::BatchNorm { channels } => {
            let stats = layer.stats.get_or_insert_with(|| BnStats::new(channels));
            tape.batch_norm(input, params[0], params[1], stats, mode)
        }
        LayerKind::MaxPool => tape.max_pool(input),
        LayerKind::GlobalAvgPool => tape.global_avg_pool(input),
        LayerKind::Linear { .. } => tape.linear(input, params[0], params[1]),
    }
}
