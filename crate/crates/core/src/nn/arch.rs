use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    /// `x * sigmoid(x)`.
    Silu,
}

impl Activation {
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

    pub fn leaky_relu() -> Self {
        Activation::LeakyRelu {
            slope: Self::DEFAULT_LEAKY_SLOPE,
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Silu => z * sigmoid(z),
        }
    }

    /// Derivative with respect to the pre-activation. ReLU-family kinks use
    /// the left derivative at 0.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = sigmoid(z);
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn is_invertible(self) -> bool {
        matches!(self, Activation::Tanh | Activation::LeakyRelu { .. })
    }

    pub fn is_relu_family(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu { .. })
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Standard,
    /// Pre-activation `W h / sqrt(fan_in) + b`.
    Ntk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub parameterization: Parameterization,
}

/// Where one dense layer lives inside the flat parameter vector. Weights are
/// stored row-major as `[fan_out x fan_in]`, followed by `fan_out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Coordinate of a single parameter. Biases always have `col == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamCoord {
    pub layer: usize,
    pub kind: ParamKind,
    pub row: usize,
    pub col: usize,
}

impl ArchitectureSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
        parameterization: Parameterization,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
            parameterization,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Shorthand for a standard-parameterized MLP.
    pub fn mlp(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArchitecture(
                "need at least input and output dimensions".into(),
            ));
        }
        Self::new(
            dims[0],
            dims[1..dims.len() - 1].to_vec(),
            dims[dims.len() - 1],
            activation,
            Parameterization::Standard,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidArchitecture(
                "input and output dimensions must be positive".into(),
            ));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidArchitecture(format!(
                "hidden layer {i} has zero width"
            )));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::InvalidArchitecture("leaky slope must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.output_dim);
        w
    }

    pub fn num_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn layouts(&self) -> Vec<LayerLayout> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layout = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset = layout.end();
                layout
            })
            .collect()
    }

    pub fn weight_scale(&self, fan_in: usize) -> f64 {
        match self.parameterization {
            Parameterization::Standard => 1.0,
            Parameterization::Ntk => 1.0 / (fan_in as f64).sqrt(),
        }
    }

    pub fn coord_of(&self, index: usize) -> Result<ParamCoord> {
        for (layer, l) in self.layouts().into_iter().enumerate() {
            if index < l.bias_offset {
                let local = index - l.weight_offset;
                return Ok(ParamCoord {
                    layer,
                    kind: ParamKind::Weight,
                    row: local / l.fan_in,
                    col: local % l.fan_in,
                });
            }
            if index < l.end() {
                return Ok(ParamCoord {
                    layer,
                    kind: ParamKind::Bias,
                    row: index - l.bias_offset,
                    col: 0,
                });
            }
        }
        Err(Error::IndexOutOfRange {
            index,
            len: self.num_params(),
        })
    }

    pub fn index_of(&self, coord: ParamCoord) -> Result<usize> {
        let layouts = self.layouts();
        let l = layouts.get(coord.layer).ok_or_else(|| {
            Error::InvalidCoordinate(format!(
                "layer {} of {}",
                coord.layer,
                layouts.len()
            ))
        })?;
        if coord.row >= l.fan_out {
            return Err(Error::InvalidCoordinate(format!(
                "row {} >= fan_out {} in layer {}",
                coord.row, l.fan_out, coord.layer
            )));
        }
        match coord.kind {
            ParamKind::Weight if coord.col < l.fan_in => {
                Ok(l.weight_offset + coord.row * l.fan_in + coord.col)
            }
            ParamKind::Weight => Err(Error::InvalidCoordinate(format!(
                "col {} >= fan_in {} in layer {}",
                coord.col, l.fan_in, coord.layer
            ))),
            ParamKind::Bias if coord.col == 0 => Ok(l.bias_offset + coord.row),
            ParamKind::Bias => Err(Error::InvalidCoordinate("bias col must be 0".into())),
        }
    }

    /// Every coordinate in flat order.
    pub fn flatten_coords(&self) -> Vec<ParamCoord> {
        let mut out = Vec::with_capacity(self.num_params());
        for (layer, l) in self.layouts().into_iter().enumerate() {
            for row in 0..l.fan_out {
                for col in 0..l.fan_in {
                    out.push(ParamCoord {
                        layer,
                        kind: ParamKind::Weight,
                        row,
                        col,
                    });
                }
            }
            for row in 0..l.fan_out {
                out.push(ParamCoord {
                    layer,
                    kind: ParamKind::Bias,
                    row,
                    col: 0,
                });
            }
        }
        out
    }

    pub fn unflatten_coords(&self, coords: &[ParamCoord]) -> Result<Vec<usize>> {
        coords.iter().map(|&c| self.index_of(c)).collect()
    }
}
