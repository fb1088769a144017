//! Declarative layer stacks and their shape rules.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Channels, height, width.
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    /// Fully connected projection onto class logits followed by softmax.
    SoftmaxOutput {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::SoftmaxOutput { .. }
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxOutput { .. } => "softmax_output",
        }
    }

    /// Output shape for a given input shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match (*self, input) {
            (
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                },
                Shape::Map { h, w, .. },
            ) => {
                if filters == 0 || kernel == 0 || stride == 0 {
                    return Err(NnError::Arch("conv parameters must be positive".into()));
                }
                let oh = conv_out(h, kernel, stride, padding)?;
                let ow = conv_out(w, kernel, stride, padding)?;
                Ok(Shape::Map {
                    c: filters,
                    h: oh,
                    w: ow,
                })
            }
            (LayerSpec::Relu, s) => Ok(s),
            (LayerSpec::MaxPool { window, stride }, Shape::Map { c, h, w }) => {
                if window == 0 || stride == 0 {
                    return Err(NnError::Arch("pool parameters must be positive".into()));
                }
                Ok(Shape::Map {
                    c,
                    h: conv_out(h, window, stride, 0)?,
                    w: conv_out(w, window, stride, 0)?,
                })
            }
            (LayerSpec::Flatten, s) => Ok(Shape::Flat(s.len())),
            (LayerSpec::Dense { units }, Shape::Flat(_)) if units > 0 => Ok(Shape::Flat(units)),
            (LayerSpec::SoftmaxOutput { classes }, Shape::Flat(_)) if classes > 0 => {
                Ok(Shape::Flat(classes))
            }
            (spec, s) => Err(NnError::Arch(format!(
                "layer {} cannot accept input shape {s:?}",
                spec.name()
            ))),
        }
    }

    /// (weight count, bias count) for parameterized layers.
    pub fn param_counts(&self, input: Shape) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                filters, kernel, ..
            } => {
                let c = match input {
                    Shape::Map { c, .. } => c,
                    Shape::Flat(_) => 0,
                };
                (filters * c * kernel * kernel, filters)
            }
            LayerSpec::Dense { units } => (units * input.len(), units),
            LayerSpec::SoftmaxOutput { classes } => (classes * input.len(), classes),
            _ => (0, 0),
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(NnError::Arch(format!(
            "window {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Input geometry plus an ordered layer list ending in `SoftmaxOutput`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    /// 64x64 RGB input, two conv/pool stages, one hidden dense layer, 3-way softmax.
    pub fn desk_default() -> Self {
        Self::two_stage(64, 8, 16, 64, 3)
    }

    /// Same topology on 32x32 input; used for quick experiments.
    pub fn desk_small() -> Self {
        Self::two_stage(32, 8, 16, 32, 3)
    }

    pub fn two_stage(side: usize, f1: usize, f2: usize, hidden: usize, classes: usize) -> Self {
        ArchSpec {
            input: Shape::Map {
                c: 3,
                h: side,
                w: side,
            },
            layers: vec![
                LayerSpec::Conv {
                    filters: f1,
                    kernel: 5,
                    stride: 1,
                    padding: 2,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Conv {
                    filters: f2,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: hidden },
                LayerSpec::Relu,
                LayerSpec::SoftmaxOutput { classes },
            ],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" | "default" => Some(Self::desk_default()),
            "desk-small" | "small" => Some(Self::desk_small()),
            _ => None,
        }
    }

    /// Shapes of every activation: entry 0 is the input, entry i+1 the output of layer i.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        if self.input.is_empty() {
            return Err(NnError::Arch("empty input shape".into()));
        }
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { .. }) => {}
            _ => return Err(NnError::Arch("final layer must be SoftmaxOutput".into())),
        }
        if self.layers[..self.layers.len() - 1]
            .iter()
            .any(|l| matches!(l, LayerSpec::SoftmaxOutput { .. }))
        {
            return Err(NnError::Arch("SoftmaxOutput only allowed as final layer".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut cur = self.input;
        shapes.push(cur);
        for layer in &self.layers {
            cur = layer.output_shape(cur)?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxOutput { classes }) => *classes,
            _ => 0,
        }
    }

    pub fn input_hw(&self) -> (usize, usize, usize) {
        match self.input {
            Shape::Map { c, h, w } => (c, h, w),
            Shape::Flat(n) => (1, 1, n),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes_chain() {
        let shapes = ArchSpec::desk_default().shapes().unwrap();
        assert_eq!(shapes[0], Shape::Map { c: 3, h: 64, w: 64 });
        assert_eq!(shapes[1], Shape::Map { c: 8, h: 64, w: 64 });
        assert_eq!(shapes[3], Shape::Map { c: 8, h: 32, w: 32 });
        assert_eq!(shapes[6], Shape::Map { c: 16, h: 16, w: 16 });
        assert_eq!(shapes[7], Shape::Flat(4096));
        assert_eq!(*shapes.last().unwrap(), Shape::Flat(3));
    }

    #[test]
    fn rejects_missing_head() {
        let mut arch = ArchSpec::desk_default();
        arch.layers.pop();
        assert!(arch.shapes().is_err());
    }

    #[test]
    fn rejects_dense_on_map() {
        let arch = ArchSpec {
            input: Shape::Map { c: 1, h: 4, w: 4 },
            layers: vec![LayerSpec::Dense { units: 3 }, LayerSpec::SoftmaxOutput { classes: 3 }],
        };
        assert!(matches!(arch.shapes(), Err(NnError::Arch(_))));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let spec = LayerSpec::Conv {
            filters: 1,
            kernel: 7,
            stride: 1,
            padding: 0,
        };
        assert!(spec.output_shape(Shape::Map { c: 1, h: 5, w: 5 }).is_err());
    }
}
