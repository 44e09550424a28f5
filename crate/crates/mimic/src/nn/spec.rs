//! Declarative layer lists and shape-chain validation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("layer {index} ({layer}): {reason}")]
    InvalidLayer {
        index: usize,
        layer: String,
        reason: String,
    },
    #[error("spec must end with a softmax layer")]
    MissingSoftmax,
    #[error("input shape must have 1 or 3 dimensions, got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error("cannot parse spec text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        out_channels: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    Dense {
        width: usize,
    },
    Relu,
    Dropout {
        rate: f32,
    },
    Softmax {
        num_classes: usize,
    },
}

impl LayerSpec {
    /// 3x3 convolution with "same" zero padding, stride 1.
    pub fn conv_same(kernel: usize, out_channels: usize) -> Self {
        LayerSpec::Conv {
            kernel_h: kernel,
            kernel_w: kernel,
            out_channels,
            padding: (kernel - 1) / 2,
        }
    }

    fn describe(&self) -> String {
        match self {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                out_channels,
                padding,
            } => format!("conv {kernel_h}x{kernel_w}x{out_channels} pad {padding}"),
            LayerSpec::MaxPool { window } => format!("maxpool {window}"),
            LayerSpec::Dense { width } => format!("dense {width}"),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::Dropout { rate } => format!("dropout {rate}"),
            LayerSpec::Softmax { num_classes } => format!("softmax {num_classes}"),
        }
    }
}

/// Shape of the activation flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat { width: usize },
}

impl LayerShape {
    pub fn elements(&self) -> usize {
        match *self {
            LayerShape::Spatial {
                channels,
                height,
                width,
            } => channels * height * width,
            LayerShape::Flat { width } => width,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            LayerShape::Spatial {
                channels,
                height,
                width,
            } => vec![channels, height, width],
            LayerShape::Flat { width } => vec![width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ArchitectureSpec {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self {
            input_shape,
            layers,
        }
    }

    pub fn input_layer_shape(&self) -> Result<LayerShape, SpecError> {
        match self.input_shape.as_slice() {
            &[w] => Ok(LayerShape::Flat { width: w }),
            &[c, h, w] => Ok(LayerShape::Spatial {
                channels: c,
                height: h,
                width: w,
            }),
            other => Err(SpecError::BadInputShape(other.to_vec())),
        }
    }

    /// Chains shapes through all layers. Returns the output shape of each
    /// layer; fails with the index of the first inconsistent layer.
    pub fn validate(&self) -> Result<Vec<LayerShape>, SpecError> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(SpecError::BadInputShape(self.input_shape.clone()));
        }
        let mut cur = self.input_layer_shape()?;
        let mut out = Vec::with_capacity(self.layers.len());
        let last = self.layers.len().checked_sub(1).ok_or(SpecError::MissingSoftmax)?;
        for (index, layer) in self.layers.iter().enumerate() {
            let err = |reason: String| SpecError::InvalidLayer {
                index,
                layer: layer.describe(),
                reason,
            };
            let is_softmax = matches!(layer, LayerSpec::Softmax { .. });
            if is_softmax && index != last {
                return Err(err("softmax must be the last layer".into()));
            }
            cur = match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_channels,
                    padding,
                } => match cur {
                    LayerShape::Spatial {
                        channels: _,
                        height,
                        width,
                    } => {
                        if kernel_h == 0 || kernel_w == 0 || out_channels == 0 {
                            return Err(err("zero-sized kernel or channel count".into()));
                        }
                        let oh = (height + 2 * padding)
                            .checked_sub(kernel_h - 1)
                            .filter(|&v| v > 0);
                        let ow = (width + 2 * padding)
                            .checked_sub(kernel_w - 1)
                            .filter(|&v| v > 0);
                        match (oh, ow) {
                            (Some(oh), Some(ow)) => LayerShape::Spatial {
                                channels: out_channels,
                                height: oh,
                                width: ow,
                            },
                            _ => {
                                return Err(err(format!(
                                    "kernel larger than padded input {height}x{width}"
                                )))
                            }
                        }
                    }
                    LayerShape::Flat { .. } => {
                        return Err(err("conv requires a spatial input".into()))
                    }
                },
                LayerSpec::MaxPool { window } => match cur {
                    LayerShape::Spatial {
                        channels,
                        height,
                        width,
                    } => {
                        if window == 0 || height < window || width < window {
                            return Err(err(format!(
                                "pool window {window} does not fit {height}x{width}"
                            )));
                        }
                        LayerShape::Spatial {
                            channels,
                            height: height / window,
                            width: width / window,
                        }
                    }
                    LayerShape::Flat { .. } => {
                        return Err(err("maxpool requires a spatial input".into()))
                    }
                },
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(err("dense width must be positive".into()));
                    }
                    LayerShape::Flat { width }
                }
                LayerSpec::Relu => cur,
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(err(format!("dropout rate {rate} outside [0,1)")));
                    }
                    cur
                }
                LayerSpec::Softmax { num_classes } => match cur {
                    LayerShape::Flat { width } if width == num_classes => cur,
                    other => {
                        return Err(err(format!(
                            "softmax over {num_classes} classes fed by {other:?}"
                        )))
                    }
                },
            };
            out.push(cur);
        }
        if !matches!(self.layers[last], LayerSpec::Softmax { .. }) {
            return Err(SpecError::MissingSoftmax);
        }
        Ok(out)
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::Softmax { num_classes }) => Some(*num_classes),
            _ => None,
        }
    }

    /// Canonical one-layer-per-line text rendering, used by the model file
    /// format. `parse_canonical` inverts it exactly.
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::from("input");
        for d in &self.input_shape {
            s.push_str(&format!(" {d}"));
        }
        s.push('\n');
        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv {
                    kernel_h,
                    kernel_w,
                    out_channels,
                    padding,
                } => s.push_str(&format!("conv {kernel_h} {kernel_w} {out_channels} {padding}\n")),
                LayerSpec::MaxPool { window } => s.push_str(&format!("maxpool {window}\n")),
                LayerSpec::Dense { width } => s.push_str(&format!("dense {width}\n")),
                LayerSpec::Relu => s.push_str("relu\n"),
                LayerSpec::Dropout { rate } => s.push_str(&format!("dropout {rate}\n")),
                LayerSpec::Softmax { num_classes } => {
                    s.push_str(&format!("softmax {num_classes}\n"))
                }
            }
        }
        s
    }

    pub fn parse_canonical(text: &str) -> Result<Self, SpecError> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let bad = |what: &str| SpecError::Parse(format!("line {}: {what}", lineno + 1));
            let nums = |n: usize| -> Result<Vec<usize>, SpecError> {
                if rest.len() != n {
                    return Err(bad(&format!("expected {n} arguments, got {}", rest.len())));
                }
                rest.iter()
                    .map(|t| t.parse::<usize>().map_err(|_| bad("bad integer")))
                    .collect()
            };
            match head {
                "input" => {
                    let dims: Result<Vec<usize>, _> = rest
                        .iter()
                        .map(|t| t.parse::<usize>().map_err(|_| bad("bad integer")))
                        .collect();
                    input_shape = Some(dims?);
                }
                "conv" => {
                    let v = nums(4)?;
                    layers.push(LayerSpec::Conv {
                        kernel_h: v[0],
                        kernel_w: v[1],
                        out_channels: v[2],
                        padding: v[3],
                    });
                }
                "maxpool" => layers.push(LayerSpec::MaxPool { window: nums(1)?[0] }),
                "dense" => layers.push(LayerSpec::Dense { width: nums(1)?[0] }),
                "relu" => layers.push(LayerSpec::Relu),
                "dropout" => {
                    if rest.len() != 1 {
                        return Err(bad("dropout takes one rate"));
                    }
                    let rate: f32 = rest[0].parse().map_err(|_| bad("bad rate"))?;
                    layers.push(LayerSpec::Dropout { rate });
                }
                "softmax" => layers.push(LayerSpec::Softmax {
                    num_classes: nums(1)?[0],
                }),
                other => return Err(bad(&format!("unknown layer kind '{other}'"))),
            }
        }
        let input_shape = input_shape.ok_or_else(|| SpecError::Parse("missing input line".into()))?;
        Ok(Self {
            input_shape,
            layers,
        })
    }

    /// The full modified VGG-16 student architecture for (3,32,32) inputs:
    /// five conv blocks, two dense 512 layers, softmax over 10 classes.
    pub fn modified_vgg16() -> Self {
        let mut layers = Vec::new();
        for &(reps, ch) in &[(2usize, 64usize), (2, 128), (3, 256), (3, 512), (3, 512)] {
            for _ in 0..reps {
                layers.push(LayerSpec::conv_same(3, ch));
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::MaxPool { window: 2 });
        }
        for _ in 0..2 {
            layers.push(LayerSpec::Dense { width: 512 });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { width: 10 });
        layers.push(LayerSpec::Softmax { num_classes: 10 });
        Self {
            input_shape: vec![3, 32, 32],
            layers,
        }
    }

    /// Small two-conv-block CNN used for desk-scale mentors and students.
    pub fn small_cnn(
        input_shape: Vec<usize>,
        conv_channels: (usize, usize),
        hidden: usize,
        num_classes: usize,
        dropout: f32,
    ) -> Self {
        let mut layers = vec![
            LayerSpec::conv_same(3, conv_channels.0),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::conv_same(3, conv_channels.1),
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Dense { width: hidden },
            LayerSpec::Relu,
        ];
        if dropout > 0.0 {
            layers.push(LayerSpec::Dropout { rate: dropout });
        }
        layers.push(LayerSpec::Dense { width: num_classes });
        layers.push(LayerSpec::Softmax { num_classes });
        Self {
            input_shape,
            layers,
        }
    }
}
