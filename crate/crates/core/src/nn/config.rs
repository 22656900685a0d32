use std::fmt;

use super::NnError;

/// Width of the hidden fully connected layer in the replacement head.
pub const HEAD_HIDDEN_UNITS: usize = 256;

/// One entry of a sequential layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// 3×3 convolution, stride 1, zero same-padding.
    Conv3x3 { in_channels: usize, out_channels: usize },
    /// 1×1 convolution (a per-pixel linear map of the channels).
    Conv1x1 { in_channels: usize, out_channels: usize },
    Relu,
    /// 2×2 window, stride 2.
    MaxPool2x2,
    Flatten,
    Dense { in_units: usize, out_units: usize },
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv3x3 { .. } | LayerSpec::Conv1x1 { .. } | LayerSpec::Dense { .. }
        )
    }

    /// Weight shape and bias length, for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((vec![3, 3, in_channels, out_channels], out_channels)),
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
            } => Some((vec![1, 1, in_channels, out_channels], out_channels)),
            LayerSpec::Dense {
                in_units,
                out_units,
            } => Some((vec![in_units, out_units], out_units)),
            _ => None,
        }
    }

    /// `(fan_in, fan_out)` for Glorot-style initialization.
    pub fn fans(&self) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => Some((9 * in_channels, 9 * out_channels)),
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
            } => Some((in_channels, out_channels)),
            LayerSpec::Dense {
                in_units,
                out_units,
            } => Some((in_units, out_units)),
            _ => None,
        }
    }

    /// Output shape given the input shape, or `None` when incompatible.
    pub fn output_shape(&self, input: ActShape) -> Option<ActShape> {
        match (*self, input) {
            (
                LayerSpec::Conv3x3 {
                    in_channels,
                    out_channels,
                }
                | LayerSpec::Conv1x1 {
                    in_channels,
                    out_channels,
                },
                ActShape::Spatial { h, w, c },
            ) if c == in_channels && in_channels > 0 && out_channels > 0 => Some(ActShape::Spatial {
                h,
                w,
                c: out_channels,
            }),
            (LayerSpec::Relu, s) => Some(s),
            (LayerSpec::MaxPool2x2, ActShape::Spatial { h, w, c })
                if h % 2 == 0 && w % 2 == 0 =>
            {
                Some(ActShape::Spatial {
                    h: h / 2,
                    w: w / 2,
                    c,
                })
            }
            (LayerSpec::Flatten, ActShape::Spatial { h, w, c }) => Some(ActShape::Flat(h * w * c)),
            (
                LayerSpec::Dense {
                    in_units,
                    out_units,
                },
                ActShape::Flat(n),
            ) if n == in_units && out_units > 0 => Some(ActShape::Flat(out_units)),
            (LayerSpec::Softmax, ActShape::Flat(n)) => Some(ActShape::Flat(n)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
            } => write!(f, "conv3x3 {in_channels} {out_channels}"),
            LayerSpec::Conv1x1 {
                in_channels,
                out_channels,
            } => write!(f, "conv1x1 {in_channels} {out_channels}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2x2 => f.write_str("maxpool2x2"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense {
                in_units,
                out_units,
            } => write!(f, "dense {in_units} {out_units}"),
            LayerSpec::Softmax => f.write_str("softmax"),
        }
    }
}

/// Activation shape between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl ActShape {
    pub fn len(&self) -> usize {
        match *self {
            ActShape::Spatial { h, w, c } => h * w * c,
            ActShape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ActShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ActShape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            ActShape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Declarative description of a sequential classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub name: String,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    /// Desk-scale network: two conv/pool stages on 32×32 RGB input.
    pub fn micro(num_classes: usize) -> Self {
        use LayerSpec::*;
        ModelConfig {
            name: "micro".into(),
            input_shape: (32, 32, 3),
            layers: vec![
                Conv3x3 {
                    in_channels: 3,
                    out_channels: 8,
                },
                Relu,
                MaxPool2x2,
                Conv3x3 {
                    in_channels: 8,
                    out_channels: 16,
                },
                Relu,
                MaxPool2x2,
                Flatten,
                Dense {
                    in_units: 1024,
                    out_units: 32,
                },
                Relu,
                Dense {
                    in_units: 32,
                    out_units: num_classes,
                },
                Softmax,
            ],
        }
    }

    /// The 13-conv VGG16 feature extractor on 224×224×3 input, topped with
    /// the FC-256 + softmax transfer head.
    pub fn vgg16(num_classes: usize) -> Self {
        use LayerSpec::*;
        let plan: [&[usize]; 5] = [
            &[64, 64],
            &[128, 128],
            &[256, 256, 256],
            &[512, 512, 512],
            &[512, 512, 512],
        ];
        let mut layers = Vec::new();
        let mut channels = 3;
        for group in plan {
            for &out in group {
                layers.push(Conv3x3 {
                    in_channels: channels,
                    out_channels: out,
                });
                layers.push(Relu);
                channels = out;
            }
            layers.push(MaxPool2x2);
        }
        layers.extend([
            Flatten,
            Dense {
                in_units: 7 * 7 * 512,
                out_units: HEAD_HIDDEN_UNITS,
            },
            Relu,
            Dense {
                in_units: HEAD_HIDDEN_UNITS,
                out_units: num_classes,
            },
            Softmax,
        ]);
        ModelConfig {
            name: "vgg16".into(),
            input_shape: (224, 224, 3),
            layers,
        }
    }

    /// Resolves a named preset (`micro` or `vgg16`).
    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            "micro" => Some(Self::micro(num_classes)),
            "vgg16" => Some(Self::vgg16(num_classes)),
            _ => None,
        }
    }

    pub fn input_act(&self) -> ActShape {
        let (h, w, c) = self.input_shape;
        ActShape::Spatial { h, w, c }
    }

    /// Checks shape compatibility and returns the output shape of every layer.
    pub fn validate(&self) -> Result<Vec<ActShape>, NnError> {
        let (h, w, c) = self.input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(NnError::ZeroExtent(format!(
                "input shape {h}x{w}x{c} of config {:?}",
                self.name
            )));
        }
        for layer in &self.layers {
            if let Some((wshape, _)) = layer.param_shapes() {
                if wshape.contains(&0) {
                    return Err(NnError::ZeroExtent(format!("layer {layer}")));
                }
            }
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut current = self.input_act();
        let mut prev_name = format!("input {current}");
        for (idx, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(current).ok_or_else(|| NnError::IncompatibleLayers {
                index: idx,
                first: prev_name.clone(),
                second: layer.to_string(),
                detail: format!("layer cannot accept activation of shape {current}"),
            })?;
            if *layer == LayerSpec::Softmax && idx + 1 != self.layers.len() {
                return Err(NnError::IncompatibleLayers {
                    index: idx + 1,
                    first: layer.to_string(),
                    second: self.layers[idx + 1].to_string(),
                    detail: "softmax must be the final layer".into(),
                });
            }
            shapes.push(next);
            current = next;
            prev_name = layer.to_string();
        }
        let n = self.layers.len();
        let well_terminated = n >= 2
            && self.layers[n - 1] == LayerSpec::Softmax
            && matches!(self.layers[n - 2], LayerSpec::Dense { .. });
        if !well_terminated {
            let first = n
                .checked_sub(2)
                .map(|i| self.layers[i].to_string())
                .unwrap_or_else(|| "input".into());
            let second = self
                .layers
                .last()
                .map(|l| l.to_string())
                .unwrap_or_else(|| "<none>".into());
            return Err(NnError::IncompatibleLayers {
                index: n.saturating_sub(1),
                first,
                second,
                detail: "stack must end with dense followed by softmax".into(),
            });
        }
        Ok(shapes)
    }

    pub fn num_classes(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match *l {
                LayerSpec::Dense { out_units, .. } => Some(out_units),
                _ => None,
            })
            .unwrap_or(0)
    }

    /// Index of the Flatten layer that separates backbone from head.
    pub fn flatten_index(&self) -> Option<usize> {
        self.layers.iter().position(|l| *l == LayerSpec::Flatten)
    }

    /// Line-oriented canonical text, used verbatim inside model files.
    pub fn to_canonical_text(&self) -> String {
        let (h, w, c) = self.input_shape;
        let mut out = format!("name {}\ninput {h} {w} {c}\n", self.name);
        for layer in &self.layers {
            out.push_str(&layer.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_canonical_text(text: &str) -> Result<Self, NnError> {
        let bad = |line: &str| NnError::ConfigSyntax(line.to_string());
        let mut lines = text.lines();
        let name = lines
            .next()
            .and_then(|l| l.strip_prefix("name "))
            .ok_or_else(|| bad("missing name line"))?
            .to_string();
        let input_line = lines.next().ok_or_else(|| bad("missing input line"))?;
        let dims = parse_numbers(input_line, "input", 3).ok_or_else(|| bad(input_line))?;
        let mut layers = Vec::new();
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let kind = line.split_whitespace().next().unwrap_or("");
            let layer = match kind {
                "conv3x3" | "conv1x1" | "dense" => {
                    let v = parse_numbers(line, kind, 2).ok_or_else(|| bad(line))?;
                    match kind {
                        "conv3x3" => LayerSpec::Conv3x3 {
                            in_channels: v[0],
                            out_channels: v[1],
                        },
                        "conv1x1" => LayerSpec::Conv1x1 {
                            in_channels: v[0],
                            out_channels: v[1],
                        },
                        _ => LayerSpec::Dense {
                            in_units: v[0],
                            out_units: v[1],
                        },
                    }
                }
                "relu" if line == kind => LayerSpec::Relu,
                "maxpool2x2" if line == kind => LayerSpec::MaxPool2x2,
                "flatten" if line == kind => LayerSpec::Flatten,
                "softmax" if line == kind => LayerSpec::Softmax,
                _ => return Err(bad(line)),
            };
            layers.push(layer);
        }
        Ok(ModelConfig {
            name,
            input_shape: (dims[0], dims[1], dims[2]),
            layers,
        })
    }
}

fn parse_numbers(line: &str, keyword: &str, count: usize) -> Option<Vec<usize>> {
    let mut parts = line.split_whitespace();
    if parts.next()? != keyword {
        return None;
    }
    let values: Vec<usize> = parts.map(|p| p.parse().ok()).collect::<Option<_>>()?;
    (values.len() == count).then_some(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_validates() {
        let shapes = ModelConfig::micro(4).validate().unwrap();
        assert_eq!(shapes[6], ActShape::Flat(1024));
        assert_eq!(*shapes.last().unwrap(), ActShape::Flat(4));
    }

    #[test]
    fn vgg16_head_input_is_25088() {
        let cfg = ModelConfig::vgg16(4);
        let shapes = cfg.validate().unwrap();
        let flat = cfg.flatten_index().unwrap();
        assert_eq!(shapes[flat], ActShape::Flat(25088));
        let convs = cfg
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv3x3 { .. }))
            .count();
        assert_eq!(convs, 13);
        let pools = cfg
            .layers
            .iter()
            .filter(|l| **l == LayerSpec::MaxPool2x2)
            .count();
        assert_eq!(pools, 5);
        assert_eq!(cfg.num_classes(), 4);
    }

    #[test]
    fn reports_first_incompatible_pair() {
        let mut cfg = ModelConfig::micro(4);
        cfg.layers[3] = LayerSpec::Conv3x3 {
            in_channels: 5,
            out_channels: 16,
        };
        match cfg.validate() {
            Err(NnError::IncompatibleLayers {
                index,
                first,
                second,
                ..
            }) => {
                assert_eq!(index, 3);
                assert_eq!(first, "maxpool2x2");
                assert_eq!(second, "conv3x3 5 16");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_pooling_is_incompatible() {
        let mut cfg = ModelConfig::micro(2);
        cfg.input_shape = (30, 30, 3);
        // 30 -> 15 after the first pool, which the second pool cannot halve.
        assert!(matches!(
            cfg.validate(),
            Err(NnError::IncompatibleLayers { index: 5, .. })
        ));
    }

    #[test]
    fn missing_softmax_tail_rejected() {
        let mut cfg = ModelConfig::micro(2);
        cfg.layers.pop();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        let mut cfg = ModelConfig::micro(2);
        cfg.input_shape = (0, 32, 3);
        assert!(matches!(cfg.validate(), Err(NnError::ZeroExtent(_))));
        let cfg = ModelConfig::micro(0);
        assert!(matches!(cfg.validate(), Err(NnError::ZeroExtent(_))));
    }

    #[test]
    fn canonical_text_round_trip() {
        for cfg in [ModelConfig::micro(3), ModelConfig::vgg16(10)] {
            let text = cfg.to_canonical_text();
            assert_eq!(ModelConfig::from_canonical_text(&text).unwrap(), cfg);
        }
        assert!(ModelConfig::from_canonical_text("name x\ninput 1 2\n").is_err());
        assert!(ModelConfig::from_canonical_text("name x\ninput 1 2 3\nrelu 4\n").is_err());
    }
}
