//! Network topology: an ordered, acyclic graph of layer descriptors.
//!
//! Layers are declared in topological order; residual shortcuts are expressed
//! through explicit predecessor references. Shape inference walks the graph
//! once and is the single source of truth for per-layer activation shapes.

mod builders;
mod text;

pub use builders::{desk_resnet, mobilenet_v2_style, resnet20, vgg13, DeskNetConfig};
pub use text::{parse_netspec, serialize_netspec};

use crate::error::{Error, Result};

pub type LayerId = usize;

/// Where a layer reads its input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceRef {
    /// The network input tensor.
    Input,
    Layer(LayerId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// 1 for dense convolution; `in_ch` for depthwise.
        groups: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
    ResidualAdd,
    SoftmaxXent {
        classes: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Fc { .. } => "fc",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::SoftmaxXent { .. } => "softmax_xent",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. })
    }

    /// Convolution kernel size, if this is a convolution.
    pub fn conv_kernel(&self) -> Option<usize> {
        match self {
            LayerKind::Conv2d { kernel, .. } => Some(*kernel),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: LayerId,
    pub kind: LayerKind,
    pub inputs: Vec<SourceRef>,
}

/// Activation shape at a point in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    /// Channels, height, width.
    Chw(usize, usize, usize),
    /// Flat feature vector.
    Flat(usize),
    /// Scalar (loss value).
    Scalar,
}

impl Shape {
    pub fn numel(&self) -> usize {
        match *self {
            Shape::Chw(c, h, w) => c * h * w,
            Shape::Flat(n) => n,
            Shape::Scalar => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// Channels, height, width of one input sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Output spatial extent for standard stride/padding arithmetic.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

impl NetworkSpec {
    /// Run full validation and return per-layer output shapes (indexed by
    /// position in `layers`).
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        let fail = |id: LayerId, detail: String| Error::ShapeMismatch {
            layer: format!("layer {id}"),
            detail,
        };

        let [c0, h0, w0] = self.input_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }

        let mut pos_of = std::collections::HashMap::new();
        for (pos, layer) in self.layers.iter().enumerate() {
            if pos_of.insert(layer.id, pos).is_some() {
                return Err(Error::InvalidSpec(format!("duplicate layer id {}", layer.id)));
            }
        }

        let mut shapes: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut consumed = vec![false; self.layers.len()];

        for (pos, layer) in self.layers.iter().enumerate() {
            let mut in_shapes = Vec::new();
            for src in &layer.inputs {
                match *src {
                    SourceRef::Input => in_shapes.push(Shape::Chw(c0, h0, w0)),
                    SourceRef::Layer(id) => {
                        let Some(&src_pos) = pos_of.get(&id) else {
                            return Err(Error::InvalidSpec(format!(
                                "layer {} reads from unknown layer {id}",
                                layer.id
                            )));
                        };
                        if src_pos >= pos {
                            return Err(Error::InvalidSpec(format!(
                                "layer {} reads from layer {id} which is not declared before it",
                                layer.id
                            )));
                        }
                        consumed[src_pos] = true;
                        in_shapes.push(shapes[src_pos]);
                    }
                }
            }

            let arity = if matches!(layer.kind, LayerKind::ResidualAdd) { 2 } else { 1 };
            if in_shapes.len() != arity {
                return Err(Error::InvalidSpec(format!(
                    "layer {} ({}) takes {arity} input(s), got {}",
                    layer.id,
                    layer.kind.name(),
                    in_shapes.len()
                )));
            }

            let out = match layer.kind {
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    groups,
                } => {
                    if kernel == 0 || in_ch == 0 || out_ch == 0 || stride == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {}: kernel/channels/stride must be >= 1",
                            layer.id
                        )));
                    }
                    if groups == 0 || in_ch % groups != 0 || out_ch % groups != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {}: groups {groups} must divide in {in_ch} and out {out_ch}",
                            layer.id
                        )));
                    }
                    let Shape::Chw(c, h, w) = in_shapes[0] else {
                        return Err(fail(layer.id, "conv2d needs a C*H*W input".into()));
                    };
                    if c != in_ch {
                        return Err(fail(
                            layer.id,
                            format!("conv2d declares {in_ch} input channels, input has {c}"),
                        ));
                    }
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return Err(fail(
                            layer.id,
                            format!("kernel {kernel} exceeds padded input {h}x{w} (pad {padding})"),
                        ));
                    }
                    Shape::Chw(
                        out_ch,
                        conv_out_extent(h, kernel, stride, padding),
                        conv_out_extent(w, kernel, stride, padding),
                    )
                }
                LayerKind::BatchNorm { channels } => match in_shapes[0] {
                    Shape::Chw(c, h, w) if c == channels => Shape::Chw(c, h, w),
                    Shape::Flat(n) if n == channels => Shape::Flat(n),
                    other => {
                        return Err(fail(
                            layer.id,
                            format!("batchnorm over {channels} channels got input {:?}", other),
                        ))
                    }
                },
                LayerKind::Relu => in_shapes[0],
                LayerKind::AvgPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {}: pool kernel/stride must be >= 1",
                            layer.id
                        )));
                    }
                    let Shape::Chw(c, h, w) = in_shapes[0] else {
                        return Err(fail(layer.id, "avgpool needs a C*H*W input".into()));
                    };
                    if kernel > h || kernel > w {
                        return Err(fail(
                            layer.id,
                            format!("pool kernel {kernel} exceeds input {h}x{w}"),
                        ));
                    }
                    Shape::Chw(
                        c,
                        conv_out_extent(h, kernel, stride, 0),
                        conv_out_extent(w, kernel, stride, 0),
                    )
                }
                LayerKind::Fc {
                    in_features,
                    out_features,
                } => {
                    if in_features == 0 || out_features == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {}: fc features must be >= 1",
                            layer.id
                        )));
                    }
                    let n = in_shapes[0].numel();
                    if n != in_features {
                        return Err(fail(
                            layer.id,
                            format!("fc declares {in_features} input features, input has {n}"),
                        ));
                    }
                    Shape::Flat(out_features)
                }
                LayerKind::ResidualAdd => {
                    if in_shapes[0] != in_shapes[1] {
                        return Err(fail(
                            layer.id,
                            format!(
                                "residual_add branches disagree: {:?} vs {:?}",
                                in_shapes[0], in_shapes[1]
                            ),
                        ));
                    }
                    in_shapes[0]
                }
                LayerKind::SoftmaxXent { classes } => {
                    let n = in_shapes[0].numel();
                    if n != classes {
                        return Err(fail(
                            layer.id,
                            format!("softmax_xent over {classes} classes got {n} logits"),
                        ));
                    }
                    if pos != self.layers.len() - 1 {
                        return Err(Error::InvalidSpec(
                            "softmax_xent must be the final layer".into(),
                        ));
                    }
                    Shape::Scalar
                }
            };
            shapes.push(out);
        }

        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }
        // Single output: every layer except the last feeds something.
        for (pos, layer) in self.layers.iter().enumerate() {
            if pos != self.layers.len() - 1 && !consumed[pos] {
                return Err(Error::InvalidSpec(format!(
                    "layer {} is a dead end; the graph must have a single output",
                    layer.id
                )));
            }
        }
        Ok(shapes)
    }

    pub fn layer(&self, id: LayerId) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn output_layer(&self) -> &LayerSpec {
        self.layers.last().expect("validated network is non-empty")
    }

    /// The layer producing classifier logits: the predecessor of a terminal
    /// softmax_xent, or the final layer when no loss layer is attached.
    pub fn logits_layer(&self) -> LayerId {
        let last = self.output_layer();
        match last.kind {
            LayerKind::SoftmaxXent { .. } => match last.inputs[0] {
                SourceRef::Layer(id) => id,
                SourceRef::Input => last.id,
            },
            _ => last.id,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match self.output_layer().kind {
            LayerKind::SoftmaxXent { classes } => Some(classes),
            _ => None,
        }
    }

    /// Ids of convolution layers with 1x1 kernels.
    pub fn pointwise_conv_ids(&self) -> Vec<LayerId> {
        self.layers
            .iter()
            .filter(|l| l.kind.conv_kernel() == Some(1))
            .map(|l| l.id)
            .collect()
    }

    pub fn next_free_id(&self) -> LayerId {
        self.layers.iter().map(|l| l.id + 1).max().unwrap_or(0)
    }
}
