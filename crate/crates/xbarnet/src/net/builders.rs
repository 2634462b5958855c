//! Stock topologies: the desk-scale residual net used by the fast experiment
//! path, plus full-scale ResNet20 / VGG13 / MobileNetV2-style graphs for
//! shape checks, placement planning, and cost estimation.

use super::{LayerId, LayerKind, LayerSpec, NetworkSpec, SourceRef};

struct NetBuilder {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
}

impl NetBuilder {
    fn new(input_shape: [usize; 3]) -> Self {
        NetBuilder {
            input_shape,
            layers: Vec::new(),
        }
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<SourceRef>) -> SourceRef {
        let id = self.layers.len() as LayerId;
        self.layers.push(LayerSpec { id, kind, inputs });
        SourceRef::Layer(id)
    }

    fn conv(
        &mut self,
        from: SourceRef,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> SourceRef {
        self.push(
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups: 1,
            },
            vec![from],
        )
    }

    /// conv -> batchnorm -> relu
    fn conv_bn_relu(
        &mut self,
        from: SourceRef,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> SourceRef {
        let c = self.conv(from, in_ch, out_ch, kernel, stride, padding);
        let b = self.push(LayerKind::BatchNorm { channels: out_ch }, vec![c]);
        self.push(LayerKind::Relu, vec![b])
    }

    /// Residual basic block: two 3x3 convs with a projection shortcut when
    /// the shape changes.
    fn basic_block(
        &mut self,
        from: SourceRef,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> SourceRef {
        let c1 = self.conv(from, in_ch, out_ch, 3, stride, 1);
        let b1 = self.push(LayerKind::BatchNorm { channels: out_ch }, vec![c1]);
        let r1 = self.push(LayerKind::Relu, vec![b1]);
        let c2 = self.conv(r1, out_ch, out_ch, 3, 1, 1);
        let b2 = self.push(LayerKind::BatchNorm { channels: out_ch }, vec![c2]);
        let shortcut = if stride == 1 && in_ch == out_ch {
            from
        } else {
            let sc = self.conv(from, in_ch, out_ch, 1, stride, 0);
            self.push(LayerKind::BatchNorm { channels: out_ch }, vec![sc])
        };
        let add = self.push(LayerKind::ResidualAdd, vec![b2, shortcut]);
        self.push(LayerKind::Relu, vec![add])
    }

    /// Bottleneck residual block: 1x1 reduce, 3x3, 1x1 expand, with a 1x1
    /// projection shortcut when the shape changes.
    fn bottleneck_block(
        &mut self,
        from: SourceRef,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> SourceRef {
        let mid = (out_ch / 2).max(4);
        let r1 = self.conv_bn_relu(from, in_ch, mid, 1, 1, 0);
        let r2 = self.conv_bn_relu(r1, mid, mid, 3, stride, 1);
        let c3 = self.conv(r2, mid, out_ch, 1, 1, 0);
        let b3 = self.push(LayerKind::BatchNorm { channels: out_ch }, vec![c3]);
        let shortcut = if stride == 1 && in_ch == out_ch {
            from
        } else {
            let sc = self.conv(from, in_ch, out_ch, 1, stride, 0);
            self.push(LayerKind::BatchNorm { channels: out_ch }, vec![sc])
        };
        let add = self.push(LayerKind::ResidualAdd, vec![b3, shortcut]);
        self.push(LayerKind::Relu, vec![add])
    }

    fn finish(
        mut self,
        from: SourceRef,
        pool: usize,
        features: usize,
        classes: usize,
    ) -> NetworkSpec {
        let p = self.push(
            LayerKind::AvgPool {
                kernel: pool,
                stride: pool,
            },
            vec![from],
        );
        let f = self.push(
            LayerKind::Fc {
                in_features: features,
                out_features: classes,
            },
            vec![p],
        );
        self.push(LayerKind::SoftmaxXent { classes }, vec![f]);
        let net = NetworkSpec {
            input_shape: self.input_shape,
            layers: self.layers,
        };
        net.infer_shapes().expect("builder produced a valid network");
        net
    }
}

/// Shape of the desk-scale residual network (about 15k parameters).
#[derive(Debug, Clone)]
pub struct DeskNetConfig {
    pub classes: usize,
    pub in_channels: usize,
    pub image: usize,
    pub widths: [usize; 3],
}

impl Default for DeskNetConfig {
    fn default() -> Self {
        DeskNetConfig {
            classes: 10,
            in_channels: 1,
            image: 12,
            widths: [12, 24, 48],
        }
    }
}

/// Small residual classifier built from bottleneck blocks: point-wise
/// reduce, 3x3, point-wise expand, with 1x1 projection shortcuts at the two
/// downsampling stages. The point-wise layers are the information
/// chokepoints, which is what makes host-vs-crossbar placement of 1x1
/// convolutions worth measuring on this net.
pub fn desk_resnet(cfg: &DeskNetConfig) -> NetworkSpec {
    let [w0, w1, w2] = cfg.widths;
    let mut b = NetBuilder::new([cfg.in_channels, cfg.image, cfg.image]);
    let stem = b.conv_bn_relu(SourceRef::Input, cfg.in_channels, w0, 3, 1, 1);
    let s1 = b.bottleneck_block(stem, w0, w0, 1);
    let s2 = b.bottleneck_block(s1, w0, w1, 2);
    let s3 = b.bottleneck_block(s2, w1, w2, 2);
    let pool = cfg.image / 4;
    b.finish(s3, pool, w2, cfg.classes)
}

/// ResNet20 for 32x32 inputs: 3 stages of 3 basic blocks at widths 16/32/64.
pub fn resnet20(classes: usize) -> NetworkSpec {
    let mut b = NetBuilder::new([3, 32, 32]);
    let mut x = b.conv_bn_relu(SourceRef::Input, 3, 16, 3, 1, 1);
    let widths = [16usize, 32, 64];
    let mut in_ch = 16;
    for (stage, &w) in widths.iter().enumerate() {
        for block in 0..3 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            x = b.basic_block(x, in_ch, w, stride);
            in_ch = w;
        }
    }
    b.finish(x, 8, 64, classes)
}

/// VGG13-style for 32x32 inputs: ten 3x3 convs with batchnorm, average-pool
/// downsampling, one classifier layer. No 1x1 convolutions, no residuals.
pub fn vgg13(classes: usize) -> NetworkSpec {
    let plan: [(usize, usize); 5] = [(64, 64), (64, 128), (128, 256), (256, 512), (512, 512)];
    let mut b = NetBuilder::new([3, 32, 32]);
    let mut x = SourceRef::Input;
    let mut in_ch = 3;
    for (first, second) in plan {
        x = b.conv_bn_relu(x, in_ch, first, 3, 1, 1);
        x = b.conv_bn_relu(x, first, second, 3, 1, 1);
        x = b.push(
            LayerKind::AvgPool {
                kernel: 2,
                stride: 2,
            },
            vec![x],
        );
        in_ch = second;
    }
    // 32 / 2^5 = 1, so the feature map is already 512x1x1.
    b.finish(x, 1, 512, classes)
}

/// MobileNetV2-style for 32x32 inputs: inverted residual blocks built from
/// point-wise (1x1) expansions, depthwise 3x3 convolutions, and point-wise
/// linear projections.
pub fn mobilenet_v2_style(classes: usize) -> NetworkSpec {
    // (expansion factor, output channels, repeats, first stride)
    let blocks: [(usize, usize, usize, usize); 5] =
        [(1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 2, 2), (6, 64, 2, 2), (6, 96, 1, 1)];
    let mut b = NetBuilder::new([3, 32, 32]);
    let mut x = b.conv_bn_relu(SourceRef::Input, 3, 32, 3, 1, 1);
    let mut in_ch = 32;
    for (t, out_ch, repeats, first_stride) in blocks {
        for i in 0..repeats {
            let stride = if i == 0 { first_stride } else { 1 };
            let hidden = in_ch * t;
            let block_in = x;
            let mut y = block_in;
            if t != 1 {
                y = b.conv_bn_relu(y, in_ch, hidden, 1, 1, 0);
            }
            // depthwise
            let dw = b.push(
                LayerKind::Conv2d {
                    in_ch: hidden,
                    out_ch: hidden,
                    kernel: 3,
                    stride,
                    padding: 1,
                    groups: hidden,
                },
                vec![y],
            );
            let dwb = b.push(LayerKind::BatchNorm { channels: hidden }, vec![dw]);
            let dwr = b.push(LayerKind::Relu, vec![dwb]);
            // linear projection
            let pj = b.conv(dwr, hidden, out_ch, 1, 1, 0);
            let pjb = b.push(LayerKind::BatchNorm { channels: out_ch }, vec![pj]);
            x = if stride == 1 && in_ch == out_ch {
                b.push(LayerKind::ResidualAdd, vec![pjb, block_in])
            } else {
                pjb
            };
            in_ch = out_ch;
        }
    }
    // head: point-wise expansion to 320 before pooling
    let head = b.conv_bn_relu(x, in_ch, 320, 1, 1, 0);
    b.finish(head, 8, 320, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Shape;

    fn shape_of(net: &NetworkSpec, id: LayerId) -> Shape {
        let shapes = net.infer_shapes().unwrap();
        let pos = net.layers.iter().position(|l| l.id == id).unwrap();
        shapes[pos]
    }

    #[test]
    fn desk_resnet_shapes_and_size() {
        let net = desk_resnet(&Default::default());
        let shapes = net.infer_shapes().unwrap();
        // stem relu: 8 x 12 x 12
        assert_eq!(shape_of(&net, 2), Shape::Chw(8, 12, 12));
        // last shape is the scalar loss
        assert_eq!(*shapes.last().unwrap(), Shape::Scalar);
        // two 1x1 shortcut convs, at the two downsampling stages
        assert_eq!(net.pointwise_conv_ids().len(), 2);
    }

    #[test]
    fn resnet20_hand_derived_shapes() {
        let net = resnet20(10);
        let shapes = net.infer_shapes().unwrap();
        // stage outputs: 16x32x32, 32x16x16, 64x8x8
        let relu_shapes: Vec<Shape> = net
            .layers
            .iter()
            .zip(&shapes)
            .filter(|(l, _)| matches!(l.kind, LayerKind::Relu))
            .map(|(_, s)| *s)
            .collect();
        assert!(relu_shapes.contains(&Shape::Chw(16, 32, 32)));
        assert!(relu_shapes.contains(&Shape::Chw(32, 16, 16)));
        assert!(relu_shapes.contains(&Shape::Chw(64, 8, 8)));
        // exactly two projection shortcuts
        assert_eq!(net.pointwise_conv_ids().len(), 2);
        // pool collapses 8x8, classifier sees 64 features
        let fc = net
            .layers
            .iter()
            .find(|l| matches!(l.kind, LayerKind::Fc { .. }))
            .unwrap();
        assert_eq!(
            fc.kind,
            LayerKind::Fc {
                in_features: 64,
                out_features: 10
            }
        );
    }

    #[test]
    fn vgg13_has_ten_convs_and_no_pointwise() {
        let net = vgg13(10);
        let convs = net.layers.iter().filter(|l| l.kind.is_conv()).count();
        assert_eq!(convs, 10);
        assert!(net.pointwise_conv_ids().is_empty());
        let shapes = net.infer_shapes().unwrap();
        assert_eq!(*shapes.last().unwrap(), Shape::Scalar);
    }

    #[test]
    fn mobilenet_style_depthwise_and_pointwise() {
        let net = mobilenet_v2_style(10);
        net.infer_shapes().unwrap();
        let depthwise = net
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv2d { groups, .. } if groups > 1))
            .count();
        // one depthwise conv per block
        assert_eq!(depthwise, 8);
        // expansions (7: all but the t=1 block) + projections (8) + head
        assert_eq!(net.pointwise_conv_ids().len(), 16);
    }
}
