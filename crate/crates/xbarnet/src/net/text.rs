//! Human-readable network spec files.
//!
//! Schema (one directive per line, `#` starts a comment):
//!
//! ```text
//! version 1
//! input <channels> <height> <width>
//! layer <id> conv2d in=<n> out=<m> kernel=<k> stride=<s> pad=<p> [groups=<g>] from=<src>
//! layer <id> batchnorm channels=<c> from=<src>
//! layer <id> relu from=<src>
//! layer <id> avgpool kernel=<k> stride=<s> from=<src>
//! layer <id> fc in=<n> out=<m> from=<src>
//! layer <id> residual_add from=<src>,<src>
//! layer <id> softmax_xent classes=<c> from=<src>
//! ```
//!
//! `<src>` is either the literal `input` or a previously declared layer id.
//! Layers must appear in topological order. Serialization is canonical, so
//! parse -> serialize -> parse is the identity.

use super::{LayerKind, LayerSpec, NetworkSpec, SourceRef};
use crate::error::{Error, Result};
use std::collections::HashMap;

pub fn serialize_netspec(net: &NetworkSpec) -> String {
    let mut out = String::new();
    out.push_str("version 1\n");
    out.push_str(&format!(
        "input {} {} {}\n",
        net.input_shape[0], net.input_shape[1], net.input_shape[2]
    ));
    for layer in &net.layers {
        let srcs: Vec<String> = layer
            .inputs
            .iter()
            .map(|s| match s {
                SourceRef::Input => "input".to_string(),
                SourceRef::Layer(id) => id.to_string(),
            })
            .collect();
        let from = srcs.join(",");
        let line = match layer.kind {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                groups,
            } => {
                let g = if groups == 1 {
                    String::new()
                } else {
                    format!(" groups={groups}")
                };
                format!(
                    "layer {} conv2d in={in_ch} out={out_ch} kernel={kernel} stride={stride} pad={padding}{g} from={from}",
                    layer.id
                )
            }
            LayerKind::BatchNorm { channels } => {
                format!("layer {} batchnorm channels={channels} from={from}", layer.id)
            }
            LayerKind::Relu => format!("layer {} relu from={from}", layer.id),
            LayerKind::AvgPool { kernel, stride } => format!(
                "layer {} avgpool kernel={kernel} stride={stride} from={from}",
                layer.id
            ),
            LayerKind::Fc {
                in_features,
                out_features,
            } => format!(
                "layer {} fc in={in_features} out={out_features} from={from}",
                layer.id
            ),
            LayerKind::ResidualAdd => format!("layer {} residual_add from={from}", layer.id),
            LayerKind::SoftmaxXent { classes } => format!(
                "layer {} softmax_xent classes={classes} from={from}",
                layer.id
            ),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

struct LineParser<'a> {
    file: &'a str,
    line_no: usize,
}

impl<'a> LineParser<'a> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            file: self.file.to_string(),
            line: self.line_no,
            detail: detail.into(),
        }
    }

    fn usize_field(&self, fields: &HashMap<&str, &str>, key: &str) -> Result<usize> {
        let raw = fields
            .get(key)
            .ok_or_else(|| self.err(format!("missing field `{key}`")))?;
        raw.parse()
            .map_err(|_| self.err(format!("field `{key}`: `{raw}` is not a non-negative integer")))
    }
}

/// Parse the network spec text format. `file` is used in error messages only.
pub fn parse_netspec(content: &str, file: &str) -> Result<NetworkSpec> {
    let mut input_shape: Option<[usize; 3]> = None;
    let mut version_seen = false;
    let mut layers: Vec<LayerSpec> = Vec::new();

    for (idx, raw_line) in content.lines().enumerate() {
        let p = LineParser {
            file,
            line_no: idx + 1,
        };
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let directive = words.next().unwrap();
        match directive {
            "version" => {
                let v = words.next().ok_or_else(|| p.err("missing version number"))?;
                if v != "1" {
                    return Err(p.err(format!("unsupported version {v}")));
                }
                version_seen = true;
            }
            "input" => {
                let dims: Vec<usize> = words
                    .map(|w| {
                        w.parse()
                            .map_err(|_| p.err(format!("bad input extent `{w}`")))
                    })
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(p.err("input wants exactly 3 extents: channels height width"));
                }
                input_shape = Some([dims[0], dims[1], dims[2]]);
            }
            "layer" => {
                let id: usize = words
                    .next()
                    .ok_or_else(|| p.err("missing layer id"))?
                    .parse()
                    .map_err(|_| p.err("layer id must be an integer"))?;
                let kind_name = words.next().ok_or_else(|| p.err("missing layer kind"))?;
                let mut fields: HashMap<&str, &str> = HashMap::new();
                for w in words {
                    let (k, v) = w
                        .split_once('=')
                        .ok_or_else(|| p.err(format!("expected key=value, got `{w}`")))?;
                    if fields.insert(k, v).is_some() {
                        return Err(p.err(format!("duplicate field `{k}`")));
                    }
                }
                let from_raw = fields
                    .remove("from")
                    .ok_or_else(|| p.err("missing field `from`"))?;
                let inputs: Vec<SourceRef> = from_raw
                    .split(',')
                    .map(|s| {
                        if s == "input" {
                            Ok(SourceRef::Input)
                        } else {
                            s.parse::<usize>()
                                .map(SourceRef::Layer)
                                .map_err(|_| p.err(format!("bad source `{s}`")))
                        }
                    })
                    .collect::<Result<_>>()?;

                let kind = match kind_name {
                    "conv2d" => LayerKind::Conv2d {
                        in_ch: p.usize_field(&fields, "in")?,
                        out_ch: p.usize_field(&fields, "out")?,
                        kernel: p.usize_field(&fields, "kernel")?,
                        stride: p.usize_field(&fields, "stride")?,
                        padding: p.usize_field(&fields, "pad")?,
                        groups: if fields.contains_key("groups") {
                            p.usize_field(&fields, "groups")?
                        } else {
                            1
                        },
                    },
                    "batchnorm" => LayerKind::BatchNorm {
                        channels: p.usize_field(&fields, "channels")?,
                    },
                    "relu" => LayerKind::Relu,
                    "avgpool" => LayerKind::AvgPool {
                        kernel: p.usize_field(&fields, "kernel")?,
                        stride: p.usize_field(&fields, "stride")?,
                    },
                    "fc" => LayerKind::Fc {
                        in_features: p.usize_field(&fields, "in")?,
                        out_features: p.usize_field(&fields, "out")?,
                    },
                    "residual_add" => LayerKind::ResidualAdd,
                    "softmax_xent" => LayerKind::SoftmaxXent {
                        classes: p.usize_field(&fields, "classes")?,
                    },
                    other => return Err(p.err(format!("unknown layer kind `{other}`"))),
                };
                layers.push(LayerSpec { id, kind, inputs });
            }
            other => {
                return Err(p.err(format!("unknown directive `{other}`")));
            }
        }
    }

    if !version_seen {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 0,
            detail: "missing `version` directive".into(),
        });
    }
    let input_shape = input_shape.ok_or_else(|| Error::Parse {
        file: file.to_string(),
        line: 0,
        detail: "missing `input` directive".into(),
    })?;

    let net = NetworkSpec {
        input_shape,
        layers,
    };
    net.infer_shapes()?;
    Ok(net)
}
