//! Tiled RRAM crossbar arrays holding unfolded, quantized convolution kernels.
//!
//! Each mapped convolution layer is unfolded so that one output filter
//! occupies one column of (C/groups)*K*K rows; layers larger than a tile
//! spill across a grid of tiles. Every weight lands in exactly one 8-bit
//! cell, unmapped cells read as zero, and the mapping is invertible when no
//! faults are present.

mod eval;
mod fault;

pub use eval::{
    faulty_conv_weights, faulty_predict, monte_carlo_eval, quantized_conv_weights, scale_corrections,
    MonteCarloResult,
};
pub use fault::{inject_sa1, FaultInjection, FaultMap};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::net::LayerId;
use crate::quant::{self, QuantizedWeights};
use crate::tensor::Tensor;
use crate::transforms::{Placement, PlacementPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CrossbarGeometry {
    pub rows: usize,
    pub cols: usize,
}

impl Default for CrossbarGeometry {
    fn default() -> Self {
        CrossbarGeometry { rows: 128, cols: 128 }
    }
}

/// One physical tile of 8-bit cells, row-major.
#[derive(Debug, Clone)]
pub struct Tile {
    cells: Vec<i8>,
}

impl Tile {
    fn new(geometry: &CrossbarGeometry) -> Self {
        Tile {
            cells: vec![0; geometry.rows * geometry.cols],
        }
    }
}

/// Where one layer's unfolded weight matrix lives.
#[derive(Debug, Clone)]
pub struct LayerMapping {
    pub layer: LayerId,
    /// Dequantization scale (symmetric per-layer).
    pub scale: f64,
    /// Original weight tensor shape [m, c/groups, k, k].
    pub weight_shape: [usize; 4],
    /// Unfolded extent: rows = (c/groups)*k*k, cols = m.
    pub rows: usize,
    pub cols: usize,
    /// Tile grid covering the unfolded matrix.
    pub row_tiles: usize,
    pub col_tiles: usize,
    /// Global index of this layer's first tile; its grid is laid out
    /// row-major from there.
    pub first_tile: usize,
}

impl LayerMapping {
    /// Global (tile, local row, local col) of an unfolded coordinate.
    fn cell_of(&self, geometry: &CrossbarGeometry, row: usize, col: usize) -> (usize, usize, usize) {
        let tr = row / geometry.rows;
        let tc = col / geometry.cols;
        let tile = self.first_tile + tr * self.col_tiles + tc;
        (tile, row % geometry.rows, col % geometry.cols)
    }
}

/// A full set of crossbar tiles with the layer mappings onto them.
#[derive(Debug, Clone)]
pub struct CrossbarSystem {
    pub geometry: CrossbarGeometry,
    pub tiles: Vec<Tile>,
    pub mappings: Vec<LayerMapping>,
}

/// Unfolded row of a weight coordinate: one column per output filter,
/// rows ordered (input channel, kernel row, kernel col).
fn unfold_row(c_loc: usize, ki: usize, kj: usize, k: usize) -> usize {
    (c_loc * k + ki) * k + kj
}

/// Quantize and store every crossbar-placed convolution of `model` onto
/// fresh tiles. Host-placed layers are not touched.
pub fn map_network(
    model: &Model,
    plan: &PlacementPlan,
    geometry: &CrossbarGeometry,
) -> Result<CrossbarSystem> {
    if geometry.rows == 0 || geometry.cols == 0 {
        return Err(Error::InvalidConfig("crossbar tiles must be non-empty".into()));
    }
    let mut system = CrossbarSystem {
        geometry: *geometry,
        tiles: Vec::new(),
        mappings: Vec::new(),
    };
    for (id, weights) in model.conv_weights() {
        if plan.placement(id) != Placement::Rram {
            continue;
        }
        let q: QuantizedWeights = quant::quantize_tensor(weights);
        let [m, c_pg, k, _] = *weights.shape() else {
            return Err(Error::InvalidSpec(format!("layer {id} weights are not 4-d")));
        };
        let rows = c_pg * k * k;
        let cols = m;
        let row_tiles = rows.div_ceil(geometry.rows);
        let col_tiles = cols.div_ceil(geometry.cols);
        let first_tile = system.tiles.len();
        for _ in 0..row_tiles * col_tiles {
            system.tiles.push(Tile::new(geometry));
        }
        let mapping = LayerMapping {
            layer: id,
            scale: q.scale,
            weight_shape: [m, c_pg, k, k],
            rows,
            cols,
            row_tiles,
            col_tiles,
            first_tile,
        };
        for mi in 0..m {
            for ci in 0..c_pg {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = unfold_row(ci, ki, kj, k);
                        let (tile, lr, lc) = mapping.cell_of(geometry, row, mi);
                        let value = q.values[((mi * c_pg + ci) * k + ki) * k + kj];
                        system.tiles[tile].cells[lr * geometry.cols + lc] = value;
                    }
                }
            }
        }
        system.mappings.push(mapping);
    }
    Ok(system)
}

impl CrossbarSystem {
    pub fn total_cells(&self) -> usize {
        self.tiles.len() * self.geometry.rows * self.geometry.cols
    }

    pub fn mapping(&self, layer: LayerId) -> Option<&LayerMapping> {
        self.mappings.iter().find(|m| m.layer == layer)
    }

    /// Raw stored cell value.
    pub fn cell(&self, tile: usize, row: usize, col: usize) -> i8 {
        self.tiles[tile].cells[row * self.geometry.cols + col]
    }

    /// Read a layer back as dequantized weights; cells listed in the fault
    /// map read as zero regardless of their stored value.
    pub fn read_layer(&self, mapping: &LayerMapping, faults: Option<&FaultMap>) -> Tensor {
        let [m, c_pg, k, _] = mapping.weight_shape;
        let mut out = Tensor::zeros(&mapping.weight_shape);
        let data = out.data_mut();
        for mi in 0..m {
            for ci in 0..c_pg {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = unfold_row(ci, ki, kj, k);
                        let (tile, lr, lc) = mapping.cell_of(&self.geometry, row, mi);
                        let stored = self.tiles[tile].cells[lr * self.geometry.cols + lc];
                        let value = match faults {
                            Some(f) if f.is_faulty(tile, lr, lc) => 0.0,
                            _ => quant::dequantize_value(stored, mapping.scale),
                        };
                        data[((mi * c_pg + ci) * k + ki) * k + kj] = value;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{desk_resnet, LayerKind, LayerSpec, NetworkSpec, SourceRef};
    use crate::transforms::{plan_placement, PlacementPolicy};

    fn conv_only_net(in_ch: usize, out_ch: usize, k: usize) -> NetworkSpec {
        let img = 8;
        NetworkSpec {
            input_shape: [in_ch, img, img],
            layers: vec![
                LayerSpec {
                    id: 0,
                    kind: LayerKind::Conv2d {
                        in_ch,
                        out_ch,
                        kernel: k,
                        stride: 1,
                        padding: 1,
                        groups: 1,
                    },
                    inputs: vec![SourceRef::Input],
                },
                LayerSpec {
                    id: 1,
                    kind: LayerKind::AvgPool { kernel: img, stride: img },
                    inputs: vec![SourceRef::Layer(0)],
                },
                LayerSpec {
                    id: 2,
                    kind: LayerKind::Fc {
                        in_features: out_ch,
                        out_features: 2,
                    },
                    inputs: vec![SourceRef::Layer(1)],
                },
            ],
        }
    }

    #[test]
    fn unfold_dimensions_16x8x3x3() {
        // 8 * 3 * 3 = 72 rows, 16 columns, single 128x128 tile
        let model = Model::init(conv_only_net(8, 16, 3), 0).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let system = map_network(&model, &plan, &CrossbarGeometry::default()).unwrap();
        let m = system.mapping(0).unwrap();
        assert_eq!((m.rows, m.cols), (72, 16));
        assert_eq!((m.row_tiles, m.col_tiles), (1, 1));
        assert_eq!(system.tiles.len(), 1);
    }

    #[test]
    fn unfold_spills_576_rows_across_five_tiles() {
        // 64 * 3 * 3 = 576 rows -> ceil(576 / 128) = 5 row tiles
        let model = Model::init(conv_only_net(64, 64, 3), 0).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let system = map_network(&model, &plan, &CrossbarGeometry::default()).unwrap();
        let m = system.mapping(0).unwrap();
        assert_eq!(m.rows, 576);
        assert_eq!(m.row_tiles, 5);
        assert_eq!(system.tiles.len(), 5);
    }

    #[test]
    fn readback_equals_quantize_dequantize_exactly() {
        let model = Model::init(desk_resnet(&Default::default()), 9).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let system = map_network(&model, &plan, &CrossbarGeometry::default()).unwrap();
        for mapping in &system.mappings {
            let original = &model.conv_weights()[&mapping.layer];
            let q = quant::quantize_tensor(original);
            let expected = quant::dequantize_tensor(&q);
            let read = system.read_layer(mapping, None);
            assert_eq!(read.data(), expected.data(), "layer {}", mapping.layer);
        }
    }

    #[test]
    fn host_layers_are_not_mapped() {
        let model = Model::init(desk_resnet(&Default::default()), 9).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let system = map_network(&model, &plan, &CrossbarGeometry::default()).unwrap();
        for id in model.spec.pointwise_conv_ids() {
            assert!(system.mapping(id).is_none());
        }
    }

    #[test]
    fn small_geometry_still_maps_every_weight() {
        let model = Model::init(conv_only_net(8, 16, 3), 1).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let geom = CrossbarGeometry { rows: 16, cols: 4 };
        let system = map_network(&model, &plan, &geom).unwrap();
        let m = system.mapping(0).unwrap();
        assert_eq!(m.row_tiles, 5); // ceil(72/16)
        assert_eq!(m.col_tiles, 4); // ceil(16/4)
        let original = &model.conv_weights()[&0];
        let expected = quant::dequantize_tensor(&quant::quantize_tensor(original));
        assert_eq!(system.read_layer(m, None).data(), expected.data());
    }
}
