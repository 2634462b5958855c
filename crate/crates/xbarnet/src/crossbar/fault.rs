//! Stuck-at-one fault maps.
//!
//! A cell trapped in the high state reads back as weight value 0. Fault maps
//! are drawn per crossbar instance from a seed, either i.i.d. per cell at the
//! given rate (default) or with an exact rounded count, and can be written to
//! a text file:
//!
//! ```text
//! # fault map v1
//! tiles <n>
//! rows <tile rows>
//! cols <tile cols>
//! rate <f>
//! seed <seed>
//! kind SA1
//! mode iid|exact
//! <tile> <row> <col>
//! ...
//! ```

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

use super::{CrossbarGeometry, CrossbarSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultInjection {
    /// Every cell independently faulty with probability `rate`.
    Iid,
    /// Exactly `round(rate * cells)` distinct faulty cells.
    ExactCount,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultMap {
    pub rate: f64,
    pub seed: u64,
    pub injection: FaultInjection,
    pub tiles: usize,
    pub geometry: CrossbarGeometry,
    coords: BTreeSet<(u32, u32, u32)>,
}

impl FaultMap {
    pub fn is_faulty(&self, tile: usize, row: usize, col: usize) -> bool {
        self.coords.contains(&(tile as u32, row as u32, col as u32))
    }

    pub fn fault_count(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.coords
            .iter()
            .map(|&(t, r, c)| (t as usize, r as usize, c as usize))
    }

    pub fn serialize(&self) -> String {
        let mut out = String::from("# fault map v1\n");
        out.push_str(&format!("tiles {}\n", self.tiles));
        out.push_str(&format!("rows {}\n", self.geometry.rows));
        out.push_str(&format!("cols {}\n", self.geometry.cols));
        out.push_str(&format!("rate {:?}\n", self.rate));
        out.push_str(&format!("seed {}\n", self.seed));
        out.push_str("kind SA1\n");
        out.push_str(&format!(
            "mode {}\n",
            match self.injection {
                FaultInjection::Iid => "iid",
                FaultInjection::ExactCount => "exact",
            }
        ));
        for (t, r, c) in self.coords() {
            out.push_str(&format!("{t} {r} {c}\n"));
        }
        out
    }

    pub fn parse(content: &str, file: &str) -> Result<FaultMap> {
        let mut tiles = None;
        let mut rows = None;
        let mut cols = None;
        let mut rate = None;
        let mut seed = None;
        let mut mode = FaultInjection::Iid;
        let mut coords = BTreeSet::new();
        for (idx, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |detail: String| Error::Parse {
                file: file.to_string(),
                line: idx + 1,
                detail,
            };
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[0] {
                "tiles" => tiles = Some(parts[1].parse().map_err(|_| err("bad tiles".into()))?),
                "rows" => rows = Some(parts[1].parse().map_err(|_| err("bad rows".into()))?),
                "cols" => cols = Some(parts[1].parse().map_err(|_| err("bad cols".into()))?),
                "rate" => rate = Some(parts[1].parse().map_err(|_| err("bad rate".into()))?),
                "seed" => seed = Some(parts[1].parse().map_err(|_| err("bad seed".into()))?),
                "kind" => {
                    if parts[1] != "SA1" {
                        return Err(err(format!("unsupported fault kind `{}`", parts[1])));
                    }
                }
                "mode" => {
                    mode = match parts[1] {
                        "iid" => FaultInjection::Iid,
                        "exact" => FaultInjection::ExactCount,
                        other => return Err(err(format!("unknown mode `{other}`"))),
                    }
                }
                _ => {
                    if parts.len() != 3 {
                        return Err(err("expected `<tile> <row> <col>`".into()));
                    }
                    let t: u32 = parts[0].parse().map_err(|_| err("bad tile".into()))?;
                    let r: u32 = parts[1].parse().map_err(|_| err("bad row".into()))?;
                    let c: u32 = parts[2].parse().map_err(|_| err("bad col".into()))?;
                    coords.insert((t, r, c));
                }
            }
        }
        let missing = |what: &str| Error::Parse {
            file: file.to_string(),
            line: 0,
            detail: format!("missing `{what}` header"),
        };
        Ok(FaultMap {
            rate: rate.ok_or_else(|| missing("rate"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            injection: mode,
            tiles: tiles.ok_or_else(|| missing("tiles"))?,
            geometry: CrossbarGeometry {
                rows: rows.ok_or_else(|| missing("rows"))?,
                cols: cols.ok_or_else(|| missing("cols"))?,
            },
            coords,
        })
    }
}

/// Draw a stuck-at-one fault map over every cell of `system`.
pub fn inject_sa1(
    system: &CrossbarSystem,
    rate: f64,
    seed: u64,
    injection: FaultInjection,
) -> Result<FaultMap> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!(
            "fault rate must be in [0, 1], got {rate}"
        )));
    }
    let geometry = system.geometry;
    let n_tiles = system.tiles.len();
    let cells_per_tile = geometry.rows * geometry.cols;
    let total = n_tiles * cells_per_tile;
    let mut coords = BTreeSet::new();
    let mut stream = rng::stream(seed, &[0x7361_31]);
    match injection {
        FaultInjection::Iid => {
            if rate > 0.0 {
                for t in 0..n_tiles {
                    for r in 0..geometry.rows {
                        for c in 0..geometry.cols {
                            if stream.random::<f64>() < rate {
                                coords.insert((t as u32, r as u32, c as u32));
                            }
                        }
                    }
                }
            }
        }
        FaultInjection::ExactCount => {
            let want = (rate * total as f64).round() as usize;
            let picked = rand::seq::index::sample(&mut stream, total, want.min(total));
            for idx in picked.iter() {
                let t = idx / cells_per_tile;
                let rem = idx % cells_per_tile;
                coords.insert((t as u32, (rem / geometry.cols) as u32, (rem % geometry.cols) as u32));
            }
        }
    }
    Ok(FaultMap {
        rate,
        seed,
        injection,
        tiles: n_tiles,
        geometry,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossbar::{map_network, CrossbarGeometry};
    use crate::model::Model;
    use crate::net::desk_resnet;
    use crate::transforms::{plan_placement, PlacementPolicy};

    fn small_system() -> CrossbarSystem {
        let model = Model::init(desk_resnet(&Default::default()), 3).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        map_network(&model, &plan, &CrossbarGeometry::default()).unwrap()
    }

    #[test]
    fn zero_rate_gives_empty_map() {
        let system = small_system();
        let map = inject_sa1(&system, 0.0, 1, FaultInjection::Iid).unwrap();
        assert_eq!(map.fault_count(), 0);
    }

    #[test]
    fn iid_count_within_three_sigma_binomial() {
        // one 128x128 tile: 16384 cells, f = 0.1 -> 1638.4 +/- 3*38.4
        let system = small_system();
        let total = system.total_cells() as f64;
        let map = inject_sa1(&system, 0.1, 12345, FaultInjection::Iid).unwrap();
        let expected = 0.1 * total;
        let sigma = (total * 0.1 * 0.9).sqrt();
        let got = map.fault_count() as f64;
        assert!(
            (got - expected).abs() <= 3.0 * sigma,
            "{got} faults vs {expected} +/- {:.1}",
            3.0 * sigma
        );
    }

    #[test]
    fn exact_count_is_exact() {
        let system = small_system();
        let total = system.total_cells();
        let map = inject_sa1(&system, 0.2, 5, FaultInjection::ExactCount).unwrap();
        assert_eq!(map.fault_count(), (0.2 * total as f64).round() as usize);
    }

    #[test]
    fn same_seed_same_coords() {
        let system = small_system();
        let a = inject_sa1(&system, 0.15, 77, FaultInjection::Iid).unwrap();
        let b = inject_sa1(&system, 0.15, 77, FaultInjection::Iid).unwrap();
        assert_eq!(a, b);
        let c = inject_sa1(&system, 0.15, 78, FaultInjection::Iid).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let system = small_system();
        let map = inject_sa1(&system, 0.1, 9, FaultInjection::Iid).unwrap();
        let text = map.serialize();
        let parsed = FaultMap::parse(&text, "fm").unwrap();
        assert_eq!(parsed, map);
        assert_eq!(parsed.serialize(), text);
    }

    #[test]
    fn sa1_read_rule_exhaustive_on_small_tiles() {
        let model = Model::init(desk_resnet(&Default::default()), 3).unwrap();
        let plan = plan_placement(&model.spec, &PlacementPolicy::Default).unwrap();
        let geom = CrossbarGeometry { rows: 8, cols: 8 };
        let system = map_network(&model, &plan, &geom).unwrap();
        let map = inject_sa1(&system, 0.3, 4, FaultInjection::Iid).unwrap();
        for mapping in &system.mappings {
            let clean = system.read_layer(mapping, None);
            let faulty = system.read_layer(mapping, Some(&map));
            let [m, c_pg, k, _] = mapping.weight_shape;
            for mi in 0..m {
                for ci in 0..c_pg {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = (ci * k + ki) * k + kj;
                            let (tile, lr, lc) = mapping.cell_of(&geom, row, mi);
                            let idx = ((mi * c_pg + ci) * k + ki) * k + kj;
                            if map.is_faulty(tile, lr, lc) {
                                assert_eq!(faulty.data()[idx], 0.0);
                            } else {
                                assert_eq!(faulty.data()[idx], clean.data()[idx]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_rate() {
        let system = small_system();
        assert!(inject_sa1(&system, 1.5, 0, FaultInjection::Iid).is_err());
        assert!(inject_sa1(&system, -0.1, 0, FaultInjection::Iid).is_err());
        // rate 1.0 is legal: every cell faulty
        let all = inject_sa1(&system, 1.0, 0, FaultInjection::Iid).unwrap();
        assert_eq!(all.fault_count(), system.total_cells());
    }
}
