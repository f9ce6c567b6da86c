use super::{AggregationConfig, GroundGrid};
use crate::cloud::PointCloud;
use crate::grid::GridSpec;
use crate::tmap::{CostClass, TraversabilityMap};

/// Labels each cell with the highest cost among points whose height above
/// the estimated ground lies in `[-band_below, vehicle_height]`. Points
/// carrying the unknown cost id are ignored; cells left without a
/// considered point are unknown.
///
/// The cloud's labels must already be cost ids (0..=4).
pub fn project_traversability(
    cloud: &PointCloud,
    ground: &GroundGrid,
    g: &GridSpec,
    cfg: &AggregationConfig,
) -> TraversabilityMap {
    assert_eq!((ground.height, ground.width), (g.height, g.width), "ground grid mismatch");
    let unknown = CostClass::Unknown.id();
    let mut best: Vec<Option<u8>> = vec![None; g.num_cells()];
    let labels = cloud.labels.as_deref();
    for (i, p) in cloud.points.iter().enumerate() {
        let cost = labels.map_or(unknown as u32, |l| l[i]).min(unknown as u32) as u8;
        if cost == unknown {
            continue;
        }
        let Some((r, c)) = g.metric_to_cell(p[0] as f64, p[1] as f64) else {
            continue;
        };
        let Some(base) = ground.at(r, c) else {
            continue;
        };
        let dz = p[2] as f64 - base;
        if dz < -cfg.band_below || dz > cfg.vehicle_height {
            continue;
        }
        let slot = &mut best[g.flat_index(r, c)];
        *slot = Some(slot.map_or(cost, |b| b.max(cost)));
    }
    let cells = best.into_iter().map(|b| b.unwrap_or(unknown)).collect();
    TraversabilityMap::from_cells(g, cells).expect("cost ids are in range")
}
