use super::AggregationConfig;
use crate::cloud::PointCloud;
use crate::grid::GridSpec;

/// Estimated ground elevation per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundGrid {
    pub height: usize,
    pub width: usize,
    pub elevation: Vec<f64>,
    pub valid: Vec<bool>,
}

impl GroundGrid {
    pub fn at(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.elevation[i])
    }
}

/// Sorted-order statistic at fraction `q` (lower nearest rank).
pub(crate) fn quantile(values: &mut [f64], q: f64) -> f64 {
    let k = ((values.len() - 1) as f64 * q).floor() as usize;
    let (_, v, _) = values.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *v
}

/// Points of the cloud binned per cell (z inside the crop range only).
pub(crate) fn bin_z(cloud: &PointCloud, g: &GridSpec) -> Vec<Vec<f64>> {
    let mut bins = vec![Vec::new(); g.num_cells()];
    for p in &cloud.points {
        let z = p[2] as f64;
        if !g.contains_z(z) {
            continue;
        }
        if let Some((r, c)) = g.metric_to_cell(p[0] as f64, p[1] as f64) {
            bins[g.flat_index(r, c)].push(z);
        }
    }
    bins
}

/// Ground elevation = `ground_percentile` quantile of z over the 3x3 cell
/// neighbourhood. Cells whose neighbourhood holds no point are invalid.
pub fn estimate_ground(cloud: &PointCloud, g: &GridSpec, cfg: &AggregationConfig) -> GroundGrid {
    let bins = bin_z(cloud, g);
    let (h, w) = (g.height, g.width);
    let mut elevation = vec![0.0; h * w];
    let mut valid = vec![false; h * w];
    let mut scratch = Vec::new();
    for r in 0..h {
        for c in 0..w {
            scratch.clear();
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    scratch.extend_from_slice(&bins[rr * w + cc]);
                }
            }
            if !scratch.is_empty() {
                elevation[r * w + c] = quantile(&mut scratch, cfg.ground_percentile);
                valid[r * w + c] = true;
            }
        }
    }
    GroundGrid {
        height: h,
        width: w,
        elevation,
        valid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::centered(2.0, (-3.0, 3.0), 0.2).unwrap()
    }

    fn plane(g: &GridSpec, per_cell: usize) -> Vec<[f32; 4]> {
        let mut pts = Vec::new();
        for r in 0..g.height {
            for c in 0..g.width {
                let (x, y) = g.cell_center(r, c).unwrap();
                for k in 0..per_cell {
                    let off = (k as f64 / per_cell as f64 - 0.5) * 0.15;
                    pts.push([(x + off) as f32, (y - off) as f32, 0.0, 0.1]);
                }
            }
        }
        pts
    }

    #[test]
    fn flat_plane() {
        let g = grid();
        let ground = estimate_ground(&PointCloud::new(plane(&g, 4)), &g, &AggregationConfig::default());
        assert!(ground.valid.iter().all(|&v| v));
        assert!(ground.elevation.iter().all(|&e| e.abs() < 1e-9));
    }

    #[test]
    fn box_top_is_ignored_by_low_percentile() {
        let g = grid();
        let mut pts = plane(&g, 8);
        let (x, y) = g.cell_center(10, 10).unwrap();
        for k in 0..6 {
            pts.push([x as f32 + 0.01 * k as f32, y as f32, 1.0, 0.5]);
        }
        let cloud = PointCloud::new(pts);
        let cfg = AggregationConfig::default();
        let ground = estimate_ground(&cloud, &g, &cfg);
        // Brute force over the 3x3 neighbourhood.
        let mut zs: Vec<f64> = cloud
            .points
            .iter()
            .filter(|p| {
                let (r, c) = g.metric_to_cell(p[0] as f64, p[1] as f64).unwrap();
                (9..=11).contains(&r) && (9..=11).contains(&c)
            })
            .map(|p| p[2] as f64)
            .collect();
        zs.sort_by(f64::total_cmp);
        let expected = zs[((zs.len() - 1) as f64 * 0.05).floor() as usize];
        assert_eq!(ground.at(10, 10), Some(expected));
        assert!(expected.abs() < 1e-9);
    }

    #[test]
    fn empty_neighbourhood_is_invalid() {
        let g = grid();
        let (x, y) = g.cell_center(0, 0).unwrap();
        let ground = estimate_ground(&PointCloud::new(vec![[x as f32, y as f32, 0.0, 0.0]]), &g, &AggregationConfig::default());
        assert!(ground.at(1, 1).is_some());
        assert!(ground.at(2, 2).is_none());
        assert!(ground.at(19, 19).is_none());
    }

    #[test]
    fn quantile_lower_rank() {
        let mut v = vec![5.0, 1.0, 3.0, 2.0, 4.0];
        assert_eq!(quantile(&mut v, 0.05), 1.0);
        assert_eq!(quantile(&mut v, 0.5), 3.0);
    }
}
