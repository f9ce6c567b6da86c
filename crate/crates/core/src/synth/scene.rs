use rand::Rng;
use serde::{Deserialize, Serialize};

use super::spline::Spline2;
use super::{semantic, SynthError};
use crate::cloud::Pose;
use crate::dataset::Ontology;
use crate::grid::GridSpec;
use crate::rng;
use crate::tmap::{CostClass, TraversabilityMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    /// The scene covers `[-half_extent, half_extent)²`.
    pub half_extent: f64,
    pub road_half_width: (f64, f64),
    /// Lateral amplitude of the road centreline.
    pub road_wiggle: f64,
    pub free_patches: usize,
    pub patch_radius: (f64, f64),
    pub bushes: usize,
    pub bush_radius: (f64, f64),
    pub bush_height: (f64, f64),
    pub boxes: usize,
    pub box_side: (f64, f64),
    pub box_height: (f64, f64),
    pub walls: usize,
    pub wall_length: (f64, f64),
    pub wall_thickness: f64,
    pub wall_height: (f64, f64),
    pub trunks: usize,
    pub trunk_radius: (f64, f64),
    pub trunk_height: f64,
    /// Free space kept between obstacles and the road edge.
    pub clearance: f64,
    pub terrain_amplitude: f64,
    pub terrain_wavelength: f64,
    /// Cell size of the height-field raster used for ray casting.
    pub raster_resolution: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            half_extent: 60.0,
            road_half_width: (2.5, 3.5),
            road_wiggle: 6.0,
            free_patches: 8,
            patch_radius: (2.0, 4.5),
            bushes: 70,
            bush_radius: (1.0, 2.5),
            bush_height: (0.6, 1.2),
            boxes: 45,
            box_side: (1.2, 3.5),
            box_height: (1.0, 2.5),
            walls: 10,
            wall_length: (5.0, 14.0),
            wall_thickness: 0.6,
            wall_height: (2.0, 3.0),
            trunks: 30,
            trunk_radius: (0.3, 0.5),
            trunk_height: 4.0,
            clearance: 1.0,
            terrain_amplitude: 0.15,
            terrain_wavelength: 15.0,
            raster_resolution: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { center: [f64; 2], radius: f64 },
    Rect { center: [f64; 2], half: [f64; 2], yaw: f64 },
    /// Band of the given half width around the scene's road centreline.
    Ribbon { half_width: f64 },
}

/// One footprint with its semantic id and height above the terrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub semantic: u32,
    pub shape: Shape,
    pub height: f64,
}

/// A seeded 2.5-D scene. Regions later in the list cover earlier ones;
/// anything not covered is grass.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub params: SceneParams,
    pub road: Spline2,
    pub regions: Vec<Region>,
    terrain_phase: [f64; 2],
    raster: Raster,
}

#[derive(Debug, Clone, PartialEq)]
struct Raster {
    origin: f64,
    res: f64,
    size: usize,
    semantic: Vec<u32>,
    surface: Vec<f32>,
}

impl Shape {
    fn contains(&self, p: [f64; 2], road: &Spline2) -> bool {
        match *self {
            Shape::Disc { center, radius } => {
                (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) <= radius * radius
            }
            Shape::Rect { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= half[0] && v.abs() <= half[1]
            }
            Shape::Ribbon { half_width } => road.distance_to(p) <= half_width,
        }
    }

    /// Axis-aligned bounding box `[xmin, ymin, xmax, ymax]`; `None` for the
    /// ribbon.
    fn bbox(&self) -> Option<[f64; 4]> {
        match *self {
            Shape::Disc { center, radius } => Some([
                center[0] - radius,
                center[1] - radius,
                center[0] + radius,
                center[1] + radius,
            ]),
            Shape::Rect { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let ex = (c * half[0]).abs() + (s * half[1]).abs();
                let ey = (s * half[0]).abs() + (c * half[1]).abs();
                Some([center[0] - ex, center[1] - ey, center[0] + ex, center[1] + ey])
            }
            Shape::Ribbon { .. } => None,
        }
    }

    /// Radius of a circle around the shape's centre enclosing it.
    fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Disc { radius, .. } => radius,
            Shape::Rect { half, .. } => half[0].hypot(half[1]),
            Shape::Ribbon { .. } => f64::INFINITY,
        }
    }

    pub fn area(&self, road: &Spline2) -> f64 {
        match *self {
            Shape::Disc { radius, .. } => std::f64::consts::PI * radius * radius,
            Shape::Rect { half, .. } => 4.0 * half[0] * half[1],
            Shape::Ribbon { half_width } => 2.0 * half_width * road.length(),
        }
    }
}

fn sample(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Lays out a scene from `seed`. Fails when the layout does not contain all
/// four cost classes.
pub fn build_scene(seed: u64, params: &SceneParams) -> Result<Scene, SynthError> {
    if !(params.half_extent > 0.0) || !(params.raster_resolution > 0.0) {
        return Err(SynthError::Params("extent and raster resolution must be positive".into()));
    }
    let mut rng = rng::rng(seed, 0x5CE7E);
    let e = params.half_extent;

    // Road centreline across the scene along x with a lateral wiggle.
    let n_ctrl = ((2.0 * e) / 15.0).ceil() as usize + 1;
    let mut control = Vec::with_capacity(n_ctrl);
    let mut y = 0.0f64;
    for i in 0..n_ctrl {
        let x = -e + 2.0 * e * i as f64 / (n_ctrl - 1) as f64;
        control.push([x, y]);
        y = (y + rng.gen_range(-0.6..0.6) * params.road_wiggle).clamp(-params.road_wiggle, params.road_wiggle);
    }
    let road = Spline2::new(control);
    let road_hw = sample(&mut rng, params.road_half_width);

    let mut regions = Vec::new();
    for _ in 0..params.free_patches {
        let radius = sample(&mut rng, params.patch_radius);
        let center = [rng.gen_range(-e..e), rng.gen_range(-e..e)];
        regions.push(Region {
            semantic: semantic::PARKING,
            shape: Shape::Disc { center, radius },
            height: 0.0,
        });
    }
    regions.push(Region {
        semantic: semantic::ROAD,
        shape: Shape::Ribbon { half_width: road_hw },
        height: 0.0,
    });

    let keep_out = road_hw + params.clearance;
    let place = |rng: &mut rand_chacha::ChaCha8Rng, make: &mut dyn FnMut(&mut rand_chacha::ChaCha8Rng, [f64; 2]) -> Region| {
        for _ in 0..50 {
            let center = [rng.gen_range(-e..e), rng.gen_range(-e..e)];
            let region = make(rng, center);
            if road.distance_to(center) - region.shape.bounding_radius() > keep_out {
                return Some(region);
            }
        }
        None
    };
    for _ in 0..params.bushes {
        if let Some(r) = place(&mut rng, &mut |rng, center| Region {
            semantic: semantic::BUSH,
            shape: Shape::Disc {
                center,
                radius: sample(rng, params.bush_radius),
            },
            height: sample(rng, params.bush_height),
        }) {
            regions.push(r);
        }
    }
    for _ in 0..params.boxes {
        if let Some(r) = place(&mut rng, &mut |rng, center| Region {
            semantic: semantic::BOX,
            shape: Shape::Rect {
                center,
                half: [sample(rng, params.box_side) / 2.0, sample(rng, params.box_side) / 2.0],
                yaw: rng.gen_range(0.0..std::f64::consts::PI),
            },
            height: sample(rng, params.box_height),
        }) {
            regions.push(r);
        }
    }
    for _ in 0..params.walls {
        if let Some(r) = place(&mut rng, &mut |rng, center| Region {
            semantic: semantic::WALL,
            shape: Shape::Rect {
                center,
                half: [sample(rng, params.wall_length) / 2.0, params.wall_thickness / 2.0],
                yaw: rng.gen_range(0.0..std::f64::consts::PI),
            },
            height: sample(rng, params.wall_height),
        }) {
            regions.push(r);
        }
    }
    for _ in 0..params.trunks {
        if let Some(r) = place(&mut rng, &mut |rng, center| Region {
            semantic: semantic::TRUNK,
            shape: Shape::Disc {
                center,
                radius: sample(rng, params.trunk_radius),
            },
            height: params.trunk_height,
        }) {
            regions.push(r);
        }
    }

    let terrain_phase = [rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)];
    let scene = Scene::from_layout(seed, params.clone(), road, regions, terrain_phase);
    scene.check_coverage()?;
    Ok(scene)
}

impl Scene {
    /// Scene from an explicit layout; no class-coverage check.
    pub fn from_layout(seed: u64, params: SceneParams, road: Spline2, regions: Vec<Region>, terrain_phase: [f64; 2]) -> Self {
        let mut scene = Scene {
            seed,
            raster: Raster {
                origin: -params.half_extent,
                res: params.raster_resolution,
                size: 0,
                semantic: Vec::new(),
                surface: Vec::new(),
            },
            params,
            road,
            regions,
            terrain_phase,
        };
        scene.rasterize();
        scene
    }

    fn check_coverage(&self) -> Result<(), SynthError> {
        let ontology = Ontology::shipped_default();
        let mut present = [false; 4];
        present[CostClass::LowCost as usize] = true; // grass background
        for r in &self.regions {
            if let Some(c) = ontology.cost_of(r.semantic) {
                if (c as usize) < 4 {
                    present[c as usize] = true;
                }
            }
            if ontology.cost_of(r.semantic) == Some(CostClass::Lethal.id()) && r.height < 0.5 {
                return Err(SynthError::Params("lethal objects must be at least 0.5 m tall".into()));
            }
        }
        let missing: Vec<&'static str> = (0..4)
            .filter(|&c| !present[c])
            .map(|c| CostClass::ALL[c].name())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Coverage(missing))
        }
    }

    fn rasterize(&mut self) {
        let e = self.params.half_extent;
        let res = self.params.raster_resolution;
        let size = ((2.0 * e) / res).ceil() as usize;
        let mut sem = vec![semantic::GRASS; size * size];
        let mut obj = vec![0.0f32; size * size];
        let center = |i: usize| -e + (i as f64 + 0.5) * res;
        let to_index = |v: f64| (((v + e) / res).floor().max(0.0) as usize).min(size - 1);
        for region in &self.regions {
            let [x0, y0, x1, y1] = match region.shape.bbox() {
                Some(b) => b,
                None => {
                    // Ribbon: stamp along each polyline segment.
                    let Shape::Ribbon { half_width } = region.shape else { unreachable!() };
                    for (a, b) in self.road.segments() {
                        let (i0, i1) = (to_index(a[0].min(b[0]) - half_width), to_index(a[0].max(b[0]) + half_width));
                        let (j0, j1) = (to_index(a[1].min(b[1]) - half_width), to_index(a[1].max(b[1]) + half_width));
                        for j in j0..=j1 {
                            for i in i0..=i1 {
                                let p = [center(i), center(j)];
                                if super::spline::point_segment_distance(p, a, b) <= half_width {
                                    sem[j * size + i] = region.semantic;
                                    obj[j * size + i] = region.height as f32;
                                }
                            }
                        }
                    }
                    continue;
                }
            };
            for j in to_index(y0)..=to_index(y1) {
                for i in to_index(x0)..=to_index(x1) {
                    let p = [center(i), center(j)];
                    if region.shape.contains(p, &self.road) {
                        sem[j * size + i] = region.semantic;
                        obj[j * size + i] = region.height as f32;
                    }
                }
            }
        }
        let mut surface = obj;
        for j in 0..size {
            for i in 0..size {
                surface[j * size + i] += self.terrain(center(i), center(j)) as f32;
            }
        }
        self.raster = Raster {
            origin: -e,
            res,
            size,
            semantic: sem,
            surface,
        };
    }

    /// Terrain elevation (without objects).
    pub fn terrain(&self, x: f64, y: f64) -> f64 {
        let k = std::f64::consts::TAU / self.params.terrain_wavelength;
        self.params.terrain_amplitude * (k * x + self.terrain_phase[0]).sin() * (k * y + self.terrain_phase[1]).sin()
    }

    /// Exact semantic id at a world point from the region list.
    pub fn semantic_at(&self, x: f64, y: f64) -> u32 {
        self.regions
            .iter()
            .rev()
            .find(|r| {
                r.shape
                    .bbox()
                    .is_none_or(|b| x >= b[0] && x <= b[2] && y >= b[1] && y <= b[3])
                    && r.shape.contains([x, y], &self.road)
            })
            .map_or(semantic::GRASS, |r| r.semantic)
    }

    fn raster_index(&self, x: f64, y: f64) -> Option<usize> {
        let r = &self.raster;
        let i = ((x - r.origin) / r.res).floor();
        let j = ((y - r.origin) / r.res).floor();
        if i < 0.0 || j < 0.0 || i >= r.size as f64 || j >= r.size as f64 {
            return None;
        }
        Some(j as usize * r.size + i as usize)
    }

    /// Height-field surface (terrain plus object) from the raster; `None`
    /// outside the scene.
    pub fn surface_at(&self, x: f64, y: f64) -> Option<f64> {
        self.raster_index(x, y).map(|i| self.raster.surface[i] as f64)
    }

    /// Rasterised semantic id (what the scanner sees).
    pub fn raster_semantic_at(&self, x: f64, y: f64) -> Option<u32> {
        self.raster_index(x, y).map(|i| self.raster.semantic[i])
    }

    /// Fraction of the scene raster carrying each semantic id.
    pub fn raster_fractions(&self) -> std::collections::BTreeMap<u32, f64> {
        let mut out = std::collections::BTreeMap::new();
        let total = self.raster.semantic.len() as f64;
        for &s in &self.raster.semantic {
            *out.entry(s).or_insert(0.0) += 1.0 / total;
        }
        out
    }
}

/// Rasterises the scene's cost classes into a grid centred on `pose`,
/// sampling the exact region list at each cell centre.
pub fn ground_truth_map(scene: &Scene, pose: &Pose, g: &GridSpec) -> TraversabilityMap {
    let ontology = Ontology::shipped_default();
    let m = pose.matrix();
    let mut map = TraversabilityMap::filled(g, CostClass::Unknown);
    for r in 0..g.height {
        for c in 0..g.width {
            let (x, y) = g.cell_center(r, c).expect("in range");
            let wx = m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 3)];
            let wy = m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 3)];
            let cost = ontology
                .cost_of(scene.semantic_at(wx, wy))
                .expect("scene semantics are in the default ontology");
            map.cells[g.flat_index(r, c)] = cost;
        }
    }
    map
}
