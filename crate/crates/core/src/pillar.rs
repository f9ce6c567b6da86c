//! Pillar discretization and the point-wise feature encoder that turns a scan
//! into a dense `C×H×W` pseudo-image.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::PointCloud;
use crate::grid::GridSpec;
use crate::nn::fused;
use crate::nn::{BatchNorm, Linear, Mode, NnError, ParamStore};
use crate::rng;

/// Width of an augmented point: position, reflectance, offset to the pillar
/// mean and offset to the cell centre.
pub const POINT_FEATURES: usize = 9;

#[derive(Debug, Error)]
pub enum PillarError {
    #[error("P and N must be at least 1 (got {0}, {1})")]
    Capacity(usize, usize),
    #[error("duplicate pillar at cell ({0}, {1})")]
    DuplicateCell(u32, u32),
    #[error("pillar at ({0}, {1}) lies outside the grid")]
    OutOfGrid(u32, u32),
    #[error("non-finite encoder parameter {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<candle_core::Error> for PillarError {
    fn from(e: candle_core::Error) -> Self {
        PillarError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, PillarError>;

/// Fixed-size pillar tensor of one scan. Padding entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarBatch {
    pub max_pillars: usize,
    pub max_points: usize,
    /// `P × N × 9`, row-major.
    pub points: Vec<f32>,
    /// `P × N`.
    pub point_mask: Vec<bool>,
    /// `(row, col)` per pillar; `(0, 0)` for padding.
    pub coords: Vec<[u32; 2]>,
    pub pillar_mask: Vec<bool>,
}

impl PillarBatch {
    pub fn num_pillars(&self) -> usize {
        self.pillar_mask.iter().filter(|&&m| m).count()
    }

    pub fn point(&self, p: usize, n: usize) -> &[f32] {
        let o = (p * self.max_points + n) * POINT_FEATURES;
        &self.points[o..o + POINT_FEATURES]
    }

    /// Points `(P·N, 9)` and their mask `(P·N, 1)`.
    pub fn tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let rows = self.max_pillars * self.max_points;
        let pts = Tensor::from_slice(&self.points, (rows, POINT_FEATURES), &Device::Cpu)?.to_dtype(dtype)?;
        let mask: Vec<f32> = self.point_mask.iter().map(|&m| m as u8 as f32).collect();
        let mask = Tensor::from_vec(mask, (rows, 1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok((pts, mask))
    }
}

/// Groups the points inside the grid box into pillars of at most `max_points`
/// points, keeping at most `max_pillars` pillars. Overflow is resolved by
/// uniform sampling seeded from `seed`; kept pillars are ordered by cell.
pub fn pillarize(cloud: &PointCloud, g: &GridSpec, max_pillars: usize, max_points: usize, seed: u64) -> Result<PillarBatch> {
    if max_pillars == 0 || max_points == 0 {
        return Err(PillarError::Capacity(max_pillars, max_points));
    }
    let mut cells: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if !g.contains_z(z) {
            continue;
        }
        if let Some((r, c)) = g.metric_to_cell(x, y) {
            cells.entry(g.flat_index(r, c)).or_default().push(i);
        }
    }
    let mut chosen: Vec<(usize, Vec<usize>)> = cells.into_iter().collect();
    if chosen.len() > max_pillars {
        let mut r = rng::rng(seed, 0);
        let mut keep = index::sample(&mut r, chosen.len(), max_pillars).into_vec();
        keep.sort_unstable();
        let mut all: Vec<Option<(usize, Vec<usize>)>> = chosen.into_iter().map(Some).collect();
        chosen = keep.into_iter().map(|k| all[k].take().expect("distinct")).collect();
    }

    let mut batch = PillarBatch {
        max_pillars,
        max_points,
        points: vec![0.0; max_pillars * max_points * POINT_FEATURES],
        point_mask: vec![false; max_pillars * max_points],
        coords: vec![[0, 0]; max_pillars],
        pillar_mask: vec![false; max_pillars],
    };
    for (slot, (cell, mut members)) in chosen.into_iter().enumerate() {
        if members.len() > max_points {
            let mut r = rng::rng(seed, 1 + cell as u64);
            let mut keep = index::sample(&mut r, members.len(), max_points).into_vec();
            keep.sort_unstable();
            members = keep.into_iter().map(|k| members[k]).collect();
        }
        let (row, col) = (cell / g.width, cell % g.width);
        let (cx, cy) = g.cell_center(row, col).expect("binned cell");
        let n = members.len() as f64;
        let mut mean = [0.0f64; 3];
        for &i in &members {
            for d in 0..3 {
                mean[d] += cloud.points[i][d] as f64 / n;
            }
        }
        for (k, &i) in members.iter().enumerate() {
            let p = cloud.points[i];
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let aug = [
                x,
                y,
                z,
                p[3] as f64,
                x - mean[0],
                y - mean[1],
                z - mean[2],
                x - cx,
                y - cy,
            ];
            let o = (slot * max_points + k) * POINT_FEATURES;
            for (d, v) in aug.iter().enumerate() {
                batch.points[o + d] = *v as f32;
            }
            batch.point_mask[slot * max_points + k] = true;
        }
        batch.coords[slot] = [row as u32, col as u32];
        batch.pillar_mask[slot] = true;
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PillarEncoderConfig {
    pub channels: usize,
    /// Batch normalization between the linear layer and the rectifier.
    pub normalize: bool,
}

impl Default for PillarEncoderConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            normalize: true,
        }
    }
}

/// Linear, batch norm and ReLU per point, then a max over each pillar.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub channels: usize,
}

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PillarEncoderConfig) -> Result<Self> {
        let linear = Linear::new(store, &format!("{name}.linear"), POINT_FEATURES, cfg.channels, true)?;
        let norm = if cfg.normalize {
            Some(BatchNorm::new(store, &format!("{name}.norm"), cfg.channels)?)
        } else {
            None
        };
        Ok(Self {
            linear,
            norm,
            channels: cfg.channels,
        })
    }

    fn check_finite(&self) -> Result<()> {
        let mut named = vec![("linear.weight", self.linear.weight.as_tensor())];
        if let Some(b) = &self.linear.bias {
            named.push(("linear.bias", b.as_tensor()));
        }
        if let Some(n) = &self.norm {
            named.extend([
                ("norm.gamma", n.gamma.as_tensor()),
                ("norm.beta", n.beta.as_tensor()),
                ("norm.running_mean", n.running_mean.as_tensor()),
                ("norm.running_var", n.running_var.as_tensor()),
            ]);
        }
        for (name, t) in named {
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PillarError::NonFinite(name.to_string()));
            }
        }
        Ok(())
    }

    /// Pillar features `(P, C)` from points `(P·N, 9)` and mask `(P·N, 1)`.
    /// Padded points never win the max; pillars without points are zero.
    pub fn forward(&self, points: &Tensor, mask: &Tensor, max_points: usize, mode: Mode) -> Result<Tensor> {
        self.check_finite()?;
        let (rows, d) = points.dims2()?;
        if d != POINT_FEATURES || rows % max_points != 0 || mask.dims() != [rows, 1] {
            return Err(PillarError::Shape(format!(
                "points {:?} mask {:?} N={max_points}",
                points.dims(),
                mask.dims()
            )));
        }
        let pillars = rows / max_points;
        let flags: Vec<f64> = mask.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let valid: Vec<u32> = (0..rows as u32).filter(|&i| flags[i as usize] != 0.0).collect();
        if valid.is_empty() {
            return Ok(Tensor::zeros((pillars, self.channels), points.dtype(), points.device())?);
        }
        let rows_idx = Tensor::from_slice(&valid, valid.len(), points.device())?;
        let y = self.point_features(&points.index_select(&rows_idx, 0)?, mode)?;
        let owner: Vec<usize> = valid.iter().map(|&r| r as usize / max_points).collect();
        let winner = self.winners(&y, &owner, pillars)?;
        Ok(fused::gather(&y, winner, &[pillars, self.channels])?)
    }

    /// Features `(M, C)` of real points only. Padding could never win the
    /// max and is excluded from the normalization statistics, so dropping it
    /// up front changes nothing.
    fn point_features(&self, points: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = self.linear.forward(points)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(&y, mode)?;
        }
        Ok(y.relu()?)
    }

    /// Max-pooling as a gather: for every (pillar slot, channel) the flat
    /// index into `y` of the winning entry, or `y.elem_count()` (reads zero)
    /// for empty slots. The gradient reaches exactly one point per pillar
    /// and channel; ties go to the earliest point.
    fn winners(&self, y: &Tensor, owner: &[usize], slots: usize) -> Result<Vec<u32>> {
        let c = self.channels;
        let values: Vec<f64> = y.detach().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let zero = (owner.len() * c) as u32;
        let mut winner = vec![zero; slots * c];
        for (k, &p) in owner.iter().enumerate() {
            for ch in 0..c {
                let slot = &mut winner[p * c + ch];
                if *slot == zero || values[k * c + ch] > values[*slot as usize] {
                    *slot = (k * c + ch) as u32;
                }
            }
        }
        Ok(winner)
    }

    pub fn encode(&self, batch: &PillarBatch, dtype: DType, mode: Mode) -> Result<Tensor> {
        let (pts, mask) = batch.tensors(dtype)?;
        self.forward(&pts, &mask, batch.max_points, mode)
    }
}

fn check_coords(coords: &[[u32; 2]], mask: &[bool], g: &GridSpec) -> Result<Vec<Option<usize>>> {
    let mut seen = vec![false; g.num_cells()];
    coords
        .iter()
        .zip(mask)
        .map(|(&[r, c], &m)| {
            if !m {
                return Ok(None);
            }
            if r as usize >= g.height || c as usize >= g.width {
                return Err(PillarError::OutOfGrid(r, c));
            }
            let cell = g.flat_index(r as usize, c as usize);
            if std::mem::replace(&mut seen[cell], true) {
                return Err(PillarError::DuplicateCell(r, c));
            }
            Ok(Some(cell))
        })
        .collect()
}

/// Places each valid pillar's feature vector at its cell of a zero
/// `(C, H, W)` map.
pub fn scatter(features: &Tensor, coords: &[[u32; 2]], mask: &[bool], g: &GridSpec) -> Result<Tensor> {
    let (p, c) = features.dims2()?;
    if coords.len() != p || mask.len() != p {
        return Err(PillarError::Shape(format!("{p} features, {} coords, {} mask", coords.len(), mask.len())));
    }
    let cells = check_coords(coords, mask, g)?;
    // Every cell reads row `p` (a zero row) unless a pillar claims it.
    let mut source = vec![p as u32; g.num_cells()];
    for (i, cell) in cells.iter().enumerate() {
        if let Some(cell) = cell {
            source[*cell] = i as u32;
        }
    }
    let table = Tensor::cat(&[features, &Tensor::zeros((1, c), features.dtype(), features.device())?], 0)?;
    let idx = Tensor::from_vec(source, g.num_cells(), features.device())?;
    Ok(table
        .index_select(&idx, 0)?
        .t()?
        .reshape((c, g.height, g.width))?)
}

/// Reads back the `(P, C)` features at the pillar cells; padding rows are zero.
pub fn gather(map: &Tensor, coords: &[[u32; 2]], mask: &[bool], g: &GridSpec) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if (h, w) != (g.height, g.width) {
        return Err(PillarError::Shape(format!("map {h}x{w} vs grid {}x{}", g.height, g.width)));
    }
    let cells = check_coords(coords, mask, g)?;
    let flat = map.reshape((c, h * w))?.t()?;
    let flat = Tensor::cat(&[&flat, &Tensor::zeros((1, c), map.dtype(), map.device())?], 0)?;
    let idx: Vec<u32> = cells.iter().map(|cell| cell.unwrap_or(h * w) as u32).collect();
    let idx = Tensor::from_vec(idx, coords.len(), map.device())?;
    Ok(flat.index_select(&idx, 0)?)
}

/// Pseudo-images `(B, C, H, W)` for several scans sharing one batch-norm
/// pass over all their pillars.
pub fn pseudo_images(
    encoder: &PillarEncoder,
    batches: &[PillarBatch],
    g: &GridSpec,
    dtype: DType,
    mode: Mode,
) -> Result<Tensor> {
    let Some(first) = batches.first() else {
        return Err(PillarError::Shape("empty batch list".into()));
    };
    let n = first.max_points;
    if batches.iter().any(|b| b.max_points != n) {
        return Err(PillarError::Shape("batches disagree on N".into()));
    }
    encoder.check_finite()?;
    let c = encoder.channels;
    let cells = g.num_cells();
    // Gather real points of every scan into one matrix so all scans share
    // the normalization statistics; remember which pillar slot owns each.
    let mut pts = Vec::new();
    let mut owner = Vec::new();
    let mut cell_slot = vec![None; batches.len() * cells];
    let mut base = 0;
    for (b, batch) in batches.iter().enumerate() {
        for (p, cell) in check_coords(&batch.coords, &batch.pillar_mask, g)?.into_iter().enumerate() {
            if let Some(cell) = cell {
                cell_slot[b * cells + cell] = Some(base + p);
            }
        }
        for (i, &keep) in batch.point_mask.iter().enumerate() {
            if keep {
                pts.extend_from_slice(&batch.points[i * POINT_FEATURES..(i + 1) * POINT_FEATURES]);
                owner.push(base + i / n);
            }
        }
        base += batch.max_pillars;
    }
    if owner.is_empty() {
        return Ok(Tensor::zeros((batches.len(), c, g.height, g.width), dtype, &Device::Cpu)?);
    }
    let pts = Tensor::from_vec(pts, (owner.len(), POINT_FEATURES), &Device::Cpu)?.to_dtype(dtype)?;
    let y = encoder.point_features(&pts, mode)?;
    let winner = encoder.winners(&y, &owner, base)?;
    let zero = (owner.len() * c) as u32;
    let mut idx = Vec::with_capacity(batches.len() * c * cells);
    for b in 0..batches.len() {
        let slots = &cell_slot[b * cells..(b + 1) * cells];
        for ch in 0..c {
            idx.extend(slots.iter().map(|s| s.map_or(zero, |p| winner[p * c + ch])));
        }
    }
    Ok(fused::gather(&y, idx, &[batches.len(), c, g.height, g.width])?)
}
