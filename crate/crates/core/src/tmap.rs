//! Traversability classes and the on-disk map format.
//!
//! Map file layout (little-endian):
//!
//! | bytes  | field                         |
//! |--------|-------------------------------|
//! | 0..4   | magic `TMAP`                  |
//! | 4..8   | format version (u32, = 1)     |
//! | 8..12  | height in cells (u32)         |
//! | 12..16 | width in cells (u32)          |
//! | 16..24 | cell size in metres (f64)     |
//! | 24..32 | x of the grid origin (f64)    |
//! | 32..40 | y of the grid origin (f64)    |
//! | 40..   | `height * width` class ids, row-major u8 |

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::grid::GridSpec;

/// Number of classes the network predicts (four costs plus unknown).
pub const NUM_CLASSES: usize = 5;
/// Number of classes scored during evaluation.
pub const NUM_EVAL_CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum CostClass {
    Free = 0,
    LowCost = 1,
    MediumCost = 2,
    Lethal = 3,
    Unknown = 4,
}

impl CostClass {
    pub const ALL: [CostClass; NUM_CLASSES] = [
        CostClass::Free,
        CostClass::LowCost,
        CostClass::MediumCost,
        CostClass::Lethal,
        CostClass::Unknown,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            CostClass::Free => "free",
            CostClass::LowCost => "low-cost",
            CostClass::MediumCost => "medium-cost",
            CostClass::Lethal => "lethal",
            CostClass::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad map file: {0}")]
    Format(String),
    #[error("class id {id} at cell {index} is outside 0..=4")]
    BadClass { index: usize, id: u8 },
    #[error("map shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

const MAGIC: &[u8; 4] = b"TMAP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 40;

/// H×W grid of class ids with its metric placement.
#[derive(Debug, Clone, PartialEq)]
pub struct TraversabilityMap {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub origin: (f64, f64),
    pub cells: Vec<u8>,
}

impl TraversabilityMap {
    pub fn filled(grid: &GridSpec, class: CostClass) -> Self {
        Self {
            height: grid.height,
            width: grid.width,
            cell_size: grid.cell_size,
            origin: (grid.x_min, grid.y_min),
            cells: vec![class.id(); grid.num_cells()],
        }
    }

    pub fn from_cells(grid: &GridSpec, cells: Vec<u8>) -> Result<Self, MapError> {
        if cells.len() != grid.num_cells() {
            return Err(MapError::Format(format!(
                "{} cells for a {}x{} grid",
                cells.len(),
                grid.height,
                grid.width
            )));
        }
        let map = Self {
            height: grid.height,
            width: grid.width,
            cell_size: grid.cell_size,
            origin: (grid.x_min, grid.y_min),
            cells,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if let Some((index, &id)) = self
            .cells
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= NUM_CLASSES)
        {
            return Err(MapError::BadClass { index, id });
        }
        Ok(())
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: CostClass) {
        self.cells[row * self.width + col] = class.id();
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Cell count per class id.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0; NUM_CLASSES];
        for &c in &self.cells {
            h[c as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.cells.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.cell_size.to_le_bytes());
        out.extend_from_slice(&self.origin.0.to_le_bytes());
        out.extend_from_slice(&self.origin.1.to_le_bytes());
        out.extend_from_slice(&self.cells);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MapError> {
        if bytes.len() < HEADER_LEN {
            return Err(MapError::Format(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(MapError::Format("missing TMAP magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(MapError::Format(format!("unsupported version {version}")));
        }
        let height = u32_at(8) as usize;
        let width = u32_at(12) as usize;
        let expected = HEADER_LEN + height * width;
        if bytes.len() != expected {
            return Err(MapError::Format(format!(
                "expected {expected} bytes for {height}x{width}, found {}",
                bytes.len()
            )));
        }
        let map = Self {
            height,
            width,
            cell_size: f64_at(16),
            origin: (f64_at(24), f64_at(32)),
            cells: bytes[HEADER_LEN..].to_vec(),
        };
        map.validate()?;
        Ok(map)
    }

    /// Writes through a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), MapError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MapError> {
        let bytes = fs::read(path).map_err(|source| MapError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
