//! Grid and region arithmetic over images.
//!
//! An image of `width × height` pixels is partitioned into `grid_size × grid_size` cells.
//! When a side is not divisible by the grid size the remainder pixels go to the trailing
//! cells of that axis, so cell widths differ by at most one pixel. Bounding boxes are
//! half-open: `(x0, y0, x1, y1)` covers `x0 ≤ x < x1`, `y0 ≤ y < y1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    pub fn to_array(self) -> [u32; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// A cell address `(row, col)` on the analysis grid.
pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Grid divisions per side.
    pub grid_size: usize,
    /// Side length of a selectable region, in cells.
    pub region_size: usize,
    pub width: u32,
    pub height: u32,
}

impl GridSpec {
    pub fn new(grid_size: usize, region_size: usize, width: u32, height: u32) -> Result<Self> {
        if grid_size == 0 || region_size == 0 {
            return Err(Error::Geometry("grid and region sizes must be at least 1".into()));
        }
        if region_size > grid_size {
            return Err(Error::Geometry(format!("region size {region_size} exceeds grid size {grid_size}")));
        }
        if (width as usize) < grid_size || (height as usize) < grid_size {
            return Err(Error::Geometry(format!(
                "image {width}x{height} too small for a {grid_size}x{grid_size} grid"
            )));
        }
        Ok(Self { grid_size, region_size, width, height })
    }

    pub fn cell_count(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn cell_index(&self, (row, col): Cell) -> usize {
        row * self.grid_size + col
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        (index / self.grid_size, index % self.grid_size)
    }

    fn check_cell(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.grid_size || col >= self.grid_size {
            return Err(Error::Index(format!("cell ({row}, {col}) outside {0}x{0} grid", self.grid_size)));
        }
        Ok(())
    }

    /// Pixel bounding box of one grid cell.
    pub fn cell_bbox(&self, row: usize, col: usize) -> Result<BBox> {
        self.check_cell(row, col)?;
        let (x0, x1) = axis_span(self.width, self.grid_size, col, 1);
        let (y0, y1) = axis_span(self.height, self.grid_size, row, 1);
        Ok(BBox { x0, y0, x1, y1 })
    }

    /// Region of `region_size` cells anchored at `(row, col)`, shifted up/left when it
    /// would run past the grid edge.
    pub fn region_from_cell(&self, row: usize, col: usize) -> Result<Region> {
        self.check_cell(row, col)?;
        let limit = self.grid_size - self.region_size;
        Region::new(self, row.min(limit), col.min(limit), self.region_size)
    }
}

/// Pixel range covered by `count` consecutive cells starting at `start` along one axis.
fn axis_span(side: u32, divisions: usize, start: usize, count: usize) -> (u32, u32) {
    let divisions = divisions as u32;
    let base = side / divisions;
    let wide_from = divisions - side % divisions;
    let offset = |i: u32| i * base + i.saturating_sub(wide_from);
    let start = start as u32;
    (offset(start), offset(start + count as u32))
}

/// A square group of grid cells, the unit of visual evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub span: usize,
    pub bbox: BBox,
}

impl Region {
    pub fn new(spec: &GridSpec, row: usize, col: usize, span: usize) -> Result<Self> {
        if span == 0 || row + span > spec.grid_size || col + span > spec.grid_size {
            return Err(Error::Geometry(format!(
                "region ({row}, {col}) span {span} exceeds {0}x{0} grid",
                spec.grid_size
            )));
        }
        let (x0, x1) = axis_span(spec.width, spec.grid_size, col, span);
        let (y0, y1) = axis_span(spec.height, spec.grid_size, row, span);
        Ok(Self { row, col, span, bbox: BBox { x0, y0, x1, y1 } })
    }

    pub fn anchor(&self) -> Cell {
        (self.row, self.col)
    }

    /// Identity of the region ignoring its pixel box.
    pub fn key(&self) -> (usize, usize, usize) {
        (self.row, self.col, self.span)
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (self.row..self.row + self.span).flat_map(move |r| (self.col..self.col + self.span).map(move |c| (r, c)))
    }

    pub fn covers(&self, (row, col): Cell) -> bool {
        (self.row..self.row + self.span).contains(&row) && (self.col..self.col + self.span).contains(&col)
    }

    /// Checks that the region fits `spec` and its box is the union of its cells.
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        let expected = Region::new(spec, self.row, self.col, self.span)?;
        if expected.bbox != self.bbox {
            return Err(Error::Geometry(format!(
                "region bbox {:?} does not match grid cells {:?}",
                self.bbox, expected.bbox
            )));
        }
        Ok(())
    }
}

/// Boolean cell mask; `true` marks a masked cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    grid_size: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    pub fn empty(spec: &GridSpec) -> Self {
        Self { grid_size: spec.grid_size, cells: vec![false; spec.cell_count()] }
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn is_masked(&self, (row, col): Cell) -> bool {
        self.cells[row * self.grid_size + col]
    }

    pub fn masked_cells(&self) -> Vec<Cell> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i / self.grid_size, i % self.grid_size))
            .collect()
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Union of this mask with the cells of every region. Never clears a cell.
    pub fn apply(&self, regions: &[Region]) -> Result<RegionMask> {
        let mut out = self.clone();
        for region in regions {
            if region.row + region.span > self.grid_size || region.col + region.span > self.grid_size {
                return Err(Error::Geometry(format!(
                    "region {:?} does not belong to a {1}x{1} grid",
                    region.key(),
                    self.grid_size
                )));
            }
            for (r, c) in region.cells() {
                out.cells[r * self.grid_size + c] = true;
            }
        }
        Ok(out)
    }
}

/// Functional form of [`RegionMask::apply`].
pub fn apply_mask(mask: &RegionMask, regions: &[Region]) -> Result<RegionMask> {
    mask.apply(regions)
}
