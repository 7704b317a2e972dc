use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of the implicit region covering every pixel.
pub const FULL_REGION: &str = "full";

/// Region geometry in normalised image coordinates (`0..1` on both axes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum RegionShape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
    /// Every pixel not claimed by an earlier region.
    Remainder,
}

impl RegionShape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            RegionShape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            RegionShape::Ellipse { cx, cy, rx, ry } => {
                let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
                dx * dx + dy * dy <= 1.0
            }
            RegionShape::Remainder => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    #[serde(flatten)]
    pub shape: RegionShape,
}

/// Static scene geometry. A pixel belongs to the first region (in order)
/// whose shape contains its centre, so regions never overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub regions: Vec<Region>,
}

fn rect(name: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
    // coordinates given in 1/32 units so the 32x32 raster is exact
    Region {
        name: name.into(),
        shape: RegionShape::Rect {
            x0: x0 / 32.0,
            y0: y0 / 32.0,
            x1: x1 / 32.0,
            y1: y1 / 32.0,
        },
    }
}

impl Default for RegionLayout {
    fn default() -> Self {
        RegionLayout {
            regions: vec![
                rect("hairband", 4.0, 2.0, 28.0, 6.0),
                rect("left-eye", 7.0, 10.0, 13.0, 14.0),
                rect("right-eye", 19.0, 10.0, 25.0, 14.0),
                rect("mouth", 11.0, 21.0, 21.0, 26.0),
                Region {
                    name: "background".into(),
                    shape: RegionShape::Remainder,
                },
            ],
        }
    }
}

impl RegionLayout {
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            if r.name == FULL_REGION {
                return Err(Error::Config(format!("region name `{FULL_REGION}` is reserved")));
            }
            if self.regions[..i].iter().any(|o| o.name == r.name) {
                return Err(Error::Config(format!("duplicate region `{}`", r.name)));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.regions.iter().map(|r| r.name.as_str())
    }

    /// Index of the owning region for every pixel (None when unclaimed).
    fn owners(&self, resolution: usize) -> Vec<Option<usize>> {
        let n = resolution as f64;
        (0..resolution * resolution)
            .map(|p| {
                let (y, x) = (p / resolution, p % resolution);
                let (cx, cy) = ((x as f64 + 0.5) / n, (y as f64 + 0.5) / n);
                self.regions.iter().position(|r| r.shape.contains(cx, cy))
            })
            .collect()
    }
}

/// Boolean pixel mask for one region at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    pub name: String,
    pub resolution: usize,
    cells: Arc<Vec<bool>>,
    pixel_count: usize,
}

impl RegionMask {
    pub fn from_cells(name: &str, resolution: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != resolution * resolution {
            return Err(Error::ShapeMismatch {
                op: "region_mask",
                detail: format!("{} cells for resolution {resolution}", cells.len()),
            });
        }
        let pixel_count = cells.iter().filter(|c| **c).count();
        Ok(RegionMask {
            name: name.to_string(),
            resolution,
            cells: Arc::new(cells),
            pixel_count,
        })
    }

    /// Mask containing only pixel `(row, col)`.
    pub fn single_pixel(resolution: usize, row: usize, col: usize) -> Result<Self> {
        if row >= resolution || col >= resolution {
            return Err(Error::InvalidArgument(format!("pixel ({row}, {col}) outside {resolution}x{resolution}")));
        }
        let mut cells = vec![false; resolution * resolution];
        cells[row * resolution + col] = true;
        Self::from_cells(&format!("pixel-{row}-{col}"), resolution, cells)
    }

    pub fn pixel_count(&self) -> usize {
        self.pixel_count
    }

    pub fn cells(&self) -> &Arc<Vec<bool>> {
        &self.cells
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.resolution + col]
    }

    pub fn ensure_non_empty(&self) -> Result<()> {
        if self.pixel_count == 0 {
            Err(Error::EmptyMask(self.name.clone()))
        } else {
            Ok(())
        }
    }
}

/// Rasterises one named region (or [`FULL_REGION`]).
pub fn region_mask(layout: &RegionLayout, region: &str, resolution: usize) -> Result<RegionMask> {
    if region == FULL_REGION {
        return RegionMask::from_cells(FULL_REGION, resolution, vec![true; resolution * resolution]);
    }
    let index = layout
        .regions
        .iter()
        .position(|r| r.name == region)
        .ok_or_else(|| Error::UnknownRegion(region.to_string()))?;
    let cells = layout
        .owners(resolution)
        .into_iter()
        .map(|o| o == Some(index))
        .collect();
    RegionMask::from_cells(region, resolution, cells)
}
