//! Lidar point cloud to bird's-eye-view count grid.
//!
//! Ego frame: x forward, y right, z up (meters). The grid spans 28 m ahead,
//! 4 m behind and 16 m to each side at 0.125 m per cell, giving 256×256
//! cells. Row 0 is the far-front edge, column 0 the far-left edge:
//!
//! ```text
//! row = floor((28 − x) / 0.125)     col = floor((y + 16) / 0.125)
//! ```
//!
//! A point is counted iff both indices land in `0..256`, so every point maps
//! to exactly one cell or is dropped.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const GRID_SIZE: usize = 256;
pub const METERS_PER_CELL: f64 = 0.125;
pub const EXTENT_FRONT: f64 = 28.0;
pub const EXTENT_REAR: f64 = 4.0;
pub const EXTENT_SIDE: f64 = 16.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Result<Self> {
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Precondition("point cloud has non-finite coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Little-endian `u32` count followed by `count × (f32, f32, f32)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.points.len() as u32).to_le_bytes())?;
        for p in &self.points {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let n = u32::from_le_bytes(b4) as usize;
        let mut raw = vec![0u8; n * 12];
        r.read_exact(&mut raw).map_err(|e| Error::Format {
            what: "point cloud",
            detail: format!("expected {n} points: {e}"),
        })?;
        let points = raw
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
                [f(0), f(4), f(8)]
            })
            .collect();
        Self::new(points)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RasterConfig {
    /// Keep only points with `lo <= z < hi` when set.
    pub z_clip: Option<(f64, f64)>,
    /// Apply `ln(1 + count)` in [`BevGrid::to_tensor`].
    pub log1p: bool,
}

/// 256×256 point counts plus the number of points that fell outside.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BevGrid {
    cells: Vec<u32>,
    dropped: usize,
}

impl Default for BevGrid {
    fn default() -> Self {
        Self {
            cells: vec![0; GRID_SIZE * GRID_SIZE],
            dropped: 0,
        }
    }
}

/// Cell index for a point, or `None` when it lies outside the grid.
pub fn cell_of(x: f64, y: f64) -> Option<(usize, usize)> {
    let row = ((EXTENT_FRONT - x) / METERS_PER_CELL).floor();
    let col = ((y + EXTENT_SIDE) / METERS_PER_CELL).floor();
    let n = GRID_SIZE as f64;
    if (0.0..n).contains(&row) && (0.0..n).contains(&col) {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

pub fn rasterize(cloud: &PointCloud) -> BevGrid {
    rasterize_with(cloud, &RasterConfig::default())
}

pub fn rasterize_with(cloud: &PointCloud, cfg: &RasterConfig) -> BevGrid {
    let mut grid = BevGrid::default();
    for p in &cloud.points {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        if let Some((lo, hi)) = cfg.z_clip {
            if !(lo..hi).contains(&z) {
                grid.dropped += 1;
                continue;
            }
        }
        match cell_of(x, y) {
            Some((r, c)) => grid.cells[r * GRID_SIZE + c] += 1,
            None => grid.dropped += 1,
        }
    }
    grid
}

/// Rasterizes many clouds, in parallel when the `parallel` feature is on.
pub fn rasterize_batch(clouds: &[PointCloud], cfg: &RasterConfig) -> Vec<BevGrid> {
    par::map(clouds, |c| rasterize_with(c, cfg))
}

pub fn rasterize_batch_seq(clouds: &[PointCloud], cfg: &RasterConfig) -> Vec<BevGrid> {
    par::map_seq(clouds, |c| rasterize_with(c, cfg))
}

impl BevGrid {
    pub fn from_cells(cells: Vec<u32>) -> Result<Self> {
        if cells.len() != GRID_SIZE * GRID_SIZE {
            return Err(Error::Format {
                what: "bev grid",
                detail: format!("expected {} cells, got {}", GRID_SIZE * GRID_SIZE, cells.len()),
            });
        }
        Ok(Self { cells, dropped: 0 })
    }

    pub fn cells(&self) -> &[u32] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * GRID_SIZE + col]
    }

    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().map(|&c| c as u64).sum()
    }

    pub fn to_tensor(&self, log1p: bool) -> Tensor {
        let data = self
            .cells
            .iter()
            .map(|&c| if log1p { (c as f64).ln_1p() } else { c as f64 })
            .collect();
        Tensor::from_parts(vec![1, GRID_SIZE, GRID_SIZE], data)
    }

    /// Raw little-endian `u32` cells, row-major.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.cells.len() * 4);
        for c in &self.cells {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut raw = vec![0u8; GRID_SIZE * GRID_SIZE * 4];
        r.read_exact(&mut raw).map_err(|e| Error::Format {
            what: "bev grid",
            detail: e.to_string(),
        })?;
        let cells = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_cells(cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_cloud_gives_zero_grid() {
        let g = rasterize(&PointCloud::default());
        assert_eq!(g.cells().len(), 256 * 256);
        assert_eq!(g.total(), 0);
        assert_eq!(g.to_tensor(false).sum(), 0.0);
    }

    #[test]
    fn single_point_golden_cell() {
        let g = rasterize(&PointCloud::new(vec![[0.0, 0.0, 1.0]]).unwrap());
        assert_eq!(g.get(224, 128), 1);
        assert_eq!(g.total(), 1);
    }

    #[test]
    fn grid_covers_32_by_32_meters() {
        assert_eq!(GRID_SIZE as f64 * METERS_PER_CELL, EXTENT_FRONT + EXTENT_REAR);
        assert_eq!(GRID_SIZE as f64 * METERS_PER_CELL, 2.0 * EXTENT_SIDE);
        assert_eq!(cell_of(27.99, -16.0), Some((0, 0)));
        assert_eq!(cell_of(-3.99, 15.99), Some((255, 255)));
        assert_eq!(cell_of(0.0, 16.0), None);
        assert_eq!(cell_of(28.5, 0.0), None);
        assert_eq!(cell_of(-4.5, 0.0), None);
    }

    #[test]
    fn log1p_tensor() {
        let g = rasterize(&PointCloud::new(vec![[1.0, 1.0, 0.0]]).unwrap());
        let t = g.to_tensor(true);
        assert!((t.sum() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn z_clip_drops_points() {
        let cloud = PointCloud::new(vec![[1.0, 1.0, 0.05], [1.0, 1.0, 1.0]]).unwrap();
        let g = rasterize_with(
            &cloud,
            &RasterConfig {
                z_clip: Some((0.2, 3.0)),
                log1p: false,
            },
        );
        assert_eq!((g.total(), g.dropped()), (1, 1));
    }

    #[test]
    fn cloud_file_roundtrip() {
        let cloud = PointCloud::new(vec![[1.5, -2.25, 0.5], [30.0, 0.0, 0.0]]).unwrap();
        let mut buf = Vec::new();
        cloud.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 24);
        assert_eq!(PointCloud::read_from(&mut buf.as_slice()).unwrap(), cloud);
        assert!(PointCloud::read_from(&mut &buf[..10]).is_err());
    }

    fn cloud_strategy() -> impl Strategy<Value = Vec<[f32; 3]>> {
        prop::collection::vec(
            (-40.0f32..40.0, -25.0f32..25.0, -2.0f32..4.0).prop_map(|(x, y, z)| [x, y, z]),
            0..400,
        )
    }

    proptest! {
        #[test]
        fn conservation(points in cloud_strategy()) {
            let n = points.len();
            let g = rasterize(&PointCloud::new(points).unwrap());
            prop_assert_eq!(g.total() as usize + g.dropped(), n);
        }

        #[test]
        fn order_independent(points in cloud_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = points.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(
                rasterize(&PointCloud::new(points).unwrap()),
                rasterize(&PointCloud::new(shuffled).unwrap())
            );
        }

        #[test]
        fn one_cell_shift_in_y(x in -3.9f32..27.9, y in -15.8f32..15.8) {
            let a = cell_of(x as f64, y as f64);
            let b = cell_of(x as f64, y as f64 + METERS_PER_CELL);
            if let (Some((ra, ca)), Some((rb, cb))) = (a, b) {
                prop_assert_eq!(ra, rb);
                prop_assert_eq!(ca + 1, cb);
            }
        }
    }
}
