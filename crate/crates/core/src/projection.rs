//! Spherical range-image projection and bird's-eye-view pillar grids.
//!
//! The spherical projection maps a point `(x, y, z)` with range `r` to pixel
//!
//! ```text
//! u = floor( 0.5 * (1 - atan2(y, x)/pi) * W )            clamped to [0, W)
//! v = floor( (1 - (asin(z/r) + fov_down)/fov) * H )      clamped to [0, H)
//! ```
//!
//! with `fov = fov_up + fov_down`, both angles positive. The top of the
//! field of view lands on row 0. When several points share a pixel the one
//! with the smallest range wins (ties keep the lowest point index), which
//! makes the scatter deterministic regardless of internal parallelism.

use crate::pointcloud::PointCloud;
use crate::{Error, Result};

/// Geometry of the spherical projection.
#[derive(Debug, Clone, Copy)]
pub struct SphericalConfig {
    pub width: usize,
    pub height: usize,
    /// Field of view above the horizon, radians, positive.
    pub fov_up: f64,
    /// Field of view below the horizon, radians, positive magnitude.
    pub fov_down: f64,
}

impl SphericalConfig {
    pub fn new(width: usize, height: usize, fov_up_deg: f64, fov_down_deg: f64) -> Result<Self> {
        let cfg = Self {
            width,
            height,
            fov_up: fov_up_deg.to_radians(),
            fov_down: fov_down_deg.to_radians(),
        };
        if width == 0 || height == 0 {
            return Err(Error::contract("spherical config: width and height must be > 0"));
        }
        if cfg.fov() <= 0.0 {
            return Err(Error::contract("spherical config: total fov must be > 0"));
        }
        Ok(cfg)
    }

    /// Total vertical field of view.
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }
}

impl Default for SphericalConfig {
    /// 64 x 2048 image with the HDL-64E vertical field of view
    /// (+3 deg / -25 deg).
    fn default() -> Self {
        Self::new(2048, 64, 3.0, 25.0).expect("valid default")
    }
}

/// Integer pixel coordinates per point. `in_bounds` is false only for
/// points whose elevation is undefined (range 0).
#[derive(Debug, Clone)]
pub struct PointPixelMap {
    pub u: Vec<usize>,
    pub v: Vec<usize>,
    pub in_bounds: Vec<bool>,
}

impl PointPixelMap {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Flat pixel index `v * W + u`, or `None` when out of bounds.
    pub fn pixel(&self, point: usize, width: usize) -> Option<usize> {
        self.in_bounds[point].then(|| self.v[point] * width + self.u[point])
    }
}

/// Multi-channel image produced by the spherical projection, along with the
/// winner bookkeeping needed to lift pixel data back to points.
#[derive(Debug, Clone)]
pub struct RangeImage {
    pub width: usize,
    pub height: usize,
    pub num_channels: usize,
    /// `[C, H, W]` row-major; empty pixels hold 0.
    pub data: Vec<f32>,
    /// True where some point filled the pixel.
    pub valid_mask: Vec<bool>,
    /// Winning point index per pixel.
    pub winner: Vec<Option<usize>>,
    /// Range per input point, meters.
    pub point_range: Vec<f64>,
}

impl RangeImage {
    /// Range of the winning point per pixel (0 where empty), `H*W` flat.
    pub fn pixel_range(&self) -> Vec<f64> {
        self.winner
            .iter()
            .map(|w| w.map_or(0.0, |p| self.point_range[p]))
            .collect()
    }
}

/// Computes pixel coordinates for every point. Range-0 points cannot be
/// projected and are flagged out of bounds.
pub fn project_points(cloud: &PointCloud, cfg: &SphericalConfig) -> PointPixelMap {
    let n = cloud.len();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let fov = cfg.fov();
    let mut map = PointPixelMap {
        u: vec![0; n],
        v: vec![0; n],
        in_bounds: vec![false; n],
    };
    for (i, p) in cloud.xyz.iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 {
            continue;
        }
        let u_f = 0.5 * (1.0 - y.atan2(x) / std::f64::consts::PI) * w;
        let v_f = (1.0 - ((z / r).asin() + cfg.fov_down) / fov) * h;
        let u = (u_f.floor() as i64).clamp(0, cfg.width as i64 - 1) as usize;
        let v = (v_f.floor() as i64).clamp(0, cfg.height as i64 - 1) as usize;
        map.u[i] = u;
        map.v[i] = v;
        map.in_bounds[i] = true;
    }
    map
}

/// Pixel coordinates plus the per-pixel depth-buffer winners (smallest
/// range; ties keep the lowest point index).
pub fn project_winners(
    cloud: &PointCloud,
    cfg: &SphericalConfig,
) -> (PointPixelMap, Vec<Option<usize>>, Vec<f64>) {
    let map = project_points(cloud, cfg);
    let ranges = cloud.ranges();
    let mut winner: Vec<Option<usize>> = vec![None; cfg.width * cfg.height];
    for i in 0..cloud.len() {
        let Some(pix) = map.pixel(i, cfg.width) else {
            continue;
        };
        // Strict comparison keeps the lowest index on equal ranges.
        match winner[pix] {
            Some(current) if ranges[current] <= ranges[i] => {}
            _ => winner[pix] = Some(i),
        }
    }
    (map, winner, ranges)
}

/// Projects per-point features onto the range image. `channel_source` is a
/// row-major `N x C` matrix aligned with the cloud's point order; the
/// winning point of each pixel fills that pixel's channels.
pub fn spherical_project(
    cloud: &PointCloud,
    cfg: &SphericalConfig,
    channel_source: &[f32],
    num_channels: usize,
) -> Result<(RangeImage, PointPixelMap)> {
    let n = cloud.len();
    if channel_source.len() != n * num_channels {
        return Err(Error::contract(format!(
            "channel source has {} values, expected {} x {}",
            channel_source.len(),
            n,
            num_channels
        )));
    }
    let (map, winner, ranges) = project_winners(cloud, cfg);
    let pixels = cfg.width * cfg.height;

    let mut data = vec![0.0f32; num_channels * pixels];
    let mut valid_mask = vec![false; pixels];
    for (pix, w) in winner.iter().enumerate() {
        let Some(point) = *w else { continue };
        valid_mask[pix] = true;
        for c in 0..num_channels {
            data[c * pixels + pix] = channel_source[point * num_channels + c];
        }
    }

    Ok((
        RangeImage {
            width: cfg.width,
            height: cfg.height,
            num_channels,
            data,
            valid_mask,
            winner,
            point_range: ranges,
        },
        map,
    ))
}

/// The default raw channel set `(x, y, z, remission, range)` as an `N x 5`
/// feature matrix.
pub fn raw_channels(cloud: &PointCloud) -> (Vec<f32>, Vec<&'static str>) {
    let ranges = cloud.ranges();
    let mut out = Vec::with_capacity(cloud.len() * 5);
    for i in 0..cloud.len() {
        out.extend_from_slice(&cloud.xyz[i]);
        out.push(cloud.remission[i]);
        out.push(ranges[i] as f32);
    }
    (out, vec!["x", "y", "z", "remission", "range"])
}

/// Bird's-eye-view grid geometry. Pillars are full height: `dz` spans the
/// whole vertical crop, so the cell index depends on x and y only.
#[derive(Debug, Clone, Copy)]
pub struct PillarGridConfig {
    /// (dx, dy, dz) in meters.
    pub voxel_size: (f64, f64, f64),
    /// Minimum corner of the grid in meters.
    pub origin: (f64, f64, f64),
    /// Cell counts along x and y.
    pub dims: (usize, usize),
}

impl PillarGridConfig {
    pub fn new(
        voxel_size: (f64, f64, f64),
        origin: (f64, f64, f64),
        dims: (usize, usize),
    ) -> Result<Self> {
        if voxel_size.0 <= 0.0 || voxel_size.1 <= 0.0 || voxel_size.2 <= 0.0 {
            return Err(Error::contract("pillar grid: voxel sizes must be > 0"));
        }
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::contract("pillar grid: dims must be > 0"));
        }
        Ok(Self {
            voxel_size,
            origin,
            dims,
        })
    }

    /// 512 x 512 grid of 0.3125 m pillars spanning the default crop box,
    /// 10 m tall.
    pub fn paper_default() -> Self {
        Self {
            voxel_size: (0.3125, 0.3125, 10.0),
            origin: (-80.0, -80.0, -5.0),
            dims: (512, 512),
        }
    }

    /// Center of the cell holding `(ix, iy)`.
    fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.voxel_size.0,
            self.origin.1 + (iy as f64 + 0.5) * self.voxel_size.1,
            self.origin.2 + 0.5 * self.voxel_size.2,
        )
    }
}

/// Assignment of points to pillars plus normalized in-pillar offsets.
#[derive(Debug, Clone)]
pub struct PillarGrid {
    pub cfg: PillarGridConfig,
    /// Flat cell `ix + Gx * iy`, `None` for points outside the grid.
    pub pillar_index: Vec<Option<usize>>,
    /// `(coordinate - cell center) / voxel_size` per axis; the z component
    /// is clamped to [-0.5, 0.5] for points outside the vertical extent.
    pub offsets: Vec<[f64; 3]>,
    /// Distinct occupied cells in order of first occurrence.
    pub occupied: Vec<usize>,
    /// Index into `occupied` per point.
    pub group_of_point: Vec<Option<usize>>,
}

impl PillarGrid {
    pub fn num_occupied(&self) -> usize {
        self.occupied.len()
    }
}

/// Assigns every point to its pillar. Out-of-grid points are flagged, never
/// dropped.
pub fn pillar_assign(cloud: &PointCloud, cfg: &PillarGridConfig) -> PillarGrid {
    let (gx, gy) = cfg.dims;
    let n = cloud.len();
    let mut pillar_index = vec![None; n];
    let mut offsets = vec![[0.0f64; 3]; n];
    let mut occupied = Vec::new();
    let mut group_of_point = vec![None; n];
    let mut group_of_cell = vec![usize::MAX; gx * gy];

    for (i, p) in cloud.xyz.iter().enumerate() {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        let fx = (x - cfg.origin.0) / cfg.voxel_size.0;
        let fy = (y - cfg.origin.1) / cfg.voxel_size.1;
        let (ix, iy) = (fx.floor(), fy.floor());
        if ix < 0.0 || iy < 0.0 || ix >= gx as f64 || iy >= gy as f64 {
            continue;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        let cell = ix + gx * iy;
        pillar_index[i] = Some(cell);
        let center = cfg.cell_center(ix, iy);
        offsets[i] = [
            (x - center.0) / cfg.voxel_size.0,
            (y - center.1) / cfg.voxel_size.1,
            ((z - center.2) / cfg.voxel_size.2).clamp(-0.5, 0.5),
        ];
        if group_of_cell[cell] == usize::MAX {
            group_of_cell[cell] = occupied.len();
            occupied.push(cell);
        }
        group_of_point[i] = Some(group_of_cell[cell]);
    }

    PillarGrid {
        cfg: *cfg,
        pillar_index,
        offsets,
        occupied,
        group_of_point,
    }
}

/// Pooling flavor for [`scatter_pool`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

/// Pools per-point features into their pillars and places the result on the
/// grid: output is `[C, Gx, Gy]` row-major with zeros in empty cells.
pub fn scatter_pool(
    point_features: &[f32],
    num_features: usize,
    grid: &PillarGrid,
    mode: PoolMode,
) -> Result<Vec<f32>> {
    let n = grid.pillar_index.len();
    if point_features.len() != n * num_features {
        return Err(Error::contract(format!(
            "scatter_pool: {} values for {} x {} features",
            point_features.len(),
            n,
            num_features
        )));
    }
    let (gx, gy) = grid.cfg.dims;
    let cells = gx * gy;
    let mut out = vec![0.0f32; num_features * cells];
    let mut counts = vec![0u32; cells];

    for (i, cell) in grid.pillar_index.iter().enumerate() {
        let Some(cell) = *cell else { continue };
        let (ix, iy) = (cell % gx, cell / gx);
        let flat = ix * gy + iy;
        let first = counts[flat] == 0;
        counts[flat] += 1;
        for c in 0..num_features {
            let v = point_features[i * num_features + c];
            let slot = c * cells + flat;
            match mode {
                PoolMode::Max => {
                    if first || v > out[slot] {
                        out[slot] = v;
                    }
                }
                PoolMode::Mean => out[slot] += v,
            }
        }
    }
    if mode == PoolMode::Mean {
        for flat in 0..cells {
            if counts[flat] > 0 {
                let inv = 1.0 / counts[flat] as f32;
                for c in 0..num_features {
                    out[c * cells + flat] *= inv;
                }
            }
        }
    }
    Ok(out)
}

/// Looks up each point's feature vector in a `[C, cells]` map via a flat
/// spatial index; out-of-bounds points get zero rows.
pub fn gather_to_points(
    cell_features: &[f32],
    num_features: usize,
    index_map: &[Option<usize>],
) -> Result<Vec<f32>> {
    if num_features == 0 || cell_features.len() % num_features != 0 {
        return Err(Error::contract(
            "gather_to_points: feature map length is not a multiple of the channel count",
        ));
    }
    let cells = cell_features.len() / num_features;
    let mut out = vec![0.0f32; index_map.len() * num_features];
    for (i, idx) in index_map.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        if idx >= cells {
            return Err(Error::contract(format!(
                "gather_to_points: index {idx} out of {cells}"
            )));
        }
        for c in 0..num_features {
            out[i * num_features + c] = cell_features[c * cells + idx];
        }
    }
    Ok(out)
}

/// Flat BEV cell index (`ix * Gy + iy`) per point, the layout used by
/// `[C, Gx, Gy]` feature maps.
pub fn bev_cell_of_point(grid: &PillarGrid) -> Vec<Option<usize>> {
    let (gx, gy) = grid.cfg.dims;
    grid.pillar_index
        .iter()
        .map(|p| p.map(|cell| (cell % gx) * gy + cell / gx))
        .collect()
}
