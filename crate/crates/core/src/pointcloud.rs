//! Point-cloud and label ingestion in the KITTI odometry binary formats.
//!
//! A point file (`<frame>.bin`) is a flat sequence of little-endian f32
//! quadruples `(x, y, z, remission)`. A label file (`<frame>.label`) is a
//! flat sequence of little-endian u32 words, semantic class in the low 16
//! bits and instance id in the high 16 bits.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::{Error, Result};

/// One LiDAR sweep: `n` points with coordinates in meters and a
/// dimensionless remission reading per point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<[f32; 3]>,
    pub remission: Vec<f32>,
}

impl PointCloud {
    /// Validates the structural invariants: matching lengths and finite
    /// coordinates.
    pub fn new(xyz: Vec<[f32; 3]>, remission: Vec<f32>) -> Result<Self> {
        if xyz.len() != remission.len() {
            return Err(Error::contract(format!(
                "xyz has {} points but remission has {}",
                xyz.len(),
                remission.len()
            )));
        }
        for (i, p) in xyz.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::contract(format!(
                    "non-finite coordinate at point {i}: {p:?}"
                )));
            }
        }
        Ok(Self { xyz, remission })
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    /// Euclidean range `sqrt(x^2 + y^2 + z^2)` per point, in f64.
    pub fn ranges(&self) -> Vec<f64> {
        self.xyz
            .iter()
            .map(|p| {
                let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
                (x * x + y * y + z * z).sqrt()
            })
            .collect()
    }
}

/// Per-point semantic and instance ids, paired with a [`PointCloud`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelArray {
    pub semantic: Vec<u16>,
    pub instance: Vec<u16>,
}

impl LabelArray {
    pub fn len(&self) -> usize {
        self.semantic.len()
    }

    pub fn is_empty(&self) -> bool {
        self.semantic.is_empty()
    }
}

/// Closed axis-aligned crop box in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBounds {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
}

impl CropBounds {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64)) -> Result<Self> {
        for (name, (lo, hi)) in [("x", x_range), ("y", y_range), ("z", z_range)] {
            if !(lo < hi) {
                return Err(Error::contract(format!(
                    "crop bounds on {name} need min < max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self {
            x_range,
            y_range,
            z_range,
        })
    }

    fn contains(&self, p: &[f32; 3]) -> bool {
        let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
        x >= self.x_range.0
            && x <= self.x_range.1
            && y >= self.y_range.0
            && y <= self.y_range.1
            && z >= self.z_range.0
            && z <= self.z_range.1
    }
}

impl Default for CropBounds {
    /// The training crop: x, y in [-80, 80] m, z in [-5, 5] m.
    fn default() -> Self {
        Self {
            x_range: (-80.0, 80.0),
            y_range: (-80.0, 80.0),
            z_range: (-5.0, 5.0),
        }
    }
}

/// Raw-id to train-id remap table with an optional fallback ignore id.
///
/// Every mapped target must be a valid train id (`< num_classes`) or the
/// ignore id. Raw ids absent from the table fall back to the ignore id when
/// one is configured, otherwise remapping fails.
#[derive(Debug, Clone)]
pub struct LabelMapping {
    map: BTreeMap<u16, u16>,
    ignore_id: Option<u16>,
    num_classes: usize,
}

impl LabelMapping {
    pub fn new(
        map: BTreeMap<u16, u16>,
        ignore_id: Option<u16>,
        num_classes: usize,
    ) -> Result<Self> {
        for (&raw, &train) in &map {
            let ok = (train as usize) < num_classes || Some(train) == ignore_id;
            if !ok {
                return Err(Error::config(format!(
                    "mapping {raw} -> {train} is outside [0, {num_classes}) and is not the ignore id"
                )));
            }
        }
        Ok(Self {
            map,
            ignore_id,
            num_classes,
        })
    }

    /// Identity mapping over `num_classes` classes with ignore id 255.
    pub fn identity(num_classes: usize) -> Self {
        Self {
            map: (0..num_classes as u16).map(|c| (c, c)).collect(),
            ignore_id: Some(255),
            num_classes,
        }
    }

    pub fn ignore_id(&self) -> Option<u16> {
        self.ignore_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn lookup(&self, raw: u16) -> Result<u16> {
        match self.map.get(&raw) {
            Some(&t) => Ok(t),
            None => self.ignore_id.ok_or(Error::Mapping(raw)),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a packed float32 point file; byte length must be divisible by 16.
pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("byte length {} is not divisible by 16", bytes.len()),
        });
    }
    let n = bytes.len() / 16;
    let mut xyz = Vec::with_capacity(n);
    let mut remission = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(16) {
        xyz.push([
            LittleEndian::read_f32(&chunk[0..4]),
            LittleEndian::read_f32(&chunk[4..8]),
            LittleEndian::read_f32(&chunk[8..12]),
        ]);
        remission.push(LittleEndian::read_f32(&chunk[12..16]));
    }
    PointCloud::new(xyz, remission).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes the packed float32 quadruple format read by [`read_kitti_bin`].
pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for (p, &rem) in cloud.xyz.iter().zip(&cloud.remission) {
        for &c in p {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        bytes.extend_from_slice(&rem.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Reads a packed u32 label file; byte length must be divisible by 4.
pub fn read_label_file(path: impl AsRef<Path>) -> Result<LabelArray> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("byte length {} is not divisible by 4", bytes.len()),
        });
    }
    let mut semantic = Vec::with_capacity(bytes.len() / 4);
    let mut instance = Vec::with_capacity(bytes.len() / 4);
    for chunk in bytes.chunks_exact(4) {
        let word = LittleEndian::read_u32(chunk);
        semantic.push((word & 0xFFFF) as u16);
        instance.push((word >> 16) as u16);
    }
    Ok(LabelArray { semantic, instance })
}

/// Writes the packed u32 format read by [`read_label_file`].
pub fn write_label_file(path: impl AsRef<Path>, labels: &LabelArray) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 4);
    for (&sem, &inst) in labels.semantic.iter().zip(&labels.instance) {
        let word = (inst as u32) << 16 | sem as u32;
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    write_bytes(path.as_ref(), &bytes)
}

/// Applies the raw-to-train mapping to every semantic id; instances pass
/// through untouched.
pub fn remap_labels(labels: &LabelArray, mapping: &LabelMapping) -> Result<LabelArray> {
    let semantic = labels
        .semantic
        .iter()
        .map(|&raw| mapping.lookup(raw))
        .collect::<Result<Vec<u16>>>()?;
    Ok(LabelArray {
        semantic,
        instance: labels.instance.clone(),
    })
}

/// Keeps only points inside the closed crop box, preserving order; labels,
/// when given, are filtered by the same index set.
pub fn truncate_cloud(
    cloud: &PointCloud,
    labels: Option<&LabelArray>,
    bounds: &CropBounds,
) -> Result<(PointCloud, Option<LabelArray>)> {
    if let Some(l) = labels {
        if l.len() != cloud.len() {
            return Err(Error::contract(format!(
                "labels have {} entries for a cloud of {} points",
                l.len(),
                cloud.len()
            )));
        }
    }
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| bounds.contains(&cloud.xyz[i]))
        .collect();
    let out_cloud = PointCloud {
        xyz: keep.iter().map(|&i| cloud.xyz[i]).collect(),
        remission: keep.iter().map(|&i| cloud.remission[i]).collect(),
    };
    let out_labels = labels.map(|l| LabelArray {
        semantic: keep.iter().map(|&i| l.semantic[i]).collect(),
        instance: keep.iter().map(|&i| l.instance[i]).collect(),
    });
    Ok((out_cloud, out_labels))
}
