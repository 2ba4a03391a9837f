//! Stochastic training-time augmentation of point clouds.
//!
//! Every random quantity is drawn from a caller-supplied ChaCha8 stream in a
//! documented order, so an independent replay of the procedure reproduces
//! results bit for bit. Per-frame streams come from [`frame_rng`]: one
//! master seed, stream id = frame index, which lets data-loading workers run
//! in parallel without losing determinism.
//!
//! Draw order inside [`augment_pipeline`]:
//!
//! 1. gate u ~ U[0,1); if u < probability, dropping happens:
//!    a. f ~ U[0,1) scaled by `drop_max_fraction`, k = floor(f*n)
//!    b. k partial Fisher-Yates steps: for i in 0..k, j = uniform in [i, n)
//! 2. gate u; if on, six draws u ~ U[0,1) mapped to (2u-1)*half_range, in
//!    the order rot_x, rot_y, rot_z, trans_x, trans_y, trans_z
//! 3. gate u; if on, mirror y across the x-z plane
//!
//! A gate draw is always consumed for each stage, applied or not; value
//! draws are consumed only when their stage is on.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::{LabelArray, PointCloud};
use crate::{Error, Result};

/// Augmentation parameters. Ranges are symmetric half-widths: rotation of
/// `rot_range_deg[a]` means angles uniform in `[-range, range)` degrees.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Independent gate probability for each of the three stages.
    pub probability: f64,
    pub drop_max_fraction: f64,
    /// Degrees, per axis (x, y, z).
    pub rot_range_deg: [f64; 3],
    /// Meters, per axis (x, y, z).
    pub trans_range_m: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.5,
            drop_max_fraction: 0.2,
            rot_range_deg: [5.0, 5.0, 180.0],
            trans_range_m: [5.0, 3.0, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("augment: probability must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.drop_max_fraction) {
            return Err(Error::config("augment: drop_max_fraction must be in [0, 1]"));
        }
        let nonneg = |r: &[f64; 3]| r.iter().all(|&v| v >= 0.0 && v.is_finite());
        if !nonneg(&self.rot_range_deg) || !nonneg(&self.trans_range_m) {
            return Err(Error::config("augment: ranges must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Deterministic per-frame stream: ChaCha8 seeded with the master seed,
/// stream id = frame index.
pub fn frame_rng(seed: u64, frame_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index);
    rng
}

fn symmetric(rng: &mut ChaCha8Rng, half_range: f64) -> f64 {
    (2.0 * rng.random::<f64>() - 1.0) * half_range
}

/// Removes a uniformly chosen fraction `f ~ U(0, max_fraction)` of points
/// (k = floor(f*n) of them), keeping the survivors in their original order.
pub fn random_drop(
    cloud: &PointCloud,
    labels: Option<&LabelArray>,
    max_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(PointCloud, Option<LabelArray>)> {
    if !(0.0..=1.0).contains(&max_fraction) {
        return Err(Error::contract("random_drop: max_fraction must be in [0, 1]"));
    }
    let n = cloud.len();
    let f = rng.random::<f64>() * max_fraction;
    let k = (f * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut removed = vec![false; n];
    for &i in &idx[..k] {
        removed[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    let out = PointCloud {
        xyz: keep.iter().map(|&i| cloud.xyz[i]).collect(),
        remission: keep.iter().map(|&i| cloud.remission[i]).collect(),
    };
    let out_labels = labels.map(|l| LabelArray {
        semantic: keep.iter().map(|&i| l.semantic[i]).collect(),
        instance: keep.iter().map(|&i| l.instance[i]).collect(),
    });
    Ok((out, out_labels))
}

/// 3x3 rotation Rz(gamma) * Ry(beta) * Rx(alpha), angles in radians.
pub fn rotation_zyx(alpha: f64, beta: f64, gamma: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, brow) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * brow[j];
                }
            }
        }
        out
    };
    mul(&rz, &mul(&ry, &rx))
}

fn apply_rigid(cloud: &PointCloud, rot: &[[f64; 3]; 3], t: &[f64; 3]) -> PointCloud {
    PointCloud {
        xyz: cloud
            .xyz
            .iter()
            .map(|p| {
                let v = [p[0] as f64, p[1] as f64, p[2] as f64];
                let mut out = [0.0f32; 3];
                for i in 0..3 {
                    let mut acc = t[i];
                    for j in 0..3 {
                        acc += rot[i][j] * v[j];
                    }
                    out[i] = acc as f32;
                }
                out
            })
            .collect(),
        remission: cloud.remission.clone(),
    }
}

/// Global rigid transform with uniformly sampled angles and translations;
/// remission is untouched.
pub fn random_rigid(
    cloud: &PointCloud,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> PointCloud {
    let alpha = symmetric(rng, cfg.rot_range_deg[0]).to_radians();
    let beta = symmetric(rng, cfg.rot_range_deg[1]).to_radians();
    let gamma = symmetric(rng, cfg.rot_range_deg[2]).to_radians();
    let t = [
        symmetric(rng, cfg.trans_range_m[0]),
        symmetric(rng, cfg.trans_range_m[1]),
        symmetric(rng, cfg.trans_range_m[2]),
    ];
    apply_rigid(cloud, &rotation_zyx(alpha, beta, gamma), &t)
}

/// Mirror across the x-z plane: y becomes -y.
pub fn flip_y(cloud: &PointCloud) -> PointCloud {
    PointCloud {
        xyz: cloud.xyz.iter().map(|p| [p[0], -p[1], p[2]]).collect(),
        remission: cloud.remission.clone(),
    }
}

/// Flips with the given gate probability; one gate draw is always consumed.
pub fn random_flip(cloud: &PointCloud, probability: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    if rng.random::<f64>() < probability {
        flip_y(cloud)
    } else {
        cloud.clone()
    }
}

/// Drop, rigid transform, and flip, each gated independently by
/// `cfg.probability`, in that fixed order.
pub fn augment_pipeline(
    cloud: &PointCloud,
    labels: Option<&LabelArray>,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(PointCloud, Option<LabelArray>)> {
    cfg.validate()?;
    let (mut out, mut out_labels) = if rng.random::<f64>() < cfg.probability {
        random_drop(cloud, labels, cfg.drop_max_fraction, rng)?
    } else {
        (cloud.clone(), labels.cloned())
    };
    if rng.random::<f64>() < cfg.probability {
        out = random_rigid(&out, cfg, rng);
    }
    out = random_flip(&out, cfg.probability, rng);
    Ok((out, out_labels.take()))
}
