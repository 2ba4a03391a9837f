//! Synthetic LiDAR-like scenes with analytic labels, so training and
//! evaluation can run without any dataset download.
//!
//! Each frame is a polar arrangement around a sensor 1.7 m above a ground
//! plane: the ground disc plus vehicles (boxes), poles, walls and canopy
//! blobs placed in distinct azimuth slots. Object surfaces are kept above
//! the elevation band that ground returns occupy, so range-image pixels are
//! class-pure except at band boundaries. Remission is strongly
//! class-correlated, mimicking material differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::frame_rng;
use crate::pointcloud::{LabelArray, PointCloud};

pub const GROUND: u16 = 0;
pub const VEHICLE: u16 = 1;
pub const POLE: u16 = 2;
pub const WALL: u16 = 3;
pub const CANOPY: u16 = 4;
pub const NUM_CLASSES: usize = 5;

const SENSOR_HEIGHT: f64 = 1.7;

fn remission_for(class: u16, rng: &mut ChaCha8Rng) -> f32 {
    let base = match class {
        GROUND => 0.10,
        VEHICLE => 0.35,
        POLE => 0.55,
        WALL => 0.75,
        _ => 0.95,
    };
    (base + rng.random_range(-0.03..0.03) as f64).clamp(0.0, 1.0) as f32
}

struct FrameBuilder {
    xyz: Vec<[f32; 3]>,
    remission: Vec<f32>,
    semantic: Vec<u16>,
}

impl FrameBuilder {
    fn push(&mut self, x: f64, y: f64, z: f64, class: u16, rng: &mut ChaCha8Rng) {
        self.xyz.push([x as f32, y as f32, z as f32]);
        self.remission.push(remission_for(class, rng));
        self.semantic.push(class);
    }
}

/// One deterministic frame: same (seed, index) always yields the same
/// points and labels.
pub fn synth_frame(seed: u64, index: u64) -> (PointCloud, LabelArray) {
    let mut rng = frame_rng(seed ^ 0x5CE9E5, index);
    let mut fb = FrameBuilder {
        xyz: Vec::new(),
        remission: Vec::new(),
        semantic: Vec::new(),
    };

    // Ground annulus; elevations stay below roughly -4.8 deg.
    for _ in 0..550 {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let d = rng.random_range(3.0..20.0);
        let z = -SENSOR_HEIGHT + rng.random_range(-0.03..0.03);
        fb.push(d * phi.cos(), d * phi.sin(), z, GROUND, &mut rng);
    }

    // Twelve azimuth slots, shuffled per frame; objects draw from them so
    // different classes rarely share a column.
    let mut slots: Vec<f64> = (0..12)
        .map(|i| i as f64 * std::f64::consts::TAU / 12.0)
        .collect();
    for i in 0..slots.len() {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut next_slot = 0;
    let mut take_slot = |rng: &mut ChaCha8Rng| {
        let base = slots[next_slot % 12];
        next_slot += 1;
        base + rng.random_range(0.04..0.22)
    };

    // Vehicles: sensor-facing face plus roof of a box, z in [-0.4, 0.3].
    for _ in 0..3 {
        let phi = take_slot(&mut rng);
        let d = rng.random_range(6.0..14.0);
        let (cx, cy) = (d * phi.cos(), d * phi.sin());
        let half_w = 1.9;
        let (tx, ty) = (-phi.sin(), phi.cos()); // tangential direction
        for _ in 0..130 {
            let along = rng.random_range(-half_w..half_w);
            let face = rng.random_bool(0.7);
            let (radial, z) = if face {
                (0.0, rng.random_range(-0.4..0.3))
            } else {
                (rng.random_range(0.0..1.6), 0.3)
            };
            let rx = cx + tx * along + phi.cos() * radial;
            let ry = cy + ty * along + phi.sin() * radial;
            fb.push(rx, ry, z + rng.random_range(-0.02..0.02), VEHICLE, &mut rng);
        }
    }

    // Poles: thin cylinders, z in [-0.3, 2.2].
    for _ in 0..4 {
        let phi = take_slot(&mut rng);
        let d = rng.random_range(5.0..13.0);
        let (cx, cy) = (d * phi.cos(), d * phi.sin());
        for _ in 0..60 {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let z = rng.random_range(-0.3..2.2);
            fb.push(cx + 0.15 * a.cos(), cy + 0.15 * a.sin(), z, POLE, &mut rng);
        }
    }

    // Walls: vertical planes, z in [-0.3, 2.6].
    for _ in 0..2 {
        let phi = take_slot(&mut rng);
        let d = rng.random_range(12.0..20.0);
        let (cx, cy) = (d * phi.cos(), d * phi.sin());
        let (tx, ty) = (-phi.sin(), phi.cos());
        for _ in 0..180 {
            let along = rng.random_range(-4.0..4.0);
            let z = rng.random_range(-0.3..2.6);
            fb.push(cx + tx * along, cy + ty * along, z, WALL, &mut rng);
        }
    }

    // Canopy: ellipsoidal blobs well above the horizon band.
    for _ in 0..3 {
        let phi = take_slot(&mut rng);
        let d = rng.random_range(7.0..14.0);
        let (cx, cy) = (d * phi.cos(), d * phi.sin());
        let cz = rng.random_range(1.2..2.0);
        for _ in 0..100 {
            let u: f64 = rng.random_range(-1.0..1.0);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let rr = (1.0 - u * u).sqrt();
            fb.push(
                cx + 1.3 * rr * a.cos(),
                cy + 1.3 * rr * a.sin(),
                cz + 0.8 * u,
                CANOPY,
                &mut rng,
            );
        }
    }

    let n = fb.xyz.len();
    (
        PointCloud {
            xyz: fb.xyz,
            remission: fb.remission,
        },
        LabelArray {
            semantic: fb.semantic,
            instance: vec![0; n],
        },
    )
}

pub fn synth_dataset(seed: u64, frames: usize) -> Vec<(PointCloud, LabelArray)> {
    (0..frames).map(|i| synth_frame(seed, i as u64)).collect()
}
