//! Range-gated KNN label refinement.
//!
//! Every 3-D point re-votes its label from the range-image window around its
//! pixel: candidates are valid pixels whose range lies within `cutoff`
//! meters of the point's own range; the `k` closest candidates (by absolute
//! range difference) vote with Gaussian weights over the Chebyshev pixel
//! distance. This lifts clean pixel predictions back onto every point,
//! including the points that lost their pixel's depth contest.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    /// Window side length in pixels; odd.
    pub kernel_size: usize,
    /// Number of voting neighbors.
    pub k: usize,
    /// Gaussian width for the pixel-distance vote weights.
    pub sigma: f64,
    /// Range gate in meters.
    pub cutoff: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            kernel_size: 5,
            k: 5,
            sigma: 1.0,
            cutoff: 1.0,
        }
    }
}

impl KnnConfig {
    /// Defaults for the high-resolution (H = 128) image: a wider window.
    pub fn hi_res() -> Self {
        Self {
            kernel_size: 11,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::config("knn: kernel_size must be odd and >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("knn: k must be >= 1"));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::config("knn: cutoff must be > 0"));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config("knn: sigma must be > 0"));
        }
        Ok(())
    }
}

struct Candidate {
    range_diff: f64,
    chebyshev: usize,
    scan_order: usize,
    label: u16,
}

/// Refines one label per point. `label_image`, `pixel_range` and
/// `valid_mask` are flat `H*W` row-major; `points` holds each point's pixel
/// coordinates and range. Window rows clip at the image border, columns
/// wrap. Points whose window offers no candidate inside the cutoff fall
/// back to their center pixel's label (or the nearest valid window pixel if
/// the center is empty, or 0 if the whole window is empty).
pub fn knn_refine(
    label_image: &[u16],
    pixel_range: &[f64],
    valid_mask: &[bool],
    points: &[(usize, usize, f64)],
    (height, width): (usize, usize),
    cfg: &KnnConfig,
) -> Result<Vec<u16>> {
    cfg.validate()?;
    let hw = height * width;
    if label_image.len() != hw || pixel_range.len() != hw || valid_mask.len() != hw {
        return Err(Error::contract(format!(
            "knn_refine: image buffers must be {height} x {width}"
        )));
    }
    let half = (cfg.kernel_size / 2) as isize;
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma * cfg.sigma);

    let mut out = Vec::with_capacity(points.len());
    for &(u, v, r) in points {
        if u >= width || v >= height {
            return Err(Error::contract(format!(
                "knn_refine: pixel ({u}, {v}) outside {height} x {width}"
            )));
        }
        let mut candidates: Vec<Candidate> = Vec::new();
        let mut fallback: Option<(usize, usize, u16)> = None; // (chebyshev, scan, label)
        let mut scan = 0usize;
        for dv in -half..=half {
            let row = v as isize + dv;
            if row < 0 || row >= height as isize {
                continue;
            }
            for du in -half..=half {
                let col = (u as isize + du).rem_euclid(width as isize) as usize;
                let pix = row as usize * width + col;
                let order = scan;
                scan += 1;
                if !valid_mask[pix] {
                    continue;
                }
                let cheb = dv.unsigned_abs().max(du.unsigned_abs());
                match fallback {
                    Some((bc, bs, _)) if (bc, bs) <= (cheb, order) => {}
                    _ => fallback = Some((cheb, order, label_image[pix])),
                }
                let diff = (pixel_range[pix] - r).abs();
                if diff <= cfg.cutoff {
                    candidates.push(Candidate {
                        range_diff: diff,
                        chebyshev: cheb,
                        scan_order: order,
                        label: label_image[pix],
                    });
                }
            }
        }

        if candidates.is_empty() {
            // Center pixel first; it is the fallback with chebyshev 0 when
            // valid, otherwise the nearest valid window pixel; 0 for an
            // entirely empty window.
            out.push(fallback.map_or(0, |(_, _, label)| label));
            continue;
        }

        candidates.sort_by(|a, b| {
            a.range_diff
                .total_cmp(&b.range_diff)
                .then(a.chebyshev.cmp(&b.chebyshev))
                .then(a.scan_order.cmp(&b.scan_order))
        });
        candidates.truncate(cfg.k);

        // Gaussian vote over pixel distance; ties resolved toward the class
        // with the smallest range difference, then the smallest id.
        let mut votes: Vec<(f64, f64)> = Vec::new(); // class -> (weight, best diff)
        for c in &candidates {
            let class = c.label as usize;
            if votes.len() <= class {
                votes.resize(class + 1, (0.0, f64::INFINITY));
            }
            let w = (-((c.chebyshev * c.chebyshev) as f64) * inv_two_sigma_sq).exp();
            votes[class].0 += w;
            votes[class].1 = votes[class].1.min(c.range_diff);
        }
        let mut best: Option<(u16, f64, f64)> = None; // (class, weight, best diff)
        for (class, &(w, diff)) in votes.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let replace = match best {
                None => true,
                Some((_, bw, bd)) => w > bw || (w == bw && diff < bd),
            };
            if replace {
                best = Some((class as u16, w, diff));
            }
        }
        out.push(best.expect("non-empty candidate set").0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force re-derivation: enumerate the window, gate, select the k
    /// best by repeated minimum extraction, and tally the vote by scanning
    /// classes. Shares no code with the implementation.
    pub(crate) fn oracle_refine(
        label_image: &[u16],
        pixel_range: &[f64],
        valid_mask: &[bool],
        points: &[(usize, usize, f64)],
        (height, width): (usize, usize),
        cfg: &KnnConfig,
    ) -> Vec<u16> {
        let half = (cfg.kernel_size / 2) as isize;
        points
            .iter()
            .map(|&(u, v, r)| {
                // (diff, cheb, scan, label) for every gated candidate.
                let mut pool: Vec<(f64, usize, usize, u16)> = Vec::new();
                let mut nearest_valid: Option<(usize, usize, u16)> = None;
                let mut scan = 0usize;
                for dv in -half..=half {
                    let row = v as isize + dv;
                    if row < 0 || row >= height as isize {
                        continue;
                    }
                    for du in -half..=half {
                        let col = (u as isize + du).rem_euclid(width as isize) as usize;
                        let pix = row as usize * width + col;
                        let my_scan = scan;
                        scan += 1;
                        if !valid_mask[pix] {
                            continue;
                        }
                        let cheb = dv.unsigned_abs().max(du.unsigned_abs());
                        let key = (cheb, my_scan);
                        if nearest_valid.map_or(true, |(bc, bs, _)| key < (bc, bs)) {
                            nearest_valid = Some((cheb, my_scan, label_image[pix]));
                        }
                        let diff = (pixel_range[pix] - r).abs();
                        if diff <= cfg.cutoff {
                            pool.push((diff, cheb, my_scan, label_image[pix]));
                        }
                    }
                }
                if pool.is_empty() {
                    return nearest_valid.map_or(0, |(_, _, l)| l);
                }
                let mut chosen: Vec<(f64, usize, usize, u16)> = Vec::new();
                while chosen.len() < cfg.k && !pool.is_empty() {
                    let mut best = 0;
                    for i in 1..pool.len() {
                        let a = &pool[i];
                        let b = &pool[best];
                        if (a.0, a.1, a.2) < (b.0, b.1, b.2) {
                            best = i;
                        }
                    }
                    chosen.push(pool.swap_remove(best));
                }
                let max_class = chosen.iter().map(|c| c.3).max().unwrap() as usize;
                let mut winner: Option<(u16, f64, f64)> = None;
                for class in 0..=max_class {
                    let members: Vec<_> =
                        chosen.iter().filter(|c| c.3 as usize == class).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let weight: f64 = members
                        .iter()
                        .map(|c| {
                            (-((c.1 * c.1) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp()
                        })
                        .sum();
                    let best_diff = members.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
                    let take = match winner {
                        None => true,
                        Some((_, bw, bd)) => weight > bw || (weight == bw && best_diff < bd),
                    };
                    if take {
                        winner = Some((class as u16, weight, best_diff));
                    }
                }
                winner.unwrap().0
            })
            .collect()
    }

    fn full_mask(hw: usize) -> Vec<bool> {
        vec![true; hw]
    }

    #[test]
    fn winner_point_keeps_its_own_label() {
        // The point sits exactly on its pixel; distance-0 candidate with a
        // zero range gap dominates the vote.
        let (h, w) = (3, 5);
        let labels: Vec<u16> = (0..15).map(|i| (i % 4) as u16).collect();
        let ranges: Vec<f64> = (0..15).map(|i| 5.0 + i as f64 * 0.01).collect();
        let cfg = KnnConfig {
            kernel_size: 1,
            k: 1,
            ..Default::default()
        };
        let points = vec![(2usize, 1usize, ranges[1 * 5 + 2])];
        let out = knn_refine(&labels, &ranges, &full_mask(15), &points, (h, w), &cfg).unwrap();
        assert_eq!(out[0], labels[1 * 5 + 2]);
    }

    #[test]
    fn kernel_one_returns_center_label_for_all_points() {
        let (h, w) = (4, 6);
        let labels: Vec<u16> = (0..24).map(|i| (i % 3) as u16).collect();
        let ranges = vec![10.0; 24];
        let cfg = KnnConfig {
            kernel_size: 1,
            k: 3,
            ..Default::default()
        };
        let points: Vec<(usize, usize, f64)> =
            (0..24).map(|i| (i % w, i / w, 10.2)).collect();
        let out = knn_refine(&labels, &ranges, &full_mask(24), &points, (h, w), &cfg).unwrap();
        for (i, &l) in out.iter().enumerate() {
            assert_eq!(l, labels[(i / w) * w + i % w]);
        }
    }

    #[test]
    fn five_by_five_window_prefers_near_range_competitor() {
        // Two labels compete: label 1 pixels sit 0.2 m from the query range,
        // label 2 pixels 0.9 m. Both inside the cutoff; the range-nearest
        // k = 3 are all label 1.
        let (h, w) = (5, 5);
        let mut labels = vec![0u16; 25];
        let mut ranges = vec![100.0; 25]; // far outside the cutoff
        let mut mask = full_mask(25);
        mask[2 * 5 + 2] = false; // empty center forces window voting
        for &pix in &[6usize, 8, 16] {
            labels[pix] = 1;
            ranges[pix] = 10.2;
        }
        for &pix in &[7usize, 11, 13] {
            labels[pix] = 2;
            ranges[pix] = 10.9;
        }
        let cfg = KnnConfig {
            kernel_size: 5,
            k: 3,
            sigma: 1.0,
            cutoff: 1.0,
        };
        let points = vec![(2usize, 2usize, 10.0)];
        let out = knn_refine(&labels, &ranges, &mask, &points, (h, w), &cfg).unwrap();
        assert_eq!(out[0], 1);
        let oracle = oracle_refine(&labels, &ranges, &mask, &points, (h, w), &cfg);
        assert_eq!(out, oracle);
    }

    #[test]
    fn cutoff_miss_falls_back_to_center_pixel() {
        let (h, w) = (3, 3);
        let labels: Vec<u16> = vec![4; 9];
        let ranges = vec![50.0; 9];
        let cfg = KnnConfig::default();
        // Query range far from every pixel range.
        let points = vec![(1usize, 1usize, 2.0)];
        let out = knn_refine(&labels, &ranges, &full_mask(9), &points, (h, w), &cfg).unwrap();
        assert_eq!(out[0], 4);
    }

    #[test]
    fn window_wraps_circularly_at_column_zero() {
        let (h, w) = (1, 8);
        let mut labels = vec![0u16; 8];
        let mut mask = vec![false; 8];
        let ranges = vec![10.0; 8];
        // Only column W-2 is valid; it is inside the kernel-5 window of
        // column 0 via the wrap.
        labels[6] = 3;
        mask[6] = true;
        let cfg = KnnConfig {
            kernel_size: 5,
            k: 1,
            ..Default::default()
        };
        let points = vec![(0usize, 0usize, 10.0)];
        let out = knn_refine(&labels, &ranges, &mask, &points, (h, w), &cfg).unwrap();
        assert_eq!(out[0], 3);
    }

    #[test]
    fn label_uniform_window_is_idempotent_for_winners() {
        let (h, w) = (4, 8);
        let labels = vec![2u16; 32];
        let ranges: Vec<f64> = (0..32).map(|i| 8.0 + (i % 5) as f64 * 0.05).collect();
        let cfg = KnnConfig::default();
        let points: Vec<(usize, usize, f64)> = (0..32)
            .map(|i| (i % w, i / w, ranges[(i / w) * w + i % w]))
            .collect();
        let out = knn_refine(&labels, &ranges, &full_mask(32), &points, (h, w), &cfg).unwrap();
        assert!(out.iter().all(|&l| l == 2));
    }

    #[test]
    fn output_label_always_comes_from_the_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let (h, w) = (6, 10);
        let hw = h * w;
        for _ in 0..50 {
            let labels: Vec<u16> = (0..hw).map(|_| rng.random_range(0..6u16)).collect();
            let ranges: Vec<f64> = (0..hw).map(|_| rng.random_range(2.0..12.0)).collect();
            let mask: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.8)).collect();
            let cfg = KnnConfig::default();
            let point = (
                rng.random_range(0..w),
                rng.random_range(0..h),
                rng.random_range(2.0..12.0),
            );
            let out =
                knn_refine(&labels, &ranges, &mask, &[point], (h, w), &cfg).unwrap()[0];
            // Collect window labels (valid pixels only).
            let mut window = Vec::new();
            for dv in -2isize..=2 {
                let row = point.1 as isize + dv;
                if row < 0 || row >= h as isize {
                    continue;
                }
                for du in -2isize..=2 {
                    let col = (point.0 as isize + du).rem_euclid(w as isize) as usize;
                    let pix = row as usize * w + col;
                    if mask[pix] {
                        window.push(labels[pix]);
                    }
                }
            }
            if window.is_empty() {
                assert_eq!(out, 0);
            } else {
                assert!(window.contains(&out), "label {out} not in window");
            }
        }
    }

    #[test]
    fn matches_brute_force_oracle_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..200 {
            let (h, w) = (rng.random_range(3..8), rng.random_range(6..14));
            let hw = h * w;
            let labels: Vec<u16> = (0..hw).map(|_| rng.random_range(0..5u16)).collect();
            let ranges: Vec<f64> = (0..hw)
                .map(|_| rng.random_range(1.0..12.0))
                .collect();
            let mask: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.75)).collect();
            let cfg = KnnConfig {
                kernel_size: *[1usize, 3, 5].get(case % 3).unwrap(),
                k: rng.random_range(1..6),
                sigma: rng.random_range(0.5..2.0),
                cutoff: rng.random_range(0.5..3.0),
            };
            let points: Vec<(usize, usize, f64)> = (0..20)
                .map(|_| {
                    (
                        rng.random_range(0..w),
                        rng.random_range(0..h),
                        rng.random_range(1.0..12.0),
                    )
                })
                .collect();
            let got = knn_refine(&labels, &ranges, &mask, &points, (h, w), &cfg).unwrap();
            let want = oracle_refine(&labels, &ranges, &mask, &points, (h, w), &cfg);
            assert_eq!(got, want, "case {case} cfg {cfg:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(KnnConfig { kernel_size: 4, ..Default::default() }.validate().is_err());
        assert!(KnnConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(KnnConfig { cutoff: 0.0, ..Default::default() }.validate().is_err());
        assert!(KnnConfig::hi_res().validate().is_ok());
    }
}
