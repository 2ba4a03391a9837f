//! Segmentation losses over range images: frequency-weighted cross entropy,
//! the Lovász-Softmax IoU surrogate, and a total-variation edge-consistency
//! loss, combined as `beta_ls*L_ls + beta_wce*L_wce + beta_tv*L_tv`.
//!
//! Each loss consumes a `[C, H, W]` probability node (softmax output), a
//! flat `H*W` label array and a validity mask. Values and gradients are
//! computed in f64 and attached to the graph as scalar nodes, so the losses
//! differentiate through the softmax like any other operator.

use std::fmt::Write as _;
use std::path::Path;

use crate::tensor::{Graph, Scalar, Tensor};
use crate::{Error, Result};

const FREQ_EPS: f64 = 1e-6;
const LOG_EPS: f64 = 1e-12;

/// Per-class frequencies and the derived `1/sqrt(nu)` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub nu: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ClassStats {
    pub fn num_classes(&self) -> usize {
        self.nu.len()
    }

    /// Uniform frequencies; weight 1 for every class.
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            counts: vec![1; num_classes],
            nu: vec![1.0 / num_classes as f64; num_classes],
            weights: vec![(num_classes as f64).sqrt(); num_classes],
        }
    }
}

/// Streaming label counter; finish with [`ClassCounter::finish`].
#[derive(Debug, Clone)]
pub struct ClassCounter {
    counts: Vec<u64>,
    ignore_id: u16,
}

impl ClassCounter {
    pub fn new(num_classes: usize, ignore_id: u16) -> Self {
        Self {
            counts: vec![0; num_classes],
            ignore_id,
        }
    }

    pub fn add(&mut self, semantic: &[u16]) -> Result<()> {
        for &s in semantic {
            if s == self.ignore_id {
                continue;
            }
            let c = s as usize;
            if c >= self.counts.len() {
                return Err(Error::contract(format!(
                    "label {c} out of range for {} classes",
                    self.counts.len()
                )));
            }
            self.counts[c] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<ClassStats> {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return Err(Error::contract(
                "class_frequencies: no non-ignored labels in the stream",
            ));
        }
        let nu: Vec<f64> = self
            .counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        let weights = nu.iter().map(|&v| 1.0 / v.max(FREQ_EPS).sqrt()).collect();
        Ok(ClassStats {
            counts: self.counts,
            nu,
            weights,
        })
    }
}

/// Frequencies of a single label slice.
pub fn class_frequencies(
    semantic: &[u16],
    num_classes: usize,
    ignore_id: u16,
) -> Result<ClassStats> {
    let mut counter = ClassCounter::new(num_classes, ignore_id);
    counter.add(semantic)?;
    counter.finish()
}

/// Writes the frequency sidecar: one `class count nu weight` line per class.
pub fn write_stats_sidecar(path: impl AsRef<Path>, stats: &ClassStats) -> Result<()> {
    let mut text = String::from("# class count nu weight\n");
    for c in 0..stats.num_classes() {
        writeln!(
            text,
            "{} {} {:.17e} {:.17e}",
            c, stats.counts[c], stats.nu[c], stats.weights[c]
        )
        .expect("string write");
    }
    std::fs::write(path.as_ref(), text).map_err(|source| Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })
}

pub fn read_stats_sidecar(path: impl AsRef<Path>) -> Result<ClassStats> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut counts = Vec::new();
    let mut nu = Vec::new();
    let mut weights = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 4 fields, got {line:?}"),
            });
        }
        let parse_err = |what: &str| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad {what} in {line:?}"),
        };
        counts.push(fields[1].parse::<u64>().map_err(|_| parse_err("count"))?);
        nu.push(fields[2].parse::<f64>().map_err(|_| parse_err("nu"))?);
        weights.push(fields[3].parse::<f64>().map_err(|_| parse_err("weight"))?);
    }
    Ok(ClassStats {
        counts,
        nu,
        weights,
    })
}

/// Weights for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta_ls: f64,
    pub beta_wce: f64,
    pub beta_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta_ls: 1.5,
            beta_wce: 1.0,
            beta_tv: 7.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta_ls", self.beta_ls),
            ("beta_wce", self.beta_wce),
            ("beta_tv", self.beta_tv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Neighbor step sizes for the total-variation loss. Differences are taken
/// at `(i + di, j)` and `(i, j + dj)`; the column neighbor wraps around.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TvConfig {
    pub di: usize,
    pub dj: usize,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self { di: 1, dj: 1 }
    }
}

impl TvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.di == 0 || self.dj == 0 {
            return Err(Error::config("tv: step sizes must be >= 1"));
        }
        Ok(())
    }
}

/// A loss value on the graph. `degenerate` flags an empty input (no valid
/// pixels / no contributing terms), where the loss is defined as 0.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub value: Tensor,
    pub degenerate: bool,
}

fn check_probs_shape<T: Scalar>(
    g: &Graph<T>,
    probs: Tensor,
    labels_len: usize,
    mask_len: usize,
) -> Result<(usize, usize)> {
    let shape = g.shape(probs);
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "loss: probabilities must be [C, H, W], got {shape:?}"
        )));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    if labels_len != hw || mask_len != hw {
        return Err(Error::contract(format!(
            "loss: {hw} pixels but {labels_len} labels / {mask_len} mask entries"
        )));
    }
    Ok((c, hw))
}

/// Mean over valid pixels of `-a[y] * ln(max(p[y], 1e-12))`.
pub fn wce_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Tensor,
    labels: &[u16],
    mask: &[bool],
    stats: &ClassStats,
) -> Result<LossTerm> {
    let (c, hw) = check_probs_shape(g, probs, labels.len(), mask.len())?;
    if stats.weights.len() != c {
        return Err(Error::contract(format!(
            "wce: {} class weights for {c} channels",
            stats.weights.len()
        )));
    }
    let data = g.data(probs);
    let mut total = 0.0f64;
    let mut grad = vec![0.0f64; c * hw];
    let mut valid = 0usize;
    for p in 0..hw {
        if !mask[p] {
            continue;
        }
        let y = labels[p] as usize;
        if y >= c {
            return Err(Error::contract(format!(
                "wce: label {y} out of range for {c} classes at a masked-in pixel"
            )));
        }
        valid += 1;
        let prob = data[y * hw + p].to_f64();
        let clamped = prob.max(LOG_EPS);
        total += -stats.weights[y] * clamped.ln();
        if prob > LOG_EPS {
            grad[y * hw + p] = -stats.weights[y] / prob;
        }
    }
    if valid == 0 {
        let value = g.scalar_fn(T::zero(), vec![(probs, vec![T::zero(); c * hw])])?;
        return Ok(LossTerm {
            value,
            degenerate: true,
        });
    }
    let inv = 1.0 / valid as f64;
    let grad_t: Vec<T> = grad.iter().map(|&v| T::from_f64(v * inv)).collect();
    let value = g.scalar_fn(T::from_f64(total * inv), vec![(probs, grad_t)])?;
    Ok(LossTerm {
        value,
        degenerate: false,
    })
}

/// Which classes enter the Lovász average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LovaszAverage {
    /// Classes present among the valid ground-truth labels (default).
    Present,
    /// All classes; absent classes contribute their largest error.
    All,
}

/// Lovász-Softmax: per class, sort the error vector, weight each error by
/// the increments of the interpolated Jaccard loss on the sorted prefix
/// sets, then average over classes.
pub fn lovasz_softmax<T: Scalar>(
    g: &mut Graph<T>,
    probs: Tensor,
    labels: &[u16],
    mask: &[bool],
    average: LovaszAverage,
) -> Result<LossTerm> {
    let (c, hw) = check_probs_shape(g, probs, labels.len(), mask.len())?;
    let data = g.data(probs);
    let valid: Vec<usize> = (0..hw).filter(|&p| mask[p]).collect();
    if valid.is_empty() {
        let value = g.scalar_fn(T::zero(), vec![(probs, vec![T::zero(); c * hw])])?;
        return Ok(LossTerm {
            value,
            degenerate: true,
        });
    }
    for &p in &valid {
        if (labels[p] as usize) >= c {
            return Err(Error::contract(format!(
                "lovasz: label {} out of range for {c} classes",
                labels[p]
            )));
        }
    }

    let classes: Vec<usize> = match average {
        LovaszAverage::Present => {
            let mut present = vec![false; c];
            for &p in &valid {
                present[labels[p] as usize] = true;
            }
            (0..c).filter(|&cl| present[cl]).collect()
        }
        LovaszAverage::All => (0..c).collect(),
    };

    let mut total = 0.0f64;
    let mut grad = vec![0.0f64; c * hw];
    for &cl in &classes {
        let fg: Vec<bool> = valid.iter().map(|&p| labels[p] as usize == cl).collect();
        let errors: Vec<f64> = valid
            .iter()
            .zip(&fg)
            .map(|(&p, &is_fg)| {
                let prob = data[cl * hw + p].to_f64();
                if is_fg {
                    1.0 - prob
                } else {
                    prob
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

        let total_fg = fg.iter().filter(|&&f| f).count() as f64;
        let mut cum_fg = 0.0f64;
        let mut cum_bg = 0.0f64;
        let mut prev_jaccard = 0.0f64;
        for &slot in &order {
            if fg[slot] {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let intersection = total_fg - cum_fg;
            let union = total_fg + cum_bg;
            let jaccard = if union > 0.0 {
                1.0 - intersection / union
            } else {
                0.0
            };
            let w = jaccard - prev_jaccard;
            prev_jaccard = jaccard;
            total += errors[slot] * w;
            let sign = if fg[slot] { -1.0 } else { 1.0 };
            grad[cl * hw + valid[slot]] += w * sign;
        }
    }

    let inv = 1.0 / classes.len() as f64;
    let grad_t: Vec<T> = grad.iter().map(|&v| T::from_f64(v * inv)).collect();
    let value = g.scalar_fn(T::from_f64(total * inv), vec![(probs, grad_t)])?;
    Ok(LossTerm {
        value,
        degenerate: false,
    })
}

/// One-hot encoding of a label image; masked-out pixels stay all-zero.
pub fn one_hot(labels: &[u16], num_classes: usize, mask: &[bool]) -> Vec<f64> {
    let hw = labels.len();
    let mut out = vec![0.0; num_classes * hw];
    for p in 0..hw {
        if mask[p] && (labels[p] as usize) < num_classes {
            out[labels[p] as usize * hw + p] = 1.0;
        }
    }
    out
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Total-variation mismatch between prediction edges and target edges:
/// per channel and neighbor pair, `||target_diff| - |pred_diff||`, summed
/// over channels and normalized by the number of contributing (pixel,
/// direction) pairs. Row neighbors stop at the image border; column
/// neighbors wrap.
pub fn tv_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Tensor,
    target: &[f64],
    mask: &[bool],
    cfg: &TvConfig,
) -> Result<LossTerm> {
    cfg.validate()?;
    let shape = g.shape(probs);
    if shape.len() != 3 {
        return Err(Error::contract(format!(
            "tv: probabilities must be [C, H, W], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    if target.len() != c * hw || mask.len() != hw {
        return Err(Error::contract(format!(
            "tv: target has {} values and mask {} for [{c}, {h}, {w}]",
            target.len(),
            mask.len()
        )));
    }
    let data = g.data(probs);

    // (from, to) flat pixel pairs with both endpoints valid.
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            if !mask[p] {
                continue;
            }
            if i + cfg.di < h && mask[(i + cfg.di) * w + j] {
                pairs.push((p, (i + cfg.di) * w + j));
            }
            let jn = (j + cfg.dj) % w;
            let q = i * w + jn;
            if q != p && mask[q] {
                pairs.push((p, q));
            }
        }
    }
    if pairs.is_empty() {
        let value = g.scalar_fn(T::zero(), vec![(probs, vec![T::zero(); c * hw])])?;
        return Ok(LossTerm {
            value,
            degenerate: true,
        });
    }

    let inv = 1.0 / pairs.len() as f64;
    let mut total = 0.0f64;
    let mut grad = vec![0.0f64; c * hw];
    for cl in 0..c {
        let base = cl * hw;
        for &(a, b) in &pairs {
            let dt = (target[base + b] - target[base + a]).abs();
            let dp = data[base + b].to_f64() - data[base + a].to_f64();
            let term = dt - dp.abs();
            total += term.abs();
            let s = -sign(term) * sign(dp);
            grad[base + b] += s;
            grad[base + a] -= s;
        }
    }
    let grad_t: Vec<T> = grad.iter().map(|&v| T::from_f64(v * inv)).collect();
    let value = g.scalar_fn(T::from_f64(total * inv), vec![(probs, grad_t)])?;
    Ok(LossTerm {
        value,
        degenerate: false,
    })
}

/// All three losses plus the weighted combination as one differentiable
/// scalar.
pub struct TotalLoss {
    pub total: Tensor,
    pub wce: Tensor,
    pub lovasz: Tensor,
    pub tv: Tensor,
    pub any_degenerate: bool,
}

pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: Tensor,
    labels: &[u16],
    mask: &[bool],
    stats: &ClassStats,
    weights: &LossWeights,
    tv_cfg: &TvConfig,
) -> Result<TotalLoss> {
    weights.validate()?;
    let num_classes = stats.num_classes();
    let wce = wce_loss(g, probs, labels, mask, stats)?;
    let ls = lovasz_softmax(g, probs, labels, mask, LovaszAverage::Present)?;
    let target = one_hot(labels, num_classes, mask);
    let tv = tv_loss(g, probs, &target, mask, tv_cfg)?;

    let ls_w = g.scale(ls.value, weights.beta_ls);
    let wce_w = g.scale(wce.value, weights.beta_wce);
    let tv_w = g.scale(tv.value, weights.beta_tv);
    let partial = g.add(ls_w, wce_w)?;
    let total = g.add(partial, tv_w)?;
    Ok(TotalLoss {
        total,
        wce: wce.value,
        lovasz: ls.value,
        tv: tv.value,
        any_degenerate: wce.degenerate || ls.degenerate || tv.degenerate,
    })
}

/// Finite-difference verification of every loss, composed with a softmax
/// over raw logits: `instances` random 5-class 6x8 problems per loss, f64,
/// eps 1e-5, threshold 1e-4 on the relative error.
pub fn loss_gradcheck_suite(
    instances: usize,
    seed: u64,
) -> Result<Vec<crate::tensor::CheckReport>> {
    use crate::tensor::{grad_check, CheckReport};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 5;
    const H: usize = 6;
    const W: usize = 8;
    const HW: usize = H * W;
    const EPS: f64 = 1e-5;
    const THRESHOLD: f64 = 1e-4;

    struct Case {
        logits: Vec<f64>,
        labels: Vec<u16>,
        mask: Vec<bool>,
        stats: ClassStats,
    }

    let make_case = |stream: u64| -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let logits: Vec<f64> = (0..C * HW).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u16> = (0..HW)
            .map(|_| {
                if rng.random_bool(0.05) {
                    255
                } else {
                    rng.random_range(0..C as u16)
                }
            })
            .collect();
        let mask: Vec<bool> = (0..HW)
            .map(|p| labels[p] != 255 && rng.random_bool(0.9))
            .collect();
        let visible: Vec<u16> = labels
            .iter()
            .zip(&mask)
            .filter(|&(_, &m)| m)
            .map(|(&l, _)| l)
            .collect();
        let stats = class_frequencies(&visible, C, 255)
            .unwrap_or_else(|_| ClassStats::uniform(C));
        Case {
            logits,
            labels,
            mask,
            stats,
        }
    };

    type LossBuilder = Box<dyn Fn(&mut Graph<f64>, Tensor, &Case) -> Result<Tensor>>;
    let losses: Vec<(&str, LossBuilder)> = vec![
        (
            "wce_loss",
            Box::new(|g, probs, case: &Case| {
                Ok(wce_loss(g, probs, &case.labels, &case.mask, &case.stats)?.value)
            }),
        ),
        (
            "lovasz_softmax",
            Box::new(|g, probs, case: &Case| {
                Ok(
                    lovasz_softmax(g, probs, &case.labels, &case.mask, LovaszAverage::Present)?
                        .value,
                )
            }),
        ),
        (
            "tv_loss",
            Box::new(|g, probs, case: &Case| {
                let target = one_hot(&case.labels, C, &case.mask);
                Ok(tv_loss(g, probs, &target, &case.mask, &TvConfig::default())?.value)
            }),
        ),
        (
            "total_loss",
            Box::new(|g, probs, case: &Case| {
                Ok(total_loss(
                    g,
                    probs,
                    &case.labels,
                    &case.mask,
                    &case.stats,
                    &LossWeights::default(),
                    &TvConfig::default(),
                )?
                .total)
            }),
        ),
    ];

    let mut reports = Vec::new();
    for (name, build) in &losses {
        let mut worst = 0.0f64;
        for k in 0..instances {
            let case = make_case(k as u64);
            let err = grad_check(
                |g, inputs| {
                    let probs = g.softmax_chw(inputs[0])?;
                    build(g, probs, &case)
                },
                &[(vec![C, H, W], case.logits.clone())],
                EPS,
            )?;
            if err > worst {
                worst = err;
            }
        }
        reports.push(CheckReport {
            name: format!("{name}_vs_logits"),
            max_rel_err: worst,
            threshold: THRESHOLD,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn probs_graph(c: usize, h: usize, w: usize, probs: &[f64]) -> (Graph<f64>, Tensor) {
        let mut g = Graph::new();
        let t = g.input(&[c, h, w], probs.to_vec()).unwrap();
        (g, t)
    }

    #[test]
    fn frequencies_two_balanced_classes() {
        let stats = class_frequencies(&[0, 0, 1, 1], 2, 255).unwrap();
        assert_eq!(stats.nu, vec![0.5, 0.5]);
        assert_abs_diff_eq!(stats.weights[0], 2.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(stats.weights[1], 2.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn frequencies_single_class() {
        let stats = class_frequencies(&[0, 0, 0], 1, 255).unwrap();
        assert_eq!(stats.nu, vec![1.0]);
        assert_abs_diff_eq!(stats.weights[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn absent_class_gets_epsilon_floor_weight() {
        let stats = class_frequencies(&[0, 0], 2, 255).unwrap();
        assert_eq!(stats.nu[1], 0.0);
        assert_abs_diff_eq!(stats.weights[1], 1000.0, epsilon = 1e-9);
    }

    #[test]
    fn frequencies_empty_stream_errors() {
        assert!(class_frequencies(&[255, 255], 3, 255).is_err());
        assert!(class_frequencies(&[], 3, 255).is_err());
    }

    #[test]
    fn stats_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("freq.txt");
        let stats = class_frequencies(&[0, 1, 1, 2, 2, 2], 3, 255).unwrap();
        write_stats_sidecar(&path, &stats).unwrap();
        let back = read_stats_sidecar(&path).unwrap();
        assert_eq!(back, stats);
    }

    #[test]
    fn wce_perfect_one_hot_is_near_zero() {
        let probs = vec![
            1.0, 0.0, // class 0 over 2 pixels
            0.0, 1.0, // class 1
        ];
        let (mut g, t) = probs_graph(2, 1, 2, &probs);
        let stats = ClassStats::uniform(2);
        let term = wce_loss(&mut g, t, &[0, 1], &[true, true], &stats).unwrap();
        // Bounded by the log clamp.
        assert!(g.scalar_value(term.value).abs() < 1e-6);
    }

    #[test]
    fn wce_uniform_two_class_closed_form() {
        let probs = vec![0.5, 0.5, 0.5, 0.5];
        let (mut g, t) = probs_graph(2, 1, 2, &probs);
        let stats = ClassStats {
            counts: vec![1, 1],
            nu: vec![0.5, 0.5],
            weights: vec![1.0, 1.0],
        };
        let term = wce_loss(&mut g, t, &[0, 1], &[true, true], &stats).unwrap();
        assert_abs_diff_eq!(
            g.scalar_value(term.value),
            0.69314718055994529,
            epsilon = 1e-12
        );
    }

    #[test]
    fn wce_random_case_matches_frozen_oracle() {
        // Probabilities and expected value computed independently from the
        // formula (softmax of fixed logits, nu = [1/2, 1/4, 1/4]).
        let probs = vec![
            0.32355370388335947,
            0.15404960673493862,
            0.64492705064410083,
            0.32838037643497731,
            0.23969447920584977,
            0.56525370864056546,
            0.2372554029872983,
            0.073271565983538164,
            0.43675181691079079,
            0.28069668462449604,
            0.11781754636860083,
            0.59834805758148468,
        ];
        let (mut g, t) = probs_graph(3, 2, 2, &probs);
        let stats = ClassStats {
            counts: vec![2, 1, 1],
            nu: vec![0.5, 0.25, 0.25],
            weights: vec![1.4142135623730949, 2.0, 2.0],
        };
        let labels = [0u16, 1, 2, 0];
        let term = wce_loss(&mut g, t, &labels, &[true; 4], &stats).unwrap();
        assert_abs_diff_eq!(
            g.scalar_value(term.value),
            2.1472064325870623,
            epsilon = 1e-12
        );
    }

    #[test]
    fn wce_all_masked_is_zero_with_flag() {
        let probs = vec![0.5, 0.5, 0.5, 0.5];
        let (mut g, t) = probs_graph(2, 1, 2, &probs);
        let stats = ClassStats::uniform(2);
        let term = wce_loss(&mut g, t, &[0, 1], &[false, false], &stats).unwrap();
        assert_eq!(g.scalar_value(term.value), 0.0);
        assert!(term.degenerate);
    }

    #[test]
    fn lovasz_perfect_hard_prediction_is_zero() {
        let probs = vec![
            1.0, 0.0, 0.0, 1.0, // class 0
            0.0, 1.0, 1.0, 0.0, // class 1
        ];
        let (mut g, t) = probs_graph(2, 2, 2, &probs);
        let labels = [0u16, 1, 1, 0];
        let term = lovasz_softmax(&mut g, t, &labels, &[true; 4], LovaszAverage::Present).unwrap();
        assert_abs_diff_eq!(g.scalar_value(term.value), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lovasz_single_pixel_equals_error() {
        let probs = vec![0.3, 0.7];
        let (mut g, t) = probs_graph(2, 1, 1, &probs);
        let term = lovasz_softmax(&mut g, t, &[0], &[true], LovaszAverage::Present).unwrap();
        assert_abs_diff_eq!(g.scalar_value(term.value), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn lovasz_binary_four_pixel_frozen_oracle() {
        // Brute-force value from the sorted-interpolation definition of the
        // extension, cross-checked against threshold level sets.
        let p1 = [0.9, 0.6, 0.4, 0.2];
        let mut probs = vec![0.0; 8];
        for (i, &p) in p1.iter().enumerate() {
            probs[i] = 1.0 - p;
            probs[4 + i] = p;
        }
        let (mut g, t) = probs_graph(2, 1, 4, &probs);
        let labels = [1u16, 1, 0, 0];
        let term = lovasz_softmax(&mut g, t, &labels, &[true; 4], LovaszAverage::Present).unwrap();
        assert_abs_diff_eq!(
            g.scalar_value(term.value),
            0.32083333333333336,
            epsilon = 1e-12
        );
    }

    #[test]
    fn lovasz_empty_mask_is_zero_with_flag() {
        let probs = vec![0.5, 0.5];
        let (mut g, t) = probs_graph(2, 1, 1, &probs);
        let term = lovasz_softmax(&mut g, t, &[0], &[false], LovaszAverage::Present).unwrap();
        assert_eq!(g.scalar_value(term.value), 0.0);
        assert!(term.degenerate);
    }

    #[test]
    fn tv_identical_inputs_vanish() {
        let y = vec![0.3, 0.9, 0.1, 0.5];
        let (mut g, t) = probs_graph(1, 2, 2, &y);
        let term = tv_loss(&mut g, t, &y, &[true; 4], &TvConfig::default()).unwrap();
        assert_eq!(g.scalar_value(term.value), 0.0);
    }

    #[test]
    fn tv_constant_images_vanish() {
        let y = vec![0.7; 6];
        let yh = vec![0.2; 6];
        let (mut g, t) = probs_graph(1, 2, 3, &yh);
        let term = tv_loss(&mut g, t, &y, &[true; 6], &TvConfig::default()).unwrap();
        assert_eq!(g.scalar_value(term.value), 0.0);
    }

    #[test]
    fn tv_two_by_two_frozen_oracle() {
        let y = vec![1.0, 0.0, 0.0, 0.0];
        let yh = vec![0.8, 0.1, 0.2, 0.1];
        let (mut g, t) = probs_graph(1, 2, 2, &yh);
        let term = tv_loss(&mut g, t, &y, &[true; 4], &TvConfig::default()).unwrap();
        assert_abs_diff_eq!(g.scalar_value(term.value), 0.2, epsilon = 1e-12);
    }

    #[test]
    fn tv_is_invariant_to_common_additive_constant() {
        let y = vec![0.1, 0.4, 0.9, 0.3, 0.2, 0.8];
        let yh = vec![0.3, 0.1, 0.6, 0.5, 0.9, 0.2];
        let base = {
            let (mut g, t) = probs_graph(1, 2, 3, &yh);
            let term = tv_loss(&mut g, t, &y, &[true; 6], &TvConfig::default()).unwrap();
            g.scalar_value(term.value)
        };
        let shifted = {
            let yc: Vec<f64> = y.iter().map(|v| v + 5.0).collect();
            let yhc: Vec<f64> = yh.iter().map(|v| v + 5.0).collect();
            let (mut g, t) = probs_graph(1, 2, 3, &yhc);
            let term = tv_loss(&mut g, t, &yc, &[true; 6], &TvConfig::default()).unwrap();
            g.scalar_value(term.value)
        };
        assert_abs_diff_eq!(base, shifted, epsilon = 1e-9);
    }

    #[test]
    fn tv_requires_both_endpoints_valid() {
        let y = vec![1.0, 0.0, 0.0, 0.0];
        let yh = vec![0.0, 1.0, 1.0, 1.0];
        let mask = [true, false, false, false];
        let (mut g, t) = probs_graph(1, 2, 2, &yh);
        let term = tv_loss(&mut g, t, &y, &mask, &TvConfig::default()).unwrap();
        // The lone valid pixel has no valid neighbor in any direction.
        assert_eq!(g.scalar_value(term.value), 0.0);
        assert!(term.degenerate);
    }

    #[test]
    fn set_losses_are_permutation_invariant_tv_is_not() {
        let labels = [0u16, 1, 0, 1, 1, 0];
        let probs: Vec<f64> = vec![
            0.9, 0.2, 0.7, 0.4, 0.1, 0.6, // class 0
            0.1, 0.8, 0.3, 0.6, 0.9, 0.4, // class 1
        ];
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted_probs: Vec<f64> = {
            let mut out = vec![0.0; 12];
            for c in 0..2 {
                for (new, &old) in perm.iter().enumerate() {
                    out[c * 6 + new] = probs[c * 6 + old];
                }
            }
            out
        };
        let permuted_labels: Vec<u16> = perm.iter().map(|&o| labels[o]).collect();
        let stats = ClassStats::uniform(2);

        let eval = |pr: &[f64], lb: &[u16]| {
            let (mut g, t) = probs_graph(2, 2, 3, pr);
            let w = wce_loss(&mut g, t, lb, &[true; 6], &stats).unwrap();
            let l = lovasz_softmax(&mut g, t, lb, &[true; 6], LovaszAverage::Present).unwrap();
            let target = one_hot(lb, 2, &[true; 6]);
            let tv = tv_loss(&mut g, t, &target, &[true; 6], &TvConfig::default()).unwrap();
            (
                g.scalar_value(w.value),
                g.scalar_value(l.value),
                g.scalar_value(tv.value),
            )
        };
        let (w0, l0, t0) = eval(&probs, &labels);
        let (w1, l1, t1) = eval(&permuted_probs, &permuted_labels);
        assert_abs_diff_eq!(w0, w1, epsilon = 1e-12);
        assert_abs_diff_eq!(l0, l1, epsilon = 1e-12);
        assert!((t0 - t1).abs() > 1e-6, "tv unexpectedly invariant: {t0} vs {t1}");
    }

    #[test]
    fn total_loss_projections() {
        let labels = [0u16, 1, 1, 0];
        let probs = vec![0.7, 0.4, 0.2, 0.6, 0.3, 0.6, 0.8, 0.4];
        let stats = ClassStats::uniform(2);
        let tv_cfg = TvConfig::default();

        let value_with = |weights: LossWeights| {
            let (mut g, t) = probs_graph(2, 2, 2, &probs);
            let out =
                total_loss(&mut g, t, &labels, &[true; 4], &stats, &weights, &tv_cfg).unwrap();
            (
                g.scalar_value(out.total),
                g.scalar_value(out.wce),
                g.scalar_value(out.lovasz),
                g.scalar_value(out.tv),
            )
        };

        let zero = value_with(LossWeights {
            beta_ls: 0.0,
            beta_wce: 0.0,
            beta_tv: 0.0,
        });
        assert_eq!(zero.0, 0.0);

        let only_wce = value_with(LossWeights {
            beta_ls: 0.0,
            beta_wce: 1.0,
            beta_tv: 0.0,
        });
        assert_abs_diff_eq!(only_wce.0, only_wce.1, epsilon = 1e-12);

        let paper = value_with(LossWeights::default());
        assert_abs_diff_eq!(
            paper.0,
            1.5 * paper.2 + 1.0 * paper.1 + 7.5 * paper.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_suite_passes_on_a_small_sample() {
        // The full 100-instance sweep runs in the acceptance suite; a
        // smaller sample keeps the unit tests quick.
        for report in loss_gradcheck_suite(10, 0xB0B0).unwrap() {
            assert!(
                report.passed(),
                "{} failed: {} >= {}",
                report.name,
                report.max_rel_err,
                report.threshold
            );
        }
    }

    #[test]
    fn losses_are_nonnegative_and_zero_on_perfect() {
        let labels = [1u16, 0, 1, 0];
        let perfect = vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let stats = ClassStats::uniform(2);
        let (mut g, t) = probs_graph(2, 2, 2, &perfect);
        let out = total_loss(
            &mut g,
            t,
            &labels,
            &[true; 4],
            &stats,
            &LossWeights::default(),
            &TvConfig::default(),
        )
        .unwrap();
        assert!(g.scalar_value(out.total) >= 0.0);
        assert!(g.scalar_value(out.total) < 1e-6);
        assert_eq!(g.scalar_value(out.lovasz), 0.0);
        assert_eq!(g.scalar_value(out.tv), 0.0);
    }
}
