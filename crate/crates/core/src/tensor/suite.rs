//! Finite-difference sweep over every differentiable operator.
//!
//! Each operator is exercised on seeded random instances; the scalar under
//! test is `sum(op(...) * w)` with a fixed random weighting `w` so that
//! every output coordinate receives a distinct upstream gradient.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::grad_check;
use super::{Conv2dCfg, Graph, PaddingMode, Tensor};
use crate::Result;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

const EPS: f64 = 1e-5;
const THRESHOLD: f64 = 1e-4;

fn rng_for(name: &str, instance: u64, seed: u64) -> ChaCha8Rng {
    let tag: u64 = name
        .bytes()
        .fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tag);
    rng.set_stream(instance);
    rng
}

fn fill(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked or singular operators.
fn fill_off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Weighted sum of `t`, with weights supplied as a constant input.
fn weighted_sum(g: &mut Graph<f64>, t: Tensor, weights: &[f64]) -> Result<Tensor> {
    let shape = g.shape(t).to_vec();
    let w = g.input(&shape, weights.to_vec())?;
    let prod = g.mul(t, w)?;
    Ok(g.sum(prod))
}

fn run_case<F>(name: &str, instances: usize, seed: u64, case: F) -> Result<CheckReport>
where
    F: Fn(&mut ChaCha8Rng) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(name, k as u64, seed);
        let err = case(&mut rng)?;
        if err > worst {
            worst = err;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        threshold: THRESHOLD,
    })
}

/// Runs the per-operator sweep; `instances` random cases per operator.
pub fn op_gradcheck_suite(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();

    reports.push(run_case("add", instances, seed, |rng| {
        let shape = vec![3, 4, 5];
        let n = 60;
        let (a, b, w) = (fill(rng, n, -1.0, 1.0), fill(rng, n, -1.0, 1.0), fill(rng, n, -1.0, 1.0));
        grad_check(
            |g, inputs| {
                let s = g.add(inputs[0], inputs[1])?;
                weighted_sum(g, s, &w)
            },
            &[(shape.clone(), a), (shape.clone(), b)],
            EPS,
        )
    })?);

    reports.push(run_case("mul", instances, seed, |rng| {
        let shape = vec![4, 6];
        let n = 24;
        let (a, b, w) = (fill(rng, n, -1.0, 1.0), fill(rng, n, -1.0, 1.0), fill(rng, n, -1.0, 1.0));
        grad_check(
            |g, inputs| {
                let s = g.mul(inputs[0], inputs[1])?;
                weighted_sum(g, s, &w)
            },
            &[(shape.clone(), a), (shape.clone(), b)],
            EPS,
        )
    })?);

    reports.push(run_case("scale", instances, seed, |rng| {
        let shape = vec![2, 3, 4];
        let n = 24;
        let x = fill(rng, n, -1.0, 1.0);
        let w = fill(rng, n, -1.0, 1.0);
        let c = rng.random_range(-2.0..2.0);
        grad_check(
            |g, inputs| {
                let s = g.scale(inputs[0], c);
                weighted_sum(g, s, &w)
            },
            &[(shape.clone(), x)],
            EPS,
        )
    })?);

    reports.push(run_case("add_bias_chw", instances, seed, |rng| {
        let (x, b) = (fill(rng, 2 * 3 * 4, -1.0, 1.0), fill(rng, 2, -1.0, 1.0));
        let w = fill(rng, 24, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.add_bias_chw(inputs[0], inputs[1])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![2, 3, 4], x), (vec![2], b)],
            EPS,
        )
    })?);

    reports.push(run_case("add_bias_rows", instances, seed, |rng| {
        let (x, b) = (fill(rng, 5 * 3, -1.0, 1.0), fill(rng, 3, -1.0, 1.0));
        let w = fill(rng, 15, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.add_bias_rows(inputs[0], inputs[1])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![5, 3], x), (vec![3], b)],
            EPS,
        )
    })?);

    reports.push(run_case("matmul", instances, seed, |rng| {
        let (a, b) = (fill(rng, 4 * 3, -1.0, 1.0), fill(rng, 3 * 5, -1.0, 1.0));
        let w = fill(rng, 20, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.matmul(inputs[0], inputs[1])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![4, 3], a), (vec![3, 5], b)],
            EPS,
        )
    })?);

    let conv_case = |cfg: Conv2dCfg, in_shape: Vec<usize>, k_shape: Vec<usize>| {
        move |rng: &mut ChaCha8Rng| -> Result<f64> {
            let x = fill(rng, in_shape.iter().product(), -1.0, 1.0);
            let k = fill(rng, k_shape.iter().product(), -1.0, 1.0);
            let cfg = cfg.clone();
            // Output size is data independent; compute once to size weights.
            let (ho, wo) = super::conv2d_out_dims(
                (in_shape[1], in_shape[2]),
                (k_shape[2], k_shape[3]),
                &cfg,
            )?;
            let w = fill(rng, k_shape[0] * ho * wo, -1.0, 1.0);
            grad_check(
                |g, inputs| {
                    let s = g.conv2d(inputs[0], inputs[1], cfg.clone())?;
                    weighted_sum(g, s, &w)
                },
                &[(in_shape.clone(), x), (k_shape.clone(), k)],
                EPS,
            )
        }
    };

    reports.push(run_case(
        "conv2d_zero_pad",
        instances,
        seed,
        conv_case(
            Conv2dCfg::same(3, 1, PaddingMode::Zero),
            vec![2, 5, 8],
            vec![3, 2, 3, 3],
        ),
    )?);
    reports.push(run_case(
        "conv2d_circular",
        instances,
        seed,
        conv_case(
            Conv2dCfg::same(3, 1, PaddingMode::Circular),
            vec![2, 5, 8],
            vec![3, 2, 3, 3],
        ),
    )?);
    reports.push(run_case(
        "conv2d_strided",
        instances,
        seed,
        conv_case(
            Conv2dCfg::strided(3, 2, PaddingMode::Circular),
            vec![2, 6, 8],
            vec![2, 2, 3, 3],
        ),
    )?);
    reports.push(run_case(
        "conv2d_dilated",
        instances,
        seed,
        conv_case(
            Conv2dCfg::same(3, 2, PaddingMode::Zero),
            vec![2, 7, 9],
            vec![2, 2, 3, 3],
        ),
    )?);

    reports.push(run_case("circular_pad", instances, seed, |rng| {
        let x = fill(rng, 2 * 3 * 6, -1.0, 1.0);
        let w = fill(rng, 2 * 3 * 10, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.circular_pad(inputs[0], 2)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![2, 3, 6], x)],
            EPS,
        )
    })?);

    reports.push(run_case("leaky_relu", instances, seed, |rng| {
        let x = fill_off_zero(rng, 3 * 4 * 4);
        let w = fill(rng, 48, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.leaky_relu(inputs[0], 0.01);
                weighted_sum(g, s, &w)
            },
            &[(vec![3, 4, 4], x)],
            EPS,
        )
    })?);

    reports.push(run_case("log", instances, seed, |rng| {
        let x = fill(rng, 4 * 5, 0.5, 2.0);
        let w = fill(rng, 20, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.log(inputs[0]);
                weighted_sum(g, s, &w)
            },
            &[(vec![4, 5], x)],
            EPS,
        )
    })?);

    reports.push(run_case("softmax_chw", instances, seed, |rng| {
        let x = fill(rng, 5 * 3 * 4, -2.0, 2.0);
        let w = fill(rng, 60, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.softmax_chw(inputs[0])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![5, 3, 4], x)],
            EPS,
        )
    })?);

    reports.push(run_case("concat_channels", instances, seed, |rng| {
        let (a, b) = (fill(rng, 2 * 3 * 4, -1.0, 1.0), fill(rng, 3 * 3 * 4, -1.0, 1.0));
        let w = fill(rng, 5 * 3 * 4, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.concat_channels(&[inputs[0], inputs[1]])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![2, 3, 4], a), (vec![3, 3, 4], b)],
            EPS,
        )
    })?);

    reports.push(run_case("concat_cols", instances, seed, |rng| {
        let (a, b) = (fill(rng, 4 * 2, -1.0, 1.0), fill(rng, 4 * 3, -1.0, 1.0));
        let w = fill(rng, 4 * 5, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.concat_cols(&[inputs[0], inputs[1]])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![4, 2], a), (vec![4, 3], b)],
            EPS,
        )
    })?);

    reports.push(run_case("upsample_nearest2", instances, seed, |rng| {
        let x = fill(rng, 2 * 3 * 4, -1.0, 1.0);
        let w = fill(rng, 2 * 6 * 8, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.upsample_nearest2(inputs[0])?;
                weighted_sum(g, s, &w)
            },
            &[(vec![2, 3, 4], x)],
            EPS,
        )
    })?);

    reports.push(run_case("max_pool_groups", instances, seed, |rng| {
        let n = 12;
        let x = fill(rng, n * 3, -1.0, 1.0);
        let groups: Rc<Vec<Option<usize>>> = Rc::new(
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        None
                    } else {
                        Some(rng.random_range(0..4))
                    }
                })
                .collect(),
        );
        let w = fill(rng, 4 * 3, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.max_pool_groups(inputs[0], &groups, 4)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![n, 3], x)],
            EPS,
        )
    })?);

    reports.push(run_case("mean_pool_groups", instances, seed, |rng| {
        let n = 12;
        let x = fill(rng, n * 3, -1.0, 1.0);
        let groups: Rc<Vec<Option<usize>>> = Rc::new(
            (0..n)
                .map(|_| {
                    if rng.random_bool(0.2) {
                        None
                    } else {
                        Some(rng.random_range(0..4))
                    }
                })
                .collect(),
        );
        let w = fill(rng, 4 * 3, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.mean_pool_groups(inputs[0], &groups, 4)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![n, 3], x)],
            EPS,
        )
    })?);

    reports.push(run_case("scatter_rows_to_grid", instances, seed, |rng| {
        let rows = 5;
        let x = fill(rng, rows * 2, -1.0, 1.0);
        let mut cells: Vec<usize> = (0..12).collect();
        for i in 0..rows {
            let j = rng.random_range(i..12);
            cells.swap(i, j);
        }
        let cells = Rc::new(cells[..rows].to_vec());
        let w = fill(rng, 2 * 3 * 4, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.scatter_rows_to_grid(inputs[0], &cells, (3, 4))?;
                weighted_sum(g, s, &w)
            },
            &[(vec![rows, 2], x)],
            EPS,
        )
    })?);

    reports.push(run_case("gather_rows", instances, seed, |rng| {
        let x = fill(rng, 3 * 3 * 4, -1.0, 1.0);
        let index: Rc<Vec<Option<usize>>> = Rc::new(
            (0..8)
                .map(|_| {
                    if rng.random_bool(0.25) {
                        None
                    } else {
                        Some(rng.random_range(0..12))
                    }
                })
                .collect(),
        );
        let w = fill(rng, 8 * 3, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.gather_rows(inputs[0], &index)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![3, 3, 4], x)],
            EPS,
        )
    })?);

    reports.push(run_case("scatter_winners", instances, seed, |rng| {
        let x = fill(rng, 6 * 3, -1.0, 1.0);
        let winners: Rc<Vec<Option<usize>>> = Rc::new(
            (0..12)
                .map(|_| {
                    if rng.random_bool(0.4) {
                        None
                    } else {
                        Some(rng.random_range(0..6))
                    }
                })
                .collect(),
        );
        let w = fill(rng, 3 * 3 * 4, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.scatter_winners(inputs[0], &winners, (3, 4))?;
                weighted_sum(g, s, &w)
            },
            &[(vec![6, 3], x)],
            EPS,
        )
    })?);

    reports.push(run_case("batch_norm_train", instances, seed, |rng| {
        let x = fill(rng, 3 * 4 * 5, -1.0, 1.0);
        let gamma = fill(rng, 3, 0.5, 1.5);
        let beta = fill(rng, 3, -0.5, 0.5);
        let w = fill(rng, 60, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let (s, _) = g.batch_norm_train(inputs[0], inputs[1], inputs[2], 1e-5)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![3, 4, 5], x), (vec![3], gamma), (vec![3], beta)],
            EPS,
        )
    })?);

    reports.push(run_case("batch_norm_eval", instances, seed, |rng| {
        let x = fill(rng, 3 * 4 * 5, -1.0, 1.0);
        let gamma = fill(rng, 3, 0.5, 1.5);
        let beta = fill(rng, 3, -0.5, 0.5);
        let mean = fill(rng, 3, -0.2, 0.2);
        let var = fill(rng, 3, 0.5, 1.5);
        let w = fill(rng, 60, -1.0, 1.0);
        grad_check(
            |g, inputs| {
                let s = g.batch_norm_eval(inputs[0], inputs[1], inputs[2], &mean, &var, 1e-5)?;
                weighted_sum(g, s, &w)
            },
            &[(vec![3, 4, 5], x), (vec![3], gamma), (vec![3], beta)],
            EPS,
        )
    })?);

    reports.push(run_case("conv_relu_sum_composite", instances, seed, |rng| {
        let x = fill(rng, 2 * 5 * 8, -1.0, 1.0);
        let k = fill(rng, 3 * 2 * 3 * 3, -1.0, 1.0);
        let b = fill(rng, 3, -0.5, 0.5);
        grad_check(
            |g, inputs| {
                let cfg = Conv2dCfg::same(3, 1, PaddingMode::Circular);
                let c = g.conv2d(inputs[0], inputs[1], cfg)?;
                let c = g.add_bias_chw(c, inputs[2])?;
                let r = g.leaky_relu(c, 0.01);
                Ok(g.sum(r))
            },
            &[
                (vec![2, 5, 8], x),
                (vec![3, 2, 3, 3], k),
                (vec![3], b),
            ],
            EPS,
        )
    })?);

    Ok(reports)
}
