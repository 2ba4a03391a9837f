//! The segmentation network: pillar feature learning on the BEV grid, a
//! multi-kernel context block on the range image, and a dilated
//! encoder-decoder, all fully convolutional.
//!
//! Data path per frame:
//!
//! 1. points + normalized pillar offsets -> shared FC -> per-pillar FC ->
//!    max pool per pillar -> BEV conv stack (2x strided down, 2x nearest-up)
//!    -> gather back to points -> concat with the point features
//! 2. the learned per-point features are projected onto the range image
//!    (smallest range wins each pixel)
//! 3. context block: three blocks of parallel 3x3/5x5/7x7 convolutions
//!    (summed), a 1x1 skip from the module input added after block two, and
//!    block three concatenated with a 1x1 skip of its own input
//! 4. encoder-decoder with residual blocks (dilations 1 and 2), strided
//!    downsampling to 1/16 resolution, nearest-neighbor upsampling, and
//!    additive encoder skips; a final 1x1 conv yields per-pixel logits
//! 5. per-point logits are gathered back through the pixel map
//!
//! All range-image convolutions pad circularly along the width to respect
//! the 360° horizontal field of view; BEV convolutions zero-pad.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::pointcloud::PointCloud;
use crate::projection::{
    bev_cell_of_point, pillar_assign, project_winners, PillarGrid, PillarGridConfig,
    PointPixelMap, SphericalConfig,
};
use crate::tensor::{Conv2dCfg, Graph, PaddingMode, Scalar, Tensor};
use crate::{Error, Result};

/// Structural hyperparameters. The parameter count is a pure function of
/// everything here except `spherical.width` / `spherical.height` (the
/// network is fully convolutional).
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    /// Encoder base channel count; stages run C, 2C, 4C, 8C, 16C.
    pub base_channels: usize,
    /// Raw per-point features: x, y, z, remission + 3 pillar offsets.
    pub point_features: usize,
    /// Learned per-point channels projected onto the range image.
    pub projected_channels: usize,
    pub num_classes: usize,
    pub spherical: SphericalConfig,
    pub pillar: PillarGridConfig,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ModelConfig {
    /// Full-scale defaults: C = 64, 7 point features, 192 projected
    /// channels, a 64 x 2048 range image and a 512 x 512 pillar grid.
    pub fn paper_default() -> Self {
        Self {
            base_channels: 64,
            point_features: 7,
            projected_channels: 192,
            num_classes: 19,
            spherical: SphericalConfig::default(),
            pillar: PillarGridConfig::paper_default(),
            leaky_slope: 0.01,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
        }
    }

    /// Small configuration for tests and the synthetic training task.
    pub fn toy(
        base_channels: usize,
        projected_channels: usize,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let cfg = Self {
            base_channels,
            point_features: 7,
            projected_channels,
            num_classes,
            spherical: SphericalConfig::new(width, height, 3.0, 25.0)?,
            pillar: PillarGridConfig::new((1.6, 1.6, 10.0), (-25.6, -25.6, -5.0), (32, 32))?,
            leaky_slope: 0.01,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Divides the channel widths by `divisor` (at least 2 channels remain,
    /// rounded to even for the projected features).
    pub fn scaled_down(mut self, divisor: usize) -> Result<Self> {
        if divisor == 0 {
            return Err(Error::config("scale divisor must be >= 1"));
        }
        self.base_channels = (self.base_channels / divisor).max(2);
        self.projected_channels = ((self.projected_channels / divisor).max(2) / 2) * 2;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.spherical.height, self.spherical.width);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::contract(format!(
                "range image {h} x {w} must be divisible by 16"
            )));
        }
        if w / 16 < 3 {
            return Err(Error::contract(
                "range image width must be at least 48: the dilated bottleneck convolutions need 3 columns",
            ));
        }
        if self.projected_channels % 2 != 0 || self.projected_channels < 2 {
            return Err(Error::contract(
                "projected_channels must be even (point/pillar split)",
            ));
        }
        if self.point_features != 7 {
            return Err(Error::contract(
                "point_features must be 7: x, y, z, remission + 3 pillar offsets",
            ));
        }
        if self.base_channels < 1 || self.num_classes < 2 {
            return Err(Error::contract("need base_channels >= 1, num_classes >= 2"));
        }
        if self.pillar.dims.0 % 4 != 0 || self.pillar.dims.1 % 4 != 0 {
            return Err(Error::contract(
                "pillar grid dims must be divisible by 4 for the BEV conv stack",
            ));
        }
        Ok(())
    }

    fn half_projected(&self) -> usize {
        self.projected_channels / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Running statistics; saved in checkpoints, never optimized.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub kind: ParamKind,
}

/// Named parameter collection with deterministic (insertion) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    params: HashMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<T>, kind: ParamKind) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.params.insert(name.to_string(), Param { shape, data, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.names
            .iter()
            .map(|n| (n.as_str(), &self.params[n.as_str()]))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| p.data.len())
            .sum()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let entries: Vec<(String, Vec<usize>, &[T])> = self
            .iter()
            .map(|(n, p)| (n.to_string(), p.shape.clone(), p.data.as_slice()))
            .collect();
        crate::checkpoint::save(path, &entries)
    }

    /// Loads values into the existing (already-built) store; every stored
    /// tensor must match a known parameter's shape.
    pub fn load(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let entries = crate::checkpoint::load(path)?;
        for e in entries {
            let param = self.get_mut(&e.name)?;
            if param.shape != e.shape {
                return Err(Error::contract(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    e.name, e.shape, param.shape
                )));
            }
            param.data = e.data.iter().map(|&v| T::from_f64(v)).collect();
        }
        Ok(())
    }
}

/// Everything the forward pass produces for one frame.
pub struct ForwardOut {
    /// `[num_classes, H, W]` logits on the range image.
    pub pixel_logits: Tensor,
    /// `[N, num_classes]` per-point logits; points sharing a pixel share
    /// logits.
    pub point_logits: Tensor,
    pub pixel_map: PointPixelMap,
    pub winner: Rc<Vec<Option<usize>>>,
    pub valid_mask: Vec<bool>,
    /// Per-point range, meters.
    pub ranges: Vec<f64>,
    /// Graph handles of every parameter touched, insertion order.
    pub param_handles: Vec<(String, Tensor)>,
}

pub struct TornadoNet<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

/// Per-forward bookkeeping: inserts each parameter into the graph once and
/// remembers the handle so gradients can be read back by name.
struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    params: &'a mut ParamStore<T>,
    handles: Vec<(String, Tensor)>,
    handle_index: HashMap<String, Tensor>,
    train: bool,
    slope: f64,
    bn_eps: f64,
    bn_momentum: f64,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    fn p(&mut self, name: &str) -> Result<Tensor> {
        if let Some(&t) = self.handle_index.get(name) {
            return Ok(t);
        }
        let param = self.params.get(name)?;
        let t = match param.kind {
            ParamKind::Trainable => self.g.param(&param.shape, param.data.clone())?,
            ParamKind::Buffer => self.g.input(&param.shape, param.data.clone())?,
        };
        self.handles.push((name.to_string(), t));
        self.handle_index.insert(name.to_string(), t);
        Ok(t)
    }

    fn act(&mut self, x: Tensor) -> Tensor {
        self.g.leaky_relu(x, self.slope)
    }

    /// FC layer with bias: `[N, in] -> [N, out]`.
    fn fc(&mut self, x: Tensor, name: &str) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add_bias_rows(y, b)
    }

    /// Convolution with bias (used where no batch norm follows).
    fn conv_bias(&mut self, x: Tensor, name: &str, cfg: Conv2dCfg) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let y = self.g.conv2d(x, w, cfg)?;
        self.g.add_bias_chw(y, b)
    }

    /// Bias-free convolution (batch norm follows).
    fn conv(&mut self, x: Tensor, name: &str, cfg: Conv2dCfg) -> Result<Tensor> {
        let w = self.p(&format!("{name}.weight"))?;
        self.g.conv2d(x, w, cfg)
    }

    fn bn(&mut self, x: Tensor, name: &str) -> Result<Tensor> {
        let gamma = self.p(&format!("{name}.gamma"))?;
        let beta = self.p(&format!("{name}.beta"))?;
        if self.train {
            let (y, stats) = self.g.batch_norm_train(x, gamma, beta, self.bn_eps)?;
            let m = T::from_f64(self.bn_momentum);
            let one_m = T::from_f64(1.0 - self.bn_momentum);
            let mean = self.params.get_mut(&format!("{name}.running_mean"))?;
            for (r, &b) in mean.data.iter_mut().zip(&stats.mean) {
                *r = m * *r + one_m * b;
            }
            let var = self.params.get_mut(&format!("{name}.running_var"))?;
            for (r, &b) in var.data.iter_mut().zip(&stats.var) {
                *r = m * *r + one_m * b;
            }
            Ok(y)
        } else {
            let mean = self.params.get(&format!("{name}.running_mean"))?.data.clone();
            let var = self.params.get(&format!("{name}.running_var"))?.data.clone();
            self.g
                .batch_norm_eval(x, gamma, beta, &mean, &var, self.bn_eps)
        }
    }

    /// conv -> bn -> activation.
    fn cba(&mut self, x: Tensor, name: &str, cfg: Conv2dCfg) -> Result<Tensor> {
        let y = self.conv(x, name, cfg)?;
        let y = self.bn(y, &format!("{name}.bn"))?;
        Ok(self.act(y))
    }

    /// Residual block: two 3x3 convolutions with dilations 1 and 2 and an
    /// additive skip.
    fn res_block(&mut self, x: Tensor, name: &str) -> Result<Tensor> {
        let c1 = self.conv(
            x,
            &format!("{name}.conv1"),
            Conv2dCfg::same(3, 1, PaddingMode::Circular),
        )?;
        let b1 = self.bn(c1, &format!("{name}.bn1"))?;
        let a1 = self.act(b1);
        let c2 = self.conv(
            a1,
            &format!("{name}.conv2"),
            Conv2dCfg::same(3, 2, PaddingMode::Circular),
        )?;
        let b2 = self.bn(c2, &format!("{name}.bn2"))?;
        let s = self.g.add(b2, x)?;
        Ok(self.act(s))
    }

    /// Parallel 3x3 + 5x5 + 7x7 convolutions summed, then normalized and
    /// activated.
    fn diamond_block(&mut self, x: Tensor, name: &str) -> Result<Tensor> {
        let c3 = self.conv(
            x,
            &format!("{name}.conv3"),
            Conv2dCfg::same(3, 1, PaddingMode::Circular),
        )?;
        let c5 = self.conv(
            x,
            &format!("{name}.conv5"),
            Conv2dCfg::same(5, 1, PaddingMode::Circular),
        )?;
        let c7 = self.conv(
            x,
            &format!("{name}.conv7"),
            Conv2dCfg::same(7, 1, PaddingMode::Circular),
        )?;
        let s = self.g.add(c3, c5)?;
        let s = self.g.add(s, c7)?;
        let b = self.bn(s, &format!("{name}.bn"))?;
        Ok(self.act(b))
    }
}

impl<T: Scalar> TornadoNet<T> {
    /// Builds the network with Kaiming-uniform weights (fan-in, leaky gain),
    /// zero biases, unit batch-norm scales.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope)).sqrt();

        let weight = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>| {
            let fan_in: usize = shape[1..].iter().product();
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| T::from_f64((2.0 * rng.random::<f64>() - 1.0) * bound))
                .collect();
            store.insert(name, shape, data, ParamKind::Trainable);
        };
        let bias = |store: &mut ParamStore<T>, name: &str, n: usize| {
            store.insert(name, vec![n], vec![T::zero(); n], ParamKind::Trainable);
        };
        let bn = |store: &mut ParamStore<T>, name: &str, n: usize| {
            store.insert(&format!("{name}.gamma"), vec![n], vec![T::one(); n], ParamKind::Trainable);
            store.insert(&format!("{name}.beta"), vec![n], vec![T::zero(); n], ParamKind::Trainable);
            store.insert(
                &format!("{name}.running_mean"),
                vec![n],
                vec![T::zero(); n],
                ParamKind::Buffer,
            );
            store.insert(
                &format!("{name}.running_var"),
                vec![n],
                vec![T::one(); n],
                ParamKind::Buffer,
            );
        };

        let cd = cfg.projected_channels;
        let half = cfg.half_projected();
        let c = cfg.base_channels;

        // Pillar feature path.
        weight(&mut params, &mut rng, "ppl.fc1.weight", vec![cfg.point_features, half]);
        bias(&mut params, "ppl.fc1.bias", half);
        weight(&mut params, &mut rng, "ppl.fc2.weight", vec![half, half]);
        bias(&mut params, "ppl.fc2.bias", half);
        for name in ["ppl.bev1", "ppl.bev2", "ppl.up1", "ppl.up2"] {
            weight(&mut params, &mut rng, &format!("{name}.weight"), vec![half, half, 3, 3]);
            bias(&mut params, &format!("{name}.bias"), half);
        }

        // Context block.
        for block in ["dcb.b1", "dcb.b2", "dcb.b3"] {
            for k in [3usize, 5, 7] {
                weight(
                    &mut params,
                    &mut rng,
                    &format!("{block}.conv{k}.weight"),
                    vec![cd, cd, k, k],
                );
            }
            bn(&mut params, &format!("{block}.bn"), cd);
        }
        for skip in ["dcb.skip1", "dcb.skip2"] {
            weight(&mut params, &mut rng, &format!("{skip}.weight"), vec![cd, cd, 1, 1]);
            bias(&mut params, &format!("{skip}.bias"), cd);
        }

        // Encoder-decoder.
        weight(&mut params, &mut rng, "enc.stem.weight", vec![c, 2 * cd, 3, 3]);
        bn(&mut params, "enc.stem.bn", c);
        let mut ch = c;
        for s in 1..=4 {
            for conv in ["conv1", "conv2"] {
                weight(
                    &mut params,
                    &mut rng,
                    &format!("enc{s}.res.{conv}.weight"),
                    vec![ch, ch, 3, 3],
                );
            }
            bn(&mut params, &format!("enc{s}.res.bn1"), ch);
            bn(&mut params, &format!("enc{s}.res.bn2"), ch);
            weight(&mut params, &mut rng, &format!("enc{s}.down.weight"), vec![2 * ch, ch, 3, 3]);
            bn(&mut params, &format!("enc{s}.down.bn"), 2 * ch);
            ch *= 2;
        }
        for conv in ["conv1", "conv2"] {
            weight(&mut params, &mut rng, &format!("mid.res.{conv}.weight"), vec![ch, ch, 3, 3]);
        }
        bn(&mut params, "mid.res.bn1", ch);
        bn(&mut params, "mid.res.bn2", ch);
        for s in (1..=4).rev() {
            weight(&mut params, &mut rng, &format!("dec{s}.conv.weight"), vec![ch / 2, ch, 3, 3]);
            bn(&mut params, &format!("dec{s}.conv.bn"), ch / 2);
            ch /= 2;
            for conv in ["conv1", "conv2"] {
                weight(
                    &mut params,
                    &mut rng,
                    &format!("dec{s}.res.{conv}.weight"),
                    vec![ch, ch, 3, 3],
                );
            }
            bn(&mut params, &format!("dec{s}.res.bn1"), ch);
            bn(&mut params, &format!("dec{s}.res.bn2"), ch);
        }
        weight(&mut params, &mut rng, "head.weight", vec![cfg.num_classes, c, 1, 1]);
        bias(&mut params, "head.bias", cfg.num_classes);

        Ok(Self { cfg, params })
    }

    fn ctx<'a>(&'a mut self, g: &'a mut Graph<T>, train: bool) -> Ctx<'a, T> {
        Ctx {
            g,
            params: &mut self.params,
            handles: Vec::new(),
            handle_index: HashMap::new(),
            train,
            slope: self.cfg.leaky_slope,
            bn_eps: self.cfg.bn_eps,
            bn_momentum: self.cfg.bn_momentum,
        }
    }

    /// Number of trainable scalars; independent of the range-image size.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Full forward pass on one frame.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        cloud: &PointCloud,
        train: bool,
    ) -> Result<ForwardOut> {
        if cloud.is_empty() {
            return Err(Error::contract("forward: empty point cloud"));
        }
        let cfg = self.cfg;
        let grid = pillar_assign(cloud, &cfg.pillar);
        let (pixel_map, winner, ranges) = project_winners(cloud, &cfg.spherical);
        let winner = Rc::new(winner);
        let valid_mask: Vec<bool> = winner.iter().map(|w| w.is_some()).collect();

        let mut ctx = self.ctx(g, train);
        let point_features = ppl_stage(&mut ctx, cloud, &grid)?;
        let projected = ctx.g.scatter_winners(
            point_features,
            &winner,
            (cfg.spherical.height, cfg.spherical.width),
        )?;
        let context = dcb_stage(&mut ctx, projected)?;
        let pixel_logits = encdec_stage(&mut ctx, context)?;

        let pixel_of_point: Rc<Vec<Option<usize>>> = Rc::new(
            (0..cloud.len())
                .map(|i| pixel_map.pixel(i, cfg.spherical.width))
                .collect(),
        );
        let point_logits = ctx.g.gather_rows(pixel_logits, &pixel_of_point)?;
        let handles = ctx.handles;

        Ok(ForwardOut {
            pixel_logits,
            point_logits,
            pixel_map,
            winner,
            valid_mask,
            ranges,
            param_handles: handles,
        })
    }
}

/// Per-point feature extraction through the pillar grid; returns `[N, C_D]`.
fn ppl_stage<T: Scalar>(
    ctx: &mut Ctx<'_, T>,
    cloud: &PointCloud,
    grid: &PillarGrid,
) -> Result<Tensor> {
    let n = cloud.len();
    let mut feats = Vec::with_capacity(n * 7);
    for i in 0..n {
        feats.push(T::from_f64(cloud.xyz[i][0] as f64));
        feats.push(T::from_f64(cloud.xyz[i][1] as f64));
        feats.push(T::from_f64(cloud.xyz[i][2] as f64));
        feats.push(T::from_f64(cloud.remission[i] as f64));
        for a in 0..3 {
            feats.push(T::from_f64(grid.offsets[i][a]));
        }
    }
    let x = ctx.g.input(&[n, 7], feats)?;
    let h1 = ctx.fc(x, "ppl.fc1")?;
    let h1 = ctx.act(h1);
    let h2 = ctx.fc(h1, "ppl.fc2")?;
    let h2 = ctx.act(h2);

    let groups = Rc::new(grid.group_of_point.clone());
    let pooled = ctx.g.max_pool_groups(h2, &groups, grid.num_occupied())?;
    let (gx, gy) = grid.cfg.dims;
    let cells: Rc<Vec<usize>> = Rc::new(
        grid.occupied
            .iter()
            .map(|&cell| (cell % gx) * gy + cell / gx)
            .collect(),
    );
    let bev = ctx.g.scatter_rows_to_grid(pooled, &cells, (gx, gy))?;

    let down = Conv2dCfg::strided(3, 2, PaddingMode::Zero);
    let same = Conv2dCfg::same(3, 1, PaddingMode::Zero);
    let d1 = ctx.conv_bias(bev, "ppl.bev1", down.clone())?;
    let d1 = ctx.act(d1);
    let d2 = ctx.conv_bias(d1, "ppl.bev2", down)?;
    let d2 = ctx.act(d2);
    let u1 = ctx.g.upsample_nearest2(d2)?;
    let u1 = ctx.conv_bias(u1, "ppl.up1", same.clone())?;
    let u1 = ctx.act(u1);
    let u2 = ctx.g.upsample_nearest2(u1)?;
    let u2 = ctx.conv_bias(u2, "ppl.up2", same)?;
    let u2 = ctx.act(u2);

    let cell_of_point = Rc::new(bev_cell_of_point(grid));
    let gathered = ctx.g.gather_rows(u2, &cell_of_point)?;
    ctx.g.concat_cols(&[h1, gathered])
}

/// Context block; `[C_D, H, W] -> [2*C_D, H, W]`.
fn dcb_stage<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Tensor) -> Result<Tensor> {
    let d1 = ctx.diamond_block(x, "dcb.b1")?;
    let d2 = ctx.diamond_block(d1, "dcb.b2")?;
    let one = Conv2dCfg::same(1, 1, PaddingMode::Circular);
    let skip1 = ctx.conv_bias(x, "dcb.skip1", one.clone())?;
    let z2 = ctx.g.add(d2, skip1)?;
    let d3 = ctx.diamond_block(z2, "dcb.b3")?;
    let skip2 = ctx.conv_bias(z2, "dcb.skip2", one)?;
    ctx.g.concat_channels(&[d3, skip2])
}

/// Encoder-decoder; `[2*C_D, H, W] -> [num_classes, H, W]`.
fn encdec_stage<T: Scalar>(ctx: &mut Ctx<'_, T>, x: Tensor) -> Result<Tensor> {
    let mut x = ctx.cba(x, "enc.stem", Conv2dCfg::same(3, 1, PaddingMode::Circular))?;
    let mut skips = Vec::with_capacity(4);
    for s in 1..=4 {
        let r = ctx.res_block(x, &format!("enc{s}.res"))?;
        skips.push(r);
        x = ctx.cba(
            r,
            &format!("enc{s}.down"),
            Conv2dCfg::strided(3, 2, PaddingMode::Circular),
        )?;
    }
    x = ctx.res_block(x, "mid.res")?;
    for s in (1..=4).rev() {
        let up = ctx.g.upsample_nearest2(x)?;
        let up = ctx.cba(
            up,
            &format!("dec{s}.conv"),
            Conv2dCfg::same(3, 1, PaddingMode::Circular),
        )?;
        let merged = ctx.g.add(up, skips[s - 1])?;
        x = ctx.res_block(merged, &format!("dec{s}.res"))?;
    }
    ctx.conv_bias(x, "head", Conv2dCfg::same(1, 1, PaddingMode::Circular))
}

/// Standalone pillar stage for tests and inspection.
pub fn ppl_forward<T: Scalar>(
    net: &mut TornadoNet<T>,
    g: &mut Graph<T>,
    cloud: &PointCloud,
    grid: &PillarGrid,
    train: bool,
) -> Result<Tensor> {
    let mut ctx = net.ctx(g, train);
    ppl_stage(&mut ctx, cloud, grid)
}

/// Standalone context block for tests and inspection.
pub fn dcb_forward<T: Scalar>(
    net: &mut TornadoNet<T>,
    g: &mut Graph<T>,
    x: Tensor,
    train: bool,
) -> Result<Tensor> {
    let mut ctx = net.ctx(g, train);
    dcb_stage(&mut ctx, x)
}

/// Standalone encoder-decoder for tests and inspection.
pub fn encdec_forward<T: Scalar>(
    net: &mut TornadoNet<T>,
    g: &mut Graph<T>,
    x: Tensor,
    train: bool,
) -> Result<Tensor> {
    let mut ctx = net.ctx(g, train);
    encdec_stage(&mut ctx, x)
}

/// Writes a small text manifest describing the configuration next to a
/// checkpoint.
pub fn write_manifest(path: impl AsRef<std::path::Path>, cfg: &ModelConfig) -> Result<()> {
    let text = format!(
        "base_channels {}\npoint_features {}\nprojected_channels {}\nnum_classes {}\n\
         height {}\nwidth {}\nfov_up_deg {}\nfov_down_deg {}\n\
         pillar_voxel {} {} {}\npillar_origin {} {} {}\npillar_dims {} {}\n\
         leaky_slope {}\nbn_momentum {}\nbn_eps {}\n",
        cfg.base_channels,
        cfg.point_features,
        cfg.projected_channels,
        cfg.num_classes,
        cfg.spherical.height,
        cfg.spherical.width,
        cfg.spherical.fov_up.to_degrees(),
        cfg.spherical.fov_down.to_degrees(),
        cfg.pillar.voxel_size.0,
        cfg.pillar.voxel_size.1,
        cfg.pillar.voxel_size.2,
        cfg.pillar.origin.0,
        cfg.pillar.origin.1,
        cfg.pillar.origin.2,
        cfg.pillar.dims.0,
        cfg.pillar.dims.1,
        cfg.leaky_slope,
        cfg.bn_momentum,
        cfg.bn_eps
    );
    std::fs::write(path.as_ref(), text).map_err(|source| Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    })
}
