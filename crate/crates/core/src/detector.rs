//! Localization grid, box parametrization, edge loss and end-to-end training.
//!
//! Every grid cell proposes one box. The box crops a patch from the image,
//! the prior's encoder maps it to a latent code and the frozen decoder turns
//! that into a mask. Sobel maps of the masks are stitched back, weighted by
//! presence, and compared against the image's own gradient map.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::imgproc::{self, GradientMap, GrayImage};
use crate::ndgrad::{read_container, write_container, Adam, AdamConfig, Conv2dLayer, Graph, Layer, Real, Stack, Tensor, Var, WeightContainer};
use crate::prior::{self, reparameterize, standard_normal, BoundVae, ShapePriorModel};
use crate::shapes::PATCH_SIZE;
use crate::stn::BoxParams;

/// Small constant inside the patch gradient magnitude's square root.
const SOBEL_EPS: f64 = 1e-6;
/// Sobel magnitude of a unit step, used to bring patch gradients to `[0, 1]`.
const SOBEL_UNIT_STEP: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub s_cell: usize,
    pub s_min: f64,
    pub s_max: f64,
    pub r_max: f64,
    /// Edge-loss stabilizer in the denominator.
    pub alpha: f64,
    /// Weight of the per-cell KL, which is summed over latent dimensions.
    /// Larger weights pull a fresh encoder back onto the prior and the
    /// decoded shapes stop following the image.
    pub beta_kl: f64,
    /// Cells at or below this presence are left out of the KL mean.
    pub kl_presence_floor: f64,
    pub input_height: usize,
    pub input_width: usize,
    /// Base width of the localization net.
    pub loc_channels: usize,
    /// Initial bias of the presence output channel.
    pub presence_bias: f64,
    pub truncate_fraction: f32,
    pub equalize: bool,
    pub equalize_factor: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            s_cell: 16,
            s_min: 1.0,
            s_max: 2.0,
            r_max: 1.5,
            alpha: 0.01,
            beta_kl: 1e-4,
            kl_presence_floor: 0.01,
            input_height: 256,
            input_width: 256,
            loc_channels: 16,
            presence_bias: 0.0,
            truncate_fraction: 0.8,
            equalize: false,
            equalize_factor: 1.2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.s_min > 0.0 && self.s_max > self.s_min) {
            return bad(format!("need s_max > s_min > 0, got {} and {}", self.s_min, self.s_max));
        }
        if !(self.r_max >= 1.0) {
            return bad(format!("r_max {} < 1", self.r_max));
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        if !(self.beta_kl >= 0.0) {
            return bad(format!("beta_kl {} must be >= 0", self.beta_kl));
        }
        if self.s_cell == 0 || self.input_height % self.s_cell != 0 || self.input_width % self.s_cell != 0 {
            return bad(format!(
                "input {}x{} is not a multiple of s_cell {}",
                self.input_height, self.input_width, self.s_cell
            ));
        }
        if self.loc_channels == 0 {
            return bad("loc_channels must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_height / self.s_cell, self.input_width / self.s_cell)
    }

    /// Pixel center `(x, y)` of a cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = self.s_cell as f64;
        ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
    }
}

/// Decoded per-cell values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LValues {
    pub presence: f64,
    pub scale: f64,
    pub ratio: f64,
    pub x: f64,
    pub y: f64,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Clamps `v` into the open interval `(lo, hi)`; saturated sigmoids and
/// tanhs otherwise land exactly on a bound.
fn open(v: f64, lo: f64, hi: f64) -> f64 {
    v.clamp(lo.next_up(), hi.next_down())
}

/// Raw features `[presence, scale, ratio, x, y]` to bounded values.
pub fn param_map(f: [f64; 5], cfg: &DetectorConfig) -> LValues {
    LValues {
        presence: open(sigmoid(f[0]), 0.0, 1.0),
        scale: open(sigmoid(f[1]) * (cfg.s_max - cfg.s_min) + cfg.s_min, cfg.s_min, cfg.s_max),
        ratio: (f[2].tanh() * cfg.r_max.ln()).exp().clamp(1.0 / cfg.r_max, cfg.r_max),
        x: open(0.5 * f[3].tanh(), -0.5, 0.5),
        y: open(0.5 * f[4].tanh(), -0.5, 0.5),
    }
}

/// Box of a cell: `H = scale·S/√ratio`, `W = scale·S·√ratio`, offsets `L·S`.
pub fn box_from_params(l: &LValues, cell: (usize, usize), cfg: &DetectorConfig) -> BoxParams {
    let s = cfg.s_cell as f64;
    let (x_cell, y_cell) = cfg.cell_center(cell.0, cell.1);
    let root = l.ratio.sqrt();
    BoxParams {
        cell,
        x_cell,
        y_cell,
        o_x: l.x * s,
        o_y: l.y * s,
        h_obj: l.scale * s / root,
        w_obj: l.scale * s * root,
        presence: l.presence,
    }
}

/// Localization net: pairs of 3x3 convs at widths `c, 2c, 4c, 4c`, each
/// pair followed by 2x2 max pooling, then a 1x1 conv to 5 channels.
pub fn build_localization_net<T: Real, R: Rng + ?Sized>(cfg: &DetectorConfig, rng: &mut R) -> Result<Stack<T>> {
    cfg.validate()?;
    if cfg.s_cell != 16 {
        return Err(Error::Config(format!(
            "the localization net downsamples by 16; s_cell {} is not supported",
            cfg.s_cell
        )));
    }
    let c = cfg.loc_channels;
    let mut layers = Vec::new();
    let mut prev = 1;
    for width in [c, 2 * c, 4 * c, 4 * c] {
        layers.push(Layer::Conv(Conv2dLayer::new(prev, width, 3, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Conv(Conv2dLayer::new(width, width, 3, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool(2));
        prev = width;
    }
    let mut head = Conv2dLayer::new(prev, 5, 1, rng);
    head.bias.data_mut()[0] = T::lit(cfg.presence_bias);
    layers.push(Layer::Conv(head));
    Ok(Stack::new(layers))
}

/// `1 - mean(min(G_img, G_rec)²) / (mean(G_rec) + alpha)`.
pub fn edge_loss<T: Real>(g: &mut Graph<T>, g_image: Var, g_rec: Var, alpha: f64) -> Result<Var> {
    if g.shape(g_image) != g.shape(g_rec) {
        return Err(Error::Shape(format!(
            "edge loss: image map {:?} vs reconstruction {:?}",
            g.shape(g_image),
            g.shape(g_rec)
        )));
    }
    let m = g.min_pairwise(g_image, g_rec)?;
    let m2 = g.square(m)?;
    let num = g.mean(m2);
    let den0 = g.mean(g_rec);
    let den = g.add_scalar(den0, alpha);
    let ratio = g.div(num, den)?;
    let neg = g.neg(ratio)?;
    Ok(g.add_scalar(neg, 1.0))
}

/// Value-level edge loss.
pub fn edge_loss_value(g_image: &[f64], g_rec: &[f64], alpha: f64) -> Result<f64> {
    if g_image.len() != g_rec.len() || g_image.is_empty() {
        return Err(Error::Shape("edge loss maps differ in size".into()));
    }
    let n = g_image.len() as f64;
    let num: f64 = g_image.iter().zip(g_rec).map(|(a, b)| a.min(*b).powi(2)).sum::<f64>() / n;
    let den: f64 = g_rec.iter().sum::<f64>() / n + alpha;
    Ok(1.0 - num / den)
}

/// `edge + beta_kl · mean KL over live cells`; with no live cells the KL
/// term is zero.
pub fn total_loss<T: Real>(g: &mut Graph<T>, edge: Var, kl_cells: Var, presence: &[T], beta_kl: f64, floor: f64) -> Result<Var> {
    let live: Vec<bool> = presence.iter().map(|p| p.f64() > floor).collect();
    let n = live.iter().filter(|&&l| l).count();
    if beta_kl == 0.0 || n == 0 {
        return Ok(edge);
    }
    if g.shape(kl_cells) != [presence.len()] {
        return Err(Error::Shape("kl per cell does not match presence".into()));
    }
    let w = Tensor::new(
        &[presence.len()],
        live.iter().map(|&l| if l { T::lit(1.0 / n as f64) } else { T::zero() }).collect(),
    )?;
    let wv = g.constant(w);
    let weighted = g.mul(kl_cells, wv)?;
    let kl = g.sum(weighted);
    let scaled = g.scale(kl, beta_kl);
    g.add(edge, scaled)
}

/// Localization net plus shape prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T = f32> {
    pub loc: Stack<T>,
    pub prior: ShapePriorModel<T>,
    pub config: DetectorConfig,
}

#[derive(Clone, Debug)]
pub struct BoundDetector {
    pub loc: Vec<Var>,
    pub prior: BoundVae,
}

/// Graph handles of one detector forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[1,5,gh,gw]`
    pub raw: Var,
    /// Each `[M]`, cells row-major.
    pub presence: Var,
    pub scale: Var,
    pub ratio: Var,
    pub x: Var,
    pub y: Var,
    pub h_obj: Var,
    pub w_obj: Var,
    /// `[M,6]`
    pub theta_crop: Var,
    pub theta_stitch: Var,
    /// `[M,1,32,32]`
    pub crops: Var,
    pub mu: Var,
    pub logvar: Var,
    pub decoded: Var,
    pub patch_grad: Var,
    /// `[1,1,H,W]`
    pub canvas: Var,
}

fn const_vec<T: Real>(g: &mut Graph<T>, v: Vec<f64>) -> Var {
    let n = v.len();
    g.constant(Tensor::new(&[n], v.into_iter().map(T::lit).collect()).expect("vector"))
}

/// Sobel magnitude of `[M,1,h,w]` masks with replicate borders, scaled so a
/// unit step gives 1.
pub fn patch_gradient<T: Real>(g: &mut Graph<T>, masks: Var) -> Result<Var> {
    let k = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let kernel = g.constant(Tensor::new(&[2, 1, 3, 3], k.iter().map(|&v| T::lit(v)).collect())?);
    let padded = g.pad_replicate(masks, 1)?;
    let both = g.conv2d(padded, kernel, 1, 0)?;
    let gx = g.channel(both, 0)?;
    let gy = g.channel(both, 1)?;
    let gx2 = g.square(gx)?;
    let gy2 = g.square(gy)?;
    let s = g.add(gx2, gy2)?;
    let s = g.add_scalar(s, SOBEL_EPS);
    let mag = g.sqrt(s)?;
    let mag = g.add_scalar(mag, -SOBEL_EPS.sqrt());
    Ok(g.scale(mag, 1.0 / SOBEL_UNIT_STEP))
}

/// Everything after the localization net: `raw` `[1,5,gh,gw]` features and
/// an `image` `[1,1,H,W]` give boxes, crops, codes, masks and the stitched
/// canvas. `noise` `[M, latent]` selects the reparameterized code; `None`
/// uses the posterior mean.
pub fn forward_from_features<T: Real>(
    g: &mut Graph<T>,
    prior: &ShapePriorModel<T>,
    bound: &BoundVae,
    cfg: &DetectorConfig,
    raw: Var,
    image: Var,
    noise: Option<Tensor<T>>,
) -> Result<ForwardVars> {
    let rs = g.shape(raw).to_vec();
    let is = g.shape(image).to_vec();
    if rs.len() != 4 || rs[0] != 1 || rs[1] != 5 {
        return Err(Error::Shape(format!("raw features {rs:?}, expected [1,5,gh,gw]")));
    }
    if is.len() != 4 || is[0] != 1 || is[1] != 1 {
        return Err(Error::Shape(format!("image {is:?}, expected [1,1,H,W]")));
    }
    let (gh, gw) = (rs[2], rs[3]);
    let (h_img, w_img) = (is[2], is[3]);
    if gh * cfg.s_cell != h_img || gw * cfg.s_cell != w_img {
        return Err(Error::Shape(format!(
            "grid {gh}x{gw} with s_cell {} does not cover image {h_img}x{w_img}",
            cfg.s_cell
        )));
    }
    let m = gh * gw;
    let s = cfg.s_cell as f64;
    let ch = |g: &mut Graph<T>, c: usize| -> Result<Var> {
        let v = g.channel(raw, c)?;
        g.reshape(v, &[m])
    };
    let (fp, fs, fr, fx, fy) = (ch(g, 0)?, ch(g, 1)?, ch(g, 2)?, ch(g, 3)?, ch(g, 4)?);

    let presence = g.sigmoid(fp)?;
    let ss = g.sigmoid(fs)?;
    let scale = g.scale(ss, cfg.s_max - cfg.s_min);
    let scale = g.add_scalar(scale, cfg.s_min);
    let tr = g.tanh(fr)?;
    let log_r = g.scale(tr, cfg.r_max.ln());
    let ratio = g.exp(log_r)?;
    let half = g.scale(tr, 0.5 * cfg.r_max.ln());
    let root = g.exp(half)?;
    let neg_half = g.neg(half)?;
    let inv_root = g.exp(neg_half)?;
    let tx = g.tanh(fx)?;
    let x = g.scale(tx, 0.5);
    let ty = g.tanh(fy)?;
    let y = g.scale(ty, 0.5);

    let w0 = g.mul(scale, root)?;
    let w_obj = g.scale(w0, s);
    let h0 = g.mul(scale, inv_root)?;
    let h_obj = g.scale(h0, s);

    // crop: patch-normalized -> image-normalized
    let (mut cx, mut cy) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for r in 0..gh {
        for c in 0..gw {
            let (xc, yc) = cfg.cell_center(r, c);
            cx.push(xc * 2.0 / w_img as f64 - 1.0);
            cy.push(yc * 2.0 / h_img as f64 - 1.0);
        }
    }
    let sx = g.scale(w_obj, 1.0 / w_img as f64);
    let sy = g.scale(h_obj, 1.0 / h_img as f64);
    let ox = g.scale(x, s * 2.0 / w_img as f64);
    let oy = g.scale(y, s * 2.0 / h_img as f64);
    let cxv = const_vec(g, cx);
    let cyv = const_vec(g, cy);
    let txc = g.add(ox, cxv)?;
    let tyc = g.add(oy, cyv)?;
    let theta_crop = g.affine_from_parts(sx, txc, sy, tyc)?;

    // stitch: the inverse map
    let ones = const_vec(g, vec![1.0; m]);
    let isx = g.div(ones, sx)?;
    let isy = g.div(ones, sy)?;
    let qx = g.div(txc, sx)?;
    let qy = g.div(tyc, sy)?;
    let itx = g.neg(qx)?;
    let ity = g.neg(qy)?;
    let theta_stitch = g.affine_from_parts(isx, itx, isy, ity)?;

    let crops = g.affine_sample(image, theta_crop, PATCH_SIZE, PATCH_SIZE)?;
    let (mu, logvar) = prior.encode(g, crops, bound)?;
    let z = match noise {
        Some(eps) => reparameterize(g, mu, logvar, eps)?,
        None => mu,
    };
    let decoded = prior.decode(g, z, bound)?;
    let patch_grad = patch_gradient(g, decoded)?;
    let canvas = g.stitch(patch_grad, theta_stitch, presence, 1, h_img, w_img)?;
    Ok(ForwardVars {
        raw,
        presence,
        scale,
        ratio,
        x,
        y,
        h_obj,
        w_obj,
        theta_crop,
        theta_stitch,
        crops,
        mu,
        logvar,
        decoded,
        patch_grad,
        canvas,
    })
}

/// Decoded boxes of a finished forward pass, cells row-major.
pub fn boxes_from_forward<T: Real>(g: &Graph<T>, fv: &ForwardVars, cfg: &DetectorConfig) -> Vec<BoxParams> {
    let gw = g.shape(fv.raw)[3];
    let get = |v: Var| g.value(v).data().iter().map(|x| x.f64()).collect::<Vec<_>>();
    let (sc, ra, x, y) = (get(fv.scale), get(fv.ratio), get(fv.x), get(fv.y));
    // Presence from the logit in f64: an f32 sigmoid rounds confident cells
    // to exactly 1 and ties them.
    let m = sc.len();
    let p: Vec<f64> = g.value(fv.raw).data()[..m].iter().map(|f| 1.0 / (1.0 + (-f.f64()).exp())).collect();
    (0..p.len())
        .map(|i| {
            let l = LValues {
                presence: p[i],
                scale: sc[i],
                ratio: ra[i],
                x: x[i],
                y: y[i],
            };
            box_from_params(&l, (i / gw, i % gw), cfg)
        })
        .collect()
}

/// Network input and training target of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub input: GrayImage,
    pub target: GradientMap,
}

/// Resizes to the configured input size, optionally equalizes, and builds
/// the truncated Sobel target.
pub fn preprocess(img: &GrayImage, cfg: &DetectorConfig) -> Result<Prepared> {
    let mut input = if (img.height, img.width) == (cfg.input_height, cfg.input_width) {
        img.clone()
    } else {
        imgproc::resize_bilinear(img, cfg.input_height, cfg.input_width)
    };
    if cfg.equalize {
        input = imgproc::equalize_clip(&input, cfg.equalize_factor)?;
    }
    let target = imgproc::truncate_normalize(&imgproc::sobel_gradient_map(&input)?, cfg.truncate_fraction)?;
    Ok(Prepared { input, target })
}

fn image_tensor<T: Real>(img: &GrayImage) -> Tensor<T> {
    Tensor::new(&[1, 1, img.height, img.width], img.data.iter().map(|&v| T::lit(v as f64)).collect()).expect("image size")
}

/// Scalars of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub edge: f64,
    pub kl: f64,
    pub total: f64,
}

/// Result of running a trained detector on one image.
#[derive(Clone, Debug)]
pub struct Detection {
    pub boxes: Vec<BoxParams>,
    /// `M * 32 * 32` decoded masks, cells row-major.
    pub decoded: Vec<f32>,
    pub canvas: GrayImage,
}

impl<T: Real> Detector<T> {
    pub fn new<R: Rng + ?Sized>(prior: ShapePriorModel<T>, cfg: DetectorConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            loc: build_localization_net(&cfg, rng)?,
            prior,
            config: cfg,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDetector {
        BoundDetector {
            loc: self.loc.bind(g, trainable),
            prior: self.prior.bind(g, trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, b: &BoundDetector, image: Var, noise: Option<Tensor<T>>) -> Result<ForwardVars> {
        let raw = self.loc.forward(g, image, &b.loc)?;
        forward_from_features(g, &self.prior, &b.prior, &self.config, raw, image, noise)
    }

    /// Edge loss, live-cell KL and total loss of a forward pass.
    pub fn losses(&self, g: &mut Graph<T>, fv: &ForwardVars, target: &GradientMap) -> Result<(Var, LossParts)> {
        let tv = g.constant(image_tensor(target));
        let edge = edge_loss(g, tv, fv.canvas, self.config.alpha)?;
        let kl_cells = prior::kl_per_sample(g, fv.mu, fv.logvar)?;
        let presence = g.value(fv.presence).data().to_vec();
        let total = total_loss(g, edge, kl_cells, &presence, self.config.beta_kl, self.config.kl_presence_floor)?;
        let live: Vec<usize> = (0..presence.len()).filter(|&i| presence[i].f64() > self.config.kl_presence_floor).collect();
        let klv = g.value(kl_cells).data();
        let kl = if live.is_empty() {
            0.0
        } else {
            live.iter().map(|&i| klv[i].f64()).sum::<f64>() / live.len() as f64
        };
        let parts = LossParts {
            edge: g.value(edge).item()?.f64(),
            kl,
            total: g.value(total).item()?.f64(),
        };
        Ok((total, parts))
    }

    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.loc.params_mut();
        v.extend(self.prior.trainable_params_mut());
        v
    }

    pub fn trainable_grads(&self, g: &Graph<T>, b: &BoundDetector) -> Vec<Tensor<T>> {
        let mut v: Vec<Tensor<T>> = b.loc.iter().map(|&x| g.grad_tensor(x)).collect();
        v.extend(self.prior.trainable_grads(g, &b.prior));
        v
    }

    /// Inference on a preprocessed input: posterior-mean codes, no noise.
    pub fn detect(&self, input: &GrayImage) -> Result<Detection> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(image_tensor(input));
        let fv = self.forward(&mut g, &b, x, None)?;
        let boxes = boxes_from_forward(&g, &fv, &self.config);
        let decoded = g.value(fv.decoded).data().iter().map(|v| v.f64() as f32).collect();
        let canvas = g.value(fv.canvas).data().iter().map(|v| v.f64() as f32).collect();
        Ok(Detection {
            boxes,
            decoded,
            canvas: GrayImage::new(input.height, input.width, canvas)?,
        })
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        Detector {
            loc: self.loc.cast(),
            prior: self.prior.cast(),
            config: self.config,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            adam: AdamConfig::default(),
            checkpoint_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub edge_loss: f64,
    pub kl: f64,
    pub total: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    /// Total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub decoder_checksum: String,
}

/// Where training writes checkpoints and its JSON-lines log.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

/// Trains the localization net and the prior's encoder on `images`.
/// Refuses to start unless the decoder is frozen and aborts if the decoder
/// checksum ever changes. `noise_rng` supplies reparameterization draws,
/// `data_rng` the epoch order.
pub fn train_detector<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    det: &mut Detector<f32>,
    images: &[Prepared],
    cfg: &DetectorTrainConfig,
    data_rng: &mut R1,
    noise_rng: &mut R2,
    output: Option<&TrainOutput>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<DetectorReport> {
    if !det.prior.frozen_decoder {
        return Err(Error::Config("the shape prior decoder must be frozen before detector training".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    det.config.validate()?;
    for p in images {
        if (p.input.height, p.input.width) != (det.config.input_height, det.config.input_width) {
            return Err(Error::Data(format!(
                "training image {}x{} does not match input size {}x{}",
                p.input.height, p.input.width, det.config.input_height, det.config.input_width
            )));
        }
    }
    let checksum = det.prior.decoder_checksum();
    let mut log = match output {
        Some(o) => {
            std::fs::create_dir_all(&o.dir).map_err(|e| Error::io(&o.dir, e))?;
            let path = o.dir.join("train_log.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let (gh, gw) = det.config.grid();
    let cells = gh * gw;
    let latent = det.prior.config.latent_dim;
    let mut adam = Adam::new(cfg.adam);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut step_losses = Vec::new();
    let mut epochs = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        order.shuffle(data_rng);
        let (mut e_sum, mut k_sum, mut t_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            let mut batch_total = 0.0;
            for &i in batch {
                let noise = standard_normal::<f32, _>(&[cells, latent], noise_rng);
                let mut g = Graph::new();
                let b = det.bind(&mut g, true);
                let x = g.constant(image_tensor(&images[i].input));
                let fv = det.forward(&mut g, &b, x, Some(noise))?;
                let (loss, parts) = det.losses(&mut g, &fv, &images[i].target)?;
                if !parts.total.is_finite() {
                    return Err(Error::Numeric(format!("loss became {} in epoch {epoch}", parts.total)));
                }
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                g.backward(scaled)?;
                let grads = det.trainable_grads(&g, &b);
                drop(g);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += *q;
                            }
                        }
                    }
                }
                batch_total += parts.total / batch.len() as f64;
                e_sum += parts.edge;
                k_sum += parts.kl;
                t_sum += parts.total;
                count += 1;
            }
            let grads = acc.expect("non-empty batch");
            adam.step(&mut det.trainable_params_mut(), &grads)?;
            step_losses.push(batch_total);
        }
        if det.prior.decoder_checksum() != checksum {
            return Err(Error::Numeric("decoder parameters changed during training".into()));
        }
        let entry = EpochLog {
            epoch,
            edge_loss: e_sum / count as f64,
            kl: k_sum / count as f64,
            total: t_sum / count as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some((f, path)) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(o) = output {
            if cfg.checkpoint_every > 0 && (epoch % cfg.checkpoint_every == 0 || epoch == cfg.epochs) {
                save_detector(&o.dir.join(format!("checkpoint_epoch{epoch:03}.bin")), det)?;
            }
        }
        on_epoch(&entry);
        epochs.push(entry);
    }
    Ok(DetectorReport {
        step_losses,
        epochs,
        decoder_checksum: checksum,
    })
}

/// Weight container with the localization net, the full prior and the
/// detector config in the metadata.
pub fn save_detector(path: &Path, det: &Detector<f32>) -> Result<()> {
    let mut c = WeightContainer::new();
    c.metadata.insert("kind".into(), Value::from("detector"));
    c.metadata.insert("detector_config".into(), serde_json::to_value(det.config)?);
    c.metadata.insert("latent_dim".into(), Value::from(det.prior.config.latent_dim));
    c.metadata.insert("base_channels".into(), Value::from(det.prior.config.base_channels));
    c.metadata.insert("frozen_decoder".into(), Value::from(det.prior.frozen_decoder));
    c.metadata.insert(
        "config_hash".into(),
        det.prior.config_hash.clone().map_or(Value::Null, Value::from),
    );
    c.metadata.insert("decoder_checksum".into(), Value::from(det.prior.decoder_checksum()));
    for (name, t) in det.loc.named_params("loc") {
        c.push(name, t.clone());
    }
    for (stack, prefix) in [
        (&det.prior.encoder, "encoder"),
        (&det.prior.mu_head, "mu"),
        (&det.prior.logvar_head, "logvar"),
        (&det.prior.decoder, "decoder"),
    ] {
        for (name, t) in stack.named_params(prefix) {
            c.push(name, t.clone());
        }
    }
    write_container(path, &c)
}

pub fn load_detector(path: &Path) -> Result<Detector<f32>> {
    let c = read_container(path)?;
    let cfg: DetectorConfig = serde_json::from_value(
        c.metadata
            .get("detector_config")
            .cloned()
            .ok_or_else(|| Error::Container(format!("{} is not a detector checkpoint", path.display())))?,
    )?;
    let prior = prior::prior_from_container(&c)?;
    let mut loc = build_localization_net(&cfg, &mut crate::rng::stream(0, "structure"))?;
    prior::load_stack(&mut loc, &c, "loc")?;
    Ok(Detector { loc, prior, config: cfg })
}
