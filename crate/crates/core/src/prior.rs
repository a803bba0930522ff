//! VAE shape prior over `32 x 32` masks. After pretraining the decoder is
//! frozen and serves as the shape model; the encoder is reinitialized and
//! trained together with the detector.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::mask_iou;
use crate::ndgrad::{
    read_container, write_container, Adam, AdamConfig, Conv2dLayer, DenseLayer, Graph, Layer, Real, Stack, Tensor, Var,
    WeightContainer,
};
use crate::shapes::{ShapePatch, PATCH_SIZE};

/// Lower and upper probability clamp of the reconstruction cross-entropy.
pub const BCE_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub base_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            base_channels: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapePriorModel<T = f32> {
    /// Conv/pool trunk ending in a flatten to `[N, 16 * 4c]`.
    pub encoder: Stack<T>,
    pub mu_head: Stack<T>,
    pub logvar_head: Stack<T>,
    pub decoder: Stack<T>,
    pub config: VaeConfig,
    pub frozen_decoder: bool,
    /// Hash of the pretraining configuration, if known.
    pub config_hash: Option<String>,
}

/// Graph handles of a model's parameters.
#[derive(Clone, Debug)]
pub struct BoundVae {
    pub encoder: Vec<Var>,
    pub mu_head: Vec<Var>,
    pub logvar_head: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl BoundVae {
    /// Encoder-side handles in [`ShapePriorModel::encoder_params`] order.
    pub fn encoder_vars(&self) -> Vec<Var> {
        [&self.encoder, &self.mu_head, &self.logvar_head].into_iter().flatten().copied().collect()
    }
}

fn encoder_stacks<T: Real, R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> (Stack<T>, Stack<T>, Stack<T>) {
    let c = cfg.base_channels;
    let mut layers = Vec::new();
    let mut prev = 1;
    for width in [c, 2 * c, 4 * c] {
        layers.push(Layer::Conv(Conv2dLayer::new(prev, width, 3, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Conv(Conv2dLayer::new(width, width, 3, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool(2));
        prev = width;
    }
    let flat = 4 * c * (PATCH_SIZE / 8) * (PATCH_SIZE / 8);
    layers.push(Layer::Reshape(vec![flat]));
    let mu = Stack::new(vec![Layer::Dense(DenseLayer::new(flat, cfg.latent_dim, rng))]);
    let logvar = Stack::new(vec![Layer::Dense(DenseLayer::new(flat, cfg.latent_dim, rng))]);
    (Stack::new(layers), mu, logvar)
}

fn decoder_stack<T: Real, R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Stack<T> {
    let c = cfg.base_channels;
    let s = PATCH_SIZE / 8;
    let mut layers = vec![
        Layer::Dense(DenseLayer::new(cfg.latent_dim, 4 * c * s * s, rng)),
        Layer::Relu,
        Layer::Reshape(vec![4 * c, s, s]),
    ];
    let plan = [(4 * c, 4 * c, 2 * c), (2 * c, 2 * c, c), (c, c, 1)];
    for (i, &(a, b, out)) in plan.iter().enumerate() {
        layers.push(Layer::Upsample2x);
        layers.push(Layer::Conv(Conv2dLayer::new(a, b, 3, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Conv(Conv2dLayer::new(b, out, 3, rng)));
        if i + 1 < plan.len() {
            layers.push(Layer::Relu);
        }
    }
    layers.push(Layer::Sigmoid);
    Stack::new(layers)
}

/// Fresh model: encoder `c, 2c, 4c` channels over `32 -> 16 -> 8 -> 4`,
/// decoder mirrored, sigmoid output.
pub fn build_vae<T: Real, R: Rng + ?Sized>(cfg: &VaeConfig, rng: &mut R) -> Result<ShapePriorModel<T>> {
    if cfg.latent_dim < 2 {
        return Err(Error::InvalidArgument(format!("latent_dim {} < 2", cfg.latent_dim)));
    }
    if cfg.base_channels == 0 {
        return Err(Error::InvalidArgument("base_channels must be >= 1".into()));
    }
    let (encoder, mu_head, logvar_head) = encoder_stacks(cfg, rng);
    let decoder = decoder_stack(cfg, rng);
    Ok(ShapePriorModel {
        encoder,
        mu_head,
        logvar_head,
        decoder,
        config: *cfg,
        frozen_decoder: false,
        config_hash: None,
    })
}

impl<T: Real> ShapePriorModel<T> {
    pub fn bind(&self, g: &mut Graph<T>, train_encoder: bool) -> BoundVae {
        BoundVae {
            encoder: self.encoder.bind(g, train_encoder),
            mu_head: self.mu_head.bind(g, train_encoder),
            logvar_head: self.logvar_head.bind(g, train_encoder),
            decoder: self.decoder.bind(g, train_encoder && !self.frozen_decoder),
        }
    }

    /// `x` `[N,1,32,32]` to `(mu, logvar)`, each `[N, latent_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, x: Var, b: &BoundVae) -> Result<(Var, Var)> {
        let h = self.encoder.forward(g, x, &b.encoder)?;
        let mu = self.mu_head.forward(g, h, &b.mu_head)?;
        let lv = self.logvar_head.forward(g, h, &b.logvar_head)?;
        Ok((mu, lv))
    }

    /// `z` `[N, latent_dim]` to masks `[N,1,32,32]` in `(0,1)`.
    pub fn decode(&self, g: &mut Graph<T>, z: Var, b: &BoundVae) -> Result<Var> {
        self.decoder.forward(g, z, &b.decoder)
    }

    pub fn encoder_params(&self) -> Vec<&Tensor<T>> {
        let mut v = self.encoder.params();
        v.extend(self.mu_head.params());
        v.extend(self.logvar_head.params());
        v
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.mu_head.params_mut());
        v.extend(self.logvar_head.params_mut());
        v
    }

    /// Parameters an optimizer may update: encoder side, plus the decoder
    /// unless it is frozen.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let frozen = self.frozen_decoder;
        let mut v = self.encoder.params_mut();
        v.extend(self.mu_head.params_mut());
        v.extend(self.logvar_head.params_mut());
        if !frozen {
            v.extend(self.decoder.params_mut());
        }
        v
    }

    /// Gradients matching [`Self::trainable_params_mut`].
    pub fn trainable_grads(&self, g: &Graph<T>, b: &BoundVae) -> Vec<Tensor<T>> {
        let mut vars = b.encoder_vars();
        if !self.frozen_decoder {
            vars.extend(&b.decoder);
        }
        vars.into_iter().map(|v| g.grad_tensor(v)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.mu_head.num_params() + self.logvar_head.num_params() + self.decoder.num_params()
    }

    /// Hex SHA-256 over the decoder parameter bytes.
    pub fn decoder_checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.decoder.params() {
            for v in t.data() {
                h.update(v.f64().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn cast<U: Real>(&self) -> ShapePriorModel<U> {
        ShapePriorModel {
            encoder: self.encoder.cast(),
            mu_head: self.mu_head.cast(),
            logvar_head: self.logvar_head.cast(),
            decoder: self.decoder.cast(),
            config: self.config,
            frozen_decoder: self.frozen_decoder,
            config_hash: self.config_hash.clone(),
        }
    }

    /// Posterior means and log-variances of a batch of patches.
    pub fn encode_patches(&self, patches: &[ShapePatch]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = g.constant(patches_tensor(patches));
        let (mu, lv) = self.encode(&mut g, x, &b)?;
        Ok((g.value(mu).clone(), g.value(lv).clone()))
    }

    pub fn decode_latents(&self, z: &Tensor<T>) -> Result<Vec<ShapePatch>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let zv = g.constant(z.clone());
        let out = self.decode(&mut g, zv, &b)?;
        tensor_patches(g.value(out))
    }
}

pub(crate) fn hex_digest(h: Sha256) -> String {
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stacks patches into `[N,1,32,32]`.
pub fn patches_tensor<T: Real>(patches: &[ShapePatch]) -> Tensor<T> {
    let data = patches.iter().flat_map(|p| p.data.iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::new(&[patches.len(), 1, PATCH_SIZE, PATCH_SIZE], data).expect("patch sizes")
}

pub fn tensor_patches<T: Real>(t: &Tensor<T>) -> Result<Vec<ShapePatch>> {
    let n = PATCH_SIZE * PATCH_SIZE;
    t.data()
        .chunks(n)
        .map(|c| ShapePatch::new(c.iter().map(|v| v.f64() as f32).collect()))
        .collect()
}

/// Marks the decoder as fixed: binding it yields constants, so no
/// optimizer step can reach it.
pub fn freeze_decoder<T: Real>(mut model: ShapePriorModel<T>) -> ShapePriorModel<T> {
    model.frozen_decoder = true;
    model
}

/// Fresh encoder weights from `rng`; the decoder is left untouched.
pub fn reinit_encoder<T: Real, R: Rng + ?Sized>(mut model: ShapePriorModel<T>, rng: &mut R) -> ShapePriorModel<T> {
    let (e, m, l) = encoder_stacks(&model.config, rng);
    model.encoder = e;
    model.mu_head = m;
    model.logvar_head = l;
    model
}

/// `mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Tensor<T>) -> Result<Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half)?;
    let e = g.constant(eps);
    let noise = g.mul(std, e)?;
    g.add(mu, noise)
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Per-sample KL divergence to `N(0, I)`, shape `[N]`.
pub fn kl_per_sample<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = g.square(mu)?;
    let ev = g.exp(logvar)?;
    let a = g.add_scalar(logvar, 1.0);
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, ev)?;
    let s = g.sum_last(c)?;
    Ok(g.scale(s, -0.5))
}

/// Batch-mean KL divergence to `N(0, I)`.
pub fn kl_divergence<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Var> {
    let k = kl_per_sample(g, mu, logvar)?;
    Ok(g.mean(k))
}

/// Binary cross-entropy of `recon` against `target`, summed over pixels and
/// averaged over the batch, probabilities clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn bce<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, recon: Var) -> Result<Var> {
    if g.shape(recon) != target.shape() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs target {:?}",
            g.shape(recon),
            target.shape()
        )));
    }
    if g.value(recon).data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::Domain("reconstruction outside (0, 1)".into()));
    }
    let r = g.clamp(recon, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let log_r = g.log(r)?;
    let nr = g.neg(r)?;
    let one_minus = g.add_scalar(nr, 1.0);
    let log_1r = g.log(one_minus)?;
    let t = g.constant(target.clone());
    let t1 = g.constant(target.map(|v| T::one() - v));
    let a = g.mul(t, log_r)?;
    let b = g.mul(t1, log_1r)?;
    let s = g.add(a, b)?;
    let total = g.sum(s);
    let batch = target.shape().first().copied().unwrap_or(1).max(1);
    Ok(g.scale(total, -1.0 / batch as f64))
}

/// `bce(target, recon) + beta * kl(mu, logvar)`.
pub fn vae_loss<T: Real>(g: &mut Graph<T>, target: &Tensor<T>, recon: Var, mu: Var, logvar: Var, beta: f64) -> Result<Var> {
    let r = bce(g, target, recon)?;
    let k = kl_divergence(g, mu, logvar)?;
    let kb = g.scale(k, beta);
    g.add(r, kb)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub adam: AdamConfig,
    /// Fraction of patches held out for the reconstruction IoU.
    pub holdout_fraction: f64,
}

impl Default for PriorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            beta: 1.0,
            adam: AdamConfig::default(),
            holdout_fraction: 0.1,
        }
    }
}

impl PriorTrainConfig {
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorReport {
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub heldout_iou: f64,
    pub train_count: usize,
    pub heldout_count: usize,
}

/// Mean IoU at threshold 0.5 between patches and their mean-code reconstructions.
pub fn reconstruction_iou(model: &ShapePriorModel<f32>, patches: &[ShapePatch]) -> Result<f64> {
    if patches.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for chunk in patches.chunks(64) {
        let (mu, _) = model.encode_patches(chunk)?;
        let rec = model.decode_latents(&mu)?;
        for (p, r) in chunk.iter().zip(&rec) {
            total += mask_iou(&p.foreground(0.5), &r.foreground(0.5));
        }
    }
    Ok(total / patches.len() as f64)
}

/// Trains all parameters (decoder included unless frozen) on `patches`
/// with minibatch Adam. A shuffled `holdout_fraction` is kept aside for the
/// reported reconstruction IoU.
pub fn train_prior<R: Rng + ?Sized>(
    model: &mut ShapePriorModel<f32>,
    patches: &[ShapePatch],
    cfg: &PriorTrainConfig,
    rng: &mut R,
) -> Result<PriorReport> {
    if patches.is_empty() {
        return Err(Error::InvalidArgument("no shape patches to train on".into()));
    }
    if patches.len() < 8 {
        return Err(Error::InvalidArgument(format!("{} patches; at least 8 are needed", patches.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut idx: Vec<usize> = (0..patches.len()).collect();
    idx.shuffle(rng);
    let n_hold = ((patches.len() as f64 * cfg.holdout_fraction).round() as usize).min(patches.len() - 1);
    let (hold, train) = idx.split_at(n_hold);
    let held: Vec<ShapePatch> = hold.iter().map(|&i| patches[i].clone()).collect();
    let mut train: Vec<usize> = train.to_vec();

    let mut adam = Adam::new(cfg.adam);
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    for _ in 0..cfg.epochs {
        train.shuffle(rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for batch in train.chunks(cfg.batch_size) {
            let items: Vec<ShapePatch> = batch.iter().map(|&i| patches[i].clone()).collect();
            let target: Tensor<f32> = patches_tensor(&items);
            let eps = standard_normal(&[items.len(), model.config.latent_dim], rng);
            let mut g = Graph::new();
            let b = model.bind(&mut g, true);
            let x = g.constant(target.clone());
            let (mu, lv) = model.encode(&mut g, x, &b)?;
            let z = reparameterize(&mut g, mu, lv, eps)?;
            let rec = model.decode(&mut g, z, &b)?;
            let loss = vae_loss(&mut g, &target, rec, mu, lv, cfg.beta)?;
            let lval = g.value(loss).item()? as f64;
            if !lval.is_finite() {
                return Err(Error::Numeric(format!("prior loss became {lval}")));
            }
            g.backward(loss)?;
            let grads = model.trainable_grads(&g, &b);
            drop(g);
            adam.step(&mut model.trainable_params_mut(), &grads)?;
            step_losses.push(lval);
            sum += lval;
            steps += 1;
        }
        epoch_losses.push(sum / steps.max(1) as f64);
    }
    model.config_hash = Some(cfg.hash());
    let heldout_iou = reconstruction_iou(model, &held)?;
    Ok(PriorReport {
        step_losses,
        epoch_losses,
        heldout_iou,
        train_count: train.len(),
        heldout_count: held.len(),
    })
}

/// Decodes `n` draws `z ~ N(0, I)`.
pub fn sample_shapes<R: Rng + ?Sized>(model: &ShapePriorModel<f32>, n: usize, rng: &mut R) -> Result<Vec<ShapePatch>> {
    let z = standard_normal(&[n, model.config.latent_dim], rng);
    model.decode_latents(&z)
}

/// Writes the model to a weight container; metadata records the latent
/// size, channel width, frozen flag and training config hash.
pub fn save_prior(path: &Path, model: &ShapePriorModel<f32>) -> Result<()> {
    let mut c = WeightContainer::new();
    c.metadata.insert("kind".into(), Value::from("shape-prior"));
    c.metadata.insert("latent_dim".into(), Value::from(model.config.latent_dim));
    c.metadata.insert("base_channels".into(), Value::from(model.config.base_channels));
    c.metadata.insert("frozen_decoder".into(), Value::from(model.frozen_decoder));
    c.metadata.insert(
        "config_hash".into(),
        model.config_hash.clone().map_or(Value::Null, Value::from),
    );
    c.metadata.insert("decoder_checksum".into(), Value::from(model.decoder_checksum()));
    for (stack, prefix) in [
        (&model.encoder, "encoder"),
        (&model.mu_head, "mu"),
        (&model.logvar_head, "logvar"),
        (&model.decoder, "decoder"),
    ] {
        for (name, t) in stack.named_params(prefix) {
            c.push(name, t.clone());
        }
    }
    write_container(path, &c)
}

fn meta_usize(c: &WeightContainer, key: &str) -> Result<usize> {
    c.metadata
        .get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Container(format!("missing metadata {key}")))
}

pub(crate) fn load_stack(stack: &mut Stack<f32>, c: &WeightContainer, prefix: &str) -> Result<()> {
    let names: Vec<String> = stack.named_params(prefix).into_iter().map(|(n, _)| n).collect();
    let tensors = names
        .iter()
        .map(|n| c.get(n).cloned().ok_or_else(|| Error::Container(format!("missing tensor {n}"))))
        .collect::<Result<Vec<_>>>()?;
    stack.load_params(&tensors)
}

pub fn prior_from_container(c: &WeightContainer) -> Result<ShapePriorModel<f32>> {
    let cfg = VaeConfig {
        latent_dim: meta_usize(c, "latent_dim")?,
        base_channels: meta_usize(c, "base_channels")?,
    };
    // structure only; every tensor is overwritten below
    let mut model = build_vae(&cfg, &mut crate::rng::stream(0, "structure"))?;
    load_stack(&mut model.encoder, c, "encoder")?;
    load_stack(&mut model.mu_head, c, "mu")?;
    load_stack(&mut model.logvar_head, c, "logvar")?;
    load_stack(&mut model.decoder, c, "decoder")?;
    model.frozen_decoder = c.metadata.get("frozen_decoder").and_then(Value::as_bool).unwrap_or(false);
    model.config_hash = c.metadata.get("config_hash").and_then(Value::as_str).map(str::to_string);
    if let Some(sum) = c.metadata.get("decoder_checksum").and_then(Value::as_str) {
        if sum != model.decoder_checksum() {
            return Err(Error::Container("decoder checksum mismatch".into()));
        }
    }
    Ok(model)
}

pub fn load_prior(path: &Path) -> Result<ShapePriorModel<f32>> {
    prior_from_container(&read_container(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::grad_check_multi;
    use crate::rng::stream;
    use crate::shapes::gen_ellipse_patch;
    use rand::Rng;

    fn tiny() -> VaeConfig {
        VaeConfig {
            latent_dim: 4,
            base_channels: 2,
        }
    }

    #[test]
    fn shapes_and_codomain() {
        let m: ShapePriorModel = build_vae(&VaeConfig::default(), &mut stream(0, "p")).unwrap();
        let p = gen_ellipse_patch(1.3, 10.0, 0.8).unwrap();
        let (mu, lv) = m.encode_patches(&[p]).unwrap();
        assert_eq!(mu.shape(), &[1, 16]);
        assert_eq!(lv.shape(), &[1, 16]);
        let out = m.decode_latents(&Tensor::zeros(&[1, 16])).unwrap();
        assert!(out[0].data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(build_vae::<f32, _>(&VaeConfig { latent_dim: 1, base_channels: 4 }, &mut stream(0, "p")).is_err());
    }

    #[test]
    fn build_is_seeded() {
        let a: ShapePriorModel = build_vae(&tiny(), &mut stream(3, "p")).unwrap();
        let b: ShapePriorModel = build_vae(&tiny(), &mut stream(3, "p")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_params(), b.num_params());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::<f64>::new();
        let mu = g.constant(Tensor::zeros(&[2, 3]));
        let lv = g.constant(Tensor::zeros(&[2, 3]));
        let k = kl_divergence(&mut g, mu, lv).unwrap();
        assert_eq!(g.value(k).item().unwrap(), 0.0);
        let mu = g.constant(Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let lv = g.constant(Tensor::zeros(&[1, 3]));
        let k = kl_divergence(&mut g, mu, lv).unwrap();
        assert!((g.value(k).item().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let target = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 2) as f64);
        let mut g = Graph::new();
        let r = g.constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        let l = bce(&mut g, &target, r).unwrap();
        assert!((g.value(l).item().unwrap() - 16.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = g.constant(target.clone());
        let l = bce(&mut g, &target, perfect).unwrap();
        assert!(g.value(l).item().unwrap() < 16.0 * 2e-6);
        let bad = g.constant(Tensor::full(&[1, 1, 4, 4], 1.5));
        assert!(bce(&mut g, &target, bad).is_err());
    }

    #[test]
    fn beta_scales_kl_linearly() {
        let target = Tensor::full(&[1, 1, 2, 2], 1.0f64);
        let eval = |beta: f64| {
            let mut g = Graph::new();
            let r = g.constant(Tensor::full(&[1, 1, 2, 2], 0.7));
            let mu = g.constant(Tensor::new(&[1, 2], vec![0.3, -1.0]).unwrap());
            let lv = g.constant(Tensor::new(&[1, 2], vec![0.2, 0.1]).unwrap());
            let l = vae_loss(&mut g, &target, r, mu, lv, beta).unwrap();
            g.value(l).item().unwrap()
        };
        let (l0, l1, l2) = (eval(0.0), eval(1.0), eval(2.0));
        assert!(((l2 - l0) - 2.0 * (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn vae_loss_gradient_wrt_encoder() {
        let mut model: ShapePriorModel<f64> = build_vae(&tiny(), &mut stream(1, "gc")).unwrap();
        // zero biases put every flat-region activation exactly on the relu kink
        let mut rng = stream(1, "bias");
        for stack in [&mut model.encoder, &mut model.mu_head, &mut model.logvar_head, &mut model.decoder] {
            for t in stack.params_mut() {
                if t.shape().len() == 1 {
                    t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
                }
            }
        }
        let patches = vec![
            gen_ellipse_patch(1.0, 0.0, 0.6).unwrap(),
            gen_ellipse_patch(1.5, 40.0, 0.8).unwrap(),
        ];
        let target: Tensor<f64> = patches_tensor(&patches);
        let eps = standard_normal::<f64, _>(&[2, 4], &mut stream(1, "eps"));
        let inputs: Vec<Tensor<f64>> = model.encoder_params().into_iter().cloned().collect();
        let n_enc = model.encoder.params().len();
        let n_mu = model.mu_head.params().len();
        let report = grad_check_multi(
            |g, vars| {
                let dec = model.decoder.bind(g, false);
                let b = BoundVae {
                    encoder: vars[..n_enc].to_vec(),
                    mu_head: vars[n_enc..n_enc + n_mu].to_vec(),
                    logvar_head: vars[n_enc + n_mu..].to_vec(),
                    decoder: dec,
                };
                let x = g.constant(target.clone());
                let (mu, lv) = model.encode(g, x, &b)?;
                let z = reparameterize(g, mu, lv, eps.clone())?;
                let r = model.decode(g, z, &b)?;
                vae_loss(g, &target, r, mu, lv, 1.0)
            },
            &inputs,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn frozen_decoder_never_changes() {
        let model: ShapePriorModel = build_vae(&tiny(), &mut stream(2, "f")).unwrap();
        let mut model = freeze_decoder(model);
        let before = model.decoder.clone();
        let enc_before = model.encoder.clone();
        let patches = vec![gen_ellipse_patch(1.2, 0.0, 0.8).unwrap(); 8];
        let cfg = PriorTrainConfig {
            epochs: 2,
            batch_size: 4,
            holdout_fraction: 0.0,
            ..Default::default()
        };
        train_prior(&mut model, &patches, &cfg, &mut stream(2, "t")).unwrap();
        assert_eq!(model.decoder, before);
        assert_ne!(model.encoder, enc_before);
    }

    #[test]
    fn reinit_touches_only_encoder() {
        let model: ShapePriorModel = build_vae(&tiny(), &mut stream(4, "r")).unwrap();
        let sum = model.decoder_checksum();
        let p = [gen_ellipse_patch(1.0, 0.0, 0.8).unwrap()];
        let (mu0, _) = model.encode_patches(&p).unwrap();
        let a = reinit_encoder(model.clone(), &mut stream(5, "r"));
        let b = reinit_encoder(model, &mut stream(5, "r"));
        assert_eq!(a, b);
        assert_eq!(a.decoder_checksum(), sum);
        let (mu1, _) = a.encode_patches(&p).unwrap();
        assert_ne!(mu0, mu1);
    }

    #[test]
    fn too_few_patches_are_rejected() {
        let mut model: ShapePriorModel = build_vae(&tiny(), &mut stream(0, "x")).unwrap();
        let cfg = PriorTrainConfig::default();
        assert!(train_prior(&mut model, &[], &cfg, &mut stream(0, "t")).is_err());
        let few = vec![gen_ellipse_patch(1.0, 0.0, 0.8).unwrap(); 3];
        assert!(train_prior(&mut model, &few, &cfg, &mut stream(0, "t")).is_err());
    }

    #[test]
    fn eight_patches_train_finitely_and_reproducibly() {
        let patches: Vec<ShapePatch> = (0..8).map(|i| gen_ellipse_patch(1.0 + i as f32 * 0.1, i as f32 * 30.0, 0.8).unwrap()).collect();
        let cfg = PriorTrainConfig {
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut m: ShapePriorModel = build_vae(&tiny(), &mut stream(6, "p")).unwrap();
            train_prior(&mut m, &patches, &cfg, &mut stream(6, "d")).unwrap()
        };
        let a = run();
        assert!(a.step_losses.iter().all(|l| l.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn samples_are_seeded_and_open_unit() {
        let m: ShapePriorModel = build_vae(&tiny(), &mut stream(7, "p")).unwrap();
        let a = sample_shapes(&m, 3, &mut stream(1, "s")).unwrap();
        let b = sample_shapes(&m, 3, &mut stream(1, "s")).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|p| &p.data).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m: ShapePriorModel = build_vae(&tiny(), &mut stream(8, "p")).unwrap();
        m.config_hash = Some("abc".into());
        let m = freeze_decoder(m);
        let path = dir.path().join("prior.bin");
        save_prior(&path, &m).unwrap();
        assert_eq!(load_prior(&path).unwrap(), m);
    }
}
