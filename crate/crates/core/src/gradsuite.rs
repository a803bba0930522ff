//! Named finite-difference checks of every differentiable operator the
//! pipeline relies on. All checks run in `f64`.

use rand::Rng;

use crate::detector::{edge_loss, forward_from_features, DetectorConfig};
use crate::error::{Error, Result};
use crate::ndgrad::{grad_check_multi, GradCheckReport, Graph, Tensor, Var};
use crate::prior::{build_vae, freeze_decoder, kl_divergence, reparameterize, vae_loss, BoundVae, ShapePriorModel, VaeConfig};
use crate::rng::{stream, StreamRng};

/// Relative error every check must stay below.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

pub const OPS: &[&str] = &[
    "conv2d",
    "maxpool2d",
    "upsample2x",
    "dense",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "sqrt",
    "bilinear_sample_source",
    "bilinear_sample_theta",
    "stitch",
    "edge_loss",
    "kl_divergence",
    "vae_loss",
    "detector_forward",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random linear read-out so every output coordinate gets a distinct weight.
fn readout(g: &mut Graph<f64>, y: Var, rng: &mut StreamRng) -> Result<Var> {
    let w = uniform(g.shape(y), -1.0, 1.0, rng);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

/// Theta near the identity with some scale, shear and shift.
fn random_theta(m: usize, rng: &mut StreamRng) -> Tensor<f64> {
    Tensor::from_fn(&[m, 6], |i| match i % 6 {
        0 | 4 => rng.random_range(0.5..1.2),
        1 | 3 => rng.random_range(-0.2..0.2),
        _ => rng.random_range(-0.3..0.3),
    })
}

fn tiny_prior(seed: u64) -> Result<ShapePriorModel<f64>> {
    let mut m: ShapePriorModel<f64> = build_vae(
        &VaeConfig {
            latent_dim: 2,
            base_channels: 1,
        },
        &mut stream(seed, "gradcheck-prior"),
    )?;
    // nonzero biases keep flat regions away from the relu kink
    let mut rng = stream(seed, "gradcheck-bias");
    for s in [&mut m.encoder, &mut m.mu_head, &mut m.logvar_head, &mut m.decoder] {
        for t in s.params_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
    }
    Ok(m)
}

/// Runs one named check.
pub fn check(op: &str, seed: u64) -> Result<GradCheckReport> {
    let mut rng = stream(seed, op);
    let r1 = stream(seed, "readout");
    let ro = |g: &mut Graph<f64>, y: Var| readout(g, y, &mut r1.clone());
    match op {
        "conv2d" => {
            let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
            let k = uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 1)?;
                    ro(g, y)
                },
                &[x, k],
                EPS,
            )
        }
        "maxpool2d" => {
            let x = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let y = g.maxpool2d(v[0], 2)?;
                    ro(g, y)
                },
                &[x],
                EPS,
            )
        }
        "upsample2x" => {
            let x = uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let y = g.upsample2x(v[0])?;
                    ro(g, y)
                },
                &[x],
                EPS,
            )
        }
        "dense" => {
            let x = uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let w = uniform(&[4, 5], -1.0, 1.0, &mut rng);
            let b = uniform(&[5], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let y = g.dense(v[0], v[1], v[2])?;
                    ro(g, y)
                },
                &[x, w, b],
                EPS,
            )
        }
        "relu" | "sigmoid" | "tanh" | "exp" | "sqrt" => {
            let (lo, hi) = if op == "sqrt" { (0.2, 2.0) } else { (-2.0, 2.0) };
            let mut x = uniform(&[16], lo, hi, &mut rng);
            if op == "relu" {
                // keep samples off the kink
                x.data_mut().iter_mut().for_each(|v| {
                    if v.abs() < 0.05 {
                        *v += 0.1
                    }
                });
            }
            grad_check_multi(
                |g, v| {
                    let y = match op {
                        "relu" => g.relu(v[0])?,
                        "sigmoid" => g.sigmoid(v[0])?,
                        "tanh" => g.tanh(v[0])?,
                        "exp" => g.exp(v[0])?,
                        _ => g.sqrt(v[0])?,
                    };
                    ro(g, y)
                },
                &[x],
                EPS,
            )
        }
        "bilinear_sample_source" | "bilinear_sample_theta" => {
            let src = uniform(&[1, 1, 7, 7], 0.0, 1.0, &mut rng);
            let theta = random_theta(2, &mut rng);
            let wrt_theta = op == "bilinear_sample_theta";
            let (param, fixed) = if wrt_theta { (theta, src) } else { (src, theta) };
            grad_check_multi(
                |g, v| {
                    let c = g.constant(fixed.clone());
                    let (s, t) = if wrt_theta { (c, v[0]) } else { (v[0], c) };
                    let y = g.affine_sample(s, t, 5, 5)?;
                    ro(g, y)
                },
                &[param],
                EPS,
            )
        }
        "stitch" => {
            let patches = uniform(&[2, 1, 4, 4], 0.0, 1.0, &mut rng);
            let theta = random_theta(2, &mut rng);
            let weights = uniform(&[2], 0.2, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let y = g.stitch(v[0], v[1], v[2], 1, 6, 6)?;
                    ro(g, y)
                },
                &[patches, theta, weights],
                EPS,
            )
        }
        "edge_loss" => {
            let img = uniform(&[8, 8], 0.0, 1.0, &mut rng);
            let rec = uniform(&[8, 8], 0.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let i = g.constant(img.clone());
                    edge_loss(g, i, v[0], 0.01)
                },
                &[rec],
                EPS,
            )
        }
        "kl_divergence" => {
            let mu = uniform(&[3, 4], -1.5, 1.5, &mut rng);
            let lv = uniform(&[3, 4], -1.5, 1.5, &mut rng);
            grad_check_multi(|g, v| kl_divergence(g, v[0], v[1]), &[mu, lv], EPS)
        }
        "vae_loss" => {
            let prior = tiny_prior(seed)?;
            let target = uniform(&[2, 1, 32, 32], 0.0, 1.0, &mut rng);
            let params: Vec<Tensor<f64>> = prior.encoder_params().into_iter().cloned().collect();
            let eps_noise = uniform(&[2, 2], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let fixed = prior.bind(g, false);
                    let (ne, nm) = (fixed.encoder.len(), fixed.mu_head.len());
                    let b = BoundVae {
                        encoder: v[..ne].to_vec(),
                        mu_head: v[ne..ne + nm].to_vec(),
                        logvar_head: v[ne + nm..].to_vec(),
                        decoder: fixed.decoder,
                    };
                    let x = g.constant(target.clone());
                    let (mu, lv) = prior.encode(g, x, &b)?;
                    let z = reparameterize(g, mu, lv, eps_noise.clone())?;
                    let r = prior.decode(g, z, &b)?;
                    vae_loss(g, &target, r, mu, lv, 1.0)
                },
                &params,
                1e-5,
            )
        }
        "detector_forward" => {
            let prior = freeze_decoder(tiny_prior(seed)?);
            let cfg = DetectorConfig {
                s_cell: 4,
                input_height: 8,
                input_width: 8,
                ..Default::default()
            };
            let image = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
            let target = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut rng);
            let raw = uniform(&[1, 5, 2, 2], -1.0, 1.0, &mut rng);
            let noise = uniform(&[4, 2], -1.0, 1.0, &mut rng);
            grad_check_multi(
                |g, v| {
                    let b = prior.bind(g, false);
                    let x = g.constant(image.clone());
                    let fv = forward_from_features(g, &prior, &b, &cfg, v[0], x, Some(noise.clone()))?;
                    let t = g.constant(target.clone());
                    edge_loss(g, t, fv.canvas, cfg.alpha)
                },
                &[raw],
                EPS,
            )
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown gradcheck op '{other}'; known: {}",
            OPS.join(", ")
        ))),
    }
}

/// Runs `op`, or every check when `op` is `"all"`.
pub fn run(op: &str, seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let ops: Vec<&str> = if op == "all" { OPS.to_vec() } else { vec![op] };
    ops.into_iter().map(|o| Ok((o.to_string(), check(o, seed)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_is_rejected() {
        assert!(matches!(check("softmax", 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cheap_ops_pass() {
        for op in ["conv2d", "dense", "tanh", "edge_loss", "kl_divergence", "bilinear_sample_theta"] {
            let r = check(op, 3).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{op}: {r:?}");
        }
    }
}
