//! Convolutional encoder `q(z | x)`, decoder `p(x | z)`, the Gaussian
//! reconstruction loss, and global latent standardization feeding the
//! latent diffusion model.
//!
//! Images are flat rows in HWC order with pixels in `[0, 1]`. The encoder
//! emits a diagonal-Gaussian posterior (mean, log-variance); the decoder is
//! a deterministic mean decode with unconstrained values, compared in
//! pixel space by the loss.

use std::sync::Arc;

use crate::error::{D2cError, Result};
use crate::nn::{
    apply_conv, apply_linear, bind, conv_plan, deconv_plan, he_normal, scaled_normal, Bound,
    ParamSet, SpatialShape,
};
use crate::rng::{normal_vec, Stream};
use crate::tape::{GatherPlan, NodeId, Tape};
use crate::tensor::Mat;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Depth of the stride-2 stack: halve while the spatial dims stay even,
/// at most three times.
fn conv_depth(image: SpatialShape) -> usize {
    let mut d = 0;
    let (mut h, mut w) = (image.height, image.width);
    while d < 3 && h % 2 == 0 && w % 2 == 0 && h > 2 && w > 2 {
        h /= 2;
        w /= 2;
        d += 1;
    }
    d.max(1)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub image: SpatialShape,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    plans: Vec<Arc<GatherPlan>>,
    flat_dim: usize,
    pub params: ParamSet,
}

impl Encoder {
    pub fn new(image: SpatialShape, latent_dim: usize, base_channels: usize, rng: &mut Stream) -> Self {
        let depth = conv_depth(image);
        let channels: Vec<usize> = (0..depth).map(|i| base_channels << i).collect();
        let mut plans = Vec::new();
        let mut params = ParamSet::new();
        let mut shape = image;
        let mut rows_per_item = 1; // flat image rows
        for (i, &c_out) in channels.iter().enumerate() {
            let (plan, out) = conv_plan(shape, 4, 2, 1, rows_per_item);
            let fan_in = plan.out_cols;
            params.insert(&format!("conv{i}/w"), he_normal(rng, fan_in, c_out, fan_in));
            params.insert(&format!("conv{i}/b"), Mat::zeros(1, c_out));
            plans.push(plan);
            shape = SpatialShape {
                channels: c_out,
                height: out.height,
                width: out.width,
            };
            rows_per_item = shape.height * shape.width;
        }
        let flat_dim = shape.elements();
        params.insert("mean/w", scaled_normal(rng, flat_dim, latent_dim, 0.01));
        params.insert("mean/b", Mat::zeros(1, latent_dim));
        params.insert("logvar/w", scaled_normal(rng, flat_dim, latent_dim, 0.01));
        params.insert(
            "logvar/b",
            Mat::from_vec(1, latent_dim, vec![-3.0; latent_dim]),
        );
        Encoder {
            image,
            latent_dim,
            channels,
            plans,
            flat_dim,
            params,
        }
    }

    /// (mean, logvar) heads; `x` is a `[n x H*W*C]` node.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: NodeId) -> (NodeId, NodeId) {
        let mut h = x;
        let n = tape.value(x).rows;
        for (i, plan) in self.plans.iter().enumerate() {
            h = apply_conv(tape, h, plan, bound, &format!("conv{i}/w"), &format!("conv{i}/b"));
            h = tape.silu(h);
        }
        let flat = tape.reshape(h, n, self.flat_dim);
        let mean = apply_linear(tape, flat, bound, "mean/w", "mean/b");
        let logvar = apply_linear(tape, flat, bound, "logvar/w", "logvar/b");
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols != self.image.elements() {
            return Err(D2cError::ShapeMismatch {
                expected: format!("{} pixels", self.image.elements()),
                got: format!("{}", x.cols),
            });
        }
        Ok(())
    }

    /// Posterior parameters without gradients.
    pub fn posterior(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, false);
        let xn = tape.constant(x.clone());
        let (mean, logvar) = self.forward(&mut tape, &bound, xn);
        Ok((tape.value(mean).clone(), tape.value(logvar).clone()))
    }
}

/// `mean + exp(logvar / 2) * eps` on the tape.
pub fn reparam_on_tape(tape: &mut Tape, mean: NodeId, logvar: NodeId, eps: &Mat) -> NodeId {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e);
    tape.add(mean, noise)
}

/// Stochastic encode; `deterministic` returns the posterior mean.
pub fn encode(enc: &Encoder, x: &Mat, rng: &mut Stream, deterministic: bool) -> Result<Mat> {
    let (mean, logvar) = enc.posterior(x)?;
    if deterministic {
        return Ok(mean);
    }
    let eps = Mat::from_vec(
        mean.rows,
        mean.cols,
        normal_vec(rng, mean.rows * mean.cols),
    );
    let mut z = mean;
    for i in 0..z.data.len() {
        z.data[i] += (0.5 * logvar.data[i]).exp() * eps.data[i];
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub image: SpatialShape,
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    start: SpatialShape,
    plans: Vec<Arc<GatherPlan>>,
    pub params: ParamSet,
}

impl Decoder {
    pub fn new(image: SpatialShape, latent_dim: usize, base_channels: usize, rng: &mut Stream) -> Self {
        let depth = conv_depth(image);
        // mirror of the encoder stack: widest at the smallest resolution
        let channels: Vec<usize> = (0..depth).rev().map(|i| base_channels << i).collect();
        let start = SpatialShape {
            channels: channels[0],
            height: image.height >> depth,
            width: image.width >> depth,
        };
        let mut params = ParamSet::new();
        params.insert(
            "fc/w",
            scaled_normal(rng, latent_dim, start.elements(), (1.0 / latent_dim as f64).sqrt()),
        );
        params.insert("fc/b", Mat::zeros(1, start.elements()));
        let mut plans = Vec::new();
        let mut shape = start;
        for (i, _) in channels.iter().enumerate() {
            let c_out = if i + 1 < depth {
                channels[i + 1]
            } else {
                image.channels
            };
            let (plan, out) = deconv_plan(shape, 4, 2, 1);
            let fan_in = plan.out_cols;
            params.insert(&format!("deconv{i}/w"), he_normal(rng, fan_in, c_out, fan_in));
            params.insert(&format!("deconv{i}/b"), Mat::zeros(1, c_out));
            plans.push(plan);
            shape = SpatialShape {
                channels: c_out,
                height: out.height,
                width: out.width,
            };
        }
        assert_eq!(shape.height, image.height);
        assert_eq!(shape.width, image.width);
        Decoder {
            image,
            latent_dim,
            channels,
            start,
            plans,
            params,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: NodeId) -> NodeId {
        let n = tape.value(z).rows;
        let h = apply_linear(tape, z, bound, "fc/w", "fc/b");
        let h = tape.silu(h);
        let mut h = tape.reshape(h, n * self.start.height * self.start.width, self.start.channels);
        let depth = self.plans.len();
        for (i, plan) in self.plans.iter().enumerate() {
            h = apply_conv(tape, h, plan, bound, &format!("deconv{i}/w"), &format!("deconv{i}/b"));
            if i + 1 < depth {
                h = tape.silu(h);
            }
        }
        tape.reshape(h, n, self.image.elements())
    }
}

/// Deterministic mean decode.
pub fn decode(dec: &Decoder, z: &Mat) -> Result<Mat> {
    if z.cols != dec.latent_dim {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} latent columns", dec.latent_dim),
            got: format!("{}", z.cols),
        });
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &dec.params, false);
    let zn = tape.constant(z.clone());
    let out = dec.forward(&mut tape, &bound, zn);
    Ok(tape.value(out).clone())
}

/// Per-image pixel-summed scaled squared error on the tape, averaged over
/// the batch: `||x - decode(z)||^2 / (2 sigma_pix^2)`.
pub fn recon_loss_on_tape(
    tape: &mut Tape,
    dec: &Decoder,
    bound: &Bound,
    z: NodeId,
    target: NodeId,
    sigma_pix: f64,
) -> NodeId {
    let out = dec.forward(tape, bound, z);
    let d = tape.sub(out, target);
    let sq = tape.square(d);
    let rs = tape.row_sum(sq);
    let m = tape.mean(rs);
    tape.scale(m, 1.0 / (2.0 * sigma_pix * sigma_pix))
}

/// Reconstruction loss and decoder gradients for a fixed latent batch.
pub fn reconstruction_loss(
    dec: &Decoder,
    x: &Mat,
    z: &Mat,
    sigma_pix: f64,
) -> Result<(f64, ParamSet)> {
    if x.cols != dec.image.elements() || x.rows != z.rows {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} x {}", z.rows, dec.image.elements()),
            got: format!("{} x {}", x.rows, x.cols),
        });
    }
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &dec.params, true);
    let zn = tape.constant(z.clone());
    let xn = tape.constant(x.clone());
    let loss = recon_loss_on_tape(&mut tape, dec, &bound, zn, xn, sigma_pix);
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(D2cError::NonFiniteLoss("reconstruction".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, crate::nn::collect_grads(&grads, &bound, &dec.params)))
}

/// Componentwise mean and standard deviation of a latent batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_latent_stats(latents: &Mat) -> Result<LatentStats> {
    if latents.rows < 2 {
        return Err(D2cError::InvalidParameter(
            "need at least 2 latents for stats".into(),
        ));
    }
    let n = latents.rows as f64;
    let mut mean = vec![0.0; latents.cols];
    for r in 0..latents.rows {
        for (m, v) in mean.iter_mut().zip(latents.row(r)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; latents.cols];
    for r in 0..latents.rows {
        for (c, v) in latents.row(r).iter().enumerate() {
            let d = v - mean[c];
            var[c] += d * d;
        }
    }
    let mut std = Vec::with_capacity(latents.cols);
    for (c, v) in var.iter().enumerate() {
        let s = (v / n).sqrt();
        if s <= 0.0 {
            return Err(D2cError::DegenerateLatent(format!(
                "component {c} has zero variance"
            )));
        }
        std.push(s);
    }
    Ok(LatentStats { mean, std })
}

pub fn normalize(z: &Mat, stats: &LatentStats) -> Mat {
    let mut out = z.clone();
    for r in 0..out.rows {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    out
}

pub fn denormalize(z: &Mat, stats: &LatentStats) -> Mat {
    let mut out = z.clone();
    for r in 0..out.rows {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    out
}
