//! Noise prediction over latents and the reverse-time samplers.
//!
//! The predictor is a small residual MLP conditioned on the continuous
//! noise level through a sinusoidal embedding, so one trained model serves
//! any subsampled schedule. Sampling implements both the deterministic
//! implicit update (invertible by reversing the level sequence) and
//! stochastic ancestral steps through the exact Gaussian posterior.

use crate::error::{D2cError, Result};
use crate::nn::{bind, collect_grads, he_normal, scaled_normal, Bound, ParamSet};
use crate::rng::{normal_vec, Stream};
use crate::schedule::{forward_noise, posterior_coeffs, AlphaSchedule, WeightFunction};
use crate::tape::{NodeId, Tape};
use crate::tensor::Mat;

/// Anything that predicts the noise component of `x_alpha` at level `alpha`.
pub trait NoiseModel {
    /// `x` is `[n x dim]`; `alphas` holds one level per row.
    fn predict(&self, x: &Mat, alphas: &[f64]) -> Mat;
    fn dim(&self) -> usize;
}

/// Test double predicting zero noise everywhere.
pub struct ZeroModel(pub usize);

impl NoiseModel for ZeroModel {
    fn predict(&self, x: &Mat, _alphas: &[f64]) -> Mat {
        Mat::zeros(x.rows, x.cols)
    }
    fn dim(&self) -> usize {
        self.0
    }
}

/// Sinusoidal features of the continuous level.
pub fn alpha_embedding(alphas: &[f64], emb_dim: usize) -> Mat {
    assert!(emb_dim % 2 == 0, "embedding dim must be even");
    let half = emb_dim / 2;
    let mut data = Vec::with_capacity(alphas.len() * emb_dim);
    for &a in alphas {
        for j in 0..half {
            let w = std::f64::consts::PI * (2.0f64).powi(j as i32);
            data.push((w * a).sin());
        }
        for j in 0..half {
            let w = std::f64::consts::PI * (2.0f64).powi(j as i32);
            data.push((w * a).cos());
        }
    }
    Mat::from_vec(alphas.len(), emb_dim, data)
}

/// Residual MLP `eps_theta(x, alpha)`.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    pub latent_dim: usize,
    pub hidden: usize,
    pub emb_dim: usize,
    pub params: ParamSet,
}

impl NoisePredictor {
    pub fn new(latent_dim: usize, hidden: usize, emb_dim: usize, rng: &mut Stream) -> Self {
        let input = latent_dim + emb_dim;
        let mut params = ParamSet::new();
        params.insert("fc1/w", he_normal(rng, input, hidden, input));
        params.insert("fc1/b", Mat::zeros(1, hidden));
        params.insert("fc2/w", he_normal(rng, hidden, hidden, hidden));
        params.insert("fc2/b", Mat::zeros(1, hidden));
        params.insert("out/w", scaled_normal(rng, hidden, latent_dim, 0.01));
        params.insert("out/b", Mat::zeros(1, latent_dim));
        NoisePredictor {
            latent_dim,
            hidden,
            emb_dim,
            params,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: NodeId, alphas: &[f64]) -> NodeId {
        let emb = tape.constant(alpha_embedding(alphas, self.emb_dim));
        let inp = tape.concat(x, emb);
        let h1 = crate::nn::apply_linear(tape, inp, bound, "fc1/w", "fc1/b");
        let h1 = tape.silu(h1);
        let h2 = crate::nn::apply_linear(tape, h1, bound, "fc2/w", "fc2/b");
        let h2 = tape.silu(h2);
        let h2 = tape.add(h1, h2);
        crate::nn::apply_linear(tape, h2, bound, "out/w", "out/b")
    }
}

impl NoiseModel for NoisePredictor {
    fn predict(&self, x: &Mat, alphas: &[f64]) -> Mat {
        assert_eq!(x.rows, alphas.len(), "one level per row");
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &self.params, false);
        let xn = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xn, alphas);
        tape.value(out).clone()
    }
    fn dim(&self) -> usize {
        self.latent_dim
    }
}

/// Frozen single-`t` randomness of one diffusion-loss evaluation.
#[derive(Debug, Clone)]
pub struct DiffusionDraw {
    pub t: Vec<usize>,
    pub alphas: Vec<f64>,
    pub eps: Mat,
    pub x_t: Mat,
}

/// Per item: `t ~ Uniform{1..T}`, `eps ~ N(0, I)`, `x_t = forward_noise`.
pub fn draw_noised_batch(
    x0: &Mat,
    schedule: &AlphaSchedule,
    rng: &mut Stream,
) -> Result<DiffusionDraw> {
    use rand::Rng;
    if x0.rows == 0 {
        return Err(D2cError::InvalidParameter("empty batch".into()));
    }
    let steps = schedule.steps();
    let mut t = Vec::with_capacity(x0.rows);
    let mut alphas = Vec::with_capacity(x0.rows);
    let mut eps = Mat::zeros(x0.rows, x0.cols);
    let mut x_t = Mat::zeros(x0.rows, x0.cols);
    for r in 0..x0.rows {
        let ti = rng.gen_range(1..=steps);
        t.push(ti);
        let a = schedule.alpha(ti);
        alphas.push(a);
        let e = normal_vec(rng, x0.cols);
        let noised = forward_noise(x0.row(r), a, &e)?;
        eps.row_mut(r).copy_from_slice(&e);
        x_t.row_mut(r).copy_from_slice(&noised);
    }
    Ok(DiffusionDraw {
        t,
        alphas,
        eps,
        x_t,
    })
}

fn weights_for_draw(draw: &DiffusionDraw, weights: &WeightFunction) -> Vec<f64> {
    draw.t.iter().map(|&ti| weights.at(ti)).collect()
}

/// Loss value for any noise model under frozen randomness:
/// `mean_i w(alpha_{t_i}) ||eps_i - model(x_t_i, alpha_fantasy_i)||^2`.
pub fn diffusion_loss_value(
    model: &dyn NoiseModel,
    draw: &DiffusionDraw,
    weights: &WeightFunction,
) -> f64 {
    let pred = model.predict(&draw.x_t, &draw.alphas);
    let w = weights_for_draw(draw, weights);
    let mut acc = 0.0;
    for r in 0..draw.x_t.rows {
        let se: f64 = pred
            .row(r)
            .iter()
            .zip(draw.eps.row(r))
            .map(|(&p, &e)| (p - e) * (p - e))
            .sum();
        acc += w[r] * se;
    }
    acc / draw.x_t.rows as f64
}

/// Weighted noise-matching loss of a predictor on the tape, for a frozen
/// draw. `x_t` enters as a constant, so gradients reach the predictor only.
pub fn noise_mse_on_tape(
    tape: &mut Tape,
    predictor: &NoisePredictor,
    bound: &Bound,
    draw: &DiffusionDraw,
    weights: &WeightFunction,
) -> NodeId {
    let xt = tape.constant(draw.x_t.clone());
    let pred = predictor.forward(tape, bound, xt, &draw.alphas);
    let eps = tape.constant(draw.eps.clone());
    let d = tape.sub(pred, eps);
    let sq = tape.square(d);
    let rs = tape.row_sum(sq);
    let w = Mat::from_vec(draw.t.len(), 1, weights_for_draw(draw, weights));
    let wn = tape.constant(w);
    let wl = tape.mul(rs, wn);
    tape.mean(wl)
}

/// The stochastic single-`t` diffusion objective with parameter gradients.
pub fn diffusion_loss(
    predictor: &NoisePredictor,
    x0_batch: &Mat,
    schedule: &AlphaSchedule,
    weights: &WeightFunction,
    rng: &mut Stream,
) -> Result<(f64, ParamSet)> {
    if x0_batch.cols != predictor.latent_dim {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} latent columns", predictor.latent_dim),
            got: format!("{}", x0_batch.cols),
        });
    }
    if weights.len() != schedule.steps() {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} weights", schedule.steps()),
            got: format!("{}", weights.len()),
        });
    }
    let draw = draw_noised_batch(x0_batch, schedule, rng)?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &predictor.params, true);
    let loss = noise_mse_on_tape(&mut tape, predictor, &bound, &draw, weights);
    let value = tape.value(loss).data[0];
    if !value.is_finite() {
        return Err(D2cError::NonFiniteLoss("diffusion".into()));
    }
    let grads = tape.backward(loss);
    Ok((value, collect_grads(&grads, &bound, &predictor.params)))
}

/// One implicit (deterministic) update between two levels; the same
/// formula denoises (`alpha_prev > alpha_t`) and inverts
/// (`alpha_prev < alpha_t`):
/// `x_prev = sqrt(a_p / a_t) x_t + (sqrt(1 - a_p) - sqrt(a_p (1 - a_t) / a_t)) eps_theta`.
pub fn ddim_step(
    model: &dyn NoiseModel,
    x_t: &Mat,
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<Mat> {
    for (name, a) in [("alpha_t", alpha_t), ("alpha_prev", alpha_prev)] {
        if !(a > 0.0 && a <= 1.0) {
            return Err(D2cError::InvalidParameter(format!(
                "{name} must be in (0, 1], got {a}"
            )));
        }
    }
    let eps = model.predict(x_t, &vec![alpha_t; x_t.rows]);
    let scale = (alpha_prev / alpha_t).sqrt();
    let noise_coeff = (1.0 - alpha_prev).sqrt() - (alpha_prev * (1.0 - alpha_t) / alpha_t).sqrt();
    let mut out = x_t.clone();
    for (o, e) in out.data.iter_mut().zip(&eps.data) {
        *o = scale * *o + noise_coeff * e;
    }
    if !out.all_finite() {
        return Err(D2cError::NonFiniteOutput("ddim_step".into()));
    }
    Ok(out)
}

/// Mean and variance of one ancestral reverse step: the predicted noise
/// gives `x0_hat`, which is plugged into the exact posterior.
pub fn ddpm_mean_var(
    model: &dyn NoiseModel,
    x_t: &Mat,
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<(Mat, f64)> {
    if alpha_prev < alpha_t {
        return Err(D2cError::InvalidParameter(
            "ancestral step needs alpha_prev >= alpha_t".into(),
        ));
    }
    let eps = model.predict(x_t, &vec![alpha_t; x_t.rows]);
    let c = posterior_coeffs(alpha_t, alpha_prev)?;
    let (sa, sn) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let mut mean = Mat::zeros(x_t.rows, x_t.cols);
    for i in 0..x_t.data.len() {
        let x0_hat = (x_t.data[i] - sn * eps.data[i]) / sa;
        mean.data[i] = c.coeff_x0 * x0_hat + c.coeff_xt * x_t.data[i];
    }
    Ok((mean, c.variance))
}

pub fn ddpm_step(
    model: &dyn NoiseModel,
    x_t: &Mat,
    alpha_t: f64,
    alpha_prev: f64,
    rng: &mut Stream,
) -> Result<Mat> {
    let (mut mean, var) = ddpm_mean_var(model, x_t, alpha_t, alpha_prev)?;
    if var > 0.0 {
        let sd = var.sqrt();
        let noise = normal_vec(rng, mean.len());
        for (m, xi) in mean.data.iter_mut().zip(noise) {
            *m += sd * xi;
        }
    }
    if !mean.all_finite() {
        return Err(D2cError::NonFiniteOutput("ddpm_step".into()));
    }
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

/// Sampler configuration: step rule plus the (possibly subsampled) levels.
#[derive(Debug, Clone)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub schedule: AlphaSchedule,
}

/// Run the chosen step rule down the full schedule from given start noise.
pub fn sample_from(model: &dyn NoiseModel, spec: &SamplerSpec, start: Mat, rng: &mut Stream) -> Result<Mat> {
    let sched = &spec.schedule;
    let mut x = start;
    for t in (1..=sched.steps()).rev() {
        let (at, ap) = (sched.alpha(t), sched.alpha(t - 1));
        x = match spec.kind {
            SamplerKind::Ddim => ddim_step(model, &x, at, ap)?,
            SamplerKind::Ddpm => ddpm_step(model, &x, at, ap, rng)?,
        };
    }
    if !x.all_finite() {
        return Err(D2cError::NonFiniteOutput("sample".into()));
    }
    Ok(x)
}

/// Draw `n` samples: `x_T ~ N(0, I)` then the reverse chain to `alpha_0`.
pub fn sample(model: &dyn NoiseModel, spec: &SamplerSpec, n: usize, rng: &mut Stream) -> Result<Mat> {
    if n < 1 {
        return Err(D2cError::InvalidParameter("n must be >= 1".into()));
    }
    let start = Mat::from_vec(n, model.dim(), normal_vec(rng, n * model.dim()));
    sample_from(model, spec, start, rng)
}

/// Deterministic inversion: run the implicit update with the level
/// sequence reversed, mapping a clean point to its `alpha_T` code.
pub fn ddim_invert(model: &dyn NoiseModel, schedule: &AlphaSchedule, x_clean: &Mat) -> Result<Mat> {
    let mut x = x_clean.clone();
    for t in 1..=schedule.steps() {
        x = ddim_step(model, &x, schedule.alpha(t - 1), schedule.alpha(t))?;
    }
    if !x.all_finite() {
        return Err(D2cError::NonFiniteOutput("ddim_invert".into()));
    }
    Ok(x)
}

/// Implicit updates along the schedule levels inside
/// `[alpha_from, alpha_to]`, denoising upward in `alpha`.
pub fn partial_diffuse(
    model: &dyn NoiseModel,
    schedule: &AlphaSchedule,
    x: &Mat,
    alpha_from: f64,
    alpha_to: f64,
) -> Result<Mat> {
    if alpha_from > alpha_to {
        return Err(D2cError::InvalidRange(format!(
            "need alpha_from <= alpha_to, got {alpha_from} > {alpha_to}"
        )));
    }
    if alpha_from == alpha_to {
        return Ok(x.clone());
    }
    let mut levels = vec![alpha_from];
    for t in (0..=schedule.steps()).rev() {
        let a = schedule.alpha(t);
        if a > alpha_from && a < alpha_to {
            levels.push(a);
        }
    }
    levels.push(alpha_to);
    let mut out = x.clone();
    for w in levels.windows(2) {
        out = ddim_step(model, &out, w[0], w[1])?;
    }
    Ok(out)
}
