//! Noise-level series and the closed-form Gaussian diffusion formulas:
//! forward noising, exact reverse posterior, and per-step variational loss
//! weights.
//!
//! The level `alpha` interpolates between clean data (`alpha = 1`) and pure
//! Gaussian noise (`alpha -> 0`) via `x_alpha = sqrt(alpha) x + sqrt(1 -
//! alpha) eps`. A schedule holds `alpha_0 = 1 > alpha_1 > ... > alpha_T > 0`.

use crate::error::{D2cError, Result};

/// Strictly decreasing noise levels, `alphas[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaSchedule {
    alphas: Vec<f64>,
}

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(D2cError::InvalidParameter(
                "schedule needs at least alpha_0 and alpha_1".into(),
            ));
        }
        if alphas[0] != 1.0 {
            return Err(D2cError::InvalidParameter(format!(
                "alpha_0 must be exactly 1, got {}",
                alphas[0]
            )));
        }
        for w in alphas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(D2cError::InvalidParameter(format!(
                    "levels must strictly decrease, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        let last = *alphas.last().unwrap();
        if !(last > 0.0 && last.is_finite()) {
            return Err(D2cError::InvalidParameter(format!(
                "alpha_T must stay positive, got {last}"
            )));
        }
        Ok(AlphaSchedule { alphas })
    }

    /// Number of steps T (the series has T + 1 levels).
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_min(&self) -> f64 {
        *self.alphas.last().unwrap()
    }
}

/// Per-step loss weights `w(alpha_t)`, t = 1..T.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    pub weights: Vec<f64>,
    pub kind: WeightKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Uniform,
    Variational,
}

impl WeightFunction {
    /// `w(alpha_t)` for t in 1..=T.
    pub fn at(&self, t: usize) -> f64 {
        self.weights[t - 1]
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Cumulative-product schedule over a linear beta ramp: `alpha_t =
/// prod_{s<=t} (1 - beta_s)` with `beta_s` linearly spaced in
/// `[beta_min, beta_max]`, and `alpha_0 = 1` prepended.
pub fn make_cumulative_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<AlphaSchedule> {
    if steps < 1 {
        return Err(D2cError::InvalidParameter("steps must be >= 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(D2cError::InvalidParameter(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let mut alphas = Vec::with_capacity(steps + 1);
    alphas.push(1.0);
    let mut prod = 1.0;
    for t in 0..steps {
        let frac = if steps == 1 {
            0.0
        } else {
            t as f64 / (steps - 1) as f64
        };
        let beta = beta_min + (beta_max - beta_min) * frac;
        prod *= 1.0 - beta;
        alphas.push(prod);
    }
    AlphaSchedule::new(alphas)
}

/// Evenly strided subsequence of `S + 1` levels keeping both endpoints.
pub fn subsample(schedule: &AlphaSchedule, target_steps: usize) -> Result<AlphaSchedule> {
    let t = schedule.steps();
    if target_steps < 1 || target_steps > t {
        return Err(D2cError::InvalidParameter(format!(
            "subsample steps must be in [1, {t}], got {target_steps}"
        )));
    }
    let alphas = (0..=target_steps)
        .map(|i| {
            // rounded i * T / S in integer arithmetic
            let idx = (2 * i * t + target_steps) / (2 * target_steps);
            schedule.alpha(idx)
        })
        .collect();
    AlphaSchedule::new(alphas)
}

/// `sqrt(alpha) x0 + sqrt(1 - alpha) eps`, elementwise.
pub fn forward_noise(x0: &[f64], alpha: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} elements", x0.len()),
            got: format!("{} elements", eps.len()),
        });
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(D2cError::InvalidParameter(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    let sa = alpha.sqrt();
    let sn = (1.0 - alpha).sqrt();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| sa * x + sn * e)
        .collect())
}

/// Coefficients of the exact Gaussian reverse posterior
/// `q(x_prev | x_t, x0) = N(c0 * x0 + ct * x_t, var I)`.
///
/// Derived by conditioning the joint Gaussian law of `(x_prev, x_t)` given
/// `x0` induced by the Markov forward kernel, rather than transcribed from
/// any printed closed form:
///   c0  = (a_prev - a_t) / (sqrt(a_prev) (1 - a_t))
///   ct  = sqrt(a_t / a_prev) (1 - a_prev) / (1 - a_t)
///   var = (1 - a_prev) / (1 - a_t) * (1 - a_t / a_prev)
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub coeff_x0: f64,
    pub coeff_xt: f64,
    pub variance: f64,
}

pub fn posterior_coeffs(alpha_t: f64, alpha_prev: f64) -> Result<PosteriorCoeffs> {
    for (name, a) in [("alpha_t", alpha_t), ("alpha_prev", alpha_prev)] {
        if !(a > 0.0 && a <= 1.0) {
            return Err(D2cError::InvalidParameter(format!(
                "{name} must be in (0, 1], got {a}"
            )));
        }
    }
    if alpha_prev < alpha_t {
        return Err(D2cError::InvalidParameter(format!(
            "posterior needs alpha_prev >= alpha_t, got {alpha_prev} < {alpha_t}"
        )));
    }
    if alpha_prev == alpha_t {
        return Ok(PosteriorCoeffs {
            coeff_x0: 0.0,
            coeff_xt: 1.0,
            variance: 0.0,
        });
    }
    let (a, b) = (alpha_prev, alpha_t);
    Ok(PosteriorCoeffs {
        coeff_x0: (a - b) / (a.sqrt() * (1.0 - b)),
        coeff_xt: (b / a).sqrt() * (1.0 - a) / (1.0 - b),
        variance: (1.0 - a) / (1.0 - b) * (1.0 - b / a),
    })
}

/// Mean and shared scalar variance of `x_prev` given `x_t` and `x0`.
pub fn posterior_params(
    x_t: &[f64],
    x0: &[f64],
    alpha_t: f64,
    alpha_prev: f64,
) -> Result<(Vec<f64>, f64)> {
    if x_t.len() != x0.len() {
        return Err(D2cError::ShapeMismatch {
            expected: format!("{} elements", x_t.len()),
            got: format!("{} elements", x0.len()),
        });
    }
    let c = posterior_coeffs(alpha_t, alpha_prev)?;
    let mean = x_t
        .iter()
        .zip(x0)
        .map(|(&xt, &x0)| c.coeff_x0 * x0 + c.coeff_xt * xt)
        .collect();
    Ok((mean, c.variance))
}

/// The weights that make the diffusion objective a variational bound:
///   w(alpha_t) = (1 - alpha_t) alpha_{t-1} / (2 (1 - alpha_{t-1})^2 alpha_t)   for t >= 2
///   w(alpha_1) = (1 - alpha_1) / (2 (2 pi)^d alpha_1)
pub fn variational_weights(schedule: &AlphaSchedule, dim: usize) -> Result<WeightFunction> {
    if dim < 1 {
        return Err(D2cError::InvalidParameter("dim must be >= 1".into()));
    }
    let t_max = schedule.steps();
    let mut weights = Vec::with_capacity(t_max);
    let a1 = schedule.alpha(1);
    if a1 >= 1.0 {
        return Err(D2cError::DegenerateSchedule(
            "alpha_1 must be strictly below 1".into(),
        ));
    }
    // log-space for the (2 pi)^d factor
    let log_w1 = (1.0 - a1).ln() - (2.0f64).ln() - dim as f64 * (2.0 * std::f64::consts::PI).ln()
        - a1.ln();
    weights.push(log_w1.exp());
    for t in 2..=t_max {
        let at = schedule.alpha(t);
        let ap = schedule.alpha(t - 1);
        if ap >= 1.0 {
            return Err(D2cError::DegenerateSchedule(format!(
                "alpha_{} must be strictly below 1",
                t - 1
            )));
        }
        weights.push((1.0 - at) * ap / (2.0 * (1.0 - ap).powi(2) * at));
    }
    Ok(WeightFunction {
        weights,
        kind: WeightKind::Variational,
    })
}

pub fn uniform_weights(schedule: &AlphaSchedule) -> WeightFunction {
    WeightFunction {
        weights: vec![1.0; schedule.steps()],
        kind: WeightKind::Uniform,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, stream, Domain};

    #[test]
    fn cumulative_schedule_single_factor() {
        let s = make_cumulative_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.5]);
    }

    #[test]
    fn cumulative_schedule_two_steps() {
        let s = make_cumulative_schedule(2, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas(), &[1.0, 0.5, 0.25]);
    }

    #[test]
    fn cumulative_schedule_default_endpoint() {
        // Oracle: direct product evaluation of the linear beta ramp.
        let (steps, bmin, bmax) = (1000usize, 1e-4, 0.02);
        let mut prod = 1.0;
        for t in 0..steps {
            prod *= 1.0 - (bmin + (bmax - bmin) * t as f64 / (steps - 1) as f64);
        }
        let s = make_cumulative_schedule(steps, bmin, bmax).unwrap();
        assert!((s.alpha_min() - prod).abs() < 1e-18);
        assert!((s.alpha_min() - 4.04e-5).abs() < 1e-6);
        assert!(s.alpha_min() <= 1e-3);
    }

    #[test]
    fn cumulative_schedule_rejects_bad_params() {
        assert!(make_cumulative_schedule(0, 0.1, 0.2).is_err());
        assert!(make_cumulative_schedule(10, 0.0, 0.2).is_err());
        assert!(make_cumulative_schedule(10, 0.3, 0.2).is_err());
        assert!(make_cumulative_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn subsample_identity_and_stride() {
        let s = make_cumulative_schedule(100, 1e-4, 0.02).unwrap();
        let same = subsample(&s, 100).unwrap();
        assert_eq!(s, same);

        let s5 = AlphaSchedule::new(vec![1.0, 0.8, 0.6, 0.4, 0.2]).unwrap();
        let s2 = subsample(&s5, 2).unwrap();
        assert_eq!(s2.alphas(), &[1.0, 0.6, 0.2]);
    }

    #[test]
    fn subsample_endpoints_preserved() {
        // Oracle: index arithmetic on a length-1001 schedule.
        let s = make_cumulative_schedule(1000, 1e-4, 0.02).unwrap();
        let s10 = subsample(&s, 10).unwrap();
        assert_eq!(s10.steps(), 10);
        assert_eq!(s10.alpha(0), 1.0);
        assert_eq!(s10.alpha_min(), s.alpha_min());
        for i in 0..=10 {
            assert_eq!(s10.alpha(i), s.alpha(i * 100));
        }
    }

    #[test]
    fn subsample_out_of_range() {
        let s = make_cumulative_schedule(10, 1e-4, 0.02).unwrap();
        assert!(subsample(&s, 0).is_err());
        assert!(subsample(&s, 11).is_err());
    }

    #[test]
    fn subsample_coarsening_composes() {
        let s = make_cumulative_schedule(240, 1e-4, 0.02).unwrap();
        for (a, b) in [(24usize, 8usize), (60, 12), (120, 5)] {
            let via = subsample(&subsample(&s, a).unwrap(), b).unwrap();
            let direct = subsample(&s, b).unwrap();
            assert_eq!(via, direct, "a={a} b={b}");
        }
    }

    #[test]
    fn forward_noise_values() {
        assert_eq!(forward_noise(&[1.0], 1.0, &[123.0]).unwrap(), vec![1.0]);
        assert_eq!(forward_noise(&[1.0], 0.25, &[0.0]).unwrap(), vec![0.5]);
        let y = forward_noise(&[2.0], 0.5, &[1.0]).unwrap();
        assert!((y[0] - (0.5f64.sqrt() * 2.0 + 0.5f64.sqrt())).abs() < 1e-12);
        assert!((y[0] - 2.1213).abs() < 1e-4);
        assert!(forward_noise(&[1.0, 2.0], 0.5, &[0.0]).is_err());
    }

    /// Independent oracle: condition the explicit 2x2 joint covariance of
    /// (x_prev, x_t) given x0.
    fn posterior_oracle(x_t: f64, x0: f64, b: f64, a: f64) -> (f64, f64) {
        let mu = [a.sqrt() * x0, b.sqrt() * x0];
        let cov = [[1.0 - a, (b / a).sqrt() * (1.0 - a)], [
            (b / a).sqrt() * (1.0 - a),
            1.0 - b,
        ]];
        let mean = mu[0] + cov[0][1] / cov[1][1] * (x_t - mu[1]);
        let var = cov[0][0] - cov[0][1] * cov[0][1] / cov[1][1];
        (mean, var)
    }

    #[test]
    fn posterior_matches_conditioning_oracle() {
        let (mean, var) = posterior_params(&[1.0], &[0.0], 0.25, 0.5).unwrap();
        assert!((mean[0] - 0.4714).abs() < 1e-4);
        assert!((var - 1.0 / 3.0).abs() < 1e-10);
        let (om, ov) = posterior_oracle(1.0, 0.0, 0.25, 0.5);
        assert!((mean[0] - om).abs() < 1e-12);
        assert!((var - ov).abs() < 1e-12);

        let mut rng = stream(11, Domain::Init, 0);
        for _ in 0..1000 {
            let b = 1e-4 + 0.999 * crate::rng::uniform(&mut rng);
            let a = b + (1.0 - 1e-9 - b) * crate::rng::uniform(&mut rng);
            let x0 = 3.0 * normal(&mut rng);
            let xt = 3.0 * normal(&mut rng);
            let (mean, var) = posterior_params(&[xt], &[x0], b, a).unwrap();
            let (om, ov) = posterior_oracle(xt, x0, b, a);
            assert!((mean[0] - om).abs() < 1e-10, "mean {b} {a}");
            assert!((var - ov).abs() < 1e-10, "var {b} {a}");
        }
    }

    #[test]
    fn posterior_degenerate_step_is_identity() {
        let (mean, var) = posterior_params(&[2.5], &[7.0], 0.4, 0.4).unwrap();
        assert_eq!(mean, vec![2.5]);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn posterior_x0_coefficient_limit() {
        // As alpha_t -> 0 the coefficient on x0 tends to sqrt(alpha_prev).
        let a = 0.7;
        for &b in &[1e-3, 1e-6, 1e-9] {
            let c = posterior_coeffs(b, a).unwrap();
            assert!((c.coeff_x0 - a.sqrt()).abs() < 2.0 * b / a.sqrt() + 1e-12);
        }
        let c = posterior_coeffs(1e-12, a).unwrap();
        assert!((c.coeff_x0 - a.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn posterior_rejects_bad_ordering() {
        assert!(posterior_params(&[0.0], &[0.0], 0.5, 0.25).is_err());
    }

    #[test]
    fn variational_weight_values() {
        // hand substitution for t >= 2: alpha_t = 0.5, alpha_prev = 0.8
        let s = AlphaSchedule::new(vec![1.0, 0.8, 0.5]).unwrap();
        let w = variational_weights(&s, 1).unwrap();
        assert!((w.at(2) - 10.0).abs() < 1e-12);

        // hand substitution for t = 1: alpha_1 = 0.99, d = 1
        let s = AlphaSchedule::new(vec![1.0, 0.99, 0.5]).unwrap();
        let w = variational_weights(&s, 1).unwrap();
        let expect = 0.01 / (2.0 * 2.0 * std::f64::consts::PI * 0.99);
        assert!((w.at(1) - expect).abs() < 1e-12);
        assert!((w.at(1) - 8.038e-4).abs() < 1e-6);
    }

    #[test]
    fn uniform_weights_are_one() {
        let s = make_cumulative_schedule(10, 1e-4, 0.02).unwrap();
        let w = uniform_weights(&s);
        assert_eq!(w.kind, WeightKind::Uniform);
        assert!(w.weights.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn variational_weights_positive_finite() {
        let mut rng = stream(3, Domain::Init, 1);
        for trial in 0..50 {
            let steps = 2 + (trial % 20);
            let bmin = 1e-4 + 0.01 * crate::rng::uniform(&mut rng);
            let bmax = bmin + 0.2 * crate::rng::uniform(&mut rng);
            let s = make_cumulative_schedule(steps, bmin, bmax.min(0.999)).unwrap();
            let w = variational_weights(&s, 1 + trial % 8).unwrap();
            assert_eq!(w.len(), steps);
            assert!(w.weights.iter().all(|&x| x > 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn marginal_consistency_analytic_and_moments() {
        // Analytic: forward to alpha_t directly vs forward to alpha_prev
        // composed with the Markov kernel, and vs the posterior-based
        // decomposition; then a two-sample moment check.
        let (b, a) = (0.3f64, 0.75f64);
        let x0 = 1.7;

        // forward kernel composition: mean sqrt(b) x0, var 1 - b
        let mean_chain = (b / a).sqrt() * (a.sqrt() * x0);
        let var_chain = (b / a) * (1.0 - a) + (1.0 - b / a);
        assert!((mean_chain - b.sqrt() * x0).abs() < 1e-12);
        assert!((var_chain - (1.0 - b)).abs() < 1e-12);

        // posterior composition: E[x_prev] and Var[x_prev] from
        // x_t ~ q(.|x0) then x_prev ~ q(.|x_t, x0) must equal forward to a.
        let c = posterior_coeffs(b, a).unwrap();
        let mean_post = c.coeff_x0 * x0 + c.coeff_xt * (b.sqrt() * x0);
        let var_post = c.variance + c.coeff_xt * c.coeff_xt * (1.0 - b);
        assert!((mean_post - a.sqrt() * x0).abs() < 1e-12);
        assert!((var_post - (1.0 - a)).abs() < 1e-12);

        // two-sample z-test on means at 1e5 samples
        let n = 100_000usize;
        let mut rng = stream(99, Domain::Sampler, 0);
        let mut direct = Vec::with_capacity(n);
        let mut chained = Vec::with_capacity(n);
        for _ in 0..n {
            direct.push(forward_noise(&[x0], a, &[normal(&mut rng)]).unwrap()[0]);
            let xt = forward_noise(&[x0], b, &[normal(&mut rng)]).unwrap()[0];
            let (m, v) = posterior_params(&[xt], &[x0], b, a).unwrap();
            chained.push(m[0] + v.sqrt() * normal(&mut rng));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
        let (m1, m2) = (mean(&direct), mean(&chained));
        let (v1, v2) = (var(&direct, m1), var(&chained, m2));
        let z = (m1 - m2).abs() / ((v1 + v2) / n as f64).sqrt();
        assert!(z < 4.0, "z = {z}");
    }
}
