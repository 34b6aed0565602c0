//! Numerical lab for prior holes.
//!
//! A prior hole is a set `S` carrying at least `delta` mass under the prior
//! `p` but at most `epsilon` mass under an aggregate posterior `q`. This
//! module builds the explicit adversarial `q` made of alternating radial
//! shells (`q = 2p` on even shells, `0` on odd shells, `p` outside), and
//! measures its hole mass, KL divergence, exact 1-D 2-Wasserstein distance,
//! the max-gap transport bound, and how Gaussian noising washes the hole
//! out.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{D2cError, Result};

/// The ring construction: `2n` radii splitting the ball of `p`-mass
/// `2 delta` into shells of equal mass `delta / n`.
#[derive(Debug, Clone)]
pub struct RingConstruction {
    pub delta: f64,
    pub n: usize,
    pub dim: usize,
    /// `r_0 = 0 < r_1 < ... < r_2n`, with ball masses `f(r_i) = i delta / n`.
    pub radii: Vec<f64>,
}

/// Measured properties of one construction.
#[derive(Debug, Clone)]
pub struct HoleReport {
    pub delta: f64,
    pub n: usize,
    pub dim: usize,
    /// `p`-mass of the hole set `S` (union of odd shells).
    pub p_mass_hole: f64,
    /// `q`-mass of `S`.
    pub q_mass_hole: f64,
    /// `KL(q || p)` by quadrature.
    pub kl: f64,
    /// Exact 2-Wasserstein distance via the quantile integral (`dim = 1` only).
    pub w2_exact: Option<f64>,
    /// `max_k (r_{2k+2} - r_{2k})^2`, the transport-map gap bound on the
    /// squared cost.
    pub w2_gap_bound: f64,
}

/// Gaussian mass of the centered ball of radius `r` in `dim` dimensions.
///
/// `dim = 1`: `erf(r / sqrt(2))`; `dim = 2`: `1 - exp(-r^2 / 2)`.
pub fn gaussian_ball_mass(r: f64, dim: usize) -> f64 {
    assert!(r >= 0.0, "radius must be nonnegative");
    match dim {
        1 => libm::erf(r / std::f64::consts::SQRT_2),
        2 => 1.0 - (-r * r / 2.0).exp(),
        _ => panic!("only dim 1 and 2 are supported"),
    }
}

/// Radius whose ball mass equals `m`, by bisection to 1e-12.
pub fn invert_mass(m: f64, dim: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&m) {
        return Err(D2cError::InvalidParameter(format!(
            "mass must be in [0, 1), got {m}"
        )));
    }
    if m == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while gaussian_ball_mass(hi, dim) < m {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(D2cError::InvalidParameter(format!(
                "mass {m} unreachable"
            )));
        }
    }
    let mut lo = 0.0;
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if gaussian_ball_mass(mid, dim) < m {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Build the shell radii so ball masses form the arithmetic progression
/// `0, delta/n, ..., 2 delta`.
pub fn build_rings(delta: f64, n: usize, dim: usize) -> Result<RingConstruction> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(D2cError::InvalidParameter(format!(
            "delta must be in (0, 0.5), got {delta}"
        )));
    }
    if n < 1 {
        return Err(D2cError::InvalidParameter("n must be >= 1".into()));
    }
    if dim != 1 && dim != 2 {
        return Err(D2cError::InvalidParameter(format!(
            "dim must be 1 or 2, got {dim}"
        )));
    }
    let radii = (0..=2 * n)
        .map(|i| invert_mass(i as f64 * delta / n as f64, dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(RingConstruction {
        delta,
        n,
        dim,
        radii,
    })
}

impl RingConstruction {
    /// Density ratio `q(z) / p(z)` as a function of the radius `|z|`:
    /// 2 on even shells, 0 on odd shells, 1 outside.
    pub fn density_ratio(&self, r: f64) -> f64 {
        let outer = *self.radii.last().unwrap();
        if r >= outer {
            return 1.0;
        }
        // shells are [r_i, r_{i+1}); even i carries 2p, odd i carries 0
        let i = match self
            .radii
            .binary_search_by(|probe| probe.partial_cmp(&r).unwrap())
        {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        if i % 2 == 0 {
            2.0
        } else {
            0.0
        }
    }

    /// Shell intervals `[r_i, r_{i+1})` with their ratio constants,
    /// plus the outside region encoded by the caller.
    fn shells(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.radii.windows(2).enumerate().map(|(i, w)| {
            let c = if i % 2 == 0 { 2.0 } else { 0.0 };
            (w[0], w[1], c)
        })
    }
}

/// Radial density of the Gaussian in `dim` dimensions, normalized so that
/// integrating over `r` in `[0, inf)` gives 1.
fn radial_density(r: f64, dim: usize) -> f64 {
    match dim {
        1 => (2.0 / std::f64::consts::PI).sqrt() * (-r * r / 2.0).exp(),
        2 => r * (-r * r / 2.0).exp(),
        _ => unreachable!(),
    }
}

/// Composite Simpson with interval doubling until the estimate moves by
/// less than `tol` (relative to scale 1).
fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let mut n = 64usize;
    let mut prev = simpson_fixed(f, a, b, n);
    for _ in 0..16 {
        n *= 2;
        let cur = simpson_fixed(f, a, b, n);
        if (cur - prev).abs() <= tol * (1.0 + cur.abs()) {
            return Ok(cur);
        }
        prev = cur;
    }
    Err(D2cError::QuadratureNonConvergence(format!(
        "simpson on [{a}, {b}]"
    )))
}

fn simpson_fixed<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    acc * h / 3.0
}

/// `p`- and `q`-mass of the hole set `S` (odd shells), by quadrature.
pub fn hole_masses(c: &RingConstruction) -> Result<(f64, f64)> {
    let mut p_mass = 0.0;
    let mut q_mass = 0.0;
    for (a, b, ratio) in c.shells() {
        if ratio == 0.0 {
            let m = simpson(&|r| radial_density(r, c.dim), a, b, 1e-12)?;
            p_mass += m;
            q_mass += ratio * m;
        }
    }
    Ok((p_mass, q_mass))
}

/// Total `q` mass by quadrature over the shell region plus the analytic
/// outside mass; sanity check that the construction is a distribution.
pub fn total_q_mass(c: &RingConstruction) -> Result<f64> {
    let mut inside = 0.0;
    for (a, b, ratio) in c.shells() {
        if ratio > 0.0 {
            inside += ratio * simpson(&|r| radial_density(r, c.dim), a, b, 1e-12)?;
        }
    }
    let outer = *c.radii.last().unwrap();
    Ok(inside + (1.0 - gaussian_ball_mass(outer, c.dim)))
}

/// `KL(q || p)` by quadrature. The analytic value is `2 delta ln 2`.
pub fn kl_divergence(c: &RingConstruction) -> Result<f64> {
    let mut kl = 0.0;
    for (a, b, ratio) in c.shells() {
        if ratio > 0.0 {
            let m = simpson(&|r| radial_density(r, c.dim), a, b, 1e-12)?;
            kl += ratio * m * ratio.ln();
        }
    }
    // outside the shells q = p contributes nothing
    Ok(kl)
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile, Newton-polished to full precision.
fn norm_quantile(u: f64) -> f64 {
    let mut x = Normal::standard().inverse_cdf(u);
    for _ in 0..2 {
        let pdf = norm_pdf(x);
        if pdf <= f64::MIN_POSITIVE {
            break;
        }
        x -= (norm_cdf(x) - u) / pdf;
    }
    x
}

/// Exact 2-Wasserstein distance `W2(q, p)` in one dimension via the
/// quantile-function integral `W2^2 = int_0^1 (Fq^-1(u) - Fp^-1(u))^2 du`.
///
/// Quantiles agree outside `u in (1/2 - delta, 1/2 + delta)` because the
/// densities agree beyond the outermost shell, so the integral is taken
/// over the symmetric hole band only.
pub fn wasserstein2_exact_1d(c: &RingConstruction) -> Result<f64> {
    if c.dim != 1 {
        return Err(D2cError::InvalidParameter(
            "exact transport needs dim = 1".into(),
        ));
    }
    let n = c.n as f64;
    let step = c.delta / n; // one-sided q-mass per even shell

    // Fq^-1(0.5 + m) inside even shell k: solve 2 (Phi(x) - Phi(r_2k)) = m - k step
    let q_quantile = |m: f64| -> f64 {
        if m >= c.delta {
            return norm_quantile(0.5 + m);
        }
        let k = ((m / step).floor() as usize).min(c.n - 1);
        let base = norm_cdf(c.radii[2 * k]);
        norm_quantile(base + 0.5 * (m - k as f64 * step))
    };

    // integrate per even shell in u to keep the integrand smooth
    let mut total = 0.0;
    let nodes_per_piece = (20_000usize).div_ceil(c.n).max(2_000);
    for k in 0..c.n {
        let m_lo = k as f64 * step;
        let mut piece_prev = f64::NAN;
        let mut nodes = nodes_per_piece;
        let mut piece = 0.0;
        for _ in 0..12 {
            let h = step / nodes as f64;
            piece = 0.0;
            for i in 0..nodes {
                let m = m_lo + (i as f64 + 0.5) * h;
                let d = q_quantile(m) - norm_quantile(0.5 + m);
                piece += d * d * h;
            }
            if !piece_prev.is_nan()
                && (piece - piece_prev).abs() <= 1e-10 * (1.0 + piece.abs())
            {
                break;
            }
            piece_prev = piece;
            nodes *= 2;
        }
        total += piece;
    }
    // the band below u = 1/2 mirrors the band above
    Ok((2.0 * total).sqrt())
}

/// `max_k (r_{2k+2} - r_{2k})^2`: the displacement bound of the shell-merging
/// transport map, an upper bound on the squared transport cost.
pub fn w2_bound(c: &RingConstruction) -> f64 {
    (0..c.n)
        .map(|k| {
            let gap = c.radii[2 * k + 2] - c.radii[2 * k];
            gap * gap
        })
        .fold(0.0, f64::max)
}

/// Mixture weight `M(y) = q_alpha(y) / phi(y)` of the noised marginal
/// `q_alpha = law(sqrt(alpha) z + sqrt(1 - alpha) eps)`, `z ~ q`.
///
/// Each radial segment with constant density ratio `ratio` contributes
/// `ratio * (Phi((b - sqrt(alpha) y)/s) - Phi((a - sqrt(alpha) y)/s))`
/// with `s = sqrt(1 - alpha)`, because the segment integral of
/// `phi(z) N(y; sqrt(alpha) z, 1 - alpha)` collapses to
/// `phi(y) N(z; sqrt(alpha) y, 1 - alpha)`.
fn noised_ratio(c: &RingConstruction, alpha: f64, y: f64) -> f64 {
    let s = (1.0 - alpha).sqrt();
    let sa = alpha.sqrt();
    let outer = *c.radii.last().unwrap();
    let seg = |a: f64, b: f64| -> f64 { norm_cdf((b - sa * y) / s) - norm_cdf((a - sa * y) / s) };
    let mut m = 0.0;
    for (a, b, ratio) in c.shells() {
        if ratio > 0.0 {
            // both signed segments [-b, -a] and [a, b]
            m += ratio * (seg(a, b) + seg(-b, -a));
        }
    }
    m += seg(outer, f64::INFINITY) + seg(f64::NEG_INFINITY, -outer);
    m
}

/// `KL(q_alpha || N(0, 1))` for the noised marginal, by quadrature
/// (`dim = 1`). At `alpha = 1` this reduces to `KL(q || p) = 2 delta ln 2`.
pub fn noised_hole_kl(c: &RingConstruction, alpha: f64) -> Result<f64> {
    if c.dim != 1 {
        return Err(D2cError::InvalidParameter(
            "noised-hole analysis needs dim = 1".into(),
        ));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(D2cError::InvalidParameter(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    if alpha == 1.0 {
        return kl_divergence(c);
    }
    let phi = |y: f64| (-y * y / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let integrand = |y: f64| {
        let m = noised_ratio(c, alpha, y);
        if m <= 0.0 {
            0.0
        } else {
            phi(y) * m * m.ln()
        }
    };
    simpson(&integrand, -10.0, 10.0, 1e-11)
}

/// Hole deficit `delta' - epsilon'` of the noised marginal measured on the
/// scaled hole set `sqrt(alpha) S`. Pinsker's inequality caps this by
/// `sqrt(KL / 2)`.
pub fn noised_hole_deficit(c: &RingConstruction, alpha: f64) -> Result<f64> {
    if c.dim != 1 {
        return Err(D2cError::InvalidParameter(
            "noised-hole analysis needs dim = 1".into(),
        ));
    }
    let sa = alpha.sqrt();
    let phi = |y: f64| (-y * y / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut p_mass = 0.0;
    let mut q_mass = 0.0;
    for (a, b, ratio) in c.shells() {
        if ratio == 0.0 {
            let (a, b) = (sa * a, sa * b);
            p_mass += 2.0 * (norm_cdf(b) - norm_cdf(a));
            if alpha == 1.0 {
                // q vanishes on the hole set itself
                continue;
            }
            q_mass += 2.0 * simpson(&|y| phi(y) * noised_ratio(c, alpha, y), a, b, 1e-11)?;
        }
    }
    Ok(p_mass - q_mass)
}

/// Full report for one construction.
pub fn hole_report(c: &RingConstruction) -> Result<HoleReport> {
    let (p_mass_hole, q_mass_hole) = hole_masses(c)?;
    let kl = kl_divergence(c)?;
    let w2_exact = if c.dim == 1 {
        Some(wasserstein2_exact_1d(c)?)
    } else {
        None
    };
    Ok(HoleReport {
        delta: c.delta,
        n: c.n,
        dim: c.dim,
        p_mass_hole,
        q_mass_hole,
        kl,
        w2_exact,
        w2_gap_bound: w2_bound(c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent erf oracle: Taylor series for small x, continued
    /// fraction of the complementary function for large x.
    fn erf_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return -erf_oracle(-x);
        }
        if x < 3.0 {
            // erf(x) = 2/sqrt(pi) sum (-1)^k x^(2k+1) / (k! (2k+1))
            let mut term = x;
            let mut sum = x;
            for k in 1..200 {
                term *= -x * x / k as f64;
                sum += term / (2.0 * k as f64 + 1.0);
                if term.abs() < 1e-18 {
                    break;
                }
            }
            2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + 1/2 / (x + 2/2 / (x + ...)))
            let mut f = 0.0;
            for k in (1..=60).rev() {
                f = 0.5 * k as f64 / (x + f);
            }
            1.0 - (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
        }
    }

    #[test]
    fn ball_mass_values() {
        assert_eq!(gaussian_ball_mass(0.0, 1), 0.0);
        assert_eq!(gaussian_ball_mass(0.0, 2), 0.0);
        // d=1, R=1 -> 0.682689...
        let m = gaussian_ball_mass(1.0, 1);
        assert!((m - 0.682689492137086).abs() < 1e-12);
        assert!((m - erf_oracle(1.0 / std::f64::consts::SQRT_2)).abs() < 1e-13);
        for &r in &[0.3, 0.9, 1.7, 2.5, 3.2, 4.1] {
            let want = erf_oracle(r / std::f64::consts::SQRT_2);
            assert!((gaussian_ball_mass(r, 1) - want).abs() < 1e-13, "r={r}");
        }
    }

    #[test]
    fn invert_mass_roundtrip() {
        assert_eq!(invert_mass(0.0, 1).unwrap(), 0.0);
        for dim in [1, 2] {
            for &r in &[0.1, 0.5, 1.0, 1.9, 2.7] {
                let m = gaussian_ball_mass(r, dim);
                let back = invert_mass(m, dim).unwrap();
                assert!((back - r).abs() < 1e-10, "dim={dim} r={r} back={back}");
            }
        }
        assert!(invert_mass(1.0, 1).is_err());
        assert!(invert_mass(-0.1, 1).is_err());
    }

    #[test]
    fn rings_base_case() {
        let c = build_rings(0.25, 1, 1).unwrap();
        assert_eq!(c.radii.len(), 3);
        assert_eq!(c.radii[0], 0.0);
        assert!((c.radii[1] - invert_mass(0.25, 1).unwrap()).abs() < 1e-12);
        assert!((c.radii[2] - invert_mass(0.5, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rings_arithmetic_progression_and_outer_mass() {
        for dim in [1, 2] {
            for &(delta, n) in &[(0.49, 1usize), (0.49, 4), (0.3, 2), (0.1, 8)] {
                let c = build_rings(delta, n, dim).unwrap();
                for (i, &r) in c.radii.iter().enumerate() {
                    let want = i as f64 * delta / n as f64;
                    assert!(
                        (gaussian_ball_mass(r, dim) - want).abs() < 1e-10,
                        "dim={dim} delta={delta} n={n} i={i}"
                    );
                }
            }
        }
    }

    #[test]
    fn rings_reject_bad_delta() {
        assert!(build_rings(0.0, 1, 1).is_err());
        assert!(build_rings(0.5, 1, 1).is_err());
        assert!(build_rings(0.25, 0, 1).is_err());
        assert!(build_rings(0.25, 1, 3).is_err());
    }

    #[test]
    fn q_is_a_distribution() {
        for dim in [1, 2] {
            for &(delta, n) in &[(0.49, 1usize), (0.49, 4), (0.2, 3)] {
                let c = build_rings(delta, n, dim).unwrap();
                let mass = total_q_mass(&c).unwrap();
                assert!((mass - 1.0).abs() < 1e-8, "dim={dim} mass={mass}");
            }
        }
    }

    #[test]
    fn hole_has_full_p_mass_and_no_q_mass() {
        for dim in [1, 2] {
            let c = build_rings(0.49, 4, dim).unwrap();
            let (p, q) = hole_masses(&c).unwrap();
            assert!((p - 0.49).abs() < 1e-6);
            assert!(q.abs() <= 1e-10);
        }
    }

    #[test]
    fn kl_matches_analytic() {
        // delta = 0.49 -> 0.98 ln 2, strictly below ln 2
        let c = build_rings(0.49, 1, 1).unwrap();
        let kl = kl_divergence(&c).unwrap();
        assert!((kl - 0.98 * std::f64::consts::LN_2).abs() < 1e-3);
        assert!((kl - 0.67928).abs() < 1e-4);
        assert!(kl < std::f64::consts::LN_2);

        // independent of n
        for n in [2, 4, 8] {
            let cn = build_rings(0.49, n, 1).unwrap();
            assert!((kl_divergence(&cn).unwrap() - kl).abs() < 1e-9);
        }

        // delta -> 0 drives KL -> 0
        let small = build_rings(1e-4, 2, 1).unwrap();
        assert!(kl_divergence(&small).unwrap() < 1e-3);

        // dim 2 agrees with the same analytic value
        let c2 = build_rings(0.3, 2, 2).unwrap();
        assert!((kl_divergence(&c2).unwrap() - 0.6 * std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn w2_decreases_in_n() {
        let w: Vec<f64> = [1usize, 2, 4]
            .iter()
            .map(|&n| wasserstein2_exact_1d(&build_rings(0.49, n, 1).unwrap()).unwrap())
            .collect();
        assert!(w[2] < w[1] && w[1] < w[0], "{w:?}");
    }

    #[test]
    fn w2_ratio_vanishes() {
        let mut n = 2usize;
        let mut prev = wasserstein2_exact_1d(&build_rings(0.49, n, 1).unwrap()).unwrap();
        for _ in 0..3 {
            n *= 2;
            let cur = wasserstein2_exact_1d(&build_rings(0.49, n, 1).unwrap()).unwrap();
            assert!(cur / prev < 0.75, "n={n}: {cur} / {prev}");
            prev = cur;
        }
    }

    #[test]
    fn w2_zero_when_q_equals_p() {
        // degenerate construction via a tiny delta stands in for delta = 0
        let c = build_rings(1e-9, 1, 1).unwrap();
        assert!(wasserstein2_exact_1d(&c).unwrap() < 1e-6);
    }

    #[test]
    fn gap_bound_dominates_exact_w2() {
        for &(delta, n) in &[(0.49, 1usize), (0.49, 2), (0.49, 8), (0.3, 3), (0.1, 5)] {
            let c = build_rings(delta, n, 1).unwrap();
            let w2 = wasserstein2_exact_1d(&c).unwrap();
            let bound = w2_bound(&c);
            assert!(bound >= w2 * w2, "delta={delta} n={n}: {bound} < {}", w2 * w2);
        }
    }

    #[test]
    fn gap_bound_base_value_and_monotonicity() {
        let c = build_rings(0.49, 1, 1).unwrap();
        let b = w2_bound(&c);
        let r2 = invert_mass(0.98, 1).unwrap();
        assert!((r2 - 2.3263).abs() < 1e-4);
        assert!((b - r2 * r2).abs() < 1e-9);
        assert!((b - 5.41).abs() < 0.01);

        let mut prev = b;
        for n in [2usize, 4, 8] {
            let cur = w2_bound(&build_rings(0.49, n, 1).unwrap());
            assert!(cur < prev, "n={n}");
            prev = cur;
        }
    }

    #[test]
    fn noised_kl_limits_and_monotonicity() {
        let c = build_rings(0.49, 4, 1).unwrap();
        let kl1 = noised_hole_kl(&c, 1.0).unwrap();
        assert!((kl1 - 0.98 * std::f64::consts::LN_2).abs() < 1e-3);

        let kl09 = noised_hole_kl(&c, 0.9).unwrap();
        let kl05 = noised_hole_kl(&c, 0.5).unwrap();
        let kl01 = noised_hole_kl(&c, 0.1).unwrap();
        assert!(kl09 < kl1 && kl05 < kl09 && kl01 < kl05, "{kl1} {kl09} {kl05} {kl01}");
        assert!(kl01 < 1e-3, "kl at alpha=0.1: {kl01}");

        // alpha -> 0: pure Gaussian
        let kl_tiny = noised_hole_kl(&c, 1e-4).unwrap();
        assert!(kl_tiny < 1e-7, "{kl_tiny}");
    }

    #[test]
    fn pinsker_bound_holds_for_noised_marginal() {
        let c = build_rings(0.49, 4, 1).unwrap();
        for &alpha in &[1.0, 0.9, 0.5, 0.1] {
            let deficit = noised_hole_deficit(&c, alpha).unwrap();
            let kl = noised_hole_kl(&c, alpha).unwrap();
            assert!(
                deficit <= (kl / 2.0).sqrt() + 1e-6,
                "alpha={alpha}: {deficit} > sqrt({kl}/2)"
            );
        }
    }
}
