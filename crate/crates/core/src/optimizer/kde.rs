//! One-dimensional kernel density estimation on a bounded interval.
//!
//! The estimator is a mixture of truncated Gaussians — one per observed
//! point — plus a single uniform component over the interval. By default
//! every component carries equal weight `1/(n+1)`; [`fit_weighted`] accepts
//! relative kernel weights instead (the uniform prior always counts as one
//! more unit-weight observation). The uniform component keeps the density
//! strictly positive everywhere, so density ratios stay finite. Each
//! truncated kernel renormalizes by its in-interval mass, so the mixture
//! integrates to one exactly.
//!
//! [`fit_weighted`]: TruncatedGaussianKde::fit_weighted

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::scalar::Scalar;

/// How the kernel bandwidth is chosen at fit time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthRule {
    /// Scott's rule: sample standard deviation times `n^(-1/5)`, clipped from
    /// below by a count-dependent floor (see [`SCOTT_CLIP_MAX_DIVISOR`]).
    Scott,
    /// A fixed bandwidth.
    Fixed(f64),
}

/// Fixed bandwidths are floored at 1% of the interval width, so a zero or
/// near-zero value cannot collapse a kernel into a spike.
pub const BANDWIDTH_FLOOR_FRACTION: f64 = 0.01;

/// Scott's rule is instead floored at `width / min(100, n + 2)` for `n`
/// centers. A handful of observations says little about scale, and once the
/// fit set clusters its sample deviation shrinks toward zero, which would
/// freeze proposals onto the incumbents; the count-dependent floor keeps
/// early fits exploratory and relaxes to 1% of the width as evidence
/// accumulates.
pub const SCOTT_CLIP_MAX_DIVISOR: f64 = 100.0;

impl Serialize for BandwidthRule {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            BandwidthRule::Scott => serializer.serialize_str("scott"),
            BandwidthRule::Fixed(h) => serializer.serialize_f64(*h),
        }
    }
}

impl<'de> Deserialize<'de> for BandwidthRule {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl de::Visitor<'_> for Visitor {
            type Value = BandwidthRule;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("the string \"scott\" or a positive number")
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
                if v == "scott" {
                    Ok(BandwidthRule::Scott)
                } else {
                    Err(E::custom(format!("unknown bandwidth rule {v:?}")))
                }
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Self::Value, E> {
                if v.is_finite() && v >= 0.0 {
                    Ok(BandwidthRule::Fixed(v))
                } else {
                    Err(E::custom(format!("bandwidth {v} must be finite and >= 0")))
                }
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
                self.visit_f64(v as f64)
            }
        }
        deserializer.deserialize_any(Visitor)
    }
}

/// Standard normal CDF.
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

const INV_SQRT_TAU: f64 = 0.398_942_280_401_432_7; // 1/sqrt(2*pi)

/// Mixture of truncated Gaussians plus one uniform component on `[low, high]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGaussianKde<F: Scalar> {
    low: F,
    high: F,
    bandwidth: F,
    /// Mixture weight of the uniform component.
    uniform_weight: F,
    centers: Vec<F>,
    /// Mixture weight of each kernel; together with the uniform weight these
    /// sum to one.
    kernel_weights: Vec<F>,
    /// In-interval mass of the untruncated kernel at each center.
    kernel_mass: Vec<F>,
}

impl<F: Scalar> TruncatedGaussianKde<F> {
    /// Fit a density to `centers` (all within `[low, high]`), weighting every
    /// component equally: the uniform prior counts as one more observation.
    ///
    /// An empty center list yields the pure uniform density.
    pub fn fit(centers: Vec<F>, low: F, high: F, rule: BandwidthRule) -> Self {
        let weights = vec![1.0; centers.len()];
        Self::fit_weighted(centers, &weights, low, high, rule)
    }

    /// Fit a density to `centers` with relative kernel `weights` (positive,
    /// not necessarily normalized). The uniform prior component counts as one
    /// more observation of unit weight, so `fit` is the all-ones special
    /// case.
    pub fn fit_weighted(
        centers: Vec<F>,
        weights: &[f64],
        low: F,
        high: F,
        rule: BandwidthRule,
    ) -> Self {
        assert!(low < high, "degenerate interval");
        assert_eq!(centers.len(), weights.len(), "one weight per center");
        assert!(
            weights.iter().all(|w| w.is_finite() && *w > 0.0),
            "kernel weights must be finite and positive"
        );
        let width = (high - low).to_f64_lossy();
        let n = centers.len();
        let floor = match rule {
            BandwidthRule::Fixed(_) => BANDWIDTH_FLOOR_FRACTION * width,
            BandwidthRule::Scott => width / SCOTT_CLIP_MAX_DIVISOR.min(1.25 * (n as f64 + 2.0)),
        };
        let h = match rule {
            BandwidthRule::Fixed(h) => h,
            BandwidthRule::Scott => {
                if n < 2 {
                    0.0
                } else {
                    let mean =
                        centers.iter().map(|c| c.to_f64_lossy()).sum::<f64>() / n as f64;
                    let var = centers
                        .iter()
                        .map(|c| (c.to_f64_lossy() - mean).powi(2))
                        .sum::<f64>()
                        / (n as f64 - 1.0);
                    var.sqrt() * (n as f64).powf(-0.2)
                }
            }
        };
        let bandwidth = h.max(floor);
        let kernel_mass = centers
            .iter()
            .map(|c| {
                let c = c.to_f64_lossy();
                let mass = normal_cdf((width + low.to_f64_lossy() - c) / bandwidth)
                    - normal_cdf((low.to_f64_lossy() - c) / bandwidth);
                F::from_f64_lossy(mass.max(f64::MIN_POSITIVE))
            })
            .collect();
        let total: f64 = weights.iter().sum::<f64>() + 1.0;
        let kernel_weights = weights
            .iter()
            .map(|w| F::from_f64_lossy(w / total))
            .collect();
        Self {
            low,
            high,
            bandwidth: F::from_f64_lossy(bandwidth),
            uniform_weight: F::from_f64_lossy(1.0 / total),
            centers,
            kernel_weights,
            kernel_mass,
        }
    }

    pub fn low(&self) -> F {
        self.low
    }

    pub fn high(&self) -> F {
        self.high
    }

    pub fn bandwidth(&self) -> F {
        self.bandwidth
    }

    pub fn centers(&self) -> &[F] {
        &self.centers
    }

    /// Density at `x`; zero outside the interval.
    pub fn pdf(&self, x: F) -> F {
        if x < self.low || x > self.high {
            return F::zero();
        }
        let xf = x.to_f64_lossy();
        let h = self.bandwidth.to_f64_lossy();
        let width = (self.high - self.low).to_f64_lossy();
        let w = self.uniform_weight.to_f64_lossy();
        // Uniform component first, then one truncated kernel per center.
        let mut total = w / width;
        for ((c, kw), mass) in self
            .centers
            .iter()
            .zip(&self.kernel_weights)
            .zip(&self.kernel_mass)
        {
            let z = (xf - c.to_f64_lossy()) / h;
            total += kw.to_f64_lossy() * (-0.5 * z * z).exp() * INV_SQRT_TAU
                / (h * mass.to_f64_lossy());
        }
        F::from_f64_lossy(total)
    }

    /// Natural log of the density (finite inside the interval, since the
    /// uniform component keeps the mixture strictly positive there).
    pub fn ln_pdf(&self, x: F) -> F {
        self.pdf(x).max(F::from_f64_lossy(f64::MIN_POSITIVE)).ln()
    }

    /// Draw one sample: pick a component by its mixture weight, then sample
    /// within the interval.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> F {
        let low = self.low.to_f64_lossy();
        let high = self.high.to_f64_lossy();
        let mut r = rng.random::<f64>() - self.uniform_weight.to_f64_lossy();
        if r >= 0.0 {
            for (c, kw) in self.centers.iter().zip(&self.kernel_weights) {
                r -= kw.to_f64_lossy();
                if r < 0.0 {
                    let h = self.bandwidth.to_f64_lossy();
                    let z: f64 = StandardNormal.sample(rng);
                    // Clamp out-of-range draws to the nearest bound rather
                    // than re-drawing: kernels centered near an edge then
                    // concentrate proposals exactly on it, so boundary optima
                    // stay reachable.
                    return F::from_f64_lossy((c.to_f64_lossy() + h * z).clamp(low, high));
                }
            }
        }
        // The uniform component, doubling as the guard against the weight
        // sum undershooting one by floating-point dust.
        F::from_f64_lossy(low + (high - low) * rng.random::<f64>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Composite Simpson quadrature over [low, high].
    fn integrate(kde: &TruncatedGaussianKde<f64>, intervals: usize) -> f64 {
        let (low, high) = (kde.low(), kde.high());
        let n = intervals + intervals % 2; // even interval count
        let step = (high - low) / n as f64;
        let mut total = kde.pdf(low) + kde.pdf(high);
        for i in 1..n {
            let weight = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += weight * kde.pdf(low + step * i as f64);
        }
        total * step / 3.0
    }

    #[test]
    fn density_integrates_to_one() {
        let kde = TruncatedGaussianKde::fit(
            vec![0.1, 0.5, 0.52, 0.9],
            0.0,
            1.0,
            BandwidthRule::Fixed(0.05),
        );
        assert!((integrate(&kde, 10_000) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn empty_fit_is_the_uniform_density() {
        let kde = TruncatedGaussianKde::fit(vec![], -1.0, 1.0, BandwidthRule::Scott);
        assert_eq!(kde.pdf(0.0), 0.5);
        assert_eq!(kde.pdf(-1.0), 0.5);
        assert_eq!(kde.pdf(1.5), 0.0);
        assert!((integrate(&kde, 100) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn density_vanishes_outside_bounds() {
        let kde = TruncatedGaussianKde::fit(vec![0.5], 0.0, 1.0, BandwidthRule::Fixed(0.1));
        assert_eq!(kde.pdf(-0.01), 0.0);
        assert_eq!(kde.pdf(1.01), 0.0);
        assert!(kde.pdf(0.5) > 0.0);
    }

    #[test]
    fn scott_bandwidth_shrinks_with_sample_count() {
        let few = TruncatedGaussianKde::fit(vec![0.2, 0.8], 0.0, 1.0, BandwidthRule::Scott);
        let centers: Vec<f64> = (0..200).map(|i| 0.2 + 0.6 * (i as f64 / 199.0)).collect();
        let many = TruncatedGaussianKde::fit(centers, 0.0, 1.0, BandwidthRule::Scott);
        assert!(many.bandwidth() < few.bandwidth());
    }

    #[test]
    fn fixed_bandwidth_is_floored_at_one_percent_of_range() {
        let fixed = TruncatedGaussianKde::fit(vec![0.5], 0.0, 2.0, BandwidthRule::Fixed(0.0));
        assert_eq!(fixed.bandwidth(), 0.02);
        // Above the floor the requested value is used verbatim.
        let wide = TruncatedGaussianKde::fit(vec![0.5], 0.0, 2.0, BandwidthRule::Fixed(0.5));
        assert_eq!(wide.bandwidth(), 0.5);
    }

    #[test]
    fn scott_clip_shrinks_with_center_count() {
        // Identical centers give zero sample deviation; the count-dependent
        // clip applies and relaxes as the fit set grows.
        let three = TruncatedGaussianKde::fit(vec![0.5; 3], 0.0, 2.0, BandwidthRule::Scott);
        assert_eq!(three.bandwidth(), 2.0 / 5.0);
        let eight = TruncatedGaussianKde::fit(vec![0.5; 8], 0.0, 2.0, BandwidthRule::Scott);
        assert_eq!(eight.bandwidth(), 2.0 / 10.0);
        // The divisor caps at 100, leaving 1% of the width as the final floor.
        let many = TruncatedGaussianKde::fit(vec![0.5; 300], 0.0, 2.0, BandwidthRule::Scott);
        assert_eq!(many.bandwidth(), 0.02);
    }

    #[test]
    fn truncation_renormalizes_mass_near_the_boundary() {
        // A center on the boundary loses half its kernel mass to truncation;
        // the renormalized density there must exceed the untruncated value.
        let kde = TruncatedGaussianKde::fit(vec![0.0], 0.0, 1.0, BandwidthRule::Fixed(0.05));
        let untruncated_peak = INV_SQRT_TAU / 0.05;
        let mixture_peak = kde.pdf(0.0) * 2.0; // undo the 1/(n+1) weight; uniform adds 1
        assert!(mixture_peak - 1.0 > untruncated_peak * 1.9);
        assert!((integrate(&kde, 10_000) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn samples_stay_in_bounds_and_follow_seeds() {
        let kde = TruncatedGaussianKde::fit(
            vec![0.05, 0.95],
            0.0,
            1.0,
            BandwidthRule::Fixed(0.2),
        );
        let mut a = ChaCha12Rng::seed_from_u64(9);
        let mut b = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..1_000 {
            let x = kde.sample(&mut a);
            assert!((0.0..=1.0).contains(&x));
            assert_eq!(x, kde.sample(&mut b));
        }
    }

    #[test]
    fn bandwidth_rule_serde_round_trips() {
        assert_eq!(serde_json::to_string(&BandwidthRule::Scott).unwrap(), "\"scott\"");
        assert_eq!(serde_json::to_string(&BandwidthRule::Fixed(0.1)).unwrap(), "0.1");
        let scott: BandwidthRule = serde_json::from_str("\"scott\"").unwrap();
        assert_eq!(scott, BandwidthRule::Scott);
        let fixed: BandwidthRule = serde_json::from_str("0.25").unwrap();
        assert_eq!(fixed, BandwidthRule::Fixed(0.25));
        assert!(serde_json::from_str::<BandwidthRule>("\"silverman\"").is_err());
        assert!(serde_json::from_str::<BandwidthRule>("-1.0").is_err());
    }
}
