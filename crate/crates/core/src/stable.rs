//! Heavy-tail index estimation and a symmetric α-stable sampler.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum nonzero samples the estimator accepts.
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    /// Estimate clipped into (0, 2].
    pub alpha_hat: f64,
    /// Estimate before clipping; may exceed 2 or be negative on short or non-stable data.
    pub raw: f64,
    /// Nonzero samples that entered the estimate.
    pub sample_count: usize,
    pub epoch: Option<usize>,
}

/// Block-sum log-moment estimator of the stability index.
///
/// Exact zeros are dropped. With `N'` remaining samples, `K1 = floor(√N')`,
/// `K2 = floor(N'/K1)` and the first `K1·K2` samples split into `K2` blocks of
/// `K1`, the estimate is
/// `1/α = (mean_j ln|Y_j| − mean_i ln|X_i|) / ln K1` where `Y_j` are the block sums.
pub fn estimate_alpha(samples: &[f64]) -> Result<AlphaEstimate> {
    if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("non-finite sample {bad}")));
    }
    let kept: Vec<f64> = samples.iter().copied().filter(|&x| x != 0.0).collect();
    let zeros = samples.len() - kept.len();
    if samples.is_empty() || zeros * 2 > samples.len() {
        return Err(Error::ZeroDominated {
            zeros,
            total: samples.len(),
        });
    }
    if kept.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            got: kept.len(),
            need: MIN_SAMPLES,
        });
    }
    let n = kept.len();
    let k1 = (n as f64).sqrt().floor() as usize;
    let k1 = if (k1 + 1) * (k1 + 1) <= n { k1 + 1 } else if k1 * k1 > n { k1 - 1 } else { k1 };
    let k2 = n / k1;
    let used = &kept[..k1 * k2];
    let mean_log_blocks = used
        .chunks_exact(k1)
        .map(|b| b.iter().sum::<f64>().abs().ln())
        .sum::<f64>()
        / k2 as f64;
    let mean_log = used.iter().map(|x| x.abs().ln()).sum::<f64>() / used.len() as f64;
    let inv_alpha = (mean_log_blocks - mean_log) / (k1 as f64).ln();
    let raw = 1.0 / inv_alpha;
    let alpha_hat = if raw.is_finite() && raw > 0.0 { raw.min(2.0) } else { 2.0 };
    Ok(AlphaEstimate {
        alpha_hat,
        raw,
        sample_count: n,
        epoch: None,
    })
}

/// Chambers–Mallows–Stuck draws from the symmetric α-stable law with scale `sigma`.
///
/// At `alpha = 2` the law is `Normal(0, 2σ²)` and is sampled directly.
pub fn generate_sas<R: Rng + ?Sized>(alpha: f64, sigma: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 2.0) {
        return Err(Error::Domain(format!("alpha must lie in (0, 2], got {alpha}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if alpha == 2.0 {
        let s = sigma * std::f64::consts::SQRT_2;
        return Ok((0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect());
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    Ok((0..n)
        .map(|_| {
            let u = rng.random_range(-half_pi..half_pi);
            let w: f64 = rng.sample(Exp1);
            let head = (alpha * u).sin() / u.cos().powf(1.0 / alpha);
            let tail = ((u - alpha * u).cos() / w).powf((1.0 - alpha) / alpha);
            sigma * head * tail
        })
        .collect())
}

/// Stochastic gradients of one epoch: `P` parameters by `S` steps, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTraceMatrix {
    params: usize,
    steps: usize,
    data: Vec<f64>,
}

impl GradientTraceMatrix {
    pub fn new(params: usize, steps: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != params * steps {
            return Err(Error::Shape {
                op: "GradientTraceMatrix",
                dim: "data length".into(),
                expected: params * steps,
                actual: data.len(),
            });
        }
        Ok(Self { params, steps, data })
    }

    /// Builds the matrix from one gradient vector per step.
    pub fn from_steps(steps: &[Vec<f64>]) -> Result<Self> {
        let p = steps.first().map_or(0, Vec::len);
        let s = steps.len();
        let mut data = vec![0.0; p * s];
        for (j, col) in steps.iter().enumerate() {
            if col.len() != p {
                return Err(Error::Shape {
                    op: "GradientTraceMatrix::from_steps",
                    dim: format!("parameters at step {j}"),
                    expected: p,
                    actual: col.len(),
                });
            }
            for (i, &v) in col.iter().enumerate() {
                data[i * s + j] = v;
            }
        }
        Ok(Self { params: p, steps: s, data })
    }

    pub fn params(&self) -> usize {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Row-major flattening.
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// One estimate per epoch on the flattened trace matrix.
pub fn alpha_trajectory<'a, I>(epochs: I) -> Result<Vec<AlphaEstimate>>
where
    I: IntoIterator<Item = &'a GradientTraceMatrix>,
{
    epochs
        .into_iter()
        .enumerate()
        .map(|(e, m)| {
            let mut est = estimate_alpha(m.data()).map_err(|err| Error::Epoch {
                epoch: e,
                source: Box::new(err),
            })?;
            est.epoch = Some(e);
            Ok(est)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gaussian_and_cauchy() {
        let mut r = rng(1);
        let g: Vec<f64> = (0..1_000_000).map(|_| r.sample(StandardNormal)).collect();
        let a = estimate_alpha(&g).unwrap();
        assert!((1.90..=2.0).contains(&a.alpha_hat), "{a:?}");
        let c: Vec<f64> = (0..1_000_000)
            .map(|_| (std::f64::consts::PI * (r.random::<f64>() - 0.5)).tan())
            .collect();
        let a = estimate_alpha(&c).unwrap();
        assert!((0.95..=1.05).contains(&a.alpha_hat), "{a:?}");
    }

    #[test]
    fn sas_variance_at_two() {
        let x = generate_sas(2.0, 1.5, 1_000_000, &mut rng(2)).unwrap();
        let var = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        assert!((var / (2.0 * 1.5 * 1.5) - 1.0).abs() < 0.02);
    }

    #[test]
    fn sas_cauchy_median() {
        let mut x: Vec<f64> = generate_sas(1.0, 1.0, 1_000_000, &mut rng(3)).unwrap().iter().map(|v| v.abs()).collect();
        x.sort_by(f64::total_cmp);
        let med = x[x.len() / 2];
        assert!((med - 1.0).abs() < 0.02, "{med}");
    }

    #[test]
    fn sas_is_symmetric() {
        let x = generate_sas(1.3, 1.0, 100_000, &mut rng(4)).unwrap();
        let mean_sign = x.iter().map(|v| v.signum()).sum::<f64>() / x.len() as f64;
        assert!(mean_sign.abs() <= 5.0 / (x.len() as f64).sqrt());
    }

    #[test]
    fn sas_parameter_checks() {
        assert!(generate_sas(0.0, 1.0, 1, &mut rng(0)).is_err());
        assert!(generate_sas(2.1, 1.0, 1, &mut rng(0)).is_err());
        assert!(generate_sas(1.0, 0.0, 1, &mut rng(0)).is_err());
    }

    #[test]
    fn estimator_guards() {
        assert!(matches!(estimate_alpha(&[1.0; 99]), Err(Error::TooFewSamples { got: 99, .. })));
        let mut v = vec![0.0; 60];
        v.extend(vec![1.0; 50]);
        assert!(matches!(estimate_alpha(&v), Err(Error::ZeroDominated { zeros: 60, total: 110 })));
        assert!(estimate_alpha(&[]).is_err());
    }

    #[test]
    fn scale_invariance() {
        let x = generate_sas(1.5, 1.0, 10_000, &mut rng(5)).unwrap();
        let a = estimate_alpha(&x).unwrap();
        for lambda in [1e-3, 0.5, 7.0, 1e4] {
            let y: Vec<f64> = x.iter().map(|v| v * lambda).collect();
            let b = estimate_alpha(&y).unwrap();
            assert!((a.raw - b.raw).abs() <= 1e-12 * a.raw.abs().max(1.0));
        }
    }

    #[test]
    fn clipping_holds_on_odd_inputs() {
        let lin: Vec<f64> = (1..=400).map(|i| i as f64).collect();
        let a = estimate_alpha(&lin).unwrap();
        assert!(a.alpha_hat > 0.0 && a.alpha_hat <= 2.0);
    }

    #[test]
    fn trajectory_length_and_zero_guard() {
        let mut r = rng(6);
        let mats: Vec<GradientTraceMatrix> = (0..3)
            .map(|_| {
                let d = generate_sas(1.2, 1.0, 100_000, &mut r).unwrap();
                GradientTraceMatrix::new(1000, 100, d).unwrap()
            })
            .collect();
        let t = alpha_trajectory(&mats).unwrap();
        assert_eq!(t.len(), 3);
        for (e, est) in t.iter().enumerate() {
            assert_eq!(est.epoch, Some(e));
            assert!((1.1..=1.3).contains(&est.alpha_hat), "{est:?}");
        }
        let zero = GradientTraceMatrix::new(10, 20, vec![0.0; 200]).unwrap();
        assert!(matches!(alpha_trajectory([&zero]), Err(Error::Epoch { epoch: 0, .. })));
    }

    #[test]
    fn from_steps_is_row_major_by_parameter() {
        let m = GradientTraceMatrix::from_steps(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!((m.params(), m.steps()), (2, 3));
        assert_eq!(m.data(), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
        assert!(GradientTraceMatrix::from_steps(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
