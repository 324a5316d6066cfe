//! Cross-run statistics: rank correlation of gradient topologies and t-tests.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "spearman",
            dim: "sample length".into(),
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples { got: x.len(), need: 3 });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Domain("spearman inputs must be finite".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if constant(x) || constant(y) {
        return Err(Error::Degenerate("correlation of a constant vector is undefined".into()));
    }
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Layer,
    Channel,
}

/// Cumulative per-layer or per-channel gradient norms of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyVector {
    pub kind: TopologyKind,
    pub label: String,
    pub values: Vec<f64>,
}

fn check_runs(runs: &[TopologyVector]) -> Result<()> {
    if let Some(first) = runs.first() {
        for r in runs {
            if r.kind != first.kind {
                return Err(Error::InvalidArgument {
                    op: "topology matrix",
                    reason: format!("run {:?} is a {:?} topology, expected {:?}", r.label, r.kind, first.kind),
                });
            }
            if r.values.len() != first.values.len() {
                return Err(Error::Shape {
                    op: "topology matrix",
                    dim: format!("length of run {:?}", r.label),
                    expected: first.values.len(),
                    actual: r.values.len(),
                });
            }
        }
    }
    Ok(())
}

/// Pairwise Spearman correlations; symmetric with a unit diagonal.
pub fn spearman_matrix(runs: &[TopologyVector]) -> Result<Vec<Vec<f64>>> {
    check_runs(runs)?;
    pairwise(runs.len(), 1.0, |i, j| spearman(&runs[i].values, &runs[j].values))
}

/// Pairwise two-sample t-test p-values between runs' topology vectors.
pub fn t_test_matrix(runs: &[TopologyVector], variant: TwoSample) -> Result<Vec<Vec<f64>>> {
    check_runs(runs)?;
    pairwise(runs.len(), 1.0, |i, j| {
        Ok(t_test_two_sample(&runs[i].values, &runs[j].values, variant)?.p_value)
    })
}

fn pairwise(n: usize, diag: f64, f: impl Fn(usize, usize) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let mut m = vec![vec![diag; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = f(i, j)?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoSample {
    StudentPooled,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Student,
    Welch,
    Paired,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
    pub kind: TestKind,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided two-sample t-test.
pub fn t_test_two_sample(x: &[f64], y: &[f64], variant: TwoSample) -> Result<TestResult> {
    let need = x.len().min(y.len());
    if need < 2 {
        return Err(Error::TooFewSamples { got: need, need: 2 });
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    if vx == 0.0 && vy == 0.0 {
        return Err(Error::Degenerate("both samples have zero variance".into()));
    }
    let (se, df, kind) = match variant {
        TwoSample::StudentPooled => {
            let df = nx + ny - 2.0;
            let pooled = ((nx - 1.0) * vx + (ny - 1.0) * vy) / df;
            ((pooled * (1.0 / nx + 1.0 / ny)).sqrt(), df, TestKind::Student)
        }
        TwoSample::Welch => {
            let (qx, qy) = (vx / nx, vy / ny);
            let df = (qx + qy).powi(2) / (qx * qx / (nx - 1.0) + qy * qy / (ny - 1.0));
            ((qx + qy).sqrt(), df, TestKind::Welch)
        }
    };
    let t = (mx - my) / se;
    Ok(TestResult {
        statistic: t,
        degrees_of_freedom: df,
        p_value: student_t_two_sided(t, df)?,
        kind,
    })
}

/// One-sided paired t-test of the alternative `mean(a) > mean(b)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "paired_t_test",
            dim: "sample length".into(),
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewSamples { got: a.len(), need: 2 });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let (m, v) = mean_var(&d);
    if v == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let n = d.len() as f64;
    let t = m / (v / n).sqrt();
    let df = n - 1.0;
    Ok(TestResult {
        statistic: t,
        degrees_of_freedom: df,
        p_value: student_t_upper(t, df)?,
        kind: TestKind::Paired,
    })
}

/// `P(|T| > |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) || t.is_nan() {
        return Err(Error::Domain(format!("invalid t-distribution arguments t={t}, df={df}")));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
pub fn student_t_upper(t: f64, df: f64) -> Result<f64> {
    let tail = 0.5 * student_t_two_sided(t, df)?;
    Ok(if t >= 0.0 { tail } else { 1.0 - tail })
}

const BETA_MAX_ITER: usize = 10_000;

/// Regularized incomplete beta `I_x(a, b)` by Lentz's continued fraction.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::Domain(format!("beta parameters must be positive, got a={a}, b={b}")));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("x must lie in [0, 1], got {x}")));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    // the fraction converges fast only below the mean; use the symmetry otherwise
    if x > (a + 1.0) / (a + b + 2.0) {
        return Ok(1.0 - regularized_incomplete_beta(b, a, 1.0 - x)?);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp() / a;

    const TINY: f64 = 1e-300;
    let guard = |v: f64| if v.abs() < TINY { TINY.copysign(v) } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - (a + b) * x / (a + 1.0));
    let mut h = d;
    for m in 1..=BETA_MAX_ITER {
        let m = m as f64;
        let even = m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m));
        d = 1.0 / guard(1.0 + even * d);
        c = guard(1.0 + even / c);
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0));
        d = 1.0 / guard(1.0 + odd * d);
        c = guard(1.0 + odd / c);
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() <= f64::EPSILON {
            return Ok((front * h).clamp(0.0, 1.0));
        }
    }
    Err(Error::Degenerate(format!(
        "incomplete beta did not converge for a={a}, b={b}, x={x}"
    )))
}
