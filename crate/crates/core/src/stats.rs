//! Small statistical utilities: classical reference tests, goodness-of-fit
//! against the uniform distribution, and rank correlation. Used by the
//! simulation scenarios and by validation tests.

use crate::error::{Error, Result};
use crate::specfun::betainc;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n-1).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Two-sided p-value of Student's t with `df` degrees of freedom, via the
/// identity P(|T| >= t) = I(df/(df + t^2); df/2, 1/2).
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::domain("degrees of freedom must be positive"));
    }
    betainc(df / (df + t * t), df / 2.0, 0.5)
}

/// Classical pooled-variance two-sample t-test p-value (two-sided).
pub fn two_sample_t_pvalue(group1: &[f64], group2: &[f64]) -> Result<f64> {
    let (m1, m2) = (group1.len(), group2.len());
    if m1 < 2 || m2 < 2 {
        return Err(Error::domain(
            "t-test needs at least two observations per group",
        ));
    }
    let df = (m1 + m2 - 2) as f64;
    let pooled = ((m1 as f64 - 1.0) * sample_variance(group1)
        + (m2 as f64 - 1.0) * sample_variance(group2))
        / df;
    if pooled <= 0.0 {
        return Err(Error::degenerate("zero pooled variance"));
    }
    let t = (mean(group1) - mean(group2)) / (pooled * (1.0 / m1 as f64 + 1.0 / m2 as f64)).sqrt();
    student_t_two_sided(t, df)
}

/// Upper tail of the F distribution: P(F_{d1,d2} >= f).
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> Result<f64> {
    if f <= 0.0 {
        return Ok(1.0);
    }
    betainc(d2 / (d2 + d1 * f), d2 / 2.0, d1 / 2.0)
}

/// Classical one-way ANOVA F-test p-value.
pub fn one_way_f_pvalue(groups: &[Vec<f64>]) -> Result<f64> {
    let k = groups.len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    if k < 2 || n <= k {
        return Err(Error::domain("F-test needs k >= 2 groups and n > k"));
    }
    let grand: f64 = groups.iter().flatten().sum::<f64>() / n as f64;
    let ss_between: f64 = groups
        .iter()
        .map(|g| g.len() as f64 * (mean(g) - grand).powi(2))
        .sum();
    let ss_within: f64 = groups
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        })
        .sum();
    let d1 = (k - 1) as f64;
    let d2 = (n - k) as f64;
    if ss_within <= 0.0 {
        return Err(Error::degenerate("zero within-group variance"));
    }
    f_upper_tail((ss_between / d1) / (ss_within / d2), d1, d2)
}

/// Result of a Kolmogorov–Smirnov test against Uniform[0,1].
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct KsTest {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample KS test of `sample` against the Uniform[0,1] distribution.
///
/// The p-value uses the asymptotic Kolmogorov distribution with Stephens'
/// small-sample correction, accurate enough for the n >= 50 calibration
/// checks this crate performs.
pub fn ks_test_uniform(sample: &[f64]) -> Result<KsTest> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::domain("KS test needs at least two observations"));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("non-finite p-value in KS input"));
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let cdf = x.clamp(0.0, 1.0);
        let upper = (i as f64 + 1.0) / nf - cdf;
        let lower = cdf - i as f64 / nf;
        d = d.max(upper).max(lower);
    }
    let lambda = (nf.sqrt() + 0.12 + 0.11 / nf.sqrt()) * d;
    Ok(KsTest {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
        n,
    })
}

// Q(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2)
fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-8 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Spearman rank correlation. Ties get midranks.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::domain(
            "spearman needs two equal-length samples, n >= 3",
        ));
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let mx = mean(&rx);
    let my = mean(&ry);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in rx.iter().zip(ry.iter()) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx <= 0.0 || dy <= 0.0 {
        return Err(Error::degenerate("constant ranks in spearman input"));
    }
    Ok(num / (dx * dy).sqrt())
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}
