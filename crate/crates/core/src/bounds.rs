//! Test statistics and their analytic sub-Gaussian tail bounds.
//!
//! Three families are implemented, all two-sided (statistics are absolute
//! values or norms):
//!
//! - univariate: the standardized two-sample mean difference, with the tail
//!   bound `exp(-n t^2 / (2 ceil(kappa+1)^3))` for group-size ratio `kappa`;
//! - Banach-space sums: `T = || sum_{group1} X_i - sum_{group2} X_i ||` for
//!   centred vectors, curves, or operators, bounded by
//!   `exp(-t^2 / (c * scale^2))` where `scale` is the Kahane–Khintchine
//!   matrix-variance of the pooled sample;
//! - the synchronized k-sample statistic `T = ||X^T eps||_2` on the stacked
//!   pairwise matrix, bounded by `exp(-t^2 / (c * S))` with
//!   `S = ||X X^T||_{S^2}` (already a squared-magnitude quantity).
//!
//! The universal constant defaults to 64 everywhere. The raw bounds are
//! conservative by construction; production p-values go through the beta
//! calibration layer, which is why `BoundConfig::calibrate` defaults on.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{lq_vector_norm, noncomm_scale, psd_sqrt_schatten, schatten_norm};
use crate::linalg::{GridCurve, NormSpace, NormSpec, SymOperator, Q};
use crate::mc_oracle::SignVector;

/// Group sizes of a two-sample split. `kappa` is always derived from the
/// sizes as max/min.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SampleSplit {
    m1: usize,
    m2: usize,
}

impl SampleSplit {
    pub fn new(m1: usize, m2: usize) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(Error::domain("both group sizes must be positive"));
        }
        Ok(SampleSplit { m1, m2 })
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn n(&self) -> usize {
        self.m1 + self.m2
    }

    pub fn is_balanced(&self) -> bool {
        self.m1 == self.m2
    }

    /// Group-size ratio max/min, as a float (exact for reporting only;
    /// integer arithmetic is used wherever a ceiling is taken).
    pub fn kappa(&self) -> f64 {
        let (hi, lo) = (self.m1.max(self.m2), self.m1.min(self.m2));
        hi as f64 / lo as f64
    }

    /// `ceil(kappa + 1) = ceil(n / min(m1, m2))`, computed on integers so a
    /// ratio that lands exactly on an integer never suffers a float ceiling.
    pub fn ceil_kappa_plus_one(&self) -> u64 {
        let lo = self.m1.min(self.m2) as u64;
        let n = (self.m1 + self.m2) as u64;
        n.div_ceil(lo)
    }
}

/// Universal constants for the Banach-space bounds and the calibration
/// default.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundConfig {
    pub c_commutative: f64,
    pub c_noncommutative: f64,
    pub c_sync: f64,
    pub calibrate: bool,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig {
            c_commutative: 64.0,
            c_noncommutative: 64.0,
            c_sync: 64.0,
            calibrate: true,
        }
    }
}

impl BoundConfig {
    pub fn with_constant(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::domain(format!(
                "bound constant must be positive, got {c}"
            )));
        }
        Ok(BoundConfig {
            c_commutative: c,
            c_noncommutative: c,
            c_sync: c,
            ..Default::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatKind {
    Univariate,
    BanachSum,
    SyncGlobal,
}

/// An observed statistic together with the scale its tail bound divides by.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TestStatistic {
    pub value: f64,
    pub scale: f64,
    pub kind: StatKind,
}

/// One observation: scalar, coordinate vector, curve on a grid, or symmetric
/// operator. Collections handed to a statistic must be homogeneous.
#[derive(Debug, Clone)]
pub enum Observation {
    Scalar(f64),
    Vector(DVector<f64>),
    Curve(GridCurve),
    Operator(SymOperator),
}

/// The common linear structure of a homogeneous collection: every item
/// flattened to a coordinate vector plus the geometry needed to take norms.
#[derive(Debug, Clone)]
enum Shape {
    Scalar,
    Vector(usize),
    Curve { grid: Vec<f64>, weights: Vec<f64> },
    Operator(usize),
}

impl Shape {
    fn of(obs: &Observation) -> Shape {
        match obs {
            Observation::Scalar(_) => Shape::Scalar,
            Observation::Vector(v) => Shape::Vector(v.len()),
            Observation::Curve(c) => Shape::Curve {
                grid: c.grid().to_vec(),
                weights: c.trapezoid_weights(),
            },
            Observation::Operator(o) => Shape::Operator(o.dim()),
        }
    }

    fn matches(&self, obs: &Observation) -> bool {
        match (self, obs) {
            (Shape::Scalar, Observation::Scalar(_)) => true,
            (Shape::Vector(d), Observation::Vector(v)) => v.len() == *d,
            (Shape::Curve { grid, .. }, Observation::Curve(c)) => {
                grid.len() == c.len()
                    && grid
                        .iter()
                        .zip(c.grid())
                        .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0))
            }
            (Shape::Operator(d), Observation::Operator(o)) => o.dim() == *d,
            _ => false,
        }
    }

    fn compatible_space(&self, space: NormSpace) -> bool {
        matches!(
            (self, space),
            (Shape::Scalar, NormSpace::Sequence)
                | (Shape::Vector(_), NormSpace::Sequence)
                | (Shape::Curve { .. }, NormSpace::Function)
                | (Shape::Operator(_), NormSpace::Schatten)
        )
    }

    fn is_commutative(&self) -> bool {
        !matches!(self, Shape::Operator(_))
    }
}

fn flatten(obs: &Observation) -> DVector<f64> {
    match obs {
        Observation::Scalar(x) => DVector::from_row_slice(&[*x]),
        Observation::Vector(v) => v.clone(),
        Observation::Curve(c) => DVector::from_row_slice(c.values()),
        Observation::Operator(o) => {
            DVector::from_iterator(o.dim() * o.dim(), o.matrix().iter().copied())
        }
    }
}

fn norm_of(values: &DVector<f64>, shape: &Shape, q: Q) -> Result<f64> {
    match shape {
        Shape::Scalar | Shape::Vector(_) => Ok(lq_vector_norm(values.as_slice(), q)),
        Shape::Curve { weights, .. } => match q {
            Q::Inf => Ok(values.iter().fold(0.0f64, |m, v| m.max(v.abs()))),
            Q::Finite(qv) => {
                let sum: f64 = values
                    .iter()
                    .zip(weights.iter())
                    .map(|(v, w)| w * v.abs().powf(qv))
                    .sum();
                Ok(sum.powf(1.0 / qv))
            }
        },
        Shape::Operator(d) => {
            let m = DMatrix::from_iterator(*d, *d, values.iter().copied());
            schatten_norm(&m, q)
        }
    }
}

// Inner product matching the geometry: plain dot for coordinates, trapezoid-
// weighted for curves, Frobenius for operators.
fn inner_of(a: &DVector<f64>, b: &DVector<f64>, shape: &Shape) -> f64 {
    match shape {
        Shape::Curve { weights, .. } => a
            .iter()
            .zip(b.iter())
            .zip(weights.iter())
            .map(|((x, y), w)| w * x * y)
            .sum(),
        _ => a.dot(b),
    }
}

/// A pooled, centred, balanced two-group sample ready for signed-sum
/// statistics. Group 1 occupies the first half of the item order, so the
/// canonical sign vector reproduces the observed statistic. The scale is a
/// function of the pooled set only and is therefore invariant under any
/// relabeling.
#[derive(Debug, Clone)]
pub struct BanachSample {
    values: Vec<DVector<f64>>,
    shape: Shape,
    spec: NormSpec,
    scale: f64,
}

impl BanachSample {
    /// Pools two balanced groups, centres every item about the pooled mean,
    /// and computes the tail-bound scale.
    pub fn new(group1: &[Observation], group2: &[Observation], spec: NormSpec) -> Result<Self> {
        if group1.is_empty() || group2.is_empty() {
            return Err(Error::domain("groups must be non-empty"));
        }
        if group1.len() != group2.len() {
            return Err(Error::unsupported(format!(
                "Banach-space bounds require balanced groups, got {} vs {}",
                group1.len(),
                group2.len()
            )));
        }
        let shape = Shape::of(&group1[0]);
        for obs in group1.iter().chain(group2.iter()) {
            if !shape.matches(obs) {
                return Err(Error::domain(
                    "mixed or mismatched item types in a single statistic",
                ));
            }
        }
        if !shape.compatible_space(spec.space) {
            return Err(Error::domain(format!(
                "norm space {:?} does not apply to this data type",
                spec.space
            )));
        }
        let mut values: Vec<DVector<f64>> =
            group1.iter().chain(group2.iter()).map(flatten).collect();
        let n = values.len();
        let mut mean = DVector::zeros(values[0].len());
        for v in &values {
            mean += v;
        }
        mean /= n as f64;
        for v in &mut values {
            *v -= &mean;
        }

        let scale = if shape.is_commutative() {
            commutative_scale(&values, spec.q)?
        } else {
            let d = match shape {
                Shape::Operator(d) => d,
                _ => unreachable!(),
            };
            let mats: Vec<DMatrix<f64>> = values
                .iter()
                .map(|v| DMatrix::from_iterator(d, d, v.iter().copied()))
                .collect();
            noncomm_scale(&mats, spec.q)?
        };
        if scale <= 0.0 {
            return Err(Error::degenerate(
                "pooled sample has zero dispersion; no test is possible",
            ));
        }
        Ok(BanachSample {
            values,
            shape,
            spec,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn spec(&self) -> NormSpec {
        self.spec
    }

    pub fn is_commutative(&self) -> bool {
        self.shape.is_commutative()
    }

    /// `|| sum_i eps_i x_i ||` in the sample's norm.
    pub fn statistic_with_signs(&self, signs: &SignVector) -> Result<f64> {
        if signs.len() != self.values.len() {
            return Err(Error::domain(format!(
                "sign vector length {} does not match sample size {}",
                signs.len(),
                self.values.len()
            )));
        }
        let mut acc = DVector::zeros(self.values[0].len());
        for (v, s) in self.values.iter().zip(signs.signs()) {
            acc.axpy(*s, v, 1.0);
        }
        norm_of(&acc, &self.shape, self.spec.q)
    }

    /// The observed statistic: +1 on group 1, -1 on group 2.
    pub fn observed_statistic(&self) -> Result<f64> {
        self.statistic_with_signs(&SignVector::canonical(self.values.len())?)
    }

    /// Gram matrix of the centred items under the geometry's inner product.
    pub fn gram(&self) -> DMatrix<f64> {
        let n = self.values.len();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = inner_of(&self.values[i], &self.values[j], &self.shape);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    }

    /// Trace of the Gram matrix: the pooled second-moment magnitude
    /// `sum_i <x_i, x_i>` of the centred items.
    pub fn gram_trace(&self) -> f64 {
        self.values
            .iter()
            .map(|v| inner_of(v, v, &self.shape))
            .sum()
    }

    pub fn as_test_statistic(&self) -> Result<TestStatistic> {
        Ok(TestStatistic {
            value: self.observed_statistic()?,
            scale: self.scale,
            kind: StatKind::BanachSum,
        })
    }
}

/// A homogeneous collection of observations flattened for arbitrary signed
/// group sums, without centring. Used where statistics are recomputed under
/// full data permutations (balanced group-sum differences are invariant to
/// common centring, so none is applied here).
#[derive(Debug, Clone)]
pub struct ObservationSet {
    values: Vec<DVector<f64>>,
    shape: Shape,
    spec: NormSpec,
}

impl ObservationSet {
    pub fn new(items: &[Observation], spec: NormSpec) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::domain("observation set must be non-empty"));
        }
        let shape = Shape::of(&items[0]);
        for obs in items {
            if !shape.matches(obs) {
                return Err(Error::domain(
                    "mixed or mismatched item types in a single statistic",
                ));
            }
        }
        if !shape.compatible_space(spec.space) {
            return Err(Error::domain(format!(
                "norm space {:?} does not apply to this data type",
                spec.space
            )));
        }
        Ok(ObservationSet {
            values: items.iter().map(flatten).collect(),
            shape,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `|| sum_{i in a} x_i - sum_{j in b} x_j ||` in the set's norm.
    pub fn group_sum_diff_norm(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        let mut acc = DVector::zeros(self.values[0].len());
        for &i in a {
            acc += &self.values[i];
        }
        for &j in b {
            acc -= &self.values[j];
        }
        norm_of(&acc, &self.shape, self.spec.q)
    }
}

// ||(sum_i x_i x_i^T)^{1/2}||_{S^q} for centred coordinate vectors; equals
// sqrt(n-1) times the Schatten norm of the empirical covariance square root.
// Goes through the Gram matrix when that side is smaller.
fn commutative_scale(values: &[DVector<f64>], q: Q) -> Result<f64> {
    if let Q::Finite(qv) = q {
        if (qv - 2.0).abs() < 1e-14 {
            let tr: f64 = values.iter().map(|v| v.norm_squared()).sum();
            return Ok(tr.max(0.0).sqrt());
        }
    }
    let n = values.len();
    let d = values[0].len();
    let m = if n <= d {
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = values[i].dot(&values[j]);
                g[(i, j)] = v;
                g[(j, i)] = v;
            }
        }
        g
    } else {
        let mut s = DMatrix::zeros(d, d);
        for v in values {
            s.ger(1.0, v, v, 1.0);
        }
        (&s + s.transpose()) * 0.5
    };
    psd_sqrt_schatten(&SymOperator::new(m)?, q)
}

/// The standardized two-sample mean difference (two-sided), normalized by
/// the pooled sample standard deviation of all n observations. `values`
/// holds group 1 first, then group 2, per the split.
pub fn univariate_statistic(values: &[f64], split: &SampleSplit) -> Result<TestStatistic> {
    if values.len() != split.n() {
        return Err(Error::domain(format!(
            "expected {} observations, got {}",
            split.n(),
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("observations must be finite"));
    }
    let n = split.n() as f64;
    let grand = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - grand) * (v - grand)).sum();
    let s_n = (ss / (n - 1.0)).sqrt();
    if s_n <= 0.0 {
        return Err(Error::degenerate(
            "all observations are equal; the standardized statistic is undefined",
        ));
    }
    let mean1 = values[..split.m1()].iter().sum::<f64>() / split.m1() as f64;
    let mean2 = values[split.m1()..].iter().sum::<f64>() / split.m2() as f64;
    Ok(TestStatistic {
        value: (mean1 - mean2).abs() / s_n,
        scale: s_n,
        kind: StatKind::Univariate,
    })
}

/// Tail bound for the univariate statistic:
/// `min(1, exp(-n t^2 / (2 ceil(kappa+1)^3)))`.
pub fn univariate_tail_bound(stat: &TestStatistic, split: &SampleSplit) -> Result<f64> {
    if stat.kind != StatKind::Univariate {
        return Err(Error::domain(
            "univariate_tail_bound needs a univariate statistic",
        ));
    }
    let ck = split.ceil_kappa_plus_one() as f64;
    let t = stat.value;
    Ok((-(split.n() as f64) * t * t / (2.0 * ck.powi(3)))
        .exp()
        .min(1.0))
}

/// Centred two-group sum statistic in the requested norm.
///
/// Balanced groups only; the scale is the pooled-sample matrix variance (for
/// coordinates and curves, `||(sum x_i x_i^T)^{1/2}||_{S^q}`; for operators,
/// [`noncomm_scale`]).
pub fn banach_statistic(
    group1: &[Observation],
    group2: &[Observation],
    spec: NormSpec,
) -> Result<TestStatistic> {
    BanachSample::new(group1, group2, spec)?.as_test_statistic()
}

/// `min(1, exp(-t^2 / (c * scale^2)))` for statistics on commutative data
/// (vectors and curves).
pub fn commutative_tail_bound(stat: &TestStatistic, cfg: &BoundConfig) -> Result<f64> {
    if stat.kind != StatKind::BanachSum {
        return Err(Error::domain(
            "commutative_tail_bound needs a Banach-sum statistic",
        ));
    }
    banach_bound(stat, cfg.c_commutative)
}

/// `min(1, exp(-t^2 / (c * S^2)))` for operator-valued statistics.
pub fn noncommutative_tail_bound(stat: &TestStatistic, cfg: &BoundConfig) -> Result<f64> {
    if stat.kind != StatKind::BanachSum {
        return Err(Error::domain(
            "noncommutative_tail_bound needs a Banach-sum statistic",
        ));
    }
    banach_bound(stat, cfg.c_noncommutative)
}

fn banach_bound(stat: &TestStatistic, c: f64) -> Result<f64> {
    if stat.value == 0.0 {
        return Ok(1.0);
    }
    if stat.scale <= 0.0 {
        return Err(Error::degenerate("zero scale in tail bound"));
    }
    Ok((-stat.value * stat.value / (c * stat.scale * stat.scale))
        .exp()
        .min(1.0))
}

/// Evaluate a stored Banach-sum bound for an arbitrary statistic value at
/// the same scale; used when calibrating.
pub fn banach_bound_at(value: f64, scale: f64, c: f64) -> f64 {
    if value == 0.0 || scale <= 0.0 {
        return 1.0;
    }
    (-value * value / (c * scale * scale)).exp().min(1.0)
}

/// Stacks k balanced scalar samples into the 2m x C(k,2) synchronized
/// matrix: the column for pair (i, j), i < j in lexicographic order, is
/// sample i over sample j.
pub fn build_sync_matrix(samples: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = samples.len();
    if k < 2 {
        return Err(Error::domain("synchronized matrix needs k >= 2 samples"));
    }
    let m = samples[0].len();
    if m == 0 {
        return Err(Error::domain("samples must be non-empty"));
    }
    if samples.iter().any(|s| s.len() != m) {
        return Err(Error::unsupported(
            "synchronized k-sample testing requires balanced samples",
        ));
    }
    let pairs = k * (k - 1) / 2;
    let mut x = DMatrix::zeros(2 * m, pairs);
    let mut col = 0;
    for i in 0..k {
        for j in i + 1..k {
            for (r, v) in samples[i].iter().enumerate() {
                x[(r, col)] = *v;
            }
            for (r, v) in samples[j].iter().enumerate() {
                x[(m + r, col)] = *v;
            }
            col += 1;
        }
    }
    Ok(x)
}

/// `||X^T eps||_2` without the scale; the cheap inner loop of Monte-Carlo
/// and calibration draws.
pub fn sync_value(x: &DMatrix<f64>, signs: &SignVector) -> Result<f64> {
    if signs.len() != x.nrows() {
        return Err(Error::domain(format!(
            "sign vector length {} does not match matrix rows {}",
            signs.len(),
            x.nrows()
        )));
    }
    let eps = DVector::from_row_slice(signs.signs());
    Ok((x.transpose() * eps).norm())
}

/// Synchronized statistic `||X^T eps||_2` with its Theorem-scale
/// `S = ||X X^T||_{S^2}`. Note `S` is already a squared-magnitude quantity;
/// the matching bound divides by `c * S`, not `c * S^2`.
pub fn sync_statistic(x: &DMatrix<f64>, signs: &SignVector) -> Result<TestStatistic> {
    let value = sync_value(x, signs)?;
    // ||X X^T||_{S^2} = ||X^T X||_{S^2}; form whichever Gram side is smaller.
    let scale = if x.nrows() <= x.ncols() {
        (x * x.transpose()).norm()
    } else {
        (x.transpose() * x).norm()
    };
    Ok(TestStatistic {
        value,
        scale,
        kind: StatKind::SyncGlobal,
    })
}

/// `min(1, exp(-t^2 / (c * S)))` for the synchronized statistic.
pub fn sync_tail_bound(stat: &TestStatistic, cfg: &BoundConfig) -> Result<f64> {
    if stat.kind != StatKind::SyncGlobal {
        return Err(Error::domain(
            "sync_tail_bound needs a synchronized statistic",
        ));
    }
    Ok(sync_bound_at(stat.value, stat.scale, cfg.c_sync))
}

/// The synchronized bound at an arbitrary statistic value and fixed scale.
pub fn sync_bound_at(value: f64, scale: f64, c: f64) -> f64 {
    if value == 0.0 || scale <= 0.0 {
        return 1.0;
    }
    (-value * value / (c * scale)).exp().min(1.0)
}

/// Weighted sum of squared pairwise statistics,
/// `sum_{i<j} n_i n_j (T^{(ij)})^2`, pairs in lexicographic order.
pub fn global_statistic(pairwise: &[f64], sizes: &[usize]) -> Result<f64> {
    let k = sizes.len();
    if k < 2 {
        return Err(Error::domain("global statistic needs k >= 2 groups"));
    }
    if pairwise.len() != k * (k - 1) / 2 {
        return Err(Error::domain(format!(
            "expected {} pairwise statistics for k = {k}, got {}",
            k * (k - 1) / 2,
            pairwise.len()
        )));
    }
    let mut acc = 0.0;
    let mut idx = 0;
    for i in 0..k {
        for j in i + 1..k {
            let t = pairwise[idx];
            acc += (sizes[i] * sizes[j]) as f64 * t * t;
            idx += 1;
        }
    }
    Ok(acc)
}
