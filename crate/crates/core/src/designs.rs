//! Test drivers for experimental designs.
//!
//! One-way k-sample analysis (pairwise tests with Bonferroni or Holm
//! correction plus a synchronized global test), the unreplicated
//! Latin-square stepdown, and the complete randomized block design with
//! block-summed statistics. Every driver is deterministic given its seed:
//! pairings, calibration draws, and Monte-Carlo draws each get their own
//! derived substreams, so attaching or removing an optional Monte-Carlo
//! cross-check never changes any other number in a report.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::betacal::{
    analytic_beta_adjust, calibrate, empirical_beta_transform, CalibrationRecord,
};
use crate::bounds::{
    banach_bound_at, build_sync_matrix, sync_bound_at, sync_statistic, sync_value,
    univariate_statistic, univariate_tail_bound, BanachSample, Observation, ObservationSet,
    SampleSplit,
};
use crate::error::{Error, Result};
use crate::linalg::{NormSpace, NormSpec, SymOperator};
use crate::mc_oracle::{
    derive_seed, mc_pvalue, mc_sync_pvalue, sample_sign_vector, sample_subset_mask, substream,
    McEstimate, SignVector,
};

/// Which statistic/bound pipeline produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Standardized mean difference for scalar data.
    Univariate,
    /// Centred sum statistic on vectors or curves.
    Commutative,
    /// Centred sum statistic on operators.
    Noncommutative,
    /// Synchronized k-sample aggregation.
    Synchronized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Correction {
    None,
    Bonferroni,
    Holm,
}

/// One test outcome: statistic, raw bound, calibrated/corrected p-value,
/// optional Monte-Carlo cross-check, and the calibration audit trail.
#[derive(Debug, Clone, Serialize)]
pub struct PValueReport {
    pub comparison: String,
    pub statistic: f64,
    pub scale: f64,
    pub p_raw: f64,
    pub p_adjusted: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_mc: Option<McEstimate>,
    pub norm: NormSpec,
    pub method: Method,
    pub correction: Correction,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Common knobs for the test drivers.
#[derive(Debug, Clone, Copy)]
pub struct TestSettings {
    pub spec: NormSpec,
    pub cfg: crate::bounds::BoundConfig,
    /// Calibration draws for the empirical beta transform.
    pub r: usize,
    /// Attach a Monte-Carlo cross-check with this many permutations.
    pub mc: Option<usize>,
    pub seed: u64,
}

impl TestSettings {
    pub fn new(spec: NormSpec, seed: u64) -> Self {
        TestSettings {
            spec,
            cfg: crate::bounds::BoundConfig::default(),
            r: 10,
            mc: None,
            seed,
        }
    }
}

const PAIR_SALT: u64 = 1_000;
const GLOBAL_SALT: u64 = 2_000;
const BLOCK_SALT: u64 = 3_000;
const STAGE_SALT: u64 = 4_000;
const CAL_SALT: u64 = 1;
const MC_SALT: u64 = 2;

pub fn bonferroni(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len() as f64;
    pvalues.iter().map(|p| (p * m).min(1.0)).collect()
}

/// Holm's stepdown: the i-th smallest p-value is multiplied by (m - i),
/// running maxima enforce monotonicity, results return in input order.
pub fn holm(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        pvalues[a]
            .partial_cmp(&pvalues[b])
            .expect("non-finite p-value")
    });
    let mut out = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &idx) in order.iter().enumerate() {
        let stepped = ((m - rank) as f64 * pvalues[idx]).min(1.0);
        running = running.max(stepped);
        out[idx] = running;
    }
    out
}

fn apply_correction(reports: &mut [PValueReport], correction: Correction) {
    let ps: Vec<f64> = reports.iter().map(|r| r.p_adjusted).collect();
    let corrected = match correction {
        Correction::None => ps,
        Correction::Bonferroni => bonferroni(&ps),
        Correction::Holm => holm(&ps),
    };
    for (rep, c) in reports.iter_mut().zip(corrected) {
        rep.p_adjusted = c;
        rep.correction = correction;
    }
}

// Working map for the empirical beta calibration: the sub-Gaussian bound
// form with its exponent normalized by the pooled second-moment magnitude
// `w`, so the null p-values spread over (0,1) whatever the design size. At
// the conventional reporting constants the null p-values collapse against 1
// and the method-of-moments fit would have to extrapolate its lower tail far
// beyond the draws, which systematically understates deep p-values. The
// reported raw bounds are unaffected; this map only feeds the transform.
fn calibration_map(value: f64, w: f64) -> f64 {
    if value <= 0.0 || w <= 0.0 {
        return 1.0;
    }
    (-value * value / w).exp().max(1e-300)
}

fn is_scalar(obs: &Observation) -> bool {
    matches!(obs, Observation::Scalar(_))
}

fn scalar_values(items: &[Observation]) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|o| match o {
            Observation::Scalar(v) => Ok(*v),
            _ => Err(Error::domain("expected scalar observations")),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Two-sample pipelines
// ---------------------------------------------------------------------------

fn univariate_report(
    comparison: String,
    group1: &[f64],
    group2: &[f64],
    settings: &TestSettings,
    seed: u64,
) -> Result<PValueReport> {
    let split = SampleSplit::new(group1.len(), group2.len())?;
    let mut values = group1.to_vec();
    values.extend_from_slice(group2);
    let stat = univariate_statistic(&values, &split)?;
    let p_raw = univariate_tail_bound(&stat, &split)?;
    let p_adjusted = analytic_beta_adjust(p_raw, &split)?;
    let p_mc = match settings.mc {
        None => None,
        Some(n_perms) => {
            let mc_seed = derive_seed(seed, MC_SALT);
            let s_n = stat.scale;
            let est = if split.is_balanced() {
                // balanced reassignments are zero-sum sign flips
                let m = split.m1() as f64;
                mc_pvalue(
                    |rng| {
                        let sv = sample_sign_vector(values.len(), rng)?;
                        let sum: f64 = sv.signs().iter().zip(&values).map(|(e, x)| e * x).sum();
                        Ok(sum.abs() / (s_n * m))
                    },
                    stat.value,
                    n_perms,
                    mc_seed,
                )?
            } else {
                // unbalanced reassignments are uniform m1-subsets
                let (m1, m2) = (split.m1(), split.m2());
                mc_pvalue(
                    |rng| {
                        let mask = sample_subset_mask(values.len(), m1, rng)?;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for (v, &in1) in values.iter().zip(&mask) {
                            if in1 {
                                s1 += v;
                            } else {
                                s2 += v;
                            }
                        }
                        Ok((s1 / m1 as f64 - s2 / m2 as f64).abs() / s_n)
                    },
                    stat.value,
                    n_perms,
                    mc_seed,
                )?
            };
            Some(est)
        }
    };
    Ok(PValueReport {
        comparison,
        statistic: stat.value,
        scale: stat.scale,
        p_raw,
        p_adjusted: p_adjusted.min(1.0),
        p_mc,
        norm: settings.spec,
        method: Method::Univariate,
        correction: Correction::None,
        calibration: None,
        flags: Vec::new(),
    })
}

// One pairing across blocks: per-block pooled/centred samples, statistics
// summed over block levels, scales combined by the same summation.
struct BlockedPair {
    samples: Vec<BanachSample>,
    value: f64,
    scale: f64,
}

impl BlockedPair {
    fn new(blocks1: &[&[Observation]], blocks2: &[&[Observation]], spec: NormSpec) -> Result<Self> {
        let mut samples = Vec::with_capacity(blocks1.len());
        let mut value = 0.0;
        let mut scale = 0.0;
        for (g1, g2) in blocks1.iter().zip(blocks2) {
            let s = BanachSample::new(g1, g2, spec)?;
            value += s.observed_statistic()?;
            scale += s.scale();
            samples.push(s);
        }
        Ok(BlockedPair {
            samples,
            value,
            scale,
        })
    }

    fn items_per_block(&self) -> usize {
        self.samples[0].len()
    }

    /// Block-synchronized signed statistic: the same sign vector applied to
    /// every block level, per-block values summed.
    fn value_with_signs(&self, sv: &SignVector) -> Result<f64> {
        let mut acc = 0.0;
        for s in &self.samples {
            acc += s.statistic_with_signs(sv)?;
        }
        Ok(acc)
    }

    fn is_commutative(&self) -> bool {
        self.samples[0].is_commutative()
    }
}

fn banach_pair_report(
    comparison: String,
    pair: &BlockedPair,
    settings: &TestSettings,
    seed: u64,
) -> Result<PValueReport> {
    let c = if pair.is_commutative() {
        settings.cfg.c_commutative
    } else {
        settings.cfg.c_noncommutative
    };
    let method = if pair.is_commutative() {
        Method::Commutative
    } else {
        Method::Noncommutative
    };
    let p_raw = banach_bound_at(pair.value, pair.scale, c);
    let n = pair.items_per_block();
    let blocks = pair.samples.len() as f64;
    let w = blocks * pair.samples.iter().map(|s| s.gram_trace()).sum::<f64>();
    let mut flags = Vec::new();
    let mut calibration = None;
    let p_adjusted = if settings.cfg.calibrate {
        match calibrate(
            |rng| {
                let sv = sample_sign_vector(n, rng)?;
                Ok(calibration_map(pair.value_with_signs(&sv)?, w))
            },
            settings.r,
            derive_seed(seed, CAL_SALT),
        ) {
            Ok(record) => {
                let p = empirical_beta_transform(calibration_map(pair.value, w), &record)?;
                calibration = Some(record);
                p
            }
            Err(Error::CalibrationFailure(msg)) => {
                flags.push(format!("calibration-fallback-raw: {msg}"));
                p_raw
            }
            Err(e) => return Err(e),
        }
    } else {
        p_raw
    };
    let p_mc = match settings.mc {
        None => None,
        Some(n_perms) => Some(mc_pvalue(
            |rng| {
                let sv = sample_sign_vector(n, rng)?;
                pair.value_with_signs(&sv)
            },
            pair.value,
            n_perms,
            derive_seed(seed, MC_SALT),
        )?),
    };
    Ok(PValueReport {
        comparison,
        statistic: pair.value,
        scale: pair.scale,
        p_raw,
        p_adjusted: p_adjusted.min(1.0),
        p_mc,
        norm: settings.spec,
        method,
        correction: Correction::None,
        calibration,
        flags,
    })
}

/// Two-sample test: scalars dispatch to the univariate bound with its
/// closed-form beta adjustment, vectors/curves/operators to the matching
/// Banach-space bound with the empirical beta transform.
pub fn two_sample(
    group1: &[Observation],
    group2: &[Observation],
    settings: &TestSettings,
) -> Result<PValueReport> {
    let seed = derive_seed(settings.seed, PAIR_SALT);
    two_sample_seeded("group 1 vs group 2".into(), group1, group2, settings, seed)
}

fn two_sample_seeded(
    comparison: String,
    group1: &[Observation],
    group2: &[Observation],
    settings: &TestSettings,
    seed: u64,
) -> Result<PValueReport> {
    if group1.is_empty() || group2.is_empty() {
        return Err(Error::domain("both groups must be non-empty"));
    }
    if is_scalar(&group1[0]) {
        let g1 = scalar_values(group1)?;
        let g2 = scalar_values(group2)?;
        univariate_report(comparison, &g1, &g2, settings, seed)
    } else {
        let pair = BlockedPair::new(&[group1], &[group2], settings.spec)?;
        banach_pair_report(comparison, &pair, settings, seed)
    }
}

// ---------------------------------------------------------------------------
// One-way k-sample analysis
// ---------------------------------------------------------------------------

/// All C(k,2) pairwise tests in lexicographic pair order, with the requested
/// multiple-testing correction applied to the per-pair p-values.
pub fn pairwise_tests(
    groups: &[(String, Vec<Observation>)],
    settings: &TestSettings,
    correction: Correction,
) -> Result<Vec<PValueReport>> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::domain("pairwise testing needs k >= 2 groups"));
    }
    let mut reports = Vec::with_capacity(k * (k - 1) / 2);
    let mut pair_idx = 0u64;
    for i in 0..k {
        for j in i + 1..k {
            let seed = derive_seed(settings.seed, PAIR_SALT + pair_idx);
            let comparison = format!("{} vs {}", groups[i].0, groups[j].0);
            let report = two_sample_seeded(
                comparison.clone(),
                &groups[i].1,
                &groups[j].1,
                settings,
                seed,
            )
            .map_err(|e| match e {
                Error::DegenerateData(m) => Error::DegenerateData(format!("{comparison}: {m}")),
                Error::UnsupportedDesign(m) => {
                    Error::UnsupportedDesign(format!("{comparison}: {m}"))
                }
                Error::Domain(m) => Error::Domain(format!("{comparison}: {m}")),
                other => other,
            })?;
            reports.push(report);
            pair_idx += 1;
        }
    }
    apply_correction(&mut reports, correction);
    Ok(reports)
}

/// Synchronized global test across k balanced groups.
///
/// Scalars go through the stacked pairwise matrix and its `||X X^T||_{S^2}`
/// scale; Banach-valued data through the direct-sum aggregation of the
/// pairwise sum statistics with a Gram-matrix scale. Both paths calibrate
/// with synchronized sign draws by default.
pub fn global_test(
    groups: &[(String, Vec<Observation>)],
    settings: &TestSettings,
) -> Result<PValueReport> {
    let k = groups.len();
    if k < 2 {
        return Err(Error::domain("global test needs k >= 2 groups"));
    }
    let m = groups[0].1.len();
    if groups.iter().any(|(_, g)| g.len() != m) || m == 0 {
        return Err(Error::unsupported(
            "synchronized global test requires balanced non-empty groups",
        ));
    }
    let seed = derive_seed(settings.seed, GLOBAL_SALT);
    if is_scalar(&groups[0].1[0]) {
        let samples: Vec<Vec<f64>> = groups
            .iter()
            .map(|(_, g)| scalar_values(g))
            .collect::<Result<_>>()?;
        global_scalar_report(&samples, settings, seed)
    } else {
        let cells: Vec<Vec<Vec<Observation>>> =
            groups.iter().map(|(_, g)| vec![g.clone()]).collect();
        let pairs = build_blocked_pairs(&cells, settings.spec)?;
        global_banach_report(&pairs, settings, seed)
    }
}

fn global_scalar_report(
    samples: &[Vec<f64>],
    settings: &TestSettings,
    seed: u64,
) -> Result<PValueReport> {
    let mut x = build_sync_matrix(samples)?;
    // centre each column about its own pooled-pair mean (zero-sum sign
    // statistics are invariant to this; the scale tightens) and standardize
    // it by the pooled-pair standard deviation, so ||X^T eps||^2 aggregates
    // the standardized pairwise statistics with their n_i n_j weights
    let rows = x.nrows();
    for mut col in x.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / rows as f64;
        for v in col.iter_mut() {
            *v -= mean;
        }
        let sd = (col.iter().map(|v| v * v).sum::<f64>() / (rows as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            for v in col.iter_mut() {
                *v /= sd;
            }
        }
    }
    let stat = sync_statistic(&x, &SignVector::canonical(rows)?)?;
    if stat.scale <= 0.0 {
        return Err(Error::degenerate(
            "synchronized matrix has zero dispersion; no test is possible",
        ));
    }
    let p_raw = sync_bound_at(stat.value, stat.scale, settings.cfg.c_sync);
    let w = x.norm_squared(); // tr(X X^T)
    let mut flags = Vec::new();
    let mut calibration = None;
    let p_adjusted = if settings.cfg.calibrate {
        match calibrate(
            |rng| {
                let sv = sample_sign_vector(rows, rng)?;
                Ok(calibration_map(sync_value(&x, &sv)?, w))
            },
            settings.r,
            derive_seed(seed, CAL_SALT),
        ) {
            Ok(record) => {
                let p = empirical_beta_transform(calibration_map(stat.value, w), &record)?;
                calibration = Some(record);
                p
            }
            Err(Error::CalibrationFailure(msg)) => {
                flags.push(format!("calibration-fallback-raw: {msg}"));
                p_raw
            }
            Err(e) => return Err(e),
        }
    } else {
        p_raw
    };
    let p_mc = match settings.mc {
        None => None,
        Some(n_perms) => Some(mc_sync_pvalue(&x, n_perms, derive_seed(seed, MC_SALT))?),
    };
    Ok(PValueReport {
        comparison: "global".into(),
        statistic: stat.value,
        scale: stat.scale,
        p_raw,
        p_adjusted: p_adjusted.min(1.0),
        p_mc,
        norm: settings.spec,
        method: Method::Synchronized,
        correction: Correction::None,
        calibration,
        flags,
    })
}

// cells[t][b] -> items of treatment t in block b
fn build_blocked_pairs(
    cells: &[Vec<Vec<Observation>>],
    spec: NormSpec,
) -> Result<Vec<BlockedPair>> {
    let k = cells.len();
    let b = cells[0].len();
    let m = cells[0][0].len();
    for t in cells {
        if t.len() != b {
            return Err(Error::unsupported("every treatment needs the same blocks"));
        }
        if t.iter().any(|cell| cell.len() != m) || m == 0 {
            return Err(Error::unsupported(
                "blocked designs require balanced non-empty cells",
            ));
        }
    }
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let blocks1: Vec<&[Observation]> = cells[i].iter().map(|c| c.as_slice()).collect();
            let blocks2: Vec<&[Observation]> = cells[j].iter().map(|c| c.as_slice()).collect();
            pairs.push(BlockedPair::new(&blocks1, &blocks2, spec)?);
        }
    }
    Ok(pairs)
}

// Direct-sum aggregation: T = sqrt(sum_pairs T_pair^2), with the Gram scale
// S = ||sum_pairs sum_blocks G||_{S^2}. For scalar single-block input this
// coincides with the stacked-matrix statistic and its ||X X^T||_{S^2}.
fn global_banach_report(
    pairs: &[BlockedPair],
    settings: &TestSettings,
    seed: u64,
) -> Result<PValueReport> {
    let n = pairs[0].items_per_block();
    let observed = global_value(pairs, None)?;
    let mut gram = DMatrix::zeros(n, n);
    for p in pairs {
        for s in &p.samples {
            gram += s.gram();
        }
    }
    let scale = gram.norm();
    if scale <= 0.0 {
        return Err(Error::degenerate(
            "pooled design has zero dispersion; no test is possible",
        ));
    }
    let p_raw = sync_bound_at(observed, scale, settings.cfg.c_sync);
    let blocks = pairs[0].samples.len() as f64;
    let w = blocks * gram.trace();
    let mut flags = Vec::new();
    let mut calibration = None;
    let p_adjusted = if settings.cfg.calibrate {
        match calibrate(
            |rng| {
                let sv = sample_sign_vector(n, rng)?;
                Ok(calibration_map(global_value(pairs, Some(&sv))?, w))
            },
            settings.r,
            derive_seed(seed, CAL_SALT),
        ) {
            Ok(record) => {
                let p = empirical_beta_transform(calibration_map(observed, w), &record)?;
                calibration = Some(record);
                p
            }
            Err(Error::CalibrationFailure(msg)) => {
                flags.push(format!("calibration-fallback-raw: {msg}"));
                p_raw
            }
            Err(e) => return Err(e),
        }
    } else {
        p_raw
    };
    let p_mc = match settings.mc {
        None => None,
        Some(n_perms) => Some(mc_pvalue(
            |rng| {
                let sv = sample_sign_vector(n, rng)?;
                global_value(pairs, Some(&sv))
            },
            observed,
            n_perms,
            derive_seed(seed, MC_SALT),
        )?),
    };
    Ok(PValueReport {
        comparison: "global".into(),
        statistic: observed,
        scale,
        p_raw,
        p_adjusted: p_adjusted.min(1.0),
        p_mc,
        norm: settings.spec,
        method: Method::Synchronized,
        correction: Correction::None,
        calibration,
        flags,
    })
}

fn global_value(pairs: &[BlockedPair], signs: Option<&SignVector>) -> Result<f64> {
    let mut acc = 0.0;
    for p in pairs {
        let t = match signs {
            Some(sv) => p.value_with_signs(sv)?,
            None => p.value,
        };
        acc += t * t;
    }
    Ok(acc.sqrt())
}

// ---------------------------------------------------------------------------
// Design centring
// ---------------------------------------------------------------------------

/// Removes the grand mean plus row and column effects from a complete k x k
/// grid of responses: `y_ij - rowmean_i - colmean_j + grand`. Residual row
/// and column means are zero.
pub fn center_by_design(responses: &[Vec<Observation>]) -> Result<Vec<Vec<Observation>>> {
    let k = responses.len();
    if k == 0 || responses.iter().any(|r| r.len() != k) {
        return Err(Error::domain("design centring needs a complete k x k grid"));
    }
    let flat: Vec<Vec<nalgebra::DVector<f64>>> = responses
        .iter()
        .map(|row| row.iter().map(flatten_obs).collect())
        .collect();
    let dim = flat[0][0].len();
    if flat.iter().flatten().any(|v| v.len() != dim) {
        return Err(Error::domain("responses must be homogeneous"));
    }
    let kf = k as f64;
    let mut grand = nalgebra::DVector::zeros(dim);
    let mut row_means = vec![nalgebra::DVector::zeros(dim); k];
    let mut col_means = vec![nalgebra::DVector::zeros(dim); k];
    for (i, row) in flat.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            grand += v;
            row_means[i] += v;
            col_means[j] += v;
        }
    }
    grand /= kf * kf;
    for rm in &mut row_means {
        *rm /= kf;
    }
    for cm in &mut col_means {
        *cm /= kf;
    }
    let mut out = Vec::with_capacity(k);
    for (i, row) in flat.iter().enumerate() {
        let mut out_row = Vec::with_capacity(k);
        for (j, v) in row.iter().enumerate() {
            let resid = v - &row_means[i] - &col_means[j] + &grand;
            out_row.push(rebuild_obs(&responses[i][j], &resid)?);
        }
        out.push(out_row);
    }
    Ok(out)
}

fn flatten_obs(obs: &Observation) -> nalgebra::DVector<f64> {
    match obs {
        Observation::Scalar(x) => nalgebra::DVector::from_row_slice(&[*x]),
        Observation::Vector(v) => v.clone(),
        Observation::Curve(c) => nalgebra::DVector::from_row_slice(c.values()),
        Observation::Operator(o) => {
            nalgebra::DVector::from_iterator(o.dim() * o.dim(), o.matrix().iter().copied())
        }
    }
}

fn rebuild_obs(template: &Observation, values: &nalgebra::DVector<f64>) -> Result<Observation> {
    Ok(match template {
        Observation::Scalar(_) => Observation::Scalar(values[0]),
        Observation::Vector(_) => Observation::Vector(values.clone()),
        Observation::Curve(c) => Observation::Curve(crate::linalg::GridCurve::new(
            c.grid().to_vec(),
            values.iter().copied().collect(),
        )?),
        Observation::Operator(o) => {
            let d = o.dim();
            Observation::Operator(SymOperator::new(DMatrix::from_iterator(
                d,
                d,
                values.iter().copied(),
            ))?)
        }
    })
}

// ---------------------------------------------------------------------------
// Latin square stepdown
// ---------------------------------------------------------------------------

/// A k x k Latin square: `treatment[row][col]` in 0..k, each treatment once
/// per row and once per column.
#[derive(Debug, Clone)]
pub struct LatinSquare {
    k: usize,
    treatment: Vec<Vec<usize>>,
}

impl LatinSquare {
    pub fn new(treatment: Vec<Vec<usize>>) -> Result<Self> {
        let k = treatment.len();
        if k < 2 || treatment.iter().any(|r| r.len() != k) {
            return Err(Error::domain("Latin square must be a k x k grid, k >= 2"));
        }
        for (i, row) in treatment.iter().enumerate() {
            let mut seen = vec![false; k];
            for &t in row {
                if t >= k || seen[t] {
                    return Err(Error::domain(format!(
                        "row {i} does not contain each treatment exactly once"
                    )));
                }
                seen[t] = true;
            }
        }
        for j in 0..k {
            let mut seen = vec![false; k];
            for row in &treatment {
                let t = row[j];
                if seen[t] {
                    return Err(Error::domain(format!(
                        "column {j} does not contain each treatment exactly once"
                    )));
                }
                seen[t] = true;
            }
        }
        Ok(LatinSquare { k, treatment })
    }

    /// The cyclic square `treatment[i][j] = (i + j) mod k`.
    pub fn cyclic(k: usize) -> Self {
        let treatment = (0..k)
            .map(|i| (0..k).map(|j| (i + j) % k).collect())
            .collect();
        LatinSquare { k, treatment }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn treatment(&self, row: usize, col: usize) -> usize {
        self.treatment[row][col]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Factor {
    Row,
    Column,
    Treatment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Rejected,
    NotRejected,
    /// Skipped because an earlier factor was not rejected.
    NotTested,
    /// Fixing the other factors would leave nothing to permute.
    Untestable,
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorOutcome {
    pub factor: Factor,
    pub statistic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub decision: Decision,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LatinReport {
    /// Factor outcomes ordered by statistic, largest first.
    pub outcomes: Vec<FactorOutcome>,
    pub level: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub enum LatinMode {
    /// Calibrated analytic bounds at every stage.
    Analytic { r: usize },
    /// Permutation Monte-Carlo at every stage.
    MonteCarlo { n_perms: usize },
}

/// Stepdown test of the three factors of an unreplicated Latin square.
///
/// Factor statistics are pairwise aggregations of the sum statistics over
/// the factor's level groups. Factors are ordered by statistic; the largest
/// is tested against permutations of the full data, the second against
/// permutations restricted to the strata of the first (rejected) factor, and
/// the last factor is always reported untestable (fixing two factors of a
/// Latin square pins the third). Once a null is not rejected the procedure
/// stops. For k = 2 the two non-leading factors are confounded, so only one
/// factor is testable.
///
/// Each stage tests the composite null "all remaining factors are null", so
/// the reference statistic is the maximum over the remaining factors,
/// recomputed per permutation. Comparing the selected largest statistic to a
/// single factor's own permutation distribution would inflate the stage-one
/// size well past the nominal level.
pub fn latin_square_stepdown(
    responses: &[Vec<Observation>],
    layout: &LatinSquare,
    settings: &TestSettings,
    level: f64,
    mode: LatinMode,
) -> Result<LatinReport> {
    let k = layout.k();
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain("level must be in (0, 1)"));
    }
    if responses.len() != k || responses.iter().any(|r| r.len() != k) {
        return Err(Error::domain("responses must fill the k x k layout"));
    }
    // flatten in (row, col) lexicographic order
    let items: Vec<Observation> = responses.iter().flatten().cloned().collect();
    let set = ObservationSet::new(&items, settings.spec)?;
    let cell = |row: usize, col: usize| row * k + col;

    let factor_groups = |f: Factor| -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::with_capacity(k); k];
        for row in 0..k {
            for col in 0..k {
                let lvl = match f {
                    Factor::Row => row,
                    Factor::Column => col,
                    Factor::Treatment => layout.treatment(row, col),
                };
                groups[lvl].push(cell(row, col));
            }
        }
        groups
    };

    // pairwise-aggregated factor statistic under an arrangement `perm`
    // (perm[slot] = index of the response currently sitting in `slot`)
    let factor_value = |f: Factor, perm: &[usize]| -> Result<f64> {
        let groups = factor_groups(f);
        let mut acc = 0.0;
        for a in 0..k {
            for b in a + 1..k {
                let ga: Vec<usize> = groups[a].iter().map(|&i| perm[i]).collect();
                let gb: Vec<usize> = groups[b].iter().map(|&i| perm[i]).collect();
                let t = set.group_sum_diff_norm(&ga, &gb)?;
                acc += t * t;
            }
        }
        Ok(acc.sqrt())
    };

    let identity: Vec<usize> = (0..k * k).collect();
    let all_factors = [Factor::Row, Factor::Column, Factor::Treatment];
    let mut stats = Vec::new();
    for f in all_factors {
        stats.push((f, factor_value(f, &identity)?));
    }
    stats.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("non-finite factor statistic"));

    let testable = if k >= 3 { 2 } else { 1 };
    let mut outcomes: Vec<FactorOutcome> = Vec::with_capacity(3);
    let mut fixed_strata: Option<Vec<Vec<usize>>> = None;
    let mut stopped = false;
    for (stage, &(factor, observed)) in stats.iter().enumerate() {
        if stage >= testable || stopped {
            outcomes.push(FactorOutcome {
                factor,
                statistic: observed,
                p_value: None,
                decision: if stage >= testable {
                    Decision::Untestable
                } else {
                    Decision::NotTested
                },
                calibration: None,
            });
            continue;
        }
        let strata: Vec<Vec<usize>> = match &fixed_strata {
            None => vec![identity.clone()],
            Some(s) => s.clone(),
        };
        let stage_seed = derive_seed(settings.seed, STAGE_SALT + stage as u64);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng, strata: &[Vec<usize>]| -> Vec<usize> {
            let mut perm = identity.clone();
            for stratum in strata {
                let mut shuffled = stratum.clone();
                shuffled.shuffle(rng);
                for (slot, src) in stratum.iter().zip(shuffled) {
                    perm[*slot] = src;
                }
            }
            perm
        };
        // composite-null reference: max over the factors not yet rejected
        let remaining: Vec<Factor> = stats[stage..].iter().map(|&(f, _)| f).collect();
        let max_value = |perm: &[usize]| -> Result<f64> {
            let mut best = 0.0f64;
            for &f in &remaining {
                best = best.max(factor_value(f, perm)?);
            }
            Ok(best)
        };
        let (p_value, calibration) = match mode {
            LatinMode::MonteCarlo { n_perms } => {
                let est = mc_pvalue(
                    |rng| max_value(&draw(rng, &strata)),
                    observed,
                    n_perms,
                    derive_seed(stage_seed, MC_SALT),
                )?;
                (est.p_hat, None)
            }
            LatinMode::Analytic { r } => {
                // fixed Gram scale from the observed arrangement
                let groups = factor_groups(factor);
                let items_of = |g: &[usize]| -> Vec<Observation> {
                    g.iter().map(|&i| items[i].clone()).collect()
                };
                let mut gram = DMatrix::zeros(2 * k, 2 * k);
                for a in 0..k {
                    for b in a + 1..k {
                        let s = BanachSample::new(
                            &items_of(&groups[a]),
                            &items_of(&groups[b]),
                            settings.spec,
                        )?;
                        gram += s.gram();
                    }
                }
                let scale = gram.norm();
                if scale <= 0.0 {
                    return Err(Error::degenerate(
                        "factor groups have zero dispersion; no test is possible",
                    ));
                }
                let p_raw = sync_bound_at(observed, scale, settings.cfg.c_sync);
                let w = gram.trace();
                match calibrate(
                    |rng| Ok(calibration_map(max_value(&draw(rng, &strata))?, w)),
                    r,
                    derive_seed(stage_seed, CAL_SALT),
                ) {
                    Ok(record) => {
                        let p = empirical_beta_transform(calibration_map(observed, w), &record)?;
                        (p, Some(record))
                    }
                    Err(Error::CalibrationFailure(_)) => (p_raw, None),
                    Err(e) => return Err(e),
                }
            }
        };
        let rejected = p_value <= level;
        outcomes.push(FactorOutcome {
            factor,
            statistic: observed,
            p_value: Some(p_value),
            decision: if rejected {
                Decision::Rejected
            } else {
                Decision::NotRejected
            },
            calibration,
        });
        if rejected {
            fixed_strata = Some(factor_groups(factor));
        } else {
            stopped = true;
        }
    }
    Ok(LatinReport {
        outcomes,
        level,
        flags: vec![
            "factor-statistic-implementation-defined".into(),
            "restricted-permutations-within-strata".into(),
        ],
    })
}

// ---------------------------------------------------------------------------
// Complete randomized block design
// ---------------------------------------------------------------------------

/// Responses grouped by (treatment, block): `cells[t][b]` holds the items of
/// treatment `t` in block `b`. Cells must be balanced.
#[derive(Debug, Clone)]
pub struct CrbdData {
    pub treatments: Vec<String>,
    pub blocks: Vec<String>,
    pub cells: Vec<Vec<Vec<Observation>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrbdMode {
    /// Compare functional/vector means directly.
    Means,
    /// Compare second-order structure. `group_size = None` embeds each
    /// cell-centred response as a rank-one operator; `Some(g)` groups every
    /// g responses into one empirical covariance operator first.
    Covariances { group_size: Option<usize> },
}

#[derive(Debug, Clone, Serialize)]
pub struct CrbdReport {
    pub pairwise: Vec<PValueReport>,
    pub global: PValueReport,
    pub block_tests: Vec<PValueReport>,
    pub flags: Vec<String>,
}

/// Complete randomized block analysis: per treatment pairing, statistics are
/// summed over the block levels (scales combined by the same summation),
/// bounded, and calibrated with block-synchronized sign draws; the pairwise
/// statistics aggregate into a synchronized global p-value.
pub fn crbd_test(
    data: &CrbdData,
    settings: &TestSettings,
    mode: CrbdMode,
    correction: Correction,
) -> Result<CrbdReport> {
    let k = data.treatments.len();
    let nblocks = data.blocks.len();
    if k < 2 || data.cells.len() != k {
        return Err(Error::domain("need k >= 2 treatments with matching cells"));
    }
    if nblocks == 0 || data.cells.iter().any(|t| t.len() != nblocks) {
        return Err(Error::domain("every treatment needs a cell per block"));
    }
    if let CrbdMode::Covariances { .. } = mode {
        if settings.spec.space != NormSpace::Schatten {
            return Err(Error::domain(
                "covariance mode compares operators; use a Schatten norm",
            ));
        }
    }
    let cells = transform_cells(&data.cells, mode, settings.seed)?;

    let pairs = build_blocked_pairs(&cells, settings.spec)?;
    let mut reports = Vec::with_capacity(pairs.len());
    let mut pair_idx = 0u64;
    for i in 0..k {
        for j in i + 1..k {
            let seed = derive_seed(settings.seed, PAIR_SALT + pair_idx);
            let comparison = format!("{} vs {}", data.treatments[i], data.treatments[j]);
            reports.push(banach_pair_report(
                comparison,
                &pairs[pair_idx as usize],
                settings,
                seed,
            )?);
            pair_idx += 1;
        }
    }
    apply_correction(&mut reports, correction);

    let global = global_banach_report(&pairs, settings, derive_seed(settings.seed, GLOBAL_SALT))?;

    // a two-level blocking factor admits its own two-sample test on the
    // block labels, pooling the treatments
    let mut block_tests = Vec::new();
    if nblocks == 2 {
        let pool = |b: usize| -> Vec<Observation> {
            cells.iter().flat_map(|t| t[b].iter().cloned()).collect()
        };
        let g0 = pool(0);
        let g1 = pool(1);
        let mut rep = two_sample_seeded(
            format!("block: {} vs {}", data.blocks[0], data.blocks[1]),
            &g0,
            &g1,
            settings,
            derive_seed(settings.seed, BLOCK_SALT),
        )?;
        rep.flags.push("block-factor-test".into());
        block_tests.push(rep);
    }

    Ok(CrbdReport {
        pairwise: reports,
        global,
        block_tests,
        flags: vec!["interaction-terms-assumed-negligible".into()],
    })
}

fn transform_cells(
    cells: &[Vec<Vec<Observation>>],
    mode: CrbdMode,
    seed: u64,
) -> Result<Vec<Vec<Vec<Observation>>>> {
    match mode {
        CrbdMode::Means => Ok(cells.to_vec()),
        CrbdMode::Covariances { group_size } => {
            let mut out = Vec::with_capacity(cells.len());
            for (t, blocks) in cells.iter().enumerate() {
                let mut t_out = Vec::with_capacity(blocks.len());
                for (b, cell) in blocks.iter().enumerate() {
                    t_out.push(cell_to_operators(
                        cell,
                        group_size,
                        derive_seed(seed, 50_000 + (t * 1024 + b) as u64),
                    )?);
                }
                out.push(t_out);
            }
            Ok(out)
        }
    }
}

/// Second-order embedding of one group of curve/vector responses: centre
/// about the group mean, then either outer-product each response into a
/// rank-one operator (`group_size = None`) or partition into empirical
/// covariance operators of `group_size` responses each.
pub fn second_order_embedding(
    group: &[Observation],
    group_size: Option<usize>,
    seed: u64,
) -> Result<Vec<Observation>> {
    cell_to_operators(group, group_size, seed)
}

// Second-order embedding of one cell: centre responses about the cell mean,
// then either outer-product each response (rank-one items) or group them
// into empirical covariance operators.
fn cell_to_operators(
    cell: &[Observation],
    group_size: Option<usize>,
    seed: u64,
) -> Result<Vec<Observation>> {
    let rows: Vec<nalgebra::DVector<f64>> = cell
        .iter()
        .map(|o| match o {
            Observation::Curve(c) => Ok(nalgebra::DVector::from_row_slice(c.values())),
            Observation::Vector(v) => Ok(v.clone()),
            Observation::Operator(_) => Err(Error::domain(
                "covariance mode expects curve or vector responses",
            )),
            Observation::Scalar(_) => Err(Error::domain(
                "covariance mode needs multivariate responses",
            )),
        })
        .collect::<Result<_>>()?;
    match group_size {
        Some(g) => {
            if g < 2 {
                return Err(Error::domain("group_size must be at least 2"));
            }
            if !rows.len().is_multiple_of(g) {
                return Err(Error::domain(format!(
                    "cell of {} responses is not divisible by group_size {g}",
                    rows.len()
                )));
            }
            let mut idx: Vec<usize> = (0..rows.len()).collect();
            let mut rng = substream(seed, 0);
            idx.shuffle(&mut rng);
            idx.chunks(g)
                .map(|chunk| {
                    let group: Vec<nalgebra::DVector<f64>> =
                        chunk.iter().map(|&i| rows[i].clone()).collect();
                    Ok(Observation::Operator(crate::linalg::empirical_covariance(
                        &group, true,
                    )?))
                })
                .collect()
        }
        None => {
            let n = rows.len() as f64;
            let dim = rows[0].len();
            let mut mean = nalgebra::DVector::zeros(dim);
            for r in &rows {
                mean += r;
            }
            mean /= n;
            rows.iter()
                .map(|r| {
                    let c = r - &mean;
                    let mut m = DMatrix::zeros(dim, dim);
                    m.ger(1.0, &c, &c, 1.0);
                    Ok(Observation::Operator(SymOperator::new(m)?))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{GridCurve, Q};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn seq2() -> NormSpec {
        NormSpec::sequence(Q::Finite(2.0))
    }

    fn scalar_group(xs: &[f64]) -> Vec<Observation> {
        xs.iter().map(|&x| Observation::Scalar(x)).collect()
    }

    #[test]
    fn holm_hand_example() {
        let out = holm(&[0.001, 0.02, 0.04]);
        assert_relative_eq!(out[0], 0.003, epsilon = 1e-12);
        assert_relative_eq!(out[1], 0.04, epsilon = 1e-12);
        assert_relative_eq!(out[2], 0.04, epsilon = 1e-12);
    }

    #[test]
    fn bonferroni_is_exact_multiplier() {
        let out = bonferroni(&[0.01, 0.4, 0.9]);
        assert_relative_eq!(out[0], 0.03, epsilon = 1e-15);
        assert_relative_eq!(out[1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(out[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn two_sample_scalar_pipeline() {
        let g1 = scalar_group(&[0.3, -0.7, 1.2, 0.1, -0.4]);
        let g2 = scalar_group(&[2.1, 1.8, 2.4, 1.2, 2.9]);
        let settings = TestSettings::new(seq2(), 7);
        let rep = two_sample(&g1, &g2, &settings).unwrap();
        assert_eq!(rep.method, Method::Univariate);
        assert!(rep.p_raw > 0.0 && rep.p_raw <= 1.0);
        assert!(rep.p_adjusted <= rep.p_raw * 1.1);
    }

    #[test]
    fn two_sample_mc_attaches_without_changing_analytics() {
        let g1 = scalar_group(&[0.3, -0.7, 1.2, 0.1]);
        let g2 = scalar_group(&[2.1, 1.8, 2.4, 1.2]);
        let mut settings = TestSettings::new(seq2(), 7);
        let a = two_sample(&g1, &g2, &settings).unwrap();
        settings.mc = Some(500);
        let b = two_sample(&g1, &g2, &settings).unwrap();
        assert_eq!(a.p_raw, b.p_raw);
        assert_eq!(a.p_adjusted, b.p_adjusted);
        assert!(b.p_mc.is_some());
    }

    #[test]
    fn pairwise_k2_matches_two_sample() {
        let g1 = scalar_group(&[0.3, -0.7, 1.2, 0.1]);
        let g2 = scalar_group(&[2.1, 1.8, 2.4, 1.2]);
        let settings = TestSettings::new(seq2(), 99);
        let direct = two_sample(&g1, &g2, &settings).unwrap();
        let groups = vec![("a".to_string(), g1), ("b".to_string(), g2)];
        let pair = pairwise_tests(&groups, &settings, Correction::None).unwrap();
        assert_eq!(pair.len(), 1);
        assert_eq!(pair[0].p_adjusted, direct.p_adjusted);
        assert_eq!(pair[0].statistic, direct.statistic);
    }

    #[test]
    fn pairwise_null_scalars_rarely_reject() {
        let mut rng = substream(11, 0);
        let mut rejections = 0;
        let reps = 100;
        for rep in 0..reps {
            let groups: Vec<(String, Vec<Observation>)> = (0..4)
                .map(|g| {
                    (
                        format!("g{g}"),
                        scalar_group(
                            &(0..10)
                                .map(|_| rng.random_range(-1.0..1.0))
                                .collect::<Vec<f64>>(),
                        ),
                    )
                })
                .collect();
            let settings = TestSettings::new(seq2(), 500 + rep);
            let reports = pairwise_tests(&groups, &settings, Correction::Bonferroni).unwrap();
            if reports.iter().any(|r| r.p_adjusted < 0.05) {
                rejections += 1;
            }
        }
        assert!(
            rejections <= 5,
            "{rejections} of {reps} null replicates rejected at 5% after Bonferroni"
        );
    }

    #[test]
    fn global_banach_engine_matches_stacked_matrix_route() {
        // the Banach-valued aggregation on 1-d vector observations must
        // coincide with the stacked pairwise matrix (centred, without the
        // scalar path's per-pair standardization)
        use crate::bounds::{build_sync_matrix, sync_statistic};
        let mut rng = substream(13, 0);
        let raw: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let settings = TestSettings::new(seq2(), 3);
        let vec_groups: Vec<(String, Vec<Observation>)> = raw
            .iter()
            .enumerate()
            .map(|(i, g)| {
                (
                    format!("g{i}"),
                    g.iter()
                        .map(|&x| Observation::Vector(nalgebra::DVector::from_row_slice(&[x])))
                        .collect(),
                )
            })
            .collect();
        let b = global_test(&vec_groups, &settings).unwrap();
        let mut x = build_sync_matrix(&raw).unwrap();
        let rows = x.nrows();
        for mut col in x.column_iter_mut() {
            let mean = col.iter().sum::<f64>() / rows as f64;
            for v in col.iter_mut() {
                *v -= mean;
            }
        }
        let stat = sync_statistic(&x, &SignVector::canonical(rows).unwrap()).unwrap();
        assert_relative_eq!(b.statistic, stat.value, max_relative = 1e-10);
        assert_relative_eq!(b.scale, stat.scale, max_relative = 1e-10);
    }

    #[test]
    fn global_scalar_standardized_columns_reduce_to_unit_variance() {
        // per-pair standardization makes each stacked column's sample
        // variance exactly 1, so the scalar global statistic aggregates the
        // standardized pairwise statistics
        let mut rng = substream(14, 0);
        let raw: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let settings = TestSettings::new(seq2(), 3);
        let scalar_groups: Vec<(String, Vec<Observation>)> = raw
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("g{i}"), scalar_group(g)))
            .collect();
        let a = global_test(&scalar_groups, &settings).unwrap();
        // rebuild the standardized matrix by hand and compare
        let mut x = crate::bounds::build_sync_matrix(&raw).unwrap();
        let rows = x.nrows();
        for mut col in x.column_iter_mut() {
            let mean = col.iter().sum::<f64>() / rows as f64;
            for v in col.iter_mut() {
                *v -= mean;
            }
            let sd = (col.iter().map(|v| v * v).sum::<f64>() / (rows as f64 - 1.0)).sqrt();
            for v in col.iter_mut() {
                *v /= sd;
            }
        }
        let stat =
            crate::bounds::sync_statistic(&x, &SignVector::canonical(rows).unwrap()).unwrap();
        assert_relative_eq!(a.statistic, stat.value, max_relative = 1e-10);
        assert_relative_eq!(a.scale, stat.scale, max_relative = 1e-10);
    }

    #[test]
    fn global_rejects_unbalanced_and_degenerate() {
        let settings = TestSettings::new(seq2(), 1);
        let groups = vec![
            ("a".to_string(), scalar_group(&[1.0, 2.0])),
            ("b".to_string(), scalar_group(&[1.0])),
        ];
        assert!(matches!(
            global_test(&groups, &settings),
            Err(Error::UnsupportedDesign(_))
        ));
        let groups = vec![
            ("a".to_string(), scalar_group(&[3.0, 3.0])),
            ("b".to_string(), scalar_group(&[3.0, 3.0])),
        ];
        assert!(matches!(
            global_test(&groups, &settings),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn center_by_design_kills_row_and_column_effects() {
        // constant grid -> all-zero residuals; row-only effects -> zero
        let k = 4;
        let constant: Vec<Vec<Observation>> = (0..k)
            .map(|_| (0..k).map(|_| Observation::Scalar(3.7)).collect())
            .collect();
        for row in center_by_design(&constant).unwrap() {
            for obs in row {
                let Observation::Scalar(v) = obs else {
                    panic!()
                };
                assert!(v.abs() < 1e-12);
            }
        }
        let row_only: Vec<Vec<Observation>> = (0..k)
            .map(|i| {
                (0..k)
                    .map(|_| Observation::Scalar(i as f64 * 2.0))
                    .collect()
            })
            .collect();
        for row in center_by_design(&row_only).unwrap() {
            for obs in row {
                let Observation::Scalar(v) = obs else {
                    panic!()
                };
                assert!(v.abs() < 1e-12);
            }
        }
        // random grid: residual row and column sums vanish
        let mut rng = substream(17, 0);
        let grid: Vec<Vec<Observation>> = (0..k)
            .map(|_| {
                (0..k)
                    .map(|_| Observation::Scalar(rng.random_range(-5.0..5.0)))
                    .collect()
            })
            .collect();
        let resid = center_by_design(&grid).unwrap();
        #[allow(clippy::needless_range_loop)] // transposed access of resid
        for i in 0..k {
            let row_sum: f64 = (0..k)
                .map(|j| match resid[i][j] {
                    Observation::Scalar(v) => v,
                    _ => unreachable!(),
                })
                .sum();
            let col_sum: f64 = (0..k)
                .map(|j| match resid[j][i] {
                    Observation::Scalar(v) => v,
                    _ => unreachable!(),
                })
                .sum();
            assert!(row_sum.abs() <= 1e-10 && col_sum.abs() <= 1e-10);
        }
    }

    #[test]
    fn latin_square_validation() {
        assert!(LatinSquare::new(vec![vec![0, 1], vec![1, 0]]).is_ok());
        assert!(LatinSquare::new(vec![vec![0, 1], vec![0, 1]]).is_err());
        assert!(LatinSquare::new(vec![vec![0, 0], vec![1, 1]]).is_err());
        let sq = LatinSquare::cyclic(5);
        assert_eq!(sq.k(), 5);
        assert!(LatinSquare::new(
            (0..5)
                .map(|i| (0..5).map(|j| (i + j) % 5).collect())
                .collect()
        )
        .is_ok());
    }

    fn latin_responses(
        k: usize,
        layout: &LatinSquare,
        treatment_effect: f64,
        seed: u64,
    ) -> Vec<Vec<Observation>> {
        let mut rng = substream(seed, 0);
        (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| {
                        let t = layout.treatment(i, j) as f64;
                        Observation::Scalar(treatment_effect * t + rng.random_range(-1.0..1.0))
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn latin_stepdown_planted_treatment_effect() {
        let k = 4;
        let layout = LatinSquare::cyclic(k);
        let responses = latin_responses(k, &layout, 4.0, 23);
        let settings = TestSettings::new(seq2(), 5);
        let report = latin_square_stepdown(
            &responses,
            &layout,
            &settings,
            0.05,
            LatinMode::MonteCarlo { n_perms: 400 },
        )
        .unwrap();
        assert_eq!(report.outcomes[0].factor, Factor::Treatment);
        assert_eq!(report.outcomes[0].decision, Decision::Rejected);
        // one of row/column tested and not rejected, the other untestable
        let tested: Vec<_> = report
            .outcomes
            .iter()
            .filter(|o| o.decision == Decision::NotRejected)
            .collect();
        assert_eq!(tested.len(), 1);
        assert_eq!(
            report
                .outcomes
                .iter()
                .filter(|o| o.decision == Decision::Untestable)
                .count(),
            1
        );
    }

    #[test]
    fn latin_stepdown_analytic_mode_agrees_with_mc_on_decisions() {
        let k = 4;
        let layout = LatinSquare::cyclic(k);
        let responses = latin_responses(k, &layout, 4.0, 29);
        let settings = TestSettings::new(seq2(), 7);
        let analytic = latin_square_stepdown(
            &responses,
            &layout,
            &settings,
            0.05,
            LatinMode::Analytic { r: 100 },
        )
        .unwrap();
        assert_eq!(analytic.outcomes[0].factor, Factor::Treatment);
        assert_eq!(analytic.outcomes[0].decision, Decision::Rejected);
        assert!(analytic.outcomes[0].calibration.is_some());
        let mc = latin_square_stepdown(
            &responses,
            &layout,
            &settings,
            0.05,
            LatinMode::MonteCarlo { n_perms: 400 },
        )
        .unwrap();
        for (a, b) in analytic.outcomes.iter().zip(&mc.outcomes) {
            assert_eq!(a.factor, b.factor);
            assert_eq!(a.decision, b.decision);
        }
    }

    #[test]
    fn latin_stepdown_null_mostly_stops_immediately() {
        let k = 4;
        let layout = LatinSquare::cyclic(k);
        let mut stops = 0;
        let reps = 40;
        for rep in 0..reps {
            let responses = latin_responses(k, &layout, 0.0, 100 + rep);
            let settings = TestSettings::new(seq2(), 200 + rep);
            let report = latin_square_stepdown(
                &responses,
                &layout,
                &settings,
                0.05,
                LatinMode::MonteCarlo { n_perms: 200 },
            )
            .unwrap();
            if report.outcomes[0].decision == Decision::NotRejected {
                stops += 1;
                assert_eq!(report.outcomes[1].decision, Decision::NotTested);
            }
        }
        assert!(
            stops >= 36,
            "expected >= 90% immediate stops under the null, got {stops}/{reps}"
        );
    }

    #[test]
    fn latin_k2_reports_confounded_factors_untestable() {
        let layout = LatinSquare::cyclic(2);
        let responses = latin_responses(2, &layout, 1.0, 3);
        let settings = TestSettings::new(seq2(), 8);
        let report = latin_square_stepdown(
            &responses,
            &layout,
            &settings,
            0.05,
            LatinMode::MonteCarlo { n_perms: 50 },
        )
        .unwrap();
        assert_eq!(
            report
                .outcomes
                .iter()
                .filter(|o| o.decision == Decision::Untestable)
                .count(),
            2
        );
    }

    fn curve_cell(
        mu: f64,
        m: usize,
        grid: &[f64],
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Vec<Observation> {
        (0..m)
            .map(|_| {
                let values: Vec<f64> = grid
                    .iter()
                    .map(|t| mu * t + rng.random_range(-0.5..0.5))
                    .collect();
                Observation::Curve(GridCurve::new(grid.to_vec(), values).unwrap())
            })
            .collect()
    }

    #[test]
    fn crbd_single_block_is_bit_identical_to_one_way() {
        let grid = GridCurve::uniform_unit_grid(12);
        let mut rng = substream(31, 0);
        let cells: Vec<Vec<Vec<Observation>>> = (0..3)
            .map(|t| vec![curve_cell(t as f64 * 0.2, 6, &grid, &mut rng)])
            .collect();
        let data = CrbdData {
            treatments: vec!["t0".into(), "t1".into(), "t2".into()],
            blocks: vec!["b0".into()],
            cells: cells.clone(),
        };
        let settings = TestSettings {
            mc: Some(200),
            ..TestSettings::new(NormSpec::function(Q::Finite(2.0)), 77)
        };
        let crbd = crbd_test(&data, &settings, CrbdMode::Means, Correction::Bonferroni).unwrap();
        let groups: Vec<(String, Vec<Observation>)> = cells
            .iter()
            .enumerate()
            .map(|(t, c)| (format!("t{t}"), c[0].clone()))
            .collect();
        let pairwise = pairwise_tests(&groups, &settings, Correction::Bonferroni).unwrap();
        let global = global_test(&groups, &settings).unwrap();
        assert_eq!(crbd.pairwise.len(), pairwise.len());
        for (a, b) in crbd.pairwise.iter().zip(&pairwise) {
            assert_eq!(a.statistic, b.statistic);
            assert_eq!(a.p_raw, b.p_raw);
            assert_eq!(a.p_adjusted, b.p_adjusted);
            assert_eq!(
                a.p_mc.as_ref().unwrap().exceed_count,
                b.p_mc.as_ref().unwrap().exceed_count
            );
        }
        assert_eq!(crbd.global.statistic, global.statistic);
        assert_eq!(crbd.global.p_adjusted, global.p_adjusted);
    }

    #[test]
    fn crbd_planted_covariance_difference_ranks_first() {
        use crate::linalg::{covariance_path, SymOperator};
        let d = 8;
        let grid = GridCurve::uniform_unit_grid(d);
        let mean = GridCurve::new(grid.clone(), vec![0.0; d]).unwrap();
        // two fixed synthetic covariances and an interpolation target
        let base = {
            let m = nalgebra::DMatrix::from_fn(d, d, |i, j| {
                0.5f64.powi((i as i32 - j as i32).abs()) * 0.8
            });
            SymOperator::new((&m + m.transpose()) * 0.5).unwrap()
        };
        let other = {
            let diag: Vec<f64> = (0..d).map(|i| 0.3 + 1.4 * i as f64 / d as f64).collect();
            SymOperator::from_diagonal(&diag).unwrap()
        };
        let shifted = covariance_path(&base, &other, 3.0).unwrap();

        let mut win = 0;
        let reps = 20;
        for rep in 0..reps {
            let mut cells: Vec<Vec<Vec<Observation>>> = Vec::new();
            for t in 0..3 {
                let cov = if t == 0 { &shifted } else { &base };
                let mut blocks = Vec::new();
                for b in 0..2 {
                    let curves = crate::ingest::simulate_gaussian_curves(
                        &mean,
                        cov,
                        10,
                        derive_seed(1000 + rep, (t * 10 + b) as u64),
                    )
                    .unwrap();
                    blocks.push(curves.into_iter().map(Observation::Curve).collect());
                }
                cells.push(blocks);
            }
            let data = CrbdData {
                treatments: vec!["shifted".into(), "base1".into(), "base2".into()],
                blocks: vec!["b0".into(), "b1".into()],
                cells,
            };
            let settings = TestSettings::new(NormSpec::schatten(Q::Finite(2.0)), 400 + rep);
            let report = crbd_test(
                &data,
                &settings,
                CrbdMode::Covariances { group_size: None },
                Correction::None,
            )
            .unwrap();
            // pairings involving the shifted treatment: indices 0 (s vs b1)
            // and 1 (s vs b2); index 2 is base vs base
            let p_null = report.pairwise[2].p_adjusted;
            if report.pairwise[0].p_adjusted <= p_null && report.pairwise[1].p_adjusted <= p_null {
                win += 1;
            }
        }
        assert!(
            win >= 18,
            "planted covariance difference dominated in only {win}/{reps} replicates"
        );
    }

    #[test]
    fn crbd_block_test_present_for_two_blocks() {
        let grid = GridCurve::uniform_unit_grid(6);
        let mut rng = substream(41, 0);
        let cells: Vec<Vec<Vec<Observation>>> = (0..2)
            .map(|_| {
                (0..2)
                    .map(|b| curve_cell(b as f64, 4, &grid, &mut rng))
                    .collect()
            })
            .collect();
        let data = CrbdData {
            treatments: vec!["t0".into(), "t1".into()],
            blocks: vec!["male".into(), "female".into()],
            cells,
        };
        let settings = TestSettings::new(NormSpec::function(Q::Finite(2.0)), 5);
        let report = crbd_test(&data, &settings, CrbdMode::Means, Correction::None).unwrap();
        assert_eq!(report.block_tests.len(), 1);
        let bt = &report.block_tests[0];
        assert!(bt.p_adjusted > 0.0 && bt.p_adjusted <= 1.0);
        assert!(bt.flags.iter().any(|f| f == "block-factor-test"));
        assert!(report
            .flags
            .iter()
            .any(|f| f == "interaction-terms-assumed-negligible"));
    }

    #[test]
    fn crbd_rejects_unbalanced_cells() {
        let grid = GridCurve::uniform_unit_grid(6);
        let mut rng = substream(43, 0);
        let mut cells: Vec<Vec<Vec<Observation>>> = (0..2)
            .map(|_| vec![curve_cell(0.0, 4, &grid, &mut rng)])
            .collect();
        cells[1][0].pop();
        let data = CrbdData {
            treatments: vec!["t0".into(), "t1".into()],
            blocks: vec!["b0".into()],
            cells,
        };
        let settings = TestSettings::new(NormSpec::function(Q::Finite(2.0)), 5);
        assert!(matches!(
            crbd_test(&data, &settings, CrbdMode::Means, Correction::None),
            Err(Error::UnsupportedDesign(_))
        ));
    }
}
