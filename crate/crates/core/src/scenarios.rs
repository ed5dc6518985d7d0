//! Replication studies and the benchmark harness.
//!
//! Each scenario runs a seeded simulation protocol and returns plot-ready
//! per-grid-point summaries: mean log2 p-values for every method under
//! comparison (classical reference test where one exists, Monte-Carlo
//! permutation, raw analytic bound, beta-adjusted bound). The benchmark
//! measures the wall time and decomposition count of the full analytic
//! blocked-design pipeline against the measured per-permutation cost of
//! simulation-based testing.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;

use crate::betacal::analytic_beta_adjust;
use crate::bounds::{univariate_statistic, univariate_tail_bound, Observation, SampleSplit};
use crate::designs::{
    crbd_test, global_test, second_order_embedding, two_sample, Correction, CrbdData, CrbdMode,
    TestSettings,
};
use crate::error::{Error, Result};
use crate::ingest::simulate_gaussian_curves;
use crate::linalg::{
    covariance_path, decomposition_count, reset_decomposition_count, singular_values, GridCurve,
    NormSpec, SymOperator, Q,
};
use crate::mc_oracle::{derive_seed, mc_pvalue, sample_sign_vector, substream};
use crate::stats::{
    ks_test_uniform, mean, one_way_f_pvalue, spearman_rho, two_sample_t_pvalue, KsTest,
};

fn log2p(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).log2()
}

fn mean_of(xs: &[f64]) -> f64 {
    mean(xs)
}

// ---------------------------------------------------------------------------
// Univariate two-sample study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct UniTwoSampleConfig {
    pub m1: usize,
    pub m2: usize,
    pub mu_grid: Vec<f64>,
    pub replicates: usize,
    pub n_perms: usize,
    pub seed: u64,
}

impl Default for UniTwoSampleConfig {
    fn default() -> Self {
        UniTwoSampleConfig {
            m1: 100,
            m2: 100,
            mu_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            replicates: 200,
            n_perms: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniTwoSampleRow {
    pub mu: f64,
    pub mean_log2_ttest: f64,
    pub mean_log2_mc: f64,
    pub mean_log2_raw: f64,
    pub mean_log2_adjusted: f64,
    /// Mean over replicates of |log2 p_adjusted - log2 p_ttest|.
    pub mean_abs_log2_adj_vs_ttest: f64,
}

/// Two-sample location study on Gaussian data: group 1 ~ N(0,1), group 2
/// ~ N(mu,1) across the mu grid. Replicates run in parallel; every
/// statistical quantity derives from per-replicate substreams, so the result
/// is independent of thread count.
pub fn uni_two_sample(cfg: &UniTwoSampleConfig) -> Result<Vec<UniTwoSampleRow>> {
    let split = SampleSplit::new(cfg.m1, cfg.m2)?;
    let n = split.n();
    let normal = rand_distr::StandardNormal;
    let mut rows = Vec::with_capacity(cfg.mu_grid.len());
    for (gi, &mu) in cfg.mu_grid.iter().enumerate() {
        let per_rep: Vec<[f64; 5]> = (0..cfg.replicates)
            .into_par_iter()
            .map(|rep| -> Result<[f64; 5]> {
                let data_seed = derive_seed(cfg.seed, (gi * cfg.replicates + rep) as u64);
                let mut rng = substream(data_seed, 0);
                let mut values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                for v in values.iter_mut().skip(cfg.m1) {
                    *v += mu;
                }
                let stat = univariate_statistic(&values, &split)?;
                let p_raw = univariate_tail_bound(&stat, &split)?;
                let p_adj = analytic_beta_adjust(p_raw, &split)?;
                let p_t = two_sample_t_pvalue(&values[..cfg.m1], &values[cfg.m1..])?;
                let s_n = stat.scale;
                let est = if split.is_balanced() {
                    let m = cfg.m1 as f64;
                    mc_pvalue(
                        |r| {
                            let sv = sample_sign_vector(n, r)?;
                            let sum: f64 = sv.signs().iter().zip(&values).map(|(e, x)| e * x).sum();
                            Ok(sum.abs() / (s_n * m))
                        },
                        stat.value,
                        cfg.n_perms,
                        derive_seed(data_seed, 1),
                    )?
                } else {
                    let (m1, m2) = (cfg.m1 as f64, cfg.m2 as f64);
                    mc_pvalue(
                        |r| {
                            let mask = crate::mc_oracle::sample_subset_mask(n, cfg.m1, r)?;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for (v, &in1) in values.iter().zip(&mask) {
                                if in1 {
                                    s1 += v;
                                } else {
                                    s2 += v;
                                }
                            }
                            Ok((s1 / m1 - s2 / m2).abs() / s_n)
                        },
                        stat.value,
                        cfg.n_perms,
                        derive_seed(data_seed, 1),
                    )?
                };
                Ok([
                    log2p(p_t),
                    log2p(est.p_hat),
                    log2p(p_raw),
                    log2p(p_adj),
                    (log2p(p_adj) - log2p(p_t)).abs(),
                ])
            })
            .collect::<Result<_>>()?;
        let col = |i: usize| per_rep.iter().map(|r| r[i]).sum::<f64>() / per_rep.len() as f64;
        rows.push(UniTwoSampleRow {
            mu,
            mean_log2_ttest: col(0),
            mean_log2_mc: col(1),
            mean_log2_raw: col(2),
            mean_log2_adjusted: col(3),
            mean_abs_log2_adj_vs_ttest: col(4),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Univariate k-sample study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct UniKsampleConfig {
    pub k: usize,
    pub n_per_group: usize,
    pub shift_grid: Vec<f64>,
    pub replicates: usize,
    pub n_perms: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for UniKsampleConfig {
    fn default() -> Self {
        UniKsampleConfig {
            k: 4,
            n_per_group: 20,
            shift_grid: (0..=8).map(|i| i as f64 * 0.25).collect(),
            replicates: 200,
            n_perms: 1000,
            r: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct UniKsampleRow {
    pub shift: f64,
    pub mean_log2_ftest: f64,
    pub mean_log2_mc: f64,
    pub mean_log2_raw: f64,
    pub mean_log2_calibrated: f64,
    /// Mean over replicates of |log2 p_calibrated - log2 p_mc|.
    pub mean_abs_log2_ratio: f64,
    /// Fraction of replicates whose MC estimate sat at the resolution floor
    /// 1/(N+1); past that point the MC comparator carries no information.
    pub mc_floor_fraction: f64,
}

/// Synchronized k-sample study: k-1 groups at mean 0, the last shifted.
pub fn uni_ksample(cfg: &UniKsampleConfig) -> Result<Vec<UniKsampleRow>> {
    if cfg.k < 2 {
        return Err(Error::domain("k must be at least 2"));
    }
    let normal = rand_distr::StandardNormal;
    let mut rows = Vec::with_capacity(cfg.shift_grid.len());
    for (gi, &shift) in cfg.shift_grid.iter().enumerate() {
        let mut l_f = Vec::new();
        let mut l_mc = Vec::new();
        let mut l_raw = Vec::new();
        let mut l_cal = Vec::new();
        let mut l_ratio = Vec::new();
        let mut floored = 0usize;
        for rep in 0..cfg.replicates {
            let data_seed = derive_seed(cfg.seed, 7_000_000 + (gi * cfg.replicates + rep) as u64);
            let mut rng = substream(data_seed, 0);
            let samples: Vec<Vec<f64>> = (0..cfg.k)
                .map(|g| {
                    let delta = if g + 1 == cfg.k { shift } else { 0.0 };
                    (0..cfg.n_per_group)
                        .map(|_| {
                            let z: f64 = normal.sample(&mut rng);
                            z + delta
                        })
                        .collect()
                })
                .collect();
            let p_f = one_way_f_pvalue(&samples)?;
            let groups: Vec<(String, Vec<Observation>)> = samples
                .iter()
                .enumerate()
                .map(|(g, s)| {
                    (
                        format!("g{g}"),
                        s.iter().map(|&x| Observation::Scalar(x)).collect(),
                    )
                })
                .collect();
            let settings = TestSettings {
                r: cfg.r,
                mc: Some(cfg.n_perms),
                ..TestSettings::new(NormSpec::sequence(Q::Finite(2.0)), data_seed)
            };
            let rep_out = global_test(&groups, &settings)?;
            let mc = rep_out.p_mc.expect("mc requested");
            if mc.exceed_count == 0 {
                floored += 1;
            }
            l_f.push(log2p(p_f));
            l_mc.push(log2p(mc.p_hat));
            l_raw.push(log2p(rep_out.p_raw));
            l_cal.push(log2p(rep_out.p_adjusted));
            l_ratio.push((log2p(rep_out.p_adjusted) - log2p(mc.p_hat)).abs());
        }
        rows.push(UniKsampleRow {
            shift,
            mean_log2_ftest: mean_of(&l_f),
            mean_log2_mc: mean_of(&l_mc),
            mean_log2_raw: mean_of(&l_raw),
            mean_log2_calibrated: mean_of(&l_cal),
            mean_abs_log2_ratio: mean_of(&l_ratio),
            mc_floor_fraction: floored as f64 / cfg.replicates as f64,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Functional mean study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct CurvesMeanConfig {
    pub m_per_group: usize,
    pub grid_len: usize,
    pub shift_grid: Vec<f64>,
    pub norm: NormSpec,
    pub replicates: usize,
    pub n_perms: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for CurvesMeanConfig {
    fn default() -> Self {
        CurvesMeanConfig {
            m_per_group: 30,
            grid_len: 50,
            shift_grid: (0..=5).map(|i| i as f64 * 0.2).collect(),
            norm: NormSpec::function(Q::Finite(2.0)),
            replicates: 100,
            n_perms: 1000,
            r: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvesMeanRow {
    pub shift: f64,
    pub mean_log2_mc: f64,
    pub mean_log2_raw: f64,
    pub mean_log2_adjusted: f64,
}

/// A smooth synthetic covariance kernel on the unit-interval grid:
/// exponential correlation with length scale 0.25 plus a small nugget.
pub fn smooth_kernel(grid: &[f64], variance: f64) -> SymOperator {
    let d = grid.len();
    let m = DMatrix::from_fn(d, d, |i, j| {
        let dist = (grid[i] - grid[j]).abs();
        variance * (-dist / 0.25).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    SymOperator::new(m).expect("kernel matrix is symmetric by construction")
}

/// Two-sample functional mean study: both groups share a Gaussian process,
/// group 2's mean is shifted by `shift * sin(pi t)`.
pub fn curves_mean(cfg: &CurvesMeanConfig) -> Result<Vec<CurvesMeanRow>> {
    let grid = GridCurve::uniform_unit_grid(cfg.grid_len);
    let cov = smooth_kernel(&grid, 1.0);
    let zero_mean = GridCurve::new(grid.clone(), vec![0.0; cfg.grid_len])?;
    let mut rows = Vec::with_capacity(cfg.shift_grid.len());
    for (gi, &shift) in cfg.shift_grid.iter().enumerate() {
        let shifted_mean = GridCurve::new(
            grid.clone(),
            grid.iter()
                .map(|t| shift * (std::f64::consts::PI * t).sin())
                .collect(),
        )?;
        let mut l_mc = Vec::new();
        let mut l_raw = Vec::new();
        let mut l_adj = Vec::new();
        for rep in 0..cfg.replicates {
            let data_seed = derive_seed(cfg.seed, 9_000_000 + (gi * cfg.replicates + rep) as u64);
            let g1 = simulate_gaussian_curves(&zero_mean, &cov, cfg.m_per_group, data_seed)?;
            let g2 = simulate_gaussian_curves(
                &shifted_mean,
                &cov,
                cfg.m_per_group,
                derive_seed(data_seed, 1),
            )?;
            let g1: Vec<Observation> = g1.into_iter().map(Observation::Curve).collect();
            let g2: Vec<Observation> = g2.into_iter().map(Observation::Curve).collect();
            let settings = TestSettings {
                r: cfg.r,
                mc: Some(cfg.n_perms),
                ..TestSettings::new(cfg.norm, data_seed)
            };
            let rep_out = two_sample(&g1, &g2, &settings)?;
            l_mc.push(log2p(rep_out.p_mc.expect("mc requested").p_hat));
            l_raw.push(log2p(rep_out.p_raw));
            l_adj.push(log2p(rep_out.p_adjusted));
        }
        rows.push(CurvesMeanRow {
            shift,
            mean_log2_mc: mean_of(&l_mc),
            mean_log2_raw: mean_of(&l_raw),
            mean_log2_adjusted: mean_of(&l_adj),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Covariance interpolation power sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProcrustesConfig {
    pub dim: usize,
    pub n_curves: usize,
    pub gamma_grid: Vec<f64>,
    pub norm: NormSpec,
    pub replicates: usize,
    pub n_perms: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for ProcrustesConfig {
    fn default() -> Self {
        ProcrustesConfig {
            dim: 25,
            n_curves: 30,
            gamma_grid: (0..=12).map(|i| i as f64 * 0.5).collect(),
            norm: NormSpec::schatten(Q::Finite(2.0)),
            replicates: 200,
            n_perms: 512,
            r: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcrustesRow {
    pub gamma: f64,
    pub mean_p_adjusted: f64,
    pub mean_p_mc: f64,
    pub mean_log2_adjusted: f64,
    pub mean_log2_mc: f64,
    pub mean_log2_raw: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProcrustesReport {
    pub rows: Vec<ProcrustesRow>,
    /// Spearman correlation of the mean adjusted p-value curve with gamma.
    pub spearman_adjusted: f64,
    pub spearman_mc: f64,
}

/// The two fixed covariance operators whose interpolation path drives the
/// power sweep: an exponential kernel and a rescaled squared-exponential.
pub fn procrustes_endpoints(dim: usize) -> (SymOperator, SymOperator) {
    let grid = GridCurve::uniform_unit_grid(dim);
    let sigma_m = smooth_kernel(&grid, 1.0);
    let d = grid.len();
    let m = DMatrix::from_fn(d, d, |i, j| {
        let dist = grid[i] - grid[j];
        1.5 * (-dist * dist / (2.0 * 0.1 * 0.1)).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    let sigma_f = SymOperator::new(m).expect("kernel matrix is symmetric by construction");
    (sigma_m, sigma_f)
}

/// Covariance-equality power sweep along the Procrustes interpolation path:
/// group 1 ~ GP(0, Sigma_M), group 2 ~ GP(0, Sigma(gamma)); each curve is
/// embedded as a rank-one operator and the two-sample operator test runs at
/// the configured Schatten norm against a permutation Monte-Carlo oracle.
pub fn operators_procrustes(cfg: &ProcrustesConfig) -> Result<ProcrustesReport> {
    let (sigma_m, sigma_f) = procrustes_endpoints(cfg.dim);
    let grid = GridCurve::uniform_unit_grid(cfg.dim);
    let zero_mean = GridCurve::new(grid, vec![0.0; cfg.dim])?;
    let mut rows = Vec::with_capacity(cfg.gamma_grid.len());
    for (gi, &gamma) in cfg.gamma_grid.iter().enumerate() {
        let sigma_gamma = covariance_path(&sigma_m, &sigma_f, gamma)?;
        let per_rep: Vec<[f64; 5]> = (0..cfg.replicates)
            .into_par_iter()
            .map(|rep| -> Result<[f64; 5]> {
                let data_seed =
                    derive_seed(cfg.seed, 11_000_000 + (gi * cfg.replicates + rep) as u64);
                let g1 = simulate_gaussian_curves(&zero_mean, &sigma_m, cfg.n_curves, data_seed)?;
                let g2 = simulate_gaussian_curves(
                    &zero_mean,
                    &sigma_gamma,
                    cfg.n_curves,
                    derive_seed(data_seed, 1),
                )?;
                let g1: Vec<Observation> = g1.into_iter().map(Observation::Curve).collect();
                let g2: Vec<Observation> = g2.into_iter().map(Observation::Curve).collect();
                let ops1 = second_order_embedding(&g1, None, 0)?;
                let ops2 = second_order_embedding(&g2, None, 0)?;
                let settings = TestSettings {
                    r: cfg.r,
                    mc: Some(cfg.n_perms),
                    ..TestSettings::new(cfg.norm, data_seed)
                };
                let rep_out = two_sample(&ops1, &ops2, &settings)?;
                let mc = rep_out.p_mc.expect("mc requested").p_hat;
                Ok([
                    rep_out.p_adjusted,
                    mc,
                    log2p(rep_out.p_adjusted),
                    log2p(mc),
                    log2p(rep_out.p_raw),
                ])
            })
            .collect::<Result<_>>()?;
        let col = |i: usize| per_rep.iter().map(|r| r[i]).sum::<f64>() / per_rep.len() as f64;
        rows.push(ProcrustesRow {
            gamma,
            mean_p_adjusted: col(0),
            mean_p_mc: col(1),
            mean_log2_adjusted: col(2),
            mean_log2_mc: col(3),
            mean_log2_raw: col(4),
        });
    }
    let gammas: Vec<f64> = rows.iter().map(|r| r.gamma).collect();
    let adj: Vec<f64> = rows.iter().map(|r| r.mean_p_adjusted).collect();
    let mc: Vec<f64> = rows.iter().map(|r| r.mean_p_mc).collect();
    Ok(ProcrustesReport {
        spearman_adjusted: spearman_rho(&gammas, &adj)?,
        spearman_mc: spearman_rho(&gammas, &mc)?,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Null calibration study
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct NullCalibrationConfig {
    pub replicates: usize,
    pub m_curves: usize,
    pub grid_len: usize,
    pub operators_per_group: usize,
    pub group_size: usize,
    pub r: usize,
    pub seed: u64,
}

impl Default for NullCalibrationConfig {
    fn default() -> Self {
        NullCalibrationConfig {
            replicates: 100,
            m_curves: 30,
            grid_len: 50,
            operators_per_group: 10,
            group_size: 10,
            r: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct NullCalibrationSetting {
    pub name: String,
    pub pvalues: Vec<f64>,
    pub ks: KsTest,
}

/// Null-uniformity study of the beta-adjusted p-values: curve means in
/// L1/L2/Linf and covariance operators in S1/S2/Sinf, all data generated
/// under the null, each setting Kolmogorov-Smirnov-tested against
/// Uniform[0,1].
pub fn null_calibration(cfg: &NullCalibrationConfig) -> Result<Vec<NullCalibrationSetting>> {
    let grid = GridCurve::uniform_unit_grid(cfg.grid_len);
    let cov = smooth_kernel(&grid, 1.0);
    let zero_mean = GridCurve::new(grid.clone(), vec![0.0; cfg.grid_len])?;
    let qs = [
        ("1", Q::Finite(1.0)),
        ("2", Q::Finite(2.0)),
        ("inf", Q::Inf),
    ];
    let mut out = Vec::with_capacity(6);
    for (qname, q) in qs {
        let mut ps = Vec::with_capacity(cfg.replicates);
        for rep in 0..cfg.replicates {
            let data_seed = derive_seed(cfg.seed, 13_000_000 + rep as u64);
            let curves = simulate_gaussian_curves(&zero_mean, &cov, 2 * cfg.m_curves, data_seed)?;
            let items: Vec<Observation> = curves.into_iter().map(Observation::Curve).collect();
            let settings = TestSettings {
                r: cfg.r,
                ..TestSettings::new(NormSpec::function(q), derive_seed(data_seed, 17))
            };
            let rep_out = two_sample(&items[..cfg.m_curves], &items[cfg.m_curves..], &settings)?;
            ps.push(rep_out.p_adjusted);
        }
        let ks = ks_test_uniform(&ps)?;
        out.push(NullCalibrationSetting {
            name: format!("curves-L{qname}"),
            pvalues: ps,
            ks,
        });
    }
    for (qname, q) in qs {
        let mut ps = Vec::with_capacity(cfg.replicates);
        let curves_needed = 2 * cfg.operators_per_group * cfg.group_size;
        for rep in 0..cfg.replicates {
            let data_seed = derive_seed(cfg.seed, 14_000_000 + rep as u64);
            let curves = simulate_gaussian_curves(&zero_mean, &cov, curves_needed, data_seed)?;
            let rows: Vec<DVector<f64>> = curves
                .iter()
                .map(|c| DVector::from_row_slice(c.values()))
                .collect();
            let ops: Vec<Observation> = rows
                .chunks(cfg.group_size)
                .map(|chunk| {
                    Ok(Observation::Operator(crate::linalg::empirical_covariance(
                        chunk, true,
                    )?))
                })
                .collect::<Result<_>>()?;
            let settings = TestSettings {
                r: cfg.r,
                ..TestSettings::new(NormSpec::schatten(q), derive_seed(data_seed, 19))
            };
            let rep_out = two_sample(
                &ops[..cfg.operators_per_group],
                &ops[cfg.operators_per_group..],
                &settings,
            )?;
            ps.push(rep_out.p_adjusted);
        }
        let ks = ks_test_uniform(&ps)?;
        out.push(NullCalibrationSetting {
            name: format!("operators-S{qname}"),
            pvalues: ps,
            ks,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Benchmark harness
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub k: usize,
    pub blocks: usize,
    pub m_per_cell: usize,
    /// Per-hypothesis permutation budget of the simulation pipeline being
    /// modeled.
    pub n_perms: usize,
    /// Permutations actually timed to measure the per-permutation cost.
    pub measured_perms: usize,
    pub norm: NormSpec,
    pub r: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            dim: 100,
            k: 12,
            blocks: 4,
            m_per_cell: 6,
            n_perms: 2000,
            measured_perms: 10,
            norm: NormSpec::schatten(Q::Finite(2.0)),
            r: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkReport {
    pub dim: usize,
    pub k: usize,
    pub blocks: usize,
    pub m_per_cell: usize,
    pub pairings: usize,
    pub norm: NormSpec,
    pub seed: u64,
    /// Wall time of the full analytic blocked-design pipeline (pairwise +
    /// global, calibration included).
    pub analytic_secs: f64,
    pub analytic_decompositions: u64,
    /// Determinism digest: statistic values are seed-reproducible even
    /// though the timing fields are not.
    pub global_statistic: f64,
    pub first_pairwise_statistic: f64,
    /// Measured mean cost of one synchronized permutation of the simulation
    /// pipeline (every pairing x block statistic recomputed through a
    /// singular value decomposition, the standard implementation).
    pub per_perm_secs: f64,
    pub per_perm_decompositions: u64,
    pub measured_perms: usize,
    /// Total permutations of the modeled simulation study:
    /// pairings x n_perms.
    pub total_perms: usize,
    pub extrapolated_mc_secs: f64,
    pub extrapolated_mc_decompositions: u64,
    pub speedup: f64,
}

/// Benchmark data: random PSD operators per (treatment, block) cell.
fn benchmark_cells(cfg: &BenchmarkConfig) -> Result<Vec<Vec<Vec<Observation>>>> {
    let d = cfg.dim;
    let rank = 8.min(d);
    let mut cells = Vec::with_capacity(cfg.k);
    for t in 0..cfg.k {
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let mut items = Vec::with_capacity(cfg.m_per_cell);
            for i in 0..cfg.m_per_cell {
                let mut rng = substream(
                    derive_seed(cfg.seed, 17_000_000 + ((t * 64 + b) * 1024 + i) as u64),
                    0,
                );
                let low = DMatrix::from_fn(d, rank, |_, _| rng.random_range(-1.0..1.0));
                let mut m = &low * low.transpose() / rank as f64;
                for j in 0..d {
                    m[(j, j)] += 0.5;
                }
                items.push(Observation::Operator(SymOperator::new(
                    (&m + m.transpose()) * 0.5,
                )?));
            }
            blocks.push(items);
        }
        cells.push(blocks);
    }
    Ok(cells)
}

/// Times the analytic blocked-design pipeline against the measured cost of
/// simulation-based permutation testing on the same data.
///
/// The analytic arm runs the production pipeline (decomposition-free at the
/// Hilbert-Schmidt norm thanks to the Frobenius identity). The simulation
/// arm mirrors the standard approach: every permutation recomputes one
/// Schatten norm per (pairing, block) cell through an explicit singular
/// value decomposition, so its decomposition count per permutation is
/// exactly pairings x blocks. Decomposition counters are measured, not
/// estimated.
pub fn benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.measured_perms == 0 || cfg.n_perms == 0 {
        return Err(Error::domain("permutation counts must be positive"));
    }
    let cells = benchmark_cells(cfg)?;
    let data = CrbdData {
        treatments: (0..cfg.k).map(|t| format!("t{t}")).collect(),
        blocks: (0..cfg.blocks).map(|b| format!("b{b}")).collect(),
        cells: cells.clone(),
    };
    let settings = TestSettings {
        r: cfg.r,
        ..TestSettings::new(cfg.norm, cfg.seed)
    };

    reset_decomposition_count();
    let t0 = std::time::Instant::now();
    let report = crbd_test(&data, &settings, CrbdMode::Means, Correction::Bonferroni)?;
    let analytic_secs = t0.elapsed().as_secs_f64();
    let analytic_decompositions = decomposition_count();

    // Simulation cost model: centred per-cell stacks, one shared sign vector
    // per permutation, one SVD-based Schatten norm per (pairing, block).
    let d = cfg.dim;
    let n = 2 * cfg.m_per_cell;
    let mut stacks: Vec<Vec<DMatrix<f64>>> = Vec::new();
    for i in 0..cfg.k {
        for j in i + 1..cfg.k {
            for (cell_i, cell_j) in cells[i].iter().zip(cells[j].iter()) {
                let mut pooled: Vec<DMatrix<f64>> = Vec::with_capacity(n);
                for obs in cell_i.iter().chain(cell_j.iter()) {
                    let Observation::Operator(op) = obs else {
                        unreachable!("benchmark cells hold operators")
                    };
                    pooled.push(op.matrix().clone());
                }
                let mut mean = DMatrix::zeros(d, d);
                for m in &pooled {
                    mean += m;
                }
                mean /= n as f64;
                for m in &mut pooled {
                    *m -= &mean;
                }
                stacks.push(pooled);
            }
        }
    }
    reset_decomposition_count();
    let t1 = std::time::Instant::now();
    let mut digest = 0.0f64;
    for perm in 0..cfg.measured_perms {
        let mut rng = substream(derive_seed(cfg.seed, 23_000_000 + perm as u64), 0);
        let sv = sample_sign_vector(n, &mut rng)?;
        for stack in &stacks {
            let mut acc = DMatrix::zeros(d, d);
            for (m, s) in stack.iter().zip(sv.signs()) {
                acc.zip_apply(m, |a, b| *a += s * b);
            }
            let svals = singular_values(&acc)?;
            let norm = match cfg.norm.q {
                Q::Inf => svals[0],
                Q::Finite(q) => svals.iter().map(|v| v.powf(q)).sum::<f64>().powf(1.0 / q),
            };
            digest += norm;
        }
    }
    let measured_secs = t1.elapsed().as_secs_f64();
    let measured_decomps = decomposition_count();
    std::hint::black_box(digest);

    let per_perm_secs = measured_secs / cfg.measured_perms as f64;
    let per_perm_decompositions = measured_decomps / cfg.measured_perms as u64;
    let pairings = cfg.k * (cfg.k - 1) / 2;
    let total_perms = pairings * cfg.n_perms;
    let extrapolated_mc_secs = per_perm_secs * total_perms as f64;
    Ok(BenchmarkReport {
        dim: cfg.dim,
        k: cfg.k,
        blocks: cfg.blocks,
        m_per_cell: cfg.m_per_cell,
        pairings,
        norm: cfg.norm,
        seed: cfg.seed,
        analytic_secs,
        analytic_decompositions,
        global_statistic: report.global.statistic,
        first_pairwise_statistic: report.pairwise[0].statistic,
        per_perm_secs,
        per_perm_decompositions,
        measured_perms: cfg.measured_perms,
        total_perms,
        extrapolated_mc_secs,
        extrapolated_mc_decompositions: per_perm_decompositions * total_perms as u64,
        speedup: extrapolated_mc_secs / analytic_secs.max(1e-12),
    })
}
