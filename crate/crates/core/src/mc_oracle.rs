//! Ground-truth permutation machinery: constrained Rademacher sampling,
//! Monte-Carlo permutation p-values, and exhaustive enumeration for small n.
//!
//! Balanced two-group assignments are realized as zero-sum sign vectors;
//! unbalanced univariate reassignments as uniform subsets. Every estimate is
//! reproducible from its seed: permutation index `i` draws from its own
//! counter-derived substream, so results do not depend on evaluation order.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bounds;
use crate::error::{Error, Result};

/// A vector of +-1 signs summing to zero: one balanced relabeling.
#[derive(Debug, Clone, PartialEq)]
pub struct SignVector {
    signs: Vec<f64>,
}

impl SignVector {
    /// Observed assignment: +1 on the first `m` slots, -1 on the rest.
    pub fn canonical(n: usize) -> Result<Self> {
        if n == 0 || !n.is_multiple_of(2) {
            return Err(Error::domain(format!(
                "sign vector length must be even, got {n}"
            )));
        }
        let mut signs = vec![1.0; n];
        for s in signs.iter_mut().skip(n / 2) {
            *s = -1.0;
        }
        Ok(SignVector { signs })
    }

    pub fn from_signs(signs: Vec<f64>) -> Result<Self> {
        if signs.iter().any(|s| *s != 1.0 && *s != -1.0) {
            return Err(Error::domain("sign entries must be exactly +1 or -1"));
        }
        if signs.iter().sum::<f64>() != 0.0 {
            return Err(Error::domain("sign vector must sum to zero"));
        }
        Ok(SignVector { signs })
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }
}

/// A Monte-Carlo permutation p-value with its add-one convention and
/// binomial standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub p_hat: f64,
    pub n_perms: usize,
    pub std_err: f64,
    pub exceed_count: usize,
}

impl McEstimate {
    fn from_count(exceed_count: usize, n_perms: usize) -> Self {
        let p_hat = (exceed_count as f64 + 1.0) / (n_perms as f64 + 1.0);
        McEstimate {
            p_hat,
            n_perms,
            std_err: (p_hat * (1.0 - p_hat) / n_perms as f64).sqrt(),
            exceed_count,
        }
    }
}

/// Mix a context salt into a seed so different consumers of the same user
/// seed get unrelated streams. splitmix64 finalizer.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Substream `index` of the generator family keyed by `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Uniform draw over all C(n, n/2) zero-sum sign vectors.
pub fn sample_sign_vector(n: usize, rng: &mut ChaCha8Rng) -> Result<SignVector> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::domain(format!(
            "sign vector length must be even, got {n}"
        )));
    }
    let mut signs = vec![1.0; n];
    for s in signs.iter_mut().skip(n / 2) {
        *s = -1.0;
    }
    signs.shuffle(rng);
    debug_assert_eq!(signs.iter().sum::<f64>(), 0.0);
    Ok(SignVector { signs })
}

/// Uniform draw of an m1-subset, as a membership mask for group 1.
pub fn sample_subset_mask(n: usize, m1: usize, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if m1 == 0 || m1 >= n {
        return Err(Error::domain(format!(
            "subset size must satisfy 0 < m1 < n, got {m1}/{n}"
        )));
    }
    let mut mask = vec![false; n];
    for m in mask.iter_mut().take(m1) {
        *m = true;
    }
    mask.shuffle(rng);
    Ok(mask)
}

// Ties count as exceedances. Reassignment evaluators rarely share the exact
// floating-point expression that produced the observed statistic, so a draw
// reproducing the observed assignment can land a few ulps under it; the
// threshold gives equality a relative slack so those ties are kept.
const TIE_REL_TOL: f64 = 1e-12;

fn tie_threshold(observed: f64) -> f64 {
    observed - TIE_REL_TOL * observed.abs()
}

/// Monte-Carlo permutation p-value.
///
/// `evaluator` recomputes the statistic under one random reassignment drawn
/// from the rng it is handed; permutation `i` gets substream `i` of `seed`.
/// Ties with the observed statistic count as exceedances (up to a 1e-12
/// relative slack), and the estimate follows the add-one convention
/// `(b+1)/(N+1)`.
pub fn mc_pvalue<F>(
    mut evaluator: F,
    observed: f64,
    n_perms: usize,
    seed: u64,
) -> Result<McEstimate>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    if n_perms < 1 {
        return Err(Error::domain("n_perms must be at least 1"));
    }
    let threshold = tie_threshold(observed);
    let mut exceed = 0usize;
    for i in 0..n_perms {
        let mut rng = substream(seed, i as u64);
        let stat = evaluator(&mut rng)?;
        if stat >= threshold {
            exceed += 1;
        }
    }
    Ok(McEstimate::from_count(exceed, n_perms))
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Exact permutation p-value by enumerating all C(n, m1) distinguishable
/// group-1 assignments (the observed one included, so the result is at
/// least 1/C(n, m1)).
///
/// Guarded at C(n, m1) <= 10^4; larger problems belong to [`mc_pvalue`].
pub fn exhaustive_pvalue<F>(mut evaluator: F, observed: f64, n: usize, m1: usize) -> Result<f64>
where
    F: FnMut(&[bool]) -> Result<f64>,
{
    if m1 == 0 || m1 >= n {
        return Err(Error::domain(format!("need 0 < m1 < n, got {m1}/{n}")));
    }
    let total = binomial(n, m1);
    if total > 10_000 {
        return Err(Error::Size(format!(
            "exhaustive enumeration of C({n},{m1}) = {total} assignments exceeds the 10^4 guard"
        )));
    }
    let threshold = tie_threshold(observed);
    let mut idx: Vec<usize> = (0..m1).collect();
    let mut exceed = 0u64;
    let mut count = 0u64;
    loop {
        let mut mask = vec![false; n];
        for &i in &idx {
            mask[i] = true;
        }
        if evaluator(&mask)? >= threshold {
            exceed += 1;
        }
        count += 1;
        // lexicographic successor of the index combination
        let mut pos = m1;
        while pos > 0 {
            pos -= 1;
            if idx[pos] != pos + n - m1 {
                idx[pos] += 1;
                for j in pos + 1..m1 {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
            if pos == 0 {
                debug_assert_eq!(count as u128, total);
                return Ok(exceed as f64 / count as f64);
            }
        }
    }
}

/// Synchronized Monte-Carlo p-value for a stacked pairwise matrix: the same
/// zero-sum sign vector is applied to every column of `x`.
pub fn mc_sync_pvalue(x: &DMatrix<f64>, n_perms: usize, seed: u64) -> Result<McEstimate> {
    let rows = x.nrows();
    let observed = bounds::sync_value(x, &SignVector::canonical(rows)?)?;
    mc_pvalue(
        |rng| {
            let sv = sample_sign_vector(rows, rng)?;
            bounds::sync_value(x, &sv)
        },
        observed,
        n_perms,
        seed,
    )
}
