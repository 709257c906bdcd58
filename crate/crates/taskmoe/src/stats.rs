//! Pearson correlation with permutation-test significance.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rngutil::{stream_rng, Stream};
use crate::scalar::Scalar;

pub const DEFAULT_PERMUTATIONS: usize = 10_000;

/// Sample Pearson correlation coefficient.
pub fn pearson_r<S: Scalar>(x: &[S], y: &[S]) -> Result<S> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "pearson inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::data("pearson needs at least 3 points"));
    }
    let n = S::from_usize(x.len()).unwrap();
    let mx = x.iter().copied().sum::<S>() / n;
    let my = y.iter().copied().sum::<S>() / n;
    let mut sxy = S::zero();
    let mut sxx = S::zero();
    let mut syy = S::zero();
    for (&a, &b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx == S::zero() || syy == S::zero() {
        return Err(Error::numeric(
            "pearson undefined: an input has zero variance",
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson r plus a two-sided permutation-test p-value: y is shuffled
/// `n_perm` times with a seeded generator and p is the add-one-smoothed
/// fraction of permutations with |r| at least as large as observed.
pub fn pearson<S: Scalar>(x: &[S], y: &[S], n_perm: usize, seed: u64) -> Result<(S, f64)> {
    let r_obs = pearson_r(x, y)?;
    let mut rng = stream_rng(seed, Stream::Analysis);
    let mut shuffled: Vec<S> = y.to_vec();
    let mut at_least = 0usize;
    let threshold = r_obs.abs() - S::from_f64_lossy(1e-12);
    for _ in 0..n_perm {
        shuffled.shuffle(&mut rng);
        // A permutation can have zero effective variance only if y was
        // constant, which r_obs already ruled out.
        let r = pearson_r(x, &shuffled)?;
        if r.abs() >= threshold {
            at_least += 1;
        }
    }
    let p = (at_least + 1) as f64 / (n_perm + 1) as f64;
    Ok((r_obs, p))
}
