//! Statistics primitives shared by every analysis.
//!
//! All accumulation is in `f64` with two-pass (centered) sums. Confidence
//! intervals are normal-theory: Fisher-z for correlations, Wilson score for
//! proportions, and the large-sample variance approximation for Cohen's d.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Pearson correlation with an optional 95% Fisher-z interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub n: usize,
    /// Present only when `n >= 4`.
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    pub ci_half: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Five-number summary plus mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

// ---------------------------------------------------------------------------
// Normal distribution helpers
// ---------------------------------------------------------------------------

const SQRT_2: f64 = std::f64::consts::SQRT_2;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / SQRT_2)
}

/// Standard normal density.
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile.
pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Two-sided critical value for a confidence level, e.g. 1.95996 at 0.95.
pub fn z_critical(level: f64) -> f64 {
    norm_quantile(1.0 - (1.0 - level) / 2.0)
}

/// `ln Φ(z)` and its derivative `φ(z)/Φ(z)`, stable far into the lower tail.
pub fn log_norm_cdf_and_mills(z: f64) -> (f64, f64) {
    if z > -20.0 {
        let cdf = norm_cdf(z);
        (cdf.ln(), norm_pdf(z) / cdf)
    } else {
        // asymptotic series: Φ(z) ≈ φ(z)/(-z) · (1 - 1/z² + 3/z⁴ - 15/z⁶)
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        let log_pdf = -0.5 * z2 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_cdf = log_pdf - (-z).ln() + series.ln();
        (log_cdf, -z / series)
    }
}

// ---------------------------------------------------------------------------
// Descriptive statistics
// ---------------------------------------------------------------------------

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1).
pub fn stdev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Population standard deviation (n).
pub fn pop_stdev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Standard error of the mean, `stdev / sqrt(n)`.
pub fn sem(v: &[f64]) -> f64 {
    stdev(v) / (v.len() as f64).sqrt()
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn summarize(v: &[f64]) -> Result<Summary> {
    if v.is_empty() {
        return Err(Error::invalid("summary of empty vector"));
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    Ok(Summary {
        n: v.len(),
        mean: mean(v),
        sd: if v.len() > 1 { stdev(v) } else { 0.0 },
        min: s[0],
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
    })
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("correlation needs at least 2 points"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in correlation input"));
    }
    Ok(())
}

/// Fisher-z interval for a correlation; `None` when `n < 4`.
pub fn fisher_ci(r: f64, n: usize, level: f64) -> Option<(f64, f64)> {
    if n < 4 {
        return None;
    }
    let z = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15).atanh();
    let half = z_critical(level) / ((n - 3) as f64).sqrt();
    Some(((z - half).tanh(), (z + half).tanh()))
}

fn centered_ss(v: &[f64]) -> (f64, Vec<f64>) {
    let m = mean(v);
    let c: Vec<f64> = v.iter().map(|x| x - m).collect();
    (c.iter().map(|x| x * x).sum(), c)
}

fn is_degenerate(ss_centered: f64, v: &[f64]) -> bool {
    let scale: f64 = v.iter().map(|x| x * x).sum();
    ss_centered <= 1e-24 * scale || ss_centered == 0.0
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    let (sxx, cx) = centered_ss(x);
    let (syy, cy) = centered_ss(y);
    if is_degenerate(sxx, x) || is_degenerate(syy, y) {
        return Err(Error::UndefinedCorrelation);
    }
    let sxy: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(with_ci(r, x.len()))
}

fn with_ci(r: f64, n: usize) -> CorrelationResult {
    let ci = fisher_ci(r, n, 0.95);
    CorrelationResult {
        r,
        n,
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
    }
}

/// Least-squares residual of `v` on an intercept plus `controls`.
pub fn residualize(v: &[f64], controls: &[&[f64]]) -> Result<Vec<f64>> {
    let n = v.len();
    if controls.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("control length mismatch"));
    }
    let k = controls.len() + 1;
    if n <= k {
        return Err(Error::RankDeficient);
    }
    let design = DMatrix::from_fn(n, k, |i, j| if j == 0 { 1.0 } else { controls[j - 1][i] });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax == 0.0 || smin / smax < 1e-10 {
        return Err(Error::RankDeficient);
    }
    let target = DVector::from_column_slice(v);
    let beta = svd
        .solve(&target, 0.0)
        .map_err(|e| Error::invalid(format!("least squares failed: {e}")))?;
    let fitted = design * beta;
    Ok(v.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect())
}

/// Correlation of `x` and `y` after regressing both on `controls`.
///
/// The Fisher-z interval uses `n - |controls|` as effective sample size.
pub fn partial_correlation(x: &[f64], y: &[f64], controls: &[&[f64]]) -> Result<CorrelationResult> {
    check_pair(x, y)?;
    if controls.is_empty() {
        return pearson(x, y);
    }
    let rx = residualize(x, controls)?;
    let ry = residualize(y, controls)?;
    let (tx, _) = centered_ss(x);
    let (ty, _) = centered_ss(y);
    let (sx, cx) = centered_ss(&rx);
    let (sy, cy) = centered_ss(&ry);
    if sx <= 1e-20 * tx || sy <= 1e-20 * ty || sx == 0.0 || sy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let sxy: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    let r = (sxy / (sx.sqrt() * sy.sqrt())).clamp(-1.0, 1.0);
    let n_eff = x.len().saturating_sub(controls.len());
    let ci = fisher_ci(r, n_eff, 0.95);
    Ok(CorrelationResult {
        r,
        n: x.len(),
        ci_low: ci.map(|c| c.0),
        ci_high: ci.map(|c| c.1),
    })
}

// ---------------------------------------------------------------------------
// Proportions and effect sizes
// ---------------------------------------------------------------------------

/// Wilson score interval.
pub fn wilson_ci(successes: usize, trials: usize, level: f64) -> Result<(f64, f64)> {
    if trials == 0 {
        return Err(Error::invalid("wilson interval with zero trials"));
    }
    if successes > trials {
        return Err(Error::invalid("successes exceed trials"));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = z_critical(level);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = if successes == 0 { 0.0 } else { (center - half).clamp(0.0, p) };
    let high = if successes == trials { 1.0 } else { (center + half).clamp(p, 1.0) };
    Ok((low, high))
}

/// Newcombe interval for a difference of two independent proportions,
/// built from the two Wilson intervals.
pub fn difference_ci(p1: f64, ci1: (f64, f64), p2: f64, ci2: (f64, f64)) -> (f64, f64) {
    let diff = p1 - p2;
    let lo = diff - ((p1 - ci1.0).powi(2) + (ci2.1 - p2).powi(2)).sqrt();
    let hi = diff + ((ci1.1 - p1).powi(2) + (p2 - ci2.0).powi(2)).sqrt();
    (lo.max(-1.0), hi.min(1.0))
}

/// Cohen's d with Bessel-corrected pooled standard deviation and a 95%
/// half-interval from the variance approximation
/// `(n1+n2)/(n1 n2) + d²/(2(n1+n2))`.
pub fn cohens_d(pos: &[f64], neg: &[f64]) -> Result<EffectSize> {
    if pos.len() < 2 || neg.len() < 2 {
        return Err(Error::invalid("cohen's d needs at least 2 samples per class"));
    }
    let (n1, n2) = (pos.len() as f64, neg.len() as f64);
    let (s1, s2) = (stdev(pos), stdev(neg));
    let pooled = (((n1 - 1.0) * s1 * s1 + (n2 - 1.0) * s2 * s2) / (n1 + n2 - 2.0)).sqrt();
    if pooled == 0.0 || !pooled.is_finite() {
        return Err(Error::Degenerate("pooled variance is zero".into()));
    }
    let d = (mean(pos) - mean(neg)) / pooled;
    let var = (n1 + n2) / (n1 * n2) + d * d / (2.0 * (n1 + n2));
    Ok(EffectSize {
        d,
        ci_half: z_critical(0.95) * var.sqrt(),
        n_pos: pos.len(),
        n_neg: neg.len(),
    })
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal principal axes, one per row, in decreasing variance order.
    pub components: Vec<Vec<f64>>,
    pub explained_fractions: Vec<f64>,
    /// Row `i` holds the coordinates of observation `i` on each component.
    pub scores: Vec<Vec<f64>>,
}

/// PCA of an `n × k` matrix given as rows.
pub fn pca(rows: &[Vec<f64>]) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::invalid("pca needs at least 2 rows"));
    }
    let k = rows[0].len();
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::invalid("pca rows must share a nonzero width"));
    }
    let means: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, k, |i, j| rows[i][j] - means[j]);
    let total: f64 = centered.iter().map(|x| x * x).sum();
    let scale: f64 = rows.iter().flatten().map(|x| x * x).sum();
    if total <= 1e-24 * scale || total == 0.0 {
        return Err(Error::Degenerate("constant matrix".into()));
    }
    let svd = centered.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut components = Vec::with_capacity(order.len());
    let mut explained = Vec::with_capacity(order.len());
    let mut score_cols: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for &c in &order {
        let s = svd.singular_values[c];
        let mut axis: Vec<f64> = vt.row(c).iter().copied().collect();
        let mut col: Vec<f64> = u.column(c).iter().map(|x| x * s).collect();
        // deterministic sign: largest-magnitude loading positive
        let pivot = axis.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(1.0);
        if pivot < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
            col.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(axis);
        explained.push(s * s / total);
        score_cols.push(col);
    }
    let scores = (0..n).map(|i| score_cols.iter().map(|c| c[i]).collect()).collect();
    Ok(Pca {
        mean: means,
        components,
        explained_fractions: explained,
        scores,
    })
}

// ---------------------------------------------------------------------------
// Group z-scoring
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupZScores {
    pub values: Vec<f64>,
    /// Groups with fewer than two members or zero variance; their outputs are 0.
    pub degenerate_groups: Vec<String>,
    /// Always "population": the divisor is the group size.
    pub stdev_kind: &'static str,
}

pub fn zscore_within_group<S: AsRef<str>>(values: &[f64], labels: &[S]) -> Result<GroupZScores> {
    if values.len() != labels.len() {
        return Err(Error::invalid("values and labels differ in length"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.as_ref()).or_default().push(i);
    }
    let mut out = vec![0.0; values.len()];
    let mut degenerate = Vec::new();
    for (label, idx) in groups {
        let vals: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let m = mean(&vals);
        let sd = pop_stdev(&vals);
        if idx.len() < 2 || sd <= 1e-12 * m.abs().max(1.0) {
            degenerate.push(label.to_string());
            continue;
        }
        for (&i, v) in idx.iter().zip(&vals) {
            out[i] = (v - m) / sd;
        }
    }
    Ok(GroupZScores {
        values: out,
        degenerate_groups: degenerate,
        stdev_kind: "population",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal as RNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn pearson_perfect_and_inverse() {
        assert!(close(pearson(&[1., 2., 3.], &[1., 2., 3.]).unwrap().r, 1.0, 1e-15));
        assert!(close(pearson(&[1., 2., 3.], &[-1., -2., -3.]).unwrap().r, -1.0, 1e-15));
        assert!(pearson(&[1., 2., 3.], &[1., 2., 3.]).unwrap().ci_low.is_none());
    }

    #[test]
    fn pearson_zero_variance_is_error() {
        assert!(matches!(pearson(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::UndefinedCorrelation)));
    }

    #[test]
    fn fisher_interval_matches_closed_form() {
        // tanh(atanh(0.5) ± 1.959964/sqrt(47))
        let (lo, hi) = fisher_ci(0.5, 50, 0.95).unwrap();
        let z = 0.5f64.atanh();
        let h = 1.959_963_984_540_054 / 47f64.sqrt();
        assert!(close(lo, (z - h).tanh(), 1e-12));
        assert!(close(hi, (z + h).tanh(), 1e-12));
        assert!(close(hi, 0.683, 1e-3));
    }

    #[test]
    fn wilson_boundaries_and_midpoint() {
        let (lo, _) = wilson_ci(0, 10, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        let (_, hi) = wilson_ci(100, 100, 0.95).unwrap();
        assert_eq!(hi, 1.0);
        let (lo, hi) = wilson_ci(50, 100, 0.95).unwrap();
        assert!(close(lo, 0.4038, 1e-3) && close(hi, 0.5962, 1e-3));
        assert!(wilson_ci(0, 0, 0.95).is_err());
    }

    #[test]
    fn cohens_d_basic_properties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 3.0, 1.0, 4.0];
        assert!(cohens_d(&a, &b).unwrap().d.abs() < 1e-12);
        let x = [1.0, 2.5, 3.0, 5.0];
        let e1 = cohens_d(&x, &b).unwrap();
        let e2 = cohens_d(&b, &x).unwrap();
        assert!(close(e1.d, -e2.d, 1e-15));
        assert!(close(e1.ci_half, e2.ci_half, 1e-15));
        assert!(cohens_d(&[1.0, 1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cohens_d_monte_carlo() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n1 = RNormal::new(1.0, 1.0).unwrap();
        let n0 = RNormal::new(0.0, 1.0).unwrap();
        let pos: Vec<f64> = (0..500).map(|_| n1.sample(&mut rng)).collect();
        let neg: Vec<f64> = (0..500).map(|_| n0.sample(&mut rng)).collect();
        let e = cohens_d(&pos, &neg).unwrap();
        assert!(close(e.d, 1.0, 0.15), "d = {}", e.d);
    }

    #[test]
    fn partial_correlation_matches_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = RNormal::new(0.0, 1.0).unwrap();
        let n = 400;
        let z: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let x: Vec<f64> = z.iter().map(|z| 0.6 * z + g.sample(&mut rng)).collect();
        let y: Vec<f64> = z.iter().zip(&x).map(|(z, x)| -0.4 * z + 0.3 * x + g.sample(&mut rng)).collect();
        let rxy = pearson(&x, &y).unwrap().r;
        let rxz = pearson(&x, &z).unwrap().r;
        let ryz = pearson(&y, &z).unwrap().r;
        let expected = (rxy - rxz * ryz) / ((1.0 - rxz * rxz) * (1.0 - ryz * ryz)).sqrt();
        let got = partial_correlation(&x, &y, &[&z]).unwrap().r;
        assert!(close(got, expected, 1e-10));
        assert_eq!(partial_correlation(&x, &y, &[]).unwrap().r, rxy);
    }

    #[test]
    fn partial_correlation_degenerate_cases() {
        let z: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let x: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let y: Vec<f64> = z.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!(matches!(partial_correlation(&x, &y, &[&z]), Err(Error::UndefinedCorrelation)));
        let z2: Vec<f64> = z.iter().map(|v| 3.0 * v).collect();
        assert!(matches!(partial_correlation(&x, &y, &[&z, &z2]), Err(Error::RankDeficient)));
    }

    #[test]
    fn partial_with_orthogonal_control_equals_pearson() {
        // controls orthogonal to both centered x and y by construction
        let x = [1.0, -1.0, 1.0, -1.0, 2.0, -2.0, 0.0, 0.0];
        let y = [1.0, -1.0, 0.5, -0.5, 1.0, -1.0, 0.3, -0.3];
        let c = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
        let r = pearson(&x, &y).unwrap().r;
        let p = partial_correlation(&x, &y, &[&c]).unwrap().r;
        assert!(close(r, p, 1e-9));
    }

    #[test]
    fn pca_rank_one_and_reconstruction() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca(&rows).unwrap();
        assert!(close(p.explained_fractions[0], 1.0, 1e-12));

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let g = RNormal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..10).map(|_| (0..4).map(|_| g.sample(&mut rng)).collect()).collect();
        let p = pca(&rows).unwrap();
        let sum: f64 = p.explained_fractions.iter().sum();
        assert!(close(sum, 1.0, 1e-9));
        assert!(p.explained_fractions.windows(2).all(|w| w[0] >= w[1]));
        for (i, row) in rows.iter().enumerate() {
            for j in 0..4 {
                let rec: f64 = p.mean[j] + (0..4).map(|c| p.scores[i][c] * p.components[c][j]).sum::<f64>();
                assert!((rec - row[j]).abs() < 1e-9);
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                let dot: f64 = (0..4).map(|j| p.components[a][j] * p.components[b][j]).sum();
                assert!(close(dot, if a == b { 1.0 } else { 0.0 }, 1e-10));
            }
        }
        assert!(pca(&[vec![1.0, 2.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn pca_isotropic_sample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let g = RNormal::new(0.0, 1.0).unwrap();
        let rows: Vec<Vec<f64>> = (0..10_000).map(|_| vec![g.sample(&mut rng), g.sample(&mut rng)]).collect();
        let p = pca(&rows).unwrap();
        assert!(close(p.explained_fractions[0], 0.5, 0.02));
        assert!(close(p.explained_fractions[1], 0.5, 0.02));
    }

    #[test]
    fn zscore_single_group_and_degenerate() {
        let z = zscore_within_group(&[1.0, 2.0, 3.0], &["a", "a", "a"]).unwrap();
        assert!(close(z.values[0], -1.2247, 1e-4));
        assert!(close(z.values[1], 0.0, 1e-12));
        assert!(close(z.values[2], 1.2247, 1e-4));
        let z = zscore_within_group(&[2.0, 2.0, 5.0, 5.0], &["a", "a", "b", "b"]).unwrap();
        assert_eq!(z.values, vec![0.0; 4]);
        assert_eq!(z.degenerate_groups, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn sem_matches_two_pass() {
        let v = [1.5, 2.0, -0.5, 4.0, 3.25];
        let m = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        assert!(close(sem(&v), var.sqrt() / 5f64.sqrt(), 1e-12));
    }

    #[test]
    fn log_norm_cdf_tail_is_continuous() {
        let (a, ma) = log_norm_cdf_and_mills(-19.999_999);
        let (b, mb) = log_norm_cdf_and_mills(-20.000_001);
        assert!(close(a, b, 1e-4));
        assert!(close(ma, mb, 1e-4));
        assert!(log_norm_cdf_and_mills(-200.0).0.is_finite());
    }

    proptest! {
        #[test]
        fn pearson_affine_invariance(
            xs in proptest::collection::vec(-100.0f64..100.0, 3..40),
            a in 0.1f64..10.0,
            b in -50.0f64..50.0,
        ) {
            prop_assume!(stdev(&xs) > 1e-3);
            let y: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let yn: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
            prop_assert!((pearson(&xs, &y).unwrap().r - 1.0).abs() < 1e-12);
            prop_assert!((pearson(&xs, &yn).unwrap().r + 1.0).abs() < 1e-12);
        }

        #[test]
        fn wilson_width_shrinks_with_trials(k in 1usize..50, m in 1usize..20) {
            // proportion k/(2k) = 0.5 held fixed, trials scaled by m
            let (l1, h1) = wilson_ci(k, 2 * k, 0.95).unwrap();
            let (l2, h2) = wilson_ci(k * (m + 1), 2 * k * (m + 1), 0.95).unwrap();
            prop_assert!(h2 - l2 <= h1 - l1 + 1e-12);
        }

        #[test]
        fn wilson_contains_proportion(t in 1usize..500, frac in 0.0f64..=1.0) {
            let s = ((t as f64) * frac).round() as usize;
            let (lo, hi) = wilson_ci(s, t, 0.95).unwrap();
            let p = s as f64 / t as f64;
            prop_assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
        }

        #[test]
        fn pca_row_permutation_invariant(seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = RNormal::new(0.0, 1.0).unwrap();
            let rows: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| g.sample(&mut rng)).collect()).collect();
            let mut rev = rows.clone();
            rev.reverse();
            let a = pca(&rows).unwrap();
            let b = pca(&rev).unwrap();
            for (x, y) in a.explained_fractions.iter().zip(&b.explained_fractions) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn zscore_equivariant_under_permutation(seed in 0u64..500) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = RNormal::new(0.0, 1.0).unwrap();
            let vals: Vec<f64> = (0..10).map(|_| g.sample(&mut rng)).collect();
            let labels: Vec<&str> = (0..10).map(|i| if i % 3 == 0 { "x" } else { "y" }).collect();
            let base = zscore_within_group(&vals, &labels).unwrap();
            let perm: Vec<usize> = (0..10).rev().collect();
            let pv: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let pl: Vec<&str> = perm.iter().map(|&i| labels[i]).collect();
            let z = zscore_within_group(&pv, &pl).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((z.values[k] - base.values[i]).abs() < 1e-12);
            }
        }
    }
}
