//! Ridge probes from activations to utilities, and the evaluations built on
//! them: held-out metrics, leave-one-topic-out, direction geometry,
//! cross-layer transfer and iterated nullspace projection.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activationstore::{ActivationMatrix, Position};
use crate::corpus::{Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::statlab::{pearson, wilson_ci, CorrelationResult};

pub const MIN_TOPIC_SIZE: usize = 10;
const EXACT_PAIR_LIMIT: usize = 2000;
const SAMPLED_PAIRS: usize = 1_000_000;

/// Nine points log-spaced over `[1e-2, 1e6]`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powi(i - 2)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub alpha_grid: Vec<f64>,
    /// Scale features to unit variance before fitting.
    pub standardize: bool,
    /// Fraction held out for alpha selection when a fold has to build its
    /// own validation set.
    pub internal_validation: f64,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            alpha_grid: default_alpha_grid(),
            standardize: false,
            internal_validation: 0.2,
            seed: 0,
        }
    }
}

impl ProbeOptions {
    fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::Config("alpha grid is empty".into()));
        }
        if self.alpha_grid.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::Config("alpha grid entries must be finite and > 0".into()));
        }
        if !(self.internal_validation > 0.0 && self.internal_validation < 1.0) {
            return Err(Error::Config("internal_validation must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub pearson: CorrelationResult,
    pub pairwise_accuracy: f64,
    pub accuracy_ci: (f64, f64),
    pub n_pairs: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub stdev: f64,
}

/// A linear probe `y ≈ w·x + b`. When trained with standardisation the
/// scaling is folded into `weights`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub alpha: f64,
    pub layer: usize,
    pub position: Position,
    pub train_persona: String,
    pub centering: Vec<f64>,
    pub target_stats: TargetStats,
    pub metrics: Option<ProbeMetrics>,
}

impl Probe {
    pub fn d(&self) -> usize {
        self.weights.len()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn predict(&self, x: &ActivationMatrix) -> Result<Vec<f64>> {
        if x.d() != self.d() {
            return Err(Error::invalid(format!("probe has d = {}, matrix d = {}", self.d(), x.d())));
        }
        Ok((0..x.n()).map(|i| self.predict_row(&x.row_f64(i))).collect())
    }

    /// Unit-norm probe direction.
    pub fn direction(&self) -> Result<Vec<f64>> {
        unit(&self.weights)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("probe serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Degenerate("zero-weight direction".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Ridge core
// ---------------------------------------------------------------------------

/// Eigendecomposition of the centred Gram matrix of a row subset, reusable
/// across the whole alpha grid.
struct RidgePath {
    mean_x: Vec<f64>,
    scale: Vec<f64>,
    mean_y: f64,
    sd_y: f64,
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    /// `Vᵀ Xᵀ y` in the eigenbasis.
    projected: DVector<f64>,
}

impl RidgePath {
    fn new(rows: &[Vec<f64>], y: &[f64], idx: &[usize], standardize: bool) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("feature dimension is 0"));
        }
        if idx.is_empty() {
            return Err(Error::invalid("no training rows"));
        }
        let n = idx.len() as f64;
        let mut mean_x = vec![0.0; d];
        for &i in idx {
            for (m, v) in mean_x.iter_mut().zip(&rows[i]) {
                *m += v;
            }
        }
        mean_x.iter_mut().for_each(|m| *m /= n);
        let mean_y = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
        let sd_y = (idx.iter().map(|&i| (y[i] - mean_y).powi(2)).sum::<f64>() / n).sqrt();

        let mut xc = DMatrix::<f64>::zeros(idx.len(), d);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..d {
                xc[(r, j)] = rows[i][j] - mean_x[j];
            }
        }
        let mut scale = vec![1.0; d];
        if standardize {
            for j in 0..d {
                let sd = (xc.column(j).iter().map(|v| v * v).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    scale[j] = sd;
                    xc.column_mut(j).iter_mut().for_each(|v| *v /= sd);
                }
            }
        }
        let yc = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i] - mean_y));
        let gram = xc.transpose() * &xc;
        let eig = SymmetricEigen::new(gram);
        let xty = xc.transpose() * yc;
        let projected = eig.eigenvectors.transpose() * xty;
        Ok(RidgePath {
            mean_x,
            scale,
            mean_y,
            sd_y,
            eigvecs: eig.eigenvectors,
            eigvals: eig.eigenvalues,
            projected,
        })
    }

    /// Raw-feature weights and bias at one alpha.
    fn solve(&self, alpha: f64) -> (Vec<f64>, f64) {
        let coef = DVector::from_iterator(
            self.projected.len(),
            self.projected.iter().zip(self.eigvals.iter()).map(|(p, l)| p / (l.max(0.0) + alpha)),
        );
        let w_scaled = &self.eigvecs * coef;
        let w: Vec<f64> = w_scaled.iter().zip(&self.scale).map(|(w, s)| w / s).collect();
        let b = self.mean_y - dot(&w, &self.mean_x);
        (w, b)
    }
}

struct RidgeFit {
    weights: Vec<f64>,
    bias: f64,
    alpha: f64,
    centering: Vec<f64>,
    target: TargetStats,
}

/// Fit on `train`, choose alpha by Pearson r on `val` (ties to larger alpha).
fn fit_select(rows: &[Vec<f64>], y: &[f64], train: &[usize], val: &[usize], opts: &ProbeOptions) -> Result<RidgeFit> {
    opts.validate()?;
    if val.is_empty() {
        return Err(Error::invalid("validation fold is empty"));
    }
    let path = RidgePath::new(rows, y, train, opts.standardize)?;
    let mut grid = opts.alpha_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite alphas"));
    let yv: Vec<f64> = val.iter().map(|&i| y[i]).collect();
    let mut best: Option<(f64, f64, Vec<f64>, f64)> = None;
    for &alpha in &grid {
        let (w, b) = path.solve(alpha);
        let pred: Vec<f64> = val.iter().map(|&i| dot(&w, &rows[i]) + b).collect();
        let r = pearson(&pred, &yv).map(|c| c.r).unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some((br, ..)) => r >= *br - 1e-12,
        };
        if better {
            best = Some((r, alpha, w, b));
        }
    }
    let (_, alpha, weights, bias) = best.expect("non-empty grid");
    Ok(RidgeFit {
        weights,
        bias,
        alpha,
        centering: path.mean_x,
        target: TargetStats {
            mean: path.mean_y,
            stdev: path.sd_y,
        },
    })
}

/// Deterministic shuffle-based holdout of `frac` of the indices.
fn internal_split(idx: &[usize], frac: f64, seed: u64, label: &str) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = idx.to_vec();
    shuffled.shuffle(&mut rng_for(seed, &["internal_validation", label]));
    let n_val = ((idx.len() as f64 * frac).round() as usize).clamp(1, idx.len().saturating_sub(1).max(1));
    let mut val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Random train/validation/test assignment over `ids`, for callers without
/// a stratified split at hand.
pub fn holdout_split(ids: &[String], validation: f64, test: f64, seed: u64) -> Result<SplitAssignment> {
    if validation <= 0.0 || test < 0.0 || validation + test >= 1.0 {
        return Err(Error::invalid("fractions must satisfy 0 < validation, 0 <= test, sum < 1"));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut rng_for(seed, &["holdout_split"]));
    let n_val = (ids.len() as f64 * validation).round() as usize;
    let n_test = (ids.len() as f64 * test).round() as usize;
    let mut map = BTreeMap::new();
    for (k, &i) in order.iter().enumerate() {
        let s = if k < n_val {
            Split::Validation
        } else if k < n_val + n_test {
            Split::Test
        } else {
            Split::Train
        };
        map.insert(ids[i].clone(), s);
    }
    Ok(SplitAssignment::from_map(map, seed))
}

fn split_indices(ids: &[String], split: &SplitAssignment, which: Split) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, id)| split.get(id) == Some(which))
        .map(|(i, _)| i)
        .collect()
}

fn check_targets(x: &ActivationMatrix, y: &[f64]) -> Result<()> {
    if x.n() != y.len() {
        return Err(Error::invalid(format!("{} rows but {} targets", x.n(), y.len())));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i, col: 0 });
    }
    Ok(())
}

/// Train a ridge probe on the `Train` rows of `x`, selecting alpha on the
/// `Validation` rows. `Test` and unassigned rows are not touched.
pub fn train_ridge(x: &ActivationMatrix, y: &[f64], split: &SplitAssignment, opts: &ProbeOptions) -> Result<Probe> {
    check_targets(x, y)?;
    if x.d() == 0 {
        return Err(Error::invalid("feature dimension is 0"));
    }
    let train = split_indices(x.task_ids(), split, Split::Train);
    let val = split_indices(x.task_ids(), split, Split::Validation);
    let fit = fit_select(&x.rows_f64(), y, &train, &val, opts)?;
    Ok(Probe {
        weights: fit.weights,
        bias: fit.bias,
        alpha: fit.alpha,
        layer: x.layer(),
        position: x.position(),
        train_persona: x.persona().to_string(),
        centering: fit.centering,
        target_stats: fit.target,
        metrics: None,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Concordant pairs over pairs with `|y_i − y_j| >= 1e-12`. Exhaustive up
/// to 2,000 items, otherwise 10⁶ pairs sampled with `seed`.
pub fn pairwise_accuracy(pred: &[f64], y: &[f64], seed: u64) -> Result<(usize, usize)> {
    let n = y.len();
    if pred.len() != n {
        return Err(Error::invalid("prediction and target lengths differ"));
    }
    if n < 2 {
        return Err(Error::invalid("pairwise accuracy needs n >= 2"));
    }
    let judge = |i: usize, j: usize| -> Option<bool> {
        let dy = y[i] - y[j];
        if dy.abs() < 1e-12 {
            None
        } else {
            Some(sign(pred[i] - pred[j]) == sign(dy))
        }
    };
    let (mut good, mut total) = (0usize, 0usize);
    let mut tally = |v: Option<bool>| {
        if let Some(ok) = v {
            total += 1;
            good += ok as usize;
        }
    };
    if n <= EXACT_PAIR_LIMIT {
        for i in 0..n {
            for j in i + 1..n {
                tally(judge(i, j));
            }
        }
    } else {
        let mut rng = rng_for(seed, &["pairwise_accuracy"]);
        for _ in 0..SAMPLED_PAIRS {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            tally(judge(i, j));
        }
    }
    Ok((good, total))
}

/// Metrics of predictions against targets.
pub fn metrics_from_predictions(pred: &[f64], y: &[f64], seed: u64) -> Result<ProbeMetrics> {
    let (good, total) = pairwise_accuracy(pred, y, seed)?;
    let p = pearson(pred, y)?;
    let (acc, ci) = if total == 0 {
        (f64::NAN, (0.0, 1.0))
    } else {
        (good as f64 / total as f64, wilson_ci(good, total, 0.95)?)
    };
    Ok(ProbeMetrics {
        pearson: p,
        pairwise_accuracy: acc,
        accuracy_ci: ci,
        n_pairs: total,
        n: y.len(),
    })
}

pub fn evaluate(probe: &Probe, x: &ActivationMatrix, y: &[f64], seed: u64) -> Result<ProbeMetrics> {
    check_targets(x, y)?;
    metrics_from_predictions(&probe.predict(x)?, y, seed)
}

/// Metrics on the rows of `x` assigned to `which`.
pub fn evaluate_split(probe: &Probe, x: &ActivationMatrix, y: &[f64], split: &SplitAssignment, which: Split, seed: u64) -> Result<ProbeMetrics> {
    check_targets(x, y)?;
    let idx = split_indices(x.task_ids(), split, which);
    let ids: Vec<String> = idx.iter().map(|&i| x.task_ids()[i].clone()).collect();
    let sub = x.align(&ids)?;
    let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    evaluate(probe, &sub, &ys, seed)
}

// ---------------------------------------------------------------------------
// Leave-one-topic-out
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicFold {
    pub topic: String,
    pub n: usize,
    pub alpha: f64,
    /// `None` when predictions or targets are constant within the topic.
    pub metrics: Option<ProbeMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub folds: Vec<TopicFold>,
    pub pooled: ProbeMetrics,
    pub skipped: Vec<String>,
}

/// Per held-out topic, predictions for that topic's rows (in row order).
fn loo_predictions(
    rows: &[Vec<f64>],
    y: &[f64],
    topics: &[String],
    opts: &ProbeOptions,
) -> Result<(Vec<(String, Vec<usize>, Vec<f64>, f64)>, Vec<String>)> {
    if topics.len() != rows.len() || y.len() != rows.len() {
        return Err(Error::invalid("topics, targets and rows differ in length"));
    }
    let mut by_topic: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in topics.iter().enumerate() {
        by_topic.entry(t.as_str()).or_default().push(i);
    }
    if by_topic.len() < 2 {
        return Err(Error::invalid("leave-one-topic-out needs at least 2 topics"));
    }
    let mut skipped = Vec::new();
    let mut eligible = Vec::new();
    for (t, idx) in &by_topic {
        if idx.len() < MIN_TOPIC_SIZE {
            log::warn!("topic {t} has {} tasks (< {MIN_TOPIC_SIZE}); skipped", idx.len());
            skipped.push(t.to_string());
        } else {
            eligible.push((*t, idx.clone()));
        }
    }
    let folds: Vec<Result<(String, Vec<usize>, Vec<f64>, f64)>> = eligible
        .par_iter()
        .map(|(t, held)| {
            let rest: Vec<usize> = (0..rows.len()).filter(|i| topics[*i] != *t).collect();
            let (train, val) = internal_split(&rest, opts.internal_validation, opts.seed, t);
            let fit = fit_select(rows, y, &train, &val, opts)?;
            let pred = held.iter().map(|&i| dot(&fit.weights, &rows[i]) + fit.bias).collect();
            Ok((t.to_string(), held.clone(), pred, fit.alpha))
        })
        .collect();
    Ok((folds.into_iter().collect::<Result<Vec<_>>>()?, skipped))
}

pub fn loo_topic_eval(x: &ActivationMatrix, y: &[f64], topics: &[String], opts: &ProbeOptions) -> Result<LooReport> {
    check_targets(x, y)?;
    opts.validate()?;
    let rows = x.rows_f64();
    let (folds, skipped) = loo_predictions(&rows, y, topics, opts)?;
    let mut pooled_pred = Vec::new();
    let mut pooled_y = Vec::new();
    let mut out = Vec::new();
    for (topic, idx, pred, alpha) in folds {
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        out.push(TopicFold {
            topic,
            n: idx.len(),
            alpha,
            metrics: metrics_from_predictions(&pred, &ys, opts.seed).ok(),
        });
        pooled_pred.extend(pred);
        pooled_y.extend(ys);
    }
    if out.is_empty() {
        return Err(Error::invalid("no topic has enough tasks for a fold"));
    }
    Ok(LooReport {
        folds: out,
        pooled: metrics_from_predictions(&pooled_pred, &pooled_y, opts.seed)?,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

pub fn cosine_matrix(probes: &[Probe]) -> Result<Vec<Vec<f64>>> {
    let dirs: Vec<Vec<f64>> = probes.iter().map(|p| p.direction()).collect::<Result<_>>()?;
    if let Some(first) = dirs.first() {
        if dirs.iter().any(|d| d.len() != first.len()) {
            return Err(Error::invalid("probes differ in dimension"));
        }
    }
    let k = dirs.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in i + 1..k {
            let c = dot(&dirs[i], &dirs[j]).clamp(-1.0, 1.0);
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

/// Cell `(p, s)`: Pearson r of probe `p` applied to `xs[s]`.
pub fn cross_layer_transfer(probes: &[Probe], xs: &[ActivationMatrix], y: &[f64]) -> Result<Vec<Vec<f64>>> {
    if let Some(first) = xs.first() {
        for x in xs {
            if x.task_ids() != first.task_ids() {
                return Err(Error::invalid("matrices are not aligned on task ids"));
            }
        }
        check_targets(first, y)?;
    }
    probes
        .iter()
        .map(|p| xs.iter().map(|x| Ok(pearson(&p.predict(x)?, y)?.r)).collect::<Result<Vec<f64>>>())
        .collect()
}

// ---------------------------------------------------------------------------
// Iterated nullspace projection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpStep {
    pub direction: Vec<f64>,
    pub alpha: f64,
    /// Held-out (`Test` rows) r; `None` once predictions are constant.
    pub id_r: Option<f64>,
    /// Pooled leave-one-topic-out r.
    pub loo_r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InlpTrajectory {
    pub steps: Vec<InlpStep>,
}

impl InlpTrajectory {
    pub fn max_abs_cosine(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.steps.len() {
            for j in i + 1..self.steps.len() {
                worst = worst.max(dot(&self.steps[i].direction, &self.steps[j].direction).abs());
            }
        }
        worst
    }
}

/// Residual after projecting each unit direction out of every row.
pub fn project_out_rows(rows: &mut [Vec<f64>], unit_dir: &[f64]) {
    for r in rows.iter_mut() {
        let c = dot(r, unit_dir);
        r.iter_mut().zip(unit_dir).for_each(|(v, u)| *v -= c * u);
    }
}

/// Step `t` trains on the residual with directions `0..t` projected out,
/// records held-out and LOO r, then removes its own direction.
pub fn inlp_iterate(
    x: &ActivationMatrix,
    y: &[f64],
    iterations: usize,
    split: &SplitAssignment,
    topics: Option<&[String]>,
    opts: &ProbeOptions,
) -> Result<InlpTrajectory> {
    check_targets(x, y)?;
    opts.validate()?;
    if iterations == 0 || iterations > x.d() {
        return Err(Error::invalid(format!("iterations must lie in [1, {}]", x.d())));
    }
    let train = split_indices(x.task_ids(), split, Split::Train);
    let val = split_indices(x.task_ids(), split, Split::Validation);
    let test = split_indices(x.task_ids(), split, Split::Test);
    let mut rows = x.rows_f64();
    let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut steps: Vec<InlpStep> = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        if rows.iter().flatten().all(|v| v.abs() <= 1e-12 * scale) {
            return Err(Error::Degenerate("residual is all zero".into()));
        }
        let fit = fit_select(&rows, y, &train, &val, opts)?;
        let mut w = fit.weights.clone();
        for s in &steps {
            let c = dot(&w, &s.direction);
            w.iter_mut().zip(&s.direction).for_each(|(a, b)| *a -= c * b);
        }
        let dir = unit(&w)?;

        let id_r = if test.is_empty() {
            None
        } else {
            let pred: Vec<f64> = test.iter().map(|&i| dot(&fit.weights, &rows[i]) + fit.bias).collect();
            let yt: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            pearson(&pred, &yt).ok().map(|c| c.r)
        };
        let loo_r = match topics {
            None => None,
            Some(t) => {
                let (folds, _) = loo_predictions(&rows, y, t, opts)?;
                let mut p = Vec::new();
                let mut ys = Vec::new();
                for (_, idx, pred, _) in folds {
                    ys.extend(idx.iter().map(|&i| y[i]));
                    p.extend(pred);
                }
                pearson(&p, &ys).ok().map(|c| c.r)
            }
        };

        project_out_rows(&mut rows, &dir);
        let leak = rows.iter().map(|r| dot(r, &dir).abs()).fold(0.0, f64::max);
        debug_assert!(leak <= 1e-6 * scale, "projection left {leak}");
        steps.push(InlpStep {
            direction: dir,
            alpha: fit.alpha,
            id_r,
            loo_r,
        });
    }
    Ok(InlpTrajectory { steps })
}

// ---------------------------------------------------------------------------
// Position × layer sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub position: Position,
    pub layer: usize,
    pub alpha: Option<f64>,
    /// Held-out metrics on `Test` rows.
    pub metrics: Option<ProbeMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Index of the best cell: max held-out r, ties to the earlier layer.
    pub best: Option<usize>,
}

pub fn position_layer_sweep(grid: &[ActivationMatrix], y: &[f64], split: &SplitAssignment, opts: &ProbeOptions) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut keys = BTreeSet::new();
    for x in grid {
        if !keys.insert((x.position(), x.layer())) {
            return Err(Error::invalid(format!("duplicate sweep cell ({}, {})", x.position(), x.layer())));
        }
    }
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|x| {
            let run = || -> Result<(f64, ProbeMetrics)> {
                let probe = train_ridge(x, y, split, opts)?;
                let m = evaluate_split(&probe, x, y, split, Split::Test, opts.seed)?;
                Ok((probe.alpha, m))
            };
            match run() {
                Ok((alpha, m)) => SweepCell {
                    position: x.position(),
                    layer: x.layer(),
                    alpha: Some(alpha),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => SweepCell {
                    position: x.position(),
                    layer: x.layer(),
                    alpha: None,
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut best: Option<usize> = None;
    for (i, c) in cells.iter().enumerate() {
        let Some(m) = c.metrics else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let bm = cells[b].metrics.expect("best has metrics");
                let (r, br) = (m.pearson.r, bm.pearson.r);
                let earlier = (c.layer, c.position) < (cells[b].layer, cells[b].position);
                if r > br + 1e-12 || ((r - br).abs() <= 1e-12 && earlier) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    Ok(SweepTable { cells, best })
}

/// Targets aligned to the rows of `x` from an id → value map.
pub fn targets_for(x: &ActivationMatrix, values: &HashMap<String, f64>) -> Result<Vec<f64>> {
    let mut missing = Vec::new();
    let y = x
        .task_ids()
        .iter()
        .map(|id| match values.get(id) {
            Some(v) => *v,
            None => {
                missing.push(id.clone());
                f64::NAN
            }
        })
        .collect();
    if missing.is_empty() {
        Ok(y)
    } else {
        Err(Error::MissingIds(missing))
    }
}
