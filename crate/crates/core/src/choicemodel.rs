//! Thurstonian (probit) pairwise-choice model.
//!
//! Each task `i` has a latent utility `mu_i` and a noise scale `sigma_i`.
//! The probability that `a` is chosen over `b` is
//! `Φ((mu_a − mu_b) / sqrt(sigma_a² + sigma_b²))`. Fitting is penalised
//! maximum likelihood with L-BFGS on `(mu, log sigma)`.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Ordering, PairSchedule, TaskTable};
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::statlab::{log_norm_cdf_and_mills, norm_cdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    A,
    B,
    Refusal,
    Unparseable,
}

impl Outcome {
    pub fn is_usable(self) -> bool {
        matches!(self, Outcome::A | Outcome::B)
    }
}

/// One elicited pairwise outcome.
///
/// `task_a`/`task_b` are the schedule's task identities; `ordering` records
/// which was presented first. `Outcome::A` always means `task_a` was chosen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub pair_id: String,
    pub task_a: String,
    pub task_b: String,
    pub ordering: Ordering,
    pub persona: String,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub sigma_min: f64,
    /// Weight of the `Σ (log sigma)²` penalty.
    pub log_sigma_penalty: f64,
    /// Weight of the `Σ mu²` penalty; keeps separated tasks finite.
    pub mu_penalty: f64,
    pub max_iters: usize,
    /// Relative objective change over 5 iterations that counts as converged.
    pub tol: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            sigma_min: 1e-2,
            log_sigma_penalty: 1.0,
            mu_penalty: 1e-3,
            max_iters: 5000,
            tol: 1e-8,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config("sigma_min must be > 0".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("tol must be > 0".into()));
        }
        if self.log_sigma_penalty < 0.0 || self.mu_penalty < 0.0 {
            return Err(Error::Config("penalties must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUtility {
    pub id: String,
    pub mu: f64,
    pub sigma: f64,
    /// No usable record touched this task; `mu = 0`, `sigma = 1`.
    pub unconstrained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityFit {
    pub persona: String,
    pub tasks: Vec<TaskUtility>,
    /// Data negative log-likelihood at the optimum, before normalisation.
    pub nll: f64,
    pub n_effective: usize,
    pub normalized: bool,
    pub converged: bool,
    pub iterations: usize,
    pub config: FitConfig,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

/// Per-task values keyed by id, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilities {
    pub task_ids: Vec<String>,
    pub values: Vec<f64>,
}

impl Utilities {
    pub fn new(task_ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if task_ids.len() != values.len() {
            return Err(Error::invalid("utility ids and values differ in length"));
        }
        Ok(Utilities { task_ids, values })
    }

    /// Values in the order of `ids`.
    pub fn aligned(&self, ids: &[String]) -> Result<Vec<f64>> {
        let index: HashMap<&str, usize> = self.task_ids.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        let mut missing = Vec::new();
        let out: Vec<f64> = ids
            .iter()
            .map(|id| match index.get(id.as_str()) {
                Some(&i) => self.values[i],
                None => {
                    missing.push(id.clone());
                    f64::NAN
                }
            })
            .collect();
        if missing.is_empty() {
            Ok(out)
        } else {
            Err(Error::MissingIds(missing))
        }
    }
}

impl UtilityFit {
    fn index(&self, id: &str) -> Result<&TaskUtility> {
        self.tasks.iter().find(|t| t.id == id).ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn utilities(&self) -> Utilities {
        Utilities {
            task_ids: self.tasks.iter().map(|t| t.id.clone()).collect(),
            values: self.tasks.iter().map(|t| t.mu).collect(),
        }
    }

    pub fn sigmas(&self) -> Utilities {
        Utilities {
            task_ids: self.tasks.iter().map(|t| t.id.clone()).collect(),
            values: self.tasks.iter().map(|t| t.sigma).collect(),
        }
    }

    /// Fit with given parameters and no fitting metadata, e.g. as ground truth
    /// for [`simulate_choices`].
    pub fn from_parameters(persona: &str, ids: &[String], mu: &[f64], sigma: &[f64]) -> Result<Self> {
        if ids.len() != mu.len() || ids.len() != sigma.len() {
            return Err(Error::invalid("parameter lengths differ"));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("sigma must be > 0"));
        }
        Ok(UtilityFit {
            persona: persona.to_string(),
            tasks: ids
                .iter()
                .zip(mu)
                .zip(sigma)
                .map(|((id, &mu), &sigma)| TaskUtility {
                    id: id.clone(),
                    mu,
                    sigma,
                    unconstrained: false,
                })
                .collect(),
            nll: f64::NAN,
            n_effective: 0,
            normalized: false,
            converged: true,
            iterations: 0,
            config: FitConfig::default(),
            objective_trace: Vec::new(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

/// `count` observations of `winner` chosen over `loser`, by parameter index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub winner: usize,
    pub loser: usize,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllGradient {
    pub nll: f64,
    pub grad_mu: Vec<f64>,
    pub grad_log_sigma: Vec<f64>,
}

/// Data negative log-likelihood and its gradient.
pub fn nll_and_gradient(mu: &[f64], log_sigma: &[f64], comparisons: &[Comparison]) -> Result<NllGradient> {
    if comparisons.is_empty() {
        return Err(Error::NoUsableRecords);
    }
    if mu.len() != log_sigma.len() {
        return Err(Error::invalid("mu and log_sigma differ in length"));
    }
    let n = mu.len();
    if let Some(c) = comparisons.iter().find(|c| c.winner >= n || c.loser >= n || c.winner == c.loser) {
        return Err(Error::invalid(format!("bad comparison indices ({}, {})", c.winner, c.loser)));
    }
    let mut nll = 0.0;
    let mut gm = vec![0.0; n];
    let mut gs = vec![0.0; n];
    for c in comparisons {
        let (w, l) = (c.winner, c.loser);
        let (sw2, sl2) = ((2.0 * log_sigma[w]).exp(), (2.0 * log_sigma[l]).exp());
        let s2 = sw2 + sl2;
        let s = s2.sqrt();
        let z = (mu[w] - mu[l]) / s;
        let (log_cdf, mills) = log_norm_cdf_and_mills(z);
        nll -= c.count * log_cdf;
        let dz = -c.count * mills;
        gm[w] += dz / s;
        gm[l] -= dz / s;
        gs[w] += dz * (-z * sw2 / s2);
        gs[l] += dz * (-z * sl2 / s2);
    }
    Ok(NllGradient {
        nll,
        grad_mu: gm,
        grad_log_sigma: gs,
    })
}

/// Choice probability of `a` over `b` under a fit.
pub fn predict_choice_prob(fit: &UtilityFit, task_a: &str, task_b: &str) -> Result<f64> {
    let a = fit.index(task_a)?;
    let b = fit.index(task_b)?;
    Ok(norm_cdf((a.mu - b.mu) / (a.sigma * a.sigma + b.sigma * b.sigma).sqrt()))
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct Objective<'a> {
    comparisons: &'a [Comparison],
    n: usize,
    config: &'a FitConfig,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64]) -> (f64, f64, Vec<f64>) {
        let (mu, ls) = theta.split_at(self.n);
        let g = nll_and_gradient(mu, ls, self.comparisons).expect("validated comparisons");
        let mut f = g.nll;
        let mut grad = Vec::with_capacity(2 * self.n);
        for (i, gm) in g.grad_mu.iter().enumerate() {
            f += self.config.mu_penalty * mu[i] * mu[i];
            grad.push(gm + 2.0 * self.config.mu_penalty * mu[i]);
        }
        for (i, gs) in g.grad_log_sigma.iter().enumerate() {
            f += self.config.log_sigma_penalty * ls[i] * ls[i];
            grad.push(gs + 2.0 * self.config.log_sigma_penalty * ls[i]);
        }
        (f, g.nll, grad)
    }

    fn project(&self, theta: &mut [f64]) {
        let floor = self.config.sigma_min.ln();
        for v in &mut theta[self.n..] {
            if *v < floor {
                *v = floor;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Optimum {
    theta: Vec<f64>,
    nll: f64,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Projected L-BFGS with Armijo backtracking; every accepted step lowers
/// the objective, so the trace is monotone.
fn minimize(obj: &Objective<'_>, mut theta: Vec<f64>) -> Optimum {
    const MEMORY: usize = 10;
    obj.project(&mut theta);
    let (mut f, mut nll, mut g) = obj.eval(&theta);
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < obj.config.max_iters {
        iterations += 1;
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((rho, a));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
        }
        let gnorm = dot(&g, &g).sqrt();
        if gnorm < 1e-12 {
            converged = true;
            break;
        }
        let mut step = if s_hist.is_empty() { (1.0 / gnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let mut cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            obj.project(&mut cand);
            let (fc, nllc, gc) = obj.eval(&cand);
            let actual: Vec<f64> = cand.iter().zip(&theta).map(|(c, t)| c - t).collect();
            if fc.is_finite() && fc <= f + 1e-4 * dot(&g, &actual) && fc <= f {
                accepted = Some((cand, fc, nllc, gc, actual));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, fc, nllc, gc, s)) = accepted else {
            converged = true;
            break;
        };
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            s_hist.push(s);
            y_hist.push(y);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        theta = cand;
        f = fc;
        nll = nllc;
        g = gc;
        trace.push(f);
        if trace.len() > 5 {
            let old = trace[trace.len() - 6];
            if (old - f).abs() <= obj.config.tol * f.abs().max(1e-300) {
                converged = true;
                break;
            }
        }
    }
    Optimum {
        theta,
        nll,
        trace,
        iterations,
        converged,
    }
}

/// Build aggregated comparisons from records, skipping refusals and
/// unparseable outcomes. Returns (comparisons, usable record count).
pub fn aggregate_records(records: &[ChoiceRecord], index: &HashMap<&str, usize>) -> Result<(Vec<Comparison>, usize)> {
    let mut counts: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut usable = 0;
    for r in records {
        let a = *index.get(r.task_a.as_str()).ok_or_else(|| Error::UnknownTask(r.task_a.clone()))?;
        let b = *index.get(r.task_b.as_str()).ok_or_else(|| Error::UnknownTask(r.task_b.clone()))?;
        if a == b {
            return Err(Error::invalid(format!("self-pair in record {}", r.pair_id)));
        }
        let key = match r.outcome {
            Outcome::A => (a, b),
            Outcome::B => (b, a),
            _ => continue,
        };
        usable += 1;
        *counts.entry(key).or_insert(0.0) += 1.0;
    }
    let comps = counts
        .into_iter()
        .map(|((winner, loser), count)| Comparison { winner, loser, count })
        .collect();
    Ok((comps, usable))
}

/// Fit per-task utilities for the persona of `records`.
///
/// After fitting, `mu` is z-scored over constrained tasks (population
/// stdev) and `sigma` is divided by the same stdev. Tasks with no usable
/// record keep `mu = 0`, `sigma = 1` and are flagged.
pub fn fit_utilities(records: &[ChoiceRecord], tasks: &TaskTable, config: &FitConfig) -> Result<UtilityFit> {
    config.validate()?;
    let persona = match records.first() {
        Some(r) => r.persona.clone(),
        None => return Err(Error::NoUsableRecords),
    };
    if records.iter().any(|r| r.persona != persona) {
        return Err(Error::invalid("records mix personas; use fit_utilities_for"));
    }
    let ids = tasks.ids();
    let index: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let (comps, usable) = aggregate_records(records, &index)?;
    if usable == 0 {
        return Err(Error::NoUsableRecords);
    }

    // compact parameter space over constrained tasks
    let mut touched = vec![false; ids.len()];
    for c in &comps {
        touched[c.winner] = true;
        touched[c.loser] = true;
    }
    let mut compact = vec![usize::MAX; ids.len()];
    let mut n = 0;
    for (i, t) in touched.iter().enumerate() {
        if *t {
            compact[i] = n;
            n += 1;
        }
    }
    let local: Vec<Comparison> = comps
        .iter()
        .map(|c| Comparison {
            winner: compact[c.winner],
            loser: compact[c.loser],
            count: c.count,
        })
        .collect();

    let obj = Objective {
        comparisons: &local,
        n,
        config,
    };
    let opt = minimize(&obj, vec![0.0; 2 * n]);
    let (mu, ls) = opt.theta.split_at(n);

    let mean = mu.iter().sum::<f64>() / n as f64;
    let sd = (mu.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let normalized = sd > 0.0 && sd.is_finite();
    let scale = if normalized { sd } else { 1.0 };

    let mut out = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        if touched[i] {
            let k = compact[i];
            out.push(TaskUtility {
                id: id.clone(),
                mu: if normalized { (mu[k] - mean) / scale } else { mu[k] },
                sigma: (ls[k].exp() / scale).max(config.sigma_min),
                unconstrained: false,
            });
        } else {
            log::warn!("task {id} has no usable records; left unconstrained");
            out.push(TaskUtility {
                id: id.clone(),
                mu: 0.0,
                sigma: 1.0,
                unconstrained: true,
            });
        }
    }

    Ok(UtilityFit {
        persona,
        tasks: out,
        nll: opt.nll,
        n_effective: usable,
        normalized,
        converged: opt.converged,
        iterations: opt.iterations,
        config: *config,
        objective_trace: opt.trace,
    })
}

/// Fit using only the records of `persona`.
pub fn fit_utilities_for(records: &[ChoiceRecord], tasks: &TaskTable, config: &FitConfig, persona: &str) -> Result<UtilityFit> {
    let mine: Vec<ChoiceRecord> = records.iter().filter(|r| r.persona == persona).cloned().collect();
    fit_utilities(&mine, tasks, config)
}

/// Sample choices from a known fit. Each trial draws from a stream keyed by
/// `(seed, pair_id, ordering, trial)`.
pub fn simulate_choices(true_fit: &UtilityFit, schedule: &PairSchedule, refusal_rate: f64, seed: u64) -> Result<Vec<ChoiceRecord>> {
    if !(0.0..1.0).contains(&refusal_rate) {
        return Err(Error::invalid("refusal_rate must lie in [0, 1)"));
    }
    let mut out = Vec::new();
    for e in &schedule.entries {
        if e.task_a == e.task_b {
            return Err(Error::invalid(format!("self-pair {}", e.pair_id)));
        }
        let p = predict_choice_prob(true_fit, &e.task_a, &e.task_b)?;
        let ord = e.ordering.to_string();
        for trial in 0..e.n_trials {
            let mut rng = rng_for(seed, &["choice", &e.pair_id, &ord, &trial.to_string()]);
            let refuse: f64 = rng.random();
            let pick: f64 = rng.random();
            let outcome = if refuse < refusal_rate {
                Outcome::Refusal
            } else if pick < p {
                Outcome::A
            } else {
                Outcome::B
            };
            out.push(ChoiceRecord {
                pair_id: e.pair_id.clone(),
                task_a: e.task_a.clone(),
                task_b: e.task_b.clone(),
                ordering: e.ordering,
                persona: e.persona.clone(),
                outcome,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{pair_schedule, Task, ASSISTANT};
    use crate::statlab::{norm_cdf, pearson, wilson_ci};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("t{i}")).collect()
    }

    fn table(n: usize) -> TaskTable {
        TaskTable::new(ids(n).into_iter().map(|i| Task::new(i.clone(), i, "x")).collect()).unwrap()
    }

    fn random_comparisons(n: usize, m: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<Comparison>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let ls: Vec<f64> = (0..n).map(|_| 0.3 * g.sample(&mut rng)).collect();
        let comps = (0..m)
            .map(|_| {
                let w = rng.random_range(0..n);
                let mut l = rng.random_range(0..n);
                while l == w {
                    l = rng.random_range(0..n);
                }
                Comparison {
                    winner: w,
                    loser: l,
                    count: 1.0 + rng.random_range(0..3) as f64,
                }
            })
            .collect();
        (mu, ls, comps)
    }

    /// Central finite differences on the data NLL, independent of the
    /// analytic gradient path.
    pub(crate) fn max_fd_rel_error(n: usize, seed: u64) -> f64 {
        let (mu, ls, comps) = random_comparisons(n, 6 * n, seed);
        let g = nll_and_gradient(&mu, &ls, &comps).unwrap();
        let f = |mu: &[f64], ls: &[f64]| -> f64 {
            comps
                .iter()
                .map(|c| {
                    let s = ((2.0 * ls[c.winner]).exp() + (2.0 * ls[c.loser]).exp()).sqrt();
                    -c.count * norm_cdf((mu[c.winner] - mu[c.loser]) / s).ln()
                })
                .sum()
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut up = mu.clone();
            up[i] += h;
            let mut dn = mu.clone();
            dn[i] -= h;
            let fd = (f(&up, &ls) - f(&dn, &ls)) / (2.0 * h);
            worst = worst.max((fd - g.grad_mu[i]).abs() / fd.abs().max(g.grad_mu[i].abs()).max(1e-3));
            let mut up = ls.clone();
            up[i] += h;
            let mut dn = ls.clone();
            dn[i] -= h;
            let fd = (f(&mu, &up) - f(&mu, &dn)) / (2.0 * h);
            worst = worst.max((fd - g.grad_log_sigma[i]).abs() / fd.abs().max(g.grad_log_sigma[i].abs()).max(1e-3));
        }
        worst
    }

    #[test]
    fn single_record_at_equal_utilities() {
        let c = [Comparison {
            winner: 0,
            loser: 1,
            count: 1.0,
        }];
        let g = nll_and_gradient(&[0.0, 0.0], &[0.0, 0.0], &c).unwrap();
        assert!((g.nll + 0.5f64.ln()).abs() < 1e-15);
        assert!(nll_and_gradient(&[0.0, 0.0], &[0.0, 0.0], &[]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for n in [5, 10, 20, 100] {
            let e = max_fd_rel_error(n, n as u64);
            assert!(e < 1e-5, "n={n} rel err {e}");
        }
    }

    #[test]
    fn translation_invariance() {
        let (mu, ls, comps) = random_comparisons(10, 40, 1);
        let base = nll_and_gradient(&mu, &ls, &comps).unwrap().nll;
        let shifted: Vec<f64> = mu.iter().map(|m| m + 3.7).collect();
        let moved = nll_and_gradient(&shifted, &ls, &comps).unwrap().nll;
        assert!((base - moved).abs() < 1e-9);
    }

    fn record(a: &str, b: &str, outcome: Outcome) -> ChoiceRecord {
        ChoiceRecord {
            pair_id: "p".into(),
            task_a: a.into(),
            task_b: b.into(),
            ordering: Ordering::AB,
            persona: ASSISTANT.into(),
            outcome,
        }
    }

    #[test]
    fn dominant_task_gets_higher_utility() {
        let recs: Vec<ChoiceRecord> = (0..30).map(|_| record("t0", "t1", Outcome::A)).collect();
        let fit = fit_utilities(&recs, &table(2), &FitConfig::default()).unwrap();
        assert!(fit.tasks[0].mu > fit.tasks[1].mu);
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn all_refusals_is_an_error() {
        let recs: Vec<ChoiceRecord> = (0..5).map(|_| record("t0", "t1", Outcome::Refusal)).collect();
        assert!(matches!(
            fit_utilities(&recs, &table(2), &FitConfig::default()),
            Err(Error::NoUsableRecords)
        ));
        assert!(matches!(
            fit_utilities(&[], &table(2), &FitConfig::default()),
            Err(Error::NoUsableRecords)
        ));
    }

    #[test]
    fn untouched_task_is_flagged() {
        let mut recs: Vec<ChoiceRecord> = (0..10).map(|_| record("t0", "t1", Outcome::A)).collect();
        recs.extend((0..4).map(|_| record("t0", "t1", Outcome::B)));
        let fit = fit_utilities(&recs, &table(3), &FitConfig::default()).unwrap();
        assert!(fit.tasks[2].unconstrained);
        assert_eq!((fit.tasks[2].mu, fit.tasks[2].sigma), (0.0, 1.0));
        assert!(matches!(
            fit_utilities(&[record("t0", "zz", Outcome::A)], &table(3), &FitConfig::default()),
            Err(Error::UnknownTask(_))
        ));
    }

    fn truth(n: usize, sigma: f64, seed: u64) -> UtilityFit {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, 1.0).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        UtilityFit::from_parameters(ASSISTANT, &ids(n), &mu, &vec![sigma; n]).unwrap()
    }

    #[test]
    fn recovers_simulated_utilities() {
        let n = 300;
        let t = table(n);
        let tf = truth(n, 0.5, 42);
        let sched = pair_schedule(&t, 20, false, 5, 42).unwrap();
        let recs = simulate_choices(&tf, &sched, 0.0, 42).unwrap();
        let fit = fit_utilities(&recs, &t, &FitConfig::default()).unwrap();
        let r = pearson(&fit.utilities().values, &tf.utilities().values).unwrap().r;
        assert!(r >= 0.95, "r = {r}");
        let mu = fit.utilities().values;
        let m = mu.iter().sum::<f64>() / n as f64;
        let sd = (mu.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(fit.normalized && m.abs() < 1e-9 && (sd - 1.0).abs() < 1e-9);
        assert!(fit.tasks.iter().all(|t| t.sigma > 0.0));
        assert!(fit.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn predict_probabilities() {
        let f = UtilityFit::from_parameters("p", &ids(3), &[0.0, 0.0, 1.0], &[1.0, 1.0, 0.0f64.exp()]).unwrap();
        assert_eq!(predict_choice_prob(&f, "t0", "t1").unwrap(), 0.5);
        // margin equal to the combined scale
        let f = UtilityFit::from_parameters("p", &ids(2), &[0.5f64.sqrt() * 2.0, 0.0], &[1.0, 1.0]).unwrap();
        let p = predict_choice_prob(&f, "t0", "t1").unwrap();
        assert!((p - 0.841_344_746_068_542_9).abs() < 1e-9);
        assert!((p + predict_choice_prob(&f, "t1", "t0").unwrap() - 1.0).abs() < 1e-12);
        assert!(predict_choice_prob(&f, "t0", "nope").is_err());
    }

    #[test]
    fn simulated_rates_track_probability() {
        // one pair with p = 0.75
        let z = crate::statlab::norm_quantile(0.75);
        let f = UtilityFit::from_parameters("p", &ids(2), &[z * 2f64.sqrt(), 0.0], &[1.0, 1.0]).unwrap();
        let sched = PairSchedule {
            entries: vec![crate::corpus::PairEntry {
                pair_id: "p0".into(),
                task_a: "t0".into(),
                task_b: "t1".into(),
                ordering: Ordering::AB,
                persona: "p".into(),
                n_trials: 10_000,
            }],
        };
        let recs = simulate_choices(&f, &sched, 0.0, 3).unwrap();
        let wins = recs.iter().filter(|r| r.outcome == Outcome::A).count();
        let (lo, hi) = wilson_ci(wins, 10_000, 0.99).unwrap();
        assert!(lo <= 0.75 && 0.75 <= hi);

        let recs = simulate_choices(&f, &sched, 0.1, 4).unwrap();
        let refusals = recs.iter().filter(|r| r.outcome == Outcome::Refusal).count() as f64 / 10_000.0;
        assert!((refusals - 0.1).abs() <= 0.01);
        assert_eq!(recs, simulate_choices(&f, &sched, 0.1, 4).unwrap());
    }

    #[test]
    fn degenerate_margin_always_a() {
        let f = UtilityFit::from_parameters("p", &ids(2), &[100.0, 0.0], &[0.01, 0.01]).unwrap();
        let sched = pair_schedule(&table(2), 1, true, 50, 0).unwrap().for_persona("p");
        let recs = simulate_choices(&f, &sched, 0.2, 0).unwrap();
        for r in recs.iter().filter(|r| r.outcome.is_usable()) {
            let winner = if r.outcome == Outcome::A { &r.task_a } else { &r.task_b };
            assert_eq!(winner, "t0");
        }
    }

    #[test]
    fn refusal_exclusion_barely_moves_recovery() {
        let n = 150;
        let t = table(n);
        let tf = truth(n, 0.5, 8);
        // matched usable-trial counts: 6 trials at rho=0 vs 10 trials at rho=0.4
        let s0 = pair_schedule(&t, 20, false, 6, 8).unwrap();
        let s1 = pair_schedule(&t, 20, false, 10, 8).unwrap();
        let r0 = simulate_choices(&tf, &s0, 0.0, 1).unwrap();
        let r1 = simulate_choices(&tf, &s1, 0.4, 1).unwrap();
        let f0 = fit_utilities(&r0, &t, &FitConfig::default()).unwrap();
        let f1 = fit_utilities(&r1, &t, &FitConfig::default()).unwrap();
        let c0 = pearson(&f0.utilities().values, &tf.utilities().values).unwrap().r;
        let c1 = pearson(&f1.utilities().values, &tf.utilities().values).unwrap().r;
        assert!((c0 - c1).abs() < 0.05, "{c0} vs {c1}");
    }

    proptest! {
        #[test]
        fn affine_map_preserves_probabilities(
            mus in proptest::collection::vec(-3.0f64..3.0, 4),
            sigs in proptest::collection::vec(0.1f64..2.0, 4),
            a in prop_oneof![Just(0.5f64), Just(2.0f64)],
            b in -5.0f64..5.0,
        ) {
            let base = UtilityFit::from_parameters("p", &ids(4), &mus, &sigs).unwrap();
            let mapped_mu: Vec<f64> = mus.iter().map(|m| a * m + b).collect();
            let mapped_sigma: Vec<f64> = sigs.iter().map(|s| a * s).collect();
            let mapped = UtilityFit::from_parameters("p", &ids(4), &mapped_mu, &mapped_sigma).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    if i == j { continue; }
                    let (x, y) = (format!("t{i}"), format!("t{j}"));
                    let p = predict_choice_prob(&base, &x, &y).unwrap();
                    let q = predict_choice_prob(&mapped, &x, &y).unwrap();
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn complement_rule(d in -8.0f64..8.0, s1 in 0.05f64..3.0, s2 in 0.05f64..3.0) {
            let f = UtilityFit::from_parameters("p", &ids(2), &[d, 0.0], &[s1, s2]).unwrap();
            let p = predict_choice_prob(&f, "t0", "t1").unwrap();
            let q = predict_choice_prob(&f, "t1", "t0").unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p + q - 1.0).abs() <= 1e-12);
        }
    }
}
