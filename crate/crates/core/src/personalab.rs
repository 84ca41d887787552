//! Cross-persona analyses: probe transfer, residual probe bias, persona
//! selection, training-set diversity, persona profiles and paired stimulus
//! deltas.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activationstore::ActivationMatrix;
use crate::choicemodel::{Utilities, UtilityFit};
use crate::corpus::TaskTable;
use crate::error::{Error, Result};
use crate::probekit::{holdout_split, train_ridge, Probe, ProbeOptions};
use crate::seeding::rng_for;
use crate::statlab::{cohens_d, mean, partial_correlation, pca, pearson, pop_stdev, sem, summarize, CorrelationResult, EffectSize, Summary};

// ---------------------------------------------------------------------------
// Transfer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub train_persona: String,
    pub eval_persona: String,
    pub probe_r: f64,
    pub utility_r: f64,
    pub delta: f64,
    /// Train and eval persona coincide; `utility_r` is 1 by definition.
    pub diagonal: bool,
}

impl TransferCell {
    pub fn new(train: &str, eval: &str, probe_r: f64, utility_r: f64) -> Self {
        TransferCell {
            train_persona: train.to_string(),
            eval_persona: eval.to_string(),
            probe_r,
            utility_r,
            delta: probe_r - utility_r,
            diagonal: train == eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    pub a: String,
    pub b: String,
    /// `|r(a→b) − r(b→a)|` on probe correlations.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub personas: Vec<String>,
    /// Row-major over `personas × personas`, train persona first.
    pub cells: Vec<TransferCell>,
}

impl TransferMatrix {
    pub fn cell(&self, train: &str, eval: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.train_persona == train && c.eval_persona == eval)
    }

    pub fn off_diagonal(&self) -> impl Iterator<Item = &TransferCell> {
        self.cells.iter().filter(|c| !c.diagonal)
    }

    pub fn asymmetry(&self) -> Vec<Asymmetry> {
        let mut out = Vec::new();
        for (i, a) in self.personas.iter().enumerate() {
            for b in &self.personas[i + 1..] {
                if let (Some(ab), Some(ba)) = (self.cell(a, b), self.cell(b, a)) {
                    out.push(Asymmetry {
                        a: a.clone(),
                        b: b.clone(),
                        value: (ab.probe_r - ba.probe_r).abs(),
                    });
                }
            }
        }
        out
    }
}

/// Every probe evaluated on every persona's activations.
///
/// All activation matrices are aligned to the task ids of the first
/// persona's matrix, so they must cover the same held-out tasks.
pub fn transfer_matrix(
    probes: &BTreeMap<String, Probe>,
    activations: &BTreeMap<String, ActivationMatrix>,
    utilities: &BTreeMap<String, Utilities>,
) -> Result<TransferMatrix> {
    let personas: Vec<String> = probes.keys().cloned().collect();
    let missing: Vec<String> = personas
        .iter()
        .filter(|p| !activations.contains_key(*p) || !utilities.contains_key(*p))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    if personas.is_empty() {
        return Err(Error::invalid("no probes given"));
    }
    let ids = activations[&personas[0]].task_ids().to_vec();
    let mut xs = HashMap::new();
    let mut us = HashMap::new();
    for p in &personas {
        xs.insert(p, activations[p].align(&ids)?);
        us.insert(p, utilities[p].aligned(&ids)?);
    }
    let grid: Vec<(&String, &String)> = personas.iter().flat_map(|t| personas.iter().map(move |e| (t, e))).collect();
    let cells = grid
        .par_iter()
        .map(|&(t, e)| {
            let pred = probes[t].predict(&xs[e])?;
            let probe_r = pearson(&pred, &us[e])?.r;
            let utility_r = if t == e { 1.0 } else { pearson(&us[t], &us[e])?.r };
            Ok(TransferCell::new(t, e, probe_r, utility_r))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix { personas, cells })
}

// ---------------------------------------------------------------------------
// Probe bias
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasPair {
    pub train: String,
    pub eval: String,
    pub raw_train: f64,
    pub raw_default: f64,
    /// `r(û, u_T | u_E)`; `None` when the residual has no variance.
    pub partial_train: Option<f64>,
    /// `r(û, u_default | u_E)`.
    pub partial_default: Option<f64>,
}

impl BiasPair {
    pub fn degenerate(&self) -> bool {
        self.partial_train.is_none() || self.partial_default.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverRow {
    pub observer: String,
    /// Mean of `r(û, u_X | u_E, u_T)` over pairs not involving `X`.
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub pairs: Vec<BiasPair>,
    /// Sorted by decreasing mean.
    pub observers: Vec<ObserverRow>,
}

fn undefined_as_none(r: Result<CorrelationResult>) -> Result<Option<f64>> {
    match r {
        Ok(c) => Ok(Some(c.r)),
        Err(Error::UndefinedCorrelation) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Raw and partial correlations of cross-persona predictions.
///
/// `predictions` is keyed by `(train, eval)` and must cover every ordered
/// pair of distinct non-default personas. All vectors share one task order.
pub fn probe_bias(
    predictions: &BTreeMap<(String, String), Vec<f64>>,
    utilities: &BTreeMap<String, Vec<f64>>,
    default_persona: &str,
    observers: &[String],
) -> Result<BiasReport> {
    if !observers.iter().any(|o| o == default_persona) {
        return Err(Error::invalid(format!("observer list must include {default_persona:?}")));
    }
    let mut absent: Vec<String> = observers.iter().filter(|o| !utilities.contains_key(*o)).cloned().collect();
    if !utilities.contains_key(default_persona) {
        absent.push(default_persona.to_string());
    }
    if !absent.is_empty() {
        return Err(Error::MissingIds(absent));
    }
    let others: Vec<&String> = utilities.keys().filter(|p| *p != default_persona).collect();
    let mut wanted = Vec::new();
    for t in &others {
        for e in &others {
            if t != e {
                wanted.push(((*t).clone(), (*e).clone()));
            }
        }
    }
    let missing: Vec<String> = wanted
        .iter()
        .filter(|k| !predictions.contains_key(*k))
        .map(|(t, e)| format!("{t}->{e}"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingIds(missing));
    }
    let u_def = &utilities[default_persona];

    let pairs = wanted
        .iter()
        .map(|(t, e)| {
            let pred = &predictions[&(t.clone(), e.clone())];
            let (ut, ue) = (&utilities[t], &utilities[e]);
            Ok(BiasPair {
                train: t.clone(),
                eval: e.clone(),
                raw_train: pearson(pred, ut)?.r,
                raw_default: pearson(pred, u_def)?.r,
                partial_train: undefined_as_none(partial_correlation(pred, ut, &[ue]))?,
                partial_default: undefined_as_none(partial_correlation(pred, u_def, &[ue]))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = observers
        .iter()
        .map(|x| {
            let mut vals = Vec::new();
            let mut n_degenerate = 0;
            for (t, e) in &wanted {
                if x == t || x == e {
                    continue;
                }
                let pred = &predictions[&(t.clone(), e.clone())];
                match undefined_as_none(partial_correlation(pred, &utilities[x], &[&utilities[e], &utilities[t]]))? {
                    Some(r) => vals.push(r),
                    None => n_degenerate += 1,
                }
            }
            Ok(ObserverRow {
                observer: x.clone(),
                mean: if vals.is_empty() { f64::NAN } else { mean(&vals) },
                sem: if vals.len() < 2 { 0.0 } else { sem(&vals) },
                n: vals.len(),
                n_degenerate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    Ok(BiasReport { pairs, observers: rows })
}

// ---------------------------------------------------------------------------
// Persona selection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSelection {
    pub selected: Vec<String>,
    /// Each unselected persona mapped to its most correlated selected one.
    pub represented_by: BTreeMap<String, String>,
    /// Principal-component scores, one row per input persona.
    pub pca_scores: BTreeMap<String, Vec<f64>>,
    pub warnings: Vec<String>,
}

fn admissible(r: f64, threshold: f64) -> bool {
    threshold >= 1.0 || r.abs() < threshold
}

/// Greedy threshold selection over persona utility profiles.
///
/// The first pick is the persona with the largest summed `|r|` to all
/// others. Each later pick is the admissible candidate whose largest `|r|`
/// to the current selection is smallest; ties go to input order.
pub fn persona_select(names: &[String], utilities: &[Vec<f64>], threshold: f64, target_count: usize) -> Result<PersonaSelection> {
    let n = names.len();
    if n != utilities.len() {
        return Err(Error::invalid("names and utility rows differ in length"));
    }
    if target_count == 0 || n < target_count {
        return Err(Error::invalid(format!("need at least {target_count} personas, got {n}")));
    }
    if names.iter().collect::<BTreeSet<_>>().len() != n {
        return Err(Error::invalid("persona names must be unique"));
    }
    let mut r = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = pearson(&utilities[i], &utilities[j])?.r;
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    let centrality = |i: usize| (0..n).filter(|&j| j != i).map(|j| r[i][j].abs()).sum::<f64>();
    let mut first = 0;
    for i in 1..n {
        if centrality(i) > centrality(first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    while chosen.len() < target_count {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..n {
            if chosen.contains(&c) || !chosen.iter().all(|&s| admissible(r[c][s], threshold)) {
                continue;
            }
            let closeness = chosen.iter().map(|&s| r[c][s].abs()).fold(0.0, f64::max);
            if best.is_none_or(|(_, b)| closeness < b) {
                best = Some((c, closeness));
            }
        }
        match best {
            Some((c, _)) => chosen.push(c),
            None => break,
        }
    }
    let mut warnings = Vec::new();
    if chosen.len() < target_count {
        warnings.push(format!(
            "threshold {threshold} admits only {} of {target_count} requested personas",
            chosen.len()
        ));
    }
    let mut represented_by = BTreeMap::new();
    for i in 0..n {
        if chosen.contains(&i) {
            continue;
        }
        let mut rep = chosen[0];
        for &s in &chosen[1..] {
            if r[i][s].abs() > r[i][rep].abs() {
                rep = s;
            }
        }
        represented_by.insert(names[i].clone(), names[rep].clone());
    }
    let mut pca_scores = BTreeMap::new();
    if n >= 2 {
        let p = pca(utilities)?;
        for (name, s) in names.iter().zip(p.scores) {
            pca_scores.insert(name.clone(), s);
        }
    }
    Ok(PersonaSelection {
        selected: chosen.iter().map(|&i| names[i].clone()).collect(),
        represented_by,
        pca_scores,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Diversity ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PersonaData {
    pub activations: ActivationMatrix,
    /// Aligned with the rows of `activations`.
    pub utilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityPoint {
    pub n_personas: usize,
    pub mean_r: f64,
    pub sem: f64,
    /// Mean held-out-persona r for each seed.
    pub per_seed: Vec<f64>,
}

/// Per-persona sample counts summing to `total`, as even as possible.
pub fn quotas(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("persona count must be >= 1"));
    }
    Ok((0..k).map(|i| total / k + usize::from(i < total % k)).collect())
}

fn diversity_run(data: &BTreeMap<String, PersonaData>, held: &str, total: usize, k: usize, seed: u64, opts: &ProbeOptions) -> Result<f64> {
    let ks = k.to_string();
    let mut pool: Vec<&String> = data.keys().filter(|p| *p != held).collect();
    pool.shuffle(&mut rng_for(seed, &["diversity", held, &ks]));
    let quota = quotas(total, k)?;
    let mut ids = Vec::with_capacity(total);
    let mut rows = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    for (p, q) in pool.iter().take(k).zip(quota) {
        let pd = &data[*p];
        let mut idx: Vec<usize> = (0..pd.activations.n()).collect();
        idx.shuffle(&mut rng_for(seed, &["diversity_rows", held, &ks, p]));
        for &i in &idx[..q] {
            ids.push(format!("{p}/{}", pd.activations.task_ids()[i]));
            rows.push(pd.activations.row_f64(i));
            y.push(pd.utilities[i]);
        }
    }
    let x0 = &data[held].activations;
    let x = ActivationMatrix::from_rows(x0.model_id(), "pooled", x0.layer(), x0.position(), ids, &rows)?;
    let split = holdout_split(x.task_ids(), opts.internal_validation, 0.0, seed)?;
    let probe = train_ridge(&x, &y, &split, opts)?;
    let pred = probe.predict(x0)?;
    Ok(pearson(&pred, &data[held].utilities)?.r)
}

/// Fixed-size training sets drawn evenly from `k` personas, scored by
/// leave-one-persona-out correlation. Each seed contributes the mean over
/// held-out personas; the curve reports mean and SEM over seeds.
pub fn diversity_ablation(
    data: &BTreeMap<String, PersonaData>,
    total_size: usize,
    persona_counts: &[usize],
    seeds: &[u64],
    opts: &ProbeOptions,
) -> Result<Vec<DiversityPoint>> {
    if seeds.is_empty() {
        return Err(Error::invalid("at least one seed is required"));
    }
    for pd in data.values() {
        if pd.activations.n() != pd.utilities.len() {
            return Err(Error::invalid("activations and utilities differ in length"));
        }
    }
    for &k in persona_counts {
        if k == 0 || k + 1 > data.len() {
            return Err(Error::invalid(format!(
                "cannot train on {k} personas with {} available and one held out",
                data.len()
            )));
        }
        let top = quotas(total_size, k)?[0];
        if let Some((p, _)) = data.iter().find(|(_, pd)| pd.activations.n() < top) {
            return Err(Error::invalid(format!("persona {p:?} has fewer than {top} rows")));
        }
    }
    persona_counts
        .iter()
        .map(|&k| {
            let per_seed = seeds
                .par_iter()
                .map(|&s| {
                    let rs = data
                        .keys()
                        .map(|h| diversity_run(data, h, total_size, k, s, opts))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(mean(&rs))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DiversityPoint {
                n_personas: k,
                mean_r: mean(&per_seed),
                sem: if per_seed.len() < 2 { 0.0 } else { sem(&per_seed) },
                per_seed,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Paired deltas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusScore {
    pub pair_id: String,
    pub harmful: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub pair_id: String,
    pub harmful: f64,
    pub benign: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDeltaReport {
    pub condition: String,
    /// Sorted by pair id.
    pub pairs: Vec<PairDelta>,
    pub mean_delta: f64,
    pub summary: Summary,
    /// Mean delta sign differs from the reference condition's.
    pub flipped: bool,
    pub baseline_mean_delta: Option<f64>,
}

fn pair_up(condition: &str, scores: &[StimulusScore]) -> Result<Vec<PairDelta>> {
    let mut slots: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for s in scores {
        let e = slots.entry(&s.pair_id).or_default();
        let slot = if s.harmful { &mut e.0 } else { &mut e.1 };
        if slot.replace(s.score).is_some() {
            return Err(Error::DuplicateId(format!("{condition}: {}", s.pair_id)));
        }
    }
    slots
        .into_iter()
        .map(|(id, v)| match v {
            (Some(h), Some(b)) => Ok(PairDelta {
                pair_id: id.to_string(),
                harmful: h,
                benign: b,
                delta: h - b,
            }),
            _ => Err(Error::invalid(format!("{condition}: pair {id:?} is unmatched"))),
        })
        .collect()
}

fn signum0(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Harmful-minus-benign deltas for each condition. `flipped` compares each
/// mean against the `reference` condition's mean.
pub fn paired_delta(
    conditions: &BTreeMap<String, Vec<StimulusScore>>,
    reference: &str,
    baseline: Option<&[StimulusScore]>,
) -> Result<Vec<PairedDeltaReport>> {
    if !conditions.contains_key(reference) {
        return Err(Error::MissingIds(vec![reference.to_string()]));
    }
    let baseline_mean = match baseline {
        Some(b) => {
            let p = pair_up("baseline", b)?;
            Some(mean(&p.iter().map(|d| d.delta).collect::<Vec<_>>()))
        }
        None => None,
    };
    let mut reports = conditions
        .iter()
        .map(|(c, scores)| {
            let pairs = pair_up(c, scores)?;
            let deltas: Vec<f64> = pairs.iter().map(|d| d.delta).collect();
            Ok(PairedDeltaReport {
                condition: c.clone(),
                mean_delta: mean(&deltas),
                summary: summarize(&deltas)?,
                pairs,
                flipped: false,
                baseline_mean_delta: baseline_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ref_sign = signum0(reports.iter().find(|r| r.condition == reference).map_or(0.0, |r| r.mean_delta));
    for r in &mut reports {
        let s = signum0(r.mean_delta);
        r.flipped = s != 0 && ref_sign != 0 && s != ref_sign;
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Class discrimination
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminationReport {
    pub effect: EffectSize,
    pub positive: Summary,
    pub negative: Summary,
}

pub fn class_discrimination(positive: &[f64], negative: &[f64]) -> Result<DiscriminationReport> {
    Ok(DiscriminationReport {
        effect: cohens_d(positive, negative)?,
        positive: summarize(positive)?,
        negative: summarize(negative)?,
    })
}

// ---------------------------------------------------------------------------
// Persona profiles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub persona: String,
    pub top: Vec<String>,
    pub bottom: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub personas: Vec<String>,
    pub topics: Vec<String>,
    /// `heat[p][t]`: mean within-persona z-scored utility on topic `t`.
    pub heat: Vec<Vec<f64>>,
    /// `heat` minus the reference persona's row.
    pub diff: Vec<Vec<f64>>,
    /// Top and bottom three tasks among those with σ below the persona's median.
    pub extremes: Vec<Extremes>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn persona_profile(fits: &[UtilityFit], tasks: &TaskTable, reference: &str) -> Result<PersonaProfile> {
    let Some(ref_idx) = fits.iter().position(|f| f.persona == reference) else {
        return Err(Error::MissingIds(vec![reference.to_string()]));
    };
    let topics: Vec<String> = fits
        .iter()
        .flat_map(|f| f.tasks.iter())
        .map(|t| tasks.get(&t.id).map(|x| x.topic.clone()).ok_or_else(|| Error::UnknownTask(t.id.clone())))
        .collect::<Result<BTreeSet<_>>>()?
        .into_iter()
        .collect();
    let mut heat = Vec::with_capacity(fits.len());
    let mut extremes = Vec::with_capacity(fits.len());
    for f in fits {
        let mu: Vec<f64> = f.tasks.iter().map(|t| t.mu).collect();
        let (m, s) = (mean(&mu), pop_stdev(&mu));
        let z: Vec<f64> = mu.iter().map(|v| if s > 0.0 { (v - m) / s } else { 0.0 }).collect();
        let mut by_topic: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (t, zv) in f.tasks.iter().zip(&z) {
            by_topic.entry(&tasks.get(&t.id).expect("checked above").topic).or_default().push(*zv);
        }
        let row = topics
            .iter()
            .map(|t| match by_topic.get(t.as_str()) {
                Some(v) => Ok(mean(v)),
                None => Err(Error::Degenerate(format!("persona {:?} has no tasks on topic {t:?}", f.persona))),
            })
            .collect::<Result<Vec<_>>>()?;
        heat.push(row);

        let sig: Vec<f64> = f.tasks.iter().map(|t| t.sigma).collect();
        let med = median(&sig);
        let mut confident: Vec<(f64, &str)> = f.tasks.iter().filter(|t| t.sigma < med).map(|t| (t.mu, t.id.as_str())).collect();
        confident.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let top = confident.iter().take(3).map(|x| x.1.to_string()).collect();
        let bottom = confident.iter().rev().take(3).map(|x| x.1.to_string()).collect();
        extremes.push(Extremes {
            persona: f.persona.clone(),
            top,
            bottom,
        });
    }
    let diff = heat
        .iter()
        .map(|row| row.iter().zip(&heat[ref_idx]).map(|(a, b)| a - b).collect())
        .collect();
    Ok(PersonaProfile {
        personas: fits.iter().map(|f| f.persona.clone()).collect(),
        topics,
        heat,
        diff,
        extremes,
    })
}

// ---------------------------------------------------------------------------
// Delta vs delta
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub targeted: CorrelationResult,
    /// `None` when either off-target delta vector is constant.
    pub off_target: Option<CorrelationResult>,
    /// Mean `|probe − behaviour|` over off-target tasks.
    pub off_target_mean_gap: f64,
}

pub fn delta_vs_delta(probe: &[f64], behaviour: &[f64], targeted: &[bool]) -> Result<DeltaReport> {
    if probe.len() != behaviour.len() || probe.len() != targeted.len() {
        return Err(Error::invalid("delta vectors and mask differ in length"));
    }
    let group = |want: bool| {
        let (p, b): (Vec<f64>, Vec<f64>) = probe
            .iter()
            .zip(behaviour)
            .zip(targeted)
            .filter(|(_, &t)| t == want)
            .map(|((p, b), _)| (*p, *b))
            .unzip();
        if p.len() < 2 {
            return Err(Error::invalid(format!(
                "{} group has fewer than 2 tasks",
                if want { "targeted" } else { "off-target" }
            )));
        }
        Ok((p, b))
    };
    let (tp, tb) = group(true)?;
    let (op, ob) = group(false)?;
    let gaps: Vec<f64> = op.iter().zip(&ob).map(|(a, b)| (a - b).abs()).collect();
    Ok(DeltaReport {
        targeted: pearson(&tp, &tb)?,
        off_target: match pearson(&op, &ob) {
            Ok(c) => Some(c),
            Err(Error::UndefinedCorrelation) => None,
            Err(e) => return Err(e),
        },
        off_target_mean_gap: mean(&gaps),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choicemodel::{FitConfig, TaskUtility};
    use crate::corpus::Task;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &["test"]);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Centered unit-norm copy of `v` with `basis` removed.
    fn orth(v: &[f64], basis: &[Vec<f64>]) -> Vec<f64> {
        let m = mean(v);
        let mut w: Vec<f64> = v.iter().map(|x| x - m).collect();
        for b in basis {
            let c: f64 = w.iter().zip(b).map(|(x, y)| x * y).sum();
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter().map(|x| x / n).collect()
    }

    #[test]
    fn delta_identity() {
        let c = TransferCell::new("assistant", "evil", 0.243, -0.146);
        assert!((c.delta - 0.389).abs() < 1e-12);
        assert!(!c.diagonal);
    }

    #[test]
    fn bias_degenerate_and_exact() {
        let ue = orth(&gauss(50, 1), &[]);
        let ut = orth(&gauss(50, 2), &[ue.clone()]);
        let ud = orth(&gauss(50, 3), &[]);
        let mut u = BTreeMap::new();
        u.insert("assistant".to_string(), ud);
        u.insert("e".to_string(), ue.clone());
        u.insert("t".to_string(), ut.clone());
        let mut preds = BTreeMap::new();
        preds.insert(("t".to_string(), "e".to_string()), ut.clone());
        preds.insert(("e".to_string(), "t".to_string()), ut.clone());
        let r = probe_bias(&preds, &u, "assistant", &["assistant".to_string()]).unwrap();
        let te = r.pairs.iter().find(|p| p.train == "t").unwrap();
        assert!((te.partial_train.unwrap() - 1.0).abs() < 1e-9);
        // prediction equal to the eval persona's utility: nothing left to explain
        let et = r.pairs.iter().find(|p| p.train == "e").unwrap();
        assert!(et.partial_train.is_none());
        assert!(et.degenerate());
        let err = probe_bias(&BTreeMap::new(), &u, "assistant", &["assistant".to_string()]);
        assert!(matches!(err, Err(Error::MissingIds(_))));
    }

    #[test]
    fn select_threshold_rule() {
        let x = orth(&gauss(200, 4), &[]);
        let z = orth(&gauss(200, 5), &[x.clone()]);
        let r = 0.79_f64;
        let y: Vec<f64> = x.iter().zip(&z).map(|(a, b)| r * a + (1.0 - r * r).sqrt() * b).collect();
        assert!((pearson(&x, &y).unwrap().r - 0.79).abs() < 1e-12);
        let names = vec!["a".to_string(), "b".to_string()];
        let sel = persona_select(&names, &[x.clone(), y.clone()], 0.75, 2).unwrap();
        assert_eq!(sel.selected.len(), 1);
        assert_eq!(sel.warnings.len(), 1);
        assert_eq!(sel.represented_by.len(), 1);
        let all = persona_select(&names, &[x, y], 1.0, 2).unwrap();
        assert_eq!(all.selected.len(), 2);
        assert!(all.warnings.is_empty());
    }

    #[test]
    fn select_never_violates_threshold() {
        let base = gauss(100, 6);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let n = gauss(100, 10 + i);
                let w = i as f64 / 8.0;
                base.iter().zip(&n).map(|(a, b)| w * a + (1.0 - w) * b).collect()
            })
            .collect();
        let names: Vec<String> = (0..8).map(|i| format!("p{i}")).collect();
        let sel = persona_select(&names, &rows, 0.5, 8).unwrap();
        for a in &sel.selected {
            for b in &sel.selected {
                if a != b {
                    let ia = names.iter().position(|n| n == a).unwrap();
                    let ib = names.iter().position(|n| n == b).unwrap();
                    assert!(pearson(&rows[ia], &rows[ib]).unwrap().r.abs() < 0.5);
                }
            }
        }
        assert_eq!(sel.pca_scores.len(), 8);
    }

    #[test]
    fn quota_split() {
        assert_eq!(quotas(2000, 4).unwrap(), vec![500; 4]);
        assert_eq!(quotas(10, 3).unwrap(), vec![4, 3, 3]);
        assert!(quotas(10, 0).is_err());
    }

    fn scores(deltas: &[f64]) -> Vec<StimulusScore> {
        deltas
            .iter()
            .enumerate()
            .flat_map(|(i, d)| {
                [
                    StimulusScore {
                        pair_id: format!("p{i}"),
                        harmful: true,
                        score: *d,
                    },
                    StimulusScore {
                        pair_id: format!("p{i}"),
                        harmful: false,
                        score: 0.0,
                    },
                ]
            })
            .collect()
    }

    #[test]
    fn paired_delta_flip() {
        let mut c = BTreeMap::new();
        c.insert("assistant".to_string(), scores(&[-4.0, -5.04]));
        c.insert("evil".to_string(), scores(&[1.0, 1.3]));
        let r = paired_delta(&c, "assistant", None).unwrap();
        assert!((r[0].mean_delta + 4.52).abs() < 1e-12);
        assert!((r[1].mean_delta - 1.15).abs() < 1e-12);
        assert!(!r[0].flipped);
        assert!(r[1].flipped);

        let mut same = BTreeMap::new();
        same.insert("a".to_string(), scores(&[0.0, 0.0, 0.0]));
        assert_eq!(paired_delta(&same, "a", None).unwrap()[0].mean_delta, 0.0);

        let mut bad = scores(&[1.0]);
        bad.pop();
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), bad);
        assert!(paired_delta(&c, "a", None).is_err());
    }

    #[test]
    fn paired_delta_order_invariant() {
        let s = scores(&gauss(40, 7));
        let mut rev = s.clone();
        rev.reverse();
        let mut a = BTreeMap::new();
        a.insert("x".to_string(), s);
        let mut b = BTreeMap::new();
        b.insert("x".to_string(), rev);
        assert_eq!(
            paired_delta(&a, "x", None).unwrap()[0].mean_delta,
            paired_delta(&b, "x", None).unwrap()[0].mean_delta
        );
    }

    #[test]
    fn discrimination_fixture() {
        let pos: Vec<f64> = gauss(500, 8).iter().map(|x| x + 1.0).collect();
        let neg = gauss(500, 9);
        let r = class_discrimination(&pos, &neg).unwrap();
        assert_eq!((r.effect.n_pos, r.effect.n_neg), (500, 500));
        assert!((r.effect.d - 1.0).abs() < 0.15);
        assert!(r.effect.ci_half > 0.0);
        let eq = class_discrimination(&gauss(500, 10), &gauss(500, 11)).unwrap();
        assert!(eq.effect.d.abs() < 0.15);
    }

    fn fit(persona: &str, ids: &[String], mu: &[f64]) -> UtilityFit {
        UtilityFit {
            persona: persona.to_string(),
            tasks: ids
                .iter()
                .zip(mu)
                .enumerate()
                .map(|(i, (id, m))| TaskUtility {
                    id: id.clone(),
                    mu: *m,
                    sigma: 0.1 + 0.01 * i as f64,
                    unconstrained: false,
                })
                .collect(),
            nll: 0.0,
            n_effective: 0,
            normalized: true,
            converged: true,
            iterations: 0,
            config: FitConfig::default(),
            objective_trace: Vec::new(),
        }
    }

    #[test]
    fn profile_shapes() {
        let tasks = TaskTable::new((0..12).map(|i| Task::new(format!("t{i}"), "x", format!("topic{}", i % 3))).collect()).unwrap();
        let ids = tasks.ids();
        let mu = gauss(12, 12);
        let fits = [fit("assistant", &ids, &mu), fit("twin", &ids, &mu)];
        let p = persona_profile(&fits, &tasks, "assistant").unwrap();
        assert_eq!(p.heat[0].len(), 3);
        assert!(p.diff[1].iter().all(|v| *v == 0.0));
        assert_eq!(p.extremes[0].top.len(), 3);

        let one = TaskTable::new((0..6).map(|i| Task::new(format!("t{i}"), "x", "only")).collect()).unwrap();
        let fits = [fit("assistant", &one.ids(), &gauss(6, 13))];
        let p = persona_profile(&fits, &one, "assistant").unwrap();
        assert_eq!(p.heat[0].len(), 1);
        assert!(p.heat[0][0].abs() < 1e-12);

        assert!(persona_profile(&fits, &one, "missing").is_err());
    }

    #[test]
    fn delta_groups() {
        let p = gauss(20, 14);
        let mask: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let r = delta_vs_delta(&p, &p, &mask).unwrap();
        assert!((r.targeted.r - 1.0).abs() < 1e-12);
        assert!((r.off_target.unwrap().r - 1.0).abs() < 1e-12);
        let flipped: Vec<f64> = p.iter().zip(&mask).map(|(v, &m)| if m { -v } else { *v }).collect();
        let r = delta_vs_delta(&p, &flipped, &mask).unwrap();
        assert!((r.targeted.r + 1.0).abs() < 1e-12);
        assert!(delta_vs_delta(&p[..3], &p[..3], &[true, true, false]).is_err());
    }
}
