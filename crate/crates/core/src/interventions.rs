//! Steering, layer sweeps, direction ablation and end-of-turn patching
//! against any backend that exposes [`HookedBackend`].

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Harm, Ordering, PairSchedule, Task, TaskTable};
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::statlab::{difference_ci, wilson_ci};

pub const DEFAULT_COEFFICIENT_CAP: f64 = 0.06;

/// Standard coefficient grid for wide sweeps; needs the cap override.
pub fn standard_grid() -> Vec<f64> {
    vec![0.0, -0.03, 0.03, -0.05, 0.05, -0.07, 0.07, -0.10, 0.10]
}

// ---------------------------------------------------------------------------
// Hook interface
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookTarget {
    SpanA,
    SpanB,
    BothSpans,
    EndOfTurn,
    AllTokens,
}

impl HookTarget {
    pub fn hits_span_a(self) -> bool {
        matches!(self, HookTarget::SpanA | HookTarget::BothSpans | HookTarget::AllTokens)
    }
    pub fn hits_span_b(self) -> bool {
        matches!(self, HookTarget::SpanB | HookTarget::BothSpans | HookTarget::AllTokens)
    }
    pub fn hits_eot(self) -> bool {
        matches!(self, HookTarget::EndOfTurn | HookTarget::AllTokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HookAction {
    AddVector { vector: Vec<f64>, scale: f64 },
    ProjectOut { direction: Vec<f64> },
    Replace { vector: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hook {
    pub layer: usize,
    pub target: HookTarget,
    pub action: HookAction,
}

impl Hook {
    pub fn validate(&self, d: usize, n_layers: usize) -> Result<()> {
        if self.layer >= n_layers {
            return Err(Error::invalid(format!("hook layer {} outside [0, {n_layers})", self.layer)));
        }
        let v = match &self.action {
            HookAction::AddVector { vector, scale } => {
                if !scale.is_finite() {
                    return Err(Error::invalid("hook scale is not finite"));
                }
                vector
            }
            HookAction::ProjectOut { direction } => {
                if direction.iter().all(|x| *x == 0.0) {
                    return Err(Error::invalid("project_out direction is zero"));
                }
                direction
            }
            HookAction::Replace { vector } => vector,
        };
        if v.len() != d {
            return Err(Error::invalid(format!("hook vector has length {}, expected {d}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("hook vector is not finite"));
        }
        Ok(())
    }

    /// Apply this hook's action to one activation vector.
    pub fn apply(&self, x: &mut [f64]) {
        match &self.action {
            HookAction::AddVector { vector, scale } => x.iter_mut().zip(vector).for_each(|(a, v)| *a += scale * v),
            HookAction::ProjectOut { direction } => {
                let nn: f64 = direction.iter().map(|v| v * v).sum();
                let c: f64 = x.iter().zip(direction).map(|(a, v)| a * v).sum::<f64>() / nn;
                x.iter_mut().zip(direction).for_each(|(a, v)| *a -= c * v);
            }
            HookAction::Replace { vector } => x.copy_from_slice(vector),
        }
    }
}

/// Two tasks presented in slots A (first) and B (second).
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub persona: &'a str,
    pub task_a: &'a Task,
    pub task_b: &'a Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Per layer: `[span_a, span_b, end_of_turn]`.
    pub activations: Vec<[Vec<f64>; 3]>,
    /// Positive favours slot A.
    pub decision_margin: f64,
    /// `(p_a, p_b, p_refuse)` over slots.
    pub choice_probs: (f64, f64, f64),
}

impl ForwardOutput {
    pub fn eot(&self, layer: usize) -> &[f64] {
        &self.activations[layer][2]
    }
}

pub trait HookedBackend: Sync {
    fn d(&self) -> usize;
    fn n_layers(&self) -> usize;
    fn forward(&self, episode: &Episode<'_>, hooks: &[Hook]) -> Result<ForwardOutput>;
    /// Mean task-span activation norm at `layer`, the unit for steering scales.
    fn mean_norm(&self, tasks: &[Task], persona: &str, layer: usize) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    A,
    B,
    Refusal,
}

/// Map one uniform draw to a slot outcome.
pub fn sample_slot(probs: (f64, f64, f64), u: f64) -> Slot {
    if u < probs.0 {
        Slot::A
    } else if u < probs.0 + probs.1 {
        Slot::B
    } else {
        Slot::Refusal
    }
}

/// Uniform for one trial. Keyed without any condition label so every
/// condition sees the same draws.
pub fn trial_uniform(seed: u64, pair_id: &str, ordering: &str, trial: usize) -> f64 {
    rng_for(seed, &["trial", pair_id, ordering, &trial.to_string()]).random()
}

/// Most frequent of A/B over trials; `None` on a tie or no valid trials.
pub fn modal(slots: &[Slot]) -> Option<Slot> {
    let a = slots.iter().filter(|s| **s == Slot::A).count();
    let b = slots.iter().filter(|s| **s == Slot::B).count();
    match a.cmp(&b) {
        std::cmp::Ordering::Greater => Some(Slot::A),
        std::cmp::Ordering::Less => Some(Slot::B),
        std::cmp::Ordering::Equal => None,
    }
}

fn run_trials(out: &ForwardOutput, seed: u64, pair_id: &str, ordering: &str, trials: usize) -> Vec<Slot> {
    (0..trials)
        .map(|t| sample_slot(out.choice_probs, trial_uniform(seed, pair_id, ordering, t)))
        .collect()
}

// ---------------------------------------------------------------------------
// Typed pairs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    Bb,
    Hb,
    Hh,
}

impl fmt::Display for PairType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairType::Bb => "bb",
            PairType::Hb => "hb",
            PairType::Hh => "hh",
        })
    }
}

impl PairType {
    pub fn of(a: &Task, b: &Task) -> Result<PairType> {
        match (a.harm, b.harm) {
            (Harm::Benign, Harm::Benign) => Ok(PairType::Bb),
            (Harm::Harmful, Harm::Harmful) => Ok(PairType::Hh),
            (Harm::Harmful, Harm::Benign) | (Harm::Benign, Harm::Harmful) => Ok(PairType::Hb),
            _ => Err(Error::UnknownEnum {
                field: "pair_type",
                value: format!("{}/{}", a.id, b.id),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedPair {
    pub pair_id: String,
    pub task_a: Task,
    pub task_b: Task,
    pub pair_type: PairType,
}

/// One typed pair per unordered schedule pair, in schedule order.
pub fn typed_pairs(schedule: &PairSchedule, tasks: &TaskTable) -> Result<Vec<TypedPair>> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for e in &schedule.entries {
        let key = if e.task_a <= e.task_b {
            (e.task_a.clone(), e.task_b.clone())
        } else {
            (e.task_b.clone(), e.task_a.clone())
        };
        if !seen.insert(key) {
            continue;
        }
        let a = tasks.get(&e.task_a).ok_or_else(|| Error::UnknownTask(e.task_a.clone()))?;
        let b = tasks.get(&e.task_b).ok_or_else(|| Error::UnknownTask(e.task_b.clone()))?;
        out.push(TypedPair {
            pair_id: e.pair_id.clone(),
            task_a: a.clone(),
            task_b: b.clone(),
            pair_type: PairType::of(a, b)?,
        });
    }
    Ok(out)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("steering direction is zero"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn tasks_of(pairs: &[TypedPair]) -> Vec<Task> {
    let mut by_id = BTreeMap::new();
    for p in pairs {
        by_id.entry(p.task_a.id.clone()).or_insert_with(|| p.task_a.clone());
        by_id.entry(p.task_b.id.clone()).or_insert_with(|| p.task_b.clone());
    }
    by_id.into_values().collect()
}

// ---------------------------------------------------------------------------
// Steering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    BothTasksContrastive,
    OneTaskOnly,
    AllTokens,
}

impl fmt::Display for SteeringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SteeringMode::BothTasksContrastive => "both_tasks_contrastive",
            SteeringMode::OneTaskOnly => "one_task_only",
            SteeringMode::AllTokens => "all_tokens",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub coefficients: Vec<f64>,
    pub modes: Vec<SteeringMode>,
    pub layer: usize,
    pub trials: usize,
    /// `None` disables the cap.
    pub cap: Option<f64>,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            coefficients: vec![-0.06, -0.03, 0.0, 0.03, 0.06],
            modes: vec![SteeringMode::BothTasksContrastive],
            layer: 0,
            trials: 5,
            cap: Some(DEFAULT_COEFFICIENT_CAP),
            seed: 0,
        }
    }
}

pub fn check_coefficients(coefficients: &[f64], cap: Option<f64>) -> Result<()> {
    for c in coefficients {
        if !c.is_finite() {
            return Err(Error::invalid("coefficient is not finite"));
        }
        if let Some(cap) = cap {
            if c.abs() > cap + 1e-12 {
                return Err(Error::Config(format!("|c| = {} exceeds cap {cap}; set an override to allow it", c.abs())));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerOutcome {
    Steered,
    Other,
    Refusal,
}

/// One row of the persisted per-trial log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTrial {
    pub coefficient: f64,
    pub mode: SteeringMode,
    pub layer: usize,
    pub persona: String,
    pub pair_type: PairType,
    pub pair_id: String,
    pub ordering: Ordering,
    /// Which slot carried the steer in one-task mode; `"both"` otherwise.
    pub variant: String,
    pub trial: usize,
    pub outcome: SteerOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub coefficient: f64,
    pub mode: SteeringMode,
    pub pair_type: PairType,
    pub persona: String,
    pub n_steered: usize,
    /// Non-refusal trials.
    pub n: usize,
    pub n_refusal: usize,
    pub chose_steered_rate: f64,
    pub ci: (f64, f64),
    pub refusal_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub log: Vec<SteeringTrial>,
}

impl SweepResult {
    pub fn row(&self, coefficient: f64, mode: SteeringMode, pair_type: PairType, persona: &str) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| (r.coefficient - coefficient).abs() < 1e-12 && r.mode == mode && r.pair_type == pair_type && r.persona == persona)
    }
}

/// Aggregate rows from a trial log, grouped by (coefficient, mode, pair type,
/// persona) in sorted order.
pub fn aggregate_steering(log: &[SteeringTrial]) -> Result<Vec<SweepRow>> {
    let mut groups: BTreeMap<(i64, SteeringMode, PairType, String), (f64, usize, usize, usize)> = BTreeMap::new();
    for t in log {
        let key = ((t.coefficient * 1e9).round() as i64, t.mode, t.pair_type, t.persona.clone());
        let g = groups.entry(key).or_insert((t.coefficient, 0, 0, 0));
        match t.outcome {
            SteerOutcome::Steered => g.1 += 1,
            SteerOutcome::Other => g.2 += 1,
            SteerOutcome::Refusal => g.3 += 1,
        }
    }
    groups
        .into_iter()
        .map(|((_, mode, pair_type, persona), (c, s, o, r))| {
            let n = s + o;
            let (rate, ci) = if n == 0 {
                (f64::NAN, (0.0, 1.0))
            } else {
                (s as f64 / n as f64, wilson_ci(s, n, 0.95)?)
            };
            Ok(SweepRow {
                coefficient: c,
                mode,
                pair_type,
                persona,
                n_steered: s,
                n,
                n_refusal: r,
                chose_steered_rate: rate,
                ci,
                refusal_rate: r as f64 / (n + r).max(1) as f64,
            })
        })
        .collect()
}

/// Runs for one pair: (ordering, variant, hooks, steered slot).
fn steering_runs(mode: SteeringMode, layer: usize, v: &[f64], scale: f64) -> Vec<(Ordering, &'static str, Vec<Hook>, Slot)> {
    let add = |target, s: f64| Hook {
        layer,
        target,
        action: HookAction::AddVector {
            vector: v.to_vec(),
            scale: s,
        },
    };
    let mut runs = Vec::new();
    for ord in [Ordering::AB, Ordering::BA] {
        match mode {
            SteeringMode::BothTasksContrastive => {
                runs.push((ord, "both", vec![add(HookTarget::SpanA, scale), add(HookTarget::SpanB, -scale)], Slot::A));
            }
            SteeringMode::OneTaskOnly => {
                runs.push((ord, "first", vec![add(HookTarget::SpanA, scale)], Slot::A));
                runs.push((ord, "second", vec![add(HookTarget::SpanB, scale)], Slot::B));
            }
            SteeringMode::AllTokens => {
                runs.push((ord, "all", vec![add(HookTarget::AllTokens, scale)], Slot::A));
            }
        }
    }
    runs
}

/// Mirrored-design steering sweep: every pair is run in both orderings so
/// each task is the steered one once.
pub fn steering_sweep<B: HookedBackend>(
    backend: &B,
    direction: &[f64],
    pairs: &[TypedPair],
    personas: &[String],
    config: &SteeringConfig,
) -> Result<SweepResult> {
    check_coefficients(&config.coefficients, config.cap)?;
    if direction.len() != backend.d() {
        return Err(Error::invalid("direction length does not match backend d"));
    }
    if config.layer >= backend.n_layers() {
        return Err(Error::invalid(format!("layer {} outside backend", config.layer)));
    }
    let v = unit(direction)?;
    let tasks = tasks_of(pairs);
    let mut log = Vec::new();
    for persona in personas {
        let norm = backend.mean_norm(&tasks, persona, config.layer)?;
        let cells: Vec<(f64, SteeringMode)> = config
            .coefficients
            .iter()
            .flat_map(|&c| config.modes.iter().map(move |&m| (c, m)))
            .collect();
        let chunks: Vec<Result<Vec<SteeringTrial>>> = cells
            .par_iter()
            .map(|&(c, mode)| {
                let mut out = Vec::new();
                for p in pairs {
                    for (ord, variant, hooks, steered) in steering_runs(mode, config.layer, &v, c * norm) {
                        let (a, b) = match ord {
                            Ordering::AB => (&p.task_a, &p.task_b),
                            Ordering::BA => (&p.task_b, &p.task_a),
                        };
                        let ep = Episode {
                            persona,
                            task_a: a,
                            task_b: b,
                        };
                        let fwd = backend.forward(&ep, &hooks)?;
                        for (trial, slot) in run_trials(&fwd, config.seed, &p.pair_id, &ord.to_string(), config.trials)
                            .into_iter()
                            .enumerate()
                        {
                            let outcome = match slot {
                                Slot::Refusal => SteerOutcome::Refusal,
                                s if s == steered => SteerOutcome::Steered,
                                _ => SteerOutcome::Other,
                            };
                            out.push(SteeringTrial {
                                coefficient: c,
                                mode,
                                layer: config.layer,
                                persona: persona.clone(),
                                pair_type: p.pair_type,
                                pair_id: p.pair_id.clone(),
                                ordering: ord,
                                variant: variant.to_string(),
                                trial,
                                outcome,
                            });
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        for c in chunks {
            log.extend(c?);
        }
    }
    Ok(SweepResult {
        rows: aggregate_steering(&log)?,
        log,
    })
}

// ---------------------------------------------------------------------------
// Layer sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSwing {
    pub layer: usize,
    pub rate_pos: f64,
    pub rate_neg: f64,
    pub swing: f64,
    pub ci: (f64, f64),
    pub n_pos: usize,
    pub n_neg: usize,
    pub is_max: bool,
}

/// Contrastive swing `P(steered | +c) − P(steered | −c)` per layer. With a
/// single direction it is used at every layer; otherwise one per layer.
pub fn layer_sweep<B: HookedBackend>(
    backend: &B,
    directions: &[Vec<f64>],
    layers: &[usize],
    coefficient: f64,
    pairs: &[TypedPair],
    persona: &str,
    trials: usize,
    cap: Option<f64>,
    seed: u64,
) -> Result<Vec<LayerSwing>> {
    if directions.len() != 1 && directions.len() != layers.len() {
        return Err(Error::invalid("need one direction or one per layer"));
    }
    let mut rows = Vec::with_capacity(layers.len());
    for (i, &layer) in layers.iter().enumerate() {
        let dir = if directions.len() == 1 { &directions[0] } else { &directions[i] };
        let cfg = SteeringConfig {
            coefficients: vec![-coefficient.abs(), coefficient.abs()],
            modes: vec![SteeringMode::BothTasksContrastive],
            layer,
            trials,
            cap,
            seed,
        };
        let res = steering_sweep(backend, dir, pairs, &[persona.to_string()], &cfg)?;
        let pool = |c: f64| -> (usize, usize) {
            res.rows
                .iter()
                .filter(|r| (r.coefficient - c).abs() < 1e-12)
                .fold((0, 0), |(s, n), r| (s + r.n_steered, n + r.n))
        };
        let (sp, np) = pool(coefficient.abs());
        let (sn, nn) = pool(-coefficient.abs());
        if np == 0 || nn == 0 {
            return Err(Error::Degenerate(format!("no valid trials at layer {layer}")));
        }
        let (pp, pn) = (sp as f64 / np as f64, sn as f64 / nn as f64);
        let ci = difference_ci(pp, wilson_ci(sp, np, 0.95)?, pn, wilson_ci(sn, nn, 0.95)?);
        rows.push(LayerSwing {
            layer,
            rate_pos: pp,
            rate_neg: pn,
            swing: pp - pn,
            ci,
            n_pos: np,
            n_neg: nn,
            is_max: false,
        });
    }
    if let Some(best) = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.swing.partial_cmp(&b.1.swing).expect("finite swing").then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
    {
        rows[best].is_max = true;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Direction ablation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub canonical: Vec<f64>,
    pub n_random: usize,
    pub layers: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub agreement: f64,
    pub ci: (f64, f64),
    pub n_agree: usize,
    pub n_pairs: usize,
    /// Pairs whose ablated modal choice was tied.
    pub n_tied: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub excluded_ambiguous_baseline: usize,
    pub controls: Vec<Vec<f64>>,
}

/// Isotropic unit vectors, reproducible under `seed`.
pub fn random_controls(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut rng = rng_for(seed, &["ablation_control", &i.to_string()]);
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            unit(&v).expect("gaussian vector is nonzero")
        })
        .collect()
}

fn modal_for<B: HookedBackend>(backend: &B, pair: &TypedPair, persona: &str, hooks: &[Hook], trials: usize, seed: u64) -> Result<Option<Slot>> {
    let ep = Episode {
        persona,
        task_a: &pair.task_a,
        task_b: &pair.task_b,
    };
    let out = backend.forward(&ep, hooks)?;
    Ok(modal(&run_trials(&out, seed, &pair.pair_id, "AB", trials)))
}

pub fn ablation_run<B: HookedBackend>(backend: &B, spec: &AblationSpec, pairs: &[TypedPair], persona: &str) -> Result<AblationReport> {
    if spec.n_random < 5 {
        return Err(Error::Config("at least 5 random controls are required".into()));
    }
    if spec.canonical.len() != backend.d() {
        return Err(Error::invalid("canonical direction length does not match backend d"));
    }
    let canonical = unit(&spec.canonical)?;
    let controls = random_controls(backend.d(), spec.n_random, spec.seed);

    let baseline: Vec<Option<Slot>> = pairs
        .par_iter()
        .map(|p| modal_for(backend, p, persona, &[], spec.trials, spec.seed))
        .collect::<Result<_>>()?;
    let excluded = baseline.iter().filter(|b| b.is_none()).count();

    let mut labelled = vec![("canonical".to_string(), canonical)];
    labelled.extend(controls.iter().enumerate().map(|(i, c)| (format!("random_{i}"), c.clone())));

    let mut rows = Vec::new();
    for (label, dir) in labelled {
        let hooks: Vec<Hook> = spec
            .layers
            .iter()
            .map(|&layer| Hook {
                layer,
                target: HookTarget::AllTokens,
                action: HookAction::ProjectOut { direction: dir.clone() },
            })
            .collect();
        let results: Vec<(bool, bool)> = pairs
            .par_iter()
            .zip(&baseline)
            .filter_map(|(p, b)| b.map(|b| (p, b)))
            .map(|(p, b)| {
                let m = modal_for(backend, p, persona, &hooks, spec.trials, spec.seed)?;
                Ok((m == Some(b), m.is_none()))
            })
            .collect::<Result<_>>()?;
        let n = results.len();
        let agree = results.iter().filter(|r| r.0).count();
        let tied = results.iter().filter(|r| r.1).count();
        rows.push(AblationRow {
            label,
            agreement: if n == 0 { f64::NAN } else { agree as f64 / n as f64 },
            ci: if n == 0 { (0.0, 1.0) } else { wilson_ci(agree, n, 0.95)? },
            n_agree: agree,
            n_pairs: n,
            n_tied: tied,
        });
    }
    Ok(AblationReport {
        rows,
        excluded_ambiguous_baseline: excluded,
        controls,
    })
}

// ---------------------------------------------------------------------------
// End-of-turn patching
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchCondition {
    SamePrompt,
    SwapBoth,
    RenameLabels,
    SwapTargetA,
    SwapTargetB,
}

impl PatchCondition {
    pub const ALL: [PatchCondition; 5] = [
        PatchCondition::SamePrompt,
        PatchCondition::SwapBoth,
        PatchCondition::RenameLabels,
        PatchCondition::SwapTargetA,
        PatchCondition::SwapTargetB,
    ];
}

impl fmt::Display for PatchCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchCondition::SamePrompt => "same_prompt",
            PatchCondition::SwapBoth => "swap_both",
            PatchCondition::RenameLabels => "rename_labels",
            PatchCondition::SwapTargetA => "swap_target_a",
            PatchCondition::SwapTargetB => "swap_target_b",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layer")]
pub enum PatchLayers {
    All,
    Single(usize),
}

impl fmt::Display for PatchLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PatchLayers::All => f.write_str("all"),
            PatchLayers::Single(l) => write!(f, "{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRow {
    pub layers: PatchLayers,
    pub condition: PatchCondition,
    pub flips: usize,
    pub n: usize,
    pub flip_rate: f64,
    pub ci: (f64, f64),
    pub skipped_inapplicable: usize,
    pub excluded_ambiguous_baseline: usize,
    /// Patched runs whose modal choice was tied (counted as no flip).
    pub patched_ties: usize,
}

/// Donor slot tasks for a recipient `(a, b)`; `partner` supplies the
/// unrelated task(s). `None` when the condition collides with the recipient.
pub fn donor_tasks<'a>(condition: PatchCondition, recipient: &'a TypedPair, partner: &'a TypedPair) -> Option<(&'a Task, &'a Task)> {
    let (a, b) = (&recipient.task_a, &recipient.task_b);
    let (c, d) = (&partner.task_a, &partner.task_b);
    let clash = |t: &Task| t.id == a.id || t.id == b.id;
    match condition {
        PatchCondition::SamePrompt | PatchCondition::RenameLabels => Some((b, a)),
        PatchCondition::SwapBoth => (!clash(c) && !clash(d)).then_some((d, c)),
        PatchCondition::SwapTargetA => (!clash(c)).then_some((c, a)),
        PatchCondition::SwapTargetB => (!clash(c)).then_some((b, c)),
    }
}

fn layer_list(layers: PatchLayers, n_layers: usize) -> Vec<usize> {
    match layers {
        PatchLayers::All => (0..n_layers).collect(),
        PatchLayers::Single(l) => vec![l],
    }
}

/// Forward the recipient with its end-of-turn activation replaced by the
/// donor's at each listed layer.
pub fn patch_pair<B: HookedBackend>(backend: &B, recipient: &Episode<'_>, donor: &Episode<'_>, layers: PatchLayers) -> Result<ForwardOutput> {
    let donor_out = backend.forward(donor, &[])?;
    let hooks: Vec<Hook> = layer_list(layers, backend.n_layers())
        .into_iter()
        .map(|layer| {
            if layer >= backend.n_layers() {
                return Err(Error::invalid(format!("patch layer {layer} outside backend")));
            }
            Ok(Hook {
                layer,
                target: HookTarget::EndOfTurn,
                action: HookAction::Replace {
                    vector: donor_out.eot(layer).to_vec(),
                },
            })
        })
        .collect::<Result<_>>()?;
    backend.forward(recipient, &hooks)
}

pub fn eot_patch_sweep<B: HookedBackend>(
    backend: &B,
    pairs: &[TypedPair],
    layer_grid: &[PatchLayers],
    conditions: &[PatchCondition],
    persona: &str,
    trials: usize,
    seed: u64,
) -> Result<Vec<PatchRow>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("patching needs at least 2 pairs"));
    }
    let n = pairs.len();
    let baseline: Vec<Option<Slot>> = pairs
        .par_iter()
        .map(|p| modal_for(backend, p, persona, &[], trials, seed))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &layers in layer_grid {
        for &condition in conditions {
            // (flip, skipped, ambiguous, patched tie)
            let results: Vec<(bool, bool, bool, bool)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let rec = &pairs[i];
                    let partner = &pairs[(i + n / 2) % n];
                    let Some((da, db)) = donor_tasks(condition, rec, partner) else {
                        return Ok((false, true, false, false));
                    };
                    let Some(base) = baseline[i] else {
                        return Ok((false, false, true, false));
                    };
                    let r_ep = Episode {
                        persona,
                        task_a: &rec.task_a,
                        task_b: &rec.task_b,
                    };
                    let d_ep = Episode {
                        persona,
                        task_a: da,
                        task_b: db,
                    };
                    let out = patch_pair(backend, &r_ep, &d_ep, layers)?;
                    let m = modal(&run_trials(&out, seed, &rec.pair_id, "AB", trials));
                    Ok((m.is_some() && m != Some(base), false, false, m.is_none()))
                })
                .collect::<Result<_>>()?;
            let skipped = results.iter().filter(|r| r.1).count();
            let ambiguous = results.iter().filter(|r| r.2).count();
            let valid: Vec<_> = results.iter().filter(|r| !r.1 && !r.2).collect();
            let flips = valid.iter().filter(|r| r.0).count();
            let ties = valid.iter().filter(|r| r.3).count();
            let nv = valid.len();
            rows.push(PatchRow {
                layers,
                condition,
                flips,
                n: nv,
                flip_rate: if nv == 0 { f64::NAN } else { flips as f64 / nv as f64 },
                ci: if nv == 0 { (0.0, 1.0) } else { wilson_ci(flips, nv, 0.95)? },
                skipped_inapplicable: skipped,
                excluded_ambiguous_baseline: ambiguous,
                patched_ties: ties,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_actions() {
        let mut x = vec![1.0, 2.0, 3.0];
        Hook {
            layer: 0,
            target: HookTarget::SpanA,
            action: HookAction::AddVector {
                vector: vec![1.0, 0.0, 0.0],
                scale: 2.0,
            },
        }
        .apply(&mut x);
        assert_eq!(x, vec![3.0, 2.0, 3.0]);
        Hook {
            layer: 0,
            target: HookTarget::SpanA,
            action: HookAction::ProjectOut {
                direction: vec![0.0, 2.0, 0.0],
            },
        }
        .apply(&mut x);
        assert_eq!(x, vec![3.0, 0.0, 3.0]);
        Hook {
            layer: 0,
            target: HookTarget::SpanA,
            action: HookAction::Replace { vector: vec![9.0; 3] },
        }
        .apply(&mut x);
        assert_eq!(x, vec![9.0; 3]);
    }

    #[test]
    fn hook_validation() {
        let ok = Hook {
            layer: 2,
            target: HookTarget::EndOfTurn,
            action: HookAction::Replace { vector: vec![0.0; 4] },
        };
        assert!(ok.validate(4, 3).is_ok());
        assert!(ok.validate(4, 2).is_err());
        assert!(ok.validate(5, 3).is_err());
        let zero = Hook {
            layer: 0,
            target: HookTarget::SpanA,
            action: HookAction::ProjectOut { direction: vec![0.0; 4] },
        };
        assert!(zero.validate(4, 3).is_err());
        let inf = Hook {
            layer: 0,
            target: HookTarget::SpanA,
            action: HookAction::AddVector {
                vector: vec![0.0; 4],
                scale: f64::INFINITY,
            },
        };
        assert!(inf.validate(4, 3).is_err());
    }

    #[test]
    fn modal_and_sampling() {
        assert_eq!(modal(&[Slot::A, Slot::B, Slot::A]), Some(Slot::A));
        assert_eq!(modal(&[Slot::A, Slot::B, Slot::Refusal]), None);
        assert_eq!(sample_slot((0.2, 0.5, 0.3), 0.1), Slot::A);
        assert_eq!(sample_slot((0.2, 0.5, 0.3), 0.6), Slot::B);
        assert_eq!(sample_slot((0.2, 0.5, 0.3), 0.8), Slot::Refusal);
        assert_eq!(trial_uniform(1, "p", "AB", 0), trial_uniform(1, "p", "AB", 0));
        assert_ne!(trial_uniform(1, "p", "AB", 0), trial_uniform(1, "p", "BA", 0));
    }

    #[test]
    fn cap_and_grid() {
        assert!(check_coefficients(&[0.06, -0.06], Some(0.06)).is_ok());
        assert!(check_coefficients(&standard_grid(), Some(0.06)).is_err());
        assert!(check_coefficients(&standard_grid(), None).is_ok());
        assert_eq!(standard_grid().len(), 9);
    }

    #[test]
    fn controls_are_reproducible_and_distinct() {
        let a = random_controls(16, 5, 3);
        assert_eq!(a, random_controls(16, 5, 3));
        for (i, v) in a.iter().enumerate() {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            for w in &a[i + 1..] {
                assert_ne!(v, w);
            }
        }
    }

    #[test]
    fn pair_types() {
        let mut h = Task::new("h", "h", "x");
        h.harm = Harm::Harmful;
        let mut b = Task::new("b", "b", "x");
        b.harm = Harm::Benign;
        assert_eq!(PairType::of(&h, &b).unwrap(), PairType::Hb);
        assert_eq!(PairType::of(&b, &b).unwrap(), PairType::Bb);
        assert_eq!(PairType::of(&h, &h).unwrap(), PairType::Hh);
        assert!(PairType::of(&h, &Task::new("u", "u", "x")).is_err());
    }

    #[test]
    fn aggregation_recomputes_from_log() {
        let t = |o| SteeringTrial {
            coefficient: 0.03,
            mode: SteeringMode::BothTasksContrastive,
            layer: 1,
            persona: "a".into(),
            pair_type: PairType::Bb,
            pair_id: "p".into(),
            ordering: Ordering::AB,
            variant: "both".into(),
            trial: 0,
            outcome: o,
        };
        let rows = aggregate_steering(&[
            t(SteerOutcome::Steered),
            t(SteerOutcome::Other),
            t(SteerOutcome::Steered),
            t(SteerOutcome::Refusal),
        ])
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].n_steered, rows[0].n, rows[0].n_refusal), (2, 3, 1));
        assert!((rows[0].chose_steered_rate - 2.0 / 3.0).abs() < 1e-15);
    }
}
