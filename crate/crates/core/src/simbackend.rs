//! A constructed linear-Gaussian backend with a transformer-shaped hook
//! interface and known ground truth.
//!
//! Layer-0 task-span activations are
//! `P⊥c + confound·t_topic + harm·h + s·u_p(task)·û_p + noise`, where `c` is
//! per-task content, `P⊥` removes every reserved direction, `û_p` is the
//! persona's unit utility direction and `u_p(task)` its ground-truth
//! utility. Each later layer applies a transport map. Between the ends of
//! the read window the end-of-turn vector accumulates the slot margin along
//! a decision direction; the margin is read at the window's last layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activationstore::{ActivationMatrix, Position};
use crate::choicemodel::{ChoiceRecord, Outcome, Utilities};
use crate::corpus::{Harm, Ordering, PairSchedule, Task, TaskTable, ASSISTANT};
use crate::error::{Error, Result};
use crate::interventions::{sample_slot, trial_uniform, Episode, ForwardOutput, Hook, HookedBackend, Slot};
use crate::seeding::rng_for;
use crate::statlab::norm_cdf;

pub const MODEL_ID: &str = "synthetic";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Identity,
    Rotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicBoost {
    pub topic: String,
    /// Added to the persona's utility for every task in `topic`.
    pub gain: f64,
    /// Multiplies the persona's base utility on tasks in `topic`.
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonaSpec {
    pub name: String,
    pub gain: f64,
    /// Weight β of the shared planted direction in `normalize(β·v̄ + (1−β)·n_p)`.
    pub overlap: f64,
    pub own_seed: u64,
    /// Utility weight on the harm component.
    pub harm_gain: f64,
    pub topic_boost: Option<TopicBoost>,
}

impl Default for PersonaSpec {
    fn default() -> Self {
        PersonaSpec {
            name: ASSISTANT.to_string(),
            gain: 1.0,
            overlap: 1.0,
            own_seed: 0,
            harm_gain: 0.0,
            topic_boost: None,
        }
    }
}

impl PersonaSpec {
    pub fn new(name: &str, gain: f64, overlap: f64) -> Self {
        PersonaSpec {
            name: name.to_string(),
            gain,
            overlap,
            ..PersonaSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub d: usize,
    pub n_layers: usize,
    pub transport: Transport,
    pub planted_seed: u64,
    pub noise_scale: f64,
    pub topic_confound_strength: f64,
    pub content_scale: f64,
    pub harm_strength: f64,
    pub personas: Vec<PersonaSpec>,
    /// Number of orthogonal planted directions sharing the utility signal.
    pub redundancy: usize,
    /// `[ℓa, ℓb]`; the margin is read at `ℓb`.
    pub read_window: (usize, usize),
    pub refusal_rate: f64,
    /// `s`, the utility-to-activation gain along the persona direction.
    pub signal_gain: f64,
    /// Multiplies readout differences into the decision margin.
    pub margin_gain: f64,
    /// Share of the final margin re-read from the task spans at `ℓb`; the
    /// remainder comes from the end-of-turn vector.
    pub span_readout_weight: f64,
    pub signal_positions: Vec<Position>,
    /// Topics with reserved orthogonal directions.
    pub topics: Vec<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            d: 64,
            n_layers: 12,
            transport: Transport::Identity,
            planted_seed: 0,
            noise_scale: 0.5,
            topic_confound_strength: 0.0,
            content_scale: 1.0,
            harm_strength: 1.0,
            personas: vec![PersonaSpec::default()],
            redundancy: 1,
            read_window: (6, 9),
            refusal_rate: 0.0,
            signal_gain: 2.0,
            margin_gain: 1.0,
            span_readout_weight: 0.0,
            signal_positions: Position::ALL.to_vec(),
            topics: topic_names(14),
        }
    }
}

pub fn topic_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("topic{i:02}")).collect()
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d < 2 || self.n_layers == 0 {
            return bad("need d >= 2 and n_layers >= 1");
        }
        let (a, b) = self.read_window;
        if !(a <= b && b < self.n_layers) {
            return bad("read_window must satisfy a <= b < n_layers");
        }
        if self.redundancy == 0 || self.redundancy > self.d {
            return bad("redundancy must lie in [1, d]");
        }
        if self.personas.is_empty() {
            return bad("at least one persona is required");
        }
        let mut names = BTreeSet::new();
        for p in &self.personas {
            if !(0.0..=1.0).contains(&p.overlap) {
                return bad("persona overlap must lie in [0, 1]");
            }
            if !names.insert(p.name.as_str()) {
                return Err(Error::DuplicateId(p.name.clone()));
            }
        }
        if !(0.0..1.0).contains(&self.refusal_rate) {
            return bad("refusal_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.span_readout_weight) {
            return bad("span_readout_weight must lie in [0, 1]");
        }
        if self.noise_scale < 0.0 || self.content_scale < 0.0 || !(self.signal_gain > 0.0) {
            return bad("noise_scale and content_scale must be >= 0, signal_gain > 0");
        }
        Ok(())
    }
}

struct PersonaState {
    spec: PersonaSpec,
    dir: Vec<f64>,
}

pub struct SimBackend {
    config: BackendConfig,
    seed: u64,
    planted: Vec<Vec<f64>>,
    delta: Vec<f64>,
    harm: Vec<f64>,
    personas: HashMap<String, PersonaState>,
    topics: HashMap<String, Vec<f64>>,
    /// Orthonormal basis of every reserved direction.
    reserved: Vec<Vec<f64>>,
    template: Vec<f64>,
    /// `M_ℓ`, the composed transport to layer ℓ; empty for identity.
    transport: Vec<DMatrix<f64>>,
    /// `Q_ℓ`, the single-layer step; index 0 unused.
    steps: Vec<DMatrix<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn gaussian(d: usize, seed: u64, labels: &[&str]) -> Vec<f64> {
    let mut rng = rng_for(seed, labels);
    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn project_off(v: &mut [f64], basis: &[Vec<f64>]) {
    // two passes of modified Gram-Schmidt
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            axpy(v, -c, b);
        }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Orthonormalise a fresh Gaussian vector against `basis`.
fn fresh_direction(d: usize, seed: u64, labels: &[&str], basis: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut v = gaussian(d, seed, labels);
    project_off(&mut v, basis);
    if normalize(&mut v) < 1e-6 {
        return Err(Error::Config(format!("d = {d} is too small for the reserved directions")));
    }
    Ok(v)
}

fn random_orthogonal(d: usize, seed: u64, layer: usize) -> DMatrix<f64> {
    let g = gaussian(d * d, seed, &["rotation", &layer.to_string()]);
    let m = DMatrix::from_column_slice(d, d, &g);
    let qr = m.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the draw Haar-distributed and deterministic
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (m * DVector::from_column_slice(v)).iter().copied().collect()
}

impl SimBackend {
    pub fn build(config: BackendConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let ps = config.planted_seed.to_string();
        let mut reserved: Vec<Vec<f64>> = Vec::new();
        let mut planted = Vec::with_capacity(config.redundancy);
        for i in 0..config.redundancy {
            let v = fresh_direction(d, seed, &["planted", &ps, &i.to_string()], &reserved)?;
            reserved.push(v.clone());
            planted.push(v);
        }
        let delta = fresh_direction(d, seed, &["decision"], &reserved)?;
        reserved.push(delta.clone());
        let harm = fresh_direction(d, seed, &["harm"], &reserved)?;
        reserved.push(harm.clone());

        let mut vbar = vec![0.0; d];
        for v in &planted {
            axpy(&mut vbar, 1.0 / (config.redundancy as f64).sqrt(), v);
        }

        let mut personas = HashMap::new();
        for p in &config.personas {
            let own = fresh_direction(d, seed, &["persona", &p.name, &p.own_seed.to_string()], &reserved)?;
            reserved.push(own.clone());
            let mut dir: Vec<f64> = vbar.iter().zip(&own).map(|(v, n)| p.overlap * v + (1.0 - p.overlap) * n).collect();
            normalize(&mut dir);
            personas.insert(p.name.clone(), PersonaState { spec: p.clone(), dir });
        }

        let mut topics = HashMap::new();
        let uniq: BTreeSet<&String> = config.topics.iter().collect();
        for t in &config.topics {
            if !uniq.contains(t) {
                continue;
            }
            if topics.contains_key(t) {
                continue;
            }
            let v = fresh_direction(d, seed, &["topic", t], &reserved)?;
            reserved.push(v.clone());
            topics.insert(t.clone(), v);
        }
        if reserved.len() >= d {
            return Err(Error::Config(format!(
                "{} reserved directions leave no content space in d = {d}",
                reserved.len()
            )));
        }

        let mut template = gaussian(d, seed, &["template"]);
        project_off(&mut template, &reserved);
        template.iter_mut().for_each(|x| *x *= config.content_scale);

        let (transport, steps) = match config.transport {
            Transport::Identity => (Vec::new(), Vec::new()),
            Transport::Rotation => {
                let mut steps = vec![DMatrix::identity(d, d)];
                let mut transport = vec![DMatrix::identity(d, d)];
                for l in 1..config.n_layers {
                    let q = random_orthogonal(d, seed, l);
                    let m = &q * &transport[l - 1];
                    steps.push(q);
                    transport.push(m);
                }
                (transport, steps)
            }
        };

        Ok(SimBackend {
            config,
            seed,
            planted,
            delta,
            harm,
            personas,
            topics,
            reserved,
            template,
            transport,
            steps,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Planted unit directions at layer 0.
    pub fn planted_directions(&self) -> &[Vec<f64>] {
        &self.planted
    }

    /// `v̄ = Σ v*_i / √k`.
    pub fn mean_planted(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.config.d];
        for p in &self.planted {
            axpy(&mut v, 1.0 / (self.planted.len() as f64).sqrt(), p);
        }
        v
    }

    pub fn decision_direction(&self) -> &[f64] {
        &self.delta
    }

    pub fn harm_direction(&self) -> &[f64] {
        &self.harm
    }

    pub fn topic_direction(&self, topic: &str) -> Option<&[f64]> {
        self.topics.get(topic).map(Vec::as_slice)
    }

    fn persona(&self, name: &str) -> Result<&PersonaState> {
        self.personas
            .get(name)
            .ok_or_else(|| Error::invalid(format!("backend has no persona {name:?}")))
    }

    /// Unit utility direction of a persona at layer 0.
    pub fn persona_direction(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.persona(name)?.dir)
    }

    /// A layer-0 vector carried to `layer`.
    pub fn at_layer(&self, v: &[f64], layer: usize) -> Vec<f64> {
        if self.transport.is_empty() || layer == 0 {
            v.to_vec()
        } else {
            matvec(&self.transport[layer], v)
        }
    }

    fn step(&self, v: &mut Vec<f64>, layer: usize) {
        if !self.steps.is_empty() && layer > 0 {
            *v = matvec(&self.steps[layer], v);
        }
    }

    fn raw_content(&self, task: &Task) -> Vec<f64> {
        let mut c = gaussian(self.config.d, self.seed, &["content", &task.id]);
        c.iter_mut().for_each(|x| *x *= self.config.content_scale);
        c
    }

    fn harm_term(&self, task: &Task) -> f64 {
        if task.harm == Harm::Harmful {
            self.config.harm_strength
        } else {
            0.0
        }
    }

    fn topic_vec(&self, task: &Task) -> Result<Option<&Vec<f64>>> {
        if self.config.topic_confound_strength == 0.0 {
            return Ok(None);
        }
        match self.topics.get(&task.topic) {
            Some(t) => Ok(Some(t)),
            None => Err(Error::invalid(format!("topic {:?} has no reserved direction", task.topic))),
        }
    }

    /// Ground-truth utility of `task` for `persona`.
    pub fn utility(&self, persona: &str, task: &Task) -> Result<f64> {
        let p = self.persona(persona)?;
        let c = self.raw_content(task);
        let mut u = p.spec.gain * dot(&p.dir, &c) + p.spec.harm_gain * self.harm_term(task);
        if let Some(b) = &p.spec.topic_boost {
            if b.topic == task.topic {
                u = b.scale * u + b.gain;
            }
        }
        Ok(u)
    }

    pub fn utilities(&self, tasks: &TaskTable, persona: &str) -> Result<Utilities> {
        let values = tasks.tasks().iter().map(|t| self.utility(persona, t)).collect::<Result<Vec<_>>>()?;
        Utilities::new(tasks.ids(), values)
    }

    /// Layer-0 activation of one task at one position, without the
    /// end-of-turn decision component.
    fn base_activation(&self, persona: &str, task: &Task, position: Position) -> Result<Vec<f64>> {
        let p = self.persona(persona)?;
        let mut x = self.raw_content(task);
        project_off(&mut x, &self.reserved);
        if let Some(t) = self.topic_vec(task)? {
            axpy(&mut x, self.config.topic_confound_strength, t);
        }
        axpy(&mut x, self.harm_term(task), &self.harm);
        if self.config.signal_positions.contains(&position) {
            let u = self.utility(persona, task)?;
            axpy(&mut x, self.config.signal_gain * u, &p.dir);
        }
        if self.config.noise_scale > 0.0 {
            let pos = match position {
                Position::TaskAveraged => "span",
                other => other.as_str(),
            };
            let n = gaussian(self.config.d, self.seed, &["noise", persona, &task.id, pos]);
            axpy(&mut x, self.config.noise_scale, &n);
        }
        Ok(x)
    }

    /// Task-span activation at layer 0.
    pub fn span_activation(&self, persona: &str, task: &Task) -> Result<Vec<f64>> {
        self.base_activation(persona, task, Position::TaskAveraged)
    }

    /// Single-task activation at `(layer, position)`. End-of-turn rows at
    /// layers inside or after the window carry the task's readout along the
    /// decision direction.
    pub fn task_activation(&self, persona: &str, task: &Task, layer: usize, position: Position) -> Result<Vec<f64>> {
        if layer >= self.config.n_layers {
            return Err(Error::invalid(format!("layer {layer} outside backend")));
        }
        let mut x = self.base_activation(persona, task, position)?;
        if position == Position::EndOfTurn && layer >= self.config.read_window.0 && self.config.signal_positions.contains(&position) {
            let dir = &self.persona(persona)?.dir;
            let r = dot(&x, dir) / self.config.signal_gain;
            axpy(&mut x, self.config.signal_gain * r, &self.delta);
        }
        Ok(self.at_layer(&x, layer))
    }

    pub fn export_activations(&self, tasks: &TaskTable, persona: &str, layer: usize, position: Position) -> Result<ActivationMatrix> {
        use rayon::prelude::*;
        let rows: Vec<Vec<f64>> = tasks
            .tasks()
            .par_iter()
            .map(|t| self.task_activation(persona, t, layer, position))
            .collect::<Result<_>>()?;
        ActivationMatrix::from_rows(MODEL_ID, persona, layer, position, tasks.ids(), &rows)
    }

    /// Sample choices for every schedule entry. Outcomes are drawn from
    /// [`forward`](HookedBackend::forward) with one uniform per
    /// `(seed, pair_id, ordering, trial)`.
    pub fn elicit_choices(&self, schedule: &PairSchedule, tasks: &TaskTable, seed: u64) -> Result<Vec<ChoiceRecord>> {
        use rayon::prelude::*;
        let per_entry: Vec<Vec<ChoiceRecord>> = schedule
            .entries
            .par_iter()
            .map(|e| {
                let ta = tasks.get(&e.task_a).ok_or_else(|| Error::UnknownTask(e.task_a.clone()))?;
                let tb = tasks.get(&e.task_b).ok_or_else(|| Error::UnknownTask(e.task_b.clone()))?;
                let (first, second) = match e.ordering {
                    Ordering::AB => (ta, tb),
                    Ordering::BA => (tb, ta),
                };
                let out = self.forward(
                    &Episode {
                        persona: &e.persona,
                        task_a: first,
                        task_b: second,
                    },
                    &[],
                )?;
                let ord = e.ordering.to_string();
                Ok((0..e.n_trials)
                    .map(|t| {
                        let slot = sample_slot(out.choice_probs, trial_uniform(seed, &e.pair_id, &ord, t));
                        let outcome = match (slot, e.ordering) {
                            (Slot::Refusal, _) => Outcome::Refusal,
                            (Slot::A, Ordering::AB) | (Slot::B, Ordering::BA) => Outcome::A,
                            _ => Outcome::B,
                        };
                        ChoiceRecord {
                            pair_id: e.pair_id.clone(),
                            task_a: e.task_a.clone(),
                            task_b: e.task_b.clone(),
                            ordering: e.ordering,
                            persona: e.persona.clone(),
                            outcome,
                        }
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per_entry.into_iter().flatten().collect())
    }
}

impl HookedBackend for SimBackend {
    fn d(&self) -> usize {
        self.config.d
    }

    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn forward(&self, episode: &Episode<'_>, hooks: &[Hook]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        for h in hooks {
            h.validate(cfg.d, cfg.n_layers)?;
        }
        let p = self.persona(episode.persona)?;
        let mut a = self.span_activation(episode.persona, episode.task_a)?;
        let mut b = self.span_activation(episode.persona, episode.task_b)?;
        let mut e = self.template.clone();
        let (la, lb) = cfg.read_window;
        let mut by_layer: BTreeMap<usize, Vec<&Hook>> = BTreeMap::new();
        for h in hooks {
            by_layer.entry(h.layer).or_default().push(h);
        }

        let mut acts = Vec::with_capacity(cfg.n_layers);
        let mut m_prev = 0.0;
        let mut margin = 0.0;
        for l in 0..cfg.n_layers {
            self.step(&mut a, l);
            self.step(&mut b, l);
            self.step(&mut e, l);
            let hs = by_layer.get(&l).map(Vec::as_slice).unwrap_or(&[]);
            for h in hs {
                if h.target.hits_span_a() {
                    h.apply(&mut a);
                }
                if h.target.hits_span_b() {
                    h.apply(&mut b);
                }
            }
            let u = self.at_layer(&p.dir, l);
            let delta = self.at_layer(&self.delta, l);
            let m = cfg.margin_gain * (dot(&a, &u) - dot(&b, &u)) / cfg.signal_gain;
            if l == la {
                let cur = dot(&e, &delta);
                axpy(&mut e, m - cur, &delta);
            } else if l > la && l <= lb {
                axpy(&mut e, m - m_prev, &delta);
            }
            m_prev = m;
            for h in hs {
                if h.target.hits_eot() {
                    h.apply(&mut e);
                }
            }
            if l == lb {
                margin = (1.0 - cfg.span_readout_weight) * dot(&e, &delta) + cfg.span_readout_weight * m;
            }
            acts.push([a.clone(), b.clone(), e.clone()]);
        }
        let keep = 1.0 - cfg.refusal_rate;
        let pa = norm_cdf(margin / std::f64::consts::SQRT_2);
        Ok(ForwardOutput {
            activations: acts,
            decision_margin: margin,
            choice_probs: (pa * keep, (1.0 - pa) * keep, cfg.refusal_rate),
        })
    }

    fn mean_norm(&self, tasks: &[Task], persona: &str, layer: usize) -> Result<f64> {
        if tasks.is_empty() {
            return Err(Error::Degenerate("no tasks for mean norm".into()));
        }
        if layer >= self.config.n_layers {
            return Err(Error::invalid(format!("layer {layer} outside backend")));
        }
        // transport maps are orthogonal, so the layer does not change norms
        let mut total = 0.0;
        for t in tasks {
            let x = self.span_activation(persona, t)?;
            total += dot(&x, &x).sqrt();
        }
        Ok(total / tasks.len() as f64)
    }
}

/// `n` tasks spread round-robin over `n_topics` topics, each harmful with
/// probability `harmful_fraction`.
pub fn synthetic_tasks(n: usize, n_topics: usize, harmful_fraction: f64, seed: u64) -> Result<TaskTable> {
    if n_topics == 0 {
        return Err(Error::invalid("n_topics must be >= 1"));
    }
    let topics = topic_names(n_topics);
    let tasks = (0..n)
        .map(|i| {
            let id = format!("task{i:05}");
            let mut t = Task::new(id.clone(), format!("synthetic task {i}"), topics[i % n_topics].clone());
            let u: f64 = rng_for(seed, &["harm_label", &id]).random();
            t.harm = if u < harmful_fraction { Harm::Harmful } else { Harm::Benign };
            t
        })
        .collect();
    TaskTable::new(tasks)
}

/// Benign and harmful copies of every task, sharing ids.
pub fn harm_twins(tasks: &TaskTable) -> Result<(TaskTable, TaskTable)> {
    let with = |h: Harm| TaskTable::new(tasks.tasks().iter().map(|t| Task { harm: h, ..t.clone() }).collect());
    Ok((with(Harm::Benign)?, with(Harm::Harmful)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interventions::{HookAction, HookTarget};
    use crate::statlab::pearson;

    fn zero_noise() -> BackendConfig {
        BackendConfig {
            noise_scale: 0.0,
            ..BackendConfig::default()
        }
    }

    fn tasks(n: usize) -> TaskTable {
        synthetic_tasks(n, 14, 0.0, 1).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let t = tasks(20);
        let a = SimBackend::build(BackendConfig::default(), 5).unwrap();
        let b = SimBackend::build(BackendConfig::default(), 5).unwrap();
        let x = a.export_activations(&t, ASSISTANT, 3, Position::EndOfTurn).unwrap();
        assert_eq!(x, b.export_activations(&t, ASSISTANT, 3, Position::EndOfTurn).unwrap());
        let c = SimBackend::build(BackendConfig::default(), 6).unwrap();
        assert_ne!(x, c.export_activations(&t, ASSISTANT, 3, Position::EndOfTurn).unwrap());
    }

    #[test]
    fn config_errors() {
        let bad = BackendConfig {
            redundancy: 65,
            ..BackendConfig::default()
        };
        assert!(SimBackend::build(bad, 0).is_err());
        let bad = BackendConfig {
            read_window: (9, 6),
            ..BackendConfig::default()
        };
        assert!(SimBackend::build(bad, 0).is_err());
        let bad = BackendConfig {
            d: 8,
            ..BackendConfig::default()
        };
        assert!(SimBackend::build(bad, 0).is_err());
    }

    #[test]
    fn overlap_extremes() {
        let cfg = BackendConfig {
            personas: vec![
                PersonaSpec::default(),
                PersonaSpec::new("same", 1.0, 1.0),
                PersonaSpec::new("other", 1.0, 0.0),
            ],
            ..zero_noise()
        };
        let be = SimBackend::build(cfg, 2).unwrap();
        assert_eq!(be.persona_direction("same").unwrap(), be.persona_direction(ASSISTANT).unwrap());
        let t = tasks(2000);
        let ua = be.utilities(&t, ASSISTANT).unwrap().values;
        let uo = be.utilities(&t, "other").unwrap().values;
        assert!(pearson(&ua, &uo).unwrap().r.abs() < 0.1);
    }

    #[test]
    fn equal_utilities_give_equal_probabilities() {
        let be = SimBackend::build(BackendConfig::default(), 3).unwrap();
        let t = tasks(2);
        let task = &t.tasks()[0];
        let out = be
            .forward(
                &Episode {
                    persona: ASSISTANT,
                    task_a: task,
                    task_b: task,
                },
                &[],
            )
            .unwrap();
        assert_eq!(out.choice_probs.0, out.choice_probs.1);
    }

    fn episode<'a>(t: &'a TaskTable, i: usize, j: usize) -> Episode<'a> {
        Episode {
            persona: ASSISTANT,
            task_a: &t.tasks()[i],
            task_b: &t.tasks()[j],
        }
    }

    #[test]
    fn eot_replacement_window() {
        let be = SimBackend::build(zero_noise(), 4).unwrap();
        let t = tasks(4);
        let rec = episode(&t, 0, 1);
        let donor = episode(&t, 1, 0);
        let base = be.forward(&rec, &[]).unwrap();
        let don = be.forward(&donor, &[]).unwrap();
        // margin arithmetic: the donor carries the opposite margin
        assert!((base.decision_margin + don.decision_margin).abs() < 1e-9);
        let replace = |l: usize| Hook {
            layer: l,
            target: HookTarget::EndOfTurn,
            action: HookAction::Replace { vector: don.eot(l).to_vec() },
        };
        let (la, lb) = be.config().read_window;
        for l in la..=lb {
            let out = be.forward(&rec, &[replace(l)]).unwrap();
            assert!((out.choice_probs.0 - base.choice_probs.1).abs() < 1e-9, "layer {l}");
            assert!((out.choice_probs.1 - base.choice_probs.0).abs() < 1e-9);
        }
        for l in (lb + 1)..be.config().n_layers {
            let out = be.forward(&rec, &[replace(l)]).unwrap();
            assert!((out.choice_probs.0 - base.choice_probs.0).abs() < 1e-12);
        }
    }

    #[test]
    fn steering_is_monotone_before_window() {
        let be = SimBackend::build(zero_noise(), 5).unwrap();
        let t = tasks(2);
        let ep = episode(&t, 0, 1);
        let v = be.persona_direction(ASSISTANT).unwrap().to_vec();
        let mut last = f64::NEG_INFINITY;
        for c in [-0.1, -0.05, 0.0, 0.03, 0.06, 0.1] {
            let hook = Hook {
                layer: 2,
                target: HookTarget::SpanA,
                action: HookAction::AddVector {
                    vector: v.clone(),
                    scale: c * 8.0,
                },
            };
            let m = be.forward(&ep, &[hook]).unwrap().decision_margin;
            assert!(m > last);
            last = m;
        }
        // after the window a span edit changes nothing
        let hook = Hook {
            layer: 11,
            target: HookTarget::SpanA,
            action: HookAction::AddVector { vector: v, scale: 5.0 },
        };
        let base = be.forward(&ep, &[]).unwrap().decision_margin;
        assert_eq!(be.forward(&ep, &[hook]).unwrap().decision_margin, base);
    }

    #[test]
    fn ablation_ground_truth() {
        let t = tasks(40);
        let rank1 = SimBackend::build(zero_noise(), 6).unwrap();
        let v = rank1.planted_directions()[0].clone();
        let hooks: Vec<Hook> = (0..rank1.config().read_window.0)
            .map(|l| Hook {
                layer: l,
                target: HookTarget::AllTokens,
                action: HookAction::ProjectOut { direction: v.clone() },
            })
            .collect();
        for i in 0..20 {
            let m = rank1.forward(&episode(&t, i, i + 20), &hooks).unwrap().decision_margin;
            assert!(m.abs() < 1e-9);
        }
        let red = SimBackend::build(
            BackendConfig {
                redundancy: 3,
                ..zero_noise()
            },
            6,
        )
        .unwrap();
        let v = red.planted_directions()[1].clone();
        let hooks = [Hook {
            layer: 0,
            target: HookTarget::AllTokens,
            action: HookAction::ProjectOut { direction: v },
        }];
        for i in 0..20 {
            let base = red.forward(&episode(&t, i, i + 20), &[]).unwrap().decision_margin;
            let m = red.forward(&episode(&t, i, i + 20), &hooks).unwrap().decision_margin;
            assert_eq!(base.signum(), m.signum());
            assert!((m - base * 2.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_transport_composes() {
        let cfg = BackendConfig {
            transport: Transport::Rotation,
            d: 16,
            topics: vec![],
            ..zero_noise()
        };
        let be = SimBackend::build(cfg, 7).unwrap();
        let v = be.planted_directions()[0].clone();
        // matrix-product oracle: apply each step in turn
        let mut w = DVector::from_column_slice(&v);
        for l in 1..be.config().n_layers {
            w = &be.steps[l] * w;
            let got = be.at_layer(&v, l);
            for (a, b) in got.iter().zip(w.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let q = &be.steps[3];
        assert!(((q.transpose() * q) - DMatrix::<f64>::identity(16, 16)).abs().max() < 1e-12);
    }

    #[test]
    fn choices_follow_margins() {
        let cfg = BackendConfig {
            margin_gain: 100.0,
            ..zero_noise()
        };
        let be = SimBackend::build(cfg, 8).unwrap();
        let t = tasks(30);
        let sched = crate::corpus::pair_schedule(&t, 3, true, 5, 8).unwrap();
        let recs = be.elicit_choices(&sched, &t, 8).unwrap();
        for r in &recs {
            let ua = be.utility(ASSISTANT, t.get(&r.task_a).unwrap()).unwrap();
            let ub = be.utility(ASSISTANT, t.get(&r.task_b).unwrap()).unwrap();
            if (ua - ub).abs() > 0.1 {
                assert_eq!(r.outcome == Outcome::A, ua > ub);
            }
        }
        assert_eq!(recs, be.elicit_choices(&sched, &t, 8).unwrap());
    }

    #[test]
    fn refusal_fraction() {
        let cfg = BackendConfig {
            refusal_rate: 0.1,
            ..BackendConfig::default()
        };
        let be = SimBackend::build(cfg, 9).unwrap();
        let t = tasks(100);
        let sched = crate::corpus::pair_schedule(&t, 10, true, 5, 9).unwrap();
        let recs = be.elicit_choices(&sched, &t, 9).unwrap();
        let n = recs.len() as f64;
        let k = recs.iter().filter(|r| r.outcome == Outcome::Refusal).count() as f64;
        // 4-sigma binomial bound
        assert!((k / n - 0.1).abs() < 4.0 * (0.09 / n).sqrt());
    }

    #[test]
    fn twins_differ_only_in_harm() {
        let t = tasks(5);
        let (b, h) = harm_twins(&t).unwrap();
        assert_eq!(b.ids(), h.ids());
        assert!(h.tasks().iter().all(|t| t.harm == Harm::Harmful));
        let cfg = BackendConfig {
            personas: vec![PersonaSpec {
                harm_gain: -2.0,
                ..PersonaSpec::default()
            }],
            ..zero_noise()
        };
        let be = SimBackend::build(cfg, 10).unwrap();
        let du = be.utility(ASSISTANT, &h.tasks()[0]).unwrap() - be.utility(ASSISTANT, &b.tasks()[0]).unwrap();
        assert!((du + 2.0).abs() < 1e-12);
    }
}
