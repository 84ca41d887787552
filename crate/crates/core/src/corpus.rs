//! Task pools, personas, stratified splits, and pair schedules.
//!
//! All files are line-delimited JSON, one record per line.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::rng_for;

/// Name of the default persona. It always runs with an empty system prompt.
pub const ASSISTANT: &str = "assistant";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Harm {
    Benign,
    Harmful,
    Unknown,
}

impl FromStr for Harm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "benign" => Ok(Harm::Benign),
            "harmful" => Ok(Harm::Harmful),
            "unknown" => Ok(Harm::Unknown),
            other => Err(Error::UnknownEnum {
                field: "harm",
                value: other.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub text: String,
    pub topic: String,
    pub source: String,
    pub harm: Harm,
}

impl Task {
    pub fn new(id: impl Into<String>, text: impl Into<String>, topic: impl Into<String>) -> Self {
        Task {
            id: id.into(),
            text: text.into(),
            topic: topic.into(),
            source: "synthetic".into(),
            harm: Harm::Unknown,
        }
    }
}

#[derive(Deserialize)]
struct RawTask {
    id: String,
    text: String,
    topic: String,
    source: String,
    harm: String,
}

/// Closed label sets that tasks must draw from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub topics: BTreeSet<String>,
    pub sources: BTreeSet<String>,
}

/// Validated collection of tasks with unique ids, in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTable {
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
}

impl TaskTable {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if t.text.is_empty() {
                return Err(Error::invalid(format!("task {:?} has empty text", t.id)));
            }
            if index.insert(t.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.id.clone()));
            }
        }
        Ok(TaskTable { tasks, index })
    }

    pub fn with_vocabulary(tasks: Vec<Task>, vocab: &Vocabulary) -> Result<Self> {
        for t in &tasks {
            if !vocab.topics.contains(&t.topic) {
                return Err(Error::UnknownEnum {
                    field: "topic",
                    value: t.topic.clone(),
                });
            }
            if !vocab.sources.contains(&t.source) {
                return Err(Error::UnknownEnum {
                    field: "source",
                    value: t.source.clone(),
                });
            }
        }
        Self::new(tasks)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.index.get(id).map(|&i| &self.tasks[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.id.clone()).collect()
    }

    /// Distinct topics, sorted.
    pub fn topics(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.tasks.iter().map(|t| t.topic.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn topic_count(&self) -> usize {
        self.topics().len()
    }

    /// Subset table in the order of `ids`.
    pub fn subset(&self, ids: &[String]) -> Result<TaskTable> {
        let missing: Vec<String> = ids.iter().filter(|i| !self.index.contains_key(*i)).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::MissingIds(missing));
        }
        TaskTable::new(ids.iter().map(|i| self.tasks[self.index[i]].clone()).collect())
    }

    /// Line-delimited serialization sorted by id, so equal tables serialize
    /// identically regardless of input order.
    pub fn to_jsonl(&self) -> String {
        let mut sorted: Vec<&Task> = self.tasks.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut out = String::new();
        for t in sorted {
            out.push_str(&serde_json::to_string(t).expect("task serializes"));
            out.push('\n');
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

/// Parse a JSON-lines document into records, reporting 1-based line numbers.
pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(line, l)| serde_json::from_str(&l).map_err(|e| Error::Parse { line, msg: e.to_string() }))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_tasks(text: &str) -> Result<TaskTable> {
    parse_tasks_with(text, None)
}

pub fn parse_tasks_with(text: &str, vocab: Option<&Vocabulary>) -> Result<TaskTable> {
    let raws: Vec<RawTask> = parse_jsonl(text)?;
    let mut tasks = Vec::with_capacity(raws.len());
    for r in raws {
        tasks.push(Task {
            harm: r.harm.parse()?,
            id: r.id,
            text: r.text,
            topic: r.topic,
            source: r.source,
        });
    }
    match vocab {
        Some(v) => TaskTable::with_vocabulary(tasks, v),
        None => TaskTable::new(tasks),
    }
}

pub fn load_tasks(path: &Path) -> Result<TaskTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tasks(&text)
}

pub fn write_tasks(table: &TaskTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_jsonl()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Personas
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    #[serde(default)]
    pub system_prompt: String,
}

impl Persona {
    pub fn assistant() -> Self {
        Persona {
            name: ASSISTANT.into(),
            system_prompt: String::new(),
        }
    }
}

pub fn validate_personas(personas: &[Persona]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in personas {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::DuplicateId(p.name.clone()));
        }
        if p.name == ASSISTANT && !p.system_prompt.is_empty() {
            return Err(Error::invalid("the assistant persona must have an empty system prompt"));
        }
    }
    Ok(())
}

pub fn load_personas(path: &Path) -> Result<Vec<Persona>> {
    let personas: Vec<Persona> = read_jsonl(path)?;
    validate_personas(&personas)?;
    Ok(personas)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub seed: u64,
    /// (topic, source) cells used for stratification.
    pub strata: Vec<(String, String)>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    task_id: String,
    split: Split,
    seed: u64,
}

impl SplitAssignment {
    /// Assignment built directly from a map, e.g. for internal folds.
    pub fn from_map(assignments: BTreeMap<String, Split>, seed: u64) -> Self {
        SplitAssignment {
            assignments,
            seed,
            strata: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<Split> {
        self.assignments.get(id).copied()
    }

    /// Ids in `split`, sorted.
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.assignments.iter().filter(|(_, s)| **s == split).map(|(k, _)| k.clone()).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|s| **s == split).count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, s) in &self.assignments {
            let rec = SplitRecord {
                task_id: id.clone(),
                split: *s,
                seed: self.seed,
            };
            out.push_str(&serde_json::to_string(&rec).expect("split record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let recs: Vec<SplitRecord> = parse_jsonl(text)?;
        let seed = recs.first().map(|r| r.seed).unwrap_or(0);
        let mut assignments = BTreeMap::new();
        for r in recs {
            if assignments.insert(r.task_id.clone(), r.split).is_some() {
                return Err(Error::DuplicateId(r.task_id));
            }
        }
        Ok(SplitAssignment::from_map(assignments, seed))
    }
}

/// Split a table into train/test/validation, stratified jointly on
/// (topic, source).
///
/// Within each stratum every split count is `floor(f·n)` or `floor(f·n)+1`;
/// leftover units go to whichever split is furthest below its global target,
/// so global totals also match `f·N` up to rounding. A stratum with fewer
/// members than there are nonzero splits is put entirely in train and
/// reported in `warnings`.
pub fn stratified_split(table: &TaskTable, fractions: &[(Split, f64)], seed: u64) -> Result<SplitAssignment> {
    let total: f64 = fractions.iter().map(|(_, f)| f).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    if fractions.iter().any(|(_, f)| *f < 0.0) {
        return Err(Error::invalid("negative split fraction"));
    }
    let mut seen = HashSet::new();
    if fractions.iter().any(|(s, _)| !seen.insert(*s)) {
        return Err(Error::invalid("split listed twice"));
    }
    let active: Vec<(Split, f64)> = fractions.iter().copied().filter(|(_, f)| *f > 0.0).collect();

    let mut strata: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for t in table.tasks() {
        strata.entry((t.topic.clone(), t.source.clone())).or_default().push(t.id.clone());
    }

    let n_total = table.len() as f64;
    // global targets by largest remainder
    let global_target = largest_remainder(&active.iter().map(|(_, f)| f * n_total).collect::<Vec<_>>());

    let mut assignments = BTreeMap::new();
    let mut warnings = Vec::new();
    // (shuffled ids, quotas, floor counts)
    let mut plans: Vec<(Vec<String>, Vec<f64>, Vec<usize>)> = Vec::new();

    for ((topic, source), mut ids) in strata.clone() {
        ids.sort();
        let mut rng = rng_for(seed, &["split", &topic, &source]);
        ids.shuffle(&mut rng);
        let n = ids.len();
        if n < active.len() {
            warnings.push(format!(
                "degenerate stratum ({topic}, {source}): {n} tasks for {} splits; assigned to train",
                active.len()
            ));
            for id in ids {
                assignments.insert(id, Split::Train);
            }
            continue;
        }
        let quotas: Vec<f64> = active.iter().map(|(_, f)| f * n as f64).collect();
        let floors: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        plans.push((ids, quotas, floors));
    }

    // remaining units each split still needs after all floors
    let mut need: Vec<i64> = global_target.iter().map(|&t| t as i64).collect();
    for (_, _, floors) in &plans {
        for (n, f) in need.iter_mut().zip(floors) {
            *n -= *f as i64;
        }
    }
    let mut final_plans = Vec::with_capacity(plans.len());
    for (ids, quotas, mut counts) in plans {
        let leftover = ids.len() - counts.iter().sum::<usize>();
        let fracs: Vec<f64> = quotas.iter().zip(&counts).map(|(q, c)| q - *c as f64).collect();
        for _ in 0..leftover {
            let pick = (0..active.len())
                .filter(|&i| fracs[i] > 1e-12 && counts[i] as f64 <= quotas[i])
                .max_by(|&a, &b| need[a].cmp(&need[b]).then(fracs[a].total_cmp(&fracs[b])).then(b.cmp(&a)))
                .unwrap_or(0);
            counts[pick] += 1;
            need[pick] -= 1;
        }
        final_plans.push((ids, counts));
    }

    for (ids, counts) in final_plans {
        let mut it = ids.into_iter();
        for (k, c) in counts.iter().enumerate() {
            for id in it.by_ref().take(*c) {
                assignments.insert(id, active[k].0);
            }
        }
    }

    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(SplitAssignment {
        assignments,
        seed,
        strata: strata.into_keys().collect(),
        warnings,
    })
}

fn largest_remainder(quotas: &[f64]) -> Vec<usize> {
    let total = quotas.iter().sum::<f64>().round() as usize;
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(counts.iter().sum());
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Pair schedules
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ordering {
    AB,
    BA,
}

impl Ordering {
    pub fn flipped(self) -> Self {
        match self {
            Ordering::AB => Ordering::BA,
            Ordering::BA => Ordering::AB,
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ordering::AB => "AB",
            Ordering::BA => "BA",
        })
    }
}

/// One scheduled presentation. With ordering `BA` the task in `task_b` is
/// shown first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pair_id: String,
    pub task_a: String,
    pub task_b: String,
    pub ordering: Ordering,
    pub persona: String,
    pub n_trials: usize,
}

impl PairEntry {
    /// (first shown, second shown).
    pub fn presented(&self) -> (&str, &str) {
        match self.ordering {
            Ordering::AB => (&self.task_a, &self.task_b),
            Ordering::BA => (&self.task_b, &self.task_a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSchedule {
    pub entries: Vec<PairEntry>,
}

impl PairSchedule {
    /// Same pairs, relabelled for another persona.
    pub fn for_persona(&self, persona: &str) -> PairSchedule {
        PairSchedule {
            entries: self
                .entries
                .iter()
                .map(|e| PairEntry {
                    persona: persona.to_string(),
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn unordered_pairs(&self) -> BTreeSet<(String, String)> {
        self.entries
            .iter()
            .map(|e| {
                if e.task_a <= e.task_b {
                    (e.task_a.clone(), e.task_b.clone())
                } else {
                    (e.task_b.clone(), e.task_a.clone())
                }
            })
            .collect()
    }

    /// Number of distinct partners per task id.
    pub fn degrees(&self) -> BTreeMap<String, usize> {
        let mut d = BTreeMap::new();
        for (a, b) in self.unordered_pairs() {
            *d.entry(a).or_insert(0) += 1;
            *d.entry(b).or_insert(0) += 1;
        }
        d
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("pair entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let entries: Vec<PairEntry> = parse_jsonl(text)?;
        if let Some(e) = entries.iter().find(|e| e.task_a == e.task_b) {
            return Err(Error::invalid(format!("self-pair in schedule: {}", e.pair_id)));
        }
        Ok(PairSchedule { entries })
    }
}

/// Degree-balanced random pair schedule.
///
/// `pairs_per_task` rounds of uniform random matching are drawn; tasks left
/// under-degree (odd counts, duplicate draws) are then repaired greedily, so
/// every task ends with degree in `[pairs_per_task, pairs_per_task + 1]`.
/// When `pairs_per_task >= n - 1` the complete graph is returned.
pub fn pair_schedule(table: &TaskTable, pairs_per_task: usize, both_orderings: bool, trials: usize, seed: u64) -> Result<PairSchedule> {
    let n = table.len();
    if n < 2 {
        return Err(Error::invalid("pair schedule needs at least 2 tasks"));
    }
    if pairs_per_task == 0 {
        return Err(Error::invalid("pairs_per_task must be >= 1"));
    }
    let mut rng = rng_for(seed, &["pairs"]);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let mut edges: Vec<(usize, usize)> = Vec::new();

    let add = |a: usize, b: usize, adj: &mut Vec<BTreeSet<usize>>, edges: &mut Vec<(usize, usize)>| {
        adj[a].insert(b);
        adj[b].insert(a);
        edges.push((a, b));
    };

    if pairs_per_task >= n - 1 {
        for a in 0..n {
            for b in (a + 1)..n {
                add(a, b, &mut adj, &mut edges);
            }
        }
    } else {
        let k = pairs_per_task;
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..k {
            perm.shuffle(&mut rng);
            for c in perm.chunks_exact(2) {
                let (a, b) = (c[0], c[1]);
                if !adj[a].contains(&b) {
                    add(a, b, &mut adj, &mut edges);
                }
            }
        }
        // repair
        loop {
            let mut under: Vec<usize> = (0..n).filter(|&i| adj[i].len() < k).collect();
            if under.is_empty() {
                break;
            }
            under.shuffle(&mut rng);
            let u = under[0];
            let under_partner = under[1..].iter().copied().find(|&v| !adj[u].contains(&v));
            let partner = under_partner.or_else(|| {
                let cands: Vec<usize> = (0..n).filter(|&v| v != u && !adj[u].contains(&v) && adj[v].len() == k).collect();
                if cands.is_empty() {
                    None
                } else {
                    Some(cands[rng.random_range(0..cands.len())])
                }
            });
            match partner {
                Some(v) => add(u, v, &mut adj, &mut edges),
                None => return Err(Error::invalid(format!("cannot reach degree {k} for task {}", table.tasks()[u].id))),
            }
        }
    }

    let ids = table.ids();
    let mut entries = Vec::with_capacity(edges.len() * if both_orderings { 2 } else { 1 });
    for (i, (a, b)) in edges.into_iter().enumerate() {
        let (a, b) = if rng.random::<bool>() { (a, b) } else { (b, a) };
        let pair_id = format!("p{i:06}");
        let mk = |ordering| PairEntry {
            pair_id: pair_id.clone(),
            task_a: ids[a].clone(),
            task_b: ids[b].clone(),
            ordering,
            persona: ASSISTANT.to_string(),
            n_trials: trials,
        };
        entries.push(mk(Ordering::AB));
        if both_orderings {
            entries.push(mk(Ordering::BA));
        }
    }
    Ok(PairSchedule { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(n: usize, topics: usize) -> TaskTable {
        TaskTable::new(
            (0..n)
                .map(|i| Task::new(format!("t{i:05}"), format!("task {i}"), format!("topic{}", i % topics)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_three_lines() {
        let text = r#"{"id":"a","text":"x","topic":"math","source":"alpaca","harm":"benign"}
{"id":"b","text":"y","topic":"math","source":"alpaca","harm":"harmful"}
{"id":"c","text":"z","topic":"code","source":"wildchat","harm":"unknown"}
"#;
        let t = parse_tasks(text).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.topic_count(), 2);
        assert_eq!(t.get("b").unwrap().harm, Harm::Harmful);
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let text = r#"{"id":"t1","text":"x","topic":"m","source":"s","harm":"benign"}
{"id":"t1","text":"y","topic":"m","source":"s","harm":"benign"}"#;
        match parse_tasks(text) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "t1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_line_and_bad_enum() {
        let text = "{\"id\":\"a\",\"text\":\"x\",\"topic\":\"m\",\"source\":\"s\",\"harm\":\"benign\"}\nnot json";
        assert!(matches!(parse_tasks(text), Err(Error::Parse { line: 2, .. })));
        let text = r#"{"id":"a","text":"x","topic":"m","source":"s","harm":"spicy"}"#;
        assert!(matches!(parse_tasks(text), Err(Error::UnknownEnum { field: "harm", .. })));
    }

    #[test]
    fn vocabulary_is_enforced() {
        let vocab = Vocabulary {
            topics: ["m".to_string()].into(),
            sources: ["s".to_string()].into(),
        };
        let text = r#"{"id":"a","text":"x","topic":"q","source":"s","harm":"benign"}"#;
        assert!(matches!(
            parse_tasks_with(text, Some(&vocab)),
            Err(Error::UnknownEnum { field: "topic", .. })
        ));
    }

    #[test]
    fn fourteen_topic_pool() {
        let t = table(6000, 14);
        assert_eq!(t.topic_count(), 14);
    }

    #[test]
    fn reserialization_is_order_normalized() {
        let t = table(20, 3);
        let mut rev = t.tasks().to_vec();
        rev.reverse();
        let r = TaskTable::new(rev).unwrap();
        assert_eq!(t.to_jsonl(), r.to_jsonl());
        let back = parse_tasks(&t.to_jsonl()).unwrap();
        assert_eq!(back.to_jsonl(), t.to_jsonl());
    }

    #[test]
    fn personas_validated() {
        assert!(validate_personas(&[Persona::assistant()]).is_ok());
        let bad = Persona {
            name: ASSISTANT.into(),
            system_prompt: "be evil".into(),
        };
        assert!(validate_personas(&[bad]).is_err());
        assert!(validate_personas(&[Persona::assistant(), Persona::assistant()]).is_err());
    }

    #[test]
    fn split_80_20_deterministic() {
        let t = table(100, 1);
        let f = [(Split::Train, 0.8), (Split::Test, 0.2)];
        let a = stratified_split(&t, &f, 7).unwrap();
        let b = stratified_split(&t, &f, 7).unwrap();
        assert_eq!(a.count(Split::Train), 80);
        assert_eq!(a.count(Split::Test), 20);
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_ne!(a, stratified_split(&t, &f, 8).unwrap());
    }

    #[test]
    fn split_6000_is_5000_1000() {
        let t = table(6000, 14);
        let f = [(Split::Train, 5.0 / 6.0), (Split::Test, 1.0 / 6.0)];
        let a = stratified_split(&t, &f, 1).unwrap();
        assert_eq!(a.count(Split::Train), 5000);
        assert_eq!(a.count(Split::Test), 1000);
        // per-stratum deviation below one task
        for topic in t.topics() {
            let ids: Vec<&Task> = t.tasks().iter().filter(|x| x.topic == topic).collect();
            let n_test = ids.iter().filter(|x| a.get(&x.id) == Some(Split::Test)).count();
            assert!((n_test as f64 - ids.len() as f64 / 6.0).abs() < 1.0);
        }
    }

    #[test]
    fn degenerate_stratum_goes_to_train() {
        let t = table(2, 1);
        let f = [(Split::Train, 0.6), (Split::Test, 0.2), (Split::Validation, 0.2)];
        let a = stratified_split(&t, &f, 0).unwrap();
        assert_eq!(a.count(Split::Train), 2);
        assert_eq!(a.warnings.len(), 1);
        assert!(stratified_split(&t, &[(Split::Train, 0.5)], 0).is_err());
    }

    #[test]
    fn complete_graph_for_small_table() {
        let t = table(4, 1);
        let s = pair_schedule(&t, 3, false, 1, 0).unwrap();
        assert_eq!(s.unordered_pairs().len(), 6);
        assert!(pair_schedule(&table(1, 1), 3, false, 1, 0).is_err());
    }

    #[test]
    fn schedule_300_by_20_with_both_orderings() {
        let t = table(300, 5);
        let s = pair_schedule(&t, 20, true, 3, 9).unwrap();
        let pairs = s.unordered_pairs();
        // enumerate: 300·20/2 edges when every degree is exactly 20
        let degs = s.degrees();
        let total_degree: usize = degs.values().sum();
        assert_eq!(pairs.len() * 2, total_degree);
        assert!(degs.values().all(|&d| (20..=21).contains(&d)));
        assert!(pairs.len() >= 300 * 20 / 2 && pairs.len() <= 300 * 21 / 2);
        assert_eq!(s.entries.len(), 2 * pairs.len());
        let mut by_id: BTreeMap<&str, Vec<Ordering>> = BTreeMap::new();
        for e in &s.entries {
            by_id.entry(&e.pair_id).or_default().push(e.ordering);
        }
        assert!(by_id.values().all(|o| o.len() == 2 && o[0] != o[1]));
    }

    #[test]
    fn seed_changes_pairing_not_degree_profile() {
        let t = table(50, 2);
        let a = pair_schedule(&t, 4, false, 1, 1).unwrap();
        let b = pair_schedule(&t, 4, false, 1, 2).unwrap();
        assert_ne!(a.unordered_pairs(), b.unordered_pairs());
        for s in [&a, &b] {
            assert!(s.degrees().values().all(|&d| (4..=5).contains(&d)));
        }
        assert_eq!(a, pair_schedule(&t, 4, false, 1, 1).unwrap());
    }

    proptest! {
        #[test]
        fn schedule_degree_bounds(n in 3usize..60, k in 1usize..8, seed in 0u64..1000) {
            let t = table(n, 2);
            let s = pair_schedule(&t, k, false, 1, seed).unwrap();
            let degs = s.degrees();
            let lo = k.min(n - 1);
            prop_assert_eq!(degs.len(), n);
            for d in degs.values() {
                prop_assert!(*d >= lo && *d <= lo + 1);
            }
            prop_assert!(s.entries.iter().all(|e| e.task_a != e.task_b));
        }

        #[test]
        fn split_is_total_and_disjoint(n in 3usize..200, topics in 1usize..6, seed in 0u64..100) {
            let t = table(n, topics);
            let a = stratified_split(&t, &[(Split::Train, 0.7), (Split::Test, 0.2), (Split::Validation, 0.1)], seed).unwrap();
            prop_assert_eq!(a.assignments.len(), n);
        }
    }
}
