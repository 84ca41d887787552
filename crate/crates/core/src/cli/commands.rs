use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Ctx;
use crate::activationstore::{load_from_tree, read_manifest, ActivationMatrix};
use crate::choicemodel::{fit_utilities_for, ChoiceRecord, Utilities, UtilityFit};
use crate::corpus::{load_tasks, read_jsonl, stratified_split, Split, SplitAssignment, TaskTable};
use crate::error::{Error, Result};
use crate::personalab::{self, PersonaData, StimulusScore};
use crate::probekit::{
    evaluate, evaluate_split, inlp_iterate, loo_topic_eval, position_layer_sweep, train_ridge, LooReport, Probe, ProbeMetrics, ProbeOptions,
};
use crate::row;

pub(super) fn tasks(ctx: &Ctx) -> Result<TaskTable> {
    load_tasks(&ctx.m.path(&ctx.cfg().paths.tasks, "tasks")?)
}

pub(super) fn split(ctx: &Ctx, tasks: &TaskTable) -> Result<SplitAssignment> {
    let p = &ctx.cfg().probe;
    let mut fr = vec![(Split::Train, 1.0 - p.validation - p.test), (Split::Validation, p.validation)];
    if p.test > 0.0 {
        fr.push((Split::Test, p.test));
    }
    stratified_split(tasks, &fr, ctx.m.seed())
}

pub const UTILITY_HEADER: [&str; 5] = ["persona", "task_id", "mu", "sigma", "unconstrained"];

pub(super) fn utility_rows(fits: &[UtilityFit]) -> Vec<Vec<String>> {
    fits.iter()
        .flat_map(|f| f.tasks.iter().map(move |t| row![f.persona, t.id, t.mu, t.sigma, t.unconstrained]))
        .collect()
}

#[derive(Debug, Deserialize)]
struct UtilityLine {
    persona: String,
    task_id: String,
    mu: f64,
}

/// Per-persona utilities from a `utilities.tsv` report.
pub fn read_utilities(path: &Path) -> Result<BTreeMap<String, Utilities>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut by: BTreeMap<String, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for (i, rec) in r.deserialize::<UtilityLine>().enumerate() {
        let l = rec.map_err(|e| Error::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        let e = by.entry(l.persona).or_default();
        e.0.push(l.task_id);
        e.1.push(l.mu);
    }
    by.into_iter().map(|(p, (ids, v))| Ok((p, Utilities::new(ids, v)?))).collect()
}

fn utilities(ctx: &Ctx) -> Result<BTreeMap<String, Utilities>> {
    read_utilities(&ctx.m.path(&ctx.cfg().paths.utilities, "utilities")?)
}

fn tree(ctx: &Ctx) -> Result<std::path::PathBuf> {
    ctx.m.path(&ctx.cfg().paths.activations, "activations")
}

fn persona_utilities<'a>(u: &'a BTreeMap<String, Utilities>, persona: &str) -> Result<&'a Utilities> {
    u.get(persona).ok_or_else(|| Error::MissingIds(vec![persona.to_string()]))
}

const METRIC_HEADER: [&str; 9] = [
    "split",
    "n",
    "alpha",
    "pearson",
    "ci_low",
    "ci_high",
    "pairwise_accuracy",
    "acc_ci_low",
    "acc_ci_high",
];

fn metric_row(label: &str, alpha: f64, m: &ProbeMetrics) -> Vec<String> {
    row![
        label,
        m.n,
        alpha,
        m.pearson.r,
        m.pearson.ci_low,
        m.pearson.ci_high,
        m.pairwise_accuracy,
        m.accuracy_ci.0,
        m.accuracy_ci.1
    ]
}

fn loo_rows(r: &LooReport) -> Vec<Vec<String>> {
    let mut rows: Vec<Vec<String>> = r
        .folds
        .iter()
        .map(|f| {
            row![
                f.topic,
                f.n,
                f.alpha,
                f.metrics.map(|m| m.pearson.r),
                f.metrics.map(|m| m.pairwise_accuracy)
            ]
        })
        .collect();
    rows.push(row![
        "pooled",
        r.pooled.n,
        None::<f64>,
        Some(r.pooled.pearson.r),
        Some(r.pooled.pairwise_accuracy)
    ]);
    rows
}

// ---------------------------------------------------------------------------

pub fn fit_utilities(ctx: &mut Ctx) -> Result<()> {
    let tasks = tasks(ctx)?;
    let records: Vec<ChoiceRecord> = read_jsonl(&ctx.m.path(&ctx.cfg().paths.choices, "choices")?)?;
    if records.is_empty() {
        return Err(Error::NoUsableRecords);
    }
    let personas: BTreeSet<&str> = records.iter().map(|r| r.persona.as_str()).collect();
    let config = ctx.cfg().fit;
    let fits: Vec<UtilityFit> = personas
        .into_par_iter()
        .map(|p| fit_utilities_for(&records, &tasks, &config, p))
        .collect::<Result<_>>()?;
    ctx.out.tsv("utilities.tsv", &UTILITY_HEADER, &utility_rows(&fits))?;
    let summary: Vec<Vec<String>> = fits
        .iter()
        .map(|f| row![f.persona, f.tasks.len(), f.n_effective, f.nll, f.converged, f.iterations])
        .collect();
    ctx.out.tsv(
        "fit_summary.tsv",
        &["persona", "n_tasks", "n_effective", "nll", "converged", "iterations"],
        &summary,
    )?;
    ctx.out.json("fits.json", &fits)
}

pub fn train_probe(ctx: &mut Ctx) -> Result<()> {
    let tasks = tasks(ctx)?;
    let u = utilities(ctx)?;
    let st = ctx.cfg().probe.clone();
    let x = load_from_tree(&tree(ctx)?, &st.persona, st.layer, st.position)?;
    let y = persona_utilities(&u, &st.persona)?.aligned(x.task_ids())?;
    let split = split(ctx, &tasks)?;
    let seed = ctx.m.seed();
    train_and_report(&mut ctx.out, &x, &y, &split, &tasks, &st.options(seed))?;
    Ok(())
}

/// Train, evaluate on validation and test rows, run leave-one-topic-out,
/// and write `probe.json`, `probe_metrics.tsv` and `loo.tsv`.
pub(super) fn train_and_report(
    out: &mut super::Output,
    x: &ActivationMatrix,
    y: &[f64],
    split: &SplitAssignment,
    tasks: &TaskTable,
    opts: &ProbeOptions,
) -> Result<Probe> {
    let mut probe = train_ridge(x, y, split, opts)?;
    let mut rows = Vec::new();
    for (which, label) in [(Split::Validation, "validation"), (Split::Test, "test")] {
        if split.count(which) > 0 {
            let m = evaluate_split(&probe, x, y, split, which, opts.seed)?;
            rows.push(metric_row(label, probe.alpha, &m));
            probe.metrics = Some(m);
        }
    }
    out.json("probe.json", &probe)?;
    out.tsv("probe_metrics.tsv", &METRIC_HEADER, &rows)?;
    let topics = x
        .task_ids()
        .iter()
        .map(|id| tasks.get(id).map(|t| t.topic.clone()).ok_or_else(|| Error::UnknownTask(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let loo = loo_topic_eval(x, y, &topics, opts)?;
    out.tsv("loo.tsv", &["topic", "n", "alpha", "pearson", "pairwise_accuracy"], &loo_rows(&loo))?;
    Ok(probe)
}

pub fn eval_probe(ctx: &mut Ctx) -> Result<()> {
    let path = ctx.m.path(&ctx.cfg().paths.probe, "probe")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe = Probe::from_json(&text)?;
    let u = utilities(ctx)?;
    let persona = ctx.cfg().probe.persona.clone();
    let x = load_from_tree(&tree(ctx)?, &persona, probe.layer, probe.position)?;
    let y = persona_utilities(&u, &persona)?.aligned(x.task_ids())?;
    let m = evaluate(&probe, &x, &y, ctx.m.seed())?;
    ctx.out.tsv("eval.tsv", &METRIC_HEADER, &[metric_row(&persona, probe.alpha, &m)])
}

pub fn sweep_positions(ctx: &mut Ctx) -> Result<()> {
    let tasks = tasks(ctx)?;
    let u = utilities(ctx)?;
    let dir = tree(ctx)?;
    let st = ctx.cfg().probe.clone();
    let sw = ctx.cfg().sweep.clone();
    let mut entries: Vec<_> = read_manifest(&dir)?
        .entries
        .into_iter()
        .filter(|e| e.persona == st.persona)
        .filter(|e| sw.layers.is_empty() || sw.layers.contains(&e.layer))
        .filter(|e| sw.positions.is_empty() || sw.positions.contains(&e.position))
        .collect();
    entries.sort_by_key(|e| (e.position, e.layer));
    if entries.is_empty() {
        return Err(Error::invalid(format!("no activation matrices for persona {:?}", st.persona)));
    }
    let first = load_from_tree(&dir, &st.persona, entries[0].layer, entries[0].position)?;
    let ids = first.task_ids().to_vec();
    let grid = entries
        .iter()
        .map(|e| load_from_tree(&dir, &st.persona, e.layer, e.position)?.align(&ids))
        .collect::<Result<Vec<_>>>()?;
    let y = persona_utilities(&u, &st.persona)?.aligned(&ids)?;
    let split = split(ctx, &tasks)?;
    let table = position_layer_sweep(&grid, &y, &split, &st.options(ctx.m.seed()))?;
    let rows: Vec<Vec<String>> = table
        .cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            row![
                c.position.to_string(),
                c.layer,
                c.alpha,
                c.metrics.map(|m| m.pearson.r),
                c.metrics.map(|m| m.pairwise_accuracy),
                table.best == Some(i),
                c.error.clone()
            ]
        })
        .collect();
    ctx.out.tsv(
        "sweep.tsv",
        &["position", "layer", "alpha", "pearson", "pairwise_accuracy", "best", "error"],
        &rows,
    )
}

struct PersonaProbes {
    personas: Vec<String>,
    probes: BTreeMap<String, Probe>,
    /// Test rows, aligned across personas.
    test_x: BTreeMap<String, ActivationMatrix>,
    utilities: BTreeMap<String, Utilities>,
    test_ids: Vec<String>,
}

fn persona_probes(ctx: &Ctx) -> Result<PersonaProbes> {
    let tasks = tasks(ctx)?;
    let utilities = utilities(ctx)?;
    let dir = tree(ctx)?;
    let st = ctx.cfg().probe.clone();
    let personas: Vec<String> = if ctx.cfg().personas.personas.is_empty() {
        utilities.keys().cloned().collect()
    } else {
        ctx.cfg().personas.personas.clone()
    };
    let split = split(ctx, &tasks)?;
    if split.count(Split::Test) == 0 {
        return Err(Error::Config("probe.test must be > 0 for cross-persona evaluation".into()));
    }
    let opts = st.options(ctx.m.seed());
    let trained = personas
        .par_iter()
        .map(|p| {
            let x = load_from_tree(&dir, p, st.layer, st.position)?;
            let y = persona_utilities(&utilities, p)?.aligned(x.task_ids())?;
            Ok((x.clone(), train_ridge(&x, &y, &split, &opts)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &trained[0].0;
    let test_ids: Vec<String> = first.task_ids().iter().filter(|id| split.get(id) == Some(Split::Test)).cloned().collect();
    let mut probes = BTreeMap::new();
    let mut test_x = BTreeMap::new();
    for (p, (x, probe)) in personas.iter().zip(trained) {
        test_x.insert(p.clone(), x.align(&test_ids)?);
        probes.insert(p.clone(), probe);
    }
    let utilities = personas
        .iter()
        .map(|p| Ok((p.clone(), persona_utilities(&utilities, p)?.clone())))
        .collect::<Result<_>>()?;
    Ok(PersonaProbes {
        personas,
        probes,
        test_x,
        utilities,
        test_ids,
    })
}

pub(super) fn write_transfer(out: &mut super::Output, m: &personalab::TransferMatrix) -> Result<()> {
    let rows: Vec<Vec<String>> = m
        .cells
        .iter()
        .map(|c| {
            let masked = |v: f64| (!c.diagonal).then_some(v);
            row![
                c.train_persona,
                c.eval_persona,
                c.probe_r,
                masked(c.utility_r),
                masked(c.delta),
                c.diagonal
            ]
        })
        .collect();
    out.tsv(
        "transfer.tsv",
        &["train_persona", "eval_persona", "probe_r", "utility_r", "delta", "diagonal"],
        &rows,
    )?;
    let asym: Vec<Vec<String>> = m.asymmetry().iter().map(|a| row![a.a, a.b, a.value]).collect();
    out.tsv("asymmetry.tsv", &["persona_a", "persona_b", "abs_difference"], &asym)
}

pub fn transfer(ctx: &mut Ctx) -> Result<()> {
    let pp = persona_probes(ctx)?;
    let m = personalab::transfer_matrix(&pp.probes, &pp.test_x, &pp.utilities)?;
    write_transfer(&mut ctx.out, &m)
}

pub fn probe_bias(ctx: &mut Ctx) -> Result<()> {
    let pp = persona_probes(ctx)?;
    let reference = ctx.cfg().personas.reference.clone();
    let mut preds = BTreeMap::new();
    for t in &pp.personas {
        for e in &pp.personas {
            if t != e && *t != reference && *e != reference {
                preds.insert((t.clone(), e.clone()), pp.probes[t].predict(&pp.test_x[e])?);
            }
        }
    }
    let u: BTreeMap<String, Vec<f64>> = pp
        .utilities
        .iter()
        .map(|(p, u)| Ok((p.clone(), u.aligned(&pp.test_ids)?)))
        .collect::<Result<_>>()?;
    let observers = if ctx.cfg().personas.observers.is_empty() {
        pp.personas.clone()
    } else {
        ctx.cfg().personas.observers.clone()
    };
    let r = personalab::probe_bias(&preds, &u, &reference, &observers)?;
    let rows: Vec<Vec<String>> = r
        .pairs
        .iter()
        .map(|p| {
            row![
                p.train,
                p.eval,
                p.raw_train,
                p.raw_default,
                p.partial_train,
                p.partial_default,
                p.degenerate()
            ]
        })
        .collect();
    ctx.out.tsv(
        "bias_pairs.tsv",
        &[
            "train_persona",
            "eval_persona",
            "raw_train",
            "raw_default",
            "partial_train",
            "partial_default",
            "degenerate",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = r.observers.iter().map(|o| row![o.observer, o.mean, o.sem, o.n, o.n_degenerate]).collect();
    ctx.out
        .tsv("bias_observers.tsv", &["observer", "mean_partial_r", "sem", "n", "n_degenerate"], &rows)
}

pub fn persona_select(ctx: &mut Ctx) -> Result<()> {
    let u = utilities(ctx)?;
    let st = ctx.cfg().personas.clone();
    let names: Vec<String> = if st.personas.is_empty() {
        u.keys().cloned().collect()
    } else {
        st.personas.clone()
    };
    let first = persona_utilities(&u, &names[0])?;
    let ids: Vec<String> = first
        .task_ids
        .iter()
        .filter(|id| names.iter().all(|p| u.get(p).is_some_and(|x| x.task_ids.contains(id))))
        .cloned()
        .collect();
    let rows = names
        .iter()
        .map(|p| persona_utilities(&u, p)?.aligned(&ids))
        .collect::<Result<Vec<_>>>()?;
    let sel = personalab::persona_select(&names, &rows, st.threshold, st.target_count)?;
    for w in &sel.warnings {
        log::warn!("{w}");
    }
    let out: Vec<Vec<String>> = names
        .iter()
        .map(|p| {
            let s = sel.pca_scores.get(p);
            row![
                p,
                sel.selected.contains(p),
                sel.represented_by.get(p).cloned(),
                s.and_then(|v| v.first().copied()),
                s.and_then(|v| v.get(1).copied())
            ]
        })
        .collect();
    ctx.out
        .tsv("selection.tsv", &["persona", "selected", "represented_by", "pc1", "pc2"], &out)
}

pub fn diversity(ctx: &mut Ctx) -> Result<()> {
    let u = utilities(ctx)?;
    let dir = tree(ctx)?;
    let st = ctx.cfg().personas.clone();
    let pr = ctx.cfg().probe.clone();
    let names: Vec<String> = if st.personas.is_empty() {
        u.keys().cloned().collect()
    } else {
        st.personas.clone()
    };
    let mut data = BTreeMap::new();
    for p in &names {
        let x = load_from_tree(&dir, p, pr.layer, pr.position)?;
        let y = persona_utilities(&u, p)?.aligned(x.task_ids())?;
        data.insert(
            p.clone(),
            PersonaData {
                activations: x,
                utilities: y,
            },
        );
    }
    let curve = personalab::diversity_ablation(&data, st.total_size, &st.counts, &st.seeds, &pr.options(ctx.m.seed()))?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|c| {
            let per: Vec<String> = c.per_seed.iter().map(|v| format!("{v}")).collect();
            row![c.n_personas, c.mean_r, c.sem, per.join(",")]
        })
        .collect();
    ctx.out.tsv("diversity.tsv", &["n_personas", "mean_r", "sem", "per_seed"], &rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreLine {
    #[serde(default)]
    pub condition: String,
    #[serde(default)]
    pub pair_id: String,
    #[serde(default)]
    pub harmful: bool,
    /// Class label for `discriminate`.
    #[serde(default)]
    pub positive: bool,
    pub score: f64,
}

fn score_lines(ctx: &Ctx) -> Result<Vec<ScoreLine>> {
    read_jsonl(&ctx.m.path(&ctx.cfg().paths.scores, "scores")?)
}

pub fn paired_delta(ctx: &mut Ctx) -> Result<()> {
    let lines = score_lines(ctx)?;
    let st = ctx.cfg().personas.clone();
    let mut by: BTreeMap<String, Vec<StimulusScore>> = BTreeMap::new();
    for l in lines {
        by.entry(l.condition).or_default().push(StimulusScore {
            pair_id: l.pair_id,
            harmful: l.harmful,
            score: l.score,
        });
    }
    let baseline = match &st.baseline {
        Some(b) => Some(by.remove(b).ok_or_else(|| Error::MissingIds(vec![b.clone()]))?),
        None => None,
    };
    let reports = personalab::paired_delta(&by, &st.reference, baseline.as_deref())?;
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            row![
                r.condition,
                r.pairs.len(),
                r.mean_delta,
                r.summary.sd,
                r.summary.median,
                r.summary.min,
                r.summary.max,
                r.flipped,
                r.baseline_mean_delta
            ]
        })
        .collect();
    ctx.out.tsv(
        "paired_delta.tsv",
        &[
            "condition",
            "n_pairs",
            "mean_delta",
            "sd",
            "median",
            "min",
            "max",
            "flipped",
            "baseline_mean_delta",
        ],
        &rows,
    )?;
    let pairs: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| r.pairs.iter().map(move |p| row![r.condition, p.pair_id, p.harmful, p.benign, p.delta]))
        .collect();
    ctx.out
        .tsv("paired_pairs.tsv", &["condition", "pair_id", "harmful", "benign", "delta"], &pairs)
}

pub fn discriminate(ctx: &mut Ctx) -> Result<()> {
    let mut by: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for l in score_lines(ctx)? {
        let e = by.entry(l.condition).or_default();
        if l.positive {
            e.0.push(l.score)
        } else {
            e.1.push(l.score)
        }
    }
    let rows = by
        .iter()
        .map(|(c, (pos, neg))| {
            let r = personalab::class_discrimination(pos, neg)?;
            Ok(row![
                c,
                r.effect.n_pos,
                r.effect.n_neg,
                r.effect.d,
                r.effect.ci_half,
                r.positive.mean,
                r.positive.sd,
                r.negative.mean,
                r.negative.sd
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.out.tsv(
        "discrimination.tsv",
        &[
            "condition",
            "n_pos",
            "n_neg",
            "cohens_d",
            "ci_half",
            "mean_pos",
            "sd_pos",
            "mean_neg",
            "sd_neg",
        ],
        &rows,
    )
}

pub fn inlp(ctx: &mut Ctx) -> Result<()> {
    let tasks = tasks(ctx)?;
    let u = utilities(ctx)?;
    let st = ctx.cfg().probe.clone();
    let x = load_from_tree(&tree(ctx)?, &st.persona, st.layer, st.position)?;
    let y = persona_utilities(&u, &st.persona)?.aligned(x.task_ids())?;
    let split = split(ctx, &tasks)?;
    let topics = x
        .task_ids()
        .iter()
        .map(|id| tasks.get(id).map(|t| t.topic.clone()).ok_or_else(|| Error::UnknownTask(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let stage = ctx.cfg().inlp.clone();
    let traj = inlp_iterate(
        &x,
        &y,
        stage.iterations,
        &split,
        stage.loo.then_some(topics.as_slice()),
        &st.options(ctx.m.seed()),
    )?;
    let rows: Vec<Vec<String>> = traj.steps.iter().enumerate().map(|(i, s)| row![i, s.alpha, s.id_r, s.loo_r]).collect();
    ctx.out.tsv("inlp.tsv", &["iteration", "alpha", "id_r", "loo_r"], &rows)?;
    ctx.out
        .json("inlp_directions.json", &traj.steps.iter().map(|s| &s.direction).collect::<Vec<_>>())
}
