use std::collections::BTreeMap;

use rayon::prelude::*;

use super::commands::{self, split, train_and_report, utility_rows, write_transfer, UTILITY_HEADER};
use super::{Ctx, DirectionSource, Output};
use crate::activationstore::{write_tree, ActivationMatrix, Position};
use crate::choicemodel::{fit_utilities_for, Utilities, UtilityFit};
use crate::corpus::{pair_schedule, PairSchedule, TaskTable};
use crate::error::{Error, Result};
use crate::interventions::{
    ablation_run, eot_patch_sweep, layer_sweep as run_layer_sweep, steering_sweep, typed_pairs, AblationSpec, PatchLayers, SteeringConfig,
    SweepResult, TypedPair,
};
use crate::personalab::transfer_matrix;
use crate::probekit::Probe;
use crate::row;
use crate::simbackend::{synthetic_tasks, SimBackend};

fn backend(ctx: &Ctx) -> Result<SimBackend> {
    SimBackend::build(ctx.cfg().backend.clone(), ctx.m.seed())
}

fn task_table(ctx: &Ctx) -> Result<TaskTable> {
    if ctx.cfg().paths.tasks.is_some() {
        return commands::tasks(ctx);
    }
    let s = &ctx.cfg().simulate;
    synthetic_tasks(s.n_tasks, s.n_topics, s.harmful_fraction, ctx.m.seed())
}

fn pairs(ctx: &Ctx, tasks: &TaskTable) -> Result<Vec<TypedPair>> {
    let want = ctx.cfg().interventions.n_pairs;
    let per_task = (2 * want).div_ceil(tasks.len().max(1)).max(1);
    let schedule = pair_schedule(tasks, per_task, false, 1, ctx.m.seed())?;
    let mut p = typed_pairs(&schedule, tasks)?;
    p.truncate(want);
    Ok(p)
}

fn direction(ctx: &Ctx, be: &SimBackend, trained: Option<&Probe>) -> Result<Vec<f64>> {
    match ctx.cfg().interventions.direction {
        DirectionSource::Planted => Ok(be.mean_planted()),
        DirectionSource::Probe => match trained {
            Some(p) => p.direction(),
            None => {
                let path = ctx.m.path(&ctx.cfg().paths.probe, "probe")?;
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                Probe::from_json(&text)?.direction()
            }
        },
    }
}

fn all_layers(ctx: &Ctx) -> Vec<usize> {
    let st = &ctx.cfg().interventions;
    if st.layers.is_empty() {
        (0..ctx.cfg().backend.n_layers).collect()
    } else {
        st.layers.clone()
    }
}

fn write_steering(out: &mut Output, r: &SweepResult) -> Result<()> {
    let rows: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|s| {
            row![
                s.persona,
                s.mode.to_string(),
                s.pair_type.to_string(),
                s.coefficient,
                s.n,
                s.n_steered,
                s.n_refusal,
                s.chose_steered_rate,
                s.ci.0,
                s.ci.1,
                s.refusal_rate
            ]
        })
        .collect();
    out.tsv(
        "steering.tsv",
        &[
            "persona",
            "mode",
            "pair_type",
            "coefficient",
            "n",
            "n_steered",
            "n_refusal",
            "chose_steered_rate",
            "ci_low",
            "ci_high",
            "refusal_rate",
        ],
        &rows,
    )?;
    out.jsonl("steering_log.jsonl", &r.log)
}

fn run_steer(ctx: &mut Ctx, be: &SimBackend, dir: &[f64], pairs: &[TypedPair]) -> Result<()> {
    let st = ctx.cfg().interventions.clone();
    let config = SteeringConfig {
        coefficients: st.coefficients,
        modes: st.modes,
        layer: st.layer,
        trials: st.trials,
        cap: st.cap,
        seed: ctx.m.seed(),
    };
    let r = steering_sweep(be, dir, pairs, &st.personas, &config)?;
    write_steering(&mut ctx.out, &r)
}

fn run_patch(ctx: &mut Ctx, be: &SimBackend, pairs: &[TypedPair]) -> Result<()> {
    let st = ctx.cfg().interventions.clone();
    let mut grid = Vec::new();
    if st.patch_all_layers {
        grid.push(PatchLayers::All);
    }
    grid.extend(st.patch_single_layers.iter().map(|&l| PatchLayers::Single(l)));
    let persona = st
        .personas
        .first()
        .ok_or_else(|| Error::Config("interventions.personas is empty".into()))?;
    let rows = eot_patch_sweep(be, pairs, &grid, &st.conditions, persona, st.trials, ctx.m.seed())?;
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            row![
                r.layers.to_string(),
                r.condition.to_string(),
                r.n,
                r.flips,
                r.flip_rate,
                r.ci.0,
                r.ci.1,
                r.skipped_inapplicable,
                r.excluded_ambiguous_baseline,
                r.patched_ties
            ]
        })
        .collect();
    ctx.out.tsv(
        "patch.tsv",
        &[
            "layers",
            "condition",
            "n",
            "flips",
            "flip_rate",
            "ci_low",
            "ci_high",
            "skipped_inapplicable",
            "excluded_ambiguous_baseline",
            "patched_ties",
        ],
        &out,
    )
}

pub fn steer(ctx: &mut Ctx) -> Result<()> {
    let be = backend(ctx)?;
    let tasks = task_table(ctx)?;
    let pairs = pairs(ctx, &tasks)?;
    let dir = direction(ctx, &be, None)?;
    run_steer(ctx, &be, &dir, &pairs)
}

pub fn layer_sweep(ctx: &mut Ctx) -> Result<()> {
    let be = backend(ctx)?;
    let tasks = task_table(ctx)?;
    let pairs = pairs(ctx, &tasks)?;
    let dir = direction(ctx, &be, None)?;
    let st = ctx.cfg().interventions.clone();
    let persona = st
        .personas
        .first()
        .ok_or_else(|| Error::Config("interventions.personas is empty".into()))?;
    let rows = run_layer_sweep(
        &be,
        &[dir],
        &all_layers(ctx),
        st.sweep_coefficient,
        &pairs,
        persona,
        st.trials,
        st.cap,
        ctx.m.seed(),
    )?;
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| row![r.layer, r.rate_pos, r.rate_neg, r.swing, r.ci.0, r.ci.1, r.n_pos, r.n_neg, r.is_max])
        .collect();
    ctx.out.tsv(
        "layer_sweep.tsv",
        &["layer", "rate_pos", "rate_neg", "swing", "ci_low", "ci_high", "n_pos", "n_neg", "is_max"],
        &out,
    )
}

pub fn ablate(ctx: &mut Ctx) -> Result<()> {
    let be = backend(ctx)?;
    let tasks = task_table(ctx)?;
    let pairs = pairs(ctx, &tasks)?;
    let st = ctx.cfg().interventions.clone();
    let spec = AblationSpec {
        canonical: direction(ctx, &be, None)?,
        n_random: st.n_random,
        layers: all_layers(ctx),
        trials: st.trials,
        seed: ctx.m.seed(),
    };
    let persona = st
        .personas
        .first()
        .ok_or_else(|| Error::Config("interventions.personas is empty".into()))?;
    let r = ablation_run(&be, &spec, &pairs, persona)?;
    let out: Vec<Vec<String>> = r
        .rows
        .iter()
        .map(|a| row![a.label, a.n_pairs, a.n_agree, a.n_tied, a.agreement, a.ci.0, a.ci.1])
        .collect();
    ctx.out.tsv(
        "ablation.tsv",
        &["label", "n_pairs", "n_agree", "n_tied", "agreement", "ci_low", "ci_high"],
        &out,
    )
}

pub fn patch(ctx: &mut Ctx) -> Result<()> {
    let be = backend(ctx)?;
    let tasks = task_table(ctx)?;
    let pairs = pairs(ctx, &tasks)?;
    run_patch(ctx, &be, &pairs)
}

/// Tasks, choices, fitted and true utilities, an activation tree, a probe
/// with held-out and leave-one-topic-out metrics, a transfer matrix when
/// there is more than one persona, and optional steering and patching.
pub fn simulate(ctx: &mut Ctx) -> Result<()> {
    let be = backend(ctx)?;
    let seed = ctx.m.seed();
    let tasks = task_table(ctx)?;
    ctx.out.text("tasks.jsonl", &tasks.to_jsonl())?;
    let sim = ctx.cfg().simulate.clone();
    let personas: Vec<String> = ctx.cfg().backend.personas.iter().map(|p| p.name.clone()).collect();

    let base = pair_schedule(&tasks, sim.pairs_per_task, true, sim.trials, seed)?;
    let schedule = PairSchedule {
        entries: personas.iter().flat_map(|p| base.for_persona(p).entries).collect(),
    };
    ctx.out.text("schedule.jsonl", &schedule.to_jsonl())?;
    let choices = be.elicit_choices(&schedule, &tasks, seed)?;
    ctx.out.jsonl("choices.jsonl", &choices)?;

    let config = ctx.cfg().fit;
    let fits: Vec<UtilityFit> = personas
        .par_iter()
        .map(|p| fit_utilities_for(&choices, &tasks, &config, p))
        .collect::<Result<_>>()?;
    ctx.out.tsv("utilities.tsv", &UTILITY_HEADER, &utility_rows(&fits))?;
    let mut truth = Vec::new();
    for p in &personas {
        for t in tasks.tasks() {
            truth.push(row![p, t.id, be.utility(p, t)?]);
        }
    }
    ctx.out.tsv("true_utilities.tsv", &["persona", "task_id", "utility"], &truth)?;

    let (la, lb) = ctx.cfg().backend.read_window;
    let layers = if sim.export_layers.is_empty() {
        (la..=lb).collect()
    } else {
        sim.export_layers.clone()
    };
    let mut mats: Vec<ActivationMatrix> = Vec::new();
    for p in &personas {
        for &l in &layers {
            for pos in Position::ALL {
                mats.push(be.export_activations(&tasks, p, l, pos)?);
            }
        }
    }
    let tree_dir = ctx.out.dir().join("activations");
    let manifest = write_tree(&tree_dir, &mats)?;
    ctx.out.note("activations/manifest.json");
    for e in &manifest.entries {
        ctx.out.note(&format!("activations/{}", e.path));
    }

    let fitted: BTreeMap<String, Utilities> = fits.iter().map(|f| (f.persona.clone(), f.utilities())).collect();
    let st = ctx.cfg().probe.clone();
    let opts = st.options(seed);
    let split = split(ctx, &tasks)?;
    let find = |p: &str| {
        mats.iter()
            .find(|m| m.persona() == p && m.layer() == st.layer && m.position() == st.position)
            .ok_or_else(|| Error::Config(format!("probe layer {} / {} was not exported", st.layer, st.position)))
    };
    let x = find(&st.persona)?;
    let y = fitted
        .get(&st.persona)
        .ok_or_else(|| Error::MissingIds(vec![st.persona.clone()]))?
        .aligned(x.task_ids())?;
    let probe = train_and_report(&mut ctx.out, x, &y, &split, &tasks, &opts)?;

    if personas.len() > 1 {
        let test_ids = split.ids(crate::corpus::Split::Test);
        if test_ids.is_empty() {
            return Err(Error::Config("probe.test must be > 0 for the transfer matrix".into()));
        }
        let mut probes = BTreeMap::new();
        let mut test_x = BTreeMap::new();
        for p in &personas {
            let xp = find(p)?;
            let yp = fitted[p].aligned(xp.task_ids())?;
            probes.insert(p.clone(), crate::probekit::train_ridge(xp, &yp, &split, &opts)?);
            test_x.insert(p.clone(), xp.align(&test_ids)?);
        }
        let m = transfer_matrix(&probes, &test_x, &fitted)?;
        write_transfer(&mut ctx.out, &m)?;
    }

    if sim.steer || sim.patch {
        let pairs = pairs(ctx, &tasks)?;
        if sim.steer {
            let dir = direction(ctx, &be, Some(&probe))?;
            run_steer(ctx, &be, &dir, &pairs)?;
        }
        if sim.patch {
            run_patch(ctx, &be, &pairs)?;
        }
    }
    Ok(())
}
