//! One function per subcommand. Each reads its upstream artifacts through
//! [`Run::input`] and declares every file it writes through [`Run::output`].

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use serde::{Deserialize, Serialize};

use editlab::data::io::{read_edits, read_probes, read_world, write_edits, write_probes, write_world};
use editlab::data::{
    encode_edits, generate_world, make_edit_set, make_probe_set, shard, EncodedEdit,
    EncodedProbes, FactWorld,
};
use editlab::editor::{self, DynamicsTrace, EditOutcome, Pipeline, PipelineConfig};
use editlab::eval::{self, Baseline, EvalReport, ReportMeta};
use editlab::locations::{self, SweepRow};
use editlab::model::{build_model, enumerate_locations, load_checkpoint, save_checkpoint};
use editlab::pretrain::{self, PretrainRow};
use editlab::{ParamLocation, TransformerLM};

use crate::artifacts::{self as art, Run};

pub const RESULTS_HEADER: [&str; 11] = [
    "method",
    "pipeline",
    "batch_size",
    "location",
    "n_edits",
    "rel",
    "gen",
    "ppl_ratio",
    "fact_acc",
    "sec_per_edit",
    "seed",
];
pub const SWEEP_HEADER: [&str; 7] = [
    "layer",
    "selector",
    "reliability",
    "generalization",
    "ppl_ratio",
    "fact_acc",
    "sec_per_edit",
];
pub const DYNAMICS_HEADER: [&str; 3] = ["checkpoint_label", "shard_id", "success"];
pub const EDIT_LOG_HEADER: [&str; 2] = ["step", "loss"];
pub const PRETRAIN_LOG_HEADER: [&str; 4] = ["epoch", "loss", "fact_acc", "ppl"];
pub const STREAM_HEADER: [&str; 8] = [
    "chunk",
    "n_seen",
    "pool_size",
    "epochs",
    "rel",
    "gen",
    "ppl_ratio",
    "fact_acc",
];

/// One row of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub pipeline: String,
    pub batch_size: usize,
    pub location: String,
    pub n_edits: usize,
    pub rel: f64,
    pub gen: f64,
    pub ppl_ratio: f64,
    pub fact_acc: f64,
    pub sec_per_edit: Option<f64>,
    pub seed: u64,
}

#[derive(Serialize)]
struct SweepCsvRow {
    layer: usize,
    selector: &'static str,
    reliability: f64,
    generalization: f64,
    ppl_ratio: f64,
    fact_acc: f64,
    sec_per_edit: Option<f64>,
}

#[derive(Serialize)]
struct StreamCsvRow {
    chunk: usize,
    n_seen: usize,
    pool_size: usize,
    epochs: usize,
    rel: f64,
    gen: f64,
    ppl_ratio: f64,
    fact_acc: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Timing {
    pub seconds: f64,
    pub seconds_per_edit: f64,
    pub n_edits: usize,
    pub epochs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs_run: usize,
    pub reached_threshold: bool,
    pub final_fact_acc: f64,
    pub base_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Selection {
    pub location: ParamLocation,
    pub min_reliability: f64,
    pub base_hash: String,
    pub n_rows: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScaleReport {
    pub source: ParamLocation,
    pub source_n_layers: usize,
    pub target_n_layers: usize,
    /// `None` when the source layer does not exist in the target model.
    pub default_position: Option<ParamLocation>,
    pub proportional_position: ParamLocation,
}

/// Everything downstream of `gen-data` and `pretrain`.
struct Lab {
    world: FactWorld,
    encoded: Vec<EncodedEdit>,
    probes: EncodedProbes,
}

fn load_lab(run: &Run) -> Result<Lab> {
    let world = read_world(&run.input(art::WORLD)?)?;
    let edits = read_edits(&run.input(art::EDITS)?)?;
    let probes = read_probes(&run.input(art::PROBES)?)?;
    let tok = world.tokenizer();
    Ok(Lab {
        encoded: encode_edits(&tok, &edits),
        probes: EncodedProbes::new(&tok, &probes),
        world,
    })
}

/// The base checkpoint and the baseline measured on it, checked to belong
/// together.
fn load_base(run: &Run) -> Result<(TransformerLM, Baseline)> {
    let base = load_checkpoint(&run.input(art::BASE)?)?;
    let baseline: Baseline = read_json(&run.input(art::BASELINE)?)?;
    ensure!(
        baseline.model_hash == base.hash(),
        "{} was measured on a different checkpoint than {}",
        art::BASELINE,
        art::BASE
    );
    Ok((base, baseline))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn timing_column(run: &Run, seconds_per_edit: f64) -> Option<f64> {
    run.resolved.config.eval.wall_clock_in_csv.then_some(seconds_per_edit)
}

fn result_row(run: &Run, cfg: &PipelineConfig, report: &EvalReport) -> ResultRow {
    ResultRow {
        method: cfg.loss_mode.method().to_string(),
        pipeline: cfg.pipeline.to_string(),
        batch_size: cfg.batch_size,
        location: cfg.location.to_string(),
        n_edits: report.n_edits,
        rel: report.reliability_pct,
        gen: report.generalization_pct,
        ppl_ratio: report.capability.ppl_ratio,
        fact_acc: report.capability.heldout_fact_acc_pct,
        sec_per_edit: timing_column(run, report.seconds_per_edit),
        seed: run.seed(),
    }
}

fn metadata(run: &Run) -> ReportMeta {
    ReportMeta {
        seed: run.seed(),
        config_hash: run.resolved.hash.clone(),
        ..ReportMeta::default()
    }
}

fn with_seed(cfg: &PipelineConfig, seed: u64) -> PipelineConfig {
    PipelineConfig {
        shuffle_seed: seed,
        ..cfg.clone()
    }
}

pub fn gen_data(run: &mut Run) -> Result<()> {
    let c = &run.resolved.config;
    let seed = c.seed;
    let world = generate_world(&c.data.world_params(seed))?;
    let edits = make_edit_set(&world, c.data.n_edits, c.data.n_rephrases, c.data.rephrase_style, seed)?;
    let probes = make_probe_set(&world, &edits, c.data.n_probe_facts, seed)?;
    write_world(&run.output(art::WORLD), &world)?;
    write_edits(&run.output(art::EDITS), &edits)?;
    write_probes(&run.output(art::PROBES), &probes)?;
    eprintln!(
        "world: {} facts, vocabulary {}; {} edits; {} probe facts",
        world.facts.len(),
        world.tokenizer().vocab_size(),
        edits.len(),
        probes.heldout_facts.len()
    );
    Ok(())
}

pub fn pretrain(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let c = run.resolved.config.clone();
    let tok = lab.world.tokenizer();
    let mut model = build_model(c.model.model_config(tok.vocab_size(), c.seed))?;
    let pcfg = c.pretrain.pretrain_config(c.seed);
    let out = pretrain::pretrain(&mut model, &lab.world, &lab.probes, &pcfg, |r: &PretrainRow| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  fact_acc {:.3}  ppl {:.3}",
            r.epoch, r.loss, r.fact_acc, r.ppl
        );
    })?;
    if !out.reached_threshold {
        eprintln!(
            "warning: fact accuracy {:.3} is below the early-stop threshold {}",
            out.final_fact_acc, pcfg.early_stop_fact_acc
        );
    }
    let baseline = eval::measure_baseline(&model, &lab.probes)?;
    save_checkpoint(&model, &run.output(art::BASE))?;
    run.write_csv(art::PRETRAIN_LOG, &PRETRAIN_LOG_HEADER, &out.log)?;
    run.write_json(art::BASELINE, &baseline)?;
    run.write_json(
        art::PRETRAIN_SUMMARY,
        &PretrainSummary {
            epochs_run: out.log.len(),
            reached_threshold: out.reached_threshold,
            final_fact_acc: out.final_fact_acc,
            base_hash: baseline.model_hash.clone(),
        },
    )?;
    Ok(())
}

fn write_edit_outcome(run: &mut Run, cfg: &PipelineConfig, model: &TransformerLM, lab: &Lab, baseline: &Baseline, out: &EditOutcome) -> Result<EvalReport> {
    let report = eval::evaluate(model, &lab.encoded, &lab.probes, baseline, out.seconds_per_edit, metadata(run))?;
    save_checkpoint(model, &run.output(art::EDITED))?;
    run.write_csv(art::EDIT_LOG, &EDIT_LOG_HEADER, &out.log)?;
    run.write_json(
        art::TIMING,
        &Timing {
            seconds: out.seconds,
            seconds_per_edit: out.seconds_per_edit,
            n_edits: lab.encoded.len(),
            epochs: out.epochs,
        },
    )?;
    run.write_json(art::REPORT, &report)?;
    let row = result_row(run, cfg, &report);
    run.write_csv(art::RESULTS, &RESULTS_HEADER, &[row])?;
    Ok(report)
}

pub fn edit(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let (mut model, baseline) = load_base(run)?;
    let cfg = with_seed(&run.resolved.config.edit, run.seed());
    let out = editor::edit(&mut model, std::slice::from_ref(&lab.encoded), &cfg)?;
    let report = write_edit_outcome(run, &cfg, &model, &lab, &baseline, &out)?;
    print_report(&cfg, &report);
    Ok(())
}

fn print_report(cfg: &PipelineConfig, r: &EvalReport) {
    eprintln!(
        "{} {} batch {} at {}: rel {:.2}  gen {:.2}  ppl_ratio {:.4}  fact_acc {:.2}  {:.4} s/edit",
        cfg.loss_mode.method(),
        cfg.pipeline,
        cfg.batch_size,
        cfg.location,
        r.reliability_pct,
        r.generalization_pct,
        r.capability.ppl_ratio,
        r.capability.heldout_fact_acc_pct,
        r.seconds_per_edit
    );
}

pub fn evaluate(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let (_, baseline) = load_base(run)?;
    let model = load_checkpoint(&run.input(art::EDITED)?)?;
    let seconds_per_edit = match run.try_input(art::TIMING) {
        Some(p) => read_json::<Timing>(&p)?.seconds_per_edit,
        None => 0.0,
    };
    let cfg = run.resolved.config.edit.clone();
    let report = eval::evaluate(&model, &lab.encoded, &lab.probes, &baseline, seconds_per_edit, metadata(run))?;
    run.write_json(art::REPORT, &report)?;
    let row = result_row(run, &cfg, &report);
    run.write_csv(art::RESULTS, &RESULTS_HEADER, &[row])?;
    print_report(&cfg, &report);
    Ok(())
}

/// Depth-first then breadth-first editing of the same `k` shards from the
/// same base model.
pub fn dynamics(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let (base, baseline) = load_base(run)?;
    let c = run.resolved.config.clone();
    let shards = shard(&lab.encoded, c.dynamics.k, c.seed)?;
    let df_cfg = PipelineConfig {
        pipeline: Pipeline::DepthFirst,
        batch_size: 1,
        ..with_seed(&c.edit, c.seed)
    };
    let bf_cfg = PipelineConfig {
        pipeline: Pipeline::BreadthFirst,
        ..with_seed(&c.edit, c.seed)
    };

    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut traces: Vec<(&str, DynamicsTrace)> = Vec::new();
    for (name, cfg) in [("df", &df_cfg), ("bf", &bf_cfg)] {
        let mut model = base.clone();
        let out = editor::edit(&mut model, &shards, cfg)?;
        let report = eval::evaluate(&model, &lab.encoded, &lab.probes, &baseline, out.seconds_per_edit, metadata(run))?;
        print_report(cfg, &report);
        rows.extend(out.trace.rows());
        results.push(result_row(run, cfg, &report));
        traces.push((name, out.trace));
    }
    run.write_csv(art::DYNAMICS, &DYNAMICS_HEADER, &rows)?;
    run.write_csv(art::RESULTS, &RESULTS_HEADER, &results)?;
    run.write_json("dynamics.json", &traces.into_iter().collect::<std::collections::BTreeMap<_, _>>())?;
    Ok(())
}

pub fn sweep(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let (base, baseline) = load_base(run)?;
    let c = run.resolved.config.clone();
    if c.edit.pipeline != Pipeline::BreadthFirst {
        bail!("sweep runs the breadth-first pipeline; set edit.pipeline = \"BREADTH_FIRST\"");
    }
    let n = match c.sweep.n_edits {
        0 => lab.encoded.len(),
        n => n.min(lab.encoded.len()),
    };
    let locs = if c.sweep.locations.is_empty() {
        enumerate_locations(base.config())
    } else {
        c.sweep.locations.clone()
    };
    let cfg = with_seed(&c.edit, c.seed);
    let out = locations::sweep(&base, &lab.encoded[..n], &lab.probes, &baseline, &cfg, &locs)?;
    ensure!(
        out.restored_hashes.iter().all(|h| *h == out.base_hash),
        "a sweep row did not start from the base checkpoint"
    );
    let selected = locations::select_location(&out.result, &c.sweep.selection)?;
    let rows: Vec<SweepCsvRow> = out
        .result
        .rows
        .iter()
        .map(|r: &SweepRow| SweepCsvRow {
            layer: r.location.layer_index,
            selector: r.location.selector.as_str(),
            reliability: r.reliability,
            generalization: r.generalization,
            ppl_ratio: r.ppl_ratio,
            fact_acc: r.fact_acc,
            sec_per_edit: timing_column(run, r.sec_per_edit),
        })
        .collect();
    run.write_csv(art::SWEEP, &SWEEP_HEADER, &rows)?;
    run.write_json(
        art::SELECTION,
        &Selection {
            location: selected,
            min_reliability: c.sweep.selection.min_reliability,
            base_hash: out.base_hash,
            n_rows: rows.len(),
        },
    )?;
    eprintln!("selected location {selected} out of {} rows", rows.len());
    Ok(())
}

pub fn stream(run: &mut Run) -> Result<()> {
    let lab = load_lab(run)?;
    let (mut model, baseline) = load_base(run)?;
    let c = run.resolved.config.clone();
    let cfg = with_seed(&c.edit, c.seed);
    let out = editor::edit_streaming(&mut model, &lab.encoded, &cfg, &c.stream, &lab.probes, &baseline)?;
    let rows: Vec<StreamCsvRow> = out
        .reports
        .iter()
        .map(|r| {
            eprintln!(
                "chunk {:>3}: seen {:>5}  rel {:.2}  gen {:.2}  ppl_ratio {:.4}",
                r.chunk, r.n_seen, r.reliability_pct, r.generalization_pct, r.capability.ppl_ratio
            );
            StreamCsvRow {
                chunk: r.chunk,
                n_seen: r.n_seen,
                pool_size: r.pool_size,
                epochs: r.epochs,
                rel: r.reliability_pct,
                gen: r.generalization_pct,
                ppl_ratio: r.capability.ppl_ratio,
                fact_acc: r.capability.heldout_fact_acc_pct,
            }
        })
        .collect();
    run.write_csv(art::STREAM, &STREAM_HEADER, &rows)?;
    let last = out.reports.last().context("empty edit stream")?;
    let report = EvalReport {
        reliability_pct: last.reliability_pct,
        generalization_pct: last.generalization_pct,
        capability: last.capability,
        seconds_per_edit: out.seconds_per_edit,
        n_edits: last.n_seen,
        metadata: ReportMeta {
            baseline_hash: baseline.model_hash.clone(),
            edited_hash: model.hash(),
            ..metadata(run)
        },
    };
    run.write_json(art::REPORT, &report)?;
    run.write_csv(art::RESULTS, &RESULTS_HEADER, &[result_row(run, &cfg, &report)])?;
    Ok(())
}

pub fn scale_heuristic(run: &mut Run) -> Result<()> {
    let c = run.resolved.config.clone();
    let source = match (c.scale.source_location, run.try_input(art::SELECTION)) {
        (Some(l), _) => l,
        (None, Some(p)) => read_json::<Selection>(&p)?.location,
        (None, None) => c.edit.location,
    };
    let source_n_layers = match c.scale.source_n_layers {
        0 => c.model.n_layers,
        n => n,
    };
    let target = c.scale.target_n_layers;
    let report = ScaleReport {
        source,
        source_n_layers,
        target_n_layers: target,
        default_position: locations::default_position(source, target).ok(),
        proportional_position: locations::proportional_position(source, source_n_layers, target)?,
    };
    eprintln!(
        "{source} in {source_n_layers} layers -> default {}, proportional {} in {target} layers",
        report.default_position.map_or("n/a".to_string(), |l| l.to_string()),
        report.proportional_position
    );
    run.write_json(art::SCALE, &report)?;
    Ok(())
}

fn find_results(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_results(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == art::RESULTS) {
            found.push(p);
        }
    }
    Ok(())
}

/// Joins every `results.csv` under the output directory into `report.csv`,
/// prefixed by the run directory relative to it.
pub fn report(run: &mut Run) -> Result<()> {
    let mut files = Vec::new();
    find_results(&run.out, &mut files)?;
    let mut header = vec!["run"];
    header.extend(RESULTS_HEADER);
    let mut joined: Vec<Vec<String>> = Vec::new();
    for f in &files {
        let rel = f
            .parent()
            .and_then(|p| p.strip_prefix(&run.out).ok())
            .map(|p| if p.as_os_str().is_empty() { ".".to_string() } else { p.display().to_string() })
            .unwrap_or_default();
        let mut r = csv::Reader::from_path(f)?;
        let got: Vec<&str> = r.headers()?.iter().collect();
        ensure!(got == RESULTS_HEADER, "{} has unexpected columns {got:?}", f.display());
        for rec in r.records() {
            let mut row = vec![rel.clone()];
            row.extend(rec?.iter().map(str::to_string));
            joined.push(row);
        }
    }
    run.write_csv(art::REPORT_TABLE, &header, &joined)?;
    eprintln!("{} rows from {} results files", joined.len(), files.len());
    Ok(())
}
