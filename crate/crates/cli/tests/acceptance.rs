//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The generated world and pretrained base model are cached under the
//! cargo target directory, keyed by the hash of the settings that produce
//! them; every editing experiment reruns from that base.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use serde::de::DeserializeOwned;

use editlab::data::io::{read_edits, write_edits};
use editlab::data::{encode_edits, EncodedEdit, RephraseStyle};
use editlab::editor::{edit_breadth_first, LossMode, Pipeline, PipelineConfig};
use editlab::eval::Baseline;
use editlab::locations::{
    default_position, proportional_position, select_location, SelectionRule, SweepResult, SweepRow,
};
use editlab::model::{
    enumerate_locations, load_checkpoint, read_checkpoint, resolve_location, save_checkpoint,
    write_checkpoint,
};
use editlab::{gradcheck, seed, ParamLocation, Selector, TransformerLM};
use editlab_cli::artifacts as art;
use editlab_cli::commands::{ResultRow, Selection};
use editlab_cli::config::{sha256_hex, ExperimentConfig};
use editlab_cli::{execute, Command, Resolved};

// Tolerances and thresholds.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_H: f64 = 1e-3;
const GRAD_BUDGET_S: f64 = 60.0;
const HERMETIC_PAIRS: u64 = 10;
const HERMETIC_BUDGET_S: f64 = 300.0;
const DF_DECLINE_PTS: f64 = 20.0;
const BF_FINAL_REL: f64 = 95.0;
const BF_MONOTONE_SLACK_PTS: f64 = 2.0;
const PIPELINE_GAP_PTS: f64 = 10.0;
const LOSS_MODE_GAP_PTS: f64 = 30.0;
const BATCH_SEEDS: [u64; 3] = [0, 1, 2];
const SWEEP_ROWS: usize = 30;
const STREAM_CHUNKS: usize = 10;
const STREAM_CHUNK_SIZE: usize = 100;
const STREAM_REPLAY: f64 = 0.2;
const STREAM_FINAL_REL: f64 = 90.0;
const STREAM_MAX_PPL_RATIO: f64 = 1.25;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

struct Suite {
    root: PathBuf,
    lab: PathBuf,
    lines: Vec<(bool, String)>,
    /// Substring filter on criterion names, from `EDITLAB_ACCEPTANCE_ONLY`.
    only: Option<String>,
}

impl Suite {
    fn selected(&self, name: &str) -> bool {
        self.only.as_deref().is_none_or(|o| name.contains(o))
    }

    fn criterion(&mut self, name: &str, f: impl FnOnce(&Suite) -> Result<Verdict>) {
        if !self.selected(name) {
            return;
        }
        let t = Instant::now();
        let v = f(self).unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e:#}"),
        });
        let line = format!(
            "{} {name}: {} [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((v.pass, line));
    }

    /// Runs `commands` with `tweak` applied to the base configuration, in
    /// `runs/<name>`, reading the cached lab.
    fn run(&self, name: &str, commands: &[Command], tweak: impl FnOnce(&mut ExperimentConfig)) -> Result<PathBuf> {
        let mut c = base_config();
        c.out_dir = self.root.join("runs").join(name);
        c.input_dir = Some(self.lab.clone());
        tweak(&mut c);
        let resolved = Resolved::new(c)?;
        for &cmd in commands {
            execute(cmd, &resolved).with_context(|| format!("{name}: {}", cmd.name()))?;
        }
        Ok(resolved.config.out_dir)
    }
}

/// Desk-scale settings shared by every experiment.
fn base_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.sweep.n_edits = 100;
    c
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path).with_context(|| path.display().to_string())?)?)
}

fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| path.display().to_string())?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn results(dir: &Path) -> Result<Vec<ResultRow>> {
    read_csv(&dir.join(art::RESULTS))
}

fn single_result(dir: &Path) -> Result<ResultRow> {
    results(dir)?.into_iter().next().context("empty results.csv")
}

/// Generates the data and pretrains the base model unless a cached copy
/// produced by the same settings exists.
fn prepare_lab(root: &Path) -> Result<(PathBuf, String)> {
    let c = base_config();
    let key = serde_json::to_string(&(&c.seed, &c.model, &c.data, &c.pretrain))?;
    let lab = root.join(format!("lab-{}", &sha256_hex(key.as_bytes())[..16]));
    let mut lc = c.clone();
    lc.out_dir = lab.clone();
    let resolved = Resolved::new(lc)?;
    if !lab.join("pretrain.manifest.json").is_file() {
        eprintln!("preparing base model in {} (cached for later runs)", lab.display());
        execute(Command::GenData, &resolved)?;
        execute(Command::Pretrain, &resolved)?;
    }
    let summary: serde_json::Value = read_json(&lab.join(art::PRETRAIN_SUMMARY))?;
    let baseline: Baseline = read_json(&lab.join(art::BASELINE))?;
    let note = format!(
        "base model: {} pretraining epochs, held-out fact accuracy {:.1}%, threshold reached: {}",
        summary["epochs_run"], baseline.heldout_fact_acc_pct, summary["reached_threshold"]
    );
    Ok((lab, note))
}

fn gradient_correctness(_: &Suite) -> Result<Verdict> {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    let cases = gradcheck::cases();
    for case in &cases {
        for s in 0..GRAD_SEEDS {
            let e = gradcheck::relative_error(case, s, GRAD_H);
            if e > worst.0 || e.is_nan() {
                worst = (e, case.name);
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst.0 < GRAD_TOL && secs < GRAD_BUDGET_S,
        format!(
            "{} primitives x {GRAD_SEEDS} seeds, worst relative error {:.2e} ({}), {secs:.1}s",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

fn lab_edits(s: &Suite) -> Result<Vec<EncodedEdit>> {
    let world = editlab::data::io::read_world(&s.lab.join(art::WORLD))?;
    Ok(encode_edits(&world.tokenizer(), &read_edits(&s.lab.join(art::EDITS))?))
}

fn hermeticity(s: &Suite) -> Result<Verdict> {
    let t = Instant::now();
    let base = load_checkpoint(&s.lab.join(art::BASE))?;
    let edits = lab_edits(s)?;
    let all = enumerate_locations(base.config());
    let mut violations = Vec::new();
    let mut tried = Vec::new();
    for pair in 0..HERMETIC_PAIRS {
        let draw = seed::substream(pair, "hermeticity");
        let loc = all[(draw % all.len() as u64) as usize];
        let start = ((draw >> 32) % (edits.len() - 20) as u64) as usize;
        let mut model = base.clone();
        let cfg = PipelineConfig {
            location: loc,
            max_epochs: 2,
            batch_size: 4,
            shuffle_seed: pair,
            bf_stop_reliability: None,
            ..PipelineConfig::default()
        };
        edit_breadth_first(&mut model, &[edits[start..start + 20].to_vec()], &cfg)?;
        let inside = resolve_location(base.config(), loc)?;
        let mut changed_inside = false;
        for ((name, a), b) in base.names().iter().zip(base.params()).zip(model.params()) {
            let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            if inside.contains(name) {
                changed_inside |= !same;
            } else if !same {
                violations.push(format!("{name} changed under {loc}"));
            }
        }
        ensure!(changed_inside, "editing at {loc} changed nothing");
        tried.push(loc.to_string());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        violations.is_empty() && secs < HERMETIC_BUDGET_S,
        if violations.is_empty() {
            format!("{HERMETIC_PAIRS} (seed, location) pairs bit-identical outside the location ({})", tried.join(", "))
        } else {
            violations.join("; ")
        },
    )
}

type Traces = BTreeMap<String, editlab::editor::DynamicsTrace>;

fn df_overwriting(dir: &Path) -> Result<Verdict> {
    let traces: Traces = read_json(&dir.join("dynamics.json"))?;
    let df = &traces["df"];
    let series = df.shard_series(0);
    ensure!(series.len() == df.k, "shard 1 appears in {} DF checkpoints", series.len());
    let own = 100.0 * series[0];
    let last = 100.0 * series[series.len() - 1];
    verdict(
        own - last >= DF_DECLINE_PTS,
        format!("shard-1 success {own:.1}% at its completion, {last:.1}% at the end (decline {:.1} pts)", own - last),
    )
}

fn bf_convergence(dir: &Path) -> Result<Verdict> {
    let traces: Traces = read_json(&dir.join("dynamics.json"))?;
    let bf = &traces["bf"];
    let rows = results(dir)?;
    let bf_row = rows.iter().find(|r| r.pipeline == "BREADTH_FIRST").context("no BF row")?;
    let mut worst_drop = 0.0f64;
    for shard in 0..bf.k {
        let series = bf.shard_series(shard);
        for w in series.windows(2) {
            worst_drop = worst_drop.max(100.0 * (w[0] - w[1]));
        }
    }
    verdict(
        bf_row.rel >= BF_FINAL_REL && worst_drop <= BF_MONOTONE_SLACK_PTS,
        format!(
            "final reliability {:.1}% after {} epochs, largest per-shard drop {worst_drop:.1} pts",
            bf_row.rel,
            bf.checkpoints.len()
        ),
    )
}

/// The DF row of the dynamics run against a breadth-first batch-1 edit
/// with the same loss mode, location and seed.
fn pipeline_ordering(s: &Suite, dir: &Path) -> Result<Verdict> {
    let df = results(dir)?
        .into_iter()
        .find(|r| r.pipeline == "DEPTH_FIRST")
        .context("no DF row")?;
    let bf = single_result(&s.run("bf_batch_1", &[Command::Edit], |c| {
        c.edit.pipeline = Pipeline::BreadthFirst;
        c.edit.batch_size = 1;
    })?)?;
    ensure!(
        bf.batch_size == 1 && df.method == bf.method && df.location == bf.location && df.seed == bf.seed,
        "BF and DF runs are not matched"
    );
    verdict(
        bf.rel - df.rel >= PIPELINE_GAP_PTS,
        format!("{} at {}: BF batch 1 {:.1}% vs DF {:.1}%", bf.method, bf.location, bf.rel, df.rel),
    )
}

fn loss_mode_ordering(s: &Suite) -> Result<Verdict> {
    let ftm = single_result(&s.run("loss_full_target", &[Command::Edit], |c| c.edit.loss_mode = LossMode::FullTarget)?)?;
    let ftl = single_result(&s.run("loss_last_token", &[Command::Edit], |c| c.edit.loss_mode = LossMode::LastToken)?)?;
    verdict(
        ftm.rel - ftl.rel >= LOSS_MODE_GAP_PTS,
        format!("FULL_TARGET {:.1}% vs LAST_TOKEN {:.1}%", ftm.rel, ftl.rel),
    )
}

fn batch_capability(s: &Suite) -> Result<Verdict> {
    let mut parts = Vec::new();
    let mut pass = true;
    for seed in BATCH_SEEDS {
        let mut ppl = [0.0; 2];
        for (i, bs) in [1usize, 32].into_iter().enumerate() {
            let dir = s.run(&format!("batch_{bs}_seed_{seed}"), &[Command::Edit], |c| {
                c.seed = seed;
                c.edit.batch_size = bs;
                c.edit.bf_stop_reliability = None;
            })?;
            ppl[i] = single_result(&dir)?.ppl_ratio;
        }
        pass &= ppl[1] <= ppl[0];
        parts.push(format!("seed {seed}: b32 {:.4} vs b1 {:.4}", ppl[1], ppl[0]));
    }
    verdict(pass, format!("ppl_ratio {}", parts.join("; ")))
}

fn heuristic_arithmetic(_: &Suite) -> Result<Verdict> {
    let loc = |i| ParamLocation::new(i, Selector::MlpDown);
    let worked = proportional_position(loc(6), 28, 80)?;
    let mut identity = true;
    for t in 1..=96 {
        for i in 0..t {
            identity &= default_position(loc(i), t)? == loc(i);
        }
    }
    let mut monotone = true;
    for src in 1..=64 {
        for tgt in 1..=128 {
            let mut prev = 0;
            for i in 0..src {
                let p = proportional_position(loc(i), src, tgt)?.layer_index;
                monotone &= p >= prev;
                prev = p;
            }
        }
    }
    verdict(
        worked == loc(19) && identity && monotone,
        format!(
            "index 6 of 28 -> index {} of 80; default identity {identity}; monotone over 64x128 depth pairs {monotone}",
            worked.layer_index
        ),
    )
}

fn hand_oracle_selection() -> Result<bool> {
    let row = |layer, sel, rel, gen, ppl| SweepRow {
        location: ParamLocation::new(layer, sel),
        reliability: rel,
        generalization: gen,
        ppl_ratio: ppl,
        fact_acc: 90.0,
        sec_per_edit: 0.0,
    };
    // Row 0 has the best capability but misses the reliability floor; rows
    // 1 and 3 tie on capability, and 3 generalizes better.
    let table = SweepResult {
        rows: vec![
            row(5, Selector::MlpDown, 90.0, 80.0, 1.01),
            row(4, Selector::MlpDown, 99.0, 60.0, 1.05),
            row(2, Selector::FullMlp, 100.0, 90.0, 1.20),
            row(3, Selector::MlpUp, 98.5, 70.0, 1.05),
        ],
    };
    let picked = select_location(&table, &SelectionRule { min_reliability: 0.98 })?;
    Ok(picked == ParamLocation::new(3, Selector::MlpUp))
}

fn sweep_integrity(s: &Suite) -> Result<Verdict> {
    let dir = s.run("sweep", &[Command::Sweep], |_| {})?;
    #[derive(serde::Deserialize)]
    struct Row {
        layer: usize,
        selector: String,
    }
    let rows: Vec<Row> = read_csv(&dir.join(art::SWEEP))?;
    let sel: Selection = read_json(&dir.join(art::SELECTION))?;
    let base = load_checkpoint(&s.lab.join(art::BASE))?;
    let distinct: std::collections::BTreeSet<(usize, String)> = rows.iter().map(|r| (r.layer, r.selector.clone())).collect();
    let oracle = hand_oracle_selection()?;
    verdict(
        rows.len() == SWEEP_ROWS && distinct.len() == SWEEP_ROWS && sel.base_hash == base.hash() && oracle,
        format!(
            "{} rows over {} distinct locations, every row restored to the base hash, selected {}; hand-oracle table {}",
            rows.len(),
            distinct.len(),
            sel.location,
            if oracle { "matches" } else { "differs" }
        ),
    )
}

fn streaming(s: &Suite) -> Result<Verdict> {
    let dir = s.run("stream", &[Command::Stream], |c| {
        c.stream.chunk_size = STREAM_CHUNK_SIZE;
        c.stream.replay_fraction = STREAM_REPLAY;
    })?;
    #[derive(serde::Deserialize)]
    struct Row {
        n_seen: usize,
        rel: f64,
        ppl_ratio: f64,
    }
    let rows: Vec<Row> = read_csv(&dir.join(art::STREAM))?;
    let last = rows.last().context("no chunks")?;
    let curve: Vec<String> = rows.iter().map(|r| format!("{:.0}", r.rel)).collect();
    verdict(
        rows.len() == STREAM_CHUNKS
            && last.n_seen == STREAM_CHUNKS * STREAM_CHUNK_SIZE
            && last.rel >= STREAM_FINAL_REL
            && last.ppl_ratio <= STREAM_MAX_PPL_RATIO,
        format!(
            "{} chunks, cumulative reliability per chunk [{}]%, final ppl_ratio {:.4}",
            rows.len(),
            curve.join(", "),
            last.ppl_ratio
        ),
    )
}

fn csv_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "csv") {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p)?);
        }
    }
    Ok(out)
}

/// The CSVs a subcommand lists in its manifest, with their bytes.
fn written_csvs(dir: &Path, subcommand: &str) -> Result<BTreeMap<String, Vec<u8>>> {
    let manifest: serde_json::Value = read_json(&dir.join(format!("{subcommand}.manifest.json")))?;
    let mut out = BTreeMap::new();
    for name in manifest["artifacts"].as_object().context("manifest without artifacts")?.keys() {
        if name.ends_with(".csv") {
            out.insert(name.clone(), fs::read(dir.join(name))?);
        }
    }
    Ok(out)
}

/// Every subcommand on a small self-contained lab, run twice in the same
/// directory; then the full-scale edit run, repeated.
fn determinism(s: &Suite, edit_dir: &Path) -> Result<Verdict> {
    let mut c = ExperimentConfig::default();
    c.out_dir = s.root.join("runs").join("determinism");
    c.data.n_entities = 40;
    c.data.n_relations = 4;
    c.data.n_facts = 160;
    c.data.n_edits = 20;
    c.data.n_probe_facts = 20;
    c.model.n_layers = 2;
    c.model.d_model = 32;
    c.model.d_mlp = 64;
    c.model.n_heads = 2;
    c.pretrain.epochs = 3;
    c.edit.location = ParamLocation::new(1, Selector::MlpDown);
    c.edit.max_epochs = 3;
    c.stream.chunk_size = 7;
    c.stream.replay_fraction = 0.5;
    c.stream.epochs_per_chunk = 2;
    let resolved = Resolved::new(c)?;
    let order = [
        Command::GenData,
        Command::Pretrain,
        Command::Edit,
        Command::Eval,
        Command::Dynamics,
        Command::Sweep,
        Command::Stream,
        Command::ScaleHeuristic,
        Command::Report,
    ];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let mut per_command = Vec::new();
        for cmd in order {
            execute(cmd, &resolved)?;
            per_command.push((cmd.name(), written_csvs(&resolved.config.out_dir, cmd.name())?));
        }
        snapshots.push(per_command);
    }
    let mut diffs = Vec::new();
    let mut files = 0;
    for ((name, a), (_, b)) in snapshots[0].iter().zip(&snapshots[1]) {
        files += a.len();
        if a != b {
            diffs.push(name.to_string());
        }
    }

    let before = csv_bytes(edit_dir)?;
    let again = s.run("loss_full_target", &[Command::Edit], |c| c.edit.loss_mode = LossMode::FullTarget)?;
    let full_scale_same = before == csv_bytes(&again)? && !before.is_empty();
    verdict(
        diffs.is_empty() && full_scale_same,
        format!(
            "{} subcommands rerun with config hash {}: {} CSV snapshots {}; full-scale edit rerun {}",
            order.len(),
            &resolved.hash[..12],
            files,
            if diffs.is_empty() { "identical".to_string() } else { format!("differ after {}", diffs.join(", ")) },
            if full_scale_same { "identical" } else { "differs" }
        ),
    )
}

fn round_trips(s: &Suite) -> Result<Verdict> {
    let base = load_checkpoint(&s.lab.join(art::BASE))?;
    let mut bytes = Vec::new();
    write_checkpoint(&base, &mut bytes)?;
    let back: TransformerLM = read_checkpoint(bytes.as_slice())?;
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again)?;
    let bit_exact = base
        .params()
        .iter()
        .zip(back.params())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let tmp = s.root.join("runs").join("roundtrip");
    fs::create_dir_all(&tmp)?;
    save_checkpoint(&back, &tmp.join("copy.ckpt"))?;
    let file_same = fs::read(tmp.join("copy.ckpt"))? == bytes;

    let mut edits = read_edits(&s.lab.join(art::EDITS))?;
    edits.truncate(50);
    if let Some(e) = edits.first_mut() {
        e.rephrase_style = RephraseStyle::PrefixNoise;
        e.rephrase_prompts.push("quoted \"text\", commas, and unicode \u{e9}".into());
    }
    write_edits(&tmp.join("edits.jsonl"), &edits)?;
    let edits_same = read_edits(&tmp.join("edits.jsonl"))? == edits;
    verdict(
        bit_exact && bytes == again && file_same && edits_same && back.hash() == base.hash(),
        format!(
            "checkpoint of {} parameters bit-exact: {bit_exact}, re-encoding identical: {}; {} JSONL edits equal: {edits_same}",
            base.num_parameters(),
            bytes == again && file_same,
            edits.len()
        ),
    )
}

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let started = Instant::now();
    let (lab, note) = match prepare_lab(&root) {
        Ok(x) => x,
        Err(e) => {
            println!("FAIL setup: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    println!("{note}");
    let mut suite = Suite {
        root: root.clone(),
        lab,
        lines: Vec::new(),
        only: std::env::var("EDITLAB_ACCEPTANCE_ONLY").ok(),
    };

    suite.criterion("gradient correctness", gradient_correctness);
    suite.criterion("localization hermeticity", hermeticity);
    let needs_dynamics = ["DF overwriting", "BF joint convergence", "pipeline ordering"]
        .iter()
        .any(|n| suite.selected(n));
    let dynamics = if needs_dynamics {
        suite.run("dynamics", &[Command::Dynamics], |_| {})
    } else {
        Err(anyhow::anyhow!("dynamics run skipped"))
    };
    let dyn_dir = |d: &Result<PathBuf>| d.as_ref().map(Clone::clone).map_err(|e| anyhow::anyhow!("{e:#}"));
    suite.criterion("DF overwriting", |_| df_overwriting(&dyn_dir(&dynamics)?));
    suite.criterion("BF joint convergence", |_| bf_convergence(&dyn_dir(&dynamics)?));
    suite.criterion("pipeline ordering", |s| pipeline_ordering(s, &dyn_dir(&dynamics)?));
    suite.criterion("loss-mode ordering", loss_mode_ordering);
    suite.criterion("batch-size capability effect", batch_capability);
    suite.criterion("heuristic arithmetic", heuristic_arithmetic);
    suite.criterion("sweep integrity", sweep_integrity);
    suite.criterion("streaming scaling", streaming);
    let edit_dir = root.join("runs").join("loss_full_target");
    suite.criterion("determinism", |s| determinism(s, &edit_dir));
    suite.criterion("format round-trips", round_trips);

    let failed = suite.lines.iter().filter(|(p, _)| !p).count();
    println!(
        "{} of {} criteria passed in {:.0}s",
        suite.lines.len() - failed,
        suite.lines.len(),
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
