use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use serde::Serialize;

use meco_core::decision::{self, fit_dual_thresholds, fit_p_yes_threshold, policy_accuracy};
use meco_core::eval::{self, ContextMode, Grouping, Suite};
use meco_core::probe::{self, ProbeSet, ProbeTraining};
use meco_core::store::{self, layer_from_end, ActivationRecord, ContainerHeader, MAGIC};
use meco_core::synth::{self, MixtureSpec, PlantedSpec};
use meco_core::{DecisionPolicy, PolicyKind, ScoredItem, TokenMode};

use crate::{
    Command, DecideArgs, DistReportArgs, EvaluateArgs, FitPolicyArgs, Format, PolicyChoice,
    ProbeReportArgs, ScoringArgs, SuiteArg, SynthCommand, SynthMixtureArgs, SynthPlantedArgs,
    TrainProbeArgs,
};

const DOMAIN: u8 = 1;
const USAGE: u8 = 2;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    /// I/O failures anywhere in the chain are usage errors, the rest are
    /// domain errors.
    fn from(error: anyhow::Error) -> Self {
        let code = if error.chain().any(|c| c.is::<io::Error>()) {
            USAGE
        } else {
            DOMAIN
        };
        Self { code, error }
    }
}

macro_rules! failure_from {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                anyhow::Error::from(e).into()
            }
        }
    )*};
}

failure_from!(
    io::Error,
    serde_json::Error,
    meco_core::StoreError,
    meco_core::ProbeError,
    meco_core::DecisionError,
    meco_core::EvalError,
    meco_core::SynthError
);

type Result<T> = std::result::Result<T, Failure>;

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: USAGE,
        error: anyhow!("{msg}"),
    }
}

fn domain(msg: impl std::fmt::Display) -> Failure {
    Failure {
        code: DOMAIN,
        error: anyhow!("{msg}"),
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(SynthCommand::Planted(a)) => synth_planted(a),
        Command::Synth(SynthCommand::Mixture(a)) => synth_mixture(a),
        Command::TrainProbe(a) => train_probe(a),
        Command::ProbeReport(a) => probe_report(a),
        Command::FitPolicy(a) => fit_policy(a),
        Command::Decide(a) => decide(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DistReport(a) => dist_report(a),
    }
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!(
            "input {} does not exist or is not a file",
            path.display()
        )))
    }
}

fn require_output(path: &Path) -> Result<()> {
    if path.is_dir() {
        return Err(usage(format!("output {} is a directory", path.display())));
    }
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(usage(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ => Ok(()),
    }
}

fn require_scoring_inputs(scoring: &ScoringArgs) -> Result<()> {
    if let Some(p) = &scoring.probes {
        require_input(p)?;
        require_input(&probe::blob_path(p))?;
    }
    if let Some(a) = &scoring.activations {
        require_input(a)?;
    }
    Ok(())
}

/// Stages every file, then renames them into place; a failure while staging
/// leaves all targets untouched.
fn write_outputs(outputs: &[(&Path, &[u8])]) -> Result<()> {
    let mut staged = Vec::with_capacity(outputs.len());
    for (path, bytes) in outputs {
        staged.push((*path, meco_core::io::stage(path, |f| f.write_all(bytes))?));
    }
    for (path, s) in staged {
        s.commit(path)?;
    }
    Ok(())
}

fn read_activations(path: &Path) -> Result<(ContainerHeader, Vec<ActivationRecord>)> {
    let mut file = File::open(path)?;
    let mut head = [0u8; 8];
    let n = file.read(&mut head)?;
    drop(file);
    let result = if n == MAGIC.len() && head == MAGIC {
        store::read_container(path)
    } else if head[..n].first() == Some(&b'{') {
        store::read_debug_jsonl(BufReader::new(File::open(path)?))
    } else {
        store::read_container(path)
    };
    result.map_err(|e| {
        Failure::from(anyhow::Error::from(e).context(format!("reading {}", path.display())))
    })
}

fn read_scored(path: &Path) -> Result<Vec<ScoredItem>> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: ScoredItem = serde_json::from_str(&line)
            .map_err(|e| domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        item.validate()
            .map_err(|e| domain(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if !seen.insert(item.item_id) {
            return Err(domain(format!(
                "{}:{}: duplicate item_id {}",
                path.display(),
                i + 1,
                item.item_id
            )));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(domain(format!(
            "{} contains no scored items",
            path.display()
        )));
    }
    Ok(items)
}

fn read_policy(path: &Path) -> Result<DecisionPolicy> {
    let text = fs::read_to_string(path)?;
    DecisionPolicy::from_json(&text).map_err(|e| {
        Failure::from(anyhow::Error::from(e).context(format!("reading {}", path.display())))
    })
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("value serializes");
        out.push(b'\n');
    }
    out
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

fn token_mode(strict: bool) -> TokenMode {
    if strict {
        TokenMode::Strict
    } else {
        TokenMode::Lenient
    }
}

/// Loaded probes and first-token activations.
struct Scorer {
    probes: ProbeSet,
    records: Vec<ActivationRecord>,
}

impl Scorer {
    fn load(scoring: &ScoringArgs) -> Result<Option<Self>> {
        let (Some(p), Some(a)) = (&scoring.probes, &scoring.activations) else {
            return Ok(None);
        };
        let probes = probe::load_probe_set(p)?;
        let (header, records) = read_activations(a)?;
        if header.d != probes.d {
            return Err(domain(format!(
                "activations have d={}, probes have d={}",
                header.d, probes.d
            )));
        }
        Ok(Some(Self { probes, records }))
    }

    fn layer(&self, scoring: &ScoringArgs) -> Result<u32> {
        match scoring.layer {
            Some(l) => Ok(l),
            None => Ok(decision::select_layer(&self.probes, scoring.layer_window)?),
        }
    }

    fn attach(&self, layer: u32, items: &mut [ScoredItem]) -> Result<()> {
        decision::attach_scores(&self.probes, layer, &self.records, items)?;
        Ok(())
    }
}

fn synth_planted(a: SynthPlantedArgs) -> Result<()> {
    require_output(&a.output)?;
    if let Some(p) = &a.direction_output {
        require_output(p)?;
    }
    if a.layers == 0 {
        return Err(usage("--layers must be positive"));
    }
    let mut spec = PlantedSpec::with_random_direction(a.dim, a.pairs, a.signal, a.noise, a.seed);
    spec.layers = (0..a.layers).collect();
    spec.truncations_per_query = a.truncations;
    let records = synth::generate_planted(&spec)?;
    let header = spec.header(&a.model_id);
    let mut bytes = Vec::new();
    if a.debug_jsonl {
        store::write_debug_jsonl(&header, &records, &mut bytes)?;
    } else {
        store::write_records(&header, &records, &mut bytes)?;
    }
    let direction = a.direction_output.as_ref().map(|_| {
        pretty_json(&serde_json::json!({
            "d": spec.d,
            "seed": spec.seed,
            "direction": spec.direction,
        }))
    });
    let mut outputs: Vec<(&Path, &[u8])> = vec![(&a.output, &bytes)];
    if let (Some(p), Some(d)) = (&a.direction_output, &direction) {
        outputs.push((p, d));
    }
    write_outputs(&outputs)?;
    eprintln!(
        "wrote {} records ({} pairs x {} layer(s), d={}) to {}",
        records.len(),
        a.pairs,
        a.layers,
        a.dim,
        a.output.display()
    );
    Ok(())
}

fn synth_mixture(a: SynthMixtureArgs) -> Result<()> {
    if let Some(p) = &a.spec {
        require_input(p)?;
    }
    require_output(&a.output)?;
    for p in [&a.benchmark_output, &a.oracle_output]
        .into_iter()
        .flatten()
    {
        require_output(p)?;
    }
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str::<MixtureSpec>(&fs::read_to_string(p)?)
            .map_err(|e| domain(format!("{}: {e}", p.display())))?,
        None => MixtureSpec::example(a.n, a.seed),
    };
    spec.n = a.n;
    spec.seed = a.seed;
    let mut data = synth::generate_mixture(&spec)?;
    for item in &mut data.items {
        item.item_id += a.id_offset;
    }
    let suite = match a.suite {
        SuiteArg::Metatool => Suite::Metatool,
        SuiteArg::MecaTool => Suite::MeCaTool,
        SuiteArg::MecaRag => Suite::MeCaRAG,
    };
    let items = to_jsonl(&data.items);
    let bench = a.benchmark_output.as_ref().map(|_| {
        to_jsonl(&synth::synthetic_benchmark(
            &data.items,
            suite,
            ContextMode::WithContext,
        ))
    });
    let oracle = a.oracle_output.as_ref().map(|_| pretty_json(&data.bayes));
    let mut outputs: Vec<(&Path, &[u8])> = vec![(&a.output, &items)];
    if let (Some(p), Some(b)) = (&a.benchmark_output, &bench) {
        outputs.push((p, b));
    }
    if let (Some(p), Some(o)) = (&a.oracle_output, &oracle) {
        outputs.push((p, o));
    }
    write_outputs(&outputs)?;
    eprintln!(
        "wrote {} items; Bayes accuracy {:.4} (l_yes={}, l_no={})",
        data.items.len(),
        data.bayes.accuracy,
        data.bayes.l_yes,
        data.bayes.l_no
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct AccuracyRow {
    layer_index: u32,
    layer_from_end: i64,
    heldout_accuracy: f64,
    train_pairs: usize,
    heldout_pairs: usize,
}

fn accuracy_rows(set: &ProbeSet) -> Vec<AccuracyRow> {
    set.probes
        .iter()
        .map(|p| AccuracyRow {
            layer_index: p.layer_index,
            layer_from_end: layer_from_end(p.layer_index, set.layers),
            heldout_accuracy: p.heldout_accuracy,
            train_pairs: p.train_pairs,
            heldout_pairs: p.heldout_pairs,
        })
        .collect()
}

fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut s =
        String::from("layer_index,layer_from_end,heldout_accuracy,train_pairs,heldout_pairs\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.layer_index, r.layer_from_end, r.heldout_accuracy, r.train_pairs, r.heldout_pairs
        );
    }
    s
}

fn accuracy_table(rows: &[AccuracyRow], selected: Option<u32>) -> String {
    let mut s = format!(
        "{:>6} {:>5} {:>9} {:>6} {:>8}\n",
        "layer", "-j", "accuracy", "train", "heldout"
    );
    for r in rows {
        let mark = if selected == Some(r.layer_index) {
            " *"
        } else {
            ""
        };
        let _ = writeln!(
            s,
            "{:>6} {:>5} {:>9.4} {:>6} {:>8}{mark}",
            r.layer_index, r.layer_from_end, r.heldout_accuracy, r.train_pairs, r.heldout_pairs
        );
    }
    s
}

fn default_table_path(output: &Path, format: Format) -> PathBuf {
    let stem = output
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("probes");
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    output.with_file_name(format!("{stem}.accuracy.{ext}"))
}

fn train_probe(a: TrainProbeArgs) -> Result<()> {
    require_input(&a.input)?;
    require_output(&a.output)?;
    let table_path = a
        .table
        .clone()
        .unwrap_or_else(|| default_table_path(&a.output, a.format));
    require_output(&table_path)?;
    if table_path == a.output || table_path == probe::blob_path(&a.output) {
        return Err(usage("accuracy table path collides with the probe files"));
    }

    let (header, records) = read_activations(&a.input)?;
    let fit = probe::fit_probe_set(
        &header,
        &records,
        ProbeTraining {
            seed: a.seed,
            split_fraction: a.split_fraction,
        },
    )?;
    if !fit.orphans.is_empty() {
        eprintln!(
            "warning: {} record(s) without a partner arm were skipped",
            fit.orphans.len()
        );
    }
    let rows = accuracy_rows(&fit.probe_set);
    let table = match a.format {
        Format::Csv => accuracy_csv(&rows).into_bytes(),
        Format::Json => pretty_json(&rows),
    };
    let selected = decision::select_layer(&fit.probe_set, decision::LayerWindow::default()).ok();

    probe::save_probe_set(&fit.probe_set, &a.output)?;
    write_outputs(&[(&table_path, &table)])?;
    print!("{}", accuracy_table(&rows, selected));
    Ok(())
}

fn probe_report(a: ProbeReportArgs) -> Result<()> {
    require_input(&a.input)?;
    require_input(&probe::blob_path(&a.input))?;
    if let Some(o) = &a.output {
        require_output(o)?;
    }
    let set = probe::load_probe_set(&a.input)?;
    let rows = accuracy_rows(&set);
    let selected = decision::select_layer(&set, a.layer_window);
    let text = match a.format {
        Format::Csv => accuracy_csv(&rows),
        Format::Json => String::from_utf8(pretty_json(&serde_json::json!({
            "concept": set.concept,
            "model_id": set.model_id,
            "layer_window": a.layer_window.to_string(),
            "selected_layer": selected.as_ref().ok(),
            "layers": rows,
        })))
        .expect("json is utf-8"),
    };
    match &a.output {
        Some(o) => {
            write_outputs(&[(o, text.as_bytes())])?;
            print!("{}", accuracy_table(&rows, selected.as_ref().ok().copied()));
        }
        None => print!("{text}"),
    }
    match selected {
        Ok(l) => eprintln!("selected layer {l} in window {}", a.layer_window),
        Err(e) => eprintln!("no layer selected: {e}"),
    }
    Ok(())
}

fn fit_policy(a: FitPolicyArgs) -> Result<()> {
    require_input(&a.input)?;
    require_scoring_inputs(&a.scoring)?;
    require_output(&a.output)?;
    if a.policy == PolicyChoice::Meco && a.scoring.probes.is_none() && a.scoring.layer.is_none() {
        return Err(usage(
            "a MeCo fit needs --probes with --activations, or --layer naming the layer the scores came from",
        ));
    }

    let mut items = read_scored(&a.input)?;
    let dataset_id = a.dataset_id.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("validation")
            .to_string()
    });
    let mut policy = match a.policy {
        PolicyChoice::Meco => {
            let layer = match Scorer::load(&a.scoring)? {
                Some(scorer) => {
                    let layer = scorer.layer(&a.scoring)?;
                    scorer.attach(layer, &mut items)?;
                    layer
                }
                None => a.scoring.layer.expect("checked above"),
            };
            fit_dual_thresholds(&items, layer, &dataset_id)?
        }
        PolicyChoice::PYes => fit_p_yes_threshold(&items, &dataset_id)?,
        PolicyChoice::Naive => DecisionPolicy::naive(),
    };
    if let Some(fit) = &mut policy.fit {
        fit.seed = Some(a.seed);
    }
    write_outputs(&[(&a.output, &policy.to_json().into_bytes())])?;

    match &policy.fit {
        Some(fit) => {
            println!(
                "policy {} fitted on {} items",
                policy.name(),
                fit.validation_items
            );
            if fit.excluded_other > 0 {
                println!(
                    "excluded {} item(s) with a first token other than Yes/No",
                    fit.excluded_other
                );
            }
            println!("naive accuracy  {:.4}", fit.naive_accuracy);
            println!("fitted accuracy {:.4}", fit.fitted_accuracy);
        }
        None => println!(
            "naive accuracy {:.4}",
            policy_accuracy(&policy, &items, TokenMode::Strict)
        ),
    }
    match &policy.kind {
        PolicyKind::MeCo {
            layer_index,
            l_yes,
            l_no,
        } => {
            println!("layer {layer_index}, l_yes {l_yes}, l_no {l_no}")
        }
        PolicyKind::PYes { l } => println!("l {l}"),
        PolicyKind::Naive => {}
    }
    Ok(())
}

fn meco_layer(policy: &DecisionPolicy) -> Option<u32> {
    match policy.kind {
        PolicyKind::MeCo { layer_index, .. } => Some(layer_index),
        _ => None,
    }
}

/// Scores items at the layer the MeCo policies were fitted on when probes and
/// activations are supplied.
fn score_for_policies(
    scoring: &ScoringArgs,
    policies: &[DecisionPolicy],
    items: &mut [ScoredItem],
) -> Result<()> {
    let layers: BTreeSet<u32> = policies.iter().filter_map(meco_layer).collect();
    let Some(scorer) = Scorer::load(scoring)? else {
        return Ok(());
    };
    let layer = match layers.len() {
        0 => scorer.layer(scoring)?,
        1 => *layers.first().expect("one layer"),
        _ => {
            return Err(domain(format!(
                "MeCo policies were fitted on different layers {layers:?}; evaluate them separately"
            )))
        }
    };
    scorer.attach(layer, items)
}

#[derive(Debug, Serialize)]
struct DecisionLine<'a> {
    item_id: u64,
    policy: &'a str,
    #[serde(flatten)]
    decision: Option<meco_core::Decision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn decide(a: DecideArgs) -> Result<()> {
    require_input(&a.input)?;
    require_input(&a.policy)?;
    require_scoring_inputs(&a.scoring)?;
    require_output(&a.output)?;

    let policy = read_policy(&a.policy)?;
    let mut items = read_scored(&a.input)?;
    score_for_policies(&a.scoring, std::slice::from_ref(&policy), &mut items)?;
    let mode = token_mode(a.strict_tokens);

    let mut lines = Vec::with_capacity(items.len());
    let (mut flipped, mut unparsed) = (0usize, 0usize);
    for item in &items {
        match policy.decide(item, mode) {
            Ok(d) => {
                flipped += usize::from(d.flipped);
                lines.push(DecisionLine {
                    item_id: item.item_id,
                    policy: policy.name(),
                    decision: Some(d),
                    error: None,
                });
            }
            Err(e @ meco_core::DecisionError::UnparseableResponse { .. }) => {
                unparsed += 1;
                lines.push(DecisionLine {
                    item_id: item.item_id,
                    policy: policy.name(),
                    decision: None,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    write_outputs(&[(&a.output, &to_jsonl(&lines))])?;
    eprintln!(
        "{} decisions with {}: {flipped} flipped, {unparsed} unparsed",
        lines.len(),
        policy.name()
    );
    Ok(())
}

fn parse_grouping(spec: &str) -> Result<Grouping> {
    let mut g = Grouping::NONE;
    if spec.trim() == "none" {
        return Ok(g);
    }
    for field in spec.split(',').map(str::trim).filter(|f| !f.is_empty()) {
        match field {
            "suite" => g.suite = true,
            "task" => g.task = true,
            "context_mode" | "context" => g.context_mode = true,
            other => return Err(usage(format!("unknown grouping field {other:?}"))),
        }
    }
    Ok(g)
}

#[derive(Debug, Serialize)]
struct TransferSummary {
    policy: usize,
    fit_suite: String,
    eval_suite: String,
    shifts: Vec<eval::ScoreShift>,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    require_input(&a.input)?;
    require_input(&a.benchmark)?;
    for p in &a.policy {
        require_input(p)?;
    }
    require_scoring_inputs(&a.scoring)?;
    require_output(&a.output)?;
    let grouping = parse_grouping(&a.group_by)?;

    let mut policies = vec![DecisionPolicy::naive()];
    for p in &a.policy {
        policies.push(read_policy(p)?);
    }
    let mut items = read_scored(&a.input)?;
    let benchmark = eval::load_benchmark(BufReader::new(File::open(&a.benchmark)?))?;
    score_for_policies(&a.scoring, &policies, &mut items)?;
    let mode = token_mode(a.strict_tokens);

    let report = eval::run_policies(&policies, &items, &benchmark, grouping, mode)?;
    let eval_suite = a.eval_suite.clone().unwrap_or_else(|| {
        a.input
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("eval")
            .to_string()
    });
    let mut transfers = Vec::new();
    for (i, policy) in policies.iter().enumerate() {
        let Some(fit) = &policy.fit else { continue };
        if meco_layer(policy).is_none() {
            continue;
        }
        let t = eval::transfer_eval(
            policy,
            &fit.dataset_id,
            &eval_suite,
            &items,
            &benchmark,
            grouping,
            mode,
        )?;
        if t.shift_detected() {
            eprintln!(
                "warning: policy {} ({} -> {}) first-token score distribution shifted by more than {} fit std",
                a.policy[i - 1].display(),
                t.fit_suite,
                t.eval_suite,
                eval::SHIFT_FLAG_EFFECT_SIZE
            );
        }
        transfers.push(TransferSummary {
            policy: i,
            fit_suite: t.fit_suite,
            eval_suite: t.eval_suite,
            shifts: t.shifts,
        });
    }

    let bytes = match a.format {
        Format::Csv => report.to_csv()?.into_bytes(),
        Format::Json => pretty_json(&serde_json::json!({
            "rows": report.rows,
            "transfer": transfers,
        })),
    };
    write_outputs(&[(&a.output, &bytes)])?;
    for policy in &policies {
        let rows: Vec<_> = report.rows_for(policy.name()).collect();
        let support: usize = rows.iter().map(|r| r.support).sum();
        let correct: usize = rows.iter().map(|r| r.tp + r.tn).sum();
        let acc = if support == 0 {
            0.0
        } else {
            correct as f64 / support as f64
        };
        println!(
            "{:<6} accuracy {acc:.4} over {support} items",
            policy.name()
        );
    }
    Ok(())
}

fn dist_report(a: DistReportArgs) -> Result<()> {
    require_input(&a.input)?;
    require_scoring_inputs(&a.scoring)?;
    require_output(&a.output)?;
    if a.all_layers && a.scoring.probes.is_none() {
        return Err(usage("--all-layers needs --probes and --activations"));
    }
    let mut items = read_scored(&a.input)?;
    let report = match Scorer::load(&a.scoring)? {
        Some(scorer) if a.all_layers => {
            let layers: BTreeSet<u32> = scorer.records.iter().map(|r| r.layer_index).collect();
            let mut per_layer = Vec::with_capacity(layers.len());
            for layer in layers {
                let mut scored = items.clone();
                scorer.attach(layer, &mut scored)?;
                per_layer.push((layer, scored));
            }
            eval::per_layer_distribution_report(&per_layer, a.bins)?
        }
        Some(scorer) => {
            let layer = scorer.layer(&a.scoring)?;
            scorer.attach(layer, &mut items)?;
            eval::score_distribution_report(&items, a.bins, None)?
        }
        None => eval::score_distribution_report(&items, a.bins, None)?,
    };
    let bytes = match a.format {
        Format::Csv => report.to_csv()?.into_bytes(),
        Format::Json => report.to_json().into_bytes(),
    };
    write_outputs(&[(&a.output, &bytes)])?;
    eprintln!(
        "wrote {} histogram rows to {}",
        report.rows.len(),
        a.output.display()
    );
    Ok(())
}
