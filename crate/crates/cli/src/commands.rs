//! The pipeline behind each subcommand. Everything here returns data and
//! writes files; printing is left to `main`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use relmem::checkpoint::{self, Checkpoint};
use relmem::config::{AttentionMode, ResponseMode};
use relmem::corpus::io::{load_instances, write_instances};
use relmem::corpus::synth::{generate_split, SynthSpec};
use relmem::corpus::{Instance, LabelSpace};
use relmem::embedding::{load_pretrained, ContextualStore};
use relmem::memory::MemoryStore;
use relmem::metrics::EvalReport;
use relmem::model::{Model, Prediction, PreparedInstance};
use relmem::trainer::{self, EpochRecord, NoObserver, Trained};
use relmem::{par, Error, Result};

use crate::run_config::RunConfig;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_nonempty(path: &Path, labels: Option<&LabelSpace>) -> Result<(LabelSpace, Vec<Instance>)> {
    let ds = load_instances(path, labels)?;
    if ds.instances.is_empty() {
        return Err(Error::Data(format!("{} contains no instances", path.display())));
    }
    Ok((ds.labels, ds.instances))
}

fn load_contextual(path: Option<&Path>) -> Result<Option<ContextualStore>> {
    path.map(ContextualStore::load).transpose()
}

/// Final line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub record: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_accuracy: f64,
    pub train_macro_f1: f64,
    pub dev_accuracy: Option<f64>,
    pub dev_macro_f1: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_macro_f1: Option<f64>,
}

#[derive(Serialize)]
struct EpochLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    epoch: &'a EpochRecord,
}

pub struct TrainOutcome {
    pub trained: Trained,
    pub summary: Summary,
    /// The report, one JSON record per line.
    pub report: String,
}

fn accuracy_on(model: &Model, memory: Option<&MemoryStore>, data: &[Instance], ctx: Option<&ContextualStore>) -> Result<EvalReport> {
    let prepared = model.prepare(data, ctx)?;
    Ok(trainer::evaluate(model, memory, &prepared)?.0)
}

/// Loads the data named in `rc`, trains and builds the report. Writes no
/// files.
pub fn run_training(rc: &RunConfig) -> Result<TrainOutcome> {
    rc.check_paths(&["train"])?;
    let p = &rc.paths;
    let (labels, train) = load_nonempty(p.train.as_deref().expect("checked"), None)?;
    let dev = p.dev.as_deref().map(|d| load_nonempty(d, Some(&labels)).map(|x| x.1)).transpose()?;
    let test = p.test.as_deref().map(|d| load_nonempty(d, Some(&labels)).map(|x| x.1)).transpose()?;
    let pretrained = p.embeddings.as_deref().map(load_pretrained).transpose()?;
    let ctx = load_contextual(p.contextual.as_deref())?;

    let model = Model::build(
        rc.train.clone(),
        labels,
        &train,
        pretrained.as_ref(),
        ctx.as_ref().map_or(0, |c| c.dim),
    )?;
    let dev_set = dev.clone().unwrap_or_default();
    let trained = trainer::train(model, &train, &dev_set, ctx.as_ref(), &mut NoObserver)?;

    let (model, memory) = (&trained.model, trained.memory.as_ref());
    let train_report = accuracy_on(model, memory, &train, ctx.as_ref())?;
    let dev_report = dev.as_deref().map(|d| accuracy_on(model, memory, d, ctx.as_ref())).transpose()?;
    let test_report = test.as_deref().map(|d| accuracy_on(model, memory, d, ctx.as_ref())).transpose()?;
    let summary = Summary {
        record: "summary".into(),
        best_epoch: trained.best_epoch,
        epochs_run: trained.history.len(),
        stopped_early: trained.stopped_early,
        train_accuracy: train_report.accuracy,
        train_macro_f1: train_report.macro_f1,
        dev_accuracy: dev_report.as_ref().map(|r| r.accuracy),
        dev_macro_f1: dev_report.as_ref().map(|r| r.macro_f1),
        test_accuracy: test_report.as_ref().map(|r| r.accuracy),
        test_macro_f1: test_report.as_ref().map(|r| r.macro_f1),
    };
    let mut report = String::new();
    for epoch in &trained.history {
        report.push_str(&serde_json::to_string(&EpochLine { record: "epoch", epoch }).expect("serialisable"));
        report.push('\n');
    }
    report.push_str(&serde_json::to_string(&summary).expect("serialisable"));
    report.push('\n');
    Ok(TrainOutcome {
        trained,
        summary,
        report,
    })
}

/// Report path used when none is configured: next to the checkpoint.
pub fn default_report_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".report.jsonl");
    PathBuf::from(s)
}

pub fn cmd_train(rc: &RunConfig) -> Result<TrainOutcome> {
    rc.check_paths(&["train", "checkpoint"])?;
    let ck = rc.paths.checkpoint.clone().expect("checked");
    let report_path = rc.paths.report.clone().unwrap_or_else(|| default_report_path(&ck));
    let out = run_training(rc)?;
    std::fs::write(&report_path, &out.report).map_err(io_err(&report_path))?;
    checkpoint::save(&ck, &out.trained.model, out.trained.memory.as_ref(), out.trained.best_epoch)?;
    Ok(out)
}

pub struct Evaluation {
    pub labels: LabelSpace,
    pub report: EvalReport,
}

pub fn cmd_eval(ck: &Path, data: &Path, contextual: Option<&Path>, output: Option<&Path>) -> Result<Evaluation> {
    let Checkpoint { model, memory, .. } = checkpoint::load(ck)?;
    let (_, instances) = load_nonempty(data, Some(&model.labels))?;
    let ctx = load_contextual(contextual)?;
    let report = accuracy_on(&model, memory.as_ref(), &instances, ctx.as_ref())?;
    if let Some(out) = output {
        #[derive(Serialize)]
        struct Out<'a> {
            relations: &'a [String],
            #[serde(flatten)]
            report: &'a EvalReport,
        }
        let json = serde_json::to_string_pretty(&Out {
            relations: model.labels.relations(),
            report: &report,
        })
        .expect("serialisable");
        std::fs::write(out, json + "\n").map_err(io_err(out))?;
    }
    Ok(Evaluation {
        labels: model.labels,
        report,
    })
}

pub fn format_report(labels: &LabelSpace, r: &EvalReport) -> String {
    let width = labels.relations().iter().map(String::len).max().unwrap_or(5).max(5);
    let mut s = String::new();
    s += &format!("instances  {}\n", r.count);
    s += &format!("accuracy   {:.4}\n", r.accuracy);
    s += &format!("macro_f1   {:.4}\n\n", r.macro_f1);
    s += &format!("{:width$}  precision  recall  f1      support\n", "class");
    for (name, c) in labels.relations().iter().zip(&r.per_class) {
        s += &format!(
            "{name:width$}  {:.4}     {:.4}  {:.4}  {}\n",
            c.precision, c.recall, c.f1, c.support
        );
    }
    s += "\nconfusion (rows: reference, columns: predicted)\n";
    let rw = width + 1 + labels.num_relations().to_string().len();
    s += &format!("{:rw$}", "");
    for j in 0..labels.num_relations() {
        s += &format!(" {j:>6}");
    }
    s += "\n";
    for (i, row) in r.confusion.iter().enumerate() {
        s += &format!("{:rw$}", format!("{i} {}", labels.relation_name(i)));
        for v in row {
            s += &format!(" {v:>6}");
        }
        s += "\n";
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub slot: usize,
    pub id: String,
    pub relation: String,
    pub weight: f64,
    pub arg1: String,
    pub arg2: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub predicted: String,
    pub gold: Vec<String>,
    pub probabilities: Vec<(String, f64)>,
    pub retrieved: Vec<Retrieved>,
}

/// Predictions with the top `k` retrieved slots for every instance in
/// `data`. `k` is clamped to the memory size (with a warning).
pub fn predict_file(ck: &Path, data: &Path, contextual: Option<&Path>, k: usize) -> Result<(Vec<Instance>, Vec<PredictionRecord>)> {
    let Checkpoint { model, memory, .. } = checkpoint::load(ck)?;
    let (_, instances) = load_nonempty(data, Some(&model.labels))?;
    let ctx = load_contextual(contextual)?;
    let m = memory.as_ref().map_or(0, MemoryStore::len);
    let k = if k > m && memory.is_some() {
        log::warn!("k = {k} exceeds the {m} memory slots; using {m}");
        m
    } else {
        k
    };
    let prepared = model.prepare(&instances, ctx.as_ref())?;
    let refs: Vec<&PreparedInstance> = prepared.iter().collect();
    let preds = model.predict(&refs, memory.as_ref(), k, false)?;
    let labels = &model.labels;
    let records = instances
        .iter()
        .zip(preds)
        .map(|(inst, p): (&Instance, Prediction)| PredictionRecord {
            id: inst.id.clone(),
            predicted: labels.relation_name(p.relation).to_string(),
            gold: inst.relations.iter().map(|&r| labels.relation_name(r).to_string()).collect(),
            probabilities: labels.relations().iter().cloned().zip(p.probabilities).collect(),
            retrieved: p
                .retrieved
                .iter()
                .map(|&(slot, weight)| {
                    let info = &memory.as_ref().expect("retrieval implies memory").slots()[slot];
                    Retrieved {
                        slot,
                        id: info.id.clone(),
                        relation: labels.relation_name(info.relation).to_string(),
                        weight,
                        arg1: info.arg1.clone(),
                        arg2: info.arg2.clone(),
                    }
                })
                .collect(),
        })
        .collect();
    Ok((instances, records))
}

pub fn cmd_predict(ck: &Path, data: &Path, contextual: Option<&Path>, k: usize) -> Result<String> {
    let (_, records) = predict_file(ck, data, contextual, k)?;
    let mut out = String::new();
    for r in records {
        out += &serde_json::to_string(&r).expect("serialisable");
        out.push('\n');
    }
    Ok(out)
}

/// Per-query listing of the retrieved training instances.
pub fn cmd_inspect(ck: &Path, data: &Path, contextual: Option<&Path>, k: usize) -> Result<String> {
    let has_memory = checkpoint::load(ck)?.memory.is_some();
    if !has_memory {
        return Err(Error::Data(format!("{} holds no memory (baseline model)", ck.display())));
    }
    let (instances, records) = predict_file(ck, data, contextual, k.max(1))?;
    let mut s = String::new();
    for (inst, r) in instances.iter().zip(&records) {
        s += &format!("query {}  gold {}  predicted {}\n", r.id, r.gold.join(","), r.predicted);
        s += &format!("  arg1: {}\n  arg2: {}\n", inst.arg1_text(), inst.arg2_text());
        for (rank, x) in r.retrieved.iter().enumerate() {
            s += &format!("  {:>2}. weight {:.4}  {} [{}]\n", rank + 1, x.weight, x.id, x.relation);
            s += &format!("      arg1: {}\n      arg2: {}\n", x.arg1, x.arg2);
        }
        s += "\n";
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cell {
    Baseline,
    Memory(AttentionMode, ResponseMode),
}

impl Cell {
    pub const TABLE: [Cell; 5] = [
        Cell::Baseline,
        Cell::Memory(AttentionMode::Dot, ResponseMode::Key),
        Cell::Memory(AttentionMode::Dot, ResponseMode::Value),
        Cell::Memory(AttentionMode::Biaffine, ResponseMode::Key),
        Cell::Memory(AttentionMode::Biaffine, ResponseMode::Value),
    ];

    pub fn name(&self) -> String {
        match self {
            Cell::Baseline => "baseline".into(),
            Cell::Memory(a, r) => {
                let a = if *a == AttentionMode::Dot { 'D' } else { 'B' };
                let r = if *r == ResponseMode::Key { 'K' } else { 'V' };
                format!("{a}+{r}")
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Cell::TABLE
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown grid cell `{s}`; expected baseline, D+K, D+V, B+K or B+V")))
    }

    fn apply(&self, rc: &mut RunConfig) {
        match *self {
            Cell::Baseline => rc.train.response = ResponseMode::Baseline,
            Cell::Memory(a, r) => {
                rc.train.attention = a;
                rc.train.response = r;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub row: String,
    pub attention: Option<String>,
    pub response: String,
    pub lambda: f64,
    pub best_epoch: usize,
    pub dev_accuracy: Option<f64>,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Trains one model per cell with the shared seed and scores it on the
/// test file (dev when there is no test file). Each cell's training report
/// and checkpoint go to `report_dir` when given.
pub fn cmd_grid(rc: &RunConfig, cells: &[Cell], parallel: bool, report_dir: Option<&Path>) -> Result<Vec<GridRow>> {
    rc.check_paths(&["train"])?;
    if rc.paths.test.is_none() && rc.paths.dev.is_none() {
        return Err(Error::Config("grid needs a `test` or `dev` path to score cells".into()));
    }
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let run = |_: usize, cell: &Cell| -> Result<GridRow> {
        let mut cfg = rc.clone();
        cell.apply(&mut cfg);
        log::info!("grid cell {}", cell.name());
        let out = run_training(&cfg)?;
        if let Some(dir) = report_dir {
            let stem = cell.name().replace('+', "");
            let path = dir.join(format!("{stem}.report.jsonl"));
            std::fs::write(&path, &out.report).map_err(io_err(&path))?;
            let t = &out.trained;
            checkpoint::save(dir.join(format!("{stem}.ckpt")), &t.model, t.memory.as_ref(), t.best_epoch)?;
        }
        let s = &out.summary;
        let (accuracy, macro_f1) = match (s.test_accuracy, s.test_macro_f1) {
            (Some(a), Some(f)) => (a, f),
            _ => (s.dev_accuracy.unwrap_or(0.0), s.dev_macro_f1.unwrap_or(0.0)),
        };
        Ok(GridRow {
            row: cell.name(),
            attention: match cell {
                Cell::Baseline => None,
                Cell::Memory(a, _) => Some(a.to_string()),
            },
            response: cfg.train.response.to_string(),
            lambda: if cfg.train.uses_memory() { cfg.train.lambda } else { 0.0 },
            best_epoch: s.best_epoch,
            dev_accuracy: s.dev_accuracy,
            accuracy,
            macro_f1,
        })
    };
    par::map(parallel, cells, run).into_iter().collect()
}

pub fn grid_table(rows: &[GridRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serialisable") + "\n")
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub relations: usize,
    pub seed: u64,
    pub multi_label: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            train: 2000,
            dev: 200,
            test: 200,
            relations: 4,
            seed: 1,
            multi_label: 0.0,
        }
    }
}

/// Writes `train.jsonl`, `dev.jsonl` and `test.jsonl` into `dir`.
pub fn cmd_synth(dir: &Path, params: &SynthParams) -> Result<[PathBuf; 3]> {
    if !(0.0..=1.0).contains(&params.multi_label) {
        return Err(Error::Config("multi_label must be in [0, 1]".into()));
    }
    let spec = SynthSpec {
        multi_label_fraction: params.multi_label,
        ..SynthSpec::new(params.relations)
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let labels = spec.label_space();
    let splits = [("train", params.train, 1), ("dev", params.dev, 2), ("test", params.test, 3)];
    let mut paths = Vec::new();
    for (name, count, stream) in splits {
        let instances = generate_split(&spec, count, params.seed, stream, &format!("{name}-"))?;
        let path = dir.join(format!("{name}.jsonl"));
        write_instances(&path, &labels, &instances)?;
        paths.push(path);
    }
    Ok(paths.try_into().expect("three splits"))
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(io_err(p))?);
            w.write_all(text.as_bytes()).map_err(io_err(p))?;
            w.flush().map_err(io_err(p))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
        }
    }
}
