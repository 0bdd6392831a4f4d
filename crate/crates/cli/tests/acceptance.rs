//! Acceptance suite. One PASS/FAIL line per criterion; exits nonzero if any
//! criterion fails. Every tolerance is pinned below.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;

use relmem::autodiff::{check_gradients, Graph, ParamRegistry, Shape};
use relmem::config::{AttentionMode, CoefficientMode, ResponseMode, TrainConfig};
use relmem::corpus::io::write_instances;
use relmem::corpus::synth::{generate_split, generate_synthetic, marker, SynthSpec};
use relmem::encoder::EncoderStack;
use relmem::memory::{BiaffineParams, MemoryStore, Scorer, SlotInfo};
use relmem::model::{Mode, Model, PreparedInstance};
use relmem::rng;
use relmem::trainer::{self, EpochRecord, TrainObserver};
use relmem_cli::commands::{GridRow, Summary};

const GRADCHECK_EPSILON: f64 = 1e-4;
const GRADCHECK_MAX_REL: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const COEFFICIENT_SUM_TOL: f64 = 1e-12;
const RETRIEVAL_TOL: f64 = 1e-9;
const BIAFFINE_DOT_TOL: f64 = 1e-12;
const BASELINE_FLOOR: f64 = 0.90;
const MEMORY_SLACK: f64 = 0.01;
const FIXED_KEY_SLACK: f64 = 0.01;
const SYNTHETIC_BUDGET: Duration = Duration::from_secs(600);
const PASS_THROUGH_BUDGET: Duration = Duration::from_secs(300);
const TOP1_MARKER_FLOOR: f64 = 0.90;

type Check = std::result::Result<String, String>;
/// `(U, w1, w2, b)`
type BiaffineWeights<'a> = (&'a [f64], &'a [f64], &'a [f64], f64);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn toy_config() -> TrainConfig {
    TrainConfig {
        word_dim: 3,
        subword_dim: 2,
        subword_embed_dim: 2,
        subword_kernels: vec![1, 2],
        bpe_merges: 10,
        pad_length: 4,
        layers: 2,
        hidden: 4,
        ..TrainConfig::default()
    }
}

/// A store over `prepared` with keys from evaluation-mode representations.
fn memory_for(model: &Model, prepared: &mut [PreparedInstance], originals: &[relmem::corpus::Instance]) -> MemoryStore {
    let mut mem = trainer::init_memory(model, prepared, originals).unwrap();
    let refs: Vec<&PreparedInstance> = prepared.iter().collect();
    let reps = model.represent(&refs).unwrap();
    let d = mem.key_dim();
    mem.begin_epoch();
    for (i, p) in prepared.iter().enumerate() {
        mem.update_key(p.slot.unwrap(), &reps[i * d..(i + 1) * d]).unwrap();
    }
    let correct: Vec<bool> = (0..mem.len()).map(|i| i % 3 != 1).collect();
    mem.assign_coefficients(CoefficientMode::Dynamic, &correct).unwrap();
    mem
}

// 1 ------------------------------------------------------------------------

fn gradient_integrity() -> Check {
    let start = Instant::now();
    let c = generate_synthetic(8, 0, 3, 11).map_err(e2s)?;
    let cfg = TrainConfig {
        attention: AttentionMode::Biaffine,
        response: ResponseMode::Value,
        lambda: 0.3,
        ..toy_config()
    };
    let mut model = Model::build(cfg, c.labels.clone(), &c.train, None, 0).map_err(e2s)?;
    // Zero-initialised biases put some ReLU inputs exactly on the kink; move
    // every coordinate off its initial value first.
    let mut r = rng::stream(1, &[]);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    let mut prepared = model.prepare(&c.train, None).map_err(e2s)?;
    let memory = memory_for(&model, &mut prepared, &c.train);
    let batch: Vec<&PreparedInstance> = prepared[..4].iter().collect();

    let mut params = model.params.clone();
    let report = check_gradients(
        |p: &ParamRegistry| {
            let mut m = model.clone();
            m.params = p.clone();
            let out = m.batch_step(&batch, Some(&memory), Mode::Eval)?;
            Ok((out.loss, out.grads))
        },
        &mut params,
        GRADCHECK_EPSILON,
    )
    .map_err(e2s)?;
    let elapsed = start.elapsed();
    let detail = format!(
        "{} coordinates over {} parameters, max relative error {:.3e} (limit {GRADCHECK_MAX_REL:e}), {:.1} s (limit {} s)",
        report.coordinates,
        params.len(),
        report.max_relative_error,
        elapsed.as_secs_f64(),
        GRADCHECK_BUDGET.as_secs()
    );
    ensure(report.max_relative_error < GRADCHECK_MAX_REL, || format!("{detail}; worst {:?}", report.worst))?;
    ensure(elapsed < GRADCHECK_BUDGET, || detail.clone())?;
    Ok(detail)
}

// 2 ------------------------------------------------------------------------

fn coefficient_balancing() -> Check {
    const SLOTS: usize = 1000;
    let mut r = rng::stream(2, &[]);
    let mut worst: f64 = 0.0;
    for pattern in 0..100 {
        let n_r = r.gen_range(2..=11);
        let slots: Vec<SlotInfo> = (0..SLOTS)
            .map(|i| SlotInfo {
                id: format!("s{i}"),
                relation: r.gen_range(0..n_r),
                arg1: String::new(),
                arg2: String::new(),
            })
            .collect();
        let rate: f64 = r.gen();
        let correct: Vec<bool> = (0..SLOTS).map(|_| r.gen::<f64>() < rate).collect();
        let mut mem = MemoryStore::init(slots.clone(), 2, n_r, pattern).map_err(e2s)?;
        mem.assign_coefficients(CoefficientMode::Dynamic, &correct).map_err(e2s)?;
        let c = mem.coefficients();

        let mut sums = vec![0.0; n_r];
        let mut counts = vec![0usize; n_r];
        for i in 0..SLOTS {
            if correct[i] {
                sums[slots[i].relation] += c[i];
                counts[slots[i].relation] += 1;
            } else {
                ensure(c[i] == 0.0, || format!("pattern {pattern}: mispredicted slot {i} has c = {}", c[i]))?;
            }
        }
        for j in 0..n_r {
            if counts[j] > 0 {
                let err = (sums[j] - 1.0).abs();
                worst = worst.max(err);
                ensure(err <= COEFFICIENT_SUM_TOL, || {
                    format!("pattern {pattern}: class {j} sums to {} over {} slots", sums[j], counts[j])
                })?;
            }
        }
    }
    Ok(format!(
        "100 patterns x {SLOTS} slots, worst class-sum error {worst:.1e} (limit {COEFFICIENT_SUM_TOL:e}), mispredicted slots exactly 0"
    ))
}

// 3 ------------------------------------------------------------------------

struct Brute {
    attention: Vec<f64>,
    weights: Vec<f64>,
    response: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn brute_force(
    q: &[f64],
    keys: &[f64],
    labels: &[usize],
    c: &[f64],
    d: usize,
    n_r: usize,
    biaffine: Option<BiaffineWeights<'_>>,
    value_mode: bool,
) -> Brute {
    let m = labels.len();
    let mut s = vec![0.0; m];
    for i in 0..m {
        let k = &keys[i * d..(i + 1) * d];
        s[i] = match biaffine {
            None => (0..d).map(|a| q[a] * k[a]).sum(),
            Some((u, w1, w2, b)) => {
                let mut t = b;
                for a in 0..d {
                    for e in 0..d {
                        t += q[a] * u[a * d + e] * k[e];
                    }
                    t += w1[a] * q[a] + w2[a] * k[a];
                }
                t
            }
        };
    }
    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
    let attention: Vec<f64> = s.iter().map(|v| (v - max).exp() / z).collect();
    let weights: Vec<f64> = attention.iter().zip(c).map(|(a, c)| a * c).collect();
    let response = if value_mode {
        let mut o = vec![0.0; n_r];
        for i in 0..m {
            o[labels[i]] += weights[i];
        }
        o
    } else {
        let mut o = vec![0.0; d];
        for i in 0..m {
            for a in 0..d {
                o[a] += weights[i] * keys[i * d + a];
            }
        }
        o
    };
    Brute {
        attention,
        weights,
        response,
    }
}

fn retrieval_oracle() -> Check {
    let mut r = rng::stream(3, &[]);
    let mut worst: f64 = 0.0;
    for store in 0..200 {
        let m = r.gen_range(1..=50);
        let d = r.gen_range(1..=32);
        let n_r = r.gen_range(2..=11);
        let b = r.gen_range(1..=4);
        let labels: Vec<usize> = (0..m).map(|_| r.gen_range(0..n_r)).collect();
        let slots = labels
            .iter()
            .enumerate()
            .map(|(i, &relation)| SlotInfo {
                id: format!("s{i}"),
                relation,
                arg1: String::new(),
                arg2: String::new(),
            })
            .collect();
        let keys: Vec<f64> = (0..m * d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..m).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(0.0..1.0) }).collect();
        let mem = MemoryStore::from_parts(slots, d, n_r, keys.clone(), c.clone(), false).map_err(e2s)?;
        let queries: Vec<f64> = (0..b * d).map(|_| r.gen_range(-1.5..1.5)).collect();

        let mut reg = ParamRegistry::new();
        let bp = BiaffineParams::new(&mut reg, store, d).map_err(e2s)?;
        for id in [bp.u, bp.w1, bp.w2, bp.b] {
            for v in reg.get_mut(id).data.iter_mut() {
                *v = r.gen_range(-0.5..0.5);
            }
        }
        let (u, w1, w2) = (reg.get(bp.u).data.clone(), reg.get(bp.w1).data.clone(), reg.get(bp.w2).data.clone());
        let bias = reg.get(bp.b).data[0];

        for biaffine in [false, true] {
            let scorer = if biaffine { Scorer::Biaffine(bp.clone()) } else { Scorer::Dot };
            for mode in [ResponseMode::Key, ResponseMode::Value] {
                let mut g = Graph::with_params(&reg);
                let qn = g.constant(Shape::new(b, d), queries.clone()).map_err(e2s)?;
                let got = mem.respond(&mut g, qn, &scorer, mode, None).map_err(e2s)?;
                for row in 0..b {
                    let q = &queries[row * d..(row + 1) * d];
                    let bf = biaffine.then_some((u.as_slice(), w1.as_slice(), w2.as_slice(), bias));
                    let want = brute_force(q, &keys, &labels, &c, d, n_r, bf, mode == ResponseMode::Value);
                    let width = want.response.len();
                    let pairs = [
                        (&g.value(got.attention)[row * m..(row + 1) * m], &want.attention[..]),
                        (&g.value(got.weights)[row * m..(row + 1) * m], &want.weights[..]),
                        (&g.value(got.response)[row * width..(row + 1) * width], &want.response[..]),
                    ];
                    for (a, w) in pairs {
                        for (x, y) in a.iter().zip(w) {
                            let err = (x - y).abs();
                            worst = worst.max(err);
                            ensure(err <= RETRIEVAL_TOL, || {
                                format!("store {store} (m={m}, d={d}, biaffine={biaffine}, {mode}): {x} vs {y}")
                            })?;
                        }
                    }
                }
            }
        }
    }
    Ok(format!(
        "200 stores (m <= 50, d <= 32), dot and biaffine, key and value responses: worst deviation {worst:.1e} (limit {RETRIEVAL_TOL:e})"
    ))
}

// 4 ------------------------------------------------------------------------

fn reduction_identities() -> Check {
    // (a) lambda = 0 against the baseline head
    let c = generate_synthetic(12, 0, 3, 13).map_err(e2s)?;
    let cfg = TrainConfig {
        classifier_dropout: 0.3,
        ..toy_config()
    };
    let base = Model::build(
        TrainConfig {
            response: ResponseMode::Baseline,
            ..cfg.clone()
        },
        c.labels.clone(),
        &c.train,
        None,
        0,
    )
    .map_err(e2s)?;
    let zero = Model::build(TrainConfig { lambda: 0.0, ..cfg }, c.labels.clone(), &c.train, None, 0).map_err(e2s)?;
    let base_prep = base.prepare(&c.train, None).map_err(e2s)?;
    let mut zero_prep = zero.prepare(&c.train, None).map_err(e2s)?;
    let mem = memory_for(&zero, &mut zero_prep, &c.train);
    let br: Vec<&PreparedInstance> = base_prep.iter().collect();
    let zr: Vec<&PreparedInstance> = zero_prep.iter().collect();
    let pa = base.predict(&br, None, 0, false).map_err(e2s)?;
    let pb = zero.predict(&zr, Some(&mem), 0, false).map_err(e2s)?;
    ensure(
        pa.iter().zip(&pb).all(|(a, b)| a.probabilities == b.probabilities),
        || "lambda = 0 distribution differs from the baseline".into(),
    )?;
    let positions: Vec<usize> = (0..12).collect();
    let train_mode = Mode::Train {
        epoch: 1,
        batch: 0,
        positions: &positions,
    };
    let la = base.batch_step(&br, None, train_mode).map_err(e2s)?.loss;
    let lb = zero.batch_step(&zr, Some(&mem), train_mode).map_err(e2s)?.loss;
    ensure(la.to_bits() == lb.to_bits(), || format!("training-mode loss {la} vs {lb}"))?;

    // (b) biaffine with U = I, w1 = w2 = 0, b = 0 against dot scores
    let mut r = rng::stream(4, &[]);
    let mut worst: f64 = 0.0;
    for trial in 0..50 {
        let (m, d) = (r.gen_range(1..=30), r.gen_range(1..=32));
        let slots = (0..m)
            .map(|i| SlotInfo {
                id: format!("s{i}"),
                relation: 0,
                arg1: String::new(),
                arg2: String::new(),
            })
            .collect();
        let keys: Vec<f64> = (0..m * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mem = MemoryStore::from_parts(slots, d, 2, keys, vec![1.0; m], false).map_err(e2s)?;
        let mut reg = ParamRegistry::new();
        let bp = BiaffineParams::new(&mut reg, trial, d).map_err(e2s)?;
        let u = &mut reg.get_mut(bp.u).data;
        u.fill(0.0);
        for a in 0..d {
            u[a * d + a] = 1.0;
        }
        for id in [bp.w1, bp.w2, bp.b] {
            reg.get_mut(id).data.fill(0.0);
        }
        let q: Vec<f64> = (0..3 * d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let mut g = Graph::with_params(&reg);
        let qn = g.constant(Shape::new(3, d), q).map_err(e2s)?;
        let sb = mem.scores(&mut g, qn, &Scorer::Biaffine(bp)).map_err(e2s)?;
        let sd = mem.scores(&mut g, qn, &Scorer::Dot).map_err(e2s)?;
        for (x, y) in g.value(sb).iter().zip(g.value(sd)) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= BIAFFINE_DOT_TOL, || format!("biaffine vs dot deviation {worst:e}"))?;

    // (c) zero-weight GLU layers
    let mut reg = ParamRegistry::new();
    let enc = EncoderStack::new(&mut reg, 5, "enc", 3, 6, 3).map_err(e2s)?;
    for l in &enc.layers {
        reg.get_mut(l.weight).data.fill(0.0);
        reg.get_mut(l.bias).data.fill(0.0);
    }
    let x: Vec<f64> = (0..7 * 6).map(|_| r.gen_range(-3.0..3.0)).collect();
    let mut g = Graph::with_params(&reg);
    let xn = g.constant(Shape::new(7, 6), x.clone()).map_err(e2s)?;
    let outs = enc.encode(&mut g, xn).map_err(e2s)?;
    ensure(outs.iter().all(|&o| g.value(o) == x.as_slice()), || "zero-weight layer is not the identity".into())?;

    Ok(format!(
        "(a) lambda=0 distribution and training loss bit-identical to baseline; (b) biaffine(I,0,0,0) vs dot max deviation {worst:.1e} (limit {BIAFFINE_DOT_TOL:e}); (c) 3 zero-weight layers return their input exactly"
    ))
}

// 5 ------------------------------------------------------------------------

#[derive(Default)]
struct WriteLog {
    /// (epoch, slot) -> hash of every r written
    emitted: HashMap<(usize, usize), Vec<u64>>,
    /// key hashes at the end of each epoch
    hashes: Vec<Vec<u64>>,
    corrupted: Vec<usize>,
}

impl TrainObserver for WriteLog {
    fn key_written(&mut self, epoch: usize, slot: usize, r: &[f64]) {
        self.emitted.entry((epoch, slot)).or_default().push(rng::hash_f64s(r));
    }

    fn epoch_end(&mut self, _: &EpochRecord, memory: Option<&MemoryStore>) {
        let m = memory.expect("memory run");
        self.hashes.push((0..m.len()).map(|i| m.key_hash(i)).collect());
        self.corrupted.extend(m.corrupted_slots());
    }
}

fn memory_update_discipline() -> Check {
    let c = generate_synthetic(500, 0, 4, 21).map_err(e2s)?;
    let cfg = TrainConfig {
        epochs: 3,
        pad_length: 8,
        ..TrainConfig::default()
    };
    let model = Model::build(cfg, c.labels.clone(), &c.train, None, 0).map_err(e2s)?;
    let mut prepared = model.prepare(&c.train, None).map_err(e2s)?;
    let initial = trainer::init_memory(&model, &mut prepared, &c.train).map_err(e2s)?;
    let mut previous: Vec<u64> = (0..initial.len()).map(|i| initial.key_hash(i)).collect();

    let mut log = WriteLog::default();
    trainer::train(model, &c.train, &[], None, &mut log).map_err(e2s)?;
    ensure(log.hashes.len() == 3, || format!("{} epochs ran", log.hashes.len()))?;
    ensure(log.corrupted.is_empty(), || format!("corrupted slots {:?}", log.corrupted))?;
    for (e, hashes) in log.hashes.iter().enumerate() {
        let epoch = e + 1;
        for (slot, &h) in hashes.iter().enumerate() {
            let writes = log.emitted.get(&(epoch, slot)).map_or(&[][..], Vec::as_slice);
            ensure(writes.len() == 1, || format!("epoch {epoch}: slot {slot} written {} times", writes.len()))?;
            ensure(writes[0] == h, || format!("epoch {epoch}: slot {slot} hash differs from the emitted r"))?;
            ensure(h != previous[slot], || format!("epoch {epoch}: slot {slot} key did not change"))?;
        }
        previous = hashes.clone();
    }
    Ok("500 slots x 3 epochs: one write per slot per epoch, stored hash = hash of emitted r, store integrity intact".into())
}

// 6, 7, 8 --------------------------------------------------------------------

fn relmem() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relmem"))
}

fn run_cli(args: &[&str]) -> std::result::Result<String, String> {
    let out = relmem().args(args).output().map_err(e2s)?;
    if !out.status.success() {
        return Err(format!(
            "relmem {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

struct Synthetic {
    dir: tempfile::TempDir,
    table: Vec<GridRow>,
    elapsed: Duration,
}

impl Synthetic {
    fn data(&self, split: &str) -> PathBuf {
        self.dir.path().join("data").join(format!("{split}.jsonl"))
    }
}

fn run_grid(dir: &Path, data: &Path, out: &str) -> std::result::Result<(Vec<GridRow>, Duration), String> {
    let start = Instant::now();
    let reports = dir.join(out);
    let table = dir.join(format!("{out}.table.jsonl"));
    let cfg = repo_file("configs/synthetic.cfg");
    run_cli(&[
        "grid",
        "--config",
        s(&cfg),
        "--train",
        s(&data.join("train.jsonl")),
        "--dev",
        s(&data.join("dev.jsonl")),
        "--test",
        s(&data.join("test.jsonl")),
        "--report-dir",
        s(&reports),
        "--output",
        s(&table),
    ])?;
    let elapsed = start.elapsed();
    let text = std::fs::read_to_string(&table).map_err(e2s)?;
    let rows = text
        .lines()
        .map(|l| serde_json::from_str(l).map_err(e2s))
        .collect::<std::result::Result<Vec<GridRow>, _>>()?;
    Ok((rows, elapsed))
}

fn synthetic_run() -> std::result::Result<Synthetic, String> {
    let dir = tempfile::tempdir().map_err(e2s)?;
    let data = dir.path().join("data");
    run_cli(&["synth-data", "--out", s(&data), "--seed", "1"])?;
    let (table, elapsed) = run_grid(dir.path(), &data, "run1")?;
    Ok(Synthetic { dir, table, elapsed })
}

fn synthetic_end_to_end(run: &Synthetic) -> Check {
    let rows = &run.table;
    ensure(rows.len() == 5, || format!("{} grid rows", rows.len()))?;
    let base = rows.iter().find(|r| r.row == "baseline").ok_or("no baseline row")?.accuracy;
    let mut parts = vec![format!("baseline {base:.4}")];
    ensure(base >= BASELINE_FLOOR, || format!("baseline accuracy {base} < {BASELINE_FLOOR}"))?;
    let mut any_at_least_base = false;
    for r in rows.iter().filter(|r| r.row != "baseline") {
        parts.push(format!("{} {:.4}", r.row, r.accuracy));
        ensure(r.accuracy >= base - MEMORY_SLACK && r.accuracy <= 1.0, || {
            format!("{} accuracy {} outside [{}, 1]", r.row, r.accuracy, base - MEMORY_SLACK)
        })?;
        any_at_least_base |= r.accuracy >= base;
    }
    ensure(any_at_least_base, || "no memory configuration reaches the baseline".into())?;
    ensure(run.elapsed < SYNTHETIC_BUDGET, || format!("grid took {:.0} s", run.elapsed.as_secs_f64()))?;
    Ok(format!(
        "{}; {:.0} s (limit {} s)",
        parts.join(", "),
        run.elapsed.as_secs_f64(),
        SYNTHETIC_BUDGET.as_secs()
    ))
}

fn read_summary(report: &Path) -> std::result::Result<Summary, String> {
    let text = std::fs::read_to_string(report).map_err(e2s)?;
    let last = text.lines().last().ok_or("empty report")?;
    serde_json::from_str(last).map_err(e2s)
}

fn fixed_key_direction(run: &Synthetic) -> Check {
    let dynamic = run.table.iter().find(|r| r.row == "D+V").ok_or("no D+V row")?.accuracy;
    let ck = run.dir.path().join("fixed.ckpt");
    let cfg = repo_file("configs/synthetic.cfg");
    run_cli(&[
        "train",
        "--config",
        s(&cfg),
        "--train",
        s(&run.data("train")),
        "--dev",
        s(&run.data("dev")),
        "--test",
        s(&run.data("test")),
        "--checkpoint",
        s(&ck),
        "--key-mode",
        "fixed",
    ])?;
    let fixed = read_summary(&run.dir.path().join("fixed.ckpt.report.jsonl"))?
        .test_accuracy
        .ok_or("no test accuracy")?;
    let detail = format!("fixed keys {fixed:.4} vs dynamic keys {dynamic:.4} (slack {FIXED_KEY_SLACK})");
    ensure(fixed <= dynamic + FIXED_KEY_SLACK, || detail.clone())?;
    Ok(detail)
}

fn determinism(run: &Synthetic) -> Check {
    let (_, _) = run_grid(run.dir.path(), &run.dir.path().join("data"), "run2")?;
    let mut compared = 0;
    let first = run.dir.path().join("run1");
    let mut names: Vec<_> = std::fs::read_dir(&first).map_err(e2s)?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in names {
        let a = std::fs::read(first.join(&name)).map_err(e2s)?;
        let b = std::fs::read(run.dir.path().join("run2").join(&name)).map_err(e2s)?;
        ensure(a == b, || format!("{} differs between runs", name.to_string_lossy()))?;
        compared += 1;
    }
    let t1 = std::fs::read(run.dir.path().join("run1.table.jsonl")).map_err(e2s)?;
    let t2 = std::fs::read(run.dir.path().join("run2.table.jsonl")).map_err(e2s)?;
    ensure(t1 == t2, || "grid tables differ".into())?;
    Ok(format!("grid table plus {compared} per-cell reports and checkpoints byte-identical across two seeded runs"))
}

fn top1_marker(run: &Synthetic) -> Check {
    let ck = run.dir.path().join("run1").join("DV.ckpt");
    let text = run_cli(&["predict", "--checkpoint", s(&ck), "--data", s(&run.data("test")), "-k", "1"])?;
    let labels = SynthSpec::new(4).label_space();
    let (mut hits, mut total) = (0, 0);
    for line in text.lines() {
        let rec: relmem_cli::commands::PredictionRecord = serde_json::from_str(line).map_err(e2s)?;
        let gold = labels.relation_id(&rec.gold[0]).ok_or("unknown gold")?;
        let top = rec.retrieved.first().ok_or("nothing retrieved")?;
        total += 1;
        if top.arg2.split(' ').any(|t| t == marker(gold)) {
            hits += 1;
        }
    }
    let share = hits as f64 / total as f64;
    let detail = format!("top-1 retrieved slot shares the query's marker for {hits}/{total} = {share:.3} (floor {TOP1_MARKER_FLOOR})");
    ensure(share >= TOP1_MARKER_FLOOR, || detail.clone())?;
    Ok(detail)
}

// 9 ------------------------------------------------------------------------

fn write_vectors(path: &Path, words: &[String], dim: usize) -> std::result::Result<(), String> {
    let mut r = rng::stream(9, &[]);
    let mut text = format!("{} {dim}\n", words.len());
    for w in words {
        text += w;
        for _ in 0..dim {
            text += &format!(" {:.5}", r.gen_range(-0.5..0.5));
        }
        text.push('\n');
    }
    std::fs::write(path, text).map_err(e2s)
}

fn pass_through() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let mut notes = Vec::new();
    for n_r in [11, 4] {
        let spec = SynthSpec {
            min_len: 8,
            max_len: 30,
            multi_label_fraction: 0.05,
            ..SynthSpec::new(n_r)
        };
        let labels = spec.label_space();
        let split = |count, stream, prefix: &str| generate_split(&spec, count, 17, stream, prefix).map_err(e2s);
        let train = split(200, 1, "tr")?;
        let test = split(40, 3, "te")?;
        let base = dir.path().join(format!("pdtb{n_r}"));
        std::fs::create_dir_all(&base).map_err(e2s)?;
        let (train_path, test_path) = (base.join("train.jsonl"), base.join("test.jsonl"));
        write_instances(&train_path, &labels, &train).map_err(e2s)?;
        write_instances(&test_path, &labels, &test).map_err(e2s)?;
        let mut words: Vec<String> = train.iter().flat_map(|i| i.arg1.iter().chain(&i.arg2).cloned()).collect();
        words.sort();
        words.dedup();
        let vectors = base.join("vectors.txt");
        write_vectors(&vectors, &words, 300)?;
        let ck = base.join("model.ckpt");
        let cfg = repo_file("configs/paper_scale.cfg");
        run_cli(&[
            "train",
            "--config",
            s(&cfg),
            "--train",
            s(&train_path),
            "--dev",
            "",
            "--test",
            s(&test_path),
            "--embeddings",
            s(&vectors),
            "--checkpoint",
            s(&ck),
            "--epochs",
            "1",
        ])?;
        let eval = run_cli(&["eval", "--checkpoint", s(&ck), "--data", s(&test_path)])?;
        ensure(eval.contains("accuracy"), || "eval printed no accuracy".into())?;
        let listing = run_cli(&["inspect-memory", "--checkpoint", s(&ck), "--data", s(&test_path), "-k", "2"])?;
        ensure(listing.matches("query ").count() == test.len(), || "inspect listing incomplete".into())?;
        notes.push(format!("{n_r}-way"));
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "{} at hidden 2048, lambda 0.3, N 100, 300-d vectors: train/eval/inspect ok in {:.0} s (limit {} s)",
        notes.join(" and "),
        elapsed.as_secs_f64(),
        PASS_THROUGH_BUDGET.as_secs()
    );
    ensure(elapsed < PASS_THROUGH_BUDGET, || detail.clone())?;
    Ok(detail)
}

// --------------------------------------------------------------------------

struct Runner {
    only: Vec<String>,
    failures: usize,
}

impl Runner {
    fn wants(&self, id: &str) -> bool {
        self.only.is_empty() || self.only.iter().any(|o| o == id)
    }

    fn run(&mut self, id: &str, name: &str, check: impl FnOnce() -> Check) {
        if !self.wants(id) {
            return;
        }
        match check() {
            Ok(detail) => println!("PASS  {id} {name}: {detail}"),
            Err(why) => {
                self.failures += 1;
                println!("FAIL  {id} {name}: {why}");
            }
        }
    }
}

/// `cargo test --test acceptance -- 3 6` runs only criteria 3 and 6.
fn main() {
    let only = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut t = Runner { only, failures: 0 };
    t.run("1", "gradient integrity", gradient_integrity);
    t.run("2", "coefficient balancing", coefficient_balancing);
    t.run("3", "retrieval oracle equivalence", retrieval_oracle);
    t.run("4", "reduction identities", reduction_identities);
    t.run("5", "memory update discipline", memory_update_discipline);
    let cli = [
        ("6", "synthetic end-to-end"),
        ("7", "fixed-key ablation direction"),
        ("8", "determinism"),
        ("+", "top-1 retrieval marker"),
    ];
    if cli.iter().any(|(id, _)| t.wants(id)) {
        match synthetic_run() {
            Ok(run) => {
                t.run("6", cli[0].1, || synthetic_end_to_end(&run));
                t.run("7", cli[1].1, || fixed_key_direction(&run));
                t.run("8", cli[2].1, || determinism(&run));
                t.run("+", cli[3].1, || top1_marker(&run));
            }
            Err(e) => {
                for (id, name) in cli {
                    t.run(id, name, || Err(e.clone()));
                }
            }
        }
    }
    t.run("9", "instance-file pass-through", pass_through);
    println!("{} failed", t.failures);
    if t.failures > 0 {
        std::process::exit(1);
    }
}
