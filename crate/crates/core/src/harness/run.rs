use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};

use crate::autodiff::Graph;
use crate::data::{Batch, BatchIterator, DatasetSplits, LabeledSet};
use crate::error::{Error, Result};
use crate::lease::{lease_iteration, LeaseState, NetworkProblem, NetworkState};
use crate::nn::{accuracy, explainer_forward, one_hot, softmax_cross_entropy, ExplainerSpec, ExplainerWeights};
use crate::par;
use crate::params::Params;
use crate::random::{seeded, stream, substream};
use crate::searchspace::{discretize, ArchParams, CellArch, Genotype};
use crate::tensor::VectorSpace;

use super::config::RunConfig;
use super::metrics::{eval_csv, sweep_csv, EvalRow, MetricsRow, MetricsWriter, SweepRow};

/// What a search leaves behind.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub rows: Vec<MetricsRow>,
    pub state: NetworkState,
}

/// Fresh search state for `seed`, each part from its own stream.
pub fn initial_state(cfg: &RunConfig, seed: u64) -> Result<NetworkState> {
    let spec = cfg.search_explainer();
    Ok(LeaseState {
        arch: ArchParams::init(&spec.cell, &mut seeded(seed, stream::ARCH_INIT)),
        explainer: spec.init_weights(None, seed)?,
        audience: cfg.audience().init_weights(seed)?,
        iteration: 0,
        rng: seeded(seed, stream::PERTURBATION),
    })
}

/// The final state as one checkpoint: `arch`, `explainer.*`, `audience.*`
/// and the iteration count.
pub fn checkpoint(state: &NetworkState) -> Params {
    let mut p = Params::new();
    p.insert("arch", state.arch.tensor().clone());
    for (name, t) in state.explainer.iter() {
        p.insert(format!("explainer.{name}"), t.clone());
    }
    for (name, t) in state.audience.iter() {
        p.insert(format!("audience.{name}"), t.clone());
    }
    p.insert("iteration", crate::Tensor::scalar(state.iteration as f64));
    p
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Runs `cfg.run.iterations` outer iterations of the four-level search.
/// With `out`, writes `metrics.csv`, `timings.csv`, `genotype.txt`,
/// `checkpoint.txt` and any requested explanation dumps.
pub fn run_search(cfg: &RunConfig, out: Option<&Path>) -> Result<SearchOutcome> {
    let (splits, _) = cfg.datasets()?;
    search_on(cfg, &splits, out)
}

pub fn search_on(cfg: &RunConfig, splits: &DatasetSplits, out: Option<&Path>) -> Result<SearchOutcome> {
    let seed = cfg.run.seed;
    let explainer = cfg.search_explainer();
    let audience = cfg.audience();
    let mut state = initial_state(cfg, seed)?;
    let sets = [&splits.e_train, &splits.e_val, &splits.a_train, &splits.a_val];
    let mut batches = sets
        .iter()
        .enumerate()
        .map(|(k, s)| BatchIterator::new(s, cfg.run.batch_size, substream(seed, stream::BATCHES, k as u32)))
        .collect::<Result<Vec<_>>>()?;
    let mut writer = match out {
        Some(dir) => {
            prepare(dir)?;
            Some(MetricsWriter::create(dir)?)
        }
        None => None,
    };
    let dumps = match out {
        Some(dir) if cfg.run.dump_every > 0 => {
            let d = dir.join("explanations");
            prepare(&d)?;
            Some(d)
        }
        _ => None,
    };
    info!(
        "search: seed {seed}, mode {}, {} iterations, {} explainer parameters",
        cfg.run.mode,
        cfg.run.iterations,
        state.explainer.numel()
    );
    let mut rows = Vec::with_capacity(cfg.run.iterations);
    for _ in 0..cfg.run.iterations {
        let b: Vec<Batch> = batches.iter_mut().map(|it| it.next().expect("endless iterator")).collect();
        let p = NetworkProblem {
            explainer: &explainer,
            audience: &audience,
            e_train: &b[0],
            e_val: &b[1],
            a_train: &b[2],
            a_val: &b[3],
            reweigh: cfg.hyper.reweigh,
            eps: cfg.hyper.eps,
        };
        let t0 = Instant::now();
        let report = lease_iteration(&p, &mut state, &cfg.hyper, cfg.run.mode)?;
        let row = MetricsRow::from_report(&report, t0.elapsed().as_secs_f64() * 1e3);
        debug!("{}", row.csv());
        if report.iteration % 10 == 0 {
            info!("iteration {}: outer objective {:.5}", report.iteration, report.outer_objective);
        }
        if let Some(w) = writer.as_mut() {
            w.push(&row)?;
        }
        if let (Some(dir), Some(delta)) = (&dumps, &report.explanation) {
            if report.iteration % cfg.run.dump_every as u64 == 0 {
                let mut p = Params::new();
                p.insert("delta", delta.clone());
                p.save(&dir.join(format!("delta_{:05}.txt", report.iteration)))?;
            }
        }
        rows.push(row);
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    let genotype = discretize(&state.arch, &explainer.cell)?;
    if let Some(dir) = out {
        genotype.save(&dir.join("genotype.txt"))?;
        checkpoint(&state).save(&dir.join("checkpoint.txt"))?;
    }
    info!("search done: {}", genotype.to_text().lines().skip(2).collect::<Vec<_>>().join("; "));
    Ok(SearchOutcome { genotype, rows, state })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

/// The explainer and audience training sets merged, each example once.
pub fn training_union(splits: &DatasetSplits) -> Result<LabeledSet> {
    let mut seen = HashSet::new();
    let keep = |set: &LabeledSet, seen: &mut HashSet<u64>| -> Vec<usize> {
        (0..set.len()).filter(|&i| seen.insert(set.ids[i])).collect()
    };
    let e = splits.e_train.subset(&keep(&splits.e_train, &mut seen));
    let a = splits.a_train.subset(&keep(&splits.a_train, &mut seen));
    if a.is_empty() {
        return Ok(e);
    }
    LabeledSet::concat(&[&e, &a])
}

fn check_genotype(cfg: &RunConfig, genotype: &Genotype) -> Result<()> {
    genotype.validate()?;
    if genotype.n_nodes() != cfg.search.nodes {
        return Err(Error::ConfigValidation {
            field: "search.nodes".into(),
            message: format!("genotype has {} nodes, config has {}", genotype.n_nodes(), cfg.search.nodes),
        });
    }
    for node in &genotype.nodes {
        for (_, op) in node {
            if !cfg.search.ops.contains(op) {
                return Err(Error::ConfigValidation {
                    field: "search.ops".into(),
                    message: format!("genotype uses `{op}`, which the config does not list"),
                });
            }
        }
    }
    Ok(())
}

fn discrete_loss(
    spec: &ExplainerSpec,
    genotype: &Genotype,
    w: &ExplainerWeights,
    batch: &Batch,
    want_grad: bool,
) -> Result<(f64, f64, Option<Params>)> {
    let mut g = Graph::new();
    let x = g.constant(batch.x.clone())?;
    let bound = w.bind(&mut g, want_grad)?;
    let logits = explainer_forward(&mut g, x, &bound, spec, CellArch::Discrete(genotype))?;
    let t = g.constant(one_hot(&batch.labels, spec.classes))?;
    let loss = softmax_cross_entropy(&mut g, logits, t)?;
    let acc = accuracy(g.value(logits), &batch.labels);
    let grads = if want_grad {
        let gm = g.backward(loss)?;
        Some(bound.grads(&g, &gm))
    } else {
        None
    };
    Ok((g.value(loss).item(), acc, grads))
}

/// Retrains the discrete network for `genotype` from fresh weights on the
/// union of training splits and scores it on the test split. With `out`,
/// writes `eval.csv`.
pub fn run_eval(cfg: &RunConfig, genotype: &Genotype, out: Option<&Path>) -> Result<EvalOutcome> {
    let (splits, test) = cfg.datasets()?;
    eval_on(cfg, genotype, &splits, &test, out)
}

pub fn eval_on(
    cfg: &RunConfig,
    genotype: &Genotype,
    splits: &DatasetSplits,
    test: &LabeledSet,
    out: Option<&Path>,
) -> Result<EvalOutcome> {
    check_genotype(cfg, genotype)?;
    let seed = cfg.run.seed;
    let spec = cfg.eval_explainer();
    let train = training_union(splits)?;
    let test_batch = test.as_batch();
    let mut w = spec.init_weights(Some(genotype), seed)?;
    let abort = |epoch: usize, what: &str| Error::NumericAbort { iteration: epoch as u64, quantity: format!("eval {what}") };

    let score = |w: &ExplainerWeights| -> Result<(f64, f64)> {
        let (loss, acc, _) = discrete_loss(&spec, genotype, w, &test_batch, false)?;
        Ok((loss, acc))
    };
    let (train0, _, _) = discrete_loss(&spec, genotype, &w, &train.as_batch(), false)?;
    let (test_loss, test_accuracy) = score(&w)?;
    let mut rows = vec![EvalRow { epoch: 0, train_loss: train0, test_loss, test_accuracy }];

    let mut batches = BatchIterator::new(&train, cfg.eval.batch_size, seeded(seed, stream::EVAL))?;
    let steps = train.len().div_ceil(cfg.eval.batch_size);
    for epoch in 1..=cfg.eval.epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let b = batches.next().expect("endless iterator");
            let (loss, _, grads) = discrete_loss(&spec, genotype, &w, &b, true)?;
            total += loss * b.labels.len() as f64;
            w = ExplainerWeights(w.0.axpy(-cfg.hyper.xi_e, &grads.expect("requested")));
        }
        if !w.all_finite() {
            return Err(abort(epoch, "weights"));
        }
        let train_loss = total / train.len() as f64;
        let (test_loss, test_accuracy) = score(&w)?;
        if !(train_loss.is_finite() && test_loss.is_finite()) {
            return Err(abort(epoch, "loss"));
        }
        debug!("eval epoch {epoch}: train {train_loss:.4} test {test_loss:.4} acc {test_accuracy:.3}");
        rows.push(EvalRow { epoch, train_loss, test_loss, test_accuracy });
    }
    let last = rows.last().expect("epoch 0 row").clone();
    if let Some(dir) = out {
        prepare(dir)?;
        fs::write(dir.join("eval.csv"), eval_csv(&rows))?;
    }
    info!("eval: test accuracy {:.4} after {} epochs", last.test_accuracy, cfg.eval.epochs);
    Ok(EvalOutcome { rows, test_accuracy: last.test_accuracy, test_loss: last.test_loss })
}

/// A uniformly random genotype over the configured cell, drawn from the
/// baseline stream of `seed`.
pub fn random_genotype(cfg: &RunConfig, seed: u64) -> Genotype {
    Genotype::random(&cfg.search_cell(), &mut seeded(seed, stream::BASELINE))
}

fn with_seed(cfg: &RunConfig, seed: u64) -> RunConfig {
    let mut c = cfg.clone();
    c.run.seed = seed;
    c
}

fn subdir(out: Option<&Path>, name: String) -> Option<PathBuf> {
    out.map(|d| d.join(name))
}

/// One γ per entry: search with seed `seed + index`, then evaluate. Runs in
/// parallel; rows keep the input order. With `out`, each run writes into
/// `gamma_<index>/` and the table goes to `sweep.csv`.
pub fn gamma_sweep(cfg: &RunConfig, gammas: &[f64], out: Option<&Path>) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() {
        return Err(Error::ConfigValidation { field: "gamma".into(), message: "empty list".into() });
    }
    if let Some(bad) = gammas.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(Error::ConfigValidation {
            field: "gamma".into(),
            message: format!("values must be finite and ≥ 0, got {bad}"),
        });
    }
    let rows = par::map(gammas.len(), |i| -> Result<SweepRow> {
        let mut c = with_seed(cfg, cfg.run.seed + i as u64);
        c.hyper.gamma = gammas[i];
        let dir = subdir(out, format!("gamma_{i}"));
        let (splits, test) = c.datasets()?;
        let s = search_on(&c, &splits, dir.as_deref())?;
        let e = eval_on(&c, &s.genotype, &splits, &test, dir.as_deref())?;
        let last = s.rows.last();
        Ok(SweepRow {
            gamma: gammas[i],
            seed: c.run.seed,
            test_error: 1.0 - e.test_accuracy,
            test_accuracy: e.test_accuracy,
            explainer_val_loss: last.map_or(f64::NAN, |r| r.explainer_val_loss),
            audience_val_loss: last.and_then(|r| r.audience_val_loss),
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(dir) = out {
        prepare(dir)?;
        fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
    }
    Ok(rows)
}

/// One seed of a searched-versus-random comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub seed: u64,
    pub searched_accuracy: f64,
    pub random_accuracy: f64,
    pub first_outer: f64,
    pub last_outer: f64,
    pub genotype: Genotype,
}

pub const COMPARE_HEADER: &str = "seed,searched_accuracy,random_accuracy,first_outer_objective,last_outer_objective";

pub fn compare_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARE_HEADER}\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.seed, r.searched_accuracy, r.random_accuracy, r.first_outer, r.last_outer)
            .expect("string write");
    }
    s
}

/// For each of `n` seeds from `cfg.run.seed`: search and retrain, and
/// retrain one uniformly random genotype on the same data from the same
/// initialization seed. Sequential. With `out`, each seed writes into
/// `seed_<s>/` and the table goes to `compare.csv`.
pub fn compare_with_random(cfg: &RunConfig, n: usize, out: Option<&Path>) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let c = with_seed(cfg, cfg.run.seed + i);
        let dir = subdir(out, format!("seed_{}", c.run.seed));
        let (splits, test) = c.datasets()?;
        let s = search_on(&c, &splits, dir.as_deref())?;
        let searched = eval_on(&c, &s.genotype, &splits, &test, dir.as_deref())?;
        let random = eval_on(&c, &random_genotype(&c, c.run.seed), &splits, &test, None)?;
        info!(
            "seed {}: searched {:.4}, random {:.4}",
            c.run.seed, searched.test_accuracy, random.test_accuracy
        );
        rows.push(ComparisonRow {
            seed: c.run.seed,
            searched_accuracy: searched.test_accuracy,
            random_accuracy: random.test_accuracy,
            first_outer: s.rows.first().map_or(f64::NAN, |r| r.outer_objective),
            last_outer: s.rows.last().map_or(f64::NAN, |r| r.outer_objective),
            genotype: s.genotype,
        });
    }
    if let Some(dir) = out {
        prepare(dir)?;
        fs::write(dir.join("compare.csv"), compare_csv(&rows))?;
    }
    Ok(rows)
}
