use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lease::data::prototype;
use lease::harness::metrics::{EVAL_HEADER, METRICS_HEADER, SWEEP_HEADER};
use lease::params::Params;
use lease::searchspace::Genotype;

fn lease(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lease")).args(args).env("LEASE_LOG", "warn").output().unwrap()
}

fn config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const FAST: &str = "[run]\niterations = 3\nbatch_size = 8\n[data]\nn_train = 16\nn_val = 16\nn_test = 16\n[eval]\nepochs = 2\n";

#[test]
fn search_writes_one_metrics_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(cells[0], (i + 1).to_string());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()), "{l}");
    }
    assert_eq!(fs::read_to_string(out.join("timings.csv")).unwrap().lines().count(), 4);
    let g = Genotype::load(&out.join("genotype.txt")).unwrap();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), g.to_text());
    let ck = Params::load(&out.join("checkpoint.txt")).unwrap();
    assert_eq!(ck.get("iteration").unwrap().item(), 3.0);
    assert_eq!(ck.get("arch").unwrap().shape(), &[9, 5]);
}

#[test]
fn darts1st_leaves_audience_columns_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out), "--mode", "darts1st", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for l in metrics.lines().skip(1) {
        let cells: Vec<&str> = l.split(',').collect();
        assert_eq!(&cells[3..6], &["", "", ""]);
        assert_eq!(cells[6], cells[2], "outer objective is the explainer validation loss");
    }
}

#[test]
fn audience_only_logs_the_explainer_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out), "--mode", "audience-only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for l in metrics.lines().skip(1) {
        let cells: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(cells[2] > 0.0);
        assert_eq!(cells[6], cells[4], "outer objective is γ·audience validation loss with γ = 1");
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = config(dir.path(), "[hyper]\neta = -0.1\n");
    let o = lease(&["search", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hyper.eta"), "{}", stderr(&o));

    let bad = config(dir.path(), "[run]\niterations = 3\nunknown_key = 1\n");
    let o = lease(&["search", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = lease(&["search", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two_and_keeps_metrics_finite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{FAST}[hyper]\nxi_e = 1e200\n"));
    let out = dir.path().join("out");
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric abort at iteration"), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    for l in metrics.lines().skip(1) {
        assert!(l.split(',').filter(|c| !c.is_empty()).all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn eval_retrains_and_reports_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    assert!(lease(&["search", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let geno = out.join("genotype.txt");
    let o = lease(&["eval", "--config", s(&cfg), "--genotype", s(&geno), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = fs::read_to_string(out.join("eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], EVAL_HEADER);
    assert_eq!(lines.len(), 4, "epoch 0 plus two epochs");
    assert!(lines[1].starts_with("0,"));
    let acc: f64 = lines[3].split(',').nth(3).unwrap().parse().unwrap();
    assert!(String::from_utf8(o.stdout).unwrap().contains(&format!("test_accuracy {acc}")));

    let again = dir.path().join("again");
    assert!(lease(&["eval", "--config", s(&cfg), "--genotype", s(&geno), "--out", s(&again)]).status.success());
    assert_eq!(eval, fs::read_to_string(again.join("eval.csv")).unwrap());
}

#[test]
fn eval_rejects_a_genotype_of_another_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let geno = dir.path().join("g.txt");
    fs::write(&geno, "# lease genotype v1\nn_nodes = 2\nnode2 = 0:skip 1:skip\nnode3 = 0:skip 2:skip\n").unwrap();
    let o = lease(&["eval", "--config", s(&cfg), "--genotype", s(&geno)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("search.nodes"), "{}", stderr(&o));
}

#[test]
fn sweep_keeps_the_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    let o = lease(&["sweep", "--config", s(&cfg), "--gamma", "2,0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert!(lines[1].starts_with("2,0,"));
    assert!(lines[2].starts_with("0,1,"));
    assert!(out.join("gamma_1").join("metrics.csv").exists());
    assert_eq!(lease(&["sweep", "--config", s(&cfg), "--gamma=-1"]).status.code(), Some(1));
}

#[test]
fn explanations_are_dumped_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &FAST.replace("[run]\n", "[run]\ndump_every = 2\n"));
    let out = dir.path().join("out");
    assert!(lease(&["search", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let delta = Params::load(&out.join("explanations").join("delta_00002.txt")).unwrap();
    let d = delta.get("delta").unwrap();
    assert_eq!(d.shape(), &[8, 1, 8, 8]);
    assert!(d.max_abs() <= 0.1);
    assert!(!out.join("explanations").join("delta_00001.txt").exists());
}

fn idx_pair(dir: &Path, n: usize) {
    let mut images = vec![0, 0, 8, 3];
    let mut labels = vec![0, 0, 8, 1];
    images.extend((n as u32).to_be_bytes());
    images.extend(8u32.to_be_bytes());
    images.extend(8u32.to_be_bytes());
    labels.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let k = i % 4;
        images.extend(prototype(k, 8).iter().map(|&p| (p * 255.0) as u8));
        labels.push(k as u8);
    }
    fs::write(dir.join("images.idx"), images).unwrap();
    fs::write(dir.join("labels.idx"), labels).unwrap();
}

#[test]
fn idx_data_feeds_the_search() {
    let dir = tempfile::tempdir().unwrap();
    idx_pair(dir.path(), 40);
    let body = "[run]\niterations = 2\nbatch_size = 4\n[data]\nsource = \"idx\"\nimages = \"images.idx\"\nlabels = \"labels.idx\"\nshared = false\n[eval]\nepochs = 1\n";
    let cfg = config(dir.path(), body);
    let out = dir.path().join("out");
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("metrics.csv")).unwrap().lines().count(), 3);
    let o = lease(&["eval", "--config", s(&cfg), "--genotype", s(&out.join("genotype.txt")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    fs::write(dir.path().join("labels.idx"), [0u8, 0, 8, 1, 0, 0, 0, 3, 0, 1, 2]).unwrap();
    let o = lease(&["search", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("count mismatch"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes() {
    let o = lease(&["gradcheck"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn log_level_follows_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), FAST);
    let out = dir.path().join("out");
    let run = |level: &str| {
        Command::new(env!("CARGO_BIN_EXE_lease"))
            .args(["search", "--config", s(&cfg), "--out", s(&out)])
            .env("LEASE_LOG", level)
            .output()
            .unwrap()
    };
    assert!(stderr(&run("debug")).contains("DEBUG"));
    assert!(!stderr(&run("error")).contains("INFO"));
}
