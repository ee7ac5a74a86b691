use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn latem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latem"))
        .args(args)
        .env("LATEM_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(extra: &[&str]) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out_dir = dir.path().to_str().unwrap().to_string();
        let mut args = vec![
            "synth", "--dx", "6", "--dy", "4", "--k-star", "2", "--train-classes", "8",
            "--val-classes", "3", "--test-classes", "4", "--images-per-class", "10",
            "--sigma", "0.1", "--seed", "5", "--out-dir", &out_dir,
        ];
        args.extend_from_slice(extra);
        let out = latem(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn data_args(&self) -> Vec<String> {
        vec![
            "--features".into(),
            self.p("features.csv"),
            "--classes".into(),
            self.p("classes.csv"),
            "--split".into(),
            self.p("split.txt"),
        ]
    }

    fn run(&self, cmd: &str, extra: &[&str]) -> Output {
        let mut args: Vec<String> = vec![cmd.into()];
        args.extend(self.data_args());
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        latem(&refs)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.p(out);
        let mut args = vec!["--eta", "0.05", "--epochs", "20", "--seed", "1", "--out", &out];
        args.extend_from_slice(extra);
        self.run("train", &args)
    }
}

#[test]
fn synth_writes_four_files_deterministically() {
    let a = Fixture::new(&[]);
    let b = Fixture::new(&[]);
    for name in ["features.csv", "classes.csv", "split.txt", "truth.csv"] {
        assert_eq!(fs::read(a.path(name)).unwrap(), fs::read(b.path(name)).unwrap(), "{name}");
    }
    let bad = latem(&["synth", "--dx", "2", "--dy", "4", "--out-dir", a.dir.path().to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn train_then_eval_reports_consistent_accuracy() {
    let f = Fixture::new(&[]);
    let out = f.train("m.bin", &["--k", "2", "--include-val"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("final empirical risk:"));

    let dir = f.p("report");
    let out = f.run("eval", &["--model", &f.p("m.bin"), "--out-dir", &dir]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let per_class = fs::read_to_string(f.path("report/per_class.csv")).unwrap();
    let accs: Vec<f64> = per_class
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(accs.len(), 4);
    let mean = accs.iter().sum::<f64>() / 4.0;
    assert!(stdout(&out).contains(&format!("{mean:.4}")), "{}", stdout(&out));
    let predictions = fs::read_to_string(f.path("report/predictions.csv")).unwrap();
    assert_eq!(predictions.lines().count(), 1 + 40);
}

#[test]
fn eval_rejects_seen_classes_and_bad_files() {
    let f = Fixture::new(&[]);
    assert_eq!(code(&f.train("m.bin", &["--k", "1"])), 0);
    // a split whose test section reuses a training class
    let split = fs::read_to_string(f.path("split.txt")).unwrap();
    let leaky = split.replace("[test]\n", "[test]\nc000\n").replace("[train]\nc000\n", "[train]\n");
    fs::write(f.path("split.txt"), leaky).unwrap();
    let out = f.run("eval", &["--model", &f.p("m.bin"), "--out-dir", &f.p("r")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("train/test class overlap"), "{}", stderr(&out));
    fs::write(f.path("split.txt"), split).unwrap();

    fs::write(f.path("bad.bin"), b"GARBAGE-not-a-model").unwrap();
    let out = f.run("eval", &["--model", &f.p("bad.bin"), "--out-dir", &f.p("r")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("not a LATEM1 file"));

    let mut bytes = fs::read(f.path("m.bin")).unwrap();
    bytes[5] = b'2';
    fs::write(f.path("v2.bin"), &bytes).unwrap();
    let out = f.run("eval", &["--model", &f.p("v2.bin"), "--out-dir", &f.p("r")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("unsupported version"));
}

#[test]
fn train_errors_map_to_exit_codes() {
    let f = Fixture::new(&[]);
    let out = f.train("m.bin", &["--k", "0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("K must be ≥1"));
    assert!(!f.path("m.bin").exists());

    let out = f.run("train", &["--k", "2", "--eta", "1e308", "--epochs", "10", "--out", &f.p("m.bin")]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));

    fs::write(f.path("features.csv"), "img0,c000,1.0,abc\n").unwrap();
    let out = f.train("m.bin", &["--k", "2"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

#[test]
fn pruning_records_history() {
    let f = Fixture::new(&[]);
    let history = f.p("h.csv");
    let out = f.train(
        "p.bin",
        &["--prune", "--k-init", "16", "--prune-period", "5", "--support-fraction", "0.05", "--history", &history],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = latem::persist::load_model(&f.path("p.bin")).unwrap();
    assert_eq!(model.meta.prune_history.len(), 4);
    assert_eq!(model.meta.prune_history[0].candidates.len(), 16);
    assert!(model.k() >= 1 && model.k() <= 16);
    assert_eq!(model.meta.settings["prune"], "true");
    assert_eq!(model.meta.settings["k-init"], "16");
    let csv = fs::read_to_string(&history).unwrap();
    assert!(csv.starts_with("epoch,matrix_index,count,threshold,kept\n"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let f = Fixture::new(&[]);
    fs::write(f.path("run.cfg"), "k=3\nepochs=7\neta=0.2\n").unwrap();
    let cfg = f.p("run.cfg");
    let out = f.run("train", &["--config", &cfg, "--eta", "0.05", "--out", &f.p("m.bin")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let model = latem::persist::load_model(&f.path("m.bin")).unwrap();
    assert_eq!(model.k(), 3);
    assert_eq!(model.meta.epochs, 7);
    assert_eq!(model.meta.eta, 0.05);
    assert_eq!(model.meta.settings["eta"], "0.05");
}

#[test]
fn cv_table_and_missing_val() {
    let f = Fixture::new(&[]);
    let table = f.p("cv.csv");
    let out = f.run("cv", &["--grid", "1", "--epochs", "5", "--out", &table]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&table).unwrap().lines().count(), 2);
    assert!(stdout(&out).contains("chosen K: 1"));

    let out = f.run("cv", &["--grid", "2,4", "--epochs", "5", "--out", &table]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&table).unwrap();
    assert_eq!(text.lines().next(), Some("k,val_accuracy"));
    assert_eq!(text.lines().count(), 3);

    let split = fs::read_to_string(f.path("split.txt")).unwrap();
    let start = split.find("[val]").unwrap();
    let end = split.find("[test]").unwrap();
    fs::write(f.path("split.txt"), format!("{}{}", &split[..start], &split[end..])).unwrap();
    let out = f.run("cv", &["--epochs", "5", "--out", &table]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("empty val partition"), "{}", stderr(&out));
}

fn truth_map(path: &Path) -> HashMap<String, usize> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let (id, g) = l.split_once(',').unwrap();
            (id.to_string(), g.parse().unwrap())
        })
        .collect()
}

#[test]
fn inspect_on_noiseless_truth_recovers_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let truth_model = format!("{d}/truth.bin");
    let out = latem(&[
        "synth", "--dx", "6", "--dy", "4", "--k-star", "3", "--train-classes", "8",
        "--val-classes", "3", "--test-classes", "4", "--images-per-class", "10",
        "--sigma", "0", "--seed", "9", "--out-dir", d, "--truth-model", &truth_model,
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let f = Fixture { dir };
    let out = f.run("inspect", &["--model", &truth_model, "--top", "1000", "--out-dir", &f.p("ins")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let truth = truth_map(&f.path("truth.csv"));
    let top = fs::read_to_string(f.path("ins/matrix_top.csv")).unwrap();
    let mut seen = 0;
    for line in top.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let m: usize = fields[0].parse().unwrap();
        assert_eq!(truth[fields[2]], m, "{line}");
        seen += 1;
    }
    assert_eq!(seen, truth.len());
    assert!(fs::read_to_string(f.path("ins/score_hist.gp")).unwrap().contains("plot "));
}

#[test]
fn inspect_top_limits_and_single_group() {
    let f = Fixture::new(&[]);
    assert_eq!(code(&f.train("k1.bin", &["--k", "1"])), 0);
    let out = f.run("inspect", &["--model", &f.p("k1.bin"), "--top", "5", "--partition", "test", "--out-dir", &f.p("ins")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let top = fs::read_to_string(f.path("ins/matrix_top.csv")).unwrap();
    let rows: Vec<&str> = top.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.starts_with("0,")));

    assert_eq!(code(&f.train("k3.bin", &["--k", "3"])), 0);
    let out = f.run("inspect", &["--model", &f.p("k3.bin"), "--top", "2", "--out-dir", &f.p("ins")]);
    assert_eq!(code(&out), 0);
    let top = fs::read_to_string(f.path("ins/matrix_top.csv")).unwrap();
    for m in 0..3 {
        assert!(top.lines().filter(|l| l.starts_with(&format!("{m},"))).count() <= 2);
    }
    let out = f.run("inspect", &["--model", &f.p("k3.bin"), "--top", "0"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn late_and_early_fusion() {
    let f = Fixture::new(&[]);
    // a second, independent embedding of the same classes
    let second: String = fs::read_to_string(f.path("classes.csv"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut parts = l.split(',');
            let id = parts.next().unwrap();
            let rest: Vec<String> = parts.map(|v| format!("{}", -v.parse::<f64>().unwrap())).collect();
            format!("{id},{}\n", rest.join(","))
        })
        .collect();
    fs::write(f.path("other.csv"), second).unwrap();
    let both = format!("{},{}", f.p("classes.csv"), f.p("other.csv"));

    let train = |classes: &str, out: &str| {
        let out = f.p(out);
        latem(&[
            "train", "--features", &f.p("features.csv"), "--classes", classes, "--split",
            &f.p("split.txt"), "--k", "2", "--eta", "0.05", "--epochs", "10", "--out", &out,
        ])
    };
    assert_eq!(code(&train(&f.p("classes.csv"), "a.bin")), 0);
    assert_eq!(code(&train(&f.p("other.csv"), "b.bin")), 0);
    let out = train(&both, "early.bin");
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let early = latem::persist::load_model(&f.path("early.bin")).unwrap();
    assert_eq!(early.dim_y(), 8);
    assert_eq!(early.meta.settings["classes"], "classes+other");

    let models = format!("{},{}", f.p("a.bin"), f.p("b.bin"));
    let out = latem(&[
        "eval", "--late-fusion", &models, "--features", &f.p("features.csv"), "--classes", &both,
        "--split", &f.p("split.txt"), "--out-dir", &f.p("lf"),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("average per-class top-1"));

    let out = latem(&[
        "eval", "--late-fusion", &models, "--features", &f.p("features.csv"), "--classes",
        &f.p("classes.csv"), "--split", &f.p("split.txt"),
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn sweep_writes_table() {
    let f = Fixture::new(&[]);
    let out = f.run("sweep", &["--grid", "1,2", "--seeds", "2", "--epochs", "5", "--out", &f.p("ks.csv")]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(f.path("ks.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("k,mean_accuracy,std_error,n_seeds"));
    assert_eq!(text.lines().count(), 3);
}
