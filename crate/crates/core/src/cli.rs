//! The `latem` command line.
//!
//! Every subcommand reads the plain-text formats of [`crate::data`], writes its
//! outputs atomically and maps errors to exit codes: 0 success, 1 user or input
//! error, 2 numeric failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    self, fuse_early, l2_normalize_classes, parse_class_embeddings, parse_image_features,
    parse_split, ClassSet, ImageSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate_late_fusion, evaluate_zero_shot, group_by_matrix, k_sweep, ksweep_csv,
    matrix_top_csv, per_class_csv, predictions_csv, RankedImage, ZeroShotReport,
};
use crate::loss::empirical_risk;
use crate::persist::{load_model, save_model, write_atomic};
use crate::pipeline::{fit_on_classes, ZeroShotData};
use crate::selection::{
    cross_validate_k, cv_table_csv, prune_history_csv, PruneConfig, SupportCounting, DEFAULT_GRID,
};
use crate::synthesis::{generate_planted, truth_csv, PlantedSpec};
use crate::trainer::{LossVariant, TrainConfig, DEFAULT_EPOCHS};

#[derive(Debug, Parser)]
#[command(name = "latem", version, about = "Latent-embedding zero-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on the train classes of a split.
    Train(TrainArgs),
    /// Evaluate a saved model (or several, late-fused) on the test classes.
    Eval(EvalArgs),
    /// Choose K by validation accuracy on the val classes.
    Cv(CvArgs),
    /// Generate a planted-structure dataset.
    Synth(SynthArgs),
    /// List the top-scoring images won by each latent matrix.
    Inspect(InspectArgs),
    /// Accuracy over a K grid and several seeds, trained on train+val.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Image features: `image_id,class_id,f1,...,fD` per line.
    #[arg(long)]
    features: PathBuf,
    /// Class embeddings: `class_id,e1,...,eE`. A comma list is concatenated (early fusion).
    #[arg(long, value_delimiter = ',', required = true)]
    classes: Vec<PathBuf>,
    /// Class split with `[train]`, `[val]` and `[test]` sections.
    #[arg(long)]
    split: PathBuf,
}

/// Training flags. Unset flags fall back to the config file, then to defaults.
#[derive(Debug, Args, Default)]
struct TrainFlags {
    /// Number of latent matrices.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `ranking` (one sampled wrong class) or `max-violator`.
    #[arg(long)]
    loss: Option<String>,
    /// `key=value` lines; keys are flag names without the dashes.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    /// Start with `--k-init` matrices and prune rarely used ones.
    #[arg(long)]
    prune: bool,
    #[arg(long)]
    k_init: Option<usize>,
    #[arg(long)]
    prune_period: Option<usize>,
    #[arg(long)]
    support_fraction: Option<f64>,
    /// Prune on counts since the start of training instead of since the last prune.
    #[arg(long)]
    cumulative_support: bool,
    /// Train on train+val classes.
    #[arg(long)]
    include_val: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the prune history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "late_fusion", conflicts_with = "late_fusion")]
    model: Option<PathBuf>,
    /// Models whose scores are averaged; pairs with the `--classes` list.
    #[arg(long, value_delimiter = ',')]
    late_fusion: Vec<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID)]
    grid: Vec<usize>,
    #[arg(long, default_value = "cv.csv")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    k_star: usize,
    #[arg(long, default_value_t = 16)]
    dx: usize,
    #[arg(long, default_value_t = 8)]
    dy: usize,
    /// Seen classes, val classes included.
    #[arg(long, default_value_t = 40)]
    train_classes: usize,
    #[arg(long, default_value_t = 10)]
    val_classes: usize,
    #[arg(long, default_value_t = 10)]
    test_classes: usize,
    #[arg(long, default_value_t = 50)]
    images_per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also save the generator maps as a model file.
    #[arg(long)]
    truth_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Which classes' images to rank: all, train, val or test.
    #[arg(long, default_value = "all")]
    partition: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 6, 8, 10])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value = "ksweep.csv")]
    out: PathBuf,
}

/// Parse `args` (program name first), run the subcommand and return the exit code.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Cv(a) => cmd_cv(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Inspect(a) => cmd_inspect(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format { line, msg } => Error::Format {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn read_images(path: &Path) -> Result<ImageSet> {
    with_path(path, parse_image_features(open(path)?))
}

fn source_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_classes(path: &Path) -> Result<ClassSet> {
    let raw = with_path(path, parse_class_embeddings(open(path)?))?;
    Ok(l2_normalize_classes(&raw)?.with_source_tag(&source_tag(path)))
}

fn load_data(args: &DataArgs) -> Result<ZeroShotData> {
    let images = read_images(&args.features)?;
    let sources = args
        .classes
        .iter()
        .map(|p| read_classes(p))
        .collect::<Result<Vec<_>>>()?;
    let classes = if sources.len() == 1 {
        sources.into_iter().next().unwrap()
    } else {
        fuse_early(&sources)?
    };
    let split = with_path(&args.split, parse_split(open(&args.split)?))?;
    images.check_labels(&classes)?;
    for id in split
        .trainval_classes()
        .iter()
        .chain(&split.test_classes)
    {
        if classes.index_of(id).is_none() {
            return Err(Error::validation(format!(
                "split class {id} has no embedding"
            )));
        }
    }
    Ok(ZeroShotData {
        images,
        classes,
        split,
    })
}

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Format {
            line: i + 1,
            msg: format!("{}: expected key=value", path.display()),
        })?;
        out.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(out)
}

/// Flag values layered over a config file; records every resolved setting.
struct Settings {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Settings {
    fn load(config: Option<&Path>) -> Result<Self> {
        Ok(Settings {
            file: config.map(parse_config_file).transpose()?.unwrap_or_default(),
            resolved: BTreeMap::new(),
        })
    }

    fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: std::str::FromStr + ToString,
    {
        let value = match (flag, self.file.get(key)) {
            (Some(v), _) => v,
            (None, Some(s)) => s
                .parse()
                .map_err(|_| Error::Config(format!("config value {key}={s} is not valid")))?,
            (None, None) => default,
        };
        self.resolved.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        self.get(key, flag.then_some(true), false)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }
}

fn train_config(flags: &TrainFlags, s: &mut Settings) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let loss: String = s.get("loss", flags.loss.clone(), defaults.loss_variant.to_string())?;
    let config = TrainConfig {
        k: s.get("k", flags.k, defaults.k)?,
        epochs: s.get("epochs", flags.epochs, DEFAULT_EPOCHS)?,
        eta: s.get("eta", flags.eta, defaults.eta)?,
        seed: s.get("seed", flags.seed, defaults.seed)?,
        loss_variant: loss.parse::<LossVariant>()?,
    };
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut s = Settings::load(a.flags.config.as_deref())?;
    let config = train_config(&a.flags, &mut s)?;
    let prune = if s.switch("prune", a.prune)? {
        let d = PruneConfig::default();
        let p = PruneConfig {
            k_init: s.get("k-init", a.k_init, d.k_init)?,
            prune_period: s.get("prune-period", a.prune_period, d.prune_period)?,
            support_fraction: s.get("support-fraction", a.support_fraction, d.support_fraction)?,
            counting: if s.switch("cumulative-support", a.cumulative_support)? {
                SupportCounting::Cumulative
            } else {
                SupportCounting::Window
            },
        };
        p.validate()?;
        Some(p)
    } else {
        None
    };
    let include_val = s.switch("include-val", a.include_val)?;
    let data = load_data(&a.data)?;
    let train_ids = if include_val {
        data.split.trainval_classes()
    } else {
        data.split.train_classes.clone()
    };
    s.note("classes", data.classes.source_tag());

    let mut model = fit_on_classes(&config, prune.as_ref(), &data.images, &data.classes, &train_ids)?;
    model.meta.settings = s.resolved;

    let train_images = data::apply_zscore(&data.images.filter_classes(&train_ids), &model.norm_stats)?;
    let risk = empirical_risk(&model, &train_images, &data.classes.subset(&train_ids)?)?;
    if !risk.is_finite() {
        return Err(Error::NonFinite("final empirical risk".into()));
    }
    save_model(&a.out, &model)?;
    if let Some(path) = &a.history {
        write_atomic(path, prune_history_csv(&model.meta.prune_history).as_bytes())?;
    }
    println!(
        "trained K={} on {} classes, {} images",
        model.k(),
        train_ids.len(),
        train_images.len()
    );
    println!("final empirical risk: {risk}");
    println!("model written to {}", a.out.display());
    Ok(())
}

fn write_report(report: &ZeroShotReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(&out_dir.join("per_class.csv"), per_class_csv(report).as_bytes())?;
    write_atomic(&out_dir.join("predictions.csv"), predictions_csv(report).as_bytes())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let report = match &a.model {
        Some(path) => {
            let data = load_data(&a.data)?;
            let test = &data.split.test_classes;
            let model = load_model(path)?;
            evaluate_zero_shot(&model, &data.images.filter_classes(test), &data.classes.subset(test)?)?
        }
        None => {
            if a.late_fusion.len() != a.data.classes.len() {
                return Err(Error::validation(format!(
                    "late fusion pairs {} models with {} class files",
                    a.late_fusion.len(),
                    a.data.classes.len()
                )));
            }
            let split = with_path(&a.data.split, parse_split(open(&a.data.split)?))?;
            let test = &split.test_classes;
            let images = read_images(&a.data.features)?.filter_classes(test);
            let models = a
                .late_fusion
                .iter()
                .map(|p| load_model(p))
                .collect::<Result<Vec<_>>>()?;
            let sets = a
                .data
                .classes
                .iter()
                .map(|p| read_classes(p)?.subset(test))
                .collect::<Result<Vec<_>>>()?;
            evaluate_late_fusion(&models, &images, &sets)?
        }
    };
    write_report(&report, &a.out_dir)?;
    println!("{}", report.summary());
    Ok(())
}

fn cmd_cv(a: &CvArgs) -> Result<()> {
    let mut s = Settings::load(a.flags.config.as_deref())?;
    let config = train_config(&a.flags, &mut s)?;
    let data = load_data(&a.data)?;
    data.split.require_val()?;
    let result = cross_validate_k(&a.grid, &config, &data.images, &data.classes, &data.split)?;
    write_atomic(&a.out, cv_table_csv(&result).as_bytes())?;
    for row in &result.table {
        println!("K={:<3} val accuracy {:.4}", row.k, row.accuracy);
    }
    println!("chosen K: {}", result.best_k);
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = PlantedSpec {
        k_star: a.k_star,
        d_x: a.dx,
        d_y: a.dy,
        n_train_classes: a.train_classes,
        n_val_classes: a.val_classes,
        n_test_classes: a.test_classes,
        images_per_class: a.images_per_class,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let planted = generate_planted(&spec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        ("features.csv", data::image_features_to_string(&planted.images)),
        ("classes.csv", data::class_embeddings_to_string(&planted.classes)),
        ("split.txt", data::split_to_string(&planted.split)),
        ("truth.csv", truth_csv(&planted.truth)),
    ];
    for (name, text) in &files {
        write_atomic(&dir.join(name), text.as_bytes())?;
    }
    if let Some(path) = &a.truth_model {
        let model = planted.truth.to_model(&planted.split.trainval_classes())?;
        save_model(path, &model)?;
    }
    println!(
        "wrote {} images, {} classes to {}",
        planted.images.len(),
        planted.classes.len(),
        dir.display()
    );
    Ok(())
}

/// Gnuplot script drawing one score histogram per matrix from inline data.
fn histogram_script(groups: &[Vec<RankedImage>], bins: usize) -> String {
    let scores = || groups.iter().flatten().map(|r| r.score);
    let lo = scores().fold(f64::INFINITY, f64::min);
    let hi = scores().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out = String::from("# score histogram per latent matrix\n$scores << EOD\n");
    if lo.is_finite() {
        for b in 0..bins {
            let _ = write!(out, "{}", lo + (b as f64 + 0.5) * width);
            for g in groups {
                let n = g
                    .iter()
                    .filter(|r| (((r.score - lo) / width) as usize).min(bins - 1) == b)
                    .count();
                let _ = write!(out, " {n}");
            }
            out.push('\n');
        }
    }
    out.push_str("EOD\n");
    let _ = writeln!(out, "set boxwidth {width}");
    out.push_str("set style fill transparent solid 0.4\nset xlabel 'score'\nset ylabel 'images'\n");
    let plots: Vec<String> = (0..groups.len())
        .map(|m| format!("$scores using 1:{} with boxes title 'W{}'", m + 2, m))
        .collect();
    let _ = writeln!(out, "plot {}", plots.join(", \\\n     "));
    out
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    if a.top == 0 {
        return Err(Error::Config("--top must be ≥1".into()));
    }
    let data = load_data(&a.data)?;
    let ids = match a.partition.as_str() {
        "all" => data
            .split
            .trainval_classes()
            .into_iter()
            .chain(data.split.test_classes.iter().cloned())
            .collect(),
        "train" => data.split.train_classes.clone(),
        "val" => data.split.val_classes.clone(),
        "test" => data.split.test_classes.clone(),
        other => return Err(Error::Config(format!("unknown partition {other:?}"))),
    };
    let model = load_model(&a.model)?;
    let classes = data.classes.subset(&ids)?;
    let images = data.images.filter_classes(&ids);
    let groups = group_by_matrix(&model, &images, &classes)?;
    let top: Vec<Vec<RankedImage>> = groups
        .iter()
        .map(|g| g.iter().take(a.top).cloned().collect())
        .collect();
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_atomic(&a.out_dir.join("matrix_top.csv"), matrix_top_csv(&top).as_bytes())?;
    write_atomic(
        &a.out_dir.join("score_hist.gp"),
        histogram_script(&groups, 20).as_bytes(),
    )?;
    for (m, g) in groups.iter().enumerate() {
        println!("W{m}: {} images", g.len());
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut s = Settings::load(a.flags.config.as_deref())?;
    let config = train_config(&a.flags, &mut s)?;
    let data = load_data(&a.data)?;
    let rows = k_sweep(&config, &a.grid, &data, a.seeds)?;
    write_atomic(&a.out, ksweep_csv(&rows).as_bytes())?;
    for r in &rows {
        println!("K={:<3} {:.4} ± {:.4}", r.k, r.mean_accuracy, r.std_error);
    }
    Ok(())
}
