use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info, warn};
use serde_json::json;

use pndnet::checkpoint::{load_checkpoint, save_checkpoint, Classifier};
use pndnet::config::Config;
use pndnet::data::image::read_image;
use pndnet::data::{kfold_split, list_images, load_dataset, split_train_test, Dataset, SplitPlan};
use pndnet::gradcam::{grad_cam, write_heatmap};
use pndnet::graph::{build_complete_adjacency, gcn_layer_forward, gcn_layer_forward_rank1, layer_mac_counts};
use pndnet::metrics::argmax;
use pndnet::train::{cross_validate, evaluate, history_json, train, CrossValidation, Summary};
use pndnet::verify::run_checks;
use pndnet::{Rng, Scalar, Tape, Tensor};

const BENCH_TOLERANCE: f64 = 1e-5;
const BENCH_HEADER: &str = "p,c,dense_us,rank1_us,speedup,dense_macs,rank1_macs,max_abs_diff";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] pndnet::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use pndnet::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 3,
            CliError::Core(e) => match e {
                E::Argument(_) | E::Config(_) => 1,
                E::Training { .. } => 3,
                _ => 2,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Region/pyramid graph-convolution image classifier.
#[derive(Parser)]
#[command(name = "pnd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a directory-per-class corpus (70:30 split, or k-fold CV).
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a metrics report.
    Eval(EvalArgs),
    /// Class probabilities for an image or every image in a directory.
    Predict(PredictArgs),
    /// Grad-CAM heatmaps for an image or directory.
    Gradcam(GradcamArgs),
    /// Write the train/test split (and folds) for a corpus.
    Split(SplitArgs),
    /// Finite-difference gradient checks over the registered ops.
    Gradcheck(GradcheckArgs),
    /// Time dense against rank-1 graph propagation.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint path; fold checkpoints get a `.foldN` infix.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    /// Defaults to the checkpoint path with a `.history.json` extension.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    All,
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Split plan written by `pnd split`; required for `--subset train|test`.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    subset: Subset,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    input: PathBuf,
    /// JSON-lines output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving `<stem>.pgm` and `<stem>.json` per image.
    #[arg(long)]
    out: PathBuf,
    /// Target class index; the predicted class when absent.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    ratio: f64,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Comma-separated op names; all registered ops when absent.
    #[arg(long, value_delimiter = ',')]
    ops: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupts the analytic gradient of one op.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [4, 13, 32])]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 256, 2048])]
    c: Vec<usize>,
    /// Timed repetitions per path; the median is reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn require_dir(p: &Path, flag: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag}: {} is not a directory", p.display())))
    }
}

fn require_file(p: &Path, flag: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag}: {} does not exist", p.display())))
    }
}

fn require_exists(p: &Path, flag: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{flag}: {} does not exist", p.display())))
    }
}

/// `dir/stem<suffix>` next to `path`, e.g. `model.fold1.pndw`.
fn sibling(path: &Path, infix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let name = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}{infix}.{ext}"),
        None => format!("{stem}{infix}"),
    };
    path.with_file_name(name)
}

fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.json")
}

fn summary_row(name: &str, s: &Summary) -> String {
    let top3 = s.top3.map_or("-".to_string(), |v| format!("{:.2}", v * 100.0));
    format!(
        "{name:>5} {:>8.2} {:>8} {:>9.2} {:>8.2} {:>8.2}",
        s.accuracy * 100.0,
        top3,
        s.precision * 100.0,
        s.recall * 100.0,
        s.f1 * 100.0
    )
}

fn print_cv_table(cv: &CrossValidation) {
    println!("{:>5} {:>8} {:>8} {:>9} {:>8} {:>8}", "fold", "top1", "top3", "precision", "recall", "f1");
    for f in &cv.folds {
        println!("{}", summary_row(&f.fold.to_string(), &f.validation));
    }
    println!("{}", summary_row("Avg", &cv.avg.validation));
    if let Some(t) = &cv.avg.test {
        println!("{}", summary_row("Test", t));
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_dir(&a.data, "--data")?;
    require_file(&a.config, "--config")?;
    let mut config = Config::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    let ds = load_dataset(&a.data)?;
    info!("{} images in {} classes", ds.len(), ds.num_classes());
    let seed = config.train.seed;
    let plan = split_train_test(&ds.labels(), config.train.split_ratio, seed)?;
    match a.folds {
        None => {
            let out = train(&config, &ds, &plan.train)?;
            save_checkpoint(&out.classifier, &a.out)?;
            let history = a.history.unwrap_or_else(|| history_path(&a.out));
            std::fs::write(&history, history_json(&out.history))?;
            let test = Summary::of(&evaluate(&out.classifier, &ds, &plan.test)?.report);
            println!(
                "{}",
                json!({
                    "checkpoint": a.out,
                    "history": history,
                    "train_size": plan.train.len(),
                    "test_size": plan.test.len(),
                    "test": test,
                })
            );
        }
        Some(k) => {
            let plan = kfold_split(&plan, k, seed)?;
            let cv = cross_validate(&config, &ds, &plan, |i, out| {
                let ckpt = sibling(&a.out, &format!(".fold{}", i + 1));
                save_checkpoint(&out.classifier, &ckpt)?;
                std::fs::write(history_path(&ckpt), history_json(&out.history))?;
                Ok(())
            })?;
            let summary = sibling(&a.out, ".cv").with_extension("json");
            std::fs::write(&summary, serde_json::to_string_pretty(&cv).map_err(pndnet::Error::from)?)?;
            print_cv_table(&cv);
        }
    }
    Ok(())
}

fn subset_indices(ds: &Dataset, split: Option<&Path>, subset: Subset) -> Result<Vec<usize>> {
    let plan = match (split, subset) {
        (_, Subset::All) => return Ok((0..ds.len()).collect()),
        (None, _) => return Err(CliError::Usage("--subset train|test needs --split".into())),
        (Some(p), _) => {
            require_file(p, "--split")?;
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str::<SplitPlan>(&text)
                .map_err(|e| pndnet::Error::Ingestion {
                    path: p.to_path_buf(),
                    message: format!("split plan: {e}"),
                })?
        }
    };
    let idx = match subset {
        Subset::Train => plan.train,
        _ => plan.test,
    };
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.len()) {
        return Err(pndnet::Error::Split(format!("index {bad} out of range for {} samples", ds.len())).into());
    }
    Ok(idx)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_dir(&a.data, "--data")?;
    require_file(&a.ckpt, "--ckpt")?;
    let c = load_checkpoint(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    let idx = subset_indices(&ds, a.split.as_deref(), a.subset)?;
    let e = evaluate(&c, &ds, &idx)?;
    let text = serde_json::to_string_pretty(&e.report.to_json()).map_err(pndnet::Error::from)?;
    std::fs::write(&a.report, text)?;
    println!("{}", serde_json::to_string(&Summary::of(&e.report)).map_err(pndnet::Error::from)?);
    Ok(())
}

fn inputs(p: &Path) -> Result<Vec<PathBuf>> {
    require_exists(p, "--input")?;
    if p.is_dir() {
        let files = list_images(p)?;
        if files.is_empty() {
            return Err(pndnet::Error::Ingestion {
                path: p.to_path_buf(),
                message: "no images found".into(),
            }
            .into());
        }
        Ok(files)
    } else {
        Ok(vec![p.to_path_buf()])
    }
}

fn prediction_line(c: &Classifier, path: &Path) -> Result<serde_json::Value> {
    let img = read_image(path)?;
    let probs = c.predict(&[&img])?.remove(0);
    let class = argmax(&probs);
    Ok(json!({
        "path": path,
        "class": class,
        "class_name": c.classes[class],
        "probabilities": probs,
    }))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    require_file(&a.ckpt, "--ckpt")?;
    let c = load_checkpoint(&a.ckpt)?;
    let mut lines = String::new();
    for path in inputs(&a.input)? {
        lines.push_str(&prediction_line(&c, &path)?.to_string());
        lines.push('\n');
    }
    match a.out {
        Some(out) => std::fs::write(out, lines)?,
        None => print!("{lines}"),
    }
    Ok(())
}

fn cmd_gradcam(a: GradcamArgs) -> Result<()> {
    require_file(&a.ckpt, "--ckpt")?;
    let c = load_checkpoint(&a.ckpt)?;
    let files = inputs(&a.input)?;
    if let Some(t) = a.class.filter(|&t| t >= c.classes.len()) {
        return Err(CliError::Usage(format!("--class {t} out of range for {} classes", c.classes.len())));
    }
    std::fs::create_dir_all(&a.out)?;
    for path in files {
        let img = read_image(&path)?;
        let target = match a.class {
            Some(t) => t,
            None => argmax(&c.predict(&[&img])?[0]),
        };
        let h = grad_cam(&c, &img, target)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let (pgm, sidecar) = (a.out.join(format!("{stem}.pgm")), a.out.join(format!("{stem}.json")));
        write_heatmap(&h, &c.classes[target], &pgm, &sidecar)?;
        let (r, col) = h.argmax();
        println!(
            "{}",
            json!({
                "path": path,
                "class": target,
                "class_name": c.classes[target],
                "heatmap": pgm,
                "sidecar": sidecar,
                "peak": [r, col],
            })
        );
    }
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    require_dir(&a.data, "--data")?;
    let ds = load_dataset(&a.data)?;
    let mut plan = split_train_test(&ds.labels(), a.ratio, a.seed)?;
    if let Some(k) = a.folds {
        plan = kfold_split(&plan, k, a.seed)?;
    }
    std::fs::write(&a.out, plan.to_json())?;
    println!(
        "{}",
        json!({"train": plan.train.len(), "test": plan.test.len(), "folds": plan.folds.iter().map(Vec::len).collect::<Vec<_>>()})
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let results = run_checks(&a.ops, a.seed, a.inject_fault.as_deref())?;
    let mut failed = Vec::new();
    for r in &results {
        println!(
            "{:<22} {:.3e} {}",
            r.name,
            r.report.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

fn random<T: Scalar>(shape: [usize; 2], scale: f64, rng: &mut Rng) -> Tensor<T> {
    Tensor::<f64>::from_fn(shape, |_| rng.uniform_range(-scale, scale)).cast()
}

/// Dense and rank-1 outputs of one layer plus the multiply-adds each used.
fn both_paths<T: Scalar>(p: usize, g: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, u64, u64)> {
    let spec = build_complete_adjacency(p)?;
    let mut tape = Tape::new();
    let (gv, wv) = (tape.constant(g.clone()), tape.constant(w.clone()));
    let m0 = tape.macs();
    let dense = gcn_layer_forward(&mut tape, gv, &spec, wv)?;
    let m1 = tape.macs();
    let fast = gcn_layer_forward_rank1(&mut tape, gv, &spec, wv)?;
    let m2 = tape.macs();
    Ok((tape.value(dense).clone(), tape.value(fast).clone(), m1 - m0, m2 - m1))
}

fn median_us(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.p.contains(&0) || a.c.contains(&0) || a.reps == 0 {
        return Err(CliError::Usage("--p, --c and --reps must be positive".into()));
    }
    let mut rng = Rng::new(0);
    let mut csv = format!("{BENCH_HEADER}\n");
    for &p in &a.p {
        for &c in &a.c {
            let scale = 1.0 / (c as f64).sqrt();
            let (g, w) = (random::<f64>([p, c], 1.0, &mut rng), random::<f64>([c, c], scale, &mut rng));
            let (dense, fast, dense_macs, rank1_macs) = both_paths(p, &g, &w)?;
            let diff = dense.max_abs_diff(&fast);
            if diff.is_nan() || diff > BENCH_TOLERANCE {
                return Err(CliError::Numerical(format!(
                    "P={p} C={c}: dense and rank-1 outputs differ by {diff:.3e} (tolerance {BENCH_TOLERANCE:.0e})"
                )));
            }
            let (expect_dense, expect_rank1) = layer_mac_counts(p, c, c);
            if (dense_macs, rank1_macs) != (expect_dense, expect_rank1) {
                return Err(CliError::Numerical(format!(
                    "P={p} C={c}: counted {dense_macs}/{rank1_macs} multiply-adds, expected {expect_dense}/{expect_rank1}"
                )));
            }
            let (g32, w32): (Tensor<f32>, Tensor<f32>) = (g.cast(), w.cast());
            let spec = build_complete_adjacency(p)?;
            let time = |rank1: bool| {
                median_us(a.reps, || {
                    let mut tape = Tape::new();
                    let (gv, wv) = (tape.constant(g32.clone()), tape.constant(w32.clone()));
                    if rank1 {
                        gcn_layer_forward_rank1(&mut tape, gv, &spec, wv)?;
                    } else {
                        gcn_layer_forward(&mut tape, gv, &spec, wv)?;
                    }
                    Ok(())
                })
            };
            let (dense_us, rank1_us) = (time(false)?, time(true)?);
            debug!("P={p} C={c}: dense {dense_us:.1}us rank-1 {rank1_us:.1}us");
            csv.push_str(&format!(
                "{p},{c},{dense_us:.1},{rank1_us:.1},{:.2},{dense_macs},{rank1_macs},{diff:.3e}\n",
                dense_us / rank1_us.max(1e-3)
            ));
        }
    }
    match a.out {
        Some(out) => std::fs::write(out, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn check_threads() -> Result<()> {
    match std::env::var("PND_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                debug!("PND_THREADS={n}; computation is single-threaded");
                Ok(())
            }
            _ => Err(CliError::Usage(format!("PND_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(e) => {
            warn!("ignoring PND_THREADS: {e}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcam(a) => cmd_gradcam(a),
        Command::Split(a) => cmd_split(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
