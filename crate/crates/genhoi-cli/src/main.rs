//! `genhoi` command line: dataset generation, splits, embedding exchange,
//! training, inference, evaluation and the oracle self-test.

mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genhoi::config::RunConfig;
use genhoi::data::{generate_dataset, load_samples, toy_label_space, Manifest, DATA_DIR_ENV};
use genhoi::evaluation::evaluate;
use genhoi::inference::{detect, load_detections, randomize_unseen_rows, render_detections, save_detections};
use genhoi::label_space::{make_zero_shot_split, LabelSpace, LabelSpaceFile, SplitRequest, SplitSpec, ZeroShotSetting};
use genhoi::train::{load_model, run_training};
use genhoi::vlkt::{hoi_prompts, load_embedding_matrix, object_prompts, save_embedding_matrix, BACKGROUND_PROMPT};
use genhoi::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Lib(#[from] genhoi::Error),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} self-test suite(s) failed")]
    SelfTest(usize),
}

type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser)]
#[command(name = "genhoi", version, about = "Two-branch HOI detector with visual-linguistic knowledge transfer")]
struct Cli {
    /// Run configuration (JSON). Without it the toy preset is used with
    /// paths relative to the working directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset: PNG images, manifests and label space.
    GenData(GenData),
    /// Build a zero-shot split (with its rare/non-rare partition).
    MakeSplit(MakeSplit),
    /// Write HOI and object prompts, one per line, for an external text encoder.
    ExportPrompts(ExportPrompts),
    /// Validate externally computed embeddings and store them for training.
    ImportEmbeddings(ImportEmbeddings),
    /// Train and write the checkpoint and metrics log.
    Train,
    /// Run a checkpoint on a manifest and write detections.
    Infer(Infer),
    /// Score detections against a manifest and write the report.
    Eval(Eval),
    /// Run the oracle suites.
    Selftest,
}

#[derive(Args)]
struct GenData {
    /// Output directory; defaults to the configured data dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeSplit {
    /// Label space with train counts; defaults to the dataset's.
    #[arg(long)]
    label_space: Option<PathBuf>,
    /// RF-UC, NF-UC, UO or UV; defaults to the configured setting.
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    n_unseen: Option<usize>,
    /// Output file; defaults to the configured split path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportPrompts {
    #[arg(long)]
    label_space: Option<PathBuf>,
    /// Output directory; defaults to `<out_dir>/prompts`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ImportEmbeddings {
    /// One row per HOI prompt (EMB1 or whitespace/comma separated text).
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// One row per object prompt.
    #[arg(long)]
    objects: Option<PathBuf>,
    /// Row `r` is the image embedding of image_id `r`.
    #[arg(long)]
    teachers: Option<PathBuf>,
    #[arg(long)]
    label_space: Option<PathBuf>,
    /// Output directory; defaults to `<out_dir>/embeddings`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Defaults to the test manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw the top detections of the first N images.
    #[arg(long, default_value_t = 0)]
    render: usize,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let mut c = RunConfig::toy();
            c.out_dir = PathBuf::from("runs/toy");
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.data.dir = PathBuf::from(d);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn gen_data(cfg: &RunConfig, seed: Option<u64>, cmd: &GenData) -> CliResult<()> {
    let out = cmd.out.clone().unwrap_or_else(|| cfg.data.dir.clone());
    let mut spec = cfg.data.spec.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let files = generate_dataset(&toy_label_space(), &spec, &out)?;
    println!("wrote {} and {}", files.train_manifest.display(), files.test_manifest.display());
    Ok(())
}

fn make_split(cfg: &RunConfig, cmd: &MakeSplit) -> CliResult<()> {
    let ls_path = cmd.label_space.clone().unwrap_or_else(|| cfg.data.label_space());
    let file: LabelSpaceFile = serde_json::from_str(&std::fs::read_to_string(&ls_path).map_err(io_err(&ls_path))?)
        .map_err(|e| CliError::Usage(format!("{}: {e}", ls_path.display())))?;
    let (ls, counts) = LabelSpace::load(&ls_path)?;
    let counts = counts.ok_or_else(|| CliError::Usage(format!("{} has no train_counts", ls_path.display())))?;
    let setting: ZeroShotSetting = cmd
        .setting
        .as_deref()
        .or(cfg.split.setting.as_deref())
        .ok_or_else(|| CliError::Usage("no split setting given (--setting or split.setting)".into()))?
        .parse()?;
    let n_unseen = cmd.n_unseen.or(cfg.split.n_unseen);
    let request = match setting {
        ZeroShotSetting::RareFirst | ZeroShotSetting::NonRareFirst => {
            let n_unseen = n_unseen.ok_or_else(|| CliError::Usage("UC splits need --n-unseen".into()))?;
            if setting == ZeroShotSetting::RareFirst {
                SplitRequest::RareFirst { n_unseen }
            } else {
                SplitRequest::NonRareFirst { n_unseen }
            }
        }
        ZeroShotSetting::UnseenObject => {
            let objs = if cfg.split.unseen_objects.is_empty() {
                file.uo_objects.clone().ok_or_else(|| CliError::Usage("UO needs split.unseen_objects".into()))?
            } else {
                cfg.split.unseen_objects.clone()
            };
            SplitRequest::UnseenObjects(objs)
        }
        ZeroShotSetting::UnseenVerb => match cfg.split.unseen_verbs {
            Some(count) => SplitRequest::RandomVerbs { count, seed: cfg.seed },
            None => SplitRequest::UnseenVerbs(
                file.uv_verbs.clone().ok_or_else(|| CliError::Usage("UV needs split.unseen_verbs".into()))?,
            ),
        },
    };
    let split = make_zero_shot_split(&ls, &request, &counts)?;
    let out = cmd
        .out
        .clone()
        .or_else(|| cfg.split.path.clone())
        .unwrap_or_else(|| cfg.out_dir.join("split.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    split.save(&out)?;
    println!(
        "{}: {} seen / {} unseen, {} rare -> {}",
        cmd.setting.as_deref().or(cfg.split.setting.as_deref()).unwrap_or_default(),
        split.seen.len(),
        split.unseen.len(),
        split.rare.len(),
        out.display()
    );
    Ok(())
}

fn export_prompts(cfg: &RunConfig, cmd: &ExportPrompts) -> CliResult<()> {
    let ls_path = cmd.label_space.clone().unwrap_or_else(|| cfg.data.label_space());
    let (ls, _) = LabelSpace::load(&ls_path)?;
    let out = cmd.out.clone().unwrap_or_else(|| cfg.out_dir.join("prompts"));
    create_dir(&out)?;
    let write = |name: &str, lines: &[String]| -> CliResult<()> {
        let p = out.join(name);
        std::fs::write(&p, lines.join("\n") + "\n").map_err(io_err(&p))
    };
    write("hoi_prompts.txt", &hoi_prompts(&ls)?)?;
    write("object_prompts.txt", &object_prompts(&ls))?;
    write("background_prompt.txt", &[BACKGROUND_PROMPT.to_string()])?;
    println!("wrote {} HOI and {} object prompts to {}", ls.num_triplets(), ls.num_objects(), out.display());
    Ok(())
}

/// EMB1 by magic, otherwise one whitespace- or comma-separated row per line.
fn read_matrix(path: &Path) -> CliResult<Tensor> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"EMB1") {
        return Ok(load_embedding_matrix(path)?);
    }
    let text = String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{}: neither EMB1 nor text", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: Result<Vec<f64>, _> =
            line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(str::parse).collect();
        let row = row.map_err(|e| CliError::Usage(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(CliError::Usage(format!("{} line {}: {} values, expected {first}", path.display(), i + 1, row.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!("{}: no rows", path.display())));
    }
    Ok(Tensor::from_rows(&rows))
}

fn normalize_rows(m: &mut Tensor, what: &str) -> CliResult<()> {
    let mut fixed = 0;
    for r in 0..m.rows() {
        let n = m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(CliError::Usage(format!("{what}: row {r} has norm {n}")));
        }
        if (n - 1.0).abs() > 1e-3 {
            m.row_mut(r).iter_mut().for_each(|x| *x /= n);
            fixed += 1;
        }
    }
    if fixed > 0 {
        log::warn!("{what}: renormalized {fixed} of {} rows", m.rows());
    }
    Ok(())
}

fn import_embeddings(cfg: &RunConfig, cli_config: Option<&Path>, cmd: &ImportEmbeddings) -> CliResult<()> {
    let ls_path = cmd.label_space.clone().unwrap_or_else(|| cfg.data.label_space());
    let (ls, _) = LabelSpace::load(&ls_path)?;
    let out = cmd.out.clone().unwrap_or_else(|| cfg.out_dir.join("embeddings"));
    create_dir(&out)?;
    let dim = cfg.model.text_dim;
    let mut updated = cfg.clone();
    let import = |src: &Option<PathBuf>, rows: Option<usize>, name: &str| -> CliResult<Option<PathBuf>> {
        let Some(src) = src else { return Ok(None) };
        let mut m = read_matrix(src)?;
        if rows.is_some_and(|r| r != m.rows()) || m.cols() != dim {
            return Err(CliError::Usage(format!(
                "{}: {}x{} matrix, expected {}x{dim}",
                src.display(),
                m.rows(),
                m.cols(),
                rows.map_or("any".into(), |r| r.to_string())
            )));
        }
        normalize_rows(&mut m, &src.display().to_string())?;
        let dst = out.join(name);
        save_embedding_matrix(&m, &dst)?;
        println!("{} -> {} ({}x{})", src.display(), dst.display(), m.rows(), m.cols());
        Ok(Some(dst))
    };
    if let Some(p) = import(&cmd.interactions, Some(ls.num_triplets()), "interactions.emb")? {
        updated.text.interaction_embeddings = Some(p);
    }
    if let Some(p) = import(&cmd.objects, Some(ls.num_objects()), "objects.emb")? {
        updated.text.object_embeddings = Some(p);
    }
    if let Some(p) = import(&cmd.teachers, None, "teachers.emb")? {
        updated.text.teacher_embeddings = Some(p);
    }
    if updated == *cfg {
        return Err(CliError::Usage("nothing to import: pass --interactions, --objects or --teachers".into()));
    }
    let cfg_out = out.join("config.json");
    updated.save(&cfg_out)?;
    println!(
        "config with embedding paths -> {}{}",
        cfg_out.display(),
        cli_config.map_or(String::new(), |p| format!(" (from {})", p.display()))
    );
    Ok(())
}

fn train_cmd(cfg: &RunConfig) -> CliResult<()> {
    let (ckpt, outcome) = run_training(cfg)?;
    let last = outcome.metrics.last();
    println!(
        "trained {} steps, final loss {} -> {}",
        last.map_or(0, |m| m.step + 1),
        last.map_or("n/a".into(), |m| format!("{:.4}", m.loss_total)),
        ckpt.display()
    );
    Ok(())
}

fn infer(cfg: &RunConfig, cmd: &Infer) -> CliResult<()> {
    let (ls, _) = LabelSpace::load(&cfg.data.label_space())?;
    let ckpt = cmd.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.bin"));
    let (mut model, meta) = load_model(&ckpt, &ls)?;
    if let Some(seed) = cfg.inference.random_unseen_rows {
        let path = cfg.split.path.as_ref().ok_or_else(|| CliError::Usage("random_unseen_rows needs split.path".into()))?;
        randomize_unseen_rows(&mut model, &SplitSpec::load(path)?, seed)?;
    }
    let manifest_path = cmd.manifest.clone().unwrap_or_else(|| cfg.data.test_manifest());
    let manifest = Manifest::load(&manifest_path)?;
    manifest.validate(&ls)?;
    let root = Manifest::root(&manifest_path);
    let samples = load_samples(&manifest, &root)?;
    let dets = detect(&model, &samples, &ls, &cfg.inference)?;
    let out = cmd.out.clone().unwrap_or_else(|| cfg.out_dir.join("detections.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_detections(&out, &dets)?;
    if cmd.render > 0 {
        let dir = out.with_file_name("renders");
        create_dir(&dir)?;
        for s in samples.iter().take(cmd.render) {
            let mine: Vec<_> = dets.iter().filter(|d| d.image_id == s.image_id).cloned().collect();
            render_detections(&dir.join(format!("{:06}.png", s.image_id)), s, &mine, 3)?;
        }
    }
    println!("{} detections on {} images (checkpoint step {}) -> {}", dets.len(), samples.len(), meta.step, out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, cmd: &Eval) -> CliResult<()> {
    let (ls, counts) = LabelSpace::load(&cfg.data.label_space())?;
    let det_path = cmd.detections.clone().unwrap_or_else(|| cfg.out_dir.join("detections.json"));
    let dets = load_detections(&det_path)?;
    let manifest = Manifest::load(&cmd.manifest.clone().unwrap_or_else(|| cfg.data.test_manifest()))?;
    let split = cfg.split.path.as_ref().map(|p| SplitSpec::load(p)).transpose()?;
    let mut report = evaluate(&dets, &manifest, &ls, counts.as_deref(), split.as_ref())?;
    report.config_hash = Some(cfg.hash());
    let out = cmd.out.clone().unwrap_or_else(|| cfg.out_dir.join("report.json"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.save(&out)?;
    let csv = out.with_extension("csv");
    std::fs::write(&csv, report.to_csv(&ls)).map_err(io_err(&csv))?;
    let f = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "mAP full {} rare {} non-rare {} seen {} unseen {} -> {}",
        f(report.map_full),
        f(report.map_rare),
        f(report.map_nonrare),
        f(report.map_seen),
        f(report.map_unseen),
        out.display()
    );
    Ok(())
}

fn run_selftest(seed: u64) -> CliResult<()> {
    let outcomes = selftest::run_all(seed);
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(detail) => println!("PASS {:<10} {detail} ({:.1}s)", o.name, o.seconds),
            Err(why) => {
                failed += 1;
                println!("FAIL {:<10} {why} ({:.1}s)", o.name, o.seconds);
            }
        }
    }
    if failed > 0 {
        return Err(CliError::SelfTest(failed));
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData(c) => gen_data(&cfg, cli.seed, c),
        Command::MakeSplit(c) => make_split(&cfg, c),
        Command::ExportPrompts(c) => export_prompts(&cfg, c),
        Command::ImportEmbeddings(c) => import_embeddings(&cfg, cli.config.as_deref(), c),
        Command::Train => train_cmd(&cfg),
        Command::Infer(c) => infer(&cfg, c),
        Command::Eval(c) => eval(&cfg, c),
        Command::Selftest => run_selftest(cfg.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
