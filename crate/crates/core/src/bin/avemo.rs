use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{s, Array2};
use serde_json::json;

use avemo::audio::{melspectrogram, render_png, save_mels, write_mels_csv, Waveform};
use avemo::config::RunConfig;
use avemo::data::{
    load_dataset_dir, load_label_csv, parse_pose_json, save_dataset_dir, save_label_csv, synth_dataset, windows_for,
    FrameRecord, LabelFile, SynthConfig, EXPR_CLASSES,
};
use avemo::fusion::{argmax_rows, ensemble_predict, grid_search_weights, stack_rows, EnsembleSpec, Gold};
use avemo::geometry::{compute_agent_bbox, crop_body, mask_agent, Image};
use avemo::losses::EmbeddingTable;
use avemo::metrics::{EvalReport, ExprScores, VaScores, VideoReport};
use avemo::net::checkpoint::{load_sidecar, save_sidecar};
use avemo::net::{fit, load_checkpoint, predict_video, run_gradcheck, save_checkpoint, GradCheckConfig, SeqModel};
use avemo::{Error, Result, Task};

#[derive(Parser)]
#[command(name = "avemo", version, about = "Audiovisual emotion recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Agent bounding boxes from pose JSON, one CSV row per frame.
    Bbox(BboxArgs),
    /// Zero the agent's box in an image (context stream), optionally crop the body.
    Mask(MaskArgs),
    /// Log mel-spectrogram of a WAV file.
    Melspec(MelspecArgs),
    /// Train a sequence model and write a checkpoint.
    Train(TrainArgs),
    /// Per-frame predictions for every video in a dataset directory.
    Predict(PredictArgs),
    /// Score prediction CSVs against gold annotations.
    Eval(EvalArgs),
    /// Weighted-average ensemble of member predictions.
    Ensemble(EnsembleArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Print the effective configuration (defaults merged with --config).
    Show {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BboxArgs {
    /// Pose JSON file, JSON array of documents, or directory of documents.
    #[arg(long)]
    pose: PathBuf,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lambda_x: Option<f64>,
    #[arg(long)]
    lambda_y: Option<f64>,
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    pose: PathBuf,
    /// Frame of the pose input to use.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the body crop here.
    #[arg(long)]
    crop: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MelspecArgs {
    #[arg(long)]
    wav: PathBuf,
    /// Output MELS file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    val_dir: Option<PathBuf>,
    /// Class-name embedding table; enables the embedding loss (expression).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training log JSON.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Seeds both initialisation and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Window length (defaults to the one recorded at training time).
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    task: Task,
    /// Prediction CSV or directory of `<id>.csv`.
    #[arg(long)]
    pred: PathBuf,
    /// Gold CSV or directory of `<id>.csv`.
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print a human-readable table instead of JSON.
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    task: Task,
    /// Member prediction directory; repeat per member. The directory name is the member id.
    #[arg(long = "member", required = true)]
    members: Vec<PathBuf>,
    /// Validation annotations used to pick the weights.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Fixed weights (comma separated) instead of a search.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.1)]
    step: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    task: Task,
    /// Receives `train/`, `val/` and (expression) `embeddings.txt`.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    videos: usize,
    /// How many of the videos go to `val/`.
    #[arg(long, default_value_t = 4)]
    val_videos: usize,
    #[arg(long, default_value_t = 256)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    input_dim: usize,
    #[arg(long, default_value_t = 16)]
    emb_dim: usize,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Bbox(a) => bbox(a),
        Command::Mask(a) => mask(a),
        Command::Melspec(a) => melspec(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a),
        Command::Config {
            action: ConfigAction::Show { config },
        } => {
            emit(&load_config(config.as_deref())?.to_json())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `text` and a newline to stdout. A closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    emit(&serde_json::to_string_pretty(value)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn bbox(a: BboxArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.geometry;
    if let Some(v) = a.lambda_x {
        cfg.lambda_x = v;
    }
    if let Some(v) = a.lambda_y {
        cfg.lambda_y = v;
    }
    if let Some(v) = a.conf_threshold {
        cfg.conf_threshold = v;
    }
    cfg.validate()?;
    let frames = parse_pose_json(&a.pose)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(["frame_index", "present", "top", "bottom", "left", "right"])?;
    for (f, kps) in frames.iter().enumerate() {
        let b = match kps {
            Some(k) => compute_agent_bbox(k, a.height, a.width, &cfg)?,
            None => None,
        };
        let row = match b {
            Some(b) => [f.to_string(), "1".into(), b.top.to_string(), b.bottom.to_string(), b.left.to_string(), b.right.to_string()],
            None => [f.to_string(), "0".into(), String::new(), String::new(), String::new(), String::new()],
        };
        w.write_record(&row)?;
    }
    match w.flush() {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<bbox csv>", e)),
        _ => Ok(()),
    }
}

fn mask(a: MaskArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?.geometry;
    let img = Image::load_png(&a.image)?;
    let frames = parse_pose_json(&a.pose)?;
    let kps = frames.get(a.frame).cloned().flatten();
    let b = match &kps {
        Some(k) => compute_agent_bbox(k, img.height(), img.width(), &cfg)?,
        None => None,
    };
    mask_agent(&img, b.as_ref())?.save_png(&a.out)?;
    if let Some(p) = &a.crop {
        crop_body(&img, b.as_ref())?.save_png(p)?;
    }
    print_json(&json!({ "frame_index": a.frame, "bbox": b }))
}

fn melspec(a: MelspecArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?.mel;
    let mut wav = Waveform::read_wav(&a.wav)?;
    if wav.sample_rate != cfg.sample_rate {
        wav = wav.resample(cfg.sample_rate)?;
    }
    let mel = melspectrogram(&wav, &cfg)?;
    save_mels(&a.out, &mel)?;
    if let Some(p) = &a.png {
        render_png(p, &mel)?;
    }
    if let Some(p) = &a.csv {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        write_mels_csv(std::io::BufWriter::new(f), &mel)?;
    }
    print_json(&json!({ "frames": mel.n_frames(), "n_mels": mel.n_mels(), "config": mel.config }))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(t) = a.task {
        cfg.task = t;
    }
    if let Some(p) = a.train_dir {
        cfg.paths.train_dir = Some(p);
    }
    if let Some(p) = a.val_dir {
        cfg.paths.val_dir = Some(p);
    }
    if let Some(p) = a.embeddings {
        cfg.paths.embeddings = Some(p);
    }
    if let Some(p) = a.checkpoint {
        cfg.paths.checkpoint = Some(p);
    }
    if let Some(p) = a.log {
        cfg.paths.report = Some(p);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(h) = a.hidden_dim {
        cfg.model.hidden_dim = h;
    }
    if let Some(t) = a.window {
        cfg.window.length = t;
        cfg.window.stride = t;
    }
    let train_dir = cfg.paths.train_dir.clone().ok_or_else(|| Error::config("no training directory (paths.train_dir or --train-dir)"))?;
    let ckpt = cfg.paths.checkpoint.clone().ok_or_else(|| Error::config("no checkpoint path (paths.checkpoint or --checkpoint)"))?;

    let table = match (&cfg.paths.embeddings, cfg.task) {
        (Some(p), Task::Expr) => {
            let t = EmbeddingTable::load(p, Some(&EXPR_CLASSES))?;
            match cfg.model.emb_dim {
                Some(d) if d != t.dim() => {
                    return Err(Error::config(format!("model.emb_dim {d} but the embedding table has dimension {}", t.dim())))
                }
                _ => cfg.model.emb_dim = Some(t.dim()),
            }
            Some(t)
        }
        (Some(_), Task::Va) => return Err(Error::config("embeddings only apply to the expression task")),
        (None, _) => {
            if cfg.model.emb_dim.is_some() {
                return Err(Error::config("model.emb_dim is set but no embedding table was given"));
            }
            None
        }
    };
    let videos = load_dataset_dir(&train_dir, cfg.task, &cfg.fusion)?;
    if cfg.model.input_dim == 0 {
        cfg.model.input_dim = videos[0].features.ncols();
    }
    cfg.validate()?;
    let val = cfg.paths.val_dir.as_ref().map(|d| load_dataset_dir(d, cfg.task, &cfg.fusion)).transpose()?;
    let train_windows = windows_for(&videos, cfg.window.length, cfg.window.stride)?;
    let val_windows = val.as_ref().map(|v| windows_for(v, cfg.window.length, cfg.window.length)).transpose()?;

    let mut model = SeqModel::new(cfg.model_spec(), cfg.seed)?;
    let log = fit(&mut model, &train_windows, val_windows.as_deref(), table.as_ref(), &cfg.train)?;
    save_checkpoint(&ckpt, &model)?;
    save_sidecar(&ckpt, &json!({ "model": model.spec, "run": cfg }))?;
    if let Some(p) = &cfg.paths.report {
        write_json(p, &log)?;
    }
    let last = log.last();
    print_json(&json!({
        "checkpoint": ckpt,
        "epochs": log.epochs.len(),
        "final_train_loss": last.map(|e| e.train_loss),
        "validation": last.and_then(|e| e.validation.as_ref()),
    }))
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let run: RunConfig = match load_sidecar::<serde_json::Value>(&a.checkpoint) {
        Ok(v) => serde_json::from_value(v["run"].clone()).map_err(|e| Error::config(format!("checkpoint sidecar: {e}")))?,
        Err(_) => RunConfig::default(),
    };
    let t_len = a.window.unwrap_or(run.window.length);
    let videos = load_dataset_dir(&a.data_dir, model.spec.task, &run.fusion)?;
    create_dir(&a.out_dir)?;
    for v in &videos {
        let out = predict_video(&model, v, t_len)?;
        save_label_csv(&a.out_dir.join(format!("{}.csv", v.id)), &to_label_file(model.spec.task, &out, &v.records))?;
    }
    print_json(&json!({ "videos": videos.len(), "out_dir": a.out_dir }))
}

/// Prediction rows as a label file: argmax plus probabilities for
/// expression, the two values for VA.
fn to_label_file(task: Task, out: &Array2<f64>, frames: &[FrameRecord]) -> LabelFile {
    match task {
        Task::Expr => {
            let labels = argmax_rows(out.view());
            LabelFile {
                task,
                records: frames.iter().zip(labels).map(|(r, c)| FrameRecord::expr(r.frame_index, Some(c))).collect(),
                probs: Some(out.clone()),
            }
        }
        Task::Va => LabelFile {
            task,
            records: frames
                .iter()
                .zip(out.rows())
                .map(|(r, row)| FrameRecord::va(r.frame_index, Some(row[0]), Some(row[1])))
                .collect(),
            probs: None,
        },
    }
}

/// `id -> file` for a directory of CSVs, or a single file under its stem.
fn csv_set(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if path.is_dir() {
        for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                out.insert(stem, p);
            }
        }
    } else if path.exists() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.insert(stem, path.to_path_buf());
    } else {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
    }
    if out.is_empty() {
        return Err(Error::Empty("no CSV files"));
    }
    Ok(out)
}

#[derive(Default)]
struct Pairs {
    pred_c: Vec<usize>,
    gold_c: Vec<usize>,
    pv: Vec<f64>,
    pa: Vec<f64>,
    gv: Vec<f64>,
    ga: Vec<f64>,
}

impl Pairs {
    fn push(&mut self, task: Task, pred: &FrameRecord, gold: &FrameRecord, origin: &Path) -> Result<()> {
        if !gold.is_labelled(task) {
            return Ok(());
        }
        let missing = || Error::Parse {
            path: origin.to_path_buf(),
            frame: gold.frame_index,
            msg: "prediction missing for a labelled frame".into(),
        };
        match task {
            Task::Expr => {
                self.pred_c.push(pred.expr.ok_or_else(missing)?);
                self.gold_c.push(gold.expr.expect("labelled"));
            }
            Task::Va => {
                let (v, a) = pred.va_pair().ok_or_else(missing)?;
                let (gv, ga) = gold.va_pair().expect("labelled");
                self.pv.push(v);
                self.pa.push(a);
                self.gv.push(gv);
                self.ga.push(ga);
            }
        }
        Ok(())
    }

    fn extend(&mut self, o: &Pairs) {
        self.pred_c.extend(&o.pred_c);
        self.gold_c.extend(&o.gold_c);
        self.pv.extend(&o.pv);
        self.pa.extend(&o.pa);
        self.gv.extend(&o.gv);
        self.ga.extend(&o.ga);
    }

    fn report(&self, task: Task) -> Result<EvalReport> {
        Ok(match task {
            Task::Expr => EvalReport::from_expr(&ExprScores::compute(&self.pred_c, &self.gold_c)?),
            Task::Va => EvalReport::from_va(&VaScores::compute(&self.pv, &self.pa, &self.gv, &self.ga)?),
        })
    }
}

fn load_task_file(path: &Path, task: Task) -> Result<LabelFile> {
    let f = load_label_csv(path)?;
    if f.task != task {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            frame: 0,
            msg: format!("file holds {} labels, expected {task}", f.task),
        });
    }
    Ok(f)
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = csv_set(&a.pred)?;
    let golds = csv_set(&a.gold)?;
    let single = !a.gold.is_dir();
    let mut all = Pairs::default();
    let mut per_video = Vec::new();
    for (id, gold_path) in &golds {
        let pred_path = if single {
            preds.values().next().expect("non-empty")
        } else {
            preds.get(id).ok_or_else(|| Error::Parse {
                path: a.pred.join(format!("{id}.csv")),
                frame: 0,
                msg: "no prediction file for this video".into(),
            })?
        };
        let gold = load_task_file(gold_path, a.task)?;
        let pred = load_task_file(pred_path, a.task)?;
        if gold.records.len() != pred.records.len() {
            return Err(Error::Parse {
                path: pred_path.clone(),
                frame: 0,
                msg: format!("{} prediction rows for {} gold rows", pred.records.len(), gold.records.len()),
            });
        }
        let mut pairs = Pairs::default();
        for (p, g) in pred.records.iter().zip(&gold.records) {
            if p.frame_index != g.frame_index {
                return Err(Error::Parse {
                    path: pred_path.clone(),
                    frame: g.frame_index,
                    msg: format!("frame index {} does not line up with gold", p.frame_index),
                });
            }
            pairs.push(a.task, p, g, pred_path)?;
        }
        if let Ok(report) = pairs.report(a.task) {
            per_video.push(VideoReport {
                video_id: id.clone(),
                report,
            });
        }
        all.extend(&pairs);
    }
    let mut report = all.report(a.task)?;
    if !single {
        report.per_video = per_video;
    }
    debug_assert!(report.is_consistent());
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if a.table {
        emit(&format_table(&report))
    } else {
        print_json(&report)
    }
}

fn format_table(r: &EvalReport) -> String {
    let row = |name: &str, r: &EvalReport| match (r.macro_f1, r.accuracy, r.total_expr, r.ccc_v, r.ccc_a, r.total_va) {
        (Some(f), Some(a), Some(t), ..) => format!("{name:<20} {f:>8.4} {a:>8.4} {t:>8.4} {:>8}", r.frames),
        (.., Some(v), Some(a), Some(t)) => format!("{name:<20} {v:>8.4} {a:>8.4} {t:>8.4} {:>8}", r.frames),
        _ => format!("{name:<20} (incomplete)"),
    };
    let header = if r.macro_f1.is_some() {
        format!("{:<20} {:>8} {:>8} {:>8} {:>8}", "video", "F1", "Acc", "Total", "frames")
    } else {
        format!("{:<20} {:>8} {:>8} {:>8} {:>8}", "video", "CCC-V", "CCC-A", "Total", "frames")
    };
    let mut lines = vec![header];
    lines.extend(r.per_video.iter().map(|v| row(&v.video_id, &v.report)));
    lines.push(row("all", r));
    lines.join("\n")
}

fn ensemble(a: EnsembleArgs) -> Result<()> {
    let ids: Vec<String> = a
        .members
        .iter()
        .map(|p| p.file_name().and_then(|s| s.to_str()).unwrap_or("member").to_string())
        .collect();
    let member_sets: Vec<BTreeMap<String, PathBuf>> = a.members.iter().map(|p| csv_set(p)).collect::<Result<_>>()?;
    let videos: Vec<String> = member_sets[0].keys().cloned().collect();
    // Per member, per video: rows of model output.
    let mut outputs: Vec<Vec<(Array2<f64>, Vec<FrameRecord>)>> = Vec::new();
    for (set, id) in member_sets.iter().zip(&ids) {
        let mut per_video = Vec::new();
        for v in &videos {
            let path = set.get(v).ok_or_else(|| Error::Parse {
                path: PathBuf::from(id).join(format!("{v}.csv")),
                frame: 0,
                msg: "member lacks this video".into(),
            })?;
            let f = load_task_file(path, a.task)?;
            let m = match a.task {
                Task::Expr => f.probs.clone().ok_or_else(|| Error::Parse {
                    path: path.clone(),
                    frame: 0,
                    msg: "expression members need probability columns p0..p6".into(),
                })?,
                Task::Va => {
                    let mut m = Array2::zeros((f.records.len(), 2));
                    for (t, r) in f.records.iter().enumerate() {
                        let (v, ar) = r.va_pair().ok_or_else(|| Error::Parse {
                            path: path.clone(),
                            frame: r.frame_index,
                            msg: "missing VA prediction".into(),
                        })?;
                        m[[t, 0]] = v;
                        m[[t, 1]] = ar;
                    }
                    m
                }
            };
            per_video.push((m, f.records));
        }
        outputs.push(per_video);
    }

    let (spec, score) = match (&a.weights, &a.gold) {
        (Some(w), _) => {
            let spec = EnsembleSpec {
                members: ids.clone(),
                weights: w.clone(),
                task: a.task,
            };
            spec.validate().map_err(|e| Error::config(e.to_string()))?;
            (spec, None)
        }
        (None, Some(gold_dir)) => {
            let golds = csv_set(gold_dir)?;
            let mut member_rows: Vec<Vec<Array2<f64>>> = vec![Vec::new(); ids.len()];
            let mut gold_c = Vec::new();
            let mut gold_va = Vec::new();
            for (vi, v) in videos.iter().enumerate() {
                let Some(gp) = golds.get(v) else { continue };
                let gold = load_task_file(gp, a.task)?;
                let keep: Vec<usize> = (0..gold.records.len()).filter(|&t| gold.records[t].is_labelled(a.task)).collect();
                for (m, out) in outputs.iter().enumerate() {
                    let (mat, _) = &out[vi];
                    if mat.nrows() != gold.records.len() {
                        return Err(Error::Parse {
                            path: gp.clone(),
                            frame: 0,
                            msg: format!("member {} has {} rows, gold has {}", ids[m], mat.nrows(), gold.records.len()),
                        });
                    }
                    member_rows[m].push(mat.select(ndarray::Axis(0), &keep));
                }
                for &t in &keep {
                    match a.task {
                        Task::Expr => gold_c.push(gold.records[t].expr.expect("labelled")),
                        Task::Va => gold_va.push(gold.records[t].va_pair().expect("labelled")),
                    }
                }
            }
            let stacked: Vec<Array2<f64>> = member_rows.iter().map(|r| stack_rows(r)).collect::<Result<_>>()?;
            let views: Vec<_> = stacked.iter().map(|m| m.view()).collect();
            let gold = match a.task {
                Task::Expr => Gold::Expr(gold_c),
                Task::Va => Gold::Va(Array2::from_shape_fn((gold_va.len(), 2), |(t, j)| if j == 0 { gold_va[t].0 } else { gold_va[t].1 })),
            };
            let (spec, score) = grid_search_weights(&views, &ids, &gold, a.step)?;
            (spec, Some(score))
        }
        (None, None) => return Err(Error::config("ensemble needs --weights or --gold")),
    };

    create_dir(&a.out_dir)?;
    for (vi, v) in videos.iter().enumerate() {
        let mats: Vec<_> = outputs.iter().map(|o| o[vi].0.view()).collect();
        let fused = ensemble_predict(&mats, &spec)?;
        let frames = &outputs[0][vi].1;
        save_label_csv(&a.out_dir.join(format!("{v}.csv")), &to_label_file(a.task, &fused, frames))?;
    }
    let summary = json!({ "spec": spec, "validation_total": score, "videos": videos.len() });
    write_json(&a.out_dir.join("ensemble.json"), &summary)?;
    print_json(&summary)
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = GradCheckConfig {
        instances: a.instances,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    print_json(&report)?;
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        return Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_videos: a.videos,
        frames_per_video: a.frames,
        task: a.task,
        input_dim: a.input_dim,
        emb_dim: a.emb_dim,
        noise_sigma: a.noise,
    };
    if a.val_videos >= a.videos {
        return Err(Error::config("val_videos must leave at least one training video"));
    }
    let ds = synth_dataset(&cfg)?;
    let split = a.videos - a.val_videos;
    save_dataset_dir(&a.out_dir.join("train"), &ds.videos[..split], a.task, a.fps)?;
    if a.val_videos > 0 {
        save_dataset_dir(&a.out_dir.join("val"), &ds.videos[split..], a.task, a.fps)?;
    }
    if let Some(t) = &ds.table {
        let p = a.out_dir.join("embeddings.txt");
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        let mut w = std::io::BufWriter::new(f);
        t.write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&p, e))?;
    }
    let frames: usize = ds.videos.iter().map(|v| v.features.nrows()).sum();
    let first = ds.videos[0].features.slice(s![0, ..]).len();
    print_json(&json!({
        "task": a.task,
        "train_videos": split,
        "val_videos": a.val_videos,
        "frames": frames,
        "input_dim": first,
        "config": cfg,
    }))
}
