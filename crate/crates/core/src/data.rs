//! Annotations, pose JSON, per-frame embedding files, windowing and the
//! seeded synthetic datasets used for desk-scale experiments.
//!
//! Annotation CSV: a header row, then one row per frame. Expression files
//! have `frame_index,expr` with `-1` for unannotated frames; VA files have
//! `frame_index,valence,arousal` with `-5` for unannotated values. Member
//! prediction files may append `p0..p6` probability columns.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_streams, FusionDims, StreamFeatures};
use crate::geometry::KeypointSet;
use crate::losses::EmbeddingTable;
use crate::metrics::N_EXPR_CLASSES;
use crate::Task;

pub const EXPR_SENTINEL: i64 = -1;
pub const VA_SENTINEL: f64 = -5.0;

/// Expression class names in label order.
pub const EXPR_CLASSES: [&str; N_EXPR_CLASSES] =
    ["neutral", "anger", "disgust", "fear", "happiness", "sadness", "surprise"];

pub const EMBD_MAGIC: &[u8; 4] = b"EMBD";
pub const EMBD_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: usize,
    pub expr: Option<usize>,
    pub valence: Option<f64>,
    pub arousal: Option<f64>,
}

impl FrameRecord {
    pub fn expr(frame_index: usize, label: Option<usize>) -> Self {
        Self {
            frame_index,
            expr: label,
            ..Self::default()
        }
    }

    pub fn va(frame_index: usize, valence: Option<f64>, arousal: Option<f64>) -> Self {
        Self {
            frame_index,
            valence,
            arousal,
            ..Self::default()
        }
    }

    /// Both dimensions, when both are annotated.
    pub fn va_pair(&self) -> Option<(f64, f64)> {
        Some((self.valence?, self.arousal?))
    }

    pub fn is_labelled(&self, task: Task) -> bool {
        match task {
            Task::Expr => self.expr.is_some(),
            Task::Va => self.va_pair().is_some(),
        }
    }
}

/// Contents of an annotation or prediction CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFile {
    pub task: Task,
    pub records: Vec<FrameRecord>,
    /// Per-class probabilities (`frames x 7`) when the file carries them.
    pub probs: Option<Array2<f64>>,
}

pub fn read_label_csv<R: Read>(input: R, origin: &Path) -> Result<LabelFile> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let frame_col = col("frame_index").ok_or_else(|| parse_err(origin, 0, "missing frame_index column"))?;
    let task = if col("expr").is_some() {
        Task::Expr
    } else if col("valence").is_some() && col("arousal").is_some() {
        Task::Va
    } else {
        return Err(parse_err(origin, 0, "need an expr column or valence,arousal columns"));
    };
    let prob_cols: Vec<usize> = (0..N_EXPR_CLASSES).filter_map(|c| col(&format!("p{c}"))).collect();
    if !prob_cols.is_empty() && (prob_cols.len() != N_EXPR_CLASSES || task != Task::Expr) {
        return Err(parse_err(origin, 0, "probability columns must be p0..p6 on an expression file"));
    }

    let mut records = Vec::new();
    let mut probs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| parse_err(origin, row, "short row"));
        let num = |i: usize| -> Result<f64> {
            field(i)?
                .parse::<f64>()
                .map_err(|e| parse_err(origin, row, &format!("column {}: {e}", headers[i])))
        };
        let frame_index = field(frame_col)?
            .parse::<usize>()
            .map_err(|e| parse_err(origin, row, &format!("frame_index: {e}")))?;
        let record = match task {
            Task::Expr => {
                let raw = field(col("expr").unwrap())?
                    .parse::<i64>()
                    .map_err(|e| parse_err(origin, frame_index, &format!("expr: {e}")))?;
                let label = match raw {
                    EXPR_SENTINEL => None,
                    v if (0..N_EXPR_CLASSES as i64).contains(&v) => Some(v as usize),
                    v => return Err(parse_err(origin, frame_index, &format!("expr label {v} outside 0..6"))),
                };
                FrameRecord::expr(frame_index, label)
            }
            Task::Va => {
                let mut vals = [None, None];
                for (slot, name) in vals.iter_mut().zip(["valence", "arousal"]) {
                    let v = num(col(name).unwrap())?;
                    *slot = if v == VA_SENTINEL {
                        None
                    } else if (-1.0..=1.0).contains(&v) {
                        Some(v)
                    } else {
                        return Err(parse_err(origin, frame_index, &format!("{name} {v} outside [-1, 1]")));
                    };
                }
                FrameRecord::va(frame_index, vals[0], vals[1])
            }
        };
        for &c in &prob_cols {
            probs.push(num(c)?);
        }
        records.push(record);
    }
    let probs = (!prob_cols.is_empty())
        .then(|| Array2::from_shape_vec((records.len(), N_EXPR_CLASSES), probs))
        .transpose()
        .map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(LabelFile { task, records, probs })
}

fn parse_err(path: &Path, frame: usize, msg: &str) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        frame,
        msg: msg.to_string(),
    }
}

pub fn load_label_csv(path: &Path) -> Result<LabelFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_label_csv(std::io::BufReader::new(f), path)
}

pub fn write_label_csv<W: Write>(out: W, file: &LabelFile) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["frame_index".into()];
    match file.task {
        Task::Expr => header.push("expr".into()),
        Task::Va => header.extend(["valence".into(), "arousal".into()]),
    }
    if file.probs.is_some() {
        header.extend((0..N_EXPR_CLASSES).map(|c| format!("p{c}")));
    }
    w.write_record(&header)?;
    for (t, r) in file.records.iter().enumerate() {
        let mut row = vec![r.frame_index.to_string()];
        match file.task {
            Task::Expr => row.push(r.expr.map_or(EXPR_SENTINEL, |v| v as i64).to_string()),
            Task::Va => {
                row.push(r.valence.unwrap_or(VA_SENTINEL).to_string());
                row.push(r.arousal.unwrap_or(VA_SENTINEL).to_string());
            }
        }
        if let Some(p) = &file.probs {
            row.extend(p.row(t).iter().map(|v| v.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

pub fn save_label_csv(path: &Path, file: &LabelFile) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_label_csv(std::io::BufWriter::new(f), file)
}

#[derive(Debug, Deserialize)]
struct PoseDoc {
    #[serde(default)]
    frame_index: Option<usize>,
    people: Vec<PosePerson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosePerson {
    pose_keypoints_2d: Vec<f64>,
}

fn parse_pose_value(v: serde_json::Value, path: &Path, position: usize) -> Result<(usize, Option<KeypointSet>)> {
    let doc: PoseDoc =
        serde_json::from_value(v).map_err(|e| parse_err(path, position, &format!("pose document: {e}")))?;
    let frame = doc.frame_index.unwrap_or(position);
    let Some(person) = doc.people.into_iter().next() else {
        return Ok((frame, None));
    };
    let set = KeypointSet::from_flat(&person.pose_keypoints_2d, frame).map_err(|_| {
        parse_err(
            path,
            frame,
            &format!("expected 75 keypoint values, got {}", person.pose_keypoints_2d.len()),
        )
    })?;
    Ok((frame, Some(set)))
}

/// Reads BODY25 pose documents (`{"people": [{"pose_keypoints_2d": [75
/// numbers]}]}`); the first person is the primary agent.
///
/// `path` may be a single document, a JSON array of documents, or a
/// directory of `*.json` documents taken in file-name order. Frame indices
/// come from an optional `frame_index` field, else from position. The result
/// is dense from frame 0 to the last frame seen; frames without a document or
/// without people are `None`.
pub fn parse_pose_json(path: &Path) -> Result<Vec<Option<KeypointSet>>> {
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for (pos, file) in files.iter().enumerate() {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| parse_err(file, pos, &e.to_string()))?;
            docs.push(parse_pose_value(v, file, pos)?);
        }
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(path, 0, &e.to_string()))?;
        match v {
            serde_json::Value::Array(items) => {
                for (pos, item) in items.into_iter().enumerate() {
                    docs.push(parse_pose_value(item, path, pos)?);
                }
            }
            other => docs.push(parse_pose_value(other, path, 0)?),
        }
    }
    let len = docs.iter().map(|(f, _)| f + 1).max().unwrap_or(0);
    let mut frames = vec![None; len];
    for (f, set) in docs {
        frames[f] = set;
    }
    Ok(frames)
}

/// One pose document for `set` (an empty `people` list when absent).
pub fn pose_document(frame_index: usize, set: Option<&KeypointSet>) -> serde_json::Value {
    let people: Vec<PosePerson> = set
        .map(|s| PosePerson {
            pose_keypoints_2d: s.to_flat(),
        })
        .into_iter()
        .collect();
    serde_json::json!({ "version": 1.3, "frame_index": frame_index, "people": people })
}

/// Per-frame embedding vectors. Frames may be absent (e.g. no face crop).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbdFile {
    /// `frames x dim`; absent rows are zero.
    pub values: Array2<f32>,
    pub present: Vec<bool>,
    pub fps: f64,
}

/// Header `EMBD, version, frames, dim, fps * 1000, reserved` (little-endian
/// u32), then one presence byte per frame, then row-major f32 values.
pub fn write_embd<W: Write>(mut out: W, file: &EmbdFile) -> std::io::Result<()> {
    out.write_all(EMBD_MAGIC)?;
    let (frames, dim) = file.values.dim();
    for v in [EMBD_VERSION, frames as u32, dim as u32, (file.fps * 1000.0).round() as u32, 0] {
        out.write_u32::<LittleEndian>(v)?;
    }
    out.write_all(&file.present.iter().map(|&p| p as u8).collect::<Vec<_>>())?;
    for &v in file.values.iter() {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_embd<R: Read>(mut input: R) -> Result<EmbdFile> {
    let bad = |e: std::io::Error| Error::Malformed(format!("EMBD stream: {e}"));
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(bad)?;
    if &magic != EMBD_MAGIC {
        return Err(Error::Malformed("missing EMBD magic".into()));
    }
    let mut h = [0u32; 5];
    for v in &mut h {
        *v = input.read_u32::<LittleEndian>().map_err(bad)?;
    }
    if h[0] != EMBD_VERSION {
        return Err(Error::Malformed(format!("unsupported EMBD version {}", h[0])));
    }
    let (frames, dim) = (h[1] as usize, h[2] as usize);
    let mut present = vec![0u8; frames];
    input.read_exact(&mut present).map_err(bad)?;
    let mut values = vec![0f32; frames * dim];
    input.read_f32_into::<LittleEndian>(&mut values).map_err(bad)?;
    Ok(EmbdFile {
        values: Array2::from_shape_vec((frames, dim), values).map_err(|e| Error::Malformed(e.to_string()))?,
        present: present.into_iter().map(|b| b != 0).collect(),
        fps: h[3] as f64 / 1000.0,
    })
}

pub fn save_embd(path: &Path, file: &EmbdFile) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_embd(&mut w, file).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_embd(path: &Path) -> Result<EmbdFile> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embd(std::io::BufReader::new(f))
}

/// Source of per-frame backbone features.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn n_frames(&self) -> usize;
    /// The frame's vector, or `None` when the stream has nothing for it.
    fn frame(&self, index: usize) -> Option<Array1<f64>>;
}

impl EmbeddingProvider for EmbdFile {
    fn dim(&self) -> usize {
        self.values.ncols()
    }

    fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    fn frame(&self, index: usize) -> Option<Array1<f64>> {
        (index < self.n_frames() && self.present[index]).then(|| self.values.row(index).mapv(f64::from))
    }
}

/// Seeded Gaussian vectors; each frame is absent with probability
/// `missing_rate`. A frame's vector depends only on `(seed, index)`.
#[derive(Debug, Clone)]
pub struct SyntheticEmbeddings {
    pub dim: usize,
    pub frames: usize,
    pub seed: u64,
    pub missing_rate: f64,
}

impl EmbeddingProvider for SyntheticEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_frames(&self) -> usize {
        self.frames
    }

    fn frame(&self, index: usize) -> Option<Array1<f64>> {
        if index >= self.frames {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        if rng.random::<f64>() < self.missing_rate {
            return None;
        }
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Some(Array1::from_shape_fn(self.dim, |_| normal.sample(&mut rng)))
    }
}

/// Fuses face/context/body providers frame by frame. Frames where every
/// stream is absent produce an all-zero row.
pub fn fuse_providers(
    face: Option<&dyn EmbeddingProvider>,
    context: Option<&dyn EmbeddingProvider>,
    body: Option<&dyn EmbeddingProvider>,
    dims: &FusionDims,
) -> Result<Array2<f64>> {
    let n = [face, context, body]
        .iter()
        .flatten()
        .map(|p| p.n_frames())
        .max()
        .ok_or(Error::Empty("no embedding streams"))?;
    let mut out = Array2::zeros((n, dims.total()));
    for t in 0..n {
        let streams = StreamFeatures {
            frame_index: t,
            face: face.and_then(|p| p.frame(t)),
            context: context.and_then(|p| p.frame(t)),
            body: body.and_then(|p| p.frame(t)),
        };
        if !streams.any_present() {
            continue;
        }
        out.row_mut(t).assign(&fuse_streams(&streams, dims)?.values);
    }
    Ok(out)
}

/// A fixed-length slice of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub video_id: String,
    /// Index of the window's first frame within the video.
    pub start: usize,
    /// `T x d_in`
    pub features: Array2<f64>,
    pub labels: Vec<FrameRecord>,
    /// False on padding slots.
    pub valid_mask: Vec<bool>,
}

impl SequenceWindow {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }

    /// Frames that are real and carry a label for `task`.
    pub fn label_mask(&self, task: Task) -> Vec<bool> {
        self.valid_mask
            .iter()
            .zip(&self.labels)
            .map(|(&v, r)| v && r.is_labelled(task))
            .collect()
    }

    pub fn expr_targets(&self) -> Vec<Option<usize>> {
        self.valid_mask
            .iter()
            .zip(&self.labels)
            .map(|(&v, r)| if v { r.expr } else { None })
            .collect()
    }

    /// `T x 2` valence/arousal targets, zero where unlabelled.
    pub fn va_targets(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.len(), 2));
        for (t, r) in self.labels.iter().enumerate() {
            if let Some((v, a)) = r.va_pair() {
                out[[t, 0]] = v;
                out[[t, 1]] = a;
            }
        }
        out
    }
}

/// Windows of `t_len` frames starting at `0, stride, 2 * stride, ...` (every
/// start below `N`). A short final window is padded by repeating the last
/// frame, with `valid_mask = false` on the padding.
pub fn make_windows(
    features: ArrayView2<f64>,
    records: &[FrameRecord],
    t_len: usize,
    stride: usize,
    video_id: &str,
) -> Result<Vec<SequenceWindow>> {
    if t_len == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be at least 1"));
    }
    if stride > t_len {
        return Err(Error::config(format!("stride {stride} exceeds window length {t_len}; frames would be skipped")));
    }
    let n = features.nrows();
    if records.len() != n {
        return Err(Error::contract(format!("{} feature rows but {} records", n, records.len())));
    }
    let mut out = Vec::new();
    for start in (0..n).step_by(stride) {
        let end = (start + t_len).min(n);
        let real = end - start;
        let mut feats = Array2::zeros((t_len, features.ncols()));
        feats.slice_mut(s![..real, ..]).assign(&features.slice(s![start..end, ..]));
        let mut labels = records[start..end].to_vec();
        for k in real..t_len {
            feats.row_mut(k).assign(&features.row(n - 1));
            labels.push(records[n - 1]);
        }
        let mut valid_mask = vec![true; real];
        valid_mask.resize(t_len, false);
        out.push(SequenceWindow {
            video_id: video_id.to_string(),
            start,
            features: feats,
            labels,
            valid_mask,
        });
    }
    Ok(out)
}

/// One video: per-frame features and annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub id: String,
    pub features: Array2<f64>,
    pub records: Vec<FrameRecord>,
}

impl VideoData {
    pub fn windows(&self, t_len: usize, stride: usize) -> Result<Vec<SequenceWindow>> {
        make_windows(self.features.view(), &self.records, t_len, stride, &self.id)
    }
}

pub fn windows_for(videos: &[VideoData], t_len: usize, stride: usize) -> Result<Vec<SequenceWindow>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(v.windows(t_len, stride)?);
    }
    Ok(out)
}

/// Writes `<id>.embd` and `<id>.csv` per video.
pub fn save_dataset_dir(dir: &Path, videos: &[VideoData], task: Task, fps: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for v in videos {
        let embd = EmbdFile {
            values: v.features.mapv(|x| x as f32),
            present: vec![true; v.features.nrows()],
            fps,
        };
        save_embd(&dir.join(format!("{}.embd", v.id)), &embd)?;
        save_label_csv(
            &dir.join(format!("{}.csv", v.id)),
            &LabelFile {
                task,
                records: v.records.clone(),
                probs: None,
            },
        )?;
    }
    Ok(())
}

/// Loads every `<id>.csv` in `dir` with its features: `<id>.embd` when
/// present, otherwise the fusion of `<id>.face.embd`, `<id>.context.embd`
/// and `<id>.body.embd` (missing stream files are zero-filled). Videos come
/// back sorted by id.
pub fn load_dataset_dir(dir: &Path, task: Task, dims: &FusionDims) -> Result<Vec<VideoData>> {
    let mut ids = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string(), path);
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Empty("no annotation CSV files in dataset directory"));
    }
    let mut videos = Vec::new();
    for (id, csv_path) in ids {
        let labels = load_label_csv(&csv_path)?;
        if labels.task != task {
            return Err(parse_err(&csv_path, 0, &format!("annotations are for task {}, expected {task}", labels.task)));
        }
        let fused = dir.join(format!("{id}.embd"));
        let features = if fused.exists() {
            let f = load_embd(&fused)?;
            f.values.mapv(f64::from)
        } else {
            let load = |stream: &str| -> Result<Option<EmbdFile>> {
                let p = dir.join(format!("{id}.{stream}.embd"));
                p.exists().then(|| load_embd(&p)).transpose()
            };
            let (face, context, body) = (load("face")?, load("context")?, load("body")?);
            fuse_providers(
                face.as_ref().map(|f| f as &dyn EmbeddingProvider),
                context.as_ref().map(|f| f as &dyn EmbeddingProvider),
                body.as_ref().map(|f| f as &dyn EmbeddingProvider),
                dims,
            )?
        };
        if features.nrows() != labels.records.len() {
            return Err(parse_err(
                &csv_path,
                0,
                &format!("{} annotation rows but {} feature frames", labels.records.len(), features.nrows()),
            ));
        }
        videos.push(VideoData {
            id,
            features,
            records: labels.records,
        });
    }
    Ok(videos)
}

/// Per-dimension noise of the expression features.
pub const EXPR_NOISE_SIGMA: f64 = 0.25;
/// Per-dimension noise of the VA features.
pub const VA_NOISE_SIGMA: f64 = 0.1;
/// Norm of each expression class mean.
pub const EXPR_CLASS_RADIUS: f64 = 0.5;
/// Shortest and longest expression run, in frames.
pub const EXPR_RUN_RANGE: (usize, usize) = (48, 128);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub task: Task,
    pub input_dim: usize,
    /// Word-embedding width of the generated class table (expression only).
    pub emb_dim: usize,
    /// Overrides the task's default noise level.
    pub noise_sigma: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_videos: 20,
            frames_per_video: 256,
            task: Task::Expr,
            input_dim: 32,
            emb_dim: 16,
            noise_sigma: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub videos: Vec<VideoData>,
    /// Expression: per-class feature means (`7 x d_in`).
    pub class_means: Option<Array2<f64>>,
    /// Expression: generated word embeddings for the class names.
    pub table: Option<EmbeddingTable>,
    /// VA: the `d_in x 2` lift from (v, a) to features.
    pub lift: Option<Array2<f64>>,
}

/// Deterministic desk-scale stand-in for an annotated video corpus.
///
/// Expression: each video is a sequence of class runs whose lengths are drawn
/// from [`EXPR_RUN_RANGE`]; frame features are the run's class mean plus
/// Gaussian noise. Class means sit on a sphere of radius
/// [`EXPR_CLASS_RADIUS`], so the noise vector (norm about `sigma * sqrt(d)`)
/// dwarfs the gap between means, and a single frame is ambiguous while a few
/// frames averaged are not.
///
/// VA: valence and arousal follow a mean-reverting random walk, smoothed
/// with a 5-frame moving average and clipped to [-1, 1]; features are a
/// fixed random linear lift of `(v, a)` plus Gaussian noise.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_videos == 0 || cfg.frames_per_video == 0 || cfg.input_dim == 0 {
        return Err(Error::config("synthetic dataset sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    match cfg.task {
        Task::Expr => {
            let sigma = cfg.noise_sigma.unwrap_or(EXPR_NOISE_SIGMA);
            let mut means = Array2::from_shape_fn((N_EXPR_CLASSES, cfg.input_dim), |_| unit.sample(&mut rng));
            for mut row in means.rows_mut() {
                let norm = row.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
                row.mapv_inplace(|v| v * EXPR_CLASS_RADIUS / norm);
            }
            let table_vecs = Array2::from_shape_fn((N_EXPR_CLASSES, cfg.emb_dim.max(1)), |_| unit.sample(&mut rng));
            let table = EmbeddingTable::new(EXPR_CLASSES.iter().map(|s| s.to_string()).collect(), table_vecs)?;
            let mut videos = Vec::with_capacity(cfg.n_videos);
            for v in 0..cfg.n_videos {
                let n = cfg.frames_per_video;
                let mut labels = Vec::with_capacity(n);
                let mut prev: Option<usize> = None;
                while labels.len() < n {
                    let len = rng.random_range(EXPR_RUN_RANGE.0..=EXPR_RUN_RANGE.1);
                    let class = loop {
                        let c = rng.random_range(0..N_EXPR_CLASSES);
                        if Some(c) != prev {
                            break c;
                        }
                    };
                    prev = Some(class);
                    labels.extend(std::iter::repeat_n(class, len));
                }
                labels.truncate(n);
                let mut features = Array2::zeros((n, cfg.input_dim));
                for (t, &c) in labels.iter().enumerate() {
                    for (j, x) in features.row_mut(t).iter_mut().enumerate() {
                        *x = means[[c, j]] + sigma * unit.sample(&mut rng);
                    }
                }
                videos.push(VideoData {
                    id: format!("video_{v:03}"),
                    features,
                    records: labels.iter().enumerate().map(|(t, &c)| FrameRecord::expr(t, Some(c))).collect(),
                });
            }
            Ok(SynthDataset {
                videos,
                class_means: Some(means),
                table: Some(table),
                lift: None,
            })
        }
        Task::Va => {
            let sigma = cfg.noise_sigma.unwrap_or(VA_NOISE_SIGMA);
            let lift = Array2::from_shape_fn((cfg.input_dim, 2), |_| unit.sample(&mut rng));
            let mut videos = Vec::with_capacity(cfg.n_videos);
            for v in 0..cfg.n_videos {
                let n = cfg.frames_per_video;
                let mut raw = Array2::<f64>::zeros((n, 2));
                let mut state = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
                for t in 0..n {
                    for (d, x) in state.iter_mut().enumerate() {
                        *x = 0.97 * *x + 0.12 * unit.sample(&mut rng);
                        raw[[t, d]] = *x;
                    }
                }
                let mut va = Array2::<f64>::zeros((n, 2));
                for t in 0..n {
                    let lo = t.saturating_sub(2);
                    let hi = (t + 3).min(n);
                    for d in 0..2 {
                        let m = raw.slice(s![lo..hi, d]).mean().unwrap_or(0.0);
                        va[[t, d]] = m.clamp(-1.0, 1.0);
                    }
                }
                let mut features = va.dot(&lift.t());
                features.mapv_inplace(|x| x + sigma * unit.sample(&mut rng));
                videos.push(VideoData {
                    id: format!("video_{v:03}"),
                    features,
                    records: (0..n)
                        .map(|t| FrameRecord::va(t, Some(va[[t, 0]]), Some(va[[t, 1]])))
                        .collect(),
                });
            }
            Ok(SynthDataset {
                videos,
                class_means: None,
                table: None,
                lift: Some(lift),
            })
        }
    }
}

/// Destroys temporal structure: frames (with their labels) are permuted
/// across the whole corpus, then dealt back into videos of the same lengths.
pub fn shuffle_frames(videos: &[VideoData], seed: u64) -> Vec<VideoData> {
    let mut pool: Vec<(Array1<f64>, FrameRecord)> = videos
        .iter()
        .flat_map(|v| v.features.rows().into_iter().map(|r| r.to_owned()).zip(v.records.iter().copied()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let mut it = pool.into_iter();
    videos
        .iter()
        .map(|v| {
            let n = v.records.len();
            let mut features = Array2::zeros(v.features.dim());
            let mut records = Vec::with_capacity(n);
            for t in 0..n {
                let (f, mut r) = it.next().expect("pool holds every frame");
                features.row_mut(t).assign(&f);
                r.frame_index = t;
                records.push(r);
            }
            VideoData {
                id: v.id.clone(),
                features,
                records,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_agent_bbox, ExpansionConfig};

    fn feats(n: usize) -> (Array2<f64>, Vec<FrameRecord>) {
        let f = Array2::from_shape_fn((n, 3), |(t, j)| (t * 10 + j) as f64);
        let r = (0..n).map(|t| FrameRecord::expr(t, Some(t % 7))).collect();
        (f, r)
    }

    #[test]
    fn windows_partial_tail() {
        let (f, r) = feats(10);
        let w = make_windows(f.view(), &r, 4, 4, "v").unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].valid_mask, vec![true, true, false, false]);
        // padding repeats the last frame
        assert_eq!(w[2].features.row(3), f.row(9));
        assert_eq!(w[2].labels[3], r[9]);
        assert_eq!(w[2].expr_targets(), vec![Some(8 % 7), Some(9 % 7), None, None]);
    }

    #[test]
    fn windows_exact_and_stride_one() {
        let (f, r) = feats(4);
        let w = make_windows(f.view(), &r, 4, 4, "v").unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].valid_mask.iter().all(|&v| v));

        let (f, r) = feats(5);
        let w = make_windows(f.view(), &r, 2, 1, "v").unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w.iter().filter(|w| w.valid_mask.iter().all(|&v| v)).count(), 4);
        assert_eq!(w[4].valid_mask, vec![true, false]);

        let (f, r) = feats(0);
        assert!(make_windows(f.view(), &r, 4, 4, "v").unwrap().is_empty());
        assert!(make_windows(f.view(), &r, 0, 4, "v").is_err());
        assert!(make_windows(f.view(), &r, 3, 4, "v").is_err());
    }

    #[test]
    fn windows_cover_every_frame() {
        for (n, t, stride) in [(17, 5, 3), (9, 4, 4), (3, 8, 2), (30, 7, 6)] {
            let (f, r) = feats(n);
            let ws = make_windows(f.view(), &r, t, stride, "v").unwrap();
            let mut seen = vec![false; n];
            for w in &ws {
                for (k, &valid) in w.valid_mask.iter().enumerate() {
                    if valid {
                        seen[w.start + k] = true;
                        assert_eq!(w.features.row(k), f.row(w.start + k));
                    } else {
                        assert!(w.start + k >= n);
                    }
                }
            }
            assert!(seen.iter().all(|&s| s), "n={n} t={t} stride={stride}");
        }
    }

    #[test]
    fn label_csv_roundtrip_with_sentinels() {
        let file = LabelFile {
            task: Task::Va,
            records: vec![
                FrameRecord::va(0, Some(0.25), Some(-0.5)),
                FrameRecord::va(1, None, Some(0.1)),
            ],
            probs: None,
        };
        let mut buf = Vec::new();
        write_label_csv(&mut buf, &file).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame_index,valence,arousal\n"));
        assert!(text.contains("1,-5,0.1"));
        assert_eq!(read_label_csv(&buf[..], Path::new("x.csv")).unwrap(), file);
    }

    #[test]
    fn label_csv_rejects_out_of_range() {
        let bad = "frame_index,expr\n0,3\n1,9\n";
        match read_label_csv(bad.as_bytes(), Path::new("bad.csv")) {
            Err(Error::Parse { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("{other:?}"),
        }
        let bad = "frame_index,valence,arousal\n0,1.5,0\n";
        assert!(read_label_csv(bad.as_bytes(), Path::new("bad.csv")).is_err());
    }

    #[test]
    fn probability_columns() {
        let text = "frame_index,expr,p0,p1,p2,p3,p4,p5,p6\n0,1,0,1,0,0,0,0,0\n";
        let f = read_label_csv(text.as_bytes(), Path::new("m.csv")).unwrap();
        assert_eq!(f.probs.unwrap().row(0)[1], 1.0);
    }

    #[test]
    fn pose_json_zero_frame_and_arity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.json");
        std::fs::write(&p, serde_json::json!({"people": [{"pose_keypoints_2d": vec![0.0; 75]}]}).to_string()).unwrap();
        let frames = parse_pose_json(&p).unwrap();
        let set = frames[0].as_ref().unwrap();
        assert!(set.to_flat().iter().all(|&v| v == 0.0));
        assert_eq!(compute_agent_bbox(set, 10, 10, &ExpansionConfig::default()).unwrap(), None);

        let docs = serde_json::json!([
            {"people": [{"pose_keypoints_2d": vec![0.0; 75]}]},
            {"people": []},
            {"people": [{"pose_keypoints_2d": vec![0.0; 74]}]}
        ]);
        std::fs::write(&p, docs.to_string()).unwrap();
        match parse_pose_json(&p) {
            Err(Error::Parse { frame, msg, .. }) => {
                assert_eq!(frame, 2);
                assert!(msg.contains("74"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pose_json_roundtrip_and_gaps() {
        let dir = tempfile::tempdir().unwrap();
        let flat: Vec<f64> = (0..75).map(|i| i as f64 * 1.25 + 0.1).collect();
        let set = KeypointSet::from_flat(&flat, 2).unwrap();
        std::fs::write(dir.path().join("a_000.json"), pose_document(0, None).to_string()).unwrap();
        std::fs::write(dir.path().join("a_002.json"), pose_document(2, Some(&set)).to_string()).unwrap();
        let frames = parse_pose_json(dir.path()).unwrap();
        assert_eq!(frames.len(), 3);
        assert!(frames[0].is_none() && frames[1].is_none());
        assert_eq!(frames[2].as_ref().unwrap(), &set);
    }

    #[test]
    fn embd_roundtrip() {
        let file = EmbdFile {
            values: Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.5),
            present: vec![true, false, true],
            fps: 30.0,
        };
        let mut buf = Vec::new();
        write_embd(&mut buf, &file).unwrap();
        assert_eq!(&buf[..4], b"EMBD");
        assert_eq!(buf.len(), 24 + 3 + 48);
        let back = read_embd(&buf[..]).unwrap();
        assert_eq!(back, file);
        assert!(back.frame(1).is_none());
        assert_eq!(back.frame(2).unwrap()[0], 4.0);
    }

    #[test]
    fn synthetic_provider_is_deterministic() {
        let p = SyntheticEmbeddings {
            dim: 5,
            frames: 20,
            seed: 3,
            missing_rate: 0.3,
        };
        let a: Vec<_> = (0..20).map(|t| p.frame(t)).collect();
        let b: Vec<_> = (0..20).map(|t| p.frame(t)).collect();
        assert_eq!(a, b);
        assert!(a.iter().any(Option::is_none) && a.iter().any(Option::is_some));
    }

    #[test]
    fn synth_is_deterministic() {
        for task in [Task::Expr, Task::Va] {
            let cfg = SynthConfig {
                task,
                n_videos: 3,
                frames_per_video: 40,
                ..SynthConfig::default()
            };
            assert_eq!(synth_dataset(&cfg).unwrap(), synth_dataset(&cfg).unwrap());
            let other = SynthConfig { seed: 1, ..cfg.clone() };
            assert_ne!(synth_dataset(&cfg).unwrap(), synth_dataset(&other).unwrap());
        }
    }

    fn nearest_mean(x: ndarray::ArrayView1<f64>, means: &Array2<f64>) -> usize {
        (0..means.nrows())
            .min_by(|&a, &b| {
                let da = (&means.row(a) - &x).mapv(|v| v * v).sum();
                let db = (&means.row(b) - &x).mapv(|v| v * v).sum();
                da.total_cmp(&db)
            })
            .unwrap()
    }

    #[test]
    fn noiseless_expression_is_linearly_separable() {
        let cfg = SynthConfig {
            noise_sigma: Some(0.0),
            n_videos: 4,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        let means = ds.class_means.unwrap();
        for v in &ds.videos {
            for (t, r) in v.records.iter().enumerate() {
                assert_eq!(nearest_mean(v.features.row(t), &means), r.expr.unwrap());
            }
        }
    }

    #[test]
    fn expression_needs_temporal_smoothing() {
        let ds = synth_dataset(&SynthConfig::default()).unwrap();
        let means = ds.class_means.unwrap();
        let (mut single, mut smoothed, mut total) = (0usize, 0usize, 0usize);
        for v in &ds.videos {
            let n = v.records.len();
            for t in 0..n {
                let gold = v.records[t].expr.unwrap();
                single += (nearest_mean(v.features.row(t), &means) == gold) as usize;
                let (lo, hi) = (t.saturating_sub(2), (t + 3).min(n));
                let avg = v.features.slice(s![lo..hi, ..]).mean_axis(ndarray::Axis(0)).unwrap();
                smoothed += (nearest_mean(avg.view(), &means) == gold) as usize;
                total += 1;
            }
        }
        let (single, smoothed) = (single as f64 / total as f64, smoothed as f64 / total as f64);
        assert!(single < 0.8, "per-frame accuracy {single}");
        assert!(smoothed > single + 0.15, "smoothed {smoothed} vs per-frame {single}");
        // noise norm exceeds the largest gap between class means
        let max_gap = (0..7)
            .flat_map(|a| (0..7).map(move |b| (a, b)))
            .map(|(a, b)| (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt())
            .fold(0.0, f64::max);
        assert!(EXPR_NOISE_SIGMA * (32f64).sqrt() > max_gap);
    }

    #[test]
    fn noiseless_va_inverts_exactly() {
        let cfg = SynthConfig {
            task: Task::Va,
            noise_sigma: Some(0.0),
            n_videos: 2,
            ..SynthConfig::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        let lift = ds.lift.unwrap();
        // ordinary least squares: (A^T A)^{-1} A^T x
        let ata = lift.t().dot(&lift);
        let det = ata[[0, 0]] * ata[[1, 1]] - ata[[0, 1]] * ata[[1, 0]];
        let inv = ndarray::array![[ata[[1, 1]], -ata[[0, 1]]], [-ata[[1, 0]], ata[[0, 0]]]] / det;
        let pinv = inv.dot(&lift.t());
        for v in &ds.videos {
            let est = v.features.dot(&pinv.t());
            let gold_v: Vec<f64> = v.records.iter().map(|r| r.valence.unwrap()).collect();
            let gold_a: Vec<f64> = v.records.iter().map(|r| r.arousal.unwrap()).collect();
            let cv = crate::metrics::ccc(&est.column(0).to_vec(), &gold_v).unwrap();
            let ca = crate::metrics::ccc(&est.column(1).to_vec(), &gold_a).unwrap();
            assert!((cv - 1.0).abs() < 1e-9 && (ca - 1.0).abs() < 1e-9);
            assert!(gold_v.iter().chain(&gold_a).all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn shuffle_keeps_frames_paired_with_labels() {
        let ds = synth_dataset(&SynthConfig {
            n_videos: 2,
            frames_per_video: 50,
            noise_sigma: Some(0.0),
            ..SynthConfig::default()
        })
        .unwrap();
        let means = ds.class_means.unwrap();
        let shuffled = shuffle_frames(&ds.videos, 1);
        assert_eq!(shuffled.len(), 2);
        for v in &shuffled {
            for (t, r) in v.records.iter().enumerate() {
                assert_eq!(nearest_mean(v.features.row(t), &means), r.expr.unwrap());
            }
        }
        assert_ne!(shuffled[0].records, ds.videos[0].records);
    }
}
