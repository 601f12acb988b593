//! Subcommands behind the `mfn` binary: synthesize data, train payloads,
//! run inference, classify digits, benchmark restoration, evaluate images.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run, EngineConfig, EngineError, Init, RunResult, Status, TraceRow};
use crate::graph::{Assignment, Network, Payload, Value, VarId};
use crate::io::{
    colorize_scale, float_to_byte, gray_of_rgb, load_network, read_file, read_image, save_network, write_file,
    write_image, ImageBuffer, IoError,
};
use crate::layouts::{
    build_combined_color_layout, build_image_layout, build_mnist_hierarchy, build_spectrogram_layout, Channels,
    Hierarchy, ImageLayoutSpec, LayoutError, Region, Skeleton, MNIST_SIDE,
};
use crate::signal::{
    export_magnitude_csv, log_bin, read_wav, save_spectrogram, stft, unbin_magnitude_mse, write_wav, SignalError,
    Spectrogram,
};
use crate::synth;
use crate::training::{pool_positions, train_payload_report, NmfConfig, TrainError, TrainReport, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("factor {factor}: {source}")]
    Train { factor: usize, source: TrainError },
    #[error(transparent)]
    Engine(EngineError),
    #[error("no evidence was attached, so no factor can vote")]
    NoEvidence,
    #[error("inference stopped after {0} iterations without converging")]
    NonConverged(usize),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::NoInitialVoters => CliError::NoEvidence,
            e => CliError::Engine(e),
        }
    }
}

impl CliError {
    /// 2 validation, 3 non-convergence (including nothing to vote), 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 4,
            CliError::Signal(SignalError::Io(_) | SignalError::Wav(_)) => 4,
            CliError::NoEvidence | CliError::NonConverged(_) => 3,
            _ => 2,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Image,
    Spectrogram,
    Digits,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageLayoutKind {
    /// Per-channel squares plus linked squares.
    #[default]
    Split,
    /// One factor per square over all channels.
    Combined,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    #[default]
    Table,
    Nmf,
    Pca,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
    pub patch: usize,
    pub stride: usize,
    pub linked_patch: usize,
    pub channels: Channels,
    pub region: Option<Region>,
    pub layout: ImageLayoutKind,
}

impl Default for ImageConfig {
    fn default() -> Self {
        let s = ImageLayoutSpec::default();
        ImageConfig {
            width: s.width,
            height: s.height,
            patch: s.patch,
            stride: s.stride,
            linked_patch: s.linked_patch,
            channels: s.channels,
            region: None,
            layout: ImageLayoutKind::Split,
        }
    }
}

impl ImageConfig {
    pub fn spec(&self, factor_weight: f64) -> ImageLayoutSpec {
        ImageLayoutSpec {
            width: self.width,
            height: self.height,
            patch: self.patch,
            stride: self.stride,
            linked_patch: self.linked_patch,
            channels: self.channels,
            region: self.region,
            factor_weight,
        }
    }

    fn roi(&self) -> Region {
        self.region.unwrap_or(Region {
            x0: 0,
            y0: 0,
            w: self.width,
            h: self.height,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrogramConfig {
    pub frame_ms: u32,
    pub hop_ms: u32,
    pub n_bins: usize,
    /// Frames kept from the start of every clip.
    pub n_frames: usize,
    pub factor_width: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            frame_ms: 50,
            hop_ms: 25,
            n_bins: 400,
            n_frames: 40,
            factor_width: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FactorConfig {
    pub kind: FactorKind,
    /// Hidden dimension; defaults to 5 for NMF and 20 for PCA.
    pub hidden_p: Option<usize>,
    pub subsample_prob: f64,
    /// Train one payload from all positions.
    pub shared: bool,
    pub seed: u64,
    pub nmf: NmfConfig,
}

impl Default for FactorConfig {
    fn default() -> Self {
        FactorConfig {
            kind: FactorKind::Table,
            hidden_p: None,
            subsample_prob: 1.0,
            shared: false,
            seed: 0,
            nmf: NmfConfig::default(),
        }
    }
}

impl FactorConfig {
    pub fn trainer(&self) -> Trainer {
        match self.kind {
            FactorKind::Table => Trainer::Table {
                subsample_prob: self.subsample_prob,
                seed: self.seed,
            },
            FactorKind::Nmf => Trainer::Nmf {
                p: self.hidden_p.unwrap_or(5),
                config: NmfConfig {
                    seed: self.seed,
                    ..self.nmf.clone()
                },
            },
            FactorKind::Pca => Trainer::Pca {
                p: self.hidden_p.unwrap_or(20),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub image: ImageConfig,
    pub spectrogram: SpectrogramConfig,
    pub factor: FactorConfig,
    pub engine: EngineConfig,
    pub evidence_weight: f64,
    pub factor_weight: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Image,
            image: ImageConfig::default(),
            spectrogram: SpectrogramConfig::default(),
            factor: FactorConfig::default(),
            engine: EngineConfig::default(),
            evidence_weight: 1.0,
            factor_weight: 1.0,
        }
    }
}

pub fn parse_config(text: &[u8]) -> Result<RunConfig, CliError> {
    serde_json::from_slice(text).map_err(|e| invalid(format!("config: {e}")))
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    parse_config(&read_file(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

pub fn save_config(path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let mut json = serde_json::to_vec_pretty(cfg).map_err(IoError::from)?;
    json.push(b'\n');
    Ok(write_file(path, &json)?)
}

/// Evaluation metrics for a single reconstruction or an aggregate.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub l1_total: f64,
    pub l1_per_pixel_channel: f64,
    pub perfect_restore: bool,
    pub accuracy: Option<f64>,
    pub iterations: usize,
    pub opinion_updates: usize,
    pub rollbacks: usize,
    pub votes_cast: usize,
    pub converged: bool,
}

impl Metrics {
    fn with_stats(mut self, r: &RunResult) -> Self {
        self.iterations = r.stats.iterations;
        self.opinion_updates = r.stats.opinion_updates;
        self.rollbacks = r.stats.rollbacks;
        self.votes_cast = r.stats.votes_cast;
        self.converged = r.status == Status::Converged;
        self
    }
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(IoError::from)?;
    }
    w.into_inner().map_err(|e| invalid(e.to_string()))
}

pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    Ok(write_file(path, &csv_bytes(rows)?)?)
}

fn list_files(dir: &Path, exts: &[&str]) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|x| x.to_str()).is_some_and(|x| exts.contains(&x)))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(invalid(format!("{}: no {} files", dir.display(), exts.join("/"))));
    }
    Ok(out)
}

/// Run `f` over `items` on a pool of `jobs` workers, keeping input order.
fn map_jobs<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

// ---- images ----

/// Plane `c` of pixel `(x, y)` as a float in [0, 1]; plane 3 (or the only
/// plane of a mono layout) is gray.
fn plane_value(img: &ImageBuffer, channels: Channels, c: usize, x: usize, y: usize) -> f64 {
    let gray = || {
        if img.channels == 1 {
            img.get_f(x, y, 0)
        } else {
            gray_of_rgb(img.get_f(x, y, 0), img.get_f(x, y, 1), img.get_f(x, y, 2))
        }
    };
    match (channels, c) {
        (Channels::Mono, _) | (Channels::RgbGray, 3) => gray(),
        _ => img.get_f(x, y, c),
    }
}

fn check_image(cfg: &ImageConfig, img: &ImageBuffer, what: &Path) -> Result<(), CliError> {
    if img.width != cfg.width || img.height != cfg.height {
        return Err(invalid(format!(
            "{}: image is {}x{}, layout expects {}x{}",
            what.display(),
            img.width,
            img.height,
            cfg.width,
            cfg.height
        )));
    }
    if cfg.channels == Channels::Rgb && img.channels != 3 {
        return Err(invalid(format!("{}: RGB layout needs a color image", what.display())));
    }
    Ok(())
}

fn image_sample(cfg: &ImageConfig, n_vars: usize, img: &ImageBuffer) -> Vec<Value> {
    let spec = cfg.spec(1.0);
    let r = cfg.roi();
    let mut v = vec![Value::Real(0.0); n_vars];
    for c in 0..cfg.channels.planes() {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                v[spec.var(c, x, y).expect("inside roi")] = Value::Real(plane_value(img, cfg.channels, c, x, y));
            }
        }
    }
    v
}

fn image_skeleton(cfg: &RunConfig) -> Result<Skeleton, CliError> {
    let spec = cfg.image.spec(cfg.factor_weight);
    Ok(match cfg.image.layout {
        ImageLayoutKind::Split => build_image_layout(&spec)?,
        ImageLayoutKind::Combined => build_combined_color_layout(&spec)?,
    })
}

fn spectrogram_of(path: &Path, cfg: &SpectrogramConfig) -> Result<Spectrogram, CliError> {
    let (samples, rate) = read_wav(path)?;
    let full = stft(&samples, rate, cfg.frame_ms, cfg.hop_ms)?;
    let mut s = log_bin(&full, cfg.n_bins, rate, cfg.frame_ms, cfg.hop_ms)?;
    if s.n_frames() < cfg.n_frames {
        return Err(invalid(format!(
            "{}: {} frames, layout needs {}",
            path.display(),
            s.n_frames(),
            cfg.n_frames
        )));
    }
    s.data = s.data.columns(0, cfg.n_frames).into_owned();
    Ok(s)
}

fn spectrogram_sample(s: &Spectrogram) -> Vec<Value> {
    let (nb, nf) = (s.n_bins(), s.n_frames());
    let mut v = Vec::with_capacity(nb * nf);
    for t in 0..nf {
        for b in 0..nb {
            v.push(Value::Complex(s.data[(b, t)]));
        }
    }
    v
}

/// Digit images are named `<class>_<anything>.pgm`.
fn digit_label(path: &Path) -> Option<u32> {
    let stem = path.file_stem()?.to_str()?;
    let head = stem.split('_').next()?;
    head.parse().ok().filter(|&c| c < 10)
}

fn digit_pixels(img: &ImageBuffer, path: &Path) -> Result<Vec<u8>, CliError> {
    let gray: Vec<u8> = (0..img.height)
        .flat_map(|y| (0..img.width).map(move |x| (x, y)))
        .map(|(x, y)| float_to_byte(plane_value(img, Channels::Mono, 0, x, y)))
        .collect();
    match (img.width, img.height) {
        (28, 28) => Ok(synth::pad_digit(&gray)),
        (MNIST_SIDE, MNIST_SIDE) => Ok(gray),
        (w, h) => Err(invalid(format!("{}: digits must be 28x28 or 32x32, got {w}x{h}", path.display()))),
    }
}

fn skeleton_for(cfg: &RunConfig) -> Result<Skeleton, CliError> {
    match cfg.task {
        Task::Image => image_skeleton(cfg),
        Task::Spectrogram => {
            let s = &cfg.spectrogram;
            Ok(build_spectrogram_layout(s.n_bins, s.n_frames, s.factor_width, cfg.factor_weight)?)
        }
        Task::Digits => Ok(build_mnist_hierarchy()),
    }
}

fn check_trainer(cfg: &RunConfig) -> Result<(), CliError> {
    let ok = matches!(
        (cfg.task, cfg.factor.kind),
        (Task::Image, FactorKind::Table | FactorKind::Nmf)
            | (Task::Spectrogram, FactorKind::Table | FactorKind::Pca)
            | (Task::Digits, FactorKind::Table)
    );
    if !ok {
        return Err(invalid(format!("{:?} factors are not available for {:?} tasks", cfg.factor.kind, cfg.task)));
    }
    Ok(())
}

fn load_samples(cfg: &RunConfig, skeleton: &Skeleton, dir: &Path) -> Result<Vec<Vec<Value>>, CliError> {
    let n = skeleton.variables.len();
    match cfg.task {
        Task::Image => list_files(dir, &["ppm", "pgm"])?
            .iter()
            .map(|p| {
                let img = read_image(p)?;
                check_image(&cfg.image, &img, p)?;
                Ok(image_sample(&cfg.image, n, &img))
            })
            .collect(),
        Task::Spectrogram => list_files(dir, &["wav"])?
            .iter()
            .map(|p| Ok(spectrogram_sample(&spectrogram_of(p, &cfg.spectrogram)?)))
            .collect(),
        Task::Digits => list_files(dir, &["pgm"])?
            .iter()
            .map(|p| {
                let class = digit_label(p).ok_or_else(|| invalid(format!("{}: no class prefix", p.display())))?;
                Ok(Hierarchy::training_sample(&digit_pixels(&read_image(p)?, p)?, class))
            })
            .collect(),
    }
}

/// One row of `train_report.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct FactorDiagnostics {
    pub factor: usize,
    pub group: String,
    pub width: usize,
    pub rows: usize,
    pub relative_residual: Option<f64>,
    pub top_eigenvalue: Option<f64>,
    pub filled: usize,
}

#[derive(Serialize)]
struct NmfTraceRow {
    factor: usize,
    iteration: usize,
    objective: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub samples: usize,
    pub payloads: usize,
    pub factors: Vec<FactorDiagnostics>,
}

fn diagnostics(f: usize, skeleton: &Skeleton, r: &TrainReport) -> FactorDiagnostics {
    FactorDiagnostics {
        factor: f,
        group: format!("{:?}", skeleton.factors[f].group),
        width: skeleton.factors[f].neighbors.len(),
        rows: r.rows,
        relative_residual: r.relative_residual,
        top_eigenvalue: r.eigenvalues.first().copied(),
        filled: r.filled,
    }
}

/// Train payloads for every factor of the configured layout from the files
/// in `train_dir`, writing the model into `model_dir`.
pub fn cmd_train(cfg: &RunConfig, train_dir: &Path, model_dir: &Path) -> Result<TrainSummary, CliError> {
    check_trainer(cfg)?;
    let skeleton = skeleton_for(cfg)?;
    let samples = load_samples(cfg, &skeleton, train_dir)?;
    let trainer = cfg.factor.trainer();
    let nf = skeleton.factors.len();
    let (payloads, reports): (Vec<Payload>, Vec<TrainReport>) = if cfg.factor.shared {
        let positions: Vec<_> = (0..nf).map(|f| skeleton.exemplars(f, &samples)).collect();
        let pooled = pool_positions(&positions).map_err(|source| CliError::Train { factor: 0, source })?;
        let (p, r) = train_payload_report(&pooled, &trainer).map_err(|source| CliError::Train { factor: 0, source })?;
        (vec![p; nf], vec![r; nf])
    } else {
        let trained: Vec<Result<(Payload, TrainReport), CliError>> = (0..nf)
            .into_par_iter()
            .map(|f| {
                train_payload_report(&skeleton.exemplars(f, &samples), &trainer)
                    .map_err(|source| CliError::Train { factor: f, source })
            })
            .collect();
        trained.into_iter().collect::<Result<Vec<_>, _>>()?.into_iter().unzip()
    };
    let net = skeleton.bind(payloads, &[])?;
    save_network(&net, model_dir)?;
    save_config(&model_dir.join("config.json"), cfg)?;
    let factors: Vec<FactorDiagnostics> = reports.iter().enumerate().map(|(f, r)| diagnostics(f, &skeleton, r)).collect();
    write_csv_rows(&model_dir.join("train_report.csv"), &factors)?;
    if cfg.factor.kind == FactorKind::Nmf {
        let rows: Vec<NmfTraceRow> = reports
            .iter()
            .enumerate()
            .take(if cfg.factor.shared { 1 } else { nf })
            .flat_map(|(f, r)| {
                r.objective.iter().enumerate().map(move |(i, &o)| NmfTraceRow {
                    factor: f,
                    iteration: i,
                    objective: o,
                })
            })
            .collect();
        write_csv_rows(&model_dir.join("nmf_trace.csv"), &rows)?;
    }
    Ok(TrainSummary {
        samples: samples.len(),
        payloads: if cfg.factor.shared { 1 } else { nf },
        factors,
    })
}

/// A trained model: its training config, layout and one payload per factor.
pub struct Model {
    pub config: RunConfig,
    pub skeleton: Skeleton,
    pub payloads: Vec<Payload>,
}

pub fn load_model_dir(dir: &Path) -> Result<Model, CliError> {
    let config = load_config(&dir.join("config.json"))?;
    let skeleton = skeleton_for(&config)?;
    let net = load_network(dir)?;
    if net.n_variables() != skeleton.variables.len() || net.n_factors() != skeleton.factors.len() {
        return Err(invalid(format!(
            "{}: model has {} variables / {} factors, layout has {} / {}",
            dir.display(),
            net.n_variables(),
            net.n_factors(),
            skeleton.variables.len(),
            skeleton.factors.len()
        )));
    }
    for (a, (f, t)) in net.factors().iter().zip(&skeleton.factors).enumerate() {
        if f.neighbors != t.neighbors {
            return Err(invalid(format!("{}: factor {a} does not match the layout", dir.display())));
        }
    }
    let payloads = net.factors().iter().map(|f| f.payload.clone()).collect();
    Ok(Model {
        config,
        skeleton,
        payloads,
    })
}

impl Model {
    fn bind(&self, evidence: &[(VarId, Value, f64)]) -> Result<Network, CliError> {
        Ok(self.skeleton.bind(self.payloads.clone(), evidence)?)
    }
}

/// Which pixels (or spectrogram cells) carry evidence.
#[derive(Clone, Debug, Default)]
pub struct MaskSpec {
    /// Gray image whose zero pixels are missing.
    pub mask_image: Option<PathBuf>,
    pub erase: Vec<Region>,
    /// Erase a seeded random blob of this many pixels around the center.
    pub blob: Option<usize>,
    pub blob_seed: u64,
    /// Spectrogram frames `[start, end)` with no evidence.
    pub drop_frames: Option<(usize, usize)>,
}

impl MaskSpec {
    /// `true` where a value is observed, on a `w x h` grid.
    fn observed(&self, w: usize, h: usize) -> Result<Vec<bool>, CliError> {
        let mut keep = vec![true; w * h];
        if let Some(p) = &self.mask_image {
            let m = read_image(p)?;
            if (m.width, m.height) != (w, h) {
                return Err(invalid(format!("{}: mask is {}x{}, expected {w}x{h}", p.display(), m.width, m.height)));
            }
            for y in 0..h {
                for x in 0..w {
                    if (0..m.channels).all(|c| m.get(x, y, c) == 0) {
                        keep[y * w + x] = false;
                    }
                }
            }
        }
        for r in &self.erase {
            for y in r.y0..(r.y0 + r.h).min(h) {
                for x in r.x0..(r.x0 + r.w).min(w) {
                    keep[y * w + x] = false;
                }
            }
        }
        if let Some(n) = self.blob {
            if n > w * h {
                return Err(invalid(format!("blob of {n} pixels exceeds the {w}x{h} grid")));
            }
            for (x, y) in synth::random_blob(w, h, n, self.blob_seed) {
                keep[y * w + x] = false;
            }
        }
        if let Some((a, b)) = self.drop_frames {
            for y in 0..h {
                for x in a.min(w)..b.min(w) {
                    keep[y * w + x] = false;
                }
            }
        }
        Ok(keep)
    }
}

#[derive(Clone, Debug, Default)]
pub struct InferOptions {
    pub mask: MaskSpec,
    /// Ground truth for metrics.
    pub original: Option<PathBuf>,
    pub output: PathBuf,
    pub metrics: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    /// Rerun from the first pass's votes with this evidence weight.
    pub second_pass_weight: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct InferOutcome {
    pub task: Task,
    pub metrics: Metrics,
    pub result: RunResult,
}

fn run_inference(model: &Model, cfg: &RunConfig, evidence: &[(VarId, Value, f64)], second: Option<f64>) -> Result<RunResult, CliError> {
    if evidence.is_empty() {
        return Err(CliError::NoEvidence);
    }
    let net = model.bind(evidence)?;
    let first = run(&net, &cfg.engine, Init::Evidence)?;
    match second {
        None => Ok(first),
        Some(w) => {
            let light = net.with_evidence_weight(w).map_err(|e| invalid(e.to_string()))?;
            let mut r = run(&light, &cfg.engine, Init::Resume(first.votes.clone()))?;
            r.stats.iterations += first.stats.iterations;
            r.stats.opinion_updates += first.stats.opinion_updates;
            r.stats.rollbacks += first.stats.rollbacks;
            r.stats.votes_cast += first.stats.votes_cast;
            let offset = first.trace.last().map_or(0, |t| t.iter + 1);
            let mut trace = first.trace;
            trace.extend(r.trace.into_iter().map(|t| TraceRow { iter: t.iter + offset, ..t }));
            r.trace = trace;
            Ok(r)
        }
    }
}

fn real_at(a: &Assignment, i: VarId) -> Option<f64> {
    a.get(i).and_then(|v| v.as_real())
}

/// Merge the assignment back into an image the size of the input.
fn render_image(cfg: &ImageConfig, input: &ImageBuffer, observed: &[bool], a: &Assignment) -> ImageBuffer {
    let spec = cfg.spec(1.0);
    let r = cfg.roi();
    let color = cfg.channels != Channels::Mono;
    let mut out = ImageBuffer::new(cfg.width, cfg.height, if color { 3 } else { 1 });
    let gray_input = color && input.channels == 1;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let known = observed[y * cfg.width + x];
            let inside = x >= r.x0 && x < r.x0 + r.w && y >= r.y0 && y < r.y0 + r.h;
            let planes = if color { 3 } else { 1 };
            let mut v: Vec<f64> = (0..planes)
                .map(|c| {
                    let fallback = if known { plane_value(input, if gray_input { Channels::Mono } else { cfg.channels }, c, x, y) } else { 0.0 };
                    if inside {
                        real_at(a, spec.var(c, x, y).expect("inside")).unwrap_or(fallback)
                    } else {
                        fallback
                    }
                })
                .collect();
            if gray_input && inside {
                let target = input.get_f(x, y, 0);
                v = colorize_scale([v[0], v[1], v[2]], target).to_vec();
            }
            for (c, f) in v.iter().enumerate() {
                out.set(x, y, c, float_to_byte(*f));
            }
        }
    }
    out
}

/// MSE over float pixels and L1 over bytes, restricted to `region`.
pub fn image_metrics(original: &ImageBuffer, recon: &ImageBuffer, region: Option<Region>) -> Result<Metrics, CliError> {
    if (original.width, original.height, original.channels) != (recon.width, recon.height, recon.channels) {
        return Err(invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            original.width, original.height, original.channels, recon.width, recon.height, recon.channels
        )));
    }
    let r = region.unwrap_or(Region {
        x0: 0,
        y0: 0,
        w: original.width,
        h: original.height,
    });
    if r.x0 + r.w > original.width || r.y0 + r.h > original.height {
        return Err(invalid("evaluation region exceeds the image"));
    }
    let (mut se, mut l1) = (0.0, 0.0);
    for y in r.y0..r.y0 + r.h {
        for x in r.x0..r.x0 + r.w {
            for c in 0..original.channels {
                let (a, b) = (original.get(x, y, c), recon.get(x, y, c));
                se += (a as f64 / 255.0 - b as f64 / 255.0).powi(2);
                l1 += (a as f64 - b as f64).abs();
            }
        }
    }
    let n = (r.w * r.h * original.channels).max(1) as f64;
    Ok(Metrics {
        mse: se / n,
        l1_total: l1,
        l1_per_pixel_channel: l1 / n,
        perfect_restore: l1 == 0.0,
        ..Metrics::default()
    })
}

fn image_evidence(cfg: &ImageConfig, input: &ImageBuffer, observed: &[bool], weight: f64) -> Vec<(VarId, Value, f64)> {
    let spec = cfg.spec(1.0);
    let r = cfg.roi();
    // a gray input on a gray-augmented layout only observes the gray plane
    let planes: Vec<usize> = if cfg.channels == Channels::RgbGray && input.channels == 1 {
        vec![3]
    } else {
        (0..cfg.channels.planes()).collect()
    };
    let src = if input.channels == 1 { Channels::Mono } else { cfg.channels };
    let mut ev = Vec::new();
    for &c in &planes {
        for y in r.y0..r.y0 + r.h {
            for x in r.x0..r.x0 + r.w {
                if observed[y * cfg.width + x] {
                    let v = if c == 3 { plane_value(input, Channels::Mono, 0, x, y) } else { plane_value(input, src, c, x, y) };
                    ev.push((spec.var(c, x, y).expect("inside"), Value::Real(v), weight));
                }
            }
        }
    }
    ev
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<(), CliError> {
    write_csv_rows(path, trace)
}

/// Reconstruct an image or spectrogram from partial evidence.
pub fn cmd_infer(model_dir: &Path, overrides: Option<&RunConfig>, input: &Path, opts: &InferOptions) -> Result<InferOutcome, CliError> {
    let model = load_model_dir(model_dir)?;
    let cfg = merged(&model.config, overrides);
    let outcome = match cfg.task {
        Task::Image => {
            let img = read_image(input)?;
            check_image(&cfg.image, &img, input)?;
            let observed = opts.mask.observed(cfg.image.width, cfg.image.height)?;
            let ev = image_evidence(&cfg.image, &img, &observed, cfg.evidence_weight);
            let result = run_inference(&model, &cfg, &ev, opts.second_pass_weight)?;
            let out = render_image(&cfg.image, &img, &observed, &result.assignment);
            write_image(&opts.output, &out)?;
            let metrics = match &opts.original {
                Some(p) => image_metrics(&read_image(p)?, &out, cfg.image.region)?,
                None => Metrics::default(),
            };
            InferOutcome {
                task: cfg.task,
                metrics: metrics.with_stats(&result),
                result,
            }
        }
        Task::Spectrogram => {
            let sc = &cfg.spectrogram;
            let spec = spectrogram_of(input, sc)?;
            let observed_ft = opts.mask.observed(sc.n_frames, sc.n_bins)?;
            let mut ev = Vec::new();
            for t in 0..sc.n_frames {
                for b in 0..sc.n_bins {
                    if observed_ft[b * sc.n_frames + t] {
                        ev.push((t * sc.n_bins + b, Value::Complex(spec.data[(b, t)]), cfg.evidence_weight));
                    }
                }
            }
            let result = run_inference(&model, &cfg, &ev, opts.second_pass_weight)?;
            let mut out = spec.clone();
            for t in 0..sc.n_frames {
                for b in 0..sc.n_bins {
                    out.data[(b, t)] = result
                        .assignment
                        .get(t * sc.n_bins + b)
                        .and_then(|v| v.as_complex())
                        .unwrap_or_default();
                }
            }
            save_spectrogram(&opts.output, &out)?;
            export_magnitude_csv(&opts.output.with_extension("csv"), &out)?;
            let mut metrics = Metrics::default();
            if let Some(p) = &opts.original {
                metrics.mse = unbin_magnitude_mse(&spectrogram_of(p, sc)?, &out)?;
            }
            InferOutcome {
                task: cfg.task,
                metrics: metrics.with_stats(&result),
                result,
            }
        }
        Task::Digits => return Err(invalid("digit models are used with the classify command")),
    };
    if let Some(p) = &opts.trace {
        write_trace(p, &outcome.result.trace)?;
    }
    if let Some(p) = &opts.metrics {
        write_csv_rows(p, std::slice::from_ref(&outcome.metrics))?;
    }
    Ok(outcome)
}

/// Training layout and payload settings come from the model; engine and
/// weight settings from the overrides when given.
fn merged(model: &RunConfig, overrides: Option<&RunConfig>) -> RunConfig {
    match overrides {
        None => model.clone(),
        Some(o) => RunConfig {
            engine: o.engine.clone(),
            evidence_weight: o.evidence_weight,
            ..model.clone()
        },
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Classification {
    pub file: String,
    pub predicted: Option<u32>,
    pub truth: Option<u32>,
    pub iterations: usize,
    pub opinion_updates: usize,
    pub converged: bool,
}

pub struct ClassifySummary {
    pub rows: Vec<Classification>,
    pub accuracy: Option<f64>,
    pub mean_iterations: f64,
    pub mean_opinion_updates: f64,
}

/// Label every digit image in `input_dir` by the hierarchy's top label.
pub fn cmd_classify(
    model_dir: &Path,
    overrides: Option<&RunConfig>,
    input_dir: &Path,
    output: &Path,
    jobs: usize,
) -> Result<ClassifySummary, CliError> {
    let model = load_model_dir(model_dir)?;
    if model.config.task != Task::Digits {
        return Err(invalid("classify needs a digits model"));
    }
    let cfg = merged(&model.config, overrides);
    let files = list_files(input_dir, &["pgm"])?;
    let results = map_jobs(jobs, &files, |p| -> Result<Classification, CliError> {
        let px = digit_pixels(&read_image(p)?, p)?;
        // pixel factor weights are 1, and discrete variables need equal weights
        let ev: Vec<_> = (0..MNIST_SIDE * MNIST_SIDE)
            .map(|k| (Hierarchy::pixel(0, k / MNIST_SIDE, k % MNIST_SIDE), Value::Int(px[k] as i64), 1.0))
            .collect();
        let r = run_inference(&model, &cfg, &ev, None)?;
        Ok(Classification {
            file: p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            predicted: r.assignment.get(Hierarchy::top_label()).and_then(|v| v.as_label()),
            truth: digit_label(p),
            iterations: r.stats.iterations,
            opinion_updates: r.stats.opinion_updates,
            converged: r.status == Status::Converged,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_csv_rows(output, &rows)?;
    let labeled: Vec<_> = rows.iter().filter(|r| r.truth.is_some()).collect();
    let accuracy = (!labeled.is_empty())
        .then(|| labeled.iter().filter(|r| r.predicted == r.truth).count() as f64 / labeled.len() as f64);
    let n = rows.len() as f64;
    Ok(ClassifySummary {
        accuracy,
        mean_iterations: rows.iter().map(|r| r.iterations as f64).sum::<f64>() / n,
        mean_opinion_updates: rows.iter().map(|r| r.opinion_updates as f64).sum::<f64>() / n,
        rows,
    })
}

#[derive(Clone, Debug)]
pub struct BenchmarkOptions {
    pub trials: usize,
    pub seed: u64,
    /// Gaussian noise on the byte scale.
    pub noise: f64,
    pub blob: usize,
    /// Per-pixel-per-channel L1 at or below which a trial counts as restored.
    pub tolerance: f64,
    pub jobs: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            trials: 50,
            seed: 0,
            noise: 40.0,
            blob: 144,
            tolerance: 1.0,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub image: String,
    pub l1_total: f64,
    pub l1_per_pixel_channel: f64,
    pub perfect_restore: bool,
    pub iterations: usize,
    pub rollbacks: usize,
    pub monotone: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub trials: usize,
    pub perfect_fraction: f64,
    pub within_tolerance_fraction: f64,
    pub mean_l1_total: f64,
    pub mean_l1_per_pixel_channel: f64,
    pub mean_iterations: f64,
    pub rollback_rate: f64,
    pub all_monotone: bool,
}

fn trace_monotone(trace: &[TraceRow]) -> bool {
    trace.windows(2).all(|w| {
        let (a, b) = (&w[0], &w[1]);
        let tol = 1e-9 * a.active_cost.abs().max(1.0);
        b.abstain_count < a.abstain_count || (b.abstain_count == a.abstain_count && b.active_cost <= a.active_cost + tol)
    })
}

/// Restore stored images from noisy, partly erased copies.
pub fn cmd_benchmark(
    model_dir: &Path,
    overrides: Option<&RunConfig>,
    images_dir: &Path,
    opts: &BenchmarkOptions,
    output: &Path,
) -> Result<BenchmarkSummary, CliError> {
    if opts.trials < 1 {
        return Err(invalid("benchmark needs at least one trial"));
    }
    let model = load_model_dir(model_dir)?;
    if model.config.task != Task::Image {
        return Err(invalid("benchmark needs an image model"));
    }
    let mut cfg = merged(&model.config, overrides);
    cfg.engine.trace = true;
    let files = list_files(images_dir, &["ppm", "pgm"])?;
    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed);
    let trials: Vec<(usize, usize)> = (0..opts.trials).map(|t| (t, pick.random_range(0..files.len()))).collect();
    let ic = &cfg.image;
    let rows = map_jobs(opts.jobs, &trials, |&(t, k)| -> Result<TrialRow, CliError> {
        let original = read_image(&files[k])?;
        check_image(ic, &original, &files[k])?;
        let trial_seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        let noisy = synth::gaussian_noise(&original, opts.noise, trial_seed);
        let mask = MaskSpec {
            blob: (opts.blob > 0).then_some(opts.blob),
            blob_seed: trial_seed,
            ..MaskSpec::default()
        };
        let observed = mask.observed(ic.width, ic.height)?;
        let ev = image_evidence(ic, &noisy, &observed, cfg.evidence_weight);
        let mut ecfg = cfg.clone();
        ecfg.engine.seed = trial_seed;
        let r = run_inference(&model, &ecfg, &ev, None)?;
        let out = render_image(ic, &noisy, &observed, &r.assignment);
        let m = image_metrics(&original, &out, ic.region)?;
        Ok(TrialRow {
            trial: t,
            image: files[k].file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            l1_total: m.l1_total,
            l1_per_pixel_channel: m.l1_per_pixel_channel,
            perfect_restore: m.perfect_restore,
            iterations: r.stats.iterations,
            rollbacks: r.stats.rollbacks,
            monotone: trace_monotone(&r.trace),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    write_csv_rows(output, &rows)?;
    let n = rows.len() as f64;
    let iters: usize = rows.iter().map(|r| r.iterations).sum();
    let summary = BenchmarkSummary {
        trials: rows.len(),
        perfect_fraction: rows.iter().filter(|r| r.perfect_restore).count() as f64 / n,
        within_tolerance_fraction: rows.iter().filter(|r| r.l1_per_pixel_channel <= opts.tolerance).count() as f64 / n,
        mean_l1_total: rows.iter().map(|r| r.l1_total).sum::<f64>() / n,
        mean_l1_per_pixel_channel: rows.iter().map(|r| r.l1_per_pixel_channel).sum::<f64>() / n,
        mean_iterations: iters as f64 / n,
        rollback_rate: rows.iter().map(|r| r.rollbacks).sum::<usize>() as f64 / iters.max(1) as f64,
        all_monotone: rows.iter().all(|r| r.monotone),
    };
    write_csv_rows(&output.with_extension("summary.csv"), std::slice::from_ref(&summary))?;
    Ok(summary)
}

/// Compare two images.
pub fn cmd_eval(original: &Path, recon: &Path, region: Option<Region>, output: Option<&Path>) -> Result<Metrics, CliError> {
    let m = image_metrics(&read_image(original)?, &read_image(recon)?, region)?;
    if let Some(p) = output {
        write_csv_rows(p, std::slice::from_ref(&m))?;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Textures,
    Faces,
    Digits,
    Music,
}

#[derive(Clone, Debug)]
pub struct SynthOptions {
    pub count: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub rate: u32,
    pub seconds: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            count: 10,
            seed: 0,
            width: 16,
            height: 16,
            rate: 8000,
            seconds: 2.0,
        }
    }
}

/// Write a seeded synthetic dataset into `out`; returns the file paths.
pub fn cmd_synth(kind: Dataset, out: &Path, o: &SynthOptions) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::with_capacity(o.count);
    for i in 0..o.count {
        let s = o.seed.wrapping_add(i as u64);
        let path = match kind {
            Dataset::Textures => {
                let p = out.join(format!("tex_{i:04}.ppm"));
                write_image(&p, &synth::blob_texture(o.width, o.height, s))?;
                p
            }
            Dataset::Faces => {
                let p = out.join(format!("face_{i:04}.ppm"));
                write_image(&p, &synth::face(o.width, o.height, s))?;
                p
            }
            Dataset::Digits => {
                let class = (i % 10) as u32;
                let p = out.join(format!("{class}_{i:04}.pgm"));
                let img = ImageBuffer {
                    width: synth::DIGIT_SIDE,
                    height: synth::DIGIT_SIDE,
                    channels: 1,
                    data: synth::stroke_digit(class, s),
                };
                write_image(&p, &img)?;
                p
            }
            Dataset::Music => {
                let p = out.join(format!("clip_{i:04}.wav"));
                write_wav(&p, &synth::tone_grid(o.rate, o.seconds, 0.25, s), o.rate)?;
                p
            }
        };
        paths.push(path);
    }
    Ok(paths)
}

/// Evidence-only baseline for an erased region: missing pixels take the mean
/// of the observed ones, per channel.
pub fn mean_fill(input: &ImageBuffer, observed: &[bool]) -> ImageBuffer {
    let mut out = input.clone();
    for c in 0..input.channels {
        let (mut s, mut n) = (0.0, 0usize);
        for y in 0..input.height {
            for x in 0..input.width {
                if observed[y * input.width + x] {
                    s += input.get_f(x, y, c);
                    n += 1;
                }
            }
        }
        let m = if n > 0 { s / n as f64 } else { 0.0 };
        for y in 0..input.height {
            for x in 0..input.width {
                if !observed[y * input.width + x] {
                    out.set(x, y, c, float_to_byte(m));
                }
            }
        }
    }
    out
}

pub fn observed_mask(mask: &MaskSpec, width: usize, height: usize) -> Result<Vec<bool>, CliError> {
    mask.observed(width, height)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let err = parse_config(br#"{"task":"image","evidence_wieght":2}"#).err().unwrap();
        assert!(err.to_string().contains("evidence_wieght"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let err = parse_config(br#"{"image":{"width":8,"colour":1}}"#).err().unwrap();
        assert!(err.to_string().contains("colour"));
        let cfg = parse_config(br#"{"engine":{"schedule":{"Simultaneous":{"fraction":0.1}}}}"#).unwrap();
        assert_eq!(cfg.image.width, 16);
    }

    #[test]
    fn eval_examples() {
        let mut a = ImageBuffer::new(4, 3, 3);
        for (k, b) in a.data.iter_mut().enumerate() {
            *b = (k * 11 % 256) as u8;
        }
        let m = image_metrics(&a, &a, None).unwrap();
        assert_eq!((m.mse, m.l1_total, m.l1_per_pixel_channel, m.perfect_restore), (0.0, 0.0, 0.0, true));
        let mut b = a.clone();
        b.data[5] = b.data[5].wrapping_add(3);
        let m = image_metrics(&a, &b, None).unwrap();
        assert_eq!(m.l1_total, 3.0);
        assert!((m.mse - (3.0f64 / 255.0).powi(2) / 36.0).abs() < 1e-15);
        assert!(image_metrics(&a, &ImageBuffer::new(4, 3, 1), None).is_err());
    }

    #[test]
    fn eval_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ImageBuffer::new(6, 5, 3);
        let mut b = a.clone();
        a.data.iter_mut().for_each(|v| *v = rng.random());
        b.data.iter_mut().for_each(|v| *v = rng.random());
        let region = Region { x0: 1, y0: 2, w: 4, h: 3 };
        let m = image_metrics(&a, &b, Some(region)).unwrap();
        let (mut se, mut l1) = (0.0, 0.0);
        for y in 2..5 {
            for x in 1..5 {
                for c in 0..3 {
                    let d = a.get(x, y, c) as f64 - b.get(x, y, c) as f64;
                    se += (d / 255.0) * (d / 255.0);
                    l1 += d.abs();
                }
            }
        }
        assert_eq!(m.l1_total, l1);
        assert!((m.mse - se / 36.0).abs() < 1e-15);
    }

    #[test]
    fn mask_combines_sources() {
        let m = MaskSpec {
            erase: vec![Region { x0: 1, y0: 1, w: 2, h: 2 }],
            drop_frames: Some((5, 6)),
            ..MaskSpec::default()
        };
        let keep = m.observed(6, 4).unwrap();
        assert_eq!(keep.iter().filter(|k| !**k).count(), 4 + 4);
        assert!(!keep[6 + 1] && !keep[5]);
    }

    #[test]
    fn digit_names() {
        assert_eq!(digit_label(Path::new("d/7_0012.pgm")), Some(7));
        assert_eq!(digit_label(Path::new("d/x_0012.pgm")), None);
        assert_eq!(digit_label(Path::new("d/12_0.pgm")), None);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::NoEvidence.exit_code(), 3);
        assert_eq!(CliError::NonConverged(5).exit_code(), 3);
        let io = IoError::File {
            path: "x".into(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        };
        assert_eq!(CliError::Io(io).exit_code(), 4);
        assert_eq!(invalid("x").exit_code(), 2);
    }
}
