//! End-to-end runs of the five inference strategies: plan work units, call a
//! detector backend, map boxes back to image coordinates, merge, time, and
//! hand the result to evaluation.

pub mod backend;
pub mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    BackendError, BackendRequest, BackendResponse, DetectorBackend, Handshake, PrecomputedBackend, RawDetection,
    SimulatedBackend, SubprocessBackend,
};
pub use config::{BackendConfig, BackendKind, PipelineConfig};

use crate::evaluation::{evaluate, EvalConfig, EvalReport, GroundTruthSet, Prediction};
use crate::formats::{cell, ClassMap, DetectionRecord, Table};
use crate::geometry::{clip_box, rescale_box_xy, BBox};
use crate::merging::{plain_merge, ta_tm_merge, Detection, MergeError, MergeParams};
use crate::slicing::AnnotatedImage;
use crate::tiling::{plan_grid, TileGrid, TileSpec, TilingError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Format(#[from] crate::formats::FormatError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Full640,
    Full1280,
    TileNms,
    TileOverlapNms,
    TileOverlapTatm,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        Self::Full640,
        Self::Full1280,
        Self::TileNms,
        Self::TileOverlapNms,
        Self::TileOverlapTatm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Self::Full640 => "full-640",
            Self::Full1280 => "full-1280",
            Self::TileNms => "tile-nms",
            Self::TileOverlapNms => "tile-overlap-nms",
            Self::TileOverlapTatm => "tile-overlap-tatm",
        }
    }

    pub fn is_tiled(self) -> bool {
        !matches!(self, Self::Full640 | Self::Full1280)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.tag()).collect();
                format!("unknown strategy '{s}' (expected one of {})", names.join(", "))
            })
    }
}

/// Strategy with its resolved geometry and merge parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Network input size of a full-image strategy.
    pub input_size: Option<u32>,
    pub tile_size: u32,
    pub stride: u32,
    pub merge: MergeParams<f64>,
}

impl Strategy {
    pub fn resolve(kind: StrategyKind, cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let (input_size, stride) = match kind {
            StrategyKind::Full640 => (Some(cfg.input_full[0]), cfg.stride),
            StrategyKind::Full1280 => (Some(cfg.input_full[1]), cfg.stride),
            StrategyKind::TileNms => (None, cfg.tile_size),
            StrategyKind::TileOverlapNms | StrategyKind::TileOverlapTatm => {
                if cfg.stride >= cfg.tile_size {
                    return Err(PipelineError::Config(format!(
                        "{} needs stride < tile_size (got {} and {})",
                        kind.tag(),
                        cfg.stride,
                        cfg.tile_size
                    )));
                }
                (None, cfg.stride)
            }
        };
        Ok(Self {
            kind,
            input_size,
            tile_size: cfg.tile_size,
            stride,
            merge: cfg.merge_params(),
        })
    }

    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::Full640 | StrategyKind::Full1280 => format!("Full-{}", self.input_size.unwrap_or(0)),
            StrategyKind::TileNms => format!("Tile-{} + NMS", self.tile_size),
            StrategyKind::TileOverlapNms => format!("Tile-{} + Overlap + NMS", self.tile_size),
            StrategyKind::TileOverlapTatm => format!("Tile-{} + Overlap + TA-TM", self.tile_size),
        }
    }
}

/// Image metadata needed to plan work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: u64,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn from_annotated(img: &AnnotatedImage<f64>, root: &Path) -> Self {
        Self {
            id: img.id,
            path: root.join(&img.file_name),
            width: img.width,
            height: img.height,
        }
    }
}

/// One detector call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub unit_id: String,
    pub strategy: StrategyKind,
    pub image_id: u64,
    pub image_path: PathBuf,
    /// `[x0, y0, w, h]` in image pixels.
    pub region: [u32; 4],
    pub target_input: u32,
    pub tile: Option<TileSpec>,
    /// Resize factor from image pixels to network input pixels.
    pub scale: f64,
}

/// Work units of one image, plus the tile grid for tiled strategies.
pub fn plan_work(image: &ImageRef, strategy: &Strategy) -> Result<(Option<TileGrid>, Vec<WorkUnit>), PipelineError> {
    if let Some(k) = strategy.input_size {
        if image.width == 0 || image.height == 0 {
            return Err(TilingError::EmptyImage(image.width, image.height).into());
        }
        let unit = WorkUnit {
            unit_id: format!("{}:full", image.id),
            strategy: strategy.kind,
            image_id: image.id,
            image_path: image.path.clone(),
            region: [0, 0, image.width, image.height],
            target_input: k,
            tile: None,
            scale: k as f64 / image.width.max(image.height) as f64,
        };
        return Ok((None, vec![unit]));
    }
    let grid = plan_grid(image.width, image.height, strategy.tile_size, strategy.stride)?;
    let units = grid
        .tiles()
        .iter()
        .map(|t| WorkUnit {
            unit_id: format!("{}:r{}c{}", image.id, t.row, t.col),
            strategy: strategy.kind,
            image_id: image.id,
            image_path: image.path.clone(),
            region: [t.x0, t.y0, t.width, t.height],
            target_input: strategy.tile_size,
            tile: Some(*t),
            scale: strategy.tile_size as f64 / t.width.max(t.height) as f64,
        })
        .collect();
    Ok((Some(grid), units))
}

/// Validates a backend response and converts it into detections in image
/// coordinates (tile-local boxes keep their tile provenance).
pub fn response_to_detections(unit: &WorkUnit, resp: &BackendResponse) -> Result<Vec<Detection<f64>>, String> {
    if resp.unit_id != unit.unit_id {
        return Err(format!("response unit_id '{}' does not echo '{}'", resp.unit_id, unit.unit_id));
    }
    if let Some(e) = &resp.error {
        return Err(format!("backend reported: {e}"));
    }
    let [x0, y0, w, h] = unit.region;
    let frame = BBox::new(0.0, 0.0, w as f64, h as f64).expect("region rect");
    let mut out = Vec::with_capacity(resp.detections.len());
    for (i, d) in resp.detections.iter().enumerate() {
        if !(0.0..=1.0).contains(&d.score) {
            return Err(format!("detection {i}: score {} outside [0, 1]", d.score));
        }
        let [a, b, c, e] = d.bbox;
        let mut bbox = BBox::new(a, b, c, e).map_err(|err| format!("detection {i}: {err}"))?;
        if let Some([sx, sy]) = resp.input_scale {
            bbox = rescale_box_xy(&bbox, 1.0 / sx, 1.0 / sy).map_err(|err| format!("detection {i}: {err}"))?;
        }
        let Some(local) = clip_box(&bbox, &frame).0 else {
            log::debug!("{}: dropping detection {i} outside the region", unit.unit_id);
            continue;
        };
        out.push(match unit.tile {
            Some(tile) => Detection::in_tile(d.class_id, d.score, local, tile),
            None => Detection::full_image(d.class_id, d.score, local.translate(x0 as f64, y0 as f64)),
        });
    }
    Ok(out)
}

/// Raw (unmerged) detections of one image.
#[derive(Debug, Clone)]
pub struct ImageDetections {
    pub image_id: u64,
    pub grid: Option<TileGrid>,
    pub detections: Vec<Detection<f64>>,
    pub units: usize,
    pub tiling_ms: f64,
    pub detection_ms: f64,
    pub failure: Option<String>,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1000.0
}

pub fn detect_image(image: &ImageRef, strategy: &Strategy, backend: &dyn DetectorBackend) -> ImageDetections {
    let t0 = Instant::now();
    let mut res = ImageDetections {
        image_id: image.id,
        grid: None,
        detections: Vec::new(),
        units: 0,
        tiling_ms: 0.0,
        detection_ms: 0.0,
        failure: None,
    };
    let (grid, units) = match plan_work(image, strategy) {
        Ok(p) => p,
        Err(e) => {
            res.failure = Some(e.to_string());
            return res;
        }
    };
    res.tiling_ms = ms_since(t0);
    res.grid = grid;
    res.units = units.len();
    let t1 = Instant::now();
    for unit in &units {
        let dets = backend
            .detect(unit)
            .map_err(|e| e.to_string())
            .and_then(|r| response_to_detections(unit, &r));
        match dets {
            Ok(d) => res.detections.extend(d),
            Err(e) => {
                log::warn!("image {} failed on {}: {e}", image.id, unit.unit_id);
                res.failure = Some(format!("{}: {e}", unit.unit_id));
                res.detections.clear();
                break;
            }
        }
    }
    res.detection_ms = ms_since(t1);
    res
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub detections: Vec<Detection<f64>>,
    pub boosted: usize,
    pub sensitive: usize,
}

/// Applies the strategy's merge: TA-TM for the topology-aware strategy,
/// confidence filter plus class-aware NMS for everything else.
pub fn merge_image(
    dets: Vec<Detection<f64>>,
    grid: Option<&TileGrid>,
    kind: StrategyKind,
    params: &MergeParams<f64>,
) -> Result<MergeOutcome, PipelineError> {
    if kind == StrategyKind::TileOverlapTatm {
        let grid = grid.ok_or_else(|| PipelineError::Config("topology-aware merging needs a tile grid".into()))?;
        let out = ta_tm_merge(dets, grid, params)?;
        return Ok(MergeOutcome {
            detections: out.detections,
            boosted: out.boosted,
            sensitive: out.sensitive,
        });
    }
    Ok(MergeOutcome {
        detections: plain_merge(dets, params)?,
        boosted: 0,
        sensitive: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTiming {
    pub image_id: u64,
    pub units: usize,
    pub detections: usize,
    pub tiling_ms: f64,
    pub detection_ms: f64,
    pub merge_ms: f64,
    pub total_ms: f64,
    pub boosted: usize,
    pub sensitive: usize,
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset_id: String,
    pub strategy: String,
    pub backend_id: String,
    pub params_hash: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub images: Vec<ImageTiming>,
    pub failed_images: Vec<u64>,
    pub mean_ms: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ImageResult {
    pub image_id: u64,
    pub detections: Vec<Detection<f64>>,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub strategy: Strategy,
    pub images: Vec<ImageResult>,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn predictions(&self) -> Vec<Prediction<f64>> {
        self.images
            .iter()
            .filter(|r| !r.failed)
            .flat_map(|r| r.detections.iter().map(move |d| Prediction::from_detection(r.image_id, d)))
            .collect()
    }

    pub fn records(&self, classes: Option<&ClassMap>) -> Vec<DetectionRecord> {
        self.images
            .iter()
            .flat_map(|r| {
                r.detections
                    .iter()
                    .map(move |d| DetectionRecord::from_detection(r.image_id, self.strategy.kind.tag(), d, classes))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub jobs: usize,
    /// Record wall-clock timings; when off every timing is 0 so outputs are
    /// byte-reproducible.
    pub timing: bool,
    pub dataset_id: String,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 0,
            timing: true,
            dataset_id: String::new(),
        }
    }
}

/// Runs `f` on a pool with `jobs` threads (0: one per core).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("cannot build a {jobs}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

/// Detects every image (in parallel, results in input order).
pub fn detect_dataset(
    images: &[ImageRef],
    strategy: &Strategy,
    backend: &dyn DetectorBackend,
    jobs: usize,
) -> Vec<ImageDetections> {
    let jobs = if backend.max_in_flight() == 1 { 1 } else { jobs };
    with_jobs(jobs, || {
        images
            .par_iter()
            .map(|img| detect_image(img, strategy, backend))
            .collect()
    })
}

/// Merges pre-computed raw detections and assembles the run output.
pub fn finish_run(
    raw: Vec<ImageDetections>,
    strategy: &Strategy,
    backend_id: &str,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> RunOutput {
    let merged: Vec<(ImageDetections, Result<MergeOutcome, PipelineError>, f64)> = with_jobs(opts.jobs, || {
        raw.into_par_iter()
            .map(|r| {
                let t = Instant::now();
                let out = match &r.failure {
                    Some(e) => Err(PipelineError::Config(e.clone())),
                    None => merge_image(r.detections.clone(), r.grid.as_ref(), strategy.kind, &strategy.merge),
                };
                (r, out, ms_since(t))
            })
            .collect()
    });

    let clock = |v: f64| if opts.timing { v } else { 0.0 };
    let mut images = Vec::with_capacity(merged.len());
    let mut timings = Vec::with_capacity(merged.len());
    let mut failed_images = Vec::new();
    for (r, out, merge_ms) in merged {
        let (detections, boosted, sensitive, failed) = match out {
            Ok(m) => (m.detections, m.boosted, m.sensitive, None),
            Err(e) => {
                let msg = r.failure.clone().unwrap_or_else(|| e.to_string());
                log::warn!("image {} excluded: {msg}", r.image_id);
                failed_images.push(r.image_id);
                (Vec::new(), 0, 0, Some(msg))
            }
        };
        timings.push(ImageTiming {
            image_id: r.image_id,
            units: r.units,
            detections: detections.len(),
            tiling_ms: clock(r.tiling_ms),
            detection_ms: clock(r.detection_ms),
            merge_ms: clock(merge_ms),
            total_ms: clock(r.tiling_ms + r.detection_ms + merge_ms),
            boosted,
            sensitive,
            failed: failed.clone(),
        });
        images.push(ImageResult {
            image_id: r.image_id,
            detections,
            failed: failed.is_some(),
        });
    }
    let ok: Vec<f64> = timings.iter().filter(|t| t.failed.is_none()).map(|t| t.total_ms).collect();
    let manifest = RunManifest {
        dataset_id: opts.dataset_id.clone(),
        strategy: strategy.kind.tag().to_string(),
        backend_id: backend_id.to_string(),
        params_hash: cfg.params_hash(),
        config: cfg.effective(),
        images: timings,
        failed_images,
        mean_ms: (opts.timing && !ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64),
    };
    RunOutput {
        strategy: strategy.clone(),
        images,
        manifest,
    }
}

pub fn run_strategy(
    images: &[ImageRef],
    strategy: &Strategy,
    backend: &dyn DetectorBackend,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> RunOutput {
    let raw = detect_dataset(images, strategy, backend, opts.jobs);
    finish_run(raw, strategy, backend.id(), cfg, opts)
}

/// A dataset with ground truth and an image root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub root: PathBuf,
    pub images: Vec<AnnotatedImage<f64>>,
    pub classes: ClassMap,
}

impl Dataset {
    pub fn from_synth(id: &str, data: crate::synth::SynthDataset, root: impl Into<PathBuf>) -> Self {
        Self {
            id: id.to_string(),
            root: root.into(),
            images: data.images,
            classes: data.classes,
        }
    }

    pub fn image_refs(&self) -> Vec<ImageRef> {
        self.images.iter().map(|i| ImageRef::from_annotated(i, &self.root)).collect()
    }

    /// Ground truth of the images not listed in `exclude`.
    pub fn ground_truth(&self, eval: &EvalConfig, exclude: &[u64]) -> Result<GroundTruthSet<f64>, PipelineError> {
        let mut gts = GroundTruthSet::new(eval.input_size, eval.reference);
        for img in self.images.iter().filter(|i| !exclude.contains(&i.id)) {
            gts.add_image(img.id, img.width, img.height, img.annotations.iter().map(|a| (a.class_id, a.bbox)))?;
        }
        Ok(gts)
    }
}

/// Evaluation settings consistent with the run configuration.
pub fn eval_config(cfg: &PipelineConfig) -> EvalConfig {
    EvalConfig {
        input_size: cfg.input_full[0],
        reference: crate::evaluation::ReferenceGrid {
            tile_size: cfg.tile_size,
            stride: cfg.tile_size,
        },
        conf: cfg.conf,
        ..EvalConfig::default()
    }
}

pub fn evaluate_run(run: &RunOutput, dataset: &Dataset, cfg: &PipelineConfig) -> Result<EvalReport<f64>, PipelineError> {
    let ecfg = eval_config(cfg);
    let gts = dataset.ground_truth(&ecfg, &run.manifest.failed_images)?;
    let mut report = evaluate(&run.strategy.label(), &run.predictions(), &gts, &dataset.classes.indices(), &ecfg);
    report.mean_ms = run.manifest.mean_ms;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub dataset_id: String,
    pub reports: Vec<EvalReport<f64>>,
}

fn bin_header(label: &str, n: usize) -> String {
    format!("Recall {label} (n={n})")
}

impl Comparison {
    /// Method x {mAP@50, precision, recall, ms/image}.
    pub fn main_table(&self) -> Table {
        let mut t = Table::new(["Method", "mAP@50", "Precision", "Recall", "ms/image"]);
        for r in &self.reports {
            t.push(vec![
                r.label.clone(),
                cell(r.map50),
                cell(Some(r.operating_point.precision)),
                cell(Some(r.operating_point.recall)),
                cell(r.mean_ms),
            ]);
        }
        t
    }

    fn bin_table(&self, pick: impl Fn(&EvalReport<f64>) -> &Vec<crate::evaluation::BinRecall<f64>>) -> Table {
        let Some(first) = self.reports.first() else {
            return Table::new(["Method"]);
        };
        let mut cols = vec!["Method".to_string()];
        cols.extend(pick(first).iter().map(|b| bin_header(&b.label, b.n_gt)));
        let mut t = Table::new(cols);
        for r in &self.reports {
            let mut row = vec![r.label.clone()];
            row.extend(pick(r).iter().map(|b| cell(b.recall)));
            t.push(row);
        }
        t
    }

    /// Recall per apparent-area bin.
    pub fn area_table(&self) -> Table {
        self.bin_table(|r| &r.area_bins)
    }

    /// Recall per boundary-distance bin.
    pub fn boundary_table(&self) -> Table {
        self.bin_table(|r| &r.boundary_bins)
    }
}

/// Runs each strategy with the same backend and evaluates it.
pub fn compare_strategies(
    dataset: &Dataset,
    kinds: &[StrategyKind],
    backend: &dyn DetectorBackend,
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<(Comparison, Vec<RunOutput>), PipelineError> {
    let refs = dataset.image_refs();
    let mut runs = Vec::with_capacity(kinds.len());
    let mut reports = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let strategy = Strategy::resolve(kind, cfg)?;
        let run = run_strategy(&refs, &strategy, backend, cfg, opts);
        reports.push(evaluate_run(&run, dataset, cfg)?);
        runs.push(run);
    }
    Ok((
        Comparison {
            dataset_id: dataset.id.clone(),
            reports,
        },
        runs,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the overlap + NMS baseline.
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub map50: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    /// Recall in the nearest boundary bin.
    pub boundary_recall: Option<f64>,
    pub boosted: usize,
    pub sensitive: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub dataset_id: String,
    pub rows: Vec<SweepRow>,
}

impl Sweep {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["tau", "lambda", "mAP@50", "Precision", "Recall", "Boundary recall", "Boosted"]);
        for r in &self.rows {
            t.push(vec![
                r.tau.map_or_else(|| "baseline".into(), |v| format!("{v}")),
                r.lambda.map_or_else(|| "-".into(), |v| format!("{v}")),
                cell(r.map50),
                cell(Some(r.precision)),
                cell(Some(r.recall)),
                cell(r.boundary_recall),
                r.boosted.to_string(),
            ]);
        }
        t
    }
}

/// Detects once on the overlapping grid, then re-merges for every `(tau,
/// lambda)` pair. The first row is the overlap + NMS baseline.
pub fn sweep_tatm_params(
    dataset: &Dataset,
    backend: &dyn DetectorBackend,
    taus: &[f64],
    lambdas: &[f64],
    cfg: &PipelineConfig,
    opts: &RunOptions,
) -> Result<Sweep, PipelineError> {
    let base = Strategy::resolve(StrategyKind::TileOverlapNms, cfg)?;
    let raw = detect_dataset(&dataset.image_refs(), &base, backend, opts.jobs);
    let mut rows = Vec::new();
    let mut settings: Vec<(StrategyKind, Option<(f64, f64)>)> = vec![(StrategyKind::TileOverlapNms, None)];
    for &tau in taus {
        for &lambda in lambdas {
            settings.push((StrategyKind::TileOverlapTatm, Some((tau, lambda))));
        }
    }
    for (kind, tl) in settings {
        let mut c = cfg.clone();
        if let Some((tau, lambda)) = tl {
            c.tau = tau;
            c.lambda = lambda;
        }
        let strategy = Strategy::resolve(kind, &c)?;
        let run = finish_run(raw.clone(), &strategy, backend.id(), &c, opts);
        let report = evaluate_run(&run, dataset, &c)?;
        rows.push(SweepRow {
            tau: tl.map(|v| v.0),
            lambda: tl.map(|v| v.1),
            map50: report.map50,
            precision: report.operating_point.precision,
            recall: report.operating_point.recall,
            boundary_recall: report.boundary_bins.first().and_then(|b| b.recall),
            boosted: run.manifest.images.iter().map(|i| i.boosted).sum(),
            sensitive: run.manifest.images.iter().map(|i| i.sensitive).sum(),
        });
    }
    Ok(Sweep {
        dataset_id: dataset.id.clone(),
        rows,
    })
}
