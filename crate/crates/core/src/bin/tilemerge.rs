use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tilemerge::evaluation::{evaluate, resolution_collapse_report, EvalReport, Prediction};
use tilemerge::formats::{
    self, cell, read_coco, read_detections, write_detections, write_json, write_report, AliasMap, ClassMap,
    CocoReadOptions, DetectionRecord, GridManifest, Table,
};
use tilemerge::merging::Detection;
use tilemerge::pipeline::{
    self, compare_strategies, detect_dataset, eval_config, finish_run, merge_image, sweep_tatm_params, BackendKind, Comparison,
    Dataset, DetectorBackend, PipelineConfig, PrecomputedBackend, RunOptions, SimulatedBackend, Strategy,
    StrategyKind, SubprocessBackend,
};
use tilemerge::slicing::{emit_training_labels, slice_dataset, split_dataset, CropSource, LabelFormat, SliceParams};
use tilemerge::synth::{self, generate_scenario, ground_truth_index, SimDetectorParams, SynthScenario};
use tilemerge::tiling::{plan_grid, TileGrid};

#[derive(Parser)]
#[command(name = "tilemerge", version, about = "Tiled small-object detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plan tile grids for image dimensions or a dataset.
    Plan(PlanArgs),
    /// Slice an annotated dataset into training tiles.
    Slice(SliceArgs),
    /// Run one inference strategy over a dataset.
    Run(RunArgs),
    /// Merge raw per-tile detections.
    Merge(MergeArgs),
    /// Evaluate a detections file against ground truth.
    Eval(EvalArgs),
    /// Run and evaluate several strategies with one backend.
    Compare(CompareArgs),
    /// Sweep the TA-TM threshold and agreement weight.
    Sweep(SweepArgs),
    /// Dataset statistics and apparent-area distribution.
    Stats(StatsArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Serve the simulated detector over the backend protocol on stdin/stdout.
    ServeSim(ServeSimArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Full-image input sizes, e.g. `640,1280`.
    #[arg(long)]
    input_full: Option<String>,
    #[arg(long)]
    min_visibility: Option<f64>,
    #[arg(long)]
    classes_file: Option<PathBuf>,
    /// precomputed, subprocess or sim.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    backend_cmd: Option<String>,
    #[arg(long)]
    backend_dir: Option<PathBuf>,
    #[arg(long)]
    backend_sim: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Apply the confidence threshold to adjusted scores.
    #[arg(long)]
    conf_after_adjust: bool,
    /// Worker threads (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::from_file(p)?,
            None => PipelineConfig::default(),
        };
        let mut set = |k: &str, v: Option<String>| -> Result<()> {
            if let Some(v) = v {
                cfg.set(k, &v).with_context(|| format!("--{}", k.replace(['_', '.'], "-")))?;
            }
            Ok(())
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        set("tile_size", self.tile_size.map(|v| v.to_string()))?;
        set("stride", self.stride.map(|v| v.to_string()))?;
        set("conf", self.conf.map(|v| v.to_string()))?;
        set("nms_iou", self.nms_iou.map(|v| v.to_string()))?;
        set("tau", self.tau.map(|v| v.to_string()))?;
        set("lambda", self.lambda.map(|v| v.to_string()))?;
        set("mu", self.mu.map(|v| v.to_string()))?;
        set("input_full", self.input_full.clone())?;
        set("min_visibility", self.min_visibility.map(|v| v.to_string()))?;
        set("classes_file", s(&self.classes_file))?;
        set("backend.kind", self.backend.clone())?;
        set("backend.cmd", self.backend_cmd.clone())?;
        set("backend.dir", s(&self.backend_dir))?;
        set("backend.sim", s(&self.backend_sim))?;
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("conf_after_adjust", self.conf_after_adjust.then(|| "true".to_string()))?;
        set("jobs", self.jobs.map(|v| v.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Default)]
struct DatasetArgs {
    /// COCO JSON annotation file.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// YOLO label directory (needs --image-root and a classes file).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory holding the images (default: the annotation file's directory).
    #[arg(long)]
    image_root: Option<PathBuf>,
    /// `alias = canonical` class-name map.
    #[arg(long)]
    aliases: Option<PathBuf>,
    /// Abort on malformed annotation records instead of skipping them.
    #[arg(long)]
    strict: bool,
    /// Restrict to one part of a seeded train/val/test split.
    #[arg(long, value_enum)]
    split: Option<SplitPart>,
    /// Train and val fractions of the split.
    #[arg(long, default_value = "0.7,0.15")]
    split_ratios: String,
    #[arg(long, default_value_t = 42)]
    split_seed: u64,
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| anyhow!("{flag}: cannot parse '{s}'")))
        .collect()
}

impl DatasetArgs {
    fn given(&self) -> bool {
        self.dataset.is_some() || self.labels.is_some()
    }

    fn check(&self) -> Result<()> {
        if self.dataset.is_some() && self.labels.is_some() {
            bail!("--dataset and --labels are mutually exclusive");
        }
        if !self.given() {
            bail!("a dataset is required (--dataset or --labels)");
        }
        if self.labels.is_some() && self.image_root.is_none() {
            bail!("--labels needs --image-root");
        }
        let r: Vec<f64> = parse_list("--split-ratios", &self.split_ratios)?;
        if r.len() != 2 || r.iter().any(|v| !(0.0..=1.0).contains(v)) || r[0] + r[1] > 1.0 {
            bail!("--split-ratios: expected two fractions summing to at most 1");
        }
        Ok(())
    }

    fn load(&self, cfg: &PipelineConfig) -> Result<Dataset> {
        self.check()?;
        let aliases = match &self.aliases {
            Some(p) => AliasMap::read(p)?,
            None => AliasMap::default(),
        };
        let classes = cfg.classes_file.as_deref().map(ClassMap::read).transpose()?;
        let (id, root, mut images, classes) = if let Some(path) = &self.dataset {
            let opts = CocoReadOptions {
                strict: self.strict,
                aliases,
                classes,
            };
            let coco = read_coco(path, &opts)?;
            for issue in &coco.issues {
                log::warn!("{}: {issue}", path.display());
            }
            let root = self
                .image_root
                .clone()
                .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
            (stem(path), root, coco.images, coco.classes)
        } else {
            let labels = self.labels.as_ref().expect("checked");
            let root = self.image_root.clone().expect("checked");
            let class_file = cfg
                .classes_file
                .as_ref()
                .ok_or_else(|| anyhow!("--labels needs --classes-file (or classes_file in the config)"))?;
            let metas = scan_images(&root)?;
            let yolo = formats::read_yolo(labels, &metas, class_file, self.strict)?;
            for issue in &yolo.issues {
                log::warn!("{}: {issue}", labels.display());
            }
            (stem(labels), root, yolo.images, yolo.classes)
        };
        let mut id = id;
        if let Some(part) = self.split {
            let r: Vec<f64> = parse_list("--split-ratios", &self.split_ratios)?;
            let ids: Vec<u64> = images.iter().map(|i| i.id).collect();
            let split = split_dataset(&ids, r[0], r[1], self.split_seed);
            let (keep, tag) = match part {
                SplitPart::Train => (split.train, "train"),
                SplitPart::Val => (split.val, "val"),
                SplitPart::Test => (split.test, "test"),
                SplitPart::All => (ids, "all"),
            };
            let keep: BTreeSet<u64> = keep.into_iter().collect();
            images.retain(|i| keep.contains(&i.id));
            id = format!("{id}-{tag}");
        }
        Ok(Dataset {
            id,
            root,
            images,
            classes,
        })
    }
}

#[cfg(feature = "imageio")]
fn scan_images(root: &Path) -> Result<Vec<formats::ImageMeta>> {
    Ok(formats::scan_image_dir(root)?)
}

#[cfg(not(feature = "imageio"))]
fn scan_images(_root: &Path) -> Result<Vec<formats::ImageMeta>> {
    bail!("reading YOLO datasets needs image support (build with the imageio feature)")
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

#[derive(Args, Default)]
struct RunFlags {
    /// Record zero for every timing so outputs are byte-reproducible.
    #[arg(long)]
    no_timing: bool,
}

fn run_options(cfg: &PipelineConfig, flags: &RunFlags, dataset: &Dataset) -> RunOptions {
    RunOptions {
        jobs: cfg.jobs,
        timing: !flags.no_timing,
        dataset_id: dataset.id.clone(),
    }
}

fn sim_params(cfg: &PipelineConfig, dataset: &Dataset) -> Result<SimDetectorParams> {
    let params = match &cfg.backend.sim {
        Some(p) => formats::read_json(p)?,
        None => SimDetectorParams {
            n_classes: dataset.classes.len().max(1) as u32,
            seed: cfg.seed,
            ..Default::default()
        },
    };
    params.validate()?;
    Ok(params)
}

fn make_backend(cfg: &PipelineConfig, dataset: &Dataset) -> Result<Box<dyn DetectorBackend>> {
    Ok(match cfg.backend.kind {
        BackendKind::Precomputed => {
            let dir = cfg
                .backend
                .dir
                .as_ref()
                .ok_or_else(|| anyhow!("the precomputed backend needs --backend-dir (backend.dir)"))?;
            if !dir.is_dir() {
                bail!("--backend-dir {}: not a directory", dir.display());
            }
            Box::new(PrecomputedBackend::new(dir))
        }
        BackendKind::Subprocess => {
            let cmd = cfg
                .backend
                .cmd
                .as_ref()
                .ok_or_else(|| anyhow!("the subprocess backend needs --backend-cmd (backend.cmd)"))?;
            Box::new(SubprocessBackend::spawn(cmd)?)
        }
        BackendKind::Sim => Box::new(SimulatedBackend::new(
            ground_truth_index(&dataset.images),
            sim_params(cfg, dataset)?,
        )),
    })
}

fn emit<V: Serialize + ?Sized>(out: Option<&Path>, value: &V) -> Result<()> {
    match out {
        Some(p) => write_json(p, value)?,
        None => io::stdout().write_all(&formats::to_json_bytes(value)?)?,
    }
    Ok(())
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_plan(a: PlanArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let dims: Vec<(u64, u32, u32)> = match (a.width, a.height, a.data.given()) {
        (Some(w), Some(h), false) => vec![(0, w, h)],
        (None, None, true) => a.data.load(&cfg)?.images.iter().map(|i| (i.id, i.width, i.height)).collect(),
        _ => bail!("plan needs either --width and --height or a dataset"),
    };
    let manifests = dims
        .into_iter()
        .map(|(id, w, h)| Ok(GridManifest::from_grid(id, &plan_grid(w, h, cfg.tile_size, cfg.stride)?)))
        .collect::<Result<Vec<_>>>()?;
    emit(a.out.as_deref(), &manifests)
}

#[derive(Args)]
struct SliceArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// yolo-txt or coco-json.
    #[arg(long, default_value = "yolo-txt")]
    format: String,
    /// Also write tile crops (needs the source images).
    #[arg(long)]
    crops: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_slice(a: SliceArgs) -> Result<()> {
    let format: LabelFormat = a.format.parse().map_err(|e: String| anyhow!("--format: {e}"))?;
    let cfg = a.cfg.load()?;
    let ds = a.data.load(&cfg)?;
    let params = SliceParams {
        tile_size: cfg.tile_size,
        stride: cfg.stride,
        min_visibility: cfg.min_visibility,
    };
    let (records, summary) = with_jobs(cfg.jobs, || slice_dataset(&ds.images, &params))?;
    let crops = a.crops.then(|| CropSource {
        image_root: ds.root.clone(),
    });
    let emitted = emit_training_labels(&records, &a.out, format, &ds.classes, crops.as_ref())?;
    let mut t = Table::new(["Split", "Images", "Tiles", "Positive tiles", "Background tiles", "Positive ratio"]);
    t.push(vec![
        ds.id.clone(),
        summary.images.to_string(),
        summary.tiles.to_string(),
        summary.positive_tiles.to_string(),
        summary.background_tiles.to_string(),
        cell(Some(summary.positive_ratio)),
    ]);
    #[derive(Serialize)]
    struct Out<'a> {
        dataset_id: &'a str,
        params: &'a SliceParams,
        summary: &'a tilemerge::slicing::SliceSummary,
        emitted: &'a tilemerge::slicing::EmitReport,
    }
    write_report(
        &a.out,
        "slice_summary",
        &Out {
            dataset_id: &ds.id,
            params: &params,
            summary: &summary,
            emitted: &emitted,
        },
        &t,
    )?;
    Ok(())
}

fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    pipeline::with_jobs(jobs, f)
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    flags: RunFlags,
    /// One of full-640, full-1280, tile-nms, tile-overlap-nms, tile-overlap-tatm.
    #[arg(long)]
    strategy: String,
    /// Also write the unmerged detections to `raw.jsonl`.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    out: PathBuf,
}

fn manifest_table(m: &pipeline::RunManifest) -> Table {
    let mut t = Table::new([
        "image_id", "units", "detections", "tiling_ms", "detection_ms", "merge_ms", "total_ms", "status",
    ]);
    for i in &m.images {
        t.push(vec![
            i.image_id.to_string(),
            i.units.to_string(),
            i.detections.to_string(),
            cell(Some(i.tiling_ms)),
            cell(Some(i.detection_ms)),
            cell(Some(i.merge_ms)),
            cell(Some(i.total_ms)),
            i.failed.clone().map_or_else(|| "ok".into(), |e| format!("failed: {e}")),
        ]);
    }
    t
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let kind: StrategyKind = a.strategy.parse().map_err(|e: String| anyhow!("--strategy: {e}"))?;
    let cfg = a.cfg.load()?;
    let strategy = Strategy::resolve(kind, &cfg)?;
    let ds = a.data.load(&cfg)?;
    let backend = make_backend(&cfg, &ds)?;
    let opts = run_options(&cfg, &a.flags, &ds);
    let raw = detect_dataset(&ds.image_refs(), &strategy, backend.as_ref(), opts.jobs);
    if a.raw {
        let records: Vec<DetectionRecord> = raw
            .iter()
            .flat_map(|r| {
                r.detections
                    .iter()
                    .map(|d| DetectionRecord::from_detection(r.image_id, kind.tag(), d, Some(&ds.classes)))
            })
            .collect();
        write_detections(&a.out.join("raw.jsonl"), &records)?;
    }
    let run = finish_run(raw, &strategy, backend.id(), &cfg, &opts);
    write_detections(&a.out.join("detections.jsonl"), &run.records(Some(&ds.classes)))?;
    write_report(&a.out, "manifest", &run.manifest, &manifest_table(&run.manifest))?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MergeMode {
    Nms,
    Tatm,
}

#[derive(Args)]
struct MergeArgs {
    /// Raw detections (interchange JSON lines).
    #[arg(long)]
    detections: PathBuf,
    #[arg(long, value_enum)]
    mode: MergeMode,
    /// Grid manifests from `plan`, used to rebuild tile grids for tatm.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_merge(a: MergeArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    if a.mode == MergeMode::Tatm && a.grid.is_none() && !a.data.given() {
        bail!("--mode tatm needs --grid or a dataset to rebuild the tile grids");
    }
    let records = read_detections(&a.detections)?;
    let mut grids: HashMap<u64, TileGrid> = HashMap::new();
    let mut classes = None;
    if let Some(p) = &a.grid {
        let manifests: Vec<GridManifest> = formats::read_json(p)?;
        for m in manifests {
            grids.insert(m.image_id, m.to_grid()?);
        }
    } else if a.data.given() {
        let ds = a.data.load(&cfg)?;
        for img in &ds.images {
            grids.insert(img.id, plan_grid(img.width, img.height, cfg.tile_size, cfg.stride)?);
        }
        classes = Some(ds.classes);
    }
    let tags: BTreeSet<&str> = records.iter().map(|r| r.strategy.as_str()).collect();
    let tag = if tags.len() == 1 { tags.into_iter().next().unwrap_or("") } else { "" };
    let mut by_image: BTreeMap<u64, Vec<Detection<f64>>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let d = r
            .to_detection()
            .with_context(|| format!("{} record {}", a.detections.display(), i + 1))?;
        by_image.entry(r.image_id).or_default().push(d);
    }
    let (kind, params) = match a.mode {
        MergeMode::Nms => (StrategyKind::TileOverlapNms, cfg.merge_params()),
        MergeMode::Tatm => (StrategyKind::TileOverlapTatm, cfg.merge_params()),
    };
    let mut out = Vec::new();
    for (image_id, dets) in by_image {
        let grid = grids.get(&image_id);
        if kind == StrategyKind::TileOverlapTatm && grid.is_none() {
            bail!("no tile grid for image {image_id}");
        }
        let merged = merge_image(dets, grid, kind, &params).with_context(|| format!("image {image_id}"))?;
        out.extend(
            merged
                .detections
                .iter()
                .map(|d| DetectionRecord::from_detection(image_id, tag, d, classes.as_ref())),
        );
    }
    let names: HashMap<u32, &str> = records.iter().map(|r| (r.class_id, r.class_name.as_str())).collect();
    for r in out.iter_mut().filter(|r| r.class_name.is_empty()) {
        r.class_name = names.get(&r.class_id).copied().unwrap_or_default().to_string();
    }
    write_detections(&a.out, &out)?;
    Ok(())
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    detections: PathBuf,
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Row label in the report.
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<()> {
    write_report(dir, "comparison", cmp, &cmp.main_table())?;
    write_report(dir, "small_defect_recall", cmp, &cmp.area_table())?;
    write_report(dir, "boundary_recall", cmp, &cmp.boundary_table())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let ds = a.data.load(&cfg)?;
    let records = read_detections(&a.detections)?;
    let ecfg = eval_config(&cfg);
    let gts = ds.ground_truth(&ecfg, &[])?;
    let preds = records
        .iter()
        .filter(|r| gts.images.contains(&r.image_id))
        .map(|r| Ok(Prediction::from_detection(r.image_id, &r.to_detection::<f64>()?)))
        .collect::<Result<Vec<_>>>()?;
    let label = a.label.unwrap_or_else(|| stem(&a.detections));
    let report: EvalReport<f64> = evaluate(&label, &preds, &gts, &ds.classes.indices(), &ecfg);
    write_comparison(
        &a.out,
        &Comparison {
            dataset_id: ds.id.clone(),
            reports: vec![report],
        },
    )
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    flags: RunFlags,
    /// Comma-separated strategy tags (default: all five).
    #[arg(long)]
    strategies: Option<String>,
    /// Also write each strategy's merged detections.
    #[arg(long)]
    save_detections: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let kinds: Vec<StrategyKind> = match &a.strategies {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse().map_err(|e: String| anyhow!("--strategies: {e}")))
            .collect::<Result<_>>()?,
        None => StrategyKind::ALL.to_vec(),
    };
    let cfg = a.cfg.load()?;
    for &k in &kinds {
        Strategy::resolve(k, &cfg)?;
    }
    let ds = a.data.load(&cfg)?;
    let backend = make_backend(&cfg, &ds)?;
    let (cmp, runs) = compare_strategies(&ds, &kinds, backend.as_ref(), &cfg, &run_options(&cfg, &a.flags, &ds))?;
    write_comparison(&a.out, &cmp)?;
    let manifests: Vec<&pipeline::RunManifest> = runs.iter().map(|r| &r.manifest).collect();
    write_json(&a.out.join("manifests.json"), &manifests)?;
    if a.save_detections {
        for run in &runs {
            let path = a.out.join("detections").join(format!("{}.jsonl", run.strategy.kind.tag()));
            write_detections(&path, &run.records(Some(&ds.classes)))?;
        }
    }
    Ok(())
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    flags: RunFlags,
    #[arg(long, default_value = "0,8,16,32")]
    taus: String,
    #[arg(long, default_value = "0.1,0.2,0.4")]
    lambdas: String,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let taus: Vec<f64> = parse_list("--taus", &a.taus)?;
    let lambdas: Vec<f64> = parse_list("--lambdas", &a.lambdas)?;
    if taus.is_empty() || lambdas.is_empty() {
        bail!("--taus and --lambdas need at least one value each");
    }
    let cfg = a.cfg.load()?;
    let ds = a.data.load(&cfg)?;
    let backend = make_backend(&cfg, &ds)?;
    let sweep = sweep_tatm_params(&ds, backend.as_ref(), &taus, &lambdas, &cfg, &run_options(&cfg, &a.flags, &ds))?;
    write_report(&a.out, "sweep", &sweep, &sweep.table())?;
    Ok(())
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn median(mut v: Vec<u32>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
    })
}

fn cmd_stats(a: StatsArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let ds = a.data.load(&cfg)?;
    let ecfg = eval_config(&cfg);
    let gts = ds.ground_truth(&ecfg, &[])?;
    let dims: BTreeMap<u64, (u32, u32)> = ds.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let areas = resolution_collapse_report(&gts, &dims, &cfg.input_full);
    let mut per_class: BTreeMap<String, usize> = BTreeMap::new();
    for g in &gts.boxes {
        let name = ds.classes.name(g.class_id).unwrap_or("?").to_string();
        *per_class.entry(name).or_default() += 1;
    }
    #[derive(Serialize)]
    struct Stats {
        dataset_id: String,
        images: usize,
        annotations: usize,
        median_width: Option<f64>,
        median_height: Option<f64>,
        per_class: BTreeMap<String, usize>,
        apparent_area: Vec<tilemerge::evaluation::AreaDistribution>,
    }
    let stats = Stats {
        dataset_id: ds.id.clone(),
        images: ds.images.len(),
        annotations: gts.len(),
        median_width: median(ds.images.iter().map(|i| i.width).collect()),
        median_height: median(ds.images.iter().map(|i| i.height).collect()),
        per_class,
        apparent_area: areas,
    };
    let mut t = Table::new(["Input", "Boxes", "Median area px²", "Below 64 px²", "Fraction below 64 px²"]);
    for d in &stats.apparent_area {
        t.push(vec![
            d.input_size.map_or_else(|| "native".into(), |k| k.to_string()),
            d.n_boxes.to_string(),
            cell(d.median_area),
            d.count_below_64.to_string(),
            cell(d.fraction_below_64),
        ]);
    }
    write_report(&a.out, "stats", &stats, &t)?;
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    /// Scenario JSON file.
    #[arg(long, conflicts_with = "suite")]
    scenario: Option<PathBuf>,
    /// Built-in suite: collapse, boundary or adversarial.
    #[arg(long)]
    suite: Option<String>,
    /// Simulated detector parameters to store next to the dataset.
    #[arg(long)]
    sim_params: Option<PathBuf>,
    /// Also render board images.
    #[arg(long)]
    render: bool,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let (scenario, params): (SynthScenario, SimDetectorParams) = match (&a.scenario, &a.suite) {
        (Some(p), None) => {
            let sc: SynthScenario = formats::read_json(p)?;
            let params = SimDetectorParams {
                n_classes: sc.classes.len().max(1) as u32,
                seed: sc.seed,
                ..Default::default()
            };
            (sc, params)
        }
        (None, Some(name)) => synth::suites::by_name(name).ok_or_else(|| {
            anyhow!("--suite: unknown suite '{name}' (expected one of {})", synth::suites::NAMES.join(", "))
        })?,
        _ => bail!("synth needs exactly one of --scenario or --suite"),
    };
    let params = match &a.sim_params {
        Some(p) => formats::read_json(p)?,
        None => params,
    };
    params.validate()?;
    let data = generate_scenario(&scenario)?;
    formats::write_coco(&a.out.join("annotations.json"), &data.images, &data.classes)?;
    write_json(&a.out.join("scenario.json"), &scenario)?;
    write_json(&a.out.join("sim_detector.json"), &params)?;
    if a.render {
        render_all(&data.images, &a.out)?;
    }
    Ok(())
}

#[cfg(feature = "imageio")]
fn render_all(images: &[tilemerge::slicing::AnnotatedImage<f64>], out: &Path) -> Result<()> {
    for img in images {
        let path = out.join(&img.file_name);
        synth::render_board(img)
            .save(&path)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

#[cfg(not(feature = "imageio"))]
fn render_all(_images: &[tilemerge::slicing::AnnotatedImage<f64>], _out: &Path) -> Result<()> {
    bail!("--render needs image support (build with the imageio feature)")
}

#[derive(Args)]
struct ServeSimArgs {
    #[command(flatten)]
    data: DatasetArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn cmd_serve_sim(a: ServeSimArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let ds = a.data.load(&cfg)?;
    let params = sim_params(&cfg, &ds)?;
    let by_path: HashMap<String, u64> = ds
        .images
        .iter()
        .map(|i| (Path::new(&i.file_name).file_name().map_or_else(|| i.file_name.clone(), |n| n.to_string_lossy().into_owned()), i.id))
        .collect();
    let backend = SimulatedBackend::new(ground_truth_index(&ds.images), params);
    backend.serve(&by_path, io::stdin().lock(), io::stdout().lock())?;
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    let res = match cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Slice(a) => cmd_slice(a),
        Command::Run(a) => cmd_run(a),
        Command::Merge(a) => cmd_merge(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Synth(a) => cmd_synth(a),
        Command::ServeSim(a) => cmd_serve_sim(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
