//! Synthetic boards with controlled defect sizes and boundary offsets, a
//! seeded simulated detector, and brute-force reference implementations used
//! by the tests.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formats::ClassMap;
use crate::geometry::{clip_box, BBox};
use crate::pipeline::RawDetection;
use crate::slicing::{AnnotatedImage, Annotation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("board {board}: {message}")]
    Board { board: usize, message: String },
    #[error("invalid simulator parameter {0}")]
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Where a hand-placed defect's centre goes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Center { x: f64, y: f64 },
    /// `delta` px from the line `axis = line`, at `along` on the other axis.
    Boundary { axis: Axis, line: f64, delta: f64, along: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub class_id: u32,
    pub w: f64,
    pub h: f64,
    pub at: Placement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RandomMode {
    #[default]
    Uniform,
    /// Keep every box at least `clearance` px away from multiples of `period`.
    AvoidGrid { period: u32, clearance: f64 },
    /// Centre within `max_delta` px of a random interior multiple of `period`.
    NearGrid { period: u32, max_delta: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomDefects {
    pub count: u32,
    /// Side length range `[min, max]`, drawn independently per axis.
    pub size: [f64; 2],
    pub classes: Vec<u32>,
    #[serde(default)]
    pub margin: f64,
    #[serde(default)]
    pub mode: RandomMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardSpec {
    pub width: u32,
    pub height: u32,
    #[serde(default = "one")]
    pub copies: u32,
    #[serde(default)]
    pub defects: Vec<DefectSpec>,
    #[serde(default)]
    pub random: Vec<RandomDefects>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub name: String,
    pub seed: u64,
    pub classes: Vec<String>,
    pub boards: Vec<BoardSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub images: Vec<AnnotatedImage<f64>>,
    pub classes: ClassMap,
}

/// SplitMix64 step, used to derive independent per-image and per-unit seeds.
pub fn mix(seed: u64, v: u64) -> u64 {
    let mut z = seed ^ v.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn place(center: (f64, f64), w: f64, h: f64) -> Option<BBox<f64>> {
    BBox::from_center(center.0, center.1, w, h).ok()
}

fn clear_of_grid(b: &BBox<f64>, period: f64, clearance: f64) -> bool {
    // first interior line at or after the cleared span's start
    let ok = |lo: f64, hi: f64| ((lo - clearance) / period).ceil().max(1.0) * period > hi + clearance;
    ok(b.x1(), b.x2()) && ok(b.y1(), b.y2())
}

fn random_box(rng: &mut ChaCha8Rng, spec: &RandomDefects, w: u32, h: u32) -> Option<BBox<f64>> {
    let (iw, ih) = (w as f64, h as f64);
    for _ in 0..1000 {
        let [lo, hi] = spec.size;
        let bw = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let bh = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (xmin, xmax) = (spec.margin + bw / 2.0, iw - spec.margin - bw / 2.0);
        let (ymin, ymax) = (spec.margin + bh / 2.0, ih - spec.margin - bh / 2.0);
        if xmax < xmin || ymax < ymin {
            return None;
        }
        let mut c = (rng.random_range(xmin..=xmax), rng.random_range(ymin..=ymax));
        match spec.mode {
            RandomMode::Uniform => {}
            RandomMode::AvoidGrid { period, clearance } => {
                let b = place(c, bw, bh)?;
                if !clear_of_grid(&b, period as f64, clearance) {
                    continue;
                }
            }
            RandomMode::NearGrid { period, max_delta } => {
                let p = period as f64;
                let axis_x = rng.random_bool(0.5);
                let dim = if axis_x { iw } else { ih };
                let lines = ((dim - 1.0) / p).floor() as u32;
                if lines == 0 {
                    return None;
                }
                let line = p * rng.random_range(1..=lines) as f64;
                let v = line + rng.random_range(-max_delta..=max_delta);
                if axis_x {
                    c.0 = v;
                } else {
                    c.1 = v;
                }
                if c.0 < xmin || c.0 > xmax || c.1 < ymin || c.1 > ymax {
                    continue;
                }
            }
        }
        return place(c, bw, bh);
    }
    None
}

/// Builds the boards. Image `i` (0-based over all copies) gets id `i + 1` and
/// its own RNG stream derived from the scenario seed and `i`.
pub fn generate_scenario(spec: &SynthScenario) -> Result<SynthDataset, SynthError> {
    let mut images = Vec::new();
    let n_classes = spec.classes.len() as u32;
    for (board, b) in spec.boards.iter().enumerate() {
        let err = |message: String| SynthError::Board { board, message };
        if b.width == 0 || b.height == 0 {
            return Err(err("zero-sized board".into()));
        }
        let rect = BBox::new(0.0, 0.0, b.width as f64, b.height as f64).expect("board rect");
        for _ in 0..b.copies {
            let index = images.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index));
            let mut annotations = Vec::new();
            for d in &b.defects {
                let center = match d.at {
                    Placement::Center { x, y } => (x, y),
                    Placement::Boundary { axis: Axis::X, line, delta, along } => (line + delta, along),
                    Placement::Boundary { axis: Axis::Y, line, delta, along } => (along, line + delta),
                };
                let bbox = place(center, d.w, d.h).ok_or_else(|| err(format!("defect size {}x{} is invalid", d.w, d.h)))?;
                if !rect.contains(&bbox) {
                    return Err(err(format!("defect at {center:?} leaves the board")));
                }
                if d.class_id >= n_classes {
                    return Err(err(format!("class {} is not declared", d.class_id)));
                }
                annotations.push(Annotation { class_id: d.class_id, bbox });
            }
            for r in &b.random {
                if r.classes.is_empty() || r.classes.iter().any(|&c| c >= n_classes) {
                    return Err(err("random defects need declared classes".into()));
                }
                for _ in 0..r.count {
                    let bbox = random_box(&mut rng, r, b.width, b.height)
                        .ok_or_else(|| err("could not place a random defect under the given constraints".into()))?;
                    let class_id = r.classes[rng.random_range(0..r.classes.len())];
                    annotations.push(Annotation { class_id, bbox });
                }
            }
            images.push(AnnotatedImage {
                id: index + 1,
                file_name: format!("{}_{:04}.png", spec.name, index + 1),
                width: b.width,
                height: b.height,
                annotations,
            });
        }
    }
    Ok(SynthDataset {
        images,
        classes: ClassMap::from_names(spec.classes.iter().cloned()),
    })
}

/// Flat grey board with each defect filled in a class-dependent shade.
#[cfg(feature = "imageio")]
pub fn render_board(img: &AnnotatedImage<f64>) -> image::RgbImage {
    let mut out = image::RgbImage::from_pixel(img.width, img.height, image::Rgb([40, 90, 40]));
    for a in &img.annotations {
        let shade = 200u8.saturating_sub((a.class_id as u8).wrapping_mul(37));
        let (x1, y1) = (a.bbox.x1().floor() as u32, a.bbox.y1().floor() as u32);
        let (x2, y2) = (
            (a.bbox.x2().ceil() as u32).min(img.width),
            (a.bbox.y2().ceil() as u32).min(img.height),
        );
        for y in y1..y2 {
            for x in x1..x2 {
                out.put_pixel(x, y, image::Rgb([shade, shade, 255 - shade]));
            }
        }
    }
    out
}

/// A detection the simulator emits regardless of ground truth, in global
/// pixels. It appears in every work unit that fully contains it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedDetection {
    pub image_id: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDetectorParams {
    /// Base confidence per class id; classes past the end use `default_conf`.
    pub base_conf: Vec<f64>,
    pub default_conf: f64,
    /// Piecewise-linear confidence multiplier over visible fraction, as
    /// `(fraction, multiplier)` knots sorted by fraction.
    pub curve: Vec<(f64, f64)>,
    /// No detection below this visible fraction.
    pub min_visible: f64,
    /// Minimum apparent area (px² at the network input) for a detection.
    pub area_floor: f64,
    /// Mean number of false positives per work unit.
    pub fp_rate: f64,
    pub fp_size: [f64; 2],
    pub fp_score: [f64; 2],
    pub n_classes: u32,
    /// Uniform localization noise, px at native resolution.
    pub jitter: f64,
    pub injected: Vec<InjectedDetection>,
    pub seed: u64,
}

impl Default for SimDetectorParams {
    fn default() -> Self {
        Self {
            base_conf: Vec::new(),
            default_conf: 0.9,
            curve: vec![(0.0, 0.0), (1.0, 1.0)],
            min_visible: 0.1,
            area_floor: 0.0,
            fp_rate: 0.0,
            fp_size: [16.0, 48.0],
            fp_score: [0.25, 0.5],
            n_classes: 1,
            jitter: 0.0,
            injected: Vec::new(),
            seed: 42,
        }
    }
}

impl SimDetectorParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        let p = |m: &str| Err(SynthError::Param(m.to_string()));
        if self.curve.is_empty() {
            return p("curve needs at least one knot");
        }
        if self.curve.windows(2).any(|w| w[1].0 < w[0].0) {
            return p("curve knots must be sorted by visible fraction");
        }
        if self.curve.iter().any(|k| !(0.0..=1.0).contains(&k.1)) {
            return p("curve multipliers must lie in [0, 1]");
        }
        if self.base_conf.iter().chain([&self.default_conf]).any(|c| !(0.0..=1.0).contains(c)) {
            return p("base confidences must lie in [0, 1]");
        }
        if !(self.fp_rate >= 0.0 && self.fp_rate.is_finite()) {
            return p("fp_rate must be >= 0");
        }
        if self.fp_size[0] <= 0.0 || self.fp_size[1] < self.fp_size[0] {
            return p("fp_size must be a positive [min, max] range");
        }
        if !(0.0..=1.0).contains(&self.fp_score[0]) || !(self.fp_score[0]..=1.0).contains(&self.fp_score[1]) {
            return p("fp_score must be a [min, max] range inside [0, 1]");
        }
        if self.jitter < 0.0 {
            return p("jitter must be >= 0");
        }
        Ok(())
    }

    pub fn base(&self, class_id: u32) -> f64 {
        self.base_conf.get(class_id as usize).copied().unwrap_or(self.default_conf)
    }

    /// Multiplier at visible fraction `v`, clamped to the end knots.
    pub fn multiplier(&self, v: f64) -> f64 {
        if v < self.min_visible {
            return 0.0;
        }
        let k = &self.curve;
        if v <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if v <= x1 {
                return if x1 > x0 { y0 + (y1 - y0) * (v - x0) / (x1 - x0) } else { y1 };
            }
        }
        k[k.len() - 1].1
    }
}

/// Image region seen by the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimUnit {
    pub image_id: u64,
    /// `[x0, y0, w, h]` in image pixels.
    pub region: [u32; 4],
    pub target_input: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub detections: Vec<RawDetection>,
    /// Set when the boxes are in resized-input pixels.
    pub input_scale: Option<[f64; 2]>,
}

/// Runs the simulated detector on one region. Boxes are region-local; when
/// the region is resized (`target_input` differs from its longest side) they
/// are reported on the integer pixel grid of the resized input together with
/// the scale.
pub fn simulate_detector(unit: &SimUnit, gts: &[Annotation<f64>], params: &SimDetectorParams) -> SimOutput {
    let [x0, y0, rw, rh] = unit.region;
    let (ox, oy, fw, fh) = (x0 as f64, y0 as f64, rw as f64, rh as f64);
    let region = BBox::new(ox, oy, ox + fw, oy + fh).expect("region rect");
    let s = unit.target_input as f64 / rw.max(rh).max(1) as f64;
    let resized = unit.target_input != rw.max(rh);
    let mut seed = params.seed;
    for v in [unit.image_id, x0 as u64, y0 as u64, rw as u64, rh as u64, unit.target_input as u64] {
        seed = mix(seed, v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut out = Vec::new();
    let mut emit = |rng: &mut ChaCha8Rng, b: BBox<f64>, score: f64, class_id: u32, jitter: f64| {
        let mut c = [b.x1() - ox, b.y1() - oy, b.x2() - ox, b.y2() - oy];
        if jitter > 0.0 {
            for v in &mut c {
                *v += rng.random_range(-jitter..=jitter);
            }
        }
        let mut c = [c[0].clamp(0.0, fw), c[1].clamp(0.0, fh), c[2].clamp(0.0, fw), c[3].clamp(0.0, fh)];
        if resized {
            c = c.map(|v| (v * s).round());
        }
        if c[2] > c[0] && c[3] > c[1] {
            out.push(RawDetection {
                bbox: c,
                score: score.clamp(0.0, 1.0),
                class_id,
            });
        }
    };

    for g in gts {
        let (clipped, vf) = clip_box(&g.bbox, &region);
        let Some(clipped) = clipped else { continue };
        let m = params.multiplier(vf);
        if m <= 0.0 || clipped.area() * s * s < params.area_floor {
            continue;
        }
        emit(&mut rng, clipped, params.base(g.class_id) * m, g.class_id, params.jitter);
    }
    if params.fp_rate > 0.0 {
        let n = Poisson::new(params.fp_rate).map_or(0.0, |p| p.sample(&mut rng)) as u32;
        for _ in 0..n {
            let [lo, hi] = params.fp_size;
            let bw = rng.random_range(lo..=hi).min(fw);
            let bh = rng.random_range(lo..=hi).min(fh);
            let x = ox + rng.random_range(0.0..=(fw - bw));
            let y = oy + rng.random_range(0.0..=(fh - bh));
            let class_id = rng.random_range(0..params.n_classes.max(1));
            let score = rng.random_range(params.fp_score[0]..=params.fp_score[1]);
            if let Ok(b) = BBox::new(x, y, x + bw, y + bh) {
                emit(&mut rng, b, score, class_id, 0.0);
            }
        }
    }
    for inj in params.injected.iter().filter(|i| i.image_id == unit.image_id) {
        if let Ok(b) = BBox::new(inj.bbox[0], inj.bbox[1], inj.bbox[2], inj.bbox[3]) {
            if region.contains(&b) {
                emit(&mut rng, b, inj.score, inj.class_id, 0.0);
            }
        }
    }
    SimOutput {
        detections: out,
        input_scale: resized.then_some([s, s]),
    }
}

/// Ground truth grouped by image id, as the simulator consumes it.
pub fn ground_truth_index(images: &[AnnotatedImage<f64>]) -> BTreeMap<u64, Vec<Annotation<f64>>> {
    images.iter().map(|i| (i.id, i.annotations.clone())).collect()
}

/// The standard synthetic suites.
pub mod suites {
    use super::*;

    pub const NAMES: [&str; 3] = ["collapse", "boundary", "adversarial"];

    pub fn by_name(name: &str) -> Option<(SynthScenario, SimDetectorParams)> {
        match name {
            "collapse" => Some(resolution_collapse()),
            "boundary" => Some(boundary_straddle()),
            "adversarial" => Some(adversarial_split()),
            _ => None,
        }
    }

    /// Large boards with 40 px defects kept off the 640 px grid lines. At
    /// 640 px full-image input they shrink to 25 px², below the detector's
    /// 64 px² floor.
    pub fn resolution_collapse() -> (SynthScenario, SimDetectorParams) {
        let scenario = SynthScenario {
            name: "collapse".into(),
            seed: 42,
            classes: vec!["open".into(), "short".into()],
            boards: vec![BoardSpec {
                width: 5120,
                height: 5120,
                copies: 3,
                defects: Vec::new(),
                random: vec![RandomDefects {
                    count: 40,
                    size: [40.0, 40.0],
                    classes: vec![0, 1],
                    margin: 8.0,
                    mode: RandomMode::AvoidGrid {
                        period: 640,
                        clearance: 8.0,
                    },
                }],
            }],
        };
        let params = SimDetectorParams {
            n_classes: 2,
            area_floor: 64.0,
            ..Default::default()
        };
        (scenario, params)
    }

    /// Defects centred within 12 px of the 640 px grid lines plus a set of
    /// interior ones. Confidence falls steeply with the visible fraction, so
    /// cut-off pieces score low.
    pub fn boundary_straddle() -> (SynthScenario, SimDetectorParams) {
        let scenario = SynthScenario {
            name: "boundary".into(),
            seed: 42,
            classes: vec!["open".into(), "short".into()],
            boards: vec![BoardSpec {
                width: 2560,
                height: 2560,
                copies: 4,
                defects: Vec::new(),
                random: vec![
                    RandomDefects {
                        count: 24,
                        size: [40.0, 56.0],
                        classes: vec![0, 1],
                        margin: 8.0,
                        mode: RandomMode::NearGrid {
                            period: 640,
                            max_delta: 12.0,
                        },
                    },
                    RandomDefects {
                        count: 16,
                        size: [40.0, 56.0],
                        classes: vec![0, 1],
                        margin: 8.0,
                        mode: RandomMode::AvoidGrid {
                            period: 640,
                            clearance: 40.0,
                        },
                    },
                ],
            }],
        };
        let params = SimDetectorParams {
            n_classes: 2,
            curve: vec![(0.0, 0.0), (0.7, 0.2), (1.0, 1.0)],
            fp_rate: 0.05,
            jitter: 1.0,
            ..Default::default()
        };
        (scenario, params)
    }

    /// One wide defect cut by both overlapping tiles, so each tile sees about
    /// three quarters of it at 0.55, and an injected 0.60 false positive
    /// between the halves that is not near any tile edge.
    pub fn adversarial_split() -> (SynthScenario, SimDetectorParams) {
        let scenario = SynthScenario {
            name: "adversarial".into(),
            seed: 42,
            classes: vec!["open".into()],
            boards: vec![BoardSpec {
                width: 1152,
                height: 640,
                copies: 1,
                defects: vec![DefectSpec {
                    class_id: 0,
                    w: 250.0,
                    h: 100.0,
                    at: Placement::Center { x: 575.0, y: 250.0 },
                }],
                random: Vec::new(),
            }],
        };
        let params = SimDetectorParams {
            default_conf: 1.0,
            curve: vec![(0.0, 0.55), (0.999, 0.55), (1.0, 0.95)],
            injected: vec![InjectedDetection {
                image_id: 1,
                bbox: [530.0, 200.0, 620.0, 300.0],
                class_id: 0,
                score: 0.6,
            }],
            ..Default::default()
        };
        (scenario, params)
    }
}

/// Exhaustive reference implementations, written independently of the main
/// code paths.
pub mod oracle {
    use std::cmp::Ordering;

    use crate::geometry::{iou, BBox};

    /// Candidate for [`oracle_nms`].
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Candidate {
        pub class_id: u32,
        pub score: f64,
        pub bbox: BBox<f64>,
    }

    fn key(c: &Candidate) -> (f64, f64, [f64; 4], u32) {
        (-c.score, -c.bbox.area(), c.bbox.to_array(), c.class_id)
    }

    /// Whether `a` (at input position `i`) outranks `b` (at `j`).
    fn beats(a: &Candidate, i: usize, b: &Candidate, j: usize) -> bool {
        let (ka, kb) = (key(a), key(b));
        let ord = ka
            .0
            .partial_cmp(&kb.0)
            .unwrap_or(Ordering::Equal)
            .then(ka.1.partial_cmp(&kb.1).unwrap_or(Ordering::Equal))
            .then_with(|| {
                (0..4)
                    .map(|k| ka.2[k].partial_cmp(&kb.2[k]).unwrap_or(Ordering::Equal))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
            .then(ka.3.cmp(&kb.3))
            .then(i.cmp(&j));
        ord == Ordering::Less
    }

    /// Greedy NMS defined directly: a candidate survives iff no surviving
    /// same-class candidate that outranks it overlaps it by more than `thresh`.
    /// Returns the input indices of the survivors, ascending.
    pub fn oracle_nms(cands: &[Candidate], thresh: f64) -> Vec<usize> {
        fn survives(i: usize, cands: &[Candidate], thresh: f64, memo: &mut Vec<Option<bool>>) -> bool {
            if let Some(v) = memo[i] {
                return v;
            }
            let mut alive = true;
            for j in 0..cands.len() {
                if j != i
                    && cands[j].class_id == cands[i].class_id
                    && beats(&cands[j], j, &cands[i], i)
                    && iou(&cands[j].bbox, &cands[i].bbox) > thresh
                    && survives(j, cands, thresh, memo)
                {
                    alive = false;
                    break;
                }
            }
            memo[i] = Some(alive);
            alive
        }
        let mut memo = vec![None; cands.len()];
        (0..cands.len()).filter(|&i| survives(i, cands, thresh, &mut memo)).collect()
    }

    /// AP as the sum, over true positives in rank order, of `1/n_gt` times
    /// the best precision reached at that rank or any later one. Ties in
    /// confidence keep input order. Returns 0 when `n_gt` is 0.
    pub fn oracle_ap(ranked: &[(f64, bool)], n_gt: usize) -> f64 {
        if n_gt == 0 {
            return 0.0;
        }
        let n = ranked.len();
        let pos = |i: usize| {
            (0..n)
                .filter(|&j| ranked[j].0 > ranked[i].0 || (ranked[j].0 == ranked[i].0 && j < i))
                .count()
        };
        let mut order = vec![0usize; n];
        for i in 0..n {
            order[pos(i)] = i;
        }
        let precision_at = |k: usize| {
            let tp = order[..=k].iter().filter(|&&i| ranked[i].1).count();
            tp as f64 / (k + 1) as f64
        };
        let mut ap = 0.0;
        for k in 0..n {
            if ranked[order[k]].1 {
                let best = (k..n).map(precision_at).fold(0.0, f64::max);
                ap += best / n_gt as f64;
            }
        }
        ap
    }

    /// Greedy matching over flat prediction and ground-truth lists, each
    /// entry `(image_id, class_id, box)`; predictions carry a confidence.
    /// Returns the matched ground-truth index per prediction.
    pub fn oracle_match(
        preds: &[(u64, u32, BBox<f64>, f64)],
        gts: &[(u64, u32, BBox<f64>)],
        thresh: f64,
    ) -> Vec<Option<usize>> {
        let mut result = vec![None; preds.len()];
        let mut taken = vec![false; gts.len()];
        let mut done = vec![false; preds.len()];
        for _ in 0..preds.len() {
            // next prediction: highest confidence, then lowest index
            let mut next: Option<usize> = None;
            for i in 0..preds.len() {
                if !done[i] && next.is_none_or(|n| preds[i].3 > preds[n].3) {
                    next = Some(i);
                }
            }
            let i = next.expect("remaining prediction");
            done[i] = true;
            let p = &preds[i];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.0 != p.0 || g.1 != p.1 {
                    continue;
                }
                let v = iou(&p.2, &g.2);
                if v >= thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                result[i] = Some(j);
            }
        }
        result
    }
}
