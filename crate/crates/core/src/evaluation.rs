//! Detection metrics: greedy matching, all-points AP and mAP@50, operating
//! point precision/recall, recall binned by apparent area and by distance to
//! the nearest tile boundary, and the apparent-area distribution summary.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{apparent_area, iou, BBox};
use crate::merging::Detection;
use crate::scalar::Scalar;
use crate::tiling::{nearest_grid_boundary_distance, plan_grid, TileGrid, TilingError};

/// A ground-truth box with the derived quantities the binned metrics use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GtBox<T> {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BBox<T>,
    pub area_native: T,
    /// Area after resizing the image so its longest side is the input size.
    pub apparent_area: T,
    pub center: (T, T),
    /// Distance of the centre to the nearest interior boundary of the
    /// reference grid; `None` when that grid has no interior boundary.
    pub boundary_distance: Option<T>,
}

/// Grid against which boundary distances are measured. Defaults to the
/// non-overlapping 640 px grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceGrid {
    pub tile_size: u32,
    pub stride: u32,
}

impl Default for ReferenceGrid {
    fn default() -> Self {
        Self {
            tile_size: 640,
            stride: 640,
        }
    }
}

impl ReferenceGrid {
    pub fn plan(&self, w: u32, h: u32) -> Result<TileGrid, TilingError> {
        plan_grid(w, h, self.tile_size, self.stride)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct GroundTruthSet<T> {
    pub input_size: u32,
    pub reference: ReferenceGrid,
    pub boxes: Vec<GtBox<T>>,
    pub images: BTreeSet<u64>,
}

impl<T: Scalar> GroundTruthSet<T> {
    pub fn new(input_size: u32, reference: ReferenceGrid) -> Self {
        Self {
            input_size,
            reference,
            boxes: Vec::new(),
            images: BTreeSet::new(),
        }
    }

    /// Registers an image (possibly without boxes) and its ground truth.
    pub fn add_image<I>(&mut self, image_id: u64, w: u32, h: u32, boxes: I) -> Result<(), TilingError>
    where
        I: IntoIterator<Item = (u32, BBox<T>)>,
    {
        let grid = self.reference.plan(w, h)?;
        self.images.insert(image_id);
        for (class_id, bbox) in boxes {
            let center = bbox.center();
            self.boxes.push(GtBox {
                image_id,
                class_id,
                bbox,
                area_native: bbox.area(),
                apparent_area: apparent_area(&bbox, w, h, self.input_size),
                center,
                boundary_distance: nearest_grid_boundary_distance(center, &grid),
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.boxes.iter().map(|g| g.class_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Prediction<T> {
    pub image_id: u64,
    pub class_id: u32,
    pub bbox: BBox<T>,
    pub confidence: T,
}

impl<T: Scalar> Prediction<T> {
    /// Uses the detection's reported confidence (the adjusted score when
    /// present).
    pub fn from_detection(image_id: u64, det: &Detection<T>) -> Self {
        Self {
            image_id,
            class_id: det.class_id,
            bbox: det.box_global,
            confidence: det.confidence(),
        }
    }
}

fn desc<T: Scalar>(a: T, b: T) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy one-to-one matching of same-image, same-class predictions.
///
/// `preds` must already be sorted by confidence, highest first. Each
/// prediction takes the unmatched ground truth with the highest IoU among
/// those reaching `iou_thresh` (lowest index on ties). Returns the matched
/// ground-truth index per prediction.
pub fn greedy_match<T: Scalar>(preds: &[BBox<T>], gts: &[BBox<T>], iou_thresh: T) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, T)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let v = iou(p, g);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| {
                taken[j] = true;
                j
            })
        })
        .collect()
}

/// Result of matching a whole prediction set against a ground-truth set.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Matched index into `GroundTruthSet::boxes`, per prediction.
    pub pred_match: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

impl Matching {
    pub fn true_positives(&self) -> usize {
        self.pred_match.iter().filter(|m| m.is_some()).count()
    }
}

/// Runs [`greedy_match`] for every (image, class) group.
pub fn match_all<T: Scalar>(preds: &[Prediction<T>], gts: &GroundTruthSet<T>, iou_thresh: T) -> Matching {
    let mut pred_groups: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        pred_groups.entry((p.image_id, p.class_id)).or_default().push(i);
    }
    let mut gt_groups: BTreeMap<(u64, u32), Vec<usize>> = BTreeMap::new();
    for (j, g) in gts.boxes.iter().enumerate() {
        gt_groups.entry((g.image_id, g.class_id)).or_default().push(j);
    }
    let mut pred_match = vec![None; preds.len()];
    let mut gt_matched = vec![false; gts.boxes.len()];
    for (key, mut idx) in pred_groups {
        let Some(gidx) = gt_groups.get(&key) else {
            continue;
        };
        idx.sort_by(|&a, &b| desc(preds[a].confidence, preds[b].confidence));
        let pboxes: Vec<BBox<T>> = idx.iter().map(|&i| preds[i].bbox).collect();
        let gboxes: Vec<BBox<T>> = gidx.iter().map(|&j| gts.boxes[j].bbox).collect();
        for (k, m) in greedy_match(&pboxes, &gboxes, iou_thresh).into_iter().enumerate() {
            if let Some(local) = m {
                let global = gidx[local];
                pred_match[idx[k]] = Some(global);
                gt_matched[global] = true;
            }
        }
    }
    Matching {
        pred_match,
        gt_matched,
    }
}

/// Area under the monotone precision envelope of the ranked list
/// `(confidence, is_true_positive)`; ties keep input order. `None` when there
/// is no ground truth.
pub fn average_precision<T: Scalar>(ranked: &[(T, bool)], n_gt: usize) -> Option<T> {
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| desc(ranked[a].0, ranked[b].0));

    let n_gt_t = T::of(n_gt as f64);
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        recall.push(T::of(tp as f64) / n_gt_t);
        precision.push(T::of(tp as f64) / T::of((k + 1) as f64));
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = T::zero();
    let mut prev_recall = T::zero();
    for (r, p) in recall.into_iter().zip(precision) {
        ap = ap + (r - prev_recall) * p;
        prev_recall = r;
    }
    Some(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp<T> {
    pub class_id: u32,
    pub n_gt: usize,
    pub n_pred: usize,
    /// `None` for classes without ground truth.
    pub ap: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult<T> {
    pub per_class: Vec<ClassAp<T>>,
    /// Mean over classes with at least one ground truth.
    pub map: Option<T>,
}

/// mAP at `iou_thresh` over `classes` (plus any class present in the data).
pub fn mean_average_precision<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    classes: &[u32],
    iou_thresh: T,
) -> MapResult<T> {
    let matching = match_all(preds, gts, iou_thresh);
    let mut all: BTreeSet<u32> = classes.iter().copied().collect();
    all.extend(gts.classes());
    all.extend(preds.iter().map(|p| p.class_id));

    let per_class: Vec<ClassAp<T>> = all
        .into_iter()
        .map(|c| {
            let ranked: Vec<(T, bool)> = preds
                .iter()
                .zip(&matching.pred_match)
                .filter(|(p, _)| p.class_id == c)
                .map(|(p, m)| (p.confidence, m.is_some()))
                .collect();
            let n_gt = gts.boxes.iter().filter(|g| g.class_id == c).count();
            ClassAp {
                class_id: c,
                n_gt,
                n_pred: ranked.len(),
                ap: average_precision(&ranked, n_gt),
            }
        })
        .collect();
    let aps: Vec<T> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().copied().sum::<T>() / T::of(aps.len() as f64));
    MapResult { per_class, map }
}

/// mAP@50.
pub fn map50<T: Scalar>(preds: &[Prediction<T>], gts: &GroundTruthSet<T>, classes: &[u32]) -> MapResult<T> {
    mean_average_precision(preds, gts, classes, T::of(0.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall<T> {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: T,
    pub recall: T,
}

fn ratio<T: Scalar>(num: usize, den: usize, vacuous: T) -> T {
    if den == 0 {
        vacuous
    } else {
        T::of(num as f64) / T::of(den as f64)
    }
}

fn above_conf<T: Scalar>(preds: &[Prediction<T>], conf: T) -> Vec<Prediction<T>> {
    preds.iter().filter(|p| p.confidence >= conf).copied().collect()
}

/// Global precision and recall over all classes at one confidence threshold.
///
/// Precision is 1 with no predictions and no ground truth, 0 with no
/// predictions but some ground truth; recall is 1 without ground truth.
pub fn precision_recall_at_conf<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    conf: T,
    iou_thresh: T,
) -> PrecisionRecall<T> {
    let kept = above_conf(preds, conf);
    let m = match_all(&kept, gts, iou_thresh);
    let tp = m.true_positives();
    let fp = kept.len() - tp;
    let fn_ = gts.len() - tp;
    let precision = if kept.is_empty() {
        if gts.is_empty() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        ratio(tp, kept.len(), T::one())
    };
    PrecisionRecall {
        tp,
        fp,
        fn_,
        precision,
        recall: ratio(tp, gts.len(), T::one()),
    }
}

/// Half-open interval `[lo, hi)`; `hi = None` is unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: Option<f64>,
}

impl Bin {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && self.hi.is_none_or(|h| v < h)
    }

    pub fn label(&self, unit: &str) -> String {
        match self.hi {
            Some(h) if self.lo == 0.0 => format!("< {h} {unit}"),
            Some(h) => format!("{}-{h} {unit}", self.lo),
            None => format!("> {} {unit}", self.lo),
        }
    }
}

/// Bins `[0, e0), [e0, e1), ..., [e_last, inf)` from sorted edges.
pub fn bins_from_edges(edges: &[f64]) -> Vec<Bin> {
    let mut bins = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0.0;
    for &e in edges {
        if e > lo {
            bins.push(Bin { lo, hi: Some(e) });
            lo = e;
        }
    }
    bins.push(Bin { lo, hi: None });
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecall<T> {
    pub label: String,
    pub bin: Bin,
    pub n_gt: usize,
    pub n_recalled: usize,
    /// `None` for an empty bin.
    pub recall: Option<T>,
}

/// Recall per bin of `key(gt)`; a ground truth counts as recalled when a
/// prediction at or above `conf` matches it. A `None` key falls in the
/// unbounded last bin.
pub fn recall_by_bins<T, F>(
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    conf: T,
    iou_thresh: T,
    bins: &[Bin],
    unit: &str,
    key: F,
) -> Vec<BinRecall<T>>
where
    T: Scalar,
    F: Fn(&GtBox<T>) -> Option<T>,
{
    let kept = above_conf(preds, conf);
    let m = match_all(&kept, gts, iou_thresh);
    let mut counts = vec![(0usize, 0usize); bins.len()];
    for (g, &hit) in gts.boxes.iter().zip(&m.gt_matched) {
        let v = key(g).map_or(f64::INFINITY, |v| v.as_f64());
        let slot = bins
            .iter()
            .position(|b| b.contains(v))
            .unwrap_or(bins.len() - 1);
        counts[slot].0 += 1;
        if hit {
            counts[slot].1 += 1;
        }
    }
    bins.iter()
        .zip(counts)
        .map(|(b, (n, r))| BinRecall {
            label: b.label(unit),
            bin: *b,
            n_gt: n,
            n_recalled: r,
            recall: (n > 0).then(|| ratio(r, n, T::one())),
        })
        .collect()
}

/// Recall by apparent area (px² at the set's input size).
pub fn recall_by_area_bin<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    conf: T,
    iou_thresh: T,
    edges: &[f64],
) -> Vec<BinRecall<T>> {
    recall_by_bins(preds, gts, conf, iou_thresh, &bins_from_edges(edges), "px²", |g| {
        Some(g.apparent_area)
    })
}

/// Recall by distance of the ground-truth centre to the reference grid's
/// nearest interior boundary.
pub fn recall_by_boundary_bin<T: Scalar>(
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    conf: T,
    iou_thresh: T,
    edges: &[f64],
) -> Vec<BinRecall<T>> {
    recall_by_bins(preds, gts, conf, iou_thresh, &bins_from_edges(edges), "px", |g| {
        g.boundary_distance
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaDistribution {
    /// `None` for native resolution.
    pub input_size: Option<u32>,
    pub n_boxes: usize,
    /// `(bin label, count)`.
    pub histogram: Vec<(String, usize)>,
    /// `(threshold px², fraction of boxes strictly below)`.
    pub cdf: Vec<(f64, f64)>,
    pub median_area: Option<f64>,
    pub fraction_below_64: Option<f64>,
    pub count_below_64: usize,
}

pub const COLLAPSE_THRESHOLDS: [f64; 3] = [16.0, 64.0, 256.0];
const HISTOGRAM_EDGES: [f64; 6] = [16.0, 64.0, 256.0, 1024.0, 4096.0, 16384.0];

fn summarize_areas(input_size: Option<u32>, mut areas: Vec<f64>) -> AreaDistribution {
    areas.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = areas.len();
    let histogram = bins_from_edges(&HISTOGRAM_EDGES)
        .into_iter()
        .map(|b| (b.label("px²"), areas.iter().filter(|&&a| b.contains(a)).count()))
        .collect();
    let below = |t: f64| areas.iter().filter(|&&a| a < t).count();
    let cdf = COLLAPSE_THRESHOLDS
        .iter()
        .map(|&t| (t, if n == 0 { 0.0 } else { below(t) as f64 / n as f64 }))
        .collect();
    let median_area = match n {
        0 => None,
        _ if n % 2 == 1 => Some(areas[n / 2]),
        _ => Some((areas[n / 2 - 1] + areas[n / 2]) / 2.0),
    };
    let count_below_64 = below(64.0);
    AreaDistribution {
        input_size,
        n_boxes: n,
        histogram,
        cdf,
        median_area,
        fraction_below_64: (n > 0).then(|| count_below_64 as f64 / n as f64),
        count_below_64,
    }
}

/// Apparent-area distribution at native resolution and at each input size.
/// `images` maps image id to `(width, height)`.
pub fn resolution_collapse_report<T: Scalar>(
    gts: &GroundTruthSet<T>,
    images: &BTreeMap<u64, (u32, u32)>,
    input_sizes: &[u32],
) -> Vec<AreaDistribution> {
    let mut out = vec![summarize_areas(
        None,
        gts.boxes.iter().map(|g| g.area_native.as_f64()).collect(),
    )];
    for &k in input_sizes {
        let areas = gts
            .boxes
            .iter()
            .filter_map(|g| {
                images
                    .get(&g.image_id)
                    .map(|&(w, h)| apparent_area(&g.bbox, w, h, k).as_f64())
            })
            .collect();
        out.push(summarize_areas(Some(k), areas));
    }
    out
}

/// Metric configuration; defaults are IoU 0.5, operating confidence 0.25,
/// apparent areas at 640 px input with edges {16, 64} px², boundary edges
/// {16, 32} px against the non-overlapping 640 px grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub input_size: u32,
    pub reference: ReferenceGrid,
    pub iou: f64,
    pub conf: f64,
    pub area_edges: Vec<f64>,
    pub boundary_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input_size: 640,
            reference: ReferenceGrid::default(),
            iou: 0.5,
            conf: 0.25,
            area_edges: vec![16.0, 64.0],
            boundary_edges: vec![16.0, 32.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct EvalReport<T> {
    pub label: String,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub map50: Option<T>,
    pub per_class: Vec<ClassAp<T>>,
    pub operating_point: PrecisionRecall<T>,
    pub area_bins: Vec<BinRecall<T>>,
    pub boundary_bins: Vec<BinRecall<T>>,
    /// Mean wall-clock milliseconds per image, when timed.
    pub mean_ms: Option<f64>,
}

pub fn evaluate<T: Scalar>(
    label: &str,
    preds: &[Prediction<T>],
    gts: &GroundTruthSet<T>,
    classes: &[u32],
    cfg: &EvalConfig,
) -> EvalReport<T> {
    let iou_t = T::of(cfg.iou);
    let conf = T::of(cfg.conf);
    let m = mean_average_precision(preds, gts, classes, iou_t);
    EvalReport {
        label: label.to_string(),
        n_images: gts.images.len(),
        n_gt: gts.len(),
        n_pred: preds.len(),
        map50: m.map,
        per_class: m.per_class,
        operating_point: precision_recall_at_conf(preds, gts, conf, iou_t),
        area_bins: recall_by_area_bin(preds, gts, conf, iou_t, &cfg.area_edges),
        boundary_bins: recall_by_boundary_bin(preds, gts, conf, iou_t, &cfg.boundary_edges),
        mean_ms: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pred(image_id: u64, class_id: u32, bbox: BBox<f64>, confidence: f64) -> Prediction<f64> {
        Prediction {
            image_id,
            class_id,
            bbox,
            confidence,
        }
    }

    fn gt_set(boxes: &[(u64, u32, BBox<f64>)]) -> GroundTruthSet<f64> {
        let mut set = GroundTruthSet::new(640, ReferenceGrid::default());
        let ids: BTreeSet<u64> = boxes.iter().map(|b| b.0).collect();
        for id in ids {
            let mine = boxes.iter().filter(|b| b.0 == id).map(|b| (b.1, b.2));
            set.add_image(id, 1280, 1280, mine).unwrap();
        }
        set
    }

    #[test]
    fn greedy_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        // IoU = 70/100 -> TP
        assert_eq!(greedy_match(&[bx(0.0, 0.0, 10.0, 7.0)], &[g], 0.5), vec![Some(0)]);
        let out = greedy_match(&[g, bx(0.0, 0.0, 10.0, 9.0)], &[g], 0.5);
        assert_eq!(out, vec![Some(0), None]);
        assert_eq!(greedy_match(&[bx(50.0, 50.0, 60.0, 60.0)], &[g], 0.5), vec![None]);
    }

    #[test]
    fn greedy_picks_best_iou_among_unmatched() {
        let g0 = bx(0.0, 0.0, 10.0, 10.0);
        let g1 = bx(1.0, 0.0, 11.0, 10.0);
        let p = bx(1.0, 0.0, 11.0, 10.0);
        assert_eq!(greedy_match(&[p], &[g0, g1], 0.5), vec![Some(1)]);
    }

    #[test]
    fn ap_hand_case() {
        let ranked = [(0.9, true), (0.8, false), (0.7, true)];
        let ap: f64 = average_precision(&ranked, 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(average_precision::<f64>(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[(0.5, true), (0.4, true)], 2), Some(1.0));
        assert_eq!(average_precision::<f64>(&[(0.5, false)], 0), None);
    }

    #[test]
    fn map_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let gts = gt_set(&[(1, 0, g), (1, 1, bx(100.0, 100.0, 110.0, 110.0))]);
        let m = map50(&[pred(1, 0, g, 0.9)], &gts, &[0, 1]);
        assert_eq!(m.map, Some(0.5));
        assert_eq!(m.per_class[0].ap, Some(1.0));
        assert_eq!(m.per_class[1].ap, Some(0.0));

        // class 2 has no GT: excluded from the mean
        let m = map50(&[pred(1, 0, g, 0.9)], &gt_set(&[(1, 0, g)]), &[0, 2]);
        assert_eq!(m.map, Some(1.0));
        assert_eq!(m.per_class[1].ap, None);
    }

    #[test]
    fn operating_point_examples() {
        let empty = GroundTruthSet::<f64>::new(640, ReferenceGrid::default());
        let pr = precision_recall_at_conf(&[], &empty, 0.25, 0.5);
        assert_eq!((pr.precision, pr.recall), (1.0, 1.0));

        let gs: Vec<BBox<f64>> = (0..4).map(|i| bx(i as f64 * 50.0, 0.0, i as f64 * 50.0 + 10.0, 10.0)).collect();
        let gts = gt_set(&gs.iter().map(|b| (1, 0, *b)).collect::<Vec<_>>());
        let preds = vec![
            pred(1, 0, gs[0], 0.9),
            pred(1, 0, gs[1], 0.8),
            pred(1, 0, gs[2], 0.7),
            pred(1, 0, bx(500.0, 500.0, 510.0, 510.0), 0.6),
            pred(1, 0, gs[3], 0.1), // below the operating threshold
        ];
        let pr = precision_recall_at_conf(&preds, &gts, 0.25, 0.5);
        assert_eq!((pr.tp, pr.fp, pr.fn_), (3, 1, 1));
        assert_eq!((pr.precision, pr.recall), (0.75, 0.75));

        let pr = precision_recall_at_conf(&[], &gts, 0.25, 0.5);
        assert_eq!((pr.precision, pr.recall), (0.0, 0.0));
    }

    #[test]
    fn area_bins_small_fixture() {
        // 1280 px image at 640 input: scale 0.5, a 12x12 box has 36 px²
        let small: Vec<BBox<f64>> = (0..4).map(|i| bx(i as f64 * 100.0, 0.0, i as f64 * 100.0 + 12.0, 12.0)).collect();
        let gts = gt_set(&small.iter().map(|b| (1, 0, *b)).collect::<Vec<_>>());
        assert_eq!(gts.boxes[0].apparent_area, 36.0);
        let preds = vec![pred(1, 0, small[0], 0.9), pred(1, 0, small[1], 0.9)];
        let bins = recall_by_area_bin(&preds, &gts, 0.25, 0.5, &[16.0, 64.0]);
        assert_eq!(bins.len(), 3);
        assert_eq!(bins[0].recall, None);
        assert_eq!(bins[1].label, "16-64 px²");
        assert_eq!((bins[1].n_gt, bins[1].recall), (4, Some(0.5)));
        assert_eq!(bins[2].recall, None);
        assert_eq!(bins[2].label, "> 64 px²");
    }

    #[test]
    fn boundary_bins() {
        let on_line = bx(630.0, 100.0, 650.0, 120.0);
        let far = bx(300.0, 300.0, 320.0, 320.0);
        let gts = gt_set(&[(1, 0, on_line), (1, 0, far)]);
        assert_eq!(gts.boxes[0].boundary_distance, Some(0.0));
        let bins = recall_by_boundary_bin(&[pred(1, 0, far, 0.9)], &gts, 0.25, 0.5, &[16.0, 32.0]);
        assert_eq!(bins[0].label, "< 16 px");
        assert_eq!((bins[0].n_gt, bins[0].recall), (1, Some(0.0)));
        assert_eq!((bins[2].n_gt, bins[2].recall), (1, Some(1.0)));

        let mut single = GroundTruthSet::new(640, ReferenceGrid::default());
        single.add_image(7, 500, 400, [(0, bx(10.0, 10.0, 20.0, 20.0))]).unwrap();
        assert_eq!(single.boxes[0].boundary_distance, None);
        let bins = recall_by_boundary_bin(&[], &single, 0.25, 0.5, &[16.0, 32.0]);
        assert_eq!(bins[2].n_gt, 1);
    }

    #[test]
    fn collapse_report_closed_form() {
        let mut gts = GroundTruthSet::new(640, ReferenceGrid::default());
        let boxes = [(0, bx(0.0, 0.0, 40.0, 40.0)), (0, bx(0.0, 0.0, 80.0, 80.0)), (0, bx(0.0, 0.0, 160.0, 160.0))];
        gts.add_image(1, 5120, 4000, boxes).unwrap();
        let images = BTreeMap::from([(1u64, (5120u32, 4000u32))]);
        let rep = resolution_collapse_report(&gts, &images, &[640, 1280]);
        assert_eq!(rep.len(), 3);
        // scale 1/8: 1600 -> 25, 6400 -> 100, 25600 -> 400
        assert_eq!(rep[1].median_area, Some(100.0));
        assert_eq!(rep[1].cdf, vec![(16.0, 0.0), (64.0, 1.0 / 3.0), (256.0, 2.0 / 3.0)]);
        assert_eq!(rep[1].count_below_64, 1);
        // scale 1/4
        assert_eq!(rep[2].median_area, Some(400.0));
        assert_eq!(rep[0].median_area, Some(6400.0));
    }

    #[test]
    fn collapse_report_identical_boxes() {
        let mut gts = GroundTruthSet::new(640, ReferenceGrid::default());
        gts.add_image(1, 1280, 1280, (0..5).map(|_| (0, bx(0.0, 0.0, 20.0, 20.0)))).unwrap();
        let images = BTreeMap::from([(1u64, (1280u32, 1280u32))]);
        let rep = resolution_collapse_report(&gts, &images, &[640]);
        assert_eq!(rep[1].median_area, Some(100.0));
        assert_eq!(rep[1].cdf, vec![(16.0, 0.0), (64.0, 0.0), (256.0, 1.0)]);
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Prediction<f64>>, GroundTruthSet<f64>)> {
        let gt = (0u64..3, 0u32..2, 0.0..1200.0f64, 0.0..1200.0f64, 4.0..60.0f64);
        let pr = (0usize..1000, -8.0..8.0f64, -8.0..8.0f64, 0.0..1.0f64, any::<bool>());
        (prop::collection::vec(gt, 0..12), prop::collection::vec(pr, 0..20)).prop_map(|(g, p)| {
            let boxes: Vec<(u64, u32, BBox<f64>)> = g
                .into_iter()
                .map(|(im, c, x, y, s)| (im, c, BBox::from_xywh(x, y, s, s).unwrap()))
                .collect();
            let gts = gt_set(&boxes);
            let preds = p
                .into_iter()
                .filter_map(|(k, dx, dy, conf, keep_class)| {
                    let (im, c, b) = boxes.get(k % boxes.len().max(1))?;
                    let b = b.translate(dx, dy);
                    Some(pred(*im, if keep_class { *c } else { 1 - *c }, b, conf))
                })
                .collect();
            (preds, gts)
        })
    }

    proptest! {
        #[test]
        fn matching_is_one_to_one_and_class_restricted((preds, gts) in arb_case()) {
            let m = match_all(&preds, &gts, 0.5);
            let mut seen = BTreeSet::new();
            for (p, g) in preds.iter().zip(&m.pred_match) {
                if let Some(g) = g {
                    prop_assert!(seen.insert(*g));
                    prop_assert_eq!(gts.boxes[*g].class_id, p.class_id);
                    prop_assert_eq!(gts.boxes[*g].image_id, p.image_id);
                }
            }
        }

        #[test]
        fn ap_invariant_under_monotone_transform((preds, gts) in arb_case()) {
            let transformed: Vec<_> = preds
                .iter()
                .map(|p| Prediction { confidence: p.confidence.powi(3) * 0.5 + 0.1, ..*p })
                .collect();
            let a = map50(&preds, &gts, &[0, 1]);
            let b = map50(&transformed, &gts, &[0, 1]);
            match (a.map, b.map) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn bins_aggregate_to_overall_recall((preds, gts) in arb_case()) {
            let overall = precision_recall_at_conf(&preds, &gts, 0.25, 0.5);
            for bins in [
                recall_by_area_bin(&preds, &gts, 0.25, 0.5, &[16.0, 64.0]),
                recall_by_boundary_bin(&preds, &gts, 0.25, 0.5, &[16.0, 32.0]),
            ] {
                let n: usize = bins.iter().map(|b| b.n_gt).sum();
                let r: usize = bins.iter().map(|b| b.n_recalled).sum();
                prop_assert_eq!(n, gts.len());
                prop_assert_eq!(r, overall.tp);
            }
        }

        #[test]
        fn duplicate_never_helps((preds, gts) in arb_case(), pick in 0usize..100) {
            let before = precision_recall_at_conf(&preds, &gts, 0.25, 0.5);
            let m = match_all(&preds, &gts, 0.5);
            let tps: Vec<&Prediction<f64>> = preds.iter().zip(&m.pred_match).filter(|(p, g)| g.is_some() && p.confidence >= 0.25).map(|(p, _)| p).collect();
            if !tps.is_empty() {
                let dup = Prediction { confidence: tps[pick % tps.len()].confidence * 0.999, ..*tps[pick % tps.len()] };
                let mut more = preds.clone();
                more.push(dup);
                let after = precision_recall_at_conf(&more, &gts, 0.25, 0.5);
                prop_assert!(after.recall <= before.recall);
                prop_assert!(after.precision <= before.precision);
            }
        }
    }
}
