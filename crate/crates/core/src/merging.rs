//! Fusion of per-tile detections: class-aware NMS and topology-aware tile
//! merging (boundary sensitivity, neighbour agreement, score adjustment and
//! NMS on the adjusted scores).

use std::cmp::Ordering;
use std::collections::BTreeMap;

use num_traits::Num;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    boundary_distance, iou, remap_to_global, BBox, BoundaryDistance, GeometryError, Side,
    SideSet, TileDims,
};
use crate::scalar::Scalar;
use crate::tiling::{build_adjacency, AdjacencyGraph, TileGrid, TileIndex, TileSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MergeError {
    #[error("invalid merge parameter {name} = {value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("edge-continuity term mu = {0} is not implemented (only 0 is accepted)")]
    MuNotImplemented(f64),
    #[error("detection {0} has no tile provenance; topology-aware merging needs tiled detections")]
    MissingTile(usize),
    #[error("detection {index} references tile ({row}, {col}) that is not part of the grid")]
    TileNotInGrid { index: usize, row: u32, col: u32 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A scored, classed box with optional tile provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Detection<T> {
    pub class_id: u32,
    /// Original detector confidence.
    pub score: T,
    pub box_global: BBox<T>,
    pub tile: Option<TileSpec>,
    pub box_tile: Option<BBox<T>>,
    pub boundary: Option<BoundaryDistance<T>>,
    pub near_edges: SideSet,
    pub agreement: Option<T>,
    pub adjusted_score: Option<T>,
}

impl<T: Scalar> Detection<T> {
    /// Detection from a full-image strategy (no tile).
    pub fn full_image(class_id: u32, score: T, box_global: BBox<T>) -> Self {
        Self {
            class_id,
            score,
            box_global,
            tile: None,
            box_tile: None,
            boundary: None,
            near_edges: SideSet::empty(),
            agreement: None,
            adjusted_score: None,
        }
    }

    /// Detection emitted by a tile; the global box is the tile-local box
    /// shifted by the tile origin.
    pub fn in_tile(class_id: u32, score: T, box_tile: BBox<T>, tile: TileSpec) -> Self {
        Self {
            box_global: remap_to_global(&box_tile, tile.origin()),
            box_tile: Some(box_tile),
            tile: Some(tile),
            ..Self::full_image(class_id, score, box_tile)
        }
    }

    /// Reported confidence: the adjusted score when one was computed.
    pub fn confidence(&self) -> T {
        self.adjusted_score.unwrap_or(self.score)
    }

    fn ranking_score(&self, field: ScoreField) -> T {
        match field {
            ScoreField::Original => self.score,
            ScoreField::Adjusted => self.confidence(),
        }
    }

    pub fn is_boundary_sensitive(&self) -> bool {
        !self.near_edges.is_empty()
    }
}

/// Which score NMS ranks by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreField {
    Original,
    Adjusted,
}

/// Where the confidence threshold is applied relative to score adjustment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfFilter {
    #[default]
    BeforeAdjust,
    AfterAdjust,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeParams<T> {
    pub conf_threshold: T,
    pub nms_iou: T,
    /// Boundary-sensitivity distance in pixels.
    pub tau: T,
    /// Agreement weight.
    pub lambda: T,
    /// Edge-continuity weight; must be 0.
    pub mu: T,
    pub conf_filter: ConfFilter,
}

impl<T: Scalar> Default for MergeParams<T> {
    fn default() -> Self {
        Self {
            conf_threshold: T::of(0.25),
            nms_iou: T::of(0.45),
            tau: T::of(16.0),
            lambda: T::of(0.2),
            mu: T::zero(),
            conf_filter: ConfFilter::BeforeAdjust,
        }
    }
}

impl<T: Scalar> MergeParams<T> {
    pub fn validate(&self) -> Result<(), MergeError> {
        let bad = |name, value: T, reason| MergeError::InvalidParam {
            name,
            value: value.as_f64(),
            reason,
        };
        let (zero, one) = (T::zero(), T::one());
        if !(self.conf_threshold >= zero && self.conf_threshold <= one) {
            return Err(bad("conf", self.conf_threshold, "must lie in [0, 1]"));
        }
        if !(self.nms_iou > zero && self.nms_iou < one) {
            return Err(bad("nms_iou", self.nms_iou, "must lie in (0, 1)"));
        }
        if !(self.tau >= zero) || !self.tau.is_finite() {
            return Err(bad("tau", self.tau, "must be a finite value >= 0"));
        }
        if !(self.lambda >= zero) || !self.lambda.is_finite() {
            return Err(bad("lambda", self.lambda, "must be a finite value >= 0"));
        }
        if self.mu != zero {
            return Err(MergeError::MuNotImplemented(self.mu.as_f64()));
        }
        Ok(())
    }
}

/// Canonical ranking: score desc, then box area desc, then box coordinates
/// and class ascending. Callers use a stable sort so fully identical
/// detections keep input order.
fn rank_cmp<T: Scalar>(a: &Detection<T>, b: &Detection<T>, field: ScoreField) -> Ordering {
    let by_f = |x: T, y: T| x.partial_cmp(&y).unwrap_or(Ordering::Equal);
    by_f(b.ranking_score(field), a.ranking_score(field))
        .then_with(|| by_f(b.box_global.area(), a.box_global.area()))
        .then_with(|| {
            a.box_global
                .to_array()
                .iter()
                .zip(b.box_global.to_array())
                .map(|(x, y)| by_f(*x, y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_id.cmp(&b.class_id))
}

/// Sorts detections into the canonical ranking order.
pub fn canonical_sort<T: Scalar>(dets: &mut [Detection<T>], field: ScoreField) {
    dets.sort_by(|a, b| rank_cmp(a, b, field));
}

/// Greedy NMS run independently per class. A detection is suppressed when its
/// IoU with an already kept same-class detection is strictly above
/// `iou_thresh`. Survivors are returned in canonical ranking order.
pub fn class_aware_nms<T: Scalar>(
    mut dets: Vec<Detection<T>>,
    iou_thresh: T,
    field: ScoreField,
) -> Vec<Detection<T>> {
    canonical_sort(&mut dets, field);
    let mut kept_by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut keep = vec![false; dets.len()];
    for (i, d) in dets.iter().enumerate() {
        let kept = kept_by_class.entry(d.class_id).or_default();
        if kept
            .iter()
            .all(|&k| iou(&dets[k].box_global, &d.box_global) <= iou_thresh)
        {
            kept.push(i);
            keep[i] = true;
        }
    }
    dets.into_iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(d))
        .collect()
}

/// Fills the tile-edge distance and the set of edges closer than `tau`.
/// The detection is boundary-sensitive iff that set is non-empty, i.e. iff
/// its minimum edge distance is strictly below `tau`.
pub fn mark_boundary_sensitivity<T: Scalar>(
    mut det: Detection<T>,
    dims: TileDims,
    tau: T,
) -> Result<Detection<T>, GeometryError> {
    let local = det.box_tile.unwrap_or(det.box_global);
    let bd = boundary_distance(&local, dims)?;
    det.near_edges = bd.sides_within(tau);
    det.boundary = Some(bd);
    Ok(det)
}

/// Detections of one image grouped by tile.
pub struct TileIndexed<'a, T> {
    dets: &'a [Detection<T>],
    by_tile: BTreeMap<TileIndex, Vec<usize>>,
}

impl<'a, T: Scalar> TileIndexed<'a, T> {
    pub fn new(dets: &'a [Detection<T>]) -> Self {
        let mut by_tile: BTreeMap<TileIndex, Vec<usize>> = BTreeMap::new();
        for (i, d) in dets.iter().enumerate() {
            if let Some(t) = &d.tile {
                by_tile.entry(t.index()).or_default().push(i);
            }
        }
        Self { dets, by_tile }
    }

    pub fn in_tile(&self, idx: TileIndex) -> impl Iterator<Item = &'a Detection<T>> + '_ {
        self.by_tile
            .get(&idx)
            .into_iter()
            .flatten()
            .map(move |&i| &self.dets[i])
    }
}

fn interval_overlap<T: Scalar>(a0: T, a1: T, b0: T, b1: T) -> T {
    a1.min(b1) - a0.max(b0)
}

fn distance_to_line<T: Scalar>(lo: T, hi: T, line: T) -> T {
    if line < lo {
        lo - line
    } else if line > hi {
        line - hi
    } else {
        T::zero()
    }
}

/// Neighbour agreement `A` for a boundary-sensitive detection.
///
/// For every near edge of the detection's tile, the 4-adjacent tile across it
/// is searched for same-class detections whose global box overlaps the
/// detection along the edge direction and touches, or comes within `tau` of,
/// the edge line. `A` is the highest original score among them, 0 if none.
pub fn adjacent_agreement<T: Scalar>(
    det: &Detection<T>,
    graph: &AdjacencyGraph,
    indexed: &TileIndexed<'_, T>,
    tau: T,
) -> T {
    let Some(tile) = det.tile else {
        return T::zero();
    };
    let b = &det.box_global;
    let mut best = T::zero();
    for side in det.near_edges.iter() {
        let Some(nb) = graph.neighbour(tile.index(), side) else {
            continue;
        };
        let line = T::of_u32(tile.edge_line(side));
        for cand in indexed.in_tile(nb) {
            if cand.class_id != det.class_id {
                continue;
            }
            let c = &cand.box_global;
            let (overlap, dist) = match side {
                Side::Left | Side::Right => (
                    interval_overlap(b.y1(), b.y2(), c.y1(), c.y2()),
                    distance_to_line(c.x1(), c.x2(), line),
                ),
                Side::Top | Side::Bottom => (
                    interval_overlap(b.x1(), b.x2(), c.x1(), c.x2()),
                    distance_to_line(c.y1(), c.y2(), line),
                ),
            };
            if overlap > T::zero() && dist <= tau && cand.score > best {
                best = cand.score;
            }
        }
    }
    best
}

/// `min(1, s + lambda * a)`.
///
/// Generic over any ordered numeric type so it can be evaluated in exact
/// rational arithmetic as well as floating point.
pub fn adjust_score<N>(s: N, a: N, lambda: N) -> N
where
    N: Num + PartialOrd + Copy,
{
    let v = s + lambda * a;
    if v > N::one() {
        N::one()
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaTmOutput<T> {
    pub detections: Vec<Detection<T>>,
    /// Detections (before NMS) whose adjusted score exceeds the original.
    pub boosted: usize,
    /// Detections (before NMS) that were boundary-sensitive.
    pub sensitive: usize,
}

fn filter_conf<T: Scalar>(dets: &mut Vec<Detection<T>>, conf: T, field: ScoreField) {
    dets.retain(|d| d.ranking_score(field) >= conf);
}

/// Topology-aware merge of one image's tiled detections.
pub fn ta_tm_merge<T: Scalar>(
    mut dets: Vec<Detection<T>>,
    grid: &TileGrid,
    params: &MergeParams<T>,
) -> Result<TaTmOutput<T>, MergeError> {
    params.validate()?;
    if params.conf_filter == ConfFilter::BeforeAdjust {
        filter_conf(&mut dets, params.conf_threshold, ScoreField::Original);
    }
    for (i, d) in dets.iter().enumerate() {
        let t = d.tile.ok_or(MergeError::MissingTile(i))?;
        if grid.tile(t.index()) != Some(&t) {
            return Err(MergeError::TileNotInGrid {
                index: i,
                row: t.row,
                col: t.col,
            });
        }
    }
    let dets = dets
        .into_iter()
        .map(|d| {
            let dims = d.tile.expect("checked above").dims();
            mark_boundary_sensitivity(d, dims, params.tau)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let graph = build_adjacency(grid);
    // Agreement reads the original scores of a frozen snapshot.
    let agreements: Vec<Option<T>> = {
        let indexed = TileIndexed::new(&dets);
        dets.iter()
            .map(|d| {
                d.is_boundary_sensitive()
                    .then(|| adjacent_agreement(d, &graph, &indexed, params.tau))
            })
            .collect()
    };

    let mut sensitive = 0;
    let mut boosted = 0;
    let mut dets: Vec<Detection<T>> = dets
        .into_iter()
        .zip(agreements)
        .map(|(mut d, a)| {
            let adjusted = match a {
                Some(a) => {
                    sensitive += 1;
                    adjust_score(d.score, a, params.lambda)
                }
                None => d.score,
            };
            if adjusted > d.score {
                boosted += 1;
            }
            d.agreement = a;
            d.adjusted_score = Some(adjusted);
            d
        })
        .collect();

    if params.conf_filter == ConfFilter::AfterAdjust {
        filter_conf(&mut dets, params.conf_threshold, ScoreField::Adjusted);
    }
    Ok(TaTmOutput {
        detections: class_aware_nms(dets, params.nms_iou, ScoreField::Adjusted),
        boosted,
        sensitive,
    })
}

/// Confidence filter followed by class-aware NMS on the original scores.
pub fn plain_merge<T: Scalar>(
    mut dets: Vec<Detection<T>>,
    params: &MergeParams<T>,
) -> Result<Vec<Detection<T>>, MergeError> {
    params.validate()?;
    filter_conf(&mut dets, params.conf_threshold, ScoreField::Original);
    Ok(class_aware_nms(dets, params.nms_iou, ScoreField::Original))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::plan_grid;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn full(class_id: u32, score: f64, b: BBox<f64>) -> Detection<f64> {
        Detection::full_image(class_id, score, b)
    }

    #[test]
    fn nms_suppresses_same_class_only() {
        // IoU = 60/100 ... two 10x10 boxes offset by 2.5 -> 75/125 = 0.6
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(2.5, 0.0, 12.5, 10.0);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        let out = class_aware_nms(
            vec![full(0, 0.8, b), full(0, 0.9, a)],
            0.45,
            ScoreField::Original,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);

        let c = bx(0.0, 0.0, 10.0, 9.0);
        let out = class_aware_nms(vec![full(0, 0.9, a), full(1, 0.8, c)], 0.45, ScoreField::Original);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_threshold_is_strict() {
        // IoU exactly 0.5
        let a = bx(0.0, 0.0, 30.0, 10.0);
        let b = bx(10.0, 0.0, 40.0, 10.0);
        assert_eq!(iou(&a, &b), 0.5);
        let out = class_aware_nms(vec![full(0, 0.9, a), full(0, 0.8, b)], 0.5, ScoreField::Original);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn nms_ties_prefer_larger_box() {
        let small = bx(0.0, 0.0, 10.0, 10.0);
        let large = bx(0.0, 0.0, 11.0, 11.0);
        let out = class_aware_nms(
            vec![full(0, 0.7, small), full(0, 0.7, large)],
            0.45,
            ScoreField::Original,
        );
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].box_global, large);
    }

    #[test]
    fn nms_idempotent() {
        let dets: Vec<_> = (0..20)
            .map(|i| {
                let x = (i * 7 % 30) as f64;
                full(i % 2, 0.3 + (i as f64) * 0.03, bx(x, 0.0, x + 12.0, 12.0))
            })
            .collect();
        let once = class_aware_nms(dets, 0.45, ScoreField::Original);
        let twice = class_aware_nms(once.clone(), 0.45, ScoreField::Original);
        assert_eq!(once, twice);
    }

    fn tile_at(grid: &TileGrid, row: u32, col: u32) -> TileSpec {
        *grid.tile(TileIndex::new(row, col)).unwrap()
    }

    #[test]
    fn sensitivity_examples() {
        let dims = TileDims::new(640, 640).unwrap();
        let mark = |b| {
            mark_boundary_sensitivity(full(0, 0.5, b), dims, 16.0)
                .unwrap()
                .near_edges
        };
        let e = mark(bx(5.0, 300.0, 45.0, 340.0));
        assert_eq!(e.iter().collect::<Vec<_>>(), vec![Side::Left]);
        assert!(mark(bx(16.0, 300.0, 56.0, 340.0)).is_empty());
        let e = mark(bx(5.0, 5.0, 45.0, 45.0));
        assert_eq!(e.iter().collect::<Vec<_>>(), vec![Side::Left, Side::Top]);
    }

    #[test]
    fn adjust_examples() {
        assert!((adjust_score(0.5, 0.8, 0.2) - 0.66f64).abs() < 1e-15);
        assert_eq!(adjust_score(0.95, 1.0, 0.2), 1.0);
        for lambda in [0.0, 0.2, 3.0] {
            assert_eq!(adjust_score(0.37, 0.0, lambda), 0.37);
        }
    }

    /// Two non-overlapping tiles side by side; `fixture` returns a detection
    /// hugging the right edge of tile (0,0) plus a neighbour detection.
    fn two_tile_fixture(neighbour_class: u32) -> (TileGrid, Vec<Detection<f64>>) {
        let grid = plan_grid(1280, 640, 640, 640).unwrap();
        let left = tile_at(&grid, 0, 0);
        let right = tile_at(&grid, 0, 1);
        let dets = vec![
            Detection::in_tile(0, 0.5, bx(600.0, 300.0, 638.0, 340.0), left),
            Detection::in_tile(neighbour_class, 0.8, bx(0.0, 305.0, 30.0, 345.0), right),
        ];
        (grid, dets)
    }

    fn agreement_of_first(grid: &TileGrid, dets: Vec<Detection<f64>>) -> f64 {
        let dets: Vec<_> = dets
            .into_iter()
            .map(|d| {
                let dims = d.tile.unwrap().dims();
                mark_boundary_sensitivity(d, dims, 16.0).unwrap()
            })
            .collect();
        let graph = build_adjacency(grid);
        let idx = TileIndexed::new(&dets);
        adjacent_agreement(&dets[0], &graph, &idx, 16.0)
    }

    #[test]
    fn agreement_from_neighbour() {
        let (grid, dets) = two_tile_fixture(0);
        assert_eq!(agreement_of_first(&grid, dets), 0.8);
    }

    #[test]
    fn agreement_class_mismatch() {
        let (grid, dets) = two_tile_fixture(1);
        assert_eq!(agreement_of_first(&grid, dets), 0.0);
    }

    #[test]
    fn agreement_at_image_border_is_zero() {
        let grid = plan_grid(1280, 640, 640, 640).unwrap();
        let t = tile_at(&grid, 0, 0);
        let d = Detection::in_tile(0, 0.5, bx(2.0, 300.0, 40.0, 340.0), t);
        assert_eq!(agreement_of_first(&grid, vec![d]), 0.0);
    }

    #[test]
    fn agreement_requires_parallel_overlap_and_proximity() {
        let grid = plan_grid(1280, 640, 640, 640).unwrap();
        let (l, r) = (tile_at(&grid, 0, 0), tile_at(&grid, 0, 1));
        let det = Detection::in_tile(0, 0.5, bx(600.0, 300.0, 638.0, 340.0), l);
        // vertically disjoint
        let far_y = Detection::in_tile(0, 0.9, bx(0.0, 400.0, 30.0, 440.0), r);
        assert_eq!(agreement_of_first(&grid, vec![det.clone(), far_y]), 0.0);
        // 20 px from the shared line, beyond tau
        let far_x = Detection::in_tile(0, 0.9, bx(20.0, 300.0, 50.0, 340.0), r);
        assert_eq!(agreement_of_first(&grid, vec![det.clone(), far_x]), 0.0);
        // exactly tau away counts
        let at_tau = Detection::in_tile(0, 0.7, bx(16.0, 300.0, 50.0, 340.0), r);
        assert_eq!(agreement_of_first(&grid, vec![det, at_tau]), 0.7);
    }

    #[test]
    fn agreement_under_overlap_uses_edge_line() {
        // overlapping tiles [0,640) and [512,1152): the neighbour sees the
        // whole defect, straddling x = 640 but far from its own tile edges
        let grid = plan_grid(1152, 640, 640, 512).unwrap();
        let (l, r) = (tile_at(&grid, 0, 0), tile_at(&grid, 0, 1));
        let det = Detection::in_tile(0, 0.4, bx(610.0, 300.0, 640.0, 340.0), l);
        let whole = Detection::in_tile(0, 0.9, bx(98.0, 300.0, 158.0, 340.0), r);
        assert_eq!(whole.box_global, bx(610.0, 300.0, 670.0, 340.0));
        assert_eq!(agreement_of_first(&grid, vec![det, whole]), 0.9);
    }

    /// Split defect across a vertical tile seam with a competing false
    /// positive. Plain NMS keeps the false positive; the agreement boost lets
    /// a true half outrank it.
    fn split_fixture() -> (TileGrid, Vec<Detection<f64>>) {
        let grid = plan_grid(1280, 640, 640, 640).unwrap();
        let (l, r) = (tile_at(&grid, 0, 0), tile_at(&grid, 0, 1));
        let dets = vec![
            // halves of the defect [600, 680) x [300, 340)
            Detection::in_tile(0, 0.55, bx(600.0, 300.0, 640.0, 340.0), l),
            Detection::in_tile(0, 0.55, bx(0.0, 300.0, 40.0, 340.0), r),
            // false positive overlapping both halves with IoU > 0.45
            Detection::in_tile(0, 0.60, bx(610.0, 300.0, 640.0, 340.0), l),
        ];
        (grid, dets)
    }

    #[test]
    fn split_defect_trace() {
        let (grid, dets) = split_fixture();
        let fp = dets[2].box_global;
        assert!(iou(&fp, &dets[0].box_global) > 0.45);

        let plain = plain_merge(dets.clone(), &MergeParams::default()).unwrap();
        assert_eq!(plain[0].score, 0.60);

        // Every box hugs the seam here, so the false positive is boosted as
        // well: left half 0.55 + 0.2 * 0.55, right half 0.55 + 0.2 * 0.60,
        // false positive 0.60 + 0.2 * 0.55.
        let out = ta_tm_merge(dets, &grid, &MergeParams::default()).unwrap();
        assert_eq!(out.boosted, 3);
        let got: Vec<(BBox<f64>, f64)> = out
            .detections
            .iter()
            .map(|d| (d.box_global, d.confidence()))
            .collect();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].0, fp);
        assert!((got[0].1 - 0.71).abs() < 1e-12);
        assert_eq!(got[1].0, bx(640.0, 300.0, 680.0, 340.0));
        assert!((got[1].1 - 0.67).abs() < 1e-12);
    }

    #[test]
    fn manual_trace_boost_outranks_fp() {
        // false positive kept away from the seam so it is not sensitive
        let grid = plan_grid(1280, 640, 640, 640).unwrap();
        let (l, r) = (tile_at(&grid, 0, 0), tile_at(&grid, 0, 1));
        let dets = vec![
            Detection::in_tile(0, 0.55, bx(560.0, 300.0, 640.0, 340.0), l),
            Detection::in_tile(0, 0.55, bx(0.0, 300.0, 60.0, 340.0), r),
            Detection::in_tile(0, 0.60, bx(570.0, 300.0, 620.0, 340.0), l),
        ];
        // IoU(fp, left half) = 50 / 80
        assert!((iou(&dets[2].box_global, &dets[0].box_global) - 0.625).abs() < 1e-12);

        let plain = plain_merge(dets.clone(), &MergeParams::default()).unwrap();
        assert_eq!(plain.len(), 2);
        assert_eq!(plain[0].score, 0.60);

        let out = ta_tm_merge(dets, &grid, &MergeParams::default()).unwrap();
        assert_eq!(out.boosted, 2);
        assert_eq!(out.sensitive, 2);
        let top = &out.detections[0];
        assert!((top.confidence() - 0.66).abs() < 1e-12);
        assert_eq!(top.box_global, bx(560.0, 300.0, 640.0, 340.0));
        assert!(out
            .detections
            .iter()
            .all(|d| d.box_global != bx(570.0, 300.0, 620.0, 340.0)));
    }

    #[test]
    fn degenerate_lambda_or_tau() {
        let (grid, dets) = split_fixture();
        let plain = plain_merge(dets.clone(), &MergeParams::default()).unwrap();
        for params in [
            MergeParams {
                lambda: 0.0,
                ..MergeParams::default()
            },
            MergeParams {
                tau: 0.0,
                ..MergeParams::default()
            },
        ] {
            let out = ta_tm_merge(dets.clone(), &grid, &params).unwrap();
            assert_eq!(out.boosted, 0);
            let got: Vec<_> = out
                .detections
                .iter()
                .map(|d| (d.class_id, d.box_global, d.confidence()))
                .collect();
            let want: Vec<_> = plain
                .iter()
                .map(|d| (d.class_id, d.box_global, d.confidence()))
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn missing_tile_is_error() {
        let grid = plan_grid(640, 640, 640, 640).unwrap();
        let d = full(0, 0.9, bx(0.0, 0.0, 10.0, 10.0));
        assert_eq!(
            ta_tm_merge(vec![d], &grid, &MergeParams::default()),
            Err(MergeError::MissingTile(0))
        );
    }

    #[test]
    fn mu_rejected() {
        let p = MergeParams::<f64> {
            mu: 0.1,
            ..MergeParams::default()
        };
        assert_eq!(p.validate(), Err(MergeError::MuNotImplemented(0.1)));
    }

    #[test]
    fn plain_merge_passthrough_and_dedup() {
        let grid = plan_grid(1152, 640, 640, 512).unwrap();
        let (l, r) = (tile_at(&grid, 0, 0), tile_at(&grid, 0, 1));
        let single = Detection::in_tile(2, 0.7, bx(100.0, 100.0, 120.0, 130.0), l);
        let out = plain_merge(vec![single.clone()], &MergeParams::default()).unwrap();
        assert_eq!(out, vec![single]);

        let a = Detection::in_tile(0, 0.8, bx(550.0, 100.0, 600.0, 150.0), l);
        let b = Detection::in_tile(0, 0.7, bx(39.0, 100.0, 88.0, 150.0), r);
        assert!(iou(&a.box_global, &b.box_global) > 0.9);
        let out = plain_merge(vec![a.clone(), b], &MergeParams::default()).unwrap();
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn conf_filter_before_merge() {
        let d = full(0, 0.2, bx(0.0, 0.0, 10.0, 10.0));
        assert!(plain_merge(vec![d], &MergeParams::default()).unwrap().is_empty());
    }
}
