//! Value-level box arithmetic: IoU, clipping, remapping, rescaling, tile
//! boundary distance and apparent area.
//!
//! Coordinates are real-valued pixels. A [`BBox`] can only be built through
//! validating constructors, so every box in the crate satisfies
//! `x1 <= x2 && y1 <= y2` with finite coordinates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Detector boxes may overshoot their tile by this many pixels before the
/// overshoot is treated as corrupt output.
pub const TILE_SLOP_PX: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("malformed box [{x1}, {y1}, {x2}, {y2}]: expected x1 <= x2 and y1 <= y2")]
    Malformed { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box has a non-finite coordinate")]
    NonFinite,
    #[error("box [{x1}, {y1}, {x2}, {y2}] lies outside its {width}x{height} tile (corrupt detector output)")]
    OutsideTile {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    },
    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("tile dimensions must be positive, got {0}x{1}")]
    EmptyTile(u32, u32),
}

/// Axis-aligned rectangle `(x1, y1, x2, y2)` in pixel coordinates.
///
/// Serialized as the array `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[T; 4]", into = "[T; 4]")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Malformed {
                x1: x1.as_f64(),
                y1: y1.as_f64(),
                x2: x2.as_f64(),
                y2: y2.as_f64(),
            });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// COCO-style `[x, y, w, h]`.
    pub fn from_xywh(x: T, y: T, w: T, h: T) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    /// Box of the given size centred on `(cx, cy)`.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let two = T::one() + T::one();
        Self::new(cx - w / two, cy - h / two, cx + w / two, cy + h / two)
    }

    #[inline]
    pub fn x1(&self) -> T {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> T {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> T {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> T {
        self.y2
    }
    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }
    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }
    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let two = T::one() + T::one();
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// `[x, y, w, h]`
    pub fn to_xywh(&self) -> [T; 4] {
        [self.x1, self.y1, self.width(), self.height()]
    }

    /// Intersection rectangle, or `None` when the boxes do not overlap with
    /// positive area.
    pub fn intersection(&self, other: &Self) -> Option<Self> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x2 > x1 && y2 > y1 {
            Some(Self { x1, y1, x2, y2 })
        } else {
            None
        }
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        self.intersection(other).map_or(T::zero(), |b| b.area())
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn translate(&self, dx: T, dy: T) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }
}

impl<T: Scalar> TryFrom<[T; 4]> for BBox<T> {
    type Error = GeometryError;

    fn try_from(v: [T; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl<T: Scalar> From<BBox<T>> for [T; 4] {
    fn from(b: BBox<T>) -> Self {
        b.to_array()
    }
}

impl<T: fmt::Debug> fmt::Debug for BBox<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BBox[{:?}, {:?}, {:?}, {:?}]", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Tile extent in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileDims {
    pub width: u32,
    pub height: u32,
}

impl TileDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyTile(width, height));
        }
        Ok(Self { width, height })
    }

    pub fn rect<T: Scalar>(&self) -> BBox<T> {
        BBox {
            x1: T::zero(),
            y1: T::zero(),
            x2: T::of_u32(self.width),
            y2: T::of_u32(self.height),
        }
    }
}

/// One side of a tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Top,
    Right,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Top, Side::Right, Side::Bottom];

    fn bit(self) -> u8 {
        match self {
            Side::Left => 1,
            Side::Top => 2,
            Side::Right => 4,
            Side::Bottom => 8,
        }
    }
}

/// Subset of tile sides.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct SideSet(u8);

impl SideSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn insert(&mut self, side: Side) {
        self.0 |= side.bit();
    }

    pub fn contains(&self, side: Side) -> bool {
        self.0 & side.bit() != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = Side> + '_ {
        Side::ALL.into_iter().filter(|s| self.contains(*s))
    }
}

impl FromIterator<Side> for SideSet {
    fn from_iter<I: IntoIterator<Item = Side>>(iter: I) -> Self {
        let mut set = Self::empty();
        for s in iter {
            set.insert(s);
        }
        set
    }
}

impl fmt::Debug for SideSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for SideSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for SideSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let sides = Vec::<Side>::deserialize(d)?;
        Ok(sides.into_iter().collect())
    }
}

/// Distance from a tile-local box to each tile edge, and their minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistance<T> {
    pub min: T,
    pub left: T,
    pub top: T,
    pub right: T,
    pub bottom: T,
}

impl<T: Scalar> BoundaryDistance<T> {
    pub fn component(&self, side: Side) -> T {
        match side {
            Side::Left => self.left,
            Side::Top => self.top,
            Side::Right => self.right,
            Side::Bottom => self.bottom,
        }
    }

    /// Sides whose component distance is strictly below `tau`.
    pub fn sides_within(&self, tau: T) -> SideSet {
        Side::ALL
            .into_iter()
            .filter(|s| self.component(*s) < tau)
            .collect()
    }
}

/// Intersection over union.
///
/// Two zero-area boxes have IoU 1 when identical and 0 otherwise.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return if a == b { T::one() } else { T::zero() };
    }
    inter / union
}

/// Tile-edge distance `min(x1, y1, Wt - x2, Ht - y2)` of a tile-local box.
///
/// Boxes overshooting the tile by at most [`TILE_SLOP_PX`] are clipped to the
/// tile first; anything further out is rejected.
pub fn boundary_distance<T: Scalar>(
    b: &BBox<T>,
    tile: TileDims,
) -> Result<BoundaryDistance<T>, GeometryError> {
    let w = T::of_u32(tile.width);
    let h = T::of_u32(tile.height);
    let slop = T::of(TILE_SLOP_PX);
    let outside = || GeometryError::OutsideTile {
        x1: b.x1.as_f64(),
        y1: b.y1.as_f64(),
        x2: b.x2.as_f64(),
        y2: b.y2.as_f64(),
        width: tile.width,
        height: tile.height,
    };
    if b.x1 < -slop || b.y1 < -slop || b.x2 > w + slop || b.y2 > h + slop {
        return Err(outside());
    }
    let zero = T::zero();
    let x1 = b.x1.max(zero).min(w);
    let y1 = b.y1.max(zero).min(h);
    let x2 = b.x2.min(w).max(zero);
    let y2 = b.y2.min(h).max(zero);
    let (left, top, right, bottom) = (x1, y1, w - x2, h - y2);
    Ok(BoundaryDistance {
        min: left.min(top).min(right).min(bottom),
        left,
        top,
        right,
        bottom,
    })
}

/// Clips `b` to `rect`, returning the visible part and its fraction of the
/// original area. `(None, 0)` for an empty intersection or a zero-area box.
pub fn clip_box<T: Scalar>(b: &BBox<T>, rect: &BBox<T>) -> (Option<BBox<T>>, T) {
    let area = b.area();
    if area <= T::zero() {
        return (None, T::zero());
    }
    match b.intersection(rect) {
        Some(c) => {
            let frac = if rect.contains(b) {
                T::one()
            } else {
                (c.area() / area).min(T::one())
            };
            (Some(c), frac)
        }
        None => (None, T::zero()),
    }
}

/// Translates a tile-local box by the tile origin.
pub fn remap_to_global<T: Scalar>(b: &BBox<T>, origin: (T, T)) -> BBox<T> {
    b.translate(origin.0, origin.1)
}

pub fn rescale_box<T: Scalar>(b: &BBox<T>, scale: T) -> Result<BBox<T>, GeometryError> {
    rescale_box_xy(b, scale, scale)
}

/// Per-axis rescale, used when a backend reports anisotropic effective scales.
pub fn rescale_box_xy<T: Scalar>(b: &BBox<T>, sx: T, sy: T) -> Result<BBox<T>, GeometryError> {
    for s in [sx, sy] {
        if !(s > T::zero()) || !s.is_finite() {
            return Err(GeometryError::NonPositiveScale(s.as_f64()));
        }
    }
    BBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy)
}

/// Area of `b` once the whole image is resized so its longest side equals
/// `input_size`.
pub fn apparent_area<T: Scalar>(b: &BBox<T>, image_w: u32, image_h: u32, input_size: u32) -> T {
    let s = T::of_u32(input_size) / T::of_u32(image_w.max(image_h).max(1));
    b.area() * s * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    const T640: TileDims = TileDims {
        width: 640,
        height: 640,
    };

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &bx(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_degenerate() {
        let p = bx(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 1.0);
        assert_eq!(iou(&p, &bx(4.0, 4.0, 4.0, 4.0)), 0.0);
        assert_eq!(iou(&p, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn malformed_rejected() {
        assert!(matches!(
            BBox::new(5.0, 0.0, 1.0, 1.0),
            Err(GeometryError::Malformed { .. })
        ));
        assert_eq!(BBox::new(f64::NAN, 0.0, 1.0, 1.0), Err(GeometryError::NonFinite));
        let parsed: Result<BBox<f64>, _> = serde_json::from_str("[3, 0, 1, 1]");
        assert!(parsed.is_err());
    }

    #[test]
    fn boundary_distance_examples() {
        let d = boundary_distance(&bx(10.0, 300.0, 50.0, 340.0), T640).unwrap();
        assert_eq!(d.min, 10.0);
        assert_eq!((d.left, d.top, d.right, d.bottom), (10.0, 300.0, 590.0, 300.0));
        assert_eq!(boundary_distance(&bx(0.0, 0.0, 640.0, 640.0), T640).unwrap().min, 0.0);
        assert_eq!(
            boundary_distance(&bx(312.0, 312.0, 328.0, 328.0), T640).unwrap().min,
            312.0
        );
    }

    #[test]
    fn boundary_distance_slop_and_outside() {
        let d = boundary_distance(&bx(-1.5, 10.0, 20.0, 641.0), T640).unwrap();
        assert_eq!(d.left, 0.0);
        assert_eq!(d.bottom, 0.0);
        assert!(boundary_distance(&bx(700.0, 700.0, 710.0, 710.0), T640).is_err());
        assert!(boundary_distance(&bx(-3.0, 0.0, 10.0, 10.0), T640).is_err());
    }

    #[test]
    fn clip_examples() {
        let r = bx(0.0, 0.0, 100.0, 100.0);
        let b = bx(10.0, 10.0, 20.0, 20.0);
        assert_eq!(clip_box(&b, &r), (Some(b), 1.0));
        assert_eq!(
            clip_box(&bx(0.0, 0.0, 10.0, 10.0), &bx(5.0, 0.0, 20.0, 10.0)),
            (Some(bx(5.0, 0.0, 10.0, 10.0)), 0.5)
        );
        assert_eq!(clip_box(&bx(200.0, 200.0, 210.0, 210.0), &r), (None, 0.0));
        assert_eq!(clip_box(&bx(5.0, 5.0, 5.0, 9.0), &r), (None, 0.0));
    }

    #[test]
    fn remap_and_rescale() {
        let b = bx(10.0, 10.0, 20.0, 20.0);
        assert_eq!(remap_to_global(&b, (512.0, 0.0)), bx(522.0, 10.0, 532.0, 20.0));
        assert_eq!(remap_to_global(&b, (0.0, 0.0)), b);
        assert_eq!(remap_to_global(&b, (512.0, 64.0)).translate(-512.0, -64.0), b);
        assert_eq!(rescale_box(&b, 1.0).unwrap(), b);
        assert_eq!(
            rescale_box(&bx(0.0, 0.0, 100.0, 100.0), 0.5).unwrap(),
            bx(0.0, 0.0, 50.0, 50.0)
        );
        assert!(rescale_box(&b, 0.0).is_err());
        assert!(rescale_box(&b, -2.0).is_err());
    }

    #[test]
    fn apparent_area_examples() {
        let b = bx(0.0, 0.0, 80.0, 80.0);
        assert_eq!(apparent_area(&b, 5120, 4000, 640), 100.0);
        assert_eq!(apparent_area(&b, 640, 300, 640), 6400.0);
    }

    #[test]
    fn works_in_f32() {
        let a = BBox::<f32>::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let b = BBox::<f32>::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-6);
    }

    fn arb_box() -> impl Strategy<Value = BBox<f64>> {
        (0.0..1000.0f64, 0.0..1000.0f64, 0.0..300.0f64, 0.0..300.0f64)
            .prop_map(|(x, y, w, h)| BBox::from_xywh(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn visible_fraction_law(b in arb_box(), r in arb_box()) {
            let (_, f) = clip_box(&b, &r);
            prop_assert!((0.0..=1.0).contains(&f));
            if b.area() > 0.0 {
                prop_assert_eq!(f == 1.0, r.contains(&b));
            }
        }

        #[test]
        fn boundary_distance_reflection(x in 0.0..600.0f64, y in 0.0..600.0f64, w in 0.0..40.0f64, h in 0.0..40.0f64) {
            let b = bx(x, y, x + w, y + h);
            let mirrored = bx(640.0 - (x + w), 640.0 - (y + h), 640.0 - x, 640.0 - y);
            let d1 = boundary_distance(&b, T640).unwrap();
            let d2 = boundary_distance(&mirrored, T640).unwrap();
            prop_assert!((d1.min - d2.min).abs() < 1e-9);
        }

        #[test]
        fn apparent_area_scales_quadratically(b in arb_box(), w in 1u32..6000, h in 1u32..6000, k in 1u32..4) {
            let m = w.max(h);
            let expected = (k * k) as f64 * b.area();
            let got = apparent_area(&b, w, h, k * m);
            prop_assert!((got - expected).abs() <= 1e-9 * expected.max(1.0));
        }

        #[test]
        fn remap_preserves_shape(q in (0u32..64_000, 0u32..64_000, 0u32..20_000, 0u32..20_000), dx in 0u32..5000, dy in 0u32..5000) {
            // sub-pixel coordinates on a 1/64 grid, as detectors emit them
            let f = |v: u32| v as f64 / 64.0;
            let b = BBox::from_xywh(f(q.0), f(q.1), f(q.2), f(q.3)).unwrap();
            let g = remap_to_global(&b, (dx as f64, dy as f64));
            prop_assert_eq!(g.width(), b.width());
            prop_assert_eq!(g.height(), b.height());
            prop_assert_eq!(g.area(), b.area());
        }

        #[test]
        fn rescale_inverse(b in arb_box(), s in 0.01..10.0f64) {
            let back = rescale_box(&rescale_box(&b, s).unwrap(), 1.0 / s).unwrap();
            for (u, v) in back.to_array().iter().zip(b.to_array()) {
                prop_assert!((u - v).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }
    }
}
