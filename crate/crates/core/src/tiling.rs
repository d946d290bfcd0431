//! Tile-grid planning and the 4-connected tile adjacency graph.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Side, TileDims};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TilingError {
    #[error("image dimensions must be positive, got {0}x{1}")]
    EmptyImage(u32, u32),
    #[error("tile size must be positive")]
    ZeroTile,
    #[error("stride must be positive")]
    ZeroStride,
    #[error("stride {stride} exceeds tile size {tile_size}: tiles would leave gaps")]
    StrideExceedsTile { stride: u32, tile_size: u32 },
}

/// `(row, col)` position of a tile in its grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileIndex {
    pub row: u32,
    pub col: u32,
}

impl TileIndex {
    pub fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }

    /// Index of the tile across `side`, if it would be non-negative.
    pub fn step(self, side: Side) -> Option<Self> {
        let Self { row, col } = self;
        match side {
            Side::Left => col.checked_sub(1).map(|c| Self::new(row, c)),
            Side::Right => Some(Self::new(row, col + 1)),
            Side::Top => row.checked_sub(1).map(|r| Self::new(r, col)),
            Side::Bottom => Some(Self::new(row + 1, col)),
        }
    }
}

/// A single tile rectangle, `[x0, x0 + width) x [y0, y0 + height)` in image
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileSpec {
    pub row: u32,
    pub col: u32,
    pub x0: u32,
    pub y0: u32,
    #[serde(rename = "w")]
    pub width: u32,
    #[serde(rename = "h")]
    pub height: u32,
}

impl TileSpec {
    pub fn index(&self) -> TileIndex {
        TileIndex::new(self.row, self.col)
    }

    pub fn dims(&self) -> TileDims {
        TileDims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn origin<T: Scalar>(&self) -> (T, T) {
        (T::of_u32(self.x0), T::of_u32(self.y0))
    }

    /// Tile rectangle in global coordinates.
    pub fn rect<T: Scalar>(&self) -> BBox<T> {
        BBox::new(
            T::of_u32(self.x0),
            T::of_u32(self.y0),
            T::of_u32(self.x0 + self.width),
            T::of_u32(self.y0 + self.height),
        )
        .expect("tile rect is well-formed")
    }

    /// Global coordinate of the line carrying `side` (an x for left/right,
    /// a y for top/bottom).
    pub fn edge_line(&self, side: Side) -> u32 {
        match side {
            Side::Left => self.x0,
            Side::Right => self.x0 + self.width,
            Side::Top => self.y0,
            Side::Bottom => self.y0 + self.height,
        }
    }

    pub fn contains_pixel(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x0 + self.width && y >= self.y0 && y < self.y0 + self.height
    }
}

/// Tile origins along one axis.
///
/// Origins step by `stride`; the last one is clamped to `dim - tile` so every
/// tile keeps full size, and duplicates are dropped. A dimension shorter than
/// the tile yields a single origin at 0.
pub fn axis_origins(dim: u32, tile: u32, stride: u32) -> Vec<u32> {
    if dim <= tile {
        return vec![0];
    }
    let last = dim - tile;
    let mut origins: Vec<u32> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    origins.push(last);
    origins
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub image_w: u32,
    pub image_h: u32,
    pub tile_size: u32,
    pub stride: u32,
    rows: u32,
    cols: u32,
    tiles: Vec<TileSpec>,
}

/// Plans the row-major tile grid for a `image_w x image_h` image.
pub fn plan_grid(
    image_w: u32,
    image_h: u32,
    tile_size: u32,
    stride: u32,
) -> Result<TileGrid, TilingError> {
    if image_w == 0 || image_h == 0 {
        return Err(TilingError::EmptyImage(image_w, image_h));
    }
    if tile_size == 0 {
        return Err(TilingError::ZeroTile);
    }
    if stride == 0 {
        return Err(TilingError::ZeroStride);
    }
    if stride > tile_size {
        return Err(TilingError::StrideExceedsTile { stride, tile_size });
    }
    let xs = axis_origins(image_w, tile_size, stride);
    let ys = axis_origins(image_h, tile_size, stride);
    let tw = tile_size.min(image_w);
    let th = tile_size.min(image_h);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for (row, &y0) in ys.iter().enumerate() {
        for (col, &x0) in xs.iter().enumerate() {
            tiles.push(TileSpec {
                row: row as u32,
                col: col as u32,
                x0,
                y0,
                width: tw,
                height: th,
            });
        }
    }
    Ok(TileGrid {
        image_w,
        image_h,
        tile_size,
        stride,
        rows: ys.len() as u32,
        cols: xs.len() as u32,
        tiles,
    })
}

impl TileGrid {
    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn tiles(&self) -> &[TileSpec] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn tile(&self, idx: TileIndex) -> Option<&TileSpec> {
        if idx.row >= self.rows || idx.col >= self.cols {
            return None;
        }
        self.tiles.get((idx.row * self.cols + idx.col) as usize)
    }

    /// Number of tiles containing pixel `(x, y)`.
    pub fn coverage(&self, x: u32, y: u32) -> usize {
        self.tiles.iter().filter(|t| t.contains_pixel(x, y)).count()
    }

    /// Tile edge lines that do not lie on the image border, as
    /// `(vertical x positions, horizontal y positions)`, sorted.
    pub fn interior_lines(&self) -> (Vec<u32>, Vec<u32>) {
        let mut xs = BTreeSet::new();
        let mut ys = BTreeSet::new();
        for t in &self.tiles {
            for x in [t.x0, t.x0 + t.width] {
                if x > 0 && x < self.image_w {
                    xs.insert(x);
                }
            }
            for y in [t.y0, t.y0 + t.height] {
                if y > 0 && y < self.image_h {
                    ys.insert(y);
                }
            }
        }
        (xs.into_iter().collect(), ys.into_iter().collect())
    }
}

/// Orientation of the edge two neighbouring tiles share.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharedEdge {
    /// Left/right neighbours.
    Vertical,
    /// Top/bottom neighbours.
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AdjacencyEdge {
    pub a: TileIndex,
    pub b: TileIndex,
    pub shared: SharedEdge,
}

/// 4-connected graph over the `(row, col)` indices of a grid. Overlap between
/// tiles plays no role: neighbours are defined by index alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    rows: u32,
    cols: u32,
    nodes: Vec<TileIndex>,
    edges: Vec<AdjacencyEdge>,
}

pub fn build_adjacency(grid: &TileGrid) -> AdjacencyGraph {
    let nodes: Vec<TileIndex> = grid.tiles().iter().map(TileSpec::index).collect();
    let mut edges = Vec::new();
    for n in &nodes {
        if n.col + 1 < grid.cols() {
            edges.push(AdjacencyEdge {
                a: *n,
                b: TileIndex::new(n.row, n.col + 1),
                shared: SharedEdge::Vertical,
            });
        }
        if n.row + 1 < grid.rows() {
            edges.push(AdjacencyEdge {
                a: *n,
                b: TileIndex::new(n.row + 1, n.col),
                shared: SharedEdge::Horizontal,
            });
        }
    }
    AdjacencyGraph {
        rows: grid.rows(),
        cols: grid.cols(),
        nodes,
        edges,
    }
}

impl AdjacencyGraph {
    pub fn nodes(&self) -> &[TileIndex] {
        &self.nodes
    }

    pub fn edges(&self) -> &[AdjacencyEdge] {
        &self.edges
    }

    pub fn contains(&self, idx: TileIndex) -> bool {
        idx.row < self.rows && idx.col < self.cols
    }

    /// The neighbour across `side`, or `None` at the image border.
    pub fn neighbour(&self, idx: TileIndex, side: Side) -> Option<TileIndex> {
        idx.step(side).filter(|n| self.contains(*n))
    }

    pub fn neighbours(&self, idx: TileIndex) -> impl Iterator<Item = (Side, TileIndex)> + '_ {
        Side::ALL
            .into_iter()
            .filter_map(move |s| self.neighbour(idx, s).map(|n| (s, n)))
    }
}

/// Distance from a global point to the closest interior tile-boundary line of
/// `grid`. `None` when the grid has no interior boundary (single tile).
pub fn nearest_grid_boundary_distance<T: Scalar>(point: (T, T), grid: &TileGrid) -> Option<T> {
    let (xs, ys) = grid.interior_lines();
    let dx = xs.iter().map(|&l| (point.0 - T::of_u32(l)).abs());
    let dy = ys.iter().map(|&l| (point.1 - T::of_u32(l)).abs());
    dx.chain(dy).reduce(|a, b| a.min(b))
}
