//! Quadrilateral geometry, box actions, rasters and synthetic scenes.
//!
//! Coordinates are integer pixels on the canvas. A [`QuadBox`] keeps its
//! vertices in the fixed order top-left, top-right, bottom-right,
//! bottom-left; a [`BoxAction`] moves one of them by one pixel.

mod pgm;
mod raster;
mod scene;

pub(crate) use pgm::quantize as pgm_quantize;
pub use pgm::{read_pgm, read_pgm_bytes, write_pgm, write_pgm_bytes};
pub use raster::{crop, resize_bilinear, Raster};
pub use scene::{render_scene, SceneSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("degenerate box: enclosing rectangle is {width}x{height} px (minimum 2x2)")]
    DegenerateBox { width: i64, height: i64 },
    #[error("invalid rectangle ({x0},{y0})-({x1},{y1})")]
    InvalidRect { x0: i32, y0: i32, x1: i32, y1: i32 },
    #[error("crop rectangle does not intersect the raster")]
    EmptyCrop,
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("malformed image: {0}")]
    MalformedImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SpatialError>;

/// Vertex slots of a [`QuadBox`].
pub const TOP_LEFT: usize = 0;
pub const TOP_RIGHT: usize = 1;
pub const BOTTOM_RIGHT: usize = 2;
pub const BOTTOM_LEFT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

impl From<[i32; 2]> for Point {
    fn from([x, y]: [i32; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [i32; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RectRegion {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl RectRegion {
    pub fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(SpatialError::InvalidRect { x0, y0, x1, y1 });
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Canvas rectangle `[0, w) x [0, h)`.
    pub fn canvas(width: usize, height: usize) -> Self {
        Self {
            x0: 0,
            y0: 0,
            x1: width as i32,
            y1: height as i32,
        }
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() as i64 * self.height() as i64
    }

    pub fn diagonal(&self) -> f64 {
        (self.width() as f64).hypot(self.height() as f64)
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x0 && p.x < self.x1 && p.y >= self.y0 && p.y < self.y1
    }

    pub fn contains_rect(&self, other: &RectRegion) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }

    pub fn intersects(&self, other: &RectRegion) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }
}

/// Four-vertex text box in (TL, TR, BR, BL) order.
///
/// Construction checks that the enclosing rectangle is at least 2x2 px.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[Point; 4]", into = "[Point; 4]")]
pub struct QuadBox {
    vertices: [Point; 4],
}

impl QuadBox {
    pub fn new(vertices: [Point; 4]) -> Result<Self> {
        let rect = bounds_rect(&vertices);
        if rect.width() < 2 || rect.height() < 2 {
            return Err(SpatialError::DegenerateBox {
                width: rect.width() as i64,
                height: rect.height() as i64,
            });
        }
        Ok(Self { vertices })
    }

    /// Builds a box from `[x1, y1, ..., x4, y4]`.
    pub fn from_coords(c: [i32; 8]) -> Result<Self> {
        Self::new([
            Point::new(c[0], c[1]),
            Point::new(c[2], c[3]),
            Point::new(c[4], c[5]),
            Point::new(c[6], c[7]),
        ])
    }

    /// Axis-aligned box covering `[x0, x1] x [y0, y1]` (inclusive vertex coordinates).
    pub fn axis_aligned(x0: i32, y0: i32, x1: i32, y1: i32) -> Result<Self> {
        Self::from_coords([x0, y0, x1, y0, x1, y1, x0, y1])
    }

    pub fn vertices(&self) -> &[Point; 4] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> Point {
        self.vertices[i]
    }

    pub fn coords(&self) -> [i32; 8] {
        let v = &self.vertices;
        [
            v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y,
        ]
    }

    pub fn translate(&self, dx: i32, dy: i32) -> QuadBox {
        let mut v = self.vertices;
        for p in &mut v {
            p.x += dx;
            p.y += dy;
        }
        QuadBox { vertices: v }
    }

    pub fn enclosing_rect(&self) -> RectRegion {
        bounds_rect(&self.vertices)
    }

    /// True when every vertex lies in `rect`.
    pub fn inside(&self, rect: &RectRegion) -> bool {
        self.vertices.iter().all(|&p| rect.contains(p))
    }
}

impl TryFrom<[Point; 4]> for QuadBox {
    type Error = SpatialError;

    fn try_from(v: [Point; 4]) -> Result<Self> {
        QuadBox::new(v)
    }
}

impl From<QuadBox> for [Point; 4] {
    fn from(q: QuadBox) -> Self {
        q.vertices
    }
}

fn bounds_rect(v: &[Point; 4]) -> RectRegion {
    let min_x = v.iter().map(|p| p.x).min().unwrap();
    let max_x = v.iter().map(|p| p.x).max().unwrap();
    let min_y = v.iter().map(|p| p.y).min().unwrap();
    let max_y = v.iter().map(|p| p.y).max().unwrap();
    RectRegion {
        x0: min_x,
        y0: min_y,
        x1: max_x + 1,
        y1: max_y + 1,
    }
}

/// Axis-aligned bounding rectangle `[min x, max x + 1) x [min y, max y + 1)`.
pub fn enclosing_rect(q: &QuadBox) -> Result<RectRegion> {
    let r = q.enclosing_rect();
    if r.width() < 2 || r.height() < 2 {
        return Err(SpatialError::DegenerateBox {
            width: r.width() as i64,
            height: r.height() as i64,
        });
    }
    Ok(r)
}

/// Context window around the initial box: its enclosing rectangle doubled in
/// each dimension about its center (4x the area), clamped to `canvas`.
pub fn background_window(q0: &QuadBox, canvas: &RectRegion) -> Result<RectRegion> {
    let r = enclosing_rect(q0)?;
    let (w, h) = (r.width(), r.height());
    let x0 = (r.x0 - w / 2).max(canvas.x0);
    let x1 = (r.x1 + (w - w / 2)).min(canvas.x1);
    let y0 = (r.y0 - h / 2).max(canvas.y0);
    let y1 = (r.y1 + (h - h / 2)).min(canvas.y1);
    RectRegion::new(x0, y0, x1, y1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Down = 0,
    Up = 1,
    Left = 2,
    Right = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Down,
        Direction::Up,
        Direction::Left,
        Direction::Right,
    ];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Direction::Down => (0, 1),
            Direction::Up => (0, -1),
            Direction::Left => (-1, 0),
            Direction::Right => (1, 0),
        }
    }
}

/// One of the 16 single-pixel vertex moves; `index = vertex * 4 + direction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct BoxAction(u8);

impl BoxAction {
    pub const COUNT: usize = 16;

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(BoxAction(index as u8))
    }

    pub fn new(vertex: usize, direction: Direction) -> Self {
        assert!(vertex < 4, "vertex index {vertex} out of range");
        BoxAction((vertex * 4 + direction as usize) as u8)
    }

    pub fn all() -> impl Iterator<Item = BoxAction> {
        (0..Self::COUNT as u8).map(BoxAction)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn vertex(self) -> usize {
        self.0 as usize / 4
    }

    pub fn direction(self) -> Direction {
        Direction::ALL[self.0 as usize % 4]
    }
}

impl TryFrom<u8> for BoxAction {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        BoxAction::from_index(v as usize).ok_or_else(|| format!("action index {v} out of range"))
    }
}

impl From<BoxAction> for u8 {
    fn from(a: BoxAction) -> u8 {
        a.0
    }
}

/// Moves one vertex by one pixel, clamped to the window's pixel bounds.
/// A move that would make the box degenerate leaves it unchanged.
pub fn apply_action(q: &QuadBox, a: BoxAction, window: &RectRegion) -> QuadBox {
    let mut v = q.vertices;
    let (dx, dy) = a.direction().delta();
    let p = &mut v[a.vertex()];
    p.x = (p.x + dx).clamp(window.x0, window.x1 - 1);
    p.y = (p.y + dy).clamp(window.y0, window.y1 - 1);
    QuadBox::new(v).unwrap_or(*q)
}
