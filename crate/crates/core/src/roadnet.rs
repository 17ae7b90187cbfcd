//! Road-grid geometry: links, intersections, the synthetic Manhattan layout,
//! position-to-link assignment and rasterization onto a cell grid.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default snapping tolerance for [`RoadGrid::link_of`], in meters.
pub const DEFAULT_SNAP: f64 = 2.0;

const COINCIDENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point, f: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * f,
            self.y + (other.y - self.y) * f,
        )
    }
}

/// Where a link endpoint sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    Intersection(usize),
    Border,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub id: usize,
    pub ends: [Point; 2],
    pub kinds: [Endpoint; 2],
    pub length: f64,
    pub is_border_stub: bool,
}

impl Link {
    pub fn midpoint(&self) -> Point {
        self.ends[0].lerp(&self.ends[1], 0.5)
    }

    /// Perpendicular distance from `p` to the segment.
    pub fn distance_to(&self, p: &Point) -> f64 {
        point_segment_distance(p, &self.ends[0], &self.ends[1])
    }

    /// Index (0 or 1) of the endpoint at intersection `node`, if any.
    pub fn end_at(&self, node: usize) -> Option<usize> {
        self.kinds
            .iter()
            .position(|k| *k == Endpoint::Intersection(node))
    }
}

pub fn point_segment_distance(p: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.dist(&Point::new(a.x + t * dx, a.y + t * dy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn contains(&self, p: &Point, margin: f64) -> bool {
        p.x >= self.min.x - margin
            && p.x <= self.max.x + margin
            && p.y >= self.min.y - margin
            && p.y <= self.max.y + margin
    }
}

/// Road grid partitioned into straight links. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGrid {
    links: Vec<Link>,
    intersections: Vec<Point>,
    adjacency: Vec<Vec<usize>>,
    bbox: BoundingBox,
}

impl RoadGrid {
    /// Build a grid from raw segments. Endpoints shared by two or more
    /// segments become intersections; the rest are border endpoints.
    pub fn from_segments(segments: &[(Point, Point)], bbox: Option<BoundingBox>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::DegenerateGrid("grid has no links".into()));
        }
        let mut points: Vec<(Point, usize)> = Vec::new();
        let mut find_or_add = |p: Point| -> usize {
            if let Some(i) = points.iter().position(|(q, _)| q.dist(&p) < COINCIDENT) {
                points[i].1 += 1;
                i
            } else {
                points.push((p, 1));
                points.len() - 1
            }
        };
        let ends: Vec<[usize; 2]> = segments
            .iter()
            .map(|(a, b)| [find_or_add(*a), find_or_add(*b)])
            .collect();

        let mut node_of_point = vec![None; points.len()];
        let mut intersections = Vec::new();
        for (i, (p, degree)) in points.iter().enumerate() {
            if *degree >= 2 {
                node_of_point[i] = Some(intersections.len());
                intersections.push(*p);
            }
        }

        let mut links = Vec::with_capacity(segments.len());
        let mut adjacency = vec![Vec::new(); intersections.len()];
        for (id, ((a, b), pe)) in segments.iter().zip(&ends).enumerate() {
            let length = a.dist(b);
            if length <= 0.0 {
                return Err(Error::DegenerateGrid(format!("link {id} has zero length")));
            }
            let kinds = pe.map(|pi| match node_of_point[pi] {
                Some(n) => Endpoint::Intersection(n),
                None => Endpoint::Border,
            });
            for k in kinds {
                if let Endpoint::Intersection(n) = k {
                    adjacency[n].push(id);
                }
            }
            links.push(Link {
                id,
                ends: [*a, *b],
                kinds,
                length,
                is_border_stub: kinds.contains(&Endpoint::Border),
            });
        }

        let bbox = bbox.unwrap_or_else(|| {
            let mut min = Point::new(f64::INFINITY, f64::INFINITY);
            let mut max = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
            for l in &links {
                for p in &l.ends {
                    min.x = min.x.min(p.x);
                    min.y = min.y.min(p.y);
                    max.x = max.x.max(p.x);
                    max.y = max.y.max(p.y);
                }
            }
            BoundingBox { min, max }
        });

        Ok(Self {
            links,
            intersections,
            adjacency,
            bbox,
        })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn link(&self, id: usize) -> &Link {
        &self.links[id]
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn intersections(&self) -> &[Point] {
        &self.intersections
    }

    /// Link ids incident to intersection `node`.
    pub fn incident(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn bbox(&self) -> BoundingBox {
        self.bbox
    }

    pub fn border_stubs(&self) -> impl Iterator<Item = &Link> {
        self.links.iter().filter(|l| l.is_border_stub)
    }

    /// Nearest link within `snap` meters of `position`; ties go to the smallest id.
    pub fn link_of(&self, position: Point, snap: f64) -> Result<usize> {
        let off_grid = Error::OffGrid {
            x: position.x,
            y: position.y,
            tolerance: snap,
        };
        if !self.bbox.contains(&position, snap) {
            return Err(off_grid);
        }
        let mut best: Option<(usize, f64)> = None;
        for link in &self.links {
            let d = link.distance_to(&position);
            if d <= snap && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((link.id, d));
            }
        }
        best.map(|(id, _)| id).ok_or(off_grid)
    }

    /// Bin link midpoints into an `h` x `w` cell grid over the bounding box.
    pub fn raster_embed(&self, h: usize, w: usize, require_injective: bool) -> Result<RasterEmbedding> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidParameter(format!(
                "raster dimensions must be positive, got {h}x{w}"
            )));
        }
        let cell_w = self.bbox.width() / w as f64;
        let cell_h = self.bbox.height() / h as f64;
        let cell_of: Vec<(usize, usize)> = self
            .links
            .iter()
            .map(|l| {
                let m = l.midpoint();
                (
                    bin(m.y - self.bbox.min.y, cell_h, h),
                    bin(m.x - self.bbox.min.x, cell_w, w),
                )
            })
            .collect();
        let embedding = RasterEmbedding {
            h,
            w,
            origin: self.bbox.min,
            cell_w,
            cell_h,
            cell_of,
        };
        if require_injective {
            let mut owner = vec![None; h * w];
            for (id, &(r, c)) in embedding.cell_of.iter().enumerate() {
                if let Some(first) = owner[r * w + c] {
                    return Err(Error::Resolution {
                        first,
                        second: id,
                        row: r,
                        col: c,
                    });
                }
                owner[r * w + c] = Some(id);
            }
        }
        Ok(embedding)
    }

    /// Link whose midpoint is closest to `p` (smallest id on ties).
    pub fn nearest_midpoint(&self, p: Point) -> usize {
        let mut best = (0, f64::INFINITY);
        for l in &self.links {
            let d = l.midpoint().dist(&p);
            if d < best.1 {
                best = (l.id, d);
            }
        }
        best.0
    }

    pub fn to_document(&self) -> GridDocument {
        GridDocument {
            links: self
                .links
                .iter()
                .map(|l| LinkRecord {
                    id: l.id,
                    x1: l.ends[0].x,
                    y1: l.ends[0].y,
                    x2: l.ends[1].x,
                    y2: l.ends[1].y,
                    border_stub: l.is_border_stub,
                })
                .collect(),
            intersections: self
                .intersections
                .iter()
                .map(|p| IntersectionRecord { x: p.x, y: p.y })
                .collect(),
            bbox: Some(self.bbox),
        }
    }

    pub fn from_document(doc: &GridDocument) -> Result<Self> {
        let mut records: Vec<&LinkRecord> = doc.links.iter().collect();
        records.sort_by_key(|r| r.id);
        for (expected, r) in records.iter().enumerate() {
            if r.id != expected {
                return Err(Error::InvalidParameter(format!(
                    "link ids must be dense 0..L-1; found {} at position {expected}",
                    r.id
                )));
            }
        }
        let segments: Vec<(Point, Point)> = records
            .iter()
            .map(|r| (Point::new(r.x1, r.y1), Point::new(r.x2, r.y2)))
            .collect();
        RoadGrid::from_segments(&segments, doc.bbox)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("grid serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(&serde_json::from_str(&text)?)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Cell index of offset `v` with cell size `size`; values exactly on an
/// interior boundary go to the lower cell.
fn bin(v: f64, size: f64, n: usize) -> usize {
    if size <= 0.0 {
        return 0;
    }
    let q = v / size;
    let mut idx = q.floor();
    if idx == q && idx > 0.0 {
        idx -= 1.0;
    }
    (idx.max(0.0) as usize).min(n - 1)
}

/// Synthetic Manhattan grid of `rows` x `cols` square blocks.
///
/// Intersections are the `(rows-1) x (cols-1)` interior lattice points; links
/// are the lattice edges plus one border stub per outward direction of every
/// boundary intersection. Link ids: horizontal lattice edges, vertical lattice
/// edges, then stubs (west, east, south, north).
pub fn build_manhattan(rows: usize, cols: usize, block_side: f64) -> Result<RoadGrid> {
    if rows < 2 || cols < 2 {
        return Err(Error::DegenerateGrid(format!(
            "need at least 2x2 blocks for an interior intersection, got {rows}x{cols}"
        )));
    }
    if !(block_side > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "block side must be positive, got {block_side}"
        )));
    }
    let (ni, nj) = (rows - 1, cols - 1);
    let node = |i: usize, j: usize| Point::new((j + 1) as f64 * block_side, (i + 1) as f64 * block_side);
    let mut segments = Vec::new();
    for i in 0..ni {
        for j in 0..nj.saturating_sub(1) {
            segments.push((node(i, j), node(i, j + 1)));
        }
    }
    for j in 0..nj {
        for i in 0..ni.saturating_sub(1) {
            segments.push((node(i, j), node(i + 1, j)));
        }
    }
    let (width, height) = (cols as f64 * block_side, rows as f64 * block_side);
    for i in 0..ni {
        let p = node(i, 0);
        segments.push((p, Point::new(0.0, p.y)));
    }
    for i in 0..ni {
        let p = node(i, nj - 1);
        segments.push((p, Point::new(width, p.y)));
    }
    for j in 0..nj {
        let p = node(0, j);
        segments.push((p, Point::new(p.x, 0.0)));
    }
    for j in 0..nj {
        let p = node(ni - 1, j);
        segments.push((p, Point::new(p.x, height)));
    }
    RoadGrid::from_segments(
        &segments,
        Some(BoundingBox {
            min: Point::new(0.0, 0.0),
            max: Point::new(width, height),
        }),
    )
}

/// Closed-form link count of [`build_manhattan`].
pub fn manhattan_link_count(rows: usize, cols: usize) -> usize {
    (rows - 1) * (cols - 2) + (cols - 1) * (rows - 2) + 2 * (rows - 1) + 2 * (cols - 1)
}

/// Mapping of links onto an `h` x `w` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterEmbedding {
    pub h: usize,
    pub w: usize,
    pub origin: Point,
    pub cell_w: f64,
    pub cell_h: f64,
    /// `(row, col)` per link id.
    pub cell_of: Vec<(usize, usize)>,
}

impl RasterEmbedding {
    pub fn num_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn num_links(&self) -> usize {
        self.cell_of.len()
    }

    pub fn flat_cell(&self, link: usize) -> usize {
        let (r, c) = self.cell_of[link];
        r * self.w + c
    }

    /// Links per flat cell index.
    pub fn links_by_cell(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.num_cells()];
        for l in 0..self.num_links() {
            cells[self.flat_cell(l)].push(l);
        }
        cells
    }

    pub fn is_injective(&self) -> bool {
        self.links_by_cell().iter().all(|c| c.len() <= 1)
    }

    /// Scatter per-link values onto the raster, averaging links that share a cell.
    pub fn rasterize(&self, per_link: &[f64]) -> Vec<f64> {
        let mut sum = vec![0.0; self.num_cells()];
        let mut count = vec![0usize; self.num_cells()];
        for (l, v) in per_link.iter().enumerate() {
            let c = self.flat_cell(l);
            sum[c] += v;
            count[c] += 1;
        }
        for (s, n) in sum.iter_mut().zip(&count) {
            if *n > 1 {
                *s /= *n as f64;
            }
        }
        sum
    }

    /// Read each link's value back from its cell.
    pub fn gather(&self, cells: &[f64]) -> Vec<f64> {
        (0..self.num_links())
            .map(|l| cells[self.flat_cell(l)])
            .collect()
    }

    /// Cells holding at least one link.
    pub fn occupancy(&self) -> Vec<bool> {
        let mut occ = vec![false; self.num_cells()];
        for l in 0..self.num_links() {
            occ[self.flat_cell(l)] = true;
        }
        occ
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub id: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub border_stub: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionRecord {
    pub x: f64,
    pub y: f64,
}

/// On-disk grid format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDocument {
    pub links: Vec<LinkRecord>,
    pub intersections: Vec<IntersectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}
