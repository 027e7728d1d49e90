//! Adaptive axis-aligned quadrilateral mesh.
//!
//! The mesh is a forest of quadtrees over an initial uniform grid of root
//! cells. Leaf cells form the active set. Refinement replaces a cell by its
//! four quadrants, coarsening replaces a complete sibling group by its
//! parent, and closure refinement keeps the mesh 1-irregular: edge-adjacent
//! active cells differ by at most one level.
//!
//! Coordinates of shared geometric entities are bitwise identical because
//! midpoints are always computed as `0.5 * (lo + hi)` from the same parent
//! bounds. Neighbor queries exploit this by hashing on the coordinate bits.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::{Error, Result};

pub type CellId = usize;

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Cell diameter: the diagonal length.
    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn mid_x(&self) -> f64 {
        0.5 * (self.x0 + self.x1)
    }

    pub fn mid_y(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }

    /// Quadrant `q` with `(q & 1, q >> 1)` selecting the x/y half.
    pub fn quadrant(&self, q: usize) -> Rect {
        let (mx, my) = (self.mid_x(), self.mid_y());
        let (x0, x1) = if q & 1 == 0 { (self.x0, mx) } else { (mx, self.x1) };
        let (y0, y1) = if q >> 1 == 0 { (self.y0, my) } else { (my, self.y1) };
        Rect::new(x0, y0, x1, y1)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Maps reference coordinates on [0,1]^2 to physical coordinates.
    pub fn map_from_ref(&self, xhat: f64, yhat: f64) -> (f64, f64) {
        (self.x0 + self.width() * xhat, self.y0 + self.height() * yhat)
    }

    /// Maps physical coordinates to reference coordinates on [0,1]^2.
    pub fn map_to_ref(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.width(), (y - self.y0) / self.height())
    }
}

/// A side of a cell or of the rectangular domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Left,
    Right,
    Bottom,
    Top,
}

pub const SIDES: [Side; 4] = [Side::Left, Side::Right, Side::Bottom, Side::Top];

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
            Side::Bottom => 2,
            Side::Top => 3,
        }
    }

    /// 0 for vertical lines (Left/Right), 1 for horizontal lines (Bottom/Top).
    pub fn axis(self) -> usize {
        match self {
            Side::Left | Side::Right => 0,
            Side::Bottom | Side::Top => 1,
        }
    }

    pub fn outward_normal(self) -> [f64; 2] {
        match self {
            Side::Left => [-1.0, 0.0],
            Side::Right => [1.0, 0.0],
            Side::Bottom => [0.0, -1.0],
            Side::Top => [0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Bottom => "bottom",
            Side::Top => "top",
        }
    }
}

/// Refine/coarsen marks consumed by [`QuadMesh::refine_and_coarsen`].
#[derive(Clone, Debug, Default)]
pub struct MarkSet {
    pub refine: BTreeSet<CellId>,
    pub coarsen: BTreeSet<CellId>,
}

impl MarkSet {
    pub fn is_empty(&self) -> bool {
        self.refine.is_empty() && self.coarsen.is_empty()
    }
}

/// What actually happened during one `refine_and_coarsen` call; cell ids are
/// stable across the call, so solutions can be mapped old -> new cells.
#[derive(Clone, Debug, Default)]
pub struct ChangeLog {
    /// Marked cells replaced by their four children.
    pub refined: Vec<(CellId, [CellId; 4])>,
    /// Cells refined to restore 1-irregularity.
    pub closure_refined: Vec<(CellId, [CellId; 4])>,
    /// Sibling groups merged back into their parent: (parent, children).
    pub coarsened: Vec<(CellId, [CellId; 4])>,
    /// Coarsen marks that were dropped (incomplete group or 1-irregularity).
    pub dropped_coarsen: Vec<CellId>,
}

#[derive(Clone, Debug)]
struct CellNode {
    rect: Rect,
    level: u32,
    parent: Option<CellId>,
    children: Option<[CellId; 4]>,
    alive: bool,
}

impl CellNode {
    fn is_active(&self) -> bool {
        self.alive && self.children.is_none()
    }
}

/// One reported mesh edge. Interior edges appear exactly once; on hanging
/// interfaces the coarse side is reported against each fine sub-edge.
#[derive(Clone, Debug)]
pub struct Edge {
    /// Endpoints ordered by increasing coordinate along the edge.
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Cell on the negative side of the edge line (or the only cell for
    /// boundary edges).
    pub left: CellId,
    pub right: EdgeNeighbor,
    /// Unit normal pointing from `left` towards `right`.
    pub normal: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeNeighbor {
    Cell(CellId),
    Boundary(Side),
}

impl Edge {
    pub fn length(&self) -> f64 {
        (self.b[0] - self.a[0]).hypot(self.b[1] - self.a[1])
    }
}

type LineKey = (u8, u64);

#[derive(Clone, Copy, Debug)]
struct SideSeg {
    lo: f64,
    hi: f64,
    cell: CellId,
    /// True when the owning cell lies on the negative side of the line.
    neg_side: bool,
}

/// Hash of all active cell sides keyed by their supporting line.
#[derive(Default)]
struct SideMap {
    lines: HashMap<LineKey, Vec<SideSeg>>,
}

fn side_line_key(rect: &Rect, side: Side) -> LineKey {
    match side {
        Side::Left => (0, rect.x0.to_bits()),
        Side::Right => (0, rect.x1.to_bits()),
        Side::Bottom => (1, rect.y0.to_bits()),
        Side::Top => (1, rect.y1.to_bits()),
    }
}

fn side_interval(rect: &Rect, side: Side) -> (f64, f64) {
    match side.axis() {
        0 => (rect.y0, rect.y1),
        _ => (rect.x0, rect.x1),
    }
}

impl SideMap {
    fn add_cell(&mut self, id: CellId, rect: &Rect) {
        for side in SIDES {
            let (lo, hi) = side_interval(rect, side);
            let neg_side = matches!(side, Side::Right | Side::Top);
            self.lines.entry(side_line_key(rect, side)).or_default().push(SideSeg {
                lo,
                hi,
                cell: id,
                neg_side,
            });
        }
    }

    fn remove_cell(&mut self, id: CellId, rect: &Rect) {
        for side in SIDES {
            if let Some(v) = self.lines.get_mut(&side_line_key(rect, side)) {
                v.retain(|s| s.cell != id);
            }
        }
    }

    /// Active neighbors of `rect` across `side`, sorted by interval start.
    fn neighbors(&self, rect: &Rect, side: Side) -> Vec<CellId> {
        let (lo, hi) = side_interval(rect, side);
        // A neighbor sits on the opposite orientation of the shared line:
        // e.g. our Right side matches segments whose cell lies on the
        // positive side of the line (their Left side).
        let want_neg = !matches!(side, Side::Right | Side::Top);
        let mut found: Vec<(f64, CellId)> = Vec::new();
        if let Some(v) = self.lines.get(&side_line_key(rect, side)) {
            for s in v {
                if s.neg_side == want_neg && s.lo < hi && lo < s.hi {
                    found.push((s.lo, s.cell));
                }
            }
        }
        found.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        found.into_iter().map(|(_, c)| c).collect()
    }
}

/// 1-irregular quadtree forest of axis-aligned rectangular cells.
#[derive(Clone, Debug)]
pub struct QuadMesh {
    domain: Rect,
    cells: Vec<CellNode>,
    active: Vec<CellId>,
    active_pos: HashMap<CellId, usize>,
    /// Per active position, per side: active neighbor cells (0 = boundary,
    /// 1 = equal level or coarser, 2 = finer).
    neighbors: Vec<[Vec<CellId>; 4]>,
    edges: Vec<Edge>,
    vertices: Vec<[f64; 2]>,
}

impl QuadMesh {
    /// Uniform n-by-n mesh of root cells over `domain`.
    pub fn new_uniform(domain: Rect, n: usize) -> Result<QuadMesh> {
        if n == 0 {
            return Err(Error::InvalidArgument("cells per axis must be at least 1".into()));
        }
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(Error::InvalidArgument("domain rectangle is degenerate".into()));
        }
        let coord = |lo: f64, hi: f64, i: usize| -> f64 {
            if i == 0 {
                lo
            } else if i == n {
                hi
            } else {
                lo + (hi - lo) * i as f64 / n as f64
            }
        };
        let xs: Vec<f64> = (0..=n).map(|i| coord(domain.x0, domain.x1, i)).collect();
        let ys: Vec<f64> = (0..=n).map(|i| coord(domain.y0, domain.y1, i)).collect();
        let mut cells = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                cells.push(CellNode {
                    rect: Rect::new(xs[i], ys[j], xs[i + 1], ys[j + 1]),
                    level: 0,
                    parent: None,
                    children: None,
                    alive: true,
                });
            }
        }
        Ok(Self::finalize(domain, cells))
    }

    fn finalize(domain: Rect, cells: Vec<CellNode>) -> QuadMesh {
        let active: Vec<CellId> =
            (0..cells.len()).filter(|&i| cells[i].is_active()).collect();
        let active_pos: HashMap<CellId, usize> =
            active.iter().enumerate().map(|(p, &id)| (id, p)).collect();

        let mut side_map = SideMap::default();
        for &id in &active {
            side_map.add_cell(id, &cells[id].rect);
        }

        let mut neighbors = Vec::with_capacity(active.len());
        for &id in &active {
            let rect = cells[id].rect;
            let mut per_side: [Vec<CellId>; 4] = Default::default();
            for side in SIDES {
                per_side[side.index()] = side_map.neighbors(&rect, side);
            }
            neighbors.push(per_side);
        }

        let mut edges = Vec::new();
        for (pos, &id) in active.iter().enumerate() {
            let rect = cells[id].rect;
            for side in SIDES {
                let nbrs = &neighbors[pos][side.index()];
                if nbrs.is_empty() {
                    // Must be a domain boundary side.
                    let on_boundary = match side {
                        Side::Left => rect.x0 == domain.x0,
                        Side::Right => rect.x1 == domain.x1,
                        Side::Bottom => rect.y0 == domain.y0,
                        Side::Top => rect.y1 == domain.y1,
                    };
                    assert!(on_boundary, "interior side without neighbor: cell {id} {side:?}");
                    let (a, b) = side_endpoints(&rect, side);
                    edges.push(Edge {
                        a,
                        b,
                        left: id,
                        right: EdgeNeighbor::Boundary(side),
                        normal: side.outward_normal(),
                    });
                } else if matches!(side, Side::Right | Side::Top) {
                    // Emit interior edges from the negative-side cell only,
                    // once per (sub-)interval.
                    for &nb in nbrs {
                        let other = cells[nb].rect;
                        let (lo, hi) = side_interval(&rect, side);
                        let (olo, ohi) = side_interval(&other, side);
                        let (lo, hi) = (lo.max(olo), hi.min(ohi));
                        let (a, b) = match side {
                            Side::Right => ([rect.x1, lo], [rect.x1, hi]),
                            Side::Top => ([lo, rect.y1], [hi, rect.y1]),
                            _ => unreachable!(),
                        };
                        edges.push(Edge {
                            a,
                            b,
                            left: id,
                            right: EdgeNeighbor::Cell(nb),
                            normal: side.outward_normal(),
                        });
                    }
                }
            }
        }

        // Deduplicated corner vertices of active cells, ordered by coordinate
        // bits for determinism.
        let mut vset: BTreeMap<(u64, u64), [f64; 2]> = BTreeMap::new();
        for &id in &active {
            let r = cells[id].rect;
            for (x, y) in [(r.x0, r.y0), (r.x1, r.y0), (r.x0, r.y1), (r.x1, r.y1)] {
                vset.insert((x.to_bits(), y.to_bits()), [x, y]);
            }
        }
        let vertices = vset.into_values().collect();

        QuadMesh { domain, cells, active, active_pos, neighbors, edges, vertices }
    }

    pub fn domain(&self) -> Rect {
        self.domain
    }

    pub fn n_active(&self) -> usize {
        self.active.len()
    }

    /// Active cell ids in ascending order.
    pub fn active_cells(&self) -> &[CellId] {
        &self.active
    }

    /// Position of an active cell id within [`Self::active_cells`].
    pub fn active_position(&self, id: CellId) -> Option<usize> {
        self.active_pos.get(&id).copied()
    }

    pub fn cell_rect(&self, id: CellId) -> Rect {
        self.cells[id].rect
    }

    pub fn cell_level(&self, id: CellId) -> u32 {
        self.cells[id].level
    }

    pub fn is_active(&self, id: CellId) -> bool {
        id < self.cells.len() && self.cells[id].is_active()
    }

    pub fn parent(&self, id: CellId) -> Option<CellId> {
        self.cells[id].parent
    }

    /// Active neighbors of an active cell across `side`.
    pub fn neighbors_of(&self, id: CellId, side: Side) -> &[CellId] {
        let pos = self.active_pos[&id];
        &self.neighbors[pos][side.index()]
    }

    /// All mesh edges: interior edges once each, hanging interfaces split
    /// per fine sub-edge, boundary edges tagged with the domain side.
    pub fn active_edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Deduplicated corner vertices of all active cells.
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Applies refinement and coarsening marks and returns the new mesh.
    ///
    /// Every refine-marked cell is split; a sibling group is merged only if
    /// all four siblings are coarsen-marked, none is refine-marked, and the
    /// merge keeps the mesh 1-irregular. Closure refinement restores
    /// 1-irregularity after marked refinement. All adjustments are reported
    /// in the change log.
    pub fn refine_and_coarsen(&self, marks: &MarkSet) -> Result<(QuadMesh, ChangeLog)> {
        for &id in marks.refine.iter().chain(marks.coarsen.iter()) {
            if !self.is_active(id) {
                return Err(Error::InvalidArgument(format!("mark on non-active cell {id}")));
            }
        }
        if let Some(&id) = marks.refine.intersection(&marks.coarsen).next() {
            return Err(Error::InvalidArgument(format!(
                "cell {id} marked for both refinement and coarsening"
            )));
        }

        let mut cells = self.cells.clone();
        let mut log = ChangeLog::default();

        let mut side_map = SideMap::default();
        for (id, cell) in cells.iter().enumerate() {
            if cell.is_active() {
                side_map.add_cell(id, &cell.rect);
            }
        }

        let split = |cells: &mut Vec<CellNode>, side_map: &mut SideMap, id: CellId| {
            let rect = cells[id].rect;
            let level = cells[id].level;
            let base = cells.len();
            let kids = [base, base + 1, base + 2, base + 3];
            for q in 0..4 {
                cells.push(CellNode {
                    rect: rect.quadrant(q),
                    level: level + 1,
                    parent: Some(id),
                    children: None,
                    alive: true,
                });
            }
            cells[id].children = Some(kids);
            side_map.remove_cell(id, &rect);
            for &k in &kids {
                side_map.add_cell(k, &cells[k].rect);
            }
            kids
        };

        for &id in &marks.refine {
            let kids = split(&mut cells, &mut side_map, id);
            log.refined.push((id, kids));
        }

        // Closure: refine until no active cell has a neighbor more than one
        // level finer.
        loop {
            let mut to_close: BTreeSet<CellId> = BTreeSet::new();
            for id in 0..cells.len() {
                if !cells[id].is_active() {
                    continue;
                }
                let rect = cells[id].rect;
                for side in SIDES {
                    for nb in side_map.neighbors(&rect, side) {
                        if cells[nb].level > cells[id].level + 1 {
                            to_close.insert(id);
                        }
                    }
                }
            }
            if to_close.is_empty() {
                break;
            }
            for id in to_close {
                let kids = split(&mut cells, &mut side_map, id);
                log.closure_refined.push((id, kids));
            }
        }

        // Coarsening: complete sibling groups only, dropped when merging
        // would break 1-irregularity.
        let mut groups: BTreeMap<CellId, Vec<CellId>> = BTreeMap::new();
        for &id in &marks.coarsen {
            match cells[id].parent {
                Some(p) => groups.entry(p).or_default().push(id),
                None => log.dropped_coarsen.push(id),
            }
        }
        for (parent, marked) in groups {
            let kids = cells[parent].children.expect("marked cell has a parent link");
            let complete = marked.len() == 4
                && kids.iter().all(|&k| cells[k].is_active() && marks.coarsen.contains(&k));
            if !complete {
                log.dropped_coarsen.extend(marked);
                continue;
            }
            let prect = cells[parent].rect;
            let plevel = cells[parent].level;
            let mut violates = false;
            for side in SIDES {
                for nb in side_map.neighbors(&prect, side) {
                    if !kids.contains(&nb) && cells[nb].level > plevel + 1 {
                        violates = true;
                    }
                }
            }
            if violates {
                log.dropped_coarsen.extend(marked);
                continue;
            }
            for &k in &kids {
                side_map.remove_cell(k, &cells[k].rect);
                cells[k].alive = false;
            }
            cells[parent].children = None;
            side_map.add_cell(parent, &prect);
            log.coarsened.push((parent, kids));
        }

        let mesh = Self::finalize(self.domain, cells);
        mesh.check_invariants();
        Ok((mesh, log))
    }

    /// Marks every active cell for refinement.
    pub fn refine_all_marks(&self) -> MarkSet {
        MarkSet { refine: self.active.iter().copied().collect(), coarsen: BTreeSet::new() }
    }

    /// Panics if the partition or 1-irregularity invariant is broken.
    pub fn check_invariants(&self) {
        let total: f64 = self.active.iter().map(|&id| self.cells[id].rect.area()).sum();
        let rel = (total - self.domain.area()).abs() / self.domain.area();
        assert!(rel < 1e-12, "active cells do not partition the domain: rel error {rel:e}");
        for (pos, &id) in self.active.iter().enumerate() {
            let level = self.cells[id].level as i64;
            for side in SIDES {
                let nbrs = &self.neighbors[pos][side.index()];
                assert!(nbrs.len() <= 2, "more than two neighbors across one side");
                for &nb in nbrs {
                    let diff = (self.cells[nb].level as i64 - level).abs();
                    assert!(diff <= 1, "1-irregularity violated between {id} and {nb}");
                }
            }
        }
    }
}

fn side_endpoints(rect: &Rect, side: Side) -> ([f64; 2], [f64; 2]) {
    match side {
        Side::Left => ([rect.x0, rect.y0], [rect.x0, rect.y1]),
        Side::Right => ([rect.x1, rect.y0], [rect.x1, rect.y1]),
        Side::Bottom => ([rect.x0, rect.y0], [rect.x1, rect.y0]),
        Side::Top => ([rect.x0, rect.y1], [rect.x1, rect.y1]),
    }
}
