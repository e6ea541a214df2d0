//! Positions, unit-disk connectivity and the sector geometry used by scanning.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point on the deployment plane, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

pub fn euclidean_distance(a: Position, b: Position) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    (dx * dx + dy * dy).sqrt()
}

/// Deployment area anchored at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

impl Area {
    pub fn new(width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return Err(Error::invalid("area", "width and height must be positive"));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, p: Position) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }

    pub fn as_region(&self) -> Region {
        Region {
            x: 0.0,
            y: 0.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// An axis-aligned rectangle, used for sub-areas where demand is concentrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl Region {
    pub fn contains(&self, p: Position) -> bool {
        p.x >= self.x && p.x <= self.x + self.width && p.y >= self.y && p.y <= self.y + self.height
    }

    pub fn diagonal(&self) -> f64 {
        self.width.hypot(self.height)
    }
}

/// Angular section around `origin`, counterclockwise from `start_angle`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sector {
    pub origin: Position,
    pub start_angle: f64,
    pub width: f64,
}

impl Sector {
    pub fn new(origin: Position, start_angle: f64, width: f64) -> Result<Self> {
        if !(width > 0.0 && width <= TAU) {
            return Err(Error::invalid("sector.width", "must lie in (0, 2π]"));
        }
        Ok(Self {
            origin,
            start_angle: start_angle.rem_euclid(TAU),
            width,
        })
    }
}

/// Whether `p` lies in the sector. The origin itself is always inside.
pub fn in_sector(s: &Sector, p: Position) -> bool {
    let dx = p.x - s.origin.x;
    let dy = p.y - s.origin.y;
    if dx == 0.0 && dy == 0.0 {
        return true;
    }
    if s.width >= TAU {
        return true;
    }
    let angle = dy.atan2(dx).rem_euclid(TAU);
    let offset = (angle - s.start_angle).rem_euclid(TAU);
    offset < s.width
}

/// Snapshot of node positions and unit-disk adjacency.
///
/// Nodes are stored densely; `index_of` maps an id to its slot. Adjacency
/// order is deterministic but not sorted for grid-built graphs.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    ids: Vec<NodeId>,
    /// Slot by id when ids are small integers, `u32::MAX` for absent ids.
    dense: Vec<u32>,
    sparse: HashMap<NodeId, usize>,
    positions: Vec<Position>,
    range: f64,
    offsets: Vec<usize>,
    flat: Vec<usize>,
}

impl NetworkGraph {
    /// Builds a graph from explicit edges. Edges are symmetrized; self-loops
    /// and unknown endpoints are rejected.
    pub fn from_edges(
        nodes: &[(NodeId, Position)],
        range: f64,
        edges: &[(NodeId, NodeId)],
    ) -> Result<Self> {
        let mut g = Self::empty(nodes, range)?;
        let mut lists = vec![Vec::new(); nodes.len()];
        for &(a, b) in edges {
            let ia = g.index_of(a).ok_or(Error::UnknownNode(a))?;
            let ib = g.index_of(b).ok_or(Error::UnknownNode(b))?;
            if ia == ib {
                return Err(Error::invalid("edges", format!("self-loop at node {a}")));
            }
            lists[ia].push(ib);
            lists[ib].push(ia);
        }
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
            g.flat.extend_from_slice(list);
            g.offsets.push(g.flat.len());
        }
        Ok(g)
    }

    /// Nodes only; adjacency must be appended in slot order.
    fn empty(nodes: &[(NodeId, Position)], range: f64) -> Result<Self> {
        let max_id = nodes.iter().map(|(id, _)| id.0 as usize).max().unwrap_or(0);
        let use_dense = max_id <= 4 * nodes.len() + 16;
        let mut dense = if use_dense { vec![u32::MAX; max_id + 1] } else { Vec::new() };
        let mut sparse = HashMap::new();
        for (i, (id, _)) in nodes.iter().enumerate() {
            let dup = if use_dense {
                std::mem::replace(&mut dense[id.index()], i as u32) != u32::MAX
            } else {
                sparse.insert(*id, i).is_some()
            };
            if dup {
                return Err(Error::DuplicateNode(*id));
            }
        }
        let mut offsets = Vec::with_capacity(nodes.len() + 1);
        offsets.push(0);
        Ok(Self {
            ids: nodes.iter().map(|(id, _)| *id).collect(),
            dense,
            sparse,
            positions: nodes.iter().map(|(_, p)| *p).collect(),
            range,
            offsets,
            flat: Vec::new(),
        })
    }

    fn adj(&self, i: usize) -> &[usize] {
        &self.flat[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn range(&self) -> f64 {
        self.range
    }

    pub fn node_ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        if self.dense.is_empty() {
            self.sparse.get(&id).copied()
        } else {
            match self.dense.get(id.index()) {
                Some(&i) if i != u32::MAX => Some(i as usize),
                _ => None,
            }
        }
    }

    pub fn id_at(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }

    pub fn position(&self, id: NodeId) -> Option<Position> {
        self.index_of(id).map(|i| self.positions[i])
    }

    pub fn position_at_index(&self, idx: usize) -> Position {
        self.positions[idx]
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn neighbor_indices(&self, idx: usize) -> &[usize] {
        self.adj(idx)
    }

    pub fn neighbors(&self, id: NodeId) -> Vec<NodeId> {
        match self.index_of(id) {
            Some(i) => self.adj(i).iter().map(|&j| self.ids[j]).collect(),
            None => Vec::new(),
        }
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.index_of(id).map_or(0, |i| self.adj(i).len())
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) => self.adj(i).contains(&j),
            _ => false,
        }
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for &j in self.adj(i) {
                if i < j {
                    out.push((self.ids[i], self.ids[j]));
                }
            }
        }
        out
    }
}

/// Unit-disk graph: nodes are adjacent iff their distance is at most `range`.
///
/// Neighbor search uses a uniform grid with cells of side `range`, so only
/// the 3×3 block of cells around each node is examined.
pub fn build_graph(nodes: &[(NodeId, Position)], range: f64) -> Result<NetworkGraph> {
    if !(range > 0.0) {
        return Err(Error::invalid("range", "must be positive"));
    }
    let mut g = NetworkGraph::empty(nodes, range)?;
    if nodes.is_empty() {
        return Ok(g);
    }
    let (min_x, min_y) = nodes.iter().fold((f64::MAX, f64::MAX), |(mx, my), (_, p)| {
        (mx.min(p.x), my.min(p.y))
    });
    let cell: Vec<(usize, usize)> = nodes
        .iter()
        .map(|(_, p)| {
            (
                // non-negative, so truncation is floor
                ((p.x - min_x) / range) as usize,
                ((p.y - min_y) / range) as usize,
            )
        })
        .collect();
    let cols = cell.iter().map(|c| c.0).max().unwrap_or(0) + 1;
    let rows = cell.iter().map(|c| c.1).max().unwrap_or(0) + 1;
    // counting sort of nodes by cell
    let mut start = vec![0usize; cols * rows + 1];
    for &(cx, cy) in &cell {
        start[cy * cols + cx + 1] += 1;
    }
    for k in 1..start.len() {
        start[k] += start[k - 1];
    }
    let mut fill = start.clone();
    let mut members = vec![0usize; nodes.len()];
    for (i, &(cx, cy)) in cell.iter().enumerate() {
        let c = cy * cols + cx;
        members[fill[c]] = i;
        fill[c] += 1;
    }
    // coordinates in cell order: the three cells of a grid row are contiguous
    let xs: Vec<f64> = members.iter().map(|&i| nodes[i].1.x).collect();
    let ys: Vec<f64> = members.iter().map(|&i| nodes[i].1.y).collect();
    let r2 = range * range;
    let loose = r2 * (1.0 + 1e-9);
    for (i, (_, p)) in nodes.iter().enumerate() {
        let (cx, cy) = cell[i];
        let (lo_x, hi_x) = (cx.saturating_sub(1), (cx + 1).min(cols - 1));
        for ny in cy.saturating_sub(1)..=(cy + 1).min(rows - 1) {
            let a = start[ny * cols + lo_x];
            let b = start[ny * cols + hi_x + 1];
            for k in a..b {
                let (dx, dy) = (p.x - xs[k], p.y - ys[k]);
                let d2 = dx * dx + dy * dy;
                // exact test only near the boundary
                if d2 <= loose && (d2 < r2 || d2.sqrt() <= range) {
                    let j = members[k];
                    if j != i {
                        g.flat.push(j);
                    }
                }
            }
        }
        g.offsets.push(g.flat.len());
    }
    Ok(g)
}

/// Multi-source BFS. Entry `i` is the hop count of `g.id_at(i)` to its
/// nearest source, `None` if unreachable.
pub fn hop_distances(g: &NetworkGraph, sources: &[NodeId]) -> Vec<Option<u32>> {
    let mut dist = vec![None; g.len()];
    let mut queue = VecDeque::new();
    for s in sources {
        if let Some(i) = g.index_of(*s) {
            if dist[i].is_none() {
                dist[i] = Some(0);
                queue.push_back(i);
            }
        }
    }
    while let Some(u) = queue.pop_front() {
        let du = dist[u].unwrap_or(0);
        for &v in g.neighbor_indices(u) {
            if dist[v].is_none() {
                dist[v] = Some(du + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

/// All-pairs hop distances (`None` when disconnected).
pub fn all_pairs_hops(g: &NetworkGraph) -> Vec<Vec<Option<u32>>> {
    (0..g.len())
        .map(|i| hop_distances(g, &[g.id_at(i)]))
        .collect()
}

/// A parsed graph file together with optional demand and cost sections.
#[derive(Debug, Clone)]
pub struct GraphFile {
    pub graph: NetworkGraph,
    pub demand: BTreeMap<NodeId, f64>,
    pub costs: BTreeMap<NodeId, f64>,
}

/// Text edge-list: a header `N range`, `N` lines `id x y`, then `i j` edge
/// lines. Optional `demand` and `cost` section headers introduce `id value`
/// lines. `#` starts a comment.
pub fn write_edge_list(g: &NetworkGraph) -> String {
    let mut out = format!("{} {}\n", g.len(), g.range());
    for (i, id) in g.node_ids().iter().enumerate() {
        let p = g.position_at_index(i);
        out.push_str(&format!("{} {} {}\n", id, p.x, p.y));
    }
    for (a, b) in g.edges() {
        out.push_str(&format!("{a} {b}\n"));
    }
    out
}

pub fn parse_edge_list(text: &str) -> Result<GraphFile> {
    #[derive(PartialEq)]
    enum Section {
        Nodes,
        Edges,
        Demand,
        Cost,
    }
    let parse_err = |line: usize, msg: &str| Error::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let mut head = header.split_whitespace();
    let n: usize = head
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(hline, "header must be `N range`"))?;
    let range: f64 = head
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(hline, "header must be `N range`"))?;

    let mut nodes = Vec::with_capacity(n);
    let mut edges = Vec::new();
    let mut demand = BTreeMap::new();
    let mut costs = BTreeMap::new();
    let mut section = if n == 0 { Section::Edges } else { Section::Nodes };

    for (ln, line) in lines {
        match line {
            "demand" => {
                section = Section::Demand;
                continue;
            }
            "cost" => {
                section = Section::Cost;
                continue;
            }
            _ => {}
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match section {
            Section::Nodes => {
                if toks.len() != 3 {
                    return Err(parse_err(ln, "node line must be `id x y`"));
                }
                let id: u32 = toks[0].parse().map_err(|_| parse_err(ln, "bad node id"))?;
                let x: f64 = toks[1].parse().map_err(|_| parse_err(ln, "bad x"))?;
                let y: f64 = toks[2].parse().map_err(|_| parse_err(ln, "bad y"))?;
                nodes.push((NodeId(id), Position::new(x, y)));
                if nodes.len() == n {
                    section = Section::Edges;
                }
            }
            Section::Edges => {
                if toks.len() != 2 {
                    return Err(parse_err(ln, "edge line must be `i j`"));
                }
                let a: u32 = toks[0].parse().map_err(|_| parse_err(ln, "bad edge endpoint"))?;
                let b: u32 = toks[1].parse().map_err(|_| parse_err(ln, "bad edge endpoint"))?;
                edges.push((NodeId(a), NodeId(b)));
            }
            Section::Demand | Section::Cost => {
                if toks.len() != 2 {
                    return Err(parse_err(ln, "expected `id value`"));
                }
                let id: u32 = toks[0].parse().map_err(|_| parse_err(ln, "bad node id"))?;
                let v: f64 = toks[1].parse().map_err(|_| parse_err(ln, "bad value"))?;
                if v < 0.0 || !v.is_finite() {
                    return Err(parse_err(ln, "value must be finite and non-negative"));
                }
                let map = if section == Section::Demand {
                    &mut demand
                } else {
                    &mut costs
                };
                map.insert(NodeId(id), v);
            }
        }
    }
    if nodes.len() != n {
        return Err(parse_err(hline, "fewer node lines than declared"));
    }
    let graph = NetworkGraph::from_edges(&nodes, range, &edges).map_err(|e| Error::Parse {
        line: hline,
        msg: e.to_string(),
    })?;
    for id in demand.keys().chain(costs.keys()) {
        if graph.index_of(*id).is_none() {
            return Err(Error::UnknownNode(*id));
        }
    }
    Ok(GraphFile {
        graph,
        demand,
        costs,
    })
}
