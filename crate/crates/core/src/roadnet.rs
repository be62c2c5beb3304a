//! Road network construction from historical trajectories.
//!
//! The scene is covered by a `gr x gr` grid; cells that ever contain a
//! trajectory point become nodes of a directed graph whose edges are
//! origin-destination transitions between consecutive steps. Node centers
//! are the centroids of the points observed in each cell, and per-step
//! occupancy counts the pedestrians inside each active cell.

use std::collections::BTreeMap;

use crate::dataset::TrajectoryScene;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Geometry of the grid covering the scene bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Cells per axis.
    pub gr: usize,
    pub origin: (f64, f64),
    pub cell_size: (f64, f64),
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.gr * self.gr
    }

    /// Cell of an in-bounds point; the upper edges are closed so the max
    /// coordinate falls in the last cell. `None` when out of bounds.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let max_x = self.origin.0 + self.cell_size.0 * self.gr as f64;
        let max_y = self.origin.1 + self.cell_size.1 * self.gr as f64;
        if x < self.origin.0 || x > max_x || y < self.origin.1 || y > max_y {
            return None;
        }
        let ix = (((x - self.origin.0) / self.cell_size.0) as usize).min(self.gr - 1);
        let iy = (((y - self.origin.1) / self.cell_size.1) as usize).min(self.gr - 1);
        Some(iy * self.gr + ix)
    }

    /// (min_x, min_y, max_x, max_y) of a cell.
    pub fn cell_rect(&self, cell: usize) -> (f64, f64, f64, f64) {
        let (ix, iy) = (cell % self.gr, cell / self.gr);
        let x0 = self.origin.0 + ix as f64 * self.cell_size.0;
        let y0 = self.origin.1 + iy as f64 * self.cell_size.1;
        (x0, y0, x0 + self.cell_size.0, y0 + self.cell_size.1)
    }
}

/// Grid the scene bounds with `gr` cells per axis.
pub fn build_grid(scene: &TrajectoryScene, gr: usize) -> Result<GridSpec> {
    assert!(gr >= 1, "gr must be positive");
    let b = &scene.bounds;
    let range_x = b.max_x - b.min_x;
    let range_y = b.max_y - b.min_y;
    if range_x <= 0.0 {
        return Err(Error::DegenerateExtent {
            scene: scene.scene_id.clone(),
            axis: 'x',
        });
    }
    if range_y <= 0.0 {
        return Err(Error::DegenerateExtent {
            scene: scene.scene_id.clone(),
            axis: 'y',
        });
    }
    Ok(GridSpec {
        gr,
        origin: (b.min_x, b.min_y),
        cell_size: (range_x / gr as f64, range_y / gr as f64),
    })
}

/// Walkable-area mask: a cell is active iff some trajectory point falls
/// in it at any step.
pub fn phi_mask(scene: &TrajectoryScene, grid: &GridSpec) -> Vec<bool> {
    let mut mask = vec![false; grid.n_cells()];
    for r in &scene.records {
        if let Some(cell) = grid.cell_of(r.x, r.y) {
            mask[cell] = true;
        }
    }
    mask
}

fn active_cells(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &a)| a.then_some(i))
        .collect()
}

/// Per-step pedestrian counts over active cells, shape `(n_steps, n_active)`.
pub fn occupancy_series(scene: &TrajectoryScene, grid: &GridSpec, mask: &[bool]) -> Vec<Vec<u64>> {
    let cells = active_cells(mask);
    let node_of: BTreeMap<usize, usize> = cells.iter().enumerate().map(|(n, c)| (*c, n)).collect();
    let mut occ = vec![vec![0u64; cells.len()]; scene.n_steps];
    for r in &scene.records {
        if let Some(cell) = grid.cell_of(r.x, r.y) {
            if let Some(&node) = node_of.get(&cell) {
                occ[r.step][node] += 1;
            }
        }
    }
    occ
}

/// Empirical centroid of the trajectory points inside each active cell.
pub fn node_centers(scene: &TrajectoryScene, grid: &GridSpec, mask: &[bool]) -> Vec<(f64, f64)> {
    let cells = active_cells(mask);
    let node_of: BTreeMap<usize, usize> = cells.iter().enumerate().map(|(n, c)| (*c, n)).collect();
    let mut sums = vec![(0.0, 0.0, 0u64); cells.len()];
    for r in &scene.records {
        if let Some(cell) = grid.cell_of(r.x, r.y) {
            if let Some(&node) = node_of.get(&cell) {
                sums[node].0 += r.x;
                sums[node].1 += r.y;
                sums[node].2 += 1;
            }
        }
    }
    sums.iter()
        .map(|(sx, sy, n)| (sx / *n as f64, sy / *n as f64))
        .collect()
}

/// Directed origin-destination edge with a max-normalized weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Active-node indices, not cell ids.
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Origin-destination edges between consecutive steps, plus a weight-1
/// self-loop on every active node. Transition counts are normalized by
/// the largest count so the busiest edge has weight 1.
pub fn od_edges(scene: &TrajectoryScene, grid: &GridSpec, mask: &[bool]) -> Vec<Edge> {
    let cells = active_cells(mask);
    let node_of: BTreeMap<usize, usize> = cells.iter().enumerate().map(|(n, c)| (*c, n)).collect();

    // step -> cell for each pedestrian, then count u -> v for u != v.
    let mut track: BTreeMap<u64, BTreeMap<usize, usize>> = BTreeMap::new();
    for r in &scene.records {
        if let Some(cell) = grid.cell_of(r.x, r.y) {
            if let Some(&node) = node_of.get(&cell) {
                track.entry(r.ped_id).or_default().insert(r.step, node);
            }
        }
    }
    let mut counts: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for steps in track.values() {
        for (&t, &u) in steps {
            if let Some(&v) = steps.get(&(t + 1)) {
                if u != v {
                    *counts.entry((u, v)).or_default() += 1;
                }
            }
        }
    }
    let max_count = counts.values().copied().max().unwrap_or(1) as f64;

    let mut edges: Vec<Edge> = (0..cells.len())
        .map(|n| Edge {
            src: n,
            dst: n,
            weight: 1.0,
        })
        .collect();
    edges.extend(counts.into_iter().map(|((src, dst), c)| Edge {
        src,
        dst,
        weight: c as f64 / max_count,
    }));
    edges
}

/// The full grid graph of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadNetworkGraph {
    pub grid: GridSpec,
    pub node_active: Vec<bool>,
    /// Sorted cell ids of the active nodes; node index = position here.
    pub active_cells: Vec<usize>,
    pub node_centers: Vec<(f64, f64)>,
    /// Occupancy of the scene the graph was built from, `(n_steps, n_active)`.
    /// Empty on graphs loaded from disk; recompute with [`Self::occupancy_for`].
    pub occupancy: Vec<Vec<u64>>,
    pub edges: Vec<Edge>,
}

impl RoadNetworkGraph {
    pub fn build(scene: &TrajectoryScene, gr: usize) -> Result<Self> {
        let grid = build_grid(scene, gr)?;
        let mask = phi_mask(scene, &grid);
        let centers = node_centers(scene, &grid, &mask);
        let occupancy = occupancy_series(scene, &grid, &mask);
        let edges = od_edges(scene, &grid, &mask);
        Ok(Self {
            grid,
            active_cells: active_cells(&mask),
            node_active: mask,
            node_centers: centers,
            occupancy,
            edges,
        })
    }

    pub fn n_active(&self) -> usize {
        self.active_cells.len()
    }

    /// Occupancy of an arbitrary scene over this frozen grid and mask.
    pub fn occupancy_for(&self, scene: &TrajectoryScene) -> Vec<Vec<u64>> {
        occupancy_series(scene, &self.grid, &self.node_active)
    }

    /// Node centers as an `(n_active, 2)` tensor.
    pub fn centers_tensor(&self) -> Tensor {
        let data = self
            .node_centers
            .iter()
            .flat_map(|(x, y)| [*x, *y])
            .collect();
        Tensor::new(vec![self.n_active(), 2], data)
    }

    /// Symmetric-degree-normalized aggregation matrix
    /// `S = D^{-1/2} E D^{-1/2}` where `E[dst][src]` carries the edge
    /// weight (self-loops included), so row `i` mixes the origins
    /// flowing into node `i`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.n_active();
        let mut e = vec![0.0; n * n];
        for edge in &self.edges {
            e[edge.dst * n + edge.src] += edge.weight;
        }
        let degrees: Vec<f64> = (0..n)
            .map(|i| e[i * n..(i + 1) * n].iter().sum::<f64>())
            .collect();
        let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                e[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        Tensor::new(vec![n, n], e)
    }

    // ── text serialization ───────────────────────────────────────────

    pub const FORMAT_HEADER: &'static str = "crowdcast-roadnet v1";

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::FORMAT_HEADER);
        out.push('\n');
        out.push_str(&format!("gr {}\n", self.grid.gr));
        out.push_str(&format!(
            "origin {} {}\n",
            self.grid.origin.0, self.grid.origin.1
        ));
        out.push_str(&format!(
            "cell_size {} {}\n",
            self.grid.cell_size.0, self.grid.cell_size.1
        ));
        out.push_str(&format!("nodes {}\n", self.n_active()));
        for (node, &cell) in self.active_cells.iter().enumerate() {
            let (cx, cy) = self.node_centers[node];
            out.push_str(&format!("node {cell} {cx} {cy}\n"));
        }
        out.push_str(&format!("edges {}\n", self.edges.len()));
        for e in &self.edges {
            out.push_str(&format!(
                "edge {} {} {}\n",
                self.active_cells[e.src], self.active_cells[e.dst], e.weight
            ));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::CheckpointFormat(format!("roadnet: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(Self::FORMAT_HEADER) {
            return Err(bad("missing or wrong format header"));
        }

        let mut expect = |prefix: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated file"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(prefix) {
                return Err(bad(&format!("expected `{prefix}` line, got `{line}`")));
            }
            Ok(parts.map(str::to_string).collect())
        };

        let gr: usize = expect("gr")?[0].parse().map_err(|_| bad("bad gr"))?;
        let origin_f = expect("origin")?;
        let cell_f = expect("cell_size")?;
        let parse = |s: &str| s.parse::<f64>().map_err(|_| bad("bad float"));
        let grid = GridSpec {
            gr,
            origin: (parse(&origin_f[0])?, parse(&origin_f[1])?),
            cell_size: (parse(&cell_f[0])?, parse(&cell_f[1])?),
        };

        let n_nodes: usize = expect("nodes")?[0].parse().map_err(|_| bad("bad node count"))?;
        let mut active_cells = Vec::with_capacity(n_nodes);
        let mut centers = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let f = expect("node")?;
            if f.len() != 3 {
                return Err(bad("node line needs cell cx cy"));
            }
            active_cells.push(f[0].parse().map_err(|_| bad("bad cell id"))?);
            centers.push((parse(&f[1])?, parse(&f[2])?));
        }
        let node_of: BTreeMap<usize, usize> = active_cells
            .iter()
            .enumerate()
            .map(|(n, c)| (*c, n))
            .collect();

        let n_edges: usize = expect("edges")?[0].parse().map_err(|_| bad("bad edge count"))?;
        let mut edges = Vec::with_capacity(n_edges);
        for _ in 0..n_edges {
            let f = expect("edge")?;
            if f.len() != 3 {
                return Err(bad("edge line needs src dst weight"));
            }
            let src_cell: usize = f[0].parse().map_err(|_| bad("bad edge src"))?;
            let dst_cell: usize = f[1].parse().map_err(|_| bad("bad edge dst"))?;
            let src = *node_of.get(&src_cell).ok_or_else(|| bad("edge src not a node"))?;
            let dst = *node_of.get(&dst_cell).ok_or_else(|| bad("edge dst not a node"))?;
            edges.push(Edge {
                src,
                dst,
                weight: parse(&f[2])?,
            });
        }
        expect("end")?;

        let mut node_active = vec![false; grid.n_cells()];
        for &c in &active_cells {
            if c >= node_active.len() {
                return Err(bad("cell id outside grid"));
            }
            node_active[c] = true;
        }
        Ok(Self {
            grid,
            node_active,
            active_cells,
            node_centers: centers,
            occupancy: Vec::new(),
            edges,
        })
    }
}
