//! Tile grids and the 8-adjacent tile graph built from them.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-tile feature vectors laid out on the slide grid. Only occupied
/// cells (tiles that survived tissue filtering) carry features; `features`
/// lists them in row-major order of the occupied cells.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    dim: usize,
    occupancy: Vec<bool>,
    features: Vec<Vec<f64>>,
}

impl FeatureGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        dim: usize,
        occupancy: Vec<bool>,
        features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if rows.checked_mul(cols) != Some(occupancy.len()) {
            return Err(Error::contract(format!(
                "occupancy has {} cells for a {rows}x{cols} grid",
                occupancy.len()
            )));
        }
        let occupied = occupancy.iter().filter(|&&o| o).count();
        if occupied == 0 {
            return Err(Error::contract("grid has no occupied cells"));
        }
        if features.len() != occupied {
            return Err(Error::contract(format!(
                "{} feature vectors for {occupied} occupied cells",
                features.len()
            )));
        }
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(Error::contract(format!(
                "every feature vector must have dimension {dim} > 0"
            )));
        }
        if features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature grid" });
        }
        Ok(FeatureGrid {
            rows,
            cols,
            dim,
            occupancy,
            features,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn is_occupied(&self, r: usize, c: usize) -> bool {
        self.occupancy[r * self.cols + c]
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn num_occupied(&self) -> usize {
        self.features.len()
    }

    /// `(row, col)` of every occupied cell, row-major.
    pub fn occupied_cells(&self) -> Vec<(usize, usize)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_occupied(r, c))
            .collect()
    }
}

/// The tile graph: one node per occupied cell, undirected edges between
/// 8-adjacent cells, and the cached propagation matrix
/// `Â = D̃^{-1/2} (A + I) D̃^{-1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGraph {
    node_features: Tensor,
    edges: Vec<(usize, usize)>,
    positions: Vec<(usize, usize)>,
    degrees: Vec<f64>,
    norm_adj: Tensor,
}

/// Builds the tile graph. Nodes follow the row-major scan of occupied cells.
pub fn build_graph(grid: &FeatureGrid) -> Result<TileGraph> {
    let cells = grid.occupied_cells();
    if cells.is_empty() {
        return Err(Error::contract("cannot build a graph from an empty grid"));
    }
    let mut node_of = vec![usize::MAX; grid.rows * grid.cols];
    for (n, &(r, c)) in cells.iter().enumerate() {
        node_of[r * grid.cols + c] = n;
    }
    let mut edges = Vec::new();
    for (n, &(r, c)) in cells.iter().enumerate() {
        // Forward half of the 8-neighbourhood, so every pair is seen once.
        let forward = [(0i64, 1i64), (1, -1), (1, 0), (1, 1)];
        for (dr, dc) in forward {
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= grid.rows as i64 || nc >= grid.cols as i64 {
                continue;
            }
            let m = node_of[nr as usize * grid.cols + nc as usize];
            if m != usize::MAX {
                edges.push((n.min(m), n.max(m)));
            }
        }
    }
    edges.sort_unstable();
    let features = Tensor::from_rows(grid.features())?;
    let mut g = TileGraph::from_parts(features, edges)?;
    g.positions = cells;
    Ok(g)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list on `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Tensor {
    let degrees = degrees_with_self_loops(n, edges);
    let mut adj = Tensor::zeros(n, n);
    for (i, d) in degrees.iter().enumerate() {
        adj.set(i, i, 1.0 / d);
    }
    for &(i, j) in edges {
        let v = 1.0 / (degrees[i] * degrees[j]).sqrt();
        adj.set(i, j, v);
        adj.set(j, i, v);
    }
    adj
}

fn degrees_with_self_loops(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut deg = vec![1.0; n];
    for &(i, j) in edges {
        deg[i] += 1.0;
        deg[j] += 1.0;
    }
    deg
}

impl TileGraph {
    /// A graph from explicit node features and undirected edges. Edges are
    /// canonicalized to `(min, max)`, sorted, and deduplicated; self-pairs
    /// are rejected because self-loops only enter through `A + I`.
    pub fn from_parts(node_features: Tensor, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = node_features.rows();
        if n == 0 {
            return Err(Error::contract("graph must have at least one node"));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::contract(format!(
                    "edge ({a}, {b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::contract(format!(
                    "self-pair ({a}, {a}) in edge list"
                )));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();
        let degrees = degrees_with_self_loops(n, &canon);
        let norm_adj = normalized_adjacency(n, &canon);
        Ok(TileGraph {
            node_features,
            positions: (0..n).map(|i| (0, i)).collect(),
            edges: canon,
            degrees,
            norm_adj,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn positions(&self) -> &[(usize, usize)] {
        &self.positions
    }

    pub fn norm_adj(&self) -> &Tensor {
        &self.norm_adj
    }

    /// Diagonal of `D̃`.
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// `Ã = A + I`.
    pub fn adjacency_with_self_loops(&self) -> Tensor {
        let n = self.num_nodes();
        let mut a = Tensor::eye(n);
        for &(i, j) in &self.edges {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
        a
    }

    /// `D̃` as a dense diagonal matrix.
    pub fn degree_matrix(&self) -> Tensor {
        let n = self.num_nodes();
        Tensor::from_fn(n, n, |i, j| if i == j { self.degrees[i] } else { 0.0 })
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<TileGraph> {
        let n = self.num_nodes();
        let mut inverse = vec![usize::MAX; n];
        if perm.len() != n {
            return Err(Error::contract(
                "permutation length differs from node count",
            ));
        }
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::contract("not a permutation"));
            }
            inverse[old] = new;
        }
        let feats = self.node_features.gather_rows(perm);
        let edges = self
            .edges
            .iter()
            .map(|&(a, b)| (inverse[a], inverse[b]))
            .collect();
        let mut g = TileGraph::from_parts(feats, edges)?;
        g.positions = perm.iter().map(|&old| self.positions[old]).collect();
        Ok(g)
    }
}
