//! Undirected contact graphs and their descriptor matrices.
//!
//! A graph is a node count plus a set of undirected edges. From it we derive
//! the dense descriptors used by the graph-convolution branch:
//! adjacency `A`, self-loop adjacency `A_hat = A + I`, degree matrices `D`
//! and `D_hat = D + I`, combinatorial Laplacian `L = D - A`, and the
//! symmetric normalized Laplacian
//! `L_sym = I - D^{-1/2} A D^{-1/2}` (rows and columns of isolated nodes are
//! zero).
//!
//! Two propagation operators are supported for the convolution layers:
//! - `PaperLaplacian`: `I - D_hat^{-1/2} A_hat D_hat^{-1/2}`
//! - `RenormalizedAdjacency` (default): `D_hat^{-1/2} A_hat D_hat^{-1/2}`

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::fmt_g17;
use crate::rotation::Orientation;

/// Undirected simple graph with nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    /// Normalized edge list: each pair `(i, j)` with `i < j`, sorted, unique.
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list of 0-based node pairs.
    ///
    /// Duplicate edges (in either order) are collapsed. Self-loops and
    /// out-of-range indices are rejected; self-loops enter only through the
    /// `A_hat` descriptor.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("graph must have at least one node"));
        }
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::config(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                return Err(Error::config(format!("self-loop on node {i} rejected")));
            }
            norm.push((i.min(j), i.max(j)));
        }
        norm.sort_unstable();
        norm.dedup();
        Ok(Graph { n, edges: norm })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0usize; self.n];
        for &(i, j) in &self.edges {
            d[i] += 1;
            d[j] += 1;
        }
        d
    }

    /// All dense descriptor matrices of this graph.
    pub fn descriptors(&self) -> DescriptorMatrices {
        let n = self.n;
        let mut a = Array2::<f64>::zeros((n, n));
        for &(i, j) in &self.edges {
            a[(i, j)] = 1.0;
            a[(j, i)] = 1.0;
        }
        let deg: Vec<f64> = self.degrees().iter().map(|&d| d as f64).collect();

        let mut a_hat = a.clone();
        let mut d = Array2::<f64>::zeros((n, n));
        let mut d_hat = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            a_hat[(i, i)] = 1.0;
            d[(i, i)] = deg[i];
            d_hat[(i, i)] = deg[i] + 1.0;
        }
        let l = &d - &a;

        // Assembled entrywise so isolated nodes yield exact zero rows.
        let mut l_sym = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            if deg[i] > 0.0 {
                l_sym[(i, i)] = 1.0;
            }
        }
        for &(i, j) in &self.edges {
            let w = -1.0 / (deg[i] * deg[j]).sqrt();
            l_sym[(i, j)] = w;
            l_sym[(j, i)] = w;
        }

        DescriptorMatrices { a, a_hat, d, d_hat, l, l_sym }
    }

    /// Propagation operator for graph-convolution layers.
    pub fn propagation_operator(&self, mode: PropagationMode) -> Array2<f64> {
        let n = self.n;
        let deg = self.degrees();
        // With the self-loop added every node has degree >= 1.
        let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
        let mut renorm = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            renorm[(i, i)] = inv_sqrt[i] * inv_sqrt[i];
        }
        for &(i, j) in &self.edges {
            let w = inv_sqrt[i] * inv_sqrt[j];
            renorm[(i, j)] = w;
            renorm[(j, i)] = w;
        }
        match mode {
            PropagationMode::RenormalizedAdjacency => renorm,
            PropagationMode::PaperLaplacian => {
                let mut out = -renorm;
                for i in 0..n {
                    out[(i, i)] += 1.0;
                }
                out
            }
        }
    }
}

/// Dense descriptor matrices of a graph; all `n x n`.
#[derive(Debug, Clone)]
pub struct DescriptorMatrices {
    pub a: Array2<f64>,
    pub a_hat: Array2<f64>,
    pub d: Array2<f64>,
    pub d_hat: Array2<f64>,
    pub l: Array2<f64>,
    pub l_sym: Array2<f64>,
}

/// Operator fed to the graph-convolution layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationMode {
    /// `I - D_hat^{-1/2} A_hat D_hat^{-1/2}`.
    PaperLaplacian,
    /// `D_hat^{-1/2} A_hat D_hat^{-1/2}`.
    RenormalizedAdjacency,
}

impl Default for PropagationMode {
    fn default() -> Self {
        PropagationMode::RenormalizedAdjacency
    }
}

impl std::fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PropagationMode::PaperLaplacian => write!(f, "paper_laplacian"),
            PropagationMode::RenormalizedAdjacency => write!(f, "renormalized_adjacency"),
        }
    }
}

/// Node feature matrix `n x 4`: volume fraction plus the three Euler angles.
///
/// Volume fractions must be positive and sum to 1 within `1e-9`.
pub fn feature_matrix(volumes: &[f64], orientations: &[Orientation]) -> Result<Array2<f64>> {
    if volumes.len() != orientations.len() {
        return Err(Error::config(format!(
            "{} volumes vs {} orientations",
            volumes.len(),
            orientations.len()
        )));
    }
    if volumes.is_empty() {
        return Err(Error::config("feature matrix needs at least one grain"));
    }
    let sum: f64 = volumes.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("volume fractions sum to {sum}, expected 1")));
    }
    if let Some(v) = volumes.iter().find(|&&v| v <= 0.0) {
        return Err(Error::config(format!("non-positive volume fraction {v}")));
    }
    let mut x = Array2::<f64>::zeros((volumes.len(), 4));
    for (i, (&v, o)) in volumes.iter().zip(orientations).enumerate() {
        x[(i, 0)] = v;
        x[(i, 1)] = o.phi1;
        x[(i, 2)] = o.cap_phi;
        x[(i, 3)] = o.phi2;
    }
    Ok(x)
}

/// Writes the plain-text graph format: `n <N>` then one `e <i> <j>` per edge.
pub fn write_graph(path: &Path, g: &Graph) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "n {}", g.n_nodes()).expect("write to string");
    for &(i, j) in g.edges() {
        writeln!(out, "e {i} {j}").expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the plain-text graph format written by [`write_graph`].
pub fn read_graph(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut n: Option<usize> = None;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_ascii_whitespace();
        let tag = parts.next().unwrap_or("");
        let bad = |what: &str| {
            Error::io(path, format!("line {}: {what}: {line:?}", lineno + 1))
        };
        match tag {
            "n" => {
                let v = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| bad("malformed node count"))?;
                if n.replace(v).is_some() {
                    return Err(bad("duplicate node-count line"));
                }
            }
            "e" => {
                let i = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| bad("malformed edge"))?;
                let j = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| bad("malformed edge"))?;
                edges.push((i, j));
            }
            _ => return Err(bad("unknown line tag")),
        }
        if parts.next().is_some() {
            return Err(bad("trailing tokens"));
        }
    }
    let n = n.ok_or_else(|| Error::io(path, "missing `n <N>` line"))?;
    Graph::new(n, &edges)
}

/// Writes a dense matrix as CSV, row-major, full float precision.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|&x| fmt_g17(x)).collect();
        writeln!(out, "{}", line.join(",")).expect("write to string");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
