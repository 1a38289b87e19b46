//! Network topologies, graph Laplacians, and the spectral quantities that
//! parameterize step sizes, iteration counts, and communication accounting.
//!
//! Vertices are 0-based internally; the edge-list text format is 1-based.
//! The big Kronecker form `W = W̄ ⊗ I_n` is never materialized — everything
//! downstream applies `W̄` row weights to `n`-vectors block-wise.

use crate::rng::{self, substream, Purpose};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Eigenvalues below this threshold count as zero when sizing the kernel.
const ZERO_EIG_THRESHOLD: f64 = 1e-8;

/// Retry budget for random graph generation. The configuration model for
/// regular graphs rejects multigraph outcomes, whose acceptance rate can dip
/// to a few percent for moderate degrees, so the budget is generous; each
/// attempt costs microseconds.
const RETRY_BUDGET: u64 = 5000;

/// Supported topology families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphKind {
    Path,
    Cycle,
    Star,
    Complete,
    /// Erdős–Rényi `G(m, p)`, resampled until connected.
    ErdosRenyi { p: f64 },
    /// Uniformly random `degree`-regular graph, resampled until simple and
    /// connected. `degree` must be even and less than `m`.
    Expander { degree: usize },
}

/// An undirected simple graph on `m` nodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    m: usize,
    /// Normalized edges: `i < j`, sorted, no duplicates.
    edges: Vec<(usize, usize)>,
}

impl GraphTopology {
    /// Builds a topology from unordered pairs, normalizing the edge set.
    /// Rejects self-loops, out-of-range endpoints, and duplicates.
    /// Connectivity is enforced at the Laplacian stage, not here, so that
    /// rejection of disconnected inputs stays testable.
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if m == 0 {
            return Err(Error::Graph("need at least one node".into()));
        }
        let mut normd: Vec<(usize, usize)> = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Graph(format!("self-loop at node {a}")));
            }
            if a >= m || b >= m {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for m = {m}")));
            }
            normd.push((a.min(b), a.max(b)));
        }
        normd.sort_unstable();
        let before = normd.len();
        normd.dedup();
        if normd.len() != before {
            return Err(Error::Graph("duplicate edge".into()));
        }
        Ok(GraphTopology { m, edges: normd })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Node degrees.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Adjacency lists (sorted).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Breadth-first connectivity check; a single node is connected.
    pub fn is_connected(&self) -> bool {
        if self.m <= 1 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.m];
        let mut queue = std::collections::VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.m
    }

    /// Serializes as 1-indexed "i j" lines.
    pub fn to_edge_list_string(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.edges {
            out.push_str(&format!("{} {}\n", a + 1, b + 1));
        }
        out
    }

    /// Parses the 1-indexed "i j" line format produced by
    /// [`to_edge_list_string`](Self::to_edge_list_string).
    pub fn from_edge_list_str(m: usize, text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>| -> Result<usize> {
                tok.and_then(|t| t.parse::<usize>().ok())
                    .filter(|&v| v >= 1)
                    .ok_or_else(|| Error::Graph(format!("bad edge list line {}", lineno + 1)))
            };
            let a = parse(it.next())?;
            let b = parse(it.next())?;
            if it.next().is_some() {
                return Err(Error::Graph(format!("bad edge list line {}", lineno + 1)));
            }
            edges.push((a - 1, b - 1));
        }
        GraphTopology::new(m, edges)
    }
}

/// Generates a topology of the requested kind. Deterministic kinds ignore
/// `seed`; random kinds are deterministic given `seed` and resample until
/// connected within a bounded retry budget. `m = 1` is allowed as the
/// degenerate edgeless graph for testing.
pub fn generate_graph(kind: GraphKind, m: usize, seed: u64) -> Result<GraphTopology> {
    if m == 0 {
        return Err(Error::Graph("need at least one node".into()));
    }
    if m == 1 {
        return GraphTopology::new(1, []);
    }
    match kind {
        GraphKind::Path => GraphTopology::new(m, (0..m - 1).map(|i| (i, i + 1))),
        GraphKind::Cycle => {
            let mut edges: Vec<(usize, usize)> = (0..m - 1).map(|i| (i, i + 1)).collect();
            if m > 2 {
                edges.push((m - 1, 0));
            }
            GraphTopology::new(m, edges)
        }
        GraphKind::Star => GraphTopology::new(m, (1..m).map(|i| (0, i))),
        GraphKind::Complete => {
            GraphTopology::new(m, (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))))
        }
        GraphKind::ErdosRenyi { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Graph(format!("erdos_renyi p = {p} outside (0, 1]")));
            }
            for attempt in 0..RETRY_BUDGET {
                let mut stream = substream(seed, attempt, Purpose::GraphGen);
                let edges = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j)));
                let kept: Vec<_> =
                    edges.filter(|_| rng::uniform(&mut stream) < p).collect();
                let g = GraphTopology::new(m, kept)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(Error::Graph(format!(
                "erdos_renyi(p = {p}, m = {m}) not connected after {RETRY_BUDGET} attempts"
            )))
        }
        GraphKind::Expander { degree } => {
            if degree == 0 || degree % 2 != 0 || degree >= m {
                return Err(Error::Graph(format!(
                    "expander degree {degree} must be even, positive, and below m = {m}"
                )));
            }
            // Configuration model: pair up degree stubs per node uniformly at
            // random, rejecting multigraphs and disconnected outcomes.
            for attempt in 0..RETRY_BUDGET {
                let mut stream = substream(seed, attempt, Purpose::GraphGen);
                let mut stubs: Vec<usize> =
                    (0..m).flat_map(|v| std::iter::repeat(v).take(degree)).collect();
                // Fisher-Yates shuffle driven by the substream.
                for i in (1..stubs.len()).rev() {
                    let j = (rng::uniform(&mut stream) * (i + 1) as f64) as usize;
                    stubs.swap(i, j.min(i));
                }
                let pairs: Vec<(usize, usize)> =
                    stubs.chunks(2).map(|c| (c[0], c[1])).collect();
                if pairs.iter().any(|&(a, b)| a == b) {
                    continue;
                }
                let mut sorted: Vec<(usize, usize)> =
                    pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
                sorted.sort_unstable();
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    continue;
                }
                let g = GraphTopology::new(m, pairs)?;
                if g.is_connected() {
                    return Ok(g);
                }
            }
            Err(Error::Graph(format!(
                "expander(degree = {degree}, m = {m}) not realized after {RETRY_BUDGET} attempts"
            )))
        }
    }
}

/// The Laplacian `W̄` of a topology together with its spectral quantities.
#[derive(Clone, Debug)]
pub struct LaplacianInfo {
    /// `m × m` symmetric Laplacian with exact integer entries.
    pub matrix: DMatrix<f64>,
    /// Largest eigenvalue `λmax(W̄)`.
    pub lambda_max: f64,
    /// Smallest nonzero eigenvalue `λmin⁺(W̄)`; 0 for the degenerate
    /// single-node graph, which has no nonzero eigenvalue.
    pub lambda_min_plus: f64,
    /// Condition number `χ = λmax / λmin⁺` (infinite in the degenerate case).
    pub chi: f64,
    /// Per-row nonzero counts.
    pub nnz_rows: Vec<usize>,
    /// Total nonzeros `κ = Σ_i nnz(W̄_i)`.
    pub kappa: usize,
    /// Node degrees (diagonal of `W̄`).
    pub degrees: Vec<usize>,
}

impl LaplacianInfo {
    pub fn m(&self) -> usize {
        self.matrix.nrows()
    }

    /// Row `i` of `W̄` as a slice-backed vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.matrix.row(i).iter().copied().collect()
    }
}

/// Builds the Laplacian and its spectral data for a connected topology.
pub fn build_laplacian(g: &GraphTopology) -> Result<LaplacianInfo> {
    if !g.is_connected() {
        return Err(Error::Graph(
            "disconnected graph: λmin⁺ would mix with extra zero eigenvalues".into(),
        ));
    }
    let m = g.m();
    let degrees = g.degrees();
    let mut matrix = DMatrix::<f64>::zeros(m, m);
    for (i, &d) in degrees.iter().enumerate() {
        matrix[(i, i)] = d as f64;
    }
    for &(a, b) in g.edges() {
        matrix[(a, b)] = -1.0;
        matrix[(b, a)] = -1.0;
    }

    let eig = matrix.clone().symmetric_eigen();
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if eigenvalues.iter().any(|&l| l < -1e-10) {
        return Err(Error::Graph(format!(
            "Laplacian not PSD: eigenvalue {}",
            eigenvalues[0]
        )));
    }
    let zeros = eigenvalues.iter().filter(|&&l| l < ZERO_EIG_THRESHOLD).count();
    if zeros != 1 {
        return Err(Error::Graph(format!(
            "expected exactly one zero eigenvalue, found {zeros}"
        )));
    }
    let lambda_max = *eigenvalues.last().unwrap();
    let lambda_min_plus = eigenvalues
        .iter()
        .find(|&&l| l >= ZERO_EIG_THRESHOLD)
        .copied()
        .unwrap_or(0.0);
    let chi = if lambda_min_plus > 0.0 {
        lambda_max / lambda_min_plus
    } else {
        f64::INFINITY
    };

    let nnz_rows: Vec<usize> = (0..m)
        .map(|i| matrix.row(i).iter().filter(|&&v| v != 0.0).count())
        .collect();
    let kappa = nnz_rows.iter().sum();

    Ok(LaplacianInfo {
        matrix,
        lambda_max,
        lambda_min_plus,
        chi,
        nnz_rows,
        kappa,
        degrees,
    })
}

/// Symmetric PSD square root `√W̄` via eigendecomposition, clamping
/// eigenvalues below `1e-12` to zero. Satisfies `(√W̄)² = W̄` within `1e-10`
/// entrywise and preserves the kernel (`√W̄·𝟙 = 0`).
pub fn sqrt_laplacian(info: &LaplacianInfo) -> DMatrix<f64> {
    let eig = info.matrix.clone().symmetric_eigen();
    let sq = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| if l < 1e-12 { 0.0 } else { l.sqrt() }),
    );
    let s = &eig.eigenvectors * DMatrix::from_diagonal(&sq) * eig.eigenvectors.transpose();
    // Exact symmetry despite floating-point reconstruction error.
    let mut out = s.clone();
    for i in 0..out.nrows() {
        for j in 0..out.ncols() {
            out[(i, j)] = 0.5 * (s[(i, j)] + s[(j, i)]);
        }
    }
    out
}
