//! Undirected communication graphs and their algebraic matrices.
//!
//! Vertices are `0..n`. Edge `k` is stored as an ordered pair `(head, tail)`
//! and that order fixes its orientation in the incidence matrix `D`:
//! `D[head][k] = +1`, `D[tail][k] = -1`. The relative position carried by the
//! edge is therefore `xbar_k = x_head - x_tail`, i.e. `xbar = Dᵀ x`.
//!
//! All matrices are dense and computed once at construction.

use std::collections::{HashSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("graph needs at least two vertices, got {0}")]
    TooFewVertices(usize),
    #[error("edge {index} is a self-loop on vertex {vertex}")]
    SelfLoop { index: usize, vertex: usize },
    #[error("edge {index} has endpoint {vertex} outside 0..{n}")]
    EndpointOutOfRange { index: usize, vertex: usize, n: usize },
    #[error("edge {index} duplicates edge {first}")]
    DuplicateEdge { index: usize, first: usize },
    #[error("vertex {vertex} outside 0..{n}")]
    VertexOutOfRange { vertex: usize, n: usize },
}

/// An edge incident to some vertex, with the sign that vertex carries in `D`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncidentEdge {
    pub edge: usize,
    pub sign: f64,
}

#[derive(Debug, Clone)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    incidence: DMatrix<f64>,
    laplacian: DMatrix<f64>,
    edge_laplacian: DMatrix<f64>,
    incident: Vec<Vec<IncidentEdge>>,
}

impl Graph {
    /// Validates and builds a graph. Edge indices follow input order.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewVertices(n));
        }
        let mut seen: Vec<((usize, usize), usize)> = Vec::with_capacity(edges.len());
        for (index, &(i, j)) in edges.iter().enumerate() {
            for v in [i, j] {
                if v >= n {
                    return Err(GraphError::EndpointOutOfRange { index, vertex: v, n });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop { index, vertex: i });
            }
            let key = (i.min(j), i.max(j));
            if let Some(&(_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(GraphError::DuplicateEdge { index, first });
            }
            seen.push((key, index));
        }

        let m = edges.len();
        let mut incidence = DMatrix::zeros(n, m);
        let mut incident = vec![Vec::new(); n];
        for (k, &(head, tail)) in edges.iter().enumerate() {
            incidence[(head, k)] = 1.0;
            incidence[(tail, k)] = -1.0;
            incident[head].push(IncidentEdge { edge: k, sign: 1.0 });
            incident[tail].push(IncidentEdge { edge: k, sign: -1.0 });
        }
        let laplacian = &incidence * incidence.transpose();
        let edge_laplacian = incidence.transpose() * &incidence;

        Ok(Self {
            n,
            edges: edges.to_vec(),
            incidence,
            laplacian,
            edge_laplacian,
            incident,
        })
    }

    /// Star on `n` vertices centred at vertex 0, edges `(0, k)` for `k = 1..n`.
    pub fn star(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|k| (0, k)).collect();
        Self::new(n, &edges)
    }

    /// Path `0 - 1 - ... - (n-1)` with edges `(k, k+1)`.
    pub fn path(n: usize) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
        Self::new(n, &edges)
    }

    /// Random labelled tree: vertex `k` attaches to a uniformly chosen earlier
    /// vertex, with a random orientation per edge.
    pub fn random_tree<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self, GraphError> {
        let edges: Vec<_> = (1..n)
            .map(|k| {
                let parent = rng.random_range(0..k);
                if rng.random_bool(0.5) { (parent, k) } else { (k, parent) }
            })
            .collect();
        Self::new(n, &edges)
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.incidence
    }

    /// `L = D Dᵀ`.
    pub fn laplacian(&self) -> &DMatrix<f64> {
        &self.laplacian
    }

    /// `L_e = Dᵀ D`; positive definite exactly when the graph is a tree.
    pub fn edge_laplacian(&self) -> &DMatrix<f64> {
        &self.edge_laplacian
    }

    pub fn is_connected(&self) -> bool {
        let mut visited = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            for e in &self.incident[v] {
                let (h, t) = self.edges[e.edge];
                let w = if h == v { t } else { h };
                if !visited[w] {
                    visited[w] = true;
                    count += 1;
                    queue.push_back(w);
                }
            }
        }
        count == self.n
    }

    pub fn is_tree(&self) -> bool {
        self.edge_count() + 1 == self.n && self.is_connected()
    }

    /// Edges containing `vertex`, with `sign = D[vertex][edge]`.
    pub fn incident_edges(&self, vertex: usize) -> Result<&[IncidentEdge], GraphError> {
        self.incident
            .get(vertex)
            .map(Vec::as_slice)
            .ok_or(GraphError::VertexOutOfRange { vertex, n: self.n })
    }

    /// Relative positions `xbar = Dᵀ x`, computed edge by edge.
    pub fn relative_positions(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.edges.len(), self.edges.iter().map(|&(h, t)| x[h] - x[t]))
    }

    /// Node positions with `Dᵀ x = xbar`, anchored at `x[0] = 0`.
    ///
    /// Walks a BFS spanning tree; on graphs with cycles the non-tree edges
    /// must already be consistent, otherwise `None`.
    pub fn positions_from_relative(&self, xbar: &[f64]) -> Option<DVector<f64>> {
        if xbar.len() != self.edge_count() || !self.is_connected() {
            return None;
        }
        let mut x = vec![f64::NAN; self.n];
        x[0] = 0.0;
        let mut queue = VecDeque::from([0]);
        let mut used: HashSet<usize> = HashSet::new();
        while let Some(v) = queue.pop_front() {
            for e in &self.incident[v] {
                let (h, t) = self.edges[e.edge];
                let w = if h == v { t } else { h };
                if x[w].is_nan() {
                    // xbar_k = x_h - x_t
                    x[w] = if h == v { x[v] - xbar[e.edge] } else { x[v] + xbar[e.edge] };
                    used.insert(e.edge);
                    queue.push_back(w);
                }
            }
        }
        let x = DVector::from_vec(x);
        let residual = (self.relative_positions(&x) - DVector::from_column_slice(xbar)).amax();
        (residual <= 1e-9 * (1.0 + DVector::from_column_slice(xbar).amax())).then_some(x)
    }
}
