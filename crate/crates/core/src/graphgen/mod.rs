//! Graph construction: Delaunay edges for 2D keypoints and 3D universe
//! points, and the assignment product graph the matching network runs on.

mod delaunay2;
mod delaunay3;

pub use delaunay2::delaunay_2d;
pub use delaunay3::edges_3d;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least {min} nodes, got {got}")]
    TooFewNodes { got: usize, min: usize },
    #[error("assignment graph over an empty node set")]
    EmptyNodeSet,
    #[error("edge ({a}, {b}) references a node outside 0..{nodes}")]
    InvalidEdge { a: usize, b: usize, nodes: usize },
    #[error("self-loop at node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
}

fn validate_edges(edges: &[(usize, usize)], nodes: usize) -> Result<(), GraphError> {
    let mut seen = std::collections::BTreeSet::new();
    for &(a, b) in edges {
        if a == b {
            return Err(GraphError::SelfLoop(a));
        }
        if a >= nodes || b >= nodes {
            return Err(GraphError::InvalidEdge { a, b, nodes });
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            return Err(GraphError::DuplicateEdge(key.0, key.1));
        }
    }
    Ok(())
}

/// 2D keypoint graph. Node attributes are the (normalized) coordinates;
/// edge attributes concatenate both endpoint coordinates, lower index first.
#[derive(Debug, Clone)]
pub struct Graph2D {
    coords: Vec<[f64; 2]>,
    edges: Vec<(usize, usize)>,
}

impl Graph2D {
    /// Builds the graph with Delaunay edges.
    pub fn from_points(coords: Vec<[f64; 2]>) -> Result<Self, GraphError> {
        let edges = delaunay_2d(&coords)?;
        Ok(Self { coords, edges })
    }

    /// Builds the graph from an explicit edge list (validated).
    pub fn new(coords: Vec<[f64; 2]>, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        validate_edges(&edges, coords.len())?;
        let edges = canonical_edges(edges);
        Ok(Self { coords, edges })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attr(&self, e: usize) -> [f64; 4] {
        let (a, b) = self.edges[e];
        let pa = self.coords[a];
        let pb = self.coords[b];
        [pa[0], pa[1], pb[0], pb[1]]
    }
}

/// 3D universe graph built over the (deformed) universe points.
#[derive(Debug, Clone)]
pub struct UniverseGraph3D {
    coords: Vec<[f64; 3]>,
    edges: Vec<(usize, usize)>,
}

impl UniverseGraph3D {
    /// Builds the graph with Delaunay (tetrahedralization) edges.
    pub fn from_points(coords: Vec<[f64; 3]>) -> Result<Self, GraphError> {
        let edges = edges_3d(&coords)?;
        Ok(Self { coords, edges })
    }

    /// Builds the graph over `coords` reusing an existing topology.
    ///
    /// Used when the universe topology is frozen to the static points while
    /// attributes still come from the deformed coordinates.
    pub fn with_topology(
        coords: Vec<[f64; 3]>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self, GraphError> {
        validate_edges(&edges, coords.len())?;
        let edges = canonical_edges(edges);
        Ok(Self { coords, edges })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_attr(&self, e: usize) -> [f64; 6] {
        let (a, b) = self.edges[e];
        let pa = self.coords[a];
        let pb = self.coords[b];
        [pa[0], pa[1], pa[2], pb[0], pb[1], pb[2]]
    }
}

fn canonical_edges(edges: Vec<(usize, usize)>) -> Vec<(usize, usize)> {
    let set: std::collections::BTreeSet<(usize, usize)> = edges
        .into_iter()
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    set.into_iter().collect()
}

/// One edge of the assignment graph, with back-references to the source
/// edges whose attributes it concatenates.
#[derive(Debug, Clone, Copy)]
pub struct AssignEdge {
    pub node_a: usize,
    pub node_b: usize,
    pub edge_2d: usize,
    pub edge_3d: usize,
}

/// Product graph of a 2D keypoint graph and the universe graph.
///
/// Node `(i, k)` pairs keypoint `i` with universe point `k` and is stored at
/// row-major index `i * d + k`; its attribute concatenates the 2D and 3D
/// node attributes. An edge connects `(i, k)` and `(j, n)` iff `(i, j)` is a
/// 2D edge and `(k, n)` is a universe edge.
#[derive(Debug, Clone)]
pub struct AssignmentGraph {
    m: usize,
    d: usize,
    edges: Vec<AssignEdge>,
}

impl AssignmentGraph {
    pub fn build(g2: &Graph2D, g3: &UniverseGraph3D) -> Result<Self, GraphError> {
        let (m, d) = (g2.len(), g3.len());
        if m == 0 || d == 0 {
            return Err(GraphError::EmptyNodeSet);
        }
        let mut edges = Vec::with_capacity(2 * g2.edges.len() * g3.edges.len());
        for (e2, &(i, j)) in g2.edges.iter().enumerate() {
            for (e3, &(k, n)) in g3.edges.iter().enumerate() {
                // (i < j by canonicalization, so node_a < node_b holds.)
                edges.push(AssignEdge {
                    node_a: i * d + k,
                    node_b: j * d + n,
                    edge_2d: e2,
                    edge_3d: e3,
                });
                edges.push(AssignEdge {
                    node_a: i * d + n,
                    node_b: j * d + k,
                    edge_2d: e2,
                    edge_3d: e3,
                });
            }
        }
        Ok(Self { m, d, edges })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn node_count(&self) -> usize {
        self.m * self.d
    }

    pub fn edges(&self) -> &[AssignEdge] {
        &self.edges
    }

    /// `(keypoint index, universe index)` of an assignment node.
    pub fn node_pair(&self, node: usize) -> (usize, usize) {
        (node / self.d, node % self.d)
    }

    pub fn node_index(&self, keypoint: usize, universe: usize) -> usize {
        keypoint * self.d + universe
    }
}

#[cfg(test)]
mod tests;
