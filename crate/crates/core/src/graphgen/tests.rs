use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::delaunay2::delaunay_2d_bruteforce;
use super::delaunay3::edges_3d_bruteforce;
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn square_has_four_boundary_edges_and_one_diagonal() {
    let pts = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let edges = delaunay_2d(&pts).unwrap();
    assert_eq!(edges.len(), 5);
    for boundary in [(0, 1), (1, 2), (2, 3), (0, 3)] {
        assert!(edges.contains(&boundary), "missing {boundary:?}");
    }
    let diagonals: Vec<_> = edges
        .iter()
        .filter(|e| **e == (0, 2) || **e == (1, 3))
        .collect();
    assert_eq!(diagonals.len(), 1);
}

#[test]
fn triangle_has_all_edges() {
    let pts = vec![[0.0, 0.0], [2.0, 0.0], [1.0, 1.5]];
    let edges = delaunay_2d(&pts).unwrap();
    assert_eq!(edges, vec![(0, 1), (0, 2), (1, 2)]);
}

#[test]
fn two_points_single_edge_and_one_point_errors() {
    assert_eq!(delaunay_2d(&[[0.0, 0.0], [1.0, 1.0]]).unwrap(), vec![(0, 1)]);
    assert!(matches!(
        delaunay_2d(&[[0.0, 0.0]]),
        Err(GraphError::TooFewNodes { got: 1, min: 2 })
    ));
}

#[test]
fn collinear_points_fall_back_to_path() {
    let pts = vec![[2.0, 2.0], [0.0, 0.0], [1.0, 1.0], [3.0, 3.0]];
    let edges = delaunay_2d(&pts).unwrap();
    // Path in coordinate order: (0,0)-(1,1)-(2,2)-(3,3), i.e. indices 1-2-0-3.
    assert_eq!(edges, vec![(0, 2), (0, 3), (1, 2)]);
}

#[test]
fn duplicate_points_are_jittered_deterministically() {
    let pts = vec![[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.5, 1.0]];
    let a = delaunay_2d(&pts).unwrap();
    let b = delaunay_2d(&pts).unwrap();
    assert_eq!(a, b);
    // All four nodes participate in the triangulation.
    let mut touched = vec![false; 4];
    for (x, y) in &a {
        touched[*x] = true;
        touched[*y] = true;
    }
    assert!(touched.iter().all(|t| *t));
}

#[test]
fn delaunay_2d_matches_bruteforce_oracle() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let m = r.gen_range(3..=12);
        let pts: Vec<[f64; 2]> = (0..m)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let fast = delaunay_2d(&pts).unwrap();
        let oracle = delaunay_2d_bruteforce(&pts);
        assert_eq!(fast, oracle, "seed {seed} ({m} points)");
    }
}

#[test]
fn regular_tetrahedron_has_all_six_edges() {
    let pts = vec![
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ];
    let edges = edges_3d(&pts).unwrap();
    assert_eq!(edges.len(), 6);
}

#[test]
fn centroid_of_tetrahedron_connects_to_all_vertices() {
    let pts = vec![
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [0.0, 0.0, 0.0],
    ];
    let edges = edges_3d(&pts).unwrap();
    for v in 0..4 {
        assert!(edges.contains(&(v, 4)), "centroid not connected to {v}");
    }
    let oracle = edges_3d_bruteforce(&pts);
    assert_eq!(edges, oracle);
}

#[test]
fn edges_3d_matches_bruteforce_oracle() {
    for seed in 0..40u64 {
        let mut r = rng(900 + seed);
        let d = r.gen_range(4..=10);
        let pts: Vec<[f64; 3]> = (0..d)
            .map(|_| {
                [
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let fast = edges_3d(&pts).unwrap();
        let oracle = edges_3d_bruteforce(&pts);
        assert_eq!(fast, oracle, "seed {seed} ({d} points)");
    }
}

#[test]
fn coplanar_points_reproduce_planar_delaunay() {
    for seed in 0..10u64 {
        let mut r = rng(50 + seed);
        let planar: Vec<[f64; 2]> = (0..8)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let lifted: Vec<[f64; 3]> = planar.iter().map(|p| [p[0], p[1], 0.75]).collect();
        let from_3d = edges_3d(&lifted).unwrap();
        let from_2d = delaunay_2d(&planar).unwrap();
        assert_eq!(from_3d, from_2d, "seed {seed}");
    }
}

#[test]
fn assignment_graph_of_two_single_edge_graphs() {
    let g2 = Graph2D::new(vec![[0.0, 0.0], [1.0, 0.0]], vec![(0, 1)]).unwrap();
    let g3 = UniverseGraph3D::with_topology(
        vec![[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        vec![(0, 1)],
    )
    .unwrap();
    let ag = AssignmentGraph::build(&g2, &g3).unwrap();
    assert_eq!(ag.node_count(), 4);
    assert_eq!(ag.edges().len(), 2);
    let pairs: Vec<_> = ag
        .edges()
        .iter()
        .map(|e| (ag.node_pair(e.node_a), ag.node_pair(e.node_b)))
        .collect();
    assert!(pairs.contains(&((0, 0), (1, 1))));
    assert!(pairs.contains(&((0, 1), (1, 0))));
}

#[test]
fn edgeless_graph_yields_edgeless_product() {
    let g2 = Graph2D::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], vec![]).unwrap();
    let g3 = UniverseGraph3D::with_topology(
        vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        vec![(0, 1), (1, 2)],
    )
    .unwrap();
    let ag = AssignmentGraph::build(&g2, &g3).unwrap();
    assert_eq!(ag.node_count(), 12);
    assert!(ag.edges().is_empty());
}

#[test]
fn product_edge_count_matches_enumeration() {
    for seed in 0..15u64 {
        let mut r = rng(300 + seed);
        let m = r.gen_range(3..=6);
        let d = r.gen_range(4..=6);
        let pts2: Vec<[f64; 2]> = (0..m)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let pts3: Vec<[f64; 3]> = (0..d)
            .map(|_| {
                [
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                    r.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let g2 = Graph2D::from_points(pts2).unwrap();
        let g3 = UniverseGraph3D::from_points(pts3).unwrap();
        let ag = AssignmentGraph::build(&g2, &g3).unwrap();
        assert_eq!(ag.node_count(), m * d);
        assert_eq!(ag.edges().len(), 2 * g2.edges().len() * g3.edges().len());

        // Definition check by full enumeration over node pairs.
        let is_2d_edge = |a: usize, b: usize| {
            g2.edges().contains(&(a.min(b), a.max(b)))
        };
        let is_3d_edge = |a: usize, b: usize| {
            g3.edges().contains(&(a.min(b), a.max(b)))
        };
        let mut expected = std::collections::BTreeSet::new();
        for i in 0..m {
            for k in 0..d {
                for j in 0..m {
                    for n in 0..d {
                        let a = ag.node_index(i, k);
                        let b = ag.node_index(j, n);
                        if a < b && is_2d_edge(i, j) && is_3d_edge(k, n) {
                            expected.insert((a, b));
                        }
                    }
                }
            }
        }
        let got: std::collections::BTreeSet<(usize, usize)> = ag
            .edges()
            .iter()
            .map(|e| (e.node_a, e.node_b))
            .collect();
        assert_eq!(got, expected, "seed {seed}");
    }
}

#[test]
fn node_attribute_layout_is_pair_concatenation() {
    let g2 = Graph2D::new(vec![[0.25, -0.5], [1.0, 0.0]], vec![(0, 1)]).unwrap();
    let g3 = UniverseGraph3D::with_topology(
        vec![[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]],
        vec![(0, 1)],
    )
    .unwrap();
    let ag = AssignmentGraph::build(&g2, &g3).unwrap();
    let node = ag.node_index(0, 1);
    let (i, k) = ag.node_pair(node);
    assert_eq!((i, k), (0, 1));
    let attr = [
        g2.coords()[i][0],
        g2.coords()[i][1],
        g3.coords()[k][0],
        g3.coords()[k][1],
        g3.coords()[k][2],
    ];
    assert_eq!(attr, [0.25, -0.5, 0.4, 0.5, 0.6]);
}

#[test]
fn empty_node_set_is_rejected() {
    let g2 = Graph2D::new(vec![], vec![]).unwrap();
    let g3 = UniverseGraph3D::with_topology(vec![[0.0; 3]], vec![]).unwrap();
    assert!(matches!(
        AssignmentGraph::build(&g2, &g3),
        Err(GraphError::EmptyNodeSet)
    ));
}

#[test]
fn graph_construction_is_deterministic() {
    let mut r = rng(8);
    let pts: Vec<[f64; 2]> = (0..10)
        .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
        .collect();
    assert_eq!(delaunay_2d(&pts).unwrap(), delaunay_2d(&pts).unwrap());
}

#[test]
fn edge_validation_errors() {
    assert!(matches!(
        Graph2D::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![(0, 0)]),
        Err(GraphError::SelfLoop(0))
    ));
    assert!(matches!(
        Graph2D::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![(0, 2)]),
        Err(GraphError::InvalidEdge { .. })
    ));
    assert!(matches!(
        Graph2D::new(vec![[0.0, 0.0], [1.0, 1.0]], vec![(0, 1), (1, 0)]),
        Err(GraphError::DuplicateEdge(0, 1))
    ));
}
