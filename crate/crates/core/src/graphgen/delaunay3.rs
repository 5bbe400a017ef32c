use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::delaunay2::delaunay_2d;
use super::GraphError;

/// Edges of the 3D Delaunay tetrahedralization via Bowyer-Watson insertion.
///
/// Coplanar inputs fall back to the 2D Delaunay triangulation of the
/// best-fit plane projection; two points yield the single edge.
pub fn edges_3d(points: &[[f64; 3]]) -> Result<Vec<(usize, usize)>, GraphError> {
    let d = points.len();
    if d < 2 {
        return Err(GraphError::TooFewNodes { got: d, min: 2 });
    }
    if d == 2 {
        return Ok(vec![(0, 1)]);
    }
    let pts = deduplicate(points);

    if d == 3 || coplanar(&pts) {
        return delaunay_2d(&project_to_plane(&pts));
    }

    Ok(bowyer_watson_3d(&pts))
}

fn deduplicate(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut q = *p;
        let mut attempt = 0u64;
        while out
            .iter()
            .any(|r| r[0] == q[0] && r[1] == q[1] && r[2] == q[2])
        {
            let seed = p[0].to_bits()
                ^ p[1].to_bits().rotate_left(17)
                ^ p[2].to_bits().rotate_left(34)
                ^ (i as u64)
                ^ (attempt << 32);
            q[0] = p[0] + jitter(seed);
            q[1] = p[1] + jitter(seed.wrapping_add(1));
            q[2] = p[2] + jitter(seed.wrapping_add(2));
            attempt += 1;
        }
        out.push(q);
    }
    out
}

fn jitter(seed: u64) -> f64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let unit = (z >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * unit - 1.0) * 1e-9
}

/// Six times the signed volume of tetrahedron (a, b, c, d).
fn orient3d(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3]) -> f64 {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let w = [d[0] - a[0], d[1] - a[1], d[2] - a[2]];
    u[0] * (v[1] * w[2] - v[2] * w[1]) - u[1] * (v[0] * w[2] - v[2] * w[0])
        + u[2] * (v[0] * w[1] - v[1] * w[0])
}

fn spread(pts: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).max(hi[1] - lo[1]).max(hi[2] - lo[2])
}

fn coplanar(pts: &[[f64; 3]]) -> bool {
    let scale = spread(pts).max(1e-12);
    let tol = 1e-12 * scale * scale * scale;
    for b in 1..pts.len() {
        for c in b + 1..pts.len() {
            for e in c + 1..pts.len() {
                if orient3d(pts[0], pts[b], pts[c], pts[e]).abs() > tol {
                    return false;
                }
            }
        }
    }
    true
}

/// Projects onto the best-fit plane (principal axes of the covariance).
fn project_to_plane(pts: &[[f64; 3]]) -> Vec<[f64; 2]> {
    let n = pts.len() as f64;
    let centroid = pts.iter().fold([0.0; 3], |acc, p| {
        [acc[0] + p[0] / n, acc[1] + p[1] / n, acc[2] + p[2] / n]
    });
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    // Two largest-eigenvalue directions span the plane.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let e1 = eig.eigenvectors.column(order[0]).into_owned();
    let e2 = eig.eigenvectors.column(order[1]).into_owned();
    pts.iter()
        .map(|p| {
            let d = Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
            [d.dot(&e1), d.dot(&e2)]
        })
        .collect()
}

/// Strict in-circumsphere test for a positively-oriented tetrahedron
/// (`orient3d > 0`); with that orientation the determinant is negative for
/// interior points.
fn in_sphere(a: [f64; 3], b: [f64; 3], c: [f64; 3], d: [f64; 3], p: [f64; 3]) -> bool {
    let rows: Vec<[f64; 4]> = [a, b, c, d]
        .iter()
        .map(|q| {
            let dx = q[0] - p[0];
            let dy = q[1] - p[1];
            let dz = q[2] - p[2];
            [dx, dy, dz, dx * dx + dy * dy + dz * dz]
        })
        .collect();
    det4(&rows) < 0.0
}

fn det4(m: &[[f64; 4]]) -> f64 {
    let mut det = 0.0;
    for col in 0..4 {
        let mut minor = [[0.0; 3]; 3];
        for r in 1..4 {
            let mut cc = 0;
            for c in 0..4 {
                if c != col {
                    minor[r - 1][cc] = m[r][c];
                    cc += 1;
                }
            }
        }
        let m3 = minor[0][0] * (minor[1][1] * minor[2][2] - minor[1][2] * minor[2][1])
            - minor[0][1] * (minor[1][0] * minor[2][2] - minor[1][2] * minor[2][0])
            + minor[0][2] * (minor[1][0] * minor[2][1] - minor[1][1] * minor[2][0]);
        let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[0][col] * m3;
    }
    det
}

fn positively_oriented(coords: &[[f64; 3]], t: [usize; 4]) -> [usize; 4] {
    if orient3d(coords[t[0]], coords[t[1]], coords[t[2]], coords[t[3]]) < 0.0 {
        [t[0], t[1], t[3], t[2]]
    } else {
        t
    }
}

fn bowyer_watson_3d(pts: &[[f64; 3]]) -> Vec<(usize, usize)> {
    let d = pts.len();
    let mut coords = pts.to_vec();

    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let c = [
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    ];
    // The enclosing tetrahedron must stay outside every data circumsphere;
    // 1e5 times the spread leaves comfortable float margin for desk-scale
    // point counts.
    let delta = spread(pts).max(1.0) * 1e5;
    coords.push([c[0], c[1], c[2] + delta]);
    coords.push([c[0] - delta, c[1] - delta, c[2] - delta]);
    coords.push([c[0] + delta, c[1] - delta, c[2] - delta]);
    coords.push([c[0], c[1] + delta, c[2] - delta]);

    let mut tets: Vec<[usize; 4]> = vec![positively_oriented(&coords, [d, d + 1, d + 2, d + 3])];

    for p in 0..d {
        let point = coords[p];
        let mut bad = Vec::new();
        for (ti, t) in tets.iter().enumerate() {
            if in_sphere(
                coords[t[0]],
                coords[t[1]],
                coords[t[2]],
                coords[t[3]],
                point,
            ) {
                bad.push(ti);
            }
        }
        let mut face_count: std::collections::BTreeMap<[usize; 3], usize> =
            std::collections::BTreeMap::new();
        for &ti in &bad {
            let t = tets[ti];
            for f in tet_faces(t) {
                *face_count.entry(f).or_insert(0) += 1;
            }
        }
        for &ti in bad.iter().rev() {
            tets.swap_remove(ti);
        }
        for (face, count) in face_count {
            if count == 1 {
                tets.push(positively_oriented(&coords, [face[0], face[1], face[2], p]));
            }
        }
    }

    let mut edges = std::collections::BTreeSet::new();
    for t in &tets {
        if t.iter().any(|&v| v >= d) {
            continue;
        }
        for i in 0..4 {
            for j in i + 1..4 {
                let (a, b) = (t[i].min(t[j]), t[i].max(t[j]));
                edges.insert((a, b));
            }
        }
    }
    edges.into_iter().collect()
}

fn tet_faces(t: [usize; 4]) -> [[usize; 3]; 4] {
    let mut faces = [
        [t[0], t[1], t[2]],
        [t[0], t[1], t[3]],
        [t[0], t[2], t[3]],
        [t[1], t[2], t[3]],
    ];
    for f in &mut faces {
        f.sort_unstable();
    }
    faces
}

/// Brute-force Delaunay edges by the empty-circumsphere definition.
#[cfg(test)]
pub fn edges_3d_bruteforce(pts: &[[f64; 3]]) -> Vec<(usize, usize)> {
    let n = pts.len();
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let orient = orient3d(pts[i], pts[j], pts[k], pts[l]);
                    if orient == 0.0 {
                        continue;
                    }
                    let t = if orient > 0.0 {
                        [i, j, k, l]
                    } else {
                        [i, j, l, k]
                    };
                    let empty = (0..n)
                        .filter(|q| ![i, j, k, l].contains(q))
                        .all(|q| !in_sphere(pts[t[0]], pts[t[1]], pts[t[2]], pts[t[3]], pts[q]));
                    if empty {
                        for a in 0..4 {
                            for b in a + 1..4 {
                                let (x, y) = (t[a].min(t[b]), t[a].max(t[b]));
                                edges.insert((x, y));
                            }
                        }
                    }
                }
            }
        }
    }
    edges.into_iter().collect()
}
