use super::GraphError;

/// Edges of the 2D Delaunay triangulation via Bowyer-Watson insertion.
///
/// Two points: the single edge. All points collinear: the path graph in
/// coordinate order. Exact duplicate points are perturbed by a
/// deterministic 1e-9 jitter derived from the coordinate bits, so the
/// triangulation stays total.
pub fn delaunay_2d(points: &[[f64; 2]]) -> Result<Vec<(usize, usize)>, GraphError> {
    let m = points.len();
    if m < 2 {
        return Err(GraphError::TooFewNodes { got: m, min: 2 });
    }
    if m == 2 {
        return Ok(vec![(0, 1)]);
    }
    let pts = deduplicate(points);

    if let Some(order) = collinear_order(&pts) {
        let mut edges: Vec<(usize, usize)> = order
            .windows(2)
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
            .collect();
        edges.sort_unstable();
        return Ok(edges);
    }

    Ok(bowyer_watson(&pts))
}

/// Perturbs exact duplicates so every coordinate pair is unique.
fn deduplicate(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let mut q = *p;
        let mut attempt = 0u64;
        while out.iter().any(|r| r[0] == q[0] && r[1] == q[1]) {
            let seed = p[0].to_bits() ^ p[1].to_bits().rotate_left(17) ^ (i as u64) ^ (attempt << 32);
            q[0] = p[0] + jitter(seed);
            q[1] = p[1] + jitter(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
            attempt += 1;
        }
        out.push(q);
    }
    out
}

fn jitter(seed: u64) -> f64 {
    // splitmix64 -> uniform in [-1e-9, 1e-9]
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let unit = (z >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * unit - 1.0) * 1e-9
}

/// Signed double area of triangle (a, b, c); positive when counterclockwise.
fn orient2d(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Returns an index ordering if every point lies on one line.
fn collinear_order(pts: &[[f64; 2]]) -> Option<Vec<usize>> {
    let scale = spread(pts).max(1e-12);
    let tol = 1e-12 * scale * scale;
    let non_collinear = (1..pts.len()).any(|b| {
        (b + 1..pts.len()).any(|c| orient2d(pts[0], pts[b], pts[c]).abs() > tol)
    });
    if non_collinear {
        return None;
    }
    let mut order: Vec<usize> = (0..pts.len()).collect();
    order.sort_by(|&a, &b| {
        pts[a]
            .partial_cmp(&pts[b])
            .expect("coordinates are finite")
    });
    Some(order)
}

fn spread(pts: &[[f64; 2]]) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (hi[0] - lo[0]).max(hi[1] - lo[1])
}

/// Strict in-circumcircle test for a counterclockwise triangle (a, b, c).
fn in_circle(a: [f64; 2], b: [f64; 2], c: [f64; 2], p: [f64; 2]) -> bool {
    let ax = a[0] - p[0];
    let ay = a[1] - p[1];
    let bx = b[0] - p[0];
    let by = b[1] - p[1];
    let cx = c[0] - p[0];
    let cy = c[1] - p[1];
    let a2 = ax * ax + ay * ay;
    let b2 = bx * bx + by * by;
    let c2 = cx * cx + cy * cy;
    let det = ax * (by * c2 - b2 * cy) - ay * (bx * c2 - b2 * cx) + a2 * (bx * cy - by * cx);
    det > 0.0
}

// The insertion hull is bounded by three "ideal" vertices at infinity in
// fixed directions, handled symbolically: circumcircles through an ideal
// vertex degenerate into half-planes. This gives the exact limit of an
// arbitrarily large super-triangle, so hull edges come out right.
const IDEAL_DIRS: [[f64; 2]; 3] = [
    [0.0, 1.0],
    [-0.866_025_403_784_438_6, -0.5],
    [0.866_025_403_784_438_6, -0.5],
];

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn bowyer_watson(pts: &[[f64; 2]]) -> Vec<(usize, usize)> {
    let m = pts.len();
    let is_ideal = |v: usize| v >= m;
    let dir = |v: usize| IDEAL_DIRS[v - m];

    // Rotate the triangle so ideal vertices sit at the back; cyclic
    // rotations preserve orientation.
    let rotate_ideals_back = |t: [usize; 3]| -> [usize; 3] {
        let mut t = t;
        for _ in 0..2 {
            let ideal_count = t.iter().filter(|&&v| is_ideal(v)).count();
            let want_front_real = match ideal_count {
                1 => !is_ideal(t[2]),
                2 => is_ideal(t[0]),
                _ => false,
            };
            if want_front_real {
                t = [t[1], t[2], t[0]];
            }
        }
        t
    };

    let orient = |t: [usize; 3]| -> f64 {
        let t = rotate_ideals_back(t);
        let n_ideal = t.iter().filter(|&&v| is_ideal(v)).count();
        match n_ideal {
            0 => orient2d(pts[t[0]], pts[t[1]], pts[t[2]]),
            1 => {
                let (a, b, d) = (pts[t[0]], pts[t[1]], dir(t[2]));
                cross([b[0] - a[0], b[1] - a[1]], d)
            }
            2 => cross(dir(t[1]), dir(t[2])),
            _ => 1.0,
        }
    };

    // Strict in-circumcircle test for a ccw triangle, taking the exact
    // limit when ideal vertices are involved.
    let in_circumcircle = |t: [usize; 3], p: [f64; 2]| -> bool {
        let t = rotate_ideals_back(t);
        let n_ideal = t.iter().filter(|&&v| is_ideal(v)).count();
        match n_ideal {
            0 => in_circle(pts[t[0]], pts[t[1]], pts[t[2]], p),
            1 => orient2d(pts[t[0]], pts[t[1]], p) > 0.0,
            2 => {
                let u = pts[t[0]];
                let (di, dj) = (dir(t[1]), dir(t[2]));
                cross(
                    [u[0] - p[0], u[1] - p[1]],
                    [di[0] - dj[0], di[1] - dj[1]],
                ) >= 0.0
            }
            _ => true,
        }
    };

    let oriented = |t: [usize; 3]| -> [usize; 3] {
        if orient(t) < 0.0 {
            [t[0], t[2], t[1]]
        } else {
            t
        }
    };

    let mut triangles: Vec<[usize; 3]> = vec![[m, m + 1, m + 2]];

    for p in 0..m {
        let point = pts[p];
        let mut bad = Vec::new();
        for (ti, t) in triangles.iter().enumerate() {
            if in_circumcircle(*t, point) {
                bad.push(ti);
            }
        }
        // Boundary of the cavity: edges used by exactly one bad triangle.
        let mut edge_count: std::collections::BTreeMap<(usize, usize), usize> =
            std::collections::BTreeMap::new();
        for &ti in &bad {
            let t = triangles[ti];
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                *edge_count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for &ti in bad.iter().rev() {
            triangles.swap_remove(ti);
        }
        for ((a, b), count) in edge_count {
            if count == 1 {
                triangles.push(oriented([a, b, p]));
            }
        }
    }

    let mut edges = std::collections::BTreeSet::new();
    for t in &triangles {
        if t.iter().any(|&v| is_ideal(v)) {
            continue;
        }
        for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    edges.into_iter().collect()
}

/// Brute-force Delaunay edges by the empty-circumcircle definition; O(n^4).
///
/// Test oracle: a triangle is Delaunay iff no other point lies strictly
/// inside its circumcircle.
#[cfg(test)]
pub fn delaunay_2d_bruteforce(pts: &[[f64; 2]]) -> Vec<(usize, usize)> {
    let n = pts.len();
    let mut edges = std::collections::BTreeSet::new();
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                if orient2d(pts[i], pts[j], pts[k]).abs() == 0.0 {
                    continue;
                }
                let (a, b, c) = if orient2d(pts[i], pts[j], pts[k]) > 0.0 {
                    (pts[i], pts[j], pts[k])
                } else {
                    (pts[i], pts[k], pts[j])
                };
                let empty = (0..n)
                    .filter(|&q| q != i && q != j && q != k)
                    .all(|q| !in_circle(a, b, c, pts[q]));
                if empty {
                    edges.insert((i, j));
                    edges.insert((j, k));
                    edges.insert((i, k));
                }
            }
        }
    }
    edges.into_iter().collect()
}
