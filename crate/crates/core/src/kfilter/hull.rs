//! Convex hulls in 2D and 3D, reduced to half-space lists for membership tests.

use crate::error::{Error, Result};

/// Closed half-space `normal · p <= offset` with unit normal.
#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpace<const D: usize> {
    pub normal: [f64; D],
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexHull<const D: usize> {
    pub faces: Vec<HalfSpace<D>>,
    /// Largest point norm, used to scale tolerances.
    pub scale: f64,
}

impl<const D: usize> ConvexHull<D> {
    /// True when `p` lies inside or within `tol` of the hull boundary.
    pub fn contains(&self, p: &[f64; D], tol: f64) -> bool {
        self.faces.iter().all(|f| {
            let d: f64 = f.normal.iter().zip(p).map(|(n, x)| n * x).sum();
            d - f.offset <= tol
        })
    }
}

fn sorted_unique<const D: usize>(points: &[[f64; D]]) -> Vec<[f64; D]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    pts.dedup();
    pts
}

fn scale_of<const D: usize>(points: &[[f64; D]]) -> f64 {
    points
        .iter()
        .map(|p| p.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

fn cross2(o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull vertices (monotone chain), collinear points dropped.
pub fn hull_vertices_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let pts = sorted_unique(points);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn hull_2d(points: &[[f64; 2]]) -> Result<ConvexHull<2>> {
    let verts = hull_vertices_2d(points);
    let scale = scale_of(points);
    if verts.len() < 3 {
        return Err(Error::DegenerateHull);
    }
    let area: f64 = (0..verts.len())
        .map(|i| {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
        / 2.0;
    if area <= 1e-12 * scale * scale {
        return Err(Error::DegenerateHull);
    }
    let faces = (0..verts.len())
        .map(|i| {
            let a = verts[i];
            let b = verts[(i + 1) % verts.len()];
            let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
            let len = (ex * ex + ey * ey).sqrt();
            // outward normal of a counter-clockwise edge
            let normal = [ey / len, -ex / len];
            HalfSpace {
                normal,
                offset: normal[0] * a[0] + normal[1] * a[1],
            }
        })
        .collect();
    Ok(ConvexHull { faces, scale })
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: [f64; 3],
    offset: f64,
}

impl Face {
    fn new(pts: &[[f64; 3]], v: [usize; 3]) -> Self {
        let n = cross(&sub(&pts[v[1]], &pts[v[0]]), &sub(&pts[v[2]], &pts[v[0]]));
        let len = norm(&n);
        let normal = [n[0] / len, n[1] / len, n[2] / len];
        Self {
            v,
            normal,
            offset: dot(&normal, &pts[v[0]]),
        }
    }

    fn distance(&self, p: &[f64; 3]) -> f64 {
        dot(&self.normal, p) - self.offset
    }
}

/// Incremental 3D hull. Points within `1e-10 * scale` of an existing face
/// are treated as lying on it.
pub fn hull_3d(points: &[[f64; 3]]) -> Result<ConvexHull<3>> {
    let pts = sorted_unique(points);
    let scale = scale_of(&pts);
    if pts.len() < 4 || scale == 0.0 {
        return Err(Error::DegenerateHull);
    }
    let eps = 1e-10 * scale;

    // initial tetrahedron from extreme points
    let i0 = 0;
    let i1 = (0..pts.len())
        .max_by(|&a, &b| norm(&sub(&pts[a], &pts[i0])).total_cmp(&norm(&sub(&pts[b], &pts[i0]))))
        .unwrap();
    let axis = sub(&pts[i1], &pts[i0]);
    if norm(&axis) <= eps {
        return Err(Error::DegenerateHull);
    }
    let line_dist = |p: &[f64; 3]| norm(&cross(&axis, &sub(p, &pts[i0]))) / norm(&axis);
    let i2 = (0..pts.len())
        .max_by(|&a, &b| line_dist(&pts[a]).total_cmp(&line_dist(&pts[b])))
        .unwrap();
    if line_dist(&pts[i2]) <= eps {
        return Err(Error::DegenerateHull);
    }
    let base = cross(&axis, &sub(&pts[i2], &pts[i0]));
    let base_len = norm(&base);
    let plane_dist = |p: &[f64; 3]| dot(&base, &sub(p, &pts[i0])) / base_len;
    let i3 = (0..pts.len())
        .max_by(|&a, &b| plane_dist(&pts[a]).abs().total_cmp(&plane_dist(&pts[b]).abs()))
        .unwrap();
    if plane_dist(&pts[i3]).abs() <= eps {
        return Err(Error::DegenerateHull);
    }

    let centroid = {
        let mut c = [0.0; 3];
        for i in [i0, i1, i2, i3] {
            for k in 0..3 {
                c[k] += pts[i][k] / 4.0;
            }
        }
        c
    };
    let oriented = |v: [usize; 3]| {
        let f = Face::new(&pts, v);
        if f.distance(&centroid) > 0.0 {
            Face::new(&pts, [v[0], v[2], v[1]])
        } else {
            f
        }
    };
    let mut faces = vec![
        oriented([i0, i1, i2]),
        oriented([i0, i1, i3]),
        oriented([i0, i2, i3]),
        oriented([i1, i2, i3]),
    ];

    for (pi, p) in pts.iter().enumerate() {
        if [i0, i1, i2, i3].contains(&pi) {
            continue;
        }
        let visible: Vec<bool> = faces.iter().map(|f| f.distance(p) > eps).collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        // directed edges of visible faces whose reverse is not visible form the horizon
        let mut visible_edges = std::collections::HashSet::new();
        for (f, &vis) in faces.iter().zip(&visible) {
            if vis {
                for k in 0..3 {
                    visible_edges.insert((f.v[k], f.v[(k + 1) % 3]));
                }
            }
        }
        let mut horizon = Vec::new();
        for (f, &vis) in faces.iter().zip(&visible) {
            if vis {
                for k in 0..3 {
                    let e = (f.v[k], f.v[(k + 1) % 3]);
                    if !visible_edges.contains(&(e.1, e.0)) {
                        horizon.push(e);
                    }
                }
            }
        }
        let mut kept: Vec<Face> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| !v)
            .map(|(f, _)| *f)
            .collect();
        for (a, b) in horizon {
            kept.push(Face::new(&pts, [a, b, pi]));
        }
        faces = kept;
    }

    Ok(ConvexHull {
        faces: faces
            .into_iter()
            .map(|f| HalfSpace {
                normal: f.normal,
                offset: f.offset,
            })
            .collect(),
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_hull_drops_interior_and_collinear() {
        let pts = [
            [1.0, 1.0],
            [-1.0, 1.0],
            [0.0, 0.0],
            [-1.0, -1.0],
            [1.0, -1.0],
            [0.0, 1.0],
        ];
        let v = hull_vertices_2d(&pts);
        assert_eq!(v.len(), 4);
        let h = hull_2d(&pts).unwrap();
        assert!(h.contains(&[0.0, 0.0], 0.0));
        assert!(h.contains(&[1.0, 0.5], 1e-12));
        assert!(!h.contains(&[1.1, 0.0], 1e-12));
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts = [[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(hull_2d(&pts), Err(Error::DegenerateHull)));
        let flat = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]];
        assert!(matches!(hull_3d(&flat), Err(Error::DegenerateHull)));
    }

    #[test]
    fn cube_hull() {
        let mut pts = Vec::new();
        for x in [-1.0, 1.0] {
            for y in [-1.0, 1.0] {
                for z in [-1.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        pts.push([0.2, 0.3, -0.1]);
        pts.push([0.0, 0.0, 1.0]);
        let h = hull_3d(&pts).unwrap();
        for q in [[0.0, 0.0, 0.0], [0.99, -0.99, 0.99], [1.0, 1.0, 1.0], [1.0, 0.0, 0.0]] {
            assert!(h.contains(&q, 1e-9), "{q:?}");
        }
        for q in [[1.01, 0.0, 0.0], [0.0, -1.2, 0.0], [0.8, 0.8, 1.1]] {
            assert!(!h.contains(&q, 1e-9), "{q:?}");
        }
    }

    #[test]
    fn random_3d_hull_against_bruteforce_separation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let h = hull_3d(&pts).unwrap();
        // every input point is inside its own hull
        assert!(pts.iter().all(|p| h.contains(p, 1e-9)));
        // every face supports the point set
        for f in &h.faces {
            let max = pts
                .iter()
                .map(|p| f.normal.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() - f.offset)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(max.abs() < 1e-9);
        }
    }
}
