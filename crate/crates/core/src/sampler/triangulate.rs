//! Marching-squares triangulation of a thresholded grid.

use std::collections::HashMap;

use super::DomainGrid;
use crate::geometry::TriangleMesh;

/// Crossing parameters are kept away from the cell corners so that no
/// crossing vertex coincides with a grid node.
const T_MARGIN: f64 = 1e-3;
const BISECTION_STEPS: usize = 40;

/// CCW-oriented triangulation of the inside region.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain2DMesh {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    /// Closed boundary polylines as vertex index loops.
    pub boundaries: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Key {
    Corner(usize, usize),
    HEdge(usize, usize),
    VEdge(usize, usize),
}

struct Builder<'g> {
    grid: &'g DomainGrid,
    index: HashMap<Key, usize>,
    vertices: Vec<[f64; 2]>,
}

impl Builder<'_> {
    fn vertex(&mut self, key: Key) -> usize {
        if let Some(&v) = self.index.get(&key) {
            return v;
        }
        let p = match key {
            Key::Corner(i, j) => self.grid.node(i, j),
            Key::HEdge(i, j) => self.crossing((i, j), (i + 1, j)),
            Key::VEdge(i, j) => self.crossing((i, j), (i, j + 1)),
        };
        let v = self.vertices.len();
        self.vertices.push(p);
        self.index.insert(key, v);
        v
    }

    /// Level-τ crossing on the segment between two nodes of opposite mask
    /// state: linear interpolation, refined by bisection on the exact
    /// density when the grid carries its mixture.
    fn crossing(&self, a: (usize, usize), b: (usize, usize)) -> [f64; 2] {
        let g = self.grid;
        let (pa, pb) = (g.node(a.0, a.1), g.node(b.0, b.1));
        let (va, vb) = (g.value(a.0, a.1), g.value(b.0, b.1));
        let at = |t: f64| [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
        let mut t = (va - g.tau) / (va - vb);
        if let Some(gmm) = &g.source {
            let f = |t: f64| gmm.density(at(t)) - g.tau;
            let (mut lo, mut hi) = (0.0, 1.0);
            let (flo, fhi) = (f(lo), f(hi));
            if (flo >= 0.0) != (fhi >= 0.0) {
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    if (f(mid) >= 0.0) == (flo >= 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                t = 0.5 * (lo + hi);
            }
        }
        at(t.clamp(T_MARGIN, 1.0 - T_MARGIN))
    }
}

pub fn triangulate_domain(grid: &DomainGrid) -> Domain2DMesh {
    let r = grid.resolution;
    let mut b = Builder {
        grid,
        index: HashMap::new(),
        vertices: Vec::new(),
    };
    let mut triangles = Vec::new();
    for j in 0..r - 1 {
        for i in 0..r - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let inside = corners.map(|(a, c)| grid.is_inside(a, c));
            if !inside.iter().any(|&x| x) {
                continue;
            }
            let edges = [Key::HEdge(i, j), Key::VEdge(i + 1, j), Key::HEdge(i, j + 1), Key::VEdge(i, j)];
            let saddle = inside == [true, false, true, false] || inside == [false, true, false, true];
            let split = saddle && {
                let c = grid.node(i, j);
                let h = grid.spacing();
                grid.density_at([c[0] + 0.5 * h[0], c[1] + 0.5 * h[1]]) < grid.tau
            };
            if split {
                for k in 0..4 {
                    if inside[k] {
                        let prev = b.vertex(edges[(k + 3) % 4]);
                        let corner = b.vertex(Key::Corner(corners[k].0, corners[k].1));
                        let next = b.vertex(edges[k]);
                        triangles.push([prev, corner, next]);
                    }
                }
                continue;
            }
            let mut poly = Vec::with_capacity(6);
            for k in 0..4 {
                if inside[k] {
                    poly.push(b.vertex(Key::Corner(corners[k].0, corners[k].1)));
                }
                if inside[k] != inside[(k + 1) % 4] {
                    poly.push(b.vertex(edges[k]));
                }
            }
            for k in 1..poly.len() - 1 {
                triangles.push([poly[0], poly[k], poly[k + 1]]);
            }
        }
    }
    let floor = grid.tau * (1.0 - 1e-6);
    let verts = &b.vertices;
    triangles.retain(|t| {
        let c = [0, 1].map(|a| (verts[t[0]][a] + verts[t[1]][a] + verts[t[2]][a]) / 3.0);
        grid.density_at(c) >= floor
    });
    compact(b.vertices, triangles)
}

fn compact(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Domain2DMesh {
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut out = Vec::new();
    let triangles: Vec<[usize; 3]> = triangles
        .into_iter()
        .map(|t| {
            t.map(|v| {
                if remap[v] == usize::MAX {
                    remap[v] = out.len();
                    out.push(vertices[v]);
                }
                remap[v]
            })
        })
        .collect();
    let mut mesh = Domain2DMesh {
        vertices: out,
        triangles,
        boundaries: Vec::new(),
    };
    mesh.boundaries = mesh.boundary_loops();
    mesh
}

impl Domain2DMesh {
    fn signed_area(&self, t: &[usize; 3]) -> f64 {
        let [a, b, c] = t.map(|v| self.vertices[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn area(&self) -> f64 {
        self.triangles.iter().map(|t| self.signed_area(t)).sum()
    }

    fn directed_edges(&self) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                *edges.entry((t[k], t[(k + 1) % 3])).or_insert(0) += 1;
            }
        }
        edges
    }

    fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let edges = self.directed_edges();
        let mut next: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut starts: Vec<(usize, usize)> = edges
            .keys()
            .filter(|&&(a, b)| !edges.contains_key(&(b, a)))
            .copied()
            .collect();
        starts.sort_unstable();
        for &(a, b) in &starts {
            next.entry(a).or_default().push(b);
        }
        let mut loops = Vec::new();
        for &(a, _) in &starts {
            while next.get(&a).is_some_and(|v| !v.is_empty()) {
                let mut lp = vec![a];
                let mut cur = a;
                loop {
                    let Some(n) = next.get_mut(&cur).and_then(|v| v.pop()) else {
                        break;
                    };
                    if n == a {
                        break;
                    }
                    lp.push(n);
                    cur = n;
                }
                loops.push(lp);
            }
        }
        loops
    }

    /// Every triangle CCW, every edge shared by at most two triangles with
    /// opposite orientation, and the boundary edges closing into loops.
    pub fn is_watertight(&self) -> bool {
        if self.triangles.iter().any(|t| self.signed_area(t) <= 0.0) {
            return false;
        }
        let edges = self.directed_edges();
        if edges.values().any(|&c| c > 1) {
            return false;
        }
        let mut balance: HashMap<usize, i64> = HashMap::new();
        for &(a, b) in edges.keys() {
            if !edges.contains_key(&(b, a)) {
                *balance.entry(a).or_insert(0) += 1;
                *balance.entry(b).or_insert(0) -= 1;
            }
        }
        balance.values().all(|&v| v == 0)
    }

    /// Whether any two vertices coincide exactly.
    pub fn has_duplicate_vertices(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        !self.vertices.iter().all(|v| seen.insert((v[0].to_bits(), v[1].to_bits())))
    }

    /// Bounding box of the vertices.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.vertices {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// The domain as a flat mesh in the z = 0 plane.
    pub fn to_triangle_mesh(&self) -> TriangleMesh {
        TriangleMesh::new(
            self.vertices.iter().map(|v| [v[0], v[1], 0.0]).collect(),
            self.triangles.clone(),
        )
        .expect("domain triangulation indices are valid")
    }
}
