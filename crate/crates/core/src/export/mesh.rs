//! Iso-surface extraction and mesh cleanup.

use std::collections::HashMap;

use rayon::prelude::*;

use super::tables::{CORNERS, EDGES, EDGE_TABLE, TRIANGLE_TABLE};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{DVec3, Ray};
use crate::rendering::surface_trace;
use crate::scene::ShadingScene;

/// Default extraction level of the union SDF.
pub const DEFAULT_ISO: f64 = 0.001;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<DVec3>,
    /// Counter-clockwise seen from outside.
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn triangle(&self, t: usize) -> [DVec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn centroid(&self, t: usize) -> DVec3 {
        let [a, b, c] = self.triangle(t);
        (a + b + c) / 3.0
    }

    /// Unnormalized face normal, twice the area long.
    pub fn face_normal(&self, t: usize) -> DVec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(c - a)
    }

    /// Keeps the listed triangles and drops unreferenced vertices, keeping
    /// the relative order of both.
    pub fn subset(&self, keep: &[usize]) -> Mesh {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        let mut used = vec![false; self.vertices.len()];
        for &t in keep {
            for &v in &self.triangles[t] {
                used[v as usize] = true;
            }
        }
        let mut vertices = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                remap[i] = vertices.len() as u32;
                vertices.push(self.vertices[i]);
            }
        }
        let triangles = keep.iter().map(|&t| self.triangles[t].map(|v| remap[v as usize])).collect();
        Mesh { vertices, triangles }
    }
}

/// Marching cubes of `f` on a lattice of `res` samples per axis spanning
/// `[-1,1]^3`. Vertices on shared edges are merged.
pub fn marching_cubes_fn(f: impl Fn(DVec3) -> f64 + Sync, res: usize, iso: f64) -> Result<Mesh> {
    if res < 2 {
        return Err(Error::InvalidArgument(format!("lattice resolution {res} is below 2")));
    }
    let h = 2.0 / (res - 1) as f64;
    let pos = |i: usize, j: usize, k: usize| DVec3::new(-1.0 + i as f64 * h, -1.0 + j as f64 * h, -1.0 + k as f64 * h);
    let idx = |i: usize, j: usize, k: usize| (k * res + j) * res + i;
    let values: Vec<f64> = (0..res * res * res)
        .into_par_iter()
        .map(|n| {
            let (i, j, k) = (n % res, (n / res) % res, n / (res * res));
            f(pos(i, j, k))
        })
        .collect();

    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let corner = |c: usize| {
                    let o = CORNERS[c];
                    (i + o[0], j + o[1], k + o[2])
                };
                let mut case = 0usize;
                let mut v = [0.0; 8];
                for (c, vc) in v.iter_mut().enumerate() {
                    let (a, b, d) = corner(c);
                    *vc = values[idx(a, b, d)];
                    if *vc < iso {
                        case |= 1 << c;
                    }
                }
                let bits = EDGE_TABLE[case];
                if bits == 0 {
                    continue;
                }
                let mut ev = [u32::MAX; 12];
                for (e, &[c0, c1]) in EDGES.iter().enumerate() {
                    if bits & (1 << e) == 0 {
                        continue;
                    }
                    let (p0, p1) = (corner(c0), corner(c1));
                    let (g0, g1) = (idx(p0.0, p0.1, p0.2), idx(p1.0, p1.1, p1.2));
                    let key = (g0.min(g1), g0.max(g1));
                    let next = mesh.vertices.len() as u32;
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let (a, b) = (v[c0], v[c1]);
                        let t = if b != a { ((iso - a) / (b - a)).clamp(0.0, 1.0) } else { 0.5 };
                        let x0 = pos(p0.0, p0.1, p0.2);
                        let x1 = pos(p1.0, p1.1, p1.2);
                        mesh.vertices.push(x0 + (x1 - x0) * t);
                        next
                    });
                    ev[e] = id;
                }
                for tri in TRIANGLE_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [ev[tri[0] as usize], ev[tri[2] as usize], ev[tri[1] as usize]];
                    // Edges that collapse to a point give degenerate triangles.
                    if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
                        mesh.triangles.push(t);
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(Error::NoSurface(iso));
    }
    Ok(mesh)
}

/// Marching cubes of the scene's union SDF, eyeballs included.
pub fn marching_cubes<S: ShadingScene + ?Sized>(scene: &S, res: usize, iso: f64) -> Result<Mesh> {
    if res < 32 {
        return Err(Error::InvalidArgument(format!("lattice resolution {res} is below 32")));
    }
    marching_cubes_fn(|x| scene.union(x).sdf, res, iso)
}

/// Whether `camera` sees the point `c` with outward normal `n` on a
/// surface of `scene`. `tol` absorbs the gap between the mesh and the
/// zero level set.
pub fn sees<S: ShadingScene + ?Sized>(camera: &Camera, scene: &S, c: DVec3, n: DVec3, tol: f64, eps: f64) -> bool {
    let o = camera.origin();
    if n.dot(o - c) <= 0.0 {
        return false;
    }
    let Some((u, v)) = camera.project(c) else {
        return false;
    };
    if u < 0.0 || v < 0.0 || u >= camera.width() as f64 || v >= camera.height() as f64 {
        return false;
    }
    let d = c - o;
    let dist = d.length();
    let ray = Ray::new(o, d / dist);
    match surface_trace(&ray, scene, 0.0, dist - tol, eps) {
        Some(h) => h.t >= dist - tol,
        None => true,
    }
}

/// Drops triangles that no camera sees through its centroid.
pub fn cull_unseen<S: ShadingScene + ?Sized>(mesh: &Mesh, cameras: &[Camera], scene: &S, tol: f64) -> Mesh {
    let keep: Vec<usize> = (0..mesh.triangles.len())
        .into_par_iter()
        .filter(|&t| {
            let c = mesh.centroid(t);
            let n = mesh.face_normal(t);
            cameras.iter().any(|cam| sees(cam, scene, c, n, tol, tol * 1e-3))
        })
        .collect();
    mesh.subset(&keep)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Component id of each triangle under shared-edge adjacency, numbered in
/// order of first appearance.
pub fn components(mesh: &Mesh) -> Vec<usize> {
    let n = mesh.triangles.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut first: HashMap<(u32, u32), usize> = HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for e in 0..3 {
            let (a, b) = (tri[e], tri[(e + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match first.get(&key) {
                Some(&o) => {
                    let (ra, rb) = (find(&mut parent, t), find(&mut parent, o));
                    if ra != rb {
                        parent[ra.max(rb)] = ra.min(rb);
                    }
                }
                None => {
                    first.insert(key, t);
                }
            }
        }
    }
    let mut label = HashMap::new();
    (0..n)
        .map(|t| {
            let r = find(&mut parent, t);
            let next = label.len();
            *label.entry(r).or_insert(next)
        })
        .collect()
}

/// Keeps the component with the most triangles; ties go to the component
/// holding the lowest vertex index.
pub fn largest_component(mesh: &Mesh) -> Mesh {
    if mesh.triangles.is_empty() {
        return mesh.clone();
    }
    let comp = components(mesh);
    let count = comp.iter().max().map_or(0, |m| m + 1);
    let mut size = vec![0usize; count];
    let mut low = vec![u32::MAX; count];
    for (t, &c) in comp.iter().enumerate() {
        size[c] += 1;
        low[c] = low[c].min(*mesh.triangles[t].iter().min().expect("three indices"));
    }
    let best = (0..count)
        .max_by(|&a, &b| size[a].cmp(&size[b]).then(low[b].cmp(&low[a])))
        .expect("at least one component");
    let keep: Vec<usize> = (0..comp.len()).filter(|&t| comp[t] == best).collect();
    mesh.subset(&keep)
}
