//! Per-triangle grid atlas and texture baking.

use std::collections::VecDeque;

use rayon::prelude::*;

use super::mesh::Mesh;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::math::DVec3;
use crate::scene::ShadingScene;

/// Empty texels kept around every chart.
pub const GUTTER: usize = 2;
/// Smallest allowed chart interior, in texels.
const MIN_INTERIOR: usize = 3;

/// Texture-space placement of one triangle: a right triangle in the
/// lower-left half of a square cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chart {
    /// Texel coordinates of the three corners, matching the triangle's
    /// vertex order.
    pub corners: [[f64; 2]; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atlas {
    pub size: usize,
    pub cell: usize,
    pub charts: Vec<Chart>,
}

impl Atlas {
    pub fn new(triangles: usize, size: usize) -> Result<Self> {
        let per_row = (triangles as f64).sqrt().ceil().max(1.0) as usize;
        let cell = size / per_row;
        if cell < 2 * GUTTER + MIN_INTERIOR {
            return Err(Error::AtlasCapacity { size, triangles });
        }
        let span = (cell - 2 * GUTTER) as f64;
        let charts = (0..triangles)
            .map(|t| {
                let (cx, cy) = ((t % per_row) * cell + GUTTER, (t / per_row) * cell + GUTTER);
                let (x0, y0) = (cx as f64, cy as f64);
                Chart {
                    corners: [[x0, y0], [x0 + span, y0], [x0, y0 + span]],
                }
            })
            .collect();
        Ok(Self { size, cell, charts })
    }

    /// Normalized UVs with `v` pointing up, as OBJ expects.
    pub fn uv(&self, t: usize, corner: usize) -> [f64; 2] {
        let [x, y] = self.charts[t].corners[corner];
        let s = self.size as f64;
        [x / s, 1.0 - y / s]
    }

    /// Chart texels of triangle `t` with barycentric weights of their
    /// centers, clamped onto the triangle. Texels within half a texel of
    /// the chart edge are included so bilinear lookups stay inside.
    pub fn texels(&self, t: usize) -> Vec<(usize, usize, [f64; 3])> {
        let c = self.charts[t].corners;
        let span = c[1][0] - c[0][0];
        let (x0, y0) = (c[0][0], c[0][1]);
        let mut out = Vec::new();
        let lo_x = x0.floor() as usize;
        let lo_y = y0.floor() as usize;
        for ty in lo_y..(y0 + span).ceil() as usize {
            for tx in lo_x..(x0 + span).ceil() as usize {
                let u = (tx as f64 + 0.5 - x0) / span;
                let v = (ty as f64 + 0.5 - y0) / span;
                let slack = 0.5 / span;
                if u < -slack || v < -slack || u + v > 1.0 + slack * std::f64::consts::SQRT_2 {
                    continue;
                }
                let (mut b1, mut b2) = (u.max(0.0), v.max(0.0));
                let s = b1 + b2;
                if s > 1.0 {
                    b1 /= s;
                    b2 /= s;
                }
                out.push((tx, ty, [(1.0 - b1 - b2).max(0.0), b1, b2]));
            }
        }
        out
    }
}

/// One baked texel: texel coordinates and the surface point it samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BakeSample {
    pub x: usize,
    pub y: usize,
    pub point: DVec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Maps {
    /// Object-space unit normals (linear, in `[-1,1]`).
    pub normal: ImageBuf,
    pub diffuse: ImageBuf,
    pub specular: ImageBuf,
    pub roughness: ImageBuf,
    pub samples: Vec<BakeSample>,
}

/// Samples the scene's material and union normal at every chart texel,
/// then dilates into the gutters.
pub fn bake<S: ShadingScene + ?Sized>(mesh: &Mesh, atlas: &Atlas, scene: &S) -> Maps {
    let n = atlas.size;
    let per_tri: Vec<Vec<(BakeSample, [f32; 8])>> = (0..mesh.triangles.len())
        .into_par_iter()
        .map(|t| {
            let [a, b, c] = mesh.triangle(t);
            atlas
                .texels(t)
                .into_iter()
                .map(|(x, y, w)| {
                    let p = a * w[0] + b * w[1] + c * w[2];
                    let s = scene.sample(p, 0.0);
                    let m = scene.material(p, s.region);
                    let v = [
                        s.normal.x as f32,
                        s.normal.y as f32,
                        s.normal.z as f32,
                        m.diffuse.x as f32,
                        m.diffuse.y as f32,
                        m.diffuse.z as f32,
                        m.specular as f32,
                        m.roughness as f32,
                    ];
                    (BakeSample { x, y, point: p }, v)
                })
                .collect()
        })
        .collect();
    let mut texels = vec![None::<[f32; 8]>; n * n];
    let mut samples = Vec::new();
    for (s, v) in per_tri.into_iter().flatten() {
        texels[s.y * n + s.x] = Some(v);
        samples.push(s);
    }
    dilate(&mut texels, n);
    let fill = |off: usize, ch: u32| {
        ImageBuf::from_fn(n as u32, n as u32, ch, |x, y, px| {
            let v = texels[y as usize * n + x as usize].unwrap_or([0.0; 8]);
            px.copy_from_slice(&v[off..off + ch as usize]);
        })
    };
    Maps {
        normal: fill(0, 3),
        diffuse: fill(3, 3),
        specular: fill(6, 1),
        roughness: fill(7, 1),
        samples,
    }
}

/// Fills empty texels from the nearest filled one (4-neighborhood
/// breadth-first order, scanning neighbors left, right, up, down).
fn dilate<T: Copy>(texels: &mut [Option<T>], n: usize) {
    let mut queue: VecDeque<usize> = (0..texels.len()).filter(|&i| texels[i].is_some()).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % n, i / n);
        let v = texels[i];
        let mut push = |j: usize| {
            if texels[j].is_none() {
                texels[j] = v;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < n {
            push(i + 1);
        }
        if y > 0 {
            push(i - n);
        }
        if y + 1 < n {
            push(i + n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_do_not_overlap() {
        let atlas = Atlas::new(50, 128).unwrap();
        let mut owner = vec![usize::MAX; 128 * 128];
        for t in 0..50 {
            for (x, y, _) in atlas.texels(t) {
                assert!(x < 128 && y < 128);
                let o = &mut owner[y * 128 + x];
                assert_eq!(*o, usize::MAX, "texel ({x},{y}) claimed twice");
                *o = t;
            }
        }
    }

    #[test]
    fn capacity_is_checked() {
        assert!(matches!(Atlas::new(10_000, 64), Err(Error::AtlasCapacity { .. })));
        assert!(Atlas::new(16, 28).is_ok());
    }

    #[test]
    fn corner_texels_reproduce_corners() {
        let atlas = Atlas::new(4, 64).unwrap();
        let tex = atlas.texels(3);
        assert!(tex.iter().all(|(_, _, w)| w.iter().all(|&b| (0.0..=1.0).contains(&b))));
        let first = tex.first().unwrap();
        assert!(first.2[0] > 0.9);
    }

    #[test]
    fn dilation_fills_everything_from_nearest() {
        let mut t = vec![None; 25];
        t[0] = Some(1);
        t[24] = Some(2);
        dilate(&mut t, 5);
        assert!(t.iter().all(|v| v.is_some()));
        assert_eq!(t[1], Some(1));
        assert_eq!(t[23], Some(2));
    }
}
