//! Dense multi-resolution trilinear grids over the `[-1,1]^3` cube.
//!
//! A grid is a stack of levels; each level stores `channels` values per
//! vertex on a regular lattice of `res^3` vertices. A query returns the sum
//! over levels of `level_weight * trilerp(level, x)`. All levels live in a
//! single flat buffer so optimizer state and gradients can mirror it.

use std::io::{Read, Write};
use std::path::Path;

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::math::DVec3;

const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct GridLevel {
    pub res: usize,
    pub weight: f64,
    /// Offset of this level's first vertex in the flat vertex numbering.
    vertex_offset: usize,
}

impl GridLevel {
    pub fn spacing(&self) -> f64 {
        2.0 / (self.res - 1) as f64
    }

    pub fn vertex_count(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn vertex_offset(&self) -> usize {
        self.vertex_offset
    }

    /// World position of lattice vertex `(i, j, k)`.
    pub fn vertex_position(&self, i: usize, j: usize, k: usize) -> DVec3 {
        let h = self.spacing();
        DVec3::new(
            -1.0 + i as f64 * h,
            -1.0 + j as f64 * h,
            -1.0 + k as f64 * h,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    channels: usize,
    levels: Vec<GridLevel>,
    values: Vec<f64>,
}

/// One trilinear corner contribution: flat vertex index, interpolation
/// weight (already scaled by the level weight) and its spatial gradient.
#[derive(Clone, Copy, Debug)]
pub struct Corner {
    pub vertex: usize,
    pub weight: f64,
    pub d_weight: DVec3,
}

impl DenseGrid {
    pub fn new(resolutions: &[usize], weights: &[f64], channels: usize) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(Error::Config("grid needs at least one level".into()));
        }
        if resolutions.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} grid resolutions but {} level weights",
                resolutions.len(),
                weights.len()
            )));
        }
        if channels == 0 {
            return Err(Error::Config("grid needs at least one channel".into()));
        }
        let mut levels = Vec::with_capacity(resolutions.len());
        let mut offset = 0;
        for (&res, &weight) in resolutions.iter().zip(weights) {
            if res < 2 {
                return Err(Error::Config(format!("grid resolution {res} < 2")));
            }
            if !weight.is_finite() {
                return Err(Error::Config("non-finite level weight".into()));
            }
            levels.push(GridLevel {
                res,
                weight,
                vertex_offset: offset,
            });
            offset += res * res * res;
        }
        Ok(Self {
            channels,
            levels,
            values: vec![0.0; offset * channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn vertex_count(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.res).collect()
    }

    /// Voxel edge length of the coarsest / finest level.
    pub fn coarsest_spacing(&self) -> f64 {
        self.levels
            .iter()
            .map(GridLevel::spacing)
            .fold(0.0, f64::max)
    }

    pub fn finest_spacing(&self) -> f64 {
        self.levels
            .iter()
            .map(GridLevel::spacing)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn same_layout(&self, other: &DenseGrid) -> bool {
        self.levels == other.levels
    }

    /// Calls `f` for every trilinear corner touched by a query at `x`,
    /// across all levels. Points outside the cube are clamped onto it; the
    /// gradient along a clamped axis is zero.
    #[inline]
    pub fn visit_corners(&self, x: DVec3, mut f: impl FnMut(Corner)) {
        let clamped = x.clamp(DVec3::splat(-1.0), DVec3::splat(1.0));
        let outside = clamped != x;
        if outside {
            diagnostics::out_of_bounds();
        }
        for level in &self.levels {
            let h = level.spacing();
            let max_cell = level.res - 2;
            let mut cell = [0usize; 3];
            let mut frac = [0.0f64; 3];
            let mut active = [1.0f64; 3];
            for a in 0..3 {
                let u = (clamped[a] + 1.0) / h;
                let i = (u.floor().max(0.0) as usize).min(max_cell);
                cell[a] = i;
                frac[a] = (u - i as f64).clamp(0.0, 1.0);
                if outside && clamped[a] != x[a] {
                    active[a] = 0.0;
                }
            }
            let res = level.res;
            let inv_h = 1.0 / h;
            for c in 0..8usize {
                let bit = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
                let mut w = [0.0f64; 3];
                let mut dw = [0.0f64; 3];
                for a in 0..3 {
                    if bit[a] == 1 {
                        w[a] = frac[a];
                        dw[a] = inv_h;
                    } else {
                        w[a] = 1.0 - frac[a];
                        dw[a] = -inv_h;
                    }
                }
                let weight = w[0] * w[1] * w[2];
                let d_weight = DVec3::new(
                    dw[0] * w[1] * w[2] * active[0],
                    w[0] * dw[1] * w[2] * active[1],
                    w[0] * w[1] * dw[2] * active[2],
                );
                let vertex = level.vertex_offset
                    + (cell[0] + bit[0])
                    + res * ((cell[1] + bit[1]) + res * (cell[2] + bit[2]));
                f(Corner {
                    vertex,
                    weight: weight * level.weight,
                    d_weight: d_weight * level.weight,
                });
            }
        }
    }

    /// Value of one channel at `x`.
    pub fn query(&self, x: DVec3, channel: usize) -> f64 {
        let mut acc = 0.0;
        let ch = self.channels;
        self.visit_corners(x, |c| acc += c.weight * self.values[c.vertex * ch + channel]);
        acc
    }

    /// Value and spatial gradient of one channel at `x`.
    pub fn query_grad(&self, x: DVec3, channel: usize) -> (f64, DVec3) {
        let mut value = 0.0;
        let mut grad = DVec3::ZERO;
        let ch = self.channels;
        self.visit_corners(x, |c| {
            let v = self.values[c.vertex * ch + channel];
            value += c.weight * v;
            grad += c.d_weight * v;
        });
        (value, grad)
    }

    /// All channels at `x` written into `out` (length = channels).
    pub fn query_all(&self, x: DVec3, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let ch = self.channels;
        self.visit_corners(x, |c| {
            let base = c.vertex * ch;
            for (o, v) in out.iter_mut().zip(&self.values[base..base + ch]) {
                *o += c.weight * v;
            }
        });
    }

    /// Writes the container: magic, version, level count, channel count,
    /// per-level `(res, res, res, weight)`, then every value as
    /// little-endian f32, vertex-major in x-fastest order with channels
    /// interleaved.
    pub fn write_to(&self, magic: &[u8; 4], mut w: impl Write) -> std::io::Result<()> {
        w.write_all(magic)?;
        w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
        w.write_all(&(self.levels.len() as u32).to_le_bytes())?;
        w.write_all(&(self.channels as u32).to_le_bytes())?;
        for level in &self.levels {
            for _ in 0..3 {
                w.write_all(&(level.res as u32).to_le_bytes())?;
            }
            w.write_all(&(level.weight as f32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(magic: &[u8; 4], path: &Path, mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let mut head = [0u8; 4];
        r.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
        if &head != magic {
            return Err(bad(&format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&head)
            )));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != CONTAINER_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let level_count = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        if level_count == 0 || level_count > 16 || channels == 0 || channels > 64 {
            return Err(bad("implausible level or channel count"));
        }
        let mut resolutions = Vec::with_capacity(level_count);
        let mut weights = Vec::with_capacity(level_count);
        for _ in 0..level_count {
            let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
            if dims[0] != dims[1] || dims[1] != dims[2] || dims[0] > 1024 {
                return Err(bad("only cubic levels up to 1024^3 are supported"));
            }
            resolutions.push(dims[0] as usize);
            weights.push(f32::from_bits(read_u32(&mut r)?) as f64);
        }
        let mut grid = DenseGrid::new(&resolutions, &weights, channels)?;
        let mut bytes = vec![0u8; grid.values.len() * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| bad("truncated value payload"))?;
        for (v, chunk) in grid.values.iter_mut().zip(bytes.chunks_exact(4)) {
            let f = f32::from_le_bytes(chunk.try_into().unwrap());
            if !f.is_finite() {
                return Err(bad("non-finite grid value"));
            }
            *v = f as f64;
        }
        Ok(grid)
    }
}
