//! Training ray batches drawn uniformly over every frame's foreground box.

use rand::Rng;

use super::{CaptureDataset, Label};
use crate::math::stream_rng;
use crate::objective::TrainRay;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PixelRef {
    frame: u32,
    x: u32,
    y: u32,
}

#[derive(Clone, Debug)]
pub struct RayPool {
    pixels: Vec<PixelRef>,
}

impl RayPool {
    /// Pixels inside each frame's foreground bounding box grown by `margin`.
    pub fn new(ds: &CaptureDataset, margin: u32) -> Self {
        let mut pixels = Vec::new();
        for (fi, f) in ds.frames.iter().enumerate() {
            let Some((x0, y0, x1, y1)) = f.foreground_bbox() else {
                continue;
            };
            let (w, h) = (f.mask.width, f.mask.height);
            for y in y0.saturating_sub(margin)..=(y1 + margin).min(h - 1) {
                for x in x0.saturating_sub(margin)..=(x1 + margin).min(w - 1) {
                    pixels.push(PixelRef { frame: fi as u32, x, y });
                }
            }
        }
        Self { pixels }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn ray(&self, ds: &CaptureDataset, i: usize, key: u64) -> TrainRay {
        let p = self.pixels[i];
        let f = &ds.frames[p.frame as usize];
        TrainRay {
            ray: f.camera.pixel_ray(p.x, p.y),
            view: p.frame as usize,
            target: f.image.rgb(p.x, p.y),
            label: f.label(p.x, p.y),
            pseudo_spec: f.pseudo_spec.pixel(p.x, p.y)[0] as f64,
            key,
        }
    }

    /// Pool indices of one batch, with replacement.
    pub fn batch_indices(&self, seed: u64, step: u64, n: usize) -> Vec<usize> {
        let mut rng = stream_rng(seed, &[0xba7c, step]);
        (0..n).map(|_| rng.gen_range(0..self.pixels.len())).collect()
    }

    pub fn batch(&self, ds: &CaptureDataset, seed: u64, step: u64, n: usize) -> Vec<TrainRay> {
        self.batch_indices(seed, step, n)
            .into_iter()
            .enumerate()
            .map(|(k, i)| self.ray(ds, i, k as u64))
            .collect()
    }

    pub fn label_counts(&self, ds: &CaptureDataset) -> [usize; 4] {
        let mut c = [0; 4];
        for p in &self.pixels {
            c[ds.frames[p.frame as usize].label(p.x, p.y) as usize] += 1;
        }
        c
    }
}

impl Label {
    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Skin => "skin",
            Label::Hair => "hair",
            Label::Eye => "eye",
        }
    }
}
