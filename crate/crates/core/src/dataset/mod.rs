//! Capture datasets: per-frame linear images, region labels, pseudo
//! specular maps and shared-intrinsics cameras.

use serde::{Deserialize, Serialize};

/// Per-pixel region label, stored as the palette index of the mask PNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Skin = 1,
    Hair = 2,
    Eye = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Background, Label::Skin, Label::Hair, Label::Eye];

    pub fn from_index(i: u8) -> Option<Label> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn is_foreground(self) -> bool {
        self != Label::Background
    }

    /// Labels owned by the grid SDF.
    pub fn is_surface(self) -> bool {
        matches!(self, Label::Skin | Label::Hair)
    }
}

mod io;
mod rays;
pub mod synthetic;

pub use io::{load_dataset, save_dataset, FrameFormat};
pub use rays::RayPool;

use std::collections::BTreeMap;

use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::SphereEyeballs;
use crate::image::{ImageBuf, LabelImage};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Zero-padded frame number, also the file stem.
    pub id: String,
    pub camera: Camera,
    /// Linear RGB.
    pub image: ImageBuf,
    pub mask: LabelImage,
    /// Single-channel pseudo specular albedo.
    pub pseudo_spec: ImageBuf,
}

impl Frame {
    pub fn label(&self, x: u32, y: u32) -> Label {
        Label::from_index(self.mask.get(x, y)).unwrap_or(Label::Background)
    }

    /// Foreground bounding box `(x0, y0, x1, y1)`, inclusive.
    pub fn foreground_bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut b: Option<(u32, u32, u32, u32)> = None;
        for y in 0..self.mask.height {
            for x in 0..self.mask.width {
                if self.label(x, y).is_foreground() {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptureDataset {
    /// Shared by every frame.
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
    /// Eyeball spheres placed before fitting.
    pub eyes: SphereEyeballs,
    /// Free-form capture notes (ISO, white balance and so on).
    pub metadata: BTreeMap<String, String>,
}

impl CaptureDataset {
    pub fn frame_ids(&self) -> Vec<String> {
        self.frames.iter().map(|f| f.id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::Config("dataset has no frames".into()));
        }
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        for f in &self.frames {
            if f.camera.intrinsics != self.intrinsics {
                return Err(Error::frame(&f.id, "intrinsics differ from the shared ones"));
            }
            if (f.image.width, f.image.height, f.image.channels) != (w, h, 3) {
                return Err(Error::frame(&f.id, format!("image must be {w}x{h} RGB")));
            }
            if (f.mask.width, f.mask.height) != (w, h) {
                return Err(Error::frame(&f.id, "mask size differs from image"));
            }
            if let Some(&bad) = f.mask.labels.iter().find(|&&l| Label::from_index(l).is_none()) {
                return Err(Error::frame(&f.id, format!("unknown label {bad}")));
            }
            if (f.pseudo_spec.width, f.pseudo_spec.height, f.pseudo_spec.channels) != (w, h, 1) {
                return Err(Error::frame(&f.id, "pseudo specular map must be single-channel at image size"));
            }
            if f.image.data.iter().chain(&f.pseudo_spec.data).any(|v| !v.is_finite()) {
                return Err(Error::frame(&f.id, "non-finite pixel"));
            }
        }
        Ok(())
    }
}
