//! On-disk layout:
//!
//! ```text
//! cameras.json        shared intrinsics, eyeballs, metadata, per-frame poses
//! frames/NNNN.raw     linear RGB (HIRF float dump) or frames/NNNN.png (gamma 2.2)
//! masks/NNNN.png      palette-indexed labels
//! spec/NNNN.raw       pseudo specular albedo (or linear 16-bit spec/NNNN.png)
//! ```
//!
//! `cameras.json` looks like
//!
//! ```json
//! {
//!   "intrinsics": {"width": 64, "height": 64, "fx": 93.0, "fy": 93.0, "cx": 32.0, "cy": 32.0},
//!   "eyes": {"left": [-0.17, 0.05, 0.45], "right": [0.17, 0.05, 0.45], "radius": 0.12},
//!   "metadata": {"iso": "300"},
//!   "frames": [{"id": "0000", "world_from_camera": [[1,0,0,0],[0,-1,0,0],[0,0,-1,3]], "format": "raw"}]
//! }
//! ```
//!
//! Poses are row-major 3x4 `[R | t]` in the OpenCV convention.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaptureDataset, Frame};
use crate::camera::{Camera, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::SphereEyeballs;
use crate::image::{ImageBuf, LabelImage};

/// Mask colors by label index.
pub const MASK_PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [230, 180, 150], [90, 60, 30], [40, 120, 255]];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Raw,
    Png,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    intrinsics: Intrinsics,
    eyes: SphereEyeballs,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    frames: Vec<FrameEntry>,
}

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    id: String,
    world_from_camera: [[f64; 4]; 3],
    #[serde(default)]
    format: FrameFormat,
}

fn paths(dir: &Path, id: &str, format: FrameFormat) -> (PathBuf, PathBuf, PathBuf) {
    let ext = match format {
        FrameFormat::Raw => "raw",
        FrameFormat::Png => "png",
    };
    (
        dir.join("frames").join(format!("{id}.{ext}")),
        dir.join("masks").join(format!("{id}.png")),
        dir.join("spec").join(format!("{id}.{ext}")),
    )
}

pub fn save_dataset(ds: &CaptureDataset, dir: &Path, format: FrameFormat) -> Result<()> {
    ds.validate()?;
    for sub in ["frames", "masks", "spec"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let file = CamerasFile {
        intrinsics: ds.intrinsics,
        eyes: ds.eyes,
        metadata: ds.metadata.clone(),
        frames: ds
            .frames
            .iter()
            .map(|f| FrameEntry {
                id: f.id.clone(),
                world_from_camera: f.camera.world_from_camera,
                format,
            })
            .collect(),
    };
    let path = dir.join("cameras.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for f in &ds.frames {
        let (img, mask, spec) = paths(dir, &f.id, format);
        match format {
            FrameFormat::Raw => {
                f.image.write_raw(&img)?;
                f.pseudo_spec.write_raw(&spec)?;
            }
            FrameFormat::Png => {
                f.image.write_png16(&img, true)?;
                f.pseudo_spec.write_png16(&spec, false)?;
            }
        }
        f.mask.write_png(&mask, &MASK_PALETTE)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<CaptureDataset> {
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: CamerasFile = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    file.intrinsics.validate()?;
    let frame_err = |id: &str, e: Error| match e {
        Error::Frame { .. } => e,
        other => Error::frame(id, other.to_string()),
    };
    let frames = file
        .frames
        .iter()
        .map(|entry| {
            let id = entry.id.as_str();
            let camera = Camera::new(file.intrinsics, entry.world_from_camera).map_err(|e| frame_err(id, e))?;
            let (img, mask, spec) = paths(dir, id, entry.format);
            let (image, pseudo_spec) = match entry.format {
                FrameFormat::Raw => (ImageBuf::read_raw(&img), ImageBuf::read_raw(&spec)),
                FrameFormat::Png => (ImageBuf::read_png_linear(&img), ImageBuf::read_png(&spec)),
            };
            Ok(Frame {
                id: entry.id.clone(),
                camera,
                image: image.map_err(|e| frame_err(id, e))?,
                mask: LabelImage::read_png(&mask).map_err(|e| frame_err(id, e))?,
                pseudo_spec: pseudo_spec.map_err(|e| frame_err(id, e))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = CaptureDataset {
        intrinsics: file.intrinsics,
        frames,
        eyes: file.eyes,
        metadata: file.metadata,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic::{generate_synthetic, SynthOptions, SyntheticScene};

    fn small() -> CaptureDataset {
        let opts = SynthOptions {
            views: 4,
            width: 16,
            height: 12,
            ..SynthOptions::default()
        };
        generate_synthetic(&SyntheticScene::head(), &opts).unwrap()
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), FrameFormat::Raw).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn png_round_trip_is_close() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), FrameFormat::Png).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.mask, b.mask);
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x.clamp(0.0, 1.0) - y).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn bad_pose_names_frame() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), FrameFormat::Raw).unwrap();
        let path = dir.path().join("cameras.json");
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["frames"][2]["world_from_camera"][0][0] = serde_json::json!(5.0);
        fs::write(&path, v.to_string()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0002"), "{err}");
    }

    #[test]
    fn missing_mask_names_frame() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), FrameFormat::Raw).unwrap();
        fs::remove_file(dir.path().join("masks/0001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("0001"), "{err}");
    }

    #[test]
    fn png_value_128_linearizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = ImageBuf::from_fn(1, 1, 3, |_, _, px| px.fill(128.0 / 255.0));
        img.write_png8(&p, false).unwrap();
        let back = ImageBuf::read_png_linear(&p).unwrap();
        let want = (128.0f64 / 255.0).powf(2.2);
        assert!((back.data[0] as f64 - want).abs() < 1e-6);
    }
}
