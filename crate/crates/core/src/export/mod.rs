//! Mesh and texture assets from a fitted scene: iso-surface extraction,
//! visibility culling, largest component, per-triangle atlas and baking,
//! and OBJ/MTL/PNG output.

mod atlas;
mod mesh;
mod tables;

pub use atlas::{bake, Atlas, BakeSample, Chart, Maps, GUTTER};
pub use mesh::{components, cull_unseen, largest_component, marching_cubes, marching_cubes_fn, sees, Mesh, DEFAULT_ISO};

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::math::{srgb_encode, DVec3};
use crate::scene::ShadingScene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    /// Lattice samples per axis.
    pub resolution: usize,
    pub iso: f64,
    pub texture_size: usize,
    /// Visibility slack in lattice voxels.
    pub cull_tolerance_voxels: f64,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            iso: DEFAULT_ISO,
            texture_size: 2048,
            cull_tolerance_voxels: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportedAssets {
    pub mesh: Mesh,
    pub atlas: Atlas,
    pub maps: Maps,
}

impl ExportedAssets {
    /// UVs per triangle corner.
    pub fn uvs(&self) -> Vec<[f64; 2]> {
        (0..self.mesh.triangles.len())
            .flat_map(|t| (0..3).map(move |c| (t, c)))
            .map(|(t, c)| self.atlas.uv(t, c))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ExportStats {
    pub extracted_triangles: usize,
    pub visible_triangles: usize,
    pub final_triangles: usize,
    pub final_vertices: usize,
}

/// Extract, cull, keep the largest component, atlas, bake.
pub fn export_scene<S: ShadingScene + ?Sized>(
    scene: &S,
    cameras: &[Camera],
    cfg: &ExportConfig,
) -> Result<(ExportedAssets, ExportStats)> {
    let raw = marching_cubes(scene, cfg.resolution, cfg.iso)?;
    let voxel = 2.0 / (cfg.resolution - 1) as f64;
    let visible = cull_unseen(&raw, cameras, scene, cfg.cull_tolerance_voxels * voxel);
    if visible.triangles.is_empty() {
        return Err(Error::NoSurface(cfg.iso));
    }
    let mesh = largest_component(&visible);
    let atlas = Atlas::new(mesh.triangles.len(), cfg.texture_size)?;
    let maps = bake(&mesh, &atlas, scene);
    let stats = ExportStats {
        extracted_triangles: raw.triangles.len(),
        visible_triangles: visible.triangles.len(),
        final_triangles: mesh.triangles.len(),
        final_vertices: mesh.vertices.len(),
    };
    Ok((ExportedAssets { mesh, atlas, maps }, stats))
}

pub const OBJ_NAME: &str = "mesh.obj";
pub const MTL_NAME: &str = "mesh.mtl";
pub const MAP_NAMES: [&str; 4] = ["normal.png", "diffuse.png", "specular.png", "roughness.png"];

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct MapEntry {
    pub role: String,
    pub file: String,
    pub color_space: String,
    pub encoding: String,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct Manifest {
    pub mesh: String,
    pub material: String,
    pub normal_space: String,
    pub texture_size: usize,
    pub maps: Vec<MapEntry>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `mesh.obj`, `mesh.mtl`, the four maps and `manifest.json`.
pub fn write_assets(assets: &ExportedAssets, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut obj = String::new();
    let _ = writeln!(obj, "mtllib {MTL_NAME}");
    let _ = writeln!(obj, "o head");
    for v in &assets.mesh.vertices {
        let _ = writeln!(obj, "v {} {} {}", v.x, v.y, v.z);
    }
    for [u, v] in assets.uvs() {
        let _ = writeln!(obj, "vt {u} {v}");
    }
    let _ = writeln!(obj, "usemtl head");
    for (t, tri) in assets.mesh.triangles.iter().enumerate() {
        let _ = write!(obj, "f");
        for (c, &v) in tri.iter().enumerate() {
            let _ = write!(obj, " {}/{}", v + 1, 3 * t + c + 1);
        }
        obj.push('\n');
    }
    write_text(&dir.join(OBJ_NAME), &obj)?;

    let [normal, diffuse, specular, roughness] = MAP_NAMES;
    let mtl = format!(
        "# Normal map is object space: rgb = (n + 1) / 2.\n\
         # Diffuse is sRGB encoded; specular and roughness are linear.\n\
         newmtl head\n\
         Kd 1 1 1\n\
         Ks 1 1 1\n\
         map_Kd {diffuse}\n\
         map_Ks {specular}\n\
         map_Pr {roughness}\n\
         norm {normal}\n"
    );
    write_text(&dir.join(MTL_NAME), &mtl)?;

    let m = &assets.maps;
    m.normal.map(|v| 0.5 * (v + 1.0)).write_png8(&dir.join(normal), false)?;
    m.diffuse.map(|v| srgb_encode(v as f64) as f32).write_png8(&dir.join(diffuse), false)?;
    m.specular.write_png8(&dir.join(specular), false)?;
    m.roughness.write_png8(&dir.join(roughness), false)?;

    let entry = |role: &str, file: &str, cs: &str, enc: &str| MapEntry {
        role: role.into(),
        file: file.into(),
        color_space: cs.into(),
        encoding: enc.into(),
    };
    let manifest = Manifest {
        mesh: OBJ_NAME.into(),
        material: MTL_NAME.into(),
        normal_space: "object".into(),
        texture_size: assets.atlas.size,
        maps: vec![
            entry("normal", normal, "linear", "(n+1)/2"),
            entry("diffuse", diffuse, "srgb", "albedo"),
            entry("specular", specular, "linear", "specular albedo"),
            entry("roughness", roughness, "linear", "roughness"),
        ],
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    write_text(&path, &text)
}

/// Vertices, per-corner UVs and faces of an OBJ written by [`write_assets`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjData {
    pub vertices: Vec<DVec3>,
    pub uvs: Vec<[f64; 2]>,
    /// Zero-based `(vertex, uv)` per corner.
    pub faces: Vec<[(u32, u32); 3]>,
    pub mtllib: Option<String>,
}

impl ObjData {
    pub fn triangles(&self) -> Vec<[u32; 3]> {
        self.faces.iter().map(|f| f.map(|(v, _)| v)).collect()
    }
}

/// Reads the `v`/`vt`/`f` subset of Wavefront OBJ used here (triangles
/// with `v/vt` or bare `v` corners).
pub fn parse_obj(path: &Path) -> Result<ObjData> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut d = ObjData::default();
    let bad = |line: usize, msg: &str| Error::format(path, format!("line {}: {msg}", line + 1));
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let nums = |it: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            it.map(|s| s.parse::<f64>().map_err(|_| bad(ln, "bad number"))).collect()
        };
        match it.next() {
            Some("v") => {
                let p = nums(it)?;
                if p.len() < 3 {
                    return Err(bad(ln, "vertex needs three coordinates"));
                }
                d.vertices.push(DVec3::new(p[0], p[1], p[2]));
            }
            Some("vt") => {
                let p = nums(it)?;
                if p.len() < 2 {
                    return Err(bad(ln, "uv needs two coordinates"));
                }
                d.uvs.push([p[0], p[1]]);
            }
            Some("f") => {
                let corners: Vec<(u32, u32)> = it
                    .map(|c| {
                        let mut parts = c.split('/');
                        let v: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad(ln, "bad face index"))?;
                        let t: u32 = parts.next().and_then(|s| s.parse().ok()).unwrap_or(0);
                        if v == 0 {
                            return Err(bad(ln, "face indices are 1-based"));
                        }
                        Ok((v - 1, t.saturating_sub(1)))
                    })
                    .collect::<Result<_>>()?;
                if corners.len() != 3 {
                    return Err(bad(ln, "only triangles are supported"));
                }
                if corners.iter().any(|&(v, _)| v as usize >= d.vertices.len()) {
                    return Err(bad(ln, "face references a missing vertex"));
                }
                d.faces.push([corners[0], corners[1], corners[2]]);
            }
            Some("mtllib") => d.mtllib = it.next().map(str::to_string),
            _ => {}
        }
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{orbit, Intrinsics};
    use crate::dataset::synthetic::SyntheticScene;
    use crate::geometry::Region;
    use crate::image::{quantize8, ImageBuf};
    use crate::math::{srgb_decode, srgb_encode};

    fn small_export() -> (SyntheticScene, ExportedAssets, ExportStats) {
        let head = SyntheticScene::head();
        let intr = Intrinsics::from_fov(64, 64, 38.0);
        let mut cams = orbit(intr, 8, 3.0, 10.0, 360.0, 0.0).unwrap();
        cams.extend(orbit(intr, 4, 3.0, 60.0, 360.0, 0.0).unwrap());
        let cfg = ExportConfig {
            resolution: 48,
            texture_size: 1024,
            ..ExportConfig::default()
        };
        let (a, s) = export_scene(&head, &cams, &cfg).unwrap();
        (head, a, s)
    }

    #[test]
    fn pipeline_yields_one_component_and_baked_maps_match_the_field() {
        let (head, assets, stats) = small_export();
        assert!(stats.final_triangles > 100 && stats.final_triangles <= stats.visible_triangles);
        assert_eq!(components(&assets.mesh).iter().max(), Some(&0));
        let maps = &assets.maps;
        let q = |img: &ImageBuf, c: usize, x: usize, y: usize| img.pixel(x as u32, y as u32)[c] as f64;
        let mut eye_texels = 0;
        for s in &maps.samples {
            let p = head.sample(s.point, 0.0);
            let m = head.material(s.point, p.region);
            assert!((q(&maps.diffuse, 0, s.x, s.y) - m.diffuse.x).abs() < 1e-6);
            if p.region == Region::Eye {
                eye_texels += 1;
                assert!((q(&maps.specular, 0, s.x, s.y) - head.eye_prior.specular).abs() < 1e-6);
                assert!((q(&maps.roughness, 0, s.x, s.y) - head.eye_prior.roughness).abs() < 1e-6);
            }
        }
        assert!(eye_texels > 0);
    }

    #[test]
    fn written_assets_round_trip() {
        let (_, assets, _) = small_export();
        let dir = tempfile::tempdir().unwrap();
        write_assets(&assets, dir.path()).unwrap();
        let obj = parse_obj(&dir.path().join(OBJ_NAME)).unwrap();
        assert_eq!(obj.vertices.len(), assets.mesh.vertices.len());
        assert_eq!(obj.triangles(), assets.mesh.triangles);
        assert_eq!(obj.uvs.len(), 3 * assets.mesh.triangles.len());
        assert_eq!(obj.mtllib.as_deref(), Some(MTL_NAME));
        let mtl = fs::read_to_string(dir.path().join(MTL_NAME)).unwrap();
        for m in MAP_NAMES {
            assert!(mtl.contains(m), "{m} missing from the material");
            assert!(dir.path().join(m).exists());
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest.maps.len(), 4);

        // 8-bit maps decode to the baked values within quantization.
        let normal = ImageBuf::read_png(&dir.path().join("normal.png")).unwrap();
        let diffuse = ImageBuf::read_png(&dir.path().join("diffuse.png")).unwrap();
        for s in assets.maps.samples.iter().step_by(37) {
            let n = assets.maps.normal.pixel(s.x as u32, s.y as u32);
            let e = normal.pixel(s.x as u32, s.y as u32);
            for a in 0..3 {
                let dec = 2.0 * e[a] as f64 - 1.0;
                assert!((dec - n[a] as f64).abs() < 1.0 / 127.0);
            }
            let d = assets.maps.diffuse.pixel(s.x as u32, s.y as u32)[1] as f64;
            let stored = (diffuse.pixel(s.x as u32, s.y as u32)[1] * 255.0).round() as u8;
            assert_eq!(stored, quantize8(srgb_encode(d)));
            assert!((srgb_decode(stored as f64 / 255.0) - d).abs() < 0.01);
        }
    }

    #[test]
    fn decoded_normal_map_matches_field_normals() {
        let (head, assets, _) = small_export();
        let dir = tempfile::tempdir().unwrap();
        write_assets(&assets, dir.path()).unwrap();
        let normal = ImageBuf::read_png(&dir.path().join("normal.png")).unwrap();
        let mut worst: f64 = 0.0;
        for s in &assets.maps.samples {
            let e = normal.pixel(s.x as u32, s.y as u32);
            let dec = DVec3::new(e[0] as f64, e[1] as f64, e[2] as f64) * 2.0 - DVec3::ONE;
            let n = head.sample(s.point, 0.0).normal;
            worst = worst.max(dec.normalize().dot(n).clamp(-1.0, 1.0).acos().to_degrees());
        }
        assert!(worst < 2.0, "{worst}");
    }
}
