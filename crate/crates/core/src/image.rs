//! Float image buffers and their on-disk forms: HIRF raw float dumps,
//! 8/16-bit PNG and palette-indexed label PNG.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{gamma_encode, linearize, DVec3};

pub const RAW_MAGIC: &[u8; 4] = b"HIRF";
/// Same header as [`RAW_MAGIC`] but channel-planar payload.
pub const PLANAR_MAGIC: &[u8; 4] = b"HIRP";

/// Row-major, channel-interleaved f32 image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: u32, height: u32, channels: u32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; (width * height * channels) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, channels: u32, mut f: impl FnMut(u32, u32, &mut [f32])) -> Self {
        let mut img = Self::new(width, height, channels);
        let c = channels as usize;
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) as usize * c;
                f(x, y, &mut img.data[i..i + c]);
            }
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let i = (y * self.width + x) as usize * c;
        &self.data[i..i + c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: u32, y: u32) -> &mut [f32] {
        let c = self.channels as usize;
        let i = (y * self.width + x) as usize * c;
        &mut self.data[i..i + c]
    }

    /// First three channels as a vector (grayscale images are broadcast).
    #[inline]
    pub fn rgb(&self, x: u32, y: u32) -> DVec3 {
        let p = self.pixel(x, y);
        if p.len() >= 3 {
            DVec3::new(p[0] as f64, p[1] as f64, p[2] as f64)
        } else {
            DVec3::splat(p[0] as f64)
        }
    }

    pub fn set_rgb(&mut self, x: u32, y: u32, v: DVec3) {
        let p = self.pixel_mut(x, y);
        p[0] = v.x as f32;
        p[1] = v.y as f32;
        p[2] = v.z as f32;
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuf {
        ImageBuf {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn write_raw(&self, path: &Path) -> Result<()> {
        self.write_container(path, RAW_MAGIC, false)
    }

    /// Channel-planar dump (all of channel 0, then channel 1, ...).
    pub fn write_planar(&self, path: &Path) -> Result<()> {
        self.write_container(path, PLANAR_MAGIC, true)
    }

    fn write_container(&self, path: &Path, magic: &[u8; 4], planar: bool) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut bytes = Vec::with_capacity(16 + self.data.len() * 4);
        bytes.extend_from_slice(magic);
        for v in [self.width, self.height, self.channels] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        if planar {
            let c = self.channels as usize;
            for ch in 0..c {
                for v in self.data.iter().skip(ch).step_by(c) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
        } else {
            for v in &self.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    /// Reads either raw layout; planar payloads are converted to interleaved.
    pub fn read_raw(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 {
            return Err(Error::format(path, "truncated header"));
        }
        let planar = match &bytes[0..4] {
            m if m == RAW_MAGIC => false,
            m if m == PLANAR_MAGIC => true,
            m => return Err(Error::format(path, format!("bad magic {:?}", String::from_utf8_lossy(m)))),
        };
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (width, height, channels) = (u(4), u(8), u(12));
        let n = width as usize * height as usize * channels as usize;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::format(
                path,
                format!("{width}x{height}x{channels} needs {} payload bytes, found {}", 4 * n, bytes.len() - 16),
            ));
        }
        let vals: Vec<f32> = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let data = if planar {
            let c = channels as usize;
            let px = n / c.max(1);
            let mut out = vec![0.0; n];
            for ch in 0..c {
                for p in 0..px {
                    out[p * c + ch] = vals[ch * px + p];
                }
            }
            out
        } else {
            vals
        };
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// 16-bit PNG; linear values are gamma-encoded first when `encode` is set.
    pub fn write_png16(&self, path: &Path, encode: bool) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.data.len() * 2);
        for &v in &self.data {
            let v = if encode { gamma_encode(v as f64) } else { v as f64 };
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        write_png(path, self.width, self.height, self.color_type()?, png::BitDepth::Sixteen, &bytes, None)
    }

    pub fn write_png8(&self, path: &Path, encode: bool) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| {
                let v = if encode { gamma_encode(v as f64) } else { v as f64 };
                quantize8(v)
            })
            .collect();
        write_png(path, self.width, self.height, self.color_type()?, png::BitDepth::Eight, &bytes, None)
    }

    fn color_type(&self) -> Result<png::ColorType> {
        match self.channels {
            1 => Ok(png::ColorType::Grayscale),
            3 => Ok(png::ColorType::Rgb),
            4 => Ok(png::ColorType::Rgba),
            c => Err(Error::InvalidArgument(format!("cannot write {c}-channel PNG"))),
        }
    }

    /// PNG as normalized values in `[0,1]`; palette images are expanded.
    pub fn read_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png_bytes(path, png::Transformations::EXPAND)?;
        let channels = match info.color_type {
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Indexed => return Err(Error::format(path, "unexpanded palette image")),
        };
        let n = (info.width * info.height * channels) as usize;
        let data: Vec<f32> = match info.bit_depth {
            png::BitDepth::Sixteen => buf
                .chunks_exact(2)
                .take(n)
                .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
                .collect(),
            png::BitDepth::Eight => buf.iter().take(n).map(|&b| b as f32 / 255.0).collect(),
            d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
        };
        Ok(Self {
            width: info.width,
            height: info.height,
            channels,
            data,
        })
    }

    /// [`read_png`](Self::read_png) followed by gamma-2.2 linearization of
    /// color channels (alpha is left alone).
    pub fn read_png_linear(path: &Path) -> Result<Self> {
        let mut img = Self::read_png(path)?;
        let c = img.channels as usize;
        let color = if c == 2 || c == 4 { c - 1 } else { c };
        for (i, v) in img.data.iter_mut().enumerate() {
            if i % c < color {
                *v = linearize(*v as f64) as f32;
            }
        }
        Ok(img)
    }
}

#[inline]
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Label image stored as a palette PNG whose indices are the labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

impl LabelImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            labels: vec![0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.labels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: u8) {
        self.labels[(y * self.width + x) as usize] = v;
    }

    /// `palette` holds one RGB triple per label value.
    pub fn write_png(&self, path: &Path, palette: &[[u8; 3]]) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= palette.len()) {
            return Err(Error::InvalidArgument(format!("label {bad} has no palette entry")));
        }
        let flat: Vec<u8> = palette.iter().flatten().copied().collect();
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Indexed,
            png::BitDepth::Eight,
            &self.labels,
            Some(&flat),
        )
    }

    /// Accepts palette PNGs (indices) or 8-bit grayscale (values).
    pub fn read_png(path: &Path) -> Result<Self> {
        let (info, buf) = read_png_bytes(path, png::Transformations::IDENTITY)?;
        match (info.color_type, info.bit_depth) {
            (png::ColorType::Indexed, png::BitDepth::Eight) | (png::ColorType::Grayscale, png::BitDepth::Eight) => {}
            (c, d) => return Err(Error::format(path, format!("label PNG must be 8-bit indexed, found {c:?} {d:?}"))),
        }
        let n = (info.width * info.height) as usize;
        Ok(Self {
            width: info.width,
            height: info.height,
            labels: buf[..n].to_vec(),
        })
    }
}

fn write_png(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
    palette: Option<&[u8]>,
) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), width, height);
    enc.set_color(color);
    enc.set_depth(depth);
    if let Some(p) = palette {
        enc.set_palette(p.to_vec());
    }
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut w = enc.write_header().map_err(fail)?;
    w.write_image_data(data).map_err(fail)?;
    w.finish().map_err(fail)
}

fn read_png_bytes(path: &Path, transform: png::Transformations) -> Result<(png::OutputInfo, Vec<u8>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(f));
    dec.set_transformations(transform);
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = dec.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}
