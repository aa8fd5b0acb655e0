//! Dataset directories, depth I/O, point-cloud initialization and the
//! synthetic scene generator.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! config.txt            key=value camera and depth settings
//! images/%06d.png       8-bit RGB
//! depth/%06d.pfm        or .png (16-bit) when depth_format=png16
//! masks/%06d.png        8-bit gray, nonzero marks a tool pixel
//! gt/trajectories.txt   synthetic scenes only
//! ```

pub mod depth;
pub mod init;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use nalgebra::Matrix4;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{Camera, FrameSample};

pub use depth::write_atomic;
pub use init::{backproject_init, fused_init};
pub use synth::{synth_generate, SynthSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthFormat {
    Pfm,
    Png16,
}

impl DepthFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 => "png16",
        }
    }

    fn extension(self) -> &'static str {
        match self {
            DepthFormat::Pfm => "pfm",
            DepthFormat::Png16 => "png",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub camera: Camera,
    /// Time-ordered; frame `i` of `T` has timestamp `i / T`.
    pub frames: Vec<FrameSample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub depth_format: DepthFormat,
    /// Raw units per world unit for 16-bit PNG depth.
    pub depth_scale: f64,
}

/// Every eighth frame (index ≡ 7 mod 8) is held out for testing.
pub fn split_indices(count: usize) -> (Vec<usize>, Vec<usize>) {
    (0..count).partition(|i| i % 8 != 7)
}

pub fn timestamp(index: usize, count: usize) -> f64 {
    index as f64 / count as f64
}

impl Dataset {
    pub fn new(camera: Camera, frames: Vec<FrameSample>, depth_format: DepthFormat, depth_scale: f64) -> Result<Self> {
        camera.validate()?;
        for (i, f) in frames.iter().enumerate() {
            f.validate()?;
            if f.width != camera.width || f.height != camera.height {
                return Err(Error::Shape(format!(
                    "frame {i} is {}x{} but the camera is {}x{}",
                    f.width, f.height, camera.width, camera.height
                )));
            }
            if i > 0 && !(f.timestamp > frames[i - 1].timestamp) {
                return Err(Error::Domain(format!("frame {i} timestamp is not increasing")));
            }
        }
        let (train, test) = split_indices(frames.len());
        Ok(Self {
            camera,
            frames,
            train,
            test,
            depth_format,
            depth_scale,
        })
    }

    pub fn train_frames(&self) -> Vec<&FrameSample> {
        self.train.iter().map(|&i| &self.frames[i]).collect()
    }

    pub fn test_frames(&self) -> Vec<&FrameSample> {
        self.test.iter().map(|&i| &self.frames[i]).collect()
    }
}

fn parse_config(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::load(path, format!("line {}: expected key=value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

fn frame_indices(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut idx = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            if stem.len() == 6 {
                if let Ok(i) = stem.parse::<usize>() {
                    idx.push(i);
                }
            }
        }
    }
    idx.sort_unstable();
    Ok(idx)
}

fn read_rgb(path: &Path, w: usize, h: usize) -> Result<Vec<[f64; 3]>> {
    let bytes = depth::read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::load(path, format!("png decode: {e}")))?
        .into_rgb8();
    check_dims(path, img.width(), img.height(), w, h)?;
    Ok(img
        .pixels()
        .map(|p| [p[0], p[1], p[2]].map(|c| f64::from(c) / 255.0))
        .collect())
}

fn read_mask(path: &Path, w: usize, h: usize) -> Result<Vec<bool>> {
    let bytes = depth::read_bytes(path)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::load(path, format!("png decode: {e}")))?
        .into_luma8();
    check_dims(path, img.width(), img.height(), w, h)?;
    Ok(img.pixels().map(|p| p[0] != 0).collect())
}

fn check_dims(path: &Path, w: u32, h: u32, ew: usize, eh: usize) -> Result<()> {
    if w as usize != ew || h as usize != eh {
        return Err(Error::load(path, format!("image is {w}x{h}, expected {ew}x{eh}")));
    }
    Ok(())
}

fn config_value<T: std::str::FromStr>(map: &BTreeMap<String, String>, path: &Path, key: &str) -> Result<T> {
    let v = map
        .get(key)
        .ok_or_else(|| Error::load(path, format!("missing key `{key}`")))?;
    v.parse()
        .map_err(|_| Error::load(path, format!("invalid value `{v}` for `{key}`")))
}

/// Reads a dataset directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let cfg_path = dir.join("config.txt");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let map = parse_config(&cfg_path, &text)?;
    let width: usize = config_value(&map, &cfg_path, "width")?;
    let height: usize = config_value(&map, &cfg_path, "height")?;
    let mut camera = Camera::new(
        width,
        height,
        config_value(&map, &cfg_path, "fx")?,
        config_value(&map, &cfg_path, "fy")?,
        config_value(&map, &cfg_path, "cx")?,
        config_value(&map, &cfg_path, "cy")?,
        config_value(&map, &cfg_path, "znear")?,
        config_value(&map, &cfg_path, "zfar")?,
    )
    .map_err(|e| Error::load(&cfg_path, e.to_string()))?;
    if let Some(pose) = map.get("pose") {
        let v: Vec<f64> = pose
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::load(&cfg_path, "pose must be 16 numbers"))?;
        if v.len() != 16 {
            return Err(Error::load(&cfg_path, "pose must be 16 numbers"));
        }
        camera.pose = Matrix4::from_row_slice(&v);
        camera.validate().map_err(|e| Error::load(&cfg_path, e.to_string()))?;
    }
    let depth_format = match map.get("depth_format").map(String::as_str) {
        Some("pfm") | None => DepthFormat::Pfm,
        Some("png16") => DepthFormat::Png16,
        Some(other) => return Err(Error::load(&cfg_path, format!("unknown depth_format `{other}`"))),
    };
    let depth_scale: f64 = match map.get("depth_scale") {
        Some(_) => config_value(&map, &cfg_path, "depth_scale")?,
        None => 1000.0,
    };
    if !(depth_scale > 0.0) {
        return Err(Error::load(&cfg_path, "depth_scale must be > 0"));
    }

    let images = dir.join("images");
    let indices = frame_indices(&images)?;
    if indices.is_empty() {
        return Err(Error::load(&images, "no frames found"));
    }
    if let Some((k, i)) = indices.iter().enumerate().find(|(k, i)| *k != **i) {
        return Err(Error::load(
            images.join(format!("{}.png", frame_name(k))),
            format!("missing frame (next present is {i})"),
        ));
    }
    let count = indices.len();
    let frames: Vec<FrameSample> = indices
        .par_iter()
        .map(|&i| -> Result<FrameSample> {
            let name = frame_name(i);
            let image = read_rgb(&images.join(format!("{name}.png")), width, height)?;
            let dpath = dir.join("depth").join(format!("{name}.{}", depth_format.extension()));
            let bytes = depth::read_bytes(&dpath)?;
            let (dw, dh, depth) = match depth_format {
                DepthFormat::Pfm => {
                    let (w, h, v) = depth::decode_pfm(&bytes, &dpath)?;
                    (w, h, v.into_iter().map(f64::from).collect::<Vec<_>>())
                }
                DepthFormat::Png16 => depth::decode_png16(&bytes, &dpath, depth_scale)?,
            };
            check_dims(&dpath, dw as u32, dh as u32, width, height)?;
            let depth: Vec<f64> = depth
                .into_iter()
                .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
                .collect();
            let mask = read_mask(&dir.join("masks").join(format!("{name}.png")), width, height)?;
            FrameSample::new(width, height, image, depth, mask, timestamp(i, count))
        })
        .collect::<Result<_>>()?;
    Dataset::new(camera, frames, depth_format, depth_scale)
}

pub fn config_text(d: &Dataset) -> String {
    let c = &d.camera;
    let mut s = String::new();
    let _ = writeln!(s, "width={}", c.width);
    let _ = writeln!(s, "height={}", c.height);
    let _ = writeln!(s, "fx={:?}", c.fx);
    let _ = writeln!(s, "fy={:?}", c.fy);
    let _ = writeln!(s, "cx={:?}", c.cx);
    let _ = writeln!(s, "cy={:?}", c.cy);
    let _ = writeln!(s, "znear={:?}", c.znear);
    let _ = writeln!(s, "zfar={:?}", c.zfar);
    let _ = writeln!(s, "depth_format={}", d.depth_format.as_str());
    let _ = writeln!(s, "depth_scale={:?}", d.depth_scale);
    if c.pose != Matrix4::identity() {
        let v: Vec<String> = (0..4)
            .flat_map(|r| (0..4).map(move |k| (r, k)))
            .map(|(r, k)| format!("{:?}", c.pose[(r, k)]))
            .collect();
        let _ = writeln!(s, "pose={}", v.join(" "));
    }
    s
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_rgb(width: usize, height: usize, pixels: &[[f64; 3]]) -> Result<Vec<u8>> {
    let raw: Vec<u8> = pixels.iter().flat_map(|p| p.map(quantize)).collect();
    let img = ImageBuffer::<Rgb<u8>, _>::from_raw(width as u32, height as u32, raw)
        .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
    depth::encode_png(&img)
}

/// Writes `d` under `dir`, replacing any previous dataset files there.
pub fn write_dataset(dir: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    let (w, h) = (d.camera.width, d.camera.height);
    for (i, f) in d.frames.iter().enumerate() {
        let name = frame_name(i);
        write_atomic(
            &dir.join("images").join(format!("{name}.png")),
            &encode_rgb(w, h, &f.image)?,
        )?;
        let dbytes = match d.depth_format {
            DepthFormat::Pfm => {
                let v: Vec<f32> = f.depth.iter().map(|&x| x as f32).collect();
                depth::encode_pfm(w, h, &v)
            }
            DepthFormat::Png16 => depth::encode_png16(w, h, &f.depth, d.depth_scale)?,
        };
        write_atomic(
            &dir.join("depth").join(format!("{name}.{}", d.depth_format.extension())),
            &dbytes,
        )?;
        let mask: Vec<u8> = f.tool_mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
        let img = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, mask)
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
        write_atomic(
            &dir.join("masks").join(format!("{name}.png")),
            &depth::encode_png(&img)?,
        )?;
    }
    remove_stale(dir, d.frames.len())?;
    write_atomic(&dir.join("config.txt"), config_text(d).as_bytes())
}

/// Deletes numbered frame files at or beyond `count` left by an earlier,
/// longer dataset in the same directory.
fn remove_stale(dir: &Path, count: usize) -> Result<()> {
    for sub in ["images", "depth", "masks"] {
        let p = dir.join(sub);
        let Ok(entries) = std::fs::read_dir(&p) else { continue };
        for e in entries.flatten() {
            let name = e.file_name();
            let name = name.to_string_lossy();
            let stem = name.split('.').next().unwrap_or("");
            if stem.len() == 6 && stem.parse::<usize>().is_ok_and(|i| i >= count) {
                let path: PathBuf = e.path();
                std::fs::remove_file(&path).map_err(|err| Error::io(&path, err))?;
            }
        }
    }
    Ok(())
}
