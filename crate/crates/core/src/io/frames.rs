//! Frame images (PNG or binary PPM), quantised to 8 bits per channel on disk.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, VosError};
use crate::frame::Frame;

const FRAME_EXTENSIONS: &[&str] = &["png", "ppm", "pnm"];

pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => VosError::io(path, io),
            other => VosError::Format(format!("{}: {other}", path.display())),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Frame::new(w as usize, h as usize, data)
}

/// Writes an RGB PNG (or PPM when the extension says so).
pub fn write_frame(path: &Path, frame: &Frame) -> Result<()> {
    let raw: Vec<u8> = frame.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = image::RgbImage::from_raw(frame.width() as u32, frame.height() as u32, raw)
        .ok_or_else(|| VosError::shape("frame buffer does not match its size"))?;
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => VosError::io(path, io),
        other => VosError::Format(format!("{}: {other}", path.display())),
    })
}

/// Image files in `dir`, sorted by file name.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| VosError::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(VosError::Input(format!("no frame images in {}", dir.display())));
    }
    files.iter().map(|p| read_frame(p)).collect()
}
