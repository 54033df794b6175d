//! 8-bit palette-indexed PNG masks; palette index = object label.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::LazyLock;

use crate::error::{Result, VosError};
use crate::frame::LabelMask;

/// The customary VOS colour map: label bits spread over the high bits of R, G, B.
pub static PALETTE: LazyLock<[u8; 768]> = LazyLock::new(|| {
    let mut palette = [0u8; 768];
    for label in 0..256usize {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = label;
        for shift in (0..8).rev() {
            r |= ((c & 1) as u8) << shift;
            g |= (((c >> 1) & 1) as u8) << shift;
            b |= (((c >> 2) & 1) as u8) << shift;
            c >>= 3;
        }
        palette[label * 3..label * 3 + 3].copy_from_slice(&[r, g, b]);
    }
    palette
});

fn format_err(path: &Path, e: impl std::fmt::Display) -> VosError {
    VosError::Format(format!("{}: {e}", path.display()))
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let file = File::create(path).map_err(|e| VosError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(PALETTE.as_slice());
    let mut writer = encoder.write_header().map_err(|e| format_err(path, e))?;
    writer.write_image_data(mask.labels()).map_err(|e| format_err(path, e))?;
    writer.finish().map_err(|e| format_err(path, e))
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let file = File::open(path).map_err(|e| VosError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Indexed {
        return Err(format_err(path, format!("expected a palette image, found {:?}", info.color_type)));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let depth = info.bit_depth as usize;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let out = reader.next_frame(&mut buf).map_err(|e| format_err(path, e))?;
    let stride = out.line_size;
    let mut labels = Vec::with_capacity(width * height);
    for row in buf.chunks(stride).take(height) {
        if depth == 8 {
            labels.extend_from_slice(&row[..width]);
        } else {
            let per_byte = 8 / depth;
            let mask = (1u8 << depth) - 1;
            labels.extend((0..width).map(|x| {
                let byte = row[x / per_byte];
                let shift = 8 - depth * (x % per_byte + 1);
                (byte >> shift) & mask
            }));
        }
    }
    LabelMask::new(width, height, labels)
}
