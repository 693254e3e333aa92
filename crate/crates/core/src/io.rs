//! PNG encoding for photos, binary layers, index maps and 16-bit score maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use crate::error::{Error, Result};
use crate::raster::{CadStack, Mask, QuantizedImage, RasterImage};

/// Decoded PNG samples, one `u16` per channel sample.
pub(crate) struct DecodedPng {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bit_depth: u8,
    pub samples: Vec<u16>,
}

pub(crate) fn read_png(path: &Path) -> Result<DecodedPng> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decode_err = |message: String| Error::Decode {
        path: path.to_path_buf(),
        message,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| decode_err(e.to_string()))?;
    let (height, width) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(decode_err("indexed colour is not supported".into())),
    };
    let bit_depth = info.bit_depth as u8;
    let mut samples = Vec::with_capacity(height * width * channels);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        match info.bit_depth {
            BitDepth::Sixteen => samples.extend(
                row.chunks_exact(2)
                    .take(width * channels)
                    .map(|b| u16::from_be_bytes([b[0], b[1]])),
            ),
            BitDepth::Eight => samples.extend(row.iter().take(width * channels).map(|&b| b as u16)),
            _ => {
                let bits = bit_depth as usize;
                let mask = (1u16 << bits) - 1;
                for i in 0..width * channels {
                    let bit = i * bits;
                    let byte = row[bit / 8] as u16;
                    let shift = 8 - bits - bit % 8;
                    samples.push((byte >> shift) & mask);
                }
            }
        }
    }
    Ok(DecodedPng {
        height,
        width,
        channels,
        bit_depth,
        samples,
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: &[u8],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    let to_io = |e: png::EncodingError| {
        Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e))
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(bytes).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Converts a `[0, 1]` intensity to the nearest 8-bit level.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_photo(path: &Path, img: &RasterImage) -> Result<()> {
    let bytes: Vec<u8> = img.as_slice().iter().map(|&v| to_u8(v)).collect();
    write_png(path, img.width(), img.height(), ColorType::Rgb, BitDepth::Eight, &bytes)
}

/// Writes raw 8-bit RGB bytes (heatmaps, composites).
pub fn write_rgb8(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    write_png(path, width, height, ColorType::Rgb, BitDepth::Eight, bytes)
}

pub fn read_photo(path: &Path) -> Result<RasterImage> {
    let png = read_png(path)?;
    if png.bit_depth != 8 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("photos must be 8-bit, found {}-bit", png.bit_depth),
        });
    }
    let mut data = Vec::with_capacity(png.height * png.width * 3);
    for px in png.samples.chunks_exact(png.channels) {
        let rgb = match png.channels {
            1 | 2 => [px[0]; 3],
            _ => [px[0], px[1], px[2]],
        };
        data.extend(rgb.iter().map(|&v| v as f64 / 255.0));
    }
    RasterImage::new(png.height, png.width, data)
}

fn pack_bits(height: usize, width: usize, bits: impl Fn(usize, usize) -> bool) -> Vec<u8> {
    let stride = width.div_ceil(8);
    let mut out = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if bits(y, x) {
                out[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    out
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let bytes = pack_bits(mask.height(), mask.width(), |y, x| mask.get(y, x));
    write_png(path, mask.width(), mask.height(), ColorType::Grayscale, BitDepth::One, &bytes)
}

/// Reads a binary raster whose samples must be 0 or 1.
pub fn read_binary(path: &Path) -> Result<Mask> {
    let png = read_png(path)?;
    if png.channels != 1 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "binary rasters must be single-channel grayscale".into(),
        });
    }
    let data = png
        .samples
        .iter()
        .map(|&v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::NonBinaryLayer {
                path: path.to_path_buf(),
                value: other.min(255) as u8,
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(png.height, png.width, data)
}

/// Writes one CAD layer as a 1-bit raster (`+1` stored as 1).
pub fn write_layer(path: &Path, cad: &CadStack, layer: usize) -> Result<()> {
    let plane = cad.layer(layer);
    let w = cad.width();
    let bytes = pack_bits(cad.height(), w, |y, x| plane[y * w + x] > 0);
    write_png(path, w, cad.height(), ColorType::Grayscale, BitDepth::One, &bytes)
}

pub fn write_quantized(path: &Path, q: &QuantizedImage) -> Result<()> {
    write_png(path, q.width(), q.height(), ColorType::Grayscale, BitDepth::Eight, q.as_slice())
}

pub fn read_quantized(path: &Path) -> Result<QuantizedImage> {
    let png = read_png(path)?;
    if png.channels != 1 || png.bit_depth != 8 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "index maps must be 8-bit grayscale".into(),
        });
    }
    QuantizedImage::new(png.height, png.width, png.samples.iter().map(|&v| v as u8).collect())
}

pub fn write_gray16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

pub fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let png = read_png(path)?;
    if png.channels != 1 || png.bit_depth != 16 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: "expected 16-bit grayscale".into(),
        });
    }
    Ok((png.height, png.width, png.samples))
}
