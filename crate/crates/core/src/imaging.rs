//! PNG files to and from `[C, H, W]` float tensors in [-1, 1].

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::{Error, Result};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |e| Error::Image { path: path.to_path_buf(), message: e.to_string() }
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Quantise a `[C, H, W]` tensor to 8 bits, the same rounding `save_png` applies.
pub fn quantize(chw: &[f32]) -> Vec<f32> {
    chw.iter().map(|v| from_byte(to_byte(*v))).collect()
}

/// PNG bytes for a one- or three-channel image.
pub fn encode_png(chw: &[f32], channels: usize, size: usize) -> Result<Vec<u8>> {
    let plane = size * size;
    if chw.len() != channels * plane {
        return Err(Error::InvalidArgument(format!("{} values do not form a {channels}x{size}x{size} image", chw.len())));
    }
    let mut out = std::io::Cursor::new(Vec::new());
    let fmt = image::ImageFormat::Png;
    let err = |e: image::ImageError| Error::Image { path: "<memory>".into(), message: e.to_string() };
    match channels {
        1 => {
            let buf: ImageBuffer<Luma<u8>, _> =
                ImageBuffer::from_fn(size as u32, size as u32, |x, y| Luma([to_byte(chw[y as usize * size + x as usize])]));
            buf.write_to(&mut out, fmt).map_err(err)?;
        }
        3 => {
            let buf: ImageBuffer<Rgb<u8>, _> = ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
                let i = y as usize * size + x as usize;
                Rgb([to_byte(chw[i]), to_byte(chw[plane + i]), to_byte(chw[2 * plane + i])])
            });
            buf.write_to(&mut out, fmt).map_err(err)?;
        }
        c => return Err(Error::InvalidArgument(format!("cannot encode {c}-channel images"))),
    }
    Ok(out.into_inner())
}

pub fn save_png(path: impl AsRef<Path>, chw: &[f32], channels: usize, size: usize) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(chw, channels, size)?;
    std::fs::write(path, bytes).map_err(crate::error::io_err(path))
}

/// Decode to `[C, H, W]`; `channels` selects grey or RGB conversion.
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<(Vec<f32>, usize)> {
    let path = path.as_ref();
    let img = image::open(path).map_err(image_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w != h {
        return Err(Error::Image { path: path.to_path_buf(), message: format!("expected a square image, got {w}x{h}") });
    }
    let plane = w * h;
    match channels {
        1 => Ok((img.to_luma8().into_raw().into_iter().map(from_byte).collect(), w)),
        3 => {
            let raw = img.to_rgb8().into_raw();
            let mut chw = vec![0.0; 3 * plane];
            for (i, px) in raw.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    chw[c * plane + i] = from_byte(px[c]);
                }
            }
            Ok((chw, w))
        }
        c => Err(Error::InvalidArgument(format!("cannot decode into {c} channels"))),
    }
}
