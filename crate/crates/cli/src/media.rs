//! PNG frame strips and animated GIFs from `[H, W, C]` frames in `[0, 1]`.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ghvae_core::tensor::Tensor;
use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, ImageFormat, Rgba, RgbaImage};

use crate::error::{io_error, CliError, CliResult};

/// Pixels between neighbouring frames.
const GAP: u32 = 2;
const GAP_COLOR: Rgba<u8> = Rgba([40, 40, 160, 255]);

fn pixel(frame: &Tensor<f32>, y: usize, x: usize) -> Rgba<u8> {
    let (w, c) = (frame.shape()[1], frame.shape()[2]);
    let at = |k: usize| {
        let v = frame.data()[(y * w + x) * c + k];
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    };
    if c >= 3 {
        Rgba([at(0), at(1), at(2), 255])
    } else {
        let g = at(0);
        Rgba([g, g, g, 255])
    }
}

fn check(frame: &Tensor<f32>) -> CliResult<(usize, usize)> {
    match frame.shape() {
        &[h, w, c] if c == 1 || c == 3 => Ok((h, w)),
        s => Err(CliError::Runtime(format!("cannot draw a frame of shape {s:?}"))),
    }
}

/// Lay out `rows` of frames on a grid, each frame magnified `scale` times.
/// Missing cells stay blank.
pub fn grid(rows: &[Vec<Tensor<f32>>], scale: u32) -> CliResult<RgbaImage> {
    let first = rows
        .iter()
        .flatten()
        .next()
        .ok_or_else(|| CliError::Runtime("nothing to draw".into()))?;
    let (h, w) = check(first)?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let (fh, fw) = (h as u32 * scale, w as u32 * scale);
    let width = cols * fw + (cols + 1) * GAP;
    let height = rows.len() as u32 * fh + (rows.len() as u32 + 1) * GAP;
    let mut img = RgbaImage::from_pixel(width, height, GAP_COLOR);
    for (r, row) in rows.iter().enumerate() {
        for (c, frame) in row.iter().enumerate() {
            if check(frame)? != (h, w) {
                return Err(CliError::Runtime("frames in one image must share a shape".into()));
            }
            let (x0, y0) = (GAP + c as u32 * (fw + GAP), GAP + r as u32 * (fh + GAP));
            for y in 0..fh {
                for x in 0..fw {
                    let p = pixel(frame, (y / scale) as usize, (x / scale) as usize);
                    img.put_pixel(x0 + x, y0 + y, p);
                }
            }
        }
    }
    Ok(img)
}

pub fn write_png(img: &RgbaImage, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// One GIF frame per image, looping forever.
pub fn write_gif(frames: &[RgbaImage], delay_ms: u32, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    let fail = |e: image::ImageError| CliError::Runtime(format!("{}: {e}", path.display()));
    enc.set_repeat(Repeat::Infinite).map_err(fail)?;
    for img in frames {
        let frame = Frame::from_parts(img.clone(), 0, 0, Delay::from_numer_denom_ms(delay_ms, 1));
        enc.encode_frame(frame).map_err(fail)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_places_frames_with_gaps() {
        let white = Tensor::full(vec![2, 3, 1], 1.0f32);
        let black = Tensor::zeros(vec![2, 3, 1]);
        let img = grid(&[vec![white.clone(), black], vec![white]], 2).unwrap();
        assert_eq!(img.dimensions(), (2 * 6 + 3 * GAP, 2 * 4 + 3 * GAP));
        assert_eq!(*img.get_pixel(GAP, GAP), Rgba([255, 255, 255, 255]));
        assert_eq!(*img.get_pixel(2 * GAP + 6, GAP), Rgba([0, 0, 0, 255]));
        assert_eq!(*img.get_pixel(0, 0), GAP_COLOR);
        // The second row has one frame; the cell beside it stays blank.
        assert_eq!(*img.get_pixel(2 * GAP + 6, 2 * GAP + 4), GAP_COLOR);
    }

    #[test]
    fn odd_shapes_are_refused() {
        assert!(grid(&[vec![Tensor::zeros(vec![2, 2, 2])]], 1).is_err());
        assert!(grid(&[], 1).is_err());
    }
}
