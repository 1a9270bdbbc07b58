use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Interleaved RGB bytes to a `3 × H × W` array in `[0, 1]`.
pub fn rgb_to_array(rgb: &[u8], width: usize, height: usize) -> Array {
    let n = width * height;
    let mut data = vec![0.0; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            data[c * n + p] = rgb[p * 3 + c] as f64 / 255.0;
        }
    }
    Array::new(&[3, height, width], data).expect("positive image extents")
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Array> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(rgb_to_array(img.as_raw(), w as usize, h as usize))
}

pub fn save_png(path: impl AsRef<Path>, rgb: &[u8], width: usize, height: usize) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Shape(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    image::save_buffer(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(())
}
