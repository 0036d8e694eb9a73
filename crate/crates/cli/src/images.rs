//! Sample grids as 8-bit grayscale PGM (P5) or PNG.

use std::io::Write;
use std::path::Path;

use itn_core::Tensor;

use crate::error::CliError;

/// A row-major 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Tiles `[N, C, H, W]` images (channels averaged) into a near-square grid
/// with `ceil(sqrt(N))` columns; empty cells stay black.
pub fn grid(images: &Tensor) -> Result<Gray, CliError> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 {
        return Err(CliError::Usage("no images to tile".into()));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    let data = images.data();
    for k in 0..n {
        let (oy, ox) = ((k / cols) * h, (k % cols) * w);
        for i in 0..h {
            for j in 0..w {
                let v = (0..c).map(|ch| data[((k * c + ch) * h + i) * w + j]).sum::<f64>() / c as f64;
                pixels[(oy + i) * width + ox + j] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(Gray { width, height, pixels })
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_png(img: &Gray) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::Runtime(itn_core::Error::Format(format!("png encoding: {}", e)));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&img.pixels).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(out)
}

/// Writes PGM for a `.pgm` extension and PNG otherwise.
pub fn write_grid(path: &Path, images: &Tensor) -> Result<Gray, CliError> {
    let img = grid(images)?;
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => encode_pgm(&img),
        _ => encode_png(&img)?,
    };
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout_and_quantization() {
        let mut data = vec![0.0; 5 * 4];
        data[4] = 1.0; // image 1, pixel (0,0)
        data[19] = 2.0; // image 4, pixel (1,1), clipped
        let img = grid(&Tensor::new(&[5, 1, 2, 2], data).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (6, 4));
        assert_eq!(img.pixels[2], 255);
        assert_eq!(img.pixels[3 * 6 + 3], 255);
        assert_eq!(img.pixels.iter().filter(|&&p| p > 0).count(), 2);
    }

    #[test]
    fn pgm_header() {
        let img = Gray { width: 3, height: 2, pixels: vec![0, 1, 2, 3, 4, 5] };
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 6);
    }
}
