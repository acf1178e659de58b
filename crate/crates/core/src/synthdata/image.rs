//! 8-bit RGB PNG input and output. Pixel `v` maps to `v / 127.5 - 1`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Loads an 8-bit RGB PNG as `[3, H, W]` in `[-1, 1]`. Other color types
/// and bit depths are rejected.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let format = |msg: String| Error::ImageFormat {
        path: path.to_path_buf(),
        msg,
    };
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| format(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb || depth != png::BitDepth::Eight {
        return Err(format(format!("expected 8-bit RGB, found {color:?} at {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    rgb8_to_tensor(&buf[..info.buffer_size()], h, w)
}

/// `[3, H, W]` image in `[-1, 1]` from interleaved RGB bytes.
pub fn rgb8_to_tensor<T: Scalar>(bytes: &[u8], h: usize, w: usize) -> Result<Tensor<T>> {
    let plane = h * w;
    if bytes.len() != 3 * plane {
        return Err(Error::invalid(
            "rgb8_to_tensor",
            format!("{} bytes for a {w}x{h} RGB image", bytes.len()),
        ));
    }
    let mut data = vec![T::zero(); 3 * plane];
    for (i, px) in bytes.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = T::from_f64_lossy(px[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Interleaved RGB bytes of a `[3, H, W]` image in `[-1, 1]`, clamped.
pub fn tensor_to_rgb8<T: Scalar>(image: &Tensor<T>) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid("tensor_to_rgb8", format!("expected [3, H, W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let d = image.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + i].as_f64() + 1.0) * 127.5;
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

pub fn save_image<T: Scalar>(image: &Tensor<T>, path: &Path) -> Result<()> {
    let bytes = tensor_to_rgb8(image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let encode = |e: png::EncodingError| Error::ImageFormat {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode)?;
    writer.write_image_data(&bytes).map_err(encode)?;
    writer.finish().map_err(encode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn save_load_round_trip_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let t = Rng::new(1).uniform_tensor::<f32>(&[3, 7, 5], -1.0, 1.0);
        save_image(&t, &path).unwrap();
        let once: Tensor<f32> = load_image(&path).unwrap();
        assert_eq!(once.shape(), &[3, 7, 5]);
        assert!(once.max_abs_diff(&t) <= 1.0 / 255.0 + 1e-6);
        save_image(&once, &path).unwrap();
        let twice: Tensor<f32> = load_image(&path).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn grayscale_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let mut enc = png::Encoder::new(BufWriter::new(File::create(&path).unwrap()), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0, 64, 128, 255]).unwrap();
        let err = load_image::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::ImageFormat { .. }), "{err}");
    }

    #[test]
    fn extremes_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.png");
        let t = Tensor::<f32>::from_f64_slice(&[3, 1, 2], &[-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]).unwrap();
        save_image(&t, &path).unwrap();
        assert_eq!(load_image::<f32>(&path).unwrap(), t);
    }
}
