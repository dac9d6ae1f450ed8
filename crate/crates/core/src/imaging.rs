//! Image container, lossless file I/O (8-bit PNG and binary PPM), and patch
//! extraction.
//!
//! All pixel data lives in `[0, 1]` as `f64`, shape `H x W x C` with C of 1
//! (grayscale) or 3 (RGB).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Unit-interval image tensor, height x width x channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an array, validating the shape and range invariants.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("empty image {h}x{w}")));
        }
        if c != 1 && c != 3 {
            return Err(Error::Dimension(format!("unsupported channel count {c}")));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel value outside [0, 1]".into()));
        }
        Ok(Self { data })
    }

    /// Wraps an array, clamping values into `[0, 1]` first.
    pub fn from_clamped(mut data: Array3<f64>) -> Result<Self> {
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    /// Constant-valued image.
    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    /// Mean over every element.
    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }
}

/// Patch geometry: square side length and tiling stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
}

impl PatchSpec {
    pub fn new(patch_size: usize, stride: usize) -> Result<Self> {
        if patch_size == 0 || stride == 0 {
            return Err(Error::Domain("patch_size and stride must be positive".into()));
        }
        Ok(Self { patch_size, stride })
    }
}

fn quantize(v: f64, max_code: f64) -> u8 {
    // Round half away from zero; inputs are clamped non-negative first.
    (v.clamp(0.0, 1.0) * max_code).round() as u8
}

/// Loads an 8-bit PNG or binary PPM (P6) into the unit interval.
///
/// Integer codes map to `[0, 1]` by division with the maximum code value.
/// Alpha channels are dropped; 16-bit files are rejected.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => load_ppm(path),
        "png" => load_png(path),
        other => Err(Error::Format(format!(
            "unsupported image format '.{other}' for {}",
            path.display()
        ))),
    }
}

fn load_png(path: &Path) -> Result<ImageTensor> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    use image::DynamicImage::*;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("{}: zero-dimension image", path.display())));
    }
    let tensor = match img {
        ImageLuma8(buf) => {
            let mut data = Array3::zeros((h, w, 1));
            for (x, y, p) in buf.enumerate_pixels() {
                data[[y as usize, x as usize, 0]] = p.0[0] as f64 / 255.0;
            }
            data
        }
        ImageLumaA8(buf) => {
            let mut data = Array3::zeros((h, w, 1));
            for (x, y, p) in buf.enumerate_pixels() {
                data[[y as usize, x as usize, 0]] = p.0[0] as f64 / 255.0;
            }
            data
        }
        ImageRgb8(buf) => {
            let mut data = Array3::zeros((h, w, 3));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    data[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
                }
            }
            data
        }
        ImageRgba8(buf) => {
            let mut data = Array3::zeros((h, w, 3));
            for (x, y, p) in buf.enumerate_pixels() {
                for c in 0..3 {
                    data[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
                }
            }
            data
        }
        _ => {
            return Err(Error::Format(format!(
                "{}: only 8-bit grayscale/RGB PNG is supported",
                path.display()
            )))
        }
    };
    ImageTensor::new(tensor)
}

fn load_ppm(path: &Path) -> Result<ImageTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval, separated by whitespace/comments.
    fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
        let mut i = *pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            None
        } else {
            *pos = i;
            Some(String::from_utf8_lossy(&bytes[start..i]).into_owned())
        }
    }

    let mut pos = 0usize;
    let mut token = |pos: &mut usize| -> Result<String> {
        next_token(&bytes, pos).ok_or_else(|| err("truncated header"))
    };

    if token(&mut pos)? != "P6" {
        return Err(err("not a binary PPM (P6)"));
    }
    let w: usize = token(&mut pos)?.parse().map_err(|_| err("bad width"))?;
    let h: usize = token(&mut pos)?.parse().map_err(|_| err("bad height"))?;
    let maxval: usize = token(&mut pos)?.parse().map_err(|_| err("bad maxval"))?;
    if w == 0 || h == 0 {
        return Err(err("zero-dimension image"));
    }
    if maxval != 255 {
        return Err(err("only maxval 255 is supported"));
    }
    // Exactly one whitespace byte after maxval, then raw samples.
    let data_start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < data_start + need {
        return Err(err("truncated pixel data"));
    }
    let raw = &bytes[data_start..data_start + need];
    let mut data = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[[y, x, c]] = raw[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    ImageTensor::new(data)
}

/// Writes an 8-bit PNG or binary PPM, clamping to `[0, 1]` and rounding to
/// the nearest code value.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "ppm" => save_ppm(img, path),
        "png" => save_png(img, path),
        other => Err(Error::Format(format!(
            "unsupported output format '.{other}' for {}",
            path.display()
        ))),
    }
}

fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w, c) = img.data.dim();
    let mut bytes = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(quantize(img.data[[y, x, ch]], 255.0));
            }
        }
    }
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn save_ppm(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w, c) = img.data.dim();
    if c != 3 {
        return Err(Error::Format("PPM (P6) requires a 3-channel image".into()));
    }
    let mut out = Vec::with_capacity(32 + h * w * 3);
    write!(out, "P6\n{w} {h}\n255\n").expect("in-memory write");
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out.push(quantize(img.data[[y, x, ch]], 255.0));
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Extracts randomly positioned square patches.
///
/// The patch count equals the stride-tiling count
/// `(floor((H-P)/stride)+1) * (floor((W-P)/stride)+1)`; positions are drawn
/// uniformly and deterministically from `rng_seed`.
pub fn extract_patches(
    img: &ImageTensor,
    spec: PatchSpec,
    rng_seed: u64,
) -> Result<Vec<ImageTensor>> {
    let (h, w, _) = img.data.dim();
    let p = spec.patch_size;
    if p > h || p > w {
        return Err(Error::Dimension(format!(
            "patch {p} exceeds image {h}x{w}"
        )));
    }
    let tiles_y = (h - p) / spec.stride + 1;
    let tiles_x = (w - p) / spec.stride + 1;
    let count = tiles_y * tiles_x;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut patches = Vec::with_capacity(count);
    for _ in 0..count {
        let y0 = rng.random_range(0..=h - p);
        let x0 = rng.random_range(0..=w - p);
        let view = img
            .data
            .slice(ndarray::s![y0..y0 + p, x0..x0 + p, ..])
            .to_owned();
        patches.push(ImageTensor { data: view });
    }
    Ok(patches)
}

/// One random patch from an image (training helper).
pub fn random_patch(img: &ImageTensor, patch_size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let (h, w, _) = img.data.dim();
    if patch_size > h || patch_size > w {
        return Err(Error::Dimension(format!(
            "patch {patch_size} exceeds image {h}x{w}"
        )));
    }
    let y0 = rng.random_range(0..=h - patch_size);
    let x0 = rng.random_range(0..=w - patch_size);
    Ok(ImageTensor {
        data: img
            .data
            .slice(ndarray::s![y0..y0 + patch_size, x0..x0 + patch_size, ..])
            .to_owned(),
    })
}

/// Lists loadable image paths (png/ppm) in a directory, sorted by filename.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "png" || e == "ppm"
                })
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn code_value_mapping() {
        // 255 -> 1.0, 0 -> 0.0, 128 -> 128/255.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codes.png");
        let mut data = Array3::zeros((1, 3, 3));
        for c in 0..3 {
            data[[0, 0, c]] = 1.0;
            data[[0, 1, c]] = 0.0;
            data[[0, 2, c]] = 128.0 / 255.0;
        }
        save_image(&ImageTensor::new(data).unwrap(), &path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.data()[[0, 0, 0]], 1.0);
        assert_eq!(img.data()[[0, 1, 0]], 0.0);
        assert!((img.data()[[0, 2, 0]] - 0.5019607843137255).abs() < 1e-12);
    }

    #[test]
    fn quantizer_rounds_half_up() {
        // 0.5 * 255 = 127.5 -> code 128; clamping maps 1.2 -> 255.
        assert_eq!(quantize(0.5, 255.0), 128);
        assert_eq!(quantize(1.2, 255.0), 255);
        assert_eq!(quantize(-0.1, 255.0), 0);
    }

    #[test]
    fn round_trip_on_quantized_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::zeros((4, 5, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        let img = ImageTensor::new(data).unwrap();
        for name in ["rt.png", "rt.ppm"] {
            let path = dir.path().join(name);
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back, img, "{name}");
        }
    }

    #[test]
    fn missing_file_and_bad_format() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
        assert!(matches!(load_image("/tmp/whatever.jpeg"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_invalid_tensors() {
        assert!(ImageTensor::new(Array3::zeros((0, 4, 3))).is_err());
        assert!(ImageTensor::new(Array3::from_elem((2, 2, 3), 1.5)).is_err());
        assert!(ImageTensor::new(Array3::zeros((2, 2, 2))).is_err());
    }

    #[test]
    fn degenerate_patch_is_whole_image() {
        let img = ImageTensor::constant(64, 64, 3, 0.25).unwrap();
        let spec = PatchSpec::new(64, 64).unwrap();
        let patches = extract_patches(&img, spec, 7).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], img);
    }

    #[test]
    fn patch_extraction_is_deterministic() {
        let mut data = Array3::zeros((32, 48, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = (i % 97) as f64 / 96.0;
        }
        let img = ImageTensor::new(data).unwrap();
        let spec = PatchSpec::new(16, 16).unwrap();
        let a = extract_patches(&img, spec, 42).unwrap();
        let b = extract_patches(&img, spec, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2 * 3);
    }

    #[test]
    fn patch_shape_contract() {
        let img = ImageTensor::constant(128, 128, 3, 0.5).unwrap();
        let spec = PatchSpec::new(64, 64).unwrap();
        let patches = extract_patches(&img, spec, 1).unwrap();
        assert_eq!(patches.len(), 4);
        for p in &patches {
            assert_eq!((p.height(), p.width(), p.channels()), (64, 64, 3));
        }
        assert!(extract_patches(&img, PatchSpec::new(256, 1).unwrap(), 0).is_err());
    }
}
