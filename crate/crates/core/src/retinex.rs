//! Retinex decomposition: split an RGB image into reflectance (content) and
//! illumination (brightness), and recompose them.
//!
//! The illumination estimate is the per-pixel channel maximum floored at
//! [`EPS_FLOOR`], which makes the pair exactly invertible and keeps
//! reflectance in `[0, 1]`.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

/// Illumination floor; below one 8-bit code value, above zero division.
pub const EPS_FLOOR: f64 = 1e-4;

/// Reflectance (`H x W x 3`) and illumination (`H x W x 1`) maps.
#[derive(Debug, Clone)]
pub struct RetinexPair {
    pub reflectance: ImageTensor,
    pub illumination: ImageTensor,
}

/// Splits `img` into reflectance and illumination.
pub fn decompose(img: &ImageTensor) -> Result<RetinexPair> {
    if img.channels() != 3 {
        return Err(Error::Dimension(
            "retinex decomposition requires a 3-channel image".into(),
        ));
    }
    let data = img.data();
    let (h, w, _) = data.dim();
    let mut illum = Array3::zeros((h, w, 1));
    let mut refl = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let m = data[[y, x, 0]]
                .max(data[[y, x, 1]])
                .max(data[[y, x, 2]])
                .max(EPS_FLOOR);
            illum[[y, x, 0]] = m;
            for c in 0..3 {
                refl[[y, x, c]] = (data[[y, x, c]] / m).clamp(0.0, 1.0);
            }
        }
    }
    Ok(RetinexPair {
        reflectance: ImageTensor::new(refl)?,
        illumination: ImageTensor::new(illum)?,
    })
}

/// Hadamard product of reflectance and illumination, clamped to `[0, 1]`.
pub fn recompose(reflectance: &ImageTensor, illumination: &ImageTensor) -> Result<ImageTensor> {
    if illumination.channels() != 1 {
        return Err(Error::Dimension("illumination must be single-channel".into()));
    }
    if reflectance.height() != illumination.height()
        || reflectance.width() != illumination.width()
    {
        return Err(Error::Dimension(format!(
            "reflectance {}x{} vs illumination {}x{}",
            reflectance.height(),
            reflectance.width(),
            illumination.height(),
            illumination.width()
        )));
    }
    let r = reflectance.data();
    let l = illumination.data();
    let (h, w, c) = r.dim();
    let mut out = Array3::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[y, x, ch]] = (r[[y, x, ch]] * l[[y, x, 0]]).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn uniform_gray_decomposes_to_unit_reflectance() {
        let img = ImageTensor::constant(4, 4, 3, 0.3).unwrap();
        let pair = decompose(&img).unwrap();
        assert!(pair.illumination.data().iter().all(|&v| v == 0.3));
        assert!(pair.reflectance.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_pixel_division_oracle() {
        let mut data = Array3::zeros((1, 1, 3));
        data[[0, 0, 0]] = 0.2;
        data[[0, 0, 1]] = 0.4;
        data[[0, 0, 2]] = 0.8;
        let pair = decompose(&ImageTensor::new(data).unwrap()).unwrap();
        assert_eq!(pair.illumination.data()[[0, 0, 0]], 0.8);
        assert!((pair.reflectance.data()[[0, 0, 0]] - 0.25).abs() < 1e-15);
        assert!((pair.reflectance.data()[[0, 0, 1]] - 0.5).abs() < 1e-15);
        assert_eq!(pair.reflectance.data()[[0, 0, 2]], 1.0);
    }

    #[test]
    fn all_zero_image_hits_the_floor() {
        let img = ImageTensor::constant(2, 2, 3, 0.0).unwrap();
        let pair = decompose(&img).unwrap();
        assert!(pair.illumination.data().iter().all(|&v| v == EPS_FLOOR));
        assert!(pair.reflectance.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recompose_inverts_decompose() {
        let mut data = Array3::zeros((8, 6, 3));
        for (i, v) in data.iter_mut().enumerate() {
            // keep channel max above the floor
            *v = 0.05 + 0.9 * ((i * 31) % 101) as f64 / 100.0;
        }
        let img = ImageTensor::new(data).unwrap();
        let pair = decompose(&img).unwrap();
        let back = recompose(&pair.reflectance, &pair.illumination).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err <= 1e-6, "max reconstruction error {max_err}");
    }

    #[test]
    fn identity_illumination_returns_reflectance() {
        let refl = ImageTensor::constant(3, 3, 3, 0.7).unwrap();
        let ones = ImageTensor::constant(3, 3, 1, 1.0).unwrap();
        assert_eq!(recompose(&refl, &ones).unwrap(), refl);
    }

    #[test]
    fn pointwise_product() {
        let refl = ImageTensor::constant(2, 2, 3, 0.5).unwrap();
        let illum = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let out = recompose(&refl, &illum).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rejects_bad_shapes() {
        let gray = ImageTensor::constant(4, 4, 1, 0.5).unwrap();
        assert!(decompose(&gray).is_err());
        let refl = ImageTensor::constant(4, 4, 3, 0.5).unwrap();
        let illum = ImageTensor::constant(3, 4, 1, 0.5).unwrap();
        assert!(recompose(&refl, &illum).is_err());
    }

    #[test]
    fn scaling_moves_illumination_not_reflectance() {
        let mut data = Array3::zeros((4, 4, 3));
        for (i, v) in data.iter_mut().enumerate() {
            *v = 0.2 + 0.7 * ((i * 17) % 50) as f64 / 49.0;
        }
        let img = ImageTensor::new(data.clone()).unwrap();
        let s = 0.5;
        let scaled = ImageTensor::new(data.mapv(|v| v * s)).unwrap();
        let a = decompose(&img).unwrap();
        let b = decompose(&scaled).unwrap();
        for (la, lb) in a
            .illumination
            .data()
            .iter()
            .zip(b.illumination.data().iter())
        {
            assert!((la * s - lb).abs() < 1e-12);
        }
        for (ra, rb) in a
            .reflectance
            .data()
            .iter()
            .zip(b.reflectance.data().iter())
        {
            assert!((ra - rb).abs() < 1e-12);
        }
    }
}
