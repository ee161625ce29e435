//! Conversion of blobs into square, orientation-normalised, standardised
//! images for the two classifiers.

use std::f64::consts::FRAC_PI_4;

use thiserror::Error;

use crate::ingest::{Blob, GrayFrame, Pixel};
use crate::morphology::Mask;

/// Half-width of the square dilation kernel (5x5).
pub const DILATION_RADIUS: usize = 2;
/// Side of crossing-detector input images.
pub const DCD_IMAGE_SIDE: usize = 40;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImagePrepError {
    #[error("cannot derive an image size from an empty blob list")]
    NoBlobs,
}

/// Rectangular crop of a frame around a blob. Cells outside the dilated
/// blob are zero; cells beyond the frame edge are zero padding.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MaskedImage {
    pub origin_x: i64,
    pub origin_y: i64,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskedImage {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Intensity at frame coordinates; zero outside the crop.
    #[inline]
    pub fn get(&self, x: i64, y: i64) -> f64 {
        let lx = x - self.origin_x;
        let ly = y - self.origin_y;
        if lx < 0 || ly < 0 || lx >= self.width as i64 || ly >= self.height as i64 {
            0.0
        } else {
            self.data[ly as usize * self.width + lx as usize] as f64
        }
    }

    /// Bilinear sample at fractional frame coordinates.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        bilinear(x, y, |xi, yi| self.get(xi, yi))
    }
}

#[inline]
fn bilinear(x: f64, y: f64, get: impl Fn(i64, i64) -> f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let (xi, yi) = (x0 as i64, y0 as i64);
    get(xi, yi) * (1.0 - tx) * (1.0 - ty)
        + get(xi + 1, yi) * tx * (1.0 - ty)
        + get(xi, yi + 1) * (1.0 - tx) * ty
        + get(xi + 1, yi + 1) * tx * ty
}

/// Origin and size of the crop [`extract_masked_image`] produces for a
/// pixel set: its bounding box grown by the dilation radius.
pub fn masked_image_geometry(pixels: &[Pixel]) -> (i64, i64, usize, usize) {
    let r = DILATION_RADIUS as i64;
    let x0 = pixels.iter().map(|p| p.x as i64).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.x as i64).max().unwrap_or(-1);
    let y0 = pixels.iter().map(|p| p.y as i64).min().unwrap_or(0);
    let y1 = pixels.iter().map(|p| p.y as i64).max().unwrap_or(-1);
    (
        x0 - r,
        y0 - r,
        (x1 - x0 + 1 + 2 * r).max(0) as usize,
        (y1 - y0 + 1 + 2 * r).max(0) as usize,
    )
}

/// Crops the frame around a blob and zeroes everything outside the 5x5
/// dilation of the blob's pixel set.
pub fn extract_masked_image(frame: &GrayFrame, pixels: &[Pixel]) -> MaskedImage {
    let (ox, oy, w, h) = masked_image_geometry(pixels);
    let dilated = Mask::from_points(pixels.iter().map(|p| (p.x as i64, p.y as i64)), 0)
        .dilate(DILATION_RADIUS);
    let mut data = vec![0u8; w * h];
    for ly in 0..h {
        for lx in 0..w {
            let (x, y) = (ox + lx as i64, oy + ly as i64);
            if x < 0 || y < 0 || x >= frame.width as i64 || y >= frame.height as i64 {
                continue;
            }
            if dilated.get(x, y) {
                data[ly * w + lx] = frame.get(x as usize, y as usize);
            }
        }
    }
    MaskedImage {
        origin_x: ox,
        origin_y: oy,
        width: w,
        height: h,
        data,
    }
}

/// Angle of the first principal axis of a pixel cloud, in (-pi/2, pi/2],
/// measured in image coordinates. `None` when the two eigenvalues are equal
/// (no preferred direction).
pub fn principal_axis_angle(points: impl Iterator<Item = (f64, f64)> + Clone) -> Option<f64> {
    let n = points.clone().count() as f64;
    if n < 2.0 {
        return None;
    }
    let (mx, my) = points
        .clone()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (mx, my) = (mx / n, my / n);
    let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
    for (x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    let scale = (cxx + cyy).max(f64::MIN_POSITIVE);
    if (cxx - cyy).abs() <= 1e-9 * scale && cxy.abs() <= 1e-9 * scale {
        return None;
    }
    Some(0.5 * (2.0 * cxy).atan2(cxx - cyy))
}

/// Square crop before standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedImage {
    pub side: usize,
    pub values: Vec<f64>,
    /// Rotation applied to the blob, radians.
    pub rotation: f64,
}

/// Rotates the masked image about the blob centroid so that the blob's
/// first principal axis lies at pi/4, then crops a `side x side` square
/// centred on the centroid. Sampling is bilinear; a blob with no
/// preferred axis is not rotated.
pub fn orient_and_crop(image: &MaskedImage, blob_pixels: &[Pixel], side: usize) -> OrientedImage {
    let pts = blob_pixels.iter().map(|p| (p.x as f64, p.y as f64));
    let n = blob_pixels.len().max(1) as f64;
    let (cx, cy) = pts
        .clone()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (cx / n, cy / n);
    let rotation = principal_axis_angle(pts).map_or(0.0, |theta| FRAC_PI_4 - theta);
    // output offset q maps back to source c + R(-rotation) q
    let (s, c) = (-rotation).sin_cos();
    let half = (side as f64 - 1.0) / 2.0;
    let mut values = Vec::with_capacity(side * side);
    for v in 0..side {
        for u in 0..side {
            let (qx, qy) = (u as f64 - half, v as f64 - half);
            let sx = cx + c * qx - s * qy;
            let sy = cy + s * qx + c * qy;
            values.push(image.sample(sx, sy));
        }
    }
    OrientedImage {
        side,
        values,
        rotation,
    }
}

/// Bilinear resize of a square image.
pub fn resize_square(values: &[f64], side: usize, new_side: usize) -> Vec<f64> {
    if side == new_side {
        return values.to_vec();
    }
    let scale = side as f64 / new_side as f64;
    let max = side as f64 - 1.0;
    let get = |x: i64, y: i64| {
        let x = x.clamp(0, side as i64 - 1) as usize;
        let y = y.clamp(0, side as i64 - 1) as usize;
        values[y * side + x]
    };
    let mut out = Vec::with_capacity(new_side * new_side);
    for v in 0..new_side {
        for u in 0..new_side {
            let x = ((u as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let y = ((v as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            out.push(bilinear(x, y, get));
        }
    }
    out
}

/// Zero mean, unit (population) variance. A constant image maps to zeros.
pub fn standardize(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / sd).collect()
}

/// Classifier input: a standardised square image.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub side: usize,
    pub values: Vec<f32>,
    pub rotation: f64,
}

impl NormalizedImage {
    /// The same image turned by 180 degrees.
    pub fn rotated_180(&self) -> NormalizedImage {
        let mut values = self.values.clone();
        values.reverse();
        NormalizedImage {
            side: self.side,
            values,
            rotation: self.rotation + std::f64::consts::PI,
        }
    }
}

fn finish(values: Vec<f64>, side: usize, rotation: f64) -> NormalizedImage {
    NormalizedImage {
        side,
        values: standardize(&values).into_iter().map(|v| v as f32).collect(),
        rotation,
    }
}

/// Identification-classifier input for one blob.
pub fn preprocess_identification(blob: &Blob, side: usize) -> NormalizedImage {
    let o = orient_and_crop(&blob.image, &blob.pixels, side);
    finish(o.values, side, o.rotation)
}

/// Crossing-detector input: oriented crop at `crop_side`, resized to 40x40.
pub fn preprocess_dcd(blob: &Blob, crop_side: usize) -> NormalizedImage {
    let o = orient_and_crop(&blob.image, &blob.pixels, crop_side);
    let resized = resize_square(&o.values, crop_side, DCD_IMAGE_SIDE);
    finish(resized, DCD_IMAGE_SIDE, o.rotation)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Side of identification images: the median bounding-box diagonal of
/// individual blobs (the body-length estimate) divided by sqrt(2), rounded.
pub fn identification_image_side<'a>(
    individual_blobs: impl IntoIterator<Item = &'a Blob>,
) -> Result<usize, ImagePrepError> {
    let diags: Vec<f64> = individual_blobs.into_iter().map(|b| b.bbox.diagonal()).collect();
    if diags.is_empty() {
        return Err(ImagePrepError::NoBlobs);
    }
    Ok(((median(diags) / std::f64::consts::SQRT_2).round() as usize).max(1))
}

/// Square crop side for crossing-detector images: the largest bounding-box
/// side over the sure crossings. The crop is later resized to 40x40.
pub fn dcd_crop_side<'a>(
    sure_crossings: impl IntoIterator<Item = &'a Blob>,
) -> Result<usize, ImagePrepError> {
    sure_crossings
        .into_iter()
        .map(|b| b.bbox.width().max(b.bbox.height()))
        .max()
        .ok_or(ImagePrepError::NoBlobs)
}
