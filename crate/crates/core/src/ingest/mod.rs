//! Frame loading, background modelling and blob segmentation.

mod formats;
mod segment;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageprep::MaskedImage;

pub use formats::{
    read_blob_stream, read_pgm, read_raw, write_blob_stream, write_pgm, write_pgm_directory,
    write_raw, BlobStreamRecord, RAW_MAGIC,
};
pub use segment::{compute_background, segment_frame, Background, SegmentationContext};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("{path}: unsupported format ({reason})")]
    Unsupported { path: PathBuf, reason: String },
    #[error("frame {index} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    InconsistentDimensions {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("sequence has no frames")]
    Empty,
    #[error("invalid segmentation parameters: {0}")]
    InvalidParams(String),
}

impl IngestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// An 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayFrame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "frame buffer size mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Bilinear resampling by `factor` in (0, 1].
    pub fn downsample(&self, factor: f64) -> GrayFrame {
        if factor >= 1.0 {
            return self.clone();
        }
        let w = ((self.width as f64 * factor).round() as usize).max(1);
        let h = ((self.height as f64 * factor).round() as usize).max(1);
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        let mut out = GrayFrame::filled(w, h, 0);
        for y in 0..h {
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
                let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
                let v = self.get(x0, y0) as f64 * (1.0 - tx) * (1.0 - ty)
                    + self.get(x1, y0) as f64 * tx * (1.0 - ty)
                    + self.get(x0, y1) as f64 * (1.0 - tx) * ty
                    + self.get(x1, y1) as f64 * tx * ty;
                out.set(x, y, v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    PgmDirectory,
    RawFile,
    BlobStream,
}

/// Region of interest. Pixels outside it are never part of a blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Roi {
    /// Polygon vertices in pixel coordinates; pixel centres are tested.
    Polygon { vertices: Vec<[f64; 2]> },
    /// Explicit mask, row-major, nonzero = inside.
    Mask {
        width: usize,
        height: usize,
        data: Vec<u8>,
    },
}

impl Roi {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match self {
            Roi::Mask {
                width,
                height,
                data,
            } => x < *width && y < *height && data[y * width + x] != 0,
            Roi::Polygon { vertices } => {
                let (px, py) = (x as f64, y as f64);
                let mut inside = false;
                let n = vertices.len();
                let mut j = n.wrapping_sub(1);
                for i in 0..n {
                    let [xi, yi] = vertices[i];
                    let [xj, yj] = vertices[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentationParams {
    pub min_intensity: u8,
    pub max_intensity: u8,
    pub min_area: usize,
    pub max_area: usize,
    pub roi: Option<Roi>,
    pub subtract_background: bool,
    pub background_sample_stride: usize,
    pub resolution_reduction: f64,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self {
            min_intensity: 0,
            max_intensity: 135,
            min_area: 1,
            max_area: usize::MAX,
            roi: None,
            subtract_background: false,
            background_sample_stride: 10,
            resolution_reduction: 1.0,
        }
    }
}

impl SegmentationParams {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.min_intensity > self.max_intensity {
            return Err(IngestError::InvalidParams(format!(
                "min_intensity {} > max_intensity {}",
                self.min_intensity, self.max_intensity
            )));
        }
        if self.min_area > self.max_area {
            return Err(IngestError::InvalidParams(format!(
                "min_area {} > max_area {}",
                self.min_area, self.max_area
            )));
        }
        if !(self.resolution_reduction > 0.0 && self.resolution_reduction <= 1.0) {
            return Err(IngestError::InvalidParams(format!(
                "resolution_reduction {} outside (0, 1]",
                self.resolution_reduction
            )));
        }
        if self.background_sample_stride == 0 {
            return Err(IngestError::InvalidParams(
                "background_sample_stride must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Pixel coordinate. Ordering is row-major (y first).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub y: u16,
    pub x: u16,
}

impl Pixel {
    pub fn new(x: u16, y: u16) -> Self {
        Self { y, x }
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        (self.x1 - self.x0) as usize + 1
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0) as usize + 1
    }

    pub fn diagonal(&self) -> f64 {
        ((self.width().pow(2) + self.height().pow(2)) as f64).sqrt()
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x <= self.x1 as f64 && y >= self.y0 as f64 && y <= self.y1 as f64
    }
}

/// A 4-connected set of accepted pixels from one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub frame: usize,
    /// Sorted row-major, no duplicates.
    pub pixels: Vec<Pixel>,
    pub centroid: (f64, f64),
    pub bbox: BoundingBox,
    /// Crop around the blob with everything outside its 5x5 dilation zeroed.
    pub image: MaskedImage,
}

impl Blob {
    /// Builds a blob from its pixel set; `pixels` need not be sorted.
    pub fn new(frame: usize, mut pixels: Vec<Pixel>, image: MaskedImage) -> Self {
        assert!(!pixels.is_empty(), "blob without pixels");
        pixels.sort_unstable();
        pixels.dedup();
        let (mut sx, mut sy) = (0.0, 0.0);
        let mut bbox = BoundingBox {
            x0: u16::MAX,
            y0: u16::MAX,
            x1: 0,
            y1: 0,
        };
        for p in &pixels {
            sx += p.x as f64;
            sy += p.y as f64;
            bbox.x0 = bbox.x0.min(p.x);
            bbox.y0 = bbox.y0.min(p.y);
            bbox.x1 = bbox.x1.max(p.x);
            bbox.y1 = bbox.y1.max(p.y);
        }
        let n = pixels.len() as f64;
        Self {
            frame,
            pixels,
            centroid: (sx / n, sy / n),
            bbox,
            image,
        }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixel_points(&self) -> impl Iterator<Item = (i64, i64)> + Clone + '_ {
        self.pixels.iter().map(|p| (p.x as i64, p.y as i64))
    }
}

/// A loaded video: either raw frames to segment, or blobs that were
/// segmented upstream.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub width: usize,
    pub height: usize,
    pub source: FrameSource,
    pub resolution_reduction: f64,
    frames: Vec<GrayFrame>,
    blob_frames: Option<Vec<Vec<Blob>>>,
}

impl FrameSequence {
    pub fn from_frames(
        frames: Vec<GrayFrame>,
        source: FrameSource,
        resolution_reduction: f64,
    ) -> Result<Self, IngestError> {
        let first = frames.first().ok_or(IngestError::Empty)?;
        let (width, height) = (first.width, first.height);
        for (index, f) in frames.iter().enumerate() {
            if f.width != width || f.height != height {
                return Err(IngestError::InconsistentDimensions {
                    index,
                    got_w: f.width,
                    got_h: f.height,
                    want_w: width,
                    want_h: height,
                });
            }
        }
        Ok(Self {
            width,
            height,
            source,
            resolution_reduction,
            frames,
            blob_frames: None,
        })
    }

    /// A pre-segmented sequence; segmentation is bypassed for it.
    pub fn from_blobs(width: usize, height: usize, blob_frames: Vec<Vec<Blob>>) -> Self {
        Self {
            width,
            height,
            source: FrameSource::BlobStream,
            resolution_reduction: 1.0,
            frames: Vec::new(),
            blob_frames: Some(blob_frames),
        }
    }

    pub fn frame_count(&self) -> usize {
        match &self.blob_frames {
            Some(b) => b.len(),
            None => self.frames.len(),
        }
    }

    /// Pixel data for `index`; `None` for blob streams.
    pub fn frame(&self, index: usize) -> Option<&GrayFrame> {
        self.frames.get(index)
    }

    pub fn frames(&self) -> &[GrayFrame] {
        &self.frames
    }

    pub fn presegmented(&self) -> Option<&[Vec<Blob>]> {
        self.blob_frames.as_deref()
    }

    pub fn into_presegmented(self) -> Option<Vec<Vec<Blob>>> {
        self.blob_frames
    }

    /// Mean intensity over all frames, the target of per-frame normalisation.
    pub fn mean_intensity(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(GrayFrame::mean).sum::<f64>() / self.frames.len() as f64
    }

    /// Segments every frame (or returns the stored blobs of a blob stream).
    pub fn segment_all(&self, params: &SegmentationParams) -> Result<Vec<Vec<Blob>>, IngestError> {
        if let Some(b) = &self.blob_frames {
            return Ok(b.clone());
        }
        params.validate()?;
        let background = if params.subtract_background {
            Some(compute_background(self, params.background_sample_stride)?)
        } else {
            None
        };
        let ctx = SegmentationContext {
            reference_mean: self.mean_intensity(),
            background: background.as_ref(),
        };
        Ok((0..self.frames.len())
            .map(|i| segment_frame(&self.frames[i], i, params, &ctx))
            .collect())
    }
}

/// Loads a PGM directory, a raw `FTRK` file, or a blob-stream JSON-lines file.
pub fn load_frame_sequence(
    path: &Path,
    params: &SegmentationParams,
) -> Result<FrameSequence, IngestError> {
    params.validate()?;
    let factor = params.resolution_reduction;
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| IngestError::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(IngestError::Empty);
        }
        let frames = entries
            .iter()
            .map(|p| read_pgm(p).map(|f| f.downsample(factor)))
            .collect::<Result<Vec<_>, _>>()?;
        return FrameSequence::from_frames(frames, FrameSource::PgmDirectory, factor);
    }
    let head = {
        use std::io::Read;
        let mut buf = [0u8; 4];
        let mut f = std::fs::File::open(path).map_err(|e| IngestError::io(path, e))?;
        let n = f.read(&mut buf).map_err(|e| IngestError::io(path, e))?;
        buf[..n].to_vec()
    };
    if head.as_slice() == RAW_MAGIC {
        let frames = read_raw(path)?
            .into_iter()
            .map(|f| f.downsample(factor))
            .collect();
        FrameSequence::from_frames(frames, FrameSource::RawFile, factor)
    } else if head.first() == Some(&b'{') {
        if factor != 1.0 {
            return Err(IngestError::Unsupported {
                path: path.to_path_buf(),
                reason: "resolution reduction cannot be applied to a blob stream".into(),
            });
        }
        let (w, h, blobs) = read_blob_stream(path)?;
        Ok(FrameSequence::from_blobs(w, h, blobs))
    } else if head.starts_with(b"P") {
        let frame = read_pgm(path)?.downsample(factor);
        FrameSequence::from_frames(vec![frame], FrameSource::PgmDirectory, factor)
    } else {
        Err(IngestError::Unsupported {
            path: path.to_path_buf(),
            reason: "not a PGM directory, FTRK raw file or blob stream".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_roi_contains_interior_only() {
        let roi = Roi::Polygon {
            vertices: vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]],
        };
        assert!(roi.contains(5, 5));
        assert!(!roi.contains(11, 5));
    }

    #[test]
    fn params_reject_inverted_ranges() {
        let p = SegmentationParams {
            min_intensity: 10,
            max_intensity: 5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = SegmentationParams {
            min_area: 10,
            max_area: 5,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let frames = vec![GrayFrame::filled(4, 4, 0), GrayFrame::filled(5, 4, 0)];
        let err = FrameSequence::from_frames(frames, FrameSource::PgmDirectory, 1.0).unwrap_err();
        assert!(matches!(err, IngestError::InconsistentDimensions { index: 1, .. }));
    }

    #[test]
    fn downsample_halves_dimensions() {
        let f = GrayFrame::filled(8, 6, 50);
        let d = f.downsample(0.5);
        assert_eq!((d.width, d.height), (4, 3));
        assert!(d.data.iter().all(|&v| v == 50));
    }

    #[test]
    fn blob_centroid_inside_bbox() {
        let px = vec![Pixel::new(3, 1), Pixel::new(1, 1), Pixel::new(2, 2)];
        let b = Blob::new(0, px, MaskedImage::empty());
        assert_eq!(b.pixels[0], Pixel::new(1, 1));
        assert_eq!(b.area(), 3);
        assert!(b.bbox.contains(b.centroid.0, b.centroid.1));
        assert_eq!((b.bbox.width(), b.bbox.height()), (3, 2));
    }
}
