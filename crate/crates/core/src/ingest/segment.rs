use super::{Blob, FrameSequence, GrayFrame, IngestError, Pixel, SegmentationParams};
use crate::imageprep::extract_masked_image;
use crate::morphology::Mask;

/// Per-pixel mean of a subsample of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Background {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Averages frames `0, stride, 2*stride, ...`.
pub fn compute_background(seq: &FrameSequence, stride: usize) -> Result<Background, IngestError> {
    if stride == 0 {
        return Err(IngestError::InvalidParams("stride must be at least 1".into()));
    }
    let frames = seq.frames();
    if frames.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut acc = vec![0.0; seq.width * seq.height];
    let mut n = 0usize;
    for f in frames.iter().step_by(stride) {
        for (a, &v) in acc.iter_mut().zip(&f.data) {
            *a += v as f64;
        }
        n += 1;
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(Background {
        width: seq.width,
        height: seq.height,
        values: acc,
    })
}

/// Sequence-level inputs shared by every frame's segmentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentationContext<'a> {
    /// Each frame is rescaled so its mean intensity equals this value.
    /// Zero disables normalisation.
    pub reference_mean: f64,
    pub background: Option<&'a Background>,
}

/// Thresholds one frame and labels 4-connected components.
///
/// Pixel value = frame value scaled by `reference_mean / frame_mean`
/// (clamped to [0, 255]), then `|value - background|` when a background is
/// given. Accepted pixels lie inside the ROI with value in
/// `[min_intensity, max_intensity]`. Components outside `[min_area,
/// max_area]` are dropped; the rest are returned in scan order of their
/// first pixel.
pub fn segment_frame(
    frame: &GrayFrame,
    frame_index: usize,
    params: &SegmentationParams,
    ctx: &SegmentationContext<'_>,
) -> Vec<Blob> {
    let frame_mean = frame.mean();
    let scale = if ctx.reference_mean > 0.0 && frame_mean > 0.0 {
        ctx.reference_mean / frame_mean
    } else {
        1.0
    };
    let lo = params.min_intensity as f64;
    let hi = params.max_intensity as f64;
    let mut mask = Mask::new(0, 0, frame.width, frame.height);
    for y in 0..frame.height {
        for x in 0..frame.width {
            if let Some(roi) = &params.roi {
                if !roi.contains(x, y) {
                    continue;
                }
            }
            let mut v = (frame.get(x, y) as f64 * scale).clamp(0.0, 255.0);
            if let Some(bg) = ctx.background {
                v = (v - bg.get(x, y)).abs();
            }
            if v >= lo && v <= hi {
                mask.data[y * frame.width + x] = true;
            }
        }
    }
    mask.components()
        .into_iter()
        .filter(|c| c.len() >= params.min_area && c.len() <= params.max_area)
        .map(|c| {
            let pixels: Vec<Pixel> = c
                .into_iter()
                .map(|(x, y)| Pixel::new(x as u16, y as u16))
                .collect();
            let image = extract_masked_image(frame, &pixels);
            Blob::new(frame_index, pixels, image)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FrameSource, Roi};

    fn frame_with_dark(width: usize, height: usize, dark: &[(usize, usize)]) -> GrayFrame {
        let mut f = GrayFrame::filled(width, height, 200);
        for &(x, y) in dark {
            f.set(x, y, 10);
        }
        f
    }

    fn params(min_area: usize) -> SegmentationParams {
        SegmentationParams {
            min_intensity: 0,
            max_intensity: 100,
            min_area,
            max_area: 1000,
            ..Default::default()
        }
    }

    #[test]
    fn background_is_mean_of_sampled_frames() {
        let mut a = GrayFrame::filled(2, 2, 0);
        let mut b = GrayFrame::filled(2, 2, 0);
        a.set(0, 0, 10);
        b.set(0, 0, 30);
        let seq = FrameSequence::from_frames(vec![a.clone(), b], FrameSource::RawFile, 1.0).unwrap();
        assert_eq!(compute_background(&seq, 1).unwrap().get(0, 0), 20.0);
        // stride 2 only samples frame 0
        assert_eq!(compute_background(&seq, 2).unwrap().get(0, 0), 10.0);
        let single = FrameSequence::from_frames(vec![a], FrameSource::RawFile, 1.0).unwrap();
        assert_eq!(compute_background(&single, 1).unwrap().get(0, 0), 10.0);
    }

    #[test]
    fn background_of_constant_sequence_equals_frame() {
        let f = GrayFrame::new(2, 1, vec![7, 9]);
        let seq = FrameSequence::from_frames(vec![f.clone(); 5], FrameSource::RawFile, 1.0).unwrap();
        assert_eq!(compute_background(&seq, 2).unwrap().values, vec![7.0, 9.0]);
    }

    #[test]
    fn two_adjacent_dark_pixels_form_one_blob() {
        let f = frame_with_dark(5, 5, &[(1, 2), (2, 2)]);
        let blobs = segment_frame(&f, 0, &params(1), &SegmentationContext::default());
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area(), 2);
        assert_eq!(blobs[0].centroid, (1.5, 2.0));
        assert!(segment_frame(&f, 0, &params(3), &SegmentationContext::default()).is_empty());
    }

    #[test]
    fn roi_excludes_outside_pixels() {
        let f = frame_with_dark(5, 5, &[(4, 4)]);
        let p = SegmentationParams {
            roi: Some(Roi::Polygon {
                vertices: vec![[0.0, 0.0], [2.5, 0.0], [2.5, 2.5], [0.0, 2.5]],
            }),
            ..params(1)
        };
        assert!(segment_frame(&f, 0, &p, &SegmentationContext::default()).is_empty());
    }

    #[test]
    fn blobs_are_ordered_by_first_pixel() {
        let f = frame_with_dark(6, 6, &[(4, 0), (0, 3), (1, 3)]);
        let blobs = segment_frame(&f, 3, &params(1), &SegmentationContext::default());
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].pixels[0], Pixel::new(4, 0));
        assert_eq!(blobs[1].area(), 2);
        assert!(blobs.iter().all(|b| b.frame == 3));
    }

    #[test]
    fn background_subtraction_finds_light_objects() {
        let bg_frame = GrayFrame::filled(4, 4, 100);
        let mut f = bg_frame.clone();
        f.set(1, 1, 220);
        let seq = FrameSequence::from_frames(
            vec![bg_frame.clone(), bg_frame.clone(), bg_frame, f.clone()],
            FrameSource::RawFile,
            1.0,
        )
        .unwrap();
        let bg = compute_background(&seq, 1).unwrap();
        let p = SegmentationParams {
            min_intensity: 50,
            max_intensity: 255,
            ..params(1)
        };
        let ctx = SegmentationContext {
            reference_mean: 0.0,
            background: Some(&bg),
        };
        let blobs = segment_frame(&f, 0, &p, &ctx);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].pixels, vec![Pixel::new(1, 1)]);
    }

    #[test]
    fn normalisation_makes_segmentation_scale_invariant() {
        let mut f = GrayFrame::filled(8, 8, 100);
        for &(x, y) in &[(2, 2), (3, 2), (6, 6)] {
            f.set(x, y, 30);
        }
        let scaled = GrayFrame::new(8, 8, f.data.iter().map(|&v| v * 2).collect());
        let p = SegmentationParams {
            min_intensity: 0,
            max_intensity: 60,
            ..params(1)
        };
        let ctx = SegmentationContext {
            reference_mean: 100.0,
            background: None,
        };
        let a = segment_frame(&f, 0, &p, &ctx);
        let b = segment_frame(&scaled, 0, &p, &ctx);
        let pa: Vec<_> = a.iter().map(|b| b.pixels.clone()).collect();
        let pb: Vec<_> = b.iter().map(|b| b.pixels.clone()).collect();
        assert_eq!(pa, pb);
        assert_eq!(pa.len(), 2);
    }
}
