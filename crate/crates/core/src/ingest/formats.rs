//! On-disk frame formats: binary PGM (P5), the `FTRK` raw container and
//! the JSON-lines blob stream.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Blob, GrayFrame, IngestError, Pixel};
use crate::imageprep::{masked_image_geometry, MaskedImage};

pub const RAW_MAGIC: &[u8; 4] = b"FTRK";

pub fn read_pgm(path: &Path) -> Result<GrayFrame, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::io(path, e))?;
    parse_pgm(&bytes).map_err(|reason| {
        if reason.starts_with("color") || reason.starts_with("16-bit") || reason.starts_with("ASCII") {
            IngestError::Unsupported {
                path: path.to_path_buf(),
                reason,
            }
        } else {
            IngestError::malformed(path, reason)
        }
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<GrayFrame, String> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Option<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos).ok_or("missing magic")?;
    match magic.as_str() {
        "P5" => {}
        "P6" | "P3" => return Err("color PNM input is not supported".into()),
        "P2" => return Err("ASCII PGM is not supported".into()),
        other => return Err(format!("bad magic {other:?}")),
    }
    let mut num = |name: &str| -> Result<usize, String> {
        token(&mut pos)
            .ok_or_else(|| format!("missing {name}"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {name}: {e}"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval > 255 {
        return Err("16-bit PGM is not supported".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    Ok(GrayFrame::new(width, height, bytes[pos..pos + need].to_vec()))
}

pub fn write_pgm(path: &Path, frame: &GrayFrame) -> Result<(), IngestError> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| IngestError::io(path, e))?);
    write!(f, "P5\n{} {}\n255\n", frame.width, frame.height)
        .and_then(|_| f.write_all(&frame.data))
        .and_then(|_| f.flush())
        .map_err(|e| IngestError::io(path, e))
}

/// Writes `frame_000000.pgm`, `frame_000001.pgm`, ... into `dir`.
pub fn write_pgm_directory(dir: &Path, frames: &[GrayFrame]) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_pgm(&dir.join(format!("frame_{i:06}.pgm")), f)?;
    }
    Ok(())
}

/// Reads an `FTRK` container: 16-byte little-endian header (magic,
/// frame_count, width, height) followed by the frames back to back.
pub fn read_raw(path: &Path) -> Result<Vec<GrayFrame>, IngestError> {
    let mut f = BufReader::new(File::open(path).map_err(|e| IngestError::io(path, e))?);
    let mut header = [0u8; 16];
    f.read_exact(&mut header)
        .map_err(|_| IngestError::malformed(path, "header shorter than 16 bytes"))?;
    if &header[0..4] != RAW_MAGIC {
        return Err(IngestError::malformed(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
    let (count, width, height) = (word(4), word(8), word(12));
    if count == 0 {
        return Err(IngestError::Empty);
    }
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let mut data = vec![0u8; width * height];
        f.read_exact(&mut data)
            .map_err(|_| IngestError::malformed(path, format!("frame {i} truncated")))?;
        frames.push(GrayFrame::new(width, height, data));
    }
    Ok(frames)
}

pub fn write_raw(path: &Path, frames: &[GrayFrame]) -> Result<(), IngestError> {
    let first = frames.first().ok_or(IngestError::Empty)?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| IngestError::io(path, e))?);
    let mut header = Vec::with_capacity(16);
    header.extend_from_slice(RAW_MAGIC);
    for v in [frames.len(), first.width, first.height] {
        header.extend_from_slice(&(v as u32).to_le_bytes());
    }
    f.write_all(&header).map_err(|e| IngestError::io(path, e))?;
    for fr in frames {
        f.write_all(&fr.data).map_err(|e| IngestError::io(path, e))?;
    }
    f.flush().map_err(|e| IngestError::io(path, e))
}

/// One line of a blob stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobStreamRecord {
    pub frame: usize,
    pub blobs: Vec<BlobStreamBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobStreamBlob {
    pub pixels: Vec<[u16; 2]>,
    /// Base64 of the masked crop (see [`MaskedImage`]); its geometry is
    /// implied by the pixel set.
    pub image: String,
}

pub fn write_blob_stream(path: &Path, frames: &[Vec<Blob>]) -> Result<(), IngestError> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| IngestError::io(path, e))?);
    for (k, blobs) in frames.iter().enumerate() {
        let rec = BlobStreamRecord {
            frame: k,
            blobs: blobs
                .iter()
                .map(|b| BlobStreamBlob {
                    pixels: b.pixels.iter().map(|p| [p.x, p.y]).collect(),
                    image: BASE64.encode(&b.image.data),
                })
                .collect(),
        };
        serde_json::to_writer(&mut f, &rec)
            .map_err(|e| IngestError::malformed(path, e.to_string()))?;
        f.write_all(b"\n").map_err(|e| IngestError::io(path, e))?;
    }
    f.flush().map_err(|e| IngestError::io(path, e))
}

/// Reads a blob stream; returns `(width, height, blobs per frame)` where the
/// dimensions are the smallest that contain every pixel.
pub fn read_blob_stream(path: &Path) -> Result<(usize, usize, Vec<Vec<Blob>>), IngestError> {
    let f = BufReader::new(File::open(path).map_err(|e| IngestError::io(path, e))?);
    let mut frames = Vec::new();
    let (mut w, mut h) = (0usize, 0usize);
    for (lineno, line) in f.lines().enumerate() {
        let line = line.map_err(|e| IngestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BlobStreamRecord = serde_json::from_str(&line)
            .map_err(|e| IngestError::malformed(path, format!("line {}: {e}", lineno + 1)))?;
        if rec.frame != frames.len() {
            return Err(IngestError::malformed(
                path,
                format!("line {}: frame {} out of order, expected {}", lineno + 1, rec.frame, frames.len()),
            ));
        }
        let mut blobs = Vec::with_capacity(rec.blobs.len());
        for (j, b) in rec.blobs.into_iter().enumerate() {
            if b.pixels.is_empty() {
                return Err(IngestError::malformed(
                    path,
                    format!("frame {}: blob {j} has no pixels", rec.frame),
                ));
            }
            let pixels: Vec<Pixel> = b.pixels.iter().map(|&[x, y]| Pixel::new(x, y)).collect();
            for p in &pixels {
                w = w.max(p.x as usize + 1);
                h = h.max(p.y as usize + 1);
            }
            let data = BASE64.decode(b.image.as_bytes()).map_err(|e| {
                IngestError::malformed(path, format!("frame {}: blob {j}: {e}", rec.frame))
            })?;
            let (ox, oy, iw, ih) = masked_image_geometry(&pixels);
            if data.len() != iw * ih {
                return Err(IngestError::malformed(
                    path,
                    format!(
                        "frame {}: blob {j}: image has {} bytes, expected {}x{}",
                        rec.frame,
                        data.len(),
                        iw,
                        ih
                    ),
                ));
            }
            let image = MaskedImage {
                origin_x: ox,
                origin_y: oy,
                width: iw,
                height: ih,
                data,
            };
            blobs.push(Blob::new(rec.frame, pixels, image));
        }
        frames.push(blobs);
    }
    if frames.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok((w, h, frames))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageprep::extract_masked_image;
    use crate::ingest::{load_frame_sequence, FrameSource, SegmentationParams};

    #[test]
    fn pgm_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<GrayFrame> = (0..3)
            .map(|i| GrayFrame::new(4, 2, (0..8).map(|v| v * 10 + i).collect()))
            .collect();
        write_pgm_directory(dir.path(), &frames).unwrap();
        let seq = load_frame_sequence(dir.path(), &SegmentationParams::default()).unwrap();
        assert_eq!(seq.frame_count(), 3);
        assert_eq!(seq.source, FrameSource::PgmDirectory);
        assert_eq!(seq.frames(), frames.as_slice());
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[3, 4]);
        assert_eq!(parse_pgm(&bytes).unwrap().data, vec![3, 4]);
    }

    #[test]
    fn color_pnm_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        std::fs::write(&p, b"P6\n1 1\n255\n\x01\x02\x03").unwrap();
        assert!(matches!(read_pgm(&p), Err(IngestError::Unsupported { .. })));
    }

    #[test]
    fn raw_file_header_declares_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        let frames = vec![GrayFrame::filled(32, 32, 9); 10];
        write_raw(&p, &frames).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"FTRK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 10);
        assert_eq!(bytes.len(), 16 + 10 * 32 * 32);
        let seq = load_frame_sequence(&p, &SegmentationParams::default()).unwrap();
        assert_eq!(seq.frame_count(), 10);
        assert_eq!((seq.width, seq.height), (32, 32));
    }

    #[test]
    fn truncated_raw_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.raw");
        write_raw(&p, &vec![GrayFrame::filled(4, 4, 0); 2]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_raw(&p), Err(IngestError::Malformed { .. })));
    }

    #[test]
    fn unknown_file_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        std::fs::write(&p, b"\x00\x01garbage").unwrap();
        assert!(matches!(
            load_frame_sequence(&p, &SegmentationParams::default()),
            Err(IngestError::Unsupported { .. })
        ));
    }

    #[test]
    fn blob_stream_round_trip() {
        let mut frame = GrayFrame::filled(10, 10, 200);
        frame.set(0, 0, 5);
        frame.set(1, 0, 6);
        frame.set(7, 7, 7);
        let mk = |f: usize, px: Vec<Pixel>| {
            let img = extract_masked_image(&frame, &px);
            Blob::new(f, px, img)
        };
        let frames = vec![
            vec![mk(0, vec![Pixel::new(0, 0), Pixel::new(1, 0)]), mk(0, vec![Pixel::new(7, 7)])],
            vec![],
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("blobs.jsonl");
        write_blob_stream(&p, &frames).unwrap();
        let seq = load_frame_sequence(&p, &SegmentationParams::default()).unwrap();
        assert_eq!(seq.source, FrameSource::BlobStream);
        assert_eq!(seq.frame_count(), 2);
        assert_eq!(seq.presegmented().unwrap(), frames.as_slice());
        assert_eq!((seq.width, seq.height), (8, 8));
    }
}
