use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blobgraph::{BlobStore, Fragment};
use crate::cascade::ProtocolStatus;

use super::PostprocError;

/// Centroid of every identity in every frame; missing entries are NaN.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub n_frames: usize,
    pub n_animals: usize,
    data: Vec<[f64; 2]>,
}

impl PartialEq for Trajectories {
    /// Missing entries compare equal to each other.
    fn eq(&self, o: &Self) -> bool {
        self.n_frames == o.n_frames
            && self.n_animals == o.n_animals
            && self
                .data
                .iter()
                .zip(&o.data)
                .all(|(a, b)| (a[0].is_nan() && b[0].is_nan()) || a == b)
    }
}

impl Trajectories {
    pub fn new(n_frames: usize, n_animals: usize) -> Self {
        Self {
            n_frames,
            n_animals,
            data: vec![[f64::NAN; 2]; n_frames * n_animals],
        }
    }

    pub fn get(&self, frame: usize, identity: usize) -> Option<(f64, f64)> {
        let [x, y] = self.data[frame * self.n_animals + identity];
        (!x.is_nan() && !y.is_nan()).then_some((x, y))
    }

    pub fn set(&mut self, frame: usize, identity: usize, pos: (f64, f64)) {
        self.data[frame * self.n_animals + identity] = [pos.0, pos.1];
    }

    pub fn missing_count(&self) -> usize {
        self.data.iter().filter(|p| p[0].is_nan()).count()
    }
}

/// Positions of identified individual blobs only.
pub fn individual_trajectories(
    store: &BlobStore,
    fragments: &[Fragment],
    identities: &[Option<usize>],
    n_animals: usize,
) -> Trajectories {
    let mut t = Trajectories::new(store.frame_count(), n_animals);
    for (f, id) in identities.iter().enumerate() {
        let Some(id) = *id else { continue };
        for &b in &fragments[f].blobs {
            let blob = store.blob(b);
            debug_assert!(t.get(blob.frame, id).is_none(), "identity used twice in a frame");
            t.set(blob.frame, id, blob.centroid);
        }
    }
    t
}

/// Fills each identity's gaps: linear interpolation between known
/// positions, the first known position before it, the last one after it.
pub fn interpolate_gaps(t: &mut Trajectories) {
    for id in 0..t.n_animals {
        let known: Vec<usize> = (0..t.n_frames).filter(|&f| t.get(f, id).is_some()).collect();
        let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
            continue;
        };
        let p_first = t.get(first, id).unwrap();
        for f in 0..first {
            t.set(f, id, p_first);
        }
        let p_last = t.get(last, id).unwrap();
        for f in last + 1..t.n_frames {
            t.set(f, id, p_last);
        }
        for w in known.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b == a + 1 {
                continue;
            }
            let (pa, pb) = (t.get(a, id).unwrap(), t.get(b, id).unwrap());
            for f in a + 1..b {
                let s = (f - a) as f64 / (b - a) as f64;
                t.set(f, id, (pa.0 + s * (pb.0 - pa.0), pa.1 + s * (pb.1 - pa.1)));
            }
        }
    }
}

/// `sum P2(F, i) |F| / sum |F|` over identified fragments, `i` the
/// assigned identity. `None` when nothing is identified.
pub fn estimated_accuracy(fragments: &[Fragment], identities: &[Option<usize>], p2: &[Vec<f64>]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for (f, id) in identities.iter().enumerate() {
        if let Some(i) = *id {
            num += p2[f][i] * fragments[f].len() as f64;
            den += fragments[f].len();
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// CSV with header `frame,identity,x,y`; identities are 1-based and missing
/// coordinates are empty fields.
pub fn write_trajectories_csv(t: &Trajectories, path: &Path) -> Result<(), PostprocError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "frame,identity,x,y")?;
    for f in 0..t.n_frames {
        for id in 0..t.n_animals {
            match t.get(f, id) {
                Some((x, y)) => writeln!(w, "{f},{},{x},{y}", id + 1)?,
                None => writeln!(w, "{f},{},,", id + 1)?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectories_csv(path: &Path) -> Result<Trajectories, PostprocError> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<(usize, usize, Option<(f64, f64)>)> = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if k == 0 {
            if line.trim() != "frame,identity,x,y" {
                return Err(PostprocError::Malformed(format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || PostprocError::Malformed(format!("line {}: {line:?}", k + 1));
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let frame: usize = parts[0].parse().map_err(|_| bad())?;
        let id: usize = parts[1].parse().map_err(|_| bad())?;
        if id == 0 {
            return Err(bad());
        }
        let pos = if parts[2].is_empty() {
            None
        } else {
            Some((parts[2].parse().map_err(|_| bad())?, parts[3].parse().map_err(|_| bad())?))
        };
        rows.push((frame, id - 1, pos));
    }
    let n_frames = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let n_animals = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
    let mut t = Trajectories::new(n_frames, n_animals);
    for (f, id, pos) in rows {
        if let Some(p) = pos {
            t.set(f, id, p);
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub estimated_accuracy: f64,
    pub protocol_used: ProtocolStatus,
    pub coverage: f64,
    pub v_max: f64,
    pub warnings: Vec<String>,
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<(), PostprocError> {
    let mut s = serde_json::to_string_pretty(summary).expect("summary serialises");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blobgraph::FragmentKind;

    fn frag(len: usize) -> Fragment {
        Fragment {
            id: 0,
            kind: FragmentKind::Individual,
            blobs: (0..len).collect(),
            start_frame: 0,
            end_frame: len - 1,
        }
    }

    #[test]
    fn estimated_accuracy_examples() {
        let fr = vec![frag(10), frag(10)];
        let p2 = vec![vec![1.0, 0.0], vec![0.1, 0.9]];
        assert!((estimated_accuracy(&fr, &[Some(0), Some(1)], &p2).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(estimated_accuracy(&fr, &[Some(0), None], &p2), Some(1.0));
        assert_eq!(estimated_accuracy(&fr, &[None, None], &p2), None);
    }

    #[test]
    fn gaps_are_filled() {
        let mut t = Trajectories::new(6, 1);
        t.set(1, 0, (0.0, 0.0));
        t.set(4, 0, (3.0, 6.0));
        interpolate_gaps(&mut t);
        assert_eq!(t.get(0, 0), Some((0.0, 0.0)));
        assert_eq!(t.get(2, 0), Some((1.0, 2.0)));
        assert_eq!(t.get(3, 0), Some((2.0, 4.0)));
        assert_eq!(t.get(5, 0), Some((3.0, 6.0)));
        assert_eq!(t.missing_count(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Trajectories::new(3, 2);
        t.set(0, 0, (1.5, 2.25));
        t.set(2, 1, (10.0, 0.1));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_trajectories_csv(&t, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("frame,identity,x,y\n0,1,1.5,2.25\n0,2,,\n"));
        assert_eq!(read_trajectories_csv(&p).unwrap(), t);
    }
}
