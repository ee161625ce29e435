use std::io::{Read, Write};
use std::path::Path;

use super::{ClassifierError, ClassifierModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FTCM";
const VERSION: u32 = 1;

/// Layout: magic, version, input_dim, hidden, n_classes (u32 LE), then
/// w1, b1, w2, b2 as f64 LE.
pub fn write_checkpoint<W: Write>(model: &ClassifierModel, mut w: W) -> Result<(), ClassifierError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for v in [VERSION, model.input_dim as u32, model.hidden as u32, model.n_classes as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for p in [&model.w1, &model.b1, &model.w2, &model.b2] {
        for x in p.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ClassifierModel, ClassifierError> {
    let mut head = [0u8; 20];
    r.read_exact(&mut head)
        .map_err(|_| ClassifierError::BadCheckpoint("truncated header".into()))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(ClassifierError::BadCheckpoint("bad magic".into()));
    }
    let u = |i: usize| u32::from_le_bytes(head[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if u(0) != VERSION as usize {
        return Err(ClassifierError::BadCheckpoint(format!("unsupported version {}", u(0))));
    }
    let (input_dim, hidden, n_classes) = (u(1), u(2), u(3));
    let mut read_vec = |n: usize| -> Result<Vec<f64>, ClassifierError> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)
            .map_err(|_| ClassifierError::BadCheckpoint("truncated parameters".into()))?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    Ok(ClassifierModel {
        input_dim,
        hidden,
        n_classes,
        w1: read_vec(hidden * input_dim)?,
        b1: read_vec(hidden)?,
        w2: read_vec(n_classes * hidden)?,
        b2: read_vec(n_classes)?,
    })
}

pub fn save_checkpoint(model: &ClassifierModel, path: &Path) -> Result<(), ClassifierError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierModel, ClassifierError> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}
