//! Binary window-cache file: header (magic `ALWIN1`, u32 channel count,
//! u32 window length, u64 example count, little-endian), then per example
//! the channel-major f32 payload, a label byte (0=Low, 1=Medium, 2=High),
//! and a u16 subject index.

use std::io::{BufReader, Read};
use std::path::Path;

use thiserror::Error;

use crate::pamap2::IntensityLevel;
use crate::preprocess::{WindowExample, WindowSet};

const MAGIC: &[u8; 6] = b"ALWIN1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("cache format: {0}")]
    Format(String),
}

/// The exact byte image `write_cache` produces, useful for hashing a set.
pub fn encode_cache(set: &WindowSet) -> Vec<u8> {
    let per_example = set.channels() * set.window_len() * 4 + 3;
    let mut out = Vec::with_capacity(MAGIC.len() + 16 + set.len() * per_example);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(set.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(set.window_len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for e in &set.examples {
        for v in &e.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.push(e.label.index() as u8);
        out.extend_from_slice(&e.subject_id.to_le_bytes());
    }
    out
}

pub fn write_cache(path: &Path, set: &WindowSet) -> Result<(), CacheError> {
    std::fs::write(path, encode_cache(set)).map_err(|e| annotate(path, e))?;
    Ok(())
}

fn annotate(path: &Path, e: std::io::Error) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CacheError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| CacheError::Format("truncated cache file".into()))?;
    Ok(buf)
}

pub fn read_cache(path: &Path) -> Result<WindowSet, CacheError> {
    let file = std::fs::File::open(path).map_err(|e| annotate(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_array::<6>(&mut r)?;
    if &magic != MAGIC {
        return Err(CacheError::Format("bad magic (not a window cache)".into()));
    }
    let channels = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let window_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if channels == 0 || window_len == 0 {
        return Err(CacheError::Format("zero channels or window length".into()));
    }
    let mut set = WindowSet::new(channels, window_len);
    let mut payload = vec![0u8; channels * window_len * 4];
    for _ in 0..count {
        r.read_exact(&mut payload)
            .map_err(|_| CacheError::Format("truncated cache file".into()))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let label_byte = read_array::<1>(&mut r)?[0];
        let label = IntensityLevel::from_index(label_byte as usize)
            .ok_or_else(|| CacheError::Format(format!("label byte {label_byte} out of range")))?;
        let subject_id = u16::from_le_bytes(read_array(&mut r)?);
        set.push(WindowExample {
            data,
            label,
            subject_id,
        })
        .expect("payload length fixed by construction");
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CacheError::Format(
            "trailing bytes after the declared example count".into(),
        ));
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> WindowSet {
        let mut set = WindowSet::new(2, 3);
        for (i, label) in IntensityLevel::ALL.iter().enumerate() {
            set.push(WindowExample {
                // Exactly representable in f32 so the round trip is lossless.
                data: (0..6).map(|j| (i * 6 + j) as f64 * 0.5 - 1.0).collect(),
                label: *label,
                subject_id: 100 + i as u16,
            })
            .unwrap();
        }
        set
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let set = sample_set();
        write_cache(&path, &set).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!(back.channels(), 2);
        assert_eq!(back.window_len(), 3);
        assert_eq!(back.examples, set.examples);
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        write_cache(&path, &WindowSet::new(4, 7)).unwrap();
        let back = read_cache(&path).unwrap();
        assert_eq!((back.channels(), back.window_len(), back.len()), (4, 7, 0));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let set = sample_set();
        write_cache(&path, &set).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, b"NOTWIN").unwrap();
        assert!(matches!(read_cache(&path), Err(CacheError::Format(_))));

        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(read_cache(&path).is_err());

        let mut extra = bytes.clone();
        extra.push(0);
        std::fs::write(&path, &extra).unwrap();
        assert!(read_cache(&path).is_err());

        // Label byte out of range.
        let label_offset = 6 + 4 + 4 + 8 + 6 * 4;
        let mut bad = bytes.clone();
        bad[label_offset] = 9;
        std::fs::write(&path, &bad).unwrap();
        let err = read_cache(&path).unwrap_err();
        assert!(err.to_string().contains("label byte"), "got {err}");
    }
}
