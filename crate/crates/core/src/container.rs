//! Binary file framing shared by datasets and checkpoints, and the dataset
//! file itself.
//!
//! Every file starts with a four-byte magic, a little-endian `u32` format
//! version, a little-endian `u64` manifest length and a UTF-8 JSON manifest.
//! Fixed-width little-endian arrays follow. The layouts are described in
//! `docs/formats.md`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EncodedDataset, EncodedWindow, Stream, VocabSpec};

pub const DATASET_MAGIC: [u8; 4] = *b"KTDS";
pub const DATASET_VERSION: u32 = 1;

/// Manifests above this size are rejected as corrupt.
const MAX_MANIFEST_BYTES: u64 = 1 << 30;

pub(crate) fn write_header<W: Write>(w: &mut W, magic: [u8; 4], version: u32, manifest: &[u8]) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(manifest)?;
    Ok(())
}

/// Reads and checks the magic and version, returning the manifest bytes.
pub(crate) fn read_header<R: Read>(r: &mut R, magic: [u8; 4], version: u32) -> Result<Vec<u8>> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(truncated)?;
    if found != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(&magic)
        )));
    }
    let v = read_u32(r)?;
    if v != version {
        return Err(Error::Format(format!("unsupported format version {v}, expected {version}")));
    }
    let len = read_u64(r)?;
    if len > MAX_MANIFEST_BYTES {
        return Err(Error::Format(format!("manifest length {len} is implausible")));
    }
    let mut manifest = vec![0u8; len as usize];
    r.read_exact(&mut manifest).map_err(truncated)?;
    Ok(manifest)
}

pub(crate) fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after the last section".into())),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    vocab: VocabSpec,
    max_seq: usize,
    stride: usize,
    n_users: usize,
    n_events: usize,
    n_windows: usize,
    question_ids: Vec<u64>,
}

pub fn write_dataset<W: Write>(w: &mut W, dataset: &EncodedDataset) -> Result<()> {
    let manifest = DatasetManifest {
        vocab: dataset.vocab,
        max_seq: dataset.max_seq,
        stride: dataset.stride,
        n_users: dataset.n_users,
        n_events: dataset.n_events,
        n_windows: dataset.windows.len(),
        question_ids: dataset.question_ids.clone(),
    };
    write_header(w, DATASET_MAGIC, DATASET_VERSION, &serde_json::to_vec(&manifest)?)?;
    let windows = &dataset.windows;
    let mut buf = Vec::with_capacity(windows.len() * 8);
    for win in windows {
        buf.extend_from_slice(&win.user_id.to_le_bytes());
    }
    for win in windows {
        buf.extend_from_slice(&win.first_event.to_le_bytes());
    }
    w.write_all(&buf)?;
    for s in Stream::ALL {
        buf.clear();
        for win in windows {
            if win.len() != dataset.max_seq {
                return Err(Error::Invalid(format!("window of length {} in dataset with max_seq {}", win.len(), dataset.max_seq)));
            }
            for id in win.stream(s) {
                buf.extend_from_slice(&id.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    buf.clear();
    for win in windows {
        buf.extend_from_slice(&win.target);
    }
    w.write_all(&buf)?;
    buf.clear();
    for win in windows {
        buf.extend(win.valid.iter().map(|&v| u8::from(v)));
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<EncodedDataset> {
    let manifest: DatasetManifest = serde_json::from_slice(&read_header(r, DATASET_MAGIC, DATASET_VERSION)?)?;
    let (n, len) = (manifest.n_windows, manifest.max_seq);
    let cells = n
        .checked_mul(len)
        .ok_or_else(|| Error::Format("window count overflows".into()))?;

    let users = read_bytes(r, n * 8)?;
    let firsts = read_bytes(r, n * 4)?;
    let mut windows: Vec<EncodedWindow> = (0..n)
        .map(|i| {
            let user_id = u64::from_le_bytes(users[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
            let first = u32::from_le_bytes(firsts[i * 4..i * 4 + 4].try_into().expect("4 bytes"));
            EncodedWindow::padded(&manifest.vocab, len, user_id, first)
        })
        .collect();
    for s in Stream::ALL {
        let bytes = read_bytes(r, cells * 4)?;
        for (i, win) in windows.iter_mut().enumerate() {
            let dst = win.stream_mut(s);
            for (k, id) in dst.iter_mut().enumerate() {
                let o = (i * len + k) * 4;
                *id = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
            }
        }
    }
    let targets = read_bytes(r, cells)?;
    let valid = read_bytes(r, cells)?;
    for (i, win) in windows.iter_mut().enumerate() {
        win.target = targets[i * len..(i + 1) * len].to_vec();
        win.valid = valid[i * len..(i + 1) * len]
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!("valid flag {other} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
    }
    expect_eof(r)?;

    let dataset = EncodedDataset {
        vocab: manifest.vocab,
        max_seq: manifest.max_seq,
        stride: manifest.stride,
        question_ids: manifest.question_ids,
        n_users: manifest.n_users,
        n_events: manifest.n_events,
        windows,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(path: &Path, dataset: &EncodedDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(&mut w, dataset)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<EncodedDataset> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EncodedDataset {
        let vocab = VocabSpec::new(3);
        let mut w = EncodedWindow::padded(&vocab, 4, 9, 0);
        w.question[3] = 2;
        w.part[3] = 6;
        w.explanation[3] = 0;
        w.response[3] = 0;
        w.elapsed[3] = 17;
        w.lag_s[3] = 0;
        w.lag_m[3] = 0;
        w.lag_d[3] = 0;
        w.target[3] = 1;
        w.valid[3] = true;
        EncodedDataset {
            vocab,
            max_seq: 4,
            stride: 4,
            question_ids: vec![10, 20, 30],
            n_users: 1,
            n_events: 1,
            windows: vec![w],
        }
    }

    #[test]
    fn round_trip() {
        let ds = sample();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        assert_eq!(read_dataset(&mut bytes.as_slice()).unwrap(), ds);
    }

    #[test]
    fn corruption_is_reported() {
        let ds = sample();
        let mut bytes = Vec::new();
        write_dataset(&mut bytes, &ds).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(Error::Format(_))));
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_dataset(&mut &cut[..]), Err(Error::Format(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(read_dataset(&mut long.as_slice()), Err(Error::Format(_))));
    }
}
