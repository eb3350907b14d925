//! Append-only on-disk journal for one sensor table.
//!
//! Layout, one directory per sensor:
//!
//! ```text
//! seg-<index>.log   header: b"OPSJ" u16-le version u16-le reserved
//!                   frames: u32-le payload length, payload (wire-encoded element)
//! ```
//!
//! A segment holds at most `capacity` frames. When the active segment is full
//! a new one is started and every segment older than its predecessor is
//! deleted, so the last `capacity` records always sit in the newest two
//! segments. Recovery keeps complete frames only; a torn tail is truncated.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{EngineError, Result};
use crate::types::StreamElement;
use crate::wire;

pub const MAGIC: &[u8; 4] = b"OPSJ";
pub const JOURNAL_VERSION: u16 = 1;
pub const SEGMENT_HEADER_LEN: u64 = 8;
pub const FRAME_PREFIX_LEN: u64 = 4;

fn io_err(path: &Path, e: std::io::Error) -> EngineError {
    EngineError::invalid_query(format!("journal {}: {e}", path.display()))
}

fn segment_path(dir: &Path, index: u64) -> PathBuf {
    dir.join(format!("seg-{index:010}.log"))
}

fn segment_indices(dir: &Path) -> Result<Vec<u64>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(idx) = name.strip_prefix("seg-").and_then(|r| r.strip_suffix(".log")) {
            if let Ok(i) = idx.parse() {
                out.push(i);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn header() -> [u8; SEGMENT_HEADER_LEN as usize] {
    let mut h = [0u8; SEGMENT_HEADER_LEN as usize];
    h[..4].copy_from_slice(MAGIC);
    h[4..6].copy_from_slice(&JOURNAL_VERSION.to_le_bytes());
    h
}

/// Encodes one element as a journal frame.
pub fn frame(element: &StreamElement) -> Vec<u8> {
    let payload = wire::encode_element(element);
    let mut out = Vec::with_capacity(payload.len() + FRAME_PREFIX_LEN as usize);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses complete frames from a segment's bytes. Returns the elements and
/// the byte length of the valid prefix.
fn parse_segment(bytes: &[u8]) -> (Vec<StreamElement>, usize) {
    if bytes.len() < SEGMENT_HEADER_LEN as usize || &bytes[..4] != MAGIC {
        return (Vec::new(), 0);
    }
    let mut pos = SEGMENT_HEADER_LEN as usize;
    let mut out = Vec::new();
    while bytes.len() - pos >= FRAME_PREFIX_LEN as usize {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let start = pos + 4;
        let Some(payload) = bytes.get(start..start + len) else { break };
        match wire::decode_element(payload) {
            Ok(e) => out.push(e),
            Err(_) => break,
        }
        pos = start + len;
    }
    (out, pos)
}

#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    active: File,
    active_index: u64,
    active_records: usize,
    capacity: usize,
}

impl Journal {
    /// Opens (or creates) the journal in `dir`, returning it with the last
    /// `capacity` recovered records, oldest first.
    pub fn open(dir: &Path, capacity: usize) -> Result<(Self, Vec<StreamElement>)> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let indices = segment_indices(dir)?;
        let mut records = Vec::new();
        let mut active_records = 0;
        for (n, &idx) in indices.iter().enumerate() {
            let path = segment_path(dir, idx);
            let mut bytes = Vec::new();
            File::open(&path)
                .and_then(|mut f| f.read_to_end(&mut bytes))
                .map_err(|e| io_err(&path, e))?;
            let (elems, valid) = parse_segment(&bytes);
            let is_last = n + 1 == indices.len();
            if is_last {
                if valid < SEGMENT_HEADER_LEN as usize {
                    fs::write(&path, header()).map_err(|e| io_err(&path, e))?;
                } else if valid < bytes.len() {
                    let f = OpenOptions::new().write(true).open(&path).map_err(|e| io_err(&path, e))?;
                    f.set_len(valid as u64).map_err(|e| io_err(&path, e))?;
                }
                active_records = elems.len();
            }
            records.extend(elems);
        }
        let active_index = match indices.last() {
            Some(&i) => i,
            None => {
                let path = segment_path(dir, 0);
                fs::write(&path, header()).map_err(|e| io_err(&path, e))?;
                0
            }
        };
        let path = segment_path(dir, active_index);
        let active = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
        let keep = records.len().min(capacity);
        records.drain(..records.len() - keep);
        Ok((
            Self {
                dir: dir.to_owned(),
                active,
                active_index,
                active_records,
                capacity,
            },
            records,
        ))
    }

    pub fn set_capacity(&mut self, capacity: usize) {
        self.capacity = capacity.max(1);
    }

    /// Appends one pre-encoded frame.
    pub fn append(&mut self, frame: &[u8]) -> Result<()> {
        if self.active_records >= self.capacity {
            self.rotate()?;
        }
        let path = segment_path(&self.dir, self.active_index);
        self.active.write_all(frame).map_err(|e| io_err(&path, e))?;
        self.active_records += 1;
        Ok(())
    }

    fn rotate(&mut self) -> Result<()> {
        let next = self.active_index + 1;
        let path = segment_path(&self.dir, next);
        fs::write(&path, header()).map_err(|e| io_err(&path, e))?;
        self.active = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
        self.active_index = next;
        self.active_records = 0;
        for idx in segment_indices(&self.dir)? {
            if idx + 1 < self.active_index {
                let _ = fs::remove_file(segment_path(&self.dir, idx));
            }
        }
        Ok(())
    }

    /// Deletes every segment and starts an empty one.
    pub fn reset(&mut self) -> Result<()> {
        for idx in segment_indices(&self.dir)? {
            let _ = fs::remove_file(segment_path(&self.dir, idx));
        }
        self.active_index += 1;
        let path = segment_path(&self.dir, self.active_index);
        fs::write(&path, header()).map_err(|e| io_err(&path, e))?;
        self.active = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
        self.active_records = 0;
        Ok(())
    }

    /// Bytes currently on disk, including records awaiting rotation.
    pub fn disk_bytes(&self) -> u64 {
        segment_indices(&self.dir)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|i| fs::metadata(segment_path(&self.dir, i)).ok())
            .map(|m| m.len())
            .sum()
    }

    pub fn segment_count(&self) -> usize {
        segment_indices(&self.dir).map(|v| v.len()).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(ts: i64) -> StreamElement {
        StreamElement::numeric(ts, [ts as f64 * 0.5])
    }

    #[test]
    fn recovers_last_capacity_records() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut j, rec) = Journal::open(dir.path(), 3).unwrap();
            assert!(rec.is_empty());
            for t in 1..=8 {
                j.append(&frame(&e(t))).unwrap();
            }
            assert!(j.segment_count() <= 2);
        }
        let (_, rec) = Journal::open(dir.path(), 3).unwrap();
        assert_eq!(rec, vec![e(6), e(7), e(8)]);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        {
            let (mut j, _) = Journal::open(dir.path(), 10).unwrap();
            j.append(&frame(&e(1))).unwrap();
            j.append(&frame(&e(2))).unwrap();
            let f = frame(&e(3));
            j.append(&f[..f.len() - 3]).unwrap();
        }
        let (mut j, rec) = Journal::open(dir.path(), 10).unwrap();
        assert_eq!(rec, vec![e(1), e(2)]);
        j.append(&frame(&e(4))).unwrap();
        drop(j);
        let (_, rec) = Journal::open(dir.path(), 10).unwrap();
        assert_eq!(rec, vec![e(1), e(2), e(4)]);
    }

    #[test]
    fn reset_empties() {
        let dir = tempfile::tempdir().unwrap();
        let (mut j, _) = Journal::open(dir.path(), 4).unwrap();
        j.append(&frame(&e(1))).unwrap();
        j.reset().unwrap();
        assert_eq!(j.disk_bytes(), SEGMENT_HEADER_LEN);
        drop(j);
        let (_, rec) = Journal::open(dir.path(), 4).unwrap();
        assert!(rec.is_empty());
    }
}
