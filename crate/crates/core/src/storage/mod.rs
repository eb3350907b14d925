//! Bounded per-sensor history: newest appended, oldest evicted, range and
//! latest queries, byte accounting.

pub mod journal;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use crate::error::{EngineError, Result};
use crate::ring::BoundedQueue;
use crate::types::{FieldSpec, SensorName, StreamElement, TimestampMs};
use journal::{Journal, FRAME_PREFIX_LEN, SEGMENT_HEADER_LEN};

pub const DEFAULT_HISTORY_SIZE: usize = 100;

/// What [`HistoryStore::ensure_table`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableStatus {
    Created,
    /// Same output structure: existing history kept.
    Retained,
    /// Structure changed: history cleared.
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableStats {
    pub records: usize,
    pub capacity: usize,
    /// Header plus every retained record's frame.
    pub footprint_bytes: u64,
    /// Everything on disk, including records awaiting segment rotation.
    pub disk_bytes: u64,
}

struct TableInner {
    ring: BoundedQueue<(StreamElement, u64)>,
    record_bytes: u64,
    journal: Option<Journal>,
}

struct Table {
    output: Vec<FieldSpec>,
    inner: RwLock<TableInner>,
    newest: watch::Sender<Option<TimestampMs>>,
}

impl Table {
    fn footprint(&self) -> u64 {
        SEGMENT_HEADER_LEN + self.inner.read().record_bytes
    }
}

/// History tables for one node. One writer per table, any number of readers.
pub struct HistoryStore {
    root: Option<PathBuf>,
    tables: RwLock<BTreeMap<SensorName, Arc<Table>>>,
}

impl std::fmt::Debug for HistoryStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HistoryStore")
            .field("root", &self.root)
            .field("tables", &self.tables.read().keys().collect::<Vec<_>>())
            .finish()
    }
}

impl HistoryStore {
    /// Store without persistence; footprint still counts the bytes a journal would hold.
    pub fn in_memory() -> Self {
        Self {
            root: None,
            tables: RwLock::default(),
        }
    }

    /// Store journaling every table under `root/<sensor>/`.
    pub fn persistent(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)
            .map_err(|e| EngineError::invalid_query(format!("data dir {}: {e}", root.display())))?;
        Ok(Self {
            root: Some(root),
            tables: RwLock::default(),
        })
    }

    fn table(&self, name: &SensorName) -> Result<Arc<Table>> {
        self.tables
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| EngineError::not_found(format!("no history table for sensor `{name}`")))
    }

    /// Creates the table, or adapts an existing one: history is kept when the
    /// output structure is unchanged and cleared otherwise. A new table picks
    /// up records recovered from its journal.
    pub fn ensure_table(&self, name: &SensorName, output: &[FieldSpec], capacity: usize) -> Result<TableStatus> {
        if capacity == 0 {
            return Err(EngineError::invalid_descriptor("history_size must be at least 1"));
        }
        let mut tables = self.tables.write();
        if let Some(t) = tables.get(name) {
            if t.output == output {
                let mut inner = t.inner.write();
                let dropped = inner.ring.set_capacity(capacity);
                inner.record_bytes -= dropped.iter().map(|(_, b)| b).sum::<u64>();
                if let Some(j) = inner.journal.as_mut() {
                    j.set_capacity(capacity);
                }
                return Ok(TableStatus::Retained);
            }
            let mut inner = t.inner.write();
            let journal = match inner.journal.take() {
                Some(mut j) => {
                    j.reset()?;
                    j.set_capacity(capacity);
                    Some(j)
                }
                None => None,
            };
            drop(inner);
            tables.insert(name.clone(), Arc::new(Self::fresh_table(output, capacity, journal, Vec::new())));
            return Ok(TableStatus::Reset);
        }

        let (journal, recovered) = match &self.root {
            Some(root) => {
                let (j, rec) = Journal::open(&root.join(name.as_str()), capacity)?;
                let rec = if rec.iter().all(|e| e.conforms_to(output).is_ok()) {
                    rec
                } else {
                    Vec::new()
                };
                (Some(j), rec)
            }
            None => (None, Vec::new()),
        };
        tables.insert(name.clone(), Arc::new(Self::fresh_table(output, capacity, journal, recovered)));
        Ok(TableStatus::Created)
    }

    fn fresh_table(output: &[FieldSpec], capacity: usize, journal: Option<Journal>, recovered: Vec<StreamElement>) -> Table {
        let mut ring = BoundedQueue::new(capacity);
        let mut record_bytes = 0;
        for e in recovered {
            let b = frame_len(&e);
            record_bytes += b;
            if let Some((_, old)) = ring.push((e, b)) {
                record_bytes -= old;
            }
        }
        let newest = ring.back().map(|(e, _)| e.ts);
        Table {
            output: output.to_vec(),
            inner: RwLock::new(TableInner {
                ring,
                record_bytes,
                journal,
            }),
            newest: watch::channel(newest).0,
        }
    }

    pub fn contains(&self, name: &SensorName) -> bool {
        self.tables.read().contains_key(name)
    }

    pub fn output(&self, name: &SensorName) -> Result<Vec<FieldSpec>> {
        Ok(self.table(name)?.output.clone())
    }

    /// Appends `element` as the newest record, evicting the oldest at capacity.
    pub fn append(&self, name: &SensorName, element: StreamElement) -> Result<()> {
        let t = self.table(name)?;
        element.conforms_to(&t.output)?;
        let ts = element.ts;
        {
            let mut inner = t.inner.write();
            if let Some((newest, _)) = inner.ring.back() {
                if ts < newest.ts {
                    return Err(EngineError::invalid_query(format!(
                        "timestamp {ts} precedes newest record {}",
                        newest.ts
                    )));
                }
            }
            let frame = journal::frame(&element);
            let bytes = frame.len() as u64;
            if let Some(j) = inner.journal.as_mut() {
                j.append(&frame)?;
            }
            inner.record_bytes += bytes;
            if let Some((_, old)) = inner.ring.push((element, bytes)) {
                inner.record_bytes -= old;
            }
        }
        t.newest.send_replace(Some(ts));
        Ok(())
    }

    pub fn latest(&self, name: &SensorName) -> Result<Option<StreamElement>> {
        Ok(self.table(name)?.inner.read().ring.back().map(|(e, _)| e.clone()))
    }

    /// Retained records with `from <= ts <= to`, oldest first.
    pub fn range(&self, name: &SensorName, from: TimestampMs, to: TimestampMs) -> Result<Vec<StreamElement>> {
        if from > to {
            return Err(EngineError::invalid_query(format!("range from {from} > to {to}")));
        }
        let t = self.table(name)?;
        let inner = t.inner.read();
        Ok(inner
            .ring
            .iter()
            .map(|(e, _)| e)
            .filter(|e| from <= e.ts && e.ts <= to)
            .cloned()
            .collect())
    }

    /// Every retained record, oldest first.
    pub fn retained(&self, name: &SensorName) -> Result<Vec<StreamElement>> {
        self.range(name, TimestampMs::MIN, TimestampMs::MAX)
    }

    /// Retained records strictly newer than `after`, oldest first.
    pub fn newer_than(&self, name: &SensorName, after: TimestampMs) -> Result<Vec<StreamElement>> {
        let t = self.table(name)?;
        let inner = t.inner.read();
        let newer = inner.ring.iter().rev().take_while(|(e, _)| e.ts > after).count();
        Ok(inner.ring.iter().skip(inner.ring.len() - newer).map(|(e, _)| e.clone()).collect())
    }

    /// Watches the newest timestamp of a table.
    pub fn watch(&self, name: &SensorName) -> Result<watch::Receiver<Option<TimestampMs>>> {
        Ok(self.table(name)?.newest.subscribe())
    }

    /// Persisted bytes attributable to one sensor, or to all when `None`.
    pub fn footprint(&self, name: Option<&SensorName>) -> Result<u64> {
        match name {
            Some(n) => Ok(self.table(n)?.footprint()),
            None => Ok(self.tables.read().values().map(|t| t.footprint()).sum()),
        }
    }

    pub fn stats(&self, name: &SensorName) -> Result<TableStats> {
        let t = self.table(name)?;
        let inner = t.inner.read();
        let footprint_bytes = SEGMENT_HEADER_LEN + inner.record_bytes;
        Ok(TableStats {
            records: inner.ring.len(),
            capacity: inner.ring.capacity(),
            footprint_bytes,
            disk_bytes: inner.journal.as_ref().map_or(footprint_bytes, |j| j.disk_bytes()),
        })
    }

    pub fn drop_table(&self, name: &SensorName) -> Result<()> {
        let t = self
            .tables
            .write()
            .remove(name)
            .ok_or_else(|| EngineError::not_found(format!("no history table for sensor `{name}`")))?;
        if let Some(j) = t.inner.write().journal.as_mut() {
            j.reset()?;
        }
        Ok(())
    }

    pub fn table_names(&self) -> Vec<SensorName> {
        self.tables.read().keys().cloned().collect()
    }
}

/// Bytes one record occupies in the journal.
pub fn frame_len(element: &StreamElement) -> u64 {
    FRAME_PREFIX_LEN + crate::wire::encode_element(element).len() as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorKind;

    fn name(s: &str) -> SensorName {
        s.parse().unwrap()
    }

    fn out() -> Vec<FieldSpec> {
        vec![FieldSpec::numeric("v", "")]
    }

    fn e(ts: i64) -> StreamElement {
        StreamElement::numeric(ts, [ts as f64])
    }

    fn store(cap: usize) -> HistoryStore {
        let s = HistoryStore::in_memory();
        s.ensure_table(&name("s"), &out(), cap).unwrap();
        s
    }

    #[test]
    fn evicts_oldest_at_capacity() {
        let s = store(3);
        for t in 1..=4 {
            s.append(&name("s"), e(t)).unwrap();
        }
        assert_eq!(s.retained(&name("s")).unwrap(), vec![e(2), e(3), e(4)]);
    }

    #[test]
    fn history_one_keeps_only_latest() {
        let s = store(1);
        for t in 1..=20 {
            s.append(&name("s"), e(t)).unwrap();
            assert_eq!(s.retained(&name("s")).unwrap(), vec![e(t)]);
        }
    }

    #[test]
    fn wrong_arity_and_unknown_table() {
        let s = store(3);
        let err = s.append(&name("s"), StreamElement::numeric(1, [1.0, 2.0])).unwrap_err();
        assert_eq!(err.kind, ErrorKind::InvalidQuery);
        assert_eq!(s.append(&name("x"), e(1)).unwrap_err().kind, ErrorKind::NotFound);
        assert_eq!(s.latest(&name("x")).unwrap_err().kind, ErrorKind::NotFound);
    }

    #[test]
    fn out_of_order_rejected() {
        let s = store(3);
        s.append(&name("s"), e(5)).unwrap();
        s.append(&name("s"), e(5)).unwrap();
        assert_eq!(s.append(&name("s"), e(4)).unwrap_err().kind, ErrorKind::InvalidQuery);
    }

    #[test]
    fn latest_and_range() {
        let s = store(3);
        assert_eq!(s.latest(&name("s")).unwrap(), None);
        for t in 1..=5 {
            s.append(&name("s"), e(t)).unwrap();
        }
        assert_eq!(s.latest(&name("s")).unwrap(), Some(e(5)));
        assert_eq!(s.range(&name("s"), 1, 10).unwrap(), vec![e(3), e(4), e(5)]);
        assert!(s.range(&name("s"), 6, 7).unwrap().is_empty());
        assert_eq!(s.range(&name("s"), 3, 2).unwrap_err().kind, ErrorKind::InvalidQuery);
        assert_eq!(s.newer_than(&name("s"), 3).unwrap(), vec![e(4), e(5)]);
    }

    #[test]
    fn footprint_overhead_then_linear_then_plateau() {
        let s = store(4);
        assert_eq!(s.footprint(None).unwrap(), SEGMENT_HEADER_LEN);
        let rec = frame_len(&e(1000));
        for k in 1..=4 {
            s.append(&name("s"), e(1000 + k)).unwrap();
            assert_eq!(s.footprint(Some(&name("s"))).unwrap(), SEGMENT_HEADER_LEN + k as u64 * rec);
        }
        for k in 5..=10 {
            s.append(&name("s"), e(1000 + k)).unwrap();
            assert_eq!(s.footprint(None).unwrap(), SEGMENT_HEADER_LEN + 4 * rec);
        }
        assert_eq!(HistoryStore::in_memory().footprint(None).unwrap(), 0);
    }

    #[test]
    fn structure_change_resets() {
        let s = store(3);
        s.append(&name("s"), e(1)).unwrap();
        assert_eq!(s.ensure_table(&name("s"), &out(), 5).unwrap(), TableStatus::Retained);
        assert_eq!(s.retained(&name("s")).unwrap().len(), 1);
        let other = vec![FieldSpec::numeric("a", ""), FieldSpec::numeric("b", "")];
        assert_eq!(s.ensure_table(&name("s"), &other, 5).unwrap(), TableStatus::Reset);
        assert!(s.retained(&name("s")).unwrap().is_empty());
    }

    #[test]
    fn persistent_store_recovers() {
        let dir = tempfile::tempdir().unwrap();
        {
            let s = HistoryStore::persistent(dir.path()).unwrap();
            s.ensure_table(&name("s"), &out(), 3).unwrap();
            for t in 1..=7 {
                s.append(&name("s"), e(t)).unwrap();
            }
            let st = s.stats(&name("s")).unwrap();
            assert_eq!(st.records, 3);
            assert!(st.disk_bytes >= st.footprint_bytes);
        }
        let s = HistoryStore::persistent(dir.path()).unwrap();
        assert_eq!(s.ensure_table(&name("s"), &out(), 3).unwrap(), TableStatus::Created);
        assert_eq!(s.retained(&name("s")).unwrap(), vec![e(5), e(6), e(7)]);
    }
}
