//! Replication log entries and per-node persistence.
//!
//! Each node appends committed batches to an append-only log and snapshots
//! the store periodically; restart recovers `last_applied` exactly from
//! snapshot + tail. Election state (term, vote) is persisted so a restarted
//! node cannot vote twice in the same term.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::codec::Msg;

use super::store::{ChangeRequest, ObjectStore};

/// One committed batch. `seq` increases by exactly 1 per entry; `term` is
/// the election term of the master that created it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub seq: u64,
    pub term: u64,
    pub batch: Vec<ChangeRequest>,
}

impl LogEntry {
    pub fn to_msg(&self) -> Msg {
        Msg::map()
            .int_field("seq", self.seq as i64)
            .int_field("term", self.term as i64)
            .field(
                "batch",
                Msg::List(self.batch.iter().map(ChangeRequest::to_msg).collect()),
            )
            .build()
    }

    pub fn from_msg(msg: &Msg) -> Option<LogEntry> {
        let mut batch = Vec::new();
        for req in msg.get("batch").as_list()? {
            batch.push(ChangeRequest::from_msg(req)?);
        }
        Some(LogEntry {
            seq: msg.get_int("seq")? as u64,
            term: msg.get_int("term")? as u64,
            batch,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedState {
    pub term: u64,
    pub voted_for: Option<(u64, String)>,
    pub snapshot_seq: u64,
    pub snapshot: Option<ObjectStore>,
    /// Entries after the snapshot, ascending by seq.
    pub entries: Vec<LogEntry>,
}

/// Node-local durable storage.
pub trait NodeStorage: Send + Sync {
    fn load(&self) -> LoadedState;
    fn append_entry(&self, entry: &LogEntry);
    /// Drop persisted entries with `seq >= from` (conflict truncation).
    fn truncate_from(&self, from: u64);
    /// Persist a snapshot at `seq`; entries at or below it may be pruned.
    fn save_snapshot(&self, seq: u64, store: &ObjectStore);
    fn save_vote(&self, term: u64, voted_for: Option<&str>);
}

/// In-memory "disk" that survives simulated process restarts. The registry
/// owns one per node id; a restarting node reloads from it.
#[derive(Default)]
pub struct MemStorage {
    inner: Mutex<MemDisk>,
}

#[derive(Default)]
struct MemDisk {
    term: u64,
    voted_for: Option<(u64, String)>,
    snapshot_seq: u64,
    snapshot: Option<ObjectStore>,
    entries: BTreeMap<u64, LogEntry>,
}

impl NodeStorage for MemStorage {
    fn load(&self) -> LoadedState {
        let d = self.inner.lock();
        LoadedState {
            term: d.term,
            voted_for: d.voted_for.clone(),
            snapshot_seq: d.snapshot_seq,
            snapshot: d.snapshot.clone(),
            entries: d.entries.values().cloned().collect(),
        }
    }

    fn append_entry(&self, entry: &LogEntry) {
        self.inner.lock().entries.insert(entry.seq, entry.clone());
    }

    fn truncate_from(&self, from: u64) {
        self.inner.lock().entries.retain(|seq, _| *seq < from);
    }

    fn save_snapshot(&self, seq: u64, store: &ObjectStore) {
        let mut d = self.inner.lock();
        d.snapshot_seq = seq;
        d.snapshot = Some(store.clone());
        d.entries.retain(|s, _| *s > seq);
    }

    fn save_vote(&self, term: u64, voted_for: Option<&str>) {
        let mut d = self.inner.lock();
        d.term = term;
        d.voted_for = voted_for.map(|v| (term, v.to_string()));
    }
}

/// Shared registry of simulated node disks, keyed by node id.
#[derive(Default, Clone)]
pub struct DiskRegistry {
    disks: Arc<Mutex<BTreeMap<String, Arc<MemStorage>>>>,
}

impl DiskRegistry {
    pub fn new() -> DiskRegistry {
        DiskRegistry::default()
    }

    pub fn disk(&self, node_id: &str) -> Arc<MemStorage> {
        self.disks
            .lock()
            .entry(node_id.to_string())
            .or_insert_with(|| Arc::new(MemStorage::default()))
            .clone()
    }
}

/// File-backed storage for the socket-transport daemon: a meta file, a
/// snapshot file and an append-only log of framed entries.
pub struct FileStorage {
    dir: PathBuf,
    log: Mutex<Option<std::fs::File>>,
}

impl FileStorage {
    pub fn open(dir: PathBuf) -> std::io::Result<FileStorage> {
        std::fs::create_dir_all(&dir)?;
        Ok(FileStorage {
            dir,
            log: Mutex::new(None),
        })
    }

    fn log_path(&self) -> PathBuf {
        self.dir.join("log.bin")
    }

    fn snapshot_path(&self) -> PathBuf {
        self.dir.join("snapshot.bin")
    }

    fn meta_path(&self) -> PathBuf {
        self.dir.join("meta.bin")
    }

    fn rewrite_log(&self, entries: &[LogEntry]) {
        let tmp = self.dir.join("log.tmp");
        {
            let mut f = std::fs::File::create(&tmp).expect("create log.tmp");
            for e in entries {
                write_record(&mut f, &e.to_msg());
            }
            f.sync_all().ok();
        }
        std::fs::rename(&tmp, self.log_path()).expect("swap log");
        *self.log.lock() = None;
    }

    fn read_log(&self) -> Vec<LogEntry> {
        let Ok(data) = std::fs::read(self.log_path()) else {
            return Vec::new();
        };
        read_records(&data)
            .into_iter()
            .filter_map(|m| LogEntry::from_msg(&m))
            .collect()
    }
}

fn write_record(f: &mut std::fs::File, msg: &Msg) {
    let body = msg.encode();
    f.write_all(&(body.len() as u32).to_le_bytes()).expect("log write");
    f.write_all(&body).expect("log write");
}

fn read_records(mut data: &[u8]) -> Vec<Msg> {
    let mut out = Vec::new();
    while data.len() >= 4 {
        let len = u32::from_le_bytes([data[0], data[1], data[2], data[3]]) as usize;
        if data.len() < 4 + len {
            break; // torn tail record from a crash mid-append
        }
        if let Ok(msg) = Msg::decode(&data[4..4 + len]) {
            out.push(msg);
        }
        data = &data[4 + len..];
    }
    out
}

impl NodeStorage for FileStorage {
    fn load(&self) -> LoadedState {
        let mut state = LoadedState::default();
        if let Ok(data) = std::fs::read(self.meta_path()) {
            if let Ok(meta) = Msg::decode(&data) {
                state.term = meta.get_int("term").unwrap_or(0) as u64;
                if let Some(v) = meta.get_str("voted_for") {
                    if !v.is_empty() {
                        state.voted_for = Some((state.term, v.to_string()));
                    }
                }
            }
        }
        if let Ok(data) = std::fs::read(self.snapshot_path()) {
            if let Ok(snap) = Msg::decode(&data) {
                state.snapshot_seq = snap.get_int("seq").unwrap_or(0) as u64;
                state.snapshot = ObjectStore::from_msg(snap.get("store"));
            }
        }
        state.entries = self
            .read_log()
            .into_iter()
            .filter(|e| e.seq > state.snapshot_seq)
            .collect();
        state.entries.sort_by_key(|e| e.seq);
        state
    }

    fn append_entry(&self, entry: &LogEntry) {
        let mut guard = self.log.lock();
        if guard.is_none() {
            *guard = Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.log_path())
                    .expect("open log"),
            );
        }
        let f = guard.as_mut().unwrap();
        write_record(f, &entry.to_msg());
        f.sync_data().ok();
    }

    fn truncate_from(&self, from: u64) {
        let entries: Vec<LogEntry> = self.read_log().into_iter().filter(|e| e.seq < from).collect();
        self.rewrite_log(&entries);
    }

    fn save_snapshot(&self, seq: u64, store: &ObjectStore) {
        let snap = Msg::map()
            .int_field("seq", seq as i64)
            .field("store", store.to_msg())
            .build();
        let tmp = self.dir.join("snapshot.tmp");
        std::fs::write(&tmp, snap.encode()).expect("write snapshot");
        std::fs::rename(&tmp, self.snapshot_path()).expect("swap snapshot");
        let entries: Vec<LogEntry> = self.read_log().into_iter().filter(|e| e.seq > seq).collect();
        self.rewrite_log(&entries);
    }

    fn save_vote(&self, term: u64, voted_for: Option<&str>) {
        let meta = Msg::map()
            .int_field("term", term as i64)
            .str_field("voted_for", voted_for.unwrap_or(""))
            .build();
        let tmp = self.dir.join("meta.tmp");
        std::fs::write(&tmp, meta.encode()).expect("write meta");
        std::fs::rename(&tmp, self.meta_path()).expect("swap meta");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(seq: u64, term: u64) -> LogEntry {
        LogEntry {
            seq,
            term,
            batch: vec![ChangeRequest::set("obj", "s", &format!("k{seq}"), "v")],
        }
    }

    #[test]
    fn mem_storage_survives_reload() {
        let registry = DiskRegistry::new();
        {
            let disk = registry.disk("n1");
            disk.save_vote(3, Some("n2"));
            disk.append_entry(&entry(1, 1));
            disk.append_entry(&entry(2, 1));
        }
        let disk = registry.disk("n1");
        let state = disk.load();
        assert_eq!(state.term, 3);
        assert_eq!(state.entries.len(), 2);
        assert_eq!(state.entries.last().unwrap().seq, 2);
    }

    #[test]
    fn file_storage_recovers_exact_seq() {
        let dir = tempfile::tempdir().unwrap();
        {
            let storage = FileStorage::open(dir.path().to_path_buf()).unwrap();
            let mut store = ObjectStore::new();
            for i in 1..=5 {
                let e = entry(i, 1);
                store.apply(&e.batch);
                storage.append_entry(&e);
            }
            storage.save_snapshot(3, &store);
            storage.append_entry(&entry(6, 2));
            storage.save_vote(2, None);
        }
        let storage = FileStorage::open(dir.path().to_path_buf()).unwrap();
        let state = storage.load();
        assert_eq!(state.term, 2);
        assert_eq!(state.snapshot_seq, 3);
        let seqs: Vec<u64> = state.entries.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![4, 5, 6]);
    }

    #[test]
    fn truncation_drops_conflicting_tail() {
        let dir = tempfile::tempdir().unwrap();
        let storage = FileStorage::open(dir.path().to_path_buf()).unwrap();
        for i in 1..=4 {
            storage.append_entry(&entry(i, 1));
        }
        storage.truncate_from(3);
        let state = storage.load();
        let seqs: Vec<u64> = state.entries.iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
        storage.append_entry(&entry(3, 2));
        assert_eq!(storage.load().entries.last().unwrap().term, 2);
    }

    #[test]
    fn torn_tail_record_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let storage = FileStorage::open(dir.path().to_path_buf()).unwrap();
        storage.append_entry(&entry(1, 1));
        storage.append_entry(&entry(2, 1));
        // Simulate a crash mid-append.
        let path = dir.path().join("log.bin");
        let mut data = std::fs::read(&path).unwrap();
        data.extend_from_slice(&[200, 0, 0, 0, 1, 2, 3]);
        std::fs::write(&path, data).unwrap();
        let state = storage.load();
        assert_eq!(state.entries.len(), 2);
    }
}
