//! Storage-node backends: replica records plus their bytes, behind one
//! interface so a shepherd can run on the built-in stores or a future
//! external storage element. The in-memory store survives simulated
//! process restarts through a registry, mirroring a disk; the filesystem
//! store backs the socket-transport daemon.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::codec::Msg;
use crate::content::Content;
use crate::meta::ReplicaState;
use crate::vtime::Nanos;

/// One replica as the storage node tracks it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaRecord {
    pub reference_id: String,
    pub guid: String,
    pub state: ReplicaState,
    pub checksum: String,
    pub checksum_type: String,
    pub size: u64,
    /// Transport time of the last state transition.
    pub state_since: Nanos,
}

impl ReplicaRecord {
    pub fn to_msg(&self) -> Msg {
        Msg::map()
            .str_field("ref", &self.reference_id)
            .str_field("guid", &self.guid)
            .str_field("state", self.state.as_str())
            .str_field("checksum", &self.checksum)
            .str_field("checksumType", &self.checksum_type)
            .int_field("size", self.size as i64)
            .int_field("since", self.state_since as i64)
            .build()
    }

    pub fn from_msg(msg: &Msg) -> Option<ReplicaRecord> {
        Some(ReplicaRecord {
            reference_id: msg.get_str("ref")?.to_string(),
            guid: msg.get_str("guid")?.to_string(),
            state: ReplicaState::parse(msg.get_str("state")?)?,
            checksum: msg.get_str("checksum").unwrap_or_default().to_string(),
            checksum_type: msg.get_str("checksumType").unwrap_or_default().to_string(),
            size: msg.get_int("size").unwrap_or(0) as u64,
            state_since: msg.get_int("since").unwrap_or(0) as u64,
        })
    }
}

/// Capacity summary of a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendHandle {
    pub backend_name: String,
    pub capacity: u64,
    pub used: u64,
}

pub trait ReplicaStore: Send + Sync {
    fn backend_name(&self) -> &str;
    fn capacity(&self) -> u64;
    fn load_records(&self) -> BTreeMap<String, ReplicaRecord>;
    fn record(&self, reference: &str) -> Option<ReplicaRecord>;
    fn save_record(&self, record: &ReplicaRecord);
    fn remove_record(&self, reference: &str);
    fn put_content(&self, reference: &str, content: &Content);
    fn get_content(&self, reference: &str) -> Option<Content>;
    fn delete_content(&self, reference: &str);
    /// Flip one stored byte; fault injection. Returns false if no content.
    fn corrupt(&self, reference: &str, offset: u64, xor: u8) -> bool;

    /// Bytes accounted against capacity: the declared size of every record.
    fn used(&self) -> u64 {
        self.load_records().values().map(|r| r.size).sum()
    }

    fn handle(&self) -> BackendHandle {
        BackendHandle {
            backend_name: self.backend_name().to_string(),
            capacity: self.capacity(),
            used: self.used(),
        }
    }
}

#[derive(Default)]
struct MemDisk {
    records: BTreeMap<String, ReplicaRecord>,
    contents: BTreeMap<String, Content>,
}

/// In-memory backend; the `Arc` lives in a [`ShepherdDiskRegistry`], so a
/// restarted service instance finds its replicas again.
pub struct MemReplicaStore {
    capacity: u64,
    disk: Mutex<MemDisk>,
}

impl MemReplicaStore {
    pub fn new(capacity: u64) -> Arc<MemReplicaStore> {
        Arc::new(MemReplicaStore {
            capacity,
            disk: Mutex::new(MemDisk::default()),
        })
    }
}

impl ReplicaStore for MemReplicaStore {
    fn backend_name(&self) -> &str {
        "mem"
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn load_records(&self) -> BTreeMap<String, ReplicaRecord> {
        self.disk.lock().records.clone()
    }

    fn record(&self, reference: &str) -> Option<ReplicaRecord> {
        self.disk.lock().records.get(reference).cloned()
    }

    fn save_record(&self, record: &ReplicaRecord) {
        self.disk
            .lock()
            .records
            .insert(record.reference_id.clone(), record.clone());
    }

    fn remove_record(&self, reference: &str) {
        let mut d = self.disk.lock();
        d.records.remove(reference);
        d.contents.remove(reference);
    }

    fn put_content(&self, reference: &str, content: &Content) {
        self.disk
            .lock()
            .contents
            .insert(reference.to_string(), content.clone());
    }

    fn get_content(&self, reference: &str) -> Option<Content> {
        self.disk.lock().contents.get(reference).cloned()
    }

    fn delete_content(&self, reference: &str) {
        self.disk.lock().contents.remove(reference);
    }

    fn corrupt(&self, reference: &str, offset: u64, xor: u8) -> bool {
        let mut d = self.disk.lock();
        match d.contents.get_mut(reference) {
            Some(c) => {
                c.corrupt(offset, xor);
                true
            }
            None => false,
        }
    }
}

/// Shared registry of simulated storage-node disks, keyed by host name.
#[derive(Default, Clone)]
pub struct ShepherdDiskRegistry {
    disks: Arc<Mutex<BTreeMap<String, Arc<MemReplicaStore>>>>,
}

impl ShepherdDiskRegistry {
    pub fn new() -> ShepherdDiskRegistry {
        ShepherdDiskRegistry::default()
    }

    pub fn disk(&self, host: &str, capacity: u64) -> Arc<MemReplicaStore> {
        self.disks
            .lock()
            .entry(host.to_string())
            .or_insert_with(|| MemReplicaStore::new(capacity))
            .clone()
    }
}

/// Filesystem backend: `<dir>/<ref>.meta` (record) + `<dir>/<ref>.data`.
pub struct FsReplicaStore {
    dir: PathBuf,
    capacity: u64,
}

impl FsReplicaStore {
    pub fn open(dir: PathBuf, capacity: u64) -> std::io::Result<FsReplicaStore> {
        std::fs::create_dir_all(&dir)?;
        Ok(FsReplicaStore { dir, capacity })
    }

    fn meta_path(&self, reference: &str) -> PathBuf {
        self.dir.join(format!("{reference}.meta"))
    }

    fn data_path(&self, reference: &str) -> PathBuf {
        self.dir.join(format!("{reference}.data"))
    }
}

impl ReplicaStore for FsReplicaStore {
    fn backend_name(&self) -> &str {
        "localfs"
    }

    fn capacity(&self) -> u64 {
        self.capacity
    }

    fn load_records(&self) -> BTreeMap<String, ReplicaRecord> {
        let mut out = BTreeMap::new();
        let Ok(dir) = std::fs::read_dir(&self.dir) else {
            return out;
        };
        for entry in dir.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("meta") {
                continue;
            }
            if let Ok(data) = std::fs::read(&path) {
                if let Some(rec) = Msg::decode(&data).ok().as_ref().and_then(ReplicaRecord::from_msg)
                {
                    out.insert(rec.reference_id.clone(), rec);
                }
            }
        }
        out
    }

    fn record(&self, reference: &str) -> Option<ReplicaRecord> {
        let data = std::fs::read(self.meta_path(reference)).ok()?;
        ReplicaRecord::from_msg(&Msg::decode(&data).ok()?)
    }

    fn save_record(&self, record: &ReplicaRecord) {
        let tmp = self.dir.join(format!("{}.meta.tmp", record.reference_id));
        std::fs::write(&tmp, record.to_msg().encode()).expect("write record");
        std::fs::rename(&tmp, self.meta_path(&record.reference_id)).expect("swap record");
    }

    fn remove_record(&self, reference: &str) {
        let _ = std::fs::remove_file(self.meta_path(reference));
        let _ = std::fs::remove_file(self.data_path(reference));
    }

    fn put_content(&self, reference: &str, content: &Content) {
        std::fs::write(self.data_path(reference), content.materialize()).expect("write data");
    }

    fn get_content(&self, reference: &str) -> Option<Content> {
        std::fs::read(self.data_path(reference)).ok().map(Content::Bytes)
    }

    fn delete_content(&self, reference: &str) {
        let _ = std::fs::remove_file(self.data_path(reference));
    }

    fn corrupt(&self, reference: &str, offset: u64, xor: u8) -> bool {
        let Some(content) = self.get_content(reference) else {
            return false;
        };
        let mut content = content;
        content.corrupt(offset, xor);
        self.put_content(reference, &content);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mem_store_roundtrip_and_usage() {
        let store = MemReplicaStore::new(1000);
        let rec = ReplicaRecord {
            reference_id: "r1".into(),
            guid: "g1".into(),
            state: ReplicaState::Creating,
            checksum: "aa".into(),
            checksum_type: "sha256".into(),
            size: 600,
            state_since: 0,
        };
        store.save_record(&rec);
        store.put_content("r1", &Content::Bytes(vec![1, 2, 3]));
        assert_eq!(store.used(), 600);
        assert_eq!(store.record("r1").unwrap().guid, "g1");
        assert!(store.corrupt("r1", 1, 0xff));
        assert_eq!(
            store.get_content("r1").unwrap().materialize(),
            vec![1, 2 ^ 0xff, 3]
        );
        store.remove_record("r1");
        assert_eq!(store.used(), 0);
        assert!(store.get_content("r1").is_none());
    }

    #[test]
    fn fs_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FsReplicaStore::open(dir.path().into(), 10_000).unwrap();
            let rec = ReplicaRecord {
                reference_id: "r9".into(),
                guid: "g9".into(),
                state: ReplicaState::Alive,
                checksum: Content::Bytes(b"abc".to_vec()).checksum(),
                checksum_type: "sha256".into(),
                size: 3,
                state_since: 7,
            };
            store.save_record(&rec);
            store.put_content("r9", &Content::Bytes(b"abc".to_vec()));
        }
        let store = FsReplicaStore::open(dir.path().into(), 10_000).unwrap();
        let records = store.load_records();
        assert_eq!(records.len(), 1);
        assert_eq!(records["r9"].state, ReplicaState::Alive);
        assert_eq!(store.get_content("r9").unwrap().materialize(), b"abc");
    }
}
