//! The namespace vocabulary: how entries, replica locations, policies and
//! the shepherd registry are laid out inside store objects.
//!
//! Object layout of a namespace entry (object id = entry GUID):
//!
//! ```text
//! states:    type, size, checksum, checksumType, neededReplicas, created, locseq
//! entries:   <childName> -> "<guid>|<type>"            (collections)
//! locations: "<shepherdURL> <referenceID>" -> state     (files)
//! policy:    "0000" -> "allow|CN=user|read,addEntry"    (ordered rules)
//! mount:     url -> external URL prefix                  (mountpoints)
//! ```

use std::collections::BTreeMap;
use std::fmt;

use crate::ahash::store::Object;
use crate::codec::Msg;
use crate::hed::Runtime;

/// Fixed well-known GUID of the root collection.
pub const ROOT_GUID: &str = "00000000000000000000000000000000";

/// Store object holding one section per registered shepherd.
pub const REGISTRY_ID: &str = "shepherd-registry";

/// Store object mirroring the replicas hosted by one shepherd:
/// section "replicas", key = referenceID, value = "guid|size|state".
pub fn shepherd_index_id(shepherd_url: &str) -> String {
    format!("shepherd-replicas {shepherd_url}")
}

/// Entry GUIDs carry 128 bits of transport randomness.
pub fn new_guid(rt: &dyn Runtime) -> String {
    rt.rand_hex(16)
}

/// Location key inside a file object: shepherd endpoint + reference id.
pub fn location_key(shepherd_url: &str, reference_id: &str) -> String {
    format!("{shepherd_url} {reference_id}")
}

pub fn split_location_key(key: &str) -> Option<(&str, &str)> {
    key.rsplit_once(' ')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EntryType {
    File,
    Collection,
    Mountpoint,
}

impl EntryType {
    pub fn as_str(&self) -> &'static str {
        match self {
            EntryType::File => "file",
            EntryType::Collection => "collection",
            EntryType::Mountpoint => "mountpoint",
        }
    }

    pub fn parse(s: &str) -> Option<EntryType> {
        match s {
            "file" => Some(EntryType::File),
            "collection" => Some(EntryType::Collection),
            "mountpoint" => Some(EntryType::Mountpoint),
            _ => None,
        }
    }
}

impl fmt::Display for EntryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Replica lifecycle. Transitions:
/// CREATING -> ALIVE | INVALID; ALIVE -> INVALID | THIRDWHEEL | OFFLINE;
/// OFFLINE -> ALIVE (reappearance); THIRDWHEEL -> deleted; INVALID -> deleted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReplicaState {
    Creating,
    Alive,
    Offline,
    Thirdwheel,
    Invalid,
}

impl ReplicaState {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReplicaState::Creating => "CREATING",
            ReplicaState::Alive => "ALIVE",
            ReplicaState::Offline => "OFFLINE",
            ReplicaState::Thirdwheel => "THIRDWHEEL",
            ReplicaState::Invalid => "INVALID",
        }
    }

    pub fn parse(s: &str) -> Option<ReplicaState> {
        match s {
            "CREATING" => Some(ReplicaState::Creating),
            "ALIVE" => Some(ReplicaState::Alive),
            "OFFLINE" => Some(ReplicaState::Offline),
            "THIRDWHEEL" => Some(ReplicaState::Thirdwheel),
            "INVALID" => Some(ReplicaState::Invalid),
            _ => None,
        }
    }

    pub fn can_transition_to(&self, next: ReplicaState) -> bool {
        use ReplicaState::*;
        matches!(
            (self, next),
            (Creating, Alive)
                | (Creating, Invalid)
                | (Alive, Invalid)
                | (Alive, Thirdwheel)
                | (Alive, Offline)
                | (Offline, Alive)
                | (Offline, Invalid)
        )
    }
}

impl fmt::Display for ReplicaState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed view of a namespace entry object.
#[derive(Debug, Clone, Default)]
pub struct EntryMeta {
    pub entry_type: Option<EntryType>,
    pub size: u64,
    pub checksum: String,
    pub checksum_type: String,
    pub needed_replicas: u32,
    pub created: u64,
    pub locseq: u64,
    pub child_count: usize,
    pub entries: BTreeMap<String, (String, EntryType)>,
    pub locations: BTreeMap<String, ReplicaState>,
    pub policy: Vec<String>,
    pub mount_url: Option<String>,
}

impl EntryMeta {
    pub fn exists(&self) -> bool {
        self.entry_type.is_some()
    }

    pub fn from_object(obj: &Object) -> EntryMeta {
        let mut meta = EntryMeta::default();
        if let Some(states) = obj.get("states") {
            meta.entry_type = states.get("type").and_then(|t| EntryType::parse(t));
            meta.size = states.get("size").and_then(|v| v.parse().ok()).unwrap_or(0);
            meta.checksum = states.get("checksum").cloned().unwrap_or_default();
            meta.checksum_type = states.get("checksumType").cloned().unwrap_or_default();
            meta.needed_replicas = states
                .get("neededReplicas")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0);
            meta.created = states.get("created").and_then(|v| v.parse().ok()).unwrap_or(0);
            meta.locseq = states.get("locseq").and_then(|v| v.parse().ok()).unwrap_or(0);
        }
        if let Some(entries) = obj.get("entries") {
            for (name, value) in entries {
                if let Some((guid, t)) = value.split_once('|') {
                    if let Some(t) = EntryType::parse(t) {
                        meta.entries.insert(name.clone(), (guid.to_string(), t));
                    }
                }
            }
        }
        if let Some(locations) = obj.get("locations") {
            for (key, value) in locations {
                if let Some(state) = ReplicaState::parse(value) {
                    meta.locations.insert(key.clone(), state);
                }
            }
        }
        if let Some(policy) = obj.get("policy") {
            meta.policy = policy.values().cloned().collect();
        }
        if let Some(mount) = obj.get("mount") {
            meta.mount_url = mount.get("url").cloned();
        }
        meta.child_count = meta.entries.len();
        meta
    }

    pub fn alive_count(&self) -> usize {
        self.locations
            .values()
            .filter(|s| **s == ReplicaState::Alive)
            .count()
    }

    pub fn creating_count(&self) -> usize {
        self.locations
            .values()
            .filter(|s| **s == ReplicaState::Creating)
            .count()
    }

    /// Shepherds holding this file in any state.
    pub fn holders(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .locations
            .keys()
            .filter_map(|k| split_location_key(k).map(|(url, _)| url.to_string()))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Wire rendering. Summary form omits child and location maps (used for
    /// traversal-time permission checks); the full form carries everything.
    pub fn to_msg(&self, guid: &str, name: &str, full: bool) -> Msg {
        let mut m = Msg::map()
            .str_field("guid", guid)
            .str_field("name", name)
            .str_field(
                "type",
                self.entry_type.map(|t| t.as_str()).unwrap_or(""),
            )
            .int_field("childCount", self.entries.len() as i64)
            .field(
                "policy",
                Msg::List(self.policy.iter().map(|p| Msg::str(p.clone())).collect()),
            );
        if let Some(url) = &self.mount_url {
            m = m.str_field("mountURL", url);
        }
        if full {
            m = m
                .int_field("size", self.size as i64)
                .str_field("checksum", &self.checksum)
                .str_field("checksumType", &self.checksum_type)
                .int_field("neededReplicas", self.needed_replicas as i64)
                .int_field("created", self.created as i64)
                .int_field("locseq", self.locseq as i64)
                .field(
                    "entries",
                    Msg::Map(
                        self.entries
                            .iter()
                            .map(|(n, (g, t))| (n.clone(), Msg::str(format!("{g}|{t}"))))
                            .collect(),
                    ),
                )
                .field(
                    "locations",
                    Msg::Map(
                        self.locations
                            .iter()
                            .map(|(k, s)| (k.clone(), Msg::str(s.as_str())))
                            .collect(),
                    ),
                );
        }
        m.build()
    }

    pub fn from_msg(msg: &Msg) -> EntryMeta {
        let mut meta = EntryMeta {
            entry_type: msg.get_str("type").and_then(EntryType::parse),
            size: msg.get_int("size").unwrap_or(0) as u64,
            checksum: msg.get_str("checksum").unwrap_or_default().to_string(),
            checksum_type: msg.get_str("checksumType").unwrap_or_default().to_string(),
            needed_replicas: msg.get_int("neededReplicas").unwrap_or(0) as u32,
            created: msg.get_int("created").unwrap_or(0) as u64,
            locseq: msg.get_int("locseq").unwrap_or(0) as u64,
            mount_url: msg.get_str("mountURL").map(String::from),
            ..EntryMeta::default()
        };
        for (name, v) in msg.get("entries").as_map().into_iter().flatten() {
            if let Some((guid, t)) = v.as_str().and_then(|s| s.split_once('|')) {
                if let Some(t) = EntryType::parse(t) {
                    meta.entries.insert(name.clone(), (guid.to_string(), t));
                }
            }
        }
        for (key, v) in msg.get("locations").as_map().into_iter().flatten() {
            if let Some(state) = v.as_str().and_then(ReplicaState::parse) {
                meta.locations.insert(key.clone(), state);
            }
        }
        for rule in msg.get("policy").as_list().unwrap_or(&[]) {
            if let Some(r) = rule.as_str() {
                meta.policy.push(r.to_string());
            }
        }
        meta.child_count = msg.get_int("childCount").unwrap_or(0).max(0) as usize;
        meta
    }
}

/// An absolute path in the global namespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogicalName {
    components: Vec<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NameError {
    #[error("logical names are absolute and start with '/'")]
    NotAbsolute,
    #[error("invalid path component {0:?}")]
    BadComponent(String),
}

pub fn validate_child_name(name: &str) -> Result<(), NameError> {
    if name.is_empty() || name.contains('/') || name == "." || name == ".." {
        return Err(NameError::BadComponent(name.to_string()));
    }
    Ok(())
}

impl LogicalName {
    pub fn parse(s: &str) -> Result<LogicalName, NameError> {
        let rest = s.strip_prefix('/').ok_or(NameError::NotAbsolute)?;
        let mut components = Vec::new();
        for comp in rest.split('/') {
            if comp.is_empty() {
                continue; // tolerate duplicate and trailing slashes
            }
            validate_child_name(comp)?;
            components.push(comp.to_string());
        }
        Ok(LogicalName { components })
    }

    pub fn root() -> LogicalName {
        LogicalName {
            components: Vec::new(),
        }
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn depth(&self) -> usize {
        self.components.len()
    }

    pub fn is_root(&self) -> bool {
        self.components.is_empty()
    }

    pub fn leaf(&self) -> Option<&str> {
        self.components.last().map(String::as_str)
    }

    pub fn parent(&self) -> Option<LogicalName> {
        if self.is_root() {
            return None;
        }
        Some(LogicalName {
            components: self.components[..self.components.len() - 1].to_vec(),
        })
    }

    pub fn child(&self, name: &str) -> LogicalName {
        let mut components = self.components.clone();
        components.push(name.to_string());
        LogicalName { components }
    }
}

impl fmt::Display for LogicalName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.components.is_empty() {
            return f.write_str("/");
        }
        for c in &self.components {
            write!(f, "/{c}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logical_name_parsing() {
        let ln = LogicalName::parse("/user/me/orange.jpg").unwrap();
        assert_eq!(ln.depth(), 3);
        assert_eq!(ln.leaf(), Some("orange.jpg"));
        assert_eq!(ln.parent().unwrap().to_string(), "/user/me");
        assert_eq!(LogicalName::parse("/").unwrap(), LogicalName::root());
        assert_eq!(
            LogicalName::parse("/a//b/").unwrap().to_string(),
            "/a/b",
            "empty components collapse"
        );
        assert_eq!(
            LogicalName::parse("relative/x"),
            Err(NameError::NotAbsolute)
        );
        assert!(LogicalName::parse("/a/../b").is_err());
    }

    #[test]
    fn replica_lifecycle_edges() {
        use ReplicaState::*;
        assert!(Creating.can_transition_to(Alive));
        assert!(Creating.can_transition_to(Invalid));
        assert!(Alive.can_transition_to(Offline));
        assert!(Offline.can_transition_to(Alive), "reappearance");
        assert!(!Thirdwheel.can_transition_to(Alive));
        assert!(!Invalid.can_transition_to(Alive));
        assert!(!Creating.can_transition_to(Thirdwheel));
    }

    #[test]
    fn meta_object_roundtrip() {
        let mut obj = Object::new();
        obj.entry_mut("states").insert("type".into(), "file".into());
        obj.entry_mut("states").insert("size".into(), "114000000".into());
        obj.entry_mut("states").insert("neededReplicas".into(), "4".into());
        obj.entry_mut("locations")
            .insert("sim://shep1/Shepherd r1".into(), "ALIVE".into());
        obj.entry_mut("locations")
            .insert("sim://shep2/Shepherd r2".into(), "CREATING".into());
        let meta = EntryMeta::from_object(&obj);
        assert_eq!(meta.entry_type, Some(EntryType::File));
        assert_eq!(meta.size, 114000000);
        assert_eq!(meta.alive_count(), 1);
        assert_eq!(meta.creating_count(), 1);
        assert_eq!(meta.holders().len(), 2);

        let full = meta.to_msg("g1", "orange.jpg", true);
        let back = EntryMeta::from_msg(&full);
        assert_eq!(back.size, meta.size);
        assert_eq!(back.locations.len(), 2);
        let summary = meta.to_msg("g1", "orange.jpg", false);
        assert!(EntryMeta::from_msg(&summary).locations.is_empty());
    }

    trait ObjectExt {
        fn entry_mut(&mut self, section: &str) -> &mut BTreeMap<String, String>;
    }

    impl ObjectExt for Object {
        fn entry_mut(&mut self, section: &str) -> &mut BTreeMap<String, String> {
            self.entry(section.to_string()).or_default()
        }
    }

    proptest! {
        #[test]
        fn names_roundtrip(
            parts in proptest::collection::vec(
                "[a-zA-Z0-9_.-]{1,12}".prop_filter("dot names", |s| s != "." && s != ".."),
                0..6,
            )
        ) {
            let joined = format!("/{}", parts.join("/"));
            let ln = LogicalName::parse(&joined).unwrap();
            prop_assert_eq!(ln.components().len(), parts.len());
            let again = LogicalName::parse(&ln.to_string()).unwrap();
            prop_assert_eq!(again, ln);
        }
    }
}
