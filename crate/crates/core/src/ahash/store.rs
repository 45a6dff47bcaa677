//! Object store state: objects of sectioned key-value pairs, plus the
//! conditional change requests that mutate them.

use std::collections::BTreeMap;

use crate::codec::Msg;

/// `section -> key -> value`. An absent object is equivalent to an object
/// with zero sections.
pub type Object = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectStore {
    objects: BTreeMap<String, Object>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    HasKey,
    NoKey,
    ValueEquals,
    ValueDiffers,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Condition {
    pub kind: ConditionKind,
    pub section: String,
    pub key: String,
    pub value: String,
}

impl Condition {
    pub fn has_key(section: &str, key: &str) -> Condition {
        Condition {
            kind: ConditionKind::HasKey,
            section: section.into(),
            key: key.into(),
            value: String::new(),
        }
    }

    pub fn no_key(section: &str, key: &str) -> Condition {
        Condition {
            kind: ConditionKind::NoKey,
            section: section.into(),
            key: key.into(),
            value: String::new(),
        }
    }

    pub fn value_equals(section: &str, key: &str, value: &str) -> Condition {
        Condition {
            kind: ConditionKind::ValueEquals,
            section: section.into(),
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn value_differs(section: &str, key: &str, value: &str) -> Condition {
        Condition {
            kind: ConditionKind::ValueDiffers,
            section: section.into(),
            key: key.into(),
            value: value.into(),
        }
    }

    pub fn eval(&self, object: Option<&Object>) -> bool {
        let current = object
            .and_then(|o| o.get(&self.section))
            .and_then(|s| s.get(&self.key));
        match self.kind {
            ConditionKind::HasKey => current.is_some(),
            ConditionKind::NoKey => current.is_none(),
            ConditionKind::ValueEquals => current == Some(&self.value),
            ConditionKind::ValueDiffers => current != Some(&self.value),
        }
    }

    fn kind_str(&self) -> &'static str {
        match self.kind {
            ConditionKind::HasKey => "has-key",
            ConditionKind::NoKey => "no-key",
            ConditionKind::ValueEquals => "value-equals",
            ConditionKind::ValueDiffers => "value-differs",
        }
    }

    pub fn to_msg(&self) -> Msg {
        Msg::map()
            .str_field("kind", self.kind_str())
            .str_field("section", &self.section)
            .str_field("key", &self.key)
            .str_field("value", &self.value)
            .build()
    }

    pub fn from_msg(msg: &Msg) -> Option<Condition> {
        let kind = match msg.get_str("kind")? {
            "has-key" => ConditionKind::HasKey,
            "no-key" => ConditionKind::NoKey,
            "value-equals" => ConditionKind::ValueEquals,
            "value-differs" => ConditionKind::ValueDiffers,
            _ => return None,
        };
        Some(Condition {
            kind,
            section: msg.get_str("section")?.to_string(),
            key: msg.get_str("key")?.to_string(),
            value: msg.get_str("value").unwrap_or_default().to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChangeKind {
    Set { value: String },
    Unset,
    DeleteObject,
}

/// A conditional mutation of one object. All conditions are evaluated
/// against the object's state before the whole batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeRequest {
    pub object_id: String,
    pub section: String,
    pub key: String,
    pub kind: ChangeKind,
    pub conditions: Vec<Condition>,
}

impl ChangeRequest {
    pub fn set(object_id: &str, section: &str, key: &str, value: &str) -> ChangeRequest {
        ChangeRequest {
            object_id: object_id.into(),
            section: section.into(),
            key: key.into(),
            kind: ChangeKind::Set {
                value: value.into(),
            },
            conditions: Vec::new(),
        }
    }

    pub fn unset(object_id: &str, section: &str, key: &str) -> ChangeRequest {
        ChangeRequest {
            object_id: object_id.into(),
            section: section.into(),
            key: key.into(),
            kind: ChangeKind::Unset,
            conditions: Vec::new(),
        }
    }

    pub fn delete_object(object_id: &str) -> ChangeRequest {
        ChangeRequest {
            object_id: object_id.into(),
            section: String::new(),
            key: String::new(),
            kind: ChangeKind::DeleteObject,
            conditions: Vec::new(),
        }
    }

    pub fn when(mut self, cond: Condition) -> ChangeRequest {
        self.conditions.push(cond);
        self
    }

    pub fn to_msg(&self) -> Msg {
        let (kind, value) = match &self.kind {
            ChangeKind::Set { value } => ("set", value.clone()),
            ChangeKind::Unset => ("unset", String::new()),
            ChangeKind::DeleteObject => ("delete-object", String::new()),
        };
        Msg::map()
            .str_field("id", &self.object_id)
            .str_field("type", kind)
            .str_field("section", &self.section)
            .str_field("key", &self.key)
            .str_field("value", value)
            .field(
                "conditions",
                Msg::List(self.conditions.iter().map(Condition::to_msg).collect()),
            )
            .build()
    }

    pub fn from_msg(msg: &Msg) -> Option<ChangeRequest> {
        let kind = match msg.get_str("type")? {
            "set" => ChangeKind::Set {
                value: msg.get_str("value")?.to_string(),
            },
            "unset" => ChangeKind::Unset,
            "delete-object" => ChangeKind::DeleteObject,
            _ => return None,
        };
        let mut conditions = Vec::new();
        for c in msg.get("conditions").as_list().unwrap_or(&[]) {
            conditions.push(Condition::from_msg(c)?);
        }
        Some(ChangeRequest {
            object_id: msg.get_str("id")?.to_string(),
            section: msg.get_str("section").unwrap_or_default().to_string(),
            key: msg.get_str("key").unwrap_or_default().to_string(),
            kind,
            conditions,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeOutcome {
    Applied,
    ConditionFailed,
    Failed,
}

impl ChangeOutcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChangeOutcome::Applied => "applied",
            ChangeOutcome::ConditionFailed => "condition-failed",
            ChangeOutcome::Failed => "failed",
        }
    }
}

impl ObjectStore {
    pub fn new() -> ObjectStore {
        ObjectStore::default()
    }

    pub fn get(&self, id: &str) -> Option<&Object> {
        self.objects.get(id)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &String> {
        self.objects.keys()
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    /// Evaluate a batch: conditions are checked against the pre-batch state
    /// and the passing requests are returned in order. The batch as a whole
    /// becomes one replication log entry.
    pub fn filter_batch(
        &self,
        batch: &BTreeMap<String, ChangeRequest>,
    ) -> (Vec<ChangeRequest>, BTreeMap<String, ChangeOutcome>) {
        let mut accepted = Vec::new();
        let mut outcomes = BTreeMap::new();
        for (change_id, req) in batch {
            let pre = self.objects.get(&req.object_id);
            let ok = req.conditions.iter().all(|c| c.eval(pre));
            if ok {
                accepted.push(req.clone());
                outcomes.insert(change_id.clone(), ChangeOutcome::Applied);
            } else {
                outcomes.insert(change_id.clone(), ChangeOutcome::ConditionFailed);
            }
        }
        (accepted, outcomes)
    }

    /// Apply already-accepted requests unconditionally (replica path).
    pub fn apply(&mut self, requests: &[ChangeRequest]) {
        for req in requests {
            match &req.kind {
                ChangeKind::Set { value } => {
                    self.objects
                        .entry(req.object_id.clone())
                        .or_default()
                        .entry(req.section.clone())
                        .or_default()
                        .insert(req.key.clone(), value.clone());
                }
                ChangeKind::Unset => {
                    if let Some(obj) = self.objects.get_mut(&req.object_id) {
                        if let Some(section) = obj.get_mut(&req.section) {
                            section.remove(&req.key);
                            if section.is_empty() {
                                obj.remove(&req.section);
                            }
                        }
                        if obj.is_empty() {
                            self.objects.remove(&req.object_id);
                        }
                    }
                }
                ChangeKind::DeleteObject => {
                    self.objects.remove(&req.object_id);
                }
            }
        }
    }

    /// Canonical serialization; byte-identical across replicas holding the
    /// same state.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        self.to_msg().encode()
    }

    pub fn to_msg(&self) -> Msg {
        let objects = self
            .objects
            .iter()
            .map(|(id, obj)| (id.clone(), object_to_msg(obj)))
            .collect();
        Msg::Map(objects)
    }

    pub fn from_msg(msg: &Msg) -> Option<ObjectStore> {
        let mut objects = BTreeMap::new();
        for (id, obj) in msg.as_map()? {
            objects.insert(id.clone(), object_from_msg(obj)?);
        }
        Some(ObjectStore { objects })
    }
}

pub fn object_to_msg(obj: &Object) -> Msg {
    Msg::Map(
        obj.iter()
            .map(|(section, kv)| {
                (
                    section.clone(),
                    Msg::Map(
                        kv.iter()
                            .map(|(k, v)| (k.clone(), Msg::Str(v.clone())))
                            .collect(),
                    ),
                )
            })
            .collect(),
    )
}

pub fn object_from_msg(msg: &Msg) -> Option<Object> {
    let mut obj = Object::new();
    for (section, kv) in msg.as_map()? {
        let mut map = BTreeMap::new();
        for (k, v) in kv.as_map()? {
            map.insert(k.clone(), v.as_str()?.to_string());
        }
        obj.insert(section.clone(), map);
    }
    Some(obj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch(reqs: Vec<(&str, ChangeRequest)>) -> BTreeMap<String, ChangeRequest> {
        reqs.into_iter()
            .map(|(id, r)| (id.to_string(), r))
            .collect()
    }

    #[test]
    fn set_with_no_key_guard_is_idempotence_guard() {
        let mut store = ObjectStore::new();
        let req = ChangeRequest::set("g1", "states", "size", "114000000")
            .when(Condition::no_key("states", "size"));
        let (accepted, outcomes) = store.filter_batch(&batch(vec![("c1", req.clone())]));
        assert_eq!(outcomes["c1"], ChangeOutcome::Applied);
        store.apply(&accepted);
        assert_eq!(store.get("g1").unwrap()["states"]["size"], "114000000");

        // Replaying the same conditional change must fail its condition.
        let (_, outcomes) = store.filter_batch(&batch(vec![("c1", req)]));
        assert_eq!(outcomes["c1"], ChangeOutcome::ConditionFailed);
    }

    #[test]
    fn conditions_see_pre_batch_state() {
        let mut store = ObjectStore::new();
        store.apply(&[ChangeRequest::set("g", "s", "k", "old")]);
        // Two requests in one batch: the second's condition is evaluated
        // against the pre-batch value, not the first request's effect.
        let b = batch(vec![
            ("a", ChangeRequest::set("g", "s", "k", "new")),
            (
                "b",
                ChangeRequest::set("g", "s", "other", "x")
                    .when(Condition::value_equals("s", "k", "old")),
            ),
        ]);
        let (accepted, outcomes) = store.filter_batch(&b);
        assert_eq!(outcomes["a"], ChangeOutcome::Applied);
        assert_eq!(outcomes["b"], ChangeOutcome::Applied);
        store.apply(&accepted);
        assert_eq!(store.get("g").unwrap()["s"]["k"], "new");
    }

    #[test]
    fn delete_object_and_absent_semantics() {
        let mut store = ObjectStore::new();
        store.apply(&[ChangeRequest::set("g", "s", "k", "v")]);
        store.apply(&[ChangeRequest::delete_object("g")]);
        assert!(store.get("g").is_none());
        // Absent object behaves as zero sections for conditions.
        assert!(Condition::no_key("s", "k").eval(store.get("g")));
        assert!(!Condition::has_key("s", "k").eval(store.get("g")));
    }

    #[test]
    fn unset_prunes_empty_sections_and_objects() {
        let mut store = ObjectStore::new();
        store.apply(&[ChangeRequest::set("g", "s", "k", "v")]);
        store.apply(&[ChangeRequest::unset("g", "s", "k")]);
        assert!(store.get("g").is_none(), "empty object equals absent object");
    }

    proptest! {
        #[test]
        fn change_request_msg_roundtrip(
            id in "[a-z0-9]{1,8}",
            section in "[a-z]{1,6}",
            key in "[a-z0-9/.]{1,12}",
            value in "[a-zA-Z0-9]{0,16}",
            cond_kind in 0..4usize,
        ) {
            let kind = match cond_kind {
                0 => Condition::has_key(&section, &key),
                1 => Condition::no_key(&section, &key),
                2 => Condition::value_equals(&section, &key, &value),
                _ => Condition::value_differs(&section, &key, &value),
            };
            let req = ChangeRequest::set(&id, &section, &key, &value).when(kind);
            prop_assert_eq!(ChangeRequest::from_msg(&req.to_msg()).unwrap(), req);
        }

        #[test]
        fn apply_is_deterministic_and_canonical(
            ops in proptest::collection::vec(
                ("[a-c]", "[a-b]", "[a-b]", "[a-z]{0,4}", any::<bool>()),
                0..24,
            )
        ) {
            let mut s1 = ObjectStore::new();
            let mut s2 = ObjectStore::new();
            for (id, sec, key, value, unset) in &ops {
                let req = if *unset {
                    ChangeRequest::unset(id, sec, key)
                } else {
                    ChangeRequest::set(id, sec, key, value)
                };
                s1.apply(std::slice::from_ref(&req));
                s2.apply(std::slice::from_ref(&req));
            }
            prop_assert_eq!(s1.canonical_bytes(), s2.canonical_bytes());
            let back = ObjectStore::from_msg(&s1.to_msg()).unwrap();
            prop_assert_eq!(back.canonical_bytes(), s1.canonical_bytes());
        }
    }
}
