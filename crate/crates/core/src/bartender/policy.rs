//! Per-entry access policies: an ordered ACL evaluated first-match-wins,
//! with deny as the default. Rules serialize as `decision|identity|actions`
//! and are stored in the entry's policy section.

use std::collections::BTreeSet;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Action {
    Read,
    AddEntry,
    RemoveEntry,
    ModifyPolicy,
}

impl Action {
    pub fn as_str(&self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::AddEntry => "addEntry",
            Action::RemoveEntry => "removeEntry",
            Action::ModifyPolicy => "modifyPolicy",
        }
    }

    pub fn parse(s: &str) -> Option<Action> {
        match s {
            "read" => Some(Action::Read),
            "addEntry" => Some(Action::AddEntry),
            "removeEntry" => Some(Action::RemoveEntry),
            "modifyPolicy" => Some(Action::ModifyPolicy),
            _ => None,
        }
    }

    pub fn all() -> BTreeSet<Action> {
        [
            Action::Read,
            Action::AddEntry,
            Action::RemoveEntry,
            Action::ModifyPolicy,
        ]
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

/// `identity` is a DN string or "ANY".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub identity: String,
    pub decision: Decision,
    pub actions: BTreeSet<Action>,
}

impl PolicyRule {
    pub fn allow(identity: &str, actions: impl IntoIterator<Item = Action>) -> PolicyRule {
        PolicyRule {
            identity: identity.to_string(),
            decision: Decision::Allow,
            actions: actions.into_iter().collect(),
        }
    }

    pub fn deny(identity: &str, actions: impl IntoIterator<Item = Action>) -> PolicyRule {
        PolicyRule {
            identity: identity.to_string(),
            decision: Decision::Deny,
            actions: actions.into_iter().collect(),
        }
    }

    pub fn allow_any_all() -> PolicyRule {
        PolicyRule::allow("ANY", Action::all())
    }

    pub fn owner_rules(owner: &str) -> Vec<PolicyRule> {
        vec![PolicyRule::allow(owner, Action::all())]
    }

    fn matches(&self, identity: &str, action: Action) -> bool {
        (self.identity == "ANY" || self.identity == identity) && self.actions.contains(&action)
    }

    pub fn parse(s: &str) -> Option<PolicyRule> {
        let mut parts = s.splitn(3, '|');
        let decision = match parts.next()? {
            "allow" => Decision::Allow,
            "deny" => Decision::Deny,
            _ => return None,
        };
        let identity = parts.next()?.to_string();
        let actions = parts
            .next()?
            .split(',')
            .filter(|a| !a.is_empty())
            .map(Action::parse)
            .collect::<Option<BTreeSet<_>>>()?;
        Some(PolicyRule {
            identity,
            decision,
            actions,
        })
    }
}

impl fmt::Display for PolicyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let decision = match self.decision {
            Decision::Allow => "allow",
            Decision::Deny => "deny",
        };
        let actions: Vec<&str> = self.actions.iter().map(Action::as_str).collect();
        write!(f, "{decision}|{}|{}", self.identity, actions.join(","))
    }
}

/// First matching rule decides; no match denies.
pub fn evaluate(rules: &[String], identity: &str, action: Action) -> bool {
    for raw in rules {
        let Some(rule) = PolicyRule::parse(raw) else {
            continue;
        };
        if rule.matches(identity, action) {
            return rule.decision == Decision::Allow;
        }
    }
    false
}

pub fn render(rules: &[PolicyRule]) -> Vec<String> {
    rules.iter().map(|r| r.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_match_wins_and_default_denies() {
        let rules = render(&[
            PolicyRule::deny("CN=mallory", [Action::Read]),
            PolicyRule::allow("ANY", [Action::Read]),
            PolicyRule::allow("CN=alice", [Action::AddEntry]),
        ]);
        assert!(!evaluate(&rules, "CN=mallory", Action::Read), "deny first");
        assert!(evaluate(&rules, "CN=bob", Action::Read));
        assert!(evaluate(&rules, "CN=alice", Action::AddEntry));
        assert!(!evaluate(&rules, "CN=bob", Action::AddEntry));
        assert!(!evaluate(&rules, "CN=alice", Action::ModifyPolicy), "no match denies");
        assert!(!evaluate(&[], "CN=anyone", Action::Read), "empty policy denies");
    }

    #[test]
    fn rule_roundtrip_with_dn_containing_spaces_and_commas() {
        // DNs may contain commas; the field separator is '|'.
        let rule = PolicyRule::allow("CN=alice, O=lab", [Action::Read, Action::RemoveEntry]);
        let parsed = PolicyRule::parse(&rule.to_string()).unwrap();
        assert_eq!(parsed, rule);
    }
}
