//! Reference (non-streaming) semantics of the access-control model:
//! per-node grant/deny decisions and the pruned authorized view. Every
//! streaming result is tested against this module.
//!
//! A rule propagates from each object it matches to all descendants. Two
//! policies resolve conflicts: the rule anchored nearest the node wins
//! (most-specific-object-takes-precedence); on a tie, a prohibition beats a
//! permission (denial-takes-precedence). With no applicable rule at all the
//! decision is Deny.

use std::collections::BTreeSet;
use std::fmt;

use crate::document::{Node, NodeId};
use crate::error::Error;
use crate::xpath::{oracle_match_nodes, parse_xpath, xpath_to_string, PathExpr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Grant,
    Deny,
}

/// A signed ⟨sign, subject, object⟩ triple, the unit of policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRule {
    pub sign: Sign,
    pub subject: String,
    pub object: PathExpr,
}

/// The rules one session enforces. All rules share the same subject.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    pub subject: String,
    pub rules: Vec<AccessRule>,
}

impl RuleSet {
    pub fn empty(subject: impl Into<String>) -> Self {
        RuleSet { subject: subject.into(), rules: Vec::new() }
    }

    /// Builds a set from rules that must all carry the same subject.
    pub fn new(subject: impl Into<String>, rules: Vec<AccessRule>) -> Result<Self, Error> {
        let subject = subject.into();
        if let Some(r) = rules.iter().find(|r| r.subject != subject) {
            return Err(Error::Syntax {
                position: 0,
                message: format!("rule subject {:?} does not match set subject {subject:?}", r.subject),
            });
        }
        Ok(RuleSet { subject, rules })
    }

    /// Groups parsed rules into a single-subject set. Fails when the rules
    /// name more than one subject; an empty list gives an empty set for the
    /// anonymous subject.
    pub fn from_rules(rules: Vec<AccessRule>) -> Result<Self, Error> {
        let subjects: BTreeSet<&str> = rules.iter().map(|r| r.subject.as_str()).collect();
        match subjects.len() {
            0 => Ok(RuleSet::empty("")),
            1 => {
                let subject = subjects.into_iter().next().unwrap().to_string();
                Ok(RuleSet { subject, rules })
            }
            _ => Err(Error::Syntax {
                position: 0,
                message: format!(
                    "rules file names {} subjects; a session enforces exactly one",
                    subjects.len()
                ),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Rule file format: one rule per line, `+|- <subject> <xpath>`, `#` comments.
// ---------------------------------------------------------------------------

pub fn parse_rules(text: &str) -> Result<Vec<AccessRule>, Error> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: &str| Error::Syntax {
            position: lineno + 1,
            message: format!("rule line {}: {msg}", lineno + 1),
        };
        let sign = match line.as_bytes()[0] {
            b'+' => Sign::Positive,
            b'-' => Sign::Negative,
            _ => return Err(err("must start with '+' or '-'")),
        };
        let rest = line[1..].trim_start();
        let Some(split) = rest.find(char::is_whitespace) else {
            return Err(err("expected `sign subject xpath`"));
        };
        let subject = rest[..split].to_string();
        let object = parse_xpath(rest[split..].trim_start())?;
        out.push(AccessRule { sign, subject, object });
    }
    Ok(out)
}

pub fn format_rules(rules: &[AccessRule]) -> String {
    let mut out = String::new();
    for r in rules {
        let sign = match r.sign {
            Sign::Positive => '+',
            Sign::Negative => '-',
        };
        out.push(sign);
        out.push(' ');
        out.push_str(&r.subject);
        out.push(' ');
        out.push_str(&xpath_to_string(&r.object));
        out.push('\n');
    }
    out
}

impl fmt::Display for AccessRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = match self.sign {
            Sign::Positive => '+',
            Sign::Negative => '-',
        };
        write!(f, "{sign} {} {}", self.subject, xpath_to_string(&self.object))
    }
}

// ---------------------------------------------------------------------------
// Decision and views
// ---------------------------------------------------------------------------

/// Decision for one node. Each rule's anchor is the nearest (deepest)
/// matched ancestor-or-self; the deepest anchors win, negatives break ties.
pub fn effective_decision(rules: &RuleSet, doc: &Node, node: &NodeId) -> Decision {
    let matches: Vec<BTreeSet<NodeId>> =
        rules.rules.iter().map(|r| oracle_match_nodes(&r.object, doc)).collect();
    decision_with(rules, &matches, node)
}

fn decision_with(rules: &RuleSet, matches: &[BTreeSet<NodeId>], node: &NodeId) -> Decision {
    let mut best_depth: Option<usize> = None;
    let mut negative_at_best = false;
    for (rule, matched) in rules.rules.iter().zip(matches) {
        let anchor = node
            .ancestors_or_self()
            .into_iter()
            .filter(|a| matched.contains(a))
            .map(|a| a.depth())
            .max();
        let Some(depth) = anchor else { continue };
        let is_neg = rule.sign == Sign::Negative;
        match best_depth {
            Some(d) if depth < d => {}
            Some(d) if depth == d => negative_at_best |= is_neg,
            _ => {
                best_depth = Some(depth);
                negative_at_best = is_neg;
            }
        }
    }
    match best_depth {
        Some(_) if !negative_at_best => Decision::Grant,
        _ => Decision::Deny,
    }
}

/// The document pruned to granted nodes plus the tag-only skeleton of their
/// ancestors (text of denied ancestors omitted). `None` when nothing is
/// granted.
pub fn authorized_view(rules: &RuleSet, doc: &Node) -> Option<Node> {
    let matches: Vec<BTreeSet<NodeId>> =
        rules.rules.iter().map(|r| oracle_match_nodes(&r.object, doc)).collect();
    prune(doc, &NodeId::root(), &mut |id| {
        decision_with(rules, &matches, id) == Decision::Grant
    })
}

/// Nodes matched by `query` plus their full subtrees plus the ancestor
/// skeleton. Session semantics compose as `query_view(authorized_view(doc))`.
pub fn query_view(doc: &Node, query: &PathExpr) -> Option<Node> {
    let matched = oracle_match_nodes(query, doc);
    prune(doc, &NodeId::root(), &mut |id| {
        id.ancestors_or_self().iter().any(|a| matched.contains(a))
    })
}

/// Keeps nodes where `granted` holds (with text) and ancestors of kept nodes
/// (tags only).
fn prune(node: &Node, id: &NodeId, granted: &mut dyn FnMut(&NodeId) -> bool) -> Option<Node> {
    let children: Vec<Node> = node
        .children
        .iter()
        .enumerate()
        .filter_map(|(i, child)| prune(child, &id.child(i), granted))
        .collect();
    let g = granted(id);
    if g || !children.is_empty() {
        Some(Node {
            tag: node.tag.clone(),
            children,
            text: if g { node.text.clone() } else { None },
        })
    } else {
        None
    }
}
