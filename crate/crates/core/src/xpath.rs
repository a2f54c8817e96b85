//! The XPath fragment used for access rules and queries: node tests, the
//! child axis `/`, the descendant axis `//`, wildcards `*`, and depth-1
//! predicates `[relPath]` or `[relPath = "literal"]`.
//!
//! Besides parsing and printing, this module carries the reference semantics:
//! [`oracle_match_nodes`] selects nodes by a naive recursive tree walk and is
//! the oracle every streaming result is tested against.

use std::collections::BTreeSet;
use std::fmt;

use crate::document::{Node, NodeId};
use crate::error::Error;

/// An element name. Non-empty, no whitespace, no namespace colon,
/// case-sensitive equality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TagName(String);

impl TagName {
    pub fn new(text: &str) -> Result<Self, Error> {
        let invalid = |reason| Error::InvalidTagName { name: text.to_string(), reason };
        let mut chars = text.chars();
        let Some(first) = chars.next() else {
            return Err(invalid("empty"));
        };
        if !(first.is_alphabetic() || first == '_') {
            return Err(invalid("must start with a letter or underscore"));
        }
        for c in chars {
            if !(c.is_alphanumeric() || matches!(c, '_' | '-' | '.')) {
                return Err(invalid("contains a character outside NameChar"));
            }
        }
        Ok(TagName(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TagName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Child,
    Descendant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NodeTest {
    Tag(TagName),
    Wildcard,
}

impl NodeTest {
    pub fn matches(&self, tag: &TagName) -> bool {
        match self {
            NodeTest::Wildcard => true,
            NodeTest::Tag(t) => t == tag,
        }
    }
}

/// One location step. Steps inside predicates carry empty predicate lists
/// (predicates are depth-1 by construction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub axis: Axis,
    pub test: NodeTest,
    pub predicates: Vec<Predicate>,
}

impl Step {
    pub fn new(axis: Axis, test: NodeTest) -> Self {
        Step { axis, test, predicates: Vec::new() }
    }
}

/// A `[...]` condition: a relative path that must select at least one node,
/// optionally with an equality check against the selected element's text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub path: Vec<Step>,
    pub equals: Option<String>,
}

/// A rooted path expression; `steps` is never empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathExpr {
    pub steps: Vec<Step>,
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

/// Parses exactly the fragment. Anything outside it (other axes, functions,
/// positional predicates, attribute tests) is a syntax error carrying the
/// byte position.
pub fn parse_xpath(text: &str) -> Result<PathExpr, Error> {
    let mut p = Parser { s: text.as_bytes(), pos: 0 };
    let expr = p.parse_path()?;
    if p.pos < p.s.len() {
        return Err(p.error("unexpected trailing input"));
    }
    Ok(expr)
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Syntax { position: self.pos, message: message.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    /// `/` or `//` as an axis; `None` when neither is present.
    fn eat_axis(&mut self) -> Option<Axis> {
        if self.eat(b'/') {
            if self.eat(b'/') {
                Some(Axis::Descendant)
            } else {
                Some(Axis::Child)
            }
        } else {
            None
        }
    }

    fn parse_path(&mut self) -> Result<PathExpr, Error> {
        let Some(first_axis) = self.eat_axis() else {
            return Err(self.error("expression must start with '/' or '//'"));
        };
        let mut steps = vec![self.parse_step(first_axis, true)?];
        while let Some(axis) = self.eat_axis() {
            steps.push(self.parse_step(axis, true)?);
        }
        Ok(PathExpr { steps })
    }

    fn parse_step(&mut self, axis: Axis, allow_predicates: bool) -> Result<Step, Error> {
        let test = self.parse_node_test()?;
        let mut step = Step::new(axis, test);
        while self.peek() == Some(b'[') {
            if !allow_predicates {
                return Err(self.error("nested predicates are not supported"));
            }
            step.predicates.push(self.parse_predicate()?);
        }
        Ok(step)
    }

    fn parse_node_test(&mut self) -> Result<NodeTest, Error> {
        if self.eat(b'*') {
            return Ok(NodeTest::Wildcard);
        }
        if self.peek() == Some(b'@') {
            return Err(self.error("attribute tests are not in the fragment"));
        }
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.') || c >= 0x80 {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            return Err(self.error("expected a name or '*'"));
        }
        if self.peek() == Some(b':') {
            self.pos = start;
            return Err(self.error("axes and namespaces are not in the fragment"));
        }
        if self.peek() == Some(b'(') {
            self.pos = start;
            return Err(self.error("functions are not in the fragment"));
        }
        let raw = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| self.error("name is not valid UTF-8"))?;
        let tag = TagName::new(raw).map_err(|e| match e {
            Error::InvalidTagName { reason, .. } => {
                Error::Syntax { position: start, message: reason.to_string() }
            }
            other => other,
        })?;
        Ok(NodeTest::Tag(tag))
    }

    /// `[ relpath ]` or `[ relpath = "literal" ]`. The relative path's first
    /// step may be prefixed with `//` for the descendant axis; a bare name is
    /// a child step.
    fn parse_predicate(&mut self) -> Result<Predicate, Error> {
        debug_assert_eq!(self.peek(), Some(b'['));
        self.pos += 1;
        let first_axis = match self.eat_axis() {
            Some(Axis::Descendant) => Axis::Descendant,
            Some(Axis::Child) => {
                return Err(self.error("predicate paths are relative; drop the leading '/'"));
            }
            None => Axis::Child,
        };
        let mut path = vec![self.parse_step(first_axis, false)?];
        while let Some(axis) = self.eat_axis() {
            path.push(self.parse_step(axis, false)?);
        }
        let equals = if self.eat(b'=') { Some(self.parse_string_literal()?) } else { None };
        if !self.eat(b']') {
            return Err(self.error("expected ']'"));
        }
        Ok(Predicate { path, equals })
    }

    /// Double-quoted string; `\"` and `\\` are the only escapes.
    fn parse_string_literal(&mut self) -> Result<String, Error> {
        if !self.eat(b'"') {
            return Err(self.error("expected a double-quoted string"));
        }
        let mut out = Vec::new();
        loop {
            match self.peek() {
                Some(b'"') => {
                    self.pos += 1;
                    break;
                }
                Some(b'\\') => {
                    self.pos += 1;
                    match self.peek() {
                        Some(c @ (b'"' | b'\\')) => {
                            out.push(c);
                            self.pos += 1;
                        }
                        _ => return Err(self.error("invalid escape; only \\\" and \\\\")),
                    }
                }
                Some(c) => {
                    out.push(c);
                    self.pos += 1;
                }
                None => return Err(self.error("unterminated string literal")),
            }
        }
        String::from_utf8(out).map_err(|_| self.error("literal is not valid UTF-8"))
    }
}

// ---------------------------------------------------------------------------
// Printer
// ---------------------------------------------------------------------------

impl fmt::Display for PathExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.steps {
            write_step(f, step, true)?;
        }
        Ok(())
    }
}

fn write_step(f: &mut fmt::Formatter<'_>, step: &Step, leading_axis: bool) -> fmt::Result {
    if leading_axis || step.axis == Axis::Descendant {
        f.write_str(match step.axis {
            Axis::Child => "/",
            Axis::Descendant => "//",
        })?;
    }
    match &step.test {
        NodeTest::Wildcard => f.write_str("*")?,
        NodeTest::Tag(t) => f.write_str(t.as_str())?,
    }
    for pred in &step.predicates {
        f.write_str("[")?;
        for (i, pstep) in pred.path.iter().enumerate() {
            if i == 0 {
                if pstep.axis == Axis::Descendant {
                    f.write_str("//")?;
                }
            } else {
                f.write_str(match pstep.axis {
                    Axis::Child => "/",
                    Axis::Descendant => "//",
                })?;
            }
            match &pstep.test {
                NodeTest::Wildcard => f.write_str("*")?,
                NodeTest::Tag(t) => f.write_str(t.as_str())?,
            }
        }
        if let Some(lit) = &pred.equals {
            f.write_str("=\"")?;
            for c in lit.chars() {
                match c {
                    '"' => f.write_str("\\\"")?,
                    '\\' => f.write_str("\\\\")?,
                    _ => write!(f, "{c}")?,
                }
            }
            f.write_str("\"")?;
        }
        f.write_str("]")?;
    }
    Ok(())
}

/// Canonical text form; `parse_xpath(xpath_to_string(e))` structurally
/// equals `e`.
pub fn xpath_to_string(expr: &PathExpr) -> String {
    expr.to_string()
}

// ---------------------------------------------------------------------------
// Reference (DOM-level) semantics
// ---------------------------------------------------------------------------

/// The set of element nodes selected by `expr` under standard
/// child/descendant/wildcard/predicate semantics, computed by a naive
/// recursive tree walk. This is the testing oracle: no streaming, no size
/// limit concern.
pub fn oracle_match_nodes(expr: &PathExpr, doc: &Node) -> BTreeSet<NodeId> {
    // The virtual document node sits above the root element, so that "/a"
    // selects the root element only if it is named a, and "//a" selects any
    // a including the root.
    let mut current: BTreeSet<Option<NodeId>> = BTreeSet::new();
    current.insert(None);
    for step in &expr.steps {
        let mut next = BTreeSet::new();
        for ctx in &current {
            for candidate in step_candidates(doc, ctx.as_ref(), step.axis) {
                let node = doc.node_at(&candidate).expect("candidate exists");
                if step.test.matches(&node.tag)
                    && step.predicates.iter().all(|p| predicate_holds(doc, &candidate, p))
                {
                    next.insert(Some(candidate));
                }
            }
        }
        current = next;
    }
    current.into_iter().flatten().collect()
}

/// Children or strict descendants of the context (`None` = the virtual
/// document node, whose only child is the root element).
fn step_candidates(doc: &Node, ctx: Option<&NodeId>, axis: Axis) -> Vec<NodeId> {
    match (ctx, axis) {
        (None, Axis::Child) => vec![NodeId::root()],
        (None, Axis::Descendant) => doc.node_ids(),
        (Some(id), axis) => {
            let node = doc.node_at(id).expect("context exists");
            match axis {
                Axis::Child => (0..node.children.len()).map(|i| id.child(i)).collect(),
                Axis::Descendant => node
                    .node_ids()
                    .into_iter()
                    .filter(|rel| !rel.0.is_empty())
                    .map(|rel| {
                        let mut path = id.0.clone();
                        path.extend_from_slice(&rel.0);
                        NodeId(path)
                    })
                    .collect(),
            }
        }
    }
}

fn predicate_holds(doc: &Node, ctx: &NodeId, pred: &Predicate) -> bool {
    let mut current = vec![ctx.clone()];
    for step in &pred.path {
        let mut next = BTreeSet::new();
        for c in &current {
            for candidate in step_candidates(doc, Some(c), step.axis) {
                let node = doc.node_at(&candidate).expect("candidate exists");
                if step.test.matches(&node.tag) {
                    next.insert(candidate);
                }
            }
        }
        current = next.into_iter().collect();
    }
    match &pred.equals {
        None => !current.is_empty(),
        Some(lit) => current.iter().any(|id| {
            doc.node_at(id).and_then(|n| n.text.as_deref()) == Some(lit.as_str())
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::parse_xml_text;
    use crate::gen::Rng;

    fn tag(s: &str) -> TagName {
        TagName::new(s).unwrap()
    }

    #[test]
    fn parse_child_then_descendant() {
        let e = parse_xpath("/a//b").unwrap();
        assert_eq!(
            e.steps,
            vec![
                Step::new(Axis::Child, NodeTest::Tag(tag("a"))),
                Step::new(Axis::Descendant, NodeTest::Tag(tag("b"))),
            ]
        );
    }

    #[test]
    fn parse_wildcard_with_equals_predicate() {
        let e = parse_xpath("//x/*[y/z=\"v\"]").unwrap();
        assert_eq!(e.steps.len(), 2);
        assert_eq!(e.steps[0].axis, Axis::Descendant);
        assert_eq!(e.steps[0].test, NodeTest::Tag(tag("x")));
        assert_eq!(e.steps[1].axis, Axis::Child);
        assert_eq!(e.steps[1].test, NodeTest::Wildcard);
        assert_eq!(
            e.steps[1].predicates,
            vec![Predicate {
                path: vec![
                    Step::new(Axis::Child, NodeTest::Tag(tag("y"))),
                    Step::new(Axis::Child, NodeTest::Tag(tag("z"))),
                ],
                equals: Some("v".into()),
            }]
        );
    }

    #[test]
    fn parse_rejects_out_of_fragment() {
        for bad in [
            "/a[position()=1]",
            "/a/ancestor::b",
            "a/b",
            "/a[@id=\"1\"]",
            "/a[1]",
            "/",
            "//",
            "/a[b='v']",
            "/a[/b]",
            "/a[b]extra",
        ] {
            let err = parse_xpath(bad).unwrap_err();
            assert!(matches!(err, Error::Syntax { .. }), "{bad:?} gave {err}");
        }
    }

    #[test]
    fn syntax_error_carries_position() {
        match parse_xpath("/a[position()=1]").unwrap_err() {
            Error::Syntax { position, .. } => assert_eq!(position, 3),
            other => panic!("expected syntax error, got {other}"),
        }
    }

    #[test]
    fn print_canonical_forms() {
        let e = PathExpr { steps: vec![Step::new(Axis::Child, NodeTest::Tag(tag("a")))] };
        assert_eq!(xpath_to_string(&e), "/a");
        let e = PathExpr { steps: vec![Step::new(Axis::Descendant, NodeTest::Wildcard)] };
        assert_eq!(xpath_to_string(&e), "//*");
        let e = parse_xpath("//x/*[//y//z=\"a\\\"b\\\\\"][w]").unwrap();
        assert_eq!(xpath_to_string(&e), "//x/*[//y//z=\"a\\\"b\\\\\"][w]");
    }

    #[test]
    fn roundtrip_on_random_asts() {
        let mut rng = Rng::new(0x9e3779b97f4a7c15);
        for _ in 0..1000 {
            let e = crate::gen::gen_xpath(&mut rng, &["a", "b", "c", "zulu"], true, 4);
            let printed = xpath_to_string(&e);
            let reparsed = parse_xpath(&printed)
                .unwrap_or_else(|err| panic!("reparse of {printed:?} failed: {err}"));
            assert_eq!(reparsed, e, "round-trip of {printed:?}");
        }
    }

    #[test]
    fn oracle_examples() {
        let doc = parse_xml_text("<a><b>x</b><c><b>y</b></c></a>").unwrap();
        let m = oracle_match_nodes(&parse_xpath("/a/c").unwrap(), &doc);
        assert_eq!(m, BTreeSet::from([NodeId(vec![1])]));
        let m = oracle_match_nodes(&parse_xpath("//b").unwrap(), &doc);
        assert_eq!(m, BTreeSet::from([NodeId(vec![0]), NodeId(vec![1, 0])]));
        let m = oracle_match_nodes(&parse_xpath("/a[z]").unwrap(), &doc);
        assert!(m.is_empty());
    }

    #[test]
    fn oracle_predicates() {
        let doc = parse_xml_text("<a><b><c>v</c></b><b><c>w</c></b></a>").unwrap();
        let m = oracle_match_nodes(&parse_xpath("/a/b[c=\"v\"]").unwrap(), &doc);
        assert_eq!(m, BTreeSet::from([NodeId(vec![0])]));
        let m = oracle_match_nodes(&parse_xpath("/a/b[c]").unwrap(), &doc);
        assert_eq!(m.len(), 2);
        // Descendant-first predicate path
        let m = oracle_match_nodes(&parse_xpath("/a[//c=\"w\"]").unwrap(), &doc);
        assert_eq!(m, BTreeSet::from([NodeId(vec![])]));
    }

    #[test]
    fn oracle_wildcard_selects_everything() {
        let mut rng = Rng::new(42);
        let all = parse_xpath("//*").unwrap();
        for _ in 0..50 {
            let doc = crate::gen::gen_tree(&mut rng, 30, &["a", "b", "c"]);
            let matched = oracle_match_nodes(&all, &doc);
            let ids: BTreeSet<NodeId> = doc.node_ids().into_iter().collect();
            assert_eq!(matched, ids);
        }
    }

    #[test]
    fn widening_a_tag_test_never_shrinks_matches() {
        let mut rng = Rng::new(7);
        for _ in 0..200 {
            let doc = crate::gen::gen_tree(&mut rng, 25, &["a", "b", "c", "d"]);
            let expr = crate::gen::gen_xpath(&mut rng, &["a", "b", "c", "d"], true, 3);
            let before = oracle_match_nodes(&expr, &doc);
            // Replace one Tag test (navigational or predicate) with Wildcard.
            let mut widened = expr.clone();
            let mut replaced = false;
            'outer: for step in widened.steps.iter_mut() {
                if matches!(step.test, NodeTest::Tag(_)) {
                    step.test = NodeTest::Wildcard;
                    replaced = true;
                    break;
                }
                for pred in step.predicates.iter_mut() {
                    for pstep in pred.path.iter_mut() {
                        if matches!(pstep.test, NodeTest::Tag(_)) {
                            pstep.test = NodeTest::Wildcard;
                            replaced = true;
                            break 'outer;
                        }
                    }
                }
            }
            if !replaced {
                continue;
            }
            let after = oracle_match_nodes(&widened, &doc);
            assert!(
                before.is_subset(&after),
                "widening shrank matches for {} on {:?}",
                xpath_to_string(&expr),
                doc
            );
        }
    }
}
