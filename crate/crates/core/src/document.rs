//! In-memory tree model, event model, and conversions between textual XML,
//! trees, and event streams.
//!
//! The document model is deliberately narrow: elements and text only. A node
//! holds either child elements or text content, never both; attributes,
//! namespaces, CDATA and processing instructions are rejected with explicit
//! errors rather than silently dropped, since the event model downstream has
//! only open/value/close and silent loss would corrupt the access-control
//! semantics.

use std::fmt;

use crate::error::Error;
use crate::xpath::TagName;

/// One element of the tree. Children and text are mutually exclusive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub tag: TagName,
    pub children: Vec<Node>,
    pub text: Option<String>,
}

impl Node {
    pub fn new(tag: TagName) -> Self {
        Node { tag, children: Vec::new(), text: None }
    }

    pub fn with_children(tag: TagName, children: Vec<Node>) -> Self {
        Node { tag, children, text: None }
    }

    pub fn with_text(tag: TagName, text: impl Into<String>) -> Self {
        Node { tag, children: Vec::new(), text: Some(text.into()) }
    }

    /// Looks up the node addressed by `id`, if it exists.
    pub fn node_at(&self, id: &NodeId) -> Option<&Node> {
        let mut cur = self;
        for &idx in &id.0 {
            cur = cur.children.get(idx)?;
        }
        Some(cur)
    }

    /// All node ids of the tree in document order, starting with the root.
    pub fn node_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        fn walk(node: &Node, path: &mut Vec<usize>, out: &mut Vec<NodeId>) {
            out.push(NodeId(path.clone()));
            for (i, child) in node.children.iter().enumerate() {
                path.push(i);
                walk(child, path, out);
                path.pop();
            }
        }
        walk(self, &mut Vec::new(), &mut out);
        out
    }

    /// Number of element nodes in the subtree rooted here.
    pub fn element_count(&self) -> usize {
        1 + self.children.iter().map(Node::element_count).sum::<usize>()
    }
}

/// Address of a node: the child indexes walked from the root. The root
/// element is the empty path.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub Vec<usize>);

impl NodeId {
    pub fn root() -> Self {
        NodeId(Vec::new())
    }

    pub fn child(&self, index: usize) -> Self {
        let mut path = self.0.clone();
        path.push(index);
        NodeId(path)
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn parent(&self) -> Option<NodeId> {
        if self.0.is_empty() {
            None
        } else {
            Some(NodeId(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// `self` and every ancestor, root first.
    pub fn ancestors_or_self(&self) -> Vec<NodeId> {
        (0..=self.0.len()).map(|n| NodeId(self.0[..n].to_vec())).collect()
    }

    /// True when `self` is an ancestor of or equal to `other`.
    pub fn is_ancestor_or_self_of(&self, other: &NodeId) -> bool {
        other.0.len() >= self.0.len() && other.0[..self.0.len()] == self.0[..]
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/")?;
        for (i, idx) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{idx}")?;
        }
        Ok(())
    }
}

/// One parse event. A well-formed stream is balanced: every `Open` has a
/// matching `Close`, and `Value` occurs only between an `Open` and its
/// `Close`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Event {
    Open(TagName),
    Value(String),
    Close,
}

// ---------------------------------------------------------------------------
// XML text -> Tree
// ---------------------------------------------------------------------------

/// Parses element-only XML text (tags + text content). Comments and the XML
/// declaration are skipped; attributes, mixed content, CDATA, processing
/// instructions and DTDs are rejected.
pub fn parse_xml_text(text: &str) -> Result<Node, Error> {
    let mut p = XmlParser { s: text.as_bytes(), pos: 0 };
    p.skip_misc(true)?;
    if p.pos >= p.s.len() {
        return Err(p.malformed("no root element"));
    }
    if p.peek() != Some(b'<') {
        return Err(p.malformed("expected '<' to start the root element"));
    }
    let root = p.parse_element()?;
    p.skip_misc(false)?;
    if p.pos < p.s.len() {
        return Err(p.malformed("content after root element"));
    }
    Ok(root)
}

struct XmlParser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl<'a> XmlParser<'a> {
    fn malformed(&self, msg: &str) -> Error {
        Error::MalformedXml { position: self.pos, message: msg.to_string() }
    }

    fn unsupported(&self, msg: &str) -> Error {
        Error::UnsupportedFeature { position: self.pos, message: msg.to_string() }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn starts_with(&self, pat: &str) -> bool {
        self.s[self.pos..].starts_with(pat.as_bytes())
    }

    /// Skips whitespace, comments, and (in the prolog) the XML declaration.
    fn skip_misc(&mut self, prolog: bool) -> Result<(), Error> {
        loop {
            while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
                self.pos += 1;
            }
            if self.starts_with("<?xml") && prolog && self.pos == 0 {
                match self.s[self.pos..].windows(2).position(|w| w == b"?>") {
                    Some(n) => self.pos += n + 2,
                    None => return Err(self.malformed("unterminated XML declaration")),
                }
            } else if self.starts_with("<!--") {
                self.skip_comment()?;
            } else if self.starts_with("<!DOCTYPE") {
                return Err(self.unsupported("DTD"));
            } else {
                return Ok(());
            }
        }
    }

    fn skip_comment(&mut self) -> Result<(), Error> {
        debug_assert!(self.starts_with("<!--"));
        match self.s[self.pos + 4..].windows(3).position(|w| w == b"-->") {
            Some(n) => {
                self.pos += 4 + n + 3;
                Ok(())
            }
            None => Err(self.malformed("unterminated comment")),
        }
    }

    fn parse_name(&mut self) -> Result<TagName, Error> {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b'.') || c >= 0x80 {
                self.pos += 1;
            } else {
                break;
            }
        }
        if self.pos == start {
            if self.peek() == Some(b':') {
                return Err(self.unsupported("namespace prefix"));
            }
            return Err(self.malformed("expected a name"));
        }
        if self.peek() == Some(b':') {
            return Err(self.unsupported("namespace prefix"));
        }
        let raw = std::str::from_utf8(&self.s[start..self.pos])
            .map_err(|_| self.malformed("name is not valid UTF-8"))?;
        TagName::new(raw).map_err(|e| match e {
            Error::InvalidTagName { reason, .. } => Error::MalformedXml {
                position: start,
                message: format!("bad name: {reason}"),
            },
            other => other,
        })
    }

    fn parse_element(&mut self) -> Result<Node, Error> {
        debug_assert_eq!(self.peek(), Some(b'<'));
        self.pos += 1;
        let tag = self.parse_name()?;
        match self.peek() {
            Some(b'>') => {
                self.pos += 1;
            }
            Some(b'/') => {
                if self.starts_with("/>") {
                    self.pos += 2;
                    return Ok(Node::new(tag));
                }
                return Err(self.malformed("expected '>' after '/'"));
            }
            Some(b' ' | b'\t' | b'\r' | b'\n') => {
                // Whitespace in a start tag can only precede attributes or
                // the tag end; attributes are out of the model.
                while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
                    self.pos += 1;
                }
                match self.peek() {
                    Some(b'>') => self.pos += 1,
                    Some(b'/') if self.starts_with("/>") => {
                        self.pos += 2;
                        return Ok(Node::new(tag));
                    }
                    _ => return Err(self.unsupported("attributes")),
                }
            }
            _ => return Err(self.malformed("expected '>' or '/>'")),
        }
        self.parse_content(tag)
    }

    fn parse_content(&mut self, tag: TagName) -> Result<Node, Error> {
        let mut children = Vec::new();
        let mut text = String::new();
        loop {
            if self.starts_with("<!--") {
                self.skip_comment()?;
            } else if self.starts_with("<![CDATA[") {
                return Err(self.unsupported("CDATA"));
            } else if self.starts_with("<?") {
                return Err(self.unsupported("processing instruction"));
            } else if self.starts_with("</") {
                self.pos += 2;
                let end = self.parse_name()?;
                if end != tag {
                    return Err(self.malformed(&format!(
                        "mismatched close tag </{}> for <{}>",
                        end.as_str(),
                        tag.as_str()
                    )));
                }
                while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
                    self.pos += 1;
                }
                if self.peek() != Some(b'>') {
                    return Err(self.malformed("expected '>' in close tag"));
                }
                self.pos += 1;
                break;
            } else if self.peek() == Some(b'<') {
                children.push(self.parse_element()?);
            } else if self.peek().is_some() {
                self.parse_text_run(&mut text)?;
            } else {
                return Err(self.malformed(&format!("unclosed element <{}>", tag.as_str())));
            }
        }
        let has_text = !text.trim().is_empty();
        if has_text && !children.is_empty() {
            return Err(self.unsupported("mixed content"));
        }
        if has_text {
            Ok(Node { tag, children: Vec::new(), text: Some(text) })
        } else {
            Ok(Node { tag, children, text: None })
        }
    }

    fn parse_text_run(&mut self, out: &mut String) -> Result<(), Error> {
        while let Some(c) = self.peek() {
            match c {
                b'<' => break,
                b'&' => {
                    self.pos += 1;
                    let start = self.pos;
                    while self.peek().is_some() && self.peek() != Some(b';') && self.pos - start < 8
                    {
                        self.pos += 1;
                    }
                    if self.peek() != Some(b';') {
                        return Err(self.malformed("bad entity reference"));
                    }
                    let name = &self.s[start..self.pos];
                    self.pos += 1;
                    out.push(match name {
                        b"amp" => '&',
                        b"lt" => '<',
                        b"gt" => '>',
                        b"quot" => '"',
                        b"apos" => '\'',
                        _ => return Err(self.malformed("unknown entity")),
                    });
                }
                _ => {
                    // Copy a maximal run of plain bytes in one go.
                    let start = self.pos;
                    while let Some(c) = self.peek() {
                        if c == b'<' || c == b'&' {
                            break;
                        }
                        self.pos += 1;
                    }
                    let run = std::str::from_utf8(&self.s[start..self.pos])
                        .map_err(|_| self.malformed("text is not valid UTF-8"))?;
                    out.push_str(run);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tree <-> events
// ---------------------------------------------------------------------------

/// Document-order event stream: `Open` at each element entry, `Value` for
/// text, `Close` at exit.
pub fn tree_to_events(doc: &Node) -> Vec<Event> {
    let mut out = Vec::new();
    fn walk(node: &Node, out: &mut Vec<Event>) {
        out.push(Event::Open(node.tag.clone()));
        if let Some(text) = &node.text {
            out.push(Event::Value(text.clone()));
        }
        for child in &node.children {
            walk(child, out);
        }
        out.push(Event::Close);
    }
    walk(doc, &mut out);
    out
}

/// Rebuilds a tree from a balanced event stream. Inverse of
/// [`tree_to_events`].
pub fn events_to_tree(events: &[Event]) -> Result<Node, Error> {
    let mut stack: Vec<Node> = Vec::new();
    let mut root: Option<Node> = None;
    for ev in events {
        match ev {
            Event::Open(tag) => {
                if root.is_some() {
                    return Err(Error::Unbalanced("content after root close".into()));
                }
                stack.push(Node::new(tag.clone()));
            }
            Event::Value(text) => {
                let Some(top) = stack.last_mut() else {
                    return Err(Error::Unbalanced("value outside any element".into()));
                };
                if !top.children.is_empty() {
                    return Err(Error::Unbalanced("value after child elements".into()));
                }
                match &mut top.text {
                    Some(t) => t.push_str(text),
                    None => top.text = Some(text.clone()),
                }
            }
            Event::Close => {
                let Some(done) = stack.pop() else {
                    return Err(Error::Unbalanced("close without open".into()));
                };
                if done.text.is_some() && !done.children.is_empty() {
                    return Err(Error::Unbalanced("element has both text and children".into()));
                }
                match stack.last_mut() {
                    Some(parent) => {
                        if parent.text.is_some() {
                            return Err(Error::Unbalanced(
                                "element has both text and children".into(),
                            ));
                        }
                        parent.children.push(done);
                    }
                    None => root = Some(done),
                }
            }
        }
    }
    if !stack.is_empty() {
        return Err(Error::Unbalanced("stream ends with open elements".into()));
    }
    root.ok_or_else(|| Error::Unbalanced("empty stream".into()))
}

// ---------------------------------------------------------------------------
// Events -> XML text
// ---------------------------------------------------------------------------

/// Incremental XML serializer. Feed a balanced stream of events, read the
/// canonical text back out. Empty elements are written `<a/>`; no
/// insignificant whitespace is produced.
#[derive(Debug, Default)]
pub struct XmlWriter {
    out: String,
    open: Vec<TagName>,
    /// A tag whose `<name` has not been closed with `>` yet, pending the
    /// decision between `<a/>` and `<a>...</a>`.
    pending: Option<TagName>,
    done: bool,
}

impl XmlWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, ev: &Event) -> Result<(), Error> {
        if self.done {
            return Err(Error::Unbalanced("event after root close".into()));
        }
        match ev {
            Event::Open(tag) => {
                self.flush_pending(false);
                self.pending = Some(tag.clone());
                self.open.push(tag.clone());
            }
            Event::Value(text) => {
                if self.open.is_empty() {
                    return Err(Error::Unbalanced("value outside any element".into()));
                }
                self.flush_pending(false);
                escape_into(text, &mut self.out);
            }
            Event::Close => {
                let Some(tag) = self.open.pop() else {
                    return Err(Error::Unbalanced("close without open".into()));
                };
                if self.pending.is_some() {
                    self.flush_pending(true);
                } else {
                    self.out.push_str("</");
                    self.out.push_str(tag.as_str());
                    self.out.push('>');
                }
                if self.open.is_empty() {
                    self.done = true;
                }
            }
        }
        Ok(())
    }

    fn flush_pending(&mut self, self_close: bool) {
        if let Some(tag) = self.pending.take() {
            self.out.push('<');
            self.out.push_str(tag.as_str());
            self.out.push_str(if self_close { "/>" } else { ">" });
        }
    }

    pub fn finish(self) -> Result<String, Error> {
        if !self.open.is_empty() {
            return Err(Error::Unbalanced("stream ends with open elements".into()));
        }
        Ok(self.out)
    }

    /// Text produced so far (for streaming delivery).
    pub fn as_str(&self) -> &str {
        &self.out
    }
}

/// Serializes a balanced event stream. An empty stream yields the empty
/// string (the "empty document" case).
pub fn events_to_text(events: &[Event]) -> Result<String, Error> {
    let mut w = XmlWriter::new();
    for ev in events {
        w.feed(ev)?;
    }
    w.finish()
}

fn escape_into(text: &str, out: &mut String) {
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tag(s: &str) -> TagName {
        TagName::new(s).unwrap()
    }

    #[test]
    fn parse_empty_element() {
        let t = parse_xml_text("<a/>").unwrap();
        assert_eq!(t, Node::new(tag("a")));
        let t = parse_xml_text("<a></a>").unwrap();
        assert_eq!(t, Node::new(tag("a")));
    }

    #[test]
    fn parse_nested_with_text() {
        let t = parse_xml_text("<a><b>x</b></a>").unwrap();
        assert_eq!(t, Node::with_children(tag("a"), vec![Node::with_text(tag("b"), "x")]));
    }

    #[test]
    fn parse_rejects_attributes() {
        let err = parse_xml_text("<a attr=\"1\"/>").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFeature { .. }), "{err}");
    }

    #[test]
    fn parse_rejects_mixed_content() {
        let err = parse_xml_text("<a>x<b/></a>").unwrap_err();
        assert!(matches!(err, Error::UnsupportedFeature { .. }), "{err}");
    }

    #[test]
    fn parse_rejects_cdata_pi_doctype() {
        assert!(matches!(
            parse_xml_text("<a><![CDATA[x]]></a>").unwrap_err(),
            Error::UnsupportedFeature { .. }
        ));
        assert!(matches!(
            parse_xml_text("<a><?php ?></a>").unwrap_err(),
            Error::UnsupportedFeature { .. }
        ));
        assert!(matches!(
            parse_xml_text("<!DOCTYPE a><a/>").unwrap_err(),
            Error::UnsupportedFeature { .. }
        ));
        assert!(matches!(
            parse_xml_text("<ns:a/>").unwrap_err(),
            Error::UnsupportedFeature { .. }
        ));
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(matches!(parse_xml_text("<a><b></a></b>").unwrap_err(), Error::MalformedXml { .. }));
        assert!(matches!(parse_xml_text("<a>").unwrap_err(), Error::MalformedXml { .. }));
        assert!(matches!(parse_xml_text("").unwrap_err(), Error::MalformedXml { .. }));
        assert!(matches!(parse_xml_text("<a/><b/>").unwrap_err(), Error::MalformedXml { .. }));
        assert!(matches!(parse_xml_text("<a>&bogus;</a>").unwrap_err(), Error::MalformedXml { .. }));
        // text before the root element
        assert!(matches!(parse_xml_text("oops<a/>").unwrap_err(), Error::MalformedXml { .. }));
    }

    #[test]
    fn parse_skips_declaration_comments_and_whitespace() {
        let t = parse_xml_text("<?xml version=\"1.0\"?>\n<!-- hi -->\n<a>\n  <b>x</b>\n</a>\n")
            .unwrap();
        assert_eq!(t, Node::with_children(tag("a"), vec![Node::with_text(tag("b"), "x")]));
    }

    #[test]
    fn parse_decodes_entities() {
        let t = parse_xml_text("<a>1 &lt; 2 &amp;&amp; &quot;q&quot;</a>").unwrap();
        assert_eq!(t.text.as_deref(), Some("1 < 2 && \"q\""));
    }

    #[test]
    fn events_for_single_node() {
        let t = Node::new(tag("a"));
        assert_eq!(tree_to_events(&t), vec![Event::Open(tag("a")), Event::Close]);
    }

    #[test]
    fn events_for_text_child() {
        let t = parse_xml_text("<a><b>x</b></a>").unwrap();
        assert_eq!(
            tree_to_events(&t),
            vec![
                Event::Open(tag("a")),
                Event::Open(tag("b")),
                Event::Value("x".into()),
                Event::Close,
                Event::Close,
            ]
        );
    }

    #[test]
    fn event_stream_length() {
        let t = parse_xml_text("<a><b>x</b><c><d/></c></a>").unwrap();
        let evs = tree_to_events(&t);
        // 2 * elements + texts
        assert_eq!(evs.len(), 2 * t.element_count() + 1);
    }

    #[test]
    fn serialize_events() {
        assert_eq!(events_to_text(&[Event::Open(tag("a")), Event::Close]).unwrap(), "<a/>");
        assert_eq!(
            events_to_text(&[Event::Open(tag("a")), Event::Value("x".into()), Event::Close])
                .unwrap(),
            "<a>x</a>"
        );
        assert_eq!(events_to_text(&[]).unwrap(), "");
        assert!(matches!(events_to_text(&[Event::Close]).unwrap_err(), Error::Unbalanced(_)));
        assert!(matches!(
            events_to_text(&[Event::Open(tag("a"))]).unwrap_err(),
            Error::Unbalanced(_)
        ));
    }

    #[test]
    fn serialize_escapes_text() {
        let evs = vec![Event::Open(tag("a")), Event::Value("a<b&c>d".into()), Event::Close];
        assert_eq!(events_to_text(&evs).unwrap(), "<a>a&lt;b&amp;c&gt;d</a>");
    }

    #[test]
    fn parse_serialize_parse_is_idempotent() {
        for src in ["<a/>", "<a><b>x</b><c/></a>", "<a> padded </a>", "<a><b>&amp;</b></a>"] {
            let t1 = parse_xml_text(src).unwrap();
            let text = events_to_text(&tree_to_events(&t1)).unwrap();
            let t2 = parse_xml_text(&text).unwrap();
            assert_eq!(t1, t2, "source {src:?} round-trips");
        }
    }

    #[test]
    fn node_ids_and_lookup() {
        let t = parse_xml_text("<a><b>x</b><c><b>y</b></c></a>").unwrap();
        let ids = t.node_ids();
        assert_eq!(ids.len(), 4);
        assert_eq!(t.node_at(&NodeId(vec![1, 0])).unwrap().text.as_deref(), Some("y"));
        assert!(NodeId(vec![1]).is_ancestor_or_self_of(&NodeId(vec![1, 0])));
        assert!(!NodeId(vec![0]).is_ancestor_or_self_of(&NodeId(vec![1, 0])));
    }
}
