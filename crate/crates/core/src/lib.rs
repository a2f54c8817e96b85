//! Streaming, client-side access control for XML documents.
//!
//! Access rules written in a restricted XPath fragment are compiled to
//! non-deterministic automata and evaluated in a single pass over an event
//! stream. Documents travel and rest encrypted in independently
//! authenticated chunks; an embedded structural skip index (per-subtree tag
//! bitmaps plus sizes) lets the evaluator jump over subtrees that cannot
//! contribute to the authorized, query-relevant output. A simulated secure
//! operating environment runs the whole pipeline under an explicit
//! working-memory budget, fetching chunks from a local file or from the
//! untrusted document server in `dsp`.
//!
//! Module map:
//! - [`xpath`]: the XP{[],*,//} fragment — parse, print, reference matcher.
//! - [`document`]: tree/event models and XML text conversions.
//! - [`access`]: rule model and the non-streaming oracle semantics.
//! - [`engine`]: the streaming evaluator (automata, token stack, sign stack,
//!   pending output).
//! - [`skipindex`]: the compact "CXD1" document format with embedded
//!   subtree descriptors, and the skip decision.
//! - [`envelope`]: the encrypted "SXD1" container with per-chunk MACs.
//! - [`soe`]: budget-accounted sessions wiring fetch, verify, decrypt,
//!   decode, skip, and evaluate together.
//! - [`dsp`]: the untrusted store server and its client.
//!
//! # Example
//!
//! Filter a document by a rule set and a query, streaming:
//!
//! ```
//! use cardstream_core::access::{parse_rules, RuleSet};
//! use cardstream_core::document::{events_to_text, parse_xml_text, tree_to_events};
//! use cardstream_core::engine::evaluate_stream;
//! use cardstream_core::xpath::parse_xpath;
//!
//! let doc = parse_xml_text("<a><b>x</b><c><b>y</b></c></a>")?;
//! let rules = RuleSet::from_rules(parse_rules("+ alice //a\n- alice /a/c\n")?)?;
//! let query = parse_xpath("//b")?;
//!
//! let events = evaluate_stream(&rules, Some(&query), &tree_to_events(&doc))?;
//! assert_eq!(events_to_text(&events)?, "<a><b>x</b></a>");
//! # Ok::<(), cardstream_core::Error>(())
//! ```

pub mod access;
pub mod document;
pub mod dsp;
pub mod engine;
pub mod envelope;
pub mod error;
pub mod gen;
pub mod skipindex;
pub mod soe;
pub mod xpath;

pub use error::Error;
