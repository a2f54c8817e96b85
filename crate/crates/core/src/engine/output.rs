//! Output actions and the ordered assembler that turns them back into a
//! document-order event stream.
//!
//! The evaluator cannot always decide an event's fate when it sees it: a
//! rule may be pending on a predicate, or an open tag may become a skeleton
//! ancestor of a grant that happens much later. Undecidable events are
//! emitted under a buffer id; the buffer is committed or dropped exactly
//! once when the condition resolves. The assembler holds events in arrival
//! (document) order and releases the longest decided prefix.

use std::collections::HashMap;
use std::collections::VecDeque;

use crate::document::Event;
use crate::error::Error;

pub type BufferId = u32;

/// One output decision from the evaluator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OutputAction {
    /// The event is part of the output unconditionally.
    Emit(Event),
    /// The event's fate hangs on the named buffer's resolution.
    EmitPendingRef(BufferId, Event),
    /// The buffer's events are part of the output.
    CommitPending(BufferId),
    /// The buffer's events are discarded.
    DropPending(BufferId),
    /// A subtree was skipped without being decoded (driver-level marker).
    Skip { bytes: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BufState {
    Pending,
    Committed,
    Dropped,
}

/// Reorders/releases evaluator output. Events are appended in document
/// order; the front of the queue is released as soon as every event in it is
/// decided.
#[derive(Debug, Default)]
pub struct OutputAssembler {
    items: VecDeque<(Event, Option<BufferId>)>,
    states: HashMap<BufferId, BufState>,
    buffered_bytes: usize,
}

impl OutputAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Feeds one action; decided prefix events are appended to `out`.
    pub fn push(&mut self, action: &OutputAction, out: &mut Vec<Event>) {
        match action {
            OutputAction::Emit(ev) => {
                self.buffered_bytes += event_bytes(ev);
                self.items.push_back((ev.clone(), None));
            }
            OutputAction::EmitPendingRef(id, ev) => {
                self.buffered_bytes += event_bytes(ev);
                self.states.entry(*id).or_insert(BufState::Pending);
                self.items.push_back((ev.clone(), Some(*id)));
            }
            OutputAction::CommitPending(id) => {
                self.states.insert(*id, BufState::Committed);
            }
            OutputAction::DropPending(id) => {
                self.states.insert(*id, BufState::Dropped);
            }
            OutputAction::Skip { .. } => {}
        }
        self.release(out);
    }

    fn release(&mut self, out: &mut Vec<Event>) {
        while let Some((_, buf)) = self.items.front() {
            let keep = match buf {
                None => true,
                Some(id) => match self.states[id] {
                    BufState::Pending => break,
                    BufState::Committed => true,
                    BufState::Dropped => false,
                },
            };
            let (ev, _) = self.items.pop_front().expect("front exists");
            self.buffered_bytes -= event_bytes(&ev);
            if keep {
                out.push(ev);
            }
        }
    }

    /// Bytes currently held back (pending or blocked behind a pending
    /// buffer). This is the "pending buffers" budget category.
    pub fn buffered_bytes(&self) -> usize {
        self.buffered_bytes
    }

    /// End of stream: every buffer must have resolved.
    pub fn finish(mut self, out: &mut Vec<Event>) -> Result<(), Error> {
        self.release(out);
        if self.items.is_empty() {
            Ok(())
        } else {
            Err(Error::Unbalanced("unresolved pending output at end of stream".into()))
        }
    }
}

pub(crate) fn event_bytes(ev: &Event) -> usize {
    2 + match ev {
        Event::Open(tag) => tag.as_str().len(),
        Event::Value(text) => text.len(),
        Event::Close => 0,
    }
}
