//! The streaming evaluator: every rule (and the query) is compiled to a
//! non-deterministic automaton, and all of them run in one pass over the
//! event stream with bounded state, producing the authorized, query-relevant
//! output events.
//!
//! Per-depth frames of active tokens give exact backtracking on close
//! events. Predicate paths spawn *instances* anchored at the element that
//! matched their step; nav tokens carry the unresolved instances of their
//! chains, so a rule only applies through a chain whose own predicates hold
//! (two chains reaching the same state with different obligations are
//! distinct tokens). Signs propagate through per-element cells: a cell is
//! firm, or conditional on instance alternatives, or inherits its parent.
//! Output events whose fate is undecided are emitted under pending buffer
//! ids and committed or dropped when the deciding instances resolve — which
//! may legitimately happen only after the element has closed, as long as
//! the predicate's own anchor is still open.
//!
//! A query composes as a second stage consuming the access stage's resolved
//! output: the query view equals an authorized view under the single
//! positive rule (+, query), and running it downstream makes query
//! predicates see only authorized witnesses.

mod automaton;
mod output;

pub use automaton::{compile_rule, Branch, Origin, RuleAutomaton, State, StateId, Transition};
pub use output::{BufferId, OutputAction, OutputAssembler};

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::access::{RuleSet, Sign};
use crate::document::Event;
use crate::error::Error;
use crate::xpath::{PathExpr, TagName};

type RecId = usize;
type InstId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InstState {
    Open,
    True,
    False,
}

/// One predicate-path instance: branch `key.1` of automaton `key.0`,
/// anchored at the element opened at depth `key.2`.
#[derive(Debug)]
struct Instance {
    state: InstState,
    key: (usize, usize, usize),
}

/// Active navigational token. `bindings` are the unresolved instances the
/// token's chains depend on, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct NavToken {
    auto: usize,
    state: StateId,
    bindings: Vec<InstId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct BranchToken {
    auto: usize,
    branch: usize,
    state: StateId,
    inst: InstId,
}

#[derive(Debug, Default)]
struct Frame {
    nav: Vec<NavToken>,
    branch: Vec<BranchToken>,
    rec: Option<RecId>,
    /// Children of this frame are processed as depth bookkeeping only.
    dead: bool,
    /// Instances anchored at this depth; they fail when the frame pops.
    spawned: Vec<InstId>,
}

/// Sign cell of one element. An empty `Cond` inherits the parent.
#[derive(Debug)]
enum Cell {
    Firm(bool),
    Cond { neg: Vec<Vec<InstId>>, pos: Vec<Vec<InstId>>, pos_firm: bool },
}

#[derive(Debug)]
struct Rec {
    parent: Option<RecId>,
    cell: Cell,
    /// Resolved grant decision (the element's effective sign).
    granted: Option<bool>,
    /// True once this element or any descendant is known granted.
    kept: bool,
    /// True once it is known that nothing at or under this element is
    /// granted (its open/close are not part of the output).
    e_false: bool,
    closed: bool,
    /// Own grant still undecided.
    own_pending: bool,
    /// Children whose kept-or-dropped status is still undecided.
    pending_kids: usize,
    open_buf: Option<BufferId>,
    close_buf: Option<BufferId>,
    val_bufs: Vec<BufferId>,
}

/// One evaluation stage: a set of automata over one event stream.
#[derive(Debug)]
pub(crate) struct Stage {
    automata: Vec<RuleAutomaton>,
    frames: Vec<Frame>,
    recs: Vec<Rec>,
    /// Records whose grant decision is still open.
    unresolved: Vec<RecId>,
    instances: Vec<Instance>,
    live_inst: HashMap<(usize, usize, usize), InstId>,
    next_buf: BufferId,
    suspension: bool,
}

impl Stage {
    fn new(automata: Vec<RuleAutomaton>, suspension: bool) -> Self {
        let mut bottom = Frame::default();
        for (i, _) in automata.iter().enumerate() {
            bottom.nav.push(NavToken { auto: i, state: 0, bindings: Vec::new() });
        }
        Stage {
            automata,
            frames: vec![bottom],
            recs: Vec::new(),
            unresolved: Vec::new(),
            instances: Vec::new(),
            live_inst: HashMap::new(),
            next_buf: 0,
            suspension,
        }
    }

    fn depth(&self) -> usize {
        self.frames.len() - 1
    }

    fn push(&mut self, ev: &Event) -> Result<Vec<OutputAction>, Error> {
        match ev {
            Event::Open(tag) => Ok(self.open(tag)),
            Event::Value(text) => self.value(text),
            Event::Close => self.close(),
        }
    }

    fn fresh_buf(&mut self) -> BufferId {
        self.next_buf += 1;
        self.next_buf
    }

    // -- event handlers ----------------------------------------------------

    fn open(&mut self, tag: &TagName) -> Vec<OutputAction> {
        if self.frames.last().expect("bottom frame").dead {
            self.frames.push(Frame { dead: true, ..Frame::default() });
            return Vec::new();
        }
        let mut acts = Vec::new();
        let depth = self.frames.len();
        let parent_rec = self.frames.last().unwrap().rec;
        let mut new_frame = Frame::default();
        let mut anchors: Vec<(Sign, Vec<InstId>)> = Vec::new();
        let mut resolved: Vec<(InstId, bool)> = Vec::new();

        // Nav tokens fan out into the new frame.
        let nav_snapshot = self.frames.last().unwrap().nav.clone();
        for tok in &nav_snapshot {
            if tok.bindings.iter().any(|&i| self.instances[i].state == InstState::False) {
                continue;
            }
            let bindings: Vec<InstId> = tok
                .bindings
                .iter()
                .copied()
                .filter(|&i| self.instances[i].state == InstState::Open)
                .collect();
            let st = &self.automata[tok.auto].states[tok.state];
            let survives = st.nav_loop;
            let targets: Vec<StateId> =
                st.nav.iter().filter(|t| t.test.matches(tag)).map(|t| t.target).collect();
            if survives {
                push_unique(
                    &mut new_frame.nav,
                    NavToken { auto: tok.auto, state: tok.state, bindings: bindings.clone() },
                );
            }
            for target in targets {
                self.arrive(tok.auto, target, bindings.clone(), depth, &mut new_frame, &mut anchors);
            }
        }

        // Branch tokens explore predicate paths.
        let br_snapshot = self.frames.last().unwrap().branch.clone();
        for bt in &br_snapshot {
            if self.instances[bt.inst].state != InstState::Open {
                continue;
            }
            let auto = &self.automata[bt.auto];
            let br = &auto.branches[bt.branch];
            let st = &auto.states[bt.state];
            let survives = if bt.state == br.root { br.root_loop } else { st.branch_loop };
            if survives {
                push_unique(&mut new_frame.branch, bt.clone());
            }
            for (bid, tr) in &st.branch {
                if *bid == bt.branch && tr.test.matches(tag) {
                    if tr.target == br.final_state && br.equals.is_none() {
                        resolved.push((bt.inst, true));
                    } else {
                        push_unique(
                            &mut new_frame.branch,
                            BranchToken { state: tr.target, ..bt.clone() },
                        );
                    }
                }
            }
        }

        self.apply_resolutions(&resolved);

        // Sign cell for this element, from the rules anchoring here.
        let cell = self.build_cell(anchors);
        let rid = self.recs.len();
        self.recs.push(Rec {
            parent: parent_rec,
            cell,
            granted: None,
            kept: false,
            e_false: false,
            closed: false,
            own_pending: true,
            pending_kids: 0,
            open_buf: None,
            close_buf: None,
            val_bufs: Vec::new(),
        });
        if let Some(p) = parent_rec {
            self.recs[p].pending_kids += 1;
        }
        self.unresolved.push(rid);
        new_frame.rec = Some(rid);
        self.settle(&mut acts);

        if self.recs[rid].kept {
            acts.push(OutputAction::Emit(Event::Open(tag.clone())));
        } else {
            let b = self.fresh_buf();
            self.recs[rid].open_buf = Some(b);
            acts.push(OutputAction::EmitPendingRef(b, Event::Open(tag.clone())));
        }

        // Suspension: a firmly denied element with no positive tokens and no
        // live predicate exploration can affect nothing; stop the machinery
        // for its whole subtree.
        new_frame.dead = self.suspension
            && self.recs[rid].granted == Some(false)
            && new_frame.branch.is_empty()
            && new_frame.nav.iter().all(|t| self.automata[t.auto].sign == Sign::Negative);
        self.frames.push(new_frame);
        acts
    }

    fn value(&mut self, text: &str) -> Result<Vec<OutputAction>, Error> {
        if self.frames.len() == 1 {
            return Err(Error::Unbalanced("value outside any element".into()));
        }
        let top = self.frames.last().unwrap();
        if top.dead {
            return Ok(Vec::new());
        }
        let rid = top.rec.expect("live frame has a record");
        let mut resolved = Vec::new();
        for bt in &top.branch {
            if self.instances[bt.inst].state != InstState::Open {
                continue;
            }
            let br = &self.automata[bt.auto].branches[bt.branch];
            if bt.state == br.final_state && br.equals.as_deref() == Some(text) {
                resolved.push((bt.inst, true));
            }
        }
        let mut acts = Vec::new();
        self.apply_resolutions(&resolved);
        self.settle(&mut acts);
        match self.recs[rid].granted {
            Some(true) => acts.push(OutputAction::Emit(Event::Value(text.to_string()))),
            Some(false) => {}
            None => {
                let b = self.fresh_buf();
                self.recs[rid].val_bufs.push(b);
                acts.push(OutputAction::EmitPendingRef(b, Event::Value(text.to_string())));
            }
        }
        Ok(acts)
    }

    fn close(&mut self) -> Result<Vec<OutputAction>, Error> {
        if self.frames.len() == 1 {
            return Err(Error::Unbalanced("close without open".into()));
        }
        let frame = self.frames.pop().expect("non-bottom frame");
        let Some(rid) = frame.rec else {
            return Ok(Vec::new()); // inner frame of a suspended region
        };
        let mut acts = Vec::new();
        if self.recs[rid].kept {
            acts.push(OutputAction::Emit(Event::Close));
        } else {
            let b = self.fresh_buf();
            self.recs[rid].close_buf = Some(b);
            acts.push(OutputAction::EmitPendingRef(b, Event::Close));
        }
        self.recs[rid].closed = true;
        let resolved: Vec<(InstId, bool)> = frame
            .spawned
            .iter()
            .copied()
            .filter(|&i| self.instances[i].state == InstState::Open)
            .map(|i| (i, false))
            .collect();
        self.apply_resolutions(&resolved);
        self.settle(&mut acts);
        self.maybe_e_false(rid, &mut acts);
        Ok(acts)
    }

    fn finish(&mut self) -> Result<(), Error> {
        if self.frames.len() != 1 {
            return Err(Error::Unbalanced("stream ended with open elements".into()));
        }
        debug_assert!(self.unresolved.is_empty(), "all cells resolve once the root closes");
        debug_assert!(self.live_inst.is_empty(), "all instances resolve once the root closes");
        Ok(())
    }

    // -- arrivals, instances, cells ----------------------------------------

    /// A nav token lands on `state`: spawn the predicate instances rooted
    /// there, extend the bindings, record an anchor on the final state.
    fn arrive(
        &mut self,
        auto: usize,
        state: StateId,
        mut bindings: Vec<InstId>,
        depth: usize,
        new_frame: &mut Frame,
        anchors: &mut Vec<(Sign, Vec<InstId>)>,
    ) {
        let spawn_list = self.automata[auto].branches_at[state].clone();
        for bid in spawn_list {
            let key = (auto, bid, depth);
            let inst = match self.live_inst.get(&key) {
                Some(&i) => i,
                None => {
                    let i = self.instances.len();
                    self.instances.push(Instance { state: InstState::Open, key });
                    self.live_inst.insert(key, i);
                    new_frame.spawned.push(i);
                    push_unique(
                        &mut new_frame.branch,
                        BranchToken { auto, branch: bid, state, inst: i },
                    );
                    i
                }
            };
            if !bindings.contains(&inst) {
                bindings.push(inst);
            }
        }
        bindings.sort_unstable();
        if state == self.automata[auto].nav_final {
            let sign = self.automata[auto].sign;
            if !anchors.iter().any(|(s, b)| *s == sign && *b == bindings) {
                anchors.push((sign, bindings.clone()));
            }
        }
        push_unique(&mut new_frame.nav, NavToken { auto, state, bindings });
    }

    /// Builds the element's sign cell from the rules anchoring on it.
    /// Denial takes precedence at equal specificity, so any firm negative
    /// anchor collapses the cell immediately.
    fn build_cell(&self, anchors: Vec<(Sign, Vec<InstId>)>) -> Cell {
        let mut neg: Vec<Vec<InstId>> = Vec::new();
        let mut pos: Vec<Vec<InstId>> = Vec::new();
        let mut pos_firm = false;
        for (sign, obligations) in anchors {
            if obligations.iter().any(|&i| self.instances[i].state == InstState::False) {
                continue;
            }
            let live: Vec<InstId> = obligations
                .into_iter()
                .filter(|&i| self.instances[i].state == InstState::Open)
                .collect();
            match (sign, live.is_empty()) {
                (Sign::Negative, true) => return Cell::Firm(false),
                (Sign::Negative, false) => neg.push(live),
                (Sign::Positive, true) => pos_firm = true,
                (Sign::Positive, false) => pos.push(live),
            }
        }
        if neg.is_empty() && pos_firm {
            Cell::Firm(true)
        } else {
            // Empty Cond inherits the parent's sign.
            Cell::Cond { neg, pos, pos_firm }
        }
    }

    fn apply_resolutions(&mut self, resolved: &[(InstId, bool)]) {
        for &(inst, value) in resolved {
            let entry = &mut self.instances[inst];
            debug_assert_eq!(entry.state, InstState::Open);
            entry.state = if value { InstState::True } else { InstState::False };
            self.live_inst.remove(&entry.key);
        }
    }

    /// Resolves every decidable cell, cascading grant decisions into
    /// pending-buffer commits/drops and kept/dropped subtree bookkeeping.
    fn settle(&mut self, acts: &mut Vec<OutputAction>) {
        loop {
            let mut progress = false;
            let mut i = 0;
            while i < self.unresolved.len() {
                let rid = self.unresolved[i];
                match self.try_resolve(rid) {
                    Some(g) => {
                        self.recs[rid].granted = Some(g);
                        self.unresolved.swap_remove(i);
                        self.on_granted(rid, g, acts);
                        progress = true;
                    }
                    None => i += 1,
                }
            }
            if !progress {
                break;
            }
        }
    }

    fn try_resolve(&mut self, rid: RecId) -> Option<bool> {
        let parent_granted = match self.recs[rid].parent {
            None => Some(false), // closed default: deny
            Some(p) => self.recs[p].granted,
        };
        let instances = &self.instances;
        match &mut self.recs[rid].cell {
            Cell::Firm(b) => Some(*b),
            Cell::Cond { neg, pos, pos_firm } => {
                if normalize(neg, instances) {
                    self.recs[rid].cell = Cell::Firm(false);
                    return Some(false);
                }
                if !neg.is_empty() {
                    return None;
                }
                if normalize(pos, instances) || *pos_firm {
                    self.recs[rid].cell = Cell::Firm(true);
                    return Some(true);
                }
                if !pos.is_empty() {
                    return None;
                }
                parent_granted
            }
        }
    }

    fn on_granted(&mut self, rid: RecId, granted: bool, acts: &mut Vec<OutputAction>) {
        let bufs = std::mem::take(&mut self.recs[rid].val_bufs);
        if granted {
            for b in bufs {
                acts.push(OutputAction::CommitPending(b));
            }
            self.mark_kept(rid, acts);
        } else {
            for b in bufs {
                acts.push(OutputAction::DropPending(b));
            }
            self.recs[rid].own_pending = false;
            self.maybe_e_false(rid, acts);
        }
    }

    fn mark_kept(&mut self, rid: RecId, acts: &mut Vec<OutputAction>) {
        if self.recs[rid].kept {
            return;
        }
        debug_assert!(!self.recs[rid].e_false);
        self.recs[rid].kept = true;
        if let Some(b) = self.recs[rid].open_buf.take() {
            acts.push(OutputAction::CommitPending(b));
        }
        if let Some(b) = self.recs[rid].close_buf.take() {
            acts.push(OutputAction::CommitPending(b));
        }
        if let Some(p) = self.recs[rid].parent {
            self.recs[p].pending_kids -= 1;
            self.mark_kept(p, acts);
        }
    }

    fn maybe_e_false(&mut self, rid: RecId, acts: &mut Vec<OutputAction>) {
        let r = &self.recs[rid];
        if r.kept || r.e_false || !r.closed || r.pending_kids != 0 || r.own_pending {
            return;
        }
        self.recs[rid].e_false = true;
        if let Some(b) = self.recs[rid].open_buf.take() {
            acts.push(OutputAction::DropPending(b));
        }
        if let Some(b) = self.recs[rid].close_buf.take() {
            acts.push(OutputAction::DropPending(b));
        }
        if let Some(p) = self.recs[rid].parent {
            self.recs[p].pending_kids -= 1;
            self.maybe_e_false(p, acts);
        }
    }

    // -- introspection ------------------------------------------------------

    /// True when the innermost element cannot turn out granted: its sign
    /// resolved to deny, or its cell has no positive route and every
    /// fallback up the stack excludes one. Suspended regions and the
    /// above-root context fall under the deny default.
    pub(crate) fn top_cannot_grant(&self) -> bool {
        let top = self.frames.last().expect("bottom frame");
        if top.dead {
            return true;
        }
        let mut cursor = top.rec;
        loop {
            let Some(rid) = cursor else {
                return true; // deny default at the bottom of the stack
            };
            let rec = &self.recs[rid];
            match rec.granted {
                Some(granted) => return !granted,
                None => match &rec.cell {
                    Cell::Firm(b) => return !b,
                    Cell::Cond { pos, pos_firm, .. } => {
                        if *pos_firm || !pos.is_empty() {
                            return false; // a positive outcome is still possible
                        }
                        cursor = rec.parent;
                    }
                },
            }
        }
    }

    pub(crate) fn top_frame_dead(&self) -> bool {
        self.frames.last().expect("bottom frame").dead
    }

    pub(crate) fn automata(&self) -> &[RuleAutomaton] {
        &self.automata
    }

    /// Nav tokens of the top frame as (automaton, state), with dead-chain
    /// tokens filtered out.
    pub(crate) fn top_nav_tokens(&self) -> Vec<(usize, StateId)> {
        let top = self.frames.last().expect("bottom frame");
        top.nav
            .iter()
            .filter(|t| {
                !t.bindings.iter().any(|&i| self.instances[i].state == InstState::False)
            })
            .map(|t| (t.auto, t.state))
            .collect()
    }

    /// Branch tokens of the top frame with unresolved instances, as
    /// (automaton, branch, state).
    pub(crate) fn top_branch_tokens(&self) -> Vec<(usize, usize, StateId)> {
        let top = self.frames.last().expect("bottom frame");
        top.branch
            .iter()
            .filter(|t| self.instances[t.inst].state == InstState::Open)
            .map(|t| (t.auto, t.branch, t.state))
            .collect()
    }

    fn fingerprint_into(&self, h: &mut DefaultHasher) {
        for frame in &self.frames {
            let mut nav: Vec<&NavToken> = frame.nav.iter().collect();
            nav.sort_by(|a, b| (a.auto, a.state, &a.bindings).cmp(&(b.auto, b.state, &b.bindings)));
            let mut branch: Vec<&BranchToken> = frame.branch.iter().collect();
            branch.sort_by_key(|t| (t.auto, t.branch, t.state, t.inst));
            0xf2u8.hash(h);
            for t in nav {
                t.hash(h);
            }
            0x0du8.hash(h);
            for t in branch {
                t.hash(h);
            }
            frame.dead.hash(h);
        }
    }

    fn usage(&self, u: &mut MemoryUsage) {
        for frame in &self.frames {
            u.tokens += 4;
            for t in &frame.nav {
                u.tokens += 6 + 2 * t.bindings.len();
            }
            u.tokens += 10 * frame.branch.len();
        }
        for rec in &self.recs {
            let live = rec.granted.is_none() || !rec.closed || (!rec.kept && !rec.e_false);
            if !live {
                continue;
            }
            u.sign_stack += 16;
            if let Cell::Cond { neg, pos, .. } = &rec.cell {
                for set in neg.iter().chain(pos) {
                    u.sign_stack += 4 + 2 * set.len();
                }
            }
            if !rec.closed && rec.open_buf.is_some() {
                u.skeleton += 4;
            }
        }
        u.predicate_set += 10 * self.live_inst.len();
    }
}

fn push_unique<T: PartialEq>(list: &mut Vec<T>, item: T) {
    if !list.contains(&item) {
        list.push(item);
    }
}

/// Strips satisfied instances and discards failed alternatives in place.
/// Returns true when some alternative became fully satisfied.
fn normalize(sets: &mut Vec<Vec<InstId>>, instances: &[Instance]) -> bool {
    sets.retain(|set| !set.iter().any(|&i| instances[i].state == InstState::False));
    let mut fired = false;
    for set in sets.iter_mut() {
        set.retain(|&i| instances[i].state == InstState::Open);
        fired |= set.is_empty();
    }
    fired
}

/// Working-set estimate, split into the budget accountant's categories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MemoryUsage {
    pub tokens: usize,
    pub sign_stack: usize,
    pub predicate_set: usize,
    pub pending_buffers: usize,
    pub skeleton: usize,
}

impl MemoryUsage {
    pub fn total(&self) -> usize {
        self.tokens + self.sign_stack + self.predicate_set + self.pending_buffers + self.skeleton
    }
}

#[derive(Debug)]
struct QueryPipe {
    asm: OutputAssembler,
    stage: Stage,
}

/// One session's evaluator: the access stage plus, when a query is present,
/// a downstream query stage.
#[derive(Debug)]
pub struct EvaluatorState {
    access: Stage,
    query: Option<QueryPipe>,
}

/// Builds an evaluator with one automaton per rule plus one for the query.
pub fn new_evaluator(rules: &RuleSet, query: Option<&PathExpr>) -> Result<EvaluatorState, Error> {
    let mut automata = Vec::with_capacity(rules.rules.len());
    for (i, rule) in rules.rules.iter().enumerate() {
        let mut a = compile_rule(&rule.object);
        a.sign = rule.sign;
        a.origin = Origin::Rule(i);
        automata.push(a);
    }
    let access = Stage::new(automata, true);
    let query = query.map(|q| QueryPipe {
        asm: OutputAssembler::new(),
        stage: Stage::new(vec![compile_rule(q)], true),
    });
    Ok(EvaluatorState { access, query })
}

impl EvaluatorState {
    /// Feeds one event; returns the output decisions. With a query present,
    /// the actions are those of the query stage (accessed events flow into
    /// it as they resolve).
    pub fn push_event(&mut self, ev: &Event) -> Result<Vec<OutputAction>, Error> {
        let acts = self.access.push(ev)?;
        let Some(pipe) = &mut self.query else {
            return Ok(acts);
        };
        let mut released = Vec::new();
        for act in &acts {
            pipe.asm.push(act, &mut released);
        }
        let mut out = Vec::new();
        for ev in &released {
            out.extend(pipe.stage.push(ev)?);
        }
        Ok(out)
    }

    /// End of stream: verifies balance and flushes the inter-stage pipe.
    pub fn finish(&mut self) -> Result<Vec<OutputAction>, Error> {
        self.access.finish()?;
        let Some(pipe) = &mut self.query else {
            return Ok(Vec::new());
        };
        let mut released = Vec::new();
        std::mem::take(&mut pipe.asm).finish(&mut released)?;
        let mut out = Vec::new();
        for ev in &released {
            out.extend(pipe.stage.push(ev)?);
        }
        pipe.stage.finish()?;
        Ok(out)
    }

    /// Number of currently open elements in the input stream.
    pub fn depth(&self) -> usize {
        self.access.depth()
    }

    /// Total automata count (rules plus query).
    pub fn automata_count(&self) -> usize {
        self.access.automata.len() + self.query.as_ref().map_or(0, |p| p.stage.automata.len())
    }

    /// Size of the compiled automata, charged once at session open.
    pub fn automata_bytes(&self) -> usize {
        let mut n: usize = self.access.automata.iter().map(RuleAutomaton::byte_size).sum();
        if let Some(pipe) = &self.query {
            n += pipe.stage.automata.iter().map(RuleAutomaton::byte_size).sum::<usize>();
        }
        n
    }

    /// Disables or enables the suspension optimization (on by default).
    /// Used by the differential tests proving it output-invariant.
    pub fn set_suspension(&mut self, on: bool) {
        self.access.suspension = on;
        if let Some(pipe) = &mut self.query {
            pipe.stage.suspension = on;
        }
    }

    /// Order-insensitive digest of the token stacks, for backtrack
    /// instrumentation: the digest after a close equals the digest before
    /// the matching open.
    pub fn stack_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.access.fingerprint_into(&mut h);
        if let Some(pipe) = &self.query {
            pipe.stage.fingerprint_into(&mut h);
        }
        h.finish()
    }

    /// Current working-set estimate across both stages and the inter-stage
    /// pipe.
    pub fn memory_usage(&self) -> MemoryUsage {
        let mut u = MemoryUsage::default();
        self.access.usage(&mut u);
        if let Some(pipe) = &self.query {
            pipe.stage.usage(&mut u);
            u.pending_buffers += pipe.asm.buffered_bytes();
        }
        u
    }

    pub(crate) fn stages(&self) -> (&Stage, Option<&Stage>) {
        (&self.access, self.query.as_ref().map(|p| &p.stage))
    }
}

/// Evaluates a whole stream: the output equals the event stream of the
/// composed oracle views (access pruning, then query pruning), with all
/// pending buffers resolved.
pub fn evaluate_stream(
    rules: &RuleSet,
    query: Option<&PathExpr>,
    events: &[Event],
) -> Result<Vec<Event>, Error> {
    let mut evaluator = new_evaluator(rules, query)?;
    let mut asm = OutputAssembler::new();
    let mut out = Vec::new();
    for ev in events {
        for act in evaluator.push_event(ev)? {
            asm.push(&act, &mut out);
        }
    }
    for act in evaluator.finish()? {
        asm.push(&act, &mut out);
    }
    asm.finish(&mut out)?;
    Ok(out)
}
