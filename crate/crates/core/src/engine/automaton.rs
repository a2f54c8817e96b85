//! Compilation of path expressions to non-deterministic automata.
//!
//! An automaton is a navigational chain of states (one per step) with
//! predicate branches sharing the arrival state of the step they qualify.
//! The descendant axis is realized as a wildcard self-loop on the source
//! state feeding the labeled transition; there is no determinization, so the
//! state count stays at one plus the total step count.

use crate::access::Sign;
use crate::xpath::{Axis, NodeTest, PathExpr};

pub type StateId = usize;
pub type BranchId = usize;

#[derive(Debug, Clone)]
pub struct Transition {
    pub test: NodeTest,
    pub target: StateId,
}

#[derive(Debug, Clone, Default)]
pub struct State {
    /// Navigational transitions (consume one open event).
    pub nav: Vec<Transition>,
    /// Wildcard self-loop: a nav token here survives into deeper frames
    /// (the next navigational step uses the descendant axis).
    pub nav_loop: bool,
    /// Predicate-lane transitions, tagged with the branch they belong to.
    pub branch: Vec<(BranchId, Transition)>,
    /// Self-loop for branch tokens resting here (descendant step inside a
    /// predicate path). Branch-internal states belong to exactly one branch.
    pub branch_loop: bool,
}

/// One predicate path, rooted at the navigational state of the step it
/// qualifies.
#[derive(Debug, Clone)]
pub struct Branch {
    pub root: StateId,
    /// First predicate step uses the descendant axis: the root token
    /// survives into deeper frames.
    pub root_loop: bool,
    pub final_state: StateId,
    /// Value check at the final state; `None` means the branch is satisfied
    /// on arrival.
    pub equals: Option<String>,
}

/// Where an automaton came from; the query automaton is always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Rule(usize),
    Query,
}

#[derive(Debug, Clone)]
pub struct RuleAutomaton {
    pub states: Vec<State>,
    pub nav_final: StateId,
    pub branches: Vec<Branch>,
    /// Branches to spawn when a nav token arrives at each state.
    pub branches_at: Vec<Vec<BranchId>>,
    pub sign: Sign,
    pub origin: Origin,
}

impl RuleAutomaton {
    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    /// Rough working-set size of the compiled automaton, for the budget
    /// accountant.
    pub fn byte_size(&self) -> usize {
        let mut n = 16;
        for s in &self.states {
            n += 8;
            for t in &s.nav {
                n += 4 + test_bytes(&t.test);
            }
            for (_, t) in &s.branch {
                n += 6 + test_bytes(&t.test);
            }
        }
        for b in &self.branches {
            n += 8 + b.equals.as_ref().map_or(0, String::len);
        }
        n
    }
}

fn test_bytes(test: &NodeTest) -> usize {
    match test {
        NodeTest::Wildcard => 1,
        NodeTest::Tag(t) => t.as_str().len(),
    }
}

/// Compiles one expression. The caller assigns sign and origin afterwards;
/// a freshly compiled automaton is a positive rule.
pub fn compile_rule(expr: &PathExpr) -> RuleAutomaton {
    let mut states = vec![State::default()];
    let mut branches: Vec<Branch> = Vec::new();
    let mut cur: StateId = 0;
    for step in &expr.steps {
        let next = states.len();
        states.push(State::default());
        if step.axis == Axis::Descendant {
            states[cur].nav_loop = true;
        }
        states[cur].nav.push(Transition { test: step.test.clone(), target: next });
        cur = next;
        for pred in &step.predicates {
            let bid = branches.len();
            let mut root_loop = false;
            let mut bcur = cur;
            for (i, pstep) in pred.path.iter().enumerate() {
                if pstep.axis == Axis::Descendant {
                    if i == 0 {
                        root_loop = true;
                    } else {
                        states[bcur].branch_loop = true;
                    }
                }
                let target = states.len();
                states.push(State::default());
                states[bcur].branch.push((bid, Transition { test: pstep.test.clone(), target }));
                bcur = target;
            }
            branches.push(Branch {
                root: cur,
                root_loop,
                final_state: bcur,
                equals: pred.equals.clone(),
            });
        }
    }
    let mut branches_at = vec![Vec::new(); states.len()];
    for (bid, b) in branches.iter().enumerate() {
        branches_at[b.root].push(bid);
    }
    RuleAutomaton {
        states,
        nav_final: cur,
        branches,
        branches_at,
        sign: Sign::Positive,
        origin: Origin::Query,
    }
}
