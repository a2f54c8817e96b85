//! Deterministic random generators for documents, path expressions, and rule
//! sets. Used by the differential test harnesses; seeded, dependency-free,
//! and stable across runs.

use crate::access::{AccessRule, Sign};
use crate::document::Node;
use crate::xpath::{Axis, NodeTest, PathExpr, Predicate, Step, TagName};

/// SplitMix64. Good enough for test-case generation, tiny, and stable.
#[derive(Debug, Clone)]
pub struct Rng(u64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// True with probability `num/den`.
    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.next_u64() % den < num
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

/// Text pool shared by tree and predicate generation so that equality
/// predicates are sometimes satisfied.
const TEXT_POOL: &[&str] = &["v0", "v1", "v2", "w w"];

/// Random tree with `1..=max_nodes` elements over the given tag alphabet.
/// Some leaves carry text from the shared pool.
pub fn gen_tree(rng: &mut Rng, max_nodes: usize, alphabet: &[&str]) -> Node {
    let n = 1 + rng.below(max_nodes);
    let tag = |rng: &mut Rng| TagName::new(alphabet[rng.below(alphabet.len())]).unwrap();
    let mut nodes: Vec<(Option<usize>, Node)> = vec![(None, Node::new(tag(rng)))];
    for _ in 1..n {
        let parent = rng.below(nodes.len());
        nodes.push((Some(parent), Node::new(tag(rng))));
    }
    // Attach text to some childless nodes, then assemble children bottom-up
    // (later entries always attach to earlier ones).
    let has_children: Vec<bool> = (0..nodes.len())
        .map(|i| nodes.iter().any(|(p, _)| *p == Some(i)))
        .collect();
    for (i, (_, node)) in nodes.iter_mut().enumerate() {
        if !has_children[i] && rng.chance(1, 2) {
            node.text = Some((*rng.pick(TEXT_POOL)).to_string());
        }
    }
    for i in (1..nodes.len()).rev() {
        let (parent, node) = nodes.swap_remove(i);
        let parent = parent.expect("non-root has a parent");
        debug_assert!(parent < i);
        nodes[parent].1.children.insert(0, node);
    }
    nodes.pop().expect("root remains").1
}

fn gen_test(rng: &mut Rng, alphabet: &[&str]) -> NodeTest {
    if rng.chance(1, 4) {
        NodeTest::Wildcard
    } else {
        NodeTest::Tag(TagName::new(alphabet[rng.below(alphabet.len())]).unwrap())
    }
}

fn gen_axis(rng: &mut Rng) -> Axis {
    if rng.chance(2, 5) {
        Axis::Descendant
    } else {
        Axis::Child
    }
}

fn gen_predicate(rng: &mut Rng, alphabet: &[&str]) -> Predicate {
    let len = 1 + rng.below(2);
    let path = (0..len).map(|_| Step::new(gen_axis(rng), gen_test(rng, alphabet))).collect();
    let equals =
        if rng.chance(2, 5) { Some((*rng.pick(TEXT_POOL)).to_string()) } else { None };
    Predicate { path, equals }
}

/// Random expression from the fragment: child/descendant axes, wildcards,
/// and (optionally) predicates with and without equality checks.
pub fn gen_xpath(rng: &mut Rng, alphabet: &[&str], predicates: bool, max_steps: usize) -> PathExpr {
    let len = 1 + rng.below(max_steps);
    let steps = (0..len)
        .map(|_| {
            let mut step = Step::new(gen_axis(rng), gen_test(rng, alphabet));
            if predicates && rng.chance(3, 10) {
                step.predicates.push(gen_predicate(rng, alphabet));
                if rng.chance(1, 8) {
                    step.predicates.push(gen_predicate(rng, alphabet));
                }
            }
            step
        })
        .collect();
    PathExpr { steps }
}

/// Random rule list for one subject. Positive rules outnumber negative ones
/// so that a useful fraction of cases grant something.
pub fn gen_rules(
    rng: &mut Rng,
    subject: &str,
    alphabet: &[&str],
    max_rules: usize,
) -> Vec<AccessRule> {
    let n = rng.below(max_rules + 1);
    (0..n)
        .map(|_| AccessRule {
            sign: if rng.chance(3, 5) { Sign::Positive } else { Sign::Negative },
            subject: subject.to_string(),
            object: gen_xpath(rng, alphabet, true, 4),
        })
        .collect()
}
