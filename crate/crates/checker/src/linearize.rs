//! Linearizability of set histories: a depth-first search over orderings
//! consistent with real time, memoizing (linearized set, abstract state)
//! pairs already shown to be dead ends.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::history::{History, HistoryError, OpKind, Operation};

/// Explored search states after which a check gives up.
pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// Histories are limited so that both the linearized set and the abstract
/// state fit in a machine word.
pub const MAX_OPERATIONS: usize = 64;
pub const MAX_DISTINCT_KEYS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    /// `witness` lists operations in a legal sequential order.
    Linearizable { witness: Vec<Operation> },
    /// No legal order exists. `blocked` is an operation that no extension of
    /// the longest legal prefix could place; `against` is the last operation
    /// in that prefix on the same key, if any.
    Violation {
        blocked: Operation,
        against: Option<Operation>,
        longest_prefix: Vec<Operation>,
    },
    /// The search budget ran out before a decision.
    Inconclusive { explored: u64 },
}

impl Verdict {
    pub fn is_linearizable(&self) -> bool {
        matches!(self, Verdict::Linearizable { .. })
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, Verdict::Violation { .. })
    }

    pub fn is_inconclusive(&self) -> bool {
        matches!(self, Verdict::Inconclusive { .. })
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum CheckError {
    #[error(transparent)]
    Malformed(#[from] HistoryError),
    #[error("history has {0} operations; at most {MAX_OPERATIONS} are supported")]
    TooManyOperations(usize),
    #[error("history uses {0} distinct keys; at most {MAX_DISTINCT_KEYS} are supported")]
    TooManyKeys(usize),
}

/// Checks a history against set semantics with [`DEFAULT_BUDGET`].
pub fn check_linearizable(history: &History) -> Result<Verdict, CheckError> {
    check_with_budget(history, DEFAULT_BUDGET)
}

pub fn check_with_budget(history: &History, budget: u64) -> Result<Verdict, CheckError> {
    let ops = history.operations()?;
    if ops.len() > MAX_OPERATIONS {
        return Err(CheckError::TooManyOperations(ops.len()));
    }
    let mut index: HashMap<u64, u32> = HashMap::new();
    for k in history.initial.iter().chain(ops.iter().map(|o| &o.key)) {
        let n = index.len() as u32;
        index.entry(*k).or_insert(n);
    }
    if index.len() > MAX_DISTINCT_KEYS {
        return Err(CheckError::TooManyKeys(index.len()));
    }
    let initial = history.initial.iter().fold(0u64, |s, k| s | 1 << index[k]);
    let bits: Vec<u64> = ops.iter().map(|o| 1 << index[&o.key]).collect();
    let mut search = Search {
        ops: &ops,
        bits: &bits,
        dead: HashSet::new(),
        explored: 0,
        budget,
        path: Vec::with_capacity(ops.len()),
        best: Vec::new(),
        best_frontier: 0,
    };
    let all = if ops.len() == 64 {
        u64::MAX
    } else {
        (1u64 << ops.len()) - 1
    };
    Ok(match search.run(0, initial, all) {
        Some(true) => Verdict::Linearizable {
            witness: search.path.iter().map(|&i| ops[i]).collect(),
        },
        Some(false) => {
            let prefix: Vec<Operation> = search.best.iter().map(|&i| ops[i]).collect();
            let blocked = ops[search.best_frontier];
            let against = prefix.iter().rev().find(|o| o.key == blocked.key).copied();
            Verdict::Violation {
                blocked,
                against,
                longest_prefix: prefix,
            }
        }
        None => Verdict::Inconclusive {
            explored: search.explored,
        },
    })
}

struct Search<'a> {
    ops: &'a [Operation],
    bits: &'a [u64],
    dead: HashSet<(u64, u64)>,
    explored: u64,
    budget: u64,
    path: Vec<usize>,
    best: Vec<usize>,
    best_frontier: usize,
}

impl Search<'_> {
    /// Some(true) when the remaining operations can be linearized from
    /// `state`, Some(false) when they cannot, None when out of budget.
    fn run(&mut self, done: u64, state: u64, all: u64) -> Option<bool> {
        if done == all {
            return Some(true);
        }
        if self.dead.contains(&(done, state)) {
            return Some(false);
        }
        self.explored += 1;
        if self.explored > self.budget {
            return None;
        }
        let pending: Vec<usize> = (0..self.ops.len())
            .filter(|&i| done & (1 << i) == 0)
            .collect();
        let first = *pending
            .iter()
            .min_by_key(|&&i| self.ops[i].response)
            .expect("pending operation");
        let horizon = self.ops[first].response;
        if self.path.len() >= self.best.len() {
            self.best = self.path.clone();
            self.best_frontier = first;
        }
        for i in pending
            .into_iter()
            .filter(|&i| self.ops[i].invoke <= horizon)
        {
            let Some(next) = apply(&self.ops[i], self.bits[i], state) else {
                continue;
            };
            self.path.push(i);
            match self.run(done | 1 << i, next, all) {
                Some(true) => return Some(true),
                Some(false) => {}
                None => return None,
            }
            self.path.pop();
        }
        self.dead.insert((done, state));
        Some(false)
    }
}

/// The state after `op`, or None if its recorded result is impossible in
/// `state`.
fn apply(op: &Operation, bit: u64, state: u64) -> Option<u64> {
    let present = state & bit != 0;
    match (op.op, op.result) {
        (OpKind::Lookup, r) => (r == present).then_some(state),
        (OpKind::Insert, true) => (!present).then_some(state | bit),
        (OpKind::Insert, false) => present.then_some(state),
        (OpKind::Delete, true) => present.then_some(state & !bit),
        (OpKind::Delete, false) => (!present).then_some(state),
    }
}

/// Replays a sequential order of operations against set semantics. Used to
/// validate witnesses.
pub fn is_legal_sequence(initial: &[u64], ops: &[Operation]) -> bool {
    let mut set: HashSet<u64> = initial.iter().copied().collect();
    ops.iter().all(|o| match (o.op, o.result) {
        (OpKind::Lookup, r) => set.contains(&o.key) == r,
        (OpKind::Insert, true) => set.insert(o.key),
        (OpKind::Insert, false) => set.contains(&o.key),
        (OpKind::Delete, true) => set.remove(&o.key),
        (OpKind::Delete, false) => !set.contains(&o.key),
    })
}

/// True if `order` places no operation before one that finished before it
/// started.
pub fn respects_real_time(order: &[Operation]) -> bool {
    order
        .iter()
        .enumerate()
        .all(|(i, a)| order[i + 1..].iter().all(|b| b.response >= a.invoke))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(
        thread: usize,
        op: OpKind,
        key: u64,
        result: bool,
        invoke: u64,
        response: u64,
    ) -> Operation {
        Operation {
            thread,
            op,
            key,
            result,
            invoke,
            response,
        }
    }

    #[test]
    fn sequential_history_gets_identity_witness() {
        let ops = [
            op(0, OpKind::Insert, 1, true, 0, 1),
            op(1, OpKind::Lookup, 1, true, 2, 3),
            op(0, OpKind::Delete, 1, true, 4, 5),
            op(1, OpKind::Lookup, 1, false, 6, 7),
        ];
        let v = check_linearizable(&History::from_operations(vec![], &ops)).unwrap();
        assert_eq!(
            v,
            Verdict::Linearizable {
                witness: ops.to_vec()
            }
        );
    }

    #[test]
    fn stale_lookup_after_completed_insert_is_a_violation() {
        let ops = [
            op(0, OpKind::Insert, 1, true, 0, 1),
            op(1, OpKind::Lookup, 1, false, 2, 3),
        ];
        let v = check_linearizable(&History::from_operations(vec![], &ops)).unwrap();
        let Verdict::Violation {
            blocked, against, ..
        } = v
        else {
            panic!("{v:?}")
        };
        assert_eq!(blocked, ops[1]);
        assert_eq!(against, Some(ops[0]));
    }

    #[test]
    fn overlapping_operations_may_reorder() {
        let ops = [
            op(0, OpKind::Insert, 1, true, 0, 10),
            op(1, OpKind::Lookup, 1, false, 2, 3),
        ];
        let v = check_linearizable(&History::from_operations(vec![], &ops)).unwrap();
        let Verdict::Linearizable { witness } = v else {
            panic!()
        };
        assert_eq!(witness[0], ops[1]);
    }

    #[test]
    fn budget_exhaustion_is_inconclusive() {
        // Many overlapping failing lookups force a wide search before the
        // contradiction at the end is found.
        let mut ops: Vec<Operation> = (0..12)
            .map(|t| op(t, OpKind::Lookup, t as u64 % 3, false, 0, 100))
            .collect();
        ops.push(op(12, OpKind::Lookup, 0, true, 200, 201));
        let v = check_with_budget(&History::from_operations(vec![], &ops), 50).unwrap();
        assert!(v.is_inconclusive(), "{v:?}");
        let v = check_linearizable(&History::from_operations(vec![], &ops)).unwrap();
        assert!(v.is_violation());
    }

    #[test]
    fn initial_state_counts() {
        let ops = [op(0, OpKind::Delete, 7, true, 0, 1)];
        assert!(check_linearizable(&History::from_operations(vec![7], &ops))
            .unwrap()
            .is_linearizable());
        assert!(check_linearizable(&History::from_operations(vec![], &ops))
            .unwrap()
            .is_violation());
    }

    #[test]
    fn legality_helpers() {
        let a = op(0, OpKind::Insert, 1, true, 0, 1);
        let b = op(1, OpKind::Insert, 1, false, 2, 3);
        assert!(is_legal_sequence(&[], &[a, b]));
        assert!(!is_legal_sequence(&[], &[b, a]));
        assert!(respects_real_time(&[a, b]));
        assert!(!respects_real_time(&[b, a]));
    }
}
