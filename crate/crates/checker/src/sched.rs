//! Exhaustive interleaving of a rebuild with a few client operations.
//!
//! Every participating thread stops at each schedule point and waits for the
//! token, so exactly one runs at a time and the code between two points
//! executes as one step. A depth-first walk over the token choices replays
//! the scenario once per distinct interleaving.
//!
//! The rebuilder cannot take a step that starts a grace period while a client
//! is stopped inside an operation, since that client is inside a critical
//! section and the step would never finish. Those choices are skipped.

use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use serde::Serialize;

use dhash::{hash, reclaim, DHash, SchedulePoint};

use crate::history::{History, OpKind, Operation};
use crate::linearize::{check_linearizable, Verdict};

/// Where a thread is stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Start,
    /// A client about to issue its `n`th operation.
    BeforeOp(usize),
    Point(SchedulePoint, u64),
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Start => f.write_str("start"),
            Label::BeforeOp(n) => write!(f, "op#{n}"),
            Label::Point(p, k) => write!(f, "{p:?}({k})"),
        }
    }
}

/// Actor 0 is the rebuilder; client `i` is actor `i + 1`.
pub const REBUILDER: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub actor: usize,
    pub from: Label,
}

/// Outcome of one interleaving.
#[derive(Debug, Clone)]
pub struct Run {
    /// Per client, the result of each operation in issue order.
    pub results: Vec<Vec<bool>>,
    pub final_keys: Vec<u64>,
    pub history: History,
    pub trace: Vec<Step>,
    /// Some client step ran while a node with the key of that client's
    /// pending operation was between its old and new bucket.
    pub hit_hazard_window: bool,
}

impl Run {
    pub fn trace_string(&self) -> String {
        self.trace
            .iter()
            .map(|s| {
                format!(
                    "{}@{}",
                    if s.actor == REBUILDER {
                        "R".to_string()
                    } else {
                        format!("C{}", s.actor - 1)
                    },
                    s.from
                )
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub type Expectation = fn(&Run) -> Result<(), String>;

pub struct Scenario {
    pub name: &'static str,
    pub initial: Vec<u64>,
    pub buckets: usize,
    pub new_buckets: usize,
    pub clients: Vec<Vec<(OpKind, u64)>>,
    pub expect: Expectation,
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub trace: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Exploration {
    pub scenario: &'static str,
    pub interleavings: u64,
    pub hazard_window_interleavings: u64,
    pub failures: Vec<Failure>,
    /// True if the walk stopped at the interleaving limit.
    pub truncated: bool,
}

impl Exploration {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && !self.truncated
    }
}

struct Ctl {
    parked: Vec<Option<Label>>,
    done: Vec<bool>,
    turn: Option<usize>,
    step: u64,
    abort: bool,
}

struct Shared {
    ctl: Mutex<Ctl>,
    cv: Condvar,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Ctl> {
        self.ctl.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Stops the calling actor at `label` until it is handed the token.
    fn park(&self, me: usize, label: Label) {
        let mut c = self.lock();
        c.parked[me] = Some(label);
        self.cv.notify_all();
        while c.turn != Some(me) && !c.abort {
            c = self.cv.wait(c).unwrap_or_else(|e| e.into_inner());
        }
        if c.turn == Some(me) {
            c.turn = None;
        }
        c.parked[me] = None;
    }

    fn finish(&self, me: usize) {
        let mut c = self.lock();
        c.done[me] = true;
        self.cv.notify_all();
    }

    fn now(&self) -> u64 {
        self.lock().step
    }
}

thread_local! {
    static ACTOR: Cell<Option<usize>> = const { Cell::new(None) };
}

/// One walk at a time: a rebuilder stopped by one walk must not wait on a
/// client stopped by another.
static WALK: Mutex<()> = Mutex::new(());

const STALL: Duration = Duration::from_secs(20);

fn blocks_on_readers(label: Label) -> bool {
    matches!(
        label,
        Label::Point(
            SchedulePoint::RebuildPublished
                | SchedulePoint::RebuildDistributed
                | SchedulePoint::RebuildInstalled,
            _
        )
    )
}

/// Runs `scenario` once, following `prefix` for the first choices and the
/// first enabled actor afterwards. Returns the run and, per choice, the index
/// taken and the number of alternatives.
fn execute(scenario: &Scenario, prefix: &[usize]) -> Result<(Run, Vec<(usize, usize)>), String> {
    let actors = scenario.clients.len() + 1;
    let table: DHash<u64> =
        DHash::new(scenario.buckets, hash::identity()).map_err(|e| e.to_string())?;
    for &k in &scenario.initial {
        table
            .insert(k, k)
            .map_err(|e| format!("prefill {k}: {e}"))?;
    }
    let shared = Arc::new(Shared {
        ctl: Mutex::new(Ctl {
            parked: vec![None; actors],
            done: vec![false; actors],
            turn: None,
            step: 0,
            abort: false,
        }),
        cv: Condvar::new(),
    });
    let hook_shared = Arc::clone(&shared);
    table.set_schedule_hook(Arc::new(move |p: SchedulePoint, k: u64| {
        if let Some(me) = ACTOR.with(Cell::get) {
            hook_shared.park(me, Label::Point(p, k));
        }
    }));

    let mut trace = Vec::new();
    let mut choices = Vec::new();
    let mut hit = false;
    let mut ops: Vec<Operation> = Vec::new();
    let mut results = vec![Vec::new(); scenario.clients.len()];
    let mut stalled = None;

    thread::scope(|s| {
        let rebuilder = {
            let (table, shared) = (&table, &shared);
            let nb = scenario.new_buckets;
            s.spawn(move || {
                ACTOR.with(|a| a.set(Some(REBUILDER)));
                shared.park(REBUILDER, Label::Start);
                let r = table.rebuild(nb, hash::multiplicative(0x9e37_79b9_7f4a_7c15));
                ACTOR.with(|a| a.set(None));
                shared.finish(REBUILDER);
                r.map(|_| ())
            })
        };
        let clients: Vec<_> = scenario
            .clients
            .iter()
            .enumerate()
            .map(|(i, plan)| {
                let (table, shared) = (&table, &shared);
                s.spawn(move || {
                    let me = i + 1;
                    reclaim::register_current_thread();
                    ACTOR.with(|a| a.set(Some(me)));
                    let mut log = Vec::new();
                    for (n, &(op, key)) in plan.iter().enumerate() {
                        shared.park(me, Label::BeforeOp(n));
                        let invoke = shared.now();
                        let result = match op {
                            OpKind::Lookup => table.contains(key),
                            OpKind::Insert => table.insert(key, key).is_ok(),
                            OpKind::Delete => table.delete(key).is_ok(),
                        };
                        let response = shared.now();
                        log.push(Operation {
                            thread: i,
                            op,
                            key,
                            result,
                            invoke,
                            response,
                        });
                    }
                    ACTOR.with(|a| a.set(None));
                    reclaim::unregister_current_thread();
                    shared.finish(me);
                    log
                })
            })
            .collect();

        // Which operation each client has pending, for the hazard window.
        let mut next_op = vec![0usize; scenario.clients.len()];
        let mut c = shared.lock();
        loop {
            let settled = |c: &Ctl| {
                c.turn.is_none() && (0..actors).all(|a| c.done[a] || c.parked[a].is_some())
            };
            while !settled(&c) {
                let (g, t) = shared
                    .cv
                    .wait_timeout(c, STALL)
                    .unwrap_or_else(|e| e.into_inner());
                c = g;
                if t.timed_out() && !settled(&c) {
                    stalled = Some(format!(
                        "no progress for {STALL:?}; parked {:?} done {:?}",
                        c.parked, c.done
                    ));
                    c.abort = true;
                    shared.cv.notify_all();
                    break;
                }
            }
            if stalled.is_some() || c.done.iter().all(|&d| d) {
                break;
            }
            let client_mid_op = (1..actors).any(|a| matches!(c.parked[a], Some(Label::Point(..))));
            let enabled: Vec<usize> = (0..actors)
                .filter(|&a| match c.parked[a] {
                    Some(l) if a == REBUILDER => !(blocks_on_readers(l) && client_mid_op),
                    Some(_) => true,
                    None => false,
                })
                .collect();
            assert!(
                !enabled.is_empty(),
                "no actor can move: parked {:?}",
                c.parked
            );
            let idx = prefix.get(choices.len()).copied().unwrap_or(0);
            let idx = idx.min(enabled.len() - 1);
            choices.push((idx, enabled.len()));
            let actor = enabled[idx];
            let from = c.parked[actor].expect("enabled actor is parked");
            if actor != REBUILDER {
                let client = actor - 1;
                if let Label::BeforeOp(n) = from {
                    next_op[client] = n;
                }
                if let (
                    Some(Label::Point(SchedulePoint::RebuildAfterOldDelete, k)),
                    Some(&(_, key)),
                ) = (
                    c.parked[REBUILDER],
                    scenario.clients[client].get(next_op[client]),
                ) {
                    hit |= k == key;
                }
            }
            trace.push(Step { actor, from });
            c.step += 1;
            c.turn = Some(actor);
            shared.cv.notify_all();
        }
        drop(c);
        let rebuilt = rebuilder.join();
        for (i, h) in clients.into_iter().enumerate() {
            match h.join() {
                Ok(log) => {
                    results[i] = log.iter().map(|o| o.result).collect();
                    ops.extend(log);
                }
                Err(_) => stalled = Some(format!("client {i} panicked")),
            }
        }
        match rebuilt {
            Ok(Ok(())) => {}
            Ok(Err(e)) => stalled = Some(format!("rebuild failed: {e}")),
            Err(_) => stalled = Some("rebuilder panicked".into()),
        }
    });
    let run = Run {
        results,
        final_keys: table.keys(),
        history: History::from_operations(scenario.initial.clone(), &ops),
        trace,
        hit_hazard_window: hit,
    };
    if let Some(e) = stalled {
        return Err(format!("{e}; trace {}", run.trace_string()));
    }
    if let Err(e) = table.check_invariants() {
        return Err(format!("invariants: {e}; trace {}", run.trace_string()));
    }
    Ok((run, choices))
}

fn judge(scenario: &Scenario, run: &Run) -> Result<(), String> {
    match check_linearizable(&run.history) {
        Ok(Verdict::Linearizable { .. }) => {}
        Ok(v) => return Err(format!("not linearizable: {v:?}")),
        Err(e) => return Err(format!("bad history: {e}")),
    }
    let mut sorted = run.final_keys.clone();
    sorted.dedup();
    if sorted.len() != run.final_keys.len() {
        return Err(format!(
            "duplicate keys after rebuild: {:?}",
            run.final_keys
        ));
    }
    (scenario.expect)(run)
}

/// Walks every interleaving of `scenario`, up to `limit` of them.
pub fn explore(scenario: &Scenario, limit: u64) -> Exploration {
    let _walk = WALK.lock().unwrap_or_else(|e| e.into_inner());
    let mut out = Exploration {
        scenario: scenario.name,
        interleavings: 0,
        hazard_window_interleavings: 0,
        failures: Vec::new(),
        truncated: false,
    };
    let mut prefix: Vec<usize> = Vec::new();
    loop {
        if out.interleavings >= limit {
            out.truncated = true;
            break;
        }
        out.interleavings += 1;
        let mut choices = match execute(scenario, &prefix) {
            Ok((run, choices)) => {
                out.hazard_window_interleavings += u64::from(run.hit_hazard_window);
                if let Err(error) = judge(scenario, &run) {
                    out.failures.push(Failure {
                        trace: run.trace_string(),
                        error,
                    });
                }
                choices
            }
            Err(error) => {
                out.failures.push(Failure {
                    trace: String::new(),
                    error,
                });
                break;
            }
        };
        while let Some((i, n)) = choices.pop() {
            if i + 1 < n {
                choices.push((i + 1, n));
                break;
            }
        }
        if choices.is_empty() {
            break;
        }
        prefix = choices.iter().map(|&(i, _)| i).collect();
    }
    reclaim::drain();
    out
}

fn expect_results(run: &Run, want: &[&[bool]]) -> Result<(), String> {
    if run
        .results
        .iter()
        .map(Vec::as_slice)
        .eq(want.iter().copied())
    {
        Ok(())
    } else {
        Err(format!("results {:?}, expected {want:?}", run.results))
    }
}

fn expect_keys(run: &Run, want: &[u64]) -> Result<(), String> {
    if run.final_keys == want {
        Ok(())
    } else {
        Err(format!(
            "final keys {:?}, expected {want:?}",
            run.final_keys
        ))
    }
}

/// The hazard-window scenarios: one or two clients racing a rebuild that
/// moves every node of a small table.
pub fn scenarios() -> Vec<Scenario> {
    use OpKind::*;
    vec![
        Scenario {
            name: "lookup_resident",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Lookup, 1), (Lookup, 2)]],
            expect: |r| expect_results(r, &[&[true, true]]).and(expect_keys(r, &[1, 2])),
        },
        Scenario {
            name: "lookup_absent",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Lookup, 3)]],
            expect: |r| expect_results(r, &[&[false]]).and(expect_keys(r, &[1, 2])),
        },
        Scenario {
            name: "delete_resident",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 1), (Lookup, 1)]],
            expect: |r| expect_results(r, &[&[true, false]]).and(expect_keys(r, &[2])),
        },
        Scenario {
            name: "delete_absent",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 3)]],
            expect: |r| expect_results(r, &[&[false]]).and(expect_keys(r, &[1, 2])),
        },
        Scenario {
            name: "insert_fresh",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Insert, 3), (Lookup, 3)]],
            expect: |r| expect_results(r, &[&[true, true]]).and(expect_keys(r, &[1, 2, 3])),
        },
        Scenario {
            name: "insert_existing",
            initial: vec![1, 2],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Insert, 1)]],
            expect: |r| expect_results(r, &[&[false]]).and(expect_keys(r, &[1, 2])),
        },
        Scenario {
            name: "delete_then_reinsert",
            initial: vec![1],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 1), (Insert, 1), (Lookup, 1)]],
            expect: |r| expect_results(r, &[&[true, true, true]]).and(expect_keys(r, &[1])),
        },
        Scenario {
            name: "double_delete",
            initial: vec![1],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 1)], vec![(Delete, 1)]],
            expect: |r| {
                let wins = r.results.iter().flatten().filter(|&&x| x).count();
                if wins != 1 {
                    return Err(format!("{wins} deletes succeeded"));
                }
                expect_keys(r, &[])
            },
        },
        Scenario {
            name: "lookup_races_delete",
            initial: vec![1],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 1)], vec![(Lookup, 1)]],
            expect: |r| {
                expect_keys(r, &[]).and(if r.results[0] == [true] {
                    Ok(())
                } else {
                    Err("delete failed".into())
                })
            },
        },
        Scenario {
            name: "insert_races_reinsert",
            initial: vec![1],
            buckets: 1,
            new_buckets: 2,
            clients: vec![vec![(Delete, 1), (Insert, 1)], vec![(Insert, 1)]],
            expect: |r| expect_keys(r, &[1]),
        },
    ]
}
