use dhash_checker::history::{record_run, HistoryError, Phase, RecordError, RecordParams};
use dhash_checker::linearize::{
    check_linearizable, is_legal_sequence, respects_real_time, Verdict,
};
use dhash_checker::{History, HistoryEvent, OpKind};

fn params(threads: usize, ops: usize, keys: u64, rebuild: bool, seed: u64) -> RecordParams {
    RecordParams {
        threads,
        ops_per_thread: ops,
        keys,
        with_rebuild: rebuild,
        seed,
    }
}

#[test]
fn recorded_history_is_well_formed() {
    for seed in 0..50 {
        let p = params(3, 4, 1, true, seed);
        let h = record_run(&p).unwrap();
        assert_eq!(h.events.len(), 2 * 3 * 4);
        let ops = h.operations().unwrap();
        assert_eq!(ops.len(), 12);
        for t in 0..3 {
            let mine: Vec<_> = h.events.iter().filter(|e| e.thread == t).collect();
            assert!(mine
                .chunks(2)
                .all(|c| c[0].phase == Phase::Invoke && c[1].phase == Phase::Response));
        }
    }
}

#[test]
fn two_threads_one_op_each_gives_four_events() {
    let h = record_run(&params(2, 1, 2, false, 9)).unwrap();
    assert_eq!(h.events.len(), 4);
    assert!(h.rebuilds.is_empty());
}

#[test]
fn rebuild_windows_are_tagged() {
    let mut tagged = 0;
    for seed in 0..20 {
        let h = record_run(&params(2, 8, 4, true, seed)).unwrap();
        tagged += h.rebuilds.len();
        assert!(h.rebuilds.iter().all(|w| w.start <= w.end));
    }
    assert!(tagged > 0);
}

#[test]
fn recording_limits_are_enforced() {
    assert_eq!(
        record_run(&params(1, 4, 2, false, 0)),
        Err(RecordError::Threads(1))
    );
    assert_eq!(
        record_run(&params(5, 4, 2, false, 0)),
        Err(RecordError::Threads(5))
    );
    assert_eq!(
        record_run(&params(2, 9, 2, false, 0)),
        Err(RecordError::Ops(9))
    );
    assert_eq!(
        record_run(&params(2, 4, 5, false, 0)),
        Err(RecordError::Keys(5))
    );
}

#[test]
fn random_recorded_histories_linearize() {
    for seed in 0..300 {
        let h = record_run(&RecordParams::random(seed, seed % 4 != 0)).unwrap();
        match check_linearizable(&h).unwrap() {
            Verdict::Linearizable { witness } => {
                assert!(is_legal_sequence(&h.initial, &witness));
                assert!(respects_real_time(&witness));
            }
            v => panic!("seed {seed}: {v:?}\n{}", serde_json::to_string(&h).unwrap()),
        }
    }
}

fn event(thread: usize, phase: Phase, op: OpKind, result: Option<bool>, time: u64) -> HistoryEvent {
    HistoryEvent {
        thread,
        op,
        key: 1,
        phase,
        result,
        time,
    }
}

#[test]
fn malformed_histories_are_reported() {
    let h = |events| History {
        initial: vec![],
        events,
        rebuilds: vec![],
    };
    assert_eq!(
        h(vec![event(
            0,
            Phase::Response,
            OpKind::Insert,
            Some(true),
            1
        )])
        .operations(),
        Err(HistoryError::Unmatched { thread: 0 })
    );
    assert_eq!(
        h(vec![event(0, Phase::Invoke, OpKind::Insert, None, 1)]).operations(),
        Err(HistoryError::Incomplete { thread: 0 })
    );
    assert_eq!(
        h(vec![
            event(0, Phase::Invoke, OpKind::Insert, None, 1),
            event(0, Phase::Invoke, OpKind::Lookup, None, 2)
        ])
        .operations(),
        Err(HistoryError::Overlapping { thread: 0 })
    );
    assert_eq!(
        h(vec![
            event(0, Phase::Invoke, OpKind::Insert, None, 1),
            event(0, Phase::Response, OpKind::Delete, Some(true), 2)
        ])
        .operations(),
        Err(HistoryError::Mismatch { thread: 0 })
    );
    assert_eq!(
        h(vec![
            event(0, Phase::Invoke, OpKind::Insert, None, 1),
            event(0, Phase::Response, OpKind::Insert, None, 2)
        ])
        .operations(),
        Err(HistoryError::MissingResult { thread: 0 })
    );
}
