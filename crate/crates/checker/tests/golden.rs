use std::fs;
use std::path::{Path, PathBuf};

use dhash_checker::linearize::{
    check_linearizable, is_legal_sequence, respects_real_time, Verdict,
};
use dhash_checker::History;

fn corpus(kind: &str) -> Vec<(PathBuf, History)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(kind);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| {
            let h = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
            (p, h)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    assert!(out.len() >= 5, "{kind} corpus too small");
    out
}

#[test]
fn good_histories_are_accepted_with_valid_witnesses() {
    for (path, h) in corpus("good") {
        match check_linearizable(&h).unwrap() {
            Verdict::Linearizable { witness } => {
                assert_eq!(witness.len(), h.operations().unwrap().len());
                assert!(
                    is_legal_sequence(&h.initial, &witness),
                    "{}",
                    path.display()
                );
                assert!(respects_real_time(&witness), "{}", path.display());
            }
            v => panic!("{} rejected: {v:?}", path.display()),
        }
    }
}

#[test]
fn bad_histories_are_rejected() {
    for (path, h) in corpus("bad") {
        let v = check_linearizable(&h).unwrap();
        assert!(v.is_violation(), "{} accepted: {v:?}", path.display());
    }
}

#[test]
fn violation_names_the_conflicting_pair() {
    let (_, h) = corpus("bad")
        .into_iter()
        .find(|(p, _)| p.ends_with("stale_lookup.json"))
        .unwrap();
    let Verdict::Violation {
        blocked, against, ..
    } = check_linearizable(&h).unwrap()
    else {
        panic!()
    };
    assert_eq!(blocked.op, dhash_checker::OpKind::Lookup);
    assert_eq!(against.unwrap().op, dhash_checker::OpKind::Insert);
}

#[test]
fn corpus_round_trips_through_json() {
    for (_, h) in corpus("good").into_iter().chain(corpus("bad")) {
        let back: History = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
        assert_eq!(back, h);
    }
}
