use std::collections::HashMap;

use dagcnn::select::{forward_select, retrieve_nearest, ForwardSelectError, SelectionStep, StopReason};
use proptest::prelude::*;

type Table = HashMap<Vec<usize>, f64>;

fn table(entries: &[(&[usize], f64)]) -> Table {
    entries.iter().map(|(k, v)| (k.to_vec(), *v)).collect()
}

fn lookup(t: &Table, subset: &[usize]) -> f64 {
    t.get(subset).copied().unwrap_or(0.0)
}

/// Sequential greedy run: every round scans candidates in ascending order
/// and keeps only strict improvements over the best so far.
fn brute_force(candidates: &[usize], t: &Table) -> (Vec<(usize, f64)>, Vec<usize>) {
    let mut remaining: Vec<usize> = candidates.to_vec();
    remaining.sort();
    remaining.dedup();
    let mut current: Vec<usize> = Vec::new();
    let mut score = 0.0;
    let mut trace = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<(usize, f64)> = None;
        for &c in &remaining {
            let mut s = current.clone();
            s.push(c);
            s.sort();
            let v = lookup(t, &s);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        let (c, v) = best.unwrap();
        if v <= score {
            break;
        }
        score = v;
        trace.push((c, v));
        current.push(c);
        current.sort();
        remaining.retain(|&r| r != c);
    }
    (trace, current)
}

fn run(candidates: &[usize], t: &Table) -> (Vec<(usize, f64)>, Vec<usize>) {
    let trace = forward_select::<(), _>(candidates, |s| Ok(lookup(t, s))).unwrap();
    let steps = trace.steps.iter().map(|&SelectionStep { layer, score }| (layer, score)).collect();
    (steps, trace.selected)
}

#[test]
fn worked_example() {
    let (a, b, c) = (1, 2, 3);
    let t = table(&[(&[a], 0.5), (&[b], 0.6), (&[a, b], 0.7), (&[b, c], 0.55), (&[a, b, c], 0.65)]);
    let trace = forward_select::<(), _>(&[a, b, c], |s| Ok(lookup(&t, s))).unwrap();
    assert_eq!(trace.steps, vec![SelectionStep { layer: b, score: 0.6 }, SelectionStep { layer: a, score: 0.7 }]);
    assert_eq!(trace.stop, StopReason::NoImprovement);
    assert_eq!(run(&[a, b, c], &t), brute_force(&[a, b, c], &t));
}

#[test]
fn hand_specified_scorers_match_oracle() {
    let cases: Vec<(Vec<usize>, Table)> = vec![
        (vec![4], table(&[(&[4], 0.3)])),
        (vec![4], table(&[])),
        (vec![1, 3, 6], table(&[(&[1], 0.5), (&[3], 0.5), (&[6], 0.5), (&[1, 3], 0.5)])),
        (vec![2, 5, 7, 9], table(&[(&[9], 0.4), (&[2, 9], 0.41), (&[2, 7, 9], 0.9), (&[2, 5, 7, 9], 0.95)])),
        (vec![0, 1, 2, 3, 4], (1..32usize).map(|m| ((0..5).filter(|b| m >> b & 1 == 1).collect(), 0.1)).collect()),
        (
            vec![0, 1, 2, 3, 4],
            (1..32usize)
                .map(|m| {
                    let s: Vec<usize> = (0..5).filter(|b| m >> b & 1 == 1).collect();
                    let v = s.len() as f64 / 5.0;
                    (s, v)
                })
                .collect(),
        ),
    ];
    for (cands, t) in &cases {
        assert_eq!(run(cands, t), brute_force(cands, t), "candidates {cands:?}");
    }
}

#[test]
fn constant_scorer_picks_lowest_id_then_stops() {
    let trace = forward_select::<(), _>(&[8, 3, 5], |_| Ok(0.25)).unwrap();
    assert_eq!(trace.selected, vec![3]);
    assert_eq!(trace.steps.len(), 1);
}

#[test]
fn scorer_error_carries_subset() {
    let err = forward_select(&[1, 2], |s| if s == [2] { Err("boom") } else { Ok(0.1) }).unwrap_err();
    match err {
        ForwardSelectError::Scorer { subset, error } => {
            assert_eq!(subset, vec![2]);
            assert_eq!(error, "boom");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(forward_select::<(), _>(&[], |_| Ok(1.0)), Err(ForwardSelectError::NoCandidates)));
}

fn random_table(n: usize, values: &[u8]) -> Table {
    (1..(1usize << n))
        .map(|m| ((0..n).filter(|b| m >> b & 1 == 1).collect(), f64::from(values[m % values.len()] % 6) / 5.0))
        .collect()
}

proptest! {
    #[test]
    fn random_quantized_scorers_match_oracle(n in 1usize..=5, values in prop::collection::vec(any::<u8>(), 31)) {
        let t = random_table(n, &values);
        let cands: Vec<usize> = (0..n).collect();
        let (steps, selected) = run(&cands, &t);
        prop_assert_eq!((steps.clone(), selected.clone()), brute_force(&cands, &t));
        prop_assert!(steps.windows(2).all(|w| w[1].1 > w[0].1));
        if let Some(last) = steps.last() {
            prop_assert_eq!(last.1, lookup(&t, &selected));
        }
    }

    #[test]
    fn retrieval_is_sorted_and_order_invariant(seed in 0u64..500, n in 2usize..12, m_seed in 0usize..100) {
        let d = 3;
        let gallery: Vec<f64> = (0..n * d).map(|i| (((i as u64 * 2654435761 + seed) % 7) as f64) / 7.0).collect();
        let query = vec![0.5; d];
        let m = 1 + m_seed % n;
        let g = dagcnn::select::FeatureMatrix::new(n, d, gallery.clone());
        let hits = retrieve_nearest(&query, &g, m).unwrap();
        prop_assert_eq!(hits.len(), m);
        prop_assert!(hits.windows(2).all(|w| (w[0].distance, w[0].index) <= (w[1].distance, w[1].index)));
        let rev: Vec<f64> = gallery.chunks(d).rev().flatten().copied().collect();
        let hr = retrieve_nearest(&query, &dagcnn::select::FeatureMatrix::new(n, d, rev), m).unwrap();
        let a: Vec<f64> = hits.iter().map(|h| h.distance).collect();
        let b: Vec<f64> = hr.iter().map(|h| h.distance).collect();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn retrieval_unit_vectors() {
    let mut data = vec![0.0; 25];
    for i in 0..5 {
        data[i * 5 + i] = 1.0;
    }
    let g = dagcnn::select::FeatureMatrix::new(5, 5, data);
    let hits = retrieve_nearest(&[1.0, 0.0, 0.0, 0.0, 0.0], &g, 3).unwrap();
    assert_eq!(hits.iter().map(|h| h.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(hits[0].distance, 0.0);
    assert!((hits[1].distance - 2f64.sqrt()).abs() < 1e-15);
    assert!(retrieve_nearest(&[1.0; 5], &g, 6).is_err());
}
