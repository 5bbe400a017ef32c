use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tensor(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Exhaustive assignment maximization over all injective row -> column maps.
fn brute_force_best(scores: &Tensor) -> f64 {
    let (m, d) = scores.shape();
    fn recurse(scores: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let (m, d) = scores.shape();
        if row == m {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        for c in 0..d {
            if !used[c] {
                used[c] = true;
                recurse(scores, row + 1, used, acc + scores.get(row, c), best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    recurse(scores, 0, &mut vec![false; d], 0.0, &mut best);
    let _ = m;
    best
}

fn random_multimatching(r: &mut ChaCha8Rng, max_n: usize, max_d: usize) -> MultiMatching {
    let n = r.gen_range(1..=max_n);
    let d = r.gen_range(4..=max_d);
    let entries = (0..n)
        .map(|j| {
            let m = r.gen_range(1..=d);
            let mut cols: Vec<usize> = (0..d).collect();
            cols.shuffle(r);
            cols.truncate(m);
            (
                format!("inst{j}"),
                PartialPermutation::new(cols, d).unwrap(),
            )
        })
        .collect();
    MultiMatching::new(entries).unwrap()
}

#[test]
fn extraction_keeps_permutation_matrices() {
    let x = tensor(3, 4, vec![
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, 1.0, //
        1.0, 0.0, 0.0, 0.0,
    ]);
    let p = extract_matching(&x).unwrap();
    assert_eq!(p.columns(), &[1, 3, 0]);
}

#[test]
fn extraction_matches_exhaustive_search_on_small_example() {
    let x = tensor(3, 3, vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.1, 0.1, 0.2, 0.6]);
    let p = extract_matching(&x).unwrap();
    assert_eq!(p.columns(), &[0, 1, 2]);
    let total: f64 = p
        .columns()
        .iter()
        .enumerate()
        .map(|(r, &c)| x.get(r, c))
        .sum();
    assert!((total - 2.2).abs() < 1e-12);
    assert!((total - brute_force_best(&x)).abs() < 1e-12);
}

#[test]
fn all_equal_scores_break_ties_toward_low_universe_index() {
    let x = tensor(3, 5, vec![0.5; 15]);
    let p = extract_matching(&x).unwrap();
    assert_eq!(p.columns(), &[0, 1, 2]);
}

#[test]
fn extraction_is_optimal_on_random_instances() {
    for seed in 0..60u64 {
        let mut r = rng(seed);
        let m = r.gen_range(1..=6);
        let d = r.gen_range(m..=8);
        let data: Vec<f64> = (0..m * d).map(|_| r.gen_range(0.0..1.0)).collect();
        let x = tensor(m, d, data);
        let p = extract_matching(&x).unwrap();
        let total: f64 = p
            .columns()
            .iter()
            .enumerate()
            .map(|(row, &c)| x.get(row, c))
            .sum();
        let best = brute_force_best(&x);
        assert!(
            (total - best).abs() < 1e-9,
            "seed {seed}: hungarian {total} vs brute force {best}"
        );
    }
}

#[test]
fn more_keypoints_than_universe_points_is_infeasible() {
    let x = tensor(4, 3, vec![0.5; 12]);
    assert!(matches!(
        extract_matching(&x),
        Err(MatchError::Infeasible { m: 4, d: 3 })
    ));
}

#[test]
fn extraction_output_satisfies_partial_permutation_invariants() {
    for seed in 100..140u64 {
        let mut r = rng(seed);
        let m = r.gen_range(1..=8);
        let d = r.gen_range(m..=10);
        let data: Vec<f64> = (0..m * d).map(|_| r.gen_range(0.0..1.0)).collect();
        let p = extract_matching(&tensor(m, d, data)).unwrap();
        // Row sums are one by representation; columns must be distinct.
        let mut seen = vec![false; d];
        for &c in p.columns() {
            assert!(c < d && !seen[c]);
            seen[c] = true;
        }
    }
}

#[test]
fn composing_with_itself_gives_identity_on_common_support() {
    let xj = PartialPermutation::new(vec![2, 0, 3], 5).unwrap();
    let xjj = compose_pairwise(&xj, &xj).unwrap();
    assert!(xjj.is_identity());
}

#[test]
fn composition_hits_shared_universe_points_only() {
    let xj = PartialPermutation::identity(3, 4).unwrap(); // universe {0,1,2}
    let xk = PartialPermutation::new(vec![1, 2, 3], 4).unwrap(); // universe {1,2,3}
    let xjk = compose_pairwise(&xj, &xk).unwrap();
    let ones: usize = (0..3)
        .flat_map(|a| (0..3).map(move |b| (a, b)))
        .filter(|&(a, b)| xjk.get(a, b))
        .count();
    assert_eq!(ones, 2);
    assert!(xjk.get(1, 0)); // both map to universe point 1
    assert!(xjk.get(2, 1)); // both map to universe point 2
}

#[test]
fn composition_transpose_identity() {
    let mut r = rng(4);
    for _ in 0..20 {
        let multi = random_multimatching(&mut r, 4, 8);
        if multi.len() < 2 {
            continue;
        }
        let xj = &multi.matchings()[0];
        let xk = &multi.matchings()[1];
        let jk = compose_pairwise(xj, xk).unwrap();
        let kj = compose_pairwise(xk, xj).unwrap();
        assert_eq!(jk.transposed(), kj);
    }
}

#[test]
fn composed_sets_are_always_cycle_consistent() {
    for seed in 0..200u64 {
        let mut r = rng(7000 + seed);
        let multi = random_multimatching(&mut r, 6, 8);
        let set = PairwiseSet::compose_all(&multi).unwrap();
        assert_eq!(verify_cycle_consistency(&set), Ok(()), "seed {seed}");
    }
}

#[test]
fn hand_built_violation_is_reported_with_triple() {
    // Three instances fully observing a 2-point universe; X_02 swaps the
    // correspondence, breaking transitivity through instance 1.
    let id = PartialPermutation::identity(2, 2).unwrap();
    let ident = compose_pairwise(&id, &id).unwrap();
    let swap = PairwiseMatching::from_entries(2, 2, vec![false, true, true, false]).unwrap();
    let mats = vec![
        ident.clone(),
        ident.clone(),
        swap.clone(),
        ident.clone(),
        ident.clone(),
        ident.clone(),
        swap.transposed(),
        ident.clone(),
        ident.clone(),
    ];
    let set = PairwiseSet::from_matrix(3, mats).unwrap();
    match verify_cycle_consistency(&set) {
        Err(ConsistencyViolation::NotTransitive { j, k, l }) => {
            // X_01 X_12 = I is not dominated by the swapped X_02.
            assert_eq!((j, k, l), (0, 1, 2));
        }
        other => panic!("expected transitivity violation, got {other:?}"),
    }
}

#[test]
fn single_instance_is_consistent() {
    let multi = MultiMatching::new(vec![(
        "only".into(),
        PartialPermutation::new(vec![3, 1, 0], 5).unwrap(),
    )])
    .unwrap();
    let set = PairwiseSet::compose_all(&multi).unwrap();
    assert_eq!(verify_cycle_consistency(&set), Ok(()));
}

#[test]
fn consistent_triples_score_exactly_100() {
    for seed in 0..50u64 {
        let mut r = rng(300 + seed);
        let multi = random_multimatching(&mut r, 3, 8);
        if multi.len() < 3 {
            continue;
        }
        let x = multi.matchings();
        let xjk = compose_pairwise(&x[0], &x[1]).unwrap();
        let xjl = compose_pairwise(&x[0], &x[2]).unwrap();
        let xkl = compose_pairwise(&x[1], &x[2]).unwrap();
        match cycle_consistency_score(&xjk, &xjl, &xkl) {
            Ok(score) => assert_eq!(score, 100.0, "seed {seed}"),
            Err(MatchError::UndefinedScore) => {} // no common points in this draw
            Err(other) => panic!("seed {seed}: {other}"),
        }
    }
}

#[test]
fn swapped_pair_scores_60_on_five_points() {
    let eye = PartialPermutation::identity(5, 5).unwrap();
    let xjk = compose_pairwise(&eye, &eye).unwrap();
    let xjl = xjk.clone();
    let mut rows: Vec<bool> = vec![false; 25];
    let target = [1usize, 0, 2, 3, 4]; // rows 0 and 1 swapped
    for (r, &c) in target.iter().enumerate() {
        rows[r * 5 + c] = true;
    }
    let xkl = PairwiseMatching::from_entries(5, 5, rows).unwrap();
    let score = cycle_consistency_score(&xjk, &xjl, &xkl).unwrap();
    assert_eq!(score, 60.0);
}

#[test]
fn identity_matchings_score_100() {
    let eye = PartialPermutation::identity(4, 4).unwrap();
    let m = compose_pairwise(&eye, &eye).unwrap();
    assert_eq!(cycle_consistency_score(&m, &m, &m).unwrap(), 100.0);
}

#[test]
fn empty_common_support_is_undefined() {
    let xj = PartialPermutation::new(vec![0, 1], 4).unwrap();
    let xk = PartialPermutation::new(vec![2, 3], 4).unwrap();
    let xjk = compose_pairwise(&xj, &xk).unwrap();
    let xjl = compose_pairwise(&xj, &xk).unwrap();
    let xkl = compose_pairwise(&xk, &xk).unwrap();
    assert!(matches!(
        cycle_consistency_score(&xjk, &xjl, &xkl),
        Err(MatchError::UndefinedScore)
    ));
}

#[test]
fn accuracy_examples() {
    let gt = PartialPermutation::identity(10, 10).unwrap();
    assert_eq!(matching_accuracy(&gt, &gt).unwrap(), 100.0);

    let mut cols: Vec<usize> = (0..10).collect();
    cols.swap(3, 7);
    let pred = PartialPermutation::new(cols, 10).unwrap();
    assert_eq!(matching_accuracy(&pred, &gt).unwrap(), 80.0);

    let mut r = rng(12);
    let mut cols: Vec<usize> = (0..5).collect();
    cols.shuffle(&mut r);
    let pred = PartialPermutation::new(cols.clone(), 5).unwrap();
    let gt = PartialPermutation::identity(5, 5).unwrap();
    let direct = cols.iter().enumerate().filter(|(i, &c)| *i == c).count();
    assert_eq!(
        matching_accuracy(&pred, &gt).unwrap(),
        100.0 * direct as f64 / 5.0
    );
}

#[test]
fn accuracy_shape_mismatch_errors() {
    let a = PartialPermutation::identity(3, 5).unwrap();
    let b = PartialPermutation::identity(4, 5).unwrap();
    assert!(matches!(
        matching_accuracy(&a, &b),
        Err(MatchError::ShapeMismatch { .. })
    ));
}
