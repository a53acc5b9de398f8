mod support;

use std::collections::BTreeSet;

use hashlab_core::objective::{pairs_from_csv, pairs_to_csv, triplets_from_csv, triplets_to_csv, TripletSampler};
use hashlab_core::{
    hamming_triplet_loss, pack, relaxed_triplet_loss, sample_triplets, triplet_subgradients, triplets_from_pairs,
    Error, Triplet,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use support::oracles::{central_diff, rel_error, SplitMix};

fn code(rng: &mut SplitMix, q: usize) -> Vec<f64> {
    (0..q).map(|_| rng.range(0.001, 0.999)).collect()
}

fn slack(b: &[f64], p: &[f64], n: &[f64]) -> f64 {
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    d(b, p) - d(b, n) + 1.0
}

/// Random non-boundary triples with the given hinge state.
fn triples(seed: u64, count: usize, want_active: Option<bool>) -> Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut rng = SplitMix(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let q = 1 + rng.below(16) as usize;
        let (b, p, n) = (code(&mut rng, q), code(&mut rng, q), code(&mut rng, q));
        let s = slack(&b, &p, &n);
        if s.abs() < 1e-3 || want_active.is_some_and(|a| a != (s > 0.0)) {
            continue;
        }
        out.push((b, p, n));
    }
    out
}

#[test]
fn subgradients_match_closed_form_exactly() {
    for (b, p, n) in triples(1, 1000, None) {
        let g = triplet_subgradients(&b, &p, &n).unwrap();
        let on = if slack(&b, &p, &n) > 0.0 { 1.0 } else { 0.0 };
        for i in 0..b.len() {
            assert_eq!(g.anchor[i], (2.0 * n[i] - 2.0 * p[i]) * on);
            assert_eq!(g.positive[i], (2.0 * p[i] - 2.0 * b[i]) * on);
            assert_eq!(g.negative[i], (2.0 * b[i] - 2.0 * n[i]) * on);
        }
    }
}

#[test]
fn subgradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for (b, p, n) in triples(2, 1000, Some(true)) {
        let q = b.len();
        let g = triplet_subgradients(&b, &p, &n).unwrap();
        let stacked: Vec<f64> = [b.clone(), p.clone(), n.clone()].concat();
        let numeric = central_diff(
            &mut |v| relaxed_triplet_loss(&v[..q], &v[q..2 * q], &v[2 * q..]).unwrap().value,
            &stacked,
            1e-6,
        );
        let analytic = [g.anchor, g.positive, g.negative].concat();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    assert!(worst <= 1e-6, "worst rel err {worst:e}");
}

#[test]
fn loss_examples_and_bounds() {
    assert_eq!(relaxed_triplet_loss(&[0.3, 0.7], &[0.3, 0.7], &[0.3, 0.7]).unwrap().value, 1.0);
    assert_eq!(relaxed_triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
    assert_eq!(relaxed_triplet_loss(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap().value, 1.0);
    assert!(matches!(relaxed_triplet_loss(&[1.5], &[0.0], &[0.0]), Err(Error::Domain(_))));
    for (b, p, n) in triples(3, 500, None) {
        let l = relaxed_triplet_loss(&b, &p, &n).unwrap().value;
        assert!((0.0..=1.0 + b.len() as f64).contains(&l));
    }
}

#[test]
fn swapping_positive_and_negative_reflects_slack() {
    let mut rng = SplitMix(4);
    for _ in 0..1000 {
        let q = 1 + rng.below(10) as usize;
        let (b, p, n) = (code(&mut rng, q), code(&mut rng, q), code(&mut rng, q));
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let s = d(&b, &p) - d(&b, &n);
        assert_eq!(relaxed_triplet_loss(&b, &p, &n).unwrap().value, (s + 1.0).max(0.0));
        assert_eq!(relaxed_triplet_loss(&b, &n, &p).unwrap().value, (1.0 - s).max(0.0));
    }
}

/// The hinge is convex along the anchor (its argument is affine there) and
/// along the positive, so the subgradient inequality holds on those slices.
#[test]
fn subgradient_inequality_on_convex_slices() {
    let mut rng = SplitMix(5);
    for _ in 0..2000 {
        let q = 1 + rng.below(8) as usize;
        let (b, p, n) = (code(&mut rng, q), code(&mut rng, q), code(&mut rng, q));
        let g = triplet_subgradients(&b, &p, &n).unwrap();
        let l0 = relaxed_triplet_loss(&b, &p, &n).unwrap().value;
        let v = code(&mut rng, q);
        let dot = |g: &[f64], u: &[f64], w: &[f64]| g.iter().zip(u.iter().zip(w)).map(|(g, (u, w))| g * (w - u)).sum::<f64>();
        let along_b = relaxed_triplet_loss(&v, &p, &n).unwrap().value;
        assert!(along_b >= l0 + dot(&g.anchor, &b, &v) - 1e-10);
        let along_p = relaxed_triplet_loss(&b, &v, &n).unwrap().value;
        assert!(along_p >= l0 + dot(&g.positive, &p, &v) - 1e-10);
    }
}

/// `-‖b - b⁻‖²` is concave in the negative, so the inequality cannot hold
/// for the stacked vector in general.
#[test]
fn stacked_subgradient_inequality_fails_along_negative() {
    let (b, p, n) = ([0.5], [0.5], [0.5]);
    let g = triplet_subgradients(&b, &p, &n).unwrap();
    let v = [1.0];
    let lhs = relaxed_triplet_loss(&b, &p, &v).unwrap().value;
    let rhs = relaxed_triplet_loss(&b, &p, &n).unwrap().value + g.negative[0] * (v[0] - n[0]);
    assert!(lhs < rhs - 0.2);
}

#[test]
fn hamming_form_equals_relaxed_form_on_binary_codes() {
    let mut rng = SplitMix(6);
    for q in [1, 12, 24, 32, 48, 64, 65] {
        for _ in 0..200 {
            let (a, p, n) = (rng.bits(q), rng.bits(q), rng.bits(q));
            let f = |v: &[u8]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
            let h = hamming_triplet_loss(&pack(&a).unwrap(), &pack(&p).unwrap(), &pack(&n).unwrap()).unwrap();
            let r = relaxed_triplet_loss(&f(&a), &f(&p), &f(&n)).unwrap();
            assert_eq!(h.value, r.value);
            assert_eq!(h.active, r.active);
        }
    }
}

#[test]
fn two_class_sampling_is_exhaustive() {
    let labels = vec![vec![0], vec![0], vec![1]];
    let got: BTreeSet<Triplet> = sample_triplets(&labels, 500, 3, false).unwrap().into_iter().collect();
    let want: BTreeSet<Triplet> = [Triplet::new(0, 1, 2), Triplet::new(1, 0, 2)].into_iter().collect();
    assert_eq!(got, want);
}

#[test]
fn sampling_is_deterministic() {
    let labels: Vec<Vec<u32>> = (0..30).map(|i| vec![i % 4]).collect();
    assert_eq!(
        sample_triplets(&labels, 100, 9, false).unwrap(),
        sample_triplets(&labels, 100, 9, false).unwrap()
    );
    assert_ne!(
        sample_triplets(&labels, 100, 9, false).unwrap(),
        sample_triplets(&labels, 100, 10, false).unwrap()
    );
}

#[test]
fn anchor_classes_are_uniform() {
    let labels: Vec<Vec<u32>> = (0..300).map(|i| vec![i % 3]).collect();
    let n = 10_000;
    let ts = sample_triplets(&labels, n, 21, false).unwrap();
    let mut counts = [0usize; 3];
    for t in &ts {
        counts[labels[t.anchor][0] as usize] += 1;
        assert_eq!(labels[t.positive], labels[t.anchor]);
        assert_ne!(t.positive, t.anchor);
        assert_ne!(labels[t.negative], labels[t.anchor]);
    }
    let p = 1.0 / 3.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 5.0 * sigma, "{counts:?}");
    }
}

#[test]
fn multilabel_sampling_respects_overlap() {
    let labels: Vec<Vec<u32>> = (0..40u32).map(|i| vec![i % 5, (i / 5) % 3 + 5]).collect();
    let sampler = TripletSampler::new(&labels, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for t in sampler.sample(2000, &mut rng).unwrap() {
        let share = |a: usize, b: usize| labels[a].iter().any(|l| labels[b].contains(l));
        assert!(share(t.anchor, t.positive) && t.anchor != t.positive);
        assert!(!share(t.anchor, t.negative));
    }
}

#[test]
fn infeasible_label_sets_are_rejected() {
    assert!(matches!(sample_triplets(&[vec![0], vec![0]], 1, 0, false), Err(Error::Infeasible(_))));
    assert!(matches!(sample_triplets(&[vec![0], vec![1]], 1, 0, false), Err(Error::Infeasible(_))));
}

#[test]
fn pair_join_example() {
    assert_eq!(triplets_from_pairs(&[(1, 2)], &[(1, 3)]), vec![Triplet::new(1, 2, 3)]);
    assert!(triplets_from_pairs(&[(1, 2)], &[(4, 3)]).is_empty());
}

#[test]
fn pair_join_matches_brute_force() {
    let mut rng = SplitMix(8);
    for _ in 0..50 {
        let n = 12;
        let mut pairs = |k: usize| -> Vec<(usize, usize)> {
            (0..k).map(|_| (rng.below(n) as usize, rng.below(n) as usize)).collect()
        };
        let sim = pairs(15);
        let dis = pairs(15);
        let both = |v: &[(usize, usize)]| -> Vec<(usize, usize)> { v.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect() };
        let mut want = BTreeSet::new();
        for &(a, p) in &both(&sim) {
            for &(a2, m) in &both(&dis) {
                if a == a2 && p != a && m != a && p != m {
                    want.insert(Triplet::new(a, p, m));
                }
            }
        }
        let got: BTreeSet<Triplet> = triplets_from_pairs(&sim, &dis).into_iter().collect();
        assert_eq!(got, want);
    }
}

#[test]
fn csv_round_trips() {
    let ts = vec![Triplet::new(0, 1, 2), Triplet::new(5, 3, 9)];
    assert_eq!(triplets_from_csv(&triplets_to_csv(&ts)).unwrap(), ts);
    let (s, d) = (vec![(0, 1), (2, 3)], vec![(0, 4)]);
    assert_eq!(pairs_from_csv(&pairs_to_csv(&s, &d)).unwrap(), (s, d));
    assert!(triplets_from_csv("a,b\n1,2\n").is_err());
}
