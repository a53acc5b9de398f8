//! Triplet ranking objectives and triplet construction.
//!
//! For an anchor code `b`, a positive `b⁺` and a negative `b⁻`:
//!
//! * Hamming form (evaluation only): `max(0, m - (H(b, b⁻) - H(b, b⁺)))`.
//! * Relaxed form (training): `max(0, ‖b - b⁺‖² - ‖b - b⁻‖² + m)` over
//!   codes in `[0, 1]^q`, with subgradients
//!   `(2b⁻ - 2b⁺, 2b⁺ - 2b, 2b - 2b⁻)` gated by the strict indicator
//!   `slack > 0`. The negative term is the derivative of `-‖b - b⁻‖²`.
//!
//! The margin `m` is 1 unless overridden.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::index::{hamming, BitCode, LabelSet};
use crate::tensor::Real;

pub const DEFAULT_MARGIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl Triplet {
    pub fn new(anchor: usize, positive: usize, negative: usize) -> Self {
        Self {
            anchor,
            positive,
            negative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue<T = f64> {
    pub value: T,
    /// Whether the hinge is engaged (`slack > 0`).
    pub active: bool,
}

/// Subgradients with respect to anchor, positive and negative codes.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletGrads<T = f64> {
    pub anchor: Vec<T>,
    pub positive: Vec<T>,
    pub negative: Vec<T>,
}

/// Triplet hinge with a configurable margin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletLoss {
    pub margin: f64,
}

impl Default for TripletLoss {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
        }
    }
}

fn check_lengths(a: usize, p: usize, n: usize) -> Result<()> {
    if a != p || a != n {
        return Err(Error::LengthMismatch {
            expected: a,
            actual: if a != p { p } else { n },
        });
    }
    Ok(())
}

fn check_unit<T: Real>(codes: [&[T]; 3]) -> Result<()> {
    for c in codes {
        if let Some(v) = c.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Domain(format!("code value {v:?} outside [0, 1]")));
        }
    }
    Ok(())
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

impl TripletLoss {
    pub fn hamming(&self, b: &BitCode, pos: &BitCode, neg: &BitCode) -> Result<LossValue<f64>> {
        let hp = hamming(b, pos)? as f64;
        let hn = hamming(b, neg)? as f64;
        let slack = self.margin - (hn - hp);
        Ok(LossValue {
            value: slack.max(0.0),
            active: slack > 0.0,
        })
    }

    /// `‖b - b⁺‖² - ‖b - b⁻‖² + m`, the argument of the hinge.
    pub fn slack<T: Real>(&self, b: &[T], pos: &[T], neg: &[T]) -> Result<T> {
        check_lengths(b.len(), pos.len(), neg.len())?;
        Ok(sq_dist(b, pos) - sq_dist(b, neg) + T::of(self.margin))
    }

    pub fn relaxed<T: Real>(&self, b: &[T], pos: &[T], neg: &[T]) -> Result<LossValue<T>> {
        check_lengths(b.len(), pos.len(), neg.len())?;
        check_unit([b, pos, neg])?;
        let s = self.slack(b, pos, neg)?;
        Ok(LossValue {
            value: if s > T::zero() { s } else { T::zero() },
            active: s > T::zero(),
        })
    }

    pub fn subgradients<T: Real>(&self, b: &[T], pos: &[T], neg: &[T]) -> Result<TripletGrads<T>> {
        let active = self.slack(b, pos, neg)? > T::zero();
        let two = T::of(2.0);
        let gate = |x: T| if active { x } else { T::zero() };
        Ok(TripletGrads {
            anchor: pos.iter().zip(neg).map(|(&p, &n)| gate(two * n - two * p)).collect(),
            positive: b.iter().zip(pos).map(|(&a, &p)| gate(two * p - two * a)).collect(),
            negative: b.iter().zip(neg).map(|(&a, &n)| gate(two * a - two * n)).collect(),
        })
    }
}

/// Hamming-space triplet loss with margin 1.
pub fn hamming_triplet_loss(b: &BitCode, pos: &BitCode, neg: &BitCode) -> Result<LossValue<f64>> {
    TripletLoss::default().hamming(b, pos, neg)
}

/// Relaxed squared-distance triplet loss with margin 1.
pub fn relaxed_triplet_loss<T: Real>(b: &[T], pos: &[T], neg: &[T]) -> Result<LossValue<T>> {
    TripletLoss::default().relaxed(b, pos, neg)
}

pub fn triplet_subgradients<T: Real>(b: &[T], pos: &[T], neg: &[T]) -> Result<TripletGrads<T>> {
    TripletLoss::default().subgradients(b, pos, neg)
}

/// Draws `count` triplets with replacement.
///
/// Anchors are uniform over items that admit both a positive and a negative;
/// the positive is uniform over other items sharing the anchor's class and
/// the negative uniform over items of other classes. In multilabel mode a
/// positive shares at least one label and a negative shares none; otherwise
/// only the first label of each item counts.
pub fn sample_triplets(
    labels: &[LabelSet],
    count: usize,
    seed: u64,
    multilabel: bool,
) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TripletSampler::new(labels, multilabel)?.sample(count, &mut rng)
}

/// Precomputed label index for repeated triplet draws.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    keys: Vec<Vec<u32>>,
    members: BTreeMap<u32, Vec<usize>>,
    anchors: Vec<usize>,
}

impl TripletSampler {
    pub fn new(labels: &[LabelSet], multilabel: bool) -> Result<Self> {
        let keys: Vec<Vec<u32>> = labels
            .iter()
            .map(|l| {
                let mut k: Vec<u32> = if multilabel {
                    l.clone()
                } else {
                    l.first().copied().into_iter().collect()
                };
                k.sort_unstable();
                k.dedup();
                k
            })
            .collect();
        let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            for &l in k {
                members.entry(l).or_default().push(i);
            }
        }
        if members.len() < 2 {
            return Err(Error::Infeasible(format!(
                "need at least two classes, found {}",
                members.len()
            )));
        }
        let n = keys.len();
        let mut mark = vec![usize::MAX; n];
        let mut anchors = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            let mut related = 0;
            for l in k {
                for &j in &members[l] {
                    if mark[j] != i {
                        mark[j] = i;
                        related += 1;
                    }
                }
            }
            // related counts i itself when it has any label
            if related >= 2 && related < n {
                anchors.push(i);
            }
        }
        if anchors.is_empty() {
            return Err(Error::Infeasible(
                "no item has both a valid positive and a valid negative".into(),
            ));
        }
        Ok(Self {
            keys,
            members,
            anchors,
        })
    }

    fn shares(&self, a: usize, b: usize) -> bool {
        let (ka, kb) = (&self.keys[a], &self.keys[b]);
        ka.iter().any(|l| kb.binary_search(l).is_ok())
    }

    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Triplet>> {
        let n = self.keys.len();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let anchor = self.anchors[rng.random_range(0..self.anchors.len())];
            let positive = if self.keys[anchor].len() == 1 {
                let m = &self.members[&self.keys[anchor][0]];
                let own = m.binary_search(&anchor).expect("anchor is a member of its class");
                let k = rng.random_range(0..m.len() - 1);
                m[if k >= own { k + 1 } else { k }]
            } else {
                let mut pool: Vec<usize> = self.keys[anchor]
                    .iter()
                    .flat_map(|l| self.members[l].iter().copied())
                    .filter(|&j| j != anchor)
                    .collect();
                pool.sort_unstable();
                pool.dedup();
                pool[rng.random_range(0..pool.len())]
            };
            let negative = loop {
                let j = rng.random_range(0..n);
                if !self.shares(anchor, j) {
                    break j;
                }
            };
            out.push(Triplet::new(anchor, positive, negative));
        }
        Ok(out)
    }
}

/// Joins similar pairs `(a, b)` with dissimilar pairs `(a, c)` on a shared
/// item `a` into triplets `(a, b, c)`. Pairs are unordered; the result is
/// sorted and free of duplicates.
pub fn triplets_from_pairs(similar: &[(usize, usize)], dissimilar: &[(usize, usize)]) -> Vec<Triplet> {
    let mut sim: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(a, b) in similar {
        sim.entry(a).or_default().insert(b);
        sim.entry(b).or_default().insert(a);
    }
    let mut dis: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for &(a, c) in dissimilar {
        dis.entry(a).or_default().insert(c);
        dis.entry(c).or_default().insert(a);
    }
    let mut out = BTreeSet::new();
    for (&a, positives) in &sim {
        let Some(negatives) = dis.get(&a) else {
            continue;
        };
        for &p in positives {
            for &n in negatives {
                if p != a && n != a && p != n {
                    out.insert(Triplet::new(a, p, n));
                }
            }
        }
    }
    out.into_iter().collect()
}

pub fn triplets_to_csv(triplets: &[Triplet]) -> String {
    let mut s = String::from("anchor,positive,negative\n");
    for t in triplets {
        let _ = writeln!(s, "{},{},{}", t.anchor, t.positive, t.negative);
    }
    s
}

pub fn triplets_from_csv(text: &str) -> Result<Vec<Triplet>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("anchor,positive,negative") {
        return Err(Error::Format("triplet file must start with `anchor,positive,negative`".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(row, l)| {
            let v: Vec<usize> = l
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("triplet row {row}: bad index")))?;
            match v[..] {
                [a, p, n] => Ok(Triplet::new(a, p, n)),
                _ => Err(Error::Format(format!("triplet row {row}: expected 3 columns"))),
            }
        })
        .collect()
}

/// Pair list CSV: `a,b,similar` where the flag is `1`/`0` or `true`/`false`.
/// Returns `(similar, dissimilar)`.
#[allow(clippy::type_complexity)]
pub fn pairs_from_csv(text: &str) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("a,b,similar") {
        return Err(Error::Format("pair file must start with `a,b,similar`".into()));
    }
    let (mut sim, mut dis) = (Vec::new(), Vec::new());
    for (row, l) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = l.split(',').map(str::trim).collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("pair row {row}: expected 3 columns")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("pair row {row}: bad index {s:?}")))
        };
        let pair = (parse(f[0])?, parse(f[1])?);
        match f[2] {
            "1" | "true" => sim.push(pair),
            "0" | "false" => dis.push(pair),
            other => return Err(Error::Format(format!("pair row {row}: bad flag {other:?}"))),
        }
    }
    Ok((sim, dis))
}

pub fn pairs_to_csv(similar: &[(usize, usize)], dissimilar: &[(usize, usize)]) -> String {
    let mut s = String::from("a,b,similar\n");
    for (a, b) in similar {
        let _ = writeln!(s, "{a},{b},1");
    }
    for (a, b) in dissimilar {
        let _ = writeln!(s, "{a},{b},0");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::pack;

    #[test]
    fn hamming_loss_cases() {
        let a = pack(&[1, 0, 1, 1]).unwrap();
        assert_eq!(hamming_triplet_loss(&a, &a, &a).unwrap().value, 1.0);
        let n = pack(&[0, 1, 0, 1]).unwrap();
        let l = hamming_triplet_loss(&a, &a, &n).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(!l.active);
    }

    #[test]
    fn relaxed_loss_cases() {
        let c = [0.3, 0.8];
        assert_eq!(relaxed_triplet_loss(&c, &c, &c).unwrap().value, 1.0);
        assert_eq!(
            relaxed_triplet_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap().value,
            0.0
        );
        assert_eq!(
            relaxed_triplet_loss(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 1.0]).unwrap().value,
            1.0
        );
        assert!(matches!(
            relaxed_triplet_loss(&[1.5], &[0.0], &[0.0]),
            Err(Error::Domain(_))
        ));
        assert!(relaxed_triplet_loss(&[0.5], &[0.0, 0.1], &[0.0]).is_err());
    }

    #[test]
    fn subgradient_gating() {
        let c = [0.2, 0.9, 0.4];
        let g = triplet_subgradients(&c, &c, &c).unwrap();
        assert_eq!(g.anchor, vec![0.0; 3]);
        let g = triplet_subgradients(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(g.anchor.iter().chain(&g.positive).chain(&g.negative).all(|&v| v == 0.0));
        // slack exactly zero is inactive
        let g = triplet_subgradients(&[1.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(g.negative, vec![0.0]);
    }

    #[test]
    fn tiny_label_set_enumerates_two_triplets() {
        let labels = vec![vec![0], vec![0], vec![1]];
        let t = sample_triplets(&labels, 200, 5, false).unwrap();
        let set: BTreeSet<_> = t.iter().copied().collect();
        let expected: BTreeSet<_> = [Triplet::new(0, 1, 2), Triplet::new(1, 0, 2)].into();
        assert_eq!(set, expected);
    }

    #[test]
    fn sampler_infeasible_cases() {
        assert!(matches!(
            sample_triplets(&[vec![0], vec![0]], 1, 0, false),
            Err(Error::Infeasible(_))
        ));
        assert!(matches!(
            sample_triplets(&[vec![0], vec![1]], 1, 0, false),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn multilabel_validity() {
        let labels = vec![vec![0, 1], vec![1], vec![2], vec![0, 2], vec![3]];
        let t = sample_triplets(&labels, 500, 9, true).unwrap();
        for tr in t {
            let share = |a: usize, b: usize| labels[a].iter().any(|l| labels[b].contains(l));
            assert!(share(tr.anchor, tr.positive));
            assert!(!share(tr.anchor, tr.negative));
            assert_ne!(tr.anchor, tr.positive);
        }
    }

    #[test]
    fn pairs_join_example() {
        assert_eq!(
            triplets_from_pairs(&[(1, 2)], &[(1, 3)]),
            vec![Triplet::new(1, 2, 3)]
        );
        assert!(triplets_from_pairs(&[(1, 2)], &[(4, 5)]).is_empty());
    }

    #[test]
    fn csv_roundtrips() {
        let t = vec![Triplet::new(0, 1, 2), Triplet::new(5, 4, 3)];
        assert_eq!(triplets_from_csv(&triplets_to_csv(&t)).unwrap(), t);
        let (s, d) = pairs_from_csv(&pairs_to_csv(&[(1, 2)], &[(1, 3), (2, 3)])).unwrap();
        assert_eq!(s, vec![(1, 2)]);
        assert_eq!(d, vec![(1, 3), (2, 3)]);
        assert!(triplets_from_csv("x\n1,2,3\n").is_err());
    }
}
