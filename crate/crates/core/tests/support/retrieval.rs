//! Oracle comparisons for packing, ranking and the retrieval metrics.

use hashlab_core::{
    hamming, mean_average_precision, pack, precision_at_topk, precision_recall_curve, precision_within_radius,
    ApDenominator, BitCode, CodeDatabase, EmptyRetrieval, RelevanceRule,
};

use super::oracles::{naive_hamming, OracleInstance, SplitMix};

/// Number of pairs whose packed distance differs from the per-bit count.
pub fn hamming_mismatches(q: usize, pairs: usize, seed: u64) -> usize {
    let mut rng = SplitMix(seed);
    let mut bad = 0;
    for _ in 0..pairs {
        let (a, b) = (rng.bits(q), rng.bits(q));
        if hamming(&pack(&a).unwrap(), &pack(&b).unwrap()).unwrap() != naive_hamming(&a, &b) {
            bad += 1;
        }
    }
    bad
}

/// Random instance of at most 200 items with codes drawn near a few
/// prototypes, so rankings have ties and the radius-2 ball is non-trivial.
pub fn random_instance(seed: u64) -> OracleInstance {
    let mut rng = SplitMix(seed);
    let q = [12, 24, 32, 48][rng.below(4) as usize];
    let classes = 2 + rng.below(5) as u32;
    let nq = 1 + rng.below(20) as usize;
    let ndb = 20 + rng.below((200 - nq as u64) - 19) as usize;
    let protos: Vec<Vec<u8>> = (0..classes).map(|_| rng.bits(q)).collect();
    let item = |rng: &mut SplitMix| {
        let c = rng.below(classes as u64) as u32;
        let flips = rng.below(q as u64 / 3 + 1);
        let mut bits = protos[c as usize].clone();
        for _ in 0..flips {
            let i = rng.below(q as u64) as usize;
            bits[i] ^= 1;
        }
        (bits, c)
    };
    let (q_codes, q_labels) = (0..nq).map(|_| item(&mut rng)).unzip();
    let (db_codes, db_labels) = (0..ndb).map(|_| item(&mut rng)).unzip();
    OracleInstance {
        q_codes,
        q_labels,
        db_codes,
        db_labels,
    }
}

pub fn to_database(codes: &[Vec<u8>], labels: &[u32]) -> CodeDatabase {
    let packed: Vec<BitCode> = codes.iter().map(|c| pack(c).unwrap()).collect();
    CodeDatabase::new(codes[0].len(), &packed, labels.iter().map(|&l| vec![l]).collect(), None).unwrap()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MetricDiffs {
    pub map: f64,
    pub map_truncated: f64,
    pub precision_radius: f64,
    pub pr_curve: f64,
    pub topk: f64,
}

impl MetricDiffs {
    pub fn max(&self) -> f64 {
        [self.map, self.map_truncated, self.precision_radius, self.pr_curve, self.topk]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn merge(&mut self, o: &MetricDiffs) {
        self.map = self.map.max(o.map);
        self.map_truncated = self.map_truncated.max(o.map_truncated);
        self.precision_radius = self.precision_radius.max(o.precision_radius);
        self.pr_curve = self.pr_curve.max(o.pr_curve);
        self.topk = self.topk.max(o.topk);
    }
}

/// Largest absolute difference between each library metric and its oracle.
pub fn metric_diffs(inst: &OracleInstance, seed: u64) -> MetricDiffs {
    let qs = to_database(&inst.q_codes, &inst.q_labels);
    let db = to_database(&inst.db_codes, &inst.db_labels);
    let rule = RelevanceRule::SingleLabel;
    let rrd = ApDenominator::RelevantRetrieved;
    let mut rng = SplitMix(seed);
    let n = 1 + rng.below(db.len() as u64) as usize;
    let map = mean_average_precision(&qs, &db, rule, None, rrd).unwrap().map;
    let map_t = mean_average_precision(&qs, &db, rule, Some(n), rrd).unwrap().map;
    let pr2 = precision_within_radius(&qs, &db, rule, 2, EmptyRetrieval::Zero).unwrap();
    let curve = precision_recall_curve(&qs, &db, rule).unwrap();
    let oracle_curve = inst.pr_curve();
    let ks: Vec<usize> = (0..5).map(|_| 1 + rng.below(db.len() as u64) as usize).collect();
    let topk = precision_at_topk(&qs, &db, rule, &ks).unwrap();
    MetricDiffs {
        map: (map - inst.map(None).unwrap()).abs(),
        map_truncated: (map_t - inst.map(Some(n)).unwrap()).abs(),
        precision_radius: (pr2 - inst.precision_radius(2)).abs(),
        pr_curve: curve
            .iter()
            .zip(&oracle_curve)
            .map(|(a, b)| (a.0 - b.0).abs().max((a.1 - b.1).abs()))
            .fold(0.0, f64::max),
        topk: topk
            .iter()
            .map(|&(k, p)| (p - inst.precision_topk(k)).abs())
            .fold(0.0, f64::max),
    }
}

/// MAP of uniformly random codes against balanced shuffled labels, with the
/// Monte-Carlo standard error of the per-query mean.
pub fn random_code_map(db_size: usize, queries: usize, classes: u32, bits: usize, seed: u64) -> (f64, f64) {
    let mut rng = SplitMix(seed);
    let labels = |n: usize, rng: &mut SplitMix| -> Vec<u32> {
        let mut l: Vec<u32> = (0..n).map(|i| i as u32 % classes).collect();
        for i in (1..n).rev() {
            l.swap(i, rng.below(i as u64 + 1) as usize);
        }
        l
    };
    let db_labels = labels(db_size, &mut rng);
    let q_labels = labels(queries, &mut rng);
    let db_codes: Vec<Vec<u8>> = (0..db_size).map(|_| rng.bits(bits)).collect();
    let q_codes: Vec<Vec<u8>> = (0..queries).map(|_| rng.bits(bits)).collect();
    let r = mean_average_precision(
        &to_database(&q_codes, &q_labels),
        &to_database(&db_codes, &db_labels),
        RelevanceRule::SingleLabel,
        None,
        ApDenominator::RelevantRetrieved,
    )
    .unwrap();
    let aps: Vec<f64> = r.per_query.iter().flatten().copied().collect();
    let n = aps.len() as f64;
    let var = aps.iter().map(|a| (a - r.map).powi(2)).sum::<f64>() / (n - 1.0);
    (r.map, (var / n).sqrt())
}
