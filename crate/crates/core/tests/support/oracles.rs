//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code paths it checks: codes are plain `Vec<u8>` bit lists,
//! rankings come from a comparison sort, and convolutions use an explicitly
//! zero-padded copy of the input.
#![allow(dead_code)]

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; zero when both vanish.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-14 {
        diff
    } else {
        diff / scale
    }
}

/// Direct convolution over an explicitly padded input. `extra` adds zero
/// padding on the bottom/right for windows that overhang with ceil rounding.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let ph = h + 2 * pad + k;
    let pw = w + 2 * pad + k;
    let mut padded = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                padded[(ch * ph + y + pad) * pw + xx + pad] = x[(ch * h + y) * w + xx];
            }
        }
    }
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[o];
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += weight[((o * c + ch) * k + ky) * k + kx]
                                * padded[(ch * ph + oy * stride + ky) * pw + ox * stride + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub fn naive_hamming(a: &[u8], b: &[u8]) -> u32 {
    let mut d = 0;
    for i in 0..a.len() {
        if a[i] != b[i] {
            d += 1;
        }
    }
    d
}

/// Database order by (distance, index) via a comparison sort.
pub fn oracle_ranking(query: &[u8], db: &[Vec<u8>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..db.len()).collect();
    idx.sort_by(|&i, &j| {
        naive_hamming(query, &db[i])
            .cmp(&naive_hamming(query, &db[j]))
            .then(i.cmp(&j))
    });
    idx
}

/// Average precision straight from its definition: mean of precision@p
/// over the positions p of relevant items, `denom` chosen by the caller.
pub fn oracle_ap(rel_in_order: &[bool], cutoff: usize, denom: usize) -> f64 {
    let mut terms = Vec::new();
    for p in 0..cutoff.min(rel_in_order.len()) {
        if rel_in_order[p] {
            let hits = rel_in_order[..=p].iter().filter(|&&r| r).count();
            terms.push(hits as f64 / (p + 1) as f64);
        }
    }
    if denom == 0 {
        0.0
    } else {
        terms.iter().sum::<f64>() / denom as f64
    }
}

pub struct OracleInstance {
    pub q_codes: Vec<Vec<u8>>,
    pub q_labels: Vec<u32>,
    pub db_codes: Vec<Vec<u8>>,
    pub db_labels: Vec<u32>,
}

impl OracleInstance {
    fn rel_order(&self, qi: usize) -> Vec<bool> {
        oracle_ranking(&self.q_codes[qi], &self.db_codes)
            .into_iter()
            .map(|i| self.db_labels[i] == self.q_labels[qi])
            .collect()
    }

    /// MAP over queries with at least one relevant item. `truncate` uses the
    /// relevant-retrieved denominator.
    pub fn map(&self, truncate: Option<usize>) -> Option<f64> {
        let mut aps = Vec::new();
        for qi in 0..self.q_codes.len() {
            let rel = self.rel_order(qi);
            let total = rel.iter().filter(|&&r| r).count();
            if total == 0 {
                continue;
            }
            let ap = match truncate {
                None => oracle_ap(&rel, rel.len(), total),
                Some(n) => {
                    let got = rel[..n.min(rel.len())].iter().filter(|&&r| r).count();
                    oracle_ap(&rel, n, got)
                }
            };
            aps.push(ap);
        }
        if aps.is_empty() {
            None
        } else {
            Some(aps.iter().sum::<f64>() / aps.len() as f64)
        }
    }

    pub fn precision_radius(&self, r: u32) -> f64 {
        let mut sum = 0.0;
        for qi in 0..self.q_codes.len() {
            let mut got = 0;
            let mut rel = 0;
            for (i, c) in self.db_codes.iter().enumerate() {
                if naive_hamming(&self.q_codes[qi], c) <= r {
                    got += 1;
                    if self.db_labels[i] == self.q_labels[qi] {
                        rel += 1;
                    }
                }
            }
            if got > 0 {
                sum += rel as f64 / got as f64;
            }
        }
        sum / self.q_codes.len() as f64
    }

    pub fn pr_curve(&self) -> Vec<(f64, f64)> {
        let n = self.db_codes.len();
        let orders: Vec<Vec<bool>> = (0..self.q_codes.len()).map(|q| self.rel_order(q)).collect();
        let total_rel: usize = orders.iter().map(|o| o.iter().filter(|&&r| r).count()).sum();
        (1..=n)
            .map(|k| {
                let hits: usize = orders
                    .iter()
                    .map(|o| o[..k].iter().filter(|&&r| r).count())
                    .sum();
                (
                    hits as f64 / total_rel as f64,
                    hits as f64 / (k * orders.len()) as f64,
                )
            })
            .collect()
    }

    pub fn precision_topk(&self, k: usize) -> f64 {
        let mut sum = 0.0;
        for qi in 0..self.q_codes.len() {
            let rel = self.rel_order(qi);
            sum += rel[..k].iter().filter(|&&r| r).count() as f64 / k as f64;
        }
        sum / self.q_codes.len() as f64
    }
}

/// Deterministic 64-bit generator (SplitMix64) so oracle instances do not
/// depend on the crate's RNG choices.
pub struct SplitMix(pub u64);

impl SplitMix {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit().max(1e-300);
        let u2 = self.unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn bits(&mut self, q: usize) -> Vec<u8> {
        (0..q).map(|_| (self.next_u64() & 1) as u8).collect()
    }
}
