//! Bit-packed binary codes and exact linear-scan Hamming search.
//!
//! Bit `i` of a `q`-bit code lives in word `i / 64` at bit position
//! `i % 64` (least significant bit first). Bits at positions `>= q` are
//! always zero, so XOR + popcount over whole words is exact.
//!
//! Code file layout (little-endian):
//!
//! ```text
//! magic   4 bytes "HLCD"
//! version u16     1
//! reserved u16    0
//! q       u32
//! count   u64
//! count x ceil(q / 64) u64 words
//! ```
//!
//! Labels travel in a sidecar CSV with header `index,label`, multiple labels
//! joined by `;`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::params::ByteReader;

pub const CODE_MAGIC: &[u8; 4] = b"HLCD";
pub const CODE_VERSION: u16 = 1;

/// Class labels of one item; single-label data holds exactly one entry.
pub type LabelSet = Vec<u32>;

#[inline]
pub fn words_for(q: usize) -> usize {
    q.div_ceil(64)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitCode {
    q: usize,
    words: Vec<u64>,
}

impl BitCode {
    /// Packs a list of 0/1 values.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Domain("a code needs at least one bit".into()));
        }
        let mut words = vec![0u64; words_for(bits.len())];
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => words[i / 64] |= 1 << (i % 64),
                other => {
                    return Err(Error::Domain(format!("bit {i} has non-binary value {other}")))
                }
            }
        }
        Ok(Self { q: bits.len(), words })
    }

    pub fn from_words(q: usize, words: Vec<u64>) -> Result<Self> {
        if q == 0 || words.len() != words_for(q) {
            return Err(Error::Domain(format!(
                "{} words cannot hold a {q}-bit code",
                words.len()
            )));
        }
        if !q.is_multiple_of(64) && words[words.len() - 1] >> (q % 64) != 0 {
            return Err(Error::Domain("padding bits beyond q must be zero".into()));
        }
        Ok(Self { q, words })
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> u8 {
        ((self.words[i / 64] >> (i % 64)) & 1) as u8
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.q).map(|i| self.bit(i)).collect()
    }
}

/// Packs a list of 0/1 values into a code.
pub fn pack(bits: &[u8]) -> Result<BitCode> {
    BitCode::from_bits(bits)
}

pub fn unpack(code: &BitCode) -> Vec<u8> {
    code.to_bits()
}

#[inline]
pub(crate) fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits.
pub fn hamming(a: &BitCode, b: &BitCode) -> Result<u32> {
    if a.q != b.q {
        return Err(Error::LengthMismatch {
            expected: a.q,
            actual: b.q,
        });
    }
    Ok(hamming_words(&a.words, &b.words))
}

/// Codes of uniform length with parallel labels and optional external ids.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeDatabase {
    q: usize,
    words: Vec<u64>,
    labels: Vec<LabelSet>,
    ids: Option<Vec<u64>>,
}

impl CodeDatabase {
    pub fn new(q: usize, codes: &[BitCode], labels: Vec<LabelSet>, ids: Option<Vec<u64>>) -> Result<Self> {
        if q == 0 {
            return Err(Error::Domain("code length must be at least 1".into()));
        }
        if labels.len() != codes.len() {
            return Err(Error::LengthMismatch {
                expected: codes.len(),
                actual: labels.len(),
            });
        }
        if let Some(ids) = &ids {
            if ids.len() != codes.len() {
                return Err(Error::LengthMismatch {
                    expected: codes.len(),
                    actual: ids.len(),
                });
            }
        }
        let mut words = Vec::with_capacity(codes.len() * words_for(q));
        for c in codes {
            if c.q != q {
                return Err(Error::LengthMismatch {
                    expected: q,
                    actual: c.q,
                });
            }
            words.extend_from_slice(&c.words);
        }
        Ok(Self { q, words, labels, ids })
    }

    pub fn bits(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn code_words(&self, i: usize) -> &[u64] {
        let w = words_for(self.q);
        &self.words[i * w..(i + 1) * w]
    }

    pub fn code(&self, i: usize) -> BitCode {
        BitCode {
            q: self.q,
            words: self.code_words(i).to_vec(),
        }
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    /// External id of item `i`, falling back to its position.
    pub fn id(&self, i: usize) -> u64 {
        self.ids.as_ref().map_or(i as u64, |ids| ids[i])
    }

    pub fn position_of_id(&self, id: u64) -> Option<usize> {
        (0..self.len()).find(|&i| self.id(i) == id)
    }

    fn check_query(&self, query: &BitCode) -> Result<()> {
        if query.q != self.q {
            return Err(Error::LengthMismatch {
                expected: self.q,
                actual: query.q,
            });
        }
        Ok(())
    }

    /// Distance from `query` to every item, in database order.
    pub fn distances(&self, query: &BitCode) -> Result<Vec<u32>> {
        self.check_query(query)?;
        Ok((0..self.len())
            .map(|i| hamming_words(&query.words, self.code_words(i)))
            .collect())
    }

    /// Writes the binary code file and, when `labels_path` is given, the
    /// label sidecar. Both are replaced atomically.
    pub fn save(&self, codes_path: &Path, labels_path: Option<&Path>) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.words.len() * 8);
        out.extend_from_slice(CODE_MAGIC);
        out.extend_from_slice(&CODE_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.q as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        write_atomic(codes_path, &out)?;
        if let Some(lp) = labels_path {
            write_atomic(lp, self.labels_csv().as_bytes())?;
        }
        Ok(())
    }

    /// Sidecar CSV: `index,label` with multi-labels joined by `;`. Items
    /// with external ids use the id as index.
    pub fn labels_csv(&self) -> String {
        let mut s = String::from("index,label\n");
        for (i, l) in self.labels.iter().enumerate() {
            let joined: Vec<String> = l.iter().map(|x| x.to_string()).collect();
            let _ = writeln!(s, "{},{}", self.id(i), joined.join(";"));
        }
        s
    }

    pub fn load(codes_path: &Path, labels_path: &Path) -> Result<Self> {
        let bytes = fs::read(codes_path)?;
        let (q, codes) = read_code_file(&bytes)?;
        let text = fs::read_to_string(labels_path)?;
        let (ids, labels) = parse_labels_csv(&text)?;
        if labels.len() != codes.len() {
            return Err(Error::Format(format!(
                "{} codes but {} label rows",
                codes.len(),
                labels.len()
            )));
        }
        let plain = ids.iter().enumerate().all(|(i, &id)| id == i as u64);
        CodeDatabase::new(q, &codes, labels, (!plain).then_some(ids))
    }
}

pub fn read_code_file(bytes: &[u8]) -> Result<(usize, Vec<BitCode>)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CODE_MAGIC {
        return Err(Error::Format("not a code file".into()));
    }
    let version = r.u16()?;
    if version != CODE_VERSION {
        return Err(Error::Format(format!("unsupported code file version {version}")));
    }
    r.u16()?;
    let q = r.u32()? as usize;
    let count = r.u64()? as usize;
    if q == 0 {
        return Err(Error::Format("code length 0".into()));
    }
    let w = words_for(q);
    let mut codes = Vec::with_capacity(count.min(1 << 24));
    for i in 0..count {
        let mut words = Vec::with_capacity(w);
        for _ in 0..w {
            words.push(r.u64()?);
        }
        codes.push(
            BitCode::from_words(q, words).map_err(|e| Error::Format(format!("code {i}: {e}")))?,
        );
    }
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes after codes".into()));
    }
    Ok((q, codes))
}

pub fn parse_labels_csv(text: &str) -> Result<(Vec<u64>, Vec<LabelSet>)> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "index,label" => {}
        _ => return Err(Error::Format("label file must start with `index,label`".into())),
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (idx, lab) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("label row {row}: expected two columns")))?;
        ids.push(
            idx.trim()
                .parse()
                .map_err(|_| Error::Format(format!("label row {row}: bad index {idx:?}")))?,
        );
        labels.push(parse_label_set(lab).map_err(|e| Error::Format(format!("label row {row}: {e}")))?);
    }
    Ok((ids, labels))
}

pub fn parse_label_set(s: &str) -> Result<LabelSet> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("bad label {p:?}")))
        })
        .collect()
}

/// Database indices sorted by ascending Hamming distance, ties by index.
pub fn rank_all(query: &BitCode, db: &CodeDatabase) -> Result<Vec<usize>> {
    let dist = db.distances(query)?;
    // counting sort over the q + 1 possible distances keeps index order
    let mut counts = vec![0usize; db.bits() + 2];
    for &d in &dist {
        counts[d as usize + 1] += 1;
    }
    for i in 1..counts.len() {
        counts[i] += counts[i - 1];
    }
    let mut order = vec![0usize; dist.len()];
    for (i, &d) in dist.iter().enumerate() {
        let slot = &mut counts[d as usize];
        order[*slot] = i;
        *slot += 1;
    }
    Ok(order)
}

/// Indices (ascending) of items within Hamming distance `r` of `query`.
pub fn radius_search(query: &BitCode, db: &CodeDatabase, r: u32) -> Result<Vec<usize>> {
    Ok(db
        .distances(query)?
        .into_iter()
        .enumerate()
        .filter(|&(_, d)| d <= r)
        .map(|(i, _)| i)
        .collect())
}
