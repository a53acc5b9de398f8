//! Datasets, their on-disk formats and the query/database/train split.
//!
//! Three input formats are understood:
//!
//! * raw tensor binary (`HLDS`), lossless and shape-preserving;
//! * CSV feature vectors with header `id,label,f0,...`;
//! * a directory `<root>/<label>/<id>.pgm|ppm` of binary or ASCII netpbm
//!   images, scaled to `[0, 1]` and stored channel-first.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use hashlab_core::index::parse_label_set;
use hashlab_core::io::write_atomic;
use hashlab_core::nn::ByteReader;
use hashlab_core::{Error, LabelSet, Real, Result, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const DATA_MAGIC: &[u8; 4] = b"HLDS";
pub const DATA_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Raw,
    Csv,
    Pnm,
}

impl DataFormat {
    /// Directories are netpbm trees, `.csv` files CSV, anything else raw.
    pub fn detect(path: &Path) -> DataFormat {
        if path.is_dir() {
            DataFormat::Pnm
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            DataFormat::Csv
        } else {
            DataFormat::Raw
        }
    }
}

/// Items of one shape, each with an id and a label set, ordered by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: Vec<usize>,
    pub ids: Vec<u64>,
    pub labels: Vec<LabelSet>,
    values: Vec<f64>,
}

fn format_err(record: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("record {record}: {msg}"))
}

impl Dataset {
    /// Builds a dataset from unordered records; the result is sorted by id.
    pub fn new(shape: Vec<usize>, records: Vec<(u64, LabelSet, Vec<f64>)>) -> Result<Self> {
        let item_len: usize = shape.iter().product();
        if shape.is_empty() || item_len == 0 {
            return Err(Error::Shape(format!("bad item shape {shape:?}")));
        }
        for (i, (_, _, v)) in records.iter().enumerate() {
            if v.len() != item_len {
                return Err(format_err(i, format!("{} values, expected {item_len}", v.len())));
            }
            if let Some(j) = v.iter().position(|x| !x.is_finite()) {
                return Err(format_err(i, format!("value {j} is not finite")));
            }
        }
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.sort_by_key(|&i| records[i].0);
        for w in order.windows(2) {
            if records[w[0]].0 == records[w[1]].0 {
                return Err(format_err(w[1], format!("duplicate id {}", records[w[1]].0)));
            }
        }
        let mut slots: Vec<Option<(u64, LabelSet, Vec<f64>)>> = records.into_iter().map(Some).collect();
        let mut ds = Dataset {
            shape,
            ids: Vec::with_capacity(order.len()),
            labels: Vec::with_capacity(order.len()),
            values: Vec::with_capacity(order.len() * item_len),
        };
        for i in order {
            let (id, l, v) = slots[i].take().unwrap();
            ds.ids.push(id);
            ds.labels.push(l);
            ds.values.extend_from_slice(&v);
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn item_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn position_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    pub fn tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        (0..self.len())
            .map(|i| {
                Tensor::new(self.shape.clone(), self.item(i).iter().map(|&v| T::of(v)).collect())
                    .expect("item length matches shape")
            })
            .collect()
    }

    /// Items at `positions`, kept in id order.
    pub fn subset(&self, positions: &[usize]) -> Dataset {
        let mut p = positions.to_vec();
        p.sort_unstable();
        p.dedup();
        let mut values = Vec::with_capacity(p.len() * self.item_len());
        for &i in &p {
            values.extend_from_slice(self.item(i));
        }
        Dataset {
            shape: self.shape.clone(),
            ids: p.iter().map(|&i| self.ids[i]).collect(),
            labels: p.iter().map(|&i| self.labels[i].clone()).collect(),
            values,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.item_len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "cannot view items of shape {:?} as {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.values.len() * 8 + self.len() * 16);
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.push(8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&(self.labels[i].len() as u32).to_le_bytes());
            for &l in &self.labels[i] {
                out.extend_from_slice(&l.to_le_bytes());
            }
            for &v in self.item(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != DATA_MAGIC {
            return Err(Error::Format("not a raw dataset file".into()));
        }
        let version = r.u16()?;
        if version != DATA_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        if r.u8()? != 8 {
            return Err(Error::Format("raw datasets store 8-byte values".into()));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        let item_len: usize = shape.iter().product();
        let count = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for rec in 0..count {
            let truncated = |_| format_err(rec, "truncated");
            let id = r.u64().map_err(truncated)?;
            let nl = r.u32().map_err(truncated)? as usize;
            let labels = (0..nl).map(|_| r.u32().map_err(truncated)).collect::<Result<Vec<_>>>()?;
            let vals = r.take(item_len * 8).map_err(truncated)?;
            let values = vals.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push((id, labels, values));
        }
        if !r.is_at_end() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        Dataset::new(shape, records)
    }

    /// CSV export; only flat (rank-1) datasets have a CSV form.
    pub fn to_csv(&self) -> Result<String> {
        if self.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "CSV holds feature vectors; items have shape {:?}",
                self.shape
            )));
        }
        let mut s = String::from("id,label");
        for j in 0..self.item_len() {
            let _ = write!(s, ",f{j}");
        }
        s.push('\n');
        for i in 0..self.len() {
            let l: Vec<String> = self.labels[i].iter().map(|x| x.to_string()).collect();
            let _ = write!(s, "{},{}", self.ids[i], l.join(";"));
            for v in self.item(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.len() < 3 || header[0] != "id" || header[1] != "label" {
            return Err(Error::Format("CSV header must be `id,label,f0,...`".into()));
        }
        for (j, h) in header[2..].iter().enumerate() {
            if *h != format!("f{j}") {
                return Err(Error::Format(format!("CSV header column {}: expected f{j}, got {h:?}", j + 2)));
            }
        }
        let d = header.len() - 2;
        let mut records = Vec::new();
        for (rec, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != d + 2 {
                return Err(format_err(rec, format!("{} columns, expected {}", cols.len(), d + 2)));
            }
            let id = cols[0].trim().parse().map_err(|_| format_err(rec, format!("bad id {:?}", cols[0])))?;
            let labels = parse_label_set(cols[1]).map_err(|e| format_err(rec, e))?;
            let values = cols[2..]
                .iter()
                .map(|c| c.trim().parse::<f64>().map_err(|_| format_err(rec, format!("bad value {c:?}"))))
                .collect::<Result<Vec<_>>>()?;
            records.push((id, labels, values));
        }
        Dataset::new(vec![d], records)
    }
}

pub fn ingest(path: &Path, format: Option<DataFormat>) -> Result<Dataset> {
    match format.unwrap_or_else(|| DataFormat::detect(path)) {
        DataFormat::Raw => Dataset::from_raw_bytes(&fs::read(path)?),
        DataFormat::Csv => Dataset::from_csv(&fs::read_to_string(path)?),
        DataFormat::Pnm => ingest_pnm_dir(path),
    }
}

pub fn export(ds: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    match format {
        DataFormat::Raw => write_atomic(path, &ds.to_raw_bytes()),
        DataFormat::Csv => write_atomic(path, ds.to_csv()?.as_bytes()),
        DataFormat::Pnm => Err(Error::Config("export supports raw and csv formats only".into())),
    }
}

fn ingest_pnm_dir(root: &Path) -> Result<Dataset> {
    let mut files: Vec<(PathBuf, u32, u64)> = Vec::new();
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    classes.sort();
    for dir in classes.into_iter().filter(|p| p.is_dir()) {
        let name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let label: u32 = name
            .parse()
            .map_err(|_| Error::Format(format!("class directory {name:?} is not a numeric label")))?;
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for f in entries {
            let ext = f.extension().map(|e| e.to_string_lossy().to_ascii_lowercase());
            if !matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
                continue;
            }
            let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
            let id: u64 = stem
                .parse()
                .map_err(|_| Error::Format(format!("image {}: file name is not a numeric id", f.display())))?;
            files.push((f, label, id));
        }
    }
    // an id appearing under several class directories collects all labels
    files.sort_by_key(|(_, l, id)| (*id, *l));
    let mut records: Vec<(u64, LabelSet, Vec<f64>)> = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    for (rec, (path, label, id)) in files.iter().enumerate() {
        if let Some(last) = records.last_mut().filter(|r| r.0 == *id) {
            last.1.push(*label);
            continue;
        }
        let (s, values) = read_pnm(&fs::read(path)?).map_err(|e| format_err(rec, format!("{}: {e}", path.display())))?;
        match &shape {
            None => shape = Some(s),
            Some(prev) if *prev != s => {
                return Err(format_err(rec, format!("{}: shape {s:?} differs from {prev:?}", path.display())))
            }
            _ => {}
        }
        records.push((*id, vec![*label], values));
    }
    let shape = shape.ok_or_else(|| Error::Format(format!("no images under {}", root.display())))?;
    Dataset::new(shape, records)
}

/// Parses P2/P3 (ASCII) and P5/P6 (binary, 8 or 16 bit) netpbm images into
/// a channel-first shape and values in `[0, 1]`.
pub fn read_pnm(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
    let bad = |m: &str| Error::Format(m.to_string());
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |t: String| t.parse::<usize>().map_err(|_| Error::Format(format!("bad header field {t:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad netpbm dimensions"));
    }
    let channels = match magic.as_str() {
        "P2" | "P5" => 1,
        "P3" | "P6" => 3,
        _ => return Err(bad("unsupported netpbm variant (need P2, P3, P5 or P6)")),
    };
    let n = w * h * channels;
    let samples: Vec<usize> = if magic == "P5" || magic == "P6" {
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let width = if maxval < 256 { 1 } else { 2 };
        if body.len() < n * width {
            return Err(bad("truncated pixel data"));
        }
        (0..n)
            .map(|i| {
                if width == 1 {
                    body[i] as usize
                } else {
                    u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as usize
                }
            })
            .collect()
    } else {
        (0..n).map(|_| num(token()?)).collect::<Result<_>>()?
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(bad("sample exceeds maxval"));
    }
    // interleaved RGB to channel-first
    let mut values = vec![0.0; n];
    for (i, &s) in samples.iter().enumerate() {
        let (pix, c) = (i / channels, i % channels);
        values[c * w * h + pix] = s as f64 / maxval as f64;
    }
    Ok((vec![channels, h, w], values))
}

/// Gaussian blobs: each class has a centroid with i.i.d. `N(0, s²/2)`
/// entries (`s` the separation), and items add unit Gaussian noise. Two
/// centroids then differ by about `s` noise standard deviations along the
/// line joining them. Ids run from 0 with classes interleaved.
pub fn synth_blobs(classes: usize, per_class: usize, shape: &[usize], separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("synth.classes: need at least 2, got {classes}")));
    }
    if per_class == 0 {
        return Err(Error::Config("synth.per_class: must be positive".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("synth.separation: must be non-negative, got {separation}")));
    }
    let d: usize = shape.iter().product();
    if shape.is_empty() || d == 0 {
        return Err(Error::Config(format!("synth.shape: bad shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = separation / std::f64::consts::SQRT_2;
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let centroids: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..d).map(|_| scale * normal()).collect())
        .collect();
    let records = (0..classes * per_class)
        .map(|i| {
            let c = i % classes;
            let v = centroids[c].iter().map(|&m| m + normal()).collect();
            (i as u64, vec![c as u32], v)
        })
        .collect();
    Dataset::new(shape.to_vec(), records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Items held out as queries.
    pub query: usize,
    /// Database size; `None` takes every non-query item.
    pub database: Option<usize>,
    /// Training items, drawn from the database side; `None` uses the whole
    /// database.
    pub train: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            query: 1000,
            database: None,
            train: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub query: Dataset,
    pub database: Dataset,
}

/// Random disjoint query and database sets, with training items sampled
/// from the database side. Each set keeps id order.
pub fn split(ds: &Dataset, cfg: &SplitConfig, seed: u64) -> Result<Splits> {
    let n = ds.len();
    let nq = cfg.query;
    let nd = cfg.database.unwrap_or(n.saturating_sub(nq));
    if nq == 0 || nd == 0 || nq + nd > n {
        return Err(Error::Infeasible(format!(
            "split needs {nq} query and {nd} database items from {n}"
        )));
    }
    let nt = cfg.train.unwrap_or(nd);
    if nt == 0 || nt > nd {
        return Err(Error::Infeasible(format!(
            "split.train: {nt} training items from a database of {nd}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let query = &order[..nq];
    let mut database = order[nq..nq + nd].to_vec();
    database.shuffle(&mut rng);
    let train = &database[..nt];
    let s = Splits {
        train: ds.subset(train),
        query: ds.subset(query),
        database: ds.subset(&database),
    };
    debug_assert!(s.query.ids.iter().collect::<BTreeSet<_>>().is_disjoint(&s.database.ids.iter().collect()));
    Ok(s)
}
