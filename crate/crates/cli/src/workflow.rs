//! Train, encode, evaluate, retrieve and compare workflows.
//!
//! A run directory looks like
//!
//! ```text
//! <out>/config.toml
//! <out>/summary.csv                  (when evaluated)
//! <out>/q<bits>/train_log.csv
//! <out>/q<bits>/checkpoints/final.ckpt
//! <out>/q<bits>/codes/{query,database}.{codes,labels.csv,approx.csv}
//! <out>/q<bits>/metrics/{report.json,pr_curve.csv,topk.csv}
//! ```
//!
//! Whole directories are built under a temporary sibling and renamed into
//! place, so a failed command leaves nothing behind.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hashlab_core::index::read_code_file;
use hashlab_core::io::write_atomic;
use hashlab_core::trainer::{checkpoint_width, LOG_HEADER};
use hashlab_core::{
    evaluate, quantize, rank_all, train, CodeDatabase, Error, HashModel, HeadVariant, MetricOptions, MetricReport,
    ParamStore, Real, Result, SharingMode, TrainState,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Precision};
use crate::dataset::{split, Dataset, Splits};

/// File marking a directory as written by this tool, and so replaceable.
pub const MARKER: &str = ".hashlab-output";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// A directory under construction next to its final location.
pub struct Staging {
    tmp: PathBuf,
    target: PathBuf,
    done: bool,
}

fn check_replaceable(target: &Path) -> Result<()> {
    if !target.exists() {
        return Ok(());
    }
    let ok = target.is_dir()
        && (target.join(MARKER).is_file() || fs::read_dir(target)?.next().is_none());
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "refusing to replace {}: not an output directory of this tool",
            target.display()
        )))
    }
}

impl Staging {
    pub fn new(target: &Path) -> Result<Self> {
        check_replaceable(target)?;
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let name = target
            .file_name()
            .ok_or_else(|| Error::Config(format!("bad output path {}", target.display())))?
            .to_string_lossy()
            .into_owned();
        let tmp = parent.join(format!(".{name}.partial{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join(MARKER), b"")?;
        Ok(Self {
            tmp,
            target: target.to_path_buf(),
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        check_replaceable(&self.target)?;
        if self.target.exists() {
            let old = self.tmp.with_extension("old");
            fs::rename(&self.target, &old)?;
            fs::rename(&self.tmp, &self.target)?;
            fs::remove_dir_all(&old)?;
        } else {
            fs::rename(&self.tmp, &self.target)?;
        }
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn bits_dir(root: &Path, bits: usize) -> PathBuf {
    root.join(format!("q{bits}"))
}

pub fn final_checkpoint(root: &Path, bits: usize) -> PathBuf {
    bits_dir(root, bits).join("checkpoints").join("final.ckpt")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Database,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Database => "database",
        }
    }
}

/// Paths of one role's code files inside a codes directory.
pub fn code_paths(dir: &Path, role: Role) -> (PathBuf, PathBuf, PathBuf) {
    let n = role.name();
    (
        dir.join(format!("{n}.codes")),
        dir.join(format!("{n}.labels.csv")),
        dir.join(format!("{n}.approx.csv")),
    )
}

/// Outcome of one code length.
#[derive(Clone, Debug, PartialEq)]
pub struct BitsResult {
    pub bits: usize,
    pub final_loss: f64,
    pub report: Option<MetricReport>,
}

pub fn make_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let ds = cfg.load_data()?;
    split(&ds, &cfg.split, cfg.seed)
}

fn train_bits<T: Real>(cfg: &ExperimentConfig, model: &HashModel, splits: &Splits, dir: &Path) -> Result<TrainState<T>> {
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    if splits.train.shape != model.network.input_shape {
        return Err(Error::Shape(format!(
            "data items have shape {:?}, network expects {:?}",
            splits.train.shape, model.network.input_shape
        )));
    }
    let mut state: TrainState<T> = TrainState::new(model, &cfg.train)?;
    let data = splits.train.tensors::<T>();
    let mut log = BufWriter::new(fs::File::create(dir.join("train_log.csv"))?);
    writeln!(log, "{LOG_HEADER}")?;
    let every = cfg.checkpoint_every;
    train(model, &mut state, &cfg.train, &data, &splits.train.labels, |row, st| {
        writeln!(log, "{}", row.csv())?;
        if every > 0 && st.iteration % every == 0 && st.iteration < cfg.train.max_iterations {
            st.save(model, &ck_dir.join(format!("iter-{:08}.ckpt", st.iteration)))?;
        }
        Ok(())
    })?;
    log.flush()?;
    state.save(model, &ck_dir.join("final.ckpt"))?;
    Ok(state)
}

/// Approximate codes and the quantized database of `ds` under `params`.
pub fn encode_dataset<T: Real>(model: &HashModel, params: &ParamStore<T>, ds: &Dataset) -> Result<(Vec<Vec<T>>, CodeDatabase)> {
    if ds.shape != model.network.input_shape {
        return Err(Error::Shape(format!(
            "data items have shape {:?}, network expects {:?}",
            ds.shape, model.network.input_shape
        )));
    }
    let approx = ds
        .tensors::<T>()
        .par_iter()
        .map(|x| model.encode(params, x))
        .collect::<Result<Vec<_>>>()?;
    let codes: Vec<_> = approx.iter().map(quantize).collect();
    let db = CodeDatabase::new(model.bits(), &codes, ds.labels.clone(), Some(ds.ids.clone()))?;
    Ok((approx.into_iter().map(|a| a.values).collect(), db))
}

pub fn write_codes<T: Real>(dir: &Path, role: Role, approx: &[Vec<T>], db: &CodeDatabase) -> Result<()> {
    let (codes, labels, approx_path) = code_paths(dir, role);
    let mut s = String::from("id");
    for j in 0..db.bits() {
        let _ = write!(s, ",b{j}");
    }
    s.push('\n');
    for (i, row) in approx.iter().enumerate() {
        let _ = write!(s, "{}", db.id(i));
        for v in row {
            let _ = write!(s, ",{v:?}");
        }
        s.push('\n');
    }
    write_atomic(&approx_path, s.as_bytes())?;
    db.save(&codes, Some(&labels))
}

pub fn load_codes(dir: &Path, role: Role) -> Result<CodeDatabase> {
    let (codes, labels, _) = code_paths(dir, role);
    CodeDatabase::load(&codes, &labels)
}

fn encode_splits<T: Real>(model: &HashModel, state: &TrainState<T>, splits: &Splits, dir: &Path) -> Result<(CodeDatabase, CodeDatabase)> {
    let (qa, qdb) = encode_dataset(model, state.query_network(), &splits.query)?;
    let (da, ddb) = encode_dataset(model, state.database_network(), &splits.database)?;
    write_codes(dir, Role::Query, &qa, &qdb)?;
    write_codes(dir, Role::Database, &da, &ddb)?;
    Ok((qdb, ddb))
}

fn run_bits<T: Real>(cfg: &ExperimentConfig, splits: &Splits, root: &Path, bits: usize, evaluate_codes: bool) -> Result<BitsResult> {
    let net = cfg.network_spec()?;
    let mut model = HashModel::new(&net, &cfg.head, bits)?;
    let dir = bits_dir(root, bits);
    let state: TrainState<T> = train_bits(cfg, &model, splits, &dir)?;
    model.head.epsilon = state.epsilon;
    let report = if evaluate_codes {
        let (q, db) = encode_splits(&model, &state, splits, &dir.join("codes"))?;
        let report = evaluate(&q, &db, &cfg.metrics)?;
        report.save(&dir.join("metrics"))?;
        Some(report)
    } else {
        None
    };
    Ok(BitsResult {
        bits,
        final_loss: state.loss.last,
        report,
    })
}

/// Runs every code length of `cfg` into `root` (which must exist).
pub fn run_into(cfg: &ExperimentConfig, splits: &Splits, root: &Path, evaluate_codes: bool) -> Result<Vec<BitsResult>> {
    write_atomic(&root.join("config.toml"), cfg.snapshot()?.as_bytes())?;
    let mut results = Vec::new();
    for &bits in &cfg.bits {
        let r = match cfg.precision {
            Precision::F32 => run_bits::<f32>(cfg, splits, root, bits, evaluate_codes)?,
            Precision::F64 => run_bits::<f64>(cfg, splits, root, bits, evaluate_codes)?,
        };
        results.push(r);
    }
    if evaluate_codes {
        write_atomic(&root.join("summary.csv"), summary_csv(&results).as_bytes())?;
    }
    Ok(results)
}

fn summary_csv(results: &[BitsResult]) -> String {
    let mut s = String::from("bits,map,precision_at_radius,final_loss\n");
    for r in results {
        if let Some(rep) = &r.report {
            let _ = writeln!(s, "{},{},{},{}", r.bits, rep.map, rep.precision_at_radius, r.final_loss);
        }
    }
    s
}

/// Trains every configured code length into `cfg.output`; with
/// `evaluate_codes` the query and database splits are also encoded and
/// scored.
pub fn cmd_train(cfg: &ExperimentConfig, evaluate_codes: bool) -> Result<Vec<BitsResult>> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let stage = Staging::new(&cfg.output)?;
    let results = run_into(cfg, &splits, stage.path(), evaluate_codes)?;
    stage.commit()?;
    Ok(results)
}

fn with_checkpoint<R>(
    path: &Path,
    f32_fn: impl FnOnce(TrainState<f32>, HashModel) -> Result<R>,
    f64_fn: impl FnOnce(TrainState<f64>, HashModel) -> Result<R>,
) -> Result<R> {
    let bytes = fs::read(path)?;
    match checkpoint_width(&bytes)? {
        4 => {
            let (s, m) = TrainState::<f32>::from_bytes(&bytes)?;
            f32_fn(s, m)
        }
        8 => {
            let (s, m) = TrainState::<f64>::from_bytes(&bytes)?;
            f64_fn(s, m)
        }
        w => Err(Error::Format(format!("unsupported value width {w}"))),
    }
}

/// Encodes `ds` with the checkpoint's network for `role` into `out`.
pub fn cmd_encode(checkpoint: &Path, ds: &Dataset, role: Role, out: &Path) -> Result<CodeDatabase> {
    fn go<T: Real>(state: TrainState<T>, model: HashModel, ds: &Dataset, role: Role, out: &Path) -> Result<CodeDatabase> {
        let params = match role {
            Role::Query => state.query_network(),
            Role::Database => state.database_network(),
        };
        let (approx, db) = encode_dataset(&model, params, ds)?;
        write_codes(out, role, &approx, &db)?;
        Ok(db)
    }
    with_checkpoint(checkpoint, |s, m| go(s, m, ds, role, out), |s, m| go(s, m, ds, role, out))
}

/// Scores the query codes in `codes` against its database codes.
pub fn cmd_eval(codes: &Path, opts: &MetricOptions, out: &Path) -> Result<MetricReport> {
    let q = load_codes(codes, Role::Query)?;
    let db = load_codes(codes, Role::Database)?;
    let report = evaluate(&q, &db, opts)?;
    let stage = Staging::new(out)?;
    report.save(stage.path())?;
    stage.commit()?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Retrieved {
    pub rank: usize,
    pub id: u64,
    pub distance: u32,
    pub labels: Vec<u32>,
}

pub enum RetrieveSource<'a> {
    /// A codes directory; the query id is looked up among the query codes
    /// first, then the database.
    Codes(&'a Path),
    /// A checkpoint and a dataset: the dataset is encoded as the database
    /// and the query item with the query network.
    Checkpoint { checkpoint: &'a Path, data: &'a Dataset },
}

fn top_k(query: &hashlab_core::BitCode, db: &CodeDatabase, k: usize) -> Result<Vec<Retrieved>> {
    let dist = db.distances(query)?;
    Ok(rank_all(query, db)?
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(r, i)| Retrieved {
            rank: r + 1,
            id: db.id(i),
            distance: dist[i],
            labels: db.labels()[i].clone(),
        })
        .collect())
}

pub fn cmd_retrieve(source: RetrieveSource<'_>, query_id: u64, k: usize) -> Result<Vec<Retrieved>> {
    if k == 0 {
        return Err(Error::Config("k: must be positive".into()));
    }
    match source {
        RetrieveSource::Codes(dir) => {
            let db = load_codes(dir, Role::Database)?;
            let (qpath, qlabels, _) = code_paths(dir, Role::Query);
            let from_queries = if qpath.is_file() {
                let q = CodeDatabase::load(&qpath, &qlabels)?;
                q.position_of_id(query_id).map(|i| q.code(i))
            } else {
                None
            };
            let code = match from_queries {
                Some(c) => c,
                None => db
                    .position_of_id(query_id)
                    .map(|i| db.code(i))
                    .ok_or_else(|| Error::Domain(format!("query id {query_id} not found")))?,
            };
            top_k(&code, &db, k)
        }
        RetrieveSource::Checkpoint { checkpoint, data } => {
            fn go<T: Real>(state: TrainState<T>, model: HashModel, data: &Dataset, id: u64, k: usize) -> Result<Vec<Retrieved>> {
                let pos = data
                    .position_of(id)
                    .ok_or_else(|| Error::Domain(format!("query id {id} not found")))?;
                let (_, db) = encode_dataset(&model, state.database_network(), data)?;
                let (_, q) = encode_dataset(&model, state.query_network(), &data.subset(&[pos]))?;
                top_k(&q.code(0), &db, k)
            }
            with_checkpoint(checkpoint, |s, m| go(s, m, data, query_id, k), |s, m| go(s, m, data, query_id, k))
        }
    }
}

pub fn retrieved_csv(items: &[Retrieved]) -> String {
    let mut s = String::from("rank,id,distance,label\n");
    for r in items {
        let l: Vec<String> = r.labels.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "{},{},{},{}", r.rank, r.id, r.distance, l.join(";"));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CompareAxis {
    HeadVariant,
    SharingMode,
}

impl CompareAxis {
    pub fn name(self) -> &'static str {
        match self {
            CompareAxis::HeadVariant => "head-variant",
            CompareAxis::SharingMode => "sharing-mode",
        }
    }

    /// The two settings compared, applied to a copy of `cfg`.
    pub fn variants(self, cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        match self {
            CompareAxis::HeadVariant => [HeadVariant::DivideAndEncode, HeadVariant::FullyConnected]
                .into_iter()
                .map(|v| {
                    let mut c = cfg.clone();
                    c.head.variant = v;
                    (v.name().to_string(), c)
                })
                .collect(),
            CompareAxis::SharingMode => [SharingMode::FullyShared, SharingMode::QueryIndependent]
                .into_iter()
                .map(|m| {
                    let mut c = cfg.clone();
                    c.train.sharing = m;
                    (m.name().to_string(), c)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub variant: String,
    pub bits: usize,
    pub map: f64,
    pub precision_at_radius: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub axis: CompareAxis,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    pub fn csv(&self) -> String {
        let mut s = format!("{},bits,map,precision_at_radius,final_loss\n", self.axis.name());
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.variant, r.bits, r.map, r.precision_at_radius, r.final_loss);
        }
        s
    }

    /// Fixed-width text table, one row per variant and code length.
    pub fn pretty(&self) -> String {
        let mut s = format!("{:<20} {:>5} {:>8} {:>8}\n", self.axis.name(), "bits", "MAP", "P@r");
        for r in &self.rows {
            let _ = writeln!(s, "{:<20} {:>5} {:>8.4} {:>8.4}", r.variant, r.bits, r.map, r.precision_at_radius);
        }
        s
    }
}

/// Trains and evaluates both settings of `axis` on the same data split and
/// seed, each into `<out>/<variant>/`, and writes `<out>/compare.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig, axis: CompareAxis) -> Result<CompareTable> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let stage = Staging::new(&cfg.output)?;
    let mut rows = Vec::new();
    for (name, vcfg) in axis.variants(cfg) {
        let dir = stage.path().join(&name);
        fs::create_dir_all(&dir)?;
        for r in run_into(&vcfg, &splits, &dir, true)? {
            let rep = r.report.expect("evaluated run has a report");
            rows.push(CompareRow {
                variant: name.clone(),
                bits: r.bits,
                map: rep.map,
                precision_at_radius: rep.precision_at_radius,
                final_loss: r.final_loss,
            });
        }
    }
    let table = CompareTable { axis, rows };
    write_atomic(&stage.path().join("compare.csv"), table.csv().as_bytes())?;
    stage.commit()?;
    Ok(table)
}

/// Validates that a code file is readable; used by `hashlab eval` to give
/// a data error (not a usage error) for corrupt inputs.
pub fn check_code_file(path: &Path) -> Result<usize> {
    Ok(read_code_file(&fs::read(path)?)?.0)
}
