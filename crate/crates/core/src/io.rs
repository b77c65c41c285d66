//! On-disk formats: line-delimited datasets, model documents, fit reports,
//! grid specifications and CSV tables.
//!
//! Numbers are written in shortest round-trip form, so every `f64` reads back
//! bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MoldsError, Result};
use crate::experiments::BenchRecord;
use crate::kalman::StatePrior;
use crate::lds::{LdsParams, MoldsModel, Trajectory};
use crate::linalg::{Mat, Vector};
use crate::pipeline::{AssignmentReport, FitReport, GridRow};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

fn parse_err(what: impl std::fmt::Display) -> MoldsError {
    MoldsError::Parse(what.to_string())
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn mat_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, field: &str) -> Result<Mat> {
    if rows.len() != nrows {
        return Err(parse_err(format!("`{field}`: expected {nrows} rows, got {}", rows.len())));
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != ncols) {
        return Err(parse_err(format!("`{field}` row {i}: expected {ncols} columns, got {}", r.len())));
    }
    Ok(Mat::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub m: usize,
    pub p: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialLine {
    trial_id: String,
    u: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DatasetLine {
    Meta(MetaLine),
    Trial(TrialLine),
}

/// Reads one trial per line, with an optional leading `{"meta": {"m", "p"}}`.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<Trajectory>> {
    let mut meta: Option<DatasetMeta> = None;
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let parsed: DatasetLine =
            serde_json::from_str(&line).map_err(|e| parse_err(format!("line {lineno}: {e}")))?;
        match parsed {
            DatasetLine::Meta(m) => {
                if meta.is_some() || !trajs.is_empty() {
                    return Err(parse_err(format!("line {lineno}: meta header must come first")));
                }
                meta = Some(m.meta);
            }
            DatasetLine::Trial(rec) => {
                let t_len = rec.u.len();
                if rec.y.len() != t_len {
                    return Err(parse_err(format!(
                        "line {lineno}: trial {:?} has {} input rows and {} output rows",
                        rec.trial_id,
                        t_len,
                        rec.y.len()
                    )));
                }
                let (m, p) = match (meta, trajs.first()) {
                    (Some(mt), _) => (mt.m, mt.p),
                    (None, Some(first)) => (first.m(), first.p()),
                    (None, None) => (rec.u.first().map_or(0, Vec::len), rec.y.first().map_or(0, Vec::len)),
                };
                let u = mat_from_rows(&rec.u, t_len, m, "u").map_err(|e| parse_err(format!("line {lineno}: {e}")))?;
                let y = mat_from_rows(&rec.y, t_len, p, "y").map_err(|e| parse_err(format!("line {lineno}: {e}")))?;
                let traj = Trajectory::new(u, y, rec.trial_id).map_err(|e| parse_err(format!("line {lineno}: {e}")))?;
                trajs.push(traj);
            }
        }
    }
    Ok(trajs)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Writes the meta header followed by one line per trial.
pub fn write_dataset(mut w: impl Write, trajs: &[Trajectory]) -> Result<()> {
    if let Some(first) = trajs.first() {
        let meta = MetaLine {
            meta: DatasetMeta {
                m: first.m(),
                p: first.p(),
            },
        };
        serde_json::to_writer(&mut w, &meta).map_err(parse_err)?;
        writeln!(w)?;
    }
    for t in trajs {
        let rec = TrialLine {
            trial_id: t.trial_id.clone(),
            u: rows_of(&t.u),
            y: rows_of(&t.y),
        };
        serde_json::to_writer(&mut w, &rec).map_err(parse_err)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: impl AsRef<Path>, trajs: &[Trajectory]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), trajs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFile {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    pub d: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    /// `tensor`, `random` or `truth`.
    pub init_method: String,
    pub seed: u64,
    #[serde(rename = "L")]
    pub lag: Option<usize>,
    pub tool_version: String,
}

impl Provenance {
    pub fn new(init_method: impl Into<String>, seed: u64, lag: Option<usize>) -> Self {
        Provenance {
            init_method: init_method.into(),
            seed,
            lag,
            tool_version: TOOL_VERSION.to_string(),
        }
    }
}

/// Serialized mixture with its state prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub weights: Vec<f64>,
    pub components: Vec<ComponentFile>,
    pub prior: PriorFile,
    pub provenance: Provenance,
}

impl ModelFile {
    pub fn new(model: &MoldsModel, prior: &StatePrior, provenance: Provenance) -> Result<Self> {
        model.validate()?;
        let (n, m, p) = model.dims();
        if prior.mean.len() != n || prior.cov.shape() != (n, n) {
            return Err(MoldsError::dim("prior", n, prior.mean.len()));
        }
        Ok(ModelFile {
            k: model.k(),
            n,
            m,
            p,
            weights: model.weights.clone(),
            components: model
                .components
                .iter()
                .map(|c| ComponentFile {
                    a: rows_of(&c.a),
                    b: rows_of(&c.b),
                    c: rows_of(&c.c),
                    d: rows_of(&c.d),
                    q: rows_of(&c.q),
                    r: rows_of(&c.r),
                })
                .collect(),
            prior: PriorFile {
                mean: prior.mean.iter().copied().collect(),
                cov: rows_of(&prior.cov),
            },
            provenance,
        })
    }

    pub fn to_model(&self) -> Result<(MoldsModel, StatePrior)> {
        let (n, m, p) = (self.n, self.m, self.p);
        if self.weights.len() != self.k || self.components.len() != self.k {
            return Err(parse_err(format!(
                "K = {} but {} weights and {} components",
                self.k,
                self.weights.len(),
                self.components.len()
            )));
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(LdsParams {
                    a: mat_from_rows(&c.a, n, n, "A")?,
                    b: mat_from_rows(&c.b, n, m, "B")?,
                    c: mat_from_rows(&c.c, p, n, "C")?,
                    d: mat_from_rows(&c.d, p, m, "D")?,
                    q: mat_from_rows(&c.q, n, n, "Q")?,
                    r: mat_from_rows(&c.r, p, p, "R")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if self.prior.mean.len() != n {
            return Err(parse_err(format!("prior mean: expected {n} entries, got {}", self.prior.mean.len())));
        }
        let prior = StatePrior {
            mean: Vector::from_vec(self.prior.mean.clone()),
            cov: mat_from_rows(&self.prior.cov, n, n, "prior cov")?,
        };
        let model = MoldsModel {
            weights: self.weights.clone(),
            components,
        };
        model.validate()?;
        Ok((model, prior))
    }
}

pub fn write_json_file<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(parse_err)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Reads a JSON document; unknown or missing fields are reported by name.
pub fn read_json_file<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(parse_err)
}

pub fn write_model_file(path: impl AsRef<Path>, file: &ModelFile) -> Result<()> {
    write_json_file(path, file)
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    read_json_file(path)
}

/// Summary of one fit as written next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub init_method: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub n: usize,
    #[serde(rename = "L")]
    pub lag: Option<usize>,
    pub seed: u64,
    pub nll: f64,
    pub rmse: f64,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub usage: Vec<f64>,
    pub weights: Vec<f64>,
    pub frozen: Vec<usize>,
}

impl From<&FitReport> for ReportFile {
    fn from(r: &FitReport) -> Self {
        ReportFile {
            init_method: r.init_method.as_str().to_string(),
            k: r.k,
            n: r.n,
            lag: (r.lag > 0).then_some(r.lag),
            seed: r.seed,
            nll: r.nll,
            rmse: r.rmse,
            bic: r.bic,
            iterations: r.em_trace.iterations_used,
            converged: r.em_trace.converged,
            loglik_trace: r.em_trace.loglik_per_iter.clone(),
            usage: r.usage.clone(),
            weights: r.model.weights.clone(),
            frozen: r.em_trace.frozen.clone(),
        }
    }
}

/// Parses `"K=2,3,4;n=2,3;L=12,16"` into `(K, n, L)` triples, `K` slowest.
pub fn parse_grid(spec: &str) -> Result<Vec<(usize, usize, usize)>> {
    let mut ks = None;
    let mut ns = None;
    let mut ls = None;
    for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| parse_err(format!("grid term {part:?} lacks '='")))?;
        let vals: Vec<usize> = vals
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("grid value {v:?} for {key} is not a positive integer")))
            })
            .collect::<Result<_>>()?;
        if vals.contains(&0) {
            return Err(parse_err(format!("grid values for {key} must be positive")));
        }
        let slot = match key.trim() {
            "K" => &mut ks,
            "n" => &mut ns,
            "L" => &mut ls,
            other => return Err(parse_err(format!("unknown grid key {other:?}; expected K, n or L"))),
        };
        if slot.replace(vals).is_some() {
            return Err(parse_err(format!("grid key {key} given twice")));
        }
    }
    let (ks, ns, ls) = match (ks, ns, ls) {
        (Some(k), Some(n), Some(l)) => (k, n, l),
        _ => return Err(parse_err("grid needs K, n and L")),
    };
    let mut out = Vec::with_capacity(ks.len() * ns.len() * ls.len());
    for &k in &ks {
        for &n in &ns {
            for &l in &ls {
                out.push((k, n, l));
            }
        }
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> MoldsError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => MoldsError::Io(io),
        other => parse_err(format!("{other:?}")),
    }
}

fn write_rows(w: impl Write, header: Vec<String>, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(&header).map_err(csv_err)?;
    for r in rows {
        wtr.write_record(&r).map_err(csv_err)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Columns `K,n,L,nll,rmse,bic,iterations,status`.
pub fn write_grid_csv(w: impl Write, rows: &[GridRow]) -> Result<()> {
    let header = ["K", "n", "L", "nll", "rmse", "bic", "iterations", "status"]
        .map(String::from)
        .to_vec();
    write_rows(
        w,
        header,
        rows.iter().map(|r| {
            vec![
                r.k.to_string(),
                r.n.to_string(),
                r.lag.to_string(),
                r.nll.to_string(),
                r.rmse.to_string(),
                r.bic.to_string(),
                r.iterations.to_string(),
                r.status.clone(),
            ]
        }),
    )
}

/// One row per benchmark record, in the order given.
pub fn write_bench_csv(w: impl Write, records: &[BenchRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_bench_csv(reader: impl std::io::Read) -> Result<Vec<BenchRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)
}

/// Columns `trial_id,r_1..r_K,hard_label` with 1-based labels.
pub fn write_assignments_csv(w: impl Write, report: &AssignmentReport) -> Result<()> {
    let k = report.responsibilities.ncols();
    let mut header = vec!["trial_id".to_string()];
    header.extend((1..=k).map(|j| format!("r_{j}")));
    header.push("hard_label".to_string());
    write_rows(
        w,
        header,
        report.trial_ids.iter().enumerate().map(|(i, id)| {
            let mut row = vec![id.clone()];
            row.extend((0..k).map(|j| report.responsibilities[(i, j)].to_string()));
            row.push((report.hard_labels[i] + 1).to_string());
            row
        }),
    )
}

/// Columns `trial_id,label` with 1-based labels.
pub fn write_labels_csv(w: impl Write, trajs: &[Trajectory], labels: &[usize]) -> Result<()> {
    if trajs.len() != labels.len() {
        return Err(MoldsError::dim("labels", trajs.len(), labels.len()));
    }
    write_rows(
        w,
        vec!["trial_id".into(), "label".into()],
        trajs
            .iter()
            .zip(labels)
            .map(|(t, l)| vec![t.trial_id.clone(), (l + 1).to_string()]),
    )
}

pub fn create_file(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Reads a whole CSV file into a header and string rows.
pub fn read_csv_file(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = rdr.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = rdr
        .records()
        .map(|r| r.map(|rec| rec.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok((header, rows))
}
