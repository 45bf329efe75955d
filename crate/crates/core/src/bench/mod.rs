//! End-to-end corruption benchmark: data generation, training, basis
//! fitting, per-cell evaluation, and the rank / step ablations.

pub mod config;
pub mod corrupt;
pub mod dataset;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{BenchConfig, Method, PcaConfig};
pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec};
pub use dataset::{gen_dataset, Dataset, DatasetSpec, Generator};

use crate::adapt::{self, split_batches, AdaptConfig, Batch, Protocol, RunRecord};
use crate::error::{Error, Result};
use crate::filter::SpectralFilter;
use crate::network::{fit_pca_from_source, train, BnMode, MapShape, Model};
use crate::par;
use crate::pca::PcaBasis;
use crate::tensor::Tensor4;

pub const TABLE_SCHEMA_VERSION: u32 = 1;

/// Trained model, fitted basis and held-out data for one replicate.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub replicate: u64,
    pub model: Model,
    pub basis: PcaBasis,
    pub insertion_index: usize,
    pub test: Dataset,
    pub train_report: Option<train::TrainReport>,
    pub clean_accuracy: f64,
}

/// Source activations are streamed through the network in chunks of this many samples.
const SOURCE_CHUNK: usize = 250;

fn source_chunks(train: &Dataset) -> Vec<Tensor4> {
    let n = train.len();
    (0..n).step_by(SOURCE_CHUNK).map(|s| train.images.slice(s, (s + SOURCE_CHUNK).min(n))).collect()
}

/// Fits the basis for `model` on the replicate's training split.
pub fn fit_basis(model: &Model, train: &Dataset, pca: &PcaConfig) -> Result<(PcaBasis, usize)> {
    let j = pca.insertion_index.unwrap_or_else(|| model.default_insertion_index());
    let p = model
        .shapes()?
        .get(j)
        .map(MapShape::features)
        .ok_or_else(|| Error::Config(format!("pca.insertion_index {j} is beyond the model")))?;
    let rank = pca.rank.min(p).min(train.len());
    Ok((fit_pca_from_source(model, &source_chunks(train), j, rank, pca.streamed)?, j))
}

/// Generates data, trains the reference model and fits the basis. With
/// `checkpoint` the given model (and optionally basis) replace training/fitting.
pub fn prepare(cfg: &BenchConfig, replicate: u64, checkpoint: Option<(Model, Option<PcaBasis>)>) -> Result<Prepared> {
    let spec = cfg.dataset_for(replicate);
    let (train_set, test) = gen_dataset(&spec)?;
    let (model, given_basis, train_report) = match checkpoint {
        Some((m, _)) if m.spectral_index().is_some() => {
            return Err(Error::Config("checkpoint already contains an adaptation layer".into()))
        }
        Some((m, basis)) => (m, basis, None),
        None => {
            let tc = cfg.train_for(replicate);
            let input = MapShape::new(dataset::CHANNELS, dataset::SIDE, dataset::SIDE);
            let mut m = Model::reference(input, spec.n_classes, tc.seed)?;
            let report = train::train(&mut m, &train_set.images, &train_set.labels, &tc)?;
            (m, None, Some(report))
        }
    };
    let (basis, insertion_index) = match given_basis {
        Some(b) => (b, cfg.pca.insertion_index.unwrap_or_else(|| model.default_insertion_index())),
        None => fit_basis(&model, &train_set, &cfg.pca)?,
    };
    let clean_accuracy = train::accuracy(&model, &test.images, &test.labels, 256)?;
    Ok(Prepared {
        replicate,
        model,
        basis,
        insertion_index,
        test,
        train_report,
        clean_accuracy,
    })
}

/// One evaluated (method, corruption, severity) cell; severity 0 is clean data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub replicate: u64,
    pub method: Method,
    pub corruption: Option<CorruptionKind>,
    pub severity: u8,
    pub rank: usize,
    pub record: RunRecord,
}

impl CellResult {
    pub fn error(&self) -> f64 {
        self.record.error()
    }
}

/// The test stream for a cell, shuffled by the adaptation seed and split into batches.
fn test_stream(test: &Dataset, corrupted: Option<&Tensor4>, cfg: &AdaptConfig, replicate: u64) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..test.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(replicate)));
    let images = corrupted.unwrap_or(&test.images).select(&order);
    let labels: Vec<usize> = order.iter().map(|&i| test.labels[i]).collect();
    split_batches(&images, &labels, cfg.batch_size)
}

/// Model with the adaptation layer for `method`, or the plain model.
pub fn model_for(prep: &Prepared, method: Method, basis: &PcaBasis, gamma_init: f64, bn_mode: BnMode) -> Result<Model> {
    match method.filter_kind() {
        Some(kind) => {
            let filter = SpectralFilter::for_basis(kind, basis, gamma_init)?;
            let mut m = prep.model.insert_ttawpca(prep.insertion_index, basis.clone(), filter)?;
            m.set_bn_mode(bn_mode);
            Ok(m)
        }
        None => Ok(prep.model.clone()),
    }
}

pub fn run_method(model: &Model, method: Method, batches: &[Batch], cfg: &AdaptConfig) -> Result<RunRecord> {
    match method {
        Method::NoAdapt => adapt::baseline_no_adapt(model, batches),
        Method::BnStats => adapt::baseline_bn_stats(model, batches),
        Method::Tent => adapt::baseline_tent(model, batches, cfg),
        Method::TtawpcaRelu | Method::TtawpcaExp => adapt::adapt(model, batches, cfg),
    }
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    method: Method,
    corruption: Option<CorruptionKind>,
    severity: u8,
}

/// Evaluates `methods` on every requested (corruption, severity) with the
/// given basis and adaptation settings. Cells run in parallel; results come
/// back in cell order.
pub fn evaluate(
    prep: &Prepared,
    basis: &PcaBasis,
    cfg: &BenchConfig,
    adapt_cfg: &AdaptConfig,
    methods: &[Method],
    severities: &[u8],
) -> Result<Vec<CellResult>> {
    adapt_cfg.validate()?;
    let corruption_seed = cfg.corruption_seed.wrapping_add(prep.replicate);
    let mut pairs: Vec<(Option<CorruptionKind>, u8)> = Vec::new();
    for &sev in severities {
        if sev == 0 {
            pairs.push((None, 0));
        } else {
            pairs.extend(cfg.corruptions.iter().map(|&k| (Some(k), sev)));
        }
    }
    let corrupted: Vec<Option<Tensor4>> = par::map_slice(&pairs, |&(kind, severity)| {
        kind.map(|kind| corrupt(&prep.test.images, &CorruptionSpec { kind, severity, seed: corruption_seed }))
            .transpose()
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let streams: Vec<Vec<Batch>> = corrupted
        .iter()
        .map(|c| test_stream(&prep.test, c.as_ref(), adapt_cfg, prep.replicate))
        .collect::<Result<_>>()?;
    let models: Vec<Model> = methods
        .iter()
        .map(|&m| model_for(prep, m, basis, adapt_cfg.gamma_init, cfg.ttawpca_bn_mode))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..methods.len()).flat_map(|m| (0..pairs.len()).map(move |p| (m, p))).collect();
    let results = par::map_slice(&cells, |&(mi, pi)| -> Result<CellResult> {
        let cell = Cell {
            method: methods[mi],
            corruption: pairs[pi].0,
            severity: pairs[pi].1,
        };
        let record = run_method(&models[mi], cell.method, &streams[pi], adapt_cfg)?;
        Ok(CellResult {
            replicate: prep.replicate,
            method: cell.method,
            corruption: cell.corruption,
            severity: cell.severity,
            rank: basis.rank(),
            record,
        })
    });
    results.into_iter().collect()
}

/// Classification errors `[method × severity × corruption]` plus per-row means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub schema_version: u32,
    pub methods: Vec<Method>,
    pub severities: Vec<u8>,
    pub corruptions: Vec<CorruptionKind>,
    /// Row-major over (method, severity); each row has one entry per corruption.
    pub errors: Vec<Vec<f64>>,
}

impl ErrorTable {
    pub fn from_cells(cells: &[CellResult], methods: &[Method], severities: &[u8], corruptions: &[CorruptionKind]) -> Result<Self> {
        let mut errors = Vec::with_capacity(methods.len() * severities.len());
        for &m in methods {
            for &s in severities {
                let row = corruptions
                    .iter()
                    .map(|&k| {
                        cells
                            .iter()
                            .find(|c| c.method == m && c.severity == s && (s == 0 || c.corruption == Some(k)))
                            .map(CellResult::error)
                            .ok_or_else(|| Error::InvalidArgument(format!("missing cell {}/{}/{s}", m.name(), k.name())))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                errors.push(row);
            }
        }
        Ok(Self {
            schema_version: TABLE_SCHEMA_VERSION,
            methods: methods.to_vec(),
            severities: severities.to_vec(),
            corruptions: corruptions.to_vec(),
            errors,
        })
    }

    fn row_index(&self, method: Method, severity: u8) -> Option<usize> {
        let m = self.methods.iter().position(|x| *x == method)?;
        let s = self.severities.iter().position(|x| *x == severity)?;
        Some(m * self.severities.len() + s)
    }

    pub fn get(&self, method: Method, corruption: CorruptionKind, severity: u8) -> Option<f64> {
        let c = self.corruptions.iter().position(|x| *x == corruption)?;
        Some(self.errors[self.row_index(method, severity)?][c])
    }

    /// Mean over corruptions for one (method, severity) row.
    pub fn mean(&self, method: Method, severity: u8) -> Option<f64> {
        let row = &self.errors[self.row_index(method, severity)?];
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }

    /// Entry-wise arithmetic mean of tables with identical layout.
    pub fn average(tables: &[ErrorTable]) -> Result<Self> {
        let first = tables.first().ok_or_else(|| Error::InvalidArgument("no tables to average".into()))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            if (&t.methods, &t.severities, &t.corruptions) != (&first.methods, &first.severities, &first.corruptions) {
                return Err(Error::InvalidArgument("tables differ in layout".into()));
            }
        }
        for (r, row) in out.errors.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = tables.iter().map(|t| t.errors[r][c]).sum::<f64>() / tables.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["method".to_string(), "severity".to_string()];
        header.extend(self.corruptions.iter().map(|k| k.name().to_string()));
        header.push("mean".into());
        w.write_record(&header)?;
        for &m in &self.methods {
            for &s in &self.severities {
                let row = &self.errors[self.row_index(m, s).expect("own layout")];
                let mut rec = vec![m.name().to_string(), s.to_string()];
                rec.extend(row.iter().map(|v| format!("{v:.6}")));
                rec.push(format!("{:.6}", self.mean(m, s).expect("own layout")));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: u64,
    pub final_train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub clean_accuracy: f64,
    pub insertion_index: usize,
    pub basis_rank: usize,
    pub theta_hash: String,
    pub theta_hash_after: String,
    pub table: ErrorTable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub schema_version: u32,
    pub config: BenchConfig,
    pub table: ErrorTable,
    pub replicates: Vec<ReplicateSummary>,
    /// Every frozen-weight hash matched before and after every run.
    pub frozen_weights_intact: bool,
    #[serde(skip)]
    pub cells: Vec<CellResult>,
}

impl BenchOutcome {
    /// Writes `errors.csv`, `records.jsonl` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join("errors.csv");
        let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.table.write_csv(std::io::BufWriter::new(f))?;
        write_records(&self.cells, &dir.join("records.jsonl"))?;
        write_json(self, &dir.join("report.json"))
    }
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_records(cells: &[CellResult], path: &Path) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for c in cells {
        let ctx = serde_json::json!({
            "replicate": c.replicate,
            "corruption": c.corruption.map(CorruptionKind::name),
            "severity": c.severity,
            "rank": c.rank,
        });
        c.record.write_jsonl(&mut w, &ctx)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Full benchmark over every replicate in the config.
pub fn run_benchmark(cfg: &BenchConfig, checkpoint: Option<(Model, Option<PcaBasis>)>) -> Result<BenchOutcome> {
    cfg.validate()?;
    if checkpoint.is_some() && cfg.replicates.len() != 1 {
        return Err(Error::Config("a checkpoint can only be combined with exactly one replicate".into()));
    }
    let mut tables = Vec::new();
    let mut summaries = Vec::new();
    let mut all = Vec::new();
    let mut intact = true;
    for &r in &cfg.replicates {
        let prep = prepare(cfg, r, checkpoint.clone())?;
        let theta_hash = prep.model.theta_hash();
        let cells = evaluate(&prep, &prep.basis, cfg, &cfg.adapt, &cfg.methods, &cfg.severities)?;
        intact &= cells.iter().all(|c| c.record.frozen_intact());
        let table = ErrorTable::from_cells(&cells, &cfg.methods, &cfg.severities, &cfg.corruptions)?;
        let theta_hash_after = prep.model.theta_hash();
        intact &= theta_hash == theta_hash_after;
        summaries.push(ReplicateSummary {
            replicate: r,
            final_train_loss: prep.train_report.as_ref().and_then(|t| t.epoch_loss.last().copied()),
            train_accuracy: prep.train_report.as_ref().map(|t| t.train_accuracy),
            clean_accuracy: prep.clean_accuracy,
            insertion_index: prep.insertion_index,
            basis_rank: prep.basis.rank(),
            theta_hash,
            theta_hash_after,
            table: table.clone(),
        });
        tables.push(table);
        all.extend(cells);
    }
    Ok(BenchOutcome {
        schema_version: TABLE_SCHEMA_VERSION,
        config: cfg.clone(),
        table: ErrorTable::average(&tables)?,
        replicates: summaries,
        frozen_weights_intact: intact,
        cells: all,
    })
}

/// Ablation severity.
pub const ABLATION_SEVERITY: u8 = corrupt::MAX_SEVERITY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Rank or steps value at this point.
    pub x: usize,
    /// Rank actually retained (rank curve) or `x` (steps curve).
    pub effective: Vec<usize>,
    pub method: Method,
    /// Mean error over corruptions at the ablation severity, one per replicate.
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub schema_version: u32,
    pub variable: String,
    pub protocol: Protocol,
    pub severity: u8,
    pub replicates: Vec<u64>,
    pub points: Vec<CurvePoint>,
    #[serde(skip)]
    pub cells: Vec<CellResult>,
}

impl Curve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.variable.clone(), "method".into()];
        header.extend(self.replicates.iter().map(|r| format!("replicate_{r}")));
        header.push("mean".into());
        w.write_record(&header)?;
        for p in &self.points {
            let mut rec = vec![p.x.to_string(), p.method.name().to_string()];
            rec.extend(p.per_seed.iter().map(|v| format!("{v:.6}")));
            rec.push(format!("{:.6}", p.mean));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn point(&self, x: usize, method: Method) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.x == x && p.method == method)
    }

    /// Writes `<stem>.csv`, `<stem>.jsonl` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(format!("{stem}.csv"));
        let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        write_records(&self.cells, &dir.join(format!("{stem}.jsonl")))?;
        write_json(self, &dir.join(format!("{stem}.json")))
    }
}

fn severity_mean(cells: &[CellResult], method: Method, corruptions: &[CorruptionKind]) -> f64 {
    let errs: Vec<f64> = corruptions
        .iter()
        .filter_map(|&k| cells.iter().find(|c| c.method == method && c.corruption == Some(k)).map(CellResult::error))
        .collect();
    errs.iter().sum::<f64>() / errs.len().max(1) as f64
}

fn assemble(points: &mut Vec<CurvePoint>, x: usize, method: Method, values: Vec<(usize, f64)>) {
    let per_seed: Vec<f64> = values.iter().map(|v| v.1).collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
    points.push(CurvePoint {
        x,
        effective: values.iter().map(|v| v.0).collect(),
        method,
        per_seed,
        mean,
    });
}

/// Episodic error at the ablation severity against rank `L`, averaged over
/// replicates. Ranks 1 and `p` are always included.
pub fn ablate_rank(cfg: &BenchConfig, ranks: &[usize]) -> Result<Curve> {
    cfg.validate()?;
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.filter_kind().is_some()).collect();
    if methods.is_empty() {
        return Err(Error::Config("ablate-rank needs at least one ttawpca method".into()));
    }
    let adapt_cfg = AdaptConfig { protocol: Protocol::Episodic, ..cfg.adapt.clone() };
    let mut per_rep: Vec<Vec<(usize, Method, usize, f64)>> = Vec::new();
    let mut all_cells = Vec::new();
    let mut grid: Vec<usize> = Vec::new();
    for &r in &cfg.replicates {
        let mut full_cfg = cfg.clone();
        full_cfg.pca.rank = usize::MAX;
        let prep = prepare(&full_cfg, r, None)?;
        let p = prep.basis.features();
        let mut ranks: Vec<usize> = ranks.iter().copied().chain([1, p]).filter(|&l| l >= 1 && l <= p).collect();
        ranks.sort_unstable();
        ranks.dedup();
        if grid.is_empty() {
            grid = ranks.clone();
        } else if grid != ranks {
            return Err(Error::InvalidArgument("replicates disagree on feature width".into()));
        }
        let mut rows = Vec::new();
        for &l in &ranks {
            let basis = prep.basis.truncated(l.min(prep.basis.rank()))?;
            let cells = evaluate(&prep, &basis, cfg, &adapt_cfg, &methods, &[ABLATION_SEVERITY])?;
            for &m in &methods {
                rows.push((l, m, basis.rank(), severity_mean(&cells, m, &cfg.corruptions)));
            }
            all_cells.extend(cells);
        }
        per_rep.push(rows);
    }
    let mut points = Vec::new();
    for (i, &(l, m, _, _)) in per_rep[0].iter().enumerate() {
        assemble(&mut points, l, m, per_rep.iter().map(|rows| (rows[i].2, rows[i].3)).collect());
    }
    Ok(Curve {
        schema_version: TABLE_SCHEMA_VERSION,
        variable: "rank".into(),
        protocol: Protocol::Episodic,
        severity: ABLATION_SEVERITY,
        replicates: cfg.replicates.clone(),
        points,
        cells: all_cells,
    })
}

/// Online error at the ablation severity against steps per batch.
pub fn ablate_steps(cfg: &BenchConfig, steps: &[usize]) -> Result<Curve> {
    cfg.validate()?;
    if steps.is_empty() || steps[0] == 0 || steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("steps must be positive and strictly increasing, got {steps:?}")));
    }
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|m| m.adapts()).collect();
    if methods.is_empty() {
        return Err(Error::Config("ablate-steps needs at least one adaptive method".into()));
    }
    let mut per_rep: Vec<Vec<(usize, Method, f64)>> = Vec::new();
    let mut all_cells = Vec::new();
    for &r in &cfg.replicates {
        let prep = prepare(cfg, r, None)?;
        let mut rows = Vec::new();
        for &s in steps {
            let adapt_cfg = AdaptConfig { protocol: Protocol::Online, steps_per_batch: s, ..cfg.adapt.clone() };
            let cells = evaluate(&prep, &prep.basis, cfg, &adapt_cfg, &methods, &[ABLATION_SEVERITY])?;
            for &m in &methods {
                rows.push((s, m, severity_mean(&cells, m, &cfg.corruptions)));
            }
            all_cells.extend(cells);
        }
        per_rep.push(rows);
    }
    let mut points = Vec::new();
    for (i, &(s, m, _)) in per_rep[0].iter().enumerate() {
        assemble(&mut points, s, m, per_rep.iter().map(|rows| (s, rows[i].2)).collect());
    }
    Ok(Curve {
        schema_version: TABLE_SCHEMA_VERSION,
        variable: "steps".into(),
        protocol: Protocol::Online,
        severity: ABLATION_SEVERITY,
        replicates: cfg.replicates.clone(),
        points,
        cells: all_cells,
    })
}
