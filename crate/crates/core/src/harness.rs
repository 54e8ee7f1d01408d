//! End-to-end experiments: quantize one model under a grid of configurations
//! and outlier-selection methods, then score each variant on held-out text.
//!
//! Every run starts with an FP16 baseline row. Cells run in parallel, each on
//! its own [`QuantizedModel`]; a failing cell is recorded with its reason and
//! the others still complete. Apart from the `seconds` column the report is a
//! pure function of the inputs and the seed.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{GwqError, Result};
use crate::io::{encode_container, encode_gwq, read_container, GradientBundle, ModelBundle};
use crate::quant::{average_bits, clamp_count, quantize_model, QuantConfig, QuantOptions, QuantizeSet};
use crate::refmodel::{calibration_gradients, calibration_windows, model_tokenizer, LossKind, TinyTransformer};
use crate::sensitivity::{
    aggregate_gradients_with, hessian_diag_scores, random_mask, select_outliers, Aggregation,
    HessianSource, LayerActivations, OutlierMask, Scope, SensitivityScores,
};
use crate::tensor::{DType, Tensor};

/// How a cell picks its FP16 outliers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain round-to-nearest with no outliers.
    Rtn,
    /// `|mean g|` over the calibration samples.
    Gradient,
    /// `mean |g|`, the aggregation ablation.
    GradientMeanAbs,
    /// Diagonal Fisher, `mean g^2`.
    HessianFisher,
    /// Second moment of each layer's input column.
    HessianInputSq,
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Rtn,
        Method::Gradient,
        Method::GradientMeanAbs,
        Method::HessianFisher,
        Method::HessianInputSq,
        Method::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rtn => "rtn",
            Method::Gradient => "gradient",
            Method::GradientMeanAbs => "gradient-mean-abs",
            Method::HessianFisher => "hessian-fisher",
            Method::HessianInputSq => "hessian-input-sq",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.as_str()).collect();
                GwqError::Config(format!("unknown method `{s}` (expected one of {})", names.join(", ")))
            })
    }

    fn needs_gradients(self) -> bool {
        matches!(self, Method::Gradient | Method::GradientMeanAbs | Method::HessianFisher)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One configuration to quantize and evaluate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub fraction: f64,
    pub bits: u8,
    /// Columns per group; 0 is one group per channel.
    pub group: u16,
    pub scope: Scope,
    /// Mask seed for random selection; the experiment seed when `None`.
    pub seed: Option<u64>,
}

impl Cell {
    pub fn new(method: Method, fraction: f64, bits: u8, group: u16) -> Self {
        Cell {
            method,
            fraction,
            bits,
            group,
            scope: Scope::PerLayer,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_scope(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    /// Grouping label shown in text reports, e.g. `g16` or `per-channel`.
    pub fn grouping(&self) -> String {
        grouping_label(self.group)
    }
}

fn grouping_label(group: u16) -> String {
    if group == 0 {
        "per-channel".to_string()
    } else {
        format!("g{group}")
    }
}

/// Files and cells of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub model: PathBuf,
    pub calibration: PathBuf,
    /// Number of leading `max_seq_len` windows of the calibration corpus.
    pub samples: usize,
    pub eval: Vec<PathBuf>,
    pub cells: Vec<Cell>,
    pub seed: u64,
    pub loss: LossKind,
    pub options: QuantOptions,
}

impl ExperimentSpec {
    pub fn new(model: impl Into<PathBuf>, calibration: impl Into<PathBuf>, eval: Vec<PathBuf>) -> Self {
        ExperimentSpec {
            model: model.into(),
            calibration: calibration.into(),
            samples: 1,
            eval,
            cells: Vec::new(),
            seed: 0,
            loss: LossKind::default(),
            options: QuantOptions::default(),
        }
    }
}

/// An experiment with every input already in memory.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub weights: ModelBundle,
    pub calibration: Vec<u32>,
    pub samples: usize,
    /// `(name, tokens)` per evaluation corpus, in report column order.
    pub corpora: Vec<(String, Vec<u32>)>,
    pub cells: Vec<Cell>,
    pub seed: u64,
    pub loss: LossKind,
    pub options: QuantOptions,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| GwqError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// File stem used as the corpus name in report columns.
pub fn corpus_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

impl Experiment {
    /// Read the model and tokenize every corpus with the model's tokenizer.
    pub fn load(spec: &ExperimentSpec) -> Result<Experiment> {
        let weights = read_container(&spec.model)?;
        let model = TinyTransformer::<f32>::from_bundle(&weights)?;
        let tokenizer = model_tokenizer(&weights)?;
        let vocab = model.config.vocab_size;
        let calibration = tokenizer.encode(&read_text(&spec.calibration)?, vocab)?;
        let corpora = spec
            .eval
            .iter()
            .map(|p| Ok((corpus_name(p), tokenizer.encode(&read_text(p)?, vocab)?)))
            .collect::<Result<_>>()?;
        Ok(Experiment {
            weights,
            calibration,
            samples: spec.samples,
            corpora,
            cells: spec.cells.clone(),
            seed: spec.seed,
            loss: spec.loss,
            options: spec.options.clone(),
        })
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(GwqError::Config("sample count must be at least 1".into()));
        }
        if self.corpora.is_empty() {
            return Err(GwqError::Config("no evaluation corpus given".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for (name, _) in &self.corpora {
            if !seen.insert(name) {
                return Err(GwqError::Config(format!("corpus name `{name}` appears twice")));
            }
        }
        Ok(())
    }

    /// The tensors that get quantized.
    pub fn quantized_weights(&self) -> ModelBundle {
        subset(&self.weights, &self.options.quantize_set)
    }
}

fn subset(weights: &ModelBundle, set: &QuantizeSet) -> ModelBundle {
    let mut out = ModelBundle::new();
    for t in weights.tensors.values().filter(|t| set.contains(t)) {
        out.insert(t.clone());
    }
    out
}

/// Metrics of one completed row.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    /// Perplexity per corpus, in corpus order.
    pub ppl: Vec<f64>,
    pub acc: Vec<f64>,
    pub avg_bits: f64,
    /// Share of quantized non-outlier weights whose code hit the grid edge;
    /// unknown without the original weights.
    pub clamp_rate: Option<f64>,
    pub file_bytes: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    /// 0 for the baseline, then 1.. in cell order.
    pub id: usize,
    /// `fp16` for the baseline, otherwise the selection method.
    pub method: String,
    pub fraction: f64,
    pub bits: u8,
    pub group: u16,
    pub outcome: std::result::Result<CellMetrics, String>,
}

impl CellResult {
    pub fn metrics(&self) -> Option<&CellMetrics> {
        self.outcome.as_ref().ok()
    }
}

/// Rows of an experiment; `rows[0]` is the FP16 baseline when present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub corpora: Vec<String>,
    pub rows: Vec<CellResult>,
    pub seed: u64,
    pub samples: usize,
    /// Free-form context lines printed under the text table.
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn baseline(&self) -> Option<&CellResult> {
        self.rows.first().filter(|r| r.id == 0)
    }

    pub fn cells(&self) -> &[CellResult] {
        match self.baseline() {
            Some(_) => &self.rows[1..],
            None => &self.rows,
        }
    }

    /// Perplexity of row `id` on the first corpus.
    pub fn ppl(&self, id: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.id == id)?.metrics()?.ppl.first().copied()
    }

    /// Set every wall-time field to zero, for comparisons between runs.
    pub fn without_timings(mut self) -> Self {
        for r in &mut self.rows {
            if let Ok(m) = &mut r.outcome {
                m.seconds = 0.0;
            }
        }
        self
    }
}

/// Load the inputs named by `spec` and run every cell.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport> {
    run(&Experiment::load(spec)?)
}

/// Run an in-memory experiment. Errors only when the baseline cannot be
/// evaluated; cell failures are recorded in their rows.
pub fn run(exp: &Experiment) -> Result<EvalReport> {
    exp.validate()?;
    let model = TinyTransformer::<f32>::from_bundle(&exp.weights)?;
    model.config.check_gwq_ready()?;
    let baseline = baseline_row(exp)?;

    let scores = ScoreCache::build(exp, &model);
    let cells: Vec<CellResult> = exp
        .cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let start = Instant::now();
            let outcome = run_cell(exp, cell, &scores)
                .map(|mut m| {
                    m.seconds = start.elapsed().as_secs_f64();
                    m
                })
                .map_err(|e| e.to_string());
            CellResult {
                id: i + 1,
                method: cell.method.to_string(),
                fraction: cell.fraction,
                bits: cell.bits,
                group: cell.group,
                outcome,
            }
        })
        .collect();

    let mut rows = vec![baseline];
    rows.extend(cells);
    Ok(EvalReport {
        corpora: exp.corpora.iter().map(|(n, _)| n.clone()).collect(),
        rows,
        seed: exp.seed,
        samples: exp.samples,
        notes: Vec::new(),
    })
}

fn evaluate_all(model: &TinyTransformer, corpora: &[(String, Vec<u32>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut ppl = Vec::with_capacity(corpora.len());
    let mut acc = Vec::with_capacity(corpora.len());
    for (_, tokens) in corpora {
        let stats = model.evaluate(tokens)?;
        ppl.push(stats.perplexity());
        acc.push(stats.accuracy());
    }
    Ok((ppl, acc))
}

/// The model with every tensor stored at FP16.
pub fn fp16_bundle(weights: &ModelBundle) -> Result<ModelBundle> {
    let mut out = ModelBundle::new();
    for t in weights.tensors.values() {
        out.insert(t.cast(DType::F16)?);
    }
    out.metadata = weights.metadata.clone();
    Ok(out)
}

fn baseline_row(exp: &Experiment) -> Result<CellResult> {
    let start = Instant::now();
    let half = fp16_bundle(&exp.weights)?;
    let model = TinyTransformer::<f32>::from_bundle(&half)?;
    let (ppl, acc) = evaluate_all(&model, &exp.corpora)?;
    let file_bytes = encode_container(&half)?.len() as u64;
    Ok(CellResult {
        id: 0,
        method: "fp16".into(),
        fraction: 0.0,
        bits: 16,
        group: 0,
        outcome: Ok(CellMetrics {
            ppl,
            acc,
            avg_bits: 16.0,
            clamp_rate: Some(0.0),
            file_bytes,
            seconds: start.elapsed().as_secs_f64(),
        }),
    })
}

/// Sensitivity scores per method, computed once and shared by every cell.
/// A failure is kept as its message so only the cells that need it fail.
struct ScoreCache {
    scores: IndexMap<Method, std::result::Result<SensitivityScores, String>>,
}

impl ScoreCache {
    fn build(exp: &Experiment, model: &TinyTransformer) -> ScoreCache {
        let mut wanted: Vec<Method> = exp
            .cells
            .iter()
            .filter(|c| c.fraction > 0.0)
            .map(|c| c.method)
            .filter(|m| !matches!(m, Method::Rtn | Method::Random))
            .collect();
        wanted.sort_by_key(|m| m.as_str());
        wanted.dedup();

        let grads = if wanted.iter().any(|m| m.needs_gradients()) {
            Some(calibration_gradients(model, &exp.calibration, exp.samples, exp.loss))
        } else {
            None
        };
        let weights = exp.quantized_weights();
        let mut scores = IndexMap::new();
        for m in wanted {
            let s = match m {
                Method::Gradient | Method::GradientMeanAbs | Method::HessianFisher => {
                    match grads.as_ref().expect("gradients captured") {
                        Ok(g) => gradient_scores(m, g, &weights),
                        Err(e) => Err(GwqError::Training(format!("gradient capture failed: {e}"))),
                    }
                }
                Method::HessianInputSq => {
                    calibration_activations(model, &exp.calibration, exp.samples).and_then(|acts| {
                        hessian_diag_scores(&weights, HessianSource::Activations(&acts))
                    })
                }
                Method::Rtn | Method::Random => unreachable!("filtered above"),
            };
            scores.insert(m, s.map_err(|e| e.to_string()));
        }
        ScoreCache { scores }
    }

    fn get(&self, m: Method) -> Result<&SensitivityScores> {
        match self.scores.get(&m) {
            Some(Ok(s)) => Ok(s),
            Some(Err(e)) => Err(GwqError::Invariant(format!("{m} scores unavailable: {e}"))),
            None => Err(GwqError::Invariant(format!("{m} scores were not computed"))),
        }
    }
}

fn gradient_scores(m: Method, grads: &[GradientBundle], weights: &ModelBundle) -> Result<SensitivityScores> {
    let keep = |n: &str| weights.get(n).is_some();
    match m {
        Method::Gradient => Ok(aggregate_gradients_with(grads, Aggregation::MeanThenAbs)?.restrict(keep)),
        Method::GradientMeanAbs => Ok(aggregate_gradients_with(grads, Aggregation::AbsThenMean)?.restrict(keep)),
        _ => hessian_diag_scores(weights, HessianSource::Gradients(grads)),
    }
}

/// Layer inputs over the calibration windows, stacked along positions.
pub fn calibration_activations(
    model: &TinyTransformer,
    tokens: &[u32],
    samples: usize,
) -> Result<LayerActivations> {
    let windows = calibration_windows(tokens.len(), model.config.max_seq_len, samples)?;
    let mut stacked: IndexMap<String, (usize, Vec<f32>)> = IndexMap::new();
    for (s, e) in windows {
        for (name, x) in model.capture_activations(&tokens[s..e])? {
            let (rows, cols) = x.matrix_dims()?;
            let entry = stacked.entry(name).or_insert((cols, Vec::new()));
            debug_assert_eq!(entry.0, cols);
            entry.1.extend_from_slice(&x.data()[..rows * cols]);
        }
    }
    stacked
        .into_iter()
        .map(|(name, (cols, data))| {
            let rows = data.len() / cols;
            Ok((name.clone(), Tensor::new(name, vec![rows, cols], data)?))
        })
        .collect()
}

/// Uniformly random mask over the projection weights of `weights`, with
/// exactly `ceil(fraction * numel)` entries per tensor.
pub fn random_baseline(weights: &ModelBundle, seed: u64, fraction: f64) -> Result<OutlierMask> {
    random_baseline_with(weights, &QuantizeSet::default(), Scope::PerLayer, seed, fraction)
}

pub fn random_baseline_with(
    weights: &ModelBundle,
    set: &QuantizeSet,
    scope: Scope,
    seed: u64,
    fraction: f64,
) -> Result<OutlierMask> {
    let shapes: IndexMap<String, Vec<usize>> = weights
        .tensors
        .values()
        .filter(|t| set.contains(t))
        .map(|t| (t.name().to_string(), t.dims().to_vec()))
        .collect();
    random_mask(&shapes, fraction, scope, seed)
}

fn cell_mask(exp: &Experiment, cell: &Cell, scores: &ScoreCache) -> Result<Option<OutlierMask>> {
    if cell.method == Method::Rtn {
        if cell.fraction != 0.0 {
            return Err(GwqError::Config(format!(
                "rtn keeps no outliers; fraction must be 0, got {}",
                cell.fraction
            )));
        }
        return Ok(None);
    }
    if cell.fraction == 0.0 {
        return Ok(None);
    }
    if !(cell.fraction > 0.0 && cell.fraction <= 1.0) {
        return Err(GwqError::Config(format!("fraction {} outside [0, 1]", cell.fraction)));
    }
    let mask = match cell.method {
        Method::Random => random_baseline_with(
            &exp.weights,
            &exp.options.quantize_set,
            cell.scope,
            cell.seed.unwrap_or(exp.seed),
            cell.fraction,
        )?,
        m => select_outliers(scores.get(m)?, cell.fraction, cell.scope)?,
    };
    Ok(Some(mask))
}

fn run_cell(exp: &Experiment, cell: &Cell, scores: &ScoreCache) -> Result<CellMetrics> {
    let cfg = QuantConfig::new(cell.bits, cell.group, cell.fraction as f32)?.with_scope(cell.scope);
    let mask = cell_mask(exp, cell, scores)?;
    let qm = quantize_model(&exp.weights, mask.as_ref(), &cfg, &exp.options)?;

    let mut clamped = 0usize;
    let mut eligible = 0usize;
    for (name, qt) in &qm.quantized {
        clamped += clamp_count(qt, exp.weights.require(name)?)?;
        eligible += qt.numel() - qt.outlier_count();
    }
    let (bytes, _) = encode_gwq(&qm)?;
    let model = TinyTransformer::<f32>::from_quantized(&qm)?;
    let (ppl, acc) = evaluate_all(&model, &exp.corpora)?;
    Ok(CellMetrics {
        ppl,
        acc,
        avg_bits: average_bits(&qm).average(),
        clamp_rate: Some(if eligible == 0 { 0.0 } else { clamped as f64 / eligible as f64 }),
        file_bytes: bytes.len() as u64,
        seconds: 0.0,
    })
}

/// Mean perplexity of gradient selection against random masks at the same
/// bit width and fraction, on the first corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionComparison {
    pub bits: u8,
    pub group: u16,
    pub fraction: f64,
    pub gradient_ppl: f64,
    /// `(seed, ppl)` for every random mask.
    pub random_ppl: Vec<(u64, f64)>,
}

impl SelectionComparison {
    pub fn random_mean(&self) -> f64 {
        self.random_ppl.iter().map(|(_, p)| p).sum::<f64>() / self.random_ppl.len() as f64
    }

    /// `mean(random) - gradient`; positive when gradient selection wins.
    pub fn margin(&self) -> f64 {
        self.random_mean() - self.gradient_ppl
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.random_ppl.iter().map(|&(s, _)| s).collect()
    }
}

impl fmt::Display for SelectionComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "bits={} group={} fraction={} gradient_ppl={:.6} random_mean_ppl={:.6} margin={:.6}",
            self.bits,
            self.group,
            self.fraction,
            self.gradient_ppl,
            self.random_mean(),
            self.margin()
        )?;
        let seeds: Vec<String> = self.seeds().iter().map(u64::to_string).collect();
        write!(f, "random_seeds={}", seeds.join(","))
    }
}

/// Run one gradient cell and one random cell per seed.
pub fn compare_selection(
    exp: &Experiment,
    bits: u8,
    group: u16,
    fraction: f64,
    seeds: &[u64],
) -> Result<SelectionComparison> {
    let mut run_exp = exp.clone();
    run_exp.cells = std::iter::once(Cell::new(Method::Gradient, fraction, bits, group))
        .chain(seeds.iter().map(|&s| Cell::new(Method::Random, fraction, bits, group).with_seed(s)))
        .collect();
    let report = run(&run_exp)?;
    let ppl_of = |row: &CellResult| -> Result<f64> {
        match &row.outcome {
            Ok(m) => Ok(m.ppl[0]),
            Err(e) => Err(GwqError::Invariant(format!("cell {} failed: {e}", row.id))),
        }
    };
    let cells = report.cells();
    Ok(SelectionComparison {
        bits,
        group,
        fraction,
        gradient_ppl: ppl_of(&cells[0])?,
        random_ppl: seeds
            .iter()
            .zip(&cells[1..])
            .map(|(&s, row)| Ok((s, ppl_of(row)?)))
            .collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Text,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<ReportFormat> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(GwqError::Config(format!("unknown format `{other}` (expected text or csv)"))),
        }
    }
}

/// CSV header for the given corpus names.
pub fn csv_header(corpora: &[String]) -> Vec<String> {
    let mut h: Vec<String> = ["cell_id", "method", "fraction", "bits", "group", "avg_bits"]
        .map(String::from)
        .to_vec();
    for c in corpora {
        h.push(format!("ppl_{c}"));
        h.push(format!("acc_{c}"));
    }
    h.extend(["clamp_rate", "file_bytes", "seconds"].map(String::from));
    h
}

/// Serialize a report. Column order is fixed; failed cells keep their
/// configuration columns and leave the metric columns empty in CSV.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Text => render_text(report).into_bytes(),
    }
}

fn render_csv(report: &EvalReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = "writing CSV to memory cannot fail";
    w.write_record(csv_header(&report.corpora)).expect(io);
    for r in &report.rows {
        let mut rec = vec![
            r.id.to_string(),
            r.method.clone(),
            r.fraction.to_string(),
            r.bits.to_string(),
            r.group.to_string(),
        ];
        match &r.outcome {
            Ok(m) => {
                rec.push(m.avg_bits.to_string());
                for (p, a) in m.ppl.iter().zip(&m.acc) {
                    rec.push(p.to_string());
                    rec.push(a.to_string());
                }
                rec.push(m.clamp_rate.map(|c| c.to_string()).unwrap_or_default());
                rec.push(m.file_bytes.to_string());
                rec.push(format!("{:.3}", m.seconds));
            }
            Err(_) => rec.extend(std::iter::repeat_n(String::new(), 4 + 2 * report.corpora.len())),
        }
        w.write_record(&rec).expect(io);
    }
    w.into_inner().expect(io)
}

fn render_text(report: &EvalReport) -> String {
    let mut header = vec![
        "id".to_string(),
        "method".into(),
        "grouping".into(),
        "fraction".into(),
        "bits".into(),
        "avg_bits".into(),
    ];
    for c in &report.corpora {
        header.push(format!("ppl_{c}"));
        header.push(format!("acc_{c}"));
    }
    header.extend(["clamp_rate".into(), "file_bytes".into(), "seconds".into()]);

    let mut table: Vec<Vec<String>> = vec![header];
    let mut failures = Vec::new();
    for r in &report.rows {
        let grouping = if r.id == 0 { "-".to_string() } else { grouping_label(r.group) };
        let mut row = vec![
            r.id.to_string(),
            r.method.clone(),
            grouping,
            r.fraction.to_string(),
            r.bits.to_string(),
        ];
        match &r.outcome {
            Ok(m) => {
                row.push(format!("{:.4}", m.avg_bits));
                for (p, a) in m.ppl.iter().zip(&m.acc) {
                    row.push(format!("{p:.4}"));
                    row.push(format!("{a:.4}"));
                }
                row.push(m.clamp_rate.map_or("-".to_string(), |c| format!("{c:.5}")));
                row.push(m.file_bytes.to_string());
                row.push(format!("{:.2}", m.seconds));
            }
            Err(e) => {
                row.push("FAILED".into());
                row.extend(std::iter::repeat_n("-".to_string(), 3 + 2 * report.corpora.len()));
                failures.push(format!("cell {} failed: {e}", r.id));
            }
        }
        table.push(row);
    }

    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (v, &w))| if i < 3 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    if !report.rows.is_empty() {
        let _ = writeln!(out, "seed={} calibration_samples={}", report.seed, report.samples);
    }
    for line in failures.iter().chain(&report.notes) {
        let _ = writeln!(out, "{line}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refmodel::{train_reference, TinyTransformerConfig};

    fn toy_experiment(cells: Vec<Cell>) -> Experiment {
        let cfg = TinyTransformerConfig::new(256, 16, 2, 1, 16);
        let text = b"a small corpus for a small model, repeated a few times. ".repeat(8);
        let tokens: Vec<u32> = text.iter().map(|&b| b as u32).collect();
        let weights = train_reference(&cfg, &tokens, 20, 3).unwrap();
        Experiment {
            weights,
            calibration: tokens.clone(),
            samples: 1,
            corpora: vec![("toy".into(), tokens[..200].to_vec())],
            cells,
            seed: 5,
            loss: LossKind::default(),
            options: QuantOptions::default(),
        }
    }

    #[test]
    fn zero_cells_yield_only_the_baseline() {
        let report = run(&toy_experiment(vec![])).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].method, "fp16");
        let csv = String::from_utf8(render_report(&report, ReportFormat::Csv)).unwrap();
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn empty_report_renders_header_only() {
        let report = EvalReport {
            corpora: vec!["valid".into()],
            ..Default::default()
        };
        let csv = String::from_utf8(render_report(&report, ReportFormat::Csv)).unwrap();
        assert_eq!(
            csv,
            "cell_id,method,fraction,bits,group,avg_bits,ppl_valid,acc_valid,clamp_rate,file_bytes,seconds\n"
        );
        let text = String::from_utf8(render_report(&report, ReportFormat::Text)).unwrap();
        assert_eq!(text.lines().count(), 1);
    }

    #[test]
    fn failures_are_isolated_and_runs_repeat() {
        let cells = vec![
            Cell::new(Method::Gradient, 0.01, 4, 16),
            Cell::new(Method::Gradient, 0.01, 7, 16),
            Cell::new(Method::Rtn, 0.0, 4, 0),
            Cell::new(Method::Random, 0.01, 3, 16).with_seed(1),
            Cell::new(Method::HessianInputSq, 0.01, 4, 16),
            Cell::new(Method::HessianFisher, 0.01, 4, 16),
        ];
        let exp = toy_experiment(cells);
        let a = run(&exp).unwrap().without_timings();
        let b = run(&exp).unwrap().without_timings();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 7);
        assert!(a.rows[2].outcome.as_ref().unwrap_err().contains("bit width"));
        for r in a.rows.iter().filter(|r| r.id != 2) {
            assert!(r.outcome.is_ok(), "row {} failed: {:?}", r.id, r.outcome);
        }
        let csv = render_report(&a, ReportFormat::Csv);
        let mut rd = csv::Reader::from_reader(csv.as_slice());
        let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 7);
        assert_eq!(&rows[2][5], "");
        let ppl: f64 = rows[1][6].parse().unwrap();
        assert_eq!(ppl, a.rows[1].metrics().unwrap().ppl[0]);
        let text = String::from_utf8(render_report(&a, ReportFormat::Text)).unwrap();
        assert!(text.contains("per-channel") && text.contains("cell 2 failed"));
    }

    #[test]
    fn all_outliers_match_the_fp16_baseline() {
        let report = run(&toy_experiment(vec![Cell::new(Method::Gradient, 1.0, 4, 16)])).unwrap();
        assert_eq!(report.ppl(1), report.ppl(0));
    }

    #[test]
    fn random_baseline_has_exact_cardinality() {
        let exp = toy_experiment(vec![]);
        let all = random_baseline(&exp.weights, 0, 1.0).unwrap();
        assert!(all.masks.values().all(|m| m.flags.iter().all(|&f| f)));
        let a = random_baseline(&exp.weights, 9, 0.05).unwrap();
        assert_eq!(a, random_baseline(&exp.weights, 9, 0.05).unwrap());
        for m in a.masks.values() {
            assert_eq!(m.count(), (0.05 * m.flags.len() as f64).ceil() as usize);
        }
        assert!(random_baseline(&exp.weights, 0, 0.0).is_err());
    }

    #[test]
    fn random_selection_rate_is_binomial() {
        // Each position is selected with probability p per draw; over many
        // seeds the empirical rate at a fixed position stays within 3 sigma.
        let exp = toy_experiment(vec![]);
        let (p, seeds) = (0.1, 400u64);
        let name = "layers.0.attn.wq";
        let mut hits = vec![0usize; 256];
        for s in 0..seeds {
            let m = random_baseline(&exp.weights, s, p).unwrap();
            for (h, &f) in hits.iter_mut().zip(&m.masks[name].flags) {
                *h += f as usize;
            }
        }
        let exact = (p * 256.0).ceil() / 256.0;
        let sigma = (exact * (1.0 - exact) / seeds as f64).sqrt();
        let outside = hits
            .iter()
            .filter(|&&h| (h as f64 / seeds as f64 - exact).abs() > 3.0 * sigma)
            .count();
        // 3 sigma is exceeded by ~0.3% of positions by chance.
        assert!(outside <= 5, "{outside} positions outside 3 sigma");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.as_str()).unwrap(), m);
        }
        assert!(Method::parse("hessian").is_err());
    }
}
