//! The `gwq` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 invariant
//! violation. Failures print one line, `error: <category>: <detail>`, to
//! stderr and write no output files.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{ErrorCategory, GwqError, Result};
use crate::harness::{
    calibration_activations, corpus_name, random_baseline_with, render_report, run_experiment, Cell,
    CellMetrics, CellResult, EvalReport, ExperimentSpec, Method, ReportFormat,
};
use crate::io::{
    atomic_write, decode_container, decode_gwq, read_container, read_gradients, write_container,
    write_gradients, write_gwq, GradientBundle, ModelBundle,
};
use crate::kernels::{bench, BenchOptions, BenchReport};
use crate::quant::{
    average_bits, inspect, quantize_model, QuantConfig, QuantOptions, QuantizeSet, QuantizedModel,
    ScaleMode, StatsMode,
};
use crate::refmodel::{
    calibration_gradients, model_tokenizer, train_with, LabelSource, LossKind, LossVariant, Tokenizer,
    TinyTransformer, TinyTransformerConfig, TrainOptions,
};
use crate::sensitivity::{
    aggregate_gradients_with, hessian_diag_scores, mean_gradients, select_outliers, write_masks,
    Aggregation, HessianSource, OutlierMask, Scope,
};
use crate::tensor::DType;

#[derive(Debug, Parser)]
#[command(name = "gwq", version, about = "Gradient-aware weight quantization toolkit")]
pub struct Cli {
    /// Worker threads for parallel stages (falls back to GWQ_THREADS).
    #[arg(long, global = true, env = "GWQ_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference decoder on a text corpus.
    TrainRef(TrainRefArgs),
    /// Capture calibration gradients for a model.
    Grads(GradsArgs),
    /// Quantize a model into a GWQ file.
    Quantize(QuantizeArgs),
    /// Expand a GWQ file back into a dense tensor container.
    Dequantize(DequantizeArgs),
    /// Perplexity and next-token accuracy, or a full experiment grid.
    Eval(EvalArgs),
    /// Time the quantized matrix-vector kernel against the dense one.
    Bench(BenchArgs),
    /// Describe a GWQ file or tensor container.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TokenizerArg {
    Byte,
    Whitespace,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossArg {
    Ce,
    Mse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelsArg {
    Dataset,
    Greedy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    PerLayer,
    Global,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Scope {
        match s {
            ScopeArg::PerLayer => Scope::PerLayer,
            ScopeArg::Global => Scope::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Gradient,
    GradientMeanAbs,
    HessianFisher,
    HessianInputSq,
    Random,
    Rtn,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Gradient => Method::Gradient,
            MethodArg::GradientMeanAbs => Method::GradientMeanAbs,
            MethodArg::HessianFisher => Method::HessianFisher,
            MethodArg::HessianInputSq => Method::HessianInputSq,
            MethodArg::Random => Method::Random,
            MethodArg::Rtn => Method::Rtn,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScaleModeArg {
    Verbatim,
    FullRange,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatsArg {
    ExcludeOutliers,
    IncludeOutliers,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SetArg {
    Projections,
    AllMatrices,
}

#[derive(Debug, Clone, Copy, ValueEnum, Default)]
pub enum FormatArg {
    #[default]
    Text,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> ReportFormat {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long, value_enum, default_value = "ce")]
    pub loss: LossArg,
    /// Label source for the loss: dataset tokens or the model's greedy output.
    #[arg(long, value_enum, default_value = "dataset")]
    pub labels: LabelsArg,
}

impl LossArgs {
    fn kind(&self) -> LossKind {
        let variant = match self.loss {
            LossArg::Ce => LossVariant::CrossEntropy,
            LossArg::Mse => LossVariant::MseOnLogits,
        };
        let labels = match self.labels {
            LabelsArg::Dataset => LabelSource::DatasetTokens,
            LabelsArg::Greedy => LabelSource::ModelGreedy,
        };
        LossKind::new(variant, labels)
    }
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    #[arg(long, default_value_t = 4)]
    pub bits: u8,
    /// Columns per group; 0 means one group per channel.
    #[arg(long, default_value_t = 16)]
    pub group: u16,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long, value_enum, default_value = "per-layer")]
    pub scope: ScopeArg,
    #[arg(long = "scale-mode", value_enum, default_value = "verbatim")]
    pub scale_mode: ScaleModeArg,
    /// Whether outliers take part in their group's min/max.
    #[arg(long, value_enum, default_value = "exclude-outliers")]
    pub stats: StatsArg,
    #[arg(long = "quantize-set", value_enum, default_value = "projections")]
    pub quantize_set: SetArg,
}

impl QuantArgs {
    fn options(&self) -> QuantOptions {
        QuantOptions {
            scale_mode: match self.scale_mode {
                ScaleModeArg::Verbatim => ScaleMode::Verbatim,
                ScaleModeArg::FullRange => ScaleMode::FullRange,
            },
            stats: match self.stats {
                StatsArg::ExcludeOutliers => StatsMode::ExcludeOutliers,
                StatsArg::IncludeOutliers => StatsMode::IncludeOutliers,
            },
            quantize_set: match self.quantize_set {
                SetArg::Projections => QuantizeSet::Projections,
                SetArg::AllMatrices => QuantizeSet::AllMatrices,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainRefArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "d-model", default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long = "seq-len", default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value = "byte")]
    pub tokenizer: TokenizerArg,
    /// Vocabulary size of the whitespace tokenizer.
    #[arg(long, default_value_t = 512)]
    pub vocab: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f32,
    /// Progress line every N steps on stderr; 0 is silent.
    #[arg(long = "log-every", default_value_t = 0)]
    pub log_every: usize,
}

#[derive(Debug, Args)]
pub struct GradsArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Leading max_seq_len windows of the corpus to average over.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Gradient file from `gwq grads`.
    #[arg(long)]
    pub grads: Option<PathBuf>,
    /// Calibration corpus, used when no gradient file is given and by hessian-input-sq.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "gradient")]
    pub method: MethodArg,
    #[command(flatten)]
    pub quant: QuantArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the outlier masks as a tensor container.
    #[arg(long = "masks-out")]
    pub masks_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// GWQ file or tensor container.
    #[arg(long)]
    pub model: PathBuf,
    /// Evaluation corpus; repeat for several.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Experiment cell `method:fraction:bits:group[:seed]`; repeat for a grid.
    #[arg(long)]
    pub cell: Vec<String>,
    /// Calibration corpus for experiment cells.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, value_enum, default_value = "per-layer")]
    pub scope: ScopeArg,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 256)]
    pub rows: usize,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    #[arg(long, default_value_t = 4)]
    pub bits: u8,
    #[arg(long, default_value_t = 16)]
    pub group: u16,
    #[arg(long, default_value_t = 0.01)]
    pub fraction: f64,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Products per timed run.
    #[arg(long, default_value_t = 8)]
    pub inner: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Original dense weights, for clamp rates.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

/// Exit code for an error category.
pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Usage => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Invariant => 3,
    }
}

fn category_name(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::Usage => "usage",
        ErrorCategory::Data => "data",
        ErrorCategory::Invariant => "invariant",
    }
}

/// Parse `argv`, run the command and return the process exit code.
pub fn main_with_args<I, T>(argv: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let detail = first.strip_prefix("error: ").unwrap_or(first);
            let _ = writeln!(stderr, "error: usage: {detail}");
            return 1;
        }
    };
    match dispatch(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            let detail = e.to_string().replace('\n', " ");
            let _ = writeln!(stderr, "error: {}: {detail}", category_name(cat));
            exit_code(cat)
        }
    }
}

/// Run a parsed command, writing results to `out`.
pub fn dispatch(cli: &Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let run = || {
        let mut buf = Vec::new();
        match &cli.command {
            Command::TrainRef(a) => train_ref(a, &mut buf),
            Command::Grads(a) => grads(a, &mut buf),
            Command::Quantize(a) => quantize(a, &mut buf),
            Command::Dequantize(a) => dequantize(a, &mut buf),
            Command::Eval(a) => eval(a, &mut buf),
            Command::Bench(a) => bench_cmd(a, &mut buf),
            Command::Inspect(a) => inspect_cmd(a, &mut buf),
        }
        .map(|()| buf)
    };
    let text = match cli.threads {
        None => run(),
        Some(0) => Err(GwqError::Config("--threads must be positive".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| GwqError::Config(format!("cannot start {n} threads: {e}")))?
            .install(run),
    }?;
    out.write_all(&text).map_err(|e| GwqError::io("<stdout>", e))
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| GwqError::io("<stdout>", e))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GwqError::io(path, e))
}

fn corpus_tokens(weights: &ModelBundle, path: &Path) -> Result<Vec<u32>> {
    let model = TinyTransformer::<f32>::from_bundle(weights)?;
    model_tokenizer(weights)?.encode(&read_text(path)?, model.config.vocab_size)
}

/// Either kind of model file, told apart by its leading magic bytes.
pub enum ModelFile {
    Dense(ModelBundle),
    Quantized(QuantizedModel),
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let bytes = std::fs::read(path).map_err(|e| GwqError::io(path, e))?;
    if bytes.starts_with(crate::io::gwq_format::MAGIC) {
        Ok(ModelFile::Quantized(decode_gwq(&bytes)?))
    } else {
        Ok(ModelFile::Dense(decode_container(&bytes)?))
    }
}

fn train_ref(a: &TrainRefArgs, out: &mut Vec<u8>) -> Result<()> {
    let text = read_text(&a.corpus)?;
    let tokenizer = match a.tokenizer {
        TokenizerArg::Byte => Tokenizer::Byte,
        TokenizerArg::Whitespace => Tokenizer::whitespace_from_corpus(&text, a.vocab)?,
    };
    let cfg = TinyTransformerConfig::new(tokenizer.vocab_size(), a.d_model, a.heads, a.layers, a.seq_len);
    cfg.validate()?;
    let tokens = tokenizer.encode(&text, cfg.vocab_size)?;
    let opts = TrainOptions {
        steps: a.steps,
        seed: a.seed,
        batch_size: a.batch,
        learning_rate: a.lr,
        log_every: a.log_every,
        ..TrainOptions::default()
    };
    let bundle = train_with(&cfg, &tokens, &tokenizer, &opts)?;
    write_container(&bundle, &a.out)?;
    emit(
        out,
        &format!(
            "params={} steps={} final_loss={} out={}\n",
            cfg.param_count(),
            a.steps,
            bundle.metadata[crate::refmodel::META_FINAL_LOSS],
            a.out.display()
        ),
    )
}

fn grads(a: &GradsArgs, out: &mut Vec<u8>) -> Result<()> {
    let weights = read_container(&a.weights)?;
    let tokens = corpus_tokens(&weights, &a.corpus)?;
    let model = TinyTransformer::<f32>::from_bundle(&weights)?;
    let samples = calibration_gradients(&model, &tokens, a.samples, a.loss.kind())?;
    let mean = mean_gradients(&samples)?;
    write_gradients(&mean, &a.out)?;
    emit(
        out,
        &format!("tensors={} samples={} out={}\n", mean.len(), a.samples, a.out.display()),
    )
}

/// Per-sample gradients from a file or a calibration corpus.
fn gradient_samples(a: &QuantizeArgs, weights: &ModelBundle) -> Result<Vec<GradientBundle>> {
    match (&a.grads, &a.calib) {
        (Some(path), _) => Ok(vec![read_gradients(path, weights)?]),
        (None, Some(corpus)) => {
            let model = TinyTransformer::<f32>::from_bundle(weights)?;
            let tokens = corpus_tokens(weights, corpus)?;
            calibration_gradients(&model, &tokens, a.samples, a.loss.kind())
        }
        (None, None) => Err(GwqError::Config(
            "this method needs --grads or --calib".into(),
        )),
    }
}

fn quantize_mask(a: &QuantizeArgs, weights: &ModelBundle, opts: &QuantOptions) -> Result<Option<OutlierMask>> {
    let method = Method::from(a.method);
    let fraction = a.quant.fraction;
    if method == Method::Rtn || fraction == 0.0 {
        return Ok(None);
    }
    let scope = Scope::from(a.quant.scope);
    let mut projections = ModelBundle::new();
    for t in weights.tensors.values().filter(|t| opts.quantize_set.contains(t)) {
        projections.insert(t.clone());
    }
    let keep = |n: &str| projections.get(n).is_some();
    let scores = match method {
        Method::Random => {
            return random_baseline_with(weights, &opts.quantize_set, scope, a.seed, fraction).map(Some)
        }
        Method::Gradient => aggregate_gradients_with(&gradient_samples(a, weights)?, Aggregation::MeanThenAbs)?
            .restrict(keep),
        Method::GradientMeanAbs => {
            aggregate_gradients_with(&gradient_samples(a, weights)?, Aggregation::AbsThenMean)?.restrict(keep)
        }
        Method::HessianFisher => {
            hessian_diag_scores(&projections, HessianSource::Gradients(&gradient_samples(a, weights)?))?
        }
        Method::HessianInputSq => {
            let corpus = a
                .calib
                .as_ref()
                .ok_or_else(|| GwqError::Config("hessian-input-sq needs --calib".into()))?;
            let model = TinyTransformer::<f32>::from_bundle(weights)?;
            let acts = calibration_activations(&model, &corpus_tokens(weights, corpus)?, a.samples)?;
            hessian_diag_scores(&projections, HessianSource::Activations(&acts))?
        }
        Method::Rtn => unreachable!("handled above"),
    };
    select_outliers(&scores, fraction, scope).map(Some)
}

fn quantize(a: &QuantizeArgs, out: &mut Vec<u8>) -> Result<()> {
    let method = Method::from(a.method);
    let fraction = if method == Method::Rtn { 0.0 } else { a.quant.fraction };
    let cfg = QuantConfig::new(a.quant.bits, a.quant.group, fraction as f32)?.with_scope(a.quant.scope.into());
    let weights = read_container(&a.weights)?;
    if let Ok(model) = TinyTransformer::<f32>::from_bundle(&weights) {
        model.config.check_gwq_ready()?;
    }
    let opts = a.quant.options();
    let mask = quantize_mask(a, &weights, &opts)?;
    let mut qm = quantize_model(&weights, mask.as_ref(), &cfg, &opts)?;
    qm.metadata.insert("gwq.method".into(), method.to_string());
    write_gwq(&qm, &a.out)?;
    if let (Some(path), Some(m)) = (&a.masks_out, &mask) {
        write_masks(m, path)?;
    }
    let bytes = std::fs::metadata(&a.out).map_err(|e| GwqError::io(&a.out, e))?.len();
    emit(
        out,
        &format!(
            "method={method} outliers={} file_bytes={bytes} {}\n",
            mask.as_ref().map_or(0, OutlierMask::total_selected),
            average_bits(&qm)
        ),
    )
}

fn dequantize(a: &DequantizeArgs, out: &mut Vec<u8>) -> Result<()> {
    let qm = match read_model(&a.model)? {
        ModelFile::Quantized(q) => q,
        ModelFile::Dense(_) => {
            return Err(GwqError::Format(format!("{} is not a GWQ file", a.model.display())))
        }
    };
    let bundle = qm.to_bundle();
    write_container(&bundle, &a.out)?;
    emit(out, &format!("tensors={} out={}\n", bundle.len(), a.out.display()))
}

/// Parse `method:fraction:bits:group[:seed]`.
pub fn parse_cell(s: &str, scope: Scope) -> Result<Cell> {
    let parts: Vec<&str> = s.split(':').collect();
    if !(4..=5).contains(&parts.len()) {
        return Err(GwqError::Config(format!(
            "cell `{s}` is not method:fraction:bits:group[:seed]"
        )));
    }
    let bad = |field: &str| GwqError::Config(format!("cell `{s}`: bad {field}"));
    let mut cell = Cell::new(
        Method::parse(parts[0])?,
        parts[1].parse().map_err(|_| bad("fraction"))?,
        parts[2].parse().map_err(|_| bad("bits"))?,
        parts[3].parse().map_err(|_| bad("group"))?,
    )
    .with_scope(scope);
    if let Some(seed) = parts.get(4) {
        cell = cell.with_seed(seed.parse().map_err(|_| bad("seed"))?);
    }
    Ok(cell)
}

fn eval(a: &EvalArgs, out: &mut Vec<u8>) -> Result<()> {
    let format = ReportFormat::from(a.format);
    let rendered = if a.cell.is_empty() {
        eval_single(a, format)?
    } else {
        let calib = a
            .calib
            .clone()
            .ok_or_else(|| GwqError::Config("experiment cells need --calib".into()))?;
        let cells = a
            .cell
            .iter()
            .map(|c| parse_cell(c, a.scope.into()))
            .collect::<Result<Vec<_>>>()?;
        let mut spec = ExperimentSpec::new(&a.model, calib, a.corpus.clone());
        spec.samples = a.samples;
        spec.cells = cells;
        spec.seed = a.seed;
        spec.loss = a.loss.kind();
        render_report(&run_experiment(&spec)?, format)
    };
    if let Some(path) = &a.out {
        atomic_write(path, &rendered)?;
    }
    out.extend_from_slice(&rendered);
    Ok(())
}

fn eval_single(a: &EvalArgs, format: ReportFormat) -> Result<Vec<u8>> {
    let file_bytes = std::fs::metadata(&a.model).map_err(|e| GwqError::io(&a.model, e))?.len();
    let start = std::time::Instant::now();
    let (weights, row) = match read_model(&a.model)? {
        ModelFile::Dense(b) => {
            let bits = if b.tensors.values().all(|t| t.dtype() == DType::F16) { 16 } else { 32 };
            (b, ("dense".to_string(), 0.0, bits, 0u16, bits as f64))
        }
        ModelFile::Quantized(q) => {
            let method = q.metadata.get("gwq.method").cloned().unwrap_or_else(|| "gwq".into());
            let c = q.config;
            let avg = average_bits(&q).average();
            (q.to_bundle(), (method, c.outlier_fraction as f64, c.bits, c.group_size, avg))
        }
    };
    let model = TinyTransformer::<f32>::from_bundle(&weights)?;
    let tokenizer = model_tokenizer(&weights)?;
    let mut names = Vec::new();
    let mut ppl = Vec::new();
    let mut acc = Vec::new();
    let mut text = format!("model={}\n", a.model.display());
    for path in &a.corpus {
        let name = corpus_name(path);
        let tokens = tokenizer.encode(&read_text(path)?, model.config.vocab_size)?;
        let stats = model.evaluate(&tokens)?;
        text.push_str(&format!(
            "corpus={name} predictions={} ppl={} acc={}\n",
            stats.predictions,
            stats.perplexity(),
            stats.accuracy()
        ));
        names.push(name);
        ppl.push(stats.perplexity());
        acc.push(stats.accuracy());
    }
    Ok(match format {
        ReportFormat::Text => text.into_bytes(),
        ReportFormat::Csv => {
            let (method, fraction, bits, group, avg_bits) = row;
            let report = EvalReport {
                corpora: names,
                rows: vec![CellResult {
                    id: 0,
                    method,
                    fraction,
                    bits,
                    group,
                    outcome: Ok(CellMetrics {
                        ppl,
                        acc,
                        avg_bits,
                        clamp_rate: None,
                        file_bytes,
                        seconds: start.elapsed().as_secs_f64(),
                    }),
                }],
                seed: a.seed,
                samples: 0,
                notes: Vec::new(),
            };
            render_report(&report, ReportFormat::Csv)
        }
    })
}

fn bench_cmd(a: &BenchArgs, out: &mut Vec<u8>) -> Result<()> {
    let cfg = QuantConfig::new(a.bits, a.group, a.fraction as f32)?;
    let opts = BenchOptions {
        repetitions: a.reps,
        inner_loops: a.inner,
        seed: a.seed,
        ..BenchOptions::default()
    };
    let report = bench(a.rows, a.cols, &cfg, &opts)?;
    let csv = format!("{}\n{}\n", BenchReport::CSV_HEADER, report.csv_row());
    if let Some(path) = &a.out {
        atomic_write(path, csv.as_bytes())?;
    }
    match a.format {
        FormatArg::Text => emit(out, &format!("{report}\n")),
        FormatArg::Csv => emit(out, &csv),
    }
}

fn inspect_cmd(a: &InspectArgs, out: &mut Vec<u8>) -> Result<()> {
    match read_model(&a.model)? {
        ModelFile::Quantized(q) => {
            let originals = a.weights.as_deref().map(read_container).transpose()?;
            let c = q.config;
            emit(
                out,
                &format!(
                    "format=GWQ1 bits={} group={} fraction={} scope={}\n",
                    c.bits, c.group_size, c.outlier_fraction, c.scope
                ),
            )?;
            emit(out, &inspect(&q, originals.as_ref())?)
        }
        ModelFile::Dense(b) => {
            let mut text = format!("format=container tensors={} elements={}\n", b.len(), b.numel());
            for (name, t) in b.iter() {
                text.push_str(&format!("{name} dims={:?} dtype={}\n", t.dims(), t.dtype().as_str()));
            }
            for (k, v) in &b.metadata {
                text.push_str(&format!("meta {k}={v}\n"));
            }
            emit(out, &text)
        }
    }
}
