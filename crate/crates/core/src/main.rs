use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tokuq::backend::TraceSet;
use tokuq::commands::{
    ablate, eval_correctness, eval_detect, plot_data, score_cases, timing_report, AblationGrid,
    DefaultsDump, DetectOptions, ScoreOptions, ScoringSource,
};
use tokuq::consistency::exact_match_consistency;
use tokuq::io::{load_cases, load_scores, load_traces, load_vocab, save_cases, save_vocab, write_jsonl};
use tokuq::model::{read_params, write_params, ReferenceModel, TinyTransformerConfig};
use tokuq::synth::{synth_corpus, synthetic_vocab, CorpusConfig, SiteSelection};
use tokuq::types::{
    DecodeStrategy, KSpec, Metric, PerturbationConfig, ReasoningCase, Span, Vocabulary,
    DEFAULT_ALPHA, DEFAULT_NUM_SAMPLES, DEFAULT_SIGMA,
};

#[derive(Parser)]
#[command(name = "tokuq", version, about = "Token-level uncertainty scores and wrong-step detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every case with the requested metrics.
    Score(ScoreArgs),
    /// Top-k wrong-step detection and sentence overlap.
    EvalDetect(DetectArgs),
    /// AUROC / AP of response-averaged scores against final-answer correctness.
    EvalCorrect(CorrectArgs),
    /// Detection rates across a perturbation hyperparameter grid.
    Ablate(AblateArgs),
    /// Min-max normalised per-token series of one case.
    PlotData(PlotArgs),
    /// Build a reference model and an annotated synthetic corpus.
    Synth(SynthArgs),
    /// Gradient, causality and oracle checks.
    Selftest,
    /// Per-metric wall-clock statistics of a score file.
    Timing(TimingArgs),
    /// Print the default configuration as JSON.
    Config,
    /// Exact-match consistency of a target response against sampled responses.
    Consistency(ConsistencyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Reference,
    Trace,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "reference")]
    backend: BackendKind,
    /// Reference-model parameter file.
    #[arg(long, required_if_eq("backend", "reference"))]
    params: Option<PathBuf>,
    /// Trace file for the trace backend.
    #[arg(long, required_if_eq("backend", "trace"))]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct CaseArgs {
    #[arg(long)]
    cases: PathBuf,
    /// Vocabulary file; enables token range checks and display strings.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Drop invalid case records instead of aborting.
    #[arg(long)]
    skip_invalid: bool,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    #[arg(long, default_value_t = DEFAULT_NUM_SAMPLES)]
    num_samples: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Scale the l2 step by the gradient's Frobenius norm.
    #[arg(long)]
    normalize_gradient: bool,
    /// Add random noise to response rows only.
    #[arg(long)]
    noise_response_only: bool,
}

impl PerturbArgs {
    fn config(&self) -> PerturbationConfig {
        PerturbationConfig {
            sigma: self.sigma,
            num_samples: self.num_samples,
            alpha: self.alpha,
            seed: self.seed,
            normalize_gradient: self.normalize_gradient,
            noise_response_only: self.noise_response_only,
            ..PerturbationConfig::default()
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    cases: CaseArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    perturb: PerturbArgs,
    #[arg(long, value_delimiter = ',', default_value = "nll,entropy,rand_pert,adv_l2_pert,adv_linf_pert")]
    metrics: Vec<Metric>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    cases: CaseArgs,
    /// Comma-separated k values, absolute (`3`) or percent (`1%`).
    #[arg(long, value_delimiter = ',', default_value = "3,5,1%")]
    k_specs: Vec<KSpec>,
    /// Evaluate every annotated case, not only those with an incorrect final answer.
    #[arg(long)]
    include_all: bool,
    /// Machine-readable report records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrectArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    cases: CaseArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cases: CaseArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    perturb: PerturbArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.0001,0.001,0.01")]
    sigma_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    num_samples_values: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.00001,0.0001,0.001")]
    alpha_values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "rand_pert,adv_l2_pert,adv_linf_pert")]
    metrics: Vec<Metric>,
    #[arg(long, value_delimiter = ',', default_value = "3,5,1%")]
    k_specs: Vec<KSpec>,
    #[arg(long)]
    include_all: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    case_id: String,
    /// Case file supplying the response tokens shown next to each value.
    #[arg(long)]
    cases: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Greedy,
    Sample,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sites {
    Uniform,
    Uncertainty,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_cases: PathBuf,
    #[arg(long)]
    out_params: PathBuf,
    #[arg(long)]
    out_vocab: Option<PathBuf>,
    /// Reuse an existing parameter file instead of initialising a new model.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 64)]
    ffn_dim: usize,
    #[arg(long, default_value_t = 128)]
    max_positions: usize,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    #[arg(long, default_value_t = 200)]
    num_cases: usize,
    #[arg(long, default_value_t = 16)]
    prompt_len: usize,
    #[arg(long, default_value_t = 64)]
    response_len: usize,
    /// Fraction of cases with a planted wrong step.
    #[arg(long, default_value_t = 1.0)]
    corruption: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "greedy")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
    #[arg(long, default_value_t = 8)]
    sentence_len: usize,
    #[arg(long, value_enum, default_value = "uncertainty")]
    site_selection: Sites,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long)]
    scores: PathBuf,
}

#[derive(Args)]
struct ConsistencyArgs {
    /// Case file holding the target case.
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    case_id: String,
    /// Case file whose responses are the sampled alternatives.
    #[arg(long)]
    samples: PathBuf,
    #[arg(long)]
    vocab: Option<PathBuf>,
}

fn load_vocab_opt(path: Option<&Path>) -> Result<Option<Vocabulary>> {
    path.map(|p| load_vocab(p).with_context(|| format!("loading vocabulary {}", p.display())))
        .transpose()
}

fn load_case_file(args: &CaseArgs) -> Result<(Vec<ReasoningCase>, Option<Vocabulary>)> {
    let vocab = load_vocab_opt(args.vocab.as_deref())?;
    let loaded = load_cases(&args.cases, vocab.as_ref(), args.skip_invalid)
        .with_context(|| format!("loading cases {}", args.cases.display()))?;
    for (line, reason) in &loaded.skipped {
        eprintln!("skipped {}:{line}: {reason}", args.cases.display());
    }
    Ok((loaded.cases, vocab))
}

fn load_model(path: &Path) -> Result<ReferenceModel> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_params(BufReader::new(file)).with_context(|| format!("reading parameters {}", path.display()))
}

fn scoring_source(args: &BackendArgs) -> Result<ScoringSource> {
    Ok(match args.backend {
        BackendKind::Reference => {
            let path = args.params.as_deref().context("--params is required")?;
            ScoringSource::white_box("reference", Arc::new(load_model(path)?))
        }
        BackendKind::Trace => {
            let path = args.traces.as_deref().context("--traces is required")?;
            let traces = load_traces(path).with_context(|| format!("loading traces {}", path.display()))?;
            ScoringSource::Trace(Arc::new(TraceSet::new(traces)))
        }
    })
}

fn emit<T: Serialize>(out: Option<&Path>, records: &[T]) -> Result<()> {
    match out {
        Some(p) => write_jsonl(p, records).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut w = BufWriter::new(std::io::stdout().lock());
            for r in records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Score(a) => {
            let (cases, _) = load_case_file(&a.cases)?;
            let source = scoring_source(&a.backend)?;
            let opts = ScoreOptions {
                metrics: a.metrics,
                config: a.perturb.config(),
                workers: a.workers,
            };
            let records = score_cases(&cases, &source, &opts)?;
            emit(a.out.as_deref(), &records)?;
        }
        Command::EvalDetect(a) => {
            let (cases, vocab) = load_case_file(&a.cases)?;
            let scores = load_scores(&a.scores)?;
            let opts = DetectOptions {
                k_specs: a.k_specs,
                include_all: a.include_all,
                vocab,
            };
            let report = eval_detect(&scores, &cases, &opts)?;
            if let Some(out) = &a.out {
                emit(Some(out), &report.records())?;
            }
            print!("{}", report.table());
        }
        Command::EvalCorrect(a) => {
            let (cases, _) = load_case_file(&a.cases)?;
            let rows = eval_correctness(&load_scores(&a.scores)?, &cases)?;
            emit(a.out.as_deref(), &rows)?;
        }
        Command::Ablate(a) => {
            let (cases, vocab) = load_case_file(&a.cases)?;
            let source = scoring_source(&a.backend)?;
            let grid = AblationGrid {
                sigma_values: a.sigma_values,
                num_samples_values: a.num_samples_values,
                alpha_values: a.alpha_values,
                metrics: a.metrics,
            };
            let detect = DetectOptions {
                k_specs: a.k_specs,
                include_all: a.include_all,
                vocab,
            };
            let rows = ablate(&cases, &source, &grid, &a.perturb.config(), &detect, a.workers)?;
            for r in rows.iter().filter_map(|r| r.error.as_ref()) {
                eprintln!("grid point failed: {r}");
            }
            emit(a.out.as_deref(), &rows)?;
        }
        Command::PlotData(a) => {
            let vocab = load_vocab_opt(a.vocab.as_deref())?;
            let scores = load_scores(&a.scores)?;
            let case = match &a.cases {
                Some(p) => load_cases(p, vocab.as_ref(), true)?
                    .cases
                    .into_iter()
                    .find(|c| c.case_id == a.case_id),
                None => None,
            };
            let rows = plot_data(&scores, &a.case_id, case.as_ref(), vocab.as_ref())?;
            emit(a.out.as_deref(), &rows)?;
        }
        Command::Synth(a) => {
            let model = match &a.params {
                Some(p) => load_model(p)?,
                None => ReferenceModel::init(TinyTransformerConfig {
                    vocab_size: a.vocab_size,
                    dim: a.dim,
                    num_layers: a.layers,
                    num_heads: a.heads,
                    ffn_dim: a.ffn_dim,
                    max_positions: a.max_positions,
                    init_seed: a.init_seed,
                    init_scale: a.init_scale,
                })?,
            };
            let cfg = CorpusConfig {
                num_cases: a.num_cases,
                prompt_len: a.prompt_len,
                response_len: a.response_len,
                corruption: a.corruption,
                seed: a.seed,
                strategy: match a.strategy {
                    Strategy::Greedy => DecodeStrategy::Greedy,
                    Strategy::Sample => DecodeStrategy::Sample,
                },
                temperature: a.temperature,
                sentence_len: a.sentence_len,
                site_selection: match a.site_selection {
                    Sites::Uniform => SiteSelection::Uniform,
                    Sites::Uncertainty => SiteSelection::Uncertainty,
                },
            };
            let cases = synth_corpus(&model, &cfg)?;
            save_cases(&a.out_cases, &cases)?;
            let file = File::create(&a.out_params)
                .with_context(|| format!("creating {}", a.out_params.display()))?;
            write_params(&model, BufWriter::new(file))?;
            if let Some(p) = &a.out_vocab {
                save_vocab(p, &synthetic_vocab(model.config().vocab_size)?)?;
            }
            eprintln!("wrote {} cases to {}", cases.len(), a.out_cases.display());
        }
        Command::Selftest => {
            let results = tokuq::selftest::run_all();
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {:<10} {} ({})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.suite,
                    r.name,
                    r.detail
                );
                ok &= r.passed;
            }
            return Ok(ok);
        }
        Command::Timing(a) => {
            emit(None, &timing_report(&load_scores(&a.scores)?))?;
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&DefaultsDump::default())?);
        }
        Command::Consistency(a) => {
            let vocab = load_vocab_opt(a.vocab.as_deref())?;
            let targets = load_cases(&a.cases, vocab.as_ref(), false)?.cases;
            let Some(target) = targets.iter().find(|c| c.case_id == a.case_id) else {
                bail!("unknown case_id {}", a.case_id);
            };
            let samples: Vec<Vec<u32>> = load_cases(&a.samples, vocab.as_ref(), false)?
                .cases
                .iter()
                .map(|c| c.tokens.response().to_vec())
                .collect();
            let response = target.tokens.response();
            let sentences: Vec<Span> = match (&target.sentence_boundaries, &vocab) {
                (Some(b), _) => b.clone(),
                (None, Some(v)) => tokuq::eval::split_sentences(response, v),
                (None, None) => vec![Span::new(0, response.len())],
            };
            let report = exact_match_consistency(&samples, response, &sentences)?;
            emit(None, &[report])?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
