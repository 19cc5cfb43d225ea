//! Command implementations behind the `quantpipe` binary.
//!
//! Every command reads its inputs, computes everything, then writes its
//! artifacts into the output directory through temp-file-and-rename.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use quantpipe::compress::{
    apply_assignment, sensitivity_scan, Evaluator, FakeQuantEvaluator, IntegerEvaluator, SensitivityProfile,
    StructuralPlan,
};
use quantpipe::corpus::{fingerprint, Corpus};
use quantpipe::decode::{
    run_cascade, speculative_decode, toy_classification_set, CascadePolicy, SelfTest, SpecDecodeStats,
};
use quantpipe::eval::{accuracy, profile_run, EvalReport};
use quantpipe::explore::{explore_exhaustive, greedy_search, select_under_constraint, ParetoReport, EXHAUSTIVE_CAP};
use quantpipe::fixture::{make_fixture, FixtureSpec, DEFAULT_SEED};
use quantpipe::model::{
    calibrate, decode_greedy, load_checkpoint, BlockId, IntModel, LanguageModel, Model,
    PrecisionAssignment,
};
use quantpipe::quant::BitWidth;
use quantpipe::Error;

/// Environment variable naming the default fixture directory
/// (`corpus.txt`, `target.ckpt`, `draft.ckpt`).
pub const CORPUS_DIR_ENV: &str = "QUANTPIPE_CORPUS_DIR";

/// Fixtures shipped with the core crate.
pub const BUNDLED_FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures");

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const MISSING_FILE: i32 = 3;
    pub const MALFORMED_INPUT: i32 = 4;
    pub const INVALID_CONFIG: i32 = 5;
    pub const CONSTRAINT: i32 = 6;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => exit::MISSING_FILE,
            Error::Io(_) => exit::FAILURE,
            Error::Json(_)
            | Error::Header(_)
            | Error::Truncated { .. }
            | Error::Overlap { .. }
            | Error::MissingTensor(_)
            | Error::UnexpectedTensor(_) => exit::MALFORMED_INPUT,
            Error::Unsatisfiable { .. } | Error::ExhaustiveCap { .. } => exit::CONSTRAINT,
            _ => exit::INVALID_CONFIG,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let code = if e.kind() == std::io::ErrorKind::NotFound {
        exit::MISSING_FILE
    } else {
        exit::FAILURE
    };
    CliError::new(code, format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "quantpipe", version, about = "Integer inference and compression for toy transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Regenerate the corpus and train the target and draft checkpoints.
    MakeFixture(MakeFixtureArgs),
    /// One-block-at-a-time sensitivity scan.
    Scan(ScanArgs),
    /// Pareto exploration of per-block precision assignments.
    Explore(ExploreArgs),
    /// Apply a structural plan and/or precision assignment.
    Compress(CompressArgs),
    /// Speculative decoding and cascade experiments.
    Decode(DecodeArgs),
    /// Perplexity with op counts for one configuration.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Corpus text [default: corpus.txt in $QUANTPIPE_CORPUS_DIR, ./fixtures or the bundled fixtures]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Target checkpoint [default: target.ckpt next to the default corpus]
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

impl Common {
    fn fixture_dir() -> PathBuf {
        if let Some(dir) = std::env::var_os(CORPUS_DIR_ENV) {
            return PathBuf::from(dir);
        }
        let local = PathBuf::from("fixtures");
        if local.join("corpus.txt").exists() {
            return local;
        }
        PathBuf::from(BUNDLED_FIXTURES)
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| Self::fixture_dir().join("corpus.txt"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| Self::fixture_dir().join("target.ckpt"))
    }

    fn load_corpus(&self) -> CliResult<Corpus> {
        let path = self.corpus_path();
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Ok(Corpus::from_text(&text)?)
    }

    fn load_model(&self) -> CliResult<Model> {
        load_model(&self.model_path())
    }
}

fn load_model(path: &Path) -> CliResult<Model> {
    if !path.exists() {
        return Err(CliError::new(exit::MISSING_FILE, format!("{}: checkpoint not found", path.display())));
    }
    load_checkpoint(path).map_err(|e| {
        let mut c = CliError::from(e);
        c.message = format!("{}: {}", path.display(), c.message);
        c
    })
}

/// Comma-separated bit-widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Precisions(pub Vec<BitWidth>);

impl FromStr for Precisions {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bits = s
            .split(',')
            .map(|t| {
                let n: u32 = t.trim().parse().map_err(|_| format!("`{t}` is not a bit-width"))?;
                BitWidth::try_from(n).map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, String>>()?;
        if bits.is_empty() {
            return Err("empty precision list".into());
        }
        Ok(Self(bits))
    }
}

/// Comma-separated block names (`embedding`, `block.3`, `head`).
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks(pub Vec<BlockId>);

impl FromStr for Blocks {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|t| t.parse::<BlockId>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, String>>()
            .map(Self)
    }
}

/// Comma-separated transformer indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Indices(pub Vec<usize>);

impl FromStr for Indices {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Self(Vec::new()));
        }
        s.split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|_| format!("`{t}` is not a block index")))
            .collect::<Result<Vec<_>, String>>()
            .map(Self)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Float model with fake-quantized weights.
    Float,
    /// Integer-only execution.
    Int,
}

#[derive(Args, Debug)]
pub struct MakeFixtureArgs {
    #[arg(long, default_value = "fixtures")]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Training steps for each model [default: the pinned schedule]
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "2,3,4,8")]
    pub precisions: Precisions,
    #[arg(long, value_enum, default_value_t = Mode::Float)]
    pub mode: Mode,
    /// Percentile clipping for activation calibration (integer mode).
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    /// Exhaustive when the grid fits the cap, greedy otherwise.
    Auto,
    Exhaustive,
    Greedy,
}

#[derive(Args, Debug)]
pub struct ExploreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "2,3,4,8")]
    pub precisions: Precisions,
    /// Blocks to explore; others stay at 16 bits [default: all]
    #[arg(long)]
    pub blocks: Option<Blocks>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Auto)]
    pub strategy: StrategyArg,
    /// Greedy steps.
    #[arg(long, default_value_t = 32)]
    pub budget: usize,
    /// Candidates evaluated per greedy step.
    #[arg(long, default_value_t = 3)]
    pub beam: usize,
    #[arg(long, default_value_t = 0.06)]
    pub max_degradation: f64,
    #[arg(long, value_enum, default_value_t = Mode::Float)]
    pub mode: Mode,
    #[arg(long)]
    pub clip: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CompressArgs {
    #[command(flatten)]
    pub common: Common,
    /// StructuralPlan JSON.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Transformer blocks to remove, e.g. `1,4`.
    #[arg(long)]
    pub remove_blocks: Option<Indices>,
    /// Token keep fraction in (0, 1].
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    /// Block after which tokens are dropped.
    #[arg(long, default_value_t = 2)]
    pub after_block: usize,
    /// MLP channels kept, as `block:count` pairs, e.g. `0:128,3:64`.
    #[arg(long)]
    pub prune: Option<String>,
    /// Precision assignment, e.g. `embedding=8,block.0=4,...`; unlisted blocks stay at 16.
    #[arg(long)]
    pub assignment: Option<String>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Draft checkpoint [default: draft.ckpt next to the default corpus]
    #[arg(long)]
    pub draft: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    #[arg(long, default_value_t = 20)]
    pub prompts: usize,
    #[arg(long, default_value_t = 64)]
    pub steps: usize,
    /// Cascade confidence threshold.
    #[arg(long, default_value_t = 0.7)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = SelfTestArg::MaxProb)]
    pub self_test: SelfTestArg,
    #[arg(long)]
    pub escalation_budget: Option<usize>,
    /// Cascade inputs drawn from held-out text.
    #[arg(long, default_value_t = 200)]
    pub cascade_inputs: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SelfTestArg {
    MaxProb,
    Entropy,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = Mode::Float)]
    pub mode: Mode,
    /// Precision assignment; unlisted blocks stay at 16.
    #[arg(long)]
    pub assignment: Option<String>,
    #[arg(long)]
    pub clip: Option<f64>,
}

/// Write `bytes` to `dir/name` atomically.
pub fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(&path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(&path, e))?;
    tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::new(exit::FAILURE, e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn parse_assignment(model: &Model, text: Option<&str>) -> CliResult<PrecisionAssignment> {
    let mut a = PrecisionAssignment::baseline(&model.config);
    if let Some(text) = text {
        let given: PrecisionAssignment = text
            .parse()
            .map_err(|e: Error| CliError::new(exit::INVALID_CONFIG, format!("--assignment: {e}")))?;
        for (b, w) in given.iter() {
            model
                .check_block(b)
                .map_err(|e| CliError::new(exit::INVALID_CONFIG, format!("--assignment: {e}")))?;
            a.set(b, w);
        }
    }
    Ok(a)
}

fn check_fraction(name: &str, v: f64, lo_open: f64, hi: f64) -> CliResult<()> {
    if !(v > lo_open && v <= hi) {
        return Err(CliError::new(
            exit::INVALID_CONFIG,
            format!("--{name} {v} outside ({lo_open}, {hi}]"),
        ));
    }
    Ok(())
}

/// Evaluator for the requested execution mode, boxed over its lifetime.
fn evaluator<'a>(
    model: &'a Model,
    corpus: &Corpus,
    mode: Mode,
    clip: Option<f64>,
    calibration: &'a mut Option<quantpipe::model::Calibration>,
) -> CliResult<Box<dyn Evaluator + 'a>> {
    let slice = corpus.validation_slice();
    Ok(match mode {
        Mode::Float => Box::new(FakeQuantEvaluator::new(model, slice)),
        Mode::Int => {
            *calibration = Some(calibrate(model, &corpus.calibration_slice(), clip)?);
            Box::new(IntegerEvaluator::new(model, calibration.as_ref().expect("just set"), slice)?)
        }
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeFixture(a) => cmd_make_fixture(&a),
        Command::Scan(a) => cmd_scan(&a),
        Command::Explore(a) => cmd_explore(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Decode(a) => cmd_decode(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

#[derive(Serialize)]
struct FixtureManifest {
    seed: u64,
    corpus_bytes: usize,
    corpus_sha256: String,
    target_digest: String,
    draft_digest: String,
    target_final_loss: f32,
    draft_final_loss: f32,
}

pub fn cmd_make_fixture(args: &MakeFixtureArgs) -> CliResult<()> {
    let mut spec = FixtureSpec::pinned(args.seed);
    if let Some(steps) = args.steps {
        if steps == 0 {
            return Err(CliError::new(exit::INVALID_CONFIG, "--steps must be at least 1"));
        }
        spec.target_train.steps = steps;
        spec.draft_train.steps = steps;
    }
    let mut last = std::collections::BTreeMap::new();
    let fx = make_fixture(&spec, |name, step, loss| {
        if step % 100 == 0 {
            eprintln!("{name} step {step} loss {loss:.4}");
        }
        last.insert(name.to_string(), loss);
    })?;
    let mut target = Vec::new();
    quantpipe::model::write_checkpoint(&fx.target, &mut target)?;
    let mut draft = Vec::new();
    quantpipe::model::write_checkpoint(&fx.draft, &mut draft)?;
    let corpus = Corpus::from_text(&fx.corpus_text)?;
    let manifest = FixtureManifest {
        seed: args.seed,
        corpus_bytes: fx.corpus_text.len(),
        corpus_sha256: fingerprint(&[corpus.tokens().to_vec()]),
        target_digest: fx.target.digest(),
        draft_digest: fx.draft.digest(),
        target_final_loss: last.get("target").copied().unwrap_or(f32::NAN),
        draft_final_loss: last.get("draft").copied().unwrap_or(f32::NAN),
    };
    write_artifact(&args.out, "corpus.txt", fx.corpus_text.as_bytes())?;
    write_artifact(&args.out, "target.ckpt", &target)?;
    write_artifact(&args.out, "draft.ckpt", &draft)?;
    write_artifact(&args.out, "fixture.json", &json(&manifest)?)?;
    Ok(())
}

#[derive(Serialize)]
struct ScanArtifact<'a> {
    mode: Mode,
    profile: &'a SensitivityProfile,
    monotonicity: quantpipe::compress::MonotonicityReport,
}

fn scan(model: &Model, corpus: &Corpus, precisions: &[BitWidth], mode: Mode, clip: Option<f64>) -> CliResult<SensitivityProfile> {
    let mut cal = None;
    let ev = evaluator(model, corpus, mode, clip, &mut cal)?;
    Ok(sensitivity_scan(ev.as_ref(), precisions)?)
}

pub fn cmd_scan(args: &ScanArgs) -> CliResult<()> {
    let corpus = args.common.load_corpus()?;
    let model = args.common.load_model()?;
    let profile = scan(&model, &corpus, &args.precisions.0, args.mode, args.clip)?;
    let artifact = ScanArtifact {
        mode: args.mode,
        monotonicity: profile.monotonicity(),
        profile: &profile,
    };
    write_artifact(&args.common.out, "sensitivity.json", &json(&artifact)?)?;
    Ok(())
}

pub fn cmd_explore(args: &ExploreArgs) -> CliResult<()> {
    if !(args.max_degradation >= 0.0 && args.max_degradation.is_finite()) {
        return Err(CliError::new(exit::INVALID_CONFIG, "--max-degradation must be non-negative"));
    }
    let corpus = args.common.load_corpus()?;
    let model = args.common.load_model()?;
    let blocks = match &args.blocks {
        Some(b) => {
            for &id in &b.0 {
                model
                    .check_block(id)
                    .map_err(|e| CliError::new(exit::INVALID_CONFIG, format!("--blocks: {e}")))?;
            }
            b.0.clone()
        }
        None => model.config.block_ids(),
    };
    let precisions = &args.precisions.0;
    let grid = (precisions.len() as u128).checked_pow(blocks.len() as u32).unwrap_or(u128::MAX);
    let exhaustive = match args.strategy {
        StrategyArg::Exhaustive => true,
        StrategyArg::Greedy => false,
        StrategyArg::Auto => grid <= EXHAUSTIVE_CAP,
    };
    let mut cal = None;
    let ev = evaluator(&model, &corpus, args.mode, args.clip, &mut cal)?;
    let report: ParetoReport = if exhaustive {
        explore_exhaustive(ev.as_ref(), &blocks, precisions)?
    } else {
        let profile = sensitivity_scan(ev.as_ref(), precisions)?;
        greedy_search(
            ev.as_ref(),
            &profile,
            precisions,
            args.budget,
            Some(args.max_degradation),
            args.beam,
        )?
    };
    let out = &args.common.out;
    write_artifact(out, "pareto.json", &json(&report)?)?;
    write_artifact(out, "pareto.csv", report.to_csv().as_bytes())?;
    write_artifact(out, "front.json", &json(&report.front)?)?;
    let selected = select_under_constraint(&report, args.max_degradation)?;
    write_artifact(out, "selection.json", &json(&selected)?)?;
    Ok(())
}

fn parse_prune(text: &str) -> CliResult<Vec<(usize, usize)>> {
    text.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|item| {
            let bad = || CliError::new(exit::INVALID_CONFIG, format!("--prune: `{item}` is not `block:count`"));
            let (b, k) = item.split_once(':').ok_or_else(bad)?;
            Ok((b.trim().parse().map_err(|_| bad())?, k.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Serialize)]
struct CompressArtifact {
    plan: StructuralPlan,
    assignment: PrecisionAssignment,
    model_digest: String,
    param_count: usize,
    baseline: EvalReport,
    compressed: EvalReport,
}

pub fn cmd_compress(args: &CompressArgs) -> CliResult<()> {
    let corpus = args.common.load_corpus()?;
    let model = args.common.load_model()?;
    let mut plan = match &args.plan {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str::<StructuralPlan>(&text)
                .map_err(|e| CliError::new(exit::MALFORMED_INPUT, format!("{}: {e}", p.display())))?
        }
        None => StructuralPlan::default(),
    };
    if let Some(r) = &args.remove_blocks {
        plan.blocks_removed.extend(r.0.iter().copied());
    }
    if let Some(kf) = args.keep_fraction {
        check_fraction("keep-fraction", kf, 0.0, 1.0)?;
        plan.token_drop = Some(quantpipe::model::TokenDrop {
            after_block: args.after_block,
            keep_fraction: kf,
        });
    }
    if let Some(p) = &args.prune {
        for (b, k) in parse_prune(p)? {
            plan.mlp_channels_kept.insert(b, k);
        }
    }
    let assignment = parse_assignment(&model, args.assignment.as_deref())?;
    let structural = plan.apply(&model)?;
    // precision is assigned on the original block numbering
    let mut remapped = PrecisionAssignment::baseline(&structural.config);
    remapped.set(BlockId::Embedding, assignment.get(BlockId::Embedding)?);
    remapped.set(BlockId::OutputHead, assignment.get(BlockId::OutputHead)?);
    let survivors = (0..model.config.n_blocks).filter(|i| !plan.blocks_removed.contains(i));
    for (new, old) in survivors.enumerate() {
        remapped.set(BlockId::Transformer(new), assignment.get(BlockId::Transformer(old))?);
    }
    let compressed = apply_assignment(&structural, &remapped)?;

    let slice = corpus.validation_slice();
    let widths = |m: &Model| m.blocks.iter().map(|b| b.ff_width()).collect::<Vec<_>>();
    let baseline = profile_run(&model, &widths(&model), model.token_drop, "baseline", &slice)?;
    let report = profile_run(&compressed, &widths(&compressed), compressed.token_drop, "compressed", &slice)?;
    let artifact = CompressArtifact {
        plan: plan.clone(),
        assignment: remapped,
        model_digest: compressed.digest(),
        param_count: compressed.param_count(),
        baseline,
        compressed: report,
    };
    let mut ckpt = Vec::new();
    quantpipe::model::write_checkpoint(&compressed, &mut ckpt)?;
    write_artifact(&args.common.out, "compressed.ckpt", &ckpt)?;
    write_artifact(&args.common.out, "compress.json", &json(&artifact)?)?;
    Ok(())
}

#[derive(Serialize)]
struct PromptResult {
    prompt_len: usize,
    matches_target_greedy: bool,
    stats: SpecDecodeStats,
}

#[derive(Serialize)]
struct DecodeArtifact {
    gamma: usize,
    steps: usize,
    all_match: bool,
    total: SpecDecodeStats,
    prompts: Vec<PromptResult>,
    cascade: quantpipe::decode::CascadeReport,
    small_accuracy: f64,
    large_accuracy: f64,
}

/// `n` prompts of 4..=12 tokens from held-out text, from the run's RNG.
pub fn sample_prompts(corpus: &Corpus, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let held = corpus.held_out();
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..=12);
            let start = rng.random_range(0..held.len() - len);
            held[start..start + len].to_vec()
        })
        .collect()
}

pub fn cmd_decode(args: &DecodeArgs) -> CliResult<()> {
    if args.gamma == 0 {
        return Err(CliError::new(exit::INVALID_CONFIG, "--gamma must be at least 1"));
    }
    let policy = CascadePolicy {
        confidence_threshold: args.threshold,
        self_test: match args.self_test {
            SelfTestArg::MaxProb => SelfTest::MaxProb,
            SelfTestArg::Entropy => SelfTest::Entropy,
        },
        escalation_budget: args.escalation_budget,
    };
    policy
        .validate()
        .map_err(|e| CliError::new(exit::INVALID_CONFIG, format!("--threshold: {e}")))?;
    let corpus = args.common.load_corpus()?;
    let target = args.common.load_model()?;
    let draft_path = args
        .draft
        .clone()
        .unwrap_or_else(|| Common::fixture_dir().join("draft.ckpt"));
    let draft = load_model(&draft_path)?;

    let mut rng = ChaCha8Rng::seed_from_u64(args.common.seed);
    let prompts = sample_prompts(&corpus, args.prompts, &mut rng);
    let mut total = SpecDecodeStats::default();
    let mut results = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let (tokens, stats) = speculative_decode(&draft, &target, p, args.steps, args.gamma)?;
        let mut cache = target.new_cache();
        let reference = decode_greedy(&target, p, args.steps, Some(&mut cache))?;
        total.proposed += stats.proposed;
        total.accepted += stats.accepted;
        total.target_calls += stats.target_calls;
        total.draft_calls += stats.draft_calls;
        results.push(PromptResult {
            prompt_len: p.len(),
            matches_target_greedy: tokens == reference,
            stats,
        });
    }
    total.acceptance_rate = if total.proposed == 0 {
        0.0
    } else {
        total.accepted as f64 / total.proposed as f64
    };

    let set = toy_classification_set(&corpus, args.cascade_inputs, 32, rng.random())?;
    let (inputs, labels): (Vec<Vec<u32>>, Vec<u32>) = set.iter().cloned().unzip();
    let cascade = run_cascade(&draft, &target, &inputs, Some(&labels), &policy)?;
    let artifact = DecodeArtifact {
        gamma: args.gamma,
        steps: args.steps,
        all_match: results.iter().all(|r| r.matches_target_greedy),
        total,
        prompts: results,
        cascade,
        small_accuracy: accuracy(&draft, &set)?,
        large_accuracy: accuracy(&target, &set)?,
    };
    let all_match = artifact.all_match;
    write_artifact(&args.common.out, "decode.json", &json(&artifact)?)?;
    if !all_match {
        return Err(CliError::new(exit::FAILURE, "speculative output diverged from target greedy decoding"));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let corpus = args.common.load_corpus()?;
    let model = args.common.load_model()?;
    let assignment = parse_assignment(&model, args.assignment.as_deref())?;
    let slice = corpus.validation_slice();
    let widths: Vec<usize> = model.blocks.iter().map(|b| b.ff_width()).collect();
    let descriptor = format!("{:?} {assignment}", args.mode).to_lowercase();
    let report = match args.mode {
        Mode::Float => {
            let m = apply_assignment(&model, &assignment)?;
            profile_run(&m, &widths, m.token_drop, &descriptor, &slice)?
        }
        Mode::Int => {
            let cal = calibrate(&model, &corpus.calibration_slice(), args.clip)?;
            let m = IntModel::build(&model, &assignment, &cal)?;
            profile_run(&m, &widths, m.token_drop(), &descriptor, &slice)?
        }
    };
    write_artifact(&args.common.out, "eval.json", &json(&report)?)?;
    Ok(())
}
