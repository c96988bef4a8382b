//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 2 input error, 3 mathematical precondition
//! failure, 4 non-convergence. Data goes to stdout, diagnostics to stderr.
//!
//! Settings resolve as command line > `--config` TOML file > `--preset` >
//! built-in defaults. A config file looks like
//!
//! ```toml
//! seed = 7
//! d = 10
//! out_dir = "runs/ufm"
//!
//! [dataset]
//! generator = "random"   # or "symmetric", or `path = "data.json"`
//! v = 10
//! m = 95
//! sizes = "2-5"
//!
//! [optimizer]
//! algorithm = "adam"
//! lr = 0.005
//!
//! [solver]
//! max_iter = 50000
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, entropy, CorpusConfig, CorpusError, SoftLabelDataset, SupportSize, Tokenizer};
use crate::linalg::{Mat, MatrixJson};
use crate::linear_decoder::{gd_linear, solve_linear, LinearError, LinearInstance};
use crate::metrics::{self, gram_cos, heatmap_csv, heatmap_pgm, Axis};
use crate::seeds::{derive_seed, DATA};
use crate::subspace::build_projector;
use crate::theory::{certify_candidate, predict, LmmSource, SvmSolverConfig, TheoryBundle, TheoryError, TheoryPrediction};
use crate::ufm::{init_state, resume_ufm, Algorithm, BatchMode, EmbeddingPair, OptimizerConfig, TrainerState, UfmError};

/// Exit-code classes.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Math(String),
    NotConverged(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Math(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Math(m) | CliError::NotConverged(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TheoryError> for CliError {
    fn from(e: TheoryError) -> Self {
        match e {
            TheoryError::NotConverged { .. } => CliError::NotConverged(e.to_string()),
            TheoryError::Corpus(c) => c.into(),
            TheoryError::RankExceedsDim { .. } | TheoryError::Degenerate => CliError::Math(e.to_string()),
        }
    }
}

impl From<UfmError> for CliError {
    fn from(e: UfmError) -> Self {
        match e {
            UfmError::NonFiniteLoss { .. } => CliError::NotConverged(e.to_string()),
            UfmError::InvalidConfig(_) => CliError::Input(e.to_string()),
            UfmError::Dimension(_) => CliError::Input(e.to_string()),
        }
    }
}

impl From<LinearError> for CliError {
    fn from(e: LinearError) -> Self {
        match e {
            LinearError::Infeasible { .. } => CliError::Math(e.to_string()),
            LinearError::NotConverged { .. } | LinearError::NonFiniteLoss { .. } => CliError::NotConverged(e.to_string()),
            LinearError::Invalid(_) | LinearError::Dimension(_) => CliError::Input(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// `println!` that tolerates a closed stdout (`ntpgeo ... | head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Parser)]
#[command(name = "ntpgeo", version, about = "Soft-label next-token prediction geometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset file from a text corpus.
    Ingest(IngestArgs),
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Predict L^in, L^mm and the max-margin embeddings.
    Predict(PredictArgs),
    /// Train the unconstrained features model.
    TrainUfm(TrainArgs),
    /// Train a linear decoder over fixed context embeddings.
    TrainLinear(TrainArgs),
    /// Test whether the centered support matrix solves the max-margin problem.
    Certify(CertifyArgs),
    /// Compare trained embeddings with the predicted geometry.
    Compare(CompareArgs),
    /// Export a matrix (or its cosine Gram) as CSV and PGM.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TokenizerKind {
    Char,
    Word,
    Table,
}

#[derive(Debug, Args)]
struct IngestArgs {
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "char")]
    tokenizer: TokenizerKind,
    /// Token table (one token per line) for `--tokenizer table`.
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    context_len: usize,
    #[arg(long)]
    lowercase: bool,
    #[arg(long, default_value_t = 1)]
    min_count: u64,
    /// Also write the token table, one token per line.
    #[arg(long)]
    vocab_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(subcommand)]
    kind: GenKind,
}

#[derive(Debug, Subcommand)]
enum GenKind {
    /// All C(V,k) supports of size k with uniform labels.
    Symmetric {
        #[arg(long)]
        v: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = corpus::DEFAULT_SYMMETRIC_CAP)]
        cap: u64,
    },
    /// Random supports with Dirichlet(1) labels.
    Random {
        #[arg(long)]
        v: usize,
        #[arg(long)]
        m: usize,
        /// Support size `k` or range `a-b`.
        #[arg(long)]
        sizes: SupportSize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct SolverArgs {
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    dataset: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    /// Theory bundle output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// V=10, m=95, sizes 2-5, d=10, Adam, 3000 epochs.
    Ufm,
    /// V=10, m=50, size 6, d=60, GD with step 0.5, 10^4 iterations.
    Linear,
}

#[derive(Debug, Args)]
struct TrainArgs {
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<BatchMode>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long)]
    backtracking: bool,
    #[arg(long)]
    parallel: bool,
    /// Continue from a saved trainer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fixed context embeddings (`d×m` matrix JSON) for the linear track.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Debug, Args)]
struct CertifyArgs {
    dataset: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    dataset: PathBuf,
    /// Weights file written by a training run.
    #[arg(long)]
    weights: PathBuf,
    /// Theory bundle; predicted on the fly when absent.
    #[arg(long)]
    theory: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GramKind {
    None,
    Columns,
    Rows,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Matrix JSON, or any JSON object holding matrices (with `--field`).
    input: PathBuf,
    #[arg(long)]
    field: Option<String>,
    #[arg(long, value_enum, default_value = "none")]
    gram: GramKind,
    /// Output prefix; writes `<prefix>.csv` and `<prefix>.pgm`.
    #[arg(long)]
    out: PathBuf,
}

/// Where a dataset comes from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    /// `random` or `symmetric`.
    pub generator: Option<String>,
    pub v: Option<usize>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub sizes: Option<String>,
    /// Falls back to the experiment seed.
    pub seed: Option<u64>,
}

/// Resolved experiment settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub d: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub optimizer: OptimizerConfig,
    pub solver: SvmSolverConfig,
}

fn preset_toml(p: Preset) -> &'static str {
    match p {
        Preset::Ufm => {
            "seed = 7\nd = 10\n[dataset]\ngenerator = \"random\"\nv = 10\nm = 95\nsizes = \"2-5\"\n\
             [optimizer]\nalgorithm = \"adam\"\nlr = 0.005\nweight_decay = 1e-5\nbeta1 = 0.9\nbeta2 = 0.99\nepochs = 3000\n"
        }
        Preset::Linear => {
            "seed = 7\nd = 60\n[dataset]\ngenerator = \"random\"\nv = 10\nm = 50\nsizes = \"6\"\n\
             [optimizer]\nalgorithm = \"gd\"\nlr = 0.5\nweight_decay = 0.0\nepochs = 10000\n"
        }
    }
}

fn merge_toml(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_toml(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Preset, then file, merged key by key.
pub fn load_config(preset: Option<&str>, file: Option<&Path>) -> CliResult<ExperimentConfig> {
    Ok(load_config_keys(preset, file)?.0)
}

/// As [`load_config`], plus the optimizer keys that were set explicitly.
fn load_config_keys(preset: Option<&str>, file: Option<&Path>) -> CliResult<(ExperimentConfig, Vec<String>)> {
    let mut table = toml::Table::new();
    if let Some(p) = preset {
        merge_toml(&mut table, p.parse::<toml::Table>().expect("presets are valid TOML"));
    }
    if let Some(path) = file {
        let text = read_text(path)?;
        let over: toml::Table = text.parse().map_err(|e| io_err(path, e))?;
        merge_toml(&mut table, over);
    }
    let keys = match table.get("optimizer") {
        Some(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    };
    let cfg = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Input(format!("config: {e}")))?;
    Ok((cfg, keys))
}

impl DatasetSpec {
    pub fn resolve(&self, master_seed: Option<u64>) -> CliResult<SoftLabelDataset> {
        if let Some(path) = &self.path {
            return load_dataset(path);
        }
        let need = |x: Option<usize>, name: &str| x.ok_or_else(|| CliError::Input(format!("dataset generator needs `{name}`")));
        match self.generator.as_deref() {
            Some("random") => {
                let seed = self
                    .seed
                    .or(master_seed)
                    .ok_or_else(|| CliError::Input("random generator needs a seed".into()))?;
                let sizes: SupportSize = self
                    .sizes
                    .as_deref()
                    .ok_or_else(|| CliError::Input("dataset generator needs `sizes`".into()))?
                    .parse()
                    .map_err(CliError::Input)?;
                Ok(corpus::gen_random(need(self.v, "v")?, need(self.m, "m")?, sizes, derive_seed(seed, DATA))?)
            }
            Some("symmetric") => Ok(corpus::gen_symmetric(need(self.v, "v")?, need(self.k, "k")?)?),
            Some(other) => Err(CliError::Input(format!("unknown generator {other:?}"))),
            None => Err(CliError::Input("no dataset: pass a dataset file or a [dataset] config section".into())),
        }
    }
}

fn load_dataset(path: &Path) -> CliResult<SoftLabelDataset> {
    SoftLabelDataset::load(path).map_err(|e| io_err(path, e))
}

fn apply_solver_args(cfg: &mut SvmSolverConfig, a: &SolverArgs) {
    if let Some(v) = a.max_iter {
        cfg.max_iter = v;
    }
    if let Some(v) = a.tol {
        cfg.tol_primal = v;
        cfg.tol_dual = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
}

/// Resolved settings, the dataset, and which of `algorithm`/`lr` the user set.
fn resolve_train(args: &TrainArgs) -> CliResult<(ExperimentConfig, SoftLabelDataset, bool, bool)> {
    let (mut cfg, keys) = load_config_keys(args.preset.map(preset_toml), args.config.as_deref())?;
    let algorithm_set = args.algorithm.is_some() || keys.iter().any(|k| k == "algorithm");
    let lr_set = args.lr.is_some() || keys.iter().any(|k| k == "lr");
    if let Some(p) = &args.dataset {
        cfg.dataset = DatasetSpec {
            path: Some(p.clone()),
            ..Default::default()
        };
    }
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    if args.d.is_some() {
        cfg.d = args.d;
    }
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    if args.out_dir.is_some() {
        cfg.out_dir = args.out_dir.clone();
    }
    let o = &mut cfg.optimizer;
    set!(o.algorithm, args.algorithm);
    set!(o.lr, args.lr);
    set!(o.weight_decay, args.weight_decay);
    set!(o.beta1, args.beta1);
    set!(o.beta2, args.beta2);
    set!(o.epochs, args.epochs);
    set!(o.batch, args.batch);
    set!(o.checkpoints, args.checkpoints);
    o.backtracking |= args.backtracking;
    o.parallel |= args.parallel;
    if let Some(s) = cfg.seed {
        o.seed = s;
    }
    apply_solver_args(&mut cfg.solver, &args.solver);
    let ds = cfg.dataset.resolve(cfg.seed)?;
    Ok((cfg, ds, algorithm_set, lr_set))
}

fn configure_threads() {
    if let Ok(v) = std::env::var("NTPGEO_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                    log::debug!("thread pool already initialized");
                }
            }
            _ => log::warn!("ignoring NTPGEO_THREADS={v:?}"),
        }
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Predict(a) => cmd_predict(a),
        Command::TrainUfm(a) => cmd_train_ufm(a),
        Command::TrainLinear(a) => cmd_train_linear(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

fn summary(ds: &SoftLabelDataset) -> String {
    format!("V={} m={} n={} H={:.5}", ds.vocab_size(), ds.num_contexts(), ds.n(), entropy(ds))
}

fn cmd_ingest(a: IngestArgs) -> CliResult<()> {
    let text = fs::read(&a.corpus).map_err(|e| io_err(&a.corpus, e))?;
    let tokenizer = match a.tokenizer {
        TokenizerKind::Char => Tokenizer::Char,
        TokenizerKind::Word => Tokenizer::WhitespaceWord,
        TokenizerKind::Table => {
            let path = a.table.as_ref().ok_or_else(|| CliError::Input("--tokenizer table needs --table".into()))?;
            Tokenizer::FixedTable(read_text(path)?.lines().filter(|l| !l.is_empty()).map(String::from).collect())
        }
    };
    let cfg = CorpusConfig {
        tokenizer,
        context_len: a.context_len,
        lowercase: a.lowercase,
        min_count: a.min_count,
    };
    let (vocab, ds) = corpus::ingest_corpus(&text, &cfg)?;
    write_text(&a.out, &ds.to_json())?;
    if let (Some(path), Some(tokens)) = (&a.vocab_out, vocab.tokens()) {
        let mut out = tokens.join("\n");
        out.push('\n');
        write_text(path, &out)?;
    }
    emit!("{}", summary(&ds));
    Ok(())
}

fn cmd_gen(a: GenArgs) -> CliResult<()> {
    let (ds, out) = match a.kind {
        GenKind::Symmetric { v, k, out, cap } => (corpus::gen_symmetric_capped(v, k, cap)?, out),
        GenKind::Random { v, m, sizes, seed, out } => (corpus::gen_random(v, m, sizes, derive_seed(seed, DATA))?, out),
    };
    write_text(&out, &ds.to_json())?;
    emit!("{}", summary(&ds));
    Ok(())
}

fn theory_line(t: &TheoryPrediction) -> String {
    match t.source {
        LmmSource::Certificate => "certified: true, Lmm = S̃".to_string(),
        LmmSource::Solver => {
            let d = t.diagnostics.as_ref().expect("solver runs record diagnostics");
            format!(
                "certified: false, solver iterations={} primal={:.3e} dual={:.3e} objective={:.6}",
                d.iterations, d.primal_residual, d.dual_residual, d.objective
            )
        }
    }
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let mut cfg = load_config(None, a.config.as_deref())?;
    if let Some(p) = &a.dataset {
        cfg.dataset = DatasetSpec {
            path: Some(p.clone()),
            ..Default::default()
        };
    }
    apply_solver_args(&mut cfg.solver, &a.solver);
    let ds = cfg.dataset.resolve(cfg.seed)?;
    let d = a.d.or(cfg.d).unwrap_or(ds.vocab_size());
    let t = predict(&ds, d, &cfg.solver)?;
    if let Some(out) = &a.out {
        write_text(out, &serde_json::to_string(&TheoryBundle::from(&t)).expect("bundle serializes"))?;
    }
    emit!("{}", theory_line(&t));
    emit!("rank={} nuclear_norm={:.6}", t.svd.rank(), t.svd.s.iter().sum::<f64>());
    Ok(())
}

fn out_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn cmd_train_ufm(a: TrainArgs) -> CliResult<()> {
    let (cfg, ds, _, _) = resolve_train(&a)?;
    let d = cfg.d.unwrap_or(ds.vocab_size());
    let dir = out_dir(&cfg)?;
    let theory = match predict(&ds, d, &cfg.solver) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("no theory metrics: {e}");
            None
        }
    };
    let state = match &a.resume {
        Some(p) => TrainerState::from_json(&read_text(p)?).map_err(|e| io_err(p, e))?,
        None => init_state(&ds, d, &cfg.optimizer),
    };
    let state = resume_ufm(&ds, &cfg.optimizer, theory.as_ref(), state)?;
    let pair = state.pair();
    write_text(&dir.join("trace.csv"), &state.trace.to_csv())?;
    write_text(&dir.join("weights.json"), &pair.to_json())?;
    write_text(&dir.join("state.json"), &state.to_json())?;
    if let Some(t) = &theory {
        write_text(&dir.join("theory.json"), &serde_json::to_string(&TheoryBundle::from(t)).expect("bundle serializes"))?;
        let rep = metrics::report(&pair, &ds, t, &build_projector(&ds)).map_err(|e| CliError::Input(e.to_string()))?;
        write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&rep).expect("report serializes"))?;
    }
    let last = state.trace.last().expect("trace has the initial checkpoint");
    emit!(
        "epoch={} ce={:.6} ce_gap={:.3e} norm_w={:.4} norm_h={:.4}{}",
        last.epoch,
        last.ce,
        last.ce_gap,
        last.norm_w,
        last.norm_h,
        if state.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct LinearSolutionFile {
    wmm: MatrixJson,
    wstar: Option<MatrixJson>,
    compatible: bool,
    separable: bool,
    min_margin: f64,
    max_equality_residual: f64,
}

fn cmd_train_linear(a: TrainArgs) -> CliResult<()> {
    if a.resume.is_some() {
        return Err(CliError::Input("--resume applies to train-ufm only".into()));
    }
    let (mut cfg, ds, algorithm_set, lr_set) = resolve_train(&a)?;
    let dir = out_dir(&cfg)?;
    let inst = match &a.embeddings {
        Some(p) => {
            let m: MatrixJson = serde_json::from_str(&read_text(p)?).map_err(|e| io_err(p, e))?;
            let hbar = m.to_matrix().ok_or_else(|| io_err(p, "data length does not match shape"))?;
            LinearInstance::new(ds, hbar)?
        }
        None => {
            let d = cfg.d.unwrap_or(ds.vocab_size());
            LinearInstance::gaussian(ds, d, cfg.optimizer.seed)?
        }
    };
    // The linear track defaults to GD at min(0.5, 1/(2L̂)).
    if !algorithm_set {
        cfg.optimizer.algorithm = Algorithm::Gd;
    }
    if !lr_set {
        cfg.optimizer.lr = inst.default_lr();
    }
    let sol = solve_linear(&inst)?;
    let (w, trace) = gd_linear(&inst, &cfg.optimizer, Some(&sol))?;
    write_text(&dir.join("trace.csv"), &trace.to_csv())?;
    let pair = EmbeddingPair::new(w, inst.hbar.clone()).expect("decoder matches embeddings");
    write_text(&dir.join("weights.json"), &pair.to_json())?;
    let file = LinearSolutionFile {
        wmm: (&sol.wmm).into(),
        wstar: sol.wstar.as_ref().map(Into::into),
        compatible: sol.compatible,
        separable: sol.separable,
        min_margin: sol.min_margin,
        max_equality_residual: sol.max_equality_residual,
    };
    write_text(&dir.join("solution.json"), &serde_json::to_string(&file).expect("solution serializes"))?;
    let last = trace.last().expect("trace has the initial checkpoint");
    emit!(
        "iteration={} ce_gap={:.3e} norm_w={:.4} alignment={} pt_dist={}",
        last.base.epoch,
        last.base.ce_gap,
        last.base.norm_w,
        last.alignment.map(|v| format!("{v:.4}")).unwrap_or_default(),
        last.pt_dist.map(|v| format!("{v:.4e}")).unwrap_or_default()
    );
    if let Some(k) = &trace.key_lemma {
        emit!("key_lemma alpha={} checked={} violations={}", k.alpha, k.checked, k.violations);
    }
    Ok(())
}

fn cmd_certify(a: CertifyArgs) -> CliResult<()> {
    let ds = load_dataset(&a.dataset)?;
    let cert = certify_candidate(&ds.support());
    emit!("certified: {}", cert.certified);
    emit!("max_off_support_entry: {}", cert.max_off_support_entry);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CliResult<()> {
    let ds = load_dataset(&a.dataset)?;
    let pair = EmbeddingPair::from_json(&read_text(&a.weights)?).map_err(|e| io_err(&a.weights, e))?;
    let t = match &a.theory {
        Some(p) => {
            let b: TheoryBundle = serde_json::from_str(&read_text(p)?).map_err(|e| io_err(p, e))?;
            b.into_prediction().ok_or_else(|| io_err(p, "matrix data does not match its shape"))?
        }
        None => predict(&ds, pair.dim(), &SvmSolverConfig::default())?,
    };
    let rep = metrics::report(&pair, &ds, &t, &build_projector(&ds)).map_err(|e| CliError::Input(e.to_string()))?;
    emit!("{}", serde_json::to_string_pretty(&rep).expect("report serializes"));
    Ok(())
}

fn parse_matrix(value: &serde_json::Value) -> Option<Mat> {
    serde_json::from_value::<MatrixJson>(value.clone()).ok()?.to_matrix()
}

fn cmd_heatmap(a: HeatmapArgs) -> CliResult<()> {
    let text = read_text(&a.input)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| io_err(&a.input, e))?;
    let target = match &a.field {
        Some(f) => value.get(f).ok_or_else(|| io_err(&a.input, format!("no field {f:?}")))?,
        None => &value,
    };
    let x = parse_matrix(target).ok_or_else(|| io_err(&a.input, "not a matrix {shape, data}"))?;
    let x = match a.gram {
        GramKind::None => x,
        GramKind::Columns => gram_cos(&x, Axis::Columns),
        GramKind::Rows => gram_cos(&x, Axis::Rows),
    };
    let with_ext = |ext: &str| {
        let mut p = a.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_text(&with_ext(".csv"), &heatmap_csv(&x))?;
    write_text(&with_ext(".pgm"), &heatmap_pgm(&x))?;
    emit!("{}x{}", x.nrows(), x.ncols());
    Ok(())
}
