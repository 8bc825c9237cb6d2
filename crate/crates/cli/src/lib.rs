//! Command-line front end: argument and config handling plus the six
//! subcommands. `main.rs` only parses, sets up logging and maps errors to
//! exit codes.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use rpml_core::dataset::{self, FeatureMatrix, LabelVector, MatrixFormat};
use rpml_core::eval::{self, EvalResult, DEFAULT_KS};
use rpml_core::graph_cluster::{self, ClusterAssignment, ClusterConfig};
use rpml_core::loss::{LossConfig, Variant};
use rpml_core::trainer::{self, ProgressRecord, TrainConfig, TrainMode};
use rpml_core::triplets::generate_triplets;
use rpml_core::{Error, ErrorKind};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Log target of the per-iteration training records.
pub const TRACE_TARGET: &str = "rpml::trace";

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => EXIT_USAGE,
            ErrorKind::Data => EXIT_DATA,
            ErrorKind::Numerical => EXIT_NUMERICAL,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "rpml", version, about = "Unsupervised embedding learning from pseudo-labelled triplets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pseudo-label examples with authority-ascent graph clustering.
    Cluster(ClusterCmd),
    /// Sample triplets from a label file.
    Triplets(TripletsCmd),
    /// Learn an embedding.
    Train(TrainCmd),
    /// Project features with a learned embedding.
    Embed(EmbedCmd),
    /// Clustering and retrieval metrics against ground truth.
    Eval(EvalCmd),
    /// cluster, train, embed and eval in one run.
    Pipeline(PipelineCmd),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML file whose keys are the long flag names; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CommonFile {
    seed: Option<u64>,
    threads: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClusterOpts {
    /// Neighbours per node in the k-NN graph.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub gamma: Option<f64>,
    /// Relevancy threshold.
    #[arg(long, allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub damping: Option<f64>,
    /// Tolerance of the stationary distribution.
    #[arg(long, allow_negative_numbers = true)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_power_iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TripletOpts {
    /// Triplets sampled per anchor.
    #[arg(long)]
    pub per_anchor: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainOpts {
    /// Embedding dimension.
    #[arg(long)]
    pub l: Option<usize>,
    /// Angle bound in degrees.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// rpml or rpml_v1.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub v1_rank: Option<usize>,
    #[arg(long)]
    pub maxiter: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub grad_tol: Option<f64>,
    /// full_batch_cg or stochastic.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_weights: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalOpts {
    /// Comma-separated Recall@K list.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ClusterIo {
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Label file to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TripletsIo {
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Tab-separated anchor, positive, negative rows.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainIo {
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Pseudo-labels; omit together with --self-cluster.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Cluster the features first instead of reading labels.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub self_cluster: Option<bool>,
    /// Embedding matrix to write.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Weight parameter to write.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// JSON-lines copy of the training log.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EmbedIo {
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub embedding: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct EvalIo {
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PipelineIo {
    /// Training features (unlabelled).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out features.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Ground truth of the held-out features.
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also score the random initial embedding.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub baseline: Option<bool>,
}

#[derive(Debug, Args)]
pub struct ClusterCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: ClusterIo,
    #[command(flatten)]
    pub cluster: ClusterOpts,
}

#[derive(Debug, Args)]
pub struct TripletsCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: TripletsIo,
    #[command(flatten)]
    pub triplets: TripletOpts,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: TrainIo,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[command(flatten)]
    pub triplets: TripletOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Debug, Args)]
pub struct EmbedCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: EmbedIo,
}

#[derive(Debug, Args)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: EvalIo,
    #[command(flatten)]
    pub eval: EvalOpts,
}

#[derive(Debug, Args)]
pub struct PipelineCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub io: PipelineIo,
    #[command(flatten)]
    pub cluster: ClusterOpts,
    #[command(flatten)]
    pub triplets: TripletOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub eval: EvalOpts,
}

/// Field-wise `flag.or(file)`.
trait Overlay {
    fn overlay(self, file: Self) -> Self;
}

macro_rules! overlay {
    ($t:ty { $($f:ident),* $(,)? }) => {
        impl Overlay for $t {
            fn overlay(self, file: Self) -> Self {
                Self { $($f: self.$f.or(file.$f)),* }
            }
        }
    };
}

overlay!(ClusterOpts { k, gamma, epsilon, damping, tol, max_power_iters });
overlay!(TripletOpts { per_anchor });
overlay!(TrainOpts { l, alpha, variant, tau, v1_rank, maxiter, grad_tol, mode, batch_size, eta, epochs, freeze_weights });
overlay!(EvalOpts { ks });
overlay!(ClusterIo { features, output });
overlay!(TripletsIo { labels, output });
overlay!(TrainIo { features, labels, self_cluster, output, weights, trace });
overlay!(EmbedIo { features, embedding, output });
overlay!(EvalIo { features, labels, output });
overlay!(PipelineIo { train, test, test_labels, out_dir, baseline });

/// Every long flag of every subcommand except `--config`; these are the
/// accepted config keys.
pub fn config_keys() -> BTreeSet<String> {
    let cmd = Cli::command();
    cmd.get_subcommands()
        .flat_map(|s| s.get_arguments())
        .filter_map(|a| a.get_long())
        .filter(|l| *l != "config" && *l != "help")
        .map(str::to_string)
        .collect()
}

/// Parsed config file; empty when no file was given.
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self { table: toml::Table::new() });
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::from(Error::io(path, e)))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {}", path.display(), e.message)))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::usage(e.message().to_string()))?;
        let known = config_keys();
        let unknown: Vec<&str> = table.keys().map(String::as_str).filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::usage(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        Ok(Self { table })
    }

    fn section<T: DeserializeOwned>(&self) -> CliResult<T> {
        T::deserialize(toml::Value::Table(self.table.clone()))
            .map_err(|e| CliError::usage(format!("config: {}", e.message())))
    }
}

/// Flag and config values merged and checked, with defaults filled in.
#[derive(Debug, Clone)]
pub struct Settings {
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub threads: Option<usize>,
}

struct Layers {
    cluster: ClusterOpts,
    triplets: TripletOpts,
    train: TrainOpts,
    eval: EvalOpts,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn settings(layers: Layers) -> CliResult<Settings> {
    let base = ClusterConfig::default();
    let c = layers.cluster;
    let cluster = ClusterConfig {
        k: c.k.unwrap_or(base.k),
        gamma: c.gamma.unwrap_or(base.gamma),
        epsilon: c.epsilon.unwrap_or(base.epsilon),
        damping: c.damping.unwrap_or(base.damping),
        tol: c.tol.unwrap_or(base.tol),
        max_power_iters: c.max_power_iters.unwrap_or(base.max_power_iters),
    };
    let tb = TrainConfig::default();
    let lb = LossConfig::default();
    let t = layers.train;
    let train = TrainConfig {
        l: t.l.unwrap_or(tb.l),
        loss: LossConfig {
            alpha: t.alpha.unwrap_or(lb.alpha),
            variant: t.variant.unwrap_or(lb.variant),
            tau: t.tau.unwrap_or(lb.tau),
            v1_rank: t.v1_rank.or(lb.v1_rank),
        },
        maxiter: t.maxiter.unwrap_or(tb.maxiter),
        grad_tol: t.grad_tol.unwrap_or(tb.grad_tol),
        mode: t.mode.unwrap_or(tb.mode),
        batch_size: t.batch_size.unwrap_or(tb.batch_size),
        eta: t.eta.unwrap_or(tb.eta),
        epochs: t.epochs.unwrap_or(tb.epochs),
        seed: layers.seed.unwrap_or(tb.seed),
        freeze_weights: t.freeze_weights.unwrap_or(tb.freeze_weights),
        per_anchor: layers.triplets.per_anchor.unwrap_or(tb.per_anchor),
    };
    let ks = layers.eval.ks.unwrap_or_else(|| DEFAULT_KS.to_vec());

    let mut problems = cluster.problems();
    if cluster.max_power_iters < 1 {
        problems.push("max-power-iters must be >= 1".into());
    }
    problems.extend(train.problems());
    if ks.is_empty() || ks.contains(&0) {
        problems.push(format!("ks must be a non-empty list of positive integers (got {ks:?})"));
    }
    if layers.threads == Some(0) {
        problems.push("threads must be >= 1".into());
    }
    if !problems.is_empty() {
        return Err(CliError::usage(format!("invalid parameter(s): {}", problems.join("; "))));
    }
    Ok(Settings { cluster, train, ks, threads: layers.threads })
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("missing required option --{flag}")))
}

/// Errors from file contents name the file they came from.
fn at_path(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| {
        let mut c = CliError::from(e);
        if !c.message.contains(&path.display().to_string()) {
            c.message = format!("{}: {}", path.display(), c.message);
        }
        c
    }
}

fn read_features(path: &Path) -> CliResult<FeatureMatrix> {
    dataset::load_features(path, MatrixFormat::from_path(path)).map_err(at_path(path))
}

fn read_labels(path: &Path) -> CliResult<LabelVector> {
    dataset::load_labels(path).map_err(at_path(path))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_trace(path: &Path, trace: &[ProgressRecord]) -> CliResult<()> {
    let file = fs::File::create(path).map_err(|e| CliError::from(Error::io(path, e)))?;
    let mut w = BufWriter::new(file);
    for r in trace {
        let line = serde_json::to_string(r).expect("progress record serialises");
        writeln!(w, "{line}").map_err(|e| CliError::from(Error::io(path, e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e).into())
}

fn log_progress(r: &ProgressRecord) {
    log::info!(target: TRACE_TARGET, "{}", serde_json::to_string(r).expect("progress record serialises"));
}

fn cluster_summary(a: &ClusterAssignment) -> String {
    let sizes: Vec<String> = a.cluster_sizes().iter().map(usize::to_string).collect();
    format!("clusters\t{}\nsizes\t{}\n", a.num_clusters(), sizes.join("\t"))
}

fn emit(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::from(Error::io("<stdout>", e)))
}

fn in_pool<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T>
where
    T: Send,
{
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::usage(format!("cannot start {n} threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs one subcommand, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Cluster(c) => cmd_cluster(c, out),
        Command::Triplets(c) => cmd_triplets(c, out),
        Command::Train(c) => cmd_train(c, out),
        Command::Embed(c) => cmd_embed(c, out),
        Command::Eval(c) => cmd_eval(c, out),
        Command::Pipeline(c) => cmd_pipeline(c, out),
    }
}

struct Loaded {
    file: ConfigFile,
    seed: Option<u64>,
    threads: Option<usize>,
}

fn load_common(common: &Common) -> CliResult<Loaded> {
    let file = ConfigFile::load(common.config.as_deref())?;
    let cf: CommonFile = file.section()?;
    Ok(Loaded {
        seed: common.seed.or(cf.seed),
        threads: common.threads.or(cf.threads),
        file,
    })
}

fn cmd_cluster(c: ClusterCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let s = settings(Layers {
        cluster: c.cluster.overlay(cfg.file.section()?),
        triplets: TripletOpts::default(),
        train: TrainOpts::default(),
        eval: EvalOpts::default(),
        seed: cfg.seed,
        threads: cfg.threads,
    })?;
    let features = required(&io.features, "features")?;
    let output = required(&io.output, "output")?;
    let x = read_features(features)?;
    let a = in_pool(s.threads, || graph_cluster::cluster(&x, &s.cluster))??;
    dataset::save_labels(&a.labels, output)?;
    log::info!("wrote {} labels to {}", a.labels.len(), output.display());
    emit(out, &cluster_summary(&a))
}

fn cmd_triplets(c: TripletsCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let s = settings(Layers {
        cluster: ClusterOpts::default(),
        triplets: c.triplets.overlay(cfg.file.section()?),
        train: TrainOpts::default(),
        eval: EvalOpts::default(),
        seed: cfg.seed,
        threads: cfg.threads,
    })?;
    let labels_path = required(&io.labels, "labels")?;
    let output = required(&io.output, "output")?;
    let labels = read_labels(labels_path)?;
    let set = in_pool(s.threads, || generate_triplets(&labels, s.train.per_anchor, s.train.seed))??;
    let mut text = String::with_capacity(set.len() * 16);
    for t in &set.triplets {
        text.push_str(&format!("{}\t{}\t{}\n", t.anchor, t.positive, t.negative));
    }
    write_text(output, &text)?;
    let st = &set.stats;
    emit(
        out,
        &format!(
            "triplets\t{}\nanchors\t{}\nsingleton-anchors\t{}\nclusters\t{}\n",
            st.triplets, st.anchors, st.singleton_anchors, st.clusters
        ),
    )
}

fn cmd_train(c: TrainCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let s = settings(Layers {
        cluster: c.cluster.overlay(cfg.file.section()?),
        triplets: c.triplets.overlay(cfg.file.section()?),
        train: c.train.overlay(cfg.file.section()?),
        eval: EvalOpts::default(),
        seed: cfg.seed,
        threads: cfg.threads,
    })?;
    let features = required(&io.features, "features")?;
    let output = required(&io.output, "output")?;
    let self_cluster = io.self_cluster.unwrap_or(false);
    if self_cluster == io.labels.is_some() {
        return Err(CliError::usage("give exactly one of --labels and --self-cluster"));
    }
    let x = read_features(features)?;
    let labels = match &io.labels {
        Some(p) => read_labels(p)?,
        None => {
            let a = in_pool(s.threads, || graph_cluster::cluster(&x, &s.cluster))??;
            log::info!("self-clustering found {} clusters", a.num_clusters());
            a.labels
        }
    };
    let fit = in_pool(s.threads, || trainer::fit_with_progress(&x, &labels, &s.train, log_progress))??;
    dataset::save_embedding(&fit.params.l, output)?;
    if let Some(w) = &io.weights {
        dataset::save_matrix(&fit.params.v, w, MatrixFormat::Binary)?;
    }
    if let Some(t) = &io.trace {
        write_trace(t, &fit.report.trace)?;
    }
    emit(out, &report_summary(&fit.report))
}

fn report_summary(r: &trainer::TrainReport) -> String {
    let last = r.trace.last();
    let mut s = format!(
        "mode\t{}\nvariant\t{}\niterations\t{}\ntriplets\t{}\n",
        r.mode, r.variant, r.iterations, r.triplets.triplets
    );
    if let Some(first) = r.trace.first() {
        s.push_str(&format!("initial-cost\t{}\n", first.cost));
    }
    if let Some(last) = last {
        s.push_str(&format!("final-cost\t{}\nmean-weight\t{}\n", last.cost, last.mean_weight));
    }
    s.push_str(&format!("grad-norm\t{:e}\n", r.final_grad_norm));
    if let Some(stop) = r.stop {
        s.push_str(&format!("stop\t{}\n", serde_json::to_value(stop).unwrap().as_str().unwrap_or("")));
    }
    if let Some(eta) = r.final_eta {
        s.push_str(&format!("eta\t{eta}\n"));
    }
    s
}

fn cmd_embed(c: EmbedCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let features = required(&io.features, "features")?;
    let emb = required(&io.embedding, "embedding")?;
    let output = required(&io.output, "output")?;
    let x = read_features(features)?;
    let l = dataset::load_embedding(emb).map_err(at_path(emb))?;
    let e = trainer::embed(&l, &x)?;
    dataset::save_matrix(&e, output, MatrixFormat::from_path(output))?;
    emit(out, &format!("rows\t{}\ncols\t{}\n", e.nrows(), e.ncols()))
}

fn cmd_eval(c: EvalCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let s = settings(Layers {
        cluster: ClusterOpts::default(),
        triplets: TripletOpts::default(),
        train: TrainOpts::default(),
        eval: c.eval.overlay(cfg.file.section()?),
        seed: cfg.seed,
        threads: cfg.threads,
    })?;
    let features = required(&io.features, "features")?;
    let labels_path = required(&io.labels, "labels")?;
    let x = read_features(features)?;
    let truth = read_labels(labels_path)?;
    let r = in_pool(s.threads, || eval::evaluate(x.values(), &truth, &s.ks, s.train.seed))??;
    let table = r.to_tsv();
    if let Some(o) = &io.output {
        write_text(o, &table)?;
    }
    emit(out, &table)
}

/// Files written by `pipeline` inside the output directory.
pub mod outputs {
    pub const PSEUDO_LABELS: &str = "pseudo_labels.txt";
    pub const EMBEDDING: &str = "embedding.rpml";
    pub const WEIGHTS: &str = "weights.rpml";
    pub const TEST_EMBEDDED: &str = "test_embedded.rpml";
    pub const METRICS: &str = "metrics.tsv";
    pub const BASELINE_METRICS: &str = "baseline_metrics.tsv";
    pub const TRACE: &str = "trace.jsonl";
}

/// Result of [`pipeline`], besides the files it writes.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub clusters: usize,
    pub metrics: EvalResult,
    pub baseline: Option<EvalResult>,
    pub report: trainer::TrainReport,
}

/// Clusters `train`, learns an embedding from the pseudo-labels, embeds
/// `test` and scores it against `test_labels`.
pub fn pipeline(
    train: &FeatureMatrix,
    test: &FeatureMatrix,
    test_labels: &LabelVector,
    s: &Settings,
    baseline: bool,
    out_dir: &Path,
) -> CliResult<PipelineOutcome> {
    if train.d() != test.d() {
        return Err(Error::Dimension(format!(
            "train features have dimension {}, test features {}",
            train.d(),
            test.d()
        ))
        .into());
    }
    test_labels.check_len(test.n())?;
    if let Some(&k) = s.ks.iter().find(|&&k| k >= test.n()) {
        return Err(CliError::usage(format!("ks: K = {k} needs more than {k} test examples")));
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::from(Error::io(out_dir, e)))?;

    let assignment = graph_cluster::cluster(train, &s.cluster)?;
    log::info!(
        "clustering: {} clusters over {} examples",
        assignment.num_clusters(),
        train.n()
    );
    dataset::save_labels(&assignment.labels, &out_dir.join(outputs::PSEUDO_LABELS))?;

    let fit = trainer::fit_with_progress(train, &assignment.labels, &s.train, log_progress)?;
    dataset::save_embedding(&fit.params.l, &out_dir.join(outputs::EMBEDDING))?;
    dataset::save_matrix(&fit.params.v, &out_dir.join(outputs::WEIGHTS), MatrixFormat::Binary)?;
    write_trace(&out_dir.join(outputs::TRACE), &fit.report.trace)?;

    let embedded = trainer::embed(&fit.params.l, test)?;
    dataset::save_matrix(&embedded, &out_dir.join(outputs::TEST_EMBEDDED), MatrixFormat::Binary)?;
    let metrics = eval::evaluate(&embedded, test_labels, &s.ks, s.train.seed)?;
    write_text(&out_dir.join(outputs::METRICS), &metrics.to_tsv())?;

    let baseline = if baseline {
        let init = trainer::initialize(train.d(), s.train.l, s.train.loss.variant, s.train.seed, s.train.loss.v1_rank)?;
        let e0 = trainer::embed(&init.l, test)?;
        let b = eval::evaluate(&e0, test_labels, &s.ks, s.train.seed)?;
        write_text(&out_dir.join(outputs::BASELINE_METRICS), &b.to_tsv())?;
        Some(b)
    } else {
        None
    };
    Ok(PipelineOutcome {
        clusters: assignment.num_clusters(),
        metrics,
        baseline,
        report: fit.report,
    })
}

fn cmd_pipeline(c: PipelineCmd, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_common(&c.common)?;
    let io = c.io.overlay(cfg.file.section()?);
    let s = settings(Layers {
        cluster: c.cluster.overlay(cfg.file.section()?),
        triplets: c.triplets.overlay(cfg.file.section()?),
        train: c.train.overlay(cfg.file.section()?),
        eval: c.eval.overlay(cfg.file.section()?),
        seed: cfg.seed,
        threads: cfg.threads,
    })?;
    let train_path = required(&io.train, "train")?;
    let test_path = required(&io.test, "test")?;
    let labels_path = required(&io.test_labels, "test-labels")?;
    let out_dir = required(&io.out_dir, "out-dir")?;
    let train = read_features(train_path)?;
    let test = read_features(test_path)?;
    let truth = read_labels(labels_path)?;
    let res = in_pool(s.threads, || pipeline(&train, &test, &truth, &s, io.baseline.unwrap_or(false), out_dir))??;
    let mut text = format!("# rpml ({} pseudo-label clusters)\n{}", res.clusters, res.metrics.to_tsv());
    if let Some(b) = &res.baseline {
        text.push_str(&format!("# random orthonormal baseline\n{}", b.to_tsv()));
    }
    emit(out, &text)
}
