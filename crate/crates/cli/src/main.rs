use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use amsh_core::code_learning::{CrossTerm, Hyperparams};
use amsh_core::data_model::{dmt, synth_raw, synth_with_queries, RawCorpus, SynthConfig};
use amsh_core::evaluation::Task;
use amsh_core::function_learning::{BandwidthMode, KernelExponent};
use amsh_core::pipeline::{self, ScalingCorpus, TrainedModel, Variant};
use amsh_core::retrieval::{rank, PackedCodes};
use clap::{Args, Parser, Subcommand};

mod config;

#[derive(Parser)]
#[command(name = "amsh", version, about = "Cross-modal hashing with adaptive margins")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Check a corpus directory.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Score a model on a query corpus.
    Eval(EvalArgs),
    /// Rank a model's database for raw query features.
    Query(QueryArgs),
    /// Train and score every ablation variant.
    Ablate(AblateArgs),
    /// Time training on growing synthetic corpora.
    Scale(ScaleArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// key=value file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "400,360")]
    sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "32,48")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    multilabel_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share labels across modalities (sample k is the same object everywhere).
    #[arg(long, conflicts_with = "shuffle")]
    paired: bool,
    /// Generate a paired corpus, then shuffle each modality independently.
    #[arg(long)]
    shuffle: bool,
    /// Held-out query samples per modality.
    #[arg(long, default_value_t = 0, requires = "query_out")]
    queries: usize,
    #[arg(long)]
    query_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 16)]
    bits: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    beta: f64,
    #[arg(long, default_value_t = 1500)]
    anchors: usize,
    #[arg(long, default_value_t = 15)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    rel_tol: f64,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long, default_value_t = 1e-10)]
    rank_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// unsquared | squared
    #[arg(long, default_value = "unsquared")]
    kernel_exp: KernelExponent,
    /// all | non_anchor
    #[arg(long, default_value = "all")]
    bandwidth_mode: BandwidthMode,
    /// single | exact
    #[arg(long, default_value = "single")]
    cross_term: CrossTerm,
}

impl HyperArgs {
    fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            eta: self.eta,
            lambda: self.lambda,
            beta: self.beta,
            bits: self.bits,
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            anchors: self.anchors,
            ridge: self.ridge,
            seed: self.seed,
            rank_tol: self.rank_tol,
            kernel_exp: self.kernel_exp,
            bandwidth_mode: self.bandwidth_mode,
            cross_term: self.cross_term,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// full | no_intra | no_inter | no_kernel | no_margin
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum TaskChoice {
    I2t,
    T2i,
    Both,
}

impl TaskChoice {
    fn tasks(self) -> Vec<Task> {
        match self {
            TaskChoice::I2t => vec![Task::ImageToText],
            TaskChoice::T2i => vec![Task::TextToImage],
            TaskChoice::Both => Task::BOTH.to_vec(),
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory holding the query samples.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    task: TaskChoice,
    /// Ranking cutoff; defaults to the database size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    model: PathBuf,
    /// DMT file of raw query features, one column per query.
    #[arg(long)]
    features: PathBuf,
    /// Modality of the queries (1-based).
    #[arg(long, default_value_t = 1)]
    from: usize,
    /// Modality searched (1-based).
    #[arg(long, default_value_t = 2)]
    to: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    config: ConfigArg,
}

#[derive(Args)]
struct ScaleArgs {
    #[arg(long, value_delimiter = ',', default_value = "5000,10000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,48")]
    dims: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    multilabel_p: f64,
    #[arg(long, default_value_t = 7)]
    corpus_seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    config: ConfigArg,
}

enum Failure {
    Runtime(String),
    /// Standard output went away (e.g. piped into `head`); not an error.
    Closed,
}

impl From<String> for Failure {
    fn from(s: String) -> Self {
        Failure::Runtime(s)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::BrokenPipe {
            Failure::Closed
        } else {
            Failure::Runtime(format!("writing output: {e}"))
        }
    }
}

type CmdResult = Result<(), Failure>;
type Out<'a> = &'a mut dyn Write;

fn err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn modality_index(one_based: usize, count: usize) -> Result<usize, String> {
    if one_based == 0 || one_based > count {
        return Err(format!("modality {one_based} out of range 1..={count}"));
    }
    Ok(one_based - 1)
}

fn cmd_synth(a: SynthArgs, out: Out) -> CmdResult {
    let cfg = SynthConfig {
        classes: a.classes,
        sizes: a.sizes.clone(),
        dims: a.dims,
        noise: a.noise,
        multilabel_p: a.multilabel_p,
        seed: a.seed,
        paired: a.paired || a.shuffle,
    };
    let (train, queries) = if a.queries > 0 {
        let (t, q) = synth_with_queries(&cfg, a.queries).map_err(err)?;
        (t, Some(q))
    } else {
        (synth_raw(&cfg).map_err(err)?, None)
    };
    let train = if a.shuffle {
        train.shuffle_unpaired(a.seed)
    } else {
        train
    };
    train.write_dir(&a.out).map_err(err)?;
    if let (Some(q), Some(dir)) = (queries, &a.query_out) {
        q.write_dir(dir).map_err(err)?;
    }
    let sizes: Vec<String> = a.sizes.iter().map(ToString::to_string).collect();
    writeln!(out, 
        "corpus={} modalities={} classes={} sizes={} paired={}",
        a.out.display(),
        sizes.len(),
        a.classes,
        sizes.join(","),
        train.pairing.is_paired()
    )?;
    Ok(())
}

fn cmd_validate(corpus: PathBuf, out: Out) -> CmdResult {
    let raw = RawCorpus::read_dir(&corpus).map_err(err)?;
    let centered = raw.center().map_err(err)?;
    let sizes: Vec<String> = centered.sizes().iter().map(ToString::to_string).collect();
    let dims: Vec<String> = centered.modalities().iter().map(|m| m.dim().to_string()).collect();
    writeln!(out, 
        "valid=true modalities={} classes={} sizes={} dims={} paired={}",
        sizes.len(),
        centered.classes(),
        sizes.join(","),
        dims.join(","),
        raw.pairing.is_paired()
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs, out: Out) -> CmdResult {
    let corpus = RawCorpus::read_dir(&a.corpus).and_then(|c| c.center()).map_err(err)?;
    let h = a.hyper.hyperparams();
    let model = pipeline::train(&corpus, &h, a.variant).map_err(err)?;
    // Save before printing, so a closed pipe cannot lose the model.
    model.save(&a.out).map_err(err)?;
    for (t, v) in model.provenance.step1_trace.iter().enumerate() {
        writeln!(out, "step1.obj[{t}]={v:?}")?;
    }
    for (i, trace) in model.provenance.step2_traces.iter().enumerate() {
        for (t, v) in trace.iter().enumerate() {
            writeln!(out, "step2.m{}.obj[{t}]={v:?}", i + 1)?;
        }
    }
    writeln!(out, "model={} variant={} seed={}", a.out.display(), a.variant, h.seed)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: Out) -> CmdResult {
    let model = TrainedModel::load(&a.model).map_err(err)?;
    let queries = RawCorpus::read_dir(&a.queries).map_err(err)?;
    if queries.modalities.len() != model.modalities.len() {
        return Err(err(format!(
            "query corpus has {} modalities, model {}",
            queries.modalities.len(),
            model.modalities.len()
        )));
    }
    for task in a.task.tasks() {
        let report = pipeline::evaluate_task(&model, &queries, task, a.k).map_err(err)?;
        report.write(&a.out).map_err(err)?;
        writeln!(out, 
            "{task}.map={:?} {task}.K={} {task}.queries_excluded={}",
            report.map, report.cutoff, report.queries_excluded
        )?;
    }
    Ok(())
}

fn cmd_query(a: QueryArgs, out: Out) -> CmdResult {
    let model = TrainedModel::load(&a.model).map_err(err)?;
    let from = modality_index(a.from, model.modalities.len())?;
    let to = modality_index(a.to, model.modalities.len())?;
    let features = dmt::load_matrix(&a.features).map_err(err)?;
    let (codes, db) = pipeline::cross_modal_query(&model, &features, from, to).map_err(err)?;
    let packed = PackedCodes::from_signs(db);
    let k = a.k.min(packed.len());
    for (q, code) in codes.column_iter().enumerate() {
        let ranked = rank(q, code.as_slice(), &packed).map_err(err)?;
        for &(idx, dist) in ranked.entries.iter().take(k) {
            writeln!(out, "{q} {idx} {dist}")?;
        }
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs, out: Out) -> CmdResult {
    let corpus = RawCorpus::read_dir(&a.corpus).and_then(|c| c.center()).map_err(err)?;
    let queries = RawCorpus::read_dir(&a.queries).map_err(err)?;
    let h = a.hyper.hyperparams();
    let rows = pipeline::ablate(&corpus, &queries, &h).map_err(err)?;
    writeln!(out, "seed={} bits={}", h.seed, h.bits)?;
    writeln!(out, "{:<10} {:>20} {:>20}", "variant", "i2t", "t2i")?;
    for r in rows {
        writeln!(out, "{:<10} {:>20?} {:>20?}", r.variant.name(), r.map_i2t, r.map_t2i)?;
    }
    Ok(())
}

fn cmd_scale(a: ScaleArgs, out: Out) -> CmdResult {
    let shape = ScalingCorpus {
        classes: a.classes,
        dims: a.dims,
        noise: a.noise,
        multilabel_p: a.multilabel_p,
        seed: a.corpus_seed,
    };
    let rows = pipeline::scaling_probe(&a.sizes, &a.hyper.hyperparams(), &shape).map_err(err)?;
    writeln!(out, "{:>8} {:>12} {:>12} {:>12} {:>8}", "n", "codes_s", "functions_s", "total_s", "ratio")?;
    let mut prev: Option<f64> = None;
    for r in rows {
        let total = r.timing.total();
        let ratio = prev.map_or("-".to_string(), |p| format!("{:.3}", total / p));
        writeln!(out, 
            "{:>8} {:>12.4} {:>12.4} {:>12.4} {:>8}",
            r.n, r.timing.codes, r.timing.functions, total, ratio
        )?;
        prev = Some(total);
    }
    Ok(())
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("AMSH_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| format!("AMSH_THREADS={v:?} is not a thread count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: config: {e}");
            return ExitCode::from(2);
        }
    };
    // clap exits with 2 on usage errors and 0 for --help/--version.
    let cli = Cli::parse_from(args);
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, &mut out),
        Command::Validate { corpus } => cmd_validate(corpus, &mut out),
        Command::Train(a) => cmd_train(a, &mut out),
        Command::Eval(a) => cmd_eval(a, &mut out),
        Command::Query(a) => cmd_query(a, &mut out),
        Command::Ablate(a) => cmd_ablate(a, &mut out),
        Command::Scale(a) => cmd_scale(a, &mut out),
    }
    .and_then(|()| out.flush().map_err(Failure::from));
    match result {
        Ok(()) | Err(Failure::Closed) => ExitCode::SUCCESS,
        Err(Failure::Runtime(e)) => {
            drop(out);
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
