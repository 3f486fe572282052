use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use csdr_core::checkpoint::Checkpoint;
use csdr_core::config::{file_seed, resolve_seed, RunConfig, SEED_ENV};
use csdr_core::eval::{evaluate_pairs, EvalReport, ThresholdPolicy};
use csdr_core::harness::{
    coverage, junit_xml, run_gradient_suite, run_invariant_suite, run_oracle_suite, OracleConfig,
};
use csdr_core::model::ModelBundle;
use csdr_core::pipeline::{
    finetune_bundle, initial_encoder, render_table, run_ablation, standard_grid, AblationRow,
    Dataset, RowMetrics, Variant,
};
use csdr_core::retrieval::{build_index, query};
use csdr_core::rundir::{self, RunDir};
use csdr_core::synthetic::{generate, SyntheticSpec};
use csdr_core::text::{build_vocab, load_pairs, load_sentences, Corpus, PairExample, Vocab};
use csdr_core::trainer::{pretrain_simcse, Objective};

#[derive(Parser)]
#[command(name = "csdr", version, about = "Sentence matching and retrieval for scientific-data text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from one or more sentence files.
    BuildVocab(BuildVocabArgs),
    /// Write a synthetic topic corpus, labeled pairs and a manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Unsupervised SimCSE pre-training on a sentence corpus.
    Pretrain(RunArgs),
    /// Supervised fine-tuning on labeled pairs, then evaluation on the held-out split.
    Finetune(RunArgs),
    /// Score labeled pairs with a trained model.
    Evaluate(RunArgs),
    /// Embed a document collection for retrieval.
    Index(RunArgs),
    /// Top-k documents for a query text.
    Query(QueryArgs),
    /// Run the six-row ablation grid.
    Ablate(RunArgs),
    /// Gradient, oracle and invariant self-checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Sentence files, one sentence per line.
    #[arg(long, required = true)]
    corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    min_freq: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenSyntheticArgs {
    #[arg(long, default_value_t = 4)]
    topics: usize,
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Cosent,
    CosinePair,
    SbertHead,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Cosent => Objective::Cosent,
            ObjectiveArg::CosinePair => Objective::CosinePair,
            ObjectiveArg::SbertHead => Objective::SbertHead,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed and CSDR_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long)]
    eval_pairs: Option<PathBuf>,
    #[arg(long)]
    docs: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Run directory holding vocab.txt and checkpoint.bin.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// Batch size for both training phases.
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    no_pretrain: bool,
    #[arg(long)]
    no_knn: bool,
    /// Decision threshold on the pair score.
    #[arg(long, conflicts_with = "best_threshold")]
    threshold: Option<f64>,
    /// Pick the F1-maximizing threshold on the evaluated pairs.
    #[arg(long)]
    best_threshold: bool,
}

#[derive(Args)]
struct QueryArgs {
    /// Directory written by `csdr index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    text: String,
}

#[derive(Args)]
struct SelftestArgs {
    /// Random instances per gradient target.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Seeds per invariant.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a JUnit XML report.
    #[arg(long)]
    junit: Option<PathBuf>,
}

/// Bad inputs exit with 2, failures after inputs were accepted with 1.
enum Fail {
    Input(anyhow::Error),
    Runtime(anyhow::Error),
}

type CmdResult<T> = Result<T, Fail>;

trait Stage<T> {
    fn input(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn input(self) -> CmdResult<T> {
        self.map_err(|e| Fail::Input(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Fail::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let run_dir = match &cli.command {
        Command::Pretrain(a)
        | Command::Finetune(a)
        | Command::Evaluate(a)
        | Command::Index(a)
        | Command::Ablate(a) => Some(a.run_dir.clone()),
        _ => None,
    };
    let result = match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Selftest(a) => cmd_selftest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Fail::Runtime(e)) => {
            eprintln!("error: {e:#}");
            if let Some(dir) = run_dir.filter(|d| d.is_dir()) {
                if let Err(m) = RunDir::open(&dir).mark_failed(&format!("{e:#}")) {
                    eprintln!("error: could not write failure sentinel: {m}");
                }
            }
            ExitCode::from(1)
        }
    }
}

fn cmd_build_vocab(a: BuildVocabArgs) -> CmdResult<()> {
    let mut sentences = Vec::new();
    for path in &a.corpus {
        sentences.extend(load_sentences(path).input()?.sentences);
    }
    let vocab = build_vocab(sentences.iter().map(String::as_str), a.min_freq).input()?;
    vocab.save(&a.out).runtime()?;
    println!("{} tokens written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn cmd_gen_synthetic(a: GenSyntheticArgs) -> CmdResult<()> {
    let spec = SyntheticSpec {
        topics: a.topics,
        vocab_size: a.vocab_size,
        pairs: a.pairs,
        seed: a.seed,
    };
    let data = generate(&spec).input()?;
    data.write_to(&a.out).runtime()?;
    println!(
        "{} sentences and {} pairs written to {}",
        data.corpus.len(),
        data.pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &RunArgs) -> anyhow::Result<RunConfig> {
    let (mut cfg, seed_in_file) = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let cfg = RunConfig::from_json(&text).with_context(|| path.display().to_string())?;
            (cfg, file_seed(&text)?)
        }
        None => (RunConfig::default(), None),
    };
    let data = &mut cfg.data;
    for (slot, flag) in [
        (&mut data.corpus, &a.corpus),
        (&mut data.pairs, &a.pairs),
        (&mut data.eval_pairs, &a.eval_pairs),
        (&mut data.docs, &a.docs),
        (&mut data.vocab, &a.vocab),
        (&mut data.model, &a.model),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if let Some(d) = a.embed_dim {
        cfg.encoder.embed_dim = d;
    }
    if let Some(e) = a.pretrain_epochs {
        cfg.pretrain.epochs = e;
    }
    if let Some(e) = a.finetune_epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.pretrain.batch_size = b;
        cfg.finetune.batch_size = b;
    }
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    if a.no_pretrain {
        cfg.use_pretrain = false;
    }
    if a.no_knn {
        cfg.use_knn = false;
    }
    if let Some(threshold) = a.threshold {
        cfg.threshold = ThresholdPolicy::Fixed { threshold };
    }
    if a.best_threshold {
        cfg.threshold = ThresholdPolicy::BestF1;
    }
    let env = std::env::var(SEED_ENV).ok();
    cfg.seed = resolve_seed(a.seed, seed_in_file, env.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> anyhow::Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("no {what} given (set data.{what} or pass --{})", what.replace('_', "-")))
}

fn load_model_dir(dir: &Path) -> anyhow::Result<(Vocab, Checkpoint)> {
    RunDir::open(dir)
        .load_model()
        .with_context(|| format!("loading model from {}", dir.display()))
}

fn variant_of(cfg: &RunConfig) -> Variant {
    let objective = match cfg.objective {
        Objective::SbertHead => "sbert-head",
        Objective::CosinePair => "cosine-pair",
        Objective::Cosent | Objective::Simcse => "cosent",
    };
    let mut name = String::new();
    if cfg.use_pretrain {
        name.push_str("simcse+");
    }
    name.push_str(objective);
    if cfg.use_knn {
        name.push_str("+knn");
    }
    Variant {
        name,
        objective: cfg.objective,
        use_pretrain: cfg.use_pretrain,
        use_knn: cfg.use_knn,
    }
}

fn write_report(run: &RunDir, cfg: &RunConfig, report: &EvalReport) -> anyhow::Result<()> {
    run.write_json(rundir::REPORT_FILE, report)?;
    let table = render_table(&[AblationRow {
        variant: variant_of(cfg),
        metrics: Some(RowMetrics::from(report)),
        error: None,
    }]);
    run.write_text(rundir::TABLE_FILE, &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_pretrain(a: RunArgs) -> CmdResult<()> {
    let cfg = resolve_config(&a).input()?;
    let corpus = load_sentences(required(&cfg.data.corpus, "corpus").input()?).input()?;
    let vocab = match &cfg.data.vocab {
        Some(p) => Vocab::load(p).input()?,
        None => build_vocab(corpus.sentences.iter().map(String::as_str), cfg.data.min_freq).input()?,
    };
    let run = RunDir::create(&a.run_dir).runtime()?;
    run.write_config(&cfg).runtime()?;
    run.write_vocab(&vocab).runtime()?;
    let out = pretrain_simcse(
        &corpus,
        &vocab,
        &cfg.encoder,
        &cfg.pretrain_config(),
        &cfg.simcse,
    )
    .runtime()?;
    let checkpoint = Checkpoint {
        encoder: out.encoder,
        classifier: None,
        store: None,
    };
    run.write_checkpoint(&checkpoint, &vocab).runtime()?;
    run.write_history(rundir::HISTORY_FILE, &out.history).runtime()?;
    if let Some(last) = out.history.last() {
        println!("pretrained {} epochs, final loss {:.6}", out.history.len(), last.mean_loss);
    }
    Ok(())
}

/// Pairs to evaluate: the whole eval file, or the held-out split of `pairs`.
fn held_out_pairs(cfg: &RunConfig) -> anyhow::Result<Vec<PairExample>> {
    if let Some(p) = &cfg.data.eval_pairs {
        return Ok(load_pairs(p)?);
    }
    let pairs = load_pairs(required(&cfg.data.pairs, "pairs")?)?;
    Ok(Dataset::split(Corpus::new(Vec::new()), &pairs, cfg.data.split_ratio, cfg.seed)?.test)
}

fn cmd_finetune(a: RunArgs) -> CmdResult<()> {
    let mut cfg = resolve_config(&a).input()?;
    let pairs = load_pairs(required(&cfg.data.pairs, "pairs").input()?).input()?;
    let model = match &cfg.data.model {
        Some(dir) => Some(load_model_dir(dir).input()?),
        None => None,
    };
    if let Some((_, ckpt)) = &model {
        if cfg.encoder != ckpt.encoder.config {
            log::info!("encoder settings taken from the initial model");
            cfg.encoder = ckpt.encoder.config.clone();
        }
    }
    let corpus = match (&cfg.data.corpus, &model) {
        (Some(p), _) => load_sentences(p).input()?,
        (None, None) if cfg.use_pretrain => {
            return Err(Fail::Input(anyhow!(
                "pre-training needs data.corpus; pass --corpus, --model or --no-pretrain"
            )))
        }
        (None, _) => Corpus::new(Vec::new()),
    };
    let mut data = Dataset::split(corpus, &pairs, cfg.data.split_ratio, cfg.seed).input()?;
    if let Some(p) = &cfg.data.eval_pairs {
        data.test = load_pairs(p).input()?;
    }
    let vocab = match (&model, &cfg.data.vocab) {
        (Some((v, _)), _) => v.clone(),
        (None, Some(p)) => Vocab::load(p).input()?,
        (None, None) => data.build_vocab(cfg.data.min_freq).input()?,
    };

    let run = RunDir::create(&a.run_dir).runtime()?;
    run.write_config(&cfg).runtime()?;
    run.write_vocab(&vocab).runtime()?;
    let (init, pretrain_history) = match model {
        Some((_, ckpt)) => (ckpt.encoder, Vec::new()),
        None => initial_encoder(&cfg, &vocab, &data.corpus).runtime()?,
    };
    if !pretrain_history.is_empty() {
        run.write_history(rundir::PRETRAIN_HISTORY_FILE, &pretrain_history)
            .runtime()?;
    }
    let (bundle, history) = finetune_bundle(&cfg, &vocab, &init, &data.train).runtime()?;
    run.write_checkpoint(&bundle.to_checkpoint(), &vocab).runtime()?;
    run.write_history(rundir::HISTORY_FILE, &history).runtime()?;
    let report = evaluate_pairs(&bundle, &data.test, cfg.threshold).runtime()?;
    write_report(&run, &cfg, &report).runtime()
}

fn cmd_evaluate(a: RunArgs) -> CmdResult<()> {
    let cfg = resolve_config(&a).input()?;
    let (vocab, ckpt) = load_model_dir(required(&cfg.data.model, "model").input()?).input()?;
    let pairs = held_out_pairs(&cfg).input()?;
    let bundle = ModelBundle::from_checkpoint(vocab, ckpt, cfg.fusion);
    let run = RunDir::create(&a.run_dir).runtime()?;
    run.write_config(&cfg).runtime()?;
    let report = evaluate_pairs(&bundle, &pairs, cfg.threshold).runtime()?;
    write_report(&run, &cfg, &report).runtime()
}

fn cmd_index(a: RunArgs) -> CmdResult<()> {
    let cfg = resolve_config(&a).input()?;
    let (vocab, ckpt) = load_model_dir(required(&cfg.data.model, "model").input()?).input()?;
    let docs = load_sentences(required(&cfg.data.docs, "docs").input()?).input()?;
    let run = RunDir::create(&a.run_dir).runtime()?;
    run.write_config(&cfg).runtime()?;
    let index = build_index(&docs.sentences, &ckpt.encoder, &vocab).runtime()?;
    run.write_vocab(&vocab).runtime()?;
    run.write_checkpoint(&ckpt, &vocab).runtime()?;
    run.write_json(rundir::INDEX_FILE, &index).runtime()?;
    println!(
        "indexed {} documents ({} skipped)",
        index.len(),
        index.skipped().len()
    );
    Ok(())
}

fn cmd_query(a: QueryArgs) -> CmdResult<()> {
    let dir = RunDir::open(&a.index);
    let (vocab, ckpt) = load_model_dir(&a.index).input()?;
    let index = dir
        .load_index()
        .with_context(|| format!("loading index from {}", a.index.display()))
        .input()?;
    let hits = query(&a.text, &index, &ckpt.encoder, &vocab, a.k).input()?;
    println!("rank\tscore\tdoc_id\ttext");
    for (rank, h) in hits.iter().enumerate() {
        println!("{}\t{:.6}\t{}\t{}", rank + 1, h.score, h.doc_id, h.text);
    }
    Ok(())
}

fn cmd_ablate(a: RunArgs) -> CmdResult<()> {
    let cfg = resolve_config(&a).input()?;
    let pairs = load_pairs(required(&cfg.data.pairs, "pairs").input()?).input()?;
    let corpus = load_sentences(required(&cfg.data.corpus, "corpus").input()?).input()?;
    let data = Dataset::split(corpus, &pairs, cfg.data.split_ratio, cfg.seed).input()?;
    let vocab = match &cfg.data.vocab {
        Some(p) => Vocab::load(p).input()?,
        None => data.build_vocab(cfg.data.min_freq).input()?,
    };
    let run = RunDir::create(&a.run_dir).runtime()?;
    run.write_config(&cfg).runtime()?;
    run.write_vocab(&vocab).runtime()?;
    let rows = run_ablation(&cfg, &data, &vocab, &standard_grid()).runtime()?;
    run.write_json(rundir::REPORT_FILE, &rows).runtime()?;
    let table = render_table(&rows);
    run.write_text(rundir::TABLE_FILE, &table).runtime()?;
    print!("{table}");
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.variant.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Runtime(anyhow!("ablation rows failed: {}", failed.join(", "))))
    }
}

fn cmd_selftest(a: SelftestArgs) -> CmdResult<()> {
    let gradients = run_gradient_suite(a.trials, a.seed).input()?;
    let oracles = run_oracle_suite(&OracleConfig::default(), a.seed).input()?;
    let invariants = run_invariant_suite(a.repeats, a.seed);
    let cov = coverage();
    let suites = [gradients, oracles, invariants];
    for s in &suites {
        print!("{}", s.summary_text());
    }
    print!("{}", cov.summary_text());
    if let Some(path) = &a.junit {
        fs::write(path, junit_xml(&suites))
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
    }
    if suites.iter().all(|s| s.is_success()) && cov.is_complete() {
        println!("selftest passed");
        Ok(())
    } else {
        Err(Fail::Runtime(anyhow!("selftest failed")))
    }
}
