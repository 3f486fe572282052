//! End-to-end runs: split, vocabulary, two-phase training, scoring, and the
//! six-row ablation grid.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::eval::{evaluate_pairs, EvalReport};
use crate::knn::build_store;
use crate::model::{Classifier, ModelBundle};
use crate::rng::Rng;
use crate::text::{build_vocab, split_pairs, Corpus, PairExample, Vocab};
use crate::trainer::{finetune, pretrain_simcse, EpochRecord, Objective};

/// Pre-training sentences plus a seeded train/test split of labeled pairs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub corpus: Corpus,
    pub train: Vec<PairExample>,
    pub test: Vec<PairExample>,
}

impl Dataset {
    pub fn split(corpus: Corpus, pairs: &[PairExample], ratio: f64, seed: u64) -> Result<Self> {
        let (train, test) = split_pairs(pairs, ratio, seed)?;
        Ok(Self { corpus, train, test })
    }

    /// Vocabulary over the corpus and the training pairs; test pairs are
    /// left out so held-out text maps through `[UNK]` like unseen input.
    pub fn build_vocab(&self, min_freq: usize) -> Result<Vocab> {
        let texts = self
            .corpus
            .sentences
            .iter()
            .map(String::as_str)
            .chain(self.train.iter().flat_map(|p| [p.text_a.as_str(), p.text_b.as_str()]));
        build_vocab(texts, min_freq)
    }
}

/// SimCSE pre-training when enabled, otherwise a fresh encoder drawn from
/// the same init stream pre-training would use.
pub fn initial_encoder(
    cfg: &RunConfig,
    vocab: &Vocab,
    corpus: &Corpus,
) -> Result<(Encoder, Vec<EpochRecord>)> {
    if cfg.use_pretrain {
        let out = pretrain_simcse(
            corpus,
            vocab,
            &cfg.encoder,
            &cfg.pretrain_config(),
            &cfg.simcse,
        )?;
        Ok((out.encoder, out.history))
    } else {
        let mut init_rng = Rng::new(cfg.seed).fork();
        Ok((Encoder::init(vocab, cfg.encoder.clone(), &mut init_rng)?, Vec::new()))
    }
}

/// Fine-tunes `init` and assembles the scoring bundle.
///
/// The head objective keeps its trained head. Cosine objectives get a
/// cosine classifier only when KNN fusion needs one to blend with; without
/// fusion they score by raw cosine.
pub fn finetune_bundle(
    cfg: &RunConfig,
    vocab: &Vocab,
    init: &Encoder,
    train: &[PairExample],
) -> Result<(ModelBundle, Vec<EpochRecord>)> {
    let out = finetune(init, vocab, train, &cfg.finetune_config(), &cfg.cosent)?;
    let classifier = match (out.head, cfg.use_knn) {
        (Some(h), _) => Some(Classifier::Head(h)),
        (None, true) => Some(Classifier::fit_cosine(
            &out.encoder,
            vocab,
            train,
            cfg.cosent.lambda,
        )?),
        (None, false) => None,
    };
    let store = if cfg.use_knn {
        Some(build_store(&out.encoder, vocab, train)?)
    } else {
        None
    };
    Ok((
        ModelBundle {
            vocab: vocab.clone(),
            encoder: out.encoder,
            classifier,
            store,
            fusion: cfg.fusion,
        },
        out.history,
    ))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub bundle: ModelBundle,
    pub pretrain_history: Vec<EpochRecord>,
    pub finetune_history: Vec<EpochRecord>,
    pub report: EvalReport,
}

pub fn run_pipeline(cfg: &RunConfig, data: &Dataset, vocab: &Vocab) -> Result<PipelineOutput> {
    cfg.validate()?;
    let (init, pretrain_history) = initial_encoder(cfg, vocab, &data.corpus)?;
    let (bundle, finetune_history) = finetune_bundle(cfg, vocab, &init, &data.train)?;
    let report = evaluate_pairs(&bundle, &data.test, cfg.threshold)?;
    Ok(PipelineOutput {
        bundle,
        pretrain_history,
        finetune_history,
        report,
    })
}

/// One ablation configuration: a diff applied to the base run config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub objective: Objective,
    pub use_pretrain: bool,
    pub use_knn: bool,
}

impl Variant {
    fn new(name: &str, objective: Objective, use_pretrain: bool, use_knn: bool) -> Self {
        Self {
            name: name.into(),
            objective,
            use_pretrain,
            use_knn,
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        RunConfig {
            objective: self.objective,
            use_pretrain: self.use_pretrain,
            use_knn: self.use_knn,
            ..base.clone()
        }
    }
}

/// The six ablation rows, baseline first and the full configuration last.
pub fn standard_grid() -> Vec<Variant> {
    use Objective::{Cosent, SbertHead};
    vec![
        Variant::new("sbert-head", SbertHead, false, false),
        Variant::new("sbert-head+simcse", SbertHead, true, false),
        Variant::new("cosent", Cosent, false, false),
        Variant::new("simcse+cosent", Cosent, true, false),
        Variant::new("cosent+knn", Cosent, false, true),
        Variant::new("simcse+cosent+knn", Cosent, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub n: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub spearman: Option<f64>,
}

impl From<&EvalReport> for RowMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            n: r.n,
            threshold: r.threshold,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            accuracy: r.accuracy,
            spearman: r.spearman,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Option<RowMetrics>,
    pub error: Option<String>,
}

/// Runs every variant on the same data and vocabulary. Pre-training depends
/// only on the base config, so it runs at most once and is shared. A failing
/// row is recorded and the rest still run.
pub fn run_ablation(
    base: &RunConfig,
    data: &Dataset,
    vocab: &Vocab,
    grid: &[Variant],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let mut pretrained: Option<std::result::Result<Encoder, String>> = None;
    let mut rows = Vec::with_capacity(grid.len());
    for variant in grid {
        let cfg = variant.apply(base);
        log::info!("ablation row {}", variant.name);
        let result = (|| -> Result<RowMetrics> {
            cfg.validate()?;
            let init = if cfg.use_pretrain {
                let cached = pretrained.get_or_insert_with(|| {
                    initial_encoder(&cfg, vocab, &data.corpus)
                        .map(|(e, _)| e)
                        .map_err(|e| e.to_string())
                });
                cached.clone().map_err(Error::InvalidArgument)?
            } else {
                initial_encoder(&cfg, vocab, &data.corpus)?.0
            };
            let (bundle, _) = finetune_bundle(&cfg, vocab, &init, &data.train)?;
            Ok(RowMetrics::from(&evaluate_pairs(&bundle, &data.test, cfg.threshold)?))
        })();
        rows.push(match result {
            Ok(m) => AblationRow {
                variant: variant.clone(),
                metrics: Some(m),
                error: None,
            },
            Err(e) => {
                log::warn!("ablation row {} failed: {e}", variant.name);
                AblationRow {
                    variant: variant.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    Ok(rows)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

/// Aligned plain-text table; metrics as percentages, Spearman to 4 places.
pub fn render_table(rows: &[AblationRow]) -> String {
    let header = ["configuration", "precision", "recall", "F1", "accuracy", "spearman"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| match (&r.metrics, &r.error) {
            (Some(m), _) => vec![
                r.variant.name.clone(),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                pct(m.accuracy),
                m.spearman.map_or_else(|| "n/a".into(), |s| format!("{s:.4}")),
            ],
            (None, err) => vec![
                r.variant.name.clone(),
                format!("error: {}", err.as_deref().unwrap_or("unknown")),
            ],
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in body.iter().filter(|r| r.len() == header.len()) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            if i == 0 {
                line.push_str(&format!("{cell:<w$}", w = widths[0]));
            } else if cells.len() == header.len() {
                line.push_str(&format!("{cell:>w$}", w = widths[i]));
            } else {
                line.push_str(cell);
            }
        }
        line.trim_end().to_owned()
    };
    let mut out = fmt_row(&header.map(String::from));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &body {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ThresholdPolicy;
    use crate::synthetic::{generate, SyntheticSpec};

    fn small() -> (RunConfig, Dataset, Vocab) {
        let data = generate(&SyntheticSpec {
            topics: 2,
            vocab_size: 40,
            pairs: 60,
            seed: 1,
        })
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.encoder.embed_dim = 8;
        cfg.pretrain.epochs = 1;
        cfg.pretrain.batch_size = 16;
        cfg.finetune.epochs = 2;
        cfg.finetune.batch_size = 16;
        cfg.threshold = ThresholdPolicy::BestF1;
        let ds = Dataset::split(Corpus::new(data.corpus), &data.pairs, 0.8, cfg.seed).unwrap();
        let vocab = ds.build_vocab(1).unwrap();
        (cfg, ds, vocab)
    }

    #[test]
    fn grid_order_and_apply() {
        let grid = standard_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0].name, "sbert-head");
        assert_eq!(grid[5].name, "simcse+cosent+knn");
        let cfg = grid[0].apply(&RunConfig::default());
        assert!(!cfg.use_pretrain && !cfg.use_knn);
        assert_eq!(cfg.objective, Objective::SbertHead);
    }

    #[test]
    fn pipeline_runs_and_is_deterministic() {
        let (cfg, ds, vocab) = small();
        let a = run_pipeline(&cfg, &ds, &vocab).unwrap();
        let b = run_pipeline(&cfg, &ds, &vocab).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.bundle.encoder, b.bundle.encoder);
        assert_eq!(a.pretrain_history.len(), 1);
        assert_eq!(a.finetune_history.len(), 2);
        assert_eq!(a.report.n, ds.test.len());
        assert!(a.bundle.store.is_some());
    }

    #[test]
    fn single_row_grid_and_row_errors() {
        let (mut cfg, ds, vocab) = small();
        let rows = run_ablation(&cfg, &ds, &vocab, &standard_grid()[2..3]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].metrics.is_some());

        // Pre-training needs a corpus at least one batch long; the rows
        // without pre-training still run.
        cfg.pretrain.batch_size = 10_000;
        let rows = run_ablation(&cfg, &ds, &vocab, &standard_grid()).unwrap();
        assert_eq!(rows.len(), 6);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.error.is_some(), i % 2 == 1, "row {i}");
        }
        let table = render_table(&rows);
        assert_eq!(table.lines().count(), 8);
        assert!(table.contains("error:"));
        assert!(run_ablation(&cfg, &ds, &vocab, &[]).is_err());
    }

    #[test]
    fn table_formatting() {
        let row = AblationRow {
            variant: standard_grid()[0].clone(),
            metrics: Some(RowMetrics {
                n: 10,
                threshold: 0.5,
                precision: 0.9249,
                recall: 1.0,
                f1: 0.5,
                accuracy: 0.92664,
                spearman: Some(0.81234),
            }),
            error: None,
        };
        let table = render_table(&[row]);
        let line = table.lines().nth(2).unwrap();
        assert!(line.starts_with("sbert-head"));
        assert!(line.contains("92.49%") && line.contains("100.00%") && line.contains("92.66%"));
        assert!(line.ends_with("0.8123"));
        let widths: Vec<usize> = table.lines().map(|l| l.len()).collect();
        assert_eq!(widths[0], widths[2]);
    }
}
