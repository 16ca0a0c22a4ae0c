//! `sskgqa`: ingest knowledge graphs, label datasets, train the embedding,
//! classifier and ranker stages, answer questions, evaluate and ablate.
//!
//! Every report is written to stdout as JSON Lines.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sskgqa_core::annotation::{
    coverage_report, label_question, read_dataset, write_dataset, LabeledQuestion, Labeling,
};
use sskgqa_core::candidates::EnumConfig;
use sskgqa_core::classifier::{accuracy, train_classifier, ClassifierModel, ClassifierTrainConfig};
use sskgqa_core::embeddings::{
    filtered_mrr, train, EmbedTrainConfig, EmbeddingKind, EmbeddingTable,
};
use sskgqa_core::kg::KnowledgeGraph;
use sskgqa_core::pipeline::{
    classifier_examples, gold_structure, rank_examples, FilterMode, Pipeline,
};
use sskgqa_core::ranker::{
    negative_pool, train_on_pools, GraphScorer, LexicalRanker, RankTrainConfig, RankerModel,
};
use sskgqa_core::structures::Taxonomy;
use sskgqa_core::synthetic::{three_hop_benchmark, toy_benchmark};

const SEED_ENV: &str = "SSKGQA_SEED";

#[derive(Parser)]
#[command(
    name = "sskgqa",
    version,
    about = "Structure-filtered query graph ranking over knowledge graphs"
)]
struct Cli {
    /// TOML file with optional `seed`, `fallback`, and `[enumeration]`,
    /// `[embeddings]`, `[classifier]`, `[ranker]` tables. Flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step. `SSKGQA_SEED` overrides it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a TSV or binary graph, print its counts, optionally save it binary.
    Ingest {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label every question with a semantic structure and print coverage per split.
    Annotate {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Taxonomy file; the six built-in structures by default.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Write the dataset back with `structure` filled in.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an entity and relation embedding table.
    TrainEmbeddings {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: Option<EmbeddingKind>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Also report filtered tail MRR on the training triples.
        #[arg(long)]
        mrr: bool,
    },
    /// Train the structure classifier on top of a frozen embedding table.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Train the query graph ranker with triplet loss.
    TrainRanker {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        negatives: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
    },
    /// Answer one question.
    Answer {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        question: String,
        /// Topic entity symbol.
        #[arg(long)]
        topic: String,
        #[command(flatten)]
        models: ModelArgs,
        /// Gold structure label for oracle mode.
        #[arg(long)]
        structure: Option<String>,
    },
    /// Run the pipeline over a dataset and print an evaluation report.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
        /// Leave per-question records out of the report.
        #[arg(long)]
        summary: bool,
    },
    /// Retrain the ranker over a grid of one setting and report hits@1 for each.
    #[command(group(ArgGroup::new("grid").required(true).args(["negatives", "heads"])))]
    Ablate {
        #[arg(long)]
        kg: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        train_split: String,
        /// Falls back to the training questions when this split is empty.
        #[arg(long, default_value = "test")]
        eval_split: String,
        /// Negatives per question, e.g. 1,5,10,50,100,200,300,500.
        #[arg(long, value_delimiter = ',')]
        negatives: Option<Vec<usize>>,
        /// Attention heads, e.g. 1,3,6.
        #[arg(long, value_delimiter = ',')]
        heads: Option<Vec<usize>>,
        #[arg(long, default_value = "oracle")]
        mode: FilterMode,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Write a synthetic benchmark: `kg.tsv` and `questions.jsonl`.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// `toy` covers all six structures; `three-hop` is the filtering benchmark.
        #[arg(long, default_value = "toy")]
        kind: BenchmarkKind,
        /// Minimum question count for `three-hop`.
        #[arg(long, default_value_t = 200)]
        questions: usize,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum BenchmarkKind {
    Toy,
    ThreeHop,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    kg: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Only questions in this split.
    #[arg(long)]
    split: Option<String>,
}

#[derive(Args)]
struct ModelArgs {
    /// Ranker checkpoint, or `lexical` for the untrained overlap baseline.
    #[arg(long)]
    ranker: String,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Embedding table the classifier was trained against.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, default_value = "predicted")]
    mode: FilterMode,
    /// Rank nothing instead of the unfiltered set when filtering empties it.
    #[arg(long)]
    no_fallback: bool,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    fallback: Option<bool>,
    enumeration: EnumConfig,
    embeddings: EmbedTrainConfig,
    classifier: ClassifierTrainConfig,
    ranker: RankTrainConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>, flag_seed: Option<u64>) -> Result<Self> {
        let mut cfg: FileConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FileConfig::default(),
        };
        let env_seed = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .with_context(|| format!("{SEED_ENV}={s} is not an integer"))?,
            ),
            Err(_) => None,
        };
        if let Some(seed) = env_seed.or(flag_seed).or(cfg.seed) {
            cfg.seed = Some(seed);
            cfg.embeddings.seed = seed;
            cfg.classifier.seed = seed;
            cfg.ranker.seed = seed;
        }
        Ok(cfg)
    }
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    ))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    KnowledgeGraph::load(open(path)?).with_context(|| format!("loading graph {}", path.display()))
}

fn load_dataset(path: &Path, split: Option<&str>) -> Result<Vec<LabeledQuestion>> {
    let mut rows =
        read_dataset(open(path)?).with_context(|| format!("reading dataset {}", path.display()))?;
    if let Some(split) = split {
        rows.retain(|q| q.split == split);
    }
    Ok(rows)
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy> {
    match path {
        Some(p) => std::fs::read_to_string(p)?
            .parse()
            .map_err(|e| anyhow::anyhow!("{e}"))
            .with_context(|| format!("parsing taxonomy {}", p.display())),
        None => Ok(Taxonomy::builtin()),
    }
}

fn load_classifier(clf: Option<&Path>, emb: Option<&Path>) -> Result<Option<ClassifierModel>> {
    match (clf, emb) {
        (None, _) => Ok(None),
        (Some(_), None) => bail!("--classifier needs --embeddings"),
        (Some(c), Some(e)) => {
            let table = Arc::new(
                EmbeddingTable::read(open(e)?)
                    .with_context(|| format!("reading {}", e.display()))?,
            );
            let model = ClassifierModel::read(open(c)?, table)
                .with_context(|| format!("reading {}", c.display()))?;
            Ok(Some(model))
        }
    }
}

fn require_classifier(mode: FilterMode, classifier: Option<&ClassifierModel>) -> Result<()> {
    if mode == FilterMode::Predicted && classifier.is_none() {
        bail!("predicted mode needs --classifier and --embeddings");
    }
    Ok(())
}

fn load_ranker(spec: &str) -> Result<Box<dyn GraphScorer>> {
    if spec == "lexical" {
        return Ok(Box::new(LexicalRanker));
    }
    let path = Path::new(spec);
    Ok(Box::new(
        RankerModel::read(open(path)?).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = FileConfig::load(cli.config.as_deref(), cli.seed)?;
    let taxonomy = Taxonomy::builtin();
    match cli.command {
        Command::Ingest { kg, out } => {
            let g = load_kg(&kg)?;
            if let Some(out) = out {
                let mut w = create(&out)?;
                g.write_binary(&mut w)?;
                w.flush()?;
            }
            emit(&json!({
                "entities": g.num_entities(),
                "relations": g.num_relations(),
                "triples": g.num_triples(),
            }))
        }
        Command::Annotate {
            kg,
            dataset,
            taxonomy,
            out,
        } => {
            let g = load_kg(&kg)?;
            let taxonomy = load_taxonomy(taxonomy.as_deref())?;
            let mut rows = load_dataset(&dataset, None)?;
            for row in coverage_report(&rows, &g, &taxonomy) {
                emit(&row)?;
            }
            if let Some(out) = out {
                for q in &mut rows {
                    if let Labeling::Structure(label) = label_question(q, &g, &taxonomy) {
                        q.structure = Some(label);
                    }
                }
                let mut w = create(&out)?;
                write_dataset(&mut w, &rows)?;
                w.flush()?;
            }
            Ok(())
        }
        Command::TrainEmbeddings {
            kg,
            out,
            kind,
            dim,
            epochs,
            lr,
            mrr,
        } => {
            let g = load_kg(&kg)?;
            let mut ecfg = cfg.embeddings;
            ecfg.kind = kind.unwrap_or(ecfg.kind);
            ecfg.dim = dim.unwrap_or(ecfg.dim);
            ecfg.epochs = epochs.unwrap_or(ecfg.epochs);
            ecfg.lr = lr.unwrap_or(ecfg.lr);
            let (table, history) = train(&g, &ecfg)?;
            for (i, loss) in history.iter().enumerate() {
                emit(&json!({ "epoch": i + 1, "loss": loss }))?;
            }
            let mut w = create(&out)?;
            table.write(&mut w)?;
            w.flush()?;
            let mrr = if mrr {
                Some(filtered_mrr(&table, &g)?)
            } else {
                None
            };
            emit(&json!({ "kind": ecfg.kind, "dim": ecfg.dim, "mrr": mrr }))
        }
        Command::TrainClassifier {
            data,
            embeddings,
            out,
            epochs,
            lr,
            heads,
        } => {
            let g = load_kg(&data.kg)?;
            let rows = load_dataset(&data.dataset, data.split.as_deref())?;
            let table = Arc::new(EmbeddingTable::read(open(&embeddings)?)?);
            let (examples, skipped) = classifier_examples(&rows, &g, &taxonomy);
            let mut ccfg = cfg.classifier;
            ccfg.epochs = epochs.unwrap_or(ccfg.epochs);
            ccfg.lr = lr.unwrap_or(ccfg.lr);
            ccfg.heads = heads.unwrap_or(ccfg.heads);
            let (model, history) = train_classifier(&examples, &taxonomy, table, &ccfg)?;
            for (i, loss) in history.iter().enumerate() {
                emit(&json!({ "epoch": i + 1, "loss": loss }))?;
            }
            let mut w = create(&out)?;
            model.write(&mut w)?;
            w.flush()?;
            emit(&json!({
                "examples": examples.len(),
                "skipped": skipped,
                "train_accuracy": accuracy(&model, &examples)?,
            }))
        }
        Command::TrainRanker {
            data,
            out,
            epochs,
            lr,
            negatives,
            heads,
        } => {
            let g = load_kg(&data.kg)?;
            let rows = load_dataset(&data.dataset, data.split.as_deref())?;
            let (examples, skipped) = rank_examples(&rows, &g);
            let mut rcfg = cfg.ranker;
            rcfg.epochs = epochs.unwrap_or(rcfg.epochs);
            rcfg.lr = lr.unwrap_or(rcfg.lr);
            rcfg.negatives = negatives.unwrap_or(rcfg.negatives);
            rcfg.heads = heads.unwrap_or(rcfg.heads);
            let pools = examples
                .iter()
                .map(|ex| negative_pool(ex, &g, &cfg.enumeration))
                .collect::<Result<Vec<_>, _>>()?;
            let (model, report) = train_on_pools(&pools, &rcfg)?;
            for (i, loss) in report.losses.iter().enumerate() {
                emit(&json!({ "epoch": i + 1, "loss": loss }))?;
            }
            let mut w = create(&out)?;
            model.write(&mut w)?;
            w.flush()?;
            emit(&json!({
                "examples": examples.len(),
                "skipped_without_gold_graph": skipped,
                "skipped_without_negatives": report.skipped,
            }))
        }
        Command::Answer {
            kg,
            question,
            topic,
            models,
            structure,
        } => {
            let g = load_kg(&kg)?;
            let classifier =
                load_classifier(models.classifier.as_deref(), models.embeddings.as_deref())?;
            require_classifier(models.mode, classifier.as_ref())?;
            let ranker = load_ranker(&models.ranker)?;
            let topic_id = g.entity(&topic)?;
            let pipeline = Pipeline {
                kg: &g,
                taxonomy: &taxonomy,
                classifier: classifier.as_ref(),
                ranker: ranker.as_ref(),
                enum_cfg: cfg.enumeration.clone(),
                mode: models.mode,
                fallback: !models.no_fallback && cfg.fallback.unwrap_or(true),
            };
            let answer = pipeline.answer(&question, topic_id, structure.as_deref())?;
            let answers: Vec<&str> = answer
                .entities
                .iter()
                .map(|&e| g.entity_symbol(e))
                .collect::<Result<_, _>>()?;
            emit(&json!({
                "question": question,
                "topic": topic,
                "structure": answer.structure,
                "source": answer.source,
                "candidates": answer.ranked,
                "query": answer.graph.as_ref().map(|q| q.to_sparql(&g)).transpose()?,
                "answers": answers,
            }))
        }
        Command::Evaluate {
            data,
            models,
            summary,
        } => {
            let g = load_kg(&data.kg)?;
            let rows = load_dataset(&data.dataset, data.split.as_deref())?;
            if rows.is_empty() {
                bail!("no questions to evaluate");
            }
            let classifier =
                load_classifier(models.classifier.as_deref(), models.embeddings.as_deref())?;
            require_classifier(models.mode, classifier.as_ref())?;
            let ranker = load_ranker(&models.ranker)?;
            let pipeline = Pipeline {
                kg: &g,
                taxonomy: &taxonomy,
                classifier: classifier.as_ref(),
                ranker: ranker.as_ref(),
                enum_cfg: cfg.enumeration.clone(),
                mode: models.mode,
                fallback: !models.no_fallback && cfg.fallback.unwrap_or(true),
            };
            let mut report = pipeline.evaluate(&rows);
            if summary {
                report.records.clear();
            }
            emit(&report)
        }
        Command::Ablate {
            kg,
            dataset,
            train_split,
            eval_split,
            negatives,
            heads,
            mode,
            classifier,
            embeddings,
        } => {
            let g = load_kg(&kg)?;
            let all = load_dataset(&dataset, None)?;
            let train_rows: Vec<LabeledQuestion> = all
                .iter()
                .filter(|q| q.split == train_split)
                .cloned()
                .collect();
            let mut eval_rows: Vec<LabeledQuestion> = all
                .iter()
                .filter(|q| q.split == eval_split)
                .cloned()
                .collect();
            if eval_rows.is_empty() {
                eprintln!("split `{eval_split}` is empty; evaluating on `{train_split}`");
                eval_rows = train_rows.clone();
            }
            if train_rows.is_empty() {
                bail!("split `{train_split}` has no questions");
            }
            let classifier = load_classifier(classifier.as_deref(), embeddings.as_deref())?;
            require_classifier(mode, classifier.as_ref())?;
            let (examples, _) = rank_examples(&train_rows, &g);
            let pools = examples
                .iter()
                .map(|ex| negative_pool(ex, &g, &cfg.enumeration))
                .collect::<Result<Vec<_>, _>>()?;
            let (name, grid) = match (negatives, heads) {
                (Some(n), _) => ("negatives", n),
                (_, Some(h)) => ("heads", h),
                _ => unreachable!("clap requires one grid"),
            };
            let unsupported = eval_rows
                .iter()
                .filter(|q| gold_structure(q, &g, &taxonomy).is_none())
                .count();
            for value in grid {
                let mut rcfg = cfg.ranker.clone();
                match name {
                    "negatives" => rcfg.negatives = value,
                    _ => rcfg.heads = value,
                }
                let start = Instant::now();
                let (model, _) = train_on_pools(&pools, &rcfg)?;
                let train_seconds = start.elapsed().as_secs_f64();
                let pipeline = Pipeline {
                    kg: &g,
                    taxonomy: &taxonomy,
                    classifier: classifier.as_ref(),
                    ranker: &model,
                    enum_cfg: cfg.enumeration.clone(),
                    mode,
                    fallback: cfg.fallback.unwrap_or(true),
                };
                let report = pipeline.evaluate(&eval_rows);
                emit(&json!({
                    "parameter": name,
                    "value": value,
                    "mode": mode,
                    "questions": report.total,
                    "unsupported": unsupported,
                    "hits_at_1": report.hits_at_1,
                    "train_seconds": train_seconds,
                }))?;
            }
            Ok(())
        }
        Command::Generate {
            out,
            kind,
            questions,
        } => {
            let seed = cfg.seed.unwrap_or(0);
            let bench = match kind {
                BenchmarkKind::Toy => toy_benchmark(seed),
                BenchmarkKind::ThreeHop => three_hop_benchmark(seed, questions),
            };
            std::fs::create_dir_all(&out)?;
            let mut w = create(&out.join("kg.tsv"))?;
            for t in bench.kg.triples() {
                writeln!(
                    w,
                    "{}\t{}\t{}",
                    bench.kg.entity_symbol(t.head)?,
                    bench.kg.relation_symbol(t.relation)?,
                    bench.kg.entity_symbol(t.tail)?
                )?;
            }
            w.flush()?;
            let mut w = create(&out.join("questions.jsonl"))?;
            write_dataset(&mut w, &bench.questions)?;
            w.flush()?;
            emit(&json!({
                "entities": bench.kg.num_entities(),
                "triples": bench.kg.num_triples(),
                "questions": bench.questions.len(),
            }))
        }
    }
}
