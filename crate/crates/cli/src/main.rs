use std::collections::BTreeSet;
use std::io::{BufReader, BufWriter};
use std::net::TcpListener;
use std::path::PathBuf;

use adaprompt::augment::{augment_verbalizer, extract_candidates, AugmentationConfig};
use adaprompt::config::{execute, load_count_model, pretrain_count_model, RunConfig};
use adaprompt::eval::{
    accuracy, aggregate_patterns, load_dataset, load_inputs, read_predictions, DatasetFormat, DatasetSchema, StdKind,
};
use adaprompt::index::{build_index, expand_corpus_paths};
use adaprompt::lm::{CountMlm, DEFAULT_ALPHA, DEFAULT_MASK_TOKEN, DEFAULT_RADIUS};
use adaprompt::prompt::presets;
use adaprompt::query::{build_retrieval_set, QueryMode, RetrievalPlan};
use adaprompt::wire::{serve, ExternalMlm, ExternalNli, WireClient};
use adaprompt::{
    CorpusIndex, Entailment, LexicalEntailment, Lexicon, MaskedLm, PromptTemplate, ScoringMode, Verbalizer,
};
use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adaprompt",
    version,
    about = "Zero-shot prompt classification with prompt-aware continual pretraining"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a sentence index from newline-delimited corpus files.
    Index {
        /// Files or directories (every file inside, sorted).
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "bm25")]
        scoring: ScoringMode,
    },
    /// Count a corpus into a base model for the built-in backend.
    Pretrain {
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = DEFAULT_RADIUS)]
        radius: usize,
    },
    /// Retrieve prompt-aware data for a dataset and optionally train on it.
    Adapt {
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        template: TemplateArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long = "top-o", default_value_t = 20)]
        top_o: usize,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value = "prompt")]
        mode: QueryMode,
        /// Directory for retrieved.txt and retrieved.provenance.jsonl.
        #[arg(long)]
        out: PathBuf,
        /// Write the count model trained on the retrieved set here.
        #[arg(long)]
        train_out: Option<PathBuf>,
    },
    /// Grow a seed verbalizer with entailment-filtered candidates.
    AugmentVerbalizer {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        template: TemplateArgs,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long, default_value_t = 0.4)]
        threshold: f64,
        /// Maximum words per label, seeds included.
        #[arg(long, default_value_t = 5)]
        cap: usize,
        /// Fillers collected per input.
        #[arg(long = "top-n", default_value_t = 20)]
        top_n: usize,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        antonyms: Option<PathBuf>,
        /// Wire endpoint of an entailment model instead of the lexical one.
        #[arg(long)]
        nli_endpoint: Option<String>,
        /// Write the augmentation report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score prediction files against gold labels.
    Eval {
        /// One file per pattern.
        #[arg(long, required = true, num_args = 1..)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        gold: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        #[arg(long, default_value = "population")]
        std: String,
    },
    /// Serve the built-in backends over the line protocol.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        antonyms: Option<PathBuf>,
        /// `host:port` to listen on; stdin/stdout when absent.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Args)]
struct SchemaArgs {
    #[arg(long, default_value = "jsonl")]
    format: String,
    #[arg(long = "text-field", default_values_t = ["text".to_string()])]
    text_fields: Vec<String>,
    #[arg(long, default_value = "label")]
    label_field: String,
    #[arg(long)]
    id_field: Option<String>,
}

impl SchemaArgs {
    fn schema(&self) -> Result<DatasetSchema> {
        let format = match self.format.as_str() {
            "jsonl" => DatasetFormat::Jsonl,
            "csv" => DatasetFormat::Csv,
            "tsv" => DatasetFormat::Tsv,
            other => bail!("unknown dataset format `{other}`"),
        };
        Ok(DatasetSchema {
            format,
            text_fields: self.text_fields.clone(),
            label_field: Some(self.label_field.clone()),
            id_field: self.id_field.clone(),
            ..DatasetSchema::default()
        })
    }
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
}

#[derive(Args)]
struct TemplateArgs {
    /// Built-in template id, or the id of `--template-source`.
    #[arg(long)]
    template: String,
    #[arg(long)]
    template_source: Option<String>,
    /// `label=word1,word2`, in label order. Defaults to the template's task.
    #[arg(long = "label")]
    labels: Vec<String>,
}

impl TemplateArgs {
    fn template(&self) -> Result<PromptTemplate> {
        match &self.template_source {
            Some(src) => Ok(PromptTemplate::parse(self.template.clone(), src)?),
            None => presets::template(&self.template).ok_or_else(|| anyhow!("unknown template id `{}`", self.template)),
        }
    }

    fn verbalizer(&self) -> Result<Verbalizer> {
        if self.labels.is_empty() {
            let task = presets::task_for_template(&self.template)
                .ok_or_else(|| anyhow!("template `{}` has no built-in labels; pass --label", self.template))?;
            return Ok(task.verbalizer());
        }
        let mut pairs = Vec::new();
        for spec in &self.labels {
            let (label, words) = spec
                .split_once('=')
                .ok_or_else(|| anyhow!("label `{spec}` is not of the form label=word,word"))?;
            pairs.push((
                label.trim().to_string(),
                words.split(',').map(|w| w.trim().to_string()).collect::<Vec<_>>(),
            ));
        }
        Ok(Verbalizer::new(pairs)?)
    }
}

#[derive(Args)]
struct BackendArgs {
    /// Count model state from `pretrain`.
    #[arg(long, conflicts_with = "endpoint")]
    model: Option<PathBuf>,
    /// Wire endpoint (`tcp:host:port`, `unix:path` or `cmd:program args`).
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value = DEFAULT_MASK_TOKEN)]
    mask_token: String,
}

impl BackendArgs {
    fn build(&self) -> Result<Box<dyn MaskedLm>> {
        match (&self.model, &self.endpoint) {
            (Some(p), _) => Ok(Box::new(
                load_count_model(p).with_context(|| format!("loading {}", p.display()))?,
            )),
            (None, Some(e)) => Ok(Box::new(
                ExternalMlm::new(WireClient::connect(e)?).with_mask_token(self.mask_token.clone()),
            )),
            (None, None) => bail!("pass --model or --endpoint"),
        }
    }
}

fn lexicon(path: &Option<PathBuf>) -> Result<Lexicon> {
    match path {
        Some(p) => Lexicon::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Lexicon::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Index { corpus, out, scoring } => {
            let files = expand_corpus_paths(&corpus)?;
            let index = build_index(&files, scoring)?;
            index.save(&out).with_context(|| format!("writing {}", out.display()))?;
            log::info!(
                "indexed {} sentences, {} terms from {} files",
                index.doc_count(),
                index.vocabulary_size(),
                files.len()
            );
        }
        Command::Pretrain {
            corpus,
            out,
            alpha,
            radius,
        } => {
            let model = pretrain_count_model(&corpus, alpha, radius)?;
            std::fs::write(&out, model.to_json()).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", model.checkpoint());
        }
        Command::Adapt {
            index,
            dataset,
            template,
            backend,
            top_o,
            k,
            mode,
            out,
            train_out,
        } => {
            let index = CorpusIndex::load(&index).with_context(|| format!("loading {}", index.display()))?;
            let inputs = load_inputs(&dataset.dataset, &dataset.schema.schema()?)?;
            let tpl = template.template()?;
            let model = backend.build()?;
            let plan = RetrievalPlan {
                top_o,
                k,
                mode,
                query_source: dataset.dataset.display().to_string(),
            };
            let set = build_retrieval_set(&index, model.as_ref(), &tpl, &inputs, &plan)?;
            std::fs::create_dir_all(&out)?;
            set.save(&out.join("retrieved.txt"), &out.join("retrieved.provenance.jsonl"))?;
            log::info!(
                "{} queries, {} hits, {} unique sentences, {} failed inputs",
                set.queries_issued,
                set.size_raw,
                set.size_deduped(),
                set.failures
            );
            if let Some(path) = train_out {
                let Some(p) = &backend.model else {
                    bail!("--train-out needs a count --model");
                };
                let mut trained: CountMlm = load_count_model(p)?;
                trained.count(&set.sentences);
                std::fs::write(&path, trained.to_json())?;
                println!("{}", trained.checkpoint());
            }
        }
        Command::AugmentVerbalizer {
            dataset,
            template,
            backend,
            threshold,
            cap,
            top_n,
            synonyms,
            antonyms,
            nli_endpoint,
            out,
        } => {
            let config = AugmentationConfig {
                threshold,
                per_label_cap: cap,
                per_sample_top_n: top_n,
                ..AugmentationConfig::default()
            };
            let tpl = template.template()?;
            let seed = template.verbalizer()?;
            let inputs = load_inputs(&dataset.dataset, &dataset.schema.schema()?)?;
            let model = backend.build()?;
            let nli: Box<dyn Entailment> = match nli_endpoint {
                Some(e) => Box::new(ExternalNli::new(WireClient::connect(&e)?)),
                None => Box::new(
                    LexicalEntailment::new(lexicon(&synonyms)?, lexicon(&antonyms)?)
                        .with_frame_tokens(tpl.literal_tokens()),
                ),
            };
            let candidates = extract_candidates(model.as_ref(), &tpl, &seed, &inputs, &config)?;
            let report = augment_verbalizer(nli.as_ref(), &tpl, &seed, &candidates, &config)?;
            match out {
                Some(p) => std::fs::write(&p, serde_json::to_vec_pretty(&report)?)
                    .with_context(|| format!("writing {}", p.display()))?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let summary = execute(&cfg)?;
            println!("{}", summary.report);
        }
        Command::Eval {
            predictions,
            gold,
            schema,
            std,
        } => {
            let std: StdKind = serde_json::from_value(serde_json::Value::String(std.clone()))
                .map_err(|_| anyhow!("unknown std kind `{std}` (population or sample)"))?;
            let runs = predictions
                .iter()
                .map(|p| read_predictions(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<String> = runs
                .iter()
                .flatten()
                .flat_map(|r| std::iter::once(r.gold.clone()).chain(r.predicted.clone()))
                .chain(
                    runs.iter()
                        .flatten()
                        .flat_map(|r| r.scores.iter().map(|s| s.label.clone())),
                )
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let gold = load_dataset(&gold, &schema.schema()?, &labels)?;
            let accs = runs.iter().map(|r| accuracy(r, &gold)).collect::<Result<Vec<_>, _>>()?;
            let report = aggregate_patterns(&accs, gold.len(), std)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            log::info!("{report}");
        }
        Command::Serve {
            model,
            synonyms,
            antonyms,
            listen,
        } => {
            let model = model.map(|p| load_count_model(&p)).transpose()?;
            let nli = LexicalEntailment::new(lexicon(&synonyms)?, lexicon(&antonyms)?);
            match listen {
                None => {
                    let stdin = std::io::stdin();
                    serve(stdin.lock(), std::io::stdout().lock(), model, Some(&nli))?;
                }
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    log::info!("listening on {}", listener.local_addr()?);
                    for stream in listener.incoming() {
                        let stream = stream?;
                        let reader = BufReader::new(stream.try_clone()?);
                        if let Err(e) = serve(reader, BufWriter::new(stream), model.clone(), Some(&nli)) {
                            log::warn!("connection closed: {e}");
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
