use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use laura::config::RunConfig;
use laura::corpus::{self, CorpusIndex};
use laura::distributions::{distribution_report, KlDirection};
use laura::laura_data::{
    self, dataset_statistics, emit_training_instances, LabeledQuery, Stage1Utility, TrainingInstance,
    UtilityScore,
};
use laura::listwise_loss::{
    finite_difference_gradient, listwise_loss_gradient, positive_first_rate, train_toy_scorer,
    ScoredList,
};
use laura::metrics::{ndcg_at_k, precision_at_k, RelevanceJudgments};
use laura::pipeline::{
    run_oracle, run_queries, run_vanilla, NamedGenerator, OracleRunRecord, PipelineConfig, Query,
    VanillaRunRecord,
};
use laura::services::http::{HttpEndpoint, HttpGenerator, HttpReranker, HttpRetriever};
use laura::services::server::{serve, MockServices};
use laura::stats::{peer, significance_table, RankGroups};
use laura::Error;

#[derive(Parser)]
#[command(name = "laura", version, about = "Multilingual RAG bias analysis and training-data construction")]
struct Cli {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker pool width. Defaults to the logical CPU count.
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split raw documents into retrieval chunks.
    Chunk {
        /// RawDocument JSONL input.
        #[arg(long)]
        input: PathBuf,
        /// DocumentChunk JSONL output.
        #[arg(long)]
        output: PathBuf,
    },
    /// Pooled retrieve -> rerank -> generate over a query file.
    RunVanilla {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-language rerank with best-group scoring over a query file.
    RunOracle {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a run: per-query and per-language metric tables.
    Eval {
        /// Run record JSONL (vanilla or oracle).
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = ["vanilla", "oracle"])]
        mode: String,
        /// RelevanceJudgments JSONL; enables rank metrics.
        #[arg(long)]
        judgments: Option<PathBuf>,
        /// Chunk JSONL; with judgments, enables PEER.
        #[arg(long)]
        chunks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Language-distribution matrices and JS/KL/entropy tables.
    Distributions {
        /// VanillaRunRecord JSONL.
        #[arg(long)]
        vanilla: PathBuf,
        /// OracleRunRecord JSONL.
        #[arg(long)]
        oracle: PathBuf,
        /// Report KL(oracle || vanilla) instead of KL(vanilla || oracle).
        #[arg(long)]
        reverse_kl: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Construct listwise training data.
    BuildLaura {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        chunks: PathBuf,
        #[arg(long, default_value = "full", value_parser = ["full", "stage1-only", "self-training"])]
        mode: String,
        #[arg(long)]
        theta: Option<f64>,
        #[arg(long)]
        k_negatives: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-1 utility estimated per document instead of per group.
        #[arg(long)]
        per_document_stage1: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-language paired t-test table between two per-query score TSVs.
    Significance {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treatment: PathBuf,
        /// Keep only rows with this generator column value.
        #[arg(long)]
        generator: Option<String>,
        /// Output TSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient verification and optional toy training on instance JSONL.
    LossCheck {
        #[arg(long)]
        instances: PathBuf,
        #[arg(long)]
        train: bool,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        learning_rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Host the deterministic mock services over the wire protocol.
    MockServe {
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long)]
        fixtures: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // 64 = EX_USAGE for malformed invocations; clap also routes
            // --help/--version here, which are not usage errors.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(64),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> laura::Result<RunConfig> {
    match path {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    }
}

struct Services {
    retriever: HttpRetriever,
    reranker: HttpReranker,
    generators: Vec<(String, HttpGenerator)>,
}

impl Services {
    fn from_config(config: &RunConfig) -> laura::Result<Self> {
        let retriever = config
            .endpoints
            .retriever
            .as_ref()
            .ok_or_else(|| Error::Config("endpoints.retriever is not configured".into()))?;
        let reranker = config
            .endpoints
            .reranker
            .as_ref()
            .ok_or_else(|| Error::Config("endpoints.reranker is not configured".into()))?;
        if config.endpoints.generator.is_empty() {
            return Err(Error::Config("no endpoints.generator.<id> configured".into()));
        }
        let mut generators = Vec::new();
        for (id, spec) in &config.endpoints.generator {
            generators.push((
                id.clone(),
                HttpGenerator(HttpEndpoint::new(spec.to_endpoint_config())?),
            ));
        }
        Ok(Self {
            retriever: HttpRetriever(HttpEndpoint::new(retriever.to_endpoint_config())?),
            reranker: HttpReranker(HttpEndpoint::new(reranker.to_endpoint_config())?),
            generators,
        })
    }

    fn named_generators(&self) -> Vec<NamedGenerator<'_>> {
        self.generators
            .iter()
            .map(|(id, g)| NamedGenerator { id: id.clone(), service: g })
            .collect()
    }
}

fn run_dir(config: &RunConfig, out: Option<PathBuf>) -> laura::Result<PathBuf> {
    let dir = out.unwrap_or_else(|| {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from(format!("runs/{}-{stamp}", config.config_hash()))
    });
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(dir)
}

fn parallelism_width(flag: Option<usize>) -> usize {
    flag.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    })
}

fn manifest_exit(failed: usize) -> ExitCode {
    if failed > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> laura::Result<ExitCode> {
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Chunk { input, output } => {
            let docs = corpus::read_documents_jsonl(&input)?;
            for doc in &docs {
                if !config.language_set.contains(&doc.language) {
                    return Err(Error::InvalidDocument {
                        doc_id: doc.doc_id.clone(),
                        reason: format!("language {} not in configured language set", doc.language),
                    });
                }
            }
            let chunks = corpus::chunk_corpus(&docs, &config.char_segmented_languages)?;
            corpus::write_jsonl(&output, &chunks)?;
            println!("chunked {} documents into {} chunks", docs.len(), chunks.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::RunVanilla { queries, chunks, out } => {
            let dir = run_dir(&config, out)?;
            let queries = corpus::read_jsonl::<Query>(&queries)?;
            let index = CorpusIndex::load_jsonl(&chunks)?;
            let services = Services::from_config(&config)?;
            let generators = services.named_generators();
            let pipeline_config = PipelineConfig {
                retrieval_top_k: config.retrieval_top_k,
                rerank_top_k: config.rerank_top_k,
                prompt_template: config.prompt_template.clone(),
            };
            let manifest = run_queries(
                &queries,
                &dir.join("vanilla.jsonl"),
                &dir.join("manifest.json"),
                &config.config_hash(),
                config.seed,
                parallelism_width(cli.parallelism),
                |q| {
                    run_vanilla(q, &services.retriever, &services.reranker, &generators, &index, &pipeline_config)
                },
            )?;
            println!(
                "vanilla run: {}/{} queries completed ({} failed)",
                manifest.completed,
                manifest.total_queries,
                manifest.failed.len()
            );
            Ok(manifest_exit(manifest.failed.len()))
        }
        Command::RunOracle { queries, chunks, out } => {
            let dir = run_dir(&config, out)?;
            let queries = corpus::read_jsonl::<Query>(&queries)?;
            let index = CorpusIndex::load_jsonl(&chunks)?;
            let services = Services::from_config(&config)?;
            let generators = services.named_generators();
            let pipeline_config = PipelineConfig {
                retrieval_top_k: config.retrieval_top_k,
                rerank_top_k: config.rerank_top_k,
                prompt_template: config.prompt_template.clone(),
            };
            let manifest = run_queries(
                &queries,
                &dir.join("oracle.jsonl"),
                &dir.join("manifest.json"),
                &config.config_hash(),
                config.seed,
                parallelism_width(cli.parallelism),
                |q| {
                    run_oracle(q, &services.retriever, &services.reranker, &generators, &index, &pipeline_config)
                },
            )?;
            println!(
                "oracle run: {}/{} queries completed ({} failed)",
                manifest.completed,
                manifest.total_queries,
                manifest.failed.len()
            );
            Ok(manifest_exit(manifest.failed.len()))
        }
        Command::Eval { run, mode, judgments, chunks, out } => {
            let dir = run_dir(&config, out)?;
            let judgments = judgments
                .map(|p| corpus::read_jsonl::<RelevanceJudgments>(&p))
                .transpose()?
                .map(|list| {
                    list.into_iter()
                        .map(|j| (j.query_id.clone(), j))
                        .collect::<BTreeMap<_, _>>()
                });
            let index = chunks.map(|p| CorpusIndex::load_jsonl(&p)).transpose()?;
            match mode.as_str() {
                "vanilla" => {
                    let records = corpus::read_jsonl::<VanillaRunRecord>(&run)?;
                    eval_vanilla(&records, judgments.as_ref(), index.as_ref(), &config, &dir)?;
                }
                "oracle" => {
                    let records = corpus::read_jsonl::<OracleRunRecord>(&run)?;
                    eval_oracle(&records, &dir)?;
                }
                _ => unreachable!("clap value_parser"),
            }
            println!("eval tables written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Distributions { vanilla, oracle, reverse_kl, out } => {
            let dir = run_dir(&config, out)?;
            let vanilla_records = corpus::read_jsonl::<VanillaRunRecord>(&vanilla)?;
            let oracle_records = corpus::read_jsonl::<OracleRunRecord>(&oracle)?;
            let direction = if reverse_kl {
                KlDirection::OracleToVanilla
            } else {
                KlDirection::VanillaToOracle
            };
            let report = distribution_report(
                &vanilla_records,
                &oracle_records,
                &config.language_set,
                direction,
            )?;
            write_text(&dir.join("matrix_vanilla.tsv"), &report.matrix_vanilla.to_tsv())?;
            write_text(&dir.join("matrix_oracle.tsv"), &report.matrix_oracle.to_tsv())?;
            let mut table = String::from("query_language\tjs\tkl\tentropy\n");
            for row in &report.per_query_language {
                table.push_str(&format!(
                    "{}\t{:.10}\t{:.10}\t{:.10}\n",
                    row.query_language, row.js, row.kl, row.entropy
                ));
            }
            table.push_str(&format!(
                "mean\t{:.10}\t{:.10}\t{:.10}\n",
                report.means.0, report.means.1, report.means.2
            ));
            write_text(&dir.join("divergences.tsv"), &table)?;
            println!("distribution tables written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::BuildLaura {
            queries,
            chunks,
            mode,
            theta,
            k_negatives,
            seed,
            per_document_stage1,
            out,
        } => {
            let dir = run_dir(&config, out)?;
            let theta = theta.unwrap_or(config.theta);
            let k = k_negatives.unwrap_or(config.k_negatives);
            let seed = seed.unwrap_or(config.seed);
            let queries = corpus::read_jsonl::<Query>(&queries)?;
            let index = CorpusIndex::load_jsonl(&chunks)?;
            let services = Services::from_config(&config)?;
            let generators = services.named_generators();
            build_laura(
                &queries,
                &index,
                &services,
                &generators,
                &config,
                &mode,
                theta,
                k,
                seed,
                per_document_stage1,
                &dir,
            )?;
            println!("training data written to {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Significance { baseline, treatment, generator, out } => {
            let baseline = read_score_tsv(&baseline, generator.as_deref())?;
            let treatment = read_score_tsv(&treatment, generator.as_deref())?;
            let rows = significance_table(&baseline, &treatment)?;
            let mut table =
                String::from("language\tn\tbaseline_mean\ttreatment_mean\tdelta_pct\tp\tstars\n");
            for row in &rows {
                table.push_str(&format!(
                    "{}\t{}\t{:.6}\t{:.6}\t{:+.1}\t{:.3e}\t{}\n",
                    row.language, row.n, row.baseline_mean, row.treatment_mean, row.delta_pct,
                    row.p, row.stars
                ));
            }
            // rows includes the Overall row; per-language count excludes it.
            let languages = rows.len().saturating_sub(1).max(1);
            table.push_str(&format!(
                "# bonferroni: alpha 0.05 over {languages} languages -> per-test threshold {:.3e}\n",
                0.05 / languages as f64
            ));
            match out {
                Some(path) => write_text(&path, &table)?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::LossCheck { instances, train, epochs, learning_rate, out } => {
            let instances = corpus::read_jsonl::<TrainingInstance>(&instances)?;
            if instances.is_empty() {
                return Err(Error::Precondition("no training instances in input".into()));
            }
            let max_rel_error = gradient_check(&instances, config.seed);
            let mut report = serde_json::json!({
                "instances": instances.len(),
                "max_gradient_rel_error": max_rel_error,
                "gradient_ok": max_rel_error <= 1e-6,
            });
            if train {
                let trained = train_toy_scorer(&instances, epochs, learning_rate, config.seed)?;
                report["loss_curve"] = serde_json::json!(trained.loss_curve);
                report["positive_first_rate"] =
                    serde_json::json!(positive_first_rate(&trained.scorer, &instances));
            }
            let rendered = serde_json::to_string_pretty(&report).expect("serializable report");
            match out {
                Some(path) => write_text(&path, &rendered)?,
                None => println!("{rendered}"),
            }
            if max_rel_error > 1e-6 {
                return Err(Error::Domain(format!(
                    "gradient check failed: max relative error {max_rel_error:.3e}"
                )));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MockServe { port, fixtures } => {
            let services = MockServices::from_fixtures(&fixtures)?;
            serve(services, port)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn write_text(path: &Path, content: &str) -> laura::Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path.display().to_string(), e))
}

fn eval_vanilla(
    records: &[VanillaRunRecord],
    judgments: Option<&BTreeMap<String, RelevanceJudgments>>,
    index: Option<&CorpusIndex>,
    config: &RunConfig,
    dir: &Path,
) -> laura::Result<()> {
    let k = config.rerank_top_k;
    let mut per_query = String::from("query_id\tlanguage\tgenerator\tscore\tprecision_at_k\tndcg_at_k\n");
    let mut by_language: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut rank_by_language: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut rank_groups: Vec<RankGroups> = Vec::new();

    for record in records {
        let judgment = judgments.and_then(|m| m.get(&record.query_id));
        let (precision, ndcg) = match judgment {
            Some(j) if !j.relevant_chunk_ids.is_empty() => {
                let p = precision_at_k(&record.reranked, j, k);
                let n = ndcg_at_k(&record.reranked, j, k);
                (Some(p), n)
            }
            Some(_) => {
                log::warn!("query {}: empty judgment set, rank metrics skipped", record.query_id);
                (None, None)
            }
            None => (None, None),
        };
        if let (Some(p), Some(n)) = (precision, ndcg) {
            let slot = rank_by_language.entry(record.language.clone()).or_default();
            slot.0.push(p);
            slot.1.push(n);
        }
        if let (Some(j), Some(index)) = (judgment, index) {
            // Ranks of positive documents in the final list, by language.
            let mut groups: BTreeMap<String, Vec<u32>> = BTreeMap::new();
            for (i, entry) in record.reranked.entries.iter().enumerate() {
                if j.relevant_chunk_ids.contains(&entry.chunk_id) {
                    if let Some(chunk) = index.get(&entry.chunk_id) {
                        groups.entry(chunk.language.clone()).or_default().push(i as u32 + 1);
                    }
                }
            }
            if !groups.is_empty() {
                rank_groups.push(RankGroups { query_id: record.query_id.clone(), groups });
            }
        }
        for (generator_id, answer) in &record.answers {
            per_query.push_str(&format!(
                "{}\t{}\t{}\t{:.10}\t{}\t{}\n",
                record.query_id,
                record.language,
                generator_id,
                answer.score,
                precision.map(|v| format!("{v:.10}")).unwrap_or_default(),
                ndcg.map(|v| format!("{v:.10}")).unwrap_or_default(),
            ));
            by_language
                .entry((record.language.clone(), generator_id.clone()))
                .or_default()
                .push(answer.score);
        }
    }
    write_text(&dir.join("per_query.tsv"), &per_query)?;

    let mut per_language =
        String::from("language\tgenerator\tn\tmean_score\tmean_precision_at_k\tmean_ndcg_at_k\n");
    for ((language, generator_id), scores) in &by_language {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let rank = rank_by_language.get(language);
        let mean_of = |v: &Vec<f64>| {
            if v.is_empty() {
                String::new()
            } else {
                format!("{:.10}", v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        per_language.push_str(&format!(
            "{language}\t{generator_id}\t{}\t{mean:.10}\t{}\t{}\n",
            scores.len(),
            rank.map(|(p, _)| mean_of(p)).unwrap_or_default(),
            rank.map(|(_, n)| mean_of(n)).unwrap_or_default(),
        ));
    }
    write_text(&dir.join("per_language.tsv"), &per_language)?;

    let peer_summary = if rank_groups.is_empty() {
        serde_json::json!(null)
    } else {
        match peer(&rank_groups) {
            Ok(result) => serde_json::json!(result),
            Err(Error::NotApplicable(reason)) => serde_json::json!({ "not_applicable": reason }),
            Err(e) => return Err(e),
        }
    };
    write_text(
        &dir.join("summary.json"),
        &serde_json::to_string_pretty(&serde_json::json!({ "peer": peer_summary }))
            .expect("serializable summary"),
    )?;
    Ok(())
}

fn eval_oracle(records: &[OracleRunRecord], dir: &Path) -> laura::Result<()> {
    let mut per_query = String::from("query_id\tlanguage\tbest_score\tbest_languages\n");
    let mut by_language: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for record in records {
        per_query.push_str(&format!(
            "{}\t{}\t{:.10}\t{}\n",
            record.query_id,
            record.language,
            record.best_score,
            record.best_languages.iter().cloned().collect::<Vec<_>>().join(","),
        ));
        by_language.entry(record.language.clone()).or_default().push(record.best_score);
    }
    write_text(&dir.join("per_query.tsv"), &per_query)?;
    let mut per_language = String::from("language\tn\tmean_best_score\n");
    for (language, scores) in &by_language {
        per_language.push_str(&format!(
            "{language}\t{}\t{:.10}\n",
            scores.len(),
            scores.iter().sum::<f64>() / scores.len() as f64
        ));
    }
    write_text(&dir.join("per_language.tsv"), &per_language)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_laura(
    queries: &[Query],
    index: &CorpusIndex,
    services: &Services,
    generators: &[NamedGenerator],
    config: &RunConfig,
    mode: &str,
    theta: f64,
    k: usize,
    seed: u64,
    per_document_stage1: bool,
    dir: &Path,
) -> laura::Result<()> {
    use laura::services::{rerank, RankCandidate, Retriever};

    let stage1_mode = if per_document_stage1 {
        Stage1Utility::PerDocument
    } else {
        Stage1Utility::GroupContext
    };

    let mut labeled_queries: Vec<LabeledQuery> = Vec::new();
    let mut utilities: Vec<(String, Vec<UtilityScore>)> = Vec::new();
    let mut instances: Vec<TrainingInstance> = Vec::new();
    let mut dropped: Vec<(String, String)> = Vec::new();

    for query in queries {
        let retrieved = services
            .retriever
            .retrieve(&query.text, config.laura_retrieval_top_k)?;
        if retrieved.is_empty() {
            dropped.push((query.query_id.clone(), "empty retrieval".into()));
            continue;
        }
        let labeled = match mode {
            "self-training" => {
                let candidates: Vec<RankCandidate> = retrieved
                    .iter()
                    .filter_map(|e| index.get(&e.chunk_id))
                    .map(|c| RankCandidate {
                        chunk_id: c.chunk_id.clone(),
                        rendered: laura::corpus::render_chunk_text(c),
                    })
                    .collect();
                let mut reranked = rerank(&services.reranker, &query.text, &candidates)?;
                reranked.truncate(config.rerank_top_k);
                laura_data::self_training_label(&query.query_id, &reranked, &retrieved)
            }
            "stage1-only" | "full" => {
                let selected = laura_data::stage1_select(
                    query,
                    &retrieved,
                    &services.reranker,
                    generators,
                    index,
                    stage1_mode,
                );
                match selected {
                    Ok(set) => {
                        if mode == "stage1-only" {
                            Ok(laura_data::stage1_only_label(
                                &query.query_id,
                                &set.d_balanced,
                                &retrieved,
                            ))
                        } else {
                            laura_data::stage2_filter(
                                query,
                                &set.d_balanced,
                                &retrieved,
                                generators,
                                theta,
                                index,
                            )
                            .map(|(labeled, scores)| {
                                utilities.push((query.query_id.clone(), scores));
                                labeled
                            })
                        }
                    }
                    Err(e) => Err(e),
                }
            }
            _ => unreachable!("clap value_parser"),
        };
        let labeled = match labeled {
            Ok(labeled) => labeled,
            Err(Error::NotApplicable(reason)) => {
                dropped.push((query.query_id.clone(), reason));
                continue;
            }
            Err(e) => return Err(e),
        };
        match emit_training_instances(&labeled, &query.text, k, seed, index) {
            Ok(new_instances) => instances.extend(new_instances),
            Err(Error::NotApplicable(reason)) => {
                dropped.push((query.query_id.clone(), reason));
                labeled_queries.push(labeled);
                continue;
            }
            Err(e) => return Err(e),
        }
        labeled_queries.push(labeled);
    }

    corpus::write_jsonl(&dir.join("labels.jsonl"), &labeled_queries)?;
    let utility_records: Vec<serde_json::Value> = utilities
        .iter()
        .flat_map(|(query_id, scores)| {
            scores.iter().map(move |score| {
                serde_json::json!({
                    "query_id": query_id,
                    "chunk_id": score.chunk_id,
                    "per_generator": score.per_generator,
                    "mean": score.mean,
                })
            })
        })
        .collect();
    corpus::write_jsonl(&dir.join("utilities.jsonl"), &utility_records)?;
    corpus::write_jsonl(&dir.join("instances.jsonl"), &instances)?;

    let statistics = dataset_statistics(&labeled_queries, index);
    write_text(
        &dir.join("statistics.json"),
        &serde_json::to_string_pretty(&statistics).expect("serializable statistics"),
    )?;
    let manifest = serde_json::json!({
        "config_hash": config.config_hash(),
        "mode": mode,
        "theta": theta,
        "k_negatives": k,
        "seed": seed,
        "queries": queries.len(),
        "labeled": labeled_queries.len(),
        "instances": instances.len(),
        "dropped": dropped
            .iter()
            .map(|(id, reason)| serde_json::json!({ "query_id": id, "reason": reason }))
            .collect::<Vec<_>>(),
    });
    write_text(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("serializable manifest"),
    )?;
    Ok(())
}

/// Per-query score map from a TSV with query_id/language/score columns
/// (the eval per_query format).
fn read_score_tsv(
    path: &Path,
    generator: Option<&str>,
) -> laura::Result<BTreeMap<String, (String, f64)>> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = raw.lines().filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Malformed {
            path: path.display().to_string(),
            line: 1,
            reason: "empty file".into(),
        })?
        .split('\t')
        .map(|s| s.to_string())
        .collect::<Vec<_>>();
    let col = |name: &str| header.iter().position(|h| h == name);
    let query_col = col("query_id").ok_or_else(|| Error::Malformed {
        path: path.display().to_string(),
        line: 1,
        reason: "missing query_id column".into(),
    })?;
    let language_col = col("language").ok_or_else(|| Error::Malformed {
        path: path.display().to_string(),
        line: 1,
        reason: "missing language column".into(),
    })?;
    let score_col = col("score").or_else(|| col("best_score")).ok_or_else(|| Error::Malformed {
        path: path.display().to_string(),
        line: 1,
        reason: "missing score column".into(),
    })?;
    let generator_col = col("generator");

    let mut out = BTreeMap::new();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if let (Some(filter), Some(generator_col)) = (generator, generator_col) {
            if fields.get(generator_col) != Some(&filter) {
                continue;
            }
        }
        let query_id = fields[query_col].to_string();
        if !seen.insert(query_id.clone()) {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: lineno + 2,
                reason: format!(
                    "duplicate query_id {query_id}; use --generator to select one generator's rows"
                ),
            });
        }
        let score: f64 = fields[score_col].parse().map_err(|e| Error::Malformed {
            path: path.display().to_string(),
            line: lineno + 2,
            reason: format!("bad score: {e}"),
        })?;
        out.insert(query_id, (fields[language_col].to_string(), score));
    }
    Ok(out)
}

/// Max relative error between analytic and central-finite-difference
/// gradients on score lists shaped like the input instances.
fn gradient_check(instances: &[TrainingInstance], seed: u64) -> f64 {
    let mut state = seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(7);
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 10.0 - 5.0
    };
    let mut max_rel = 0.0f64;
    for instance in instances.iter().take(100) {
        let n = instance.negatives.len() + 1;
        let scores: Vec<f64> = (0..n).map(|_| next()).collect();
        let list = ScoredList { scores, positive_index: 0 };
        let analytic = listwise_loss_gradient(&list);
        let numeric = finite_difference_gradient(&list, 1e-5);
        // relative to the gradient's scale, not to individual near-zero entries
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        for (a, b) in analytic.iter().zip(&numeric) {
            max_rel = max_rel.max((a - b).abs() / scale);
        }
    }
    max_rel
}
