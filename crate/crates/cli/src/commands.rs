//! Subcommand implementations. Each stage reads prior-stage artifacts from
//! the output directory and writes its own `<out>/<stage>/` directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use posforge::analyze::{self, EvidenceTriple};
use posforge::clients::{self, ChatClient, EmbeddingClient, RerankClient, ServiceEndpoint};
use posforge::corpus::{self, BinnedDocument, CorpusRecord, Document, Position, Segmentation, Span, Stratum};
use posforge::eval::{self, Bucket, EvidenceRecord, Qrels, Run};
use posforge::jsonl::{self, JsonlAppender};
use posforge::parallel::ordered_map;
use posforge::prompts::PromptSet;
use posforge::querygen::{self, DocOutcome, DocStatus, GenerationReport, GenerationSettings, PersonaPool, QueryCandidate};
use posforge::sample::{self, RatioConfig, RetainedPool, TrainingConfigSet};
use posforge::verify::{self, AuditJudgments, AuditOutcome, ConsensusVerdict, FUNNEL_THRESHOLDS};
use posforge::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Loaded, PipelineConfig};
use crate::stage::{Opened, Stage};
use crate::{BucketArgs, Cli, Command, EvalArgs, GlobalArgs, ReversalArgs};

const BIN: &str = "bin";
const GENERATE: &str = "generate";
const VERIFY: &str = "verify";
const SAMPLE: &str = "sample";

/// Resolved configuration shared by all subcommands.
struct Ctx {
    loaded: Loaded,
    cfg: PipelineConfig,
    out: PathBuf,
    force: bool,
    ratio: Option<String>,
}

impl Ctx {
    fn new(global: &GlobalArgs) -> Result<Self> {
        let loaded = Loaded::load(global.config.as_deref())?;
        let mut cfg = loaded.config.clone();
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        if let Some(delta) = global.delta {
            cfg.delta = delta;
        }
        if let Some(k) = global.k {
            cfg.persona_k = k;
        }
        cfg.validate()?;
        let out = match &global.out {
            Some(p) => p.clone(),
            None => loaded.resolve(&cfg.output_dir),
        };
        Ok(Self {
            loaded,
            cfg,
            out,
            force: global.force,
            ratio: global.ratio.clone(),
        })
    }

    /// Stage config recorded in the manifest: the effective pipeline config
    /// plus command-specific arguments.
    fn record(&self, args: Value) -> Value {
        json!({ "pipeline": self.cfg, "args": args })
    }

    fn open(&self, name: &'static str) -> Result<Option<Stage>> {
        match Stage::open(&self.out, name, self.force)? {
            Opened::Run(stage) => Ok(Some(stage)),
            Opened::AlreadyDone(dir) => {
                info!("{name}: already complete in {}, use --force to recompute", dir.display());
                Ok(None)
            }
        }
    }

    /// Output of a completed earlier stage.
    fn artifact(&self, stage: &str, file: &str) -> Result<PathBuf> {
        let dir = self.out.join(stage);
        if !dir.join(crate::stage::SUCCESS).exists() {
            return Err(Error::Data(format!("stage `{stage}` has not completed in {}", self.out.display())));
        }
        Ok(dir.join(file))
    }

    fn endpoint(&self, ep: &ServiceEndpoint) -> ServiceEndpoint {
        let mut ep = ep.clone();
        ep.apply_env_overrides();
        if ep.cache && ep.cache_dir.is_none() {
            ep.cache_dir = Some(self.out.join(".cache").join(&ep.id));
        } else if let Some(dir) = &ep.cache_dir {
            ep.cache_dir = Some(self.loaded.resolve(dir));
        }
        ep
    }

    fn chat(&self) -> Result<Arc<dyn ChatClient>> {
        let ep = self.cfg.endpoints.chat.as_ref().ok_or_else(|| missing_endpoint("chat"))?;
        Ok(clients::chat_client(&self.endpoint(ep))?)
    }

    fn embed(&self) -> Result<(Arc<dyn EmbeddingClient>, String)> {
        let ep = self.cfg.endpoints.embed.as_ref().ok_or_else(|| missing_endpoint("embed"))?;
        Ok((clients::embedding_client(&self.endpoint(ep))?, ep.id.clone()))
    }

    fn rerankers(&self) -> Result<Vec<Arc<dyn RerankClient>>> {
        if self.cfg.endpoints.rerankers.is_empty() {
            return Err(Error::Validation("verify needs at least one reranker endpoint".into()));
        }
        let mut ids = HashSet::new();
        let mut out = Vec::new();
        for ep in &self.cfg.endpoints.rerankers {
            if !ids.insert(ep.id.clone()) {
                return Err(Error::Validation(format!("duplicate reranker id `{}`", ep.id)));
            }
            out.push(clients::rerank_client(&self.endpoint(ep))?);
        }
        Ok(out)
    }

    fn prompts(&self) -> Result<PromptSet> {
        match &self.cfg.prompts_dir {
            Some(dir) => Ok(PromptSet::with_overrides(&self.loaded.resolve(dir))?),
            None => Ok(PromptSet::default()),
        }
    }

    fn ratios(&self) -> Result<Vec<RatioConfig>> {
        match &self.ratio {
            Some(r) => Ok(vec![r.parse()?]),
            None => Ok(RatioConfig::canonical().to_vec()),
        }
    }

    fn buckets(&self, spec: Option<&str>) -> Result<Vec<Bucket>> {
        let spec = spec.unwrap_or(&self.cfg.bucket_edges).trim();
        if spec.starts_with('[') || spec.starts_with('(') {
            Ok(eval::parse_buckets(spec)?)
        } else {
            Ok(eval::bucket_preset(spec)?)
        }
    }
}

fn missing_endpoint(what: &str) -> Error {
    Error::Validation(format!("config has no `endpoints.{what}`"))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_qrels(paths: &[PathBuf]) -> Result<Qrels> {
    let mut merged = Qrels::new();
    for p in paths {
        for (qid, judged) in eval::parse_qrels(&read_text(p)?)? {
            merged.entry(qid).or_default().extend(judged);
        }
    }
    Ok(merged)
}

fn read_run(path: &Path) -> Result<Run> {
    Ok(eval::parse_run(&read_text(path)?)?)
}

fn load_documents(path: &Path) -> Result<Vec<Document>> {
    let docs: Vec<BinnedDocument> = jsonl::read_jsonl(path)?;
    Ok(docs.into_iter().map(|b| b.doc).collect())
}

/// Plain `{doc_id, text}` records, for inputs not produced by `bin`.
fn load_records(path: &Path) -> Result<Vec<Document>> {
    let records: Vec<CorpusRecord> = jsonl::read_jsonl(path)?;
    Ok(records.into_iter().map(|r| Document::new(r.doc_id, r.text)).collect())
}

fn doc_map(docs: Vec<Document>) -> HashMap<String, Document> {
    docs.into_iter().map(|d| (d.doc_id.clone(), d)).collect()
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Bin { segments } => bin(&ctx, segments),
        Command::Generate => generate(&ctx),
        Command::Verify => verify_stage(&ctx),
        Command::Audit { limit } => audit(&ctx, limit),
        Command::FunnelReport => funnel_report(&ctx),
        Command::Sample => sample_stage(&ctx),
        Command::ExportManifest => export_manifest(&ctx),
        Command::Eval(args) => eval_stage(&ctx, &args),
        Command::BucketCurve(args) => bucket_curve(&ctx, &args),
        Command::EvidenceMove { triples } => evidence_move(&ctx, &triples),
        Command::SegmentProfile { docs, limit } => segment_profile(&ctx, docs.as_deref(), limit),
        Command::Reverse { corpus } => reverse(&ctx, corpus.as_deref()),
        Command::ReversalReport(args) => reversal_report(&ctx, &args),
    }
}

fn bin(ctx: &Ctx, segments: Option<usize>) -> Result<()> {
    let segments = segments.unwrap_or(ctx.cfg.segments);
    if !matches!(segments, 3 | 5 | 10) {
        return Err(Error::Validation(format!("segments must be 3, 5 or 10, got {segments}")));
    }
    let corpus_path = ctx.loaded.required(&ctx.cfg.corpus, "corpus")?;
    let Some(mut stage) = ctx.open(BIN)? else { return Ok(()) };
    stage.input(&corpus_path)?;
    let records: Vec<CorpusRecord> = jsonl::read_jsonl(&corpus_path)?;
    let (docs, stats) = corpus::bin_corpus(records, Some(segments))?;
    jsonl::write_jsonl(&stage.path("corpus.jsonl"), &docs)?;
    jsonl::write_json(&stage.path("stats.json"), &stats)?;
    info!("bin: {} of {} documents binned", stats.binned, stats.total);
    stage.finish(&ctx.record(json!({ "segments": segments })))?;
    Ok(())
}

/// Rebuilds generation state from a previous partial run: completed
/// outcomes, and the candidates of those documents only.
fn resume_generation(stage: &Stage) -> Result<(Vec<DocOutcome>, u64, u64)> {
    let outcomes_path = stage.path("outcomes.jsonl");
    let candidates_path = stage.path("candidates.jsonl");
    let (outcomes, outcome_bytes) = if outcomes_path.exists() {
        jsonl::read_jsonl_prefix::<DocOutcome>(&outcomes_path)?
    } else {
        (Vec::new(), 0)
    };
    let done: HashSet<&str> = outcomes.iter().map(|o| o.doc_id.as_str()).collect();
    let candidates: Vec<QueryCandidate> = if candidates_path.exists() {
        jsonl::read_jsonl_prefix(&candidates_path)?.0
    } else {
        Vec::new()
    };
    let kept: Vec<&QueryCandidate> = candidates.iter().filter(|c| done.contains(c.doc_id.as_str())).collect();
    jsonl::write_jsonl(&candidates_path, kept.iter().copied())?;
    let candidate_bytes = std::fs::metadata(&candidates_path)
        .map_err(|e| Error::Data(format!("{}: {e}", candidates_path.display())))?
        .len();
    Ok((outcomes, outcome_bytes, candidate_bytes))
}

fn generation_report(outcomes: &[DocOutcome]) -> GenerationReport {
    let mut r = GenerationReport::default();
    for o in outcomes {
        r.documents += 1;
        if matches!(o.status, DocStatus::ConfigParseFailure { .. }) {
            r.excluded_config_parse += 1;
        }
        r.candidates_generated += o.candidate_count;
        r.candidate_parse_failures += o.failures.len();
    }
    r
}

fn generate(ctx: &Ctx) -> Result<()> {
    let corpus_path = ctx.artifact(BIN, "corpus.jsonl")?;
    let personas_path = ctx.loaded.required(&ctx.cfg.personas, "personas")?;
    let chat = ctx.chat()?;
    let (embed, embed_id) = ctx.embed()?;
    let prompts = ctx.prompts()?;
    let Some(mut stage) = ctx.open(GENERATE)? else { return Ok(()) };
    stage.input(&corpus_path)?;
    stage.input(&personas_path)?;

    let personas = PersonaPool::read_personas(&personas_path)?;
    if personas.is_empty() {
        return Err(Error::Data(format!("no personas in {}", personas_path.display())));
    }
    let cache = ctx.out.join(".cache");
    std::fs::create_dir_all(&cache).map_err(|e| Error::Data(format!("{}: {e}", cache.display())))?;
    let sidecar = cache.join(format!("personas-{embed_id}.jsonl"));
    let pool = PersonaPool::embed(personas, embed.as_ref(), Some(&sidecar))?;
    let settings = GenerationSettings {
        persona_k: ctx.cfg.persona_k,
        truncate_chars: ctx.cfg.persona_truncate_chars,
        workers: ctx.cfg.workers,
    };

    let docs = load_documents(&corpus_path)?;
    let (mut outcomes, outcome_bytes, candidate_bytes) = resume_generation(&stage)?;
    for (o, d) in outcomes.iter().zip(&docs) {
        if o.doc_id != d.doc_id {
            return Err(Error::Data(format!(
                "partial generate output does not match the corpus ({} vs {}); rerun with --force",
                o.doc_id, d.doc_id
            )));
        }
    }
    if !outcomes.is_empty() {
        info!("generate: resuming after {} documents", outcomes.len());
    }
    let mut outcome_log = JsonlAppender::open(&stage.path("outcomes.jsonl"), outcome_bytes)?;
    let mut candidate_log = JsonlAppender::open(&stage.path("candidates.jsonl"), candidate_bytes)?;
    let remaining = docs.get(outcomes.len()..).unwrap_or(&[]);
    for chunk in remaining.chunks(ctx.cfg.chunk_size) {
        let results = ordered_map(chunk, settings.workers, |d| {
            querygen::generate_for_document(d, &pool, embed.as_ref(), chat.as_ref(), &prompts, &settings)
        });
        for result in results {
            let outcome = result?;
            candidate_log.append(&outcome.candidates)?;
            outcome_log.append([&outcome])?;
            outcomes.push(outcome);
        }
        info!("generate: {}/{} documents", outcomes.len(), docs.len());
    }
    let report = generation_report(&outcomes);
    jsonl::write_json(&stage.path("stats.json"), &report)?;
    stage.finish(&ctx.record(json!({})))?;
    Ok(())
}

fn verify_stage(ctx: &Ctx) -> Result<()> {
    let candidates_path = ctx.artifact(GENERATE, "candidates.jsonl")?;
    let corpus_path = ctx.artifact(BIN, "corpus.jsonl")?;
    let rerankers = ctx.rerankers()?;
    let Some(mut stage) = ctx.open(VERIFY)? else { return Ok(()) };
    stage.input(&candidates_path)?;
    stage.input(&corpus_path)?;
    let candidates: Vec<QueryCandidate> = jsonl::read_jsonl(&candidates_path)?;
    let docs = doc_map(load_documents(&corpus_path)?);
    let panel: Vec<&dyn RerankClient> = rerankers.iter().map(|r| r.as_ref()).collect();

    let verdicts_path = stage.path("verdicts.jsonl");
    let (mut verdicts, keep) = if verdicts_path.exists() {
        jsonl::read_jsonl_prefix::<ConsensusVerdict>(&verdicts_path)?
    } else {
        (Vec::new(), 0)
    };
    for (v, c) in verdicts.iter().zip(&candidates) {
        if v.candidate.candidate_id != c.candidate_id {
            return Err(Error::Data("partial verify output does not match the candidates; rerun with --force".into()));
        }
    }
    if verdicts.len() > candidates.len() {
        return Err(Error::Data("partial verify output is longer than the candidate list".into()));
    }
    let mut log = JsonlAppender::open(&verdicts_path, keep)?;
    let remaining = &candidates[verdicts.len()..];
    for chunk in remaining.chunks(ctx.cfg.chunk_size) {
        let batch = verify::verify_candidates(chunk, &docs, &panel, ctx.cfg.delta, ctx.cfg.workers)?;
        log.append(&batch)?;
        verdicts.extend(batch);
        info!("verify: {}/{} candidates", verdicts.len(), candidates.len());
    }
    let (partition, stats) = verify::apply_retention(verdicts, ctx.cfg.delta)?;
    jsonl::write_jsonl(&stage.path("retained.jsonl"), &partition.retained)?;
    jsonl::write_jsonl(&stage.path("rejected.jsonl"), &partition.rejected)?;
    jsonl::write_json(&stage.path("funnel.json"), &stats)?;
    info!("verify: retained {} of {}", partition.retained.len(), stats.generated);
    let ids: Vec<&str> = rerankers.iter().map(|r| r.id()).collect();
    stage.finish(&ctx.record(json!({ "rerankers": ids })))?;
    Ok(())
}

fn funnel_thresholds(delta: f64) -> Vec<f64> {
    let mut t = FUNNEL_THRESHOLDS.to_vec();
    if !t.contains(&delta) {
        t.push(delta);
        t.sort_by(f64::total_cmp);
    }
    t
}

fn funnel_report(ctx: &Ctx) -> Result<()> {
    let verdicts_path = ctx.artifact(VERIFY, "verdicts.jsonl")?;
    let Some(mut stage) = ctx.open("funnel-report")? else { return Ok(()) };
    stage.input(&verdicts_path)?;
    let verdicts: Vec<ConsensusVerdict> = jsonl::read_jsonl(&verdicts_path)?;
    let thresholds = funnel_thresholds(ctx.cfg.delta);
    let stats = verify::verdict_funnel(&verdicts, &thresholds);
    jsonl::write_json(&stage.path("funnel.json"), &stats)?;
    write_text(&stage.path("funnel.txt"), &verify::render_funnel_text(&stats))?;
    stage.finish(&ctx.record(json!({ "thresholds": thresholds })))?;
    Ok(())
}

#[derive(Serialize)]
struct Stratified {
    stratum: String,
    metrics: verify::AuditMetrics,
}

fn audit(ctx: &Ctx, limit: Option<usize>) -> Result<()> {
    let verdicts_path = ctx.artifact(VERIFY, "verdicts.jsonl")?;
    let corpus_path = ctx.artifact(BIN, "corpus.jsonl")?;
    let chat = ctx.chat()?;
    let prompts = ctx.prompts()?;
    let Some(mut stage) = ctx.open("audit")? else { return Ok(()) };
    stage.input(&verdicts_path)?;
    stage.input(&corpus_path)?;
    let docs = doc_map(load_documents(&corpus_path)?);
    let verdicts: Vec<ConsensusVerdict> = jsonl::read_jsonl(&verdicts_path)?;
    let mut targets: Vec<&ConsensusVerdict> = verdicts.iter().filter(|v| v.consensus_margin >= 0.0).collect();
    if let Some(n) = limit {
        targets.truncate(n);
    }

    let log_path = stage.path("judgments.jsonl");
    let (mut outcomes, keep) = if log_path.exists() {
        jsonl::read_jsonl_prefix::<AuditOutcome>(&log_path)?
    } else {
        (Vec::new(), 0)
    };
    outcomes.truncate(targets.len());
    let mut log = JsonlAppender::open(&log_path, keep)?;
    let remaining = &targets[outcomes.len()..];
    for chunk in remaining.chunks(ctx.cfg.chunk_size) {
        let results = ordered_map(chunk, ctx.cfg.workers, |v| {
            let doc = docs.get(&v.candidate.doc_id).ok_or_else(|| verify::VerifyError::MissingDocument {
                doc_id: v.candidate.doc_id.clone(),
                candidate_id: v.candidate.candidate_id.clone(),
            })?;
            verify::audit_candidate(&v.candidate, doc, chat.as_ref(), &prompts.audit, Some(v.consensus_margin))
        });
        for r in results {
            let outcome = r?;
            log.append([&outcome])?;
            outcomes.push(outcome);
        }
    }

    let mut judged: Vec<(AuditJudgments, f64)> = Vec::new();
    let mut parse_failures = 0;
    for o in &outcomes {
        match o {
            AuditOutcome::Judged {
                judgments,
                consensus_margin,
            } => judged.push((judgments.clone(), consensus_margin.unwrap_or(0.0))),
            AuditOutcome::ParseFailure { .. } => parse_failures += 1,
        }
    }
    let all: Vec<AuditJudgments> = judged.iter().map(|(a, _)| a.clone()).collect();
    let retained: Vec<AuditJudgments> = judged
        .iter()
        .filter(|(_, m)| *m >= ctx.cfg.delta)
        .map(|(a, _)| a.clone())
        .collect();
    let strata: Vec<Stratified> = verify::audit_by_margin(&judged, &FUNNEL_THRESHOLDS)
        .into_iter()
        .map(|(stratum, metrics)| Stratified { stratum, metrics })
        .collect();
    let metrics = json!({
        "audited": outcomes.len(),
        "parse_failures": parse_failures,
        "overall": verify::audit_metrics(&all).ok(),
        "retained": verify::audit_metrics(&retained).ok(),
        "delta": ctx.cfg.delta,
        "strata": strata,
    });
    jsonl::write_json(&stage.path("metrics.json"), &metrics)?;
    stage.finish(&ctx.record(json!({ "limit": limit })))?;
    Ok(())
}

fn sample_stage(ctx: &Ctx) -> Result<()> {
    let configs = ctx.ratios()?;
    let verdicts_path = ctx.artifact(VERIFY, "verdicts.jsonl")?;
    let Some(mut stage) = ctx.open(SAMPLE)? else { return Ok(()) };
    stage.input(&verdicts_path)?;
    let verdicts: Vec<ConsensusVerdict> = jsonl::read_jsonl(&verdicts_path)?;
    let (partition, _) = verify::apply_retention(verdicts, ctx.cfg.delta)?;
    let pool = RetainedPool::from_verdicts(&partition.retained)?;
    let budget = sample::compute_budget(&pool)?;
    let counts: Vec<Value> = pool
        .counts()
        .into_iter()
        .map(|((bin, p), n)| json!({ "length_bin": bin, "position": p, "count": n }))
        .collect();
    jsonl::write_json(
        &stage.path("budget.json"),
        &json!({ "budget": budget, "retained": pool.len(), "delta": ctx.cfg.delta, "cells": counts }),
    )?;
    for config in &configs {
        let set = sample::sample_config(&pool, config, budget, ctx.cfg.seed)?;
        info!("sample: {} has {} examples", config.name, set.examples.len());
        jsonl::write_json(&stage.path(&format!("{}.json", config.name)), &set)?;
    }
    let names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    stage.finish(&ctx.record(json!({ "configs": names })))?;
    Ok(())
}

fn export_manifest(ctx: &Ctx) -> Result<()> {
    let configs = ctx.ratios()?;
    let corpus_path = ctx.artifact(BIN, "corpus.jsonl")?;
    let set_paths = configs
        .iter()
        .map(|c| ctx.artifact(SAMPLE, &format!("{}.json", c.name)))
        .collect::<Result<Vec<_>>>()?;
    let Some(mut stage) = ctx.open("export-manifest")? else { return Ok(()) };
    stage.input(&corpus_path)?;
    let texts: HashMap<String, String> = load_documents(&corpus_path)?
        .into_iter()
        .map(|d| (d.doc_id, d.text))
        .collect();
    for (config, path) in configs.iter().zip(&set_paths) {
        stage.input(path)?;
        let set: TrainingConfigSet = jsonl::read_json(path)?;
        sample::export_manifest(&set, &texts, &stage.path(&config.name))?;
    }
    let names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    stage.finish(&ctx.record(json!({ "configs": names })))?;
    Ok(())
}

fn eval_stage(ctx: &Ctx, args: &EvalArgs) -> Result<()> {
    let buckets = match &args.evidence {
        Some(_) => Some(ctx.buckets(None)?),
        None => None,
    };
    let Some(mut stage) = ctx.open("eval")? else { return Ok(()) };
    stage.input(&args.run)?;
    let mut subsets = BTreeMap::new();
    for (p, path) in Position::ALL
        .into_iter()
        .zip([&args.qrels_begin, &args.qrels_middle, &args.qrels_end])
    {
        stage.input(path)?;
        subsets.insert(p, eval::parse_qrels(&read_text(path)?)?);
    }
    let run = read_run(&args.run)?;
    let k = eval::DEFAULT_K;
    let mut result = eval::evaluate_positioned(&run, &subsets, k)?;
    let mut per_query = BTreeMap::new();
    let mut merged = BTreeMap::new();
    for (p, qrels) in &subsets {
        let (scores, _) = eval::per_query_ndcg(&run, qrels, k);
        merged.extend(scores.clone());
        per_query.insert(*p, scores);
    }
    if let (Some(path), Some(buckets)) = (&args.evidence, &buckets) {
        stage.input(path)?;
        let evidence: Vec<EvidenceRecord> = jsonl::read_jsonl(path)?;
        result.buckets = Some(eval::bucket_curve(&merged, &evidence, buckets));
    }
    jsonl::write_json(&stage.path("result.json"), &result)?;
    jsonl::write_json(&stage.path("per_query.json"), &per_query)?;
    write_text(&stage.path("result.txt"), &eval::render_positioned_text(&args.label, &result))?;
    stage.finish(&ctx.record(json!({ "k": k, "label": args.label })))?;
    Ok(())
}

fn bucket_curve(ctx: &Ctx, args: &BucketArgs) -> Result<()> {
    let buckets = ctx.buckets(args.buckets.as_deref())?;
    let Some(mut stage) = ctx.open("bucket-curve")? else { return Ok(()) };
    stage.input(&args.run)?;
    for q in &args.qrels {
        stage.input(q)?;
    }
    stage.input(&args.evidence)?;
    let run = read_run(&args.run)?;
    let qrels = read_qrels(&args.qrels)?;
    let evidence: Vec<EvidenceRecord> = jsonl::read_jsonl(&args.evidence)?;
    let (scores, _) = eval::per_query_ndcg(&run, &qrels, eval::DEFAULT_K);
    let curve = eval::bucket_curve(&scores, &evidence, &buckets);
    let scored: HashSet<&String> = scores.keys().collect();
    let used: Vec<EvidenceRecord> = eval::evidence_by_query(&evidence)
        .into_iter()
        .filter(|(q, _)| scored.contains(q))
        .map(|(_, r)| r.clone())
        .collect();
    let distribution = eval::evidence_start_distribution(&used, ctx.cfg.histogram_bins)?;
    let mut csv = String::from("bucket,queries,ndcg\n");
    for b in &curve.buckets {
        let ndcg = b.ndcg.map(|v| format!("{v:.6}")).unwrap_or_default();
        csv.push_str(&format!("\"{}\",{},{}\n", b.bucket, b.queries, ndcg));
    }
    jsonl::write_json(&stage.path("curve.json"), &curve)?;
    jsonl::write_json(&stage.path("distribution.json"), &distribution)?;
    write_text(&stage.path("curve.csv"), &csv)?;
    let labels: Vec<String> = buckets.iter().map(Bucket::to_string).collect();
    stage.finish(&ctx.record(json!({ "buckets": labels })))?;
    Ok(())
}

fn evidence_move(ctx: &Ctx, triples_path: &Path) -> Result<()> {
    let (embed, _) = ctx.embed()?;
    let Some(mut stage) = ctx.open("evidence-move")? else { return Ok(()) };
    stage.input(triples_path)?;
    let triples: Vec<EvidenceTriple> = jsonl::read_jsonl(triples_path)?;
    let result = analyze::evidence_moving_analysis(&triples, embed.as_ref(), &ctx.cfg.evidence_joiner, ctx.cfg.workers)?;
    jsonl::write_json(&stage.path("result.json"), &result)?;
    write_text(&stage.path("slots.csv"), &result.to_csv())?;
    stage.finish(&ctx.record(json!({})))?;
    Ok(())
}

fn default_docs(ctx: &Ctx, docs: Option<&Path>) -> Result<(PathBuf, bool)> {
    match docs {
        Some(p) => Ok((p.to_path_buf(), false)),
        None => Ok((ctx.artifact(BIN, "corpus.jsonl")?, true)),
    }
}

fn segment_profile(ctx: &Ctx, docs: Option<&Path>, limit: Option<usize>) -> Result<()> {
    let (path, binned) = default_docs(ctx, docs)?;
    let (embed, _) = ctx.embed()?;
    let Some(mut stage) = ctx.open("segment-profile")? else { return Ok(()) };
    stage.input(&path)?;
    let mut docs = if binned { load_documents(&path)? } else { load_records(&path)? };
    if let Some(n) = limit {
        docs.truncate(n);
    }
    let profile = analyze::segment_profile(&docs, embed.as_ref(), ctx.cfg.workers)?;
    jsonl::write_json(&stage.path("profile.json"), &profile)?;
    write_text(&stage.path("profile.csv"), &profile.to_csv())?;
    stage.finish(&ctx.record(json!({ "limit": limit })))?;
    Ok(())
}

fn reverse(ctx: &Ctx, corpus: Option<&Path>) -> Result<()> {
    let (path, binned) = default_docs(ctx, corpus)?;
    let Some(mut stage) = ctx.open("reverse")? else { return Ok(()) };
    stage.input(&path)?;
    let docs = if binned { load_documents(&path)? } else { load_records(&path)? };
    let reversed = docs
        .iter()
        .map(|d| {
            corpus::mirror_reverse(d).map(|r| CorpusRecord {
                doc_id: r.doc_id,
                text: r.text,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    jsonl::write_jsonl(&stage.path("corpus.jsonl"), &reversed)?;
    stage.finish(&ctx.record(json!({})))?;
    Ok(())
}

/// Origin stratum of each query's evidence in its original document.
/// A record without an end offset is treated as a one-character span.
fn origin_strata(evidence: &[EvidenceRecord], qrels: &Qrels) -> Result<BTreeMap<String, Stratum>> {
    let mut strata = BTreeMap::new();
    for (qid, r) in eval::evidence_by_query(evidence) {
        if !qrels.contains_key(&qid) {
            continue;
        }
        let end = r.evidence_end.unwrap_or(r.evidence_start + 1);
        let seg5 = Segmentation {
            doc_id: r.docid.clone(),
            granularity: 5,
            parts: corpus::split_spans(r.doc_len, 5)?,
        };
        strata.insert(qid, corpus::evidence_origin_stratum(Span::new(r.evidence_start, end), &seg5)?);
    }
    Ok(strata)
}

fn reversal_report(ctx: &Ctx, args: &ReversalArgs) -> Result<()> {
    let Some(mut stage) = ctx.open("reversal-report")? else { return Ok(()) };
    stage.input(&args.run_orig)?;
    stage.input(&args.run_rev)?;
    for q in &args.qrels {
        stage.input(q)?;
    }
    stage.input(&args.evidence)?;
    let qrels = read_qrels(&args.qrels)?;
    let evidence: Vec<EvidenceRecord> = jsonl::read_jsonl(&args.evidence)?;
    let strata = origin_strata(&evidence, &qrels)?;
    let k = eval::DEFAULT_K;
    let (orig, _) = eval::per_query_ndcg(&read_run(&args.run_orig)?, &qrels, k);
    let (rev, _) = eval::per_query_ndcg(&read_run(&args.run_rev)?, &qrels, k);
    let result = analyze::reversal_analysis(&orig, &rev, &strata)?;
    let text = format!(
        "{:>8} {:>8} {:>8} {:>8} | {:>8}\n{:>8.3} {:>8.3} {:>8.3} {:>8.3} | {:>+8.3}\n",
        "front", "F->B", "back", "B->F", "delta",
        result.orig_front, result.rev_f_to_b, result.orig_back, result.rev_b_to_f, result.delta_rev
    );
    jsonl::write_json(&stage.path("reversal.json"), &result)?;
    write_text(&stage.path("reversal.txt"), &text)?;
    stage.finish(&ctx.record(json!({ "k": k })))?;
    Ok(())
}
