use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use colberter::corpus::{read_corpus, write_jsonl};
use colberter::encoder::{Encoder, PrecomputedEncoder, ReferenceEncoder, DEFAULT_ENCODER_DIM, DEFAULT_WINDOW};
use colberter::evaluation::{
    add_to_run, compute_metrics, condense_judged_only, dl_random_effects, format_qrels, format_run,
    read_qrels, read_run, MetaInput, MetricCutoffs, RunFile,
};
use colberter::index::{self, build_indices, IndexConfig};
use colberter::reduce::{HeadDims, ReductionHeads};
use colberter::retrieve::{self, default_k_cand, WorkflowKind};
use colberter::synthetic::{generate, training_triples, SyntheticConfig};
use colberter::tokenizer::{corpus_stats, Vocabulary};
use colberter::train::{self, prepare_triple, read_triples, FreezeSet, LossWeights, Params, TrainConfig};
use colberter_service::{run_search, AppState, LoadedIndex, SearchRequest};

#[derive(Parser)]
#[command(name = "colberter", version, about = "Late-interaction retrieval with whole-word reduction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Subword / word / stem counts of a corpus.
    Stats(StatsArgs),
    /// Write freshly initialized reduction heads.
    InitHeads(InitHeadsArgs),
    /// Generate a synthetic collection (vocab, corpus, queries, qrels, triples).
    Synth(SynthArgs),
    /// Encode a corpus and write an index directory.
    BuildIndex(BuildArgs),
    /// Run queries against an index; prints a TREC run or JSON.
    Search(SearchArgs),
    /// Train reduction heads on triples.
    Train(TrainArgs),
    /// nDCG@10 / MRR@10 / Recall@1000 of a run.
    Eval(EvalArgs),
    /// Random-effects meta-analysis; prints forest JSON.
    Meta(MetaArgs),
    /// Serve an index over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    no_stemming: bool,
}

#[derive(Args, Clone, Copy)]
struct DimArgs {
    #[arg(long, default_value_t = DEFAULT_ENCODER_DIM)]
    enc_dim: usize,
    #[arg(long, default_value_t = 32)]
    cls_dim: usize,
    #[arg(long, default_value_t = 8)]
    token_dim: usize,
}

#[derive(Args)]
struct InitHeadsArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    dims: DimArgs,
    #[arg(long)]
    uni: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 1000)]
    docs: usize,
    #[arg(long, default_value_t = 50)]
    queries: usize,
    #[arg(long, default_value_t = 200)]
    triples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    heads: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Exact-match scoring with an inverted index.
    #[arg(long)]
    em: bool,
    /// Require heads with a uni layer (implies --em).
    #[arg(long)]
    uni: bool,
    #[arg(long)]
    uni_nonneg: bool,
    #[arg(long, default_value_t = 0.0)]
    threshold: f32,
    /// Reference encoder seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Precomputed encoder outputs instead of the reference encoder.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    no_stemming: bool,
    /// Do not keep the stems removed by the gate.
    #[arg(long)]
    no_removed: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, conflicts_with = "queries", required_unless_present = "queries")]
    query: Option<String>,
    /// `qid<TAB>text` per line.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value = "DENSE_THEN_TOKEN")]
    workflow: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    k_cand: Option<usize>,
    /// Print the service response JSON (one line per query) instead of a run.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long, default_value = "colberter")]
    tag: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    triples: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out_heads: PathBuf,
    /// α_b,α_cls,α_cs
    #[arg(long, default_value = "1,0.1,0.75")]
    alphas: String,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Head initialization and mini-batch shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// cls, token, gate, gamma or uni; repeatable.
    #[arg(long)]
    freeze: Vec<String>,
    #[arg(long)]
    uni: bool,
    #[arg(long)]
    uni_nonneg: bool,
    #[arg(long)]
    em: bool,
    /// Continue from existing heads instead of a fresh initialization.
    #[arg(long)]
    init_heads: Option<PathBuf>,
    #[command(flatten)]
    dims: DimArgs,
    #[arg(long, default_value_t = 0)]
    encoder_seed: u64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_stemming: bool,
    /// Per-step loss records as JSON lines.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Drop unjudged documents before scoring.
    #[arg(long)]
    condensed: bool,
    #[arg(long, default_value_t = 2)]
    binarization: u32,
}

#[derive(Args)]
struct MetaArgs {
    #[arg(long)]
    studies: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long, default_value_t = 7878)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Stats(a) => stats(a),
        Command::InitHeads(a) => init_heads(a),
        Command::Synth(a) => synth(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Search(a) => search(a),
        Command::Train(a) => train_heads(a),
        Command::Eval(a) => eval(a),
        Command::Meta(a) => meta(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let docs = read_corpus(&a.corpus)?;
    let s = corpus_stats(docs.iter().map(|d| d.text.as_str()), &vocab, !a.no_stemming)?;
    print_json(&s)
}

fn init_heads(a: InitHeadsArgs) -> Result<()> {
    let d = a.dims;
    let heads = ReductionHeads::init(HeadDims::new(d.enc_dim, d.cls_dim, d.token_dim, a.uni), a.seed)?;
    heads.save(&a.out)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let coll = generate(&SyntheticConfig {
        seed: a.seed,
        docs: a.docs,
        queries: a.queries,
        ..Default::default()
    });
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let dir = &a.out_dir;
    fs::write(dir.join("vocab.txt"), coll.vocab.to_text())?;
    write_jsonl(dir.join("corpus.jsonl"), &coll.corpus)?;
    let queries: String = coll
        .queries
        .iter()
        .map(|q| format!("{}\t{}\n", q.id, q.text))
        .collect();
    fs::write(dir.join("queries.tsv"), queries)?;
    fs::write(dir.join("qrels.txt"), format_qrels(&coll.qrels))?;
    let triples = training_triples(&coll, a.triples, a.seed.wrapping_add(1));
    write_jsonl(dir.join("triples.jsonl"), &triples)?;
    eprintln!(
        "wrote {} docs, {} queries, {} judgments, {} triples to {}",
        coll.corpus.len(),
        coll.queries.len(),
        coll.qrels.len(),
        triples.len(),
        dir.display()
    );
    Ok(())
}

fn build_index(a: BuildArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let heads = ReductionHeads::load(&a.heads)?;
    if a.uni && !heads.dims().has_uni() {
        bail!("--uni given but {} has no uni layer", a.heads.display());
    }
    let corpus = read_corpus(&a.corpus)?;
    let config = IndexConfig {
        em: a.em || a.uni || heads.dims().has_uni(),
        stemming: !a.no_stemming,
        threshold: a.threshold,
        uni_nonneg: a.uni_nonneg,
        store_removed_words: !a.no_removed,
    };
    let (encoder, spec): (Box<dyn Encoder>, _) = match &a.embeddings {
        Some(path) => {
            let table = PrecomputedEncoder::load(path)?;
            let spec = colberter::encoder::EncoderSpec::Precomputed { dim: table.dim() };
            (Box::new(table), spec)
        }
        None => {
            let enc = ReferenceEncoder::new(a.seed, heads.dims().enc, a.window)?;
            (Box::new(enc), enc.spec())
        }
    };
    let idx = build_indices(&corpus, &vocab, encoder.as_ref(), spec, &heads, &config)?;
    index::save(&idx, &a.out)?;
    eprintln!(
        "indexed {} docs, {} word vectors into {}",
        idx.manifest.doc_count,
        idx.manifest.total_word_entries,
        a.out.display()
    );
    Ok(())
}

fn read_queries(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, q)) = line.split_once('\t') else {
            bail!("{}:{}: expected `qid<TAB>text`", path.display(), i + 1);
        };
        out.push((id.to_string(), q.to_string()));
    }
    Ok(out)
}

fn search(a: SearchArgs) -> Result<()> {
    let loaded = LoadedIndex::open(&a.index, a.query_embeddings.as_deref())?;
    let workflow: WorkflowKind = a.workflow.parse()?;
    let queries = match (&a.query, &a.queries) {
        (Some(q), _) => vec![("q".to_string(), q.clone())],
        (None, Some(path)) => read_queries(path)?,
        (None, None) => bail!("one of --query or --queries is required"),
    };
    let k_cand = a.k_cand.unwrap_or_else(|| default_k_cand(a.k));
    let mut run = RunFile::new(a.tag.clone());
    let mut json_lines = String::new();
    for (qid, text) in &queries {
        let req = SearchRequest {
            query: text.clone(),
            workflow: workflow.name().to_string(),
            k: a.k,
            k_cand: Some(k_cand),
            query_id: a.query_embeddings.is_some().then(|| qid.clone()),
        };
        if a.json {
            let resp = run_search(&loaded, &req).map_err(|e| anyhow::anyhow!(e.message))?;
            json_lines.push_str(&serde_json::to_string(&resp)?);
            json_lines.push('\n');
        } else {
            let index = &loaded.index;
            let key = req.query_id.as_deref().unwrap_or(text);
            let q = retrieve::encode_query(index, &index.heads, loaded.encoder.as_ref(), key, text)?;
            let params = retrieve::SearchParams::new(workflow, a.k).with_k_cand(k_cand);
            add_to_run(&mut run, qid, &retrieve::search_encoded(&q, index, &index.heads, params)?);
        }
    }
    let body = if a.json { json_lines } else { format_run(&run) };
    match &a.out {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
        None => io::stdout().lock().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn train_heads(a: TrainArgs) -> Result<()> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let triples = read_triples(&a.triples)?;
    let weights: LossWeights = a.alphas.parse()?;
    let freeze = FreezeSet::from_names(a.freeze.iter().map(String::as_str))?;
    let heads = match &a.init_heads {
        Some(p) => ReductionHeads::load(p)?,
        None => {
            let d = a.dims;
            ReductionHeads::init(HeadDims::new(d.enc_dim, d.cls_dim, d.token_dim, a.uni), a.seed)?
        }
    };
    if a.uni && !heads.dims().has_uni() {
        bail!("--uni given but the initial heads have no uni layer");
    }
    let encoder = ReferenceEncoder::new(a.encoder_seed, heads.dims().enc, a.window)?;
    let prepared = triples
        .iter()
        .map(|t| prepare_triple(t, &vocab, &encoder, !a.no_stemming))
        .collect::<colberter::Result<Vec<_>>>()?;
    let config = TrainConfig {
        weights,
        lr: a.lr,
        em: a.em || heads.dims().has_uni(),
        uni_nonneg: a.uni_nonneg,
        freeze,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let mut params = Params::from_heads(&heads);
    let log = train::train(&prepared, &mut params, &config, a.steps)?;
    params.to_heads().save(&a.out_heads)?;
    if let Some(p) = &a.log {
        write_jsonl(p, &log)?;
    }
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        eprintln!(
            "loss {:.6} -> {:.6} over {} steps; zero-gate fraction {:.3}",
            first.total,
            last.total,
            log.len(),
            last.zero_gate_fraction
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = read_run(&a.run)?;
    let qrels = read_qrels(&a.qrels)?;
    let run = if a.condensed {
        condense_judged_only(&run, &qrels)
    } else {
        run
    };
    let cut = MetricCutoffs {
        binarization: a.binarization,
        ..Default::default()
    };
    print_json(&compute_metrics(&run, &qrels, cut))
}

fn meta(a: MetaArgs) -> Result<()> {
    let text = fs::read_to_string(&a.studies).with_context(|| format!("reading {}", a.studies.display()))?;
    let input: MetaInput = serde_json::from_str(&text).context("parsing studies file")?;
    let result = dl_random_effects(&input.effects()?)?;
    print_json(&result.forest())
}

fn serve(a: ServeArgs) -> Result<()> {
    let loaded = LoadedIndex::open(&a.index, a.query_embeddings.as_deref())?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .context("bad --host/--port")?;
    let rt = tokio::runtime::Runtime::new()?;
    eprintln!("serving {} on http://{addr}", a.index.display());
    rt.block_on(colberter_service::serve(AppState::new(loaded), addr))?;
    Ok(())
}
