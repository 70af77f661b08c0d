use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};

use epimem::corpus::{read_corpus, Document, ParseOptions, TermCounts};
use epimem::index::InvertedIndex;
use epimem::lm::{
    evaluate, load_checkpoint, save_checkpoint, train, ModelConfig, Scalar, TrainConfig,
    TrainingExample, TransformerLm, VOCAB_SIZE,
};
use epimem::protocol::{
    serve, serve_tcp, ClientOptions, ModelScorer, RemoteScorer, Scorer, Transport,
    UniformByteScorer,
};
use epimem::reference;
use epimem::retrieval::{
    build_pairs, pair_quality_stats, read_pairs, write_pairs, write_unpaired, RetrievalConfig,
    UnpairedReason,
};
use epimem::scoring::{
    parse_ks, render_table, run_eval, split_at_sentence, ContextPolicy, ContextSource,
    EvalConfig, NoContext, PairContexts, TopHitContexts,
};

use crate::args::{Cli, Command, EvalArgs, IndexArgs, PairsArgs, Precision, ServeArgs, TrainArgs};
use crate::manifest::Run;

pub enum Outcome {
    Done,
    /// Outputs were written but a failure threshold was exceeded.
    ThresholdExceeded(String),
}

pub fn dispatch(cli: &Cli, run: &mut Run) -> Result<Outcome> {
    match &cli.command {
        Command::Index(a) => cmd_index(a, run),
        Command::Pairs(a) => cmd_pairs(a, run),
        Command::Train(a) => cmd_train(a, cli.seed, run),
        Command::Eval(a) => cmd_eval(a, run),
        Command::Serve(a) => cmd_serve(a, run),
    }
}

fn load_corpus(path: &Path, run: &mut Run) -> Result<Vec<Document>> {
    run.input(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(BufReader::new(f), ParseOptions::default())
        .with_context(|| format!("corpus {}", path.display()))
}

/// Writes through a temporary sibling file so a failed run never leaves a
/// half-written output behind.
fn write_atomically<F>(path: &Path, run: &mut Run, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut w = BufWriter::new(
        File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?,
    );
    body(&mut w)?;
    w.flush()?;
    drop(w);
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    run.output(path);
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_index(a: &IndexArgs, run: &mut Run) -> Result<Outcome> {
    let docs = load_corpus(&a.corpus, run)?;
    if docs.is_empty() {
        bail!("corpus {} is empty; refusing to write an unqueryable index", a.corpus.display());
    }
    let index = InvertedIndex::build(&docs)?;
    write_atomically(&a.out, run, |w| Ok(index.save(w)?))?;
    eprintln!(
        "indexed {} documents, {} terms -> {}",
        index.doc_count(),
        index.terms().count(),
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn load_index(path: &Path, run: &mut Run) -> Result<InvertedIndex> {
    run.input(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    InvertedIndex::load(BufReader::new(f)).with_context(|| format!("index {}", path.display()))
}

fn unpaired_path(a: &PairsArgs, k: usize) -> PathBuf {
    let base = a
        .unpaired
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".unpaired.jsonl"));
    if a.k.0.len() == 1 {
        return base;
    }
    let stem = base.file_stem().unwrap_or_default().to_string_lossy();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.k{k}.{}", ext.to_string_lossy()),
        None => format!("{stem}.k{k}"),
    };
    base.with_file_name(name)
}

fn cmd_pairs(a: &PairsArgs, run: &mut Run) -> Result<Outcome> {
    let queries = load_corpus(&a.queries, run)?;
    let index = load_index(&a.index, run)?;
    let query_terms: HashMap<&str, TermCounts> =
        queries.iter().map(|d| (d.id.as_str(), d.term_counts())).collect();
    let lookup = |id: &str| {
        query_terms
            .get(id)
            .or_else(|| index.meta(id).map(|m| &m.term_counts))
    };

    let mut all_pairs = Vec::new();
    let mut stats_out = String::new();
    for &k in &a.k.0 {
        let cfg = RetrievalConfig {
            k,
            top_n: a.top_n,
            window_days: a.window_days,
            cosine_factor: a.cosine_factor,
            distinct_source: !a.allow_same_source,
        };
        let set = build_pairs(&queries, &index, &cfg)?;
        let stats = pair_quality_stats(&set.pairs, set.unpaired.len(), lookup)?;
        let no_hits = set
            .unpaired
            .iter()
            .filter(|u| u.reason == UnpairedReason::NoHits)
            .count();
        stats_out.push_str(&format!(
            "k={k}: {} pairs, {} unpaired (no_hits {}, filtered_all {})\n",
            stats.pairs,
            stats.unpaired,
            no_hits,
            stats.unpaired - no_hits
        ));
        stats_out.push_str(&format!("  mean cosine {:.4}\n", stats.mean_cosine));
        let hist: Vec<String> = stats.histogram.iter().map(usize::to_string).collect();
        stats_out.push_str(&format!("  cosine histogram (0.05 bins) {}\n", hist.join(" ")));
        let ranks: Vec<String> = stats
            .rank_distribution
            .iter()
            .map(|(r, n)| format!("{r}:{n}"))
            .collect();
        stats_out.push_str(&format!("  selected rank {}\n", ranks.join(" ")));

        let up = unpaired_path(a, k);
        write_atomically(&up, run, |w| Ok(write_unpaired(w, &set.unpaired)?))?;
        all_pairs.extend(set.pairs);
    }
    write_atomically(&a.out, run, |w| Ok(write_pairs(w, &all_pairs)?))?;
    print!("{stats_out}");
    Ok(Outcome::Done)
}

fn training_examples(a: &TrainArgs, run: &mut Run) -> Result<Vec<TrainingExample>> {
    run.input(&a.pairs)?;
    let pairs = read_pairs(BufReader::new(File::open(&a.pairs)?))
        .with_context(|| format!("pairs {}", a.pairs.display()))?;
    let queries = load_corpus(&a.queries, run)?;
    let memory = load_corpus(&a.memory, run)?;
    let q: HashMap<&str, &Document> = queries.iter().map(|d| (d.id.as_str(), d)).collect();
    let m: HashMap<&str, &Document> = memory.iter().map(|d| (d.id.as_str(), d)).collect();
    let mut out = Vec::new();
    for p in pairs.iter().filter(|p| p.k == a.k) {
        let Some(rid) = &p.retrieved_id else { continue };
        let doc = q
            .get(p.query_id.as_str())
            .ok_or_else(|| anyhow!("query {:?} not in {}", p.query_id, a.queries.display()))?;
        let ctx = m
            .get(rid.as_str())
            .ok_or_else(|| anyhow!("memory document {rid:?} not in {}", a.memory.display()))?;
        let (prefix, cont) = split_at_sentence(&doc.text, a.k);
        out.push(TrainingExample::from_segments(
            prefix,
            Some(&ctx.text),
            cont,
            a.max_positions,
        ));
    }
    if out.is_empty() {
        bail!("no pairs with k={} in {}", a.k, a.pairs.display());
    }
    Ok(out)
}

fn cmd_train(a: &TrainArgs, seed: u64, run: &mut Run) -> Result<Outcome> {
    let data = training_examples(a, run)?;
    let mcfg = ModelConfig {
        embed: a.e,
        heads: a.h,
        layers: a.l,
        vocab_size: VOCAB_SIZE,
        max_positions: a.max_positions,
        seed,
    };
    let tcfg = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        warmup_proportion: a.warmup,
        batch_size: a.batch_size,
        total_steps: a.steps,
        seed,
        ..TrainConfig::default()
    };
    mcfg.validate()?;
    tcfg.validate()?;
    match a.precision {
        Precision::F32 => train_with::<f32>(a, mcfg, &tcfg, &data, run),
        Precision::F64 => train_with::<f64>(a, mcfg, &tcfg, &data, run),
    }
}

fn train_with<T: Scalar>(
    a: &TrainArgs,
    mcfg: ModelConfig,
    tcfg: &TrainConfig,
    data: &[TrainingExample],
    run: &mut Run,
) -> Result<Outcome> {
    let mut model = TransformerLm::<T>::new(mcfg)?;
    eprintln!(
        "training {} parameters on {} examples for {} steps",
        model.param_count(),
        data.len(),
        tcfg.total_steps
    );
    let curve_path = a
        .loss_curve
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".loss.jsonl"));
    let mut curve = BufWriter::new(File::create(&curve_path)?);
    run.output(&curve_path);
    let every = (tcfg.total_steps / 20).max(1);
    let mut write_err: Option<io::Error> = None;
    let result = train(&mut model, data, tcfg, |rec| {
        if write_err.is_none() {
            let line = serde_json::to_string(rec).expect("step record serializes");
            if let Err(e) = writeln!(curve, "{line}") {
                write_err = Some(e);
            }
        }
        if rec.step % every == 0 || rec.step + 1 == tcfg.total_steps {
            eprintln!(
                "step {:>6}  loss {:.4}  lr {:.2e}  |g| {:.3}",
                rec.step, rec.loss, rec.learning_rate, rec.grad_norm
            );
        }
    });
    curve.flush()?;
    if let Some(e) = write_err {
        return Err(e).context("writing loss curve");
    }
    result.context("training aborted")?;
    write_atomically(&a.out, run, |w| Ok(save_checkpoint(&model, w)?))?;
    let loss = evaluate(&model, data)?;
    println!(
        "final training loss {loss:.4} nats/byte (ppl {:.3}); checkpoint {}",
        loss.exp(),
        a.out.display()
    );
    Ok(Outcome::Done)
}

fn builtin_scorer(path: &str, precision: Precision, run: &mut Run) -> Result<Box<dyn Scorer>> {
    let path = Path::new(path);
    run.input(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    let name = format!(
        "builtin:{}",
        path.file_name().unwrap_or_default().to_string_lossy()
    );
    let reader = BufReader::new(File::open(path)?);
    Ok(match precision {
        Precision::F32 => Box::new(ModelScorer::new(load_checkpoint::<f32, _>(reader)?, name)),
        Precision::F64 => Box::new(ModelScorer::new(load_checkpoint::<f64, _>(reader)?, name)),
    })
}

fn local_scorer(spec: &str, precision: Precision, run: &mut Run) -> Result<Option<Box<dyn Scorer>>> {
    if spec == "uniform" {
        return Ok(Some(Box::new(UniformByteScorer)));
    }
    if let Some(path) = spec.strip_prefix("builtin:") {
        return builtin_scorer(path, precision, run).map(Some);
    }
    Ok(None)
}

fn cmd_eval(a: &EvalArgs, run: &mut Run) -> Result<Outcome> {
    let ks = parse_ks(&a.k).map_err(|e| anyhow!("--k: {e}"))?;
    let cfg = EvalConfig {
        ks,
        policy: a.policy,
        context_budget: a.context_budget,
        max_failure_rate: a.max_failure_rate,
    };
    cfg.validate()?;
    let docs = load_corpus(&a.corpus, run)?;
    if docs.is_empty() {
        bail!("corpus {} is empty", a.corpus.display());
    }
    let memory = match (&a.memory, a.policy) {
        (_, ContextPolicy::None) => Vec::new(),
        (Some(p), _) => load_corpus(p, run)?,
        (None, policy) => bail!("--policy {policy} needs --memory"),
    };
    let index;
    let contexts: Box<dyn ContextSource + '_> = match a.policy {
        ContextPolicy::None => Box::new(NoContext),
        ContextPolicy::Retrieved => {
            let path = a
                .pairs
                .as_ref()
                .ok_or_else(|| anyhow!("--policy retrieved needs --pairs"))?;
            run.input(path)?;
            let pairs = read_pairs(BufReader::new(File::open(path)?))
                .with_context(|| format!("pairs {}", path.display()))?;
            Box::new(PairContexts::new(&pairs, &memory)?)
        }
        ContextPolicy::Irrelevant => {
            index = match &a.index {
                Some(p) => load_index(p, run)?,
                None => InvertedIndex::build(&memory)?,
            };
            Box::new(TopHitContexts::new(&index, &memory))
        }
    };

    let scorer: Box<dyn Scorer> = match local_scorer(&a.scorer, a.precision, run)? {
        Some(s) => s,
        None => {
            let transport = Transport::parse(&a.scorer)?;
            let options = ClientOptions {
                timeout: Duration::from_secs(a.timeout),
                window: a.window,
            };
            Box::new(
                RemoteScorer::connect(&transport, a.connections, options)
                    .with_context(|| format!("connecting to scorer {}", a.scorer))?,
            )
        }
    };
    eprintln!(
        "scoring {} documents with {} (context budget {} bytes)",
        docs.len(),
        scorer.model_name(),
        a.context_budget.min(scorer.max_context_bytes() as usize)
    );

    let report = run_eval(&docs, contexts.as_ref(), scorer.as_ref(), &cfg)?;
    write_atomically(&a.scores, run, |w| Ok(report.write_scores(w)?))?;

    let mut text = render_table(std::slice::from_ref(&report));
    let attempted = report.records.len() + report.failures.len();
    text.push_str(&format!(
        "\nmodel {}; {} failed of {} scored ({:.2}%); {} skipped without words\n",
        report.model,
        report.failures.len(),
        attempted,
        100.0 * report.failure_rate(),
        report.skipped.len()
    ));
    for c in &report.cells {
        text.push_str(&format!(
            "  {}: {} documents, {} with context, {} failed\n",
            c.k, c.scored, c.with_context, c.failed
        ));
    }
    let mut by_code: BTreeMap<&str, usize> = BTreeMap::new();
    for f in &report.failures {
        *by_code.entry(f.code.as_str()).or_insert(0) += 1;
    }
    for (code, n) in by_code {
        text.push_str(&format!("  failure code {code}: {n}\n"));
    }
    if a.show_reference {
        text.push('\n');
        text.push_str(&reference::render());
    }
    print!("{text}");
    if let Some(path) = &a.report {
        write_atomically(path, run, |w| Ok(w.write_all(text.as_bytes())?))?;
    }

    if report.failure_rate() > cfg.max_failure_rate {
        return Ok(Outcome::ThresholdExceeded(format!(
            "{:.2}% of documents failed, above the {:.2}% limit",
            100.0 * report.failure_rate(),
            100.0 * cfg.max_failure_rate
        )));
    }
    Ok(Outcome::Done)
}

fn cmd_serve(a: &ServeArgs, run: &mut Run) -> Result<Outcome> {
    let scorer = local_scorer(&a.scorer, a.precision, run)?
        .ok_or_else(|| anyhow!("serve takes uniform or builtin:<checkpoint>, got {:?}", a.scorer))?;
    match &a.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!("listening on {}", listener.local_addr()?);
            serve_tcp(Arc::from(scorer), listener)?;
        }
        None => {
            let stdin = io::stdin().lock();
            let stdout = io::stdout().lock();
            serve(scorer.as_ref(), stdin, stdout)?;
        }
    }
    Ok(Outcome::Done)
}
