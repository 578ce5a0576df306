use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use geostream::data::{build_dataset, gen_synthetic, LabeledExample, Prediction, Provenance, TweetRecord};
use geostream::embeddings::WordVectorStore;
use geostream::gazetteer::Gazetteer;
use geostream::metrics::classification_metrics;
use geostream::model::{collect_vocab, FeatureSet, GeoModel, ModelConfig};
use geostream::stream::{run_pipeline_with, Endpoint, KvConfig, PipelineConfig, Region, Resources};
use geostream::training::{evaluate, grad_check, GradCheckConfig, TrainConfig, Trainer, LOG_HEADER};

/// City-level tweet geolocation: training, evaluation and a streaming
/// prediction service.
///
/// Every option can also come from `GEOSTREAM_<KEY>` or a flat
/// `key = value` file given with --config; flags win over the environment,
/// which wins over the file.
#[derive(Parser)]
#[command(name = "geostream", version)]
struct Cli {
    /// Flat key=value settings file.
    #[arg(long, global = true, env = "GEOSTREAM_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a geotagged NDJSON archive.
    Train(TrainArgs),
    /// Score a model on labeled data, or score gold,pred pairs.
    Eval(EvalArgs),
    /// Predict a city for every tweet in a file.
    Predict(PredictArgs),
    /// Run the streaming pipeline.
    Serve(ServeArgs),
    /// Write a synthetic geotagged corpus as NDJSON.
    MakeSynth(SynthArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct ResourceArgs {
    /// Gazetteer CSV: label_id,name,min_lat,max_lat,min_lon,max_lon
    #[arg(long, visible_alias = "cities", env = "GEOSTREAM_GAZETTEER")]
    gazetteer: Option<PathBuf>,
    /// Word vectors in text format.
    #[arg(long, env = "GEOSTREAM_VECTORS")]
    vectors: Option<PathBuf>,
    /// Read at most this many word vectors.
    #[arg(long, env = "GEOSTREAM_VECTORS_LIMIT")]
    vectors_limit: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    res: ResourceArgs,
    /// Geotagged NDJSON training archive.
    #[arg(long, env = "GEOSTREAM_DATA")]
    data: Option<PathBuf>,
    /// Geotagged NDJSON dev archive.
    #[arg(long, env = "GEOSTREAM_DEV")]
    dev: Option<PathBuf>,
    /// Where to write the checkpoint.
    #[arg(long, env = "GEOSTREAM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "GEOSTREAM_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "GEOSTREAM_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "GEOSTREAM_LEARNING_RATE")]
    learning_rate: Option<f64>,
    /// Epochs without dev improvement before stopping.
    #[arg(long, env = "GEOSTREAM_PATIENCE")]
    patience: Option<usize>,
    #[arg(long, env = "GEOSTREAM_SEED")]
    seed: Option<u64>,
    /// Word vector width when no vector file is given.
    #[arg(long, env = "GEOSTREAM_WORD_DIM")]
    word_dim: Option<usize>,
    /// Use narrow layers for quick experiments.
    #[arg(long, env = "GEOSTREAM_SMALL", num_args = 0..=1, default_missing_value = "true")]
    small: Option<bool>,
    /// Only the text branch.
    #[arg(long, env = "GEOSTREAM_TEXT_ONLY", num_args = 0..=1, default_missing_value = "true")]
    text_only: Option<bool>,
    /// Keep word vectors fixed.
    #[arg(long, env = "GEOSTREAM_FREEZE_EMBEDDINGS", num_args = 0..=1, default_missing_value = "true")]
    freeze_embeddings: Option<bool>,
    /// Also append the epoch log to this file.
    #[arg(long, env = "GEOSTREAM_LOG")]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    res: ResourceArgs,
    #[arg(long, env = "GEOSTREAM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Geotagged NDJSON archive to score.
    #[arg(long, env = "GEOSTREAM_DATA")]
    data: Option<PathBuf>,
    /// CSV of `gold,pred` label pairs (header optional); no model needed.
    #[arg(long, env = "GEOSTREAM_PAIRS")]
    pairs: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    res: ResourceArgs,
    #[arg(long, env = "GEOSTREAM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// NDJSON tweets; `-` for stdin.
    #[arg(long, env = "GEOSTREAM_SOURCE")]
    source: Option<String>,
    /// `-` for stdout.
    #[arg(long, env = "GEOSTREAM_SINK")]
    sink: Option<String>,
    #[arg(long, env = "GEOSTREAM_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    res: ResourceArgs,
    #[arg(long, env = "GEOSTREAM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "GEOSTREAM_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Seconds before a partial batch is flushed.
    #[arg(long, env = "GEOSTREAM_FLUSH_INTERVAL")]
    flush_interval: Option<f64>,
    /// NDJSON tweets; `-` for stdin.
    #[arg(long, env = "GEOSTREAM_SOURCE")]
    source: Option<String>,
    /// `-` for stdout.
    #[arg(long, env = "GEOSTREAM_SINK")]
    sink: Option<String>,
    /// `name:min_lat,max_lat,min_lon,max_lon`; repeatable. Defaults to
    /// every gazetteer city.
    #[arg(long)]
    region: Vec<String>,
    /// Placement seed.
    #[arg(long, env = "GEOSTREAM_SEED")]
    seed: Option<u64>,
    /// Replay the source at this many tweets per minute of virtual time.
    #[arg(long, env = "GEOSTREAM_REPLAY_RATE")]
    replay_rate: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, visible_alias = "cities", env = "GEOSTREAM_GAZETTEER")]
    gazetteer: Option<PathBuf>,
    #[arg(long, env = "GEOSTREAM_PER_CITY")]
    per_city: Option<usize>,
    /// Filler-token rate and wrong-location probability, in [0, 1].
    #[arg(long, env = "GEOSTREAM_NOISE")]
    noise: Option<f64>,
    #[arg(long, env = "GEOSTREAM_SEED")]
    seed: Option<u64>,
    /// `-` for stdout.
    #[arg(long, env = "GEOSTREAM_SINK")]
    sink: Option<String>,
    /// Drop geotags so the tweets are predictable stream input.
    #[arg(long)]
    strip_geotag: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, visible_alias = "cities", env = "GEOSTREAM_GAZETTEER")]
    gazetteer: Option<PathBuf>,
    /// Check this model instead of a freshly initialized one.
    #[arg(long, env = "GEOSTREAM_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Number of synthetic examples in the checked batch (at most 4).
    #[arg(long, env = "GEOSTREAM_EXAMPLES")]
    examples: Option<usize>,
    #[arg(long, env = "GEOSTREAM_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "GEOSTREAM_SMALL", num_args = 0..=1, default_missing_value = "true")]
    small: Option<bool>,
    #[arg(long, env = "GEOSTREAM_TOLERANCE")]
    tolerance: Option<f64>,
}

/// Resolves one setting: flag (or environment, which clap folds into the
/// flag) first, then the config file, then the default.
struct Settings {
    file: KvConfig,
}

impl Settings {
    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => Ok(self.file.parse_value(key)?),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &'static str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(flag, key)?
            .with_context(|| format!("missing required setting --{}", key.replace('_', "-")))
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let s = Settings { file };
    match cli.command {
        Command::Train(a) => train(&s, a),
        Command::Eval(a) => eval(&s, a),
        Command::Predict(a) => predict(&s, a),
        Command::Serve(a) => serve(&s, a),
        Command::MakeSynth(a) => make_synth(&s, a),
        Command::GradCheck(a) => grad_check_cmd(&s, a),
    }
}

fn open_sink(spec: &str) -> Result<Box<dyn Write>> {
    Ok(match Endpoint::from_str(spec).expect("infallible") {
        Endpoint::Std => Box::new(BufWriter::new(std::io::stdout())),
        Endpoint::File(p) => Box::new(BufWriter::new(
            File::create(&p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
    })
}

fn open_source(spec: &str) -> Result<Box<dyn BufRead>> {
    Ok(match Endpoint::from_str(spec).expect("infallible") {
        Endpoint::Std => Box::new(BufReader::new(std::io::stdin())),
        Endpoint::File(p) => Box::new(BufReader::new(
            File::open(&p).with_context(|| format!("cannot open {}", p.display()))?,
        )),
    })
}

fn load_gazetteer(path: &Path) -> Result<Gazetteer> {
    Gazetteer::load(path).with_context(|| format!("gazetteer {}", path.display()))
}

fn load_dataset(path: &Path, g: &Gazetteer) -> Result<Vec<LabeledExample>> {
    let (examples, stats) =
        build_dataset(path, g).with_context(|| format!("cannot read {}", path.display()))?;
    eprintln!(
        "{}: lines={} examples={} parse_errors={} not_geotagged={} outside_gazetteer={}",
        path.display(),
        stats.lines,
        stats.examples,
        stats.parse_errors,
        stats.not_geotagged,
        stats.outside_gazetteer
    );
    Ok(examples)
}

fn load_resources(s: &Settings, res: ResourceArgs, checkpoint: Option<PathBuf>) -> Result<Resources> {
    let checkpoint: PathBuf = s.require(checkpoint, "checkpoint")?;
    let gazetteer: PathBuf = s.require(res.gazetteer, "gazetteer")?;
    let vectors: Option<PathBuf> = s.get(res.vectors, "vectors")?;
    let limit: Option<usize> = s.get(res.vectors_limit, "vectors_limit")?;
    Resources::load(&checkpoint, &gazetteer, vectors.as_deref(), limit)
        .with_context(|| format!("loading model {}", checkpoint.display()))
}

fn train(s: &Settings, a: TrainArgs) -> Result<()> {
    let g = load_gazetteer(&s.require(a.res.gazetteer, "gazetteer")?)?;
    let train_set = load_dataset(&s.require::<PathBuf>(a.data, "data")?, &g)?;
    ensure!(!train_set.is_empty(), "training archive has no usable examples");
    let dev_set = match s.get::<PathBuf>(a.dev, "dev")? {
        Some(p) => load_dataset(&p, &g)?,
        None => Vec::new(),
    };
    let out: PathBuf = s.require(a.checkpoint, "checkpoint")?;
    let seed = s.or(a.seed, "seed", 0)?;

    let store = match s.get::<PathBuf>(a.res.vectors, "vectors")? {
        Some(p) => WordVectorStore::load(&p, s.get(a.res.vectors_limit, "vectors_limit")?, seed)
            .with_context(|| format!("word vectors {}", p.display()))?,
        None => WordVectorStore::empty(s.or(a.word_dim, "word_dim", 300)?, seed),
    };
    let mut cfg = if s.or(a.small, "small", false)? {
        ModelConfig::small(g.len(), store.dim())
    } else {
        ModelConfig {
            word_dim: store.dim(),
            ..ModelConfig::new(g.len())
        }
    };
    if s.or(a.text_only, "text_only", false)? {
        cfg.features = FeatureSet::TEXT_ONLY;
    }
    cfg.embeddings_trainable = !s.or(a.freeze_embeddings, "freeze_embeddings", false)?;
    let vocab = collect_vocab(
        train_set.iter().map(|e| e.tweet.text.as_str()),
        cfg.max_text_tokens,
    );
    let model = GeoModel::new(cfg, &store, vocab, seed)?;

    let tcfg = TrainConfig {
        batch_size: s.or(a.batch_size, "batch_size", 512)?,
        learning_rate: s.or(a.learning_rate, "learning_rate", 1e-3)?,
        max_epochs: s.or(a.epochs, "epochs", 10)?,
        patience: s.get(a.patience, "patience")?,
        seed,
        ..TrainConfig::default()
    };
    let mut log_file = match s.get::<PathBuf>(a.log, "log")? {
        Some(p) => Some(File::create(&p).with_context(|| format!("cannot create {}", p.display()))?),
        None => None,
    };
    let mut write_log = |line: &str| -> std::io::Result<()> {
        println!("{line}");
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{line}")?;
        }
        Ok(())
    };
    write_log(LOG_HEADER)?;
    let mut trainer = Trainer::new(model, &store, tcfg)?;
    let mut io_err = None;
    trainer.fit(&train_set, &dev_set, |stats| {
        if let Err(e) = write_log(&stats.to_log_line()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    trainer
        .model()
        .save(&out)
        .with_context(|| format!("cannot write {}", out.display()))?;
    eprintln!("saved {}", out.display());
    Ok(())
}

fn read_pairs(path: &Path) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let (mut gold, mut pred) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            bail!("{} line {}: expected gold,pred", path.display(), i + 1);
        }
        match (rec[0].parse::<usize>(), rec[1].parse::<usize>()) {
            (Ok(g), Ok(p)) => {
                gold.push(g);
                pred.push(p);
            }
            _ if i == 0 => continue,
            _ => bail!("{} line {}: labels must be integers", path.display(), i + 1),
        }
    }
    Ok((gold, pred))
}

fn eval(s: &Settings, a: EvalArgs) -> Result<()> {
    let report = if let Some(pairs) = s.get::<PathBuf>(a.pairs, "pairs")? {
        let (gold, pred) = read_pairs(&pairs)?;
        classification_metrics(&gold, &pred)?
    } else {
        let data: PathBuf = s.require(a.data, "data")?;
        let res = load_resources(s, a.res, a.checkpoint)?;
        let examples = load_dataset(&data, &res.gazetteer)?;
        evaluate(&res.model, &res.store, &res.cvocab, &examples)?
    };
    print!("{}", report.to_table());
    print!("{}", report.to_kv_lines());
    Ok(())
}

fn predict(s: &Settings, a: PredictArgs) -> Result<()> {
    let source = s.or(a.source, "source", "-".to_string())?;
    let sink = s.or(a.sink, "sink", "-".to_string())?;
    let seed = s.or(a.seed, "seed", 0)?;
    let res = load_resources(s, a.res, a.checkpoint)?;
    let mut tweets = Vec::new();
    let mut errors = 0usize;
    for line in open_source(&source)?.lines() {
        match TweetRecord::parse(&line?) {
            Ok(t) => tweets.push(t),
            Err(_) => errors += 1,
        }
    }
    let mut out = open_sink(&sink)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let results = res.model.predict_batch(&tweets, &res.store, &res.cvocab);
    let mut failed = 0usize;
    for (tweet, r) in tweets.iter().zip(results) {
        let Ok(dist) = r else {
            failed += 1;
            continue;
        };
        let point = res.gazetteer.place_within(dist.label, &mut rng)?;
        let pred = Prediction {
            tweet_id: tweet.id.clone(),
            label_id: Some(dist.label),
            city_name: res.gazetteer.get(dist.label).map(|c| c.name.clone()),
            distribution: dist.probs,
            point,
            provenance: Provenance::Predicted,
        };
        writeln!(out, "{}", pred.to_ndjson(tweet))?;
    }
    out.flush()?;
    eprintln!(
        "predicted={} parse_errors={errors} prediction_errors={failed}",
        tweets.len() - failed
    );
    Ok(())
}

fn serve(s: &Settings, a: ServeArgs) -> Result<()> {
    let mut cfg = PipelineConfig::new(
        s.require(a.checkpoint, "checkpoint")?,
        s.require(a.res.gazetteer, "gazetteer")?,
    );
    cfg.batch_size = s.or(a.batch_size, "batch_size", cfg.batch_size)?;
    cfg.flush_interval = s.or(a.flush_interval, "flush_interval", cfg.flush_interval)?;
    cfg.source = s.or(a.source, "source", "-".into())?.parse()?;
    cfg.sink = s.or(a.sink, "sink", "-".into())?.parse()?;
    cfg.vectors = s.get(a.res.vectors, "vectors")?;
    cfg.vectors_limit = s.get(a.res.vectors_limit, "vectors_limit")?;
    cfg.seed = s.or(a.seed, "seed", 0)?;
    cfg.replay_rate = s.get(a.replay_rate, "replay_rate")?;
    let region_specs: Vec<String> = if a.region.is_empty() {
        match std::env::var(geostream::stream::env_key("region")) {
            Ok(v) => v.split(';').map(str::to_string).collect(),
            Err(_) => s.file.get_all("region").to_vec(),
        }
    } else {
        a.region
    };
    cfg.regions = region_specs
        .iter()
        .map(|r| r.parse::<Region>().map_err(anyhow::Error::msg))
        .collect::<Result<_>>()
        .context("bad --region")?;
    cfg.validate()?;

    let res = Resources::load(&cfg.checkpoint, &cfg.gazetteer, cfg.vectors.as_deref(), cfg.vectors_limit)
        .with_context(|| format!("loading model {}", cfg.checkpoint.display()))?;
    let dump = Arc::new(AtomicBool::new(false));
    #[cfg(unix)]
    signal_hook::flag::register(signal_hook::consts::SIGUSR1, Arc::clone(&dump))
        .context("cannot install SIGUSR1 handler")?;
    let report = run_pipeline_with(&cfg, &res, Some(&dump))?;
    eprint!("{}", report.counters.to_kv_lines());
    Ok(())
}

fn make_synth(s: &Settings, a: SynthArgs) -> Result<()> {
    let g = load_gazetteer(&s.require(a.gazetteer, "gazetteer")?)?;
    let per_city = s.or(a.per_city, "per_city", 50)?;
    ensure!(per_city >= 1, "--per-city must be at least 1");
    let noise = s.or(a.noise, "noise", 0.0)?;
    ensure!((0.0..=1.0).contains(&noise), "--noise must lie in [0, 1]");
    let seed = s.or(a.seed, "seed", 0)?;
    let mut out = open_sink(&s.or(a.sink, "sink", "-".to_string())?)?;
    for mut ex in gen_synthetic(&g, per_city, noise, seed) {
        if a.strip_geotag {
            ex.tweet.geotag = None;
        }
        writeln!(out, "{}", ex.tweet.to_ndjson())?;
    }
    out.flush()?;
    Ok(())
}

fn grad_check_cmd(s: &Settings, a: GradCheckArgs) -> Result<()> {
    let g = load_gazetteer(&s.require(a.gazetteer, "gazetteer")?)?;
    let n = s.or(a.examples, "examples", 2)?;
    ensure!((1..=4).contains(&n), "--examples must be between 1 and 4");
    let seed = s.or(a.seed, "seed", 0)?;
    let (model, store) = match s.get::<PathBuf>(a.checkpoint, "checkpoint")? {
        Some(p) => {
            let m = GeoModel::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let store = WordVectorStore::empty(m.config().word_dim, m.config().oov_seed);
            (m, store)
        }
        None => {
            let cfg = if s.or(a.small, "small", true)? {
                ModelConfig::small(g.len(), 16)
            } else {
                ModelConfig::new(g.len())
            };
            let store = WordVectorStore::empty(cfg.word_dim, seed);
            let corpus = gen_synthetic(&g, 1, 0.3, seed);
            let vocab = collect_vocab(corpus.iter().map(|e| e.tweet.text.as_str()), cfg.max_text_tokens);
            (GeoModel::new(cfg, &store, vocab, seed)?, store)
        }
    };
    ensure!(
        model.config().num_classes == g.len(),
        "gazetteer has {} cities but the model predicts {} classes",
        g.len(),
        model.config().num_classes
    );
    let mut batch = gen_synthetic(&g, n.div_ceil(g.len()), 0.3, seed ^ 0x9e37);
    batch.truncate(n);
    let cfg = GradCheckConfig {
        tolerance: s.or(a.tolerance, "tolerance", 1e-4)?,
        seed,
        ..GradCheckConfig::default()
    };
    let report = grad_check(&model, &store, &batch, &cfg)?;
    println!("{report}");
    ensure!(report.passed(), "gradient check failed");
    Ok(())
}
