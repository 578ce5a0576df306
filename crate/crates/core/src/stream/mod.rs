//! Streaming geolocation: read tweet lines, pass geotagged tweets through,
//! buffer the predictable ones into batches, predict and place them, and
//! write annotated NDJSON.
//!
//! A reader thread stamps each line with its arrival time and hands it to
//! the inference side over a bounded queue, so a slow model blocks the
//! reader instead of growing memory. A batch is flushed when it reaches
//! `batch_size`, when its oldest tweet has waited `flush_interval`, or at
//! the end of the source.

mod clock;
mod config;

pub use clock::{Clock, VirtualClock, WallClock};
pub use config::{env_key, ConfigError, Endpoint, KvConfig, PipelineConfig, Region, ENV_PREFIX};

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{sync_channel, RecvTimeoutError};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::{Prediction, Provenance, TweetRecord};
use crate::embeddings::{CharVocab, EmbeddingError, WordVectorStore};
use crate::gazetteer::{Gazetteer, GazetteerError};
use crate::metrics::RegionStats;
use crate::model::{CheckpointError, GeoModel};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gazetteer(#[from] GazetteerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Mismatch(String),
}

/// Everything inference needs, loaded once.
pub struct Resources {
    pub model: GeoModel,
    pub store: WordVectorStore,
    pub gazetteer: Gazetteer,
    pub cvocab: CharVocab,
}

impl Resources {
    pub fn new(
        model: GeoModel,
        store: WordVectorStore,
        gazetteer: Gazetteer,
    ) -> Result<Self, StreamError> {
        let classes = model.config().num_classes;
        if gazetteer.len() != classes {
            return Err(StreamError::Mismatch(format!(
                "gazetteer has {} cities but the model predicts {classes} classes",
                gazetteer.len()
            )));
        }
        if store.dim() != model.config().word_dim {
            return Err(StreamError::Mismatch(format!(
                "word vectors have dim {} but the model expects {}",
                store.dim(),
                model.config().word_dim
            )));
        }
        Ok(Self {
            model,
            store,
            gazetteer,
            cvocab: CharVocab::default(),
        })
    }

    /// Without a vector file, every word maps to its seeded
    /// out-of-vocabulary vector (the model's trainable table still applies).
    pub fn load(
        checkpoint: &Path,
        gazetteer: &Path,
        vectors: Option<&Path>,
        vectors_limit: Option<usize>,
    ) -> Result<Self, StreamError> {
        let model = GeoModel::load(checkpoint)?;
        let gazetteer = Gazetteer::load(gazetteer)?;
        let seed = model.config().oov_seed;
        let store = match vectors {
            Some(p) => WordVectorStore::load(p, vectors_limit, seed)?,
            None => WordVectorStore::empty(model.config().word_dim, seed),
        };
        Self::new(model, store, gazetteer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushReason {
    Size,
    Timeout,
    EndOfSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlushEvent {
    /// Pipeline time of the flush, in seconds.
    pub at: f64,
    pub size: usize,
    pub reason: FlushReason,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PipelineCounters {
    pub lines_in: u64,
    pub parse_errors: u64,
    pub geotagged_passthrough: u64,
    pub predictable_buffered: u64,
    /// Parsed tweets with neither a geotag nor a usable profile location.
    pub dropped: u64,
    pub batches_flushed: u64,
    pub predictions_out: u64,
    pub prediction_errors: u64,
    pub regions: Vec<RegionStats>,
}

impl PipelineCounters {
    /// Every input line is accounted for exactly once.
    pub fn is_conserved(&self) -> bool {
        self.lines_in
            == self.parse_errors + self.geotagged_passthrough + self.predictable_buffered + self.dropped
    }

    pub fn to_kv_lines(&self) -> String {
        let mut s = format!(
            "lines_in={}\nparse_errors={}\ngeotagged_passthrough={}\npredictable_buffered={}\n\
             dropped={}\nbatches_flushed={}\npredictions_out={}\nprediction_errors={}\n",
            self.lines_in,
            self.parse_errors,
            self.geotagged_passthrough,
            self.predictable_buffered,
            self.dropped,
            self.batches_flushed,
            self.predictions_out,
            self.prediction_errors
        );
        for r in &self.regions {
            s.push_str(&r.to_kv_line());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub batch_size: usize,
    pub flush_interval: f64,
    pub seed: u64,
    pub regions: Vec<Region>,
    pub replay_rate: Option<f64>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            batch_size: 512,
            flush_interval: 60.0,
            seed: 0,
            regions: Vec::new(),
            replay_rate: None,
        }
    }
}

impl From<&PipelineConfig> for PipelineOptions {
    fn from(c: &PipelineConfig) -> Self {
        Self {
            batch_size: c.batch_size,
            flush_interval: c.flush_interval,
            seed: c.seed,
            regions: c.regions.clone(),
            replay_rate: c.replay_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineReport {
    pub counters: PipelineCounters,
    pub flushes: Vec<FlushEvent>,
}

enum Msg {
    Line(Vec<u8>, f64),
    ReadError(std::io::Error),
}

struct Engine<'r, W: Write> {
    res: &'r Resources,
    opts: &'r PipelineOptions,
    sink: W,
    rng: ChaCha8Rng,
    counters: PipelineCounters,
    buffer: Vec<TweetRecord>,
    oldest: Option<f64>,
    flushes: Vec<FlushEvent>,
}

impl<W: Write> Engine<'_, W> {
    fn emit(&mut self, tweet: &TweetRecord, pred: &Prediction) -> std::io::Result<()> {
        for r in &mut self.counters.regions {
            r.observe(pred);
        }
        writeln!(self.sink, "{}", pred.to_ndjson(tweet))
    }

    fn check_timeout(&mut self, now: f64) -> std::io::Result<()> {
        if let Some(oldest) = self.oldest {
            if now - oldest >= self.opts.flush_interval {
                self.flush(oldest + self.opts.flush_interval, FlushReason::Timeout)?;
            }
        }
        Ok(())
    }

    fn on_line(&mut self, bytes: Vec<u8>, t: f64) -> std::io::Result<()> {
        self.check_timeout(t)?;
        self.counters.lines_in += 1;
        let tweet = String::from_utf8(bytes)
            .ok()
            .and_then(|s| TweetRecord::parse(s.trim_end_matches(['\n', '\r'])).ok());
        let Some(tweet) = tweet else {
            self.counters.parse_errors += 1;
            return Ok(());
        };
        if let Some(point) = tweet.geotag {
            self.counters.geotagged_passthrough += 1;
            let label_id = self.res.gazetteer.label_of(point.0, point.1);
            let pred = Prediction {
                tweet_id: tweet.id.clone(),
                label_id,
                city_name: label_id
                    .and_then(|l| self.res.gazetteer.get(l))
                    .map(|c| c.name.clone()),
                distribution: Vec::new(),
                point,
                provenance: Provenance::Geotagged,
            };
            self.emit(&tweet, &pred)
        } else if tweet.is_predictable() {
            self.counters.predictable_buffered += 1;
            self.buffer.push(tweet);
            self.oldest.get_or_insert(t);
            if self.buffer.len() >= self.opts.batch_size {
                self.flush(t, FlushReason::Size)?;
            }
            Ok(())
        } else {
            self.counters.dropped += 1;
            Ok(())
        }
    }

    fn flush(&mut self, at: f64, reason: FlushReason) -> std::io::Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.buffer);
        self.oldest = None;
        let results = self
            .res
            .model
            .predict_batch(&batch, &self.res.store, &self.res.cvocab);
        for (tweet, result) in batch.iter().zip(results) {
            let Ok(dist) = result else {
                self.counters.prediction_errors += 1;
                continue;
            };
            let city = self
                .res
                .gazetteer
                .get(dist.label)
                .expect("gazetteer size matches the model");
            let point = self
                .res
                .gazetteer
                .place_within(dist.label, &mut self.rng)
                .expect("label is in range");
            let pred = Prediction {
                tweet_id: tweet.id.clone(),
                label_id: Some(dist.label),
                city_name: Some(city.name.clone()),
                distribution: dist.probs,
                point,
                provenance: Provenance::Predicted,
            };
            self.emit(tweet, &pred)?;
            self.counters.predictions_out += 1;
        }
        self.counters.batches_flushed += 1;
        self.flushes.push(FlushEvent {
            at,
            size: batch.len(),
            reason,
        });
        self.sink.flush()
    }
}

/// Runs the pipeline over `source`, writing to `sink`. With a replay rate
/// the reader delivers line `i` at `i * 60 / rate` seconds on `clock`.
/// Setting `dump` makes the inference side print the counters to stderr
/// and clear the flag.
pub fn run_stream<R, W>(
    res: &Resources,
    opts: &PipelineOptions,
    mut source: R,
    sink: W,
    clock: &dyn Clock,
    dump: Option<&AtomicBool>,
) -> Result<PipelineReport, StreamError>
where
    R: BufRead + Send,
    W: Write,
{
    let cfg = PipelineConfig {
        batch_size: opts.batch_size,
        flush_interval: opts.flush_interval,
        replay_rate: opts.replay_rate,
        ..PipelineConfig::new(Default::default(), Default::default())
    };
    cfg.validate()?;
    let regions = if opts.regions.is_empty() {
        res.gazetteer
            .entries()
            .iter()
            .map(|c| RegionStats::new(c.name.clone(), c.bbox))
            .collect()
    } else {
        opts.regions
            .iter()
            .map(|r| RegionStats::new(r.name.clone(), r.bbox))
            .collect()
    };
    let mut engine = Engine {
        res,
        opts,
        sink,
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        counters: PipelineCounters {
            regions,
            ..Default::default()
        },
        buffer: Vec::with_capacity(opts.batch_size),
        oldest: None,
        flushes: Vec::new(),
    };
    let capacity = opts.batch_size.saturating_mul(2).max(2);
    let (tx, rx) = sync_channel::<Msg>(capacity);

    std::thread::scope(|scope| -> Result<PipelineReport, StreamError> {
        scope.spawn(move || {
            let mut i = 0u64;
            loop {
                let mut buf = Vec::new();
                match source.read_until(b'\n', &mut buf) {
                    Ok(0) => break,
                    Ok(_) => {}
                    Err(e) => {
                        let _ = tx.send(Msg::ReadError(e));
                        break;
                    }
                }
                if let Some(rate) = opts.replay_rate {
                    clock.sleep_until(i as f64 * 60.0 / rate);
                }
                i += 1;
                if tx.send(Msg::Line(buf, clock.now())).is_err() {
                    break;
                }
            }
        });

        let poll = Duration::from_secs(1);
        loop {
            let msg = if clock.is_virtual() {
                rx.recv().ok()
            } else {
                let wait = engine
                    .oldest
                    .map(|o| Duration::from_secs_f64((o + opts.flush_interval - clock.now()).max(0.0)))
                    .map_or(poll, |d| d.min(poll));
                match rx.recv_timeout(wait) {
                    Ok(m) => Some(m),
                    Err(RecvTimeoutError::Timeout) => {
                        engine.check_timeout(clock.now())?;
                        dump_if_requested(dump, &engine.counters);
                        continue;
                    }
                    Err(RecvTimeoutError::Disconnected) => None,
                }
            };
            match msg {
                Some(Msg::Line(bytes, t)) => engine.on_line(bytes, t)?,
                Some(Msg::ReadError(e)) => {
                    drop(rx);
                    return Err(e.into());
                }
                None => break,
            }
            dump_if_requested(dump, &engine.counters);
        }
        let now = clock.now();
        engine.check_timeout(now)?;
        engine.flush(now, FlushReason::EndOfSource)?;
        engine.sink.flush()?;
        Ok(PipelineReport {
            counters: engine.counters,
            flushes: engine.flushes,
        })
    })
}

fn dump_if_requested(flag: Option<&AtomicBool>, counters: &PipelineCounters) {
    if flag.is_some_and(|f| f.swap(false, Ordering::SeqCst)) {
        eprint!("{}", counters.to_kv_lines());
    }
}

/// [`run_stream`] with paced delivery at `rate` tweets per minute.
pub fn replay_rate<R, W>(
    res: &Resources,
    opts: &PipelineOptions,
    rate: f64,
    source: R,
    sink: W,
    clock: &dyn Clock,
) -> Result<PipelineReport, StreamError>
where
    R: BufRead + Send,
    W: Write,
{
    let opts = PipelineOptions {
        replay_rate: Some(rate),
        ..opts.clone()
    };
    run_stream(res, &opts, source, sink, clock, None)
}

/// Loads resources, opens the configured endpoints and runs on the wall
/// clock (or a virtual clock when replaying, so a replay never sleeps).
pub fn run_pipeline(
    cfg: &PipelineConfig,
    dump: Option<&AtomicBool>,
) -> Result<PipelineReport, StreamError> {
    cfg.validate()?;
    let res = Resources::load(
        &cfg.checkpoint,
        &cfg.gazetteer,
        cfg.vectors.as_deref(),
        cfg.vectors_limit,
    )?;
    run_pipeline_with(cfg, &res, dump)
}

pub fn run_pipeline_with(
    cfg: &PipelineConfig,
    res: &Resources,
    dump: Option<&AtomicBool>,
) -> Result<PipelineReport, StreamError> {
    let opts = PipelineOptions::from(cfg);
    let wall = WallClock::new();
    let virt = VirtualClock::new();
    let clock: &dyn Clock = if cfg.replay_rate.is_some() { &virt } else { &wall };
    let source: Box<dyn BufRead + Send> = match &cfg.source {
        Endpoint::Std => Box::new(std::io::BufReader::new(std::io::stdin())),
        Endpoint::File(p) => Box::new(std::io::BufReader::new(std::fs::File::open(p)?)),
    };
    match &cfg.sink {
        Endpoint::Std => {
            let out = std::io::stdout();
            run_stream(res, &opts, source, BufWriter::new(out.lock()), clock, dump)
        }
        Endpoint::File(p) => {
            let f = std::fs::File::create(p)?;
            run_stream(res, &opts, source, BufWriter::new(f), clock, dump)
        }
    }
}
