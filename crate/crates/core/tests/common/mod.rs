#![allow(dead_code)]

use std::path::PathBuf;

use chrono::{DateTime, TimeZone, Utc};
use rand::Rng;

use geostream::data::TweetRecord;
use geostream::embeddings::WordVectorStore;
use geostream::gazetteer::Gazetteer;
use geostream::model::{collect_vocab, GeoModel, ModelConfig};

pub const WORDS: &[&str] = &[
    "flood", "rain", "storm", "traffic", "game", "pizza", "river", "bridge", "downtown", "concert",
    "snow", "heat", "subway", "park", "!", "@user", "http://t.co/x", "the", "a", "on",
];

pub const PLACES: &[&str] = &[
    "Lafayette, Colorado",
    "Philadelphia PA",
    "chicago",
    "NYC",
    "Houston, TX",
    "somewhere",
];

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn cities3() -> Gazetteer {
    Gazetteer::load(&fixture("cities.csv")).unwrap()
}

pub fn cities5() -> Gazetteer {
    Gazetteer::load(&fixture("cities5.csv")).unwrap()
}

pub fn ts(y: i32, mo: u32, d: u32, h: u32, mi: u32, s: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, mo, d, h, mi, s).unwrap()
}

pub fn tweet(id: &str, text: &str, location: Option<&str>, geotag: Option<(f64, f64)>) -> TweetRecord {
    TweetRecord {
        id: id.to_string(),
        text: text.to_string(),
        created_at: ts(2019, 8, 14, 17, 30, 0),
        user_location: location.map(str::to_string),
        user_created_at: ts(2012, 3, 1, 0, 0, 0),
        geotag,
    }
}

pub fn random_time<R: Rng>(rng: &mut R) -> DateTime<Utc> {
    Utc.timestamp_opt(rng.gen_range(1_000_000_000..1_800_000_000), 0).unwrap()
}

/// Predictable tweet with 0..=len random words and a random place string.
pub fn random_tweet<R: Rng>(rng: &mut R, id: usize, max_words: usize) -> TweetRecord {
    let n = rng.gen_range(0..=max_words);
    let text: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
    TweetRecord {
        id: format!("t{id}"),
        text: text.join(" "),
        created_at: random_time(rng),
        user_location: Some(PLACES[rng.gen_range(0..PLACES.len())].to_string()),
        user_created_at: random_time(rng),
        geotag: None,
    }
}

/// Small model whose vocabulary covers [`WORDS`] minus a few, so both the
/// learned table and the out-of-vocabulary path get exercised.
pub fn small_model(classes: usize, seed: u64) -> (GeoModel, WordVectorStore) {
    small_model_with(ModelConfig::small(classes, 6), seed)
}

pub fn small_model_with(cfg: ModelConfig, seed: u64) -> (GeoModel, WordVectorStore) {
    let store = WordVectorStore::empty(cfg.word_dim, 99);
    let vocab = collect_vocab(WORDS[..15].iter().copied(), cfg.max_text_tokens);
    let model = GeoModel::new(cfg, &store, vocab, seed).unwrap();
    (model, store)
}

/// Accuracy and macro precision/recall from an explicit confusion matrix.
pub fn brute_force_metrics(gold: &[usize], pred: &[usize]) -> (f64, f64, f64) {
    let classes = gold.iter().chain(pred).max().unwrap() + 1;
    let mut cm = vec![vec![0usize; classes]; classes];
    for (&g, &p) in gold.iter().zip(pred) {
        cm[g][p] += 1;
    }
    let hits: usize = (0..classes).map(|c| cm[c][c]).sum();
    let (mut p_sum, mut r_sum, mut present) = (0.0, 0.0, 0usize);
    for (c, row_counts) in cm.iter().enumerate() {
        let col: usize = cm.iter().map(|r| r[c]).sum();
        let row: usize = row_counts.iter().sum();
        if col == 0 && row == 0 {
            continue;
        }
        present += 1;
        if col > 0 {
            p_sum += cm[c][c] as f64 / col as f64;
        }
        if row > 0 {
            r_sum += cm[c][c] as f64 / row as f64;
        }
    }
    (
        hits as f64 / gold.len() as f64,
        p_sum / present as f64,
        r_sum / present as f64,
    )
}

/// Stream resources over the three-city fixture with a fresh small model.
pub fn stream_resources(seed: u64) -> geostream::stream::Resources {
    let g = cities3();
    let (model, store) = small_model(g.len(), seed);
    geostream::stream::Resources::new(model, store, g).unwrap()
}

/// NDJSON source with the three kinds of line interleaved in a seeded
/// order. Malformed lines alternate between broken JSON and records with a
/// bad timestamp.
pub fn mixed_source(
    g: &Gazetteer,
    geotagged: usize,
    predictable: usize,
    malformed: usize,
    seed: u64,
) -> String {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut kinds: Vec<u8> = [vec![0u8; geotagged], vec![1; predictable], vec![2; malformed]].concat();
    kinds.shuffle(&mut rng);
    let mut out = String::new();
    for (i, k) in kinds.into_iter().enumerate() {
        let line = match k {
            0 => {
                let label = rng.gen_range(0..g.len());
                let p = g.place_within(label, &mut rng).unwrap();
                let mut t = random_tweet(&mut rng, i, 12);
                t.geotag = Some(p);
                t.to_ndjson()
            }
            1 => random_tweet(&mut rng, i, 12).to_ndjson(),
            _ if i % 2 == 0 => format!("{{\"id\": \"m{i}\", \"text\": "),
            _ => random_tweet(&mut rng, i, 3)
                .to_ndjson()
                .replace("created_at\":\"", "created_at\":\"not-a-date"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn predictable_source(n: usize, seed: u64) -> String {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| random_tweet(&mut rng, i, 12).to_ndjson() + "\n").collect()
}
