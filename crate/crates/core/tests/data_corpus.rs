mod common;

use std::collections::HashMap;
use std::io::Write;

use chrono::{TimeZone, Utc};
use geostream::data::{build_dataset, gen_synthetic, read_dataset, TweetRecord};
use geostream::embeddings::tokenize;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = TweetRecord> {
    (
        "[a-z0-9]{1,12}",
        "\\PC{0,40}",
        0i64..4_000_000_000,
        proptest::option::of("\\PC{0,20}"),
        0i64..4_000_000_000,
        proptest::option::of((-90.0f64..=90.0, -180.0f64..=180.0)),
    )
        .prop_map(|(id, text, t, loc, u, geo)| TweetRecord {
            id,
            text,
            created_at: Utc.timestamp_opt(t, 0).unwrap(),
            user_location: loc,
            user_created_at: Utc.timestamp_opt(u, 0).unwrap(),
            geotag: geo,
        })
}

proptest! {
    #[test]
    fn ndjson_round_trip(t in record()) {
        let back = TweetRecord::parse(&t.to_ndjson()).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn geotag_and_predictable_are_exclusive(t in record()) {
        prop_assert!(!(t.has_geotag() && t.is_predictable()));
    }
}

#[test]
fn philadelphia_archive_labels_zero() {
    let g = common::cities3();
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for (i, (lat, lon)) in [(39.95, -75.16), (39.87, -75.31), (40.12, -74.94)].iter().enumerate() {
        let t = common::tweet(&format!("p{i}"), "hello", None, Some((*lat, *lon)));
        writeln!(f, "{}", t.to_ndjson()).unwrap();
    }
    f.flush().unwrap();
    let (examples, stats) = build_dataset(f.path(), &g).unwrap();
    assert_eq!(examples.len(), 3);
    assert!(examples.iter().all(|e| e.label == 0));
    assert_eq!(stats.rejected(), 0);
}

#[test]
fn non_geotagged_archive_is_all_rejected() {
    let g = common::cities3();
    let text: String = (0..7)
        .map(|i| common::tweet(&format!("n{i}"), "x", Some("Philadelphia"), None).to_ndjson() + "\n")
        .collect();
    let (examples, stats) = read_dataset(text.as_bytes(), &g);
    assert!(examples.is_empty());
    assert_eq!(stats.rejected(), 7);
    assert_eq!(stats.not_geotagged, 7);
}

#[test]
fn mixed_archive_counts_sum_to_lines() {
    let g = common::cities3();
    let mut lines = Vec::new();
    let mut expect = (0, 0, 0, 0);
    for i in 0..60 {
        match i % 4 {
            0 => {
                let p = g.place_within_seeded(i % 3, i as u64).unwrap();
                lines.push(common::tweet(&i.to_string(), "in", None, Some(p)).to_ndjson());
                expect.0 += 1;
            }
            1 => {
                lines.push(common::tweet(&i.to_string(), "out", None, Some((0.0, 0.0))).to_ndjson());
                expect.1 += 1;
            }
            2 => {
                lines.push(common::tweet(&i.to_string(), "none", Some("x"), None).to_ndjson());
                expect.2 += 1;
            }
            _ => {
                lines.push("{broken".to_string());
                expect.3 += 1;
            }
        }
    }
    let text = lines.join("\n");
    let (examples, stats) = read_dataset(text.as_bytes(), &g);
    assert_eq!(stats.lines, 60);
    assert_eq!(
        (examples.len(), stats.outside_gazetteer, stats.not_geotagged, stats.parse_errors),
        expect
    );
    assert_eq!(examples.len() + stats.rejected(), stats.lines);
    for e in &examples {
        let (lat, lon) = e.tweet.geotag.unwrap();
        assert!(g.get(e.label).unwrap().bbox.contains(lat, lon));
    }
}

/// Multiclass perceptron over token counts.
fn perceptron_train_accuracy(docs: &[(Vec<String>, usize)], classes: usize) -> f64 {
    let mut index = HashMap::new();
    for (toks, _) in docs {
        for t in toks {
            let n = index.len();
            index.entry(t.clone()).or_insert(n);
        }
    }
    let mut w = vec![vec![0.0f64; index.len()]; classes];
    let score = |w: &[Vec<f64>], toks: &[String], c: usize| -> f64 {
        toks.iter().map(|t| w[c][index[t]]).sum()
    };
    let predict = |w: &[Vec<f64>], toks: &[String]| {
        (0..classes)
            .max_by(|&a, &b| score(w, toks, a).total_cmp(&score(w, toks, b)).then(b.cmp(&a)))
            .unwrap()
    };
    for _ in 0..50 {
        let mut errors = 0;
        for (toks, y) in docs {
            let p = predict(&w, toks);
            if p != *y {
                errors += 1;
                for t in toks {
                    w[*y][index[t]] += 1.0;
                    w[p][index[t]] -= 1.0;
                }
            }
        }
        if errors == 0 {
            break;
        }
    }
    let right = docs.iter().filter(|(t, y)| predict(&w, t) == *y).count();
    right as f64 / docs.len() as f64
}

#[test]
fn noiseless_corpus_is_linearly_separable() {
    let g = common::cities3();
    let corpus = gen_synthetic(&g, 20, 0.0, 5);
    assert_eq!(corpus.len(), 60);
    let docs: Vec<_> = corpus
        .iter()
        .map(|e| (tokenize(&e.tweet.text), e.label))
        .collect();
    assert_eq!(perceptron_train_accuracy(&docs, 3), 1.0);
}

#[test]
fn synthetic_tweets_round_trip_and_are_labeled_by_geotag() {
    let g = common::cities5();
    let corpus = gen_synthetic(&g, 10, 0.3, 11);
    let text: String = corpus.iter().map(|e| e.tweet.to_ndjson() + "\n").collect();
    let (examples, stats) = read_dataset(text.as_bytes(), &g);
    assert_eq!(stats.examples, corpus.len());
    assert_eq!(examples, corpus);
}
