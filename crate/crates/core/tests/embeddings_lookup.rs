use std::io::Write;

use geostream::embeddings::{tokenize, WordVectorStore, OOV_RANGE};
use proptest::prelude::*;
use rand::distributions::Alphanumeric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn tokenizing_joined_tokens_is_idempotent(text in "\\PC{0,60}") {
        let once = tokenize(&text);
        prop_assert_eq!(tokenize(&once.join(" ")), once);
    }
}

#[test]
fn oov_components_stay_in_range() {
    let store = WordVectorStore::empty(50, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.gen_range(1..12);
        let word: String = (&mut rng).sample_iter(&Alphanumeric).take(len).map(char::from).collect();
        let v = store.lookup(&word);
        assert_eq!(v.len(), 50);
        worst = v.iter().fold(worst, |m, x| m.max(x.abs()));
    }
    assert!(worst <= OOV_RANGE);
    assert!(worst > 0.2, "components should spread over the range");
}

#[test]
fn reload_reproduces_every_vector() {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    writeln!(f, "2 3").unwrap();
    writeln!(f, "flood 0.1 -0.2 0.3").unwrap();
    writeln!(f, "houston 1.5 2.5 -3.5").unwrap();
    f.flush().unwrap();
    let a = WordVectorStore::load(f.path(), None, 17).unwrap();
    let b = WordVectorStore::load(f.path(), None, 17).unwrap();
    for w in ["flood", "houston", "xqzt", "!"] {
        assert_eq!(a.lookup(w), b.lookup(w), "{w}");
    }
    assert_eq!(&a.lookup("flood")[..], &[0.1, -0.2, 0.3]);
    let other = WordVectorStore::load(f.path(), None, 18).unwrap();
    assert_eq!(a.lookup("houston"), other.lookup("houston"));
    assert_ne!(a.lookup("xqzt"), other.lookup("xqzt"));
}

#[test]
fn concurrent_lookups_agree() {
    let store = WordVectorStore::empty(8, 5);
    let words: Vec<String> = (0..200).map(|i| format!("w{i}")).collect();
    let results: Vec<Vec<Vec<f64>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| s.spawn(|| words.iter().map(|w| store.lookup(w).to_vec()).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(results.windows(2).all(|p| p[0] == p[1]));
}
