//! Pretrained word vectors, out-of-vocabulary initialization, tokenization
//! and the character vocabulary used by the profile-location encoder.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Half-width of the uniform range used for out-of-vocabulary vectors.
pub const OOV_RANGE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("cannot read word vectors")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    DimMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("word vector file is empty")]
    Empty,
}

/// Word → vector table with deterministic vectors for unknown words.
///
/// The OOV cache sits behind a lock so the store can be shared across
/// inference threads; a cached vector is a pure function of `(seed, word)`,
/// so concurrent first lookups of the same word agree.
#[derive(Debug)]
pub struct WordVectorStore {
    dim: usize,
    seed: u64,
    table: HashMap<String, Arc<[f64]>>,
    oov_cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl WordVectorStore {
    pub fn empty(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            table: HashMap::new(),
            oov_cache: RwLock::new(HashMap::new()),
        }
    }

    /// Builds a store from in-memory vectors. Panics if a vector's length
    /// differs from `dim`.
    pub fn from_vectors(
        dim: usize,
        seed: u64,
        vectors: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Self {
        let mut store = Self::empty(dim, seed);
        for (word, v) in vectors {
            assert_eq!(v.len(), dim, "vector for {word:?} has wrong length");
            store.table.entry(word).or_insert_with(|| v.into());
        }
        store
    }

    /// Loads the text export format: an optional `<count> <dim>` header,
    /// then `<word> <v1> ... <v_dim>` per line. Duplicate words keep the
    /// first occurrence.
    pub fn load(path: &Path, limit: Option<usize>, seed: u64) -> Result<Self, EmbeddingError> {
        let reader = BufReader::new(File::open(path)?);
        Self::read(reader, limit, seed)
    }

    pub fn read(
        reader: impl BufRead,
        limit: Option<usize>,
        seed: u64,
    ) -> Result<Self, EmbeddingError> {
        let mut dim: Option<usize> = None;
        let mut store: Option<Self> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = idx + 1;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else {
                continue;
            };
            let rest: Vec<&str> = fields.collect();

            if idx == 0 && rest.len() == 1 {
                if let (Ok(_), Ok(d)) = (word.parse::<usize>(), rest[0].parse::<usize>()) {
                    if d == 0 {
                        return Err(EmbeddingError::Parse {
                            line: line_no,
                            reason: "header dimension is zero".into(),
                        });
                    }
                    dim = Some(d);
                    continue;
                }
            }

            let expected = *dim.get_or_insert(rest.len());
            if expected == 0 {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    reason: format!("word {word:?} has no vector values"),
                });
            }
            if rest.len() != expected {
                return Err(EmbeddingError::DimMismatch {
                    line: line_no,
                    expected,
                    found: rest.len(),
                });
            }
            let values = rest
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Parse {
                    line: line_no,
                    reason: format!("bad float: {e}"),
                })?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    reason: "non-finite value".into(),
                });
            }
            let s = store.get_or_insert_with(|| Self::empty(expected, seed));
            if limit.is_some_and(|l| s.table.len() >= l) {
                break;
            }
            s.table
                .entry(word.to_string())
                .or_insert_with(|| values.into());
        }
        match (store, dim) {
            (Some(s), _) => Ok(s),
            (None, Some(d)) => Ok(Self::empty(d, seed)),
            (None, None) => Err(EmbeddingError::Empty),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.table.contains_key(word)
    }

    /// The pretrained vector for `word`, or its deterministic random vector.
    pub fn lookup(&self, word: &str) -> Arc<[f64]> {
        if let Some(v) = self.table.get(word) {
            return v.clone();
        }
        if let Some(v) = self.oov_cache.read().expect("oov cache poisoned").get(word) {
            return v.clone();
        }
        let v: Arc<[f64]> = oov_vector(self.seed, word, self.dim).into();
        self.oov_cache
            .write()
            .expect("oov cache poisoned")
            .entry(word.to_string())
            .or_insert(v)
            .clone()
    }
}

/// Components uniform in `[-0.25, 0.25]`, derived only from `(seed, word)`.
pub fn oov_vector(seed: u64, word: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(word.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim)
        .map(|_| rng.gen_range(-OOV_RANGE..=OOV_RANGE))
        .collect()
}

/// Lowercases, splits on whitespace and peels leading/trailing ASCII
/// punctuation into one-character tokens. Tokens containing `://` are kept
/// whole, and a leading `@` or `#` stays attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let word = raw.to_lowercase();
        if word.contains("://") {
            out.push(word);
            continue;
        }
        let bytes = word.as_bytes();
        let is_strippable = |b: u8| b.is_ascii_punctuation();
        let mut start = 0;
        while start < bytes.len()
            && is_strippable(bytes[start])
            && !matches!(bytes[start], b'@' | b'#')
        {
            start += 1;
        }
        let mut end = bytes.len();
        while end > start && is_strippable(bytes[end - 1]) {
            end -= 1;
        }
        // A token made only of '@'/'#' plus punctuation: keep the marker.
        if end == start && start < bytes.len() {
            end = start + 1;
        }
        out.extend(word[..start].chars().map(String::from));
        if end > start {
            out.push(word[start..end].to_string());
        }
        out.extend(word[end..].chars().map(String::from));
    }
    out
}

/// Printable ASCII plus one shared id for everything else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    unk_id: usize,
}

impl Default for CharVocab {
    fn default() -> Self {
        Self::new((0x20u8..=0x7e).map(char::from))
    }
}

impl CharVocab {
    pub fn new(chars: impl IntoIterator<Item = char>) -> Self {
        let mut list = Vec::new();
        let mut index = HashMap::new();
        for c in chars {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(c) {
                e.insert(list.len());
                list.push(c);
            }
        }
        let unk_id = list.len();
        Self {
            chars: list,
            index,
            unk_id,
        }
    }

    /// Number of ids, including the unknown id.
    pub fn size(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.unk_id)
    }

    pub fn encode(&self, s: &str) -> Vec<usize> {
        s.chars().map(|c| self.id(c)).collect()
    }
}
