//! Wordpiece vocabularies and text↔id conversion.
//!
//! Vocabularies are built from a corpus: the six reserved special tokens,
//! then every single character (plus its `##` continuation form where one
//! occurs word-internally), then the most frequent multi-character pieces
//! until the target size is reached. Encoding is greedy
//! longest-match-first per word, with `[UNK]` for any word that cannot be
//! segmented. Everything is deterministic.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Reserved special-token ids, fixed for every vocabulary.
pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const MASK: u32 = 2;
pub const LENGTH: u32 = 3;
pub const BOS: u32 = 4;
pub const EOS: u32 = 5;

pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[MASK]", "[LENGTH]", "[BOS]", "[EOS]"];

/// Number of reserved ids at the front of every vocabulary.
pub const NUM_SPECIALS: usize = SPECIAL_TOKENS.len();

/// Token↔id bijection with the six reserved specials at ids 0–5.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
}

impl Vocabulary {
    /// Build a vocabulary from corpus lines.
    ///
    /// Every character seen in the corpus is included as a word-initial
    /// piece, and as a `##` continuation piece when it occurs
    /// word-internally, so any corpus word segments fully (encode never
    /// needs `[UNK]` on the build corpus). Remaining slots (up to
    /// `target_size`) are filled with the most frequent multi-character
    /// substrings, ties broken by shorter piece then lexicographic order.
    pub fn build(corpus: &[impl AsRef<str>], target_size: usize, lowercase: bool) -> Result<Self> {
        let mut words: HashMap<String, u64> = HashMap::new();
        for line in corpus {
            let line = normalize(line.as_ref(), lowercase);
            for w in line.split_whitespace() {
                *words.entry(w.to_string()).or_insert(0) += 1;
            }
        }
        if words.is_empty() {
            return Err(Error::Data(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }

        // Mandatory single-character coverage.
        let mut initial_chars: Vec<String> = Vec::new();
        let mut cont_chars: Vec<String> = Vec::new();
        {
            let mut seen_init: HashMap<char, ()> = HashMap::new();
            let mut seen_cont: HashMap<char, ()> = HashMap::new();
            for w in words.keys() {
                for (i, c) in w.chars().enumerate() {
                    if seen_init.insert(c, ()).is_none() {
                        initial_chars.push(c.to_string());
                    }
                    if i > 0 && seen_cont.insert(c, ()).is_none() {
                        cont_chars.push(format!("##{c}"));
                    }
                }
            }
        }
        initial_chars.sort();
        cont_chars.sort();

        let mandatory = NUM_SPECIALS + initial_chars.len() + cont_chars.len();
        if target_size < mandatory {
            return Err(Error::Config(format!(
                "vocabulary size {target_size} below minimum {mandatory} \
                 (6 specials + {} characters + {} continuation characters)",
                initial_chars.len(),
                cont_chars.len()
            )));
        }

        // Candidate multi-character pieces: every substring of every word,
        // word-initial ones bare and word-internal ones with the ## prefix,
        // weighted by word frequency.
        let mut piece_counts: HashMap<String, u64> = HashMap::new();
        for (w, &count) in &words {
            let chars: Vec<char> = w.chars().collect();
            for start in 0..chars.len() {
                for end in (start + 2)..=chars.len() {
                    let sub: String = chars[start..end].iter().collect();
                    let piece = if start == 0 { sub } else { format!("##{sub}") };
                    *piece_counts.entry(piece).or_insert(0) += count;
                }
            }
        }
        let mut candidates: Vec<(String, u64)> = piece_counts.into_iter().collect();
        candidates.sort_by(|(pa, ca), (pb, cb)| {
            cb.cmp(ca)
                .then(pa.chars().count().cmp(&pb.chars().count()))
                .then(pa.cmp(pb))
        });

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(initial_chars);
        tokens.extend(cont_chars);
        for (piece, _) in candidates {
            if tokens.len() >= target_size {
                break;
            }
            tokens.push(piece);
        }
        Vocabulary::from_tokens(tokens, lowercase)
    }

    fn from_tokens(tokens: Vec<String>, lowercase: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            tokens,
            ids,
            lowercase,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Greedy longest-match-first wordpiece encoding. Total: a word that
    /// cannot be segmented (a character outside the vocabulary alphabet)
    /// becomes a single `[UNK]`. Ordinary text never maps to a special
    /// token id other than that fallback.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let text = normalize(text, self.lowercase);
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut out);
        }
        out
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces: Vec<u32> = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut matched = None;
            while end > start {
                let sub: String = chars[start..end].iter().collect();
                let piece = if start == 0 { sub } else { format!("##{sub}") };
                if let Some(&id) = self.ids.get(&piece) {
                    // Specials occupy ids 0–5 and are never produced by
                    // segmentation of ordinary text.
                    if id as usize >= NUM_SPECIALS {
                        matched = Some(id);
                        break;
                    }
                }
                end -= 1;
            }
            match matched {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Join `##` pieces onto their predecessors, dropping special tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words: Vec<String> = Vec::new();
        for &id in ids {
            let token = self.token(id).ok_or_else(|| {
                Error::Data(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.len()
                ))
            })?;
            if (id as usize) < NUM_SPECIALS {
                continue;
            }
            match token.strip_prefix("##") {
                Some(rest) => match words.last_mut() {
                    Some(last) => last.push_str(rest),
                    None => words.push(rest.to_string()),
                },
                None => words.push(token.to_string()),
            }
        }
        Ok(words.join(" "))
    }

    /// One token per line, line number = id; the first six lines are the
    /// reserved specials.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    /// Load a vocabulary file, validating the reserved prefix. The
    /// lowercase flag is inferred: a vocabulary whose ordinary tokens are
    /// all lowercase is treated as uncased.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Data(format!(
                "vocabulary file {} has fewer than {NUM_SPECIALS} lines",
                path.display()
            )));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Data(format!(
                    "vocabulary file {}: line {} must be {expected}, found {:?}",
                    path.display(),
                    i + 1,
                    tokens[i]
                )));
            }
        }
        let lowercase = tokens[NUM_SPECIALS..]
            .iter()
            .all(|t| !t.chars().any(|c| c.is_uppercase()));
        Vocabulary::from_tokens(tokens, lowercase)
    }
}

/// Whitespace normalization (and lowercasing when the vocabulary is
/// uncased): the identity on which encode∘decode round-trips.
pub fn normalize(text: &str, lowercase: bool) -> String {
    let joined = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if lowercase {
        joined.to_lowercase()
    } else {
        joined
    }
}
