use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ExperimentSpec, Task};
use crate::model::seeded_rng;
use crate::{Error, Result};

/// Printable symbol for index i: single letters first, then letter+digit
/// pairs, so large alphabets still exercise multi-character wordpieces.
pub fn symbol(i: usize) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    if i < LETTERS.len() {
        (LETTERS[i] as char).to_string()
    } else {
        format!(
            "{}{}",
            LETTERS[i % LETTERS.len()] as char,
            i / LETTERS.len()
        )
    }
}

/// Bijective symbol mapping plus the seeded local-reordering rule.
/// The target line is `map(reorder(source))`, where `reorder` swaps the
/// adjacent pair starting at position 2k iff `(k + offset) % period == 0`.
/// Everything needed to replay the transformation lives in this struct
/// (and in its emitted file), so the oracle `apply` is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub mapping: Vec<(String, String)>,
    pub swap_period: usize,
    pub swap_offset: usize,
}

impl Lexicon {
    fn generate(symbols: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut targets: Vec<usize> = (0..symbols).collect();
        // Fisher-Yates driven by the seeded stream.
        for i in (1..symbols).rev() {
            let j = rng.gen_range(0..=i);
            targets.swap(i, j);
        }
        let mapping = (0..symbols)
            .map(|i| (symbol(i), symbol(targets[i])))
            .collect();
        let swap_period = rng.gen_range(2..=3);
        let swap_offset = rng.gen_range(0..swap_period);
        Lexicon {
            mapping,
            swap_period,
            swap_offset,
        }
    }

    /// Replay the transformation on a source line.
    pub fn apply(&self, source: &str) -> Result<String> {
        let mut words: Vec<&str> = source.split_whitespace().collect();
        let mut k = 0;
        let mut i = 0;
        while i + 1 < words.len() {
            if (k + self.swap_offset) % self.swap_period == 0 {
                words.swap(i, i + 1);
            }
            k += 1;
            i += 2;
        }
        words
            .into_iter()
            .map(|w| {
                self.mapping
                    .iter()
                    .find(|(s, _)| s == w)
                    .map(|(_, t)| t.clone())
                    .ok_or_else(|| Error::Data(format!("symbol {w:?} not in lexicon")))
            })
            .collect::<Result<Vec<String>>>()
            .map(|v| v.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "reorder\t{}\t{}", self.swap_period, self.swap_offset)?;
        for (s, t) in &self.mapping {
            writeln!(f, "{s}\t{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty lexicon file".into()))?;
        let parts: Vec<&str> = header.split('\t').collect();
        if parts.len() != 3 || parts[0] != "reorder" {
            return Err(Error::Data("lexicon header must be `reorder\\tP\\tO`".into()));
        }
        let swap_period = parts[1]
            .parse()
            .map_err(|_| Error::Data("bad reorder period".into()))?;
        let swap_offset = parts[2]
            .parse()
            .map_err(|_| Error::Data("bad reorder offset".into()))?;
        let mapping = lines
            .map(|l| {
                l.split_once('\t')
                    .map(|(s, t)| (s.to_string(), t.to_string()))
                    .ok_or_else(|| Error::Data(format!("bad lexicon line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Lexicon {
            mapping,
            swap_period,
            swap_offset,
        })
    }
}

/// Seeded first-order Markov chain over the symbol alphabet. Each symbol
/// gets a small successor set, giving the corpora enough structure for
/// masked-token prediction to beat the uniform baseline by a wide margin.
struct MarkovSource {
    successors: Vec<Vec<usize>>,
    symbols: usize,
}

impl MarkovSource {
    fn new(symbols: usize, rng: &mut ChaCha8Rng) -> Self {
        let branch = 4.min(symbols);
        let successors = (0..symbols)
            .map(|_| {
                let mut pool: Vec<usize> = (0..symbols).collect();
                for i in 0..branch {
                    let j = rng.gen_range(i..symbols);
                    pool.swap(i, j);
                }
                pool.truncate(branch);
                pool
            })
            .collect();
        MarkovSource {
            successors,
            symbols,
        }
    }

    fn line(&self, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> String {
        let len = rng.gen_range(min_len..=max_len);
        let mut ids = Vec::with_capacity(len);
        let mut current = rng.gen_range(0..self.symbols);
        ids.push(current);
        for _ in 1..len {
            let next = self.successors[current][rng.gen_range(0..self.successors[current].len())];
            ids.push(next);
            current = next;
        }
        ids.iter()
            .map(|&i| symbol(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Generated dataset splits, pure in (spec, seed).
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub lexicon: Option<Lexicon>,
}

/// Generate the three splits. Sources are deduplicated across every
/// split (each split also draws from its own seed stream), so train and
/// test are disjoint by construction.
pub fn gen_synthetic(spec: &ExperimentSpec) -> Result<SyntheticData> {
    if spec.max_len > spec.model.max_tgt_len {
        return Err(Error::Config(format!(
            "length range up to {} exceeds max_tgt_len {}",
            spec.max_len, spec.model.max_tgt_len
        )));
    }
    let mut chain_rng = seeded_rng(spec.seed, "markov-chain");
    let chain = MarkovSource::new(spec.vocab_symbols, &mut chain_rng);
    let lexicon = match spec.task {
        Task::LexiconTranslate => {
            let mut rng = seeded_rng(spec.seed, "lexicon");
            Some(Lexicon::generate(spec.vocab_symbols, &mut rng))
        }
        _ => None,
    };

    let make_target = |src: &str| -> Result<String> {
        Ok(match spec.task {
            Task::Copy => src.to_string(),
            Task::Reverse => src
                .split_whitespace()
                .rev()
                .collect::<Vec<_>>()
                .join(" "),
            Task::LexiconTranslate => lexicon.as_ref().expect("lexicon task").apply(src)?,
        })
    };

    let mut seen: HashSet<String> = HashSet::new();
    let mut make_split = |tag: &str, size: usize| -> Result<Vec<(String, String)>> {
        let mut rng = seeded_rng(spec.seed, tag);
        let mut out = Vec::with_capacity(size);
        let mut attempts = 0usize;
        while out.len() < size {
            attempts += 1;
            if attempts > 200 * size.max(1) {
                return Err(Error::Data(format!(
                    "cannot draw {size} distinct sources for split {tag}; symbol space too small"
                )));
            }
            let src = chain.line(spec.min_len, spec.max_len, &mut rng);
            if !seen.insert(src.clone()) {
                continue;
            }
            let tgt = make_target(&src)?;
            out.push((src, tgt));
        }
        Ok(out)
    };

    Ok(SyntheticData {
        train: make_split("data-train", spec.train_pairs)?,
        valid: make_split("data-valid", spec.valid_pairs)?,
        test: make_split("data-test", spec.test_pairs)?,
        lexicon,
    })
}

/// Tab-separated source↹target, one pair per line, UTF-8.
pub fn write_tsv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (s, t) in pairs {
        writeln!(f, "{s}\t{t}")?;
    }
    Ok(())
}

pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(s, t)| (s.to_string(), t.to_string()))
                .ok_or_else(|| {
                    Error::Data(format!("{}:{}: missing tab separator", path.display(), i + 1))
                })
        })
        .collect()
}
