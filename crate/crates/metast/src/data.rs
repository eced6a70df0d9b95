//! Dataset ingestion and construction: CoNLL column files, K-shot splits,
//! a synthetic corpus generator with controllable word/slot overlap, and
//! label corruption for noise experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::Vocab;
use crate::rngutil::stream_rng;
use crate::seqlab::{LabelScheme, TaggedSentence};
use crate::{Error, Result};

/// A tagged corpus plus the scheme and vocabulary it was built under.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scheme: LabelScheme,
    pub sentences: Vec<TaggedSentence>,
    pub vocab: Vocab,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.scheme == other.scheme && self.sentences == other.sentences
    }
}

impl Dataset {
    /// Builds a dataset, deriving the vocabulary from the sentences' tokens
    /// in first-seen order. Every sentence is validated against the scheme.
    pub fn new(scheme: LabelScheme, sentences: Vec<TaggedSentence>) -> Result<Self> {
        for s in &sentences {
            s.validate(&scheme)?;
        }
        let vocab = Vocab::build(
            sentences
                .iter()
                .flat_map(|s| s.tokens.iter().map(|t| t.as_str())),
        );
        Ok(Dataset {
            scheme,
            sentences,
            vocab,
        })
    }

    /// Same corpus under a caller-supplied vocabulary (e.g. encoding a test
    /// set with the train vocabulary so unseen words map to unk).
    pub fn with_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab = vocab;
        self
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }

    /// Token-id sequences under this dataset's vocabulary.
    pub fn encode(&self) -> Vec<Vec<usize>> {
        self.sentences
            .iter()
            .map(|s| self.vocab.encode(&s.tokens))
            .collect()
    }
}

/// K-shot labeled set, unlabeled pool and test set sharing one scheme and
/// the train-side vocabulary.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl FewShotSplit {
    /// Attaches a test set, re-keyed to the train vocabulary so test-only
    /// words become unk at encoding time.
    pub fn with_test(mut self, test: Dataset) -> Result<Self> {
        if test.scheme != self.labeled.scheme {
            return Err(Error::Schema(
                "test set scheme differs from train scheme".into(),
            ));
        }
        self.test = test.with_vocab(self.labeled.vocab.clone());
        Ok(self)
    }
}

/// Parses CoNLL column format: one `token ... tag` line per token (tag in
/// the last column), blank line between sentences, `-DOCSTART-` lines
/// ignored. With no scheme given, slot types are inferred from the observed
/// tags and sorted for determinism.
pub fn parse_conll(text: &str, scheme: Option<&LabelScheme>) -> Result<Dataset> {
    struct Raw {
        tokens: Vec<String>,
        tags: Vec<(String, usize)>,
    }
    let mut raws: Vec<Raw> = Vec::new();
    let mut cur = Raw {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            if !cur.tokens.is_empty() {
                raws.push(std::mem::replace(
                    &mut cur,
                    Raw {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let mut cols = trimmed.split_whitespace();
        let token = cols.next().unwrap();
        if token == "-DOCSTART-" {
            continue;
        }
        let tag = cols.last().ok_or(Error::Parse {
            line: lineno,
            msg: format!("expected `token tag`, found {trimmed:?}"),
        })?;
        if tag != "O" && !tag.starts_with("B-") && !tag.starts_with("I-") {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("tag {tag:?} is not O, B-<type> or I-<type>"),
            });
        }
        cur.tokens.push(token.to_string());
        cur.tags.push((tag.to_string(), lineno));
    }
    if !cur.tokens.is_empty() {
        raws.push(cur);
    }

    let scheme = match scheme {
        Some(s) => s.clone(),
        None => {
            let mut types: Vec<&str> = raws
                .iter()
                .flat_map(|r| r.tags.iter())
                .filter_map(|(t, _)| t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")))
                .collect();
            types.sort_unstable();
            types.dedup();
            LabelScheme::new(types.into_iter().map(String::from).collect())?
        }
    };
    let mut sentences = Vec::with_capacity(raws.len());
    for r in raws {
        let mut tags = Vec::with_capacity(r.tags.len());
        for (name, lineno) in &r.tags {
            let id = scheme.tag_id(name).ok_or_else(|| {
                Error::Schema(format!("line {lineno}: tag {name:?} not in scheme"))
            })?;
            tags.push(id);
        }
        sentences.push(TaggedSentence::new(r.tokens, tags));
    }
    Dataset::new(scheme, sentences)
}

/// Serializes back to CoNLL column format; inverse of [`parse_conll`].
pub fn to_conll(data: &Dataset) -> Result<String> {
    let mut out = String::new();
    for (i, s) in data.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, &tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(data.scheme.tag_name(tag)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn slot_types_of(s: &TaggedSentence, scheme: &LabelScheme) -> Vec<usize> {
    let mut present = vec![false; scheme.slot_types().len()];
    for &t in &s.tags {
        if let Ok(Some(slot)) = scheme.slot_of(t) {
            present[slot] = true;
        }
    }
    (0..present.len()).filter(|&i| present[i]).collect()
}

/// Greedy covering K-shot sampler. Slot types are visited in scheme order;
/// for each, sentences containing the type are drawn uniformly without
/// replacement until K selected sentences credit it (a sentence credits
/// every slot type it contains). Unselected sentences become the unlabeled
/// pool with tags hidden (all O). The split shares the full-train
/// vocabulary, so no test text leaks into it.
pub fn kshot_sample(train: &Dataset, k: usize, seed: u64) -> Result<FewShotSplit> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let scheme = &train.scheme;
    let n = train.sentences.len();
    let per_sentence_types: Vec<Vec<usize>> = train
        .sentences
        .iter()
        .map(|s| slot_types_of(s, scheme))
        .collect();
    let mut rng = stream_rng(seed, "kshot", 0);
    let mut selected = vec![false; n];
    let mut credits = vec![0usize; scheme.slot_types().len()];
    let mut warnings = Vec::new();
    for slot in 0..scheme.slot_types().len() {
        let mut candidates: Vec<usize> = (0..n)
            .filter(|&i| !selected[i] && per_sentence_types[i].contains(&slot))
            .collect();
        if credits[slot] == 0 && candidates.is_empty() {
            warnings.push(format!(
                "slot type {:?} absent from train data; skipped",
                scheme.slot_types()[slot]
            ));
            continue;
        }
        while credits[slot] < k && !candidates.is_empty() {
            let j = rng.random_range(0..candidates.len());
            let idx = candidates.swap_remove(j);
            selected[idx] = true;
            for &t in &per_sentence_types[idx] {
                credits[t] += 1;
            }
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, s) in train.sentences.iter().enumerate() {
        if selected[i] {
            labeled.push(s.clone());
        } else {
            let mut hidden = s.clone();
            hidden.tags = vec![0; hidden.len()];
            hidden.soft_tags = None;
            unlabeled.push(hidden);
        }
    }
    let labeled = Dataset::new(scheme.clone(), labeled)?.with_vocab(train.vocab.clone());
    let unlabeled = Dataset::new(scheme.clone(), unlabeled)?.with_vocab(train.vocab.clone());
    let test = Dataset::new(scheme.clone(), Vec::new())?.with_vocab(train.vocab.clone());
    Ok(FewShotSplit {
        labeled,
        unlabeled,
        test,
        seed,
        warnings,
    })
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_slot_types: usize,
    pub vocab_size: usize,
    pub n_sentences: usize,
    pub length_range: (usize, usize),
    pub span_rate: f64,
    /// 1.0 = every slot word comes from the slot's private word segment;
    /// 0.0 = slot words are drawn from the whole vocabulary.
    pub slot_word_disjointness: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.length_range;
        if self.n_slot_types == 0 {
            return Err(Error::Config("need at least one slot type".into()));
        }
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "bad length range ({lo}, {hi}): need 1 <= min <= max"
            )));
        }
        if !(0.0..=1.0).contains(&self.span_rate) {
            return Err(Error::Config("span_rate must be in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.slot_word_disjointness) {
            return Err(Error::Config("slot_word_disjointness must be in [0, 1]".into()));
        }
        let background = self.vocab_size / 2;
        let seg = (self.vocab_size - background) / self.n_slot_types;
        if background < 2 || seg < 2 {
            return Err(Error::Config(format!(
                "vocab of {} words cannot give {} slot types disjoint segments",
                self.vocab_size, self.n_slot_types
            )));
        }
        Ok(())
    }
}

/// Generates a corpus where each slot type owns a word segment (overlap
/// controlled by `slot_word_disjointness`), spans are 1-3 tokens long at
/// `span_rate` per eligible position, and at least one background token
/// separates consecutive spans so gold tag sequences are unambiguous.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let n_background = spec.vocab_size / 2;
    let seg = (spec.vocab_size - n_background) / spec.n_slot_types;
    let slot_types: Vec<String> = (0..spec.n_slot_types).map(|i| format!("T{i}")).collect();
    let scheme = LabelScheme::new(slot_types)?;
    let word = |i: usize| format!("w{i}");

    let mut rng = stream_rng(spec.seed, "synth", 0);
    let (lo, hi) = spec.length_range;
    let mut sentences = Vec::with_capacity(spec.n_sentences);
    for _ in 0..spec.n_sentences {
        let len = rng.random_range(lo..=hi);
        let mut tokens = Vec::with_capacity(len);
        let mut tags = Vec::with_capacity(len);
        let mut can_span = true;
        while tokens.len() < len {
            let pos_left = len - tokens.len();
            if can_span && rng.random::<f64>() < spec.span_rate {
                let slot = rng.random_range(0..spec.n_slot_types);
                let span_len = rng.random_range(1..=3usize).min(pos_left);
                for j in 0..span_len {
                    let w = if rng.random::<f64>() < spec.slot_word_disjointness {
                        n_background + slot * seg + rng.random_range(0..seg)
                    } else {
                        rng.random_range(0..spec.vocab_size)
                    };
                    tokens.push(word(w));
                    tags.push(if j == 0 {
                        scheme.begin_id(slot)
                    } else {
                        scheme.inside_id(slot)
                    });
                }
                can_span = false;
            } else {
                tokens.push(word(rng.random_range(0..n_background)));
                tags.push(0);
                can_span = true;
            }
        }
        sentences.push(TaggedSentence::new(tokens, tags));
    }
    // stable vocabulary independent of which words the sample happened to use
    let words: Vec<String> = (0..spec.vocab_size).map(word).collect();
    let full_vocab = Vocab::build(words.iter().map(|s| s.as_str()));
    Ok(Dataset::new(scheme, sentences)?.with_vocab(full_vocab))
}

/// Independently flips each token's tag to a uniformly random different tag
/// with probability `flip_rate`. Returns the corrupted dataset and a
/// per-token mask marking flipped positions.
pub fn corrupt_labels(
    data: &Dataset,
    flip_rate: f64,
    seed: u64,
) -> Result<(Dataset, Vec<Vec<bool>>)> {
    if !(0.0..=1.0).contains(&flip_rate) {
        return Err(Error::Config("flip_rate must be in [0, 1]".into()));
    }
    let n_tags = data.scheme.n_tags();
    if n_tags < 2 && flip_rate > 0.0 {
        return Err(Error::Config("cannot flip tags in a 1-tag scheme".into()));
    }
    let mut rng = stream_rng(seed, "corrupt", 0);
    let mut sentences = Vec::with_capacity(data.sentences.len());
    let mut mask = Vec::with_capacity(data.sentences.len());
    for s in &data.sentences {
        let mut out = s.clone();
        let mut row = vec![false; s.len()];
        for (i, tag) in out.tags.iter_mut().enumerate() {
            if flip_rate > 0.0 && rng.random::<f64>() < flip_rate {
                let mut t = rng.random_range(0..n_tags - 1);
                if t >= *tag {
                    t += 1;
                }
                *tag = t;
                row[i] = true;
            }
        }
        out.soft_tags = None;
        sentences.push(out);
        mask.push(row);
    }
    let corrupted =
        Dataset::new(data.scheme.clone(), sentences)?.with_vocab(data.vocab.clone());
    Ok((corrupted, mask))
}
