//! Corpus files, vocabulary and label maps, and the synthetic dialogue
//! generator.
//!
//! A corpus file holds one JSON dialogue per line:
//!
//! ```text
//! {"id": "d1", "split": "train", "utterances": [{"speaker": "A", "text": "hi .", "act": "greeting"}, ...]}
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{tokenize, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?} (expected train, valid or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub act: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    split: Split,
    utterances: Vec<Utterance>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Dialogue] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Dialogue> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn stats(&self) -> CorpusStats {
        let count = |ds: &[Dialogue]| (ds.len(), ds.iter().map(Dialogue::len).sum());
        CorpusStats {
            train: count(&self.train),
            valid: count(&self.valid),
            test: count(&self.test),
        }
    }

    /// Searches every split for a dialogue id.
    pub fn find(&self, id: &str) -> Option<&Dialogue> {
        Split::ALL.iter().flat_map(|&s| self.split(s)).find(|d| d.id == id)
    }
}

/// `(dialogues, utterances)` per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub train: (usize, usize),
    pub valid: (usize, usize),
    pub test: (usize, usize),
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train {} ({}) | validation {} ({}) | test {} ({})",
            self.train.0, self.train.1, self.valid.0, self.valid.1, self.test.0, self.test.1
        )
    }
}

/// Parses a JSON-lines corpus. Text is lowercased; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut corpus = Corpus::default();
    let mut seen = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if record.utterances.is_empty() {
            return Err(parse_err(format!("dialogue {:?} has no utterances", record.id)));
        }
        let utterances = record
            .utterances
            .into_iter()
            .map(|u| Utterance {
                text: u.text.to_lowercase(),
                ..u
            })
            .collect();
        corpus.split_mut(record.split).push(Dialogue { id: record.id, utterances });
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "corpus file contains no dialogues".into(),
        });
    }
    Ok(corpus)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_corpus_to(&mut out, corpus)?;
    out.flush()?;
    Ok(())
}

pub fn write_corpus_to<W: Write>(out: &mut W, corpus: &Corpus) -> Result<()> {
    for split in Split::ALL {
        for d in corpus.split(split) {
            #[derive(Serialize)]
            struct RecordRef<'a> {
                id: &'a str,
                split: Split,
                utterances: &'a [Utterance],
            }
            serde_json::to_writer(
                &mut *out,
                &RecordRef {
                    id: &d.id,
                    split,
                    utterances: &d.utterances,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Vocabulary from the training split only.
pub fn build_vocab(corpus: &Corpus, max_size: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for d in &corpus.train {
        for u in &d.utterances {
            for t in tokenize(&u.text) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    Vocab::from_counts(&counts, max_size)
}

/// Act labels in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let set: BTreeSet<String> = names.iter().cloned().collect();
        if set.len() != names.len() || names.is_empty() {
            return Err(Error::invalid("label names must be unique and non-empty"));
        }
        Ok(LabelMap { names })
    }

    /// Labels found in the training split.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let set: BTreeSet<&str> = corpus.train.iter().flat_map(|d| d.utterances.iter().map(|u| u.act.as_str())).collect();
        LabelMap::new(set.into_iter().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Fails with the first label outside the map.
    pub fn check_covers(&self, dialogues: &[Dialogue]) -> Result<()> {
        for d in dialogues {
            for u in &d.utterances {
                if self.id(&u.act).is_none() {
                    return Err(Error::UnknownLabel {
                        label: u.act.clone(),
                        dialogue: d.id.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

pub const GREETING: &str = "greeting";
pub const QUESTION: &str = "question";
pub const ANSWER: &str = "answer";
pub const STATEMENT: &str = "statement";
pub const QUESTION_TOKEN: &str = "?";

const GREETING_WORDS: [&str; 8] = ["hello", "hi", "hey", "howdy", "greetings", "morning", "evening", "welcome"];

/// Target proportions of the four synthetic acts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActMarginals {
    pub greeting: f64,
    pub question: f64,
    pub answer: f64,
    pub statement: f64,
}

impl ActMarginals {
    /// Accuracy of the best classifier that sees one utterance at a time:
    /// greetings and questions are recognizable, answers and statements are
    /// not, so the larger of the two is the best guess.
    pub fn context_free_ceiling(&self) -> f64 {
        self.greeting + self.question + self.answer.max(self.statement)
    }

    fn validate(&self) -> Result<()> {
        let all = [self.greeting, self.question, self.answer, self.statement];
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("act frequencies must lie in [0, 1]"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("act frequencies must sum to 1, got {sum}")));
        }
        // each question is answered once or twice
        if self.answer < self.question || self.answer > 2.0 * self.question {
            return Err(Error::invalid(format!(
                "answer frequency {} must lie in [question, 2·question] = [{}, {}]",
                self.answer,
                self.question,
                2.0 * self.question
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_dialogues: usize,
    pub valid_dialogues: usize,
    pub test_dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Number of content words shared by questions, answers and statements.
    pub vocab_size: usize,
    pub marginals: ActMarginals,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_dialogues: 200,
            valid_dialogues: 40,
            test_dialogues: 80,
            min_utterances: 15,
            max_utterances: 25,
            min_tokens: 3,
            max_tokens: 8,
            vocab_size: 40,
            marginals: ActMarginals {
                greeting: 0.05,
                question: 0.25,
                answer: 0.35,
                statement: 0.35,
            },
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        self.marginals.validate()?;
        if self.min_utterances == 0 || self.min_utterances > self.max_utterances {
            return Err(Error::invalid("dialogue lengths need 1 <= min <= max"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens || self.vocab_size == 0 {
            return Err(Error::invalid("utterance lengths need 1 <= min <= max and a non-empty vocabulary"));
        }
        // one greeting per dialogue
        let mean_len = (self.min_utterances + self.max_utterances) as f64 / 2.0;
        if (self.marginals.greeting * mean_len - 1.0).abs() > 0.1 {
            return Err(Error::invalid(format!(
                "greeting frequency {} is inconsistent with a mean dialogue length of {mean_len} (one greeting per dialogue)",
                self.marginals.greeting
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Context-free accuracy ceiling implied by the configured marginals.
    pub ceiling: f64,
}

/// Realized act counts over a set of dialogues, keyed by act name.
pub fn act_counts(dialogues: &[Dialogue]) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for d in dialogues {
        for u in &d.utterances {
            *out.entry(u.act.clone()).or_default() += 1;
        }
    }
    out
}

fn stochastic_round<R: Rng>(x: f64, rng: &mut R) -> usize {
    let floor = x.floor();
    floor as usize + usize::from(rng.gen::<f64>() < x - floor)
}

/// Act sequence for one dialogue: a greeting, then question/answer blocks,
/// then statements. Every answer is adjacent to a question and no statement
/// is, so the answer/statement distinction needs exactly one neighbor of
/// context.
fn act_sequence<R: Rng>(len: usize, m: &ActMarginals, rng: &mut R) -> Vec<&'static str> {
    let mut acts = vec![GREETING];
    let rest = len - 1;
    if rest == 0 {
        return acts;
    }
    let share = 1.0 - m.greeting;
    let mut nq = stochastic_round(m.question / share * rest as f64, rng);
    let mut na = stochastic_round(m.answer / share * rest as f64, rng);
    loop {
        if nq == 0 {
            na = 0;
            break;
        }
        na = na.clamp(nq, 2 * nq - 1);
        if nq + na <= rest {
            break;
        }
        nq -= 1;
    }
    // runs of one or two answers; the final run has one so the statement
    // tail never touches a question
    let mut runs = vec![1usize; nq];
    if nq > 1 {
        let mut slots: Vec<usize> = (0..nq - 1).collect();
        slots.shuffle(rng);
        for &s in slots.iter().take(na - nq) {
            runs[s] = 2;
        }
    }
    for r in runs {
        acts.push(QUESTION);
        acts.extend(std::iter::repeat_n(ANSWER, r));
    }
    acts.extend(std::iter::repeat_n(STATEMENT, rest - nq - na));
    acts
}

fn utterance_text<R: Rng>(act: &str, spec: &SyntheticSpec, rng: &mut R) -> String {
    let n = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut words: Vec<String> = match act {
        GREETING => (0..n).map(|_| GREETING_WORDS[rng.gen_range(0..GREETING_WORDS.len())].to_string()).collect(),
        _ => (0..n).map(|_| format!("w{}", rng.gen_range(0..spec.vocab_size))).collect(),
    };
    if act == QUESTION {
        words.push(QUESTION_TOKEN.to_string());
    }
    words.join(" ")
}

/// Generates train/valid/test splits whose answer/statement labels are only
/// recoverable from neighboring utterances.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = Corpus::default();
    for (split, count) in [
        (Split::Train, spec.train_dialogues),
        (Split::Valid, spec.valid_dialogues),
        (Split::Test, spec.test_dialogues),
    ] {
        for k in 0..count {
            let len = rng.gen_range(spec.min_utterances..=spec.max_utterances);
            let acts = act_sequence(len, &spec.marginals, &mut rng);
            let utterances = acts
                .iter()
                .enumerate()
                .map(|(t, &act)| Utterance {
                    speaker: if t % 2 == 0 { "A" } else { "B" }.to_string(),
                    text: utterance_text(act, spec, &mut rng),
                    act: act.to_string(),
                })
                .collect();
            corpus.split_mut(split).push(Dialogue {
                id: format!("{}-{k:04}", split.as_str()),
                utterances,
            });
        }
    }
    Ok(SyntheticCorpus {
        corpus,
        ceiling: spec.marginals.context_free_ceiling(),
    })
}
