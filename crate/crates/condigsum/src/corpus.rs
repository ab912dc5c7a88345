//! Dialogue corpus model: records, tokenization, vocabulary, encoding, and a
//! synthetic topical-dialogue generator.
//!
//! A corpus is stored as JSON lines, one dialogue per line:
//!
//! ```json
//! {"id":"d1","utterances":[{"speaker":"bob","text":"hi"}],"summary":"Bob says hi.","topic_spans":[[0,1,"greeting"]]}
//! ```
//!
//! `topic_spans` is optional and marks half-open utterance ranges that belong
//! to one topic. Encoding renders each utterance as `speaker : text`, joins
//! utterances with `<sep>`, and truncates to the model's position budget.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pairs;
use crate::rouge;
use crate::seeds;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SEP: u32 = 4;

/// Reserved token strings, in id order.
pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("duplicate dialogue id '{id}' on line {line}")]
    DuplicateId { id: String, line: usize },
    #[error("dialogue '{id}': {message}")]
    Encode { id: String, message: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

/// Half-open range of utterance indices labeled with a topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct TopicSpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl From<(usize, usize, String)> for TopicSpan {
    fn from((start, end, label): (usize, usize, String)) -> Self {
        TopicSpan { start, end, label }
    }
}

impl From<TopicSpan> for (usize, usize, String) {
    fn from(s: TopicSpan) -> Self {
        (s.start, s.end, s.label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic_spans: Option<Vec<TopicSpan>>,
}

/// One sentence of a summary, with its ordinal position in that summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSummary {
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased whitespace-split words with surrounding punctuation stripped.
///
/// Words that are punctuation only ("--", "...") are dropped; interior
/// punctuation ("don't") survives.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|w| {
            let trimmed = w.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Word stream of one utterance as it is encoded: speaker words, a ":"
/// separator, then the text words.
pub fn utterance_words(utt: &Utterance) -> Vec<String> {
    let mut words = tokenize(&utt.speaker);
    words.push(":".to_string());
    words.extend(tokenize(&utt.text));
    words
}

// ---------------------------------------------------------------------------
// Parsing and serialization

/// Read a JSONL corpus, validating every record. Blank lines are skipped.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<DialogueRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        validate_record(&record, line_no)?;
        if let Some(prev) = seen.insert(record.id.clone(), line_no) {
            let _ = prev;
            return Err(CorpusError::DuplicateId {
                id: record.id,
                line: line_no,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn validate_record(record: &DialogueRecord, line: usize) -> Result<(), CorpusError> {
    let fail = |message: String| CorpusError::Invalid { line, message };
    if record.id.trim().is_empty() {
        return Err(fail("dialogue id is empty".into()));
    }
    if record.utterances.is_empty() {
        return Err(fail(format!("dialogue '{}' has no utterances", record.id)));
    }
    for (i, utt) in record.utterances.iter().enumerate() {
        if utt.speaker.trim().is_empty() {
            return Err(fail(format!(
                "dialogue '{}' utterance {i} has an empty speaker",
                record.id
            )));
        }
        if utt.text.trim().is_empty() {
            return Err(fail(format!(
                "dialogue '{}' utterance {i} has empty text",
                record.id
            )));
        }
    }
    if let Some(spans) = &record.topic_spans {
        let mut prev_end = 0usize;
        for (i, span) in spans.iter().enumerate() {
            if span.start >= span.end {
                return Err(fail(format!(
                    "dialogue '{}' topic span {i} is empty ({}..{})",
                    record.id, span.start, span.end
                )));
            }
            if span.end > record.utterances.len() {
                return Err(fail(format!(
                    "dialogue '{}' topic span {i} ends at {} but there are only {} utterances",
                    record.id,
                    span.end,
                    record.utterances.len()
                )));
            }
            if span.start < prev_end {
                return Err(fail(format!(
                    "dialogue '{}' topic span {i} overlaps or disorders the previous span",
                    record.id
                )));
            }
            prev_end = span.end;
        }
    }
    Ok(())
}

pub fn write_corpus<W: Write>(records: &[DialogueRecord], mut writer: W) -> Result<(), CorpusError> {
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| CorpusError::Vocab(format!("serialize '{}': {e}", record.id)))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

pub fn load_corpus<P: AsRef<Path>>(path: P) -> Result<Vec<DialogueRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    parse_corpus(std::io::BufReader::new(file))
}

pub fn save_corpus<P: AsRef<Path>>(records: &[DialogueRecord], path: P) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    write_corpus(records, std::io::BufWriter::new(file))
}

// ---------------------------------------------------------------------------
// Sub-summary splitting and filtering

/// Split a summary into sentences at '.', '!' or '?' followed by whitespace
/// or end of text. Pieces keep their terminator; whitespace-only pieces are
/// dropped; text without any terminator comes back as a single piece.
pub fn split_sub_summaries(summary: &str) -> Vec<SubSummary> {
    let mut pieces = Vec::new();
    let bytes = summary.as_bytes();
    let mut start = 0usize;
    let chars: Vec<(usize, char)> = summary.char_indices().collect();
    for (k, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next_ws = match chars.get(k + 1) {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if next_ws {
                let end = pos + c.len_utf8();
                let piece = summary[start..end].trim();
                if !piece.is_empty() {
                    pieces.push(piece.to_string());
                }
                start = end;
            }
        }
    }
    if start < bytes.len() {
        let piece = summary[start..].trim();
        if !piece.is_empty() {
            pieces.push(piece.to_string());
        }
    }
    pieces
        .into_iter()
        .enumerate()
        .map(|(index, text)| SubSummary { text, index })
        .collect()
}

/// Drop sub-summaries that no candidate snippet covers well.
///
/// Summaries with fewer than two sub-summaries produce no training material
/// and come back empty. Otherwise a sub-summary is kept when its best
/// bigram recall over the dialogue's candidate snippets (window sizes
/// `a..=b`) reaches `min_match_recall`. Kept entries retain their original
/// `index`.
pub fn filter_sub_summaries(
    dialogue: &DialogueRecord,
    subs: Vec<SubSummary>,
    a: usize,
    b: usize,
    min_match_recall: f64,
) -> Vec<SubSummary> {
    if subs.len() < 2 {
        return Vec::new();
    }
    let candidates = pairs::enumerate_snippets(dialogue, a, b);
    if candidates.is_empty() {
        return Vec::new();
    }
    let candidate_words: Vec<Vec<String>> = candidates
        .iter()
        .map(|s| pairs::snippet_words(dialogue, s))
        .collect();
    subs.into_iter()
        .filter(|sub| {
            let sub_words = tokenize(&sub.text);
            let best = candidate_words
                .iter()
                .map(|cand| {
                    rouge::rouge_n(cand, &sub_words, 2)
                        .expect("bigram order is nonzero")
                        .recall
                })
                .fold(0.0f64, f64::max);
            best >= min_match_recall
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Vocabulary

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_ranked(tokens: Vec<String>) -> Result<Self, CorpusError> {
        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(tokens);
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, tok) in id_to_token.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token '{tok}'")));
            }
        }
        Ok(Vocabulary {
            id_to_token,
            token_to_id,
        })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens, one per line; line number equals id minus the
    /// reserved block.
    pub fn save<W: Write>(&self, mut writer: W) -> Result<(), CorpusError> {
        for tok in &self.id_to_token[RESERVED.len()..] {
            writeln!(writer, "{tok}")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self, CorpusError> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let tok = line?;
            if tok.is_empty() {
                return Err(CorpusError::Vocab("empty token line".into()));
            }
            if RESERVED.contains(&tok.as_str()) {
                return Err(CorpusError::Vocab(format!(
                    "token '{tok}' collides with a reserved token"
                )));
            }
            tokens.push(tok);
        }
        Vocabulary::from_ranked(tokens)
    }

    pub fn save_to<P: AsRef<Path>>(&self, path: P) -> Result<(), CorpusError> {
        let file = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(file))
    }

    pub fn load_from<P: AsRef<Path>>(path: P) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        Self::load(std::io::BufReader::new(file))
    }
}

/// Build a vocabulary from the corpus token streams (each utterance as
/// `speaker : text`, plus the summary), ranked by descending frequency with
/// lexicographic tie-break, truncated to `max_size` including the five
/// reserved tokens.
pub fn build_vocab(corpus: &[DialogueRecord], max_size: usize) -> Result<Vocabulary, CorpusError> {
    if max_size < RESERVED.len() {
        return Err(CorpusError::Vocab(format!(
            "max_size {max_size} cannot hold the {} reserved tokens",
            RESERVED.len()
        )));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for record in corpus {
        for utt in &record.utterances {
            for word in utterance_words(utt) {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        for word in tokenize(&record.summary) {
            *freq.entry(word).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
    ranked.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_ranked(ranked.into_iter().map(|(t, _)| t).collect())
}

// ---------------------------------------------------------------------------
// Encoding

/// Encode an ordered list of utterances: `speaker : text` word ids joined by
/// `<sep>`, truncated to `max_positions`. Unknown words map to `<unk>`.
pub fn encode_utterances<'a, I>(utterances: I, vocab: &Vocabulary, max_positions: usize) -> TokenSeq
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let mut ids = Vec::new();
    for (i, utt) in utterances.into_iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        for word in utterance_words(utt) {
            ids.push(vocab.id_or_unk(&word));
        }
    }
    ids.truncate(max_positions);
    TokenSeq::new(ids)
}

/// Encode a dialogue, or the utterance range `span` of it, as a source
/// sequence. An empty or out-of-bounds span is an error.
pub fn encode_dialogue(
    dialogue: &DialogueRecord,
    span: Option<(usize, usize)>,
    vocab: &Vocabulary,
    max_positions: usize,
) -> Result<TokenSeq, CorpusError> {
    let (start, end) = span.unwrap_or((0, dialogue.utterances.len()));
    if start >= end {
        return Err(CorpusError::Encode {
            id: dialogue.id.clone(),
            message: format!("empty utterance span {start}..{end}"),
        });
    }
    if end > dialogue.utterances.len() {
        return Err(CorpusError::Encode {
            id: dialogue.id.clone(),
            message: format!(
                "span {start}..{end} out of bounds for {} utterances",
                dialogue.utterances.len()
            ),
        });
    }
    Ok(encode_utterances(
        &dialogue.utterances[start..end],
        vocab,
        max_positions,
    ))
}

/// Encode a target text as `<bos> words <eos>`, truncating the words so the
/// whole sequence fits in `max_positions`.
pub fn encode_target(text: &str, vocab: &Vocabulary, max_positions: usize) -> TokenSeq {
    let mut words = tokenize(text);
    if max_positions >= 2 {
        words.truncate(max_positions - 2);
    } else {
        words.clear();
    }
    let mut ids = Vec::with_capacity(words.len() + 2);
    ids.push(BOS);
    for word in &words {
        ids.push(vocab.id_or_unk(word));
    }
    ids.push(EOS);
    TokenSeq::new(ids)
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Configuration for the synthetic topical-dialogue generator. Ranges are
/// inclusive on both ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_dialogues: usize,
    pub min_topics: usize,
    pub max_topics: usize,
    pub min_topic_utterances: usize,
    pub max_topic_utterances: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_dialogues: 100,
            min_topics: 2,
            max_topics: 3,
            min_topic_utterances: 3,
            max_topic_utterances: 5,
            seed: 7,
        }
    }
}

const SPEAKERS: [&str; 8] = [
    "alice", "bob", "carol", "dave", "erin", "frank", "grace", "henry",
];

/// Topic pools. Content words are globally unique and never appear in the
/// sentence frames, so words shared between a summary sentence and the
/// dialogue always point at that sentence's own topic block.
const TOPICS: [(&str, [&str; 18]); 10] = [
    ("food", [
        "pizza", "pasta", "salad", "soup", "bread", "cheese", "mango", "olive", "curry",
        "rice", "beans", "tacos", "salmon", "honey", "grape", "lemon", "toast", "stew",
    ]),
    ("travel", [
        "train", "ticket", "hostel", "museum", "harbor", "passport", "luggage", "tram",
        "airport", "island", "castle", "valley", "bridge", "coast", "ferry", "villa",
        "summit", "trail",
    ]),
    ("music", [
        "guitar", "violin", "drums", "chorus", "melody", "tempo", "concert", "vinyl",
        "piano", "jazz", "opera", "banjo", "singer", "lyrics", "encore", "studio",
        "chord", "album",
    ]),
    ("sports", [
        "soccer", "tennis", "racket", "goalie", "stadium", "sprint", "relay", "medal",
        "coach", "league", "derby", "skating", "rowing", "javelin", "marathon", "umpire",
        "whistle", "podium",
    ]),
    ("weather", [
        "drizzle", "thunder", "breeze", "frost", "sunshine", "humidity", "forecast",
        "cyclone", "hail", "monsoon", "fog", "sleet", "heatwave", "rainbow", "gale",
        "lightning", "cloudburst", "dew",
    ]),
    ("films", [
        "cinema", "trailer", "director", "actress", "script", "sequel", "premiere",
        "popcorn", "subtitle", "thriller", "comedy", "western", "animation", "cameo",
        "critic", "screening", "reel", "casting",
    ]),
    ("garden", [
        "roses", "tulips", "compost", "shovel", "hedge", "orchid", "seedling", "lawn",
        "daisy", "fern", "pruning", "trellis", "mulch", "ivy", "sunflower", "weeds",
        "planter", "greenhouse",
    ]),
    ("books", [
        "novel", "chapter", "author", "library", "preface", "paperback", "poetry",
        "memoir", "fable", "anthology", "bookmark", "margin", "prologue", "villain",
        "plot", "satire", "reprint", "glossary",
    ]),
    ("games", [
        "chess", "puzzle", "dice", "console", "joystick", "arcade", "quest", "pixel",
        "avatar", "trophy", "checkers", "domino", "riddle", "maze", "billiards", "cards",
        "lottery", "token",
    ]),
    ("market", [
        "bargain", "stall", "vendor", "coupon", "receipt", "discount", "cashier",
        "basket", "aisle", "checkout", "invoice", "barcode", "shelf", "wallet", "refund",
        "queue", "ledger", "price",
    ]),
];

// Each topic block is a word chain x0..xn: the opening utterance introduces
// x0 and x1, each later utterance picks up the previous tail word and hands
// over the next. The matching summary sentence reuses x0 and x1, so its
// content bigrams live only in that block's opener.
const OPENER_FRAMES: [&str; 3] = [
    "so about {0} and {1}",
    "hey what about {0} and {1}",
    "i have a question about {0} and {1}",
];

const FOLLOW_FRAMES: [&str; 4] = [
    "{0} yes and maybe {1}",
    "{0} sure but maybe {1}",
    "{0} ok then maybe {1}",
    "{0} sounds fine what of {1}",
];

const SUMMARY_FRAMES: [&str; 2] = [
    "{s1} and {s2} talk about {0} and {1}.",
    "{s1} and {s2} chat about {0} and {1}.",
];

fn fill2(frame: &str, a: &str, b: &str) -> String {
    frame.replace("{0}", a).replace("{1}", b)
}

/// Generate a deterministic corpus of multi-topic dialogues with aligned
/// summaries: one summary sentence per topic block, in block order, and
/// `topic_spans` marking the blocks.
pub fn synth_corpus(config: &SynthConfig) -> Result<Vec<DialogueRecord>, CorpusError> {
    if config.min_topics == 0
        || config.min_topics > config.max_topics
        || config.max_topics > TOPICS.len()
    {
        return Err(CorpusError::Vocab(format!(
            "topic count range {}..={} is invalid (pool holds {})",
            config.min_topics,
            config.max_topics,
            TOPICS.len()
        )));
    }
    if config.min_topic_utterances == 0
        || config.min_topic_utterances > config.max_topic_utterances
        || config.max_topic_utterances + 1 > TOPICS[0].1.len()
    {
        return Err(CorpusError::Vocab(format!(
            "utterances-per-topic range {}..={} is invalid",
            config.min_topic_utterances, config.max_topic_utterances
        )));
    }
    let mut records = Vec::with_capacity(config.n_dialogues);
    for d in 0..config.n_dialogues {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
            config.seed,
            &[seeds::stream::SYNTH, d as u64],
        ));
        let n_topics = rng.gen_range(config.min_topics..=config.max_topics);
        let mut topic_idx: Vec<usize> = (0..TOPICS.len()).collect();
        topic_idx.shuffle(&mut rng);
        topic_idx.truncate(n_topics);
        let mut speaker_idx: Vec<usize> = (0..SPEAKERS.len()).collect();
        speaker_idx.shuffle(&mut rng);
        let (s1, s2) = (SPEAKERS[speaker_idx[0]], SPEAKERS[speaker_idx[1]]);

        let mut utterances = Vec::new();
        let mut spans = Vec::new();
        let mut sentences = Vec::new();
        for &t in &topic_idx {
            let (label, words) = TOPICS[t];
            let block_len =
                rng.gen_range(config.min_topic_utterances..=config.max_topic_utterances);
            let mut chain: Vec<&str> = words.to_vec();
            chain.shuffle(&mut rng);
            chain.truncate(block_len + 1);

            let span_start = utterances.len();
            for slot in 0..block_len {
                let speaker = if utterances.len() % 2 == 0 { s1 } else { s2 };
                let text = if slot == 0 {
                    let frame = OPENER_FRAMES[rng.gen_range(0..OPENER_FRAMES.len())];
                    fill2(frame, chain[0], chain[1])
                } else {
                    let frame = FOLLOW_FRAMES[rng.gen_range(0..FOLLOW_FRAMES.len())];
                    fill2(frame, chain[slot], chain[slot + 1])
                };
                utterances.push(Utterance {
                    speaker: speaker.to_string(),
                    text,
                });
            }
            spans.push(TopicSpan {
                start: span_start,
                end: utterances.len(),
                label: label.to_string(),
            });
            let frame = SUMMARY_FRAMES[rng.gen_range(0..SUMMARY_FRAMES.len())];
            sentences.push(fill2(frame, chain[0], chain[1]).replace("{s1}", s1).replace("{s2}", s2));
        }
        records.push(DialogueRecord {
            id: format!("synth-{d:05}"),
            utterances,
            summary: sentences.join(" "),
            topic_spans: Some(spans),
        });
    }
    Ok(records)
}

/// Distinct word-level tokens a corpus produces, reserved tokens excluded.
pub fn distinct_token_count(corpus: &[DialogueRecord]) -> usize {
    let mut set = HashSet::new();
    for record in corpus {
        for utt in &record.utterances {
            for w in utterance_words(utt) {
                set.insert(w);
            }
        }
        for w in tokenize(&record.summary) {
            set.insert(w);
        }
    }
    set.len()
}
