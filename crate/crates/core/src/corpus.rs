//! CoNLL-style corpora: tagsets, label states, span extraction, scheme
//! conversion and corpus statistics.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::TransitionMask;

/// Default marker for unknown labels in CoNLL files.
pub const DEFAULT_UNKNOWN_MARKER: &str = "-";

pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bio,
    Bilou,
}

impl Scheme {
    fn prefixes(self) -> &'static [Prefix] {
        match self {
            Scheme::Bio => &[Prefix::B, Prefix::I],
            Scheme::Bilou => &[Prefix::B, Prefix::I, Prefix::L, Prefix::U],
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Bio => f.write_str("bio"),
            Scheme::Bilou => f.write_str("bilou"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob2" => Ok(Scheme::Bio),
            "bilou" | "iobes" => Ok(Scheme::Bilou),
            other => Err(Error::Config(format!("unknown tagging scheme `{other}`"))),
        }
    }
}

/// Position of a token inside an entity span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Prefix {
    B,
    I,
    L,
    U,
}

impl Prefix {
    fn as_char(self) -> char {
        match self {
            Prefix::B => 'B',
            Prefix::I => 'I',
            Prefix::L => 'L',
            Prefix::U => 'U',
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "B" => Some(Prefix::B),
            "I" => Some(Prefix::I),
            "L" | "E" => Some(Prefix::L),
            "U" | "S" => Some(Prefix::U),
            _ => None,
        }
    }
}

/// A label split into its structural parts. `None` means `O`.
fn split_label(label: &str) -> std::result::Result<Option<(Prefix, &str)>, String> {
    if label == OUTSIDE {
        return Ok(None);
    }
    let (prefix, ty) = label
        .split_once('-')
        .ok_or_else(|| format!("malformed label `{label}`"))?;
    let prefix = Prefix::parse(prefix).ok_or_else(|| format!("unknown prefix in `{label}`"))?;
    if ty.is_empty() {
        return Err(format!("empty entity type in `{label}`"));
    }
    Ok(Some((prefix, ty)))
}

/// The label alphabet: `O` followed by every prefix × entity type combination.
///
/// Index 0 is always `O`; the label for prefix `p` of the `k`-th entity type
/// lives at `1 + k * |prefixes| + p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TagsetRepr", into = "TagsetRepr")]
pub struct Tagset {
    scheme: Scheme,
    entity_types: Vec<String>,
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TagsetRepr {
    scheme: Scheme,
    entity_types: Vec<String>,
}

impl TryFrom<TagsetRepr> for Tagset {
    type Error = Error;
    fn try_from(r: TagsetRepr) -> Result<Self> {
        Tagset::new(r.scheme, r.entity_types)
    }
}

impl From<Tagset> for TagsetRepr {
    fn from(t: Tagset) -> Self {
        TagsetRepr {
            scheme: t.scheme,
            entity_types: t.entity_types,
        }
    }
}

impl Tagset {
    pub fn new<S: Into<String>>(scheme: Scheme, entity_types: impl IntoIterator<Item = S>) -> Result<Self> {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for ty in &entity_types {
            if ty.is_empty() || ty.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type name `{ty}`")));
            }
            if !seen.insert(ty.as_str()) {
                return Err(Error::Config(format!("duplicate entity type `{ty}`")));
            }
        }
        let mut labels = vec![OUTSIDE.to_string()];
        for ty in &entity_types {
            for p in scheme.prefixes() {
                labels.push(format!("{}-{}", p.as_char(), ty));
            }
        }
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Ok(Self {
            scheme,
            entity_types,
            labels,
            index,
        })
    }

    /// Builds a tagset from the entity types that occur in `labels`, sorted by name.
    pub fn infer<'a>(scheme: Scheme, labels: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut types = BTreeSet::new();
        for l in labels {
            match split_label(l) {
                Ok(Some((_, ty))) => {
                    types.insert(ty.to_string());
                }
                Ok(None) => {}
                Err(msg) => return Err(Error::Config(msg)),
            }
        }
        Tagset::new(scheme, types)
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn o_index(&self) -> usize {
        0
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Prefix and entity type index of a label; `None` for `O`.
    pub fn decompose(&self, index: usize) -> Option<(Prefix, usize)> {
        if index == 0 {
            return None;
        }
        let per = self.scheme.prefixes().len();
        let k = (index - 1) / per;
        Some((self.scheme.prefixes()[(index - 1) % per], k))
    }

    /// Structural legality of label bigrams plus allowed first and last labels.
    pub fn transition_mask(&self) -> TransitionMask {
        let n = self.len();
        let mut allowed = Array2::from_elem((n, n), false);
        let mut start = vec![false; n];
        let mut end = vec![false; n];
        for from in 0..n {
            let f = self.decompose(from);
            start[from] = !matches!(f, Some((Prefix::I, _)) | Some((Prefix::L, _)));
            end[from] = match self.scheme {
                Scheme::Bio => true,
                Scheme::Bilou => !matches!(f, Some((Prefix::B, _)) | Some((Prefix::I, _))),
            };
            for to in 0..n {
                let t = self.decompose(to);
                allowed[[from, to]] = match self.scheme {
                    Scheme::Bio => match t {
                        Some((Prefix::I, ty)) => {
                            matches!(f, Some((Prefix::B, k)) | Some((Prefix::I, k)) if k == ty)
                        }
                        _ => true,
                    },
                    Scheme::Bilou => {
                        let open = match f {
                            Some((Prefix::B, k)) | Some((Prefix::I, k)) => Some(k),
                            _ => None,
                        };
                        match (open, t) {
                            (Some(k), Some((Prefix::I, ty))) | (Some(k), Some((Prefix::L, ty))) => k == ty,
                            (Some(_), _) => false,
                            (None, Some((Prefix::I, _))) | (None, Some((Prefix::L, _))) => false,
                            (None, _) => true,
                        }
                    }
                };
            }
        }
        TransitionMask { allowed, start, end }
    }
}

/// Per-token annotation state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelState {
    Observed(usize),
    Unknown,
}

impl LabelState {
    pub fn observed(self) -> Option<usize> {
        match self {
            LabelState::Observed(l) => Some(l),
            LabelState::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub states: Vec<LabelState>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, states: Vec<LabelState>) -> Result<Self> {
        if tokens.len() != states.len() {
            return Err(Error::LengthMismatch {
                expected: tokens.len(),
                got: states.len(),
            });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        Ok(Self { tokens, states })
    }

    /// Builds a fully observed sentence from label strings.
    pub fn from_labels<T: AsRef<str>, L: AsRef<str>>(tokens: &[T], labels: &[L], tagset: &Tagset) -> Result<Self> {
        let states = labels
            .iter()
            .enumerate()
            .map(|(i, l)| {
                tagset
                    .index_of(l.as_ref())
                    .map(LabelState::Observed)
                    .ok_or_else(|| Error::UnknownTag {
                        line: i + 1,
                        tag: l.as_ref().to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Sentence::new(tokens.iter().map(|t| t.as_ref().to_string()).collect(), states)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Observed label indices, or `None` if any position is unknown.
    pub fn label_indices(&self) -> Option<Vec<usize>> {
        self.states.iter().map(|s| s.observed()).collect()
    }

    pub fn has_unknown(&self) -> bool {
        self.states.contains(&LabelState::Unknown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub tagset: Tagset,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, tagset: Tagset) -> Self {
        Self {
            sentences,
            tagset,
            split: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    pub fn num_unknown(&self) -> usize {
        self.sentences
            .iter()
            .flat_map(|s| &s.states)
            .filter(|s| **s == LabelState::Unknown)
            .count()
    }

    pub fn is_gold(&self) -> bool {
        !self.sentences.iter().any(Sentence::has_unknown)
    }

    /// Label strings of sentence `i`; unknown positions come back as `None`.
    pub fn labels_of(&self, i: usize) -> Vec<Option<&str>> {
        self.sentences[i]
            .states
            .iter()
            .map(|s| s.observed().map(|l| self.tagset.label(l)))
            .collect()
    }

    /// Gold spans of every sentence, in sentence then start order.
    pub fn spans(&self) -> Result<Vec<Span>> {
        let mut out = Vec::new();
        for (sid, s) in self.sentences.iter().enumerate() {
            let idx = s.label_indices().ok_or(Error::NotGold)?;
            let labels: Vec<&str> = idx.iter().map(|&l| self.tagset.label(l)).collect();
            out.extend(labels_to_spans(&labels, self.tagset.scheme())?.into_iter().map(|mut sp| {
                sp.sentence_id = sid;
                sp
            }));
        }
        Ok(out)
    }

    /// Surface text of a span: its tokens joined by single spaces.
    pub fn span_text(&self, span: &Span) -> String {
        self.sentences[span.sentence_id].tokens[span.start..span.end].join(" ")
    }

    /// Splits into contiguous train/dev/test parts by the given fractions.
    pub fn split_by_ratio(&self, train: f64, dev: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.len();
        let n_train = ((train * n as f64).round() as usize).min(n);
        let n_dev = ((dev * n as f64).round() as usize).min(n - n_train);
        let part = |range: std::ops::Range<usize>, split| Dataset {
            sentences: self.sentences[range].to_vec(),
            tagset: self.tagset.clone(),
            split: Some(split),
        };
        (
            part(0..n_train, Split::Train),
            part(n_train..n_train + n_dev, Split::Dev),
            part(n_train + n_dev..n, Split::Test),
        )
    }
}

/// A typed entity mention over tokens `[start, end)` of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub sentence_id: usize,
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(entity_type: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            sentence_id: 0,
            start,
            end,
            entity_type: entity_type.into(),
        }
    }

    pub fn in_sentence(mut self, sentence_id: usize) -> Self {
        self.sentence_id = sentence_id;
        self
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub annotations: usize,
    pub surface_forms: usize,
    pub tokens: usize,
    pub entity_tags: usize,
}

/// Parses whitespace-column CoNLL text. The first column is the token and the
/// last column is the tag; `unknown_marker` in the tag column marks a latent
/// position.
pub fn parse_conll(text: &str, tagset: &Tagset, unknown_marker: &str) -> Result<Dataset> {
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut states = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, states: &mut Vec<LabelState>| -> Result<()> {
        if !tokens.is_empty() {
            sentences.push(Sentence::new(std::mem::take(tokens), std::mem::take(states))?);
        }
        Ok(())
    };
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut states)?;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            flush(&mut tokens, &mut states)?;
            continue;
        }
        if cols.len() < 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected at least 2 columns, found {}", cols.len()),
            });
        }
        let tag = cols[cols.len() - 1];
        let state = if tag == unknown_marker {
            LabelState::Unknown
        } else {
            LabelState::Observed(tagset.index_of(tag).ok_or_else(|| Error::UnknownTag {
                line: line_no,
                tag: tag.to_string(),
            })?)
        };
        tokens.push(cols[0].to_string());
        states.push(state);
    }
    flush(&mut tokens, &mut states)?;
    Ok(Dataset::new(sentences, tagset.clone()))
}

/// Scans the tag column of CoNLL text and builds a tagset from the entity
/// types found there.
pub fn infer_tagset(text: &str, scheme: Scheme, unknown_marker: &str) -> Result<Tagset> {
    let tags = text
        .lines()
        .filter_map(|l| {
            let cols: Vec<&str> = l.split_whitespace().collect();
            (cols.len() >= 2 && cols[0] != "-DOCSTART-").then(|| cols[cols.len() - 1])
        })
        .filter(|t| *t != unknown_marker);
    Tagset::infer(scheme, tags)
}

pub fn write_conll(ds: &Dataset, unknown_marker: &str) -> String {
    let mut out = String::new();
    for s in &ds.sentences {
        for (tok, st) in s.tokens.iter().zip(&s.states) {
            out.push_str(tok);
            out.push('\t');
            match st {
                LabelState::Observed(l) => out.push_str(ds.tagset.label(*l)),
                LabelState::Unknown => out.push_str(unknown_marker),
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// What to do with an `I-X` that does not continue an `X` span.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BioRepair {
    #[default]
    Error,
    /// Treat the offending `I-X` as `B-X`.
    AsBegin,
}

pub fn bio_to_bilou<S: AsRef<str>>(labels: &[S], repair: BioRepair) -> Result<Vec<String>> {
    // Normalise to (is_begin, type) pairs first.
    let mut parsed: Vec<Option<(bool, &str)>> = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let p = split_label(l.as_ref()).map_err(|msg| Error::InvalidSequence { index: i, msg })?;
        let item = match p {
            None => None,
            Some((Prefix::B, ty)) => Some((true, ty)),
            Some((Prefix::I, ty)) => {
                let continues = matches!(parsed.last(), Some(Some((_, prev))) if *prev == ty);
                if !continues {
                    match repair {
                        BioRepair::Error => {
                            return Err(Error::InvalidSequence {
                                index: i,
                                msg: format!("I-{ty} does not continue a {ty} span"),
                            })
                        }
                        BioRepair::AsBegin => {}
                    }
                }
                Some((!continues, ty))
            }
            Some(_) => {
                return Err(Error::InvalidSequence {
                    index: i,
                    msg: format!("`{}` is not a BIO label", l.as_ref()),
                })
            }
        };
        parsed.push(item);
    }
    let out = (0..parsed.len())
        .map(|i| match parsed[i] {
            None => OUTSIDE.to_string(),
            Some((begin, ty)) => {
                let next_continues = matches!(parsed.get(i + 1), Some(Some((false, n))) if *n == ty);
                let p = match (begin, next_continues) {
                    (true, true) => 'B',
                    (true, false) => 'U',
                    (false, true) => 'I',
                    (false, false) => 'L',
                };
                format!("{p}-{ty}")
            }
        })
        .collect();
    Ok(out)
}

pub fn bilou_to_bio<S: AsRef<str>>(labels: &[S]) -> Result<Vec<String>> {
    let spans = labels_to_spans(labels, Scheme::Bilou)?;
    spans_to_labels(&spans, labels.len(), Scheme::Bio)
}

/// Extracts maximal typed spans from a structurally valid label sequence.
pub fn labels_to_spans<S: AsRef<str>>(labels: &[S], scheme: Scheme) -> Result<Vec<Span>> {
    let invalid = |index: usize, msg: String| Error::InvalidSequence { index, msg };
    let mut spans = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, l) in labels.iter().enumerate() {
        let l = l.as_ref();
        let parsed = split_label(l).map_err(|m| invalid(i, m))?;
        match scheme {
            Scheme::Bio => match parsed {
                None => {
                    if let Some((s, ty)) = open.take() {
                        spans.push(Span::new(ty, s, i));
                    }
                }
                Some((Prefix::B, ty)) => {
                    if let Some((s, prev)) = open.take() {
                        spans.push(Span::new(prev, s, i));
                    }
                    open = Some((i, ty));
                }
                Some((Prefix::I, ty)) => match open {
                    Some((_, prev)) if prev == ty => {}
                    _ => return Err(invalid(i, format!("`{l}` does not continue a {ty} span"))),
                },
                Some(_) => return Err(invalid(i, format!("`{l}` is not a BIO label"))),
            },
            Scheme::Bilou => match (open, parsed) {
                (None, None) => {}
                (None, Some((Prefix::B, ty))) => open = Some((i, ty)),
                (None, Some((Prefix::U, ty))) => spans.push(Span::new(ty, i, i + 1)),
                (Some((_, prev)), Some((Prefix::I, ty))) if prev == ty => {}
                (Some((s, prev)), Some((Prefix::L, ty))) if prev == ty => {
                    spans.push(Span::new(ty, s, i + 1));
                    open = None;
                }
                (Some((_, prev)), _) => {
                    return Err(invalid(i, format!("`{l}` inside an unfinished {prev} span")));
                }
                (None, Some(_)) => {
                    return Err(invalid(i, format!("`{l}` outside of any span")));
                }
            },
        }
    }
    if let Some((s, ty)) = open {
        match scheme {
            Scheme::Bio => spans.push(Span::new(ty, s, labels.len())),
            Scheme::Bilou => {
                return Err(invalid(
                    labels.len().saturating_sub(1),
                    format!("{ty} span starting at {s} is never closed"),
                ))
            }
        }
    }
    Ok(spans)
}

/// Span extraction that never fails: broken spans are closed or opened
/// where the sequence stops making structural sense.
pub fn labels_to_spans_lenient<S: AsRef<str>>(labels: &[S], scheme: Scheme) -> Vec<Span> {
    let _ = scheme;
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let close = |open: &mut Option<(usize, String)>, spans: &mut Vec<Span>, end: usize| {
        if let Some((s, ty)) = open.take() {
            spans.push(Span::new(ty, s, end));
        }
    };
    for (i, l) in labels.iter().enumerate() {
        match split_label(l.as_ref()) {
            Ok(Some((p, ty))) => {
                let continues = matches!(&open, Some((_, prev)) if prev == ty);
                match p {
                    Prefix::B => {
                        close(&mut open, &mut spans, i);
                        open = Some((i, ty.to_string()));
                    }
                    Prefix::U => {
                        close(&mut open, &mut spans, i);
                        spans.push(Span::new(ty, i, i + 1));
                    }
                    Prefix::I | Prefix::L => {
                        if !continues {
                            close(&mut open, &mut spans, i);
                            open = Some((i, ty.to_string()));
                        }
                        if p == Prefix::L {
                            close(&mut open, &mut spans, i + 1);
                        }
                    }
                }
            }
            _ => close(&mut open, &mut spans, i),
        }
    }
    close(&mut open, &mut spans, labels.len());
    spans
}

/// Renders non-overlapping spans as a label sequence of length `n`.
pub fn spans_to_labels(spans: &[Span], n: usize, scheme: Scheme) -> Result<Vec<String>> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    let mut labels = vec![OUTSIDE.to_string(); n];
    let mut last: Option<&Span> = None;
    for sp in sorted {
        if sp.start >= sp.end || sp.end > n {
            return Err(Error::SpanOutOfRange {
                start: sp.start,
                end: sp.end,
                len: n,
            });
        }
        if let Some(prev) = last {
            if sp.start < prev.end {
                return Err(Error::OverlappingSpans {
                    first_start: prev.start,
                    first_end: prev.end,
                    second_start: sp.start,
                    second_end: sp.end,
                });
            }
        }
        let ty = &sp.entity_type;
        for (k, slot) in labels[sp.start..sp.end].iter_mut().enumerate() {
            let p = match scheme {
                Scheme::Bio => {
                    if k == 0 {
                        'B'
                    } else {
                        'I'
                    }
                }
                Scheme::Bilou => match (k == 0, k + 1 == sp.len()) {
                    (true, true) => 'U',
                    (true, false) => 'B',
                    (false, true) => 'L',
                    (false, false) => 'I',
                },
            };
            *slot = format!("{p}-{ty}");
        }
        last = Some(sp);
    }
    Ok(labels)
}

/// Sentence, annotation, surface form, token and entity-tag counts.
///
/// Unknown positions count as neither entity tags nor span members.
pub fn corpus_stats(ds: &Dataset) -> CorpusStats {
    let mut stats = CorpusStats {
        sentences: ds.len(),
        tokens: ds.num_tokens(),
        ..Default::default()
    };
    let mut forms: HashSet<(String, String)> = HashSet::new();
    for s in &ds.sentences {
        let labels: Vec<&str> = s
            .states
            .iter()
            .map(|st| match st {
                LabelState::Observed(l) => ds.tagset.label(*l),
                LabelState::Unknown => OUTSIDE,
            })
            .collect();
        stats.entity_tags += labels.iter().filter(|l| **l != OUTSIDE).count();
        for sp in labels_to_spans_lenient(&labels, ds.tagset.scheme()) {
            stats.annotations += 1;
            forms.insert((s.tokens[sp.start..sp.end].join(" "), sp.entity_type));
        }
    }
    stats.surface_forms = forms.len();
    stats
}
