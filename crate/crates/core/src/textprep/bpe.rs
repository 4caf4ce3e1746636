//! Byte-pair subword vocabulary with `##` continuation pieces.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];
const CONT: &str = "##";

/// A trained subword vocabulary. Piece ids are dense and the four special
/// tokens occupy ids 0..4.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    pieces: Vec<String>,
    merges: Vec<(String, String)>,
    ids: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
}

fn merged(left: &str, right: &str) -> String {
    let mut s = left.to_owned();
    s.push_str(right.strip_prefix(CONT).unwrap_or(right));
    s
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONT}{c}") })
        .collect()
}

impl Vocab {
    /// Builds a vocabulary from non-special pieces and ordered merge rules.
    pub fn from_parts(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for p in pieces {
            if SPECIALS.contains(&p.as_str()) {
                return Err(Error::InvalidInput(format!("special token {p} listed as a piece")));
            }
            all.push(p);
        }
        Self::build(all, merges)
    }

    fn build(pieces: Vec<String>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if ids.insert(p.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate piece {p:?}")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::InvalidInput(format!("special token {s} must have id {i}")));
            }
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Vocab {
            pieces,
            merges,
            ids,
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> &str {
        &self.pieces[id as usize]
    }

    pub fn cls(&self) -> u32 {
        2
    }

    pub fn sep(&self) -> u32 {
        3
    }

    pub fn unk(&self) -> u32 {
        1
    }

    pub fn pad(&self) -> u32 {
        0
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Splits one word into piece ids. A word containing a symbol outside
    /// the vocabulary becomes a single `[UNK]`.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let joined = merged(&symbols[i], &symbols[i + 1]);
            symbols.splice(i..i + 2, [joined]);
        }
        let ids: Option<Vec<u32>> = symbols.iter().map(|s| self.id(s)).collect();
        ids.unwrap_or_else(|| vec![self.unk()])
    }

    /// Serialises as `pieces N merges M`, then pieces, then `left right` merges.
    pub fn to_text(&self) -> String {
        let mut out = format!("pieces {} merges {}\n", self.pieces.len(), self.merges.len());
        for p in &self.pieces {
            out.push_str(p);
            out.push('\n');
        }
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (n, m) = match fields.as_slice() {
            ["pieces", n, "merges", m] => (
                n.parse::<usize>().map_err(|_| Error::parse(origin, 1, "bad piece count"))?,
                m.parse::<usize>().map_err(|_| Error::parse(origin, 1, "bad merge count"))?,
            ),
            _ => return Err(Error::parse(origin, 1, "expected `pieces N merges M`")),
        };
        let mut pieces = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(origin, i + 2, "missing piece"))?;
            pieces.push(line.to_owned());
        }
        let mut merges = Vec::with_capacity(m);
        for i in 0..m {
            let lineno = n + i + 2;
            let line = lines
                .next()
                .ok_or_else(|| Error::parse(origin, lineno, "missing merge"))?;
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_owned(), b.to_owned()))
                }
                _ => return Err(Error::parse(origin, lineno, "expected `left right`")),
            }
        }
        Self::build(pieces, merges).map_err(|e| Error::parse(origin, 1, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Greedy pair-merge training over a word multiset. At each step the most
/// frequent adjacent pair is merged; ties go to the lexicographically
/// smallest `(left, right)` pair.
pub fn train_subword_vocab<S: AsRef<str>>(corpus: &[S], target_size: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in corpus {
        let w = w.as_ref();
        if !w.is_empty() {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .map(|(w, &c)| (initial_symbols(w), c))
        .collect();

    let mut alphabet: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    alphabet.sort();
    alphabet.dedup();
    let minimum = SPECIALS.len() + alphabet.len();
    if target_size < minimum {
        return Err(Error::InvalidInput(format!(
            "target vocabulary size {target_size} is below alphabet plus specials ({minimum})"
        )));
    }

    let mut pieces: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    pieces.extend(alphabet);
    let mut known: std::collections::HashSet<String> = pieces.iter().cloned().collect();
    let mut merges = Vec::new();

    while pieces.len() < target_size {
        let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, c) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &c) in &pair_counts {
            if best.map_or(true, |(_, bc)| c > bc) {
                best = Some((pair, c));
            }
        }
        let Some(((left, right), _)) = best else { break };
        let (left, right) = (left.to_owned(), right.to_owned());
        let joined = merged(&left, &right);

        for (symbols, _) in &mut words {
            let mut i = 0;
            while i + 1 < symbols.len() {
                if symbols[i] == left && symbols[i + 1] == right {
                    symbols.splice(i..i + 2, [joined.clone()]);
                }
                i += 1;
            }
        }
        if known.insert(joined.clone()) {
            pieces.push(joined);
        }
        merges.push((left, right));
    }
    Vocab::build(pieces, merges)
}

/// Subword encoding of a query–document pair.
///
/// `words` holds the query words followed by the document words;
/// `word_index[t]` is the index into `words` of the word that produced token
/// `t`, or `None` for `[CLS]` / `[SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedSequence {
    pub token_ids: Vec<u32>,
    pub word_index: Vec<Option<usize>>,
    /// 0 for the query segment (including `[CLS]` and the first `[SEP]`),
    /// 1 for the document segment and the closing `[SEP]`.
    pub segment: Vec<u8>,
    pub words: Vec<String>,
    pub m_q: usize,
    pub m_d: usize,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// The word behind token `t`, if any.
    pub fn word(&self, t: usize) -> Option<&str> {
        self.word_index[t].map(|w| self.words[w].as_str())
    }

    pub fn is_query_word(&self, w: usize) -> bool {
        w < self.m_q
    }

    /// Token positions grouped by word index.
    pub fn word_spans(&self) -> Vec<Vec<usize>> {
        let mut spans = vec![Vec::new(); self.words.len()];
        for (t, w) in self.word_index.iter().enumerate() {
            if let Some(w) = w {
                spans[*w].push(t);
            }
        }
        spans
    }
}

/// Emits `[CLS] q-pieces [SEP] d-pieces [SEP]`.
pub fn encode_pair<S: AsRef<str>>(query_words: &[S], doc_words: &[S], vocab: &Vocab) -> TokenizedSequence {
    let mut seq = TokenizedSequence {
        token_ids: vec![vocab.cls()],
        word_index: vec![None],
        segment: vec![0],
        words: Vec::with_capacity(query_words.len() + doc_words.len()),
        m_q: query_words.len(),
        m_d: doc_words.len(),
    };
    for (segment, words) in [(0u8, query_words), (1u8, doc_words)] {
        for w in words {
            let w = w.as_ref();
            let wi = seq.words.len();
            seq.words.push(w.to_owned());
            for id in vocab.encode_word(w) {
                seq.token_ids.push(id);
                seq.word_index.push(Some(wi));
                seq.segment.push(segment);
            }
        }
        seq.token_ids.push(vocab.sep());
        seq.word_index.push(None);
        seq.segment.push(segment);
    }
    seq
}
