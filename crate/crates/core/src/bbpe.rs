//! Byte-level BPE tokenizer.
//!
//! Ids `0..256` are raw bytes, ids `256..256 + merges` are learned merges in
//! priority order, and the special tokens occupy the ids above those. Merges
//! operate on raw byte streams with no pre-tokenization, and special tokens are
//! never produced by [`Vocab::encode`] nor consumed by a merge.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::util::sha256_hex;

pub type TokenId = u32;

pub const SEP: &str = "[SEP]";
pub const EOH: &str = "[EOH]";
pub const PAD: &str = "[PAD]";
pub const DEFAULT_SPECIALS: [&str; 3] = [SEP, EOH, PAD];
pub const DEFAULT_VOCAB_SIZE: usize = 4096;

const HEADER: &str = "bbpe-vocab v1";

#[derive(Debug, Error)]
pub enum BbpeError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("target vocabulary size {target} is below the {floor} byte and special tokens")]
    TargetTooSmall { target: usize, floor: usize },
    #[error("invalid special token {0:?}")]
    BadSpecial(String),
    #[error("unknown token id {0}")]
    UnknownId(TokenId),
    #[error("vocabulary has no {0} token")]
    MissingSpecial(&'static str),
    #[error("malformed vocabulary file at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    token_bytes: Vec<Vec<u8>>,
    specials: Vec<String>,
}

impl Vocab {
    fn from_parts(merges: Vec<(TokenId, TokenId)>, specials: Vec<String>) -> Result<Self, BbpeError> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let n = token_bytes.len() as TokenId;
            if a >= n || b >= n {
                return Err(BbpeError::Parse {
                    line: rank + 3,
                    reason: format!("merge ({a}, {b}) references an undefined token"),
                });
            }
            let mut joined = token_bytes[a as usize].clone();
            joined.extend_from_slice(&token_bytes[b as usize]);
            token_bytes.push(joined);
            ranks.insert((a, b), rank as u32);
        }
        validate_specials(&specials)?;
        Ok(Self {
            merges,
            ranks,
            token_bytes,
            specials,
        })
    }

    /// A vocabulary with no merges.
    pub fn bytes_only(specials: &[&str]) -> Result<Self, BbpeError> {
        Self::from_parts(Vec::new(), specials.iter().map(|s| s.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        256 + self.merges.len() + self.specials.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<TokenId> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (256 + self.merges.len() + i) as TokenId)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        let first = 256 + self.merges.len();
        (id as usize) >= first && (id as usize) < self.len()
    }

    pub fn sep(&self) -> Result<TokenId, BbpeError> {
        self.special_id(SEP).ok_or(BbpeError::MissingSpecial(SEP))
    }

    pub fn eoh(&self) -> Result<TokenId, BbpeError> {
        self.special_id(EOH).ok_or(BbpeError::MissingSpecial(EOH))
    }

    pub fn pad(&self) -> Result<TokenId, BbpeError> {
        self.special_id(PAD).ok_or(BbpeError::MissingSpecial(PAD))
    }

    /// Applies merges in learned priority order: repeatedly merge every
    /// occurrence of the lowest-ranked adjacent pair until none remains.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.bytes().map(TokenId::from).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (a, b) = self.merges[rank as usize];
            let new_id = 256 + rank;
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// Concatenates token bytes and decodes as UTF-8 (lossily for byte runs
    /// that are not valid UTF-8). Special tokens render as their names.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, BbpeError> {
        let mut bytes = Vec::new();
        let first_special = 256 + self.merges.len();
        for &id in ids {
            let i = id as usize;
            if i < first_special {
                bytes.extend_from_slice(&self.token_bytes[i]);
            } else if let Some(name) = self.specials.get(i - first_special) {
                bytes.extend_from_slice(name.as_bytes());
            } else {
                return Err(BbpeError::UnknownId(id));
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Bytes of a non-special token.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.token_bytes.get(id as usize).map(|b| b.as_slice())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        writeln!(out, "merges {} specials {}", self.merges.len(), self.specials.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(out, "{a} {b}").unwrap();
        }
        for name in &self.specials {
            writeln!(out, "{} {}", self.special_id(name).unwrap(), name).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BbpeError> {
        let parse_err = |line: usize, reason: &str| BbpeError::Parse {
            line,
            reason: reason.to_string(),
        };
        // Lines starting with '#' are annotations and carry no vocabulary data.
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(HEADER) {
            return Err(parse_err(1, "missing header"));
        }
        let counts: Vec<&str> = lines
            .next()
            .ok_or_else(|| parse_err(2, "missing counts"))?
            .split(' ')
            .collect();
        let (n_merges, n_specials) = match counts.as_slice() {
            ["merges", m, "specials", s] => (
                m.parse::<usize>().map_err(|_| parse_err(2, "bad merge count"))?,
                s.parse::<usize>().map_err(|_| parse_err(2, "bad special count"))?,
            ),
            _ => return Err(parse_err(2, "bad counts line")),
        };
        let mut merges = Vec::with_capacity(n_merges);
        for i in 0..n_merges {
            let line_no = i + 3;
            let line = lines.next().ok_or_else(|| parse_err(line_no, "missing merge"))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| parse_err(line_no, "bad merge"))?;
            let a = a.parse().map_err(|_| parse_err(line_no, "bad merge id"))?;
            let b = b.parse().map_err(|_| parse_err(line_no, "bad merge id"))?;
            merges.push((a, b));
        }
        let mut specials = Vec::with_capacity(n_specials);
        for i in 0..n_specials {
            let line_no = n_merges + i + 3;
            let line = lines.next().ok_or_else(|| parse_err(line_no, "missing special"))?;
            let (id, name) = line.split_once(' ').ok_or_else(|| parse_err(line_no, "bad special"))?;
            let id: usize = id.parse().map_err(|_| parse_err(line_no, "bad special id"))?;
            if id != 256 + n_merges + i {
                return Err(parse_err(line_no, "special id out of sequence"));
            }
            specials.push(name.to_string());
        }
        if lines.next().is_some() {
            return Err(parse_err(n_merges + n_specials + 3, "trailing content"));
        }
        Self::from_parts(merges, specials)
    }

    pub fn save(&self, path: &Path) -> Result<(), BbpeError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BbpeError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized vocabulary.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

fn validate_specials(specials: &[String]) -> Result<(), BbpeError> {
    let mut seen = HashSet::new();
    for s in specials {
        if s.is_empty() || s.chars().any(char::is_whitespace) || !seen.insert(s.as_str()) {
            return Err(BbpeError::BadSpecial(s.clone()));
        }
    }
    Ok(())
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count.cmp(&other.count).then_with(|| self.key.cmp(&other.key))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Learns merges greedily: the most frequent adjacent pair is merged until the
/// vocabulary reaches `target_vocab_size` or no pair occurs at least twice.
/// Frequency ties go to the lexicographically smallest `(left, right)` pair of
/// token byte strings.
pub fn train_bbpe<'a, I>(texts: I, target_vocab_size: usize, specials: &[&str]) -> Result<Vocab, BbpeError>
where
    I: IntoIterator<Item = &'a str>,
{
    let floor = 256 + specials.len();
    if target_vocab_size < floor {
        return Err(BbpeError::TargetTooSmall {
            target: target_vocab_size,
            floor,
        });
    }
    let mut unique: HashMap<&[u8], i64> = HashMap::new();
    let mut any = false;
    for t in texts {
        any = true;
        if !t.is_empty() {
            *unique.entry(t.as_bytes()).or_default() += 1;
        }
    }
    if !any || unique.is_empty() {
        return Err(BbpeError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<TokenId>, i64)> = unique
        .into_iter()
        .map(|(bytes, c)| (bytes.iter().map(|&b| TokenId::from(b)).collect(), c))
        .collect();
    words.sort();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
    let mut occurs: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
    for (wi, (ids, c)) in words.iter().enumerate() {
        for w in ids.windows(2) {
            let p = (w[0], w[1]);
            *counts.entry(p).or_default() += c;
            occurs.entry(p).or_default().insert(wi);
        }
    }
    let candidate = |pair: (TokenId, TokenId), count: i64, token_bytes: &[Vec<u8>]| Candidate {
        count,
        key: Reverse((
            token_bytes[pair.0 as usize].clone(),
            token_bytes[pair.1 as usize].clone(),
        )),
        pair,
    };
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&p, &c)| candidate(p, c, &token_bytes))
        .collect();

    let mut merges = Vec::new();
    while floor + merges.len() < target_vocab_size {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if counts.get(&c.pair).copied().unwrap_or(0) == c.count => break Some(c),
                Some(_) => continue,
            }
        };
        let Some(best) = best else { break };
        if best.count < 2 {
            break;
        }
        let (a, b) = best.pair;
        let new_id = token_bytes.len() as TokenId;
        let mut joined = token_bytes[a as usize].clone();
        joined.extend_from_slice(&token_bytes[b as usize]);
        token_bytes.push(joined);
        merges.push((a, b));

        let mut affected: Vec<usize> = occurs.remove(&best.pair).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        let mut touched: HashSet<(TokenId, TokenId)> = HashSet::new();
        for wi in affected {
            let (ids, c) = &mut words[wi];
            if !ids.windows(2).any(|w| w[0] == a && w[1] == b) {
                continue;
            }
            for w in ids.windows(2) {
                let p = (w[0], w[1]);
                *counts.get_mut(&p).expect("pair counted") -= *c;
                touched.insert(p);
            }
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == a && ids[i + 1] == b {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            *ids = out;
            for w in ids.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += *c;
                occurs.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        counts.remove(&best.pair);
        let mut touched: Vec<_> = touched.into_iter().collect();
        touched.sort_unstable();
        for p in touched {
            match counts.get(&p).copied() {
                Some(c) if c > 0 => heap.push(candidate(p, c, &token_bytes)),
                Some(_) => {
                    counts.remove(&p);
                }
                None => {}
            }
        }
    }
    Vocab::from_parts(merges, specials.iter().map(|s| s.to_string()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // "aaaa aaaa": (a,a) occurs 6 times, (a,' ') and (' ',a) once each.
        let v = train_bbpe(["aaaa aaaa"], 256 + 3 + 1, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(v.len(), 260);
    }

    #[test]
    fn frequency_ties_break_lexicographically() {
        // "ab" and "cd" both occur twice; ("a","b") < ("c","d").
        let v = train_bbpe(["cd", "ab", "cd", "ab"], 256 + 3 + 1, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.merges(), &[(b'a' as u32, b'b' as u32)]);
    }

    #[test]
    fn minimal_target_gives_pure_byte_vocab() {
        let v = train_bbpe(["hello hello"], 256 + 3, &DEFAULT_SPECIALS).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("hé"), vec![104, 0xc3, 0xa9]);
    }

    #[test]
    fn training_stops_when_no_pair_repeats() {
        let v = train_bbpe(["abcdef"], 1000, &DEFAULT_SPECIALS).unwrap();
        assert!(v.merges().is_empty());
    }

    #[test]
    fn encode_applies_merge() {
        let v = train_bbpe(["aaaa aaaa"], 260, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.encode("aaaa"), vec![256, 256]);
        assert_eq!(v.encode(""), Vec::<TokenId>::new());
    }

    #[test]
    fn specials_sit_above_merges() {
        let v = train_bbpe(["aaaa aaaa"], 260, &DEFAULT_SPECIALS).unwrap();
        assert_eq!(v.sep().unwrap(), 257);
        assert_eq!(v.eoh().unwrap(), 258);
        assert_eq!(v.pad().unwrap(), 259);
        assert_eq!(v.decode(&[257]).unwrap(), "[SEP]");
        assert!(matches!(v.decode(&[260]), Err(BbpeError::UnknownId(260))));
        // literal special names are encoded as ordinary bytes
        assert!(v.encode("[EOH]").iter().all(|&id| !v.is_special(id)));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_bbpe(Vec::<&str>::new(), 300, &DEFAULT_SPECIALS),
            Err(BbpeError::EmptyCorpus)
        ));
        assert!(matches!(
            train_bbpe(["x"], 258, &DEFAULT_SPECIALS),
            Err(BbpeError::TargetTooSmall { .. })
        ));
    }

    #[test]
    fn text_format_round_trips_exactly() {
        let v = train_bbpe(["the cat sat on the mat", "the hat"], 300, &DEFAULT_SPECIALS).unwrap();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(Vocab::from_text("nonsense").is_err());
    }
}
