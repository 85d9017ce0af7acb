//! Unit sequences: deduplication, BPE compression and bit-rate.
//!
//! Unit files are UTF-8 text, one utterance per line:
//! `id<TAB>u1 u2 u3 ...` (an empty sequence leaves nothing after the tab).
//!
//! BPE model files are UTF-8 text. The first line is `#base_vocab <n>`;
//! every following line is one merge `left right new`, in training order.

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_BPE_VOCAB: usize = 3000;

/// Cluster indices of one utterance and its duration.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSequence {
    pub id: String,
    pub units: Vec<u32>,
    pub duration_s: f64,
}

impl UnitSequence {
    pub fn new(id: impl Into<String>, units: Vec<u32>, duration_s: f64) -> Self {
        UnitSequence {
            id: id.into(),
            units,
            duration_s,
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Collapses runs of equal adjacent units.
pub fn deduplicate(s: &UnitSequence) -> UnitSequence {
    let mut units = s.units.clone();
    units.dedup();
    UnitSequence {
        units,
        ..s.clone()
    }
}

/// An ordered list of pair merges over a base alphabet `0..base_vocab`.
/// Merge `i` produces symbol `base_vocab + i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    base_vocab: u32,
    merges: Vec<(u32, u32)>,
}

impl BpeModel {
    pub fn new(base_vocab: u32, merges: Vec<(u32, u32)>) -> Result<Self> {
        if base_vocab == 0 {
            return Err(Error::param("BPE base vocabulary must be non-empty"));
        }
        for (i, &(l, r)) in merges.iter().enumerate() {
            let limit = base_vocab as usize + i;
            if l as usize >= limit || r as usize >= limit {
                return Err(Error::Data(format!(
                    "merge {i} ({l}, {r}) refers to a symbol not yet defined"
                )));
            }
        }
        Ok(BpeModel { base_vocab, merges })
    }

    pub fn base_vocab(&self) -> u32 {
        self.base_vocab
    }

    /// Base vocabulary plus one symbol per merge.
    pub fn vocab_size(&self) -> usize {
        self.base_vocab as usize + self.merges.len()
    }

    /// `(left, right, new)` triples in application order.
    pub fn merges(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.merges
            .iter()
            .enumerate()
            .map(|(i, &(l, r))| (l, r, self.base_vocab + i as u32))
    }

    /// Applies every merge in training order, each left to right over the
    /// whole sequence before the next one.
    pub fn encode_units(&self, units: &[u32]) -> Result<Vec<u32>> {
        if let Some(&u) = units.iter().find(|&&u| u >= self.base_vocab) {
            return Err(Error::Data(format!(
                "unit {u} is outside the base vocabulary of {}",
                self.base_vocab
            )));
        }
        let ranks: HashMap<(u32, u32), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, i))
            .collect();
        let mut seq = units.to_vec();
        // A merge can only create pairs containing its new symbol, whose rank
        // is above its own, so repeatedly applying the lowest-ranked pair
        // present is the same as walking the merge list in order.
        loop {
            let best = seq
                .windows(2)
                .filter_map(|w| ranks.get(&(w[0], w[1])).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = self.merges[rank];
            seq = merge_pair(&seq, l, r, self.base_vocab + rank as u32);
        }
        Ok(seq)
    }

    pub fn encode(&self, s: &UnitSequence) -> Result<UnitSequence> {
        Ok(UnitSequence {
            units: self.encode_units(&s.units)?,
            ..s.clone()
        })
    }

    /// Expands symbols back into base units.
    pub fn decode_units(&self, symbols: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(symbols.len());
        let mut stack = Vec::new();
        for &s in symbols.iter().rev() {
            stack.push(s);
        }
        while let Some(s) = stack.pop() {
            if s < self.base_vocab {
                out.push(s);
            } else {
                let (l, r) = *self
                    .merges
                    .get((s - self.base_vocab) as usize)
                    .ok_or_else(|| Error::Data(format!("unknown BPE symbol {s}")))?;
                stack.push(r);
                stack.push(l);
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#base_vocab {}\n", self.base_vocab);
        for (l, r, n) in self.merges() {
            let _ = writeln!(out, "{l} {r} {n}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let base_vocab = loop {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::Data("BPE model is missing its #base_vocab line".into()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let value = line
                .strip_prefix("#base_vocab")
                .ok_or_else(|| Error::Data(format!("BPE line {}: expected #base_vocab", i + 1)))?;
            break value.trim().parse::<u32>().map_err(|e| {
                Error::Data(format!("BPE line {}: bad base vocabulary: {e}", i + 1))
            })?;
        };
        let mut merges = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<u32> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("BPE line {}: {e}", i + 1)))?;
            let [l, r, n] = fields[..] else {
                return Err(Error::Data(format!(
                    "BPE line {}: expected `left right new`",
                    i + 1
                )));
            };
            let expected = base_vocab + merges.len() as u32;
            if n != expected {
                return Err(Error::Data(format!(
                    "BPE line {}: new symbol {n}, expected {expected}",
                    i + 1
                )));
            }
            merges.push((l, r));
        }
        Self::new(base_vocab, merges)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn merge_pair(seq: &[u32], l: u32, r: u32, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == l && seq[i + 1] == r {
            out.push(new);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

/// Max-heap entry: higher count first, then smaller left, then smaller right.
#[derive(Debug, PartialEq, Eq)]
struct Candidate {
    count: usize,
    pair: (u32, u32),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy BPE training over unit sequences.
///
/// Repeatedly merges the most frequent adjacent pair (counted over all
/// adjacent positions, never across utterances), breaking count ties by the
/// smaller left symbol and then the smaller right symbol. Stops when the
/// vocabulary reaches `vocab_size` or no pair occurs at least twice.
pub fn fit_bpe<'a, I>(corpus: I, base_vocab: u32, vocab_size: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    if vocab_size <= base_vocab as usize {
        return Err(Error::param(format!(
            "BPE vocabulary size {vocab_size} must exceed the base vocabulary {base_vocab}"
        )));
    }
    if vocab_size > u32::MAX as usize {
        return Err(Error::param("BPE vocabulary size overflows u32"));
    }
    let mut seqs: Vec<Vec<u32>> = Vec::new();
    for units in corpus {
        if let Some(&u) = units.iter().find(|&&u| u >= base_vocab) {
            return Err(Error::Data(format!(
                "unit {u} is outside the base vocabulary of {base_vocab}"
            )));
        }
        seqs.push(units.to_vec());
    }

    let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (si, s) in seqs.iter().enumerate() {
        for w in s.windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
            where_.entry((w[0], w[1])).or_default().insert(si);
        }
    }
    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &count)| Candidate { count, pair })
        .collect();

    let mut merges = Vec::new();
    while base_vocab as usize + merges.len() < vocab_size {
        let Some(top) = heap.pop() else { break };
        let current = counts.get(&top.pair).copied().unwrap_or(0);
        if current != top.count {
            continue; // stale
        }
        if current < 2 {
            break;
        }
        let (l, r) = top.pair;
        let new = base_vocab + merges.len() as u32;
        merges.push(top.pair);

        let mut touched: Vec<usize> = where_.remove(&top.pair).unwrap_or_default().into_iter().collect();
        touched.sort_unstable();
        let mut changed: HashSet<(u32, u32)> = HashSet::new();
        for si in touched {
            let old = &seqs[si];
            let next = merge_pair(old, l, r, new);
            if next.len() == old.len() {
                continue;
            }
            for w in old.windows(2) {
                let p = (w[0], w[1]);
                let c = counts.get_mut(&p).expect("counted pair");
                *c -= 1;
                changed.insert(p);
            }
            for w in next.windows(2) {
                let p = (w[0], w[1]);
                *counts.entry(p).or_default() += 1;
                changed.insert(p);
            }
            // membership sets may keep stale entries; they only cost a rescan
            for w in next.windows(2) {
                where_.entry((w[0], w[1])).or_default().insert(si);
            }
            seqs[si] = next;
        }
        counts.remove(&top.pair);
        let mut changed: Vec<_> = changed.into_iter().collect();
        changed.sort_unstable();
        for p in changed {
            match counts.get(&p) {
                Some(&0) => {
                    counts.remove(&p);
                }
                Some(&c) => heap.push(Candidate { count: c, pair: p }),
                None => {}
            }
        }
    }
    BpeModel::new(base_vocab, merges)
}

/// Per-utterance bit-rate `N·log2(V)/U`.
pub fn utterance_bitrate(len: usize, vocab_size: usize, duration_s: f64) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::param(format!("vocabulary size must be at least 2, got {vocab_size}")));
    }
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::param(format!("duration must be positive, got {duration_s}")));
    }
    Ok(len as f64 * (vocab_size as f64).log2() / duration_s)
}

/// Mean of the per-utterance bit-rates.
pub fn bitrate(sequences: &[UnitSequence], vocab_size: usize) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::param("bit-rate of an empty sequence list"));
    }
    let mut total = 0.0;
    for s in sequences {
        total += utterance_bitrate(s.len(), vocab_size, s.duration_s)?;
    }
    Ok(total / sequences.len() as f64)
}

pub fn format_unit_line(id: &str, units: &[u32]) -> String {
    let mut line = String::with_capacity(id.len() + 1 + units.len() * 5);
    line.push_str(id);
    line.push('\t');
    for (i, u) in units.iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{u}");
    }
    line
}

/// Parses a unit file into `(id, units)` pairs.
pub fn parse_unit_file(text: &str) -> Result<Vec<(String, Vec<u32>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("unit line {}: missing tab", i + 1)))?;
        let units = rest
            .split_whitespace()
            .map(str::parse::<u32>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Data(format!("unit line {}: {e}", i + 1)))?;
        out.push((id.to_string(), units));
    }
    Ok(out)
}
