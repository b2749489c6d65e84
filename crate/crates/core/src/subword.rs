//! Byte-pair-encoding subword model.
//!
//! Words are split into characters followed by a separate end-of-word symbol
//! `</w>`; merges are learned greedily by pair frequency with ties broken by
//! the lexicographic order of the pair, so training is deterministic. Special
//! symbols (padding, sentence boundaries, unknown, and any language or variant
//! tags) occupy the lowest ids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const END_OF_WORD: &str = "</w>";

/// Number of fixed specials before any tag.
pub const CORE_SPECIALS: usize = 4;

const HEADER: &str = "#dualdec-bpe";

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    specials: usize,
}

type Symbols = Vec<String>;

fn split_word(word: &str) -> Symbols {
    let mut s: Symbols = word.chars().map(String::from).collect();
    s.push(END_OF_WORD.to_string());
    s
}

fn apply_merge(symbols: &mut Symbols, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
        }
        i += 1;
    }
}

impl SubwordModel {
    /// Learns up to `num_merges` merge operations from whitespace-tokenized
    /// sentences. `tags` become extra special symbols placed right after the
    /// core specials.
    pub fn train<S: AsRef<str>>(corpus: &[S], num_merges: usize, tags: &[String]) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Input("cannot train a subword model on an empty corpus".into()));
        }
        let mut words: Vec<(Symbols, usize)> =
            counts.iter().map(|(w, &c)| (split_word(w), c)).collect();
        let alphabet: BTreeSet<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();

        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
                }
            }
            // BTreeMap iterates pairs in lexicographic order; keep the first maximum.
            let mut best: Option<((&str, &str), usize)> = None;
            for (p, c) in pairs {
                if best.is_none_or(|(_, bc)| c > bc) {
                    best = Some((p, c));
                }
            }
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in &mut words {
                apply_merge(syms, &l, &r);
            }
            merges.push((l, r));
        }

        let mut specials = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
        ];
        for t in tags {
            if specials.contains(t) {
                return Err(Error::Config(format!("duplicate special symbol {t}")));
            }
            specials.push(t.clone());
        }
        let mut tokens = specials.clone();
        let mut seen: BTreeSet<String> = specials.iter().cloned().collect();
        for sym in alphabet.iter().cloned().chain(merges.iter().map(|(l, r)| format!("{l}{r}"))) {
            if seen.contains(&sym) {
                if specials.contains(&sym) {
                    return Err(Error::Config(format!("special symbol {sym} collides with a learned token")));
                }
                continue;
            }
            seen.insert(sym.clone());
            tokens.push(sym);
        }
        Ok(Self::assemble(merges, tokens, specials.len()))
    }

    fn assemble(merges: Vec<(String, String)>, tokens: Vec<String>, specials: usize) -> Self {
        let ranks = merges.iter().cloned().enumerate().map(|(i, p)| (p, i)).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        SubwordModel {
            merges,
            ranks,
            tokens,
            ids,
            specials,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_specials(&self) -> usize {
        self.specials
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials
    }

    /// Ids of the tag symbols, in declaration order.
    pub fn tag_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (CORE_SPECIALS as u32..self.specials as u32).map(|i| i)
    }

    /// Subword segmentation of one word, as symbol strings.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = split_word(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.merges[rank];
            apply_merge(&mut syms, l, r);
        }
        syms
    }

    /// Encodes a sentence; characters outside the training alphabet become `<unk>`.
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for w in sentence.split_whitespace() {
            if let Some(&id) = self.ids.get(w).filter(|&&id| self.is_special(id) && id != UNK) {
                // tags and specials written verbatim stay atomic
                out.push(id);
                continue;
            }
            for sym in self.segment_word(w) {
                out.push(self.ids.get(&sym).copied().unwrap_or(UNK));
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode). Padding and sentence-boundary ids
    /// are dropped; other specials are rendered as standalone words.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut in_word = false;
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Input(format!("id {id} outside vocabulary of {}", self.vocab_size())))?;
            if matches!(id, PAD | BOS | EOS) {
                continue;
            }
            if self.is_special(id) {
                if in_word {
                    out.push(' ');
                    in_word = false;
                }
                out.push_str(tok);
                out.push(' ');
                continue;
            }
            match tok.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                    in_word = false;
                }
                None => {
                    out.push_str(tok);
                    in_word = true;
                }
            }
        }
        Ok(out.trim_end().to_string())
    }

    /// Text serialization: header line, merge rules, then `token<TAB>id` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{HEADER} merges={} vocab={} specials={}",
            self.merges.len(),
            self.tokens.len(),
            self.specials
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Input(format!("malformed subword model: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file"))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER) {
            return Err(bad("missing header"));
        }
        let mut count = |key: &str| -> Result<usize> {
            let f = fields.next().ok_or_else(|| bad("short header"))?;
            f.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("expected {key}=<n>")))
        };
        let (n_merges, n_vocab, n_specials) = (count("merges")?, count("vocab")?, count("specials")?);
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merge list"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(line))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut tokens = Vec::with_capacity(n_vocab);
        for i in 0..n_vocab {
            let line = lines.next().ok_or_else(|| bad("truncated vocabulary"))?;
            let (t, id) = line.rsplit_once('\t').ok_or_else(|| bad(line))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(bad(&format!("vocabulary ids must be consecutive, line {line:?}")));
            }
            tokens.push(t.to_string());
        }
        if n_specials < CORE_SPECIALS || n_specials > tokens.len() {
            return Err(bad("special count out of range"));
        }
        Ok(Self::assemble(merges, tokens, n_specials))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
