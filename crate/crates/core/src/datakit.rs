//! Corpus construction: trilingual intersection, pseudo-trilingual and
//! bi-directional data, variant triples, and synthetic code-switched sources
//! built from word alignments and phrase pairs.
//!
//! Sentences are whitespace-tokenized text. Every generator is deterministic
//! given its seed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Reverses the token order of a sentence.
pub fn reverse_tokens(s: &str) -> String {
    let mut w = words(s);
    w.reverse();
    w.join(" ")
}

/// Prepends a target-language tag token.
pub fn with_tag(s: &str, tag: &str) -> String {
    format!("{tag} {s}")
}

/// Line-aligned parallel sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Bitext {
    pairs: Vec<(String, String)>,
}

impl Bitext {
    pub fn new(pairs: Vec<(String, String)>) -> Result<Self> {
        for (n, (s, t)) in pairs.iter().enumerate() {
            if s.trim().is_empty() || t.trim().is_empty() {
                return Err(Error::Input(format!("empty sentence on line {}", n + 1)));
            }
        }
        Ok(Bitext { pairs })
    }

    pub fn from_lines(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::Input(format!("{} source lines but {} target lines", src.len(), tgt.len())));
        }
        Self::new(src.into_iter().zip(tgt).collect())
    }

    pub fn read(src: &Path, tgt: &Path) -> Result<Self> {
        Self::from_lines(io::read_lines(src)?, io::read_lines(tgt)?)
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn swapped(&self) -> Bitext {
        Bitext {
            pairs: self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
        }
    }
}

/// A source with two targets. `synthetic` names the side produced by a
/// model rather than taken from a reference, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextTriple {
    pub src: String,
    pub tgt1: String,
    pub tgt2: String,
    pub synthetic: Option<usize>,
}

impl TextTriple {
    fn reference(src: &str, tgt1: &str, tgt2: &str) -> Self {
        TextTriple {
            src: src.into(),
            tgt1: tgt1.into(),
            tgt2: tgt2.into(),
            synthetic: None,
        }
    }
}

/// One triple per line, three TAB-separated columns.
pub fn read_triples(path: &Path) -> Result<Vec<TextTriple>> {
    io::read_lines(path)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            match cols.as_slice() {
                [s, a, b] if !s.trim().is_empty() && !a.trim().is_empty() && !b.trim().is_empty() => {
                    Ok(TextTriple::reference(s, a, b))
                }
                _ => Err(Error::Input(format!("{}:{}: expected three non-empty columns", path.display(), n + 1))),
            }
        })
        .collect()
}

pub fn write_triples(path: &Path, triples: &[TextTriple]) -> Result<()> {
    let lines: Vec<String> = triples.iter().map(|t| format!("{}\t{}\t{}", t.src, t.tgt1, t.tgt2)).collect();
    io::write_lines(path, &lines)
}

/// Joins two bitexts with a common source language on identical source
/// sentences. Repeated sources keep their first occurrence in each bitext.
pub fn intersect_trilingual(a: &Bitext, b: &Bitext) -> Vec<TextTriple> {
    let mut second: HashMap<&str, &str> = HashMap::new();
    for (s, t) in &b.pairs {
        second.entry(s.as_str()).or_insert(t);
    }
    let mut seen = HashSet::new();
    a.pairs
        .iter()
        .filter(|(s, _)| seen.insert(s.as_str()))
        .filter_map(|(s, t1)| second.get(s.as_str()).map(|t2| TextTriple::reference(s, t1, t2)))
        .collect()
}

/// Seeded permutation of `0..n`; positions with even rank form the first half.
fn half_split(n: usize, seed: u64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut first = vec![false; n];
    for (rank, &i) in order.iter().enumerate() {
        first[i] = rank % 2 == 0;
    }
    first
}

/// Replaces one target of every triple by a model translation: a seeded half
/// (⌈N/2⌉ samples) gets a synthetic first target, the rest a synthetic second
/// target. Samples whose translation fails are skipped with a warning.
pub fn make_pseudo_trilingual<F1, F2>(tri: &[TextTriple], mut translate1: F1, mut translate2: F2, seed: u64) -> Vec<TextTriple>
where
    F1: FnMut(&str) -> Result<String>,
    F2: FnMut(&str) -> Result<String>,
{
    let first = half_split(tri.len(), seed);
    let mut out = Vec::with_capacity(tri.len());
    for (n, t) in tri.iter().enumerate() {
        let side = if first[n] { 0 } else { 1 };
        let hyp = if side == 0 { translate1(&t.src) } else { translate2(&t.src) };
        match hyp {
            Ok(h) => {
                let mut s = TextTriple::reference(&t.src, &t.tgt1, &t.tgt2);
                if side == 0 {
                    s.tgt1 = h;
                } else {
                    s.tgt2 = h;
                }
                s.synthetic = Some(side);
                out.push(s);
            }
            Err(e) => log::warn!("sample {n} skipped: {e}"),
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BidiMode {
    /// Second target is the reversed reference.
    Gold,
    /// Each source once, one direction synthetic.
    Pseudo,
    /// Each source twice, once with the reference in each direction.
    PseudoDup,
}

impl FromStr for BidiMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(BidiMode::Gold),
            "pseudo" => Ok(BidiMode::Pseudo),
            "pseudo-dup" => Ok(BidiMode::PseudoDup),
            _ => Err(Error::Config(format!("unknown bidi mode {s:?}"))),
        }
    }
}

/// Builds left-to-right / right-to-left training triples. `tgt2` is always
/// in right-to-left order. `reverse` translates into right-to-left order
/// (its output is used as-is), `forward` into ordinary order; pseudo modes
/// need both.
pub fn make_bidi_corpus(
    bitext: &Bitext,
    mode: BidiMode,
    reverse: Option<&mut dyn FnMut(&str) -> Result<String>>,
    forward: Option<&mut dyn FnMut(&str) -> Result<String>>,
    seed: u64,
) -> Result<Vec<TextTriple>> {
    let gold = |s: &str, t: &str| TextTriple::reference(s, t, &reverse_tokens(t));
    if mode == BidiMode::Gold {
        return Ok(bitext.pairs.iter().map(|(s, t)| gold(s, t)).collect());
    }
    let (Some(reverse), Some(forward)) = (reverse, forward) else {
        return Err(Error::Config("pseudo bidi data needs forward and reverse translators".into()));
    };
    // Sample with a synthetic right-to-left side (true) or left-to-right side.
    let mut synth = |s: &str, t: &str, r2l: bool, n: usize| -> Option<TextTriple> {
        let mut x = gold(s, t);
        let hyp = if r2l { reverse(s) } else { forward(s) };
        match hyp {
            Ok(h) => {
                if r2l {
                    x.tgt2 = h;
                    x.synthetic = Some(1);
                } else {
                    x.tgt1 = h;
                    x.synthetic = Some(0);
                }
                Some(x)
            }
            Err(e) => {
                log::warn!("sample {n} skipped: {e}");
                None
            }
        }
    };
    let mut out = Vec::new();
    match mode {
        BidiMode::Pseudo => {
            let first = half_split(bitext.len(), seed);
            for (n, (s, t)) in bitext.pairs.iter().enumerate() {
                out.extend(synth(s, t, first[n], n));
            }
        }
        BidiMode::PseudoDup => {
            for (n, (s, t)) in bitext.pairs.iter().enumerate() {
                out.extend(synth(s, t, true, n));
                out.extend(synth(s, t, false, n));
            }
        }
        BidiMode::Gold => unreachable!(),
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VariantLabel {
    A,
    B,
    Neutral,
}

impl FromStr for VariantLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" | "variant-a" => Ok(VariantLabel::A),
            "b" | "variant-b" => Ok(VariantLabel::B),
            "n" | "neutral" => Ok(VariantLabel::Neutral),
            _ => Err(Error::Input(format!("unknown variant label {s:?}"))),
        }
    }
}

/// Builds (src, variant A, variant B) triples. Labeled sentences keep their
/// reference on their own side and get the counterpart from `translate`,
/// which is asked for the opposite variant. As many neutral sentences as
/// there are labeled ones are sampled and used with identical targets.
pub fn make_variant_triples<L, F>(data: &[(String, String, L)], mut translate: F, seed: u64) -> Result<Vec<TextTriple>>
where
    L: AsRef<str>,
    F: FnMut(&str, VariantLabel) -> Result<String>,
{
    let labels = data
        .iter()
        .map(|(_, _, l)| l.as_ref().parse())
        .collect::<Result<Vec<VariantLabel>>>()?;
    let mut out = Vec::new();
    let mut neutral = Vec::new();
    for ((src, tgt, _), label) in data.iter().zip(&labels) {
        match label {
            VariantLabel::Neutral => neutral.push((src, tgt)),
            VariantLabel::A => {
                let mut t = TextTriple::reference(src, tgt, &translate(src, VariantLabel::B)?);
                t.synthetic = Some(1);
                out.push(t);
            }
            VariantLabel::B => {
                let mut t = TextTriple::reference(src, &translate(src, VariantLabel::A)?, tgt);
                t.synthetic = Some(0);
                out.push(t);
            }
        }
    }
    let want = out.len().min(neutral.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, neutral.len(), want).into_vec();
    picked.sort_unstable();
    out.extend(picked.into_iter().map(|i| TextTriple::reference(neutral[i].0, neutral[i].1, neutral[i].1)));
    Ok(out)
}

/// Word links `(i, j)` from source position `i` to target position `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alignment {
    pub src_len: usize,
    pub tgt_len: usize,
    pub links: BTreeSet<(usize, usize)>,
}

impl Alignment {
    pub fn new(src_len: usize, tgt_len: usize, links: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let links: BTreeSet<_> = links.into_iter().collect();
        if let Some(&(i, j)) = links.iter().find(|&&(i, j)| i >= src_len || j >= tgt_len) {
            return Err(Error::Input(format!("link {i}-{j} outside a {src_len}x{tgt_len} pair")));
        }
        Ok(Alignment { src_len, tgt_len, links })
    }

    /// Parses Pharaoh "i-j" notation.
    pub fn parse_pharaoh(line: &str, src_len: usize, tgt_len: usize) -> Result<Self> {
        let links = line
            .split_whitespace()
            .map(|l| {
                let bad = || Error::Input(format!("malformed alignment link {l:?}"));
                let (i, j) = l.split_once('-').ok_or_else(bad)?;
                Ok((i.parse().map_err(|_| bad())?, j.parse().map_err(|_| bad())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(src_len, tgt_len, links)
    }

    pub fn to_pharaoh(&self) -> String {
        self.links.iter().map(|(i, j)| format!("{i}-{j}")).collect::<Vec<_>>().join(" ")
    }

    pub fn transposed(&self) -> Alignment {
        Alignment {
            src_len: self.tgt_len,
            tgt_len: self.src_len,
            links: self.links.iter().map(|&(i, j)| (j, i)).collect(),
        }
    }
}

/// Reads one Pharaoh line per sentence pair of `bitext`.
pub fn read_alignments(path: &Path, bitext: &Bitext) -> Result<Vec<Alignment>> {
    let lines = io::read_lines(path)?;
    if lines.len() != bitext.len() {
        return Err(Error::Input(format!("{} alignment lines for {} sentence pairs", lines.len(), bitext.len())));
    }
    lines
        .iter()
        .zip(&bitext.pairs)
        .map(|(l, (s, t))| Alignment::parse_pharaoh(l, words(s).len(), words(t).len()))
        .collect()
}

/// Lexical translation table of IBM Model 1, `t(target word | source word)`.
#[derive(Clone, Debug)]
pub struct Ibm1Model {
    src_ids: HashMap<String, u32>,
    tgt_ids: HashMap<String, u32>,
    table: HashMap<(u32, u32), f64>,
}

/// Source id 0 is the empty word.
const NULL_WORD: u32 = 0;

impl Ibm1Model {
    /// `t(tgt | src)`; `None` asks for the empty source word.
    pub fn prob(&self, src: Option<&str>, tgt: &str) -> f64 {
        let s = match src {
            None => Some(NULL_WORD),
            Some(w) => self.src_ids.get(w).copied(),
        };
        match (s, self.tgt_ids.get(tgt)) {
            (Some(s), Some(&t)) => self.table.get(&(s, t)).copied().unwrap_or(0.0),
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ibm1Output {
    pub model: Ibm1Model,
    /// Best link per target word; words best explained by the empty word stay unlinked.
    pub alignments: Vec<Alignment>,
    /// Corpus log-likelihood before each EM update and after the last one.
    pub log_likelihood: Vec<f64>,
}

/// IBM Model 1 trained by EM with an empty source word, aligning source to
/// target in one direction.
pub fn ibm1_align(bitext: &Bitext, iterations: usize) -> Result<Ibm1Output> {
    if iterations == 0 {
        return Err(Error::Config("at least one EM iteration is needed".into()));
    }
    let mut src_ids: HashMap<String, u32> = HashMap::new();
    let mut tgt_ids: HashMap<String, u32> = HashMap::new();
    let corpus: Vec<(Vec<u32>, Vec<u32>)> = bitext
        .pairs
        .iter()
        .map(|(s, t)| {
            let mut src = vec![NULL_WORD];
            for w in words(s) {
                let n = src_ids.len() as u32 + 1;
                src.push(*src_ids.entry(w.to_string()).or_insert(n));
            }
            let tgt = words(t)
                .into_iter()
                .map(|w| {
                    let n = tgt_ids.len() as u32;
                    *tgt_ids.entry(w.to_string()).or_insert(n)
                })
                .collect();
            (src, tgt)
        })
        .collect();

    let uniform = 1.0 / tgt_ids.len().max(1) as f64;
    let mut table: HashMap<(u32, u32), f64> = HashMap::new();
    for (src, tgt) in &corpus {
        for &s in src {
            for &t in tgt {
                table.insert((s, t), uniform);
            }
        }
    }

    let e_step = |table: &HashMap<(u32, u32), f64>, counts: Option<&mut BTreeMap<(u32, u32), f64>>| -> f64 {
        let mut ll = 0.0;
        let mut counts = counts;
        for (src, tgt) in &corpus {
            for &t in tgt {
                let z: f64 = src.iter().map(|&s| table[&(s, t)]).sum();
                ll += (z / src.len() as f64).ln();
                if let Some(c) = counts.as_deref_mut() {
                    for &s in src {
                        *c.entry((s, t)).or_insert(0.0) += table[&(s, t)] / z;
                    }
                }
            }
        }
        ll
    };

    let mut log_likelihood = Vec::with_capacity(iterations + 1);
    for _ in 0..iterations {
        // Ordered so float sums do not depend on hash order.
        let mut counts = BTreeMap::new();
        log_likelihood.push(e_step(&table, Some(&mut counts)));
        let mut totals: BTreeMap<u32, f64> = BTreeMap::new();
        for (&(s, _), &c) in &counts {
            *totals.entry(s).or_insert(0.0) += c;
        }
        for (k, v) in table.iter_mut() {
            *v = counts[k] / totals[&k.0];
        }
    }
    log_likelihood.push(e_step(&table, None));

    let alignments = corpus
        .iter()
        .map(|(src, tgt)| {
            let links = tgt.iter().enumerate().filter_map(|(j, &t)| {
                // Real words win ties against the empty word.
                let mut best: Option<(usize, f64)> = None;
                for (i, &s) in src.iter().enumerate().skip(1) {
                    let p = table[&(s, t)];
                    if best.is_none_or(|(_, b)| p > b) {
                        best = Some((i - 1, p));
                    }
                }
                best.filter(|&(_, p)| p >= table[&(NULL_WORD, t)]).map(|(i, _)| (i, j))
            });
            Alignment::new(src.len() - 1, tgt.len(), links)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Ibm1Output {
        model: Ibm1Model { src_ids, tgt_ids, table },
        alignments,
        log_likelihood,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Symmetrization {
    Intersection,
    Union,
    #[default]
    GrowDiagFinalAnd,
}

impl FromStr for Symmetrization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(Symmetrization::Intersection),
            "union" => Ok(Symmetrization::Union),
            "grow-diag-final-and" => Ok(Symmetrization::GrowDiagFinalAnd),
            _ => Err(Error::Config(format!("unknown symmetrization {s:?}"))),
        }
    }
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, 0), (0, -1), (1, 0), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Combines a source-to-target and a target-to-source alignment, both given
/// in source-target orientation.
pub fn symmetrize(fwd: &Alignment, bwd: &Alignment, heuristic: Symmetrization) -> Result<Alignment> {
    if (fwd.src_len, fwd.tgt_len) != (bwd.src_len, bwd.tgt_len) {
        return Err(Error::Input("alignments cover different sentence pairs".into()));
    }
    let (s, t) = (fwd.src_len, fwd.tgt_len);
    let inter: BTreeSet<_> = fwd.links.intersection(&bwd.links).copied().collect();
    let union: BTreeSet<_> = fwd.links.union(&bwd.links).copied().collect();
    let links = match heuristic {
        Symmetrization::Intersection => inter,
        Symmetrization::Union => union,
        Symmetrization::GrowDiagFinalAnd => {
            let mut a = inter;
            let mut src_aligned = vec![false; s];
            let mut tgt_aligned = vec![false; t];
            for &(i, j) in &a {
                src_aligned[i] = true;
                tgt_aligned[j] = true;
            }
            let mut grew = true;
            while grew {
                grew = false;
                for i in 0..s {
                    for j in 0..t {
                        if !a.contains(&(i, j)) {
                            continue;
                        }
                        for (di, dj) in NEIGHBORS {
                            let (Some(ni), Some(nj)) = (i.checked_add_signed(di), j.checked_add_signed(dj)) else {
                                continue;
                            };
                            if ni < s
                                && nj < t
                                && (!src_aligned[ni] || !tgt_aligned[nj])
                                && union.contains(&(ni, nj))
                                && a.insert((ni, nj))
                            {
                                src_aligned[ni] = true;
                                tgt_aligned[nj] = true;
                                grew = true;
                            }
                        }
                    }
                }
            }
            for dir in [&fwd.links, &bwd.links] {
                for &(i, j) in dir {
                    if !src_aligned[i] && !tgt_aligned[j] {
                        a.insert((i, j));
                        src_aligned[i] = true;
                        tgt_aligned[j] = true;
                    }
                }
            }
            a
        }
    };
    Ok(Alignment {
        src_len: s,
        tgt_len: t,
        links,
    })
}

/// Aligns in both directions with IBM Model 1 and symmetrizes.
pub fn align_bitext(bitext: &Bitext, iterations: usize, heuristic: Symmetrization) -> Result<Vec<Alignment>> {
    let fwd = ibm1_align(bitext, iterations)?;
    let bwd = ibm1_align(&bitext.swapped(), iterations)?;
    fwd.alignments
        .iter()
        .zip(&bwd.alignments)
        .map(|(f, b)| symmetrize(f, &b.transposed(), heuristic))
        .collect()
}

/// Inclusive source and target spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhrasePair {
    pub src: (usize, usize),
    pub tgt: (usize, usize),
}

impl PhrasePair {
    fn overlaps(&self, other: &PhrasePair) -> bool {
        let hit = |a: (usize, usize), b: (usize, usize)| a.0 <= b.1 && b.0 <= a.1;
        hit(self.src, other.src) || hit(self.tgt, other.tgt)
    }
}

/// All phrase pairs consistent with `al` whose spans are at most `max_len`
/// long. Spans start and end on aligned words, so unaligned words at the
/// edges never extend a pair.
pub fn extract_phrase_pairs(al: &Alignment, max_len: usize) -> Vec<PhrasePair> {
    let mut src_aligned = vec![false; al.src_len];
    for &(i, _) in &al.links {
        src_aligned[i] = true;
    }
    let mut out = Vec::new();
    for i1 in 0..al.src_len {
        for i2 in i1..al.src_len.min(i1 + max_len) {
            if !src_aligned[i1] || !src_aligned[i2] {
                continue;
            }
            let mut tgt = al.links.iter().filter(|&&(i, _)| (i1..=i2).contains(&i)).map(|&(_, j)| j);
            let Some(first) = tgt.next() else { continue };
            let (j1, j2) = tgt.fold((first, first), |(lo, hi), j| (lo.min(j), hi.max(j)));
            if j2 - j1 + 1 > max_len {
                continue;
            }
            if al.links.iter().all(|&(i, j)| !(j1..=j2).contains(&j) || (i1..=i2).contains(&i)) {
                out.push(PhrasePair { src: (i1, i2), tgt: (j1, j2) });
            }
        }
    }
    out
}

/// Number of replacements for a pair: `r` drawn with weight `2^-(k+1)` for
/// `k = 1..=rep` (renormalized), clamped to half of either sentence length.
pub fn sample_replacement_count<R: Rng + ?Sized>(rep: usize, src_len: usize, tgt_len: usize, rng: &mut R) -> Result<usize> {
    if rep == 0 || src_len == 0 || tgt_len == 0 {
        return Err(Error::Input("replacement count needs rep, S and T of at least one".into()));
    }
    let weights: Vec<f64> = (1..=rep).map(|k| 0.5f64.powi(k as i32 + 1)).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(clamp_replacements(dist.sample(rng) + 1, src_len, tgt_len))
}

/// `min(⌊S/2⌋, ⌊T/2⌋, r)`.
pub fn clamp_replacements(r: usize, src_len: usize, tgt_len: usize) -> usize {
    r.min(src_len / 2).min(tgt_len / 2)
}

/// A code-switched source with its two monolingual references.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CswSample {
    pub source: String,
    pub ref1: String,
    pub ref2: String,
    /// 0 when the first language provides the frame, 1 otherwise.
    pub primary: usize,
    /// Replaced pairs, spans given as (first-language span, second-language span).
    pub replacements: Vec<PhrasePair>,
    /// No phrase pair could be extracted; the source is the primary sentence.
    pub unmodified: bool,
}

/// Replaces up to `rep` non-overlapping phrases of a randomly chosen primary
/// sentence by their counterparts. Phrase pairs longer than `max_phrase_len`
/// are not considered. Chosen pairs overlap on neither side, so every source
/// token is accounted for by one of the references.
pub fn make_csw_corpus(
    bitext: &Bitext,
    alignments: &[Alignment],
    rep: usize,
    max_phrase_len: usize,
    seed: u64,
) -> Result<Vec<CswSample>> {
    if alignments.len() != bitext.len() {
        return Err(Error::Input(format!("{} alignments for {} sentence pairs", alignments.len(), bitext.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(bitext.len());
    for ((l1, l2), al) in bitext.pairs.iter().zip(alignments) {
        let sides = [words(l1), words(l2)];
        if (al.src_len, al.tgt_len) != (sides[0].len(), sides[1].len()) {
            return Err(Error::Input("alignment does not match sentence lengths".into()));
        }
        let primary = rng.random_range(0..2);
        let mut pairs = extract_phrase_pairs(al, max_phrase_len);
        let n = sample_replacement_count(rep, sides[0].len(), sides[1].len(), &mut rng)?;
        pairs.shuffle(&mut rng);
        let mut chosen: Vec<PhrasePair> = Vec::new();
        for p in &pairs {
            if chosen.len() == n {
                break;
            }
            if chosen.iter().all(|c| !c.overlaps(p)) {
                chosen.push(*p);
            }
        }
        let span = |p: &PhrasePair, side: usize| if side == 0 { p.src } else { p.tgt };
        chosen.sort_by_key(|p| span(p, primary));
        let mut toks: Vec<&str> = Vec::new();
        let mut pos = 0;
        for p in &chosen {
            let (a, b) = span(p, primary);
            let (c, d) = span(p, 1 - primary);
            toks.extend_from_slice(&sides[primary][pos..a]);
            toks.extend_from_slice(&sides[1 - primary][c..=d]);
            pos = b + 1;
        }
        toks.extend_from_slice(&sides[primary][pos..]);
        out.push(CswSample {
            source: toks.join(" "),
            ref1: l1.clone(),
            ref2: l2.clone(),
            primary,
            replacements: chosen,
            unmodified: pairs.is_empty(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::copy_constraint_report;
    use proptest::prelude::*;
    use rand::Rng;

    fn bt(pairs: &[(&str, &str)]) -> Bitext {
        Bitext::new(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()).unwrap()
    }

    fn ok(s: &str) -> Result<String> {
        Ok(s.to_string())
    }

    #[test]
    fn bitext_validation() {
        assert!(Bitext::new(vec![("a".into(), " ".into())]).is_err());
        assert!(Bitext::from_lines(vec!["a".into()], vec![]).is_err());
    }

    #[test]
    fn intersection_matches_set_oracle() {
        let a = bt(&[("s1", "a1"), ("s2", "a2"), ("s3", "a3"), ("s4", "a4"), ("s5", "a5"), ("s2", "dup")]);
        let b = bt(&[("s2", "b2"), ("s9", "b9"), ("s4", "b4"), ("s5", "b5"), ("s8", "b8"), ("s4", "later")]);
        let got = intersect_trilingual(&a, &b);
        let shared: BTreeSet<&str> = a.pairs.iter().map(|p| p.0.as_str()).collect::<BTreeSet<_>>()
            .intersection(&b.pairs.iter().map(|p| p.0.as_str()).collect())
            .copied()
            .collect();
        assert_eq!(got.iter().map(|t| t.src.as_str()).collect::<BTreeSet<_>>(), shared);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], TextTriple::reference("s2", "a2", "b2"));
        assert_eq!(got[1].tgt2, "b4");
        assert!(intersect_trilingual(&a, &bt(&[("zz", "q")])).is_empty());
        assert_eq!(intersect_trilingual(&a, &a).len(), 5);
    }

    #[test]
    fn pseudo_trilingual_half_and_half() {
        let tri: Vec<TextTriple> = (0..11).map(|i| TextTriple::reference(&format!("s{i}"), "x", "y")).collect();
        let out = make_pseudo_trilingual(&tri, |s| ok(&format!("T1 {s}")), |s| ok(&format!("T2 {s}")), 3);
        assert_eq!(out.len(), 11);
        let first = out.iter().filter(|t| t.synthetic == Some(0)).count();
        assert_eq!(first, 6);
        for t in &out {
            match t.synthetic {
                Some(0) => assert_eq!((t.tgt1.as_str(), t.tgt2.as_str()), (format!("T1 {}", t.src).as_str(), "y")),
                Some(1) => assert_eq!(t.tgt1, "x"),
                _ => panic!(),
            }
        }
        assert_eq!(out, make_pseudo_trilingual(&tri, |s| ok(&format!("T1 {s}")), |s| ok(&format!("T2 {s}")), 3));
        // identity translators reproduce the input
        let id = make_pseudo_trilingual(&tri, |_| ok("x"), |_| ok("y"), 5);
        assert!(id.iter().zip(&tri).all(|(a, b)| (&a.src, &a.tgt1, &a.tgt2) == (&b.src, &b.tgt1, &b.tgt2)));
        // failures are skipped
        let skip = make_pseudo_trilingual(&tri, |_| Err(Error::Numeric("nan".into())), |_| ok("y"), 3);
        assert_eq!(skip.len(), 5);
    }

    #[test]
    fn bidi_modes() {
        let b = bt(&[("a b", "x y z"), ("c", "u v"), ("d e", "w"), ("f", "p q")]);
        let gold = make_bidi_corpus(&b, BidiMode::Gold, None, None, 1).unwrap();
        for (t, (_, r)) in gold.iter().zip(b.pairs()) {
            assert_eq!(&reverse_tokens(&t.tgt2), r);
        }
        let mut rev = |s: &str| ok(&format!("R {s}"));
        let mut fwd = |s: &str| ok(&format!("F {s}"));
        let p = make_bidi_corpus(&b, BidiMode::Pseudo, Some(&mut rev), Some(&mut fwd), 1).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.iter().filter(|t| t.synthetic == Some(1)).count(), 2);
        let d = make_bidi_corpus(&b, BidiMode::PseudoDup, Some(&mut rev), Some(&mut fwd), 1).unwrap();
        assert_eq!(d.len(), 8);
        for (s, _) in b.pairs() {
            assert_eq!(d.iter().filter(|t| &t.src == s).count(), 2);
        }
        assert!(make_bidi_corpus(&b, BidiMode::Pseudo, None, None, 1).is_err());
    }

    #[test]
    fn variant_triples() {
        let mut data: Vec<(String, String, &str)> = vec![
            ("a1".into(), "A1".into(), "A"),
            ("a2".into(), "A2".into(), "A"),
            ("b1".into(), "B1".into(), "B"),
            ("b2".into(), "B2".into(), "B"),
            ("b3".into(), "B3".into(), "B"),
        ];
        for i in 0..100 {
            data.push((format!("n{i}"), format!("N{i}"), "neutral"));
        }
        let tr = |s: &str, l: VariantLabel| ok(&format!("{l:?}:{s}"));
        let out = make_variant_triples(&data, tr, 4).unwrap();
        assert_eq!(out.len(), 10);
        assert_eq!(out[0].tgt2, "B:a1");
        assert_eq!(out[2].tgt1, "A:b1");
        assert!(out[5..].iter().all(|t| t.tgt1 == t.tgt2 && t.src.starts_with('n')));
        assert_eq!(out, make_variant_triples(&data, tr, 4).unwrap());
        data.push(("x".into(), "X".into(), "polite"));
        assert!(matches!(make_variant_triples(&data, tr, 4), Err(Error::Input(_))));
        let none: Vec<(String, String, &str)> = vec![("n".into(), "N".into(), "N")];
        assert!(make_variant_triples(&none, tr, 4).unwrap().is_empty());
    }

    /// Plain dense EM over the toy vocabulary, written independently.
    fn toy_em(iters: usize) -> [[f64; 2]; 3] {
        // rows: NULL, a, b; cols: x, y
        let corpus: [(&[usize], &[usize]); 3] = [(&[0, 1], &[0]), (&[0, 1, 2], &[0, 1]), (&[0, 2], &[1])];
        let mut t = [[0.5; 2]; 3];
        for _ in 0..iters {
            let mut c = [[0.0; 2]; 3];
            for (src, tgt) in corpus {
                for &f in tgt {
                    let z: f64 = src.iter().map(|&e| t[e][f]).sum();
                    for &e in src {
                        c[e][f] += t[e][f] / z;
                    }
                }
            }
            for e in 0..3 {
                let tot = c[e][0] + c[e][1];
                for f in 0..2 {
                    t[e][f] = c[e][f] / tot;
                }
            }
        }
        t
    }

    #[test]
    fn ibm1_toy_corpus() {
        let b = bt(&[("a", "x"), ("a b", "x y"), ("b", "y")]);
        let out = ibm1_align(&b, 5).unwrap();
        let oracle = toy_em(5);
        let m = &out.model;
        for (e, w) in [(None, 0), (Some("a"), 1), (Some("b"), 2)] {
            for (f, tw) in ["x", "y"].iter().enumerate() {
                assert!((m.prob(e, tw) - oracle[w][f]).abs() < 1e-12);
            }
        }
        assert!(m.prob(Some("a"), "x") > m.prob(Some("b"), "x"));
        assert_eq!(out.alignments[1].to_pharaoh(), "0-0 1-1");
        assert!(out.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        let single = ibm1_align(&bt(&[("a", "x")]), 1).unwrap();
        assert_eq!(single.alignments[0].to_pharaoh(), "0-0");
        assert!(ibm1_align(&b, 0).is_err());
    }

    fn al(s: usize, t: usize, links: &[(usize, usize)]) -> Alignment {
        Alignment::new(s, t, links.iter().copied()).unwrap()
    }

    #[test]
    fn symmetrization_cases() {
        let f = al(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        for h in [Symmetrization::Intersection, Symmetrization::Union, Symmetrization::GrowDiagFinalAnd] {
            assert_eq!(symmetrize(&f, &f, h).unwrap(), f);
        }
        let a = al(3, 3, &[(0, 0)]);
        let b = al(3, 3, &[(2, 1)]);
        assert!(symmetrize(&a, &b, Symmetrization::Intersection).unwrap().links.is_empty());
        assert_eq!(symmetrize(&a, &b, Symmetrization::Union).unwrap().links.len(), 2);
        assert!(symmetrize(&a, &al(2, 3, &[]), Symmetrization::Union).is_err());

        // Growing adds neighbours that cover an unaligned word.
        let fwd = al(3, 3, &[(0, 0), (1, 1), (2, 1)]);
        let bwd = al(3, 3, &[(0, 0), (1, 1), (1, 2)]);
        let g = symmetrize(&fwd, &bwd, Symmetrization::GrowDiagFinalAnd).unwrap();
        assert_eq!(g.to_pharaoh(), "0-0 1-1 1-2 2-1");
        // A union point between two aligned words is not added.
        let fwd = al(3, 3, &[(0, 0), (1, 1), (0, 1)]);
        let bwd = al(3, 3, &[(0, 0), (1, 1)]);
        let g = symmetrize(&fwd, &bwd, Symmetrization::GrowDiagFinalAnd).unwrap();
        assert_eq!(g.to_pharaoh(), "0-0 1-1");
        // Final-and picks up isolated directional points.
        let fwd = al(3, 3, &[(0, 0), (2, 2)]);
        let bwd = al(3, 3, &[(0, 0)]);
        let g = symmetrize(&fwd, &bwd, Symmetrization::GrowDiagFinalAnd).unwrap();
        assert_eq!(g.to_pharaoh(), "0-0 2-2");
    }

    /// Checks every span pair against the definition.
    fn brute_force_pairs(a: &Alignment, max_len: usize) -> BTreeSet<PhrasePair> {
        let mut out = BTreeSet::new();
        let aligned_src = |i: usize| a.links.iter().any(|l| l.0 == i);
        let aligned_tgt = |j: usize| a.links.iter().any(|l| l.1 == j);
        for i1 in 0..a.src_len {
            for i2 in i1..a.src_len {
                for j1 in 0..a.tgt_len {
                    for j2 in j1..a.tgt_len {
                        if i2 - i1 >= max_len || j2 - j1 >= max_len {
                            continue;
                        }
                        let ins = |i: usize| i1 <= i && i <= i2;
                        let int = |j: usize| j1 <= j && j <= j2;
                        let consistent = a.links.iter().all(|&(i, j)| ins(i) == int(j));
                        let any = a.links.iter().any(|&(i, j)| ins(i) && int(j));
                        let tight = aligned_src(i1) && aligned_src(i2) && aligned_tgt(j1) && aligned_tgt(j2);
                        if consistent && any && tight {
                            out.insert(PhrasePair { src: (i1, i2), tgt: (j1, j2) });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn phrase_pairs_examples() {
        let diag = al(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        let got = extract_phrase_pairs(&diag, 3);
        assert_eq!(got.len(), 6);
        assert!(got.iter().all(|p| p.src == p.tgt));
        // a-y, b-x: each single word and the full span
        let cross = al(2, 2, &[(0, 1), (1, 0)]);
        let got: BTreeSet<_> = extract_phrase_pairs(&cross, 2).into_iter().collect();
        assert_eq!(got, brute_force_pairs(&cross, 2));
        assert_eq!(got.len(), 3);
        assert!(got.contains(&PhrasePair { src: (0, 1), tgt: (0, 1) }));
        assert!(extract_phrase_pairs(&al(2, 2, &[]), 2).is_empty());
    }

    #[test]
    fn replacement_count_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_replacement_count(1, 10, 10, &mut rng).unwrap(), 1);
        }
        let mut freq = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            freq[sample_replacement_count(3, 100, 100, &mut rng).unwrap() - 1] += 1;
        }
        for (f, w) in freq.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((*f as f64 / n as f64 - w).abs() < 0.01);
        }
        for _ in 0..50 {
            assert!(sample_replacement_count(5, 4, 6, &mut rng).unwrap() <= 2);
        }
        assert_eq!(sample_replacement_count(1, 1, 5, &mut rng).unwrap(), 0);
        assert!(sample_replacement_count(0, 3, 3, &mut rng).is_err());
    }

    #[test]
    fn csw_table_shape() {
        let b = bt(&[("in other words , they are coming out", "autrement dit , ils sortent du placard")]);
        // Links: in other words ~ autrement dit; , ~ ,; they ~ ils; are coming out ~ sortent du placard
        let links = [(0, 0), (1, 1), (2, 1), (3, 2), (4, 3), (5, 4), (6, 4), (7, 5), (7, 6)];
        let a = vec![al(8, 7, &links)];
        let mut seen_mixed = false;
        for seed in 0..20 {
            let s = &make_csw_corpus(&b, &a, 1, 3, seed).unwrap()[0];
            assert_eq!((s.ref1.as_str(), s.ref2.as_str()), (b.pairs()[0].0.as_str(), b.pairs()[0].1.as_str()));
            assert_eq!(s.replacements.len(), 1);
            let r = copy_constraint_report(&words(&s.source), &words(&s.ref1), &words(&s.ref2)).unwrap();
            assert_eq!(r.lost, 0.0);
            seen_mixed |= s.source.starts_with("autrement dit") && s.source.contains("they");
        }
        assert!(seen_mixed);
        // length-one sentences clamp to zero replacements
        let one = make_csw_corpus(&bt(&[("a", "x")]), &[al(1, 1, &[(0, 0)])], 3, 3, 0).unwrap();
        assert!(one[0].replacements.is_empty());
        assert!(one[0].source == "a" || one[0].source == "x");
        let bare = make_csw_corpus(&bt(&[("a b", "x y")]), &[al(2, 2, &[])], 3, 3, 0).unwrap();
        assert!(bare[0].unmodified);
    }

    #[test]
    fn pharaoh_roundtrip_and_errors() {
        let a = Alignment::parse_pharaoh("0-1 2-0", 3, 2).unwrap();
        assert_eq!(a.to_pharaoh(), "0-1 2-0");
        assert!(Alignment::parse_pharaoh("0-2", 3, 2).is_err());
        assert!(Alignment::parse_pharaoh("0:1", 3, 2).is_err());
    }

    fn arb_alignment() -> impl Strategy<Value = Alignment> {
        (1usize..6, 1usize..6).prop_flat_map(|(s, t)| {
            prop::collection::btree_set((0..s, 0..t), 0..(s * t).min(8))
                .prop_map(move |links| Alignment::new(s, t, links).unwrap())
        })
    }

    proptest! {
        #[test]
        fn extraction_equals_definition(a in arb_alignment(), max_len in 1usize..6) {
            let got: BTreeSet<_> = extract_phrase_pairs(&a, max_len).into_iter().collect();
            prop_assert_eq!(got, brute_force_pairs(&a, max_len));
        }

        #[test]
        fn grow_lies_between_intersection_and_union(f in arb_alignment(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let links: Vec<_> = (0..f.src_len).flat_map(|i| (0..f.tgt_len).map(move |j| (i, j)))
                .filter(|_| Rng::random_bool(&mut rng, 0.3)).collect();
            let b = Alignment::new(f.src_len, f.tgt_len, links).unwrap();
            let g = symmetrize(&f, &b, Symmetrization::GrowDiagFinalAnd).unwrap();
            let i = symmetrize(&f, &b, Symmetrization::Intersection).unwrap();
            let u = symmetrize(&f, &b, Symmetrization::Union).unwrap();
            prop_assert!(i.links.is_subset(&g.links));
            prop_assert!(g.links.is_subset(&u.links));
        }

        #[test]
        fn csw_samples_copy_everything(a in arb_alignment(), rep in 1usize..4, seed in any::<u64>()) {
            let s: Vec<String> = (0..a.src_len).map(|i| format!("s{}", i % 3)).collect();
            let t: Vec<String> = (0..a.tgt_len).map(|j| format!("t{}", j % 2)).collect();
            let b = Bitext::new(vec![(s.join(" "), t.join(" "))]).unwrap();
            let out = make_csw_corpus(&b, std::slice::from_ref(&a), rep, 4, seed).unwrap();
            let x = &out[0];
            for (k, p) in x.replacements.iter().enumerate() {
                for q in &x.replacements[k + 1..] {
                    prop_assert!(!p.overlaps(q));
                }
            }
            let r = copy_constraint_report(&words(&x.source), &words(&x.ref1), &words(&x.ref2)).unwrap();
            prop_assert_eq!(r.lost, 0.0);
        }
    }
}
