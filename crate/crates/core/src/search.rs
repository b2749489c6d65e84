//! Decoding: greedy and beam search over one or two decoders.
//!
//! The dual beam holds *pairs* of hypotheses. At every step all prefixes are
//! recomputed from scratch because the pairing changes as pairs are re-ranked,
//! which invalidates any cached decoder state. Each side proposes its top-k
//! continuations, the cartesian product forms the candidate pairs, and the
//! best k pairs survive.
//!
//! A side that has emitted EOS, or is still inside its wait-k delay, emits PAD
//! at zero log-probability. A forced side emits its given content and then
//! EOS. The score of a pair is the sum over sides of `logp / len^alpha`,
//! where `len` counts real emissions including EOS.
//!
//! Under [`CouplingScheme::AttendBest`] and [`CouplingScheme::AttendAverage`]
//! the pruning decision uses conditionals computed against a shared partner
//! (the best pair's other side, or the beam average), while reported scores
//! are always the exact pairwise log-probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_probs, Coupling, DecItem, DualModel, EncoderCache, FixedPartner, Partner};
use crate::numcore::{Graph, Tensor};
use crate::subword::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingScheme {
    /// Pair `r` of the beam attends within itself.
    #[default]
    RankAligned,
    /// Every hypothesis attends to the other side of the best pair.
    AttendBest,
    /// Every hypothesis attends to the other side averaged over the beam.
    AttendAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub scheme: CouplingScheme,
    /// Dummy steps before each side starts emitting. At most one is nonzero.
    pub wait_k: [usize; 2],
    /// Content each side must emit verbatim (EOS is appended).
    pub forced: [Option<Vec<u32>>; 2],
    /// Maximum real emissions per side, EOS included.
    pub max_len: usize,
    /// Length normalization exponent; 0 gives raw log-probability sums.
    pub length_penalty_alpha: f64,
    /// Tokens never proposed by free sides.
    pub banned: Vec<u32>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam_size: 4,
            scheme: CouplingScheme::RankAligned,
            wait_k: [0, 0],
            forced: [None, None],
            max_len: 100,
            length_penalty_alpha: 1.0,
            banned: vec![PAD, BOS],
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::Config("beam size and max_len must be positive".into()));
        }
        if self.wait_k[0] > 0 && self.wait_k[1] > 0 {
            return Err(Error::Config("at most one side may wait".into()));
        }
        if self.length_penalty_alpha < 0.0 {
            return Err(Error::Config("length penalty exponent must be non-negative".into()));
        }
        for f in self.forced.iter().flatten() {
            if f.len() > self.max_len {
                return Err(Error::Input(format!(
                    "forced sequence of {} tokens exceeds max_len {}",
                    f.len(),
                    self.max_len
                )));
            }
            if f.iter().any(|&t| matches!(t, PAD | BOS | EOS) || t as usize >= vocab) {
                return Err(Error::Input("forced sequence holds a special or out-of-vocabulary id".into()));
            }
        }
        if self.forced[0].is_some() && self.forced[1].is_some() {
            return Err(Error::Config("at most one side may be forced".into()));
        }
        Ok(())
    }
}

/// A (possibly single-sided) search result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualHypothesis {
    /// Raw emissions per side, including dummy PADs and the final EOS.
    pub tokens: Vec<Vec<u32>>,
    pub logp: Vec<f64>,
    pub done: Vec<bool>,
    /// Some side hit `max_len` without emitting EOS.
    pub truncated: bool,
    pub score: f64,
}

impl DualHypothesis {
    /// Content of `side`: emissions without PAD, up to EOS.
    pub fn output(&self, side: usize) -> Vec<u32> {
        self.tokens[side]
            .iter()
            .copied()
            .take_while(|&t| t != EOS)
            .filter(|&t| t != PAD)
            .collect()
    }
}

/// Length-normalized joint score.
pub fn joint_score(logp: &[f64], lens: &[usize], alpha: f64) -> f64 {
    logp.iter()
        .zip(lens)
        .map(|(&lp, &n)| lp / (n.max(1) as f64).powf(alpha))
        .sum()
}

fn real_len(emit: &[u32]) -> usize {
    emit.iter().filter(|&&t| t != PAD).count()
}

#[derive(Clone, Debug)]
struct Hyp {
    emit: Vec<Vec<u32>>,
    logp: Vec<f64>,
    prune: Vec<f64>,
    done: Vec<bool>,
    truncated: bool,
}

impl Hyp {
    fn start(sides: usize, blank: &[bool]) -> Self {
        Hyp {
            emit: vec![Vec::new(); sides],
            logp: vec![0.0; sides],
            prune: vec![0.0; sides],
            done: blank.to_vec(),
            truncated: false,
        }
    }

    fn lens(&self) -> Vec<usize> {
        self.emit.iter().map(|e| real_len(e)).collect()
    }

    fn prefix(&self, s: usize) -> Vec<u32> {
        let mut p = Vec::with_capacity(self.emit[s].len() + 1);
        p.push(BOS);
        p.extend_from_slice(&self.emit[s]);
        p
    }

    fn finish(self, alpha: f64) -> DualHypothesis {
        let score = joint_score(&self.logp, &self.lens(), alpha);
        DualHypothesis {
            tokens: self.emit,
            logp: self.logp,
            done: self.done,
            truncated: self.truncated,
            score,
        }
    }
}

/// What a side must do at the current step, before looking at the model.
enum Rule {
    Pad,
    Forced(u32),
    Free,
}

struct Searcher<'a> {
    model: &'a DualModel,
    enc: EncoderCache,
    cfg: &'a SearchConfig,
    sides: usize,
    vocab: usize,
}

/// Per live hypothesis and side: exact and pruning log-probabilities.
type StepScores = Vec<Vec<(Vec<f64>, Vec<f64>)>>;

impl<'a> Searcher<'a> {
    fn new(model: &'a DualModel, src: &[u32], cfg: &'a SearchConfig) -> Result<Self> {
        cfg.validate(model.config().tgt_vocab)?;
        Ok(Searcher {
            model,
            enc: model.encode_cache(&[src])?,
            cfg,
            sides: model.num_decoders(),
            vocab: model.config().tgt_vocab,
        })
    }

    fn rule(&self, h: &Hyp, s: usize, step: usize) -> Rule {
        if h.done[s] || step < self.cfg.wait_k.get(s).copied().unwrap_or(0) {
            return Rule::Pad;
        }
        match self.cfg.forced.get(s).and_then(|f| f.as_ref()) {
            Some(f) => Rule::Forced(f.get(real_len(&h.emit[s])).copied().unwrap_or(EOS)),
            None => Rule::Free,
        }
    }

    fn is_forced(&self, s: usize) -> bool {
        self.cfg.forced.get(s).is_some_and(|f| f.is_some())
    }

    /// Appends `tok` to side `s`, updating termination.
    fn push(&self, h: &mut Hyp, s: usize, tok: u32, lp: f64, prune: f64) {
        h.emit[s].push(tok);
        if tok == PAD {
            return;
        }
        h.logp[s] += lp;
        h.prune[s] += prune;
        if tok == EOS {
            h.done[s] = true;
        } else if !self.is_forced(s) && real_len(&h.emit[s]) >= self.cfg.max_len {
            h.done[s] = true;
            h.truncated = true;
        }
    }

    fn items(&self, hyps: &[Hyp]) -> Vec<DecItem> {
        hyps.iter()
            .map(|h| DecItem {
                src: 0,
                prefixes: (0..self.sides).map(|s| h.prefix(s)).collect(),
            })
            .collect()
    }

    /// Last-position log-probabilities for every live hypothesis.
    fn step_scores(&self, hyps: &[Hyp]) -> Result<StepScores> {
        let g = Graph::new();
        let enc = self.enc.attach(&g);
        let items = self.items(hyps);
        let out = self.model.decode_batch(&g, &enc, &items, Partner::Sync)?;
        let last_rows = |logits: &Tensor, spans: &[(usize, usize)]| -> Vec<Vec<f64>> {
            let lp = log_probs(logits);
            spans.iter().map(|&(st, len)| lp.row(st + len - 1).to_vec()).collect()
        };
        let exact: Vec<Vec<Vec<f64>>> = (0..self.sides)
            .map(|s| last_rows(&out.logits[s].value(), &out.spans))
            .collect();

        let relaxed = self.model.config().coupling == Coupling::Dual
            && self.cfg.scheme != CouplingScheme::RankAligned
            && hyps.len() > 1;
        let prune = if relaxed {
            let partners: Vec<FixedPartner> = (0..2)
                .map(|s| {
                    let other = 1 - s;
                    let layers: Vec<Tensor> = out.cross_inputs[other].iter().map(|v| v.value().clone()).collect();
                    self.shared_partner(hyps, &layers, &out.spans, other)
                })
                .collect();
            let g2 = Graph::new();
            let enc2 = self.enc.attach(&g2);
            let out2 = self.model.decode_batch(&g2, &enc2, &items, Partner::Fixed(&partners))?;
            (0..self.sides)
                .map(|s| last_rows(&out2.logits[s].value(), &out2.spans))
                .collect()
        } else {
            exact.clone()
        };
        Ok((0..hyps.len())
            .map(|i| {
                (0..self.sides)
                    .map(|s| (exact[s][i].clone(), prune[s][i].clone()))
                    .collect()
            })
            .collect())
    }

    /// Partner states of side `other` shared by the whole beam.
    fn shared_partner(&self, hyps: &[Hyp], layers: &[Tensor], spans: &[(usize, usize)], other: usize) -> FixedPartner {
        let len = spans[0].1;
        let d = self.model.config().d_model;
        match self.cfg.scheme {
            CouplingScheme::AttendAverage => {
                let n = hyps.len() as f64;
                let layers = layers
                    .iter()
                    .map(|t| {
                        let mut acc = vec![0.0; len * d];
                        for &(st, _) in spans {
                            for (a, v) in acc.iter_mut().zip(&t.data()[st * d..(st + len) * d]) {
                                *a += v / n;
                            }
                        }
                        Tensor::new(vec![len, d], acc).expect("partner shape")
                    })
                    .collect();
                let key_valid = (0..len)
                    .map(|p| hyps.iter().any(|h| h.prefix(other)[p] != PAD))
                    .collect();
                FixedPartner { layers, key_valid }
            }
            _ => {
                let (st, _) = spans[0];
                let layers = layers
                    .iter()
                    .map(|t| Tensor::new(vec![len, d], t.data()[st * d..(st + len) * d].to_vec()).expect("partner shape"))
                    .collect();
                let key_valid = hyps[0].prefix(other).iter().map(|&t| t != PAD).collect();
                FixedPartner { layers, key_valid }
            }
        }
    }

    /// Candidate tokens of one side: `(token, exact logp, pruning logp)`.
    fn proposals(&self, h: &Hyp, s: usize, step: usize, lp: &[f64], prune: &[f64], k: usize) -> Vec<(u32, f64, f64)> {
        match self.rule(h, s, step) {
            Rule::Pad => vec![(PAD, 0.0, 0.0)],
            Rule::Forced(t) => vec![(t, lp[t as usize], prune[t as usize])],
            Rule::Free => {
                let mut toks: Vec<u32> = (0..self.vocab as u32).filter(|t| !self.cfg.banned.contains(t)).collect();
                toks.sort_by(|&a, &b| prune[b as usize].total_cmp(&prune[a as usize]).then(a.cmp(&b)));
                toks.truncate(k);
                toks.into_iter().map(|t| (t, lp[t as usize], prune[t as usize])).collect()
            }
        }
    }

    fn beam(&self, blank: &[bool]) -> Result<DualHypothesis> {
        let k = self.cfg.beam_size;
        let alpha = self.cfg.length_penalty_alpha;
        let mut live = vec![Hyp::start(self.sides, blank)];
        let mut finished: Vec<Hyp> = Vec::new();
        if live[0].done.iter().all(|&d| d) {
            return Err(Error::Contract("nothing to decode".into()));
        }
        let mut step = 0;
        while !live.is_empty() {
            let scores = self.step_scores(&live)?;
            let mut cands: Vec<(f64, Hyp)> = Vec::new();
            for (h, sc) in live.iter().zip(&scores) {
                let props: Vec<_> = (0..self.sides)
                    .map(|s| self.proposals(h, s, step, &sc[s].0, &sc[s].1, k))
                    .collect();
                let mut combos: Vec<Hyp> = vec![h.clone()];
                for (s, p) in props.iter().enumerate() {
                    let mut next = Vec::with_capacity(combos.len() * p.len());
                    for c in &combos {
                        for &(t, lp, pr) in p {
                            let mut n = c.clone();
                            self.push(&mut n, s, t, lp, pr);
                            next.push(n);
                        }
                    }
                    combos = next;
                }
                for c in combos {
                    let key = joint_score(&c.prune, &c.lens(), alpha);
                    cands.push((key, c));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.emit.cmp(&b.1.emit)));
            cands.truncate(k);
            live.clear();
            for (_, c) in cands {
                if c.done.iter().all(|&d| d) {
                    finished.push(c);
                } else {
                    live.push(c);
                }
            }
            step += 1;
        }
        let best = finished
            .into_iter()
            .map(|h| h.finish(alpha))
            .reduce(|a, b| match b.score.total_cmp(&a.score) {
                std::cmp::Ordering::Greater => b,
                std::cmp::Ordering::Less => a,
                std::cmp::Ordering::Equal if b.tokens < a.tokens => b,
                std::cmp::Ordering::Equal => a,
            })
            .ok_or_else(|| Error::Internal("search produced no hypothesis".into()))?;
        Ok(best)
    }
}

/// Synchronous beam search over all decoders of `model`.
pub fn dual_beam_search(model: &DualModel, src: &[u32], config: &SearchConfig) -> Result<DualHypothesis> {
    let s = Searcher::new(model, src, config)?;
    s.beam(&vec![false; s.sides])
}

/// Greedy decoding: every side emits the argmax of its conditional given both
/// prefixes (lowest id on ties).
pub fn greedy_dual_decode(model: &DualModel, src: &[u32], config: &SearchConfig) -> Result<DualHypothesis> {
    let s = Searcher::new(model, src, config)?;
    let sides = s.sides;
    let mut h = Hyp::start(sides, &vec![false; sides]);
    let mut step = 0;
    while !h.done.iter().all(|&d| d) {
        let g = Graph::new();
        let enc = s.enc.attach(&g);
        let out = model.decode_batch(&g, &enc, &s.items(std::slice::from_ref(&h)), Partner::Sync)?;
        let mut picks = Vec::with_capacity(sides);
        for side in 0..sides {
            let lp = log_probs(&out.logits[side].value());
            let row = lp.row(lp.rows() - 1);
            let tok = match s.rule(&h, side, step) {
                Rule::Pad => PAD,
                Rule::Forced(t) => t,
                Rule::Free => {
                    let mut best: Option<u32> = None;
                    for t in 0..s.vocab as u32 {
                        if config.banned.contains(&t) {
                            continue;
                        }
                        if best.is_none_or(|b| row[t as usize] > row[b as usize]) {
                            best = Some(t);
                        }
                    }
                    best.ok_or_else(|| Error::Config("every token is banned".into()))?
                }
            };
            let lp = if tok == PAD { 0.0 } else { row[tok as usize] };
            picks.push((tok, lp));
        }
        for (side, (tok, lp)) in picks.into_iter().enumerate() {
            s.push(&mut h, side, tok, lp, lp);
        }
        step += 1;
    }
    Ok(h.finish(config.length_penalty_alpha))
}

/// Two-pass decoding. Pass 1 decodes `first_side` alone (the other side only
/// ever emits PAD) unless `reference` supplies that side; pass 2 decodes both
/// sides with `first_side` forced to the pass-1 output.
pub fn sequential_decode(
    model: &DualModel,
    src: &[u32],
    first_side: usize,
    reference: Option<&[u32]>,
    config: &SearchConfig,
) -> Result<DualHypothesis> {
    if model.num_decoders() != 2 || first_side > 1 {
        return Err(Error::Contract("sequential decoding needs two decoders and side 0 or 1".into()));
    }
    let first = match reference {
        Some(r) => r.to_vec(),
        None => {
            let mut pass1 = config.clone();
            pass1.forced = [None, None];
            let s = Searcher::new(model, src, &pass1)?;
            let mut blank = [false, false];
            blank[1 - first_side] = true;
            s.beam(&blank)?.output(first_side)
        }
    };
    let mut pass2 = config.clone();
    pass2.forced = [None, None];
    pass2.forced[first_side] = Some(first);
    dual_beam_search(model, src, &pass2)
}

/// Recomputes the exact score of raw emissions with one fresh forward pass.
pub fn rescore(model: &DualModel, src: &[u32], tokens: &[Vec<u32>], alpha: f64) -> Result<f64> {
    let sides = model.num_decoders();
    if tokens.len() != sides {
        return Err(Error::Contract("one token sequence per decoder required".into()));
    }
    let len = tokens.iter().map(Vec::len).max().unwrap_or(0);
    if len == 0 {
        return Err(Error::Input("nothing to score".into()));
    }
    let g = Graph::new();
    let enc = model.encode_batch(&g, &[src])?;
    let prefixes: Vec<Vec<u32>> = tokens
        .iter()
        .map(|t| {
            let mut p = vec![BOS];
            p.extend_from_slice(&t[..t.len().min(len - 1)]);
            p.resize(len, PAD);
            p
        })
        .collect();
    let out = model.decode_batch(&g, &enc, &[DecItem { src: 0, prefixes }], Partner::Sync)?;
    let mut logp = vec![0.0; sides];
    for s in 0..sides {
        let lp = log_probs(&out.logits[s].value());
        for (p, &t) in tokens[s].iter().enumerate() {
            if t != PAD {
                logp[s] += lp.row(p)[t as usize];
            }
        }
    }
    let lens: Vec<usize> = tokens.iter().map(|t| real_len(t)).collect();
    Ok(joint_score(&logp, &lens, alpha))
}

/// Picks the higher-scoring of a left-to-right and a right-to-left output,
/// reversing the latter when it wins. Ties go to left-to-right.
pub fn bidi_select<T: Clone>(y_l2r: &[T], score_l2r: f64, y_r2l: &[T], score_r2l: f64) -> Vec<T> {
    if score_r2l > score_l2r {
        y_r2l.iter().rev().cloned().collect()
    } else {
        y_l2r.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    const V: usize = 9;

    fn model(coupling: Coupling, seed: u64) -> DualModel {
        DualModel::new(ModelConfig::tiny(V, V, 8, 1).with_coupling(coupling), seed).unwrap()
    }

    fn cfg(k: usize) -> SearchConfig {
        SearchConfig {
            beam_size: k,
            max_len: 5,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..4 {
            for coupling in [Coupling::Dual, Coupling::Independent, Coupling::Single] {
                let m = model(coupling, seed);
                for scheme in [CouplingScheme::RankAligned, CouplingScheme::AttendBest, CouplingScheme::AttendAverage] {
                    let c = SearchConfig { scheme, ..cfg(1) };
                    let a = dual_beam_search(&m, &[4, 5, 6], &c).unwrap();
                    let b = greedy_dual_decode(&m, &[4, 5, 6], &c).unwrap();
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn independent_greedy_matches_isolated_decodes() {
        let m = model(Coupling::Independent, 5);
        let joint = greedy_dual_decode(&m, &[4, 7], &cfg(1)).unwrap();
        let mut alone = Vec::new();
        let c = cfg(1);
        for side in 0..2 {
            // decode one side while the other is blank
            let s = Searcher::new(&m, &[4, 7], &c).unwrap();
            let mut blank = [true, true];
            blank[side] = false;
            alone.push(s.beam(&blank).unwrap().output(side));
        }
        assert_eq!(joint.output(0), alone[0]);
        assert_eq!(joint.output(1), alone[1]);
    }

    #[test]
    fn scores_are_consistent_with_fresh_forward() {
        for (seed, k) in [(1, 1), (2, 3), (3, 6)] {
            let m = model(Coupling::Dual, seed);
            for wait_k in [[0, 0], [0, 2]] {
                let c = SearchConfig { wait_k, ..cfg(k) };
                let h = dual_beam_search(&m, &[4, 5], &c).unwrap();
                let r = rescore(&m, &[4, 5], &h.tokens, c.length_penalty_alpha).unwrap();
                assert!((r - h.score).abs() < 1e-9, "{r} vs {}", h.score);
            }
        }
    }

    #[test]
    fn forced_side_is_verbatim() {
        let m = model(Coupling::Dual, 7);
        let forced = vec![6, 6, 5];
        for k in [1, 3] {
            for scheme in [CouplingScheme::RankAligned, CouplingScheme::AttendAverage] {
                let c = SearchConfig {
                    forced: [None, Some(forced.clone())],
                    scheme,
                    ..cfg(k)
                };
                let h = dual_beam_search(&m, &[4], &c).unwrap();
                assert_eq!(h.output(1), forced);
                assert!(h.done[1]);
            }
        }
        let too_long = SearchConfig {
            forced: [Some(vec![5; 6]), None],
            ..cfg(2)
        };
        assert!(matches!(dual_beam_search(&m, &[4], &too_long), Err(Error::Input(_))));
    }

    #[test]
    fn wait_k_emits_dummies_first() {
        let m = model(Coupling::Dual, 8);
        let c = SearchConfig { wait_k: [0, 3], ..cfg(2) };
        let h = dual_beam_search(&m, &[4, 5], &c).unwrap();
        assert_eq!(&h.tokens[1][..3], &[PAD, PAD, PAD]);
        assert!(h.tokens[1].len() > 3);
    }

    #[test]
    fn max_len_truncates() {
        let m = model(Coupling::Dual, 9);
        let c = SearchConfig {
            max_len: 1,
            banned: vec![PAD, BOS, EOS],
            ..cfg(2)
        };
        let h = dual_beam_search(&m, &[4], &c).unwrap();
        assert!(h.truncated);
        assert_eq!(h.output(0).len(), 1);
    }

    #[test]
    fn sequential_pass_two_is_idempotent() {
        let m = model(Coupling::Dual, 10);
        let c = cfg(3);
        for first in 0..2 {
            let h = sequential_decode(&m, &[4, 6], first, None, &c).unwrap();
            let mut again = c.clone();
            again.forced[first] = Some(h.output(first));
            assert_eq!(dual_beam_search(&m, &[4, 6], &again).unwrap(), h);
            let r = sequential_decode(&m, &[4, 6], first, Some(&[7, 8]), &c).unwrap();
            assert_eq!(r.output(first), vec![7, 8]);
        }
        assert!(matches!(
            sequential_decode(&m, &[4], 0, Some(&[5; 9]), &c),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn bidi_selection() {
        assert_eq!(bidi_select(&[1, 2], -1.0, &[3, 4], -2.0), vec![1, 2]);
        assert_eq!(bidi_select(&[1, 2], -3.0, &[7, 6, 5], -2.0), vec![5, 6, 7]);
        assert_eq!(bidi_select(&[1, 2], -2.0, &[3, 4], -2.0), vec![1, 2]);
    }
}
