//! Joint maximum-likelihood training.
//!
//! A two-decoder model is trained on the sum of both decoders' negative
//! log-likelihoods. By default each side's loss is divided by that side's
//! target-token count before summing, which keeps the sides balanced when
//! their lengths differ; [`Normalization::Sum`] gives the raw sum instead.

use std::collections::HashSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Coupling, DecItem, DualModel, Partner};
use crate::numcore::{adam_step, AdamConfig, Gradients, Graph, OptimizerState, Var};
use crate::subword::{BOS, CORE_SPECIALS, EOS, PAD};

/// One source with two target sequences, each framed by BOS and EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriSample {
    pub src: Vec<u32>,
    pub tgt1: Vec<u32>,
    pub tgt2: Vec<u32>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

fn frame(content: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(content.len() + 2);
    v.push(BOS);
    v.extend_from_slice(content);
    v.push(EOS);
    v
}

fn check_content(what: &str, content: &[u32]) -> Result<()> {
    if content.is_empty() {
        return Err(Error::Input(format!("{what} is empty")));
    }
    if content.iter().any(|&t| matches!(t, PAD | BOS | EOS)) {
        return Err(Error::Input(format!("{what} contains a padding or boundary symbol")));
    }
    Ok(())
}

impl TriSample {
    /// Frames the two target contents with BOS/EOS.
    pub fn new(src: Vec<u32>, tgt1: &[u32], tgt2: &[u32]) -> Result<Self> {
        check_content("source", &src)?;
        check_content("target 1", tgt1)?;
        check_content("target 2", tgt2)?;
        Ok(TriSample {
            src,
            tgt1: frame(tgt1),
            tgt2: frame(tgt2),
            weight: 1.0,
        })
    }

    /// Target `side` (0 or 1) without its framing.
    pub fn content(&self, side: usize) -> &[u32] {
        let t = if side == 0 { &self.tgt1 } else { &self.tgt2 };
        &t[1..t.len() - 1]
    }

    /// The same sample with the two targets exchanged.
    pub fn swapped(&self) -> Self {
        TriSample {
            src: self.src.clone(),
            tgt1: self.tgt2.clone(),
            tgt2: self.tgt1.clone(),
            weight: self.weight,
        }
    }

    pub fn to_example(&self) -> Example {
        Example {
            src: self.src.clone(),
            targets: vec![self.tgt1.clone(), self.tgt2.clone()],
            weight: self.weight,
        }
    }
}

/// A training example for a model with any number of decoders: one framed
/// target per decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub src: Vec<u32>,
    pub targets: Vec<Vec<u32>>,
    pub weight: f64,
}

impl Example {
    /// Single-decoder example with the target framed.
    pub fn single(src: Vec<u32>, tgt: &[u32]) -> Result<Self> {
        check_content("source", &src)?;
        check_content("target", tgt)?;
        Ok(Example {
            src,
            targets: vec![frame(tgt)],
            weight: 1.0,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Each decoder's loss divided by its target-token count, then summed.
    #[default]
    PerToken,
    /// Plain sum of token negative log-likelihoods.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossOptions {
    pub label_smoothing: f64,
    pub normalization: Normalization,
    /// Per decoder, number of dummy PAD steps inserted after BOS.
    pub wait_k: [usize; 2],
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            label_smoothing: 0.1,
            normalization: Normalization::PerToken,
            wait_k: [0, 0],
        }
    }
}

impl LossOptions {
    /// No smoothing, per-token normalization: the plain joint NLL.
    pub fn exact() -> Self {
        LossOptions {
            label_smoothing: 0.0,
            ..Self::default()
        }
    }
}

/// Decoder inputs and next-token targets for one framed target, with `wait`
/// dummy steps after BOS. Dummy steps have no target.
fn teacher_forcing(target: &[u32], wait: usize) -> (Vec<u32>, Vec<Option<u32>>) {
    let mut full = Vec::with_capacity(target.len() + wait);
    full.push(target[0]);
    full.extend(std::iter::repeat_n(PAD, wait));
    full.extend_from_slice(&target[1..]);
    let input = full[..full.len() - 1].to_vec();
    let next = full[1..].iter().map(|&t| (t != PAD).then_some(t)).collect();
    (input, next)
}

/// Tape for the loss of a batch plus the per-decoder weighted token counts.
pub fn batch_loss<'g>(
    model: &DualModel,
    g: &'g Graph,
    batch: &[&Example],
    opts: &LossOptions,
) -> Result<(Var<'g>, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let n_dec = model.num_decoders();
    let srcs: Vec<&[u32]> = batch.iter().map(|e| e.src.as_slice()).collect();
    let enc = model.encode_batch(g, &srcs)?;
    let mut items = Vec::with_capacity(batch.len());
    let mut targets: Vec<Vec<Option<(usize, f64)>>> = vec![Vec::new(); n_dec];
    let mut counts = vec![0.0; n_dec];
    for (i, e) in batch.iter().enumerate() {
        if e.targets.len() != n_dec {
            return Err(Error::Contract(format!(
                "example has {} targets for {n_dec} decoders",
                e.targets.len()
            )));
        }
        let forced: Vec<_> = e
            .targets
            .iter()
            .enumerate()
            .map(|(s, t)| {
                if t.len() < 2 || t[0] != BOS || *t.last().unwrap() != EOS {
                    return Err(Error::Contract("targets must be framed by BOS and EOS".into()));
                }
                Ok(teacher_forcing(t, opts.wait_k.get(s).copied().unwrap_or(0)))
            })
            .collect::<Result<_>>()?;
        let len = forced.iter().map(|(inp, _)| inp.len()).max().unwrap_or(1);
        let mut prefixes = Vec::with_capacity(n_dec);
        for (s, (mut inp, next)) in forced.into_iter().enumerate() {
            inp.resize(len, PAD);
            for p in 0..len {
                let t = next.get(p).copied().flatten();
                if t.is_some() {
                    counts[s] += e.weight;
                }
                targets[s].push(t.map(|t| (t as usize, e.weight)));
            }
            prefixes.push(inp);
        }
        items.push(DecItem { src: i, prefixes });
    }
    let out = model.decode_batch(g, &enc, &items, Partner::Sync)?;
    let mut total: Option<Var<'g>> = None;
    for s in 0..n_dec {
        let mut l = out.logits[s].weighted_cross_entropy(&targets[s], opts.label_smoothing)?;
        if opts.normalization == Normalization::PerToken {
            l = l.scale(1.0 / counts[s]);
        }
        total = Some(match total {
            None => l,
            Some(t) => t.add(l)?,
        });
    }
    Ok((total.expect("at least one decoder"), counts))
}

/// Loss of a batch in evaluation mode (no dropout).
pub fn joint_loss(model: &DualModel, batch: &[TriSample], opts: &LossOptions) -> Result<f64> {
    let ex: Vec<Example> = batch.iter().map(TriSample::to_example).collect();
    example_loss(model, &ex, opts)
}

pub fn example_loss(model: &DualModel, batch: &[Example], opts: &LossOptions) -> Result<f64> {
    let g = Graph::new();
    let refs: Vec<&Example> = batch.iter().collect();
    let (loss, _) = batch_loss(model, &g, &refs, opts)?;
    let v = loss.value().item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is {v}")));
    }
    Ok(v)
}

/// Loss and parameter gradients of a batch in evaluation mode.
pub fn loss_and_grads(model: &DualModel, batch: &[Example], opts: &LossOptions) -> Result<(f64, Gradients)> {
    let g = Graph::new();
    let refs: Vec<&Example> = batch.iter().collect();
    let (loss, _) = batch_loss(model, &g, &refs, opts)?;
    let grads = g.backward(loss)?;
    let v = loss.value().item();
    Ok((v, grads))
}

/// Teacher-forced argmax accuracy per decoder over all target tokens.
pub fn token_accuracy(model: &DualModel, data: &[Example]) -> Result<Vec<f64>> {
    let n_dec = model.num_decoders();
    let mut hit = vec![0usize; n_dec];
    let mut tot = vec![0usize; n_dec];
    for chunk in data.chunks(64) {
        let g = Graph::new();
        let srcs: Vec<&[u32]> = chunk.iter().map(|e| e.src.as_slice()).collect();
        let enc = model.encode_batch(&g, &srcs)?;
        let mut items = Vec::new();
        let mut nexts = Vec::new();
        for (i, e) in chunk.iter().enumerate() {
            let forced: Vec<_> = e.targets.iter().map(|t| teacher_forcing(t, 0)).collect();
            let len = forced.iter().map(|(inp, _)| inp.len()).max().unwrap_or(1);
            let mut prefixes = Vec::new();
            let mut n = Vec::new();
            for (mut inp, next) in forced {
                inp.resize(len, PAD);
                prefixes.push(inp);
                n.push(next);
            }
            items.push(DecItem { src: i, prefixes });
            nexts.push(n);
        }
        let out = model.decode_batch(&g, &enc, &items, Partner::Sync)?;
        for s in 0..n_dec {
            let logits = out.logits[s].value();
            for (it, &(start, _)) in nexts.iter().zip(&out.spans) {
                for (p, t) in it[s].iter().enumerate() {
                    let Some(t) = t else { continue };
                    let row = logits.row(start + p);
                    let arg = argmax(row);
                    tot[s] += 1;
                    if arg == *t as usize {
                        hit[s] += 1;
                    }
                }
            }
        }
    }
    Ok(hit.iter().zip(&tot).map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 }).collect())
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Scratch,
    /// Start from a pretrained single-decoder checkpoint.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub max_steps: u64,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    /// Steps between dev evaluations.
    pub eval_interval: u64,
    pub seed: u64,
    pub mode: TrainMode,
    pub adam: AdamConfig,
    pub loss: LossOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 8192,
            max_steps: 100_000,
            patience: 4,
            eval_interval: 1000,
            seed: 1,
            mode: TrainMode::Scratch,
            adam: AdamConfig::default(),
            loss: LossOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.eval_interval == 0 || self.batch_tokens == 0 {
            return Err(Error::Config("eval_interval and batch_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.loss.label_smoothing) {
            return Err(Error::Config("label smoothing outside [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub lr: f64,
    /// Elapsed time; kept out of the serialized log so reruns are byte-identical.
    #[serde(skip)]
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    /// Parameters at the best dev evaluation (the last step without a dev set).
    pub model: DualModel,
    pub log: Vec<MetricRecord>,
    pub steps: u64,
    pub best_step: Option<u64>,
    pub best_dev_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Padded cost of a sample: its longest sequence.
fn cost(e: &Example, wait_k: [usize; 2]) -> usize {
    let tgt = e
        .targets
        .iter()
        .enumerate()
        .map(|(s, t)| t.len() - 1 + wait_k.get(s).copied().unwrap_or(0))
        .max()
        .unwrap_or(0);
    tgt.max(e.src.len())
}

/// Length-bucketed batches: samples sorted by padded cost (ties in seeded
/// random order) and packed while `count × longest ≤ batch_tokens`.
pub fn make_batches(costs: &[usize], batch_tokens: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if let Some(&c) = costs.iter().find(|&&c| c > batch_tokens) {
        return Err(Error::Config(format!(
            "a sample of {c} tokens exceeds the batch budget of {batch_tokens}"
        )));
    }
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| costs[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    for i in order {
        // sorted ascending, so the newcomer is the longest
        if !cur.is_empty() && (cur.len() + 1) * costs[i] > batch_tokens {
            batches.push(std::mem::take(&mut cur));
        }
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}

fn mean_loss(model: &DualModel, data: &[Example], opts: &LossOptions) -> Result<f64> {
    // token-weighted over fixed chunks so the value does not depend on batching
    let mut total = 0.0;
    let mut n = 0.0;
    for chunk in data.chunks(64) {
        let l = example_loss(model, chunk, opts)?;
        let w = chunk.len() as f64;
        total += l * w;
        n += w;
    }
    Ok(total / n)
}

/// Trains `model` with Adam, evaluating on `dev` every `eval_interval` steps
/// and stopping once `patience` evaluations pass without improvement. The
/// returned model carries the best-scoring parameters.
pub fn train(mut model: DualModel, data: &[Example], dev: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let key = |e: &Example| (e.src.clone(), e.targets.clone());
    let seen: HashSet<_> = data.iter().map(key).collect();
    if dev.iter().any(|e| seen.contains(&key(e))) {
        return Err(Error::Input("dev set overlaps the training set".into()));
    }
    let dev_opts = LossOptions {
        label_smoothing: 0.0,
        ..config.loss.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let costs: Vec<usize> = data.iter().map(|e| cost(e, config.loss.wait_k)).collect();
    let batches = make_batches(&costs, config.batch_tokens, &mut rng)?;
    let mut opt = OptimizerState::new(config.adam.clone(), model.params())?;
    let started = Instant::now();

    let mut log = Vec::new();
    let mut best: Option<(f64, u64, crate::numcore::ParamStore)> = None;
    let mut bad_evals = 0;
    let mut step = 0u64;
    let mut interval_loss = 0.0;
    let mut interval_n = 0u64;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..batches.len()).collect();
    'outer: while step < config.max_steps {
        order.shuffle(&mut rng);
        for &b in &order {
            if step >= config.max_steps {
                break 'outer;
            }
            let lr = opt.next_lr();
            let g = Graph::training(ChaCha8Rng::seed_from_u64(rng.random()));
            let refs: Vec<&Example> = batches[b].iter().map(|&i| &data[i]).collect();
            let (loss, _) = batch_loss(&model, &g, &refs, &config.loss)?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training loss is {lv} at step {}", step + 1)));
            }
            let grads = g.backward(loss)?;
            adam_step(model.params_mut(), &grads, &mut opt)?;
            step += 1;
            interval_loss += lv;
            interval_n += 1;
            if step % config.eval_interval == 0 || step == config.max_steps {
                let dev_loss = if dev.is_empty() {
                    None
                } else {
                    Some(mean_loss(&model, dev, &dev_opts)?)
                };
                let rec = MetricRecord {
                    step,
                    train_loss: interval_loss / interval_n as f64,
                    dev_loss,
                    lr,
                    wall_ms: started.elapsed().as_millis() as u64,
                };
                log::info!(
                    "step {step} train {:.4} dev {:?} lr {:.3e} ({} ms)",
                    rec.train_loss,
                    rec.dev_loss,
                    lr,
                    rec.wall_ms
                );
                log.push(rec);
                interval_loss = 0.0;
                interval_n = 0;
                if let Some(d) = dev_loss {
                    if best.as_ref().is_none_or(|(b, _, _)| d < *b) {
                        best = Some((d, step, model.params().clone()));
                        bad_evals = 0;
                    } else {
                        bad_evals += 1;
                        if bad_evals >= config.patience {
                            stopped_early = true;
                            break 'outer;
                        }
                    }
                }
            }
        }
    }
    let (best_dev_loss, best_step) = match best {
        Some((d, s, params)) => {
            *model.params_mut() = params;
            (Some(d), Some(s))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        log,
        steps: step,
        best_step,
        best_dev_loss,
        stopped_early,
    })
}

/// Metrics log as JSON lines.
pub fn metrics_jsonl(log: &[MetricRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("metric records serialize") + "\n")
        .collect()
}

/// Examples for tag-based multilingual pretraining: each source gets the tag
/// of its target language as first token.
pub fn multilingual_examples(
    bitexts: &[&[(Vec<u32>, Vec<u32>)]],
    tags: &[u32],
    src_vocab: usize,
) -> Result<Vec<Example>> {
    if bitexts.len() != tags.len() {
        return Err(Error::Config("one tag per bitext required".into()));
    }
    let distinct: HashSet<u32> = tags.iter().copied().collect();
    if distinct.len() != tags.len() {
        return Err(Error::Config("tags must be distinct".into()));
    }
    for &t in tags {
        if (t as usize) < CORE_SPECIALS || t as usize >= src_vocab {
            return Err(Error::Config(format!("tag id {t} collides with a core special or lies outside the vocabulary")));
        }
    }
    let mut out = Vec::new();
    for (bt, &tag) in bitexts.iter().zip(tags) {
        for (src, tgt) in bt.iter() {
            if src.iter().any(|t| distinct.contains(t)) {
                return Err(Error::Config(format!("tag id {tag} also occurs as an ordinary source token")));
            }
            let mut s = Vec::with_capacity(src.len() + 1);
            s.push(tag);
            s.extend_from_slice(src);
            out.push(Example::single(s, tgt)?);
        }
    }
    Ok(out)
}

/// Pretrains a single-decoder multilingual model on several bitexts that share
/// a source language.
pub fn pretrain_multilingual(
    bitexts: &[&[(Vec<u32>, Vec<u32>)]],
    tags: &[u32],
    model: DualModel,
    dev: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.config().coupling != Coupling::Single {
        return Err(Error::Config("multilingual pretraining needs a single-decoder model".into()));
    }
    let data = multilingual_examples(bitexts, tags, model.config().src_vocab)?;
    train(model, &data, dev, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::Tensor;

    const V: usize = 10;

    fn tiny(coupling: Coupling) -> DualModel {
        DualModel::new(ModelConfig::tiny(V, V, 8, 1).with_coupling(coupling), 3).unwrap()
    }

    fn samples() -> Vec<TriSample> {
        vec![
            TriSample::new(vec![4, 5, 6], &[4, 5, 6], &[6, 5, 4]).unwrap(),
            TriSample::new(vec![7, 8], &[7, 8], &[8, 7]).unwrap(),
            TriSample::new(vec![9, 4, 7, 5], &[9, 4, 7], &[5]).unwrap(),
        ]
    }

    #[test]
    fn teacher_forcing_with_delay() {
        let (inp, next) = teacher_forcing(&[BOS, 5, 6, EOS], 2);
        assert_eq!(inp, vec![BOS, PAD, PAD, 5, 6]);
        assert_eq!(next, vec![None, None, Some(5), Some(6), Some(EOS)]);
    }

    #[test]
    fn sample_framing() {
        let s = &samples()[0];
        assert_eq!(s.tgt1, vec![BOS, 4, 5, 6, EOS]);
        assert_eq!(s.content(1), &[6, 5, 4]);
        assert!(TriSample::new(vec![], &[4], &[4]).is_err());
        assert!(TriSample::new(vec![4], &[EOS], &[4]).is_err());
    }

    #[test]
    fn uniform_output_gives_log_v() {
        let mut m = tiny(Coupling::Dual);
        for name in ["dec1.ln_out.g", "dec2.ln_out.g"] {
            let id = m.params().find(name).unwrap();
            m.params_mut().set(id, Tensor::zeros(&[8])).unwrap();
        }
        let l = joint_loss(&m, &samples(), &LossOptions::exact()).unwrap();
        // per-token normalized on each side, then summed over two sides
        assert!((l - 2.0 * (V as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn independent_loss_is_additive() {
        let m = tiny(Coupling::Independent);
        let opts = LossOptions {
            normalization: Normalization::Sum,
            ..LossOptions::exact()
        };
        let joint = joint_loss(&m, &samples(), &opts).unwrap();
        // Each side alone: pair it with a dummy partner that adds nothing.
        let side = |s: usize| -> f64 {
            let mut total = 0.0;
            for x in samples() {
                let (l1, l2) = m.dual_forward(&x.src, &x.tgt1[..x.tgt1.len() - 1], &x.tgt2[..x.tgt2.len() - 1]).unwrap();
                let (logits, tgt) = if s == 0 { (l1, &x.tgt1) } else { (l2, &x.tgt2) };
                let lp = crate::model::log_probs(&logits);
                for p in 0..tgt.len() - 1 {
                    total -= lp.row(p)[tgt[p + 1] as usize];
                }
            }
            total
        };
        assert!((joint - (side(0) + side(1))).abs() < 1e-9);
    }

    #[test]
    fn loss_is_permutation_invariant_and_side_symmetric() {
        let m = tiny(Coupling::Dual);
        let opts = LossOptions::exact();
        let s = samples();
        let mut r = s.clone();
        r.reverse();
        let a = joint_loss(&m, &s, &opts).unwrap();
        assert!((a - joint_loss(&m, &r, &opts).unwrap()).abs() < 1e-12);

        // swap decoder identities by renaming dec1 <-> dec2
        let mut sw = m.clone();
        for (id, name, _) in m.params().iter() {
            let other = if let Some(r) = name.strip_prefix("dec1.") {
                format!("dec2.{r}")
            } else if let Some(r) = name.strip_prefix("dec2.") {
                format!("dec1.{r}")
            } else {
                continue;
            };
            let oid = m.params().find(&other).unwrap();
            sw.params_mut().set(id, m.params().get(oid).clone()).unwrap();
        }
        let swapped: Vec<TriSample> = s.iter().map(TriSample::swapped).collect();
        let b = joint_loss(&sw, &swapped, &opts).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let m = tiny(Coupling::Dual);
        let ex: Vec<Example> = samples()[..2].iter().map(TriSample::to_example).collect();
        let opts = LossOptions::exact();
        let (_, grads) = loss_and_grads(&m, &ex, &opts).unwrap();
        let h = 1e-5;
        for id in m.params().ids() {
            let g = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(m.params().get(id).shape()));
            // a few coordinates per parameter keep this unit test fast
            for k in [0, m.params().get(id).len() / 2] {
                let mut p = m.clone();
                p.params_mut().get_mut(id).data_mut()[k] += h;
                let up = example_loss(&p, &ex, &opts).unwrap();
                p.params_mut().get_mut(id).data_mut()[k] -= 2.0 * h;
                let down = example_loss(&p, &ex, &opts).unwrap();
                let fd = (up - down) / (2.0 * h);
                let an = g.data()[k];
                assert!(
                    (fd - an).abs() <= 1e-6 + 1e-4 * fd.abs().max(an.abs()),
                    "{}[{k}]: fd {fd} analytic {an}",
                    m.params().name(id)
                );
            }
        }
    }

    #[test]
    fn batches_respect_budget() {
        let costs = vec![3, 5, 2, 7, 7, 1, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = make_batches(&costs, 14, &mut rng).unwrap();
        let mut all: Vec<usize> = b.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        for batch in &b {
            let longest = batch.iter().map(|&i| costs[i]).max().unwrap();
            assert!(batch.len() * longest <= 14);
        }
        assert!(make_batches(&costs, 6, &mut rng).is_err());
    }

    fn copy_examples() -> (Vec<Example>, Vec<Example>) {
        let mut all = Vec::new();
        for a in 4..V as u32 {
            for b in 4..V as u32 {
                all.push(TriSample::new(vec![a, b], &[a, b], &[b, a]).unwrap().to_example());
            }
        }
        let dev = all.split_off(30);
        (all, dev)
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let (data, dev) = copy_examples();
        let config = TrainConfig {
            batch_tokens: 40,
            max_steps: 30,
            eval_interval: 10,
            adam: AdamConfig::fixed(3e-3),
            ..TrainConfig::default()
        };
        let a = train(tiny(Coupling::Dual), &data, &dev[..3], &config).unwrap();
        let b = train(tiny(Coupling::Dual), &data, &dev[..3], &config).unwrap();
        let strip = |l: &[MetricRecord]| l.iter().map(|r| (r.step, r.train_loss, r.dev_loss, r.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.model.params(), b.model.params());
        assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
    }

    #[test]
    fn flat_dev_loss_stops_after_patience() {
        let (data, dev) = copy_examples();
        let config = TrainConfig {
            batch_tokens: 40,
            max_steps: 1000,
            eval_interval: 2,
            patience: 4,
            adam: AdamConfig::fixed(0.0),
            ..TrainConfig::default()
        };
        let out = train(tiny(Coupling::Dual), &data, &dev[..3], &config).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), 5);
        assert_eq!(out.steps, 10);
        assert_eq!(out.best_step, Some(2));
    }

    #[test]
    fn overlapping_dev_is_rejected() {
        let (data, _) = copy_examples();
        let config = TrainConfig::default();
        assert!(matches!(train(tiny(Coupling::Dual), &data, &data[..1], &config), Err(Error::Input(_))));
        assert!(matches!(train(tiny(Coupling::Dual), &[], &[], &config), Err(Error::Input(_))));
    }

    #[test]
    fn tag_collisions_are_config_errors() {
        let bt: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![5, 6], vec![5, 6])];
        assert!(matches!(multilingual_examples(&[&bt, &bt], &[4, 4], V), Err(Error::Config(_))));
        assert!(matches!(multilingual_examples(&[&bt, &bt], &[EOS, 4], V), Err(Error::Config(_))));
        assert!(matches!(multilingual_examples(&[&bt, &bt], &[5, 4], V), Err(Error::Config(_))));
        let ex = multilingual_examples(&[&bt, &bt], &[4, 7], V).unwrap();
        assert_eq!(ex[0].src, vec![4, 5, 6]);
        assert_eq!(ex[1].src, vec![7, 5, 6]);
    }
}
