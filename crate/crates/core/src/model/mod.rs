//! Pre-norm transformer encoder feeding one or two decoders.
//!
//! In dual mode every decoder block carries a cross-decoder sublayer whose
//! queries come from its own decoder and whose keys and values are the other
//! decoder's states at the same depth. Both cross sublayers read the states
//! as they were before either was updated, so the two decoders advance in
//! lockstep. Output position `t` sees the partner only at positions `< t`.
//!
//! Attention projections carry no bias, so a zero cross value projection
//! removes the cross branch exactly and a dual model then computes the same
//! function as its independent counterpart.

mod checkpoint;
mod config;

use std::collections::HashMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{Coupling, CrossPosition, ModelConfig, TieMode};

use crate::error::{Error, Result};
use crate::numcore::{log_softmax_rows, AttnLayout, Graph, ParamId, ParamStore, Segment, SegmentMask, Tensor, Var};
use crate::subword::{BOS, PAD};

#[derive(Clone, Debug)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct EncBlock {
    ln_self: Norm,
    self_attn: Attn,
    ln_ff: Norm,
    ff: Ffn,
}

#[derive(Clone, Debug)]
struct Cross {
    ln_q: Norm,
    ln_kv: Norm,
    attn: Attn,
}

#[derive(Clone, Debug)]
struct DecBlock {
    ln_self: Norm,
    self_attn: Attn,
    ln_enc: Norm,
    enc_attn: Attn,
    cross: Option<Cross>,
    ln_ff: Norm,
    ff: Ffn,
}

#[derive(Clone, Debug)]
struct Decoder {
    emb: ParamId,
    blocks: Vec<DecBlock>,
    ln_out: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: ParamId,
    enc: Vec<EncBlock>,
    enc_ln: Norm,
    dec: Vec<Decoder>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Builder<F> {
    store: ParamStore,
    make: F,
}

impl<F: FnMut(&str, &[usize], Init) -> Result<Tensor>> Builder<F> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = (self.make)(&name, shape, init)?;
        Ok(self.store.add(name, t))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            g: self.add(format!("{prefix}.g"), &[d], Init::Ones)?,
            b: self.add(format!("{prefix}.b"), &[d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<Attn> {
        let std = Init::Normal((1.0 / d as f64).sqrt());
        Ok(Attn {
            wq: self.add(format!("{prefix}.wq"), &[d, d], std)?,
            wk: self.add(format!("{prefix}.wk"), &[d, d], std)?,
            wv: self.add(format!("{prefix}.wv"), &[d, d], std)?,
            wo: self.add(format!("{prefix}.wo"), &[d, d], std)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Result<Ffn> {
        Ok(Ffn {
            w1: self.add(format!("{prefix}.w1"), &[d, ff], Init::Normal((1.0 / d as f64).sqrt()))?,
            b1: self.add(format!("{prefix}.b1"), &[ff], Init::Zeros)?,
            w2: self.add(format!("{prefix}.w2"), &[ff, d], Init::Normal((1.0 / ff as f64).sqrt()))?,
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros)?,
        })
    }
}

fn build_layout<F: FnMut(&str, &[usize], Init) -> Result<Tensor>>(c: &ModelConfig, b: &mut Builder<F>) -> Result<Layout> {
    let d = c.d_model;
    let emb_init = Init::Normal((d as f64).powf(-0.5));
    let src_emb = b.add("enc.emb".into(), &[c.src_vocab, d], emb_init)?;
    let mut enc = Vec::with_capacity(c.enc_layers);
    for l in 0..c.enc_layers {
        let p = format!("enc.{l}");
        enc.push(EncBlock {
            ln_self: b.norm(&format!("{p}.ln_self"), d)?,
            self_attn: b.attn(&format!("{p}.self"), d)?,
            ln_ff: b.norm(&format!("{p}.ln_ff"), d)?,
            ff: b.ffn(&format!("{p}.ff"), d, c.d_ff)?,
        });
    }
    let enc_ln = b.norm("enc.ln", d)?;
    let shared = match c.tie_mode {
        TieMode::AllFour => Some(b.add("dec.emb".into(), &[c.tgt_vocab, d], emb_init)?),
        TieMode::PerDecoder => None,
    };
    let mut dec = Vec::new();
    for s in 0..c.num_decoders() {
        let p = format!("dec{}", s + 1);
        let emb = match shared {
            Some(id) => id,
            None => b.add(format!("{p}.emb"), &[c.tgt_vocab, d], emb_init)?,
        };
        let mut blocks = Vec::with_capacity(c.dec_layers);
        for l in 0..c.dec_layers {
            let q = format!("{p}.{l}");
            let ln_self = b.norm(&format!("{q}.ln_self"), d)?;
            let self_attn = b.attn(&format!("{q}.self"), d)?;
            let ln_enc = b.norm(&format!("{q}.ln_enc"), d)?;
            let enc_attn = b.attn(&format!("{q}.enc"), d)?;
            let cross = if c.coupling == Coupling::Dual {
                Some(Cross {
                    ln_q: b.norm(&format!("{q}.cross.ln_q"), d)?,
                    ln_kv: b.norm(&format!("{q}.cross.ln_kv"), d)?,
                    attn: b.attn(&format!("{q}.cross"), d)?,
                })
            } else {
                None
            };
            blocks.push(DecBlock {
                ln_self,
                self_attn,
                ln_enc,
                enc_attn,
                cross,
                ln_ff: b.norm(&format!("{q}.ln_ff"), d)?,
                ff: b.ffn(&format!("{q}.ff"), d, c.d_ff)?,
            });
        }
        let ln_out = b.norm(&format!("{p}.ln_out"), d)?;
        dec.push(Decoder { emb, blocks, ln_out });
    }
    Ok(Layout {
        src_emb,
        enc,
        enc_ln,
        dec,
    })
}

/// Which matrix of a tied embedding to look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingView {
    Input,
    Output,
}

/// Encoder states for a batch of sources, stacked row-wise.
pub struct Encoded<'g> {
    pub states: Var<'g>,
    /// `(first row, length)` per source.
    pub spans: Vec<(usize, usize)>,
    key_valid: Vec<bool>,
}

/// Encoder output kept outside any tape, so that repeated decoder passes
/// (one per search step) need not re-run the encoder.
#[derive(Clone, Debug)]
pub struct EncoderCache {
    states: Tensor,
    spans: Vec<(usize, usize)>,
    key_valid: Vec<bool>,
}

impl EncoderCache {
    pub fn states(&self) -> &Tensor {
        &self.states
    }

    /// Places the cached states on `g` as constants.
    pub fn attach<'g>(&self, g: &'g Graph) -> Encoded<'g> {
        Encoded {
            states: g.constant(self.states.clone()),
            spans: self.spans.clone(),
            key_valid: self.key_valid.clone(),
        }
    }
}

/// One decoding problem: a source (index into an [`Encoded`] batch) and one
/// prefix per decoder. In two-decoder models both prefixes have equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct DecItem {
    pub src: usize,
    pub prefixes: Vec<Vec<u32>>,
}

/// Externally supplied partner states for the cross-decoder sublayer: one
/// `len × d_model` matrix per decoder layer plus key validity.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedPartner {
    pub layers: Vec<Tensor>,
    pub key_valid: Vec<bool>,
}

/// Source of the keys and values of the cross-decoder sublayer.
#[derive(Clone, Copy, Debug)]
pub enum Partner<'a> {
    /// Each item's decoders attend to each other.
    Sync,
    /// Decoder `s` attends to `fixed[s]` for every item.
    Fixed(&'a [FixedPartner]),
}

pub struct DecoderOutput<'g> {
    /// Per decoder: logits for every prefix position, rows aligned with `spans`.
    pub logits: Vec<Var<'g>>,
    pub spans: Vec<(usize, usize)>,
    /// Per decoder and layer, the states offered to the other decoder's cross
    /// sublayer (empty unless the model is dual).
    pub cross_inputs: Vec<Vec<Var<'g>>>,
}

#[derive(Clone, Debug)]
pub struct DualModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

fn sinusoid(pos: usize, d: usize, out: &mut [f64]) {
    for i in 0..d {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 / rate;
        out[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
    }
}

impl DualModel {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |_: &str, shape: &[usize], init: Init| -> Result<Tensor> {
            Ok(match init {
                Init::Ones => Tensor::full(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
                Init::Normal(std) => {
                    let n = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
                    let data = (0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect();
                    Tensor::new(shape.to_vec(), data)?
                }
            })
        };
        Self::assemble(config, make)
    }

    fn assemble<F: FnMut(&str, &[usize], Init) -> Result<Tensor>>(config: ModelConfig, make: F) -> Result<Self> {
        let mut b = Builder {
            store: ParamStore::new(),
            make,
        };
        let layout = build_layout(&config, &mut b)?;
        Ok(DualModel {
            config,
            params: b.store,
            layout,
        })
    }

    /// Builds a model whose parameters are taken by name from `values`.
    /// Every expected parameter must be present with the expected shape and
    /// nothing else may be left over.
    pub fn from_named(config: ModelConfig, mut values: HashMap<String, Tensor>) -> Result<Self> {
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let make = |name: &str, shape: &[usize], _: Init| -> Result<Tensor> {
            let t = values
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t)
        };
        let m = Self::assemble(config, make)?;
        if let Some(extra) = values.keys().min() {
            return Err(Error::Checkpoint(format!(
                "unexpected parameter {extra} for a {:?} model",
                m.config.coupling
            )));
        }
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_decoders(&self) -> usize {
        self.layout.dec.len()
    }

    /// Parameter behind decoder `side`'s input embedding or output projection.
    pub fn embedding_param(&self, side: usize, _view: EmbeddingView) -> ParamId {
        // Input and output views are tied within a decoder.
        self.layout.dec[side].emb
    }

    /// Ids of every cross-decoder parameter (empty unless dual).
    pub fn cross_params(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, name, _)| name.contains(".cross."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// Sets every cross-decoder value projection to zero, which removes the
    /// cross branch from the computation.
    pub fn zero_cross_values(&mut self) {
        let ids: Vec<ParamId> = self
            .layout
            .dec
            .iter()
            .flat_map(|d| d.blocks.iter().filter_map(|b| b.cross.as_ref().map(|c| c.attn.wv)))
            .collect();
        for id in ids {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Same parameters under a different configuration, matched by name.
    /// Parameters the new configuration lacks are dropped; new ones are
    /// initialized from `seed`.
    pub fn reconfigured(&self, config: ModelConfig, seed: u64) -> Result<Self> {
        let mut out = Self::new(config, seed)?;
        for id in out.params.ids().collect::<Vec<_>>() {
            let name = out.params.name(id).to_string();
            if let Some(src) = self.params.find(&name) {
                out.params.set(id, self.params.get(src).clone())?;
            }
        }
        Ok(out)
    }

    /// Two-decoder model initialized from a single-decoder multilingual model:
    /// the encoder is copied, both decoders start as copies of the pretrained
    /// decoder, and cross-decoder projections are drawn from `seed`.
    pub fn init_from_pretrained(pretrained: &DualModel, config: ModelConfig, seed: u64) -> Result<Self> {
        if pretrained.config.coupling != Coupling::Single {
            return Err(Error::Checkpoint("pretrained model must have a single decoder".into()));
        }
        if config.num_decoders() != 2 {
            return Err(Error::Config("target model must have two decoders".into()));
        }
        let p = &pretrained.config;
        let dims = |c: &ModelConfig| (c.d_model, c.d_ff, c.heads, c.enc_layers, c.dec_layers, c.src_vocab, c.tgt_vocab);
        if dims(p) != dims(&config) {
            return Err(Error::Checkpoint(format!(
                "pretrained dimensions {:?} differ from requested {:?}",
                dims(p),
                dims(&config)
            )));
        }
        let mut out = Self::new(config, seed)?;
        for id in out.params.ids().collect::<Vec<_>>() {
            let name = out.params.name(id).to_string();
            if name.contains(".cross.") {
                continue;
            }
            let src_name = if name == "dec.emb" {
                "dec1.emb".to_string()
            } else if let Some(rest) = name.strip_prefix("dec2.") {
                format!("dec1.{rest}")
            } else {
                name.clone()
            };
            let src = pretrained
                .params
                .find(&src_name)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained model lacks {src_name}")))?;
            out.params
                .set(id, pretrained.params.get(src).clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(out)
    }

    fn p<'g>(&self, g: &'g Graph, id: ParamId) -> Var<'g> {
        g.param(&self.params, id)
    }

    fn norm<'g>(&self, g: &'g Graph, n: &Norm, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(self.p(g, n.g), self.p(g, n.b), self.config.ln_eps)
    }

    fn mha<'g>(&self, g: &'g Graph, a: &Attn, q_in: Var<'g>, kv_in: Var<'g>, layout: &Rc<AttnLayout>) -> Result<Var<'g>> {
        let q = q_in.matmul(self.p(g, a.wq))?;
        let k = kv_in.matmul(self.p(g, a.wk))?;
        let v = kv_in.matmul(self.p(g, a.wv))?;
        q.attention(k, v, self.config.heads, Rc::clone(layout))?
            .matmul(self.p(g, a.wo))
    }

    fn ffn<'g>(&self, g: &'g Graph, f: &Ffn, x: Var<'g>) -> Result<Var<'g>> {
        let h = x.matmul(self.p(g, f.w1))?.add_row(self.p(g, f.b1))?.relu();
        h.dropout(self.config.dropout)
            .matmul(self.p(g, f.w2))?
            .add_row(self.p(g, f.b2))
    }

    fn embed<'g>(&self, g: &'g Graph, table: ParamId, ids: &[usize], positions: &[usize]) -> Result<Var<'g>> {
        let d = self.config.d_model;
        let mut pe = vec![0.0; positions.len() * d];
        for (r, &p) in positions.iter().enumerate() {
            sinusoid(p, d, &mut pe[r * d..(r + 1) * d]);
        }
        let pos = g.constant(Tensor::new(vec![positions.len(), d], pe)?);
        let x = self.p(g, table).embedding(ids)?.scale((d as f64).sqrt()).add(pos)?;
        Ok(x.dropout(self.config.dropout))
    }

    /// Encodes a batch of sources. Padding tokens inside a source are hidden
    /// from attention.
    pub fn encode_batch<'g>(&self, g: &'g Graph, srcs: &[&[u32]]) -> Result<Encoded<'g>> {
        if srcs.is_empty() {
            return Err(Error::Input("empty source batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut spans = Vec::with_capacity(srcs.len());
        for s in srcs {
            if s.is_empty() {
                return Err(Error::Input("empty source sequence".into()));
            }
            spans.push((ids.len(), s.len()));
            for (p, &t) in s.iter().enumerate() {
                if t as usize >= self.config.src_vocab {
                    return Err(Error::Input(format!("source id {t} outside vocabulary")));
                }
                ids.push(t as usize);
                positions.push(p);
            }
        }
        let key_valid: Vec<bool> = ids.iter().map(|&t| t != PAD as usize).collect();
        let layout = Rc::new(AttnLayout {
            segments: spans
                .iter()
                .map(|&(start, len)| Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                    mask: SegmentMask::Full,
                })
                .collect(),
            key_valid: Some(key_valid.clone()),
            allow_empty_rows: false,
        });
        let drop = self.config.dropout;
        let mut x = self.embed(g, self.layout.src_emb, &ids, &positions)?;
        for b in &self.layout.enc {
            let h = self.norm(g, &b.ln_self, x)?;
            x = x.add(self.mha(g, &b.self_attn, h, h, &layout)?.dropout(drop))?;
            let h = self.norm(g, &b.ln_ff, x)?;
            x = x.add(self.ffn(g, &b.ff, h)?.dropout(drop))?;
        }
        Ok(Encoded {
            states: self.norm(g, &self.layout.enc_ln, x)?,
            spans,
            key_valid,
        })
    }

    /// Runs the decoders over a batch of prefixes against encoded sources.
    pub fn decode_batch<'g>(
        &self,
        g: &'g Graph,
        enc: &Encoded<'g>,
        items: &[DecItem],
        partner: Partner<'_>,
    ) -> Result<DecoderOutput<'g>> {
        let n_dec = self.num_decoders();
        let d = self.config.d_model;
        if items.is_empty() {
            return Err(Error::Input("empty decoder batch".into()));
        }
        let mut spans = Vec::with_capacity(items.len());
        let mut rows = 0;
        for it in items {
            if it.prefixes.len() != n_dec {
                return Err(Error::Contract(format!(
                    "{} prefixes for a model with {n_dec} decoders",
                    it.prefixes.len()
                )));
            }
            if it.src >= enc.spans.len() {
                return Err(Error::Input(format!("source index {} outside batch", it.src)));
            }
            let len = it.prefixes[0].len();
            for p in &it.prefixes {
                if p.first() != Some(&BOS) {
                    return Err(Error::Contract("decoder prefix must start with BOS".into()));
                }
                if p.len() != len {
                    return Err(Error::Contract("decoder prefixes of one item must have equal length".into()));
                }
                if let Some(&t) = p.iter().find(|&&t| t as usize >= self.config.tgt_vocab) {
                    return Err(Error::Input(format!("target id {t} outside vocabulary")));
                }
            }
            spans.push((rows, len));
            rows += len;
        }
        if let Partner::Fixed(fixed) = partner {
            if self.config.coupling == Coupling::Dual {
                if fixed.len() != n_dec {
                    return Err(Error::Contract("one fixed partner per decoder required".into()));
                }
                for f in fixed {
                    let lp = f.key_valid.len();
                    if f.layers.len() != self.config.dec_layers
                        || f.layers.iter().any(|t| t.shape() != [lp, d])
                    {
                        return Err(Error::Dimension("fixed partner states do not match the model".into()));
                    }
                }
            }
        }

        let positions: Vec<usize> = spans.iter().flat_map(|&(_, len)| 0..len).collect();
        let ids: Vec<Vec<usize>> = (0..n_dec)
            .map(|s| items.iter().flat_map(|it| it.prefixes[s].iter().map(|&t| t as usize)).collect())
            .collect();
        let valid: Vec<Vec<bool>> = ids.iter().map(|v| v.iter().map(|&t| t != PAD as usize).collect()).collect();

        let segments = |mask: SegmentMask| -> Vec<Segment> {
            spans
                .iter()
                .map(|&(start, len)| Segment {
                    q_start: start,
                    q_len: len,
                    k_start: start,
                    k_len: len,
                    mask: mask.clone(),
                })
                .collect()
        };
        let self_layouts: Vec<Rc<AttnLayout>> = (0..n_dec)
            .map(|s| {
                Rc::new(AttnLayout {
                    segments: segments(SegmentMask::Inclusive),
                    key_valid: Some(valid[s].clone()),
                    allow_empty_rows: false,
                })
            })
            .collect();
        let enc_layout = Rc::new(AttnLayout {
            segments: items
                .iter()
                .zip(&spans)
                .map(|(it, &(start, len))| Segment {
                    q_start: start,
                    q_len: len,
                    k_start: enc.spans[it.src].0,
                    k_len: enc.spans[it.src].1,
                    mask: SegmentMask::Full,
                })
                .collect(),
            key_valid: Some(enc.key_valid.clone()),
            allow_empty_rows: false,
        });
        let cross_layouts: Vec<Rc<AttnLayout>> = if self.config.coupling != Coupling::Dual {
            Vec::new()
        } else {
            (0..n_dec)
                .map(|s| match partner {
                    Partner::Sync => Rc::new(AttnLayout {
                        segments: segments(SegmentMask::Strict),
                        key_valid: Some(valid[1 - s].clone()),
                        allow_empty_rows: true,
                    }),
                    Partner::Fixed(fixed) => Rc::new(AttnLayout {
                        segments: spans
                            .iter()
                            .map(|&(start, len)| Segment {
                                q_start: start,
                                q_len: len,
                                k_start: 0,
                                k_len: fixed[s].key_valid.len(),
                                mask: SegmentMask::Strict,
                            })
                            .collect(),
                        key_valid: Some(fixed[s].key_valid.clone()),
                        allow_empty_rows: true,
                    }),
                })
                .collect()
        };

        let drop = self.config.dropout;
        let mut xs = Vec::with_capacity(n_dec);
        for s in 0..n_dec {
            xs.push(self.embed(g, self.layout.dec[s].emb, &ids[s], &positions)?);
        }
        let mut cross_inputs: Vec<Vec<Var<'g>>> = vec![Vec::new(); n_dec];
        for l in 0..self.config.dec_layers {
            for s in 0..n_dec {
                let b = &self.layout.dec[s].blocks[l];
                let h = self.norm(g, &b.ln_self, xs[s])?;
                xs[s] = xs[s].add(self.mha(g, &b.self_attn, h, h, &self_layouts[s])?.dropout(drop))?;
            }
            let cross_step = |xs: &mut Vec<Var<'g>>, cross_inputs: &mut Vec<Vec<Var<'g>>>| -> Result<()> {
                let snapshot = xs.clone();
                for s in 0..n_dec {
                    let Some(c) = &self.layout.dec[s].blocks[l].cross else {
                        continue;
                    };
                    cross_inputs[s].push(snapshot[s]);
                    let other = match partner {
                        Partner::Sync => snapshot[1 - s],
                        Partner::Fixed(fixed) => g.constant(fixed[s].layers[l].clone()),
                    };
                    let q = self.norm(g, &c.ln_q, snapshot[s])?;
                    let kv = self.norm(g, &c.ln_kv, other)?;
                    let out = self.mha(g, &c.attn, q, kv, &cross_layouts[s])?;
                    xs[s] = snapshot[s].add(out.dropout(drop))?;
                }
                Ok(())
            };
            if self.config.cross_position == CrossPosition::BeforeEncDec {
                cross_step(&mut xs, &mut cross_inputs)?;
            }
            for s in 0..n_dec {
                let b = &self.layout.dec[s].blocks[l];
                let h = self.norm(g, &b.ln_enc, xs[s])?;
                xs[s] = xs[s].add(self.mha(g, &b.enc_attn, h, enc.states, &enc_layout)?.dropout(drop))?;
            }
            if self.config.cross_position == CrossPosition::AfterEncDec {
                cross_step(&mut xs, &mut cross_inputs)?;
            }
            for s in 0..n_dec {
                let b = &self.layout.dec[s].blocks[l];
                let h = self.norm(g, &b.ln_ff, xs[s])?;
                xs[s] = xs[s].add(self.ffn(g, &b.ff, h)?.dropout(drop))?;
            }
        }
        let mut logits = Vec::with_capacity(n_dec);
        for (s, dec) in self.layout.dec.iter().enumerate() {
            let h = self.norm(g, &dec.ln_out, xs[s])?;
            logits.push(h.matmul_bt(self.p(g, dec.emb))?);
        }
        Ok(DecoderOutput {
            logits,
            spans,
            cross_inputs,
        })
    }

    pub fn encode_cache(&self, srcs: &[&[u32]]) -> Result<EncoderCache> {
        let g = Graph::new();
        let e = self.encode_batch(&g, srcs)?;
        let states = e.states.value().clone();
        Ok(EncoderCache {
            states,
            spans: e.spans,
            key_valid: e.key_valid,
        })
    }

    /// Encoder states of one source, one row per position.
    pub fn encode(&self, src: &[u32]) -> Result<Tensor> {
        let g = Graph::new();
        let e = self.encode_batch(&g, &[src])?;
        let t = e.states.value().clone();
        Ok(t)
    }

    /// Logits of both decoders at every prefix position. Prefixes must start
    /// with BOS; the shorter one is padded.
    pub fn dual_forward(&self, src: &[u32], prefix1: &[u32], prefix2: &[u32]) -> Result<(Tensor, Tensor)> {
        if self.num_decoders() != 2 {
            return Err(Error::Contract("dual_forward needs a two-decoder model".into()));
        }
        for p in [prefix1, prefix2] {
            if p.first() != Some(&BOS) {
                return Err(Error::Contract("decoder prefix must start with BOS".into()));
            }
        }
        let len = prefix1.len().max(prefix2.len());
        let pad = |p: &[u32]| {
            let mut v = p.to_vec();
            v.resize(len, PAD);
            v
        };
        let g = Graph::new();
        let enc = self.encode_batch(&g, &[src])?;
        let out = self.decode_batch(
            &g,
            &enc,
            &[DecItem {
                src: 0,
                prefixes: vec![pad(prefix1), pad(prefix2)],
            }],
            Partner::Sync,
        )?;
        let l1 = out.logits[0].value().clone();
        let l2 = out.logits[1].value().clone();
        Ok((l1, l2))
    }

    /// Logits of a single-decoder model at every prefix position.
    pub fn single_forward(&self, src: &[u32], prefix: &[u32]) -> Result<Tensor> {
        if self.num_decoders() != 1 {
            return Err(Error::Contract("single_forward needs a single-decoder model".into()));
        }
        let g = Graph::new();
        let enc = self.encode_batch(&g, &[src])?;
        let out = self.decode_batch(
            &g,
            &enc,
            &[DecItem {
                src: 0,
                prefixes: vec![prefix.to_vec()],
            }],
            Partner::Sync,
        )?;
        let t = out.logits[0].value().clone();
        Ok(t)
    }
}

/// Row-wise log-probabilities of a logits matrix.
pub fn log_probs(logits: &Tensor) -> Tensor {
    Tensor::new(logits.shape().to_vec(), log_softmax_rows(logits.data(), logits.cols()))
        .expect("log-softmax preserves shape")
}
