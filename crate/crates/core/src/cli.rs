//! The `dualdec` command line.
//!
//! Data goes to files or standard output, diagnostics to standard error.
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing input
//! files, invalid configuration) and 1 for failures while running.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::datakit::{self, Alignment, BidiMode, Bitext, Symmetrization, TextTriple, VariantLabel};
use crate::error::{Error, Result};
use crate::eval::{self, ConsistencyMode, CopyReport, Smoothing};
use crate::io;
use crate::model::{load_checkpoint, save_checkpoint, Coupling, CrossPosition, DualModel, ModelConfig, TieMode};
use crate::search::{self, joint_score, CouplingScheme, DualHypothesis, SearchConfig};
use crate::subword::SubwordModel;
use crate::training::{self, Example, TrainConfig, TrainMode, TriSample};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const SRC_BPE_KEY: &str = "bpe.src";
const TGT_BPE_KEY: &str = "bpe.tgt";

const TRIPLE_FORMAT: &str = "Triple files hold one sample per line: source, first target and second \
target separated by single TAB characters, UTF-8, tokens separated by spaces.";

#[derive(Parser, Debug)]
#[command(name = "dualdec", version, about = "Dual-decoder translation: data, training, decoding, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Learn a BPE subword model from text files.
    #[command(after_help = "Input: UTF-8 text, one sentence per line. Output: header line \
`#dualdec-bpe merges=N vocab=M specials=S`, then N lines `left right` (merge order), then M lines \
`token<TAB>id`. Ids 0-3 are <pad> <s> </s> <unk>; tags follow in the order given.")]
    BpeTrain(BpeTrainArgs),
    /// Join two bitexts with a shared source language into triples.
    #[command(after_help = TRIPLE_FORMAT)]
    MakeTri(MakeTriArgs),
    /// Replace half of each target side by model translations.
    #[command(after_help = TRIPLE_FORMAT)]
    MakePseudo(MakePseudoArgs),
    /// Build left-to-right / right-to-left triples (second target reversed).
    #[command(after_help = TRIPLE_FORMAT)]
    MakeBidi(MakeBidiArgs),
    /// Synthesize code-switched sources by swapping aligned phrases.
    #[command(after_help = "Inputs: line-aligned sentence files. Alignments (optional): one line per \
pair of space-separated `i-j` links, i indexing the first file's tokens. Output: \
`mixed<TAB>first<TAB>second` per line. The log holds one JSON object per line.")]
    MakeCsw(MakeCswArgs),
    /// Build variant triples from sentences labelled A, B or neutral.
    #[command(after_help = "Input: `source<TAB>target<TAB>label` per line, label one of A, B, N \
(also variant-a, variant-b, neutral). Output: triples with the A variant first.")]
    MakeVariants(MakeVariantsArgs),
    /// Pretrain a single-decoder multilingual model with target-language tags.
    #[command(after_help = "Config: TOML with sections [model], [train] and [data]; the data \
section lists [[data.corpora]] entries with `src`, `tgt` and `tag`, and optionally \
[[data.dev_corpora]]. Paths are relative to the config file.")]
    Pretrain(TrainArgs),
    /// Train a two-decoder model on triples.
    #[command(after_help = "Config: TOML with sections [model], [train] and [data] (`train`, \
`dev`, `src_bpe`, `tgt_bpe`, `init`). Metrics: one JSON object per evaluation.")]
    Train(TrainArgs),
    /// Decode source sentences.
    #[command(after_help = "Output: `score<TAB>first<TAB>second` per input line; in bidi mode \
`score<TAB>selected`. Scores are length-normalized joint log-probabilities.")]
    Translate(TranslateArgs),
    /// Score outputs.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args, Debug)]
pub struct BpeTrainArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub input: Vec<PathBuf>,
    #[arg(long)]
    pub merges: usize,
    /// Extra atomic tokens, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub tags: Vec<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct MakeTriArgs {
    #[arg(long)]
    pub src_a: PathBuf,
    #[arg(long)]
    pub tgt_a: PathBuf,
    #[arg(long)]
    pub src_b: PathBuf,
    #[arg(long)]
    pub tgt_b: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

/// A checkpoint used as a translator.
#[derive(Args, Debug, Clone)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 100)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
}

impl DecodeArgs {
    fn search(&self) -> SearchConfig {
        SearchConfig {
            beam_size: self.beam,
            max_len: self.max_len,
            length_penalty_alpha: self.alpha,
            ..SearchConfig::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct MakePseudoArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint translating into the first target language.
    #[arg(long)]
    pub model1: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub side1: usize,
    /// Tag prepended to sources for the first translator.
    #[arg(long)]
    pub tag1: Option<String>,
    #[arg(long)]
    pub model2: PathBuf,
    #[arg(long)]
    pub side2: Option<usize>,
    #[arg(long)]
    pub tag2: Option<String>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    /// JSON lines naming the synthetic side of each sample.
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeBidiArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long, value_parser = ["gold", "pseudo", "pseudo-dup"], default_value = "gold")]
    pub mode: String,
    /// Checkpoint producing right-to-left output.
    #[arg(long)]
    pub reverse_model: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub reverse_side: usize,
    #[arg(long)]
    pub forward_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub forward_side: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub meta: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeCswArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Precomputed alignments; the built-in aligner runs otherwise.
    #[arg(long)]
    pub alignments: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub iterations: usize,
    #[arg(long, value_parser = ["intersection", "union", "grow-diag-final-and"], default_value = "grow-diag-final-and")]
    pub symmetrize: String,
    #[arg(long, default_value_t = 3)]
    pub rep: usize,
    #[arg(long, default_value_t = 7)]
    pub max_phrase_len: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write the alignments used.
    #[arg(long)]
    pub alignments_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MakeVariantsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub side: usize,
    /// Source tag requesting the A variant.
    #[arg(long)]
    pub tag_a: String,
    #[arg(long)]
    pub tag_b: String,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub batch_tokens: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DecodeMode {
    /// Synchronous beam search over both sides.
    Dual,
    /// Synchronous greedy decoding.
    Greedy,
    /// First side alone, then the second given the first.
    Seq1,
    /// Second side alone, then the first given the second.
    Seq2,
    /// Pick the better of the left-to-right and the reversed right-to-left output.
    Bidi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    RankAligned,
    AttendBest,
    AttendAverage,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// TOML with a [search] section; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_enum, default_value = "dual")]
    pub mode: DecodeMode,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[arg(long)]
    pub wait1: Option<usize>,
    #[arg(long)]
    pub wait2: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Tag prepended to every source line.
    #[arg(long)]
    pub tag: Option<String>,
    /// Line-aligned text the first side must produce.
    #[arg(long)]
    pub forced1: Option<PathBuf>,
    #[arg(long)]
    pub forced2: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Corpus BLEU of hypotheses against references; prints JSON.
    Bleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        /// Add-k smoothing of higher-order precisions.
        #[arg(long)]
        smooth: Option<f64>,
    },
    /// Agreement of left-to-right output with reversed right-to-left output.
    Consistency {
        #[arg(long)]
        fwd: PathBuf,
        #[arg(long)]
        bwd: PathBuf,
        #[arg(long)]
        one_direction: bool,
    },
    /// Where source tokens reappear in two outputs, pooled over the corpus.
    Copy {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        hyp1: PathBuf,
        #[arg(long)]
        hyp2: PathBuf,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            e => CliError::Runtime(e),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn require(paths: &[&Path]) -> CliResult<()> {
    for p in paths {
        if !p.exists() {
            return Err(CliError::Usage(format!("input file {} not found", p.display())));
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::BpeTrain(a) => bpe_train(a),
        Command::MakeTri(a) => make_tri(a),
        Command::MakePseudo(a) => make_pseudo(a),
        Command::MakeBidi(a) => make_bidi(a),
        Command::MakeCsw(a) => make_csw(a),
        Command::MakeVariants(a) => make_variants(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate(a),
        Command::Eval(e) => evaluate(e),
    }
}

fn bpe_train(a: BpeTrainArgs) -> CliResult<()> {
    let paths: Vec<&Path> = a.input.iter().map(PathBuf::as_path).collect();
    require(&paths)?;
    let mut lines = Vec::new();
    for p in &a.input {
        lines.extend(io::read_lines(p)?);
    }
    let bpe = SubwordModel::train(&lines, a.merges, &a.tags)?;
    bpe.save(&a.output)?;
    log::info!("{} merges, vocabulary {}", bpe.merges().len(), bpe.vocab_size());
    Ok(())
}

fn make_tri(a: MakeTriArgs) -> CliResult<()> {
    require(&[&a.src_a, &a.tgt_a, &a.src_b, &a.tgt_b])?;
    let ta = Bitext::read(&a.src_a, &a.tgt_a)?;
    let tb = Bitext::read(&a.src_b, &a.tgt_b)?;
    let tri = datakit::intersect_trilingual(&ta, &tb);
    log::info!("{} shared sources", tri.len());
    datakit::write_triples(&a.output, &tri)?;
    Ok(())
}

/// A checkpoint with its subword models, decoding one side.
struct Translator {
    model: DualModel,
    src_bpe: SubwordModel,
    tgt_bpe: SubwordModel,
    side: usize,
    tag: Option<String>,
    search: SearchConfig,
}

impl Translator {
    fn load(path: &Path, side: usize, tag: Option<String>, search: SearchConfig) -> CliResult<Self> {
        require(&[path])?;
        let (model, src_bpe, tgt_bpe) = load_bundle(path)?;
        if side >= model.num_decoders() {
            return Err(CliError::Usage(format!(
                "{} has {} decoder(s), side {side} requested",
                path.display(),
                model.num_decoders()
            )));
        }
        search.validate(model.config().tgt_vocab)?;
        Ok(Translator {
            model,
            src_bpe,
            tgt_bpe,
            side,
            tag,
            search,
        })
    }

    fn translate(&self, text: &str) -> Result<String> {
        let src = encode_source(&self.src_bpe, text, self.tag.as_deref())?;
        let hyp = search::dual_beam_search(&self.model, &src, &self.search)?;
        self.tgt_bpe.decode(&hyp.output(self.side))
    }
}

/// Prepends the optional language tag and segments `text` into ids.
pub fn encode_source(bpe: &SubwordModel, text: &str, tag: Option<&str>) -> Result<Vec<u32>> {
    let text = match tag {
        Some(t) => datakit::with_tag(text, t),
        None => text.to_string(),
    };
    let ids = bpe.encode(&text);
    if ids.is_empty() {
        return Err(Error::Input("empty source sentence".into()));
    }
    Ok(ids)
}

/// Loads a checkpoint together with its source and target subword models.
pub fn load_bundle(path: &Path) -> Result<(DualModel, SubwordModel, SubwordModel)> {
    let ck = load_checkpoint(path)?;
    let get = |k: &str| {
        ck.attachments
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("{} lacks the {k} subword model", path.display())))
            .and_then(|t| SubwordModel::from_text(t))
    };
    let (s, t) = (get(SRC_BPE_KEY)?, get(TGT_BPE_KEY)?);
    Ok((ck.model, s, t))
}

fn write_meta(path: &Option<PathBuf>, triples: &[TextTriple]) -> Result<()> {
    if let Some(p) = path {
        let lines: Vec<String> = triples
            .iter()
            .map(|t| serde_json::json!({ "synthetic": t.synthetic }).to_string())
            .collect();
        io::write_lines(p, &lines)?;
    }
    Ok(())
}

fn make_pseudo(a: MakePseudoArgs) -> CliResult<()> {
    require(&[&a.input])?;
    let tri = datakit::read_triples(&a.input)?;
    let t1 = Translator::load(&a.model1, a.side1, a.tag1.clone(), a.decode.search())?;
    let mut t2 = Translator::load(&a.model2, 0, a.tag2.clone(), a.decode.search())?;
    t2.side = match a.side2 {
        Some(s) if s >= t2.model.num_decoders() => {
            return Err(CliError::Usage(format!("second translator has no side {s}")));
        }
        Some(s) => s,
        None => t2.model.num_decoders() - 1,
    };
    let out = datakit::make_pseudo_trilingual(&tri, |s| t1.translate(s), |s| t2.translate(s), a.seed);
    datakit::write_triples(&a.output, &out)?;
    write_meta(&a.meta, &out)?;
    log::info!("{} of {} samples written", out.len(), tri.len());
    Ok(())
}

fn make_bidi(a: MakeBidiArgs) -> CliResult<()> {
    require(&[&a.src, &a.tgt])?;
    let bt = Bitext::read(&a.src, &a.tgt)?;
    let mode: BidiMode = a.mode.parse()?;
    let load = |p: &Option<PathBuf>, side| -> CliResult<Option<Translator>> {
        p.as_ref().map(|p| Translator::load(p, side, None, a.decode.search())).transpose()
    };
    let rev = load(&a.reverse_model, a.reverse_side)?;
    let fwd = load(&a.forward_model, a.forward_side)?;
    let mut rev_fn = rev.as_ref().map(|t| move |s: &str| t.translate(s));
    let mut fwd_fn = fwd.as_ref().map(|t| move |s: &str| t.translate(s));
    let out = datakit::make_bidi_corpus(
        &bt,
        mode,
        rev_fn.as_mut().map(|f| f as &mut dyn FnMut(&str) -> Result<String>),
        fwd_fn.as_mut().map(|f| f as &mut dyn FnMut(&str) -> Result<String>),
        a.seed,
    )?;
    datakit::write_triples(&a.output, &out)?;
    write_meta(&a.meta, &out)?;
    Ok(())
}

fn make_csw(a: MakeCswArgs) -> CliResult<()> {
    require(&[&a.src, &a.tgt])?;
    let bt = Bitext::read(&a.src, &a.tgt)?;
    let alignments: Vec<Alignment> = match &a.alignments {
        Some(p) => {
            require(&[p])?;
            datakit::read_alignments(p, &bt)?
        }
        None => datakit::align_bitext(&bt, a.iterations, a.symmetrize.parse::<Symmetrization>()?)?,
    };
    let out = datakit::make_csw_corpus(&bt, &alignments, a.rep, a.max_phrase_len, a.seed)?;
    let lines: Vec<String> = out.iter().map(|s| format!("{}\t{}\t{}", s.source, s.ref1, s.ref2)).collect();
    io::write_lines(&a.output, &lines)?;
    if let Some(p) = &a.log {
        let lines: Vec<String> = out
            .iter()
            .map(|s| {
                serde_json::json!({
                    "primary": s.primary,
                    "replacements": s.replacements,
                    "unmodified": s.unmodified,
                })
                .to_string()
            })
            .collect();
        io::write_lines(p, &lines)?;
    }
    if let Some(p) = &a.alignments_out {
        let lines: Vec<String> = alignments.iter().map(Alignment::to_pharaoh).collect();
        io::write_lines(p, &lines)?;
    }
    let flagged = out.iter().filter(|s| s.unmodified).count();
    log::info!("{} samples, {flagged} without phrase pairs", out.len());
    Ok(())
}

fn make_variants(a: MakeVariantsArgs) -> CliResult<()> {
    require(&[&a.input])?;
    let data = io::read_lines(&a.input)?
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, l)| match l.split('\t').collect::<Vec<_>>().as_slice() {
            [s, t, lab] => Ok((s.to_string(), t.to_string(), lab.to_string())),
            _ => Err(Error::Input(format!("line {}: expected source, target and label", n + 1))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut tr = Translator::load(&a.model, a.side, None, a.decode.search())?;
    let (tag_a, tag_b) = (a.tag_a.clone(), a.tag_b.clone());
    let out = datakit::make_variant_triples(
        &data,
        |s, label| {
            tr.tag = Some(if label == VariantLabel::A { tag_a.clone() } else { tag_b.clone() });
            tr.translate(s)
        },
        a.seed,
    )?;
    datakit::write_triples(&a.output, &out)?;
    Ok(())
}

/// Model hyperparameters of a run; vocabulary sizes come from the subword models.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub coupling: Coupling,
    pub cross_position: CrossPosition,
    pub tie_mode: TieMode,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let b = ModelConfig::base(4, 4);
        ModelSection {
            d_model: b.d_model,
            d_ff: b.d_ff,
            heads: b.heads,
            enc_layers: b.enc_layers,
            dec_layers: b.dec_layers,
            coupling: b.coupling,
            cross_position: b.cross_position,
            tie_mode: b.tie_mode,
            dropout: b.dropout,
            ln_eps: b.ln_eps,
        }
    }
}

impl ModelSection {
    fn config(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            src_vocab,
            tgt_vocab,
            coupling: self.coupling,
            cross_position: self.cross_position,
            tie_mode: self.tie_mode,
            dropout: self.dropout,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedCorpus {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub tag: String,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub src_bpe: Option<PathBuf>,
    pub tgt_bpe: Option<PathBuf>,
    /// Pretrained single-decoder checkpoint for fine-tuning.
    pub init: Option<PathBuf>,
    pub corpora: Vec<TaggedCorpus>,
    pub dev_corpora: Vec<TaggedCorpus>,
    pub output: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// A TOML run description.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` and seeds parameter initialization.
    pub seed: Option<u64>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub data: DataSection,
}

impl RunConfig {
    /// Reads a config; relative data paths are taken from the file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        require(&[path])?;
        let text = io::read_to_string(path)?;
        let mut c: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut c.data;
        for p in [&mut d.train, &mut d.dev, &mut d.src_bpe, &mut d.tgt_bpe, &mut d.init, &mut d.output, &mut d.metrics]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for tc in d.corpora.iter_mut().chain(d.dev_corpora.iter_mut()) {
            fix(&mut tc.src);
            fix(&mut tc.tgt);
        }
        Ok(c)
    }

    fn apply(&mut self, a: &TrainArgs) {
        if let Some(s) = a.seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
        }
        if let Some(v) = a.max_steps {
            self.train.max_steps = v;
        }
        if let Some(v) = a.patience {
            self.train.patience = v;
        }
        if let Some(v) = a.eval_interval {
            self.train.eval_interval = v;
        }
        if let Some(v) = a.batch_tokens {
            self.train.batch_tokens = v;
        }
        if let Some(v) = a.lr {
            self.train.adam.peak_lr = v;
        }
        if a.output.is_some() {
            self.data.output = a.output.clone();
        }
        if a.metrics.is_some() {
            self.data.metrics = a.metrics.clone();
        }
    }
}

fn load_bpes(d: &DataSection) -> CliResult<(SubwordModel, SubwordModel)> {
    let (Some(s), Some(t)) = (&d.src_bpe, &d.tgt_bpe) else {
        return Err(CliError::Usage("data.src_bpe and data.tgt_bpe are required".into()));
    };
    require(&[s, t])?;
    Ok((SubwordModel::load(s)?, SubwordModel::load(t)?))
}

fn attachments(src: &SubwordModel, tgt: &SubwordModel) -> BTreeMap<String, String> {
    BTreeMap::from([(SRC_BPE_KEY.to_string(), src.to_text()), (TGT_BPE_KEY.to_string(), tgt.to_text())])
}

fn finish_training(cfg: &RunConfig, outcome: training::TrainOutcome, src: &SubwordModel, tgt: &SubwordModel) -> CliResult<()> {
    let out = cfg
        .data
        .output
        .as_ref()
        .ok_or_else(|| CliError::Usage("no output checkpoint (data.output or --output)".into()))?;
    save_checkpoint(out, &outcome.model, &attachments(src, tgt))?;
    if let Some(m) = &cfg.data.metrics {
        io::write_atomic(m, training::metrics_jsonl(&outcome.log).as_bytes())?;
    }
    log::info!(
        "{} steps, best dev loss {:?} at step {:?}{}",
        outcome.steps,
        outcome.best_dev_loss,
        outcome.best_step,
        if outcome.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

fn encode_corpus(corpora: &[TaggedCorpus], src: &SubwordModel, tgt: &SubwordModel) -> CliResult<(Vec<Vec<(Vec<u32>, Vec<u32>)>>, Vec<u32>)> {
    let mut sets = Vec::new();
    let mut tags = Vec::new();
    for c in corpora {
        require(&[&c.src, &c.tgt])?;
        let bt = Bitext::read(&c.src, &c.tgt)?;
        let tag = src
            .id(&c.tag)
            .filter(|&id| src.is_special(id))
            .ok_or_else(|| CliError::Usage(format!("tag {} is not a special token of the source subword model", c.tag)))?;
        tags.push(tag);
        sets.push(bt.pairs().iter().map(|(s, t)| (src.encode(s), tgt.encode(t))).collect());
    }
    Ok((sets, tags))
}

fn pretrain(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&a);
    cfg.train.validate()?;
    if cfg.data.corpora.is_empty() {
        return Err(CliError::Usage("pretraining needs at least one [[data.corpora]] entry".into()));
    }
    let (src, tgt) = load_bpes(&cfg.data)?;
    let mut mc = cfg.model.config(src.vocab_size(), tgt.vocab_size());
    mc.coupling = Coupling::Single;
    mc.validate()?;
    let (sets, tags) = encode_corpus(&cfg.data.corpora, &src, &tgt)?;
    let refs: Vec<&[(Vec<u32>, Vec<u32>)]> = sets.iter().map(Vec::as_slice).collect();
    let dev = if cfg.data.dev_corpora.is_empty() {
        Vec::new()
    } else {
        let (dsets, dtags) = encode_corpus(&cfg.data.dev_corpora, &src, &tgt)?;
        let drefs: Vec<&[(Vec<u32>, Vec<u32>)]> = dsets.iter().map(Vec::as_slice).collect();
        training::multilingual_examples(&drefs, &dtags, mc.src_vocab)?
    };
    let model = DualModel::new(mc, cfg.train.seed)?;
    let outcome = training::pretrain_multilingual(&refs, &tags, model, &dev, &cfg.train)?;
    finish_training(&cfg, outcome, &src, &tgt)
}

fn encode_triples(path: &Path, src: &SubwordModel, tgt: &SubwordModel) -> CliResult<Vec<Example>> {
    require(&[path])?;
    datakit::read_triples(path)?
        .iter()
        .map(|t| {
            let s = TriSample::new(src.encode(&t.src), &tgt.encode(&t.tgt1), &tgt.encode(&t.tgt2))?;
            Ok(s.to_example())
        })
        .collect()
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply(&a);
    cfg.train.validate()?;
    if cfg.model.coupling == Coupling::Single {
        return Err(CliError::Usage("train needs a two-decoder coupling; use pretrain for single".into()));
    }
    let (model, src, tgt) = match cfg.train.mode {
        TrainMode::Scratch => {
            let (src, tgt) = load_bpes(&cfg.data)?;
            let mc = cfg.model.config(src.vocab_size(), tgt.vocab_size());
            mc.validate()?;
            (DualModel::new(mc, cfg.train.seed)?, src, tgt)
        }
        TrainMode::Finetune => {
            let init = cfg
                .data
                .init
                .as_ref()
                .ok_or_else(|| CliError::Usage("fine-tuning needs data.init".into()))?;
            require(&[init])?;
            let (pre, src, tgt) = load_bundle(init)?;
            let mc = cfg.model.config(src.vocab_size(), tgt.vocab_size());
            mc.validate()?;
            (DualModel::init_from_pretrained(&pre, mc, cfg.train.seed)?, src, tgt)
        }
    };
    let train_path = cfg.data.train.clone().ok_or_else(|| CliError::Usage("data.train is required".into()))?;
    let data = encode_triples(&train_path, &src, &tgt)?;
    let dev = match &cfg.data.dev {
        Some(p) => encode_triples(p, &src, &tgt)?,
        None => Vec::new(),
    };
    let outcome = training::train(model, &data, &dev, &cfg.train)?;
    finish_training(&cfg, outcome, &src, &tgt)
}

fn forced_lines(path: &Option<PathBuf>, n: usize) -> CliResult<Option<Vec<String>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            require(&[p])?;
            let l = io::read_lines(p)?;
            if l.len() != n {
                return Err(CliError::Usage(format!("{} has {} lines, input has {n}", p.display(), l.len())));
            }
            Ok(Some(l))
        }
    }
}

fn translate(a: TranslateArgs) -> CliResult<()> {
    require(&[&a.checkpoint, &a.input])?;
    let mut search = match &a.config {
        Some(p) => RunConfig::load(p)?.search,
        None => SearchConfig::default(),
    };
    if let Some(v) = a.beam {
        search.beam_size = v;
    }
    if let Some(s) = a.scheme {
        search.scheme = match s {
            SchemeArg::RankAligned => CouplingScheme::RankAligned,
            SchemeArg::AttendBest => CouplingScheme::AttendBest,
            SchemeArg::AttendAverage => CouplingScheme::AttendAverage,
        };
    }
    if let Some(v) = a.wait1 {
        search.wait_k[0] = v;
    }
    if let Some(v) = a.wait2 {
        search.wait_k[1] = v;
    }
    if let Some(v) = a.max_len {
        search.max_len = v;
    }
    if let Some(v) = a.alpha {
        search.length_penalty_alpha = v;
    }
    let (model, src_bpe, tgt_bpe) = load_bundle(&a.checkpoint)?;
    search.validate(model.config().tgt_vocab)?;
    let two = model.num_decoders() == 2;
    if !two && (a.mode != DecodeMode::Dual && a.mode != DecodeMode::Greedy || a.forced1.is_some() || a.forced2.is_some()) {
        return Err(CliError::Usage(format!("{:?} mode and forcing need a two-decoder model", a.mode)));
    }
    if a.forced1.is_some() && a.forced2.is_some() {
        return Err(CliError::Usage("only one side can be forced".into()));
    }
    let input = io::read_lines(&a.input)?;
    let forced = [forced_lines(&a.forced1, input.len())?, forced_lines(&a.forced2, input.len())?];

    let mut out = Vec::with_capacity(input.len());
    for (n, line) in input.iter().enumerate() {
        let src = encode_source(&src_bpe, line, a.tag.as_deref()).map_err(|e| Error::Input(format!("line {}: {e}", n + 1)))?;
        let mut cfg = search.clone();
        let mut reference = None;
        for side in 0..2 {
            if let Some(f) = &forced[side] {
                let ids = tgt_bpe.encode(&f[n]);
                cfg.forced[side] = Some(ids.clone());
                reference = Some((side, ids));
            }
        }
        cfg.validate(model.config().tgt_vocab)?;
        let hyp: DualHypothesis = match a.mode {
            DecodeMode::Dual | DecodeMode::Bidi => search::dual_beam_search(&model, &src, &cfg)?,
            DecodeMode::Greedy => search::greedy_dual_decode(&model, &src, &cfg)?,
            DecodeMode::Seq1 | DecodeMode::Seq2 => {
                let first = if a.mode == DecodeMode::Seq1 { 0 } else { 1 };
                let mut c2 = cfg.clone();
                c2.forced = [None, None];
                match &reference {
                    Some((side, ids)) if *side == first => {
                        search::sequential_decode(&model, &src, first, Some(ids), &c2)?
                    }
                    Some(_) => return Err(CliError::Usage("sequential decoding can only force its first side".into())),
                    None => search::sequential_decode(&model, &src, first, None, &c2)?,
                }
            }
        };
        let texts: Vec<String> = (0..model.num_decoders())
            .map(|s| tgt_bpe.decode(&hyp.output(s)))
            .collect::<Result<_>>()?;
        if a.mode == DecodeMode::Bidi {
            let side_score = |s: usize| {
                let len = hyp.tokens[s].iter().filter(|&&t| t != crate::subword::PAD).count();
                joint_score(&[hyp.logp[s]], &[len], search.length_penalty_alpha)
            };
            let (s0, s1) = (side_score(0), side_score(1));
            let l2r: Vec<&str> = texts[0].split_whitespace().collect();
            let r2l: Vec<&str> = texts[1].split_whitespace().collect();
            let chosen = search::bidi_select(&l2r, s0, &r2l, s1).join(" ");
            out.push(format!("{:.6}\t{chosen}", s0.max(s1)));
        } else {
            let second = texts.get(1).cloned().unwrap_or_default();
            out.push(format!("{:.6}\t{}\t{}", hyp.score, texts[0], second));
        }
    }
    match &a.output {
        Some(p) => io::write_lines(p, &out)?,
        None => {
            for l in &out {
                println!("{l}");
            }
        }
    }
    Ok(())
}

fn tokenized(path: &Path) -> CliResult<Vec<Vec<String>>> {
    require(&[path])?;
    Ok(io::read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn evaluate(e: EvalCommand) -> CliResult<()> {
    let json = match e {
        EvalCommand::Bleu {
            hyp,
            reference,
            max_n,
            smooth,
        } => {
            let smoothing = smooth.map_or(Smoothing::None, Smoothing::AddK);
            let r = eval::corpus_bleu(&tokenized(&hyp)?, &tokenized(&reference)?, max_n, smoothing)?;
            serde_json::to_string(&r)
        }
        EvalCommand::Consistency { fwd, bwd, one_direction } => {
            let mode = if one_direction {
                ConsistencyMode::Forward
            } else {
                ConsistencyMode::Symmetric
            };
            let s = eval::consistency_score(&tokenized(&fwd)?, &tokenized(&bwd)?, mode)?;
            serde_json::to_string(&serde_json::json!({ "consistency": s }))
        }
        EvalCommand::Copy { src, hyp1, hyp2 } => {
            let (s, h1, h2) = (tokenized(&src)?, tokenized(&hyp1)?, tokenized(&hyp2)?);
            if s.len() != h1.len() || s.len() != h2.len() {
                return Err(CliError::Runtime(Error::Input("files differ in line count".into())));
            }
            serde_json::to_string(&pooled_copy_report(&s, &h1, &h2)?)
        }
    }
    .map_err(|e| Error::Internal(e.to_string()))?;
    println!("{json}");
    Ok(())
}

/// Corpus-level copy report: per-sentence reports weighted by source length.
pub fn pooled_copy_report(src: &[Vec<String>], hyp1: &[Vec<String>], hyp2: &[Vec<String>]) -> Result<CopyReport> {
    let mut acc = [0.0; 4];
    let mut total = 0usize;
    for ((s, a), b) in src.iter().zip(hyp1).zip(hyp2) {
        if s.is_empty() {
            continue;
        }
        let r = eval::copy_constraint_report(s, a, b)?;
        for (x, v) in acc.iter_mut().zip([r.exclusive, r.both, r.punct, r.lost]) {
            *x += v * s.len() as f64;
        }
        total += s.len();
    }
    if total == 0 {
        return Err(Error::Input("no source tokens".into()));
    }
    let t = total as f64;
    Ok(CopyReport {
        exclusive: acc[0] / t,
        both: acc[1] / t,
        punct: acc[2] / t,
        lost: acc[3] / t,
    })
}
