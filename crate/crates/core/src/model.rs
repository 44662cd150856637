//! The assembled network: named parameters, ablation variants and the full
//! forward pass (encoders → noise/decoders → exchanging stack → fusion → head).

use std::collections::HashMap;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    self, CaptionDecoderWeights, ImageDecoderWeights, ImageEncoderWeights, MlpWeights, NoiseConfig,
    TextEncoderWeights, MAX_SEQ_LEN, PATCHES, PATCH_DIM,
};
use crate::crosstransformer::{self, ExchangeConfig, ExchangeTrace, StreamBatch};
use crate::data::{Grid, SynthExample, Task, MSA_CLASSES, VOCAB};
use crate::error::{MuseError, Result};
use crate::heads::{self, CrfParams, LabelScheme};
use crate::nn::{self, AttentionWeights, EncoderLayerWeights, FfnWeights};
use crate::tensor::{Tape, Tensor, Var};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Full,
    OnlyText,
    OnlyImage,
    NoCrosstransformer,
    TaskOnly,
    NoCaptionLoss,
    NoGenerationLoss,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 7] = [
        ModelVariant::Full,
        ModelVariant::OnlyText,
        ModelVariant::OnlyImage,
        ModelVariant::NoCrosstransformer,
        ModelVariant::TaskOnly,
        ModelVariant::NoCaptionLoss,
        ModelVariant::NoGenerationLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::OnlyText => "only_text",
            ModelVariant::OnlyImage => "only_image",
            ModelVariant::NoCrosstransformer => "no_crosstransformer",
            ModelVariant::TaskOnly => "task_only",
            ModelVariant::NoCaptionLoss => "no_caption_loss",
            ModelVariant::NoGenerationLoss => "no_generation_loss",
        }
    }

    pub fn uses_text(self) -> bool {
        self != ModelVariant::OnlyImage
    }

    pub fn uses_image(self) -> bool {
        self != ModelVariant::OnlyText
    }

    pub fn uses_crosstransformer(self) -> bool {
        self != ModelVariant::NoCrosstransformer
    }

    /// Captioning loss `L_it` is active.
    pub fn caption_loss(self) -> bool {
        matches!(
            self,
            ModelVariant::Full | ModelVariant::NoCrosstransformer | ModelVariant::NoGenerationLoss
        )
    }

    /// Generation loss `L_ti` is active.
    pub fn generation_loss(self) -> bool {
        matches!(
            self,
            ModelVariant::Full | ModelVariant::NoCrosstransformer | ModelVariant::NoCaptionLoss
        )
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = MuseError;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| MuseError::config("variant", format!("unknown variant `{s}`")))
    }
}

/// Everything that fixes the parameter layout and the forward computation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub variant: ModelVariant,
    pub exchange: ExchangeConfig,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub head_dropout: f64,
    pub noise: NoiseConfig,
    pub q_levels: usize,
}

impl ModelConfig {
    pub fn new(task: Task, variant: ModelVariant) -> Self {
        let exchange = ExchangeConfig::default();
        ModelConfig {
            task,
            variant,
            ffn_hidden: 2 * exchange.dim,
            exchange,
            dropout: 0.1,
            head_dropout: heads::DEFAULT_HEAD_DROPOUT,
            noise: NoiseConfig::default(),
            q_levels: codec::DEFAULT_Q_LEVELS,
        }
    }

    pub fn dim(&self) -> usize {
        self.exchange.dim
    }

    pub fn labels(&self) -> usize {
        match self.task {
            Task::Mner => LabelScheme::two_types().len(),
            Task::Msa => MSA_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.exchange.validate()?;
        for (field, rate) in [
            ("dropout", self.dropout),
            ("head_dropout", self.head_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(MuseError::config(
                    field,
                    format!("rate {rate} outside [0, 1)"),
                ));
            }
        }
        if self.ffn_hidden == 0 {
            return Err(MuseError::config("ffn_hidden", "must be at least 1"));
        }
        if self.q_levels < 2 {
            return Err(MuseError::config(
                "q_levels",
                "need at least two intensity levels",
            ));
        }
        if !(self.noise.std_text >= 0.0 && self.noise.std_image >= 0.0) {
            return Err(MuseError::config("noise", "std must be non-negative"));
        }
        Ok(())
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.tensors[i])
            .ok_or_else(|| MuseError::contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t, '_> {
        Bound {
            store: self,
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }
}

/// A [`ParamStore`] recorded on one tape.
pub struct Bound<'t, 's> {
    store: &'s ParamStore,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t, '_> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| MuseError::contract(format!("missing parameter `{name}`")))
    }

    /// Parameter name of a tape node, if it is one of the bound leaves.
    pub fn name_of(&self, node: usize) -> Option<&str> {
        self.vars
            .iter()
            .position(|v| v.id() == node)
            .map(|i| self.store.names[i].as_str())
    }

    /// The shared exchanging stack, layer 1 first.
    pub fn ct_layers(&self, cfg: &ModelConfig) -> Result<Vec<EncoderLayerWeights<'t>>> {
        (1..=cfg.exchange.num_layers)
            .map(|l| self.encoder_layer(&format!("ct.{l}"), cfg.exchange.heads))
            .collect()
    }

    fn mlp(&self, prefix: &str) -> Result<MlpWeights<'t>> {
        Ok(MlpWeights {
            w1: self.var(&format!("{prefix}.w1"))?,
            b1: self.var(&format!("{prefix}.b1"))?,
            w2: self.var(&format!("{prefix}.w2"))?,
            b2: self.var(&format!("{prefix}.b2"))?,
        })
    }

    pub fn encoder_layer(&self, prefix: &str, heads: usize) -> Result<EncoderLayerWeights<'t>> {
        let v = |s: &str| self.var(&format!("{prefix}.{s}"));
        Ok(EncoderLayerWeights {
            attention: AttentionWeights {
                wq: v("attn.wq")?,
                bq: v("attn.bq")?,
                wk: v("attn.wk")?,
                bk: v("attn.bk")?,
                wv: v("attn.wv")?,
                bv: v("attn.bv")?,
                wo: v("attn.wo")?,
                bo: v("attn.bo")?,
                ln_gamma: v("attn.ln_gamma")?,
                ln_beta: v("attn.ln_beta")?,
                heads,
            },
            ffn: FfnWeights {
                w1: v("ffn.w1")?,
                b1: v("ffn.b1")?,
                w2: v("ffn.w2")?,
                b2: v("ffn.b2")?,
                ln_gamma: v("ffn.ln_gamma")?,
                ln_beta: v("ffn.ln_beta")?,
            },
        })
    }
}

/// True for parameters that only the image side of the model reads.
pub fn is_image_param(name: &str) -> bool {
    name.starts_with("image.")
        || name.starts_with("noise.image.")
        || name.starts_with("decoder.caption.")
        || name == "cls.image"
}

/// Std of every attention and FFN weight matrix.
pub const LAYER_INIT_STD: f64 = 0.1;

struct Init<'a> {
    store: ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<()> {
        let t = nn::kaiming_init(shape, fan_in, self.rng)?;
        self.store.insert(name, t);
        Ok(())
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape));
    }

    fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::filled(shape, 1.0));
    }

    fn linear(&mut self, prefix: &str, w: &str, b: &str, rows: usize, cols: usize) -> Result<()> {
        self.kaiming(&format!("{prefix}.{w}"), &[rows, cols], rows)?;
        self.zeros(&format!("{prefix}.{b}"), &[cols]);
        Ok(())
    }

    fn mlp(&mut self, prefix: &str, d: usize, hidden: usize, out: usize) -> Result<()> {
        self.linear(prefix, "w1", "b1", d, hidden)?;
        self.linear(prefix, "w2", "b2", hidden, out)
    }

    /// Transformer sub-layer weights: `N(0, LAYER_INIT_STD²)`, zero bias.
    fn layer_linear(
        &mut self,
        prefix: &str,
        w: &str,
        b: &str,
        rows: usize,
        cols: usize,
    ) -> Result<()> {
        let t = nn::normal_init(&[rows, cols], LAYER_INIT_STD, self.rng)?;
        self.store.insert(format!("{prefix}.{w}"), t);
        self.zeros(&format!("{prefix}.{b}"), &[cols]);
        Ok(())
    }

    fn encoder_layer(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<()> {
        for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv"), ("wo", "bo")] {
            self.layer_linear(&format!("{prefix}.attn"), w, b, d, d)?;
        }
        self.ones(&format!("{prefix}.attn.ln_gamma"), &[d]);
        self.zeros(&format!("{prefix}.attn.ln_beta"), &[d]);
        self.layer_linear(&format!("{prefix}.ffn"), "w1", "b1", d, hidden)?;
        self.layer_linear(&format!("{prefix}.ffn"), "w2", "b2", hidden, d)?;
        self.ones(&format!("{prefix}.ffn.ln_gamma"), &[d]);
        self.zeros(&format!("{prefix}.ffn.ln_beta"), &[d]);
        Ok(())
    }
}

/// Fresh parameters for `cfg`, drawn from a generator seeded by `seed`.
/// Embeddings, projections, heads and the cls rows use Kaiming normal init;
/// Transformer sub-layers use [`LAYER_INIT_STD`]. Biases and layer-norm
/// shifts start at zero, layer-norm scales at one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(1 << 62);
    let d = cfg.dim();
    let h = cfg.ffn_hidden;
    let mut init = Init {
        store: ParamStore::new(),
        rng: &mut rng,
    };
    init.kaiming("text.embed", &[VOCAB, d], d)?;
    init.kaiming("text.pos", &[MAX_SEQ_LEN, d], d)?;
    init.encoder_layer("text.layer", d, h)?;
    init.linear("image", "proj_w", "proj_b", PATCH_DIM, d)?;
    init.kaiming("image.pos", &[PATCHES, d], d)?;
    init.kaiming("cls.text", &[1, d], d)?;
    init.kaiming("cls.image", &[1, d], d)?;
    init.mlp("noise.text", d, d, d)?;
    init.mlp("noise.image", d, d, d)?;
    init.kaiming("decoder.caption.embed", &[VOCAB + 1, d], d)?;
    init.mlp("decoder.caption", d, d, VOCAB)?;
    init.mlp("decoder.image", d, d, 64 * cfg.q_levels)?;
    for l in 1..=cfg.exchange.num_layers {
        init.encoder_layer(&format!("ct.{l}"), d, h)?;
    }
    init.linear("fuse", "w", "b", 2 * d, d)?;
    let labels = cfg.labels();
    init.linear("head", "w", "b", d, labels)?;
    if cfg.task == Task::Mner {
        init.zeros("crf.transitions", &[labels, labels]);
        init.zeros("crf.start", &[labels]);
        init.zeros("crf.end", &[labels]);
    }
    Ok(init.store)
}

/// True for the parameters trained with the CRF learning rate.
pub fn is_crf_param(name: &str) -> bool {
    name.starts_with("crf.")
}

pub struct ForwardOutput<'t> {
    pub l_task: Var<'t>,
    /// `None` when the variant switches the loss off.
    pub l_it: Option<Var<'t>>,
    pub l_ti: Option<Var<'t>>,
    /// MNER: `(B·n)×labels` emissions. MSA: `B×classes` logits.
    pub scores: Var<'t>,
    pub traces: Vec<ExchangeTrace>,
    pub seq_len: usize,
}

/// Gold targets a forward pass needs; MNER label rows or MSA class ids.
fn task_targets(task: Task, batch: &[&SynthExample]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut seqs = Vec::new();
    let mut classes = Vec::new();
    for ex in batch {
        match task {
            Task::Mner => seqs.push(ex.mner_labels.clone().ok_or_else(|| {
                MuseError::config("task", "MNER model given an example without BIO labels")
            })?),
            Task::Msa => classes.push(ex.msa_label.ok_or_else(|| {
                MuseError::config("task", "MSA model given an example without a class label")
            })?),
        }
    }
    Ok((seqs, classes))
}

/// Per-sequence cls rows (`B×d`) placed ahead of each `n`-row block.
fn prepend_rows<'t>(cls: Var<'t>, tokens: Var<'t>, n: usize) -> Result<Var<'t>> {
    let b = cls.rows();
    let stacked = cls.concat_rows(tokens)?;
    let idx: Vec<usize> = (0..b)
        .flat_map(|s| std::iter::once(s).chain((0..n).map(move |j| b + s * n + j)))
        .collect();
    stacked.gather_rows(&idx)
}

/// Runs the whole model on a batch. With `training` off, dropout and noise
/// are disabled and decoders are still evaluated for reporting.
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Bound<'t, '_>,
    batch: &[&SynthExample],
    training: bool,
    rng: &mut Rng,
) -> Result<ForwardOutput<'t>> {
    if batch.is_empty() {
        return Err(MuseError::Input("empty batch".into()));
    }
    let tape = p.var("fuse.w")?.tape();
    let variant = cfg.variant;
    let d = cfg.dim();
    let b = batch.len();
    let tokens: Vec<&[usize]> = batch
        .iter()
        .map(|ex| codec::clip_tokens(&ex.tokens))
        .collect();
    let n = tokens[0].len();
    let grids: Vec<&Grid> = batch.iter().map(|ex| &ex.image).collect();
    let (label_seqs, classes) = task_targets(cfg.task, batch)?;
    let label_seqs: Vec<Vec<usize>> = label_seqs
        .into_iter()
        .map(|mut s| {
            s.truncate(n);
            s
        })
        .collect();

    let t_e = if variant.uses_text() {
        let w = TextEncoderWeights {
            embed: p.var("text.embed")?,
            pos: p.var("text.pos")?,
            layer: p.encoder_layer("text.layer", cfg.exchange.heads)?,
        };
        Some(codec::encode_text(&tokens, &w, cfg.dropout, training, rng)?)
    } else {
        None
    };
    let i_e = if variant.uses_image() {
        let w = ImageEncoderWeights {
            proj_w: p.var("image.proj_w")?,
            proj_b: p.var("image.proj_b")?,
            pos: p.var("image.pos")?,
        };
        Some(codec::encode_image(&grids, &w)?)
    } else {
        None
    };

    let noise_on = cfg.noise.enabled;
    let l_it = match (variant.caption_loss(), i_e) {
        (true, Some(i_e)) => {
            let i_n = codec::inject_noise(
                i_e,
                cfg.noise.std_image,
                noise_on,
                &p.mlp("noise.image")?,
                rng,
                training,
            )?;
            let w = CaptionDecoderWeights {
                embed: p.var("decoder.caption.embed")?,
                w1: p.var("decoder.caption.w1")?,
                b1: p.var("decoder.caption.b1")?,
                w2: p.var("decoder.caption.w2")?,
                b2: p.var("decoder.caption.b2")?,
            };
            Some(codec::decode_text_captioning(i_n, PATCHES, &tokens, &w)?.1)
        }
        _ => None,
    };
    let l_ti = match (variant.generation_loss(), t_e) {
        (true, Some(t_e)) => {
            let t_n = codec::inject_noise(
                t_e,
                cfg.noise.std_text,
                noise_on,
                &p.mlp("noise.text")?,
                rng,
                training,
            )?;
            let w = ImageDecoderWeights {
                w1: p.var("decoder.image.w1")?,
                b1: p.var("decoder.image.b1")?,
                w2: p.var("decoder.image.w2")?,
                b2: p.var("decoder.image.b2")?,
            };
            Some(codec::decode_image_generation(t_n, n, &grids, &w, cfg.q_levels)?.1)
        }
        _ => None,
    };

    let (text_out, image_out, traces) = if variant.uses_crosstransformer() {
        let text = t_e
            .map(|t| crosstransformer::prepend_cls_blocks(p.var("cls.text")?, t, n))
            .transpose()?
            .map(|x| StreamBatch { x, block: n + 1 });
        let image = i_e
            .map(|i| crosstransformer::prepend_cls_blocks(p.var("cls.image")?, i, PATCHES))
            .transpose()?
            .map(|x| StreamBatch {
                x,
                block: PATCHES + 1,
            });
        let layers = p.ct_layers(cfg)?;
        let out = crosstransformer::cross_forward_batched(
            text,
            image,
            &layers,
            &cfg.exchange,
            cfg.dropout,
            training,
            rng,
        )?;
        (out.text, out.image, out.traces)
    } else {
        // Encoder embeddings go straight to fusion; the cls slot carries the
        // sequence mean.
        let text = t_e
            .map(|t| prepend_rows(t.block_mean(n, 0)?, t, n))
            .transpose()?
            .map(|x| StreamBatch { x, block: n + 1 });
        let image = i_e
            .map(|i| prepend_rows(i.block_mean(PATCHES, 0)?, i, PATCHES))
            .transpose()?
            .map(|x| StreamBatch {
                x,
                block: PATCHES + 1,
            });
        (text, image, Vec::new())
    };

    let block = n + 1;
    let zeros = || tape.constant(Tensor::zeros(&[b * block, d]));
    let text_rows = text_out.map_or_else(zeros, |s| s.x);
    let image_rows = match image_out {
        Some(s) => crosstransformer::align_image_rows(s, block)?,
        None => zeros(),
    };
    let fused =
        crosstransformer::fuse_outputs(text_rows, image_rows, p.var("fuse.w")?, p.var("fuse.b")?)?;

    let (head_w, head_b) = (p.var("head.w")?, p.var("head.b")?);
    let (scores, l_task) = match cfg.task {
        Task::Mner => {
            let e = heads::token_emissions(
                fused,
                block,
                head_w,
                head_b,
                cfg.head_dropout,
                training,
                rng,
            )?;
            let loss = heads::crf_nll(
                e,
                &label_seqs,
                p.var("crf.transitions")?,
                p.var("crf.start")?,
                p.var("crf.end")?,
            )?;
            (e, loss)
        }
        Task::Msa => {
            let logits = heads::classify_sentiment(
                fused,
                block,
                head_w,
                head_b,
                cfg.head_dropout,
                training,
                rng,
            )?;
            let loss = logits.cross_entropy(&classes, None)?;
            (logits, loss)
        }
    };

    Ok(ForwardOutput {
        l_task,
        l_it,
        l_ti,
        scores,
        traces,
        seq_len: n,
    })
}

/// CRF parameters as plain tensors.
pub fn crf_params(params: &ParamStore) -> Result<CrfParams> {
    Ok(CrfParams {
        transitions: params.get("crf.transitions")?.clone(),
        start_scores: params.get("crf.start")?.clone(),
        end_scores: params.get("crf.end")?.clone(),
    })
}

/// Model outputs decoded into labels.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Mner(Vec<Vec<usize>>),
    Msa(Vec<usize>),
}

pub const EVAL_BATCH: usize = 64;

/// Deterministic eval-mode predictions (Viterbi for MNER, argmax for MSA;
/// ties go to the lower label id).
pub fn predict(
    cfg: &ModelConfig,
    params: &ParamStore,
    examples: &[SynthExample],
) -> Result<Predictions> {
    let mut rng = Rng::seed_from_u64(0);
    let crf = if cfg.task == Task::Mner {
        Some(crf_params(params)?)
    } else {
        None
    };
    let mut seqs = Vec::new();
    let mut classes = Vec::new();
    for chunk in examples.chunks(EVAL_BATCH) {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let refs: Vec<&SynthExample> = chunk.iter().collect();
        let out = forward(cfg, &bound, &refs, false, &mut rng)?;
        let scores = out.scores.to_tensor();
        match &crf {
            Some(crf) => {
                let n = out.seq_len;
                let l = scores.cols();
                for s in 0..chunk.len() {
                    let e = Tensor::new(
                        vec![n, l],
                        scores.data()[s * n * l..(s + 1) * n * l].to_vec(),
                    )?;
                    seqs.push(heads::crf_viterbi_decode(&e, crf)?);
                }
            }
            None => {
                for r in 0..scores.rows() {
                    let row = scores.row(r);
                    let best =
                        (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best });
                    classes.push(best);
                }
            }
        }
    }
    Ok(if crf.is_some() {
        Predictions::Mner(seqs)
    } else {
        Predictions::Msa(classes)
    })
}

/// Exchange trace of one example in eval mode.
pub fn exchange_trace(
    cfg: &ModelConfig,
    params: &ParamStore,
    example: &SynthExample,
) -> Result<ExchangeTrace> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward(cfg, &bound, &[example], false, &mut Rng::seed_from_u64(0))?;
    Ok(out.traces.into_iter().next().unwrap_or_default())
}
