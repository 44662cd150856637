//! The exchanging backbone.
//!
//! Text and image streams run through the same stack of encoder layers
//! (shared parameters). Layers `1..=mu` and `eta+1..=L` are regular; in layers
//! `mu+1..=eta` the attention sub-layer is followed by an exchange step: in
//! each modality the `floor(theta·n)` tokens that the cls row attends to least
//! receive the mean embedding of the other modality's tokens as a residual
//! add. The FFN sub-layer then runs as usual.

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::nn::{self, AttentionMap, EncoderLayerWeights};
use crate::tensor::{Tape, Tensor, Var};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeConfig {
    pub theta: f64,
    pub mu: usize,
    pub eta: usize,
    pub num_layers: usize,
    pub heads: usize,
    pub dim: usize,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        ExchangeConfig {
            theta: 0.1,
            mu: 2,
            eta: 4,
            num_layers: 6,
            heads: 4,
            dim: 32,
        }
    }
}

impl ExchangeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(MuseError::config(
                "theta",
                format!("{} outside [0, 1]", self.theta),
            ));
        }
        if self.mu > self.eta {
            return Err(MuseError::config(
                "mu",
                format!("mu {} exceeds eta {}", self.mu, self.eta),
            ));
        }
        if self.eta > self.num_layers {
            return Err(MuseError::config(
                "eta",
                format!("eta {} exceeds num_layers {}", self.eta, self.num_layers),
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(MuseError::config(
                "heads",
                format!("d = {} not divisible by {} heads", self.dim, self.heads),
            ));
        }
        Ok(())
    }

    /// Whether 1-based `layer` is an exchanging layer.
    pub fn exchanges_at(&self, layer: usize) -> bool {
        layer > self.mu && layer <= self.eta
    }

    pub fn exchange_count(&self, tokens: usize) -> usize {
        (self.theta * tokens as f64).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Embeddings of one modality with the cls row at index 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStream {
    pub embeddings: Tensor,
    pub modality: Modality,
    pub tokens: usize,
}

impl ModalityStream {
    pub fn new(tokens: &Tensor, cls: &Tensor, modality: Modality) -> Result<Self> {
        let embeddings = prepend_cls(tokens, cls)?;
        Ok(ModalityStream {
            tokens: embeddings.rows() - 1,
            embeddings,
            modality,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeLayerTrace {
    pub layer: usize,
    pub text_selected: Vec<usize>,
    pub image_selected: Vec<usize>,
    pub text_cls_scores: Vec<f64>,
    pub image_cls_scores: Vec<f64>,
}

/// Which tokens were exchanged in each exchanging layer, for one sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExchangeTrace {
    pub layers: Vec<ExchangeLayerTrace>,
}

impl ExchangeTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn prepend_cls(tokens: &Tensor, cls: &Tensor) -> Result<Tensor> {
    let d = tokens.cols();
    if cls.numel() != d {
        return Err(MuseError::Shape {
            op: "prepend_cls",
            lhs: tokens.shape().to_vec(),
            rhs: cls.shape().to_vec(),
        });
    }
    let mut data = cls.data().to_vec();
    if tokens.numel() > 0 {
        data.extend_from_slice(tokens.data());
    }
    Tensor::new(vec![data.len() / d, d], data)
}

/// Taped, batched form of [`prepend_cls`]: `tokens` stacks sequences of
/// `n` rows; every sequence gets the `1×d` `cls` row in front.
pub fn prepend_cls_blocks<'t>(cls: Var<'t>, tokens: Var<'t>, n: usize) -> Result<Var<'t>> {
    let blocks = tokens.rows().checked_div(n).unwrap_or(0);
    let stacked = cls.concat_rows(tokens)?;
    let mut idx = Vec::with_capacity(blocks * (n + 1));
    for b in 0..blocks {
        idx.push(0);
        idx.extend((0..n).map(|j| 1 + b * n + j));
    }
    stacked.gather_rows(&idx)
}

/// Head-averaged attention of the cls row to every non-cls token.
pub fn cls_attention_scores(map: &AttentionMap) -> Vec<f64> {
    map.averaged.row(0)[1..].to_vec()
}

/// The `floor(theta·n)` stream indices (1-based, skipping cls) with the
/// smallest scores, sorted ascending. Ties go to the lower index.
pub fn select_exchange_tokens(scores: &[f64], theta: f64) -> Vec<usize> {
    let k = (theta * scores.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).map(|i| i + 1).collect();
    picked.sort_unstable();
    picked
}

/// Simultaneous exchange on one pair of streams: every selected row gains
/// the mean of the other stream's non-cls rows, both means taken from the
/// pre-update values.
pub fn exchange_update(
    t: &Tensor,
    i: &Tensor,
    sel_t: &[usize],
    sel_i: &[usize],
) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let tv = tape.leaf(t);
    let iv = tape.leaf(i);
    let t_new = tv.exchange_into(iv, &[sel_t.to_vec()], t.rows(), i.rows())?;
    let i_new = iv.exchange_into(tv, &[sel_i.to_vec()], i.rows(), t.rows())?;
    Ok((t_new.to_tensor(), i_new.to_tensor()))
}

/// Stacked streams of equal-length sequences: `x` holds `x.rows() / block`
/// sequences of `block` rows each (cls first).
#[derive(Clone, Copy, Debug)]
pub struct StreamBatch<'t> {
    pub x: Var<'t>,
    pub block: usize,
}

impl StreamBatch<'_> {
    pub fn sequences(&self) -> usize {
        self.x.rows() / self.block
    }
}

pub struct CrossOutput<'t> {
    pub text: Option<StreamBatch<'t>>,
    pub image: Option<StreamBatch<'t>>,
    /// One trace per sequence; empty unless both streams are present.
    pub traces: Vec<ExchangeTrace>,
    /// Per layer, per sequence attention maps of each stream.
    pub text_maps: Vec<Vec<AttentionMap>>,
    pub image_maps: Vec<Vec<AttentionMap>>,
}

/// Runs the shared encoder stack over whichever streams are present,
/// exchanging between them in layers `mu+1..=eta` when both are.
pub fn cross_forward_batched<'t>(
    text: Option<StreamBatch<'t>>,
    image: Option<StreamBatch<'t>>,
    layers: &[EncoderLayerWeights<'t>],
    cfg: &ExchangeConfig,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<CrossOutput<'t>> {
    cfg.validate()?;
    if layers.len() != cfg.num_layers {
        return Err(MuseError::config(
            "num_layers",
            format!(
                "config says {} layers, weights hold {}",
                cfg.num_layers,
                layers.len()
            ),
        ));
    }
    if let (Some(t), Some(i)) = (text, image) {
        if t.sequences() != i.sequences() || t.x.cols() != i.x.cols() {
            return Err(MuseError::Shape {
                op: "cross_forward",
                lhs: t.x.shape(),
                rhs: i.x.shape(),
            });
        }
    }
    let sequences = text.or(image).map_or(0, |s| s.sequences());
    let both = text.is_some() && image.is_some();
    let mut traces = vec![ExchangeTrace::default(); if both { sequences } else { 0 }];
    let (mut t, mut i) = (text, image);
    let mut text_maps = Vec::new();
    let mut image_maps = Vec::new();

    for (li, w) in layers.iter().enumerate() {
        let layer = li + 1;
        let attend = |s: Option<StreamBatch<'t>>,
                      rng: &mut Rng|
         -> Result<Option<(StreamBatch<'t>, Vec<AttentionMap>)>> {
            s.map(|s| {
                nn::multi_head_attention(s.x, &w.attention, s.block, dropout_rate, training, rng)
                    .map(|(x, maps)| (StreamBatch { x, block: s.block }, maps))
            })
            .transpose()
        };
        let t_att = attend(t, rng)?;
        let i_att = attend(i, rng)?;
        let (mut t_mid, t_maps) = t_att.map_or((None, Vec::new()), |(s, m)| (Some(s), m));
        let (mut i_mid, i_maps) = i_att.map_or((None, Vec::new()), |(s, m)| (Some(s), m));

        if let (Some(ts), Some(is)) = (t_mid, i_mid) {
            if cfg.exchanges_at(layer) {
                let mut sel_t = Vec::with_capacity(sequences);
                let mut sel_i = Vec::with_capacity(sequences);
                for (b, trace) in traces.iter_mut().enumerate() {
                    let ts_scores = cls_attention_scores(&t_maps[b]);
                    let is_scores = cls_attention_scores(&i_maps[b]);
                    let st = select_exchange_tokens(&ts_scores, cfg.theta);
                    let si = select_exchange_tokens(&is_scores, cfg.theta);
                    trace.layers.push(ExchangeLayerTrace {
                        layer,
                        text_selected: st.clone(),
                        image_selected: si.clone(),
                        text_cls_scores: ts_scores,
                        image_cls_scores: is_scores,
                    });
                    sel_t.push(st);
                    sel_i.push(si);
                }
                // Selections are routing decisions only; an empty exchange is
                // skipped so the tape matches a regular layer exactly.
                if sel_t.iter().chain(&sel_i).any(|s| !s.is_empty()) {
                    let t_new = ts.x.exchange_into(is.x, &sel_t, ts.block, is.block)?;
                    let i_new = is.x.exchange_into(ts.x, &sel_i, is.block, ts.block)?;
                    t_mid = Some(StreamBatch {
                        x: t_new,
                        block: ts.block,
                    });
                    i_mid = Some(StreamBatch {
                        x: i_new,
                        block: is.block,
                    });
                }
            }
        }

        let ffn = |s: Option<StreamBatch<'t>>, rng: &mut Rng| -> Result<Option<StreamBatch<'t>>> {
            s.map(|s| {
                nn::ffn_block(s.x, &w.ffn, dropout_rate, training, rng)
                    .map(|x| StreamBatch { x, block: s.block })
            })
            .transpose()
        };
        t = ffn(t_mid, rng)?;
        i = ffn(i_mid, rng)?;
        text_maps.push(t_maps);
        image_maps.push(i_maps);
    }

    Ok(CrossOutput {
        text: t,
        image: i,
        traces,
        text_maps,
        image_maps,
    })
}

/// Single-pair form: both streams are one sequence each (cls included).
pub fn cross_forward<'t>(
    text: Var<'t>,
    image: Var<'t>,
    layers: &[EncoderLayerWeights<'t>],
    cfg: &ExchangeConfig,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var<'t>, Var<'t>, ExchangeTrace)> {
    let out = cross_forward_batched(
        Some(StreamBatch {
            x: text,
            block: text.rows(),
        }),
        Some(StreamBatch {
            x: image,
            block: image.rows(),
        }),
        layers,
        cfg,
        dropout_rate,
        training,
        rng,
    )?;
    let trace = out.traces.into_iter().next().unwrap_or_default();
    Ok((
        out.text.expect("text").x,
        out.image.expect("image").x,
        trace,
    ))
}

/// Repeats each image sequence's cls row `text_block` times so the image
/// stream lines up row-for-row with the text stream.
pub fn align_image_rows<'t>(image: StreamBatch<'t>, text_block: usize) -> Result<Var<'t>> {
    let idx: Vec<usize> = (0..image.sequences())
        .flat_map(|b| std::iter::repeat_n(b * image.block, text_block))
        .collect();
    image.x.gather_rows(&idx)
}

/// Row-wise concatenation of the two streams followed by one affine map
/// `W_f: 2d×d`.
pub fn fuse_outputs<'t>(
    t_out: Var<'t>,
    i_out: Var<'t>,
    w_f: Var<'t>,
    b_f: Var<'t>,
) -> Result<Var<'t>> {
    if t_out.rows() != i_out.rows() {
        return Err(MuseError::Shape {
            op: "fuse_outputs",
            lhs: t_out.shape(),
            rhs: i_out.shape(),
        });
    }
    t_out.concat_cols(i_out)?.affine(w_f, b_f)
}
