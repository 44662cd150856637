//! Toy modality encoders, noise injection, and the two regularizing decoders
//! (image captioning and text-to-image generation).

use rand_distr::{Distribution, Normal};

use crate::data::{Grid, GRID};
use crate::error::{MuseError, Result};
use crate::nn::{self, EncoderLayerWeights};
use crate::tensor::{Tensor, Var};
use crate::Rng;

pub const MAX_SEQ_LEN: usize = 64;
pub const PATCH: usize = 2;
pub const PATCHES: usize = (GRID / PATCH) * (GRID / PATCH);
pub const PATCH_DIM: usize = PATCH * PATCH;
pub const DEFAULT_Q_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug)]
pub struct TextEncoderWeights<'t> {
    pub embed: Var<'t>,
    pub pos: Var<'t>,
    pub layer: EncoderLayerWeights<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageEncoderWeights<'t> {
    /// `4×d`
    pub proj_w: Var<'t>,
    pub proj_b: Var<'t>,
    /// `16×d`
    pub pos: Var<'t>,
}

/// One-hidden-layer MLP, `d → d → d`.
#[derive(Clone, Copy, Debug)]
pub struct MlpWeights<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

impl<'t> MlpWeights<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.affine(self.w1, self.b1)?.gelu().affine(self.w2, self.b2)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CaptionDecoderWeights<'t> {
    /// `(V+1)×d`; the last row is begin-of-sequence.
    pub embed: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    /// `d×V`
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageDecoderWeights<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    /// `d×(64·q_levels)`
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    pub std_text: f64,
    pub std_image: f64,
    pub enabled: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            std_text: 1.0,
            std_image: 1.0,
            enabled: true,
        }
    }
}

/// Truncates sequences longer than [`MAX_SEQ_LEN`], logging a warning.
pub fn clip_tokens(tokens: &[usize]) -> &[usize] {
    if tokens.len() > MAX_SEQ_LEN {
        log::warn!(
            "truncating {}-token sequence to {MAX_SEQ_LEN}",
            tokens.len()
        );
        &tokens[..MAX_SEQ_LEN]
    } else {
        tokens
    }
}

/// Embedding lookup plus learned positions, then one regular encoder layer.
/// All sequences in the batch must share a length.
pub fn encode_text<'t>(
    batch: &[&[usize]],
    w: &TextEncoderWeights<'t>,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let clipped: Vec<&[usize]> = batch.iter().map(|t| clip_tokens(t)).collect();
    let n = clipped.first().map_or(0, |t| t.len());
    if n == 0 || clipped.iter().any(|t| t.len() != n) {
        return Err(MuseError::Input(
            "text batch needs equal, non-zero lengths".into(),
        ));
    }
    let ids: Vec<usize> = clipped.iter().flat_map(|t| t.iter().copied()).collect();
    let positions: Vec<usize> = (0..clipped.len()).flat_map(|_| 0..n).collect();
    let x = nn::embedding_lookup(&ids, w.embed)?.add(w.pos.gather_rows(&positions)?)?;
    Ok(nn::encoder_layer(x, &w.layer, n, dropout_rate, training, rng)?.0)
}

/// Splits a grid into 16 non-overlapping 2×2 patches, row-major over the
/// patch grid, each flattened row-major.
pub fn patchify(grid: &Grid) -> Result<Tensor> {
    if let Some(bad) = grid.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MuseError::Input(format!(
            "pixel value {bad} outside [0, 1]"
        )));
    }
    let per_side = GRID / PATCH;
    let mut data = Vec::with_capacity(PATCHES * PATCH_DIM);
    for pr in 0..per_side {
        for pc in 0..per_side {
            for dr in 0..PATCH {
                for dc in 0..PATCH {
                    data.push(grid[pr * PATCH + dr][pc * PATCH + dc]);
                }
            }
        }
    }
    Tensor::new(vec![PATCHES, PATCH_DIM], data)
}

/// Patch projection plus learned positions: `16×d` per grid.
pub fn encode_image<'t>(grids: &[&Grid], w: &ImageEncoderWeights<'t>) -> Result<Var<'t>> {
    let tape = w.proj_w.tape();
    let mut data = Vec::with_capacity(grids.len() * PATCHES * PATCH_DIM);
    for g in grids {
        data.extend_from_slice(patchify(g)?.data());
    }
    let patches = tape.constant(Tensor::new(vec![grids.len() * PATCHES, PATCH_DIM], data)?);
    let positions: Vec<usize> = (0..grids.len()).flat_map(|_| 0..PATCHES).collect();
    patches
        .affine(w.proj_w, w.proj_b)?
        .add(w.pos.gather_rows(&positions)?)
}

/// `MLP(E + N(0, std²))` while training with noise enabled, else `MLP(E)`.
pub fn inject_noise<'t>(
    e: Var<'t>,
    std: f64,
    enabled: bool,
    mlp: &MlpWeights<'t>,
    rng: &mut Rng,
    training: bool,
) -> Result<Var<'t>> {
    if std < 0.0 {
        return Err(MuseError::config("noise std", "must be non-negative"));
    }
    let input = if training && enabled && std > 0.0 {
        let shape = e.shape();
        let normal = Normal::new(0.0, std).expect("valid std");
        let noise: Vec<f64> = (0..shape.iter().product())
            .map(|_| normal.sample(rng))
            .collect();
        e.add(e.tape().constant(Tensor::new(shape, noise)?))?
    } else {
        e
    };
    mlp.forward(input)
}

/// Class of a pixel value under `q_levels` uniform bins; 1.0 lands in the top bin.
pub fn quantize(v: f64, q_levels: usize) -> usize {
    ((v * q_levels as f64).floor() as usize).min(q_levels - 1)
}

/// Teacher-forced caption predictor: step `t` sees the mean of the
/// sequence's image rows plus the embedding of token `t-1` (BOS at `t=0`).
/// Returns per-step logits `(B·n)×V` and the mean cross-entropy.
pub fn decode_text_captioning<'t>(
    image_rows: Var<'t>,
    block: usize,
    targets: &[&[usize]],
    w: &CaptionDecoderWeights<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let pooled = image_rows.block_mean(block, 0)?;
    let bos = w.embed.rows() - 1;
    let n = targets.first().map_or(0, |t| t.len());
    if targets.iter().any(|t| t.len() != n) || pooled.rows() != targets.len() {
        return Err(MuseError::contract(
            "caption targets must be one equal-length sequence per image",
        ));
    }
    let mut prev = Vec::with_capacity(targets.len() * n);
    let mut which = Vec::with_capacity(targets.len() * n);
    let mut flat = Vec::with_capacity(targets.len() * n);
    for (b, t) in targets.iter().enumerate() {
        for s in 0..n {
            prev.push(if s == 0 { bos } else { t[s - 1] });
            which.push(b);
            flat.push(t[s]);
        }
    }
    let h = pooled
        .gather_rows(&which)?
        .add(nn::embedding_lookup(&prev, w.embed)?)?;
    let logits = h.affine(w.w1, w.b1)?.gelu().affine(w.w2, w.b2)?;
    let loss = logits.cross_entropy(&flat, None)?;
    Ok((logits, loss))
}

/// Predicts each of the 64 cells' quantized intensity from the mean of the
/// sequence's text rows. Returns `(B·64)×q_levels` logits and the mean
/// per-cell cross-entropy.
pub fn decode_image_generation<'t>(
    text_rows: Var<'t>,
    block: usize,
    targets: &[&Grid],
    w: &ImageDecoderWeights<'t>,
    q_levels: usize,
) -> Result<(Var<'t>, Var<'t>)> {
    let pooled = text_rows.block_mean(block, 0)?;
    if pooled.rows() != targets.len() {
        return Err(MuseError::contract("one target grid per text sequence"));
    }
    let cells = GRID * GRID;
    let logits = pooled
        .affine(w.w1, w.b1)?
        .gelu()
        .affine(w.w2, w.b2)?
        .reshape(&[targets.len() * cells, q_levels])?;
    let mut classes = Vec::with_capacity(targets.len() * cells);
    for g in targets {
        if let Some(bad) = g.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MuseError::Input(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        classes.extend(g.iter().flatten().map(|&v| quantize(v, q_levels)));
    }
    let loss = logits.cross_entropy(&classes, None)?;
    Ok((logits, loss))
}
