//! Network building blocks: embeddings, multi-head self-attention, the
//! feed-forward sub-layer, dropout and Kaiming initialization.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{MuseError, Result};
use crate::tensor::{Tensor, Var, LAYER_NORM_EPS};
use crate::Rng;

pub fn kaiming_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(MuseError::config("fan_in", "must be at least 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn normal_init(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(std.is_finite() && std > 0.0) {
        return Err(MuseError::config(
            "init std",
            format!("{std} is not positive"),
        ));
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    let numel = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| normal.sample(rng)).collect(),
    )
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(MuseError::config(
            "dropout",
            format!("rate {rate} outside [0, 1)"),
        ));
    }
    Ok(())
}

fn draw_mask(numel: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect()
}

/// Inverted dropout on a plain tensor. Eval mode (or rate 0) returns `x` as is.
pub fn dropout_mask(x: Tensor, rate: f64, training: bool, rng: &mut Rng) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mask = draw_mask(x.numel(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Inverted dropout recorded on the tape.
pub fn dropout<'t>(x: Var<'t>, rate: f64, training: bool, rng: &mut Rng) -> Result<Var<'t>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let mask = draw_mask(shape.iter().product(), rate, rng);
    let mask = x.tape().constant(Tensor::new(shape, mask)?);
    x.mul(mask)
}

pub fn embedding_lookup<'t>(ids: &[usize], table: Var<'t>) -> Result<Var<'t>> {
    let vocab = table.rows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(MuseError::Index {
            what: "embedding table",
            index: bad,
            bound: vocab,
        });
    }
    table.gather_rows(ids)
}

/// Projections for one multi-head self-attention sub-layer, plus the
/// layer norm closing it. Each of `wq`, `wk`, `wv` is `d×d`; head `h` uses
/// columns `h·d_h..(h+1)·d_h`, which is the same as `h` separate `d×d_h`
/// projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub bq: Var<'t>,
    pub wk: Var<'t>,
    pub bk: Var<'t>,
    pub wv: Var<'t>,
    pub bv: Var<'t>,
    pub wo: Var<'t>,
    pub bo: Var<'t>,
    pub ln_gamma: Var<'t>,
    pub ln_beta: Var<'t>,
    pub heads: usize,
}

/// Attention scores of one sequence: one row-stochastic matrix per head plus
/// their elementwise mean.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub per_head: Vec<Tensor>,
    pub averaged: Tensor,
}

impl AttentionMap {
    pub fn from_heads(per_head: Vec<Tensor>) -> Result<Self> {
        let first = per_head
            .first()
            .ok_or_else(|| MuseError::contract("attention map needs a head"))?;
        let mut avg = Tensor::zeros(first.shape());
        for h in &per_head {
            avg = avg.add(h)?;
        }
        let averaged = avg.scale(1.0 / per_head.len() as f64);
        Ok(AttentionMap { per_head, averaged })
    }

    /// Splits probabilities laid out `[block][head][row][col]` into maps.
    pub fn split(probs: &[f64], heads: usize, block: usize) -> Vec<AttentionMap> {
        probs
            .chunks(heads * block * block)
            .map(|chunk| {
                let per_head = chunk
                    .chunks(block * block)
                    .map(|h| Tensor::new(vec![block, block], h.to_vec()).expect("square head map"))
                    .collect();
                AttentionMap::from_heads(per_head).expect("at least one head")
            })
            .collect()
    }
}

/// Multi-head self-attention over consecutive `block`-row sequences stacked
/// in `x`, followed by dropout, the residual add and layer norm.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    w: &AttentionWeights<'t>,
    block: usize,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var<'t>, Vec<AttentionMap>)> {
    let d = x.cols();
    if w.heads == 0 || !d.is_multiple_of(w.heads) {
        return Err(MuseError::config(
            "heads",
            format!("dimension {d} not divisible by {} heads", w.heads),
        ));
    }
    let q = x.affine(w.wq, w.bq)?;
    let k = x.affine(w.wk, w.bk)?;
    let v = x.affine(w.wv, w.bv)?;
    let attended = q.attention(k, v, w.heads, block)?;
    let (probs, heads, block) = attended.attention_probs().expect("attention node");
    let maps = AttentionMap::split(&probs, heads, block);
    let projected = attended.affine(w.wo, w.bo)?;
    let projected = dropout(projected, dropout_rate, training, rng)?;
    let y = x
        .add(projected)?
        .layer_norm(w.ln_gamma, w.ln_beta, LAYER_NORM_EPS)?;
    Ok((y, maps))
}

/// `W1: d×hidden`, `W2: hidden×d`.
#[derive(Clone, Copy, Debug)]
pub struct FfnWeights<'t> {
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub ln_gamma: Var<'t>,
    pub ln_beta: Var<'t>,
}

/// `layer_norm(x + dropout(GELU(x·W1 + b1)·W2 + b2))`
pub fn ffn_block<'t>(
    x: Var<'t>,
    w: &FfnWeights<'t>,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let inner = x.affine(w.w1, w.b1)?.gelu().affine(w.w2, w.b2)?;
    let inner = dropout(inner, dropout_rate, training, rng)?;
    x.add(inner)?
        .layer_norm(w.ln_gamma, w.ln_beta, LAYER_NORM_EPS)
}

/// One regular post-norm encoder layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerWeights<'t> {
    pub attention: AttentionWeights<'t>,
    pub ffn: FfnWeights<'t>,
}

pub fn encoder_layer<'t>(
    x: Var<'t>,
    w: &EncoderLayerWeights<'t>,
    block: usize,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<(Var<'t>, Vec<AttentionMap>)> {
    let (h, maps) = multi_head_attention(x, &w.attention, block, dropout_rate, training, rng)?;
    Ok((ffn_block(h, &w.ffn, dropout_rate, training, rng)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape};
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    pub(crate) fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
        let t = kaiming_init(shape, 2, &mut rng(seed)).unwrap();
        t.scale(scale)
    }

    fn attention_weights<'t>(
        tape: &'t Tape,
        d: usize,
        heads: usize,
        seed: u64,
    ) -> AttentionWeights<'t> {
        let p = |s: u64| tape.leaf(&random(&[d, d], seed + s, 0.5));
        let z = || tape.leaf(&Tensor::zeros(&[d]));
        AttentionWeights {
            wq: p(1),
            bq: z(),
            wk: p(2),
            bk: z(),
            wv: p(3),
            bv: z(),
            wo: p(4),
            bo: z(),
            ln_gamma: tape.leaf(&Tensor::filled(&[d], 1.0)),
            ln_beta: z(),
            heads,
        }
    }

    #[test]
    fn kaiming_is_deterministic_and_scaled() {
        let a = kaiming_init(&[3, 4], 5, &mut rng(11)).unwrap();
        let b = kaiming_init(&[3, 4], 5, &mut rng(11)).unwrap();
        assert_eq!(a, b);

        let t = kaiming_init(&[100_000], 2, &mut rng(3)).unwrap();
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
        assert!(kaiming_init(&[2], 0, &mut rng(1)).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let x = random(&[4, 5], 1, 1.0);
        assert_eq!(dropout_mask(x.clone(), 0.0, true, &mut rng(0)).unwrap(), x);
        let y = dropout_mask(x.clone(), 0.4, false, &mut rng(0)).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y), bits(&x));
        assert!(dropout_mask(x, 1.0, true, &mut rng(0)).is_err());
    }

    #[test]
    fn dropout_monte_carlo() {
        let x = Tensor::filled(&[100_000], 1.0);
        let y = dropout_mask(x, 0.5, true, &mut rng(9)).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((kept - 0.5).abs() < 0.01, "kept {kept}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn embedding_lookup_rows_and_gradients() {
        let tape = Tape::new();
        let table = tape.leaf(&Tensor::identity(4).with_grad());
        let rows = embedding_lookup(&[2, 0, 2], table).unwrap();
        assert_eq!(rows.value().row(0), &[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rows.value().row(1), &[1.0, 0.0, 0.0, 0.0]);
        let g = tape.backward(rows.sum()).unwrap().wrt(table);
        assert_eq!(g.row(2), &[2.0; 4]);
        assert_eq!(g.row(1), &[0.0; 4]);
        assert!(matches!(
            embedding_lookup(&[4], table),
            Err(MuseError::Index {
                index: 4,
                bound: 4,
                ..
            })
        ));
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        let tape = Tape::new();
        let d = 4;
        let x = tape.leaf(&random(&[3, d], 5, 1.0));
        let v = tape.leaf(&random(&[d, d], 6, 1.0));
        let zero = tape.leaf(&Tensor::zeros(&[d, d]));
        let q = x.matmul(zero).unwrap();
        let vals = x.matmul(v).unwrap();
        let out = q.attention(q, vals, 1, 3).unwrap();
        let vv = vals.value();
        for c in 0..d {
            let mean = (vv.get(0, c) + vv.get(1, c) + vv.get(2, c)) / 3.0;
            for r in 0..3 {
                assert!((out.value().get(r, c) - mean).abs() < 1e-12);
            }
        }
        let (probs, _, _) = out.attention_probs().unwrap();
        assert!(probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn two_token_hand_attention() {
        // One 1-dim head, Q = K = V = identity, inputs [1] and [0]:
        // row 0 scores are [1·1, 1·0] / √1, so softmax gives [e/(e+1), 1/(e+1)].
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let out = x.attention(x, x, 1, 2).unwrap();
        let (probs, _, _) = out.attention_probs().unwrap();
        let e = std::f64::consts::E;
        assert!((probs[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((probs[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let tape = Tape::new();
        let row = vec![0.3, -0.2, 0.9, 0.1];
        let x = tape.leaf(&Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap());
        let w = attention_weights(&tape, 4, 2, 20);
        let (y, maps) = multi_head_attention(x, &w, 3, 0.0, false, &mut rng(0)).unwrap();
        let y = y.value();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(y.row(1), y.row(2));
        assert_eq!(maps.len(), 1);
        assert_eq!(maps[0].per_head.len(), 2);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let tape = Tape::new();
        let x = tape.leaf(&random(&[2 * 5, 8], 7, 3.0));
        let w = attention_weights(&tape, 8, 4, 30);
        let (_, maps) = multi_head_attention(x, &w, 5, 0.0, false, &mut rng(0)).unwrap();
        assert_eq!(maps.len(), 2);
        for m in &maps {
            for h in m.per_head.iter().chain(std::iter::once(&m.averaged)) {
                for r in 0..5 {
                    assert!((h.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_dimension() {
        let tape = Tape::new();
        let x = tape.leaf(&random(&[3, 6], 7, 1.0));
        let w = attention_weights(&tape, 6, 4, 30);
        assert!(matches!(
            multi_head_attention(x, &w, 3, 0.0, false, &mut rng(0)),
            Err(MuseError::Config { .. })
        ));
    }

    fn ffn<'t>(tape: &'t Tape, d: usize, hidden: usize, zero: bool) -> FfnWeights<'t> {
        let w = |shape: &[usize], s| {
            if zero {
                tape.leaf(&Tensor::zeros(shape))
            } else {
                tape.leaf(&random(shape, s, 0.5))
            }
        };
        FfnWeights {
            w1: w(&[d, hidden], 1),
            b1: tape.leaf(&random(&[hidden], 2, 0.1)),
            w2: w(&[hidden, d], 3),
            b2: tape.leaf(&Tensor::zeros(&[d])),
            ln_gamma: tape.leaf(&Tensor::filled(&[d], 1.0)),
            ln_beta: tape.leaf(&Tensor::zeros(&[d])),
        }
    }

    #[test]
    fn ffn_with_zero_weights_is_layer_norm() {
        let tape = Tape::new();
        let xv = random(&[3, 4], 8, 1.0);
        let x = tape.leaf(&xv);
        let w = ffn(&tape, 4, 16, true);
        let y = ffn_block(x, &w, 0.0, false, &mut rng(0)).unwrap();
        let expect = xv
            .layer_norm(
                &Tensor::filled(&[4], 1.0),
                &Tensor::zeros(&[4]),
                LAYER_NORM_EPS,
            )
            .unwrap();
        assert!(y.value().max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn ffn_preserves_shape_and_gradients() {
        for hidden in [1, 3, 16] {
            let tape = Tape::new();
            let x = tape.leaf(&random(&[5, 4], 8, 1.0));
            let y = ffn_block(x, &ffn(&tape, 4, hidden, false), 0.0, false, &mut rng(0)).unwrap();
            assert_eq!(y.shape(), vec![5, 4]);
        }
        let err = grad_check(
            |x| {
                let tape = x.tape();
                let w = ffn(tape, 4, 6, false);
                let weights = tape.constant(random(&[5, 4], 99, 1.0));
                ffn_block(x, &w, 0.0, false, &mut rng(0))?
                    .mul(weights)
                    .map(|v| v.sum())
            },
            &random(&[5, 4], 8, 1.0),
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
