//! Finite-difference checks of every differentiable op.

use rand::SeedableRng;

use crate::error::Result;
use crate::heads::crf_nll;
use crate::nn::{self, kaiming_init};
use crate::tensor::{grad_check_vars, Tensor, Var};
use crate::Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random(shape: &[usize], seed: u64) -> Tensor {
    kaiming_init(shape, 2, &mut Rng::seed_from_u64(seed)).expect("valid shape")
}

/// Projects `v` onto fixed random weights so every output coordinate
/// contributes to the scalar being checked.
fn probe<'t>(v: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = v.tape().constant(random(&v.shape(), 1000 + seed));
    Ok(v.mul(w)?.sum())
}

type Check = (&'static str, Box<dyn Fn(f64) -> Result<f64>>);

fn check<F>(inputs: Vec<Tensor>, f: F, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    grad_check_vars(f, &inputs, h)
}

fn suite() -> Vec<Check> {
    vec![
        (
            "matmul",
            Box::new(|h| {
                check(
                    vec![random(&[3, 4], 1), random(&[4, 2], 2)],
                    |v| probe(v[0].matmul(v[1])?, 0),
                    h,
                )
            }),
        ),
        (
            "add",
            Box::new(|h| {
                check(
                    vec![random(&[3, 4], 3), random(&[3, 4], 4)],
                    |v| probe(v[0].add(v[1])?, 1),
                    h,
                )
            }),
        ),
        (
            "mul",
            Box::new(|h| {
                check(
                    vec![random(&[3, 4], 5), random(&[3, 4], 6)],
                    |v| probe(v[0].mul(v[1])?, 2),
                    h,
                )
            }),
        ),
        (
            "add_row",
            Box::new(|h| {
                check(
                    vec![random(&[3, 4], 7), random(&[4], 8)],
                    |v| probe(v[0].add_row(v[1])?, 3),
                    h,
                )
            }),
        ),
        (
            "scale",
            Box::new(|h| check(vec![random(&[2, 3], 9)], |v| probe(v[0].scale(-1.7), 4), h)),
        ),
        (
            "gelu",
            Box::new(|h| check(vec![random(&[3, 5], 10)], |v| probe(v[0].gelu(), 5), h)),
        ),
        (
            "softmax_rows",
            Box::new(|h| {
                check(
                    vec![random(&[3, 5], 11)],
                    |v| probe(v[0].softmax_rows(), 6),
                    h,
                )
            }),
        ),
        (
            "layer_norm",
            Box::new(|h| {
                check(
                    vec![random(&[3, 6], 12), random(&[6], 13), random(&[6], 14)],
                    |v| {
                        probe(
                            v[0].layer_norm(v[1], v[2], crate::tensor::LAYER_NORM_EPS)?,
                            7,
                        )
                    },
                    h,
                )
            }),
        ),
        (
            "sum",
            Box::new(|h| check(vec![random(&[3, 4], 15)], |v| Ok(v[0].mul(v[0])?.sum()), h)),
        ),
        (
            "mean",
            Box::new(|h| check(vec![random(&[3, 4], 16)], |v| Ok(v[0].mul(v[0])?.mean()), h)),
        ),
        (
            "gather_rows",
            Box::new(|h| {
                check(
                    vec![random(&[4, 3], 17)],
                    |v| probe(v[0].gather_rows(&[2, 0, 2, 3])?, 8),
                    h,
                )
            }),
        ),
        (
            "embedding",
            Box::new(|h| {
                check(
                    vec![random(&[6, 3], 18)],
                    |v| probe(nn::embedding_lookup(&[5, 1, 1], v[0])?, 9),
                    h,
                )
            }),
        ),
        (
            "concat_cols",
            Box::new(|h| {
                check(
                    vec![random(&[3, 2], 19), random(&[3, 4], 20)],
                    |v| probe(v[0].concat_cols(v[1])?, 10),
                    h,
                )
            }),
        ),
        (
            "concat_rows",
            Box::new(|h| {
                check(
                    vec![random(&[2, 3], 21), random(&[4, 3], 22)],
                    |v| probe(v[0].concat_rows(v[1])?, 11),
                    h,
                )
            }),
        ),
        (
            "reshape",
            Box::new(|h| {
                check(
                    vec![random(&[4, 3], 23)],
                    |v| probe(v[0].reshape(&[2, 6])?, 12),
                    h,
                )
            }),
        ),
        (
            "block_mean",
            Box::new(|h| {
                check(
                    vec![random(&[6, 3], 24)],
                    |v| probe(v[0].block_mean(3, 1)?, 13),
                    h,
                )
            }),
        ),
        (
            "attention",
            Box::new(|h| {
                check(
                    vec![
                        random(&[6, 4], 25),
                        random(&[6, 4], 26),
                        random(&[6, 4], 27),
                    ],
                    |v| probe(v[0].attention(v[1], v[2], 2, 3)?, 14),
                    h,
                )
            }),
        ),
        (
            "exchange",
            Box::new(|h| {
                check(
                    vec![random(&[6, 3], 28), random(&[8, 3], 29)],
                    |v| probe(v[0].exchange_into(v[1], &[vec![1], vec![2, 1]], 3, 4)?, 15),
                    h,
                )
            }),
        ),
        (
            "dropout",
            Box::new(|h| {
                check(
                    vec![random(&[4, 4], 30)],
                    |v| {
                        probe(
                            nn::dropout(v[0], 0.5, true, &mut Rng::seed_from_u64(31))?,
                            16,
                        )
                    },
                    h,
                )
            }),
        ),
        (
            "cross_entropy",
            Box::new(|h| {
                check(
                    vec![random(&[4, 3], 32)],
                    |v| v[0].cross_entropy(&[2, 0, 1, 1], Some(&[true, true, false, true])),
                    h,
                )
            }),
        ),
        (
            "crf_nll",
            Box::new(|h| {
                check(
                    vec![
                        random(&[6, 3], 33),
                        random(&[3, 3], 34),
                        random(&[3], 35),
                        random(&[3], 36),
                    ],
                    |v| crf_nll(v[0], &[vec![0, 2, 1], vec![1, 1, 0]], v[1], v[2], v[3]),
                    h,
                )
            }),
        ),
    ]
}

/// Worst relative error for each op, in a fixed order.
pub fn op_grad_checks(h: f64) -> Result<Vec<(&'static str, f64)>> {
    suite()
        .into_iter()
        .map(|(name, f)| Ok((name, f(h)?)))
        .collect()
}
