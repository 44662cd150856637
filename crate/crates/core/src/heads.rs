//! Task heads: a linear-chain CRF over fused token rows and a linear
//! classifier over the fused cls row.

use crate::error::{MuseError, Result};
use crate::nn;
use crate::tensor::kernels::log_sum_exp;
use crate::tensor::{Tape, Tensor, Var};
use crate::Rng;

/// Learning rate the CRF parameters default to, separate from the global one.
pub const DEFAULT_CRF_LR: f64 = 1e-4;
/// Dropout applied to the fused rows feeding either head.
pub const DEFAULT_HEAD_DROPOUT: f64 = 0.5;

/// `transitions[i][j]` scores label `j` following label `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub transitions: Tensor,
    pub start_scores: Tensor,
    pub end_scores: Tensor,
}

impl CrfParams {
    pub fn zeros(labels: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(&[labels, labels]),
            start_scores: Tensor::zeros(&[labels]),
            end_scores: Tensor::zeros(&[labels]),
        }
    }

    pub fn labels(&self) -> usize {
        self.start_scores.numel()
    }

    fn check(&self, emissions: &Tensor) -> Result<usize> {
        let l = self.labels();
        if self.transitions.shape() != [l, l]
            || self.end_scores.numel() != l
            || emissions.cols() != l
        {
            return Err(MuseError::Shape {
                op: "crf",
                lhs: emissions.shape().to_vec(),
                rhs: self.transitions.shape().to_vec(),
            });
        }
        Ok(l)
    }

    /// Unnormalized score of one label path.
    pub fn path_score(&self, emissions: &Tensor, path: &[usize]) -> f64 {
        let l = self.labels();
        let tr = self.transitions.data();
        let mut s =
            self.start_scores.data()[path[0]] + self.end_scores.data()[path[path.len() - 1]];
        for (t, &y) in path.iter().enumerate() {
            s += emissions.get(t, y);
            if t > 0 {
                s += tr[path[t - 1] * l + y];
            }
        }
        s
    }
}

struct ChainPosteriors {
    log_z: f64,
    /// `n×L` unary marginals.
    unary: Vec<f64>,
    /// `L×L` pairwise marginals summed over positions.
    pairwise: Vec<f64>,
}

/// Forward-backward in log space for one chain.
fn chain_posteriors(
    e: &[f64],
    n: usize,
    l: usize,
    tr: &[f64],
    start: &[f64],
    end: &[f64],
) -> ChainPosteriors {
    let mut alpha = vec![0.0; n * l];
    for j in 0..l {
        alpha[j] = start[j] + e[j];
    }
    let mut buf = vec![0.0; l];
    for t in 1..n {
        for j in 0..l {
            for i in 0..l {
                buf[i] = alpha[(t - 1) * l + i] + tr[i * l + j];
            }
            alpha[t * l + j] = log_sum_exp(&buf) + e[t * l + j];
        }
    }
    let mut beta = vec![0.0; n * l];
    beta[(n - 1) * l..].copy_from_slice(end);
    for t in (0..n - 1).rev() {
        for i in 0..l {
            for j in 0..l {
                buf[j] = tr[i * l + j] + e[(t + 1) * l + j] + beta[(t + 1) * l + j];
            }
            beta[t * l + i] = log_sum_exp(&buf);
        }
    }
    for j in 0..l {
        buf[j] = alpha[(n - 1) * l + j] + end[j];
    }
    let log_z = log_sum_exp(&buf);

    let unary = (0..n * l)
        .map(|k| (alpha[k] + beta[k] - log_z).exp())
        .collect();
    let mut pairwise = vec![0.0; l * l];
    for t in 0..n - 1 {
        for i in 0..l {
            for j in 0..l {
                pairwise[i * l + j] +=
                    (alpha[t * l + i] + tr[i * l + j] + e[(t + 1) * l + j] + beta[(t + 1) * l + j]
                        - log_z)
                        .exp();
            }
        }
    }
    ChainPosteriors {
        log_z,
        unary,
        pairwise,
    }
}

/// Log partition function of one chain via the forward algorithm.
pub fn crf_log_partition(emissions: &Tensor, crf: &CrfParams) -> Result<f64> {
    let l = crf.check(emissions)?;
    let n = emissions.rows();
    if n == 0 {
        return Err(MuseError::contract("crf needs at least one position"));
    }
    Ok(chain_posteriors(
        emissions.data(),
        n,
        l,
        crf.transitions.data(),
        crf.start_scores.data(),
        crf.end_scores.data(),
    )
    .log_z)
}

/// Negative log-likelihood `log Z − score(labels)` for one sequence.
pub fn crf_log_likelihood(emissions: &Tensor, labels: &[usize], crf: &CrfParams) -> Result<f64> {
    let tape = Tape::new();
    let loss = crf_nll(
        tape.leaf(emissions),
        &[labels.to_vec()],
        tape.leaf(&crf.transitions),
        tape.leaf(&crf.start_scores),
        tape.leaf(&crf.end_scores),
    )?;
    Ok(loss.item())
}

/// Taped CRF loss over stacked sequences of equal length; `emissions` holds
/// `labels.len()` chains of `labels[0].len()` rows. Returns the mean NLL.
pub fn crf_nll<'t>(
    emissions: Var<'t>,
    labels: &[Vec<usize>],
    transitions: Var<'t>,
    start: Var<'t>,
    end: Var<'t>,
) -> Result<Var<'t>> {
    let tape = emissions.tape();
    let (loss, d_e, d_tr, d_start, d_end) = {
        let e = emissions.value();
        let tr = transitions.value();
        let st = start.value();
        let en = end.value();
        let l = e.cols();
        if tr.shape() != [l, l] || st.numel() != l || en.numel() != l {
            return Err(MuseError::Shape {
                op: "crf_nll",
                lhs: e.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let seqs = labels.len();
        let n = labels.first().map_or(0, |s| s.len());
        if seqs == 0 || n == 0 || labels.iter().any(|s| s.len() != n) || e.rows() != seqs * n {
            return Err(MuseError::contract(format!(
                "crf_nll: {} emission rows do not match {} label sequences",
                e.rows(),
                seqs
            )));
        }
        if let Some(&bad) = labels.iter().flatten().find(|&&y| y >= l) {
            return Err(MuseError::Index {
                what: "crf label",
                index: bad,
                bound: l,
            });
        }
        let w = 1.0 / seqs as f64;
        let mut loss = 0.0;
        let mut d_e = vec![0.0; e.numel()];
        let mut d_tr = vec![0.0; l * l];
        let mut d_start = vec![0.0; l];
        let mut d_end = vec![0.0; l];
        for (s, ys) in labels.iter().enumerate() {
            let es = &e.data()[s * n * l..(s + 1) * n * l];
            let post = chain_posteriors(es, n, l, tr.data(), st.data(), en.data());
            let mut gold = st.data()[ys[0]] + en.data()[ys[n - 1]];
            for t in 0..n {
                gold += es[t * l + ys[t]];
                if t > 0 {
                    gold += tr.data()[ys[t - 1] * l + ys[t]];
                }
            }
            loss += w * (post.log_z - gold);

            let de = &mut d_e[s * n * l..(s + 1) * n * l];
            for (k, p) in post.unary.iter().enumerate() {
                de[k] = w * p;
            }
            for t in 0..n {
                de[t * l + ys[t]] -= w;
            }
            for (k, p) in post.pairwise.iter().enumerate() {
                d_tr[k] += w * p;
            }
            for t in 1..n {
                d_tr[ys[t - 1] * l + ys[t]] -= w;
            }
            for j in 0..l {
                d_start[j] += w * post.unary[j];
                d_end[j] += w * post.unary[(n - 1) * l + j];
            }
            d_start[ys[0]] -= w;
            d_end[ys[n - 1]] -= w;
        }
        (loss, d_e, d_tr, d_start, d_end)
    };
    Ok(Var::fused_scalar(
        tape,
        "crf_nll",
        loss,
        vec![
            (emissions, d_e),
            (transitions, d_tr),
            (start, d_start),
            (end, d_end),
        ],
    ))
}

/// Highest-scoring label path. Ties resolve to the lower label id at every
/// backtracking step.
pub fn crf_viterbi_decode(emissions: &Tensor, crf: &CrfParams) -> Result<Vec<usize>> {
    let l = crf.check(emissions)?;
    let n = emissions.rows();
    if n == 0 {
        return Err(MuseError::contract("crf needs at least one position"));
    }
    let tr = crf.transitions.data();
    let mut delta: Vec<f64> = (0..l)
        .map(|j| crf.start_scores.data()[j] + emissions.get(0, j))
        .collect();
    let mut back = vec![0usize; n * l];
    for t in 1..n {
        let mut next = vec![0.0; l];
        for j in 0..l {
            let mut best = 0;
            let mut best_score = delta[0] + tr[j];
            for i in 1..l {
                let s = delta[i] + tr[i * l + j];
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            back[t * l + j] = best;
            next[j] = best_score + emissions.get(t, j);
        }
        delta = next;
    }
    let mut last = 0;
    let mut best_score = delta[0] + crf.end_scores.data()[0];
    for (j, d) in delta.iter().enumerate().skip(1) {
        let s = d + crf.end_scores.data()[j];
        if s > best_score {
            last = j;
            best_score = s;
        }
    }
    let mut path = vec![0; n];
    path[n - 1] = last;
    for t in (1..n).rev() {
        path[t - 1] = back[t * l + path[t]];
    }
    Ok(path)
}

/// Per-token emission scores from fused rows: drops each sequence's cls row,
/// applies dropout and one affine map to label space.
pub fn token_emissions<'t>(
    fused: Var<'t>,
    block: usize,
    w: Var<'t>,
    b: Var<'t>,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let seqs = fused.rows() / block;
    let idx: Vec<usize> = (0..seqs)
        .flat_map(|s| (1..block).map(move |j| s * block + j))
        .collect();
    let tokens = fused.gather_rows(&idx)?;
    nn::dropout(tokens, dropout_rate, training, rng)?.affine(w, b)
}

/// Sentiment logits from the cls row (row 0) of each fused sequence.
pub fn classify_sentiment<'t>(
    fused: Var<'t>,
    block: usize,
    w: Var<'t>,
    b: Var<'t>,
    dropout_rate: f64,
    training: bool,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    if w.cols() < 2 {
        return Err(MuseError::config(
            "classes",
            "classifier needs at least two classes",
        ));
    }
    let seqs = fused.rows() / block;
    let idx: Vec<usize> = (0..seqs).map(|s| s * block).collect();
    let cls = fused.gather_rows(&idx)?;
    nn::dropout(cls, dropout_rate, training, rng)?.affine(w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

/// BIO label inventory; label ids index `names`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    names: Vec<String>,
}

impl LabelScheme {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let scheme = LabelScheme { names };
        for name in &scheme.names {
            if let Some(kind) = name.strip_prefix("I-") {
                if !scheme
                    .names
                    .iter()
                    .any(|n| n.strip_prefix("B-") == Some(kind))
                {
                    return Err(MuseError::config(
                        "labels",
                        format!("{name} has no matching B-{kind}"),
                    ));
                }
            } else if name != "O" && !name.starts_with("B-") {
                return Err(MuseError::config(
                    "labels",
                    format!("{name} is not a BIO tag"),
                ));
            }
        }
        Ok(scheme)
    }

    /// `O, B-X, I-X, B-Y, I-Y`
    pub fn two_types() -> Self {
        LabelScheme::new(
            ["O", "B-X", "I-X", "B-Y", "I-Y"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("valid scheme")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tag(&self, id: usize) -> BioTag<'_> {
        let name = self.names[id].as_str();
        if let Some(kind) = name.strip_prefix("B-") {
            BioTag::Begin(kind)
        } else if let Some(kind) = name.strip_prefix("I-") {
            BioTag::Inside(kind)
        } else {
            BioTag::Outside
        }
    }

    /// Entity type of a label id, if it is part of an entity.
    pub fn entity_type(&self, id: usize) -> Option<&str> {
        match self.tag(id) {
            BioTag::Begin(k) | BioTag::Inside(k) => Some(k),
            BioTag::Outside => None,
        }
    }

    /// True when every `I-k` follows a `B-k` or `I-k`.
    pub fn is_valid_sequence(&self, labels: &[usize]) -> bool {
        let mut open: Option<&str> = None;
        for &y in labels {
            match self.tag(y) {
                BioTag::Outside => open = None,
                BioTag::Begin(k) => open = Some(k),
                BioTag::Inside(k) => {
                    if open != Some(k) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn random_crf(l: usize, rng: &mut Rng) -> CrfParams {
        let mut r = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
            )
            .unwrap()
        };
        CrfParams {
            transitions: r(&[l, l]),
            start_scores: r(&[l]),
            end_scores: r(&[l]),
        }
    }

    fn random_emissions(n: usize, l: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(
            vec![n, l],
            (0..n * l).map(|_| rng.random_range(-3.0..3.0)).collect(),
        )
        .unwrap()
    }

    fn all_paths(n: usize, l: usize) -> Vec<Vec<usize>> {
        let mut paths = vec![vec![]];
        for _ in 0..n {
            paths = paths
                .into_iter()
                .flat_map(|p| {
                    (0..l).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        paths
    }

    #[test]
    fn single_position_is_cross_entropy() {
        let mut rng = Rng::seed_from_u64(1);
        let crf = CrfParams {
            transitions: random_emissions(3, 3, &mut rng),
            ..random_crf(3, &mut rng)
        };
        let e = random_emissions(1, 3, &mut rng);
        let logits: Vec<f64> = (0..3)
            .map(|j| e.get(0, j) + crf.start_scores.data()[j] + crf.end_scores.data()[j])
            .collect();
        let ce = log_sum_exp(&logits) - logits[2];
        assert!((crf_log_likelihood(&e, &[2], &crf).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn zero_structure_factorizes() {
        let mut rng = Rng::seed_from_u64(2);
        let e = random_emissions(4, 3, &mut rng);
        let labels = [0, 2, 1, 1];
        let expected: f64 = (0..4)
            .map(|t| log_sum_exp(e.row(t)) - e.get(t, labels[t]))
            .sum();
        let got = crf_log_likelihood(&e, &labels, &CrfParams::zeros(3)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_enumeration_two_by_two() {
        let mut rng = Rng::seed_from_u64(3);
        let crf = random_crf(2, &mut rng);
        let e = random_emissions(2, 2, &mut rng);
        let scores: Vec<f64> = all_paths(2, 2)
            .iter()
            .map(|p| crf.path_score(&e, p))
            .collect();
        assert_eq!(scores.len(), 4);
        assert!((crf_log_partition(&e, &crf).unwrap() - log_sum_exp(&scores)).abs() < 1e-8);
    }

    #[test]
    fn viterbi_cases() {
        let mut rng = Rng::seed_from_u64(4);
        let e = random_emissions(5, 4, &mut rng);
        let mut crf = CrfParams::zeros(4);
        crf.start_scores = Tensor::vector(vec![0.1, -0.3, 0.2, 0.0]);
        let path = crf_viterbi_decode(&e, &crf).unwrap();
        for t in 0..5 {
            let scores: Vec<f64> = (0..4)
                .map(|j| {
                    e.get(t, j)
                        + if t == 0 {
                            crf.start_scores.data()[j]
                        } else {
                            0.0
                        }
                })
                .collect();
            let arg = (0..4).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
            assert_eq!(path[t], arg);
        }

        let e = random_emissions(3, 3, &mut rng);
        let crf = random_crf(3, &mut rng);
        let best = all_paths(3, 3)
            .into_iter()
            .map(|p| (crf.path_score(&e, &p), p))
            .fold(None::<(f64, Vec<usize>)>, |acc, (s, p)| match acc {
                Some((bs, bp)) if bs >= s => Some((bs, bp)),
                _ => Some((s, p)),
            })
            .unwrap();
        assert_eq!(crf_viterbi_decode(&e, &crf).unwrap(), best.1);

        let flat = Tensor::filled(&[4, 3], 0.7);
        assert_eq!(
            crf_viterbi_decode(&flat, &CrfParams::zeros(3)).unwrap(),
            vec![0; 4]
        );
    }

    #[test]
    fn label_errors() {
        let e = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            crf_log_likelihood(&e, &[0, 3], &CrfParams::zeros(3)),
            Err(MuseError::Index { index: 3, .. })
        ));
    }

    #[test]
    fn crf_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(5);
        let crf = random_crf(3, &mut rng);
        let e = random_emissions(4, 3, &mut rng);
        let labels = vec![vec![1, 2, 0, 1]];
        let err = crate::tensor::grad_check_vars(
            |v| crf_nll(v[0], &labels, v[1], v[2], v[3]),
            &[e, crf.transitions, crf.start_scores, crf.end_scores],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn classifier_reads_only_cls_row() {
        let mut rng = Rng::seed_from_u64(6);
        let tape = Tape::new();
        let fused = tape.leaf(&random_emissions(4, 3, &mut rng).with_grad());
        let w = tape.leaf(&random_emissions(3, 3, &mut rng));
        let b = tape.leaf(&Tensor::zeros(&[3]));
        let logits = classify_sentiment(fused, 4, w, b, 0.5, false, &mut rng).unwrap();
        let g = tape.backward(logits.sum()).unwrap().wrt(fused);
        assert!(g.row(0).iter().any(|&v| v != 0.0));
        for r in 1..4 {
            assert!(g.row(r).iter().all(|&v| v == 0.0));
        }

        let zero_w = tape.leaf(&Tensor::zeros(&[3, 3]));
        let logits = classify_sentiment(fused, 4, zero_w, b, 0.5, false, &mut rng).unwrap();
        assert!(logits.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scheme_validation() {
        let s = LabelScheme::two_types();
        assert_eq!(s.len(), 5);
        assert_eq!(s.entity_type(3), Some("Y"));
        assert!(s.is_valid_sequence(&[0, 1, 2, 0, 3, 4, 4]));
        assert!(!s.is_valid_sequence(&[0, 2]));
        assert!(!s.is_valid_sequence(&[1, 4]));
        assert!(LabelScheme::new(vec!["O".into(), "I-Z".into()]).is_err());
    }
}
