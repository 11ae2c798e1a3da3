//! Linear-chain CRF over per-token logits.
//!
//! A tag path `y` over a `T x D` logit matrix scores
//! `sum_t logits[t][y_t] + sum_{t>0} trans[y_{t-1}][y_t] + start[y_0] + end[y_{T-1}]`.
//! Transition scores do not depend on the position or the input.

use crate::tensor::Tensor;

/// Boundary and transition scores of a linear-chain CRF, borrowed from
/// wherever the parameters live.
#[derive(Clone, Copy, Debug)]
pub struct CrfScores<'a> {
    /// `D x D`, entry `(i, j)` scores `y_{t-1} = i` followed by `y_t = j`.
    pub transitions: &'a [f64],
    pub start: Option<&'a [f64]>,
    pub end: Option<&'a [f64]>,
    pub constraints: Option<&'a Constraints>,
    pub num_labels: usize,
}

impl<'a> CrfScores<'a> {
    pub fn new(transitions: &'a [f64], num_labels: usize) -> Self {
        assert_eq!(transitions.len(), num_labels * num_labels);
        CrfScores {
            transitions,
            start: None,
            end: None,
            constraints: None,
            num_labels,
        }
    }

    pub fn with_boundaries(mut self, start: &'a [f64], end: &'a [f64]) -> Self {
        assert_eq!(start.len(), self.num_labels);
        assert_eq!(end.len(), self.num_labels);
        self.start = Some(start);
        self.end = Some(end);
        self
    }

    pub fn with_constraints(mut self, constraints: &'a Constraints) -> Self {
        self.constraints = Some(constraints);
        self
    }

    #[inline]
    fn trans(&self, i: usize, j: usize) -> f64 {
        if let Some(c) = self.constraints {
            if !c.transition[i * self.num_labels + j] {
                return f64::NEG_INFINITY;
            }
        }
        self.transitions[i * self.num_labels + j]
    }

    #[inline]
    fn start(&self, j: usize) -> f64 {
        if let Some(c) = self.constraints {
            if !c.start[j] {
                return f64::NEG_INFINITY;
            }
        }
        self.start.map_or(0.0, |s| s[j])
    }

    #[inline]
    fn end(&self, j: usize) -> f64 {
        if let Some(c) = self.constraints {
            if !c.end[j] {
                return f64::NEG_INFINITY;
            }
        }
        self.end.map_or(0.0, |s| s[j])
    }
}

/// Allowed transitions; a disallowed entry scores negative infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraints {
    pub transition: Vec<bool>,
    pub start: Vec<bool>,
    pub end: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TagPath {
    pub labels: Vec<usize>,
    pub score: f64,
}

pub fn path_score(logits: &Tensor, scores: &CrfScores, path: &[usize]) -> f64 {
    let d = scores.num_labels;
    assert_eq!(logits.cols(), d);
    assert_eq!(logits.rows(), path.len());
    let x = logits.data();
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += x[t * d + y];
    }
    for w in path.windows(2) {
        s += scores.trans(w[0], w[1]);
    }
    if let (Some(&first), Some(&last)) = (path.first(), path.last()) {
        s += scores.start(first) + scores.end(last);
    }
    s
}

/// Highest-scoring path in `O(D^2 T)`. Ties resolve toward the lower label id.
pub fn viterbi(logits: &Tensor, scores: &CrfScores) -> TagPath {
    let d = scores.num_labels;
    let t_len = logits.rows();
    assert!(t_len >= 1 && d >= 1);
    let x = logits.data();

    let mut delta: Vec<f64> = (0..d).map(|j| scores.start(j) + x[j]).collect();
    let mut next = vec![0.0; d];
    let mut back = vec![0usize; t_len * d];
    for t in 1..t_len {
        for j in 0..d {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (i, &prev) in delta.iter().enumerate() {
                let s = prev + scores.trans(i, j);
                if s > best {
                    best = s;
                    arg = i;
                }
            }
            next[j] = best + x[t * d + j];
            back[t * d + j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }

    let mut best = f64::NEG_INFINITY;
    let mut last = 0;
    for (j, &v) in delta.iter().enumerate() {
        let s = v + scores.end(j);
        if s > best {
            best = s;
            last = j;
        }
    }
    let mut labels = vec![0; t_len];
    labels[t_len - 1] = last;
    for t in (1..t_len).rev() {
        labels[t - 1] = back[t * d + labels[t]];
    }
    TagPath { labels, score: best }
}

/// Greedy per-token argmax (lowest id on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|t| {
            let row = logits.row(t);
            let mut arg = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[arg] {
                    arg = j;
                }
            }
            arg
        })
        .collect()
}

pub(crate) fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Partition function and posterior marginals from forward-backward.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub log_z: f64,
    /// `T x D` unary marginals.
    pub unary: Vec<f64>,
    /// `(T-1) x D x D` pairwise marginals; entry `(t, i, j)` is
    /// `P(y_t = i, y_{t+1} = j)`.
    pub pairwise: Vec<f64>,
}

pub fn log_partition(logits: &Tensor, scores: &CrfScores) -> f64 {
    let (alpha, _) = forward(logits, scores);
    let d = scores.num_labels;
    let last = &alpha[(logits.rows() - 1) * d..];
    log_sum_exp((0..d).map(|j| last[j] + scores.end(j)))
}

fn forward(logits: &Tensor, scores: &CrfScores) -> (Vec<f64>, usize) {
    let d = scores.num_labels;
    let t_len = logits.rows();
    let x = logits.data();
    let mut alpha = vec![0.0; t_len * d];
    for j in 0..d {
        alpha[j] = scores.start(j) + x[j];
    }
    for t in 1..t_len {
        for j in 0..d {
            let prev = &alpha[(t - 1) * d..t * d];
            let lse = log_sum_exp((0..d).map(|i| prev[i] + scores.trans(i, j)));
            alpha[t * d + j] = lse + x[t * d + j];
        }
    }
    (alpha, t_len)
}

pub fn posterior(logits: &Tensor, scores: &CrfScores) -> Posterior {
    let d = scores.num_labels;
    let x = logits.data();
    let (alpha, t_len) = forward(logits, scores);

    let mut beta = vec![0.0; t_len * d];
    for j in 0..d {
        beta[(t_len - 1) * d + j] = scores.end(j);
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..d {
            let nb = &beta[(t + 1) * d..(t + 2) * d];
            let xn = &x[(t + 1) * d..(t + 2) * d];
            beta[t * d + i] = log_sum_exp((0..d).map(|j| scores.trans(i, j) + xn[j] + nb[j]));
        }
    }

    let log_z = log_sum_exp((0..d).map(|j| alpha[(t_len - 1) * d + j] + scores.end(j)));
    let unary: Vec<f64> = alpha.iter().zip(&beta).map(|(a, b)| (a + b - log_z).exp()).collect();
    let mut pairwise = vec![0.0; t_len.saturating_sub(1) * d * d];
    for t in 0..t_len.saturating_sub(1) {
        for i in 0..d {
            for j in 0..d {
                let s = alpha[t * d + i] + scores.trans(i, j) + x[(t + 1) * d + j] + beta[(t + 1) * d + j] - log_z;
                pairwise[(t * d + i) * d + j] = s.exp();
            }
        }
    }
    Posterior { log_z, unary, pairwise }
}

/// Negative log-likelihood of a gold path and its gradients.
#[derive(Clone, Debug)]
pub struct CrfLoss {
    pub loss: f64,
    pub d_logits: Vec<f64>,
    pub d_transitions: Vec<f64>,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

pub fn crf_nll(logits: &Tensor, scores: &CrfScores, gold: &[usize]) -> CrfLoss {
    let d = scores.num_labels;
    let t_len = logits.rows();
    assert_eq!(gold.len(), t_len);
    let post = posterior(logits, scores);
    let loss = post.log_z - path_score(logits, scores, gold);

    let mut d_logits = post.unary.clone();
    for (t, &y) in gold.iter().enumerate() {
        d_logits[t * d + y] -= 1.0;
    }
    let mut d_transitions = vec![0.0; d * d];
    for t in 0..t_len - 1 {
        for (k, g) in d_transitions.iter_mut().enumerate() {
            *g += post.pairwise[t * d * d + k];
        }
        d_transitions[gold[t] * d + gold[t + 1]] -= 1.0;
    }
    let mut d_start = post.unary[..d].to_vec();
    d_start[gold[0]] -= 1.0;
    let mut d_end = post.unary[(t_len - 1) * d..].to_vec();
    d_end[gold[t_len - 1]] -= 1.0;
    CrfLoss {
        loss,
        d_logits,
        d_transitions,
        d_start,
        d_end,
    }
}

/// Number of sequential dynamic-programming steps Viterbi takes on a length-`t` input.
pub fn viterbi_critical_path(t: usize) -> usize {
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn single_step_score_is_logit() {
        let x = t(1, 3, &[0.5, 2.0, -1.0]);
        let tr = vec![0.3; 9];
        let s = CrfScores::new(&tr, 3);
        assert_eq!(path_score(&x, &s, &[1]), 2.0);
        let p = viterbi(&x, &s);
        assert_eq!(p.labels, vec![1]);
    }

    #[test]
    fn zero_scores_uniform_partition() {
        let x = Tensor::zeros(&[2, 3]);
        let tr = vec![0.0; 9];
        let s = CrfScores::new(&tr, 3);
        assert!((log_partition(&x, &s) - 2.0 * 3f64.ln()).abs() < 1e-12);
        let loss = crf_nll(&x, &s, &[0, 2]);
        assert!((loss.loss - 2.0 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(path_score(&x, &s, &[1, 2]), 0.0);
    }

    #[test]
    fn single_label_partition_is_only_path() {
        let x = t(3, 1, &[0.2, -0.7, 1.5]);
        let tr = vec![0.4];
        let s = CrfScores::new(&tr, 1);
        let want = 0.2 - 0.7 + 1.5 + 2.0 * 0.4;
        assert!((log_partition(&x, &s) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_transitions_decode_greedy() {
        let x = t(4, 3, &[0., 1., 2., 5., 1., 1., 0., 0., -1., 2., 2., 1.]);
        let tr = vec![0.0; 9];
        let s = CrfScores::new(&tr, 3);
        assert_eq!(viterbi(&x, &s).labels, argmax_rows(&x));
        assert_eq!(argmax_rows(&x), vec![2, 0, 0, 0]);
    }

    #[test]
    fn saturated_gold_has_zero_loss() {
        let x = t(3, 2, &[1e3, -1e3, -1e3, 1e3, 1e3, -1e3]);
        let tr = vec![0.0; 4];
        let s = CrfScores::new(&tr, 2);
        assert!(crf_nll(&x, &s, &[0, 1, 0]).loss.abs() < 1e-12);
    }

    #[test]
    fn constraints_exclude_paths() {
        let x = Tensor::zeros(&[2, 2]);
        let tr = vec![0.0; 4];
        let c = Constraints {
            transition: vec![true, false, true, true],
            start: vec![true, true],
            end: vec![true, true],
        };
        let s = CrfScores::new(&tr, 2).with_constraints(&c);
        assert!((log_partition(&x, &s) - 3f64.ln()).abs() < 1e-12);
        let p = posterior(&x, &s);
        assert_eq!(p.pairwise[1], 0.0);
    }
}
