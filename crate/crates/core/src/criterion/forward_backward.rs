use super::graph::SequenceGraph;
use crate::error::{Error, Result};
use crate::grad::{log_add, DenseMatrix};

/// Log path-sum and per-frame label posteriors of a graph under frame scores.
#[derive(Debug, Clone, PartialEq)]
pub struct FbResult {
    pub log_total: f64,
    /// `T × labels`; each row sums to one.
    pub occupancy: DenseMatrix,
}

fn check_scores(graph: &SequenceGraph, log_scores: &DenseMatrix) -> Result<()> {
    if log_scores.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    if log_scores.cols() != graph.labels() {
        return Err(Error::shape(
            "graph scores",
            (log_scores.rows(), graph.labels()),
            log_scores.shape(),
        ));
    }
    Ok(())
}

/// Forward variables `alpha[t][s]` for `t = 0..=T`.
pub(crate) fn forward(graph: &SequenceGraph, log_scores: &DenseMatrix, k: f64) -> Vec<Vec<f64>> {
    let t_len = log_scores.rows();
    let mut alpha = vec![vec![f64::NEG_INFINITY; graph.states()]; t_len + 1];
    for &s in graph.start() {
        alpha[0][s] = 0.0;
    }
    for t in 0..t_len {
        let (done, rest) = alpha.split_at_mut(t + 1);
        let (prev, next) = (&done[t], &mut rest[0]);
        for a in graph.arcs() {
            let p = prev[a.src];
            if p == f64::NEG_INFINITY {
                continue;
            }
            let v = p + a.log_weight + k * log_scores.get(t, a.label);
            next[a.dst] = log_add(next[a.dst], v);
        }
    }
    alpha
}

/// Log-space forward–backward with acoustic scale `k` applied to the scores.
pub fn forward_backward(graph: &SequenceGraph, log_scores: &DenseMatrix, k: f64) -> Result<FbResult> {
    check_scores(graph, log_scores)?;
    let t_len = log_scores.rows();
    let alpha = forward(graph, log_scores, k);
    let mut beta = vec![vec![f64::NEG_INFINITY; graph.states()]; t_len + 1];
    for &(s, w) in graph.finals() {
        beta[t_len][s] = log_add(beta[t_len][s], w);
    }
    let log_total = (0..graph.states())
        .map(|s| alpha[t_len][s] + beta[t_len][s])
        .fold(f64::NEG_INFINITY, log_add);
    if !log_total.is_finite() {
        return Err(Error::NoAcceptingPath);
    }
    for t in (0..t_len).rev() {
        let (head, tail) = beta.split_at_mut(t + 1);
        let (cur, next) = (&mut head[t], &tail[0]);
        for a in graph.arcs() {
            let n = next[a.dst];
            if n == f64::NEG_INFINITY {
                continue;
            }
            let v = n + a.log_weight + k * log_scores.get(t, a.label);
            cur[a.src] = log_add(cur[a.src], v);
        }
    }
    let mut occupancy = DenseMatrix::zeros(t_len, graph.labels());
    for t in 0..t_len {
        for a in graph.arcs() {
            let lp = alpha[t][a.src] + a.log_weight + k * log_scores.get(t, a.label)
                + beta[t + 1][a.dst]
                - log_total;
            if lp > f64::NEG_INFINITY {
                let v = occupancy.get(t, a.label) + lp.exp();
                occupancy.set(t, a.label, v);
            }
        }
    }
    Ok(FbResult {
        log_total,
        occupancy,
    })
}
