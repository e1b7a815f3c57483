//! Viterbi decoding over a label graph and label error rate scoring.

use std::fmt::Write as _;

use crate::criterion::SequenceGraph;
use crate::error::{Error, Result};
use crate::grad::DenseMatrix;

/// Best path of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub id: String,
    /// Run-length collapsed labels of the best path.
    pub labels: Vec<usize>,
    pub log_score: f64,
}

/// Collapses runs of equal labels.
pub fn collapse_runs(frames: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &l in frames {
        if out.last() != Some(&l) {
            out.push(l);
        }
    }
    out
}

/// Best frame-label path; equal scores resolve toward the lowest label id.
pub fn viterbi_path(graph: &SequenceGraph, log_scores: &DenseMatrix, k: f64) -> Result<(Vec<usize>, f64)> {
    let t_len = log_scores.rows();
    if t_len == 0 {
        return Err(Error::EmptySequence);
    }
    if log_scores.cols() != graph.labels() {
        return Err(Error::shape(
            "viterbi scores",
            (t_len, graph.labels()),
            log_scores.shape(),
        ));
    }
    let n = graph.states();
    let mut delta = vec![f64::NEG_INFINITY; n];
    for &s in graph.start() {
        delta[s] = 0.0;
    }
    // back[t][s] = index of the arc entering s at frame t
    let mut back = vec![vec![usize::MAX; n]; t_len];
    for t in 0..t_len {
        let mut next = vec![f64::NEG_INFINITY; n];
        for (i, a) in graph.arcs().iter().enumerate() {
            let p = delta[a.src];
            if p == f64::NEG_INFINITY {
                continue;
            }
            let v = p + a.log_weight + k * log_scores.get(t, a.label);
            let cur = back[t][a.dst];
            let better = v > next[a.dst]
                || (v == next[a.dst]
                    && cur != usize::MAX
                    && a.label < graph.arcs()[cur].label);
            if better {
                next[a.dst] = v;
                back[t][a.dst] = i;
            }
        }
        delta = next;
    }
    let mut best: Option<(usize, f64)> = None;
    for s in 0..n {
        let v = delta[s] + graph.final_weight(s);
        if v > f64::NEG_INFINITY && best.is_none_or(|(_, b)| v > b) {
            best = Some((s, v));
        }
    }
    let (mut state, score) = best.ok_or(Error::NoAcceptingPath)?;
    let mut frames = vec![0; t_len];
    for t in (0..t_len).rev() {
        let arc = graph.arcs()[back[t][state]];
        frames[t] = arc.label;
        state = arc.src;
    }
    Ok((frames, score))
}

pub fn viterbi_decode(graph: &SequenceGraph, log_scores: &DenseMatrix, k: f64) -> Result<Hypothesis> {
    let (frames, log_score) = viterbi_path(graph, log_scores, k)?;
    Ok(Hypothesis {
        id: String::new(),
        labels: collapse_runs(&frames),
        log_score,
    })
}

/// Edit-distance breakdown of a hypothesis against its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorCounts {
    pub ref_len: usize,
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len as f64
    }
}

/// Levenshtein alignment minimizing `(distance, insertions + deletions)`, so equal
/// distances prefer substitutions.
pub fn label_error_rate(reference: &[usize], hyp: &[usize]) -> Result<ErrorCounts> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (r, h) = (reference.len(), hyp.len());
    let mut d = vec![vec![(0usize, 0usize); h + 1]; r + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = (i, i);
    }
    for j in 0..=h {
        d[0][j] = (j, j);
    }
    for i in 1..=r {
        for j in 1..=h {
            let (ds, is) = d[i - 1][j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                (ds, is)
            } else {
                (ds + 1, is)
            };
            let up = (d[i - 1][j].0 + 1, d[i - 1][j].1 + 1);
            let left = (d[i][j - 1].0 + 1, d[i][j - 1].1 + 1);
            d[i][j] = diag.min(up).min(left);
        }
    }
    let (dist, indels) = d[r][h];
    // ins − del = h − r and ins + del = indels
    let ins = ((indels + h) as i64 - r as i64) as usize / 2;
    let del = indels - ins;
    Ok(ErrorCounts {
        ref_len: r,
        sub: dist - indels,
        ins,
        del,
    })
}

/// `id,ref_len,errors,rate` rows followed by a summary row with id `TOTAL`.
pub fn error_report(rows: &[(String, ErrorCounts)]) -> String {
    let mut out = String::from("id,ref_len,errors,rate\n");
    let (mut n, mut e) = (0, 0);
    for (id, c) in rows {
        writeln!(out, "{id},{},{},{:.6}", c.ref_len, c.errors(), c.rate()).expect("write");
        n += c.ref_len;
        e += c.errors();
    }
    let rate = if n == 0 { 0.0 } else { e as f64 / n as f64 };
    writeln!(out, "TOTAL,{n},{e},{rate:.6}").expect("write");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::{build_denominator_graph, build_numerator_graph, Bigram};
    use proptest::prelude::*;

    #[test]
    fn single_path_graph_decodes_its_path() {
        let g = build_numerator_graph(&[1, 1, 0, 2], 3).unwrap();
        let s = DenseMatrix::from_fn(4, 3, |t, j| (t + j) as f64);
        let hyp = viterbi_decode(&g, &s, 1.0).unwrap();
        assert_eq!(hyp.labels, vec![1, 0, 2]);
        assert_eq!(hyp.log_score, 1.0 + 2.0 + 2.0 + 5.0);
    }

    #[test]
    fn two_frames_match_enumeration() {
        let b = Bigram::estimate(2, [&[0usize, 0, 0, 1][..]]).unwrap();
        let g = build_denominator_graph(&b).unwrap();
        let s = DenseMatrix::from_rows(&[vec![0.1, 0.5], vec![0.7, -0.2]]).unwrap();
        let (frames, score) = viterbi_path(&g, &s, 1.0).unwrap();
        let mut best = (vec![], f64::NEG_INFINITY);
        for a in 0..2 {
            for c in 0..2 {
                let v = b.initial[a] + s.get(0, a) + b.transitions.get(a, c) + s.get(1, c);
                if v > best.1 {
                    best = (vec![a, c], v);
                }
            }
        }
        assert_eq!(frames, best.0);
        assert!((score - best.1).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_follows_graph_and_ties_go_low() {
        let b = Bigram::estimate(3, [&[2usize, 2, 2, 2][..]]).unwrap();
        let g = build_denominator_graph(&b).unwrap();
        let s = DenseMatrix::from_fn(3, 3, |t, j| (t * j) as f64 * 10.0);
        assert_eq!(viterbi_decode(&g, &s, 0.0).unwrap().labels, vec![2]);
        let u = build_denominator_graph(&Bigram::uniform(3)).unwrap();
        let (frames, _) = viterbi_path(&u, &DenseMatrix::zeros(3, 3), 1.0).unwrap();
        assert_eq!(frames, vec![0, 0, 0]);
    }

    #[test]
    fn error_rate_examples() {
        let same = label_error_rate(&[1, 2, 3], &[1, 2, 3]).unwrap();
        assert_eq!(same.rate(), 0.0);
        let c = label_error_rate(&[1, 2, 3], &[1, 4, 3]).unwrap();
        assert_eq!((c.sub, c.ins, c.del), (1, 0, 0));
        assert!((c.rate() - 1.0 / 3.0).abs() < 1e-15);
        let c = label_error_rate(&[1, 2], &[1, 2, 5, 6]).unwrap();
        assert_eq!((c.sub, c.ins, c.del), (0, 2, 0));
        let c = label_error_rate(&[1, 2, 3], &[]).unwrap();
        assert_eq!((c.sub, c.ins, c.del), (0, 0, 3));
        assert!(matches!(label_error_rate(&[], &[1]), Err(Error::EmptyReference)));
    }

    #[test]
    fn report_has_summary_row() {
        let c = label_error_rate(&[1, 2, 3], &[1, 4, 3]).unwrap();
        let report = error_report(&[("u1".into(), c), ("u2".into(), c)]);
        assert_eq!(
            report,
            "id,ref_len,errors,rate\nu1,3,1,0.333333\nu2,3,1,0.333333\nTOTAL,6,2,0.333333\n"
        );
    }

    /// Exhaustive recursion over edit scripts returning the lexicographic minimum of
    /// `(distance, insertions + deletions)` and the matching counts.
    fn oracle(r: &[usize], h: &[usize]) -> (usize, usize, usize, usize) {
        match (r.split_first(), h.split_first()) {
            (None, None) => (0, 0, 0, 0),
            (Some(_), None) => (r.len(), 0, 0, r.len()),
            (None, Some(_)) => (h.len(), 0, h.len(), 0),
            (Some((a, rr)), Some((b, hh))) => {
                let key = |(d, s, i, e): (usize, usize, usize, usize)| (d, i + e, s, i, e);
                let (d, s, i, e) = oracle(rr, hh);
                let diag = if a == b { (d, s, i, e) } else { (d + 1, s + 1, i, e) };
                let (d, s, i, e) = oracle(rr, h);
                let del = (d + 1, s, i, e + 1);
                let (d, s, i, e) = oracle(r, hh);
                let ins = (d + 1, s, i + 1, e);
                [diag, del, ins].into_iter().min_by_key(|&c| key(c)).unwrap()
            }
        }
    }

    proptest! {
        #[test]
        fn error_rate_matches_recursive_oracle(
            r in proptest::collection::vec(0usize..3, 1..8),
            h in proptest::collection::vec(0usize..3, 0..8),
        ) {
            let c = label_error_rate(&r, &h).unwrap();
            let (d, _, i, e) = oracle(&r, &h);
            prop_assert_eq!(c.errors(), d);
            prop_assert_eq!(c.ins + c.del, i + e);
            prop_assert_eq!((c.ins, c.del), (i, e));
            if !h.is_empty() {
                let back = label_error_rate(&h, &r).unwrap();
                prop_assert_eq!((back.ins, back.del, back.sub), (c.del, c.ins, c.sub));
            }
        }
    }
}
