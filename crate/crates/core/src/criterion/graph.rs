use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grad::{logsumexp, DenseMatrix};

/// One emitting transition; every arc consumes exactly one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arc {
    pub src: usize,
    pub dst: usize,
    pub label: usize,
    pub log_weight: f64,
}

/// Label graph with start states and weighted final states.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGraph {
    states: usize,
    labels: usize,
    arcs: Vec<Arc>,
    start: Vec<usize>,
    finals: Vec<(usize, f64)>,
}

impl SequenceGraph {
    /// Validates the arcs and trims nothing: every state must be reachable from a
    /// start state and co-reachable to a final state.
    pub fn new(
        states: usize,
        labels: usize,
        arcs: Vec<Arc>,
        start: Vec<usize>,
        finals: Vec<(usize, f64)>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidGraph(m));
        if states == 0 || start.is_empty() || finals.is_empty() {
            return bad("graph needs states, a start state and a final state".into());
        }
        for a in &arcs {
            if a.src >= states || a.dst >= states {
                return bad(format!("arc {}->{} leaves {states} states", a.src, a.dst));
            }
            if a.label >= labels {
                return Err(Error::LabelOutOfRange {
                    label: a.label,
                    labels,
                });
            }
            if a.log_weight.is_nan() || a.log_weight == f64::INFINITY {
                return bad(format!("arc {}->{} has weight {}", a.src, a.dst, a.log_weight));
            }
        }
        if start.iter().any(|&s| s >= states) || finals.iter().any(|&(s, _)| s >= states) {
            return bad("start or final state out of range".into());
        }
        if finals.iter().any(|(_, w)| w.is_nan() || *w == f64::INFINITY) {
            return bad("final weight must be finite or -inf".into());
        }
        let g = Self {
            states,
            labels,
            arcs,
            start,
            finals,
        };
        let fwd = g.reach(g.start.clone(), false);
        let bwd = g.reach(g.finals.iter().map(|&(s, _)| s).collect(), true);
        if let Some(s) = (0..states).find(|&s| !fwd[s] || !bwd[s]) {
            return bad(format!("state {s} is not on any start-to-final path"));
        }
        Ok(g)
    }

    fn reach(&self, seeds: Vec<usize>, reverse: bool) -> Vec<bool> {
        let mut seen = vec![false; self.states];
        let mut queue: VecDeque<usize> = seeds.into();
        while let Some(s) = queue.pop_front() {
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            for a in &self.arcs {
                let (from, to) = if reverse { (a.dst, a.src) } else { (a.src, a.dst) };
                if from == s && !seen[to] {
                    queue.push_back(to);
                }
            }
        }
        seen
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn start(&self) -> &[usize] {
        &self.start
    }

    pub fn finals(&self) -> &[(usize, f64)] {
        &self.finals
    }

    pub fn final_weight(&self, state: usize) -> f64 {
        self.finals
            .iter()
            .filter(|&&(s, _)| s == state)
            .map(|&(_, w)| w)
            .fold(f64::NEG_INFINITY, crate::grad::log_add)
    }
}

fn check_alignment(alignment: &[usize], labels: usize) -> Result<()> {
    if alignment.is_empty() {
        return Err(Error::EmptyAlignment);
    }
    if let Some(&label) = alignment.iter().find(|&&l| l >= labels) {
        return Err(Error::LabelOutOfRange { label, labels });
    }
    Ok(())
}

/// Linear chain with one zero-weight arc per frame accepting exactly `alignment`.
pub fn build_numerator_graph(alignment: &[usize], labels: usize) -> Result<SequenceGraph> {
    check_alignment(alignment, labels)?;
    chain(alignment, labels, |_, _| 0.0)
}

/// Reference chain carrying the bigram's weights, so its single path scores exactly as
/// the same label sequence does in the denominator graph.
pub fn build_weighted_numerator_graph(alignment: &[usize], bigram: &Bigram) -> Result<SequenceGraph> {
    check_alignment(alignment, bigram.labels())?;
    chain(alignment, bigram.labels(), |prev, next| match prev {
        None => bigram.initial[next],
        Some(p) => bigram.transitions.get(p, next),
    })
}

fn chain(
    alignment: &[usize],
    labels: usize,
    weight: impl Fn(Option<usize>, usize) -> f64,
) -> Result<SequenceGraph> {
    let arcs = alignment
        .iter()
        .enumerate()
        .map(|(t, &label)| Arc {
            src: t,
            dst: t + 1,
            label,
            log_weight: weight(t.checked_sub(1).map(|p| alignment[p]), label),
        })
        .collect();
    let n = alignment.len();
    SequenceGraph::new(n + 1, labels, arcs, vec![0], vec![(n, 0.0)])
}

/// Frame-level label bigram in log probabilities, with a distribution for the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Bigram {
    pub initial: Vec<f64>,
    /// `labels × labels`; row `i` is the distribution of the label following `i`.
    pub transitions: DenseMatrix,
}

pub const BIGRAM_TOLERANCE: f64 = 1e-9;

impl Bigram {
    pub fn new(initial: Vec<f64>, transitions: DenseMatrix) -> Result<Self> {
        let l = initial.len();
        if transitions.shape() != (l, l) {
            return Err(Error::shape("bigram", (l, l), transitions.shape()));
        }
        let b = Self {
            initial,
            transitions,
        };
        b.check_normalized()?;
        Ok(b)
    }

    pub fn uniform(labels: usize) -> Self {
        let w = -(labels as f64).ln();
        Self {
            initial: vec![w; labels],
            transitions: DenseMatrix::filled(labels, labels, w),
        }
    }

    /// Add-one estimate from frame-level label sequences.
    pub fn estimate<'a>(labels: usize, sequences: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        let mut init = vec![1.0; labels];
        let mut trans = vec![vec![1.0; labels]; labels];
        for seq in sequences {
            if let Some(&label) = seq.iter().find(|&&l| l >= labels) {
                return Err(Error::LabelOutOfRange { label, labels });
            }
            if let Some(&first) = seq.first() {
                init[first] += 1.0;
            }
            for w in seq.windows(2) {
                trans[w[0]][w[1]] += 1.0;
            }
        }
        let normalize = |row: &[f64]| -> Vec<f64> {
            let total: f64 = row.iter().sum();
            row.iter().map(|c| (c / total).ln()).collect()
        };
        let rows: Vec<Vec<f64>> = trans.iter().map(|r| normalize(r)).collect();
        Bigram::new(normalize(&init), DenseMatrix::from_rows(&rows)?)
    }

    pub fn labels(&self) -> usize {
        self.initial.len()
    }

    pub fn check_normalized(&self) -> Result<()> {
        let check = |row: String, values: &[f64]| {
            let lse = logsumexp(values);
            if values.iter().any(|v| v.is_nan() || *v > 0.0) || !(lse.abs() <= BIGRAM_TOLERANCE) {
                Err(Error::UnnormalizedBigram { row, lse })
            } else {
                Ok(())
            }
        };
        check("<s>".into(), &self.initial)?;
        for i in 0..self.labels() {
            check(i.to_string(), self.transitions.row(i))?;
        }
        Ok(())
    }

    /// `label label logprob` lines; the first-frame row uses `<s>` as its history.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (j, w) in self.initial.iter().enumerate() {
            out.push_str(&format!("<s> {j} {w:e}\n"));
        }
        for i in 0..self.labels() {
            for j in 0..self.labels() {
                out.push_str(&format!("{i} {j} {:e}\n", self.transitions.get(i, j)));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Corpus(format!("bigram: {m}"));
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(bad(format!("line {} needs three fields", n + 1)));
            }
            let from = match f[0] {
                "<s>" => None,
                s => Some(s.parse::<usize>().map_err(|_| bad(format!("line {}: bad label", n + 1)))?),
            };
            let to: usize = f[1].parse().map_err(|_| bad(format!("line {}: bad label", n + 1)))?;
            let w: f64 = f[2].parse().map_err(|_| bad(format!("line {}: bad logprob", n + 1)))?;
            entries.push((from, to, w));
        }
        let labels = entries
            .iter()
            .map(|&(f, t, _)| f.map_or(t, |f| f.max(t)) + 1)
            .max()
            .ok_or_else(|| bad("empty".into()))?;
        let mut initial = vec![f64::NEG_INFINITY; labels];
        let mut trans = DenseMatrix::filled(labels, labels, f64::MIN);
        let mut seen = vec![false; labels * (labels + 1)];
        for (from, to, w) in entries {
            let slot = from.map_or(to, |f| (f + 1) * labels + to);
            if std::mem::replace(&mut seen[slot], true) {
                return Err(bad(format!("duplicate entry for {from:?} -> {to}")));
            }
            match from {
                None => initial[to] = w,
                Some(f) => trans.set(f, to, w),
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("missing entries".into()));
        }
        Bigram::new(initial, trans)
    }
}

/// Start state 0 plus one state per label (state `j + 1` means "last label was `j`");
/// arcs carry the bigram weights and every state is final.
pub fn build_denominator_graph(bigram: &Bigram) -> Result<SequenceGraph> {
    bigram.check_normalized()?;
    let l = bigram.labels();
    let mut arcs = Vec::new();
    for j in 0..l {
        if bigram.initial[j] > f64::NEG_INFINITY {
            arcs.push(Arc {
                src: 0,
                dst: j + 1,
                label: j,
                log_weight: bigram.initial[j],
            });
        }
    }
    for i in 0..l {
        for j in 0..l {
            let w = bigram.transitions.get(i, j);
            if w > f64::NEG_INFINITY {
                arcs.push(Arc {
                    src: i + 1,
                    dst: j + 1,
                    label: j,
                    log_weight: w,
                });
            }
        }
    }
    let finals = (0..=l).map(|s| (s, 0.0)).collect();
    SequenceGraph::new(l + 1, l, arcs, vec![0], finals)
}
