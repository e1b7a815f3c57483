use crate::error::{Error, Result};
use crate::grad::DenseMatrix;

/// Ordered frame offsets spliced into one input row, e.g. `{-1, 0}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpliceSpec {
    offsets: Vec<i32>,
}

impl SpliceSpec {
    pub fn new(offsets: Vec<i32>) -> Result<Self> {
        if offsets.is_empty() || offsets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSplice(offsets));
        }
        Ok(Self { offsets })
    }

    pub fn identity() -> Self {
        Self { offsets: vec![0] }
    }

    pub fn offsets(&self) -> &[i32] {
        &self.offsets
    }

    pub fn width(&self) -> usize {
        self.offsets.len()
    }

    /// Parses `-1,0` style text.
    pub fn parse(text: &str) -> Result<Self> {
        let offsets = text
            .split(',')
            .map(|s| s.trim().parse::<i32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Config(format!("bad splice offsets `{text}`")))?;
        Self::new(offsets)
    }

    pub fn to_text(&self) -> String {
        self.offsets
            .iter()
            .map(i32::to_string)
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Source rows for output frame `t`, clamped to `[0, len - 1]`.
pub(crate) fn splice_source_rows(t: usize, len: usize, offsets: &[i32]) -> Vec<usize> {
    let last = len as i64 - 1;
    offsets
        .iter()
        .map(|&o| (t as i64 + o as i64).clamp(0, last) as usize)
        .collect()
}

/// Concatenates `x[clamp(t + o)]` over the offsets for every frame `t`.
pub fn splice(x: &DenseMatrix, spec: &SpliceSpec) -> Result<DenseMatrix> {
    let (len, width) = x.shape();
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    let mut out = DenseMatrix::zeros(len, width * spec.width());
    for t in 0..len {
        let rows = splice_source_rows(t, len, &spec.offsets);
        let dst = out.row_mut(t);
        for (k, &s) in rows.iter().enumerate() {
            dst[k * width..(k + 1) * width].copy_from_slice(x.row(s));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_splice_is_noop() {
        let x = DenseMatrix::from_fn(5, 3, |r, c| (r * 10 + c) as f64);
        assert_eq!(splice(&x, &SpliceSpec::identity()).unwrap(), x);
    }

    #[test]
    fn single_frame_is_clamped() {
        let x = DenseMatrix::from_rows(&[vec![4.0, 5.0]]).unwrap();
        let s = splice(&x, &SpliceSpec::new(vec![-1, 0]).unwrap()).unwrap();
        assert_eq!(s.as_slice(), &[4.0, 5.0, 4.0, 5.0]);
    }

    #[test]
    fn three_frame_context_by_hand() {
        let x = DenseMatrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = splice(&x, &SpliceSpec::new(vec![-1, 0, 1]).unwrap()).unwrap();
        let expected =
            DenseMatrix::from_rows(&[vec![1.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 3.0]])
                .unwrap();
        assert_eq!(s, expected);
    }

    #[test]
    fn rejects_empty_and_unsorted() {
        assert!(SpliceSpec::new(vec![]).is_err());
        assert!(SpliceSpec::new(vec![0, 0]).is_err());
        assert!(SpliceSpec::new(vec![1, -1]).is_err());
        assert!(matches!(
            splice(&DenseMatrix::zeros(0, 2), &SpliceSpec::identity()),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn text_round_trip() {
        let s = SpliceSpec::parse("-3, 0,3").unwrap();
        assert_eq!(s.offsets(), &[-3, 0, 3]);
        assert_eq!(SpliceSpec::parse(&s.to_text()).unwrap(), s);
    }
}
