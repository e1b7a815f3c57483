//! Reproducible synthetic corpora: Gaussian frame emissions over a label Markov chain
//! with geometric durations, 80/10/10 splits, and a frame-level bigram.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::criterion::Bigram;
use crate::decode::collapse_runs;
use crate::error::{Error, Result};
use crate::grad::DenseMatrix;

/// Affine feature map and duration change applied to a target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainShift {
    /// `F × F`; features become `x · transform + offset`.
    pub transform: DenseMatrix,
    pub offset: Vec<f64>,
    /// Multiplies every mean duration.
    pub duration_factor: f64,
}

impl DomainShift {
    pub fn identity(feature_dim: usize) -> Self {
        Self {
            transform: DenseMatrix::identity(feature_dim),
            offset: vec![0.0; feature_dim],
            duration_factor: 1.0,
        }
    }

    /// Seeded rotation-plus-scale perturbation of strength `amount` with a mean offset.
    pub fn random(feature_dim: usize, amount: f64, duration_factor: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4946_54);
        let mut transform = DenseMatrix::identity(feature_dim);
        for v in transform.as_mut_slice() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += amount * e / (feature_dim as f64).sqrt();
        }
        let offset = (0..feature_dim)
            .map(|_| amount * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self {
            transform,
            offset,
            duration_factor,
        }
    }
}

/// Everything that determines a generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub labels: usize,
    pub feature_dim: usize,
    /// `labels × F` emission means.
    pub means: DenseMatrix,
    /// `labels × F` diagonal emission variances.
    pub variances: DenseMatrix,
    /// Mean segment length in frames per label; durations are geometric.
    pub mean_durations: Vec<f64>,
    /// `labels × labels` probabilities of the next segment's label; zero diagonal.
    pub segment_transitions: DenseMatrix,
    pub utterances: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
    pub domain_shift: Option<DomainShift>,
}

const MIN_VARIANCE: f64 = 1e-3;

impl CorpusSpec {
    /// Unit-variance emissions with means `separation` standard deviations apart.
    ///
    /// Means lie on orthogonal axes when `labels ≤ feature_dim`, otherwise on seeded
    /// random directions. Segment transitions favor a seeded successor per label.
    pub fn toy(labels: usize, feature_dim: usize, separation: f64, utterances: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_79);
        let scale = separation / std::f64::consts::SQRT_2;
        let means = if labels <= feature_dim {
            DenseMatrix::from_fn(labels, feature_dim, |l, d| if l == d { scale } else { 0.0 })
        } else {
            let mut m = DenseMatrix::zeros(labels, feature_dim);
            for l in 0..labels {
                let v: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                for (d, x) in v.iter().enumerate() {
                    m.set(l, d, scale * x / n);
                }
            }
            m
        };
        let mean_durations = (0..labels).map(|_| rng.random_range(3.0..8.0)).collect();
        let mut trans = DenseMatrix::zeros(labels, labels);
        for i in 0..labels {
            if labels <= 2 {
                if labels == 2 {
                    trans.set(i, 1 - i, 1.0);
                }
                continue;
            }
            let favored = (i + 1 + rng.random_range(0..labels - 1)) % labels;
            for j in 0..labels {
                if j != i {
                    let w = if j == favored { 0.6 } else { 0.4 / (labels - 2) as f64 };
                    trans.set(i, j, w);
                }
            }
        }
        Self {
            labels,
            feature_dim,
            means,
            variances: DenseMatrix::filled(labels, feature_dim, 1.0),
            mean_durations,
            segment_transitions: trans,
            utterances,
            min_frames: 20,
            max_frames: 60,
            seed,
            domain_shift: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorpusSpec(m));
        let (l, f) = (self.labels, self.feature_dim);
        if !(2..=10).contains(&l) {
            return bad(format!("labels must lie in 2..=10, got {l}"));
        }
        if f == 0 || self.utterances == 0 {
            return bad("feature dimension and utterance count must be positive".into());
        }
        if self.means.shape() != (l, f) || self.variances.shape() != (l, f) {
            return bad("means and variances must be labels × feature_dim".into());
        }
        if self.variances.as_slice().iter().any(|&v| !(v >= MIN_VARIANCE)) {
            return bad(format!("emission variances must be at least {MIN_VARIANCE}"));
        }
        if self.mean_durations.len() != l || self.mean_durations.iter().any(|&d| !(d >= 1.0)) {
            return bad("one mean duration of at least one frame per label".into());
        }
        if self.segment_transitions.shape() != (l, l) {
            return bad("segment transitions must be labels × labels".into());
        }
        for i in 0..l {
            let row = self.segment_transitions.row(i);
            let sum: f64 = row.iter().sum();
            if row[i] != 0.0 || row.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return bad(format!("segment transition row {i} must be a distribution without self-loops"));
            }
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 ≤ min_frames ≤ max_frames".into());
        }
        if let Some(s) = &self.domain_shift {
            if s.transform.shape() != (f, f) || s.offset.len() != f || !(s.duration_factor > 0.0) {
                return bad("domain shift must be an F × F transform, an F offset and a positive duration factor".into());
            }
        }
        Ok(())
    }

    /// Canonical text form; the content hash of a corpus is taken over it.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "labels={}", self.labels);
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "means={}", list(self.means.as_slice()));
        let _ = writeln!(s, "variances={}", list(self.variances.as_slice()));
        let _ = writeln!(s, "mean_durations={}", list(&self.mean_durations));
        let _ = writeln!(s, "segment_transitions={}", list(self.segment_transitions.as_slice()));
        let _ = writeln!(s, "utterances={}", self.utterances);
        let _ = writeln!(s, "min_frames={}", self.min_frames);
        let _ = writeln!(s, "max_frames={}", self.max_frames);
        let _ = writeln!(s, "seed={}", self.seed);
        if let Some(d) = &self.domain_shift {
            let _ = writeln!(s, "shift_transform={}", list(d.transform.as_slice()));
            let _ = writeln!(s, "shift_offset={}", list(&d.offset));
            let _ = writeln!(s, "shift_duration_factor={:e}", d.duration_factor);
        }
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// One utterance: frames as rows, a label per frame, and the collapsed transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: DenseMatrix,
    pub alignment: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.alignment.len()
    }

    pub fn transcript(&self) -> Vec<usize> {
        collapse_runs(&self.alignment)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.corpus",
            Split::Dev => "dev.corpus",
            Split::Test => "test.corpus",
        }
    }
}

/// Split of an utterance as a pure function of `(id, seed)`: buckets 0–7 train, 8 dev, 9 test.
pub fn split_of(id: &str, seed: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    match v % 10 {
        0..=7 => Split::Train,
        8 => Split::Dev,
        _ => Split::Test,
    }
}

/// A generated or loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec_hash: [u8; 32],
    pub labels: usize,
    pub feature_dim: usize,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub bigram: Bigram,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Utterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn train_frames(&self) -> usize {
        self.train.iter().map(Utterance::frames).sum()
    }
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"utterance");
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    let d: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(d)
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn generate_utterance(spec: &CorpusSpec, index: usize) -> Utterance {
    let mut rng = utterance_rng(spec.seed, index);
    let t_len = rng.random_range(spec.min_frames..=spec.max_frames);
    let factor = spec.domain_shift.as_ref().map_or(1.0, |s| s.duration_factor);
    let mut alignment = Vec::with_capacity(t_len);
    let mut label = rng.random_range(0..spec.labels);
    while alignment.len() < t_len {
        alignment.push(label);
        let stay = 1.0 - 1.0 / (spec.mean_durations[label] * factor).max(1.0);
        if rng.random::<f64>() >= stay {
            label = sample_index(&mut rng, spec.segment_transitions.row(label));
        }
    }
    let f = spec.feature_dim;
    let mut features = DenseMatrix::zeros(t_len, f);
    for (t, &l) in alignment.iter().enumerate() {
        let row: Vec<f64> = (0..f)
            .map(|d| {
                let e: f64 = StandardNormal.sample(&mut rng);
                spec.means.get(l, d) + spec.variances.get(l, d).sqrt() * e
            })
            .collect();
        let shifted = match &spec.domain_shift {
            None => row,
            Some(s) => (0..f)
                .map(|j| (0..f).map(|i| row[i] * s.transform.get(i, j)).sum::<f64>() + s.offset[j])
                .collect(),
        };
        for (d, v) in shifted.into_iter().enumerate() {
            features.set(t, d, v as f32 as f64);
        }
    }
    Utterance {
        id: format!("utt{index:05}"),
        features,
        alignment,
    }
}

/// Generates the corpus described by `spec`; identical specs give identical corpora.
pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..spec.utterances {
        let u = generate_utterance(spec, i);
        match split_of(&u.id, spec.seed) {
            Split::Train => train.push(u),
            Split::Dev => dev.push(u),
            Split::Test => test.push(u),
        }
    }
    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::CorpusSpec(format!(
            "{} utterances leave a split empty; use more utterances",
            spec.utterances
        )));
    }
    let bigram = Bigram::estimate(spec.labels, train.iter().map(|u| u.alignment.as_slice()))?;
    Ok(Corpus {
        spec_hash: spec.hash(),
        labels: spec.labels,
        feature_dim: spec.feature_dim,
        train,
        dev,
        test,
        bigram,
    })
}

const CORPUS_MAGIC: &[u8; 4] = b"BTDC";
const CORPUS_VERSION: u8 = 1;

fn encode_split(spec_hash: &[u8; 32], labels: usize, feature_dim: usize, utts: &[Utterance]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CORPUS_MAGIC);
    out.push(CORPUS_VERSION);
    out.extend_from_slice(spec_hash);
    out.extend_from_slice(&(labels as u32).to_le_bytes());
    out.extend_from_slice(&(feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&(utts.len() as u32).to_le_bytes());
    for u in utts {
        out.extend_from_slice(&(u.id.len() as u32).to_le_bytes());
        out.extend_from_slice(u.id.as_bytes());
        out.extend_from_slice(&(u.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(u.features.cols() as u32).to_le_bytes());
        for &v in u.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &l in &u.alignment {
            out.extend_from_slice(&(l as u16).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corpus("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// One split file: header, then the utterance records.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFile {
    pub spec_hash: [u8; 32],
    pub labels: usize,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

pub fn decode_split(bytes: &[u8]) -> Result<SplitFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CORPUS_MAGIC {
        return Err(Error::Corpus("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != CORPUS_VERSION {
        return Err(Error::Corpus(format!("unsupported version {version}")));
    }
    let spec_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let labels = r.u32()?;
    let feature_dim = r.u32()?;
    let count = r.u32()?;
    let mut utterances = Vec::new();
    for _ in 0..count {
        let n = r.u32()?;
        let id = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Corpus("id is not UTF-8".into()))?;
        let t = r.u32()?;
        let f = r.u32()?;
        if f != feature_dim {
            return Err(Error::Corpus(format!("{id}: feature dim {f} != {feature_dim}")));
        }
        let raw = r.take(t.checked_mul(f).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Corpus("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let features = DenseMatrix::from_vec(t, f, data).map_err(|_| Error::Corpus(format!("{id}: non-finite features")))?;
        let alignment: Vec<usize> = r
            .take(t * 2)?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
            .collect();
        if let Some(&label) = alignment.iter().find(|&&l| l >= labels) {
            return Err(Error::LabelOutOfRange { label, labels });
        }
        utterances.push(Utterance {
            id,
            features,
            alignment,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corpus("trailing bytes".into()));
    }
    Ok(SplitFile {
        spec_hash,
        labels,
        feature_dim,
        utterances,
    })
}

pub const BIGRAM_FILE: &str = "bigram.txt";
pub const SPEC_FILE: &str = "spec.txt";

/// Writes the three split files, the bigram and the spec text into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, spec: Option<&CorpusSpec>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in Split::ALL {
        let bytes = encode_split(&corpus.spec_hash, corpus.labels, corpus.feature_dim, corpus.split(s));
        fs::File::create(dir.join(s.file_name()))?.write_all(&bytes)?;
    }
    fs::write(dir.join(BIGRAM_FILE), corpus.bigram.to_text())?;
    if let Some(spec) = spec {
        fs::write(dir.join(SPEC_FILE), spec.to_text())?;
    }
    Ok(())
}

pub fn read_split(path: &Path) -> Result<SplitFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Corpus(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode_split(&bytes)
}

/// Loads a corpus directory written by [`write_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let train = read_split(&dir.join(Split::Train.file_name()))?;
    let dev = read_split(&dir.join(Split::Dev.file_name()))?;
    let test = read_split(&dir.join(Split::Test.file_name()))?;
    for other in [&dev, &test] {
        if other.spec_hash != train.spec_hash || other.labels != train.labels || other.feature_dim != train.feature_dim {
            return Err(Error::Corpus("split files come from different corpora".into()));
        }
    }
    let text = fs::read_to_string(dir.join(BIGRAM_FILE)).map_err(|e| Error::Corpus(format!("bigram: {e}")))?;
    let bigram = Bigram::parse(&text)?;
    if bigram.labels() != train.labels {
        return Err(Error::Corpus("bigram label count differs from the corpus".into()));
    }
    Ok(Corpus {
        spec_hash: train.spec_hash,
        labels: train.labels,
        feature_dim: train.feature_dim,
        train: train.utterances,
        dev: dev.utterances,
        test: test.utterances,
        bigram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_files() {
        let spec = CorpusSpec::toy(3, 4, 3.0, 40, 7);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(a.path(), &generate(&spec).unwrap(), Some(&spec)).unwrap();
        write_corpus(b.path(), &generate(&spec).unwrap(), Some(&spec)).unwrap();
        for name in ["train.corpus", "dev.corpus", "test.corpus", BIGRAM_FILE, SPEC_FILE] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let spec = CorpusSpec::toy(4, 3, 2.0, 40, 1);
        let c = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c, None).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), c);
    }

    #[test]
    fn utterance_invariants() {
        let c = generate(&CorpusSpec::toy(5, 6, 2.0, 30, 3)).unwrap();
        for u in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert_eq!(u.features.rows(), u.alignment.len());
            let t = u.transcript();
            assert!(t.windows(2).all(|w| w[0] != w[1]));
            assert_eq!(collapse_runs(&u.alignment), t);
        }
    }

    #[test]
    fn bigram_rows_are_normalized() {
        let c = generate(&CorpusSpec::toy(6, 4, 1.0, 50, 9)).unwrap();
        c.bigram.check_normalized().unwrap();
    }

    #[test]
    fn split_is_a_function_of_id_and_seed() {
        assert_eq!(split_of("utt00012", 5), split_of("utt00012", 5));
        let n: usize = (0..2000).filter(|i| split_of(&format!("utt{i:05}"), 1) == Split::Train).count();
        assert!((1500..1700).contains(&n), "{n}");
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut s = CorpusSpec::toy(3, 2, 1.0, 30, 0);
        s.variances.set(0, 0, 1e-4);
        assert!(matches!(generate(&s), Err(Error::CorpusSpec(_))));
        assert!(generate(&CorpusSpec::toy(1, 2, 1.0, 30, 0)).is_err());
        assert!(generate(&CorpusSpec::toy(3, 2, 1.0, 2, 0)).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let c = generate(&CorpusSpec::toy(3, 2, 1.0, 30, 0)).unwrap();
        let bytes = encode_split(&c.spec_hash, 3, 2, &c.train);
        assert!(decode_split(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_split(b"").is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(decode_split(&wrong).is_err());
    }

    #[test]
    fn identity_shift_keeps_feature_statistics() {
        let base = CorpusSpec::toy(3, 3, 2.0, 300, 11);
        let mut target = base.clone();
        target.seed = 12;
        target.domain_shift = Some(DomainShift::identity(3));
        let (a, b) = (generate(&base).unwrap(), generate(&target).unwrap());
        // utterance-level means are independent samples, frames within one are not
        let stats = |c: &Corpus| {
            let means: Vec<Vec<f64>> = c
                .train
                .iter()
                .map(|u| u.features.column_sums().scale(1.0 / u.frames() as f64).into_vec())
                .collect();
            let n = means.len() as f64;
            (0..3)
                .map(|d| {
                    let m = means.iter().map(|r| r[d]).sum::<f64>() / n;
                    let v = means.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / (n - 1.0);
                    (m, v, n)
                })
                .collect::<Vec<_>>()
        };
        for ((ma, va, na), (mb, vb, nb)) in stats(&a).into_iter().zip(stats(&b)) {
            let z = (ma - mb) / (va / na + vb / nb).sqrt();
            assert!(z.abs() < 3.29, "z = {z}");
        }
    }
}
