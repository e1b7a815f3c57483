use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bayes::{BayesDropoutConfig, GaussianVariational, GpBasisSet, ParamBlock};
use crate::error::{Error, Result};
use crate::grad::DenseMatrix;
use crate::tdnn::{layer_prefix, GpVariant, InitConfig, TdnnStack, Topology};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BTDN";
pub const CHECKPOINT_VERSION: u8 = 1;

/// A model with the noise seed and step it was trained to, and the content hash of
/// the checkpoint it was adapted from.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: TdnnStack,
    pub noise_seed: u64,
    pub step: u64,
    pub provenance: Option<String>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn text(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| bad(format!("{what} is not UTF-8")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    fn meta(&self) -> String {
        let mut m = String::new();
        writeln!(m, "topology={}", self.stack.topology.to_text()).expect("write");
        writeln!(m, "noise_seed={}", self.noise_seed).expect("write");
        writeln!(m, "step={}", self.step).expect("write");
        writeln!(m, "provenance={}", self.provenance.as_deref().unwrap_or("")).expect("write");
        for (l, layer) in self.stack.layers.iter().enumerate() {
            let p = layer_prefix(l);
            writeln!(m, "{p}.collapsed={}", u8::from(layer.collapsed)).expect("write");
            if let Some(gp) = &layer.gp {
                writeln!(m, "{p}.gp={}", gp.variant().index()).expect("write");
            }
            if let Some(d) = &layer.dropout {
                writeln!(m, "{p}.dropout={:016x},{:016x}", d.keep.to_bits(), d.sigma1.to_bits()).expect("write");
            }
        }
        m
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        put_text(&mut out, &self.meta());
        let params = self.stack.named_params();
        put_u32(&mut out, params.len());
        for (name, _, m) in &params {
            put_text(&mut out, name);
            put_u32(&mut out, m.rows());
            put_u32(&mut out, m.cols());
        }
        for (_, _, m) in &params {
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Hex content hash of the serialized checkpoint, used as adaptation provenance.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        format!("{:016x}", checksum(&bytes))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.is_empty() {
            return Err(bad("empty file"));
        }
        if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                bytes[4]
            )));
        }
        if bytes.len() < 13 {
            return Err(bad("truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
            return Err(bad("content checksum mismatch"));
        }
        let mut r = Reader { bytes: body, pos: 5 };
        let meta = parse_meta(r.text("metadata")?)?;
        let count = r.u32("name table")?;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.text("parameter name")?.to_string();
            let rows = r.u32("rows")?;
            let cols = r.u32("cols")?;
            table.push((name, rows, cols));
        }
        let mut arrays = BTreeMap::new();
        for (name, rows, cols) in table {
            let n = rows.checked_mul(cols).ok_or_else(|| bad("array size overflow"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("array size overflow"))?, &name)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = DenseMatrix::from_vec(rows, cols, data)?;
            if arrays.insert(name.clone(), m).is_some() {
                return Err(bad(format!("duplicate array `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after arrays"));
        }
        let stack = rebuild(&meta, arrays)?;
        let num = |k: &str| -> Result<u64> {
            meta.get(k)
                .ok_or_else(|| bad(format!("missing `{k}`")))?
                .parse()
                .map_err(|_| bad(format!("bad `{k}`")))
        };
        Ok(Checkpoint {
            stack,
            noise_seed: num("noise_seed")?,
            step: num("step")?,
            provenance: meta.get("provenance").filter(|s| !s.is_empty()).cloned(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("bad metadata line `{line}`")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn take(arrays: &mut BTreeMap<String, DenseMatrix>, name: &str, shape: (usize, usize)) -> Result<DenseMatrix> {
    let m = arrays.remove(name).ok_or_else(|| bad(format!("missing array `{name}`")))?;
    if m.shape() != shape {
        return Err(bad(format!("array `{name}` has shape {:?}, expected {shape:?}", m.shape())));
    }
    Ok(m)
}

fn block(arrays: &mut BTreeMap<String, DenseMatrix>, name: &str, shape: (usize, usize)) -> Result<ParamBlock> {
    if arrays.contains_key(name) {
        return Ok(ParamBlock::Fixed(take(arrays, name, shape)?));
    }
    let mu = take(arrays, &format!("{name}.mu"), shape)?;
    let rho = take(arrays, &format!("{name}.rho"), (shape.0, 1))?;
    let prior_mu = take(arrays, &format!("{name}.prior_mu"), shape)?;
    let prior_sigma = take(arrays, &format!("{name}.prior_sigma"), shape)?;
    Ok(ParamBlock::Gaussian(GaussianVariational::from_parts(
        mu,
        rho,
        prior_mu,
        prior_sigma,
    )?))
}

fn rebuild(meta: &BTreeMap<String, String>, mut arrays: BTreeMap<String, DenseMatrix>) -> Result<TdnnStack> {
    let topo = meta.get("topology").ok_or_else(|| bad("missing topology"))?;
    let mut stack = TdnnStack::new(Topology::parse(topo)?, &InitConfig::default())?;
    for (l, layer) in stack.layers.iter_mut().enumerate() {
        let p = layer_prefix(l);
        if let Some(m) = &layer.linear {
            layer.linear = Some(take(&mut arrays, &format!("{p}.linear"), m.shape())?);
        }
        layer.weight = block(&mut arrays, &format!("{p}.w"), layer.weight.shape())?;
        layer.bias = take(&mut arrays, &format!("{p}.b"), layer.bias.shape())?;
        if let Some(gp) = &layer.gp {
            let v: u8 = meta
                .get(&format!("{p}.gp"))
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("missing `{p}.gp`")))?;
            let lambda = block(&mut arrays, &format!("{p}.lambda"), gp.lambda.shape())?;
            layer.gp = Some(GpBasisSet::new(GpVariant::from_index(v)?, lambda)?);
        }
        if let Some(lat) = &mut layer.latent {
            for (name, a) in [
                ("infer.mu", &mut lat.infer_mu),
                ("infer.log_sigma", &mut lat.infer_log_sigma),
                ("prior_net.mu", &mut lat.prior_mu),
                ("prior_net.log_sigma", &mut lat.prior_log_sigma),
            ] {
                a.w = take(&mut arrays, &format!("{p}.latent.{name}.w"), a.w.shape())?;
                a.b = take(&mut arrays, &format!("{p}.latent.{name}.b"), a.b.shape())?;
            }
        }
        layer.dropout = match meta.get(&format!("{p}.dropout")) {
            None => None,
            Some(s) => {
                let bits = |h: &str| u64::from_str_radix(h, 16).map(f64::from_bits);
                let (k, s1) = s.split_once(',').ok_or_else(|| bad(format!("bad `{p}.dropout`")))?;
                let (k, s1) = bits(k)
                    .and_then(|k| bits(s1).map(|s1| (k, s1)))
                    .map_err(|_| bad(format!("bad `{p}.dropout`")))?;
                Some(BayesDropoutConfig::new(k, s1)?)
            }
        };
        layer.collapsed = match meta.get(&format!("{p}.collapsed")).map(String::as_str) {
            Some("1") => true,
            Some("0") => false,
            _ => return Err(bad(format!("missing `{p}.collapsed`"))),
        };
    }
    stack.output_w = take(&mut arrays, "output.w", stack.output_w.shape())?;
    stack.output_b = take(&mut arrays, "output.b", stack.output_b.shape())?;
    if let Some(name) = arrays.keys().next() {
        return Err(bad(format!("unexpected array `{name}`")));
    }
    Ok(stack)
}
