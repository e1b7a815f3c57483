//! `key = value` run configuration shared by every command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use bayes_tdnn::criterion::CriterionConfig;
use bayes_tdnn::data::{CorpusSpec, DomainShift};
use bayes_tdnn::tdnn::{Topology, UncertaintyMode};
use bayes_tdnn::trainer::{AdaptConfig, AdaptStrategy, KlUpdate, ReinitTarget, TrainConfig};

use crate::Failure;

/// Every recognised key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("mode", "tdnn", "uncertainty mode: tdnn, b-tdnn, bd-tdnn, gp0..gp3, v-tdnn"),
    ("bayes_layers", "1", "comma-separated one-based layers that get the uncertainty mode"),
    ("latent_dim", "4", "latent width of v-tdnn layers"),
    ("mc_samples", "1", "Monte Carlo samples per training step"),
    ("lr", "0.01", "initial learning rate"),
    ("lr_decay", "0.9", "per-epoch learning rate factor"),
    ("momentum", "0.9", "momentum coefficient"),
    ("epochs", "6", "training epochs (each adaptation stage runs this many)"),
    ("batch_frames", "256", "minimum frames per minibatch"),
    ("k", "1.0", "acoustic scale for training and decoding"),
    ("f_smooth_lambda", "0.1", "weight of the cross-entropy interpolation"),
    ("l2_weight", "0", "weight of the L2 penalty on weight matrices"),
    ("prior_sigma", "0.25", "prior and initial posterior standard deviation"),
    ("kl_update", "implicit", "implicit (proximal) or explicit KL step"),
    ("seed", "0", "seed for initialization, minibatch order and noise"),
    ("bootstrap", "false", "train a tdnn baseline first and initialize the uncertainty model from it"),
    ("hidden", "64", "hidden nodes per layer"),
    ("bottleneck", "16", "bottleneck width of the factored layers"),
    ("labels", "6", "output labels (gen-data and fresh models)"),
    ("feature_dim", "40", "feature dimension (gen-data and fresh models)"),
    ("separation", "1.5", "distance between label means in gen-data"),
    ("utterances", "400", "utterances generated by gen-data"),
    ("shift_amount", "0", "strength of the random affine domain shift; 0 disables it"),
    ("duration_factor", "1", "duration scaling of the shifted domain"),
    ("shift_seed", "0", "seed of the domain shift"),
    ("strategy", "fine_tune", "adaptation strategy: fine_tune or bayes_adapt"),
    ("layers_reinit", "output", "comma list of one-based layers and/or `output` reset before adaptation"),
    ("init_sigma", "", "initial posterior sigma of the adapted layer, capped at prior_sigma; empty uses prior_sigma"),
    ("corpus", "corpus", "corpus directory"),
    ("output_dir", "run", "directory for checkpoints and metrics"),
    ("source_checkpoint", "", "source model for adapt"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (*k, v.to_string())).collect(),
        }
    }
}

fn bad(msg: String) -> Failure {
    Failure::Config(msg)
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            let k = k.trim();
            let key = KEYS
                .iter()
                .map(|(k, _, _)| *k)
                .find(|known| *known == k)
                .ok_or_else(|| bad(format!("line {}: unknown key `{k}`", n + 1)))?;
            if seen.contains(&key) {
                return Err(bad(format!("line {}: key `{key}` given twice", n + 1)));
            }
            seen.push(key);
            cfg.values.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, Failure> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(format!("`{key}` has invalid value `{v}`")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, Failure> {
        match self.raw(key) {
            "" => Err(bad(format!("`{key}` must be set"))),
            p => Ok(PathBuf::from(p)),
        }
    }

    pub fn mode(&self) -> Result<UncertaintyMode, Failure> {
        self.raw("mode").parse().map_err(|e| bad(format!("{e}")))
    }

    pub fn seed(&self) -> Result<u64, Failure> {
        self.num("seed")
    }

    pub fn feature_dim(&self) -> Result<usize, Failure> {
        self.num("feature_dim")
    }

    pub fn labels(&self) -> Result<usize, Failure> {
        self.num("labels")
    }

    pub fn bootstrap(&self) -> Result<bool, Failure> {
        self.num("bootstrap")
    }

    pub fn acoustic_scale(&self) -> Result<f64, Failure> {
        self.num("k")
    }

    fn list(&self, key: &str) -> Result<Vec<usize>, Failure> {
        self.raw(key)
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| bad(format!("`{key}` must be a comma list of integers"))))
            .collect()
    }

    pub fn train_config(&self, workers: usize) -> Result<TrainConfig, Failure> {
        let cfg = TrainConfig {
            mode: self.mode()?,
            bayes_layers: self.list("bayes_layers")?,
            latent_dim: self.num("latent_dim")?,
            lr: self.num("lr")?,
            lr_decay: self.num("lr_decay")?,
            momentum: self.num("momentum")?,
            epochs: self.num("epochs")?,
            batch_frames: self.num("batch_frames")?,
            mc_samples: self.num("mc_samples")?,
            seed: self.seed()?,
            criterion: CriterionConfig {
                acoustic_scale: self.acoustic_scale()?,
                f_smooth_lambda: self.num("f_smooth_lambda")?,
                l2_weight: self.num("l2_weight")?,
            },
            prior_sigma: self.num("prior_sigma")?,
            kl_update: KlUpdate::parse(self.raw("kl_update")).map_err(|e| bad(format!("{e}")))?,
            workers,
            ..TrainConfig::default()
        };
        cfg.validate().map_err(|e| bad(format!("{e}")))?;
        Ok(cfg)
    }

    /// Desk topology for the given corpus shape with the configured widths.
    pub fn topology(&self, input_dim: usize, labels: usize) -> Result<Topology, Failure> {
        let hidden: usize = self.num("hidden")?;
        let bottleneck: usize = self.num("bottleneck")?;
        if hidden == 0 || bottleneck == 0 {
            return Err(bad("`hidden` and `bottleneck` must be positive".into()));
        }
        let mut t = Topology::desk(input_dim, labels);
        for l in &mut t.layers {
            l.hidden = hidden;
            l.bottleneck = Some(bottleneck);
        }
        t.validate().map_err(|e| bad(format!("{e}")))?;
        Ok(t)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec, Failure> {
        let labels: usize = self.num("labels")?;
        let dim: usize = self.num("feature_dim")?;
        let mut spec = CorpusSpec::toy(labels, dim, self.num("separation")?, self.num("utterances")?, self.seed()?);
        let amount: f64 = self.num("shift_amount")?;
        let factor: f64 = self.num("duration_factor")?;
        if amount != 0.0 || factor != 1.0 {
            spec.domain_shift = Some(DomainShift::random(dim, amount, factor, self.num("shift_seed")?));
        }
        spec.validate().map_err(|e| bad(format!("{e}")))?;
        Ok(spec)
    }

    pub fn adapt_config(&self) -> Result<AdaptConfig, Failure> {
        let strategy = AdaptStrategy::parse(self.raw("strategy")).map_err(|e| bad(format!("{e}")))?;
        let mut layers_reinit = Vec::new();
        for item in self.raw("layers_reinit").split(',').map(str::trim).filter(|s| !s.is_empty()) {
            layers_reinit.push(match item {
                "output" => ReinitTarget::Output,
                n => ReinitTarget::Layer(
                    n.parse()
                        .map_err(|_| bad(format!("`layers_reinit` entry `{n}` is neither `output` nor a layer number")))?,
                ),
            });
        }
        Ok(AdaptConfig {
            strategy,
            layers_reinit,
            init_sigma: match self.raw("init_sigma") {
                "" => None,
                _ => Some(self.num("init_sigma")?),
            },
        })
    }
}

/// Default configuration as a commented file.
pub fn defaults_text() -> String {
    let mut s = String::new();
    for (k, v, doc) in KEYS {
        let _ = writeln!(s, "# {doc}\n{k} = {v}");
    }
    s
}
