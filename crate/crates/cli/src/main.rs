mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use bayes_tdnn::criterion::build_denominator_graph;
use bayes_tdnn::data::{generate, load_corpus, write_corpus, Corpus, Split};
use bayes_tdnn::decode::{error_report, label_error_rate, viterbi_decode};
use bayes_tdnn::tdnn::{InitConfig, TdnnStack, UncertaintyMode};
use bayes_tdnn::trainer::{
    adapt, metrics_csv, train, train_bootstrapped, Checkpoint, MetricsRow, CHECKPOINT_VERSION,
};
use bayes_tdnn::verify::{run_suite, SUITES};

use config::RunConfig;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Data(String),
    Verification(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Config(m) | Failure::Data(m) | Failure::Verification(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use bayes_tdnn::Error as E;
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 1,
                Failure::Config(_) => 2,
                Failure::Data(_) => 3,
                Failure::Verification(_) => 5,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::UnknownMode(_) | E::MissingLatentDim | E::InvalidSplice(_) | E::TopologyMismatch { .. } => 2,
                E::NonFinite { .. } | E::NonFiniteInput { .. } | E::NonConvergence { .. } | E::NoAcceptingPath | E::EmptyTape => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

#[derive(Parser)]
#[command(name = "btdnn", version, about = "Uncertainty-aware factored TDNN training on synthetic corpora")]
struct Cli {
    /// Worker threads for per-sequence parallelism; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus into the `corpus` directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the `corpus` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes model.ckpt and metrics.csv into `output_dir`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Omit the start-time comment line from the metrics CSV.
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Adapt `source_checkpoint` to the corpus; writes adapted.ckpt and metrics.csv.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Viterbi-decode a split at the posterior mean.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        /// Hypothesis file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a hypothesis file against a split; prints the per-utterance CSV report.
    Score {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print checkpoint metadata and per-layer parameter counts. Without --checkpoint a
    /// fresh model is built from the configuration.
    Inspect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the numerical oracle suites.
    Verify {
        /// One of grad-check, kl-check, fb-check, reduction-check; all when absent.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default configuration file.
    Defaults,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            Ok(RunConfig::parse(&text)?)
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "dev" => Split::Dev,
        "test" => Split::Test,
        other => return Err(Failure::Usage(format!("unknown split `{other}`, expected train, dev or test")).into()),
    })
}

fn load(cfg: &RunConfig) -> Result<Corpus> {
    let dir = cfg.path("corpus")?;
    load_corpus(&dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_metrics(path: &Path, rows: &[MetricsRow], timestamp: bool) -> Result<()> {
    let mut text = String::new();
    if timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        text.push_str(&format!("# started_unix={secs}\n"));
    }
    text.push_str(&metrics_csv(rows));
    write(path, &text)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.path("output_dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn gen_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<()> {
    let spec = cfg.corpus_spec()?;
    let corpus = generate(&spec)?;
    let dir = match out {
        Some(d) => d,
        None => cfg.path("corpus")?,
    };
    write_corpus(&dir, &corpus, Some(&spec)).with_context(|| format!("writing corpus {}", dir.display()))?;
    println!(
        "wrote {}: {} train, {} dev, {} test utterances",
        dir.display(),
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len()
    );
    Ok(())
}

fn fresh_model(cfg: &RunConfig, input_dim: usize, labels: usize, workers: usize) -> Result<TdnnStack> {
    let tc = cfg.train_config(workers)?;
    let topo = tc.training_topology(cfg.topology(input_dim, labels)?)?;
    Ok(TdnnStack::new(topo, &InitConfig { seed: tc.seed, prior_sigma: tc.prior_sigma })?)
}

fn run_train(cfg: &RunConfig, workers: usize, timestamp: bool) -> Result<()> {
    let corpus = load(cfg)?;
    let tc = cfg.train_config(workers)?;
    let dir = output_dir(cfg)?;
    let outcome = if cfg.bootstrap()? && tc.mode != UncertaintyMode::Tdnn {
        let base = TdnnStack::new(
            cfg.topology(corpus.feature_dim, corpus.labels)?,
            &InitConfig { seed: tc.seed, prior_sigma: tc.prior_sigma },
        )?;
        let b = train_bootstrapped(base, &corpus, &tc)?;
        b.baseline.checkpoint.save(&dir.join("baseline.ckpt"))?;
        b.half_trained.save(&dir.join("baseline_half.ckpt"))?;
        write_metrics(&dir.join("baseline_metrics.csv"), &b.baseline.metrics, timestamp)?;
        b.model
    } else {
        train(fresh_model(cfg, corpus.feature_dim, corpus.labels, workers)?, &corpus, &tc)?
    };
    let ckpt = dir.join("model.ckpt");
    outcome.checkpoint.save(&ckpt)?;
    write_metrics(&dir.join("metrics.csv"), &outcome.metrics, timestamp)?;
    if let Some(last) = outcome.metrics.last() {
        println!("trained {} ({} steps), dev error rate {:.4}", ckpt.display(), last.step, last.dev_ler);
    }
    Ok(())
}

fn run_adapt(cfg: &RunConfig, workers: usize, timestamp: bool) -> Result<()> {
    let src_path = cfg.path("source_checkpoint")?;
    let source = Checkpoint::load(&src_path).with_context(|| format!("loading {}", src_path.display()))?;
    let target = load(cfg)?;
    let (ck, metrics) = adapt(&source, &target, &cfg.adapt_config()?, &cfg.train_config(workers)?)?;
    let dir = output_dir(cfg)?;
    let out = dir.join("adapted.ckpt");
    ck.save(&out)?;
    write_metrics(&dir.join("metrics.csv"), &metrics, timestamp)?;
    if let Some(last) = metrics.last() {
        println!("adapted {} from {}, dev error rate {:.4}", out.display(), src_path.display(), last.dev_ler);
    }
    Ok(())
}

fn decode(cfg: &RunConfig, checkpoint: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let corpus = load(cfg)?;
    if corpus.feature_dim != ck.stack.topology.input_dim || corpus.labels != ck.stack.labels() {
        return Err(Failure::Data("checkpoint and corpus shapes differ".into()).into());
    }
    let den = build_denominator_graph(&corpus.bigram)?;
    let model = ck.stack.collapse();
    let k = cfg.acoustic_scale()?;
    let mut text = String::new();
    for u in corpus.split(parse_split(split)?) {
        let hyp = viterbi_decode(&den, &model.forward_eval(&u.features)?, k)?;
        let labels: Vec<String> = hyp.labels.iter().map(usize::to_string).collect();
        text.push_str(&format!("{}\t{}\n", u.id, labels.join(" ")));
    }
    match out {
        Some(p) => write(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_hypotheses(text: &str) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, labels) = line.split_once('\t').unwrap_or((line.trim(), ""));
        let labels = labels
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Failure::Data(format!("hypothesis line {}: bad label `{t}`", n + 1))))
            .collect::<Result<Vec<usize>, _>>()?;
        if out.insert(id.to_string(), labels).is_some() {
            return Err(Failure::Data(format!("hypothesis line {}: duplicate id `{id}`", n + 1)).into());
        }
    }
    Ok(out)
}

fn score(cfg: &RunConfig, hyp: &Path, split: &str, out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(hyp).with_context(|| format!("reading {}", hyp.display()))?;
    let hyps = parse_hypotheses(&text)?;
    let corpus = load(cfg)?;
    let mut rows = Vec::new();
    for u in corpus.split(parse_split(split)?) {
        let h = hyps
            .get(&u.id)
            .ok_or_else(|| Failure::Data(format!("no hypothesis for `{}`", u.id)))?;
        rows.push((u.id.clone(), label_error_rate(&u.transcript(), h)?));
    }
    let report = error_report(&rows);
    match out {
        Some(p) => write(p, &report),
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn inspect(cfg: &RunConfig, checkpoint: Option<&Path>, workers: usize) -> Result<()> {
    let ck = match checkpoint {
        Some(p) => Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let stack = fresh_model(cfg, cfg.feature_dim()?, cfg.labels()?, workers)?;
            Checkpoint {
                stack,
                noise_seed: cfg.seed()?,
                step: 0,
                provenance: None,
            }
        }
    };
    println!("source: {}", checkpoint.map_or("fresh model".to_string(), |p| p.display().to_string()));
    println!("format_version: {CHECKPOINT_VERSION}");
    println!("content_hash: {}", ck.content_hash());
    println!("noise_seed: {}", ck.noise_seed);
    println!("step: {}", ck.step);
    println!("provenance: {}", ck.provenance.as_deref().unwrap_or("none"));
    println!("topology: {}", ck.stack.topology.to_text().trim_end().replace('\n', "; "));
    let topo = &ck.stack.topology;
    let mut total = 0;
    for (l, (layer, counts)) in ck.stack.layers.iter().zip(ck.stack.table_counts()).enumerate() {
        let c = layer.spec.latent_dim.map_or("-".to_string(), |c| c.to_string());
        let linear = layer.linear.as_ref().map_or(0, |m| m.len());
        total += counts.total() + linear + layer.bias.len();
        println!(
            "layer{} mode={} a={} b={} c={} lambda-params={} w-params={} z-params={} linear-params={}",
            l + 1,
            layer.spec.mode,
            topo.affine_input(l),
            layer.spec.hidden,
            c,
            counts.lambda,
            counts.w,
            counts.z,
            linear
        );
    }
    total += ck.stack.output_w.len() + ck.stack.output_b.len();
    println!("output a={} labels={} params={}", ck.stack.output_w.rows(), topo.labels, ck.stack.output_w.len() + ck.stack.output_b.len());
    println!("trainable-params: {total}");
    Ok(())
}

fn verify(suite: Option<&str>, seed: u64) -> Result<()> {
    let names: Vec<&str> = match suite {
        Some(s) if SUITES.contains(&s) => vec![s],
        Some(s) => return Err(Failure::Usage(format!("unknown suite `{s}`, expected one of {}", SUITES.join(", "))).into()),
        None => SUITES.to_vec(),
    };
    let mut failed = 0;
    for name in names {
        let report = run_suite(name, seed)?;
        for c in &report.checks {
            println!("{} {}: {} ({})", if c.passed { "PASS" } else { "FAIL" }, report.suite, c.name, c.detail);
            failed += usize::from(!c.passed);
        }
    }
    if failed > 0 {
        return Err(Failure::Verification(format!("{failed} verification checks failed")).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::GenData { config, out } => gen_data(&read_config(config.as_deref())?, out),
        Command::Train { config, no_timestamp } => run_train(&read_config(config.as_deref())?, workers, !no_timestamp),
        Command::Adapt { config, no_timestamp } => run_adapt(&read_config(config.as_deref())?, workers, !no_timestamp),
        Command::Decode { config, checkpoint, split, out } => {
            decode(&read_config(config.as_deref())?, &checkpoint, &split, out.as_deref())
        }
        Command::Score { config, hyp, split, out } => score(&read_config(config.as_deref())?, &hyp, &split, out.as_deref()),
        Command::Inspect { config, checkpoint } => inspect(&read_config(config.as_deref())?, checkpoint.as_deref(), workers),
        Command::Verify { suite, seed } => verify(suite.as_deref(), seed),
        Command::Defaults => {
            print!("{}", config::defaults_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
