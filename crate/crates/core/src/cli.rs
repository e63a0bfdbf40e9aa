//! Command-line front end: `synth`, `train`, `eval`, `recommend`, `ablate`.
//!
//! Every command writes a run manifest (`manifest.txt` in its output
//! directory, or to stderr when it has none) with the effective settings
//! digest, the seed, SHA-256 digests of inputs and outputs, and timestamps.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::data::{self, Corpus, SyntheticSpec, UserHistory};
use crate::error::{Error, Result};
use crate::metrics;
use crate::trainer::{self, Ablation, TrainConfig};

pub const SEED_ENV: &str = "ALTRECO_SEED";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(name = "altreco", version, about = "Personalized image tag recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with clustered user behaviour.
    Synth(SynthArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the corpus test split.
    Eval(EvalArgs),
    /// Recommend tags for one image.
    Recommend(RecommendArgs),
    /// Train and evaluate the six ablation rows.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Settings file with a `[synth]` section; defaults to the standard corpus.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Preset flag set, A1..A6.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated cut-offs.
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    pub k: Vec<usize>,
    /// Zero every user history.
    #[arg(long)]
    pub cold_start: bool,
    /// Directory for the metrics, prediction dump and manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory holding the vocabulary (and the image, unless
    /// `--features` is given).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub image: String,
    /// Alternative features file to look the image up in.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Use this user's training history.
    #[arg(long)]
    pub user: Option<String>,
    /// Ad-hoc history: each listed tag counted once.
    #[arg(long)]
    pub history_tags: Option<String>,
    /// Staged histories, one list per flag; stages accumulate.
    #[arg(long = "stage")]
    pub stages: Vec<String>,
    #[arg(long)]
    pub cold_start: bool,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "3,5,10")]
    pub k: Vec<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

/// Parses `key = value` lines grouped under `[section]` headers. `#` starts
/// a comment. Keys before any header belong to `default_section`.
pub fn parse_settings(text: &str, default_section: &str) -> Result<Vec<(String, String, String)>> {
    let mut section = default_section.to_string();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            section = name
                .strip_suffix(']')
                .filter(|s| !s.trim().is_empty())
                .ok_or_else(|| Error::Config(format!("line {}: malformed section header", i + 1)))?
                .trim()
                .to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_settings(path: &Path, default_section: &str) -> Result<Vec<(String, String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_settings(&text, default_section).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Seed precedence: command-line flag, then environment, then file.
fn resolve_seed(flag: Option<u64>, file: u64) -> Result<u64> {
    Ok(flag.or(env_seed()?).unwrap_or(file))
}

pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = path {
        for (section, k, v) in read_settings(p, "train")? {
            cfg.set(&section, &k, &v)?;
        }
    }
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Provenance record of one command invocation.
#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: Option<u64>,
    pub inputs: Vec<(PathBuf, String)>,
    pub outputs: Vec<(PathBuf, String)>,
    pub started: u64,
    pub finished: u64,
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: now(),
            ..Self::default()
        }
    }

    fn settings(&mut self, kv: &[(String, String)]) {
        let text: String = kv.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        self.config_digest = sha256_hex(text.as_bytes());
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let d = file_digest(path)?;
        self.inputs.push((path.to_path_buf(), d));
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let d = file_digest(path)?;
        self.outputs.push((path.to_path_buf(), d));
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = format!("command = {}\nconfig_digest = {}\n", self.command, self.config_digest);
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed = {seed}\n"));
        }
        for (p, d) in &self.inputs {
            s.push_str(&format!("input = {} sha256:{d}\n", p.display()));
        }
        for (p, d) in &self.outputs {
            s.push_str(&format!("output = {} sha256:{d}\n", p.display()));
        }
        for (k, v) in &self.extra {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str(&format!("started = {}\nfinished = {}\n", self.started, self.finished));
        s
    }

    fn finish(mut self, dir: Option<&Path>) -> Result<()> {
        self.finished = now();
        match dir {
            Some(d) => data::write_atomic(&d.join(MANIFEST_FILE), self.render().as_bytes()),
            None => {
                eprint!("{}", self.render());
                Ok(())
            }
        }
    }
}

fn corpus_inputs(m: &mut RunManifest, dir: &Path) -> Result<()> {
    for f in [data::VOCAB_FILE, data::INTERACTIONS_FILE, data::FEATURES_FILE] {
        m.input(&dir.join(f))?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut m = RunManifest::start("synth");
    let mut spec = SyntheticSpec::acceptance();
    if let Some(p) = &args.spec {
        m.input(p)?;
        for (section, k, v) in read_settings(p, "synth")? {
            if section != "synth" {
                return Err(Error::Config(format!("unexpected section [{section}] in synthetic spec")));
            }
            spec.set(&k, &v)?;
        }
    }
    spec.seed = resolve_seed(args.seed, spec.seed)?;
    spec.validate()?;
    m.seed = Some(spec.seed);
    m.settings(&spec.to_kv());
    let generated = data::generate_synthetic(&spec)?;
    data::save_corpus(&args.out, &generated.corpus)?;
    let clusters = args.out.join(data::CLUSTERS_FILE);
    data::save_clusters(&clusters, &generated.clusters)?;
    for f in [data::VOCAB_FILE, data::INTERACTIONS_FILE, data::FEATURES_FILE] {
        m.output(&args.out.join(f))?;
    }
    m.output(&clusters)?;
    println!(
        "wrote {} images, {} users, {} tags to {}",
        generated.corpus.samples.len(),
        spec.num_users,
        spec.vocab_size,
        args.out.display()
    );
    m.finish(Some(&args.out))
}

fn train_config(config: Option<&Path>, ablation: Option<Ablation>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = load_train_config(config)?;
    if let Some(a) = ablation {
        cfg.apply_ablation(a);
    }
    cfg.seed = resolve_seed(seed, cfg.seed)?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut m = RunManifest::start("train");
    let mut cfg = train_config(args.config.as_deref(), args.ablation, args.seed)?;
    if let Some(n) = args.max_steps {
        cfg.max_steps = n;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    if let Some(p) = &args.config {
        m.input(p)?;
    }
    m.seed = Some(cfg.seed);
    m.settings(&cfg.to_kv());
    let corpus = data::load_corpus(&args.corpus)?;
    corpus_inputs(&mut m, &args.corpus)?;
    let outcome = trainer::train(&corpus, &cfg, Some(&args.out))?;
    for f in [trainer::CHECKPOINT_FILE, trainer::REPORT_FILE, trainer::SUMMARY_FILE] {
        m.output(&args.out.join(f))?;
    }
    m.extra.push(("wall_clock_secs".into(), format!("{:.3}", outcome.report.wall_clock_secs)));
    print!("{}", outcome.report.summary_table());
    m.finish(Some(&args.out))
}

fn split_from_meta(ck: &data::Checkpoint, corpus: &Corpus) -> Result<data::Split> {
    let seed: u64 = ck
        .meta("seed")
        .ok_or_else(|| Error::Format("checkpoint lacks its training seed".into()))?
        .parse()
        .map_err(|_| Error::Format("checkpoint seed is not an integer".into()))?;
    let frac: f64 = ck
        .meta("test_fraction")
        .unwrap_or("0.2")
        .parse()
        .map_err(|_| Error::Format("checkpoint test fraction is not a number".into()))?;
    corpus.split(frac, seed)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut m = RunManifest::start("eval");
    if args.k.is_empty() {
        return Err(Error::Config("at least one k is required".into()));
    }
    m.settings(&[
        ("k".into(), format!("{:?}", args.k)),
        ("cold_start".into(), args.cold_start.to_string()),
    ]);
    let corpus = data::load_corpus(&args.corpus)?;
    let ck = data::load_checkpoint(&args.checkpoint)?;
    m.input(&args.checkpoint)?;
    corpus_inputs(&mut m, &args.corpus)?;
    ck.check_compatible(corpus.vocab.len(), corpus.feature_dim())?;
    let split = split_from_meta(&ck, &corpus)?;
    m.seed = ck.meta("seed").and_then(|s| s.parse().ok());
    let histories = trainer::train_histories(&corpus, &split)?;
    let preds = trainer::predictions(&ck.model, &corpus, &split, &histories, args.cold_start)?;
    let scored: Vec<_> = preds.iter().filter(|p| !p.truth.is_empty()).cloned().collect();
    let report = metrics::MetricsReport::evaluate(&scored, &args.k)?;
    print!("{}", report.to_table());
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out.as_path(), e))?;
        let ids: Vec<&str> = split.test.iter().map(|&i| corpus.samples[i].image_id.as_str()).collect();
        let dump = metrics::write_prediction_dump(ids.iter().copied().zip(preds.iter().map(|p| p.ranked.as_slice())));
        let files = [
            ("metrics.txt", report.to_table()),
            ("metrics.tsv", report.to_records()),
            ("predictions.tsv", dump),
        ];
        for (name, text) in files {
            let p = out.join(name);
            data::write_atomic(&p, text.as_bytes())?;
            m.output(&p)?;
        }
    }
    m.finish(args.out.as_deref())
}

fn image_features(args: &RecommendArgs, corpus: &Corpus) -> Result<Vec<f64>> {
    match &args.features {
        Some(p) => data::load_features(p)?
            .into_iter()
            .find(|(id, _)| *id == args.image)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::Format(format!("image `{}` not in {}", args.image, p.display()))),
        None => corpus
            .samples
            .iter()
            .find(|s| s.image_id == args.image)
            .map(|s| s.features.clone())
            .ok_or_else(|| Error::Format(format!("image `{}` not in corpus", args.image))),
    }
}

fn cmd_recommend(args: &RecommendArgs) -> Result<()> {
    let mut m = RunManifest::start("recommend");
    m.settings(&[
        ("image".into(), args.image.clone()),
        ("k".into(), args.k.to_string()),
        ("user".into(), args.user.clone().unwrap_or_default()),
        ("history_tags".into(), args.history_tags.clone().unwrap_or_default()),
        ("stages".into(), args.stages.join(";")),
        ("cold_start".into(), args.cold_start.to_string()),
    ]);
    let sources = [args.user.is_some(), args.history_tags.is_some(), !args.stages.is_empty()];
    if sources.iter().filter(|b| **b).count() > 1 || (args.cold_start && sources.iter().any(|b| *b)) {
        return Err(Error::Config(
            "choose one of --user, --history-tags, --stage or --cold-start".into(),
        ));
    }
    let corpus = data::load_corpus(&args.corpus)?;
    let ck = data::load_checkpoint(&args.checkpoint)?;
    m.input(&args.checkpoint)?;
    corpus_inputs(&mut m, &args.corpus)?;
    if let Some(p) = &args.features {
        m.input(p)?;
    }
    ck.check_compatible(corpus.vocab.len(), corpus.feature_dim())?;
    let n = corpus.vocab.len();
    if args.k == 0 || args.k > n {
        return Err(Error::Config(format!("k must be in 1..={n}")));
    }
    let features = image_features(args, &corpus)?;
    let vocab = &corpus.vocab;

    if !args.stages.is_empty() {
        let mut acc = BTreeSet::new();
        let mut stages = vec![BTreeSet::new()];
        for s in &args.stages {
            acc.extend(vocab.parse_list(s)?);
            stages.push(acc.clone());
        }
        let recs = trainer::run_dynamic_history(&ck.model, &features, &stages, args.k)?;
        println!("stage\thistory\trecommendation");
        for (i, (hist, rec)) in stages.iter().zip(&recs).enumerate() {
            let h: Vec<&str> = hist.iter().map(|&t| vocab.tag(t)).collect();
            let r: Vec<&str> = rec.iter().map(|&(t, _)| vocab.tag(t)).collect();
            println!("{i}\t{}\t{}", h.join(","), r.join(","));
        }
        return m.finish(None);
    }

    let history = if let Some(user) = &args.user {
        let split = split_from_meta(&ck, &corpus)?;
        data::build_user_history(&corpus.samples, user, &split.test_ids(&corpus), n)?
    } else if let Some(tags) = &args.history_tags {
        UserHistory::from_tags("adhoc", &vocab.parse_list(tags)?, n)?
    } else {
        UserHistory::cold_start("cold", n)
    };
    for (t, score) in trainer::recommend(&ck.model, &features, &history.vector, args.k)? {
        println!("{}\t{score:.6}", vocab.tag(t));
    }
    m.finish(None)
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut m = RunManifest::start("ablate");
    let mut cfg = train_config(args.config.as_deref(), None, args.seed)?;
    if let Some(n) = args.max_steps {
        cfg.max_steps = n;
    }
    cfg.validate()?;
    if let Some(p) = &args.config {
        m.input(p)?;
    }
    m.seed = Some(cfg.seed);
    m.settings(&cfg.to_kv());
    let corpus = data::load_corpus(&args.corpus)?;
    corpus_inputs(&mut m, &args.corpus)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(args.out.as_path(), e))?;
    let mut written = Vec::new();
    let table = trainer::run_ablation_suite(&corpus, &cfg, &args.k, |a, row_cfg, outcome| {
        let dir = args.out.join(a.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.as_path(), e))?;
        let ck = dir.join(trainer::CHECKPOINT_FILE);
        let meta = trainer::checkpoint_meta(row_cfg, &corpus, outcome.report.steps.len());
        data::save_checkpoint(&ck, &outcome.model, &outcome.opt_main, &outcome.opt_disc, &meta)?;
        let report = dir.join(trainer::REPORT_FILE);
        data::write_atomic(&report, outcome.report.to_records().as_bytes())?;
        written.push(ck);
        written.push(report);
        eprintln!("{a}: trained {} steps", outcome.report.steps.len());
        Ok(())
    })?;
    let text = table.to_table();
    print!("{text}");
    let path = args.out.join("ablation.txt");
    data::write_atomic(&path, text.as_bytes())?;
    written.push(path);
    for p in &written {
        m.output(p)?;
    }
    m.finish(Some(&args.out))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Recommend(a) => cmd_recommend(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
