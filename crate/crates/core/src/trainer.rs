//! Alternating discriminator / main-network training, ablation presets and
//! the evaluation experiments built on a trained model.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};

use crate::data::{self, build_all_histories, Corpus, Split, UserHistory};
use crate::error::{Error, Result};
use crate::losses::{self, HuberConfig, JitterConfig, LossWeights};
use crate::metrics::{self, MetricsReport, PredictionSet};
use crate::model::{ModelConfig, TagNet, DISC_PREFIX, MAIN_PREFIXES};
use crate::optim::{AdadeltaConfig, AdadeltaState};
use crate::seed::{self, Rng};
use crate::tensor::{Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.tsv";
pub const SUMMARY_FILE: &str = "summary.txt";

const EVAL_CHUNK: usize = 256;
const PLATEAU_WINDOW: usize = 100;
const PLATEAU_TOLERANCE: f64 = 1e-3;

/// Where the adversarial loss attaches, if anywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversarialMode {
    Off,
    /// On the generalized branch `t_g` (Adv-I).
    Independent,
    /// On the personalized head `t_p` (Adv-P).
    Personalized,
}

impl fmt::Display for AdversarialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdversarialMode::Off => "off",
            AdversarialMode::Independent => "independent",
            AdversarialMode::Personalized => "personalized",
        })
    }
}

impl FromStr for AdversarialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(Self::Off),
            "independent" | "adv-i" => Ok(Self::Independent),
            "personalized" | "adv-p" => Ok(Self::Personalized),
            other => Err(Error::Config(format!("unknown adversarial mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reconstruction {
    Huber,
    Squared,
}

impl fmt::Display for Reconstruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reconstruction::Huber => "huber",
            Reconstruction::Squared => "squared",
        })
    }
}

impl FromStr for Reconstruction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "huber" => Ok(Self::Huber),
            "squared" | "mse" => Ok(Self::Squared),
            other => Err(Error::Config(format!("unknown reconstruction loss `{other}`"))),
        }
    }
}

/// The six rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationFlags {
    pub use_preference: bool,
    pub adversarial: AdversarialMode,
    pub joint_training: bool,
    pub cold_start_eval: bool,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [Self::A1, Self::A2, Self::A3, Self::A4, Self::A5, Self::A6];

    pub fn flags(self) -> AblationFlags {
        use AdversarialMode::*;
        let (use_preference, adversarial, joint_training, cold_start_eval) = match self {
            Self::A1 => (false, Off, false, false),
            Self::A2 => (true, Off, true, false),
            Self::A3 => (true, Independent, false, false),
            Self::A4 => (true, Independent, true, true),
            Self::A5 => (true, Personalized, true, false),
            Self::A6 => (true, Independent, true, false),
        };
        AblationFlags {
            use_preference,
            adversarial,
            joint_training,
            cold_start_eval,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (expected A1..A6)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub test_fraction: f64,
    pub loss_weights: LossWeights,
    pub jitter: JitterConfig,
    pub huber: HuberConfig,
    pub reconstruction: Reconstruction,
    pub optimizer: AdadeltaConfig,
    pub use_preference: bool,
    pub adversarial: AdversarialMode,
    pub joint_training: bool,
    pub cold_start_eval: bool,
    /// Autoencoder-only steps before the rest trains, when not joint.
    pub pretrain_steps: usize,
    /// Stop once the 100-step moving average of the total loss stalls.
    pub early_stop: bool,
    pub checkpoint_every: Option<usize>,
    /// Use `-log D(t)` instead of `log(1 - D(t))` for the adversarial term.
    pub non_saturating: bool,
    /// `model.*` settings applied on top of the default architecture.
    pub model_overrides: Vec<(String, String)>,
    pub ablation: Option<Ablation>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 50,
            max_steps: 2000,
            seed: 42,
            test_fraction: 0.2,
            loss_weights: LossWeights::default(),
            jitter: JitterConfig::default(),
            huber: HuberConfig::default(),
            reconstruction: Reconstruction::Huber,
            optimizer: AdadeltaConfig::default(),
            use_preference: true,
            adversarial: AdversarialMode::Independent,
            joint_training: true,
            cold_start_eval: false,
            pretrain_steps: 1000,
            early_stop: false,
            checkpoint_every: None,
            non_saturating: false,
            model_overrides: Vec::new(),
            ablation: None,
        }
    }
}

impl TrainConfig {
    pub fn for_ablation(ablation: Ablation) -> Self {
        let mut cfg = Self::default();
        cfg.apply_ablation(ablation);
        cfg
    }

    pub fn apply_ablation(&mut self, ablation: Ablation) {
        let f = ablation.flags();
        self.use_preference = f.use_preference;
        self.adversarial = f.adversarial;
        self.joint_training = f.joint_training;
        self.cold_start_eval = f.cold_start_eval;
        self.ablation = Some(ablation);
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.adversarial == AdversarialMode::Personalized && !self.use_preference {
            return Err(Error::Config("adversarial loss on personalized tags requires user preference".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test_fraction must be in [0, 1)".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        self.loss_weights.validate()?;
        self.jitter.validate()?;
        self.huber.validate()
    }

    pub fn model_config(&self, vocab_size: usize, feature_dim: usize) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(vocab_size, feature_dim);
        for (k, v) in &self.model_overrides {
            if k == "encoder_widths" {
                let widths: Vec<usize> = v
                    .split(',')
                    .map(|w| w.trim().parse().map_err(|_| Error::Config(format!("bad encoder width list `{v}`"))))
                    .collect::<Result<_>>()?;
                m = m.with_encoder_widths(&widths);
            } else {
                m.set(k, v)?;
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Applies one `section.key = value` setting.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for {section}.{key}"));
        let v = value.trim();
        let float = || v.parse::<f64>().map_err(|_| bad());
        let int = || v.parse::<usize>().map_err(|_| bad());
        let flag = || v.parse::<bool>().map_err(|_| bad());
        match (section, key) {
            ("train", "batch_size") => self.batch_size = int()?,
            ("train", "max_steps") => self.max_steps = int()?,
            ("train", "seed") => self.seed = v.parse().map_err(|_| bad())?,
            ("train", "test_fraction") => self.test_fraction = float()?,
            ("train", "pretrain_steps") => self.pretrain_steps = int()?,
            ("train", "early_stop") => self.early_stop = flag()?,
            ("train", "checkpoint_every") => self.checkpoint_every = Some(int()?),
            ("train", "non_saturating") => self.non_saturating = flag()?,
            ("train", "use_preference") => self.use_preference = flag()?,
            ("train", "adversarial") => self.adversarial = v.parse()?,
            ("train", "joint_training") => self.joint_training = flag()?,
            ("train", "cold_start_eval") => self.cold_start_eval = flag()?,
            ("train", "reconstruction") => self.reconstruction = v.parse()?,
            ("train", "ablation") => self.apply_ablation(v.parse()?),
            ("loss", "alpha") => self.loss_weights.alpha = float()?,
            ("loss", "beta") => self.loss_weights.beta = float()?,
            ("loss", "gamma") => self.loss_weights.gamma = float()?,
            ("loss", "theta") => self.loss_weights.theta = float()?,
            ("loss", "eta") => self.jitter.eta = float()?,
            ("loss", "iota") => self.jitter.iota = float()?,
            ("loss", "delta") => self.huber.delta = float()?,
            ("optim", "rho") => self.optimizer.rho = float()?,
            ("optim", "epsilon") => self.optimizer.epsilon = float()?,
            ("optim", "lr") => self.optimizer.lr = float()?,
            ("model", k) => {
                ModelConfig::new(1, 1).set(k, v)?;
                self.model_overrides.retain(|(name, _)| name != k);
                self.model_overrides.push((k.to_string(), v.to_string()));
            }
            _ => return Err(Error::Config(format!("unknown setting {section}.{key}"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        if let Some(a) = self.ablation {
            kv.push(("train.ablation".into(), a.to_string()));
        }
        kv.extend([
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.max_steps".into(), self.max_steps.to_string()),
            ("train.seed".into(), self.seed.to_string()),
            ("train.test_fraction".into(), format!("{:?}", self.test_fraction)),
            ("train.pretrain_steps".into(), self.pretrain_steps.to_string()),
            ("train.early_stop".into(), self.early_stop.to_string()),
            ("train.non_saturating".into(), self.non_saturating.to_string()),
            ("train.use_preference".into(), self.use_preference.to_string()),
            ("train.adversarial".into(), self.adversarial.to_string()),
            ("train.joint_training".into(), self.joint_training.to_string()),
            ("train.cold_start_eval".into(), self.cold_start_eval.to_string()),
            ("train.reconstruction".into(), self.reconstruction.to_string()),
            ("loss.alpha".into(), format!("{:?}", self.loss_weights.alpha)),
            ("loss.beta".into(), format!("{:?}", self.loss_weights.beta)),
            ("loss.gamma".into(), format!("{:?}", self.loss_weights.gamma)),
            ("loss.theta".into(), format!("{:?}", self.loss_weights.theta)),
            ("loss.eta".into(), format!("{:?}", self.jitter.eta)),
            ("loss.iota".into(), format!("{:?}", self.jitter.iota)),
            ("loss.delta".into(), format!("{:?}", self.huber.delta)),
            ("optim.rho".into(), format!("{:?}", self.optimizer.rho)),
            ("optim.epsilon".into(), format!("{:?}", self.optimizer.epsilon)),
            ("optim.lr".into(), format!("{:?}", self.optimizer.lr)),
        ]);
        if let Some(n) = self.checkpoint_every {
            kv.push(("train.checkpoint_every".into(), n.to_string()));
        }
        kv.extend(self.model_overrides.iter().map(|(k, v)| (format!("model.{k}"), v.clone())));
        kv
    }
}

/// Which loss terms are live for a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepGates {
    pub preference: bool,
    pub reconstruction: bool,
    pub adversarial: AdversarialMode,
}

impl StepGates {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            preference: cfg.use_preference,
            reconstruction: cfg.use_preference && cfg.loss_weights.gamma > 0.0,
            adversarial: cfg.adversarial,
        }
    }
}

/// Loss values and discriminator scores for one step. Absent terms are
/// `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub l_p: f64,
    pub l_g: f64,
    pub l_r: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_d: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    pub l_t: f64,
}

impl StepRecord {
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("l_p", self.l_p), ("l_g", self.l_g)];
        let optional = [
            ("l_r", self.l_r),
            ("l_adv", self.l_adv),
            ("l_d", self.l_d),
            ("d_real", self.d_real),
            ("d_fake", self.d_fake),
        ];
        v.extend(optional.into_iter().filter_map(|(n, x)| x.map(|x| (n, x))));
        v.push(("l_t", self.l_t));
        v
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Autoencoder pre-training `L_r`, only for non-joint schedules.
    pub pretrain: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// `step<TAB>name<TAB>value` lines. Timing is left out so identical runs
    /// give identical text.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.pretrain.iter().enumerate() {
            out.push_str(&format!("{}\tpre_l_r\t{v:?}\n", i + 1));
        }
        for r in &self.steps {
            for (name, v) in r.values() {
                out.push_str(&format!("{}\t{name}\t{v:?}\n", r.step));
            }
        }
        out
    }

    /// Mean of a named series over the first and last `window` steps.
    pub fn first_last_mean(&self, name: &str, window: usize) -> Option<(f64, f64)> {
        let series: Vec<f64> = self
            .steps
            .iter()
            .filter_map(|r| r.values().into_iter().find(|(n, _)| *n == name).map(|(_, v)| v))
            .collect();
        if series.is_empty() {
            return None;
        }
        let w = window.min(series.len());
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&series[..w]), mean(&series[series.len() - w..])))
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.steps.last()
    }

    pub fn summary_table(&self) -> String {
        let mut out = format!("{:<8} {:>12} {:>12}\n", "loss", "first20", "last20");
        for name in ["l_p", "l_g", "l_r", "l_adv", "l_d", "d_real", "d_fake", "l_t"] {
            if let Some((a, b)) = self.first_last_mean(name, 20) {
                out.push_str(&format!("{name:<8} {a:>12.6} {b:>12.6}\n"));
            }
        }
        out.push_str(&format!("steps    {}\n", self.steps.len()));
        if !self.pretrain.is_empty() {
            out.push_str(&format!("pretrain {}\n", self.pretrain.len()));
        }
        out
    }
}

/// Stacked inputs for a minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub u_h: Tensor,
    pub labels: Tensor,
}

impl Batch {
    /// Gathers samples `indices`; histories are zeroed when `use_preference`
    /// is false or the user has none.
    pub fn gather(
        corpus: &Corpus,
        indices: &[usize],
        histories: &HashMap<String, UserHistory>,
        use_preference: bool,
    ) -> Result<Self> {
        let n = corpus.vocab.len();
        let zeros = vec![0.0; n];
        let mut x = Vec::with_capacity(indices.len());
        let mut u = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &corpus.samples[i];
            x.push(s.features.as_slice());
            let h = match histories.get(&s.user_id) {
                Some(h) if use_preference => h.vector.as_slice(),
                _ => zeros.as_slice(),
            };
            u.push(h);
            labels.push(s.label_vector(n));
        }
        Ok(Self {
            x: Tensor::from_rows(&x)?,
            u_h: Tensor::from_rows(&u)?,
            labels: Tensor::from_rows(&labels)?,
        })
    }
}

fn named<T>(term: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{term}: {op}"),
        },
        other => other,
    })
}

fn scalar_of(tape: &Tape, v: crate::tensor::Var, term: &str) -> Result<f64> {
    let x = tape.value(v).item()?;
    if !x.is_finite() {
        return Err(Error::Numeric { op: term.to_string() });
    }
    Ok(x)
}

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel().max(1) as f64
}

/// Discriminator update: real = jittered ground truth, fake = the branch
/// output the adversarial loss attaches to, computed without a path back
/// into the main network. Only D's parameters change.
/// Returns `(L_d, mean D(real), mean D(fake))`.
pub fn discriminator_phase(
    model: &mut TagNet,
    batch: &Batch,
    cfg: &TrainConfig,
    gates: StepGates,
    opt_disc: &mut AdadeltaState,
    rng: &mut Rng,
) -> Result<(f64, f64, f64)> {
    let fake = match gates.adversarial {
        AdversarialMode::Off => return Err(Error::contract("discriminator phase with adversarial loss off")),
        AdversarialMode::Independent => model.predict_generalized(&batch.x)?,
        AdversarialMode::Personalized => model.predict(&batch.x, &batch.u_h)?,
    };
    let real = Tensor::new(
        batch.labels.shape().to_vec(),
        losses::jitter_ground_truth(batch.labels.data(), cfg.jitter, rng),
    )?;
    let mut tape = Tape::new();
    let rv = tape.constant(&real)?;
    let fv = tape.constant(&fake)?;
    let d_real = named("L_d", model.discriminate(&mut tape, rv))?;
    let d_fake = named("L_d", model.discriminate(&mut tape, fv))?;
    let l_d = named("L_d", losses::discriminator_loss(&mut tape, d_real, d_fake))?;
    let (dr, df) = (mean(tape.value(d_real)), mean(tape.value(d_fake)));
    let value = scalar_of(&tape, l_d, "L_d")?;
    let grads = named("L_d", tape.backward(l_d))?;
    model.disc.accumulate(&grads)?;
    opt_disc.step(&mut model.disc)?;
    Ok((value, dr, df))
}

/// Main-network update on the weighted total loss. D is read but never
/// written.
pub fn main_phase(
    model: &mut TagNet,
    batch: &Batch,
    cfg: &TrainConfig,
    gates: StepGates,
    opt_main: &mut AdadeltaState,
) -> Result<StepRecord> {
    let w = cfg.loss_weights;
    let mut tape = Tape::new();
    let xv = tape.constant(&batch.x)?;
    let uv = tape.constant(&batch.u_h)?;
    let labels = tape.constant(&batch.labels)?;

    let e = named("F", model.visual_encode(&mut tape, xv))?;
    let (u_p, skips) = named("U_E", model.preference_encode(&mut tape, uv))?;
    let t_p = named("L_p", model.classify_personalized(&mut tape, e, u_p))?;
    let t_g = named("L_g", model.generate_tags(&mut tape, e))?;
    let l_p = named("L_p", losses::bce_multilabel(&mut tape, t_p, labels))?;
    let l_g = named("L_g", losses::bce_multilabel(&mut tape, t_g, labels))?;

    let l_r = if gates.reconstruction {
        let u_hat = named("L_r", model.preference_decode(&mut tape, u_p, skips))?;
        Some(named(
            "L_r",
            match cfg.reconstruction {
                Reconstruction::Huber => losses::huber_reconstruction(&mut tape, u_hat, uv, cfg.huber),
                Reconstruction::Squared => losses::squared_reconstruction(&mut tape, u_hat, uv),
            },
        )?)
    } else {
        None
    };

    let l_adv = match gates.adversarial {
        AdversarialMode::Off => None,
        mode => {
            let target = if mode == AdversarialMode::Independent { t_g } else { t_p };
            model.disc.set_trainable(DISC_PREFIX, false);
            let scored = model.discriminate(&mut tape, target);
            model.disc.set_trainable(DISC_PREFIX, true);
            let d = named("L_adv", scored)?;
            Some(named(
                "L_adv",
                if cfg.non_saturating {
                    losses::non_saturating_generator_loss(&mut tape, d)
                } else {
                    losses::adversarial_generator_loss(&mut tape, d)
                },
            )?)
        }
    };

    let mut weights = w;
    if !gates.preference {
        weights.gamma = 0.0;
    }
    let l_t = named("L_t", losses::total_loss(&mut tape, Some(l_p), Some(l_g), l_r, l_adv, weights))?;
    let record = StepRecord {
        step: 0,
        l_p: scalar_of(&tape, l_p, "L_p")?,
        l_g: scalar_of(&tape, l_g, "L_g")?,
        l_r: l_r.map(|v| scalar_of(&tape, v, "L_r")).transpose()?,
        l_adv: l_adv.map(|v| scalar_of(&tape, v, "L_adv")).transpose()?,
        l_d: None,
        d_real: None,
        d_fake: None,
        l_t: scalar_of(&tape, l_t, "L_t")?,
    };
    let grads = named("L_t", tape.backward(l_t))?;
    model.main.accumulate(&grads)?;
    opt_main.step(&mut model.main)?;
    Ok(record)
}

/// One alternating step: discriminator first (when adversarial), then the
/// main network.
pub fn train_step(
    model: &mut TagNet,
    batch: &Batch,
    cfg: &TrainConfig,
    gates: StepGates,
    opt_main: &mut AdadeltaState,
    opt_disc: &mut AdadeltaState,
    rng: &mut Rng,
) -> Result<StepRecord> {
    let disc = match gates.adversarial {
        AdversarialMode::Off => None,
        _ => Some(discriminator_phase(model, batch, cfg, gates, opt_disc, rng)?),
    };
    let mut record = main_phase(model, batch, cfg, gates, opt_main)?;
    if let Some((l_d, dr, df)) = disc {
        record.l_d = Some(l_d);
        record.d_real = Some(dr);
        record.d_fake = Some(df);
    }
    Ok(record)
}

/// Autoencoder-only step on `L_r`; every other sub-network must be frozen.
fn pretrain_step(model: &mut TagNet, batch: &Batch, cfg: &TrainConfig, opt_main: &mut AdadeltaState) -> Result<f64> {
    let mut tape = Tape::new();
    let uv = tape.constant(&batch.u_h)?;
    let (u_p, skips) = named("U_E", model.preference_encode(&mut tape, uv))?;
    let u_hat = named("L_r", model.preference_decode(&mut tape, u_p, skips))?;
    let l_r = named(
        "L_r",
        match cfg.reconstruction {
            Reconstruction::Huber => losses::huber_reconstruction(&mut tape, u_hat, uv, cfg.huber),
            Reconstruction::Squared => losses::squared_reconstruction(&mut tape, u_hat, uv),
        },
    )?;
    let value = scalar_of(&tape, l_r, "L_r")?;
    let grads = named("L_r", tape.backward(l_r))?;
    model.main.accumulate(&grads)?;
    opt_main.step(&mut model.main)?;
    Ok(value)
}

/// True once the mean of the last `PLATEAU_WINDOW` values improved on the
/// window before it by less than `PLATEAU_TOLERANCE` (relative).
pub fn plateaued(values: &[f64]) -> bool {
    let w = PLATEAU_WINDOW;
    if values.len() < 2 * w {
        return false;
    }
    let n = values.len();
    let prev = values[n - 2 * w..n - w].iter().sum::<f64>() / w as f64;
    let cur = values[n - w..].iter().sum::<f64>() / w as f64;
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < PLATEAU_TOLERANCE
}

/// Seeded minibatch order with a reshuffle at every epoch boundary.
struct Batcher {
    indices: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: Rng,
}

impl Batcher {
    fn new(mut indices: Vec<usize>, batch_size: usize, mut rng: Rng) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("training split is empty".into()));
        }
        indices.shuffle(&mut rng);
        Ok(Self {
            indices,
            pos: 0,
            batch_size,
            rng,
        })
    }

    fn next(&mut self) -> &[usize] {
        if self.pos >= self.indices.len() {
            self.indices.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.indices.len());
        let s = &self.indices[self.pos..end];
        self.pos = end;
        s
    }
}

/// A finished run and everything needed to evaluate it.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: TagNet,
    pub opt_main: AdadeltaState,
    pub opt_disc: AdadeltaState,
    pub report: TrainReport,
    pub split: Split,
    pub histories: HashMap<String, UserHistory>,
}

/// Metadata stored alongside a checkpoint; `seed` and `test_fraction` let
/// evaluation rebuild the same split.
pub fn checkpoint_meta(cfg: &TrainConfig, corpus: &Corpus, steps: usize) -> Vec<(String, String)> {
    let mut meta = vec![
        ("steps".to_string(), steps.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("test_fraction".to_string(), format!("{:?}", cfg.test_fraction)),
        ("corpus_digest".to_string(), format!("{:016x}", corpus.digest())),
        ("use_preference".to_string(), cfg.use_preference.to_string()),
        ("adversarial".to_string(), cfg.adversarial.to_string()),
        ("joint_training".to_string(), cfg.joint_training.to_string()),
    ];
    if let Some(a) = cfg.ablation {
        meta.push(("ablation".to_string(), a.to_string()));
    }
    meta
}

/// Histories from the training split only.
pub fn train_histories(corpus: &Corpus, split: &Split) -> Result<HashMap<String, UserHistory>> {
    build_all_histories(&corpus.samples, &split.test_ids(corpus), corpus.vocab.len())
}

/// Full training run. With `out_dir`, writes the final checkpoint, the
/// report records and summary, and any interval checkpoints.
pub fn train(corpus: &Corpus, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let split = corpus.split(cfg.test_fraction, cfg.seed)?;
    let histories = train_histories(corpus, &split)?;
    let mconf = cfg.model_config(corpus.vocab.len(), corpus.feature_dim())?;
    let mut model = TagNet::new(mconf, cfg.seed)?;
    let mut opt_main = AdadeltaState::new(&model.main, cfg.optimizer);
    let mut opt_disc = AdadeltaState::new(&model.disc, cfg.optimizer);
    let mut jitter_rng = seed::rng(cfg.seed, seed::JITTER);
    let mut batcher = Batcher::new(split.train.clone(), cfg.batch_size, seed::rng(cfg.seed, seed::SHUFFLE))?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    if !cfg.use_preference {
        model.main.set_trainable("ue", false);
        model.main.set_trainable("ud", false);
    }
    let mut report = TrainReport::default();
    let mut gates = StepGates::from_config(cfg);

    if cfg.use_preference && !cfg.joint_training {
        for p in MAIN_PREFIXES.iter().filter(|p| !matches!(**p, "ue" | "ud")) {
            model.main.set_trainable(p, false);
        }
        for _ in 0..cfg.pretrain_steps {
            let batch = Batch::gather(corpus, batcher.next(), &histories, true)?;
            report.pretrain.push(pretrain_step(&mut model, &batch, cfg, &mut opt_main)?);
            if plateaued(&report.pretrain) {
                break;
            }
        }
        for p in MAIN_PREFIXES {
            model.main.set_trainable(p, !matches!(p, "ue" | "ud"));
        }
        gates.reconstruction = false;
    }

    let mut totals = Vec::with_capacity(cfg.max_steps);
    for step in 1..=cfg.max_steps {
        let batch = Batch::gather(corpus, batcher.next(), &histories, cfg.use_preference)?;
        let mut record = train_step(&mut model, &batch, cfg, gates, &mut opt_main, &mut opt_disc, &mut jitter_rng)?;
        record.step = step;
        totals.push(record.l_t);
        report.steps.push(record);
        if let (Some(dir), Some(every)) = (out_dir, cfg.checkpoint_every) {
            if step % every == 0 && step != cfg.max_steps {
                let meta = checkpoint_meta(cfg, corpus, step);
                data::save_checkpoint(&dir.join(format!("step{step:06}.ckpt")), &model, &opt_main, &opt_disc, &meta)?;
            }
        }
        if cfg.early_stop && plateaued(&totals) {
            break;
        }
    }

    let mut outcome = TrainOutcome {
        model,
        opt_main,
        opt_disc,
        report,
        split,
        histories,
    };
    if let Some(dir) = out_dir {
        let path = dir.join(CHECKPOINT_FILE);
        let meta = checkpoint_meta(cfg, corpus, outcome.report.steps.len());
        data::save_checkpoint(&path, &outcome.model, &outcome.opt_main, &outcome.opt_disc, &meta)?;
        data::write_atomic(&dir.join(REPORT_FILE), outcome.report.to_records().as_bytes())?;
        data::write_atomic(&dir.join(SUMMARY_FILE), outcome.report.summary_table().as_bytes())?;
        outcome.report.checkpoint = Some(path);
    }
    outcome.report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Personalized scores for samples `indices`, in chunks.
pub fn score_samples(
    model: &TagNet,
    corpus: &Corpus,
    indices: &[usize],
    histories: &HashMap<String, UserHistory>,
    cold_start: bool,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = Batch::gather(corpus, chunk, histories, !cold_start)?;
        let scores = model.predict(&batch.x, &batch.u_h)?;
        out.extend((0..chunk.len()).map(|r| scores.row(r).to_vec()));
    }
    Ok(out)
}

/// Ranked predictions for the test split.
pub fn predictions(
    model: &TagNet,
    corpus: &Corpus,
    split: &Split,
    histories: &HashMap<String, UserHistory>,
    cold_start: bool,
) -> Result<Vec<PredictionSet>> {
    let n = corpus.vocab.len();
    let scores = score_samples(model, corpus, &split.test, histories, cold_start)?;
    split
        .test
        .iter()
        .zip(scores)
        .map(|(&i, s)| Ok(PredictionSet::new(corpus.samples[i].tags.iter().copied(), metrics::top_k(&s, n)?)))
        .collect()
}

/// Metrics on the test split; `cold_start` zeroes every history.
pub fn evaluate(
    model: &TagNet,
    corpus: &Corpus,
    split: &Split,
    histories: &HashMap<String, UserHistory>,
    ks: &[usize],
    cold_start: bool,
) -> Result<MetricsReport> {
    let preds = predictions(model, corpus, split, histories, cold_start)?;
    let preds: Vec<PredictionSet> = preds.into_iter().filter(|p| !p.truth.is_empty()).collect();
    MetricsReport::evaluate(&preds, ks)
}

/// Top-`k` `(tag index, confidence)` for one image under one history.
pub fn recommend(model: &TagNet, features: &[f64], history: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    let x = Tensor::matrix(1, features.len(), features.to_vec())?;
    let u = Tensor::matrix(1, history.len(), history.to_vec())?;
    let scores = model.predict(&x, &u)?;
    let s = scores.row(0);
    Ok(metrics::top_k(s, k)?.into_iter().map(|i| (i, s[i])).collect())
}

/// Recommendations for one image as the history grows through `stages`.
/// Each stage's history counts every listed tag once.
pub fn run_dynamic_history(
    model: &TagNet,
    features: &[f64],
    stages: &[BTreeSet<usize>],
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = model.config().vocab_size;
    stages
        .iter()
        .map(|tags| {
            let h = UserHistory::from_tags("", tags, n)?;
            recommend(model, features, &h.vector, k)
        })
        .collect()
}

/// How often two users' top-`k` sets differ on the same test image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PersonalizationStats {
    pub cross_cluster_diff: f64,
    pub same_cluster_diff: f64,
    pub images: usize,
}

/// For every test image, draws one user pair from different clusters and one
/// from the same cluster, and compares their top-`k` sets. Only users with a
/// non-empty training history take part.
pub fn personalization_rates(
    model: &TagNet,
    corpus: &Corpus,
    split: &Split,
    histories: &HashMap<String, UserHistory>,
    clusters: &HashMap<String, usize>,
    k: usize,
    master_seed: u64,
) -> Result<PersonalizationStats> {
    let mut by_cluster: std::collections::BTreeMap<usize, Vec<&str>> = Default::default();
    let mut users: Vec<&String> = histories.keys().collect();
    users.sort();
    for u in users {
        if histories[u].counts.is_empty() {
            continue;
        }
        if let Some(&c) = clusters.get(u.as_str()) {
            by_cluster.entry(c).or_default().push(u.as_str());
        }
    }
    let ids: Vec<usize> = by_cluster.keys().copied().collect();
    if ids.len() < 2 || by_cluster.values().all(|v| v.len() < 2) {
        return Err(Error::contract("need two clusters and a cluster with two users"));
    }
    let multi: Vec<usize> = ids.iter().copied().filter(|c| by_cluster[c].len() >= 2).collect();
    let mut rng = seed::rng(master_seed, "personalization");

    let n = corpus.vocab.len();
    let (mut cross, mut same) = (0usize, 0usize);
    for chunk in split.test.chunks(EVAL_CHUNK) {
        let mut rows_x = Vec::new();
        let mut rows_u = Vec::new();
        for &i in chunk {
            let pair: Vec<&usize> = ids.choose_multiple(&mut rng, 2).collect();
            let a = *by_cluster[pair[0]].choose(&mut rng).unwrap();
            let b = *by_cluster[pair[1]].choose(&mut rng).unwrap();
            let c = *multi.choose(&mut rng).unwrap();
            let two: Vec<&&str> = by_cluster[&c].choose_multiple(&mut rng, 2).collect();
            for u in [a, b, *two[0], *two[1]] {
                rows_x.push(corpus.samples[i].features.as_slice());
                rows_u.push(histories[u].vector.as_slice());
            }
        }
        let scores = model.predict(&Tensor::from_rows(&rows_x)?, &Tensor::from_rows(&rows_u)?)?;
        let top = |r: usize| -> Result<HashSet<usize>> { Ok(metrics::top_k(scores.row(r), k.min(n))?.into_iter().collect()) };
        for j in 0..chunk.len() {
            cross += usize::from(top(4 * j)? != top(4 * j + 1)?);
            same += usize::from(top(4 * j + 2)? != top(4 * j + 3)?);
        }
    }
    let total = split.test.len().max(1) as f64;
    Ok(PersonalizationStats {
        cross_cluster_diff: cross as f64 / total,
        same_cluster_diff: same as f64 / total,
        images: split.test.len(),
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub flags: AblationFlags,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn to_table(&self) -> String {
        let on = |b: bool| if b { "x" } else { "-" };
        let mut out = format!("{:<4} {:>3} {:>5} {:>5} {:>5} {:>4}", "row", "UP", "Adv-I", "Adv-P", "Joint", "Cold");
        for k in &self.ks {
            out.push_str(&format!(" {:>7} {:>7} {:>7}", format!("P@{k}"), format!("R@{k}"), format!("Acc@{k}")));
        }
        out.push('\n');
        for r in &self.rows {
            let f = r.flags;
            out.push_str(&format!(
                "{:<4} {:>3} {:>5} {:>5} {:>5} {:>4}",
                r.ablation.to_string(),
                on(f.use_preference),
                on(f.adversarial == AdversarialMode::Independent),
                on(f.adversarial == AdversarialMode::Personalized),
                on(f.joint_training),
                on(f.cold_start_eval),
            ));
            for &k in &self.ks {
                let m = r.metrics.at(k).expect("evaluated at every k");
                out.push_str(&format!(" {:>7.4} {:>7.4} {:>7.4}", m.precision, m.recall, m.accuracy));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains A1, A2, A3, A5 and A6 from `base` and evaluates each; A4 is the A6
/// model evaluated with zeroed histories. `on_trained` sees every run.
pub fn run_ablation_suite(
    corpus: &Corpus,
    base: &TrainConfig,
    ks: &[usize],
    mut on_trained: impl FnMut(Ablation, &TrainConfig, &TrainOutcome) -> Result<()>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(6);
    let mut a6: Option<(TrainOutcome, TrainConfig)> = None;
    for a in [Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A5, Ablation::A6] {
        let mut cfg = base.clone();
        cfg.apply_ablation(a);
        let outcome = train(corpus, &cfg, None)?;
        on_trained(a, &cfg, &outcome)?;
        let metrics = evaluate(&outcome.model, corpus, &outcome.split, &outcome.histories, ks, false)?;
        rows.push(AblationRow {
            ablation: a,
            flags: a.flags(),
            metrics,
        });
        if a == Ablation::A6 {
            a6 = Some((outcome, cfg));
        }
    }
    let (outcome, _) = a6.expect("A6 trained");
    let cold = evaluate(&outcome.model, corpus, &outcome.split, &outcome.histories, ks, true)?;
    rows.push(AblationRow {
        ablation: Ablation::A4,
        flags: Ablation::A4.flags(),
        metrics: cold,
    });
    rows.sort_by_key(|r| r.ablation);
    Ok(AblationTable { ks: ks.to_vec(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small_corpus() -> Corpus {
        generate_synthetic(&SyntheticSpec {
            num_users: 12,
            num_clusters: 3,
            num_images: 120,
            vocab_size: 16,
            feature_dim: 8,
            tags_per_image: (2, 4),
            cluster_tag_affinity: 0.6,
            seed: 5,
        })
        .unwrap()
        .corpus
    }

    fn small_cfg(a: Ablation) -> TrainConfig {
        let mut cfg = TrainConfig::for_ablation(a);
        cfg.max_steps = 6;
        cfg.batch_size = 10;
        cfg.pretrain_steps = 3;
        for (k, v) in [
            ("visual_hidden", "12"),
            ("visual_dim", "6"),
            ("encoder_widths", "16,8,4"),
            ("classifier_widths", "8"),
            ("generator_widths", "8"),
            ("discriminator_widths", "8,4"),
        ] {
            cfg.set("model", k, v).unwrap();
        }
        cfg
    }

    fn setup(a: Ablation) -> (Corpus, TrainConfig, TagNet, Batch) {
        let corpus = small_corpus();
        let cfg = small_cfg(a);
        let split = corpus.split(0.2, cfg.seed).unwrap();
        let hist = train_histories(&corpus, &split).unwrap();
        let model = TagNet::new(cfg.model_config(16, 8).unwrap(), 1).unwrap();
        let batch = Batch::gather(&corpus, &split.train[..10], &hist, cfg.use_preference).unwrap();
        (corpus, cfg, model, batch)
    }

    #[test]
    fn ablation_presets_match_table() {
        use AdversarialMode::*;
        let rows: Vec<_> = Ablation::ALL.iter().map(|a| a.flags()).collect();
        let expect = [
            (false, Off, false, false),
            (true, Off, true, false),
            (true, Independent, false, false),
            (true, Independent, true, true),
            (true, Personalized, true, false),
            (true, Independent, true, false),
        ];
        for (f, e) in rows.iter().zip(expect) {
            assert_eq!((f.use_preference, f.adversarial, f.joint_training, f.cold_start_eval), e);
        }
        assert_eq!("a6".parse::<Ablation>().unwrap(), Ablation::A6);
        assert!("A7".parse::<Ablation>().is_err());
    }

    #[test]
    fn personalized_adversary_requires_preference() {
        let mut cfg = TrainConfig::for_ablation(Ablation::A1);
        cfg.adversarial = AdversarialMode::Personalized;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn all_losses_recorded_and_finite() {
        let (_, cfg, mut model, batch) = setup(Ablation::A6);
        let mut om = AdadeltaState::new(&model.main, cfg.optimizer);
        let mut od = AdadeltaState::new(&model.disc, cfg.optimizer);
        let mut rng = seed::rng(1, seed::JITTER);
        let r = train_step(&mut model, &batch, &cfg, StepGates::from_config(&cfg), &mut om, &mut od, &mut rng).unwrap();
        assert_eq!(r.values().len(), 8);
        assert!(r.values().iter().all(|(_, v)| v.is_finite()));
    }

    #[test]
    fn adversarial_off_leaves_discriminator_alone() {
        let (_, cfg, mut model, batch) = setup(Ablation::A2);
        let mut om = AdadeltaState::new(&model.main, cfg.optimizer);
        let mut od = AdadeltaState::new(&model.disc, cfg.optimizer);
        let before = model.disc.checksum();
        let mut rng = seed::rng(1, seed::JITTER);
        let r = train_step(&mut model, &batch, &cfg, StepGates::from_config(&cfg), &mut om, &mut od, &mut rng).unwrap();
        assert!(r.l_adv.is_none() && r.l_d.is_none());
        assert_eq!(model.disc.checksum(), before);
    }

    #[test]
    fn phases_touch_only_their_parameters() {
        let (_, cfg, mut model, batch) = setup(Ablation::A6);
        let gates = StepGates::from_config(&cfg);
        let mut om = AdadeltaState::new(&model.main, cfg.optimizer);
        let mut od = AdadeltaState::new(&model.disc, cfg.optimizer);
        let mut rng = seed::rng(1, seed::JITTER);
        let (m0, d0) = (model.main.checksum(), model.disc.checksum());
        discriminator_phase(&mut model, &batch, &cfg, gates, &mut od, &mut rng).unwrap();
        assert_eq!(model.main.checksum(), m0);
        let d1 = model.disc.checksum();
        assert_ne!(d1, d0);
        main_phase(&mut model, &batch, &cfg, gates, &mut om).unwrap();
        assert_eq!(model.disc.checksum(), d1);
        assert_ne!(model.main.checksum(), m0);
    }

    #[test]
    fn no_preference_freezes_autoencoder() {
        let corpus = small_corpus();
        let cfg = small_cfg(Ablation::A1);
        let out = train(&corpus, &cfg, None).unwrap();
        let fresh = TagNet::new(cfg.model_config(16, 8).unwrap(), cfg.seed).unwrap();
        assert_eq!(out.model.main.checksum_of(&["ue", "ud"]), fresh.main.checksum_of(&["ue", "ud"]));
        assert_ne!(out.model.main.checksum_of(&["f"]), fresh.main.checksum_of(&["f"]));
        assert!(out.report.steps.iter().all(|r| r.l_r.is_none()));
    }

    #[test]
    fn two_phase_schedule_freezes_autoencoder_after_pretraining() {
        let corpus = small_corpus();
        let cfg = small_cfg(Ablation::A3);
        let out = train(&corpus, &cfg, None).unwrap();
        assert_eq!(out.report.pretrain.len(), 3);
        assert!(out.report.steps.iter().all(|r| r.l_r.is_none()));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus();
        let cfg = small_cfg(Ablation::A6);
        let a = train(&corpus, &cfg, None).unwrap();
        let b = train(&corpus, &cfg, None).unwrap();
        assert_eq!(a.report.to_records(), b.report.to_records());
        assert_eq!(a.model.main.checksum(), b.model.main.checksum());
    }

    #[test]
    fn plateau_rule() {
        let flat = vec![1.0; 200];
        assert!(plateaued(&flat));
        let falling: Vec<f64> = (0..200).map(|i| 10.0 - i as f64 * 0.01).collect();
        assert!(!plateaued(&falling));
        assert!(!plateaued(&flat[..150]));
    }

    #[test]
    fn dynamic_history_starts_cold() {
        let (corpus, _, model, _) = setup(Ablation::A6);
        let f = &corpus.samples[0].features;
        let stages = vec![BTreeSet::new(), [1].into_iter().collect(), [1, 4].into_iter().collect()];
        let out = run_dynamic_history(&model, f, &stages, 5).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out[0], recommend(&model, f, &[0.0; 16], 5).unwrap());
        assert!(out.iter().all(|r| r.len() == 5));
    }

    #[test]
    fn config_settings_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("train", "ablation", "A5").unwrap();
        cfg.set("loss", "theta", "0.5").unwrap();
        cfg.set("model", "latent_dim", "64").unwrap();
        let mut back = TrainConfig::default();
        for (k, v) in cfg.to_kv() {
            let (s, key) = k.split_once('.').unwrap();
            back.set(s, key, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(cfg.set("train", "bogus", "1").is_err());
    }
}
