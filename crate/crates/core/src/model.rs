//! The joint network.
//!
//! ```text
//!   x ──F──► e ──────────────┬──► C(e ⊕ u_p) ──► t_p
//!                            └──► G(e) ─────────► t_g ──► D ──► score
//!   u_h ──U_E──► u_p ──U_D──► û_h
//!          └─ skips (1024, 512, 256) ─┘
//! ```
//!
//! F, U_E, U_D, C and G share one parameter registry (prefixes `f`, `ue`,
//! `ud`, `c`, `g`); the discriminator D owns a separate one (prefix `d`).

use crate::error::{Error, Result};
use crate::nn::{forward_stack, init_stack, Activation, DenseLayer, ParamRegistry};
use crate::seed::{self, Rng};
use crate::tensor::{Tape, Tensor, Var};

pub const MAIN_PREFIXES: [&str; 5] = ["f", "ue", "ud", "c", "g"];
pub const DISC_PREFIX: &str = "d";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub visual_hidden: usize,
    pub visual_dim: usize,
    pub latent_dim: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub classifier_widths: Vec<usize>,
    pub generator_widths: Vec<usize>,
    pub discriminator_widths: Vec<usize>,
    pub use_skips: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            vocab_size,
            feature_dim,
            visual_hidden: 512,
            visual_dim: 256,
            latent_dim: 128,
            encoder_widths: vec![1024, 512, 256, 128],
            decoder_widths: vec![128, 256, 512, 1024],
            classifier_widths: vec![512, 512],
            generator_widths: vec![512, 512, 512],
            discriminator_widths: vec![1024, 256, 64, 16],
            use_skips: true,
        }
    }

    /// Replaces the autoencoder widths (decoder mirrors the encoder) and the
    /// latent width.
    pub fn with_encoder_widths(mut self, widths: &[usize]) -> Self {
        self.encoder_widths = widths.to_vec();
        self.decoder_widths = widths.iter().rev().copied().collect();
        self.latent_dim = *widths.last().unwrap_or(&0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let scalars = [
            ("vocab_size", self.vocab_size),
            ("feature_dim", self.feature_dim),
            ("visual_hidden", self.visual_hidden),
            ("visual_dim", self.visual_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in scalars {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        let lists = [
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("classifier_widths", &self.classifier_widths),
            ("generator_widths", &self.generator_widths),
            ("discriminator_widths", &self.discriminator_widths),
        ];
        for (name, l) in lists {
            if l.is_empty() || l.contains(&0) {
                return err(format!("{name} must be non-empty with positive widths"));
            }
        }
        if self.encoder_widths.last() != Some(&self.latent_dim) {
            return err("last encoder width must equal latent_dim".into());
        }
        let mirrored: Vec<usize> = self.encoder_widths.iter().rev().copied().collect();
        if mirrored != self.decoder_widths {
            return err("decoder widths must mirror encoder widths".into());
        }
        Ok(())
    }

    /// `key = value` lines, the form stored in checkpoints and config files.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |l: &[usize]| l.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("visual_hidden".into(), self.visual_hidden.to_string()),
            ("visual_dim".into(), self.visual_dim.to_string()),
            ("latent_dim".into(), self.latent_dim.to_string()),
            ("encoder_widths".into(), list(&self.encoder_widths)),
            ("decoder_widths".into(), list(&self.decoder_widths)),
            ("classifier_widths".into(), list(&self.classifier_widths)),
            ("generator_widths".into(), list(&self.generator_widths)),
            ("discriminator_widths".into(), list(&self.discriminator_widths)),
            ("use_skips".into(), self.use_skips.to_string()),
        ]
    }

    /// Applies one `key = value` setting. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for model.{key}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let list = |v: &str| -> Result<Vec<usize>> {
            v.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect()
        };
        match key {
            "vocab_size" => self.vocab_size = num(value)?,
            "feature_dim" => self.feature_dim = num(value)?,
            "visual_hidden" => self.visual_hidden = num(value)?,
            "visual_dim" => self.visual_dim = num(value)?,
            "latent_dim" => self.latent_dim = num(value)?,
            "encoder_widths" => self.encoder_widths = list(value)?,
            "decoder_widths" => self.decoder_widths = list(value)?,
            "classifier_widths" => self.classifier_widths = list(value)?,
            "generator_widths" => self.generator_widths = list(value)?,
            "discriminator_widths" => self.discriminator_widths = list(value)?,
            "use_skips" => self.use_skips = value.trim().parse().map_err(|_| bad())?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }
}

/// Encoder activations below the latent layer, handed to the decoder.
/// Produced once per encoder pass and consumed by one decoder pass.
#[derive(Debug)]
pub struct EncoderSkipState {
    tape: u64,
    batch: usize,
    activations: Vec<Var>,
}

impl EncoderSkipState {
    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }

    pub fn activations(&self) -> &[Var] {
        &self.activations
    }

    /// Same state with every activation replaced by zeros.
    pub fn zeroed(self, tape: &mut Tape) -> Result<Self> {
        let activations = self
            .activations
            .iter()
            .map(|&v| {
                let z = Tensor::zeros(tape.value(v).shape())?;
                tape.constant(&z)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            activations,
            ..self
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub e: Var,
    pub u_p: Var,
    pub u_hat: Var,
    pub t_p: Var,
    pub t_g: Var,
}

#[derive(Debug)]
pub struct TagNet {
    config: ModelConfig,
    pub main: ParamRegistry,
    pub disc: ParamRegistry,
    f: Vec<DenseLayer>,
    ue: Vec<DenseLayer>,
    ud: Vec<DenseLayer>,
    c: Vec<DenseLayer>,
    g: Vec<DenseLayer>,
    d: Vec<DenseLayer>,
}

impl Clone for TagNet {
    fn clone(&self) -> Self {
        let main = self.main.clone();
        let disc = self.disc.clone();
        let rebind = |layers: &[DenseLayer], to: &ParamRegistry| layers.iter().map(|l| l.rebind(to)).collect();
        Self {
            config: self.config.clone(),
            f: rebind(&self.f, &main),
            ue: rebind(&self.ue, &main),
            ud: rebind(&self.ud, &main),
            c: rebind(&self.c, &main),
            g: rebind(&self.g, &main),
            d: rebind(&self.d, &disc),
            main,
            disc,
        }
    }
}

fn batch_width(tape: &Tape, v: Var, width: usize, what: &str) -> Result<usize> {
    let s = tape.value(v).shape();
    if s.len() != 2 || s[1] != width {
        return Err(Error::dim(format!("{what} expects [batch, {width}], got {s:?}")));
    }
    Ok(s[0])
}

impl TagNet {
    /// Initializes every sub-network from the `init` stream of `seed`.
    pub fn new(config: ModelConfig, master_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(master_seed, seed::INIT);
        Self::init(config, &mut rng)
    }

    fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        use Activation::*;
        let cfg = &config;
        let n = cfg.vocab_size;
        let mut main = ParamRegistry::new();
        let mut disc = ParamRegistry::new();

        let f = init_stack(
            &mut main,
            "f",
            cfg.feature_dim,
            &[cfg.visual_hidden, cfg.visual_dim],
            Relu,
            Relu,
            rng,
        )?;
        let ue = init_stack(&mut main, "ue", n, &cfg.encoder_widths, Relu, Tanh, rng)?;

        let depth = cfg.encoder_widths.len();
        let mut ud = Vec::with_capacity(depth + 1);
        let mut prev = cfg.latent_dim;
        for (i, &w) in cfg.decoder_widths.iter().enumerate() {
            let skip = if cfg.use_skips && i >= 1 {
                cfg.encoder_widths[depth - 1 - i]
            } else {
                0
            };
            ud.push(DenseLayer::init(&mut main, &format!("ud.l{i}"), prev + skip, w, Relu, rng)?);
            prev = w;
        }
        ud.push(DenseLayer::init(&mut main, &format!("ud.l{depth}"), prev, n, Sigmoid, rng)?);

        let mut c_widths = cfg.classifier_widths.clone();
        c_widths.push(n);
        let c = init_stack(&mut main, "c", cfg.visual_dim + cfg.latent_dim, &c_widths, Relu, Sigmoid, rng)?;

        let mut g_widths = cfg.generator_widths.clone();
        g_widths.push(n);
        let g = init_stack(&mut main, "g", cfg.visual_dim, &g_widths, Relu, Sigmoid, rng)?;

        let mut d_widths = cfg.discriminator_widths.clone();
        d_widths.push(1);
        let d = init_stack(&mut disc, DISC_PREFIX, n, &d_widths, Relu, Sigmoid, rng)?;

        Ok(Self {
            config,
            main,
            disc,
            f,
            ue,
            ud,
            c,
            g,
            d,
        })
    }

    /// Builds a network with the given parameter values, e.g. from a
    /// checkpoint. Every parameter must be supplied with the right shape.
    pub fn with_params(config: ModelConfig, main: &[(String, Tensor)], disc: &[(String, Tensor)]) -> Result<Self> {
        config.validate()?;
        let mut net = Self::init(config, &mut seed::rng(0, seed::INIT))?;
        for (registry, values) in [(&mut net.main, main), (&mut net.disc, disc)] {
            if registry.len() != values.len() {
                return Err(Error::Format(format!(
                    "expected {} parameter tensors, found {}",
                    registry.len(),
                    values.len()
                )));
            }
            for (name, t) in values {
                let slot = registry
                    .get_mut(name)
                    .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
                if slot.shape() != t.shape() {
                    return Err(Error::Format(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                slot.data_mut().copy_from_slice(t.data());
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn visual_encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        batch_width(tape, x, self.config.feature_dim, "visual encoder")?;
        forward_stack(&self.f, tape, &self.main, x)
    }

    pub fn preference_encode(&self, tape: &mut Tape, u_h: Var) -> Result<(Var, EncoderSkipState)> {
        let batch = batch_width(tape, u_h, self.config.vocab_size, "preference encoder")?;
        if !tape.value(u_h).data().iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::contract("user history entries must lie in [0, 1]"));
        }
        let mut x = u_h;
        let mut activations = Vec::with_capacity(self.ue.len() - 1);
        for (i, layer) in self.ue.iter().enumerate() {
            x = layer.forward(tape, &self.main, x)?;
            if i + 1 < self.ue.len() {
                activations.push(x);
            }
        }
        Ok((
            x,
            EncoderSkipState {
                tape: tape.id(),
                batch,
                activations,
            },
        ))
    }

    pub fn preference_decode(&self, tape: &mut Tape, u_p: Var, skips: EncoderSkipState) -> Result<Var> {
        let batch = batch_width(tape, u_p, self.config.latent_dim, "preference decoder")?;
        let depth = self.config.encoder_widths.len();
        if skips.tape != tape.id() || skips.batch != batch || skips.activations.len() != depth - 1 {
            return Err(Error::contract("skip state does not belong to this decoder pass"));
        }
        for (j, &v) in skips.activations.iter().enumerate() {
            batch_width(tape, v, self.config.encoder_widths[j], "skip connection")
                .map_err(|_| Error::contract("skip activation has the wrong shape"))?;
        }
        let mut x = u_p;
        for (i, layer) in self.ud.iter().enumerate() {
            if self.config.use_skips && i >= 1 && i < depth {
                x = tape.concat(x, skips.activations[depth - 1 - i], 1)?;
            }
            x = layer.forward(tape, &self.main, x)?;
        }
        Ok(x)
    }

    pub fn classify_personalized(&self, tape: &mut Tape, e: Var, u_p: Var) -> Result<Var> {
        let b1 = batch_width(tape, e, self.config.visual_dim, "classifier visual input")?;
        let b2 = batch_width(tape, u_p, self.config.latent_dim, "classifier preference input")?;
        if b1 != b2 {
            return Err(Error::dim("visual and preference batches differ"));
        }
        let joined = tape.concat(e, u_p, 1)?;
        forward_stack(&self.c, tape, &self.main, joined)
    }

    pub fn generate_tags(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        batch_width(tape, e, self.config.visual_dim, "generator")?;
        forward_stack(&self.g, tape, &self.main, e)
    }

    pub fn discriminate(&self, tape: &mut Tape, t: Var) -> Result<Var> {
        batch_width(tape, t, self.config.vocab_size, "discriminator")?;
        forward_stack(&self.d, tape, &self.disc, t)
    }

    /// F, U_E, U_D, C and G on one tape.
    pub fn full_forward(&self, tape: &mut Tape, x: &Tensor, u_h: &Tensor) -> Result<ForwardOutputs> {
        if x.rows() != u_h.rows() {
            return Err(Error::dim("feature and history batches differ"));
        }
        let xv = tape.constant(x)?;
        let uv = tape.constant(u_h)?;
        let e = self.visual_encode(tape, xv)?;
        let (u_p, skips) = self.preference_encode(tape, uv)?;
        let u_hat = self.preference_decode(tape, u_p, skips)?;
        let t_p = self.classify_personalized(tape, e, u_p)?;
        let t_g = self.generate_tags(tape, e)?;
        Ok(ForwardOutputs {
            e,
            u_p,
            u_hat,
            t_p,
            t_g,
        })
    }

    /// Personalized tag probabilities `t_p` for a batch (inference only).
    pub fn predict(&self, x: &Tensor, u_h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let uv = tape.constant(u_h)?;
        let e = self.visual_encode(&mut tape, xv)?;
        let (u_p, _) = self.preference_encode(&mut tape, uv)?;
        let t_p = self.classify_personalized(&mut tape, e, u_p)?;
        Ok(tape.value(t_p).clone())
    }

    /// Generalized tag probabilities `t_g` for a batch (inference only).
    pub fn predict_generalized(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let e = self.visual_encode(&mut tape, xv)?;
        let t_g = self.generate_tags(&mut tape, e)?;
        Ok(tape.value(t_g).clone())
    }
}
