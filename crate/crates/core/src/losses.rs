//! Reconstruction, tag cross-entropy, adversarial and discriminator losses,
//! plus label jittering for the discriminator's real samples.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::{Tape, Var};

/// Weights of the personalized, generalized, reconstruction and
/// adversarial terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            theta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.theta];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

/// Soft-label jitter: a present tag maps into `[eta, eta + iota)`, an absent
/// tag into `[0, iota)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterConfig {
    pub eta: f64,
    pub iota: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { eta: 0.7, iota: 0.3 }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0 && self.eta <= 1.0 && self.iota >= 0.0 && self.eta >= self.iota;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "jitter needs 0 < eta <= 1 and 0 <= iota <= eta, got {self:?}"
            )))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuberConfig {
    pub delta: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        Self { delta: 1.0 }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta > 0.0 && self.delta.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("huber delta must be positive, got {}", self.delta)))
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?} differ")));
    }
    Ok(())
}

fn check_unit_interval(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).data().iter().all(|x| (0.0..=1.0).contains(x)) {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} must lie in [0, 1]")))
    }
}

/// Mean Huber penalty of `target - reconstruction` over every element.
pub fn huber_reconstruction(tape: &mut Tape, u_hat: Var, u: Var, cfg: HuberConfig) -> Result<Var> {
    same_shape(tape, u_hat, u, "huber_reconstruction")?;
    let r = tape.sub(u, u_hat)?;
    let h = tape.huber(r, cfg.delta)?;
    tape.mean(h)
}

/// Mean squared error, the plain alternative to [`huber_reconstruction`].
pub fn squared_reconstruction(tape: &mut Tape, u_hat: Var, u: Var) -> Result<Var> {
    same_shape(tape, u_hat, u, "squared_reconstruction")?;
    let r = tape.sub(u, u_hat)?;
    let sq = tape.square(r)?;
    tape.mean(sq)
}

/// Multi-label binary cross-entropy averaged over batch and vocabulary.
/// `target` may be hard (0/1) or soft labels in [0, 1].
pub fn bce_multilabel(tape: &mut Tape, p: Var, target: Var) -> Result<Var> {
    same_shape(tape, p, target, "bce_multilabel")?;
    check_unit_interval(tape, p, "predicted probabilities")?;
    check_unit_interval(tape, target, "target labels")?;
    let log_p = tape.log(p)?;
    let q = tape.one_minus(p)?;
    let log_q = tape.log(q)?;
    let not_target = tape.one_minus(target)?;
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(not_target, log_q)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both)?;
    tape.scale(m, -1.0)
}

/// `mean log(1 - D(fake))`, minimized by the generator side.
pub fn adversarial_generator_loss(tape: &mut Tape, d_scores: Var) -> Result<Var> {
    check_unit_interval(tape, d_scores, "discriminator scores")?;
    let q = tape.one_minus(d_scores)?;
    let l = tape.log(q)?;
    tape.mean(l)
}

/// `-mean log D(fake)`: the non-saturating generator objective.
pub fn non_saturating_generator_loss(tape: &mut Tape, d_scores: Var) -> Result<Var> {
    check_unit_interval(tape, d_scores, "discriminator scores")?;
    let l = tape.log(d_scores)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// `-(mean log D(real) + mean log(1 - D(fake)))`, minimized by the
/// discriminator.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    check_unit_interval(tape, d_real, "real scores")?;
    check_unit_interval(tape, d_fake, "fake scores")?;
    let lr = tape.log(d_real)?;
    let real = tape.mean(lr)?;
    let q = tape.one_minus(d_fake)?;
    let lf = tape.log(q)?;
    let fake = tape.mean(lf)?;
    let s = tape.add(real, fake)?;
    tape.scale(s, -1.0)
}

/// `p * eta + U[0, iota)`, one independent draw per entry.
pub fn jitter_ground_truth(p: &[f64], cfg: JitterConfig, rng: &mut Rng) -> Vec<f64> {
    p.iter()
        .map(|&pi| {
            let noise = if cfg.iota > 0.0 {
                rng.random_range(0.0..cfg.iota)
            } else {
                0.0
            };
            pi * cfg.eta + noise
        })
        .collect()
}

/// Weighted sum of the present loss terms; absent terms contribute nothing.
pub fn total_loss(
    tape: &mut Tape,
    l_p: Option<Var>,
    l_g: Option<Var>,
    l_r: Option<Var>,
    l_adv: Option<Var>,
    w: LossWeights,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (term, weight) in [(l_p, w.alpha), (l_g, w.beta), (l_r, w.gamma), (l_adv, w.theta)] {
        let Some(term) = term else { continue };
        let scaled = tape.scale(term, weight)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => tape.constant(&crate::Tensor::scalar(0.0)),
    }
}
