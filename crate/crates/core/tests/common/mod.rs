#![allow(dead_code)]

use std::collections::BTreeSet;

use altreco::losses::{self, HuberConfig};
use altreco::metrics::PredictionSet;
use altreco::model::{ModelConfig, TagNet};
use altreco::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative error, so entries whose true gradient is
/// ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `(lo, hi)` kept at least `gap` away from zero, for ops with a
/// kink at the origin.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], hi: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Reduces `out` to a scalar through fixed pseudo-random weights so every
/// output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect())?;
    let wv = tape.constant(&w)?;
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

fn eval(build: Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = weighted_sum(&mut tape, out).unwrap();
    tape.value(s).item().unwrap()
}

/// Max relative error between autodiff and central differences over every
/// input element.
pub fn gradcheck(build: Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let s = weighted_sum(&mut tape, out).unwrap();
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let auto = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for (j, &a) in auto.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, fd));
        }
    }
    worst
}

/// One case per differentiable op: name, inputs, graph.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let m = |r: &mut ChaCha8Rng, s: &[usize]| rand_tensor(r, s, -1.0, 1.0);
    vec![
        ("matmul", vec![m(&mut r, &[3, 4]), m(&mut r, &[4, 2])], |t, v| t.matmul(v[0], v[1])),
        ("add", vec![m(&mut r, &[2, 3]), m(&mut r, &[2, 3])], |t, v| t.add(v[0], v[1])),
        ("add_bias", vec![m(&mut r, &[3, 4]), m(&mut r, &[4])], |t, v| t.add_bias(v[0], v[1])),
        ("sub", vec![m(&mut r, &[2, 3]), m(&mut r, &[2, 3])], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![m(&mut r, &[2, 3]), m(&mut r, &[2, 3])], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![m(&mut r, &[2, 3])], |t, v| t.scale(v[0], -2.5)),
        ("add_scalar", vec![m(&mut r, &[2, 3])], |t, v| t.add_scalar(v[0], 0.7)),
        ("one_minus", vec![m(&mut r, &[2, 3])], |t, v| t.one_minus(v[0])),
        ("relu", vec![rand_away_from_zero(&mut r, &[3, 4], 2.0, 0.05)], |t, v| t.relu(v[0])),
        ("sigmoid", vec![rand_tensor(&mut r, &[3, 4], -4.0, 4.0)], |t, v| t.sigmoid(v[0])),
        ("tanh", vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0)], |t, v| t.tanh(v[0])),
        ("log", vec![rand_tensor(&mut r, &[3, 4], 0.1, 3.0)], |t, v| t.log(v[0])),
        ("square", vec![m(&mut r, &[3, 4])], |t, v| t.square(v[0])),
        ("huber", vec![rand_away_from_zero(&mut r, &[4, 5], 2.5, 0.0)], |t, v| t.huber(v[0], 1.0)),
        ("concat_rows", vec![m(&mut r, &[2, 3]), m(&mut r, &[4, 3])], |t, v| t.concat(v[0], v[1], 0)),
        ("concat_cols", vec![m(&mut r, &[3, 2]), m(&mut r, &[3, 5])], |t, v| t.concat(v[0], v[1], 1)),
        ("sum", vec![m(&mut r, &[3, 4])], |t, v| t.sum(v[0])),
        ("mean", vec![m(&mut r, &[3, 4])], |t, v| t.mean(v[0])),
        ("composite", vec![m(&mut r, &[2, 3]), m(&mut r, &[3, 3]), m(&mut r, &[3])], |t, v| {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add_bias(h, v[2])?;
            let s = t.sigmoid(h)?;
            let q = t.one_minus(s)?;
            let l = t.log(q)?;
            t.mul(l, s)
        }),
    ]
}

/// The network at the scaled-down size used for gradient checks.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(12, 8).with_encoder_widths(&[32, 16, 8, 4]);
    c.visual_hidden = 10;
    c.visual_dim = 6;
    c.classifier_widths = vec![9, 7];
    c.generator_widths = vec![7, 5];
    c.discriminator_widths = vec![8, 4];
    c
}

pub struct FullGraphInputs {
    pub x: Tensor,
    pub u_h: Tensor,
    pub labels: Tensor,
    pub real: Tensor,
}

pub fn full_graph_inputs(cfg: &ModelConfig, batch: usize, seed: u64) -> FullGraphInputs {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.vocab_size;
    let labels = Tensor::new(
        vec![batch, n],
        (0..batch * n).map(|_| if r.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let real = Tensor::new(
        vec![batch, n],
        labels.data().iter().map(|&p| p * 0.7 + r.random_range(0.0..0.3)).collect(),
    )
    .unwrap();
    FullGraphInputs {
        x: rand_tensor(&mut r, &[batch, cfg.feature_dim], -1.0, 1.0),
        u_h: rand_tensor(&mut r, &[batch, n], 0.0, 1.0),
        labels,
        real,
    }
}

/// Main loss `L_p + L_g + L_r + L_adv` (Adv-I) plus, separately, the
/// discriminator loss on `(real, t_g)`; both summed into one scalar so a
/// single pass covers every parameter of both registries.
pub fn full_graph_loss(net: &TagNet, tape: &mut Tape, inp: &FullGraphInputs) -> Result<Var> {
    let out = net.full_forward(tape, &inp.x, &inp.u_h)?;
    let labels = tape.constant(&inp.labels)?;
    let u = tape.constant(&inp.u_h)?;
    let l_p = losses::bce_multilabel(tape, out.t_p, labels)?;
    let l_g = losses::bce_multilabel(tape, out.t_g, labels)?;
    let l_r = losses::huber_reconstruction(tape, out.u_hat, u, HuberConfig::default())?;
    let d_fake = net.discriminate(tape, out.t_g)?;
    let l_adv = losses::adversarial_generator_loss(tape, d_fake)?;
    let real = tape.constant(&inp.real)?;
    let d_real = net.discriminate(tape, real)?;
    let l_d = losses::discriminator_loss(tape, d_real, d_fake)?;
    let main = losses::total_loss(tape, Some(l_p), Some(l_g), Some(l_r), Some(l_adv), Default::default())?;
    tape.add(main, l_d)
}

fn full_value(net: &TagNet, inp: &FullGraphInputs) -> f64 {
    let mut tape = Tape::new();
    let l = full_graph_loss(net, &mut tape, inp).unwrap();
    tape.value(l).item().unwrap()
}

/// Max relative error over every parameter entry of the tiny network.
pub fn full_graph_gradcheck(seed: u64) -> (f64, usize) {
    let cfg = tiny_config();
    let mut net = TagNet::new(cfg.clone(), seed).unwrap();
    let inp = full_graph_inputs(&cfg, 3, seed);
    let mut tape = Tape::new();
    let loss = full_graph_loss(&net, &mut tape, &inp).unwrap();
    let grads = tape.backward(loss).unwrap();
    net.main.accumulate(&grads).unwrap();
    net.disc.accumulate(&grads).unwrap();

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for which in 0..2 {
        let names: Vec<String> = if which == 0 { net.main.names().to_vec() } else { net.disc.names().to_vec() };
        for name in names {
            fn pick(n: &mut TagNet, which: usize) -> &mut altreco::nn::ParamRegistry {
                if which == 0 { &mut n.main } else { &mut n.disc }
            }
            let auto = pick(&mut net, which).get(&name).unwrap().grad().unwrap().to_vec();
            for (j, a) in auto.iter().enumerate() {
                let orig = pick(&mut net, which).get(&name).unwrap().data()[j];
                pick(&mut net, which).get_mut(&name).unwrap().data_mut()[j] = orig + FD_STEP;
                let up = full_value(&net, &inp);
                pick(&mut net, which).get_mut(&name).unwrap().data_mut()[j] = orig - FD_STEP;
                let down = full_value(&net, &inp);
                pick(&mut net, which).get_mut(&name).unwrap().data_mut()[j] = orig;
                worst = worst.max(rel_err(*a, (up - down) / (2.0 * FD_STEP)));
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Brute-force metrics, written from the definitions without sharing code
/// with the library. Returns `[P, R, Acc, C-P, C-R, C-F1, O-P, O-R, O-F1]`.
pub fn oracle_metrics(truths: &[BTreeSet<usize>], ranked: &[Vec<usize>], k: usize, n: usize) -> [f64; 9] {
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let samples = truths.len();
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut acc = 0.0;
    let mut total_hits = 0usize;
    let mut total_truth = 0usize;
    for s in 0..samples {
        let mut hits = 0usize;
        for &r in &ranked[s][..k] {
            for &t in &truths[s] {
                if r == t {
                    hits += 1;
                }
            }
        }
        p_sum += hits as f64 / k as f64;
        r_sum += hits as f64 / truths[s].len() as f64;
        if hits > 0 {
            acc += 1.0;
        }
        total_hits += hits;
        total_truth += truths[s].len();
    }
    let m = samples as f64;

    let (mut cp_sum, mut cp_n, mut cr_sum, mut cr_n) = (0.0, 0usize, 0.0, 0usize);
    for class in 0..n {
        let mut predicted = 0usize;
        let mut correct = 0usize;
        let mut actual = 0usize;
        for s in 0..samples {
            let in_top = ranked[s][..k].contains(&class);
            let in_truth = truths[s].contains(&class);
            predicted += in_top as usize;
            correct += (in_top && in_truth) as usize;
            actual += in_truth as usize;
        }
        if predicted > 0 {
            cp_sum += correct as f64 / predicted as f64;
            cp_n += 1;
        }
        if actual > 0 {
            cr_sum += correct as f64 / actual as f64;
            cr_n += 1;
        }
    }
    let cp = if cp_n > 0 { cp_sum / cp_n as f64 } else { 0.0 };
    let cr = if cr_n > 0 { cr_sum / cr_n as f64 } else { 0.0 };
    let op = total_hits as f64 / (k * samples) as f64;
    let or = total_hits as f64 / total_truth as f64;
    [p_sum / m, r_sum / m, acc / m, cp, cr, f1(cp, cr), op, or, f1(op, or)]
}

/// A random instance: up to 50 samples over at most 20 classes, each with a
/// non-empty truth set and a full random ranking.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (usize, Vec<BTreeSet<usize>>, Vec<Vec<usize>>) {
    use rand::seq::SliceRandom;
    let n = rng.random_range(1..=20);
    let samples = rng.random_range(1..=50);
    let mut truths = Vec::with_capacity(samples);
    let mut ranked = Vec::with_capacity(samples);
    for _ in 0..samples {
        let size = rng.random_range(1..=n);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(rng);
        truths.push(all[..size].iter().copied().collect());
        all.shuffle(rng);
        ranked.push(all);
    }
    (n, truths, ranked)
}

pub fn prediction_sets(truths: &[BTreeSet<usize>], ranked: &[Vec<usize>]) -> Vec<PredictionSet> {
    truths
        .iter()
        .zip(ranked)
        .map(|(t, r)| PredictionSet::new(t.iter().copied(), r.clone()))
        .collect()
}

pub fn library_metrics(preds: &[PredictionSet], k: usize) -> [f64; 9] {
    let r = altreco::metrics::MetricsReport::evaluate(preds, &[k]).unwrap();
    let m = r.rows[0];
    [
        m.precision,
        m.recall,
        m.accuracy,
        m.class_precision,
        m.class_recall,
        m.class_f1,
        m.overall_precision,
        m.overall_recall,
        m.overall_f1,
    ]
}
