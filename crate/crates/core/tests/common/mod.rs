//! Shared oracles for the integration tests: central finite differences,
//! brute-force Otsu and pairwise AUC.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use seamil::nn::Binding;
use seamil::{Parameter, Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    seamil::seed::rng_for(seed, "tests", 0)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a floor so all-zero gradients compare as equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric)).max(1e-8);
    norm(&diff) / scale
}

/// Reduces any output to a scalar with fixed random weights so every output
/// component contributes to the checked gradient.
pub fn project<'t>(tape: &'t Tape, out: Var<'t>, weights: &Tensor) -> Var<'t> {
    let w = tape.constant(&weights.clone().reshaped(&out.shape()).unwrap());
    tape.sum(tape.mul(out, w).unwrap())
}

/// Worst relative error over the gradients of `f` with respect to each input.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();

    let eval = |inputs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] = t.data()[j] + FD_STEP;
            let up = eval(&probe);
            probe[i].data_mut()[j] = t.data()[j] - FD_STEP;
            let down = eval(&probe);
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// Worst relative error over the gradients of a model's loss with respect to
/// its input and to every parameter returned by `params`.
pub fn check_model<M, P, F>(model: &M, input: &Tensor, params: P, f: F) -> f64
where
    M: Clone,
    P: Fn(&mut M) -> Vec<&mut Parameter>,
    F: for<'t> Fn(&M, &mut Binding<'t>, Var<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let mut b = Binding::training(&tape);
    let x = tape.leaf(&input.clone().with_requires_grad(true));
    let loss = f(model, &mut b, x);
    let grads = tape.backward(loss).unwrap();

    let eval = |m: &M, input: &Tensor| {
        let tape = Tape::new();
        let mut b = Binding::inference(&tape);
        let x = tape.constant(input);
        f(m, &mut b, x).item()
    };
    let mut worst: f64 = 0.0;

    let analytic_x = grads.wrt(x).unwrap().to_vec();
    let mut numeric_x = vec![0.0; input.len()];
    for (j, slot) in numeric_x.iter_mut().enumerate() {
        let mut probe = input.clone();
        probe.data_mut()[j] += FD_STEP;
        let up = eval(model, &probe);
        probe.data_mut()[j] -= 2.0 * FD_STEP;
        let down = eval(model, &probe);
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    worst = worst.max(relative_error(&analytic_x, &numeric_x));

    let mut probe_model = model.clone();
    let names: Vec<(String, usize)> = params(&mut probe_model)
        .iter()
        .map(|p| (p.name.clone(), p.tensor.len()))
        .collect();
    for (k, (name, len)) in names.iter().enumerate() {
        let analytic = b
            .get(name)
            .and_then(|v| grads.wrt(v).map(<[f64]>::to_vec))
            .unwrap_or_else(|| vec![0.0; *len]);
        let mut numeric = vec![0.0; *len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params(&mut probe_model)[k].tensor.data()[j];
            params(&mut probe_model)[k].tensor.data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe_model, input);
            params(&mut probe_model)[k].tensor.data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe_model, input);
            params(&mut probe_model)[k].tensor.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Exhaustive Otsu: every threshold `t` (foreground is `> t`) scored from
/// scratch, first maximum of the between-class variance wins. A histogram
/// with a single occupied bin returns that bin.
pub fn otsu_brute_force(hist: &[u64; 256]) -> u8 {
    let total: u64 = hist.iter().sum();
    let mut best: Option<(f64, u8)> = None;
    for t in 0..=255usize {
        let n0: u64 = hist[..=t].iter().sum();
        let s0: u64 = hist[..=t].iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
        let n1: u64 = hist[t + 1..].iter().sum();
        let s1: u64 = hist[t + 1..].iter().enumerate().map(|(v, &c)| (v + t + 1) as u64 * c).sum();
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total as f64, n1 as f64 / total as f64);
        let (m0, m1) = (s0 as f64 / n0 as f64, s1 as f64 / n1 as f64);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    match best {
        Some((_, t)) => t,
        None => hist.iter().position(|&c| c > 0).expect("non-empty histogram") as u8,
    }
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` by enumerating every pair.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi && !yj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}
