#![allow(dead_code)]

use coseg::tensor::{Tape, Tensor, Var};
use coseg::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let v = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::new(vec![rows, cols], v).unwrap()
}

/// Reduce any output to a scalar by a fixed random weighting.
fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let t = tape.value(out);
    if t.len() == 1 {
        return Ok(out);
    }
    let w = gaussian(t.rows(), t.cols(), 991);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn evaluate(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = reduce(&mut tape, out).unwrap();
    tape.value(s).item()
}

/// Largest relative error between the tape gradient and central finite
/// differences over every input entry.
pub fn max_gradient_error(inputs: &[Tensor], step: f64, f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let inputs: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_requires_grad(true)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = reduce(&mut tape, out).unwrap();
    let grads = tape.backward(s).unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zero(vars[i], t.len());
        for e in 0..t.len() {
            let bump = |delta: f64| {
                let mut ins = inputs.clone();
                let mut v = ins[i].values().to_vec();
                v[e] += delta;
                ins[i] = Tensor::new(t.shape().to_vec(), v).unwrap();
                evaluate(&ins, f)
            };
            let numeric = (bump(step) - bump(-step)) / (2.0 * step);
            let err = (analytic[e] - numeric).abs() / analytic[e].abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(err);
        }
    }
    worst
}
