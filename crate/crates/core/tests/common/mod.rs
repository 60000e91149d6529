#![allow(dead_code)]

pub mod cases;
pub mod corpus_checks;
pub mod oracles;
pub mod tiny;

use cuedseq::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use cuedseq::rng::Rng;
use cuedseq::Result;

/// Denominator floor for relative errors, so that gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, REL_FLOOR)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Entries smaller than `SCALE_FLOOR` times the largest gradient of a check
/// are compared on that absolute scale: their finite-difference truncation
/// error is of the same order as the entries themselves.
pub const SCALE_FLOOR: f64 = 1e-4;

fn floor_for<'a>(grads: impl Iterator<Item = &'a f64>) -> f64 {
    grads.fold(REL_FLOOR, |m, g| m.max(SCALE_FLOOR * g.abs()))
}

pub fn random_tensor(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.normal() * scale).collect(), shape).unwrap()
}

/// Central finite-difference check of `f` with respect to every element of
/// every input. Returns the maximum relative error.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars).unwrap();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect();

    let pattern = tape.relu_pattern();
    let eval = |inputs: &[Tensor]| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars).unwrap();
        (tape.value(loss).item(), tape.relu_pattern())
    };
    let mut kinks = Kinks::default();

    let floor = floor_for(analytic.iter().flatten());
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for j in 0..grads.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            if kinks.straddles(&pattern, &up.1, &down.1) {
                continue;
            }
            let numeric = (up.0 - down.0) / (2.0 * eps);
            worst = worst.max(rel_err_floor(grads[j], numeric, floor));
        }
    }
    kinks.finish();
    worst
}

/// Central differences across a ReLU kink estimate no derivative at all;
/// such probes are skipped, and a check that skips most probes fails.
#[derive(Default)]
struct Kinks {
    probes: usize,
    skipped: usize,
}

impl Kinks {
    fn straddles(&mut self, base: &[bool], up: &[bool], down: &[bool]) -> bool {
        self.probes += 1;
        let hit = up != base || down != base;
        self.skipped += hit as usize;
        hit
    }

    fn finish(&self) {
        assert!(
            self.skipped * 2 <= self.probes,
            "{} of {} probes straddle a ReLU kink",
            self.skipped,
            self.probes
        );
    }
}

/// Weighted sum of all entries with fixed pseudo-random weights, turning any
/// tensor into a scalar with a generic upstream gradient.
pub fn probe(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut rng = Rng::new(seed);
    let w = random_tensor(&shape, &mut rng, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Finite-difference check of `f` with respect to the parameters in `params`.
/// At most `per_tensor` entries of each tensor are probed, chosen at random.
/// Returns the maximum relative error.
pub fn check_param_gradients<F>(params: &ParamStore, eps: f64, per_tensor: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = params.bind_all(&mut tape);
    let loss = f(&mut tape, &bound).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.gradients(&tape);

    let pattern = tape.relu_pattern();
    let eval = |p: &ParamStore| -> (f64, Vec<bool>) {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let loss = f(&mut tape, &bound).unwrap();
        (tape.value(loss).item(), tape.relu_pattern())
    };
    let mut kinks = Kinks::default();

    let floor = floor_for(grads.values().flatten());
    let mut rng = Rng::new(seed);
    let mut work = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { rng.permutation(n)[..per_tensor].to_vec() };
        let zeros = vec![0.0; n];
        let g = grads.get(&name).unwrap_or(&zeros);
        for j in picks {
            let orig = work.get(&name).unwrap().data()[j];
            work.get_mut(&name).unwrap().data_mut()[j] = orig + eps;
            let up = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig - eps;
            let down = eval(&work);
            work.get_mut(&name).unwrap().data_mut()[j] = orig;
            if kinks.straddles(&pattern, &up.1, &down.1) {
                continue;
            }
            let numeric = (up.0 - down.0) / (2.0 * eps);
            worst = worst.max(rel_err_floor(g[j], numeric, floor));
        }
    }
    kinks.finish();
    worst
}
