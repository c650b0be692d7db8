//! Finite-difference verification of tape gradients (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const MAX_REL_ERR: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at h=1e-5
/// carry ~1e-10 absolute noise, so gradients far below this floor are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < MAX_REL_ERR
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `f(inputs)` against central differences.
///
/// `max_coords` caps the coordinates probed per input; `None` probes all of them.
/// The sampled coordinates are fixed by `seed`.
pub fn check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match max_coords {
            Some(cap) if cap < n => (0..cap).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
            count += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        coords_checked: count,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts an arbitrary-shape output with a fixed random tensor, giving a
/// scalar whose gradient exercises every output element.
fn project<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(&mut rng, &out.shape());
    let w = out.tape().constant(w);
    Ok(out.mul(&w)?.sum())
}

/// Finite-difference checks for every differentiable tape op.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>| -> Result<()> {
        out.push(check(name, &inputs, |t, v| project(f(t, v)?, seed), h, None, seed)?);
        Ok(())
    };

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&mut rng, &[2, 4, 3]) } else { random(&mut rng, &[2, 3, 4]) };
        let b = if tb { random(&mut rng, &[2, 2, 4]) } else { random(&mut rng, &[2, 4, 2]) };
        run(&format!("gemm(ta={ta},tb={tb})"), vec![a, b], &move |_, v| v[0].gemm(&v[1], ta, tb))?;
    }
    run("add", vec![random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2])], &|_, v| v[0].add(&v[1]))?;
    run("sub", vec![random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2])], &|_, v| v[0].sub(&v[1]))?;
    run("mul", vec![random(&mut rng, &[3, 2]), random(&mut rng, &[3, 2])], &|_, v| v[0].mul(&v[1]))?;
    run("scale", vec![random(&mut rng, &[4])], &|_, v| Ok(v[0].scale(-1.7)))?;
    run("add_scalar", vec![random(&mut rng, &[4])], &|_, v| Ok(v[0].add_scalar(0.3)))?;
    run("add_bias", vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[3, 4])], &|_, v| v[0].add_bias(&v[1]))?;
    run("tile", vec![random(&mut rng, &[2, 3])], &|_, v| Ok(v[0].tile(3)))?;
    run("sum", vec![random(&mut rng, &[2, 3])], &|_, v| Ok(v[0].sum().scale(1.3)))?;
    run("sum_axis", vec![random(&mut rng, &[2, 3, 4])], &|_, v| v[0].sum_axis(1))?;
    run("mean_axis", vec![random(&mut rng, &[2, 3, 4])], &|_, v| v[0].mean_axis(1))?;
    run("mean", vec![random(&mut rng, &[2, 3])], &|_, v| Ok(v[0].mean()))?;
    run(
        "linear",
        vec![random(&mut rng, &[2, 3, 4]), random(&mut rng, &[4, 5]), random(&mut rng, &[5])],
        &|_, v| v[0].linear(&v[1], Some(&v[2])),
    )?;
    run("softmax", vec![random(&mut rng, &[3, 5])], &|_, v| v[0].softmax(1, 0.7))?;
    run("softmax(axis=0)", vec![random(&mut rng, &[3, 5])], &|_, v| v[0].softmax(0, 1.0))?;
    run("log_softmax", vec![random(&mut rng, &[3, 5])], &|_, v| v[0].log_softmax(1, 0.4))?;
    let mask = vec![true, false, true, true, true, true, false, false, true];
    run("masked_softmax", vec![random(&mut rng, &[2, 3, 3])], &move |_, v| v[0].masked_softmax(&mask))?;
    run(
        "layer_norm",
        vec![random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[6])],
        &|_, v| v[0].layer_norm(&v[1], &v[2], 1e-6),
    )?;
    run("gelu", vec![random(&mut rng, &[7]).map(|x| 3.0 * x)], &|_, v| Ok(v[0].gelu()))?;
    run("l2_normalize", vec![random(&mut rng, &[3, 4])], &|_, v| Ok(v[0].l2_normalize(1e-12)))?;
    run("reshape", vec![random(&mut rng, &[2, 6])], &|_, v| v[0].reshape(&[3, 4]))?;
    run("permute", vec![random(&mut rng, &[2, 3, 4])], &|_, v| v[0].permute(&[2, 0, 1]))?;
    run("narrow", vec![random(&mut rng, &[2, 5, 3])], &|_, v| v[0].narrow(1, 1, 3))?;
    run(
        "concat",
        vec![random(&mut rng, &[2, 1, 3]), random(&mut rng, &[2, 4, 3])],
        &|t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    run(
        "depthwise_conv2d",
        vec![random(&mut rng, &[2, 4, 5, 3]), random(&mut rng, &[3, 3, 3])],
        &|_, v| v[0].depthwise_conv2d(&v[1]),
    )?;
    run(
        "pointwise_conv1x1",
        vec![random(&mut rng, &[3, 3, 2]), random(&mut rng, &[2, 4]), random(&mut rng, &[4])],
        &|_, v| v[0].pointwise_conv1x1(&v[1], &v[2]),
    )?;
    Ok(out)
}
