use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mask, NormMode, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_COORDS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(parameter, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// `f` builds a scalar from the leaves it is handed (one per entry of
/// `params`, in order). At most `max_coords` coordinates per parameter are
/// probed, chosen with `seed`.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, h: f64, max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.input(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let base = g.value(out).item();
    if !base.is_finite() {
        return Err(Error::InvalidArgument(format!("objective is not finite: {base}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    for (pi, (p, &v)) in params.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(v, p.len());
        let coords: Vec<usize> = if p.len() <= max_coords {
            (0..p.len()).collect()
        } else {
            index::sample(&mut rng, p.len(), max_coords).into_vec()
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[c] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[c], numeric);
            if report.checked == 0 || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c, analytic[c], numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Reduces any output to a scalar with fixed random weights so every output
/// coordinate influences the checked gradient.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &g.shape(out).to_vec(), -1.0, 1.0);
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    Ok(g.sum(m))
}

/// Gradient check of every differentiable operation at random points drawn
/// from `seed`. Returns `(operation, max relative error)` pairs.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let check = |params: &[Tensor<f64>], f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| -> Result<f64> {
        Ok(grad_check(params, f, DEFAULT_STEP, DEFAULT_COORDS, seed)?.max_rel_error)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let bw = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    results.push(("matmul shared", check(&[a.clone(), w.clone()], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted(g, y, 1)
    })?));
    results.push(("matmul batched", check(&[a.clone(), bw.clone()], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted(g, y, 2)
    })?));

    let bias = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let same = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    results.push(("add broadcast", check(&[a.clone(), bias.clone()], &|g, v| {
        let y = g.add(v[0], v[1])?;
        weighted(g, y, 3)
    })?));
    results.push(("sub", check(&[a.clone(), same.clone()], &|g, v| {
        let y = g.sub(v[0], v[1])?;
        weighted(g, y, 4)
    })?));
    results.push(("mul", check(&[a.clone(), same.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted(g, y, 5)
    })?));
    results.push(("mul broadcast", check(&[a.clone(), bias.clone()], &|g, v| {
        let y = g.mul(v[0], v[1])?;
        weighted(g, y, 6)
    })?));
    results.push(("scale", check(&[a.clone()], &|g, v| {
        let y = g.scale(v[0], -1.7);
        weighted(g, y, 7)
    })?));
    results.push(("add_scalar", check(&[a.clone()], &|g, v| {
        let y = g.add_scalar(v[0], 0.3);
        let y = g.mul(y, y)?;
        weighted(g, y, 8)
    })?));
    results.push(("concat", check(&[a.clone(), same.clone()], &|g, v| {
        let y = g.concat_last(&[v[0], v[1], v[0]])?;
        weighted(g, y, 9)
    })?));
    results.push(("slice", check(&[a.clone()], &|g, v| {
        let y = g.slice_last(v[0], 1, 3)?;
        weighted(g, y, 10)
    })?));
    results.push(("transpose", check(&[a.clone()], &|g, v| {
        let y = g.transpose_last_two(v[0])?;
        weighted(g, y, 11)
    })?));
    results.push(("exp", check(&[a.clone()], &|g, v| {
        let y = g.exp(v[0]);
        weighted(g, y, 12)
    })?));
    let pos = rand_tensor(&mut rng, &[2, 3, 4], 0.2, 3.0);
    results.push(("log2", check(&[pos], &|g, v| {
        let y = g.log2(v[0]);
        weighted(g, y, 13)
    })?));
    results.push(("sigmoid", check(&[a.clone()], &|g, v| {
        let y = g.sigmoid(v[0]);
        weighted(g, y, 14)
    })?));
    // Away from the kink at zero.
    let kinkless = Tensor::new(
        &[2, 3, 4],
        a.data().iter().map(|&v| if v.abs() < 1e-3 { 0.5 } else { v }).collect(),
    )
    .unwrap();
    results.push(("leaky_relu", check(&[kinkless], &|g, v| {
        let y = g.leaky_relu(v[0], 0.01);
        weighted(g, y, 15)
    })?));
    results.push(("silu", check(&[a.clone()], &|g, v| {
        let y = g.silu(v[0]);
        weighted(g, y, 16)
    })?));
    let wide = rand_tensor(&mut rng, &[2, 3, 4], -8.0, 8.0);
    results.push(("log2_sigmoid", check(&[wide], &|g, v| {
        let y = g.log2_sigmoid(v[0]);
        weighted(g, y, 17)
    })?));

    let scores = rand_tensor(&mut rng, &[2, 3, 5], -2.0, 2.0);
    let mask = Mask::new(vec![5, 3], 5).unwrap();
    results.push(("softmax_masked", check(&[scores], &|g, v| {
        let y = g.softmax_masked(v[0], &mask)?;
        weighted(g, y, 18)
    })?));
    let seq = rand_tensor(&mut rng, &[2, 5, 3], -1.0, 1.0);
    results.push(("masked_mean", check(&[seq.clone()], &|g, v| {
        let y = g.masked_mean(v[0], &mask)?;
        weighted(g, y, 19)
    })?));
    let kernel = rand_tensor(&mut rng, &[3, 3, 4], -1.0, 1.0);
    results.push(("conv1d_valid", check(&[seq.clone(), kernel], &|g, v| {
        let y = g.conv1d_valid(v[0], v[1])?;
        weighted(g, y, 20)
    })?));
    let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    results.push(("batch_norm train", check(&[seq.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let (y, _) = g.batch_norm_masked(v[0], &mask, v[1], v[2], NormMode::Train)?;
        weighted(g, y, 21)
    })?));
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0]);
    results.push(("batch_norm eval", check(&[seq.clone(), gamma.clone(), beta], &|g, v| {
        let (y, _) = g.batch_norm_masked(v[0], &mask, v[1], v[2], NormMode::Eval { mean: &rm, var: &rv })?;
        weighted(g, y, 22)
    })?));
    let gain = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    results.push(("rms_norm", check(&[a.clone(), gain], &|g, v| {
        let y = g.rms_norm(v[0], v[1])?;
        weighted(g, y, 23)
    })?));
    results.push(("rope", check(&[a.clone()], &|g, v| {
        let y = g.rope(v[0], &[0.0, 1.0, 2.0], 10_000.0)?;
        weighted(g, y, 24)
    })?));
    let emb = rand_tensor(&mut rng, &[5, 3], -1.0, 1.0);
    results.push(("pairwise_distance", check(&[emb], &|g, v| {
        let y = g.pairwise_distance(v[0])?;
        weighted(g, y, 25)
    })?));
    results.push(("gather", check(&[a.clone()], &|g, v| {
        let y = g.gather(v[0], vec![0, 5, 5, 23, 7])?;
        weighted(g, y, 26)
    })?));
    results.push(("sum", check(&[a.clone()], &|g, v| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    })?));
    results.push(("mean", check(&[a], &|g, v| {
        let y = g.exp(v[0]);
        Ok(g.mean(y))
    })?));

    Ok(results)
}
