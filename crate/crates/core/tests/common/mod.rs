#![allow(dead_code)]

use aufer_core::tensor::{grad_check, Graph, Tensor, Var, COSINE_EPS};
use aufer_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear functional of `out`, so every output coordinate matters.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let n = g.value(out).numel();
    let flat = g.reshape(out, vec![n])?;
    let w = g.constant(weights.clone().reshape(vec![1, n])?);
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.linear(flat, w, b)?;
    g.select(y, 0)
}

type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;

fn projected<F>(input: Vec<usize>, out_len: usize, op: F) -> Check
where
    F: Fn(&mut Graph, Var, &[Tensor]) -> Result<Var> + 'static,
{
    projected_with(input, out_len, vec![], op)
}

/// Checks `op(x, others)` projected onto random weights, differentiating in `x`.
fn projected_with<F>(input: Vec<usize>, out_len: usize, others: Vec<Vec<usize>>, op: F) -> Check
where
    F: Fn(&mut Graph, Var, &[Tensor]) -> Result<Var> + 'static,
{
    Box::new(move |rng: &mut ChaCha8Rng| {
        let x = uniform(rng, &input);
        let rest: Vec<Tensor> = others.iter().map(|s| uniform(rng, s)).collect();
        let weights = uniform(rng, &[out_len]);
        grad_check(
            |g, v| {
                let out = op(g, v, &rest)?;
                project(g, out, &weights)
            },
            &x,
            1e-5,
        )
    })
}

/// The differentiable operations with one closure per differentiated input.
pub fn gradient_checks() -> Vec<(&'static str, Check)> {
    vec![
        (
            "conv2d/input",
            projected_with(vec![2, 5, 5], 3 * 25, vec![vec![3, 2, 3, 3], vec![3]], |g, x, r| {
                let (w, b) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.conv2d(x, w, b, 1, 1)
            }),
        ),
        (
            "conv2d/kernels",
            projected_with(vec![3, 2, 3, 3], 3 * 9, vec![vec![2, 5, 5], vec![3]], |g, w, r| {
                let (x, b) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.conv2d(x, w, b, 2, 1)
            }),
        ),
        (
            "conv2d/bias",
            projected_with(vec![3], 3 * 25, vec![vec![2, 5, 5], vec![3, 2, 3, 3]], |g, b, r| {
                let (x, w) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.conv2d(x, w, b, 1, 1)
            }),
        ),
        ("relu", projected(vec![3, 4, 4], 48, |g, x, _| Ok(g.relu(x)))),
        ("maxpool2d", projected(vec![2, 6, 6], 18, |g, x, _| g.maxpool2d(x, 2, 2))),
        (
            "linear/input",
            projected_with(vec![5], 4, vec![vec![4, 5], vec![4]], |g, x, r| {
                let (w, b) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.linear(x, w, b)
            }),
        ),
        (
            "linear/weight",
            projected_with(vec![4, 5], 4, vec![vec![5], vec![4]], |g, w, r| {
                let (x, b) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.linear(x, w, b)
            }),
        ),
        (
            "linear/bias",
            projected_with(vec![4], 4, vec![vec![5], vec![4, 5]], |g, b, r| {
                let (x, w) = (g.constant(r[0].clone()), g.constant(r[1].clone()));
                g.linear(x, w, b)
            }),
        ),
        ("global_avg_pool", projected(vec![3, 4, 4], 3, |g, x, _| g.global_avg_pool(x))),
        ("channel_mean", projected(vec![3, 4, 4], 16, |g, x, _| g.channel_mean(x))),
        (
            "cosine_sim_map",
            Box::new(|rng: &mut ChaCha8Rng| {
                let t = uniform(rng, &[4, 4]);
                let a = uniform(rng, &[4, 4]);
                grad_check(
                    |g, v| {
                        let av = g.constant(a.clone());
                        g.cosine_sim_map(v, av, COSINE_EPS)
                    },
                    &t,
                    1e-5,
                )
            }),
        ),
        (
            "softmax_cross_entropy",
            Box::new(|rng: &mut ChaCha8Rng| {
                let z = uniform(rng, &[6]);
                let y = rng.random_range(0..6);
                grad_check(|g, v| g.softmax_cross_entropy(v, y), &z, 1e-5)
            }),
        ),
        ("select", projected(vec![5], 1, |g, x, _| g.select(x, 3))),
        ("sum", projected(vec![2, 3], 1, |g, x, _| Ok(g.sum(x)))),
        (
            "add",
            projected_with(vec![2, 3], 6, vec![vec![2, 3]], |g, x, r| {
                let c = g.constant(r[0].clone());
                g.add(x, c)
            }),
        ),
        ("affine", projected(vec![2, 3], 6, |g, x, _| Ok(g.affine(x, -1.7, 0.3)))),
        ("reshape", projected(vec![2, 3, 2], 12, |g, x, _| g.reshape(x, vec![3, 4]))),
    ]
}

/// Worst error per operation over `trials` random draws from `seed`.
pub fn gradient_suite(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    gradient_checks()
        .into_iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
            let worst = (0..trials)
                .map(|_| check(&mut rng).unwrap())
                .fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}
