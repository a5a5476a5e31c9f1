//! Central finite-difference checks shared by the gradient and acceptance
//! targets.
//!
//! Each check projects the output onto a fixed random direction `c`, so the
//! objective is `Σ c·y`; the analytic gradient comes from back-propagating
//! `c`.

#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skewprune::nn::{Graph, Tensor, Var};

pub const STEP: f32 = 1e-3;
pub const RTOL: f64 = 1e-2;
pub const INSTANCES: u64 = 50;

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn objective(build: &Build, inputs: &[Tensor], c: &[f32]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars);
    g.value(y).data().iter().zip(c).map(|(&a, &b)| a as f64 * b as f64).sum()
}

/// Worst relative error over all inputs. Gradient vectors whose norm is
/// below `floor` are compared absolutely against `floor`.
pub fn check(build: &Build, inputs: &[Tensor], r: &mut ChaCha8Rng, step: f32, floor: f64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &vars);
    let c: Vec<f32> = (0..g.value(y).numel()).map(|_| r.random_range(-1.0..1.0)).collect();
    g.backward_with(y, c.clone()).unwrap();
    let mut worst = 0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*v) {
            Some(gr) => gr.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[k].numel()],
        };
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let h = (plus[k].data()[i] - minus[k].data()[i]) as f64;
            numeric.push((objective(build, &plus, &c) - objective(build, &minus, &c)) / h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 0.0 {
            worst = worst.max(diff / scale.max(floor));
        }
    }
    worst
}

type Case = Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>)>;

/// Worst relative error of one primitive over all instances.
fn worst(make: &Case) -> f64 {
    (0..INSTANCES)
        .map(|seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
            let (inputs, build) = make(&mut r);
            check(build.as_ref(), &inputs, &mut r, STEP, 0.0)
        })
        .fold(0.0, f64::max)
}

fn cases() -> Vec<(&'static str, Case)> {
    let mut v: Vec<(&'static str, Case)> = Vec::new();
    v.push((
        "matmul",
        Box::new(|r| {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            (
                vec![rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[k, n], 1.0)],
                Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
            )
        }),
    ));
    for (name, trans) in [("bmm", false), ("bmm_trans_b", true)] {
        v.push((
            name,
            Box::new(move |r| {
                let (b, m, k, n) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
                let bs = if trans { [b, n, k] } else { [b, k, n] };
                (
                    vec![rand_tensor(r, &[b, m, k], 1.0), rand_tensor(r, &bs, 1.0)],
                    Box::new(move |g, v| g.bmm(v[0], v[1], trans).unwrap()),
                )
            }),
        ));
    }
    v.push((
        "add",
        Box::new(|r| {
            let s = [r.random_range(1..4), r.random_range(1..4)];
            (
                vec![rand_tensor(r, &s, 1.0), rand_tensor(r, &s, 1.0)],
                Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
            )
        }),
    ));
    v.push((
        "add_broadcast",
        Box::new(|r| {
            let s = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4)];
            (
                vec![rand_tensor(r, &s, 1.0), rand_tensor(r, &s[1..], 1.0)],
                Box::new(|g, v| g.add_broadcast(v[0], v[1]).unwrap()),
            )
        }),
    ));
    v.push((
        "scale",
        Box::new(|r| {
            let s: f32 = r.random_range(-2.0..2.0);
            (vec![rand_tensor(r, &[3, 2], 1.0)], Box::new(move |g, v| g.scale(v[0], s).unwrap()))
        }),
    ));
    v.push((
        "layer_norm",
        Box::new(|r| {
            let (rows, d) = (r.random_range(1..4), r.random_range(3..7));
            (
                vec![rand_tensor(r, &[rows, d], 2.0), rand_tensor(r, &[d], 1.5), rand_tensor(r, &[d], 1.0)],
                Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
            )
        }),
    ));
    v.push((
        "gelu",
        Box::new(|r| (vec![rand_tensor(r, &[2, 4], 3.0)], Box::new(|g, v| g.gelu(v[0]).unwrap()))),
    ));
    v.push((
        "softmax",
        Box::new(|r| {
            let (rows, n) = (r.random_range(1..4), r.random_range(2..6));
            (vec![rand_tensor(r, &[rows, n], 2.0)], Box::new(|g, v| g.softmax(v[0]).unwrap()))
        }),
    ));
    for (name, weighted) in [("cross_entropy", false), ("cross_entropy_weighted", true)] {
        v.push((
            name,
            Box::new(move |r| {
                let (rows, k) = (r.random_range(1..5), r.random_range(2..6));
                let labels: Vec<usize> = (0..rows).map(|_| r.random_range(0..k)).collect();
                let w: Option<Vec<f32>> = weighted.then(|| (0..k).map(|_| r.random_range(0.2..2.0)).collect());
                (
                    vec![rand_tensor(r, &[rows, k], 2.0)],
                    Box::new(move |g, v| g.cross_entropy(v[0], &labels, w.as_deref()).unwrap()),
                )
            }),
        ));
    }
    v.push((
        "gather_rows",
        Box::new(|r| {
            let (n, w) = (r.random_range(1..5), r.random_range(1..4));
            // repeated rows exercise gradient accumulation
            let idx: Vec<usize> = (0..r.random_range(1..7)).map(|_| r.random_range(0..n)).collect();
            let out = [idx.len(), w];
            (
                vec![rand_tensor(r, &[n, w], 1.0)],
                Box::new(move |g, v| g.gather_rows(v[0], &idx, &out).unwrap()),
            )
        }),
    ));
    v.push((
        "permute",
        Box::new(|r| {
            let s = [r.random_range(1..4), r.random_range(1..4), r.random_range(1..4), r.random_range(1..3)];
            let mut axes = vec![0, 1, 2, 3];
            axes.shuffle(r);
            (vec![rand_tensor(r, &s, 1.0)], Box::new(move |g, v| g.permute(v[0], &axes).unwrap()))
        }),
    ));
    v.push((
        "reshape",
        Box::new(|r| {
            let (a, b) = (r.random_range(1..4), r.random_range(1..4));
            (
                vec![rand_tensor(r, &[a, b * 2], 1.0)],
                Box::new(move |g, v| g.reshape(v[0], &[a * 2, b]).unwrap()),
            )
        }),
    ));
    v.push((
        "mean_axis1",
        Box::new(|r| {
            let s = [r.random_range(1..4), r.random_range(1..5), r.random_range(1..4)];
            (vec![rand_tensor(r, &s, 1.0)], Box::new(|g, v| g.mean_axis1(v[0]).unwrap()))
        }),
    ));
    v
}

/// `(primitive, worst relative error)` for every differentiable primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    cases().iter().map(|(name, make)| (*name, worst(make))).collect()
}
