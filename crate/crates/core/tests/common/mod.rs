//! Independent reference implementations shared by the integration tests.
//!
//! Nothing here calls into the tape's backward pass: gradients come from
//! central finite differences and the losses are re-derived with plain loops.

#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sofa::autodiff::{Graph, ParamStore, Tensor, Var};
use sofa::data::SubjectId;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// Elementwise relative error with a floor of 1e-3 on the denominator, so
/// entries that are essentially zero are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar projection `sum(out * weights)` so non-scalar outputs can be checked.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Var {
    if g.value(out).is_scalar() && weights.numel() == 1 {
        return out;
    }
    let w = g.constant(weights.clone()).unwrap();
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

/// Max relative error between tape gradients and central differences for
/// every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
    let out = f(&mut g, &vars);
    let weights = random_tensor(g.shape(out), 0.5, 1.5, &mut rng(seed ^ 0xabc));
    let root = project(&mut g, out, &weights);
    g.backward(root).unwrap();

    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone()).unwrap()).collect();
        let out = f(&mut g, &vars);
        let root = project(&mut g, out, &weights);
        g.value(root).item()
    };

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[k]);
        for i in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Same check, but over the entries of a parameter store. `loss` binds the
/// store to a fresh graph and returns a scalar.
pub fn param_gradcheck<F>(store: &ParamStore, loss: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let root = loss(&mut g, store);
    g.backward(root).unwrap();
    let mut with_grads = store.clone();
    with_grads.zero_grads();
    g.write_grads(&mut with_grads).unwrap();

    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let root = loss(&mut g, s);
        g.value(root).item()
    };
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let base = store.get(name).unwrap().clone();
        let analytic = with_grads.grad(name).unwrap().clone();
        for i in 0..base.numel() {
            let mut plus = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += FD_STEP;
            plus.set(name, t).unwrap();
            let mut minus = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] -= FD_STEP;
            minus.set(name, t).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Contrastive loss computed by materializing `P(i)`, `S(i)` and `A(i)` as
/// index sets for every anchor. `None` when no anchor has a positive.
pub fn brute_force_iscon(
    rows: &[Vec<f64>],
    labels: &[usize],
    subjects: &[SubjectId],
    tau: f64,
    normalize: bool,
) -> Option<f64> {
    let feats: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            if normalize {
                let n = dot(r, r).sqrt().max(1e-12);
                r.iter().map(|v| v / n).collect()
            } else {
                r.clone()
            }
        })
        .collect();
    let n = rows.len();
    let mut total = 0.0;
    let mut used = 0;
    for i in 0..n {
        let p: BTreeSet<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let s: BTreeSet<usize> = (0..n).filter(|&j| j != i && subjects[j] == subjects[i]).collect();
        if p.is_empty() {
            continue;
        }
        let a: BTreeSet<usize> = p.union(&s).copied().collect();
        let num: f64 = p.iter().map(|&j| (dot(&feats[i], &feats[j]) / tau).exp()).sum();
        let den: f64 = a.iter().map(|&k| (dot(&feats[i], &feats[k]) / tau).exp()).sum();
        total += -(num / den).ln();
        used += 1;
    }
    (used > 0).then(|| total / used as f64)
}

/// Biased squared MMD as an explicit double loop over kernel evaluations.
pub fn double_loop_mmd(src: &[Vec<f64>], trg: &[Vec<f64>], sigmas: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64], s: f64| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / (2.0 * s * s)).exp()
    };
    let mut total = 0.0;
    for &s in sigmas {
        let mut ss = 0.0;
        for a in src {
            for b in src {
                ss += k(a, b, s);
            }
        }
        let mut tt = 0.0;
        for a in trg {
            for b in trg {
                tt += k(a, b, s);
            }
        }
        let mut st = 0.0;
        for a in src {
            for b in trg {
                st += k(a, b, s);
            }
        }
        let (n, m) = (src.len() as f64, trg.len() as f64);
        total += ss / (n * n) + tt / (m * m) - 2.0 * st / (n * m);
    }
    total
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a.data()[i * k + p] * b.data()[p * m + j];
            }
        }
    }
    out
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.outer_len()).map(|i| t.row(i).to_vec()).collect()
}

/// Random container with irregular shapes, several subjects and every split,
/// holding `f32`-representable values so a save/load cycle is exact.
pub fn random_dataset(seed: u64) -> sofa::data::Dataset {
    use sofa::data::{Dataset, EegSample, Split};
    let mut r = rng(seed);
    let t_len = r.random_range(1..=9);
    let d_in = r.random_range(1..=5);
    let n_classes = r.random_range(1..=4);
    let subjects: Vec<SubjectId> = (0..r.random_range(1..=3)).map(|i| SubjectId(i * 7 + seed as u32 % 5)).collect();
    let mut ds = Dataset::new(t_len, d_in, n_classes, subjects.clone());
    for _ in 0..r.random_range(0..=12) {
        let data = (0..t_len * d_in).map(|_| r.random_range(-1e3f32..1e3) as f64).collect();
        let sample = EegSample {
            signal: Tensor::matrix(t_len, d_in, data).unwrap(),
            label: r.random_range(0..n_classes),
            subject: subjects[r.random_range(0..subjects.len())],
        };
        let split = [Split::Train, Split::Val, Split::Test][r.random_range(0..3)];
        ds.push(sample, split).unwrap();
    }
    ds
}

/// Number of seeds in `0..seeds` whose dataset fails to survive a trip
/// through a file, compared both structurally and bit for bit.
pub fn round_trip_failures(seeds: u64) -> Vec<u64> {
    let dir = tempfile::tempdir().unwrap();
    (0..seeds)
        .filter(|&seed| {
            let ds = random_dataset(seed);
            let path = dir.path().join(format!("{seed}.eeg"));
            sofa::data::save_dataset(&ds, &path).unwrap();
            let back = sofa::data::load_dataset(&path).unwrap();
            let same_bits = ds.samples().iter().zip(back.samples()).all(|(a, b)| {
                a.signal.data().iter().zip(b.signal.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            });
            back != ds || !same_bits || back.to_bytes().unwrap() != std::fs::read(&path).unwrap()
        })
        .collect()
}
