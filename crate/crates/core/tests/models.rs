mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use sofa::autodiff::{Graph, Tensor};
use sofa::losses::{cross_entropy, generator_loss};
use sofa::models::{one_hot, sample_latent, ClassifierModel, GeneratorConfig, GeneratorModel, ModelConfig};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x W + b` for a row vector and a `[d_in, d_out]` matrix.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    (0..d_out).map(|j| b.data()[j] + (0..d_in).map(|i| x[i] * w.data()[i * d_out + j]).sum::<f64>()).collect()
}

fn matvec(x: &[f64], w: &Tensor) -> Vec<f64> {
    let zero = Tensor::zeros(&[w.shape()[1]]);
    affine(x, w, &zero)
}

/// Scalar-loop GRU over one `[T, D_in]` sequence.
fn gru_oracle(model: &ClassifierModel, seq: &[Vec<f64>]) -> Vec<f64> {
    let p = |n: &str| model.params.get(n).unwrap();
    let d_enc = model.config.d_enc;
    let mut h = vec![0.0; d_enc];
    for x in seq {
        let az = affine(x, p("f.w_z"), p("f.b_z"));
        let ar = affine(x, p("f.w_r"), p("f.b_r"));
        let ah = affine(x, p("f.w_h"), p("f.b_h"));
        let uz = matvec(&h, p("f.u_z"));
        let ur = matvec(&h, p("f.u_r"));
        let z: Vec<f64> = (0..d_enc).map(|j| sigmoid(az[j] + uz[j])).collect();
        let r: Vec<f64> = (0..d_enc).map(|j| sigmoid(ar[j] + ur[j])).collect();
        let rh: Vec<f64> = (0..d_enc).map(|j| r[j] * h[j]).collect();
        let uh = matvec(&rh, p("f.u_h"));
        let cand: Vec<f64> = (0..d_enc).map(|j| (ah[j] + uh[j]).tanh()).collect();
        h = (0..d_enc).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
    }
    h
}

fn randomized(cfg: ModelConfig, seed: u64) -> ClassifierModel {
    let mut r = rng(seed);
    let mut model = ClassifierModel::new(cfg, &mut r).unwrap();
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in &names {
        let shape = model.params.get(name).unwrap().shape().to_vec();
        model.params.set(name, random_tensor(&shape, -1.0, 1.0, &mut r)).unwrap();
    }
    model
}

fn encode(model: &ClassifierModel, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false).unwrap();
    let v = model.encode(&mut g, &vars, x).unwrap();
    g.value(v).clone()
}

#[test]
fn single_step_gru_matches_hand_unrolled_cell() {
    let cfg = ModelConfig { d_in: 3, t_len: 1, d_enc: 2, d_emb: 2, n_classes: 2 };
    let model = randomized(cfg, 11);
    let x = Tensor::new(vec![1, 1, 3], vec![0.3, -0.7, 0.9]).unwrap();
    let got = encode(&model, &x);
    // With h_0 = 0 the reset gate drops out: h_1 = z * tanh(x W_h + b_h).
    let p = |n: &str| model.params.get(n).unwrap();
    let xr = [0.3, -0.7, 0.9];
    let z: Vec<f64> = affine(&xr, p("f.w_z"), p("f.b_z")).into_iter().map(sigmoid).collect();
    let cand: Vec<f64> = affine(&xr, p("f.w_h"), p("f.b_h")).into_iter().map(f64::tanh).collect();
    for j in 0..2 {
        assert!((got.data()[j] - z[j] * cand[j]).abs() < 1e-14);
    }
}

#[test]
fn gru_matches_scalar_recurrence() {
    for seed in 0..20 {
        let cfg = ModelConfig { d_in: 3, t_len: 5, d_enc: 4, d_emb: 2, n_classes: 2 };
        let model = randomized(cfg, seed);
        let mut r = rng(seed + 100);
        let x = random_tensor(&[2, 5, 3], -2.0, 2.0, &mut r);
        let got = encode(&model, &x);
        for b in 0..2 {
            let seq: Vec<Vec<f64>> = (0..5).map(|t| x.data()[(b * 5 + t) * 3..(b * 5 + t + 1) * 3].to_vec()).collect();
            let want = gru_oracle(&model, &seq);
            for j in 0..4 {
                assert!((got.data()[b * 4 + j] - want[j]).abs() < 1e-12, "seed {seed}");
            }
        }
    }
}

#[test]
fn embed_and_classify_match_naive_matmul() {
    let cfg = ModelConfig { d_in: 2, t_len: 3, d_enc: 5, d_emb: 4, n_classes: 3 };
    let model = randomized(cfg, 3);
    let mut r = rng(4);
    let v = random_tensor(&[6, 5], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false).unwrap();
    let vv = g.constant(v.clone()).unwrap();
    let w = model.embed(&mut g, &vars, vv).unwrap();
    let logits = model.classify(&mut g, &vars, w).unwrap();

    let p = |n: &str| model.params.get(n).unwrap();
    let want_w = naive_matmul(&v, p("g.w"));
    for (i, got) in g.value(w).data().iter().enumerate() {
        assert!((got - want_w[i] - p("g.b").data()[i % 4]).abs() < 1e-12);
    }
    let wt = g.value(w).clone();
    let want_l = naive_matmul(&wt, p("h.w"));
    for (i, got) in g.value(logits).data().iter().enumerate() {
        assert!((got - want_l[i] - p("h.b").data()[i % 3]).abs() < 1e-12);
    }
}

#[test]
fn constant_classifier_head() {
    let cfg = ModelConfig { d_in: 2, t_len: 3, d_enc: 2, d_emb: 2, n_classes: 3 };
    let mut model = randomized(cfg, 5);
    model.params.set("h.w", Tensor::zeros(&[2, 3])).unwrap();
    model.params.set("h.b", Tensor::vector(vec![0.1, -0.2, 0.3])).unwrap();
    let x = random_tensor(&[4, 3, 2], -1.0, 1.0, &mut rng(6));
    let (logits, _) = model.infer(&x).unwrap();
    for row in 0..4 {
        assert_eq!(logits.row(row), &[0.1, -0.2, 0.3]);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let cfg = ModelConfig { d_in: 4, t_len: 6, d_enc: 5, d_emb: 3, n_classes: 3 };
    let model = randomized(cfg, 8);
    let x = random_tensor(&[3, 6, 4], -1.0, 1.0, &mut rng(9));
    let a = model.infer(&x).unwrap();
    let b = model.infer(&x).unwrap();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn generator_zero_weights_give_zero_output() {
    let gen = GeneratorModel::zeros(GeneratorConfig { d_z: 4, n_classes: 3, hidden: 5, d_out: 2 }).unwrap();
    let z = sample_latent(3, 4, &mut rng(0));
    let c = one_hot(&[0, 1, 2], 3).unwrap();
    assert!(gen.sample(&z, &c).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn generator_output_depends_on_class_code() {
    let cfg = GeneratorConfig { d_z: 6, n_classes: 4, hidden: 8, d_out: 3 };
    for seed in 0..20 {
        let mut r = rng(seed);
        let gen = GeneratorModel::new(cfg, &mut r).unwrap();
        let z1 = sample_latent(1, 6, &mut r);
        let z = Tensor::matrix(2, 6, [z1.data(), z1.data()].concat()).unwrap();
        let a = r.random_range(0..4);
        let b = (a + 1 + r.random_range(0..3)) % 4;
        let out = gen.sample(&z, &one_hot(&[a, b], 4).unwrap()).unwrap();
        assert_ne!(out.row(0), out.row(1), "seed {seed}");
    }
}

#[test]
fn latent_moments_at_1e5_draws() {
    let z = sample_latent(1000, 100, &mut rng(42));
    let n = z.numel() as f64;
    let mean = z.data().iter().sum::<f64>() / n;
    let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 1.0).abs() < 0.05, "var {var}");
    assert_ne!(sample_latent(4, 4, &mut rng(1)).data(), sample_latent(4, 4, &mut rng(2)).data());
}

fn judge(seed: u64) -> ClassifierModel {
    let cfg = ModelConfig { d_in: 2, t_len: 2, d_enc: 3, d_emb: 4, n_classes: 5 };
    let mut m = randomized(cfg, seed);
    m.params.freeze();
    m
}

#[test]
fn uniform_judge_gives_ln_c() {
    let mut m = judge(1);
    m.params.unfreeze();
    m.params.set("h.w", Tensor::zeros(&[4, 5])).unwrap();
    m.params.set("h.b", Tensor::zeros(&[5])).unwrap();
    m.params.freeze();
    let mut g = Graph::new();
    let out = g.leaf(random_tensor(&[3, 4], -5.0, 5.0, &mut rng(2))).unwrap();
    let codes = one_hot(&[0, 3, 4], 5).unwrap();
    let loss = generator_loss(&mut g, out, &codes, &m).unwrap();
    assert!((g.value(loss).item() - 5f64.ln()).abs() < 1e-12);
}

#[test]
fn generator_loss_decreases_along_class_direction() {
    let m = judge(3);
    let w = m.params.get("h.w").unwrap();
    let class = 2;
    let dir: Vec<f64> = (0..4).map(|i| w.data()[i * 5 + class]).collect();
    let codes = one_hot(&[class], 5).unwrap();
    let mut prev = f64::INFINITY;
    for step in 1..30 {
        let t = step as f64;
        let mut g = Graph::new();
        let out = g.constant(Tensor::matrix(1, 4, dir.iter().map(|d| d * t).collect()).unwrap()).unwrap();
        let loss = generator_loss(&mut g, out, &codes, &m).unwrap();
        let loss = g.value(loss).item();
        assert!(loss <= prev);
        prev = loss;
    }
    assert!(prev < 0.1);
}

#[test]
fn generator_loss_equals_manual_composition() {
    let m = judge(4);
    let gen = GeneratorModel::new(GeneratorConfig { d_z: 3, n_classes: 5, hidden: 6, d_out: 4 }, &mut rng(5)).unwrap();
    let z = sample_latent(6, 3, &mut rng(6));
    let labels = vec![0, 1, 2, 3, 4, 0];
    let codes = one_hot(&labels, 5).unwrap();

    let mut g = Graph::new();
    let gv = gen.bind(&mut g, false).unwrap();
    let out = gen.generate(&mut g, &gv, &z, &codes).unwrap();
    let got = generator_loss(&mut g, out, &codes, &m).unwrap();

    let mut g2 = Graph::new();
    let feats = g2.constant(gen.sample(&z, &codes).unwrap()).unwrap();
    let mv = m.bind(&mut g2, false).unwrap();
    let logits = m.classify(&mut g2, &mv, feats).unwrap();
    let want = cross_entropy(&mut g2, logits, &labels).unwrap();
    assert!((g.value(got).item() - g2.value(want).item()).abs() < 1e-12);
}

#[test]
fn generator_loss_requires_a_frozen_judge() {
    let mut m = judge(7);
    m.params.unfreeze();
    let mut g = Graph::new();
    let out = g.leaf(Tensor::zeros(&[1, 4])).unwrap();
    assert!(generator_loss(&mut g, out, &one_hot(&[0], 5).unwrap(), &m).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hidden_state_stays_inside_unit_box(seed in 0u64..10_000, scale in 0.1f64..3.0) {
        let cfg = ModelConfig { d_in: 3, t_len: 6, d_enc: 4, d_emb: 2, n_classes: 2 };
        let model = randomized(cfg, seed);
        let x = random_tensor(&[2, 6, 3], -scale, scale, &mut rng(seed ^ 7));
        let h = encode(&model, &x);
        prop_assert!(h.data().iter().all(|v| v.abs() < 1.0));
    }
}
