//! GRU classifier `h(g(f(x)))` and the class-conditional feature generator.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{decode_checkpoint, encode_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const CLASSIFIER_KIND: &str = "classifier";
pub const GENERATOR_KIND: &str = "generator";

/// Extents of the classification model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub t_len: usize,
    pub d_enc: usize,
    pub d_emb: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_in: 128, t_len: 160, d_enc: 128, d_emb: 128, n_classes: 40 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.d_in, self.t_len, self.d_enc, self.d_emb, self.n_classes];
        if all.contains(&0) {
            return Err(Error::invalid("model config", format!("all extents must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Uniform `±1/sqrt(fan_in)` matrix.
fn init_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

fn store_to_bytes(kind: &str, meta: impl Serialize, params: &ParamStore) -> Result<Vec<u8>> {
    encode_checkpoint(kind, serde_json::to_value(meta)?, params)
}

fn store_from_bytes<M: for<'de> Deserialize<'de>>(kind: &str, bytes: &[u8]) -> Result<(M, ParamStore)> {
    let (manifest, params) = decode_checkpoint(bytes)?;
    if manifest.kind != kind {
        return Err(Error::Inconsistent(format!("checkpoint holds a `{}`, expected a `{kind}`", manifest.kind)));
    }
    let meta = serde_json::from_value(manifest.meta)?;
    Ok((meta, params))
}

const GRU_GATES: [&str; 3] = ["z", "r", "h"];

/// `M = h ∘ g ∘ f`: single-layer GRU encoder, affine embedding, affine classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Graph handles for one binding of a [`ClassifierModel`].
#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
    emb_w: Var,
    emb_b: Var,
    cls_w: Var,
    cls_b: Var,
}

/// Intermediate outputs of a full classifier pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub encoded: Var,
    pub embedded: Var,
    pub logits: Var,
}

impl ClassifierModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for gate in GRU_GATES {
            params.insert(format!("f.w_{gate}"), init_matrix(config.d_in, config.d_enc, rng))?;
            params.insert(format!("f.u_{gate}"), init_matrix(config.d_enc, config.d_enc, rng))?;
            params.insert(format!("f.b_{gate}"), Tensor::zeros(&[config.d_enc]))?;
        }
        params.insert("g.w", init_matrix(config.d_enc, config.d_emb, rng))?;
        params.insert("g.b", Tensor::zeros(&[config.d_emb]))?;
        params.insert("h.w", init_matrix(config.d_emb, config.n_classes, rng))?;
        params.insert("h.b", Tensor::zeros(&[config.n_classes]))?;
        Ok(ClassifierModel { config, params })
    }

    /// Same shapes as [`ClassifierModel::new`], every entry zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for gate in GRU_GATES {
            params.insert(format!("f.w_{gate}"), Tensor::zeros(&[config.d_in, config.d_enc]))?;
            params.insert(format!("f.u_{gate}"), Tensor::zeros(&[config.d_enc, config.d_enc]))?;
            params.insert(format!("f.b_{gate}"), Tensor::zeros(&[config.d_enc]))?;
        }
        params.insert("g.w", Tensor::zeros(&[config.d_enc, config.d_emb]))?;
        params.insert("g.b", Tensor::zeros(&[config.d_emb]))?;
        params.insert("h.w", Tensor::zeros(&[config.d_emb, config.n_classes]))?;
        params.insert("h.b", Tensor::zeros(&[config.n_classes]))?;
        Ok(ClassifierModel { config, params })
    }

    /// Put the parameters on `g`. With `trainable == false`, or when the store
    /// is frozen, they enter as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ClassifierVars> {
        let mut get = |name: &str| -> Result<Var> {
            if trainable {
                g.param(&self.params, name)
            } else {
                let v = self.params.get(name).ok_or_else(|| Error::UnknownParam(name.into()))?;
                g.constant(v.clone())
            }
        };
        let mut w = Vec::with_capacity(3);
        let mut u = Vec::with_capacity(3);
        let mut b = Vec::with_capacity(3);
        for gate in GRU_GATES {
            w.push(get(&format!("f.w_{gate}"))?);
            u.push(get(&format!("f.u_{gate}"))?);
            b.push(get(&format!("f.b_{gate}"))?);
        }
        Ok(ClassifierVars {
            w: w.try_into().expect("three gates"),
            u: u.try_into().expect("three gates"),
            b: b.try_into().expect("three gates"),
            emb_w: get("g.w")?,
            emb_b: get("g.b")?,
            cls_w: get("h.w")?,
            cls_b: get("h.b")?,
        })
    }

    /// Final GRU hidden state for a `[batch, T, D_in]` input.
    pub fn encode(&self, g: &mut Graph, vars: &ClassifierVars, x: &Tensor) -> Result<Var> {
        let c = &self.config;
        if x.rank() != 3 || x.shape()[1] != c.t_len || x.shape()[2] != c.d_in {
            return Err(Error::ShapeMismatch { op: "encode", lhs: x.shape().to_vec(), rhs: vec![0, c.t_len, c.d_in] });
        }
        x.ensure_finite("encode")?;
        let (batch, t_len, d_in) = (x.shape()[0], c.t_len, c.d_in);
        if batch == 0 {
            return Err(Error::Empty("encode batch"));
        }

        // Time-major copy so each step is a contiguous row block.
        let mut tm = vec![0.0; t_len * batch * d_in];
        for b in 0..batch {
            for t in 0..t_len {
                let src = (b * t_len + t) * d_in;
                let dst = (t * batch + b) * d_in;
                tm[dst..dst + d_in].copy_from_slice(&x.data()[src..src + d_in]);
            }
        }
        let xs = g.constant(Tensor::matrix(t_len * batch, d_in, tm)?)?;

        // Input projections for all timesteps at once, biases folded in.
        let mut proj = [xs; 3];
        for k in 0..3 {
            let xw = g.matmul(xs, vars.w[k])?;
            proj[k] = g.add(xw, vars.b[k])?;
        }

        let mut h = g.constant(Tensor::zeros(&[batch, c.d_enc]))?;
        for t in 0..t_len {
            let (lo, hi) = (t * batch, (t + 1) * batch);
            let xz = g.slice(proj[0], 0, lo, hi)?;
            let xr = g.slice(proj[1], 0, lo, hi)?;
            let xh = g.slice(proj[2], 0, lo, hi)?;

            let hz = g.matmul(h, vars.u[0])?;
            let z_pre = g.add(xz, hz)?;
            let z = g.sigmoid(z_pre)?;

            let hr = g.matmul(h, vars.u[1])?;
            let r_pre = g.add(xr, hr)?;
            let r = g.sigmoid(r_pre)?;

            let rh = g.mul(r, h)?;
            let rhu = g.matmul(rh, vars.u[2])?;
            let cand_pre = g.add(xh, rhu)?;
            let cand = g.tanh(cand_pre)?;

            let keep = g.one_minus(z)?;
            let kept = g.mul(keep, h)?;
            let fresh = g.mul(z, cand)?;
            h = g.add(kept, fresh)?;
        }
        Ok(h)
    }

    /// `w = v W_g + b_g`
    pub fn embed(&self, g: &mut Graph, vars: &ClassifierVars, v: Var) -> Result<Var> {
        let vw = g.matmul(v, vars.emb_w)?;
        g.add(vw, vars.emb_b)
    }

    /// Class logits `w W_c + b_c`.
    pub fn classify(&self, g: &mut Graph, vars: &ClassifierVars, w: Var) -> Result<Var> {
        let ww = g.matmul(w, vars.cls_w)?;
        g.add(ww, vars.cls_b)
    }

    pub fn forward(&self, g: &mut Graph, vars: &ClassifierVars, x: &Tensor) -> Result<Forward> {
        let encoded = self.encode(g, vars, x)?;
        let embedded = self.embed(g, vars, encoded)?;
        let logits = self.classify(g, vars, embedded)?;
        Ok(Forward { encoded, embedded, logits })
    }

    /// Logits and embeddings without recording gradients.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &vars, x)?;
        Ok((g.value(out.logits).clone(), g.value(out.embedded).clone()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        store_to_bytes(CLASSIFIER_KIND, self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params): (ModelConfig, _) = store_from_bytes(CLASSIFIER_KIND, bytes)?;
        let reference = ClassifierModel::zeros(config)?;
        check_layout(&reference.params, &params)?;
        Ok(ClassifierModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_layout(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    let same = expected.len() == found.len()
        && expected
            .iter()
            .zip(found.iter())
            .all(|((na, pa), (nb, pb))| na == nb && pa.value.shape() == pb.value.shape());
    if same {
        Ok(())
    } else {
        Err(Error::Inconsistent("checkpoint parameters do not match the declared config".into()))
    }
}

/// Extents of the feature generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub d_z: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub d_out: usize,
}

impl GeneratorConfig {
    /// Generator that emits features in `model`'s embedding space.
    pub fn for_model(model: &ModelConfig) -> Self {
        GeneratorConfig { d_z: 100, n_classes: model.n_classes, hidden: 128, d_out: model.d_emb }
    }

    pub fn input_dim(&self) -> usize {
        self.d_z + self.n_classes
    }
}

/// Three-layer perceptron `G(z, c)` over the concatenated latent and one-hot code.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamStore,
}

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    layers: [(Var, Var); 3],
}

impl GeneratorModel {
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |r, c| init_matrix(r, c, rng))
    }

    pub fn zeros(config: GeneratorConfig) -> Result<Self> {
        Self::build(config, |r, c| Tensor::zeros(&[r, c]))
    }

    fn build(config: GeneratorConfig, mut init: impl FnMut(usize, usize) -> Tensor) -> Result<Self> {
        if [config.d_z, config.n_classes, config.hidden, config.d_out].contains(&0) {
            return Err(Error::invalid("generator config", format!("all extents must be >= 1: {config:?}")));
        }
        let dims = [config.input_dim(), config.hidden, config.hidden, config.d_out];
        let mut params = ParamStore::new();
        for layer in 0..3 {
            params.insert(format!("gen.l{}.w", layer + 1), init(dims[layer], dims[layer + 1]))?;
            params.insert(format!("gen.l{}.b", layer + 1), Tensor::zeros(&[dims[layer + 1]]))?;
        }
        Ok(GeneratorModel { config, params })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<GeneratorVars> {
        let mut layers = Vec::with_capacity(3);
        for layer in 1..=3 {
            let mut get = |name: String| -> Result<Var> {
                if trainable {
                    g.param(&self.params, &name)
                } else {
                    let v = self.params.get(&name).ok_or(Error::UnknownParam(name))?;
                    g.constant(v.clone())
                }
            };
            let w = get(format!("gen.l{layer}.w"))?;
            let b = get(format!("gen.l{layer}.b"))?;
            layers.push((w, b));
        }
        Ok(GeneratorVars { layers: layers.try_into().expect("three layers") })
    }

    /// Features for latent rows `z` `[batch, d_z]` and one-hot codes `c` `[batch, C]`.
    pub fn generate(&self, g: &mut Graph, vars: &GeneratorVars, z: &Tensor, c: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        if z.rank() != 2 || z.shape()[1] != cfg.d_z {
            return Err(Error::ShapeMismatch { op: "generate", lhs: z.shape().to_vec(), rhs: vec![z.shape()[0], cfg.d_z] });
        }
        if c.rank() != 2 || c.shape() != [z.shape()[0], cfg.n_classes] {
            return Err(Error::ShapeMismatch { op: "generate", lhs: c.shape().to_vec(), rhs: vec![z.shape()[0], cfg.n_classes] });
        }
        one_hot_labels(c)?;
        let zv = g.constant(z.clone())?;
        let cv = g.constant(c.clone())?;
        let mut h = g.concat(zv, cv)?;
        for (i, (w, b)) in vars.layers.iter().enumerate() {
            let hw = g.matmul(h, *w)?;
            h = g.add(hw, *b)?;
            if i < 2 {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Generated features without recording gradients.
    pub fn sample(&self, z: &Tensor, c: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let out = self.generate(&mut g, &vars, z, c)?;
        Ok(g.value(out).clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        store_to_bytes(GENERATOR_KIND, self.config, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, params): (GeneratorConfig, _) = store_from_bytes(GENERATOR_KIND, bytes)?;
        check_layout(&GeneratorModel::zeros(config)?.params, &params)?;
        Ok(GeneratorModel { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// I.i.d. standard normal `[batch, d_z]`.
pub fn sample_latent<R: Rng + ?Sized>(batch: usize, d_z: usize, rng: &mut R) -> Tensor {
    let data = (0..batch * d_z).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(batch, d_z, data).expect("sized")
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_classes {
            return Err(Error::invalid("one_hot", format!("label {l} out of range for {n_classes} classes")));
        }
        data[i * n_classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, data)
}

/// Class index of each one-hot row; any other row is an error.
pub fn one_hot_labels(c: &Tensor) -> Result<Vec<usize>> {
    (0..c.outer_len())
        .map(|i| {
            let row = c.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::invalid("generate", format!("row {i} of the class code is not one-hot")));
            }
            Ok(row.iter().position(|&v| v == 1.0).expect("one entry"))
        })
        .collect()
}
