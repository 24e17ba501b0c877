//! The three training stages.
//!
//! Stage (a) sees source-subject data. Stages (b) and (c) never take a
//! source dataset as an argument, and every sample they do read passes
//! through a [`SourceFreeGuard`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, Graph, Tensor};
use crate::data::{shuffled, stack_signals, Dataset, EegSample, Split, SubjectId};
use crate::error::{Error, Result};
use crate::eval::top1_accuracy;
use crate::losses::{
    cross_entropy, generator_loss, iscon_loss, mmd_loss, total_loss, BatchMeta, ConLossConfig, MmdConfig,
};
use crate::models::{one_hot, sample_latent, ClassifierModel, GeneratorConfig, GeneratorModel, ModelConfig};

/// Alignment term added to the target cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain k-shot fine-tuning.
    Baseline,
    Mmd,
    Iscon,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Mmd, Method::Iscon];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Mmd => "mmd",
            Method::Iscon => "iscon",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "mmd" => Ok(Method::Mmd),
            "iscon" => Ok(Method::Iscon),
            other => Err(Error::invalid("method", format!("unknown method `{other}` (baseline, mmd, iscon)"))),
        }
    }
}

/// Hyperparameters shared by the three stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub method: Method,
    pub k: usize,
    pub target: SubjectId,
    pub seed: u64,
    /// Generated features per step; `None` means `min(batch_size, 256)`.
    pub fake_batch: Option<usize>,
    /// Draw generated class codes round-robin instead of uniformly at random.
    pub class_balanced: bool,
    /// Generator updates per generator-training epoch.
    pub generator_steps: usize,
    pub temperature: f64,
    pub mmd: MmdConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            epochs: 200,
            batch_size: 1200,
            lr: 1e-3,
            lambda: 1.0,
            method: Method::Iscon,
            k: 1,
            target: SubjectId(0),
            seed: 0,
            fake_batch: None,
            class_balanced: true,
            generator_steps: 16,
            temperature: 0.5,
            mmd: MmdConfig::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("stage config", "batch_size must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("stage config", format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.fake_batch == Some(0) || self.generator_steps == 0 {
            return Err(Error::invalid("stage config", "fake_batch and generator_steps must be >= 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("stage config", "temperature must be positive"));
        }
        Ok(())
    }

    pub fn fake_batch_size(&self) -> usize {
        self.fake_batch.unwrap_or_else(|| self.batch_size.min(256))
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    fn con(&self) -> ConLossConfig {
        ConLossConfig { temperature: self.temperature, normalize: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Source,
    Generator,
    Adapt,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Source => "source",
            Stage::Generator => "generator",
            Stage::Adapt => "adapt",
        })
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub loss_cls: f64,
    pub loss_align: f64,
    pub loss_total: f64,
    pub val_acc: Option<f64>,
}

pub fn log_to_jsonl(records: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Records every sample read by a source-free stage and refuses samples of
/// source subjects.
#[derive(Clone, Debug)]
pub struct SourceFreeGuard {
    stage: Stage,
    source_subjects: BTreeSet<SubjectId>,
    reads: usize,
    violations: Vec<SubjectId>,
}

impl SourceFreeGuard {
    pub fn new(stage: Stage, source_subjects: impl IntoIterator<Item = SubjectId>) -> Self {
        SourceFreeGuard { stage, source_subjects: source_subjects.into_iter().collect(), reads: 0, violations: Vec::new() }
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn admit(&mut self, sample: &EegSample) -> Result<()> {
        self.reads += 1;
        if self.source_subjects.contains(&sample.subject) {
            self.violations.push(sample.subject);
            return Err(Error::SourceAccess { stage: self.stage.to_string(), subject: sample.subject.0 });
        }
        Ok(())
    }

    pub fn reads(&self) -> usize {
        self.reads
    }

    pub fn violations(&self) -> &[SubjectId] {
        &self.violations
    }
}

#[derive(Clone, Debug)]
pub struct SourceOutcome {
    /// Parameters after the last epoch.
    pub model: ClassifierModel,
    /// Parameters at the best validation accuracy (the final ones without a val split).
    pub best: ClassifierModel,
    pub best_val_acc: Option<f64>,
    pub log: Vec<LogRecord>,
}

fn mean_loss_on(model: &ClassifierModel, samples: &[&EegSample]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(256) {
        let x = stack_signals(chunk.iter().copied())?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false)?;
        let out = model.forward(&mut g, &vars, &x)?;
        let ce = cross_entropy(&mut g, out.logits, &labels)?;
        total += g.value(ce).item() * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

fn accuracy_or_none(model: &ClassifierModel, samples: &[EegSample]) -> Result<Option<f64>> {
    if samples.is_empty() {
        Ok(None)
    } else {
        top1_accuracy(model, samples).map(Some)
    }
}

/// Every non-test sample of every subject except `target`: the only data
/// stage (a) may see.
pub fn source_split(ds: &Dataset, target: SubjectId) -> Dataset {
    ds.subset(&ds.indices_where(|s, sp| s.subject != target && sp != Split::Test))
}

/// Stage (a): fit `h ∘ g ∘ f` on the `Train` split of `ds` with minibatch
/// Adam; the `Val` split drives the best-checkpoint choice.
///
/// The log starts with an epoch-0 record of the untrained model's mean
/// training loss.
pub fn train_source(ds: &Dataset, model_cfg: ModelConfig, cfg: &StageConfig) -> Result<SourceOutcome> {
    cfg.validate()?;
    if model_cfg.d_in != ds.d_in || model_cfg.t_len != ds.t_len || model_cfg.n_classes != ds.n_classes {
        return Err(Error::invalid("train_source", format!("model config {model_cfg:?} does not fit the dataset")));
    }
    let train: Vec<&EegSample> = ds.iter().filter(|(_, _, sp)| *sp == Split::Train).map(|(_, s, _)| s).collect();
    if train.is_empty() {
        return Err(Error::Empty("source training set"));
    }
    let val: Vec<EegSample> = ds.iter().filter(|(_, _, sp)| *sp == Split::Val).map(|(_, s, _)| s.clone()).collect();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = ClassifierModel::new(model_cfg, &mut init_rng)?;
    let adam = cfg.adam();

    let initial_loss = mean_loss_on(&model, &train)?;
    let initial_val = accuracy_or_none(&model, &val)?;
    let mut log = vec![LogRecord {
        stage: Stage::Source,
        epoch: 0,
        step: 0,
        loss_cls: initial_loss,
        loss_align: 0.0,
        loss_total: initial_loss,
        val_acc: initial_val,
    }];
    let mut best = model.clone();
    let mut best_val = initial_val;

    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = shuffled(train.len(), &mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&EegSample> = batch.iter().map(|&i| train[i]).collect();
            let x = stack_signals(samples.iter().copied())?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let out = model.forward(&mut g, &vars, &x)?;
            let loss = cross_entropy(&mut g, out.logits, &labels)?;
            g.backward(loss)?;
            g.write_grads(&mut model.params)?;
            adam_step(&mut model.params, &adam)?;
            epoch_loss += g.value(loss).item() * batch.len() as f64;
            step += 1;
        }
        let loss = epoch_loss / train.len() as f64;
        let val_acc = accuracy_or_none(&model, &val)?;
        if val_acc.is_some() && val_acc > best_val {
            best_val = val_acc;
            best = model.clone();
        }
        log.push(LogRecord {
            stage: Stage::Source,
            epoch,
            step,
            loss_cls: loss,
            loss_align: 0.0,
            loss_total: loss,
            val_acc,
        });
    }
    if val.is_empty() {
        best = model.clone();
    }
    Ok(SourceOutcome { model, best, best_val_acc: best_val, log })
}

/// Class codes for a fake batch: round-robin when balanced, else uniform.
fn draw_classes<R: Rng + ?Sized>(n: usize, n_classes: usize, balanced: bool, rng: &mut R) -> Vec<usize> {
    if balanced {
        let offset = rng.random_range(0..n_classes);
        let mut classes: Vec<usize> = (0..n).map(|i| (i + offset) % n_classes).collect();
        let order = shuffled(n, rng);
        classes = order.into_iter().map(|i| classes[i]).collect();
        classes
    } else {
        (0..n).map(|_| rng.random_range(0..n_classes)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutcome {
    pub generator: GeneratorModel,
    pub log: Vec<LogRecord>,
    /// Source parameter fingerprint, identical before and after training.
    pub source_fingerprint: String,
}

/// Stage (b): fit `G(z, c)` so the frozen source classifier head assigns its
/// output to class `c`. Only the source parameters are consulted.
pub fn train_generator(
    source: &ClassifierModel,
    gen_cfg: GeneratorConfig,
    cfg: &StageConfig,
    guard: &mut SourceFreeGuard,
) -> Result<GeneratorOutcome> {
    cfg.validate()?;
    if guard.stage() != Stage::Generator {
        return Err(Error::invalid("train_generator", format!("guard is set up for stage {}", guard.stage())));
    }
    if gen_cfg.d_out != source.config.d_emb || gen_cfg.n_classes != source.config.n_classes {
        return Err(Error::invalid("train_generator", "generator output must match the classifier embedding"));
    }
    let mut judge = source.clone();
    judge.params.freeze();
    let fingerprint = judge.params.fingerprint();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut draw_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut generator = GeneratorModel::new(gen_cfg, &mut init_rng)?;
    let adam = cfg.adam();
    let n = cfg.fake_batch_size();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..cfg.generator_steps {
            let z = sample_latent(n, gen_cfg.d_z, &mut draw_rng);
            let classes: Vec<usize> = (0..n).map(|_| draw_rng.random_range(0..gen_cfg.n_classes)).collect();
            let codes = one_hot(&classes, gen_cfg.n_classes)?;
            let mut g = Graph::new();
            let vars = generator.bind(&mut g, true)?;
            let fake = generator.generate(&mut g, &vars, &z, &codes)?;
            let loss = generator_loss(&mut g, fake, &codes, &judge)?;
            g.backward(loss)?;
            g.write_grads(&mut generator.params)?;
            adam_step(&mut generator.params, &adam)?;
            epoch_loss += g.value(loss).item();
            step += 1;
        }
        let loss = epoch_loss / cfg.generator_steps as f64;
        log.push(LogRecord {
            stage: Stage::Generator,
            epoch,
            step,
            loss_cls: loss,
            loss_align: 0.0,
            loss_total: loss,
            val_acc: None,
        });
    }
    if judge.params.fingerprint() != fingerprint || judge.params.iter().any(|(_, p)| p.grad.data().iter().any(|&v| v != 0.0)) {
        return Err(Error::FrozenGradient("source classifier".into()));
    }
    Ok(GeneratorOutcome { generator, log, source_fingerprint: fingerprint })
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    pub model: ClassifierModel,
    pub best: ClassifierModel,
    pub best_val_acc: Option<f64>,
    pub log: Vec<LogRecord>,
}

/// Generated features and their class codes, without gradient.
pub fn pseudo_source_batch<R: Rng + ?Sized>(
    generator: &GeneratorModel,
    n: usize,
    balanced: bool,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    let cfg = generator.config;
    let z = sample_latent(n, cfg.d_z, rng);
    let classes = draw_classes(n, cfg.n_classes, balanced, rng);
    let codes = one_hot(&classes, cfg.n_classes)?;
    Ok((generator.sample(&z, &codes)?, classes))
}

/// Stage (c): fine-tune a copy of the source classifier on the k-shot target
/// samples, adding `lambda` times an alignment term against generated
/// pseudo-source features. `val` holds target validation samples (may be empty).
pub fn adapt_target(
    source: &ClassifierModel,
    generator: &GeneratorModel,
    target: &[EegSample],
    val: &[EegSample],
    cfg: &StageConfig,
    guard: &mut SourceFreeGuard,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if guard.stage() != Stage::Adapt {
        return Err(Error::invalid("adapt_target", format!("guard is set up for stage {}", guard.stage())));
    }
    if target.is_empty() {
        return Err(Error::Empty("target set"));
    }
    if generator.config.d_out != source.config.d_emb || generator.config.n_classes != source.config.n_classes {
        return Err(Error::invalid("adapt_target", "generator checkpoint does not match the source classifier"));
    }
    for s in target.iter().chain(val) {
        guard.admit(s)?;
        if s.subject != cfg.target {
            return Err(Error::invalid("adapt_target", format!("sample of subject {} in the target set", s.subject)));
        }
    }
    let gen_fingerprint = generator.params.fingerprint();

    // Fresh optimizer state: the target model starts from the source weights
    // only, exactly as if they had been loaded from a checkpoint.
    let mut model = source.clone();
    model.params.unfreeze();
    model.params.reset_optimizer();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    let mut fake_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(5));
    let adam = cfg.adam();
    // Target batches are capped at the fake-batch size and each is paired
    // with an equally sized fake batch.
    let batch_cap = cfg.fake_batch_size();
    let con = cfg.con();

    let mut best = model.clone();
    let mut best_val = accuracy_or_none(&model, val)?;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let order = if target.len() <= batch_cap { (0..target.len()).collect() } else { shuffled(target.len(), &mut order_rng) };
        let batches: Vec<&[usize]> = order.chunks(batch_cap).collect();
        for (b, batch) in batches.iter().enumerate() {
            let mut samples = Vec::with_capacity(batch.len());
            for &i in batch.iter() {
                guard.admit(&target[i])?;
                samples.push(&target[i]);
            }
            let x = stack_signals(samples.iter().copied())?;
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true)?;
            let out = model.forward(&mut g, &vars, &x)?;
            let cls = cross_entropy(&mut g, out.logits, &labels)?;
            let align = match cfg.method {
                Method::Baseline => None,
                Method::Mmd => {
                    let (fake, _) = pseudo_source_batch(generator, batch.len(), cfg.class_balanced, &mut fake_rng)?;
                    let fake = g.constant(fake)?;
                    Some(mmd_loss(&mut g, fake, out.embedded, &cfg.mmd)?)
                }
                Method::Iscon => {
                    let (fake, fake_classes) =
                        pseudo_source_batch(generator, batch.len(), cfg.class_balanced, &mut fake_rng)?;
                    let fake = g.constant(fake)?;
                    let joint = g.concat_rows(out.embedded, fake)?;
                    let mut all_labels = labels.clone();
                    all_labels.extend(&fake_classes);
                    let mut subjects: Vec<SubjectId> = samples.iter().map(|s| s.subject).collect();
                    subjects.resize(all_labels.len(), SubjectId::PSEUDO);
                    let meta = BatchMeta::new(all_labels, subjects)?;
                    Some(iscon_loss(&mut g, joint, &meta, &con)?.loss)
                }
            };
            let (total, align_value) = match align {
                Some(a) => (total_loss(&mut g, cls, a, cfg.lambda)?, g.value(a).item()),
                None => (cls, 0.0),
            };
            g.backward(total)?;
            g.write_grads(&mut model.params)?;
            adam_step(&mut model.params, &adam)?;
            step += 1;

            let last = b + 1 == batches.len();
            let val_acc = if last { accuracy_or_none(&model, val)? } else { None };
            if last && val_acc.is_some() && val_acc > best_val {
                best_val = val_acc;
                best = model.clone();
            }
            log.push(LogRecord {
                stage: Stage::Adapt,
                epoch,
                step,
                loss_cls: g.value(cls).item(),
                loss_align: align_value,
                loss_total: g.value(total).item(),
                val_acc,
            });
        }
    }
    if val.is_empty() {
        best = model.clone();
    }
    if generator.params.fingerprint() != gen_fingerprint {
        return Err(Error::FrozenGradient("generator".into()));
    }
    Ok(AdaptOutcome { model, best, best_val_acc: best_val, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parse_and_order() {
        assert_eq!("mmd".parse::<Method>().unwrap(), Method::Mmd);
        assert!("dann".parse::<Method>().is_err());
        let mut m = vec![Method::Iscon, Method::Baseline, Method::Mmd];
        m.sort();
        assert_eq!(m, Method::ALL);
    }

    #[test]
    fn balanced_classes_cover_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes = draw_classes(20, 10, true, &mut rng);
        for c in 0..10 {
            assert_eq!(classes.iter().filter(|&&x| x == c).count(), 2);
        }
    }

    #[test]
    fn guard_counts_and_refuses() {
        let mut guard = SourceFreeGuard::new(Stage::Adapt, [SubjectId(0), SubjectId(1)]);
        let s = |id| EegSample { signal: Tensor::zeros(&[1, 1]), label: 0, subject: SubjectId(id) };
        guard.admit(&s(5)).unwrap();
        assert!(matches!(guard.admit(&s(1)), Err(Error::SourceAccess { subject: 1, .. })));
        assert_eq!(guard.reads(), 2);
        assert_eq!(guard.violations(), &[SubjectId(1)]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = StageConfig::default();
        assert_eq!(cfg.fake_batch_size(), 256);
        cfg.lambda = -0.5;
        assert!(cfg.validate().is_err());
    }
}
