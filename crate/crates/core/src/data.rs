//! EEG sample containers, the `SOFA-EEG-1` file format, the synthetic
//! multi-subject benchmark, the crop window and k-shot selection.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "SOFA-EEG-1\n";
pub const DATASET_VERSION: u32 = 1;

/// Identity of the person a recording came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectId(pub u32);

impl SubjectId {
    /// Reserved id carried by generated pseudo-source features.
    pub const PSEUDO: SubjectId = SubjectId(u32::MAX);
}

impl fmt::Display for SubjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == SubjectId::PSEUDO {
            f.write_str("pseudo")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One `[T, D_in]` recording with its class label and subject.
#[derive(Clone, Debug, PartialEq)]
pub struct EegSample {
    pub signal: Tensor,
    pub label: usize,
    pub subject: SubjectId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub t_len: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub subjects: Vec<SubjectId>,
    samples: Vec<EegSample>,
    splits: Vec<Split>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    subject: SubjectId,
    label: usize,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n_samples: usize,
    #[serde(rename = "T")]
    t_len: usize,
    d_in: usize,
    n_classes: usize,
    subjects: Vec<SubjectId>,
    records: Vec<Record>,
}

impl Dataset {
    pub fn new(t_len: usize, d_in: usize, n_classes: usize, subjects: Vec<SubjectId>) -> Self {
        Dataset { t_len, d_in, n_classes, subjects, samples: Vec::new(), splits: Vec::new() }
    }

    pub fn push(&mut self, sample: EegSample, split: Split) -> Result<()> {
        if sample.signal.shape() != [self.t_len, self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "dataset push",
                lhs: vec![self.t_len, self.d_in],
                rhs: sample.signal.shape().to_vec(),
            });
        }
        sample.signal.ensure_finite("dataset push")?;
        if sample.label >= self.n_classes {
            return Err(Error::invalid("dataset push", format!("label {} >= {} classes", sample.label, self.n_classes)));
        }
        if !self.subjects.contains(&sample.subject) {
            return Err(Error::invalid("dataset push", format!("undeclared subject {}", sample.subject)));
        }
        self.samples.push(sample);
        self.splits.push(split);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[EegSample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &EegSample {
        &self.samples[i]
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &EegSample, Split)> {
        self.samples.iter().zip(&self.splits).enumerate().map(|(i, (s, &sp))| (i, s, sp))
    }

    /// Indices whose sample and split satisfy `keep`.
    pub fn indices_where(&self, keep: impl Fn(&EegSample, Split) -> bool) -> Vec<usize> {
        self.iter().filter(|(_, s, sp)| keep(s, *sp)).map(|(i, _, _)| i).collect()
    }

    /// New dataset holding the given samples (in order), with the same declared subjects.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.t_len, self.d_in, self.n_classes, self.subjects.clone());
        for &i in indices {
            out.samples.push(self.samples[i].clone());
            out.splits.push(self.splits[i]);
        }
        out
    }

    /// Samples of `subjects` in `split`.
    pub fn select(&self, subjects: &[SubjectId], split: Split) -> Dataset {
        let idx = self.indices_where(|s, sp| sp == split && subjects.contains(&s.subject));
        self.subset(&idx)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            version: DATASET_VERSION,
            n_samples: self.samples.len(),
            t_len: self.t_len,
            d_in: self.d_in,
            n_classes: self.n_classes,
            subjects: self.subjects.clone(),
            records: self
                .samples
                .iter()
                .zip(&self.splits)
                .map(|(s, &split)| Record { subject: s.subject, label: s.label, split })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(DATASET_MAGIC.len() + json.len() + 1 + self.len() * self.t_len * self.d_in * 4);
        out.extend_from_slice(DATASET_MAGIC.as_bytes());
        out.extend_from_slice(&json);
        out.push(0);
        for s in &self.samples {
            for &v in s.signal.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let rest = bytes
            .strip_prefix(DATASET_MAGIC.as_bytes())
            .ok_or(Error::BadMagic { expected: "SOFA-EEG-1" })?;
        let nul = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::Inconsistent("header is not NUL-terminated".into()))?;
        let header: Header = serde_json::from_slice(&rest[..nul])?;
        if header.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion(header.version));
        }
        if header.records.len() != header.n_samples {
            return Err(Error::Inconsistent(format!(
                "header declares {} samples but lists {} records",
                header.n_samples,
                header.records.len()
            )));
        }
        let per_sample = header.t_len * header.d_in;
        let expected = header.n_samples * per_sample * 4;
        let payload = &rest[nul + 1..];
        if payload.len() < expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::Inconsistent(format!("{} trailing bytes", payload.len() - expected)));
        }
        let distinct: BTreeSet<_> = header.subjects.iter().collect();
        if distinct.len() != header.subjects.len() {
            return Err(Error::Inconsistent("duplicate subject ids".into()));
        }

        let mut ds = Dataset::new(header.t_len, header.d_in, header.n_classes, header.subjects);
        for (i, rec) in header.records.into_iter().enumerate() {
            let chunk = &payload[i * per_sample * 4..(i + 1) * per_sample * 4];
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
                .collect();
            let signal = Tensor::new(vec![ds.t_len, ds.d_in], data)?;
            ds.push(EegSample { signal, label: rec.label, subject: rec.subject }, rec.split)
                .map_err(|e| Error::Inconsistent(format!("record {i}: {e}")))?;
        }
        Ok(ds)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Stack sample signals into a `[batch, T, D_in]` tensor.
pub fn stack_signals<'a>(samples: impl IntoIterator<Item = &'a EegSample>) -> Result<Tensor> {
    let signals: Vec<&Tensor> = samples.into_iter().map(|s| &s.signal).collect();
    Tensor::stack(&signals)
}

/// Keep timesteps `[start, end)` of every signal (one step per millisecond).
pub fn crop_window(ds: &Dataset, start: usize, end: usize) -> Result<Dataset> {
    if start >= end || end > ds.t_len {
        return Err(Error::invalid(
            "crop_window",
            format!("window [{start}, {end}) does not fit in {} timesteps", ds.t_len),
        ));
    }
    let mut out = Dataset::new(end - start, ds.d_in, ds.n_classes, ds.subjects.clone());
    for (_, s, split) in ds.iter() {
        let signal = s.signal.slice_rows(start, end)?;
        out.push(EegSample { signal, label: s.label, subject: s.subject }, split)?;
    }
    Ok(out)
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    pub per_class: usize,
    pub t_len: usize,
    pub d_in: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn latent_dim(&self) -> usize {
        self.d_in.min(16)
    }
}

/// Per-(subject, class) split sizes: `(train, val, test)` in a 4:1:1 ratio.
pub fn split_counts(per_class: usize) -> (usize, usize, usize) {
    let held = per_class / 6;
    (per_class - 2 * held, held, held)
}

/// Multi-subject benchmark where classes share latent trajectories and
/// subjects differ by a channel-mixing matrix and gain.
///
/// Each class `c` owns a prototype `P_c` (`T x d_lat`, three sinusoids per
/// latent channel); subject `s` owns `A_s` (`d_lat x D_in`, entries with
/// standard deviation `1/sqrt(d_lat)`) and a gain `gamma_s` in `[0.5, 1.5]`.
/// A sample is `gamma_s * P_c A_s` plus i.i.d. `N(0, noise^2)`, stored at
/// `f32` precision.
pub fn synth_benchmark(cfg: &SynthConfig) -> Result<Dataset> {
    let counts = [cfg.n_subjects, cfg.n_classes, cfg.per_class, cfg.t_len, cfg.d_in];
    if counts.contains(&0) {
        return Err(Error::invalid("synth_benchmark", format!("all counts must be >= 1: {cfg:?}")));
    }
    if !(cfg.noise >= 0.0) || !cfg.noise.is_finite() {
        return Err(Error::invalid("synth_benchmark", "noise must be a finite non-negative value"));
    }
    let (t_len, d_in, d_lat) = (cfg.t_len, cfg.d_in, cfg.latent_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Separate stream so the noise level never changes the structure.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let amp = Uniform::new(0.5, 1.5).expect("valid range");
    let freq = Uniform::new(1.0, 6.0).expect("valid range");
    let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| {
            let waves: Vec<[(f64, f64, f64); 3]> = (0..d_lat)
                .map(|_| std::array::from_fn(|_| (amp.sample(&mut rng), freq.sample(&mut rng), phase.sample(&mut rng))))
                .collect();
            let mut p = vec![0.0; t_len * d_lat];
            for t in 0..t_len {
                let u = t as f64 / t_len as f64;
                for (l, w) in waves.iter().enumerate() {
                    p[t * d_lat + l] = w.iter().map(|(a, f, ph)| a * (std::f64::consts::TAU * f * u + ph).sin()).sum();
                }
            }
            p
        })
        .collect();

    let mixing = Normal::new(0.0, 1.0 / (d_lat as f64).sqrt()).expect("valid std");
    let gain = Uniform::new_inclusive(0.5, 1.5).expect("valid range");
    let subjects: Vec<(Vec<f64>, f64)> = (0..cfg.n_subjects)
        .map(|_| {
            let a: Vec<f64> = (0..d_lat * d_in).map(|_| mixing.sample(&mut rng)).collect();
            (a, gain.sample(&mut rng))
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise).expect("valid std");
    let (n_train, n_val, _) = split_counts(cfg.per_class);
    let ids: Vec<SubjectId> = (0..cfg.n_subjects as u32).map(SubjectId).collect();
    let mut ds = Dataset::new(t_len, d_in, cfg.n_classes, ids.clone());
    for (s, (mix, gamma)) in subjects.iter().enumerate() {
        for (c, proto) in prototypes.iter().enumerate() {
            let clean = Tensor::matrix(t_len, d_lat, proto.clone())?
                .matmul(&Tensor::matrix(d_lat, d_in, mix.clone())?)?;
            for i in 0..cfg.per_class {
                let data = clean
                    .data()
                    .iter()
                    .map(|&v| {
                        let n = if cfg.noise > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
                        (gamma * v + n) as f32 as f64
                    })
                    .collect();
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                let signal = Tensor::matrix(t_len, d_in, data)?;
                ds.push(EegSample { signal, label: c, subject: ids[s] }, split)?;
            }
        }
    }
    Ok(ds)
}

/// `k` training samples per class from one target subject.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KShotSplit {
    pub target: SubjectId,
    pub k: usize,
    /// Selected dataset indices, grouped by class in ascending order.
    pub selected: Vec<usize>,
    /// Target training indices that were not selected.
    pub remainder: Vec<usize>,
}

pub fn kshot_split(ds: &Dataset, target: SubjectId, k: usize, seed: u64) -> Result<KShotSplit> {
    if k == 0 {
        return Err(Error::invalid("kshot_split", "k must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::with_capacity(k * ds.n_classes);
    for class in 0..ds.n_classes {
        let pool = ds.indices_where(|s, sp| sp == Split::Train && s.subject == target && s.label == class);
        if pool.len() < k {
            return Err(Error::InsufficientSamples { subject: target.0, class, available: pool.len(), needed: k });
        }
        let mut picks: Vec<usize> = index::sample(&mut rng, pool.len(), k).into_iter().map(|j| pool[j]).collect();
        picks.sort_unstable();
        selected.extend(picks);
    }
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let remainder = ds.indices_where(|s, sp| sp == Split::Train && s.subject == target)
        .into_iter()
        .filter(|i| !chosen.contains(i))
        .collect();
    Ok(KShotSplit { target, k, selected, remainder })
}

/// Uniform shuffle helper shared by the training loops.
pub(crate) fn shuffled<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
