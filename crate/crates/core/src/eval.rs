//! Top-1 accuracy, k-shot grid runs, multi-seed aggregation and tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{kshot_split, Dataset, EegSample, Split, SubjectId};
use crate::error::{Error, Result};
use crate::models::{ClassifierModel, GeneratorModel};
use crate::pipeline::{adapt_target, Method, SourceFreeGuard, Stage, StageConfig};

/// Fraction of `labels` matched by the row-wise argmax of `logits`
/// (ties go to the lowest class index).
pub fn accuracy_from_logits(logits: &crate::autodiff::Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let preds = logits.argmax_rows();
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch { op: "accuracy", lhs: logits.shape().to_vec(), rhs: vec![labels.len()] });
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn top1_accuracy(model: &ClassifierModel, samples: &[EegSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut hits = 0usize;
    for chunk in samples.chunks(256) {
        let x = crate::data::stack_signals(chunk)?;
        let (logits, _) = model.infer(&x)?;
        hits += logits.argmax_rows().iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// One adapted model, scored on the target subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub subject: SubjectId,
    pub k: usize,
    pub method: Method,
    pub seed: u64,
    /// Validation / test accuracy of the best-validation checkpoint.
    pub val_acc: f64,
    pub test_acc: f64,
    /// Same for the parameters after the last epoch.
    pub final_val_acc: f64,
    pub final_test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub subject: SubjectId,
    pub k: usize,
    pub method: Method,
    pub seed: u64,
    pub error: String,
}

/// Mean and sample standard deviation over seeds for one (subject, k, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub subject: SubjectId,
    pub k: usize,
    pub method: Method,
    pub n_seeds: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub final_test_mean: f64,
    pub final_test_std: f64,
    /// Only one seed contributed; the standard deviations are reported as 0.
    pub single_seed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_classes: usize,
    pub dataset_hash: String,
    pub rows: Vec<RunRow>,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
    #[serde(default)]
    pub aggregates: Vec<AggregateRow>,
}

impl RunReport {
    pub fn new(n_classes: usize, dataset_hash: impl Into<String>) -> Self {
        RunReport { n_classes, dataset_hash: dataset_hash.into(), rows: Vec::new(), failures: Vec::new(), aggregates: Vec::new() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Aggregate row for `(subject, k, method)`, if present.
    pub fn aggregate_for(&self, subject: SubjectId, k: usize, method: Method) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.subject == subject && a.k == k && a.method == method)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Merge reports and recompute per-(subject, k, method) aggregates.
pub fn aggregate(reports: &[RunReport]) -> Result<RunReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Empty("report list"));
    };
    let mut merged = RunReport::new(first.n_classes, first.dataset_hash.clone());
    for r in reports {
        if r.n_classes != first.n_classes {
            return Err(Error::ReportMismatch(format!("{} vs {} classes", first.n_classes, r.n_classes)));
        }
        if r.dataset_hash != first.dataset_hash {
            return Err(Error::ReportMismatch("reports come from different datasets".into()));
        }
        merged.rows.extend(r.rows.iter().cloned());
        merged.failures.extend(r.failures.iter().cloned());
    }
    for row in &merged.rows {
        for acc in [row.val_acc, row.test_acc, row.final_val_acc, row.final_test_acc] {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::ReportMismatch(format!("accuracy {acc} outside [0, 1]")));
            }
        }
    }
    merged.rows.sort_by(|a, b| (a.subject, a.k, a.method, a.seed).cmp(&(b.subject, b.k, b.method, b.seed)));
    // The same cell may appear in several reports; it counts once, and only
    // if every copy agrees.
    let mut deduped: Vec<RunRow> = Vec::with_capacity(merged.rows.len());
    for row in merged.rows.drain(..) {
        match deduped.last() {
            Some(prev) if (prev.subject, prev.k, prev.method, prev.seed) == (row.subject, row.k, row.method, row.seed) => {
                if *prev != row {
                    return Err(Error::ReportMismatch(format!(
                        "conflicting results for subject {} k={} {} seed {}",
                        row.subject, row.k, row.method, row.seed
                    )));
                }
            }
            _ => deduped.push(row),
        }
    }
    merged.rows = deduped;
    merged.failures.sort_by(|a, b| (a.subject, a.k, a.method, a.seed).cmp(&(b.subject, b.k, b.method, b.seed)));

    let mut groups: BTreeMap<(SubjectId, usize, Method), Vec<&RunRow>> = BTreeMap::new();
    for row in &merged.rows {
        groups.entry((row.subject, row.k, row.method)).or_default().push(row);
    }
    merged.aggregates = groups
        .into_iter()
        .map(|((subject, k, method), rows)| {
            let pick = |f: fn(&RunRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (val_mean, val_std) = mean_std(&pick(|r| r.val_acc));
            let (test_mean, test_std) = mean_std(&pick(|r| r.test_acc));
            let (final_test_mean, final_test_std) = mean_std(&pick(|r| r.final_test_acc));
            AggregateRow {
                subject,
                k,
                method,
                n_seeds: rows.len(),
                val_mean,
                val_std,
                test_mean,
                test_std,
                final_test_mean,
                final_test_std,
                single_seed: rows.len() == 1,
            }
        })
        .collect();
    Ok(merged)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Tsv,
    Markdown,
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(TableFormat::Tsv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            "json" => Ok(TableFormat::Json),
            other => Err(Error::invalid("format", format!("unknown table format `{other}`"))),
        }
    }
}

/// `"74.6 ±2.1"` for mean .746 and std .021.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.1} ±{:.1}", mean * 100.0, std * 100.0)
}

/// Render the aggregates, ordered by subject, k, then method.
pub fn render_table(report: &RunReport, format: TableFormat) -> Result<String> {
    if format == TableFormat::Json {
        return report.to_json();
    }
    let mut rows: Vec<&AggregateRow> = report.aggregates.iter().collect();
    rows.sort_by(|a, b| (a.subject, a.k, a.method).cmp(&(b.subject, b.k, b.method)));
    let header = ["subject", "k", "method", "seeds", "val", "test"];
    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for r in rows {
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.subject,
                    r.k,
                    r.method,
                    r.n_seeds,
                    format_cell(r.val_mean, r.val_std),
                    format_cell(r.test_mean, r.test_std)
                ));
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str("|---|---:|---|---:|---:|---:|\n");
            for r in rows {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} |\n",
                    r.subject,
                    r.k,
                    r.method,
                    r.n_seeds,
                    format_cell(r.val_mean, r.val_std),
                    format_cell(r.test_mean, r.test_std)
                ));
            }
        }
        TableFormat::Json => unreachable!(),
    }
    Ok(out)
}

/// Which cells to run for one target subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub ks: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Worker threads for independent cells; 0 uses the available parallelism.
    pub workers: usize,
}

/// Run every (k, method, seed) adaptation for `target` from fixed source and
/// generator checkpoints, scoring on the target's val and test splits.
pub fn run_target_grid(
    ds: &Dataset,
    target: SubjectId,
    source: &ClassifierModel,
    generator: &GeneratorModel,
    base: &StageConfig,
    grid: &GridSpec,
) -> Result<RunReport> {
    use rayon::prelude::*;

    let val: Vec<EegSample> = ds.select(&[target], Split::Val).samples().to_vec();
    let test: Vec<EegSample> = ds.select(&[target], Split::Test).samples().to_vec();
    if test.is_empty() {
        return Err(Error::Empty("target test split"));
    }
    let sources: Vec<SubjectId> = ds.subjects.iter().copied().filter(|&s| s != target).collect();

    let mut cells = Vec::new();
    for &k in &grid.ks {
        for &method in &grid.methods {
            for &seed in &grid.seeds {
                cells.push((k, method, seed));
            }
        }
    }
    let run_cell = |&(k, method, seed): &(usize, Method, u64)| -> Result<RunRow> {
        let split = kshot_split(ds, target, k, seed)?;
        let shots: Vec<EegSample> = split.selected.iter().map(|&i| ds.sample(i).clone()).collect();
        let cfg = StageConfig { method, k, target, seed, ..base.clone() };
        let mut guard = SourceFreeGuard::new(Stage::Adapt, sources.iter().copied());
        let out = adapt_target(source, generator, &shots, &val, &cfg, &mut guard)?;
        let score = |m: &ClassifierModel, s: &[EegSample]| if s.is_empty() { Ok(0.0) } else { top1_accuracy(m, s) };
        Ok(RunRow {
            subject: target,
            k,
            method,
            seed,
            val_acc: score(&out.best, &val)?,
            test_acc: score(&out.best, &test)?,
            final_val_acc: score(&out.model, &val)?,
            final_test_acc: score(&out.model, &test)?,
        })
    };

    let workers = if grid.workers == 0 { std::thread::available_parallelism().map_or(1, |n| n.get()) } else { grid.workers };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("run_target_grid", e.to_string()))?;
    let results: Vec<Result<RunRow>> = pool.install(|| cells.par_iter().map(run_cell).collect());

    let mut report = RunReport::new(ds.n_classes, ds.content_hash()?);
    for ((k, method, seed), res) in cells.into_iter().zip(results) {
        match res {
            Ok(row) => report.rows.push(row),
            Err(e) => report.failures.push(CellFailure { subject: target, k, method, seed, error: e.to_string() }),
        }
    }
    aggregate(&[report])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn row(seed: u64, test: f64) -> RunRow {
        RunRow {
            subject: SubjectId(5),
            k: 1,
            method: Method::Iscon,
            seed,
            val_acc: test,
            test_acc: test,
            final_val_acc: test,
            final_test_acc: test,
        }
    }

    #[test]
    fn hand_argmax_case() {
        let logits = Tensor::matrix(3, 2, vec![2.0, 1.0, 0.0, 3.0, 1.0, 1.0]).unwrap();
        assert!((accuracy_from_logits(&logits, &[0, 1, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy_from_logits(&logits, &[]).is_err());
    }

    #[test]
    fn two_seed_stddev() {
        let mut r = RunReport::new(10, "h");
        r.rows = vec![row(0, 0.7), row(1, 0.8)];
        let agg = aggregate(&[r]).unwrap();
        let a = &agg.aggregates[0];
        assert!((a.test_mean - 0.75).abs() < 1e-12);
        assert!((a.test_std - 0.0707).abs() < 1e-4);
        assert!(!a.single_seed);
    }

    #[test]
    fn single_seed_flagged() {
        let mut r = RunReport::new(10, "h");
        r.rows = vec![row(3, 0.4)];
        let agg = aggregate(&[r]).unwrap();
        assert!(agg.aggregates[0].single_seed);
        assert_eq!(agg.aggregates[0].test_std, 0.0);
    }

    #[test]
    fn mixed_reports_rejected() {
        let a = RunReport::new(10, "h");
        let b = RunReport::new(40, "h");
        let c = RunReport::new(10, "other");
        assert!(aggregate(&[a.clone(), b]).is_err());
        assert!(aggregate(&[a, c]).is_err());
    }

    #[test]
    fn markdown_cell_format() {
        assert_eq!(format_cell(0.746, 0.021), "74.6 ±2.1");
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = RunReport::new(10, "h");
        let md = render_table(&r, TableFormat::Markdown).unwrap();
        assert_eq!(md.lines().count(), 2);
        let tsv = render_table(&r, TableFormat::Tsv).unwrap();
        assert_eq!(tsv, "subject\tk\tmethod\tseeds\tval\ttest\n");
    }
}
