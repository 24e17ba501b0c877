//! Adapt a source classifier to one new subject from a single labelled
//! sample per class, once per method.
use sofa::config::Profile;
use sofa::data::{kshot_split, synth_benchmark, EegSample, Split};
use sofa::eval::top1_accuracy;
use sofa::pipeline::{adapt_target, source_split, train_generator, train_source, Method, SourceFreeGuard, Stage, StageConfig};

fn main() -> sofa::Result<()> {
    let settings = Profile::Desk.settings();
    let ds = synth_benchmark(&settings.synth)?;
    let target = settings.stage.target;
    let sources: Vec<_> = ds.subjects.iter().copied().filter(|&s| s != target).collect();
    let stage = StageConfig { epochs: 30, ..settings.stage };

    let source = train_source(&source_split(&ds, target), settings.model, &stage)?.best;
    let mut guard = SourceFreeGuard::new(Stage::Generator, sources.clone());
    let generator = train_generator(&source, settings.generator, &stage, &mut guard)?.generator;

    let split = kshot_split(&ds, target, 1, 0)?;
    let shots: Vec<EegSample> = split.selected.iter().map(|&i| ds.sample(i).clone()).collect();
    let val = ds.select(&[target], Split::Val).samples().to_vec();
    let test = ds.select(&[target], Split::Test);
    println!("before adaptation: {:.3}", top1_accuracy(&source, test.samples())?);

    for method in Method::ALL {
        let cfg = StageConfig { method, k: 1, ..stage.clone() };
        let mut guard = SourceFreeGuard::new(Stage::Adapt, sources.clone());
        let out = adapt_target(&source, &generator, &shots, &val, &cfg, &mut guard)?;
        println!(
            "{:<8} test {:.3}  (best target val {:.3}, {} target reads)",
            method.as_str(),
            top1_accuracy(&out.best, test.samples())?,
            out.best_val_acc.unwrap_or(f64::NAN),
            guard.reads()
        );
    }
    Ok(())
}
