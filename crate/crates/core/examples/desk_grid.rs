//! Full desk-scale k-shot grid on the synthetic benchmark.
use std::time::Instant;

use sofa::config::Profile;
use sofa::data::synth_benchmark;
use sofa::eval::{render_table, run_target_grid, GridSpec, TableFormat};
use sofa::pipeline::{source_split, train_generator, train_source, Method, SourceFreeGuard, Stage};

fn main() -> sofa::Result<()> {
    let settings = Profile::Desk.settings();
    let ds = synth_benchmark(&settings.synth)?;
    let target = settings.stage.target;
    let sources: Vec<_> = ds.subjects.iter().copied().filter(|&s| s != target).collect();

    let t0 = Instant::now();
    let source = train_source(&source_split(&ds, target), settings.model, &settings.stage)?;
    println!("source: best val {:?} in {:.1?}", source.best_val_acc, t0.elapsed());

    let t1 = Instant::now();
    let mut guard = SourceFreeGuard::new(Stage::Generator, sources);
    let gen = train_generator(&source.best, settings.generator, &settings.stage, &mut guard)?;
    println!("generator: final loss {:.4} in {:.1?}", gen.log.last().unwrap().loss_total, t1.elapsed());

    let t2 = Instant::now();
    let grid = GridSpec { ks: vec![1, 2, 3, 4, 5], methods: Method::ALL.to_vec(), seeds: (0..5).collect(), workers: 0 };
    let report = run_target_grid(&ds, target, &source.best, &gen.generator, &settings.stage, &grid)?;
    println!("grid in {:.1?}", t2.elapsed());
    print!("{}", render_table(&report, TableFormat::Markdown)?);
    Ok(())
}
