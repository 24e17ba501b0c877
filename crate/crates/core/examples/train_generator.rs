//! Fit the feature generator against a frozen source classifier without
//! touching any source sample.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sofa::autodiff::Graph;
use sofa::config::Profile;
use sofa::data::synth_benchmark;
use sofa::eval::accuracy_from_logits;
use sofa::models::{one_hot, sample_latent};
use sofa::pipeline::{source_split, train_generator, train_source, SourceFreeGuard, Stage, StageConfig};

fn main() -> sofa::Result<()> {
    let settings = Profile::Desk.settings();
    let ds = synth_benchmark(&settings.synth)?;
    let target = settings.stage.target;
    let stage = StageConfig { epochs: 20, ..settings.stage };
    let source = train_source(&source_split(&ds, target), settings.model, &stage)?.best;

    let mut guard = SourceFreeGuard::new(Stage::Generator, ds.subjects.iter().copied().filter(|&s| s != target));
    let out = train_generator(&source, settings.generator, &stage, &mut guard)?;
    for rec in out.log.iter().step_by(5) {
        println!("epoch {:>3}  generator loss {:.4}", rec.epoch, rec.loss_total);
    }
    println!("samples read while training the generator: {}", guard.reads());
    println!("source untouched: {}", source.params.fingerprint() == out.source_fingerprint);

    // How often does the frozen classifier agree with the requested class?
    let cfg = out.generator.config;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let classes: Vec<usize> = (0..1000).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    let z = sample_latent(classes.len(), cfg.d_z, &mut rng);
    let fake = out.generator.sample(&z, &one_hot(&classes, cfg.n_classes)?)?;
    let mut g = Graph::new();
    let vars = source.bind(&mut g, false)?;
    let w = g.constant(fake)?;
    let logits = source.classify(&mut g, &vars, w)?;
    println!("fidelity over 1000 draws: {:.3}", accuracy_from_logits(g.value(logits), &classes)?);
    Ok(())
}
