//! Fit the GRU classifier on every subject but the target and save it.
use sofa::config::Profile;
use sofa::data::{synth_benchmark, Split};
use sofa::eval::top1_accuracy;
use sofa::models::ClassifierModel;
use sofa::pipeline::{source_split, train_source, StageConfig};

fn main() -> sofa::Result<()> {
    let settings = Profile::Desk.settings();
    let ds = synth_benchmark(&settings.synth)?;
    let target = settings.stage.target;
    let stage = StageConfig { epochs: 20, ..settings.stage };

    let out = train_source(&source_split(&ds, target), settings.model, &stage)?;
    for rec in out.log.iter().step_by(5) {
        println!("epoch {:>3}  loss {:.4}  val {:.3}", rec.epoch, rec.loss_total, rec.val_acc.unwrap_or(f64::NAN));
    }
    println!("best source val accuracy {:.3}", out.best_val_acc.unwrap_or(f64::NAN));

    // Zero-shot transfer to the held-out subject.
    let test = ds.select(&[target], Split::Test);
    println!("zero-shot accuracy on subject {}: {:.3}", target.0, top1_accuracy(&out.best, test.samples())?);

    let path = std::env::temp_dir().join("sofa-example-source.ckpt");
    out.best.save(&path)?;
    let back = ClassifierModel::load(&path)?;
    println!("checkpoint {} reloads {}", path.display(), if back.params.fingerprint() == out.best.params.fingerprint() { "bit-exact" } else { "DIFFERENT" });
    std::fs::remove_file(path).ok();
    Ok(())
}
