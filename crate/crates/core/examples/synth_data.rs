//! Synthesize a benchmark, write it to disk, read it back and draw a k-shot split.
use sofa::config::Profile;
use sofa::data::{crop_window, kshot_split, load_dataset, save_dataset, split_counts, synth_benchmark, SubjectId};

fn main() -> sofa::Result<()> {
    let cfg = Profile::Desk.settings().synth;
    let ds = synth_benchmark(&cfg)?;
    let (train, val, test) = split_counts(cfg.per_class);
    println!(
        "{} samples: {} subjects x {} classes, T={} D={}, per class {train}/{val}/{test}",
        ds.len(),
        ds.subjects.len(),
        ds.n_classes,
        ds.t_len,
        ds.d_in
    );

    let path = std::env::temp_dir().join("sofa-example.eeg");
    save_dataset(&ds, &path)?;
    let back = load_dataset(&path)?;
    println!("round trip through {}: {}", path.display(), if back == ds { "identical" } else { "DIFFERENT" });
    println!("content hash {}", &ds.content_hash()?[..16]);

    // Keep the second half of every trial.
    let half = crop_window(&ds, ds.t_len / 2, ds.t_len)?;
    println!("cropped to T={}", half.t_len);

    let split = kshot_split(&ds, SubjectId(5), 2, 0)?;
    println!("2-shot split of subject 5: {} selected, {} left over", split.selected.len(), split.remainder.len());
    std::fs::remove_file(path).ok();
    Ok(())
}
