//! The two alignment losses on hand-made batches, with gradients.
use sofa::autodiff::{Graph, Tensor};
use sofa::data::SubjectId;
use sofa::losses::{iscon_loss, mmd_loss, BatchMeta, ConLossConfig, MmdConfig};

fn main() -> sofa::Result<()> {
    // Two points at squared distance 2 sigma^2: MMD = 2 - 2/e.
    let mut g = Graph::new();
    let a = g.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0])?)?;
    let b = g.constant(Tensor::matrix(1, 2, vec![1.5, 1.5])?)?;
    let mmd = mmd_loss(&mut g, a, b, &MmdConfig::fixed(vec![1.5]))?;
    g.backward(mmd)?;
    println!("single-pair MMD {:.6} (2 - 2/e = {:.6})", g.value(mmd).item(), 2.0 - 2.0 / std::f64::consts::E);
    println!("d MMD / d a = {:?}", g.grad(a).data());

    // Rows 0 and 1 share a class across subjects. Row 2 is another class
    // from subject 2, so it never enters row 0's denominator.
    let w = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.9, 0.3, -0.8, 0.6, 0.2, -1.0])?;
    let labels = vec![0, 0, 1, 1];
    for subjects in [[0, 1, 2, 0], [0, 1, 0, 0]] {
        let meta = BatchMeta::new(labels.clone(), subjects.iter().map(|&s| SubjectId(s)).collect())?;
        let mut g = Graph::new();
        let v = g.leaf(w.clone())?;
        let out = iscon_loss(&mut g, v, &meta, &ConLossConfig::default())?;
        g.backward(out.loss)?;
        let terms = out.per_anchor.map(|t| g.value(t).data().to_vec()).unwrap_or_default();
        println!(
            "subjects {subjects:?}: IS-Con {:.6}, {} anchors used, {} skipped, per-anchor {terms:.4?}",
            g.value(out.loss).item(),
            out.anchors_used,
            out.anchors_skipped
        );
    }
    Ok(())
}
