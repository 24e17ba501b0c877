//! Aggregate per-seed rows into a report and render it three ways.
use sofa::data::SubjectId;
use sofa::eval::{aggregate, render_table, RunReport, RunRow, TableFormat};
use sofa::pipeline::Method;

fn main() -> sofa::Result<()> {
    let mut report = RunReport::new(10, "example");
    for (i, method) in Method::ALL.into_iter().enumerate() {
        for k in 1..=3 {
            for seed in 0..3u64 {
                let acc = 0.3 + 0.1 * k as f64 + 0.02 * i as f64 + 0.01 * seed as f64;
                report.rows.push(RunRow {
                    subject: SubjectId(5),
                    k,
                    method,
                    seed,
                    val_acc: acc,
                    test_acc: acc - 0.01,
                    final_val_acc: acc - 0.02,
                    final_test_acc: acc - 0.03,
                });
            }
        }
    }
    let merged = aggregate(&[report])?;
    for format in [TableFormat::Markdown, TableFormat::Tsv, TableFormat::Json] {
        println!("{}", render_table(&merged, format)?);
    }
    let json = merged.to_json()?;
    println!("report JSON is {} bytes and parses back: {}", json.len(), RunReport::from_json(&json)? == merged);
    Ok(())
}
