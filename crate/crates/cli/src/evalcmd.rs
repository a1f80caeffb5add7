//! Evaluation command: compares a directory of generated floorplans against
//! a reference set and writes the aggregate report plus a per-sample CSV.

use std::path::Path;

use gsdiff_graph::types::{Floorplan, TopologyGraph};
use gsdiff_metrics::{csv_table, evaluate};

use crate::artifacts::{ensure_dir, load_floorplans, load_topologies, write_text, Manifest};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub fn run(
    cfg: &RunConfig,
    generated: Option<&Path>,
    reference: Option<&Path>,
    topology_inputs: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let default_generated = crate::infer::floorplans_dir(cfg);
    let generated_dir = generated.unwrap_or(&default_generated);
    let default_reference = cfg.dataset_dir();
    let reference_dir = reference.unwrap_or(&default_reference);
    let default_out = cfg.output_dir().join("eval");
    let out_dir = out.unwrap_or(&default_out);

    if !generated_dir.is_dir() {
        return Err(CliError::Dependency(format!(
            "generated directory {} does not exist; run `gsdiff extract` first",
            generated_dir.display()
        )));
    }
    if !reference_dir.is_dir() {
        return Err(CliError::Dependency(format!(
            "reference directory {} does not exist; run `gsdiff dataset generate` first",
            reference_dir.display()
        )));
    }

    let generated: Vec<Floorplan> = load_floorplans(generated_dir)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();
    let reference: Vec<Floorplan> = load_floorplans(reference_dir)?
        .into_iter()
        .map(|(_, p)| p)
        .collect();

    let topologies: Option<Vec<TopologyGraph>> = match topology_inputs {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(CliError::Dependency(format!(
                    "topology input directory {} does not exist",
                    dir.display()
                )));
            }
            Some(load_topologies(dir)?.into_iter().map(|(_, t)| t).collect())
        }
        None => None,
    };

    let (report, rows) = evaluate(&generated, &reference, topologies.as_deref())?;

    ensure_dir(out_dir)?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&out_dir.join("report.json"), &report_json)?;
    write_text(&out_dir.join("samples.csv"), &csv_table(&rows))?;
    Manifest::new("eval", cfg, vec!["report.json".into(), "samples.csv".into()])
        .write(out_dir)?;

    println!(
        "eval: {} generated vs {} reference -> {}",
        report.generated_plans,
        report.reference_plans,
        out_dir.display()
    );
    println!("  alignment error (px):   {:.4}", report.alignment_error);
    match report.fake_edge_ratio {
        Some(fe) => println!("  fake edge ratio:        {:.4}", fe),
        None => println!("  fake edge ratio:        n/a (sets are not index-paired)"),
    }
    match report.mean_ged {
        Some(g) => println!("  mean GED:               {:.4}", g),
        None => println!("  mean GED:               n/a (no topology inputs)"),
    }
    println!("  feature MMD^2:          {:.6}", report.mmd);
    println!(
        "  retrieval (euclidean):  {:.4}",
        report.retrieval_euclidean_mean
    );
    println!(
        "  retrieval (wasserstein):{:.4}",
        report.retrieval_wasserstein_mean
    );
    Ok(())
}
