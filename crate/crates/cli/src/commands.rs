//! Subcommand implementations: each reads the run configuration, produces its
//! artifacts under `out_dir`, and finishes by echoing a metadata file naming
//! the seeds and the configuration that produced the outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use serde::Serialize;

use polygrain::error::{Error, Result};
use polygrain::graph::write_graph;
use polygrain::homogenization::{
    build_dataset, read_dataset_csv, write_dataset_csv, Dataset,
};
use polygrain::io::{fmt_g17, write_text};
use polygrain::microstructure::{
    generate_polycrystal, read_polycrystal, write_polycrystal, Polycrystal,
};
use polygrain::nn::{
    ensure_architecture, load_checkpoint, save_checkpoint, BatchItem, CheckpointMeta, GraphInput,
    ModelParams,
};
use polygrain::phasefield::{run_ramp, write_ramp_csv, NetworkModel};
use polygrain::training::{
    cross_validate, derive_seed, dominance_fraction, median, response_surface, train,
    write_ecdf_csv, write_history_csv, write_metrics_csv, write_surface_csv,
    CrossValidationReport,
};
use polygrain::verification::{
    check_anisotropy, check_convexity, check_objectivity, gradient_check, write_checks_csv,
    CheckReport,
};

use crate::config::RunConfig;

// Seed-derivation tags for generation (the training module owns 1..=5).
const TAG_RVE_GEOMETRY: u64 = 6;
const TAG_GRAIN_COUNT: u64 = 7;

pub fn rve_path(out_dir: &Path, id: u32) -> PathBuf {
    out_dir.join(format!("rve_{id:04}.pxtl"))
}

pub fn graph_path(out_dir: &Path, id: u32) -> PathBuf {
    out_dir.join(format!("rve_{id:04}.graph"))
}

fn artifact(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    tool: &'static str,
    version: &'static str,
    threads: usize,
    config_sha256: String,
    seeds: BTreeMap<&'static str, u64>,
    config_toml: String,
}

fn write_metadata(cfg: &RunConfig, command: &str, threads: usize) -> Result<()> {
    let meta = RunMetadata {
        command,
        tool: "polygrain",
        version: env!("CARGO_PKG_VERSION"),
        threads,
        config_sha256: cfg.sha256(),
        seeds: cfg.seeds(),
        config_toml: cfg.canonical_toml(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    text.push('\n');
    write_text(&artifact(cfg, &format!("{command}.meta.json")), &text)
}

pub fn run(command: &str, cfg: &RunConfig, threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    match command {
        "gen" => gen(cfg, threads),
        "train" => train_cmd(cfg),
        "eval" => eval(cfg),
        "verify" => verify(cfg),
        "demo-phasefield" => demo_phasefield(cfg),
        "report" => report(cfg),
        other => Err(Error::config(format!("unknown command {other}"))),
    }?;
    write_metadata(cfg, command, threads)
}

/// Generates the RVE family, writes each voxel grid and contact graph, and
/// labels the sampled deformations into the dataset CSV.
fn gen(cfg: &RunConfig, threads: usize) -> Result<()> {
    let g = &cfg.generation;
    let mut polys: Vec<(u32, Polycrystal)> = Vec::with_capacity(g.n_rves);
    for id in 0..g.n_rves as u32 {
        let span = (g.n_grains_max - g.n_grains_min + 1) as u64;
        let draw = derive_seed(&[g.seed, TAG_GRAIN_COUNT, id as u64]) % span;
        let n_grains = g.n_grains_min + draw as usize;
        let seed = derive_seed(&[g.seed, TAG_RVE_GEOMETRY, id as u64]);
        let poly = generate_polycrystal(g.grid, n_grains, &g.odf, seed)?;
        write_polycrystal(&rve_path(&cfg.out_dir, id), &poly)?;
        write_graph(&graph_path(&cfg.out_dir, id), &poly.contacts()?)?;
        polys.push((id, poly));
    }
    let ds = build_dataset(
        &polys,
        &cfg.material,
        &cfg.homogenization.homogenizer(),
        &cfg.homogenization.sampling,
        threads,
    )?;
    write_dataset_csv(&artifact(cfg, "dataset.csv"), &ds)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    read_dataset_csv(&artifact(cfg, "dataset.csv"))
}

/// Rebuilds the padded graph inputs for every RVE in the dataset, in dataset
/// order, from the stored voxel files.
fn load_graph_inputs(cfg: &RunConfig, ds: &Dataset) -> Result<Vec<GraphInput>> {
    let arch = cfg.model.variant.architecture(cfg.training.n_max);
    ds.rves
        .iter()
        .map(|r| {
            let poly = read_polycrystal(&rve_path(&cfg.out_dir, r.rve_id))?;
            GraphInput::from_polycrystal(&poly, arch.propagation_mode, arch.n_max)
        })
        .collect()
}

fn load_one_graph_input(cfg: &RunConfig, id: u32) -> Result<GraphInput> {
    let arch = cfg.model.variant.architecture(cfg.training.n_max);
    let poly = read_polycrystal(&rve_path(&cfg.out_dir, id))?;
    GraphInput::from_polycrystal(&poly, arch.propagation_mode, arch.n_max)
}

/// Trains the configured variant on the full dataset and writes the
/// checkpoint, the per-epoch history, and a response surface of the result.
fn train_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let variant = cfg.model.variant;
    let graphs = if variant.is_hybrid() { load_graph_inputs(cfg, &ds)? } else { Vec::new() };
    let mut items = Vec::with_capacity(ds.n_samples());
    for (slot, rve) in ds.rves.iter().enumerate() {
        for s in &rve.samples {
            items.push(BatchItem {
                graph: variant.is_hybrid().then_some(slot),
                c: s.c,
                psi: s.psi,
                s: s.s,
            });
        }
    }
    let outcome = train(variant, &cfg.training, &items, &graphs)?;
    let meta = CheckpointMeta { variant: variant.label().to_string(), seed: cfg.training.seed };
    save_checkpoint(&outcome.params, &meta, &artifact(cfg, "checkpoint.pgrn"))?;
    write_history_csv(&artifact(cfg, "history.csv"), &[outcome.history])?;

    let surface_graph = if variant.is_hybrid() {
        let slot = ds
            .rves
            .iter()
            .position(|r| r.rve_id == cfg.model.surface_rve)
            .ok_or_else(|| {
                Error::config(format!("surface_rve {} is not in the dataset", cfg.model.surface_rve))
            })?;
        Some(slot)
    } else {
        None
    };
    let surface = response_surface(
        &outcome.params,
        surface_graph.map(|slot| &graphs[slot]),
        cfg.model.surface_grid,
        cfg.model.surface_offset,
    )?;
    write_surface_csv(&artifact(cfg, "surface.csv"), &surface)
}

/// Cross-validates every configured variant and writes the fold metrics and
/// the per-RVE error distribution curves.
fn eval(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let any_hybrid = cfg.evaluation.variants.iter().any(|v| v.is_hybrid());
    let graphs = if any_hybrid { load_graph_inputs(cfg, &ds)? } else { Vec::new() };
    let mut reports: Vec<CrossValidationReport> = Vec::new();
    for &variant in &cfg.evaluation.variants {
        reports.push(cross_validate(
            variant,
            &cfg.training,
            &ds,
            &graphs,
            cfg.evaluation.k_folds,
            cfg.evaluation.fold_unit,
        )?);
    }
    write_metrics_csv(&artifact(cfg, "metrics.csv"), &reports)?;
    write_ecdf_csv(&artifact(cfg, "ecdf.csv"), &reports)
}

fn load_model_for(cfg: &RunConfig, rve: u32) -> Result<(ModelParams, Option<GraphInput>)> {
    let (params, meta) = load_checkpoint(&artifact(cfg, "checkpoint.pgrn"))?;
    let expected = cfg.model.variant.architecture(cfg.training.n_max);
    ensure_architecture(&params.arch, &expected)?;
    if meta.variant != cfg.model.variant.label() {
        return Err(Error::config(format!(
            "checkpoint was trained as {} but the configuration expects {}",
            meta.variant,
            cfg.model.variant.label()
        )));
    }
    let graph = if params.arch.hybrid { Some(load_one_graph_input(cfg, rve)?) } else { None };
    Ok((params, graph))
}

/// Runs the consistency battery against the trained checkpoint, writes the
/// check table, and fails the run if a mandatory check does not pass.
fn verify(cfg: &RunConfig) -> Result<()> {
    let v = &cfg.verification;
    let (params, graph) = load_model_for(cfg, v.rve)?;
    let g = graph.as_ref();
    let mut probe: Matrix3<f64> = Matrix3::identity();
    probe[(0, 0)] += v.probe_stretch;
    let reports: Vec<CheckReport> = vec![
        check_objectivity(&params, g, v.n_pairs, v.seed)?,
        check_anisotropy(&params, g, &probe, v.n_random_rotations, v.seed)?,
        check_convexity(&params, g, v.n_pairs, v.seed)?,
        gradient_check(&params, g, v.n_probes, v.seed)?,
    ];
    write_checks_csv(&artifact(cfg, "checks.csv"), &reports)?;
    let failed: Vec<&str> = v
        .mandatory
        .iter()
        .filter_map(|name| {
            let rep = reports.iter().find(|r| r.name == name.as_str())?;
            (!rep.pass).then_some(rep.name)
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::verification(format!(
            "mandatory checks failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Drives the strain ramp through the trained model and writes the damage
/// time series.
fn demo_phasefield(cfg: &RunConfig) -> Result<()> {
    let (params, graph) = load_model_for(cfg, cfg.demo.rve)?;
    let model = NetworkModel { params: &params, graph: graph.as_ref() };
    let records = run_ramp(&model, &cfg.demo.ramp, &cfg.demo.phasefield)?;
    write_ramp_csv(&artifact(cfg, "phasefield.csv"), &records)
}

// ---------------------------------------------------------------------------
// Report assembly.

/// Rows of a CSV artifact, split into fields, or None when absent.
fn read_csv_rows(path: &Path) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = text.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => return Err(Error::io(path, "empty CSV")),
    };
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect();
    Ok(Some((header, rows)))
}

fn column(header: &[String], rows: &[Vec<String>], name: &str, path: &Path) -> Result<Vec<String>> {
    let idx = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::io(path, format!("missing column {name}")))?;
    Ok(rows.iter().map(|r| r[idx].clone()).collect())
}

fn parse_all(values: &[String], path: &Path) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            v.parse::<f64>()
                .map_err(|e| Error::io(path, format!("bad numeric field {v:?}: {e}")))
        })
        .collect()
}

/// Distinct values in first-appearance order.
fn distinct(values: &[String]) -> Vec<String> {
    let mut seen = Vec::new();
    for v in values {
        if !seen.contains(v) {
            seen.push(v.clone());
        }
    }
    seen
}

/// Merges whatever artifacts exist in the output directory into a plain-text
/// summary. Absent artifacts are listed as such rather than failing the run.
fn report(cfg: &RunConfig) -> Result<()> {
    let mut out = String::from("polygrain run report\n====================\n");

    let dataset = artifact(cfg, "dataset.csv");
    match read_csv_rows(&dataset)? {
        None => out.push_str("\n[dataset] absent\n"),
        Some((header, rows)) => {
            let ids = column(&header, &rows, "rve_id", &dataset)?;
            out.push_str(&format!(
                "\n[dataset] rves={} samples={}\n",
                distinct(&ids).len(),
                rows.len()
            ));
        }
    }

    let history = artifact(cfg, "history.csv");
    match read_csv_rows(&history)? {
        None => out.push_str("\n[training] absent\n"),
        Some((header, rows)) => {
            let folds = distinct(&column(&header, &rows, "fold", &history)?);
            let val = parse_all(&column(&header, &rows, "validation_loss", &history)?, &history)?;
            let train = parse_all(&column(&header, &rows, "train_loss", &history)?, &history)?;
            let best = val.iter().cloned().fold(f64::INFINITY, f64::min);
            out.push_str(&format!(
                "\n[training] folds={} epochs={} final_train_loss={} best_validation_loss={}\n",
                folds.len(),
                rows.len() / folds.len().max(1),
                fmt_g17(train.last().copied().unwrap_or(f64::NAN)),
                fmt_g17(best)
            ));
        }
    }

    let metrics = artifact(cfg, "metrics.csv");
    match read_csv_rows(&metrics)? {
        None => out.push_str("\n[cross-validation] absent\n"),
        Some((header, rows)) => {
            out.push_str("\n[cross-validation] per-fold test means\n");
            let variants = column(&header, &rows, "variant", &metrics)?;
            let splits = column(&header, &rows, "split", &metrics)?;
            let psi = parse_all(&column(&header, &rows, "psi_scaled_mse", &metrics)?, &metrics)?;
            let pv = parse_all(
                &column(&header, &rows, "principal_value_scaled_mse", &metrics)?,
                &metrics,
            )?;
            for v in distinct(&variants) {
                let sel: Vec<usize> = (0..rows.len())
                    .filter(|&i| variants[i] == v && splits[i] == "test")
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let mean = |xs: &[f64]| {
                    sel.iter().map(|&i| xs[i]).sum::<f64>() / sel.len() as f64
                };
                out.push_str(&format!(
                    "  {v}: mean_test_psi_mse={} mean_test_principal_value_mse={}\n",
                    fmt_g17(mean(&psi)),
                    fmt_g17(mean(&pv))
                ));
            }
        }
    }

    let ecdf = artifact(cfg, "ecdf.csv");
    match read_csv_rows(&ecdf)? {
        None => out.push_str("\n[blind-error distribution] absent\n"),
        Some((header, rows)) => {
            out.push_str("\n[blind-error distribution] per-RVE principal-value scaled MSE\n");
            let variants = column(&header, &rows, "variant", &ecdf)?;
            let splits = column(&header, &rows, "split", &ecdf)?;
            let mses = parse_all(&column(&header, &rows, "mse", &ecdf)?, &ecdf)?;
            let names = distinct(&variants);
            let test_values: Vec<(String, Vec<f64>)> = names
                .iter()
                .map(|v| {
                    let vals: Vec<f64> = (0..rows.len())
                        .filter(|&i| &variants[i] == v && splits[i] == "test")
                        .map(|i| mses[i])
                        .collect();
                    (v.clone(), vals)
                })
                .filter(|(_, vals)| !vals.is_empty())
                .collect();
            for (v, vals) in &test_values {
                out.push_str(&format!(
                    "  {v}: n={} median={}\n",
                    vals.len(),
                    fmt_g17(median(vals))
                ));
            }
            for (a, va) in &test_values {
                for (b, vb) in &test_values {
                    if a == b {
                        continue;
                    }
                    let frac = dominance_fraction(va, vb, 99);
                    out.push_str(&format!(
                        "  {a} dominates {b} at {} of 99 quantile levels\n",
                        fmt_g17(frac)
                    ));
                }
            }
        }
    }

    let checks = artifact(cfg, "checks.csv");
    match read_csv_rows(&checks)? {
        None => out.push_str("\n[checks] absent\n"),
        Some((header, rows)) => {
            out.push_str("\n[checks]\n");
            let names = column(&header, &rows, "check", &checks)?;
            let passes = column(&header, &rows, "pass", &checks)?;
            let devs = column(&header, &rows, "max_deviation", &checks)?;
            let fracs = column(&header, &rows, "fraction_satisfied", &checks)?;
            for i in 0..rows.len() {
                out.push_str(&format!(
                    "  {}: {} (max_deviation={}, fraction_satisfied={})\n",
                    names[i],
                    if passes[i] == "true" { "pass" } else { "FAIL" },
                    devs[i],
                    fracs[i]
                ));
            }
        }
    }

    let ramp = artifact(cfg, "phasefield.csv");
    match read_csv_rows(&ramp)? {
        None => out.push_str("\n[phasefield demo] absent\n"),
        Some((header, rows)) => {
            let d = parse_all(&column(&header, &rows, "d", &ramp)?, &ramp)?;
            let h = parse_all(&column(&header, &rows, "H", &ramp)?, &ramp)?;
            out.push_str(&format!(
                "\n[phasefield demo] steps={} final_damage={} peak_history={}\n",
                rows.len(),
                fmt_g17(d.last().copied().unwrap_or(f64::NAN)),
                fmt_g17(h.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            ));
        }
    }

    out.push_str(
        "\nnote: scaled MSE normalizes predictions and targets by the true-series min/max.\n",
    );
    write_text(&artifact(cfg, "report.txt"), &out)
}
