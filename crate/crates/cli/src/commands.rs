use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fuseseg::fusion::{binarize, cases_hash, segment_case, train_pipeline, CaseData, PipelineModels, StreamKind};
use fuseseg::metrics::{evaluate_case, summary_text, MetricsRecord};
use fuseseg::phantom::generate_dataset;
use fuseseg::psnn::{DecoderDirection, PSNNConfig, TrainConfig};
use fuseseg::register::register_case;
use fuseseg::volio::{load_mask, resample, resample_mask, save_mask, save_volume, CaseManifest, DatasetManifest, Interp};
use serde::Serialize;
use serde_json::json;
use sha2::Digest;

use crate::config::{hex, ExperimentConfig};
use crate::folds::{make_folds, split};
use crate::report::{emit_plots, network_label, write_tables, RowRecords, RunReport};
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    fuseseg::Error::Io { path: path.into(), source: e }.into()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} {} not found", path.display())))
    }
}

/// `provenance.json` under `out`: command, config hash, seed, versions.
pub fn write_provenance(out: &Path, command: &str, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<(), CliError> {
    create_dir(out)?;
    let doc = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "versions": { "fuseseg": env!("CARGO_PKG_VERSION") },
        "config": cfg,
        "details": extra,
    });
    write_json(&out.join("provenance.json"), &doc)
}

pub fn cmd_phantom(cfg: &ExperimentConfig, out: &Path, cases: Option<usize>) -> Result<PathBuf, CliError> {
    let n = cases.unwrap_or(cfg.num_cases);
    let manifest = generate_dataset(&cfg.phantom, n, cfg.seed, out)?;
    write_provenance(out, "phantom", cfg, json!({ "cases": n, "manifest": manifest }))?;
    log::info!("wrote {n} phantom cases, manifest {}", manifest.display());
    Ok(manifest)
}

/// Registers every case without a registered PET; returns the updated
/// manifest path under `out`.
pub fn cmd_register(cfg: &ExperimentConfig, manifest_path: &Path, out: &Path, force: bool) -> Result<PathBuf, CliError> {
    require_file(manifest_path, "manifest")?;
    let mut manifest = DatasetManifest::load(manifest_path)?;
    create_dir(out)?;
    let mut summary = BTreeMap::new();
    for case in &mut manifest.cases {
        if case.registered_pet.is_some() && !force {
            continue;
        }
        let t = Instant::now();
        let target = out.join(&case.case_id).join("registered_pet.raw");
        create_dir(target.parent().expect("has parent"))?;
        let outcome = register_case(case, &cfg.registration, Some(&target))?;
        let d = &outcome.diagnostics;
        log::info!("registered {} in {:.1}s (rigid fallback: {})", case.case_id, t.elapsed().as_secs_f64(), d.rigid_fallback);
        summary.insert(case.case_id.clone(), json!({ "rigid_fallback": d.rigid_fallback }));
    }
    let path = out.join("dataset.json");
    manifest.save(&path)?;
    write_provenance(out, "register", cfg, json!({ "manifest": manifest_path, "cases": summary }))?;
    Ok(path)
}

/// Loads a case onto the configured voxel grid.
fn load_case(case: &CaseManifest, spacing: [f64; 3]) -> Result<CaseData, CliError> {
    let mut c = CaseData::load(case)?;
    if c.ct.spacing != spacing {
        log::info!("{}: resampling {:?} mm to {:?} mm", c.case_id, c.ct.spacing, spacing);
        c.ct = resample(&c.ct, spacing, Interp::Trilinear)?;
        c.registered_pet = c.registered_pet.map(|p| resample(&p, spacing, Interp::Trilinear)).transpose()?;
        c.gtv = resample_mask(&c.gtv, spacing)?;
    }
    Ok(c)
}

fn select_cases<'a>(manifest: &'a DatasetManifest, ids: &[String]) -> Result<Vec<&'a CaseManifest>, CliError> {
    if ids.is_empty() {
        return Ok(manifest.cases.iter().collect());
    }
    ids.iter()
        .map(|id| manifest.case(id).ok_or_else(|| CliError::Config(format!("case {id} is not in the manifest"))))
        .collect()
}

fn fold_train_config(cfg: &ExperimentConfig, fold: usize) -> TrainConfig {
    TrainConfig { seed: cfg.seed.wrapping_add(cfg.train.seed).wrapping_add(100 * fold as u64), ..cfg.train.clone() }
}

fn net_for(cfg: &ExperimentConfig, d: DecoderDirection) -> PSNNConfig {
    PSNNConfig { decoder_direction: d, ..cfg.net.clone() }
}

pub fn cmd_train(cfg: &ExperimentConfig, manifest_path: &Path, out: &Path, ids: &[String]) -> Result<PipelineModels, CliError> {
    require_file(manifest_path, "manifest")?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let chosen = select_cases(&manifest, ids)?;
    let cases = chosen.iter().map(|c| load_case(c, cfg.resampling_mm)).collect::<Result<Vec<_>, _>>()?;
    let owned: Vec<CaseManifest> = chosen.into_iter().cloned().collect();
    let net = net_for(cfg, cfg.decoder_directions[0]);
    let models = train_pipeline(&cases, &cases_hash(&owned), &net, &fold_train_config(cfg, 0), &cfg.inference)?;
    models.save(out)?;
    write_provenance(out, "train", cfg, json!({ "manifest": manifest_path, "cases": models.provenance.train_cases }))?;
    Ok(models)
}

/// Writes the three probability volumes and the LF mask of one case.
fn save_segmentation(dir: &Path, seg: &fuseseg::fusion::Segmentation) -> Result<(), CliError> {
    create_dir(dir)?;
    for kind in StreamKind::ALL {
        save_volume(seg.prob(kind), &dir.join(format!("{}_prob", kind.name().to_lowercase())))?;
    }
    save_mask(&seg.mask, &dir.join("lf_mask"))?;
    Ok(())
}

pub fn cmd_infer(
    cfg: &ExperimentConfig,
    models_dir: &Path,
    manifest_path: &Path,
    out: &Path,
    ids: &[String],
    threshold: Option<f32>,
) -> Result<(), CliError> {
    require_file(manifest_path, "manifest")?;
    require_file(&models_dir.join("pipeline.json"), "model directory")?;
    let models = PipelineModels::load(models_dir)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let threshold = threshold.unwrap_or(models.settings.threshold);
    for case in select_cases(&manifest, ids)? {
        let data = load_case(case, cfg.resampling_mm)?;
        let seg = segment_case(&models, &data, threshold)?;
        save_segmentation(&out.join(&case.case_id), &seg)?;
        log::info!("{}: {} foreground voxels", case.case_id, seg.mask.count());
    }
    write_provenance(out, "infer", cfg, json!({ "models": models_dir, "manifest": manifest_path, "threshold": threshold }))
}

/// Scores one predicted mask against a reference; returns the printed line.
pub fn cmd_eval(pred: &Path, gt: &Path) -> Result<String, CliError> {
    for p in [pred, gt] {
        let (raw, _) = fuseseg::volio::volume_paths(p);
        require_file(&raw, "mask")?;
    }
    let (p, g) = (load_mask(pred)?, load_mask(gt)?);
    let id = pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let r = evaluate_case(&id, &p, &g)?;
    Ok(record_line(&r))
}

pub fn record_line(r: &MetricsRecord) -> String {
    let mm = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.1}"));
    format!("dsc={:.3} hd_mm={} asd_mm={}", r.dsc, mm(r.hd_mm), mm(r.asd_mm))
}

/// Result of a cross-validation run.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub report: RunReport,
    pub summary: String,
    pub out_dir: PathBuf,
}

/// The whole protocol: data → registration → per-fold training → whole-volume
/// segmentation → metrics → tables and plots.
pub fn cmd_cv(cfg: &ExperimentConfig, out: &Path) -> Result<CvOutcome, CliError> {
    let started = Instant::now();
    create_dir(out)?;
    write_provenance(out, "cv", cfg, json!({ "stage": "started" }))?;

    let manifest_path = match &cfg.dataset {
        Some(p) => p.clone(),
        None => {
            let t = Instant::now();
            let p = generate_dataset(&cfg.phantom, cfg.num_cases, cfg.seed, &out.join("data"))?;
            log::info!("generated {} phantoms in {:.1}s", cfg.num_cases, t.elapsed().as_secs_f64());
            p
        }
    };
    let t = Instant::now();
    let registered = cmd_register(cfg, &manifest_path, &out.join("registered"), cfg.dataset.is_none())?;
    log::info!("registration done in {:.1}s", t.elapsed().as_secs_f64());
    let manifest = DatasetManifest::load(&registered)?;
    let mut cases = BTreeMap::new();
    for c in &manifest.cases {
        cases.insert(c.case_id.clone(), (c.clone(), load_case(c, cfg.resampling_mm)?));
    }
    let ids: Vec<String> = cases.keys().cloned().collect();
    let folds = make_folds(&ids, cfg.folds, cfg.seed)?;
    write_json(&out.join("folds.json"), &folds)?;

    let mut rows = Vec::new();
    let mut fold_log = Vec::new();
    for &direction in &cfg.decoder_directions {
        let net = net_for(cfg, direction);
        let mut records: BTreeMap<StreamKind, Vec<MetricsRecord>> = BTreeMap::new();
        for f in 0..cfg.folds {
            let (test_ids, train_ids) = split(&folds, f);
            let train: Vec<CaseData> = train_ids.iter().map(|id| cases[id].1.clone()).collect();
            let train_manifests: Vec<CaseManifest> = train_ids.iter().map(|id| cases[id].0.clone()).collect();
            let t = Instant::now();
            let models = train_pipeline(&train, &cases_hash(&train_manifests), &net, &fold_train_config(cfg, f), &cfg.inference)?;
            let model_dir = out.join("models").join(network_label(direction).to_lowercase()).join(format!("fold_{f}"));
            models.save(&model_dir)?;
            log::info!("{} fold {f}: trained in {:.1}s", network_label(direction), t.elapsed().as_secs_f64());
            for id in &test_ids {
                let case = &cases[id].1;
                let seg = segment_case(&models, case, cfg.inference.threshold)?;
                for kind in StreamKind::ALL {
                    let mask = binarize(seg.prob(kind), cfg.inference.threshold);
                    let r = evaluate_case(id, &mask, &case.gtv)?;
                    log::info!("  {id} {kind}: {}", record_line(&r));
                    records.entry(kind).or_default().push(r);
                }
                if cfg.save_predictions {
                    let dir = out.join("predictions").join(network_label(direction).to_lowercase()).join(id);
                    save_segmentation(&dir, &seg)?;
                }
            }
            fold_log.push(json!({
                "network": network_label(direction),
                "fold": f,
                "train_cases": train_ids,
                "test_cases": test_ids,
                "model_hashes": models.provenance.model_hashes,
            }));
        }
        for kind in StreamKind::ALL {
            let mut recs = records.remove(&kind).unwrap_or_default();
            recs.sort_by(|a, b| a.case_id.cmp(&b.case_id));
            rows.push(RowRecords { direction, stream: kind, records: recs });
        }
    }

    let report = RunReport { folds, rows };
    write_json(&out.join("report.json"), &report)?;
    write_tables(&report, &out.join("tables"))?;
    emit_plots(&report, &out.join("plots"))?;
    let aggs = report.aggregates()?;
    let summary = summary_text(&aggs.iter().map(|(n, a)| (n.clone(), a)).collect::<Vec<_>>());
    write_provenance(
        out,
        "cv",
        cfg,
        json!({
            "stage": "finished",
            "manifest": registered,
            "folds": fold_log,
            "report_hash": hex(&sha2::Sha256::digest(std::fs::read(out.join("tables/summary.csv")).map_err(|e| io_err(out, e))?)),
        }),
    )?;
    log::info!("cv finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(CvOutcome { report, summary, out_dir: out.to_path_buf() })
}

/// Rebuilds tables and plots from a run's `report.json`.
pub fn cmd_report(run: &Path) -> Result<String, CliError> {
    let path = run.join("report.json");
    require_file(&path, "run report")?;
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let report: RunReport = serde_json::from_str(&text).map_err(|e| fuseseg::Error::Json { path: path.clone(), source: e })?;
    write_tables(&report, &run.join("tables"))?;
    emit_plots(&report, &run.join("plots"))?;
    let aggs = report.aggregates()?;
    Ok(summary_text(&aggs.iter().map(|(n, a)| (n.clone(), a)).collect::<Vec<_>>()))
}
