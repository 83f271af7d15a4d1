//! Command implementations behind the CLI. Each command loads what it
//! needs from the run configuration, writes its artifacts under the output
//! directory and returns a JSON summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    fit_gold_standard, fit_histogram_baseline, gold_standard_ll, gold_standard_ll_per_image, GoldConfig,
    GoldStandard, HistogramBaseline,
};
use crate::calibration::{build_model_density, global_rescale, optimize_calibration, Stage, StageFit};
use crate::density::{log_likelihood_bits, normalize_to_pmf, DensityGrid};
use crate::domain::{validate_dataset, Dataset, FixationTrain, ImageFrame, SaliencyMap};
use crate::error::{Error, Result};
use crate::io::{
    map_path, parse_fixations_csv, parse_frames_csv, read_map, write_fixations_csv, write_frames_csv,
    write_json, write_map, write_table, Metadata, MetricSpec, RunConfig,
};
use crate::maps::{info_gain_diff_map, info_gain_map, ratio_map, scatter_data};
use crate::metrics::{auc_for_model, kl_fixation_based, kl_image_based, ScoreMaps};
use crate::reporting::{build_report, EvaluationReport, MetricAnchor, ModelInput, ReportInputs};
use crate::synth::{sample_spatial, sample_temporal_trains};
use crate::temporal::{fit_temporal, TemporalParams};

type Json = serde_json::Value;

fn num(v: f64) -> String {
    v.to_string()
}

/// Dataset checks that report every problem instead of failing on the first.
pub fn validate(cfg: &RunConfig) -> Result<Json> {
    let frames = parse_frames_csv(&cfg.frames)?;
    let trains = parse_fixations_csv(&cfg.fixations)?;
    let mut d = Dataset::new(frames, trains);
    let mut problems: Vec<String> = Vec::new();
    for m in &cfg.models {
        for frame in d.frames.clone() {
            let path = map_path(&m.map_dir, &frame.image_id);
            match read_map(&path) {
                Ok(values) => d.insert_map(SaliencyMap {
                    image_id: frame.image_id.clone(),
                    model_id: m.id.clone(),
                    values,
                }),
                Err(e) => problems.push(format!("map ({}, {}): {e}", m.id, frame.image_id)),
            }
        }
    }
    problems.extend(validate_dataset(&d).iter().map(|v| v.to_string()));
    let summary = serde_json::json!({
        "valid": problems.is_empty(),
        "violations": problems,
        "images": d.frames.len(),
        "subjects": d.subjects().len(),
        "trains": d.trains.len(),
        "fixations": d.fixation_count(),
        "models": d.model_ids(),
    });
    write_json(&cfg.output_dir.join("validation.json"), &Metadata::for_config(cfg), &summary)?;
    Ok(summary)
}

fn gold_config(cfg: &RunConfig) -> GoldConfig {
    GoldConfig {
        sigma_grid: cfg.gold.sigma_grid.clone(),
        folds: cfg.gold.folds,
        seed: cfg.seed,
        regularization: cfg.gold.regularization,
    }
}

fn frames_with_fixations(d: &Dataset) -> Vec<&ImageFrame> {
    d.frames
        .iter()
        .filter(|f| d.trains_for(&f.image_id).next().is_some())
        .collect()
}

fn fit_histogram(cfg: &RunConfig, d: &Dataset) -> Result<HistogramBaseline> {
    fit_histogram_baseline(d, &cfg.histogram.bins, &cfg.histogram.lambdas)
}

fn held_out_baseline(d: &Dataset, hist: &HistogramBaseline) -> Result<BTreeMap<String, DensityGrid>> {
    frames_with_fixations(d)
        .into_iter()
        .map(|f| Ok((f.image_id.clone(), hist.held_out_density(f)?)))
        .collect()
}

/// Mean bits/fixation of per-image densities over all fixations.
fn dataset_ll(d: &Dataset, densities: &BTreeMap<String, DensityGrid>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (image_id, g) in densities {
        let trains: Vec<&FixationTrain> = d.trains_for(image_id).collect();
        if trains.is_empty() {
            continue;
        }
        let k: usize = trains.iter().map(|t| t.len()).sum();
        sum += log_likelihood_bits(g, &trains)? * k as f64;
        n += k;
    }
    if n == 0 {
        return Err(Error::EmptyList("fixations"));
    }
    Ok(sum / n as f64)
}

fn per_image_ll(d: &Dataset, densities: &BTreeMap<String, DensityGrid>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (image_id, g) in densities {
        let trains: Vec<&FixationTrain> = d.trains_for(image_id).collect();
        if !trains.is_empty() {
            out.insert(image_id.clone(), log_likelihood_bits(g, &trains)?);
        }
    }
    Ok(out)
}

fn write_densities(dir: &Path, densities: &BTreeMap<String, DensityGrid>) -> Result<()> {
    for (image_id, g) in densities {
        write_map(&map_path(dir, image_id), g.pmf())?;
    }
    Ok(())
}

pub fn baseline_histogram(cfg: &RunConfig) -> Result<Json> {
    let d = cfg.load_dataset()?;
    let hist = fit_histogram(cfg, &d)?;
    let held_out = held_out_baseline(&d, &hist)?;
    write_densities(&cfg.output_dir.join("densities").join("baseline"), &held_out)?;
    let summary = serde_json::json!({
        "hyperparameters": hist.hyperparameters(),
        "candidates": hist.scores,
    });
    write_json(&cfg.output_dir.join("baseline_histogram.json"), &Metadata::for_config(cfg), &summary)?;
    Ok(hist.hyperparameters())
}

fn gold_full(d: &Dataset, gold: &GoldStandard) -> Result<BTreeMap<String, DensityGrid>> {
    frames_with_fixations(d)
        .into_iter()
        .map(|f| {
            gold.full_density(&f.image_id)
                .cloned()
                .map(|g| (f.image_id.clone(), g))
                .ok_or_else(|| Error::MissingArtifact(format!("gold density for {}", f.image_id)))
        })
        .collect()
}

pub fn baseline_gold(cfg: &RunConfig) -> Result<Json> {
    let d = cfg.load_dataset()?;
    let gold = fit_gold_standard(&d, &gold_config(cfg))?;
    let ll = gold_standard_ll(&gold, &d)?;
    write_densities(&cfg.output_dir.join("densities").join("gold"), &gold_full(&d, &gold)?)?;
    let mut summary = gold.hyperparameters();
    summary["gold_ll"] = ll.into();
    summary["per_image_ll"] = serde_json::to_value(gold_standard_ll_per_image(&gold, &d)?)?;
    write_json(&cfg.output_dir.join("baseline_gold.json"), &Metadata::for_config(cfg), &summary)?;
    Ok(serde_json::json!({ "kernel_sigma": gold.kernel_sigma, "gold_ll": ll }))
}

fn model_maps(d: &Dataset, model_id: &str) -> Result<Vec<SaliencyMap>> {
    let maps: Vec<SaliencyMap> = d
        .frames
        .iter()
        .map(|f| {
            d.map(model_id, &f.image_id).cloned().ok_or_else(|| Error::MissingMap {
                model_id: model_id.to_string(),
                image_id: f.image_id.clone(),
            })
        })
        .collect::<Result<_>>()?;
    global_rescale(&maps)
}

/// Calibration fits up to `stage` and the final per-image densities.
pub struct CalibratedModel {
    pub model_id: String,
    pub fits: Vec<StageFit>,
    pub densities: BTreeMap<String, DensityGrid>,
}

pub fn calibrate_model(cfg: &RunConfig, d: &Dataset, model_id: &str, stage: Stage) -> Result<CalibratedModel> {
    let maps = model_maps(d, model_id)?;
    let fits = optimize_calibration(&maps, &d.trains, stage, &cfg.optimizer)?;
    let params = &fits.last().expect("at least one stage").params;
    let mut densities = BTreeMap::new();
    for m in &maps {
        let frame = d.frame(&m.image_id).ok_or_else(|| Error::UnknownImage(m.image_id.clone()))?;
        if d.trains_for(&m.image_id).next().is_some() {
            densities.insert(m.image_id.clone(), build_model_density(m, params, frame)?);
        }
    }
    Ok(CalibratedModel {
        model_id: model_id.to_string(),
        fits,
        densities,
    })
}

fn stage_json(fits: &[StageFit]) -> Json {
    fits.iter()
        .zip(Stage::ALL)
        .map(|(f, s)| {
            serde_json::json!({
                "stage": s,
                "log_likelihood": f.log_likelihood,
                "iterations": f.iterations,
                "params": f.params,
            })
        })
        .collect()
}

pub fn calibrate(cfg: &RunConfig, model_id: &str, stage: Stage) -> Result<Json> {
    cfg.model(model_id)?;
    let d = cfg.load_dataset()?;
    let model = calibrate_model(cfg, &d, model_id, stage)?;
    let result = serde_json::json!({ "model_id": model_id, "stages": stage_json(&model.fits) });
    write_json(
        &cfg.output_dir.join(format!("calibration_{model_id}.json")),
        &Metadata::for_config(cfg),
        &result,
    )?;
    Ok(serde_json::json!({
        "model_id": model_id,
        "stage_lls": model.fits.iter().zip(Stage::ALL).map(|(f, s)| (s.name(), f.log_likelihood)).collect::<BTreeMap<_, _>>(),
    }))
}

fn score_maps(densities: &BTreeMap<String, DensityGrid>) -> ScoreMaps {
    densities.iter().map(|(k, v)| (k.clone(), v.pmf().clone())).collect()
}

/// Mean over images of the image-based KL from gold to `densities`.
fn mean_image_kl(densities: &BTreeMap<String, DensityGrid>, gold: &BTreeMap<String, DensityGrid>) -> Result<f64> {
    let mut sum = 0.0;
    for (image_id, g) in gold {
        let m = densities
            .get(image_id)
            .ok_or_else(|| Error::MissingArtifact(format!("density for {image_id}")))?;
        sum += kl_image_based(m, g)?;
    }
    Ok(sum / gold.len().max(1) as f64)
}

/// Value of one metric for the per-image densities of one model.
pub fn metric_value(
    spec: &MetricSpec,
    d: &Dataset,
    densities: &BTreeMap<String, DensityGrid>,
    gold: &BTreeMap<String, DensityGrid>,
) -> Result<f64> {
    let frames: Vec<ImageFrame> = frames_with_fixations(d).into_iter().cloned().collect();
    match spec {
        MetricSpec::Auc { nonfixations, .. } => auc_for_model(&score_maps(densities), &frames, &d.trains, nonfixations),
        MetricSpec::KlFixation { kl, nonfixations, .. } => {
            kl_fixation_based(&score_maps(densities), &frames, &d.trains, kl, nonfixations)
        }
        MetricSpec::KlImage { .. } => mean_image_kl(densities, gold),
    }
}

/// Everything the eval and metrics commands share.
pub struct Evaluation {
    pub report: EvaluationReport,
    pub models: Vec<CalibratedModel>,
    pub baseline: BTreeMap<String, DensityGrid>,
    pub gold: BTreeMap<String, DensityGrid>,
}

pub fn evaluate(cfg: &RunConfig, d: &Dataset) -> Result<Evaluation> {
    let hist = fit_histogram(cfg, d)?;
    let baseline = held_out_baseline(d, &hist)?;
    let gold_model = fit_gold_standard(d, &gold_config(cfg))?;
    let gold = gold_full(d, &gold_model)?;
    let models: Vec<CalibratedModel> = cfg
        .models
        .par_iter()
        .map(|m| calibrate_model(cfg, d, &m.id, cfg.stage))
        .collect::<Result<_>>()?;

    let mut metric_anchors = BTreeMap::new();
    for spec in &cfg.metrics {
        metric_anchors.insert(
            spec.id().to_string(),
            MetricAnchor {
                baseline: metric_value(spec, d, &baseline, &gold)?,
                gold: metric_value(spec, d, &gold, &gold)?,
            },
        );
    }
    let mut inputs = ReportInputs {
        baseline_ll: Some(dataset_ll(d, &baseline)?),
        gold_ll: Some(gold_standard_ll(&gold_model, d)?),
        metric_anchors,
        models: Vec::new(),
    };
    for m in &models {
        let mut metrics = BTreeMap::new();
        for spec in &cfg.metrics {
            metrics.insert(spec.id().to_string(), metric_value(spec, d, &m.densities, &gold)?);
        }
        inputs.models.push(ModelInput {
            model_id: m.model_id.clone(),
            stage_lls: m.fits.iter().zip(Stage::ALL).map(|(f, s)| (s, f.log_likelihood)).collect(),
            metrics,
        });
    }
    Ok(Evaluation {
        report: build_report(&inputs)?,
        models,
        baseline,
        gold,
    })
}

fn write_report(dir: &Path, meta: &Metadata, report: &EvaluationReport) -> Result<()> {
    let header = report.csv_header();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let text = crate::io::csv_text(&header, &report.csv_rows(), Some(meta))?;
    crate::io::write_file(&dir.join("report.csv"), text.as_bytes())?;
    write_json(&dir.join("report.json"), meta, report)
}

pub fn eval(cfg: &RunConfig) -> Result<Json> {
    let d = cfg.load_dataset()?;
    let e = evaluate(cfg, &d)?;
    write_report(&cfg.output_dir, &Metadata::for_config(cfg), &e.report)?;
    Ok(serde_json::json!({
        "anchors": e.report.anchors,
        "models": e.report.models.iter().map(|m| serde_json::json!({
            "model_id": m.model_id,
            "final_ll": m.final_ll,
            "percent_explained": m.percent_explained,
        })).collect::<Vec<_>>(),
    }))
}

pub const METRICS_HEADER: [&str; 4] = ["model_id", "metric_id", "raw", "rescaled"];

pub fn metrics(cfg: &RunConfig) -> Result<Json> {
    let d = cfg.load_dataset()?;
    let e = evaluate(cfg, &d)?;
    let dens = cfg.output_dir.join("densities");
    write_densities(&dens.join("baseline"), &e.baseline)?;
    write_densities(&dens.join("gold"), &e.gold)?;
    for m in &e.models {
        write_densities(&dens.join("models").join(&m.model_id), &m.densities)?;
    }
    let mut rows = Vec::new();
    for (id, a) in &e.report.metric_anchors {
        rows.push(vec!["baseline".into(), id.clone(), num(a.baseline), "0".into()]);
        rows.push(vec!["gold".into(), id.clone(), num(a.gold), "1".into()]);
    }
    for m in &e.report.models {
        for v in &m.metrics {
            rows.push(vec![
                m.model_id.clone(),
                v.metric_id.clone(),
                num(v.raw),
                v.rescaled.map_or_else(String::new, num),
            ]);
        }
    }
    let meta = Metadata::for_config(cfg)
        .with_note("metric_scores", "calibrated per-image densities")
        .with_note("gold_scores", "full-data regularized kernel density");
    write_table(&cfg.output_dir, "metrics", &METRICS_HEADER, &rows, &meta)?;
    write_json(
        &cfg.output_dir.join("correlations.json"),
        &meta,
        &serde_json::json!({ "correlations": e.report.correlations }),
    )?;
    Ok(serde_json::json!({
        "anchors": e.report.metric_anchors,
        "correlations": e.report.correlations,
    }))
}

pub const SCATTER_HEADER: [&str; 4] = ["image_id", "possible_gain_bits", "explained_percent", "flags"];

pub fn maps(cfg: &RunConfig, model_id: &str, images: &[String]) -> Result<Json> {
    cfg.model(model_id)?;
    let d = cfg.load_dataset()?;
    for id in images {
        if d.frame(id).is_none() {
            return Err(Error::UnknownImage(id.clone()));
        }
    }
    let hist = fit_histogram(cfg, &d)?;
    let baseline = held_out_baseline(&d, &hist)?;
    let gold_model = fit_gold_standard(&d, &gold_config(cfg))?;
    let gold = gold_full(&d, &gold_model)?;
    let model = calibrate_model(cfg, &d, model_id, cfg.stage)?;

    let dir = cfg.output_dir.join("maps").join(model_id);
    let mut totals = BTreeMap::new();
    for (image_id, g) in &gold {
        if !images.is_empty() && !images.contains(image_id) {
            continue;
        }
        let frame = d.frame(image_id).expect("validated");
        let prior = hist.density(frame)?;
        let m = &model.densities[image_id];
        let ratio = ratio_map(m, &prior)?;
        let gain = info_gain_map(g, m, &prior)?;
        let diff = info_gain_diff_map(g, m, &prior)?;
        write_map(&dir.join(format!("{image_id}.ratio.smap")), &ratio)?;
        write_map(&dir.join(format!("{image_id}.info_gain.smap")), &gain.grid)?;
        write_map(&dir.join(format!("{image_id}.info_gain_diff.smap")), &diff.grid)?;
        totals.insert(
            image_id.clone(),
            serde_json::json!({ "info_gain_bits": gain.total(), "info_gain_diff_bits": diff.total() }),
        );
    }

    let points = scatter_data(
        &gold_standard_ll_per_image(&gold_model, &d)?,
        &per_image_ll(&d, &baseline)?,
        &per_image_ll(&d, &model.densities)?,
    );
    let rows: Vec<Vec<String>> = points
        .iter()
        .filter(|p| images.is_empty() || images.contains(&p.image_id))
        .map(|p| {
            vec![
                p.image_id.clone(),
                num(p.possible_gain_bits),
                p.explained_percent.map_or_else(String::new, num),
                p.flags.join(";"),
            ]
        })
        .collect();
    let meta = Metadata::for_config(cfg)
        .with_note("map_sums", "gold-weighted per-pixel contributions, bits/fixation")
        .with_note("scatter_lls", "sample mean over each image's fixations")
        .with_note("prior", "image-independent histogram baseline fitted on all images");
    write_json(&dir.join("manifest.json"), &meta, &totals)?;
    write_table(&cfg.output_dir, &format!("scatter_{model_id}"), &SCATTER_HEADER, &rows, &meta)?;
    Ok(serde_json::json!({ "model_id": model_id, "images": totals.len(), "scatter_points": rows.len() }))
}

pub fn temporal(cfg: &RunConfig, model_id: &str) -> Result<Json> {
    cfg.model(model_id)?;
    let d = cfg.load_dataset()?;
    let model = calibrate_model(cfg, &d, model_id, cfg.stage)?;
    let fit = fit_temporal(&model.densities, &d.trains, &cfg.optimizer, None)?;
    let result = serde_json::json!({
        "model_id": model_id,
        "params": fit.params,
        "log_likelihood": fit.log_likelihood,
        "spatial_log_likelihood": fit.spatial_log_likelihood,
        "delta_ll": fit.gain(),
        "iterations": fit.iterations,
    });
    write_json(
        &cfg.output_dir.join(format!("temporal_{model_id}.json")),
        &Metadata::for_config(cfg),
        &result,
    )?;
    Ok(result)
}

/// Parameters of the synthetic data generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub subjects: usize,
    pub fixations_per_subject: usize,
    /// Directory of `<image_id>.smap` weight maps; uniform when absent.
    #[serde(default)]
    pub pmf_dir: Option<PathBuf>,
    #[serde(default)]
    pub temporal: Option<TemporalParams>,
}

fn one() -> usize {
    1
}

pub fn synth_image_id(i: usize) -> String {
    format!("img{i:03}")
}

impl SynthParams {
    pub fn load(path: &Path) -> Result<SynthParams> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut p: SynthParams =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if p.output_dir.is_relative() {
            p.output_dir = base.join(&p.output_dir);
        }
        if let Some(dir) = &mut p.pmf_dir {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(p)
    }

    fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.pmf_dir = self.pmf_dir.as_ref().and_then(|p| p.file_name()).map(PathBuf::from);
        hex::encode(Sha256::digest(serde_json::to_string(&canonical).expect("serializable").as_bytes()))
    }
}

/// Writes `frames.csv`, `fixations.csv` and `synth.json` to the output
/// directory. Without temporal parameters fixations are i.i.d.
pub fn synth(params: &SynthParams, temporal: bool) -> Result<Json> {
    if params.images == 0 || params.width * params.height < 4 {
        return Err(Error::InvalidParameter("need at least one image of at least 4 pixels".into()));
    }
    let tp = match (temporal, params.temporal) {
        (true, Some(p)) => {
            p.validate()?;
            Some(p)
        }
        (true, None) => return Err(Error::InvalidParameter("synth temporal needs `temporal` parameters".into())),
        (false, _) => None,
    };
    let frames: Vec<ImageFrame> = (0..params.images)
        .map(|i| ImageFrame::new(synth_image_id(i), params.width, params.height))
        .collect();
    let trains: Vec<Vec<FixationTrain>> = frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let pmf = match &params.pmf_dir {
                None => DensityGrid::uniform(frame),
                Some(dir) => normalize_to_pmf(frame.image_id.clone(), &read_map(&map_path(dir, &frame.image_id))?)?,
            };
            let seed = params.seed.wrapping_add(i as u64);
            match tp {
                None => sample_spatial(frame, &pmf, params.subjects, params.fixations_per_subject, seed),
                Some(p) => sample_temporal_trains(frame, &pmf, &p, params.subjects, params.fixations_per_subject, seed),
            }
        })
        .collect::<Result<_>>()?;
    let trains: Vec<FixationTrain> = trains.into_iter().flatten().collect();
    let meta = Metadata::new(params.hash(), params.seed).with_note("image_seed", "seed + image index");
    write_frames_csv(&params.output_dir.join("frames.csv"), &frames, Some(&meta))?;
    write_fixations_csv(&params.output_dir.join("fixations.csv"), &trains, Some(&meta))?;
    let summary = serde_json::json!({
        "images": frames.len(),
        "trains": trains.len(),
        "fixations": trains.iter().map(|t| t.len()).sum::<usize>(),
    });
    write_json(&params.output_dir.join("synth.json"), &meta, &summary)?;
    Ok(summary)
}
