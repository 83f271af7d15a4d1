//! Reference models: the cross-image histogram lower bound and the
//! leave-one-subject-out kernel density gold standard.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{
    fixation_histogram, kde_from_histogram, normalize_to_pmf, sum_log2_at_fixations, DensityGrid,
    KdeSpec,
};
use crate::domain::{Dataset, FixationTrain, ImageFrame};
use crate::error::{Error, Result};
use crate::grid::Grid;

pub const DEFAULT_BINS: [usize; 4] = [4, 8, 16, 32];
pub const DEFAULT_LAMBDAS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// 21 log-spaced kernel widths from 1 to 128 pixels.
pub fn default_sigma_grid() -> Vec<f64> {
    (0..21).map(|i| 2f64.powf(7.0 * i as f64 / 20.0)).collect()
}

#[inline]
fn bin_of(pixel: usize, pixels: usize, bins: usize) -> usize {
    pixel * bins / pixels
}

/// Held-out score of one histogram candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub bins: usize,
    pub lambda: f64,
    /// Mean held-out bits/fixation; `-inf` when some held-out fixation
    /// falls on zero density.
    pub held_out_ll: f64,
}

/// Image-independent spatial prior: a 2-D histogram of fixations over
/// proportional bins, mixed with the uniform density.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBaseline {
    pub bins_x: usize,
    pub bins_y: usize,
    pub lambda: f64,
    /// Bin counts per image, row-major `bins_y × bins_x`.
    counts: BTreeMap<String, Vec<f64>>,
    total: Vec<f64>,
    pub scores: Vec<CandidateScore>,
}

fn bin_counts(frame: &ImageFrame, trains: &[&FixationTrain], bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins * bins];
    for t in trains {
        for f in &t.fixations {
            let (px, py) = frame.snap(f.x, f.y);
            let bx = bin_of(px, frame.width, bins);
            let by = bin_of(py, frame.height, bins);
            counts[by * bins + bx] += 1.0;
        }
    }
    counts
}

/// Spreads bin masses over the pixels of `frame` and mixes with uniform.
fn histogram_density(
    frame: &ImageFrame,
    counts: &[f64],
    bins_x: usize,
    bins_y: usize,
    lambda: f64,
) -> Result<DensityGrid> {
    let total: f64 = counts.iter().sum();
    let n = frame.pixel_count() as f64;
    if total <= 0.0 {
        return Ok(DensityGrid::uniform(frame));
    }
    let mut pixels_per_bin = vec![0usize; bins_x * bins_y];
    for y in 0..frame.height {
        for x in 0..frame.width {
            pixels_per_bin[bin_of(y, frame.height, bins_y) * bins_x + bin_of(x, frame.width, bins_x)] += 1;
        }
    }
    let grid = Grid::from_fn(frame.width, frame.height, |x, y| {
        let b = bin_of(y, frame.height, bins_y) * bins_x + bin_of(x, frame.width, bins_x);
        (1.0 - lambda) * counts[b] / total / pixels_per_bin[b] as f64 + lambda / n
    });
    // bins without pixels (more bins than pixels) lose their mass
    normalize_to_pmf(frame.image_id.clone(), &grid)
}

impl HistogramBaseline {
    /// Prior fitted on all images.
    pub fn density(&self, frame: &ImageFrame) -> Result<DensityGrid> {
        histogram_density(frame, &self.total, self.bins_x, self.bins_y, self.lambda)
    }

    /// Prior for `frame` fitted on every image except this one.
    pub fn held_out_density(&self, frame: &ImageFrame) -> Result<DensityGrid> {
        let counts = match self.counts.get(&frame.image_id) {
            Some(own) => self.total.iter().zip(own).map(|(t, o)| t - o).collect(),
            None => self.total.clone(),
        };
        histogram_density(frame, &counts, self.bins_x, self.bins_y, self.lambda)
    }

    /// Cross-validated bits/fixation of the selected candidate.
    pub fn held_out_ll(&self) -> f64 {
        self.scores
            .iter()
            .find(|s| s.bins == self.bins_x && s.lambda == self.lambda)
            .map_or(f64::NEG_INFINITY, |s| s.held_out_ll)
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::json!({
            "bins_x": self.bins_x,
            "bins_y": self.bins_y,
            "lambda": self.lambda,
            "held_out_ll": self.held_out_ll(),
        })
    }
}

fn trains_by_image(d: &Dataset) -> BTreeMap<&str, Vec<&FixationTrain>> {
    let mut out: BTreeMap<&str, Vec<&FixationTrain>> = BTreeMap::new();
    for t in &d.trains {
        out.entry(t.image_id.as_str()).or_default().push(t);
    }
    out
}

fn frame_of<'a>(d: &'a Dataset, image_id: &str) -> Result<&'a ImageFrame> {
    d.frame(image_id)
        .ok_or_else(|| Error::UnknownImage(image_id.to_string()))
}

/// Grid search over bin counts and mixing weights by leave-one-image-out
/// likelihood. Ties go to the earliest candidate (bins outer, lambda inner).
pub fn fit_histogram_baseline(
    d: &Dataset,
    bin_grid: &[usize],
    lambda_grid: &[f64],
) -> Result<HistogramBaseline> {
    if bin_grid.is_empty() {
        return Err(Error::EmptyGrids("bins"));
    }
    if lambda_grid.is_empty() {
        return Err(Error::EmptyGrids("lambda"));
    }
    if let Some(b) = bin_grid.iter().find(|&&b| b == 0) {
        return Err(Error::InvalidParameter(format!("bin count {b}")));
    }
    if let Some(l) = lambda_grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidParameter(format!("lambda {l} outside [0, 1]")));
    }
    let by_image = trains_by_image(d);
    if by_image.len() < 2 {
        return Err(Error::SingleImage);
    }

    let mut scores = Vec::new();
    let mut per_bins = BTreeMap::new();
    for &bins in bin_grid {
        let mut counts = BTreeMap::new();
        for (image_id, trains) in &by_image {
            let frame = frame_of(d, image_id)?;
            counts.insert(image_id.to_string(), bin_counts(frame, trains, bins));
        }
        let mut total = vec![0.0; bins * bins];
        for c in counts.values() {
            for (t, v) in total.iter_mut().zip(c) {
                *t += v;
            }
        }
        let candidate_scores: Vec<Result<CandidateScore>> = lambda_grid
            .par_iter()
            .map(|&lambda| {
                let mut sum = 0.0;
                let mut n = 0;
                for (image_id, trains) in &by_image {
                    let frame = frame_of(d, image_id)?;
                    let own = &counts[*image_id];
                    let rest: Vec<f64> = total.iter().zip(own).map(|(t, o)| t - o).collect();
                    let model = histogram_density(frame, &rest, bins, bins, lambda)?;
                    match sum_log2_at_fixations(&model, trains) {
                        Ok((s, k)) => {
                            sum += s;
                            n += k;
                        }
                        Err(Error::ZeroDensityAtFixation { .. }) => {
                            return Ok(CandidateScore {
                                bins,
                                lambda,
                                held_out_ll: f64::NEG_INFINITY,
                            })
                        }
                        Err(e) => return Err(e),
                    }
                }
                Ok(CandidateScore {
                    bins,
                    lambda,
                    held_out_ll: sum / n.max(1) as f64,
                })
            })
            .collect();
        for s in candidate_scores {
            scores.push(s?);
        }
        per_bins.insert(bins, (counts, total));
    }

    let best = scores
        .iter()
        .fold(None::<&CandidateScore>, |best, s| match best {
            Some(b) if b.held_out_ll >= s.held_out_ll => Some(b),
            _ => Some(s),
        })
        .expect("non-empty grids")
        .clone();
    if best.held_out_ll == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(
            "every histogram candidate assigns zero density to a held-out fixation".into(),
        ));
    }
    let (counts, total) = per_bins.remove(&best.bins).expect("scored");
    Ok(HistogramBaseline {
        bins_x: best.bins,
        bins_y: best.bins,
        lambda: best.lambda,
        counts,
        total,
        scores,
    })
}

/// Cross-validation settings for the gold standard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldConfig {
    pub sigma_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
    /// Weight of the uniform density mixed into every kernel estimate.
    pub regularization: f64,
}

impl Default for GoldConfig {
    fn default() -> Self {
        GoldConfig {
            sigma_grid: default_sigma_grid(),
            folds: 10,
            seed: 0,
            regularization: 1e-6,
        }
    }
}

/// Leave-one-subject-out kernel density estimates with a cross-validated
/// kernel width.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldStandard {
    pub kernel_sigma: f64,
    pub regularization: f64,
    /// `(sigma, held-out bits/fixation)` for every candidate, in grid order.
    pub cv_scores: Vec<(f64, f64)>,
    loso: BTreeMap<(String, String), DensityGrid>,
    full: BTreeMap<String, DensityGrid>,
}

impl GoldStandard {
    /// Estimate for `image_id` built without `subject_id`'s fixations.
    pub fn loso_density(&self, image_id: &str, subject_id: &str) -> Option<&DensityGrid> {
        self.loso.get(&(image_id.to_string(), subject_id.to_string()))
    }

    /// Estimate for `image_id` from all subjects.
    pub fn full_density(&self, image_id: &str) -> Option<&DensityGrid> {
        self.full.get(image_id)
    }

    pub fn hyperparameters(&self) -> serde_json::Value {
        serde_json::json!({
            "kernel_sigma": self.kernel_sigma,
            "regularization": self.regularization,
            "cv_scores": self.cv_scores.iter().map(|(s, ll)| serde_json::json!({"sigma": s, "held_out_ll": ll})).collect::<Vec<_>>(),
        })
    }
}

/// Subjects sorted, shuffled with `seed`, then dealt round-robin into folds.
pub fn fold_assignment(subjects: &[String], folds: usize, seed: u64) -> BTreeMap<String, usize> {
    let mut sorted: Vec<String> = subjects.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % folds))
        .collect()
}

fn regularized_kde(frame: &ImageFrame, hist: &Grid, sigma: f64, reg: f64) -> Result<DensityGrid> {
    if hist.sum() <= 0.0 {
        return Ok(DensityGrid::uniform(frame));
    }
    let kde = kde_from_histogram(frame, hist, KdeSpec::new(sigma)?)?;
    if reg == 0.0 {
        return Ok(kde);
    }
    let u = 1.0 / frame.pixel_count() as f64;
    let mixed = kde.pmf().map(|v| (1.0 - reg) * v + reg * u);
    normalize_to_pmf(frame.image_id.clone(), &mixed)
}

pub fn fit_gold_standard(d: &Dataset, config: &GoldConfig) -> Result<GoldStandard> {
    let subjects = d.subjects();
    if subjects.len() < 2 {
        return Err(Error::TooFewSubjects(subjects.len()));
    }
    if config.sigma_grid.is_empty() {
        return Err(Error::EmptyGrids("sigma"));
    }
    if config.folds < 2 || config.folds > subjects.len() {
        return Err(Error::InvalidFolds {
            folds: config.folds,
            subjects: subjects.len(),
        });
    }
    if !(0.0..1.0).contains(&config.regularization) {
        return Err(Error::InvalidParameter("regularization must be in [0, 1)".into()));
    }
    for &s in &config.sigma_grid {
        KdeSpec::new(s)?;
    }
    let folds = fold_assignment(&subjects, config.folds, config.seed);
    let by_image = trains_by_image(d);

    // per (image, fold): histogram of the fold's fixations
    let mut fold_hists: Vec<(&ImageFrame, Vec<Grid>, Vec<Vec<&FixationTrain>>)> = Vec::new();
    for (image_id, trains) in &by_image {
        let frame = frame_of(d, image_id)?;
        let mut hists = vec![Grid::zeros(frame.width, frame.height); config.folds];
        let mut members: Vec<Vec<&FixationTrain>> = vec![Vec::new(); config.folds];
        for t in trains {
            let k = folds[&t.subject_id];
            let h = fixation_histogram(frame, &t.fixations);
            for (a, b) in hists[k].as_mut_slice().iter_mut().zip(h.as_slice()) {
                *a += b;
            }
            members[k].push(t);
        }
        fold_hists.push((frame, hists, members));
    }

    let cv_scores: Vec<(f64, f64)> = config
        .sigma_grid
        .par_iter()
        .map(|&sigma| -> Result<(f64, f64)> {
            let mut sum = 0.0;
            let mut n = 0;
            for (frame, hists, members) in &fold_hists {
                let all = sum_grids(hists);
                for k in 0..config.folds {
                    if members[k].is_empty() {
                        continue;
                    }
                    let rest = subtract(&all, &hists[k]);
                    let model = regularized_kde(frame, &rest, sigma, config.regularization)?;
                    match sum_log2_at_fixations(&model, &members[k]) {
                        Ok((s, c)) => {
                            sum += s;
                            n += c;
                        }
                        Err(Error::ZeroDensityAtFixation { .. }) => return Ok((sigma, f64::NEG_INFINITY)),
                        Err(e) => return Err(e),
                    }
                }
            }
            Ok((sigma, sum / n.max(1) as f64))
        })
        .collect::<Result<_>>()?;

    let (kernel_sigma, best) = cv_scores
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |acc, (s, ll)| if ll > acc.1 || acc.0.is_nan() { (s, ll) } else { acc });
    if best == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(
            "every kernel width assigns zero density to a held-out fixation; increase regularization".into(),
        ));
    }

    let mut loso = BTreeMap::new();
    let mut full = BTreeMap::new();
    for (image_id, trains) in &by_image {
        let frame = frame_of(d, image_id)?;
        let per_subject: Vec<(&str, Grid)> = trains
            .iter()
            .map(|t| (t.subject_id.as_str(), fixation_histogram(frame, &t.fixations)))
            .collect();
        let all = sum_grids(per_subject.iter().map(|(_, h)| h));
        full.insert(
            image_id.to_string(),
            regularized_kde(frame, &all, kernel_sigma, config.regularization)?,
        );
        let grids: Vec<((String, String), DensityGrid)> = per_subject
            .par_iter()
            .map(|(subject, h)| {
                let rest = subtract(&all, h);
                regularized_kde(frame, &rest, kernel_sigma, config.regularization)
                    .map(|g| ((image_id.to_string(), subject.to_string()), g))
            })
            .collect::<Result<_>>()?;
        loso.extend(grids);
    }

    Ok(GoldStandard {
        kernel_sigma,
        regularization: config.regularization,
        cv_scores,
        loso,
        full,
    })
}

fn sum_grids<'a>(grids: impl IntoIterator<Item = &'a Grid>) -> Grid {
    let mut iter = grids.into_iter();
    let mut acc = iter.next().expect("at least one grid").clone();
    for g in iter {
        for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *a += b;
        }
    }
    acc
}

fn subtract(a: &Grid, b: &Grid) -> Grid {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y).max(0.0))
        .collect();
    Grid::from_vec(a.width(), a.height(), data).expect("same shape")
}

/// Per-subject log-likelihoods (summed bits including the uniform offset,
/// fixation count) under the leave-one-subject-out estimates.
fn per_subject_sums(g: &GoldStandard, d: &Dataset) -> Result<BTreeMap<String, (f64, usize)>> {
    let mut out: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for t in &d.trains {
        let grid = g
            .loso_density(&t.image_id, &t.subject_id)
            .ok_or_else(|| Error::MissingGrid {
                image_id: t.image_id.clone(),
                subject_id: t.subject_id.clone(),
            })?;
        let (s, n) = sum_log2_at_fixations(grid, &[t])?;
        let e = out.entry(t.subject_id.clone()).or_default();
        e.0 += s;
        e.1 += n;
    }
    Ok(out)
}

/// Subject-balanced leave-one-subject-out estimate in bits/fixation: the
/// mean over subjects of each subject's mean log-likelihood.
pub fn gold_standard_ll(g: &GoldStandard, d: &Dataset) -> Result<f64> {
    let sums = per_subject_sums(g, d)?;
    let means: Vec<f64> = sums
        .values()
        .filter(|(_, n)| *n > 0)
        .map(|(s, n)| s / *n as f64)
        .collect();
    if means.is_empty() {
        return Err(Error::EmptyList("fixations"));
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Sample-mean leave-one-subject-out bits/fixation for each image.
pub fn gold_standard_ll_per_image(g: &GoldStandard, d: &Dataset) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (image_id, trains) in trains_by_image(d) {
        let mut sum = 0.0;
        let mut n = 0;
        for t in trains {
            let grid = g
                .loso_density(image_id, &t.subject_id)
                .ok_or_else(|| Error::MissingGrid {
                    image_id: image_id.to_string(),
                    subject_id: t.subject_id.clone(),
                })?;
            let (s, k) = sum_log2_at_fixations(grid, &[t])?;
            sum += s;
            n += k;
        }
        if n > 0 {
            out.insert(image_id.to_string(), sum / n as f64);
        }
    }
    Ok(out)
}
