//! Classical saliency metrics (AUC, KL divergences) and the rescaling and
//! correlation helpers used to compare them with information gain.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{ellr, log_likelihood_bits, DensityGrid};
use crate::domain::{Fixation, FixationTrain, ImageFrame};
use crate::error::{Error, Result};
use crate::grid::Grid;

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v
}

/// Integer comparison counts `(greater, equal)` over all pairs.
fn pair_counts(pos: &[f64], neg: &[f64]) -> (u64, u64) {
    let neg = sorted(neg);
    let mut greater = 0u64;
    let mut equal = 0u64;
    for &p in pos {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        greater += below as u64;
        equal += (not_above - below) as u64;
    }
    (greater, equal)
}

/// Area under the ROC curve: the probability that a random fixation
/// outscores a random nonfixation, ties counting one half.
pub fn auc(fixation_scores: &[f64], nonfixation_scores: &[f64]) -> Result<f64> {
    if fixation_scores.is_empty() {
        return Err(Error::EmptyList("fixation scores"));
    }
    if nonfixation_scores.is_empty() {
        return Err(Error::EmptyList("nonfixation scores"));
    }
    check_finite(fixation_scores)?;
    check_finite(nonfixation_scores)?;
    let (g, e) = pair_counts(fixation_scores, nonfixation_scores);
    let pairs = fixation_scores.len() as f64 * nonfixation_scores.len() as f64;
    Ok((2 * g + e) as f64 / (2.0 * pairs))
}

/// AUC with positive and negative mass attached to each score, i.e. the
/// population AUC when fixations follow `pos_weights` and nonfixations
/// follow `neg_weights`.
pub fn weighted_auc(scores: &[f64], pos_weights: &[f64], neg_weights: &[f64]) -> Result<f64> {
    if scores.len() != pos_weights.len() || scores.len() != neg_weights.len() {
        return Err(Error::InvalidParameter("weight vectors must match scores".into()));
    }
    check_finite(scores)?;
    let pos_total: f64 = pos_weights.iter().sum();
    let neg_total: f64 = neg_weights.iter().sum();
    if pos_total <= 0.0 || neg_total <= 0.0 {
        return Err(Error::EmptyList("weights"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite"));
    let mut below = 0.0;
    let mut acc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let level = scores[order[i]];
        let mut j = i;
        let (mut pos, mut neg) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == level {
            pos += pos_weights[order[j]];
            neg += neg_weights[order[j]];
            j += 1;
        }
        acc += pos * (below + 0.5 * neg);
        below += neg;
        i = j;
    }
    Ok(acc / (pos_total * neg_total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NonfixationKind {
    /// Every pixel of the image, or a uniform sample of them.
    UniformPixels,
    /// Fixations recorded on the other images, mapped by relative position.
    ShuffledFixations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonfixationSpec {
    pub kind: NonfixationKind,
    /// Per-image sample size; `None` uses every candidate.
    #[serde(default)]
    pub sample: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NonfixationSpec {
    fn default() -> Self {
        NonfixationSpec {
            kind: NonfixationKind::UniformPixels,
            sample: None,
            seed: 0,
        }
    }
}

/// Per-image score grids keyed by image id.
pub type ScoreMaps = BTreeMap<String, Grid>;

fn frame_map(frames: &[ImageFrame]) -> BTreeMap<&str, &ImageFrame> {
    frames.iter().map(|f| (f.image_id.as_str(), f)).collect()
}

fn group_trains(trains: &[FixationTrain]) -> BTreeMap<&str, Vec<&Fixation>> {
    let mut out: BTreeMap<&str, Vec<&Fixation>> = BTreeMap::new();
    for t in trains {
        out.entry(t.image_id.as_str()).or_default().extend(t.fixations.iter());
    }
    out
}

fn score_grid<'a>(scores: &'a ScoreMaps, frame: &ImageFrame) -> Result<&'a Grid> {
    let g = scores
        .get(&frame.image_id)
        .ok_or_else(|| Error::UnknownImage(frame.image_id.clone()))?;
    if g.width() != frame.width || g.height() != frame.height {
        return Err(Error::ShapeMismatch(frame.width, frame.height, g.width(), g.height()));
    }
    if g.first_non_finite().is_some() {
        return Err(Error::NonFinite);
    }
    Ok(g)
}

/// Scores of every fixation and its nonfixation set, one entry per image
/// with fixations, in image-id order.
fn collect_scores(
    scores: &ScoreMaps,
    frames: &[ImageFrame],
    trains: &[FixationTrain],
    spec: &NonfixationSpec,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let frames_by_id = frame_map(frames);
    let by_image = group_trains(trains);
    let mut out = Vec::with_capacity(by_image.len());
    for (index, (image_id, fixations)) in by_image.iter().enumerate() {
        let frame = frames_by_id
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let grid = score_grid(scores, frame)?;
        let pos: Vec<f64> = fixations
            .iter()
            .map(|f| {
                let (x, y) = frame.snap(f.x, f.y);
                grid.get(x, y)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let neg: Vec<f64> = match spec.kind {
            NonfixationKind::UniformPixels => match spec.sample {
                None => grid.as_slice().to_vec(),
                Some(n) => (0..n)
                    .map(|_| grid.as_slice()[rng.random_range(0..grid.len())])
                    .collect(),
            },
            NonfixationKind::ShuffledFixations => {
                let mut pool = Vec::new();
                for (other_id, other_fix) in &by_image {
                    if other_id == image_id {
                        continue;
                    }
                    let other = frames_by_id
                        .get(other_id)
                        .ok_or_else(|| Error::UnknownImage(other_id.to_string()))?;
                    let sx = frame.width as f64 / other.width as f64;
                    let sy = frame.height as f64 / other.height as f64;
                    for f in other_fix {
                        let (x, y) = frame.snap(f.x * sx, f.y * sy);
                        pool.push(grid.get(x, y));
                    }
                }
                match spec.sample {
                    Some(n) if !pool.is_empty() => {
                        (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
                    }
                    _ => pool,
                }
            }
        };
        out.push((pos, neg));
    }
    Ok(out)
}

/// AUC averaged over images, each image weighted by its fixation count.
pub fn auc_for_model(
    scores: &ScoreMaps,
    frames: &[ImageFrame],
    trains: &[FixationTrain],
    spec: &NonfixationSpec,
) -> Result<f64> {
    let per_image = collect_scores(scores, frames, trains, spec)?;
    let mut weighted = 0.0;
    let mut n = 0usize;
    for (pos, neg) in &per_image {
        weighted += auc(pos, neg)? * pos.len() as f64;
        n += pos.len();
    }
    if n == 0 {
        return Err(Error::EmptyList("fixations"));
    }
    Ok(weighted / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlSpec {
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for KlSpec {
    fn default() -> Self {
        KlSpec {
            bins: 10,
            epsilon: 1e-9,
        }
    }
}

/// KL divergence in bits between the histograms of fixation and nonfixation
/// scores, binned with equal widths over their joint range.
pub fn kl_histograms(fixation_scores: &[f64], nonfixation_scores: &[f64], spec: &KlSpec) -> Result<f64> {
    if fixation_scores.is_empty() {
        return Err(Error::EmptyList("fixation scores"));
    }
    if nonfixation_scores.is_empty() {
        return Err(Error::EmptyList("nonfixation scores"));
    }
    if spec.bins == 0 || !(spec.epsilon > 0.0) {
        return Err(Error::InvalidParameter("KL needs bins >= 1 and epsilon > 0".into()));
    }
    check_finite(fixation_scores)?;
    check_finite(nonfixation_scores)?;
    let all = fixation_scores.iter().chain(nonfixation_scores);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let bin = |v: f64| -> usize {
        if hi > lo {
            (((v - lo) / (hi - lo) * spec.bins as f64) as usize).min(spec.bins - 1)
        } else {
            0
        }
    };
    let hist = |values: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; spec.bins];
        for &v in values {
            h[bin(v)] += 1.0;
        }
        let n = values.len() as f64;
        h.iter_mut().for_each(|c| *c = *c / n + spec.epsilon);
        let z = sorted_sum(h.clone());
        h.iter_mut().for_each(|c| *c /= z);
        h
    };
    let p = hist(fixation_scores);
    let q = hist(nonfixation_scores);
    Ok(sorted_sum(p.iter().zip(&q).map(|(p, q)| p * (p / q).log2()).collect()))
}

/// Summation in sorted order, so a relabelling of the bins gives the same
/// value to the last bit.
fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    terms.iter().sum()
}

/// Fixation-based KL pooled over all images.
pub fn kl_fixation_based(
    scores: &ScoreMaps,
    frames: &[ImageFrame],
    trains: &[FixationTrain],
    kl: &KlSpec,
    nonfixations: &NonfixationSpec,
) -> Result<f64> {
    let per_image = collect_scores(scores, frames, trains, nonfixations)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, n) in per_image {
        pos.extend(p);
        neg.extend(n);
    }
    kl_histograms(&pos, &neg, kl)
}

/// KL divergence in bits from `reference` to `model`, both per-pixel
/// distributions on the same image.
pub fn kl_image_based(model: &DensityGrid, reference: &DensityGrid) -> Result<f64> {
    model.pmf().check_shape(reference.pmf())?;
    let mut kl = 0.0;
    for (i, (&p, &q)) in reference
        .pmf()
        .as_slice()
        .iter()
        .zip(model.pmf().as_slice())
        .enumerate()
    {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            let w = model.width();
            return Err(Error::SupportViolation { x: i % w, y: i / w });
        }
        kl += p * (p / q).log2();
    }
    Ok(kl)
}

/// Expected log-likelihood ratio between `q1` and `q2` under `p`, in bits:
/// `(KL(p||q2) - KL(p||q1), E_p[log2 q1 - log2 q2])`.
pub fn ellr_identity_check(p: &DensityGrid, q1: &DensityGrid, q2: &DensityGrid) -> Result<(f64, f64)> {
    let kl_diff = kl_image_based(q2, p)? - kl_image_based(q1, p)?;
    let mut direct = 0.0;
    for ((&pv, &a), &b) in p
        .pmf()
        .as_slice()
        .iter()
        .zip(q1.pmf().as_slice())
        .zip(q2.pmf().as_slice())
    {
        if pv > 0.0 {
            direct += pv * (a.log2() - b.log2());
        }
    }
    Ok((kl_diff, direct))
}

/// Fixation-sampled ELLR, in bits/fixation.
pub fn sampled_ellr(q1: &DensityGrid, q2: &DensityGrid, trains: &[&FixationTrain]) -> Result<f64> {
    ellr(q1, q2, trains)
}

/// Average log-likelihood of `model` in bits/fixation relative to uniform.
pub fn information_gain(model: &DensityGrid, trains: &[&FixationTrain]) -> Result<f64> {
    log_likelihood_bits(model, trains)
}

/// Places a metric value on the baseline (0) to gold standard (1) scale.
pub fn rescale_metric(value: f64, baseline: f64, gold: f64) -> Result<f64> {
    if (gold - baseline).abs() < 1e-12 {
        return Err(Error::DegenerateAnchors(gold - baseline));
    }
    Ok((value - baseline) / (gold - baseline))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter("vectors differ in length".into()));
    }
    if x.len() < 2 {
        return Err(Error::EmptyList("correlation input"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(Error::ConstantVector("x"));
    }
    if syy == 0.0 {
        return Err(Error::ConstantVector("y"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, tied values sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::InvalidParameter("vectors differ in length".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCorrelation {
    pub metric_id: String,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Correlation of each rescaled metric with the explained information gain
/// across models. Needs at least three models; constant metrics get `None`.
pub fn metric_correlations(
    explained: &[f64],
    rescaled: &BTreeMap<String, Vec<f64>>,
) -> Result<Vec<MetricCorrelation>> {
    if explained.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "correlations need at least 3 models, got {}",
            explained.len()
        )));
    }
    rescaled
        .iter()
        .map(|(id, values)| {
            if values.len() != explained.len() {
                return Err(Error::InvalidParameter(format!("metric {id} has {} values", values.len())));
            }
            Ok(MetricCorrelation {
                metric_id: id.clone(),
                pearson: pearson(values, explained).ok(),
                spearman: spearman(values, explained).ok(),
            })
        })
        .collect()
}
