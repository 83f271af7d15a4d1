//! Ground-truth generators for fixation data.
//!
//! Every train gets its own ChaCha8 stream derived from the master seed and
//! the train index, so trains can be generated independently and in any
//! order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::density::DensityGrid;
use crate::domain::{Fixation, FixationTrain, ImageFrame};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::temporal::{reweighted, TemporalParams};

/// Name of the random generator, recorded in output metadata.
pub const GENERATOR: &str = "ChaCha8Rng(seed_from_u64, stream=train index)";

/// Seconds between consecutive synthetic fixations.
pub const FIXATION_INTERVAL: f64 = 0.25;

pub fn train_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Cumulative sums of a nonnegative grid, for inverse-CDF sampling.
fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw_index(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total = *cdf.last().expect("non-empty grid");
    let u = rng.random::<f64>() * total;
    let i = cdf.partition_point(|&c| c <= u);
    // skip zero-mass cells that share the same cumulative value
    i.min(cdf.len() - 1)
}

/// Draws a pixel then places the fixation uniformly inside it. Uses exactly
/// three draws from the generator.
fn draw_fixation(frame: &ImageFrame, cdf: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Fixation {
    let i = draw_index(cdf, rng);
    let (px, py) = (i % frame.width, i / frame.width);
    let jx: f64 = rng.random::<f64>() - 0.5;
    let jy: f64 = rng.random::<f64>() - 0.5;
    Fixation::new(
        (px as f64 + jx).max(0.0),
        (py as f64 + jy).max(0.0),
        t,
    )
}

fn check_frame(frame: &ImageFrame, pmf: &DensityGrid) -> Result<()> {
    if frame.width != pmf.width() || frame.height != pmf.height() {
        return Err(Error::ShapeMismatch(
            frame.width,
            frame.height,
            pmf.width(),
            pmf.height(),
        ));
    }
    Ok(())
}

pub fn subject_name(index: usize) -> String {
    format!("s{index:03}")
}

/// I.i.d. fixations from `pmf` for `n_subjects` subjects.
pub fn sample_spatial(
    frame: &ImageFrame,
    pmf: &DensityGrid,
    n_subjects: usize,
    fixations_per_subject: usize,
    seed: u64,
) -> Result<Vec<FixationTrain>> {
    check_frame(frame, pmf)?;
    if n_subjects == 0 || fixations_per_subject == 0 {
        return Err(Error::InvalidParameter("counts must be >= 1".into()));
    }
    let cdf = cumulative(pmf.pmf().as_slice());
    Ok((0..n_subjects)
        .map(|s| {
            let mut rng = train_rng(seed, s as u64);
            let fixations = (0..fixations_per_subject)
                .map(|k| draw_fixation(frame, &cdf, k as f64 * FIXATION_INTERVAL, &mut rng))
                .collect();
            FixationTrain::new(frame.image_id.clone(), subject_name(s), fixations)
        })
        .collect())
}

/// One train from the self-exciting process: the first fixation from
/// `base`, every later one from the base reweighted around its predecessor.
pub fn sample_temporal(
    frame: &ImageFrame,
    base: &DensityGrid,
    p: &TemporalParams,
    length: usize,
    seed: u64,
) -> Result<FixationTrain> {
    sample_temporal_train(frame, base, p, length, seed, 0)
}

/// Like [`sample_temporal`] for many subjects, train `s` on stream `s`.
pub fn sample_temporal_trains(
    frame: &ImageFrame,
    base: &DensityGrid,
    p: &TemporalParams,
    n_subjects: usize,
    length: usize,
    seed: u64,
) -> Result<Vec<FixationTrain>> {
    (0..n_subjects)
        .map(|s| sample_temporal_train(frame, base, p, length, seed, s))
        .collect()
}

fn sample_temporal_train(
    frame: &ImageFrame,
    base: &DensityGrid,
    p: &TemporalParams,
    length: usize,
    seed: u64,
    index: usize,
) -> Result<FixationTrain> {
    check_frame(frame, base)?;
    p.validate()?;
    if length == 0 {
        return Err(Error::InvalidParameter("train length must be >= 1".into()));
    }
    let base_cdf = cumulative(base.pmf().as_slice());
    let mut rng = train_rng(seed, index as u64);
    let mut fixations: Vec<Fixation> = Vec::with_capacity(length);
    for k in 0..length {
        let t = k as f64 * FIXATION_INTERVAL;
        let f = match fixations.last() {
            Some(prev) if p.delta != 0.0 => {
                let weights: Grid = reweighted(base.pmf(), frame.snap(prev.x, prev.y), p);
                draw_fixation(frame, &cumulative(weights.as_slice()), t, &mut rng)
            }
            _ => draw_fixation(frame, &base_cdf, t, &mut rng),
        };
        fixations.push(f);
    }
    Ok(FixationTrain::new(
        frame.image_id.clone(),
        subject_name(index),
        fixations,
    ))
}
