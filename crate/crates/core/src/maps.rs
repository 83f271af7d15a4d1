//! Image-level diagnostics: image-based saliency (ratio) maps, per-pixel
//! information gain and the per-image possible-versus-explained scatter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::density::DensityGrid;
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Signed per-pixel contributions in bits/fixation.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGainMap {
    pub image_id: String,
    pub grid: Grid,
}

impl InfoGainMap {
    pub fn total(&self) -> f64 {
        self.grid.sum()
    }
}

/// `model / prior` per pixel.
pub fn ratio_map(model: &DensityGrid, prior: &DensityGrid) -> Result<Grid> {
    model.pmf().check_shape(prior.pmf())?;
    let w = prior.width();
    if let Some(i) = prior.pmf().as_slice().iter().position(|&p| p <= 0.0) {
        return Err(Error::ZeroPrior { x: i % w, y: i / w });
    }
    let data = model
        .pmf()
        .as_slice()
        .iter()
        .zip(prior.pmf().as_slice())
        .map(|(m, p)| m / p)
        .collect();
    Grid::from_vec(w, prior.height(), data)
}

/// `gold * log2(a / b)` per pixel, zero where gold vanishes.
fn weighted_log_ratio(gold: &DensityGrid, a: &DensityGrid, b: &DensityGrid) -> Result<InfoGainMap> {
    gold.pmf().check_shape(a.pmf())?;
    gold.pmf().check_shape(b.pmf())?;
    let w = gold.width();
    let mut data = Vec::with_capacity(gold.pmf().len());
    for (i, ((&g, &av), &bv)) in gold
        .pmf()
        .as_slice()
        .iter()
        .zip(a.pmf().as_slice())
        .zip(b.pmf().as_slice())
        .enumerate()
    {
        if g == 0.0 {
            data.push(0.0);
            continue;
        }
        if av <= 0.0 || bv <= 0.0 {
            return Err(Error::SupportViolation { x: i % w, y: i / w });
        }
        data.push(g * (av.log2() - bv.log2()));
    }
    Ok(InfoGainMap {
        image_id: gold.image_id().to_string(),
        grid: Grid::from_vec(w, gold.height(), data)?,
    })
}

/// Where the model gains over the prior, weighted by how often the gold
/// standard expects fixations there. Sums to the gold-weighted ELLR of
/// model versus prior.
pub fn info_gain_map(gold: &DensityGrid, model: &DensityGrid, prior: &DensityGrid) -> Result<InfoGainMap> {
    weighted_log_ratio(gold, model, prior)
}

/// Where the model falls short of the gold standard. Sums to the negative
/// image-based KL divergence from gold to model.
pub fn info_gain_diff_map(gold: &DensityGrid, model: &DensityGrid, _prior: &DensityGrid) -> Result<InfoGainMap> {
    weighted_log_ratio(gold, model, gold)
}

/// One point of the possible-versus-explained scatter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub image_id: String,
    pub possible_gain_bits: f64,
    /// `None` when the image has no possible gain to divide by.
    pub explained_percent: Option<f64>,
    pub flags: Vec<String>,
}

pub const FLAG_NO_POSSIBLE_GAIN: &str = "no_possible_gain";
pub const FLAG_BELOW_ZERO: &str = "below_zero";
pub const FLAG_ABOVE_100: &str = "above_100";

/// Per-image possible gain (gold − baseline) and unclamped percent
/// explained. Images missing from any input are skipped.
pub fn scatter_data(
    gold: &BTreeMap<String, f64>,
    baseline: &BTreeMap<String, f64>,
    model: &BTreeMap<String, f64>,
) -> Vec<ScatterPoint> {
    let mut out = Vec::new();
    for (image_id, &g) in gold {
        let (Some(&b), Some(&m)) = (baseline.get(image_id), model.get(image_id)) else {
            continue;
        };
        let possible = g - b;
        let mut flags = Vec::new();
        let explained = if possible > 0.0 {
            let pct = 100.0 * (m - b) / possible;
            if pct < 0.0 {
                flags.push(FLAG_BELOW_ZERO.to_string());
            }
            if pct > 100.0 {
                flags.push(FLAG_ABOVE_100.to_string());
            }
            Some(pct)
        } else {
            flags.push(FLAG_NO_POSSIBLE_GAIN.to_string());
            None
        };
        out.push(ScatterPoint {
            image_id: image_id.clone(),
            possible_gain_bits: possible,
            explained_percent: explained,
            flags,
        });
    }
    out
}
