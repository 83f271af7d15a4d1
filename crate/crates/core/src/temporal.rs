//! Self-excitation around the previous fixation.
//!
//! The spatial density is reweighted by `1 + f(Δ)` with
//! `f(Δ) = -δ·exp(-Δ²/(2σ²))` and `Δ = sqrt(dx² + α·dy²)`, then renormalized.
//! Negative `δ` attracts the next fixation towards the previous one;
//! positive `δ` inhibits it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{normalize_to_pmf, DensityGrid};
use crate::domain::{Fixation, FixationTrain};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::optim::{minimize, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalParams {
    pub delta: f64,
    pub sigma_t: f64,
    pub alpha_t: f64,
}

impl TemporalParams {
    pub fn new(delta: f64, sigma_t: f64, alpha_t: f64) -> Result<Self> {
        let p = TemporalParams {
            delta,
            sigma_t,
            alpha_t,
        };
        p.validate()?;
        Ok(p)
    }

    /// No temporal effect.
    pub fn neutral(sigma_t: f64) -> Self {
        TemporalParams {
            delta: 0.0,
            sigma_t,
            alpha_t: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta < 1.0) || !self.delta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "delta must be < 1, got {}",
                self.delta
            )));
        }
        if !(self.sigma_t > 0.0) || !self.sigma_t.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_t must be > 0, got {}",
                self.sigma_t
            )));
        }
        if !(self.alpha_t > 0.0) || !self.alpha_t.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "alpha_t must be > 0, got {}",
                self.alpha_t
            )));
        }
        Ok(())
    }

    /// Per-axis Gaussian factors `exp(-d²/2σ²)` and `exp(-α d²/2σ²)` for
    /// offsets `-(n-1)..=(n-1)`, indexed by `d + n - 1`.
    fn axis_tables(&self, w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
        let s2 = 2.0 * self.sigma_t * self.sigma_t;
        let ex = (-(w as isize - 1)..w as isize)
            .map(|d| (-((d * d) as f64) / s2).exp())
            .collect();
        let ey = (-(h as isize - 1)..h as isize)
            .map(|d| (-self.alpha_t * (d * d) as f64 / s2).exp())
            .collect();
        (ex, ey)
    }
}

/// `1 + f(Δ)` for a displacement from the previous fixation.
pub fn temporal_factor(dx: f64, dy: f64, p: &TemporalParams) -> f64 {
    let d2 = dx * dx + p.alpha_t * dy * dy;
    1.0 - p.delta * (-0.5 * d2 / (p.sigma_t * p.sigma_t)).exp()
}

/// Unnormalized weights `(1 + f) · base` relative to the previous fixation's
/// pixel, using separable lookup tables.
pub(crate) fn reweighted(base: &Grid, prev_px: (usize, usize), p: &TemporalParams) -> Grid {
    let (w, h) = (base.width(), base.height());
    let (ex, ey) = p.axis_tables(w, h);
    let (qx, qy) = prev_px;
    Grid::from_fn(w, h, |x, y| {
        let g = ex[x + w - 1 - qx] * ey[y + h - 1 - qy];
        (1.0 - p.delta * g) * base.get(x, y)
    })
}

/// Density of the next fixation given the previous one.
pub fn conditional_density(base: &DensityGrid, prev: &Fixation, p: &TemporalParams) -> Result<DensityGrid> {
    p.validate()?;
    if p.delta == 0.0 {
        return Ok(base.clone());
    }
    let frame = base.frame();
    let (qx, qy) = frame.snap(prev.x, prev.y);
    let mut weights = Grid::zeros(frame.width, frame.height);
    for y in 0..frame.height {
        for x in 0..frame.width {
            let f = temporal_factor(x as f64 - qx as f64, y as f64 - qy as f64, p);
            weights.set(x, y, f * base.pmf().get(x, y));
        }
    }
    normalize_to_pmf(base.image_id(), &weights)
}

/// Per-image precomputation for the temporal likelihood.
struct ImageSteps {
    width: usize,
    height: usize,
    base: Vec<f64>,
    /// Sum of `log base` (nats) over all scored fixations plus the uniform
    /// offset; independent of the temporal parameters.
    static_nats: f64,
    /// `(prev pixel, current pixel)` for every fixation after the first.
    steps: Vec<((usize, usize), (usize, usize))>,
}

/// Negative temporal log-likelihood as a function of unconstrained
/// parameters `[ln(1 - δ), ln σ_t, ln α_t]`.
pub struct TemporalObjective {
    images: Vec<ImageSteps>,
    total: usize,
}

impl TemporalObjective {
    pub fn new(bases: &BTreeMap<String, DensityGrid>, trains: &[FixationTrain]) -> Result<Self> {
        let mut by_image: BTreeMap<&str, Vec<&FixationTrain>> = BTreeMap::new();
        for t in trains {
            by_image.entry(t.image_id.as_str()).or_default().push(t);
        }
        let mut images = Vec::new();
        let mut total = 0;
        for (image_id, trs) in by_image {
            let base = bases
                .get(image_id)
                .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
            let frame = base.frame();
            let pmf = base.pmf();
            let offset = (frame.pixel_count() as f64).ln();
            let mut static_nats = 0.0;
            let mut steps = Vec::new();
            let mut count = 0;
            for tr in trs {
                let mut prev: Option<(usize, usize)> = None;
                for (index, f) in tr.fixations.iter().enumerate() {
                    let px = frame.snap(f.x, f.y);
                    let v = pmf.get(px.0, px.1);
                    if !(v > 0.0) {
                        return Err(Error::ZeroDensityAtFixation {
                            image_id: tr.image_id.clone(),
                            subject_id: tr.subject_id.clone(),
                            index,
                            px: px.0,
                            py: px.1,
                        });
                    }
                    static_nats += v.ln() + offset;
                    if let Some(q) = prev {
                        steps.push((q, px));
                    }
                    prev = Some(px);
                    count += 1;
                }
            }
            total += count;
            images.push(ImageSteps {
                width: frame.width,
                height: frame.height,
                base: pmf.as_slice().to_vec(),
                static_nats,
                steps,
            });
        }
        if total == 0 {
            return Err(Error::EmptyList("fixations"));
        }
        Ok(TemporalObjective { images, total })
    }

    pub fn fixation_count(&self) -> usize {
        self.total
    }

    pub fn params_to_theta(p: &TemporalParams) -> Vec<f64> {
        vec![(1.0 - p.delta).ln(), p.sigma_t.ln(), p.alpha_t.ln()]
    }

    pub fn theta_to_params(theta: &[f64]) -> TemporalParams {
        TemporalParams {
            delta: 1.0 - theta[0].exp(),
            sigma_t: theta[1].exp(),
            alpha_t: theta[2].exp(),
        }
    }

    /// Log-likelihood in bits per fixation relative to uniform.
    pub fn log_likelihood(&self, p: &TemporalParams) -> f64 {
        self.evaluate(p, false).0
    }

    /// Negative bits/fixation and its gradient in unconstrained coordinates.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let p = Self::theta_to_params(theta);
        let (ll, g) = self.evaluate(&p, true);
        // chain rule from (δ, σ, α)-space derivatives already expressed per
        // log-parameter except δ
        let grad = vec![-g[0] * (-(1.0 - p.delta)), -g[1], -g[2]];
        (-ll, grad)
    }

    /// Returns bits/fixation and `[∂/∂δ, σ ∂/∂σ, α ∂/∂α]`.
    fn evaluate(&self, p: &TemporalParams, with_grad: bool) -> (f64, [f64; 3]) {
        let parts: Vec<(f64, [f64; 3])> = self
            .images
            .par_iter()
            .map(|img| image_terms(img, p, with_grad))
            .collect();
        let mut nats = 0.0;
        let mut grad = [0.0; 3];
        for (v, g) in parts {
            nats += v;
            for k in 0..3 {
                grad[k] += g[k];
            }
        }
        let scale = 1.0 / (self.total as f64 * std::f64::consts::LN_2);
        (nats * scale, grad.map(|g| g * scale))
    }
}

fn image_terms(img: &ImageSteps, p: &TemporalParams, with_grad: bool) -> (f64, [f64; 3]) {
    let mut nats = img.static_nats;
    let mut grad = [0.0; 3];
    if img.steps.is_empty() || p.delta == 0.0 && !with_grad {
        return (nats, grad);
    }
    let (w, h) = (img.width, img.height);
    let (ex, ey) = p.axis_tables(w, h);
    let dx2 = |i: usize, n: usize| {
        let d = i as f64 - (n as f64 - 1.0);
        d * d
    };
    let ex2: Vec<f64> = ex.iter().enumerate().map(|(i, v)| v * dx2(i, w)).collect();
    let ey2: Vec<f64> = ey.iter().enumerate().map(|(i, v)| v * dx2(i, h)).collect();

    // first pass along x: a[y][qx] = Σ_x ex(x - qx) base(x, y)
    let pass_x = |table: &[f64]| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            let row = &img.base[y * w..(y + 1) * w];
            for qx in 0..w {
                let mut acc = 0.0;
                for (x, b) in row.iter().enumerate() {
                    acc += table[x + w - 1 - qx] * b;
                }
                out[y * w + qx] = acc;
            }
        }
        out
    };
    // second pass along y: out[qy][qx] = Σ_y ey(y - qy) a[y][qx]
    let pass_y = |a: &[f64], table: &[f64]| {
        let mut out = vec![0.0; w * h];
        for qy in 0..h {
            for y in 0..h {
                let k = table[y + h - 1 - qy];
                let src = &a[y * w..(y + 1) * w];
                let dst = &mut out[qy * w..(qy + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        out
    };
    let a = pass_x(&ex);
    let norm = pass_y(&a, &ey);
    let (norm_x2, norm_y2) = if with_grad {
        let a2 = pass_x(&ex2);
        (pass_y(&a2, &ey), pass_y(&a, &ey2))
    } else {
        (Vec::new(), Vec::new())
    };

    let delta = p.delta;
    let s2 = p.sigma_t * p.sigma_t;
    for &((qx, qy), (kx, ky)) in &img.steps {
        let ix = kx + w - 1 - qx;
        let iy = ky + h - 1 - qy;
        let g = ex[ix] * ey[iy];
        let q = qy * w + qx;
        let big_g = norm[q];
        let num = 1.0 - delta * g;
        let den = 1.0 - delta * big_g;
        nats += num.ln() - den.ln();
        if with_grad {
            let dxx = dx2(ix, w);
            let dyy = dx2(iy, h);
            grad[0] += -g / num + big_g / den;
            // σ ∂/∂σ
            let dg_s = g * (dxx + p.alpha_t * dyy) / s2;
            let dnorm_s = (norm_x2[q] + p.alpha_t * norm_y2[q]) / s2;
            grad[1] += -delta * dg_s / num + delta * dnorm_s / den;
            // α ∂/∂α
            let dg_a = -g * p.alpha_t * dyy / (2.0 * s2);
            let dnorm_a = -p.alpha_t * norm_y2[q] / (2.0 * s2);
            grad[2] += -delta * dg_a / num + delta * dnorm_a / den;
        }
    }
    (nats, grad)
}

/// Bits per fixation of the trains when every fixation after the first is
/// scored under the density conditioned on its predecessor.
pub fn temporal_log_likelihood(
    bases: &BTreeMap<String, DensityGrid>,
    trains: &[FixationTrain],
    p: &TemporalParams,
) -> Result<f64> {
    p.validate()?;
    Ok(TemporalObjective::new(bases, trains)?.log_likelihood(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalFit {
    pub params: TemporalParams,
    pub log_likelihood: f64,
    pub spatial_log_likelihood: f64,
    pub iterations: usize,
}

impl TemporalFit {
    pub fn gain(&self) -> f64 {
        self.log_likelihood - self.spatial_log_likelihood
    }
}

/// Maximizes the temporal likelihood over `(δ, σ_t, α_t)` starting from the
/// neutral point. `init_sigma` defaults to an eighth of the largest frame
/// dimension.
pub fn fit_temporal(
    bases: &BTreeMap<String, DensityGrid>,
    trains: &[FixationTrain],
    config: &OptimizerConfig,
    init_sigma: Option<f64>,
) -> Result<TemporalFit> {
    let objective = TemporalObjective::new(bases, trains)?;
    let sigma0 = init_sigma.unwrap_or_else(|| {
        let extent = bases
            .values()
            .map(|b| b.width().max(b.height()))
            .max()
            .unwrap_or(8);
        (extent as f64 / 8.0).max(1.0)
    });
    let neutral = TemporalParams::neutral(sigma0);
    let spatial = objective.log_likelihood(&neutral);
    let start = TemporalObjective::params_to_theta(&neutral);
    let m = minimize(|t| objective.value_and_gradient(t), start, config)?;
    let fitted = TemporalObjective::theta_to_params(&m.x);
    let ll = objective.log_likelihood(&fitted);
    if !ll.is_finite() {
        return Err(Error::NonFinite);
    }
    let (params, log_likelihood) = if ll >= spatial {
        (fitted, ll)
    } else {
        (neutral, spatial)
    };
    Ok(TemporalFit {
        params,
        log_likelihood,
        spatial_log_likelihood: spatial,
        iterations: m.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::log_likelihood_bits;
    use crate::domain::ImageFrame;

    fn uniform(w: usize, h: usize) -> DensityGrid {
        DensityGrid::uniform(&ImageFrame::new("a", w, h))
    }

    fn bumpy(w: usize, h: usize) -> DensityGrid {
        let g = Grid::from_fn(w, h, |x, y| 1.0 + ((x * 3 + y * 5) % 7) as f64);
        normalize_to_pmf("a", &g).unwrap()
    }

    #[test]
    fn factor_examples() {
        let neutral = TemporalParams::new(0.0, 5.0, 1.0).unwrap();
        assert_eq!(temporal_factor(3.0, -2.0, &neutral), 1.0);
        let p = TemporalParams::new(0.3, 5.0, 2.0).unwrap();
        assert!((temporal_factor(0.0, 0.0, &p) - 0.7).abs() < 1e-15);
        let p = TemporalParams::new(-1.0, 10.0, 1.0).unwrap();
        let v = temporal_factor(10.0, 0.0, &p);
        assert!((v - (1.0 + (-0.5f64).exp())).abs() < 1e-12);
        assert!((v - 1.6065).abs() < 1e-4);
        assert!(TemporalParams::new(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn neutral_conditional_is_identity() {
        let base = bumpy(5, 4);
        let p = TemporalParams::neutral(2.0);
        assert_eq!(conditional_density(&base, &Fixation::new(1.0, 1.0, 0.0), &p).unwrap(), base);
    }

    #[test]
    fn excitation_peaks_at_previous_pixel() {
        let base = uniform(9, 7);
        let p = TemporalParams::new(-0.5, 1.5, 1.0).unwrap();
        let c = conditional_density(&base, &Fixation::new(3.0, 2.0, 0.0), &p).unwrap();
        let peak = c.pmf().get(3, 2);
        for y in 0..7 {
            for x in 0..9 {
                if (x, y) != (3, 2) {
                    assert!(c.pmf().get(x, y) < peak);
                }
            }
        }
    }

    #[test]
    fn sixteen_pixel_hand_computation() {
        let base = uniform(4, 4);
        let p = TemporalParams::new(-0.5, 1.0, 1.0).unwrap();
        let c = conditional_density(&base, &Fixation::new(1.0, 1.0, 0.0), &p).unwrap();
        let mut w = [0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                let d2 = ((x as f64 - 1.0).powi(2) + (y as f64 - 1.0).powi(2)) as f64;
                w[y * 4 + x] = (1.0 + 0.5 * (-0.5 * d2).exp()) / 16.0;
            }
        }
        let z: f64 = w.iter().sum();
        for (i, v) in c.pmf().as_slice().iter().enumerate() {
            assert!((v - w[i] / z).abs() < 1e-12);
        }
    }

    #[test]
    fn inhibition_raises_distant_mass() {
        let base = bumpy(12, 10);
        let p = TemporalParams::new(0.6, 2.0, 0.7).unwrap();
        let c = conditional_density(&base, &Fixation::new(2.0, 2.0, 0.0), &p).unwrap();
        assert!(c.pmf().get(11, 9) > base.pmf().get(11, 9));
        assert!((c.pmf().sum() - 1.0).abs() < 1e-9);
    }

    fn trains_on(image: &str, paths: &[&[(f64, f64)]]) -> Vec<FixationTrain> {
        paths
            .iter()
            .enumerate()
            .map(|(s, pts)| {
                FixationTrain::new(
                    image,
                    format!("s{s}"),
                    pts.iter()
                        .enumerate()
                        .map(|(i, &(x, y))| Fixation::new(x, y, i as f64))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn reductions_to_spatial_likelihood() {
        let base = bumpy(6, 5);
        let bases = BTreeMap::from([("a".to_string(), base.clone())]);
        let trains = trains_on("a", &[&[(0.0, 0.0), (3.0, 2.0), (5.0, 4.0)], &[(1.0, 1.0)]]);
        let refs: Vec<&FixationTrain> = trains.iter().collect();
        let spatial = log_likelihood_bits(&base, &refs).unwrap();
        let neutral = temporal_log_likelihood(&bases, &trains, &TemporalParams::neutral(2.0)).unwrap();
        assert!((neutral - spatial).abs() < 1e-12);

        let singles = trains_on("a", &[&[(0.0, 0.0)], &[(4.0, 3.0)]]);
        let refs: Vec<&FixationTrain> = singles.iter().collect();
        let spatial = log_likelihood_bits(&base, &refs).unwrap();
        let p = TemporalParams::new(-0.7, 1.3, 2.0).unwrap();
        assert!((temporal_log_likelihood(&bases, &singles, &p).unwrap() - spatial).abs() < 1e-12);
    }

    #[test]
    fn two_fixation_train_matches_direct_oracle() {
        let base = uniform(4, 4);
        let bases = BTreeMap::from([("a".to_string(), base.clone())]);
        let trains = trains_on("a", &[&[(1.0, 1.0), (2.0, 3.0)]]);
        let p = TemporalParams::new(-0.5, 1.0, 1.0).unwrap();
        let ll1 = (1.0f64 / 16.0).log2() + 16f64.log2();
        let cond = conditional_density(&base, &Fixation::new(1.0, 1.0, 0.0), &p).unwrap();
        let ll2 = cond.pmf().get(2, 3).log2() + 16f64.log2();
        let got = temporal_log_likelihood(&bases, &trains, &p).unwrap();
        assert!((got - (ll1 + ll2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn objective_agrees_with_explicit_conditionals() {
        let base = bumpy(7, 6);
        let bases = BTreeMap::from([("a".to_string(), base.clone())]);
        let trains = trains_on(
            "a",
            &[&[(0.0, 0.0), (6.0, 5.0), (2.0, 3.0), (2.0, 4.0)], &[(3.0, 3.0), (1.0, 0.0)]],
        );
        let p = TemporalParams::new(0.4, 1.7, 0.6).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for tr in &trains {
            for (i, f) in tr.fixations.iter().enumerate() {
                let d = if i == 0 {
                    base.clone()
                } else {
                    conditional_density(&base, &tr.fixations[i - 1], &p).unwrap()
                };
                total += d.at(f.x, f.y).log2() + 42f64.log2();
                n += 1.0;
            }
        }
        let got = temporal_log_likelihood(&bases, &trains, &p).unwrap();
        assert!((got - total / n).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let base = bumpy(9, 8);
        let bases = BTreeMap::from([("a".to_string(), base)]);
        let trains = trains_on(
            "a",
            &[&[(0.0, 0.0), (6.0, 5.0), (2.0, 3.0), (2.0, 4.0), (8.0, 7.0)], &[(3.0, 3.0), (1.0, 0.0)]],
        );
        let obj = TemporalObjective::new(&bases, &trains).unwrap();
        for theta in [[0.3, 0.5, -0.2], [-0.4, 1.2, 0.4], [0.1, 0.0, 0.0]] {
            let (_, g) = obj.value_and_gradient(&theta);
            let h = 1e-5;
            for k in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                let fd = (obj.value_and_gradient(&tp).0 - obj.value_and_gradient(&tm).0) / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", g[k]);
            }
        }
    }
}
