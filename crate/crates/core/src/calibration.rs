//! Conversion of raw saliency maps into fixation densities.
//!
//! The pipeline per image is: blur the globally rescaled map, apply a
//! monotone piecewise-linear nonlinearity, multiply by a radial center-bias
//! profile and normalize. All factors are image independent; their
//! parameters are fitted jointly by maximizing the log-likelihood of the
//! fixations.
//!
//! Constraints are enforced through reparameterization so that an
//! unconstrained quasi-Newton method can be used:
//!
//! * nonlinearity: `y_0 = y_floor + θ_0²`, `y_i = y_{i-1} + θ_i²`
//! * center-bias profile: `y_j = y_floor + θ_j²`
//! * eccentricity: `α = exp(a)`
//! * blur width: `σ = θ_σ²`

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{
    convolve_axis, convolve_separable, gaussian_blur, gaussian_kernel_with_derivative,
    normalize_to_pmf, Boundary, DensityGrid,
};
use crate::domain::{FixationTrain, ImageFrame, SaliencyMap};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::optim::{minimize, OptimizerConfig};

pub const NONLINEARITY_KNOTS: usize = 20;
pub const CENTER_BIAS_KNOTS: usize = 12;
/// Lower bound on every piecewise-linear value; keeps densities positive.
pub const Y_FLOOR: f64 = 1e-6;

// slack when checking that inputs lie in [0, 1]
const SUPPORT_SLACK: f64 = 1e-12;

/// Continuous piecewise-linear function on equidistant knots over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter("need at least 2 knots".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite knot value".into()));
        }
        Ok(PiecewiseLinear { values })
    }

    /// `y_i = x_i + Y_FLOOR`.
    pub fn identity(knots: usize) -> Self {
        let values = (0..knots)
            .map(|i| i as f64 / (knots - 1) as f64 + Y_FLOOR)
            .collect();
        PiecewiseLinear { values }
    }

    pub fn constant(knots: usize, c: f64) -> Self {
        PiecewiseLinear {
            values: vec![c; knots],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn knots(&self) -> usize {
        self.values.len()
    }

    pub fn knot_position(&self, i: usize) -> f64 {
        i as f64 / (self.values.len() - 1) as f64
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    /// Segment index and position inside it for `x ∈ [0, 1]`.
    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let segments = self.values.len() - 1;
        let u = x.clamp(0.0, 1.0) * segments as f64;
        let i = (u.floor() as usize).min(segments - 1);
        (i, u - i as f64)
    }

    #[inline]
    fn eval_clamped(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        self.values[i] + (self.values[i + 1] - self.values[i]) * t
    }

    /// Slope with respect to `x` on the segment containing `x`.
    #[inline]
    fn slope(&self, x: f64) -> f64 {
        let (i, _) = self.locate(x);
        (self.values[i + 1] - self.values[i]) * (self.values.len() - 1) as f64
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        if !(-SUPPORT_SLACK..=1.0 + SUPPORT_SLACK).contains(&x) {
            return Err(Error::OutOfSupport(x));
        }
        Ok(self.eval_clamped(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterBias {
    pub profile: PiecewiseLinear,
    pub alpha: f64,
}

impl CenterBias {
    pub fn flat() -> Self {
        CenterBias {
            profile: PiecewiseLinear::constant(CENTER_BIAS_KNOTS, 1.0),
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "nonlin")]
    Nonlin,
    #[serde(rename = "nonlin+cb")]
    CenterBias,
    #[serde(rename = "nonlin+cb+blur")]
    Blur,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Nonlin, Stage::CenterBias, Stage::Blur];

    pub fn has_center_bias(self) -> bool {
        self >= Stage::CenterBias
    }

    pub fn has_blur(self) -> bool {
        self == Stage::Blur
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Nonlin => "nonlin",
            Stage::CenterBias => "nonlin+cb",
            Stage::Blur => "nonlin+cb+blur",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonlin" => Ok(Stage::Nonlin),
            "cb" | "nonlin+cb" => Ok(Stage::CenterBias),
            "blur" | "nonlin+cb+blur" => Ok(Stage::Blur),
            other => Err(Error::InvalidParameter(format!("unknown stage {other}"))),
        }
    }
}

/// Parameters of the conversion from saliency map to density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsJson", into = "ParamsJson")]
pub struct CalibrationParams {
    pub stage: Stage,
    pub nonlinearity: PiecewiseLinear,
    pub center_bias: Option<CenterBias>,
    pub blur_sigma: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    stage: Stage,
    nonlin_y: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    cb_y: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    sigma: Option<f64>,
}

impl From<CalibrationParams> for ParamsJson {
    fn from(p: CalibrationParams) -> Self {
        ParamsJson {
            stage: p.stage,
            nonlin_y: p.nonlinearity.values,
            cb_y: p.center_bias.as_ref().map(|c| c.profile.values.clone()),
            alpha: p.center_bias.as_ref().map(|c| c.alpha),
            sigma: p.blur_sigma,
        }
    }
}

impl TryFrom<ParamsJson> for CalibrationParams {
    type Error = Error;

    fn try_from(j: ParamsJson) -> Result<Self> {
        let center_bias = match (j.cb_y, j.alpha) {
            (Some(y), Some(alpha)) => Some(CenterBias {
                profile: PiecewiseLinear::new(y)?,
                alpha,
            }),
            (None, None) => None,
            _ => return Err(Error::Parse("cb_y and alpha must appear together".into())),
        };
        let p = CalibrationParams {
            stage: j.stage,
            nonlinearity: PiecewiseLinear::new(j.nonlin_y)?,
            center_bias,
            blur_sigma: j.sigma,
        };
        p.validate()?;
        Ok(p)
    }
}

impl CalibrationParams {
    /// Identity nonlinearity, flat center bias, `α = 1`, `σ = 1`.
    pub fn initial(stage: Stage) -> Self {
        CalibrationParams {
            stage,
            nonlinearity: PiecewiseLinear::identity(NONLINEARITY_KNOTS),
            center_bias: stage.has_center_bias().then(CenterBias::flat),
            blur_sigma: stage.has_blur().then_some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.center_bias.is_some() != self.stage.has_center_bias() {
            return bad("center bias present iff stage includes it");
        }
        if self.blur_sigma.is_some() != self.stage.has_blur() {
            return bad("blur present iff stage includes it");
        }
        if !self.nonlinearity.is_monotone() {
            return bad("nonlinearity must be nondecreasing");
        }
        if self.nonlinearity.values.iter().any(|&v| v < Y_FLOOR * (1.0 - 1e-9)) {
            return bad("nonlinearity below floor");
        }
        if let Some(cb) = &self.center_bias {
            if !(cb.alpha > 0.0) || !cb.alpha.is_finite() {
                return bad("alpha must be > 0");
            }
            if cb.profile.values.iter().any(|&v| v < Y_FLOOR * (1.0 - 1e-9)) {
                return bad("center-bias profile below floor");
            }
        }
        if let Some(s) = self.blur_sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return bad("blur sigma must be >= 0");
            }
        }
        Ok(())
    }

    /// Same function, represented at a later stage with neutral new factors.
    pub fn extend_to(&self, stage: Stage) -> Self {
        let mut p = self.clone();
        p.stage = stage;
        if stage.has_center_bias() && p.center_bias.is_none() {
            p.center_bias = Some(CenterBias::flat());
        }
        if stage.has_blur() && p.blur_sigma.is_none() {
            p.blur_sigma = Some(0.0);
        }
        p
    }
}

/// Affine rescale of all maps of one model to `[0, 1]` using the global
/// minimum and maximum over every image.
pub fn global_rescale(maps: &[SaliencyMap]) -> Result<Vec<SaliencyMap>> {
    if maps.is_empty() {
        return Err(Error::EmptyList("maps"));
    }
    for m in maps {
        if let Some((x, y)) = m.values.first_non_finite() {
            return Err(Error::NonFiniteValue { x, y });
        }
    }
    let lo = maps.iter().map(|m| m.values.min()).fold(f64::INFINITY, f64::min);
    let hi = maps.iter().map(|m| m.values.max()).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::ConstantModel(maps[0].model_id.clone()));
    }
    let span = hi - lo;
    Ok(maps
        .iter()
        .map(|m| SaliencyMap {
            image_id: m.image_id.clone(),
            model_id: m.model_id.clone(),
            values: m.values.map(|v| ((v - lo) / span).clamp(0.0, 1.0)),
        })
        .collect())
}

fn check_support(g: &Grid) -> Result<()> {
    match g
        .as_slice()
        .iter()
        .find(|v| !(-SUPPORT_SLACK..=1.0 + SUPPORT_SLACK).contains(*v))
    {
        Some(&bad) => Err(Error::OutOfSupport(bad)),
        None => Ok(()),
    }
}

pub fn apply_nonlinearity(map01: &Grid, f: &PiecewiseLinear) -> Result<Grid> {
    check_support(map01)?;
    Ok(map01.map(|v| f.eval_clamped(v)))
}

/// Per-pixel distance geometry relative to the frame center.
#[derive(Debug, Clone)]
struct CenterGeometry {
    dx2: Vec<f64>,
    dy2: Vec<f64>,
    corner_dx2: f64,
    corner_dy2: f64,
}

impl CenterGeometry {
    fn new(frame: &ImageFrame) -> Self {
        let xc = (frame.width as f64 - 1.0) / 2.0;
        let yc = (frame.height as f64 - 1.0) / 2.0;
        let mut dx2 = Vec::with_capacity(frame.pixel_count());
        let mut dy2 = Vec::with_capacity(frame.pixel_count());
        for y in 0..frame.height {
            for x in 0..frame.width {
                dx2.push((x as f64 - xc).powi(2));
                dy2.push((y as f64 - yc).powi(2));
            }
        }
        CenterGeometry {
            dx2,
            dy2,
            corner_dx2: xc * xc,
            corner_dy2: yc * yc,
        }
    }

    /// Normalized distance and its derivative with respect to `α`.
    #[inline]
    fn distance(&self, i: usize, alpha: f64) -> (f64, f64) {
        let a = (self.dx2[i] + alpha * self.dy2[i]).sqrt();
        let b = (self.corner_dx2 + alpha * self.corner_dy2).sqrt();
        let da = if a > 0.0 { self.dy2[i] / (2.0 * a) } else { 0.0 };
        let db = self.corner_dy2 / (2.0 * b);
        let d = (a / b).min(1.0);
        (d, (da * b - a * db) / (b * b))
    }
}

/// Center-bias weight `profile(d)` with
/// `d = sqrt((x-x_c)² + α(y-y_c)²) / d_max` for every pixel.
pub fn center_bias_weight(frame: &ImageFrame, cb: &CenterBias) -> Grid {
    let geo = CenterGeometry::new(frame);
    let data = (0..frame.pixel_count())
        .map(|i| cb.profile.eval_clamped(geo.distance(i, cb.alpha).0))
        .collect();
    Grid::from_vec(frame.width, frame.height, data).expect("shape")
}

/// Density of one image under the given calibration. The map must already
/// be globally rescaled to `[0, 1]`.
pub fn build_model_density(
    map: &SaliencyMap,
    params: &CalibrationParams,
    frame: &ImageFrame,
) -> Result<DensityGrid> {
    if map.values.width() != frame.width || map.values.height() != frame.height {
        return Err(Error::ShapeMismatch(
            map.values.width(),
            map.values.height(),
            frame.width,
            frame.height,
        ));
    }
    params.validate()?;
    check_support(&map.values)?;
    let mut s = map.values.clone();
    if let Some(sigma) = params.blur_sigma {
        s = gaussian_blur(&s, sigma)?.map(|v| v.clamp(0.0, 1.0));
    }
    let mut u = apply_nonlinearity(&s, &params.nonlinearity)?;
    if let Some(cb) = &params.center_bias {
        let w = center_bias_weight(frame, cb);
        for (ui, wi) in u.as_mut_slice().iter_mut().zip(w.as_slice()) {
            *ui *= wi;
        }
    }
    normalize_to_pmf(frame.image_id.clone(), &u)
}

/// One image's data for the likelihood objective.
struct ImageData {
    width: usize,
    height: usize,
    map: Grid,
    geometry: CenterGeometry,
    /// `(pixel index, count)` of fixated pixels.
    fixated: Vec<(usize, f64)>,
    count: f64,
    log_pixels: f64,
}

/// Negative mean log-likelihood (bits/fixation) of the calibrated model over
/// a set of images, as a function of the unconstrained parameter vector.
pub struct CalibrationObjective {
    stage: Stage,
    images: Vec<ImageData>,
    total: f64,
}

impl CalibrationObjective {
    /// `maps` must be globally rescaled. Images without fixations are
    /// ignored; fixations on images without a map are an error.
    pub fn new(maps: &[SaliencyMap], trains: &[FixationTrain], stage: Stage) -> Result<Self> {
        let by_id: BTreeMap<&str, &SaliencyMap> =
            maps.iter().map(|m| (m.image_id.as_str(), m)).collect();
        let mut counts: BTreeMap<&str, BTreeMap<usize, f64>> = BTreeMap::new();
        for tr in trains {
            let map = by_id.get(tr.image_id.as_str()).ok_or_else(|| Error::MissingMap {
                model_id: maps.first().map(|m| m.model_id.clone()).unwrap_or_default(),
                image_id: tr.image_id.clone(),
            })?;
            let frame = ImageFrame::new(tr.image_id.clone(), map.values.width(), map.values.height());
            let entry = counts.entry(tr.image_id.as_str()).or_default();
            for f in &tr.fixations {
                let (x, y) = frame.snap(f.x, f.y);
                *entry.entry(y * frame.width + x).or_default() += 1.0;
            }
        }
        let mut images = Vec::new();
        let mut total = 0.0;
        for (image_id, fixated) in counts {
            let map = by_id[image_id];
            check_support(&map.values)?;
            let frame = ImageFrame::new(image_id, map.values.width(), map.values.height());
            let count: f64 = fixated.values().sum();
            if count == 0.0 {
                continue;
            }
            total += count;
            images.push(ImageData {
                width: frame.width,
                height: frame.height,
                map: map.values.clone(),
                geometry: CenterGeometry::new(&frame),
                fixated: fixated.into_iter().collect(),
                count,
                log_pixels: (frame.pixel_count() as f64).ln(),
            });
        }
        if total == 0.0 {
            return Err(Error::EmptyList("fixations"));
        }
        Ok(CalibrationObjective {
            stage,
            images,
            total,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn dimension(&self) -> usize {
        let mut n = NONLINEARITY_KNOTS;
        if self.stage.has_center_bias() {
            n += CENTER_BIAS_KNOTS + 1;
        }
        if self.stage.has_blur() {
            n += 1;
        }
        n
    }

    /// Unconstrained coordinates of a parameter set (extended to this stage).
    pub fn params_to_theta(&self, params: &CalibrationParams) -> Vec<f64> {
        let p = params.extend_to(self.stage);
        let y = p.nonlinearity.values();
        let mut theta = Vec::with_capacity(self.dimension());
        theta.push((y[0] - Y_FLOOR).max(0.0).sqrt());
        for w in y.windows(2) {
            theta.push((w[1] - w[0]).max(0.0).sqrt());
        }
        if let Some(cb) = &p.center_bias {
            theta.extend(cb.profile.values().iter().map(|v| (v - Y_FLOOR).max(0.0).sqrt()));
            theta.push(cb.alpha.ln());
        }
        if let Some(s) = p.blur_sigma {
            theta.push(s.sqrt());
        }
        theta
    }

    pub fn theta_to_params(&self, theta: &[f64]) -> CalibrationParams {
        let mut acc = Y_FLOOR;
        let nonlin: Vec<f64> = theta[..NONLINEARITY_KNOTS]
            .iter()
            .map(|t| {
                acc += t * t;
                acc
            })
            .collect();
        let mut k = NONLINEARITY_KNOTS;
        let center_bias = self.stage.has_center_bias().then(|| {
            let profile = theta[k..k + CENTER_BIAS_KNOTS]
                .iter()
                .map(|t| Y_FLOOR + t * t)
                .collect();
            let alpha = theta[k + CENTER_BIAS_KNOTS].exp();
            k += CENTER_BIAS_KNOTS + 1;
            CenterBias {
                profile: PiecewiseLinear { values: profile },
                alpha,
            }
        });
        let blur_sigma = self.stage.has_blur().then(|| theta[k] * theta[k]);
        CalibrationParams {
            stage: self.stage,
            nonlinearity: PiecewiseLinear { values: nonlin },
            center_bias,
            blur_sigma,
        }
    }

    /// Mean log-likelihood in bits per fixation relative to uniform.
    pub fn log_likelihood(&self, params: &CalibrationParams) -> f64 {
        -self.value_and_gradient(&self.params_to_theta(params)).0
    }

    /// Negative bits/fixation and its gradient.
    pub fn value_and_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let params = self.theta_to_params(theta);
        let parts: Vec<(f64, Vec<f64>)> = self
            .images
            .par_iter()
            .map(|img| self.image_terms(img, &params))
            .collect();
        let mut nats = 0.0;
        let mut dy = vec![0.0; self.dimension()];
        for (v, g) in parts {
            nats += v;
            for (a, b) in dy.iter_mut().zip(&g) {
                *a += b;
            }
        }
        // dy holds derivatives w.r.t. (y_nonlin, y_cb, α, σ); map to θ
        let mut grad = vec![0.0; theta.len()];
        let mut suffix = 0.0;
        for i in (0..NONLINEARITY_KNOTS).rev() {
            suffix += dy[i];
            grad[i] = 2.0 * theta[i] * suffix;
        }
        let mut k = NONLINEARITY_KNOTS;
        if self.stage.has_center_bias() {
            for j in 0..CENTER_BIAS_KNOTS {
                grad[k + j] = 2.0 * theta[k + j] * dy[k + j];
            }
            let alpha = theta[k + CENTER_BIAS_KNOTS].exp();
            grad[k + CENTER_BIAS_KNOTS] = alpha * dy[k + CENTER_BIAS_KNOTS];
            k += CENTER_BIAS_KNOTS + 1;
        }
        if self.stage.has_blur() {
            grad[k] = 2.0 * theta[k] * dy[k];
        }
        let scale = -1.0 / (self.total * std::f64::consts::LN_2);
        (nats * scale, grad.into_iter().map(|g| g * scale).collect())
    }

    /// Log-likelihood of one image in nats (uniform offset included) and its
    /// derivatives with respect to the constrained parameters.
    fn image_terms(&self, img: &ImageData, params: &CalibrationParams) -> (f64, Vec<f64>) {
        let n = img.width * img.height;
        let nonlin = &params.nonlinearity;

        // blur and its σ-derivative
        let (s, ds) = match params.blur_sigma {
            Some(sigma) if sigma > 0.0 => {
                let (k, dk) = gaussian_kernel_with_derivative(sigma);
                let bx = convolve_axis(&img.map, &k, true, Boundary::Reflect);
                let blurred = convolve_axis(&bx, &k, false, Boundary::Reflect);
                let dbx = convolve_axis(&img.map, &dk, true, Boundary::Reflect);
                let mut deriv = convolve_axis(&dbx, &k, false, Boundary::Reflect);
                let d2 = convolve_separable(&img.map, &k, &dk, Boundary::Reflect);
                for (a, b) in deriv.as_mut_slice().iter_mut().zip(d2.as_slice()) {
                    *a += b;
                }
                let mut s = blurred.into_vec();
                let mut ds = deriv.into_vec();
                for (v, d) in s.iter_mut().zip(ds.iter_mut()) {
                    if *v < 0.0 || *v > 1.0 {
                        *v = v.clamp(0.0, 1.0);
                        *d = 0.0;
                    }
                }
                (s, Some(ds))
            }
            Some(_) => (img.map.as_slice().to_vec(), Some(vec![0.0; n])),
            None => (img.map.as_slice().to_vec(), None),
        };

        let v: Vec<f64> = s.iter().map(|&x| nonlin.eval_clamped(x)).collect();
        let (w, dist): (Vec<f64>, Vec<(f64, f64)>) = match &params.center_bias {
            Some(cb) => (0..n)
                .map(|i| {
                    let (d, dd) = img.geometry.distance(i, cb.alpha);
                    (cb.profile.eval_clamped(d), (d, dd))
                })
                .unzip(),
            None => (vec![1.0; n], Vec::new()),
        };
        let u: Vec<f64> = v.iter().zip(&w).map(|(a, b)| a * b).collect();
        let z: f64 = u.iter().sum();

        let mut nats = img.count * (img.log_pixels - z.ln());
        for &(i, c) in &img.fixated {
            nats += c * u[i].ln();
        }

        // r_i = ∂LL/∂u_i
        let mut r = vec![-img.count / z; n];
        for &(i, c) in &img.fixated {
            r[i] += c / u[i];
        }

        let mut grad = vec![0.0; self.dimension()];
        for i in 0..n {
            let (seg, t) = nonlin.locate(s[i]);
            let rw = r[i] * w[i];
            grad[seg] += rw * (1.0 - t);
            grad[seg + 1] += rw * t;
        }
        let mut k = NONLINEARITY_KNOTS;
        if let Some(cb) = &params.center_bias {
            let mut d_alpha = 0.0;
            for i in 0..n {
                let (d, dd) = dist[i];
                let (seg, t) = cb.profile.locate(d);
                let rv = r[i] * v[i];
                grad[k + seg] += rv * (1.0 - t);
                grad[k + seg + 1] += rv * t;
                d_alpha += rv * cb.profile.slope(d) * dd;
            }
            grad[k + CENTER_BIAS_KNOTS] = d_alpha;
            k += CENTER_BIAS_KNOTS + 1;
        }
        if let Some(ds) = ds {
            grad[k] = (0..n)
                .map(|i| r[i] * w[i] * nonlin.slope(s[i]) * ds[i])
                .sum();
        }
        (nats, grad)
    }
}

/// Result of fitting one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub params: CalibrationParams,
    /// Achieved bits/fixation relative to uniform.
    pub log_likelihood: f64,
    pub iterations: usize,
}

/// Fitted parameters for `stage`, plus every earlier stage in order.
///
/// Stages are fitted in sequence, each warm-started from the previous
/// optimum extended with neutral new factors, so the achieved likelihoods
/// are nondecreasing. The blur stage additionally starts from `σ = 1` and
/// keeps whichever of that optimum and the unblurred optimum is better.
pub fn optimize_calibration(
    maps: &[SaliencyMap],
    trains: &[FixationTrain],
    stage: Stage,
    config: &OptimizerConfig,
) -> Result<Vec<StageFit>> {
    let mut fits: Vec<StageFit> = Vec::new();
    for s in Stage::ALL.into_iter().filter(|s| *s <= stage) {
        let objective = CalibrationObjective::new(maps, trains, s)?;
        let fit = match fits.last() {
            None => {
                let identity = CalibrationParams::initial(Stage::Nonlin);
                let mut start = objective.params_to_theta(&identity);
                // θ_0 = 0 is a stationary point of the squared parameterization
                start[0] = 1e-2;
                let fitted = run(&objective, start, config)?;
                let baseline = StageFit {
                    log_likelihood: objective.log_likelihood(&identity),
                    params: identity,
                    iterations: 0,
                };
                better(fitted, baseline)
            }
            Some(prev) => {
                let warm = prev.params.extend_to(s);
                let start = if s.has_blur() {
                    let mut p = warm.clone();
                    p.blur_sigma = Some(1.0);
                    p
                } else {
                    warm.clone()
                };
                let fitted = run(&objective, objective.params_to_theta(&start), config)?;
                let carried = StageFit {
                    log_likelihood: objective.log_likelihood(&warm),
                    params: warm,
                    iterations: 0,
                };
                better(fitted, carried)
            }
        };
        fits.push(fit);
    }
    Ok(fits)
}

fn better(a: StageFit, b: StageFit) -> StageFit {
    if a.log_likelihood >= b.log_likelihood {
        a
    } else {
        b
    }
}

fn run(objective: &CalibrationObjective, start: Vec<f64>, config: &OptimizerConfig) -> Result<StageFit> {
    let m = minimize(|t| objective.value_and_gradient(t), start, config)?;
    if !m.value.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(StageFit {
        params: objective.theta_to_params(&m.x),
        log_likelihood: -m.value,
        iterations: m.iterations,
    })
}

/// Stage-1 likelihood and the gains from adding center bias and blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributions {
    pub ll_nonlin: f64,
    pub delta_center_bias: f64,
    pub delta_blur: f64,
    pub stages: Vec<StageFit>,
}

impl Contributions {
    pub fn final_ll(&self) -> f64 {
        self.ll_nonlin + self.delta_center_bias + self.delta_blur
    }

    pub fn final_params(&self) -> &CalibrationParams {
        &self.stages.last().expect("three stages").params
    }
}

pub fn contribution_breakdown(
    maps: &[SaliencyMap],
    trains: &[FixationTrain],
    config: &OptimizerConfig,
) -> Result<Contributions> {
    let stages = optimize_calibration(maps, trains, Stage::Blur, config)?;
    let ll: Vec<f64> = stages.iter().map(|s| s.log_likelihood).collect();
    Ok(Contributions {
        ll_nonlin: ll[0],
        delta_center_bias: ll[1] - ll[0],
        delta_blur: ll[2] - ll[1],
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::log_likelihood_bits;
    use crate::domain::Fixation;

    fn smap(image: &str, g: Grid) -> SaliencyMap {
        SaliencyMap {
            image_id: image.into(),
            model_id: "m".into(),
            values: g,
        }
    }

    #[test]
    fn rescale_is_global_and_affine() {
        let a = smap("a", Grid::from_rows(&[vec![0.0, 2.0]]).unwrap());
        let b = smap("b", Grid::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let r = global_rescale(&[a, b]).unwrap();
        assert_eq!(r[0].values.as_slice(), &[0.0, 1.0]);
        assert_eq!(r[1].values.as_slice(), &[0.5, 1.0]);

        let c = smap("c", Grid::from_rows(&[vec![0.0, 0.3, 1.0]]).unwrap());
        assert_eq!(global_rescale(&[c.clone()]).unwrap()[0], c);

        let flat = smap("d", Grid::filled(2, 2, 3.0));
        assert!(matches!(global_rescale(&[flat]), Err(Error::ConstantModel(_))));
    }

    #[test]
    fn nonlinearity_examples() {
        let g = Grid::from_rows(&[vec![0.0, 0.1, 0.55], vec![0.999, 1.0, 0.5]]).unwrap();
        let id = apply_nonlinearity(&g, &PiecewiseLinear::identity(NONLINEARITY_KNOTS)).unwrap();
        for (a, b) in id.as_slice().iter().zip(g.as_slice()) {
            assert!((a - (b + Y_FLOOR)).abs() < 1e-12);
        }
        let c = apply_nonlinearity(&g, &PiecewiseLinear::constant(5, 0.3)).unwrap();
        assert!(c.as_slice().iter().all(|&v| v == 0.3));
        let f = PiecewiseLinear::new(vec![0.1, 0.2, 0.8]).unwrap();
        assert!((f.eval(0.75).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(f.eval(1.5), Err(Error::OutOfSupport(1.5)));
        let bad = Grid::from_rows(&[vec![-0.5, 0.5]]).unwrap();
        assert!(apply_nonlinearity(&bad, &f).is_err());
    }

    #[test]
    fn center_bias_examples() {
        let frame = ImageFrame::new("a", 7, 5);
        let w = center_bias_weight(&frame, &CenterBias::flat());
        assert!(w.as_slice().iter().all(|&v| v == 1.0));

        let decreasing = CenterBias {
            profile: PiecewiseLinear::new((0..12).map(|i| 2.0 - i as f64 / 11.0).collect()).unwrap(),
            alpha: 1.0,
        };
        let w = center_bias_weight(&frame, &decreasing);
        assert!(w.get(3, 2) > w.get(0, 0));

        // direct per-pixel formula
        let frame = ImageFrame::new("a", 5, 5);
        let cb = CenterBias {
            profile: PiecewiseLinear::new((0..12).map(|i| i as f64 / 11.0).collect()).unwrap(),
            alpha: 4.0,
        };
        let w = center_bias_weight(&frame, &cb);
        let dmax = (4.0f64 + 4.0 * 4.0).sqrt();
        for y in 0..5 {
            for x in 0..5 {
                let d = ((x as f64 - 2.0).powi(2) + 4.0 * (y as f64 - 2.0).powi(2)).sqrt() / dmax;
                assert!((w.get(x, y) - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_neutral_factors() {
        let frame = ImageFrame::new("a", 6, 4);
        let flat = smap("a", Grid::filled(6, 4, 0.4));
        let d = build_model_density(&flat, &CalibrationParams::initial(Stage::Nonlin), &frame).unwrap();
        assert!(d.pmf().as_slice().iter().all(|&v| (v - 1.0 / 24.0).abs() < 1e-15));

        let map = smap("a", Grid::from_fn(6, 4, |x, y| ((x * 3 + y * 7) % 10) as f64 / 9.0));
        let nl = CalibrationParams {
            stage: Stage::Nonlin,
            nonlinearity: PiecewiseLinear::new((0..20).map(|i| 0.1 + (i * i) as f64).collect()).unwrap(),
            center_bias: None,
            blur_sigma: None,
        };
        let cb = nl.extend_to(Stage::CenterBias);
        let blur = cb.extend_to(Stage::Blur);
        let a = build_model_density(&map, &nl, &frame).unwrap();
        let b = build_model_density(&map, &cb, &frame).unwrap();
        let c = build_model_density(&map, &blur, &frame).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn params_json_schema() {
        let p = CalibrationParams::initial(Stage::Blur);
        let j = serde_json::to_value(&p).unwrap();
        assert_eq!(j["stage"], "nonlin+cb+blur");
        assert_eq!(j["nonlin_y"].as_array().unwrap().len(), 20);
        assert_eq!(j["cb_y"].as_array().unwrap().len(), 12);
        assert_eq!(j["alpha"], 1.0);
        assert_eq!(j["sigma"], 1.0);
        let back: CalibrationParams = serde_json::from_value(j).unwrap();
        assert_eq!(back, p);
        let nl = serde_json::to_value(CalibrationParams::initial(Stage::Nonlin)).unwrap();
        assert!(nl.get("cb_y").is_none() && nl.get("sigma").is_none());
    }

    fn small_problem() -> (Vec<SaliencyMap>, Vec<FixationTrain>) {
        let maps = vec![
            smap("a", Grid::from_fn(9, 7, |x, y| ((x * 5 + y * 3) % 9) as f64 / 8.0)),
            smap("b", Grid::from_fn(9, 7, |x, y| ((x + 2 * y) % 7) as f64 / 6.0)),
        ];
        let pts = [(1.0, 1.0), (4.0, 3.0), (4.2, 3.1), (8.0, 6.0), (5.0, 2.0), (3.0, 3.0)];
        let trains = vec![
            FixationTrain::new("a", "s1", pts.iter().enumerate().map(|(i, &(x, y))| Fixation::new(x, y, i as f64)).collect()),
            FixationTrain::new("b", "s1", pts.iter().rev().enumerate().map(|(i, &(x, y))| Fixation::new(x, y, i as f64)).collect()),
        ];
        (maps, trains)
    }

    #[test]
    fn objective_matches_pipeline_likelihood() {
        let (maps, trains) = small_problem();
        let obj = CalibrationObjective::new(&maps, &trains, Stage::Blur).unwrap();
        let mut theta: Vec<f64> = (0..obj.dimension()).map(|i| 0.3 + 0.05 * (i % 7) as f64).collect();
        let n = theta.len();
        theta[n - 1] = 1.1;
        let params = obj.theta_to_params(&theta);
        let (f, _) = obj.value_and_gradient(&theta);
        let mut total = 0.0;
        let mut count = 0.0;
        for (m, t) in maps.iter().zip(&trains) {
            let frame = ImageFrame::new(m.image_id.clone(), 9, 7);
            let d = build_model_density(m, &params, &frame).unwrap();
            total += log_likelihood_bits(&d, &[t]).unwrap() * t.len() as f64;
            count += t.len() as f64;
        }
        assert!((-f - total / count).abs() < 1e-12);
        // round trip through θ
        let back = obj.params_to_theta(&params);
        for (a, b) in back.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (maps, trains) = small_problem();
        for stage in Stage::ALL {
            let obj = CalibrationObjective::new(&maps, &trains, stage).unwrap();
            let theta: Vec<f64> = (0..obj.dimension()).map(|i| 0.2 + 0.07 * (i % 5) as f64).collect();
            let (_, g) = obj.value_and_gradient(&theta);
            let h = 1e-5;
            let fd: Vec<f64> = (0..theta.len())
                .map(|k| {
                    let mut p = theta.clone();
                    let mut m = theta.clone();
                    p[k] += h;
                    m[k] -= h;
                    (obj.value_and_gradient(&p).0 - obj.value_and_gradient(&m).0) / (2.0 * h)
                })
                .collect();
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 1e-4, "{stage:?}: {err} / {norm}");
        }
    }

    #[test]
    fn stages_are_nested() {
        let (maps, trains) = small_problem();
        let c = contribution_breakdown(&maps, &trains, &OptimizerConfig::default()).unwrap();
        assert!(c.delta_center_bias >= -1e-6);
        assert!(c.delta_blur >= -1e-6);
        assert!(c.stages[0].params.nonlinearity.is_monotone());
        assert!((c.final_ll() - c.stages[2].log_likelihood).abs() < 1e-9);
        let identity = CalibrationObjective::new(&maps, &trains, Stage::Nonlin)
            .unwrap()
            .log_likelihood(&CalibrationParams::initial(Stage::Nonlin));
        assert!(c.ll_nonlin >= identity);
    }
}
