//! Per-pixel probability mass functions and the primitives every model is
//! built from: normalization, separable Gaussian blur, kernel density
//! estimation and likelihood scoring in bits per fixation.

use crate::domain::{Fixation, FixationTrain, ImageFrame};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Tolerance on the total mass of a [`DensityGrid`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Probability mass per pixel of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    image_id: String,
    pmf: Grid,
}

impl DensityGrid {
    /// Wraps a grid that already is a pmf, checking the invariants.
    pub fn from_pmf(image_id: impl Into<String>, pmf: Grid) -> Result<Self> {
        check_nonnegative(&pmf)?;
        let total = pmf.sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidParameter(format!(
                "pmf sums to {total}, expected 1"
            )));
        }
        Ok(DensityGrid {
            image_id: image_id.into(),
            pmf,
        })
    }

    pub fn uniform(frame: &ImageFrame) -> Self {
        let n = frame.pixel_count() as f64;
        DensityGrid {
            image_id: frame.image_id.clone(),
            pmf: Grid::filled(frame.width, frame.height, 1.0 / n),
        }
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn pmf(&self) -> &Grid {
        &self.pmf
    }

    pub fn width(&self) -> usize {
        self.pmf.width()
    }

    pub fn height(&self) -> usize {
        self.pmf.height()
    }

    pub fn frame(&self) -> ImageFrame {
        ImageFrame::new(self.image_id.clone(), self.width(), self.height())
    }

    /// Mass at the pixel nearest to `(x, y)`.
    pub fn at(&self, x: f64, y: f64) -> f64 {
        let (px, py) = self.frame().snap(x, y);
        self.pmf.get(px, py)
    }

    pub fn into_grid(self) -> Grid {
        self.pmf
    }

    pub fn with_image_id(mut self, image_id: impl Into<String>) -> Self {
        self.image_id = image_id.into();
        self
    }
}

fn check_nonnegative(g: &Grid) -> Result<()> {
    for y in 0..g.height() {
        for x in 0..g.width() {
            let v = g.get(x, y);
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { x, y });
            }
            if v < 0.0 {
                return Err(Error::NegativeValue { x, y, value: v });
            }
        }
    }
    Ok(())
}

/// Scales a nonnegative grid to unit mass.
pub fn normalize_to_pmf(image_id: impl Into<String>, values: &Grid) -> Result<DensityGrid> {
    check_nonnegative(values)?;
    let total = values.sum();
    if total <= 0.0 {
        return Err(Error::AllZero);
    }
    Ok(DensityGrid {
        image_id: image_id.into(),
        pmf: values.map(|v| v / total),
    })
}

/// How a convolution treats samples outside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Half-sample symmetric mirroring (`d c b a | a b c d | d c b a`).
    /// Conserves mass for symmetric kernels of any width.
    Reflect,
    /// Samples outside the grid are zero; mass leaving the frame is lost.
    Zero,
}

/// Half-sample symmetric reflection of `i` into `0..n`.
#[inline]
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Kernel half-width for a given standard deviation: taps span `±ceil(4σ)`.
pub fn kernel_radius(sigma: f64) -> usize {
    (4.0 * sigma).ceil() as usize
}

/// Sampled Gaussian taps at offsets `-R..=R`, renormalized to sum to 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    gaussian_kernel_with_derivative(sigma).0
}

/// Taps and their derivative with respect to `sigma` (radius held fixed).
pub fn gaussian_kernel_with_derivative(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    if sigma <= 0.0 {
        return (vec![1.0], vec![0.0]);
    }
    let r = kernel_radius(sigma) as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let taps: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let s3 = sigma * sigma * sigma;
    let mean_sq: f64 = (-r..=r)
        .zip(&taps)
        .map(|(j, k)| k * (j * j) as f64)
        .sum();
    let deriv = (-r..=r)
        .zip(&taps)
        .map(|(j, k)| k * ((j * j) as f64 - mean_sq) / s3)
        .collect();
    (taps, deriv)
}

/// 1-D convolution of every row (`along_x`) or column with a centred kernel.
pub(crate) fn convolve_axis(g: &Grid, kernel: &[f64], along_x: bool, boundary: Boundary) -> Grid {
    let (w, h) = (g.width(), g.height());
    let r = (kernel.len() / 2) as isize;
    let n = if along_x { w } else { h };
    let src = g.as_slice();
    let mut out = Grid::zeros(w, h);
    let dst = out.as_mut_slice();
    for y in 0..h {
        for x in 0..w {
            let pos = if along_x { x } else { y } as isize;
            let mut acc = 0.0;
            for (t, k) in kernel.iter().enumerate() {
                let i = pos + t as isize - r;
                let j = if i >= 0 && (i as usize) < n {
                    i as usize
                } else {
                    match boundary {
                        Boundary::Zero => continue,
                        Boundary::Reflect => reflect_index(i, n),
                    }
                };
                let v = if along_x { src[y * w + j] } else { src[j * w + x] };
                acc += k * v;
            }
            dst[y * w + x] = acc;
        }
    }
    out
}

/// Separable convolution: `kx` along rows, then `ky` along columns.
pub fn convolve_separable(g: &Grid, kx: &[f64], ky: &[f64], boundary: Boundary) -> Grid {
    let tmp = convolve_axis(g, kx, true, boundary);
    convolve_axis(&tmp, ky, false, boundary)
}

/// Gaussian blur with standard deviation `sigma` pixels, reflecting at the
/// boundary so that total mass is preserved. `sigma == 0` is the identity.
pub fn gaussian_blur(g: &Grid, sigma: f64) -> Result<Grid> {
    gaussian_blur_with(g, sigma, Boundary::Reflect)
}

pub fn gaussian_blur_with(g: &Grid, sigma: f64, boundary: Boundary) -> Result<Grid> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let k = gaussian_kernel(sigma);
    Ok(convolve_separable(g, &k, &k, boundary))
}

/// Kernel density estimator settings. The boundary is always
/// truncate-renormalize: mass leaving the frame is dropped and the result is
/// renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeSpec {
    pub kernel_sigma: f64,
}

impl KdeSpec {
    pub fn new(kernel_sigma: f64) -> Result<Self> {
        if !(kernel_sigma > 0.0) || !kernel_sigma.is_finite() {
            return Err(Error::InvalidKernel(kernel_sigma));
        }
        Ok(KdeSpec { kernel_sigma })
    }
}

/// Histogram of fixations snapped to pixels.
pub fn fixation_histogram<'a>(
    frame: &ImageFrame,
    points: impl IntoIterator<Item = &'a Fixation>,
) -> Grid {
    let mut h = Grid::zeros(frame.width, frame.height);
    for p in points {
        let (px, py) = frame.snap(p.x, p.y);
        let i = h.index(px, py);
        h.as_mut_slice()[i] += 1.0;
    }
    h
}

/// Gaussian kernel density estimate of the points on the frame's raster.
pub fn kde_density(frame: &ImageFrame, points: &[Fixation], spec: KdeSpec) -> Result<DensityGrid> {
    kde_from_histogram(frame, &fixation_histogram(frame, points), spec)
}

pub(crate) fn kde_from_histogram(frame: &ImageFrame, hist: &Grid, spec: KdeSpec) -> Result<DensityGrid> {
    if hist.sum() <= 0.0 {
        return Err(Error::EmptyPoints);
    }
    let blurred = gaussian_blur_with(hist, spec.kernel_sigma, Boundary::Zero)?;
    match normalize_to_pmf(frame.image_id.clone(), &blurred) {
        // every tap underflowed; only happens for absurdly small sigma relative to pixel spacing
        Err(Error::AllZero) => normalize_to_pmf(frame.image_id.clone(), hist),
        other => other,
    }
}

/// Sum of `log2 pmf + log2(W·H)` over all fixations of the trains, and the
/// fixation count.
pub fn sum_log2_at_fixations(model: &DensityGrid, trains: &[&FixationTrain]) -> Result<(f64, usize)> {
    let frame = model.frame();
    let offset = (frame.pixel_count() as f64).log2();
    let mut total = 0.0;
    let mut n = 0;
    for tr in trains {
        if tr.image_id != model.image_id {
            return Err(Error::ImageMismatch {
                expected: model.image_id.clone(),
                found: tr.image_id.clone(),
            });
        }
        for (index, f) in tr.fixations.iter().enumerate() {
            let (px, py) = frame.snap(f.x, f.y);
            let p = model.pmf.get(px, py);
            if !(p > 0.0) {
                return Err(Error::ZeroDensityAtFixation {
                    image_id: tr.image_id.clone(),
                    subject_id: tr.subject_id.clone(),
                    index,
                    px,
                    py,
                });
            }
            total += p.log2() + offset;
            n += 1;
        }
    }
    Ok((total, n))
}

/// Mean log-likelihood in bits per fixation relative to the uniform model.
pub fn log_likelihood_bits(model: &DensityGrid, trains: &[&FixationTrain]) -> Result<f64> {
    let (total, n) = sum_log2_at_fixations(model, trains)?;
    if n == 0 {
        return Err(Error::EmptyList("fixations"));
    }
    Ok(total / n as f64)
}

/// Sample-mean estimate of the expected log-likelihood ratio of `a` over `b`
/// in bits per fixation.
pub fn ellr(a: &DensityGrid, b: &DensityGrid, trains: &[&FixationTrain]) -> Result<f64> {
    a.pmf.check_shape(&b.pmf)?;
    if a.image_id != b.image_id {
        return Err(Error::ImageMismatch {
            expected: a.image_id.clone(),
            found: b.image_id.clone(),
        });
    }
    let (la, n) = sum_log2_at_fixations(a, trains)?;
    let (lb, _) = sum_log2_at_fixations(b, trains)?;
    if n == 0 {
        return Err(Error::EmptyList("fixations"));
    }
    Ok((la - lb) / n as f64)
}

/// Share of the possible information gain (gold over baseline) that a model
/// achieves, in percent.
pub fn percent_explained(model_ll: f64, baseline_ll: f64, gold_ll: f64) -> Result<f64> {
    if !(gold_ll > baseline_ll) {
        return Err(Error::DegenerateBounds {
            baseline: baseline_ll,
            gold: gold_ll,
        });
    }
    Ok(100.0 * (model_ll - baseline_ll) / (gold_ll - baseline_ll))
}
