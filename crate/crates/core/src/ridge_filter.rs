//! Multi-scale Meijering ridge filter.
//!
//! Second derivatives come from separable Gaussian-derivative kernels,
//! scale-normalized by `sigma^2`. Each pixel's 2x2 Hessian is diagonalized in
//! closed form and scored with `R = 0` if `lambda2 > 0`, otherwise
//! `sqrt(lambda1^2 + lambda2^2)`, where `lambda2` is the eigenvalue of larger
//! magnitude. Bright ridges on a dark background therefore respond and dark
//! ridges do not. Borders use half-sample mirror reflection.

use crate::error::{Error, Result};
use crate::imaging::GrayImage;

/// Sampled 1-D Gaussian derivative of order 0, 1 or 2, centred at index `radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel1d {
    pub order: u8,
    pub radius: usize,
    pub taps: Vec<f64>,
}

impl Kernel1d {
    /// Tap at signed offset `i`.
    pub fn at(&self, i: isize) -> f64 {
        self.taps[(i + self.radius as isize) as usize]
    }

    fn offsets(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let r = self.radius as f64;
        self.taps.iter().enumerate().map(move |(j, &k)| (j as f64 - r, k))
    }

    /// `sum_i i^n k[i]`.
    pub fn moment(&self, n: i32) -> f64 {
        self.offsets().map(|(i, k)| i.powi(n) * k).sum()
    }
}

/// Builds a truncated (radius `ceil(3 sigma)`), moment-corrected kernel.
///
/// Order 0 sums to 1. Order 1 sums to 0 with first moment -1, order 2 sums to
/// 0 with second moment 2, so that convolving `x` (resp. `x^2 / 2`) yields
/// exactly 1 away from the borders.
pub fn gaussian_derivative_kernel(sigma: f64, order: u8) -> Result<Kernel1d> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    if order > 2 {
        return Err(Error::Domain(format!("derivative order {order} not supported")));
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let s2 = sigma * sigma;
    let offsets: Vec<f64> = (0..=2 * radius).map(|j| j as f64 - radius as f64).collect();
    let g: Vec<f64> = offsets.iter().map(|&i| (-i * i / (2.0 * s2)).exp()).collect();
    let gsum: f64 = g.iter().sum();

    let taps = match order {
        0 => g.iter().map(|v| v / gsum).collect(),
        1 => {
            let raw: Vec<f64> = offsets.iter().zip(&g).map(|(&i, &gv)| -i * gv).collect();
            let m1: f64 = offsets.iter().zip(&raw).map(|(&i, &k)| i * k).sum();
            raw.iter().map(|k| -k / m1).collect()
        }
        _ => {
            let mut raw: Vec<f64> = offsets
                .iter()
                .zip(&g)
                .map(|(&i, &gv)| (i * i / s2 - 1.0) * gv)
                .collect();
            let dc: f64 = raw.iter().sum();
            for (k, gv) in raw.iter_mut().zip(&g) {
                *k -= dc * gv / gsum;
            }
            let m2: f64 = offsets.iter().zip(&raw).map(|(&i, &k)| i * i * k).sum();
            raw.iter().map(|k| 2.0 * k / m2).collect()
        }
    };
    Ok(Kernel1d { order, radius, taps })
}

#[inline]
fn reflect(j: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = j.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// `sum_i f(x - i) k[i]` along a 1-D line read through `at`.
///
/// Derivative kernels are applied in differencing form (odd: `f(x-i) - f(x+i)`,
/// even: `f(x-i) + f(x+i) - 2 f(x)`), which drops the `f(x) * sum(k)` term
/// that is zero up to rounding. A constant line then gives exactly zero.
#[inline]
fn convolve_at(k: &Kernel1d, at: impl Fn(isize) -> f64) -> f64 {
    let r = k.radius as isize;
    match k.order {
        0 => (-r..=r).map(|i| at(-i) * k.at(i)).sum(),
        1 => (1..=r).map(|i| k.at(i) * (at(-i) - at(i))).sum(),
        _ => {
            let c = at(0);
            (1..=r).map(|i| k.at(i) * (at(-i) + at(i) - 2.0 * c)).sum()
        }
    }
}

/// `out(y, x) = sum_i f(y, x - i) k[i]`.
fn convolve_rows(src: &[f64], h: usize, w: usize, k: &Kernel1d) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = convolve_at(k, |d| row[reflect(x as isize + d, w)]);
        }
    }
    out
}

/// `out(y, x) = sum_i f(y - i, x) k[i]`.
fn convolve_cols(src: &[f64], h: usize, w: usize, k: &Kernel1d) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = convolve_at(k, |d| src[reflect(y as isize + d, h) * w + x]);
        }
    }
    out
}

/// Scale-normalized second derivatives at one scale. `x` runs along columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianField {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    pub ixx: Vec<f64>,
    pub ixy: Vec<f64>,
    pub iyy: Vec<f64>,
}

pub fn hessian_at_scale(img: &GrayImage, sigma: f64) -> Result<HessianField> {
    let g0 = gaussian_derivative_kernel(sigma, 0)?;
    let g1 = gaussian_derivative_kernel(sigma, 1)?;
    let g2 = gaussian_derivative_kernel(sigma, 2)?;
    let (h, w) = (img.height(), img.width());
    let src = img.data();

    let rows_g0 = convolve_rows(src, h, w, &g0);
    let rows_g1 = convolve_rows(src, h, w, &g1);
    let rows_g2 = convolve_rows(src, h, w, &g2);

    let s2 = sigma * sigma;
    let scale = |v: Vec<f64>| v.into_iter().map(|x| x * s2).collect::<Vec<_>>();
    Ok(HessianField {
        height: h,
        width: w,
        sigma,
        ixx: scale(convolve_cols(&rows_g2, h, w, &g0)),
        ixy: scale(convolve_cols(&rows_g1, h, w, &g1)),
        iyy: scale(convolve_cols(&rows_g0, h, w, &g2)),
    })
}

/// Eigenvalues of a symmetric 2x2 matrix, ordered so `|lambda1| <= |lambda2|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenPair {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl EigenPair {
    /// Meijering score for this pixel.
    pub fn response(&self) -> f64 {
        if self.lambda2 > 0.0 {
            0.0
        } else {
            self.lambda1.hypot(self.lambda2)
        }
    }
}

pub fn eigenvalues_2x2(ixx: f64, ixy: f64, iyy: f64) -> Result<EigenPair> {
    if !(ixx.is_finite() && ixy.is_finite() && iyy.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite Hessian entries ({ixx}, {ixy}, {iyy})"
        )));
    }
    Ok(eigen_unchecked(ixx, ixy, iyy))
}

#[inline]
fn eigen_unchecked(ixx: f64, ixy: f64, iyy: f64) -> EigenPair {
    let mean = 0.5 * (ixx + iyy);
    let radius = (0.5 * (ixx - iyy)).hypot(ixy);
    let (a, b) = (mean + radius, mean - radius);
    let (lambda1, lambda2) = if a.abs() < b.abs() || (a.abs() == b.abs() && a <= b) {
        (a, b)
    } else {
        (b, a)
    };
    EigenPair { lambda1, lambda2 }
}

/// Per-pixel nonnegative filter response.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ResponseMap {
    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// The response as an image, divided by its maximum (all zeros stay zero).
    pub fn to_display_image(&self) -> GrayImage {
        let m = self.max();
        let data = if m > 0.0 {
            self.data.iter().map(|v| v / m).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        GrayImage::new(self.height, self.width, data).expect("sizes agree")
    }

    /// The raw response as an image without rescaling (values may exceed 1).
    pub fn to_image_unclamped(&self) -> GrayImage {
        GrayImage::new(self.height, self.width, self.data.clone()).expect("sizes agree")
    }
}

pub fn response_from_hessian(field: &HessianField) -> ResponseMap {
    let data = field
        .ixx
        .iter()
        .zip(&field.ixy)
        .zip(&field.iyy)
        .map(|((&a, &b), &c)| eigen_unchecked(a, b, c).response())
        .collect();
    ResponseMap {
        height: field.height,
        width: field.width,
        data,
        scales: vec![field.sigma],
    }
}

pub fn meijering_response(img: &GrayImage, sigma: f64) -> Result<ResponseMap> {
    let field = hessian_at_scale(img, sigma)?;
    if let Some(bad) = [&field.ixx, &field.ixy, &field.iyy]
        .iter()
        .flat_map(|p| p.iter())
        .find(|v| !v.is_finite())
    {
        return Err(Error::Domain(format!("non-finite Hessian entry {bad}")));
    }
    Ok(response_from_hessian(&field))
}

/// Pointwise maximum of the single-scale responses.
pub fn multiscale_response(img: &GrayImage, scales: &[f64]) -> Result<ResponseMap> {
    let (first, rest) = scales
        .split_first()
        .ok_or_else(|| Error::Config("at least one filter scale is required".into()))?;
    let mut acc = meijering_response(img, *first)?;
    for &s in rest {
        let r = meijering_response(img, s)?;
        for (a, b) in acc.data.iter_mut().zip(&r.data) {
            *a = a.max(*b);
        }
    }
    acc.scales = scales.to_vec();
    Ok(acc)
}
