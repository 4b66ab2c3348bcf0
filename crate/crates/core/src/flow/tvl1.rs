//! Primal-dual TV-L1 optical flow with a coarse-to-fine pyramid.
//!
//! At each pyramid level the second image is warped towards the first using
//! the current flow, the brightness-constancy residual is linearised around
//! it, and the convex TV-L1 problem is solved by alternating a pointwise
//! thresholding step on the data term with a projected dual ascent on the
//! total-variation term. Intensities are processed on a 0–255 scale so the
//! data weight keeps its customary meaning.

use serde::{Deserialize, Serialize};

use super::{FlowField, GrayFrame};
use crate::error::{Error, Result};

/// Smallest image side accepted by [`tvl1_flow`]; pyramid levels stop here.
pub const MIN_FLOW_SIZE: usize = 16;

const PRESMOOTH_SIGMA: f32 = 0.8;
const GRAD_IS_ZERO: f32 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvL1Params {
    /// Weight of the L1 data term.
    pub lambda: f32,
    /// Coupling between the primal flow and its auxiliary variable.
    pub theta: f32,
    /// Dual step size.
    pub tau: f32,
    /// Maximum number of pyramid levels.
    pub scales: usize,
    /// Downsampling factor between consecutive levels.
    pub zoom: f32,
    /// Outer warps per level.
    pub warps: usize,
    /// Maximum inner iterations per warp.
    pub iterations: usize,
    /// Inner loop stops once the mean squared flow update drops below ε².
    pub epsilon: f32,
    /// 3×3 median filter on the flow after each warp.
    pub median_filter: bool,
}

impl Default for TvL1Params {
    fn default() -> Self {
        TvL1Params {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            scales: 5,
            zoom: 0.5,
            warps: 5,
            iterations: 300,
            epsilon: 0.01,
            median_filter: true,
        }
    }
}

impl TvL1Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("tvl1: {msg}")));
        if !(self.lambda > 0.0 && self.theta > 0.0 && self.epsilon > 0.0) {
            return bad("lambda, theta and epsilon must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau must lie in (0, 0.25]");
        }
        if !(self.zoom > 0.0 && self.zoom < 1.0) {
            return bad("zoom must lie in (0, 1)");
        }
        if self.scales == 0 || self.warps == 0 || self.iterations == 0 {
            return bad("scales, warps and iterations must be at least 1");
        }
        Ok(())
    }
}

/// Energies and iteration counts recorded while solving one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTrace {
    pub height: usize,
    pub width: usize,
    /// TV + λ·L1 energy after each warp (on the 0–255 intensity scale).
    pub energies: Vec<f64>,
    pub iterations: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    h: usize,
    w: usize,
}

impl Dims {
    fn len(self) -> usize {
        self.h * self.w
    }
}

/// Dense TV-L1 flow from `onset` to `apex`.
pub fn tvl1_flow(onset: &GrayFrame, apex: &GrayFrame, params: &TvL1Params) -> Result<FlowField> {
    tvl1_flow_traced(onset, apex, params).map(|(flow, _)| flow)
}

/// [`tvl1_flow`] plus a per-level trace, coarsest level first.
pub fn tvl1_flow_traced(
    onset: &GrayFrame,
    apex: &GrayFrame,
    params: &TvL1Params,
) -> Result<(FlowField, Vec<LevelTrace>)> {
    params.validate()?;
    if onset.dims() != apex.dims() {
        return Err(Error::Data(format!(
            "flow frames differ in size: {:?} vs {:?}",
            onset.dims(),
            apex.dims()
        )));
    }
    let (h, w) = onset.dims();
    if h < MIN_FLOW_SIZE || w < MIN_FLOW_SIZE {
        return Err(Error::Data(format!(
            "flow needs frames of at least {MIN_FLOW_SIZE}x{MIN_FLOW_SIZE}, got {h}x{w}"
        )));
    }

    let scaled = |f: &GrayFrame| -> Vec<f32> { f.pixels().iter().map(|p| p * 255.0).collect() };
    let base = Dims { h, w };
    let mut pyramid = vec![(
        base,
        gaussian_blur(&scaled(onset), base, PRESMOOTH_SIGMA),
        gaussian_blur(&scaled(apex), base, PRESMOOTH_SIGMA),
    )];
    let sigma = 0.6 * (1.0 / (params.zoom * params.zoom) - 1.0).sqrt();
    while pyramid.len() < params.scales {
        let (prev, i0, i1) = pyramid.last().expect("pyramid starts non-empty");
        let next = Dims {
            h: (prev.h as f32 * params.zoom).round() as usize,
            w: (prev.w as f32 * params.zoom).round() as usize,
        };
        if next.h < MIN_FLOW_SIZE || next.w < MIN_FLOW_SIZE {
            break;
        }
        let down = |img: &[f32]| resample(&gaussian_blur(img, *prev, sigma), *prev, next);
        let level = (next, down(i0), down(i1));
        pyramid.push(level);
    }

    let coarsest = pyramid.last().expect("pyramid is non-empty").0;
    let mut u = vec![0.0; coarsest.len()];
    let mut v = vec![0.0; coarsest.len()];
    let mut traces = Vec::with_capacity(pyramid.len());
    for level in (0..pyramid.len()).rev() {
        let (dims, i0, i1) = &pyramid[level];
        traces.push(solve_level(i0, i1, *dims, &mut u, &mut v, params));
        if level > 0 {
            let finer = pyramid[level - 1].0;
            let sx = finer.w as f32 / dims.w as f32;
            let sy = finer.h as f32 / dims.h as f32;
            u = resample(&u, *dims, finer).into_iter().map(|x| x * sx).collect();
            v = resample(&v, *dims, finer).into_iter().map(|x| x * sy).collect();
        }
    }
    Ok((FlowField::new(h, w, u, v)?, traces))
}

/// TV-L1 energy of a flow between two images given on the 0–1 scale.
pub fn flow_energy(onset: &GrayFrame, apex: &GrayFrame, flow: &FlowField, lambda: f32) -> Result<f64> {
    if onset.dims() != apex.dims() || onset.dims() != (flow.height(), flow.width()) {
        return Err(Error::Data("flow energy needs matching frame and flow sizes".into()));
    }
    let dims = Dims {
        h: onset.height(),
        w: onset.width(),
    };
    let i0: Vec<f32> = onset.pixels().iter().map(|p| p * 255.0).collect();
    let i1: Vec<f32> = apex.pixels().iter().map(|p| p * 255.0).collect();
    Ok(energy(&i0, &i1, dims, flow.u(), flow.v(), lambda))
}

fn energy(i0: &[f32], i1: &[f32], dims: Dims, u: &[f32], v: &[f32], lambda: f32) -> f64 {
    let warped = warp(i1, dims, u, v);
    let (ux, uy) = forward_gradient(u, dims);
    let (vx, vy) = forward_gradient(v, dims);
    let mut total = 0.0f64;
    for i in 0..dims.len() {
        let tv = (ux[i] * ux[i] + uy[i] * uy[i]).sqrt() + (vx[i] * vx[i] + vy[i] * vy[i]).sqrt();
        total += f64::from(tv) + f64::from(lambda) * f64::from((warped[i] - i0[i]).abs());
    }
    total
}

fn solve_level(i0: &[f32], i1: &[f32], dims: Dims, u1: &mut [f32], u2: &mut [f32], p: &TvL1Params) -> LevelTrace {
    let n = dims.len();
    let l_t = p.lambda * p.theta;
    let taut = p.tau / p.theta;
    let (i1x, i1y) = centered_gradient(i1, dims);
    let mut p11 = vec![0.0f32; n];
    let mut p12 = vec![0.0f32; n];
    let mut p21 = vec![0.0f32; n];
    let mut p22 = vec![0.0f32; n];
    let mut v1 = vec![0.0f32; n];
    let mut v2 = vec![0.0f32; n];
    let mut div1 = vec![0.0f32; n];
    let mut div2 = vec![0.0f32; n];
    let mut grad = vec![0.0f32; n];
    let mut rho_c = vec![0.0f32; n];
    let mut trace = LevelTrace {
        height: dims.h,
        width: dims.w,
        energies: Vec::with_capacity(p.warps),
        iterations: Vec::with_capacity(p.warps),
    };
    let stop = p.epsilon * p.epsilon;

    for _ in 0..p.warps {
        let i1w = warp(i1, dims, u1, u2);
        let (i1wx, i1wy) = warp_gradient(&i1x, &i1y, dims, u1, u2);
        for i in 0..n {
            grad[i] = i1wx[i] * i1wx[i] + i1wy[i] * i1wy[i];
            rho_c[i] = i1w[i] - i1wx[i] * u1[i] - i1wy[i] * u2[i] - i0[i];
        }

        let mut iters = 0;
        let mut error = f32::INFINITY;
        while error > stop && iters < p.iterations {
            iters += 1;
            for i in 0..n {
                let rho = rho_c[i] + i1wx[i] * u1[i] + i1wy[i] * u2[i];
                let (d1, d2) = if rho < -l_t * grad[i] {
                    (l_t * i1wx[i], l_t * i1wy[i])
                } else if rho > l_t * grad[i] {
                    (-l_t * i1wx[i], -l_t * i1wy[i])
                } else if grad[i] < GRAD_IS_ZERO {
                    (0.0, 0.0)
                } else {
                    let fi = -rho / grad[i];
                    (fi * i1wx[i], fi * i1wy[i])
                };
                v1[i] = u1[i] + d1;
                v2[i] = u2[i] + d2;
            }
            divergence(&p11, &p12, dims, &mut div1);
            divergence(&p21, &p22, dims, &mut div2);
            let mut acc = 0.0f64;
            for i in 0..n {
                let new1 = v1[i] + p.theta * div1[i];
                let new2 = v2[i] + p.theta * div2[i];
                let (e1, e2) = (new1 - u1[i], new2 - u2[i]);
                acc += f64::from(e1 * e1 + e2 * e2);
                u1[i] = new1;
                u2[i] = new2;
            }
            error = (acc / n as f64) as f32;
            let (u1x, u1y) = forward_gradient(u1, dims);
            let (u2x, u2y) = forward_gradient(u2, dims);
            for i in 0..n {
                let ng1 = 1.0 + taut * (u1x[i] * u1x[i] + u1y[i] * u1y[i]).sqrt();
                let ng2 = 1.0 + taut * (u2x[i] * u2x[i] + u2y[i] * u2y[i]).sqrt();
                p11[i] = (p11[i] + taut * u1x[i]) / ng1;
                p12[i] = (p12[i] + taut * u1y[i]) / ng1;
                p21[i] = (p21[i] + taut * u2x[i]) / ng2;
                p22[i] = (p22[i] + taut * u2y[i]) / ng2;
            }
        }
        if p.median_filter {
            median3x3(u1, dims);
            median3x3(u2, dims);
        }
        trace.iterations.push(iters);
        trace.energies.push(energy(i0, i1, dims, u1, u2, p.lambda));
    }
    trace
}

fn centered_gradient(img: &[f32], d: Dims) -> (Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0; d.len()];
    let mut gy = vec![0.0; d.len()];
    for y in 0..d.h {
        let (ym, yp) = (y.saturating_sub(1), (y + 1).min(d.h - 1));
        for x in 0..d.w {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(d.w - 1));
            gx[y * d.w + x] = 0.5 * (img[y * d.w + xp] - img[y * d.w + xm]);
            gy[y * d.w + x] = 0.5 * (img[yp * d.w + x] - img[ym * d.w + x]);
        }
    }
    (gx, gy)
}

fn forward_gradient(f: &[f32], d: Dims) -> (Vec<f32>, Vec<f32>) {
    let mut fx = vec![0.0; d.len()];
    let mut fy = vec![0.0; d.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            let i = y * d.w + x;
            if x + 1 < d.w {
                fx[i] = f[i + 1] - f[i];
            }
            if y + 1 < d.h {
                fy[i] = f[i + d.w] - f[i];
            }
        }
    }
    (fx, fy)
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(px: &[f32], py: &[f32], d: Dims, out: &mut [f32]) {
    for y in 0..d.h {
        for x in 0..d.w {
            let i = y * d.w + x;
            let dx = match x {
                0 => px[i],
                _ if x + 1 == d.w => -px[i - 1],
                _ => px[i] - px[i - 1],
            };
            let dy = match y {
                0 => py[i],
                _ if y + 1 == d.h => -py[i - d.w],
                _ => py[i] - py[i - d.w],
            };
            out[i] = dx + dy;
        }
    }
}

#[inline]
fn bilinear(img: &[f32], d: Dims, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (d.w - 1) as f32);
    let y = y.clamp(0.0, (d.h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(d.w - 1), (y0 + 1).min(d.h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = img[y0 * d.w + x0] * (1.0 - fx) + img[y0 * d.w + x1] * fx;
    let bottom = img[y1 * d.w + x0] * (1.0 - fx) + img[y1 * d.w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Samples `img` at `(x + u, y + v)` with replicated borders.
fn warp(img: &[f32], d: Dims, u: &[f32], v: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; d.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            let i = y * d.w + x;
            out[i] = bilinear(img, d, x as f32 + u[i], y as f32 + v[i]);
        }
    }
    out
}

/// Warps the image gradient to match [`warp`]: along an axis where the sample
/// falls outside the frame the replicated image is flat, so that component is 0.
fn warp_gradient(gx: &[f32], gy: &[f32], d: Dims, u: &[f32], v: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut wx = vec![0.0; d.len()];
    let mut wy = vec![0.0; d.len()];
    let (max_x, max_y) = ((d.w - 1) as f32, (d.h - 1) as f32);
    for y in 0..d.h {
        for x in 0..d.w {
            let i = y * d.w + x;
            let (sx, sy) = (x as f32 + u[i], y as f32 + v[i]);
            if (0.0..=max_x).contains(&sx) {
                wx[i] = bilinear(gx, d, sx, sy);
            }
            if (0.0..=max_y).contains(&sy) {
                wy[i] = bilinear(gy, d, sx, sy);
            }
        }
    }
    (wx, wy)
}

/// Pixel-centre aligned bilinear resampling used between pyramid levels.
fn resample(img: &[f32], from: Dims, to: Dims) -> Vec<f32> {
    let sx = from.w as f32 / to.w as f32;
    let sy = from.h as f32 / to.h as f32;
    let mut out = Vec::with_capacity(to.len());
    for y in 0..to.h {
        let src_y = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..to.w {
            out.push(bilinear(img, from, (x as f32 + 0.5) * sx - 0.5, src_y));
        }
    }
    out
}

fn gaussian_blur(img: &[f32], d: Dims, sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-((k * k) as f32) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; d.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            tmp[y * d.w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wk)| wk * img[y * d.w + clampi(x as isize + k as isize - radius, d.w)])
                .sum();
        }
    }
    let mut out = vec![0.0; d.len()];
    for y in 0..d.h {
        for x in 0..d.w {
            out[y * d.w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &wk)| wk * tmp[clampi(y as isize + k as isize - radius, d.h) * d.w + x])
                .sum();
        }
    }
    out
}

fn median3x3(f: &mut [f32], d: Dims) {
    let src = f.to_vec();
    let mut window = [0.0f32; 9];
    for y in 0..d.h {
        for x in 0..d.w {
            let mut k = 0;
            for dy in -1isize..=1 {
                let yy = (y as isize + dy).clamp(0, d.h as isize - 1) as usize;
                for dx in -1isize..=1 {
                    let xx = (x as isize + dx).clamp(0, d.w as isize - 1) as usize;
                    window[k] = src[yy * d.w + xx];
                    k += 1;
                }
            }
            window.sort_unstable_by(f32::total_cmp);
            f[y * d.w + x] = window[4];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_is_negative_adjoint_of_gradient() {
        let d = Dims { h: 5, w: 7 };
        let f: Vec<f32> = (0..35).map(|i| ((i * 7919) % 13) as f32 * 0.1).collect();
        let px: Vec<f32> = (0..35).map(|i| ((i * 104_729) % 11) as f32 * 0.1 - 0.5).collect();
        let py: Vec<f32> = (0..35).map(|i| ((i * 1299) % 7) as f32 * 0.1 - 0.3).collect();
        let (fx, fy) = forward_gradient(&f, d);
        let mut div = vec![0.0; 35];
        // Boundary duals of the last column/row are zero in the solver.
        let px: Vec<f32> = px
            .iter()
            .enumerate()
            .map(|(i, &v)| if i % 7 == 6 { 0.0 } else { v })
            .collect();
        let py: Vec<f32> = py
            .iter()
            .enumerate()
            .map(|(i, &v)| if i / 7 == 4 { 0.0 } else { v })
            .collect();
        divergence(&px, &py, d, &mut div);
        let lhs: f32 = (0..35).map(|i| fx[i] * px[i] + fy[i] * py[i]).sum();
        let rhs: f32 = (0..35).map(|i| -f[i] * div[i]).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn median_removes_isolated_spike() {
        let d = Dims { h: 3, w: 3 };
        let mut f = vec![0.0; 9];
        f[4] = 10.0;
        median3x3(&mut f, d);
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn blur_preserves_constants() {
        let d = Dims { h: 6, w: 9 };
        let out = gaussian_blur(&[4.0; 54], d, 1.2);
        assert!(out.iter().all(|&x| (x - 4.0).abs() < 1e-5));
    }

    #[test]
    fn invalid_params_rejected() {
        let p = TvL1Params {
            tau: 0.3,
            ..TvL1Params::default()
        };
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let p = TvL1Params {
            zoom: 1.0,
            ..TvL1Params::default()
        };
        assert!(p.validate().is_err());
    }
}
