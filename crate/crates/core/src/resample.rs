//! Separable linear image operators (bilinear resize, Gaussian blur) with
//! their exact transposes, so they can sit inside a differentiated pipeline.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor3};

type Taps = Vec<Vec<(usize, f64)>>;

/// `out = Cols · (Rows · plane)` applied to every channel plane.
#[derive(Debug, Clone)]
pub struct SeparableOp {
    in_h: usize,
    in_w: usize,
    rows: Taps,
    cols: Taps,
}

impl SeparableOp {
    /// Bilinear resampling with half-pixel centres (no corner alignment).
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize dimensions must be positive"));
        }
        Ok(Self { in_h, in_w, rows: bilinear_taps(in_h, out_h), cols: bilinear_taps(in_w, out_w) })
    }

    /// Normalized Gaussian blur with replicated borders, radius `ceil(3 sigma)`.
    pub fn gaussian_blur(h: usize, w: usize, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
        }
        let kernel = gaussian_kernel(sigma);
        Ok(Self { in_h: h, in_w: w, rows: blur_taps(h, &kernel), cols: blur_taps(w, &kernel) })
    }

    pub fn out_height(&self) -> usize {
        self.rows.len()
    }

    pub fn out_width(&self) -> usize {
        self.cols.len()
    }

    pub fn apply(&self, input: &Tensor3) -> Result<Tensor3> {
        if input.height() != self.in_h || input.width() != self.in_w {
            return Err(Error::shape(format!(
                "operator expects {}x{} planes, got {}",
                self.in_h,
                self.in_w,
                input.shape()
            )));
        }
        let (oh, ow) = (self.out_height(), self.out_width());
        let mut out = Tensor3::zeros(Shape::new(input.channels(), oh, ow));
        let mut tmp = vec![0.0; oh * self.in_w];
        for c in 0..input.channels() {
            let src = input.plane(c);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (oy, taps) in self.rows.iter().enumerate() {
                let row = &mut tmp[oy * self.in_w..(oy + 1) * self.in_w];
                for &(iy, wgt) in taps {
                    let s = &src[iy * self.in_w..(iy + 1) * self.in_w];
                    for (r, v) in row.iter_mut().zip(s) {
                        *r += wgt * v;
                    }
                }
            }
            let dst = out.plane_mut(c);
            for oy in 0..oh {
                let row = &tmp[oy * self.in_w..(oy + 1) * self.in_w];
                for (ox, taps) in self.cols.iter().enumerate() {
                    dst[oy * ow + ox] = taps.iter().map(|&(ix, wgt)| wgt * row[ix]).sum();
                }
            }
        }
        Ok(out)
    }

    /// Applies the transpose: maps an output-shaped gradient to input shape.
    pub fn transpose(&self, grad: &Tensor3) -> Result<Tensor3> {
        let (oh, ow) = (self.out_height(), self.out_width());
        if grad.height() != oh || grad.width() != ow {
            return Err(Error::shape(format!(
                "transpose expects {oh}x{ow} planes, got {}",
                grad.shape()
            )));
        }
        let mut out = Tensor3::zeros(Shape::new(grad.channels(), self.in_h, self.in_w));
        let mut tmp = vec![0.0; oh * self.in_w];
        for c in 0..grad.channels() {
            let g = grad.plane(c);
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for oy in 0..oh {
                let row = &mut tmp[oy * self.in_w..(oy + 1) * self.in_w];
                for (ox, taps) in self.cols.iter().enumerate() {
                    let gv = g[oy * ow + ox];
                    for &(ix, wgt) in taps {
                        row[ix] += wgt * gv;
                    }
                }
            }
            let dst = out.plane_mut(c);
            for (oy, taps) in self.rows.iter().enumerate() {
                let row = &tmp[oy * self.in_w..(oy + 1) * self.in_w];
                for &(iy, wgt) in taps {
                    let d = &mut dst[iy * self.in_w..(iy + 1) * self.in_w];
                    for (dv, r) in d.iter_mut().zip(row) {
                        *dv += wgt * r;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn bilinear_taps(n_in: usize, n_out: usize) -> Taps {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            if i0 == i1 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur_taps(n: usize, kernel: &[f64]) -> Taps {
    let radius = (kernel.len() / 2) as i64;
    (0..n as i64)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, &w)| ((i + k as i64 - radius).clamp(0, n as i64 - 1) as usize, w))
                .collect()
        })
        .collect()
}
