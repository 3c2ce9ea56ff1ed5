//! Single-scale SSIM, 11×11 Gaussian window, zero padding at the borders.

use crate::error::Result;
use crate::image::Image;

pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug)]
pub struct SsimOutput {
    pub value: f64,
    /// `∂SSIM/∂a`.
    pub gradient: Image,
}

fn kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - SSIM_RADIUS as f64;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable zero-padded blur of one `w × h` plane. Self-adjoint because the
/// kernel is symmetric.
fn blur(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &Image, ch: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(3).copied().collect()
}

fn compute(a: &Image, b: &Image, want_grad: bool) -> Result<SsimOutput> {
    a.same_shape(b)?;
    let (w, h) = (a.width(), a.height());
    let n = (w * h * 3) as f64;
    let k = kernel();
    let mut total = 0.0;
    let mut gradient = Image::new(w, h);
    for ch in 0..3 {
        let x = channel(a, ch);
        let y = channel(b, ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &k), blur(&y, w, h, &k));
        let (sxx, syy, sxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));

        let mut d_mx = vec![0.0; w * h];
        let mut d_sxx = vec![0.0; w * h];
        let mut d_sxy = vec![0.0; w * h];
        for i in 0..w * h {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = va + vb + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let den = b1 * b2;
                d_mx[i] = (2.0 * mb * a2 - 2.0 * mb * a1) / den - s * (2.0 * ma / b1 - 2.0 * ma / b2);
                d_sxx[i] = -s / b2;
                d_sxy[i] = 2.0 * a1 / den;
            }
        }
        if want_grad {
            let (g_m, g_xx, g_xy) = (blur(&d_mx, w, h, &k), blur(&d_sxx, w, h, &k), blur(&d_sxy, w, h, &k));
            let out = gradient.data_mut();
            for i in 0..w * h {
                out[i * 3 + ch] = (g_m[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]) / n;
            }
        }
    }
    Ok(SsimOutput {
        value: total / n,
        gradient,
    })
}

/// Mean SSIM over pixels and channels together with its gradient with respect to `a`.
pub fn ssim(a: &Image, b: &Image) -> Result<SsimOutput> {
    compute(a, b, true)
}

pub fn ssim_value(a: &Image, b: &Image) -> Result<f64> {
    Ok(compute(a, b, false)?.value)
}
