//! Fourier analysis of feature maps and grayscale feature-map rendering.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 32;

fn dft_1d(input: &[Complex64], out: &mut [Complex64], twiddle: &[Complex64]) {
    let n = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &x) in input.iter().enumerate() {
            acc += x * twiddle[(j * k) % n];
        }
        *o = acc;
    }
}

fn twiddles(n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|j| Complex64::from_polar(1.0, -2.0 * core::f64::consts::PI * j as f64 / n as f64))
        .collect()
}

/// Unnormalized forward DFT of a row-major `h x w` map.
pub fn fft2d(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    if x.len() != h * w || h == 0 || w == 0 {
        return Err(shape_err!("fft2d: {} values for a {h}x{w} map", x.len()));
    }
    let (tw, th) = (twiddles(w), twiddles(h));
    let mut rows = vec![Complex64::new(0.0, 0.0); h * w];
    let src: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for r in 0..h {
        dft_1d(&src[r * w..(r + 1) * w], &mut rows[r * w..(r + 1) * w], &tw);
    }
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    let (mut col, mut res) = (
        vec![Complex64::new(0.0, 0.0); h],
        vec![Complex64::new(0.0, 0.0); h],
    );
    for c in 0..w {
        for r in 0..h {
            col[r] = rows[r * w + c];
        }
        dft_1d(&col, &mut res, &th);
        for r in 0..h {
            out[r * w + c] = res[r];
        }
    }
    Ok(out)
}

/// Diagonal-normalized radius of DFT bin `(u, v)`: 0 at DC, 1 at the
/// Nyquist corner.
pub fn normalized_radius(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fold = |k: usize, n: usize| {
        let k = k.min(n - k) as f64;
        if n > 1 {
            k / (n as f64 / 2.0)
        } else {
            0.0
        }
    };
    let (fy, fx) = (fold(u, h), fold(v, w));
    libm::sqrt(fx * fx + fy * fy) / core::f64::consts::SQRT_2
}

/// Bin 0 holds only DC; other frequencies fall in `ceil(r · bins)`.
pub fn radial_bin(u: usize, v: usize, h: usize, w: usize, bins: usize) -> usize {
    if u == 0 && v == 0 {
        return 0;
    }
    let b = libm::ceil(normalized_radius(u, v, h, w) * bins as f64) as usize;
    b.clamp(1, bins)
}

/// Relative log amplitude per radial frequency bin.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumProfile {
    /// Upper edge of each bin as a fraction of the diagonal Nyquist radius.
    pub freq: Vec<f64>,
    pub rel_log_amp: Vec<f64>,
}

impl SpectrumProfile {
    /// CSV with header `freq,rel_log_amp` and six decimals.
    pub fn to_csv(&self) -> alloc::string::String {
        use core::fmt::Write;
        let mut s = alloc::string::String::from("freq,rel_log_amp\n");
        for (f, a) in self.freq.iter().zip(&self.rel_log_amp) {
            let _ = writeln!(s, "{f:.6},{a:.6}");
        }
        s
    }
}

/// Per-bin mean of log1p magnitudes of one `h x w` map; `None` for empty bins.
fn map_bins(x: &[f64], h: usize, w: usize, bins: usize) -> Result<Vec<Option<f64>>> {
    let f = fft2d(x, h, w)?;
    let mut sum = vec![0.0; bins + 1];
    let mut count = vec![0usize; bins + 1];
    for u in 0..h {
        for v in 0..w {
            let b = radial_bin(u, v, h, w, bins);
            sum[b] += libm::log1p(f[u * w + v].norm());
            count[b] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect())
}

/// Radial log-amplitude profile of `[B, C, h, w]` features relative to DC,
/// averaged over channels and batch after the log.
pub fn spectrum_profile<T: Real>(features: &Tensor<T>, bins: usize) -> Result<SpectrumProfile> {
    let d = features.dims();
    if d.len() != 4 || bins == 0 {
        return Err(shape_err!(
            "spectrum_profile expects [B, C, h, w], got {:?}",
            d
        ));
    }
    let (maps, h, w) = (d[0] * d[1], d[2], d[3]);
    let data = features.to_f64_vec();
    let mut acc = vec![0.0; bins + 1];
    let mut present = vec![false; bins + 1];
    for m in 0..maps {
        let prof = map_bins(&data[m * h * w..(m + 1) * h * w], h, w, bins)?;
        let dc = prof[0].unwrap_or(0.0);
        for (b, v) in prof.iter().enumerate() {
            if let Some(v) = v {
                acc[b] += v - dc;
                present[b] = true;
            }
        }
    }
    let (mut freq, mut rel) = (Vec::new(), Vec::new());
    for b in 0..=bins {
        if present[b] {
            freq.push(b as f64 / bins as f64);
            rel.push(if b == 0 { 0.0 } else { acc[b] / maps as f64 });
        }
    }
    Ok(SpectrumProfile {
        freq,
        rel_log_amp: rel,
    })
}

/// Channel mean of batch item `index` of `[B, C, h, w]`, min-max scaled to
/// 0..=255. A constant map renders as uniform 128.
pub fn gray_map<T: Real>(features: &Tensor<T>, index: usize) -> Result<(usize, usize, Vec<u8>)> {
    let d = features.dims();
    if d.len() != 4 || index >= d[0] {
        return Err(shape_err!("gray_map: dims {:?}, item {index}", d));
    }
    let (c, h, w) = (d[1], d[2], d[3]);
    let data = features.to_f64_vec();
    let mut mean = vec![0.0; h * w];
    for ch in 0..c {
        let base = (index * c + ch) * h * w;
        for (m, &v) in mean.iter_mut().zip(&data[base..base + h * w]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let px = if hi > lo {
        mean.iter()
            .map(|&m| libm::round((m - lo) / (hi - lo) * 255.0) as u8)
            .collect()
    } else {
        vec![128; h * w]
    };
    Ok((h, w, px))
}
