//! Plain slice kernels shared by forward and backward passes.

use crate::scalar::Scalar;

/// Geometry of a square-kernel 2-D convolution over a `[C, H, W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = vec![T::zero(); g.col_rows() * oh * ow];
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back onto the input plane (adjoint of [`im2col`]).
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Normalization statistics for contiguous groups of `group_len` elements.
pub fn group_stats<T: Scalar>(x: &[T], group_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(group_len).unwrap();
    x.chunks(group_len)
        .map(|chunk| {
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + eps).sqrt())
        })
        .unzip()
}

/// Gradient of `xhat = (x - mean) * rstd` for one group given `dxhat`.
pub fn norm_backward_group<T: Scalar>(x: &[T], dxhat: &[T], mean: T, rstd: T, dx: &mut [T]) {
    let n = T::from_usize(x.len()).unwrap();
    let mut sum_d = T::zero();
    let mut sum_dx = T::zero();
    for (&xi, &di) in x.iter().zip(dxhat) {
        sum_d += di;
        sum_dx += di * (xi - mean) * rstd;
    }
    for ((o, &xi), &di) in dx.iter_mut().zip(x).zip(dxhat) {
        let xh = (xi - mean) * rstd;
        *o += rstd / n * (n * di - sum_d - xh * sum_dx);
    }
}

pub fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(GELU_C);
    let a = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Numerically stable `log(1 + exp(-|x|))`.
pub fn log1p_exp_neg_abs<T: Scalar>(x: T) -> T {
    (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// One bilinear tap set: up to four `(flat index, weight)` pairs into a `H×W` plane.
pub type Taps<T> = [(usize, T); 4];

/// Bilinear sample position following the RoIAlign boundary convention:
/// points more than one cell outside the map contribute nothing, points near the
/// border are clamped onto it.
pub fn bilinear_taps<T: Scalar>(y: T, x: T, height: usize, width: usize) -> Option<Taps<T>> {
    let neg_one = -T::one();
    let (hf, wf) = (T::from_usize(height).unwrap(), T::from_usize(width).unwrap());
    if y < neg_one || y > hf || x < neg_one || x > wf {
        return None;
    }
    let mut y = if y <= T::zero() { T::zero() } else { y };
    let mut x = if x <= T::zero() { T::zero() } else { x };
    let mut y_low = y.floor().to_usize().unwrap();
    let mut x_low = x.floor().to_usize().unwrap();
    let y_high;
    let x_high;
    if y_low >= height - 1 {
        y_low = height - 1;
        y_high = height - 1;
        y = T::from_usize(y_low).unwrap();
    } else {
        y_high = y_low + 1;
    }
    if x_low >= width - 1 {
        x_low = width - 1;
        x_high = width - 1;
        x = T::from_usize(x_low).unwrap();
    } else {
        x_high = x_low + 1;
    }
    let ly = y - T::from_usize(y_low).unwrap();
    let lx = x - T::from_usize(x_low).unwrap();
    let hy = T::one() - ly;
    let hx = T::one() - lx;
    Some([
        (y_low * width + x_low, hy * hx),
        (y_low * width + x_high, hy * lx),
        (y_high * width + x_low, ly * hx),
        (y_high * width + x_high, ly * lx),
    ])
}
