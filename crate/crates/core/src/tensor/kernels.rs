//! Raw numeric kernels shared by the graph ops.

use super::Real;

/// `c = a·b` (or `c += a·b` when `accumulate`), all row-major.
///
/// `a` is logically `[m, k]`; when `a_t` it is stored as `[k, m]`.
/// `b` is logically `[k, n]`; when `b_t` it is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, &mut c[..m * n]);
}

/// Output extent of a 3×3, padding-1 convolution.
pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Unfolds one `[c, h, w]` image into `[c*9, ho*wo]` patch columns.
pub(crate) fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    cols: &mut [T],
) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
pub(crate) fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    img: &mut [T],
) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * plane;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && (ix as usize) < w {
                            dst[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Sum whose result does not depend on the order of `terms`.
///
/// Sorts by total order first, so any permutation of the same multiset of
/// values produces the same bits.
pub(crate) fn canonical_sum<T: Real>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    let mut acc = T::zero();
    for &t in terms.iter() {
        acc += t;
    }
    acc
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximate GELU and its derivative from one sigmoid evaluation,
/// using `(1 + tanh u) / 2 == sigmoid(2u)`.
pub(crate) fn gelu_with_grad<T: Real>(x: T) -> (T, T) {
    let c = T::of(2.0 * GELU_C);
    let k = T::of(GELU_K);
    let three = T::of(3.0);
    let s = sigmoid(c * (x + k * x * x * x));
    let du = c * (T::one() + three * k * x * x);
    (x * s, s + x * s * (T::one() - s) * du)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let at = [1.0f64, 3.0, 2.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let bt = [5.0f64, 7.0, 6.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut c2 = [0.0f64; 4];
        gemm(2, 2, 2, &at, true, &bt, true, &mut c2, false);
        assert_eq!(c, c2);
        gemm(2, 2, 2, &a, false, &b, false, &mut c2, true);
        assert_eq!(c2, [38.0, 44.0, 86.0, 100.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let (c, h, w) = (2, 5, 4);
        for stride in [1, 2] {
            let ho = conv_out(h, stride);
            let wo = conv_out(w, stride);
            let img: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let probe: Vec<f64> = (0..c * 9 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut cols = vec![0.0; c * 9 * ho * wo];
            im2col(&img, c, h, w, stride, &mut cols);
            let mut back = vec![0.0; c * h * w];
            col2im(&probe, c, h, w, stride, &mut back);
            let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
            let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let mut a = [1e8f32, 1.0, -1e8, 3.5, 1e-3];
        let mut b = [3.5f32, -1e8, 1e-3, 1.0, 1e8];
        assert_eq!(canonical_sum(&mut a).to_bits(), canonical_sum(&mut b).to_bits());
    }

    fn gelu<T: Real>(x: T) -> T {
        gelu_with_grad(x).0
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -60..=60 {
            let x = i as f64 * 0.1;
            let u = GELU_C * (x + GELU_K * x * x * x);
            assert!((gelu(x) - 0.5 * x * (1.0 + u.tanh())).abs() < 1e-14);
        }
        assert!(gelu(-1e4f32) == 0.0 && gelu(1e4f32) == 1e4);
        for i in -30..=30 {
            let x = i as f64 * 0.2;
            let d = gelu_with_grad(x).1;
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((d - num).abs() < 1e-8);
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-200.0f32).is_finite());
        assert!((log_sigmoid(-200.0f64) + 200.0).abs() < 1e-12);
        assert!(log_sigmoid(200.0f32) <= 0.0);
    }
}
