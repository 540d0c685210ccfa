//! Direct 2D correlation with zero padding on row-major buffers.

/// `out[i, j] += sum_{a, b} k[a, b] * x[i + a - ra, j + b - rb]`, same size.
///
/// `ra`/`rb` are the anchor offsets of the kernel; for odd kernels they are
/// the center.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_add(
    x: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    anchor: (usize, usize),
    out: &mut [f64],
) {
    debug_assert_eq!(x.len(), height * width);
    debug_assert_eq!(out.len(), height * width);
    for a in 0..kh {
        let di = a as isize - anchor.0 as isize;
        let (i0, i1) = valid_range(height, di);
        for b in 0..kw {
            let w = kernel[a * kw + b];
            if w == 0.0 {
                continue;
            }
            let dj = b as isize - anchor.1 as isize;
            let (j0, j1) = valid_range(width, dj);
            if j0 >= j1 {
                continue;
            }
            for i in i0..i1 {
                let src_row = (i as isize + di) as usize * width;
                let dst = &mut out[i * width + j0..i * width + j1];
                let src = &x[(src_row as isize + j0 as isize + dj) as usize
                    ..(src_row as isize + j1 as isize + dj) as usize];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Adjoint of [`correlate_add`]: scatters `u` back onto `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate_adjoint_add(
    u: &[f64],
    height: usize,
    width: usize,
    kernel: &[f64],
    kh: usize,
    kw: usize,
    anchor: (usize, usize),
    out: &mut [f64],
) {
    debug_assert_eq!(u.len(), height * width);
    debug_assert_eq!(out.len(), height * width);
    for a in 0..kh {
        let di = a as isize - anchor.0 as isize;
        let (i0, i1) = valid_range(height, di);
        for b in 0..kw {
            let w = kernel[a * kw + b];
            if w == 0.0 {
                continue;
            }
            let dj = b as isize - anchor.1 as isize;
            let (j0, j1) = valid_range(width, dj);
            if j0 >= j1 {
                continue;
            }
            for i in i0..i1 {
                let dst_row = (i as isize + di) as usize * width;
                let src = &u[i * width + j0..i * width + j1];
                let dst = &mut out[(dst_row as isize + j0 as isize + dj) as usize
                    ..(dst_row as isize + j1 as isize + dj) as usize];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
    }
}

/// Output indices `i` with `0 <= i + shift < len`.
#[inline]
fn valid_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Mean over the in-bounds part of a `width x width` box centered on each pixel.
pub(crate) fn box_mean(x: &[f64], height: usize, width: usize, box_width: usize) -> Vec<f64> {
    if box_width <= 1 {
        return x.to_vec();
    }
    let r = (box_width / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for i in 0..height as isize {
        for j in 0..width as isize {
            let (mut acc, mut count) = (0.0, 0usize);
            for a in (i - r).max(0)..(i + r + 1).min(height as isize) {
                for b in (j - r).max(0)..(j + r + 1).min(width as isize) {
                    acc += x[a as usize * width + b as usize];
                    count += 1;
                }
            }
            out[i as usize * width + j as usize] = acc / count as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize, anchor: (usize, usize)) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for a in 0..kh as isize {
                    for b in 0..kw as isize {
                        let si = i + a - anchor.0 as isize;
                        let sj = j + b - anchor.1 as isize;
                        if si >= 0 && sj >= 0 && si < h as isize && sj < w as isize {
                            acc += k[(a * kw as isize + b) as usize] * x[(si * w as isize + sj) as usize];
                        }
                    }
                }
                out[(i * w as isize + j) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_correlation_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (h, w, kh, kw) in [(6, 7, 3, 3), (2, 2, 3, 3), (5, 4, 5, 5), (9, 8, 4, 4)] {
            let x: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
            let u: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>() - 0.5).collect();
            let k: Vec<f64> = (0..kh * kw).map(|_| rng.gen::<f64>() - 0.5).collect();
            let anchor = ((kh - 1) / 2, (kw - 1) / 2);
            let mut out = vec![0.0; h * w];
            correlate_add(&x, h, w, &k, kh, kw, anchor, &mut out);
            let reference = naive(&x, h, w, &k, kh, kw, anchor);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-14);
            }
            let mut back = vec![0.0; h * w];
            correlate_adjoint_add(&u, h, w, &k, kh, kw, anchor, &mut back);
            let lhs: f64 = out.iter().zip(&u).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-13);
        }
    }

    #[test]
    fn box_mean_preserves_constants() {
        let (h, w) = (7, 5);
        let flat = box_mean(&vec![2.0; h * w], h, w, 3);
        assert!(flat.iter().all(|v| (v - 2.0).abs() < 1e-15));
    }
}
