//! Plain slice kernels behind the graph operations. All reductions run
//! in a fixed order so results do not depend on vector width.

use crate::scalar::Real;

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Per-axis sampling table for half-pixel bilinear resizing:
/// `(low index, high index, weight of high)` per output coordinate.
pub fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Resizes an `h*w x c` grid to `nh*nw x c`.
pub fn resize_bilinear<T: Real>(x: &[T], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<T> {
    let ty = bilinear_axis(h, nh);
    let tx = bilinear_axis(w, nw);
    let mut out = vec![T::zero(); nh * nw * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let wy = T::of(wy);
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let wx = T::of(wx);
            let w00 = (T::one() - wy) * (T::one() - wx);
            let w01 = (T::one() - wy) * wx;
            let w10 = wy * (T::one() - wx);
            let w11 = wy * wx;
            let o = &mut out[(oy * nw + ox) * c..(oy * nw + ox + 1) * c];
            let r00 = &x[(y0 * w + x0) * c..(y0 * w + x0 + 1) * c];
            let r01 = &x[(y0 * w + x1) * c..(y0 * w + x1 + 1) * c];
            let r10 = &x[(y1 * w + x0) * c..(y1 * w + x0 + 1) * c];
            let r11 = &x[(y1 * w + x1) * c..(y1 * w + x1 + 1) * c];
            for j in 0..c {
                o[j] = w00 * r00[j] + w01 * r01[j] + w10 * r10[j] + w11 * r11[j];
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear`].
pub fn resize_bilinear_adjoint<T: Real>(
    g: &[T],
    h: usize,
    w: usize,
    c: usize,
    nh: usize,
    nw: usize,
) -> Vec<T> {
    let ty = bilinear_axis(h, nh);
    let tx = bilinear_axis(w, nw);
    let mut dx = vec![T::zero(); h * w * c];
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        let wy = T::of(wy);
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let wx = T::of(wx);
            let taps = [
                (y0 * w + x0, (T::one() - wy) * (T::one() - wx)),
                (y0 * w + x1, (T::one() - wy) * wx),
                (y1 * w + x0, wy * (T::one() - wx)),
                (y1 * w + x1, wy * wx),
            ];
            let go = &g[(oy * nw + ox) * c..(oy * nw + ox + 1) * c];
            for (src, wt) in taps {
                let d = &mut dx[src * c..(src + 1) * c];
                for j in 0..c {
                    d[j] += wt * go[j];
                }
            }
        }
    }
    dx
}

/// 2x2 average pooling of an `h*w x c` grid (odd trailing rows/columns dropped).
pub fn avg_pool2<T: Real>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut out = vec![T::zero(); oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for j in 0..c {
                let s = x[((2 * oy) * w + 2 * ox) * c + j]
                    + x[((2 * oy) * w + 2 * ox + 1) * c + j]
                    + x[((2 * oy + 1) * w + 2 * ox) * c + j]
                    + x[((2 * oy + 1) * w + 2 * ox + 1) * c + j];
                out[(oy * ow + ox) * c + j] = q * s;
            }
        }
    }
    out
}

pub fn avg_pool2_adjoint<T: Real>(g: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let q = T::of(0.25);
    let mut dx = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for j in 0..c {
                let v = q * g[(oy * ow + ox) * c + j];
                for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    dx[((2 * oy + dy) * w + 2 * ox + dxo) * c + j] += v;
                }
            }
        }
    }
    dx
}

/// Median with even-length ties resolved as the mean of the two middle
/// order statistics. Returns the value and the contributing
/// `(index, weight)` pairs.
pub fn median<T: Real>(x: &[T]) -> (T, Vec<(usize, T)>) {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let n = x.len();
    if n % 2 == 1 {
        let i = order[n / 2];
        (x[i], vec![(i, T::one())])
    } else {
        let (i, j) = (order[n / 2 - 1], order[n / 2]);
        let half = T::of(0.5);
        ((x[i] + x[j]) * half, vec![(i, half), (j, half)])
    }
}
