//! Raw numeric kernels behind the autodiff ops.

use alloc::vec;
use alloc::vec::Vec;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a convolution over up to three spatial axes.
///
/// 2D convolutions use a trailing spatial axis of extent 1 with kernel 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self) -> [usize; 3] {
        let mut o = [0; 3];
        for a in 0..3 {
            o[a] = (self.in_dims[a] + 2 * self.pad[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        o
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Output columns unfolded at a time; keeps the column buffer in cache.
const TILE_COLUMNS: usize = 256;

/// Consecutive output slabs `o0 in lo..hi` processed as one tile.
fn tiles(od: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let plane = (od[1] * od[2]).max(1);
    let step = (TILE_COLUMNS / plane).max(1);
    (0..od[0]).step_by(step).map(move |lo| (lo, (lo + step).min(od[0])))
}

/// Unfolds output slabs `o0 in lo..hi` of `x (c, d0, d1, d2)` into
/// `col (c * kvol, tile_columns)`.
fn im2col_tile(x: &[f64], channels: usize, g: &ConvGeom, (lo, hi): (usize, usize), col: &mut [f64]) {
    let od = g.out_dims();
    let nt = (hi - lo) * od[1] * od[2];
    let iv = g.in_dims.iter().product::<usize>();
    let kv = g.kernel_volume();
    col.fill(0.0);
    for c in 0..channels {
        let xc = &x[c * iv..(c + 1) * iv];
        for k0 in 0..g.kernel[0] {
            for k1 in 0..g.kernel[1] {
                for k2 in 0..g.kernel[2] {
                    let kidx = (k0 * g.kernel[1] + k1) * g.kernel[2] + k2;
                    let row = &mut col[(c * kv + kidx) * nt..(c * kv + kidx + 1) * nt];
                    for_each_run(g, od, (lo, hi), [k0, k1, k2], |o, i, n| row[o..o + n].copy_from_slice(&xc[i..i + n]));
                }
            }
        }
    }
}

/// Folds tile gradients `col (c * kvol, tile_columns)` back onto `dx`.
fn col2im_tile_add(col: &[f64], channels: usize, g: &ConvGeom, (lo, hi): (usize, usize), dx: &mut [f64]) {
    let od = g.out_dims();
    let nt = (hi - lo) * od[1] * od[2];
    let iv = g.in_dims.iter().product::<usize>();
    let kv = g.kernel_volume();
    for c in 0..channels {
        let dxc = &mut dx[c * iv..(c + 1) * iv];
        for k0 in 0..g.kernel[0] {
            for k1 in 0..g.kernel[1] {
                for k2 in 0..g.kernel[2] {
                    let kidx = (k0 * g.kernel[1] + k1) * g.kernel[2] + k2;
                    let row = &col[(c * kv + kidx) * nt..(c * kv + kidx + 1) * nt];
                    for_each_run(g, od, (lo, hi), [k0, k1, k2], |o, i, n| {
                        for (d, r) in dxc[i..i + n].iter_mut().zip(&row[o..o + n]) {
                            *d += r;
                        }
                    });
                }
            }
        }
    }
}

/// Visits `(out_col, in_flat, len)` runs of tile columns whose kernel tap
/// lands inside the input; both sides are contiguous within a run.
#[inline]
fn for_each_run(g: &ConvGeom, od: [usize; 3], (lo, hi): (usize, usize), k: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let id = g.in_dims;
    let valid = |axis: usize| {
        // Output positions o with 0 <= o*s + k - p < in.
        let (s, p, kk, n) = (g.stride[axis], g.pad[axis], k[axis], id[axis]);
        let lo = if p > kk { (p - kk).div_ceil(s) } else { 0 };
        let hi = if n + p > kk { ((n + p - kk - 1) / s + 1).min(od[axis]) } else { 0 };
        (lo, hi.max(lo))
    };
    let (a0, b0) = valid(0);
    let (a1, b1) = valid(1);
    let (a2, b2) = valid(2);
    let flat = id[2] == 1 && od[2] == 1 && g.stride[1] == 1;
    for o0 in a0.max(lo)..b0.min(hi) {
        let i0 = o0 * g.stride[0] + k[0] - g.pad[0];
        if flat {
            // Single-slice volumes: rows along axis 1 are contiguous.
            if b1 > a1 && b2 > a2 {
                f((o0 - lo) * od[1] + a1, i0 * id[1] + a1 + k[1] - g.pad[1], b1 - a1);
            }
            continue;
        }
        for o1 in a1..b1 {
            let i1 = o1 * g.stride[1] + k[1] - g.pad[1];
            let obase = ((o0 - lo) * od[1] + o1) * od[2];
            let ibase = (i0 * id[1] + i1) * id[2];
            if g.stride[2] == 1 {
                if b2 > a2 {
                    f(obase + a2, ibase + a2 + k[2] - g.pad[2], b2 - a2);
                }
            } else {
                for o2 in a2..b2 {
                    f(obase + o2, ibase + o2 * g.stride[2] + k[2] - g.pad[2], 1);
                }
            }
        }
    }
}

/// `c (m x n, row stride rsc) = a * b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, k, rsa, csa) < a.len() && last(k, n, rsb, csb) < b.len() && last(m, n, rsc, 1) < c.len());
    // SAFETY: the largest offset reachable through each stride pair was
    // checked against its buffer above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Forward convolution: `y (o, out_vox) = w (o, c*kvol) * col + b`.
pub fn conv_forward(x: &[f64], channels: usize, w: &[f64], out_ch: usize, b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let od = g.out_dims();
    let ov = od[0] * od[1] * od[2];
    let ck = channels * g.kernel_volume();
    let mut y = vec![0.0; out_ch * ov];
    if let Some(b) = b {
        for (o, row) in y.chunks_mut(ov).enumerate() {
            row.iter_mut().for_each(|v| *v = b[o]);
        }
    }
    if g.is_pointwise() {
        gemm(out_ch, ck, ov, w, false, x, false, 1.0, &mut y);
        return y;
    }
    let plane = od[1] * od[2];
    let mut col = Vec::new();
    for t in tiles(od) {
        let nt = (t.1 - t.0) * plane;
        col.resize(ck * nt, 0.0);
        im2col_tile(x, channels, g, t, &mut col);
        gemm_strided(out_ch, ck, nt, w, (ck, 1), &col, (nt, 1), 1.0, &mut y[t.0 * plane..], ov);
    }
    y
}

/// Gradients of a convolution. Returns `(dx, dw, db)`; `dx` only when
/// `need_dx`.
pub fn conv_backward(
    x: &[f64],
    channels: usize,
    w: &[f64],
    out_ch: usize,
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let od = g.out_dims();
    let ov = od[0] * od[1] * od[2];
    let ck = channels * g.kernel_volume();
    let db: Vec<f64> = dy.chunks(ov).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0; out_ch * ck];
    if g.is_pointwise() {
        gemm(out_ch, ov, ck, dy, false, x, true, 0.0, &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = vec![0.0; ck * ov];
            gemm(ck, out_ch, ov, w, true, dy, false, 0.0, &mut dx);
            dx
        });
        return (dx, dw, db);
    }
    let plane = od[1] * od[2];
    let mut dx = need_dx.then(|| vec![0.0; channels * g.in_dims.iter().product::<usize>()]);
    let (mut col, mut dcol) = (Vec::new(), Vec::new());
    for t in tiles(od) {
        let nt = (t.1 - t.0) * plane;
        let dy_t = &dy[t.0 * plane..];
        col.resize(ck * nt, 0.0);
        im2col_tile(x, channels, g, t, &mut col);
        gemm_strided(out_ch, nt, ck, dy_t, (ov, 1), &col, (1, nt), 1.0, &mut dw, ck);
        if let Some(dx) = dx.as_mut() {
            dcol.resize(ck * nt, 0.0);
            gemm_strided(ck, out_ch, nt, w, (1, ck), dy_t, (ov, 1), 0.0, &mut dcol, nt);
            col2im_tile_add(&dcol, channels, g, t, dx);
        }
    }
    (dx, dw, db)
}

pub const NORM_EPS: f64 = 1e-5;

/// Group normalization statistics: per-group `(mean, 1/std)`.
pub fn group_stats(x: &[f64], channels: usize, groups: usize) -> Vec<(f64, f64)> {
    let per = x.len() / channels * (channels / groups);
    x.chunks(per)
        .map(|chunk| {
            let n = chunk.len() as f64;
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / libm::sqrt(var + NORM_EPS))
        })
        .collect()
}

/// Number of normalization groups used for a channel count.
pub fn norm_groups(channels: usize) -> usize {
    let mut g = 8.min(channels).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition of a zero-padded strided convolution.
    fn conv_reference(x: &[f64], c: usize, w: &[f64], o: usize, g: &ConvGeom) -> Vec<f64> {
        let od = g.out_dims();
        let id = g.in_dims;
        let mut y = vec![0.0; o * od[0] * od[1] * od[2]];
        for oc in 0..o {
            for o0 in 0..od[0] {
                for o1 in 0..od[1] {
                    for o2 in 0..od[2] {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for k0 in 0..g.kernel[0] {
                                for k1 in 0..g.kernel[1] {
                                    for k2 in 0..g.kernel[2] {
                                        let i = [
                                            (o0 * g.stride[0] + k0) as isize - g.pad[0] as isize,
                                            (o1 * g.stride[1] + k1) as isize - g.pad[1] as isize,
                                            (o2 * g.stride[2] + k2) as isize - g.pad[2] as isize,
                                        ];
                                        if (0..3).any(|a| i[a] < 0 || i[a] >= id[a] as isize) {
                                            continue;
                                        }
                                        let xi = ((ic * id[0] + i[0] as usize) * id[1] + i[1] as usize) * id[2] + i[2] as usize;
                                        let wi = (((oc * c + ic) * g.kernel[0] + k0) * g.kernel[1] + k1) * g.kernel[2] + k2;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        y[((oc * od[0] + o0) * od[1] + o1) * od[2] + o2] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let cases = [
            ConvGeom { in_dims: [5, 4, 3], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            ConvGeom { in_dims: [5, 5, 3], kernel: [3, 3, 3], stride: [2, 2, 2], pad: [1, 1, 1] },
            ConvGeom { in_dims: [7, 6, 1], kernel: [3, 3, 1], stride: [2, 2, 1], pad: [1, 1, 0] },
            ConvGeom { in_dims: [4, 3, 2], kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] },
            ConvGeom { in_dims: [4, 3, 2], kernel: [1, 1, 1], stride: [2, 2, 2], pad: [0, 0, 0] },
        ];
        for g in cases {
            let (c, o) = (3, 2);
            let n = c * g.in_dims.iter().product::<usize>();
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let w: Vec<f64> = (0..o * c * g.kernel_volume()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let y = conv_forward(&x, c, &w, o, None, &g);
            let r = conv_reference(&x, c, &w, o, &g);
            for (a, b) in y.iter().zip(&r) {
                assert!((a - b).abs() < 1e-12, "{:?}", g);
            }
        }
    }

    fn adjoint_case(g: ConvGeom, c: usize, o: usize) {
        let od = g.out_dims();
        let nx = c * g.in_dims.iter().product::<usize>();
        let ny = o * od.iter().product::<usize>();
        let x: Vec<f64> = (0..nx).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let w: Vec<f64> = (0..o * c * g.kernel_volume()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
        let dy: Vec<f64> = (0..ny).map(|i| ((i * 29 % 13) as f64 - 6.0) / 9.0).collect();
        let (dx, dw, db) = conv_backward(&x, c, &w, o, &dy, &g, true);
        let dx = dx.unwrap();
        // <dy, conv(x)> is bilinear in (x, w); its partials are dx and dw.
        let y = conv_reference(&x, c, &w, o, &g);
        let lhs: f64 = dy.iter().zip(&y).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.iter().zip(&x).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-9 * (1.0 + lhs.abs()), "{:?}", g);
        assert!((lhs - via_w).abs() < 1e-9 * (1.0 + lhs.abs()), "{:?}", g);
        let plane = od.iter().product::<usize>();
        for (oc, d) in db.iter().enumerate() {
            assert!((d - dy[oc * plane..(oc + 1) * plane].iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        adjoint_case(ConvGeom { in_dims: [5, 4, 3], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] }, 3, 2);
        adjoint_case(ConvGeom { in_dims: [7, 5, 3], kernel: [3, 3, 3], stride: [2, 2, 2], pad: [1, 1, 1] }, 2, 3);
        adjoint_case(ConvGeom { in_dims: [4, 3, 2], kernel: [1, 1, 1], stride: [1, 1, 1], pad: [0, 0, 0] }, 3, 2);
        // Spans several column tiles.
        adjoint_case(ConvGeom { in_dims: [23, 11, 4], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] }, 2, 3);
        adjoint_case(ConvGeom { in_dims: [40, 30, 1], kernel: [3, 3, 1], stride: [2, 2, 1], pad: [1, 1, 0] }, 2, 2);
    }

    #[test]
    fn tiled_forward_matches_direct_loops() {
        for g in [
            ConvGeom { in_dims: [23, 11, 4], kernel: [3, 3, 3], stride: [1, 1, 1], pad: [1, 1, 1] },
            ConvGeom { in_dims: [300, 2, 1], kernel: [3, 3, 1], stride: [1, 1, 1], pad: [1, 1, 0] },
        ] {
            let n = 2 * g.in_dims.iter().product::<usize>();
            let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
            let w: Vec<f64> = (0..3 * 2 * g.kernel_volume()).map(|i| ((i * 13 % 7) as f64 - 3.0) / 5.0).collect();
            let b = [0.5, -0.25, 1.0];
            let y = conv_forward(&x, 2, &w, 3, Some(&b), &g);
            let r = conv_reference(&x, 2, &w, 3, &g);
            let plane = g.out_dims().iter().product::<usize>();
            for (i, (a, r)) in y.iter().zip(&r).enumerate() {
                assert!((a - r - b[i / plane]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ceil_halving_with_symmetric_pad() {
        for n in 1..12 {
            let g = ConvGeom { in_dims: [n, n, n], kernel: [3; 3], stride: [2; 3], pad: [1; 3] };
            assert_eq!(g.out_dims()[0], n.div_ceil(2));
        }
    }

    #[test]
    fn groups_divide_channels() {
        for c in 1..70 {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
            assert!(g <= 8);
        }
    }
}
