//! Dense numeric kernels behind the graph ops. Batched kernels split work per
//! example; weight gradients are reduced over examples in index order so the
//! result does not depend on thread scheduling.

use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Output columns `[lo, hi)` whose input column `ox*stride + kj - pad` is in range.
    fn valid_cols(&self, kj: usize, wo: usize) -> (usize, usize) {
        valid_range(kj, self.pad, self.stride, self.w, wo)
    }

    fn valid_rows(&self, ki: usize, ho: usize) -> (usize, usize) {
        valid_range(ki, self.pad, self.stride, self.h, ho)
    }
}

/// Range of output positions `p` with `0 <= p*stride + k - pad < extent`.
fn valid_range(k: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // p*stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(x: &[f64], k: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let x_per = g.c * g.h * g.w;
    let y_per = g.o * ho * wo;
    let mut y = vec![0.0; g.n * y_per];
    par::chunks_mut(&mut y, y_per, |ni, yn| {
        let xn = &x[ni * x_per..(ni + 1) * x_per];
        for oc in 0..g.o {
            let yo = &mut yn[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..g.c {
                let xc = &xn[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_rows(ki, ho);
                    for kj in 0..g.kw {
                        let wv = k[((oc * g.c + ic) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.valid_cols(kj, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let yrow = &mut yo[oy * wo..(oy + 1) * wo];
                            let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox_lo + kj - g.pad;
                                let len = ox_hi - ox_lo;
                                for (yv, xv) in yrow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&xrow[ix0..ix0 + len])
                                {
                                    *yv += wv * xv;
                                }
                            } else {
                                for (ox, yv) in yrow.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                                    *yv += wv * xrow[ox * g.stride + kj - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    y
}

/// Returns `(dx, dk)` for upstream gradient `dy`.
pub fn conv2d_backward(x: &[f64], k: &[f64], dy: &[f64], g: &Conv2dGeom) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let x_per = g.c * g.h * g.w;
    let y_per = g.o * ho * wo;
    let k_len = g.o * g.c * g.kh * g.kw;

    let mut dx = vec![0.0; g.n * x_per];
    par::chunks_mut(&mut dx, x_per, |ni, dxn| {
        let dyn_ = &dy[ni * y_per..(ni + 1) * y_per];
        for oc in 0..g.o {
            let dyo = &dyn_[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..g.c {
                let dxc = &mut dxn[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_rows(ki, ho);
                    for kj in 0..g.kw {
                        let wv = k[((oc * g.c + ic) * g.kh + ki) * g.kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = g.valid_cols(kj, wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let dyrow = &dyo[oy * wo..(oy + 1) * wo];
                            let dxrow = &mut dxc[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                dxrow[ox * g.stride + kj - g.pad] += wv * dyrow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let partials: Vec<Vec<f64>> = par::map(g.n, |ni| {
        let xn = &x[ni * x_per..(ni + 1) * x_per];
        let dyn_ = &dy[ni * y_per..(ni + 1) * y_per];
        let mut dk = vec![0.0; k_len];
        for oc in 0..g.o {
            let dyo = &dyn_[oc * ho * wo..(oc + 1) * ho * wo];
            for ic in 0..g.c {
                let xc = &xn[ic * g.h * g.w..(ic + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = g.valid_rows(ki, ho);
                    for kj in 0..g.kw {
                        let (ox_lo, ox_hi) = g.valid_cols(kj, wo);
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ki - g.pad;
                            let dyrow = &dyo[oy * wo..(oy + 1) * wo];
                            let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                            for ox in ox_lo..ox_hi {
                                acc += dyrow[ox] * xrow[ox * g.stride + kj - g.pad];
                            }
                        }
                        dk[((oc * g.c + ic) * g.kh + ki) * g.kw + kj] += acc;
                    }
                }
            }
        }
        dk
    });
    let mut dk = vec![0.0; k_len];
    for p in &partials {
        for (a, b) in dk.iter_mut().zip(p) {
            *a += b;
        }
    }
    (dx, dk)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.size) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.size) / self.stride + 1
    }

    /// In-range input rows and columns of the window at `(oy, ox)`.
    fn window(&self, oy: usize, ox: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let y0 = (oy * self.stride) as isize - self.pad as isize;
        let x0 = (ox * self.stride) as isize - self.pad as isize;
        let ys = y0.max(0) as usize..((y0 + self.size as isize).min(self.h as isize)).max(0) as usize;
        let xs = x0.max(0) as usize..((x0 + self.size as isize).min(self.w as isize)).max(0) as usize;
        (ys, xs)
    }
}

/// Average pooling over the in-range part of each window (padding excluded
/// from the count).
pub fn avg_pool_forward(a: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.n * g.c * ho * wo];
    let plane_in = g.h * g.w;
    par::chunks_mut(&mut y, ho * wo, |p, yp| {
        let ap = &a[p * plane_in..(p + 1) * plane_in];
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs) = g.window(oy, ox);
                let count = (ys.len() * xs.len()) as f64;
                let mut s = 0.0;
                for iy in ys {
                    for ix in xs.clone() {
                        s += ap[iy * g.w + ix];
                    }
                }
                yp[oy * wo + ox] = s / count;
            }
        }
    });
    y
}

pub fn avg_pool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let mut da = vec![0.0; g.n * g.c * plane_in];
    par::chunks_mut(&mut da, plane_in, |p, dap| {
        let dyp = &dy[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs) = g.window(oy, ox);
                let share = dyp[oy * wo + ox] / (ys.len() * xs.len()) as f64;
                for iy in ys {
                    for ix in xs.clone() {
                        dap[iy * g.w + ix] += share;
                    }
                }
            }
        }
    });
    da
}

/// Max pooling; also returns the flat input index each output was taken from.
/// Ties go to the lowest flat index.
pub fn max_pool_forward(a: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane_in = g.h * g.w;
    let planes = g.n * g.c;
    let per_plane: Vec<(Vec<f64>, Vec<usize>)> = par::map(planes, |p| {
        let ap = &a[p * plane_in..(p + 1) * plane_in];
        let mut vals = Vec::with_capacity(ho * wo);
        let mut idx = Vec::with_capacity(ho * wo);
        for oy in 0..ho {
            for ox in 0..wo {
                let (ys, xs) = g.window(oy, ox);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for iy in ys {
                    for ix in xs.clone() {
                        let i = iy * g.w + ix;
                        // row-major scan visits flat indices in increasing order
                        if ap[i] > best || best_i == usize::MAX {
                            best = ap[i];
                            best_i = i;
                        }
                    }
                }
                vals.push(best);
                idx.push(p * plane_in + best_i);
            }
        }
        (vals, idx)
    });
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for (v, i) in per_plane {
        y.extend(v);
        arg.extend(i);
    }
    (y, arg)
}

pub fn max_pool_backward(dy: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut da = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(argmax) {
        da[i] += g;
    }
    da
}

/// `a (m×k) · b (k×n)`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (cv, bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `aᵀ` for `a` of shape `m×n`.
pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_scan() {
        for extent in 1..7 {
            for pad in 0..3 {
                for stride in 1..3 {
                    for k in 0..3 {
                        if extent + 2 * pad < 3 {
                            continue;
                        }
                        let out = (extent + 2 * pad - 3) / stride + 1;
                        let expect: Vec<usize> = (0..out)
                            .filter(|&p| {
                                let i = (p * stride + k) as isize - pad as isize;
                                i >= 0 && i < extent as isize
                            })
                            .collect();
                        let (lo, hi) = valid_range(k, pad, stride, extent, out);
                        assert_eq!((lo..hi).collect::<Vec<_>>(), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn max_pool_ties_take_lowest_index() {
        let g = PoolGeom { n: 1, c: 1, h: 2, w: 2, size: 3, stride: 1, pad: 1 };
        let (_, arg) = max_pool_forward(&[1.0, 1.0, 1.0, 1.0], &g);
        assert_eq!(arg, vec![0, 0, 0, 0]);
    }
}
