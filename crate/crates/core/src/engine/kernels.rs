//! Raw forward/adjoint kernels on flat `(C, D, H, W)` buffers.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::Real;

/// Upper bound on elements of one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        in_dims: [usize; 3],
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::shape("kernel and stride must be positive"));
        }
        let mut out_dims = [0; 3];
        for (o, &n) in out_dims.iter_mut().zip(&in_dims) {
            if n + 2 * pad < kernel {
                return Err(Error::shape(format!(
                    "input extent {n} too small for kernel {kernel} with padding {pad}"
                )));
            }
            *o = (n + 2 * pad - kernel) / stride + 1;
        }
        Ok(ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    fn k_rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn plane(&self) -> usize {
        self.out_dims[1] * self.out_dims[2]
    }

    fn out_voxels(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output-depth slabs processed as independent im2col chunks.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per_plane = (self.k_rows() * self.plane()).max(1);
        let step = (COLS_BUDGET / per_plane).max(1);
        (0..self.out_dims[0])
            .step_by(step)
            .map(|z0| (z0, (z0 + step).min(self.out_dims[0])))
            .collect()
    }
}

/// Output indices `o` for which `o * stride + k - pad` lands in `0..n_in`.
fn valid_range(k: usize, pad: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if n_in + pad > k {
        n_out.min((n_in + pad - k - 1) / stride + 1)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, z0: usize, z1: usize, cols: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let pc = (z1 - z0) * ho * wo;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * pc..(row + 1) * pc];
                    let (xlo, xhi) = valid_range(kx, p, s, w, wo);
                    let mut idx = 0;
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            dst[idx..idx + ho * wo].fill(F::zero());
                            idx += ho * wo;
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let line = &mut dst[idx..idx + wo];
                            idx += wo;
                            if iy < 0 || iy >= h as isize {
                                line.fill(F::zero());
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            line[..xlo].fill(F::zero());
                            line[xhi..].fill(F::zero());
                            if s == 1 {
                                let ix0 = xlo + kx - p;
                                line[xlo..xhi].copy_from_slice(&src[ix0..ix0 + xhi - xlo]);
                            } else {
                                for ox in xlo..xhi {
                                    line[ox] = src[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds column entries back into `dx`.
fn col2im<F: Real>(cols: &[F], g: &ConvGeom, z0: usize, z1: usize, dx: &mut [F]) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let pc = (z1 - z0) * ho * wo;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * pc..(row + 1) * pc];
                    let (xlo, xhi) = valid_range(kx, p, s, w, wo);
                    let mut idx = 0;
                    for oz in z0..z1 {
                        let iz = (oz * s + kz) as isize - p as isize;
                        if iz < 0 || iz >= d as isize {
                            idx += ho * wo;
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p as isize;
                            let line = &src[idx..idx + wo];
                            idx += wo;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            for ox in xlo..xhi {
                                dst[ox * s + kx - p] += line[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<F: Real>(exec: Exec, x: &[F], weight: &[F], bias: &[F], g: &ConvGeom) -> Vec<F> {
    let total = g.out_voxels();
    let mut out = vec![F::zero(); g.cout * total];
    if g.is_pointwise() {
        F::gemm(
            g.cout,
            g.cin,
            total,
            F::one(),
            weight,
            (g.cin, 1),
            x,
            (total, 1),
            F::zero(),
            &mut out,
            (total, 1),
        );
    } else {
        let krows = g.k_rows();
        let plane = g.plane();
        let chunks = g.chunks();
        let parts = exec.map(&chunks, |&(z0, z1)| {
            let pc = (z1 - z0) * plane;
            let mut cols = vec![F::zero(); krows * pc];
            im2col(x, g, z0, z1, &mut cols);
            let mut part = vec![F::zero(); g.cout * pc];
            F::gemm(
                g.cout,
                krows,
                pc,
                F::one(),
                weight,
                (krows, 1),
                &cols,
                (pc, 1),
                F::zero(),
                &mut part,
                (pc, 1),
            );
            part
        });
        for (&(z0, z1), part) in chunks.iter().zip(parts) {
            let pc = (z1 - z0) * plane;
            for co in 0..g.cout {
                out[co * total + z0 * plane..][..pc].copy_from_slice(&part[co * pc..(co + 1) * pc]);
            }
        }
    }
    add_channel_bias(exec, &mut out, bias, total);
    out
}

fn add_channel_bias<F: Real>(exec: Exec, out: &mut [F], bias: &[F], per: usize) {
    exec.for_each_chunk_mut(out, per, |c, ch| {
        let b = bias[c];
        ch.iter_mut().for_each(|v| *v += b);
    });
}

pub struct ConvGrads<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub input: Option<Vec<F>>,
}

pub fn conv3d_backward<F: Real>(
    exec: Exec,
    x: &[F],
    weight: &[F],
    g: &ConvGeom,
    dout: &[F],
    need_input: bool,
) -> ConvGrads<F> {
    let total = g.out_voxels();
    let bias: Vec<F> = exec.map_range(g.cout, |co| dout[co * total..(co + 1) * total].iter().copied().sum());
    let krows = g.k_rows();
    let mut dw = vec![F::zero(); g.cout * krows];
    let in_total: usize = g.in_dims.iter().product();
    let mut dx = need_input.then(|| vec![F::zero(); g.cin * in_total]);

    if g.is_pointwise() {
        F::gemm(g.cout, total, g.cin, F::one(), dout, (total, 1), x, (1, total), F::zero(), &mut dw, (g.cin, 1));
        if let Some(dx) = dx.as_mut() {
            F::gemm(g.cin, g.cout, total, F::one(), weight, (1, g.cin), dout, (total, 1), F::zero(), dx, (total, 1));
        }
        return ConvGrads { weight: dw, bias, input: dx };
    }

    let plane = g.plane();
    let chunks = g.chunks();
    for batch in chunks.chunks(exec.width()) {
        let parts = exec.map(batch, |&(z0, z1)| {
            let pc = (z1 - z0) * plane;
            let mut cols = vec![F::zero(); krows * pc];
            im2col(x, g, z0, z1, &mut cols);
            let dchunk = &dout[z0 * plane..];
            let mut dw_part = vec![F::zero(); g.cout * krows];
            F::gemm(g.cout, pc, krows, F::one(), dchunk, (total, 1), &cols, (1, pc), F::zero(), &mut dw_part, (krows, 1));
            let dcols = need_input.then(|| {
                // reuse the column buffer for the input adjoint
                F::gemm(krows, g.cout, pc, F::one(), weight, (1, krows), dchunk, (total, 1), F::zero(), &mut cols, (pc, 1));
                cols
            });
            (dw_part, dcols)
        });
        for (&(z0, z1), (dw_part, dcols)) in batch.iter().zip(parts) {
            dw.iter_mut().zip(&dw_part).for_each(|(a, &b)| *a += b);
            if let (Some(dx), Some(dcols)) = (dx.as_mut(), dcols) {
                col2im(&dcols, g, z0, z1, dx);
            }
        }
    }
    ConvGrads { weight: dw, bias, input: dx }
}

/// Transposed convolution with kernel 2 and stride 2. Weight layout is
/// `(cin, cout, 2, 2, 2)`.
pub fn convt2_forward<F: Real>(
    exec: Exec,
    x: &[F],
    weight: &[F],
    bias: &[F],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
) -> Vec<F> {
    let total: usize = dims.iter().product();
    let rows = cout * 8;
    let mut t = vec![F::zero(); rows * total];
    F::gemm(rows, cin, total, F::one(), weight, (1, rows), x, (total, 1), F::zero(), &mut t, (total, 1));
    let [d, h, w] = dims;
    let out_dims = [2 * d, 2 * h, 2 * w];
    let mut out = vec![F::zero(); cout * 8 * total];
    exec.for_each_chunk_mut(&mut out, 8 * total, |co, oc| {
        let b = bias[co];
        for q in 0..8 {
            let (a, bb, c) = (q >> 2, (q >> 1) & 1, q & 1);
            let src = &t[(co * 8 + q) * total..][..total];
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let o = crate::tensor::offset3(out_dims, 2 * z + a, 2 * y + bb, 2 * xx + c);
                        oc[o] = src[(z * h + y) * w + xx] + b;
                    }
                }
            }
        }
    });
    out
}

pub fn convt2_backward<F: Real>(
    exec: Exec,
    x: &[F],
    weight: &[F],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    dout: &[F],
    need_input: bool,
) -> ConvGrads<F> {
    let total: usize = dims.iter().product();
    let rows = cout * 8;
    let [d, h, w] = dims;
    let out_dims = [2 * d, 2 * h, 2 * w];
    let mut dt = vec![F::zero(); rows * total];
    exec.for_each_chunk_mut(&mut dt, 8 * total, |co, dc| {
        let oc = &dout[co * 8 * total..(co + 1) * 8 * total];
        for q in 0..8 {
            let (a, bb, c) = (q >> 2, (q >> 1) & 1, q & 1);
            let dst = &mut dc[q * total..(q + 1) * total];
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        dst[(z * h + y) * w + xx] =
                            oc[crate::tensor::offset3(out_dims, 2 * z + a, 2 * y + bb, 2 * xx + c)];
                    }
                }
            }
        }
    });
    let bias = exec.map_range(cout, |co| dt[co * 8 * total..(co + 1) * 8 * total].iter().copied().sum());
    let mut dw = vec![F::zero(); cin * rows];
    F::gemm(cin, total, rows, F::one(), x, (total, 1), &dt, (1, total), F::zero(), &mut dw, (rows, 1));
    let input = need_input.then(|| {
        let mut dx = vec![F::zero(); cin * total];
        F::gemm(cin, rows, total, F::one(), weight, (rows, 1), &dt, (total, 1), F::zero(), &mut dx, (total, 1));
        dx
    });
    ConvGrads { weight: dw, bias, input }
}

/// Max pooling with kernel = stride = `factor`. Returns values and the
/// within-channel flat index of each maximum.
pub fn maxpool_forward<F: Real>(
    exec: Exec,
    x: &[F],
    channels: usize,
    dims: [usize; 3],
    factor: usize,
) -> (Vec<F>, Vec<u32>) {
    let [d, h, w] = dims;
    let od = [d / factor, h / factor, w / factor];
    let per_out: usize = od.iter().product();
    let per_in = d * h * w;
    let mut out = vec![F::zero(); channels * per_out];
    let mut arg = vec![0u32; channels * per_out];
    exec.for_each_chunk_pair_mut(&mut out, per_out, &mut arg, per_out, |c, oc, ac| {
        let xc = &x[c * per_in..(c + 1) * per_in];
        for z in 0..od[0] {
            for y in 0..od[1] {
                for xx in 0..od[2] {
                    let mut best = F::neg_infinity();
                    let mut best_i = 0;
                    for a in 0..factor {
                        for b in 0..factor {
                            for cc in 0..factor {
                                let i = crate::tensor::offset3(dims, z * factor + a, y * factor + b, xx * factor + cc);
                                if xc[i] > best {
                                    best = xc[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    let o = crate::tensor::offset3(od, z, y, xx);
                    oc[o] = best;
                    ac[o] = best_i as u32;
                }
            }
        }
    });
    (out, arg)
}

pub fn maxpool_backward<F: Real>(
    exec: Exec,
    dout: &[F],
    argmax: &[u32],
    channels: usize,
    in_dims: [usize; 3],
) -> Vec<F> {
    let per_in: usize = in_dims.iter().product();
    let per_out = dout.len() / channels.max(1);
    let mut dx = vec![F::zero(); channels * per_in];
    exec.for_each_chunk_mut(&mut dx, per_in, |c, dc| {
        for (&g, &i) in dout[c * per_out..(c + 1) * per_out].iter().zip(&argmax[c * per_out..(c + 1) * per_out]) {
            dc[i as usize] += g;
        }
    });
    dx
}

/// Linear interpolation taps for upsampling by an integer factor with
/// half-pixel centers (output sample `o` maps to `(o + 0.5) / f - 0.5`).
fn linear_taps(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Upsamples one axis of a `(outer, n, inner)` view by `factor`.
pub fn resample_forward<F: Real>(
    exec: Exec,
    x: &[F],
    outer: usize,
    n: usize,
    inner: usize,
    factor: usize,
) -> Vec<F> {
    let taps = linear_taps(n, factor);
    let n_out = n * factor;
    let mut y = vec![F::zero(); outer * n_out * inner];
    exec.for_each_chunk_mut(&mut y, n_out * inner, |o, yc| {
        let xc = &x[o * n * inner..(o + 1) * n * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let lam = F::from_f64_lossy(lam);
            let a = F::one() - lam;
            let dst = &mut yc[j * inner..(j + 1) * inner];
            let s0 = &xc[i0 * inner..(i0 + 1) * inner];
            let s1 = &xc[i1 * inner..(i1 + 1) * inner];
            for ((d, &u), &v) in dst.iter_mut().zip(s0).zip(s1) {
                *d = a * u + lam * v;
            }
        }
    });
    y
}

pub fn resample_backward<F: Real>(
    exec: Exec,
    dy: &[F],
    outer: usize,
    n: usize,
    inner: usize,
    factor: usize,
) -> Vec<F> {
    let taps = linear_taps(n, factor);
    let n_out = n * factor;
    let mut dx = vec![F::zero(); outer * n * inner];
    exec.for_each_chunk_mut(&mut dx, n * inner, |o, dc| {
        let yc = &dy[o * n_out * inner..(o + 1) * n_out * inner];
        for (j, &(i0, i1, lam)) in taps.iter().enumerate() {
            let lam = F::from_f64_lossy(lam);
            let a = F::one() - lam;
            let src = &yc[j * inner..(j + 1) * inner];
            for (k, &g) in src.iter().enumerate() {
                dc[i0 * inner + k] += a * g;
                dc[i1 * inner + k] += lam * g;
            }
        }
    });
    dx
}

pub const NORM_EPS: f64 = 1e-5;

/// Instance normalization; returns the output and per-channel
/// `(mean, 1/std)`.
pub fn instance_norm_forward<F: Real>(
    exec: Exec,
    x: &[F],
    gamma: &[F],
    beta: &[F],
    channels: usize,
) -> (Vec<F>, Vec<(F, F)>) {
    let per = x.len() / channels.max(1);
    let n = F::from_usize(per).unwrap();
    let eps = F::from_f64_lossy(NORM_EPS);
    let stats = exec.map_range(channels, |c| {
        let xc = &x[c * per..(c + 1) * per];
        let mean = xc.iter().copied().sum::<F>() / n;
        let var = xc.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        (mean, F::one() / (var + eps).sqrt())
    });
    let mut y = vec![F::zero(); x.len()];
    exec.for_each_chunk_mut(&mut y, per, |c, yc| {
        let (mean, inv) = stats[c];
        let (g, b) = (gamma[c], beta[c]);
        for (o, &v) in yc.iter_mut().zip(&x[c * per..(c + 1) * per]) {
            *o = g * (v - mean) * inv + b;
        }
    });
    (y, stats)
}

pub struct NormGrads<F> {
    pub input: Vec<F>,
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
}

pub fn instance_norm_backward<F: Real>(
    exec: Exec,
    x: &[F],
    gamma: &[F],
    stats: &[(F, F)],
    dy: &[F],
) -> NormGrads<F> {
    let channels = stats.len();
    let per = x.len() / channels.max(1);
    let n = F::from_usize(per).unwrap();
    // (sum dy, sum dy * xhat)
    let sums = exec.map_range(channels, |c| {
        let (mean, inv) = stats[c];
        let mut s = F::zero();
        let mut sx = F::zero();
        for (&g, &v) in dy[c * per..(c + 1) * per].iter().zip(&x[c * per..(c + 1) * per]) {
            s += g;
            sx += g * (v - mean) * inv;
        }
        (s, sx)
    });
    let mut dx = vec![F::zero(); x.len()];
    exec.for_each_chunk_mut(&mut dx, per, |c, dc| {
        let (mean, inv) = stats[c];
        let (s, sx) = sums[c];
        let scale = gamma[c] * inv / n;
        for ((o, &g), &v) in dc.iter_mut().zip(&dy[c * per..(c + 1) * per]).zip(&x[c * per..(c + 1) * per]) {
            let xhat = (v - mean) * inv;
            *o = scale * (n * g - s - xhat * sx);
        }
    });
    NormGrads {
        input: dx,
        gamma: sums.iter().map(|&(_, sx)| sx).collect(),
        beta: sums.iter().map(|&(s, _)| s).collect(),
    }
}
