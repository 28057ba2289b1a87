//! Exact squared Euclidean distance transform (Felzenszwalb and
//! Huttenlocher), separable over the three axes with anisotropic spacing.

use crate::exec::Exec;

/// Squared distance from every voxel to the nearest voxel with
/// `feature[i] == true`, in physical units. `f64::INFINITY` when there are
/// no features.
pub fn squared_edt(exec: Exec, feature: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = feature
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    for axis in (0..3).rev() {
        pass(exec, &mut d, dims, axis, spacing[axis] * spacing[axis]);
    }
    d
}

fn pass(exec: Exec, d: &mut [f64], dims: [usize; 3], axis: usize, w: f64) {
    let n = dims[axis];
    if n == 0 {
        return;
    }
    if axis == 2 {
        exec.for_each_chunk_mut(d, n, |_, line| transform_line(line, w));
        return;
    }
    // Gather lines along `axis` into contiguous rows, transform, scatter.
    let stride = if axis == 0 { dims[1] * dims[2] } else { dims[2] };
    let lines = d.len() / n;
    let start = |l: usize| {
        if axis == 0 {
            l
        } else {
            let (z, x) = (l / dims[2], l % dims[2]);
            z * dims[1] * dims[2] + x
        }
    };
    let mut rows = vec![0.0; d.len()];
    for l in 0..lines {
        let s = start(l);
        for i in 0..n {
            rows[l * n + i] = d[s + i * stride];
        }
    }
    exec.for_each_chunk_mut(&mut rows, n, |_, line| transform_line(line, w));
    for l in 0..lines {
        let s = start(l);
        for i in 0..n {
            d[s + i * stride] = rows[l * n + i];
        }
    }
}

/// 1-D lower envelope of parabolas `f(p) + w (q - p)^2`.
fn transform_line(f: &mut [f64], w: f64) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let src = f.to_vec();
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    let intersect = |p: usize, q: usize| {
        let (pf, qf) = (p as f64, q as f64);
        ((src[q] + w * qf * qf) - (src[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
    };
    for &q in &sites {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.clear();
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = intersect(p, q);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                        if v.is_empty() {
                            z.clear();
                        }
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut k = 0;
    for (q, out) in f.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k];
        let dq = qf - p as f64;
        *out = src[p] + w * dq * dq;
    }
}
