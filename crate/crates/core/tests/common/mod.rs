//! Shared helpers and independent oracles for the integration tests.
#![allow(dead_code)]

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sanet::data::{encode_regions, synth_phantom};
use sanet::engine::Graph;
use sanet::losses::{total_loss_graph, LossConfig};
use sanet::network::{Model, NetworkConfig, SaNet, SegmentationNet};
use sanet::Tensor;

pub fn tiny_config(patch: usize) -> NetworkConfig {
    NetworkConfig {
        base_width: 4,
        patch_size: patch,
        ..NetworkConfig::default()
    }
}

pub fn random_input(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Composite loss of all heads for the model's current weights.
pub fn loss_value(model: &Model<SaNet, f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> f64 {
    let mut g = Graph::new(&model.params, model.exec).unwrap();
    let v = g.input(x);
    let heads = model.net.forward(&mut g, v).unwrap();
    let (loss, _) = total_loss_graph(&mut g, &heads.all(), target, &LossConfig::default()).unwrap();
    g.scalar(loss)
}

pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: String,
    pub entries: usize,
    pub tensors: usize,
    /// Entries whose step had to shrink because a ReLU kink fell inside it.
    pub refined: usize,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Model, input and phantom target for a gradient check at `seed`.
pub fn check_point(config: &NetworkConfig, seed: u64) -> (Model<SaNet, f64>, Tensor<f64>, Tensor<f64>) {
    let s = config.patch_size;
    let mut model = Model::<SaNet, f64>::init(SaNet::new(config.clone()).unwrap(), seed);
    // Zero biases and unit/zero norm affines park some ReLUs exactly on their
    // kink (a one-voxel endpoint norm, or a projection of a dead voxel), where
    // one-sided slopes differ. Move them to a generic point first.
    let mut jitter = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = &model.params.spec(id).name;
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            for v in model.params.get_mut(id) {
                *v += jitter.random_range(-0.2..0.2);
            }
        }
    }
    let x = random_input(seed ^ 0x5eed, &[config.in_channels, s, s, s]);
    let labels = synth_phantom(seed, s).unwrap().labels.unwrap();
    let target = encode_regions(&labels).unwrap().to_tensor::<f64>();
    (model, x, target)
}

/// Compares reverse-mode gradients against central differences for every
/// parameter tensor: its largest-gradient entry plus `per_tensor - 1`
/// random entries. Relative error is `|a - n| / max(|a|, |n|, 1e-5)`.
///
/// The loss is only piecewise smooth. When the two one-sided slopes disagree
/// by more than the tolerance plus their roundoff (`1e-12 / h`, ten times
/// the observed loss noise), a kink lies within `[-h, h]` and the central
/// difference means nothing there. Starting from `h = 1e-4`, the step
/// shrinks until the slopes agree, down to `1e-7`, before comparing.
pub fn gradient_check(config: &NetworkConfig, seed: u64, per_tensor: usize) -> GradCheck {
    let (mut model, x, target) = check_point(config, seed);

    let grads = {
        let mut g = Graph::new(&model.params, model.exec).unwrap();
        let v = g.input(&x);
        let heads = model.net.forward(&mut g, v).unwrap();
        let (loss, _) = total_loss_graph(&mut g, &heads.all(), &target, &LossConfig::default()).unwrap();
        g.backward(loss).unwrap()
    };

    let center = loss_value(&model, &x, &target);
    let ids: Vec<_> = model.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        entries: 0,
        tensors: 0,
        refined: 0,
    };
    for id in ids {
        let analytic: Vec<f64> = grads.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; model.params.get(id).len()]);
        let n = analytic.len();
        let argmax = (0..n).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())).unwrap();
        let mut picks = vec![argmax];
        for _ in 1..per_tensor.min(n) {
            picks.push(rng.random_range(0..n));
        }
        for i in picks {
            let orig = model.params.get(id)[i];
            let mut numeric = 0.0;
            const STEPS: [f64; 7] = [1e-4, 3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7];
            for (k, h) in STEPS.into_iter().enumerate() {
                model.params.get_mut(id)[i] = orig + h;
                let up = loss_value(&model, &x, &target);
                model.params.get_mut(id)[i] = orig - h;
                let down = loss_value(&model, &x, &target);
                model.params.get_mut(id)[i] = orig;
                numeric = (up - down) / (2.0 * h);
                let (fwd, bwd) = ((up - center) / h, (center - down) / h);
                if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()) + 1e-12 / h || k + 1 == STEPS.len() {
                    out.refined += usize::from(k > 0);
                    break;
                }
            }
            let a = analytic[i];
            let rel = rel_err(a, numeric);
            if rel > out.max_rel_err {
                out.max_rel_err = rel;
                out.worst = format!("{}[{i}] analytic {a:.3e} numeric {numeric:.3e}", model.params.spec(id).name);
            }
            out.entries += 1;
        }
        out.tensors += 1;
    }
    out
}

/// Foreground voxels with a 6-neighbor outside the mask (grid exterior
/// counts as outside).
pub fn brute_surface(m: &Array3<u8>) -> Vec<[i64; 3]> {
    let (d, h, w) = m.dim();
    let inside = |z: i64, y: i64, x: i64| {
        (0..d as i64).contains(&z) && (0..h as i64).contains(&y) && (0..w as i64).contains(&x) && m[[z as usize, y as usize, x as usize]] != 0
    };
    let mut pts = Vec::new();
    for ((z, y, x), &v) in m.indexed_iter() {
        let (z, y, x) = (z as i64, y as i64, x as i64);
        if v != 0 {
            let n6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
            if n6.iter().any(|&(a, b, c)| !inside(z + a, y + b, x + c)) {
                pts.push([z, y, x]);
            }
        }
    }
    pts
}

/// All-pairs nearest surface distances in both directions, 95th percentile
/// by linear interpolation between order statistics.
pub fn brute_hd95(a: &Array3<u8>, b: &Array3<u8>, spacing: [f64; 3]) -> Option<f64> {
    let sa = brute_surface(a);
    let sb = brute_surface(b);
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| {
                (0..3)
                    .map(|k| ((p[k] - q[k]) as f64 * spacing[k]).powi(2))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let mut d: Vec<f64> = sa.iter().map(|p| nearest(p, &sb)).chain(sb.iter().map(|p| nearest(p, &sa))).collect();
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(d[lo] + (d[hi] - d[lo]) * (pos - lo as f64))
}

/// Random binary mask built from a few boxes plus speckle.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<u8> {
    let mut m = Array3::<u8>::zeros(dims);
    let boxes = rng.random_range(1..4);
    for _ in 0..boxes {
        let lo = [dims.0, dims.1, dims.2].map(|n| rng.random_range(0..n));
        let hi = [0, 1, 2].map(|k| (lo[k] + rng.random_range(1..=4)).min([dims.0, dims.1, dims.2][k]));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    m[[z, y, x]] = 1;
                }
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(0.03) {
            *v = 1;
        }
    }
    m
}

pub fn random_labels(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<u8> {
    Array3::from_shape_simple_fn(dims, || [0u8, 1, 2, 4][rng.random_range(0..4)])
}

pub fn phantom_model(config: NetworkConfig, seed: u64) -> Model<SaNet, f32> {
    Model::init(SaNet::new(config).unwrap(), seed)
}
