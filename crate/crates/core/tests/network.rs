mod common;

use sanet::engine::{Graph, Init, ParamSpec, ParamStore};
use sanet::losses::{focal_loss, jaccard_loss, FOCAL_GAMMA, JACCARD_EPS};
use sanet::network::{Model, NetworkConfig, SaNet, SegmentationNet, UNet};
use sanet::{Exec, Tensor};

#[test]
fn pyramid_follows_halving_rule() {
    for (size, width) in [(16, 4), (32, 8), (48, 12), (64, 4)] {
        let config = NetworkConfig {
            base_width: width,
            patch_size: size,
            ..NetworkConfig::default()
        };
        let net = SaNet::new(config).unwrap();
        let params = ParamStore::<f32>::placeholder(net.param_specs());
        let mut g = Graph::shape_only(&params);
        let x = g.input_shape(&[4, size, size, size]).unwrap();
        let trace = net.forward_traced(&mut g, x).unwrap();
        for (i, &s) in trace.pyramid.scales.iter().enumerate() {
            let n = size >> i;
            assert_eq!(g.shape(s), [width << i, n, n, n], "scale {} at {size}/{width}", i + 1);
        }
        let n = size >> 4;
        assert_eq!(g.shape(trace.pyramid.endpoint), [width << 4, n, n, n]);
        for &h in &trace.heads.all() {
            assert_eq!(g.shape(h), [3, size, size, size]);
        }
    }
}

#[test]
fn rejects_sizes_not_divisible_by_sixteen() {
    let net = SaNet::new(common::tiny_config(16)).unwrap();
    let params = ParamStore::<f32>::placeholder(net.param_specs());
    let mut g = Graph::shape_only(&params);
    let x = g.input_shape(&[4, 24, 16, 16]).unwrap();
    assert!(net.forward(&mut g, x).is_err());
}

#[test]
fn probabilities_lie_in_unit_interval() {
    let model = common::phantom_model(common::tiny_config(16), 3);
    let x = common::random_input(3, &[4, 16, 16, 16]).map(|v| v * 5.0).cast::<f32>();
    let out = model.forward(&x).unwrap();
    assert_eq!(out.heads().len(), 4);
    for head in out.heads() {
        assert!(head.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn forward_is_deterministic_across_policies() {
    let model = common::phantom_model(common::tiny_config(16), 5);
    let x = common::random_input(5, &[4, 16, 16, 16]).cast::<f32>();
    let a = model.clone().with_exec(Exec::Sequential).forward(&x).unwrap();
    let b = model.clone().with_exec(Exec::Sequential).forward(&x).unwrap();
    let c = model.with_exec(Exec::Parallel).forward(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn single_scale_attention_is_identity() {
    // Two encoder levels leave one attended scale per decoder stage.
    let config = NetworkConfig {
        base_width: 4,
        num_scales: 2,
        patch_size: 8,
        ..NetworkConfig::default()
    };
    let model = Model::<SaNet, f64>::init(SaNet::new(config).unwrap(), 2);
    let x = common::random_input(2, &[4, 8, 8, 8]);
    let mut g = Graph::new(&model.params, Exec::Sequential).unwrap();
    let v = g.input(&x);
    let trace = model.net.forward_traced(&mut g, v).unwrap();
    assert_eq!(trace.attention.len(), 1);
    let st = &trace.attention[0];
    for row in st.weight_rows(&g) {
        assert!(row.iter().all(|&w| w == 1.0));
    }
    assert_eq!(g.value(st.output), g.value(trace.pyramid.scales[0]));
}

#[test]
fn unet_baseline_runs_and_is_larger() {
    let config = common::tiny_config(16);
    let unet = UNet::new(config.clone()).unwrap();
    let sanet = SaNet::new(config).unwrap();
    assert!(unet.parameter_count() > sanet.parameter_count());
    let model = Model::<UNet, f32>::init(unet, 1);
    let out = model.forward(&common::random_input(1, &[4, 16, 16, 16]).cast()).unwrap();
    assert_eq!(out.probabilities.shape(), [3, 16, 16, 16]);
}

#[test]
fn network_gradients_match_finite_differences() {
    let r = common::gradient_check(&common::tiny_config(16), 11, 2);
    assert!(r.max_rel_err < 1e-3, "{} ({} entries)", r.worst, r.entries);
    assert!(r.tensors > 100);
}

fn loss_gradient_check(which: &str) -> f64 {
    let n = 3 * 4 * 4 * 4;
    let pred = common::random_input(9, &[n]).map(|v| 1.0 / (1.0 + (-v).exp()));
    let target = common::random_input(10, &[3, 4, 4, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let spec = ParamSpec {
        name: "p".into(),
        shape: vec![3, 4, 4, 4],
        init: Init::Zeros,
    };
    let params = ParamStore::from_values(&[spec], vec![pred.data().to_vec()]).unwrap();
    let id = params.find("p").unwrap();
    let mut g = Graph::new(&params, Exec::Sequential).unwrap();
    let p = g.param(id);
    let loss = match which {
        "jaccard" => g.jaccard(p, &target, JACCARD_EPS).unwrap(),
        _ => g.focal(p, &target, FOCAL_GAMMA).unwrap(),
    };
    let grads = g.backward(loss).unwrap();
    let analytic = grads.get(id).unwrap();
    let value = |v: &[f64]| {
        let t = Tensor::from_vec(&[3, 4, 4, 4], v.to_vec()).unwrap();
        match which {
            "jaccard" => jaccard_loss(&t, &target).unwrap(),
            _ => focal_loss(&t, &target, FOCAL_GAMMA).unwrap(),
        }
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut v = pred.data().to_vec();
        v[i] += h;
        let up = value(&v);
        v[i] -= 2.0 * h;
        let down = value(&v);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6));
    }
    worst
}

#[test]
fn jaccard_gradient_matches_finite_differences() {
    assert!(loss_gradient_check("jaccard") < 1e-3);
}

#[test]
fn focal_gradient_matches_finite_differences() {
    assert!(loss_gradient_check("focal") < 1e-3);
}
