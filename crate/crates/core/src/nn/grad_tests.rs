//! Finite-difference checks of every graph op.

use super::*;
use crate::seed::rng_from_seed;
use rand::Rng;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Loss = Σ out ⊙ probe, so d loss / d out = probe.
fn loss_and_grads(
    store: &mut ParamStore,
    input: &Tensor,
    probe_seed: u64,
    build: &dyn Fn(&mut Graph, NodeId) -> NodeId,
) -> (f64, Tensor) {
    let mut g = Graph::new(store, true);
    let x = g.input(input.clone());
    let y = build(&mut g, x);
    let probe = random_tensor(g.value(y).shape(), probe_seed);
    let loss: f64 = g
        .value(y)
        .data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| (*a as f64) * (*b as f64))
        .sum();
    g.backward(y, probe);
    (loss, Tensor::zeros(&[0]))
}

fn loss_only(store: &mut ParamStore, input: &Tensor, probe_seed: u64, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    // Same as above but on a throwaway copy so batch-norm statistics stay put.
    let mut scratch = store.clone();
    let mut g = Graph::new(&mut scratch, true);
    let x = g.input(input.clone());
    let y = build(&mut g, x);
    let probe = random_tensor(g.value(y).shape(), probe_seed);
    g.value(y)
        .data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| (*a as f64) * (*b as f64))
        .sum()
}

/// Checks parameter gradients against central differences; returns the
/// worst relative error over all parameters (norm-wise).
fn check_params(store: &mut ParamStore, input: &Tensor, h: f32, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    store.zero_grad();
    let mut snapshot = store.clone();
    loss_and_grads(&mut snapshot, input, 99, build);
    let mut worst = 0.0f64;
    for pi in 0..store.params().len() {
        let analytic = snapshot.params()[pi].grad.clone();
        let mut num = vec![0.0f64; analytic.len()];
        for j in 0..analytic.len() {
            let orig = store.params()[pi].value.data()[j];
            store.params_mut()[pi].value.data_mut()[j] = orig + h;
            let lp = loss_only(store, input, 99, build);
            store.params_mut()[pi].value.data_mut()[j] = orig - h;
            let lm = loss_only(store, input, 99, build);
            store.params_mut()[pi].value.data_mut()[j] = orig;
            num[j] = (lp - lm) / (2.0 * h as f64);
        }
        let diff: f64 = num
            .iter()
            .zip(analytic.data())
            .map(|(a, b)| (a - *b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        worst = worst.max(diff / norm);
    }
    worst
}

/// Checks the gradient w.r.t. the graph input by wrapping it in a 1x1 conv
/// with identity weights that is itself trainable.
fn check_input(shape: &[usize], h: f32, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    check_input_with(ParamStore::new(), shape, h, build)
}

fn check_input_with(mut store: ParamStore, shape: &[usize], h: f32, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    let input = random_tensor(shape, 5);
    let c = shape[1];
    let mut eye = Tensor::zeros(&[c, c, 1, 1]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    let w = store.add("eye", eye, None);
    let wrapped = move |g: &mut Graph, x: NodeId| {
        let y = g.conv2d(x, w, None, Conv2dSpec { stride: 1, pad: 0 });
        build(g, y)
    };
    check_params(&mut store, &input, h, &wrapped)
}

#[test]
fn conv_with_stride_and_padding() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(3);
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 2, 1, true, None, &mut rng);
    let input = random_tensor(&[2, 2, 5, 5], 1);
    let err = check_params(&mut store, &input, 1e-2, &|g, x| conv.forward(g, x));
    assert!(err < 1e-3, "conv param grad error {err}");
    let err = check_input_with(store.clone(), &[2, 2, 5, 5], 1e-2, &move |g, x| {
        let y = g.conv2d(x, conv.weight, conv.bias, conv.spec);
        g.relu(y)
    });
    assert!(err < 1e-2, "conv input grad error {err}");
}

#[test]
fn linear_and_flatten() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(4);
    let lin = Linear::new(&mut store, "l", 12, 5, &mut rng);
    let input = random_tensor(&[3, 3, 2, 2], 2);
    let err = check_params(&mut store, &input, 1e-2, &|g, x| {
        let f = g.flatten(x);
        lin.forward(g, f)
    });
    assert!(err < 1e-3, "linear grad error {err}");
}

#[test]
fn pooling_ops() {
    for k in 0..3 {
        let err = check_input(&[2, 2, 6, 6], 1e-3, &move |g, x| match k {
            0 => g.max_pool(x, 3, 2, 1),
            1 => g.avg_pool(x, 2),
            _ => g.adaptive_avg_pool(x, 2, 3),
        });
        assert!(err < 1e-2, "pool {k} grad error {err}");
    }
}

#[test]
fn add_and_concat() {
    let err = check_input(&[2, 2, 3, 3], 1e-2, &|g, x| {
        let r = g.relu(x);
        let s = g.add(x, r);
        g.concat(&[s, x, r])
    });
    assert!(err < 1e-2, "add/concat grad error {err}");
}

#[test]
fn batch_norm_training_mode() {
    let mut store = ParamStore::new();
    let bn = BatchNorm2d::new(&mut store, "bn", 3, None);
    let mut rng = rng_from_seed(6);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.5f32..0.5);
        }
    }
    let input = random_tensor(&[4, 3, 2, 2], 3);
    let err = check_params(&mut store, &input, 1e-2, &|g, x| bn.forward(g, x));
    assert!(err < 1e-3, "bn param grad error {err}");
    let err = check_input_with(store.clone(), &[4, 3, 2, 2], 1e-2, &move |g, x| {
        let y = g.batch_norm(x, bn.gamma, bn.beta, bn.running_mean, bn.running_var, 0.1, 1e-5);
        g.relu(y)
    });
    assert!(err < 2e-2, "bn input grad error {err}");
}

#[test]
fn frozen_params_get_no_gradient_and_bn_stats_stay() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(7);
    let conv = Conv2d::new(&mut store, "c", 2, 2, 3, 1, 1, true, Some(0), &mut rng);
    let bn = BatchNorm2d::new(&mut store, "bn", 2, Some(0));
    store.set_block_trainability(&[false]);
    let before = store.clone();
    let mut g = Graph::new(&mut store, true);
    let x = g.input(random_tensor(&[2, 2, 4, 4], 1));
    let y = conv.forward(&mut g, x);
    let y = bn.forward(&mut g, y);
    let seed = Tensor::full(g.value(y).shape(), 1.0);
    g.backward(y, seed);
    for (a, b) in store.params().iter().zip(before.params()) {
        assert_eq!(a.value, b.value);
        assert!(a.grad.data().iter().all(|v| *v == 0.0));
    }
    for (a, b) in store.buffers().iter().zip(before.buffers()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn inference_graph_matches_eval_mode() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(8);
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, true, None, &mut rng);
    let bn = BatchNorm2d::new(&mut store, "bn", 3, None);
    let input = random_tensor(&[2, 2, 4, 4], 4);
    let eval = {
        let mut g = Graph::new(&mut store, false);
        let x = g.input(input.clone());
        let y = conv.forward(&mut g, x);
        let y = bn.forward(&mut g, y);
        g.value(y).clone()
    };
    let mut g = Graph::inference(&store);
    let x = g.input(input);
    let y = conv.forward(&mut g, x);
    let y = bn.forward(&mut g, y);
    assert_eq!(g.value(y), &eval);
}

#[test]
fn adam_moves_toward_minimum() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap(), None);
    let mut opt = Adam::new(&store, 0.1);
    for _ in 0..500 {
        store.zero_grad();
        let v = store.param(w).value.data().to_vec();
        let grad: Vec<f32> = v.iter().map(|x| 2.0 * x).collect();
        store.param_mut(w).grad.data_mut().copy_from_slice(&grad);
        opt.step(&mut store);
    }
    assert!(store.param(w).value.data().iter().all(|v| v.abs() < 1e-2));
}

#[test]
fn weight_file_round_trip() {
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(9);
    Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, true, None, &mut rng);
    BatchNorm2d::new(&mut store, "bn", 3, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    save_weights(&store, &path).unwrap();
    let mut other = ParamStore::new();
    Conv2d::new(&mut other, "c", 2, 3, 3, 1, 1, true, None, &mut rng_from_seed(10));
    BatchNorm2d::new(&mut other, "bn", 3, None);
    assert_eq!(load_weights(&mut other, &path, true).unwrap(), 6);
    for (a, b) in store.params().iter().zip(other.params()) {
        assert_eq!(a.value, b.value);
    }
    std::fs::write(&path, b"nope").unwrap();
    assert!(matches!(read_weights(&path), Err(crate::Error::BadMagic(_))));
}
