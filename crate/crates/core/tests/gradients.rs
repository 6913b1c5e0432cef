use nowcast_core::autodiff::finite_difference;
use nowcast_core::rng::{stream, Stream};
use nowcast_core::tensor::{conv2d, conv2d_backward};
use nowcast_core::train::fit::sample_gradients;
use nowcast_core::{Model, ModelConfig, Tape, Tensor};
use rand::Rng;

const H: f64 = 1e-4;

fn random(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Synthetic);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        conv_filters: 4,
        convlstm_filters: 2,
        dropout_rate: 0.0,
        ..ModelConfig::for_input(3, 3, 3, 2)
    }
}

/// Loss of a batch in which the second sample is up-weighted.
fn batch_loss(model: &Model, xs: &[Tensor], ys: &[f64], ws: &[f64]) -> f64 {
    xs.iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (y - model.forward(x).unwrap()).powi(2))
        .sum::<f64>()
        / xs.len() as f64
}

/// Pre-activation signs of the convolution feature layer for every step.
fn relu_pattern(model: &Model, xs: &[Tensor]) -> Vec<bool> {
    let mut out = Vec::new();
    for x in xs {
        for t in 0..x.shape()[0] {
            let z = conv2d(&x.slice_outer(t), &model.conv.kernel, Some(&model.conv.bias)).unwrap();
            out.extend(z.data().iter().map(|&v| v > 0.0));
        }
    }
    out
}

#[test]
fn model_gradients_match_central_differences() {
    let mut model = Model::init(tiny_config(), 5).unwrap();
    model.head.bias.data_mut()[0] = 0.3;
    let xs: Vec<Tensor> = (0..3).map(|i| random(vec![3, 3, 3, 2], 10 + i)).collect();
    let ys = [0.5, 1.7, 0.2];
    let ws = [1.0, 5.0, 1.0];

    let mut analytic: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros_like(p)).collect();
    for ((x, &y), &w) in xs.iter().zip(&ys).zip(&ws) {
        let s = nowcast_core::data::SequenceSample {
            x: x.clone(),
            y,
            target_date: chrono::NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
        };
        let (_, g) = sample_gradients(&model, &s, w, xs.len(), None).unwrap();
        for (a, gi) in analytic.iter_mut().zip(&g) {
            a.axpy(1.0, gi).unwrap();
        }
    }

    let base_pattern = relu_pattern(&model, &xs);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    for (p, name) in Model::PARAM_NAMES.iter().enumerate() {
        for i in 0..analytic[p].len() {
            let mut probe = model.clone();
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + H;
            let plus = batch_loss(&probe, &xs, &ys, &ws);
            let kink_plus = relu_pattern(&probe, &xs) != base_pattern;
            probe.params_mut()[p].data_mut()[i] = orig - H;
            let minus = batch_loss(&probe, &xs, &ys, &ws);
            let kink_minus = relu_pattern(&probe, &xs) != base_pattern;
            if kink_plus || kink_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * H);
            let e = rel_err(analytic[p].data()[i], numeric);
            assert!(e < 1e-4, "{name}[{i}]: analytic {} numeric {numeric}", analytic[p].data()[i]);
            worst = worst.max(e);
        }
    }
    assert!(skipped < 5, "{skipped} parameters sit on a relu kink");
    assert!(worst < 1e-4);
}

#[test]
fn conv_backward_matches_finite_differences() {
    for (k, cin, cout, seed) in [(1usize, 2usize, 3usize, 1u64), (3, 3, 2, 2), (5, 2, 2, 3)] {
        let x = random(vec![4, 5, cin], seed);
        let w = random(vec![k, k, cin, cout], seed + 10);
        let b = random(vec![cout], seed + 20);
        let up = random(vec![4, 5, cout], seed + 30);
        let objective = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv2d(x, w, Some(b)).unwrap().data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
        };
        let (mut gx, mut gw, mut gb) = (Tensor::zeros_like(&x), Tensor::zeros_like(&w), Tensor::zeros_like(&b));
        conv2d_backward(&x, &w, &up, Some(&mut gx), Some(&mut gw), Some(&mut gb)).unwrap();
        let nx = finite_difference(&x, H, |x| objective(x, &w, &b));
        let nw = finite_difference(&w, H, |w| objective(&x, w, &b));
        let nb = finite_difference(&b, H, |b| objective(&x, &w, b));
        for (a, n) in [(&gx, &nx), (&gw, &nw), (&gb, &nb)] {
            for (u, v) in a.data().iter().zip(n.data()) {
                assert!(rel_err(*u, *v) < 1e-7, "k={k}: {u} vs {v}");
            }
        }
    }
}

#[test]
fn taped_gate_chain_matches_finite_differences() {
    let a0 = random(vec![2, 3], 7);
    let b0 = random(vec![2, 3], 8);
    let f = |a: &Tensor, b: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let s = tape.sigmoid(a);
        let t = tape.tanh(b);
        let m = tape.mul(s, t).unwrap();
        let r = tape.relu(m);
        let q = tape.mul(r, m).unwrap();
        let out = tape.sum(q);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let (a, b) = (tape.param(a0.clone()), tape.param(b0.clone()));
    let s = tape.sigmoid(a);
    let t = tape.tanh(b);
    let m = tape.mul(s, t).unwrap();
    let r = tape.relu(m);
    let q = tape.mul(r, m).unwrap();
    let out = tape.sum(q);
    let g = tape.backward(out).unwrap();
    let na = finite_difference(&a0, H, |a| f(a, &b0));
    let nb = finite_difference(&b0, H, |b| f(&a0, b));
    for (u, v) in g.get(a).data().iter().zip(na.data()) {
        assert!(rel_err(*u, *v) < 1e-6);
    }
    for (u, v) in g.get(b).data().iter().zip(nb.data()) {
        assert!(rel_err(*u, *v) < 1e-6);
    }
}
