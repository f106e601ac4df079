//! Central-difference checks for every op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Projects `op(inputs)` onto fixed random weights so any output shape
/// reduces to a scalar, then compares the tape gradient of every input with
/// central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, op: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval = |vals: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> (f64, Vec<Tensor<f64>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars);
        let proj = proj.cloned().unwrap_or_else(|| {
            let mut r = ChaCha8Rng::seed_from_u64(99);
            random(g.shape(out), &mut r)
        });
        let pv = g.constant(proj.clone());
        let prod = g.mul(out, pv);
        let loss = g.sum_all(prod);
        let grads = g.backward(loss);
        let gs = vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        (g.scalar_value(loss), gs, proj)
    };
    let (_, analytic, proj) = eval(&inputs, None);
    let h = 1e-6;
    for (i, inp) in inputs.iter().enumerate() {
        // sample a subset of coordinates for large inputs
        let n = inp.numel();
        let coords: Vec<usize> = if n <= 64 {
            (0..n).collect()
        } else {
            (0..64).map(|_| rng.random_range(0..n)).collect()
        };
        for j in coords {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * h);
            let an = analytic[i].data()[j];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "input {i} coord {j}: analytic {an} vs fd {fd}");
        }
    }
}

#[test]
fn conv2d_stride_one_and_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for stride in [1, 2] {
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let b = random(&[4], &mut rng);
        check(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1));
    }
    let x = random(&[1, 2, 5, 5], &mut rng);
    let w = random(&[3, 2, 5, 5], &mut rng);
    check(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
}

#[test]
fn linear_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[3, 5], &mut rng);
    let w = random(&[4, 5], &mut rng);
    let b = random(&[4], &mut rng);
    check(vec![x.clone(), w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
    check(vec![x.clone()], |g, v| g.mean_rows(v[0]));
    check(vec![x.clone()], |g, v| g.logsumexp_rows(v[0]));
    check(vec![x], |g, v| g.mean_all(v[0]));
}

#[test]
fn pointwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 7], &mut rng);
    let b = random(&[2, 7], &mut rng);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check(vec![a.clone()], |g, v| g.tanh(v[0]));
    check(vec![a.clone()], |g, v| g.exp(v[0]));
    check(vec![a.clone()], |g, v| g.square(v[0]));
    check(vec![a.clone()], |g, v| g.sin(v[0]));
    check(vec![a.clone()], |g, v| g.soft_round(v[0]));
    check(vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check(vec![a.clone()], |g, v| g.abs_smooth(v[0], 1e-3));
    check(vec![a.map(|x| x.abs() + 0.5)], |g, v| g.ln(v[0]));
}

#[test]
fn spatial_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let y = random(&[2, 2, 8, 8], &mut rng);
    check(vec![x.clone()], |g, v| g.upsample_nearest(v[0], 16, 12));
    check(vec![random(&[1, 2, 1, 1], &mut rng)], |g, v| g.upsample_nearest(v[0], 2, 2));
    check(vec![x.clone()], |g, v| g.avg_pool(v[0], 2));
    check(vec![x.clone()], |g, v| g.global_avg_pool(v[0]));
    check(vec![x.clone()], |g, v| g.pad_reflect(v[0], 2));
    check(vec![x.clone(), y], |g, v| g.concat_channels(&[v[0], v[1]]));
    check(vec![x.clone()], |g, v| g.permute_channels(v[0], &[2, 0, 1]));
    check(vec![x.clone()], |g, v| g.block_dct8(v[0], false));
    check(vec![x.clone()], |g, v| g.block_dct8(v[0], true));
    check(vec![x.clone()], |g, v| g.reshape(v[0], &[2, 192]));
    let m = [[0.3, 0.5, 0.2], [-0.1, 0.4, 0.7], [0.9, -0.3, 0.1]];
    check(vec![x.clone()], move |g, v| g.color_affine(v[0], m, [1.0, 2.0, 3.0]));
    let tables: Vec<[f64; 64]> = (0..3)
        .map(|c| std::array::from_fn(|i| 1.0 + (i + c) as f64 * 0.1))
        .collect();
    check(vec![x], move |g, v| g.mul_block_table(v[0], &tables));
}

#[test]
fn block_dct_round_trips_and_matches_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[1, 1, 8, 16], &mut rng);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let f = g.block_dct8(v, false);
    let back = g.block_dct8(f, true);
    for (a, b) in g.value(back).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // DC coefficient of the first block is sum/8 for an orthonormal DCT
    let dc: f64 = (0..8)
        .flat_map(|i| (0..8).map(move |j| (i, j)))
        .map(|(i, j)| x.data()[i * 16 + j])
        .sum::<f64>()
        / 8.0;
    assert!((g.value(f).data()[0] - dc).abs() < 1e-12);
}

#[test]
fn frozen_inputs_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::from_f64(&[1, 1, 4, 4], &[0.5; 16]));
    let w = g.constant(Tensor::from_f64(&[1, 1, 3, 3], &[0.1; 9]));
    let y = g.conv2d(x, w, None, 1, 1);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert!(grads.get(x).is_some());
    assert!(grads.get(w).is_none());
}
