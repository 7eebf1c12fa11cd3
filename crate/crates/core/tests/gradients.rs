//! Analytic gradients vs central finite differences, per operator class.
//!
//! The differencing side re-records a fresh tape per evaluation and only
//! reads forward values, so it is independent of the adjoint code path.

use fino_core::gradcheck::{finite_difference_grads, max_relative_error};
use fino_core::tensor::{PaddingMode, Tape, Tensor, VarId};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds a scalar loss from recorded leaves.
type Builder<'a> = &'a dyn Fn(&mut Tape<f64>, &[VarId]) -> VarId;

fn check(builder: Builder, params: &[Tensor<f64>], label: &str) {
    let mut tape = Tape::<f64>::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = builder(&mut tape, &ids);
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
        })
        .collect();

    let mut eval = |ps: &[Tensor<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let ids: Vec<VarId> = ps.iter().map(|p| t.constant(p.clone())).collect();
        let loss = builder(&mut t, &ids);
        t.value(loss).item().unwrap()
    };
    let numeric = finite_difference_grads(&mut eval, params, STEP);

    let err = max_relative_error(&analytic, &numeric);
    assert!(
        err <= REL_TOL,
        "{label}: gradient mismatch, worst relative error {err:.3e}"
    );
}

#[test]
fn conv2d_gradients_periodic_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    check(
        &|t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], PaddingMode::Periodic).unwrap();
            t.sum_all(y)
        },
        &[x, k, b],
        "conv2d periodic 2d",
    );
}

#[test]
fn conv2d_gradients_zero_pad_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[1, 2, 1, 7]);
    let k = rand_tensor(&mut rng, &[3, 2, 1, 5]);
    let b = rand_tensor(&mut rng, &[3]);
    check(
        &|t, ids| {
            let y = t.conv2d(ids[0], ids[1], ids[2], PaddingMode::Zero).unwrap();
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq)
        },
        &[x, k, b],
        "conv2d zero row (squared)",
    );
}

#[test]
fn pool_and_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[2, 2, 4, 6]);
    check(
        &|t, ids| {
            let p = t.avg_pool(ids[0], 2, 2).unwrap();
            let u = t.upsample(p, 2, 2).unwrap();
            let d = t.sub(u, ids[0]).unwrap();
            let sq = t.mul(d, d).unwrap();
            t.sum_all(sq)
        },
        &[x],
        "pool + upsample reconstruction",
    );
}

#[test]
fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // Keep inputs off the kink so differencing is well posed.
    let mut x = rand_tensor(&mut rng, &[1, 2, 3, 5]);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    check(
        &|t, ids| {
            let y = t.relu(ids[0]);
            let sq = t.mul(y, y).unwrap();
            t.sum_all(sq)
        },
        &[x],
        "relu",
    );
}

#[test]
fn sigmoid_gate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[1, 2, 2, 4]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2]);
    check(
        &|t, ids| {
            let pre = t.conv2d(ids[0], ids[1], ids[2], PaddingMode::Periodic).unwrap();
            let mask = t.sigmoid(pre);
            let gated = t.mul(mask, ids[0]).unwrap();
            t.sum_all(gated)
        },
        &[x, w, b],
        "sigmoid gate",
    );
}

#[test]
fn exp_scalar_scaling_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let raw = Tensor::from_scalar(-0.7);
    let x = rand_tensor(&mut rng, &[1, 1, 2, 6]);
    let target = rand_tensor(&mut rng, &[1, 1, 2, 6]);
    check(
        &|t, ids| {
            let s = t.exp(ids[0]);
            let scaled = t.mul_scalar(ids[1], s).unwrap();
            let stepped = t.add(ids[1], scaled).unwrap();
            t.sum_squared_diff(stepped, ids[2]).unwrap()
        },
        &[raw, x, target],
        "exp-reparameterized step scale",
    );
}

#[test]
fn concat_slice_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = rand_tensor(&mut rng, &[2, 1, 2, 3]);
    let b = rand_tensor(&mut rng, &[2, 2, 2, 3]);
    check(
        &|t, ids| {
            let cat = t.concat_channels(&[ids[0], ids[1]]).unwrap();
            let part = t.slice_channels(cat, 1, 3).unwrap();
            let scaled = t.scale(part, 0.37);
            let sq = t.mul(scaled, scaled).unwrap();
            t.sum_all(sq)
        },
        &[a, b],
        "concat + slice + scale",
    );
}

#[test]
fn composite_chain_gradient() {
    // Two stacked gated conv blocks ending in a squared-error loss.
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let k1 = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let b1 = rand_tensor(&mut rng, &[2]);
    let k2 = rand_tensor(&mut rng, &[2, 2, 1, 1]);
    let b2 = rand_tensor(&mut rng, &[2]);
    let tgt = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    check(
        &|t, ids| {
            let c1 = t.conv2d(ids[0], ids[1], ids[2], PaddingMode::Periodic).unwrap();
            let m = t.sigmoid(c1);
            let g = t.mul(m, c1).unwrap();
            let c2 = t.conv2d(g, ids[3], ids[4], PaddingMode::Periodic).unwrap();
            let r = t.relu(c2);
            let up = t.upsample(r, 1, 1).unwrap();
            let d = t.sub(up, ids[5]).unwrap();
            let sq = t.mul(d, d).unwrap();
            t.sum_all(sq)
        },
        &[x, k1, b1, k2, b2, tgt],
        "gated conv chain",
    );
}
