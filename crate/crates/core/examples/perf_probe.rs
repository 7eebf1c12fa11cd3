use fino_core::tensor::{PaddingMode, Tape, Tensor};
use std::time::Instant;

fn main() {
    // Typical hot shape: batch 32, 16->16 channels, 1x64 rows, 1x3 kernel.
    let b = 32; let c = 16; let w = 64; let k = 3;
    let x = Tensor::<f32>::full(&[b, c, 1, w], 0.5).with_grad();
    let kern = Tensor::<f32>::full(&[c, c, 1, k], 0.1).with_grad();
    let bias = Tensor::<f32>::zeros(&[c]).with_grad();
    let iters = 200;
    let t0 = Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(x.clone());
        let ki = tape.leaf(kern.clone());
        let bi = tape.leaf(bias.clone());
        let y = tape.conv2d(xi, ki, bi, PaddingMode::Periodic).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
        acc += tape.value(l).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (b * c * c * k * w * iters) as f64;
    // forward + input-grad + kernel-grad roughly 3x the MACs
    println!("fwd+bwd: {:.3} s total, {:.2} GMAC/s effective (x3 counted: {:.2})", dt, macs / dt / 1e9, 3.0 * macs / dt / 1e9);
    println!("ignore: {acc}");

    // 2D shape: batch 8, 32ch, 32x32, 3x3
    let b = 8; let c = 32; let hw = 32; let k = 3;
    let x = Tensor::<f32>::full(&[b, c, hw, hw], 0.5).with_grad();
    let kern = Tensor::<f32>::full(&[c, c, k, k], 0.1).with_grad();
    let bias = Tensor::<f32>::zeros(&[c]).with_grad();
    let iters = 30;
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new();
        let xi = tape.leaf(x.clone());
        let ki = tape.leaf(kern.clone());
        let bi = tape.leaf(bias.clone());
        let y = tape.conv2d(xi, ki, bi, PaddingMode::Periodic).unwrap();
        let l = tape.sum_all(y);
        tape.backward(l).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64();
    let macs = (b * c * c * k * k * hw * hw * iters) as f64;
    println!("2d fwd+bwd: {:.3} s, {:.2} GMAC/s (x3: {:.2})", dt, macs / dt / 1e9, 3.0 * macs / dt / 1e9);
}
