use std::time::Instant;
#[inline(never)]
fn axpy_index(dst: &mut [f32], src: &[f32], c: f32) {
    let n = dst.len().min(src.len());
    let dst = &mut dst[..n];
    let src = &src[..n];
    for i in 0..n { dst[i] += c * src[i]; }
}
#[inline(never)]
fn axpy_zip(dst: &mut [f32], src: &[f32], c: f32) {
    for (d, s) in dst.iter_mut().zip(src.iter()) { *d += c * *s; }
}
fn main() {
    let n = 1024;
    let mut d = vec![0.1f32; n];
    let s = vec![0.2f32; n];
    let iters = 3_000_000u64;
    let t0 = Instant::now();
    for i in 0..iters { axpy_index(&mut d, &s, (i as f32) * 1e-9); }
    let dt = t0.elapsed().as_secs_f64();
    println!("index: {:.2} GMAC/s  ({})", n as f64 * iters as f64 / dt / 1e9, d[7]);
    let mut d = vec![0.1f32; n];
    let t0 = Instant::now();
    for i in 0..iters { axpy_zip(&mut d, &s, (i as f32) * 1e-9); }
    let dt = t0.elapsed().as_secs_f64();
    println!("zip:   {:.2} GMAC/s  ({})", n as f64 * iters as f64 / dt / 1e9, d[7]);
}
