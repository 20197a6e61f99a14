//! Minimal dense-tensor arithmetic with reverse-mode autodiff and a
//! finite-difference gradient oracle.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_at, max_rel_err, rel_err, DEFAULT_H};
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::{broadcast_shape, lit, random_normal, Dtype, Scalar, Tensor};

// Bench-only re-exports for the throughput example; not part of the API.
#[doc(hidden)]
pub fn bench_mm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    kernels::mm_nt(a, b, c, m, k, n)
}
#[doc(hidden)]
pub fn bench_mm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    kernels::mm_nn(a, b, c, m, k, n)
}
#[doc(hidden)]
pub fn bench_softmax(x: &mut [f32], rows: usize, cols: usize) {
    kernels::softmax_rows(x, rows, cols)
}
#[doc(hidden)]
pub fn bench_exp_pass(x: &mut [f32]) {
    use tensor::Scalar;
    for v in x.iter_mut() {
        *v = (*v * 0.5).exp_inner() - 1.0;
    }
}
#[doc(hidden)]
pub fn bench_attention_fwd(h: usize, t: usize, d: usize, iters: usize) -> Vec<(String, f64)> {
    use std::time::Instant;
    let q = Tensor::<f32>::from_fn(&[h, t, d], |i| (i as f32 * 0.01).sin());
    let k = q.clone();
    let v = q.clone();
    let mut out = Vec::new();
    let start = Instant::now();
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let vv = tape.leaf(v.clone());
        let _ = tape.attention(qv, kv, vv, 0.2).unwrap();
    }
    out.push(("attention op total".into(), start.elapsed().as_secs_f64() / iters as f64 * 1e3));
    // raw pieces
    let mut w = vec![0.0f32; t * t];
    let mut kt = vec![0.0f32; t * d];
    let start = Instant::now();
    for _ in 0..iters {
        for head in 0..h {
            let qh = &q.data()[head * t * d..(head + 1) * t * d];
            kt.clear();
            for j in 0..d { for i in 0..t { kt.push(qh[i * d + j]); } }
            w.iter_mut().for_each(|x| *x = 0.0);
            kernels::mm_nn(qh, &kt, &mut w, t, d, t);
        }
    }
    out.push(("scores".into(), start.elapsed().as_secs_f64() / iters as f64 * 1e3));
    let start = Instant::now();
    for _ in 0..iters {
        for _head in 0..h {
            kernels::softmax_rows(&mut w, t, t);
        }
    }
    out.push(("softmax".into(), start.elapsed().as_secs_f64() / iters as f64 * 1e3));
    let mut o = vec![0.0f32; t * d];
    let start = Instant::now();
    for _ in 0..iters {
        for head in 0..h {
            let vh = &v.data()[head * t * d..(head + 1) * t * d];
            o.iter_mut().for_each(|x| *x = 0.0);
            kernels::mm_nn(&w, vh, &mut o, t, t, d);
        }
    }
    out.push(("av".into(), start.elapsed().as_secs_f64() / iters as f64 * 1e3));
    out
}
