//! Quick kernel throughput probe used while sizing training budgets.
use std::time::Instant;
use tfmr_core::numerics::{Tape, Tensor};

fn main() {
    let t = 320usize;
    let hd = 24usize;
    let q: Vec<f32> = (0..t * hd).map(|i| (i as f32 * 0.01).sin()).collect();
    let k = q.clone();
    let mut s = vec![0.0f32; t * t];

    let start = Instant::now();
    let iters = 500;
    for _ in 0..iters {
        s.iter_mut().for_each(|x| *x = 0.0);
        tfmr_core::numerics::bench_mm_nt(&q, &k, &mut s, t, hd, t);
    }
    let dt = start.elapsed().as_secs_f64();
    println!("mm_nt scores ({t}x{hd} * {t}x{hd}^T): {:.2} GMAC/s", (t*t*hd*iters) as f64 / dt / 1e9);

    let start = Instant::now();
    for _ in 0..iters {
        tfmr_core::numerics::bench_softmax(&mut s, t, t);
    }
    let dt = start.elapsed().as_secs_f64();
    println!("softmax {}x{}: {:.1} Melem/s", t, t, (t*t*iters) as f64 / dt / 1e6);

    let v = q.clone();
    let mut o = vec![0.0f32; t * hd];
    let start = Instant::now();
    for _ in 0..iters {
        o.iter_mut().for_each(|x| *x = 0.0);
        tfmr_core::numerics::bench_mm_nn(&s, &v, &mut o, t, t, hd);
    }
    let dt = start.elapsed().as_secs_f64();
    println!("mm_nn AV ({t}x{t} * {t}x{hd}): {:.2} GMAC/s", (t*t*hd*iters) as f64 / dt / 1e9);

    // big mm_nn reference
    let a = Tensor::<f32>::from_fn(&[320, 96], |i| (i as f32 * 0.001).sin());
    let b = Tensor::<f32>::from_fn(&[96, 384], |i| (i as f32 * 0.002).cos());
    let start = Instant::now();
    let iters = 200;
    let mut sink = 0.0f32;
    for _ in 0..iters {
        let mut tape = Tape::<f32>::new();
        let av = tape.leaf(a.clone());
        let bv = tape.leaf(b.clone());
        let c = tape.matmul(av, bv).unwrap();
        sink += tape.value(c).data()[0];
    }
    let dt = start.elapsed().as_secs_f64();
    println!("matmul tape: {:.2} GMAC/s (sink {sink})", (320.0*96.0*384.0*iters as f64) / dt / 1e9);
}
