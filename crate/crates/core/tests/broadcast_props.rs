//! Broadcast semantics checked against explicit materialized expansion.

use proptest::prelude::*;
use tfmr_core::numerics::{broadcast_shape, Tensor};

/// Test oracle: expand `t` to `out_shape` by explicit coordinate mapping.
fn materialize(t: &Tensor<f64>, out_shape: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let pad = out_shape.len() - t.rank();
    let mut out = Vec::with_capacity(numel);
    for flat in 0..numel {
        // decompose flat index into out coordinates
        let mut rem = flat;
        let mut coords = vec![0usize; out_shape.len()];
        for d in (0..out_shape.len()).rev() {
            coords[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        // map to source index, collapsing broadcast dims
        let mut src = 0usize;
        let mut stride = 1usize;
        for d in (0..t.rank()).rev() {
            let c = if t.shape()[d] == 1 { 0 } else { coords[pad + d] };
            src += c * stride;
            stride *= t.shape()[d];
        }
        out.push(t.data()[src]);
    }
    out
}

fn check_pair(a: &Tensor<f64>, b: &Tensor<f64>) {
    let out_shape = broadcast_shape(a.shape(), b.shape()).unwrap();
    let ea = materialize(a, &out_shape);
    let eb = materialize(b, &out_shape);

    let add = a.broadcast_zip(b, |x, y| x + y).unwrap();
    assert_eq!(add.shape(), &out_shape[..]);
    for ((&got, &xa), &xb) in add.data().iter().zip(&ea).zip(&eb) {
        assert_eq!(got, xa + xb);
    }
    let mul = a.broadcast_zip(b, |x, y| x * y).unwrap();
    for ((&got, &xa), &xb) in mul.data().iter().zip(&ea).zip(&eb) {
        assert_eq!(got, xa * xb);
    }
}

fn fill(shape: &[usize], salt: u64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as u64 * 2654435761 + salt) % 101) as f64 - 50.0)
}

/// Exhaustive over all output shapes of rank <= 3 with extents <= 4 and all
/// choices of which dims are broadcast (extent 1) on each side.
#[test]
fn broadcast_matches_materialized_expansion_exhaustively() {
    let mut cases = 0usize;
    for rank in 1..=3usize {
        let mut shape = vec![1usize; rank];
        loop {
            // all subsets of dims set to 1 in a and in b
            for mask_a in 0..(1usize << rank) {
                for mask_b in 0..(1usize << rank) {
                    let sa: Vec<usize> = (0..rank)
                        .map(|d| if mask_a >> d & 1 == 1 { 1 } else { shape[d] })
                        .collect();
                    let sb: Vec<usize> = (0..rank)
                        .map(|d| if mask_b >> d & 1 == 1 { 1 } else { shape[d] })
                        .collect();
                    check_pair(&fill(&sa, 3), &fill(&sb, 17));
                    cases += 1;
                }
            }
            // odometer over shape extents 1..=4
            let mut d = rank;
            loop {
                if d == 0 {
                    break;
                }
                d -= 1;
                shape[d] += 1;
                if shape[d] <= 4 {
                    break;
                }
                shape[d] = 1;
            }
            if shape.iter().all(|&e| e == 1) {
                break;
            }
        }
    }
    assert!(cases > 1000, "exhaustive sweep ran {cases} cases");
}

proptest! {
    /// Random shapes up to rank 5, extents <= 4, with random broadcast masks.
    #[test]
    fn broadcast_matches_materialized_expansion_random(
        extents in proptest::collection::vec(1usize..=4, 1..=5),
        mask_a in 0u32..32,
        mask_b in 0u32..32,
        rank_a in 1usize..=5,
        salt in 0u64..1000,
    ) {
        let rank = extents.len();
        let rank_a = rank_a.min(rank);
        // a uses the trailing rank_a dims, b the full shape
        let sa: Vec<usize> = (rank - rank_a..rank)
            .map(|d| if mask_a >> d & 1 == 1 { 1 } else { extents[d] })
            .collect();
        let sb: Vec<usize> = (0..rank)
            .map(|d| if mask_b >> d & 1 == 1 { 1 } else { extents[d] })
            .collect();
        check_pair(&fill(&sa, salt), &fill(&sb, salt + 1));
    }
}
