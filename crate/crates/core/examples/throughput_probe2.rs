fn main() {
    for (name, ms) in tfmr_core::numerics::bench_attention_fwd(4, 320, 24, 200) {
        println!("{name}: {ms:.3} ms");
    }
}
