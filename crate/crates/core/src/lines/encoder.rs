//! Residual patch encoder turning rasterized match maps into latent-shaped
//! condition features.
//!
//! patchify(lambda_s) -> linear to C -> two residual MLP blocks
//! (norm -> linear -> silu -> linear, added back) -> zero-initialized final
//! projection, so the condition branch is exactly a no-op before stage-2
//! training touches it.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{normal_init, GraphCtx, ParamSet};
use crate::numerics::{Scalar, Tensor, Var};

/// Residual block count.
pub const ENCODER_BLOCKS: usize = 2;

/// Geometry of the encoder: ties the map resolution to the boundary latent
/// shape it must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineEncoderConfig {
    pub lambda_s: usize,
    /// Channel count of the boundary latent frames (includes lambda_t
    /// replication).
    pub channels: usize,
    /// Pixel resolution of the condition maps.
    pub map_height: usize,
    pub map_width: usize,
}

impl LineEncoderConfig {
    pub fn latent_height(&self) -> usize {
        self.map_height / self.lambda_s
    }

    pub fn latent_width(&self) -> usize {
        self.map_width / self.lambda_s
    }

    pub fn patch_channels(&self) -> usize {
        3 * self.lambda_s * self.lambda_s
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_height % self.lambda_s != 0 || self.map_width % self.lambda_s != 0 {
            return Err(Error::shape(format!(
                "map {}x{} not divisible by lambda_s {}",
                self.map_height, self.map_width, self.lambda_s
            )));
        }
        Ok(())
    }
}

/// Latent-shaped condition features for the two boundary frames.
#[derive(Clone, Debug, PartialEq)]
pub struct LineConditionFeatures {
    /// [C, H, W], matching the boundary latent frame shape exactly.
    pub c_s: Tensor<f32>,
    pub c_e: Tensor<f32>,
}

/// Registers the encoder parameters under `prefix`.
pub fn init_line_encoder(
    params: &mut ParamSet<f32>,
    prefix: &str,
    cfg: &LineEncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    let pc = cfg.patch_channels();
    let c = cfg.channels;
    params.add(format!("{prefix}.proj_w"), normal_init(&[pc, c], 0.02, rng))?;
    params.add(format!("{prefix}.proj_b"), Tensor::zeros(&[c]))?;
    for b in 0..ENCODER_BLOCKS {
        params.add(format!("{prefix}.block{b}.norm_g"), Tensor::ones(&[c]))?;
        params.add(format!("{prefix}.block{b}.norm_b"), Tensor::zeros(&[c]))?;
        params.add(
            format!("{prefix}.block{b}.w1"),
            normal_init(&[c, c], 0.02, rng),
        )?;
        params.add(format!("{prefix}.block{b}.b1"), Tensor::zeros(&[c]))?;
        params.add(
            format!("{prefix}.block{b}.w2"),
            normal_init(&[c, c], 0.02, rng),
        )?;
        params.add(format!("{prefix}.block{b}.b2"), Tensor::zeros(&[c]))?;
    }
    // final projection all zeros: condition features start exactly zero
    params.add(format!("{prefix}.final_w"), Tensor::zeros(&[c, c]))?;
    params.add(format!("{prefix}.final_b"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Weight names of the encoder (for stage-2 trainable masks).
#[derive(Clone, Debug)]
pub struct LineEncoderWeights;

impl LineEncoderWeights {
    pub fn is_encoder_param(prefix: &str, name: &str) -> bool {
        name.starts_with(prefix)
    }
}

/// Builds the encoder forward on the graph. `map` is a [3, H', W'] leaf or
/// in-graph var; the result is a latent-shaped [C, H, W] var.
pub fn encode_map_graph<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    prefix: &str,
    cfg: &LineEncoderConfig,
    map: Var,
) -> Result<Var> {
    cfg.validate()?;
    let shape = ctx.tape.value(map).shape().to_vec();
    if shape != [3, cfg.map_height, cfg.map_width] {
        return Err(Error::shape(format!(
            "condition map shape {shape:?} does not match encoder geometry [3, {}, {}]",
            cfg.map_height, cfg.map_width
        )));
    }
    let l = cfg.lambda_s;
    let (h, w) = (cfg.latent_height(), cfg.latent_width());
    // [3, H*l, W*l] -> [H*W, 3*l*l] patch tokens
    let x = ctx.tape.reshape(map, &[3, h, l, w, l])?;
    let x = ctx.tape.permute(x, &[1, 3, 0, 2, 4])?;
    let x = ctx.tape.reshape(x, &[h * w, 3 * l * l])?;
    let mut x = ctx.linear(x, &format!("{prefix}.proj_w"), &format!("{prefix}.proj_b"))?;
    for b in 0..ENCODER_BLOCKS {
        let g = ctx.p(&format!("{prefix}.block{b}.norm_g"))?;
        let be = ctx.p(&format!("{prefix}.block{b}.norm_b"))?;
        let n = ctx.tape.layer_norm(x, Some(g), Some(be))?;
        let hmid = ctx.linear(
            n,
            &format!("{prefix}.block{b}.w1"),
            &format!("{prefix}.block{b}.b1"),
        )?;
        let hmid = ctx.tape.silu(hmid);
        let res = ctx.linear(
            hmid,
            &format!("{prefix}.block{b}.w2"),
            &format!("{prefix}.block{b}.b2"),
        )?;
        x = ctx.tape.add(x, res)?;
    }
    let x = ctx.linear(x, &format!("{prefix}.final_w"), &format!("{prefix}.final_b"))?;
    // [H*W, C] -> [C, H, W]
    let x = ctx.tape.reshape(x, &[h, w, cfg.channels])?;
    ctx.tape.permute(x, &[2, 0, 1])
}

/// Encodes both condition maps into latent-shaped features (inference
/// path; for training the graph version above keeps gradients flowing).
pub fn encode_lines(
    map_s: &Tensor<f32>,
    map_e: &Tensor<f32>,
    params: &ParamSet<f32>,
    prefix: &str,
    cfg: &LineEncoderConfig,
) -> Result<LineConditionFeatures> {
    let mut ctx = GraphCtx::inference(params);
    let ms = ctx.tape.leaf(map_s.clone());
    let me = ctx.tape.leaf(map_e.clone());
    let cs = encode_map_graph(&mut ctx, prefix, cfg, ms)?;
    let ce = encode_map_graph(&mut ctx, prefix, cfg, me)?;
    Ok(LineConditionFeatures {
        c_s: ctx.tape.value(cs).clone(),
        c_e: ctx.tape.value(ce).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn test_cfg() -> LineEncoderConfig {
        LineEncoderConfig {
            lambda_s: 2,
            channels: 4,
            map_height: 16,
            map_width: 16,
        }
    }

    fn init(seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_line_encoder(&mut ps, "lines", &test_cfg(), &mut rng).unwrap();
        ps
    }

    #[test]
    fn output_is_exactly_zero_at_init() {
        let ps = init(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(0.0f32..1.0));
        let feats = encode_lines(&map, &map, &ps, "lines", &test_cfg()).unwrap();
        assert_eq!(feats.c_s.shape(), &[4, 8, 8]);
        assert!(feats.c_s.data().iter().all(|&v| v == 0.0));
        assert!(feats.c_e.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_maps_give_constant_per_channel_field() {
        // bias-only path: every spatial position sees the same token
        let mut ps = init(1);
        // make the final projection non-trivial so the bias path shows up
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for name in ["lines.final_w", "lines.final_b", "lines.proj_b"] {
            let t = ps.get_mut(name).unwrap();
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let zero = Tensor::zeros(&[3, 16, 16]);
        let feats = encode_lines(&zero, &zero, &ps, "lines", &test_cfg()).unwrap();
        let (c, h, w) = (4, 8, 8);
        for ch in 0..c {
            let plane = &feats.c_s.data()[ch * h * w..(ch + 1) * h * w];
            for &v in plane {
                assert_eq!(v, plane[0], "channel {ch} not constant");
            }
        }
    }

    #[test]
    fn map_geometry_mismatch_rejected() {
        let ps = init(3);
        let bad = Tensor::zeros(&[3, 8, 16]);
        assert!(encode_lines(&bad, &bad, &ps, "lines", &test_cfg()).is_err());
    }
}
