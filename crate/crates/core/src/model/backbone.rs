//! Transformer backbone: token embedding, adaptive layer-norm blocks driven
//! by per-frame timestep embeddings, the replicated-block control branch
//! and the velocity head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::codec::FrameRole;
use crate::error::{Error, Result};
use crate::lines::{encode_map_graph, init_line_encoder, LineConditionFeatures};
use crate::numerics::{lit, Scalar, Tensor, Var};

use super::params::{normal_init, GraphCtx, ParamSet};
use super::{ModelConfig, PerFrameTimesteps, ReferenceMode};

/// Sinusoidal frequency embedding width for timesteps.
const TIME_FREQ_DIM: usize = 64;
/// Timesteps in [0,1] are stretched before the sinusoidal embedding so
/// nearby t values stay distinguishable.
const TIME_SCALE: f64 = 1000.0;
const INIT_STD: f64 = 0.02;

/// Registers all backbone parameters (and the control branch when the
/// config enables it). Deterministic in (config, seed).
pub fn init_model_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let d = cfg.dim;
    let c_in = cfg.embed_channels();
    let c_out = cfg.latent_channels() * cfg.patch * cfg.patch;

    ps.add("embed.w", normal_init(&[c_in, d], INIT_STD, &mut rng))?;
    ps.add("embed.b", Tensor::zeros(&[d]))?;
    ps.add(
        "temb.w1",
        normal_init(&[TIME_FREQ_DIM, d], INIT_STD, &mut rng),
    )?;
    ps.add("temb.b1", Tensor::zeros(&[d]))?;
    ps.add("temb.w2", normal_init(&[d, d], INIT_STD, &mut rng))?;
    ps.add("temb.b2", Tensor::zeros(&[d]))?;
    // learned global conditioning embedding standing in for a text prompt
    ps.add("temb.y", normal_init(&[d], INIT_STD, &mut rng))?;

    for b in 0..cfg.blocks {
        add_block_params(&mut ps, &format!("block{b}"), d, &mut rng)?;
    }

    ps.add("final.mod_w", normal_init(&[d, 2 * d], INIT_STD, &mut rng))?;
    ps.add("final.mod_b", Tensor::zeros(&[2 * d]))?;
    ps.add("final.out_w", normal_init(&[d, c_out], INIT_STD, &mut rng))?;
    ps.add("final.out_b", Tensor::zeros(&[c_out]))?;

    ps.add(
        "null_latent",
        normal_init(
            &[cfg.latent_channels(), cfg.latent_height(), cfg.latent_width()],
            INIT_STD,
            &mut rng,
        ),
    )?;

    if cfg.control_branch {
        extend_with_control_branch(&mut ps, cfg, seed ^ 0x9e37_79b9_7f4a_7c15)?;
    }
    Ok(ps)
}

fn add_block_params(
    ps: &mut ParamSet<f32>,
    prefix: &str,
    d: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    ps.add(
        format!("{prefix}.qkv_w"),
        normal_init(&[d, 3 * d], INIT_STD, rng),
    )?;
    ps.add(format!("{prefix}.qkv_b"), Tensor::zeros(&[3 * d]))?;
    ps.add(
        format!("{prefix}.out_w"),
        normal_init(&[d, d], INIT_STD, rng),
    )?;
    ps.add(format!("{prefix}.out_b"), Tensor::zeros(&[d]))?;
    ps.add(
        format!("{prefix}.mlp_w1"),
        normal_init(&[d, 4 * d], INIT_STD, rng),
    )?;
    ps.add(format!("{prefix}.mlp_b1"), Tensor::zeros(&[4 * d]))?;
    ps.add(
        format!("{prefix}.mlp_w2"),
        normal_init(&[4 * d, d], INIT_STD, rng),
    )?;
    ps.add(format!("{prefix}.mlp_b2"), Tensor::zeros(&[d]))?;
    ps.add(
        format!("{prefix}.mod_w"),
        normal_init(&[d, 6 * d], INIT_STD, rng),
    )?;
    ps.add(format!("{prefix}.mod_b"), Tensor::zeros(&[6 * d]))?;
    Ok(())
}

/// Adds the control branch to an existing (possibly trained) parameter set:
/// a bit-exact copy of block 0 plus a fresh zero-final line encoder.
pub fn extend_with_control_branch(
    ps: &mut ParamSet<f32>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fields = [
        "qkv_w", "qkv_b", "out_w", "out_b", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mod_w",
        "mod_b",
    ];
    for f in fields {
        let src = ps.get(&format!("block0.{f}"))?.clone();
        ps.add(format!("control.{f}"), src)?;
    }
    init_line_encoder(ps, "lines", &cfg.line_encoder_config(), &mut rng)?;
    Ok(())
}

/// 2D sinusoidal position encodings for a gh x gw token grid, [gh*gw, d].
pub fn spatial_positions<T: Scalar>(d: usize, gh: usize, gw: usize) -> Tensor<T> {
    let half = d / 2;
    Tensor::from_fn(&[gh * gw, d], |i| {
        let (tok, dim) = (i / d, i % d);
        let (gy, gx) = (tok / gw, tok % gw);
        let (pos, dim) = if dim < half {
            (gy as f64, dim)
        } else {
            (gx as f64, dim - half)
        };
        lit::<T>(sincos(pos, dim, half))
    })
}

/// Sinusoidal frame-index encodings, [n, d].
pub fn temporal_positions<T: Scalar>(d: usize, n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, d], |i| {
        let (frame, dim) = (i / d, i % d);
        lit::<T>(sincos(frame as f64, dim, d))
    })
}

fn sincos(pos: f64, dim: usize, total: usize) -> f64 {
    let pair = dim / 2;
    let freq = 1.0 / 10000f64.powf(2.0 * pair as f64 / total as f64);
    if dim % 2 == 0 {
        (pos * freq).sin()
    } else {
        (pos * freq).cos()
    }
}

fn time_frequency_row<T: Scalar>(t: f64) -> Vec<T> {
    let q = t * TIME_SCALE;
    (0..TIME_FREQ_DIM)
        .map(|dim| lit::<T>(sincos(q, dim, TIME_FREQ_DIM)))
        .collect()
}

/// Per-frame conditioning vector: MLP over the sinusoidal timestep
/// embedding plus the learned global embedding. Returns [n_frames, d].
fn time_condition<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    times: &[f64],
) -> Result<Var> {
    let n = times.len();
    let mut rows = Vec::with_capacity(n * TIME_FREQ_DIM);
    for &t in times {
        rows.extend(time_frequency_row::<T>(t));
    }
    let freq = Tensor::new(vec![n, TIME_FREQ_DIM], rows)?;
    let freq = ctx.tape.leaf(freq);
    let h = ctx.linear(freq, "temb.w1", "temb.b1")?;
    let h = ctx.tape.silu(h);
    let h = ctx.linear(h, "temb.w2", "temb.b2")?;
    let y = ctx.p("temb.y")?;
    ctx.tape.add(h, y)
}

/// Six modulation tensors for one block: (gamma, beta, alpha) for the
/// attention path then the MLP path, each [n, 1, d].
fn block_modulation<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    prefix: &str,
    t_cond: Var,
    d: usize,
) -> Result<[Var; 6]> {
    let m_in = ctx.tape.silu(t_cond);
    let m = ctx.linear(
        m_in,
        &format!("{prefix}.mod_w"),
        &format!("{prefix}.mod_b"),
    )?;
    let n = ctx.tape.value(m).shape()[0];
    let mut parts = [m; 6];
    for (i, part) in parts.iter_mut().enumerate() {
        let s = ctx.tape.slice(m, 1, i * d, d)?;
        *part = ctx.tape.reshape(s, &[n, 1, d])?;
    }
    Ok(parts)
}

/// x * (1 + gamma) + beta, with gamma/beta broadcasting over positions.
fn modulate<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    x: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let one = ctx.tape.leaf(Tensor::ones(&[1]));
    let scale = ctx.tape.add(gamma, one)?;
    let scaled = ctx.tape.mul(x, scale)?;
    ctx.tape.add(scaled, beta)
}

/// One adaLN DiT block over [n_frames, positions, d] tokens with full
/// spatiotemporal self-attention.
fn dit_block<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mods: &[Var; 6],
) -> Result<Var> {
    let shape = ctx.tape.value(x).shape().to_vec();
    let (n, p, d) = (shape[0], shape[1], shape[2]);
    let t = n * p;
    let (heads, hd) = (cfg.heads, cfg.head_dim());
    let scale = lit::<T>(1.0 / (hd as f64).sqrt());

    // attention path
    let n1 = ctx.tape.layer_norm(x, None, None)?;
    let h = modulate(ctx, n1, mods[0], mods[1])?;
    let h2 = ctx.tape.reshape(h, &[t, d])?;
    let qkv = ctx.linear(h2, &format!("{prefix}.qkv_w"), &format!("{prefix}.qkv_b"))?;
    let mut heads_split = [qkv; 3];
    for (i, part) in heads_split.iter_mut().enumerate() {
        let s = ctx.tape.slice(qkv, 1, i * d, d)?;
        let s = ctx.tape.reshape(s, &[t, heads, hd])?;
        *part = ctx.tape.permute(s, &[1, 0, 2])?;
    }
    let [q, k, v] = heads_split;
    let attn = ctx.tape.attention(q, k, v, scale)?;
    let attn = ctx.tape.permute(attn, &[1, 0, 2])?;
    let attn = ctx.tape.reshape(attn, &[t, d])?;
    let attn = ctx.linear(attn, &format!("{prefix}.out_w"), &format!("{prefix}.out_b"))?;
    let attn = ctx.tape.reshape(attn, &[n, p, d])?;
    let gated = ctx.tape.mul(attn, mods[2])?;
    let x = ctx.tape.add(x, gated)?;

    // mlp path
    let n2 = ctx.tape.layer_norm(x, None, None)?;
    let h = modulate(ctx, n2, mods[3], mods[4])?;
    let h2 = ctx.tape.reshape(h, &[t, d])?;
    let m = ctx.linear(h2, &format!("{prefix}.mlp_w1"), &format!("{prefix}.mlp_b1"))?;
    let m = ctx.tape.silu(m);
    let m = ctx.linear(m, &format!("{prefix}.mlp_w2"), &format!("{prefix}.mlp_b2"))?;
    let m = ctx.tape.reshape(m, &[n, p, d])?;
    let gated = ctx.tape.mul(m, mods[5])?;
    ctx.tape.add(x, gated)
}

/// Patchifies latent frames [n, c, h, w] into tokens [n, positions, c*p*p].
fn patchify<T: Scalar>(ctx: &mut GraphCtx<'_, T>, x: Var, patch: usize) -> Result<Var> {
    let shape = ctx.tape.value(x).shape().to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / patch, w / patch);
    let x = ctx.tape.reshape(x, &[n, c, gh, patch, gw, patch])?;
    let x = ctx.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    ctx.tape.reshape(x, &[n, gh * gw, c * patch * patch])
}

/// Inverse of [`patchify`] applied to head outputs.
fn unpatchify<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    x: Var,
    cfg: &ModelConfig,
    n: usize,
) -> Result<Var> {
    let p = cfg.patch;
    let c = cfg.latent_channels();
    let (gh, gw) = (cfg.latent_height() / p, cfg.latent_width() / p);
    let x = ctx.tape.reshape(x, &[n, gh, gw, c, p, p])?;
    let x = ctx.tape.permute(x, &[0, 3, 1, 4, 2, 5])?;
    ctx.tape.reshape(x, &[n, c, cfg.latent_height(), cfg.latent_width()])
}

/// Condition features as in-graph vars (so gradients reach the encoder).
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub c_s: Var,
    pub c_e: Var,
}

/// Embeds a latent clip var into position-encoded tokens.
///
/// Temporal mode: one token per grid cell per frame over the whole
/// sequence. Channel mode: boundary latents ride along as channels of every
/// intermediate frame, and only intermediates produce tokens.
pub fn embed_tokens_graph<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &ModelConfig,
    latents: Var,
) -> Result<Var> {
    let shape = ctx.tape.value(latents).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "latent clip must be [N, C, H, W], got {shape:?}"
        )));
    }
    let n_lat = shape[0];
    if n_lat > cfg.max_frames {
        return Err(Error::config(format!(
            "{n_lat} latent frames exceed max_frames {}",
            cfg.max_frames
        )));
    }
    let d = cfg.dim;
    let input = match cfg.reference_mode {
        ReferenceMode::Temporal => latents,
        ReferenceMode::Channel => {
            // replicate boundary latents onto every intermediate frame
            let n_int = n_lat - 2;
            let zs = ctx.tape.slice(latents, 0, 0, 1)?;
            let ze = ctx.tape.slice(latents, 0, n_lat - 1, 1)?;
            let mid = ctx.tape.slice(latents, 0, 1, n_int)?;
            let zs_tiled = ctx.tape.concat(&vec![zs; n_int], 0)?;
            let ze_tiled = ctx.tape.concat(&vec![ze; n_int], 0)?;
            ctx.tape.concat(&[mid, zs_tiled, ze_tiled], 1)?
        }
    };
    let tokens = patchify(ctx, input, cfg.patch)?;
    let n_frames = ctx.tape.value(tokens).shape()[0];
    let positions = ctx.tape.value(tokens).shape()[1];
    let flat = ctx.tape.reshape(tokens, &[n_frames * positions, cfg.embed_channels()])?;
    let emb = ctx.linear(flat, "embed.w", "embed.b")?;
    let emb = ctx.tape.reshape(emb, &[n_frames, positions, d])?;
    let spatial = ctx.tape.leaf(spatial_positions::<T>(
        d,
        cfg.latent_height() / cfg.patch,
        cfg.latent_width() / cfg.patch,
    ));
    let temporal = temporal_positions::<T>(d, n_frames).reshape(&[n_frames, 1, d])?;
    let temporal = ctx.tape.leaf(temporal);
    let emb = ctx.tape.add(emb, spatial)?;
    ctx.tape.add(emb, temporal)
}

/// Builds the full velocity-prediction graph and returns the output var.
///
/// `latents` is the [N, C, H, W] latent clip (noisy intermediates, clean
/// boundaries). `null_end` swaps the end boundary (and its condition
/// features) for the learned null latent, the conditioning-dropout / I2V
/// path.
pub fn forward_graph<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &ModelConfig,
    latents: Var,
    times: &PerFrameTimesteps,
    cond: Option<CondVars>,
    null_end: bool,
) -> Result<Var> {
    cfg.validate()?;
    let shape = ctx.tape.value(latents).shape().to_vec();
    let n_lat = shape[0];
    if shape.len() != 4
        || shape[1] != cfg.latent_channels()
        || shape[2] != cfg.latent_height()
        || shape[3] != cfg.latent_width()
    {
        return Err(Error::shape(format!(
            "latent clip {shape:?} does not match model geometry [N, {}, {}, {}]",
            cfg.latent_channels(),
            cfg.latent_height(),
            cfg.latent_width()
        )));
    }
    if times.len() != n_lat {
        return Err(Error::shape(format!(
            "{} timesteps for {n_lat} latent frames",
            times.len()
        )));
    }
    if cond.is_some() && !cfg.control_branch {
        return Err(Error::config(
            "condition features supplied but the control branch is disabled",
        ));
    }

    // conditioning dropout / I2V: replace the end latent with the learned
    // null latent inside the graph so it receives gradients
    let latents = if null_end {
        let null = ctx.p("null_latent")?;
        let shape = ctx.tape.value(null).shape().to_vec();
        let null = ctx.tape.reshape(null, &[1, shape[0], shape[1], shape[2]])?;
        let front = ctx.tape.slice(latents, 0, 0, n_lat - 1)?;
        ctx.tape.concat(&[front, null], 0)?
    } else {
        latents
    };

    let times_used: Vec<f64> = match cfg.reference_mode {
        ReferenceMode::Temporal => times.values.clone(),
        ReferenceMode::Channel => times.values[1..n_lat - 1].to_vec(),
    };
    let t_cond = time_condition(ctx, &times_used)?;

    let tokens = embed_tokens_graph(ctx, cfg, latents)?;
    let mut x = {
        let mods = block_modulation(ctx, "block0", t_cond, cfg.dim)?;
        dit_block(ctx, cfg, "block0", tokens, &mods)?
    };

    if cfg.control_branch && cfg.reference_mode == ReferenceMode::Temporal {
        if let Some(cond) = cond {
            x = inject_control_branch(ctx, cfg, latents, tokens, x, t_cond, cond, null_end)?;
        }
    }

    for b in 1..cfg.blocks {
        let prefix = format!("block{b}");
        let mods = block_modulation(ctx, &prefix, t_cond, cfg.dim)?;
        x = dit_block(ctx, cfg, &prefix, x, &mods)?;
    }

    // velocity head
    let shape = ctx.tape.value(x).shape().to_vec();
    let (n_frames, positions) = (shape[0], shape[1]);
    let nf = ctx.tape.layer_norm(x, None, None)?;
    let m_in = ctx.tape.silu(t_cond);
    let m = ctx.linear(m_in, "final.mod_w", "final.mod_b")?;
    let gamma = ctx.tape.slice(m, 1, 0, cfg.dim)?;
    let gamma = ctx.tape.reshape(gamma, &[n_frames, 1, cfg.dim])?;
    let beta = ctx.tape.slice(m, 1, cfg.dim, cfg.dim)?;
    let beta = ctx.tape.reshape(beta, &[n_frames, 1, cfg.dim])?;
    let h = modulate(ctx, nf, gamma, beta)?;
    let h = ctx.tape.reshape(h, &[n_frames * positions, cfg.dim])?;
    let out = ctx.linear(h, "final.out_w", "final.out_b")?;
    let out = ctx.tape.reshape(
        out,
        &[n_frames, positions, cfg.latent_channels() * cfg.patch * cfg.patch],
    )?;
    unpatchify(ctx, out, cfg, n_frames)
}

/// The matching-lines control pathway.
///
/// Boundary latents are shifted by the encoded condition features, the
/// shifted sequence runs through the replicated copy of block 0, and the
/// deviation from the backbone's own block-0 output (normalized, scaled by
/// eta) is injected into the intermediate-frame tokens. With zero condition
/// features the replicated block reproduces block 0 bit-exactly, so the
/// whole branch is a no-op.
#[allow(clippy::too_many_arguments)]
fn inject_control_branch<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &ModelConfig,
    latents: Var,
    _tokens: Var,
    x: Var,
    t_cond: Var,
    cond: CondVars,
    null_end: bool,
) -> Result<Var> {
    let n_lat = ctx.tape.value(latents).shape()[0];
    let cshape = ctx.tape.value(cond.c_s).shape().to_vec();
    let expected = [cfg.latent_channels(), cfg.latent_height(), cfg.latent_width()];
    if cshape != expected {
        return Err(Error::shape(format!(
            "condition features {cshape:?} do not match boundary latent shape {expected:?}"
        )));
    }
    // z'_s = z_s + c_s, z'_e = z_e + c_e (c_e dropped with the end latent)
    let c_s = ctx
        .tape
        .reshape(cond.c_s, &[1, expected[0], expected[1], expected[2]])?;
    let zs = ctx.tape.slice(latents, 0, 0, 1)?;
    let zs = ctx.tape.add(zs, c_s)?;
    let mid = ctx.tape.slice(latents, 0, 1, n_lat - 2)?;
    let ze = ctx.tape.slice(latents, 0, n_lat - 1, 1)?;
    let ze = if null_end {
        ze
    } else {
        let c_e = ctx
            .tape
            .reshape(cond.c_e, &[1, expected[0], expected[1], expected[2]])?;
        ctx.tape.add(ze, c_e)?
    };
    let shifted = ctx.tape.concat(&[zs, mid, ze], 0)?;

    let tokens_shifted = embed_tokens_graph(ctx, cfg, shifted)?;
    let mods = block_modulation(ctx, "control", t_cond, cfg.dim)?;
    let branch = dit_block(ctx, cfg, "control", tokens_shifted, &mods)?;

    // residual relative to the backbone block-0 output, intermediate
    // frames only
    let branch_mid = ctx.tape.slice(branch, 0, 1, n_lat - 2)?;
    let x_mid = ctx.tape.slice(x, 0, 1, n_lat - 2)?;
    let res = ctx.tape.sub(branch_mid, x_mid)?;
    let res = ctx.tape.layer_norm(res, None, None)?;
    let res = ctx.tape.scale(res, lit::<T>(cfg.eta as f64));
    let updated = ctx.tape.add(x_mid, res)?;
    let x_start = ctx.tape.slice(x, 0, 0, 1)?;
    let x_end = ctx.tape.slice(x, 0, n_lat - 1, 1)?;
    ctx.tape.concat(&[x_start, updated, x_end], 0)
}

/// Modulation vectors produced for one timestep at one block, read back as
/// plain tensors: (gamma, beta, alpha) for the attention then MLP path.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationVectors {
    pub attn: [Tensor<f32>; 3],
    pub mlp: [Tensor<f32>; 3],
}

pub fn modulation_vectors(
    params: &ParamSet<f32>,
    block: usize,
    t: f64,
) -> Result<ModulationVectors> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::config(format!("timestep {t} outside [0, 1]")));
    }
    let mut ctx = GraphCtx::inference(params);
    let t_cond = time_condition(&mut ctx, &[t])?;
    let d = ctx.tape.value(t_cond).shape()[1];
    let mods = block_modulation(&mut ctx, &format!("block{block}"), t_cond, d)?;
    let read = |ctx: &GraphCtx<'_, f32>, v: Var| ctx.tape.value(v).reshape(&[d]);
    Ok(ModulationVectors {
        attn: [
            read(&ctx, mods[0])?,
            read(&ctx, mods[1])?,
            read(&ctx, mods[2])?,
        ],
        mlp: [
            read(&ctx, mods[3])?,
            read(&ctx, mods[4])?,
            read(&ctx, mods[5])?,
        ],
    })
}

/// Inference-path velocity prediction over plain tensors.
///
/// Returns a tensor of the same shape as the input clip. In channel mode
/// the network predicts intermediates only; boundary slots read back zero.
pub fn predict_velocity(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    latents: &Tensor<f32>,
    times: &PerFrameTimesteps,
    cond: Option<&LineConditionFeatures>,
    null_end: bool,
) -> Result<Tensor<f32>> {
    let mut ctx = GraphCtx::inference(params);
    let lat = ctx.tape.leaf(latents.clone());
    let cond_vars = match cond {
        Some(f) => {
            if !cfg.control_branch {
                return Err(Error::config(
                    "condition features supplied but the control branch is disabled",
                ));
            }
            Some(CondVars {
                c_s: ctx.tape.leaf(f.c_s.clone()),
                c_e: ctx.tape.leaf(f.c_e.clone()),
            })
        }
        None => {
            if cfg.control_branch {
                // zero features keep the branch semantics well-defined
                let zero = Tensor::zeros(&[
                    cfg.latent_channels(),
                    cfg.latent_height(),
                    cfg.latent_width(),
                ]);
                Some(CondVars {
                    c_s: ctx.tape.leaf(zero.clone()),
                    c_e: ctx.tape.leaf(zero),
                })
            } else {
                None
            }
        }
    };
    let out = forward_graph(&mut ctx, cfg, lat, times, cond_vars, null_end)?;
    let v = ctx.tape.value(out).clone();
    match cfg.reference_mode {
        ReferenceMode::Temporal => Ok(v),
        ReferenceMode::Channel => {
            // pad boundary slots with zeros to preserve the clip shape
            let zeros = Tensor::zeros(&[
                1,
                cfg.latent_channels(),
                cfg.latent_height(),
                cfg.latent_width(),
            ]);
            Tensor::concat(&[&zeros, &v, &zeros], 0)
        }
    }
}

/// Encodes condition maps in-graph for training (gradients reach the
/// encoder weights).
pub fn encode_cond_graph<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &ModelConfig,
    map_s: &Tensor<T>,
    map_e: &Tensor<T>,
) -> Result<CondVars> {
    let ecfg = cfg.line_encoder_config();
    let ms = ctx.tape.leaf(map_s.clone());
    let me = ctx.tape.leaf(map_e.clone());
    Ok(CondVars {
        c_s: encode_map_graph(ctx, "lines", &ecfg, ms)?,
        c_e: encode_map_graph(ctx, "lines", &ecfg, me)?,
    })
}

/// Frame roles for an n_lat-frame latent sequence.
pub fn roles_for(n_lat: usize) -> Vec<FrameRole> {
    let mut roles = vec![FrameRole::Intermediate; n_lat];
    roles[0] = FrameRole::BoundaryStart;
    roles[n_lat - 1] = FrameRole::BoundaryEnd;
    roles
}
