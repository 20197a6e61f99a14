//! Deterministic two-stage training loop.
//!
//! Every step derives its RNG stream from (master seed, step index), so a
//! resumed run replays the exact sample order of an uninterrupted one.
//! Batch elements evaluate on independent tapes (optionally in parallel,
//! capped by TFMR_THREADS) and reduce in fixed sample order, keeping the
//! whole loop bit-reproducible.

pub mod checkpoint;
pub mod optimizer;

pub use checkpoint::{digest_params, load_checkpoint, save_checkpoint, Checkpoint};
pub use optimizer::{adamw_step, AdamState, OptimConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{patchify_encode, ClipRecord, Dataset};
use crate::error::{Error, Result};
use crate::lines::{match_lines, rasterize_matches, MatchMode};
use crate::losses::{
    flow_loss_graph, make_noisy, temp_loss_graph, total_loss, total_loss_graph, true_velocity,
    LossBreakdown,
};
use crate::model::backbone::{encode_cond_graph, extend_with_control_branch, forward_graph};
use crate::model::{GraphCtx, ModelConfig, ParamSet, PerFrameTimesteps, ReferenceMode};
use crate::numerics::{random_normal, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub omega: f32,
    pub p_drop: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            omega: 0.8,
            p_drop: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn default_for_stage(stage: u8) -> Self {
        let mut cfg = TrainConfig::default();
        cfg.stage = stage;
        if stage == 2 {
            cfg.lr = 1e-4;
        }
        cfg
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::config("stage must be 1 or 2"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::config("batch size and steps must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.omega < 0.0 {
            return Err(Error::config("omega must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::config("p_drop must lie in [0, 1]"));
        }
        self.optim().validate()
    }
}

/// Worker cap from TFMR_THREADS; defaults to 1.
pub fn worker_threads() -> usize {
    std::env::var("TFMR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derived_seed(master: u64, step: u64, lane: u64) -> u64 {
    splitmix64(master ^ splitmix64(step.wrapping_mul(2) + 1) ^ splitmix64(lane.wrapping_mul(3) + 2))
}

/// Full mutable training state.
pub struct Trainer {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamSet<f32>,
    pub opt: AdamState,
    pub trainable: Vec<bool>,
    pub step: u64,
    pub train_seeds: Vec<u64>,
    pub n_intermediate: usize,
}

struct SampleOut {
    loss: LossBreakdown,
    grads: Vec<Option<Tensor<f32>>>,
}

fn validate_geometry(model_cfg: &ModelConfig, dataset: &Dataset) -> Result<()> {
    let m = &dataset.manifest;
    if m.resolution != [model_cfg.height, model_cfg.width] {
        return Err(Error::config(format!(
            "dataset resolution {:?} does not match model {}x{}",
            m.resolution, model_cfg.height, model_cfg.width
        )));
    }
    if m.n_intermediate % model_cfg.lambda_t != 0 {
        return Err(Error::config(format!(
            "lambda_t {} does not divide {} intermediates",
            model_cfg.lambda_t, m.n_intermediate
        )));
    }
    let n_lat = m.n_intermediate / model_cfg.lambda_t + 2;
    if n_lat > model_cfg.max_frames {
        return Err(Error::config(format!(
            "{n_lat} latent frames exceed max_frames {}",
            model_cfg.max_frames
        )));
    }
    Ok(())
}

impl Trainer {
    /// Fresh stage-1 trainer: backbone only, everything trainable.
    pub fn stage1(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        dataset: &Dataset,
    ) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        if train_cfg.stage != 1 {
            return Err(Error::config("stage-1 trainer got a stage-2 config"));
        }
        if model_cfg.control_branch {
            return Err(Error::config(
                "stage 1 trains the backbone only; enable the control branch in stage 2",
            ));
        }
        validate_geometry(&model_cfg, dataset)?;
        let params = crate::model::backbone::init_model_params(&model_cfg, train_cfg.seed)?;
        let opt = AdamState::new(&params);
        let trainable = vec![true; params.len()];
        Ok(Trainer {
            model_cfg,
            train_cfg,
            params,
            opt,
            trainable,
            step: 0,
            train_seeds: dataset.seeds(),
            n_intermediate: dataset.manifest.n_intermediate,
        })
    }

    /// Stage-2 trainer from a stage-1 checkpoint: adds the control branch
    /// and freezes everything outside {line encoder, replicated block,
    /// null latent}.
    pub fn stage2(ckpt: Checkpoint, train_cfg: TrainConfig, dataset: &Dataset) -> Result<Self> {
        train_cfg.validate()?;
        if train_cfg.stage != 2 {
            return Err(Error::config("stage-2 trainer got a non-stage-2 config"));
        }
        if ckpt.manifest.train.stage != 1 {
            return Err(Error::config("stage 2 must resume from a stage-1 checkpoint"));
        }
        let mut model_cfg = ckpt.manifest.model.clone();
        model_cfg.control_branch = true;
        model_cfg.validate()?;
        validate_geometry(&model_cfg, dataset)?;
        let mut params = ckpt.params;
        extend_with_control_branch(&mut params, &model_cfg, splitmix64(train_cfg.seed))?;
        let mut opt = AdamState::new(&params); // fresh moments for stage 2
        opt.step = 0;
        let trainable = stage2_trainable(&params);
        Ok(Trainer {
            model_cfg,
            train_cfg,
            params,
            opt,
            trainable,
            step: 0,
            train_seeds: dataset.seeds(),
            n_intermediate: dataset.manifest.n_intermediate,
        })
    }

    /// Rebuilds a trainer from a checkpoint to continue its run.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let manifest = ckpt.manifest;
        Ok(Trainer {
            model_cfg: manifest.model,
            train_cfg: manifest.train,
            params: ckpt.params,
            opt: ckpt.opt,
            trainable: manifest.trainable,
            step: manifest.step,
            train_seeds: manifest.train_seeds,
            n_intermediate: manifest.n_intermediate,
        })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        save_checkpoint(
            dir,
            &self.params,
            &self.opt,
            &self.model_cfg,
            &self.train_cfg,
            self.step,
            self.train_cfg.seed,
            &self.train_seeds,
            self.n_intermediate,
            &self.trainable,
        )
    }

    /// Digest of the frozen parameters (stage-2 freeze verification).
    pub fn frozen_digest(&self) -> String {
        let frozen: Vec<&str> = self
            .params
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.trainable[*i])
            .map(|(_, (n, _))| n)
            .collect();
        let set: std::collections::BTreeSet<&str> = frozen.into_iter().collect();
        digest_params(&self.params, |n| set.contains(n))
    }

    /// One optimizer step over a freshly assembled batch. Returns the
    /// batch-mean loss. A non-finite loss rejects the step: weights and
    /// optimizer state stay untouched.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<LossBreakdown> {
        validate_geometry(&self.model_cfg, dataset)?;
        let b = self.train_cfg.batch_size;
        let step_seed = derived_seed(self.train_cfg.seed, self.step, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(step_seed);
        let indices: Vec<usize> = (0..b)
            .map(|_| rng.gen_range(0..dataset.records.len()))
            .collect();
        let sample_seeds: Vec<u64> = (0..b as u64)
            .map(|lane| derived_seed(self.train_cfg.seed, self.step, lane + 1))
            .collect();

        let n_threads = worker_threads().min(b);
        let mut outs: Vec<Option<Result<SampleOut>>> = (0..b).map(|_| None).collect();
        if n_threads <= 1 {
            for (slot, (&idx, &seed)) in outs
                .iter_mut()
                .zip(indices.iter().zip(&sample_seeds))
            {
                *slot = Some(run_sample(
                    &self.model_cfg,
                    &self.train_cfg,
                    &self.params,
                    &self.trainable,
                    &dataset.records[idx],
                    seed,
                ));
            }
        } else {
            let chunk = b.div_ceil(n_threads);
            let results = std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for t in 0..n_threads {
                    let lo = t * chunk;
                    let hi = ((t + 1) * chunk).min(b);
                    if lo >= hi {
                        break;
                    }
                    let indices = &indices;
                    let seeds = &sample_seeds;
                    let model_cfg = &self.model_cfg;
                    let train_cfg = &self.train_cfg;
                    let params = &self.params;
                    let trainable = &self.trainable;
                    handles.push(scope.spawn(move || {
                        (lo..hi)
                            .map(|i| {
                                (
                                    i,
                                    run_sample(
                                        model_cfg,
                                        train_cfg,
                                        params,
                                        trainable,
                                        &dataset.records[indices[i]],
                                        seeds[i],
                                    ),
                                )
                            })
                            .collect::<Vec<_>>()
                    }));
                }
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("training worker panicked"))
                    .collect::<Vec<_>>()
            });
            for (i, out) in results {
                outs[i] = Some(out);
            }
        }

        // fixed-order reduction over the batch
        let mut grad_acc: Vec<Option<Tensor<f32>>> = (0..self.params.len()).map(|_| None).collect();
        let mut flow_sum = 0.0f64;
        let mut temp_sum = 0.0f64;
        for slot in outs.into_iter() {
            let out = slot.expect("sample slot unfilled")?;
            flow_sum += out.loss.flow as f64;
            temp_sum += out.loss.temp as f64;
            for (id, g) in out.grads.into_iter().enumerate() {
                if let Some(g) = g {
                    match &mut grad_acc[id] {
                        Some(acc) => {
                            for (a, gv) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += gv;
                            }
                        }
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        let scale = 1.0 / b as f32;
        for g in grad_acc.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        let breakdown = total_loss(
            (flow_sum / b as f64) as f32,
            (temp_sum / b as f64) as f32,
            self.train_cfg.omega,
        );
        let breakdown = match breakdown {
            Ok(bd) if bd.total.is_finite() => bd,
            other => {
                let msg = match other {
                    Ok(bd) => format!("flow {} temp {}", bd.flow, bd.temp),
                    Err(e) => e.to_string(),
                };
                eprintln!(
                    "warning: step {} rejected (non-finite loss: {msg}); state unchanged",
                    self.step
                );
                self.step += 1;
                return Ok(LossBreakdown {
                    flow: f32::NAN,
                    temp: f32::NAN,
                    total: f32::NAN,
                    omega: self.train_cfg.omega,
                });
            }
        };

        adamw_step(
            &mut self.params,
            &grad_acc,
            &mut self.opt,
            &self.trainable,
            &self.train_cfg.optim(),
        )?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Runs until `self.step == until`, reporting each step's loss.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        until: u64,
        mut on_step: impl FnMut(u64, &LossBreakdown),
    ) -> Result<()> {
        while self.step < until {
            let step = self.step;
            let loss = self.train_step(dataset)?;
            on_step(step, &loss);
        }
        Ok(())
    }
}

/// Stage-2 trainable set: the control pathway plus the null latent.
pub fn stage2_trainable(params: &ParamSet<f32>) -> Vec<bool> {
    (0..params.len())
        .map(|i| {
            let n = params.name(i);
            n.starts_with("control.") || n.starts_with("lines.") || n == "null_latent"
        })
        .collect()
}

/// Builds one training sample's graph, runs backward, and extracts the
/// per-parameter gradients.
fn run_sample(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    params: &ParamSet<f32>,
    trainable: &[bool],
    record: &ClipRecord,
    sample_seed: u64,
) -> Result<SampleOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    // one shared t per sample, uniform in (0, 1)
    let t = loop {
        let x: f64 = rng.gen();
        if x > 0.0 {
            break x;
        }
    };

    let gt = patchify_encode(&record.clip, model_cfg.lambda_s, model_cfg.lambda_t)?;
    let n_lat = gt.n_frames();
    let n_int = n_lat - 2;
    let z1 = gt.frames.slice(0, 1, n_int)?;
    let z0: Tensor<f32> = random_normal(z1.shape(), &mut rng);
    let null_end = (rng.gen::<f64>()) < train_cfg.p_drop as f64;

    let z_t = make_noisy(&z1, &z0, t)?;
    let v_target = true_velocity(&z0, &z1)?;
    let z_s = gt.frames.slice(0, 0, 1)?;
    let z_e = gt.frames.slice(0, n_lat - 1, 1)?;
    let noisy_clip = Tensor::concat(&[&z_s, &z_t, &z_e], 0)?;
    let times = PerFrameTimesteps::build(&gt.roles, t, model_cfg.fidelity_modulation)?;

    let mut ctx = GraphCtx::new(params, Some(trainable));
    let latents = ctx.tape.leaf(noisy_clip);
    let cond = if model_cfg.control_branch {
        let matches = match_lines(
            &record.lines[0],
            &record.lines[record.lines.len() - 1],
            MatchMode::GroundTruth,
        );
        let (map_s, map_e) = rasterize_matches(
            &matches,
            &record.lines[0],
            &record.lines[record.lines.len() - 1],
            model_cfg.height,
            model_cfg.width,
        );
        Some(encode_cond_graph(&mut ctx, model_cfg, &map_s, &map_e)?)
    } else {
        None
    };
    let out = forward_graph(&mut ctx, model_cfg, latents, &times, cond, null_end)?;
    let pred_inter = match model_cfg.reference_mode {
        ReferenceMode::Temporal => ctx.tape.slice(out, 0, 1, n_int)?,
        ReferenceMode::Channel => out,
    };
    let target = ctx.tape.leaf(v_target);
    let flow = flow_loss_graph(&mut ctx.tape, pred_inter, target)?;
    let temp = temp_loss_graph(&mut ctx.tape, pred_inter, target)?;
    let total = total_loss_graph(&mut ctx.tape, flow, temp, train_cfg.omega as f64)?;

    let grads = ctx.tape.backward(total)?;
    let mut out_grads: Vec<Option<Tensor<f32>>> = (0..params.len()).map(|_| None).collect();
    for (id, slot) in out_grads.iter_mut().enumerate() {
        if !trainable[id] {
            continue;
        }
        if let Some(var) = ctx.used_param(id) {
            if let Some(g) = grads.wrt_ref(var) {
                *slot = Some(g.clone());
            }
        }
    }
    let loss = LossBreakdown {
        flow: ctx.tape.value(flow).item()?,
        temp: ctx.tape.value(temp).item()?,
        total: ctx.tape.value(total).item()?,
        omega: train_cfg.omega,
    };
    Ok(SampleOut {
        loss,
        grads: out_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, render_clip, GeneratorConfig};

    fn tiny_dataset(n: usize) -> Dataset {
        let cfg = GeneratorConfig {
            width: 16,
            height: 16,
            radius: [3.0, 5.0],
            speed: [0.5, 1.5],
            ..GeneratorConfig::default()
        };
        let records: Vec<ClipRecord> = (0..n as u64)
            .map(|seed| {
                let scene = generate_scene(seed, &cfg).unwrap();
                let (clip, lines) = render_clip(&scene, 5).unwrap();
                ClipRecord { seed, clip, lines }
            })
            .collect();
        let manifest = crate::data::DatasetManifest {
            version: 1,
            resolution: [16, 16],
            n_intermediate: 3,
            lambda_s: 2,
            lambda_t: 1,
            clips: records
                .iter()
                .map(|r| crate::data::dataset::ClipEntry {
                    seed: r.seed,
                    frames_file: String::new(),
                    lines_file: String::new(),
                })
                .collect(),
        };
        Dataset { manifest, records }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            dim: 32,
            blocks: 2,
            heads: 2,
            height: 16,
            width: 16,
            ..ModelConfig::default()
        }
    }

    fn tiny_train(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            steps,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_identical_loss_sequence() {
        let ds = tiny_dataset(4);
        let run = || {
            let mut tr = Trainer::stage1(tiny_model(), tiny_train(50), &ds).unwrap();
            let mut losses = Vec::new();
            tr.run(&ds, 50, |_, l| losses.push(l.total.to_bits())).unwrap();
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = tiny_dataset(4);
        let run = |threads: &str| {
            std::env::set_var("TFMR_THREADS", threads);
            let mut tr = Trainer::stage1(tiny_model(), tiny_train(10), &ds).unwrap();
            let mut losses = Vec::new();
            tr.run(&ds, 10, |_, l| losses.push(l.total.to_bits())).unwrap();
            std::env::remove_var("TFMR_THREADS");
            losses
        };
        assert_eq!(run("1"), run("2"));
    }

    #[test]
    fn stage2_freezes_backbone_bit_exactly() {
        let ds = tiny_dataset(4);
        let mut s1 = Trainer::stage1(tiny_model(), tiny_train(5), &ds).unwrap();
        s1.run(&ds, 5, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s1.save(dir.path()).unwrap();

        let ckpt = load_checkpoint(dir.path()).unwrap();
        let mut cfg2 = tiny_train(10);
        cfg2.stage = 2;
        cfg2.lr = 1e-3;
        let mut s2 = Trainer::stage2(ckpt, cfg2, &ds).unwrap();
        let digest_before = s2.frozen_digest();
        s2.run(&ds, 10, |_, _| {}).unwrap();
        assert_eq!(digest_before, s2.frozen_digest());
        // and the trainable set really moved
        assert!(s2
            .params
            .iter()
            .any(|(n, t)| n.starts_with("lines.") && t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn stage2_init_prediction_matches_stage1() {
        let ds = tiny_dataset(4);
        let mut s1 = Trainer::stage1(tiny_model(), tiny_train(3), &ds).unwrap();
        s1.run(&ds, 3, |_, _| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s1.save(dir.path()).unwrap();
        let ckpt = load_checkpoint(dir.path()).unwrap();
        let mut cfg2 = tiny_train(1);
        cfg2.stage = 2;
        let s2 = Trainer::stage2(ckpt, cfg2, &ds).unwrap();

        // paired forward passes before any stage-2 update
        let gt = patchify_encode(&ds.records[0].clip, 2, 1).unwrap();
        let times = PerFrameTimesteps::build(&gt.roles, 0.5, true).unwrap();
        let v1 = crate::model::predict_velocity(
            &s1.model_cfg,
            &s1.params,
            &gt.frames,
            &times,
            None,
            false,
        )
        .unwrap();
        let v2 = crate::model::predict_velocity(
            &s2.model_cfg,
            &s2.params,
            &gt.frames,
            &times,
            None,
            false,
        )
        .unwrap();
        assert!(v1
            .data()
            .iter()
            .zip(v2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_roundtrip_resumes_identically() {
        let ds = tiny_dataset(4);
        // uninterrupted 20 steps
        let mut full = Trainer::stage1(tiny_model(), tiny_train(20), &ds).unwrap();
        let mut full_losses = Vec::new();
        full.run(&ds, 20, |_, l| full_losses.push(l.total.to_bits()))
            .unwrap();

        // interrupted at 10, saved, resumed
        let mut half = Trainer::stage1(tiny_model(), tiny_train(20), &ds).unwrap();
        let mut half_losses = Vec::new();
        half.run(&ds, 10, |_, l| half_losses.push(l.total.to_bits()))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        half.save(dir.path()).unwrap();
        let mut resumed = Trainer::resume(load_checkpoint(dir.path()).unwrap()).unwrap();
        assert_eq!(resumed.step, 10);
        resumed
            .run(&ds, 20, |_, l| half_losses.push(l.total.to_bits()))
            .unwrap();
        assert_eq!(full_losses, half_losses);
        // weights identical too
        for ((_, a), (_, b)) in full.params.iter().zip(resumed.params.iter()) {
            assert!(a
                .data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn stage1_rejects_control_branch() {
        let ds = tiny_dataset(2);
        let cfg = ModelConfig {
            control_branch: true,
            ..tiny_model()
        };
        assert!(Trainer::stage1(cfg, tiny_train(1), &ds).is_err());
    }

    #[test]
    fn geometry_mismatch_rejected_at_startup() {
        let ds = tiny_dataset(2);
        let cfg = ModelConfig {
            height: 32,
            width: 32,
            ..tiny_model()
        };
        assert!(Trainer::stage1(cfg, tiny_train(1), &ds).is_err());
    }
}
