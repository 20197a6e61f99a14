//! Exact invertible patchify codec between pixel clips and latent clips.
//!
//! Spatial compression rearranges lambda_s x lambda_s pixel blocks into
//! channels; temporal compression stacks lambda_t consecutive intermediate
//! frames channel-wise. Boundary frames are always encoded individually:
//! when lambda_t > 1 their space-to-channel block is replicated lambda_t
//! times so every latent frame has the same channel count. The whole thing
//! is a pure rearrangement, so decode(encode(clip)) is bit-exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Grayscale channel count of pixel-space clips.
pub const C_IMG: usize = 1;

/// Role of a latent frame in the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameRole {
    #[serde(rename = "boundary-start")]
    BoundaryStart,
    #[serde(rename = "intermediate")]
    Intermediate,
    #[serde(rename = "boundary-end")]
    BoundaryEnd,
}

/// Pixel-space clip: frame 0 is the start boundary, the last frame the end
/// boundary, everything between an intermediate.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    /// [F, 1, H, W], values in [0, 1].
    pub frames: Tensor<f32>,
    pub fps: f32,
    pub timestamps: Vec<f32>,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>, fps: f32) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[1] != C_IMG {
            return Err(Error::shape(format!(
                "clip frames must be [F, {C_IMG}, H, W], got {:?}",
                frames.shape()
            )));
        }
        if frames.shape()[0] < 3 {
            return Err(Error::shape("a clip needs at least 3 frames"));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::data("clip values must lie in [0, 1]"));
        }
        let n = frames.shape()[0];
        let timestamps = (0..n).map(|i| i as f32 / fps).collect();
        Ok(VideoClip {
            frames,
            fps,
            timestamps,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_intermediate(&self) -> usize {
        self.n_frames() - 2
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// One frame as an [1, H, W] tensor.
    pub fn frame(&self, idx: usize) -> Result<Tensor<f32>> {
        let f = self.frames.slice(0, idx, 1)?;
        f.reshape(&[C_IMG, self.height(), self.width()])
    }
}

/// Latent-space clip produced by the patchify codec.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    /// [N_lat, C, H, W] with C = C_IMG * lambda_s^2 * lambda_t.
    pub frames: Tensor<f32>,
    pub roles: Vec<FrameRole>,
    pub lambda_s: usize,
    pub lambda_t: usize,
    pub fps: f32,
}

impl LatentClip {
    pub fn n_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Shape of one latent frame.
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn validate_roles(&self) -> Result<()> {
        let n = self.roles.len();
        if n != self.n_frames() || n < 3 {
            return Err(Error::shape("role list does not match latent frame count"));
        }
        let ok = self.roles[0] == FrameRole::BoundaryStart
            && self.roles[n - 1] == FrameRole::BoundaryEnd
            && self.roles[1..n - 1]
                .iter()
                .all(|r| *r == FrameRole::Intermediate);
        if !ok {
            return Err(Error::data(format!("malformed role sequence {:?}", self.roles)));
        }
        Ok(())
    }
}

fn check_ratios(lambda_s: usize, lambda_t: usize) -> Result<()> {
    if !matches!(lambda_s, 2 | 4) {
        return Err(Error::config(format!("lambda_s must be 2 or 4, got {lambda_s}")));
    }
    if !matches!(lambda_t, 1 | 2) {
        return Err(Error::config(format!("lambda_t must be 1 or 2, got {lambda_t}")));
    }
    Ok(())
}

/// Space-to-channel for a single [1, H', W'] frame slice into `out`,
/// producing lambda_s^2 channels of [H'/l, W'/l].
fn space_to_channel(frame: &[f32], h: usize, w: usize, l: usize, out: &mut Vec<f32>) {
    let (lh, lw) = (h / l, w / l);
    for dy in 0..l {
        for dx in 0..l {
            for y in 0..lh {
                for x in 0..lw {
                    out.push(frame[(y * l + dy) * w + (x * l + dx)]);
                }
            }
        }
    }
}

fn channel_to_space(latent: &[f32], lh: usize, lw: usize, l: usize, out: &mut [f32]) {
    let w = lw * l;
    let mut idx = 0usize;
    for dy in 0..l {
        for dx in 0..l {
            for y in 0..lh {
                for x in 0..lw {
                    out[(y * l + dy) * w + (x * l + dx)] = latent[idx];
                    idx += 1;
                }
            }
        }
    }
}

/// Encodes a pixel clip into latents. Boundary frames map to one latent
/// frame each; intermediates are grouped lambda_t at a time.
pub fn patchify_encode(clip: &VideoClip, lambda_s: usize, lambda_t: usize) -> Result<LatentClip> {
    check_ratios(lambda_s, lambda_t)?;
    let (h, w) = (clip.height(), clip.width());
    if h % lambda_s != 0 || w % lambda_s != 0 {
        return Err(Error::shape(format!(
            "resolution {h}x{w} not divisible by lambda_s {lambda_s}"
        )));
    }
    let n_prime = clip.n_intermediate();
    if n_prime % lambda_t != 0 {
        return Err(Error::shape(format!(
            "lambda_t {lambda_t} does not divide {n_prime} intermediate frames"
        )));
    }
    let (lh, lw) = (h / lambda_s, w / lambda_s);
    let channels = C_IMG * lambda_s * lambda_s * lambda_t;
    let n_lat = n_prime / lambda_t + 2;
    let mut data = Vec::with_capacity(n_lat * channels * lh * lw);
    let mut roles = Vec::with_capacity(n_lat);

    let frame_at = |idx: usize| -> &[f32] {
        let sz = h * w;
        &clip.frames.data()[idx * sz..(idx + 1) * sz]
    };

    // boundary start: replicate so channel counts match the intermediates
    for _ in 0..lambda_t {
        space_to_channel(frame_at(0), h, w, lambda_s, &mut data);
    }
    roles.push(FrameRole::BoundaryStart);

    for group in 0..n_prime / lambda_t {
        for j in 0..lambda_t {
            space_to_channel(frame_at(1 + group * lambda_t + j), h, w, lambda_s, &mut data);
        }
        roles.push(FrameRole::Intermediate);
    }

    for _ in 0..lambda_t {
        space_to_channel(frame_at(clip.n_frames() - 1), h, w, lambda_s, &mut data);
    }
    roles.push(FrameRole::BoundaryEnd);

    Ok(LatentClip {
        frames: Tensor::new(vec![n_lat, channels, lh, lw], data)?,
        roles,
        lambda_s,
        lambda_t,
        fps: clip.fps,
    })
}

/// Exact inverse of [`patchify_encode`].
pub fn patchify_decode(latents: &LatentClip) -> Result<VideoClip> {
    let (lambda_s, lambda_t) = (latents.lambda_s, latents.lambda_t);
    check_ratios(lambda_s, lambda_t)?;
    latents.validate_roles()?;
    let expected_c = C_IMG * lambda_s * lambda_s * lambda_t;
    if latents.channels() != expected_c {
        return Err(Error::shape(format!(
            "latent channel count {} does not match lambda_s {lambda_s} lambda_t {lambda_t} \
             (expected {expected_c})",
            latents.channels()
        )));
    }
    let (lh, lw) = (latents.height(), latents.width());
    let (h, w) = (lh * lambda_s, lw * lambda_s);
    let n_groups = latents.n_frames() - 2;
    let n_prime = n_groups * lambda_t;
    let n_frames = n_prime + 2;
    let block = C_IMG * lambda_s * lambda_s * lh * lw; // one pixel frame worth of latent data
    let mut frames = vec![0.0f32; n_frames * h * w];

    let latent_at = |idx: usize| -> &[f32] {
        let sz = expected_c * lh * lw;
        &latents.frames.data()[idx * sz..(idx + 1) * sz]
    };

    // boundaries: first replica block holds the frame
    channel_to_space(&latent_at(0)[..block], lh, lw, lambda_s, &mut frames[..h * w]);
    let last = n_frames - 1;
    channel_to_space(
        &latent_at(latents.n_frames() - 1)[..block],
        lh,
        lw,
        lambda_s,
        &mut frames[last * h * w..(last + 1) * h * w],
    );

    for group in 0..n_groups {
        let lat = latent_at(1 + group);
        for j in 0..lambda_t {
            let fidx = 1 + group * lambda_t + j;
            channel_to_space(
                &lat[j * block..(j + 1) * block],
                lh,
                lw,
                lambda_s,
                &mut frames[fidx * h * w..(fidx + 1) * h * w],
            );
        }
    }

    let tensor = Tensor::new(vec![n_frames, C_IMG, h, w], frames)?;
    // bypass the [0,1] value check: latents may carry anything mid-sampling
    let timestamps = (0..n_frames).map(|i| i as f32 / latents.fps).collect();
    Ok(VideoClip {
        frames: tensor,
        fps: latents.fps,
        timestamps,
    })
}

/// Encodes a single [1, H, W] pixel frame into a boundary latent frame
/// [C, H/l, W/l] (replicated lambda_t times channel-wise when lambda_t > 1).
pub fn encode_frame(frame: &Tensor<f32>, lambda_s: usize, lambda_t: usize) -> Result<Tensor<f32>> {
    check_ratios(lambda_s, lambda_t)?;
    if frame.rank() != 3 || frame.shape()[0] != C_IMG {
        return Err(Error::shape(format!(
            "expected [1, H, W] frame, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    if h % lambda_s != 0 || w % lambda_s != 0 {
        return Err(Error::shape(format!(
            "frame {h}x{w} not divisible by lambda_s {lambda_s}"
        )));
    }
    let mut data = Vec::new();
    for _ in 0..lambda_t {
        space_to_channel(frame.data(), h, w, lambda_s, &mut data);
    }
    Tensor::new(
        vec![C_IMG * lambda_s * lambda_s * lambda_t, h / lambda_s, w / lambda_s],
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(n_prime: usize, h: usize, w: usize, seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = Tensor::from_fn(&[n_prime + 2, 1, h, w], |_| rng.gen_range(0.0..1.0));
        VideoClip::new(frames, 30.0).unwrap()
    }

    #[test]
    fn four_by_four_frame_shape() {
        let clip = random_clip(1, 4, 4, 0);
        let lat = patchify_encode(&clip, 2, 1).unwrap();
        assert_eq!(lat.frames.shape(), &[3, 4, 2, 2]);
    }

    #[test]
    fn roundtrip_bit_exact_all_ratios() {
        for (ls, lt) in [(2, 1), (2, 2), (4, 1), (4, 2)] {
            let n_prime = if lt == 2 { 4 } else { 3 };
            let clip = random_clip(n_prime, 16, 8 * ls, (ls * 10 + lt) as u64);
            let lat = patchify_encode(&clip, ls, lt).unwrap();
            let back = patchify_decode(&lat).unwrap();
            assert_eq!(back.frames, clip.frames, "ls={ls} lt={lt}");
            assert_eq!(back.timestamps, clip.timestamps);
        }
    }

    #[test]
    fn latent_count_n7_lambda1() {
        let clip = random_clip(7, 8, 8, 1);
        let lat = patchify_encode(&clip, 2, 1).unwrap();
        assert_eq!(lat.n_frames(), 9);
        assert_eq!(lat.roles[0], FrameRole::BoundaryStart);
        assert_eq!(lat.roles[8], FrameRole::BoundaryEnd);
        assert!(lat.roles[1..8].iter().all(|r| *r == FrameRole::Intermediate));
    }

    #[test]
    fn zero_latents_decode_to_zero_frames() {
        let lat = LatentClip {
            frames: Tensor::zeros(&[3, 4, 2, 2]),
            roles: vec![
                FrameRole::BoundaryStart,
                FrameRole::Intermediate,
                FrameRole::BoundaryEnd,
            ],
            lambda_s: 2,
            lambda_t: 1,
            fps: 30.0,
        };
        let clip = patchify_decode(&lat).unwrap();
        assert_eq!(clip.frames.shape(), &[3, 1, 4, 4]);
        assert!(clip.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_divisible_rejected() {
        let clip = random_clip(3, 6, 6, 2);
        assert!(patchify_encode(&clip, 4, 1).is_err());
        let clip = random_clip(3, 8, 8, 3);
        assert!(patchify_encode(&clip, 2, 2).is_err()); // lambda_t 2 does not divide 3
    }

    #[test]
    fn malformed_channel_count_rejected() {
        let lat = LatentClip {
            frames: Tensor::zeros(&[3, 5, 2, 2]),
            roles: vec![
                FrameRole::BoundaryStart,
                FrameRole::Intermediate,
                FrameRole::BoundaryEnd,
            ],
            lambda_s: 2,
            lambda_t: 1,
            fps: 30.0,
        };
        assert!(patchify_decode(&lat).is_err());
    }

    #[test]
    fn encode_frame_matches_clip_boundary() {
        let clip = random_clip(3, 8, 8, 4);
        let lat = patchify_encode(&clip, 2, 1).unwrap();
        let f0 = clip.frame(0).unwrap();
        let enc = encode_frame(&f0, 2, 1).unwrap();
        let lat0 = lat.frames.slice(0, 0, 1).unwrap();
        assert_eq!(enc.data(), lat0.data());
    }
}
