//! Procedural scenes: rigid polygons with linear and angular motion over a
//! flat background, rendered by hard-edged pixel-center rasterization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::codec::VideoClip;

/// One rigid polygon and its motion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    /// Vertex positions at frame 0, pixel coordinates (x, y).
    pub vertices: Vec<[f64; 2]>,
    /// Fill level in [0, 1].
    pub fill: f32,
    /// Linear velocity in px/frame.
    pub velocity: [f64; 2],
    /// Angular velocity in rad/frame.
    pub angular_velocity: f64,
    /// Rotation center at frame 0; translates with the polygon.
    pub rotation_center: [f64; 2],
}

impl Polygon {
    /// Vertex positions at frame `f`.
    pub fn vertices_at(&self, frame: f64) -> Vec<[f64; 2]> {
        let theta = self.angular_velocity * frame;
        let (sin, cos) = theta.sin_cos();
        let cx = self.rotation_center[0];
        let cy = self.rotation_center[1];
        let tx = self.velocity[0] * frame;
        let ty = self.velocity[1] * frame;
        self.vertices
            .iter()
            .map(|&[x, y]| {
                let dx = x - cx;
                let dy = y - cy;
                [
                    cx + dx * cos - dy * sin + tx,
                    cy + dx * sin + dy * cos + ty,
                ]
            })
            .collect()
    }
}

/// A fully specified scene: deterministic function of (seed, config).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Background level in [0, 1].
    pub background: f32,
    pub polygons: Vec<Polygon>,
    pub seed: u64,
}

/// Bounds for scene generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    /// Number of intermediate frames; containment is enforced over the
    /// whole n_intermediate + 2 frame clip.
    pub n_intermediate: usize,
    /// Inclusive polygon count range.
    pub polygon_count: [usize; 2],
    /// Inclusive vertex count range per polygon.
    pub vertex_count: [usize; 2],
    /// Polygon radius range in px.
    pub radius: [f64; 2],
    /// Speed range (Euclidean norm of velocity) in px/frame.
    pub speed: [f64; 2],
    /// Angular velocity range in rad/frame (signed).
    pub angular_velocity: [f64; 2],
    /// Background level range.
    pub background: [f32; 2],
    /// Polygon fill level range.
    pub fill: [f32; 2],
    /// Placement retries per polygon before the config is rejected.
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 64,
            height: 64,
            n_intermediate: 3,
            polygon_count: [1, 4],
            vertex_count: [3, 6],
            radius: [7.0, 14.0],
            speed: [2.0, 10.0],
            angular_velocity: [-0.1, 0.1],
            background: [0.0, 0.25],
            fill: [0.45, 1.0],
            max_retries: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("resolution must be positive"));
        }
        if self.polygon_count[0] < 1 || self.polygon_count[0] > self.polygon_count[1] {
            return Err(Error::config("polygon_count range invalid"));
        }
        if self.vertex_count[0] < 3 || self.vertex_count[0] > self.vertex_count[1] {
            return Err(Error::config("vertex_count range invalid (min 3)"));
        }
        for (name, r) in [("radius", self.radius), ("speed", self.speed)] {
            if r[0] < 0.0 || r[0] > r[1] {
                return Err(Error::config(format!("{name} range invalid")));
            }
        }
        Ok(())
    }

    fn frame_count(&self) -> usize {
        self.n_intermediate + 2
    }
}

fn sample_range(rng: &mut ChaCha8Rng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn sample_range_f32(rng: &mut ChaCha8Rng, range: [f32; 2]) -> f32 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Deterministically generates a scene satisfying the motion-containment
/// invariant: every polygon's bounding box stays >= 1 px inside the frame
/// for the clip duration.
pub fn generate_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = sample_range_f32(&mut rng, config.background);
    let count = if config.polygon_count[0] == config.polygon_count[1] {
        config.polygon_count[0]
    } else {
        rng.gen_range(config.polygon_count[0]..=config.polygon_count[1])
    };
    let travel = (config.frame_count() - 1) as f64;

    let mut polygons = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..config.max_retries {
            let radius = sample_range(&mut rng, config.radius);
            let speed = sample_range(&mut rng, config.speed);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let velocity = [speed * dir.cos(), speed * dir.sin()];
            let omega = sample_range(&mut rng, config.angular_velocity);
            // displacement over the clip; rotation stays within `radius` of
            // the center because the rotation center is the polygon center
            let dx = velocity[0] * travel;
            let dy = velocity[1] * travel;
            let x_lo = 1.0 + radius - dx.min(0.0);
            let x_hi = config.width as f64 - 1.0 - radius - dx.max(0.0);
            let y_lo = 1.0 + radius - dy.min(0.0);
            let y_hi = config.height as f64 - 1.0 - radius - dy.max(0.0);
            if x_lo >= x_hi || y_lo >= y_hi {
                continue;
            }
            let center = [rng.gen_range(x_lo..x_hi), rng.gen_range(y_lo..y_hi)];
            let k = if config.vertex_count[0] == config.vertex_count[1] {
                config.vertex_count[0]
            } else {
                rng.gen_range(config.vertex_count[0]..=config.vertex_count[1])
            };
            // jittered regular angles: separated by construction, so the
            // polygon cannot self-intersect
            let base = rng.gen_range(0.0..std::f64::consts::TAU);
            let vertices: Vec<[f64; 2]> = (0..k)
                .map(|i| {
                    let jitter = rng.gen_range(-0.3..0.3);
                    let angle =
                        base + (i as f64 + jitter) * std::f64::consts::TAU / k as f64;
                    let r = rng.gen_range(0.55 * radius..radius);
                    [
                        center[0] + r * angle.cos(),
                        center[1] + r * angle.sin(),
                    ]
                })
                .collect();
            let fill = sample_range_f32(&mut rng, config.fill);
            placed = Some(Polygon {
                vertices,
                fill,
                velocity,
                angular_velocity: omega,
                rotation_center: center,
            });
            break;
        }
        match placed {
            Some(p) => polygons.push(p),
            None => {
                return Err(Error::config(format!(
                    "cannot place a polygon satisfying containment after {} retries \
                     (radius {:?} / speed {:?} too large for {}x{}?)",
                    config.max_retries, config.radius, config.speed, config.width, config.height
                )))
            }
        }
    }

    let scene = SceneSpec {
        width: config.width,
        height: config.height,
        background,
        polygons,
        seed,
    };
    check_containment(&scene, config.frame_count())?;
    Ok(scene)
}

/// Exact per-frame bounding-box check of the containment invariant.
pub fn check_containment(scene: &SceneSpec, frame_count: usize) -> Result<()> {
    for f in 0..frame_count {
        for (pi, poly) in scene.polygons.iter().enumerate() {
            let vs = poly.vertices_at(f as f64);
            for &[x, y] in &vs {
                if x < 1.0
                    || y < 1.0
                    || x > scene.width as f64 - 1.0
                    || y > scene.height as f64 - 1.0
                {
                    return Err(Error::data(format!(
                        "polygon {pi} leaves the 1 px margin at frame {f} ({x:.2}, {y:.2})"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Even-odd point-in-polygon test.
fn point_in_polygon(px: f64, py: f64, vs: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = vs.len();
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = vs[i];
        let [xj, yj] = vs[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Renders `frame_count` frames (frame 0 is the start boundary, frame
/// `frame_count-1` the end boundary). Pixel centers inside a polygon take
/// its fill level, later polygons painting over earlier ones.
///
/// Returns the clip and the analytically transformed polygon edges per
/// frame.
pub fn render_clip(
    scene: &SceneSpec,
    frame_count: usize,
) -> Result<(VideoClip, Vec<crate::lines::LineSegmentSet>)> {
    let n_prime = frame_count
        .checked_sub(2)
        .ok_or_else(|| Error::config("clip needs at least one intermediate frame"))?;
    if !matches!(n_prime, 3 | 7) {
        return Err(Error::config(format!(
            "frame count {frame_count} gives {n_prime} intermediates; supported settings are 3 and 7"
        )));
    }
    render_clip_any(scene, frame_count)
}

/// Rendering without the intermediate-count restriction (used by tests and
/// the renderer itself).
pub fn render_clip_any(
    scene: &SceneSpec,
    frame_count: usize,
) -> Result<(VideoClip, Vec<crate::lines::LineSegmentSet>)> {
    check_containment(scene, frame_count)?;
    let (h, w) = (scene.height, scene.width);
    let mut frames = Tensor::full(&[frame_count, 1, h, w], scene.background);
    let mut line_sets = Vec::with_capacity(frame_count);
    for f in 0..frame_count {
        let base = f * h * w;
        let buf = frames.data_mut();
        for poly in &scene.polygons {
            let vs = poly.vertices_at(f as f64);
            // bounding box prefilter
            let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
            for &[x, y] in &vs {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            let ylo = (y0.floor().max(0.0)) as usize;
            let yhi = (y1.ceil() as usize).min(h - 1);
            let xlo = (x0.floor().max(0.0)) as usize;
            let xhi = (x1.ceil() as usize).min(w - 1);
            for y in ylo..=yhi {
                for x in xlo..=xhi {
                    if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &vs) {
                        buf[base + y * w + x] = poly.fill;
                    }
                }
            }
        }
        line_sets.push(crate::lines::extract_lines(scene, f));
    }
    Ok((VideoClip::new(frames, 30.0)?, line_sets))
}

/// Intensity-weighted centroid of one rendered frame relative to the
/// background level (test oracle for motion checks).
pub fn frame_centroid(clip: &VideoClip, frame: usize, background: f32) -> Option<(f64, f64)> {
    let (h, w) = (clip.height(), clip.width());
    let data = clip.frames.data();
    let base = frame * h * w;
    let mut mass = 0.0f64;
    let mut mx = 0.0f64;
    let mut my = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let weight = (data[base + y * w + x] - background).abs() as f64;
            mass += weight;
            mx += weight * (x as f64 + 0.5);
            my += weight * (y as f64 + 0.5);
        }
    }
    if mass == 0.0 {
        None
    } else {
        Some((mx / mass, my / mass))
    }
}
