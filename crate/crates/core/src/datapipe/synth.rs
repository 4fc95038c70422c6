//! Synthetic moving-shape videos with labeled motion anomalies.
//!
//! Every video shows a few bright discs and squares drifting at constant
//! velocity and bouncing off the borders. Test videos additionally contain
//! anomaly intervals in which one object misbehaves:
//!
//! * `teleport`: the object is drawn at a fresh random position every frame;
//! * `speed_burst`: the object moves `speed_burst_factor` times faster;
//! * `direction_flip`: the object reverses direction every `flip_period` frames.
//!
//! Labels mark exactly the frames inside the intervals.

use std::sync::Arc;

use image::{DynamicImage, GrayImage, Luma};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, FrameSource, Split, VideoEntry};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Teleport,
    SpeedBurst,
    DirectionFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub frame_size: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    /// Inclusive range of objects per video.
    pub shape_count: [usize; 2],
    pub shape_radius: [f64; 2],
    /// Normal speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Cycled over test videos.
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub anomalies_per_video: usize,
    pub anomaly_length: usize,
    pub speed_burst_factor: f64,
    pub flip_period: usize,
    pub background: u8,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            frame_size: 64,
            train_videos: 20,
            test_videos: 8,
            frames_per_video: 100,
            shape_count: [2, 3],
            shape_radius: [4.0, 7.0],
            speed: [0.6, 1.4],
            anomaly_kinds: vec![AnomalyKind::Teleport, AnomalyKind::SpeedBurst],
            anomalies_per_video: 1,
            anomaly_length: 10,
            speed_burst_factor: 2.0,
            flip_period: 2,
            background: 40,
        }
    }
}

/// One injected anomaly: frames `start..start + len` of a test video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyInterval {
    pub video_id: String,
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub object: usize,
}

impl AnomalyInterval {
    pub fn contains(&self, frame: usize) -> bool {
        (self.start..self.start + self.len).contains(&frame)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub intervals: Vec<AnomalyInterval>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.frame_size < 8 || self.frames_per_video == 0 {
            return fail("frame_size must be >= 8 and frames_per_video >= 1");
        }
        if self.shape_count[0] == 0 || self.shape_count[0] > self.shape_count[1] {
            return fail("shape_count must be a non-empty range [lo, hi] with lo >= 1");
        }
        if !(self.shape_radius[0] > 0.0 && self.shape_radius[0] <= self.shape_radius[1])
            || 2.0 * self.shape_radius[1] >= self.frame_size as f64
        {
            return fail("shape_radius must be a positive range smaller than half the frame");
        }
        if !(self.speed[0] >= 0.0 && self.speed[0] <= self.speed[1]) {
            return fail("speed must be a non-negative range");
        }
        if self.anomalies_per_video > 0 {
            if self.anomaly_kinds.is_empty() {
                return fail("anomalies requested but anomaly_kinds is empty");
            }
            if self.anomaly_length == 0 {
                return fail("anomaly_length must be >= 1");
            }
            let (lo, hi) = self.anomaly_region();
            if self.anomalies_per_video * self.anomaly_length > hi - lo {
                return fail(&format!(
                    "{} anomalies of {} frames do not fit in a {}-frame video",
                    self.anomalies_per_video, self.anomaly_length, self.frames_per_video
                ));
            }
        }
        if self.flip_period == 0 || self.speed_burst_factor <= 0.0 {
            return fail("flip_period and speed_burst_factor must be positive");
        }
        Ok(())
    }

    /// Frames that may host anomalies; the first fifth stays normal.
    fn anomaly_region(&self) -> (usize, usize) {
        (self.frames_per_video / 5, self.frames_per_video)
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    radius: f64,
    intensity: f64,
    pos: [f64; 2],
    vel: [f64; 2],
}

impl Object {
    fn random(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> Self {
        let s = spec.frame_size as f64;
        let radius = rng.random_range(spec.shape_radius[0]..=spec.shape_radius[1]);
        let speed = rng.random_range(spec.speed[0]..=spec.speed[1]);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        Self {
            shape: if rng.random::<bool>() { Shape::Disc } else { Shape::Square },
            radius,
            intensity: rng.random_range(150.0..=235.0),
            pos: [rng.random_range(radius..s - radius), rng.random_range(radius..s - radius)],
            vel: [speed * angle.cos(), speed * angle.sin()],
        }
    }

    /// Advances by `scale` times the velocity, reflecting off the borders.
    fn step(&mut self, size: f64, scale: f64) {
        for a in 0..2 {
            let (lo, hi) = (self.radius, size - self.radius);
            let mut p = self.pos[a] + self.vel[a] * scale;
            // a fast object may bounce more than once per step
            while p < lo || p > hi {
                if p < lo {
                    p = 2.0 * lo - p;
                } else {
                    p = 2.0 * hi - p;
                }
                self.vel[a] = -self.vel[a];
            }
            self.pos[a] = p;
        }
    }

    /// Fraction of pixel `(x, y)` covered by the object drawn at `pos`.
    fn coverage(&self, pos: [f64; 2], x: usize, y: usize) -> f64 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match self.shape {
            Shape::Disc => {
                let d = ((px - pos[0]).powi(2) + (py - pos[1]).powi(2)).sqrt();
                (self.radius + 0.5 - d).clamp(0.0, 1.0)
            }
            Shape::Square => {
                let overlap = |p: f64, c: f64| {
                    let lo = (p - 0.5).max(c - self.radius);
                    let hi = (p + 0.5).min(c + self.radius);
                    (hi - lo).max(0.0)
                };
                overlap(px, pos[0]) * overlap(py, pos[1])
            }
        }
    }
}

fn video_rng(seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let lane = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    ChaCha8Rng::seed_from_u64(seed ^ ((index as u64) << 1 | lane).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn render(spec: &SyntheticSpec, objects: &[(Object, [f64; 2])]) -> DynamicImage {
    let n = spec.frame_size;
    let bg = spec.background as f64;
    let img = GrayImage::from_fn(n as u32, n as u32, |x, y| {
        // faint fixed vertical gradient so the scene is not flat
        let mut v = bg + 12.0 * (y as f64 / n as f64);
        for (o, pos) in objects {
            let c = o.coverage(*pos, x as usize, y as usize);
            v = v * (1.0 - c) + o.intensity * c;
        }
        Luma([v.round().clamp(0.0, 255.0) as u8])
    });
    DynamicImage::ImageLuma8(img)
}

fn generate_video(
    spec: &SyntheticSpec,
    split: Split,
    index: usize,
    intervals: &mut Vec<AnomalyInterval>,
) -> VideoEntry {
    let mut rng = video_rng(spec.seed, split, index);
    let id = format!("{:02}", index + 1);
    let n_obj = rng.random_range(spec.shape_count[0]..=spec.shape_count[1]);
    let mut objects: Vec<Object> = (0..n_obj).map(|_| Object::random(&mut rng, spec)).collect();

    let mut mine = Vec::new();
    if split == Split::Test && spec.anomalies_per_video > 0 {
        let (lo, hi) = spec.anomaly_region();
        let slot = (hi - lo) / spec.anomalies_per_video;
        for k in 0..spec.anomalies_per_video {
            let slot_lo = lo + k * slot;
            let start = rng.random_range(slot_lo..=slot_lo + slot - spec.anomaly_length);
            let kind = spec.anomaly_kinds[(index * spec.anomalies_per_video + k) % spec.anomaly_kinds.len()];
            mine.push(AnomalyInterval {
                video_id: id.clone(),
                kind,
                start,
                len: spec.anomaly_length,
                object: rng.random_range(0..n_obj),
            });
        }
    }

    let size = spec.frame_size as f64;
    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut labels = vec![false; spec.frames_per_video];
    for f in 0..spec.frames_per_video {
        let active: Vec<&AnomalyInterval> = mine.iter().filter(|a| a.contains(f)).collect();
        labels[f] = !active.is_empty();
        if f > 0 {
            for (i, o) in objects.iter_mut().enumerate() {
                let mut scale = 1.0;
                for a in active.iter().filter(|a| a.object == i) {
                    match a.kind {
                        AnomalyKind::SpeedBurst => scale = spec.speed_burst_factor,
                        AnomalyKind::DirectionFlip if (f - a.start) % spec.flip_period == 0 => {
                            o.vel = [-o.vel[0], -o.vel[1]];
                        }
                        _ => {}
                    }
                }
                o.step(size, scale);
            }
        }
        let drawn: Vec<(Object, [f64; 2])> = objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let teleported = active.iter().any(|a| a.object == i && a.kind == AnomalyKind::Teleport);
                let pos = if teleported {
                    [rng.random_range(o.radius..size - o.radius), rng.random_range(o.radius..size - o.radius)]
                } else {
                    o.pos
                };
                (o.clone(), pos)
            })
            .collect();
        frames.push(Arc::new(render(spec, &drawn)));
    }
    intervals.extend(mine);
    VideoEntry {
        id,
        frames: FrameSource::Images(frames),
        labels: (split == Split::Test).then_some(labels),
    }
}

/// Generates the train split (normal motion only) and the labeled test split.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut intervals = Vec::new();
    let train = (0..spec.train_videos).map(|i| generate_video(spec, Split::Train, i, &mut intervals)).collect();
    let test = (0..spec.test_videos).map(|i| generate_video(spec, Split::Test, i, &mut intervals)).collect();
    Ok(SyntheticDataset {
        train: DatasetIndex { split: Split::Train, videos: train },
        test: DatasetIndex { split: Split::Test, videos: test },
        intervals,
    })
}
