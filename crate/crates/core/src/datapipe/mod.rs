//! Frame loading, dataset indexing and sliding windows.
//!
//! On-disk layout:
//!
//! ```text
//! root/train/<video_id>/<frame>.png|jpg
//! root/test/<video_id>/<frame>.png|jpg
//! root/test/labels.txt      one 0/1 line per test frame, videos in sorted order
//! ```
//!
//! Frames are ordered lexicographically by file name. Preprocessing resizes
//! bilinearly with half-pixel centers (no corner alignment), maps
//! `[0, max_value]` to `[-1, 1]` and replicates grayscale to `c_in` channels.

pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use synth::{synth_generate, AnomalyInterval, AnomalyKind, SyntheticSpec};

/// A preprocessed `c_in x S x S` frame, shared between windows.
pub type Frame = Arc<Tensor<f32>>;

pub const LABELS_FILE: &str = "labels.txt";
const FRAME_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub enum FrameSource {
    Paths(Vec<PathBuf>),
    Images(Vec<Arc<DynamicImage>>),
}

impl FrameSource {
    pub fn len(&self) -> usize {
        match self {
            FrameSource::Paths(p) => p.len(),
            FrameSource::Images(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct VideoEntry {
    pub id: String,
    pub frames: FrameSource,
    /// Per-frame anomaly flags (test split only).
    pub labels: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

impl DatasetIndex {
    /// Checks the split/label invariants.
    pub fn validate(&self) -> Result<()> {
        for v in &self.videos {
            match (&v.labels, self.split) {
                (Some(_), Split::Train) => {
                    return Err(Error::Data(format!("train video `{}` carries labels", v.id)));
                }
                (Some(l), Split::Test) if l.len() != v.frames.len() => {
                    return Err(Error::Data(format!(
                        "video `{}` has {} frames but {} labels",
                        v.id,
                        v.frames.len(),
                        l.len()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frames.len()).sum()
    }

    /// Up to `limit` undecoded-size frames, videos in order.
    pub fn raw_frames(&self, limit: usize) -> Result<Vec<Arc<DynamicImage>>> {
        let mut out = Vec::with_capacity(limit.min(self.total_frames()));
        for v in &self.videos {
            let remaining = limit - out.len();
            match &v.frames {
                FrameSource::Paths(paths) => {
                    for p in paths.iter().take(remaining) {
                        let img = image::open(p).map_err(|e| Error::Decode { path: p.clone(), reason: e.to_string() })?;
                        out.push(Arc::new(img));
                    }
                }
                FrameSource::Images(imgs) => out.extend(imgs.iter().take(remaining).cloned()),
            }
            if out.len() == limit {
                break;
            }
        }
        Ok(out)
    }

    /// Decodes and preprocesses every video.
    pub fn load(&self, c_in: usize, size: usize) -> Result<Vec<Video>> {
        self.videos.iter().map(|v| v.load(c_in, size)).collect()
    }
}

/// A decoded video: preprocessed frames plus optional labels.
#[derive(Clone, Debug)]
pub struct Video {
    pub id: Arc<str>,
    pub frames: Vec<Frame>,
    pub labels: Option<Vec<bool>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

impl VideoEntry {
    pub fn load(&self, c_in: usize, size: usize) -> Result<Video> {
        let frames = match &self.frames {
            FrameSource::Paths(paths) => {
                paths.iter().map(|p| load_frame(p, c_in, size).map(Arc::new)).collect::<Result<Vec<_>>>()?
            }
            FrameSource::Images(imgs) => {
                imgs.iter().map(|i| preprocess_frame(i, c_in, size).map(Arc::new)).collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Video { id: self.id.as_str().into(), frames, labels: self.labels.clone() })
    }
}

/// Decodes an image file and preprocesses it.
pub fn load_frame(path: &Path, c_in: usize, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Decode { path: path.to_path_buf(), reason: "empty image".into() });
    }
    preprocess_frame(&img, c_in, size)
}

/// Resizes to `size x size` and maps intensities to `[-1, 1]`.
pub fn preprocess_frame(img: &DynamicImage, c_in: usize, size: usize) -> Result<Tensor<f32>> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 || size == 0 {
        return Err(Error::Data("cannot preprocess an empty image".into()));
    }
    let gray = !img.color().has_color();
    let planes: Vec<Vec<f32>> = if gray || c_in == 1 {
        vec![img.to_luma32f().into_raw()]
    } else if c_in == 3 {
        let rgb = img.to_rgb32f().into_raw();
        (0..3).map(|c| rgb.iter().skip(c).step_by(3).copied().collect()).collect()
    } else {
        return Err(Error::Config(format!("cannot map a color image to c_in = {c_in}")));
    };
    let mut data = Vec::with_capacity(c_in * size * size);
    let resized: Vec<Vec<f32>> = planes.iter().map(|p| resize_bilinear(p, h, w, size, size)).collect();
    for c in 0..c_in {
        let plane = &resized[c % resized.len()];
        data.extend(plane.iter().map(|&v| 2.0 * v - 1.0));
    }
    Tensor::from_vec([c_in, size, size], data)
}

/// Bilinear resize of one `h x w` plane with half-pixel centers.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    };
    let (ty, tx) = (taps(h, out_h), taps(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Indexes `root/<split>/<video>/*` and, for the test split, the labels file.
pub fn index_split(root: &Path, split: Split) -> Result<DatasetIndex> {
    let dir = root.join(split.dir_name());
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset split directory {} does not exist", dir.display())));
    }
    let mut video_dirs: Vec<PathBuf> = read_dir_sorted(&dir)?.into_iter().filter(|p| p.is_dir()).collect();
    video_dirs.sort();
    let mut videos = Vec::with_capacity(video_dirs.len());
    for vd in video_dirs {
        let frames: Vec<PathBuf> = read_dir_sorted(&vd)?
            .into_iter()
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| FRAME_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        if frames.is_empty() {
            return Err(Error::Data(format!("video directory {} holds no frames", vd.display())));
        }
        let id = vd.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        videos.push(VideoEntry { id, frames: FrameSource::Paths(frames), labels: None });
    }
    if videos.is_empty() {
        return Err(Error::Data(format!("no videos under {}", dir.display())));
    }
    let labels_path = dir.join(LABELS_FILE);
    if split == Split::Test && labels_path.is_file() {
        let text = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
        let flat = parse_labels(&text, &labels_path)?;
        let total: usize = videos.iter().map(|v| v.frames.len()).sum();
        if flat.len() != total {
            return Err(Error::Data(format!(
                "{} lists {} labels but the test videos hold {total} frames",
                labels_path.display(),
                flat.len()
            )));
        }
        let mut rest = &flat[..];
        for v in &mut videos {
            let (head, tail) = rest.split_at(v.frames.len());
            v.labels = Some(head.to_vec());
            rest = tail;
        }
    }
    let index = DatasetIndex { split, videos };
    index.validate()?;
    Ok(index)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn parse_labels(text: &str, path: &Path) -> Result<Vec<bool>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(Error::Data(format!("{} line {}: expected 0 or 1, got `{l}`", path.display(), i + 1))),
        })
        .collect()
}

/// Writes an in-memory split to the on-disk layout (PNG frames, labels file).
pub fn write_split(index: &DatasetIndex, root: &Path) -> Result<()> {
    let dir = root.join(index.split.dir_name());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = String::new();
    for v in &index.videos {
        let FrameSource::Images(imgs) = &v.frames else {
            return Err(Error::Data(format!("video `{}` is not held in memory", v.id)));
        };
        let vd = dir.join(&v.id);
        fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
        for (i, img) in imgs.iter().enumerate() {
            let path = vd.join(format!("{i:05}.png"));
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
        }
        if let Some(l) = &v.labels {
            for &b in l {
                labels.push_str(if b { "1\n" } else { "0\n" });
            }
        }
    }
    if index.split == Split::Test {
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// `t` consecutive input frames and the two prediction targets.
#[derive(Clone, Debug)]
pub struct FrameWindow {
    pub inputs: Vec<Frame>,
    pub target_immediate: Frame,
    pub target_forward: Frame,
    pub video_id: Arc<str>,
    /// 0-based index of the last input frame.
    pub base_index: usize,
}

impl FrameWindow {
    pub fn immediate_index(&self) -> usize {
        self.base_index + 1
    }
}

/// Number of windows [`make_windows`] yields for a video of length `len`.
pub fn window_count(len: usize, t: usize, sigma: usize, stride: usize) -> usize {
    if t == 0 || sigma == 0 || stride == 0 || len < t + sigma {
        return 0;
    }
    (len - t - sigma) / stride + 1
}

/// Sliding windows over `video`: inputs `b-t+1..=b`, targets `b+1` and
/// `b+sigma`, for `b = t-1, t-1+stride, ...` while `b + sigma < len`.
pub fn make_windows(video: &Video, t: usize, sigma: usize, stride: usize) -> Result<Vec<FrameWindow>> {
    if t < 1 || sigma < 1 || stride < 1 {
        return Err(Error::Config(format!("t, sigma and stride must be >= 1 (got {t}, {sigma}, {stride})")));
    }
    let n = window_count(video.len(), t, sigma, stride);
    Ok((0..n)
        .map(|i| {
            let b = t - 1 + i * stride;
            FrameWindow {
                inputs: video.frames[b + 1 - t..=b].to_vec(),
                target_immediate: video.frames[b + 1].clone(),
                target_forward: video.frames[b + sigma].clone(),
                video_id: video.id.clone(),
                base_index: b,
            }
        })
        .collect())
}

/// A stacked batch: inputs `B x (t*c) x S x S`, targets `B x c x S x S`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub target_immediate: Tensor<f32>,
    pub target_forward: Tensor<f32>,
}

/// Concatenates each window's frames along channels and stacks windows.
pub fn stack_windows(windows: &[&FrameWindow]) -> Result<Batch> {
    let Some(first) = windows.first() else {
        return Err(Error::Shape("cannot stack an empty batch".into()));
    };
    let frame_shape = first.target_immediate.shape().to_vec();
    let mut inputs = Vec::new();
    let mut ti = Vec::new();
    let mut tf = Vec::new();
    for w in windows {
        if w.inputs.len() != first.inputs.len() {
            return Err(Error::Shape("windows with different t in one batch".into()));
        }
        for f in w.inputs.iter().chain([&w.target_immediate, &w.target_forward]) {
            if f.shape() != frame_shape {
                return Err(Error::Shape(format!("frame {:?} vs {frame_shape:?}", f.shape())));
            }
        }
        for f in &w.inputs {
            inputs.extend_from_slice(f.data());
        }
        ti.extend_from_slice(w.target_immediate.data());
        tf.extend_from_slice(w.target_forward.data());
    }
    let (b, c, h, wd) = (windows.len(), frame_shape[0], frame_shape[1], frame_shape[2]);
    Ok(Batch {
        inputs: Tensor::from_vec([b, first.inputs.len() * c, h, wd], inputs)?,
        target_immediate: Tensor::from_vec([b, c, h, wd], ti)?,
        target_forward: Tensor::from_vec([b, c, h, wd], tf)?,
    })
}
