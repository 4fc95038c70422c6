//! Score tables and raw array dumps.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::backbone::Predictor;
use crate::datapipe::{make_windows, stack_windows, Video};
use crate::error::{Error, Result};
use crate::scoring::{error_map, hybrid_error, Horizon, ScoreSeries};
use crate::tensor::Tensor;

#[derive(Serialize)]
struct ScoreRow {
    frame_index: usize,
    raw_psnr: f64,
    normalized: f64,
    anomaly_score: f64,
    label: Option<u8>,
}

/// One row per frame: `frame_index,raw_psnr,normalized,anomaly_score,label`.
pub fn write_series_csv(path: &Path, s: &ScoreSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..s.len() {
        w.serialize(ScoreRow {
            frame_index: i,
            raw_psnr: s.raw_psnr[i],
            normalized: s.normalized[i],
            anomaly_score: s.anomaly[i],
            label: s.labels.as_ref().map(|l| l[i] as u8),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Encodes a little-endian `f32` array in NumPy `.npy` format (version 1.0).
pub fn npy_bytes(shape: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let n: usize = shape.iter().product();
    if n != data.len() {
        return Err(Error::Shape(format!("npy shape {shape:?} holds {n} values, got {}", data.len())));
    }
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // magic (6) + version (2) + length (2) + header + newline, padded to 64
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + 4 * n);
    out.extend_from_slice(b"\x93NUMPY\x01\x00");
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let bytes = npy_bytes(shape, data)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    write_npy(path, t.shape(), t.data())
}

/// Dumps attention maps and error maps for selected target frames of one
/// video into `dir`. `frames` are indices of the immediate target frame.
/// Returns the files written.
pub fn dump_maps(
    model: &Predictor,
    video: &Video,
    frames: &[usize],
    lambda: f64,
    dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    let c = model.config();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let windows = make_windows(video, c.t, c.sigma, 1)?;
    let mut written = Vec::new();
    for &f in frames {
        let Some(w) = windows.iter().find(|w| w.immediate_index() == f) else {
            return Err(Error::Data(format!(
                "frame {f} of video `{}` has no prediction window (scored frames start at {})",
                video.id,
                c.t
            )));
        };
        let (pair, maps) = model.predict_with_attention(stack_windows(&[w])?.inputs)?;
        let stem = format!("{}_f{f:05}", video.id);
        let mut put = |name: String, t: &Tensor<f32>| -> Result<()> {
            let p = dir.join(name);
            write_tensor(&p, t)?;
            written.push(p);
            Ok(())
        };
        for m in &maps {
            put(format!("{stem}_skip{}_channel.npy", m.level), &m.channel)?;
            put(format!("{stem}_skip{}_spatial.npy", m.level), &m.spatial)?;
            put(format!("{stem}_skip{}_gate.npy", m.level), &m.gate)?;
        }
        let ei = error_map(&pair.immediate, &w.target_immediate, Horizon::Immediate)?;
        let ef = error_map(&pair.forward, &w.target_forward, Horizon::Forward)?;
        let e = hybrid_error(&ei, &ef, lambda)?;
        for (tag, m) in [("immediate", &ei), ("forward", &ef), ("hybrid", &e)] {
            let t = Tensor::from_vec([m.height, m.width], m.values.iter().map(|&v| v as f32).collect())?;
            put(format!("{stem}_error_{tag}.npy"), &t)?;
        }
    }
    Ok(written)
}
