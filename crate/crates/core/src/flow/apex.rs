use super::GrayFrame;
use crate::error::{Error, Result};

/// Mean absolute intensity difference between each frame and frame 0.
pub fn onset_differences(frames: &[GrayFrame]) -> Result<Vec<f64>> {
    let Some(onset) = frames.first() else {
        return Err(Error::Data("apex spotting needs at least 2 frames, got 0".into()));
    };
    let mut out = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        if frame.dims() != onset.dims() {
            return Err(Error::Data(format!(
                "frame {t} is {:?}, onset frame is {:?}",
                frame.dims(),
                onset.dims()
            )));
        }
        let total: f64 = frame
            .pixels()
            .iter()
            .zip(onset.pixels())
            .map(|(&a, &b)| f64::from((a - b).abs()))
            .sum();
        out.push(total / onset.pixels().len() as f64);
    }
    Ok(out)
}

/// Index of the frame that differs most from the onset frame.
///
/// Only `t >= 1` is considered; ties resolve to the earliest index.
pub fn spot_apex(frames: &[GrayFrame]) -> Result<usize> {
    if frames.len() < 2 {
        return Err(Error::Data(format!(
            "apex spotting needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    let diffs = onset_differences(frames)?;
    let mut best = 1;
    for t in 2..diffs.len() {
        if diffs[t] > diffs[best] {
            best = t;
        }
    }
    Ok(best)
}
