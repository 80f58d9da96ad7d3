use crate::pipeline::{Pose, Trajectory};

use super::EvalError;

/// Mean Euclidean (x, y) distance between matching poses; yaw is ignored.
pub fn ade(a: &[Pose], b: &[Pose]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p.x - q.x).hypot(p.y - q.y)).sum();
    Ok(sum / a.len() as f64)
}

/// Smallest ADE between any sample and the ground truth.
pub fn min_ade(samples: &[Trajectory], gt: &Trajectory) -> Result<f64, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::TooFewSamples { need: 1, got: 0 });
    }
    samples
        .iter()
        .map(|s| ade(s.poses(), gt.poses()))
        .try_fold(f64::INFINITY, |best, v| v.map(|v| best.min(v)))
}

/// Mean ADE over unordered pairs of samples.
pub fn diversity(samples: &[Trajectory]) -> Result<f64, EvalError> {
    let k = samples.len();
    if k < 2 {
        return Err(EvalError::TooFewSamples { need: 2, got: k });
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += ade(samples[i].poses(), samples[j].poses())?;
        }
    }
    Ok(total / (k * (k - 1) / 2) as f64)
}
