//! Scenario files: frames, pose history, optional ground truth and prompts.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::trajectory::{PoseHistory, Trajectory, TrajectoryError};
use crate::model::{FrameSet, CAMERAS, TIMESTEPS};

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a driving assistant that generates safe and accurate actions.";
pub const DEFAULT_USER_PROMPT: &str =
    "Output the chain-of-thought reasoning of the driving process, then output the future trajectory.";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid frames: {0}")]
    Frames(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    pub system: String,
    pub user: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM_PROMPT.to_string(),
            user: DEFAULT_USER_PROMPT.to_string(),
        }
    }
}

/// Deterministic synthetic frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Procedural {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Procedural {
    /// Smooth per-camera gradients drifting over time, plus seeded noise.
    pub fn render(&self) -> FrameSet {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.height, self.width);
        let mut data = Vec::with_capacity(FrameSet::FRAMES * h * w * 3);
        for cam in 0..CAMERAS {
            for t in 0..TIMESTEPS {
                let shift = (cam * TIMESTEPS + t) as f32 * 0.05;
                for y in 0..h {
                    for x in 0..w {
                        let u = x as f32 / w.max(1) as f32;
                        let v = y as f32 / h.max(1) as f32;
                        let noise: f32 = rng.gen_range(-0.05..0.05);
                        data.push((u + shift).fract() + noise);
                        data.push((v + 0.5 * shift).fract() + noise);
                        data.push(0.5 * (u + v) + noise);
                    }
                }
            }
        }
        FrameSet {
            height: h,
            width: w,
            data,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FrameSource {
    File { path: PathBuf, shape: Vec<usize> },
    Procedural { procedural: Procedural },
    Inline(Value),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    frames: FrameSource,
    past_poses: PoseHistory,
    #[serde(default)]
    gt_future: Option<Trajectory>,
    #[serde(default)]
    prompts: Prompts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub frames: FrameSet,
    pub past_poses: PoseHistory,
    pub gt_future: Option<Trajectory>,
    pub prompts: Prompts,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|source| ScenarioError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            frames: resolve_frames(file.frames, base)?,
            past_poses: file.past_poses,
            gt_future: file.gt_future,
            prompts: file.prompts,
        })
    }

    /// Procedural scenario with a straight, constant-speed history.
    pub fn synthetic(height: usize, width: usize, seed: u64, speed: f64) -> Self {
        Self {
            frames: Procedural { height, width, seed }.render(),
            past_poses: PoseHistory::straight(speed),
            gt_future: None,
            prompts: Prompts::default(),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<(usize, usize), ScenarioError> {
    match shape {
        [CAMERAS, TIMESTEPS, h, w, 3] => Ok((*h, *w)),
        _ => Err(ScenarioError::Frames(format!(
            "shape {shape:?} is not [{CAMERAS}, {TIMESTEPS}, H, W, 3]"
        ))),
    }
}

fn resolve_frames(src: FrameSource, base: &Path) -> Result<FrameSet, ScenarioError> {
    match src {
        FrameSource::Procedural { procedural } => Ok(procedural.render()),
        FrameSource::File { path, shape } => {
            let (h, w) = check_shape(&shape)?;
            let full = base.join(&path);
            let bytes = fs::read(&full).map_err(|source| ScenarioError::Io {
                path: full.clone(),
                source,
            })?;
            let expected = shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(ScenarioError::Frames(format!(
                    "{} holds {} bytes, shape {shape:?} needs {expected}",
                    full.display(),
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(FrameSet {
                height: h,
                width: w,
                data,
            })
        }
        FrameSource::Inline(value) => {
            let mut shape = Vec::new();
            let mut data = Vec::new();
            flatten_nested(&value, 0, &mut shape, &mut data)?;
            let (h, w) = check_shape(&shape)?;
            Ok(FrameSet {
                height: h,
                width: w,
                data,
            })
        }
    }
}

/// Flattens a rectangular nested array, recording its shape.
fn flatten_nested(v: &Value, depth: usize, shape: &mut Vec<usize>, out: &mut Vec<f32>) -> Result<(), ScenarioError> {
    match v {
        Value::Array(items) => {
            match shape.get(depth) {
                None => shape.push(items.len()),
                Some(&n) if n != items.len() => {
                    return Err(ScenarioError::Frames(format!(
                        "ragged array at depth {depth}: {} vs {n}",
                        items.len()
                    )))
                }
                Some(_) => {}
            }
            for item in items {
                flatten_nested(item, depth + 1, shape, out)?;
            }
            Ok(())
        }
        Value::Number(n) if depth == shape.len() => {
            out.push(n.as_f64().unwrap_or(f64::NAN) as f32);
            Ok(())
        }
        other => Err(ScenarioError::Frames(format!(
            "unexpected value {other} at depth {depth}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn history_json() -> String {
        serde_json::to_string(&PoseHistory::straight(2.0)).unwrap()
    }

    #[test]
    fn procedural_is_deterministic() {
        let p = Procedural {
            height: 28,
            width: 28,
            seed: 3,
        };
        assert_eq!(p.render(), p.render());
        assert_ne!(p.render(), Procedural { seed: 4, ..p }.render());
    }

    #[test]
    fn loads_all_frame_sources() {
        let dir = tempfile::tempdir().unwrap();
        let procedural = write(
            dir.path(),
            "a.json",
            &format!(
                r#"{{"frames": {{"procedural": {{"height": 14, "width": 14, "seed": 1}}}}, "past_poses": {}}}"#,
                history_json()
            ),
        );
        let s = Scenario::load(&procedural).unwrap();
        assert_eq!(s.frames.data.len(), 16 * 14 * 14 * 3);
        assert_eq!(s.prompts, Prompts::default());

        let raw: Vec<u8> = s.frames.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("frames.bin"), raw).unwrap();
        let file = write(
            dir.path(),
            "b.json",
            &format!(
                r#"{{"frames": {{"path": "frames.bin", "shape": [4, 4, 14, 14, 3]}}, "past_poses": {}}}"#,
                history_json()
            ),
        );
        assert_eq!(Scenario::load(&file).unwrap().frames, s.frames);

        let nested: Vec<Vec<Vec<Vec<Vec<f32>>>>> = (0..4)
            .map(|c| {
                (0..4)
                    .map(|t| {
                        let off = ((c * 4 + t) * 14 * 14 * 3) as usize;
                        (0..14)
                            .map(|y| {
                                (0..14)
                                    .map(|x| s.frames.data[off + (y * 14 + x) * 3..][..3].to_vec())
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let inline = write(
            dir.path(),
            "c.json",
            &format!(
                r#"{{"frames": {}, "past_poses": {}, "prompts": {{"system": "drive", "user": "go"}}}}"#,
                serde_json::to_string(&nested).unwrap(),
                history_json()
            ),
        );
        let c = Scenario::load(&inline).unwrap();
        assert_eq!(c.frames, s.frames);
        assert_eq!(c.prompts.user, "go");
    }

    #[test]
    fn reports_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Scenario::load(&dir.path().join("missing.json")),
            Err(ScenarioError::Io { .. })
        ));
        let bad_shape = write(
            dir.path(),
            "d.json",
            &format!(r#"{{"frames": [[1, 2], [3, 4]], "past_poses": {}}}"#, history_json()),
        );
        assert!(matches!(Scenario::load(&bad_shape), Err(ScenarioError::Frames(_))));
        let bad_history = write(
            dir.path(),
            "e.json",
            r#"{"frames": {"procedural": {"height": 14, "width": 14, "seed": 1}}, "past_poses": [[0, 0, 0]]}"#,
        );
        assert!(matches!(Scenario::load(&bad_history), Err(ScenarioError::Json { .. })));
    }
}
