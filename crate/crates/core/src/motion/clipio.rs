//! Plain-text clip format.
//!
//! Line-oriented, versioned, and bit-exact: floats are written with Rust's
//! shortest round-trip formatting, so `save -> load` reproduces every f64
//! bit pattern. Layout:
//!
//! ```text
//! locolab-clip
//! schema_version 1
//! frame_rate 50
//! gait trot
//! source synthetic
//! leg_length 0.4
//! n_frames 120
//! frame <base_height> <base_pitch> <base_forward_vel> <q0..q7> <fx0 fz0 .. fx3 fz3>
//! ...
//! ```

use super::{ClipSource, GaitLabel, MotionClip, MotionError, ReferencePose};
use crate::sim::{N_JOINTS, N_LEGS};
use std::fmt::Write as _;
use std::path::Path;

pub const CLIP_SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "locolab-clip";
/// Values per `frame` line: 3 base fields + joints + foot coordinates.
const FRAME_VALUES: usize = 3 + N_JOINTS + 2 * N_LEGS;

/// Serialise a clip to the text format.
pub fn clip_to_string(clip: &MotionClip) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    let _ = writeln!(out, "schema_version {CLIP_SCHEMA_VERSION}");
    let _ = writeln!(out, "frame_rate {}", clip.frame_rate);
    let _ = writeln!(out, "gait {}", clip.gait_label.name());
    let _ = writeln!(
        out,
        "source {}",
        match clip.source {
            ClipSource::Synthetic => "synthetic",
            ClipSource::Imported => "imported",
        }
    );
    let _ = writeln!(out, "leg_length {}", clip.leg_length);
    let _ = writeln!(out, "n_frames {}", clip.frames.len());
    for pose in &clip.frames {
        out.push_str("frame");
        let _ = write!(out, " {}", pose.base_height);
        let _ = write!(out, " {}", pose.base_pitch);
        let _ = write!(out, " {}", pose.base_forward_vel);
        for q in pose.joint_angles {
            let _ = write!(out, " {q}");
        }
        for foot in pose.foot_positions_body {
            let _ = write!(out, " {} {}", foot[0], foot[1]);
        }
        out.push('\n');
    }
    out
}

/// Parse the text format produced by [`clip_to_string`].
pub fn clip_from_string(text: &str) -> Result<MotionClip, MotionError> {
    let mut lines = text.lines().enumerate();
    let parse_err = |line: usize, msg: String| MotionError::ParseError { line: line + 1, msg };

    let (n, magic) = lines
        .next()
        .ok_or_else(|| parse_err(0, "empty file".into()))?;
    if magic.trim() != MAGIC {
        return Err(parse_err(n, format!("expected '{MAGIC}' header")));
    }

    let mut field = |name: &str| -> Result<String, MotionError> {
        let (n, line) = lines
            .next()
            .ok_or_else(|| MotionError::ParseError {
                line: 0,
                msg: format!("missing '{name}' field"),
            })?;
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next()) {
            (Some(key), Some(value)) if key == name => Ok(value.to_string()),
            _ => Err(parse_err(n, format!("expected '{name} <value>'"))),
        }
    };

    let version: u32 = field("schema_version")?
        .parse()
        .map_err(|e| parse_err(1, format!("bad schema_version: {e}")))?;
    if version != CLIP_SCHEMA_VERSION {
        return Err(MotionError::SchemaVersionMismatch {
            found: version,
            expected: CLIP_SCHEMA_VERSION,
        });
    }
    let frame_rate: f64 = field("frame_rate")?
        .parse()
        .map_err(|e| parse_err(2, format!("bad frame_rate: {e}")))?;
    let gait: GaitLabel = field("gait")?
        .parse()
        .map_err(|e| parse_err(3, format!("bad gait: {e}")))?;
    let source = match field("source")?.as_str() {
        "synthetic" => ClipSource::Synthetic,
        "imported" => ClipSource::Imported,
        other => return Err(parse_err(4, format!("unknown source '{other}'"))),
    };
    let leg_length: f64 = field("leg_length")?
        .parse()
        .map_err(|e| parse_err(5, format!("bad leg_length: {e}")))?;
    let n_frames: usize = field("n_frames")?
        .parse()
        .map_err(|e| parse_err(6, format!("bad n_frames: {e}")))?;

    let mut frames = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        let (n, line) = lines.next().ok_or_else(|| MotionError::ParseError {
            line: 0,
            msg: format!("truncated file: expected {n_frames} frames, got {}", frames.len()),
        })?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some("frame") {
            return Err(parse_err(n, "expected 'frame' line".into()));
        }
        let values: Vec<f64> = parts
            .map(|p| p.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| parse_err(n, format!("bad frame value: {e}")))?;
        if values.len() != FRAME_VALUES {
            return Err(parse_err(
                n,
                format!("frame line has {} values, expected {FRAME_VALUES}", values.len()),
            ));
        }
        let mut joint_angles = [0.0; N_JOINTS];
        joint_angles.copy_from_slice(&values[3..3 + N_JOINTS]);
        let mut feet = [[0.0; 2]; N_LEGS];
        for leg in 0..N_LEGS {
            feet[leg] = [values[3 + N_JOINTS + 2 * leg], values[3 + N_JOINTS + 2 * leg + 1]];
        }
        frames.push(ReferencePose {
            base_height: values[0],
            base_pitch: values[1],
            base_forward_vel: values[2],
            joint_angles,
            foot_positions_body: feet,
        });
    }
    Ok(MotionClip {
        frame_rate,
        frames,
        gait_label: gait,
        source,
        leg_length,
    })
}

pub fn save_clip(clip: &MotionClip, path: &Path) -> Result<(), MotionError> {
    std::fs::write(path, clip_to_string(clip))
        .map_err(|e| MotionError::Io(format!("{}: {e}", path.display())))
}

pub fn load_clip(path: &Path) -> Result<MotionClip, MotionError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| MotionError::Io(format!("{}: {e}", path.display())))?;
    clip_from_string(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{synth_gait, GaitParams};
    use crate::sim::RobotMorphology;

    fn sample_clip() -> MotionClip {
        synth_gait(&GaitParams::trot(1.3), &RobotMorphology::default(), 25, 50.0).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let clip = sample_clip();
        let text = clip_to_string(&clip);
        let back = clip_from_string(&text).unwrap();
        assert_eq!(clip, back);
        // Serialisation itself is deterministic.
        assert_eq!(text, clip_to_string(&back));
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = clip_to_string(&sample_clip());
        let cut: String = text.lines().take(10).collect::<Vec<_>>().join("\n");
        assert!(matches!(
            clip_from_string(&cut),
            Err(MotionError::ParseError { .. })
        ));
    }

    #[test]
    fn unknown_schema_version_is_rejected() {
        let text = clip_to_string(&sample_clip()).replace("schema_version 1", "schema_version 99");
        assert_eq!(
            clip_from_string(&text).unwrap_err(),
            MotionError::SchemaVersionMismatch {
                found: 99,
                expected: CLIP_SCHEMA_VERSION
            }
        );
    }

    #[test]
    fn corrupt_value_reports_line() {
        let text = clip_to_string(&sample_clip()).replace("frame 0.27", "frame zzz");
        match clip_from_string(&text) {
            Err(MotionError::ParseError { line, .. }) => assert!(line >= 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.txt");
        let clip = sample_clip();
        save_clip(&clip, &path).unwrap();
        assert_eq!(load_clip(&path).unwrap(), clip);
    }
}
