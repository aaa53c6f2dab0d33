//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_faithful"));
    c.env_remove("FAITHFUL_SEED").env_remove("RUST_LOG");
    c
}

pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// A small model that trains in well under a second.
pub fn small_config(output_dir: &str, steps: usize) -> String {
    json!({
        "output_dir": output_dir,
        "train": {"steps": steps, "n_pairs_per_batch": 8, "L": 4, "F": 6, "D": 12, "C": 16, "eval_identities": 8},
        "analysis": {
            "activation_identities": 6, "activation_poses": 6,
            "ablation": {"seeds": [0, 1], "num_atoms": [16]}
        }
    })
    .to_string()
}

/// How a fixture track is built and what the curator must decide.
pub struct FixtureTrack {
    pub id: &'static str,
    /// Pitch, yaw and roll ranges; their sum is the track's Var.
    pub ranges: [f64; 3],
    pub kind: Kind,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Kind {
    Single,
    /// Like `Single` but with face-less frames interleaved.
    Gaps,
    /// One frame sees two faces.
    Multi,
    /// No frame sees a face.
    NoFace,
    /// No frames at all.
    Empty,
    /// A single faced frame.
    OneFrame,
}

impl FixtureTrack {
    pub fn var(&self) -> f64 {
        self.ranges.iter().sum()
    }

    pub fn expected_reason(&self) -> &'static str {
        match self.kind {
            Kind::Multi => "multi_face",
            Kind::NoFace | Kind::Empty => "no_face",
            _ if self.var() > 120.0 => "ok",
            _ => "low_variation",
        }
    }
}

pub const FIXTURE: [FixtureTrack; 20] = [
    FixtureTrack { id: "v00", ranges: [0.0, 0.0, 0.0], kind: Kind::Single },
    FixtureTrack { id: "v01", ranges: [20.0, 30.0, 10.0], kind: Kind::Single },
    FixtureTrack { id: "v02", ranges: [30.0, 50.0, 10.0], kind: Kind::Single },
    FixtureTrack { id: "v03", ranges: [39.0, 60.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v04", ranges: [40.0, 60.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v05", ranges: [41.0, 60.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v06", ranges: [40.0, 70.0, 15.0], kind: Kind::Single },
    FixtureTrack { id: "v07", ranges: [50.0, 80.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v08", ranges: [39.5, 60.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v09", ranges: [40.5, 60.0, 20.0], kind: Kind::Single },
    FixtureTrack { id: "v10", ranges: [60.0, 110.0, 30.0], kind: Kind::Single },
    FixtureTrack { id: "v11", ranges: [80.0, 130.0, 30.0], kind: Kind::Single },
    FixtureTrack { id: "v12", ranges: [50.0, 100.0, 30.0], kind: Kind::Gaps },
    FixtureTrack { id: "v13", ranges: [0.0, 0.0, 0.0], kind: Kind::NoFace },
    FixtureTrack { id: "v14", ranges: [0.0, 0.0, 0.0], kind: Kind::Empty },
    FixtureTrack { id: "v15", ranges: [60.0, 110.0, 30.0], kind: Kind::Multi },
    FixtureTrack { id: "v16", ranges: [10.0, 30.0, 10.0], kind: Kind::Multi },
    FixtureTrack { id: "v17", ranges: [0.0, 0.0, 0.0], kind: Kind::OneFrame },
    FixtureTrack { id: "v18", ranges: [100.0, 170.0, 30.0], kind: Kind::Single },
    FixtureTrack { id: "v19", ranges: [121.0, 0.0, 0.0], kind: Kind::Gaps },
];

/// One frame in the input format.
fn frame(i: u64, faces: u32, euler: Option<[f64; 3]>) -> Value {
    match euler {
        Some(e) => json!({"i": i, "faces": faces, "bbox": [300.0, 120.0, 420.0, 270.0], "euler": e}),
        None => json!({"i": i, "faces": faces}),
    }
}

/// Poses sweep each axis from `-range/2` to `+range/2` at different frames,
/// so every axis range is hit exactly and the minima/maxima fall on
/// different frames.
fn track_json(t: &FixtureTrack) -> Value {
    let [p, y, r] = t.ranges;
    let poses = [[-p / 2.0, 0.0, r / 2.0], [p / 2.0, -y / 2.0, 0.0], [0.0, y / 2.0, -r / 2.0], [p / 4.0, y / 4.0, 0.0]];
    let frames: Vec<Value> = match t.kind {
        Kind::Single => poses.iter().enumerate().map(|(i, e)| frame(i as u64 * 5, 1, Some(*e))).collect(),
        Kind::Gaps => poses
            .iter()
            .enumerate()
            .flat_map(|(i, e)| [frame(i as u64 * 10, 1, Some(*e)), frame(i as u64 * 10 + 3, 0, None)])
            .collect(),
        Kind::Multi => poses
            .iter()
            .enumerate()
            .map(|(i, e)| frame(i as u64, if i == 2 { 2 } else { 1 }, Some(*e)))
            .collect(),
        Kind::NoFace => (0..4).map(|i| frame(i, 0, None)).collect(),
        Kind::Empty => Vec::new(),
        Kind::OneFrame => vec![frame(0, 1, Some([5.0, -10.0, 2.0]))],
    };
    json!({"video_id": t.id, "width": 832, "height": 480, "frames": frames})
}

pub fn fixture_jsonl() -> String {
    FIXTURE.iter().map(|t| track_json(t).to_string() + "\n").collect()
}

/// Var by brute force over the raw JSON: per axis, the spread of every
/// `euler` entry present.
pub fn scan_var(track: &Value) -> Option<f64> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut seen = false;
    for f in track["frames"].as_array()? {
        if let Some(e) = f.get("euler").and_then(Value::as_array) {
            seen = true;
            for k in 0..3 {
                let v = e[k].as_f64()?;
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
    }
    seen.then(|| (0..3).map(|k| hi[k] - lo[k]).sum())
}
