//! Skeleton sequences: synthetic generation, JSON-lines I/O and preprocessing.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Motion families available to the generator.
pub const MAX_SYNTHETIC_CLASSES: usize = 8;

/// One labelled skeleton sequence; `frames[t][j]` is joint `j` at frame `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub label: usize,
    pub frames: Vec<Vec<[f64; 3]>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// `[T, V, 3]`
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let flat: Vec<f64> = self.frames.iter().flatten().flatten().copied().collect();
        Tensor::<f64>::from_f64([self.len(), self.joints(), 3], &flat)
            .expect("sequence shape checked on construction")
            .cast()
    }

    pub fn from_tensor<T: Real>(id: impl Into<String>, label: usize, x: &Tensor<T>) -> Result<Self> {
        let s = x.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::dim("sequence", s, &[3]));
        }
        let data = x.to_f64_vec();
        let frames = data
            .chunks(s[1] * 3)
            .map(|f| f.chunks(3).map(|p| [p[0], p[1], p[2]]).collect())
            .collect();
        Ok(Sequence {
            id: id.into(),
            label,
            frames,
        })
    }

    /// Structural checks: nonempty, equal joint counts, finite coordinates.
    pub fn validate(&self) -> Result<()> {
        let schema = |msg: String| Error::Schema {
            id: self.id.clone(),
            msg,
        };
        if self.frames.is_empty() {
            return Err(schema("sequence has no frames".into()));
        }
        let v = self.joints();
        if v == 0 {
            return Err(schema("frame 0 has no joints".into()));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != v {
                return Err(schema(format!("frame {t} has {} joints, frame 0 has {v}", f.len())));
            }
            if f.iter().flatten().any(|c| !c.is_finite()) {
                return Err(schema(format!("frame {t} has a non-finite coordinate")));
            }
        }
        Ok(())
    }
}

/// Checks that every sequence has `joints` joints and `len` frames.
pub fn check_uniform(data: &[Sequence], joints: usize, len: Option<usize>) -> Result<()> {
    for s in data {
        s.validate()?;
        if s.joints() != joints {
            return Err(Error::Schema {
                id: s.id.clone(),
                msg: format!("{} joints, expected {joints}", s.joints()),
            });
        }
        if let Some(len) = len {
            if s.len() != len {
                return Err(Error::Schema {
                    id: s.id.clone(),
                    msg: format!("{} frames, expected {len}", s.len()),
                });
            }
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    label: usize,
    frames: Vec<Vec<Vec<f64>>>,
}

/// Parses one JSON record; `line` is 1-based and only used in errors.
pub fn parse_record(text: &str, line: usize) -> Result<Sequence> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })?;
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (t, f) in raw.frames.into_iter().enumerate() {
        let mut joints = Vec::with_capacity(f.len());
        for (j, p) in f.into_iter().enumerate() {
            let p: [f64; 3] = p.try_into().map_err(|p: Vec<f64>| Error::Schema {
                id: raw.id.clone(),
                msg: format!("frame {t} joint {j} has {} coordinates", p.len()),
            })?;
            joints.push(p);
        }
        frames.push(joints);
    }
    let seq = Sequence {
        id: raw.id,
        label: raw.label,
        frames,
    };
    seq.validate()?;
    Ok(seq)
}

/// Reads one record per nonblank line.
pub fn load_sequences(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_record(&line, i + 1)?);
    }
    Ok(out)
}

pub fn save_sequences(data: &[Sequence], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in data {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Frame-1 root position and scale. Depends only on the first frame, so it
/// can be applied to a stream as frames arrive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub root: [f64; 3],
    pub scale: f64,
}

impl Normalizer {
    pub fn from_first_frame(seq: &Sequence) -> Result<Self> {
        let first = seq
            .frames
            .first()
            .ok_or_else(|| Error::Preprocess(format!("sequence {:?} has no frames", seq.id)))?;
        let root = first[0];
        let reach = first
            .iter()
            .map(|p| ((p[0] - root[0]).powi(2) + (p[1] - root[1]).powi(2) + (p[2] - root[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        let scale = if reach < 1e-8 {
            if first.len() > 1 {
                return Err(Error::Preprocess(format!(
                    "sequence {:?}: all joints of frame 1 coincide",
                    seq.id
                )));
            }
            1.0
        } else {
            reach
        };
        Ok(Normalizer { root, scale })
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.root;
        [(p[0] - r[0]) / self.scale, (p[1] - r[1]) / self.scale, (p[2] - r[2]) / self.scale]
    }

    pub fn apply_frame(&self, frame: &[[f64; 3]]) -> Vec<[f64; 3]> {
        frame.iter().map(|&p| self.apply(p)).collect()
    }
}

/// Localize by the frame-1 root, scale by the frame-1 root-to-farthest-joint
/// distance, then resample linearly to `target_len` frames.
pub fn preprocess(seq: &Sequence, target_len: usize) -> Result<Sequence> {
    seq.validate()?;
    if seq.len() < 2 {
        return Err(Error::Preprocess(format!(
            "sequence {:?} has {} frame(s), need at least 2",
            seq.id,
            seq.len()
        )));
    }
    if target_len == 0 {
        return Err(Error::Preprocess("target length must be positive".into()));
    }
    let norm = Normalizer::from_first_frame(seq)?;
    let norm = |p: [f64; 3]| norm.apply(p);

    let len = seq.len();
    let frames = (0..target_len)
        .map(|k| {
            let u = if target_len == 1 {
                0.0
            } else {
                k as f64 * (len - 1) as f64 / (target_len - 1) as f64
            };
            let i = (u.floor() as usize).min(len - 1);
            let w = u - i as f64;
            let j = (i + 1).min(len - 1);
            seq.frames[i]
                .iter()
                .zip(&seq.frames[j])
                .map(|(&a, &b)| {
                    let (a, b) = (norm(a), norm(b));
                    if w == 0.0 {
                        a
                    } else {
                        [
                            a[0] + w * (b[0] - a[0]),
                            a[1] + w * (b[1] - a[1]),
                            a[2] + w * (b[2] - a[2]),
                        ]
                    }
                })
                .collect()
        })
        .collect();
    Ok(Sequence {
        id: seq.id.clone(),
        label: seq.label,
        frames,
    })
}

/// Parameters of the synthetic motion dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub joints: usize,
    pub frames: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            per_class: 32,
            joints: 6,
            frames: 16,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

/// Root path radius of the translating classes.
pub const CIRCLE_RADIUS: f64 = 1.0;

/// Fraction of the sequence over which the circle and spiral coincide.
pub const SHARED_PREFIX: f64 = 0.25;

struct Motion {
    family: usize,
    speed: f64,
    phase: f64,
    amplitude: f64,
    tilt: f64,
}

impl Motion {
    fn sample(label: usize, rng: &mut ChaCha8Rng) -> Self {
        Motion {
            family: label % 4,
            speed: if label < 4 { 1.0 } else { 2.0 },
            phase: rng.gen_range(-PI / 4.0..PI / 4.0),
            amplitude: rng.gen_range(0.27..0.33),
            tilt: rng.gen_range(-0.1..0.1),
        }
    }

    /// Limb direction of joint `j >= 1` in the rest pose.
    fn direction(&self, j: usize, joints: usize) -> [f64; 3] {
        let a = TAU * (j - 1) as f64 / (joints - 1) as f64 + self.tilt;
        let z: f64 = if j % 2 == 0 { 0.3 } else { -0.3 };
        let n = (1.0 + z * z).sqrt();
        [a.cos() / n, a.sin() / n, z / n]
    }

    /// Pose at normalized time `u` in `[0, 1]`.
    fn pose(&self, u: f64, joints: usize) -> Vec<[f64; 3]> {
        let angle = self.phase + TAU * 0.75 * self.speed * u;
        let circle = [CIRCLE_RADIUS * angle.cos(), CIRCLE_RADIUS * angle.sin(), 0.0];
        // 7/8 of a cycle so the last frame is not a zero crossing
        let osc = (TAU * 0.875 * self.speed * u).sin();
        let late = (u - SHARED_PREFIX).max(0.0);

        let (root, sway) = match self.family {
            0 => (circle, 0.0),
            1 | 2 => ([0.0; 3], 0.0),
            _ => {
                let grow = 1.0 + 1.5 * late;
                (
                    [circle[0] * grow, circle[1] * grow, 1.2 * late],
                    0.8 * late * (TAU * 2.0 * self.speed * u).sin(),
                )
            }
        };
        let mut pose = Vec::with_capacity(joints);
        pose.push(root);
        for j in 1..joints {
            let d = self.direction(j, joints);
            let length = match self.family {
                1 => 1.0 + self.amplitude * osc,
                2 => 1.0 + self.amplitude * osc * if j % 2 == 0 { 1.0 } else { -1.0 },
                _ => 1.0,
            };
            let (s, c) = sway.sin_cos();
            let d = [d[0] * c - d[1] * s, d[0] * s + d[1] * c, d[2]];
            pose.push([root[0] + length * d[0], root[1] + length * d[1], root[2] + length * d[2]]);
        }
        pose
    }
}

/// Deterministic synthetic dataset: `per_class` sequences of each class,
/// ordered by class. Classes 0 and 3 share their first quarter.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sequence>> {
    if spec.classes == 0 || spec.classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data defines 1..={MAX_SYNTHETIC_CLASSES} classes, got {}",
            spec.classes
        )));
    }
    if spec.joints < 2 || spec.frames == 0 {
        return Err(Error::Config("synthetic data needs at least 2 joints and 1 frame".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Config(format!("noise_std must be nonnegative, got {}", spec.noise_std)));
    }
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.classes * spec.per_class);
    for label in 0..spec.classes {
        for i in 0..spec.per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream((label * spec.per_class + i) as u64);
            let motion = Motion::sample(label, &mut rng);
            let frames = (0..spec.frames)
                .map(|t| {
                    let u = if spec.frames == 1 {
                        0.0
                    } else {
                        t as f64 / (spec.frames - 1) as f64
                    };
                    let mut pose = motion.pose(u, spec.joints);
                    if spec.noise_std > 0.0 {
                        for p in pose.iter_mut().flatten() {
                            *p += noise.sample(&mut rng);
                        }
                    }
                    pose
                })
                .collect();
            out.push(Sequence {
                id: format!("syn-{label}-{i}"),
                label,
                frames,
            });
        }
    }
    Ok(out)
}

/// Default synthetic split: 32 train sequences per class from seed 100 and
/// 50 test sequences per class from seed 999.
pub fn synthetic_split() -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    let train = generate_synthetic(&SyntheticSpec {
        per_class: 32,
        seed: 100,
        ..SyntheticSpec::default()
    })?;
    let test = generate_synthetic(&SyntheticSpec {
        per_class: 50,
        seed: 999,
        ..SyntheticSpec::default()
    })?;
    Ok((train, test))
}

/// Stacks preprocessed sequences into tensors plus labels.
pub fn to_tensors<T: Real>(data: &[Sequence]) -> (Vec<Tensor<T>>, Vec<usize>) {
    (data.iter().map(Sequence::to_tensor).collect(), data.iter().map(|s| s.label).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(classes: usize) -> Vec<Sequence> {
        generate_synthetic(&SyntheticSpec {
            classes,
            per_class: 3,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(clean(4), clean(4));
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn circle_root_has_constant_radius() {
        for s in clean(1) {
            for f in &s.frames {
                let r2 = f[0][0] * f[0][0] + f[0][1] * f[0][1];
                assert!((r2 - CIRCLE_RADIUS * CIRCLE_RADIUS).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn circle_and_spiral_share_prefix() {
        let spec = SyntheticSpec {
            per_class: 1,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let mut spiral = Motion::sample(3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut circle = Motion::sample(0, &mut ChaCha8Rng::seed_from_u64(0));
        spiral.phase = 0.0;
        circle.phase = 0.0;
        spiral.tilt = 0.0;
        circle.tilt = 0.0;
        for k in 0..=10 {
            let u = SHARED_PREFIX * k as f64 / 10.0;
            assert_eq!(spiral.pose(u, 6), circle.pose(u, 6));
        }
        assert_ne!(spiral.pose(0.9, 6), circle.pose(0.9, 6));
        assert_eq!(data.len(), 4);
    }

    #[test]
    fn too_many_classes_is_config_error() {
        let spec = SyntheticSpec {
            classes: 9,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn parse_errors_carry_line_and_id() {
        assert!(matches!(parse_record("{oops", 7), Err(Error::Parse { line: 7, .. })));
        let ragged = r#"{"id":"r1","label":0,"frames":[[[0,0,0],[1,0,0]],[[0,0,0]]]}"#;
        match parse_record(ragged, 1) {
            Err(Error::Schema { id, .. }) => assert_eq!(id, "r1"),
            other => panic!("unexpected {other:?}"),
        }
        let short = r#"{"id":"r2","label":0,"frames":[[[0,0]]]}"#;
        assert!(matches!(parse_record(short, 1), Err(Error::Schema { .. })));
    }

    #[test]
    fn preprocess_localizes_and_scales() {
        let seq = Sequence {
            id: "a".into(),
            label: 0,
            frames: vec![
                vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]],
                vec![[2.0, 1.0, 1.0], [4.0, 1.0, 1.0]],
            ],
        };
        let out = preprocess(&seq, 3).unwrap();
        assert_eq!(out.frames[0][0], [0.0, 0.0, 0.0]);
        assert_eq!(out.frames[0][1], [1.0, 0.0, 0.0]);
        assert_eq!(out.frames[1][0], [0.25, 0.0, 0.0]);
        assert_eq!(out.frames[2][1], [1.5, 0.0, 0.0]);
    }

    #[test]
    fn preprocess_rejects_degenerate_input() {
        let one = Sequence {
            id: "a".into(),
            label: 0,
            frames: vec![vec![[0.0; 3]; 2]],
        };
        assert!(matches!(preprocess(&one, 4), Err(Error::Preprocess(_))));
        let flat = Sequence {
            id: "b".into(),
            label: 0,
            frames: vec![vec![[1.0; 3]; 3]; 2],
        };
        assert!(matches!(preprocess(&flat, 4), Err(Error::Preprocess(_))));
    }

    #[test]
    fn tensor_round_trip() {
        let s = &clean(2)[4];
        let x = s.to_tensor::<f64>();
        assert_eq!(x.shape(), &[16, 6, 3]);
        assert_eq!(&Sequence::from_tensor(s.id.clone(), s.label, &x).unwrap(), s);
    }
}
