//! Trajectory dataset ingestion.
//!
//! Annotation files are plain text: one record per line, whitespace
//! separated, `frame ped_id` followed by two coordinates whose order is
//! selected by [`ColumnOrder`]. Lines starting with `#` are ignored.
//! Frames are remapped to consecutive step indices; the raw annotation
//! cadence is kept as `frame_stride` for write-back.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

/// Coordinate column order of the two real fields in a record line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnOrder {
    FramePedXY,
    FramePedYX,
}

impl std::str::FromStr for ColumnOrder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame_ped_x_y" => Ok(Self::FramePedXY),
            "frame_ped_y_x" => Ok(Self::FramePedYX),
            other => Err(Error::Config(format!("unknown column order `{other}`"))),
        }
    }
}

/// One annotated observation after frame remapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub step: usize,
    pub ped_id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min_x: f64,
    pub max_x: f64,
    pub min_y: f64,
    pub max_y: f64,
}

/// All observations of one scene plus its spatial bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryScene {
    pub scene_id: String,
    pub records: Vec<Record>,
    pub bounds: Bounds,
    /// Raw-frame gap between consecutive annotated steps (informational).
    pub frame_stride: u64,
    /// Number of annotated steps; records use steps `0..n_steps`.
    pub n_steps: usize,
}

impl TrajectoryScene {
    /// Build a scene from already-remapped records. Used by synthetic
    /// data paths; file parsing goes through [`parse_trajectory_file`].
    pub fn from_records(scene_id: &str, mut records: Vec<Record>, frame_stride: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyScene(scene_id.to_string()));
        }
        records.sort_by(|a, b| (a.step, a.ped_id).cmp(&(b.step, b.ped_id)));
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert((r.step, r.ped_id)) {
                return Err(Error::Parse {
                    path: scene_id.into(),
                    line: 0,
                    msg: format!("duplicate (frame, ped) pair ({}, {})", r.step, r.ped_id),
                });
            }
        }
        let bounds = compute_bounds(&records);
        let n_steps = records.iter().map(|r| r.step).max().unwrap() + 1;
        Ok(Self {
            scene_id: scene_id.to_string(),
            records,
            bounds,
            frame_stride,
            n_steps,
        })
    }

    /// Records of one step, in ped order.
    pub fn records_at(&self, step: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.step == step)
    }

    /// Serialize back to the annotation text format. Raw frame numbers
    /// are reconstructed as `step * frame_stride`.
    pub fn to_text(&self, order: ColumnOrder) -> String {
        let mut out = String::new();
        for r in &self.records {
            let (a, b) = match order {
                ColumnOrder::FramePedXY => (r.x, r.y),
                ColumnOrder::FramePedYX => (r.y, r.x),
            };
            out.push_str(&format!(
                "{} {} {} {}\n",
                r.step as u64 * self.frame_stride,
                r.ped_id,
                a,
                b
            ));
        }
        out
    }
}

fn compute_bounds(records: &[Record]) -> Bounds {
    let mut b = Bounds {
        min_x: f64::INFINITY,
        max_x: f64::NEG_INFINITY,
        min_y: f64::INFINITY,
        max_y: f64::NEG_INFINITY,
    };
    for r in records {
        b.min_x = b.min_x.min(r.x);
        b.max_x = b.max_x.max(r.x);
        b.min_y = b.min_y.min(r.y);
        b.max_y = b.max_y.max(r.y);
    }
    b
}

pub fn parse_trajectory_file(path: &Path, order: ColumnOrder) -> Result<TrajectoryScene> {
    let text = std::fs::read_to_string(path)?;
    let scene_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    parse_trajectory_text(&text, &scene_id, path, order)
}

pub fn parse_trajectory_text(
    text: &str,
    scene_id: &str,
    path: &Path,
    order: ColumnOrder,
) -> Result<TrajectoryScene> {
    let mut raw: Vec<(i64, u64, f64, f64)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let parse_err = |what: &str| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: format!("invalid {what}"),
        };
        let frame: i64 = fields[0].parse().map_err(|_| parse_err("frame index"))?;
        let ped: u64 = fields[1].parse().map_err(|_| parse_err("pedestrian id"))?;
        let a: f64 = fields[2].parse().map_err(|_| parse_err("coordinate"))?;
        let b: f64 = fields[3].parse().map_err(|_| parse_err("coordinate"))?;
        if !a.is_finite() || !b.is_finite() {
            return Err(parse_err("coordinate (non-finite)"));
        }
        if !seen.insert((frame, ped)) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("duplicate (frame, ped) pair ({frame}, {ped})"),
            });
        }
        let (x, y) = match order {
            ColumnOrder::FramePedXY => (a, b),
            ColumnOrder::FramePedYX => (b, a),
        };
        raw.push((frame, ped, x, y));
    }
    if raw.is_empty() {
        return Err(Error::EmptyScene(scene_id.to_string()));
    }

    // Remap distinct raw frames onto consecutive steps 0..T-1.
    let frames: BTreeSet<i64> = raw.iter().map(|r| r.0).collect();
    let step_of: BTreeMap<i64, usize> = frames.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let frame_stride = frames
        .iter()
        .zip(frames.iter().skip(1))
        .map(|(a, b)| (b - a) as u64)
        .min()
        .unwrap_or(1);

    let records = raw
        .into_iter()
        .map(|(frame, ped_id, x, y)| Record {
            step: step_of[&frame],
            ped_id,
            x,
            y,
        })
        .collect();
    TrajectoryScene::from_records(scene_id, records, frame_stride.max(1))
}

// ── windows ──────────────────────────────────────────────────────────

/// Window geometry: `t_obs` observed steps followed by `t_pred` targets.
#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            t_obs: 8,
            t_pred: 12,
            stride: 1,
        }
    }
}

/// One training sample: the pedestrians co-present across an entire
/// `t_obs + t_pred` span, with absolute tracks and per-step displacements.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    pub ped_ids: Vec<u64>,
    /// Absolute positions, indexed `[t][ped]`, `t_obs` steps.
    pub observed: Vec<Vec<[f64; 2]>>,
    /// Absolute positions, indexed `[t][ped]`, `t_pred` steps.
    pub target: Vec<Vec<[f64; 2]>>,
    /// Per-step displacements of `observed`; first step is zero.
    pub observed_rel: Vec<Vec<[f64; 2]>>,
    pub start_frame: usize,
}

impl SequenceWindow {
    pub fn n_peds(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn t_obs(&self) -> usize {
        self.observed.len()
    }

    pub fn t_pred(&self) -> usize {
        self.target.len()
    }

    pub fn last_observed(&self) -> &[[f64; 2]] {
        self.observed.last().expect("windows are never empty")
    }

    /// Target displacements: step 0 is relative to the last observed
    /// position, later steps to their predecessor.
    pub fn target_rel(&self) -> Vec<Vec<[f64; 2]>> {
        let mut rel = Vec::with_capacity(self.target.len());
        let mut prev: &[[f64; 2]] = self.last_observed();
        for row in &self.target {
            rel.push(
                row.iter()
                    .zip(prev)
                    .map(|(p, q)| [p[0] - q[0], p[1] - q[1]])
                    .collect(),
            );
            prev = row;
        }
        rel
    }
}

/// Recompute `observed_rel` from the absolute track.
pub fn to_relative(mut window: SequenceWindow) -> SequenceWindow {
    let mut rel = vec![vec![[0.0; 2]; window.n_peds()]; window.t_obs()];
    for t in 1..window.t_obs() {
        for n in 0..window.n_peds() {
            rel[t][n] = [
                window.observed[t][n][0] - window.observed[t - 1][n][0],
                window.observed[t][n][1] - window.observed[t - 1][n][1],
            ];
        }
    }
    window.observed_rel = rel;
    window
}

/// Cut a scene into sliding windows. A window exists at start `s` when at
/// least one pedestrian is annotated at every step of `s..s+t_obs+t_pred`;
/// pedestrians covering only part of the span are left out of that window.
pub fn make_windows(scene: &TrajectoryScene, config: &WindowConfig) -> Vec<SequenceWindow> {
    assert!(config.t_obs >= 1 && config.t_pred >= 1 && config.stride >= 1);
    let span = config.t_obs + config.t_pred;
    if scene.n_steps < span {
        return Vec::new();
    }

    // Per-pedestrian position lookup and sorted step lists.
    let mut steps_of: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut pos: BTreeMap<(u64, usize), [f64; 2]> = BTreeMap::new();
    for r in &scene.records {
        steps_of.entry(r.ped_id).or_default().push(r.step);
        pos.insert((r.ped_id, r.step), [r.x, r.y]);
    }

    let covers = |steps: &[usize], s: usize| -> bool {
        // Steps are sorted and unique; the span is covered iff the count
        // of entries inside [s, s+span) equals span.
        let lo = steps.partition_point(|&v| v < s);
        let hi = steps.partition_point(|&v| v < s + span);
        hi - lo == span
    };

    let mut windows = Vec::new();
    let mut start = 0;
    while start + span <= scene.n_steps {
        let ped_ids: Vec<u64> = steps_of
            .iter()
            .filter(|(_, steps)| covers(steps, start))
            .map(|(id, _)| *id)
            .collect();
        if !ped_ids.is_empty() {
            let grab = |t: usize| -> Vec<[f64; 2]> {
                ped_ids.iter().map(|id| pos[&(*id, t)]).collect()
            };
            let observed: Vec<Vec<[f64; 2]>> =
                (start..start + config.t_obs).map(grab).collect();
            let target: Vec<Vec<[f64; 2]>> = (start + config.t_obs..start + span)
                .map(grab)
                .collect();
            windows.push(to_relative(SequenceWindow {
                ped_ids,
                observed,
                target,
                observed_rel: Vec::new(),
                start_frame: start,
            }));
        }
        start += config.stride;
    }
    windows
}

// ── train/eval split ─────────────────────────────────────────────────

/// Tail-block split of one scene's windows: the last
/// `floor(n * eval_fraction)` windows (clamped to keep both sides
/// nonempty) become the evaluation block. A scene with a single window
/// contributes it to training.
pub fn split_scene_windows(
    windows: Vec<SequenceWindow>,
    eval_fraction: f64,
) -> (Vec<SequenceWindow>, Vec<SequenceWindow>) {
    let n = windows.len();
    if n < 2 {
        return (windows, Vec::new());
    }
    let n_eval = ((n as f64 * eval_fraction).floor() as usize).clamp(1, n - 1);
    let mut train = windows;
    let eval = train.split_off(n - n_eval);
    (train, eval)
}

/// Deterministic dataset split: per scene, windows are cut and the tail
/// block goes to evaluation.
pub fn split_train_eval(
    scenes: &[TrajectoryScene],
    config: &WindowConfig,
    eval_fraction: f64,
) -> Result<(Vec<SequenceWindow>, Vec<SequenceWindow>)> {
    if !(0.0 < eval_fraction && eval_fraction < 1.0) {
        return Err(Error::Config(format!(
            "eval_fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for scene in scenes {
        let (tr, ev) = split_scene_windows(make_windows(scene, config), eval_fraction);
        train.extend(tr);
        eval.extend(ev);
    }
    if train.is_empty() {
        return Err(Error::EmptySplit { side: "train" });
    }
    if eval.is_empty() {
        return Err(Error::EmptySplit { side: "eval" });
    }
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn parse(text: &str, order: ColumnOrder) -> Result<TrajectoryScene> {
        parse_trajectory_text(text, "test", &PathBuf::from("test.txt"), order)
    }

    #[test]
    fn parses_two_records_with_stride() {
        let scene = parse("0 1 2.0 3.0\n10 1 2.5 3.1\n", ColumnOrder::FramePedXY).unwrap();
        assert_eq!(scene.n_steps, 2);
        assert_eq!(scene.frame_stride, 10);
        assert_eq!(scene.records.len(), 2);
        assert_eq!(
            scene.bounds,
            Bounds {
                min_x: 2.0,
                max_x: 2.5,
                min_y: 3.0,
                max_y: 3.1
            }
        );
    }

    #[test]
    fn duplicate_frame_ped_is_parse_error() {
        let err = parse("0 1 2.0 3.0\n0 1 9.0 9.0\n", ColumnOrder::FramePedXY).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn column_order_swaps_coordinates() {
        let scene = parse("0 1 3.0 2.0\n", ColumnOrder::FramePedYX).unwrap();
        assert_eq!(scene.records[0].x, 2.0);
        assert_eq!(scene.records[0].y, 3.0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse("0 1 2.0 3.0\nnot a record\n", ColumnOrder::FramePedXY).unwrap_err();
        assert!(err.to_string().contains(":2:"));
    }

    #[test]
    fn empty_scene_rejected() {
        let err = parse("# only a comment\n", ColumnOrder::FramePedXY).unwrap_err();
        assert!(matches!(err, Error::EmptyScene(_)));
    }

    fn line_scene(steps: usize) -> TrajectoryScene {
        let records = (0..steps)
            .map(|t| Record {
                step: t,
                ped_id: 1,
                x: t as f64,
                y: 0.0,
            })
            .collect();
        TrajectoryScene::from_records("line", records, 1).unwrap()
    }

    #[test]
    fn sliding_window_count() {
        let windows = make_windows(&line_scene(25), &WindowConfig::default());
        assert_eq!(windows.len(), 25 - 20 + 1);
    }

    #[test]
    fn too_short_scene_has_no_windows() {
        assert!(make_windows(&line_scene(19), &WindowConfig::default()).is_empty());
    }

    #[test]
    fn copresent_pedestrians_share_window() {
        let mut records = Vec::new();
        for t in 0..20 {
            records.push(Record {
                step: t,
                ped_id: 1,
                x: t as f64,
                y: 0.0,
            });
            records.push(Record {
                step: t,
                ped_id: 2,
                x: t as f64,
                y: 1.0,
            });
        }
        // A third pedestrian only partially present is dropped.
        for t in 5..15 {
            records.push(Record {
                step: t,
                ped_id: 3,
                x: 0.0,
                y: t as f64,
            });
        }
        let scene = TrajectoryScene::from_records("pair", records, 1).unwrap();
        let windows = make_windows(&scene, &WindowConfig::default());
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].ped_ids, vec![1, 2]);
    }

    #[test]
    fn displacements_difference_absolute_track() {
        let windows = make_windows(&line_scene(20), &WindowConfig::default());
        let w = &windows[0];
        assert_eq!(w.observed_rel[0][0], [0.0, 0.0]);
        for t in 1..w.t_obs() {
            assert_eq!(w.observed_rel[t][0], [1.0, 0.0]);
        }
        // Cumulative sum of displacements recovers the absolute track.
        let mut pos = w.observed[0][0];
        for t in 1..w.t_obs() {
            pos[0] += w.observed_rel[t][0][0];
            pos[1] += w.observed_rel[t][0][1];
            assert!((pos[0] - w.observed[t][0][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn target_rel_starts_from_last_observed() {
        let windows = make_windows(&line_scene(20), &WindowConfig::default());
        let rel = windows[0].target_rel();
        assert_eq!(rel.len(), 12);
        assert_eq!(rel[0][0], [1.0, 0.0]);
    }

    #[test]
    fn tail_block_split_counts() {
        let windows = make_windows(&line_scene(29), &WindowConfig::default());
        assert_eq!(windows.len(), 10);
        let (train, eval) = split_scene_windows(windows.clone(), 0.2);
        assert_eq!((train.len(), eval.len()), (8, 2));
        // Eval windows are the latest ones.
        assert!(train.iter().all(|w| w.start_frame < eval[0].start_frame));
    }

    #[test]
    fn split_keeps_both_sides_nonempty() {
        let windows = make_windows(&line_scene(21), &WindowConfig::default());
        assert_eq!(windows.len(), 2);
        let (train, eval) = split_scene_windows(windows, 0.99);
        assert_eq!((train.len(), eval.len()), (1, 1));
    }

    #[test]
    fn split_is_deterministic() {
        let scenes = vec![line_scene(30)];
        let a = split_train_eval(&scenes, &WindowConfig::default(), 0.2).unwrap();
        let b = split_train_eval(&scenes, &WindowConfig::default(), 0.2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_text_preserves_scene() {
        let text = "0 1 2.0 3.0\n10 1 2.5 3.125\n10 2 -1.5 0.25\n";
        let scene = parse(text, ColumnOrder::FramePedXY).unwrap();
        let rewritten = scene.to_text(ColumnOrder::FramePedXY);
        let reparsed = parse(&rewritten, ColumnOrder::FramePedXY).unwrap();
        assert_eq!(scene, reparsed);
    }
}
