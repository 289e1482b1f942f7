//! Deterministic 2.5D tabletop simulator: procedural scenes, an
//! orthographic top-down renderer with an exact depth buffer, kinematic
//! grasp rules, task suites with substep progress scoring, and a scripted
//! expert that generates demonstrations.

use crate::error::{Result, TrimotError};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const IMG: usize = 64;
pub const CAMERA_HEIGHT: f64 = 2.0;
pub const TABLE_Z: f64 = 0.0;
pub const MAX_DELTA: f64 = 0.05;
pub const GRASP_XY_TOL: f64 = 0.03;
pub const GRASP_Z_TOL: f64 = 0.02;
pub const STACK_TOL: f64 = 0.025;
pub const GRIPPER_Z_MAX: f64 = 0.3;
pub const LIFT_BOTTOM: f64 = 0.10;
pub const EPISODE_CAP: usize = 60;
/// PICK-suite object height; fixed so that suite needs no depth reasoning.
pub const STANDARD_HEIGHT: f64 = 0.10;

const PIXEL: f64 = 1.0 / IMG as f64;
const TABLE_RGB: [u8; 3] = [110, 110, 110];
const MARKER_RGB: [u8; 3] = [30, 30, 30];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Cube,
    Cylinder,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Cube => "block",
            Shape::Cylinder => "cylinder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
}

pub const COLORS: [Color; 6] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Purple,
    Color::Orange,
];

impl Color {
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [200, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 70, 210],
            Color::Yellow => [220, 200, 40],
            Color::Purple => [150, 60, 190],
            Color::Orange => [230, 130, 30],
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obj {
    pub shape: Shape,
    pub color: Color,
    pub xy: (f64, f64),
    pub height: f64,
    pub size: f64,
    pub stacked_on: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gripper {
    pub xyz: (f64, f64, f64),
    pub open: f64,
    pub held: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Obj>,
    pub gripper: Gripper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Suite {
    Pick,
    Place,
    Stack,
    TallerPick,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Pick => "PICK",
            Suite::Place => "PLACE",
            Suite::Stack => "STACK",
            Suite::TallerPick => "TALLER_PICK",
        }
    }

    pub fn parse(s: &str) -> Result<Suite> {
        match s.to_ascii_uppercase().as_str() {
            "PICK" => Ok(Suite::Pick),
            "PLACE" => Ok(Suite::Place),
            "STACK" => Ok(Suite::Stack),
            "TALLER_PICK" | "TALLERPICK" => Ok(Suite::TallerPick),
            other => Err(TrimotError::Config(format!("unknown suite {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Substep {
    /// Gripper holds the target object.
    Grasped,
    /// Target held with its bottom at least `LIFT_BOTTOM` above the table.
    Lifted,
    /// Target released and resting on the base object.
    OnBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub suite: Suite,
    pub instruction: String,
    pub target: usize,
    pub base: Option<usize>,
    pub substeps: Vec<Substep>,
}

impl Scene {
    /// Bottom height of an object, resolving stacking and grasping.
    pub fn z_bottom(&self, id: usize) -> f64 {
        if self.gripper.held == Some(id) {
            return self.gripper.xyz.2 - self.objects[id].height;
        }
        match self.objects[id].stacked_on {
            Some(s) => self.z_top(s),
            None => TABLE_Z,
        }
    }

    pub fn z_top(&self, id: usize) -> f64 {
        self.z_bottom(id) + self.objects[id].height
    }

    /// True if no other object rests on `id`.
    pub fn is_clear(&self, id: usize) -> bool {
        !self
            .objects
            .iter()
            .any(|o| o.stacked_on == Some(id))
    }
}

impl TaskSpec {
    pub fn substep_holds(&self, scene: &Scene, step: Substep) -> bool {
        match step {
            Substep::Grasped => scene.gripper.held == Some(self.target),
            Substep::Lifted => {
                scene.gripper.held == Some(self.target)
                    && scene.z_bottom(self.target) >= LIFT_BOTTOM
            }
            Substep::OnBase => {
                scene.gripper.held != Some(self.target)
                    && scene.objects[self.target].stacked_on == self.base
                    && self.base.is_some()
            }
        }
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

const GRIPPER_START_Z: f64 = 0.25;

/// Deterministic procedural scene + task for a suite.
pub fn generate_scene(seed: u64, suite: Suite) -> (Scene, TaskSpec) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(6364136223846793005).wrapping_add(suite as u64));
    let sizes = [0.109375];

    // Objects sit at cell centers of the 8x8 patch grid (cell pitch
    // 0.125 m), away from the gripper's home row; sizes stay below the
    // pitch, so distinct cells can never overlap.
    let mut cells: Vec<(f64, f64)> = Vec::new();
    for i in [2usize, 4, 6] {
        for j in [2usize, 4, 6] {
            cells.push((0.0625 + 0.125 * i as f64, 0.0625 + 0.125 * j as f64));
        }
    }
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.gen_range(0..=i));
    }
    let mut next_cell = 0usize;
    let mut place = || -> (f64, f64) {
        let c = cells[next_cell];
        next_cell += 1;
        c
    };

    let mut objects: Vec<Obj> = Vec::new();
    let mut taken: Vec<(f64, f64)> = Vec::new();
    let mut colors = COLORS.to_vec();
    // Fisher-Yates with the scene rng
    for i in (1..colors.len()).rev() {
        colors.swap(i, rng.gen_range(0..=i));
    }

    let (target, base, instruction) = match suite {
        Suite::Pick => {
            let n = 2;
            for i in 0..n {
                let xy = place();
                taken.push(xy);
                objects.push(Obj {
                    shape: if rng.gen_bool(0.5) { Shape::Cube } else { Shape::Cylinder },
                    color: colors[i],
                    xy,
                    // Fixed height keeps the grasp descent solvable from RGB
                    // alone; only STACK/TALLER_PICK vary heights, so PICK
                    // stays depth-insensitive.
                    height: STANDARD_HEIGHT,
                    size: sizes[rng.gen_range(0..sizes.len())],
                    stacked_on: None,
                });
            }
            let target = rng.gen_range(0..n);
            let o = &objects[target];
            (
                target,
                None,
                format!("pick the {} {}", o.color.word(), o.shape.word()),
            )
        }
        Suite::Place => {
            let n = 1;
            for i in 0..n {
                let xy = place();
                taken.push(xy);
                objects.push(Obj {
                    shape: if rng.gen_bool(0.5) { Shape::Cube } else { Shape::Cylinder },
                    color: colors[i],
                    xy,
                    height: rng.gen_range(0.04..0.16),
                    size: sizes[rng.gen_range(0..sizes.len())],
                    stacked_on: None,
                });
            }
            let xy = place();
            taken.push(xy);
            let plate = objects.len();
            objects.push(Obj {
                shape: Shape::Cylinder,
                color: colors[n],
                xy,
                height: 0.02,
                size: 0.125,
                stacked_on: None,
            });
            let target = rng.gen_range(0..n);
            let o = &objects[target];
            (
                target,
                Some(plate),
                format!("put {} {} on plate", o.color.word(), o.shape.word()),
            )
        }
        Suite::Stack => {
            let n = 2;
            for i in 0..n {
                let xy = place();
                taken.push(xy);
                objects.push(Obj {
                    shape: if rng.gen_bool(0.5) { Shape::Cube } else { Shape::Cylinder },
                    color: colors[i],
                    xy,
                    height: rng.gen_range(0.04..0.16),
                    size: sizes[rng.gen_range(0..sizes.len())],
                    stacked_on: None,
                });
            }
            let target = rng.gen_range(0..n);
            let mut base = rng.gen_range(0..n - 1);
            if base >= target {
                base += 1;
            }
            objects[base].height = objects[base].height.min(0.10);
            let t = objects[target];
            let b = objects[base];
            (
                target,
                Some(base),
                format!(
                    "stack {} {} on {} {}",
                    t.color.word(),
                    t.shape.word(),
                    b.color.word(),
                    b.shape.word()
                ),
            )
        }
        Suite::TallerPick => {
            let shape = if rng.gen_bool(0.5) { Shape::Cube } else { Shape::Cylinder };
            let color = colors[0];
            let size = sizes[rng.gen_range(0..sizes.len())];
            let short = rng.gen_range(0.04..0.13);
            let tall = short + rng.gen_range(0.04..0.07);
            let mut heights = [short, tall];
            if rng.gen_bool(0.5) {
                heights.swap(0, 1);
            }
            for h in heights {
                let xy = place();
                taken.push(xy);
                objects.push(Obj {
                    shape,
                    color,
                    xy,
                    height: h,
                    size,
                    stacked_on: None,
                });
            }
            let target = if heights[0] > heights[1] { 0 } else { 1 };
            (
                target,
                None,
                format!("pick the taller {}", shape.word()),
            )
        }
    };

    let substeps = match suite {
        Suite::Pick | Suite::TallerPick => vec![Substep::Grasped, Substep::Lifted],
        Suite::Place | Suite::Stack => vec![Substep::Grasped, Substep::Lifted, Substep::OnBase],
    };

    // Random start pose: with a fixed home position, the expert's beeline
    // makes the proprio trajectory identify the target, letting a policy
    // fit demonstrations without ever reading the image. A per-episode
    // start breaks that shortcut.
    let start = (
        (rng.gen_range(0.15..0.85f64) * 64.0).round() / 64.0,
        (rng.gen_range(0.15..0.85f64) * 64.0).round() / 64.0,
        GRIPPER_START_Z,
    );

    (
        Scene {
            objects,
            gripper: Gripper {
                xyz: start,
                open: 1.0,
                held: None,
            },
        },
        TaskSpec {
            suite,
            instruction,
            target,
            base,
            substeps,
        },
    )
}

fn covers(o: &Obj, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - o.xy.0, py - o.xy.1);
    let half = o.size / 2.0;
    match o.shape {
        Shape::Cube => dx.abs() <= half && dy.abs() <= half,
        Shape::Cylinder => dx * dx + dy * dy <= half * half,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub rgb: Array3<u8>,
    /// Camera-to-surface distance in meters, exactly
    /// CAMERA_HEIGHT − top-surface height per pixel.
    pub depth_gt: Array2<f64>,
    pub instruction: String,
    /// Gripper x, y, z, open fraction (raw units).
    pub proprio: [f64; 4],
}

/// Orthographic top-down render: painter's algorithm by top height, exact
/// depth buffer; the gripper appears as a small RGB marker only.
pub fn render(scene: &Scene, instruction: &str) -> Observation {
    let mut rgb = Array3::zeros((IMG, IMG, 3));
    let mut depth = Array2::zeros((IMG, IMG));
    for i in 0..IMG {
        for j in 0..IMG {
            let px = (j as f64 + 0.5) * PIXEL;
            let py = (i as f64 + 0.5) * PIXEL;
            let mut top = TABLE_Z;
            let mut color = TABLE_RGB;
            for (id, o) in scene.objects.iter().enumerate() {
                if covers(o, px, py) {
                    let t = scene.z_top(id);
                    if t > top {
                        top = t;
                        color = o.color.rgb();
                    }
                }
            }
            depth[(i, j)] = CAMERA_HEIGHT - top;
            for c in 0..3 {
                rgb[(i, j, c)] = color[c];
            }
        }
    }
    // gripper marker: 5-pixel cross in RGB only
    let gj = ((scene.gripper.xyz.0 / PIXEL) as isize).clamp(0, IMG as isize - 1);
    let gi = ((scene.gripper.xyz.1 / PIXEL) as isize).clamp(0, IMG as isize - 1);
    for (di, dj) in [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)] {
        let (i, j) = (gi + di, gj + dj);
        if (0..IMG as isize).contains(&i) && (0..IMG as isize).contains(&j) {
            for c in 0..3 {
                rgb[(i as usize, j as usize, c)] = MARKER_RGB[c];
            }
        }
    }
    Observation {
        rgb,
        depth_gt: depth,
        instruction: instruction.to_string(),
        proprio: [
            scene.gripper.xyz.0,
            scene.gripper.xyz.1,
            scene.gripper.xyz.2,
            scene.gripper.open,
        ],
    }
}

/// Kinematic step: clipped gripper deltas, grasp on close within tolerance,
/// stack on release within alignment tolerance. Deterministic.
pub fn step(scene: &Scene, action: [f64; 4]) -> Scene {
    let mut s = scene.clone();
    let clip = |d: f64| d.clamp(-MAX_DELTA, MAX_DELTA);
    let g = &mut s.gripper;
    g.xyz.0 = (g.xyz.0 + clip(action[0])).clamp(0.0, 1.0);
    g.xyz.1 = (g.xyz.1 + clip(action[1])).clamp(0.0, 1.0);
    g.xyz.2 = (g.xyz.2 + clip(action[2])).clamp(0.0, GRIPPER_Z_MAX);
    let gx = g.xyz;
    if let Some(id) = g.held {
        s.objects[id].xy = (gx.0, gx.1);
    }
    let grip = action[3];
    s.gripper.open = grip.clamp(0.0, 1.0);
    if grip < 0.5 {
        if s.gripper.held.is_none() {
            // grasp the nearest clear object within tolerance of its top
            let mut best: Option<(usize, f64)> = None;
            for id in 0..s.objects.len() {
                if !s.is_clear(id) {
                    continue;
                }
                let d2 = dist2((gx.0, gx.1), s.objects[id].xy);
                let dz = (gx.2 - s.z_top(id)).abs();
                if d2 <= GRASP_XY_TOL * GRASP_XY_TOL && dz <= GRASP_Z_TOL {
                    if best.map_or(true, |(_, bd)| d2 < bd) {
                        best = Some((id, d2));
                    }
                }
            }
            if let Some((id, _)) = best {
                s.objects[id].stacked_on = None;
                s.objects[id].xy = (gx.0, gx.1);
                s.gripper.held = Some(id);
            }
        }
    } else if let Some(id) = s.gripper.held.take() {
        // release: stack if centered on a clear support, else drop to table
        let mut support = None;
        for j in 0..s.objects.len() {
            if j == id || !s.is_clear(j) {
                continue;
            }
            if dist2(s.objects[id].xy, s.objects[j].xy) <= STACK_TOL * STACK_TOL {
                support = Some(j);
                break;
            }
        }
        match support {
            Some(j) => {
                s.objects[id].xy = s.objects[j].xy;
                s.objects[id].stacked_on = Some(j);
            }
            None => s.objects[id].stacked_on = None,
        }
    }
    s
}

const XY_TOL: f64 = 1e-3;

/// Privileged waypoint controller: approach above, descend, close, lift,
/// transport, descend, open. One action per call.
pub fn expert_action(scene: &Scene, task: &TaskSpec) -> [f64; 4] {
    let clip = |d: f64| d.clamp(-MAX_DELTA, MAX_DELTA);
    let g = scene.gripper.xyz;
    let target = task.target;

    if scene.gripper.held == Some(target) {
        let h = scene.objects[target].height;
        match task.base {
            None => {
                let lift_z = LIFT_BOTTOM + h + 0.02;
                [0.0, 0.0, clip(lift_z - g.2), 0.0]
            }
            Some(base) => {
                let goal = scene.objects[base].xy;
                let release_z = (scene.z_top(base) + h + 0.005).min(GRIPPER_Z_MAX);
                let above = dist2((g.0, g.1), goal) <= XY_TOL * XY_TOL;
                if !above {
                    // high enough that the lift substep is reached in transit
                    let carry_z = (release_z + 0.02)
                        .max(LIFT_BOTTOM + h + 0.02)
                        .min(GRIPPER_Z_MAX);
                    [
                        clip(goal.0 - g.0),
                        clip(goal.1 - g.1),
                        clip(carry_z - g.2),
                        0.0,
                    ]
                } else if (g.2 - release_z).abs() > 1e-4 {
                    [0.0, 0.0, clip(release_z - g.2), 0.0]
                } else {
                    [0.0, 0.0, 0.0, 1.0]
                }
            }
        }
    } else if task.substep_holds(scene, *task.substeps.last().unwrap())
        || (task.base.is_some() && scene.objects[target].stacked_on == task.base)
    {
        // done: hold position
        [0.0, 0.0, 0.0, 1.0]
    } else {
        let t = scene.objects[target].xy;
        let grasp_z = scene.z_top(target);
        let above = dist2((g.0, g.1), t) <= XY_TOL * XY_TOL;
        if !above {
            let travel_z = 0.24f64;
            [clip(t.0 - g.0), clip(t.1 - g.1), clip(travel_z - g.2), 1.0]
        } else if (g.2 - grasp_z).abs() > 1e-4 {
            [0.0, 0.0, clip(grasp_z - g.2), 1.0]
        } else {
            [0.0, 0.0, 0.0, 0.0]
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    /// scenes[t] is the state before actions[t]; length is actions + 1.
    pub scenes: Vec<Scene>,
    pub actions: Vec<[f64; 4]>,
    pub substeps_ever: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressScore {
    pub progress: f64,
    pub success: bool,
}

/// Fraction of substeps ever satisfied along a trace; success is the final
/// substep.
pub fn score_progress(record: &EpisodeRecord, task: &TaskSpec) -> (ProgressScore, Vec<bool>) {
    let mut ever = vec![false; task.substeps.len()];
    for scene in &record.scenes {
        for (i, &s) in task.substeps.iter().enumerate() {
            if task.substep_holds(scene, s) {
                ever[i] = true;
            }
        }
    }
    let hits = ever.iter().filter(|b| **b).count();
    (
        ProgressScore {
            progress: hits as f64 / ever.len() as f64,
            success: *ever.last().unwrap(),
        },
        ever,
    )
}

/// Runs a policy closed-loop; the policy emits a chunk of raw actions that
/// is executed fully before re-planning.
pub fn rollout<F>(
    scene0: &Scene,
    task: &TaskSpec,
    mut policy: F,
    max_steps: usize,
) -> Result<EpisodeRecord>
where
    F: FnMut(&Observation) -> Result<Vec<[f64; 4]>>,
{
    let mut record = EpisodeRecord {
        scenes: vec![scene0.clone()],
        actions: Vec::new(),
        substeps_ever: vec![false; task.substeps.len()],
    };
    let mut scene = scene0.clone();
    let mark = |scene: &Scene, ever: &mut Vec<bool>| {
        for (i, &s) in task.substeps.iter().enumerate() {
            if task.substep_holds(scene, s) {
                ever[i] = true;
            }
        }
    };
    mark(&scene, &mut record.substeps_ever);
    'outer: while record.actions.len() < max_steps {
        let obs = render(&scene, &task.instruction);
        let chunk = policy(&obs)?;
        if chunk.is_empty() {
            return Err(TrimotError::Eval("policy returned an empty chunk".into()));
        }
        for action in chunk {
            scene = step(&scene, action);
            record.actions.push(action);
            record.scenes.push(scene.clone());
            mark(&scene, &mut record.substeps_ever);
            if record.substeps_ever.iter().all(|b| *b) || record.actions.len() >= max_steps {
                break 'outer;
            }
        }
    }
    Ok(record)
}

/// Closed-loop expert run; errors if the expert fails to finish the task.
pub fn rollout_expert(scene0: &Scene, task: &TaskSpec, max_steps: usize) -> Result<EpisodeRecord> {
    let mut privileged = scene0.clone();
    let task2 = task.clone();
    let record = rollout(
        scene0,
        task,
        move |_obs| {
            let a = expert_action(&privileged, &task2);
            privileged = step(&privileged, a);
            Ok(vec![a])
        },
        max_steps,
    )?;
    if !record.substeps_ever.iter().all(|b| *b) {
        return Err(TrimotError::Eval(format!(
            "scripted expert failed on {} task \"{}\"",
            task.suite.name(),
            task.instruction
        )));
    }
    Ok(record)
}

/// JSON-lines trace export: one record per executed step.
pub fn write_trace(path: &Path, record: &EpisodeRecord, task: &TaskSpec) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    for (t, action) in record.actions.iter().enumerate() {
        let scene = &record.scenes[t + 1];
        let substeps: Vec<bool> = task
            .substeps
            .iter()
            .map(|&s| task.substep_holds(scene, s))
            .collect();
        let line = serde_json::json!({
            "t": t,
            "gripper": scene.gripper,
            "held": scene.gripper.held,
            "action": action,
            "substeps": substeps,
        });
        writeln!(f, "{line}").map_err(|e| TrimotError::io(path.display().to_string(), e))?;
    }
    Ok(())
}
