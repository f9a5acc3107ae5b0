//! The box-adjustment environment.
//!
//! An episode fixes a background window around the starting box, then moves
//! one vertex per step. The reward is the change in ensemble confidence and
//! the episode ends once confidence reaches `terminal_factor * conf0` or the
//! step cap is hit.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{GtLength, Oracle, OracleError};
use crate::spatial::{
    apply_action, background_window, crop, enclosing_rect, render_scene, resize_bilinear,
    BoxAction, QuadBox, Raster, RectRegion, SceneSpec, SpatialError,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a terminal state")]
    StepOnTerminal,
    #[error("invalid episode config: {0}")]
    InvalidConfig(String),
    #[error("scene raster is {got:?}, scene spec says {expected:?}")]
    RasterMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Maximum steps per episode.
    #[serde(rename = "T")]
    pub max_steps: usize,
    /// Episode ends once `conf >= terminal_factor * conf0`.
    pub terminal_factor: f64,
    pub gamma: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            max_steps: 20,
            terminal_factor: 1.2,
            gamma: 0.0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps < 1 {
            return Err(EnvError::InvalidConfig("T must be >= 1".into()));
        }
        if !(self.terminal_factor >= 1.0) {
            return Err(EnvError::InvalidConfig("terminal_factor must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(EnvError::InvalidConfig("gamma must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Raster sizes of the two observation images, as (height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsShape {
    pub bg_h: usize,
    pub bg_w: usize,
    pub fg_h: usize,
    pub fg_w: usize,
}

/// One snapshot: the fixed background window, the current box crop, and the
/// box vertices normalized to the window.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub background: Raster,
    pub foreground: Raster,
    pub box_coords: [f32; 8],
}

/// Vertex coordinates mapped so the window's first pixel is 0 and its last is 1.
pub fn normalized_coords(q: &QuadBox, window: &RectRegion) -> [f32; 8] {
    let sx = (window.width() - 1).max(1) as f64;
    let sy = (window.height() - 1).max(1) as f64;
    let mut out = [0.0f32; 8];
    for (i, p) in q.vertices().iter().enumerate() {
        out[2 * i] = ((p.x - window.x0) as f64 / sx).clamp(0.0, 1.0) as f32;
        out[2 * i + 1] = ((p.y - window.y0) as f64 / sy).clamp(0.0, 1.0) as f32;
    }
    out
}

pub fn make_observation(
    scene: &Raster,
    window: &RectRegion,
    q: &QuadBox,
    shape: &ObsShape,
) -> Result<Observation> {
    let background = resize_bilinear(&crop(scene, window)?, shape.bg_w, shape.bg_h);
    let foreground = resize_bilinear(&crop(scene, &enclosing_rect(q)?)?, shape.fg_w, shape.fg_h);
    Ok(Observation {
        background,
        foreground,
        box_coords: normalized_coords(q, window),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    ConfidenceGate,
    StepCap,
}

/// Snapshot of an episode after `step_index` steps. Values only: stepping
/// produces a new state and leaves this one untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// The last four observations, oldest first.
    pub history: [Arc<Observation>; 4],
    pub quad: QuadBox,
    pub step_index: usize,
    pub conf: f64,
    pub conf0: f64,
    pub terminal: Option<TerminalReason>,
}

impl EnvState {
    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }

    pub fn current(&self) -> &Observation {
        &self.history[3]
    }
}

/// `(s, a, r, s', term)`. Internally `terminal` is a plain flag; the 0/1
/// encoding used in traces has 0 meaning terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub action: BoxAction,
    pub reward: f64,
    pub next: EnvState,
    pub terminal: bool,
}

impl Transition {
    /// 0 = terminal, 1 = episode continues.
    pub fn term_flag(&self) -> u8 {
        term_flag(self.terminal)
    }
}

pub fn term_flag(terminal: bool) -> u8 {
    if terminal {
        0
    } else {
        1
    }
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub terminal: bool,
}

/// A scene together with its raster.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub spec: Arc<SceneSpec>,
    pub raster: Arc<Raster>,
}

impl SceneData {
    pub fn render(spec: SceneSpec) -> Self {
        let raster = Arc::new(render_scene(&spec));
        Self {
            spec: Arc::new(spec),
            raster,
        }
    }

    /// Episode starting from the annotated box.
    pub fn episode(&self, cfg: EpisodeConfig, shape: ObsShape) -> Result<Episode> {
        Episode::new(self.spec.clone(), self.raster.clone(), cfg, shape)
    }
}

/// Fixed context of one episode: the scene, its raster, the start box and the
/// frozen background window.
#[derive(Debug, Clone)]
pub struct Episode {
    pub scene: Arc<SceneSpec>,
    pub raster: Arc<Raster>,
    pub start: QuadBox,
    pub window: RectRegion,
    pub gt: GtLength,
    pub cfg: EpisodeConfig,
    pub shape: ObsShape,
}

impl Episode {
    /// Episode starting from the scene's annotated box.
    pub fn new(
        scene: Arc<SceneSpec>,
        raster: Arc<Raster>,
        cfg: EpisodeConfig,
        shape: ObsShape,
    ) -> Result<Self> {
        let start = scene.annotated_quad;
        let gt = GtLength::Known(scene.text_len());
        Self::starting_at(scene, raster, start, gt, cfg, shape)
    }

    pub fn starting_at(
        scene: Arc<SceneSpec>,
        raster: Arc<Raster>,
        start: QuadBox,
        gt: GtLength,
        cfg: EpisodeConfig,
        shape: ObsShape,
    ) -> Result<Self> {
        cfg.validate()?;
        if (raster.width(), raster.height()) != (scene.canvas_w, scene.canvas_h) {
            return Err(EnvError::RasterMismatch {
                got: (raster.width(), raster.height()),
                expected: (scene.canvas_w, scene.canvas_h),
            });
        }
        let window = background_window(&start, &raster.bounds())?;
        Ok(Self {
            scene,
            raster,
            start,
            window,
            gt,
            cfg,
            shape,
        })
    }

    pub fn observe(&self, q: &QuadBox) -> Result<Observation> {
        make_observation(&self.raster, &self.window, q, &self.shape)
    }

    pub fn confidence(&self, q: &QuadBox, oracle: &mut Oracle) -> Result<f64> {
        Ok(oracle.confidence(&self.scene, &self.raster, q, self.gt)?)
    }

    /// Initial state: the first observation repeated four times.
    pub fn init(&self, oracle: &mut Oracle) -> Result<EnvState> {
        let o0 = Arc::new(self.observe(&self.start)?);
        let conf0 = self.confidence(&self.start, oracle)?;
        Ok(EnvState {
            history: [o0.clone(), o0.clone(), o0.clone(), o0],
            quad: self.start,
            step_index: 0,
            conf: conf0,
            conf0,
            terminal: None,
        })
    }

    pub fn step(&self, st: &EnvState, a: BoxAction, oracle: &mut Oracle) -> Result<StepOutcome> {
        if st.is_terminal() {
            return Err(EnvError::StepOnTerminal);
        }
        let quad = apply_action(&st.quad, a, &self.window);
        let conf = self.confidence(&quad, oracle)?;
        let obs = Arc::new(self.observe(&quad)?);
        let step_index = st.step_index + 1;
        let terminal = if conf >= self.cfg.terminal_factor * st.conf0 {
            Some(TerminalReason::ConfidenceGate)
        } else if step_index >= self.cfg.max_steps {
            Some(TerminalReason::StepCap)
        } else {
            None
        };
        let [_, h1, h2, h3] = &st.history;
        let state = EnvState {
            history: [h1.clone(), h2.clone(), h3.clone(), obs],
            quad,
            step_index,
            conf,
            conf0: st.conf0,
            terminal,
        };
        Ok(StepOutcome {
            reward: conf - st.conf,
            terminal: terminal.is_some(),
            state,
        })
    }
}

/// `sum_k gamma^k * rewards[k]`.
pub fn cumulative_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 0.0;
    let mut w = 1.0;
    for &r in rewards {
        g += w * r;
        w *= gamma;
    }
    g
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// `None` for the initial record.
    pub action: Option<BoxAction>,
    pub quad: QuadBox,
    pub conf: f64,
    pub r: f64,
    /// 0 = terminal, 1 = continues.
    pub term: u8,
}

pub fn write_trace_jsonl<W: Write>(steps: &[TraceStep], mut out: W) -> std::io::Result<()> {
    for s in steps {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
