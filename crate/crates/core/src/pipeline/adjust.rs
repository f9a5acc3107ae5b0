use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::annotations::{load_annotations, AnnotationRecord, Source};
use super::{PipelineError, Result};
use crate::env::{term_flag, EnvState, Episode, EpisodeConfig, SceneData, TerminalReason, TraceStep};
use crate::oracle::{GtLength, Oracle};
use crate::qnet::QNetwork;
use crate::rl::greedy_action;
use crate::spatial::{apply_action, background_window, BoxAction, QuadBox};

/// Result of adjusting one box.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjustment {
    pub quad: QuadBox,
    pub conf_before: f64,
    pub conf_after: f64,
    pub steps: usize,
    /// `None` for grid search, which has no confidence gate.
    pub terminal_reason: Option<TerminalReason>,
    /// Step 0 is the starting box.
    pub trace: Vec<TraceStep>,
}

fn trace_entry(st: &EnvState, action: Option<BoxAction>, r: f64) -> TraceStep {
    TraceStep {
        t: st.step_index,
        action,
        quad: st.quad,
        conf: st.conf,
        r,
        term: term_flag(st.is_terminal()),
    }
}

/// Greedy rollout of `net` from `q0`: at most `cfg.max_steps` moves, stopping
/// early once the confidence gate fires.
pub fn adjust_box(
    net: &QNetwork,
    scene: &SceneData,
    q0: QuadBox,
    gt: GtLength,
    cfg: &EpisodeConfig,
    oracle: &mut Oracle,
) -> Result<Adjustment> {
    let ep = Episode::starting_at(
        scene.spec.clone(),
        scene.raster.clone(),
        q0,
        gt,
        *cfg,
        net.config().obs_shape(),
    )?;
    let mut st = ep.init(oracle)?;
    let mut trace = vec![trace_entry(&st, None, 0.0)];
    while !st.is_terminal() {
        let a = greedy_action(&net.q_values(&st.history)?);
        let out = ep.step(&st, a, oracle)?;
        st = out.state;
        trace.push(trace_entry(&st, Some(a), out.reward));
    }
    Ok(Adjustment {
        quad: st.quad,
        conf_before: st.conf0,
        conf_after: st.conf,
        steps: st.step_index,
        terminal_reason: st.terminal,
        trace,
    })
}

/// Greedy one-pixel ascent. Each round visits the vertices in order (TL, TR,
/// BR, BL) and moves each one pixel in whichever of its four directions most
/// improves confidence, leaving it in place when none does (ties go to the
/// lower direction index). Stops early after a round without any move. Moves
/// stay inside the background window of `q0`; the trace has one entry per
/// round and `steps` counts the rounds that moved the box.
pub fn grid_search_adjust(
    scene: &SceneData,
    q0: QuadBox,
    rounds: usize,
    gt: GtLength,
    oracle: &mut Oracle,
) -> Result<Adjustment> {
    if rounds == 0 {
        return Err(PipelineError::InvalidArgument("rounds must be >= 1".into()));
    }
    let window = background_window(&q0, &scene.raster.bounds())?;
    let mut conf = |q: &QuadBox| oracle.confidence(&scene.spec, &scene.raster, q, gt);
    let mut cur = q0;
    let mut c = conf(&cur)?;
    let conf_before = c;
    let mut trace = vec![TraceStep {
        t: 0,
        action: None,
        quad: cur,
        conf: c,
        r: 0.0,
        term: 1,
    }];
    let actions: Vec<BoxAction> = BoxAction::all().collect();
    for round in 1..=rounds {
        let start = c;
        let mut moved = false;
        for moves in actions.chunks(4) {
            let mut best: Option<(QuadBox, f64)> = None;
            for &a in moves {
                let q = apply_action(&cur, a, &window);
                if q == cur {
                    continue;
                }
                let cq = conf(&q)?;
                if cq > best.map_or(c, |b| b.1) {
                    best = Some((q, cq));
                }
            }
            if let Some((q, cq)) = best {
                cur = q;
                c = cq;
                moved = true;
            }
        }
        if !moved {
            break;
        }
        trace.push(TraceStep {
            t: round,
            action: None,
            quad: cur,
            conf: c,
            r: c - start,
            term: 1,
        });
    }
    if let Some(last) = trace.last_mut() {
        last.term = 0;
    }
    Ok(Adjustment {
        quad: cur,
        conf_before,
        conf_after: c,
        steps: trace.len() - 1,
        terminal_reason: None,
        trace,
    })
}

/// How boxes are adjusted.
#[derive(Debug, Clone, Copy)]
pub enum Adjuster<'a> {
    Agent { net: &'a QNetwork, cfg: EpisodeConfig },
    Grid { rounds: usize },
}

impl Adjuster<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            Adjuster::Agent { .. } => "agent",
            Adjuster::Grid { .. } => "grid",
        }
    }

    fn run(&self, scene: &SceneData, q0: QuadBox, gt: GtLength, oracle: &mut Oracle) -> Result<Adjustment> {
        match *self {
            Adjuster::Agent { net, cfg } => adjust_box(net, scene, q0, gt, &cfg, oracle),
            Adjuster::Grid { rounds } => grid_search_adjust(scene, q0, rounds, gt, oracle),
        }
    }
}

/// Per-record line of an [`AdjustReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustRecord {
    pub image_id: String,
    pub quad_before: QuadBox,
    pub quad_after: QuadBox,
    pub conf_before: f64,
    pub conf_after: f64,
    pub steps_taken: usize,
    pub terminal_reason: Option<TerminalReason>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdjustSummary {
    pub records: usize,
    pub mean_conf_before: f64,
    pub mean_conf_after: f64,
    pub mean_conf_gain: f64,
    pub improved_fraction: f64,
    pub mean_steps: f64,
    /// Wall-clock time per adjusted box. Hardware dependent.
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdjustReport {
    pub method: String,
    pub records: Vec<AdjustRecord>,
    /// Ids of records passed through unadjusted because their image was not found.
    pub missing_images: Vec<String>,
    pub summary: AdjustSummary,
}

impl AdjustReport {
    pub fn from_records(method: &str, records: Vec<AdjustRecord>, missing: Vec<String>, latency_ms: f64) -> Self {
        let n = records.len();
        let mean = |f: &dyn Fn(&AdjustRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let summary = AdjustSummary {
            records: n,
            mean_conf_before: mean(&|r| r.conf_before),
            mean_conf_after: mean(&|r| r.conf_after),
            mean_conf_gain: mean(&|r| r.conf_after - r.conf_before),
            improved_fraction: mean(&|r| f64::from(u8::from(r.conf_after > r.conf_before))),
            mean_steps: mean(&|r| r.steps_taken as f64),
            mean_latency_ms: if n == 0 { 0.0 } else { latency_ms / n as f64 },
        };
        Self {
            method: method.to_string(),
            records,
            missing_images: missing,
            summary,
        }
    }
}

/// Ground-truth length used for a record's confidence.
pub fn gt_length(r: &AnnotationRecord) -> GtLength {
    match r.source {
        Source::PseudoLabel => GtLength::FromPrediction,
        Source::GroundTruth if r.transcript.is_empty() => GtLength::FromPrediction,
        Source::GroundTruth => GtLength::Known(r.transcript.chars().count()),
    }
}

type Outcome = Option<(Adjustment, f64)>;

fn adjust_one(
    adjuster: &Adjuster,
    r: &AnnotationRecord,
    scenes: &HashMap<String, SceneData>,
    oracle: &mut Oracle,
) -> Result<Outcome> {
    let Some(scene) = scenes.get(&r.image_id) else {
        return Ok(None);
    };
    let t = Instant::now();
    let adj = adjuster.run(scene, r.quad, gt_length(r), oracle)?;
    Ok(Some((adj, t.elapsed().as_secs_f64() * 1e3)))
}

fn assemble(
    adjuster: &Adjuster,
    records: &[AnnotationRecord],
    outcomes: Vec<Outcome>,
) -> (Vec<AnnotationRecord>, AdjustReport) {
    let mut out = Vec::with_capacity(records.len());
    let mut rows = vec![];
    let mut missing = vec![];
    let mut latency = 0.0;
    for (r, o) in records.iter().zip(outcomes) {
        match o {
            None => {
                missing.push(r.image_id.clone());
                out.push(r.clone());
            }
            Some((adj, ms)) => {
                latency += ms;
                rows.push(AdjustRecord {
                    image_id: r.image_id.clone(),
                    quad_before: r.quad,
                    quad_after: adj.quad,
                    conf_before: adj.conf_before,
                    conf_after: adj.conf_after,
                    steps_taken: adj.steps,
                    terminal_reason: adj.terminal_reason,
                });
                out.push(AnnotationRecord {
                    quad: adj.quad,
                    ..r.clone()
                });
            }
        }
    }
    (out, AdjustReport::from_records(adjuster.label(), rows, missing, latency))
}

/// Adjusts every record in order. Transcripts, sources and record order are
/// preserved; records whose image id has no scene pass through unchanged and
/// are listed in `missing_images`.
pub fn adjust_dataset(
    adjuster: &Adjuster,
    records: &[AnnotationRecord],
    scenes: &HashMap<String, SceneData>,
    oracle: &mut Oracle,
) -> Result<(Vec<AnnotationRecord>, AdjustReport)> {
    let outcomes = records
        .iter()
        .map(|r| adjust_one(adjuster, r, scenes, oracle))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(adjuster, records, outcomes))
}

/// [`adjust_dataset`] on `workers` threads, each with its own oracle from
/// `make_oracle`. Output order matches the input.
pub fn adjust_dataset_parallel<F>(
    adjuster: &Adjuster,
    records: &[AnnotationRecord],
    scenes: &HashMap<String, SceneData>,
    workers: usize,
    make_oracle: F,
) -> Result<(Vec<AnnotationRecord>, AdjustReport)>
where
    F: Fn() -> Result<Oracle> + Sync,
{
    let workers = workers.max(1);
    let oracles = (0..workers)
        .map(|_| make_oracle().map(Mutex::new))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::InvalidArgument(format!("thread pool: {e}")))?;
    let outcomes = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                // each pool thread owns the oracle at its index
                let i = rayon::current_thread_index().unwrap_or(0) % workers;
                let mut oracle = oracles[i].lock().unwrap_or_else(|p| p.into_inner());
                adjust_one(adjuster, r, scenes, &mut oracle)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(assemble(adjuster, records, outcomes))
}

/// Loads externally produced detections, marks them as pseudo-labels and
/// adjusts them with the agent. Confidence uses each recognizer's predicted
/// length since pseudo-labels carry no transcript.
pub fn pseudo_label_flow(
    detections: impl AsRef<Path>,
    net: &QNetwork,
    cfg: &EpisodeConfig,
    scenes: &HashMap<String, SceneData>,
    oracle: &mut Oracle,
) -> Result<(Vec<AnnotationRecord>, AdjustReport)> {
    let records: Vec<AnnotationRecord> = load_annotations(detections)?
        .into_iter()
        .map(|r| AnnotationRecord {
            source: Source::PseudoLabel,
            ..r
        })
        .collect();
    adjust_dataset(&Adjuster::Agent { net, cfg: *cfg }, &records, scenes, oracle)
}
