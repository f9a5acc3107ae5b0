//! Recognition-confidence scoring.
//!
//! A recognizer returns per-character confidences; [`aggregate_confidence`]
//! folds them into one score, penalising both missing and extra characters
//! through the `max(n_gt, predicted_len)` denominator. The synthetic
//! recognizer peaks at a scene's hidden optimal box; external recognizers are
//! reached through a line-delimited JSON protocol (see [`external`]).

pub mod external;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash;
use crate::spatial::{crop, QuadBox, Raster, SceneSpec, SpatialError};

pub use external::ExternalOracle;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("ground-truth length must be at least 1")]
    InvalidGroundTruthLength,
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("predicted_len {predicted_len} does not match {confs} character confidences")]
    LengthMismatch { predicted_len: usize, confs: usize },
    #[error("character confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("invalid oracle parameters: {0}")]
    InvalidParams(String),
    #[error("no response from external oracle within {0:?}")]
    OracleTimeout(std::time::Duration),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("bad oracle endpoint {0:?}")]
    BadEndpoint(String),
    #[error(transparent)]
    Spatial(#[from] SpatialError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Per-character confidences of one recognition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecognitionResult {
    char_confs: Vec<f64>,
    predicted_len: usize,
}

impl RecognitionResult {
    pub fn new(char_confs: Vec<f64>, predicted_len: usize) -> Result<Self> {
        if predicted_len != char_confs.len() {
            return Err(OracleError::LengthMismatch {
                predicted_len,
                confs: char_confs.len(),
            });
        }
        if let Some(&c) = char_confs
            .iter()
            .find(|c| !c.is_finite() || !(0.0..=1.0).contains(*c))
        {
            return Err(OracleError::ConfidenceOutOfRange(c));
        }
        Ok(Self {
            char_confs,
            predicted_len,
        })
    }

    pub fn from_confs(char_confs: Vec<f64>) -> Result<Self> {
        let n = char_confs.len();
        Self::new(char_confs, n)
    }

    pub fn char_confs(&self) -> &[f64] {
        &self.char_confs
    }

    pub fn predicted_len(&self) -> usize {
        self.predicted_len
    }
}

/// `sum(char_confs) / max(n_gt, predicted_len)`.
pub fn aggregate_confidence(res: &RecognitionResult, n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(OracleError::InvalidGroundTruthLength);
    }
    let sum: f64 = res.char_confs.iter().sum();
    Ok(sum / n_gt.max(res.predicted_len) as f64)
}

/// Arithmetic mean of the per-result aggregates.
pub fn ensemble_confidence(results: &[RecognitionResult], n_gt: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(OracleError::EmptyEnsemble);
    }
    let mut total = 0.0;
    for r in results {
        total += aggregate_confidence(r, n_gt)?;
    }
    Ok(total / results.len() as f64)
}

/// Mean vertex distance between `q` and `q_star`, in units of the diagonal of
/// `q_star`'s enclosing rectangle.
pub fn discrepancy(q: &QuadBox, q_star: &QuadBox) -> f64 {
    let mean = q
        .vertices()
        .iter()
        .zip(q_star.vertices())
        .map(|(a, b)| ((a.x - b.x) as f64).hypot((a.y - b.y) as f64))
        .sum::<f64>()
        / 4.0;
    mean / q_star.enclosing_rect().diagonal()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticOracleParams {
    /// Confidence lost per unit of normalized discrepancy.
    pub alpha: f64,
    /// Discrepancy past which characters start dropping out of the prediction.
    pub drop_threshold: f64,
    /// Amplitude of the fixed per-character perturbation.
    pub noise_amp: f64,
}

impl Default for SyntheticOracleParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            drop_threshold: 0.25,
            noise_amp: 0.05,
        }
    }
}

impl SyntheticOracleParams {
    pub fn noise_free() -> Self {
        Self {
            noise_amp: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(OracleError::InvalidParams(format!("alpha {} must be > 0", self.alpha)));
        }
        if !(self.drop_threshold > 0.0 && self.drop_threshold < 1.0) {
            return Err(OracleError::InvalidParams(format!(
                "drop_threshold {} must be in (0, 1)",
                self.drop_threshold
            )));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp < 0.1) {
            return Err(OracleError::InvalidParams(format!(
                "noise_amp {} must be in [0, 0.1)",
                self.noise_amp
            )));
        }
        Ok(())
    }
}

const ETA_SALT: u64 = 0x5EED_0F_C4A2;

/// Fixed per-character perturbation in `[-1, 1]`.
fn eta(seed: u64, k: usize) -> f64 {
    hash::signed_unit(hash::mix(seed ^ ETA_SALT, &[k as u64]))
}

/// Deterministic stand-in recognizer whose confidence peaks at
/// `scene.optimal_quad` and decays linearly with [`discrepancy`]; past
/// `drop_threshold` it also starts losing characters.
pub fn synthetic_recognize(
    scene: &SceneSpec,
    q: &QuadBox,
    params: &SyntheticOracleParams,
) -> RecognitionResult {
    let d = discrepancy(q, &scene.optimal_quad);
    let base = (1.0 - params.alpha * d).max(0.0);
    let n_g = scene.text_len();
    let predicted_len = if d <= params.drop_threshold {
        n_g
    } else {
        let lost = ((d - params.drop_threshold) * n_g as f64 / params.drop_threshold).ceil();
        n_g.saturating_sub(lost as usize)
    };
    let char_confs = (0..predicted_len)
        .map(|k| (base + params.noise_amp * eta(scene.seed, k)).clamp(0.0, 1.0))
        .collect();
    RecognitionResult {
        char_confs,
        predicted_len,
    }
}

/// Which ground-truth length enters the aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtLength {
    /// Transcript length of an annotated instance.
    Known(usize),
    /// No transcript (pseudo-labels): use each recognizer's own predicted
    /// length, so the score is its mean character confidence.
    FromPrediction,
}

/// One recognizer.
#[derive(Debug)]
pub enum OracleHandle {
    Synthetic(SyntheticOracleParams),
    External(ExternalOracle),
}

impl OracleHandle {
    /// Opens a handle from an endpoint string: `synthetic`, `stdio:CMD` or
    /// `tcp:HOST:PORT`.
    pub fn open(
        endpoint: &str,
        params: SyntheticOracleParams,
        timeout: std::time::Duration,
    ) -> Result<Self> {
        if endpoint == "synthetic" {
            params.validate()?;
            Ok(OracleHandle::Synthetic(params))
        } else {
            Ok(OracleHandle::External(ExternalOracle::connect(endpoint, timeout)?))
        }
    }

    pub fn recognize(
        &mut self,
        scene: &SceneSpec,
        image: &Raster,
        q: &QuadBox,
    ) -> Result<RecognitionResult> {
        match self {
            OracleHandle::Synthetic(p) => Ok(synthetic_recognize(scene, q, p)),
            OracleHandle::External(ext) => {
                let patch = crop(image, &q.enclosing_rect())?;
                ext.recognize(&patch, scene.text_len())
            }
        }
    }
}

/// Ensemble of recognizers; the reward signal is their mean aggregate confidence.
#[derive(Debug)]
pub struct Oracle {
    members: Vec<OracleHandle>,
}

impl Oracle {
    pub fn new(members: Vec<OracleHandle>) -> Result<Self> {
        if members.is_empty() {
            return Err(OracleError::EmptyEnsemble);
        }
        Ok(Self { members })
    }

    pub fn synthetic(params: SyntheticOracleParams) -> Self {
        Self {
            members: vec![OracleHandle::Synthetic(params)],
        }
    }

    pub fn members(&self) -> &[OracleHandle] {
        &self.members
    }

    /// Ensemble confidence of `q` on `scene`.
    pub fn confidence(
        &mut self,
        scene: &SceneSpec,
        image: &Raster,
        q: &QuadBox,
        gt: GtLength,
    ) -> Result<f64> {
        let mut total = 0.0;
        for m in &mut self.members {
            let res = m.recognize(scene, image, q)?;
            let n_gt = match gt {
                GtLength::Known(n) => n,
                GtLength::FromPrediction => res.predicted_len.max(1),
            };
            total += aggregate_confidence(&res, n_gt)?;
        }
        Ok(total / self.members.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::QuadBox;
    use proptest::prelude::*;

    fn res(c: &[f64]) -> RecognitionResult {
        RecognitionResult::from_confs(c.to_vec()).unwrap()
    }

    fn scene(q: QuadBox, text: &str) -> SceneSpec {
        SceneSpec {
            canvas_w: 128,
            canvas_h: 128,
            transcript: text.into(),
            optimal_quad: q,
            annotated_quad: q,
            seed: 99,
        }
    }

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_confidence(&res(&[0.9, 0.8, 0.7]), 4).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(aggregate_confidence(&res(&[]), 5).unwrap(), 0.0);
        assert_eq!(aggregate_confidence(&res(&[1.0, 1.0]), 2).unwrap(), 1.0);
        assert!(matches!(
            aggregate_confidence(&res(&[0.5]), 0),
            Err(OracleError::InvalidGroundTruthLength)
        ));
    }

    #[test]
    fn extra_characters_are_penalised() {
        assert_eq!(aggregate_confidence(&res(&[1.0, 1.0, 1.0, 1.0]), 2).unwrap(), 1.0);
        assert_eq!(aggregate_confidence(&res(&[0.5, 0.5, 0.5, 0.5]), 2).unwrap(), 0.5);
    }

    #[test]
    fn result_invariants() {
        assert!(RecognitionResult::new(vec![0.5, 0.5], 3).is_err());
        assert!(RecognitionResult::new(vec![1.5], 1).is_err());
        assert!(RecognitionResult::new(vec![f64::NAN], 1).is_err());
    }

    #[test]
    fn discrepancy_examples() {
        // 15 x 20 enclosing rect: diagonal 25
        let q = QuadBox::axis_aligned(10, 10, 24, 29).unwrap();
        assert_eq!(discrepancy(&q, &q), 0.0);
        let shifted = q.translate(3, 4);
        assert!((discrepancy(&shifted, &q) - 0.2).abs() < 1e-15);
        let (a, b) = (shifted.translate(-7, 11), q.translate(-7, 11));
        assert_eq!(discrepancy(&a, &b), discrepancy(&shifted, &q));
    }

    #[test]
    fn synthetic_peaks_at_optimum() {
        let q = QuadBox::axis_aligned(20, 20, 60, 34).unwrap();
        let s = scene(q, "HELLO");
        let p = SyntheticOracleParams::default();
        let r = synthetic_recognize(&s, &q, &p);
        assert_eq!(r.predicted_len(), 5);
        assert!(r.char_confs().iter().all(|&c| c >= 1.0 - p.noise_amp));
    }

    #[test]
    fn synthetic_collapses_at_half_diagonal() {
        // diagonal of a 30 x 40 rect is 50; shifting by (15, 20) gives D = 0.5
        let q = QuadBox::axis_aligned(20, 20, 49, 59).unwrap();
        let s = scene(q, "ABCDEFGH");
        let p = SyntheticOracleParams::default();
        let far = q.translate(15, 20);
        assert!((discrepancy(&far, &q) - 0.5).abs() < 1e-12);
        let r = synthetic_recognize(&s, &far, &p);
        assert!(r.char_confs().iter().all(|&c| c <= p.noise_amp));
    }

    #[test]
    fn synthetic_is_monotone_along_ray() {
        let q = QuadBox::axis_aligned(30, 30, 70, 45).unwrap();
        let s = scene(q, "RAYS");
        let p = SyntheticOracleParams::default();
        for (ux, uy) in [(1, 0), (0, 1), (-1, 1), (2, -1)] {
            let mut prev = f64::INFINITY;
            for t in 0..=8 {
                let r = synthetic_recognize(&s, &q.translate(t * ux, t * uy), &p);
                let c = aggregate_confidence(&r, s.text_len()).unwrap();
                assert!(c <= prev, "t={t}: {c} > {prev}");
                prev = c;
            }
        }
    }

    #[test]
    fn ensemble_examples() {
        let a = res(&[0.4]);
        let b = res(&[0.8]);
        assert_eq!(ensemble_confidence(&[a.clone()], 1).unwrap(), 0.4);
        assert!((ensemble_confidence(&[a.clone(), b.clone()], 1).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(
            ensemble_confidence(&[a.clone(), b.clone()], 1).unwrap(),
            ensemble_confidence(&[b, a], 1).unwrap()
        );
        assert!(matches!(ensemble_confidence(&[], 1), Err(OracleError::EmptyEnsemble)));
    }

    #[test]
    fn params_validation() {
        assert!(SyntheticOracleParams::default().validate().is_ok());
        let bad = SyntheticOracleParams { alpha: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SyntheticOracleParams { noise_amp: 0.1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SyntheticOracleParams { drop_threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pseudo_label_length_uses_prediction() {
        let q = QuadBox::axis_aligned(20, 20, 60, 34).unwrap();
        let s = scene(q, "HELLO");
        let raster = Raster::filled(128, 128, 0.1);
        let mut oracle = Oracle::synthetic(SyntheticOracleParams::noise_free());
        let far = q.translate(6, 4);
        let known = oracle.confidence(&s, &raster, &far, GtLength::Known(5)).unwrap();
        let pseudo = oracle.confidence(&s, &raster, &far, GtLength::FromPrediction).unwrap();
        assert!(pseudo >= known);
    }

    proptest! {
        #[test]
        fn aggregate_monotonicity(
            confs in prop::collection::vec(0.0f64..=1.0, 0..8),
            bump_at in 0usize..8,
            n_gt in 1usize..12,
        ) {
            let base = aggregate_confidence(&res(&confs), n_gt).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            if bump_at < confs.len() {
                let mut up = confs.clone();
                up[bump_at] = (up[bump_at] + 0.1).min(1.0);
                prop_assert!(aggregate_confidence(&res(&up), n_gt).unwrap() >= base);
            }
            if n_gt >= confs.len() {
                prop_assert!(aggregate_confidence(&res(&confs), n_gt + 1).unwrap() <= base);
            }
        }

        #[test]
        fn synthetic_optimum_dominates_perturbations(
            dx in prop::array::uniform8(-6i32..=6),
            seed in any::<u64>(),
        ) {
            let q = QuadBox::axis_aligned(40, 40, 80, 56).unwrap();
            let mut s = scene(q, "SAMPLE");
            s.seed = seed;
            let p = SyntheticOracleParams::default();
            let c0 = aggregate_confidence(&synthetic_recognize(&s, &q, &p), 6).unwrap();
            let mut c = q.coords();
            for i in 0..8 { c[i] += dx[i]; }
            if let Ok(other) = QuadBox::from_coords(c) {
                let c1 = aggregate_confidence(&synthetic_recognize(&s, &other, &p), 6).unwrap();
                prop_assert!(c1 <= c0 + 2.0 * p.noise_amp);
            }
        }
    }
}
