//! Coarse temporal alignment: per-offset foreground inlier scoring and the
//! integer-offset argmax search.
//!
//! For each candidate offset the reference frames are paired with the other
//! video's shifted frames, correspondences are filtered to the foreground
//! masks, and a fundamental matrix is fit by RANSAC; the summed inlier
//! count is the alignment score. The search is deterministic: every
//! (offset, reference frame) work item derives its own RNG stream, so
//! candidates may be evaluated in any order or in parallel.

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{ransac_fundamental, Correspondence};
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum CoarseError {
    #[error("invalid coarse config: {0}")]
    InvalidConfig(String),
    #[error("no alignment signal: every candidate offset scored zero")]
    NoSignal,
}

/// Source of putative correspondences between the reference camera's frame
/// `ref_frame` and the other camera's frame `other_frame`.
///
/// The shipped implementation is the synthetic generator; real matcher
/// output can be supplied through the correspondence CSV format instead.
pub trait Matcher: Sync {
    fn match_pair(&self, ref_frame: usize, other_frame: usize) -> Vec<Correspondence>;
}

impl<F> Matcher for F
where
    F: Fn(usize, usize) -> Vec<Correspondence> + Sync,
{
    fn match_pair(&self, ref_frame: usize, other_frame: usize) -> Vec<Correspondence> {
        self(ref_frame, other_frame)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseSearchConfig {
    /// Search radius k: candidate offsets span [-k, k].
    pub search_radius: i32,
    /// Reference frame indices t_i. Each must satisfy
    /// `k <= t_i <= num_frames - 1 - k` so every candidate offset yields a
    /// valid frame pair and the score sum keeps all its summands.
    pub reference_frame_indices: Vec<usize>,
    pub ransac_iterations: usize,
    /// Sampson distance threshold in squared pixels.
    pub ransac_threshold: f64,
    pub seed: u64,
}

impl CoarseSearchConfig {
    /// Default setup: 5 reference frames evenly spaced over the valid range.
    pub fn with_defaults(
        search_radius: i32,
        num_frames: usize,
        seed: u64,
    ) -> Result<Self, CoarseError> {
        Self::with_reference_count(search_radius, num_frames, 5, seed)
    }

    pub fn with_reference_count(
        search_radius: i32,
        num_frames: usize,
        reference_frames: usize,
        seed: u64,
    ) -> Result<Self, CoarseError> {
        if search_radius < 0 {
            return Err(CoarseError::InvalidConfig("negative search radius".into()));
        }
        let k = search_radius as usize;
        if num_frames < 2 * k + 1 {
            return Err(CoarseError::InvalidConfig(format!(
                "need more than {} frames for search radius {}, got {}",
                2 * k, k, num_frames
            )));
        }
        let lo = k;
        let hi = num_frames - 1 - k;
        let m = reference_frames.max(1);
        let indices = (0..m)
            .map(|i| {
                if m == 1 {
                    (lo + hi) / 2
                } else {
                    lo + (hi - lo) * i / (m - 1)
                }
            })
            .collect();
        let cfg = Self {
            search_radius,
            reference_frame_indices: indices,
            ransac_iterations: 1000,
            ransac_threshold: 2.0,
            seed,
        };
        cfg.validate(num_frames)?;
        Ok(cfg)
    }

    pub fn validate(&self, num_frames: usize) -> Result<(), CoarseError> {
        if self.search_radius < 0 {
            return Err(CoarseError::InvalidConfig("negative search radius".into()));
        }
        let k = self.search_radius as usize;
        if self.reference_frame_indices.is_empty() {
            return Err(CoarseError::InvalidConfig("no reference frames".into()));
        }
        for &t in &self.reference_frame_indices {
            if t < k || t + k > num_frames - 1 {
                return Err(CoarseError::InvalidConfig(format!(
                    "reference frame {t} leaves the valid range for k={k} and {num_frames} frames"
                )));
            }
        }
        Ok(())
    }
}

/// Per-candidate-offset inlier counts: the total and the per-reference-frame
/// breakdown, rows ordered by offset from -k to k.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub offsets: Vec<i32>,
    pub totals: Vec<u64>,
    pub per_frame: Vec<Vec<u64>>,
}

impl ScoreTable {
    /// CSV export: `delta_t,total_inliers,frame_0,...,frame_{m-1}`.
    pub fn to_csv(&self) -> String {
        let m = self.per_frame.first().map_or(0, |v| v.len());
        let mut out = String::from("delta_t,total_inliers");
        for i in 0..m {
            out.push_str(&format!(",frame_{i}"));
        }
        out.push('\n');
        for (i, &dt) in self.offsets.iter().enumerate() {
            out.push_str(&format!("{dt},{}", self.totals[i]));
            for v in &self.per_frame[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Keeps the matches where both endpoints lie inside their foreground
/// masks, preserving order.
pub fn filter_foreground(corrs: &[Correspondence]) -> Vec<Correspondence> {
    corrs
        .iter()
        .filter(|c| c.fg_ref && c.fg_other)
        .cloned()
        .collect()
}

/// Summed foreground inlier count for one candidate offset. Frame pairs
/// with fewer than 8 foreground matches, or where RANSAC finds no
/// consensus, contribute 0.
///
/// `delta_t` is the correction later *added* to the other video's
/// timestamps, so reference frame `t_i` is probed against the other
/// video's frame `t_i - delta_t`: if that video runs `delta_t` frames
/// ahead of the reference clock, its frame `t_i - delta_t` shows the scene
/// at reference time `t_i`.
pub fn alignment_score(
    matcher: &dyn Matcher,
    delta_t: i32,
    cfg: &CoarseSearchConfig,
) -> (u64, Vec<u64>) {
    let per_frame: Vec<u64> = cfg
        .reference_frame_indices
        .iter()
        .map(|&t_i| {
            let other = t_i as i64 - delta_t as i64;
            debug_assert!(other >= 0, "config invariant violated");
            let corrs = matcher.match_pair(t_i, other as usize);
            let fg = filter_foreground(&corrs);
            if fg.len() < 8 {
                return 0;
            }
            let mut seed_rng =
                SplitMix64::stream(cfg.seed, &[0xC0A5, delta_t as i64 as u64, t_i as u64]);
            match ransac_fundamental(
                &fg,
                cfg.ransac_iterations,
                cfg.ransac_threshold,
                seed_rng.next_u64(),
            ) {
                Ok(res) => res.inlier_indices.len() as u64,
                Err(_) => 0,
            }
        })
        .collect();
    (per_frame.iter().sum(), per_frame)
}

#[derive(Debug, Clone)]
pub struct CoarseSearch {
    /// The argmax offset.
    pub best_offset: i32,
    pub best_score: u64,
    pub table: ScoreTable,
}

/// Evaluates the alignment score for every candidate offset in [-k, k] and
/// returns the argmax. Ties go to the smaller |delta_t|, then to the
/// smaller signed value. All scores zero is reported as `NoSignal`; the
/// caller decides the fallback.
pub fn coarse_offset_search(
    matcher: &dyn Matcher,
    num_frames: usize,
    cfg: &CoarseSearchConfig,
) -> Result<CoarseSearch, CoarseError> {
    cfg.validate(num_frames)?;
    let k = cfg.search_radius;
    let offsets: Vec<i32> = (-k..=k).collect();
    let scored: Vec<(u64, Vec<u64>)> = offsets
        .par_iter()
        .map(|&dt| alignment_score(matcher, dt, cfg))
        .collect();

    let mut best: Option<(u64, i32)> = None;
    for (&dt, (total, _)) in offsets.iter().zip(&scored) {
        let better = match best {
            None => *total > 0,
            Some((bt, bdt)) => {
                *total > bt
                    || (*total == bt && (dt.abs() < bdt.abs() || (dt.abs() == bdt.abs() && dt < bdt)))
            }
        };
        if better {
            best = Some((*total, dt));
        }
    }

    let table = ScoreTable {
        offsets,
        totals: scored.iter().map(|(t, _)| *t).collect(),
        per_frame: scored.into_iter().map(|(_, f)| f).collect(),
    };
    match best {
        Some((score, dt)) => Ok(CoarseSearch {
            best_offset: dt,
            best_score: score,
            table,
        }),
        None => Err(CoarseError::NoSignal),
    }
}
