//! Alignment error metrics: pooled pixel error, box-normalized error, 3D error
//! after similarity alignment, and yaw / per-landmark breakdowns.

use serde::Serialize;

use crate::camera::{Landmarks2D, VisibilityVector};
use crate::error::{Error, Result};
use crate::shape_model::Shape3D;
use crate::similarity::fit_similarity;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub estimated: Landmarks2D,
    pub truth: Landmarks2D,
    /// Ground-truth hard visibility.
    pub vis: VisibilityVector,
    /// Normalizer in pixels, `sqrt(width * height)` of the face box.
    pub d: f64,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.truth.ncols();
        if self.estimated.ncols() != n || self.vis.len() != n {
            return Err(Error::Dimension(format!(
                "record with {} estimated, {} true landmarks and {} visibility flags",
                self.estimated.ncols(),
                n,
                self.vis.len()
            )));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidInput(format!("normalizer {} must be positive", self.d)));
        }
        if self.vis.count_visible() == 0 {
            return Err(Error::InvalidInput("record has no visible landmark".into()));
        }
        Ok(())
    }

    /// Euclidean error of each visible landmark, `None` for invisible ones.
    pub fn landmark_errors(&self) -> Vec<Option<f64>> {
        (0..self.truth.ncols())
            .map(|j| {
                self.vis
                    .is_visible(j)
                    .then(|| (self.estimated.column(j) - self.truth.column(j)).norm())
            })
            .collect()
    }

    pub fn mean_error(&self) -> f64 {
        let errs: Vec<f64> = self.landmark_errors().into_iter().flatten().collect();
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

fn check(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to evaluate".into()));
    }
    records.iter().try_for_each(EvalRecord::validate)
}

/// Total visible-landmark error divided by the total visible count.
pub fn mape(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    let (sum, count) = records.iter().fold((0.0, 0usize), |(s, c), r| {
        let errs: Vec<f64> = r.landmark_errors().into_iter().flatten().collect();
        (s + errs.iter().sum::<f64>(), c + errs.len())
    });
    Ok(sum / count as f64)
}

/// Mean over images of `mean visible error / d`, in percent.
pub fn nme(records: &[EvalRecord]) -> Result<f64> {
    check(records)?;
    let total: f64 = records.iter().map(|r| r.mean_error() / r.d).sum();
    Ok(100.0 * total / records.len() as f64)
}

/// Mean landmark distance after mapping `truth` onto `estimated` by the best
/// similarity transform.
pub fn mape3d(estimated: &Shape3D, truth: &Shape3D) -> Result<f64> {
    if estimated.ncols() != truth.ncols() {
        return Err(Error::Dimension(format!(
            "{} estimated vs {} true 3D landmarks",
            estimated.ncols(),
            truth.ncols()
        )));
    }
    let est = estimated.fixed_rows::<3>(0).into_owned();
    let tru = truth.fixed_rows::<3>(0).into_owned();
    let aligned = fit_similarity(&tru, &est)?.apply(&tru);
    let n = est.ncols() as f64;
    Ok((aligned - est).column_iter().map(|c| c.norm()).sum::<f64>() / n)
}

/// Half-open yaw interval `[lo, hi)`; the last bin of a partition also
/// includes its upper edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YawBin {
    pub lo: f64,
    pub hi: f64,
}

impl YawBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Bins between consecutive strictly increasing edges.
pub fn bins_from_edges(edges: &[f64]) -> Result<Vec<YawBin>> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(
            "bin edges must be at least two strictly increasing values".into(),
        ));
    }
    Ok(edges.windows(2).map(|w| YawBin { lo: w[0], hi: w[1] }).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinResult {
    pub bin: YawBin,
    pub count: usize,
    /// `None` when no image falls in the bin.
    pub nme: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Breakdown {
    pub pose_bins: Vec<BinResult>,
    /// Percent error of each landmark over the images where it is visible.
    pub landmark_errors: Vec<Option<f64>>,
}

fn bin_of(yaw: f64, bins: &[YawBin]) -> Option<usize> {
    let last = bins.len() - 1;
    bins.iter()
        .position(|b| b.lo <= yaw && yaw < b.hi)
        .or_else(|| (yaw == bins[last].hi).then_some(last))
}

pub fn breakdown(records: &[EvalRecord], yaws: &[f64], bins: &[YawBin]) -> Result<Breakdown> {
    check(records)?;
    if yaws.len() != records.len() {
        return Err(Error::Dimension(format!("{} yaws for {} records", yaws.len(), records.len())));
    }
    if bins.is_empty() {
        return Err(Error::InvalidInput("no yaw bins".into()));
    }
    let mut members: Vec<Vec<EvalRecord>> = vec![Vec::new(); bins.len()];
    for (r, &yaw) in records.iter().zip(yaws) {
        let b = bin_of(yaw, bins).ok_or_else(|| {
            Error::InvalidInput(format!("yaw {yaw} falls outside every bin"))
        })?;
        members[b].push(r.clone());
    }
    let pose_bins = bins
        .iter()
        .zip(&members)
        .map(|(bin, m)| {
            Ok(BinResult {
                bin: *bin,
                count: m.len(),
                nme: if m.is_empty() { None } else { Some(nme(m)?) },
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = records[0].truth.ncols();
    if records.iter().any(|r| r.truth.ncols() != n) {
        return Err(Error::Dimension("records disagree on landmark count".into()));
    }
    let mut sums = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for r in records {
        for (j, e) in r.landmark_errors().into_iter().enumerate() {
            if let Some(e) = e {
                sums[j] += e / r.d;
                counts[j] += 1;
            }
        }
    }
    let landmark_errors = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| (c > 0).then(|| 100.0 * s / c as f64))
        .collect();
    Ok(Breakdown {
        pose_bins,
        landmark_errors,
    })
}
