//! View scheduling for propagation: the distance-sorted sequence from the GT
//! view, the forward-then-reverse visit plan, and bookkeeping of which views
//! already carry a stored edit.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ViewImage;
use crate::nn;
use crate::scene::Camera;

/// Distances closer than this are treated as ties and ordered by view id.
pub const DISTANCE_RESOLUTION: f64 = 1e-9;

fn distance_key(d: f64) -> i64 {
    (d / DISTANCE_RESOLUTION).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSchedule {
    pub gt_view_id: u32,
    /// View ids by ascending camera-center distance to the GT camera.
    pub ordered: Vec<u32>,
    /// Distances parallel to `ordered`, rounded to [`DISTANCE_RESOLUTION`].
    pub distances: Vec<f64>,
    centers: BTreeMap<u32, [f64; 3]>,
}

impl ViewSchedule {
    pub fn len(&self) -> usize {
        self.ordered.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered.is_empty()
    }

    pub fn contains(&self, view_id: u32) -> bool {
        self.centers.contains_key(&view_id)
    }

    fn center(&self, view_id: u32) -> Result<Vector3<f64>> {
        self.centers
            .get(&view_id)
            .map(|c| Vector3::from(*c))
            .ok_or(Error::UnknownView(view_id))
    }

    fn distance_between(&self, a: u32, b: u32) -> Result<f64> {
        Ok((self.center(a)? - self.center(b)?).norm())
    }

    /// Nearest of `candidates` to `view_id`, ties to the smaller id.
    fn nearest(&self, view_id: u32, candidates: impl IntoIterator<Item = u32>) -> Result<Option<u32>> {
        let mut best: Option<(i64, u32)> = None;
        for c in candidates {
            let key = (distance_key(self.distance_between(view_id, c)?), c);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        Ok(best.map(|(_, id)| id))
    }
}

pub fn build_schedule(cameras: &[Camera], gt_view_id: u32) -> Result<ViewSchedule> {
    let gt = cameras
        .iter()
        .find(|c| c.id == gt_view_id)
        .ok_or(Error::UnknownView(gt_view_id))?;
    let mut centers = BTreeMap::new();
    for cam in cameras {
        if centers
            .insert(cam.id, [cam.center.x, cam.center.y, cam.center.z])
            .is_some()
        {
            return Err(Error::Invalid(format!("duplicate camera id {}", cam.id)));
        }
    }
    let mut keyed: Vec<(i64, u32)> = cameras
        .iter()
        .map(|c| (distance_key((c.center - gt.center).norm()), c.id))
        .collect();
    // The GT sits at distance 0 but another camera may share its center.
    keyed.sort_by_key(|&(k, id)| (id != gt_view_id, k, id));
    Ok(ViewSchedule {
        gt_view_id,
        ordered: keyed.iter().map(|&(_, id)| id).collect(),
        distances: keyed.iter().map(|&(k, _)| k as f64 * DISTANCE_RESOLUTION).collect(),
        centers,
    })
}

/// Forward over `order`, then back again without repeating its last entry.
pub fn visits_for_order(order: &[u32]) -> Vec<u32> {
    let mut visits = order.to_vec();
    if order.len() > 1 {
        visits.extend(order[..order.len() - 1].iter().rev());
    }
    visits
}

/// `ordered[1..n]` followed by `ordered[n-2..=1]`.
pub fn propagation_visits(schedule: &ViewSchedule) -> Vec<u32> {
    visits_for_order(&schedule.ordered[1..])
}

/// The same plan shape as [`propagation_visits`] over a seeded random
/// permutation of the non-GT views.
pub fn random_order_visits(schedule: &ViewSchedule, seed: u64) -> Vec<u32> {
    let mut order = schedule.ordered[1..].to_vec();
    order.shuffle(&mut nn::seeded_rng(seed));
    visits_for_order(&order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassDirection {
    Forward,
    Reverse,
}

/// Direction of visit `index` in a plan over `n_views` views.
pub fn pass_direction(index: usize, n_views: usize) -> PassDirection {
    if index < n_views.saturating_sub(1) {
        PassDirection::Forward
    } else {
        PassDirection::Reverse
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationState {
    gt_view_id: u32,
    processed: BTreeSet<u32>,
    stored_edits: BTreeMap<u32, ViewImage>,
    pub current_visit_index: usize,
}

impl PropagationState {
    pub fn new(gt_view_id: u32, gt_image: ViewImage) -> Self {
        Self {
            gt_view_id,
            processed: BTreeSet::from([gt_view_id]),
            stored_edits: BTreeMap::from([(gt_view_id, gt_image.with_view_id(gt_view_id))]),
            current_visit_index: 0,
        }
    }

    pub fn gt_view_id(&self) -> u32 {
        self.gt_view_id
    }

    pub fn processed(&self) -> &BTreeSet<u32> {
        &self.processed
    }

    pub fn is_processed(&self, view_id: u32) -> bool {
        self.processed.contains(&view_id)
    }

    pub fn stored_edit(&self, view_id: u32) -> Option<&ViewImage> {
        self.stored_edits.get(&view_id)
    }

    pub fn stored_edits(&self) -> &BTreeMap<u32, ViewImage> {
        &self.stored_edits
    }

    /// Stores the target edit for a view. Later records replace earlier ones,
    /// except for the GT view, whose image is fixed.
    pub fn record_edit(&mut self, view_id: u32, image: ViewImage) -> Result<()> {
        let image = image.with_view_id(view_id);
        if view_id == self.gt_view_id {
            if self.stored_edits.get(&view_id) != Some(&image) {
                return Err(Error::Invalid(format!(
                    "the stored edit of GT view {view_id} cannot be overwritten"
                )));
            }
            return Ok(());
        }
        self.processed.insert(view_id);
        self.stored_edits.insert(view_id, image);
        Ok(())
    }

    /// Processed view nearest to `view_id` (the view itself when processed).
    pub fn closest_processed(&self, schedule: &ViewSchedule, view_id: u32) -> Result<u32> {
        schedule.center(view_id)?;
        Ok(schedule
            .nearest(view_id, self.processed.iter().copied())?
            .expect("GT is always processed"))
    }

    /// Processed view nearest to `view_id` other than `view_id` itself. Used
    /// once a view's own target has been recorded.
    pub fn closest_other_processed(&self, schedule: &ViewSchedule, view_id: u32) -> Result<u32> {
        schedule.center(view_id)?;
        let others = self.processed.iter().copied().filter(|&v| v != view_id);
        Ok(schedule.nearest(view_id, others)?.unwrap_or(self.gt_view_id))
    }
}
