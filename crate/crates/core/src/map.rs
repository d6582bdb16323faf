//! Global map: range-dependent insertion caps and the incremental
//! ellipsoid/neighbourhood update.
//!
//! Points are immutable once inserted. Each carries the radial bin it was
//! captured in, which fixes its search radius `min(10 v(b), 1)` for the rest
//! of its life, and a bounded neighbour set from which its tensors are
//! computed.

use rayon::prelude::*;
use rustc_hash::FxHashSet;
use serde::{Deserialize, Serialize};

use crate::geometry::{Timestamp, Vec3};
use crate::preprocess::SensorModel;
use crate::tensor_voting::{self, Ellipsoid, Primitive, Saliency, SymTensor3};
use crate::voxel_index::{PointId, VoxelIndex};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    /// Map voxel resolution φ in metres.
    pub resolution: f64,
    /// Upper bound on points per voxel.
    pub rho_max: u32,
    /// Lower bound on the neighbour minimum.
    pub n_min: u32,
    /// Upper bound on stored neighbours.
    pub n_max: u32,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            resolution: 0.1,
            rho_max: 6,
            n_min: 6,
            n_max: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MapPoint {
    pub position: Vec3,
    pub capture_time: Timestamp,
    /// Trajectory length at capture.
    pub capture_traj_len: f64,
    pub capture_bin: u32,
    /// Neighbour identifiers in ascending order.
    pub neighbors: Vec<PointId>,
    pub stage1: Option<SymTensor3>,
    pub saliency: Option<Saliency>,
    pub ellipsoid: Option<Ellipsoid>,
    /// Radius used for the last stage-two computation.
    pub ellipsoid_radius: f64,
}

/// Running neighbour-count mean for one radial bin.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BinStats {
    pub neighbor_total: u64,
    pub points: u64,
}

impl BinStats {
    pub fn mean(&self) -> Option<f64> {
        (self.points > 0).then(|| self.neighbor_total as f64 / self.points as f64)
    }
}

/// Search radius for bin `b`: `min(10 v(b), 1)`.
pub fn search_radius(bin: usize, sensor: &SensorModel) -> f64 {
    (10.0 * sensor.bin_resolution(bin)).min(1.0)
}

/// Maximum points per voxel: `min(⌈10 ρ_max φ² / (π r²)⌉, ρ_max)`.
pub fn per_bin_cap(resolution: f64, radius: f64, rho_max: u32) -> u32 {
    let raw = (10.0 * rho_max as f64 * resolution * resolution / (std::f64::consts::PI * radius * radius)).ceil();
    (raw.max(1.0) as u32).min(rho_max)
}

/// Neighbour minimum `max(n_min, mean)`.
pub fn min_neighbors(stats: &BinStats, n_min: u32) -> f64 {
    stats.mean().map_or(n_min as f64, |m| m.max(n_min as f64))
}

/// Neighbour maximum `min(n_max, ⌊2 n^b_min⌋)`.
pub fn max_neighbors(min_neighbors: f64, n_max: u32) -> usize {
    ((2.0 * min_neighbors).floor() as usize).min(n_max as usize)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrimitiveCounts {
    pub line: usize,
    pub plane: usize,
    pub ball: usize,
    /// Points without an ellipsoid.
    pub none: usize,
}

impl PrimitiveCounts {
    pub fn with_ellipsoid(&self) -> usize {
        self.line + self.plane + self.ball
    }

    fn pct(&self, n: usize) -> f64 {
        let total = self.with_ellipsoid();
        if total == 0 {
            0.0
        } else {
            100.0 * n as f64 / total as f64
        }
    }

    pub fn plane_pct(&self) -> f64 {
        self.pct(self.plane)
    }
    pub fn line_pct(&self) -> f64 {
        self.pct(self.line)
    }
    pub fn ball_pct(&self) -> f64 {
        self.pct(self.ball)
    }
}

/// Outcome of one ellipsoid update.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UpdateSummary {
    /// New points that passed the neighbour minimum.
    pub processed_new: Vec<PointId>,
    /// Existing points whose tensors were recomputed.
    pub reprocessed: Vec<PointId>,
}

#[derive(Debug, Clone)]
pub struct GlobalMap {
    config: MapConfig,
    sensor: SensorModel,
    index: VoxelIndex,
    points: Vec<MapPoint>,
    bins: Vec<BinStats>,
}

impl GlobalMap {
    pub fn new(config: MapConfig, sensor: SensorModel) -> Self {
        Self {
            config,
            sensor,
            index: VoxelIndex::new(config.resolution),
            points: Vec::new(),
            bins: vec![BinStats::default(); sensor.bin_count()],
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn sensor(&self) -> &SensorModel {
        &self.sensor
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: PointId) -> &MapPoint {
        &self.points[id as usize]
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }

    pub fn index(&self) -> &VoxelIndex {
        &self.index
    }

    pub fn bin_stats(&self, bin: usize) -> &BinStats {
        &self.bins[bin]
    }

    pub fn search_radius(&self, bin: usize) -> f64 {
        search_radius(bin, &self.sensor)
    }

    pub fn per_bin_cap(&self, bin: usize) -> u32 {
        per_bin_cap(self.config.resolution, self.search_radius(bin), self.config.rho_max)
    }

    pub fn min_neighbors(&self, bin: usize) -> f64 {
        min_neighbors(&self.bins[bin], self.config.n_min)
    }

    pub fn max_neighbors(&self, bin: usize) -> usize {
        max_neighbors(self.min_neighbors(bin), self.config.n_max)
    }

    /// Inserts global-frame points grouped by radial bin (index = bin), in
    /// ascending bin order with the bin's voxel cap. Returns the newly added
    /// identifiers in processing order.
    pub fn insert(
        &mut self,
        bins: &[Vec<Vec3>],
        capture_time: Timestamp,
        capture_traj_len: f64,
    ) -> Vec<PointId> {
        let mut added = Vec::new();
        for (bin, pts) in bins.iter().enumerate().take(self.sensor.bin_count()) {
            if pts.is_empty() {
                continue;
            }
            let cap = self.per_bin_cap(bin);
            for id in self.index.insert_capped(pts, cap) {
                self.points.push(MapPoint {
                    position: self.index.point(id),
                    capture_time,
                    capture_traj_len,
                    capture_bin: bin as u32,
                    neighbors: Vec::new(),
                    stage1: None,
                    saliency: None,
                    ellipsoid: None,
                    ellipsoid_radius: 0.0,
                });
                added.push(id);
            }
        }
        debug_assert_eq!(self.points.len(), self.index.len());
        added
    }

    /// Insertion followed by the ellipsoid update of the new points.
    pub fn update(
        &mut self,
        bins: &[Vec<Vec3>],
        capture_time: Timestamp,
        capture_traj_len: f64,
    ) -> (Vec<PointId>, UpdateSummary) {
        let added = self.insert(bins, capture_time, capture_traj_len);
        let summary = self.ellipsoid_update(&added);
        (added, summary)
    }

    fn radius_of(&self, id: PointId) -> f64 {
        self.search_radius(self.points[id as usize].capture_bin as usize)
    }

    /// Neighbours within the point's own radius, excluding itself and any
    /// coincident point, sorted ascending by id.
    fn search_neighbors(&self, id: PointId) -> Vec<(PointId, f64)> {
        let q = self.points[id as usize].position;
        let r = self.radius_of(id);
        self.index
            .radius_neighbors(&q, r)
            .into_iter()
            .filter(|&j| j != id)
            .map(|j| (j, (self.points[j as usize].position - q).norm()))
            .filter(|&(_, d)| d > 0.0)
            .collect()
    }

    fn stage1_of(&self, id: PointId, neighbors: &[PointId]) -> SymTensor3 {
        let p = &self.points[id as usize];
        let r = self.search_radius(p.capture_bin as usize);
        let j1 = tensor_voting::stage_tensor(
            &p.position,
            neighbors.iter().map(|&j| (self.points[j as usize].position, None)),
            r,
        )
        .expect("coincident neighbours are never stored");
        tensor_voting::process_tensor(&j1)
    }

    fn stage2_of(&self, id: PointId) -> (Saliency, Option<Ellipsoid>, f64) {
        let p = &self.points[id as usize];
        let r = self.search_radius(p.capture_bin as usize);
        let j2 = tensor_voting::stage_tensor(
            &p.position,
            p.neighbors.iter().filter_map(|&j| {
                let n = &self.points[j as usize];
                n.stage1.as_ref().map(|k| (n.position, Some(k)))
            }),
            r,
        )
        .expect("coincident neighbours are never stored");
        let (saliency, ellipsoid) = tensor_voting::analyse(&j2, r);
        (saliency, ellipsoid, r)
    }

    /// Incremental ellipsoid update for the newly inserted points `new`.
    ///
    /// New points first search their neighbourhood; those with at least
    /// `n^b_min` neighbours get a stage-one tensor, the rest leave the
    /// processing set but stay in the map. Each new point joins the neighbour
    /// set of every neighbour whose own radius it falls within, while that set
    /// is below `n^b_max`; existing points that reach the minimum this way are
    /// reprocessed. Finally stage-two tensors, saliencies and ellipsoids are
    /// computed for the processed new points and the reprocessed set.
    ///
    /// Neighbour searches and tensor evaluations run in parallel; all mutation
    /// of shared neighbour sets happens in point order, so the result does not
    /// depend on the thread count.
    pub fn ellipsoid_update(&mut self, new: &[PointId]) -> UpdateSummary {
        if new.is_empty() {
            return UpdateSummary::default();
        }
        let searches: Vec<Vec<(PointId, f64)>> =
            new.par_iter().map(|&id| self.search_neighbors(id)).collect();

        let batch: FxHashSet<PointId> = new.iter().copied().collect();
        // Q′ membership; starts as the full batch
        let mut active: FxHashSet<PointId> = batch.clone();
        let mut processed: Vec<(PointId, Vec<PointId>)> = Vec::new();
        let mut reprocess: Vec<PointId> = Vec::new();
        let mut reprocess_set: FxHashSet<PointId> = FxHashSet::default();

        for (&i, found) in new.iter().zip(&searches) {
            let bin_i = self.points[i as usize].capture_bin as usize;
            let n_min_i = self.min_neighbors(bin_i);
            let cap_i = self.max_neighbors(bin_i);

            let mut stored: Vec<(PointId, f64)> = found.clone();
            if stored.len() > cap_i {
                stored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                stored.truncate(cap_i);
                stored.sort_by_key(|x| x.0);
            }
            let stored: Vec<PointId> = stored.into_iter().map(|x| x.0).collect();

            if found.len() as f64 >= n_min_i {
                processed.push((i, stored.clone()));
            } else {
                active.remove(&i);
            }
            self.points[i as usize].neighbors = stored;
            let stats = &mut self.bins[bin_i];
            stats.neighbor_total += found.len() as u64;
            stats.points += 1;

            for &(j, d) in found {
                let bin_j = self.points[j as usize].capture_bin as usize;
                if d > self.search_radius(bin_j) {
                    continue;
                }
                if !batch.contains(&j) {
                    // the true radius count of an existing point grows by one
                    self.bins[bin_j].neighbor_total += 1;
                }
                let cap_j = self.max_neighbors(bin_j);
                let n_min_j = self.min_neighbors(bin_j);
                let nj = &mut self.points[j as usize].neighbors;
                if nj.len() < cap_j {
                    if let Err(pos) = nj.binary_search(&i) {
                        nj.insert(pos, i);
                    }
                    if nj.len() as f64 >= n_min_j && !active.contains(&j) && reprocess_set.insert(j) {
                        reprocess.push(j);
                    }
                }
            }
        }

        let stage1_new: Vec<SymTensor3> = processed
            .par_iter()
            .map(|(i, nb)| self.stage1_of(*i, nb))
            .collect();
        for ((i, _), k) in processed.iter().zip(stage1_new) {
            self.points[*i as usize].stage1 = Some(k);
        }

        let stage1_old: Vec<SymTensor3> = reprocess
            .par_iter()
            .map(|&j| self.stage1_of(j, &self.points[j as usize].neighbors))
            .collect();
        for (&j, k) in reprocess.iter().zip(stage1_old) {
            self.points[j as usize].stage1 = Some(k);
        }

        let targets: Vec<PointId> = processed
            .iter()
            .map(|(i, _)| *i)
            .chain(reprocess.iter().copied())
            .collect();
        let stage2: Vec<_> = targets.par_iter().map(|&k| self.stage2_of(k)).collect();
        for (&k, (saliency, ellipsoid, r)) in targets.iter().zip(stage2) {
            let p = &mut self.points[k as usize];
            p.saliency = Some(saliency);
            p.ellipsoid = ellipsoid;
            p.ellipsoid_radius = r;
        }

        UpdateSummary {
            processed_new: processed.into_iter().map(|(i, _)| i).collect(),
            reprocessed: reprocess,
        }
    }

    /// Dominant-primitive histogram over all map points.
    pub fn primitive_counts(&self) -> PrimitiveCounts {
        let mut c = PrimitiveCounts::default();
        for p in &self.points {
            match p.ellipsoid.map(|e| e.saliency.dominant()) {
                Some(Primitive::Line) => c.line += 1,
                Some(Primitive::Plane) => c.plane += 1,
                Some(Primitive::Ball) => c.ball += 1,
                None => c.none += 1,
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sensor() -> SensorModel {
        SensorModel::new(0.7854, 64, 100, 0.1).unwrap()
    }

    fn in_bin(bin: usize, pts: Vec<Vec3>) -> Vec<Vec<Vec3>> {
        let mut bins = vec![Vec::new(); bin + 1];
        bins[bin] = pts;
        bins
    }

    #[test]
    fn cap_examples() {
        assert_eq!(per_bin_cap(0.1, 1.0, 6), 1);
        assert_eq!(per_bin_cap(0.1, 0.12467, 6), 6);
        assert_eq!(per_bin_cap(0.1, 1e-3, 6), 6);
        let raw = 10.0 * 6.0 * 0.01 / (std::f64::consts::PI * 0.12467f64.powi(2));
        assert_eq!(raw.ceil(), 13.0);
    }

    #[test]
    fn neighbor_minimum_examples() {
        assert_eq!(min_neighbors(&BinStats::default(), 6), 6.0);
        let s = BinStats { neighbor_total: 52, points: 5 };
        assert_relative_eq!(min_neighbors(&s, 6), 10.4);
        let s = BinStats { neighbor_total: 9, points: 3 };
        assert_eq!(min_neighbors(&s, 6), 6.0);
        assert_eq!(max_neighbors(10.4, 60), 20);
        assert_eq!(max_neighbors(45.0, 60), 60);
    }

    #[test]
    fn search_radius_is_capped() {
        let s = sensor();
        assert_relative_eq!(search_radius(0, &s), 10.0 * 0.7854 / 63.0);
        assert_eq!(search_radius(20, &s), 1.0);
    }

    #[test]
    fn empty_and_first_insertions() {
        let mut map = GlobalMap::new(MapConfig::default(), sensor());
        let (added, _) = map.update(&[], 0.0, 0.0);
        assert!(added.is_empty() && map.is_empty());
        let pts: Vec<Vec3> = (0..20).map(|i| Vec3::new(5.0 + 0.3 * i as f64, 0.0, 0.0)).collect();
        let added = map.insert(&in_bin(5, pts.clone()), 0.0, 0.0);
        assert_eq!(added.len(), pts.len());
        // identical scan again, cap 1 in bin 10 and higher
        let far: Vec<Vec3> = (0..20).map(|i| Vec3::new(12.0, 0.3 * i as f64, 0.0)).collect();
        let first = map.insert(&in_bin(10, far.clone()), 0.0, 0.0);
        assert_eq!(map.per_bin_cap(10), 1);
        assert_eq!(first.len(), far.len());
        assert!(map.insert(&in_bin(10, far), 0.1, 0.0).is_empty());
    }

    #[test]
    fn isolated_point_gets_no_ellipsoid() {
        let mut map = GlobalMap::new(MapConfig::default(), sensor());
        let (added, summary) = map.update(&in_bin(3, vec![Vec3::new(3.5, 0.0, 0.0)]), 0.0, 0.0);
        assert_eq!(added.len(), 1);
        assert!(summary.processed_new.is_empty());
        assert!(map.point(0).ellipsoid.is_none());
    }

    fn plane_patch(n: usize, spacing: f64, origin: Vec3) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                // slight jitter keeps the in-plane spectrum non-degenerate
                let jx = ((i * 7 + j * 13) % 5) as f64 * 0.002;
                let jy = ((i * 11 + j * 3) % 7) as f64 * 0.002;
                pts.push(origin + Vec3::new(i as f64 * spacing + jx, j as f64 * spacing + jy, 0.0));
            }
        }
        pts
    }

    #[test]
    fn coplanar_batch_is_plane_dominant() {
        let mut map = GlobalMap::new(MapConfig::default(), sensor());
        let pts = plane_patch(10, 0.1, Vec3::new(10.05, 0.05, 0.05));
        let bin = 3;
        let (added, _) = map.update(&in_bin(bin, pts), 0.0, 0.0);
        assert_eq!(added.len(), 100);
        let interior: Vec<&MapPoint> = map
            .points()
            .iter()
            .filter(|p| {
                let l = p.position - Vec3::new(10.05, 0.05, 0.05);
                l.x > 0.15 && l.x < 0.75 && l.y > 0.15 && l.y < 0.75
            })
            .collect();
        let plane = interior
            .iter()
            .filter(|p| p.ellipsoid.is_some_and(|e| e.saliency.strictly_dominant(Primitive::Plane)))
            .count();
        let with = interior.iter().filter(|p| p.saliency.is_some()).count();
        assert!(with > 0);
        assert!(plane as f64 >= 0.9 * with as f64, "{plane}/{with}");
    }

    #[test]
    fn invariants_after_updates() {
        let mut map = GlobalMap::new(MapConfig::default(), sensor());
        for k in 0..4 {
            let pts = plane_patch(12, 0.08, Vec3::new(6.0, 0.02 * k as f64, 0.03 * k as f64));
            map.update(&in_bin(6, pts), k as f64, k as f64);
        }
        for p in map.points() {
            assert!(p.neighbors.len() <= map.config().n_max as usize);
            assert!(p.neighbors.windows(2).all(|w| w[0] < w[1]));
            if let Some(e) = p.ellipsoid {
                assert!(p.stage1.is_some());
                assert!((e.magnitudes.iter().sum::<f64>() - p.ellipsoid_radius).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn update_touches_only_processed_points() {
        let mut map = GlobalMap::new(MapConfig::default(), sensor());
        map.update(&in_bin(6, plane_patch(12, 0.08, Vec3::new(6.0, 0.0, 0.0))), 0.0, 0.0);
        let before: Vec<_> = map.points().iter().map(|p| (p.stage1, p.ellipsoid)).collect();
        let far = plane_patch(6, 0.08, Vec3::new(6.0, 0.6, 0.01));
        let (_, summary) = map.update(&in_bin(6, far), 1.0, 1.0);
        let touched: FxHashSet<PointId> = summary.reprocessed.iter().copied().collect();
        for (id, old) in before.iter().enumerate() {
            if !touched.contains(&(id as PointId)) {
                let p = map.point(id as PointId);
                assert_eq!(&(p.stage1, p.ellipsoid), old);
            }
        }
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let mut map = GlobalMap::new(MapConfig::default(), sensor());
                for k in 0..3 {
                    let pts = plane_patch(10, 0.09, Vec3::new(7.0, 0.05 * k as f64, 0.0));
                    map.update(&in_bin(7, pts), k as f64, 0.0);
                }
                map.points()
                    .iter()
                    .map(|p| (p.neighbors.clone(), p.ellipsoid.map(|e| e.magnitudes)))
                    .collect::<Vec<_>>()
            })
        };
        assert_eq!(run(1), run(3));
    }
}
