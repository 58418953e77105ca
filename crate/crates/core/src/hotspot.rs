//! Density-based hotspot clustering over geodetic coordinates, cluster
//! centres, and sampling of locations away from every hotspot.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::events::AccidentEvent;
use crate::scalar::Scalar;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Label for points that belong to no cluster.
pub const NOISE: i64 = -1;

#[derive(Debug, Error)]
pub enum HotspotError {
    #[error("invalid cluster params: {0}")]
    InvalidParams(String),
    #[error("no events to cluster")]
    EmptyInput,
    #[error("invalid bounding box: {0}")]
    InvalidBbox(String),
    #[error("sampling exhausted: placed {placed} of {requested} points in {attempts} attempts")]
    SamplingExhausted {
        requested: usize,
        placed: usize,
        attempts: usize,
    },
}

impl HotspotError {
    pub fn code(&self) -> &'static str {
        match self {
            HotspotError::InvalidParams(_) => "INVALID_CLUSTER_PARAMS",
            HotspotError::EmptyInput => "EMPTY_INPUT",
            HotspotError::InvalidBbox(_) => "INVALID_BBOX",
            HotspotError::SamplingExhausted { .. } => "SAMPLING_EXHAUSTED",
        }
    }
}

/// Great-circle distance in metres between two points given in degrees.
pub fn haversine<T: Scalar>(lat1: T, lon1: T, lat2: T, lon2: T) -> T {
    let half = T::cast(0.5);
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = (lat2 - lat1).to_radians();
    let dl = (lon2 - lon1).to_radians();
    let a = (dp * half).sin().powi(2) + p1.cos() * p2.cos() * (dl * half).sin().powi(2);
    let a = a.min(T::one()).max(T::zero());
    T::cast(2.0 * EARTH_RADIUS_M) * a.sqrt().asin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub eps_meters: f64,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            eps_meters: 100.0,
            min_samples: 5,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<(), HotspotError> {
        if !(self.eps_meters.is_finite() && self.eps_meters > 0.0) {
            return Err(HotspotError::InvalidParams(format!(
                "eps_meters must be positive, got {}",
                self.eps_meters
            )));
        }
        if self.min_samples == 0 {
            return Err(HotspotError::InvalidParams("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform lat/lon grid whose cells are at least `eps` wide in both axes,
/// so every neighbour of a point lies in the 3x3 block around its cell.
struct Grid {
    lat_cell: f64,
    lon_cell: f64,
    lon_cells: i64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn build<T: Scalar>(points: &[(T, T)], eps: f64) -> Option<Self> {
        let max_abs_lat = points.iter().map(|p| p.0.as_f64().abs()).fold(0.0, f64::max);
        let ang = eps / EARTH_RADIUS_M;
        // Any pair within eps satisfies sin(dlon/2) <= sin(eps/2R) / cos(lat_max).
        let s = (ang / 2.0).sin() / max_abs_lat.to_radians().cos();
        if !(s < 1.0) {
            return None;
        }
        let slack = 1.0 + 1e-9;
        let lat_cell = ang.to_degrees() * slack + 1e-12;
        let lon_bound = (2.0 * s.asin()).to_degrees() * slack + 1e-12;
        let lon_cells = (360.0 / lon_bound).floor() as i64;
        if lon_cells < 3 {
            return None;
        }
        let lon_cell = 360.0 / lon_cells as f64;
        let mut grid = Self {
            lat_cell,
            lon_cell,
            lon_cells,
            cells: HashMap::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let key = grid.cell(p.0.as_f64(), p.1.as_f64());
            grid.cells.entry(key).or_default().push(i);
        }
        Some(grid)
    }

    fn cell(&self, lat: f64, lon: f64) -> (i64, i64) {
        let r = ((lat + 90.0) / self.lat_cell).floor() as i64;
        let c = (((lon + 180.0) / self.lon_cell).floor() as i64).rem_euclid(self.lon_cells);
        (r, c)
    }

    fn candidates(&self, lat: f64, lon: f64) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = self.cell(lat, lon);
        let mut cols = vec![(c - 1).rem_euclid(self.lon_cells), c, (c + 1).rem_euclid(self.lon_cells)];
        cols.dedup();
        (r - 1..=r + 1)
            .flat_map(move |rr| cols.clone().into_iter().map(move |cc| (rr, cc)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
    }
}

fn neighbourhoods<T: Scalar>(points: &[(T, T)], eps: f64) -> Vec<Vec<usize>> {
    let eps_t = T::cast(eps);
    let within = |i: usize, j: usize| haversine(points[i].0, points[i].1, points[j].0, points[j].1) <= eps_t;
    match Grid::build(points, eps) {
        Some(grid) => (0..points.len())
            .into_par_iter()
            .map(|i| {
                let mut n: Vec<usize> = grid
                    .candidates(points[i].0.as_f64(), points[i].1.as_f64())
                    .filter(|&j| within(i, j))
                    .collect();
                n.sort_unstable();
                n
            })
            .collect(),
        None => (0..points.len())
            .into_par_iter()
            .map(|i| (0..points.len()).filter(|&j| within(i, j)).collect())
            .collect(),
    }
}

/// DBSCAN over `(lat, lon)` points in degrees under haversine distance.
///
/// Neighbourhoods are inclusive (`<= eps`) and count the point itself.
/// Clusters are numbered in order of their first core point; a border point
/// reachable from several clusters joins the one that reaches it first.
pub fn dbscan_points<T: Scalar>(points: &[(T, T)], params: &ClusterParams) -> Result<Vec<i64>, HotspotError> {
    params.validate()?;
    if points.is_empty() {
        return Err(HotspotError::EmptyInput);
    }
    let neighbours = neighbourhoods(points, params.eps_meters);
    let is_core: Vec<bool> = neighbours.iter().map(|n| n.len() >= params.min_samples).collect();

    const UNSEEN: i64 = -2;
    let mut labels = vec![UNSEEN; points.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for i in 0..points.len() {
        if labels[i] != UNSEEN {
            continue;
        }
        if !is_core[i] {
            labels[i] = NOISE;
            continue;
        }
        labels[i] = next;
        queue.push_back(i);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                match labels[q] {
                    UNSEEN => {
                        labels[q] = next;
                        if is_core[q] {
                            queue.push_back(q);
                        }
                    }
                    NOISE => labels[q] = next,
                    _ => {}
                }
            }
        }
        next += 1;
    }
    Ok(labels)
}

pub fn dbscan(events: &[AccidentEvent], params: &ClusterParams) -> Result<Vec<i64>, HotspotError> {
    let points: Vec<(f64, f64)> = events.iter().map(|e| (e.latitude, e.longitude)).collect();
    dbscan_points(&points, params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotspotCluster {
    pub cluster_id: u32,
    pub member_ids: Vec<String>,
    pub center_latitude: f64,
    pub center_longitude: f64,
    /// Largest member distance from the centre, in metres.
    pub radius_meters: Option<f64>,
}

impl HotspotCluster {
    pub fn member_count(&self) -> usize {
        self.member_ids.len()
    }
}

/// One cluster per non-noise label, ordered by cluster id, centred on the
/// unweighted mean of member coordinates.
///
/// A cluster normally has at least `min_samples` members, but a core point
/// whose border neighbours were already claimed by an earlier cluster can
/// leave a smaller one.
pub fn cluster_centers(events: &[AccidentEvent], labels: &[i64]) -> Vec<HotspotCluster> {
    assert_eq!(events.len(), labels.len(), "labels must match events");
    let mut groups: Vec<Vec<&AccidentEvent>> = Vec::new();
    for (e, &l) in events.iter().zip(labels) {
        if l < 0 {
            continue;
        }
        let l = l as usize;
        if groups.len() <= l {
            groups.resize_with(l + 1, Vec::new);
        }
        groups[l].push(e);
    }
    groups
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(id, members)| {
            let n = members.len() as f64;
            let lat = members.iter().map(|e| e.latitude).sum::<f64>() / n;
            let lon = members.iter().map(|e| e.longitude).sum::<f64>() / n;
            let radius = members
                .iter()
                .map(|e| haversine(lat, lon, e.latitude, e.longitude))
                .fold(0.0, f64::max);
            HotspotCluster {
                cluster_id: id as u32,
                member_ids: members.iter().map(|e| e.event_id.clone()).collect(),
                center_latitude: lat,
                center_longitude: lon,
                radius_meters: Some(radius),
            }
        })
        .collect()
}

pub fn clusters_to_geojson(clusters: &[HotspotCluster]) -> serde_json::Value {
    let features: Vec<_> = clusters
        .iter()
        .map(|c| {
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [c.center_longitude, c.center_latitude]},
                "properties": {
                    "cluster_id": c.cluster_id,
                    "member_count": c.member_count(),
                    "member_ids": c.member_ids,
                    "radius_meters": c.radius_meters,
                },
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

pub fn clusters_to_csv(clusters: &[HotspotCluster]) -> String {
    let mut out = String::from("cluster_id,lat,lon,count\n");
    for c in clusters {
        let _ = writeln!(out, "{},{},{},{}", c.cluster_id, c.center_latitude, c.center_longitude, c.member_count());
    }
    out
}

/// Parses a cluster GeoJSON file written by [`clusters_to_geojson`].
pub fn clusters_from_geojson(value: &serde_json::Value) -> Option<Vec<HotspotCluster>> {
    value["features"]
        .as_array()?
        .iter()
        .map(|f| {
            let coords = f["geometry"]["coordinates"].as_array()?;
            let props = &f["properties"];
            Some(HotspotCluster {
                cluster_id: props["cluster_id"].as_u64()? as u32,
                member_ids: serde_json::from_value(props["member_ids"].clone()).ok()?,
                center_latitude: coords.get(1)?.as_f64()?,
                center_longitude: coords.first()?.as_f64()?,
                radius_meters: props["radius_meters"].as_f64(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<(), HotspotError> {
        let ok = self.min_lat < self.max_lat
            && self.min_lon < self.max_lon
            && self.min_lat >= -90.0
            && self.max_lat <= 90.0
            && self.min_lon >= -180.0
            && self.max_lon <= 180.0;
        if ok {
            Ok(())
        } else {
            Err(HotspotError::InvalidBbox(format!("{self:?}")))
        }
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.min_lat..=self.max_lat).contains(&lat) && (self.min_lon..=self.max_lon).contains(&lon)
    }
}

/// Default rejection-sampling budget per requested point.
pub const ATTEMPTS_PER_POINT: usize = 1000;

pub fn sample_non_hotspots(
    bbox: &BoundingBox,
    clusters: &[HotspotCluster],
    n: usize,
    min_distance_meters: f64,
    rng_seed: u64,
) -> Result<Vec<(f64, f64)>, HotspotError> {
    let budget = n.saturating_mul(ATTEMPTS_PER_POINT);
    sample_non_hotspots_with_budget(bbox, clusters, n, min_distance_meters, rng_seed, budget)
}

/// Rejection-samples `n` points uniform in `bbox` (in degrees) that keep at
/// least `min_distance_meters` from every cluster centre.
pub fn sample_non_hotspots_with_budget(
    bbox: &BoundingBox,
    clusters: &[HotspotCluster],
    n: usize,
    min_distance_meters: f64,
    rng_seed: u64,
    max_attempts: usize,
) -> Result<Vec<(f64, f64)>, HotspotError> {
    bbox.validate()?;
    if !(min_distance_meters.is_finite() && min_distance_meters > 0.0) {
        return Err(HotspotError::InvalidParams(format!(
            "min_distance_meters must be positive, got {min_distance_meters}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts >= max_attempts {
            return Err(HotspotError::SamplingExhausted {
                requested: n,
                placed: out.len(),
                attempts,
            });
        }
        attempts += 1;
        let lat = rng.gen_range(bbox.min_lat..bbox.max_lat);
        let lon = rng.gen_range(bbox.min_lon..bbox.max_lon);
        let clear = clusters
            .iter()
            .all(|c| haversine(lat, lon, c.center_latitude, c.center_longitude) >= min_distance_meters);
        if clear {
            out.push((lat, lon));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn ev(id: &str, lat: f64, lon: f64) -> AccidentEvent {
        AccidentEvent {
            event_id: id.into(),
            latitude: lat,
            longitude: lon,
            timestamp: None,
            attributes: Default::default(),
        }
    }

    /// Textbook DBSCAN over the full pairwise distance matrix.
    fn reference(points: &[(f64, f64)], eps: f64, min_samples: usize) -> (Vec<bool>, Vec<Vec<bool>>) {
        let n = points.len();
        let adj: Vec<Vec<bool>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let (a, b) = (points[i], points[j]);
                        let (p1, p2) = (a.0.to_radians(), b.0.to_radians());
                        let h = ((p2 - p1) / 2.0).sin().powi(2)
                            + p1.cos() * p2.cos() * ((b.1 - a.1).to_radians() / 2.0).sin().powi(2);
                        2.0 * EARTH_RADIUS_M * h.min(1.0).sqrt().asin() <= eps
                    })
                    .collect()
            })
            .collect();
        let core = adj.iter().map(|r| r.iter().filter(|&&x| x).count() >= min_samples).collect();
        (core, adj)
    }

    /// Checks labels against the reference: core points partition exactly
    /// by core-core connectivity, border points join a cluster of one of
    /// their core neighbours, and everything else is noise.
    fn assert_matches_reference(points: &[(f64, f64)], labels: &[i64], eps: f64, min_samples: usize) {
        let (core, adj) = reference(points, eps, min_samples);
        let n = points.len();
        let mut comp = vec![usize::MAX; n];
        for s in 0..n {
            if !core[s] || comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = s;
            while let Some(p) = stack.pop() {
                for q in 0..n {
                    if core[q] && adj[p][q] && comp[q] == usize::MAX {
                        comp[q] = s;
                        stack.push(q);
                    }
                }
            }
        }
        let mut comp_to_label = HashMap::new();
        let mut label_to_comp = HashMap::new();
        for i in (0..n).filter(|&i| core[i]) {
            assert!(labels[i] >= 0, "core point {i} labelled noise");
            assert_eq!(*comp_to_label.entry(comp[i]).or_insert(labels[i]), labels[i]);
            assert_eq!(*label_to_comp.entry(labels[i]).or_insert(comp[i]), comp[i]);
        }
        for i in (0..n).filter(|&i| !core[i]) {
            let reachable: BTreeSet<i64> = (0..n).filter(|&j| core[j] && adj[i][j]).map(|j| comp_to_label[&comp[j]]).collect();
            if reachable.is_empty() {
                assert_eq!(labels[i], NOISE, "point {i} should be noise");
            } else {
                assert!(reachable.contains(&labels[i]), "border point {i} in wrong cluster");
            }
        }
    }

    fn blobs() -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        let m = 1.0 / 111_195.0;
        for k in 0..8 {
            pts.push((40.7 + (k % 3) as f64 * 2.0 * m, -73.9 + (k / 3) as f64 * 2.0 * m));
        }
        for k in 0..8 {
            pts.push((40.709 + (k % 3) as f64 * 2.0 * m, -73.9 + (k / 3) as f64 * 2.0 * m));
        }
        pts.extend([(40.72, -73.95), (40.68, -73.85), (40.75, -73.9), (40.70, -73.80)]);
        pts
    }

    #[test]
    fn haversine_known_distance() {
        // One degree of latitude on the mean sphere.
        assert_relative_eq!(haversine(0.0, 0.0, 1.0, 0.0), EARTH_RADIUS_M.to_radians(), max_relative = 1e-12);
        assert_eq!(haversine(40.0, -74.0, 40.0, -74.0), 0.0);
        assert_relative_eq!(haversine(0.0, 179.9, 0.0, -179.9), haversine(0.0, 0.0, 0.0, 0.2), max_relative = 1e-9);
        let f32d = haversine(40.0f32, -74.0, 40.001, -74.0);
        assert_relative_eq!(f32d as f64, 111.195, epsilon = 0.5);
    }

    #[test]
    fn singleton_is_own_core() {
        let p = ClusterParams { eps_meters: 10.0, min_samples: 1 };
        assert_eq!(dbscan(&[ev("a", 1.0, 1.0)], &p).unwrap(), vec![0]);
    }

    #[test]
    fn two_blobs_and_noise() {
        let pts = blobs();
        let p = ClusterParams { eps_meters: 50.0, min_samples: 4 };
        let labels = dbscan_points(&pts, &p).unwrap();
        assert_matches_reference(&pts, &labels, 50.0, 4);
        assert_eq!(labels.iter().filter(|&&l| l == NOISE).count(), 4);
        assert_eq!(labels.iter().copied().max(), Some(1));
        assert!(labels[..8].iter().all(|&l| l == labels[0]));
        assert!(labels[8..16].iter().all(|&l| l == labels[8]));
        assert_ne!(labels[0], labels[8]);
    }

    #[test]
    fn far_apart_points_are_noise() {
        let pts = [(0.0, 0.0), (0.01, 0.0), (0.0, 0.01)];
        let p = ClusterParams { eps_meters: 100.0, min_samples: 2 };
        assert_eq!(dbscan_points(&pts, &p).unwrap(), vec![-1, -1, -1]);
    }

    #[test]
    fn antimeridian_neighbours_use_wrapped_grid() {
        let pts = [(10.0, 179.9999), (10.0, -179.9999), (10.0, 180.0), (10.001, 0.0)];
        assert!(Grid::build(&pts, 30.0).is_some());
        let p = ClusterParams { eps_meters: 30.0, min_samples: 2 };
        let labels = dbscan_points(&pts, &p).unwrap();
        assert_matches_reference(&pts, &labels, 30.0, 2);
        assert_eq!(labels, vec![0, 0, 0, NOISE]);
    }

    #[test]
    fn polar_points_fall_back_to_brute_force() {
        let pts = [(89.99995, 0.0), (89.99995, 180.0), (0.0, 0.0)];
        assert!(Grid::build(&pts, 30.0).is_none());
        let labels = dbscan_points(&pts, &ClusterParams { eps_meters: 30.0, min_samples: 2 }).unwrap();
        assert_eq!(labels, vec![0, 0, NOISE]);
    }

    #[test]
    fn invalid_params_rejected() {
        let pts = [(0.0, 0.0)];
        assert!(dbscan_points(&pts, &ClusterParams { eps_meters: 0.0, min_samples: 1 }).is_err());
        assert!(dbscan_points(&pts, &ClusterParams { eps_meters: 1.0, min_samples: 0 }).is_err());
        assert!(matches!(dbscan_points::<f64>(&[], &ClusterParams::default()), Err(HotspotError::EmptyInput)));
    }

    #[test]
    fn midpoint_center() {
        let events = [ev("a", 40.0, -74.0), ev("b", 40.2, -74.2)];
        let c = cluster_centers(&events, &[0, 0]);
        assert_eq!(c.len(), 1);
        assert_relative_eq!(c[0].center_latitude, 40.1, epsilon = 1e-12);
        assert_relative_eq!(c[0].center_longitude, -74.1, epsilon = 1e-12);
        assert!(cluster_centers(&events, &[-1, -1]).is_empty());
    }

    #[test]
    fn five_member_center_by_hand() {
        let coords = [
            (40.7128, -74.0060),
            (40.7130, -74.0055),
            (40.7125, -74.0062),
            (40.7131, -74.0058),
            (40.7126, -74.0065),
        ];
        let events: Vec<_> = coords.iter().enumerate().map(|(i, c)| ev(&i.to_string(), c.0, c.1)).collect();
        let c = &cluster_centers(&events, &[0; 5])[0];
        // (40.7128+40.7130+40.7125+40.7131+40.7126)/5 = 203.5640/5
        assert!((c.center_latitude - 40.7128).abs() < 1e-9);
        // (-74.0060-74.0055-74.0062-74.0058-74.0065)/5 = -370.0300/5
        assert!((c.center_longitude - -74.0060).abs() < 1e-9);
        assert_eq!(c.member_count(), 5);
        assert!(c.radius_meters.unwrap() > 0.0);
    }

    #[test]
    fn outputs_round_trip() {
        let events = [ev("a", 40.0, -74.0), ev("b", 40.2, -74.2), ev("c", 41.0, -73.0)];
        let clusters = cluster_centers(&events, &[0, 0, -1]);
        let gj = clusters_to_geojson(&clusters);
        assert_eq!(gj["features"][0]["properties"]["member_count"], 2);
        assert_eq!(clusters_from_geojson(&gj).unwrap(), clusters);
        let csv = clusters_to_csv(&clusters);
        assert!(csv.starts_with("cluster_id,lat,lon,count\n0,"));
        assert!(csv.trim_end().ends_with(",2"));
    }

    fn bbox() -> BoundingBox {
        BoundingBox { min_lat: 40.6, min_lon: -74.05, max_lat: 40.8, max_lon: -73.85 }
    }

    #[test]
    fn sampling_without_clusters() {
        assert!(sample_non_hotspots(&bbox(), &[], 0, 10.0, 1).unwrap().is_empty());
        let a = sample_non_hotspots(&bbox(), &[], 10, 10.0, 7).unwrap();
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|p| bbox().contains(p.0, p.1)));
        assert_eq!(a, sample_non_hotspots(&bbox(), &[], 10, 10.0, 7).unwrap());
        assert_ne!(a, sample_non_hotspots(&bbox(), &[], 10, 10.0, 8).unwrap());
    }

    #[test]
    fn sampling_respects_exclusion_disk() {
        let center = HotspotCluster {
            cluster_id: 0,
            member_ids: vec![],
            center_latitude: 40.7,
            center_longitude: -73.95,
            radius_meters: None,
        };
        let pts = sample_non_hotspots(&bbox(), std::slice::from_ref(&center), 200, 7000.0, 3).unwrap();
        for (lat, lon) in pts {
            assert!(haversine(lat, lon, 40.7, -73.95) >= 7000.0);
        }
        let err = sample_non_hotspots_with_budget(&bbox(), &[center], 5, 50_000.0, 3, 500).unwrap_err();
        assert_eq!(err.code(), "SAMPLING_EXHAUSTED");
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let b = BoundingBox { min_lat: 1.0, min_lon: 0.0, max_lat: 1.0, max_lon: 1.0 };
        assert!(matches!(sample_non_hotspots(&b, &[], 1, 1.0, 0), Err(HotspotError::InvalidBbox(_))));
    }

    fn clustered_points() -> impl Strategy<Value = Vec<(f64, f64)>> {
        // A few dense seeds plus scatter, within a ~2 km box so eps matters.
        (prop::collection::vec((-0.01f64..0.01, -0.01f64..0.01), 1..6), prop::collection::vec((0usize..6, -0.0006f64..0.0006, -0.0006f64..0.0006), 1..200))
            .prop_map(|(seeds, offs)| {
                offs.into_iter()
                    .map(|(s, dl, dn)| {
                        let (a, b) = seeds[s % seeds.len()];
                        (40.7 + a + dl, -73.9 + b + dn)
                    })
                    .collect()
            })
    }

    fn partition(labels: &[i64], keep: &[bool]) -> BTreeSet<BTreeSet<usize>> {
        let mut groups: HashMap<i64, BTreeSet<usize>> = HashMap::new();
        for (i, &l) in labels.iter().enumerate() {
            if keep[i] {
                groups.entry(l).or_default().insert(i);
            }
        }
        groups.into_values().collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn matches_brute_force(pts in clustered_points(), eps in 5.0f64..120.0, min_samples in 1usize..8) {
            let p = ClusterParams { eps_meters: eps, min_samples };
            let labels = dbscan_points(&pts, &p).unwrap();
            assert_matches_reference(&pts, &labels, eps, min_samples);
        }

        #[test]
        fn core_membership_is_permutation_stable(pts in clustered_points(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let p = ClusterParams { eps_meters: 40.0, min_samples: 4 };
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<_> = order.iter().map(|&i| pts[i]).collect();
            let a = dbscan_points(&pts, &p).unwrap();
            let b_shuffled = dbscan_points(&shuffled, &p).unwrap();
            let mut b = vec![0; pts.len()];
            for (k, &i) in order.iter().enumerate() {
                b[i] = b_shuffled[k];
            }
            let (core, _) = reference(&pts, 40.0, 4);
            prop_assert_eq!(partition(&a, &core), partition(&b, &core));
            let noise_a: Vec<bool> = a.iter().map(|&l| l == NOISE).collect();
            let noise_b: Vec<bool> = b.iter().map(|&l| l == NOISE).collect();
            prop_assert_eq!(noise_a, noise_b);
        }

        #[test]
        fn centers_lie_in_member_bbox(pts in clustered_points()) {
            let events: Vec<_> = pts.iter().enumerate().map(|(i, p)| ev(&i.to_string(), p.0, p.1)).collect();
            let labels = dbscan(&events, &ClusterParams { eps_meters: 60.0, min_samples: 3 }).unwrap();
            for c in cluster_centers(&events, &labels) {
                prop_assert!(c.member_count() >= 1);
                let members: Vec<_> = events.iter().filter(|e| c.member_ids.contains(&e.event_id)).collect();
                let lo = members.iter().map(|e| e.latitude).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|e| e.latitude).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.center_latitude >= lo - 1e-12 && c.center_latitude <= hi + 1e-12);
                let lo = members.iter().map(|e| e.longitude).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|e| e.longitude).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(c.center_longitude >= lo - 1e-12 && c.center_longitude <= hi + 1e-12);
            }
        }
    }
}
