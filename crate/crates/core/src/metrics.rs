//! Overlap, surface-distance and component metrics on binary 3D masks.
//!
//! Surfaces are foreground voxels with a 6-neighbour in the background or on
//! the volume border. Distances are Euclidean in physical units (voxel index
//! times spacing). Components use 26-connectivity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(z, y, x)` voxel size in micrometres.
pub const DEFAULT_SPACING: [f64; 3] = [0.29, 0.1083, 0.1083];

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub shape: [usize; 3],
    pub voxels: Vec<bool>,
    pub spacing: [f64; 3],
}

impl BinaryMask {
    pub fn new(shape: [usize; 3], voxels: Vec<bool>, spacing: [f64; 3]) -> Result<Self> {
        if voxels.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(
                "BinaryMask",
                format!("{} voxels for shape {:?}", voxels.len(), shape),
            ));
        }
        Ok(Self { shape, voxels, spacing })
    }

    /// Values must be exactly 0 or 1.
    pub fn from_values(shape: [usize; 3], values: &[f64], spacing: [f64; 3]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("mask value {v} is not 0 or 1")));
        }
        Self::new(shape, values.iter().map(|&v| v == 1.0).collect(), spacing)
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.shape;
        [i / (h * w), (i / w) % h, i % w]
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        [c[0] as f64 * self.spacing[0], c[1] as f64 * self.spacing[1], c[2] as f64 * self.spacing[2]]
    }

    /// Indices of surface voxels.
    pub fn surface(&self) -> Vec<usize> {
        let [d, h, w] = self.shape;
        (0..self.voxels.len())
            .filter(|&i| {
                if !self.voxels[i] {
                    return false;
                }
                let [z, y, x] = self.coords(i);
                if z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w {
                    return true;
                }
                let plane = h * w;
                [i - plane, i + plane, i - w, i + w, i - 1, i + 1].iter().any(|&j| !self.voxels[j])
            })
            .collect()
    }

    pub fn surface_points(&self) -> Vec<[f64; 3]> {
        self.surface().into_iter().map(|i| self.point(i)).collect()
    }
}

fn check_pair(p: &BinaryMask, r: &BinaryMask) -> Result<()> {
    if p.shape != r.shape {
        return Err(Error::shape("metrics", format!("pred {:?} vs ref {:?}", p.shape, r.shape)));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
}

pub fn overlap_metrics(p: &BinaryMask, r: &BinaryMask) -> Result<Overlap> {
    check_pair(p, r)?;
    let (mut inter, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.voxels.iter().zip(&r.voxels) {
        inter += (a && b) as usize;
        np += a as usize;
        nr += b as usize;
    }
    if np == 0 && nr == 0 {
        return Ok(Overlap { dice: 1.0, iou: 1.0, precision: 1.0 });
    }
    let union = np + nr - inter;
    Ok(Overlap {
        dice: 2.0 * inter as f64 / (np + nr) as f64,
        iou: inter as f64 / union as f64,
        precision: if np == 0 { 0.0 } else { inter as f64 / np as f64 },
    })
}

/// Static 3-d tree for exact nearest-neighbour queries.
pub struct KdTree {
    points: Vec<[f64; 3]>,
    // implicit tree: node = median of its slice, split axis = depth % 3
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

impl KdTree {
    pub fn new(mut points: Vec<[f64; 3]>) -> Self {
        fn build(pts: &mut [[f64; 3]], depth: usize) {
            if pts.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = pts.len() / 2;
            pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
            let (lo, hi) = pts.split_at_mut(mid);
            build(lo, depth + 1);
            build(&mut hi[1..], depth + 1);
        }
        build(&mut points, 0);
        Self { points }
    }

    /// Euclidean distance to the nearest point (infinite when empty).
    pub fn nearest(&self, q: &[f64; 3]) -> f64 {
        fn search(pts: &[[f64; 3]], depth: usize, q: &[f64; 3], best: &mut f64) {
            if pts.is_empty() {
                return;
            }
            let mid = pts.len() / 2;
            let axis = depth % 3;
            let d = dist2(&pts[mid], q);
            if d < *best {
                *best = d;
            }
            let delta = q[axis] - pts[mid][axis];
            let (near, far) = if delta < 0.0 {
                (&pts[..mid], &pts[mid + 1..])
            } else {
                (&pts[mid + 1..], &pts[..mid])
            };
            search(near, depth + 1, q, best);
            if delta * delta <= *best {
                search(far, depth + 1, q, best);
            }
        }
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best.sqrt()
    }
}

pub fn directed_distances(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree = KdTree::new(to.to_vec());
    from.iter().map(|q| tree.nearest(q)).collect()
}

/// Nearest-rank percentile (`q` in `(0, 100]`) of an unsorted list.
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceDistances {
    pub hausdorff: f64,
    pub hd95: f64,
    pub asd: f64,
}

pub fn surface_from_directed(ab: &[f64], ba: &[f64]) -> SurfaceDistances {
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    SurfaceDistances {
        hausdorff: max(ab).max(max(ba)),
        hd95: percentile_nearest_rank(ab, 95.0).max(percentile_nearest_rank(ba, 95.0)),
        asd: 0.5 * (mean(ab) + mean(ba)),
    }
}

pub fn surface_distances(p: &BinaryMask, r: &BinaryMask) -> Result<SurfaceDistances> {
    check_pair(p, r)?;
    if p.count() == 0 || r.count() == 0 {
        return Err(Error::UndefinedMetric("surface distance needs two nonempty masks".into()));
    }
    let (sp, sr) = (p.surface_points(), r.surface_points());
    Ok(surface_from_directed(&directed_distances(&sp, &sr), &directed_distances(&sr, &sp)))
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Number of 26-connected foreground components.
pub fn count_components(m: &BinaryMask) -> usize {
    let [d, h, w] = m.shape;
    let mut uf = UnionFind::new(m.voxels.len());
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                if !m.voxels[i] {
                    continue;
                }
                // half of the 26 neighbours: those earlier in raster order
                for dz in -1i64..=0 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if dz == 0 && (dy > 0 || (dy == 0 && dx >= 0)) {
                                continue;
                            }
                            let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
                            if nz < 0 || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                                continue;
                            }
                            let j = idx(nz as usize, ny as usize, nx as usize);
                            if m.voxels[j] {
                                uf.union(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    (0..m.voxels.len()).filter(|&i| m.voxels[i] && uf.find(i) == i).count()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeComponents {
    /// `None` when the reference is empty.
    pub rel_volume_error: Option<f64>,
    pub component_count_error: usize,
}

pub fn volume_and_components(p: &BinaryMask, r: &BinaryMask) -> Result<VolumeComponents> {
    check_pair(p, r)?;
    let (np, nr) = (p.count() as f64, r.count() as f64);
    Ok(VolumeComponents {
        rel_volume_error: (nr > 0.0).then(|| 100.0 * (np - nr).abs() / nr),
        component_count_error: count_components(p).abs_diff(count_components(r)),
    })
}

/// Flat report; undefined entries serialise as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub hausdorff: Option<f64>,
    pub hd95: Option<f64>,
    pub rel_volume_error: Option<f64>,
    pub avg_surface_dist: Option<f64>,
    pub component_count_error: f64,
}

pub fn evaluate(p: &BinaryMask, r: &BinaryMask) -> Result<MetricReport> {
    let o = overlap_metrics(p, r)?;
    let s = match surface_distances(p, r) {
        Ok(s) => Some(s),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let v = volume_and_components(p, r)?;
    Ok(MetricReport {
        dice: o.dice,
        iou: o.iou,
        precision: o.precision,
        hausdorff: s.map(|s| s.hausdorff),
        hd95: s.map(|s| s.hd95),
        avg_surface_dist: s.map(|s| s.asd),
        rel_volume_error: v.rel_volume_error,
        component_count_error: v.component_count_error as f64,
    })
}

/// Mean of each field over the reports where it is defined.
pub fn mean_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let mean = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Some(MetricReport {
        dice: mean(&|r| Some(r.dice))?,
        iou: mean(&|r| Some(r.iou))?,
        precision: mean(&|r| Some(r.precision))?,
        hausdorff: mean(&|r| r.hausdorff),
        hd95: mean(&|r| r.hd95),
        rel_volume_error: mean(&|r| r.rel_volume_error),
        avg_surface_dist: mean(&|r| r.avg_surface_dist),
        component_count_error: mean(&|r| Some(r.component_count_error))?,
    })
}
