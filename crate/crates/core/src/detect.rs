//! Grid-point detection: binarize a probability map, thin it, find junctions,
//! collapse small loops ("opened" crossings) to their centers and merge
//! near-duplicates. The classical baseline feeds the same tail from an
//! adaptive threshold instead of the network.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{read_json, write_json, BinaryImage, Gray, Point, NEIGHBORS8};
use crate::label::{binarize, crossing_number, preprocess, skeletonize, AdaptiveThreshold};

pub type ProbMap = Array2<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Junction,
    OpenedGridCenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePointSet {
    pub source: String,
    pub points: Vec<Point>,
    pub provenance: Vec<Provenance>,
}

impl FeaturePointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let s: FeaturePointSet = read_json(path.as_ref())?;
        if s.points.len() != s.provenance.len() {
            return Err(invalid(format!(
                "{} points but {} provenance entries",
                s.points.len(),
                s.provenance.len()
            )));
        }
        Ok(s)
    }

    pub fn min_pairwise_distance(&self) -> Option<f64> {
        let p = &self.points;
        let mut best: Option<f64> = None;
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let d = p[i].dist(&p[j]);
                best = Some(best.map_or(d, |b| b.min(d)));
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub threshold: f32,
    /// Spurs with fewer pixels than this are pruned before junction search.
    pub min_spur: usize,
    /// A junction needs at least three branches of this many pixels.
    pub min_branch: usize,
    /// Loops with a perimeter up to this many pixels are opened crossings.
    pub cycle_max: usize,
    pub merge_radius: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_spur: 3,
            min_branch: 3,
            cycle_max: 24,
            merge_radius: 3.0,
        }
    }
}

/// Foreground iff `prob > threshold`.
pub fn binarize_prediction(prob: &ProbMap, threshold: f32) -> BinaryImage {
    BinaryImage::from_array(prob.mapv(|p| u8::from(p > threshold)))
}

pub fn thin_prediction(binary: &BinaryImage) -> BinaryImage {
    skeletonize(binary)
}

type Px = (usize, usize);

fn nbrs(img: &BinaryImage, (x, y): Px) -> impl Iterator<Item = Px> + '_ {
    NEIGHBORS8.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
        img.get(nx, ny).then_some((nx as usize, ny as usize))
    })
}

fn is_branch_pixel(img: &BinaryImage, (x, y): Px) -> bool {
    crossing_number(&img.neighbors(x, y)) >= 3
}

/// Clusters of a pixel set under 8-adjacency, each sorted, in first-pixel order.
fn clusters8(pixels: &BTreeSet<Px>) -> Vec<Vec<Px>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &p in pixels {
        if !seen.insert(p) {
            continue;
        }
        let mut comp = vec![p];
        let mut stack = vec![p];
        while let Some((x, y)) = stack.pop() {
            for &(dx, dy) in &NEIGHBORS8 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 {
                    continue;
                }
                let q = (nx as usize, ny as usize);
                if pixels.contains(&q) && seen.insert(q) {
                    comp.push(q);
                    stack.push(q);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

fn centroid(px: &[Px]) -> Point {
    let n = px.len() as f64;
    let (sx, sy) = px.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
    Point::new(sx / n, sy / n)
}

/// Removes dead-end fragments shorter than `min_spur` that hang off a
/// branch pixel. Repeats until nothing changes.
pub fn prune_spurs(skeleton: &BinaryImage, min_spur: usize) -> BinaryImage {
    let mut img = skeleton.clone();
    if min_spur <= 1 {
        return img;
    }
    loop {
        let tips: Vec<Px> = img.ones().filter(|&(x, y)| crossing_number(&img.neighbors(x, y)) <= 1).collect();
        let mut doomed = Vec::new();
        for tip in tips {
            if let Some(path) = spur_from(&img, tip, min_spur) {
                doomed.extend(path);
            }
        }
        if doomed.is_empty() {
            return img;
        }
        // Removing a spur can turn its hub back into a plain line pixel, so
        // the next round starts from fresh branch pixels.
        for (x, y) in doomed {
            img.set(x, y, false);
        }
    }
}

/// Walks from a tip until the path touches a branch pixel. Returns the walked
/// pixels if that happens within `min_spur - 1` steps.
fn spur_from(img: &BinaryImage, tip: Px, min_spur: usize) -> Option<Vec<Px>> {
    let mut path = vec![tip];
    let mut cur = tip;
    loop {
        if path.len() >= min_spur {
            return None;
        }
        let next: Vec<Px> = nbrs(img, cur).filter(|q| !path.contains(q)).collect();
        if next.iter().any(|&q| is_branch_pixel(img, q)) {
            return Some(path);
        }
        if next.is_empty() {
            return None;
        }
        // On a staircase both the side and the diagonal neighbor are free;
        // the side (4-adjacent) step is the path.
        let side: Vec<Px> = next.iter().copied().filter(|&(x, y)| x == cur.0 || y == cur.1).collect();
        cur = match (next.len(), side.len()) {
            (1, _) => next[0],
            (_, 1) => side[0],
            _ => return None,
        };
        path.push(cur);
    }
}

/// Skeleton with its junction clusters, tips and small loops.
#[derive(Debug, Clone)]
pub struct SkeletonGraph {
    pub skeleton: BinaryImage,
    /// Confirmed junction clusters (pixels with three or more branches).
    pub junctions: Vec<Vec<Px>>,
    pub endpoints: Vec<Px>,
    /// Pixel rings around enclosed background holes, perimeter ≤ `cycle_max`.
    pub cycles: Vec<Vec<Px>>,
}

impl SkeletonGraph {
    pub fn build(skeleton: &BinaryImage, params: &DetectParams) -> Self {
        let skeleton = prune_spurs(skeleton, params.min_spur);
        let raw: BTreeSet<Px> = skeleton.ones().filter(|&p| is_branch_pixel(&skeleton, p)).collect();
        let junctions = clusters8(&raw)
            .into_iter()
            .filter(|c| confirmed_branches(&skeleton, c, &raw, params.min_branch) >= 3)
            .collect();
        let endpoints = skeleton
            .ones()
            .filter(|&(x, y)| crossing_number(&skeleton.neighbors(x, y)) <= 1)
            .collect();
        let cycles = small_cycles(&skeleton, params.cycle_max);
        Self {
            skeleton,
            junctions,
            endpoints,
            cycles,
        }
    }
}

/// Counts the branches leaving `cluster` that either run for `min_len`
/// pixels or reach another branch pixel.
fn confirmed_branches(img: &BinaryImage, cluster: &[Px], branch_px: &BTreeSet<Px>, min_len: usize) -> usize {
    let members: BTreeSet<Px> = cluster.iter().copied().collect();
    let exits: BTreeSet<Px> = cluster.iter().flat_map(|&p| nbrs(img, p)).filter(|q| !members.contains(q)).collect();
    // Exits of one branch are 4-adjacent; distinct branches are not.
    let mut groups: Vec<Vec<Px>> = Vec::new();
    let mut seen = BTreeSet::new();
    for &e in &exits {
        if !seen.insert(e) {
            continue;
        }
        let mut g = vec![e];
        let mut i = 0;
        while i < g.len() {
            let (x, y) = g[i];
            for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 {
                    continue;
                }
                let q = (nx as usize, ny as usize);
                if exits.contains(&q) && seen.insert(q) {
                    g.push(q);
                }
            }
            i += 1;
        }
        groups.push(g);
    }
    let mut count = 0;
    for (gi, g) in groups.iter().enumerate() {
        let mut blocked = members.clone();
        for (gj, other) in groups.iter().enumerate() {
            if gj != gi {
                blocked.extend(other.iter().copied());
            }
        }
        if branch_reaches(img, g, &blocked, branch_px, min_len) {
            count += 1;
        }
    }
    count
}

fn branch_reaches(img: &BinaryImage, start: &[Px], blocked: &BTreeSet<Px>, branch_px: &BTreeSet<Px>, min_len: usize) -> bool {
    let mut dist: BTreeMap<Px, usize> = start.iter().map(|&p| (p, 1)).collect();
    let mut queue: VecDeque<Px> = start.iter().copied().collect();
    while let Some(p) = queue.pop_front() {
        let d = dist[&p];
        if d >= min_len || branch_px.contains(&p) {
            return true;
        }
        for q in nbrs(img, p) {
            if blocked.contains(&q) || dist.contains_key(&q) {
                continue;
            }
            dist.insert(q, d + 1);
            queue.push_back(q);
        }
    }
    false
}

/// Rings of skeleton pixels around 4-connected background holes that do not
/// touch the border, keeping those with perimeter ≤ `cycle_max`.
fn small_cycles(img: &BinaryImage, cycle_max: usize) -> Vec<Vec<Px>> {
    let (w, h) = img.dims();
    let mut label = vec![u32::MAX; w * h];
    let mut out = Vec::new();
    let mut next = 0u32;
    for y0 in 0..h {
        for x0 in 0..w {
            if img.at(x0, y0) || label[y0 * w + x0] != u32::MAX {
                continue;
            }
            let mut hole = vec![(x0, y0)];
            label[y0 * w + x0] = next;
            let mut border = false;
            let mut i = 0;
            while i < hole.len() {
                let (x, y) = hole[i];
                border |= x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                for (dx, dy) in [(0i64, -1i64), (1, 0), (0, 1), (-1, 0)] {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    if !img.at(nx, ny) && label[ny * w + nx] == u32::MAX {
                        label[ny * w + nx] = next;
                        hole.push((nx, ny));
                    }
                }
                i += 1;
            }
            next += 1;
            // A ring around `a` background pixels has at least 2·sqrt(a)·2 pixels.
            if border || hole.len() * 4 > cycle_max * cycle_max {
                continue;
            }
            let ring: BTreeSet<Px> = hole
                .iter()
                .flat_map(|&p| nbrs(img, p))
                .collect();
            if ring.len() <= cycle_max {
                out.push(ring.into_iter().collect());
            }
        }
    }
    out
}

/// Centers of small loops that carry at least two junction clusters. Returns
/// the centers and the indices of the junction clusters they absorb.
pub fn opened_grid_centers(graph: &SkeletonGraph) -> (Vec<Point>, BTreeSet<usize>) {
    let mut centers = Vec::new();
    let mut absorbed = BTreeSet::new();
    for ring in &graph.cycles {
        let on_ring: BTreeSet<Px> = ring.iter().copied().collect();
        let members: Vec<usize> = graph
            .junctions
            .iter()
            .enumerate()
            .filter(|(_, c)| c.iter().any(|p| on_ring.contains(p)))
            .map(|(i, _)| i)
            .collect();
        if members.len() >= 2 {
            centers.push(centroid(ring));
            absorbed.extend(members);
        }
    }
    (centers, absorbed)
}

/// Junction centroids, one per confirmed cluster.
pub fn junction_candidates(skeleton: &BinaryImage, params: &DetectParams) -> Vec<Point> {
    SkeletonGraph::build(skeleton, params).junctions.iter().map(|c| centroid(c)).collect()
}

/// Replaces every group of points closer than `radius` by its centroid until
/// all pairwise distances are at least `radius`.
pub fn merge_close(mut pts: Vec<(Point, Provenance)>, radius: f64) -> Vec<(Point, Provenance)> {
    loop {
        let n = pts.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut merged = false;
        // Sorting by x lets the inner loop stop early.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| pts[a].0.x.total_cmp(&pts[b].0.x));
        for (oi, &i) in order.iter().enumerate() {
            for &j in &order[oi + 1..] {
                if pts[j].0.x - pts[i].0.x >= radius {
                    break;
                }
                if pts[i].0.dist(&pts[j].0) < radius {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                        merged = true;
                    }
                }
            }
        }
        if !merged {
            break;
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut parent, i);
            groups.entry(r).or_default().push(i);
        }
        pts = groups
            .values()
            .map(|g| {
                let k = g.len() as f64;
                let x = g.iter().map(|&i| pts[i].0.x).sum::<f64>() / k;
                let y = g.iter().map(|&i| pts[i].0.y).sum::<f64>() / k;
                let prov = if g.iter().any(|&i| pts[i].1 == Provenance::OpenedGridCenter) {
                    Provenance::OpenedGridCenter
                } else {
                    Provenance::Junction
                };
                (Point::new(x, y), prov)
            })
            .collect();
    }
    pts.sort_by(|a, b| a.0.cmp_yx(&b.0));
    pts
}

/// Shared tail: thin, junctions, opened-grid resolution, merge.
pub fn detect_binary(binary: &BinaryImage, params: &DetectParams, source: &str) -> FeaturePointSet {
    detect_skeleton(&thin_prediction(binary), params, source)
}

/// Tail for an input that is already a thin skeleton.
pub fn detect_skeleton(skeleton: &BinaryImage, params: &DetectParams, source: &str) -> FeaturePointSet {
    let graph = SkeletonGraph::build(skeleton, params);
    let (centers, absorbed) = opened_grid_centers(&graph);
    let mut pts: Vec<(Point, Provenance)> = graph
        .junctions
        .iter()
        .enumerate()
        .filter(|(i, _)| !absorbed.contains(i))
        .map(|(_, c)| (centroid(c), Provenance::Junction))
        .collect();
    pts.extend(centers.into_iter().map(|c| (c, Provenance::OpenedGridCenter)));
    let pts = merge_close(pts, params.merge_radius);
    FeaturePointSet {
        source: source.to_string(),
        points: pts.iter().map(|p| p.0).collect(),
        provenance: pts.iter().map(|p| p.1).collect(),
    }
}

pub fn detect(prob: &ProbMap, params: &DetectParams, source: &str) -> Result<FeaturePointSet> {
    if prob.iter().any(|p| !p.is_finite()) {
        return Err(invalid("probability map contains non-finite values"));
    }
    Ok(detect_binary(&binarize_prediction(prob, params.threshold), params, source))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalParams {
    pub blur_sigma: f64,
    pub threshold: AdaptiveThreshold,
}

/// Classical binarization of a grayscale capture (no network).
pub fn classical_binarize(image: &Gray, params: &ClassicalParams) -> Result<BinaryImage> {
    binarize(&preprocess(image, params.blur_sigma)?, params.threshold)
}

pub fn classical_detect(image: &Gray, params: &ClassicalParams, tail: &DetectParams, source: &str) -> Result<FeaturePointSet> {
    Ok(detect_binary(&classical_binarize(image, params)?, tail, source))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_prediction_threshold() {
        let a = ProbMap::from_elem((5, 6), 0.4);
        assert_eq!(binarize_prediction(&a, 0.5).count_ones(), 0);
        let b = ProbMap::from_elem((5, 6), 0.6);
        assert_eq!(binarize_prediction(&b, 0.5).count_ones(), 30);
        let m = ProbMap::from_shape_fn((13, 17), |(y, x)| ((x * 31 + y * 17) % 100) as f32 / 99.0);
        let brute = m.iter().filter(|&&v| v > 0.5).count();
        assert_eq!(binarize_prediction(&m, 0.5).count_ones(), brute);
        // Ties go to background.
        assert_eq!(binarize_prediction(&ProbMap::from_elem((2, 2), 0.5), 0.5).count_ones(), 0);
    }

    #[test]
    fn three_px_line_thins_to_one() {
        let line = BinaryImage::from_fn(40, 9, |x, y| (3..=5).contains(&y) && (2..38).contains(&x));
        let s = thin_prediction(&line);
        for x in 4..36 {
            assert_eq!((0..9).filter(|&y| s.at(x, y)).count(), 1);
        }
        assert!(!s.has_full_2x2());
        assert_eq!(thin_prediction(&BinaryImage::new(8, 8)).count_ones(), 0);
    }

    fn params() -> DetectParams {
        DetectParams::default()
    }

    #[test]
    fn plus_has_one_junction() {
        let plus = BinaryImage::from_fn(21, 21, |x, y| (x == 10 && (2..19).contains(&y)) || (y == 10 && (2..19).contains(&x)));
        let j = junction_candidates(&plus, &params());
        assert_eq!(j, vec![Point::new(10.0, 10.0)]);
    }

    #[test]
    fn parallel_lines_have_none() {
        let img = BinaryImage::from_fn(30, 20, |x, y| (y == 5 || y == 12) && (2..28).contains(&x));
        assert!(junction_candidates(&img, &params()).is_empty());
    }

    #[test]
    fn short_spur_is_pruned() {
        let mut img = BinaryImage::from_fn(30, 20, |x, y| y == 10 && (2..28).contains(&x));
        img.set(15, 11, true);
        img.set(15, 12, true);
        let p = prune_spurs(&img, 3);
        assert!(!p.at(15, 11) && !p.at(15, 12));
        assert!(junction_candidates(&img, &params()).is_empty());
    }

    #[test]
    fn small_ring_collapses_to_center() {
        let mut img = BinaryImage::new(24, 21);
        for (x, y) in [(9, 9), (10, 9), (11, 9), (9, 10), (11, 10), (9, 11), (10, 11), (11, 11)] {
            img.set(x, y, true);
        }
        for x in 3..9 {
            img.set(x, 10, true);
        }
        for x in 12..20 {
            img.set(x, 10, true);
        }
        let g = SkeletonGraph::build(&img, &params());
        assert_eq!(g.junctions.len(), 2);
        let (c, absorbed) = opened_grid_centers(&g);
        assert_eq!(c, vec![Point::new(10.0, 10.0)]);
        assert_eq!(absorbed.len(), 2);
        let fp = detect_skeleton(&img, &params(), "ring");
        assert_eq!(fp.points, vec![Point::new(10.0, 10.0)]);
        assert_eq!(fp.provenance, vec![Provenance::OpenedGridCenter]);
    }

    #[test]
    fn large_cells_are_not_opened_points() {
        let img = BinaryImage::from_fn(60, 60, |x, y| (x % 15 == 7 && (2..58).contains(&y)) || (y % 15 == 7 && (2..58).contains(&x)));
        let fp = detect_skeleton(&img, &params(), "grid");
        assert_eq!(fp.len(), 16);
        assert!(fp.provenance.iter().all(|&p| p == Provenance::Junction));
    }

    #[test]
    fn merge_respects_radius() {
        let pts = vec![
            (Point::new(0.0, 0.0), Provenance::Junction),
            (Point::new(2.0, 0.0), Provenance::Junction),
            (Point::new(10.0, 0.0), Provenance::Junction),
        ];
        let m = merge_close(pts, 3.0);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].0, Point::new(1.0, 0.0));
    }

    #[test]
    fn empty_map_gives_empty_set() {
        let fp = detect(&ProbMap::zeros((32, 32)), &params(), "e").unwrap();
        assert!(fp.is_empty());
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fp = FeaturePointSet {
            source: "s".into(),
            points: vec![Point::new(1.5, 2.0)],
            provenance: vec![Provenance::OpenedGridCenter],
        };
        let p = dir.path().join("fp.json");
        fp.save_json(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("opened_grid_center"));
        assert_eq!(FeaturePointSet::load_json(&p).unwrap(), fp);
    }
}
