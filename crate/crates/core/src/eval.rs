//! Matching detections to groundtruth, localization metrics, count tables,
//! reports and overlays.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detect::FeaturePointSet;
use crate::error::{invalid, Error, Result};
use crate::image::{write_json, Gray, Point};

pub const DEFAULT_MATCH_RADIUS: f64 = 3.0;
pub const DEFAULT_DEV_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub detected: Point,
    pub truth: Point,
    pub detected_index: usize,
    pub truth_index: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<Pair>,
    pub unmatched_detected: Vec<Point>,
    pub unmatched_truth: Vec<Point>,
    pub match_radius: f64,
}

impl MatchSet {
    pub fn n(&self) -> usize {
        self.pairs.len()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }

    /// Builds a set from explicit pairs, for tests and external tools.
    pub fn from_pairs(pairs: &[(Point, Point)], radius: f64) -> Self {
        Self {
            pairs: pairs
                .iter()
                .enumerate()
                .map(|(i, &(d, t))| Pair {
                    detected: d,
                    truth: t,
                    detected_index: i,
                    truth_index: i,
                    distance: d.dist(&t),
                })
                .collect(),
            unmatched_detected: Vec::new(),
            unmatched_truth: Vec::new(),
            match_radius: radius,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Most pairs within the radius; ties broken by least total distance.
    #[default]
    Optimal,
    /// Repeatedly take the globally closest remaining pair.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    #[default]
    Euclidean,
    /// |dx| + |dy|
    PerAxis,
}

pub fn match_points(detected: &[Point], truth: &[Point], radius: f64) -> Result<MatchSet> {
    match_points_with(detected, truth, radius, MatchRule::Optimal)
}

pub fn match_points_with(detected: &[Point], truth: &[Point], radius: f64, rule: MatchRule) -> Result<MatchSet> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid(format!("match radius must be positive, got {radius}")));
    }
    let edges = radius_edges(detected, truth, radius);
    let chosen = match rule {
        MatchRule::Greedy => greedy(&edges),
        MatchRule::Optimal => optimal(&edges, radius),
    };
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let mut pairs: Vec<Pair> = chosen
        .into_iter()
        .map(|(i, j, d)| {
            used_d[i] = true;
            used_t[j] = true;
            Pair {
                detected: detected[i],
                truth: truth[j],
                detected_index: i,
                truth_index: j,
                distance: d,
            }
        })
        .collect();
    pairs.sort_by_key(|p| (p.truth_index, p.detected_index));
    Ok(MatchSet {
        pairs,
        unmatched_detected: (0..detected.len()).filter(|&i| !used_d[i]).map(|i| detected[i]).collect(),
        unmatched_truth: (0..truth.len()).filter(|&j| !used_t[j]).map(|j| truth[j]).collect(),
        match_radius: radius,
    })
}

/// All (detected, truth, distance) with distance ≤ radius, via a spatial hash.
fn radius_edges(detected: &[Point], truth: &[Point], radius: f64) -> Vec<(usize, usize, f64)> {
    let cell = |p: &Point| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, t) in truth.iter().enumerate() {
        grid.entry(cell(t)).or_default().push(j);
    }
    let mut edges = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        let (cx, cy) = cell(d);
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                if let Some(js) = grid.get(&(gx, gy)) {
                    for &j in js {
                        let dist = d.dist(&truth[j]);
                        if dist <= radius {
                            edges.push((i, j, dist));
                        }
                    }
                }
            }
        }
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    edges
}

fn greedy(edges: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64)> {
    let mut used_d = std::collections::HashSet::new();
    let mut used_t = std::collections::HashSet::new();
    edges
        .iter()
        .filter(|&&(i, j, _)| {
            if used_d.contains(&i) || used_t.contains(&j) {
                return false;
            }
            used_d.insert(i);
            used_t.insert(j);
            true
        })
        .copied()
        .collect()
}

/// Splits the radius graph into connected components and solves each as a
/// rectangular assignment problem.
fn optimal(edges: &[(usize, usize, f64)], radius: f64) -> Vec<(usize, usize, f64)> {
    // Union-find over detected nodes (0..) and truth nodes (offset).
    let mut ids: BTreeMap<(u8, usize), usize> = BTreeMap::new();
    for &(i, j, _) in edges {
        let n = ids.len();
        ids.entry((0, i)).or_insert(n);
        let n = ids.len();
        ids.entry((1, j)).or_insert(n);
    }
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for &(i, j, _) in edges {
        let (a, b) = (find(&mut parent, ids[&(0, i)]), find(&mut parent, ids[&(1, j)]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut comps: BTreeMap<usize, Vec<(usize, usize, f64)>> = BTreeMap::new();
    for &e in edges {
        let r = find(&mut parent, ids[&(0, e.0)]);
        comps.entry(r).or_default().push(e);
    }
    let mut out = Vec::new();
    for comp in comps.values() {
        if comp.len() == 1 {
            out.push(comp[0]);
            continue;
        }
        let mut ds: Vec<usize> = comp.iter().map(|e| e.0).collect();
        let mut ts: Vec<usize> = comp.iter().map(|e| e.1).collect();
        ds.sort_unstable();
        ds.dedup();
        ts.sort_unstable();
        ts.dedup();
        let transpose = ds.len() > ts.len();
        let (rows, cols) = if transpose { (&ts, &ds) } else { (&ds, &ts) };
        let big = radius * (rows.len() + 1) as f64 + 1.0;
        let mut cost = vec![vec![0.0; cols.len()]; rows.len()];
        let mut dist = vec![vec![f64::NAN; cols.len()]; rows.len()];
        for &(i, j, d) in comp {
            let (a, b) = if transpose { (j, i) } else { (i, j) };
            let r = rows.binary_search(&a).expect("row present");
            let c = cols.binary_search(&b).expect("col present");
            cost[r][c] = d - big;
            dist[r][c] = d;
        }
        for (r, c) in hungarian(&cost).into_iter().enumerate() {
            if dist[r][c].is_nan() {
                continue;
            }
            let (i, j) = if transpose { (cols[c], rows[r]) } else { (rows[r], cols[c]) };
            out.push((i, j, dist[r][c]));
        }
    }
    out
}

/// Minimum-cost assignment of every row to a distinct column (rows ≤ cols).
/// Returns the column of each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

fn pair_error(p: &Pair, norm: ErrorNorm) -> f64 {
    match norm {
        ErrorNorm::Euclidean => p.distance,
        ErrorNorm::PerAxis => (p.detected.x - p.truth.x).abs() + (p.detected.y - p.truth.y).abs(),
    }
}

/// Mean localization error over matched pairs.
pub fn mae(m: &MatchSet) -> Result<f64> {
    mae_with(m, ErrorNorm::Euclidean)
}

pub fn mae_with(m: &MatchSet, norm: ErrorNorm) -> Result<f64> {
    if m.pairs.is_empty() {
        return Err(Error::UndefinedMetric("MAE needs at least one matched pair"));
    }
    Ok(m.pairs.iter().map(|p| pair_error(p, norm)).sum::<f64>() / m.n() as f64)
}

pub fn max_error(m: &MatchSet) -> Result<f64> {
    m.pairs
        .iter()
        .map(|p| p.distance)
        .reduce(f64::max)
        .ok_or(Error::UndefinedMetric("max error needs at least one matched pair"))
}

/// Percentage of matched pairs whose distance is strictly below `dev_threshold`.
pub fn d_index(m: &MatchSet, dev_threshold: f64) -> Result<f64> {
    if m.pairs.is_empty() {
        return Err(Error::UndefinedMetric("D-index needs at least one matched pair"));
    }
    let n1 = m.pairs.iter().filter(|p| p.distance < dev_threshold).count();
    Ok(100.0 * n1 as f64 / m.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub match_radius: f64,
    pub dev_threshold: f64,
    pub rule: MatchRule,
    pub norm: ErrorNorm,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            match_radius: DEFAULT_MATCH_RADIUS,
            dev_threshold: DEFAULT_DEV_THRESHOLD,
            rule: MatchRule::Optimal,
            norm: ErrorNorm::Euclidean,
        }
    }
}

/// One method on one scene (or pooled over scenes for aggregate rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub scene: String,
    pub detected: usize,
    pub truth: usize,
    pub matched: usize,
    pub mae_px: Option<f64>,
    pub max_error_px: Option<f64>,
    pub d_percent: Option<f64>,
}

fn row_from(method: &str, scene: &str, detected: usize, truth: usize, m: &MatchSet, p: &EvalParams) -> EvalRow {
    EvalRow {
        method: method.to_string(),
        scene: scene.to_string(),
        detected,
        truth,
        matched: m.n(),
        mae_px: mae_with(m, p.norm).ok(),
        max_error_px: max_error(m).ok(),
        d_percent: d_index(m, p.dev_threshold).ok(),
    }
}

pub fn evaluate(method: &str, detected: &FeaturePointSet, truth: &[Point], params: &EvalParams) -> Result<(EvalRow, MatchSet)> {
    let m = match_points_with(&detected.points, truth, params.match_radius, params.rule)?;
    Ok((row_from(method, &detected.source, detected.len(), truth.len(), &m, params), m))
}

pub const AGGREGATE_SCENE: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub params: EvalParams,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Scores every (method, scene) detection against its truth and appends
    /// one pooled row per method. Methods keep their given order; scenes are
    /// taken in the order of `truths`.
    pub fn build(
        methods: &[(String, Vec<FeaturePointSet>)],
        truths: &[(String, Vec<Point>)],
        params: &EvalParams,
    ) -> Result<(Self, Vec<(String, String, MatchSet)>)> {
        if truths.is_empty() {
            return Err(Error::Empty("scene list"));
        }
        let mut rows = Vec::new();
        let mut sets = Vec::new();
        for (method, dets) in methods {
            let mut pooled = MatchSet {
                pairs: Vec::new(),
                unmatched_detected: Vec::new(),
                unmatched_truth: Vec::new(),
                match_radius: params.match_radius,
            };
            let (mut nd, mut nt) = (0, 0);
            for (scene, truth) in truths {
                let det = dets
                    .iter()
                    .find(|d| &d.source == scene)
                    .ok_or_else(|| invalid(format!("method {method} has no detections for scene {scene}")))?;
                let (row, m) = evaluate(method, det, truth, params)?;
                nd += row.detected;
                nt += row.truth;
                pooled.pairs.extend(m.pairs.iter().copied());
                rows.push(row);
                sets.push((method.clone(), scene.clone(), m));
            }
            if truths.len() > 1 {
                rows.push(row_from(method, AGGREGATE_SCENE, nd, nt, &pooled, params));
            }
        }
        Ok((Self { params: *params, rows }, sets))
    }

    pub fn row(&self, method: &str, scene: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.method == method && r.scene == scene)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("method,scene,detected,truth,matched,mae_px,max_error_px,d_percent\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.scene,
                r.detected,
                r.truth,
                r.matched,
                fmt(r.mae_px),
                fmt(r.max_error_px),
                fmt(r.d_percent)
            );
        }
        s
    }

    pub fn save(&self, csv_path: impl AsRef<Path>, json_path: impl AsRef<Path>) -> Result<()> {
        let p = csv_path.as_ref();
        std::fs::write(p, self.to_csv()).map_err(|e| Error::io(p, e))?;
        write_json(self, json_path.as_ref())
    }
}

/// Detection counts per method and scene, plus a groundtruth row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountTable {
    pub scenes: Vec<String>,
    pub rows: Vec<(String, Vec<usize>)>,
}

pub const GROUNDTRUTH_ROW: &str = "Groundtruth";

pub fn count_table(methods: &[(String, Vec<FeaturePointSet>)], truths: &[(String, Vec<Point>)]) -> Result<CountTable> {
    if truths.is_empty() {
        return Err(Error::Empty("scene list"));
    }
    let scenes: Vec<String> = truths.iter().map(|t| t.0.clone()).collect();
    let mut rows = Vec::new();
    for (method, dets) in methods {
        let counts = scenes
            .iter()
            .map(|s| {
                dets.iter()
                    .find(|d| &d.source == s)
                    .map(|d| d.len())
                    .ok_or_else(|| invalid(format!("method {method} has no detections for scene {s}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((method.clone(), counts));
    }
    rows.push((GROUNDTRUTH_ROW.to_string(), truths.iter().map(|t| t.1.len()).collect()));
    Ok(CountTable { scenes, rows })
}

impl CountTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("method,{}\n", self.scenes.join(","));
        for (m, c) in &self.rows {
            let cells: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{m},{}", cells.join(","));
        }
        s
    }
}

pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

fn to_rgb(image: &Gray) -> ::image::RgbImage {
    let (h, w) = image.dim();
    ::image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = image[[y as usize, x as usize]].round().clamp(0.0, 255.0) as u8;
        ::image::Rgb([v, v, v])
    })
}

/// Draws detections in blue and truth in red over a gray copy of `image`.
/// A truth marker is drawn last, so a coincident pair shows one red mark.
/// `marker_radius` 0 marks single pixels.
pub fn overlay_image(image: &Gray, m: &MatchSet, marker_radius: u32) -> Result<::image::RgbImage> {
    let mut out = to_rgb(image);
    let (w, h) = out.dimensions();
    let all_d = m.pairs.iter().map(|p| p.detected).chain(m.unmatched_detected.iter().copied());
    let all_t = m.pairs.iter().map(|p| p.truth).chain(m.unmatched_truth.iter().copied());
    let mut mark = |p: Point, c: [u8; 3]| -> Result<()> {
        let (cx, cy) = (p.x.round() as i64, p.y.round() as i64);
        if cx < 0 || cy < 0 || cx >= w as i64 || cy >= h as i64 {
            return Err(Error::OutOfImage {
                x: p.x,
                y: p.y,
                width: w as usize,
                height: h as usize,
            });
        }
        let r = marker_radius as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if (dx == 0 || dy == 0) && x >= 0 && y >= 0 && x < w as i64 && y < h as i64 {
                    out.put_pixel(x as u32, y as u32, ::image::Rgb(c));
                }
            }
        }
        Ok(())
    };
    for p in all_d {
        mark(p, BLUE)?;
    }
    for p in all_t {
        mark(p, RED)?;
    }
    Ok(out)
}

pub fn emit_overlay(image: &Gray, m: &MatchSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    overlay_image(image, m, 0)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
