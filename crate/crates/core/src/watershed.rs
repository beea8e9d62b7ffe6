//! Marker-controlled watershed on the distance map of a predicted mask.
//!
//! The pipeline is: binarize, drop small specks, exact Euclidean distance
//! transform, threshold the distances into sure-foreground markers, mark
//! background far from any foreground as sure background, and flood the rest
//! in order of decreasing distance.

use alloc::collections::{BinaryHeap, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask, BACKGROUND, CELL};
use crate::inference::{binarize, ProbabilityMap};

/// Euclidean distance of each cell pixel to the nearest background pixel.
pub type DistanceMap = Image<f64>;

/// `0` unknown, `1` sure background, `k ≥ 2` foreground marker `k − 1`.
pub type MarkerMap = Image<u32>;

/// `0` background or boundary, `k ≥ 1` instance `k`.
pub type LabeledMask = Image<u32>;

pub const UNKNOWN: u32 = 0;
pub const SURE_BACKGROUND: u32 = 1;
pub const FIRST_MARKER: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WatershedConfig {
    /// Binarization threshold on the cell probability.
    pub threshold: f32,
    /// Marker threshold as a fraction of the maximum distance.
    pub marker_fraction: f64,
    /// Background closer than this to foreground is left unknown.
    pub background_margin: f64,
    /// Cell components smaller than this (8-connected) are removed.
    pub min_size: usize,
}

impl Default for WatershedConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            marker_fraction: 0.5,
            background_margin: 3.0,
            min_size: 10,
        }
    }
}

impl WatershedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.marker_fraction > 0.0 && self.marker_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "marker fraction {} outside (0, 1)",
                self.marker_fraction
            )));
        }
        if !(self.background_margin >= 0.0 && self.background_margin.is_finite()) {
            return Err(Error::invalid(
                "background margin must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// 1-D lower envelope of parabolas rooted at the finite entries of `f`.
/// Writes `min_q (p − q)² + f[q]` into `out`.
fn envelope_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else { break };
            let pf = p as f64;
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            z.push(f64::NEG_INFINITY);
        }
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every pixel to the nearest `site`, `∞` when there
/// are none. Exact: every intermediate value is an integer.
fn squared_distance_to(height: usize, width: usize, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut g: Vec<f64> = (0..height * width)
        .map(|i| if site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; height];
    let mut col_out = vec![0.0; height];
    for x in 0..width {
        for y in 0..height {
            col[y] = g[y * width + x];
        }
        envelope_1d(&col, &mut col_out, &mut v, &mut z);
        for y in 0..height {
            g[y * width + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; width];
    for row in g.chunks_exact_mut(width) {
        envelope_1d(row, &mut row_out, &mut v, &mut z);
        row.copy_from_slice(&row_out);
    }
    g
}

/// Exact Euclidean distance from each cell pixel to the nearest background
/// pixel; background pixels get 0. A mask without any background is treated
/// as surrounded by background just outside the image.
pub fn distance_transform(mask: &Mask) -> DistanceMap {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let values = if labels.iter().any(|&v| v == BACKGROUND) {
        squared_distance_to(h, w, |i| labels[i] == BACKGROUND)
    } else {
        let (ph, pw) = (h + 2, w + 2);
        let padded = squared_distance_to(ph, pw, |i| {
            let (y, x) = (i / pw, i % pw);
            y == 0 || x == 0 || y == ph - 1 || x == pw - 1
        });
        (0..h * w)
            .map(|i| padded[(i / w + 1) * pw + i % w + 1])
            .collect()
    };
    let values = values.into_iter().map(libm::sqrt).collect();
    Image::new(h, w, 1, values).expect("distance map matches mask extents")
}

const N4: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
const N8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[inline]
fn neighbours(
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    offsets: &'static [(isize, isize)],
) -> impl Iterator<Item = usize> {
    offsets.iter().filter_map(move |&(dy, dx)| {
        let ny = y.checked_add_signed(dy)?;
        let nx = x.checked_add_signed(dx)?;
        (ny < h && nx < w).then_some(ny * w + nx)
    })
}

/// Labels the connected components of pixels satisfying `member`, numbered
/// from 1 in raster order of their first pixel; non-members get 0.
pub fn connected_components(
    height: usize,
    width: usize,
    eight: bool,
    member: impl Fn(usize) -> bool,
) -> (Vec<u32>, u32) {
    let offsets: &'static [(isize, isize)] = if eight { &N8 } else { &N4 };
    let mut labels = vec![0u32; height * width];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..height * width {
        if labels[start] != 0 || !member(start) {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbours(i / width, i % width, height, width, offsets) {
                if labels[j] == 0 && member(j) {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, count)
}

/// Foreground markers at `dist ≥ fraction · max(dist)` (8-connected, from 2);
/// background pixels farther than `margin` from any foreground are sure
/// background; the rest is unknown.
pub fn extract_markers(dist: &DistanceMap, fraction: f64, margin: f64) -> Result<MarkerMap> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!(
            "marker fraction {fraction} outside (0, 1)"
        )));
    }
    let (h, w) = (dist.height(), dist.width());
    let d = dist.data();
    let max = d.iter().copied().fold(0.0, f64::max);
    let cut = fraction * max;
    let (fg, _) = connected_components(h, w, true, |i| d[i] > 0.0 && d[i] >= cut);
    let to_fg = squared_distance_to(h, w, |i| d[i] > 0.0);
    let margin_sq = margin * margin;
    let labels = (0..h * w)
        .map(|i| {
            if fg[i] != 0 {
                fg[i] + 1
            } else if d[i] == 0.0 && to_fg[i] > margin_sq {
                SURE_BACKGROUND
            } else {
                UNKNOWN
            }
        })
        .collect();
    Image::new(h, w, 1, labels)
}

pub fn marker_count(markers: &MarkerMap) -> u32 {
    markers
        .data()
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m.saturating_sub(SURE_BACKGROUND))
}

#[derive(Debug, PartialEq)]
struct Entry {
    level: f64,
    seq: u64,
    index: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // max-heap: deepest first, then earliest pushed
    fn cmp(&self, other: &Self) -> Ordering {
        self.level
            .total_cmp(&other.level)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const BOUNDARY: u32 = u32::MAX;

/// Priority flood from the markers, highest distance first. An unknown pixel
/// takes the label of the first neighbour that reaches it; a pixel touching
/// two different instances becomes boundary. Background (distance 0) can only
/// be claimed by the sure-background region.
pub fn watershed_flood(topography: &DistanceMap, markers: &MarkerMap) -> Result<LabeledMask> {
    let (h, w) = (topography.height(), topography.width());
    if (markers.height(), markers.width()) != (h, w) {
        return Err(Error::shape(
            "watershed_flood",
            format!("{}x{} vs {}x{}", h, w, markers.height(), markers.width()),
        ));
    }
    let level = topography.data();
    let mut label = markers.data().to_vec();
    let mut seeded = vec![false; h * w];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, &l) in label.iter().enumerate() {
        if l != UNKNOWN {
            seeded[i] = true;
            heap.push(Entry {
                level: level[i],
                seq,
                index: i,
            });
            seq += 1;
        }
    }
    while let Some(Entry { index: i, .. }) = heap.pop() {
        let (y, x) = (i / w, i % w);
        if !seeded[i] {
            let mut first = None;
            let mut meets_two = false;
            for j in neighbours(y, x, h, w, &N4) {
                let l = label[j];
                if l >= FIRST_MARKER && l != BOUNDARY {
                    match first {
                        None => first = Some(l),
                        Some(f) if f != l => meets_two = true,
                        _ => {}
                    }
                }
            }
            if meets_two {
                label[i] = BOUNDARY;
                continue;
            }
        }
        let l = label[i];
        for j in neighbours(y, x, h, w, &N4) {
            if label[j] != UNKNOWN {
                continue;
            }
            if l != SURE_BACKGROUND && level[j] == 0.0 {
                continue;
            }
            label[j] = l;
            heap.push(Entry {
                level: level[j],
                seq,
                index: j,
            });
            seq += 1;
        }
    }
    let out = label
        .into_iter()
        .map(|l| {
            if l >= FIRST_MARKER && l != BOUNDARY {
                l - SURE_BACKGROUND
            } else {
                0
            }
        })
        .collect();
    Image::new(h, w, 1, out)
}

/// Sets cell components (8-connected) smaller than `min_size` to background.
pub fn remove_small_components(mask: &Mask, min_size: usize) -> Mask {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let (comp, count) = connected_components(h, w, true, |i| labels[i] == CELL);
    let mut sizes = vec![0usize; count as usize + 1];
    for &c in &comp {
        sizes[c as usize] += 1;
    }
    Mask::from_fn(h, w, |y, x| {
        let c = comp[y * w + x] as usize;
        if c != 0 && sizes[c] >= min_size {
            CELL
        } else {
            BACKGROUND
        }
    })
    .expect("same extents as input")
}

/// Full post-processing of a cell-probability map. Returns the refined mask
/// (union of flooded instances) and the instance labels.
pub fn postprocess(prob: &ProbabilityMap, cfg: &WatershedConfig) -> Result<(Mask, LabeledMask)> {
    cfg.validate()?;
    let mask = remove_small_components(&binarize(prob, cfg.threshold)?, cfg.min_size);
    let dist = distance_transform(&mask);
    let markers = extract_markers(&dist, cfg.marker_fraction, cfg.background_margin)?;
    let labels = watershed_flood(&dist, &markers)?;
    let refined = Mask::new(
        labels.height(),
        labels.width(),
        labels
            .data()
            .iter()
            .map(|&l| if l > 0 { CELL } else { BACKGROUND })
            .collect(),
    )?;
    Ok((refined, labels))
}
