//! Score maps and the ranking metrics computed from them.

use crate::error::{Error, Result};
use crate::flow::{log_prob, Base};

/// Default number of quantile thresholds in the region-overlap sweep.
pub const PRO_THRESHOLDS: usize = 200;
/// Default false-positive-rate cap of the region-overlap curve.
pub const PRO_FPR_CAP: f64 = 0.3;

/// Row-major scalar grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "{} values for a {height}×{width} grid",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }
}

/// Full-resolution anomaly map of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub grid: Grid,
    /// Maximum of the grid.
    pub image_score: f64,
}

impl ScoreMap {
    pub fn new(grid: Grid) -> Result<Self> {
        if grid.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        let image_score = grid.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { grid, image_score })
    }
}

/// `1 − p(x)` under the normal base. Negative when the density exceeds 1.
pub fn likelihood_score(z: &[f64], log_det: f64) -> f64 {
    1.0 - log_prob(z, log_det, Base::Normal, 0.0).exp()
}

/// Corner-aligned bilinear resampling to a grid at least as large.
pub fn upsample_bilinear(grid: &Grid, height: usize, width: usize) -> Result<Grid> {
    if height < grid.height || width < grid.width || grid.height == 0 || grid.width == 0 {
        return Err(Error::contract(format!(
            "cannot upsample {}×{} to {height}×{width}",
            grid.height, grid.width
        )));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (x.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, x - lo as f64)
    };
    let g = |r: usize, c: usize| grid.values[r * grid.width + c];
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        let (r0, r1, fy) = coord(i, grid.height, height);
        for j in 0..width {
            let (c0, c1, fx) = coord(j, grid.width, width);
            let top = g(r0, c0) * (1.0 - fx) + g(r0, c1) * fx;
            let bottom = g(r1, c0) * (1.0 - fx) + g(r1, c1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::new(height, width, values)
}

fn layer_mean(maps: &[Grid], height: usize, width: usize) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; height * width];
    for map in maps {
        let up = upsample_bilinear(map, height, width)?;
        for (a, v) in acc.iter_mut().zip(&up.values) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Averages upsampled layer maps; with `use_mac` the classification average
/// is blended in equally with the likelihood average.
pub fn merge_maps(
    likelihood: &[Grid],
    classification: &[Grid],
    height: usize,
    width: usize,
    use_mac: bool,
) -> Result<ScoreMap> {
    if likelihood.is_empty() || (use_mac && classification.is_empty()) {
        return Err(Error::contract("no layer maps to merge"));
    }
    let mut merged = layer_mean(likelihood, height, width)?;
    if use_mac {
        let cls = layer_mean(classification, height, width)?;
        for (m, c) in merged.iter_mut().zip(cls) {
            *m = 0.5 * (*m + c);
        }
    }
    ScoreMap::new(Grid::new(height, width, merged)?)
}

/// Mann–Whitney AUROC with ties counted as half a win.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&y| y != 0).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUROC needs both labels".into()));
    }
    // twice the number of (positive, negative) pairs won, ties counting one
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] != 0 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

/// 8-connected components of the positive pixels. Returns a label per pixel
/// (0 for background, components numbered from 1) and the component count.
pub fn connected_components(mask: &[u8], height: usize, width: usize) -> (Vec<usize>, usize) {
    let mut labels = vec![0usize; mask.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / width) as isize, (p % width) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    if mask[q] != 0 && labels[q] == 0 {
                        labels[q] = count;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, count)
}

/// Area under the mean region-overlap vs false-positive-rate curve up to
/// `fpr_cap`, normalized by the cap.
///
/// Thresholds are `n_thresholds` evenly spaced order statistics of all
/// pooled scores, plus `+∞` for the origin of the curve. A pixel counts as
/// detected when its score is at least the threshold.
pub fn pro_at_fpr(maps: &[Grid], masks: &[Vec<u8>], fpr_cap: f64, n_thresholds: usize) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::dim("score maps and masks differ in count"));
    }
    if !(fpr_cap > 0.0 && fpr_cap <= 1.0) || n_thresholds < 2 {
        return Err(Error::contract("invalid region-overlap sweep settings"));
    }
    // (score, component id or 0 for normal pixels)
    let mut component_sizes: Vec<usize> = Vec::new();
    let mut normal_scores = Vec::new();
    let mut component_pixels: Vec<(f64, usize)> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if mask.len() != map.values.len() {
            return Err(Error::dim("mask and score map sizes differ"));
        }
        let (labels, count) = connected_components(mask, map.height, map.width);
        let offset = component_sizes.len();
        component_sizes.resize(offset + count, 0);
        for (p, &l) in labels.iter().enumerate() {
            let s = map.values[p];
            if s.is_nan() {
                return Err(Error::Numeric("NaN score".into()));
            }
            if l == 0 {
                normal_scores.push(s);
            } else {
                component_sizes[offset + l - 1] += 1;
                component_pixels.push((s, offset + l - 1));
            }
        }
    }
    if component_sizes.is_empty() {
        return Err(Error::contract("no anomalous regions to score"));
    }
    if normal_scores.is_empty() {
        return Err(Error::UndefinedMetric("no normal pixels for the false positive rate".into()));
    }

    let mut pooled: Vec<f64> = normal_scores
        .iter()
        .copied()
        .chain(component_pixels.iter().map(|p| p.0))
        .collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();
    let mut thresholds: Vec<f64> = (0..n_thresholds)
        .map(|k| pooled[((k as f64 * (n - 1) as f64) / (n_thresholds - 1) as f64).round() as usize])
        .collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();

    normal_scores.sort_by(f64::total_cmp);
    let mut by_component: Vec<Vec<f64>> = vec![Vec::new(); component_sizes.len()];
    for &(s, c) in &component_pixels {
        by_component[c].push(s);
    }
    by_component.iter_mut().for_each(|v| v.sort_by(f64::total_cmp));
    let at_least = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v < t);

    let mut curve = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let fpr = at_least(&normal_scores, t) as f64 / normal_scores.len() as f64;
        let overlap = by_component
            .iter()
            .map(|c| at_least(c, t) as f64 / c.len() as f64)
            .sum::<f64>()
            / by_component.len() as f64;
        curve.push((fpr, overlap));
    }

    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_cap {
            break;
        }
        if x1 <= fpr_cap {
            area += 0.5 * (y0 + y1) * (x1 - x0);
        } else {
            let y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0);
            area += 0.5 * (y0 + y_cap) * (fpr_cap - x0);
            break;
        }
    }
    Ok(area / fpr_cap)
}

/// Metrics of one evaluation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub image_auroc: f64,
    pub pixel_auroc: f64,
    pub pro_03: f64,
}

impl MetricReport {
    /// Image AUROC from image scores, pixel AUROC and region overlap from
    /// pooled pixels.
    pub fn compute(maps: &[ScoreMap], labels: &[u8], masks: &[Vec<u8>]) -> Result<Self> {
        let image_scores: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
        let image_auroc = auroc(&image_scores, labels)?;
        let pixel_scores: Vec<f64> = maps.iter().flat_map(|m| m.grid.values.iter().copied()).collect();
        let pixel_labels: Vec<u8> = masks.iter().flatten().copied().collect();
        let pixel_auroc = auroc(&pixel_scores, &pixel_labels)?;
        let grids: Vec<Grid> = maps.iter().map(|m| m.grid.clone()).collect();
        let pro_03 = pro_at_fpr(&grids, masks, PRO_FPR_CAP, PRO_THRESHOLDS)?;
        Ok(Self {
            image_auroc,
            pixel_auroc,
            pro_03,
        })
    }

    /// `name = value` lines.
    pub fn to_report(&self) -> String {
        format!(
            "image_auroc = {}\npixel_auroc = {}\npro_03 = {}\n",
            self.image_auroc, self.pixel_auroc, self.pro_03
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts every positive/negative pair.
    fn pair_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Sweeps every distinct score, following the same curve definition.
    fn sweep_oracle(map: &[f64], mask: &[u8], cap: f64) -> f64 {
        let mut ts: Vec<f64> = map.to_vec();
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        ts.dedup();
        let normals = mask.iter().filter(|&&m| m == 0).count() as f64;
        let positives = mask.iter().filter(|&&m| m == 1).count() as f64;
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let fp = map.iter().zip(mask).filter(|(s, m)| **m == 0 && **s >= t).count() as f64;
                let tp = map.iter().zip(mask).filter(|(s, m)| **m == 1 && **s >= t).count() as f64;
                (fp / normals, tp / positives)
            })
            .collect();
        let mut area = 0.0;
        for w in pts.windows(2) {
            let (x0, y0) = w[0];
            let (x1, y1) = w[1];
            if x1 <= cap {
                area += (x1 - x0) * (y0 + y1) / 2.0;
            } else if x0 < cap {
                let y = y0 + (y1 - y0) * (cap - x0) / (x1 - x0);
                area += (cap - x0) * (y0 + y) / 2.0;
            }
        }
        area / cap
    }

    #[test]
    fn likelihood_score_examples() {
        let s = likelihood_score(&[0.0, 0.0], 0.0);
        assert!((s - (1.0 - 1.0 / (2.0 * std::f64::consts::PI))).abs() < 1e-15);
        assert!((s - 0.8408).abs() < 1e-4);
        assert_eq!(likelihood_score(&[40.0, 40.0], 0.0), 1.0);
        assert_eq!(likelihood_score(&[0.3, 0.1], 0.2), likelihood_score(&[0.3, 0.1], 0.2));
    }

    #[test]
    fn upsample_examples() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&g, 3, 3).unwrap();
        assert_eq!(up.values, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
        assert_eq!(upsample_bilinear(&g, 2, 2).unwrap(), g);
        let c = upsample_bilinear(&Grid::constant(3, 2, 0.7), 7, 5).unwrap();
        assert!(c.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(matches!(upsample_bilinear(&g, 1, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_examples() {
        let lik = vec![Grid::constant(2, 2, 0.2), Grid::constant(1, 1, 0.6)];
        let cls = vec![Grid::constant(2, 2, 0.9), Grid::constant(1, 1, 0.9)];
        let off = merge_maps(&lik, &cls, 4, 4, false).unwrap();
        assert!(off.grid.values.iter().all(|&v| (v - 0.4).abs() < 1e-15));
        let on = merge_maps(&lik, &cls, 4, 4, true).unwrap();
        assert!(on.grid.values.iter().all(|&v| (v - 0.65).abs() < 1e-15));
        let same = merge_maps(&lik, &lik, 4, 4, true).unwrap();
        assert_eq!(same.grid, off.grid);
        assert!(matches!(merge_maps(&[], &[], 4, 4, false), Err(Error::Contract(_))));
        let ramp = Grid::new(2, 2, vec![0.1, 0.5, 0.3, 0.2]).unwrap();
        let m = merge_maps(&[ramp], &[], 3, 3, false).unwrap();
        assert_eq!(m.image_score, 0.5);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_pair_oracle_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let scores: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 4.0).collect();
            let mut labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            assert_eq!(auroc(&scores, &labels).unwrap(), pair_oracle(&scores, &labels));
        }
    }

    #[test]
    fn components_use_eight_connectivity() {
        #[rustfmt::skip]
        let mask = [
            1, 0, 0, 1,
            0, 1, 0, 0,
            0, 0, 0, 0,
            1, 1, 0, 1,
        ];
        let (labels, count) = connected_components(&mask, 4, 4);
        assert_eq!(count, 4);
        assert_eq!(labels[0], labels[5]);
        assert_eq!(labels[12], labels[13]);
    }

    #[test]
    fn pro_examples() {
        let mut mask = vec![0u8; 64];
        for r in 2..5 {
            for c in 3..6 {
                mask[r * 8 + c] = 1;
            }
        }
        let exact = Grid::new(8, 8, mask.iter().map(|&m| m as f64).collect()).unwrap();
        assert!((pro_at_fpr(&[exact], &[mask.clone()], 0.3, 200).unwrap() - 1.0).abs() < 1e-12);
        // all pixels flagged at once: curve (0,0) → (1,1), area 0.045 over 0.3
        let flat = Grid::constant(8, 8, 0.5);
        assert!((pro_at_fpr(&[flat], &[mask.clone()], 0.3, 200).unwrap() - 0.15).abs() < 1e-12);
        let none = vec![0u8; 64];
        assert!(matches!(
            pro_at_fpr(&[Grid::constant(8, 8, 0.0)], &[none], 0.3, 200),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn pro_matches_sweep_oracle_on_a_ramp() {
        let mut mask = vec![0u8; 64];
        for r in 1..4 {
            for c in 1..5 {
                mask[r * 8 + c] = 1;
            }
        }
        // graded ramp with the region scoring mid-to-high
        let map: Vec<f64> = (0..64)
            .map(|p| {
                let (r, c) = (p / 8, p % 8);
                let base = (r * 8 + c) as f64 / 64.0;
                if mask[p] == 1 { base + 0.4 } else { base }
            })
            .collect();
        let got = pro_at_fpr(&[Grid::new(8, 8, map.clone()).unwrap()], &[mask.clone()], 0.3, 200).unwrap();
        assert!((got - sweep_oracle(&map, &mask, 0.3)).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(
            raw in proptest::collection::vec((0u8..30, 0u8..2), 4..60),
        ) {
            let scores: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
            let mut labels: Vec<u8> = raw.iter().map(|r| r.1).collect();
            labels[0] = 0;
            labels[1] = 1;
            let transformed: Vec<f64> = scores.iter().map(|s| (s / 7.0).exp() * 3.0 - 1.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&transformed, &labels).unwrap());
        }

        #[test]
        fn pro_is_rank_invariant(
            scores in proptest::collection::vec(0u8..40, 36),
            cells in proptest::collection::vec(0usize..36, 1..8),
        ) {
            let mut mask = vec![0u8; 36];
            for c in cells { mask[c] = 1; }
            prop_assume!(mask.contains(&0));
            let a = Grid::new(6, 6, scores.iter().map(|&s| s as f64).collect()).unwrap();
            let b = Grid::new(6, 6, scores.iter().map(|&s| (s as f64).powi(3) + 2.0).collect()).unwrap();
            let pa = pro_at_fpr(&[a], &[mask.clone()], 0.3, 200).unwrap();
            let pb = pro_at_fpr(&[b], &[mask], 0.3, 200).unwrap();
            prop_assert!((pa - pb).abs() < 1e-12);
        }

        #[test]
        fn upsample_stays_within_bounds(
            values in proptest::collection::vec(-5.0f64..5.0, 6),
            h in 2usize..9,
            w in 3usize..9,
        ) {
            let g = Grid::new(2, 3, values.clone()).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let up = upsample_bilinear(&g, h, w).unwrap();
            for v in up.values {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
