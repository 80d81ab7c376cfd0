//! Residual features: every position minus its nearest normal reference,
//! plus the class-decorrelation statistics computed over them.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::features::{downsample_mask, FeatureDataset, ReferencePool};
use crate::tensor::Tensor;

/// Per-layer residual maps with the pool row each position was matched to.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    /// One `positions × C_l` matrix per layer.
    pub layers: Vec<Tensor<f32>>,
    /// Matched pool row per layer and position.
    pub matched: Vec<Vec<usize>>,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Exhaustive nearest row of `pool` to `query` in Euclidean distance.
/// Returns the row index and its squared distance; ties go to the lowest
/// index.
pub fn nearest_row(query: &[f32], pool: &Tensor<f32>) -> Result<(usize, f64)> {
    if pool.rank() != 2 || pool.rows() == 0 {
        return Err(Error::contract("nearest-neighbour search over an empty pool"));
    }
    if pool.cols() != query.len() {
        return Err(Error::dim(format!(
            "query has {} channels, pool rows have {}",
            query.len(),
            pool.cols()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for r in 0..pool.rows() {
        let d = squared_distance(query, pool.row(r));
        if d < best.1 {
            best = (r, d);
        }
    }
    Ok(best)
}

/// Nearest reference vector of `query` in one pool layer.
pub fn nearest_reference<'p>(query: &[f32], pool_layer: &'p Tensor<f32>) -> Result<(usize, &'p [f32])> {
    let (row, _) = nearest_row(query, pool_layer)?;
    Ok((row, pool_layer.row(row)))
}

/// Subtracts the nearest reference from every position of every layer.
pub fn to_residual(features: &[Tensor<f32>], pool: &ReferencePool) -> Result<ResidualMap> {
    if features.len() != pool.layers.len() {
        return Err(Error::dim(format!(
            "{} feature layers against a {}-layer pool",
            features.len(),
            pool.layers.len()
        )));
    }
    let mut layers = Vec::with_capacity(features.len());
    let mut matched = Vec::with_capacity(features.len());
    for (map, pool_layer) in features.iter().zip(&pool.layers) {
        let mut data = Vec::with_capacity(map.numel());
        let mut rows = Vec::with_capacity(map.rows());
        for p in 0..map.rows() {
            let query = map.row(p);
            let (row, reference) = nearest_reference(query, pool_layer)?;
            data.extend(query.iter().zip(reference).map(|(x, r)| x - r));
            rows.push(row);
        }
        layers.push(Tensor::matrix(map.rows(), map.cols(), data)?);
        matched.push(rows);
    }
    Ok(ResidualMap { layers, matched })
}

/// `m4 / m2² − 3` with population moments.
pub fn excess_kurtosis(samples: &[f64]) -> Result<f64> {
    if samples.len() < 4 {
        return Err(Error::contract(format!(
            "kurtosis needs at least 4 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in samples {
        let d2 = (x - mean) * (x - mean);
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 <= (4.0 * f64::EPSILON * mean.abs()).powi(2) {
        return Err(Error::Degenerate("zero variance".into()));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecorrelationStats {
    /// Excess kurtosis per channel over all classes, averaged over channels
    /// and layers.
    pub kurtosis: f64,
    /// Mean absolute component at normal positions.
    pub abs_normal: f64,
    /// Mean absolute component at abnormal positions.
    pub abs_abnormal: f64,
    /// Standard deviation across classes of the mean L2 norm at normal
    /// positions, averaged over layers.
    pub scale_std: f64,
}

impl DecorrelationStats {
    /// `name = value` lines.
    pub fn to_report(&self) -> String {
        format!(
            "kurtosis = {}\nabs_normal = {}\nabs_abnormal = {}\nscale_std = {}\n",
            self.kurtosis, self.abs_normal, self.abs_abnormal, self.scale_std
        )
    }
}

/// Statistics over initial or residual features of every image that is not
/// part of a reference pool.
pub fn decorrelation_report(
    dataset: &FeatureDataset,
    pools: &BTreeMap<u32, ReferencePool>,
    use_residual: bool,
) -> Result<DecorrelationStats> {
    decorrelation_report_with(dataset, pools, use_residual, |_, map| Ok(map.clone()))
}

/// Like [`decorrelation_report`], with `transform(layer, map)` applied to
/// each layer map after the optional residual step.
pub fn decorrelation_report_with<F>(
    dataset: &FeatureDataset,
    pools: &BTreeMap<u32, ReferencePool>,
    use_residual: bool,
    transform: F,
) -> Result<DecorrelationStats>
where
    F: Fn(usize, &Tensor<f32>) -> Result<Tensor<f32>>,
{
    let excluded: BTreeSet<usize> = pools
        .values()
        .flat_map(|p| p.image_indices.iter().copied())
        .collect();
    let classes = dataset.class_ids();
    if classes.is_empty() {
        return Err(Error::contract("dataset has no images"));
    }
    let n_layers = dataset.layers.len();
    // per layer and channel: all values, for kurtosis
    let mut channel_values: Vec<Vec<Vec<f64>>> = dataset
        .layers
        .iter()
        .map(|s| vec![Vec::new(); s.channels])
        .collect();
    let (mut abs_n, mut cnt_n, mut abs_a, mut cnt_a) = (0.0, 0usize, 0.0, 0usize);
    // per layer and class: (sum of normal-position norms, count)
    let mut norms: Vec<BTreeMap<u32, (f64, usize)>> = vec![BTreeMap::new(); n_layers];

    for (i, image) in dataset.images.iter().enumerate() {
        if excluded.contains(&i) {
            continue;
        }
        let maps = if use_residual {
            let pool = pools.get(&image.class_id).ok_or_else(|| {
                Error::contract(format!("no reference pool for class {}", image.class_id))
            })?;
            to_residual(&image.features, pool)?.layers
        } else {
            image.features.clone()
        };
        for (l, (map, spec)) in maps.iter().zip(&dataset.layers).enumerate() {
            let map = transform(l, map)?;
            if map.shape() != [spec.positions(), spec.channels] {
                return Err(Error::dim("transform changed the map shape"));
            }
            let cells = downsample_mask(&image.mask, (dataset.height, dataset.width), (spec.height, spec.width))?;
            let entry = norms[l].entry(image.class_id).or_insert((0.0, 0));
            for (p, &abnormal) in cells.iter().enumerate() {
                let row = map.row(p);
                let abs: f64 = row.iter().map(|v| v.abs() as f64).sum();
                for (c, &v) in row.iter().enumerate() {
                    channel_values[l][c].push(v as f64);
                }
                if abnormal == 1 {
                    abs_a += abs;
                    cnt_a += row.len();
                } else {
                    abs_n += abs;
                    cnt_n += row.len();
                    entry.0 += row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    entry.1 += 1;
                }
            }
        }
    }

    for class in &classes {
        if norms.iter().any(|per_class| per_class.get(class).is_none_or(|e| e.1 == 0)) {
            return Err(Error::contract(format!(
                "class {class} has no scored normal positions"
            )));
        }
    }

    let mut kurtosis = 0.0;
    let mut n_channels = 0usize;
    for layer in &channel_values {
        for values in layer {
            kurtosis += excess_kurtosis(values)?;
            n_channels += 1;
        }
    }
    kurtosis /= n_channels as f64;

    let scale_std = norms
        .iter()
        .map(|per_class| {
            let means: Vec<f64> = per_class.values().map(|&(s, n)| s / n as f64).collect();
            let mu = means.iter().sum::<f64>() / means.len() as f64;
            (means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / means.len() as f64).sqrt()
        })
        .sum::<f64>()
        / n_layers as f64;

    let mean_or_zero = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(DecorrelationStats {
        kurtosis,
        abs_normal: mean_or_zero(abs_n, cnt_n),
        abs_abnormal: mean_or_zero(abs_a, cnt_a),
        scale_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{build_reference_pool, synth_dataset, LayerSpec, SynthSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pool(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    /// Straight scan, computed independently of the library routine.
    fn oracle(query: &[f32], rows: &Tensor<f32>) -> usize {
        let mut dists: Vec<(f64, usize)> = (0..rows.rows())
            .map(|r| {
                let d: f64 = rows
                    .row(r)
                    .iter()
                    .zip(query)
                    .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
                    .sum();
                (d, r)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists[0].1
    }

    #[test]
    fn nearest_reference_examples() {
        let p = pool(&[&[1.0, 0.0], &[0.0, 2.0]]);
        assert_eq!(nearest_row(&[1.0, 0.0], &p).unwrap(), (0, 0.0));
        let (row, d2) = nearest_row(&[0.4, 0.1], &p).unwrap();
        assert_eq!(row, 0);
        assert!((d2.sqrt() - 0.608_276).abs() < 1e-5);
        let d1 = squared_distance(&[0.4, 0.1], p.row(1)).sqrt();
        assert!((d1 - 1.941_649).abs() < 1e-5);
        let tied = pool(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(nearest_reference(&[5.0, -3.0], &tied).unwrap().0, 0);
    }

    #[test]
    fn nearest_reference_errors() {
        let empty = Tensor::<f32>::zeros(&[0, 2]);
        assert!(matches!(nearest_row(&[0.0, 0.0], &empty), Err(Error::Contract(_))));
        let p = pool(&[&[1.0, 0.0]]);
        assert!(matches!(nearest_row(&[0.0], &p), Err(Error::Dimension(_))));
    }

    fn small_dataset() -> FeatureDataset {
        synth_dataset(&SynthSpec {
            n_classes: 2,
            images_per_class: 12,
            anomaly_fraction: 0.25,
            image_height: 8,
            image_width: 8,
            layers: vec![LayerSpec::new(2, 2, 4), LayerSpec::new(4, 4, 3)],
            class_separation: 5.0,
            anomaly_magnitude: 3.0,
            seed: 5,
        })
        .unwrap()
    }

    fn normal_indices(ds: &FeatureDataset, class: u32, n: usize) -> Vec<usize> {
        ds.images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.class_id == class && im.is_normal())
            .map(|(i, _)| i)
            .take(n)
            .collect()
    }

    #[test]
    fn reference_images_have_zero_residuals() {
        let ds = small_dataset();
        let idx = normal_indices(&ds, 0, 3);
        let pool = build_reference_pool(&ds, &idx).unwrap();
        for &i in &idx {
            let res = to_residual(&ds.images[i].features, &pool).unwrap();
            assert!(res.layers.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn single_row_pool_forces_the_match() {
        let ds = small_dataset();
        let r = [0.5f32, -1.0, 2.0, 0.25];
        let single = ReferencePool {
            layers: vec![pool(&[&r]), pool(&[&[0.0, 0.0, 0.0]])],
            image_indices: vec![],
        };
        let features = &ds.images[0].features;
        let res = to_residual(features, &single).unwrap();
        for p in 0..4 {
            for c in 0..4 {
                assert_eq!(res.layers[0].row(p)[c], features[0].row(p)[c] - r[c]);
            }
        }
        assert_eq!(res.layers[1], features[1]);
    }

    #[test]
    fn random_pool_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool_layer = Tensor::matrix(3, 4, rows).unwrap();
        let map = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let res = to_residual(
            std::slice::from_ref(&map),
            &ReferencePool {
                layers: vec![pool_layer.clone()],
                image_indices: vec![],
            },
        )
        .unwrap();
        for p in 0..4 {
            let r = oracle(map.row(p), &pool_layer);
            assert_eq!(res.matched[0][p], r);
            for c in 0..4 {
                assert_eq!(res.layers[0].row(p)[c], map.row(p)[c] - pool_layer.row(r)[c]);
            }
        }
    }

    #[test]
    fn kurtosis_examples() {
        assert!((excess_kurtosis(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(excess_kurtosis(&[2.0; 8]), Err(Error::Degenerate(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| rng.sample(rand_distr::StandardNormal))
            .collect();
        assert!(excess_kurtosis(&draws).unwrap().abs() < 0.1);
    }

    #[test]
    fn single_class_has_zero_scale_std() {
        let ds = small_dataset().filter_classes(&[1]);
        let mut pools = BTreeMap::new();
        pools.insert(1, build_reference_pool(&ds, &normal_indices(&ds, 1, 2)).unwrap());
        for use_residual in [false, true] {
            let stats = decorrelation_report(&ds, &pools, use_residual).unwrap();
            assert_eq!(stats.scale_std, 0.0);
            assert!(stats.abs_normal >= 0.0 && stats.abs_abnormal >= 0.0);
        }
    }

    #[test]
    fn missing_pool_is_a_contract_error() {
        let ds = small_dataset();
        let mut pools = BTreeMap::new();
        pools.insert(0, build_reference_pool(&ds, &normal_indices(&ds, 0, 2)).unwrap());
        assert!(matches!(
            decorrelation_report(&ds, &pools, true),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn residuals_shift_the_statistics() {
        let ds = synth_dataset(&SynthSpec {
            n_classes: 2,
            images_per_class: 40,
            anomaly_fraction: 0.2,
            image_height: 16,
            image_width: 16,
            layers: vec![LayerSpec::new(8, 8, 8)],
            class_separation: 5.0,
            anomaly_magnitude: 3.0,
            seed: 42,
        })
        .unwrap();
        let mut pools = BTreeMap::new();
        for k in 0..2 {
            pools.insert(k, build_reference_pool(&ds, &normal_indices(&ds, k, 4)).unwrap());
        }
        let initial = decorrelation_report(&ds, &pools, false).unwrap();
        let residual = decorrelation_report(&ds, &pools, true).unwrap();
        assert!(residual.kurtosis > initial.kurtosis);
        assert!(residual.abs_abnormal > residual.abs_normal);
    }

    proptest! {
        #[test]
        fn residual_is_minimal_over_the_pool(
            pool_rows in proptest::collection::vec(-3.0f32..3.0, 3 * 5..=3 * 5),
            query in proptest::collection::vec(-3.0f32..3.0, 3),
        ) {
            let p = Tensor::matrix(5, 3, pool_rows).unwrap();
            let (row, d2) = nearest_row(&query, &p).unwrap();
            prop_assert_eq!(row, oracle(&query, &p));
            for r in 0..5 {
                prop_assert!(d2 <= squared_distance(&query, p.row(r)));
            }
        }

        #[test]
        fn matching_commutes_with_position_permutation(
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool_layer = Tensor::matrix(6, 2, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let map = Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut perm: Vec<usize> = (0..5).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let permuted = Tensor::matrix(5, 2, perm.iter().flat_map(|&p| map.row(p).to_vec()).collect()).unwrap();
            let pool = ReferencePool { layers: vec![pool_layer], image_indices: vec![] };
            let a = to_residual(std::slice::from_ref(&map), &pool).unwrap();
            let b = to_residual(std::slice::from_ref(&permuted), &pool).unwrap();
            for (q, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.layers[0].row(q), a.layers[0].row(p));
            }
        }
    }
}
