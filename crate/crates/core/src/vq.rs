//! Vector-quantized codebooks and rank-wise feature distribution matching.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::residual::nearest_row;
use crate::tensor::{Real, Tensor, Var};

/// Commitment weight of the codebook term.
pub const DEFAULT_BETA: f64 = 0.25;

/// `K × C` embeddings for one feature layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub embeddings: Tensor<f32>,
}

impl Codebook {
    pub fn new(embeddings: Tensor<f32>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() == 0 {
            return Err(Error::contract("codebook needs at least one embedding"));
        }
        if !embeddings.is_finite() {
            return Err(Error::Numeric("non-finite codebook embedding".into()));
        }
        Ok(Self { embeddings })
    }

    /// `size` rows drawn from `rows`, without replacement when enough rows
    /// exist and with replacement otherwise.
    pub fn sample_from<R: Rng>(rows: &Tensor<f32>, size: usize, rng: &mut R) -> Result<Self> {
        if rows.rank() != 2 || rows.rows() == 0 || size == 0 {
            return Err(Error::contract("codebook initialization needs rows and a positive size"));
        }
        let all: Vec<usize> = (0..rows.rows()).collect();
        let picked: Vec<usize> = if rows.rows() >= size {
            let mut v = all;
            v.shuffle(rng);
            v.truncate(size);
            v
        } else {
            (0..size).map(|_| *all.choose(rng).expect("non-empty")).collect()
        };
        let data = picked.iter().flat_map(|&r| rows.row(r).to_vec()).collect();
        Self::new(Tensor::matrix(size, rows.cols(), data)?)
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn quantize(&self, x: &[f32]) -> Result<(usize, &[f32])> {
        quantize(x, &self.embeddings)
    }
}

/// Nearest embedding of `x`, ties to the lowest index.
pub fn quantize<'c>(x: &[f32], codebook: &'c Tensor<f32>) -> Result<(usize, &'c [f32])> {
    let (i, _) = nearest_row(x, codebook)?;
    Ok((i, codebook.row(i)))
}

/// Nearest embedding index of every row.
pub fn assign(rows: &Tensor<f32>, codebook: &Tensor<f32>) -> Result<Vec<usize>> {
    (0..rows.rows())
        .map(|r| nearest_row(rows.row(r), codebook).map(|(i, _)| i))
        .collect()
}

/// `mean_i |x_q − x_i|² (1 + β)`: both stop-gradient terms have the same
/// value.
pub fn vq_loss(rows: &Tensor<f32>, codebook: &Tensor<f32>, beta: f64) -> Result<f64> {
    if rows.rank() != 2 || rows.rows() == 0 {
        return Err(Error::contract("vq loss over an empty batch"));
    }
    let mut total = 0.0;
    for r in 0..rows.rows() {
        let (_, d2) = nearest_row(rows.row(r), codebook)?;
        total += (1.0 + beta) * d2;
    }
    Ok(total / rows.rows() as f64)
}

/// Tape form: `mean(|sg[x_q] − x|² + β|x_q − sg[x]|²)`. Only the matched
/// embeddings receive gradient, through the second term.
pub fn vq_loss_var<'t, T: Real>(rows: Var<'t, T>, codebook: Var<'t, T>, beta: f64) -> Result<Var<'t, T>> {
    let x = rows.value();
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::contract("vq loss over an empty batch"));
    }
    let cb: Tensor<f32> = codebook.value().cast();
    let idx = assign(&x.cast(), &cb)?;
    let xq = codebook.gather(0, &idx)?;
    let commit = xq.detach().sub(rows)?.square().sum_axis(1)?;
    let embed = xq.sub(rows.detach())?.square().sum_axis(1)?;
    Ok(commit.add(embed.scale(T::lit(beta)))?.mean())
}

/// Replaces the rank-`i` element of `q` by `α·q + (1 − α)·p₍ᵢ₎` where `p₍ᵢ₎`
/// is the rank-`i` element of `p`. Ranks are ascending, ties by position.
pub fn efdm_match(q: &[f32], p: &[f32], alpha: f64) -> Result<Vec<f32>> {
    if q.len() != p.len() {
        return Err(Error::dim(format!(
            "matching {} values against {}",
            q.len(),
            p.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[a].total_cmp(&q[b]).then(a.cmp(&b)));
    let mut sorted_p = p.to_vec();
    sorted_p.sort_by(f32::total_cmp);
    let mut out = q.to_vec();
    for (rank, &pos) in order.iter().enumerate() {
        out[pos] = (alpha * q[pos] as f64 + (1.0 - alpha) * sorted_p[rank] as f64) as f32;
    }
    Ok(out)
}

/// Quantizes every position, then matches the whole map (all positions and
/// channels pooled) against its quantized counterpart.
pub fn fdm_apply(map: &Tensor<f32>, codebook: &Codebook, alpha: f64) -> Result<Tensor<f32>> {
    if map.rank() != 2 || map.cols() != codebook.channels() {
        return Err(Error::dim(format!(
            "map {:?} against a codebook of width {}",
            map.shape(),
            codebook.channels()
        )));
    }
    let mut quantized = Vec::with_capacity(map.numel());
    for r in 0..map.rows() {
        quantized.extend_from_slice(codebook.quantize(map.row(r))?.1);
    }
    let out = efdm_match(map.data(), &quantized, alpha)?;
    Tensor::matrix(map.rows(), map.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cb(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
    }

    /// Sort-and-scatter written out independently: rank positions by a
    /// stable sort of (value, index) pairs.
    fn scatter_oracle(q: &[f32], p: &[f32], alpha: f64) -> Vec<f32> {
        let mut pairs: Vec<(f32, usize)> = q.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ps = p.to_vec();
        ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut out = vec![0.0; q.len()];
        for (i, (v, pos)) in pairs.into_iter().enumerate() {
            out[pos] = (alpha * v as f64 + (1.0 - alpha) * ps[i] as f64) as f32;
        }
        out
    }

    #[test]
    fn quantize_examples() {
        let book = cb(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let (i, e) = quantize(&[0.9, 0.8], &book).unwrap();
        assert_eq!((i, e), (1, &[1.0f32, 1.0][..]));
        assert_eq!(quantize(&[0.0, 0.0], &book).unwrap().0, 0);
        let dup = cb(&[&[2.0, 2.0], &[2.0, 2.0]]);
        assert_eq!(quantize(&[1.0, 0.0], &dup).unwrap().0, 0);
        assert!(matches!(quantize(&[1.0], &book), Err(Error::Dimension(_))));
    }

    #[test]
    fn vq_loss_examples() {
        let book = cb(&[&[1.0, 1.0], &[5.0, 5.0]]);
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!((vq_loss(&x, &book, 0.25).unwrap() - 2.5).abs() < 1e-12);
        let on = Tensor::matrix(1, 2, vec![5.0, 5.0]).unwrap();
        assert_eq!(vq_loss(&on, &book, 0.25).unwrap(), 0.0);

        let tape = Tape::<f64>::new();
        let xs = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let e = tape.param(book.cast());
        let loss = vq_loss_var(xs, e, 0.25).unwrap();
        assert!((loss.value().data()[0] - 2.5).abs() < 1e-12);
        let g = loss.backward().unwrap().wrt(&e);
        // matched row gets 2β(x_q − x); the other row nothing
        assert_eq!(g.data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn efdm_examples() {
        let q = [3.0, 1.0, 2.0];
        let p = [10.0, 20.0, 30.0];
        assert_eq!(efdm_match(&q, &p, 1.0).unwrap(), q.to_vec());
        assert_eq!(efdm_match(&q, &p, 0.0).unwrap(), vec![30.0, 10.0, 20.0]);
        assert_eq!(efdm_match(&q, &p, 0.5).unwrap(), vec![16.5, 5.5, 11.0]);
        assert!(matches!(efdm_match(&q, &p[..2], 0.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn fdm_examples() {
        let book = Codebook::new(cb(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]])).unwrap();
        let map = Tensor::matrix(3, 2, vec![0.1, 0.9, 2.5, -1.2, 0.4, 0.6]).unwrap();
        assert_eq!(fdm_apply(&map, &book, 1.0).unwrap(), map);
        let fixed = Tensor::matrix(2, 2, vec![2.0, -1.0, 0.0, 1.0]).unwrap();
        assert_eq!(fdm_apply(&fixed, &book, 0.0).unwrap(), fixed);
        let out = fdm_apply(&map, &book, 0.3).unwrap();
        let mut got = out.data().to_vec();
        got.sort_by(f32::total_cmp);
        let mut qs = map.data().to_vec();
        qs.sort_by(f32::total_cmp);
        let mut ps: Vec<f32> = (0..3).flat_map(|r| book.quantize(map.row(r)).unwrap().1.to_vec()).collect();
        ps.sort_by(f32::total_cmp);
        for i in 0..6 {
            let expected = (0.3 * qs[i] as f64 + 0.7 * ps[i] as f64) as f32;
            assert_eq!(got[i], expected);
        }
    }

    #[test]
    fn sampling_initializes_from_rows() {
        let rows = Tensor::matrix(4, 2, (0..8).map(|v| v as f32).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let few = Codebook::sample_from(&rows, 3, &mut rng).unwrap();
        let many = Codebook::sample_from(&rows, 9, &mut rng).unwrap();
        assert_eq!(few.len(), 3);
        assert_eq!(many.len(), 9);
        for book in [&few, &many] {
            for r in 0..book.len() {
                assert!((0..4).any(|s| rows.row(s) == book.embeddings.row(r)));
            }
        }
    }

    proptest! {
        #[test]
        fn efdm_matches_oracle(
            q in proptest::collection::vec(-5.0f32..5.0, 1..40),
            seed in 0u64..100,
            alpha in 0.0f64..=1.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f32> = (0..q.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
            prop_assert_eq!(efdm_match(&q, &p, alpha).unwrap(), scatter_oracle(&q, &p, alpha));
            let zero = efdm_match(&q, &p, 0.0).unwrap();
            let mut a = zero.clone();
            a.sort_by(f32::total_cmp);
            let mut b = p.clone();
            b.sort_by(f32::total_cmp);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn efdm_keeps_rank_order(
            q in proptest::collection::hash_set(-1000i32..1000, 2..30),
            alpha in 0.0f64..1.0,
        ) {
            let q: Vec<f32> = q.into_iter().map(|v| v as f32 / 10.0).collect();
            let p: Vec<f32> = (0..q.len()).map(|i| i as f32 * 3.0 - 7.0).collect();
            let out = efdm_match(&q, &p, alpha).unwrap();
            for i in 0..q.len() {
                for j in 0..q.len() {
                    if q[i] < q[j] {
                        prop_assert!(out[i] < out[j]);
                    }
                }
            }
        }
    }
}
