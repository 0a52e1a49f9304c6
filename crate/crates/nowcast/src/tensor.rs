//! Dense row-major f32 tensor and the seedable RNG used everywhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Dense tensor of f32 in row-major order. `data.len()` always equals the
/// product of `shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Consumes the tensor, returning shape and flat data.
    pub fn into_parts(self) -> (Vec<usize>, Vec<f32>) {
        (self.shape, self.data)
    }

    /// Row-major strides: stride of the last axis is 1.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for j in (0..self.shape.len().saturating_sub(1)).rev() {
            s[j] = s[j + 1] * self.shape[j + 1];
        }
        s
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        debug_assert_eq!(index.len(), self.shape.len());
        let strides = self.strides();
        let flat: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[flat]
    }

    /// Reinterprets the flat data under a new shape with the same element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Elementwise (1-lam)*a + lam*b.
pub fn lerp(a: &Tensor, b: &Tensor, lam: f32) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    // Exact endpoints: lam=0 returns a bitwise, lam=1 returns b bitwise.
    if lam == 0.0 {
        return Ok(a.clone());
    }
    if lam == 1.0 {
        return Ok(b.clone());
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (1.0 - lam) * x + lam * y)
        .collect();
    Ok(Tensor { shape: a.shape.clone(), data })
}

/// Sums over the given axes; the output shape drops them. Accumulation is f64.
pub fn reduce_sum(t: &Tensor, axes: &[usize]) -> Result<Tensor, TensorError> {
    for &axis in axes {
        if axis >= t.rank() {
            return Err(TensorError::AxisOutOfRange { axis, rank: t.rank() });
        }
    }
    if axes.is_empty() {
        return Ok(t.clone());
    }
    let rank = t.rank();
    let keep: Vec<usize> = (0..rank).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = keep.iter().map(|&a| t.shape[a]).collect();
    let out_len: usize = out_shape.iter().product();
    let mut acc = vec![0.0f64; out_len];

    let strides = t.strides();
    let mut out_strides = vec![0usize; rank];
    {
        let mut s = 1usize;
        for &a in keep.iter().rev() {
            out_strides[a] = s;
            s *= t.shape[a];
        }
    }
    let mut index = vec![0usize; rank];
    for flat in 0..t.data.len() {
        let mut rem = flat;
        for j in 0..rank {
            index[j] = rem / strides[j];
            rem %= strides[j];
        }
        let out_flat: usize = keep.iter().map(|&a| index[a] * out_strides[a]).sum();
        acc[out_flat] += f64::from(t.data[flat]);
    }
    Ok(Tensor {
        shape: out_shape,
        data: acc.into_iter().map(|x| x as f32).collect(),
    })
}

/// Deterministic RNG. ChaCha8 seeded from a 64-bit value; identical seeds and
/// call sequences give identical streams.
#[derive(Debug, Clone)]
pub struct RngState {
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        RngState { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derives an independent child stream; used so per-sequence generation
    /// stays deterministic regardless of ordering.
    pub fn derive(&self, salt: u64) -> Self {
        let base = self.rng.get_seed();
        let mut mixed = u64::from_le_bytes(base[0..8].try_into().unwrap());
        mixed = mixed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(salt.wrapping_mul(0xBF58_476D_1CE4_E5B9));
        RngState::from_seed(mixed)
    }

    pub fn uniform(&mut self) -> f32 {
        self.rng.gen::<f32>()
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn uniform_usize(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Normal draw via Box-Muller on the uniform stream.
    pub fn normal(&mut self) -> f32 {
        let u1 = f64::from(self.uniform()).max(1e-12);
        let u2 = f64::from(self.uniform());
        ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn shuffled_indices(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

/// One draw from Beta(a, b). Beta(1,1) is a direct uniform draw; the general
/// case uses the two-Gamma construction X/(X+Y).
pub fn sample_beta(rng: &mut RngState, a: f64, b: f64) -> Result<f64, TensorError> {
    if !(a > 0.0) || !(b > 0.0) {
        return Err(TensorError::InvalidParameter(format!(
            "beta parameters must be positive, got a={a}, b={b}"
        )));
    }
    if a == 1.0 && b == 1.0 {
        return Ok(f64::from(rng.uniform()));
    }
    let ga = Gamma::new(a, 1.0)
        .map_err(|e| TensorError::InvalidParameter(e.to_string()))?;
    let gb = Gamma::new(b, 1.0)
        .map_err(|e| TensorError::InvalidParameter(e.to_string()))?;
    let x: f64 = ga.sample(&mut rng.rng);
    let y: f64 = gb.sample(&mut rng.rng);
    if x + y == 0.0 {
        return Ok(0.5);
    }
    Ok(x / (x + y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lerp_endpoints_exact() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(lerp(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn lerp_midpoint() {
        let a = Tensor::new(vec![2], vec![2.0, 4.0]);
        let b = Tensor::new(vec![2], vec![4.0, 8.0]);
        let m = lerp(&a, &b, 0.5).unwrap();
        assert_eq!(m.data(), &[3.0, 6.0]);
    }

    #[test]
    fn lerp_shape_mismatch() {
        let a = Tensor::zeros(vec![2]);
        let b = Tensor::zeros(vec![3]);
        let err = lerp(&a, &b, 0.5).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch { left: vec![2], right: vec![3] }
        );
    }

    #[test]
    fn lerp_within_envelope() {
        let mut rng = RngState::from_seed(7);
        for _ in 0..20 {
            let a = Tensor::new(vec![8], (0..8).map(|_| rng.uniform_range(-5.0, 5.0)).collect());
            let b = Tensor::new(vec![8], (0..8).map(|_| rng.uniform_range(-5.0, 5.0)).collect());
            let lam = rng.uniform();
            let out = lerp(&a, &b, lam).unwrap();
            for i in 0..8 {
                let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
                assert!(out.data()[i] >= lo - 1e-5 && out.data()[i] <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn reduce_sum_drops_axes() {
        let t = Tensor::filled(vec![2, 3], 1.0);
        let s = reduce_sum(&t, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[3.0, 3.0]);

        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = reduce_sum(&t, &[0]).unwrap();
        assert_eq!(s.data(), &[4.0, 6.0]);
    }

    #[test]
    fn reduce_sum_no_axes_is_identity() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        assert_eq!(reduce_sum(&t, &[]).unwrap(), t);
    }

    #[test]
    fn reduce_sum_all_axes_matches_flat_sum() {
        let mut rng = RngState::from_seed(3);
        let t = Tensor::new(vec![4, 5], (0..20).map(|_| rng.uniform()).collect());
        let s = reduce_sum(&t, &[0, 1]).unwrap();
        let flat: f32 = t.data().iter().sum();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert!((s.data()[0] - flat).abs() / flat.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn reduce_sum_axis_out_of_range() {
        let t = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            reduce_sum(&t, &[2]),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn rng_same_seed_identical_streams() {
        let mut a = RngState::from_seed(42);
        let mut b = RngState::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn beta_uniform_moments() {
        let mut rng = RngState::from_seed(0);
        let n = 100_000;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let x = sample_beta(&mut rng, 1.0, 1.0).unwrap();
            assert!((0.0..=1.0).contains(&x));
            sum += x;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn beta_2_2_moments() {
        let mut rng = RngState::from_seed(1);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..n {
            let x = sample_beta(&mut rng, 2.0, 2.0).unwrap();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var - 0.05).abs() < 0.005);
    }

    #[test]
    fn beta_rejects_nonpositive() {
        let mut rng = RngState::from_seed(0);
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
        assert!(sample_beta(&mut rng, 1.0, -1.0).is_err());
    }
}
