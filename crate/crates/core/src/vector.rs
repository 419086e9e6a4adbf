//! Dense vector helpers on plain slices.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Running mean over equally weighted vectors. Averaging `k` identical inputs
/// reproduces the input bit for bit, which a plain sum-then-divide does not.
pub struct RunningMean {
    mean: Vec<f64>,
    count: usize,
}

impl RunningMean {
    pub fn new(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            count: 0,
        }
    }

    pub fn push(&mut self, v: &[f64]) {
        self.count += 1;
        if self.count == 1 {
            self.mean.copy_from_slice(v);
            return;
        }
        let k = self.count as f64;
        for (m, x) in self.mean.iter_mut().zip(v) {
            *m += (x - *m) / k;
        }
    }

    pub fn finish(self) -> Vec<f64> {
        self.mean
    }
}

/// Scalar counterpart of [`RunningMean`].
pub fn running_mean_scalar(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (i, v) in values.into_iter().enumerate() {
        if i == 0 {
            mean = v;
        } else {
            mean += (v - mean) / (i + 1) as f64;
        }
    }
    mean
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean_of_identical_values_is_exact() {
        let v = [0.1, -3.7, 1e-9];
        let mut acc = RunningMean::new(3);
        for _ in 0..7 {
            acc.push(&v);
        }
        assert_eq!(acc.finish(), v.to_vec());
        assert_eq!(running_mean_scalar([0.1; 3]), 0.1);
    }

    #[test]
    fn running_mean_matches_average() {
        let mut acc = RunningMean::new(1);
        for x in [1.0, 2.0, 6.0] {
            acc.push(&[x]);
        }
        assert!((acc.finish()[0] - 3.0).abs() < 1e-15);
    }
}
