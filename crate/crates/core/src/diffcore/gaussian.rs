use super::{kahan_sum, Array, DiffError, RngStream, Tape, Var};

/// Bounds applied to every log-variance.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Diagonal Gaussian given by mean and log-variance vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagonalGaussian {
    /// Log-variances are clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self, DiffError> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(DiffError::Shape {
                op: "DiagonalGaussian::new",
                left: vec![mean.len()],
                right: vec![log_var.len()],
            });
        }
        let log_var = log_var
            .into_iter()
            .map(|l| l.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// `KL(self || other)`.
    pub fn kl(&self, other: &DiagonalGaussian) -> Result<f64, DiffError> {
        kl_diag_gaussian(self, other)
    }

    /// Reparameterized draw `mean + exp(log_var / 2) * eps`.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, l)| m + (0.5 * l).exp() * rng.normal())
            .collect()
    }

    /// Log density at `x`.
    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        kahan_sum(x.iter().zip(&self.mean).zip(&self.log_var).map(|((x, m), l)| {
            -0.5 * (ln_2pi + l + (x - m) * (x - m) * (-l).exp())
        }))
    }
}

pub(crate) fn kl_terms(qm: &[f64], ql: &[f64], pm: &[f64], pl: &[f64]) -> f64 {
    kahan_sum((0..qm.len()).map(|i| {
        let d = qm[i] - pm[i];
        0.5 * ((ql[i] - pl[i]).exp() + d * d * (-pl[i]).exp() - 1.0 + pl[i] - ql[i])
    }))
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag_gaussian(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, DiffError> {
    if q.dim() != p.dim() {
        return Err(DiffError::Shape {
            op: "kl_diag_gaussian",
            left: vec![q.dim()],
            right: vec![p.dim()],
        });
    }
    Ok(kl_terms(&q.mean, &q.log_var, &p.mean, &p.log_var))
}

/// A diagonal Gaussian living on a tape; rows index independent distributions.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVar {
    /// Split a `[n, 2d]` network output into mean and clamped log-variance.
    pub fn from_params(tape: &mut Tape, params: Var) -> Result<Self, DiffError> {
        let width = tape.value(params).cols();
        if !width.is_multiple_of(2) {
            return Err(DiffError::Shape {
                op: "GaussianVar::from_params",
                left: tape.shape(params).to_vec(),
                right: vec![2],
            });
        }
        let d = width / 2;
        let mean = tape.slice_cols(params, 0, d)?;
        let raw = tape.slice_cols(params, d, width)?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(Self { mean, log_var })
    }

    /// `N(0, I)` with the given shape, as constants.
    pub fn standard(tape: &mut Tape, shape: &[usize]) -> Self {
        Self {
            mean: tape.constant(Array::zeros(shape)),
            log_var: tape.constant(Array::zeros(shape)),
        }
    }

    pub fn detach(&self, tape: &mut Tape) -> Self {
        Self {
            mean: tape.detach(self.mean),
            log_var: tape.detach(self.log_var),
        }
    }

    /// Summed `KL(self || other)` over all rows.
    pub fn kl(&self, tape: &mut Tape, other: &GaussianVar) -> Result<Var, DiffError> {
        tape.kl_diag(self.mean, self.log_var, other.mean, other.log_var)
    }

    pub fn sample(&self, tape: &mut Tape, rng: &mut RngStream) -> Result<Var, DiffError> {
        let eps = rng.normal_array(tape.shape(self.mean));
        tape.reparameterize(self.mean, self.log_var, eps)
    }

    /// Value of row `row` as a plain distribution.
    pub fn to_value(&self, tape: &Tape, row: usize) -> DiagonalGaussian {
        let m = tape.value(self.mean);
        let l = tape.value(self.log_var);
        let d = m.cols();
        DiagonalGaussian::new(
            m.data()[row * d..(row + 1) * d].to_vec(),
            l.data()[row * d..(row + 1) * d].to_vec(),
        )
        .expect("matching shapes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_of_identical_is_zero() {
        let q = DiagonalGaussian::standard(4);
        assert_eq!(q.kl(&q).unwrap(), 0.0);
    }

    #[test]
    fn kl_mean_shift_closed_form() {
        let q = DiagonalGaussian::new(vec![2.0], vec![0.0]).unwrap();
        let p = DiagonalGaussian::standard(1);
        assert_eq!(q.kl(&p).unwrap(), 2.0);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let q = DiagonalGaussian::standard(3);
        let p = DiagonalGaussian::standard(2);
        assert!(q.kl(&p).is_err());
    }

    #[test]
    fn log_var_clamped_at_construction() {
        let g = DiagonalGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.log_var(), &[LOG_VAR_MIN, LOG_VAR_MAX]);
    }

    #[test]
    fn near_zero_variance_sample_is_mean() {
        let g = DiagonalGaussian::new(vec![1.5, -2.0, 0.25], vec![f64::NEG_INFINITY; 3]).unwrap();
        let mut rng = RngStream::new(5);
        let mut probe = rng.clone();
        let eps_norm = (0..3).map(|_| probe.normal().powi(2)).sum::<f64>().sqrt();
        let s = g.sample(&mut rng);
        let dist = s.iter().zip(g.mean()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist <= 1e-2 * eps_norm);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let g = DiagonalGaussian::new(vec![0.3; 5], vec![0.7; 5]).unwrap();
        let a = g.sample(&mut RngStream::new(9));
        let b = g.sample(&mut RngStream::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_statistical_check() {
        // N(1, e^0.5): standard error of the mean is sqrt(e^0.5 / n).
        let g = DiagonalGaussian::new(vec![1.0], vec![0.5]).unwrap();
        let mut rng = RngStream::new(2024);
        let n = 100_000;
        let mean = (0..n).map(|_| g.sample(&mut rng)[0]).sum::<f64>() / n as f64;
        let stderr = (0.5f64.exp() / n as f64).sqrt();
        assert!((mean - 1.0).abs() < 3.0 * stderr, "mean {mean}");
    }
}
