use ndarray::Array3;

use super::Spectrogram;

/// Floor added to |X|^2 before taking the logarithm.
pub const LOG_POWER_FLOOR: f64 = 1e-10;

/// Per-channel normalized log power, frames × channels × bins.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPowerTensor {
    pub data: Array3<f64>,
    /// Per-channel mean of the raw log power.
    pub mean: Vec<f64>,
    /// Per-channel standard deviation of the raw log power; 0 marks a constant channel.
    pub std: Vec<f64>,
}

impl LogPowerTensor {
    pub fn num_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().2
    }

    /// Undo the normalization of one channel.
    pub fn denormalized(&self, channel: usize) -> ndarray::Array2<f64> {
        let plane = self.data.index_axis(ndarray::Axis(1), channel);
        plane.mapv(|v| v * self.std[channel] + self.mean[channel])
    }
}

/// log(|X|^2 + floor), then zero mean / unit variance per channel over (frames, bins).
pub fn log_power_normalize(spec: &Spectrogram) -> LogPowerTensor {
    let (frames, channels, bins) = spec.data.dim();
    let mut data = spec.data.mapv(|c| (c.norm_sqr() + LOG_POWER_FLOOR).ln());
    let count = (frames * bins) as f64;
    let mut mean = vec![0.0; channels];
    let mut std = vec![0.0; channels];
    for m in 0..channels {
        let mut plane = data.index_axis_mut(ndarray::Axis(1), m);
        let mu = plane.iter().sum::<f64>() / count;
        let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
        let sigma = var.sqrt();
        // relative threshold: a constant plane leaves only rounding noise
        let constant = !(sigma > 1e-12 * mu.abs().max(1.0));
        if constant {
            plane.fill(0.0);
            mean[m] = mu;
            std[m] = 0.0;
        } else {
            plane.mapv_inplace(|v| (v - mu) / sigma);
            mean[m] = mu;
            std[m] = sigma;
        }
    }
    LogPowerTensor { data, mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::StftConfig;
    use ndarray::Axis;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_from(data: Array3<Complex64>) -> Spectrogram {
        Spectrogram::new(data, 16_000, StftConfig::new(8, 2, crate::signal::WindowKind::SqrtHann), 64)
            .unwrap()
    }

    #[test]
    fn constant_magnitude_gives_zeros() {
        let data = Array3::from_elem((6, 2, 5), Complex64::new(0.3, -0.4));
        let lp = log_power_normalize(&spec_from(data));
        assert!(lp.data.iter().all(|v| *v == 0.0));
        assert_eq!(lp.std, vec![0.0, 0.0]);
        let zeros = Array3::from_elem((6, 1, 5), Complex64::new(0.0, 0.0));
        let lp = log_power_normalize(&spec_from(zeros));
        assert!(lp.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_channels_identical_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = Array3::zeros((10, 2, 5));
        for t in 0..10 {
            for k in 0..5 {
                let c = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                data[[t, 0, k]] = c;
                data[[t, 1, k]] = c;
            }
        }
        let lp = log_power_normalize(&spec_from(data));
        assert_eq!(lp.data.index_axis(Axis(1), 0), lp.data.index_axis(Axis(1), 1));
    }

    #[test]
    fn normalized_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array3::from_shape_fn((40, 3, 5), |_| {
            Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))
        });
        let spec = spec_from(data);
        let lp = log_power_normalize(&spec);
        for m in 0..3 {
            let plane = lp.data.index_axis(Axis(1), m);
            let n = plane.len() as f64;
            let mu = plane.sum() / n;
            let var = plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            assert!(mu.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
            // stats invert the normalization
            let raw = lp.denormalized(m);
            let direct = spec.data[[3, m, 2]].norm_sqr() + LOG_POWER_FLOOR;
            assert!((raw[[3, 2]] - direct.ln()).abs() < 1e-9);
        }
    }
}
