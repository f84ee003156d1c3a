use medi_nn::kernels::{conv2d_forward, ConvGeometry};
use medi_nn::{uniform_fan_in, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::registry::DatasetManifest;
use crate::{imaging, Error, Result};

/// Deterministic map from a `[C, H, W]` image to a feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn extract(&self, image: &[f32]) -> Vec<f64>;

    fn extract_all(&self, images: &[Vec<f32>]) -> Vec<Vec<f64>> {
        images.iter().map(|i| self.extract(i)).collect()
    }
}

/// Two random 3x3 convolutions with ReLU and average pooling, frozen at
/// construction. The convolutions see each channel standardised; the output
/// is their globally pooled activations followed by the per-channel input
/// means and standard deviations.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    name: String,
    in_channels: usize,
    size: usize,
    widths: (usize, usize),
    w1: Tensor<f32>,
    b1: Tensor<f32>,
    w2: Tensor<f32>,
    b2: Tensor<f32>,
}

impl RandomConvExtractor {
    pub fn new(in_channels: usize, size: usize, widths: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c1, c2) = widths;
        let f1 = in_channels * 9;
        let f2 = c1 * 9;
        Self {
            name: format!("random-conv-{c1}x{c2}-seed{seed}"),
            in_channels,
            size,
            widths,
            w1: uniform_fan_in(vec![c1, in_channels, 3, 3], f1, &mut rng),
            b1: uniform_fan_in(vec![c1], f1, &mut rng),
            w2: uniform_fan_in(vec![c2, c1, 3, 3], f2, &mut rng),
            b2: uniform_fan_in(vec![c2], f2, &mut rng),
        }
    }
}

fn relu_inplace<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn avg_pool2(x: &[f32], channels: usize, size: usize) -> Vec<f32> {
    let half = size / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let p = &x[c * size * size..(c + 1) * size * size];
        for y in 0..half {
            for xx in 0..half {
                let i = 2 * y * size + 2 * xx;
                out.push(0.25 * (p[i] + p[i + 1] + p[i + size] + p[i + size + 1]));
            }
        }
    }
    out
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.widths.1 + 2 * self.in_channels
    }

    fn extract(&self, image: &[f32]) -> Vec<f64> {
        let s = self.size;
        let (c1, c2) = self.widths;
        assert_eq!(image.len(), self.in_channels * s * s, "image does not match the extractor input shape");
        let in_plane = s * s;
        let stats: Vec<(f64, f64)> = image
            .chunks(in_plane)
            .map(|p| {
                let m = p.iter().map(|v| *v as f64).sum::<f64>() / in_plane as f64;
                let var = p.iter().map(|v| (*v as f64 - m).powi(2)).sum::<f64>() / in_plane as f64;
                (m, var.sqrt())
            })
            .collect();
        let normalized: Vec<f32> = image
            .chunks(in_plane)
            .zip(&stats)
            .flat_map(|(p, (m, sd))| p.iter().map(move |v| ((*v as f64 - m) / (sd + 1e-3)) as f32))
            .collect();
        let g1 = ConvGeometry { in_channels: self.in_channels, height: s, width: s, kernel: 3, stride: 1, pad: 1 };
        let (mut h, _) = conv2d_forward(&normalized, 1, &g1, self.w1.data(), Some(self.b1.data()), c1, false);
        relu_inplace(&mut h);
        let h = avg_pool2(&h, c1, s);
        let s2 = s / 2;
        let g2 = ConvGeometry { in_channels: c1, height: s2, width: s2, kernel: 3, stride: 1, pad: 1 };
        let (mut h2, _) = conv2d_forward(&h, 1, &g2, self.w2.data(), Some(self.b2.data()), c2, false);
        relu_inplace(&mut h2);
        let plane = s2 * s2;
        let mut out: Vec<f64> =
            h2.chunks(plane).map(|p| p.iter().map(|v| *v as f64).sum::<f64>() / plane as f64).collect();
        out.extend(stats.iter().map(|(m, _)| *m));
        out.extend(stats.iter().map(|(_, sd)| *sd));
        out
    }
}

/// Load every image of `manifest` and extract its features, in record order.
pub fn extract_manifest(manifest: &DatasetManifest, extractor: &dyn FeatureExtractor, channels: usize) -> Result<Vec<Vec<f64>>> {
    manifest
        .records()
        .iter()
        .map(|r| {
            let path = manifest.resolve_image(r);
            let (img, _) = imaging::load_png(&path, channels)?;
            let f = extractor.extract(&img);
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite features for {}", path.display())));
            }
            Ok(f)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_shaped() {
        let e = RandomConvExtractor::new(3, 8, (8, 16), 7);
        let img: Vec<f32> = (0..3 * 64).map(|i| ((i * 37) % 11) as f32 / 5.5 - 1.0).collect();
        let a = e.extract(&img);
        assert_eq!(a.len(), e.dim());
        assert_eq!(a, RandomConvExtractor::new(3, 8, (8, 16), 7).extract(&img));
        assert_ne!(a, RandomConvExtractor::new(3, 8, (8, 16), 8).extract(&img));
    }
}
