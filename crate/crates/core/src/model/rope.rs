use crate::error::{Error, Result};

/// Rotary position embedding with interleaved pairs `(2i, 2i+1)` rotated by
/// `pos · base^{-2i/d}`.
#[derive(Debug, Clone)]
pub struct Rope {
    inv_freq: Vec<f64>,
}

impl Rope {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "rotary head dimension must be even and positive, got {head_dim}"
            )));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self { inv_freq })
    }

    pub fn head_dim(&self) -> usize {
        self.inv_freq.len() * 2
    }

    pub fn rotate_in_place(&self, v: &mut [f64], pos: usize) {
        debug_assert_eq!(v.len(), self.head_dim());
        let p = pos as f64;
        for (i, &f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (p * f).sin_cos();
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c - b * s;
            v[2 * i + 1] = a * s + b * c;
        }
    }

    /// Applies the transpose (inverse) rotation, used to pull gradients back.
    pub fn rotate_back_in_place(&self, v: &mut [f64], pos: usize) {
        let p = pos as f64;
        for (i, &f) in self.inv_freq.iter().enumerate() {
            let (s, c) = (p * f).sin_cos();
            let (a, b) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = a * c + b * s;
            v[2 * i + 1] = -a * s + b * c;
        }
    }
}

/// Rotates `v` to position `pos`.
pub fn rope_rotate(v: &[f64], pos: usize, rope_base: f64) -> Result<Vec<f64>> {
    let rope = Rope::new(v.len(), rope_base)?;
    let mut out = v.to_vec();
    rope.rotate_in_place(&mut out, pos);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, squared_norm, Prng, Vector};

    #[test]
    fn position_zero_is_identity() {
        let v = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(rope_rotate(&v, 0, 10_000.0).unwrap(), v.to_vec());
    }

    #[test]
    fn odd_dimension_is_rejected() {
        assert!(matches!(
            rope_rotate(&[1.0, 2.0, 3.0], 4, 10_000.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn rotation_preserves_norm_and_inverts() {
        let mut rng = Prng::new(3);
        for _ in 0..50 {
            let v = Vector::random_normal(16, 1.0, &mut rng);
            let pos = rng.below(10_000);
            let r = rope_rotate(&v, pos, 10_000.0).unwrap();
            assert!((squared_norm(&r) - squared_norm(&v)).abs() < 1e-10 * squared_norm(&v));
            let rope = Rope::new(16, 10_000.0).unwrap();
            let mut back = r.clone();
            rope.rotate_back_in_place(&mut back, pos);
            for (a, b) in back.iter().zip(v.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inner_products_depend_only_on_offset() {
        let mut rng = Prng::new(11);
        for _ in 0..100 {
            let q = Vector::random_normal(8, 1.0, &mut rng);
            let k = Vector::random_normal(8, 1.0, &mut rng);
            let i = rng.below(5000);
            let j = rng.below(5000);
            let delta = rng.below(3000);
            let base = dot(
                &rope_rotate(&q, i, 10_000.0).unwrap(),
                &rope_rotate(&k, j, 10_000.0).unwrap(),
            );
            let shifted = dot(
                &rope_rotate(&q, i + delta, 10_000.0).unwrap(),
                &rope_rotate(&k, j + delta, 10_000.0).unwrap(),
            );
            assert!((base - shifted).abs() <= 1e-10 * (1.0 + base.abs()));
        }
    }
}
