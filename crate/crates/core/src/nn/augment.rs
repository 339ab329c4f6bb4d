use rand::Rng;

use crate::real::Real;
use crate::tensor::{Layout, Tensor4};

/// Zero padding added on every side before cropping.
pub const CROP_PAD: usize = 4;

/// Per image: zero-pad by [`CROP_PAD`], take a random crop of the original
/// size, then flip horizontally with probability 1/2.
pub fn augment<T: Real>(batch: &Tensor4<T>, rng: &mut impl Rng) -> Tensor4<T> {
    let (n, c, h, w) = (batch.n(), batch.c(), batch.h(), batch.w());
    let mut out = Tensor4::zeros(n, c, h, w, Layout::Nchw);
    for i in 0..n {
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            for r in 0..h {
                let sr = r + dy;
                if sr < CROP_PAD || sr >= h + CROP_PAD {
                    continue;
                }
                for col in 0..w {
                    let sc = col + dx;
                    if sc < CROP_PAD || sc >= w + CROP_PAD {
                        continue;
                    }
                    let dst = if flip { w - 1 - col } else { col };
                    out.set(i, ch, r, dst, batch.get(i, ch, sr - CROP_PAD, sc - CROP_PAD));
                }
            }
        }
    }
    out
}

/// Horizontal mirror of every image.
pub fn flip_horizontal<T: Real>(batch: &Tensor4<T>) -> Tensor4<T> {
    let w = batch.w();
    Tensor4::from_fn(batch.n(), batch.c(), batch.h(), w, Layout::Nchw, |i, c, r, col| {
        batch.get(i, c, r, w - 1 - col)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Tensor4<f32> {
        Tensor4::from_fn(3, 3, 8, 8, Layout::Nchw, |i, c, r, col| (i * 1000 + c * 100 + r * 10 + col) as f32 + 1.0)
    }

    #[test]
    fn seeded_is_deterministic() {
        let x = image();
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment(&x, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.dims(), x.dims());
    }

    #[test]
    fn flip_preserves_pixel_multiset() {
        let x = image();
        let f = flip_horizontal(&x);
        let mut a: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = f.data().iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert_ne!(x, f);
    }

    #[test]
    fn crops_keep_values_from_source_or_zero() {
        let x = image();
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(99));
        for i in 0..3 {
            let src: std::collections::HashSet<u32> = x.item(i).iter().map(|v| v.to_bits()).collect();
            assert!(a.item(i).iter().all(|v| *v == 0.0 || src.contains(&v.to_bits())));
        }
    }
}
