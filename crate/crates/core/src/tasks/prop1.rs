use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::frame::{LabeledFrame, Polarity, TaskSet};
use crate::error::{Error, Result};
use crate::rng::rng_at;
use crate::tensor::Tensor;

/// Support images per class in a base task of the replacement family.
pub const FAMILY_K: usize = 10;

/// Two classes of images for few-shot experiments outside the scene model.
#[derive(Debug, Clone)]
pub struct ImagePool {
    /// `classes[0]` plays the intrusive role.
    pub classes: [Vec<Tensor>; 2],
}

/// A pool of `per_class` textured `[channels, side, side]` images per class.
/// Class 0 draws oriented stripes, class 1 draws radial rings; frequency,
/// phase, contrast and mean vary per image.
pub fn synthetic_pool(channels: usize, side: usize, per_class: usize, seed: u64) -> ImagePool {
    let image = |class: usize, idx: usize| {
        let mut rng = rng_at(seed, &[class as u64, idx as u64]);
        let freq = rng.random_range(1.0..4.0);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (cy, cx) = (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let contrast = rng.random_range(0.15..0.35);
        let tints: Vec<f64> = (0..channels).map(|_| rng.random_range(0.3..0.7)).collect();
        let s = side as f64;
        Tensor::from_fn(&[channels, side, side], |i| {
            let (c, y, x) = (i / (side * side), (i / side) % side, i % side);
            let (u, v) = (y as f64 / s, x as f64 / s);
            let arg = if class == 0 {
                u * angle.sin() + v * angle.cos()
            } else {
                ((u - cy).powi(2) + (v - cx).powi(2)).sqrt()
            };
            tints[c] + contrast * (std::f64::consts::TAU * freq * arg + phase).sin()
        })
    };
    ImagePool {
        classes: [0, 1].map(|c| (0..per_class).map(|i| image(c, i)).collect()),
    }
}

/// A base task of `k` + `k` support and `q` + `q` query images drawn without
/// replacement from `pool`.
pub fn pool_task(pool: &ImagePool, k: usize, q: usize, seed: u64) -> Result<TaskSet> {
    let need = k + q;
    if pool.classes.iter().any(|c| c.len() < need) {
        return Err(Error::config(format!(
            "pool holds {} / {} images per class, a task needs {need}",
            pool.classes[0].len(),
            pool.classes[1].len()
        )));
    }
    let mut support = Vec::with_capacity(2 * k);
    let mut query = Vec::with_capacity(2 * q);
    for (c, p) in [Polarity::Intrusive, Polarity::NonIntrusive].into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..pool.classes[c].len()).collect();
        idx.shuffle(&mut rng_at(seed, &[c as u64]));
        let frame = |i: usize| LabeledFrame::new(pool.classes[c][i].clone(), p, false);
        support.extend(idx[..k].iter().map(|&i| frame(i)));
        query.extend(idx[k..need].iter().map(|&i| frame(i)));
    }
    TaskSet::new(support, query, false, seed)
}

/// Member `i` of the replacement family built on `base`: per class, `i`
/// support images are swapped for noisy copies of one marker image, leaving
/// `20 − 2i` originals. Markers and replacement order depend on `seed`
/// only, so members are nested in `i`. `noise_var` is a variance on the
/// 0–255 pixel scale.
pub fn prop1_family(base: &TaskSet, i: usize, noise_var: f64, seed: u64) -> Result<TaskSet> {
    if base.support.len() != 2 * FAMILY_K {
        return Err(Error::pre(format!(
            "family base needs {} support images, got {}",
            2 * FAMILY_K,
            base.support.len()
        )));
    }
    if i >= FAMILY_K {
        return Err(Error::pre(format!("family index {i} outside 0..={}", FAMILY_K - 1)));
    }
    if !(noise_var >= 0.0 && noise_var.is_finite()) {
        return Err(Error::pre(format!("noise variance {noise_var}")));
    }
    let normal = Normal::new(0.0, noise_var.sqrt() / 255.0).expect("checked variance");
    let mut out = base.clone();
    for p in [Polarity::Intrusive, Polarity::NonIntrusive] {
        let c = p.class() as u64;
        let slots: Vec<usize> = (0..base.support.len())
            .filter(|&s| base.support[s].polarity == p)
            .collect();
        let marker = slots[rng_at(seed, &[0, c]).random_range(0..slots.len())];
        let mut targets: Vec<usize> = slots.into_iter().filter(|&s| s != marker).collect();
        targets.shuffle(&mut rng_at(seed, &[1, c]));
        for &slot in &targets[..i] {
            let mut rng = rng_at(seed, &[2, c, slot as u64]);
            let mut img = base.support[marker].image.clone();
            img.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            out.support[slot].image = img;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_is_deterministic_and_sized() {
        let a = synthetic_pool(3, 8, 12, 5);
        let b = synthetic_pool(3, 8, 12, 5);
        assert_eq!(a.classes[1][3], b.classes[1][3]);
        assert_eq!(a.classes[0].len(), 12);
        assert!(pool_task(&a, 10, 2, 0).is_ok());
        assert!(matches!(pool_task(&a, 10, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn family_bounds() {
        let pool = synthetic_pool(1, 4, 10, 1);
        let base = pool_task(&pool, 10, 0, 0).unwrap();
        assert_eq!(prop1_family(&base, 0, 10.0, 3).unwrap(), base);
        assert!(prop1_family(&base, 10, 10.0, 3).is_err());
        let small = pool_task(&pool, 5, 0, 0).unwrap();
        assert!(prop1_family(&small, 1, 10.0, 3).is_err());
    }
}
