use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::frame::{LabeledFrame, Polarity, TaskSet};
use crate::error::{Error, Result};
use crate::rng::{derive, rng_at};
use crate::tensor::Tensor;

/// Trapezoidal track region, in fractions of the frame size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackSpec {
    pub bottom_width: f64,
    pub top_width: f64,
    /// Row where the track starts, as a fraction of the height.
    pub horizon: f64,
    /// Maximum horizontal offset of either end of the track.
    pub sway: f64,
}

impl Default for TrackSpec {
    fn default() -> Self {
        TrackSpec {
            bottom_width: 0.55,
            top_width: 0.15,
            horizon: 0.3,
            sway: 0.12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    /// Inclusive range of blobs per intrusive frame.
    pub count: [usize; 2],
    /// Inclusive range of blob side lengths in pixels.
    pub size: [usize; 2],
    /// Range the scene's additive blob intensity is drawn from. Negative
    /// values give intruders darker than the ground.
    pub intensity: [f64; 2],
    /// Probability that a scene's intruders are darker than the ground
    /// (intensity negated for the whole scene).
    pub dark_prob: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            count: [1, 2],
            size: [3, 5],
            intensity: [0.3, 0.4],
            dark_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Mixed with the scene seed; lets two specs share seeds yet differ.
    pub background_seed: u64,
    pub track: TrackSpec,
    pub blobs: BlobSpec,
    pub noise_std: f64,
    /// Highest spatial frequency (cycles per frame) in the background
    /// texture. Higher values make scenes less alike.
    pub frequency: f64,
    /// Upper bound on the fraction of pixels an intrusion may touch.
    pub sparsity_cap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 48,
            width: 64,
            channels: 3,
            background_seed: 0,
            track: TrackSpec::default(),
            blobs: BlobSpec::default(),
            noise_std: 0.02,
            frequency: 3.0,
            sparsity_cap: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(format!("scene spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("empty geometry".into());
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("{} channels (expected 1 or 3)", self.channels));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        if !(self.frequency >= 0.0 && self.frequency.is_finite()) {
            return bad(format!("frequency {}", self.frequency));
        }
        let b = &self.blobs;
        if b.count[0] > b.count[1] || b.size[0] == 0 || b.size[0] > b.size[1] {
            return bad(format!("blob ranges {:?} / {:?}", b.count, b.size));
        }
        if !(0.0..=1.0).contains(&b.dark_prob) {
            return bad(format!("blob dark_prob {}", b.dark_prob));
        }
        if b.size[1] > self.height.min(self.width) {
            return bad(format!("blob size {} exceeds the frame", b.size[1]));
        }
        if !(self.sparsity_cap > 0.0 && self.sparsity_cap <= 1.0) {
            return bad(format!("sparsity_cap {}", self.sparsity_cap));
        }
        if b.count[1] > 0 && (b.size[1] * b.size[1]) as f64 > self.sparsity_cap * (self.height * self.width) as f64 {
            return bad("a single blob can exceed the sparsity cap".into());
        }
        let t = &self.track;
        for (name, v) in [
            ("bottom_width", t.bottom_width),
            ("top_width", t.top_width),
            ("horizon", t.horizon),
            ("sway", t.sway),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("track {name} {v} outside [0, 1]"));
            }
        }
        if t.horizon >= 1.0 || t.bottom_width == 0.0 {
            return bad("track polygon is empty".into());
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// A fixed camera view: background, track region and intruder appearance.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    spec: SceneSpec,
    scene_id: u64,
    background: Tensor,
    track: Tensor,
    track_pixels: Vec<usize>,
    blob_color: Vec<f64>,
    mask: Option<Tensor>,
}

const LEVEL_RANGE: (f64, f64) = (0.05, 0.6);

fn texture(h: usize, w: usize, freq: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let waves: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                rng.random::<f64>(),
                rng.random_range(-1.0..=1.0) * freq,
                rng.random_range(-1.0..=1.0) * freq,
                rng.random::<f64>() * std::f64::consts::TAU,
            ]
        })
        .collect();
    let mut t: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            waves
                .iter()
                .map(|[a, fx, fy, ph]| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                .sum()
        })
        .collect();
    let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        t.iter_mut().for_each(|v| *v /= peak);
    }
    t
}

/// Builds the scene for `seed`. Deterministic in `(spec, seed)`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneGenerator> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = rng_at(seed, &[spec.background_seed, 0]);

    let t = &spec.track;
    let top = (t.horizon * h as f64).floor() as usize;
    let cx_bottom = w as f64 * (0.5 + t.sway * rng.random_range(-1.0..=1.0));
    let cx_top = w as f64 * (0.5 + t.sway * rng.random_range(-1.0..=1.0));
    let mut track = vec![0.0; h * w];
    let mut rails = vec![false; h * w];
    for y in top..h {
        let s = if h - 1 > top { (y - top) as f64 / (h - 1 - top) as f64 } else { 1.0 };
        let centre = cx_top + s * (cx_bottom - cx_top);
        let half = 0.5 * w as f64 * (t.top_width + s * (t.bottom_width - t.top_width));
        for x in 0..w {
            let d = (x as f64 + 0.5 - centre).abs();
            if d <= half {
                track[y * w + x] = 1.0;
                rails[y * w + x] = (d - 0.6 * half).abs() < 0.5;
            }
        }
    }
    let track_pixels: Vec<usize> = (0..h * w).filter(|&i| track[i] > 0.0).collect();
    if track_pixels.is_empty() {
        return Err(Error::config("scene spec: track polygon covers no pixel"));
    }

    let ground = texture(h, w, spec.frequency, &mut rng);
    let ballast = texture(h, w, 2.0 * spec.frequency + 1.0, &mut rng);
    let mut background = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        let base = rng.random_range(0.2..0.45);
        let amp = rng.random_range(0.05..0.15);
        let stone = rng.random_range(0.25..0.4);
        for i in 0..h * w {
            let v = if rails[i] {
                0.58
            } else if track[i] > 0.0 {
                stone + 0.08 * ballast[i]
            } else {
                base + amp * ground[i]
            };
            background.push(v.clamp(LEVEL_RANGE.0, LEVEL_RANGE.1));
        }
    }
    let [lo, hi] = spec.blobs.intensity;
    let strength = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut blob_color: Vec<f64> = (0..c).map(|_| strength * rng.random_range(0.8..=1.0)).collect();
    if rng.random::<f64>() < spec.blobs.dark_prob {
        blob_color.iter_mut().for_each(|v| *v = -*v);
    }

    Ok(SceneGenerator {
        spec: spec.clone(),
        scene_id: seed,
        background: Tensor::new(vec![c, h, w], background)?,
        track: Tensor::new(vec![1, h, w], track)?,
        track_pixels,
        blob_color,
        mask: None,
    })
}

impl SceneGenerator {
    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn scene_id(&self) -> u64 {
        self.scene_id
    }

    /// `[C, H, W]`, values in `[0.05, 0.6]`.
    pub fn background(&self) -> &Tensor {
        &self.background
    }

    /// Track-region indicator, `[1, H, W]`.
    pub fn track_mask(&self) -> &Tensor {
        &self.track
    }

    pub fn mask(&self) -> Option<&Tensor> {
        self.mask.as_ref()
    }

    /// Channels of the frames this generator yields.
    pub fn channels(&self) -> usize {
        self.spec.channels + usize::from(self.mask.is_some())
    }

    /// Makes every sampled frame carry `mask` as an extra channel.
    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        check_mask(&mask, self.spec.height, self.spec.width)?;
        self.mask = Some(mask);
        Ok(self)
    }

    /// Pixel indices covered by the intruders of the intrusive frame drawn
    /// with `seed`, in placement order (overlaps repeat).
    fn blobs(&self, seed: u64) -> Vec<(usize, usize, usize, usize)> {
        let (h, w) = (self.spec.height, self.spec.width);
        let b = &self.spec.blobs;
        let mut rng = rng_at(seed, &[1]);
        let n = rng.random_range(b.count[0]..=b.count[1]);
        let cap = (self.spec.sparsity_cap * (h * w) as f64).ceil() as usize;
        let mut covered = vec![false; h * w];
        let mut used = 0;
        let mut out = Vec::new();
        for _ in 0..n {
            let bh = rng.random_range(b.size[0]..=b.size[1]);
            let bw = rng.random_range(b.size[0]..=b.size[1]);
            let centre = self.track_pixels[rng.random_range(0..self.track_pixels.len())];
            let y0 = (centre / w).saturating_sub(bh / 2).min(h - bh);
            let x0 = (centre % w).saturating_sub(bw / 2).min(w - bw);
            let fresh = (y0..y0 + bh)
                .flat_map(|y| (x0..x0 + bw).map(move |x| y * w + x))
                .filter(|&i| !covered[i])
                .count();
            if used + fresh >= cap {
                break;
            }
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    covered[y * w + x] = true;
                }
            }
            used += fresh;
            out.push((y0, x0, bh, bw));
        }
        out
    }
}

fn check_mask(mask: &Tensor, h: usize, w: usize) -> Result<()> {
    if mask.shape() != [1, h, w] {
        return Err(Error::pre(format!(
            "mask shape {:?} does not match frame geometry [1, {h}, {w}]",
            mask.shape()
        )));
    }
    if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::pre("mask values must lie in [0, 1]"));
    }
    Ok(())
}

/// Draws one frame. Pixel noise depends on `seed` only, so the intrusive and
/// non-intrusive frames of one seed differ exactly on the intruder footprint.
pub fn sample_frame(gen: &SceneGenerator, polarity: Polarity, seed: u64) -> LabeledFrame {
    let spec = &gen.spec;
    let (h, w) = (spec.height, spec.width);
    let mut img = gen.background.clone();
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated std");
        let mut rng = rng_at(seed, &[0]);
        for v in img.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    if polarity == Polarity::Intrusive {
        let data = img.data_mut();
        for (y0, x0, bh, bw) in gen.blobs(seed) {
            for (ch, colour) in gen.blob_color.iter().enumerate() {
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        data[(ch * h + y) * w + x] += colour;
                    }
                }
            }
        }
    }
    let frame = LabeledFrame::new(img, polarity, false);
    match &gen.mask {
        Some(m) => attach_mask_channel(&frame, m).expect("mask checked on attach"),
        None => frame,
    }
}

/// Draws a task of `k` + `k` support and `q` + `q` query frames, intrusive
/// frames first. One coin decides whether the whole task's labels swap.
pub fn build_task(gen: &SceneGenerator, k: usize, q: usize, shuffle_prob: f64, seed: u64) -> Result<TaskSet> {
    if !(0.0..=1.0).contains(&shuffle_prob) {
        return Err(Error::pre(format!("shuffle probability {shuffle_prob} outside [0, 1]")));
    }
    if k == 0 {
        return Err(Error::pre("K must be positive"));
    }
    let shuffled = rng_at(seed, &[0]).random::<f64>() < shuffle_prob;
    let draw = |set: u64, n: usize| -> Vec<LabeledFrame> {
        [Polarity::Intrusive, Polarity::NonIntrusive]
            .into_iter()
            .flat_map(|p| {
                (0..n).map(move |i| {
                    let mut f = sample_frame(gen, p, derive(seed, &[1, set, p.class() as u64, i as u64]));
                    f.label = p.label(shuffled);
                    f
                })
            })
            .collect()
    };
    TaskSet::new(draw(0, k), draw(1, q), shuffled, gen.scene_id)
}

/// Appends `mask` (`[1, H, W]`, values in `[0, 1]`) as a fourth channel.
pub fn attach_mask_channel(frame: &LabeledFrame, mask: &Tensor) -> Result<LabeledFrame> {
    let s = frame.image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::pre(format!("mask attaches to 3-channel frames, got {s:?}")));
    }
    check_mask(mask, s[1], s[2])?;
    let mut data = frame.image.data().to_vec();
    data.extend_from_slice(mask.data());
    Ok(LabeledFrame {
        image: Tensor::new(vec![4, s[1], s[2]], data)?,
        ..frame.clone()
    })
}

/// Where the track mask for a scene comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "path", rename_all = "snake_case")]
pub enum MaskProvider {
    /// The scene's own track polygon.
    SyntheticPolygon,
    /// An 8-bit PGM of the scene's geometry.
    File(std::path::PathBuf),
}

impl MaskProvider {
    pub fn mask_for(&self, gen: &SceneGenerator) -> Result<Tensor> {
        match self {
            MaskProvider::SyntheticPolygon => Ok(gen.track.clone()),
            MaskProvider::File(path) => {
                let m = crate::io::read_pgm(path)?;
                let (h, w) = (gen.spec.height, gen.spec.width);
                if m.shape() != [1, h, w] {
                    return Err(Error::Format {
                        path: path.clone(),
                        reason: format!("mask is {:?}, scene is {h}x{w}", &m.shape()[1..]),
                    });
                }
                Ok(m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneSpec {
        SceneSpec {
            noise_std: 0.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn deterministic_background() {
        let a = generate_scene(&SceneSpec::default(), 4).unwrap();
        let b = generate_scene(&SceneSpec::default(), 4).unwrap();
        let c = generate_scene(&SceneSpec::default(), 5).unwrap();
        assert_eq!(a.background(), b.background());
        assert_ne!(a.background(), c.background());
        assert!(a.background().data().iter().all(|v| (0.05..=0.6).contains(v)));
    }

    #[test]
    fn quiet_negative_is_background() {
        let g = generate_scene(&quiet(), 1).unwrap();
        for s in 0..5 {
            assert_eq!(&sample_frame(&g, Polarity::NonIntrusive, s).image, g.background());
        }
    }

    #[test]
    fn single_small_blob_touches_four_pixels() {
        let spec = SceneSpec {
            blobs: BlobSpec {
                count: [1, 1],
                size: [2, 2],
                intensity: [0.3, 0.3],
                dark_prob: 0.0,
            },
            ..quiet()
        };
        let g = generate_scene(&spec, 2).unwrap();
        let f = sample_frame(&g, Polarity::Intrusive, 9);
        let diff = f.image.sub(g.background()).unwrap();
        let hw = spec.pixels();
        let touched = (0..hw)
            .filter(|&i| (0..3).any(|c| diff.data()[c * hw + i] != 0.0))
            .count();
        assert_eq!(touched, 4);
        assert_eq!(f.label, [1.0, 0.0]);
    }

    #[test]
    fn spec_rejects_oversized_blobs() {
        let mut s = SceneSpec::default();
        s.blobs.size = [3, 100];
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        s.blobs.size = [3, 40];
        assert!(s.validate().is_err());
        assert!(SceneSpec { noise_std: -1.0, ..SceneSpec::default() }.validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: SceneSpec = serde_json::from_str(r#"{"noise_std": 0.1, "blobs": {"count": [2, 3]}}"#).unwrap();
        assert_eq!(s.noise_std, 0.1);
        assert_eq!(s.blobs.count, [2, 3]);
        assert_eq!(s.blobs.size, BlobSpec::default().size);
        assert_eq!(s.height, 48);
    }

    #[test]
    fn shuffle_extremes() {
        let g = generate_scene(&SceneSpec::default(), 3).unwrap();
        for s in 0..10 {
            let t = build_task(&g, 2, 3, 0.0, s).unwrap();
            assert!(!t.shuffled);
            assert!(t.frames().all(|f| (f.polarity == Polarity::Intrusive) == (f.label == [1.0, 0.0])));
            let t = build_task(&g, 2, 3, 1.0, s).unwrap();
            assert!(t.shuffled);
            assert!(t.frames().all(|f| (f.polarity == Polarity::Intrusive) == (f.label == [0.0, 1.0])));
        }
        assert!(build_task(&g, 2, 3, 1.5, 0).is_err());
    }
}
