//! Synthetic sequences of textured disks moving over a textured background,
//! with exact ground-truth masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor_io::{ImageFrame, LabelMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiskTrack {
    pub radius: f64,
    /// Centre in the first frame.
    pub start: (f64, f64),
    /// Horizontal and vertical displacement per frame.
    pub velocity: (f64, f64),
    /// Vertical sinusoidal sway amplitude and period in frames.
    pub sway: (f64, f64),
    /// Base RGB colour.
    pub color: [f64; 3],
}

impl DiskTrack {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let t = t as f64;
        let sway = if self.sway.1 > 0.0 {
            self.sway.0 * (std::f64::consts::TAU * t / self.sway.1).sin()
        } else {
            0.0
        };
        (self.start.0 + self.velocity.0 * t, self.start.1 + self.velocity.1 * t + sway)
    }

    /// Pixel `(x, y)` is inside when its centre lies within the radius.
    pub fn contains(&self, t: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center(t);
        (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Later disks are drawn over earlier ones.
    pub disks: Vec<DiskTrack>,
    pub seed: u64,
}

impl SyntheticSpec {
    /// One warm disk crossing a cool background.
    pub fn moving_disk(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let (w, h) = (width as f64, height as f64);
        let radius = 0.12 * w.min(h);
        Self {
            width,
            height,
            frames,
            disks: vec![DiskTrack {
                radius,
                start: (0.3 * w, 0.5 * h),
                velocity: (0.35 * w / frames.max(1) as f64, 0.0),
                sway: (0.08 * h, frames.max(1) as f64),
                color: [220.0, 150.0, 60.0],
            }],
            seed,
        }
    }

    /// The same layout with no motion.
    pub fn static_disk(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let mut s = Self::moving_disk(width, height, frames, seed);
        s.disks[0].velocity = (0.0, 0.0);
        s.disks[0].sway = (0.0, 0.0);
        s
    }

    /// Two disks of different colours moving in opposite directions.
    pub fn two_disks(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        let (w, h) = (width as f64, height as f64);
        let radius = 0.1 * w.min(h);
        let speed = 0.25 * w / frames.max(1) as f64;
        Self {
            width,
            height,
            frames,
            disks: vec![
                DiskTrack {
                    radius,
                    start: (0.3 * w, 0.28 * h),
                    velocity: (speed, 0.0),
                    sway: (0.0, 0.0),
                    color: [220.0, 150.0, 60.0],
                },
                DiskTrack {
                    radius,
                    start: (0.7 * w, 0.72 * h),
                    velocity: (-speed, 0.0),
                    sway: (0.0, 0.0),
                    color: [235.0, 235.0, 225.0],
                },
            ],
            seed,
        }
    }
}

pub struct SyntheticSequence {
    pub frames: Vec<ImageFrame>,
    /// Ground truth; object `i + 1` is disk `i`.
    pub masks: Vec<LabelMask>,
}

fn channel(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders the frames and masks of `spec`.
///
/// The background texture is static noise plus low-frequency ripples; each
/// disk carries its own stripe texture that moves with it.
pub fn generate(spec: &SyntheticSpec) -> SyntheticSequence {
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background: Vec<[f64; 3]> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let ripple = 18.0 * (0.11 * x).sin() * (0.07 * y).cos();
            let n: f64 = rng.random_range(-14.0..14.0);
            [45.0 + ripple + n, 75.0 + ripple + n, 150.0 - ripple + n]
        })
        .collect();
    let texel: Vec<f64> = (0..64 * 64).map(|_| rng.random_range(-12.0..12.0)).collect();

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut labels = vec![0u8; w * h];
        let mut data = Vec::with_capacity(3 * w * h);
        for y in 0..h {
            for x in 0..w {
                let mut px = background[y * w + x];
                for (d, disk) in spec.disks.iter().enumerate() {
                    if disk.contains(t, x, y) {
                        let (cx, cy) = disk.center(t);
                        let (lx, ly) = (x as f64 - cx, y as f64 - cy);
                        let stripe = 20.0 * (0.45 * (lx + 0.5 * ly)).sin();
                        let n = texel[((ly.round() as i64).rem_euclid(64) * 64 + (lx.round() as i64).rem_euclid(64)) as usize];
                        px = disk.color.map(|c| c + stripe + n);
                        labels[y * w + x] = (d + 1) as u8;
                    }
                }
                data.extend(px.map(channel));
            }
        }
        frames.push(ImageFrame::new(w, h, data).expect("rendered frame is valid"));
        masks.push(LabelMask::new(w, h, labels).expect("rendered mask is valid"));
    }
    SyntheticSequence { frames, masks }
}
