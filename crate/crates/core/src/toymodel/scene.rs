use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Bbox;
use crate::matching::GroundTruth;

/// Attempts per object before the object count is reduced.
const PLACEMENT_ATTEMPTS: usize = 100;

/// Knobs of the synthetic detection world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub d: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub min_center_distance: f64,
    pub noise_std: f64,
    pub coarse_grid: usize,
    pub fine_grid: usize,
    /// Seed of the class signature vectors, shared by every scene.
    pub signature_seed: u64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            d: 16,
            num_classes: 6,
            min_objects: 1,
            max_objects: 8,
            min_size: 0.1,
            max_size: 0.35,
            min_center_distance: 0.1,
            noise_std: 0.1,
            coarse_grid: 4,
            fine_grid: 8,
            signature_seed: 0x5eed_5167,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.d > 0
            && self.num_classes > 0
            && self.min_objects >= 1
            && self.max_objects <= 8
            && self.min_objects <= self.max_objects
            && self.min_size > 0.0
            && self.min_size <= self.max_size
            && self.max_size < 1.0
            && self.noise_std >= 0.0
            && self.coarse_grid > 0
            && self.fine_grid == 2 * self.coarse_grid;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid scene parameters: {self:?}")))
        }
    }

    /// Unit-norm signature vector per class.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
        let normal = Normal::new(0.0, 1.0).expect("valid std");
        (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.d).map(|_| normal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect()
    }
}

/// One synthetic image: objects plus two feature-map scales.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub gts: Vec<GroundTruth>,
    /// `coarse_grid × coarse_grid × d`.
    pub coarse: Tensor,
    /// `fine_grid × fine_grid × d`.
    pub fine: Tensor,
}

/// Fraction of grid cell `(gy, gx)` covered by `b`.
pub fn cell_overlap(b: &Bbox, grid: usize, gy: usize, gx: usize) -> f64 {
    let s = 1.0 / grid as f64;
    let [x1, y1, x2, y2] = b.corners();
    let (cx1, cy1) = (gx as f64 * s, gy as f64 * s);
    let ox = (x2.min(cx1 + s) - x1.max(cx1)).max(0.0);
    let oy = (y2.min(cy1 + s) - y1.max(cy1)).max(0.0);
    ox * oy / (s * s)
}

fn render(
    gts: &[GroundTruth],
    signatures: &[Vec<f64>],
    grid: usize,
    d: usize,
    noise: &mut dyn FnMut() -> f64,
) -> Tensor {
    let mut data = vec![0.0; grid * grid * d];
    for gy in 0..grid {
        for gx in 0..grid {
            let cell = &mut data[(gy * grid + gx) * d..(gy * grid + gx + 1) * d];
            for g in gts {
                let f = cell_overlap(&g.bbox, grid, gy, gx);
                if f > 0.0 {
                    cell.iter_mut()
                        .zip(&signatures[g.class])
                        .for_each(|(c, s)| *c += f * s);
                }
            }
            cell.iter_mut().for_each(|c| *c += noise());
        }
    }
    Tensor::new(&[grid, grid, d], data).expect("valid shape")
}

/// Renders the scene of `seed`. Identical seeds give bit-identical scenes.
pub fn render_scene(seed: u64, params: &SceneParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.gen_range(params.min_objects..=params.max_objects);
    let mut gts: Vec<GroundTruth> = Vec::with_capacity(wanted);
    'objects: while gts.len() < wanted {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let w = rng.gen_range(params.min_size..=params.max_size);
            let h = rng.gen_range(params.min_size..=params.max_size);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let clear = gts.iter().all(|g| {
                (g.bbox.cx() - cx).hypot(g.bbox.cy() - cy) >= params.min_center_distance
            });
            if clear {
                let class = rng.gen_range(0..params.num_classes);
                gts.push(GroundTruth {
                    bbox: Bbox::new(cx, cy, w, h)?,
                    class,
                });
                continue 'objects;
            }
        }
        warn!(
            "scene {seed}: could not place object {} after {PLACEMENT_ATTEMPTS} attempts; keeping {}",
            gts.len() + 1,
            gts.len()
        );
        break;
    }
    if gts.is_empty() {
        return Err(Error::InvalidConfig(format!("scene {seed}: no object could be placed")));
    }

    let signatures = params.signatures();
    let normal = Normal::new(0.0, params.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let std = params.noise_std;
    let mut noise = || if std > 0.0 { normal.sample(&mut rng) } else { 0.0 };
    let coarse = render(&gts, &signatures, params.coarse_grid, params.d, &mut noise);
    let fine = render(&gts, &signatures, params.fine_grid, params.d, &mut noise);
    Ok(Scene {
        seed,
        gts,
        coarse,
        fine,
    })
}

/// Derives a child seed; stable across platforms.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over a combined key
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
