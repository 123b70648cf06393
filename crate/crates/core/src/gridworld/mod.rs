// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic patch-grid scenes standing in for annotated photographs.
//!
//! A scene is a `G×G` grid of cells. Each object occupies an axis-aligned
//! box of cells; rendering maps every cell to a `d_vis` embedding. Object
//! cells carry their class signature (one fixed orthonormal vector per
//! class) plus isotropic noise, background cells are drawn from a fixed
//! distribution living in the orthogonal complement of the signatures.
//!
//! Per-cell randomness is drawn from a stream keyed by `(scene, seed, cell)`
//! so removing an object re-renders only that object's cells.

mod io;
mod mask;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::BoundingBox;
use crate::numerics::DenseArray;

pub use io::{read_scene_file, write_scene_file, SceneFile, SceneRecord, SCENE_SCHEMA_VERSION};
pub use mask::{box_cells, dilate, erode, mask_to_tokens, CellSet};

/// Smallest allowed object area as a fraction of the grid.
pub const MIN_AREA_FRACTION: f64 = 0.004;
/// Largest allowed object area as a fraction of the grid.
pub const MAX_AREA_FRACTION: f64 = 0.60;
/// Cosine similarity above which a cell is considered to carry a class signature.
pub const MATCH_THRESHOLD: f64 = 0.3;

pub fn area_bounds(grid_size: usize) -> (usize, usize) {
    let cells = (grid_size * grid_size) as f64;
    (
        (MIN_AREA_FRACTION * cells).ceil() as usize,
        (MAX_AREA_FRACTION * cells).floor() as usize,
    )
}

/// An explicit object request; unset fields are sampled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRequest {
    pub class_id: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenParams {
    pub grid_size: usize,
    pub num_classes: usize,
    pub d_vis: usize,
    pub signature_seed: u64,
    pub noise_scale: f64,
    pub background_scale: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub min_snr: f64,
    pub max_retries: usize,
    pub requests: Option<Vec<ObjectRequest>>,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            grid_size: 8,
            num_classes: 10,
            d_vis: 32,
            signature_seed: 0x5167_4e41,
            noise_scale: 0.05,
            background_scale: 0.3,
            min_objects: 1,
            max_objects: 3,
            min_side: 1,
            max_side: 4,
            min_snr: 5.0,
            max_retries: 1000,
            requests: None,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 4 {
            return Err(Error::Generation(format!("grid size {} < 4", self.grid_size)));
        }
        if self.num_classes < 2 {
            return Err(Error::Generation("need at least 2 classes".into()));
        }
        if self.d_vis <= self.num_classes {
            return Err(Error::Generation(format!(
                "d_vis {} must exceed class count {}",
                self.d_vis, self.num_classes
            )));
        }
        if !(self.noise_scale >= 0.0) || !(self.background_scale >= 0.0) {
            return Err(Error::Generation("negative noise".into()));
        }
        if self.noise_scale > 0.0 && 1.0 / self.noise_scale < self.min_snr {
            return Err(Error::Generation(format!(
                "signal-to-noise {} below minimum {}",
                1.0 / self.noise_scale,
                self.min_snr
            )));
        }
        let (lo, hi) = area_bounds(self.grid_size);
        if lo > hi {
            return Err(Error::Generation(format!("area filter empty: [{lo}, {hi}]")));
        }
        if self.min_side == 0 || self.min_side > self.max_side || self.max_side > self.grid_size {
            return Err(Error::Generation("invalid side range".into()));
        }
        if self.min_objects > self.max_objects || self.max_objects > self.num_classes {
            return Err(Error::Generation("invalid object count range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class_id: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub grid_size: usize,
    pub objects: Vec<ObjectSpec>,
    pub background_seed: u64,
    pub noise_scale: f64,
}

impl Scene {
    pub fn object(&self, class_id: usize) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.class_id == class_id)
    }

    /// Per-cell object index, `None` for background.
    pub fn cell_labels(&self) -> Vec<Option<usize>> {
        let g = self.grid_size;
        let mut labels = vec![None; g * g];
        for (i, o) in self.objects.iter().enumerate() {
            for c in box_cells(&o.bbox, g) {
                labels[c] = Some(i);
            }
        }
        labels
    }
}

/// Source/base pair differing only inside the target object's box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub target_class: usize,
    pub render_seed: u64,
    pub source: Scene,
    pub base: Scene,
}

/// Rendered visual tokens for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub grid_size: usize,
    /// Shape `(G·G, d_vis)`, row index `y·G + x`.
    pub embeddings: DenseArray,
    pub cell_labels: Vec<Option<usize>>,
}

/// Orthonormal basis of the visual space; the first `C` vectors are class signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureBank {
    basis: Vec<Vec<f64>>,
    num_classes: usize,
}

impl SignatureBank {
    pub fn new(d_vis: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes > d_vis {
            return Err(Error::Generation("more classes than visual dimensions".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d_vis);
        while basis.len() < d_vis {
            let mut v: Vec<f64> = (0..d_vis).map(|_| rng.sample(StandardNormal)).collect();
            // two Gram-Schmidt passes for orthogonality to rounding precision
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                v.iter_mut().for_each(|x| *x /= n);
                basis.push(v);
            }
        }
        Ok(Self { basis, num_classes })
    }

    pub fn d_vis(&self) -> usize {
        self.basis.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn signature(&self, class_id: usize) -> &[f64] {
        &self.basis[class_id]
    }

    pub fn signatures(&self) -> &[Vec<f64>] {
        &self.basis[..self.num_classes]
    }

    /// Basis of the orthogonal complement of the signatures.
    pub fn complement(&self) -> &[Vec<f64>] {
        &self.basis[self.num_classes..]
    }
}

/// Deterministic seed for an independent stream derived from `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(mix(base) ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn cell_rng(scene_seed: u64, render_seed: u64, cell: usize, stream: u64) -> ChaCha8Rng {
    let s = mix(mix(scene_seed) ^ mix(render_seed.wrapping_add(0x51)) ^ mix(cell as u64) ^ stream);
    ChaCha8Rng::seed_from_u64(s)
}

/// Generation parameters together with the signature bank they imply.
#[derive(Debug, Clone)]
pub struct World {
    pub params: GenParams,
    pub bank: SignatureBank,
}

impl World {
    pub fn new(params: GenParams) -> Result<Self> {
        params.validate()?;
        let bank = SignatureBank::new(params.d_vis, params.num_classes, params.signature_seed)?;
        Ok(Self { params, bank })
    }

    pub fn grid_size(&self) -> usize {
        self.params.grid_size
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    /// Samples a scene that satisfies the area and uniqueness filters.
    pub fn generate_scene(&self, rng_seed: u64) -> Result<Scene> {
        let p = &self.params;
        let g = p.grid_size;
        let (min_area, max_area) = area_bounds(g);
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);

        let requests: Vec<ObjectRequest> = match &p.requests {
            Some(r) => r.clone(),
            None => {
                let n = rng.gen_range(p.min_objects..=p.max_objects);
                vec![ObjectRequest::default(); n]
            }
        };
        let mut fixed: Vec<usize> = requests.iter().filter_map(|r| r.class_id).collect();
        fixed.sort_unstable();
        if fixed.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Generation(
                "two objects requested with the same class".into(),
            ));
        }
        if fixed.iter().any(|&c| c >= p.num_classes) {
            return Err(Error::Generation("requested class out of range".into()));
        }
        if requests.len() > p.num_classes {
            return Err(Error::Generation("more objects than classes".into()));
        }

        for _ in 0..p.max_retries.max(1) {
            let mut used: Vec<usize> = fixed.clone();
            let mut occupied = vec![false; g * g];
            let mut objects = Vec::with_capacity(requests.len());
            let mut ok = true;
            for r in &requests {
                let class_id = match r.class_id {
                    Some(c) => c,
                    None => {
                        let free: Vec<usize> =
                            (0..p.num_classes).filter(|c| !used.contains(c)).collect();
                        let c = free[rng.gen_range(0..free.len())];
                        used.push(c);
                        c
                    }
                };
                let w = r.width.unwrap_or_else(|| rng.gen_range(p.min_side..=p.max_side));
                let h = r.height.unwrap_or_else(|| rng.gen_range(p.min_side..=p.max_side));
                if w == 0 || h == 0 || w > g || h > g {
                    ok = false;
                    break;
                }
                let area = w * h;
                if area < min_area || area > max_area {
                    ok = false;
                    break;
                }
                let x0 = rng.gen_range(0..=g - w);
                let y0 = rng.gen_range(0..=g - h);
                let bbox = BoundingBox::new(x0, y0, x0 + w - 1, y0 + h - 1);
                let cells = box_cells(&bbox, g);
                if cells.iter().any(|&c| occupied[c]) {
                    ok = false;
                    break;
                }
                for &c in &cells {
                    occupied[c] = true;
                }
                objects.push(ObjectSpec { class_id, bbox });
            }
            if ok {
                return Ok(Scene {
                    grid_size: g,
                    objects,
                    background_seed: rng.gen(),
                    noise_scale: p.noise_scale,
                });
            }
        }
        Err(Error::Generation(format!(
            "no valid scene after {} attempts (area filter [{min_area}, {max_area}])",
            p.max_retries
        )))
    }

    fn background_cell(&self, scene: &Scene, render_seed: u64, cell: usize) -> Vec<f64> {
        let mut rng = cell_rng(scene.background_seed, render_seed, cell, 0xb6);
        let d = self.bank.d_vis();
        let mut v = vec![0.0; d];
        for b in self.bank.complement() {
            let a: f64 = rng.sample::<f64, _>(StandardNormal) * self.params.background_scale;
            v.iter_mut().zip(b).for_each(|(x, y)| *x += a * y);
        }
        for x in v.iter_mut() {
            *x += rng.sample::<f64, _>(StandardNormal) * scene.noise_scale;
        }
        v
    }

    fn object_cell(&self, scene: &Scene, render_seed: u64, cell: usize, class_id: usize) -> Vec<f64> {
        let mut rng = cell_rng(scene.background_seed, render_seed, cell, 0x0b ^ (class_id as u64) << 8);
        self.bank
            .signature(class_id)
            .iter()
            .map(|s| s + rng.sample::<f64, _>(StandardNormal) * scene.noise_scale)
            .collect()
    }

    /// Renders the scene's visual tokens.
    pub fn render_tokens(&self, scene: &Scene, rng_seed: u64) -> TokenGrid {
        let g = scene.grid_size;
        let labels = scene.cell_labels();
        let d = self.bank.d_vis();
        let mut data = Vec::with_capacity(g * g * d);
        for (cell, label) in labels.iter().enumerate() {
            let v = match label {
                Some(i) => self.object_cell(scene, rng_seed, cell, scene.objects[*i].class_id),
                None => self.background_cell(scene, rng_seed, cell),
            };
            data.extend(v);
        }
        TokenGrid {
            grid_size: g,
            embeddings: DenseArray::new(vec![g * g, d], data).expect("grid shape"),
            cell_labels: labels,
        }
    }

    /// Builds the object-removed counterpart of `scene` for `target_class`.
    pub fn make_control_pair(&self, scene: &Scene, target_class: usize, rng_seed: u64) -> Result<ScenePair> {
        if scene.object(target_class).is_none() {
            return Err(Error::Lookup(format!(
                "class {target_class} not present in scene"
            )));
        }
        let mut base = scene.clone();
        base.objects.retain(|o| o.class_id != target_class);
        Ok(ScenePair {
            target_class,
            render_seed: rng_seed,
            source: scene.clone(),
            base,
        })
    }

    /// Largest cosine similarity between any cell and any class signature.
    pub fn max_signature_cosine(&self, grid: &TokenGrid, cells: impl Iterator<Item = usize>) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for c in cells {
            let row = grid.embeddings.row(c);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for s in self.bank.signatures() {
                let d: f64 = row.iter().zip(s).map(|(a, b)| a * b).sum();
                best = best.max(d / n.max(1e-300));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(GenParams::default()).unwrap()
    }

    #[test]
    fn signatures_are_orthonormal() {
        let w = world();
        let b = &w.bank.basis;
        for i in 0..b.len() {
            for j in 0..b.len() {
                let d: f64 = b[i].iter().zip(&b[j]).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12, "{i} {j} {d}");
            }
        }
    }

    #[test]
    fn requested_two_by_two_object_passes_filter() {
        let mut p = GenParams::default();
        p.requests = Some(vec![ObjectRequest {
            class_id: Some(3),
            width: Some(2),
            height: Some(2),
        }]);
        let w = World::new(p).unwrap();
        let s = w.generate_scene(11).unwrap();
        assert_eq!(s.objects.len(), 1);
        assert_eq!(s.objects[0].bbox.area(), 4);
        // 4 / 64 = 6.25% lies inside [0.4%, 60%]
        let frac = 4.0 / 64.0;
        assert!((MIN_AREA_FRACTION..=MAX_AREA_FRACTION).contains(&frac));
    }

    #[test]
    fn duplicate_class_request_fails() {
        let mut p = GenParams::default();
        let r = ObjectRequest {
            class_id: Some(1),
            ..Default::default()
        };
        p.requests = Some(vec![r.clone(), r]);
        let w = World::new(p).unwrap();
        assert!(matches!(w.generate_scene(0), Err(Error::Generation(_))));
    }

    #[test]
    fn oversized_request_fails_after_retries() {
        let mut p = GenParams::default();
        p.max_retries = 5;
        p.requests = Some(vec![ObjectRequest {
            class_id: None,
            width: Some(7),
            height: Some(7),
        }]);
        let w = World::new(p).unwrap();
        assert!(matches!(w.generate_scene(0), Err(Error::Generation(_))));
    }

    #[test]
    fn generation_and_rendering_are_deterministic() {
        let w = world();
        let a = w.generate_scene(42).unwrap();
        assert_eq!(a, w.generate_scene(42).unwrap());
        assert_eq!(w.render_tokens(&a, 9), w.render_tokens(&a, 9));
    }

    #[test]
    fn zero_noise_object_cells_equal_signature() {
        let p = GenParams {
            noise_scale: 0.0,
            ..GenParams::default()
        };
        let w = World::new(p).unwrap();
        let s = w.generate_scene(3).unwrap();
        let grid = w.render_tokens(&s, 1);
        for (cell, label) in grid.cell_labels.iter().enumerate() {
            if let Some(i) = label {
                assert_eq!(grid.embeddings.row(cell), w.bank.signature(s.objects[*i].class_id));
            }
        }
    }

    #[test]
    fn filter_conformance_over_many_scenes() {
        let w = world();
        let (lo, hi) = area_bounds(8);
        for seed in 0..1000 {
            let s = w.generate_scene(seed).unwrap();
            let mut classes: Vec<usize> = s.objects.iter().map(|o| o.class_id).collect();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), s.objects.len());
            let mut seen = [false; 64];
            for o in &s.objects {
                assert!(o.bbox.area() >= lo && o.bbox.area() <= hi);
                for c in box_cells(&o.bbox, 8) {
                    assert!(!seen[c], "overlap in scene {seed}");
                    seen[c] = true;
                }
            }
        }
    }

    #[test]
    fn background_never_matches_a_signature() {
        let p = GenParams {
            requests: Some(vec![]),
            ..GenParams::default()
        };
        let w = World::new(p).unwrap();
        let mut worst = f64::NEG_INFINITY;
        for seed in 0..1000 {
            let s = w.generate_scene(seed).unwrap();
            let grid = w.render_tokens(&s, seed);
            worst = worst.max(w.max_signature_cosine(&grid, 0..64));
        }
        assert!(worst < MATCH_THRESHOLD, "max cosine {worst}");
    }

    #[test]
    fn control_pair_differs_exactly_on_target_cells() {
        let w = world();
        let mut checked = 0;
        for seed in 0..50 {
            let s = w.generate_scene(seed).unwrap();
            for o in &s.objects {
                let pair = w.make_control_pair(&s, o.class_id, seed * 7).unwrap();
                let a = w.render_tokens(&pair.source, pair.render_seed);
                let b = w.render_tokens(&pair.base, pair.render_seed);
                let diff: Vec<usize> = (0..64).filter(|&c| a.embeddings.row(c) != b.embeddings.row(c)).collect();
                assert_eq!(diff, box_cells(&o.bbox, 8).into_iter().collect::<Vec<_>>());
                checked += 1;
            }
        }
        assert!(checked > 50);
        let s = w.generate_scene(0).unwrap();
        let absent = (0..10).find(|c| s.object(*c).is_none()).unwrap();
        assert!(matches!(w.make_control_pair(&s, absent, 0), Err(Error::Lookup(_))));
    }
}
