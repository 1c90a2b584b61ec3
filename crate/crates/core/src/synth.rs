//! Deterministic synthetic scenes: colored geometric shapes (circle,
//! rectangle, triangle) with instance masks and categories, the two
//! in-context pairing regimes used for training, and short videos with
//! motion and brightness drift for tracking evaluation.
//!
//! Category ids map to shape kinds (1 circle, 2 rectangle, 3 triangle) and
//! to a color family, so even a linear encoder separates categories.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Image;
use crate::error::{Error, Result};
use crate::interact::InContextExample;
use crate::mask::Mask;
use crate::pnm;
use crate::rngutil::DetRng;

pub const BACKGROUND: [f64; 3] = [0.06, 0.06, 0.09];

/// Minimum visible pixels per shape; shapes squeezed below this resample.
const MIN_VISIBLE: usize = 4;
const PLACEMENT_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Allowed category ids, each in {1, 2, 3}.
    pub categories: Vec<u32>,
    /// Shape extent range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    #[serde(default)]
    pub allow_overlap: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 64,
            height: 64,
            min_shapes: 1,
            max_shapes: 3,
            categories: vec![1, 2, 3],
            min_size: 12,
            max_size: 28,
            allow_overlap: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("canvas must be non-empty".to_string()));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "bad shape count range [{}, {}]",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.categories.is_empty() || self.categories.iter().any(|&c| !(1..=3).contains(&c)) {
            return Err(Error::Config(format!(
                "categories must be a non-empty subset of {{1,2,3}}, got {:?}",
                self.categories
            )));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "bad size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        if self.max_size >= self.width.min(self.height) {
            return Err(Error::Config("shapes must fit the canvas".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub mask: Mask,
    pub category: u32,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub seed: u64,
    /// Shapes abandoned after the placement budget.
    pub dropped: usize,
}

impl Scene {
    pub fn categories(&self) -> Vec<u32> {
        let mut cats: Vec<u32> = self.annotations.iter().map(|a| a.category).collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }

    /// View the scene as an in-context example (all instances).
    pub fn as_example(&self) -> InContextExample {
        InContextExample {
            image: self.image.clone(),
            masks: self.annotations.iter().map(|a| a.mask.clone()).collect(),
            categories: self.annotations.iter().map(|a| a.category).collect(),
        }
    }
}

#[derive(Debug, Clone)]
struct ShapeSpec {
    category: u32,
    cx: f64,
    cy: f64,
    /// Circle radius / rect half-width / triangle half-base.
    a: f64,
    /// Rect half-height / triangle height (unused for circles).
    b: f64,
    color: [f64; 3],
}

impl ShapeSpec {
    fn contains(&self, x: usize, y: usize) -> bool {
        let px = x as f64 + 0.5;
        let py = y as f64 + 0.5;
        match self.category {
            1 => {
                let dx = px - self.cx;
                let dy = py - self.cy;
                dx * dx + dy * dy <= self.a * self.a
            }
            2 => (px - self.cx).abs() <= self.a && (py - self.cy).abs() <= self.b,
            3 => {
                // Upward triangle: apex at cy - b/2, base at cy + b/2.
                let top = self.cy - self.b / 2.0;
                let t = (py - top) / self.b;
                if !(0.0..=1.0).contains(&t) {
                    return false;
                }
                (px - self.cx).abs() <= self.a * t
            }
            _ => false,
        }
    }

    fn cells(&self, w: usize, h: usize) -> Vec<usize> {
        let mut cells = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if self.contains(x, y) {
                    cells.push(y * w + x);
                }
            }
        }
        cells
    }
}

fn base_color(category: u32) -> [f64; 3] {
    match category {
        1 => [0.90, 0.16, 0.16],
        2 => [0.16, 0.85, 0.20],
        _ => [0.20, 0.26, 0.90],
    }
}

fn sample_shape(cfg: &SceneConfig, rng: &mut DetRng) -> ShapeSpec {
    let category = cfg.categories[rng.below(cfg.categories.len())];
    let size = rng.int_range(cfg.min_size, cfg.max_size) as f64;
    let (a, b) = match category {
        1 => (size / 2.0, size / 2.0),
        2 => (
            size / 2.0,
            rng.int_range(cfg.min_size, cfg.max_size) as f64 / 2.0,
        ),
        _ => (size / 2.0, rng.int_range(cfg.min_size, cfg.max_size) as f64),
    };
    let (half_w, half_h) = match category {
        1 => (a, a),
        2 => (a, b),
        _ => (a, b / 2.0),
    };
    let cx = rng.uniform(half_w, cfg.width as f64 - half_w);
    let cy = rng.uniform(half_h, cfg.height as f64 - half_h);
    // Per-instance brightness plus mild per-channel jitter: categories stay
    // linearly separable by hue while each instance keeps a distinguishable
    // appearance (identity matching is ill-posed with brightness alone).
    let brightness = rng.uniform(0.6, 1.0);
    let base = base_color(category);
    let mut color = [0.0; 3];
    for ch in 0..3 {
        color[ch] = (base[ch] * brightness * rng.uniform(0.85, 1.15)).clamp(0.0, 1.0);
    }
    ShapeSpec {
        category,
        cx,
        cy,
        a,
        b,
        color,
    }
}

/// Place shapes one by one, respecting the overlap policy and the minimum
/// visible-pixel rule for already-placed shapes.
fn place_shapes(cfg: &SceneConfig, rng: &mut DetRng) -> (Vec<ShapeSpec>, usize) {
    let n_target = rng.int_range(cfg.min_shapes, cfg.max_shapes);
    let mut placed: Vec<ShapeSpec> = Vec::new();
    let mut owner: Vec<Option<usize>> = vec![None; cfg.width * cfg.height];
    let mut visible: Vec<usize> = Vec::new();
    let mut dropped = 0usize;
    'shapes: for _ in 0..n_target {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let spec = sample_shape(cfg, rng);
            let cells = spec.cells(cfg.width, cfg.height);
            if cells.len() < MIN_VISIBLE {
                continue;
            }
            if !cfg.allow_overlap && cells.iter().any(|&c| owner[c].is_some()) {
                continue;
            }
            if cfg.allow_overlap {
                // Later shapes occlude; every earlier shape must stay visible.
                let mut losses = vec![0usize; placed.len()];
                for &c in &cells {
                    if let Some(o) = owner[c] {
                        losses[o] += 1;
                    }
                }
                let squeezed = (0..placed.len())
                    .any(|i| visible[i] - losses[i] < MIN_VISIBLE);
                if squeezed {
                    continue;
                }
                for (i, l) in losses.iter().enumerate() {
                    visible[i] -= l;
                }
            }
            let idx = placed.len();
            for &c in &cells {
                owner[c] = Some(idx);
            }
            visible.push(cells.len());
            placed.push(spec);
            continue 'shapes;
        }
        dropped += 1;
    }
    (placed, dropped)
}

/// Paint shapes back-to-front and derive visible masks from ownership.
fn rasterize(shapes: &[ShapeSpec], width: usize, height: usize) -> (Image, Vec<Mask>) {
    let mut owner: Vec<Option<usize>> = vec![None; width * height];
    for (idx, spec) in shapes.iter().enumerate() {
        for c in spec.cells(width, height) {
            owner[c] = Some(idx);
        }
    }
    let mut image = Image::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let color = match owner[y * width + x] {
                Some(i) => shapes[i].color,
                None => BACKGROUND,
            };
            for ch in 0..3 {
                image.set(y, x, ch, color[ch]);
            }
        }
    }
    let masks = (0..shapes.len())
        .map(|i| {
            Mask::from_bits(
                height,
                width,
                owner.iter().map(|o| *o == Some(i)).collect(),
            )
            .expect("owner fills the grid")
        })
        .collect();
    (image, masks)
}

/// Generate one scene; identical seeds give bit-identical scenes.
pub fn gen_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = DetRng::new(seed);
    let (shapes, dropped) = place_shapes(cfg, &mut rng);
    if shapes.is_empty() {
        return Err(Error::Generation(format!(
            "no shape placed within budget (seed {seed})"
        )));
    }
    let (image, masks) = rasterize(&shapes, cfg.width, cfg.height);
    let annotations = shapes
        .iter()
        .zip(masks)
        .map(|(s, mask)| Annotation {
            mask,
            category: s.category,
        })
        .collect();
    Ok(Scene {
        image,
        annotations,
        seed,
        dropped,
    })
}

// ---------------------------------------------------------------------------
// In-context pairing
// ---------------------------------------------------------------------------

/// A reference example plus target ground truth at image resolution.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub reference: InContextExample,
    pub target_image: Image,
    /// Target instances of the referenced categories.
    pub target_instances: Vec<Annotation>,
    /// Identity targets aligned with `reference.masks`; `None` = vanished.
    pub id_targets: Vec<Option<Mask>>,
}

/// An instance survives a view when at least this fraction of its original
/// area stays inside the crop window.
pub const SURVIVAL_FRACTION: f64 = 0.25;

struct View {
    image: Image,
    masks: Vec<Mask>,
    visible_fraction: Vec<f64>,
}

fn apply_view(scene: &Scene, x0: usize, y0: usize, cw: usize, ch: usize, flip: bool) -> View {
    let w = scene.image.width();
    let h = scene.image.height();
    let src_y: Vec<usize> = (0..h)
        .map(|y| y0 + (((y as f64 + 0.5) * ch as f64 / h as f64) as usize).min(ch - 1))
        .collect();
    let src_x: Vec<usize> = (0..w)
        .map(|x| {
            let xx = if flip { w - 1 - x } else { x };
            x0 + (((xx as f64 + 0.5) * cw as f64 / w as f64) as usize).min(cw - 1)
        })
        .collect();
    let mut image = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for chan in 0..3 {
                image.set(y, x, chan, scene.image.get(src_y[y], src_x[x], chan));
            }
        }
    }
    let mut masks = Vec::with_capacity(scene.annotations.len());
    let mut visible_fraction = Vec::with_capacity(scene.annotations.len());
    for ann in &scene.annotations {
        let mut in_window = 0usize;
        for yy in y0..y0 + ch {
            for xx in x0..x0 + cw {
                if ann.mask.get(yy, xx) {
                    in_window += 1;
                }
            }
        }
        visible_fraction.push(in_window as f64 / ann.mask.count() as f64);
        masks.push(Mask::from_fn(h, w, |y, x| ann.mask.get(src_y[y], src_x[x])));
    }
    View {
        image,
        masks,
        visible_fraction,
    }
}

fn sample_view(scene: &Scene, rng: &mut DetRng) -> View {
    let w = scene.image.width();
    let h = scene.image.height();
    let scale = rng.uniform(0.5, 1.0);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let x0 = rng.below(w - cw + 1);
    let y0 = rng.below(h - ch + 1);
    let flip = rng.chance(0.5);
    apply_view(scene, x0, y0, cw, ch, flip)
}

fn survives(view: &View, idx: usize) -> bool {
    view.visible_fraction[idx] >= SURVIVAL_FRACTION && !view.masks[idx].is_empty()
}

fn pair_from_views(scene: &Scene, ref_view: View, tgt_view: View) -> Result<TrainingPair> {
    let survivors: Vec<usize> = (0..scene.annotations.len())
        .filter(|&i| survives(&ref_view, i))
        .collect();
    if survivors.is_empty() {
        return Err(Error::Sampling(
            "no instance survives in the reference view".to_string(),
        ));
    }
    let reference = InContextExample {
        image: ref_view.image,
        masks: survivors.iter().map(|&i| ref_view.masks[i].clone()).collect(),
        categories: survivors
            .iter()
            .map(|&i| scene.annotations[i].category)
            .collect(),
    };
    let ref_cats: Vec<u32> = reference.categories.clone();
    let mut target_instances = Vec::new();
    for (i, ann) in scene.annotations.iter().enumerate() {
        if survives(&tgt_view, i) && ref_cats.contains(&ann.category) {
            target_instances.push(Annotation {
                mask: tgt_view.masks[i].clone(),
                category: ann.category,
            });
        }
    }
    let id_targets = survivors
        .iter()
        .map(|&i| {
            if survives(&tgt_view, i) {
                Some(tgt_view.masks[i].clone())
            } else {
                None
            }
        })
        .collect();
    Ok(TrainingPair {
        reference,
        target_image: tgt_view.image,
        target_instances,
        id_targets,
    })
}

/// Two augmented views of the same scene; instances surviving in both views
/// become identity targets, instances missing from the target view get the
/// no-object label.
pub fn pair_same_image(scene: &Scene, rng: &mut DetRng) -> Result<TrainingPair> {
    if scene.annotations.is_empty() {
        return Err(Error::Contract("scene has no annotations".to_string()));
    }
    for _ in 0..10 {
        let ref_view = sample_view(scene, rng);
        if (0..scene.annotations.len()).any(|i| survives(&ref_view, i)) {
            let tgt_view = sample_view(scene, rng);
            return pair_from_views(scene, ref_view, tgt_view);
        }
    }
    Err(Error::Sampling(
        "no instance survived the reference view after 10 tries".to_string(),
    ))
}

/// Two different scenes sharing a category: the reference restricts to one
/// shared category (or all categories when `include_all`), the target's
/// ground truth covers the referenced categories, and every identity target
/// is no-object (distinct scenes never contain identical objects).
pub fn pair_same_category(
    scenes: &[Scene],
    rng: &mut DetRng,
    include_all: bool,
) -> Result<TrainingPair> {
    if scenes.len() < 2 {
        return Err(Error::Sampling("need at least two scenes".to_string()));
    }
    let cats: Vec<Vec<u32>> = scenes.iter().map(|s| s.categories()).collect();
    let mut chosen = None;
    for _ in 0..1000 {
        let i = rng.below(scenes.len());
        let j = rng.below(scenes.len());
        if i == j {
            continue;
        }
        let shared: Vec<u32> = cats[i]
            .iter()
            .filter(|c| cats[j].contains(c))
            .copied()
            .collect();
        if shared.is_empty() {
            continue;
        }
        let cat = shared[rng.below(shared.len())];
        chosen = Some((i, j, cat));
        break;
    }
    let (i, j, cat) = match chosen {
        Some(t) => t,
        None => {
            // Deterministic sweep before giving up.
            let mut found = None;
            'outer: for i in 0..scenes.len() {
                for j in 0..scenes.len() {
                    if i == j {
                        continue;
                    }
                    if let Some(&c) = cats[i].iter().find(|c| cats[j].contains(c)) {
                        found = Some((i, j, c));
                        break 'outer;
                    }
                }
            }
            found.ok_or_else(|| {
                Error::Sampling("no category-sharing scene pair exists".to_string())
            })?
        }
    };
    let reference_scene = &scenes[i];
    let keep: Vec<usize> = (0..reference_scene.annotations.len())
        .filter(|&k| include_all || reference_scene.annotations[k].category == cat)
        .collect();
    let reference = InContextExample {
        image: reference_scene.image.clone(),
        masks: keep
            .iter()
            .map(|&k| reference_scene.annotations[k].mask.clone())
            .collect(),
        categories: keep
            .iter()
            .map(|&k| reference_scene.annotations[k].category)
            .collect(),
    };
    let ref_cats = reference.categories.clone();
    let target_scene = &scenes[j];
    let target_instances = target_scene
        .annotations
        .iter()
        .filter(|a| ref_cats.contains(&a.category))
        .cloned()
        .collect();
    Ok(TrainingPair {
        reference,
        target_image: target_scene.image.clone(),
        target_instances,
        id_targets: vec![None; keep.len()],
    })
}

// ---------------------------------------------------------------------------
// Synthetic videos
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoConfig {
    pub scene: SceneConfig,
    pub frames: usize,
    /// Maximum per-axis speed in pixels per frame.
    pub max_speed: f64,
    /// Per-frame multiplicative brightness loss (appearance drift).
    pub brightness_drift: f64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            scene: SceneConfig::default(),
            frames: 8,
            max_speed: 1.5,
            brightness_drift: 0.04,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Video {
    pub frames: Vec<Image>,
    /// Per-frame, per-object visible masks (aligned object order).
    pub gt: Vec<Vec<Annotation>>,
    pub seed: u64,
}

/// Generate a video of drifting, slowly darkening shapes. Object identity
/// is the index into each frame's ground-truth list.
pub fn gen_video(cfg: &VideoConfig, seed: u64) -> Result<Video> {
    cfg.scene.validate()?;
    if cfg.frames == 0 {
        return Err(Error::Config("video needs at least one frame".to_string()));
    }
    let mut rng = DetRng::new(seed);
    let (shapes, _) = place_shapes(&cfg.scene, &mut rng);
    if shapes.is_empty() {
        return Err(Error::Generation(format!(
            "no shape placed within budget (seed {seed})"
        )));
    }
    let velocities: Vec<(f64, f64)> = (0..shapes.len())
        .map(|_| {
            (
                rng.uniform(-cfg.max_speed, cfg.max_speed),
                rng.uniform(-cfg.max_speed, cfg.max_speed),
            )
        })
        .collect();
    let w = cfg.scene.width as f64;
    let h = cfg.scene.height as f64;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let fade = (1.0 - cfg.brightness_drift * t as f64).max(0.4);
        let moved: Vec<ShapeSpec> = shapes
            .iter()
            .zip(&velocities)
            .map(|(s, &(vx, vy))| {
                let mut m = s.clone();
                let (half_w, half_h) = match s.category {
                    1 => (s.a, s.a),
                    2 => (s.a, s.b),
                    _ => (s.a, s.b / 2.0),
                };
                m.cx = (s.cx + vx * t as f64).clamp(half_w, w - half_w);
                m.cy = (s.cy + vy * t as f64).clamp(half_h, h - half_h);
                m.color = [s.color[0] * fade, s.color[1] * fade, s.color[2] * fade];
                m
            })
            .collect();
        let (image, masks) = rasterize(&moved, cfg.scene.width, cfg.scene.height);
        frames.push(image);
        gt.push(
            masks
                .into_iter()
                .zip(&shapes)
                .map(|(mask, s)| Annotation {
                    mask,
                    category: s.category,
                })
                .collect(),
        );
    }
    Ok(Video { frames, gt, seed })
}

// ---------------------------------------------------------------------------
// Scene directories
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SceneManifest {
    instances: Vec<SceneInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneInstance {
    mask_file: String,
    category: u32,
}

/// Write a scene as `image.ppm`, `mask_<i>.pgm`, and `annotations.json`.
pub fn save_scene_dir(dir: &Path, scene: &Scene) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    pnm::ppm_save(&dir.join("image.ppm"), &scene.image)?;
    let mut instances = Vec::with_capacity(scene.annotations.len());
    for (i, ann) in scene.annotations.iter().enumerate() {
        let mask_file = format!("mask_{i}.pgm");
        pnm::mask_save(&dir.join(&mask_file), &ann.mask)?;
        instances.push(SceneInstance {
            mask_file,
            category: ann.category,
        });
    }
    let manifest = SceneManifest { instances };
    std::fs::write(
        dir.join("annotations.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a scene directory back as image plus annotations.
pub fn load_scene_dir(dir: &Path) -> Result<(Image, Vec<Annotation>)> {
    let image = pnm::ppm_load(&dir.join("image.ppm"))?;
    let manifest: SceneManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("annotations.json"))?)?;
    let mut annotations = Vec::with_capacity(manifest.instances.len());
    for inst in &manifest.instances {
        annotations.push(Annotation {
            mask: pnm::mask_load(&dir.join(&inst.mask_file))?,
            category: inst.category,
        });
    }
    Ok((image, annotations))
}

/// Load a scene directory as an in-context example.
pub fn load_example_dir(dir: &Path) -> Result<InContextExample> {
    let (image, annotations) = load_scene_dir(dir)?;
    if annotations.is_empty() {
        return Err(Error::Contract(format!(
            "{} holds no instances",
            dir.display()
        )));
    }
    Ok(InContextExample {
        image,
        masks: annotations.iter().map(|a| a.mask.clone()).collect(),
        categories: annotations.iter().map(|a| a.category).collect(),
    })
}

/// Write a video directory: `frames/frame_%04d.ppm` plus per-frame ground
/// truth scene directories under `gt/frame_%04d/`.
pub fn save_video_dir(dir: &Path, video: &Video) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    for (t, frame) in video.frames.iter().enumerate() {
        pnm::ppm_save(&frames_dir.join(format!("frame_{t:04}.ppm")), frame)?;
        let scene = Scene {
            image: frame.clone(),
            annotations: video.gt[t].clone(),
            seed: video.seed,
            dropped: 0,
        };
        save_scene_dir(&dir.join("gt").join(format!("frame_{t:04}")), &scene)?;
    }
    Ok(())
}

/// Read a video directory: ordered frames plus per-frame ground truth when
/// the `gt/` subtree exists.
pub fn load_video_dir(dir: &Path) -> Result<(Vec<Image>, Option<Vec<Vec<Annotation>>>)> {
    let frames_dir = dir.join("frames");
    let mut names: Vec<String> = std::fs::read_dir(&frames_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Protocol(format!(
            "{} holds no .ppm frames",
            frames_dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(names.len());
    for n in &names {
        frames.push(pnm::ppm_load(&frames_dir.join(n))?);
    }
    let gt_dir = dir.join("gt");
    let gt = if gt_dir.is_dir() {
        let mut per_frame = Vec::with_capacity(names.len());
        for n in &names {
            let stem = n.trim_end_matches(".ppm");
            let (_, annotations) = load_scene_dir(&gt_dir.join(stem))?;
            per_frame.push(annotations);
        }
        Some(per_frame)
    } else {
        None
    };
    Ok((frames, gt))
}
