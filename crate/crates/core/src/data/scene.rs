//! Procedural person/clothing scenes.
//!
//! Each scene has one or more person silhouettes, worn garments clipped to
//! their wearer's silhouette, and optionally an unworn garment cut out of its
//! own overlay image and pasted at a random offset.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compose::{composite_overlay, sample_offset, MIN_OVERLAP};
use super::mask::BinaryMask;
use super::raster::RgbImage;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Worn,
    Unworn,
}

impl Label {
    /// Binary target; worn is the positive class.
    pub fn target(self) -> f32 {
        match self {
            Label::Worn => 1.0,
            Label::Unworn => 0.0,
        }
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub image_size: usize,
    /// Probability that a sample is an unworn pair.
    pub unworn_ratio: f64,
    /// Share of samples assigned to the validation folds.
    pub val_fraction: f64,
    pub folds: usize,
    pub min_overlap: f64,
    /// Probability that a worn sample's scene also carries an unworn garment.
    pub distractor_prob: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            unworn_ratio: 0.37,
            val_fraction: 5705.0 / (29852.0 + 5705.0),
            folds: 10,
            min_overlap: MIN_OVERLAP,
            distractor_prob: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::InvalidArgument(format!(
                "image_size {} is below the 16 pixel minimum",
                self.image_size
            )));
        }
        for (name, v) in [
            ("unworn_ratio", self.unworn_ratio),
            ("val_fraction", self.val_fraction),
            ("min_overlap", self.min_overlap),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.folds == 0 {
            return Err(Error::InvalidArgument("folds must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Garment {
    pub mask: BinaryMask,
    /// Index of the wearing person; `None` for a composited unworn garment.
    pub wearer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub persons: Vec<BinaryMask>,
    pub garments: Vec<Garment>,
}

/// One person–clothing pair with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub id: usize,
    pub scene_id: usize,
    /// Generator seed the sample was derived from.
    pub seed: u64,
    pub image: RgbImage,
    pub s_mask: BinaryMask,
    pub o_mask: BinaryMask,
    pub label: Label,
}

/// Independent random stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

type Rgb = [u8; 3];

const SKIN: [Rgb; 5] = [
    [241, 194, 167],
    [224, 172, 105],
    [198, 134, 66],
    [141, 85, 36],
    [92, 58, 38],
];

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> Rgb {
    [rng.random_range(20..236), rng.random_range(20..236), rng.random_range(20..236)]
}

fn jitter<R: Rng + ?Sized>(rng: &mut R, c: Rgb, amount: i32) -> Rgb {
    c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

#[derive(Clone, Copy)]
struct Rect {
    r0: f64,
    c0: f64,
    r1: f64,
    c1: f64,
}

impl Rect {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        y >= self.r0 && y < self.r1 && x >= self.c0 && x < self.c1
    }
}

struct Body {
    silhouette: BinaryMask,
    top: BinaryMask,
    bottom: BinaryMask,
}

/// Silhouette (head, torso, arms, legs) centered somewhere in `cols`.
fn draw_body<R: Rng + ?Sized>(rng: &mut R, size: usize, cols: (f64, f64)) -> Body {
    let s = size as f64;
    let strip = cols.1 - cols.0;
    let mut ph = s * rng.random_range(0.62..0.9);
    // keep the body, including arms, inside its strip
    let span_ratio = 0.36 + 2.0 * 0.075;
    ph = ph.min(strip * 0.95 / span_ratio);
    let r0 = rng.random_range(0.0..=(s - ph).max(0.0));
    let torso_w = ph * rng.random_range(0.26..0.34);
    let arm_w = ph * rng.random_range(0.06..0.085);
    let half_span = torso_w / 2.0 + arm_w;
    let cx = rng.random_range(cols.0 + half_span..=(cols.1 - half_span).max(cols.0 + half_span));

    let head_r = ph * 0.08;
    let head_cy = r0 + head_r;
    let neck = r0 + 2.0 * head_r;
    let hip = r0 + ph * rng.random_range(0.5..0.56);
    let torso = Rect {
        r0: neck,
        c0: cx - torso_w / 2.0,
        r1: hip,
        c1: cx + torso_w / 2.0,
    };
    let arm_end = neck + ph * rng.random_range(0.3..0.42);
    let arm_l = Rect {
        r0: neck + ph * 0.02,
        c0: torso.c0 - arm_w,
        r1: arm_end,
        c1: torso.c0,
    };
    let arm_r = Rect {
        c0: torso.c1,
        c1: torso.c1 + arm_w,
        ..arm_l
    };
    let leg_w = torso_w * rng.random_range(0.38..0.46);
    let leg_l = Rect {
        r0: hip,
        c0: torso.c0,
        r1: r0 + ph,
        c1: torso.c0 + leg_w,
    };
    let leg_r = Rect {
        c0: torso.c1 - leg_w,
        c1: torso.c1,
        ..leg_l
    };
    let head_rx = head_r * rng.random_range(0.8..1.0);
    let silhouette = BinaryMask::from_fn(size, size, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let in_head = ((y - head_cy) / head_r).powi(2) + ((x - cx) / head_rx).powi(2) <= 1.0;
        in_head || [torso, arm_l, arm_r, leg_l, leg_r].iter().any(|p| p.contains(r, c))
    });

    let sleeves = rng.random_bool(0.6);
    let top_end = rng.random_range(hip - ph * 0.04..hip + ph * 0.06);
    let top_region = Rect {
        r0: neck,
        c0: if sleeves { arm_l.c0 } else { torso.c0 },
        r1: top_end,
        c1: if sleeves { arm_r.c1 } else { torso.c1 },
    };
    let sleeve_end = neck + ph * rng.random_range(0.1..0.3);
    let top = BinaryMask::from_fn(size, size, |r, c| {
        let in_arm = arm_l.contains(r, c) || arm_r.contains(r, c);
        silhouette.get(r, c)
            && top_region.contains(r, c)
            && (!in_arm || (r as f64 + 0.5) < sleeve_end)
    });
    let bottom_region = Rect {
        r0: hip - ph * rng.random_range(0.0..0.04),
        c0: torso.c0,
        r1: hip + (r0 + ph - hip) * rng.random_range(0.45..1.0),
        c1: torso.c1,
    };
    let bottom = BinaryMask::from_fn(size, size, |r, c| {
        silhouette.get(r, c) && bottom_region.contains(r, c) && !top.get(r, c)
    });
    Body {
        silhouette,
        top,
        bottom,
    }
}

/// A free-standing garment cut-out: overlay image plus its mask.
fn draw_loose_garment<R: Rng + ?Sized>(rng: &mut R, size: usize) -> (RgbImage, BinaryMask) {
    let s = size as f64;
    let oh = ((s * rng.random_range(0.26..0.46)).round() as usize).clamp(4, size);
    let ow = ((s * rng.random_range(0.26..0.46)).round() as usize).clamp(4, size);
    let (h, w) = (oh as f64, ow as f64);
    let kind = rng.random_range(0..3u8);
    let sleeve_depth = rng.random_range(0.3..0.45);
    let leg_gap = rng.random_range(0.06..0.16);
    let mask = BinaryMask::from_fn(oh, ow, |r, c| {
        let (y, x) = ((r as f64 + 0.5) / h, (c as f64 + 0.5) / w);
        match kind {
            // shirt laid flat: body plus sleeves spread sideways
            0 => (y >= 0.08 && (0.25..0.75).contains(&x)) || (y < sleeve_depth && y >= 0.08),
            // trousers: waistband plus two legs
            1 => {
                (0.1..0.9).contains(&x)
                    && (y < 0.3 || !(0.5 - leg_gap / 2.0..0.5 + leg_gap / 2.0).contains(&x))
            }
            // folded item
            _ => {
                let dy = (y - 0.5).abs();
                let dx = (x - 0.5).abs();
                dx < 0.45 && dy < 0.45 && dx + dy < 0.8
            }
        }
    });
    let base = random_color(rng);
    let stripe = rng.random_range(2..6usize);
    let mut img = RgbImage::filled(oh, ow, base);
    for r in 0..oh {
        for c in 0..ow {
            let shade = if (r / stripe) % 2 == 0 { 0 } else { 18 };
            let px = base.map(|v| v.saturating_sub(shade));
            img.put(r, c, jitter(rng, px, 6));
        }
    }
    (img, mask)
}

fn paint<R: Rng + ?Sized>(img: &mut RgbImage, mask: &BinaryMask, color: Rgb, rng: &mut R) {
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                img.put(r, c, jitter(rng, color, 8));
            }
        }
    }
}

/// Scene with `n_persons` side by side, each wearing one or two garments,
/// plus one composited unworn garment when `with_unworn`.
pub fn generate_scene<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &GenConfig,
    n_persons: usize,
    with_unworn: bool,
) -> Result<Scene> {
    cfg.validate()?;
    if n_persons == 0 {
        return Err(Error::InvalidArgument("scene needs at least one person".into()));
    }
    let size = cfg.image_size;
    let bg = random_color(rng);
    let bg2 = random_color(rng);
    let mut image = RgbImage::filled(size, size, bg);
    for r in 0..size {
        for c in 0..size {
            let t = r as f64 / size as f64;
            let mix = |a: u8, b: u8| (a as f64 * (1.0 - t) + b as f64 * t) as u8;
            let px = [mix(bg[0], bg2[0]), mix(bg[1], bg2[1]), mix(bg[2], bg2[2])];
            image.put(r, c, jitter(rng, px, 10));
        }
    }

    let strip = size as f64 / n_persons as f64;
    let mut persons = Vec::with_capacity(n_persons);
    let mut garments = Vec::new();
    for p in 0..n_persons {
        let body = draw_body(rng, size, (p as f64 * strip, (p + 1) as f64 * strip));
        let skin = SKIN[rng.random_range(0..SKIN.len())];
        paint(&mut image, &body.silhouette, skin, rng);
        let choice = rng.random_range(0..3u8);
        let mut worn = Vec::new();
        let top_nonempty = !body.top.is_empty();
        if (choice != 1 || body.bottom.is_empty()) && top_nonempty {
            worn.push(body.top);
        }
        if (choice != 0 || !top_nonempty) && !body.bottom.is_empty() {
            worn.push(body.bottom);
        }
        for m in worn {
            paint(&mut image, &m, random_color(rng), rng);
            garments.push(Garment {
                mask: m,
                wearer: Some(p),
            });
        }
        persons.push(body.silhouette);
    }

    if with_unworn {
        let (overlay, mask) = draw_loose_garment(rng, size);
        let mut attempts = 0;
        let (composited, placed) = loop {
            attempts += 1;
            if attempts > 200 {
                return Err(Error::InvalidArgument(
                    "could not place the unworn garment visibly".into(),
                ));
            }
            let off = sample_offset(rng, overlay.dims(), image.dims(), cfg.min_overlap)?;
            let (img, placed) = composite_overlay(&image, &overlay, &mask, off)?;
            // at least a quarter of the garment must remain visible
            if placed.count() * 4 >= mask.count() {
                break (img, placed);
            }
        };
        image = composited;
        garments.push(Garment {
            mask: placed,
            wearer: None,
        });
    }
    Ok(Scene {
        image,
        persons,
        garments,
    })
}

/// Sample `index` of the dataset generated from `seed`.
pub fn generate_sample(seed: u64, index: usize, cfg: &GenConfig) -> Result<PairSample> {
    cfg.validate()?;
    let mut rng = sample_rng(seed, index as u64);
    let label = if rng.random_bool(cfg.unworn_ratio) {
        Label::Unworn
    } else {
        Label::Worn
    };
    let with_unworn = label == Label::Unworn || rng.random_bool(cfg.distractor_prob);
    let scene = generate_scene(&mut rng, cfg, 1, with_unworn)?;
    let o_mask = match label {
        Label::Unworn => scene
            .garments
            .iter()
            .find(|g| g.wearer.is_none())
            .expect("unworn scene carries an unworn garment")
            .mask
            .clone(),
        Label::Worn => {
            let worn: Vec<&Garment> = scene.garments.iter().filter(|g| g.wearer.is_some()).collect();
            worn[rng.random_range(0..worn.len())].mask.clone()
        }
    };
    Ok(PairSample {
        id: index,
        scene_id: index,
        seed,
        s_mask: scene.persons[0].clone(),
        o_mask,
        image: scene.image,
        label,
    })
}

/// Multi-person scene `index` under `seed`: two or three people and one
/// unworn garment. Drawn from a stream family disjoint from the pair samples.
pub fn generate_group_scene(seed: u64, index: usize, cfg: &GenConfig) -> Result<Scene> {
    let mut rng = sample_rng(seed ^ GROUP_SCENE_SALT, index as u64);
    generate_scene(&mut rng, cfg, 2 + index % 2, true)
}

const GROUP_SCENE_SALT: u64 = 0x6772_6f75_7073_6365;
