use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Scene;
use crate::condition::{
    ConditionAttributes, ConditionCell, GroundCondition, PrecipitationLevel, PrecipitationType, SkyCondition, TimeOfDay, Weather,
};
use crate::tensor::Tensor;

pub const SCENE_SIZE: usize = 32;
pub const NUM_CLASSES: usize = 6;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["road", "sky", "vehicle", "person", "vegetation", "building"];

const ROAD: u8 = 0;
const SKY: u8 = 1;
const VEHICLE: u8 = 2;
const PERSON: u8 = 3;
const VEGETATION: u8 = 4;
const BUILDING: u8 = 5;

/// Daylight colour of each class.
pub fn class_color(class: u8) -> [f64; 3] {
    match class {
        ROAD => [0.35, 0.35, 0.38],
        SKY => [0.45, 0.65, 0.95],
        VEHICLE => [0.85, 0.15, 0.15],
        PERSON => [0.95, 0.75, 0.20],
        VEGETATION => [0.20, 0.60, 0.20],
        _ => [0.60, 0.45, 0.30],
    }
}

const LIDAR_REFLECTIVITY: [f64; NUM_CLASSES] = [0.2, 0.0, 0.9, 0.55, 0.35, 0.7];
const RADAR_RCS: [f64; NUM_CLASSES] = [0.05, 0.0, 1.0, 0.35, 0.15, 0.6];
const RADAR_MOTION: [f64; NUM_CLASSES] = [0.0, 0.0, 0.8, 0.5, 0.0, 0.0];
const RADAR_NOISE: f64 = 0.15;
const RADAR_BLOCK: usize = 4;

/// Per-scene corruption magnitudes, a fixed function of the attributes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    /// Multiplier on scene radiance.
    pub brightness: f64,
    /// Fraction of the clean render kept against the airlight.
    pub contrast: f64,
    pub airlight: f64,
    pub blur: bool,
    pub rgb_noise: f64,
    /// Auto-exposure gain applied after sensor noise.
    pub exposure: f64,
    /// Number of lamp glare blobs.
    pub glare: usize,
    /// Number of low-frequency chroma noise blotches.
    pub blotches: usize,
    /// Density of rain streak columns / snow flakes in RGB.
    pub streaks: f64,
    pub flakes: f64,
    /// Fraction of lidar returns replaced by spurious ones, and dropped.
    pub lidar_speckle: f64,
    pub lidar_dropout: f64,
    /// Lidar range limit as a fraction of the maximum depth.
    pub lidar_range: f64,
    /// Number of coherent spray/drift clusters returning like solid objects.
    pub lidar_ghosts: usize,
    /// Road reflectivity seen by lidar; depends on the ground surface.
    pub road_reflectivity: f64,
    pub event_speckle: f64,
    pub event_gain: f64,
    pub event_noise: f64,
}

impl Corruption {
    pub fn for_attrs(attrs: &ConditionAttributes) -> Self {
        let night = attrs.time_of_day == TimeOfDay::Night;
        let heavy = attrs.precipitation_level == Some(PrecipitationLevel::Heavy);
        let level = if heavy { 1.5 } else { 1.0 };
        let mut c = Corruption {
            brightness: if night { 0.22 } else { 1.0 },
            contrast: 1.0,
            airlight: 0.0,
            blur: false,
            rgb_noise: if night { 0.12 } else { 0.03 },
            exposure: if night { 3.5 } else { 1.0 },
            glare: if night { 6 } else { 0 },
            blotches: if night { 4 } else { 0 },
            streaks: 0.0,
            flakes: 0.0,
            lidar_speckle: 0.01,
            lidar_dropout: 0.02,
            lidar_range: 1.0,
            lidar_ghosts: 0,
            road_reflectivity: LIDAR_REFLECTIVITY[ROAD as usize],
            event_speckle: 0.01,
            event_gain: 1.0,
            event_noise: if night { 0.06 } else { 0.03 },
        };
        match attrs.weather {
            Weather::Clear => {}
            Weather::Fog => {
                c.contrast = 0.3;
                c.airlight = if night { 0.2 } else { 0.75 };
                c.blur = true;
                c.rgb_noise += 0.03;
                c.lidar_range = 0.55;
                c.event_gain = 0.6;
            }
            Weather::Rain => {
                c.contrast = 0.8;
                c.airlight = if night { 0.05 } else { 0.5 };
                c.rgb_noise += 0.04;
                c.streaks = 0.15 * level;
                c.lidar_speckle = 0.12 * level;
                c.lidar_dropout = 0.15 * level;
                c.lidar_ghosts = if heavy { 14 } else { 10 };
                c.road_reflectivity = 0.0;
                c.event_speckle = 0.12 * level;
            }
            Weather::Snow => {
                c.contrast = 0.75;
                c.airlight = if night { 0.1 } else { 0.7 };
                c.rgb_noise += 0.04;
                c.flakes = 0.06 * level;
                c.lidar_speckle = 0.2 * level;
                c.lidar_dropout = 0.2 * level;
                c.lidar_ghosts = if heavy { 14 } else { 10 };
                c.road_reflectivity = 0.75;
                c.event_speckle = 0.18 * level;
            }
        }
        c
    }
}

/// Uniform over the weather × time cells, with consistent dependent
/// attributes. Missing sky conditions are left absent on purpose.
pub fn sample_condition<R: Rng + ?Sized>(rng: &mut R) -> ConditionAttributes {
    let weather = Weather::ALL[rng.random_range(0..Weather::ALL.len())];
    let time_of_day = TimeOfDay::ALL[rng.random_range(0..TimeOfDay::ALL.len())];
    sample_condition_in_cell(ConditionCell { weather, time_of_day }, rng)
}

/// Draws the dependent attributes for a fixed weather × time cell.
pub fn sample_condition_in_cell<R: Rng + ?Sized>(cell: ConditionCell, rng: &mut R) -> ConditionAttributes {
    let ConditionCell { weather, time_of_day } = cell;
    let night = time_of_day == TimeOfDay::Night;
    let level = if rng.random_bool(0.5) {
        PrecipitationLevel::Light
    } else {
        PrecipitationLevel::Heavy
    };
    let (precip, ground) = match weather {
        Weather::Rain => (Some(PrecipitationType::Rain), GroundCondition::Wet),
        Weather::Snow => (Some(PrecipitationType::Snow), GroundCondition::Snowy),
        Weather::Fog if rng.random_bool(0.5) => (None, GroundCondition::Wet),
        _ => (None, GroundCondition::Dry),
    };
    let sky_given = rng.random_bool(0.5);
    let sky_condition = match (weather, night) {
        (Weather::Clear, false) => Some(SkyCondition::Sunny),
        (_, true) => sky_given.then_some(SkyCondition::Dark),
        (_, false) => sky_given.then_some(SkyCondition::Overcast),
    };
    ConditionAttributes {
        weather,
        time_of_day,
        precipitation_type: precip,
        precipitation_level: precip.map(|_| level),
        ground_condition: ground,
        sky_condition,
    }
}

/// Independent random streams derived from the scene seed, so that layout
/// and sensor noise do not depend on the condition.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

struct Layout {
    map: Vec<u8>,
    /// Per-pixel distance proxy in [0, 1]; 1 for sky.
    depth: Vec<f64>,
    /// Per-object colour offsets, indexed by pixel.
    tint: Vec<[f64; 3]>,
    /// Distance proxy of the ground plane, per row.
    ground: Vec<f64>,
}

fn layout(size: usize, rng: &mut ChaCha8Rng) -> Layout {
    let n = size;
    let scale = n as f64 / SCENE_SIZE as f64;
    let s = |v: f64| ((v * scale).round() as usize).max(1);
    let horizon = s(rng.random_range(9.0..14.0)).min(n - 2);
    let mut map = vec![VEGETATION; n * n];
    let mut tint = vec![[0.0; 3]; n * n];
    let mut depth = vec![1.0; n * n];
    let row_depth = |y: usize| -> f64 {
        if y < horizon {
            1.0
        } else {
            let t = (y - horizon) as f64 / (n - horizon).max(1) as f64;
            0.9 * (1.0 - t) + 0.05
        }
    };
    for y in 0..n {
        for x in 0..n {
            if y < horizon {
                map[y * n + x] = SKY;
            }
            depth[y * n + x] = row_depth(y);
        }
    }
    let cx = rng.random_range(0.35..0.65) * n as f64;
    let top_half = rng.random_range(1.0..3.0) * scale;
    let bottom_half = rng.random_range(0.35..0.55) * n as f64;
    for y in horizon..n {
        let t = (y - horizon) as f64 / (n - 1 - horizon).max(1) as f64;
        let half = top_half + t * (bottom_half - top_half);
        for x in 0..n {
            if (x as f64 + 0.5 - cx).abs() <= half {
                map[y * n + x] = ROAD;
            }
        }
    }
    let mut paint = |x0: i64, y0: i64, w: i64, h: i64, class: u8, base_depth: Option<f64>, rng: &mut ChaCha8Rng, round: bool| {
        let jitter = [
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ];
        for y in y0.max(0)..(y0 + h).min(n as i64) {
            for x in x0.max(0)..(x0 + w).min(n as i64) {
                if round {
                    let (dx, dy) = (
                        (x - x0) as f64 + 0.5 - w as f64 / 2.0,
                        (y - y0) as f64 + 0.5 - h as f64 / 2.0,
                    );
                    if (dx / (w as f64 / 2.0)).powi(2) + (dy / (h as f64 / 2.0)).powi(2) > 1.0 {
                        continue;
                    }
                }
                let i = y as usize * n + x as usize;
                map[i] = class;
                tint[i] = jitter;
                if let Some(d) = base_depth {
                    depth[i] = d;
                }
            }
        }
    };
    let ni = n as i64;
    let hz = horizon as i64;
    for _ in 0..rng.random_range(1..=3) {
        let w = s(rng.random_range(5.0..10.0)) as i64;
        let h = s(rng.random_range(5.0..11.0)) as i64;
        let left = rng.random_bool(0.5);
        let x0 = if left { rng.random_range(-2..ni / 3) } else { rng.random_range(2 * ni / 3 - w / 2..ni) };
        let y0 = hz - h + s(rng.random_range(1.0..4.0)) as i64;
        let d = row_depth((y0 + h).clamp(0, ni - 1) as usize);
        paint(x0, y0, w, h, BUILDING, Some(d), rng, false);
    }
    for _ in 0..rng.random_range(2..=4) {
        let r = s(rng.random_range(2.0..4.5)) as i64;
        let x0 = rng.random_range(-r..ni);
        let y0 = hz - r + rng.random_range(-1..(ni - hz).max(1));
        let d = row_depth((y0 + 2 * r).clamp(0, ni - 1) as usize);
        // Roadside only: keep the road surface visible.
        let on_road = (x0 + r) as f64 > cx - bottom_half * 0.6 && ((x0 + r) as f64) < cx + bottom_half * 0.6 && y0 > hz + 4;
        if !on_road {
            paint(x0, y0, 2 * r, 2 * r, VEGETATION, Some(d), rng, true);
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let w = s(rng.random_range(4.0..8.0)) as i64;
        let h = (w * 2 / 3).max(2);
        let yb = rng.random_range(hz + 3..ni + 1);
        let t = (yb - hz) as f64 / (ni - hz) as f64;
        let half = top_half + t * (bottom_half - top_half);
        let x0 = (cx + rng.random_range(-half * 0.7..half * 0.7)) as i64 - w / 2;
        paint(x0, yb - h, w, h, VEHICLE, Some(row_depth((yb - 1).clamp(0, ni - 1) as usize)), rng, false);
    }
    for _ in 0..rng.random_range(1..=3) {
        let w = s(3.0) as i64;
        let h = s(rng.random_range(4.0..7.0)) as i64;
        let yb = rng.random_range(hz + 2..ni + 1);
        let x0 = rng.random_range(0..ni - w);
        paint(x0, yb - h, w, h, PERSON, Some(row_depth((yb - 1).clamp(0, ni - 1) as usize)), rng, true);
    }
    let ground = (0..n).map(row_depth).collect();
    Layout { map, depth, tint, ground }
}

fn box_blur(img: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(n) {
                    for xx in x.saturating_sub(1)..(x + 2).min(n) {
                        acc += img[(yy * n + xx) * 3 + c];
                        cnt += 1.0;
                    }
                }
                out[(y * n + x) * 3 + c] = acc / cnt;
            }
        }
    }
    out
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn render_rgb(l: &Layout, attrs: &ConditionAttributes, c: &Corruption, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let night = attrs.time_of_day == TimeOfDay::Night;
    let mut img = vec![0.0; n * n * 3];
    for i in 0..n * n {
        let class = l.map[i];
        let mut col = class_color(class);
        if class == SKY && night {
            col = [0.05, 0.05, 0.15];
        }
        if class == ROAD {
            match attrs.ground_condition {
                GroundCondition::Wet => col = [0.22, 0.22, 0.27],
                GroundCondition::Snowy => col = [0.78, 0.78, 0.82],
                GroundCondition::Dry => {}
            }
        }
        for ch in 0..3 {
            img[i * 3 + ch] = (col[ch] + l.tint[i][ch]) * c.brightness;
        }
    }
    if c.blur {
        img = box_blur(&img, n);
    }
    let noise = Normal::new(0.0, c.rgb_noise).expect("finite std");
    for v in img.iter_mut() {
        *v = c.contrast * *v + (1.0 - c.contrast) * c.airlight;
    }
    if c.streaks > 0.0 {
        for x in 0..n {
            if rng.random_bool(c.streaks.min(1.0)) {
                let y0 = rng.random_range(0..n);
                let len = rng.random_range(3..8);
                for y in y0..(y0 + len).min(n) {
                    for ch in 0..3 {
                        img[(y * n + x) * 3 + ch] += 0.35;
                    }
                }
            }
        }
    }
    if c.flakes > 0.0 {
        for i in 0..n * n {
            if rng.random_bool(c.flakes.min(1.0)) {
                for ch in 0..3 {
                    img[i * 3 + ch] = 0.95;
                }
            }
        }
    }
    for _ in 0..c.glare {
        let r = rng.random_range(1.5..3.5);
        let (gx, gy) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let tone = [0.9, rng.random_range(0.5..0.9), rng.random_range(0.1..0.4)];
        for y in 0..n {
            for x in 0..n {
                let d2 = ((x as f64 + 0.5 - gx).powi(2) + (y as f64 + 0.5 - gy).powi(2)) / (r * r);
                if d2 < 4.0 {
                    for ch in 0..3 {
                        img[(y * n + x) * 3 + ch] += tone[ch] * c.brightness * (-d2).exp();
                    }
                }
            }
        }
    }
    for _ in 0..c.blotches {
        let r = rng.random_range(3.0..7.0);
        let (bx, by) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.12..0.12));
        for y in 0..n {
            for x in 0..n {
                let d2 = ((x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2)) / (r * r);
                for ch in 0..3 {
                    img[(y * n + x) * 3 + ch] += shift[ch] * (-d2).exp();
                }
            }
        }
    }
    img.iter().map(|&v| to_f32(c.exposure * (v + noise.sample(rng)))).collect()
}

fn render_lidar(l: &Layout, c: &Corruption, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; n * n * 3];
    for y in (0..n).step_by(2) {
        for x in 0..n {
            let i = y * n + x;
            let class = l.map[i] as usize;
            let d = l.depth[i];
            let returns = class != SKY as usize && d <= c.lidar_range;
            let reflectivity = if class == ROAD as usize { c.road_reflectivity } else { LIDAR_REFLECTIVITY[class] };
            let (u, v) = (rng.random::<f64>(), rng.random::<f64>());
            if u < c.lidar_speckle {
                img[i * 3] = rng.random_range(0.05..0.9);
                img[i * 3 + 1] = rng.random_range(0.0..1.0);
                img[i * 3 + 2] = 1.0;
            } else if returns && v >= c.lidar_dropout && reflectivity > 0.0 {
                img[i * 3] = to_f32(d + 0.01 * rng.random_range(-1.0..1.0));
                img[i * 3 + 1] = to_f32(reflectivity + 0.03 * rng.random_range(-1.0..1.0));
                img[i * 3 + 2] = 1.0;
            }
        }
    }
    // Spray and drifting snow return like near solid objects.
    for _ in 0..c.lidar_ghosts {
        let (w, h) = (rng.random_range(3..8), rng.random_range(3..8));
        let x0 = rng.random_range(0..n);
        let bottom = rng.random_range(n / 3..n);
        let y0 = bottom.saturating_sub(h - 1);
        // Sits on the ground plane like a real object.
        let d = l.ground[bottom];
        let r = LIDAR_REFLECTIVITY[[VEHICLE, PERSON, BUILDING][rng.random_range(0..3)] as usize];
        for y in (y0..(y0 + h).min(n)).filter(|y| y % 2 == 0) {
            for x in x0..(x0 + w).min(n) {
                let i = y * n + x;
                img[i * 3] = to_f32(d + 0.01 * rng.random_range(-1.0..1.0));
                img[i * 3 + 1] = to_f32(r + 0.03 * rng.random_range(-1.0..1.0));
                img[i * 3 + 2] = 1.0;
            }
        }
    }
    img.iter().map(|&v| to_f32(v)).collect()
}

fn render_radar(l: &Layout, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, RADAR_NOISE).expect("finite std");
    let mut img = vec![0.0; n * n * 3];
    let nb = n / RADAR_BLOCK;
    for by in 0..nb {
        for bx in 0..nb {
            let mut acc = [0.0; 3];
            let cells = (RADAR_BLOCK * RADAR_BLOCK) as f64;
            for y in by * RADAR_BLOCK..(by + 1) * RADAR_BLOCK {
                for x in bx * RADAR_BLOCK..(bx + 1) * RADAR_BLOCK {
                    let class = l.map[y * n + x] as usize;
                    acc[0] += RADAR_RCS[class];
                    acc[1] += RADAR_MOTION[class];
                    acc[2] += f64::from(class != SKY as usize && class != ROAD as usize);
                }
            }
            for y in by * RADAR_BLOCK..(by + 1) * RADAR_BLOCK {
                for x in bx * RADAR_BLOCK..(bx + 1) * RADAR_BLOCK {
                    for ch in 0..3 {
                        img[(y * n + x) * 3 + ch] = acc[ch] / cells;
                    }
                }
            }
        }
    }
    img.iter().map(|&v| to_f32(v + noise.sample(rng))).collect()
}

fn render_event(l: &Layout, c: &Corruption, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = Normal::new(0.0, c.event_noise).expect("finite std");
    // Log-intensity of the daylight render: events respond to relative change.
    let lum: Vec<f64> = (0..n * n)
        .map(|i| {
            let col = class_color(l.map[i]);
            ((col[0] + col[1] + col[2]) / 3.0 + l.tint[i][0] + 0.05).max(0.01).ln()
        })
        .collect();
    let mut img = vec![0.0; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let gx = if x + 1 < n { lum[i + 1] - lum[i] } else { 0.0 };
            let gy = if y + 1 < n { lum[i + n] - lum[i] } else { 0.0 };
            let boundary = (x + 1 < n && l.map[i + 1] != l.map[i]) || (y + 1 < n && l.map[i + n] != l.map[i]);
            img[i * 3] = c.event_gain * gx;
            img[i * 3 + 1] = c.event_gain * gy;
            img[i * 3 + 2] = c.event_gain * f64::from(boundary);
            if rng.random::<f64>() < c.event_speckle {
                let polarity = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                img[i * 3] += polarity * rng.random_range(0.3..1.0);
                img[i * 3 + 1] -= polarity * rng.random_range(0.3..1.0);
                img[i * 3 + 2] = 1.0;
            }
        }
    }
    // Precipitation triggers bursts of events over whole patches.
    for _ in 0..(c.event_speckle * 80.0).round() as usize {
        let (w, h) = (rng.random_range(2..6), rng.random_range(2..6));
        let (x0, y0) = (rng.random_range(0..n), rng.random_range(0..n));
        for y in y0..(y0 + h).min(n) {
            for x in x0..(x0 + w).min(n) {
                let i = y * n + x;
                img[i * 3] = rng.random_range(-1.0..1.0);
                img[i * 3 + 1] = rng.random_range(-1.0..1.0);
                img[i * 3 + 2] = 1.0;
            }
        }
    }
    img.iter().map(|&v| to_f32(v + noise.sample(rng))).collect()
}

/// Deterministic scene at the default 32×32 resolution.
pub fn render_scene(attrs: &ConditionAttributes, seed: u64) -> Scene {
    render_scene_sized(attrs, seed, SCENE_SIZE)
}

/// Deterministic scene of side `size` (a multiple of 32 for model input).
pub fn render_scene_sized(attrs: &ConditionAttributes, seed: u64, size: usize) -> Scene {
    let n = size;
    let c = Corruption::for_attrs(attrs);
    let l = layout(n, &mut stream(seed, 0));
    let rgb = render_rgb(&l, attrs, &c, n, &mut stream(seed, 1));
    let lidar = render_lidar(&l, &c, n, &mut stream(seed, 2));
    let radar = render_radar(&l, n, &mut stream(seed, 3));
    let event = render_event(&l, &c, n, &mut stream(seed, 4));
    let t = |d: Vec<f64>| Tensor::new(vec![n, n, 3], d).expect("rendered image size");
    Scene {
        height: n,
        width: n,
        semantic_map: l.map,
        images: [t(rgb), t(lidar), t(radar), t(event)],
        attrs: *attrs,
        seed,
    }
}
