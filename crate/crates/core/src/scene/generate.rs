use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::Box3D;
use crate::scene::captions::{candidate_captions, TemplateObject};
use crate::scene::{GroundTruthObject, Scene, SceneConfig, SceneError, ScenePoint, FLOOR_RGB, WALL_RGB};

/// Values are rounded to the precision of the scene file format at creation,
/// so a generated scene and its reloaded copy are identical.
fn q(v: f64) -> f64 {
    let r = (v * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn validate(cfg: &SceneConfig) -> Result<(), SceneError> {
    let bad = |m: &str| Err(SceneError::Config(m.to_string()));
    if cfg.objects_min == 0 || cfg.objects_min > cfg.objects_max {
        return bad("objects_min must be in 1..=objects_max");
    }
    if cfg.palette.is_empty() || cfg.categories.is_empty() {
        return bad("palette and categories must be non-empty");
    }
    if cfg.captions_min == 0 || cfg.captions_min > cfg.captions_max {
        return bad("captions_min must be in 1..=captions_max");
    }
    if !(0.0..1.0).contains(&cfg.background_fraction) {
        return bad("background_fraction must be in [0, 1)");
    }
    if (0..3).any(|a| cfg.room_size_min[a] <= 0.0 || cfg.room_size_min[a] > cfg.room_size_max[a]) {
        return bad("room sizes must be positive with min <= max");
    }
    if cfg.categories.iter().any(|c| c.size.iter().any(|&s| s <= 0.0)) || !(0.0..1.0).contains(&cfg.size_jitter) {
        return bad("category sizes must be positive and size_jitter in [0, 1)");
    }
    if cfg.min_gap < 0.0 || cfg.color_noise < 0.0 {
        return bad("min_gap and color_noise must be non-negative");
    }
    Ok(())
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

struct Placed {
    category: usize,
    color: usize,
    bbox: Box3D,
}

fn separated(a: &Box3D, b: &Box3D, gap: f64) -> bool {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    (0..2).any(|i| alo[i] >= bhi[i] + gap || blo[i] >= ahi[i] + gap)
}

fn place_objects(
    rng: &mut ChaCha8Rng,
    cfg: &SceneConfig,
    lo: [f64; 3],
    size: [f64; 3],
    count: usize,
) -> Result<Vec<Placed>, SceneError> {
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    let unplaceable = || SceneError::Unplaceable { requested: count, room: size, retries: cfg.max_retries };
    for _ in 0..count {
        let category = rng.gen_range(0..cfg.categories.len());
        let color = rng.gen_range(0..cfg.palette.len());
        let base = cfg.categories[category].size;
        let dims = base.map(|s| q(s * (1.0 + uniform(rng, -cfg.size_jitter, cfg.size_jitter))));
        let mut spot = None;
        for _ in 0..cfg.max_retries.max(1) {
            let mut center = [0.0; 3];
            for a in 0..2 {
                let free = size[a] - dims[a] - 2.0 * cfg.min_gap;
                if free < 0.0 {
                    return Err(unplaceable());
                }
                center[a] = q(lo[a] + cfg.min_gap + dims[a] / 2.0 + uniform(rng, 0.0, free));
            }
            center[2] = q(lo[2] + dims[2] / 2.0);
            let candidate = Box3D::new(center, dims);
            if candidate.max()[2] > lo[2] + size[2] {
                return Err(unplaceable());
            }
            if placed.iter().all(|p| separated(&p.bbox, &candidate, cfg.min_gap)) {
                spot = Some(candidate);
                break;
            }
        }
        let bbox = spot.ok_or_else(unplaceable)?;
        placed.push(Placed { category, color, bbox });
    }
    Ok(placed)
}

/// Splits `total` among `weights` by largest remainder, giving each entry at
/// least `floor` (when `total` allows).
fn allocate(total: usize, weights: &[f64], floor: usize) -> Vec<usize> {
    let reserved = (floor * weights.len()).min(total);
    let per = if weights.is_empty() { 0 } else { reserved / weights.len() };
    let rest = total - per * weights.len();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| rest as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = rest - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts.iter().map(|c| c + per).collect()
}

fn noisy_color(rng: &mut ChaCha8Rng, rgb: [f64; 3], noise: f64) -> [f64; 3] {
    rgb.map(|c| q((c + uniform(rng, -noise, noise)).clamp(0.0, 1.0)))
}

/// Uniform samples on the top and four side faces of a box standing on the floor.
fn sample_box_surface(rng: &mut ChaCha8Rng, b: &Box3D, rgb: [f64; 3], noise: f64, n: usize, out: &mut Vec<ScenePoint>) {
    let (lo, hi) = (b.min(), b.max());
    let [sx, sy, sz] = b.size;
    let areas = [sx * sy, sy * sz, sy * sz, sx * sz, sx * sz];
    let total: f64 = areas.iter().sum();
    for _ in 0..n {
        let mut pick = uniform(rng, 0.0, total);
        let mut face = 0;
        while face < 4 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let u = |rng: &mut ChaCha8Rng, a: usize| uniform(rng, lo[a], hi[a]);
        let xyz = match face {
            0 => [u(rng, 0), u(rng, 1), hi[2]],
            1 => [lo[0], u(rng, 1), u(rng, 2)],
            2 => [hi[0], u(rng, 1), u(rng, 2)],
            3 => [u(rng, 0), lo[1], u(rng, 2)],
            _ => [u(rng, 0), hi[1], u(rng, 2)],
        };
        let c = noisy_color(rng, rgb, noise);
        out.push([q(xyz[0]), q(xyz[1]), q(xyz[2]), c[0], c[1], c[2]]);
    }
}

fn sample_background(
    rng: &mut ChaCha8Rng,
    lo: [f64; 3],
    size: [f64; 3],
    objects: &[Placed],
    noise: f64,
    n: usize,
    out: &mut Vec<ScenePoint>,
) {
    let hi = [lo[0] + size[0], lo[1] + size[1], lo[2] + size[2]];
    let areas = [size[0] * size[1], size[1] * size[2], size[1] * size[2], size[0] * size[2], size[0] * size[2]];
    // every wall gets a point so the point extent is exactly the room
    let counts = allocate(n, &areas, if n >= 5 { 1 } else { 0 });
    for (plane, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            let xyz = match plane {
                0 => loop {
                    let p = [uniform(rng, lo[0], hi[0]), uniform(rng, lo[1], hi[1]), lo[2]];
                    let under = objects.iter().any(|o| {
                        let (bl, bh) = (o.bbox.min(), o.bbox.max());
                        p[0] >= bl[0] - 1e-4 && p[0] <= bh[0] + 1e-4 && p[1] >= bl[1] - 1e-4 && p[1] <= bh[1] + 1e-4
                    });
                    if !under {
                        break p;
                    }
                },
                1 => [lo[0], uniform(rng, lo[1], hi[1]), uniform(rng, lo[2], hi[2])],
                2 => [hi[0], uniform(rng, lo[1], hi[1]), uniform(rng, lo[2], hi[2])],
                3 => [uniform(rng, lo[0], hi[0]), lo[1], uniform(rng, lo[2], hi[2])],
                _ => [uniform(rng, lo[0], hi[0]), hi[1], uniform(rng, lo[2], hi[2])],
            };
            let rgb = if plane == 0 { FLOOR_RGB } else { WALL_RGB };
            let c = noisy_color(rng, rgb, noise);
            out.push([q(xyz[0]), q(xyz[1]), q(xyz[2]), c[0], c[1], c[2]]);
        }
    }
}

/// Procedurally builds a room with non-overlapping colored objects, surface
/// points for objects, floor and walls, and templated reference captions.
///
/// Deterministic in `(seed, cfg)`.
pub fn generate_synthetic_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SceneError> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [0, 1, 2].map(|a| q(uniform(&mut rng, cfg.room_size_min[a], cfg.room_size_max[a])));
    let jitter = cfg.room_origin_jitter;
    let lo = [q(uniform(&mut rng, -jitter, jitter)), q(uniform(&mut rng, -jitter, jitter)), 0.0];
    let count = rng.gen_range(cfg.objects_min..=cfg.objects_max);
    let objects = place_objects(&mut rng, cfg, lo, size, count)?;

    let n_bg = (cfg.num_points as f64 * cfg.background_fraction).round() as usize;
    let n_obj = cfg.num_points - n_bg;
    if n_obj < objects.len() {
        return Err(SceneError::Config(format!("{n_obj} object points cannot cover {} objects", objects.len())));
    }
    let surface: Vec<f64> = objects
        .iter()
        .map(|o| {
            let [sx, sy, sz] = o.bbox.size;
            sx * sy + 2.0 * sz * (sx + sy)
        })
        .collect();
    let per_object = allocate(n_obj, &surface, 1);
    let mut points = Vec::with_capacity(cfg.num_points);
    for (o, &k) in objects.iter().zip(&per_object) {
        sample_box_surface(&mut rng, &o.bbox, cfg.palette[o.color].rgb, cfg.color_noise, k, &mut points);
    }
    sample_background(&mut rng, lo, size, &objects, cfg.color_noise, n_bg, &mut points);

    let views: Vec<TemplateObject<'_>> = objects
        .iter()
        .map(|o| TemplateObject {
            category: &cfg.categories[o.category].name,
            color: &cfg.palette[o.color].name,
            bbox: o.bbox,
        })
        .collect();
    let room = (n_bg >= 5).then_some(([lo[0], lo[1]], [lo[0] + size[0], lo[1] + size[1]]));
    let mut gt_objects = Vec::with_capacity(objects.len());
    for (i, o) in objects.iter().enumerate() {
        let options = candidate_captions(&views, i, room, &cfg.relations, cfg.wall_near);
        let k = rng.gen_range(cfg.captions_min..=cfg.captions_max).min(options.len());
        let mut chosen: Vec<usize> = (0..options.len()).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(k);
        chosen.sort_unstable();
        gt_objects.push(GroundTruthObject {
            category: cfg.categories[o.category].name.clone(),
            bbox: o.bbox,
            captions: chosen.into_iter().map(|c| options[c].clone()).collect(),
        });
    }
    Ok(Scene { scene_id: format!("scene_{seed:06}"), points, gt_objects })
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn dataset_scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(100_000).wrapping_add(index as u64)
}

/// `n` scenes with seeds [`dataset_scene_seed`]`(base, 0..n)`.
pub fn generate_dataset(base: u64, n: usize, cfg: &SceneConfig) -> Result<Vec<Scene>, SceneError> {
    (0..n).map(|i| generate_synthetic_scene(dataset_scene_seed(base, i), cfg)).collect()
}
