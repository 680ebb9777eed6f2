//! Caption templates computed from ground-truth geometry, and an independent
//! checker that re-derives every stated fact from a scene's points and boxes.

use serde::{Deserialize, Serialize};

use crate::geometry::{distance_sq, Box3D};
use crate::scene::{tokenize, Scene, SceneConfig};

/// Relation families the generator may mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Left/right/front/behind relative to the nearest other object.
    Direction,
    /// "the second chair from the left" among objects of one category.
    Ordinal,
    /// Proximity to the room's walls.
    Wall,
}

pub const ORDINALS: [&str; 8] = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth"];

/// Index of the other box with the nearest center; ties go to the lower index.
pub fn nearest_other(boxes: &[Box3D], target: usize) -> Option<usize> {
    let c = boxes[target].center;
    let mut best: Option<(f64, usize)> = None;
    for (j, b) in boxes.iter().enumerate() {
        if j == target {
            continue;
        }
        let d = distance_sq(&c, &b.center);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, j));
        }
    }
    best.map(|(_, j)| j)
}

/// Position of `target` relative to `other` along the dominant horizontal axis.
pub fn direction_phrase(target: &Box3D, other: &Box3D) -> &'static str {
    let dx = target.center[0] - other.center[0];
    let dy = target.center[1] - other.center[1];
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            "to the left of"
        } else {
            "to the right of"
        }
    } else if dy < 0.0 {
        "in front of"
    } else {
        "behind"
    }
}

/// 1-based rank from the left among boxes of the same category, or `None`
/// when the category is unique in the scene.
pub fn ordinal_rank(categories: &[&str], boxes: &[Box3D], target: usize) -> Option<usize> {
    let mut same: Vec<usize> = (0..boxes.len()).filter(|&j| categories[j] == categories[target]).collect();
    if same.len() < 2 {
        return None;
    }
    same.sort_by(|&a, &b| boxes[a].center[0].total_cmp(&boxes[b].center[0]).then(a.cmp(&b)));
    same.iter().position(|&j| j == target).map(|p| p + 1)
}

/// Horizontal gap from the box footprint to each wall: left, right, front, back.
pub fn wall_gaps(bbox: &Box3D, room_lo: [f64; 2], room_hi: [f64; 2]) -> [f64; 4] {
    let (lo, hi) = (bbox.min(), bbox.max());
    [lo[0] - room_lo[0], room_hi[0] - hi[0], lo[1] - room_lo[1], room_hi[1] - hi[1]]
}

const WALL_SIDES: [&str; 4] = ["left", "right", "front", "back"];

/// "next to the <side> wall" for the closest wall within `near`, otherwise
/// "in the middle of the room".
pub fn wall_phrase(bbox: &Box3D, room_lo: [f64; 2], room_hi: [f64; 2], near: f64) -> String {
    let gaps = wall_gaps(bbox, room_lo, room_hi);
    let (side, gap) = gaps.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &g)| if g < acc.1 { (i, g) } else { acc });
    if gap < near {
        format!("next to the {} wall", WALL_SIDES[side])
    } else {
        "in the middle of the room".to_string()
    }
}

/// Per-object facts the templates need.
pub struct TemplateObject<'a> {
    pub category: &'a str,
    pub color: &'a str,
    pub bbox: Box3D,
}

/// Every single-relation caption the enabled relation families allow for
/// `target`, in `relations` order.
pub fn candidate_captions(
    objects: &[TemplateObject<'_>],
    target: usize,
    room: Option<([f64; 2], [f64; 2])>,
    relations: &[Relation],
    wall_near: f64,
) -> Vec<String> {
    let obj = &objects[target];
    let base = format!("This is a {} {}.", obj.color, obj.category);
    let boxes: Vec<Box3D> = objects.iter().map(|o| o.bbox).collect();
    let cats: Vec<&str> = objects.iter().map(|o| o.category).collect();
    let mut out = Vec::new();
    for rel in relations {
        let sentence = match rel {
            Relation::Direction => nearest_other(&boxes, target).map(|j| {
                let other = &objects[j];
                format!("It is {} the {} {}.", direction_phrase(&obj.bbox, &other.bbox), other.color, other.category)
            }),
            Relation::Ordinal => ordinal_rank(&cats, &boxes, target)
                .and_then(|r| ORDINALS.get(r - 1))
                .map(|ord| format!("It is the {ord} {} from the left.", obj.category)),
            Relation::Wall => room.map(|(lo, hi)| format!("It is {}.", wall_phrase(&obj.bbox, lo, hi, wall_near))),
        };
        if let Some(s) = sentence {
            out.push(format!("{base} {s}"));
        }
    }
    if out.is_empty() {
        out.push(base);
    }
    out
}

/// Checks a caption against the scene it describes.
///
/// Colors are recovered from the points inside the object's box, the room
/// from the extent of all points (floor and walls are sampled on the room
/// boundary), and relations from box centers. The checker shares no code
/// with the template functions above.
pub fn check_caption(scene: &Scene, target: usize, caption: &str, cfg: &SceneConfig) -> Result<(), String> {
    let tokens = tokenize(caption);
    let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let obj = scene.gt_objects.get(target).ok_or_else(|| format!("no object {target}"))?;
    let [_, _, _, color, category, rest @ ..] = words.as_slice() else {
        return Err(format!("caption too short: {caption:?}"));
    };
    if words[..3] != ["this", "is", "a"] {
        return Err(format!("unexpected opening in {caption:?}"));
    }
    if *category != obj.category {
        return Err(format!("category {category} but object is {}", obj.category));
    }
    let seen = observed_color(scene, target, cfg).ok_or("no points inside the object box")?;
    if *color != seen {
        return Err(format!("color {color} but points look {seen}"));
    }
    let rest = match rest {
        [] => return Ok(()),
        ["it", "is", tail @ ..] => tail,
        _ => return Err(format!("unexpected relation clause in {caption:?}")),
    };
    let n = scene.gt_objects.len();
    let center = |j: usize| scene.gt_objects[j].bbox.center;
    match rest {
        ["to", "the", side @ ("left" | "right"), "of", "the", c, k]
        | ["in", side @ "front", "of", "the", c, k]
        | [side @ "behind", "the", c, k] => {
            // brute-force nearest neighbor by squared center distance
            let me = center(target);
            let mut order: Vec<usize> = (0..n).filter(|&j| j != target).collect();
            order.sort_by(|&a, &b| {
                let da: f64 = (0..3).map(|i| (center(a)[i] - me[i]).powi(2)).sum();
                let db: f64 = (0..3).map(|i| (center(b)[i] - me[i]).powi(2)).sum();
                da.total_cmp(&db).then(a.cmp(&b))
            });
            let &j = order.first().ok_or("direction stated in a single-object scene")?;
            let other = &scene.gt_objects[j];
            if other.category != *k {
                return Err(format!("nearest object is a {}, caption names {k}", other.category));
            }
            let other_color = observed_color(scene, j, cfg).ok_or("reference object has no points")?;
            if other_color != *c {
                return Err(format!("nearest object looks {other_color}, caption says {c}"));
            }
            let (dx, dy) = (me[0] - center(j)[0], me[1] - center(j)[1]);
            let ok = match *side {
                "left" => dx.abs() >= dy.abs() && dx < 0.0,
                "right" => dx.abs() >= dy.abs() && dx >= 0.0,
                "front" => dx.abs() < dy.abs() && dy < 0.0,
                _ => dx.abs() < dy.abs() && dy >= 0.0,
            };
            ok.then_some(()).ok_or_else(|| format!("{side} contradicts dx={dx:.3}, dy={dy:.3}"))
        }
        ["the", ord, k, "from", "the", "left"] => {
            if *k != obj.category {
                return Err(format!("ordinal names {k}, object is {}", obj.category));
            }
            let rank = ORDINALS.iter().position(|o| o == ord).ok_or_else(|| format!("unknown ordinal {ord}"))?;
            let mine = center(target)[0];
            let before = (0..n)
                .filter(|&j| j != target && scene.gt_objects[j].category == obj.category)
                .filter(|&j| center(j)[0] < mine || (center(j)[0] == mine && j < target))
                .count();
            let peers = (0..n).filter(|&j| scene.gt_objects[j].category == obj.category).count();
            if peers < 2 || before != rank {
                return Err(format!("object is {} of {peers} from the left, caption says {ord}", before + 1));
            }
            Ok(())
        }
        ["next", "to", "the", side, "wall"] => {
            let gaps = observed_wall_gaps(scene, target)?;
            let names = ["left", "right", "front", "back"];
            let min = gaps.iter().copied().fold(f64::INFINITY, f64::min);
            let idx = names.iter().position(|s| s == side).ok_or_else(|| format!("unknown wall {side}"))?;
            if gaps[idx] != min || min >= cfg.wall_near {
                return Err(format!("gaps to walls {gaps:?} do not support the {side} wall"));
            }
            Ok(())
        }
        ["in", "the", "middle", "of", "the", "room"] => {
            let gaps = observed_wall_gaps(scene, target)?;
            if gaps.iter().any(|&g| g < cfg.wall_near) {
                return Err(format!("object is within {} of a wall: {gaps:?}", cfg.wall_near));
            }
            Ok(())
        }
        _ => Err(format!("unrecognized relation in {caption:?}")),
    }
}

fn observed_wall_gaps(scene: &Scene, target: usize) -> Result<[f64; 4], String> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &scene.points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    if !lo[0].is_finite() {
        return Err("scene has no points".into());
    }
    let b = &scene.gt_objects[target].bbox;
    let (bl, bh) = (b.min(), b.max());
    Ok([bl[0] - lo[0], hi[0] - bh[0], bl[1] - lo[1], hi[1] - bh[1]])
}

/// Palette name nearest to the mean color of the points inside the box.
fn observed_color<'a>(scene: &Scene, target: usize, cfg: &'a SceneConfig) -> Option<&'a str> {
    let bbox = scene.gt_objects[target].bbox.inflate(1e-6);
    let (mut sum, mut count) = ([0.0; 3], 0usize);
    for p in &scene.points {
        if bbox.contains(&[p[0], p[1], p[2]]) {
            for c in 0..3 {
                sum[c] += p[3 + c];
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    let mean = sum.map(|s| s / count as f64);
    cfg.palette
        .iter()
        .min_by(|a, b| {
            let da: f64 = (0..3).map(|i| (a.rgb[i] - mean[i]).powi(2)).sum();
            let db: f64 = (0..3).map(|i| (b.rgb[i] - mean[i]).powi(2)).sum();
            da.total_cmp(&db)
        })
        .map(|e| e.name.as_str())
}
