//! Scene JSON with canonical key order and six-decimal floats, so that
//! save -> load -> save reproduces the same bytes.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::geometry::Box3D;
use crate::scene::{GroundTruthObject, Scene, SceneError};

fn num(out: &mut String, v: f64) {
    let s = format!("{v:.6}");
    out.push_str(if s == "-0.000000" { "0.000000" } else { &s });
}

fn nums(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        num(out, v);
    }
    out.push(']');
}

fn string(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

pub fn scene_to_json(scene: &Scene) -> String {
    let mut out = String::with_capacity(scene.points.len() * 64 + 256);
    out.push_str("{\"scene_id\":");
    string(&mut out, &scene.scene_id);
    out.push_str(",\n\"points\":[");
    for (i, p) in scene.points.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        nums(&mut out, p);
    }
    out.push_str("],\n\"gt_objects\":[");
    for (i, o) in scene.gt_objects.iter().enumerate() {
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str("{\"category\":");
        string(&mut out, &o.category);
        out.push_str(",\"box\":{\"center\":");
        nums(&mut out, &o.bbox.center);
        out.push_str(",\"size\":");
        nums(&mut out, &o.bbox.size);
        out.push_str("},\"captions\":[");
        for (j, c) in o.captions.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            string(&mut out, c);
        }
        out.push_str("]}");
    }
    let _ = write!(out, "]}}\n");
    out
}

fn schema(pointer: String, message: impl Into<String>) -> SceneError {
    SceneError::Schema { pointer, message: message.into() }
}

fn field<'a>(v: &'a Value, ptr: &str, key: &str) -> Result<&'a Value, SceneError> {
    v.get(key).ok_or_else(|| schema(format!("{ptr}/{key}"), "missing field"))
}

fn array<'a>(v: &'a Value, ptr: &str) -> Result<&'a Vec<Value>, SceneError> {
    v.as_array().ok_or_else(|| schema(ptr.to_string(), "expected an array"))
}

fn float_array<const N: usize>(v: &Value, ptr: &str) -> Result<[f64; N], SceneError> {
    let items = array(v, ptr)?;
    if items.len() != N {
        return Err(schema(ptr.to_string(), format!("expected {N} numbers, found {}", items.len())));
    }
    let mut out = [0.0; N];
    for (i, item) in items.iter().enumerate() {
        out[i] = item.as_f64().ok_or_else(|| schema(format!("{ptr}/{i}"), "expected a number"))?;
    }
    Ok(out)
}

fn reject_unknown(v: &Value, ptr: &str, known: &[&str]) -> Result<(), SceneError> {
    let obj = v.as_object().ok_or_else(|| schema(ptr.to_string(), "expected an object"))?;
    match obj.keys().find(|k| !known.contains(&k.as_str())) {
        Some(k) => Err(schema(format!("{ptr}/{k}"), "unknown field")),
        None => Ok(()),
    }
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let root: Value = serde_json::from_str(text).map_err(|e| schema(String::new(), e.to_string()))?;
    reject_unknown(&root, "", &["scene_id", "points", "gt_objects"])?;
    let scene_id = field(&root, "", "scene_id")?
        .as_str()
        .ok_or_else(|| schema("/scene_id".into(), "expected a string"))?
        .to_string();
    let raw_points = array(field(&root, "", "points")?, "/points")?;
    if raw_points.is_empty() {
        return Err(schema("/points".into(), "a scene needs at least one point"));
    }
    let points = raw_points
        .iter()
        .enumerate()
        .map(|(i, p)| float_array::<6>(p, &format!("/points/{i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let bounds = Box3D::enclosing(points.iter().map(|p| [p[0], p[1], p[2]]).collect::<Vec<_>>().iter())
        .expect("points are non-empty")
        .inflate(1e-6);
    let mut gt_objects = Vec::new();
    for (i, o) in array(field(&root, "", "gt_objects")?, "/gt_objects")?.iter().enumerate() {
        let ptr = format!("/gt_objects/{i}");
        reject_unknown(o, &ptr, &["category", "box", "captions"])?;
        let category = field(o, &ptr, "category")?
            .as_str()
            .ok_or_else(|| schema(format!("{ptr}/category"), "expected a string"))?
            .to_string();
        let bptr = format!("{ptr}/box");
        let b = field(o, &ptr, "box")?;
        reject_unknown(b, &bptr, &["center", "size"])?;
        let bbox = Box3D::new(
            float_array(field(b, &bptr, "center")?, &format!("{bptr}/center"))?,
            float_array(field(b, &bptr, "size")?, &format!("{bptr}/size"))?,
        );
        if !bbox.has_positive_extent() {
            return Err(schema(format!("{bptr}/size"), "box extents must be positive"));
        }
        if !(bounds.contains(&bbox.min()) && bounds.contains(&bbox.max())) {
            return Err(schema(bptr, "box extends beyond the point cloud"));
        }
        let cptr = format!("{ptr}/captions");
        let captions = array(field(o, &ptr, "captions")?, &cptr)?
            .iter()
            .enumerate()
            .map(|(j, c)| c.as_str().map(str::to_string).ok_or_else(|| schema(format!("{cptr}/{j}"), "expected a string")))
            .collect::<Result<Vec<_>, _>>()?;
        if captions.is_empty() {
            return Err(schema(cptr, "every object needs at least one caption"));
        }
        gt_objects.push(GroundTruthObject { category, bbox, captions });
    }
    Ok(Scene { scene_id, points, gt_objects })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_json(scene))
        .map_err(|e| SceneError::Io { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SceneError::Io { path: path.display().to_string(), message: e.to_string() })?;
    scene_from_json(&text).map_err(|e| match e {
        SceneError::Schema { pointer, message } => {
            SceneError::Schema { pointer, message: format!("{message} (in {})", path.display()) }
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_synthetic_scene, SceneConfig};

    #[test]
    fn save_load_save_is_byte_identical() {
        let scene = generate_synthetic_scene(5, &SceneConfig::default()).unwrap();
        let first = scene_to_json(&scene);
        let back = scene_from_json(&first).unwrap();
        assert_eq!(back, scene);
        assert_eq!(scene_to_json(&back), first);
    }

    #[test]
    fn missing_captions_names_the_pointer() {
        let text = r#"{"scene_id":"s","points":[[0,0,0,0,0,0],[1,1,1,0,0,0]],
            "gt_objects":[{"category":"chair","box":{"center":[0.5,0.5,0.5],"size":[1,1,1]}}]}"#;
        match scene_from_json(text) {
            Err(SceneError::Schema { pointer, .. }) => assert_eq!(pointer, "/gt_objects/0/captions"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn schema_violations_are_located() {
        let cases = [
            (r#"{"scene_id":"s","points":[],"gt_objects":[]}"#, "/points"),
            (r#"{"scene_id":"s","points":[[0,0,0,0,0]],"gt_objects":[]}"#, "/points/0"),
            (r#"{"scene_id":"s","points":[[0,0,0,0,0,"x"]],"gt_objects":[]}"#, "/points/0/5"),
            (r#"{"scene_id":1,"points":[[0,0,0,0,0,0]],"gt_objects":[]}"#, "/scene_id"),
            (r#"{"scene_id":"s","points":[[0,0,0,0,0,0]],"gt_objects":[],"extra":1}"#, "/extra"),
            (
                r#"{"scene_id":"s","points":[[0,0,0,0,0,0],[1,1,1,0,0,0]],"gt_objects":[{"category":"c","box":{"center":[0.5,0.5,0.5],"size":[1,0,1]},"captions":["a"]}]}"#,
                "/gt_objects/0/box/size",
            ),
            (
                r#"{"scene_id":"s","points":[[0,0,0,0,0,0],[1,1,1,0,0,0]],"gt_objects":[{"category":"c","box":{"center":[0.5,0.5,0.5],"size":[1,1,1]},"captions":[]}]}"#,
                "/gt_objects/0/captions",
            ),
        ];
        for (text, want) in cases {
            match scene_from_json(text) {
                Err(SceneError::Schema { pointer, .. }) => assert_eq!(pointer, want, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn negative_zero_is_written_as_zero() {
        let mut s = String::new();
        num(&mut s, -1e-9);
        assert_eq!(s, "0.000000");
    }
}
