//! Synthetic indoor scenes and their on-disk form.
//!
//! A scene is stored as two files sharing a stem: an ASCII PLY with the
//! points and a text sidecar with one `box <class> <cx> <cy> <cz> <w> <l> <h>`
//! line per object. Detections use `det <class> <score> <cx> <cy> <cz> <w> <l> <h>`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Box3D, Detection, LabeledBox};
use crate::point_ops::PointSet;
use crate::tensor::Tensor;

/// Name and nominal `(w, l, h)` size of an object class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    pub name: String,
    pub size: [f64; 3],
}

/// Ten furniture classes with distinct footprints and heights.
pub fn default_classes() -> Vec<ClassPrior> {
    [
        ("bed", [2.0, 1.6, 0.6]),
        ("table", [1.0, 1.0, 0.75]),
        ("sofa", [2.1, 0.9, 0.85]),
        ("chair", [0.5, 0.5, 0.95]),
        ("toilet", [0.4, 0.7, 0.8]),
        ("desk", [1.5, 0.7, 0.75]),
        ("dresser", [1.2, 0.5, 1.1]),
        ("night_stand", [0.5, 0.45, 0.55]),
        ("bookshelf", [0.9, 0.35, 1.8]),
        ("bathtub", [1.7, 0.8, 0.5]),
    ]
    .into_iter()
    .map(|(n, s)| ClassPrior { name: n.to_string(), size: s })
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Floor extents along x and y, meters.
    pub room: [f64; 2],
    pub wall_height: f64,
    /// Inclusive range of the object count.
    pub objects: (usize, usize),
    pub classes: Vec<ClassPrior>,
    /// Relative uniform jitter applied to every size component.
    pub size_jitter: f64,
    /// Points per square meter of object surface.
    pub density: f64,
    /// Target total point count; clutter fills up to it.
    pub points: usize,
    /// Clutter is at least this fraction of `points`.
    pub clutter_fraction: f64,
    /// Minimum gap between object footprints and to the walls.
    pub margin: f64,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            room: [5.0, 5.0],
            wall_height: 1.2,
            objects: (3, 6),
            classes: default_classes(),
            size_jitter: 0.05,
            density: 70.0,
            points: 2048,
            clutter_fraction: 0.25,
            margin: 0.15,
            max_attempts: 200,
        }
    }
}

impl SceneSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.room.iter().all(|&r| r > 0.0 && r.is_finite())
            && self.wall_height > 0.0
            && self.objects.0 <= self.objects.1
            && (0.0..1.0).contains(&self.size_jitter)
            && self.density > 0.0
            && (0.0..=1.0).contains(&self.clutter_fraction)
            && self.margin >= 0.0
            && self.max_attempts > 0
            && self.classes.iter().all(|c| c.size.iter().all(|&s| s > 0.0));
        if !ok || (self.objects.1 > 0 && self.classes.is_empty()) {
            return Err(Error::Config(format!("invalid scene spec: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub points: PointSet<f32>,
    pub boxes: Vec<LabeledBox>,
    pub class_names: Vec<String>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for b in &self.boxes {
            if b.class >= self.class_names.len() {
                return Err(Error::Invalid(format!("scene {}: class {} outside vocabulary", self.id, b.class)));
            }
            if points_in_box(&self.points, &b.bbox) == 0 {
                return Err(Error::Invalid(format!("scene {}: empty box {:?}", self.id, b.bbox)));
            }
        }
        Ok(())
    }

    pub fn points_f64(&self) -> PointSet<f64> {
        PointSet::new(self.points.tensor().cast()).expect("finite points")
    }
}

pub fn points_in_box(points: &PointSet<f32>, b: &Box3D) -> usize {
    (0..points.len()).filter(|&i| b.contains(points.point(i).map(f64::from))).count()
}

/// Total area of the five visible faces (no bottom).
pub fn visible_area(size: [f64; 3]) -> f64 {
    let [w, l, h] = size;
    w * l + 2.0 * h * (w + l)
}

/// Points are placed this far inside each face so they stay within the box
/// after rounding to 32-bit floats.
const SURFACE_INSET: f64 = 0.005;

fn sample_surface(rng: &mut ChaCha8Rng, b: &Box3D, count: usize, out: &mut Vec<[f64; 3]>) {
    let [w, l, h] = b.size;
    let lo = b.min();
    let faces = [w * l, w * h, w * h, l * h, l * h];
    let total: f64 = faces.iter().sum();
    let e = SURFACE_INSET;
    for _ in 0..count {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= faces[face] {
            pick -= faces[face];
            face += 1;
        }
        let (u, v) = (rng.random_range(e..1.0 - e), rng.random_range(e..1.0 - e));
        let p = match face {
            0 => [lo[0] + u * w, lo[1] + v * l, lo[2] + h - e],
            1 => [lo[0] + u * w, lo[1] + e, lo[2] + v * h],
            2 => [lo[0] + u * w, lo[1] + l - e, lo[2] + v * h],
            3 => [lo[0] + e, lo[1] + u * l, lo[2] + v * h],
            _ => [lo[0] + w - e, lo[1] + u * l, lo[2] + v * h],
        };
        out.push(p);
    }
}

fn overlaps(a: &Box3D, b: &Box3D, margin: f64) -> bool {
    (0..2).all(|d| (a.center[d] - b.center[d]).abs() < 0.5 * (a.size[d] + b.size[d]) + margin)
}

/// Whole layouts drawn before a scene is declared infeasible.
const LAYOUT_RESTARTS: usize = 20;

/// One layout attempt: draws the object count, classes and sizes, then
/// places each object by rejection sampling.
fn place_objects(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<LabeledBox>> {
    let n_obj = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = rng.random_range(0..spec.classes.len());
        let nominal = spec.classes[class].size;
        let j = spec.size_jitter;
        let size: [f64; 3] = std::array::from_fn(|d| nominal[d] * (1.0 + rng.random_range(-j..=j)));
        let mut placed = None;
        for _ in 0..spec.max_attempts {
            let free: [f64; 2] = std::array::from_fn(|d| spec.room[d] - size[d] - 2.0 * spec.margin);
            if free[0] <= 0.0 || free[1] <= 0.0 {
                break;
            }
            let c = [
                spec.margin + 0.5 * size[0] + rng.random_range(0.0..free[0]),
                spec.margin + 0.5 * size[1] + rng.random_range(0.0..free[1]),
                0.5 * size[2],
            ];
            let b = Box3D::new(c, size)?;
            if boxes.iter().all(|o| !overlaps(&o.bbox, &b, spec.margin)) {
                placed = Some(b);
                break;
            }
        }
        let Some(bbox) = placed else {
            return Err(Error::Infeasible(format!(
                "could not place a {} in a {:?} room after {} attempts in each of {LAYOUT_RESTARTS} layouts",
                spec.classes[class].name, spec.room, spec.max_attempts
            )));
        };
        boxes.push(LabeledBox { bbox, class });
    }
    Ok(boxes)
}

/// Places objects on the floor, samples their visible surfaces and adds
/// floor and wall clutter. A pure function of `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec, id: &str) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = place_objects(&mut rng, spec);
    for _ in 1..LAYOUT_RESTARTS {
        if boxes.is_ok() {
            break;
        }
        boxes = place_objects(&mut rng, spec);
    }
    let boxes = boxes?;

    let mut pts: Vec<[f64; 3]> = Vec::with_capacity(spec.points);
    for b in &boxes {
        let count = (visible_area(b.bbox.size) * spec.density).round() as usize;
        sample_surface(&mut rng, &b.bbox, count.max(1), &mut pts);
    }
    let clutter = spec.points.saturating_sub(pts.len()).max((spec.clutter_fraction * spec.points as f64).round() as usize);
    let [rx, ry] = spec.room;
    let wall_len = 2.0 * (rx + ry);
    let floor_share = rx * ry / (rx * ry + wall_len * spec.wall_height);
    let mut added = 0;
    while added < clutter {
        let p = if rng.random_bool(floor_share) {
            [rng.random_range(0.0..rx), rng.random_range(0.0..ry), 0.0]
        } else {
            let t = rng.random_range(0.0..wall_len);
            let z = rng.random_range(0.0..spec.wall_height);
            if t < rx {
                [t, 0.0, z]
            } else if t < rx + ry {
                [rx, t - rx, z]
            } else if t < 2.0 * rx + ry {
                [t - rx - ry, ry, z]
            } else {
                [0.0, t - 2.0 * rx - ry, z]
            }
        };
        // floor under furniture is hidden
        if boxes.iter().any(|b| b.bbox.contains(p)) {
            continue;
        }
        pts.push(p);
        added += 1;
    }
    // scanner order carries no information
    for i in (1..pts.len()).rev() {
        pts.swap(i, rng.random_range(0..=i));
    }
    let flat: Vec<f32> = pts.iter().flatten().map(|&v| v as f32).collect();
    let points = PointSet::new(Tensor::from_vec(&[pts.len(), 3], flat)?)?;
    Ok(Scene { id: id.to_string(), points, boxes, class_names: spec.class_names() })
}

/// `count` scenes; scene `i` uses its own stream derived from `seed`.
pub fn generate_dataset(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, i), spec, &format!("scene_{i:04}")))
        .collect()
}

fn scene_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 step keeps neighboring seeds unrelated
    let mut z = seed.wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- PLY

/// One element block of an ASCII PLY file.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyElement {
    pub name: String,
    pub properties: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyElement {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p == name)
    }
}

/// Writes scalar elements; properties are `float` unless listed in `doubles`.
pub fn write_ply(path: &Path, comments: &[String], elements: &[(PlyElement, bool)]) -> Result<()> {
    let mut s = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        let _ = writeln!(s, "comment {c}");
    }
    for (e, double) in elements {
        let _ = writeln!(s, "element {} {}", e.name, e.rows.len());
        for p in &e.properties {
            let _ = writeln!(s, "property {} {p}", if *double { "double" } else { "float" });
        }
    }
    s.push_str("end_header\n");
    for (e, double) in elements {
        for r in &e.rows {
            let vals: Vec<String> =
                r.iter().map(|&v| if *double { v.to_string() } else { (v as f32).to_string() }).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads an ASCII PLY with scalar properties.
pub fn read_ply(path: &Path) -> Result<Vec<PlyElement>> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(perr(1, "missing `ply` magic".into())),
    }
    let mut elements: Vec<(PlyElement, usize)> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(perr(ln, "only ascii PLY is supported".into()));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let (Some(name), Some(n)) = (tok.next(), tok.next()) else {
                    return Err(perr(ln, "malformed element line".into()));
                };
                let n = n.parse().map_err(|_| perr(ln, format!("bad element count `{n}`")))?;
                elements.push((PlyElement { name: name.into(), properties: vec![], rows: vec![] }, n));
            }
            Some("property") => {
                let Some((e, _)) = elements.last_mut() else {
                    return Err(perr(ln, "property before any element".into()));
                };
                match (tok.next(), tok.next()) {
                    (Some("list"), _) => return Err(perr(ln, "list properties are not supported".into())),
                    (Some(_), Some(name)) => e.properties.push(name.into()),
                    _ => return Err(perr(ln, "malformed property line".into())),
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(perr(ln, format!("unexpected header keyword `{other}`"))),
        }
    }
    if !header_done {
        return Err(perr(text.lines().count(), "missing end_header".into()));
    }
    let mut body = lines.filter(|(_, l)| !l.is_empty());
    for (e, n) in &mut elements {
        for _ in 0..*n {
            let Some((ln, line)) = body.next() else {
                return Err(perr(text.lines().count(), format!("element `{}` ends early", e.name)));
            };
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(ln, format!("bad number `{t}`"))))
                .collect::<Result<_>>()?;
            if row.len() != e.properties.len() {
                return Err(perr(ln, format!("expected {} values, got {}", e.properties.len(), row.len())));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(perr(ln, "non-finite value".into()));
            }
            e.rows.push(row);
        }
    }
    if let Some((ln, _)) = body.next() {
        return Err(perr(ln, "trailing data after the last element".into()));
    }
    Ok(elements.into_iter().map(|(e, _)| e).collect())
}

/// The `x y z` columns of the `vertex` element.
pub fn read_ply_points(path: &Path) -> Result<PointSet<f32>> {
    let elements = read_ply(path)?;
    let e = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: "no vertex element".into() })?;
    let cols: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|c| e.column(c).ok_or_else(|| Error::Parse { path: path.into(), line: 1, msg: format!("no `{c}` property") }))
        .collect::<Result<_>>()?;
    let flat: Vec<f32> = e.rows.iter().flat_map(|r| cols.iter().map(|&c| r[c] as f32)).collect();
    if e.rows.is_empty() {
        return Err(Error::Parse { path: path.into(), line: 1, msg: "no points".into() });
    }
    PointSet::new(Tensor::from_vec(&[e.rows.len(), 3], flat)?)
}

pub fn points_element(name: &str, pts: &[[f64; 3]]) -> PlyElement {
    PlyElement {
        name: name.into(),
        properties: vec!["x".into(), "y".into(), "z".into()],
        rows: pts.iter().map(|p| p.to_vec()).collect(),
    }
}

// ------------------------------------------------------------ sidecars

fn fmt_box(b: &Box3D) -> String {
    let v: Vec<String> = b.center.iter().chain(&b.size).map(|x| x.to_string()).collect();
    v.join(" ")
}

pub fn annotation_text(scene: &Scene) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# box <class> <cx> <cy> <cz> <w> <l> <h>");
    let _ = writeln!(s, "scene {}", scene.id);
    let _ = writeln!(s, "classes {}", scene.class_names.join(" "));
    for b in &scene.boxes {
        let _ = writeln!(s, "box {} {}", b.class, fmt_box(&b.bbox));
    }
    s
}

pub fn detection_text(dets: &[Detection]) -> String {
    let mut s = String::from("# det <class> <score> <cx> <cy> <cz> <w> <l> <h>\n");
    for d in dets {
        let _ = writeln!(s, "det {} {} {}", d.class, d.score, fmt_box(&d.bbox));
    }
    s
}

struct Records {
    id: Option<String>,
    classes: Option<Vec<String>>,
    boxes: Vec<LabeledBox>,
    dets: Vec<Detection>,
}

fn parse_records(text: &str, path: &Path) -> Result<Records> {
    let mut r = Records { id: None, classes: None, boxes: vec![], dets: vec![] };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let mut tok = line.split_whitespace();
        let kind = tok.next().unwrap_or_default();
        let rest: Vec<&str> = tok.collect();
        let nums = |from: usize| -> Result<Vec<f64>> {
            rest[from..].iter().map(|t| t.parse::<f64>().map_err(|_| perr(format!("bad number `{t}`")))).collect()
        };
        let class = |t: &str| t.parse::<usize>().map_err(|_| perr(format!("bad class id `{t}`")));
        let bbox = |v: &[f64]| Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]).map_err(|e| perr(e.to_string()));
        match kind {
            "scene" if rest.len() == 1 => r.id = Some(rest[0].to_string()),
            "classes" if !rest.is_empty() => r.classes = Some(rest.iter().map(|s| s.to_string()).collect()),
            "box" if rest.len() == 7 => {
                let v = nums(1)?;
                r.boxes.push(LabeledBox { bbox: bbox(&v)?, class: class(rest[0])? });
            }
            "det" if rest.len() == 8 => {
                let v = nums(1)?;
                let score = v[0];
                if !(0.0..=1.0).contains(&score) {
                    return Err(perr(format!("score {score} outside [0, 1]")));
                }
                r.dets.push(Detection { bbox: bbox(&v[1..])?, class: class(rest[0])?, score });
            }
            "scene" | "classes" | "box" | "det" => return Err(perr(format!("wrong field count for `{kind}`"))),
            _ => return Err(perr(format!("unknown record `{kind}`"))),
        }
    }
    Ok(r)
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let r = parse_records(&std::fs::read_to_string(path)?, path)?;
    if !r.boxes.is_empty() {
        return Err(Error::Parse { path: path.into(), line: 1, msg: "box records in a detection file".into() });
    }
    Ok(r.dets)
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    std::fs::write(path, detection_text(dets))?;
    Ok(())
}

/// Sidecar path of a point file: same stem, `.txt` extension.
pub fn sidecar_path(ply: &Path) -> PathBuf {
    ply.with_extension("txt")
}

/// Writes `<dir>/<id>.ply` and `<dir>/<id>.txt`; returns the PLY path.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let ply = dir.join(format!("{}.ply", scene.id));
    let pts: Vec<[f64; 3]> = (0..scene.points.len()).map(|i| scene.points.point(i).map(f64::from)).collect();
    write_ply(&ply, &[format!("scene {}", scene.id)], &[(points_element("vertex", &pts), false)])?;
    std::fs::write(sidecar_path(&ply), annotation_text(scene))?;
    Ok(ply)
}

/// Loads a scene from its PLY path. Without a `classes` record the
/// vocabulary is `default_vocab`.
pub fn load_scene(ply: &Path, default_vocab: &[String]) -> Result<Scene> {
    let points = read_ply_points(ply)?;
    let side = sidecar_path(ply);
    let r = parse_records(&std::fs::read_to_string(&side)?, &side)?;
    if !r.dets.is_empty() {
        return Err(Error::Parse { path: side, line: 1, msg: "det records in an annotation file".into() });
    }
    let id = r.id.unwrap_or_else(|| ply.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let scene = Scene { id, points, boxes: r.boxes, class_names: r.classes.unwrap_or_else(|| default_vocab.to_vec()) };
    scene.validate()?;
    Ok(scene)
}

pub fn save_dataset(scenes: &[Scene], dir: &Path) -> Result<()> {
    scenes.iter().try_for_each(|s| save_scene(s, dir).map(|_| ()))
}

/// Every `*.ply` in `dir` with its sidecar, in file-name order.
pub fn load_dataset(dir: &Path, default_vocab: &[String]) -> Result<Vec<Scene>> {
    let mut plys: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    plys.sort();
    if plys.is_empty() {
        return Err(Error::Invalid(format!("no .ply scenes in {}", dir.display())));
    }
    plys.par_iter().map(|p| load_scene(p, default_vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_dense_enough() {
        let spec = SceneSpec::default();
        let a = generate_scene(7, &spec, "s").unwrap();
        assert_eq!(a, generate_scene(7, &spec, "s").unwrap());
        assert_ne!(a.points, generate_scene(8, &spec, "s").unwrap().points);
        a.validate().unwrap();
        assert!(a.points.len() >= spec.points);
        for b in &a.boxes {
            let implied = (visible_area(b.bbox.size) * spec.density).round() as usize;
            assert!(points_in_box(&a.points, &b.bbox) >= implied);
            assert_eq!(b.bbox.min()[2], 0.0);
        }
        for (i, x) in a.boxes.iter().enumerate() {
            for y in &a.boxes[i + 1..] {
                assert_eq!(x.bbox.intersection(&y.bbox), 0.0);
            }
        }
    }

    #[test]
    fn crowded_first_layout_is_redrawn() {
        // one of these scenes cannot fit its first draw of objects
        let scenes = generate_dataset(7, 4, &SceneSpec::default()).unwrap();
        assert!(scenes.iter().all(|s| s.validate().is_ok() && !s.boxes.is_empty()));
    }

    #[test]
    fn zero_objects_and_infeasible_rooms() {
        let spec = SceneSpec { objects: (0, 0), ..SceneSpec::default() };
        let s = generate_scene(1, &spec, "empty").unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.points.len(), spec.points);
        let tiny = SceneSpec { room: [1.0, 1.0], objects: (3, 3), ..SceneSpec::default() };
        assert!(matches!(generate_scene(1, &tiny, "x"), Err(Error::Infeasible(_))));
    }

    #[test]
    fn scene_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec::default();
        for scene in [generate_scene(3, &spec, "a").unwrap(), generate_scene(4, &SceneSpec { objects: (0, 0), ..spec.clone() }, "b").unwrap()] {
            let ply = save_scene(&scene, dir.path()).unwrap();
            assert_eq!(load_scene(&ply, &[]).unwrap(), scene);
        }
        let all = load_dataset(dir.path(), &[]).unwrap();
        assert_eq!(all.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn hand_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("f.ply");
        std::fs::write(
            &ply,
            "ply\nformat ascii 1.0\ncomment fixture\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1.5 -2 0.25\n3 4 5\n",
        )
        .unwrap();
        std::fs::write(sidecar_path(&ply), "box 1 1.5 -2 0.25 0.5 0.5 0.5\n").unwrap();
        let s = load_scene(&ply, &["a".into(), "b".into()]).unwrap();
        assert_eq!(s.points.point(1), [1.5, -2.0, 0.25]);
        assert_eq!(s.points.point(2), [3.0, 4.0, 5.0]);
        assert_eq!(s.boxes[0].class, 1);
        assert_eq!(s.id, "f");
    }

    #[test]
    fn parse_errors_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let ply = dir.path().join("bad.ply");
        std::fs::write(&ply, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 x 2\n").unwrap();
        assert!(matches!(read_ply(&ply), Err(Error::Parse { line: 9, .. })));
        let side = dir.path().join("s.txt");
        std::fs::write(&side, "# c\nbox 0 1 1 1 1 1 1\nbox 0 1 1 1 1 1\n").unwrap();
        assert!(matches!(parse_records(&std::fs::read_to_string(&side).unwrap(), &side), Err(Error::Parse { line: 3, .. })));
        std::fs::write(&side, "det 0 1.5 1 1 1 1 1 1\n").unwrap();
        assert!(matches!(read_detections(&side), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn detections_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        let dets = vec![
            Detection { bbox: Box3D::new([0.1, 0.2, 0.3], [1.0, 2.0, 0.5]).unwrap(), class: 3, score: 0.123456789 },
            Detection { bbox: Box3D::new([1.0; 3], [0.3; 3]).unwrap(), class: 0, score: 1.0 },
        ];
        write_detections(&p, &dets).unwrap();
        assert_eq!(read_detections(&p).unwrap(), dets);
    }

    #[test]
    fn datasets_are_reproducible() {
        let spec = SceneSpec::default();
        let a = generate_dataset(11, 3, &spec).unwrap();
        assert_eq!(a, generate_dataset(11, 3, &spec).unwrap());
        assert_ne!(a[0].points, a[1].points);
    }
}
