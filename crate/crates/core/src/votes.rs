//! Vote inspection: where seeds vote relative to object centroids.

use std::path::Path;

use crate::error::Result;
use crate::geometry::LabeledBox;
use crate::graph::Graph;
use crate::model::Detector;
use crate::params::ParamStore;
use crate::point_ops::dist2;
use crate::scene::{points_element, write_ply, PlyElement, Scene};
use crate::tensor::Tensor;

/// Seeds and their votes from one eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct VoteSnapshot {
    pub seeds: Vec<[f64; 3]>,
    pub votes: Vec<[f64; 3]>,
    /// Whether each seed lies inside a ground-truth box.
    pub on_object: Vec<bool>,
}

fn rows(t: &Tensor<f32>) -> Vec<[f64; 3]> {
    (0..t.rows()).map(|i| std::array::from_fn(|d| f64::from(t.row(i)[d]))).collect()
}

pub fn vote_snapshot(model: &Detector, store: &ParamStore<f32>, scene: &Scene) -> Result<VoteSnapshot> {
    let g = Graph::inference(store);
    let out = model.forward(&g, &scene.points)?;
    let seeds = rows(&out.seeds.coords);
    let votes = rows(out.votes.coords.value());
    let on_object = seeds.iter().map(|s| scene.boxes.iter().any(|b| b.bbox.contains(*s))).collect();
    Ok(VoteSnapshot { seeds, votes, on_object })
}

/// Mean distance from each object seed's vote to the nearest box centroid.
/// Seeds on background surfaces are not asked to vote anywhere and are
/// skipped. `None` when the scene has no object seeds.
pub fn mean_vote_distance(snap: &VoteSnapshot, boxes: &[LabeledBox]) -> Option<f64> {
    let d: Vec<f64> = snap
        .votes
        .iter()
        .zip(&snap.on_object)
        .filter(|(_, &on)| on)
        .filter_map(|(v, _)| boxes.iter().map(|b| dist2(v, &b.bbox.center).sqrt()).min_by(f64::total_cmp))
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Writes a PLY with elements `vertex` (input), `seed`, `vote`, `centroid`
/// and `box` (`cx cy cz w l h class`), and returns the mean vote distance.
pub fn dump_votes(model: &Detector, store: &ParamStore<f32>, scene: &Scene, path: &Path) -> Result<Option<f64>> {
    let snap = vote_snapshot(model, store, scene)?;
    let input: Vec<[f64; 3]> = (0..scene.points.len()).map(|i| scene.points.point(i).map(f64::from)).collect();
    let centroids: Vec<[f64; 3]> = scene.boxes.iter().map(|b| b.bbox.center).collect();
    let boxes = PlyElement {
        name: "box".into(),
        properties: ["cx", "cy", "cz", "w", "l", "h", "class"].map(String::from).to_vec(),
        rows: scene.boxes.iter().map(|b| b.bbox.center.iter().chain(&b.bbox.size).copied().chain([b.class as f64]).collect()).collect(),
    };
    let mean = mean_vote_distance(&snap, &scene.boxes);
    write_ply(
        path,
        &[format!("scene {}", scene.id), format!("mean_vote_distance {}", mean.map_or("nan".into(), |m| m.to_string()))],
        &[
            (points_element("vertex", &input), false),
            (points_element("seed", &snap.seeds), false),
            (points_element("vote", &snap.votes), false),
            (points_element("centroid", &centroids), true),
            (boxes, true),
        ],
    )?;
    Ok(mean)
}
