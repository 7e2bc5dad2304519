//! Seeded synthetic knowledge bases, embeddings and scenes for tests,
//! benchmarks and demo data.

use rand::seq::index::sample;
use rand::Rng;

use crate::engine::{ground, EnergyWeights, GroundError, GroundingConfig};
use crate::eval::{PoolItem, StaticTier};
use crate::grasp::{GraspCandidate, GraspRect};
use crate::kb::{KbBuilder, KnowledgeBase};
use crate::percept::{object_embedding_id, verb_embedding_id, EmbeddingTable, EmbeddingVector};
use crate::scene::{BBox, GroundTruth, Scene, SceneCandidate};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldSpec {
    pub verbs: usize,
    pub objects: usize,
    pub properties_per_verb: usize,
    /// Size of the shared property pool verbs draw from.
    pub properties: usize,
    /// Objects linked to each property.
    pub objects_per_property: usize,
    pub dim: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            verbs: 37,
            objects: 31,
            properties_per_verb: 10,
            properties: 60,
            objects_per_property: 4,
            dim: 64,
        }
    }
}

impl WorldSpec {
    pub fn small() -> Self {
        WorldSpec { verbs: 4, objects: 6, properties_per_verb: 5, properties: 8, objects_per_property: 2, dim: 8 }
    }
}

/// A knowledge base with verb and object-name embeddings.
#[derive(Debug, Clone)]
pub struct World {
    pub kb: KnowledgeBase,
    pub embeddings: EmbeddingTable,
}

pub fn verb_name(i: usize) -> String {
    format!("verb_{i:02}")
}

pub fn object_name(i: usize) -> String {
    format!("object_{i:02}")
}

pub fn property_name(i: usize) -> String {
    format!("prop_{i:02}")
}

pub fn random_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn near(rng: &mut impl Rng, base: &[f32], noise: f32) -> Vec<f32> {
    base.iter().map(|x| x + rng.random_range(-noise..=noise)).collect()
}

pub fn random_kb(rng: &mut impl Rng, spec: &WorldSpec) -> KnowledgeBase {
    let mut b = KbBuilder::default();
    for o in 0..spec.objects {
        b = b.object(&object_name(o));
    }
    let props = spec.properties.max(spec.properties_per_verb);
    for v in 0..spec.verbs {
        b = b.verb(&verb_name(v));
        for p in sample(rng, props, spec.properties_per_verb.min(props)) {
            b = b.vp(&verb_name(v), &property_name(p), rng.random_range(0.0..=1.0));
        }
    }
    for p in 0..props {
        b = b.property(&property_name(p));
        let k = spec.objects_per_property.min(spec.objects);
        for o in sample(rng, spec.objects, k) {
            b = b.po(&property_name(p), &object_name(o), rng.random_range(0.0..=1.0));
        }
    }
    b.build().expect("generated edges are valid")
}

pub fn random_world(rng: &mut impl Rng, spec: &WorldSpec) -> World {
    let kb = random_kb(rng, spec);
    let mut embeddings = EmbeddingTable::new(spec.dim);
    for v in kb.verbs() {
        embeddings.insert(EmbeddingVector::new(verb_embedding_id(v), random_vector(rng, spec.dim))).unwrap();
    }
    for o in kb.objects() {
        embeddings.insert(EmbeddingVector::new(object_embedding_id(o), random_vector(rng, spec.dim))).unwrap();
    }
    World { kb, embeddings }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub candidates: usize,
    pub max_grasps: usize,
    /// Probability that a candidate has no grasps at all.
    pub empty_grasp_p: f64,
    /// Uniform noise added to the object-name embedding of each region.
    pub embedding_noise: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { candidates: 10, max_grasps: 4, empty_grasp_p: 0.0, embedding_noise: 0.5 }
    }
}

fn random_grasps(rng: &mut impl Rng, bbox: &BBox, n: usize) -> Vec<GraspCandidate> {
    (0..n)
        .map(|_| {
            let rect = GraspRect::new(
                bbox.x + bbox.w * rng.random_range(0.3..0.7),
                bbox.y + bbox.h * rng.random_range(0.3..0.7),
                bbox.w * rng.random_range(0.2..0.5),
                bbox.h * rng.random_range(0.1..0.3),
                rng.random_range(-89.0..=90.0),
            );
            GraspCandidate::new(rect, rng.random_range(0.05..=1.0))
        })
        .collect()
}

/// A scene over `world`'s objects. Returns the scene and the region
/// embeddings, which are added to `world.embeddings`.
pub fn random_scene(rng: &mut impl Rng, world: &mut World, scene_id: &str, spec: &SceneSpec) -> Scene {
    let objects: Vec<String> = world.kb.objects().iter().cloned().collect();
    let mut candidates = Vec::with_capacity(spec.candidates);
    for i in 0..spec.candidates {
        // Grid layout keeps boxes disjoint.
        let bbox = BBox::new(
            (i % 4) as f64 * 100.0 + rng.random_range(0.0..10.0),
            (i / 4) as f64 * 100.0 + rng.random_range(0.0..10.0),
            rng.random_range(40.0..80.0),
            rng.random_range(40.0..80.0),
        );
        let grasps = if rng.random_bool(spec.empty_grasp_p) {
            Vec::new()
        } else {
            let n = rng.random_range(1..=spec.max_grasps.max(1));
            random_grasps(rng, &bbox, n)
        };
        let label = &objects[rng.random_range(0..objects.len())];
        let base = world.embeddings.get(&object_embedding_id(label)).expect("world has object embeddings").to_vec();
        let embedding_id = format!("{scene_id}/r{i}");
        world
            .embeddings
            .insert(EmbeddingVector::new(&embedding_id, near(rng, &base, spec.embedding_noise)))
            .expect("fresh embedding id");
        candidates.push(SceneCandidate {
            roi_id: format!("r{i}"),
            bbox,
            grasps,
            embedding_id,
            hypothesis_label: Some(label.clone()),
        });
    }
    Scene { scene_id: scene_id.into(), candidates, ground_truth: None }
}

/// Perception noise injected into the lower static tiers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierNoise {
    /// Box offset per axis as a fraction of the box extent.
    pub bbox_shift: f64,
    /// Grasp centre offset per axis as a fraction of the rectangle extent.
    pub grasp_shift: f64,
    pub grasp_angle_deg: f64,
}

impl Default for TierNoise {
    fn default() -> Self {
        TierNoise { bbox_shift: 0.45, grasp_shift: 0.6, grasp_angle_deg: 45.0 }
    }
}

/// Tiered static dataset. Each base scene is grounded once and its
/// selection becomes the ground-truth target, with the box and the chosen
/// grasp as ground truth. `perfect_grasp` moves the boxes,
/// `full_pipeline` also moves and rotates every grasp rectangle. Scores
/// are never changed, so the selection is the same in all tiers.
pub fn static_dataset(
    rng: &mut impl Rng,
    world: &mut World,
    scenes: usize,
    spec: &SceneSpec,
    noise: &TierNoise,
    weights: &EnergyWeights,
    config: &GroundingConfig,
) -> Result<Vec<(StaticTier, Vec<Scene>)>, GroundError> {
    let spec = SceneSpec { empty_grasp_p: 0.0, ..*spec };
    let verbs: Vec<String> = world.kb.verbs().iter().cloned().collect();
    let (mut t1, mut t2, mut t3) = (Vec::new(), Vec::new(), Vec::new());
    for n in 0..scenes {
        let mut scene = random_scene(rng, world, &format!("scene_{n:03}"), &spec);
        let verb = &verbs[rng.random_range(0..verbs.len())];
        let result = ground(&scene, verb, &world.kb, &world.embeddings, weights, config)?;
        let sel = &result.ranked[0];
        let target = scene.candidate(&sel.roi_id).expect("selected from scene");
        scene.ground_truth = Some(GroundTruth {
            verb: verb.clone(),
            target_roi_id: target.roi_id.clone(),
            target_bbox: target.bbox,
            gt_grasp_rects: vec![sel.best_grasp.as_ref().expect("static scenes have grasps").rect],
        });

        let mut shifted = scene.clone();
        for c in &mut shifted.candidates {
            c.bbox.x += c.bbox.w * rng.random_range(-noise.bbox_shift..=noise.bbox_shift);
            c.bbox.y += c.bbox.h * rng.random_range(-noise.bbox_shift..=noise.bbox_shift);
        }
        let mut full = shifted.clone();
        for g in full.candidates.iter_mut().flat_map(|c| c.grasps.iter_mut()) {
            let r = g.rect;
            g.rect = GraspRect::new(
                r.cx + r.w * rng.random_range(-noise.grasp_shift..=noise.grasp_shift),
                r.cy + r.h * rng.random_range(-noise.grasp_shift..=noise.grasp_shift),
                r.w,
                r.h,
                r.theta_deg + rng.random_range(-noise.grasp_angle_deg..=noise.grasp_angle_deg),
            );
        }
        t1.push(scene);
        t2.push(shifted);
        t3.push(full);
    }
    Ok(vec![
        (StaticTier::PerfectGraspAndDetect, t1),
        (StaticTier::PerfectGrasp, t2),
        (StaticTier::FullPipeline, t3),
    ])
}

/// Episode pool: `per_object` noisy views of every object. An object
/// affords a verb when its affordance energy is below `threshold`.
pub fn episode_pool(
    rng: &mut impl Rng,
    world: &mut World,
    per_object: usize,
    noise: f32,
    threshold: f64,
) -> Vec<PoolItem> {
    let objects: Vec<String> = world.kb.objects().iter().cloned().collect();
    let mut items = Vec::new();
    for o in &objects {
        let affords: Vec<String> = world
            .kb
            .verbs()
            .iter()
            .filter(|v| world.kb.affordance_energy(v, o).is_ok_and(|e| e < threshold))
            .cloned()
            .collect();
        let base = world.embeddings.get(&object_embedding_id(o)).expect("object embedding").to_vec();
        for k in 0..per_object {
            let id = format!("img/{o}/{k}");
            world.embeddings.insert(EmbeddingVector::new(&id, near(rng, &base, noise))).expect("fresh id");
            items.push(PoolItem { candidate_id: id.clone(), embedding_id: id, label: Some(o.clone()), affords: affords.clone() });
        }
    }
    items
}
