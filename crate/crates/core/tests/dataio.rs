use affground_core::dataio::{
    self, canonicalize, check_scene_embeddings, load_embeddings, load_kb, load_scene, save_embeddings_binary,
    save_embeddings_text, save_kb, save_scene, DataError,
};
use affground_core::percept::{EmbeddingTable, EmbeddingVector};
use affground_core::synth::{random_scene, random_world, SceneSpec, WorldSpec};
use affground_core::{KnowledgeBase, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn three_edges() -> KnowledgeBase {
    KnowledgeBase::builder()
        .vp("write", "tip_shaped", 0.9)
        .po("tip_shaped", "pen", 0.8)
        .po("tip_shaped", "pencil", 0.123456789)
        .object("mug")
        .build()
        .unwrap()
}

#[test]
fn kb_round_trips() {
    for kb in [KnowledgeBase::empty(1), three_edges()] {
        let bytes = save_kb(&kb);
        let back = load_kb(&bytes).unwrap();
        assert_eq!(back, kb);
        assert_eq!(save_kb(&back), bytes);
        assert_eq!(canonicalize(&bytes).unwrap(), bytes);
    }
    let text = String::from_utf8(save_kb(&three_edges())).unwrap();
    assert!(text.starts_with("{\n  \"format\": \"affkb/1\""));
    assert!(text.ends_with("}\n"));
    assert!(text.contains("\"weight\": 0.9\n"));
}

#[test]
fn random_kbs_and_scenes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut w = random_world(&mut rng, &WorldSpec::default());
    let kb_bytes = save_kb(&w.kb);
    assert_eq!(save_kb(&load_kb(&kb_bytes).unwrap()), kb_bytes);
    for n in 0..20 {
        let s = random_scene(&mut rng, &mut w, &format!("s{n}"), &SceneSpec { empty_grasp_p: 0.2, ..Default::default() });
        let b1 = save_scene(&s);
        let b2 = save_scene(&load_scene(&b1).unwrap());
        assert_eq!(b1, b2);
    }
}

#[test]
fn kb_schema_errors_have_paths() {
    let bad = br#"{"format":"affkb/1","version":1,"verbs":["write"],"properties":["tip"],"objects":["pen"],
        "vp_edges":[{"verb":"write","property":"tip","weight":1.2}],"po_edges":[]}"#;
    let err = load_kb(bad).unwrap_err();
    assert_eq!(err.issues()[0].path, "vp_edges[0].weight");
    assert!(err.to_string().contains("vp_edges[0].weight"));

    let wrong_type = br#"{"format":"affkb/1","version":1,"verbs":[],"properties":[],"objects":[],
        "vp_edges":[{"verb":"write","property":"tip","weight":"heavy"}],"po_edges":[]}"#;
    match load_kb(wrong_type).unwrap_err() {
        DataError::Schema { path, .. } => assert_eq!(path, "vp_edges[0].weight"),
        e => panic!("{e}"),
    }

    let undeclared = br#"{"format":"affkb/1","version":1,"verbs":["write"],"properties":[],"objects":[],
        "vp_edges":[{"verb":"write","property":"tip","weight":0.5}],"po_edges":[]}"#;
    let ins = dataio::inspect_kb(undeclared).unwrap();
    assert_eq!(ins.issues.len(), 1);
    assert_eq!(ins.issues[0].path, "vp_edges[0].property");

    let dup = br#"{"format":"affkb/1","version":1,"verbs":["cut"],"properties":["sharp"],"objects":[],
        "vp_edges":[{"verb":"cut","property":"sharp","weight":0.5},{"verb":"cut","property":"sharp","weight":0.6}],"po_edges":[]}"#;
    assert_eq!(load_kb(dup).unwrap_err().issues()[0].path, "vp_edges[1]");

    let wrong_tag = br#"{"format":"affscene/1"}"#;
    assert!(matches!(load_kb(wrong_tag), Err(DataError::Format { .. })));
    assert!(matches!(load_kb(b"{not json"), Err(DataError::Syntax(_))));
}

fn scene_json(target: &str, score: f64) -> String {
    format!(
        r#"{{"format":"affscene/1","scene_id":"s","candidates":[{{"roi_id":"a","bbox":[0,0,10,10],
        "grasps":[{{"rect":{{"cx":5,"cy":5,"w":4,"h":2,"theta_deg":0}},"score":{score}}}],"embedding_id":"e:a"}}],
        "ground_truth":{{"verb":"cut","target_roi_id":"{target}","target_bbox":[0,0,10,10],"gt_grasp_rects":[]}}}}"#
    )
}

#[test]
fn scene_errors() {
    let ok = load_scene(scene_json("a", 0.5).as_bytes()).unwrap();
    assert_eq!(ok.candidates.len(), 1);
    let saved = save_scene(&ok);
    assert_eq!(save_scene(&load_scene(&saved).unwrap()), saved);

    let e = load_scene(scene_json("zz", 0.5).as_bytes()).unwrap_err();
    assert_eq!(e.issues()[0].path, "ground_truth.target_roi_id");
    let e = load_scene(scene_json("a", 0.0).as_bytes()).unwrap_err();
    assert_eq!(e.issues()[0].path, "candidates[0].grasps[0].score");
}

fn table() -> EmbeddingTable {
    EmbeddingTable::from_vectors(
        4,
        [
            EmbeddingVector::new("verb:cut", vec![1.0, 0.5, -0.25, 0.1]),
            EmbeddingVector::new("e:a", vec![0.0, 1.0, 0.0, 3.5]),
        ],
    )
    .unwrap()
}

#[test]
fn binary_embeddings() {
    let bytes = save_embeddings_binary(&table());
    assert_eq!(&bytes[..8], b"AFFEMB1\0");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
    let back = load_embeddings(&bytes).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back.get("e:a").unwrap(), &[0.0, 1.0, 0.0, 3.5]);

    // Header claims 3 vectors: payload too short.
    let mut truncated = bytes.clone();
    truncated[8] = 3;
    assert!(matches!(load_embeddings(&truncated), Err(DataError::Embedding(_))));
    // Header claims dim 3: sizes no longer line up with the id list.
    let mut wrong_dim = bytes.clone();
    wrong_dim[12] = 3;
    assert!(load_embeddings(&wrong_dim).is_err());
    assert!(load_embeddings(&bytes[..20]).is_err());

    let mut dup = bytes[..16 + 32].to_vec();
    dup.extend_from_slice(b"same\nsame\n");
    assert!(load_embeddings(&dup).is_err());
}

#[test]
fn text_embeddings() {
    let bytes = save_embeddings_text(&table());
    let back = load_embeddings(&bytes).unwrap();
    assert_eq!(save_embeddings_text(&back), bytes);
    assert_eq!(back.get("verb:cut").unwrap(), table().get("verb:cut").unwrap());
    let dup = br#"{"format":"affemb/1","dim":2,"vectors":[{"id":"x","values":[1,0]},{"id":"x","values":[0,1]}]}"#;
    match load_embeddings(dup).unwrap_err() {
        DataError::Schema { path, .. } => assert_eq!(path, "vectors[1]"),
        e => panic!("{e}"),
    }
}

#[test]
fn referential_check_lists_all_missing() {
    let mut s: Scene = load_scene(scene_json("a", 0.5).as_bytes()).unwrap();
    assert!(check_scene_embeddings(&s, &table()).is_ok());
    let mut b = s.candidates[0].clone();
    b.roi_id = "b".into();
    b.embedding_id = "e:ghost".into();
    s.candidates.push(b);
    s.candidates[0].embedding_id = "e:absent".into();
    match check_scene_embeddings(&s, &table()).unwrap_err() {
        DataError::Unresolved(ids) => assert_eq!(ids, ["e:absent", "e:ghost"]),
        e => panic!("{e}"),
    }
}

#[test]
fn canonicalize_is_idempotent() {
    let raw = br#"{"z": [3.14159265358979, 1e-12, 100000000000000000000000.0], "a": {"k": true}}"#;
    let once = canonicalize(raw).unwrap();
    assert_eq!(canonicalize(&once).unwrap(), once);
}
