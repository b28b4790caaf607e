use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relight_core::scenestore::{encode_scene, load_scene, save_scene, StoreError};
use relight_core::splatfield::{AppearanceMlp, AuxLatent, SceneMetadata, SplatCloud, SplatScene, FEATURE_DIM, LATENT_DIM};

fn scene(seed: u64) -> SplatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splats = SplatCloud::zeros(0);
    for _ in 0..40 {
        let q: [f32; 4] = [rng.gen(), rng.gen(), rng.gen(), rng.gen()];
        splats.push([rng.gen(), rng.gen(), rng.gen()], q, [rng.gen_range(-4.0..0.0); 3], rng.gen_range(-3.0..3.0), [0.0; FEATURE_DIM].map(|_| rng.gen()));
    }
    SplatScene {
        splats,
        mlp: AppearanceMlp::random(&mut rng),
        latents: vec![AuxLatent { view_id: "train_00".into(), a: (0..LATENT_DIM).map(|_| rng.gen()).collect() }],
        background: [1.0; 3],
        metadata: SceneMetadata {
            radius: 2.5,
            config_hash: "c".repeat(64),
            light_dirs_hash: "d".repeat(64),
            light_dirs: vec![[0.0, 0.0, 1.0]],
            center: [0.1, 0.2, 0.3],
            default_camera: Some(([0.0, 0.0, 4.0], [0.0; 3])),
        },
    }
}

#[test]
fn file_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rlf");
    let s = scene(1);
    save_scene(&s, &path).unwrap();
    let a = load_scene(&path).unwrap();
    let b = load_scene(&path).unwrap();
    assert_eq!(a, s);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(&path).unwrap(), encode_scene(&a));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "temporary file left behind: {leftovers:?}");
}

#[test]
fn damaged_files_fail_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rlf");
    save_scene(&scene(2), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(load_scene(&path), Err(StoreError::Checksum { .. })));
    std::fs::write(&path, b"").unwrap();
    assert!(matches!(load_scene(&path), Err(StoreError::BadMagic)));
    let missing = dir.path().join("nope.rlf");
    match load_scene(&missing) {
        Err(StoreError::Io { path, .. }) => assert!(path.contains("nope.rlf")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn overwriting_replaces_the_whole_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.rlf");
    save_scene(&scene(3), &path).unwrap();
    let next = scene(4);
    save_scene(&next, &path).unwrap();
    assert_eq!(load_scene(&path).unwrap(), next);
}

proptest::proptest! {
    #[test]
    fn arbitrary_metadata_floats_round_trip(radius in 1e-6f64..1e6, c in proptest::array::uniform3(-1e3f64..1e3), d in proptest::array::uniform3(-1f64..1.0)) {
        let mut s = scene(9);
        s.metadata.radius = radius;
        s.metadata.center = c;
        s.metadata.light_dirs = vec![d, c];
        s.metadata.default_camera = Some((c, d));
        let bytes = encode_scene(&s);
        let back = relight_core::scenestore::decode_scene(&bytes).unwrap();
        proptest::prop_assert_eq!(&back, &s);
        proptest::prop_assert_eq!(encode_scene(&back), bytes);
    }
}
