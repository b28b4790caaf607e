use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use relight_core::camera::{CameraPose, Intrinsics};
use relight_core::colorlab::ImageRGB;
use relight_core::dirmath::{Direction, DirectionSet, Frame, Rotation3};
use relight_core::relightgen::{
    augment, relight, synth_scene, AugmentOptions, MultiLightDataset, MultiViewDataset, Preset, RelightError, RelightRequest, RelighterSpec, SceneInfo,
    SynthOptions, View, ViewGeometry,
};

fn small(preset: Preset, train: usize, test: usize) -> SynthOptions {
    SynthOptions { train_views: train, test_views: test, width: 32, height: 32, points: 400, ..SynthOptions::new(preset) }
}

fn default_dirs() -> Vec<Direction> {
    DirectionSet::default_set().directions().unwrap()
}

fn cam_dir(v: [f64; 3]) -> Direction {
    Direction::normalized(v, Frame::CameraLocal).unwrap()
}

fn oracle_request<'a>(ds: &'a MultiViewDataset, target: &'a Direction, source: &'a Direction) -> RelightRequest<'a> {
    let v = &ds.views[0];
    let rel = nalgebra::Vector3::from(ds.scene.center) - nalgebra::Vector3::from(v.pose.position);
    let c = v.pose.rotation.matrix().transpose() * rel;
    RelightRequest {
        image: &v.image,
        depth: v.depth.as_ref(),
        normals: v.normals.as_ref(),
        geometry: Some(ViewGeometry { intrinsics: v.pose.intrinsics, center_camera: [c.x, c.y, c.z], radius: ds.scene.radius }),
        target,
        source,
    }
}

#[test]
fn identity_returns_input_bit_for_bit() {
    let img = ImageRGB::from_fn(7, 5, |x, y| [x as f32 / 7.0, y as f32 / 5.0, 0.3]);
    let t = cam_dir([0.3, 0.2, 0.9]);
    let s = cam_dir([0.0, 0.0, 1.0]);
    let req = RelightRequest { image: &img, depth: None, normals: None, geometry: None, target: &t, source: &s };
    assert_eq!(relight(&RelighterSpec::identity(), &req).unwrap(), img);
    assert!(matches!(relight(&RelighterSpec::oracle(), &req), Err(RelightError::MissingGeometry(_))));
}

#[test]
fn oracle_with_same_direction_is_identity() {
    let out = synth_scene(&small(Preset::Cornell, 1, 0), &default_dirs()).unwrap();
    let d = cam_dir([0.2, -0.3, 0.9]);
    let relit = relight(&RelighterSpec::oracle(), &oracle_request(&out.train, &d, &d)).unwrap();
    for (a, b) in relit.data().iter().zip(out.train.views[0].image.data()) {
        assert!((a - b).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn oracle_tilt_brightens_the_matching_half_of_a_plane() {
    let out = synth_scene(&small(Preset::Plane, 1, 0), &default_dirs()).unwrap();
    let src = cam_dir([0.0, 0.0, 1.0]);
    let half_means = |img: &ImageRGB| {
        let (mut l, mut r) = (0.0, 0.0);
        for y in 0..img.height() {
            for x in 0..img.width() {
                let v: f32 = img.pixel(x, y).iter().sum();
                if x < img.width() / 2 {
                    l += v;
                } else {
                    r += v;
                }
            }
        }
        (l, r)
    };
    let left = cam_dir([-0.7, 0.0, 0.7]);
    let right = cam_dir([0.7, 0.0, 0.7]);
    let (ll, lr) = half_means(&relight(&RelighterSpec::oracle(), &oracle_request(&out.train, &left, &src)).unwrap());
    let (rl, rr) = half_means(&relight(&RelighterSpec::oracle(), &oracle_request(&out.train, &right, &src)).unwrap());
    assert!(ll > lr, "{ll} vs {lr}");
    assert!(rr > rl, "{rr} vs {rl}");
}

#[test]
fn plane_depth_is_constant_and_oracle_matches_truth() {
    let dirs = default_dirs();
    let out = synth_scene(&small(Preset::Plane, 1, 0), &dirs).unwrap();
    let view = &out.train.views[0];
    let depth = view.depth.as_ref().unwrap();
    let on_plane: Vec<f32> = depth.data.iter().copied().filter(|d| *d > 0.0).collect();
    assert!(on_plane.len() > 100);
    assert!(on_plane.iter().all(|d| (d - on_plane[0]).abs() < 1e-5));

    let src = cam_dir([0.0, 0.0, 1.0]);
    for (k, d) in dirs.iter().enumerate() {
        let relit = relight(&RelighterSpec::oracle(), &oracle_request(&out.train, d, &src)).unwrap();
        let err = relit.mean_abs_diff(&out.train_truth.relit[0][k]).unwrap();
        assert!(err <= 0.05, "light {k}: {err}");
    }
}

#[test]
fn cornell_lights_differ_and_respect_energy_bound() {
    let out = synth_scene(&small(Preset::Cornell, 2, 1), &default_dirs()).unwrap();
    for stack in out.train_truth.relit.iter().chain(&out.test.relit) {
        let differs = (0..stack.len()).any(|a| (a + 1..stack.len()).any(|b| stack[a].mean_abs_diff(&stack[b]).unwrap() > 1.0 / 255.0));
        assert!(differs);
        // Albedos are at most 0.8, so shaded values never exceed them.
        assert!(stack.iter().all(|img| img.data().iter().all(|v| *v <= 0.8 + 1e-6)));
    }
    assert!(!out.train.sfm_points.is_empty());
    assert_eq!(out.test.base.views.len(), 1);
}

fn posed_view(id: &str, rotation: Rotation3, seed: f32) -> View {
    let k = Intrinsics { fx: 10.0, fy: 10.0, cx: 4.0, cy: 3.0, width: 8, height: 6 };
    View {
        id: id.into(),
        image: ImageRGB::from_fn(8, 6, |x, y| [0.1 + seed * 0.1 + x as f32 * 0.05, 0.2 + y as f32 * 0.1, 0.5]),
        depth: None,
        normals: None,
        pose: CameraPose::new(rotation, [0.0, 0.0, 3.0], k).unwrap(),
    }
}

fn toy_dataset(rotations: &[Rotation3]) -> MultiViewDataset {
    let views = rotations.iter().enumerate().map(|(i, r)| posed_view(&format!("v{i}"), *r, i as f32)).collect();
    MultiViewDataset { views, sfm_points: vec![[0.0; 3]], scene: SceneInfo { center: [0.0; 3], radius: 1.0, ambient: 0.15 } }
}

#[test]
fn identity_augmentation_cardinality_and_directions() {
    let rots = [Rotation3::IDENTITY, Rotation3::from_axis_angle([0.0, 1.0, 0.0], 0.4), Rotation3::from_axis_angle([1.0, 1.0, 0.0], -0.7)];
    let ds = toy_dataset(&rots);
    let dirs = default_dirs();
    let out = augment(&ds, &RelighterSpec::identity(), &dirs, &AugmentOptions { workers: 3, ..Default::default() }).unwrap();
    assert_eq!(out.relit.iter().map(Vec::len).sum::<usize>(), 18 * 3);
    for (v, stack) in out.relit.iter().enumerate() {
        for img in stack {
            assert!(img.mean_abs_diff(&ds.views[v].image).unwrap() < 1e-5);
        }
    }
    for k in 0..18 {
        let w0 = out.light_dir_world(0, k).v();
        let c = dirs[k].v();
        assert!((0..3).all(|i| (w0[i] - c[i]).abs() < 1e-12));
        for v in 1..3 {
            let expect = rots[v].apply(c);
            let got = out.light_dir_world(v, k).v();
            assert!((0..3).map(|i| (got[i] - expect[i]).powi(2)).sum::<f64>().sqrt() <= 1e-6);
        }
    }
}

#[test]
fn oracle_augmentation_is_reproducible_and_round_trips() {
    let dirs = default_dirs();
    let out = synth_scene(&small(Preset::Cornell, 2, 0), &dirs).unwrap();
    let spec = RelighterSpec::oracle();
    let a = augment(&out.train, &spec, &dirs, &AugmentOptions { workers: 2, ..Default::default() }).unwrap();
    let b = augment(&out.train, &spec, &dirs, &AugmentOptions::default()).unwrap();
    assert_eq!(a.relit, b.relit);

    let dir = tempfile::tempdir().unwrap();
    a.save(dir.path()).unwrap();
    let back = MultiLightDataset::load(dir.path()).unwrap();
    assert_eq!(back.base.views.len(), 2);
    assert_eq!(back.base.sfm_points.len(), a.base.sfm_points.len());
    assert_eq!(back.base.scene, a.base.scene);
    for (x, y) in back.relit.iter().flatten().zip(a.relit.iter().flatten()) {
        assert!(x.mean_abs_diff(y).unwrap() < 1.0 / 255.0);
    }
    let d0 = back.base.views[0].depth.as_ref().unwrap();
    let d1 = a.base.views[0].depth.as_ref().unwrap();
    assert!(d0.data.iter().zip(&d1.data).all(|(p, q)| (p - q).abs() <= 0.0006));
}

/// Minimal HTTP relight service: echoes the input image, or fails with a
/// JSON error when `fail` is set. Counts requests.
fn mock_service(fail: bool) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let counter = count.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.trim().is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            counter.fetch_add(1, Ordering::SeqCst);
            let req: serde_json::Value = serde_json::from_slice(&body).unwrap();
            assert!(request_line.starts_with("POST /relight"));
            assert_eq!(req["target_dir"].as_array().unwrap().len(), 3);
            let (status, reply) = if fail {
                ("500 Internal Server Error", serde_json::json!({"error": "model exploded"}))
            } else {
                ("200 OK", serde_json::json!({"image": req["image"]}))
            };
            let text = reply.to_string();
            let _ = write!(stream, "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}", text.len());
        }
    });
    (format!("http://{addr}"), count)
}

#[test]
fn remote_relighter_round_trip_and_resume() {
    let (url, count) = mock_service(false);
    let ds = toy_dataset(&[Rotation3::IDENTITY, Rotation3::from_axis_angle([0.0, 1.0, 0.0], 0.3)]);
    let dirs: Vec<Direction> = default_dirs()[..4].to_vec();
    let dir = tempfile::tempdir().unwrap();
    let opts = AugmentOptions { workers: 2, retries: 0, out_dir: Some(dir.path().to_path_buf()) };
    let spec = RelighterSpec::remote(&url).unwrap();
    let first = augment(&ds, &spec, &dirs, &opts).unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 8);
    for (v, stack) in first.relit.iter().enumerate() {
        for img in stack {
            assert!(img.mean_abs_diff(&ds.views[v].image).unwrap() < 1.0 / 255.0);
        }
    }
    // Everything is on disk, so a second run issues no requests.
    let second = augment(&ds, &spec, &dirs, &opts).unwrap();
    assert_eq!(count.load(Ordering::SeqCst), 8);
    assert_eq!(first.relit.len(), second.relit.len());
    let loaded = MultiLightDataset::load(dir.path()).unwrap();
    assert_eq!(loaded.light_count(), 4);
}

#[test]
fn remote_failures_carry_context_and_respect_retries() {
    let (url, count) = mock_service(true);
    let ds = toy_dataset(&[Rotation3::IDENTITY]);
    let dirs: Vec<Direction> = default_dirs()[..1].to_vec();
    let spec = RelighterSpec::remote(&url).unwrap();
    let err = augment(&ds, &spec, &dirs, &AugmentOptions { retries: 2, ..Default::default() }).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("v0") && msg.contains("model exploded") && msg.contains("500"), "{msg}");
    assert_eq!(count.load(Ordering::SeqCst), 3);
}
