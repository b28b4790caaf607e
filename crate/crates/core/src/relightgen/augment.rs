//! Relights every view toward every light direction with a pool of workers,
//! color-matches each view's stack to its capture, and optionally persists
//! progress so an interrupted run resumes where it stopped.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use nalgebra::Vector3;

use super::dataset::{relit_name, Manifest};
use super::{relight, MultiLightDataset, MultiViewDataset, RelightError, RelightRequest, RelighterKind, RelighterSpec, ViewGeometry};
use crate::colorlab::{match_stats_joint, ImageRGB};
use crate::dirmath::{Direction, DirectionSet};
use crate::imageio;

#[derive(Debug, Clone)]
pub struct AugmentOptions {
    /// Concurrent relight calls.
    pub workers: usize,
    /// Extra attempts for a failed remote call.
    pub retries: usize,
    /// Output directory; when set, finished views are written as they
    /// complete and views already recorded in its manifest are reused.
    pub out_dir: Option<PathBuf>,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self { workers: 1, retries: 0, out_dir: None }
    }
}

fn geometry(ds: &MultiViewDataset, v: usize) -> ViewGeometry {
    let pose = &ds.views[v].pose;
    let rel = Vector3::from(ds.scene.center) - Vector3::from(pose.position);
    let c = pose.rotation.matrix().transpose() * rel;
    ViewGeometry { intrinsics: pose.intrinsics, center_camera: [c.x, c.y, c.z], radius: ds.scene.radius }
}

fn relight_one(ds: &MultiViewDataset, spec: &RelighterSpec, v: usize, target: &Direction, source: &Direction, retries: usize) -> Result<ImageRGB, RelightError> {
    let view = &ds.views[v];
    let req = RelightRequest {
        image: &view.image,
        depth: view.depth.as_ref(),
        normals: view.normals.as_ref(),
        geometry: Some(geometry(ds, v)),
        target,
        source,
    };
    let attempts = if matches!(spec.kind, RelighterKind::Remote(_)) { retries + 1 } else { 1 };
    let mut last = None;
    for attempt in 0..attempts {
        match relight(spec, &req) {
            Ok(img) => return Ok(img),
            Err(e @ RelightError::Remote(_)) => {
                log::warn!("view {} attempt {}: {e}", view.id, attempt + 1);
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn completed_views(ds: &MultiViewDataset, opts: &AugmentOptions, n_lights: usize, relighter: &str) -> Result<HashMap<usize, Vec<ImageRGB>>, RelightError> {
    let mut done = HashMap::new();
    let Some(dir) = &opts.out_dir else { return Ok(done) };
    let Ok(manifest) = Manifest::load(dir) else { return Ok(done) };
    let ids: Vec<&str> = ds.views.iter().map(|v| v.id.as_str()).collect();
    if manifest.views != ids || manifest.lights != n_lights || manifest.relighter.as_deref() != Some(relighter) {
        return Ok(done);
    }
    for (v, view) in ds.views.iter().enumerate() {
        if !manifest.completed.contains(&view.id) {
            continue;
        }
        let stack: Result<Vec<_>, _> = (0..n_lights).map(|k| imageio::load_rgb(&dir.join("relit").join(relit_name(&view.id, k)))).collect();
        if let Ok(stack) = stack {
            done.insert(v, stack);
        }
    }
    Ok(done)
}

/// Relights `ds` toward each of `dirs` (camera frame). The capture is
/// assumed lit by a frontal flash.
pub fn augment(ds: &MultiViewDataset, spec: &RelighterSpec, dirs: &[Direction], opts: &AugmentOptions) -> Result<MultiLightDataset, RelightError> {
    ds.validate()?;
    if dirs.is_empty() {
        return Err(RelightError::Dataset("no light directions".into()));
    }
    let mut spec = spec.clone();
    spec.options.entry("ambient".into()).or_insert_with(|| ds.scene.ambient.to_string());
    let source = Direction::camera([0.0, 0.0, 1.0])?;
    let n_lights = dirs.len();
    let relighter = spec.name();

    let mut done = completed_views(ds, opts, n_lights, &relighter)?;
    let mut manifest = Manifest {
        version: super::MANIFEST_VERSION,
        scene: Some(ds.scene),
        views: ds.views.iter().map(|v| v.id.clone()).collect(),
        lights: n_lights,
        relighter: Some(relighter),
        completed: vec![],
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir.join("relit")).map_err(super::io_err(dir))?;
        ds.write_files(dir)?;
        DirectionSet::from_directions(dirs)?.save(&dir.join("directions.json"))?;
        manifest.completed = ds.views.iter().enumerate().filter(|(v, _)| done.contains_key(v)).map(|(_, view)| view.id.clone()).collect();
        manifest.save(dir)?;
        if !done.is_empty() {
            log::info!("resuming: {} of {} views already relit", done.len(), ds.views.len());
        }
    }

    let jobs: Vec<(usize, usize)> = (0..ds.views.len()).filter(|v| !done.contains_key(v)).flat_map(|v| (0..n_lights).map(move |k| (v, k))).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<(usize, usize, Result<ImageRGB, RelightError>)>();
    let mut failure = None;

    std::thread::scope(|scope| {
        for _ in 0..opts.workers.max(1).min(jobs.len().max(1)) {
            let tx = tx.clone();
            let (jobs, next, abort, spec, source) = (&jobs, &next, &abort, &spec, &source);
            scope.spawn(move || loop {
                if abort.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(v, k)) = jobs.get(i) else { break };
                let result = relight_one(ds, spec, v, &dirs[k], source, opts.retries);
                if tx.send((v, k, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: HashMap<usize, Vec<Option<ImageRGB>>> = HashMap::new();
        for (v, k, result) in rx {
            if failure.is_some() {
                continue;
            }
            let img = match result {
                Ok(img) => img,
                Err(e) => {
                    abort.store(true, Ordering::Relaxed);
                    failure = Some(RelightError::At { view: ds.views[v].id.clone(), light: k, source: Box::new(e) });
                    continue;
                }
            };
            let slot = pending.entry(v).or_insert_with(|| vec![None; n_lights]);
            slot[k] = Some(img);
            if slot.iter().all(Option::is_some) {
                let stack: Vec<ImageRGB> = pending.remove(&v).expect("present").into_iter().map(Option::unwrap).collect();
                match finish_view(ds, v, stack, opts, &mut manifest) {
                    Ok(matched) => {
                        done.insert(v, matched);
                    }
                    Err(e) => {
                        abort.store(true, Ordering::Relaxed);
                        failure = Some(e);
                    }
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }

    let relit = (0..ds.views.len()).map(|v| done.remove(&v).expect("every view relit")).collect();
    let out = MultiLightDataset { base: ds.clone(), light_dirs_camera: dirs.to_vec(), relit };
    out.validate()?;
    Ok(out)
}

fn finish_view(ds: &MultiViewDataset, v: usize, stack: Vec<ImageRGB>, opts: &AugmentOptions, manifest: &mut Manifest) -> Result<Vec<ImageRGB>, RelightError> {
    let view = &ds.views[v];
    let matched = match_stats_joint(&stack, &view.image)?;
    if let Some(dir) = &opts.out_dir {
        for (k, img) in matched.iter().enumerate() {
            imageio::save_rgb(img, &dir.join("relit").join(relit_name(&view.id, k)))?;
        }
        manifest.completed.push(view.id.clone());
        let order: HashMap<&str, usize> = ds.views.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
        manifest.completed.sort_by_key(|id| order[id.as_str()]);
        manifest.save(dir)?;
    }
    Ok(matched)
}
