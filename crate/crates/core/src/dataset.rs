//! Posed image datasets on disk and synthetic toy scenes.
//!
//! On-disk layout:
//!
//! ```text
//! root/cameras.json
//! root/images/*.png        8-bit RGB, read as value / 255
//! root/labels/*.png        optional 8-bit class ids (255 = unlabelled)
//! root/points.xyz          optional seed points, one `x y z` per line
//! ```

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, CameraDesc};
use crate::error::{Error, Result};
use crate::img::{read_label_png, write_label_png, Image};
use crate::loss::IGNORE_LABEL;
use crate::raster::blend_reference;
use crate::scene::{logit, read_xyz_points, Gaussian3D, SplatScene};

pub const MANIFEST: &str = "cameras.json";
pub const POINTS_FILE: &str = "points.xyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    pub camera: Camera,
    /// `H × W × 3` in `[0, 1]`.
    pub image: Image,
    /// Class id per pixel; [`IGNORE_LABEL`] marks unlabelled pixels.
    pub labels: Option<Vec<u32>>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub views: Vec<View>,
    /// Number of semantic classes, 0 when there are no labels. The last class is the
    /// "unknown" category in real datasets.
    pub class_count: usize,
    /// Optional point cloud used to seed Gaussians.
    pub seed_points: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: Split,
    #[serde(flatten)]
    pub camera: CameraDesc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub class_count: usize,
    pub views: Vec<ManifestView>,
}

impl Dataset {
    pub fn train_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Train)
    }

    pub fn test_views(&self) -> impl Iterator<Item = &View> {
        self.views.iter().filter(|v| v.split == Split::Test)
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for v in &self.views {
            v.camera.validate()?;
            if v.image.width != v.camera.width || v.image.height != v.camera.height || v.image.channels != 3 {
                return Err(Error::Dataset(format!(
                    "view {}: image is {}x{}x{}, camera says {}x{}",
                    v.name, v.image.width, v.image.height, v.image.channels, v.camera.width, v.camera.height
                )));
            }
            if let Some(labels) = &v.labels {
                if self.class_count == 0 {
                    return Err(Error::Dataset(format!("view {} has labels but class_count is 0", v.name)));
                }
                if labels.len() != v.camera.pixel_count() {
                    return Err(Error::Dataset(format!("view {}: label map size mismatch", v.name)));
                }
                if let Some(&bad) = labels
                    .iter()
                    .find(|&&l| l != IGNORE_LABEL && l as usize >= self.class_count)
                {
                    return Err(Error::Dataset(format!(
                        "view {}: label id {bad} is not below class_count {}",
                        v.name, self.class_count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reads `cameras.json`, the referenced images and label maps, and `points.xyz` if present.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
    let mut views = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let camera = entry
            .camera
            .to_camera()
            .map_err(|e| Error::Dataset(format!("view {}: {e}", entry.file)))?;
        let image_path = root.join(&entry.file);
        if !image_path.is_file() {
            return Err(Error::Dataset(format!("view {}: missing image {}", entry.file, image_path.display())));
        }
        let image = Image::read_png(&image_path)?;
        if image.width != camera.width || image.height != camera.height {
            return Err(Error::Dataset(format!(
                "view {}: image is {}x{} but camera says {}x{}",
                entry.file, image.width, image.height, camera.width, camera.height
            )));
        }
        let labels = match &entry.label {
            Some(file) => {
                let path = root.join(file);
                if !path.is_file() {
                    return Err(Error::Dataset(format!("view {}: missing label map {}", entry.file, path.display())));
                }
                let (w, h, labels) = read_label_png(&path)?;
                if w != camera.width || h != camera.height {
                    return Err(Error::Dataset(format!(
                        "view {}: label map is {w}x{h} but camera says {}x{}",
                        entry.file, camera.width, camera.height
                    )));
                }
                Some(labels)
            }
            None => None,
        };
        views.push(View {
            name: entry.file.clone(),
            camera,
            image,
            labels,
            split: entry.split,
        });
    }
    let points_path = root.join(POINTS_FILE);
    let seed_points = if points_path.is_file() {
        read_xyz_points(&points_path)?
    } else {
        Vec::new()
    };
    let ds = Dataset {
        views,
        class_count: manifest.class_count,
        seed_points,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset in the layout [`load_dataset`] reads. Images are quantized to 8 bits.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    ds.validate()?;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&root.join("images"))?;
    if ds.views.iter().any(|v| v.labels.is_some()) {
        mkdir(&root.join("labels"))?;
    }
    let mut manifest = Manifest {
        class_count: ds.class_count,
        views: Vec::with_capacity(ds.views.len()),
    };
    for (i, v) in ds.views.iter().enumerate() {
        let file = format!("images/{i:04}.png");
        v.image.write_png(&root.join(&file))?;
        let label = match &v.labels {
            Some(labels) => {
                let file = format!("labels/{i:04}.png");
                write_label_png(&root.join(&file), v.camera.width, v.camera.height, labels)?;
                Some(file)
            }
            None => None,
        };
        manifest.views.push(ManifestView {
            file,
            label,
            split: v.split,
            camera: CameraDesc::from(&v.camera),
        });
    }
    let path = root.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if !ds.seed_points.is_empty() {
        let mut text = String::new();
        for p in &ds.seed_points {
            let _ = writeln!(text, "{} {} {}", p.x, p.y, p.z);
        }
        let path = root.join(POINTS_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Splits items by index: every `n`-th item (index ≡ 0 mod n) is a test item.
pub fn every_nth_split<T: Clone>(items: &[T], n: usize) -> Result<(Vec<T>, Vec<T>)> {
    if n < 2 {
        return Err(Error::InvalidInput(format!("split interval must be at least 2, got {n}")));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if i % n == 0 {
            test.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, test))
}

/// Radius of the camera rig: 1.1 × the largest distance from a camera center to the
/// mean center. Used to scale positional learning rates and densification thresholds.
pub fn scene_extent(cameras: &[Camera]) -> f64 {
    if cameras.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cameras.iter().map(Camera::camera_center).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let radius = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max) * 1.1;
    if radius > 0.0 {
        radius
    } else {
        1.0
    }
}

/// Least-squares point closest to all optical axes; falls back to the mean camera center.
pub fn look_at_center(cameras: &[Camera]) -> Vector3<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for cam in cameras {
        let d = cam.rotation_w2c.row(2).transpose();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * cam.camera_center();
    }
    match a.try_inverse() {
        Some(inv) if cameras.len() >= 2 => inv * b,
        _ => {
            cameras.iter().map(Camera::camera_center).sum::<Vector3<f64>>() / cameras.len().max(1) as f64
        }
    }
}

/// Uniform random seed points in a cube around the cameras' common focus, for datasets
/// without a point cloud.
pub fn random_seed_points(cameras: &[Camera], count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let center = look_at_center(cameras);
    let half = 0.5 * scene_extent(cameras);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| center + Vector3::from_fn(|_, _| rng.random_range(-half..half)))
        .collect()
}

/// One ground-truth Gaussian of a toy scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGaussian {
    pub position: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    /// Per-axis standard deviation.
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
    pub class: u32,
}

/// Description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub gaussians: Vec<ToyGaussian>,
    pub train_views: usize,
    pub test_views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub orbit_radius: f64,
    /// Camera elevation range in radians.
    pub elevation: (f64, f64),
    /// Emit label maps with this many classes; 0 disables labels.
    pub class_count: usize,
    /// Amplitude of a per-view brightness factor `1 + a·sin(azimuth)` baked into the
    /// images, which only a view-aware decoder can reproduce.
    pub view_brightness: f64,
}

impl ToySpec {
    /// Three colored, anisotropic Gaussians near the origin.
    pub fn three_gaussians() -> Self {
        let q = |angle: f64, axis: Vector3<f64>| {
            let a = axis.normalize() * (angle / 2.0).sin();
            [(angle / 2.0).cos(), a.x, a.y, a.z]
        };
        ToySpec {
            gaussians: vec![
                ToyGaussian {
                    position: Vector3::new(-0.45, 0.1, 0.0),
                    rotation: q(0.4, Vector3::new(0.0, 0.0, 1.0)),
                    scale: Vector3::new(0.35, 0.2, 0.25),
                    opacity: 0.9,
                    color: [0.85, 0.2, 0.15],
                    class: 0,
                },
                ToyGaussian {
                    position: Vector3::new(0.4, -0.2, 0.15),
                    rotation: q(-0.7, Vector3::new(1.0, 0.5, 0.0)),
                    scale: Vector3::new(0.2, 0.3, 0.22),
                    opacity: 0.85,
                    color: [0.15, 0.75, 0.3],
                    class: 1,
                },
                ToyGaussian {
                    position: Vector3::new(0.05, 0.45, -0.2),
                    rotation: q(1.0, Vector3::new(0.0, 1.0, 1.0)),
                    scale: Vector3::new(0.25, 0.18, 0.3),
                    opacity: 0.95,
                    color: [0.2, 0.3, 0.85],
                    class: 1,
                },
            ],
            train_views: 8,
            test_views: 1,
            width: 64,
            height: 64,
            focal: 70.0,
            orbit_radius: 4.0,
            elevation: (0.25, 0.6),
            class_count: 0,
            view_brightness: 0.0,
        }
    }

    /// [`ToySpec::three_gaussians`] with labels: the red Gaussian is class 0, the
    /// other two class 1.
    pub fn two_class() -> Self {
        ToySpec {
            class_count: 2,
            ..ToySpec::three_gaussians()
        }
    }

    /// The generating scene with the colors as a 3-dimensional feature.
    pub fn ground_truth(&self) -> SplatScene {
        let gaussians = self
            .gaussians
            .iter()
            .map(|t| Gaussian3D {
                position: t.position,
                rotation: t.rotation,
                log_scale: t.scale.map(f64::ln),
                opacity_logit: logit(t.opacity),
                feature: t.color.to_vec(),
            })
            .collect();
        SplatScene {
            gaussians,
            feature_dim: 3,
            class_count: self.class_count,
        }
    }
}

/// Output of [`make_toy_dataset`].
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub dataset: Dataset,
    pub ground_truth: SplatScene,
    /// Orbit azimuth of each view, radians.
    pub azimuths: Vec<f64>,
}

/// Minimum accumulated class weight for a toy pixel to be labelled.
pub const TOY_LABEL_COVERAGE: f64 = 0.5;
/// Minimum lead of the winning class over the runner-up.
pub const TOY_LABEL_MARGIN: f64 = 0.3;

/// Renders a synthetic dataset with the brute-force rasterizer. Each pixel is the
/// blended Gaussian color over a black background; test views sit halfway between
/// neighbouring training views on the orbit. Labels, when requested, are the class
/// with the largest blended weight where it is unambiguous, else [`IGNORE_LABEL`].
pub fn make_toy_dataset(spec: &ToySpec, seed: u64) -> Result<ToyDataset> {
    if spec.train_views + spec.test_views < 2 || spec.train_views == 0 {
        return Err(Error::InvalidInput("toy dataset needs at least 2 views, 1 for training".into()));
    }
    if spec.gaussians.is_empty() {
        return Err(Error::InvalidInput("toy dataset needs at least one Gaussian".into()));
    }
    if spec.class_count > 0 && spec.gaussians.iter().any(|g| g.class as usize >= spec.class_count) {
        return Err(Error::InvalidInput("toy Gaussian class out of range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0.0..2.0 * PI);
    let step = 2.0 * PI / spec.train_views as f64;
    let mut poses: Vec<(f64, f64, Split)> = Vec::new();
    for i in 0..spec.train_views {
        let jitter = rng.random_range(-0.15..0.15) * step;
        let elev = rng.random_range(spec.elevation.0..spec.elevation.1);
        poses.push((offset + i as f64 * step + jitter, elev, Split::Train));
    }
    for i in 0..spec.test_views {
        let elev = rng.random_range(spec.elevation.0..spec.elevation.1);
        let slot = i * spec.train_views / spec.test_views.max(1);
        poses.push((offset + (slot as f64 + 0.5) * step, elev, Split::Test));
    }

    let truth = spec.ground_truth();
    let class_scene = (spec.class_count > 0).then(|| {
        let mut s = truth.clone();
        s.feature_dim = spec.class_count;
        for (g, t) in s.gaussians.iter_mut().zip(&spec.gaussians) {
            g.feature = (0..spec.class_count).map(|c| (c as u32 == t.class) as u8 as f64).collect();
        }
        s
    });

    let mut views = Vec::with_capacity(poses.len());
    let mut azimuths = Vec::with_capacity(poses.len());
    for (i, &(az, elev, split)) in poses.iter().enumerate() {
        let eye = spec.orbit_radius * Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
        let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::z(), spec.focal, spec.focal, spec.width, spec.height)?;
        let render = blend_reference(&truth, &camera);
        let gain = 1.0 + spec.view_brightness * az.sin();
        let data = render.feature_map.iter().map(|&v| (v * gain).clamp(0.0, 1.0)).collect();
        let image = Image::new(spec.width, spec.height, 3, data)?;
        let labels = class_scene.as_ref().map(|s| toy_labels(s, &camera));
        views.push(View {
            name: format!("toy_{i:02}"),
            camera,
            image,
            labels,
            split,
        });
        azimuths.push(az);
    }
    let dataset = Dataset {
        views,
        class_count: spec.class_count,
        seed_points: spec.gaussians.iter().map(|g| g.position).collect(),
    };
    dataset.validate()?;
    Ok(ToyDataset {
        dataset,
        ground_truth: truth,
        azimuths,
    })
}

fn toy_labels(class_scene: &SplatScene, camera: &Camera) -> Vec<u32> {
    let c = class_scene.feature_dim;
    let render = blend_reference(class_scene, camera);
    render
        .feature_map
        .chunks_exact(c)
        .map(|w| {
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]));
            let best = w[order[0]];
            let second = if c > 1 { w[order[1]] } else { 0.0 };
            if best >= TOY_LABEL_COVERAGE && best - second >= TOY_LABEL_MARGIN {
                order[0] as u32
            } else {
                IGNORE_LABEL
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::project;

    #[test]
    fn split_examples() {
        let idx: Vec<usize> = (0..16).collect();
        let (train, test) = every_nth_split(&idx, 8).unwrap();
        assert_eq!((train.len(), test.len()), (14, 2));
        assert_eq!(test, vec![0, 8]);
        let (_, test) = every_nth_split(&idx[..5], 2).unwrap();
        assert_eq!(test, vec![0, 2, 4]);
        assert!(every_nth_split(&idx, 1).is_err());
    }

    #[test]
    fn toy_views_are_consistent() {
        let toy = make_toy_dataset(&ToySpec::three_gaussians(), 3).unwrap();
        let ds = &toy.dataset;
        assert_eq!(ds.train_views().count(), 8);
        assert_eq!(ds.test_views().count(), 1);
        for v in &ds.views {
            for g in &toy.ground_truth.gaussians {
                // Reprojection oracle: pinhole projection computed by hand.
                let pc = v.camera.rotation_w2c * g.position + v.camera.translation_w2c;
                let expect = (v.camera.fx * pc.x / pc.z + v.camera.cx, v.camera.fy * pc.y / pc.z + v.camera.cy);
                let s = project(g, &v.camera, 0.01, 0).unwrap();
                assert!((s.mean2d.x - expect.0).abs() < 0.5 && (s.mean2d.y - expect.1).abs() < 0.5);
                assert!(expect.0 > 0.0 && expect.0 < 64.0 && expect.1 > 0.0 && expect.1 < 64.0);
            }
            assert!(v.image.data.iter().any(|&x| x > 0.3));
        }
    }

    #[test]
    fn toy_is_deterministic() {
        let a = make_toy_dataset(&ToySpec::three_gaussians(), 9).unwrap();
        let b = make_toy_dataset(&ToySpec::three_gaussians(), 9).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = make_toy_dataset(&ToySpec::three_gaussians(), 10).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn toy_labels_follow_front_gaussian() {
        let spec = ToySpec {
            class_count: 2,
            ..ToySpec::three_gaussians()
        };
        let toy = make_toy_dataset(&spec, 4).unwrap();
        let mut labelled = 0;
        for v in &toy.dataset.views {
            let labels = v.labels.as_ref().unwrap();
            // Oracle: walk the splats front to back by hand.
            let mut splats: Vec<_> = toy
                .ground_truth
                .gaussians
                .iter()
                .enumerate()
                .filter_map(|(i, g)| project(g, &v.camera, 0.01, i))
                .collect();
            splats.sort_by(|a, b| a.depth.total_cmp(&b.depth));
            for py in 0..64u32 {
                for px in 0..64u32 {
                    let l = labels[(py * 64 + px) as usize];
                    let front = splats
                        .iter()
                        .find_map(|s| s.alpha_at(px as f64 + 0.5, py as f64 + 0.5).map(|a| (s.source_index, a)));
                    match front {
                        Some((i, a)) if a >= 0.8 => {
                            assert_eq!(l, spec.gaussians[i].class);
                            labelled += 1;
                        }
                        Some((i, _)) => assert!(l == IGNORE_LABEL || l < 2, "{i}"),
                        None => assert_eq!(l, IGNORE_LABEL),
                    }
                }
            }
        }
        assert!(labelled > 100, "{labelled}");
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            class_count: 2,
            train_views: 3,
            ..ToySpec::three_gaussians()
        };
        let mut ds = make_toy_dataset(&spec, 1).unwrap().dataset;
        for v in &mut ds.views {
            v.image = v.image.quantized();
        }
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.class_count, 2);
        assert_eq!(back.views.len(), 4);
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert_eq!(a.camera, b.camera);
            assert_eq!(a.image, b.image);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.split, b.split);
        }
        assert_eq!(back.seed_points, ds.seed_points);
    }

    #[test]
    fn load_errors_name_the_view() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            train_views: 2,
            ..ToySpec::three_gaussians()
        };
        let ds = make_toy_dataset(&spec, 1).unwrap().dataset;
        save_dataset(&ds, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&path).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.views[1].camera.w = 128;
        m.views[1].camera.h = 128;
        std::fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("images/0001.png") && err.contains("128x128"), "{err}");
    }

    #[test]
    fn extent_and_focus() {
        let toy = make_toy_dataset(&ToySpec::three_gaussians(), 2).unwrap();
        let cams = toy.dataset.cameras();
        assert!(look_at_center(&cams).norm() < 1e-9);
        let e = scene_extent(&cams);
        assert!(e > 0.5 && e < 4.0 * 1.1 * 2.0);
        let pts = random_seed_points(&cams, 100, 0);
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|p| p.amax() <= 0.5 * e));
    }
}
