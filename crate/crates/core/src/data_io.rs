//! Synthetic scene-pair generation, scene-file persistence (SFLW), dataset
//! manifests, and ASCII PLY export for visualization.

use std::path::{Path, PathBuf};

use crate::checksum::crc32;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, ScenePair};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Synthetic scene generator settings: clustered points under per-cluster
/// rigid motion, optional per-point deformation noise, and occlusion by
/// deleting target correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_points: usize,
    pub n_clusters: usize,
    /// Translation magnitude in meters (each cluster moves by exactly this
    /// much in a random direction).
    pub translation_scale: f64,
    /// Maximum rotation angle in radians (about the origin).
    pub rotation_scale: f64,
    /// Standard deviation of per-point flow noise in meters.
    pub noise_sigma: f64,
    /// Probability that a source point's correspondence is deleted from the
    /// target; must be in `[0, 1)`.
    pub occlusion_frac: f64,
    /// Points are drawn in `[-extent, extent]^3` around cluster centers.
    pub extent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_points: 256,
            n_clusters: 3,
            translation_scale: 0.5,
            rotation_scale: 0.2,
            noise_sigma: 0.0,
            occlusion_frac: 0.0,
            extent: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_points == 0 || self.n_clusters == 0 {
            return Err(Error::invalid_argument("n_points and n_clusters must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.occlusion_frac) {
            return Err(Error::invalid_argument("occlusion_frac must be in [0, 1)"));
        }
        if self.extent <= 0.0 {
            return Err(Error::invalid_argument("extent must be positive"));
        }
        if self.translation_scale < 0.0 || self.rotation_scale < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::invalid_argument("scales must be nonnegative"));
        }
        Ok(())
    }

    /// Key=value echo of the generator settings.
    pub fn canonical(&self) -> String {
        format!(
            "n_points={}\nn_clusters={}\ntranslation_scale={}\nrotation_scale={}\nnoise_sigma={}\nocclusion_frac={}\nextent={}\nseed={}\n",
            self.n_points,
            self.n_clusters,
            self.translation_scale,
            self.rotation_scale,
            self.noise_sigma,
            self.occlusion_frac,
            self.extent,
            self.seed
        )
    }
}

fn rodrigues(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let (ax, ay, az) = (axis[0], axis[1], axis[2]);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + ax * ax * t, ax * ay * t - az * s, ax * az * t + ay * s],
        [ay * ax * t + az * s, c + ay * ay * t, ay * az * t - ax * s],
        [az * ax * t - ay * s, az * ay * t + ax * s, c + az * az * t],
    ]
}

fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Generate one synthetic scene. Draw order (fixed for reproducibility):
/// cluster centers; per cluster the rotation axis, angle, and translation
/// direction; per point the cluster id, offsets, noise, and occlusion flag;
/// finally the target shuffle permutation.
pub fn synth_scene(cfg: &SynthConfig) -> Result<ScenePair> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let mut centers = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        centers.push([
            rng.uniform(-cfg.extent, cfg.extent),
            rng.uniform(-cfg.extent, cfg.extent),
            rng.uniform(-cfg.extent, cfg.extent),
        ]);
    }
    struct Motion {
        rot: [[f64; 3]; 3],
        t: [f64; 3],
    }
    let mut motions = Vec::with_capacity(cfg.n_clusters);
    for _ in 0..cfg.n_clusters {
        let axis = random_unit(&mut rng);
        let angle = cfg.rotation_scale * rng.uniform(-1.0, 1.0);
        let dir = random_unit(&mut rng);
        motions.push(Motion {
            rot: rodrigues(axis, angle),
            t: [
                cfg.translation_scale * dir[0],
                cfg.translation_scale * dir[1],
                cfg.translation_scale * dir[2],
            ],
        });
    }

    let n = cfg.n_points;
    let half = cfg.extent * 0.25;
    let mut source = Matrix::zeros(n, 3);
    let mut flow = Matrix::zeros(n, 3);
    let mut occlusion = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.below(cfg.n_clusters);
        let p = [
            centers[c][0] + rng.uniform(-half, half),
            centers[c][1] + rng.uniform(-half, half),
            centers[c][2] + rng.uniform(-half, half),
        ];
        let m = &motions[c];
        let mut moved = [0.0f64; 3];
        for r in 0..3 {
            moved[r] = m.rot[r][0] * p[0] + m.rot[r][1] * p[1] + m.rot[r][2] * p[2] + m.t[r];
        }
        for r in 0..3 {
            let noise = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * rng.normal()
            } else {
                0.0
            };
            source.set(i, r, p[r] as f32);
            flow.set(i, r, (moved[r] - p[r] + noise) as f32);
        }
        occlusion.push(rng.next_f64() < cfg.occlusion_frac);
    }

    // Target: moved positions of the non-occluded points, in shuffled order.
    let kept: Vec<usize> = (0..n).filter(|&i| !occlusion[i]).collect();
    if kept.is_empty() {
        return Err(Error::invalid_argument(
            "occlusion removed every target point; lower occlusion_frac or raise n_points",
        ));
    }
    let perm = rng.permutation(kept.len());
    let mut target = Matrix::zeros(kept.len(), 3);
    for (row, &pi) in perm.iter().enumerate() {
        let i = kept[pi];
        for r in 0..3 {
            target.set(row, r, source.get(i, r) + flow.get(i, r));
        }
    }

    ScenePair::new(
        PointCloud::new(source, None)?,
        PointCloud::new(target, None)?,
        flow,
        occlusion,
    )
}

const SCENE_MAGIC: &[u8; 4] = b"SFLW";
const SCENE_VERSION: u32 = 1;

/// Serialize a scene to the SFLW byte layout: magic "SFLW", version u32,
/// N1 u32, N2 u32, little-endian f32 arrays source (N1x3), target (N2x3),
/// gt_flow (N1x3), N1 occlusion bytes (0/1), trailing CRC-32.
pub fn scene_to_bytes(pair: &ScenePair) -> Vec<u8> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(SCENE_MAGIC);
    bytes.extend_from_slice(&SCENE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(pair.n_source() as u32).to_le_bytes());
    bytes.extend_from_slice(&(pair.n_target() as u32).to_le_bytes());
    for m in [pair.source.points(), pair.target.points(), &pair.gt_flow] {
        for &v in m.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &o in &pair.occlusion {
        bytes.push(o as u8);
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    bytes
}

pub fn write_scene(pair: &ScenePair, path: &Path) -> Result<()> {
    std::fs::write(path, scene_to_bytes(pair))?;
    Ok(())
}

/// Parse SFLW bytes, rejecting bad magic/version, truncation, and CRC
/// mismatches with distinct messages.
pub fn scene_from_bytes(bytes: &[u8]) -> Result<ScenePair> {
    let header = 4 + 4 + 4 + 4;
    if bytes.len() < header + 4 {
        return Err(Error::format("scene file truncated"));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32(body) != stored {
        return Err(Error::format("scene file CRC mismatch"));
    }
    if &body[0..4] != SCENE_MAGIC {
        return Err(Error::format("bad scene magic (expected SFLW)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != SCENE_VERSION {
        return Err(Error::format(format!(
            "unsupported scene version {version} (expected {SCENE_VERSION})"
        )));
    }
    let n1 = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let n2 = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let expected = header + (n1 * 3 + n2 * 3 + n1 * 3) * 4 + n1;
    if body.len() != expected {
        return Err(Error::format(format!(
            "scene payload length {} does not match header ({expected})",
            body.len()
        )));
    }
    let mut pos = header;
    let mut read_matrix = |rows: usize| -> Matrix<f32> {
        let mut data = Vec::with_capacity(rows * 3);
        for _ in 0..rows * 3 {
            data.push(f32::from_le_bytes(body[pos..pos + 4].try_into().unwrap()));
            pos += 4;
        }
        Matrix::from_vec(rows, 3, data)
    };
    let source = read_matrix(n1);
    let target = read_matrix(n2);
    let flow = read_matrix(n1);
    let occlusion: Vec<bool> = body[pos..pos + n1].iter().map(|&b| b != 0).collect();
    ScenePair::new(
        PointCloud::new(source, None)?,
        PointCloud::new(target, None)?,
        flow,
        occlusion,
    )
}

pub fn read_scene(path: &Path) -> Result<ScenePair> {
    scene_from_bytes(&std::fs::read(path)?)
}

/// ASCII PLY with three colored point sets: source red, target blue, warped
/// source (source + flow) green.
pub fn export_ply(
    source: &PointCloud,
    target: &PointCloud,
    flow: &Matrix<f32>,
    path: &Path,
) -> Result<()> {
    if flow.shape() != (source.len(), 3) {
        return Err(Error::invalid_argument(format!(
            "flow must be {} x 3, got {:?}",
            source.len(),
            flow.shape()
        )));
    }
    let n1 = source.len();
    let n2 = target.len();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str("comment source=red target=blue warped=green\n");
    out.push_str(&format!("element vertex {}\n", n1 + n2 + n1));
    for p in ["x", "y", "z"] {
        out.push_str(&format!("property float {p}\n"));
    }
    for c in ["red", "green", "blue"] {
        out.push_str(&format!("property uchar {c}\n"));
    }
    out.push_str("end_header\n");
    let mut line = |p: [f32; 3], color: [u8; 3]| {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            p[0], p[1], p[2], color[0], color[1], color[2]
        ));
    };
    for i in 0..n1 {
        line(source.point(i), [255, 0, 0]);
    }
    for i in 0..n2 {
        line(target.point(i), [0, 0, 255]);
    }
    for i in 0..n1 {
        let p = source.point(i);
        line(
            [
                p[0] + flow.get(i, 0),
                p[1] + flow.get(i, 1),
                p[2] + flow.get(i, 2),
            ],
            [0, 255, 0],
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write a dataset directory's manifest: generator config lines followed by
/// one `scene=<file>` line per scene.
pub fn write_manifest(dir: &Path, cfg: &SynthConfig, n_scenes: usize, files: &[String]) -> Result<()> {
    let mut text = format!("n_scenes={n_scenes}\n");
    text.push_str(&cfg.canonical());
    for f in files {
        text.push_str(&format!("scene={f}\n"));
    }
    std::fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(())
}

/// Scene file paths listed by a dataset manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut files = Vec::new();
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("scene=") {
            files.push(dir.join(name));
        }
    }
    if files.is_empty() {
        return Err(Error::format(format!(
            "manifest in {} lists no scenes",
            dir.display()
        )));
    }
    Ok(files)
}

/// Load every scene listed by a dataset directory's manifest.
pub fn read_dataset(dir: &Path) -> Result<Vec<ScenePair>> {
    read_manifest(dir)?
        .iter()
        .map(|p| read_scene(p))
        .collect()
}
