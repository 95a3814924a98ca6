//! File formats: binary PPM images, raw float depth maps, correspondence
//! and score CSVs, and the JSON scene/dataset layout.
//!
//! Dataset directory layout:
//!
//! ```text
//! <dir>/
//!   scene.json           gaussians, deformations, cameras, ground-truth offsets
//!   ground_truth.json    offsets plus the generator config echo
//!   cam_<j>/frame_<i>.ppm
//!   cam_<j>/mask_<i>.ppm
//! ```
//!
//! All floats in JSON files are 64-bit decimals. Quaternions serialize as
//! `[x, y, z, w]`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Correspondence;
use crate::render::Image;
use crate::scene::{Camera, DeformationModel, Gaussian3D, SceneModel};
use crate::synth::{Dataset, Mask, SynthConfig, VideoStream};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid data: {0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit)
// ---------------------------------------------------------------------------

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.rgb.len());
    for v in &img.rgb {
        out.push(quantize(*v));
    }
    out
}

pub fn mask_ppm_bytes(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    for &b in &mask.data {
        let v = if b { 255u8 } else { 0 };
        out.extend_from_slice(&[v, v, v]);
    }
    out
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<(), IoError> {
    fs::write(path, ppm_bytes(img))?;
    Ok(())
}

pub fn write_mask_ppm(mask: &Mask, path: &Path) -> Result<(), IoError> {
    fs::write(path, mask_ppm_bytes(mask))?;
    Ok(())
}

fn parse_ppm(bytes: &[u8]) -> Result<(u32, u32, &[u8]), IoError> {
    // Header: magic, width, height, maxval, separated by whitespace;
    // '#' starts a comment running to end of line.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, IoError> {
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Format("truncated ppm header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P6" {
        return Err(IoError::Format(format!("not a P6 ppm (magic {magic})")));
    }
    let width: u32 = token(bytes)?
        .parse()
        .map_err(|_| IoError::Format("bad ppm width".into()))?;
    let height: u32 = token(bytes)?
        .parse()
        .map_err(|_| IoError::Format("bad ppm height".into()))?;
    let maxval = token(bytes)?;
    if maxval != "255" {
        return Err(IoError::Format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    pos += 1;
    let need = (width * height * 3) as usize;
    if bytes.len() < pos + need {
        return Err(IoError::Format("truncated ppm pixel data".into()));
    }
    Ok((width, height, &bytes[pos..pos + need]))
}

pub fn read_ppm(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path)?;
    let (width, height, pixels) = parse_ppm(&bytes)?;
    let rgb: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let n = (width * height) as usize;
    Ok(Image {
        width,
        height,
        rgb,
        depth: vec![0.0; n],
        alpha: vec![0.0; n],
    })
}

pub fn read_mask_ppm(path: &Path) -> Result<Mask, IoError> {
    let bytes = fs::read(path)?;
    let (width, height, pixels) = parse_ppm(&bytes)?;
    let data = pixels.chunks_exact(3).map(|c| c[0] > 127).collect();
    Ok(Mask {
        width,
        height,
        data,
    })
}

// ---------------------------------------------------------------------------
// Raw float depth maps
// ---------------------------------------------------------------------------

const DEPTH_MAGIC: &[u8; 8] = b"CSDEPTH1";

/// 16-byte header (magic, width, height as little-endian u32) followed by
/// row-major little-endian f32 samples.
pub fn depth_bytes(width: u32, height: u32, depth: &[f64]) -> Vec<u8> {
    assert_eq!(depth.len(), (width * height) as usize);
    let mut out = Vec::with_capacity(16 + depth.len() * 4);
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    for &v in depth {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_depth(img: &Image, path: &Path) -> Result<(), IoError> {
    fs::write(path, depth_bytes(img.width, img.height, &img.depth))?;
    Ok(())
}

pub fn read_depth(path: &Path) -> Result<(u32, u32, Vec<f32>), IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != DEPTH_MAGIC {
        return Err(IoError::Format("bad depth map header".into()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let need = (width * height) as usize * 4;
    if bytes.len() != 16 + need {
        return Err(IoError::Format("depth map size mismatch".into()));
    }
    let data = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, data))
}

// ---------------------------------------------------------------------------
// PNG (feature-gated)
// ---------------------------------------------------------------------------

#[cfg(feature = "png")]
pub fn write_png(img: &Image, path: &Path) -> Result<(), IoError> {
    let data: Vec<u8> = img.rgb.iter().map(|&v| quantize(v)).collect();
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width, img.height, data)
            .ok_or_else(|| IoError::Invalid("image buffer size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| IoError::Format(e.to_string()))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Correspondence CSV
// ---------------------------------------------------------------------------

pub fn correspondences_to_csv(corrs: &[Correspondence]) -> String {
    let mut out = String::from("x_ref,y_ref,x_other,y_other,fg_ref,fg_other\n");
    for c in corrs {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.p_ref.x, c.p_ref.y, c.p_other.x, c.p_other.y, c.fg_ref, c.fg_other
        ));
    }
    out
}

pub fn correspondences_from_csv(text: &str) -> Result<Vec<Correspondence>, IoError> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| IoError::Format("empty correspondence csv".into()))?;
    if header.trim() != "x_ref,y_ref,x_other,y_other,fg_ref,fg_other" {
        return Err(IoError::Format(format!("bad csv header: {header}")));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(IoError::Format(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let num = |s: &str| -> Result<f64, IoError> {
            s.trim()
                .parse()
                .map_err(|_| IoError::Format(format!("line {}: bad number {s}", lineno + 2)))
        };
        let flag = |s: &str| -> Result<bool, IoError> {
            s.trim()
                .parse()
                .map_err(|_| IoError::Format(format!("line {}: bad bool {s}", lineno + 2)))
        };
        out.push(Correspondence {
            p_ref: Vector2::new(num(fields[0])?, num(fields[1])?),
            p_other: Vector2::new(num(fields[2])?, num(fields[3])?),
            fg_ref: flag(fields[4])?,
            fg_other: flag(fields[5])?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scene and ground-truth JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct GaussianJson {
    center: [f64; 3],
    /// Unit quaternion `[x, y, z, w]`.
    rotation: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct DeformationJson {
    amplitude: [f64; 3],
    angular_frequency: f64,
    phase: f64,
    #[serde(rename = "static")]
    static_flag: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraJson {
    /// Row-major 3x3 intrinsics.
    intrinsics: [[f64; 3]; 3],
    /// World-to-camera rotation quaternion `[x, y, z, w]`.
    rotation: [f64; 4],
    translation: [f64; 3],
    image_width: u32,
    image_height: u32,
    frame_rate: f64,
}

/// The on-disk scene document: primitives, deformation parameters, cameras
/// and the ground-truth per-camera offsets.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneFile {
    gaussians: Vec<GaussianJson>,
    deformations: Vec<DeformationJson>,
    cameras: Vec<CameraJson>,
    ground_truth_offsets: Vec<f64>,
    n_frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub offsets: Vec<f64>,
    pub synth_config: SynthConfig,
}

fn quat_to_array(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.i, q.j, q.k, q.w]
}

fn quat_from_array(a: &[f64; 4]) -> Result<UnitQuaternion<f64>, IoError> {
    let q = Quaternion::new(a[3], a[0], a[1], a[2]);
    if (q.norm() - 1.0).abs() > 1e-9 {
        return Err(IoError::Invalid(format!(
            "quaternion norm {} too far from 1",
            q.norm()
        )));
    }
    // Components round-trip exactly through JSON; keep the stored bits.
    Ok(UnitQuaternion::new_unchecked(q))
}

pub fn scene_file_from_parts(
    scene: &SceneModel,
    rig: &[Camera],
    gt_offsets: &[f64],
    n_frames: usize,
) -> SceneFile {
    SceneFile {
        gaussians: scene
            .gaussians
            .iter()
            .map(|g| GaussianJson {
                center: g.center.into(),
                rotation: quat_to_array(&g.rotation),
                scale: g.scale.into(),
                opacity: g.opacity,
                color: g.color.into(),
            })
            .collect(),
        deformations: scene
            .deformations
            .iter()
            .map(|d| DeformationJson {
                amplitude: d.amplitude.into(),
                angular_frequency: d.angular_frequency,
                phase: d.phase,
                static_flag: d.static_flag,
            })
            .collect(),
        cameras: rig
            .iter()
            .map(|c| CameraJson {
                intrinsics: [
                    [c.intrinsics[(0, 0)], c.intrinsics[(0, 1)], c.intrinsics[(0, 2)]],
                    [c.intrinsics[(1, 0)], c.intrinsics[(1, 1)], c.intrinsics[(1, 2)]],
                    [c.intrinsics[(2, 0)], c.intrinsics[(2, 1)], c.intrinsics[(2, 2)]],
                ],
                rotation: quat_to_array(&c.rotation),
                translation: c.translation.into(),
                image_width: c.image_width,
                image_height: c.image_height,
                frame_rate: c.frame_rate,
            })
            .collect(),
        ground_truth_offsets: gt_offsets.to_vec(),
        n_frames,
    }
}

pub struct SceneParts {
    pub scene: SceneModel,
    pub rig: Vec<Camera>,
    pub gt_offsets: Vec<f64>,
    pub n_frames: usize,
}

pub fn scene_file_to_parts(file: &SceneFile) -> Result<SceneParts, IoError> {
    if file.gaussians.len() != file.deformations.len() {
        return Err(IoError::Invalid(
            "gaussian/deformation count mismatch".into(),
        ));
    }
    let mut gaussians = Vec::with_capacity(file.gaussians.len());
    for g in &file.gaussians {
        gaussians.push(
            Gaussian3D::new(
                Vector3::from(g.center),
                quat_from_array(&g.rotation)?,
                Vector3::from(g.scale),
                g.opacity,
                Vector3::from(g.color),
            )
            .map_err(|e| IoError::Invalid(e.to_string()))?,
        );
    }
    let deformations = file
        .deformations
        .iter()
        .map(|d| DeformationModel {
            amplitude: Vector3::from(d.amplitude),
            angular_frequency: d.angular_frequency,
            phase: d.phase,
            static_flag: d.static_flag,
        })
        .collect();
    let mut rig = Vec::with_capacity(file.cameras.len());
    for c in &file.cameras {
        let cam = Camera {
            intrinsics: Matrix3::new(
                c.intrinsics[0][0],
                c.intrinsics[0][1],
                c.intrinsics[0][2],
                c.intrinsics[1][0],
                c.intrinsics[1][1],
                c.intrinsics[1][2],
                c.intrinsics[2][0],
                c.intrinsics[2][1],
                c.intrinsics[2][2],
            ),
            rotation: quat_from_array(&c.rotation)?,
            translation: Vector3::from(c.translation),
            image_width: c.image_width,
            image_height: c.image_height,
            frame_rate: c.frame_rate,
        };
        cam.validate().map_err(|e| IoError::Invalid(e.to_string()))?;
        rig.push(cam);
    }
    if file.ground_truth_offsets.len() != rig.len() {
        return Err(IoError::Invalid("offset count != camera count".into()));
    }
    Ok(SceneParts {
        scene: SceneModel::new(gaussians, deformations),
        rig,
        gt_offsets: file.ground_truth_offsets.clone(),
        n_frames: file.n_frames,
    })
}

// ---------------------------------------------------------------------------
// Dataset directory
// ---------------------------------------------------------------------------

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let scene_file = scene_file_from_parts(
        &dataset.scene,
        &dataset.rig,
        &dataset.gt_offsets,
        dataset.config.n_frames,
    );
    write_json(&dir.join("scene.json"), &scene_file)?;
    let gt = GroundTruthFile {
        offsets: dataset.gt_offsets.clone(),
        synth_config: dataset.config.clone(),
    };
    write_json(&dir.join("ground_truth.json"), &gt)?;

    for (j, video) in dataset.videos.iter().enumerate() {
        let cam_dir = dir.join(format!("cam_{j}"));
        fs::create_dir_all(&cam_dir)?;
        for (i, frame) in video.frames.iter().enumerate() {
            write_ppm(frame, &cam_dir.join(format!("frame_{i}.ppm")))?;
        }
        for (i, mask) in video.masks.iter().enumerate() {
            write_mask_ppm(mask, &cam_dir.join(format!("mask_{i}.ppm")))?;
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut file = fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)?;
    file.write_all(text.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

pub struct LoadedDataset {
    pub scene: SceneModel,
    pub rig: Vec<Camera>,
    pub gt_offsets: Vec<f64>,
    pub videos: Vec<VideoStream>,
    pub synth_config: SynthConfig,
    pub n_frames: usize,
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset, IoError> {
    let scene_file: SceneFile = read_json(&dir.join("scene.json"))?;
    let parts = scene_file_to_parts(&scene_file)?;
    let gt: GroundTruthFile = read_json(&dir.join("ground_truth.json"))?;
    if gt.offsets != parts.gt_offsets {
        return Err(IoError::Invalid(
            "scene.json and ground_truth.json offsets disagree".into(),
        ));
    }
    let mut videos = Vec::with_capacity(parts.rig.len());
    for j in 0..parts.rig.len() {
        let cam_dir = dir.join(format!("cam_{j}"));
        let mut frames = Vec::with_capacity(parts.n_frames);
        let mut masks = Vec::with_capacity(parts.n_frames);
        for i in 0..parts.n_frames {
            frames.push(read_ppm(&cam_dir.join(format!("frame_{i}.ppm")))?);
            masks.push(read_mask_ppm(&cam_dir.join(format!("mask_{i}.ppm")))?);
        }
        videos.push(VideoStream { frames, masks });
    }
    Ok(LoadedDataset {
        scene: parts.scene,
        rig: parts.rig,
        gt_offsets: parts.gt_offsets,
        videos,
        synth_config: gt.synth_config,
        n_frames: parts.n_frames,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tmpdir(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("chronosplat_io_{name}_{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn ppm_round_trip_preserves_quantized_values() {
        let mut rng = SplitMix64::new(3);
        let mut img = Image::constant(9, 7, Vector3::new(0.0, 0.0, 0.0));
        for v in img.rgb.iter_mut() {
            *v = rng.next_f64();
        }
        let dir = tmpdir("ppm");
        let path = dir.join("x.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 7);
        for (a, b) in img.rgb.iter().zip(&back.rgb) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second quantization round trip is exact.
        write_ppm(&back, &path).unwrap();
        let again = read_ppm(&path).unwrap();
        assert_eq!(back.rgb, again.rgb);
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn ppm_rejects_garbage() {
        assert!(parse_ppm(b"P5\n2 2\n255\nxxxx").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\nxy").is_err());
        assert!(parse_ppm(b"").is_err());
    }

    #[test]
    fn depth_round_trip() {
        let mut rng = SplitMix64::new(5);
        let (w, h) = (6u32, 4u32);
        let depth: Vec<f64> = (0..w * h).map(|_| rng.uniform(0.0, 10.0)).collect();
        let bytes = depth_bytes(w, h, &depth);
        assert_eq!(&bytes[0..8], b"CSDEPTH1");
        assert_eq!(bytes.len(), 16 + (w * h) as usize * 4);
        let dir = tmpdir("depth");
        let path = dir.join("d.bin");
        fs::write(&path, &bytes).unwrap();
        let (rw, rh, data) = read_depth(&path).unwrap();
        assert_eq!((rw, rh), (w, h));
        for (a, b) in depth.iter().zip(&data) {
            assert!((*a as f32 - b).abs() < 1e-6);
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn correspondence_csv_round_trip() {
        let mut rng = SplitMix64::new(9);
        let corrs: Vec<Correspondence> = (0..25)
            .map(|_| {
                Correspondence::new(
                    Vector2::new(rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0)),
                    Vector2::new(rng.uniform(0.0, 128.0), rng.uniform(0.0, 128.0)),
                    rng.next_f64() < 0.5,
                    rng.next_f64() < 0.5,
                )
            })
            .collect();
        let csv = correspondences_to_csv(&corrs);
        assert!(csv.starts_with("x_ref,y_ref,x_other,y_other,fg_ref,fg_other\n"));
        let back = correspondences_from_csv(&csv).unwrap();
        assert_eq!(corrs, back);
        assert!(correspondences_from_csv("x_ref,nope\n").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let cfg = SynthConfig {
            seed: 77,
            n_static: 20,
            n_dynamic: 30,
            n_cameras: 3,
            n_frames: 4,
            image_width: 64,
            image_height: 64,
            ..Default::default()
        };
        let dataset = generate_dataset(&cfg);
        let dir = tmpdir("dataset");
        write_dataset(&dir, &dataset).unwrap();

        let loaded = read_dataset(&dir).unwrap();
        assert_eq!(loaded.rig.len(), 3);
        assert_eq!(loaded.n_frames, 4);
        assert_eq!(loaded.gt_offsets, dataset.gt_offsets);
        assert_eq!(loaded.synth_config, cfg);
        assert_eq!(loaded.scene.len(), dataset.scene.len());
        // Scene survives exactly (f64 JSON round trip).
        assert_eq!(loaded.scene, dataset.scene);
        for (cam, orig) in loaded.rig.iter().zip(&dataset.rig) {
            assert!((cam.intrinsics - orig.intrinsics).norm() < 1e-12);
            assert!((cam.translation - orig.translation).norm() < 1e-12);
        }
        // Frames survive up to 8-bit quantization.
        for (lv, ov) in loaded.videos.iter().zip(&dataset.videos) {
            for (lf, of) in lv.frames.iter().zip(&ov.frames) {
                for (a, b) in lf.rgb.iter().zip(&of.rgb) {
                    assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
            for (lm, om) in lv.masks.iter().zip(&ov.masks) {
                assert_eq!(lm, om);
            }
        }
        let _ = fs::remove_dir_all(dir);
    }

    #[test]
    fn scene_json_is_byte_deterministic() {
        let cfg = SynthConfig {
            seed: 5,
            n_static: 10,
            n_dynamic: 10,
            n_cameras: 2,
            n_frames: 3,
            image_width: 32,
            image_height: 32,
            ..Default::default()
        };
        let d1 = generate_dataset(&cfg);
        let d2 = generate_dataset(&cfg);
        let f1 = scene_file_from_parts(&d1.scene, &d1.rig, &d1.gt_offsets, 3);
        let f2 = scene_file_from_parts(&d2.scene, &d2.rig, &d2.gt_offsets, 3);
        assert_eq!(
            serde_json::to_string(&f1).unwrap(),
            serde_json::to_string(&f2).unwrap()
        );
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_writer_produces_readable_file() {
        let img = Image::constant(16, 12, Vector3::new(0.2, 0.5, 0.9));
        let dir = tmpdir("png");
        let path = dir.join("x.png");
        write_png(&img, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (16, 12));
        assert_eq!(back.get_pixel(3, 3).0, [51, 128, 230]);
        let _ = fs::remove_dir_all(dir);
    }
}
