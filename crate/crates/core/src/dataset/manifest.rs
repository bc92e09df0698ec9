//! JSON manifest referencing per-frame binary assets.
//!
//! ```json
//! {
//!   "version": 1,
//!   "role": "train",
//!   "feature_dim": 64,
//!   "near": 0.1,
//!   "far": 200.0,
//!   "frames": [{
//!     "id": 0,
//!     "video_id": 0,
//!     "world_from_camera": [[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],
//!     "intrinsics": {"fx": 60, "fy": 60, "cx": 47.5, "cy": 47.5, "width": 96, "height": 96},
//!     "rgb": "frames/000000_rgb.png",
//!     "features": "frames/000000.feat",
//!     "dynamic_mask": "frames/000000_dynamic.png",
//!     "sky_mask": "frames/000000_sky.png"
//!   }]
//! }
//! ```
//!
//! Asset paths are relative to the manifest's directory. Masks are optional
//! (absent means all-false).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{
    featmap, CameraFrame, CameraIntrinsics, DatasetManifest, DatasetRole, FeatureMap, Pose,
    DEFAULT_FAR, DEFAULT_FEATURE_DIM, DEFAULT_NEAR,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    version: u32,
    role: DatasetRole,
    #[serde(default = "default_feature_dim")]
    feature_dim: u32,
    #[serde(default = "default_near")]
    near: f64,
    #[serde(default = "default_far")]
    far: f64,
    frames: Vec<FrameDoc>,
}

fn default_feature_dim() -> u32 {
    DEFAULT_FEATURE_DIM
}
fn default_near() -> f64 {
    DEFAULT_NEAR
}
fn default_far() -> f64 {
    DEFAULT_FAR
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameDoc {
    id: u32,
    video_id: u32,
    world_from_camera: [[f64; 4]; 4],
    intrinsics: CameraIntrinsics,
    rgb: PathBuf,
    features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dynamic_mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sky_mask: Option<PathBuf>,
}

/// Loads and fully validates a manifest and all of its assets.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if doc.version != MANIFEST_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported manifest version {}", doc.version),
        ));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let frames = doc
        .frames
        .iter()
        .map(|fd| load_frame(base, fd, doc.feature_dim))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        role: doc.role,
        feature_dim: doc.feature_dim,
        near: doc.near,
        far: doc.far,
        frames,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn load_frame(base: &Path, fd: &FrameDoc, feature_dim: u32) -> Result<CameraFrame> {
    let id = fd.id;
    let wrap = |e: Error| match e {
        Error::Frame { .. } => e,
        other => Error::frame(id, other.to_string()),
    };
    let intr = fd.intrinsics;
    intr.validate().map_err(wrap)?;
    let pose = Pose::from_matrix(&fd.world_from_camera).map_err(wrap)?;

    let resolve = |p: &Path| -> Result<PathBuf> {
        let full = base.join(p);
        if !full.is_file() {
            return Err(Error::frame(id, format!("missing file {}", full.display())));
        }
        Ok(full)
    };

    // headers first so shape errors surface before decoding payloads
    let feat_path = resolve(&fd.features)?;
    let (fh, fw, fdim) = featmap::read_header(&feat_path).map_err(wrap)?;
    if (fh, fw) != (intr.height, intr.width) {
        return Err(Error::frame(
            id,
            format!(
                "shape mismatch: feature map {fh}x{fw}, image {}x{}",
                intr.height, intr.width
            ),
        ));
    }
    if fdim != feature_dim {
        return Err(Error::frame(
            id,
            format!("feature-dim mismatch: expected {feature_dim}, found {fdim}"),
        ));
    }

    let rgb_path = resolve(&fd.rgb)?;
    let rgb_img = image::open(&rgb_path)
        .map_err(|source| Error::Image {
            path: rgb_path.clone(),
            source,
        })
        .map_err(wrap)?
        .to_rgb8();
    check_dims(id, "rgb", rgb_img.width(), rgb_img.height(), &intr)?;
    let rgb = rgb_img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();

    let features = FeatureMap::read(&feat_path).map_err(wrap)?;
    let n = intr.pixel_count();
    let dynamic_mask = match &fd.dynamic_mask {
        Some(p) => read_mask(id, "dynamic_mask", &resolve(p)?, &intr)?,
        None => vec![false; n],
    };
    let sky_mask = match &fd.sky_mask {
        Some(p) => read_mask(id, "sky_mask", &resolve(p)?, &intr)?,
        None => vec![false; n],
    };

    let frame = CameraFrame {
        id,
        video_id: fd.video_id,
        pose,
        intrinsics: intr,
        rgb,
        features,
        dynamic_mask,
        sky_mask,
    };
    frame.validate(feature_dim)?;
    Ok(frame)
}

fn check_dims(id: u32, what: &str, w: u32, h: u32, intr: &CameraIntrinsics) -> Result<()> {
    if (w, h) != (intr.width, intr.height) {
        return Err(Error::frame(
            id,
            format!(
                "shape mismatch: {what} is {h}x{w}, intrinsics say {}x{}",
                intr.height, intr.width
            ),
        ));
    }
    Ok(())
}

fn read_mask(id: u32, what: &str, path: &Path, intr: &CameraIntrinsics) -> Result<Vec<bool>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
        .map_err(|e| Error::frame(id, e.to_string()))?
        .to_luma8();
    check_dims(id, what, img.width(), img.height(), intr)?;
    Ok(img.as_raw().iter().map(|&b| b != 0).collect())
}

/// Writes `manifest` as `dir/name` plus one asset set per frame under
/// `dir/frames/`. Returns the manifest path.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path, name: &str) -> Result<PathBuf> {
    manifest.validate()?;
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let mut docs = Vec::with_capacity(manifest.frames.len());
    for f in &manifest.frames {
        let stem = format!("{:06}", f.id);
        let rel = |suffix: &str| PathBuf::from("frames").join(format!("{stem}{suffix}"));
        let doc = FrameDoc {
            id: f.id,
            video_id: f.video_id,
            world_from_camera: f.pose.to_matrix(),
            intrinsics: f.intrinsics,
            rgb: rel("_rgb.png"),
            features: rel(".feat"),
            dynamic_mask: Some(rel("_dynamic.png")),
            sky_mask: Some(rel("_sky.png")),
        };
        let (w, h) = (f.width(), f.height());
        let rgb_bytes: Vec<u8> = f.rgb.iter().map(|&v| quantize(v)).collect();
        let rgb = RgbImage::from_raw(w, h, rgb_bytes).expect("validated rgb shape");
        save_png(&rgb, &dir.join(&doc.rgb))?;
        f.features.write(&dir.join(&doc.features))?;
        save_png(&mask_image(&f.dynamic_mask, w, h), &dir.join(doc.dynamic_mask.as_ref().unwrap()))?;
        save_png(&mask_image(&f.sky_mask, w, h), &dir.join(doc.sky_mask.as_ref().unwrap()))?;
        docs.push(doc);
    }
    let doc = ManifestDoc {
        version: MANIFEST_VERSION,
        role: manifest.role,
        feature_dim: manifest.feature_dim,
        near: manifest.near,
        far: manifest.far,
        frames: docs,
    };
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn mask_image(mask: &[bool], w: u32, h: u32) -> GrayImage {
    GrayImage::from_raw(w, h, mask.iter().map(|&m| if m { 255 } else { 0 }).collect())
        .expect("validated mask shape")
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}
