//! Scene JSON documents and the binary weights container.

use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{color_in_range, CameraIntrinsics, Keypoint2D, Point3D, Pose};
use crate::matches::MatchSet;
use crate::model::MatcherConfig;
use crate::nn::ParamStore;
use crate::scene::{Camera, Scene, SceneImage};

pub const SCENE_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 4] = b"DGCW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraDoc {
    intrinsics: CameraIntrinsics,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointDoc {
    xyz: [f64; 3],
    rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointDoc {
    uv: [f64; 2],
    rgb: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    camera: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference_camera: Option<usize>,
    keypoints: Vec<KeypointDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_matches: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    version: u32,
    cameras: Vec<CameraDoc>,
    points: Vec<PointDoc>,
    images: Vec<ImageDoc>,
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        path: path.into(),
        reason: reason.into(),
    }
}

fn check_finite(path: &str, values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(invalid(format!("{path}[{i}]"), "value must be finite")),
        None => Ok(()),
    }
}

fn check_color(path: &str, rgb: &[f64; 3]) -> Result<()> {
    if color_in_range(rgb) {
        return Ok(());
    }
    let i = rgb.iter().position(|v| !(0.0..=1.0).contains(v)).unwrap_or(0);
    Err(invalid(format!("{path}[{i}]"), format!("color {} outside [0, 1]", rgb[i])))
}

impl SceneDoc {
    fn into_scene(self) -> Result<Scene> {
        if self.version != SCENE_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene version {} (expected {SCENE_VERSION})",
                self.version
            )));
        }
        let mut cameras = Vec::with_capacity(self.cameras.len());
        for (i, c) in self.cameras.iter().enumerate() {
            let at = |f: &str| format!("cameras[{i}].{f}");
            c.intrinsics.validate().map_err(|e| invalid(at("intrinsics"), e.to_string()))?;
            check_finite(&at("rotation"), &c.rotation)?;
            check_finite(&at("translation"), &c.translation)?;
            let pose = Pose::new(Matrix3::from_row_slice(&c.rotation), Vector3::from(c.translation))
                .map_err(|e| invalid(at("rotation"), e.to_string()))?;
            cameras.push(Camera {
                intrinsics: c.intrinsics,
                pose,
            });
        }
        let mut points = Vec::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            check_finite(&format!("points[{i}].xyz"), &p.xyz)?;
            check_color(&format!("points[{i}].rgb"), &p.rgb)?;
            points.push(Point3D {
                position: Vector3::from(p.xyz),
                color: p.rgb,
            });
        }
        let mut images = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.into_iter().enumerate() {
            let at = |f: &str| format!("images[{i}].{f}");
            if img.camera >= cameras.len() {
                return Err(invalid(at("camera"), format!("camera {} does not exist", img.camera)));
            }
            if let Some(r) = img.reference_camera {
                if r >= cameras.len() {
                    return Err(invalid(at("reference_camera"), format!("camera {r} does not exist")));
                }
            }
            let mut keypoints = Vec::with_capacity(img.keypoints.len());
            for (j, k) in img.keypoints.iter().enumerate() {
                check_finite(&at(&format!("keypoints[{j}].uv")), &k.uv)?;
                check_color(&at(&format!("keypoints[{j}].rgb")), &k.rgb)?;
                keypoints.push(Keypoint2D {
                    pixel: Vector2::from(k.uv),
                    color: k.rgb,
                });
            }
            let gt_matches = match img.gt_matches {
                None => None,
                Some(list) => {
                    for (j, &[q, p]) in list.iter().enumerate() {
                        if q >= keypoints.len() {
                            return Err(invalid(at(&format!("gt_matches[{j}][0]")), format!("keypoint {q} does not exist")));
                        }
                        if p >= points.len() {
                            return Err(invalid(at(&format!("gt_matches[{j}][1]")), format!("point {p} does not exist")));
                        }
                    }
                    let set = MatchSet::from_pairs(list.iter().map(|&[q, p]| (q, p)));
                    if !set.is_one_to_one() {
                        return Err(invalid(at("gt_matches"), "ground-truth matches must be one-to-one"));
                    }
                    Some(set)
                }
            };
            images.push(SceneImage {
                camera: img.camera,
                reference_camera: img.reference_camera,
                keypoints,
                gt_matches,
            });
        }
        Ok(Scene {
            cameras,
            points,
            images,
        })
    }

    fn from_scene(scene: &Scene) -> Self {
        Self {
            version: SCENE_VERSION,
            cameras: scene
                .cameras
                .iter()
                .map(|c| {
                    let r = c.pose.rotation.transpose();
                    CameraDoc {
                        intrinsics: c.intrinsics,
                        // column-major storage of Rᵀ is row-major R
                        rotation: std::array::from_fn(|i| r.as_slice()[i]),
                        translation: c.pose.translation.into(),
                    }
                })
                .collect(),
            points: scene
                .points
                .iter()
                .map(|p| PointDoc {
                    xyz: p.position.into(),
                    rgb: p.color,
                })
                .collect(),
            images: scene
                .images
                .iter()
                .map(|img| ImageDoc {
                    camera: img.camera,
                    reference_camera: img.reference_camera,
                    keypoints: img
                        .keypoints
                        .iter()
                        .map(|k| KeypointDoc {
                            uv: k.pixel.into(),
                            rgb: k.color,
                        })
                        .collect(),
                    gt_matches: img
                        .gt_matches
                        .as_ref()
                        .map(|m| m.iter().map(|x| [x.query, x.point]).collect()),
                })
                .collect(),
        }
    }
}

/// Parses and validates a scene document.
pub fn parse_scene(text: &str) -> Result<Scene> {
    let doc: SceneDoc = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    doc.into_scene()
}

pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&SceneDoc::from_scene(scene)).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    parse_scene(&fs::read_to_string(path)?)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_atomic(path, scene_to_json(scene)?.as_bytes())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Model settings stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub width: u64,
    pub clusters: u64,
    pub graph_k: u64,
    pub k_local: u64,
    pub coarse_groups: u64,
    pub sigma_a_deg: f64,
    pub reg: f64,
    pub theta: f64,
}

impl From<&MatcherConfig> for ConfigEcho {
    fn from(c: &MatcherConfig) -> Self {
        Self {
            width: c.width as u64,
            clusters: c.clusters as u64,
            graph_k: c.graph_k as u64,
            k_local: c.k_local as u64,
            coarse_groups: c.coarse_groups as u64,
            sigma_a_deg: c.sigma_a_deg,
            reg: c.reg,
            theta: c.theta,
        }
    }
}

impl ConfigEcho {
    /// Human-readable `field: stored vs runtime` lines for every difference.
    pub fn differences(&self, runtime: &ConfigEcho) -> Vec<String> {
        let mut out = Vec::new();
        let ints = [
            ("d", self.width, runtime.width),
            ("X", self.clusters, runtime.clusters),
            ("k", self.graph_k, runtime.graph_k),
            ("k_local", self.k_local, runtime.k_local),
            ("I", self.coarse_groups, runtime.coarse_groups),
        ];
        for (name, a, b) in ints {
            if a != b {
                out.push(format!("{name}: weights {a} vs runtime {b}"));
            }
        }
        let floats = [
            ("sigma_a", self.sigma_a_deg, runtime.sigma_a_deg),
            ("reg", self.reg, runtime.reg),
            ("theta", self.theta, runtime.theta),
        ];
        for (name, a, b) in floats {
            if a.to_bits() != b.to_bits() {
                out.push(format!("{name}: weights {a} vs runtime {b}"));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightsFile {
    pub echo: ConfigEcho,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl WeightsFile {
    pub fn from_store(store: &ParamStore, cfg: &MatcherConfig) -> Self {
        Self {
            echo: ConfigEcho::from(cfg),
            names: store.names().to_vec(),
            tensors: store.tensors().to_vec(),
        }
    }

    /// Loads the tensors into `store`, warning about any config differences.
    pub fn apply(&self, store: &mut ParamStore, runtime: &MatcherConfig) -> Result<Vec<String>> {
        let diffs = self.echo.differences(&ConfigEcho::from(runtime));
        for d in &diffs {
            warn!("weights config differs from runtime config: {d}");
        }
        store.assign(&self.names, self.tensors.clone())?;
        Ok(diffs)
    }
}

pub fn encode_weights(w: &WeightsFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    let e = &w.echo;
    for v in [e.width, e.clusters, e.graph_k, e.k_local, e.coarse_groups] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in [e.sigma_a_deg, e.reg, e.theta] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(w.tensors.len() as u64).to_le_bytes());
    for (name, t) in w.names.iter().zip(&w.tensors) {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("weights file truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length field, bounded by the bytes that remain.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.buf.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(Error::Format(format!("length {n} at byte {} exceeds the file", self.pos - 8)));
        }
        Ok(n as usize)
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightsFile> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).ok() != Some(WEIGHTS_MAGIC.as_slice()) {
        return Err(Error::Format("not a weights file (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!(
            "unsupported weights version {version} (expected {WEIGHTS_VERSION})"
        )));
    }
    let echo = ConfigEcho {
        width: r.u64()?,
        clusters: r.u64()?,
        graph_k: r.u64()?,
        k_local: r.u64()?,
        coarse_groups: r.u64()?,
        sigma_a_deg: r.f64()?,
        reg: r.f64()?,
        theta: r.f64()?,
    };
    let count = r.len(1)?;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len(1)?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = r.len(8)?;
        let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &s| a.checked_mul(s));
        let numel = numel.ok_or_else(|| Error::Format(format!("tensor `{name}` shape overflows")))?;
        if numel.saturating_mul(8) > bytes.len() - r.pos {
            return Err(Error::Format(format!("weights file truncated inside tensor `{name}`")));
        }
        let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        names.push(name);
        tensors.push(t);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last tensor", bytes.len() - r.pos)));
    }
    Ok(WeightsFile { echo, names, tensors })
}

pub fn save_weights(w: &WeightsFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode_weights(w))
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Scene;
    use crate::training::{synth_scene_pair, SynthConfig};

    const MINIMAL: &str = r#"{
  "version": 1,
  "cameras": [{"intrinsics": {"fx": 500, "fy": 500, "cx": 320, "cy": 240},
               "rotation": [1,0,0, 0,1,0, 0,0,1], "translation": [0,0,0]}],
  "points": [{"xyz": [0,0,5], "rgb": [1,0,0]},
             {"xyz": [1,0,5], "rgb": [0,1,0]},
             {"xyz": [0,1,5], "rgb": [0,0,1]}],
  "images": [{"camera": 0, "keypoints": [
      {"uv": [320,240], "rgb": [1,0,0]},
      {"uv": [420,240], "rgb": [0,1,0]},
      {"uv": [320,340], "rgb": [0,0,1]}],
    "gt_matches": [[0,0],[1,1],[2,2]]}]
}"#;

    #[test]
    fn minimal_document_loads() {
        let s = parse_scene(MINIMAL).unwrap();
        assert_eq!(s.counts(), (1, 3, 3));
        let pair = s.pair(0).unwrap();
        assert_eq!(pair.reference_pose, pair.query_pose);
    }

    #[test]
    fn bad_color_names_the_field() {
        let text = MINIMAL.replace(r#""xyz": [1,0,5], "rgb": [0,1,0]"#, r#""xyz": [1,0,5], "rgb": [0,1.5,0]"#);
        match parse_scene(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "points[1].rgb[1]"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("[2,2]]", "[2,7]]");
        match parse_scene(&text) {
            Err(Error::Validation { path, .. }) => assert_eq!(path, "images[0].gt_matches[2][1]"),
            other => panic!("{other:?}"),
        }
        let text = MINIMAL.replace("\"camera\": 0", "\"camera\": 3");
        assert!(matches!(parse_scene(&text), Err(Error::Validation { .. })));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let text = MINIMAL.replace("\"version\": 1,", "\"version\": 1,,");
        match parse_scene(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_scene(&MINIMAL.replace("\"uv\": [320,240]", "\"uv\": [320]")), Err(Error::Parse { .. })));
    }

    #[test]
    fn synthesized_scene_round_trips() {
        let pair = synth_scene_pair(&SynthConfig {
            outlier_ratio: 0.25,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let scene = Scene::from_pair(&pair);
        let text = scene_to_json(&scene).unwrap();
        let back = parse_scene(&text).unwrap();
        assert_eq!(back, scene);
        assert_eq!(back.pair(0).unwrap(), pair);
        assert_eq!(scene_to_json(&back).unwrap(), text);
    }

    fn sample_weights() -> WeightsFile {
        let cfg = MatcherConfig {
            width: 4,
            encoder_blocks: 1,
            ..MatcherConfig::default()
        };
        let m = crate::model::Matcher::new(cfg).unwrap();
        WeightsFile::from_store(&m.store, &cfg)
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let mut w = sample_weights();
        w.tensors[0].data_mut()[0] = -0.0;
        w.tensors[0].data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let bytes = encode_weights(&w);
        let back = decode_weights(&bytes).unwrap();
        assert_eq!(back.names, w.names);
        for (a, b) in back.tensors.iter().zip(&w.tensors) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode_weights(&back), bytes);
    }

    #[test]
    fn corrupt_weights_are_format_errors() {
        let bytes = encode_weights(&sample_weights());
        for cut in [0, 3, 4, 10, 60, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_weights(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_weights(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_weights(&long), Err(Error::Format(_))));
    }

    #[test]
    fn config_echo_differences() {
        let w = sample_weights();
        let runtime = MatcherConfig {
            width: 4,
            encoder_blocks: 1,
            theta: 0.7,
            clusters: 6,
            ..MatcherConfig::default()
        };
        let d = w.echo.differences(&ConfigEcho::from(&runtime));
        assert_eq!(d, vec!["X: weights 10 vs runtime 6".to_string(), "theta: weights 0.5 vs runtime 0.7".to_string()]);
        let mut m = crate::model::Matcher::new(runtime).unwrap();
        assert_eq!(w.apply(&mut m.store, &runtime).unwrap().len(), 2);
        let other = crate::model::Matcher::new(MatcherConfig { width: 6, ..runtime }).unwrap();
        let w2 = WeightsFile::from_store(&other.store, &other.config);
        assert!(matches!(w2.apply(&mut m.store, &runtime), Err(Error::Format(_))));
    }
}
