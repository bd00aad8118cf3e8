//! Scenes (cameras, colored points, images) and the query/reference pairs
//! the matcher consumes.

use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    bearing_from_pixel, bearing_from_point, ground_truth_candidates, one_to_one_by_residual, BearingVector,
    CameraIntrinsics, Color, GtMatchConfig, Keypoint2D, Point3D, Pose,
};
use crate::matches::MatchSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneImage {
    pub camera: usize,
    /// Camera whose view supplies the 3D bearings; defaults to `camera`.
    pub reference_camera: Option<usize>,
    pub keypoints: Vec<Keypoint2D>,
    pub gt_matches: Option<MatchSet>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub cameras: Vec<Camera>,
    pub points: Vec<Point3D>,
    pub images: Vec<SceneImage>,
}

/// One query image against the scene's point cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePair {
    pub intrinsics: CameraIntrinsics,
    pub query_pose: Pose,
    pub reference_pose: Pose,
    pub keypoints: Vec<Keypoint2D>,
    pub points: Vec<Point3D>,
    pub gt_matches: Option<MatchSet>,
}

impl Scene {
    pub fn counts(&self) -> (usize, usize, usize) {
        (
            self.cameras.len(),
            self.points.len(),
            self.images.iter().map(|i| i.keypoints.len()).sum(),
        )
    }

    pub fn pair(&self, image: usize) -> Result<ScenePair> {
        let img = self
            .images
            .get(image)
            .ok_or_else(|| Error::Input(format!("image {image} out of range ({} images)", self.images.len())))?;
        let cam = |i: usize| {
            self.cameras
                .get(i)
                .ok_or_else(|| Error::Input(format!("camera {i} out of range")))
        };
        let query = cam(img.camera)?;
        let reference = cam(img.reference_camera.unwrap_or(img.camera))?;
        Ok(ScenePair {
            intrinsics: query.intrinsics,
            query_pose: query.pose,
            reference_pose: reference.pose,
            keypoints: img.keypoints.clone(),
            points: self.points.clone(),
            gt_matches: img.gt_matches.clone(),
        })
    }

    /// Two-camera scene holding one pair: camera 0 is the query, camera 1 the reference.
    pub fn from_pair(pair: &ScenePair) -> Self {
        Self {
            cameras: vec![
                Camera {
                    intrinsics: pair.intrinsics,
                    pose: pair.query_pose,
                },
                Camera {
                    intrinsics: pair.intrinsics,
                    pose: pair.reference_pose,
                },
            ],
            points: pair.points.clone(),
            images: vec![SceneImage {
                camera: 0,
                reference_camera: Some(1),
                keypoints: pair.keypoints.clone(),
                gt_matches: pair.gt_matches.clone(),
            }],
        }
    }
}

impl ScenePair {
    pub fn pixels(&self) -> Vec<Vector2<f64>> {
        self.keypoints.iter().map(|k| k.pixel).collect()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|q| q.position).collect()
    }

    pub fn keypoint_colors(&self) -> Vec<Color> {
        self.keypoints.iter().map(|k| k.color).collect()
    }

    pub fn point_colors(&self) -> Vec<Color> {
        self.points.iter().map(|q| q.color).collect()
    }

    pub fn query_bearings(&self) -> Vec<BearingVector> {
        self.keypoints
            .iter()
            .map(|k| bearing_from_pixel(&k.pixel, &self.intrinsics))
            .collect()
    }

    /// Bearings of the 3D points seen from the reference camera.
    pub fn point_bearings(&self) -> Result<Vec<BearingVector>> {
        self.points
            .iter()
            .map(|q| bearing_from_point(&q.position, &self.reference_pose))
            .collect()
    }

    /// Stored ground truth, or one-to-one matches recomputed from the query pose.
    pub fn ground_truth(&self, cfg: &GtMatchConfig) -> Result<MatchSet> {
        if let Some(gt) = &self.gt_matches {
            return Ok(gt.clone());
        }
        cfg.validate()?;
        Ok(one_to_one_by_residual(ground_truth_candidates(
            &self.keypoints,
            &self.points,
            &self.query_pose,
            &self.intrinsics,
            cfg,
        )))
    }
}
