//! Greedy keyframe selection on body z-axis deviation.

use super::PostprocessError;
use crate::kinematics::{StateFrame, Vec3, FRAME_DT};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframes {
    pub waypoints: Vec<Vec3>,
    /// Unit body z-axis references.
    pub z_ref: Vec<Vec3>,
    /// Seconds from the first frame.
    pub stamps: Vec<f64>,
    /// Source frame indices.
    pub indices: Vec<usize>,
}

impl Keyframes {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn from_indices(frames: &[StateFrame], indices: &[usize]) -> Result<Keyframes, PostprocessError> {
        let mut kf = Keyframes {
            waypoints: Vec::with_capacity(indices.len()),
            z_ref: Vec::with_capacity(indices.len()),
            stamps: Vec::with_capacity(indices.len()),
            indices: indices.to_vec(),
        };
        for (n, &i) in indices.iter().enumerate() {
            if n > 0 && i <= indices[n - 1] {
                return Err(PostprocessError::InvalidInput("keyframe indices must increase".into()));
            }
            let f = frames
                .get(i)
                .ok_or_else(|| PostprocessError::InvalidInput(format!("keyframe index {i} out of range")))?;
            kf.waypoints.push(f.p);
            kf.z_ref.push(f.r.z_axis()?);
            kf.stamps.push(i as f64 * FRAME_DT);
        }
        Ok(kf)
    }

    /// Insert the frame `index` (must lie strictly between two keyframes).
    pub fn insert(&mut self, frames: &[StateFrame], index: usize) -> Result<(), PostprocessError> {
        let mut idx = self.indices.clone();
        let pos = idx.partition_point(|&i| i < index);
        if idx.get(pos) == Some(&index) {
            return Ok(());
        }
        idx.insert(pos, index);
        *self = Keyframes::from_indices(frames, &idx)?;
        Ok(())
    }
}

/// Emit a keyframe whenever the body z-axis deviates from the last emitted
/// one by more than `alpha`; the first and last frames are always included.
pub fn extract_keyframes(frames: &[StateFrame], alpha: f64) -> Result<Keyframes, PostprocessError> {
    if frames.len() < 2 {
        return Err(PostprocessError::InvalidInput("need at least two frames".into()));
    }
    if !(alpha > 0.0 && alpha < std::f64::consts::PI) {
        return Err(PostprocessError::InvalidInput(format!("alpha {alpha} outside (0, pi)")));
    }
    let z: Vec<Vec3> = frames
        .iter()
        .map(|f| f.r.z_axis())
        .collect::<Result<_, _>>()?;
    let mut indices = vec![0usize];
    let mut seed = z[0];
    for (k, zk) in z.iter().enumerate().skip(1) {
        let angle = seed.dot(zk).clamp(-1.0, 1.0).acos();
        if angle > alpha {
            indices.push(k);
            seed = *zk;
        }
    }
    if *indices.last().unwrap() != frames.len() - 1 {
        indices.push(frames.len() - 1);
    }
    Keyframes::from_indices(frames, &indices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::matrix_to_rot6d;
    use nalgebra::Rotation3;

    fn pitched(theta: f64, x: f64) -> StateFrame {
        let m = Rotation3::from_axis_angle(&Vec3::y_axis(), theta).into_inner();
        StateFrame::new(Vec3::new(x, 0.0, 0.0), matrix_to_rot6d(&m).unwrap())
    }

    #[test]
    fn straight_flight_keeps_endpoints() {
        let frames: Vec<_> = (0..30).map(|i| pitched(0.0, i as f64 * 0.2)).collect();
        let kf = extract_keyframes(&frames, 30f64.to_radians()).unwrap();
        assert_eq!(kf.indices, vec![0, 29]);
        assert!((kf.stamps[1] - 2.9).abs() < 1e-12);
    }

    #[test]
    fn uniform_loop_counts_thirteen() {
        let n = 721;
        let frames: Vec<_> = (0..n)
            .map(|i| pitched(2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64, 0.0))
            .collect();
        let kf = extract_keyframes(&frames, 30f64.to_radians()).unwrap();
        assert_eq!(kf.len(), 13);
        for w in kf.z_ref.windows(2).take(kf.len() - 2) {
            assert!(w[0].dot(&w[1]).acos() > 30f64.to_radians());
        }
    }

    #[test]
    fn near_pi_threshold_keeps_only_flips() {
        let frames: Vec<_> = (0..40).map(|i| pitched(0.15 * i as f64, 0.0)).collect();
        let kf = extract_keyframes(&frames, std::f64::consts::PI - 1e-3).unwrap();
        assert!(kf.len() <= 3);
        assert_eq!(kf.indices[0], 0);
        assert_eq!(*kf.indices.last().unwrap(), 39);
    }

    #[test]
    fn insert_keeps_order() {
        let frames: Vec<_> = (0..10).map(|i| pitched(0.0, i as f64)).collect();
        let mut kf = extract_keyframes(&frames, 0.5).unwrap();
        kf.insert(&frames, 4).unwrap();
        assert_eq!(kf.indices, vec![0, 4, 9]);
        assert_eq!(kf.waypoints[1], Vec3::new(4.0, 0.0, 0.0));
    }
}
