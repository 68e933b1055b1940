use nalgebra::{Matrix3, Vector3};

use crate::scene::CameraPose;

/// World-to-camera pinhole camera. Camera space is x right, y down, z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Builds a camera from an OpenGL-convention camera-to-world pose.
    pub fn from_pose(pose: &CameraPose, width: usize, height: usize) -> Self {
        let m = &pose.c2w;
        let r_gl = Matrix3::new(m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]);
        let flip = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        let r_c2w = r_gl * flip;
        let center = Vector3::new(m[0][3], m[1][3], m[2][3]);
        let rotation = r_c2w.transpose();
        let translation = -(rotation * center);
        Self {
            rotation,
            translation,
            fx: pose.focal,
            fy: pose.focal,
            cx: pose.principal_point.0,
            cy: pose.principal_point.1,
            width,
            height,
        }
    }

    /// Camera at `eye` looking at `target`, expressed as an OpenGL pose.
    pub fn look_at_pose(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: usize, height: usize) -> CameraPose {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let true_up = right.cross(&forward);
        // OpenGL columns: right, up, backward.
        let back = -forward;
        let mut c2w = [[0.0; 4]; 4];
        for i in 0..3 {
            c2w[i][0] = right[i];
            c2w[i][1] = true_up[i];
            c2w[i][2] = back[i];
            c2w[i][3] = eye[i];
        }
        c2w[3][3] = 1.0;
        CameraPose { c2w, focal, principal_point: (width as f64 / 2.0, height as f64 / 2.0) }
    }

    #[inline]
    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_optical_axis() {
        let pose = Camera::look_at_pose([3.0, 1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], 50.0, 64, 48);
        pose.validate().unwrap();
        let cam = Camera::from_pose(&pose, 64, 48);
        let t = cam.to_camera(&Vector3::zeros());
        assert!(t.x.abs() < 1e-12 && t.y.abs() < 1e-12);
        assert!((t.z - 14f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn world_up_projects_to_image_up() {
        let pose = Camera::look_at_pose([0.0, -4.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0], 50.0, 64, 64);
        let cam = Camera::from_pose(&pose, 64, 64);
        let t = cam.to_camera(&Vector3::new(0.0, 0.0, 1.0));
        assert!(t.y < 0.0, "camera y points down, so world up is negative y");
    }
}
