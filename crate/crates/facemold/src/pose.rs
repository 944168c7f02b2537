//! Pose parameterization and the weak-perspective camera transform.
//!
//! Conventions, fixed here once for the whole crate:
//! - Euler order is `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
//! - Per vertex, `(px, py, pz) = diag(f, f, 1) * R * P + (tx, ty, 0)`:
//!   scale is applied before translation and the z row carries no focal
//!   scaling, so `px, py` are in pixels while `pz` stays in model units.
//! - `px, py` are offsets from the image center, x to the right and y down
//!   (image rows); `pz` grows away from the image plane, so smaller depth is
//!   closer to the camera.
//!
//! With these choices the all-zero pose (at nominal scale) puts a front
//! facing mean shape at the image center.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::model::{GeometryCoeffs, MorphableModel};

/// Rigid pose: three Euler angles in radians, a pixel translation and the
/// weak-perspective scale factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl Pose {
    /// Identity rotation, zero translation, the given scale.
    pub fn neutral(scale: f64) -> Self {
        Pose {
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            tx: 0.0,
            ty: 0.0,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidPose(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        for (name, v) in [
            ("yaw", self.yaw),
            ("pitch", self.pitch),
            ("roll", self.roll),
            ("tx", self.tx),
            ("ty", self.ty),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidPose(format!("{name} is not finite")));
            }
        }
        Ok(())
    }
}

/// Full geometry-plus-pose state: the vector the coarse stage estimates.
/// Flattened length is `d_id + d_exp + 6`.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub geometry: GeometryCoeffs,
    pub pose: Pose,
}

impl Representation {
    /// Zero coefficients and neutral pose at the given nominal scale: a
    /// centered, front facing mean shape.
    pub fn neutral(d_id: usize, d_exp: usize, scale: f64) -> Self {
        Representation {
            geometry: GeometryCoeffs::zeros(d_id, d_exp),
            pose: Pose::neutral(scale),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.geometry.id.len() + self.geometry.exp.len() + 6
    }

    /// Flattened layout: identity coefficients, expression coefficients,
    /// then yaw, pitch, roll, tx, ty, scale.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.flat_len());
        v.extend(self.geometry.id.iter());
        v.extend(self.geometry.exp.iter());
        v.extend([
            self.pose.yaw,
            self.pose.pitch,
            self.pose.roll,
            self.pose.tx,
            self.pose.ty,
            self.pose.scale,
        ]);
        v
    }

    pub fn from_flat(d_id: usize, d_exp: usize, values: &[f64]) -> Result<Self> {
        if values.len() != d_id + d_exp + 6 {
            return Err(Error::DimensionMismatch {
                what: "flat representation",
                expected: d_id + d_exp + 6,
                got: values.len(),
            });
        }
        let id = DVector::from_row_slice(&values[..d_id]);
        let exp = DVector::from_row_slice(&values[d_id..d_id + d_exp]);
        let p = &values[d_id + d_exp..];
        Ok(Representation {
            geometry: GeometryCoeffs { id, exp },
            pose: Pose {
                yaw: p[0],
                pitch: p[1],
                roll: p[2],
                tx: p[3],
                ty: p[4],
                scale: p[5],
            },
        })
    }
}

/// Mesh positioned over the image plane: `px, py` in pixels relative to the
/// image center, `pz` in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraMesh {
    /// Length 3N, interleaved.
    pub vertices: Vec<f64>,
    pub triangles: Vec<[u32; 3]>,
}

impl CameraMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len() / 3
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [
            self.vertices[3 * i],
            self.vertices[3 * i + 1],
            self.vertices[3 * i + 2],
        ]
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rotation matrix `Rz(roll) * Ry(yaw) * Rx(pitch)`.
pub fn rotation_matrix(pose: &Pose) -> Matrix3<f64> {
    rot_z(pose.roll) * rot_y(pose.yaw) * rot_x(pose.pitch)
}

/// Partial derivatives of the rotation matrix with respect to yaw, pitch and
/// roll, in that order.
fn rotation_partials(pose: &Pose) -> [Matrix3<f64>; 3] {
    let rx = rot_x(pose.pitch);
    let ry = rot_y(pose.yaw);
    let rz = rot_z(pose.roll);
    [
        rz * drot_y(pose.yaw) * rx,
        rz * ry * drot_x(pose.pitch),
        drot_z(pose.roll) * ry * rx,
    ]
}

/// Synthesizes the shape and positions it over the image plane.
pub fn camera_transform(model: &MorphableModel, rep: &Representation) -> Result<CameraMesh> {
    rep.pose.validate()?;
    let world = model.synthesize_shape(&rep.geometry)?;
    let r = rotation_matrix(&rep.pose);
    let f = rep.pose.scale;
    let (tx, ty) = (rep.pose.tx, rep.pose.ty);
    let mut vertices = vec![0.0; world.len()];
    for i in 0..model.vertex_count {
        let w = Vector3::new(world[3 * i], world[3 * i + 1], world[3 * i + 2]);
        let u = r * w;
        vertices[3 * i] = f * u.x + tx;
        vertices[3 * i + 1] = f * u.y + ty;
        vertices[3 * i + 2] = u.z;
    }
    Ok(CameraMesh {
        vertices,
        triangles: model.triangles.clone(),
    })
}

/// Gradient of some scalar with respect to every representation entry.
/// Layout mirrors [`Representation::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationGrad {
    pub id: DVector<f64>,
    pub exp: DVector<f64>,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub tx: f64,
    pub ty: f64,
    pub scale: f64,
}

impl RepresentationGrad {
    pub fn zeros(d_id: usize, d_exp: usize) -> Self {
        RepresentationGrad {
            id: DVector::zeros(d_id),
            exp: DVector::zeros(d_exp),
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
            tx: 0.0,
            ty: 0.0,
            scale: 0.0,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.id.len() + self.exp.len() + 6);
        v.extend(self.id.iter());
        v.extend(self.exp.iter());
        v.extend([self.yaw, self.pitch, self.roll, self.tx, self.ty, self.scale]);
        v
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Pulls a gradient over camera-space vertices back to the representation:
/// the exact chain rule through the camera transform, including analytic
/// rotation-angle derivatives.
pub fn camera_transform_vjp(
    model: &MorphableModel,
    rep: &Representation,
    grad_vertices: &[f64],
) -> Result<RepresentationGrad> {
    rep.pose.validate()?;
    if grad_vertices.len() != 3 * model.vertex_count {
        return Err(Error::DimensionMismatch {
            what: "vertex gradient",
            expected: 3 * model.vertex_count,
            got: grad_vertices.len(),
        });
    }
    let world = model.synthesize_shape(&rep.geometry)?;
    let r = rotation_matrix(&rep.pose);
    let partials = rotation_partials(&rep.pose);
    let f = rep.pose.scale;

    let mut grad_world = DVector::zeros(3 * model.vertex_count);
    let mut outer = Matrix3::<f64>::zeros();
    let mut g_tx = 0.0;
    let mut g_ty = 0.0;
    let mut g_scale = 0.0;
    for i in 0..model.vertex_count {
        let w = Vector3::new(world[3 * i], world[3 * i + 1], world[3 * i + 2]);
        let g = Vector3::new(
            grad_vertices[3 * i],
            grad_vertices[3 * i + 1],
            grad_vertices[3 * i + 2],
        );
        // d = diag(f, f, 1)^T * g, the gradient seen by R * w.
        let d = Vector3::new(f * g.x, f * g.y, g.z);
        let gw = r.transpose() * d;
        grad_world[3 * i] = gw.x;
        grad_world[3 * i + 1] = gw.y;
        grad_world[3 * i + 2] = gw.z;
        outer += d * w.transpose();
        g_tx += g.x;
        g_ty += g.y;
        let u = r * w;
        g_scale += g.x * u.x + g.y * u.y;
    }

    let frobenius = |a: &Matrix3<f64>| a.component_mul(&outer).sum();
    let g_yaw = frobenius(&partials[0]);
    let g_pitch = frobenius(&partials[1]);
    let g_roll = frobenius(&partials[2]);

    let g_id = id_tr_mul(&model.id_basis, &grad_world);
    let g_exp = id_tr_mul(&model.exp_basis, &grad_world);

    Ok(RepresentationGrad {
        id: g_id,
        exp: g_exp,
        yaw: g_yaw,
        pitch: g_pitch,
        roll: g_roll,
        tx: g_tx,
        ty: g_ty,
        scale: g_scale,
    })
}

fn id_tr_mul(basis: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    basis.tr_mul(v)
}
