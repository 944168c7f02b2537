//! Linear morphable model: mean shape and texture plus identity, expression
//! and texture bases over a shared triangle mesh.
//!
//! Vertex storage is interleaved `(x0, y0, z0, x1, ...)` so the bases act on
//! a single flat vector and the rendering chain rule stays a plain
//! matrix-vector product.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Morphable model container.
///
/// Shapes live in model units, textures are unitless albedo values.
/// `normalized_mean` is the mean shape with each coordinate axis affinely
/// mapped onto [0, 1]; it is the attribute rendered by the coordinate-code
/// feedback channel.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub vertex_count: usize,
    pub triangles: Vec<[u32; 3]>,
    /// Length 3N, interleaved x, y, z.
    pub mean_shape: DVector<f64>,
    /// 3N x d_id.
    pub id_basis: DMatrix<f64>,
    /// 3N x d_exp.
    pub exp_basis: DMatrix<f64>,
    /// Length N, single-channel albedo.
    pub mean_texture: DVector<f64>,
    /// N x d_tex.
    pub tex_basis: DMatrix<f64>,
    /// Length 3N, per-axis affine normalization of `mean_shape` onto [0, 1].
    pub normalized_mean: DVector<f64>,
}

/// Geometry coefficients: identity and expression parts.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryCoeffs {
    pub id: DVector<f64>,
    pub exp: DVector<f64>,
}

impl GeometryCoeffs {
    pub fn zeros(d_id: usize, d_exp: usize) -> Self {
        GeometryCoeffs {
            id: DVector::zeros(d_id),
            exp: DVector::zeros(d_exp),
        }
    }
}

/// Texture (albedo) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureCoeffs {
    pub coeffs: DVector<f64>,
}

impl TextureCoeffs {
    pub fn zeros(d_tex: usize) -> Self {
        TextureCoeffs {
            coeffs: DVector::zeros(d_tex),
        }
    }
}

impl MorphableModel {
    /// Builds a model, validating the mesh and basis dimensions and deriving
    /// `normalized_mean` from the mean shape.
    pub fn new(
        triangles: Vec<[u32; 3]>,
        mean_shape: DVector<f64>,
        id_basis: DMatrix<f64>,
        exp_basis: DMatrix<f64>,
        mean_texture: DVector<f64>,
        tex_basis: DMatrix<f64>,
    ) -> Result<Self> {
        if mean_shape.len() % 3 != 0 || mean_shape.is_empty() {
            return Err(Error::InvalidModel(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean_shape.len()
            )));
        }
        let vertex_count = mean_shape.len() / 3;
        let normalized_mean = normalize_per_axis(&mean_shape);
        let model = MorphableModel {
            vertex_count,
            triangles,
            mean_shape,
            id_basis,
            exp_basis,
            mean_texture,
            tex_basis,
            normalized_mean,
        };
        model.validate()?;
        Ok(model)
    }

    /// Re-checks every structural invariant. Used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count;
        if self.mean_shape.len() != 3 * n {
            return Err(Error::InvalidModel("mean shape length != 3N".into()));
        }
        if self.normalized_mean.len() != 3 * n {
            return Err(Error::InvalidModel("normalized mean length != 3N".into()));
        }
        if self.mean_texture.len() != n {
            return Err(Error::InvalidModel("mean texture length != N".into()));
        }
        if self.id_basis.nrows() != 3 * n {
            return Err(Error::InvalidModel("identity basis row count != 3N".into()));
        }
        if self.exp_basis.nrows() != 3 * n {
            return Err(Error::InvalidModel(
                "expression basis row count != 3N".into(),
            ));
        }
        if self.tex_basis.nrows() != n {
            return Err(Error::InvalidModel("texture basis row count != N".into()));
        }
        for (i, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = *tri;
            if a as usize >= n || b as usize >= n || c as usize >= n {
                return Err(Error::InvalidModel(format!(
                    "triangle {i} references vertex out of range"
                )));
            }
            if a == b || b == c || a == c {
                return Err(Error::InvalidModel(format!(
                    "triangle {i} is degenerate (repeated vertex index)"
                )));
            }
        }
        Ok(())
    }

    pub fn d_id(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn d_exp(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn d_tex(&self) -> usize {
        self.tex_basis.ncols()
    }

    fn check_geometry(&self, alpha: &GeometryCoeffs) -> Result<()> {
        if alpha.id.len() != self.d_id() {
            return Err(Error::DimensionMismatch {
                what: "id_basis coefficients",
                expected: self.d_id(),
                got: alpha.id.len(),
            });
        }
        if alpha.exp.len() != self.d_exp() {
            return Err(Error::DimensionMismatch {
                what: "exp_basis coefficients",
                expected: self.d_exp(),
                got: alpha.exp.len(),
            });
        }
        Ok(())
    }

    /// Linear shape synthesis: mean plus identity and expression offsets.
    pub fn synthesize_shape(&self, alpha: &GeometryCoeffs) -> Result<DVector<f64>> {
        self.check_geometry(alpha)?;
        let mut out = self.mean_shape.clone();
        out.gemv(1.0, &self.id_basis, &alpha.id, 1.0);
        out.gemv(1.0, &self.exp_basis, &alpha.exp, 1.0);
        Ok(out)
    }

    /// Linear albedo synthesis. Values are not clamped; clamping is a
    /// render-time decision.
    pub fn synthesize_texture(&self, alpha_t: &TextureCoeffs) -> Result<DVector<f64>> {
        if alpha_t.coeffs.len() != self.d_tex() {
            return Err(Error::DimensionMismatch {
                what: "tex_basis coefficients",
                expected: self.d_tex(),
                got: alpha_t.coeffs.len(),
            });
        }
        let mut out = self.mean_texture.clone();
        out.gemv(1.0, &self.tex_basis, &alpha_t.coeffs, 1.0);
        Ok(out)
    }

    /// Geometry mean square error between two coefficient pairs: the squared
    /// Euclidean distance between the synthesized shapes. Raw sum of squares
    /// over all 3N coordinates; averaging, if wanted, is the caller's.
    pub fn gmse(&self, alpha_hat: &GeometryCoeffs, alpha: &GeometryCoeffs) -> Result<f64> {
        let a = self.synthesize_shape(alpha_hat)?;
        let b = self.synthesize_shape(alpha)?;
        Ok((a - b).norm_squared())
    }
}

/// Affinely maps every axis of an interleaved shape vector onto [0, 1]
/// (per-axis min to 0, max to 1). A degenerate flat axis maps to 0.5.
fn normalize_per_axis(shape: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(shape.len());
    for axis in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in (axis..shape.len()).step_by(3) {
            lo = lo.min(shape[i]);
            hi = hi.max(shape[i]);
        }
        let range = hi - lo;
        for i in (axis..shape.len()).step_by(3) {
            out[i] = if range > 0.0 {
                (shape[i] - lo) / range
            } else {
                0.5
            };
        }
    }
    out
}
