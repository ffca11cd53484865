//! Uniform periodic interval (1D) and Cartesian (2D) meshes with face
//! connectivity for flux assembly.
//!
//! Element and face indices are dense integers in row-major order so that
//! assembly and CSV output are deterministic. Every face stores its two
//! incident elements with wrap-around pairing for periodicity.

use crate::error::{Result, SolverError};

/// Which side of a face an element lies on. `Lower` is the element the face
/// normal points away from (the "minus" side), `Upper` the one it points into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Lower,
    Upper,
}

/// An interior (or periodically identified boundary) face.
#[derive(Debug, Clone)]
pub struct Face {
    /// Element on the minus side; the stored normal is outward from it.
    pub left: usize,
    /// Element on the plus side.
    pub right: usize,
    /// Axis the unit normal is aligned with (0 = x, 1 = y).
    pub axis: usize,
    /// Face measure (1 in 1D, the transverse element size in 2D).
    pub measure: f64,
}

/// Uniform periodic mesh in 1 or 2 dimensions.
#[derive(Debug, Clone)]
pub struct PeriodicMesh {
    pub dimension: usize,
    pub bounds: [[f64; 2]; 2],
    pub cells: [usize; 2],
    pub h: [f64; 2],
    pub faces: Vec<Face>,
    /// Per element: (face index, side) for each incident face.
    element_faces: Vec<Vec<(usize, Side)>>,
    degenerate: bool,
}

/// Build a uniform periodic mesh. `cells_per_axis` must be >= 1 on each used
/// axis; 2 cells per axis is permitted but flagged as degenerate because the
/// two faces of an element then connect the same element pair.
pub fn build_mesh(
    dimension: usize,
    bounds: &[[f64; 2]],
    cells_per_axis: &[usize],
) -> Result<PeriodicMesh> {
    if dimension != 1 && dimension != 2 {
        return Err(SolverError::InvalidArgument(format!(
            "dimension must be 1 or 2, got {dimension}"
        )));
    }
    if bounds.len() < dimension || cells_per_axis.len() < dimension {
        return Err(SolverError::InvalidArgument(
            "bounds/cells_per_axis shorter than dimension".into(),
        ));
    }
    let mut b = [[0.0, 1.0]; 2];
    let mut n = [1usize; 2];
    let mut h = [1.0f64; 2];
    for ax in 0..dimension {
        let lo = bounds[ax][0];
        let hi = bounds[ax][1];
        if !(lo < hi) {
            return Err(SolverError::InvalidArgument(format!(
                "axis {ax}: lower bound {lo} must be below upper bound {hi}"
            )));
        }
        if cells_per_axis[ax] == 0 {
            return Err(SolverError::InvalidArgument(format!(
                "axis {ax}: cell count must be positive"
            )));
        }
        b[ax] = [lo, hi];
        n[ax] = cells_per_axis[ax];
        h[ax] = (hi - lo) / n[ax] as f64;
    }

    let num_elements = n[0] * if dimension == 2 { n[1] } else { 1 };
    let mut faces = Vec::new();
    if dimension == 1 {
        for i in 0..n[0] {
            faces.push(Face {
                left: i,
                right: (i + 1) % n[0],
                axis: 0,
                measure: 1.0,
            });
        }
    } else {
        // x-faces first, then y-faces, both row-major.
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                faces.push(Face {
                    left: iy * n[0] + ix,
                    right: iy * n[0] + (ix + 1) % n[0],
                    axis: 0,
                    measure: h[1],
                });
            }
        }
        for iy in 0..n[1] {
            for ix in 0..n[0] {
                faces.push(Face {
                    left: iy * n[0] + ix,
                    right: ((iy + 1) % n[1]) * n[0] + ix,
                    axis: 1,
                    measure: h[0],
                });
            }
        }
    }

    let mut element_faces = vec![Vec::new(); num_elements];
    for (fi, f) in faces.iter().enumerate() {
        element_faces[f.left].push((fi, Side::Lower));
        element_faces[f.right].push((fi, Side::Upper));
    }

    let degenerate = (0..dimension).any(|ax| n[ax] == 2) || n[0] == 1;
    Ok(PeriodicMesh {
        dimension,
        bounds: b,
        cells: n,
        h,
        faces,
        element_faces,
        degenerate,
    })
}

impl PeriodicMesh {
    pub fn num_elements(&self) -> usize {
        self.cells[0]
            * if self.dimension == 2 {
                self.cells[1]
            } else {
                1
            }
    }

    pub fn element_measure(&self) -> f64 {
        if self.dimension == 1 {
            self.h[0]
        } else {
            self.h[0] * self.h[1]
        }
    }

    pub fn domain_measure(&self) -> f64 {
        let mut m = self.bounds[0][1] - self.bounds[0][0];
        if self.dimension == 2 {
            m *= self.bounds[1][1] - self.bounds[1][0];
        }
        m
    }

    /// Lower-left corner of an element.
    pub fn element_origin(&self, e: usize) -> [f64; 2] {
        let (ix, iy) = if self.dimension == 1 {
            (e, 0)
        } else {
            (e % self.cells[0], e / self.cells[0])
        };
        [
            self.bounds[0][0] + ix as f64 * self.h[0],
            self.bounds[1][0] + iy as f64 * self.h[1],
        ]
    }

    /// Map a reference point in [-1,1]^d to physical coordinates in element e.
    pub fn to_physical(&self, e: usize, r: [f64; 2]) -> [f64; 2] {
        let o = self.element_origin(e);
        [
            o[0] + 0.5 * (r[0] + 1.0) * self.h[0],
            if self.dimension == 2 {
                o[1] + 0.5 * (r[1] + 1.0) * self.h[1]
            } else {
                0.0
            },
        ]
    }

    /// Faces incident to an element, with the element's side on each.
    pub fn faces_of(&self, e: usize) -> &[(usize, Side)] {
        &self.element_faces[e]
    }

    /// Face-neighbor set of an element (without the element itself).
    pub fn neighbors(&self, e: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.element_faces[e]
            .iter()
            .map(|&(fi, side)| match side {
                Side::Lower => self.faces[fi].right,
                Side::Upper => self.faces[fi].left,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// True when some axis has only 1 or 2 cells, so a face pairs an element
    /// with itself or the same neighbor twice on that axis.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}
