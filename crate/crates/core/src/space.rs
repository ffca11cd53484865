//! Discrete DG spaces: element operators (mass is the identity for the
//! orthonormal modal basis, stiffness blocks), face coupling blocks for the
//! numerical-flux family, initial-data projections, and quadrature-defined
//! error norms.
//!
//! The numerical traces are
//!   v* = theta v+ + (1-theta) v- - zeta [grad u],
//!   (grad u)* = (1-theta) grad u+ + theta grad u- - gamma [v],
//! with jumps [w] = w- n- + w+ n+ (scalar w -> vector jump) and
//! [w] = w-.n- + w+.n+ (vector w -> scalar jump). The minus side of a face is
//! the element its stored normal points away from.
//!
//! All blocks are element-local or face-local dense matrices; a global sparse
//! matrix is never materialized. Because the mesh is uniform, one block of
//! each kind serves every element/face of an axis.

use crate::error::{Result, SolverError};
use crate::mesh::{PeriodicMesh, Side};
use crate::quadrature::{eval_modes, gauss_rule};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Mesh-independent flux constants (theta, gamma, zeta) with gamma, zeta >= 0.
#[derive(Debug, Clone, Copy)]
pub struct FluxParams {
    pub theta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl FluxParams {
    pub fn new(theta: f64, gamma: f64, zeta: f64) -> Result<Self> {
        if gamma < 0.0 || zeta < 0.0 {
            return Err(SolverError::InvalidArgument(format!(
                "flux dissipation constants must be nonnegative: gamma={gamma}, zeta={zeta}"
            )));
        }
        Ok(Self { theta, gamma, zeta })
    }

    /// All parameters zero: the alternating one-sided trace pair
    /// v* = v-, (grad u)* = grad u+ with no dissipation.
    pub fn zero() -> Self {
        Self {
            theta: 0.0,
            gamma: 0.0,
            zeta: 0.0,
        }
    }

    /// Whether theta (1 - theta) = gamma zeta, the pairing under which the
    /// optimal-rate projection argument applies on Cartesian meshes.
    pub fn optimal_pairing(&self) -> bool {
        (self.theta * (1.0 - self.theta) - self.gamma * self.zeta).abs() <= 1e-12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldRole {
    Displacement,
    Velocity,
}

/// Modal coefficients of a discrete field, element-major dense layout.
#[derive(Debug, Clone)]
pub struct FieldVector {
    pub role: FieldRole,
    pub data: Vec<f64>,
}

impl FieldVector {
    pub fn zeros(role: FieldRole, len: usize) -> Self {
        Self {
            role,
            data: vec![0.0; len],
        }
    }
}

/// Per-degree volume tables at one quadrature rule: physical basis values,
/// physical gradients and physical weights (shared by all elements of the
/// uniform mesh).
struct VolTable {
    ref_pts: Vec<[f64; 2]>,
    weights: Vec<f64>,
    /// values[pt][mode]
    values: Vec<Vec<f64>>,
    /// grads[pt][mode]
    grads: Vec<Vec<[f64; 2]>>,
}

/// Trace tables of one basis on one side of faces of one axis, at the face
/// quadrature nodes.
struct TraceTable {
    /// values[mode][node]
    values: Vec<Vec<f64>>,
    /// normal-direction derivative, unsigned (plain d/dn_axis)
    normal_derivs: Vec<Vec<f64>>,
}

/// Face coupling blocks of one axis: for each (test side, trial side) the
/// dense matrices of the four flux bilinear families.
struct FaceBlocks {
    /// eq1, v-trial: contribution of (v* - v) tested by grad(phi).n
    e1v: [[DMatrix<f64>; 2]; 2],
    /// eq1, u-trial: the -zeta [grad u] part of v*
    e1u: [[DMatrix<f64>; 2]; 2],
    /// eq2, u-trial: psi (grad u)*.n
    e2u: [[DMatrix<f64>; 2]; 2],
    /// eq2, v-trial: the -gamma [v] part of (grad u)*
    e2v: [[DMatrix<f64>; 2]; 2],
    /// physical face quadrature weights
    weights: Vec<f64>,
}

/// Assembled discrete space: mesh + degree pair + flux constants + all
/// element/face blocks and quadrature tables. Immutable after construction.
pub struct DgSpace {
    pub mesh: PeriodicMesh,
    pub q_u: usize,
    pub q_v: usize,
    pub flux: FluxParams,
    dim_u: usize,
    dim_v: usize,
    stiff_u: DMatrix<f64>,
    stiff_uv: DMatrix<f64>,
    stiff_vu: DMatrix<f64>,
    face_blocks: Vec<FaceBlocks>,
    vol_data_u: VolTable,
    vol_data_v: VolTable,
    vol_err_u: VolTable,
    vol_err_v: VolTable,
    /// trace tables per axis: [axis][side][role] with role 0 = u, 1 = v
    traces: Vec<[[TraceTable; 2]; 2]>,
    /// sqrt of the element measure; converts the constant-mode coefficient
    /// into the element integral.
    sqrt_measure: f64,
}

fn ref_stiffness(qa: usize, qb: usize) -> DMatrix<f64> {
    // int_{-1}^{1} phi_a' phi_b' dr, exact rule.
    let n = qa.max(qb) + 2;
    let rule = gauss_rule(n).unwrap();
    let mut out = DMatrix::zeros(qa + 1, qb + 1);
    for (p, &r) in rule.nodes.iter().enumerate() {
        let ma = eval_modes(qa, r);
        let mb = eval_modes(qb, r);
        let w = rule.weights[p];
        for i in 0..=qa {
            for j in 0..=qb {
                out[(i, j)] += w * ma[i].1 * mb[j].1;
            }
        }
    }
    out
}

/// (jn, jt): mode components along the face-normal axis and the tangent axis.
fn split_mode(mode: usize, q: usize, dim2: bool, axis: usize) -> (usize, usize) {
    if !dim2 {
        return (mode, 0);
    }
    let w = q + 1;
    let (jx, jy) = (mode % w, mode / w);
    if axis == 0 {
        (jx, jy)
    } else {
        (jy, jx)
    }
}

impl DgSpace {
    pub fn dofs_u(&self) -> usize {
        self.mesh.num_elements() * self.dim_u
    }

    pub fn dofs_v(&self) -> usize {
        self.mesh.num_elements() * self.dim_v
    }

    pub fn dim_u(&self) -> usize {
        self.dim_u
    }

    pub fn dim_v(&self) -> usize {
        self.dim_v
    }

    pub fn sqrt_measure(&self) -> f64 {
        self.sqrt_measure
    }
}

/// Assemble the discrete space. The degree pair must satisfy
/// q_u >= 1 and q_u - 2 <= q_v <= q_u (the admissible set).
pub fn assemble_space(
    mesh: PeriodicMesh,
    q_u: usize,
    q_v: usize,
    flux: FluxParams,
) -> Result<DgSpace> {
    if q_u < 1 || q_v + 2 < q_u || q_v > q_u {
        return Err(SolverError::InvalidArgument(format!(
            "degree pair (q_u, q_v) = ({q_u}, {q_v}) is not admissible: require q_u >= 1 and q_u - 2 <= q_v <= q_u"
        )));
    }
    let dim2 = mesh.dimension == 2;
    let per_dir = |q: usize| q + 1;
    let dim_u = if dim2 {
        per_dir(q_u) * per_dir(q_u)
    } else {
        per_dir(q_u)
    };
    let dim_v = if dim2 {
        per_dir(q_v) * per_dir(q_v)
    } else {
        per_dir(q_v)
    };

    let khat = ref_stiffness(q_u.max(q_v), q_u.max(q_v));
    let h = mesh.h;
    let norm_all: f64 = (0..mesh.dimension).map(|ax| (2.0 / h[ax]).sqrt()).product();

    // Volume stiffness blocks from the tensor structure.
    let tensor_stiff = |qt: usize, qr: usize, dt: usize, dr: usize| -> DMatrix<f64> {
        let mut out = DMatrix::zeros(dt, dr);
        if !dim2 {
            for i in 0..dt {
                for j in 0..dr {
                    out[(i, j)] = 4.0 / (h[0] * h[0]) * khat[(i, j)];
                }
            }
            return out;
        }
        let (wt, wr) = (qt + 1, qr + 1);
        for jy in 0..wt {
            for jx in 0..wt {
                for ky in 0..wr {
                    for kx in 0..wr {
                        let mut val = 0.0;
                        if jy == ky {
                            val += 4.0 / (h[0] * h[0]) * khat[(jx, kx)];
                        }
                        if jx == kx {
                            val += 4.0 / (h[1] * h[1]) * khat[(jy, ky)];
                        }
                        out[(jy * wt + jx, ky * wr + kx)] = val;
                    }
                }
            }
        }
        out
    };
    let stiff_u = tensor_stiff(q_u, q_u, dim_u, dim_u);
    let stiff_uv = tensor_stiff(q_u, q_v, dim_u, dim_v);
    let stiff_vu = stiff_uv.transpose();

    // Volume tables.
    let make_vol = |q: usize, npts: usize, dim_b: usize| -> VolTable {
        let rule = gauss_rule(npts).unwrap();
        let mut ref_pts = Vec::new();
        let mut weights = Vec::new();
        let mut values = Vec::new();
        let mut grads = Vec::new();
        let jac = if dim2 { 0.25 * h[0] * h[1] } else { 0.5 * h[0] };
        let pts_1d: Vec<(f64, Vec<(f64, f64)>)> =
            rule.nodes.iter().map(|&r| (r, eval_modes(q, r))).collect();
        if dim2 {
            for (jq, (ry, my)) in pts_1d.iter().enumerate() {
                for (iq, (rx, mx)) in pts_1d.iter().enumerate() {
                    ref_pts.push([*rx, *ry]);
                    weights.push(rule.weights[iq] * rule.weights[jq] * jac);
                    let mut vals = vec![0.0; dim_b];
                    let mut grs = vec![[0.0, 0.0]; dim_b];
                    for jy in 0..=q {
                        for jx in 0..=q {
                            let m = jy * (q + 1) + jx;
                            vals[m] = norm_all * mx[jx].0 * my[jy].0;
                            grs[m] = [
                                norm_all * (2.0 / h[0]) * mx[jx].1 * my[jy].0,
                                norm_all * (2.0 / h[1]) * mx[jx].0 * my[jy].1,
                            ];
                        }
                    }
                    values.push(vals);
                    grads.push(grs);
                }
            }
        } else {
            for (iq, (rx, mx)) in pts_1d.iter().enumerate() {
                ref_pts.push([*rx, 0.0]);
                weights.push(rule.weights[iq] * jac);
                let vals: Vec<f64> = (0..dim_b).map(|m| norm_all * mx[m].0).collect();
                let grs: Vec<[f64; 2]> = (0..dim_b)
                    .map(|m| [norm_all * (2.0 / h[0]) * mx[m].1, 0.0])
                    .collect();
                values.push(vals);
                grads.push(grs);
            }
        }
        VolTable {
            ref_pts,
            weights,
            values,
            grads,
        }
    };
    let n_data = q_u.max(q_v) + 6;
    let vol_data_u = make_vol(q_u, n_data, dim_u);
    let vol_data_v = make_vol(q_v, n_data, dim_v);
    // The reported error norm samples q_u + 1 Gauss points per direction for
    // both fields (the tables are labeled by the displacement degree q).
    let vol_err_u = make_vol(q_u, q_u + 1, dim_u);
    let vol_err_v = make_vol(q_v, q_u + 1, dim_v);

    // Face quadrature (tangential direction in 2D, single point in 1D).
    let n_face = q_u.max(q_v) + 2;
    let face_rule_nodes: Vec<f64>;
    let face_rule_weights: Vec<f64>;
    if dim2 {
        let r = gauss_rule(n_face).unwrap();
        face_rule_nodes = r.nodes;
        face_rule_weights = r.weights;
    } else {
        face_rule_nodes = vec![0.0];
        face_rule_weights = vec![1.0];
    }

    let make_trace = |q: usize, dim_b: usize, axis: usize, side: Side| -> TraceTable {
        // side Lower = element below the face (trace at +1 of the normal
        // axis), Upper = element above (trace at -1).
        let rn = match side {
            Side::Lower => 1.0,
            Side::Upper => -1.0,
        };
        let mn = eval_modes(q, rn);
        let mut values = vec![vec![0.0; face_rule_nodes.len()]; dim_b];
        let mut normal_derivs = vec![vec![0.0; face_rule_nodes.len()]; dim_b];
        for (node, &rt) in face_rule_nodes.iter().enumerate() {
            let mt = eval_modes(q, rt);
            for mode in 0..dim_b {
                let (jn, jt) = split_mode(mode, q, dim2, axis);
                let tang = if dim2 { mt[jt].0 } else { 1.0 };
                values[mode][node] = norm_all * mn[jn].0 * tang;
                normal_derivs[mode][node] = norm_all * (2.0 / h[axis]) * mn[jn].1 * tang;
            }
        }
        TraceTable {
            values,
            normal_derivs,
        }
    };

    let mut traces = Vec::new();
    let mut face_blocks = Vec::new();
    for axis in 0..mesh.dimension {
        let tr = [
            [
                make_trace(q_u, dim_u, axis, Side::Lower),
                make_trace(q_v, dim_v, axis, Side::Lower),
            ],
            [
                make_trace(q_u, dim_u, axis, Side::Upper),
                make_trace(q_v, dim_v, axis, Side::Upper),
            ],
        ];
        // Physical face weights: (h_t/2) w_q in 2D, 1 in 1D.
        let wphys: Vec<f64> = if dim2 {
            let ht = h[1 - axis];
            face_rule_weights.iter().map(|w| 0.5 * ht * w).collect()
        } else {
            vec![1.0]
        };

        let side_sign = [1.0f64, -1.0]; // outward normal component, L then R
        let outer = |test: &[Vec<f64>], trial: &[Vec<f64>], coef: f64| -> DMatrix<f64> {
            let mut m = DMatrix::zeros(test.len(), trial.len());
            for (q, &w) in wphys.iter().enumerate() {
                for i in 0..test.len() {
                    let ti = coef * w * test[i][q];
                    if ti == 0.0 {
                        continue;
                    }
                    for j in 0..trial.len() {
                        m[(i, j)] += ti * trial[j][q];
                    }
                }
            }
            m
        };

        let th = flux.theta;
        // (v* - v|a) v-coefficients: a = L: theta (v_R - v_L); a = R: (1-theta)(v_L - v_R).
        let cv = |a: usize, b: usize| -> f64 {
            match (a, b) {
                (0, 1) => th,
                (0, 0) => -th,
                (1, 0) => 1.0 - th,
                _ => -(1.0 - th),
            }
        };
        // -zeta [grad u] with [grad u] = du_L - du_R.
        let cz = |b: usize| if b == 0 { -flux.zeta } else { flux.zeta };
        // (grad u)* u-coefficients: theta on the L trace, (1-theta) on R.
        let cu = |b: usize| if b == 0 { th } else { 1.0 - th };
        // -gamma [v] with [v] = (v_L - v_R) n.
        let cg = |b: usize| if b == 0 { -flux.gamma } else { flux.gamma };

        let mk = |fam: usize| -> [[DMatrix<f64>; 2]; 2] {
            let build = |a: usize, b: usize| -> DMatrix<f64> {
                let sa = side_sign[a];
                match fam {
                    0 => outer(&tr[a][0].normal_derivs, &tr[b][1].values, sa * cv(a, b)),
                    1 => outer(&tr[a][0].normal_derivs, &tr[b][0].normal_derivs, sa * cz(b)),
                    2 => outer(&tr[a][1].values, &tr[b][0].normal_derivs, sa * cu(b)),
                    _ => outer(&tr[a][1].values, &tr[b][1].values, sa * cg(b)),
                }
            };
            [[build(0, 0), build(0, 1)], [build(1, 0), build(1, 1)]]
        };
        face_blocks.push(FaceBlocks {
            e1v: mk(0),
            e1u: mk(1),
            e2u: mk(2),
            e2v: mk(3),
            weights: wphys,
        });
        traces.push(tr);
    }

    let sqrt_measure = mesh.element_measure().sqrt();
    Ok(DgSpace {
        mesh,
        q_u,
        q_v,
        flux,
        dim_u,
        dim_v,
        stiff_u,
        stiff_uv,
        stiff_vu,
        face_blocks,
        vol_data_u,
        vol_data_v,
        vol_err_u,
        vol_err_v,
        traces,
        sqrt_measure,
    })
}

/// Scalar multipliers selecting a linear combination of the operator blocks;
/// used by [`DgSpace::apply_operator`].
#[derive(Debug, Clone, Copy, Default)]
pub struct OperatorCombo {
    pub stiffness_u: f64,
    pub eq1_spatial: f64,
    pub mass_v: f64,
    pub eq2_spatial: f64,
}

impl DgSpace {
    fn check_role(&self, f: &FieldVector, role: FieldRole) -> Result<()> {
        if f.role != role {
            return Err(SolverError::InvalidArgument(
                "field role does not match the requested operator slot".into(),
            ));
        }
        let expect = match role {
            FieldRole::Displacement => self.dofs_u(),
            FieldRole::Velocity => self.dofs_v(),
        };
        if f.data.len() != expect {
            return Err(SolverError::InvalidArgument(format!(
                "field length {} does not match space ({expect})",
                f.data.len()
            )));
        }
        Ok(())
    }

    /// Elementwise stiffness applied to a displacement field (u-tested).
    pub fn apply_stiffness_u(&self, u: &FieldVector) -> Result<FieldVector> {
        self.check_role(u, FieldRole::Displacement)?;
        let du = self.dim_u;
        let mut out = vec![0.0; u.data.len()];
        out.par_chunks_mut(du)
            .zip(u.data.par_chunks(du))
            .for_each(|(o, ue)| {
                for i in 0..du {
                    let mut acc = 0.0;
                    for j in 0..du {
                        acc += self.stiff_u[(i, j)] * ue[j];
                    }
                    o[i] = acc;
                }
            });
        Ok(FieldVector {
            role: FieldRole::Displacement,
            data: out,
        })
    }

    /// Mass applied to a velocity field; the orthonormal physical basis makes
    /// this the identity.
    pub fn apply_mass_v(&self, v: &FieldVector) -> Result<FieldVector> {
        self.check_role(v, FieldRole::Velocity)?;
        Ok(v.clone())
    }

    /// eq-1 spatial form tested by grad(phi):
    /// int grad(phi).grad(w_v) + surface (w_v* - w_v) terms (which also
    /// involve w_u through the zeta part of v*).
    pub fn apply_eq1_spatial(&self, w_v: &FieldVector, w_u: &FieldVector) -> Result<FieldVector> {
        self.check_role(w_v, FieldRole::Velocity)?;
        self.check_role(w_u, FieldRole::Displacement)?;
        let (du, dv) = (self.dim_u, self.dim_v);
        let mut out = vec![0.0; self.dofs_u()];
        let mesh = &self.mesh;
        out.par_chunks_mut(du).enumerate().for_each(|(e, o)| {
            let ve = &w_v.data[e * dv..(e + 1) * dv];
            for i in 0..du {
                let mut acc = 0.0;
                for j in 0..dv {
                    acc += self.stiff_uv[(i, j)] * ve[j];
                }
                o[i] = acc;
            }
            for &(fi, side) in mesh.faces_of(e) {
                let face = &mesh.faces[fi];
                let blocks = &self.face_blocks[face.axis];
                let (a, other) = match side {
                    Side::Lower => (0usize, face.right),
                    Side::Upper => (1usize, face.left),
                };
                let b = 1 - a;
                let vo = &w_v.data[other * dv..(other + 1) * dv];
                let ue = &w_u.data[e * du..(e + 1) * du];
                let uo = &w_u.data[other * du..(other + 1) * du];
                for i in 0..du {
                    let mut acc = 0.0;
                    for j in 0..dv {
                        acc += blocks.e1v[a][a][(i, j)] * ve[j] + blocks.e1v[a][b][(i, j)] * vo[j];
                    }
                    for j in 0..du {
                        acc += blocks.e1u[a][a][(i, j)] * ue[j] + blocks.e1u[a][b][(i, j)] * uo[j];
                    }
                    o[i] += acc;
                }
            }
        });
        Ok(FieldVector {
            role: FieldRole::Displacement,
            data: out,
        })
    }

    /// eq-2 spatial form tested by psi:
    /// int grad(psi).grad(w_u) - surface psi (grad w_u)*.n terms (which also
    /// involve w_v through the gamma part of the trace).
    pub fn apply_eq2_spatial(&self, w_u: &FieldVector, w_v: &FieldVector) -> Result<FieldVector> {
        self.check_role(w_u, FieldRole::Displacement)?;
        self.check_role(w_v, FieldRole::Velocity)?;
        let (du, dv) = (self.dim_u, self.dim_v);
        let mut out = vec![0.0; self.dofs_v()];
        let mesh = &self.mesh;
        out.par_chunks_mut(dv).enumerate().for_each(|(e, o)| {
            let ue = &w_u.data[e * du..(e + 1) * du];
            for i in 0..dv {
                let mut acc = 0.0;
                for j in 0..du {
                    acc += self.stiff_vu[(i, j)] * ue[j];
                }
                o[i] = acc;
            }
            for &(fi, side) in mesh.faces_of(e) {
                let face = &mesh.faces[fi];
                let blocks = &self.face_blocks[face.axis];
                let (a, other) = match side {
                    Side::Lower => (0usize, face.right),
                    Side::Upper => (1usize, face.left),
                };
                let b = 1 - a;
                let uo = &w_u.data[other * du..(other + 1) * du];
                let ve = &w_v.data[e * dv..(e + 1) * dv];
                let vo = &w_v.data[other * dv..(other + 1) * dv];
                for i in 0..dv {
                    let mut acc = 0.0;
                    for j in 0..du {
                        acc += blocks.e2u[a][a][(i, j)] * ue[j] + blocks.e2u[a][b][(i, j)] * uo[j];
                    }
                    for j in 0..dv {
                        acc += blocks.e2v[a][a][(i, j)] * ve[j] + blocks.e2v[a][b][(i, j)] * vo[j];
                    }
                    // surface term enters eq-2 with a minus sign
                    o[i] -= acc;
                }
            }
        });
        Ok(FieldVector {
            role: FieldRole::Velocity,
            data: out,
        })
    }

    /// Matrix-free linear combination of the operator blocks:
    /// returns (stiffness_u * S_u u + eq1_spatial * eq1(v, u),
    ///          mass_v * v + eq2_spatial * eq2(u, v)).
    pub fn apply_operator(
        &self,
        combo: &OperatorCombo,
        u: &FieldVector,
        v: &FieldVector,
    ) -> Result<(FieldVector, FieldVector)> {
        let mut out_u = FieldVector::zeros(FieldRole::Displacement, self.dofs_u());
        let mut out_v = FieldVector::zeros(FieldRole::Velocity, self.dofs_v());
        if combo.stiffness_u != 0.0 {
            let s = self.apply_stiffness_u(u)?;
            for (o, x) in out_u.data.iter_mut().zip(&s.data) {
                *o += combo.stiffness_u * x;
            }
        }
        if combo.eq1_spatial != 0.0 {
            let s = self.apply_eq1_spatial(v, u)?;
            for (o, x) in out_u.data.iter_mut().zip(&s.data) {
                *o += combo.eq1_spatial * x;
            }
        }
        if combo.mass_v != 0.0 {
            for (o, x) in out_v.data.iter_mut().zip(&v.data) {
                *o += combo.mass_v * x;
            }
        }
        if combo.eq2_spatial != 0.0 {
            let s = self.apply_eq2_spatial(u, v)?;
            for (o, x) in out_v.data.iter_mut().zip(&s.data) {
                *o += combo.eq2_spatial * x;
            }
        }
        Ok((out_u, out_v))
    }

    /// Sum over elements of the boundary flux terms,
    /// sum_K oint [grad(u).n (v* - v) + v (grad u)*.n] dS,
    /// evaluated face by face at the trace quadrature nodes. By the flux
    /// algebra this equals -sum_F int (gamma [v]^2 + zeta [grad u]^2).
    pub fn flux_dissipation(&self, u: &FieldVector, v: &FieldVector) -> Result<f64> {
        self.check_role(u, FieldRole::Displacement)?;
        self.check_role(v, FieldRole::Velocity)?;
        let (du, dv) = (self.dim_u, self.dim_v);
        let mut total = 0.0;
        for face in &self.mesh.faces {
            let tr = &self.traces[face.axis];
            let blocks = &self.face_blocks[face.axis];
            let (el, er) = (face.left, face.right);
            for (q, &w) in blocks.weights.iter().enumerate() {
                let eval = |tab: &TraceTable, e: usize, dim: usize, data: &[f64], deriv: bool| {
                    let src = if deriv {
                        &tab.normal_derivs
                    } else {
                        &tab.values
                    };
                    let mut acc = 0.0;
                    for m in 0..dim {
                        acc += src[m][q] * data[e * dim + m];
                    }
                    acc
                };
                let vl = eval(&tr[0][1], el, dv, &v.data, false);
                let vr = eval(&tr[1][1], er, dv, &v.data, false);
                let dul = eval(&tr[0][0], el, du, &u.data, true);
                let dur = eval(&tr[1][0], er, du, &u.data, true);
                let jump_du = dul - dur; // [grad u]
                let jump_v = vl - vr; // [v] . n-
                let vstar =
                    self.flux.theta * vr + (1.0 - self.flux.theta) * vl - self.flux.zeta * jump_du;
                let dustar = (1.0 - self.flux.theta) * dur + self.flux.theta * dul
                    - self.flux.gamma * jump_v;
                // side L: n = +axis; side R: n = -axis
                let contrib =
                    dul * (vstar - vl) + vl * dustar + (-dur) * (vstar - vr) + vr * (-dustar);
                total += w * contrib;
            }
        }
        Ok(total)
    }

    /// Value and physical gradient of a field at a reference point of one
    /// element.
    pub fn eval_field_at(&self, field: &FieldVector, e: usize, r: [f64; 2]) -> (f64, [f64; 2]) {
        let (q, dim) = match field.role {
            FieldRole::Displacement => (self.q_u, self.dim_u),
            FieldRole::Velocity => (self.q_v, self.dim_v),
        };
        let dim2 = self.mesh.dimension == 2;
        let norm_all: f64 = (0..self.mesh.dimension)
            .map(|ax| (2.0 / self.mesh.h[ax]).sqrt())
            .product();
        let mx = eval_modes(q, r[0]);
        let my = if dim2 {
            eval_modes(q, r[1])
        } else {
            Vec::new()
        };
        let coeffs = &field.data[e * dim..(e + 1) * dim];
        let mut val = 0.0;
        let mut grad = [0.0, 0.0];
        for m in 0..dim {
            let c = coeffs[m];
            if dim2 {
                let (jx, jy) = (m % (q + 1), m / (q + 1));
                val += c * norm_all * mx[jx].0 * my[jy].0;
                grad[0] += c * norm_all * (2.0 / self.mesh.h[0]) * mx[jx].1 * my[jy].0;
                grad[1] += c * norm_all * (2.0 / self.mesh.h[1]) * mx[jx].0 * my[jy].1;
            } else {
                val += c * norm_all * mx[m].0;
                grad[0] += c * norm_all * (2.0 / self.mesh.h[0]) * mx[m].1;
            }
        }
        (val, grad)
    }

    /// Elementwise H1 projection of u0 (zero-mean-difference + gradient
    /// orthogonality) and L2 projection of v0.
    pub fn project_initial(
        &self,
        u0: &dyn Fn([f64; 2]) -> f64,
        grad_u0: &dyn Fn([f64; 2]) -> [f64; 2],
        v0: &dyn Fn([f64; 2]) -> f64,
    ) -> Result<(FieldVector, FieldVector)> {
        let (du, dv) = (self.dim_u, self.dim_v);
        let ne = self.mesh.num_elements();
        let mut u = vec![0.0; ne * du];
        let mut v = vec![0.0; ne * dv];

        // Local H1 matrix: constant-mode row replaced by the mean condition.
        let mut local = self.stiff_u.clone();
        for j in 0..du {
            local[(0, j)] = 0.0;
        }
        local[(0, 0)] = self.sqrt_measure;
        let lu = local.lu();

        for e in 0..ne {
            let mut rhs_u = nalgebra::DVector::zeros(du);
            let mut rhs_v = vec![0.0; dv];
            for (p, &w) in self.vol_data_u.weights.iter().enumerate() {
                let x = self.mesh.to_physical(e, self.vol_data_u.ref_pts[p]);
                let uval = u0(x);
                let ugrad = grad_u0(x);
                rhs_u[0] += w * uval;
                for j in 1..du {
                    let g = self.vol_data_u.grads[p][j];
                    rhs_u[j] += w * (g[0] * ugrad[0] + g[1] * ugrad[1]);
                }
            }
            for (p, &w) in self.vol_data_v.weights.iter().enumerate() {
                let x = self.mesh.to_physical(e, self.vol_data_v.ref_pts[p]);
                let vval = v0(x);
                for j in 0..dv {
                    rhs_v[j] += w * self.vol_data_v.values[p][j] * vval;
                }
            }
            let sol = lu.solve(&rhs_u).ok_or_else(|| {
                SolverError::NumericalFailure("singular local H1 projection system".into())
            })?;
            u[e * du..(e + 1) * du].copy_from_slice(sol.as_slice());
            v[e * dv..(e + 1) * dv].copy_from_slice(&rhs_v);
        }
        Ok((
            FieldVector {
                role: FieldRole::Displacement,
                data: u,
            },
            FieldVector {
                role: FieldRole::Velocity,
                data: v,
            },
        ))
    }

    /// Moment vector int_K psi_j f dx of a function against the velocity test
    /// space (the identity mass makes this the L2 projection as well).
    pub fn moment_v(&self, f: &(dyn Fn([f64; 2]) -> f64 + Sync)) -> Vec<f64> {
        let dv = self.dim_v;
        let ne = self.mesh.num_elements();
        let mut out = vec![0.0; ne * dv];
        out.par_chunks_mut(dv).enumerate().for_each(|(e, o)| {
            for (p, &w) in self.vol_data_v.weights.iter().enumerate() {
                let x = self.mesh.to_physical(e, self.vol_data_v.ref_pts[p]);
                let fv = f(x);
                for j in 0..dv {
                    o[j] += w * self.vol_data_v.values[p][j] * fv;
                }
            }
        });
        out
    }

    /// L2 norm of an analytic function over the domain (data-rule quadrature).
    pub fn l2_norm_of(&self, f: &(dyn Fn([f64; 2]) -> f64 + Sync)) -> f64 {
        let ne = self.mesh.num_elements();
        let total: f64 = (0..ne)
            .into_par_iter()
            .map(|e| {
                let mut acc = 0.0;
                for (p, &w) in self.vol_data_v.weights.iter().enumerate() {
                    let x = self.mesh.to_physical(e, self.vol_data_v.ref_pts[p]);
                    let fv = f(x);
                    acc += w * fv * fv;
                }
                acc
            })
            .collect::<Vec<_>>()
            .iter()
            .sum();
        total.sqrt()
    }

    /// L2 error against an exact function using the (q+1)-point rule per
    /// direction (the convention of the reported tables). With `gradient`
    /// the broken H1 seminorm of the error is computed instead.
    pub fn error_norm(
        &self,
        field: &FieldVector,
        exact: &(dyn Fn([f64; 2]) -> f64 + Sync),
        gradient: Option<&(dyn Fn([f64; 2]) -> [f64; 2] + Sync)>,
    ) -> f64 {
        let (table, dim) = match field.role {
            FieldRole::Displacement => (&self.vol_err_u, self.dim_u),
            FieldRole::Velocity => (&self.vol_err_v, self.dim_v),
        };
        let ne = self.mesh.num_elements();
        let per_element: Vec<f64> = (0..ne)
            .into_par_iter()
            .map(|e| {
                let coeffs = &field.data[e * dim..(e + 1) * dim];
                let mut acc = 0.0;
                for (p, &w) in table.weights.iter().enumerate() {
                    let x = self.mesh.to_physical(e, table.ref_pts[p]);
                    match gradient {
                        None => {
                            let mut fh = 0.0;
                            for j in 0..dim {
                                fh += table.values[p][j] * coeffs[j];
                            }
                            let d = exact(x) - fh;
                            acc += w * d * d;
                        }
                        Some(g) => {
                            let mut gh = [0.0, 0.0];
                            for j in 0..dim {
                                gh[0] += table.grads[p][j][0] * coeffs[j];
                                gh[1] += table.grads[p][j][1] * coeffs[j];
                            }
                            let ge = g(x);
                            let dx = ge[0] - gh[0];
                            let dy = ge[1] - gh[1];
                            acc += w * (dx * dx + dy * dy);
                        }
                    }
                }
                acc
            })
            .collect();
        per_element.iter().sum::<f64>().sqrt()
    }

    /// Error norm evaluated with the high-order data rule instead of the
    /// (q+1)-point table rule; used by accuracy diagnostics where the sparse
    /// rule would superconverge.
    pub fn dense_error_norm(
        &self,
        field: &FieldVector,
        exact: &(dyn Fn([f64; 2]) -> f64 + Sync),
        gradient: Option<&(dyn Fn([f64; 2]) -> [f64; 2] + Sync)>,
    ) -> f64 {
        let (table, dim) = match field.role {
            FieldRole::Displacement => (&self.vol_data_u, self.dim_u),
            FieldRole::Velocity => (&self.vol_data_v, self.dim_v),
        };
        let ne = self.mesh.num_elements();
        let per_element: Vec<f64> = (0..ne)
            .into_par_iter()
            .map(|e| {
                let coeffs = &field.data[e * dim..(e + 1) * dim];
                let mut acc = 0.0;
                for (p, &w) in table.weights.iter().enumerate() {
                    let x = self.mesh.to_physical(e, table.ref_pts[p]);
                    match gradient {
                        None => {
                            let mut fh = 0.0;
                            for j in 0..dim {
                                fh += table.values[p][j] * coeffs[j];
                            }
                            let d = exact(x) - fh;
                            acc += w * d * d;
                        }
                        Some(g) => {
                            let mut gh = [0.0, 0.0];
                            for j in 0..dim {
                                gh[0] += table.grads[p][j][0] * coeffs[j];
                                gh[1] += table.grads[p][j][1] * coeffs[j];
                            }
                            let ge = g(x);
                            let dx = ge[0] - gh[0];
                            let dy = ge[1] - gh[1];
                            acc += w * (dx * dx + dy * dy);
                        }
                    }
                }
                acc
            })
            .collect();
        per_element.iter().sum::<f64>().sqrt()
    }

    /// Squared broken H1 seminorm ||grad_h u||^2 of a displacement field.
    pub fn grad_norm_sq(&self, u: &FieldVector) -> f64 {
        let du = self.dim_u;
        u.data
            .chunks(du)
            .map(|ue| {
                let mut acc = 0.0;
                for i in 0..du {
                    for j in 0..du {
                        acc += ue[i] * self.stiff_u[(i, j)] * ue[j];
                    }
                }
                acc
            })
            .sum()
    }

    /// Squared L2 norm of a field (coefficient norm for the orthonormal
    /// basis).
    pub fn l2_norm_sq(&self, f: &FieldVector) -> f64 {
        f.data.iter().map(|x| x * x).sum()
    }

    // -- step-system assembly helpers (shared by the direct and the
    //    matrix-free solver paths) ------------------------------------------

    /// Dense diagonal block of the step system for one element:
    /// rows/cols ordered [u modes | v modes]; the constant u-mode row holds
    /// the mean-value constraint.
    pub fn step_diag_block(&self, ct: f64, sc: f64, mem: f64) -> DMatrix<f64> {
        let (du, dv) = (self.dim_u, self.dim_v);
        let s = du + dv;
        let mut d = DMatrix::zeros(s, s);
        for i in 0..du {
            for j in 0..du {
                d[(i, j)] = ct * self.stiff_u[(i, j)];
            }
            for j in 0..dv {
                d[(i, du + j)] = -sc * self.stiff_uv[(i, j)];
            }
        }
        for i in 0..dv {
            for j in 0..du {
                d[(du + i, j)] = sc * self.stiff_vu[(i, j)];
            }
            d[(du + i, du + i)] = ct + mem;
        }
        // Face self-couplings: every element sits on the Lower side of one
        // face and the Upper side of another per axis.
        for blocks in &self.face_blocks {
            for a in 0..2 {
                for i in 0..du {
                    for j in 0..dv {
                        d[(i, du + j)] -= sc * blocks.e1v[a][a][(i, j)];
                    }
                    for j in 0..du {
                        d[(i, j)] -= sc * blocks.e1u[a][a][(i, j)];
                    }
                }
                for i in 0..dv {
                    for j in 0..du {
                        d[(du + i, j)] -= sc * blocks.e2u[a][a][(i, j)];
                    }
                    for j in 0..dv {
                        d[(du + i, du + j)] -= sc * blocks.e2v[a][a][(i, j)];
                    }
                }
            }
        }
        // Mean-value constraint replaces the constant u-mode row.
        for j in 0..s {
            d[(0, j)] = 0.0;
        }
        d[(0, 0)] = ct;
        d[(0, du)] = -sc;
        d
    }

    /// Dense neighbor block of the step system across one face.
    /// `test_side`/`trial_side` are the sides (0 = Lower, 1 = Upper) the test
    /// and trial elements occupy on that face.
    pub fn step_neighbor_block(
        &self,
        axis: usize,
        test_side: usize,
        trial_side: usize,
        sc: f64,
    ) -> DMatrix<f64> {
        let (du, dv) = (self.dim_u, self.dim_v);
        let s = du + dv;
        let blocks = &self.face_blocks[axis];
        let mut d = DMatrix::zeros(s, s);
        let (a, b) = (test_side, trial_side);
        for i in 0..du {
            for j in 0..dv {
                d[(i, du + j)] = -sc * blocks.e1v[a][b][(i, j)];
            }
            for j in 0..du {
                d[(i, j)] = -sc * blocks.e1u[a][b][(i, j)];
            }
        }
        for i in 0..dv {
            for j in 0..du {
                d[(du + i, j)] = -sc * blocks.e2u[a][b][(i, j)];
            }
            for j in 0..dv {
                d[(du + i, du + j)] = -sc * blocks.e2v[a][b][(i, j)];
            }
        }
        // Constraint row couples only to the element's own modes.
        for j in 0..s {
            d[(0, j)] = 0.0;
        }
        d
    }

    /// Matrix-free application of the step system to packed trial data
    /// (u then v, element-major within each). Writes the residual layout the
    /// solvers expect: constant u-mode rows carry the mean constraint.
    pub fn apply_step_system(
        &self,
        ct: f64,
        sc: f64,
        mem: f64,
        u: &FieldVector,
        v: &FieldVector,
    ) -> Result<(FieldVector, FieldVector)> {
        let mut out_u = self.apply_stiffness_u(u)?;
        let eq1 = self.apply_eq1_spatial(v, u)?;
        for (o, x) in out_u.data.iter_mut().zip(&eq1.data) {
            *o = ct * *o - sc * x;
        }
        let du = self.dim_u;
        let dv = self.dim_v;
        for e in 0..self.mesh.num_elements() {
            out_u.data[e * du] = ct * u.data[e * du] - sc * v.data[e * dv];
        }
        let eq2 = self.apply_eq2_spatial(u, v)?;
        let mut out_v = FieldVector::zeros(FieldRole::Velocity, self.dofs_v());
        for i in 0..out_v.data.len() {
            out_v.data[i] = (ct + mem) * v.data[i] + sc * eq2.data[i];
        }
        Ok((out_u, out_v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;

    fn rng_stream(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed | 1;
        move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        }
    }

    fn space_1d(n: usize, q_u: usize, q_v: usize, flux: FluxParams) -> DgSpace {
        let mesh = build_mesh(1, &[[0.0, 2.0 * std::f64::consts::PI]], &[n]).unwrap();
        assemble_space(mesh, q_u, q_v, flux).unwrap()
    }

    fn space_2d(n: usize, q_u: usize, q_v: usize, flux: FluxParams) -> DgSpace {
        let mesh = build_mesh(2, &[[0.0, 1.0], [0.0, 1.0]], &[n, n]).unwrap();
        assemble_space(mesh, q_u, q_v, flux).unwrap()
    }

    fn random_fields(space: &DgSpace, seed: u64) -> (FieldVector, FieldVector) {
        let mut rng = rng_stream(seed);
        let u = FieldVector {
            role: FieldRole::Displacement,
            data: (0..space.dofs_u()).map(|_| rng()).collect(),
        };
        let v = FieldVector {
            role: FieldRole::Velocity,
            data: (0..space.dofs_v()).map(|_| rng()).collect(),
        };
        (u, v)
    }

    /// Independent jump-integral oracle: -sum_F int (gamma [v]^2 + zeta [grad u]^2)
    /// from direct trace evaluation at Gauss nodes on each face.
    fn dissipation_oracle(space: &DgSpace, u: &FieldVector, v: &FieldVector) -> f64 {
        let nq = space.q_u.max(space.q_v) + 3;
        let rule = gauss_rule(nq).unwrap();
        let mut total = 0.0;
        for face in &space.mesh.faces {
            let pts: Vec<f64> = if space.mesh.dimension == 2 {
                rule.nodes.clone()
            } else {
                vec![0.0]
            };
            let wts: Vec<f64> = if space.mesh.dimension == 2 {
                let ht = space.mesh.h[1 - face.axis];
                rule.weights.iter().map(|w| 0.5 * ht * w).collect()
            } else {
                vec![1.0]
            };
            for (k, &t) in pts.iter().enumerate() {
                let r_lo = if face.axis == 0 { [1.0, t] } else { [t, 1.0] };
                let r_hi = if face.axis == 0 { [-1.0, t] } else { [t, -1.0] };
                let (vl, _) = space.eval_field_at(v, face.left, r_lo);
                let (vr, _) = space.eval_field_at(v, face.right, r_hi);
                let (_, gl) = space.eval_field_at(u, face.left, r_lo);
                let (_, gr) = space.eval_field_at(u, face.right, r_hi);
                let jump_du = gl[face.axis] - gr[face.axis];
                let jump_v = vl - vr;
                total -= wts[k]
                    * (space.flux.gamma * jump_v * jump_v + space.flux.zeta * jump_du * jump_du);
            }
        }
        total
    }

    #[test]
    fn inadmissible_degree_pairs_rejected() {
        let mesh = build_mesh(1, &[[0.0, 1.0]], &[4]).unwrap();
        for (qu, qv) in [(0usize, 0usize), (3, 0), (2, 3)] {
            let err = assemble_space(mesh.clone(), qu, qv, FluxParams::zero());
            assert!(
                matches!(err, Err(SolverError::InvalidArgument(ref m)) if m.contains("admissible")),
                "({qu},{qv})"
            );
        }
        for (qu, qv) in [(1usize, 0usize), (1, 1), (2, 0), (5, 4)] {
            assert!(assemble_space(mesh.clone(), qu, qv, FluxParams::zero()).is_ok());
        }
    }

    #[test]
    fn flux_params_validation_and_pairing() {
        assert!(FluxParams::new(0.5, -1.0, 0.0).is_err());
        assert!(FluxParams::new(-2.0, 0.0, 1.0).is_ok());
        assert!(FluxParams::zero().optimal_pairing()); // 0*(1-0) = 0*0
        assert!(FluxParams::new(0.5, 0.5, 0.5).unwrap().optimal_pairing());
        assert!(!FluxParams::new(0.5, 0.0, 1.0).unwrap().optimal_pairing());
    }

    #[test]
    fn stiffness_kernel_and_mass_identity() {
        let space = space_1d(6, 2, 1, FluxParams::zero());
        // Elementwise-constant u lies in the stiffness kernel.
        let mut u = FieldVector::zeros(FieldRole::Displacement, space.dofs_u());
        for e in 0..space.mesh.num_elements() {
            u.data[e * space.dim_u()] = 1.7;
        }
        let su = space.apply_stiffness_u(&u).unwrap();
        assert!(su.data.iter().all(|x| x.abs() < 1e-14));
        // mass_v is the identity on coefficients.
        let (_, v) = random_fields(&space, 3);
        let mv = space.apply_mass_v(&v).unwrap();
        assert_eq!(mv.data, v.data);
        // role mismatch is rejected
        assert!(space.apply_stiffness_u(&v.clone_as_wrong_role()).is_err());
    }

    impl FieldVector {
        fn clone_as_wrong_role(&self) -> FieldVector {
            FieldVector {
                role: match self.role {
                    FieldRole::Displacement => FieldRole::Velocity,
                    FieldRole::Velocity => FieldRole::Displacement,
                },
                data: self.data.clone(),
            }
        }
    }

    #[test]
    fn dissipation_identity_1d_and_2d() {
        let params = [
            FluxParams::zero(),
            FluxParams::new(0.5, 1.0, 1.0).unwrap(),
            FluxParams::new(1.0, 0.3, 0.0).unwrap(),
            FluxParams::new(-0.25, 0.0, 0.8).unwrap(),
            FluxParams::new(0.7, 2.0, 0.1).unwrap(),
        ];
        for (mkspace, tag) in [
            (
                Box::new(|f: FluxParams| space_1d(5, 3, 2, f))
                    as Box<dyn Fn(FluxParams) -> DgSpace>,
                "1d",
            ),
            (Box::new(|f: FluxParams| space_2d(3, 2, 1, f)), "2d"),
        ] {
            for (pi, p) in params.iter().enumerate() {
                let space = mkspace(*p);
                for s in 0..10 {
                    let (u, v) = random_fields(&space, 1000 + s + pi as u64 * 17);
                    let lhs = space.flux_dissipation(&u, &v).unwrap();
                    let rhs = dissipation_oracle(&space, &u, &v);
                    let scale = lhs.abs().max(rhs.abs()).max(1.0);
                    assert!(
                        (lhs - rhs).abs() < 1e-12 * scale,
                        "{tag} params {pi}: {lhs} vs {rhs}"
                    );
                }
            }
        }
    }

    #[test]
    fn dissipation_vanishes_without_damping() {
        let space = space_1d(7, 2, 1, FluxParams::new(0.35, 0.0, 0.0).unwrap());
        let (u, v) = random_fields(&space, 5);
        let d = space.flux_dissipation(&u, &v).unwrap();
        assert!(d.abs() < 1e-12, "{d}");
    }

    #[test]
    fn continuous_fields_have_zero_dissipation_any_flux() {
        // A C^1 periodic piecewise-cubic (uniform B-spline) is exactly
        // representable at q >= 3 and has no jumps in value or gradient.
        let n = 8;
        let space = space_1d(n, 3, 3, FluxParams::new(0.6, 1.5, 0.7).unwrap());
        let period = 2.0 * std::f64::consts::PI;
        let h = period / n as f64;
        let bspline = move |x: f64| {
            // cardinal cubic B-spline bumps centered at the grid nodes
            let mut acc = 0.0;
            for c in 0..n {
                let mut d = (x - c as f64 * h).rem_euclid(period);
                if d > period / 2.0 {
                    d -= period;
                }
                let t = (d / h).abs();
                acc += (c as f64 + 1.0)
                    * if t < 1.0 {
                        (4.0 - 6.0 * t * t + 3.0 * t * t * t) / 6.0
                    } else if t < 2.0 {
                        (2.0 - t).powi(3) / 6.0
                    } else {
                        0.0
                    };
            }
            acc
        };
        // L2-project elementwise (exact for piecewise cubics on this mesh).
        let moments_u: Vec<f64> = {
            let tmp = space.moment_v(&|x| bspline(x[0]));
            tmp
        };
        // q_v = q_u here so the u projection can reuse the v moments.
        let u = FieldVector {
            role: FieldRole::Displacement,
            data: moments_u.clone(),
        };
        let v = FieldVector {
            role: FieldRole::Velocity,
            data: moments_u,
        };
        let d = space.flux_dissipation(&u, &v).unwrap();
        assert!(d.abs() < 1e-10, "{d}");
        // And the face terms change nothing relative to the volume form.
        let full = space.apply_eq1_spatial(&v, &u).unwrap();
        let volume_only = {
            let mut out = vec![0.0; space.dofs_u()];
            for e in 0..space.mesh.num_elements() {
                for i in 0..space.dim_u() {
                    let mut acc = 0.0;
                    for j in 0..space.dim_v() {
                        acc += space.stiff_uv[(i, j)] * v.data[e * space.dim_v() + j];
                    }
                    out[e * space.dim_u() + i] = acc;
                }
            }
            out
        };
        for i in 0..full.data.len() {
            assert!(
                (full.data[i] - volume_only[i]).abs() < 1e-9,
                "entry {i}: {} vs {}",
                full.data[i],
                volume_only[i]
            );
        }
    }

    #[test]
    fn coupling_blocks_are_negative_transposes() {
        // Extract the dense matrices of the eq1 v-slot and eq2 u-slot on a
        // 4-element mesh; the scheme multiplies them by -sc and +sc, and the
        // flux algebra makes A1v = A2u^T exactly.
        for flux in [FluxParams::zero(), FluxParams::new(0.4, 0.9, 0.2).unwrap()] {
            let space = space_1d(4, 2, 1, flux);
            let (nu, nv) = (space.dofs_u(), space.dofs_v());
            let mut a1v = DMatrix::<f64>::zeros(nu, nv);
            let zero_u = FieldVector::zeros(FieldRole::Displacement, nu);
            for k in 0..nv {
                let mut v = FieldVector::zeros(FieldRole::Velocity, nv);
                v.data[k] = 1.0;
                let col = space.apply_eq1_spatial(&v, &zero_u).unwrap();
                for i in 0..nu {
                    a1v[(i, k)] = col.data[i];
                }
            }
            let zero_v = FieldVector::zeros(FieldRole::Velocity, nv);
            let mut a2u = DMatrix::<f64>::zeros(nv, nu);
            for k in 0..nu {
                let mut u = FieldVector::zeros(FieldRole::Displacement, nu);
                u.data[k] = 1.0;
                let col = space.apply_eq2_spatial(&u, &zero_v).unwrap();
                for i in 0..nv {
                    a2u[(i, k)] = col.data[i];
                }
            }
            let diff = (&a1v - a2u.transpose()).abs().max();
            assert!(diff < 1e-12, "max deviation {diff}");
        }
    }

    #[test]
    fn matrix_free_apply_matches_assembled_blocks() {
        for (dim, space) in [
            (
                1,
                space_1d(4, 2, 1, FluxParams::new(0.3, 0.5, 0.25).unwrap()),
            ),
            (
                2,
                space_2d(3, 2, 1, FluxParams::new(0.8, 0.1, 0.4).unwrap()),
            ),
        ] {
            let (ct, sc, mem) = (7.0, 0.6, 0.9);
            let (u, v) = random_fields(&space, 31 + dim as u64);
            let (ou, ov) = space.apply_step_system(ct, sc, mem, &u, &v).unwrap();
            // Assemble the action from the dense blocks.
            let (du, dv) = (space.dim_u(), space.dim_v());
            let s = du + dv;
            let ne = space.mesh.num_elements();
            let diag = space.step_diag_block(ct, sc, mem);
            let mut expect_u = vec![0.0; ne * du];
            let mut expect_v = vec![0.0; ne * dv];
            let gather = |e: usize| -> Vec<f64> {
                let mut w = vec![0.0; s];
                w[..du].copy_from_slice(&u.data[e * du..(e + 1) * du]);
                w[du..].copy_from_slice(&v.data[e * dv..(e + 1) * dv]);
                w
            };
            for e in 0..ne {
                let mut acc = vec![0.0; s];
                let we = gather(e);
                for i in 0..s {
                    for j in 0..s {
                        acc[i] += diag[(i, j)] * we[j];
                    }
                }
                for &(fi, side) in space.mesh.faces_of(e) {
                    let face = &space.mesh.faces[fi];
                    let (a, other) = match side {
                        Side::Lower => (0usize, face.right),
                        Side::Upper => (1usize, face.left),
                    };
                    let blk = space.step_neighbor_block(face.axis, a, 1 - a, sc);
                    let wo = gather(other);
                    for i in 0..s {
                        for j in 0..s {
                            acc[i] += blk[(i, j)] * wo[j];
                        }
                    }
                }
                expect_u[e * du..(e + 1) * du].copy_from_slice(&acc[..du]);
                expect_v[e * dv..(e + 1) * dv].copy_from_slice(&acc[du..]);
            }
            for i in 0..ne * du {
                assert!(
                    (ou.data[i] - expect_u[i]).abs() < 1e-11 * expect_u[i].abs().max(1.0),
                    "dim {dim} u-entry {i}"
                );
            }
            for i in 0..ne * dv {
                assert!(
                    (ov.data[i] - expect_v[i]).abs() < 1e-11 * expect_v[i].abs().max(1.0),
                    "dim {dim} v-entry {i}"
                );
            }
        }
    }

    #[test]
    fn operator_combo_mixes_blocks_linearly() {
        let space = space_1d(5, 2, 1, FluxParams::new(0.4, 0.6, 0.3).unwrap());
        let (u, v) = random_fields(&space, 77);
        let combo = OperatorCombo {
            stiffness_u: 2.0,
            eq1_spatial: -0.5,
            mass_v: 3.0,
            eq2_spatial: 1.25,
        };
        let (ou, ov) = space.apply_operator(&combo, &u, &v).unwrap();
        let su = space.apply_stiffness_u(&u).unwrap();
        let e1 = space.apply_eq1_spatial(&v, &u).unwrap();
        let e2 = space.apply_eq2_spatial(&u, &v).unwrap();
        for i in 0..ou.data.len() {
            let expect = 2.0 * su.data[i] - 0.5 * e1.data[i];
            assert!((ou.data[i] - expect).abs() < 1e-13 * expect.abs().max(1.0));
        }
        for i in 0..ov.data.len() {
            let expect = 3.0 * v.data[i] + 1.25 * e2.data[i];
            assert!((ov.data[i] - expect).abs() < 1e-13 * expect.abs().max(1.0));
        }
        // Linearity of the full application in the fields.
        let (u2, v2) = random_fields(&space, 78);
        let sum_u = FieldVector {
            role: FieldRole::Displacement,
            data: u.data.iter().zip(&u2.data).map(|(a, b)| a + b).collect(),
        };
        let sum_v = FieldVector {
            role: FieldRole::Velocity,
            data: v.data.iter().zip(&v2.data).map(|(a, b)| a + b).collect(),
        };
        let (oa, _) = space.apply_operator(&combo, &u, &v).unwrap();
        let (ob, _) = space.apply_operator(&combo, &u2, &v2).unwrap();
        let (oab, _) = space.apply_operator(&combo, &sum_u, &sum_v).unwrap();
        for i in 0..oab.data.len() {
            let expect = oa.data[i] + ob.data[i];
            assert!((oab.data[i] - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn projection_of_constant_and_idempotence() {
        let space = space_1d(5, 3, 2, FluxParams::zero());
        let (u, v) = space
            .project_initial(&|_| 2.5, &|_| [0.0, 0.0], &|_| 2.5)
            .unwrap();
        for e in 0..space.mesh.num_elements() {
            let c0 = u.data[e * space.dim_u()];
            assert!((c0 * space.sqrt_measure() - 2.5 * space.mesh.element_measure()).abs() < 1e-13);
            for j in 1..space.dim_u() {
                assert!(u.data[e * space.dim_u() + j].abs() < 1e-13);
            }
            let v0 = v.data[e * space.dim_v()];
            assert!((v0 - 2.5 * space.sqrt_measure()).abs() < 1e-12);
        }
        // Idempotence: project a field already in the space; recover exactly.
        let (ur, vr) = random_fields(&space, 11);
        let exact_u = |x: [f64; 2]| -> f64 {
            let e = ((x[0] / space.mesh.h[0]).floor() as usize).min(space.mesh.num_elements() - 1);
            let r = 2.0 * (x[0] - space.mesh.element_origin(e)[0]) / space.mesh.h[0] - 1.0;
            space.eval_field_at(&ur, e, [r, 0.0]).0
        };
        let exact_grad = |x: [f64; 2]| -> [f64; 2] {
            let e = ((x[0] / space.mesh.h[0]).floor() as usize).min(space.mesh.num_elements() - 1);
            let r = 2.0 * (x[0] - space.mesh.element_origin(e)[0]) / space.mesh.h[0] - 1.0;
            space.eval_field_at(&ur, e, [r, 0.0]).1
        };
        let exact_v = |x: [f64; 2]| -> f64 {
            let e = ((x[0] / space.mesh.h[0]).floor() as usize).min(space.mesh.num_elements() - 1);
            let r = 2.0 * (x[0] - space.mesh.element_origin(e)[0]) / space.mesh.h[0] - 1.0;
            space.eval_field_at(&vr, e, [r, 0.0]).0
        };
        let (u2, v2) = space
            .project_initial(&exact_u, &exact_grad, &exact_v)
            .unwrap();
        for i in 0..u2.data.len() {
            assert!((u2.data[i] - ur.data[i]).abs() < 1e-12 * ur.data[i].abs().max(1.0));
        }
        for i in 0..v2.data.len() {
            assert!((v2.data[i] - vr.data[i]).abs() < 1e-12 * vr.data[i].abs().max(1.0));
        }
    }

    #[test]
    fn projection_orthogonality_residuals() {
        // The three defining conditions hold to 1e-12 on every element.
        let space = space_2d(3, 2, 1, FluxParams::zero());
        let u0 = |x: [f64; 2]| (2.0 * std::f64::consts::PI * x[0]).sin() * (x[1] + 0.3).powi(2);
        let g0 = |x: [f64; 2]| {
            let tp = 2.0 * std::f64::consts::PI;
            [
                tp * (tp * x[0]).cos() * (x[1] + 0.3).powi(2),
                (tp * x[0]).sin() * 2.0 * (x[1] + 0.3),
            ]
        };
        let v0 = |x: [f64; 2]| (x[0] * x[1]).cos();
        let (u, v) = space.project_initial(&u0, &g0, &v0).unwrap();
        // Quadrature consistent with the projection's own integrals, so the
        // defining conditions hold to rounding.
        let nq = space.q_u.max(space.q_v) + 6;
        let rule = gauss_rule(nq).unwrap();
        for e in 0..space.mesh.num_elements() {
            // mean condition
            let mut mean = 0.0;
            // gradient orthogonality against all u modes, L2 against v modes
            let mut grad_res = vec![0.0; space.dim_u()];
            let mut l2_res = vec![0.0; space.dim_v()];
            for (jq, &ry) in rule.nodes.iter().enumerate() {
                for (iq, &rx) in rule.nodes.iter().enumerate() {
                    let w = rule.weights[iq]
                        * rule.weights[jq]
                        * 0.25
                        * space.mesh.h[0]
                        * space.mesh.h[1];
                    let x = space.mesh.to_physical(e, [rx, ry]);
                    let (uh, guh) = space.eval_field_at(&u, e, [rx, ry]);
                    let (vh, _) = space.eval_field_at(&v, e, [rx, ry]);
                    mean += w * (uh - u0(x));
                    let gdiff = [guh[0] - g0(x)[0], guh[1] - g0(x)[1]];
                    let vdiff = vh - v0(x);
                    // test against basis functions
                    let mx_u = eval_modes(space.q_u, rx);
                    let my_u = eval_modes(space.q_u, ry);
                    let mx_v = eval_modes(space.q_v, rx);
                    let my_v = eval_modes(space.q_v, ry);
                    let nrm: f64 = (2.0 / space.mesh.h[0]).sqrt() * (2.0 / space.mesh.h[1]).sqrt();
                    for m in 0..space.dim_u() {
                        let (jx, jy) = (m % (space.q_u + 1), m / (space.q_u + 1));
                        let g = [
                            nrm * (2.0 / space.mesh.h[0]) * mx_u[jx].1 * my_u[jy].0,
                            nrm * (2.0 / space.mesh.h[1]) * mx_u[jx].0 * my_u[jy].1,
                        ];
                        grad_res[m] += w * (g[0] * gdiff[0] + g[1] * gdiff[1]);
                    }
                    for m in 0..space.dim_v() {
                        let (jx, jy) = (m % (space.q_v + 1), m / (space.q_v + 1));
                        l2_res[m] += w * nrm * mx_v[jx].0 * my_v[jy].0 * vdiff;
                    }
                }
            }
            assert!(mean.abs() < 1e-12, "element {e} mean residual {mean}");
            for m in 0..space.dim_u() {
                assert!(grad_res[m].abs() < 1e-11, "element {e} grad residual {m}");
            }
            for m in 0..space.dim_v() {
                assert!(l2_res[m].abs() < 1e-11, "element {e} l2 residual {m}");
            }
        }
    }

    #[test]
    fn projection_h1_convergence_order() {
        // u0 = sin x at q_u = 2: elementwise H1 seminorm error is O(h^2).
        let mut errs = Vec::new();
        for n in [20usize, 40, 80] {
            let space = space_1d(n, 2, 1, FluxParams::zero());
            let (u, _) = space
                .project_initial(&|x| x[0].sin(), &|x| [x[0].cos(), 0.0], &|_| 0.0)
                .unwrap();
            let err = space.error_norm(&u, &|x| x[0].sin(), Some(&|x| [x[0].cos(), 0.0]));
            errs.push(err);
        }
        let r1 = (errs[0] / errs[1]).log2();
        let r2 = (errs[1] / errs[2]).log2();
        assert!((r1 - 2.0).abs() < 0.2 && (r2 - 2.0).abs() < 0.2, "{errs:?}");
    }

    #[test]
    fn projection_accuracy_min_degree_rule() {
        // || eta_v || + || grad eta_u || = O(h^(qbar+1)), qbar = min(q_u - 1, q_v).
        for (qu, qv) in [(2usize, 1usize), (2, 0), (3, 2)] {
            let qbar = (qu - 1).min(qv);
            let mut errs = Vec::new();
            for n in [10usize, 20, 40] {
                let space = space_1d(n, qu, qv, FluxParams::zero());
                let (u, v) = space
                    .project_initial(&|x| x[0].sin(), &|x| [x[0].cos(), 0.0], &|x| (x[0]).cos())
                    .unwrap();
                // Dense rule: the sparse table rule superconverges for the
                // piecewise-constant projection.
                let eu = space.dense_error_norm(&u, &|x| x[0].sin(), Some(&|x| [x[0].cos(), 0.0]));
                let ev = space.dense_error_norm(&v, &|x| x[0].cos(), None);
                errs.push(eu + ev);
            }
            let r1 = (errs[0] / errs[1]).log2();
            let r2 = (errs[1] / errs[2]).log2();
            let expect = (qbar + 1) as f64;
            assert!(
                (r1 - expect).abs() < 0.2 && (r2 - expect).abs() < 0.2,
                "({qu},{qv}): rates {r1:.2}, {r2:.2} vs {expect}"
            );
        }
    }

    #[test]
    fn error_norm_basic_values() {
        // Field's own polynomial -> 0.
        let space = space_1d(6, 2, 1, FluxParams::zero());
        let (u, _) = random_fields(&space, 4);
        let exact = |x: [f64; 2]| -> f64 {
            let e = ((x[0] / space.mesh.h[0]).floor() as usize).min(space.mesh.num_elements() - 1);
            let r = 2.0 * (x[0] - space.mesh.element_origin(e)[0]) / space.mesh.h[0] - 1.0;
            space.eval_field_at(&u, e, [r, 0.0]).0
        };
        assert!(space.error_norm(&u, &exact, None) < 1e-13);
        // Zero field against the constant 1 on (0, 1) gives exactly 1.
        let mesh = build_mesh(1, &[[0.0, 1.0]], &[4]).unwrap();
        let s2 = assemble_space(mesh, 1, 0, FluxParams::zero()).unwrap();
        let zero = FieldVector::zeros(FieldRole::Displacement, s2.dofs_u());
        assert!((s2.error_norm(&zero, &|_| 1.0, None) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn theta_zero_traces_are_one_sided() {
        // theta = 0: v* = v-, (grad u)* = grad u+. Check through the
        // dissipation evaluation on crafted fields: with v supported on the
        // right element only, (v* - v-) = 0 so eq1 sees nothing from v.
        let space = space_1d(4, 1, 1, FluxParams::zero());
        let mut v = FieldVector::zeros(FieldRole::Velocity, space.dofs_v());
        v.data[space.dim_v()] = 1.0; // constant mode of element 1
        let zero_u = FieldVector::zeros(FieldRole::Displacement, space.dofs_u());
        let out = space.apply_eq1_spatial(&v, &zero_u).unwrap();
        // Element 1 tests see only the volume term (zero for constant v
        // against grad phi) and the minus-side trace of its own left face...
        // On face (0,1): test element 0 is the minus side; v* - v- = 0.
        for i in 0..space.dim_u() {
            assert!(out.data[i].abs() < 1e-14, "minus-side test saw theta-flux");
        }
    }
}
