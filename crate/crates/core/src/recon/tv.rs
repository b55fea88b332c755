//! Smoothed and structurally weighted total variation on P1 fields.

use faer::MatMut;

use crate::field::ConductivityField;
use crate::mesh::Mesh;

/// Relative floor `eta = REL_ETA * max |grad kappa|` in the weighting tensor.
pub const REL_ETA: f64 = 1e-3;

/// `alpha * sum_T |T| (grad f^T B_T grad f + beta^2)^{1/2}` with a per-element
/// symmetric tensor `B_T` (identity for plain smoothed TV).
#[derive(Debug, Clone)]
pub struct TvTerm {
    pub alpha: f64,
    pub beta: f64,
    tensors: Option<Vec<[[f64; 3]; 3]>>,
}

fn element_gradient(mesh: &Mesh, e: usize, f: &[f64]) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (k, &n) in mesh.element(e).iter().enumerate() {
        let b = mesh.basis_gradients(e)[k];
        for a in 0..3 {
            g[a] += f[n] * b[a];
        }
    }
    g
}

fn apply(t: &Option<Vec<[[f64; 3]; 3]>>, e: usize, v: &[f64; 3]) -> [f64; 3] {
    match t {
        None => *v,
        Some(ts) => {
            let b = &ts[e];
            [0, 1, 2].map(|i| b[i][0] * v[0] + b[i][1] * v[1] + b[i][2] * v[2])
        }
    }
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl TvTerm {
    pub fn smoothed(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            tensors: None,
        }
    }

    /// Parallel level set weighting
    /// `B = I - gamma grad k grad k^T / (|grad k|^2 + eta^2)`.
    pub fn weighted(mesh: &Mesh, kappa: &[f64], alpha: f64, beta: f64, gamma: f64) -> Self {
        let grads: Vec<[f64; 3]> = (0..mesh.element_count()).map(|e| element_gradient(mesh, e, kappa)).collect();
        let gmax = grads.iter().map(|g| dot(g, g).sqrt()).fold(0.0, f64::max);
        let eta2 = (REL_ETA * gmax).powi(2);
        let tensors = grads
            .iter()
            .map(|g| {
                let denom = dot(g, g) + eta2;
                let mut b = [[0.0; 3]; 3];
                for i in 0..3 {
                    for j in 0..3 {
                        let outer = if denom > 0.0 { g[i] * g[j] / denom } else { 0.0 };
                        b[i][j] = if i == j { 1.0 } else { 0.0 } - gamma * outer;
                    }
                }
                b
            })
            .collect();
        Self {
            alpha,
            beta,
            tensors: Some(tensors),
        }
    }

    /// Value and gradient with respect to the nodal values.
    pub fn value_and_gradient(&self, mesh: &Mesh, f: &[f64]) -> (f64, Vec<f64>) {
        let mut value = 0.0;
        let mut grad = vec![0.0; f.len()];
        for e in 0..mesh.element_count() {
            let v = element_gradient(mesh, e, f);
            let bv = apply(&self.tensors, e, &v);
            let s = (dot(&v, &bv) + self.beta * self.beta).sqrt();
            let m = mesh.measure(e);
            value += m * s;
            if s > 0.0 {
                let c = self.alpha * m / s;
                for (k, &n) in mesh.element(e).iter().enumerate() {
                    grad[n] += c * dot(&bv, &mesh.basis_gradients(e)[k]);
                }
            }
        }
        (self.alpha * value, grad)
    }

    pub fn value(&self, mesh: &Mesh, f: &[f64]) -> f64 {
        let mut value = 0.0;
        for e in 0..mesh.element_count() {
            let v = element_gradient(mesh, e, f);
            let bv = apply(&self.tensors, e, &v);
            value += mesh.measure(e) * (dot(&v, &bv) + self.beta * self.beta).sqrt();
        }
        self.alpha * value
    }

    /// Adds the lagged-diffusivity Hessian `alpha sum |T| w_T G^T B G`, with
    /// weights frozen at `f`, to `h`. `index[n]` is the unknown of node `n`.
    pub fn add_lagged_hessian(&self, mesh: &Mesh, f: &[f64], index: &[Option<usize>], mut h: MatMut<'_, f64>) {
        for e in 0..mesh.element_count() {
            let v = element_gradient(mesh, e, f);
            let bv = apply(&self.tensors, e, &v);
            let s = (dot(&v, &bv) + self.beta * self.beta).sqrt();
            if s == 0.0 {
                continue;
            }
            let c = self.alpha * mesh.measure(e) / s;
            let el = mesh.element(e);
            let g = mesh.basis_gradients(e);
            for a in 0..el.len() {
                let Some(ia) = index[el[a]] else { continue };
                let bga = apply(&self.tensors, e, &g[a]);
                for b in 0..el.len() {
                    let Some(ib) = index[el[b]] else { continue };
                    h[(ia, ib)] += c * dot(&bga, &g[b]);
                }
            }
        }
    }
}

/// Smoothed TV value and gradient.
pub fn smoothed_tv(field: &ConductivityField, mesh: &Mesh, alpha: f64, beta: f64) -> (f64, Vec<f64>) {
    TvTerm::smoothed(alpha, beta).value_and_gradient(mesh, field)
}

/// Parallel-level-set weighted TV value and gradient.
pub fn weighted_tv(
    field: &ConductivityField,
    kappa: &ConductivityField,
    mesh: &Mesh,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> (f64, Vec<f64>) {
    TvTerm::weighted(mesh, kappa, alpha, beta, gamma).value_and_gradient(mesh, field)
}
