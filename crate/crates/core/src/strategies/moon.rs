//! Model-contrastive term.
//!
//! `ℓ_con(z; z_g, z_p) = −log( e^{cos(z,z_g)/τ} / (e^{cos(z,z_g)/τ} + e^{cos(z,z_p)/τ}) )`
//! pulls the local representation `z` toward the global model's `z_g` and
//! away from the previous local model's `z_p`. It equals
//! `softplus((cos(z,z_p) − cos(z,z_g)) / τ)`, which is how it is evaluated.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine similarity and its gradient with respect to `z`. Degenerate
/// (zero-norm) inputs have similarity 0 and zero gradient.
fn cosine_with_grad(z: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
    let nz = dot(z, z).sqrt();
    let na = dot(a, a).sqrt();
    if nz == 0.0 || na == 0.0 {
        return (0.0, vec![0.0; z.len()]);
    }
    let cos = dot(z, a) / (nz * na);
    let grad = z
        .iter()
        .zip(a)
        .map(|(&zi, &ai)| ai / (nz * na) - cos * zi / (nz * nz))
        .collect();
    (cos, grad)
}

pub fn cosine(z: &[f64], a: &[f64]) -> f64 {
    cosine_with_grad(z, a).0
}

pub fn contrastive_loss(z: &[f64], z_global: &[f64], z_prev: &[f64], tau: f64) -> f64 {
    softplus((cosine(z, z_prev) - cosine(z, z_global)) / tau)
}

/// `ℓ_con` and its gradient with respect to `z`.
pub fn contrastive_loss_grad(z: &[f64], z_global: &[f64], z_prev: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let (cos_g, dcos_g) = cosine_with_grad(z, z_global);
    let (cos_p, dcos_p) = cosine_with_grad(z, z_prev);
    let x = (cos_p - cos_g) / tau;
    let weight = sigmoid(x) / tau;
    let grad = dcos_p
        .iter()
        .zip(&dcos_g)
        .map(|(p, g)| weight * (p - g))
        .collect();
    (softplus(x), grad)
}
