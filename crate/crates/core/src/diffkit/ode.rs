use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Classical fixed-step RK4 on the tape. Returns `z_1 ..= z_n`; gradients flow
/// through every stage, so this differentiates the discrete scheme exactly.
pub fn rk4_integrate<F>(g: &mut Graph, mut f: F, z0: Var, n_steps: usize, h: f64) -> Result<Vec<Var>>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    if n_steps == 0 {
        return Err(Error::Config("rk4 needs at least one step".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("rk4 step size must be positive, got {h}")));
    }
    let mut z = z0;
    let mut out = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let k1 = f(g, z)?;
        let a = g.add_scaled(z, k1, h / 2.0)?;
        let k2 = f(g, a)?;
        let b = g.add_scaled(z, k2, h / 2.0)?;
        let k3 = f(g, b)?;
        let c = g.add_scaled(z, k3, h)?;
        let k4 = f(g, c)?;
        let s = g.add_scaled(k1, k2, 2.0)?;
        let s = g.add_scaled(s, k3, 2.0)?;
        let s = g.add(s, k4)?;
        z = g.add_scaled(z, s, h / 6.0)?;
        if g.value(z).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("rk4 produced a non-finite state at step {}", step + 1)));
        }
        out.push(z);
    }
    Ok(out)
}
