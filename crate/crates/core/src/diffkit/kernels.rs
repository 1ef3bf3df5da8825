//! Dense inner loops for the tape. On x86-64 machines with AVX2 and FMA a
//! fused variant is selected at runtime; results are then deterministic per
//! machine but may differ from the portable path in the last bits.

trait Madd {
    fn madd(a: f64, b: f64, c: f64) -> f64;
}

struct Plain;

impl Madd for Plain {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a * b + c
    }
}

#[cfg(target_arch = "x86_64")]
struct Fused;

#[cfg(target_arch = "x86_64")]
impl Madd for Fused {
    #[inline(always)]
    fn madd(a: f64, b: f64, c: f64) -> f64 {
        a.mul_add(b, c)
    }
}

#[cfg(target_arch = "x86_64")]
fn fused_available() -> bool {
    use std::sync::OnceLock;
    static HAS: OnceLock<bool> = OnceLock::new();
    *HAS.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
}

/// Dot product over the common prefix of `a` and `b`.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { dot_fused(a, b) };
    }
    dot_impl::<Plain>(a, b)
}

/// `out (m x batch) += W (m x k) · X (k x batch)`, all row-major.
pub(crate) fn matmul_acc(out: &mut [f64], w: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: as above.
        return unsafe { matmul_fused(out, w, x, m, k, batch) };
    }
    matmul_impl::<Plain>(out, w, x, m, k, batch)
}

/// `out (m x k) += G (m x batch) · X (k x batch)ᵀ`, all row-major.
pub(crate) fn matmul_nt_acc(out: &mut [f64], g: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    #[cfg(target_arch = "x86_64")]
    if fused_available() {
        // SAFETY: as above.
        return unsafe { matmul_nt_fused(out, g, x, m, k, batch) };
    }
    matmul_nt_impl::<Plain>(out, g, x, m, k, batch)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_fused(a: &[f64], b: &[f64]) -> f64 {
    dot_impl::<Fused>(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_fused(out: &mut [f64], w: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    matmul_impl::<Fused>(out, w, x, m, k, batch)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn matmul_nt_fused(out: &mut [f64], g: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    matmul_nt_impl::<Fused>(out, g, x, m, k, batch)
}

const LANES: usize = 8;

#[inline(always)]
fn dot_impl<M: Madd>(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..LANES {
            acc[t] = M::madd(x[t], y[t], acc[t]);
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = M::madd(*x, *y, s);
    }
    s
}

#[inline(always)]
fn matmul_impl<M: Madd>(out: &mut [f64], w: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    let (w, x) = (&w[..m * k], &x[..k * batch]);
    let full = batch / LANES * LANES;
    for (wrow, orow) in w.chunks_exact(k).zip(out.chunks_exact_mut(batch)) {
        for j in (0..full).step_by(LANES) {
            let mut acc = [0.0; LANES];
            for (&wc, xrow) in wrow.iter().zip(x.chunks_exact(batch)) {
                let xs = &xrow[j..j + LANES];
                for t in 0..LANES {
                    acc[t] = M::madd(wc, xs[t], acc[t]);
                }
            }
            for (o, a) in orow[j..j + LANES].iter_mut().zip(acc) {
                *o += a;
            }
        }
        for j in full..batch {
            let mut acc = 0.0;
            for (&wc, xrow) in wrow.iter().zip(x.chunks_exact(batch)) {
                acc = M::madd(wc, xrow[j], acc);
            }
            orow[j] += acc;
        }
    }
}

#[inline(always)]
fn matmul_nt_impl<M: Madd>(out: &mut [f64], g: &[f64], x: &[f64], m: usize, k: usize, batch: usize) {
    let (g, x) = (&g[..m * batch], &x[..k * batch]);
    for (grow, orow) in g.chunks_exact(batch).zip(out.chunks_exact_mut(k)) {
        for (o, xrow) in orow.iter_mut().zip(x.chunks_exact(batch)) {
            *o += dot_impl::<M>(grow, xrow);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(w: &[f64], x: &[f64], m: usize, k: usize, b: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * b];
        for i in 0..m {
            for j in 0..b {
                out[i * b + j] = (0..k).map(|c| w[i * k + c] * x[c * b + j]).sum();
            }
        }
        out
    }

    #[test]
    fn kernels_match_naive_products() {
        let (m, k) = (5, 7);
        for b in [1, 3, 8, 13, 64] {
            let w: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
            let x: Vec<f64> = (0..k * b).map(|i| ((i * 13 % 17) as f64 - 8.0) / 5.0).collect();
            let mut out = vec![0.0; m * b];
            matmul_acc(&mut out, &w, &x, m, k, b);
            for (a, e) in out.iter().zip(naive(&w, &x, m, k, b)) {
                assert!((a - e).abs() < 1e-12);
            }
            let g: Vec<f64> = (0..m * b).map(|i| ((i * 7 % 9) as f64 - 4.0) / 2.0).collect();
            let mut gw = vec![0.0; m * k];
            matmul_nt_acc(&mut gw, &g, &x, m, k, b);
            for i in 0..m {
                for c in 0..k {
                    let e: f64 = (0..b).map(|j| g[i * b + j] * x[c * b + j]).sum();
                    assert!((gw[i * k + c] - e).abs() < 1e-12);
                }
            }
        }
        assert!((dot(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]) - 32.0).abs() < 1e-15);
    }
}
