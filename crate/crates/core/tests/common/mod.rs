#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// `(re, im)` pairs.
pub type Spectrum = Vec<(f64, f64)>;

fn gaussian_matrix<R: Rng>(rng: &mut R, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng))
}

fn well_conditioned<R: Rng>(rng: &mut R, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    loop {
        let v = gaussian_matrix(rng, d);
        let sv = v.clone().svd(false, false).singular_values;
        if sv.min() > 0.0 && sv.max() / sv.min() < 200.0 {
            let inv = v.clone().try_inverse().unwrap();
            return (v, inv);
        }
    }
}

/// `V D V⁻¹` with `D` real block diagonal. Real parts are drawn with
/// magnitude in `[gap, 3]`; `sign` picks them (`Some(true)` all positive).
pub fn matrix_with_spectrum<R: Rng>(
    rng: &mut R,
    d: usize,
    gap: f64,
    sign: Option<bool>,
) -> (DMatrix<f64>, Spectrum) {
    let mut block = DMatrix::<f64>::zeros(d, d);
    let mut spectrum = Vec::with_capacity(d);
    let mut i = 0;
    while i < d {
        let mag = rng.random_range(gap..3.0);
        let positive = sign.unwrap_or_else(|| rng.random_bool(0.5));
        let re = if positive { mag } else { -mag };
        if i + 1 < d && rng.random_bool(0.4) {
            let im = rng.random_range(0.1..2.0);
            block[(i, i)] = re;
            block[(i + 1, i + 1)] = re;
            block[(i, i + 1)] = im;
            block[(i + 1, i)] = -im;
            spectrum.push((re, im));
            spectrum.push((re, -im));
            i += 2;
        } else {
            block[(i, i)] = re;
            spectrum.push((re, 0.0));
            i += 1;
        }
    }
    let (v, v_inv) = well_conditioned(rng, d);
    (&v * block * v_inv, spectrum)
}

/// Characteristic polynomial coefficients `[1, c_1, ..., c_d]` of
/// `det(zI − A)` by the Faddeev–LeVerrier recursion.
pub fn char_poly(a: &DMatrix<f64>) -> Vec<f64> {
    let d = a.nrows();
    let mut coeffs = vec![1.0];
    let mut m = DMatrix::<f64>::zeros(d, d);
    let id = DMatrix::<f64>::identity(d, d);
    for k in 1..=d {
        m = a * &m + &id * coeffs[k - 1];
        let c = -(a * &m).trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// All roots of a monic polynomial by Durand–Kerner iteration.
pub fn poly_roots(coeffs: &[f64]) -> Spectrum {
    #[derive(Clone, Copy)]
    struct C(f64, f64);
    let mul = |a: C, b: C| C(a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0);
    let sub = |a: C, b: C| C(a.0 - b.0, a.1 - b.1);
    let div = |a: C, b: C| {
        let n = b.0 * b.0 + b.1 * b.1;
        C((a.0 * b.0 + a.1 * b.1) / n, (a.1 * b.0 - a.0 * b.1) / n)
    };
    let eval = |z: C| coeffs.iter().fold(C(0.0, 0.0), |acc, &c| {
        let t = mul(acc, z);
        C(t.0 + c, t.1)
    });
    let deg = coeffs.len() - 1;
    let radius = 1.0 + coeffs[1..].iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut z: Vec<C> = (0..deg)
        .map(|k| {
            let th = 0.4 + 2.0 * std::f64::consts::PI * k as f64 / deg as f64;
            C(radius * th.cos(), radius * th.sin())
        })
        .collect();
    for _ in 0..5000 {
        let mut delta = 0.0f64;
        for i in 0..deg {
            let mut den = C(1.0, 0.0);
            for j in 0..deg {
                if i != j {
                    den = mul(den, sub(z[i], z[j]));
                }
            }
            let step = div(eval(z[i]), den);
            z[i] = sub(z[i], step);
            delta = delta.max(step.0.hypot(step.1));
        }
        if delta < 1e-15 * radius {
            break;
        }
    }
    z.into_iter().map(|c| (c.0, c.1)).collect()
}

/// Largest distance between two spectra under a greedy nearest matching.
pub fn spectrum_distance(a: &Spectrum, b: &Spectrum) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for &(re, im) in a {
        let (j, dist) = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, &(r2, i2))| (j, (re - r2).hypot(im - i2)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        used[j] = true;
        worst = worst.max(dist);
    }
    worst
}
