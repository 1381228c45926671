/// Euclidean projection of `v` onto `{y : |y|_1 <= radius, |y|_inf <= bound}`.
///
/// The solution has the form `sign(v_k) clamp(|v_k| - tau, 0, bound)`, with
/// `tau >= 0` the root of a piecewise-linear decreasing function located
/// exactly between consecutive breakpoints.
pub fn project_l1_box(v: &[f64], radius: f64, bound: f64) -> Vec<f64> {
    if radius <= 0.0 || bound <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mass = |tau: f64| -> f64 { v.iter().map(|x| (x.abs() - tau).clamp(0.0, bound)).sum() };
    let shrink = |tau: f64| -> Vec<f64> {
        v.iter().map(|&x| x.signum() * (x.abs() - tau).clamp(0.0, bound)).collect::<Vec<_>>()
    };
    if mass(0.0) <= radius {
        return shrink(0.0);
    }

    let mut knots: Vec<f64> = v
        .iter()
        .flat_map(|x| [x.abs(), x.abs() - bound])
        .filter(|&t| t > 0.0)
        .collect();
    knots.push(0.0);
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    // mass(knots[0] = 0) > radius and mass(max knot) = 0 < radius
    let mut lo = knots[0];
    let mut mass_lo = mass(lo);
    for &hi in &knots[1..] {
        let mass_hi = mass(hi);
        if mass_hi <= radius {
            let tau = lo + (mass_lo - radius) * (hi - lo) / (mass_lo - mass_hi);
            let mut y = shrink(tau);
            // Rescaling absorbs the last ulp of interpolation error.
            let total: f64 = y.iter().map(|x| x.abs()).sum();
            if total > radius {
                let s = radius / total;
                y.iter_mut().for_each(|x| *x *= s);
            }
            return y;
        }
        lo = hi;
        mass_lo = mass_hi;
    }
    vec![0.0; v.len()]
}
