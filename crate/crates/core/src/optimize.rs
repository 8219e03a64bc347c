//! One-dimensional optimization on bounded intervals.

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for a minimum of a unimodal `f` on `[a, b]`.
/// Returns `(argmin, min)`.
pub fn golden_section_min<F: FnMut(f64) -> f64>(mut f: F, mut a: f64, mut b: f64, xtol: f64) -> (f64, f64) {
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..400 {
        if (b - a).abs() <= xtol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let (x, fx) = if fc <= fd { (c, fc) } else { (d, fd) };
    // The endpoints are never evaluated by the interior probes; include the
    // left one so boundary minima (e.g. at 0) are reported exactly.
    let fa = f(a);
    if fa <= fx {
        (a, fa)
    } else {
        (x, fx)
    }
}

/// Outcome of [`grid_refine_min`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMin {
    pub x: f64,
    pub value: f64,
    /// Number of interior local minima seen on the coarse grid.
    pub local_minima: usize,
}

/// Minimize `f` over `grid` (increasing), then refine every coarse local
/// minimum by golden section between its neighbours and keep the best.
/// A single coarse local minimum is the numerical unimodality check.
pub fn grid_refine_min<F: FnMut(f64) -> f64>(mut f: F, grid: &[f64], xtol: f64) -> GridMin {
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    let n = grid.len();
    let mut candidates = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || values[i] <= values[i - 1];
        let right_ok = i + 1 == n || values[i] <= values[i + 1];
        if left_ok && right_ok && values[i].is_finite() {
            candidates.push(i);
        }
    }
    let mut best = GridMin {
        x: f64::NAN,
        value: f64::INFINITY,
        local_minima: candidates.len(),
    };
    for &i in &candidates {
        let lo = grid[i.saturating_sub(1)];
        let hi = grid[(i + 1).min(n - 1)];
        let (x, v) = if hi > lo {
            golden_section_min(&mut f, lo, hi, xtol * hi.abs().max(1.0))
        } else {
            (grid[i], values[i])
        };
        let (x, v) = if values[i] < v { (grid[i], values[i]) } else { (x, v) };
        if v < best.value {
            best.x = x;
            best.value = v;
        }
    }
    best
}

/// Bisection for the switch point of a monotone predicate: `pred(lo)` is
/// false and `pred(hi)` is true. Returns the final `(lo, hi)`.
pub fn bisect_predicate<P: FnMut(f64) -> bool>(mut pred: P, mut lo: f64, mut hi: f64, xtol: f64) -> (f64, f64) {
    for _ in 0..300 {
        if hi - lo <= xtol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_vertex() {
        let (x, v) = golden_section_min(|x| (x - 1.3) * (x - 1.3) + 2.0, 0.0, 5.0, 1e-12);
        assert!((x - 1.3).abs() < 1e-7 && (v - 2.0).abs() < 1e-14);
        let (x, _) = golden_section_min(|x| x, 0.0, 5.0, 1e-12);
        assert_eq!(x, 0.0);
    }

    #[test]
    fn grid_refine_reports_multimodality() {
        let f = |x: f64| (x * 3.0).cos() + 0.1 * x;
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let m = grid_refine_min(f, &grid, 1e-12);
        assert!(m.local_minima >= 3);
        assert!((m.x - 1.036_083).abs() < 1e-5, "{m:?}");
    }
}
