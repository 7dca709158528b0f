//! Fixed-radius pair enumeration: uniform cell list and a brute-force reference.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;

type Key = (i64, i64, i64);

fn key_of(p: &Vector3<f64>, inv: f64) -> Key {
    ((p[0] * inv).floor() as i64, (p[1] * inv).floor() as i64, (p[2] * inv).floor() as i64)
}

/// All pairs `(i, j)`, `i < j`, with `|p_i - p_j| ≤ radius`, sorted.
pub fn pairs_within(points: &[Vector3<f64>], radius: f64) -> Vec<(usize, usize)> {
    if points.len() < 2 || !(radius > 0.0) {
        return Vec::new();
    }
    let inv = 1.0 / radius;
    let r2 = radius * radius;
    let mut order: Vec<(Key, usize)> = points.iter().enumerate().map(|(i, p)| (key_of(p, inv), i)).collect();
    order.sort_unstable();
    let mut cells: HashMap<Key, (usize, usize)> = HashMap::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || order[i].0 != order[start].0 {
            cells.insert(order[start].0, (start, i));
            start = i;
        }
    }
    let keys: Vec<(Key, (usize, usize))> = {
        let mut k: Vec<_> = cells.iter().map(|(k, v)| (*k, *v)).collect();
        k.sort_unstable();
        k
    };
    let mut pairs: Vec<(usize, usize)> = keys
        .par_iter()
        .flat_map_iter(|&(k, (a0, a1))| {
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(&(b0, b1)) = cells.get(&(k.0 + dx, k.1 + dy, k.2 + dz)) else {
                            continue;
                        };
                        for &(_, i) in &order[a0..a1] {
                            for &(_, j) in &order[b0..b1] {
                                if i < j && (points[i] - points[j]).norm_squared() <= r2 {
                                    out.push((i, j));
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// O(n²) reference enumeration with the same predicate.
pub fn pairs_within_brute(points: &[Vector3<f64>], radius: f64) -> Vec<(usize, usize)> {
    let r2 = radius * radius;
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if (points[i] - points[j]).norm_squared() <= r2 {
                out.push((i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(raw: &[(f64, f64, f64)]) -> Vec<Vector3<f64>> {
        raw.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect()
    }

    #[test]
    fn trivial_inputs() {
        assert!(pairs_within(&[], 1.0).is_empty());
        assert!(pairs_within(&[Vector3::zeros()], 1.0).is_empty());
        let p = vec![Vector3::zeros(), Vector3::zeros()];
        assert_eq!(pairs_within(&p, 0.1), vec![(0, 1)]);
    }

    #[test]
    fn boundary_distance_is_included() {
        let p = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.5, 0.0, 0.0)];
        assert_eq!(pairs_within(&p, 0.5), pairs_within_brute(&p, 0.5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cell_list_equals_brute_force(
            raw in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 0..512),
            radius in 0.05f64..1.5,
        ) {
            let p = cloud(&raw);
            prop_assert_eq!(pairs_within(&p, radius), pairs_within_brute(&p, radius));
        }
    }
}
