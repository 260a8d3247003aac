use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{contract_err, Result};

/// A single parameter coordinate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

/// Central-difference derivative of `f` at every requested coordinate.
///
/// The store is restored exactly after each probe.
pub fn finite_diff_grad<F>(
    mut f: F,
    store: &mut ParamStore<f64>,
    coords: &[Coord],
    h: f64,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(contract_err!("finite-difference step must be positive, got {h}"));
    }
    let mut out = Vec::with_capacity(coords.len());
    for c in coords {
        let orig = store.value(&c.name)?.data()[c.index];
        store.get_mut(&c.name)?.value.data_mut()[c.index] = orig + h;
        let plus = f(store)?;
        store.get_mut(&c.name)?.value.data_mut()[c.index] = orig - h;
        let minus = f(store)?;
        store.get_mut(&c.name)?.value.data_mut()[c.index] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Every coordinate of every parameter.
pub fn all_coords(store: &ParamStore<f64>) -> Vec<Coord> {
    store
        .iter()
        .flat_map(|(name, p)| {
            (0..p.value.numel()).map(move |index| Coord {
                name: name.to_string(),
                index,
            })
        })
        .collect()
}

/// `count` coordinates drawn uniformly over parameters, then over entries.
///
/// Sampling by parameter first keeps small tensors (biases, norms, tokens)
/// represented next to the large weight matrices.
pub fn sample_coords(
    store: &ParamStore<f64>,
    count: usize,
    seed: u64,
    filter: impl Fn(&str) -> bool,
) -> Vec<Coord> {
    let names: Vec<(&str, usize)> = store
        .iter()
        .filter(|(n, p)| filter(n) && p.value.numel() > 0)
        .map(|(n, p)| (n, p.value.numel()))
        .collect();
    if names.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (name, n) = names[rng.gen_range(0..names.len())];
            Coord {
                name: name.to_string(),
                index: rng.gen_range(0..n),
            }
        })
        .collect()
}

/// Relative error used by all gradient checks: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_derivative() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let coords = all_coords(&s);
        let g = finite_diff_grad(
            |st| Ok(st.value("w")?.data().iter().map(|v| v * v).sum()),
            &mut s,
            &coords,
            1e-6,
        )
        .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert_eq!(s.value("w").unwrap().item(), 3.0);
    }

    #[test]
    fn zero_step_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[1], &[3.0]).unwrap()).unwrap();
        let coords = all_coords(&s);
        assert!(finite_diff_grad(|_| Ok(0.0), &mut s, &coords, 0.0).is_err());
    }
}
