//! Central finite-difference verification of tape gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor of the relative error; below it both sides are treated as zero.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Picks `count` distinct (name, flat index) scalars among the given tensors,
/// spreading picks over parameters before repeating any.
pub fn sample_probes<R: Rng + ?Sized>(
    shapes: &BTreeMap<String, Tensor>,
    count: usize,
    rng: &mut R,
) -> Vec<(String, usize)> {
    let mut names: Vec<&String> = shapes.keys().filter(|n| shapes[*n].numel() > 0).collect();
    names.shuffle(rng);
    let mut picks = Vec::with_capacity(count);
    let mut round = 0;
    while picks.len() < count && !names.is_empty() {
        for name in &names {
            if picks.len() == count {
                break;
            }
            let n = shapes[*name].numel();
            if round >= n {
                continue;
            }
            let idx = rng.gen_range(0..n);
            if !picks
                .iter()
                .any(|(p, i): &(String, usize)| p == *name && *i == idx)
            {
                picks.push(((*name).clone(), idx));
            }
        }
        round += 1;
        if round > 64 {
            break;
        }
    }
    picks
}

/// Compares `analytic` gradients against `(f(p + h) - f(p - h)) / 2h` at each probe.
pub fn check<F>(
    store: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    probes: &[(String, usize)],
    step: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::with_capacity(probes.len());
    for (name, index) in probes {
        let a = analytic
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.clone()))?
            .data()[*index];
        let orig = work.require(name)?.data()[*index];
        work.get_mut(name).unwrap().data_mut()[*index] = orig + step;
        let plus = f(&work)?;
        work.get_mut(name).unwrap().data_mut()[*index] = orig - step;
        let minus = f(&work)?;
        work.get_mut(name).unwrap().data_mut()[*index] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        out.push(Probe {
            name: name.clone(),
            index: *index,
            analytic: a,
            numeric,
            rel_err: rel_err(a, numeric),
        });
    }
    Ok(GradCheckReport { probes: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor_handles_zero_pairs() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
    }

    #[test]
    fn quadratic_gradient_checks() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap());
        let f = |s: &ParamStore| Ok(s.require("w")?.data().iter().map(|v| v * v * v).sum());
        let mut g = BTreeMap::new();
        g.insert(
            "w".to_string(),
            store.get("w").unwrap().map(|v| 3.0 * v * v),
        );
        let probes: Vec<_> = (0..3).map(|i| ("w".to_string(), i)).collect();
        let rep = check(&store, &g, &probes, 1e-3, f).unwrap();
        assert!(rep.passes(1e-5), "{:?}", rep);
    }

    #[test]
    fn probes_are_distinct() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut shapes = BTreeMap::new();
        shapes.insert("a".to_string(), Tensor::zeros(&[4]));
        shapes.insert("b".to_string(), Tensor::zeros(&[50]));
        let p = sample_probes(&shapes, 16, &mut rng);
        assert_eq!(p.len(), 16);
        for (i, x) in p.iter().enumerate() {
            assert!(!p[i + 1..].contains(x));
        }
    }
}
