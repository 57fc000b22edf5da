use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FilterbankConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

/// Feasibility rule applied after every proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Constraint {
    /// Clip to the box only.
    Box,
    /// Dimensions are `[lo, hi]` pairs: `ns` spectral bands then `nm`
    /// modulation bands. Each band gets `low < high` with a minimum width and
    /// bands are sorted by low edge.
    Filterbank {
        ns: usize,
        nm: usize,
        min_spectral_width_hz: f64,
        min_modulation_width_hz: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub dims: Vec<Dimension>,
    pub constraint: Constraint,
}

pub const SPECTRAL_BOUNDS_HZ: (f64, f64) = (100.0, 9000.0);
pub const MODULATION_BOUNDS_HZ: (f64, f64) = (0.5, 400.0);

impl SearchSpace {
    pub fn boxed(bounds: &[(f64, f64)]) -> Result<Self> {
        let dims = bounds
            .iter()
            .enumerate()
            .map(|(i, &(low, high))| Dimension {
                name: format!("x{i}"),
                low,
                high,
            })
            .collect();
        let s = Self {
            dims,
            constraint: Constraint::Box,
        };
        s.validate()?;
        Ok(s)
    }

    /// The 12-dimensional filterbank edge space for `ns` spectral and `nm`
    /// modulation bands.
    pub fn filterbank(ns: usize, nm: usize) -> Self {
        let mut dims = Vec::with_capacity(2 * (ns + nm));
        for (prefix, count, (low, high)) in [
            ("spectral", ns, SPECTRAL_BOUNDS_HZ),
            ("modulation", nm, MODULATION_BOUNDS_HZ),
        ] {
            for b in 1..=count {
                dims.push(Dimension {
                    name: format!("{prefix}{b}_low"),
                    low,
                    high,
                });
                dims.push(Dimension {
                    name: format!("{prefix}{b}_high"),
                    low,
                    high,
                });
            }
        }
        Self {
            dims,
            constraint: Constraint::Filterbank {
                ns,
                nm,
                min_spectral_width_hz: 10.0,
                min_modulation_width_hz: 0.5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::Config("search space has no dimensions".into()));
        }
        for d in &self.dims {
            if !(d.low < d.high) || !d.low.is_finite() || !d.high.is_finite() {
                return Err(Error::Config(format!(
                    "dimension {} has empty bounds",
                    d.name
                )));
            }
        }
        if let Constraint::Filterbank {
            ns,
            nm,
            min_spectral_width_hz,
            min_modulation_width_hz,
        } = self.constraint
        {
            if self.dims.len() != 2 * (ns + nm) {
                return Err(Error::Config(format!(
                    "filterbank space needs {} dimensions, got {}",
                    2 * (ns + nm),
                    self.dims.len()
                )));
            }
            for (i, d) in self.dims.iter().enumerate() {
                let w = if i < 2 * ns {
                    min_spectral_width_hz
                } else {
                    min_modulation_width_hz
                };
                if d.high - d.low < w {
                    return Err(Error::Config(format!(
                        "dimension {} narrower than {w}",
                        d.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.dims)
            .map(|(v, d)| (v - d.low) / (d.high - d.low))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(&self.dims)
            .map(|(v, d)| d.low + v.clamp(0.0, 1.0) * (d.high - d.low))
            .collect()
    }

    /// Project a point onto the feasible set.
    pub fn repair(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x
            .iter()
            .zip(&self.dims)
            .map(|(v, d)| v.clamp(d.low, d.high))
            .collect();
        if let Constraint::Filterbank {
            ns,
            min_spectral_width_hz,
            min_modulation_width_hz,
            ..
        } = self.constraint
        {
            let split = 2 * ns;
            repair_bands(
                &mut out[..split],
                &self.dims[..split],
                min_spectral_width_hz,
            );
            repair_bands(
                &mut out[split..],
                &self.dims[split..],
                min_modulation_width_hz,
            );
        }
        out
    }

    /// Map a feasible point of a filterbank space to its configuration.
    pub fn to_filterbank(&self, x: &[f64], filter_order: usize) -> Result<FilterbankConfig> {
        let Constraint::Filterbank { ns, nm, .. } = self.constraint else {
            return Err(Error::Config(
                "search space does not describe a filterbank".into(),
            ));
        };
        let x = self.repair(x);
        let pairs: Vec<(f64, f64)> = x.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        Ok(FilterbankConfig {
            ns,
            nm,
            spectral_edges: pairs[..ns].to_vec(),
            modulation_edges: pairs[ns..].to_vec(),
            filter_order,
        })
    }

    pub fn from_filterbank(cfg: &FilterbankConfig) -> Vec<f64> {
        cfg.spectral_edges
            .iter()
            .chain(&cfg.modulation_edges)
            .flat_map(|&(lo, hi)| [lo, hi])
            .collect()
    }
}

fn repair_bands(x: &mut [f64], dims: &[Dimension], min_width: f64) {
    let mut bands: Vec<(f64, f64)> = x
        .chunks_exact(2)
        .zip(dims.chunks_exact(2))
        .map(|(v, d)| {
            let floor = d[0].low.min(d[1].low);
            let ceil = d[0].high.max(d[1].high);
            let mut lo = v[0].min(v[1]);
            let mut hi = v[0].max(v[1]);
            if hi - lo < min_width {
                hi = lo + min_width;
                if hi > ceil {
                    hi = ceil;
                    lo = (hi - min_width).max(floor);
                }
            }
            (lo, hi)
        })
        .collect();
    bands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for (slot, (lo, hi)) in x.chunks_exact_mut(2).zip(bands) {
        slot[0] = lo;
        slot[1] = hi;
    }
}

/// `n` points in the unit cube, one per stratum in every dimension.
pub fn latin_hypercube(n: usize, dims: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; dims]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    #[allow(clippy::needless_range_loop)]
    for d in 0..dims {
        strata.shuffle(rng);
        for (i, &s) in strata.iter().enumerate() {
            points[i][d] = (s as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    points
}

/// Latin hypercube design mapped into the space and repaired.
pub fn initial_design(space: &SearchSpace, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        return Err(Error::Argument(format!(
            "initial design needs n >= 2, got {n}"
        )));
    }
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(latin_hypercube(n, space.len(), &mut rng)
        .into_iter()
        .map(|u| space.repair(&space.from_unit(&u)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feasible(space: &SearchSpace, x: &[f64]) -> bool {
        let cfg = space.to_filterbank(x, 4).unwrap();
        cfg.validate(20_000).is_ok()
            && cfg.spectral_edges.iter().all(|(l, h)| h - l >= 10.0 - 1e-9)
            && cfg
                .modulation_edges
                .iter()
                .all(|(l, h)| h - l >= 0.5 - 1e-9)
    }

    #[test]
    fn lhs_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = latin_hypercube(10, 12, &mut rng);
        for d in 0..12 {
            let mut deciles: Vec<usize> = pts.iter().map(|p| (p[d] * 10.0) as usize).collect();
            deciles.sort();
            assert_eq!(deciles, (0..10).collect::<Vec<_>>());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = latin_hypercube(2, 12, &mut rng);
        for (a, b) in pts[0].iter().zip(&pts[1]) {
            assert!((*a < 0.5) != (*b < 0.5));
        }
    }

    #[test]
    fn design_is_seeded_and_feasible() {
        let space = SearchSpace::filterbank(3, 3);
        let a = initial_design(&space, 10, 5).unwrap();
        assert_eq!(a, initial_design(&space, 10, 5).unwrap());
        assert_eq!(a.len(), 10);
        assert!(a.iter().all(|x| feasible(&space, x)));
        assert!(initial_design(&space, 1, 5).is_err());
    }

    #[test]
    fn repair_fixes_inverted_narrow_and_unsorted_bands() {
        let space = SearchSpace::filterbank(3, 3);
        let raw = [
            5000.0, 4000.0, 150.0, 152.0, 9000.0, 9000.0, 300.0, 20.0, 0.5, 0.6, 1.0, 1.0,
        ];
        let x = space.repair(&raw);
        assert!(feasible(&space, &x));
        assert_eq!(&x[..2], &[150.0, 160.0]);
        assert_eq!(&x[4..6], &[8990.0, 9000.0]);
        assert_eq!(&x[6..8], &[0.5, 1.0]);
    }

    #[test]
    fn default_filterbank_round_trips() {
        let cfg = FilterbankConfig::default();
        let space = SearchSpace::filterbank(3, 3);
        let x = SearchSpace::from_filterbank(&cfg);
        assert_eq!(x.len(), 12);
        assert_eq!(space.to_filterbank(&x, 4).unwrap(), cfg);
    }
}
