//! Finite-activity singular controls: jump atoms plus piecewise-constant
//! rate segments, the constrained class acting only on the first `d0`
//! coordinates, and the projection between the two classes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SglError};
use crate::rng::derive_seed;

const UNIT_TOL: f64 = 1e-12;

/// Absolutely continuous part of the control on `[start, end)`:
/// pushes along `direction` at constant `rate`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub direction: Vec<f64>,
    pub rate: f64,
}

/// A jump of the control measure: an instantaneous push of `size` along
/// `direction`. An atom at time 0 models the possible jump from the
/// pre-initial state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    pub time: f64,
    pub direction: Vec<f64>,
    pub size: f64,
}

/// Finite-activity representation of a singular control pair `(n, nu)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlPath {
    pub horizon: f64,
    pub segments: Vec<Segment>,
    pub atoms: Vec<Atom>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

impl ControlPath {
    pub fn empty(horizon: f64) -> Self {
        ControlPath {
            horizon,
            segments: Vec::new(),
            atoms: Vec::new(),
        }
    }

    pub fn new(horizon: f64, segments: Vec<Segment>, atoms: Vec<Atom>) -> Result<Self> {
        let path = ControlPath {
            horizon,
            segments,
            atoms,
        };
        path.validate()?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon <= 0.0 {
            return Err(SglError::InvalidArgument("horizon must be positive".into()));
        }
        let mut prev_end = 0.0;
        for s in &self.segments {
            if s.start < prev_end || s.end <= s.start || s.end > self.horizon {
                return Err(SglError::InvalidArgument(
                    "segments must be disjoint, increasing and inside [0, horizon]".into(),
                ));
            }
            if s.rate < 0.0 {
                return Err(SglError::InvalidArgument("segment rate must be >= 0".into()));
            }
            if (norm(&s.direction) - 1.0).abs() > UNIT_TOL {
                return Err(SglError::InvalidArgument(
                    "segment direction must be a unit vector".into(),
                ));
            }
            prev_end = s.end;
        }
        let mut prev_t = 0.0;
        for a in &self.atoms {
            if a.time < prev_t || a.time > self.horizon {
                return Err(SglError::InvalidArgument(
                    "atom times must be nondecreasing in [0, horizon]".into(),
                ));
            }
            if a.size < 0.0 {
                return Err(SglError::InvalidArgument("atom size must be >= 0".into()));
            }
            if (norm(&a.direction) - 1.0).abs() > UNIT_TOL {
                return Err(SglError::InvalidArgument(
                    "atom direction must be a unit vector".into(),
                ));
            }
            prev_t = a.time;
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.segments
            .first()
            .map(|s| s.direction.len())
            .or_else(|| self.atoms.first().map(|a| a.direction.len()))
    }

    /// Total accumulated control `nu_t` (right-continuous: atoms at `t`
    /// are included).
    pub fn nu_total(&self, t: f64) -> f64 {
        debug_assert!((0.0..=self.horizon).contains(&t));
        let ac: f64 = self
            .segments
            .iter()
            .map(|s| s.rate * (t.min(s.end) - s.start).max(0.0))
            .sum();
        let jumps: f64 = self
            .atoms
            .iter()
            .filter(|a| a.time <= t)
            .map(|a| a.size)
            .sum();
        ac + jumps
    }

    /// Whether all directions lie in the constrained class: the last
    /// `d - d0` entries are exactly zero and the first block has norm 1.
    pub fn is_constrained(&self, d0: usize) -> bool {
        let chk = |dir: &[f64]| {
            dir.iter().skip(d0).all(|&v| v == 0.0)
                && (norm(&dir[..d0.min(dir.len())]) - 1.0).abs() <= UNIT_TOL
        };
        self.segments.iter().all(|s| chk(&s.direction)) && self.atoms.iter().all(|a| chk(&a.direction))
    }

    /// Pathwise surrogate of the bounded-expectation class: `nu_T <= K2 (1 + |x|)`.
    pub fn check_opt_class(&self, x: &[f64], k2: f64) -> bool {
        debug_assert!(k2 > 0.0);
        self.nu_total(self.horizon) <= k2 * (1.0 + norm(x))
    }
}

/// Projects an unconstrained control onto the constrained class: the
/// first-block component of each direction is renormalised and the
/// measure rescaled by `|n_[d0]|`, so the first `d0` coordinates of the
/// accumulated control are unchanged.
pub fn project_control(path: &ControlPath, d0: usize) -> ControlPath {
    let proj = |dir: &[f64], weight: f64| -> (Vec<f64>, f64) {
        let d = dir.len();
        let head = norm(&dir[..d0.min(d)]);
        let mut out = vec![0.0; d];
        if head == 0.0 {
            out[0] = 1.0;
            (out, 0.0)
        } else {
            for i in 0..d0.min(d) {
                out[i] = dir[i] / head;
            }
            (out, weight * head)
        }
    };
    let segments = path
        .segments
        .iter()
        .map(|s| {
            let (direction, rate) = proj(&s.direction, s.rate);
            Segment {
                start: s.start,
                end: s.end,
                direction,
                rate,
            }
        })
        .collect();
    let atoms = path
        .atoms
        .iter()
        .map(|a| {
            let (direction, size) = proj(&a.direction, a.size);
            Atom {
                time: a.time,
                direction,
                size,
            }
        })
        .collect();
    ControlPath {
        horizon: path.horizon,
        segments,
        atoms,
    }
}

/// `n^gamma`: identity on the first `d0` entries, the last `d - d0`
/// entries scaled by `gamma`.
pub fn gamma_weight(direction: &[f64], d0: usize, gamma: f64) -> Vec<f64> {
    direction
        .iter()
        .enumerate()
        .map(|(i, &v)| if i < d0 { v } else { gamma * v })
        .collect()
}

/// Configuration for randomized control batteries used in test harnesses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatteryConfig {
    pub d: usize,
    /// When set, directions are confined to the first `d0` coordinates.
    pub d0: Option<usize>,
    pub max_atoms: usize,
    pub max_segments: usize,
    pub max_atom_size: f64,
    pub max_rate: f64,
}

/// Draws a random admissible control path. Deterministic in
/// `(config, horizon, seed, index)`.
pub fn random_control(cfg: &BatteryConfig, horizon: f64, seed: u64, index: u64) -> ControlPath {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "battery", index));
    let free_dims = cfg.d0.unwrap_or(cfg.d);
    let draw_dir = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let mut v = vec![0.0; cfg.d];
            for coord in v.iter_mut().take(free_dims) {
                *coord = rng.sample::<f64, _>(StandardNormal);
            }
            let n = norm(&v);
            if n > 1e-9 {
                for coord in v.iter_mut() {
                    *coord /= n;
                }
                return v;
            }
        }
    };

    let n_atoms = rng.gen_range(0..=cfg.max_atoms);
    let mut times: Vec<f64> = (0..n_atoms)
        .map(|_| rng.gen_range(0.0..horizon))
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let atoms = times
        .into_iter()
        .map(|time| Atom {
            time,
            direction: draw_dir(&mut rng),
            size: rng.gen_range(0.0..cfg.max_atom_size),
        })
        .collect();

    let n_segs = rng.gen_range(0..=cfg.max_segments);
    let mut cuts: Vec<f64> = (0..2 * n_segs)
        .map(|_| rng.gen_range(0.0..horizon))
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let segments = cuts
        .chunks(2)
        .filter(|c| c[1] > c[0] + 1e-9)
        .map(|c| Segment {
            start: c[0],
            end: c[1],
            direction: draw_dir(&mut rng),
            rate: rng.gen_range(0.0..cfg.max_rate),
        })
        .collect();

    ControlPath {
        horizon,
        segments,
        atoms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(time: f64, direction: Vec<f64>, size: f64) -> Atom {
        Atom {
            time,
            direction,
            size,
        }
    }

    #[test]
    fn nu_total_cases() {
        let empty = ControlPath::empty(1.0);
        assert_eq!(empty.nu_total(0.7), 0.0);

        let jump0 = ControlPath::new(1.0, vec![], vec![atom(0.0, vec![1.0], 1.0)]).unwrap();
        assert_eq!(jump0.nu_total(0.0), 1.0); // right-continuity at 0

        let mixed = ControlPath::new(
            1.0,
            vec![Segment {
                start: 0.0,
                end: 1.0,
                direction: vec![1.0],
                rate: 2.0,
            }],
            vec![atom(0.5, vec![1.0], 0.5)],
        )
        .unwrap();
        assert!((mixed.nu_total(0.75) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn projection_matches_formula() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let p = ControlPath::new(1.0, vec![], vec![atom(0.3, vec![s, s], 1.0)]).unwrap();
        let q = project_control(&p, 1);
        assert!((q.atoms[0].direction[0] - 1.0).abs() < 1e-12);
        assert_eq!(q.atoms[0].direction[1], 0.0);
        assert!((q.atoms[0].size - s).abs() < 1e-12);
    }

    #[test]
    fn projection_zero_head_branch() {
        let p = ControlPath::new(1.0, vec![], vec![atom(0.3, vec![0.0, 1.0], 1.0)]).unwrap();
        let q = project_control(&p, 1);
        assert_eq!(q.atoms[0].direction, vec![1.0, 0.0]);
        assert_eq!(q.atoms[0].size, 0.0);
    }

    #[test]
    fn projection_is_idempotent_on_constrained_paths() {
        let p = ControlPath::new(1.0, vec![], vec![atom(0.3, vec![1.0, 0.0], 0.7)]).unwrap();
        assert!(p.is_constrained(1));
        let q = project_control(&p, 1);
        assert!((q.atoms[0].size - 0.7).abs() < 1e-12);
        assert!((q.atoms[0].direction[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projected_measure_never_exceeds_original() {
        let cfg = BatteryConfig {
            d: 3,
            d0: None,
            max_atoms: 4,
            max_segments: 3,
            max_atom_size: 2.0,
            max_rate: 3.0,
        };
        for i in 0..20 {
            let p = random_control(&cfg, 1.0, 99, i);
            let q = project_control(&p, 2);
            for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
                assert!(q.nu_total(t) <= p.nu_total(t) + 1e-12);
            }
        }
    }

    #[test]
    fn accumulated_first_block_is_preserved() {
        // integral of n d nu vs n-bar d nu-bar over the whole horizon
        let cfg = BatteryConfig {
            d: 3,
            d0: None,
            max_atoms: 5,
            max_segments: 3,
            max_atom_size: 1.5,
            max_rate: 2.0,
        };
        let d0 = 2;
        for i in 0..20 {
            let p = random_control(&cfg, 1.0, 7, i);
            let q = project_control(&p, d0);
            let acc = |path: &ControlPath| -> Vec<f64> {
                let mut v = vec![0.0; 3];
                for s in &path.segments {
                    for k in 0..3 {
                        v[k] += s.direction[k] * s.rate * (s.end - s.start);
                    }
                }
                for a in &path.atoms {
                    for k in 0..3 {
                        v[k] += a.direction[k] * a.size;
                    }
                }
                v
            };
            let a = acc(&p);
            let b = acc(&q);
            for k in 0..d0 {
                assert!((a[k] - b[k]).abs() < 1e-12, "coordinate {k}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn gamma_weight_cases() {
        assert_eq!(gamma_weight(&[0.0, 1.0], 1, 0.5), vec![0.0, 0.5]);
        assert_eq!(gamma_weight(&[0.6, 0.8], 1, 1.0), vec![0.6, 0.8]);
        assert_eq!(gamma_weight(&[0.6, 0.8], 1, 0.0), vec![0.6, 0.0]);
    }

    #[test]
    fn opt_class_check() {
        let empty = ControlPath::empty(1.0);
        assert!(empty.check_opt_class(&[0.0], 0.1));
        let p = ControlPath::new(1.0, vec![], vec![atom(0.0, vec![1.0], 5.0)]).unwrap();
        assert!(!p.check_opt_class(&[0.0], 4.0)); // 5 > 4
        assert!(p.check_opt_class(&[1.0], 3.0)); // 5 <= 6
    }

    #[test]
    fn json_round_trip() {
        let p = ControlPath::new(
            1.0,
            vec![Segment {
                start: 0.1,
                end: 0.4,
                direction: vec![1.0, 0.0],
                rate: 1.5,
            }],
            vec![atom(0.2, vec![0.0, 1.0], 0.3)],
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let q: ControlPath = serde_json::from_str(&s).unwrap();
        q.validate().unwrap();
        assert_eq!(q.atoms.len(), 1);
        assert_eq!(q.segments.len(), 1);
    }

    #[test]
    fn battery_respects_constraint_flag() {
        let cfg = BatteryConfig {
            d: 2,
            d0: Some(1),
            max_atoms: 3,
            max_segments: 2,
            max_atom_size: 1.0,
            max_rate: 1.0,
        };
        for i in 0..10 {
            let p = random_control(&cfg, 1.0, 3, i);
            p.validate().unwrap();
            assert!(p.is_constrained(1));
        }
    }
}
