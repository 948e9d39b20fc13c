//! Planted-signal slide generator.
//!
//! Every slide is a partially occupied grid. Tumor cells grow as compact,
//! axis-aligned jittered blobs; their features come from the archetype of
//! the slide's tumor type, all other cells from the normal archetype. The
//! typing label is the tumor archetype. The staging label is late iff the
//! tumor fraction of occupied cells exceeds `rho`, so it is independent of
//! the type.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::FeatureGrid;
use crate::model::SampleLabels;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub samples: usize,
    /// Probability that a cell holds tissue.
    pub occupancy: f64,
    /// Tumor blobs per slide are drawn from `1..=max_regions`.
    pub max_regions: usize,
    /// Scale of the archetype vectors.
    pub signal: f64,
    pub noise_std: f64,
    /// Tumor fraction separating early (`<= rho`) from late stage.
    pub rho: f64,
    pub early_ratio: (f64, f64),
    pub late_ratio: (f64, f64),
    /// Probability of the late stage label.
    pub late_fraction: f64,
    /// Probability of the second tumor type.
    pub second_type_fraction: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            rows: 16,
            cols: 16,
            dim: 32,
            samples: 200,
            occupancy: 0.85,
            max_regions: 3,
            signal: 1.0,
            noise_std: 2.0,
            rho: 0.3,
            early_ratio: (0.1, 0.28),
            late_ratio: (0.32, 0.55),
            late_fraction: 0.5,
            second_type_fraction: 0.5,
            folds: 5,
            seed: 0,
        }
    }
}

/// Late stage (1) iff the tumor fraction exceeds `rho`; a fraction of
/// exactly `rho` is early.
pub fn stage_of(tumor: usize, occupied: usize, rho: f64) -> usize {
    usize::from(tumor as f64 / occupied as f64 > rho)
}

/// Node kinds written into the generated masks and archetype table.
const NORMAL: usize = 0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rows", self.rows),
            ("cols", self.cols),
            ("dim", self.dim),
            ("samples", self.samples),
            ("max_regions", self.max_regions),
            ("folds", self.folds),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.occupancy > 0.0 && self.occupancy <= 1.0) {
            return Err(Error::config("occupancy must lie in (0, 1]"));
        }
        if !unit(self.late_fraction) || !unit(self.second_type_fraction) {
            return Err(Error::config("label fractions must lie in [0, 1]"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite() && self.signal.is_finite()) {
            return Err(Error::config("noise_std must be finite and >= 0"));
        }
        let (e0, e1) = self.early_ratio;
        let (l0, l1) = self.late_ratio;
        if !(0.0 < e0 && e0 <= e1 && e1 <= self.rho && self.rho < l0 && l0 <= l1) {
            return Err(Error::config(
                "need 0 < early_ratio.0 <= early_ratio.1 <= rho < late_ratio.0 <= late_ratio.1",
            ));
        }
        if l1 > 1.0 {
            return Err(Error::config("late tumor ratio exceeds the whole grid"));
        }
        Ok(())
    }
}

/// Generates the dataset. A pure function of `spec`: the archetypes come
/// from stream 0 of the seeded generator and sample `i` from stream `i + 1`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    // Archetypes with per-coordinate RMS `signal`: normal tissue, then the
    // two tumor types.
    let archetypes: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| std_normal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter()
                .map(|x| spec.signal * x / norm * (spec.dim as f64).sqrt())
                .collect()
        })
        .collect();

    let mut samples = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        samples.push(generate_one(spec, &archetypes, i, &mut rng)?);
    }
    let mut ds = Dataset::new(samples, 1)?;
    ds.assign_folds(spec.folds, spec.seed)?;
    Ok(ds)
}

fn generate_one(
    spec: &SyntheticSpec,
    archetypes: &[Vec<f64>],
    index: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let typing = usize::from(rng.random_bool(spec.second_type_fraction));
    let staging = usize::from(rng.random_bool(spec.late_fraction));

    let cells = spec.rows * spec.cols;
    let mut occupancy: Vec<bool> = (0..cells)
        .map(|_| rng.random_bool(spec.occupancy))
        .collect();
    if !occupancy.iter().any(|&o| o) {
        occupancy[rng.random_range(0..cells)] = true;
    }
    let positions: Vec<(usize, usize)> = (0..cells)
        .filter(|&c| occupancy[c])
        .map(|c| (c / spec.cols, c % spec.cols))
        .collect();
    let n = positions.len();

    // Tumor count whose ratio falls on the labelled side of rho.
    let early_max = (0..=n)
        .take_while(|&t| stage_of(t, n, spec.rho) == 0)
        .last()
        .unwrap_or(0);
    let (lo, hi) = if staging == 1 {
        spec.late_ratio
    } else {
        spec.early_ratio
    };
    let mut t = (rng.random_range(lo..=hi) * n as f64).round() as usize;
    t = if staging == 1 {
        t.max(early_max + 1)
    } else {
        t.min(early_max)
    };
    if t == 0 || t > n {
        return Err(Error::config(format!(
            "sample {index}: cannot place a {} stage tumor on {n} occupied cells",
            if staging == 1 { "late" } else { "early" }
        )));
    }

    let mask = grow_blobs(spec, &positions, t, rng);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let features = mask
        .iter()
        .map(|&tumor| {
            let kind = if tumor { 1 + typing } else { NORMAL };
            archetypes[kind]
                .iter()
                .map(|&a| {
                    let e = if spec.noise_std > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    // Stored as f32 on disk, so generate in f32 precision.
                    (a + e) as f32 as f64
                })
                .collect()
        })
        .collect();
    let grid = FeatureGrid::new(spec.rows, spec.cols, spec.dim, occupancy, features)?;
    Ok(Sample {
        id: format!("syn-{index:05}"),
        grid,
        labels: SampleLabels { typing, staging },
        tumor_mask: Some(mask),
        fold: 0,
    })
}

/// Marks exactly `target` occupied cells as tumor by growing up to
/// `max_regions` blobs. Each step extends one blob, round-robin, by the
/// frontier cell closest to its center under a per-blob axis scaling plus
/// jitter.
fn grow_blobs(
    spec: &SyntheticSpec,
    positions: &[(usize, usize)],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let n = positions.len();
    let mut node_of = vec![usize::MAX; spec.rows * spec.cols];
    for (i, &(r, c)) in positions.iter().enumerate() {
        node_of[r * spec.cols + c] = i;
    }
    let neighbors = |i: usize| {
        let (r, c) = positions[i];
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if (dr, dc) == (0, 0) || nr < 0 || nc < 0 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if nr < spec.rows && nc < spec.cols && node_of[nr * spec.cols + nc] != usize::MAX {
                    out.push(node_of[nr * spec.cols + nc]);
                }
            }
        }
        out
    };

    let regions = rng.random_range(1..=spec.max_regions).min(target);
    let mut mask = vec![false; n];
    let mut members: Vec<Vec<usize>> = Vec::with_capacity(regions);
    let mut shape: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(regions);
    for seed in sample(rng, n, regions).into_vec() {
        mask[seed] = true;
        members.push(vec![seed]);
        let (r, c) = positions[seed];
        shape.push((
            r as f64,
            c as f64,
            rng.random_range(0.6..1.6),
            rng.random_range(0.6..1.6),
        ));
    }
    let mut marked = regions;
    let mut step = 0;
    while marked < target {
        let j = step % regions;
        step += 1;
        let (cr, cc, sr, sc) = shape[j];
        let mut best: Option<(f64, usize)> = None;
        for &m in &members[j] {
            for nb in neighbors(m) {
                if mask[nb] {
                    continue;
                }
                let (r, c) = positions[nb];
                let d = (((r as f64 - cr) / sr).powi(2) + ((c as f64 - cc) / sc).powi(2)).sqrt()
                    + rng.random_range(0.0..0.75);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, nb));
                }
            }
        }
        let next = match best {
            Some((_, nb)) => nb,
            None => {
                // Blob is walled in: restart it from a fresh unmarked cell.
                let free: Vec<usize> = (0..n).filter(|&i| !mask[i]).collect();
                let nb = free[rng.random_range(0..free.len())];
                let (r, c) = positions[nb];
                shape[j].0 = r as f64;
                shape[j].1 = c as f64;
                nb
            }
        };
        mask[next] = true;
        members[j].push(next);
        marked += 1;
    }
    mask
}
