//! Labelled slide collections with their cross-validation folds, and the
//! `MGTS` file that stores them.
//!
//! ```text
//! "MGTS", u32 version, u32 folds, u32 samples
//! per sample:
//!   u32 len + UTF-8 id, u32 typing label, u32 staging label, u32 fold
//!   u32 mask length (0 = no mask) + LSB-first mask bitmap
//!   u32 len + embedded MGT1 grid
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph_file::{decode_grid, encode_grid};
use super::{put_len, put_str, put_u32, ByteReader};
use crate::error::{Error, Result};
use crate::graph::FeatureGrid;
use crate::model::SampleLabels;

pub const MAGIC: &[u8; 4] = b"MGTS";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub grid: FeatureGrid,
    pub labels: SampleLabels,
    /// Ground-truth tumor flag per occupied cell, when known.
    pub tumor_mask: Option<Vec<bool>>,
    pub fold: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub folds: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, folds: usize) -> Result<Self> {
        let ds = Dataset { samples, folds };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds == 0 {
            return Err(Error::config("fold count must be at least 1"));
        }
        for s in &self.samples {
            if s.fold >= self.folds {
                return Err(Error::contract(format!(
                    "sample {} in fold {} of {}",
                    s.id, s.fold, self.folds
                )));
            }
            if let Some(m) = &s.tumor_mask {
                if m.len() != s.grid.num_occupied() {
                    return Err(Error::contract(format!(
                        "sample {} mask length mismatch",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reassigns folds, stratified by the joint (typing, staging) label:
    /// each label group is shuffled and dealt round-robin, continuing the
    /// deal position across groups so fold sizes also stay balanced.
    pub fn assign_folds(&mut self, folds: usize, seed: u64) -> Result<()> {
        if folds == 0 {
            return Err(Error::config("fold count must be at least 1"));
        }
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            groups
                .entry((s.labels.typing, s.labels.staging))
                .or_default()
                .push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = 0;
        for idx in groups.values_mut() {
            idx.shuffle(&mut rng);
            for &i in idx.iter() {
                self.samples[i].fold = next % folds;
                next += 1;
            }
        }
        self.folds = folds;
        Ok(())
    }

    /// `(train, test)` sample indices for holding out `fold`, ascending.
    pub fn split(&self, fold: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.samples.len()).partition(|&i| self.samples[i].fold != fold)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_len(&mut out, self.folds, "fold count")?;
        put_len(&mut out, self.samples.len(), "sample count")?;
        for s in &self.samples {
            put_str(&mut out, &s.id)?;
            put_len(&mut out, s.labels.typing, "label")?;
            put_len(&mut out, s.labels.staging, "label")?;
            put_len(&mut out, s.fold, "fold")?;
            match &s.tumor_mask {
                Some(m) => {
                    put_len(&mut out, m.len(), "mask")?;
                    let mut bits = vec![0u8; m.len().div_ceil(8)];
                    for (i, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                        bits[i / 8] |= 1 << (i % 8);
                    }
                    out.extend_from_slice(&bits);
                }
                None => put_u32(&mut out, 0),
            }
            let grid = encode_grid(&s.grid)?;
            put_len(&mut out, grid.len(), "grid")?;
            out.extend_from_slice(&grid);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::parse(
                at,
                format!("unsupported dataset version {version}"),
            ));
        }
        let folds = r.u32("fold count")? as usize;
        let count = r.u32("sample count")? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = r.string("sample id")?;
            let typing = r.u32("typing label")? as usize;
            let staging = r.u32("staging label")? as usize;
            let fold_at = r.offset();
            let fold = r.u32("fold")? as usize;
            if fold >= folds {
                return Err(Error::parse(fold_at, format!("fold {fold} of {folds}")));
            }
            let mask_len = r.u32("mask length")? as usize;
            let tumor_mask = if mask_len > 0 {
                let bits = r.bytes(mask_len.div_ceil(8), "mask")?;
                Some(
                    (0..mask_len)
                        .map(|i| bits[i / 8] >> (i % 8) & 1 == 1)
                        .collect(),
                )
            } else {
                None
            };
            let len = r.u32("grid length")? as usize;
            let grid_at = r.offset();
            let grid = decode_grid(r.bytes(len, "grid")?).map_err(|e| match e {
                Error::Parse { offset, msg } => Error::parse(grid_at + offset, msg),
                other => other,
            })?;
            samples.push(Sample {
                id,
                grid,
                labels: SampleLabels { typing, staging },
                tumor_mask,
                fold,
            });
        }
        r.finish()?;
        Dataset::new(samples, folds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Dataset::decode(&fs::read(path)?)
    }
}
