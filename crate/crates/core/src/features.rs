//! Memoized multi-scale vision features for rendered frames.
//!
//! Towers stay frozen after pre-training, so every bundle sharing a tower
//! fingerprint maps a frame to the same features. Fine-tuning, labeling,
//! policy training and rollouts all read through this cache.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use sha2::{Digest, Sha256};

use crate::encoder::EncoderBundle;
use crate::error::{Error, Result};
use crate::worldgrid::{render, Cell, Level};

/// Identity of a rendered frame: level content, agent cell, brightness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameKey {
    level: [u8; 16],
    cell: Cell,
    brightness: u64,
}

/// Content digest of a level, used to key cached frames.
pub fn level_digest(level: &Level) -> [u8; 16] {
    let json = serde_json::to_vec(level).expect("levels serialize");
    let d = Sha256::digest(&json);
    d[..16].try_into().expect("16 bytes")
}

impl FrameKey {
    pub fn new(level_digest: [u8; 16], cell: Cell, brightness: f64) -> Self {
        Self {
            level: level_digest,
            cell,
            brightness: brightness.to_bits(),
        }
    }
}

#[derive(Debug)]
pub struct FeatureCache {
    tower_fingerprint: String,
    map: Mutex<HashMap<FrameKey, Arc<Vec<f64>>>>,
}

/// Frames encoded per forward pass when filling the cache.
const CHUNK: usize = 32;

impl FeatureCache {
    pub fn new(bundle: &EncoderBundle) -> Self {
        Self {
            tower_fingerprint: bundle.tower_fingerprint(),
            map: Mutex::new(HashMap::new()),
        }
    }

    pub fn tower_fingerprint(&self) -> &str {
        &self.tower_fingerprint
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn check(&self, bundle: &EncoderBundle) -> Result<()> {
        let found = bundle.tower_fingerprint();
        if found != self.tower_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.tower_fingerprint.clone(),
                found,
            });
        }
        Ok(())
    }

    /// Features for the agent at each of `cells` in `level`, rendered at the
    /// given brightness factor (1.0 leaves frames untouched).
    pub fn frames(
        &self,
        bundle: &EncoderBundle,
        level: &Level,
        cells: &[Cell],
        brightness: f64,
    ) -> Result<Vec<Arc<Vec<f64>>>> {
        self.check(bundle)?;
        let digest = level_digest(level);
        let keys: Vec<FrameKey> = cells.iter().map(|&c| FrameKey::new(digest, c, brightness)).collect();
        let missing: Vec<usize> = {
            let map = self.map.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            (0..keys.len())
                .filter(|&i| !map.contains_key(&keys[i]) && seen.insert(keys[i]))
                .collect()
        };
        for chunk in missing.chunks(CHUNK) {
            let frames: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let obs = render(level, cells[i]);
                    if brightness == 1.0 {
                        obs
                    } else {
                        obs.with_brightness(brightness)
                    }
                })
                .collect();
            let refs: Vec<_> = frames.iter().collect();
            let feats = bundle.image_features(&refs)?;
            let mut map = self.map.lock().expect("cache lock");
            for (&i, f) in chunk.iter().zip(feats) {
                map.insert(keys[i], Arc::new(f));
            }
        }
        let map = self.map.lock().expect("cache lock");
        Ok(keys.iter().map(|k| Arc::clone(&map[k])).collect())
    }

    /// Features for many levels at once, batching all misses together.
    pub fn prefetch(&self, bundle: &EncoderBundle, items: &[(&Level, Vec<Cell>)], brightness: f64) -> Result<()> {
        self.check(bundle)?;
        let mut pending: Vec<(FrameKey, &Level, Cell)> = Vec::new();
        {
            let map = self.map.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            for (level, cells) in items {
                let digest = level_digest(level);
                for &c in cells {
                    let key = FrameKey::new(digest, c, brightness);
                    if !map.contains_key(&key) && seen.insert(key) {
                        pending.push((key, level, c));
                    }
                }
            }
        }
        for chunk in pending.chunks(CHUNK) {
            let frames: Vec<_> = chunk
                .iter()
                .map(|(_, level, c)| {
                    let obs = render(level, *c);
                    if brightness == 1.0 {
                        obs
                    } else {
                        obs.with_brightness(brightness)
                    }
                })
                .collect();
            let refs: Vec<_> = frames.iter().collect();
            let feats = bundle.image_features(&refs)?;
            let mut map = self.map.lock().expect("cache lock");
            for ((key, _, _), f) in chunk.iter().zip(feats) {
                map.insert(*key, Arc::new(f));
            }
        }
        Ok(())
    }
}
