//! HR/LR training pairs with degraded volumes cached per `(id, factors)`.

use std::collections::HashMap;
use std::path::Path;

use crate::degrade::degrade;
use crate::error::TrainError;
use crate::volume::{list_volumes, load_volume, normalize, Volume};

/// One subject: a normalized HR volume and its degraded counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub hr: Volume,
    pub lr: Volume,
}

impl Pair {
    pub fn id(&self) -> &str {
        &self.hr.id
    }
}

/// Memoizes degradation results.
#[derive(Debug, Default)]
pub struct LrCache {
    entries: HashMap<(String, [usize; 3]), Volume>,
}

impl LrCache {
    pub fn get_or_degrade(&mut self, hr: &Volume, factors: [usize; 3]) -> Result<Volume, TrainError> {
        let key = (hr.id.clone(), factors);
        if let Some(v) = self.entries.get(&key) {
            return Ok(v.clone());
        }
        let lr = degrade(hr, factors).map_err(|e| TrainError::Data(format!("degrading {}: {e}", hr.id)))?;
        self.entries.insert(key, lr.clone());
        Ok(lr)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Subjects in a fixed (sorted-path) order.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub factors: [usize; 3],
    pub pairs: Vec<Pair>,
}

impl Dataset {
    /// Min-max normalizes each HR volume and degrades it by `factors`.
    pub fn from_volumes(volumes: Vec<Volume>, factors: [usize; 3], cache: &mut LrCache) -> Result<Self, TrainError> {
        if volumes.is_empty() {
            return Err(TrainError::Data("dataset is empty".into()));
        }
        let mut pairs = Vec::with_capacity(volumes.len());
        for v in volumes {
            let hr = normalize(&v)?;
            let lr = cache.get_or_degrade(&hr, factors)?;
            pairs.push(Pair { hr, lr });
        }
        Ok(Self { factors, pairs })
    }

    /// Loads every `.vol` file in `dir`.
    pub fn load(dir: &Path, factors: [usize; 3]) -> Result<Self, TrainError> {
        if !dir.is_dir() {
            return Err(TrainError::Data(format!("{} is not a directory", dir.display())));
        }
        let paths = list_volumes(dir)?;
        if paths.is_empty() {
            return Err(TrainError::Data(format!("no .vol files in {}", dir.display())));
        }
        let volumes = paths.iter().map(|p| load_volume(p)).collect::<Result<Vec<_>, _>>()?;
        Self::from_volumes(volumes, factors, &mut LrCache::default())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::synth_phantom;

    #[test]
    fn cache_reuses_degraded_volume() {
        let hr = normalize(&synth_phantom(1, [16, 16, 16]).unwrap()).unwrap();
        let mut cache = LrCache::default();
        let a = cache.get_or_degrade(&hr, [2, 2, 1]).unwrap();
        let b = cache.get_or_degrade(&hr, [2, 2, 1]).unwrap();
        assert_eq!(a, b);
        assert_eq!(cache.len(), 1);
        cache.get_or_degrade(&hr, [2, 2, 2]).unwrap();
        assert_eq!(cache.len(), 2);
    }

    #[test]
    fn empty_inputs_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path(), [2, 2, 1]), Err(TrainError::Data(_))));
        assert!(matches!(
            Dataset::load(&dir.path().join("missing"), [2, 2, 1]),
            Err(TrainError::Data(_))
        ));
    }
}
