use crate::template::TokenId;

use super::ModelError;

/// Everything a model keeps for one written position.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    /// Input token fed at this position.
    pub token: TokenId,
    /// Per-layer key vectors; empty for models without attention state.
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
}

/// Position-addressed key/value store shared by every field of a session.
///
/// Each layout position is written at most once. Padding positions are
/// simply never written, so they have no entry at all.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvCache {
    slots: Vec<Option<CacheEntry>>,
    written: Vec<usize>,
}

impl KvCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: vec![None; capacity],
            written: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.written.len()
    }

    pub fn is_empty(&self) -> bool {
        self.written.is_empty()
    }

    pub fn write(&mut self, position: usize, entry: CacheEntry) -> Result<(), ModelError> {
        let slot = self
            .slots
            .get_mut(position)
            .ok_or(ModelError::PositionOutOfBounds(position))?;
        if slot.is_some() {
            return Err(ModelError::PositionWritten(position));
        }
        *slot = Some(entry);
        let at = self.written.partition_point(|&p| p < position);
        self.written.insert(at, position);
        Ok(())
    }

    pub fn get(&self, position: usize) -> Option<&CacheEntry> {
        self.slots.get(position).and_then(Option::as_ref)
    }

    pub fn is_written(&self, position: usize) -> bool {
        self.get(position).is_some()
    }

    /// Written positions, ascending.
    pub fn written_positions(&self) -> &[usize] {
        &self.written
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(token: TokenId) -> CacheEntry {
        CacheEntry {
            token,
            keys: vec![],
            values: vec![],
        }
    }

    #[test]
    fn positions_are_write_once() {
        let mut cache = KvCache::new(4);
        cache.write(2, entry(5)).unwrap();
        cache.write(0, entry(6)).unwrap();
        assert_eq!(
            cache.write(2, entry(7)),
            Err(ModelError::PositionWritten(2))
        );
        assert_eq!(
            cache.write(4, entry(7)),
            Err(ModelError::PositionOutOfBounds(4))
        );
        assert_eq!(cache.written_positions(), &[0, 2]);
        assert_eq!(cache.get(2).unwrap().token, 5);
        assert!(!cache.is_written(1));
        assert_eq!(cache.len(), 2);
    }
}
