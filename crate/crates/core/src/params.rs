//! Named parameter storage, group partition and tape binding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Mat, Tape, Var};
use crate::error::{Error, Result};

/// Parameter groups. Only the backbone is frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    StereoAdapter,
    SpatialAdapter,
    ScaleAdapter,
    Upsampler,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::StereoAdapter,
        ParamGroup::SpatialAdapter,
        ParamGroup::ScaleAdapter,
        ParamGroup::Upsampler,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone.",
            ParamGroup::StereoAdapter => "adapter.stereo.",
            ParamGroup::SpatialAdapter => "adapter.spatial.",
            ParamGroup::ScaleAdapter => "adapter.scale.",
            ParamGroup::Upsampler => "upsampler.",
        }
    }

    pub fn of(name: &str) -> Result<ParamGroup> {
        Self::ALL
            .into_iter()
            .find(|g| name.starts_with(g.prefix()))
            .ok_or_else(|| Error::Checkpoint(format!("parameter {name:?} belongs to no group")))
    }

    pub fn is_tunable(self) -> bool {
        self != ParamGroup::Backbone
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        ParamGroup::of(&name)?;
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&String, &Mat)> {
        self.map.iter().filter(move |(n, _)| n.starts_with(group.prefix()))
    }

    pub fn tunable_names(&self) -> Vec<String> {
        self.map
            .keys()
            .filter(|n| ParamGroup::of(n).map(|g| g.is_tunable()).unwrap_or(false))
            .cloned()
            .collect()
    }

    pub fn count(&self, group: ParamGroup) -> usize {
        self.group(group).map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over the names, shapes and little-endian bytes of one group.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.group(group) {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameter initialization helpers drawing from a shared generator.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform with variance `gain / fan_in`.
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Result<()> {
        let a = (3.0 * gain / fan_in as f64).sqrt();
        let m = Mat::from_shape_fn((rows, cols), |_| self.rng.gen_range(-a..a));
        self.store.insert(name, m)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<()> {
        self.store.insert(name, Mat::zeros((rows, cols)))
    }
}

/// Lazily places parameters on a tape, remembering the leaf of each name.
pub struct Binder<'a> {
    store: &'a ParamStore,
    train: bool,
    vars: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    /// `train` marks tunable parameters as requiring gradients.
    pub fn new(store: &'a ParamStore, train: bool) -> Self {
        Self {
            store,
            train,
            vars: HashMap::new(),
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone();
        let tunable = ParamGroup::of(name).map(|g| g.is_tunable()).unwrap_or(false);
        let v = tape.leaf(value, self.train && tunable);
        self.vars.insert(name.to_string(), v);
        v
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Gradients for every bound tunable parameter; unbound or unreached
    /// parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.store
            .tunable_names()
            .into_iter()
            .map(|name| {
                let g = self
                    .vars
                    .get(&name)
                    .and_then(|v| grads.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(self.store.get(&name).expect("listed").dim()));
                (name, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_names() {
        assert_eq!(ParamGroup::of("backbone.head.w").unwrap(), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("adapter.scale.g0.ln.gamma").unwrap(), ParamGroup::ScaleAdapter);
        assert_eq!(ParamGroup::of("upsampler.shared.fuse.wq").unwrap(), ParamGroup::Upsampler);
        assert!(ParamGroup::of("adapter.other.x").is_err());
        assert!(ParamStore::new().insert("mystery", Mat::zeros((1, 1))).is_err());
    }

    #[test]
    fn group_hash_tracks_values() {
        let mut s = ParamStore::new();
        s.insert("backbone.a", Mat::zeros((2, 2))).unwrap();
        s.insert("adapter.spatial.b", Mat::zeros((2, 2))).unwrap();
        let h0 = s.group_hash(ParamGroup::Backbone);
        s.get_mut("adapter.spatial.b").unwrap()[[0, 0]] = 1.0;
        assert_eq!(h0, s.group_hash(ParamGroup::Backbone));
        s.get_mut("backbone.a").unwrap()[[0, 0]] = 1.0;
        assert_ne!(h0, s.group_hash(ParamGroup::Backbone));
    }
}
