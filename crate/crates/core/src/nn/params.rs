//! Named parameter storage, initialization and the per-pass binding context.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{BatchMoments, Mode, RunningStats, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store, which is also the position in a bound variable list.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub(crate) usize);

/// Learned tensors in registration order plus normalization running stats.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    stats_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            stats_names: Vec::new(),
            stats: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats_names.push(name.into());
        self.stats.push(RunningStats::new(channels));
        StatsId(self.stats.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn stats_names(&self) -> &[String] {
        &self.stats_names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Fold train-mode batch statistics into the running stats.
    pub fn absorb(&mut self, moments: &[(StatsId, BatchMoments<T>)]) {
        for (id, m) in moments {
            self.stats[id.0].absorb(m);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let cast_stats = |s: &RunningStats<T>| RunningStats {
            mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        };
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            stats_names: self.stats_names.clone(),
            stats: self.stats.iter().map(cast_stats).collect(),
        }
    }

    /// Record every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Record every parameter as a constant, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Replace all tensors; shapes must match the registered ones.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>, stats: Vec<RunningStats<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() || stats.len() != self.stats.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors and {} stats, got {} and {}",
                self.tensors.len(),
                self.stats.len(),
                tensors.len(),
                stats.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    self.names[i],
                    new.shape(),
                    old.shape()
                )));
            }
        }
        for (i, (old, new)) in self.stats.iter().zip(&stats).enumerate() {
            if old.channels() != new.channels() || new.mean.len() != new.var.len() {
                return Err(Error::Checkpoint(format!(
                    "{}: {} channels, expected {}",
                    self.stats_names[i],
                    new.channels(),
                    old.channels()
                )));
            }
        }
        self.tensors = tensors;
        self.stats = stats;
        Ok(())
    }
}

/// Normal draws scaled by `std`.
pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    std: f64,
) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// He-normal standard deviation for a fan-in.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

/// Everything one forward pass needs: the tape, the bound parameters, the
/// running stats and the dropout stream.
pub struct Ctx<'a, T: Scalar, R: Rng + ?Sized> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [Var],
    pub stats: &'a [RunningStats<T>],
    pub mode: Mode,
    pub rng: &'a mut R,
    /// Batch statistics gathered by train-mode normalizations.
    pub moments: Vec<(StatsId, BatchMoments<T>)>,
    resized: HashMap<(Var, usize, usize), Var>,
}

impl<'a, T: Scalar, R: Rng + ?Sized> Ctx<'a, T, R> {
    pub fn new(
        tape: &'a mut Tape<T>,
        vars: &'a [Var],
        stats: &'a [RunningStats<T>],
        mode: Mode,
        rng: &'a mut R,
    ) -> Self {
        Self {
            tape,
            vars,
            stats,
            mode,
            rng,
            moments: Vec::new(),
            resized: HashMap::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Area resize of `input` memoized per target within this pass, so units
    /// sharing a resolution share the resampled map.
    pub(crate) fn resize_cached(&mut self, input: Var, h: usize, w: usize) -> Result<Var> {
        let key = (input, h, w);
        if let Some(&v) = self.resized.get(&key) {
            return Ok(v);
        }
        let v = self.tape.resize_area(input, h, w)?;
        self.resized.insert(key, v);
        Ok(v)
    }
}
