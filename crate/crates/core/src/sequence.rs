use crate::dynamics::ControlBounds;
use crate::error::{check_dim, EmpcError, Result};
use crate::scalar::Scalar;

/// `N + 1` inputs `(u₀, …, u_N)` inside a control box. `u_N` only enters
/// the terminal stage of the cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSequence<T: Scalar> {
    flat: Vec<T>,
    bounds: ControlBounds<T>,
}

impl<T: Scalar> ControlSequence<T> {
    pub fn new(entries: Vec<Vec<T>>, bounds: ControlBounds<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(EmpcError::InvalidArgument("control sequence needs N + 1 >= 1 entries".into()));
        }
        let m = bounds.dim();
        let mut flat = Vec::with_capacity(entries.len() * m);
        for e in &entries {
            check_dim("control sequence entry", m, e.len())?;
            flat.extend_from_slice(e);
        }
        Self::from_flat(flat, bounds)
    }

    /// Stacked `[u₀; u₁; …; u_N]`, each block of length `m`.
    pub fn from_flat(flat: Vec<T>, bounds: ControlBounds<T>) -> Result<Self> {
        let m = bounds.dim();
        if flat.is_empty() || flat.len() % m != 0 {
            return Err(EmpcError::InvalidArgument(format!(
                "stacked control length {} is not a positive multiple of m = {m}",
                flat.len()
            )));
        }
        let seq = Self { flat, bounds };
        for k in 0..seq.len() {
            if !seq.bounds.contains(seq.get(k)) {
                return Err(EmpcError::InvalidArgument(format!(
                    "control entry {k} = {:?} outside the admissible box",
                    seq.get(k)
                )));
            }
        }
        Ok(seq)
    }

    /// `value` repeated `horizon + 1` times.
    pub fn constant(value: &[T], horizon: usize, bounds: ControlBounds<T>) -> Result<Self> {
        Self::new(vec![value.to_vec(); horizon + 1], bounds)
    }

    /// Box midpoint repeated `horizon + 1` times.
    pub fn midpoint(horizon: usize, bounds: ControlBounds<T>) -> Self {
        let mid = bounds.midpoint();
        Self::constant(&mid, horizon, bounds).expect("midpoint lies inside its own box")
    }

    /// Horizon length `N`.
    pub fn horizon(&self) -> usize {
        self.len() - 1
    }

    /// Number of entries, `N + 1`.
    pub fn len(&self) -> usize {
        self.flat.len() / self.bounds.dim()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn control_dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn get(&self, k: usize) -> &[T] {
        let m = self.bounds.dim();
        &self.flat[k * m..(k + 1) * m]
    }

    pub fn bounds(&self) -> &ControlBounds<T> {
        &self.bounds
    }

    pub fn as_flat(&self) -> &[T] {
        &self.flat
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.flat.chunks(self.bounds.dim())
    }

    /// Replaces the stacked values, projecting them onto the box.
    pub(crate) fn set_projected(&mut self, flat: &[T]) {
        self.flat.copy_from_slice(flat);
        self.bounds.project(&mut self.flat);
    }

    /// `(u₁, u₂, …, u_N, u_N)`: drop the applied move, repeat the last one.
    pub fn warm_start_shift(&self) -> Self {
        let m = self.bounds.dim();
        let mut flat = Vec::with_capacity(self.flat.len());
        if self.len() > 1 {
            flat.extend_from_slice(&self.flat[m..]);
        }
        flat.extend_from_slice(self.get(self.len() - 1));
        Self { flat, bounds: self.bounds.clone() }
    }
}
