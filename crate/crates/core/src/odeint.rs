//! Fixed-step classical Runge–Kutta integration on the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::diffmath::Var;
use crate::error::{Error, Result};

/// Observation times with a number of RK4 substeps per interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    substeps: usize,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::Config("at least one substep per interval is required".into()));
        }
        if times.is_empty() {
            return Err(Error::Config("time grid is empty".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("time grid must be strictly increasing".into()));
        }
        Ok(TimeGrid { times, substeps })
    }

    /// `n` points `0, dt, 2·dt, …`.
    pub fn uniform(n: usize, dt: f64, substeps: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        Self::new((0..n).map(|i| i as f64 * dt).collect(), substeps)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// The first `n` points of this grid.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.times[..n.min(self.times.len())].to_vec(), self.substeps)
    }
}

/// Integrates `dh/dt = drift(h)` from `h1` at `grid.times()[0]` and returns
/// the state at every grid point, starting with `h1` itself.
///
/// Each interval is split into `grid.substeps()` equal RK4 steps.
pub fn rk4_rollout<'t, F>(h1: Var<'t>, grid: &TimeGrid, mut drift: F) -> Result<Vec<Var<'t>>>
where
    F: FnMut(Var<'t>) -> Result<Var<'t>>,
{
    if !h1.value().is_finite() {
        return Err(Error::Integration { step: 0 });
    }
    let n_sub = grid.substeps();
    let mut out = Vec::with_capacity(grid.len());
    out.push(h1);
    let mut h = h1;
    let mut step = 0;
    for w in grid.times().windows(2) {
        let dt = (w[1] - w[0]) / n_sub as f64;
        for _ in 0..n_sub {
            step += 1;
            let k1 = drift(h)?;
            let k2 = drift(h.add(k1.scale(0.5 * dt))?)?;
            let k3 = drift(h.add(k2.scale(0.5 * dt))?)?;
            let k4 = drift(h.add(k3.scale(dt))?)?;
            let incr = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
            h = h.add(incr.scale(dt / 6.0))?;
            if !h.value().is_finite() {
                return Err(Error::Integration { step });
            }
        }
        out.push(h);
    }
    Ok(out)
}
