use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Descending L0 targets from the dense pixel count down to the budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimSchedule {
    targets: Vec<usize>,
}

impl TrimSchedule {
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    /// Consecutive `(l0_curr, l0_next)` pairs, one per trim.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn steps(&self) -> usize {
        self.targets.len() - 1
    }

    pub fn budget(&self) -> usize {
        *self.targets.last().expect("schedule is never empty")
    }
}

fn ceil_log2(n: usize) -> u32 {
    usize::BITS - (n - 1).leading_zeros()
}

fn floor_log2(n: usize) -> u32 {
    usize::BITS - 1 - n.leading_zeros()
}

fn check_budget(n_pixels: usize, eps0: usize) -> Result<()> {
    if eps0 == 0 || eps0 >= n_pixels {
        return Err(Error::invalid(format!("L0 budget must be in [1, {n_pixels}), got {eps0}")));
    }
    Ok(())
}

/// `⌈log₂ N⌉ − ⌊log₂ ε0⌋`: the number of trims in the full schedule.
pub fn max_trim_steps(n_pixels: usize, eps0: usize) -> Result<usize> {
    check_budget(n_pixels, eps0)?;
    Ok((ceil_log2(n_pixels) - floor_log2(eps0)) as usize)
}

/// The full schedule is `N, 2^(c-1), …, 2^(f+1), ε0` with `c = ⌈log₂ N⌉`,
/// `f = ⌊log₂ ε0⌋`. With fewer steps, the `c − f` halvings are split into
/// `n_steps` runs whose lengths differ by at most one, shorter runs first,
/// and only the run boundaries are kept.
pub fn build_schedule(n_pixels: usize, eps0: usize, n_steps: usize) -> Result<TrimSchedule> {
    let max = max_trim_steps(n_pixels, eps0)?;
    if n_steps == 0 || n_steps > max {
        return Err(Error::invalid(format!("trim steps must be in [1, {max}] for N={n_pixels}, eps0={eps0}, got {n_steps}")));
    }
    let c = ceil_log2(n_pixels);
    let mut full = Vec::with_capacity(max + 1);
    full.push(n_pixels);
    full.extend((1..max as u32).map(|i| 1usize << (c - i)));
    full.push(eps0);

    let (q, r) = (max / n_steps, max % n_steps);
    let mut idx = 0;
    let mut targets = vec![full[0]];
    for g in 0..n_steps {
        idx += if g < n_steps - r { q } else { q + 1 };
        targets.push(full[idx]);
    }
    Ok(TrimSchedule { targets })
}
