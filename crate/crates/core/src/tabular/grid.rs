use serde::{Deserialize, Serialize};

/// Uniform tensor grid; node indices run with the last dimension fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
}

impl Grid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Self {
        assert!(lower.len() == upper.len() && lower.len() == points.len());
        assert!(points.iter().all(|&p| p >= 2), "need at least 2 points per dimension");
        Grid { lower, upper, points }
    }

    pub fn dims(&self) -> usize {
        self.points.len()
    }

    pub fn len(&self) -> usize {
        self.points.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / (self.points[d] - 1) as f64
    }

    fn strides(&self) -> Vec<usize> {
        let k = self.dims();
        let mut s = vec![1; k];
        for d in (0..k.saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.points[d + 1];
        }
        s
    }

    /// Coordinates of node `idx`.
    pub fn node(&self, mut idx: usize, out: &mut [f64]) {
        for d in (0..self.dims()).rev() {
            let i = idx % self.points[d];
            idx /= self.points[d];
            out[d] = self.lower[d] + i as f64 * self.spacing(d);
        }
    }

    /// Index of the node nearest to `x` (clamped into the box).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let strides = self.strides();
        let mut idx = 0;
        for d in 0..self.dims() {
            let t = ((x[d] - self.lower[d]) / self.spacing(d)).round();
            let i = t.clamp(0.0, (self.points[d] - 1) as f64) as usize;
            idx += i * strides[d];
        }
        idx
    }

    /// Multilinear interpolation stencil at `x` (clamped into the box):
    /// `2^dims` node indices and weights summing to one.
    pub fn stencil(&self, x: &[f64], idx: &mut Vec<usize>, w: &mut Vec<f64>) {
        let k = self.dims();
        let strides = self.strides();
        idx.clear();
        w.clear();
        idx.push(0);
        w.push(1.0);
        for d in 0..k {
            let top = (self.points[d] - 1) as f64;
            let t = ((x[d] - self.lower[d]) / self.spacing(d)).clamp(0.0, top);
            let i0 = (t.floor() as usize).min(self.points[d] - 2);
            let frac = t - i0 as f64;
            let len = idx.len();
            for c in 0..len {
                let base = idx[c] + i0 * strides[d];
                let wc = w[c];
                idx[c] = base;
                w[c] = wc * (1.0 - frac);
                idx.push(base + strides[d]);
                w.push(wc * frac);
            }
        }
    }

    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> f64 {
        let mut idx = Vec::with_capacity(1 << self.dims());
        let mut w = Vec::with_capacity(1 << self.dims());
        self.stencil(x, &mut idx, &mut w);
        idx.iter().zip(&w).map(|(&i, &wi)| values[i] * wi).sum()
    }
}

/// Uniform action levels per input, anchored so the goal input is a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionLattice {
    pub levels: Vec<Vec<f64>>,
}

impl ActionLattice {
    /// For each input, levels `goal + j·Δ` inside `[lower, upper]` with
    /// `Δ = (upper − lower)/(count − 1)`.
    pub fn anchored(lower: &[f64], upper: &[f64], goal: &[f64], count: usize) -> Self {
        let levels = (0..lower.len())
            .map(|i| {
                if count < 2 || upper[i] <= lower[i] {
                    return vec![goal[i]];
                }
                let step = (upper[i] - lower[i]) / (count - 1) as f64;
                let tol = 1e-9 * step;
                let below = ((goal[i] - lower[i] + tol) / step).floor() as i64;
                let above = ((upper[i] - goal[i] + tol) / step).floor() as i64;
                (-below..=above).map(|j| goal[i] + j as f64 * step).collect()
            })
            .collect();
        ActionLattice { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Action `idx`, last input fastest.
    pub fn action(&self, mut idx: usize, out: &mut [f64]) {
        for d in (0..self.levels.len()).rev() {
            let k = self.levels[d].len();
            out[d] = self.levels[d][idx % k];
            idx /= k;
        }
    }

    /// Largest level spacing over inputs.
    pub fn max_step(&self) -> f64 {
        self.levels
            .iter()
            .filter(|l| l.len() > 1)
            .map(|l| l[1] - l[0])
            .fold(0.0, f64::max)
    }
}
