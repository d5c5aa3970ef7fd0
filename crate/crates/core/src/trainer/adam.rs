//! Adam moments stored row-wise so rows can follow Gaussians through
//! densification and pruning.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub const GAUSSIAN: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-15,
    };
    pub const MEDIUM: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

/// First and second moments for `rows × width` parameters sharing one step
/// counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub width: usize,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, rows: usize, width: usize) -> Self {
        Self {
            hyper,
            width,
            m: vec![0.0; rows * width],
            v: vec![0.0; rows * width],
            step: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.m.len() / self.width
    }

    /// Advances the step counter; call once per optimizer step before the
    /// row updates.
    pub fn begin_step(&mut self) -> StepCoefficients {
        self.step += 1;
        let t = self.step as i32;
        StepCoefficients {
            bc1: 1.0 - self.hyper.beta1.powi(t),
            bc2: 1.0 - self.hyper.beta2.powi(t),
        }
    }

    /// Updates `params` in place; `start` is the flat index of
    /// `params[0]` in the state (`row * width + column`).
    #[inline]
    pub fn update(&mut self, k: &StepCoefficients, start: usize, params: &mut [f64], grads: &[f64], lr: f64) {
        let h = self.hyper;
        let base = start;
        for j in 0..params.len() {
            let g = grads[j];
            let m = &mut self.m[base + j];
            let v = &mut self.v[base + j];
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / k.bc1;
            let v_hat = *v / k.bc2;
            params[j] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    /// Zeroes the moments of every row, keeping the step counter.
    pub fn zero_moments(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }

    /// Rebuilds rows from `sources`: `Some(i)` copies old row `i`, `None`
    /// starts a zero row.
    pub fn remap(&mut self, sources: &[Option<usize>]) {
        let w = self.width;
        let mut m = Vec::with_capacity(sources.len() * w);
        let mut v = Vec::with_capacity(sources.len() * w);
        for s in sources {
            match s {
                Some(i) => {
                    m.extend_from_slice(&self.m[i * w..(i + 1) * w]);
                    v.extend_from_slice(&self.v[i * w..(i + 1) * w]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, w));
                    v.extend(std::iter::repeat_n(0.0, w));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepCoefficients {
    bc1: f64,
    bc2: f64,
}
