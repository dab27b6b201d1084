//! First-order adaptive optimizers over flat parameter slots.

use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Betas {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn ensure(&mut self, n: usize) {
        if self.m.len() != n {
            self.m = alloc::vec![0.0; n];
            self.v = alloc::vec![0.0; n];
        }
    }

    fn accumulate(&mut self, b: &Betas, grad: &[f64]) {
        self.ensure(grad.len());
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grad) {
            *m = b.beta1 * *m + (1.0 - b.beta1) * g;
            *v = b.beta2 * *v + (1.0 - b.beta2) * g * g;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Adam,
    Radam,
}

/// Adam or rectified Adam. Call `begin_step` once per iteration, then `update` for every slot.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: Kind,
    betas: Betas,
    t: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn adam(betas: Betas) -> Self {
        Optimizer {
            kind: Kind::Adam,
            betas,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn radam(betas: Betas) -> Self {
        Optimizer {
            kind: Kind::Radam,
            betas,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn kind(&self) -> Kind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Rectification factor for the current step, or `None` while the variance estimate is untractable.
    pub fn rectification(&self) -> Option<f64> {
        let b2 = self.betas.beta2;
        let t = self.t as f64;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        if rho > 4.0 {
            Some(
                ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt(),
            )
        } else {
            None
        }
    }

    pub fn update(&mut self, slot: usize, lr: f64, param: &mut [f64], grad: &[f64]) {
        assert!(self.t > 0, "begin_step must precede update");
        assert_eq!(param.len(), grad.len());
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, Slot::default);
        }
        let b = self.betas;
        self.slots[slot].accumulate(&b, grad);
        let t = self.t as f64;
        let c1 = 1.0 - b.beta1.powf(t);
        let c2 = 1.0 - b.beta2.powf(t);
        let scale = match self.kind {
            Kind::Adam => 1.0,
            Kind::Radam => match self.rectification() {
                Some(r) => r,
                None => return,
            },
        };
        let s = &self.slots[slot];
        for ((p, m), v) in param.iter_mut().zip(&s.m).zip(&s.v) {
            let mh = m / c1;
            let vh = (v / c2).sqrt();
            *p -= lr * scale * mh / (vh + b.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut o = Optimizer::adam(Betas::default());
        let mut p = vec![1.0, -2.0, 0.5];
        o.begin_step();
        o.update(0, 0.1, &mut p, &[3.0, -0.5, 1e-3]);
        // m̂ = g and v̂ = g², so each step is lr·sign(g) up to eps.
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
        assert!((p[2] - 0.4).abs() < 1e-4);
    }

    #[test]
    fn radam_warmup_then_rectified() {
        let mut o = Optimizer::radam(Betas::default());
        let mut p = vec![1.0];
        let mut first_move = None;
        for step in 1..=10 {
            o.begin_step();
            let before = p[0];
            o.update(0, 0.01, &mut p, &[1.0]);
            if p[0] != before && first_move.is_none() {
                first_move = Some(step);
            }
        }
        let b2: f64 = 0.999;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho = |t: i32| rho_inf - 2.0 * t as f64 * b2.powi(t) / (1.0 - b2.powi(t));
        let expected = (1..).find(|&t| rho(t) > 4.0).unwrap();
        assert_eq!(first_move, Some(expected));

        let t = expected + 2;
        let r = ((rho(t) - 4.0) * (rho(t) - 2.0) * rho_inf
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho(t)))
        .sqrt();
        let mut o = Optimizer::radam(Betas::default());
        for _ in 0..t {
            o.begin_step();
        }
        assert!((o.rectification().unwrap() - r).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        for mut o in [
            Optimizer::adam(Betas::default()),
            Optimizer::radam(Betas::default()),
        ] {
            let mut p = vec![0.25, -1.5];
            for _ in 0..20 {
                o.begin_step();
                o.update(0, 0.0, &mut p, &[0.3, -7.0]);
            }
            assert_eq!(p, vec![0.25, -1.5]);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        for mut o in [
            Optimizer::adam(Betas::default()),
            Optimizer::radam(Betas::default()),
        ] {
            let mut p = vec![3.0, -2.0];
            let mut q = vec![0.5];
            for _ in 0..2000 {
                o.begin_step();
                let g: Vec<f64> = p.iter().map(|x| 2.0 * (x - 1.0)).collect();
                o.update(0, 0.05, &mut p, &g);
                let gq = [2.0 * (q[0] + 4.0)];
                o.update(1, 0.05, &mut q, &gq);
            }
            assert!(p.iter().all(|x| (x - 1.0).abs() < 1e-2), "{p:?}");
            assert!((q[0] + 4.0).abs() < 1e-2);
        }
    }
}
