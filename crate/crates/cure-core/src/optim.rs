//! Adam optimizer over per-layer flat parameter vectors.

use crate::network::{Network, UpdateDelta};

/// Adam state: first/second moment estimates matching the network's
/// parameterized-layer layout, plus the step counter for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: UpdateDelta,
    v: UpdateDelta,
    step: u64,
}

impl Adam {
    /// Conventional constants: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(net: &Network) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: UpdateDelta::zeros_like(net),
            v: UpdateDelta::zeros_like(net),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, net: &mut Network, grads: &UpdateDelta, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let mut update = UpdateDelta::zeros_like(net);
        for l in 0..update.num_layers() {
            let g = grads.layer(l);
            let m = self.m.layer_mut(l);
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.layer_mut(l);
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let dst = update.layer_mut(l);
            let m = self.m.layer(l);
            let v = self.v.layer(l);
            for i in 0..dst.len() {
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                dst[i] = -lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        net.apply_delta(&update, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{InitScheme, Layer};

    fn net() -> Network {
        Network::new(vec![2], vec![Layer::affine(2, 2)], 2)
            .unwrap()
            .init(InitScheme::default(), 1)
    }

    #[test]
    fn zero_gradient_leaves_parameters_fixed() {
        let mut n = net();
        let before = n.clone();
        let mut opt = Adam::new(&n);
        let zero = UpdateDelta::zeros_like(&n);
        opt.step(&mut n, &zero, 1e-3);
        assert_eq!(n, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_is_bias_corrected() {
        // With constant gradient g, the first Adam update is
        // -lr * g / (|g| + eps * adjustment) which is approximately
        // -lr * sign(g) for any nonzero g.
        let mut n = net();
        let before = n.clone();
        let mut opt = Adam::new(&n);
        let mut g = UpdateDelta::zeros_like(&n);
        g.layer_mut(0)[0] = 0.5;
        g.layer_mut(0)[3] = -2.0;
        let lr = 1e-3;
        opt.step(&mut n, &g, lr);
        let d = before.delta_to(&n).unwrap();
        let got = d.layer(0);
        // m_hat = g, v_hat = g^2 -> update = -lr * g / (|g| + eps).
        assert!((got[0] + lr * 0.5 / (0.5 + 1e-8)).abs() < 1e-12);
        assert!((got[3] - lr * 2.0 / (2.0 + 1e-8)).abs() < 1e-12);
        assert_eq!(got[1], 0.0);
    }

    #[test]
    fn zero_lr_keeps_parameters_but_decays_moments() {
        let mut n = net();
        let before = n.clone();
        let mut opt = Adam::new(&n);
        let mut g = UpdateDelta::zeros_like(&n);
        g.layer_mut(0).fill(1.0);
        opt.step(&mut n, &g, 0.0);
        assert_eq!(n, before);
        assert!(opt.m.layer(0)[0] != 0.0);
    }

    #[test]
    fn deterministic_sequence() {
        let run = || {
            let mut n = net();
            let mut opt = Adam::new(&n);
            for i in 0..5 {
                let mut g = UpdateDelta::zeros_like(&n);
                for (j, v) in g.layer_mut(0).iter_mut().enumerate() {
                    *v = ((i * 7 + j) as f64 * 0.13).sin();
                }
                opt.step(&mut n, &g, 1e-2);
            }
            n
        };
        assert_eq!(run(), run());
    }
}
