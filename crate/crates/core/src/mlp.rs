//! Small dense multilayer perceptron with hand-written reverse mode.
//!
//! Hidden layers use `tanh`; the output layer is linear. Parameters live in a
//! single flat vector (per layer: row-major weights `out × in`, then biases) so
//! the optimizer can treat the network as one tensor.

use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    input: Vec<f64>,
    /// Post-activation values of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

impl Mlp {
    /// Network with Xavier-uniform hidden layers and a zero output layer,
    /// so the initial output is identically zero.
    pub fn new_zero_output(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        let layers = sizes.len() - 1;
        for (l, win) in sizes.windows(2).enumerate() {
            let (n_in, n_out) = (win[0], win[1]);
            if l + 1 == layers {
                params.extend(std::iter::repeat_n(0.0, n_out * n_in + n_out));
            } else {
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                params.extend((0..n_out * n_in).map(|_| rng.random_range(-bound..bound)));
                params.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        Mlp { sizes: sizes.to_vec(), params }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == Self::param_count_for(&sizes)).then_some(Mlp { sizes, params })
    }

    fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64], cache: &mut MlpCache) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.input_dim());
        cache.input.clear();
        cache.input.extend_from_slice(x);
        cache.hidden.clear();
        let layers = self.sizes.len() - 1;
        let mut offset = 0;
        let mut act: Vec<f64> = x.to_vec();
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[offset..offset + n_out * n_in];
            let b = &self.params[offset + n_out * n_in..offset + n_out * n_in + n_out];
            offset += n_out * n_in + n_out;
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    b[o] + row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < layers {
                out.iter_mut().for_each(|v| *v = v.tanh());
                cache.hidden.push(out.clone());
            }
            act = out;
        }
        act
    }

    /// Backpropagate `grad_out`; parameter gradients are accumulated into
    /// `grad_params` and the input gradient is returned.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad_params.len(), self.params.len());
        let layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut grad: Vec<f64> = grad_out.to_vec();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = if l == 0 { &cache.input } else { &cache.hidden[l - 1] };
            let o = offsets[l];
            let w = &self.params[o..o + n_out * n_in];
            let (gw, gb) = grad_params[o..o + n_out * n_in + n_out].split_at_mut(n_out * n_in);
            let mut grad_in = vec![0.0; n_in];
            for (j, &g) in grad.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[j] += g;
                let row = &w[j * n_in..(j + 1) * n_in];
                let grow = &mut gw[j * n_in..(j + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += g * input[i];
                    grad_in[i] += g * row[i];
                }
            }
            if l > 0 {
                // through tanh of the previous hidden layer
                for (gi, h) in grad_in.iter_mut().zip(&cache.hidden[l - 1]) {
                    *gi *= 1.0 - h * h;
                }
            }
            grad = grad_in;
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomized(sizes: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::new_zero_output(sizes, &mut rng);
        for p in m.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        m
    }

    #[test]
    fn zero_output_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::new_zero_output(&[5, 8, 8, 3], &mut rng);
        let out = m.forward(&[0.3, -1.0, 2.0, 0.0, 0.5], &mut MlpCache::default());
        assert_eq!(out, vec![0.0; 3]);
        assert_eq!(m.params().len(), 5 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = randomized(&[4, 6, 5, 3], 7);
        let x = [0.2, -0.7, 0.9, 0.1];
        let w = [0.3, -1.1, 0.8];
        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            let y = m.forward(x, &mut MlpCache::default());
            y.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let mut cache = MlpCache::default();
        m.forward(&x, &mut cache);
        let mut gp = vec![0.0; m.params().len()];
        let gx = m.backward(&cache, &w, &mut gp);
        let h = 1e-6;
        for i in 0..m.params().len() {
            let mut mp = m.clone();
            mp.params_mut()[i] += h;
            let mut mm = m.clone();
            mm.params_mut()[i] -= h;
            let fd = (loss(&mp, &x) - loss(&mm, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-8, "param {i}: {fd} vs {}", gp[i]);
        }
        for i in 0..4 {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&m, &xp) - loss(&m, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn from_parts_checks_length() {
        assert!(Mlp::from_parts(vec![2, 3], vec![0.0; 9]).is_some());
        assert!(Mlp::from_parts(vec![2, 3], vec![0.0; 8]).is_none());
    }
}
